#![allow(dead_code)]

use cog_core::gvr::GesturePromptBank;
use cog_core::{CogModel, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn bank(j: usize, d_text: usize, seed: u64) -> GesturePromptBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..j * d_text)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    GesturePromptBank::new(
        (0..j).map(|i| format!("g{i}")).collect(),
        Tensor::new(vec![j, d_text], v).unwrap(),
    )
    .unwrap()
}

/// Initialized model with the zero-initialized heads redrawn, so every
/// output depends on its inputs.
pub fn model(cfg: ModelConfig, seed: u64) -> CogModel<f64> {
    let b = bank(cfg.prompts, cfg.d_text, seed);
    let mut m = CogModel::init(cfg, &b, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in 0..m.params.len() {
        if m.params.name(id).contains("head") {
            for v in m.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

pub fn frames(t: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![t, d],
        (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Small configuration with every structural knob drawn at random.
pub fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let ablation = match rng.random_range(0..6) {
        0 => Some("gvr"),
        1 => Some("mstr"),
        2 => Some("slow"),
        3 => Some("fast"),
        _ => None,
    };
    ModelConfig {
        d_vis: rng.random_range(1..=10),
        d_text: rng.random_range(1..=6),
        prompts: rng.random_range(1..=4),
        width: heads * rng.random_range(1..=3),
        heads,
        window: rng.random_range(1..=12),
        slow_stages: rng.random_range(0..=3),
        fast_stages: rng.random_range(0..=3),
        pool: [2, 4][rng.random_range(0..2)],
        slow_layers: rng.random_range(1..=4),
        fast_initial_layers: rng.random_range(1..=4),
        fast_refine_layers: rng.random_range(1..=4),
        kernel_size: rng.random_range(1..=3),
        ffn_mult: rng.random_range(1..=2),
        ablation: ablation
            .map(|a| cog_core::Ablation::parse(a).unwrap())
            .unwrap_or_default(),
        ..ModelConfig::default()
    }
}
