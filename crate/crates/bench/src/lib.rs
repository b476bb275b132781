//! Fixtures shared by the criterion benchmarks.

use cog_core::gvr::GesturePromptBank;
use cog_core::{CogModel, ModelConfig, StreamEngine, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random prompt bank of the given shape.
pub fn random_bank(j: usize, d_text: usize, seed: u64) -> GesturePromptBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..j * d_text)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    GesturePromptBank::new(
        (0..j).map(|i| format!("gesture {i}")).collect(),
        Tensor::new(vec![j, d_text], v).unwrap(),
    )
    .unwrap()
}

/// Model at the given configuration with every parameter, heads included,
/// nonzero.
pub fn random_model(cfg: ModelConfig, seed: u64) -> CogModel<f64> {
    let bank = random_bank(cfg.prompts, cfg.d_text, seed);
    let mut m = CogModel::init(cfg, &bank, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for id in 0..m.params.len() {
        if m.params.name(id).contains("head") {
            for v in m.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

pub fn random_frames(t: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![t, d],
        (0..t * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

/// Single-precision engine at the default (reference) scale.
pub fn reference_scale_engine(seed: u64) -> StreamEngine<f32> {
    StreamEngine::new(&random_model(ModelConfig::default(), seed)).unwrap()
}
