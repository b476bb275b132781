//! Finite-difference check of the taped gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::gvr::GesturePromptBank;
use crate::model::CogModel;
use crate::objective::{total_loss, LabelPyramid, LossConfig};
use crate::tensor::{Backend, Eager, Tensor};
use crate::trainer::loss_and_grads;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that vanishing gradients compare absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub frames: usize,
    /// Entries probed per parameter tensor; smaller tensors are probed fully.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl GradCheckConfig {
    /// J=3, n=5, d=8, one stage per path, 20 frames.
    pub fn mini(seed: u64) -> Self {
        Self {
            model: ModelConfig::mini(),
            frames: 20,
            samples_per_tensor: 24,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn eager_loss(
    model: &CogModel<f64>,
    frames: &Tensor<f64>,
    targets: &LabelPyramid,
    loss: &LossConfig,
) -> Result<f64> {
    let mut e = Eager::<f64>::new();
    let x = e.constant(frames.clone());
    let p = model.forward(&mut e, &x)?;
    Ok(total_loss(&mut e, &p, targets, loss)?.total.item())
}

/// Random model, frames and labels. Heads are zero at init, so they are
/// redrawn to let gradients reach every parameter.
pub fn random_problem(cfg: &GradCheckConfig) -> Result<(CogModel<f64>, Tensor<f64>, Vec<u8>)> {
    let m = &cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let texts = (0..m.prompts).map(|j| format!("gesture {j}")).collect();
    let bank = Tensor::new(
        vec![m.prompts, m.d_text],
        (0..m.prompts * m.d_text)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let bank = GesturePromptBank::new(texts, bank)?;
    let mut model = CogModel::init(m.clone(), &bank, cfg.seed)?;
    for id in 0..model.params.len() {
        if model.params.name(id).contains("head") {
            for v in model.params.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let t = cfg.frames;
    let frames = Tensor::new(
        vec![t, m.d_vis],
        (0..t * m.d_vis)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let labels = (0..t).map(|_| u8::from(rng.random_bool(0.5))).collect();
    Ok((model, frames, labels))
}

pub fn run(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut model, frames, labels) = random_problem(cfg)?;
    let loss = LossConfig::default();
    let (step, grads) = loss_and_grads(&model, &frames, &labels, &loss)?;
    let targets = LabelPyramid::for_config(&labels, &model.config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut probes = Vec::new();
    for id in 0..model.params.len() {
        let numel = model.params.get(id).numel();
        let picks = sample(&mut rng, numel, numel.min(cfg.samples_per_tensor)).into_vec();
        for i in picks {
            let analytic = grads[id].as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + STEP;
            let up = eager_loss(&model, &frames, &targets, &loss)?;
            model.params.get_mut(id).data_mut()[i] = orig - STEP;
            let down = eager_loss(&model, &frames, &targets, &loss)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            probes.push(ProbeResult {
                param: model.params.name(id).to_owned(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(GradCheckReport {
        probes,
        loss: step.total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn eager_and_taped_losses_agree() {
        let cfg = GradCheckConfig::mini(3);
        let (model, frames, labels) = random_problem(&cfg).unwrap();
        let loss = LossConfig::default();
        let (step, _) = loss_and_grads(&model, &frames, &labels, &loss).unwrap();
        let targets = LabelPyramid::for_config(&labels, &model.config).unwrap();
        let e = eager_loss(&model, &frames, &targets, &loss).unwrap();
        assert!((e - step.total).abs() < 1e-12);
    }

    #[test]
    fn mini_check_passes() {
        let r = run(&GradCheckConfig {
            samples_per_tensor: 4,
            ..GradCheckConfig::mini(1)
        })
        .unwrap();
        assert!(r.passed(), "{:?}", r.worst());
        assert!(r.probes.iter().any(|p| p.analytic.abs() > 1e-4));
    }

    #[test]
    #[ignore = "slow sweep"]
    fn full_check_many_seeds() {
        for seed in 0..20 {
            let r = run(&GradCheckConfig::mini(seed)).unwrap();
            println!(
                "seed {seed}: {} probes, max {:.3e} {:?}",
                r.probes.len(),
                r.max_rel_error(),
                r.worst().map(|p| &p.param)
            );
            assert!(r.passed());
        }
    }
}
