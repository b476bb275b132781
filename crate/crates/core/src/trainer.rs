//! Adam optimization over whole videos, one sequence per step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::gvr::GesturePromptBank;
use crate::model::CogModel;
use crate::objective::{total_loss, LabelPyramid, LossConfig};
use crate::params::{to_f32_grid, ParamStore};
use crate::tensor::{Backend, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the smoothing term.
    pub lambda: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 50,
            lambda: 0.15,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ..LossConfig::default()
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f64>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Bias-corrected Adam update. `grads[i] == None` means a zero gradient.
///
/// Parameters and moments are rounded to the nearest `f32` after the update
/// so that checkpoints reproduce them exactly. Nothing is modified when a
/// gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore<f64>,
    grads: &[Option<&Tensor<f64>>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Usage(format!(
                    "gradient shape mismatch for `{}`",
                    params.name(id)
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`",
                    params.name(id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (id, g) in grads.iter().enumerate() {
        let p = params.get_mut(id).data_mut();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = to_f32_grid(b1 * m[i] + (1.0 - b1) * gi);
            v[i] = to_f32_grid(b2 * v[i] + (1.0 - b2) * gi * gi);
            let step = cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            p[i] = to_f32_grid(p[i] - step);
        }
    }
    Ok(())
}

/// Everything needed to continue training: the checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: CogModel<f64>,
    pub train: TrainConfig,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn init(model: ModelConfig, train: TrainConfig, bank: &GesturePromptBank) -> Result<Self> {
        train.validate()?;
        let model = CogModel::init(model, bank, train.seed)?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            train,
            adam,
            epoch: 0,
            losses: Vec::new(),
        })
    }
}

/// Loss breakdown for one video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

fn check_dataset(model: &CogModel<f64>, ds: &Dataset) -> Result<()> {
    if ds.videos.is_empty() {
        return Err(Error::Usage("dataset has no videos".into()));
    }
    for v in &ds.videos {
        if v.sequence.is_empty() {
            return Err(Error::Usage(format!("video `{}` has no frames", v.id)));
        }
        if v.sequence.labels.is_none() {
            return Err(Error::Usage(format!("video `{}` has no labels", v.id)));
        }
        if v.sequence.d_vis() != model.config.d_vis {
            return Err(Error::Config(format!(
                "video `{}` has {} features, model expects {}",
                v.id,
                v.sequence.d_vis(),
                model.config.d_vis
            )));
        }
    }
    Ok(())
}

/// Loss and parameter gradients for one labelled sequence.
pub fn loss_and_grads(
    model: &CogModel<f64>,
    frames: &Tensor<f64>,
    labels: &[u8],
    loss: &LossConfig,
) -> Result<(StepLoss, Vec<Option<Tensor<f64>>>)> {
    let mut g = Graph::new();
    let x = g.constant(frames.clone());
    let pyramid = model.forward(&mut g, &x)?;
    let targets = LabelPyramid::for_config(labels, &model.config)?;
    let terms = total_loss(&mut g, &pyramid, &targets, loss)?;
    let step = StepLoss {
        ce: g.get(terms.ce).item(),
        mse: g.get(terms.mse).item(),
        total: g.get(terms.total).item(),
    };
    if !step.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (ce {}, smoothing {})",
            step.ce, step.mse
        )));
    }
    let grads = g.backward(terms.total)?;
    let out = (0..model.params.len())
        .map(|id| grads.param(id).cloned())
        .collect();
    Ok((step, out))
}

/// Video visiting order for one epoch; depends only on the seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs epochs until `state.train.epochs` are complete, reporting each
/// finished epoch and its mean loss to `on_epoch`.
pub fn train_with(
    mut state: TrainState,
    ds: &Dataset,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainState> {
    state.train.validate()?;
    check_dataset(&state.model, ds)?;
    let loss_cfg = state.train.loss();
    let frames: Vec<Tensor<f64>> = ds.videos.iter().map(|v| v.sequence.frames.cast()).collect();
    while state.epoch < state.train.epochs {
        let mut sum = 0.0;
        for i in epoch_order(state.train.seed, state.epoch, ds.videos.len()) {
            let video = &ds.videos[i];
            let labels = video.sequence.labels.as_deref().expect("checked above");
            let (step, grads) = loss_and_grads(&state.model, &frames[i], labels, &loss_cfg)
                .map_err(|e| match e {
                    Error::Numeric(m) => {
                        Error::Numeric(format!("epoch {}, video `{}`: {m}", state.epoch, video.id))
                    }
                    other => other,
                })?;
            let refs: Vec<Option<&Tensor<f64>>> = grads.iter().map(Option::as_ref).collect();
            adam_step(
                &mut state.model.params,
                &refs,
                &mut state.adam,
                &state.train,
            )?;
            sum += step.total;
        }
        let mean = sum / ds.videos.len() as f64;
        state.losses.push(mean);
        state.epoch += 1;
        on_epoch(state.epoch, mean);
    }
    Ok(state)
}

pub fn train(state: TrainState, ds: &Dataset) -> Result<TrainState> {
    train_with(state, ds, |_, _| {})
}
