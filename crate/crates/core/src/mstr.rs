//! Multi-scale temporal reasoning over the per-frame feature sequence.
//!
//! The slow path runs a single-stage TCN at frame rate and then repeatedly
//! pools by `k`, building a feature pyramid that is merged top-down into
//! predictions at every resolution. The fast path pools by 16 and runs a
//! multi-stage TCN whose refinement stages consume the previous stage's
//! probabilities.
//!
//! Coarse features reach finer levels through a delayed zero-order hold: a
//! pooled value becomes visible only once its whole window has been seen,
//! so every prediction is causal.

use crate::config::ModelConfig;
use crate::params::{Conv, ParamBuilder, ParamStore};
use crate::tensor::{Backend, TensorError};

type Res<T> = Result<T, TensorError>;

pub const NUM_CLASSES: usize = 2;

/// One residual layer: `Z = ReLU(W1 * F + b1)`, `F' = F + W2 * Z + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnLayer {
    pub dilated: Conv,
    pub pointwise: Conv,
}

/// Residual dilated causal convolution stack with dilations `1, 2, 4, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnStage {
    /// 1x1 projection applied when the input width differs from the stage width.
    pub input: Option<Conv>,
    pub layers: Vec<TcnLayer>,
}

impl TcnStage {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        width: usize,
        layers: usize,
        kernel: usize,
    ) -> Self {
        let input = (c_in != width).then(|| b.conv(&format!("{name}.input"), width, c_in, 1, 1));
        let layers = (0..layers)
            .map(|l| TcnLayer {
                dilated: b.conv(
                    &format!("{name}.layer{l}.dilated"),
                    width,
                    width,
                    kernel,
                    1 << l,
                ),
                pointwise: b.conv(&format!("{name}.layer{l}.pointwise"), width, width, 1, 1),
            })
            .collect();
        Self { input, layers }
    }

    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore<B::Real>,
        x: &B::Value,
    ) -> Res<B::Value> {
        let mut f = match &self.input {
            Some(proj) => proj.forward(b, store, x)?,
            None => x.clone(),
        };
        for layer in &self.layers {
            let z = layer.dilated.forward(b, store, &f)?;
            let z = b.relu(&z)?;
            let u = layer.pointwise.forward(b, store, &z)?;
            f = b.add(&f, &u)?;
        }
        Ok(f)
    }

    /// Frames of history that can influence one output: `1 + (w-1)·Σ dilations`.
    pub fn receptive_field(&self, kernel: usize) -> usize {
        1 + (kernel - 1)
            * self
                .layers
                .iter()
                .map(|l| l.dilated.dilation)
                .sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowPath {
    /// `stages[0]` encodes the input; `stages[i]` feeds pooled level `i`.
    pub stages: Vec<TcnStage>,
    pub laterals: Vec<Conv>,
    pub heads: Vec<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FastPath {
    pub stages: Vec<TcnStage>,
    pub heads: Vec<Conv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MstrParams {
    pub slow: Option<SlowPath>,
    pub fast: Option<FastPath>,
    pub pool: usize,
    pub fast_pool: usize,
}

impl MstrParams {
    pub fn build(b: &mut ParamBuilder<'_>, cfg: &ModelConfig) -> Self {
        let (w, kw) = (cfg.width, cfg.kernel_size);
        let c_in = cfg.feature_dim();
        let slow = cfg.ablation.has_slow().then(|| {
            let levels = cfg.effective_slow_stages() + 1;
            let layers = cfg.effective_slow_layers();
            let stages = (0..levels)
                .map(|i| {
                    let inp = if i == 0 { c_in } else { w };
                    TcnStage::build(b, &format!("mstr.slow.stage{i}"), inp, w, layers, kw)
                })
                .collect();
            let laterals = (0..levels)
                .map(|i| b.conv(&format!("mstr.slow.lateral{i}"), w, w, 1, 1))
                .collect();
            let heads = (0..levels)
                .map(|i| b.conv_zero(&format!("mstr.slow.head{i}"), NUM_CLASSES, w))
                .collect();
            SlowPath {
                stages,
                laterals,
                heads,
            }
        });
        let fast = cfg.ablation.has_fast().then(|| {
            let stages = (0..=cfg.fast_stages)
                .map(|j| {
                    let (inp, layers) = if j == 0 {
                        (c_in, cfg.fast_initial_layers)
                    } else {
                        (NUM_CLASSES, cfg.fast_refine_layers)
                    };
                    TcnStage::build(b, &format!("mstr.fast.stage{j}"), inp, w, layers, kw)
                })
                .collect();
            let heads = (0..=cfg.fast_stages)
                .map(|j| b.conv_zero(&format!("mstr.fast.head{j}"), NUM_CLASSES, w))
                .collect();
            FastPath { stages, heads }
        });
        Self {
            slow,
            fast,
            pool: cfg.pool,
            fast_pool: cfg.fast_pool,
        }
    }
}

/// Per-stage class probabilities `[2 × T_level]` at native resolution.
#[derive(Clone, Debug)]
pub struct PredictionPyramid<V> {
    pub slow: Vec<V>,
    pub fast: Vec<V>,
    /// Frame-level output `[2 × T]`; slow level 0 unless the slow path is ablated.
    pub frame: V,
    /// The fast path produced nothing because `T < 16`.
    pub fast_truncated: bool,
}

pub struct SlowOutput<V> {
    pub features: Vec<V>,
    pub probs: Vec<V>,
}

pub struct FastOutput<V> {
    pub probs: Vec<V>,
    pub last_logits: Option<V>,
}

/// Softmax over the class axis of `[C × T]` logits.
pub fn class_softmax<B: Backend>(b: &mut B, logits: &B::Value) -> Res<B::Value> {
    let t = b.transpose(logits)?;
    let s = b.softmax_rows(&t)?;
    b.transpose(&s)
}

pub fn tcn_stage<B: Backend>(
    b: &mut B,
    stage: &TcnStage,
    store: &ParamStore<B::Real>,
    x: &B::Value,
) -> Res<B::Value> {
    stage.forward(b, store, x)
}

/// `f^0 = TCN(c)`, `f^i = AvgPool_k(TCN(f^{i-1}))`, then the top-down pyramid.
pub fn slow_path<B: Backend>(
    b: &mut B,
    slow: &SlowPath,
    pool: usize,
    store: &ParamStore<B::Real>,
    c: &B::Value,
) -> Res<SlowOutput<B::Value>> {
    let mut features = vec![slow.stages[0].forward(b, store, c)?];
    for stage in &slow.stages[1..] {
        let prev = features.last().expect("level 0 exists");
        if b.value(prev).shape()[1] / pool == 0 {
            break;
        }
        let h = stage.forward(b, store, prev)?;
        features.push(b.avg_pool_time(&h, pool)?);
    }

    let mut probs = Vec::with_capacity(features.len());
    let mut above: Option<B::Value> = None;
    for (i, f) in features.iter().enumerate().rev() {
        let lateral = slow.laterals[i].forward(b, store, f)?;
        let merged = match &above {
            Some(coarse) => {
                let len = b.value(f).shape()[1];
                let up = b.hold_upsample(coarse, pool, pool - 1, len)?;
                b.add(&lateral, &up)?
            }
            None => lateral,
        };
        let logits = slow.heads[i].forward(b, store, &merged)?;
        probs.push(class_softmax(b, &logits)?);
        above = Some(merged);
    }
    probs.reverse();
    Ok(SlowOutput { features, probs })
}

pub fn fast_path<B: Backend>(
    b: &mut B,
    fast: &FastPath,
    fast_pool: usize,
    store: &ParamStore<B::Real>,
    c: &B::Value,
) -> Res<FastOutput<B::Value>> {
    let t = b.value(c).shape()[1];
    if t / fast_pool == 0 {
        return Ok(FastOutput {
            probs: Vec::new(),
            last_logits: None,
        });
    }
    let mut input = b.avg_pool_time(c, fast_pool)?;
    let mut probs = Vec::with_capacity(fast.stages.len());
    let mut last_logits = None;
    for (stage, head) in fast.stages.iter().zip(&fast.heads) {
        let h = stage.forward(b, store, &input)?;
        let logits = head.forward(b, store, &h)?;
        let p = class_softmax(b, &logits)?;
        probs.push(p.clone());
        input = p;
        last_logits = Some(logits);
    }
    Ok(FastOutput { probs, last_logits })
}

/// Runs both paths over `c: [F × T]`.
pub fn forward<B: Backend>(
    b: &mut B,
    params: &MstrParams,
    store: &ParamStore<B::Real>,
    c: &B::Value,
) -> Res<PredictionPyramid<B::Value>> {
    let t = b.value(c).shape()[1];
    let slow = match &params.slow {
        Some(s) => Some(slow_path(b, s, params.pool, store, c)?),
        None => None,
    };
    let fast = match &params.fast {
        Some(f) => Some(fast_path(b, f, params.fast_pool, store, c)?),
        None => None,
    };
    let fast_truncated = params.fast.is_some() && t / params.fast_pool == 0;
    let (slow_probs, frame) = match slow {
        Some(s) => {
            let frame = s.probs[0].clone();
            (s.probs, frame)
        }
        None => {
            // frame output held from the last fast stage; uniform until the
            // first 16-frame window completes
            let f = fast.as_ref().expect("config keeps one path");
            let held = match &f.last_logits {
                Some(l) => b.hold_upsample(l, params.fast_pool, params.fast_pool - 1, t)?,
                None => b.constant(crate::tensor::Tensor::zeros(vec![NUM_CLASSES, t])),
            };
            (Vec::new(), class_softmax(b, &held)?)
        }
    };
    Ok(PredictionPyramid {
        slow: slow_probs,
        fast: fast.map(|f| f.probs).unwrap_or_default(),
        frame,
        fast_truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Eager, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stage(c_in: usize, width: usize, layers: usize) -> (TcnStage, ParamStore<f64>) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let s = TcnStage::build(&mut b, "s", c_in, width, layers, 3);
        (s, store)
    }

    fn signal(c: usize, t: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        Tensor::new(
            vec![c, t],
            (0..c * t).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_update_is_pass_through() {
        let (s, mut store) = stage(4, 4, 3);
        for l in &s.layers {
            for id in [l.pointwise.weight, l.pointwise.bias] {
                store.get_mut(id).data_mut().fill(0.0);
            }
        }
        let x = signal(4, 9, 1);
        let mut e = Eager::new();
        let input = e.constant(x.clone());
        let y = s.forward(&mut e, &store, &input).unwrap();
        assert_eq!(*y, x);
    }

    #[test]
    fn output_shape_any_length() {
        let (s, store) = stage(5, 4, 2);
        let mut e = Eager::new();
        for t in [1, 2, 7] {
            let input = e.constant(signal(5, t, 2));
            let y = s.forward(&mut e, &store, &input).unwrap();
            assert_eq!(y.shape(), &[4, t]);
        }
    }

    #[test]
    fn ten_layer_receptive_field() {
        let (s, mut store) = stage(4, 4, 10);
        // keep every ReLU active so the single extreme path cannot be dead
        for l in &s.layers {
            store.get_mut(l.dilated.bias).data_mut().fill(100.0);
        }
        let rf = s.receptive_field(3);
        assert_eq!(rf, 1 + 2 * ((1 << 10) - 1));
        assert_eq!(rf, 2047);
        let t = rf + 1;
        let x = signal(4, t, 3);
        let mut e = Eager::new();
        let input = e.constant(x.clone());
        let y = s.forward(&mut e, &store, &input).unwrap();
        let last = |y: &Tensor<f64>| (0..4).map(|c| y.data()[c * t + t - 1]).collect::<Vec<_>>();
        // frame 0 is 2047 steps before the last frame: outside the field
        let mut far = x.clone();
        for c in 0..4 {
            far.data_mut()[c * t] += 1.0;
        }
        let input = e.constant(far);
        let y_far = s.forward(&mut e, &store, &input).unwrap();
        assert_eq!(last(&y), last(&y_far));
        // frame 1 is 2046 steps back: still inside
        let mut near = x.clone();
        for c in 0..4 {
            near.data_mut()[c * t + 1] += 1.0;
        }
        let input = e.constant(near);
        let y_near = s.forward(&mut e, &store, &input).unwrap();
        assert_ne!(last(&y), last(&y_near));
    }
}
