//! Multi-scale prediction-consistency objective.
//!
//! Frame labels are downsampled to every pyramid resolution; each level
//! contributes a cross-entropy term and an adjacent-step smoothing term.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mstr::PredictionPyramid;
use crate::tensor::{Backend, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the smoothing term.
    pub lambda: f64,
    /// Probability floor inside the log.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            eps: 1e-8,
        }
    }
}

/// Window label: erroneous iff at least half of its frames are (ties count as errors).
#[inline]
pub fn majority_label(window: &[u8]) -> u8 {
    let ones = window.iter().filter(|&&v| v != 0).count();
    u8::from(2 * ones >= window.len() && !window.is_empty())
}

/// Non-overlapping left-aligned windows of `factor` frames; the remainder is dropped.
pub fn downsample_labels(y: &[u8], factor: usize) -> Result<Vec<u8>> {
    if factor < 1 {
        return Err(Error::Usage("downsampling factor must be >= 1".into()));
    }
    Ok(y.chunks_exact(factor).map(majority_label).collect())
}

/// Labels aligned with every level of a [`PredictionPyramid`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelPyramid {
    pub slow: Vec<Vec<u8>>,
    pub fast: Vec<Vec<u8>>,
}

impl LabelPyramid {
    /// Slow level `i` summarizes `k^i` frames per element; fast levels summarize 16.
    pub fn for_config(frame_labels: &[u8], cfg: &ModelConfig) -> Result<Self> {
        if frame_labels.iter().any(|&v| v > 1) {
            return Err(Error::Usage("labels must be 0 or 1".into()));
        }
        let t = frame_labels.len();
        let slow = cfg
            .slow_lengths(t)
            .iter()
            .enumerate()
            .map(|(i, _)| downsample_labels(frame_labels, cfg.pool.pow(i as u32)))
            .collect::<Result<Vec<_>>>()?;
        let fast_len = cfg.fast_len(t);
        let fast = if fast_len == 0 {
            Vec::new()
        } else {
            let f = downsample_labels(frame_labels, cfg.fast_pool)?;
            vec![f; cfg.fast_stages + 1]
        };
        Ok(Self { slow, fast })
    }
}

/// Loss components as backend values.
pub struct LossTerms<V> {
    pub ce: V,
    pub mse: V,
    pub total: V,
}

fn level_len<B: Backend>(b: &B, v: &B::Value) -> usize {
    b.value(v).shape()[1]
}

fn path_average<B: Backend>(b: &mut B, terms: Vec<B::Value>) -> Result<B::Value> {
    if terms.is_empty() {
        return Ok(b.constant(Tensor::scalar(num_traits::zero())));
    }
    let n = terms.len();
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = b.add(&acc, t)?;
    }
    Ok(b.scale(&acc, 1.0 / n as f64)?)
}

fn path_ce<B: Backend>(
    b: &mut B,
    probs: &[B::Value],
    labels: &[Vec<u8>],
    eps: f64,
) -> Result<B::Value> {
    if probs.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} prediction levels vs {} label levels",
            probs.len(),
            labels.len()
        )));
    }
    let mut terms = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(labels) {
        if level_len(b, p) != y.len() {
            return Err(Error::Usage(format!(
                "level of length {} vs {} labels",
                level_len(b, p),
                y.len()
            )));
        }
        terms.push(b.nll(p, y, eps)?);
    }
    path_average(b, terms)
}

/// Per-level mean cross-entropy, averaged across levels within each path,
/// summed over the two paths.
pub fn ce_multiscale<B: Backend>(
    b: &mut B,
    pyramid: &PredictionPyramid<B::Value>,
    labels: &LabelPyramid,
    eps: f64,
) -> Result<B::Value> {
    let slow = path_ce(b, &pyramid.slow, &labels.slow, eps)?;
    let fast = path_ce(b, &pyramid.fast, &labels.fast, eps)?;
    Ok(b.add(&slow, &fast)?)
}

/// Adjacent-step squared change of the error probability, normalized by
/// level length, averaged across levels within each path, summed over paths.
pub fn mse_smooth<B: Backend>(
    b: &mut B,
    pyramid: &PredictionPyramid<B::Value>,
) -> Result<B::Value> {
    let mut paths = Vec::with_capacity(2);
    for levels in [&pyramid.slow, &pyramid.fast] {
        let mut terms = Vec::with_capacity(levels.len());
        for p in levels {
            terms.push(b.adjacent_sq_diff(p)?);
        }
        paths.push(path_average(b, terms)?);
    }
    Ok(b.add(&paths[0], &paths[1])?)
}

/// `L = L_CE + λ·L_MSE`.
pub fn total_loss<B: Backend>(
    b: &mut B,
    pyramid: &PredictionPyramid<B::Value>,
    labels: &LabelPyramid,
    cfg: &LossConfig,
) -> Result<LossTerms<B::Value>> {
    if cfg.lambda < 0.0 {
        return Err(Error::Usage("lambda must be non-negative".into()));
    }
    let ce = ce_multiscale(b, pyramid, labels, cfg.eps)?;
    let mse = mse_smooth(b, pyramid)?;
    let weighted = b.scale(&mse, cfg.lambda)?;
    let total = b.add(&ce, &weighted)?;
    Ok(LossTerms { ce, mse, total })
}
