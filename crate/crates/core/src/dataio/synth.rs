//! Synthetic gesture-structured embedding streams with injected errors.
//!
//! A hidden gesture chain drives per-frame cluster centers. Every gesture
//! segment is either procedural (the whole segment is erroneous or not) or
//! executional (short chunks inside the segment are erroneous). In both
//! cases a frame is erroneous with the gesture's configured rate in
//! expectation. Erroneous frames are shifted along a gesture-specific
//! signature direction. Prompts are the cluster centers pushed through a
//! random projection into the text space, so they carry the same gesture
//! structure as the frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, EmbeddingSequence, Video, DEFAULT_FPS};
use crate::error::{Error, Result};
use crate::gvr::{render_prompt, GesturePromptBank, GESTURE_VOCABULARY};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Gesture vocabulary size `J`.
    pub gestures: usize,
    pub d_vis: usize,
    pub d_text: usize,
    /// Row-stochastic `J × J` gesture transition matrix. When absent, each
    /// gesture persists for `mean_segment` frames on average and then moves
    /// to a uniformly chosen different gesture.
    pub transition: Option<Vec<Vec<f64>>>,
    pub mean_segment: f64,
    /// Per-gesture error probability; a single entry applies to all gestures.
    pub error_rates: Vec<f64>,
    /// Probability that an erroneous-candidate segment is procedural.
    pub procedural_fraction: f64,
    /// Inclusive length range of executional error chunks.
    pub executional_len: (usize, usize),
    /// Norm of the cluster centers.
    pub separation: f64,
    /// Norm of the error signature shift.
    pub error_shift: f64,
    /// Per-coordinate Gaussian frame noise.
    pub sigma: f64,
    /// Norm of each prompt vector before noise.
    pub prompt_norm: f64,
    /// Per-coordinate Gaussian noise added to the projected prompts.
    pub prompt_noise: f64,
    /// Per-video multiplicative gain drawn log-uniformly from `[1/g, g]`.
    pub video_gain: f64,
    /// Norm of a per-video additive offset.
    pub video_offset: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_videos: 5,
            min_len: 280,
            max_len: 320,
            gestures: 5,
            d_vis: 64,
            d_text: 32,
            transition: None,
            mean_segment: 27.0,
            error_rates: vec![0.4],
            procedural_fraction: 0.5,
            executional_len: (2, 6),
            separation: 8.0,
            error_shift: 8.0,
            sigma: 0.05,
            prompt_norm: 8.0,
            prompt_noise: 0.01,
            video_gain: 1.0,
            video_offset: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.gestures == 0 || self.d_vis == 0 || self.d_text == 0 {
            return bad("gestures, d_vis and d_text must be positive".into());
        }
        if self.min_len > self.max_len {
            return bad(format!(
                "min_len {} exceeds max_len {}",
                self.min_len, self.max_len
            ));
        }
        if let Some(m) = &self.transition {
            if m.len() != self.gestures || m.iter().any(|r| r.len() != self.gestures) {
                return bad(format!("transition matrix must be {0}x{0}", self.gestures));
            }
            for (i, row) in m.iter().enumerate() {
                if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return bad(format!("transition row {i} has an entry outside [0, 1]"));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return bad(format!("transition row {i} sums to {s}"));
                }
            }
        } else if self.mean_segment.is_nan() || self.mean_segment < 1.0 {
            return bad("mean_segment must be at least 1".into());
        }
        if self.error_rates.len() != 1 && self.error_rates.len() != self.gestures {
            return bad(format!("expected 1 or {} error rates", self.gestures));
        }
        if self.error_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("error rates must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.procedural_fraction) {
            return bad("procedural_fraction must lie in [0, 1]".into());
        }
        let (lo, hi) = self.executional_len;
        if lo == 0 || lo > hi {
            return bad("executional_len must be a non-empty range of positive lengths".into());
        }
        let nonneg = [
            ("separation", self.separation),
            ("error_shift", self.error_shift),
            ("sigma", self.sigma),
            ("prompt_norm", self.prompt_norm),
            ("prompt_noise", self.prompt_noise),
            ("video_offset", self.video_offset),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !self.video_gain.is_finite() || self.video_gain < 1.0 {
            return bad("video_gain must be at least 1".into());
        }
        Ok(())
    }

    fn rate(&self, g: usize) -> f64 {
        if self.error_rates.len() == 1 {
            self.error_rates[0]
        } else {
            self.error_rates[g]
        }
    }

    fn transition_row(&self, g: usize) -> Vec<f64> {
        match &self.transition {
            Some(m) => m[g].clone(),
            None => {
                let j = self.gestures;
                if j == 1 {
                    return vec![1.0];
                }
                let stay = 1.0 - 1.0 / self.mean_segment;
                (0..j)
                    .map(|h| {
                        if h == g {
                            stay
                        } else {
                            (1.0 - stay) / (j - 1) as f64
                        }
                    })
                    .collect()
            }
        }
    }
}

/// Gaussian vector scaled to the given expected norm.
fn gaussian(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (n as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Hidden gesture per frame.
fn gesture_chain(cfg: &SynthConfig, rng: &mut ChaCha8Rng, t: usize) -> Vec<usize> {
    let rows: Vec<Vec<f64>> = (0..cfg.gestures).map(|g| cfg.transition_row(g)).collect();
    let mut out = Vec::with_capacity(t);
    let mut g = rng.random_range(0..cfg.gestures);
    for i in 0..t {
        if i > 0 {
            g = sample_categorical(rng, &rows[g]);
        }
        out.push(g);
    }
    out
}

/// Error labels for a gesture sequence.
fn error_labels(cfg: &SynthConfig, rng: &mut ChaCha8Rng, gestures: &[usize]) -> Vec<u8> {
    let mut labels = vec![0u8; gestures.len()];
    let mut start = 0;
    while start < gestures.len() {
        let g = gestures[start];
        let end = gestures[start..]
            .iter()
            .position(|&h| h != g)
            .map_or(gestures.len(), |p| start + p);
        let rate = cfg.rate(g);
        if rng.random_bool(cfg.procedural_fraction) {
            if rng.random_bool(rate) {
                labels[start..end].fill(1);
            }
        } else {
            let (lo, hi) = cfg.executional_len;
            let mut s = start;
            while s < end {
                let e = (s + rng.random_range(lo..=hi)).min(end);
                if rng.random_bool(rate) {
                    labels[s..e].fill(1);
                }
                s = e;
            }
        }
        start = end;
    }
    labels
}

fn prompt_texts(j: usize) -> Result<Vec<String>> {
    (0..j)
        .map(|g| match GESTURE_VOCABULARY.get(g) {
            Some(text) => render_prompt(text),
            None => render_prompt(&format!("performing gesture {}", g + 1)),
        })
        .collect()
}

/// Deterministic synthetic dataset. Video `i` is assigned surgeon `i / 5`
/// and trial `i % 5 + 1`, so five consecutive videos form one surgeon.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (j, dv, dt) = (cfg.gestures, cfg.d_vis, cfg.d_text);
    let centers: Vec<Vec<f64>> = (0..j)
        .map(|_| gaussian(&mut rng, dv, cfg.separation))
        .collect();
    let signatures: Vec<Vec<f64>> = (0..j)
        .map(|_| gaussian(&mut rng, dv, cfg.error_shift))
        .collect();

    let projection = gaussian(&mut rng, dv * dt, (dt as f64).sqrt());
    let mut bank = Vec::with_capacity(j * dt);
    for c in &centers {
        let row: Vec<f64> = (0..dt)
            .map(|o| (0..dv).map(|i| c[i] * projection[i * dt + o]).sum())
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row {
            let noise: f64 = StandardNormal.sample(&mut rng);
            bank.push((cfg.prompt_norm * v / norm + cfg.prompt_noise * noise) as f32);
        }
    }
    let prompts = GesturePromptBank::new(prompt_texts(j)?, Tensor::new(vec![j, dt], bank)?)?;

    let mut videos = Vec::with_capacity(cfg.num_videos);
    for i in 0..cfg.num_videos {
        let t = rng.random_range(cfg.min_len..=cfg.max_len);
        let gestures = gesture_chain(cfg, &mut rng, t);
        let labels = error_labels(cfg, &mut rng, &gestures);
        let gain = if cfg.video_gain > 1.0 {
            let l = cfg.video_gain.ln();
            rng.random_range(-l..=l).exp()
        } else {
            1.0
        };
        let offset = gaussian(&mut rng, dv, cfg.video_offset);
        let mut data = Vec::with_capacity(t * dv);
        for (f, &g) in gestures.iter().enumerate() {
            let err = f64::from(labels[f]);
            for k in 0..dv {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let x = centers[g][k] + err * signatures[g][k] + cfg.sigma * noise;
                data.push((gain * x + offset[k]) as f32);
            }
        }
        let sequence =
            EmbeddingSequence::new(Tensor::new(vec![t, dv], data)?, DEFAULT_FPS, Some(labels))?;
        videos.push(Video {
            id: format!("video{i:03}"),
            surgeon: (i / 5) as u32 + 1,
            trial: (i % 5) as u32 + 1,
            sequence,
        });
    }
    Ok(Dataset { videos, prompts })
}

/// Hidden gesture sequence and labels for one video, exposed for tests.
#[doc(hidden)]
pub fn sample_structure(cfg: &SynthConfig, seed: u64, t: usize) -> (Vec<usize>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = gesture_chain(cfg, &mut rng, t);
    let l = error_labels(cfg, &mut rng, &g);
    (g, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::encode_embeddings;

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            num_videos: 3,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(
                encode_embeddings(&x.sequence).unwrap(),
                encode_embeddings(&y.sequence).unwrap()
            );
        }
        assert_eq!(a.prompts, b.prompts);
        let c = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.videos[0].sequence, c.videos[0].sequence);
    }

    #[test]
    fn noiseless_full_rate_labels_are_gesture_indicator() {
        let mut rates = vec![0.0; 4];
        rates[2] = 1.0;
        let cfg = SynthConfig {
            gestures: 4,
            error_rates: rates,
            sigma: 0.0,
            ..Default::default()
        };
        for seed in 0..5 {
            let (g, l) = sample_structure(&cfg, seed, 400);
            let indicator: Vec<u8> = g.iter().map(|&h| (h == 2) as u8).collect();
            assert_eq!(l, indicator);
        }
    }

    #[test]
    fn identity_transition_is_single_gesture() {
        let j = 4;
        let eye = (0..j)
            .map(|i| (0..j).map(|k| f64::from(u8::from(i == k))).collect())
            .collect();
        let cfg = SynthConfig {
            gestures: j,
            transition: Some(eye),
            ..Default::default()
        };
        for seed in 0..5 {
            let (g, _) = sample_structure(&cfg, seed, 200);
            assert!(g.iter().all(|&h| h == g[0]));
        }
    }

    #[test]
    fn invalid_transition_rejected() {
        let cfg = SynthConfig {
            gestures: 2,
            transition: Some(vec![vec![0.5, 0.4], vec![0.0, 1.0]]),
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(Error::Usage(_))));
        let neg = SynthConfig {
            gestures: 2,
            transition: Some(vec![vec![1.5, -0.5], vec![0.0, 1.0]]),
            ..Default::default()
        };
        assert!(synth_generate(&neg).is_err());
    }

    #[test]
    fn prevalence_matches_rate() {
        for rate in [0.1, 0.35, 0.65] {
            let cfg = SynthConfig {
                error_rates: vec![rate],
                mean_segment: 10.0,
                ..Default::default()
            };
            let mut ones = 0usize;
            let mut total = 0usize;
            for seed in 0..10 {
                let (_, l) = sample_structure(&cfg, seed, 4000);
                ones += l.iter().map(|&v| v as usize).sum::<usize>();
                total += l.len();
            }
            let p = ones as f64 / total as f64;
            assert!((p - rate).abs() < 0.05, "rate {rate} gave {p}");
        }
    }

    #[test]
    fn separable_at_zero_noise() {
        let cfg = SynthConfig {
            sigma: 0.0,
            num_videos: 2,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        // Each distinct frame vector maps to exactly one label.
        let mut seen: Vec<(Vec<u32>, u8)> = Vec::new();
        for v in &ds.videos {
            let l = v.sequence.labels.as_ref().unwrap();
            for t in 0..v.sequence.len() {
                let key: Vec<u32> = v.sequence.frame(t).iter().map(|x| x.to_bits()).collect();
                match seen.iter().find(|(k, _)| *k == key) {
                    Some((_, lab)) => assert_eq!(*lab, l[t]),
                    None => seen.push((key, l[t])),
                }
            }
        }
        assert!(seen.len() <= 2 * cfg.gestures);
    }

    #[test]
    fn loso_identity_assignment() {
        let ds = synth_generate(&SynthConfig {
            num_videos: 10,
            min_len: 5,
            max_len: 5,
            ..Default::default()
        })
        .unwrap();
        let ids: Vec<(u32, u32)> = ds.videos.iter().map(|v| (v.surgeon, v.trial)).collect();
        assert_eq!(ids[0], (1, 1));
        assert_eq!(ids[4], (1, 5));
        assert_eq!(ids[7], (2, 3));
    }
}
