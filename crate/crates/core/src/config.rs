//! Architecture configuration shared by the model, the trainer and the
//! streaming engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Module switches used for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Replace the gesture-prompt reasoning with a learned projection of each frame embedding.
    pub gvr: bool,
    /// Replace the temporal module with a per-frame classifier.
    pub mstr: bool,
    /// Drop the pooled feature pyramid path and its loss terms.
    pub slow: bool,
    /// Drop the 16x pooled refinement path and its loss terms.
    pub fast: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "gvr" => a.gvr = true,
            "mstr" => a.mstr = true,
            "slow" => a.slow = true,
            "fast" => a.fast = true,
            other => return Err(Error::Usage(format!("unknown ablation `{other}`"))),
        }
        Ok(a)
    }

    pub fn has_slow(&self) -> bool {
        !self.slow
    }

    pub fn has_fast(&self) -> bool {
        !self.fast && !self.mstr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Frame embedding width.
    pub d_vis: usize,
    /// Prompt embedding width.
    pub d_text: usize,
    /// Number of gesture prompts `J`.
    pub prompts: usize,
    /// Model width `d`, also the temporal convolution width.
    pub width: usize,
    pub heads: usize,
    /// Frames visible to the prompt transformer (`n`).
    pub window: usize,
    /// Pooled slow stages `M`.
    pub slow_stages: usize,
    /// Refinement stages `N`.
    pub fast_stages: usize,
    /// Slow path pooling factor `k`.
    pub pool: usize,
    pub fast_pool: usize,
    pub slow_layers: usize,
    pub fast_initial_layers: usize,
    pub fast_refine_layers: usize,
    pub kernel_size: usize,
    pub ffn_mult: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_vis: 2048,
            d_text: 512,
            prompts: 15,
            width: 64,
            heads: 4,
            window: 40,
            slow_stages: 3,
            fast_stages: 3,
            pool: 4,
            fast_pool: 16,
            slow_layers: 10,
            fast_initial_layers: 10,
            fast_refine_layers: 11,
            kernel_size: 3,
            ffn_mult: 4,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_vis", self.d_vis),
            ("d_text", self.d_text),
            ("prompts", self.prompts),
            ("width", self.width),
            ("heads", self.heads),
            ("window", self.window),
            ("pool", self.pool),
            ("fast_pool", self.fast_pool),
            ("kernel_size", self.kernel_size),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.ablation.slow && (self.ablation.fast || self.ablation.mstr) {
            return Err(Error::Config(
                "ablating the slow path needs the fast path for frame predictions".into(),
            ));
        }
        Ok(())
    }

    /// Channels of the per-frame feature fed to the temporal module.
    pub fn feature_dim(&self) -> usize {
        if self.ablation.gvr {
            self.width
        } else {
            self.prompts * self.width
        }
    }

    /// Pooled slow stages actually built.
    pub fn effective_slow_stages(&self) -> usize {
        if self.ablation.mstr {
            0
        } else {
            self.slow_stages
        }
    }

    pub fn effective_slow_layers(&self) -> usize {
        if self.ablation.mstr {
            0
        } else {
            self.slow_layers
        }
    }

    /// Slow pyramid lengths `T^0..` with `T^{i+1} = ⌊T^i/k⌋`, stopping before zero.
    pub fn slow_lengths(&self, t: usize) -> Vec<usize> {
        if !self.ablation.has_slow() {
            return Vec::new();
        }
        let mut lens = Vec::new();
        let mut len = t;
        for _ in 0..=self.effective_slow_stages() {
            if len == 0 {
                break;
            }
            lens.push(len);
            len /= self.pool;
        }
        lens
    }

    /// Fast path length `⌊T/16⌋`, or zero when the path is disabled.
    pub fn fast_len(&self, t: usize) -> usize {
        if self.ablation.has_fast() {
            t / self.fast_pool
        } else {
            0
        }
    }

    /// Compact configuration used by gradient checks and tests.
    pub fn mini() -> Self {
        Self {
            d_vis: 6,
            d_text: 5,
            prompts: 3,
            width: 8,
            heads: 4,
            window: 5,
            slow_stages: 1,
            fast_stages: 1,
            ..Self::default()
        }
    }
}
