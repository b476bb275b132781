//! The full detector: prompt reasoning feeding the multi-scale temporal module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::gvr::{self, GesturePromptBank, GvrParams};
use crate::mstr::{self, MstrParams, PredictionPyramid};
use crate::params::{Linear, ParamBuilder, ParamStore};
use crate::tensor::{Backend, Eager, Real, Tensor};

/// Parameter handles for every block of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub gvr: Option<GvrParams>,
    /// Per-frame projection that stands in for prompt reasoning when ablated.
    pub frame_proj: Option<Linear>,
    pub mstr: MstrParams,
}

impl Layout {
    fn build(cfg: &ModelConfig, b: &mut ParamBuilder<'_>) -> Self {
        let (gvr, frame_proj) = if cfg.ablation.gvr {
            (None, Some(b.linear("frame_proj", cfg.width, cfg.d_vis)))
        } else {
            let g = GvrParams::build(
                b,
                cfg.d_vis,
                cfg.d_text,
                cfg.width,
                cfg.heads,
                cfg.window,
                cfg.ffn_mult,
            );
            (Some(g), None)
        };
        let mstr = MstrParams::build(b, cfg);
        Self {
            gvr,
            frame_proj,
            mstr,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CogModel<R = f64> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore<R>,
    /// Frozen prompt embeddings `[J × d_text]`.
    pub prompts: Tensor<R>,
    pub prompt_texts: Vec<String>,
}

impl CogModel<f64> {
    /// Fresh parameters: fan-in scaled uniform weights, zero prediction heads.
    pub fn init(config: ModelConfig, bank: &GesturePromptBank, seed: u64) -> Result<Self> {
        config.validate()?;
        if bank.len() != config.prompts || bank.d_text() != config.d_text {
            return Err(Error::Config(format!(
                "prompt bank is {}x{}, model expects {}x{}",
                bank.len(),
                bank.d_text(),
                config.prompts,
                config.d_text
            )));
        }
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Layout::build(&config, &mut ParamBuilder::new(&mut store, &mut rng));
        Ok(Self {
            config,
            layout,
            params: store,
            prompts: gvr::bank_tensor(bank),
            prompt_texts: bank.texts.clone(),
        })
    }

    /// Same architecture with every parameter replaced by name from `named`.
    pub fn with_params<'a>(
        config: ModelConfig,
        bank: &GesturePromptBank,
        named: impl IntoIterator<Item = (&'a str, &'a Tensor<f64>)>,
    ) -> Result<Self> {
        let mut model = Self::init(config, bank, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, t) in named {
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter `{name}`")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "missing parameter `{}`",
                model.params.name(missing)
            )));
        }
        Ok(model)
    }
}

impl<R: Real> CogModel<R> {
    pub fn cast<S: Real>(&self) -> CogModel<S> {
        CogModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            prompts: self.prompts.cast(),
            prompt_texts: self.prompt_texts.clone(),
        }
    }

    pub fn bank(&self) -> Result<GesturePromptBank> {
        GesturePromptBank::new(self.prompt_texts.clone(), self.prompts.cast())
    }

    fn check_frames(&self, frames: &Tensor<R>) -> Result<usize> {
        let (t, d) = frames.dims2("frames")?;
        if d != self.config.d_vis {
            return Err(Error::Config(format!(
                "frames have {d} features, model expects {}",
                self.config.d_vis
            )));
        }
        if t == 0 {
            return Err(Error::Usage("sequence has no frames".into()));
        }
        Ok(t)
    }

    /// Per-frame features `[F × T]` fed to the temporal module.
    pub fn features<B: Backend<Real = R>>(&self, b: &mut B, frames: &B::Value) -> Result<B::Value> {
        self.check_frames(b.value(frames))?;
        let c = match (&self.layout.gvr, &self.layout.frame_proj) {
            (Some(g), _) => {
                let bank = b.constant(self.prompts.clone());
                gvr::cohesive_sequence(b, g, &self.params, &bank, frames)?
            }
            (None, Some(proj)) => gvr::projected_sequence(b, proj, &self.params, frames)?,
            (None, None) => unreachable!("layout always has a feature block"),
        };
        Ok(c)
    }

    pub fn forward<B: Backend<Real = R>>(
        &self,
        b: &mut B,
        frames: &B::Value,
    ) -> Result<PredictionPyramid<B::Value>> {
        let c = self.features(b, frames)?;
        Ok(mstr::forward(b, &self.layout.mstr, &self.params, &c)?)
    }

    /// Eager batch inference over `frames: [T × d_vis]`.
    pub fn predict(&self, frames: &Tensor<R>) -> Result<PredictionPyramid<Tensor<R>>> {
        let mut e = Eager::<R>::new();
        let x = e.constant(frames.clone());
        let p = self.forward(&mut e, &x)?;
        let unwrap = |v: std::rc::Rc<Tensor<R>>| {
            std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
        };
        Ok(PredictionPyramid {
            slow: p.slow.into_iter().map(unwrap).collect(),
            fast: p.fast.into_iter().map(unwrap).collect(),
            frame: unwrap(p.frame),
            fast_truncated: p.fast_truncated,
        })
    }

    /// Frame-level error probabilities (row 1 of the frame output).
    pub fn error_probabilities(&self, frames: &Tensor<R>) -> Result<Vec<R>> {
        let p = self.predict(frames)?;
        let t = p.frame.shape()[1];
        Ok(p.frame.data()[t..2 * t].to_vec())
    }
}
