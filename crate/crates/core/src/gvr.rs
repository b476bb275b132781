//! Gestural-visual reasoning: a bank of fixed gesture prompts attends over
//! the most recent frame embeddings, then re-attends over the prompt bank
//! itself. The `J` resulting prompt features are concatenated into one
//! cohesive feature per frame.

use crate::error::{Error, Result};
use crate::params::{Linear, Norm, ParamBuilder, ParamStore};
use crate::tensor::{Backend, Real, Tensor, TensorError};

/// Gesture descriptions of the common suturing vocabulary (G1..G15).
pub const GESTURE_VOCABULARY: [&str; 15] = [
    "reaching for needle with right hand",
    "positioning needle",
    "pushing needle through tissue",
    "transferring needle from left to right",
    "moving to center with needle in grip",
    "pulling suture with left hand",
    "pulling suture with right hand",
    "orienting needle",
    "using right hand to help tighten suture",
    "loosening more suture",
    "dropping suture at end and moving to end points",
    "reaching for needle with left hand",
    "making C loop around right hand",
    "reaching for suture with right hand",
    "pulling suture with both hands",
];

/// Fills the prompt template for one gesture description.
pub fn render_prompt(gesture_text: &str) -> Result<String> {
    if gesture_text.trim().is_empty() {
        return Err(Error::Usage("gesture text must not be empty".into()));
    }
    Ok(format!("A surgeon is {gesture_text} in the surgery"))
}

/// Fixed prompt embeddings `g_j` with the text they were produced from.
#[derive(Clone, Debug, PartialEq)]
pub struct GesturePromptBank {
    pub texts: Vec<String>,
    /// `[J × d_text]`
    pub vectors: Tensor<f32>,
}

impl GesturePromptBank {
    pub fn new(texts: Vec<String>, vectors: Tensor<f32>) -> Result<Self> {
        let (j, _) = vectors.dims2("prompt bank")?;
        if j == 0 {
            return Err(Error::Usage("prompt bank needs at least one prompt".into()));
        }
        if texts.len() != j {
            return Err(Error::Usage(format!(
                "prompt bank has {} texts for {j} vectors",
                texts.len()
            )));
        }
        Ok(Self { texts, vectors })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn d_text(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Learnable weights of the prompt transformer and its input projections.
#[derive(Clone, Debug, PartialEq)]
pub struct GvrParams {
    pub vis_proj: Linear,
    pub text_proj: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: Norm,
    pub heads: usize,
    pub window: usize,
}

impl GvrParams {
    pub fn build(
        b: &mut ParamBuilder<'_>,
        d_vis: usize,
        d_text: usize,
        width: usize,
        heads: usize,
        window: usize,
        ffn_mult: usize,
    ) -> Self {
        Self {
            vis_proj: b.linear("gvr.vis_proj", width, d_vis),
            text_proj: b.linear("gvr.text_proj", width, d_text),
            query: b.linear("gvr.attn.query", width, width),
            key: b.linear("gvr.attn.key", width, width),
            value: b.linear("gvr.attn.value", width, width),
            out: b.linear("gvr.attn.out", width, width),
            norm1: b.norm("gvr.norm1", width),
            ffn_in: b.linear("gvr.ffn.in", ffn_mult * width, width),
            ffn_out: b.linear("gvr.ffn.out", width, ffn_mult * width),
            norm2: b.norm("gvr.norm2", width),
            heads,
            window,
        }
    }
}

/// Projected prompt bank `[J×d]` and the transformer queries derived from it.
pub struct ProjectedPrompts<V> {
    pub prompts: V,
    pub queries: V,
}

pub fn project_prompts<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    bank: &B::Value,
) -> Result<ProjectedPrompts<B::Value>, TensorError> {
    let prompts = p.text_proj.forward(b, store, bank)?;
    let queries = p.query.forward(b, store, &prompts)?;
    Ok(ProjectedPrompts { prompts, queries })
}

/// Keys and values `[m×d]` for frame embeddings `[m × d_vis]`.
pub fn project_frames<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    frames: &B::Value,
) -> Result<(B::Value, B::Value), TensorError> {
    let lp = p.vis_proj.forward(b, store, frames)?;
    let k = p.key.forward(b, store, &lp)?;
    let v = p.value.forward(b, store, &lp)?;
    Ok((k, v))
}

/// Post-attention transformer block, row-wise over `attended: [r×d]` with
/// the residual `prompts: [r×d]`:
/// `X = LN1(P + A Woᵀ)`, `Q^E = LN2(X + FFN(X))`.
fn transformer_tail<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    prompts: &B::Value,
    attended: &B::Value,
) -> Result<B::Value, TensorError> {
    let o = p.out.forward(b, store, attended)?;
    let r1 = b.add(prompts, &o)?;
    let x1 = p.norm1.forward(b, store, &r1)?;
    let h = p.ffn_in.forward(b, store, &x1)?;
    let h = b.relu(&h)?;
    let f = p.ffn_out.forward(b, store, &h)?;
    let r2 = b.add(&x1, &f)?;
    p.norm2.forward(b, store, &r2)
}

/// Refined prompt features `Q^E: [J×d]` for one window of `m` frames given
/// the window's keys and values.
pub fn refine_prompts<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    projected: &ProjectedPrompts<B::Value>,
    keys: &B::Value,
    values: &B::Value,
) -> Result<B::Value, TensorError> {
    let a = b.attention(&projected.queries, keys, values, p.heads)?;
    transformer_tail(b, p, store, &projected.prompts, &a)
}

/// Spatial-aware prompt features `g′ = Atten(Q^E, P, P)`.
pub fn attend_prompts<B: Backend>(
    b: &mut B,
    refined: &B::Value,
    prompts: &B::Value,
) -> Result<B::Value, TensorError> {
    b.attention(refined, prompts, prompts, 1)
}

/// Row-major concatenation of `g′: [J×d]` into `[1 × J·d]`.
pub fn cohesive_feature<B: Backend>(b: &mut B, g: &B::Value) -> Result<B::Value, TensorError> {
    let n = b.value(g).numel();
    b.reshape(g, vec![1, n])
}

/// Cohesive features for every frame of `frames: [T × d_vis]`, returned as
/// `[J·d × T]`. Frame `t` sees frames `max(0, t+1-n)..=t` only.
pub fn cohesive_sequence<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    bank: &B::Value,
    frames: &B::Value,
) -> Result<B::Value, TensorError> {
    let t = b.value(frames).shape()[0];
    let projected = project_prompts(b, p, store, bank)?;
    let (j, d) = b.value(&projected.prompts).dims2("cohesive_sequence")?;
    let (k, v) = project_frames(b, p, store, frames)?;
    let attended = b.windowed_attention(&projected.queries, &k, &v, p.heads, p.window)?;
    let prompts_all = b.tile_rows(&projected.prompts, t)?;
    let refined = transformer_tail(b, p, store, &prompts_all, &attended)?;
    // keys and values are the same prompt bank for every frame, so all
    // frames' query rows can go through one attention call
    let g = attend_prompts(b, &refined, &projected.prompts)?;
    let rows = b.reshape(&g, vec![t, j * d])?;
    b.transpose(&rows)
}

/// Single-window convenience used by tests and tooling: `Q^E` for the
/// given frames `[m × d_vis]`.
pub fn refine_window<B: Backend>(
    b: &mut B,
    p: &GvrParams,
    store: &ParamStore<B::Real>,
    bank: &B::Value,
    frames: &B::Value,
) -> Result<B::Value, TensorError> {
    let projected = project_prompts(b, p, store, bank)?;
    let (k, v) = project_frames(b, p, store, frames)?;
    refine_prompts(b, p, store, &projected, &k, &v)
}

/// Ablated replacement: a learned per-frame projection `[d × T]`.
pub fn projected_sequence<B: Backend>(
    b: &mut B,
    proj: &Linear,
    store: &ParamStore<B::Real>,
    frames: &B::Value,
) -> Result<B::Value, TensorError> {
    let y = proj.forward(b, store, frames)?;
    b.transpose(&y)
}

/// Converts a prompt bank to the model precision.
pub fn bank_tensor<R: Real>(bank: &GesturePromptBank) -> Tensor<R> {
    bank.vectors.cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn setup(j: usize, d: usize, n: usize) -> (GvrParams, ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut builder = ParamBuilder::new(&mut store, &mut rng);
        let p = GvrParams::build(&mut builder, 7, 6, d, 4, n, 4);
        let bank = Tensor::new(
            vec![j, 6],
            (0..j * 6)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0)
                .collect(),
        )
        .unwrap();
        (p, store, bank)
    }

    fn frames(m: usize, seed: usize) -> Tensor<f64> {
        Tensor::new(
            vec![m, 7],
            (0..m * 7)
                .map(|i| (((i + seed) * 13 % 17) as f64 - 8.0) / 4.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn prompt_template() {
        assert_eq!(
            render_prompt("pulling suture").unwrap(),
            "A surgeon is pulling suture in the surgery"
        );
        assert_eq!(
            render_prompt("orienting needle").unwrap(),
            "A surgeon is orienting needle in the surgery"
        );
        assert!(render_prompt("").is_err());
    }

    #[test]
    fn refine_shape_reference_scale() {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut builder = ParamBuilder::new(&mut store, &mut rng);
        let p = GvrParams::build(&mut builder, 32, 16, 64, 4, 40, 4);
        let mut e = Eager::<f64>::new();
        let bank = e.constant(Tensor::zeros(vec![15, 16]));
        let f = e.constant(
            Tensor::new(vec![40, 32], (0..1280).map(|i| (i as f64).sin()).collect()).unwrap(),
        );
        let qe = refine_window(&mut e, &p, &store, &bank, &f).unwrap();
        assert_eq!(qe.shape(), &[15, 64]);
        let input = e.constant(Tensor::zeros(vec![15, 64]));
        let g = attend_prompts(&mut e, &qe, &input).unwrap();
        assert_eq!(g.shape(), &[15, 64]);
        assert_eq!(cohesive_feature(&mut e, &g).unwrap().shape(), &[1, 960]);
    }

    #[test]
    fn identical_frames_get_uniform_weights() {
        let q = Tensor::new(vec![2, 4], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, 1.0, -1.0]).unwrap();
        let k = Tensor::new(vec![5, 4], [0.3, 0.1, -0.7, 2.0].repeat(5)).unwrap();
        let (_, probs) =
            crate::tensor::kernels::attention(q.data(), k.data(), k.data(), 2, 5, 4, 4, 4);
        for w in probs {
            assert!((w - 0.2f64).abs() < 1e-15);
        }
    }

    #[test]
    fn prompt_permutation_permutes_rows() {
        let (p, store, bank) = setup(4, 8, 5);
        let mut e = Eager::<f64>::new();
        let f = e.constant(frames(5, 0));
        let input = e.constant(bank.clone());
        let qe = refine_window(&mut e, &p, &store, &input, &f).unwrap();
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| bank.row(i).to_vec()).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let input = e.constant(permuted);
        let qp = refine_window(&mut e, &p, &store, &input, &f).unwrap();
        for (r, &src) in perm.iter().enumerate() {
            for (a, b) in qp.row(r).iter().zip(qe.row(src)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_prompt_attend_returns_value() {
        let mut e = Eager::<f64>::new();
        let qe = e.constant(Tensor::new(vec![1, 3], vec![4.0, -1.0, 2.0]).unwrap());
        let pr = e.constant(Tensor::new(vec![1, 3], vec![0.5, 0.25, -0.75]).unwrap());
        let g = attend_prompts(&mut e, &qe, &pr).unwrap();
        assert_eq!(g.data(), pr.data());
    }

    #[test]
    fn orthogonal_keys_pick_matching_value() {
        // softmax([100,0]/√2) puts 1 - e^{-70.7} on the first key
        let mut e = Eager::<f64>::new();
        let qe = e.constant(Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap());
        let pr = e.constant(Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap());
        let g = attend_prompts(&mut e, &qe, &pr).unwrap();
        assert!((g.data()[0] - 10.0).abs() < 1e-3 && g.data()[1].abs() < 1e-3);
        assert!(g.data()[2].abs() < 1e-3 && (g.data()[3] - 10.0).abs() < 1e-3);
    }

    #[test]
    fn cohesive_concatenates_rows() {
        let mut e = Eager::<f64>::new();
        let g = e.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(
            cohesive_feature(&mut e, &g).unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        let z = e.constant(Tensor::zeros(vec![15, 64]));
        let c = cohesive_feature(&mut e, &z).unwrap();
        assert_eq!(c.numel(), 960);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_matches_per_window_and_ignores_old_frames() {
        let (p, store, bank) = setup(3, 8, 4);
        let mut e = Eager::<f64>::new();
        let bank = e.constant(bank);
        let all = frames(9, 1);
        let input = e.constant(all.clone());
        let seq = cohesive_sequence(&mut e, &p, &store, &bank, &input).unwrap();
        assert_eq!(seq.shape(), &[24, 9]);
        let seq_t = seq.transpose().unwrap();
        for t in 0..9usize {
            let start = (t + 1).saturating_sub(4);
            let rows: Vec<Vec<f64>> = (start..=t).map(|i| all.row(i).to_vec()).collect();
            let w = e.constant(Tensor::from_rows(&rows).unwrap());
            let qe = refine_window(&mut e, &p, &store, &bank, &w).unwrap();
            let pp = project_prompts(&mut e, &p, &store, &bank).unwrap();
            let g = attend_prompts(&mut e, &qe, &pp.prompts).unwrap();
            let c = cohesive_feature(&mut e, &g).unwrap();
            for (a, b) in c.data().iter().zip(seq_t.row(t)) {
                assert!((a - b).abs() < 1e-12, "frame {t}");
            }
        }
        // frame t-n lies outside the window of frame t
        let mut perturbed = all.clone();
        for v in &mut perturbed.data_mut()[7..14] {
            *v += 3.0;
        }
        let seq2 = cohesive_sequence(&mut e, &p, &store, &bank, &Rc::new(perturbed)).unwrap();
        let (a, b) = (seq.transpose().unwrap(), seq2.transpose().unwrap());
        assert_eq!(a.row(5), b.row(5));
        assert_ne!(a.row(4), b.row(4));
    }
}
