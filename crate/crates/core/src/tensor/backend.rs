use std::marker::PhantomData;
use std::rc::Rc;

use super::kernels as k;
use super::{arg_err, shape_err, Real, Tensor, TensorError};

type Res<T> = Result<T, TensorError>;

/// The op set the model is written against.
///
/// Matrices are row-major `[rows × cols]`; temporal signals are
/// `[channels × time]`. Every op fails on shape mismatch and on non-finite
/// output.
pub trait Backend {
    type Real: Real;
    type Value: Clone;

    fn constant(&mut self, t: Tensor<Self::Real>) -> Self::Value;
    /// A trainable parameter identified by its slot in the parameter store.
    fn param(&mut self, id: usize, t: &Tensor<Self::Real>) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<Self::Real>;

    /// `[m×k] · [k×n]`
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    /// `[m×k] · [n×k]ᵀ`
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    fn scale(&mut self, a: &Self::Value, s: f64) -> Res<Self::Value>;
    /// Adds `b: [n]` to every row of `x: [m×n]`.
    fn add_row_bias(&mut self, x: &Self::Value, b: &Self::Value) -> Res<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Res<Self::Value>;
    fn softmax_rows(&mut self, x: &Self::Value) -> Res<Self::Value>;
    /// Per-row normalization over the last axis with learnable gain and offset.
    fn layer_norm_rows(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        offset: &Self::Value,
    ) -> Res<Self::Value>;
    /// Multi-head `softmax(QKᵀ/√d_h) V`.
    fn attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        heads: usize,
    ) -> Res<Self::Value>;
    /// For every time step `t` of `k, v: [T×d]`, attends `q: [J×d]` over rows
    /// `max(0, t+1-window)..=t`. Output is `[T·J × d]`, frame-major.
    fn windowed_attention(
        &mut self,
        q: &Self::Value,
        k: &Self::Value,
        v: &Self::Value,
        heads: usize,
        window: usize,
    ) -> Res<Self::Value>;
    fn conv1d_causal(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        dilation: usize,
    ) -> Res<Self::Value>;
    fn avg_pool_time(&mut self, x: &Self::Value, k: usize) -> Res<Self::Value>;
    fn hold_upsample(
        &mut self,
        x: &Self::Value,
        k: usize,
        delay: usize,
        out_len: usize,
    ) -> Res<Self::Value>;
    /// Stacks `x: [m×n]` `times` times along rows.
    fn tile_rows(&mut self, x: &Self::Value, times: usize) -> Res<Self::Value>;
    fn slice_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Res<Self::Value>;
    fn concat_rows(&mut self, xs: &[Self::Value]) -> Res<Self::Value>;
    fn transpose(&mut self, x: &Self::Value) -> Res<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: Vec<usize>) -> Res<Self::Value>;
    fn sum(&mut self, x: &Self::Value) -> Res<Self::Value>;
    fn mean(&mut self, x: &Self::Value) -> Res<Self::Value>;
    /// `-(1/T) Σ_t log(max(p[label_t, t], eps))` for `probs: [C×T]`.
    fn nll(&mut self, probs: &Self::Value, labels: &[u8], eps: f64) -> Res<Self::Value>;
    /// `(1/T) Σ_{t≥1} (p[1,t] - p[1,t-1])²` for `probs: [C×T]`.
    fn adjacent_sq_diff(&mut self, probs: &Self::Value) -> Res<Self::Value>;
}

/// Immediate evaluation in either precision.
#[derive(Debug, Default)]
pub struct Eager<R> {
    _marker: PhantomData<R>,
}

impl<R: Real> Eager<R> {
    pub fn new() -> Self {
        Self {
            _marker: PhantomData,
        }
    }
}

// Shape checks shared by both backends.

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Res<(usize, usize, usize)> {
    match (a, b) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *k1, *n)),
        _ => Err(shape_err("matmul", format!("{a:?} x {b:?}"))),
    }
}

pub(crate) fn check_matmul_nt(a: &[usize], b: &[usize]) -> Res<(usize, usize, usize)> {
    match (a, b) {
        ([m, k1], [n, k2]) if k1 == k2 => Ok((*m, *k1, *n)),
        _ => Err(shape_err("matmul_nt", format!("{a:?} x {b:?}ᵀ"))),
    }
}

pub(crate) fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Res<()> {
    if a == b {
        Ok(())
    } else {
        Err(shape_err(op, format!("{a:?} vs {b:?}")))
    }
}

pub(crate) fn check_row_bias(x: &[usize], b: &[usize]) -> Res<(usize, usize)> {
    match (x, b) {
        ([m, n], [nb]) if n == nb => Ok((*m, *n)),
        _ => Err(shape_err("add_row_bias", format!("{x:?} + {b:?}"))),
    }
}

pub(crate) fn check_attention(
    q: &[usize],
    k: &[usize],
    v: &[usize],
    heads: usize,
) -> Res<(usize, usize, usize, usize)> {
    let (a, d) = match q {
        [a, d] => (*a, *d),
        _ => return Err(shape_err("attention", format!("query {q:?}"))),
    };
    let (b, dv) = match (k, v) {
        ([b, dk], [bv, dv]) if *dk == d && b == bv => (*b, *dv),
        _ => return Err(shape_err("attention", format!("q {q:?}, k {k:?}, v {v:?}"))),
    };
    if d == 0 || heads == 0 || d % heads != 0 || dv % heads != 0 {
        return Err(arg_err(
            "attention",
            format!("d={d}, dv={dv}, heads={heads}"),
        ));
    }
    if b == 0 {
        return Err(shape_err("attention", "no keys"));
    }
    Ok((a, b, d, dv))
}

pub(crate) fn check_conv(
    x: &[usize],
    w: &[usize],
    b: &[usize],
    dilation: usize,
) -> Res<(usize, usize, usize, usize)> {
    if dilation < 1 {
        return Err(arg_err("conv1d_causal", "dilation must be >= 1"));
    }
    match (x, w, b) {
        ([c_in, t], [c_out, c_in2, width], [c_out2])
            if c_in == c_in2 && c_out == c_out2 && *width >= 1 && *t >= 1 =>
        {
            Ok((*c_in, *c_out, *width, *t))
        }
        _ => Err(shape_err(
            "conv1d_causal",
            format!("input {x:?}, kernel {w:?}, bias {b:?}"),
        )),
    }
}

pub(crate) fn check_probs(op: &'static str, p: &[usize]) -> Res<(usize, usize)> {
    match p {
        [c, t] if *c >= 2 => Ok((*c, *t)),
        _ => Err(shape_err(
            op,
            format!("probabilities must be [C×T], got {p:?}"),
        )),
    }
}

/// Output rows, per-row attention weights, key count and value width.
pub(crate) type WindowedFwd<R> = (Vec<R>, Vec<Vec<R>>, usize, usize);

pub(crate) fn windowed_attention_fwd<R: Real>(
    q: &Tensor<R>,
    kk: &Tensor<R>,
    v: &Tensor<R>,
    heads: usize,
    window: usize,
) -> Res<WindowedFwd<R>> {
    if window == 0 {
        return Err(arg_err("windowed_attention", "window must be >= 1"));
    }
    let (j, _, d, dv) = check_attention(q.shape(), kk.shape(), v.shape(), heads)?;
    let t = kk.shape()[0];
    let mut out = Vec::with_capacity(t * j * dv);
    let mut probs = Vec::with_capacity(t);
    for step in 0..t {
        let start = (step + 1).saturating_sub(window);
        let b = step + 1 - start;
        let (o, p) = k::attention(
            q.data(),
            &kk.data()[start * d..(step + 1) * d],
            &v.data()[start * dv..(step + 1) * dv],
            j,
            b,
            d,
            dv,
            heads,
        );
        out.extend_from_slice(&o);
        probs.push(p);
    }
    Ok((out, probs, j, dv))
}

pub(crate) fn nll_fwd<R: Real>(p: &Tensor<R>, labels: &[u8], eps: f64) -> Res<R> {
    let (c, t) = check_probs("nll", p.shape())?;
    if labels.len() != t || t == 0 {
        return Err(shape_err(
            "nll",
            format!("{t} steps vs {} labels", labels.len()),
        ));
    }
    let eps = R::of_f64(eps);
    let mut acc = R::zero();
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= c {
            return Err(arg_err("nll", format!("label {y} out of range")));
        }
        acc += p.data()[y * t + i].max(eps).ln();
    }
    Ok(-acc / R::of_f64(t as f64))
}

pub(crate) fn adjacent_sq_diff_fwd<R: Real>(p: &Tensor<R>) -> Res<R> {
    let (_, t) = check_probs("adjacent_sq_diff", p.shape())?;
    if t == 0 {
        return Err(shape_err("adjacent_sq_diff", "empty sequence"));
    }
    let row = &p.data()[t..2 * t];
    let mut acc = R::zero();
    for i in 1..t {
        let d = row[i] - row[i - 1];
        acc += d * d;
    }
    Ok(acc / R::of_f64(t as f64))
}

fn wrap<R: Real>(op: &'static str, shape: Vec<usize>, data: Vec<R>) -> Res<Rc<Tensor<R>>> {
    Ok(Rc::new(Tensor::new(shape, data)?.ensure_finite(op)?))
}

impl<R: Real> Backend for Eager<R> {
    type Real = R;
    type Value = Rc<Tensor<R>>;

    fn constant(&mut self, t: Tensor<R>) -> Self::Value {
        Rc::new(t)
    }

    fn param(&mut self, _id: usize, t: &Tensor<R>) -> Self::Value {
        Rc::new(t.clone())
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<R> {
        v
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        let (m, kk, n) = check_matmul(a.shape(), b.shape())?;
        wrap(
            "matmul",
            vec![m, n],
            k::matmul(a.data(), b.data(), m, kk, n),
        )
    }

    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        let (m, kk, n) = check_matmul_nt(a.shape(), b.shape())?;
        wrap(
            "matmul_nt",
            vec![m, n],
            k::matmul_nt(a.data(), b.data(), m, kk, n),
        )
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        check_same("add", a.shape(), b.shape())?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        wrap("add", a.shape().to_vec(), d)
    }

    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        check_same("sub", a.shape(), b.shape())?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x - y)
            .collect();
        wrap("sub", a.shape().to_vec(), d)
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        check_same("mul", a.shape(), b.shape())?;
        let d = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        wrap("mul", a.shape().to_vec(), d)
    }

    fn scale(&mut self, a: &Self::Value, s: f64) -> Res<Self::Value> {
        let s = R::of_f64(s);
        wrap(
            "scale",
            a.shape().to_vec(),
            a.data().iter().map(|&x| x * s).collect(),
        )
    }

    fn add_row_bias(&mut self, x: &Self::Value, b: &Self::Value) -> Res<Self::Value> {
        let (_, n) = check_row_bias(x.shape(), b.shape())?;
        let mut d = x.data().to_vec();
        if n > 0 {
            for row in d.chunks_mut(n) {
                for (v, &bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
        }
        wrap("add_row_bias", x.shape().to_vec(), d)
    }

    fn relu(&mut self, x: &Self::Value) -> Res<Self::Value> {
        Ok(Rc::new(x.map(|v| v.max(R::zero()))))
    }

    fn softmax_rows(&mut self, x: &Self::Value) -> Res<Self::Value> {
        let (_, c) = x.dims2("softmax_rows")?;
        let mut d = x.data().to_vec();
        k::softmax_rows_in_place(&mut d, c);
        wrap("softmax_rows", x.shape().to_vec(), d)
    }

    fn layer_norm_rows(
        &mut self,
        x: &Self::Value,
        gain: &Self::Value,
        offset: &Self::Value,
    ) -> Res<Self::Value> {
        let (_, c) = check_row_bias(x.shape(), gain.shape())?;
        check_same("layer_norm_rows", gain.shape(), offset.shape())?;
        let (out, _, _) = k::layer_norm_rows(x.data(), c, gain.data(), offset.data());
        wrap("layer_norm_rows", x.shape().to_vec(), out)
    }

    fn attention(
        &mut self,
        q: &Self::Value,
        kk: &Self::Value,
        v: &Self::Value,
        heads: usize,
    ) -> Res<Self::Value> {
        let (a, b, d, dv) = check_attention(q.shape(), kk.shape(), v.shape(), heads)?;
        let (out, _) = k::attention(q.data(), kk.data(), v.data(), a, b, d, dv, heads);
        wrap("attention", vec![a, dv], out)
    }

    fn windowed_attention(
        &mut self,
        q: &Self::Value,
        kk: &Self::Value,
        v: &Self::Value,
        heads: usize,
        window: usize,
    ) -> Res<Self::Value> {
        let (out, _, j, dv) = windowed_attention_fwd(q, kk, v, heads, window)?;
        wrap("windowed_attention", vec![kk.shape()[0] * j, dv], out)
    }

    fn conv1d_causal(
        &mut self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        dilation: usize,
    ) -> Res<Self::Value> {
        let (c_in, c_out, width, t) = check_conv(x.shape(), w.shape(), b.shape(), dilation)?;
        let out = k::conv1d_causal(
            x.data(),
            w.data(),
            b.data(),
            c_in,
            c_out,
            width,
            t,
            dilation,
        );
        wrap("conv1d_causal", vec![c_out, t], out)
    }

    fn avg_pool_time(&mut self, x: &Self::Value, kk: usize) -> Res<Self::Value> {
        if kk < 1 {
            return Err(arg_err("avg_pool_time", "k must be >= 1"));
        }
        let (c, t) = x.dims2("avg_pool_time")?;
        wrap(
            "avg_pool_time",
            vec![c, t / kk],
            k::avg_pool_time(x.data(), c, t, kk),
        )
    }

    fn hold_upsample(
        &mut self,
        x: &Self::Value,
        kk: usize,
        delay: usize,
        out_len: usize,
    ) -> Res<Self::Value> {
        if kk < 1 {
            return Err(arg_err("hold_upsample", "k must be >= 1"));
        }
        let (c, t) = x.dims2("hold_upsample")?;
        let out = k::hold_upsample(x.data(), c, t, kk, delay, out_len);
        wrap("hold_upsample", vec![c, out_len], out)
    }

    fn tile_rows(&mut self, x: &Self::Value, times: usize) -> Res<Self::Value> {
        let (r, c) = x.dims2("tile_rows")?;
        wrap("tile_rows", vec![r * times, c], x.data().repeat(times))
    }

    fn slice_rows(&mut self, x: &Self::Value, start: usize, end: usize) -> Res<Self::Value> {
        let (r, c) = x.dims2("slice_rows")?;
        if start > end || end > r {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        wrap(
            "slice_rows",
            vec![end - start, c],
            x.data()[start * c..end * c].to_vec(),
        )
    }

    fn concat_rows(&mut self, xs: &[Self::Value]) -> Res<Self::Value> {
        let cols = match xs.first() {
            Some(x) => x.dims2("concat_rows")?.1,
            None => return Err(shape_err("concat_rows", "nothing to concatenate")),
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for x in xs {
            let (r, c) = x.dims2("concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(x.data());
        }
        wrap("concat_rows", vec![rows, cols], data)
    }

    fn transpose(&mut self, x: &Self::Value) -> Res<Self::Value> {
        Ok(Rc::new(x.transpose()?))
    }

    fn reshape(&mut self, x: &Self::Value, shape: Vec<usize>) -> Res<Self::Value> {
        Ok(Rc::new((**x).clone().reshape(shape)?))
    }

    fn sum(&mut self, x: &Self::Value) -> Res<Self::Value> {
        let mut s = R::zero();
        for &v in x.data() {
            s += v;
        }
        wrap("sum", vec![1], vec![s])
    }

    fn mean(&mut self, x: &Self::Value) -> Res<Self::Value> {
        if x.numel() == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let mut s = R::zero();
        for &v in x.data() {
            s += v;
        }
        wrap("mean", vec![1], vec![s / R::of_f64(x.numel() as f64)])
    }

    fn nll(&mut self, probs: &Self::Value, labels: &[u8], eps: f64) -> Res<Self::Value> {
        let v = nll_fwd(probs, labels, eps)?;
        wrap("nll", vec![1], vec![v])
    }

    fn adjacent_sq_diff(&mut self, probs: &Self::Value) -> Res<Self::Value> {
        let v = adjacent_sq_diff_fwd(probs)?;
        wrap("adjacent_sq_diff", vec![1], vec![v])
    }
}
