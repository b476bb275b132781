use super::backend::{
    adjacent_sq_diff_fwd, check_attention, check_conv, check_matmul, check_matmul_nt, check_probs,
    check_row_bias, check_same, nll_fwd, windowed_attention_fwd, Backend,
};
use super::kernels as k;
use super::{arg_err, shape_err, Tensor, TensorError};

type Res<T> = Result<T, TensorError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, [usize; 3]),
    MatMulNt(Var, Var, [usize; 3]),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    WindowedAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        window: usize,
        probs: Vec<Vec<f64>>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    AvgPool(Var, usize),
    Hold {
        x: Var,
        k: usize,
        delay: usize,
    },
    TileRows(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Nll {
        p: Var,
        labels: Vec<u8>,
        eps: f64,
    },
    AdjacentSqDiff(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor<f64>>>,
    leaves: Vec<(Var, Tensor<f64>)>,
}

impl Gradients {
    /// Gradient for the parameter slot `id`, if it influenced the loss.
    pub fn param(&self, id: usize) -> Option<&Tensor<f64>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    /// Gradient for a leaf created with [`Graph::leaf`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor<f64>> {
        self.leaves.iter().find(|(l, _)| *l == v).map(|(_, t)| t)
    }
}

/// Recording tape in 64-bit floats.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// the backward sweep simply walks node indices downward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    param_ids: Vec<(Var, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<f64>, requires_grad: bool) -> Var {
        self.push_raw(t, Op::Leaf, requires_grad)
    }

    pub fn get(&self, v: Var) -> &Tensor<f64> {
        &self.nodes[v.0].value
    }

    fn push_raw(&mut self, value: Tensor<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Res<Var> {
        let value = Tensor::new(shape, data)?.ensure_finite(name)?;
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b, _) | Op::MatMulNt(a, b, _) => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::AvgPool(a, _)
            | Op::TileRows(a, _)
            | Op::SliceRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::AdjacentSqDiff(a) => vec![*a],
            Op::LayerNorm {
                x, gain, offset, ..
            } => vec![*x, *gain, *offset],
            Op::Attention { q, k, v, .. } | Op::WindowedAttention { q, k, v, .. } => {
                vec![*q, *k, *v]
            }
            Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
            Op::Hold { x, .. } => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
            Op::Nll { p, .. } => vec![*p],
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Res<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            params: vec![None; self.param_vars.len()],
            leaves: Vec::new(),
        };

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFiniteGradient { node: id });
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match self.param_ids.iter().find(|(v, _)| v.0 == id) {
                        Some(&(_, pid)) => out.params[pid] = Some(t),
                        None => out.leaves.push((Var(id), t)),
                    }
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor<f64>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b, [m, kk, n]) => {
                if self.needs(a) {
                    self.accumulate(grads, a, k::matmul_nt(g, self.val(b), m, n, kk));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, k::matmul_tn(self.val(a), g, m, kk, n));
                }
            }
            &Op::MatMulNt(a, b, [m, kk, n]) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.needs(a) {
                    self.accumulate(grads, a, k::matmul(g, self.val(b), m, n, kk));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, k::matmul_tn(g, self.val(a), m, n, kk));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                self.accumulate(grads, a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                self.accumulate(grads, b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.iter().map(|v| v * s).collect()),
            &Op::AddRowBias(x, b) => {
                let n = self.nodes[b.0].value.numel();
                if self.needs(b) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, db);
                }
                self.accumulate(grads, x, g.to_vec());
            }
            &Op::Relu(x) => {
                let xv = self.val(x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, d);
            }
            &Op::SoftmaxRows(x) => {
                let cols = out.shape()[1];
                self.accumulate(grads, x, k::softmax_rows_backward(out.data(), g, cols));
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            } => {
                let cols = self.nodes[gain.0].value.numel();
                let (dx, dg, db) =
                    k::layer_norm_rows_backward(xhat, inv_std, self.val(*gain), g, cols);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *offset, db);
            }
            Op::Attention {
                q,
                k: kv,
                v,
                heads,
                probs,
            } => {
                let (a, d) = (
                    self.nodes[q.0].value.shape()[0],
                    self.nodes[q.0].value.shape()[1],
                );
                let b = self.nodes[kv.0].value.shape()[0];
                let dv = self.nodes[v.0].value.shape()[1];
                let (dq, dk, dvv) = k::attention_backward(
                    self.val(*q),
                    self.val(*kv),
                    self.val(*v),
                    probs,
                    g,
                    a,
                    b,
                    d,
                    dv,
                    *heads,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *kv, dk);
                self.accumulate(grads, *v, dvv);
            }
            Op::WindowedAttention {
                q,
                k: kv,
                v,
                heads,
                window,
                probs,
            } => {
                let (j, d) = (
                    self.nodes[q.0].value.shape()[0],
                    self.nodes[q.0].value.shape()[1],
                );
                let t = self.nodes[kv.0].value.shape()[0];
                let dv = self.nodes[v.0].value.shape()[1];
                let (qv, kvv, vv) = (self.val(*q), self.val(*kv), self.val(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kvv.len()];
                let mut dvv = vec![0.0; vv.len()];
                for (step, p) in probs.iter().enumerate().take(t) {
                    let start = (step + 1).saturating_sub(*window);
                    let b = step + 1 - start;
                    let (sq, sk, sv) = k::attention_backward(
                        qv,
                        &kvv[start * d..(step + 1) * d],
                        &vv[start * dv..(step + 1) * dv],
                        p,
                        &g[step * j * dv..(step + 1) * j * dv],
                        j,
                        b,
                        d,
                        dv,
                        *heads,
                    );
                    for (a, x) in dq.iter_mut().zip(&sq) {
                        *a += x;
                    }
                    for (a, x) in dk[start * d..(step + 1) * d].iter_mut().zip(&sk) {
                        *a += x;
                    }
                    for (a, x) in dvv[start * dv..(step + 1) * dv].iter_mut().zip(&sv) {
                        *a += x;
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *kv, dk);
                self.accumulate(grads, *v, dvv);
            }
            &Op::Conv { x, w, b, dilation } => {
                let ws = self.nodes[w.0].value.shape();
                let (c_out, c_in, width) = (ws[0], ws[1], ws[2]);
                let t = out.shape()[1];
                let (dx, dw, db) = k::conv1d_causal_backward(
                    self.val(x),
                    self.val(w),
                    g,
                    c_in,
                    c_out,
                    width,
                    t,
                    dilation,
                );
                self.accumulate(grads, x, dx);
                self.accumulate(grads, w, dw);
                self.accumulate(grads, b, db);
            }
            &Op::AvgPool(x, kk) => {
                let s = self.nodes[x.0].value.shape();
                self.accumulate(grads, x, k::avg_pool_time_backward(g, s[0], s[1], kk));
            }
            &Op::Hold { x, k: kk, delay } => {
                let s = self.nodes[x.0].value.shape();
                let dx = k::hold_upsample_backward(g, s[0], s[1], kk, delay, out.shape()[1]);
                self.accumulate(grads, x, dx);
            }
            &Op::TileRows(x, times) => {
                let n = self.nodes[x.0].value.numel();
                let mut dx = vec![0.0; n];
                for chunk in g.chunks(n).take(times) {
                    for (d, v) in dx.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::SliceRows(x, start) => {
                let xs = self.nodes[x.0].value.shape();
                let cols = xs[1];
                let mut dx = vec![0.0; xs[0] * cols];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                self.accumulate(grads, x, dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.numel();
                    self.accumulate(grads, x, g[off..off + n].to_vec());
                    off += n;
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, x, k::transpose(g, r, c));
            }
            &Op::Reshape(x) => self.accumulate(grads, x, g.to_vec()),
            &Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accumulate(grads, x, vec![g[0] / n as f64; n]);
            }
            Op::Nll { p, labels, eps } => {
                let pv = &self.nodes[p.0].value;
                let t = pv.shape()[1];
                let mut dp = vec![0.0; pv.numel()];
                for (i, &y) in labels.iter().enumerate() {
                    let idx = y as usize * t + i;
                    let prob = pv.data()[idx];
                    if prob > *eps {
                        dp[idx] = -g[0] / (t as f64 * prob);
                    }
                }
                self.accumulate(grads, *p, dp);
            }
            &Op::AdjacentSqDiff(p) => {
                let pv = &self.nodes[p.0].value;
                let t = pv.shape()[1];
                let row = &pv.data()[t..2 * t];
                let mut dp = vec![0.0; pv.numel()];
                for i in 1..t {
                    let d = 2.0 * (row[i] - row[i - 1]) / t as f64 * g[0];
                    dp[t + i] += d;
                    dp[t + i - 1] -= d;
                }
                self.accumulate(grads, p, dp);
            }
        }
    }
}

impl Backend for Graph {
    type Real = f64;
    type Value = Var;

    fn constant(&mut self, t: Tensor<f64>) -> Var {
        self.leaf(t, false)
    }

    fn param(&mut self, id: usize, t: &Tensor<f64>) -> Var {
        if id >= self.param_vars.len() {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.leaf(t.clone(), true);
        self.param_vars[id] = Some(v);
        self.param_ids.push((v, id));
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<f64> {
        self.get(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Res<Var> {
        let (m, kk, n) = check_matmul(self.get(*a).shape(), self.get(*b).shape())?;
        let d = k::matmul(self.val(*a), self.val(*b), m, kk, n);
        self.push("matmul", vec![m, n], d, Op::MatMul(*a, *b, [m, kk, n]))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Res<Var> {
        let (m, kk, n) = check_matmul_nt(self.get(*a).shape(), self.get(*b).shape())?;
        let d = k::matmul_nt(self.val(*a), self.val(*b), m, kk, n);
        self.push("matmul_nt", vec![m, n], d, Op::MatMulNt(*a, *b, [m, kk, n]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Res<Var> {
        check_same("add", self.get(*a).shape(), self.get(*b).shape())?;
        let d = self
            .val(*a)
            .iter()
            .zip(self.val(*b))
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", self.get(*a).shape().to_vec(), d, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Res<Var> {
        check_same("sub", self.get(*a).shape(), self.get(*b).shape())?;
        let d = self
            .val(*a)
            .iter()
            .zip(self.val(*b))
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", self.get(*a).shape().to_vec(), d, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Res<Var> {
        check_same("mul", self.get(*a).shape(), self.get(*b).shape())?;
        let d = self
            .val(*a)
            .iter()
            .zip(self.val(*b))
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", self.get(*a).shape().to_vec(), d, Op::Mul(*a, *b))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Res<Var> {
        let d = self.val(*a).iter().map(|x| x * s).collect();
        self.push("scale", self.get(*a).shape().to_vec(), d, Op::Scale(*a, s))
    }

    fn add_row_bias(&mut self, x: &Var, b: &Var) -> Res<Var> {
        let (_, n) = check_row_bias(self.get(*x).shape(), self.get(*b).shape())?;
        let mut d = self.val(*x).to_vec();
        if n > 0 {
            for row in d.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(self.val(*b)) {
                    *v += bv;
                }
            }
        }
        self.push(
            "add_row_bias",
            self.get(*x).shape().to_vec(),
            d,
            Op::AddRowBias(*x, *b),
        )
    }

    fn relu(&mut self, x: &Var) -> Res<Var> {
        let d = self.val(*x).iter().map(|v| v.max(0.0)).collect();
        self.push("relu", self.get(*x).shape().to_vec(), d, Op::Relu(*x))
    }

    fn softmax_rows(&mut self, x: &Var) -> Res<Var> {
        let (_, c) = self.get(*x).dims2("softmax_rows")?;
        let mut d = self.val(*x).to_vec();
        k::softmax_rows_in_place(&mut d, c);
        self.push(
            "softmax_rows",
            self.get(*x).shape().to_vec(),
            d,
            Op::SoftmaxRows(*x),
        )
    }

    fn layer_norm_rows(&mut self, x: &Var, gain: &Var, offset: &Var) -> Res<Var> {
        let (_, c) = check_row_bias(self.get(*x).shape(), self.get(*gain).shape())?;
        check_same(
            "layer_norm_rows",
            self.get(*gain).shape(),
            self.get(*offset).shape(),
        )?;
        let (out, xhat, inv_std) =
            k::layer_norm_rows(self.val(*x), c, self.val(*gain), self.val(*offset));
        let op = Op::LayerNorm {
            x: *x,
            gain: *gain,
            offset: *offset,
            xhat,
            inv_std,
        };
        self.push("layer_norm_rows", self.get(*x).shape().to_vec(), out, op)
    }

    fn attention(&mut self, q: &Var, kk: &Var, v: &Var, heads: usize) -> Res<Var> {
        let (a, b, d, dv) = check_attention(
            self.get(*q).shape(),
            self.get(*kk).shape(),
            self.get(*v).shape(),
            heads,
        )?;
        let (out, probs) = k::attention(
            self.val(*q),
            self.val(*kk),
            self.val(*v),
            a,
            b,
            d,
            dv,
            heads,
        );
        let op = Op::Attention {
            q: *q,
            k: *kk,
            v: *v,
            heads,
            probs,
        };
        self.push("attention", vec![a, dv], out, op)
    }

    fn windowed_attention(
        &mut self,
        q: &Var,
        kk: &Var,
        v: &Var,
        heads: usize,
        window: usize,
    ) -> Res<Var> {
        let (out, probs, j, dv) =
            windowed_attention_fwd(self.get(*q), self.get(*kk), self.get(*v), heads, window)?;
        let t = self.get(*kk).shape()[0];
        let op = Op::WindowedAttention {
            q: *q,
            k: *kk,
            v: *v,
            heads,
            window,
            probs,
        };
        self.push("windowed_attention", vec![t * j, dv], out, op)
    }

    fn conv1d_causal(&mut self, x: &Var, w: &Var, b: &Var, dilation: usize) -> Res<Var> {
        let (c_in, c_out, width, t) = check_conv(
            self.get(*x).shape(),
            self.get(*w).shape(),
            self.get(*b).shape(),
            dilation,
        )?;
        let out = k::conv1d_causal(
            self.val(*x),
            self.val(*w),
            self.val(*b),
            c_in,
            c_out,
            width,
            t,
            dilation,
        );
        let op = Op::Conv {
            x: *x,
            w: *w,
            b: *b,
            dilation,
        };
        self.push("conv1d_causal", vec![c_out, t], out, op)
    }

    fn avg_pool_time(&mut self, x: &Var, kk: usize) -> Res<Var> {
        if kk < 1 {
            return Err(arg_err("avg_pool_time", "k must be >= 1"));
        }
        let (c, t) = self.get(*x).dims2("avg_pool_time")?;
        let d = k::avg_pool_time(self.val(*x), c, t, kk);
        self.push("avg_pool_time", vec![c, t / kk], d, Op::AvgPool(*x, kk))
    }

    fn hold_upsample(&mut self, x: &Var, kk: usize, delay: usize, out_len: usize) -> Res<Var> {
        if kk < 1 {
            return Err(arg_err("hold_upsample", "k must be >= 1"));
        }
        let (c, t) = self.get(*x).dims2("hold_upsample")?;
        let d = k::hold_upsample(self.val(*x), c, t, kk, delay, out_len);
        let op = Op::Hold {
            x: *x,
            k: kk,
            delay,
        };
        self.push("hold_upsample", vec![c, out_len], d, op)
    }

    fn tile_rows(&mut self, x: &Var, times: usize) -> Res<Var> {
        let (r, c) = self.get(*x).dims2("tile_rows")?;
        let d = self.val(*x).repeat(times);
        self.push("tile_rows", vec![r * times, c], d, Op::TileRows(*x, times))
    }

    fn slice_rows(&mut self, x: &Var, start: usize, end: usize) -> Res<Var> {
        let (r, c) = self.get(*x).dims2("slice_rows")?;
        if start > end || end > r {
            return Err(shape_err(
                "slice_rows",
                format!("{start}..{end} of {r} rows"),
            ));
        }
        let d = self.val(*x)[start * c..end * c].to_vec();
        self.push(
            "slice_rows",
            vec![end - start, c],
            d,
            Op::SliceRows(*x, start),
        )
    }

    fn concat_rows(&mut self, xs: &[Var]) -> Res<Var> {
        let Some(first) = xs.first() else {
            return Err(shape_err("concat_rows", "nothing to concatenate"));
        };
        let cols = self.get(*first).dims2("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for x in xs {
            let (r, c) = self.get(*x).dims2("concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(self.val(*x));
        }
        self.push(
            "concat_rows",
            vec![rows, cols],
            data,
            Op::ConcatRows(xs.to_vec()),
        )
    }

    fn transpose(&mut self, x: &Var) -> Res<Var> {
        let t = self.get(*x).transpose()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(*x))
    }

    fn reshape(&mut self, x: &Var, shape: Vec<usize>) -> Res<Var> {
        let t = self.get(*x).clone().reshape(shape.clone())?;
        self.push("reshape", shape, t.into_data(), Op::Reshape(*x))
    }

    fn sum(&mut self, x: &Var) -> Res<Var> {
        let s = self.val(*x).iter().fold(0.0, |a, v| a + v);
        self.push("sum", vec![1], vec![s], Op::Sum(*x))
    }

    fn mean(&mut self, x: &Var) -> Res<Var> {
        let n = self.get(*x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let s = self.val(*x).iter().fold(0.0, |a, v| a + v);
        self.push("mean", vec![1], vec![s / n as f64], Op::Mean(*x))
    }

    fn nll(&mut self, probs: &Var, labels: &[u8], eps: f64) -> Res<Var> {
        let v = nll_fwd(self.get(*probs), labels, eps)?;
        let op = Op::Nll {
            p: *probs,
            labels: labels.to_vec(),
            eps,
        };
        self.push("nll", vec![1], vec![v], op)
    }

    fn adjacent_sq_diff(&mut self, probs: &Var) -> Res<Var> {
        check_probs("adjacent_sq_diff", self.get(*probs).shape())?;
        let v = adjacent_sq_diff_fwd(self.get(*probs))?;
        self.push(
            "adjacent_sq_diff",
            vec![1],
            vec![v],
            Op::AdjacentSqDiff(*probs),
        )
    }
}
