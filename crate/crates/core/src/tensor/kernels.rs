//! Slice-level numeric kernels shared by the eager evaluator, the tape and
//! the streaming engine.
//!
//! All reductions run in a fixed index order so results are reproducible
//! bit for bit. Matrices are row-major; temporal signals are `[channels × time]`.

use super::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn transpose<R: Real>(a: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `[m×k] · [k×n]`.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == R::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `[m×k] · [n×k]ᵀ`.
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `[k×m]ᵀ · [k×n]`.
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], k: usize, m: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == R::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

/// `W · x + b` for a single vector, `W` stored `[out × in]`.
pub fn affine<R: Real>(w: &[R], b: &[R], x: &[R], out: &mut [R]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = b[i] + dot(&w[i * n_in..(i + 1) * n_in], x);
    }
}

pub fn softmax_rows_in_place<R: Real>(x: &mut [R], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in x.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

#[inline]
pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mut max = R::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = R::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of a row-wise softmax given its output `y` and upstream `g`.
pub fn softmax_rows_backward<R: Real>(y: &[R], g: &[R], cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); y.len()];
    for ((yr, gr), or) in y.chunks(cols).zip(g.chunks(cols)).zip(out.chunks_mut(cols)) {
        let inner = dot(yr, gr);
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    out
}

/// Normalizes each row of `x` over its `cols` features. Returns the output,
/// the normalized activations and the per-row inverse standard deviation.
pub fn layer_norm_rows<R: Real>(
    x: &[R],
    cols: usize,
    gain: &[R],
    offset: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = x.len() / cols;
    let mut out = vec![R::zero(); x.len()];
    let mut xhat = vec![R::zero(); x.len()];
    let mut inv_std = vec![R::zero(); rows];
    let n = R::of_f64(cols as f64);
    let eps = R::of_f64(LAYER_NORM_EPS);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = R::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = R::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let is = R::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..cols {
            let h = (row[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + offset[c];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgain, doffset)`.
pub fn layer_norm_rows_backward<R: Real>(
    xhat: &[R],
    inv_std: &[R],
    gain: &[R],
    g: &[R],
    cols: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = inv_std.len();
    let n = R::of_f64(cols as f64);
    let mut dx = vec![R::zero(); xhat.len()];
    let mut dgain = vec![R::zero(); cols];
    let mut doffset = vec![R::zero(); cols];
    let mut dh = vec![R::zero(); cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let hr = &xhat[r * cols..(r + 1) * cols];
        let mut sum_dh = R::zero();
        let mut sum_dh_h = R::zero();
        for c in 0..cols {
            dgain[c] += gr[c] * hr[c];
            doffset[c] += gr[c];
            dh[c] = gr[c] * gain[c];
            sum_dh += dh[c];
            sum_dh_h += dh[c] * hr[c];
        }
        for c in 0..cols {
            dx[r * cols + c] = inv_std[r] / n * (n * dh[c] - sum_dh - hr[c] * sum_dh_h);
        }
    }
    (dx, dgain, doffset)
}

/// Multi-head scaled dot-product attention.
///
/// `q: [a×d]`, `k: [b×d]`, `v: [b×dv]`. Head `h` reads column block `h` of
/// each operand and is scaled by `1/sqrt(d/heads)`. Returns the output
/// `[a×dv]` and the attention weights laid out `[heads × a × b]`.
pub fn attention<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    a: usize,
    b: usize,
    d: usize,
    dv: usize,
    heads: usize,
) -> (Vec<R>, Vec<R>) {
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = R::one() / R::of_f64(dh as f64).sqrt();
    let mut out = vec![R::zero(); a * dv];
    let mut probs = vec![R::zero(); heads * a * b];
    for h in 0..heads {
        for i in 0..a {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            let w = &mut probs[(h * a + i) * b..(h * a + i + 1) * b];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = dot(qi, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            softmax_in_place(w);
            let o = &mut out[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            for (j, &wj) in w.iter().enumerate() {
                let vj = &v[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += wj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Backward of [`attention`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    probs: &[R],
    g: &[R],
    a: usize,
    b: usize,
    d: usize,
    dv: usize,
    heads: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let dh = d / heads;
    let dvh = dv / heads;
    let scale = R::one() / R::of_f64(dh as f64).sqrt();
    let mut dq = vec![R::zero(); q.len()];
    let mut dk = vec![R::zero(); k.len()];
    let mut dvv = vec![R::zero(); v.len()];
    let mut ds = vec![R::zero(); b];
    for h in 0..heads {
        for i in 0..a {
            let w = &probs[(h * a + i) * b..(h * a + i + 1) * b];
            let gi = &g[i * dv + h * dvh..i * dv + (h + 1) * dvh];
            // dW_j = g_i · v_j ; dV_j += w_j g_i
            let mut inner = R::zero();
            for j in 0..b {
                let vj = &v[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                let dw = dot(gi, vj);
                ds[j] = dw;
                inner += dw * w[j];
                let dvj = &mut dvv[j * dv + h * dvh..j * dv + (h + 1) * dvh];
                for (o, &gv) in dvj.iter_mut().zip(gi) {
                    *o += w[j] * gv;
                }
            }
            for j in 0..b {
                ds[j] = w[j] * (ds[j] - inner) * scale;
            }
            let qi_off = i * d + h * dh;
            for j in 0..b {
                let s = ds[j];
                if s == R::zero() {
                    continue;
                }
                let koff = j * d + h * dh;
                for c in 0..dh {
                    dq[qi_off + c] += s * k[koff + c];
                    dk[koff + c] += s * q[qi_off + c];
                }
            }
        }
    }
    (dq, dk, dvv)
}

/// Causal dilated 1-D convolution with zero left padding.
///
/// `x: [c_in × t]`, `w: [c_out × c_in × width]`, `bias: [c_out]`.
/// Tap `j` reads `x[t - dilation·(width-1-j)]`.
pub fn conv1d_causal<R: Real>(
    x: &[R],
    w: &[R],
    bias: &[R],
    c_in: usize,
    c_out: usize,
    width: usize,
    t: usize,
    dilation: usize,
) -> Vec<R> {
    let mut out = vec![R::zero(); c_out * t];
    for co in 0..c_out {
        let orow = &mut out[co * t..(co + 1) * t];
        orow.fill(bias[co]);
        for ci in 0..c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            for j in 0..width {
                let wv = w[(co * c_in + ci) * width + j];
                let shift = dilation * (width - 1 - j);
                if shift >= t || wv == R::zero() {
                    continue;
                }
                for (o, &xv) in orow[shift..].iter_mut().zip(&xrow[..t - shift]) {
                    *o += wv * xv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)` for [`conv1d_causal`].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_causal_backward<R: Real>(
    x: &[R],
    w: &[R],
    g: &[R],
    c_in: usize,
    c_out: usize,
    width: usize,
    t: usize,
    dilation: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let mut dx = vec![R::zero(); c_in * t];
    let mut dw = vec![R::zero(); w.len()];
    let mut db = vec![R::zero(); c_out];
    for co in 0..c_out {
        let grow = &g[co * t..(co + 1) * t];
        let mut s = R::zero();
        for &gv in grow {
            s += gv;
        }
        db[co] = s;
        for ci in 0..c_in {
            let xrow = &x[ci * t..(ci + 1) * t];
            for j in 0..width {
                let shift = dilation * (width - 1 - j);
                if shift >= t {
                    continue;
                }
                let widx = (co * c_in + ci) * width + j;
                dw[widx] = dot(&grow[shift..], &xrow[..t - shift]);
                let wv = w[widx];
                if wv == R::zero() {
                    continue;
                }
                let dxrow = &mut dx[ci * t..(ci + 1) * t];
                for (d, &gv) in dxrow[..t - shift].iter_mut().zip(&grow[shift..]) {
                    *d += wv * gv;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping average pooling along time: `[c × t] -> [c × ⌊t/k⌋]`.
pub fn avg_pool_time<R: Real>(x: &[R], c: usize, t: usize, k: usize) -> Vec<R> {
    let tp = t / k;
    let kr = R::of_f64(k as f64);
    let mut out = vec![R::zero(); c * tp];
    for ch in 0..c {
        for u in 0..tp {
            let mut s = R::zero();
            for &v in &x[ch * t + u * k..ch * t + (u + 1) * k] {
                s += v;
            }
            out[ch * tp + u] = s / kr;
        }
    }
    out
}

pub fn avg_pool_time_backward<R: Real>(g: &[R], c: usize, t: usize, k: usize) -> Vec<R> {
    let tp = t / k;
    let kr = R::of_f64(k as f64);
    let mut dx = vec![R::zero(); c * t];
    for ch in 0..c {
        for u in 0..tp {
            let gv = g[ch * tp + u] / kr;
            for d in &mut dx[ch * t + u * k..ch * t + (u + 1) * k] {
                *d = gv;
            }
        }
    }
    dx
}

/// Source index for output position `i` of a zero-order hold with factor
/// `k` and `delay`: `⌊(i - delay)/k⌋`, or `None` before the first hold.
#[inline]
pub fn hold_source(i: usize, k: usize, delay: usize, src_len: usize) -> Option<usize> {
    if i < delay {
        return None;
    }
    let s = (i - delay) / k;
    (s < src_len).then_some(s)
}

/// Zero-order hold along time: `[c × t_src] -> [c × out_len]`, output
/// position `i` copies source `⌊(i - delay)/k⌋`; missing sources give 0.
pub fn hold_upsample<R: Real>(
    x: &[R],
    c: usize,
    t_src: usize,
    k: usize,
    delay: usize,
    out_len: usize,
) -> Vec<R> {
    let mut out = vec![R::zero(); c * out_len];
    for ch in 0..c {
        for i in 0..out_len {
            if let Some(s) = hold_source(i, k, delay, t_src) {
                out[ch * out_len + i] = x[ch * t_src + s];
            }
        }
    }
    out
}

pub fn hold_upsample_backward<R: Real>(
    g: &[R],
    c: usize,
    t_src: usize,
    k: usize,
    delay: usize,
    out_len: usize,
) -> Vec<R> {
    let mut dx = vec![R::zero(); c * t_src];
    for ch in 0..c {
        for i in 0..out_len {
            if let Some(s) = hold_source(i, k, delay, t_src) {
                dx[ch * t_src + s] += g[ch * out_len + i];
            }
        }
    }
    dx
}
