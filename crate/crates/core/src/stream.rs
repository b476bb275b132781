//! Frame-incremental inference.
//!
//! Every causal convolution keeps a ring buffer of the inputs its taps can
//! reach; pooled levels keep running sums and emit a coarse element when a
//! window completes. Coarse pyramid features are latched between updates,
//! which reproduces the delayed hold of the batch model exactly. The prompt
//! transformer is recomputed over the cached keys and values of the last
//! `n` frames on every push.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gvr::GvrParams;
use crate::model::CogModel;
use crate::mstr::{FastPath, SlowPath, TcnStage, NUM_CLASSES};
use crate::params::{Conv, Linear, Norm, ParamStore};
use crate::tensor::kernels::{self, softmax_in_place};
use crate::tensor::{Real, Tensor};

/// Output for one pushed frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub index: usize,
    pub p_error: f64,
    pub decision: bool,
    /// Wall-clock time spent in the push, in microseconds.
    pub latency_us: f64,
}

impl FrameResult {
    pub const CSV_HEADER: &'static str = "index,p_error,decision,latency_us";

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "{},{:.9},{},{:.3}",
            self.index,
            self.p_error,
            u8::from(self.decision),
            self.latency_us
        )
    }
}

fn linear_rows<R: Real>(l: &Linear, store: &ParamStore<R>, x: &[R], rows: usize) -> Vec<R> {
    let w = store.get(l.weight);
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![R::zero(); rows * out];
    for r in 0..rows {
        l.apply(
            store,
            &x[r * inp..(r + 1) * inp],
            &mut y[r * out..(r + 1) * out],
        );
    }
    y
}

fn layer_norm<R: Real>(n: &Norm, store: &ParamStore<R>, x: &[R], cols: usize) -> Vec<R> {
    kernels::layer_norm_rows(
        x,
        cols,
        store.get(n.gain).data(),
        store.get(n.offset).data(),
    )
    .0
}

/// Prompt reasoning over a ring of cached keys and values.
#[derive(Clone, Debug)]
struct GvrStream<R> {
    p: GvrParams,
    prompts: Vec<R>,
    queries: Vec<R>,
    j: usize,
    d: usize,
    keys: Vec<R>,
    values: Vec<R>,
    /// Ring slot of the next frame.
    next: usize,
    len: usize,
    window_k: Vec<R>,
    window_v: Vec<R>,
}

impl<R: Real> GvrStream<R> {
    fn new(p: &GvrParams, store: &ParamStore<R>, bank: &Tensor<R>) -> Result<Self> {
        let (j, _) = bank.dims2("prompt bank")?;
        let prompts = linear_rows(&p.text_proj, store, bank.data(), j);
        let d = prompts.len() / j;
        let queries = linear_rows(&p.query, store, &prompts, j);
        Ok(Self {
            p: p.clone(),
            prompts,
            queries,
            j,
            d,
            keys: vec![R::zero(); p.window * d],
            values: vec![R::zero(); p.window * d],
            next: 0,
            len: 0,
            window_k: Vec::with_capacity(p.window * d),
            window_v: Vec::with_capacity(p.window * d),
        })
    }

    fn reset(&mut self) {
        self.next = 0;
        self.len = 0;
    }

    fn step(&mut self, store: &ParamStore<R>, x: &[R], c: &mut [R]) {
        let (d, n, j) = (self.d, self.p.window, self.j);
        let lp = linear_rows(&self.p.vis_proj, store, x, 1);
        let slot = self.next;
        self.p
            .key
            .apply(store, &lp, &mut self.keys[slot * d..(slot + 1) * d]);
        self.p
            .value
            .apply(store, &lp, &mut self.values[slot * d..(slot + 1) * d]);
        self.next = (slot + 1) % n;
        self.len = (self.len + 1).min(n);

        // chronological copy of the window, oldest first
        self.window_k.clear();
        self.window_v.clear();
        let first = (self.next + n - self.len) % n;
        for i in 0..self.len {
            let s = (first + i) % n;
            self.window_k
                .extend_from_slice(&self.keys[s * d..(s + 1) * d]);
            self.window_v
                .extend_from_slice(&self.values[s * d..(s + 1) * d]);
        }
        let (a, _) = kernels::attention(
            &self.queries,
            &self.window_k,
            &self.window_v,
            j,
            self.len,
            d,
            d,
            self.p.heads,
        );
        let o = linear_rows(&self.p.out, store, &a, j);
        let r1: Vec<R> = self.prompts.iter().zip(&o).map(|(&p, &o)| p + o).collect();
        let x1 = layer_norm(&self.p.norm1, store, &r1, d);
        let mut h = linear_rows(&self.p.ffn_in, store, &x1, j);
        for v in &mut h {
            *v = v.max(R::zero());
        }
        let f = linear_rows(&self.p.ffn_out, store, &h, j);
        let r2: Vec<R> = x1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
        let qe = layer_norm(&self.p.norm2, store, &r2, d);
        let (g, _) = kernels::attention(&qe, &self.prompts, &self.prompts, j, j, d, d, 1);
        c.copy_from_slice(&g);
    }
}

/// One causal convolution fed a column at a time.
#[derive(Clone, Debug)]
struct ConvStream<R> {
    w: Vec<R>,
    b: Vec<R>,
    c_in: usize,
    c_out: usize,
    width: usize,
    dilation: usize,
    cap: usize,
    hist: Vec<R>,
    /// Slot holding the most recent input.
    head: usize,
    seen: usize,
}

impl<R: Real> ConvStream<R> {
    fn new(conv: &Conv, store: &ParamStore<R>) -> Self {
        let (c_out, c_in, width) = conv.dims(store);
        let cap = conv.dilation * (width - 1) + 1;
        Self {
            w: store.get(conv.weight).data().to_vec(),
            b: store.get(conv.bias).data().to_vec(),
            c_in,
            c_out,
            width,
            dilation: conv.dilation,
            cap,
            hist: vec![R::zero(); cap * c_in],
            head: cap - 1,
            seen: 0,
        }
    }

    fn reset(&mut self) {
        self.head = self.cap - 1;
        self.seen = 0;
    }

    /// Same accumulation order as the batch kernel.
    fn step(&mut self, x: &[R], out: &mut [R]) {
        let c_in = self.c_in;
        self.head = (self.head + 1) % self.cap;
        self.hist[self.head * c_in..(self.head + 1) * c_in].copy_from_slice(x);
        self.seen = (self.seen + 1).min(self.cap);
        for (co, o) in out.iter_mut().enumerate().take(self.c_out) {
            let mut acc = self.b[co];
            for ci in 0..c_in {
                for j in 0..self.width {
                    let wv = self.w[(co * c_in + ci) * self.width + j];
                    let shift = self.dilation * (self.width - 1 - j);
                    if shift >= self.seen || wv == R::zero() {
                        continue;
                    }
                    let slot = (self.head + self.cap - shift) % self.cap;
                    acc += wv * self.hist[slot * c_in + ci];
                }
            }
            *o = acc;
        }
    }
}

#[derive(Clone, Debug)]
struct StageStream<R> {
    input: Option<ConvStream<R>>,
    layers: Vec<(ConvStream<R>, ConvStream<R>)>,
    width: usize,
    z: Vec<R>,
    u: Vec<R>,
}

impl<R: Real> StageStream<R> {
    fn new(stage: &TcnStage, store: &ParamStore<R>, c_in: usize) -> Self {
        let width = match (&stage.input, stage.layers.first()) {
            (Some(p), _) => p.dims(store).0,
            (None, Some(l)) => l.dilated.dims(store).0,
            (None, None) => c_in,
        };
        Self {
            input: stage.input.as_ref().map(|c| ConvStream::new(c, store)),
            layers: stage
                .layers
                .iter()
                .map(|l| {
                    (
                        ConvStream::new(&l.dilated, store),
                        ConvStream::new(&l.pointwise, store),
                    )
                })
                .collect(),
            width,
            z: vec![R::zero(); width],
            u: vec![R::zero(); width],
        }
    }

    fn reset(&mut self) {
        if let Some(c) = &mut self.input {
            c.reset();
        }
        for (a, b) in &mut self.layers {
            a.reset();
            b.reset();
        }
    }

    fn step(&mut self, x: &[R]) -> Vec<R> {
        let mut f = match &mut self.input {
            Some(c) => {
                let mut f = vec![R::zero(); self.width];
                c.step(x, &mut f);
                f
            }
            None => x.to_vec(),
        };
        for (dilated, pointwise) in &mut self.layers {
            dilated.step(&f, &mut self.z);
            for v in &mut self.z {
                *v = v.max(R::zero());
            }
            pointwise.step(&self.z, &mut self.u);
            for (a, &b) in f.iter_mut().zip(&self.u) {
                *a += b;
            }
        }
        f
    }
}

/// Running window sum; emits `sum / k` when `k` inputs have arrived.
#[derive(Clone, Debug)]
struct PoolStream<R> {
    k: usize,
    count: usize,
    sum: Vec<R>,
}

impl<R: Real> PoolStream<R> {
    fn new(k: usize, c: usize) -> Self {
        Self {
            k,
            count: 0,
            sum: vec![R::zero(); c],
        }
    }

    fn reset(&mut self) {
        self.count = 0;
        self.sum.fill(R::zero());
    }

    fn push(&mut self, x: &[R]) -> Option<Vec<R>> {
        for (s, &v) in self.sum.iter_mut().zip(x) {
            *s += v;
        }
        self.count += 1;
        if self.count < self.k {
            return None;
        }
        let kr = R::of_f64(self.k as f64);
        let out = self.sum.iter().map(|&s| s / kr).collect();
        self.reset();
        Some(out)
    }
}

#[derive(Clone, Debug)]
struct SlowStream<R> {
    stages: Vec<StageStream<R>>,
    pools: Vec<PoolStream<R>>,
    laterals: Vec<ConvStream<R>>,
    head: ConvStream<R>,
    /// Latest merged pyramid feature of each level.
    latches: Vec<Option<Vec<R>>>,
}

impl<R: Real> SlowStream<R> {
    fn new(slow: &SlowPath, store: &ParamStore<R>, c_in: usize, pool: usize) -> Self {
        let stages: Vec<StageStream<R>> = slow
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageStream::new(s, store, if i == 0 { c_in } else { 0 }))
            .collect();
        let width = stages[0].width;
        Self {
            pools: (1..stages.len())
                .map(|_| PoolStream::new(pool, width))
                .collect(),
            laterals: slow
                .laterals
                .iter()
                .map(|c| ConvStream::new(c, store))
                .collect(),
            head: ConvStream::new(&slow.heads[0], store),
            latches: vec![None; stages.len()],
            stages,
        }
    }

    fn reset(&mut self) {
        self.stages.iter_mut().for_each(StageStream::reset);
        self.pools.iter_mut().for_each(PoolStream::reset);
        self.laterals.iter_mut().for_each(ConvStream::reset);
        self.head.reset();
        self.latches.fill(None);
    }

    /// Frame-level logits after feeding one feature column.
    fn step(&mut self, c: &[R]) -> [R; NUM_CLASSES] {
        let mut fresh = vec![self.stages[0].step(c)];
        for i in 1..self.stages.len() {
            let h = self.stages[i].step(&fresh[i - 1]);
            match self.pools[i - 1].push(&h) {
                Some(f) => fresh.push(f),
                None => break,
            }
        }
        for i in (0..fresh.len()).rev() {
            let width = fresh[i].len();
            let mut merged = vec![R::zero(); width];
            self.laterals[i].step(&fresh[i], &mut merged);
            if let Some(Some(up)) = self.latches.get(i + 1) {
                for (m, &u) in merged.iter_mut().zip(up) {
                    *m += u;
                }
            }
            self.latches[i] = Some(merged);
        }
        let mut logits = [R::zero(); NUM_CLASSES];
        let p0 = self.latches[0]
            .as_ref()
            .expect("level 0 updated every frame");
        self.head.step(p0, &mut logits);
        logits
    }
}

#[derive(Clone, Debug)]
struct FastStream<R> {
    pool: PoolStream<R>,
    stages: Vec<StageStream<R>>,
    heads: Vec<ConvStream<R>>,
    last_logits: Option<[R; NUM_CLASSES]>,
}

impl<R: Real> FastStream<R> {
    fn new(fast: &FastPath, store: &ParamStore<R>, c_in: usize, pool: usize) -> Self {
        Self {
            pool: PoolStream::new(pool, c_in),
            stages: fast
                .stages
                .iter()
                .enumerate()
                .map(|(j, s)| StageStream::new(s, store, if j == 0 { c_in } else { NUM_CLASSES }))
                .collect(),
            heads: fast
                .heads
                .iter()
                .map(|c| ConvStream::new(c, store))
                .collect(),
            last_logits: None,
        }
    }

    fn reset(&mut self) {
        self.pool.reset();
        self.stages.iter_mut().for_each(StageStream::reset);
        self.heads.iter_mut().for_each(ConvStream::reset);
        self.last_logits = None;
    }

    fn step(&mut self, c: &[R]) {
        let Some(mut input) = self.pool.push(c) else {
            return;
        };
        for (stage, head) in self.stages.iter_mut().zip(&mut self.heads) {
            let h = stage.step(&input);
            let mut logits = [R::zero(); NUM_CLASSES];
            head.step(&h, &mut logits);
            let mut p = logits;
            softmax_in_place(&mut p);
            input = p.to_vec();
            self.last_logits = Some(logits);
        }
    }
}

/// Streaming detector over one video. Not shareable across threads
/// mid-stream; build one engine per stream.
#[derive(Clone, Debug)]
pub struct StreamEngine<R: Real = f32> {
    store: ParamStore<R>,
    d_vis: usize,
    gvr: Option<GvrStream<R>>,
    frame_proj: Option<Linear>,
    slow: Option<SlowStream<R>>,
    fast: Option<FastStream<R>>,
    feature: Vec<R>,
    threshold: f64,
    t: usize,
    closed: bool,
}

impl<R: Real> StreamEngine<R> {
    pub fn new<S: Real>(model: &CogModel<S>) -> Result<Self> {
        let model: CogModel<R> = model.cast();
        let cfg = &model.config;
        let store = model.params;
        let f = cfg.feature_dim();
        let gvr = match &model.layout.gvr {
            Some(p) => Some(GvrStream::new(p, &store, &model.prompts)?),
            None => None,
        };
        let mstr = &model.layout.mstr;
        let slow = mstr
            .slow
            .as_ref()
            .map(|s| SlowStream::new(s, &store, f, mstr.pool));
        let fast = mstr
            .fast
            .as_ref()
            .map(|s| FastStream::new(s, &store, f, mstr.fast_pool));
        Ok(Self {
            d_vis: cfg.d_vis,
            gvr,
            frame_proj: model.layout.frame_proj,
            slow,
            fast,
            feature: vec![R::zero(); f],
            threshold: 0.5,
            t: 0,
            closed: false,
            store,
        })
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn frames_seen(&self) -> usize {
        self.t
    }

    pub fn d_vis(&self) -> usize {
        self.d_vis
    }

    /// Clears every buffer; parameters are kept.
    pub fn reset(&mut self) {
        if let Some(g) = &mut self.gvr {
            g.reset();
        }
        if let Some(s) = &mut self.slow {
            s.reset();
        }
        if let Some(f) = &mut self.fast {
            f.reset();
        }
        self.t = 0;
        self.closed = false;
    }

    /// Marks the end of the stream; further pushes fail until [`reset`](Self::reset).
    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Class probabilities `[normal, error]` for the next frame.
    pub fn push_probs(&mut self, x: &[R]) -> Result<[R; NUM_CLASSES]> {
        if self.closed {
            return Err(Error::Usage("push after the stream was closed".into()));
        }
        if x.len() != self.d_vis {
            return Err(Error::Config(format!(
                "frame has {} features, model expects {}",
                x.len(),
                self.d_vis
            )));
        }
        match (&mut self.gvr, &self.frame_proj) {
            (Some(g), _) => g.step(&self.store, x, &mut self.feature),
            (None, Some(p)) => p.apply(&self.store, x, &mut self.feature),
            (None, None) => unreachable!("model always has a feature block"),
        }
        if let Some(f) = &mut self.fast {
            f.step(&self.feature);
        }
        let mut logits = match &mut self.slow {
            Some(s) => s.step(&self.feature),
            None => self
                .fast
                .as_ref()
                .and_then(|f| f.last_logits)
                .unwrap_or([R::zero(); NUM_CLASSES]),
        };
        softmax_in_place(&mut logits);
        self.t += 1;
        Ok(logits)
    }

    pub fn push_frame(&mut self, x: &[R]) -> Result<FrameResult> {
        let start = Instant::now();
        let probs = self.push_probs(x)?;
        let latency_us = start.elapsed().as_secs_f64() * 1e6;
        let p = probs[1].as_f64();
        if !p.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite probability at frame {}",
                self.t - 1
            )));
        }
        Ok(FrameResult {
            index: self.t - 1,
            p_error: p,
            decision: p >= self.threshold,
            latency_us,
        })
    }

    /// Converts an `f32` embedding to the engine precision and pushes it.
    pub fn push_f32(&mut self, x: &[f32]) -> Result<FrameResult> {
        let v: Vec<R> = x.iter().map(|&a| R::of_f64(f64::from(a))).collect();
        self.push_frame(&v)
    }
}

/// Per-push latency summary in microseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    /// p99 over frames `[100, 1100)`, when available.
    pub early_p99_us: Option<f64>,
    /// p99 over the last 1000 frames, when they start after the early window.
    pub late_p99_us: Option<f64>,
}

pub const BENCH_MIN_FRAMES: usize = 100;
const PROBE: usize = 1000;

/// Nearest-rank percentile.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(lat: &[f64]) -> Self {
        let n = lat.len();
        let early_end = BENCH_MIN_FRAMES + PROBE;
        Self {
            count: n,
            mean_us: lat.iter().sum::<f64>() / n as f64,
            p50_us: percentile(lat, 50.0),
            p99_us: percentile(lat, 99.0),
            early_p99_us: (n >= early_end)
                .then(|| percentile(&lat[BENCH_MIN_FRAMES..early_end], 99.0)),
            late_p99_us: (n >= early_end + PROBE).then(|| percentile(&lat[n - PROBE..], 99.0)),
        }
    }
}

/// Pushes `count` pseudo-random frames through a fresh stream and reports
/// per-push latency.
pub fn bench<R: Real>(
    engine: &mut StreamEngine<R>,
    count: usize,
    seed: u64,
) -> Result<LatencyStats> {
    if count < BENCH_MIN_FRAMES {
        return Err(Error::Usage(format!(
            "bench needs at least {BENCH_MIN_FRAMES} frames, got {count}"
        )));
    }
    engine.reset();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = vec![R::zero(); engine.d_vis];
    let mut lat = Vec::with_capacity(count);
    for _ in 0..count {
        for v in &mut frame {
            *v = R::of_f64(rng.random_range(-1.0..1.0));
        }
        lat.push(engine.push_frame(&frame)?.latency_us);
    }
    engine.reset();
    Ok(LatencyStats::from_samples(&lat))
}
