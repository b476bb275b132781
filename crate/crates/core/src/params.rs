//! Named parameter storage and the small layer handles built on top of it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Backend, Real, Tensor, TensorError};

pub type ParamId = usize;

/// Flat, ordered list of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<R>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Rounds to the nearest value representable as `f32`.
///
/// Parameters are kept on the `f32` grid so that checkpoints, which store
/// 32-bit payloads, reproduce them exactly.
#[inline]
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

/// Creates parameters in a fixed order with fan-in scaled uniform init.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore<f64>,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| to_f32_grid(self.rng.random_range(-bound..bound)))
            .collect();
        self.store
            .push(name, Tensor::new(shape, data).expect("shape/product"))
    }

    pub fn filled(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.push(
            name,
            Tensor::new(shape, vec![value; n]).expect("shape/product"),
        )
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize) -> Linear {
        Linear {
            weight: self.uniform(&format!("{name}.weight"), vec![out, inp], inp),
            bias: self.uniform(&format!("{name}.bias"), vec![out], inp),
        }
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gain: self.filled(&format!("{name}.gain"), vec![dim], 1.0),
            offset: self.filled(&format!("{name}.offset"), vec![dim], 0.0),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        out: usize,
        inp: usize,
        width: usize,
        dilation: usize,
    ) -> Conv {
        let fan_in = inp * width;
        Conv {
            weight: self.uniform(&format!("{name}.weight"), vec![out, inp, width], fan_in),
            bias: self.uniform(&format!("{name}.bias"), vec![out], fan_in),
            dilation,
        }
    }

    /// A zero-initialized 1x1 convolution.
    pub fn conv_zero(&mut self, name: &str, out: usize, inp: usize) -> Conv {
        Conv {
            weight: self.filled(&format!("{name}.weight"), vec![out, inp, 1], 0.0),
            bias: self.filled(&format!("{name}.bias"), vec![out], 0.0),
            dilation: 1,
        }
    }
}

#[inline]
pub fn fetch<B: Backend>(b: &mut B, store: &ParamStore<B::Real>, id: ParamId) -> B::Value {
    b.param(id, store.get(id))
}

/// Row-wise affine map `x Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore<B::Real>,
        x: &B::Value,
    ) -> Result<B::Value, TensorError> {
        let w = fetch(b, store, self.weight);
        let bias = fetch(b, store, self.bias);
        let y = b.matmul_nt(x, &w)?;
        b.add_row_bias(&y, &bias)
    }

    /// Single-vector application.
    pub fn apply<R: Real>(&self, store: &ParamStore<R>, x: &[R], out: &mut [R]) {
        crate::tensor::kernels::affine(
            store.get(self.weight).data(),
            store.get(self.bias).data(),
            x,
            out,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl Norm {
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore<B::Real>,
        x: &B::Value,
    ) -> Result<B::Value, TensorError> {
        let g = fetch(b, store, self.gain);
        let o = fetch(b, store, self.offset);
        b.layer_norm_rows(x, &g, &o)
    }
}

/// Causal dilated convolution over `[channels × time]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

impl Conv {
    pub fn forward<B: Backend>(
        &self,
        b: &mut B,
        store: &ParamStore<B::Real>,
        x: &B::Value,
    ) -> Result<B::Value, TensorError> {
        let w = fetch(b, store, self.weight);
        let bias = fetch(b, store, self.bias);
        b.conv1d_causal(x, &w, &bias, self.dilation)
    }

    /// `(c_out, c_in, width)`
    pub fn dims<R: Real>(&self, store: &ParamStore<R>) -> (usize, usize, usize) {
        let s = store.get(self.weight).shape();
        (s[0], s[1], s[2])
    }
}
