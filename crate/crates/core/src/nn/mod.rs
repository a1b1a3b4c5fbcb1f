//! Minimal f32 neural-network kernels with hand-written backward passes.
//!
//! Activations are stored batch-major as `[n, c, h, w]`; fully-connected
//! activations use `h = w = 1`. Every layer caches what its backward pass
//! needs during `forward`.

mod adam;
mod gemm;
mod layers;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm, Conv, Linear, MaxPool, Relu};

use rand::Rng;

/// Samples per chunk for the chunked conv kernels. Fixed so that results do
/// not depend on the thread count.
pub const CHUNK: usize = 8;

/// Batch-norm momentum and epsilon.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Tensor { n, c, h, w, data }
    }

    /// A `[n, features]` matrix.
    pub fn matrix(n: usize, features: usize, data: Vec<f32>) -> Self {
        Self::from_vec(n, features, 1, 1, data)
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Reinterprets each sample as a flat feature vector.
    pub fn flatten(self) -> Tensor {
        let f = self.sample_len();
        Tensor::matrix(self.n, f, self.data)
    }

    pub fn reshape(self, c: usize, h: usize, w: usize) -> Tensor {
        assert_eq!(c * h * w, self.sample_len(), "reshape size");
        Tensor {
            n: self.n,
            c,
            h,
            w,
            data: self.data,
        }
    }

    /// Concatenates per-sample features of `a` and `b` (both flattened).
    pub fn concat_features(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.n, b.n, "concat batch size");
        let (fa, fb) = (a.sample_len(), b.sample_len());
        let mut data = Vec::with_capacity(a.n * (fa + fb));
        for i in 0..a.n {
            data.extend_from_slice(a.sample(i));
            data.extend_from_slice(b.sample(i));
        }
        Tensor::matrix(a.n, fa + fb, data)
    }

    /// Splits per-sample features at `at`, the inverse of [`concat_features`].
    ///
    /// [`concat_features`]: Tensor::concat_features
    pub fn split_features(&self, at: usize) -> (Tensor, Tensor) {
        let f = self.sample_len();
        assert!(at <= f);
        let mut a = Vec::with_capacity(self.n * at);
        let mut b = Vec::with_capacity(self.n * (f - at));
        for i in 0..self.n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..at]);
            b.extend_from_slice(&s[at..]);
        }
        (
            Tensor::matrix(self.n, at, a),
            Tensor::matrix(self.n, f - at, b),
        )
    }

    /// Stacks two batches with identical per-sample shape.
    pub fn stack(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w), "stack shape");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(a.n + b.n, a.c, a.h, a.w, data)
    }

    /// Splits a batch into its first `at` samples and the rest.
    pub fn unstack(&self, at: usize) -> (Tensor, Tensor) {
        let len = self.sample_len();
        let (x, y) = self.data.split_at(at * len);
        (
            Tensor::from_vec(at, self.c, self.h, self.w, x.to_vec()),
            Tensor::from_vec(self.n - at, self.c, self.h, self.w, y.to_vec()),
        )
    }
}

/// How a forward pass treats batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched. Used when a
    /// network participates in a step without being trained by it.
    Frozen,
    /// Running statistics.
    Inference,
}

/// A trainable array with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, value.len(), "param length");
        Param {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let len: usize = shape.iter().product();
        let value = (0..len).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// A non-trainable persistent array (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Anything that owns parameters and buffers.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;
    fn buffers(&self) -> Vec<&Buffer> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Buffer> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// Logistic function.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
