//! Linear, RMSNorm and MLP layers plus scaled dot-product attention and
//! sinusoidal embeddings.

use super::{join, ParamWalk};
use crate::tensor::{Result, RngStream, Scalar, Tensor, TensorError};

/// Affine map `x Wᵀ + b` with weight stored `[out, in]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Scalar> Linear<T> {
    /// Uniform init in ±1/√fan_in.
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::rand_uniform(&[out_dim, in_dim], -bound, bound, rng)
            .expect("positive layer dims");
        let bias = bias.then(|| {
            Tensor::rand_uniform(&[out_dim], -bound, bound, rng).expect("positive layer dims")
        });
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// All-zero weights and bias; used for gates that must start as identity.
    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]).expect("positive layer dims"),
            bias: bias.then(|| Tensor::zeros(&[out_dim]).expect("positive layer dims")),
            in_dim,
            out_dim,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = vec![T::zero(); dim * dim];
        for i in 0..dim {
            w[i * dim + i] = T::one();
        }
        Self {
            weight: Tensor::from_vec(w, &[dim, dim]).expect("square"),
            bias: None,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() < 2 || *x.shape().last().expect("rank >= 2") != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "linear_forward",
                lhs: x.shape().to_vec(),
                rhs: self.weight.shape().to_vec(),
            });
        }
        let y = x.matmul(&self.weight.transpose_last_two()?)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<T: Scalar> ParamWalk<T> for Linear<T> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Feature-axis RMS normalization with a learned gain.
pub struct RmsNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> RmsNorm<T> {
    pub fn new(dim: usize, eps: f64) -> Self {
        assert!(eps > 0.0, "rmsnorm epsilon must be positive");
        Self {
            gain: Tensor::full(&[dim], T::one()).expect("positive dim"),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.rms_normalize(self.eps)?.mul(&self.gain)
    }
}

impl<T: Scalar> ParamWalk<T> for RmsNorm<T> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "gain"), &mut self.gain);
    }
}

/// Two linear layers with SiLU between.
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        Self {
            fc1: Linear::new(in_dim, hidden, true, rng),
            fc2: Linear::new(hidden, out_dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

impl<T: Scalar> ParamWalk<T> for Mlp<T> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.walk_params(&join(prefix, "fc1"), f);
        self.fc2.walk_params(&join(prefix, "fc2"), f);
    }
}

/// Projection weights for one attention block.
pub struct AttentionWeights<T: Scalar> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn new(dim: usize, rng: &mut RngStream) -> Self {
        Self {
            q: Linear::new(dim, dim, true, rng),
            k: Linear::new(dim, dim, true, rng),
            v: Linear::new(dim, dim, true, rng),
            out: Linear::new(dim, dim, true, rng),
        }
    }
}

impl<T: Scalar> ParamWalk<T> for AttentionWeights<T> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.q.walk_params(&join(prefix, "q"), f);
        self.k.walk_params(&join(prefix, "k"), f);
        self.v.walk_params(&join(prefix, "v"), f);
        self.out.walk_params(&join(prefix, "out"), f);
    }
}

/// `[.., len, dim] -> [.., heads, len, dim/heads]`
pub fn split_heads<T: Scalar>(x: &Tensor<T>, n_heads: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    let len = x.shape()[rank - 2];
    let dim = x.shape()[rank - 1];
    let mut shape = x.shape()[..rank - 2].to_vec();
    shape.extend([len, n_heads, dim / n_heads]);
    let y = x.reshape(&shape)?;
    let r = y.rank();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    y.permute(&perm)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 3, r - 2);
    let y = x.permute(&perm)?;
    let shape = y.shape().to_vec();
    let mut out_shape = shape[..r - 3].to_vec();
    out_shape.push(shape[r - 3]);
    out_shape.push(shape[r - 2] * shape[r - 1]);
    y.reshape(&out_shape)
}

/// Scaled dot-product attention over already-projected q/k/v head tensors
/// `[.., heads, len, d_head]`. Returns the merged `[.., len, dim]` context
/// (no output projection).
pub fn attention_context<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d_head = *q.shape().last().expect("projected q");
    let scale = T::from_f64(1.0 / (d_head as f64).sqrt());
    let scores = q
        .matmul(&k.transpose_last_two()?)?
        .mul_scalar(scale)?
        .softmax(q.rank() - 1)?;
    let ctx = scores.matmul(v)?;
    merge_heads(&ctx)
}

/// Standard multi-head attention: per-head scaled dot-product over the
/// projected inputs, heads concatenated, output projection applied.
/// `q_in`/`k_in`/`v_in` are `[.., len, dim]` with a shared model dim.
pub fn multi_head_attention<T: Scalar>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    n_heads: usize,
    w: &AttentionWeights<T>,
) -> Result<Tensor<T>> {
    let dim = *q_in.shape().last().expect("rank >= 2");
    if dim % n_heads != 0 {
        return Err(TensorError::Contract(format!(
            "model dim {dim} not divisible by {n_heads} heads"
        )));
    }
    let q = split_heads(&w.q.forward(q_in)?, n_heads)?;
    let k = split_heads(&w.k.forward(k_in)?, n_heads)?;
    let v = split_heads(&w.v.forward(v_in)?, n_heads)?;
    w.out.forward(&attention_context(&q, &k, &v)?)
}

/// Interleaved sin/cos embedding of a scalar position at geometrically
/// spaced frequencies (base 10000). `dim` must be even.
pub fn sinusoidal_embed_vec(position: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(TensorError::Contract(format!(
            "sinusoidal embedding dim must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        out[2 * i] = (position * freq).sin();
        out[2 * i + 1] = (position * freq).cos();
    }
    Ok(out)
}

pub fn sinusoidal_embed<T: Scalar>(position: f64, dim: usize) -> Result<Tensor<T>> {
    let v = sinusoidal_embed_vec(position, dim)?;
    Tensor::from_vec(v.into_iter().map(T::from_f64).collect(), &[dim])
}
