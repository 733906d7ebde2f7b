//! Low-rank adapters: `base(x) + (α/r) · ((dropout(x)) Aᵀ) Bᵀ`.
//!
//! `B` starts at zero, so a fresh adapter leaves the base layer's function
//! unchanged; merging folds `(α/r)·BA` into the base weight.

use super::layers::Linear;
use super::{join, ParamWalk};
use crate::tensor::{Result, RngStream, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        // rank 64, alpha 16, dropout 0.1
        Self {
            rank: 64,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

pub struct LoraAdapter<T: Scalar> {
    /// `[rank, in]`, normal init with std 0.02.
    pub a: Tensor<T>,
    /// `[out, rank]`, zero init.
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(in_dim: usize, out_dim: usize, cfg: LoraConfig, rng: &mut RngStream) -> Self {
        assert!(cfg.rank > 0 && cfg.alpha > 0.0 && (0.0..1.0).contains(&cfg.dropout));
        let a = Tensor::randn_with(&[cfg.rank, in_dim], rng)
            .expect("positive dims")
            .mul_scalar(T::from_f64(0.02))
            .expect("constant scale");
        let b = Tensor::zeros(&[out_dim, cfg.rank]).expect("positive dims");
        Self {
            a,
            b,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

impl<T: Scalar> ParamWalk<T> for LoraAdapter<T> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "lora_a"), &mut self.a);
        f(join(prefix, "lora_b"), &mut self.b);
    }
}

/// Adapted forward pass. Dropout (inverted, deterministic given `rng`)
/// applies to the adapter path input only while `training` is set.
pub fn lora_forward<T: Scalar>(
    base: &Linear<T>,
    adapter: &LoraAdapter<T>,
    x: &Tensor<T>,
    training: bool,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    if adapter.a.shape()[1] != base.in_dim || adapter.b.shape()[0] != base.out_dim {
        return Err(TensorError::Contract(format!(
            "adapter dims {:?}/{:?} do not match base layer {}x{}",
            adapter.a.shape(),
            adapter.b.shape(),
            base.out_dim,
            base.in_dim
        )));
    }
    let base_out = base.forward(x)?;
    let adapter_in = if training && adapter.dropout > 0.0 {
        let keep = 1.0 - adapter.dropout;
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.bernoulli(keep) {
                    T::from_f64(1.0 / keep)
                } else {
                    T::zero()
                }
            })
            .collect();
        x.mul(&Tensor::from_vec(mask, x.shape())?)?
    } else {
        x.clone()
    };
    let low = adapter_in.matmul(&adapter.a.transpose_last_two()?)?;
    let delta = low
        .matmul(&adapter.b.transpose_last_two()?)?
        .mul_scalar(T::from_f64(adapter.scaling()))?;
    base_out.add(&delta)
}

/// Fold the adapter into the base weight: `W + (α/r)·B·A`.
pub fn merge_lora<T: Scalar>(base: &Linear<T>, adapter: &LoraAdapter<T>) -> Result<Linear<T>> {
    let delta = adapter
        .b
        .matmul(&adapter.a)?
        .mul_scalar(T::from_f64(adapter.scaling()))?;
    Ok(Linear {
        weight: base.weight.add(&delta)?.detached(),
        bias: base.bias.as_ref().map(|b| b.detached()),
        in_dim: base.in_dim,
        out_dim: base.out_dim,
    })
}
