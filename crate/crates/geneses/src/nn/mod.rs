//! Trainable layer primitives shared by the flow predictor, the VAE and the
//! conditioner: linear/RMSNorm/MLP layers, scaled dot-product attention,
//! sinusoidal embeddings, low-rank adapters, and the AdamW optimizer.

mod layers;
mod lora;
mod optim;

pub use layers::{
    multi_head_attention, sinusoidal_embed, sinusoidal_embed_vec, AttentionWeights, Linear, Mlp,
    RmsNorm,
};
pub use lora::{lora_forward, merge_lora, LoraAdapter, LoraConfig};
pub use optim::{AdamW, AdamWConfig, LrSchedule};

use crate::tensor::{Gradients, Scalar, Tape, Tensor};

/// Visitor over the named trainable parameters of a model component.
///
/// A stable, deterministic walk order is part of the contract: checkpoints,
/// optimizer slots and parameter hashes all key off the walked names.
pub trait ParamWalk<T: Scalar> {
    fn walk_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

/// Register every parameter of `m` on `tape` so the next backward pass
/// produces gradients for them.
pub fn watch_params<T: Scalar, M: ParamWalk<T> + ?Sized>(tape: &Tape<T>, m: &mut M) {
    m.walk_params("", &mut |_, p| tape.watch(p));
}

/// Snapshot of (name, shape, values) triples in walk order.
pub fn named_params<T: Scalar, M: ParamWalk<T> + ?Sized>(
    m: &mut M,
    prefix: &str,
) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out = Vec::new();
    m.walk_params(prefix, &mut |name, p| {
        out.push((name, p.shape().to_vec(), p.data().to_vec()));
    });
    out
}

/// Detach every parameter from any tape without changing its values.
pub fn detach_params<T: Scalar, M: ParamWalk<T> + ?Sized>(m: &mut M) {
    m.walk_params("", &mut |_, p| {
        *p = p.detached();
    });
}

/// SHA-256 over the little-endian bytes of all parameters in walk order.
/// Used by the frozen-component invariants.
pub fn param_hash<M: ParamWalk<f32> + ?Sized>(m: &mut M) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    m.walk_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.data() {
            h.update(v.to_le_bytes());
        }
    });
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Apply one optimizer step: look up each parameter's gradient and update it
/// in place. Errors if any registered parameter is missing a gradient or if
/// the gradient count disagrees with the parameter count.
pub fn apply_step<T: Scalar, M: ParamWalk<T> + ?Sized>(
    opt: &mut AdamW<T>,
    m: &mut M,
    grads: &Gradients<T>,
    lr: f64,
) -> crate::tensor::Result<()> {
    opt.begin_step(lr);
    let mut err = None;
    let mut n_params = 0usize;
    m.walk_params("", &mut |name, p| {
        n_params += 1;
        if err.is_some() {
            return;
        }
        match grads.get(p) {
            Some(g) => {
                let g = g.detached();
                if let Err(e) = opt.update(&name, p, &g) {
                    err = Some(e);
                }
            }
            None => {
                err = Some(crate::tensor::TensorError::Contract(format!(
                    "missing gradient for parameter {name}"
                )));
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if grads.len() != n_params {
        return Err(crate::tensor::TensorError::Contract(format!(
            "gradient count {} does not match registered parameter count {}",
            grads.len(),
            n_params
        )));
    }
    Ok(())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
