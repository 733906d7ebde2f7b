//! Central finite-difference gradient checking.
//!
//! The oracle evaluates a forward function twice per parameter entry and
//! never touches the tape, so it is an independent check on the reverse-mode
//! path. Run it at `f64` with `h = 1e-5`.

use super::{Result, Scalar, Tape, Tensor};

/// Worst relative gradient error over all entries of all inputs.
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_entries: usize,
}

/// Compare reverse-mode gradients of `f` against central finite differences.
///
/// `f` maps the input tensors to a scalar loss; it is called once on tape
/// for the analytic gradients and `2·N` more times off tape for the oracle.
/// The relative error of each entry is `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    // analytic pass
    let tape = Tape::new();
    let vars: Vec<Tensor<T>> = inputs.iter().map(|t| tape.var(t)).collect();
    let loss = f(&vars)?;
    let grads = loss.backward()?;

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for (idx, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(&vars[idx]) {
            Some(g) => g.to_f64_vec(),
            None => vec![0.0; input.numel()],
        };
        for entry in 0..input.numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe: Vec<Tensor<T>> = inputs.to_vec();
                let mut data = input.to_f64_vec();
                data[entry] += delta;
                probe[idx] = Tensor::from_vec(
                    data.into_iter().map(T::from_f64).collect(),
                    input.shape(),
                )?;
                Ok(f(&probe)?.item().as_f64())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = analytic[entry];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked_entries: checked,
    })
}
