//! Differentiable primitive operations.
//!
//! Each op computes its forward value and, when any operand is tracked,
//! pushes a node whose closure distributes the output gradient to the
//! operands. Broadcasting is restricted to leading-axis expansion: the
//! smaller operand's shape must equal a suffix of the larger's.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::tape::{joint_tape, push_node, GradBuf, TapeInner};
use super::{check_shape, strides, Result, Scalar, Tensor, TensorError};

// ── helpers ─────────────────────────────────────────────────────────

fn node_id<T: Scalar>(t: &Tensor<T>) -> Option<usize> {
    t.node.as_ref().map(|n| n.id)
}

fn finish<T: Scalar>(
    mut out: Tensor<T>,
    tape: Option<Rc<RefCell<TapeInner<T>>>>,
    back: impl Fn(&[T], &mut GradBuf<T>) + 'static,
) -> Tensor<T> {
    if let Some(tp) = tape {
        let node = push_node(&tp, out.shape().to_vec(), Box::new(back));
        out.set_tracked(node, true);
    }
    out
}

/// How two operand shapes line up under leading-axis broadcast.
enum Bcast {
    Equal,
    LhsBigger, // rhs repeats along lhs's leading axes
    RhsBigger,
}

fn broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    if lhs == rhs {
        return Ok((lhs.to_vec(), Bcast::Equal));
    }
    if lhs.len() > rhs.len() && lhs.ends_with(rhs) {
        return Ok((lhs.to_vec(), Bcast::LhsBigger));
    }
    if rhs.len() > lhs.len() && rhs.ends_with(lhs) {
        return Ok((rhs.to_vec(), Bcast::RhsBigger));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Sum a gradient of `big_len` elements down to the broadcast operand's
/// `small_len` by folding the leading repetition blocks.
fn reduce_leading<T: Scalar>(g: &[T], small_len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); small_len];
    for (i, v) in g.iter().enumerate() {
        out[i % small_len] = out[i % small_len] + *v;
    }
    out
}

fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, extent, inner)
}

fn binary_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    case: &Bcast,
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    match case {
        Bcast::Equal => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::LhsBigger => {
            let nb = b.len();
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % nb]))
                .collect()
        }
        Bcast::RhsBigger => {
            let na = a.len();
            b.iter()
                .enumerate()
                .map(|(i, &y)| f(a[i % na], y))
                .collect()
        }
    }
}

// ── matmul kernels ──────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// C[m,k] += G[m,n] · Bᵀ (B stored [k,n])
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc = acc + gv * bv;
            }
            orow[p] = orow[p] + acc;
        }
    }
}

/// C[k,n] += Aᵀ · G (A stored [m,k], G stored [m,n])
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

// ── elementwise binary ops ──────────────────────────────────────────

macro_rules! binary_op {
    ($name:ident, $opname:literal, $fwd:expr, $da:expr, $db:expr) => {
        pub fn $name(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
            let (out_shape, case) = broadcast($opname, self.shape(), other.shape())?;
            let data = binary_forward(self.data(), other.data(), &case, $fwd);
            let tape = joint_tape(&[self, other])?;
            let out = Tensor::from_parts(out_shape, data);
            let Some(tp) = tape else { return Ok(out) };
            let a_id = node_id(self);
            let b_id = node_id(other);
            let a_len = self.numel();
            let b_len = other.numel();
            let a_data = self.shared_data();
            let b_data = other.shared_data();
            Ok(finish(out, Some(tp), move |g, buf| {
                if let Some(ai) = a_id {
                    let da: fn(&[T], &Arc<Vec<T>>, &Arc<Vec<T>>) -> Vec<T> = $da;
                    let full = da(g, &a_data, &b_data);
                    let contrib = if full.len() == a_len {
                        full
                    } else {
                        reduce_leading(&full, a_len)
                    };
                    buf.accumulate(ai, contrib);
                }
                if let Some(bi) = b_id {
                    let db: fn(&[T], &Arc<Vec<T>>, &Arc<Vec<T>>) -> Vec<T> = $db;
                    let full = db(g, &a_data, &b_data);
                    let contrib = if full.len() == b_len {
                        full
                    } else {
                        reduce_leading(&full, b_len)
                    };
                    buf.accumulate(bi, contrib);
                }
            }))
        }
    };
}

impl<T: Scalar> Tensor<T> {
    binary_op!(
        add,
        "add",
        |x, y| x + y,
        |g, _a, _b| g.to_vec(),
        |g, _a, _b| g.to_vec()
    );

    binary_op!(
        sub,
        "sub",
        |x, y| x - y,
        |g, _a, _b| g.to_vec(),
        |g, _a, _b| g.iter().map(|&v| -v).collect()
    );

    binary_op!(
        mul,
        "mul",
        |x, y| x * y,
        |g, _a, b| {
            let nb = b.len();
            g.iter().enumerate().map(|(i, &v)| v * b[i % nb]).collect()
        },
        |g, a, _b| {
            let na = a.len();
            g.iter().enumerate().map(|(i, &v)| v * a[i % na]).collect()
        }
    );

    binary_op!(
        div,
        "div",
        |x, y| x / y,
        |g, _a, b| {
            let nb = b.len();
            g.iter().enumerate().map(|(i, &v)| v / b[i % nb]).collect()
        },
        |g, a, b| {
            let (na, nb) = (a.len(), b.len());
            g.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let bv = b[i % nb];
                    -v * a[i % na] / (bv * bv)
                })
                .collect()
        }
    );

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.mul_scalar(-T::one())
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x + c).collect();
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        let id = node_id(self);
        Ok(finish_unary(out, tape, id, move |g| g.to_vec()))
    }

    pub fn mul_scalar(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x * c).collect();
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        let id = node_id(self);
        Ok(finish_unary(out, tape, id, move |g| {
            g.iter().map(|&v| v * c).collect()
        }))
    }
}

fn finish_unary<T: Scalar>(
    out: Tensor<T>,
    tape: Option<Rc<RefCell<TapeInner<T>>>>,
    input: Option<usize>,
    dback: impl Fn(&[T]) -> Vec<T> + 'static,
) -> Tensor<T> {
    let Some(tp) = tape else { return out };
    finish(out, Some(tp), move |g, buf| {
        if let Some(id) = input {
            buf.accumulate(id, dback(g));
        }
    })
}

// ── unary math ──────────────────────────────────────────────────────

macro_rules! unary_op {
    ($name:ident, $fwd:expr, saved_out, $dback:expr) => {
        pub fn $name(&self) -> Result<Tensor<T>> {
            let data: Vec<T> = self.data().iter().map(|&x| $fwd(x)).collect();
            let tape = joint_tape(&[self])?;
            let out = Tensor::from_parts(self.shape().to_vec(), data);
            let id = node_id(self);
            let saved = out.shared_data();
            Ok(finish_unary(out, tape, id, move |g| {
                g.iter()
                    .zip(saved.iter())
                    .map(|(&gv, &y)| $dback(gv, y))
                    .collect()
            }))
        }
    };
    ($name:ident, $fwd:expr, saved_in, $dback:expr) => {
        pub fn $name(&self) -> Result<Tensor<T>> {
            let data: Vec<T> = self.data().iter().map(|&x| $fwd(x)).collect();
            let tape = joint_tape(&[self])?;
            let out = Tensor::from_parts(self.shape().to_vec(), data);
            let id = node_id(self);
            let saved = self.shared_data();
            Ok(finish_unary(out, tape, id, move |g| {
                g.iter()
                    .zip(saved.iter())
                    .map(|(&gv, &x)| $dback(gv, x))
                    .collect()
            }))
        }
    };
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tensor<T> {
    unary_op!(exp, |x: T| x.exp(), saved_out, |g: T, y: T| g * y);
    unary_op!(ln, |x: T| x.ln(), saved_in, |g: T, x: T| g / x);
    unary_op!(sqrt, |x: T| x.sqrt(), saved_out, |g: T, y: T| {
        g / (y + y)
    });
    unary_op!(sigmoid, sigmoid_val, saved_out, |g: T, y: T| {
        g * y * (T::one() - y)
    });
    unary_op!(tanh, |x: T| x.tanh(), saved_out, |g: T, y: T| {
        g * (T::one() - y * y)
    });
    unary_op!(abs, |x: T| x.abs(), saved_in, |g: T, x: T| {
        if x < T::zero() {
            -g
        } else {
            g
        }
    });

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("silu"));
        }
        let data: Vec<T> = self.data().iter().map(|&x| x * sigmoid_val(x)).collect();
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        let id = node_id(self);
        let saved = self.shared_data();
        Ok(finish_unary(out, tape, id, move |g| {
            g.iter()
                .zip(saved.iter())
                .map(|(&gv, &x)| {
                    let s = sigmoid_val(x);
                    gv * (s + x * s * (T::one() - s))
                })
                .collect()
        }))
    }

    /// Softmax along `axis`; lanes sum to one.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let (outer, extent, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = x[base];
                for j in 1..extent {
                    let v = x[base + j * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut sum = T::zero();
                for j in 0..extent {
                    let e = (x[base + j * inner] - max).exp();
                    data[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..extent {
                    data[base + j * inner] = data[base + j * inner] / sum;
                }
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        let id = node_id(self);
        let y = out.shared_data();
        let shape = self.shape().to_vec();
        Ok(finish_unary(out, tape, id, move |g| {
            let (outer, extent, inner) = lanes(&shape, axis);
            let mut dx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * extent * inner + i;
                    let mut dot = T::zero();
                    for j in 0..extent {
                        let idx = base + j * inner;
                        dot = dot + g[idx] * y[idx];
                    }
                    for j in 0..extent {
                        let idx = base + j * inner;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                }
            }
            dx
        }))
    }

    /// Normalize the last axis to unit RMS: `x / sqrt(mean(x²) + eps)`.
    pub fn rms_normalize(&self, eps: f64) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(TensorError::Contract("rms_normalize on scalar".into()));
        }
        let d = *self.shape().last().expect("rank >= 1");
        let x = self.data();
        let n_lanes = x.len() / d;
        let epst = T::from_f64(eps);
        let dlen = T::from_f64(d as f64);
        let mut rms = vec![T::zero(); n_lanes];
        let mut data = vec![T::zero(); x.len()];
        for lane in 0..n_lanes {
            let row = &x[lane * d..(lane + 1) * d];
            let mut sumsq = T::zero();
            for &v in row {
                sumsq = sumsq + v * v;
            }
            let r = (sumsq / dlen + epst).sqrt();
            rms[lane] = r;
            for (o, &v) in data[lane * d..(lane + 1) * d].iter_mut().zip(row) {
                *o = v / r;
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        let id = node_id(self);
        let saved_x = self.shared_data();
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); g.len()];
            for lane in 0..n_lanes {
                let r = rms[lane];
                let row = &saved_x[lane * d..(lane + 1) * d];
                let grow = &g[lane * d..(lane + 1) * d];
                let mut dot = T::zero();
                for (&gv, &xv) in grow.iter().zip(row) {
                    dot = dot + gv * xv;
                }
                let r3 = r * r * r;
                for j in 0..d {
                    dx[lane * d + j] = grow[j] / r - row[j] * dot / (dlen * r3);
                }
            }
            dx
        }))
    }

    /// Mean of squared differences; the flow-matching and reconstruction
    /// training criterion.
    pub fn mse(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        if self.data().iter().any(|v| !v.is_finite())
            || other.data().iter().any(|v| !v.is_finite())
        {
            return Err(TensorError::NonFinite("mse"));
        }
        let d = self.sub(other)?;
        let sq = d.mul(&d)?;
        sq.reduce_mean(None)
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Sum over `axis`, or over all elements when `axis` is `None`.
    pub fn reduce_sum(&self, axis: Option<usize>) -> Result<Tensor<T>> {
        self.reduce_impl(axis, false)
    }

    /// Mean over `axis`, or over all elements when `axis` is `None`.
    pub fn reduce_mean(&self, axis: Option<usize>) -> Result<Tensor<T>> {
        self.reduce_impl(axis, true)
    }

    fn reduce_impl(&self, axis: Option<usize>, mean: bool) -> Result<Tensor<T>> {
        let in_shape = self.shape().to_vec();
        let in_len = self.numel();
        let (out_shape, outer, extent, inner) = match axis {
            None => (vec![1], 1usize, in_len, 1usize),
            Some(ax) => {
                if ax >= self.rank() {
                    return Err(TensorError::Contract(format!(
                        "reduce axis {ax} out of range for rank {}",
                        self.rank()
                    )));
                }
                let (o, e, i) = lanes(&in_shape, ax);
                let mut s: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != ax)
                    .map(|(_, &v)| v)
                    .collect();
                if s.is_empty() {
                    s.push(1);
                }
                (s, o, e, i)
            }
        };
        let scale = if mean {
            T::from_f64(1.0 / extent as f64)
        } else {
            T::one()
        };
        let x = self.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for j in 0..extent {
                    acc = acc + x[o * extent * inner + j * inner + i];
                }
                data[o * inner + i] = acc * scale;
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(out_shape, data);
        let id = node_id(self);
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); in_len];
            for o in 0..outer {
                for i in 0..inner {
                    let gv = g[o * inner + i] * scale;
                    for j in 0..extent {
                        dx[o * extent * inner + j * inner + i] = gv;
                    }
                }
            }
            dx
        }))
    }

    // ── shape algebra ───────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let tape = joint_tape(&[self])?;
        let mut out = Tensor {
            shape: shape.to_vec(),
            data: self.shared_data(),
            requires_grad: false,
            node: None,
        };
        if let Some(tp) = tape {
            let id = node_id(self);
            out = finish(out, Some(tp), move |g, buf| {
                if let Some(i) = id {
                    buf.accumulate(i, g.to_vec());
                }
            });
        }
        Ok(out)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Contract(format!(
                "invalid permutation {perm:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(out_shape.clone(), data);
        let id = node_id(self);
        let mut inverse = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(finish_unary(out, tape, id, move |g| {
            permute_data(g, &out_shape, &inverse)
        }))
    }

    pub fn transpose_last_two(&self) -> Result<Tensor<T>> {
        let rank = self.rank();
        if rank < 2 {
            return Err(TensorError::Contract(format!(
                "transpose_last_two requires rank >= 2, got {rank}"
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Insert a new axis of size `n` at `pos`, repeating the data along it.
    pub fn repeat_axis(&self, pos: usize, n: usize) -> Result<Tensor<T>> {
        if pos > self.rank() || n == 0 {
            return Err(TensorError::Contract(format!(
                "repeat_axis pos {pos} n {n} invalid for rank {}",
                self.rank()
            )));
        }
        let outer: usize = self.shape()[..pos].iter().product();
        let inner: usize = self.shape()[pos..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape.insert(pos, n);
        let x = self.data();
        let mut data = vec![T::zero(); outer * n * inner];
        for o in 0..outer {
            let src = &x[o * inner..(o + 1) * inner];
            for r in 0..n {
                data[(o * n + r) * inner..(o * n + r + 1) * inner].copy_from_slice(src);
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(out_shape, data);
        let id = node_id(self);
        let in_len = self.numel();
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); in_len];
            for o in 0..outer {
                for r in 0..n {
                    let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            dx
        }))
    }

    /// Contiguous sub-block of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return Err(TensorError::Contract(format!(
                "narrow(axis={axis}, start={start}, len={len}) invalid for shape {:?}",
                self.shape()
            )));
        }
        let (outer, extent, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &x[(o * extent + start) * inner..(o * extent + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(out_shape, data);
        let id = node_id(self);
        let in_len = self.numel();
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); in_len];
            for o in 0..outer {
                let dst =
                    &mut dx[(o * extent + start) * inner..(o * extent + start + len) * inner];
                dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            dx
        }))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::Contract(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            for (ax, (&ea, &eb)) in first.shape().iter().zip(p.shape()).enumerate() {
                if ax != axis && ea != eb {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
            total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let (outer, _, inner) = lanes(&out_shape, axis);
        let mut data = vec![T::zero(); outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let e = p.shape()[axis];
            let x = p.data();
            for o in 0..outer {
                let dst = &mut data[(o * total + offset) * inner..(o * total + offset + e) * inner];
                dst.copy_from_slice(&x[o * e * inner..(o + 1) * e * inner]);
            }
            offset += e;
        }
        let refs: Vec<&Tensor<T>> = parts.to_vec();
        let tape = joint_tape(&refs)?;
        let out = Tensor::from_parts(out_shape, data);
        let Some(tp) = tape else { return Ok(out) };
        let ids: Vec<Option<usize>> = parts.iter().map(|p| node_id(p)).collect();
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(finish(out, Some(tp), move |g, buf| {
            let mut offset = 0usize;
            for (id, &e) in ids.iter().zip(&extents) {
                if let Some(i) = id {
                    let mut dx = vec![T::zero(); outer * e * inner];
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + e) * inner];
                        dx[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                    }
                    buf.accumulate(*i, dx);
                }
                offset += e;
            }
        }))
    }

    /// Split along `axis` into blocks of the given sizes (which must sum to
    /// the extent). Inverse of [`Tensor::concat`].
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
        if axis >= self.rank() {
            return Err(TensorError::Contract(format!(
                "split axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        if sizes.iter().sum::<usize>() != self.shape()[axis] || sizes.iter().any(|&s| s == 0) {
            return Err(TensorError::Contract(format!(
                "split sizes {sizes:?} do not partition extent {}",
                self.shape()[axis]
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0usize;
        for &len in sizes {
            out.push(self.narrow(axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    // ── matmul ──────────────────────────────────────────────────────

    /// Matrix product over the last two axes. Leading axes must match
    /// exactly, or one operand may be rank-2 and is then shared across the
    /// other's leading axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, ka) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        let batch_a = &self.shape()[..ra - 2];
        let batch_b = &other.shape()[..rb - 2];
        let batch_ok = batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty();
        if ka != kb || !batch_ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let k = ka;
        let batch: Vec<usize> = if batch_a.is_empty() {
            batch_b.to_vec()
        } else {
            batch_a.to_vec()
        };
        let nbatch: usize = batch.iter().product();
        let a_bcast = batch_a.is_empty() && !batch.is_empty();
        let b_bcast = batch_b.is_empty() && !batch.is_empty();

        let a = self.data();
        let b = other.data();
        let mut data = vec![T::zero(); nbatch * m * n];
        for bi in 0..nbatch {
            let ablk = if a_bcast { 0 } else { bi * m * k };
            let bblk = if b_bcast { 0 } else { bi * k * n };
            mm_acc(
                &a[ablk..ablk + m * k],
                &b[bblk..bblk + k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);

        let tape = joint_tape(&[self, other])?;
        let out = Tensor::from_parts(out_shape, data);
        let Some(tp) = tape else { return Ok(out) };
        let a_id = node_id(self);
        let b_id = node_id(other);
        let a_data = self.shared_data();
        let b_data = other.shared_data();
        let (a_len, b_len) = (self.numel(), other.numel());
        Ok(finish(out, Some(tp), move |g, buf| {
            if let Some(ai) = a_id {
                let mut da = vec![T::zero(); a_len];
                for bi in 0..nbatch {
                    let ablk = if a_bcast { 0 } else { bi * m * k };
                    let bblk = if b_bcast { 0 } else { bi * k * n };
                    mm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &b_data[bblk..bblk + k * n],
                        m,
                        n,
                        k,
                        &mut da[ablk..ablk + m * k],
                    );
                }
                buf.accumulate(ai, da);
            }
            if let Some(bi_id) = b_id {
                let mut db = vec![T::zero(); b_len];
                for bi in 0..nbatch {
                    let ablk = if a_bcast { 0 } else { bi * m * k };
                    let bblk = if b_bcast { 0 } else { bi * k * n };
                    mm_tn_acc(
                        &a_data[ablk..ablk + m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut db[bblk..bblk + k * n],
                    );
                }
                buf.accumulate(bi_id, db);
            }
        }))
    }

    // ── sliding-window algebra for 1-D convolutions ─────────────────

    /// Extract sliding windows: `[C, T] -> [C·k, L]` with
    /// `L = (T - k)/stride + 1`. Column `l` holds window `l·stride..+k` of
    /// every channel. Adjoint of [`Tensor::fold1d`].
    pub fn unfold1d(&self, k: usize, stride: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(TensorError::Contract(format!(
                "unfold1d requires rank 2, got shape {:?}",
                self.shape()
            )));
        }
        let (c, t) = (self.shape()[0], self.shape()[1]);
        if k == 0 || stride == 0 || k > t {
            return Err(TensorError::Contract(format!(
                "unfold1d k={k} stride={stride} invalid for length {t}"
            )));
        }
        let l = (t - k) / stride + 1;
        let x = self.data();
        let mut data = vec![T::zero(); c * k * l];
        for ci in 0..c {
            for j in 0..k {
                let row = (ci * k + j) * l;
                for li in 0..l {
                    data[row + li] = x[ci * t + li * stride + j];
                }
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(vec![c * k, l], data);
        let id = node_id(self);
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); c * t];
            for ci in 0..c {
                for j in 0..k {
                    let row = (ci * k + j) * l;
                    for li in 0..l {
                        let idx = ci * t + li * stride + j;
                        dx[idx] = dx[idx] + g[row + li];
                    }
                }
            }
            dx
        }))
    }

    /// Overlap-add of sliding windows: `[C·k, L] -> [C, t_out]`, adding
    /// window `l` of each channel at offset `l·stride`. Adjoint of
    /// [`Tensor::unfold1d`].
    pub fn fold1d(&self, k: usize, stride: usize, t_out: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] % k != 0 {
            return Err(TensorError::Contract(format!(
                "fold1d requires rank 2 with first extent divisible by k={k}, got {:?}",
                self.shape()
            )));
        }
        let c = self.shape()[0] / k;
        let l = self.shape()[1];
        if (l - 1) * stride + k > t_out {
            return Err(TensorError::Contract(format!(
                "fold1d windows overrun output length {t_out}"
            )));
        }
        let x = self.data();
        let mut data = vec![T::zero(); c * t_out];
        for ci in 0..c {
            for j in 0..k {
                let row = (ci * k + j) * l;
                for li in 0..l {
                    let idx = ci * t_out + li * stride + j;
                    data[idx] = data[idx] + x[row + li];
                }
            }
        }
        let tape = joint_tape(&[self])?;
        let out = Tensor::from_parts(vec![c, t_out], data);
        let id = node_id(self);
        let in_len = self.numel();
        Ok(finish_unary(out, tape, id, move |g| {
            let mut dx = vec![T::zero(); in_len];
            for ci in 0..c {
                for j in 0..k {
                    let row = (ci * k + j) * l;
                    for li in 0..l {
                        dx[row + li] = g[ci * t_out + li * stride + j];
                    }
                }
            }
            dx
        }))
    }
}

fn permute_data<T: Scalar>(x: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut data = vec![x[0]; x.len()];
    // stride of each output axis in the input layout
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for (oi, slot) in data.iter_mut().enumerate() {
        let mut rem = oi;
        let mut ii = 0;
        for ax in 0..rank {
            let coord = rem / out_strides[ax];
            rem %= out_strides[ax];
            ii += coord * mapped[ax];
        }
        *slot = x[ii];
    }
    data
}
