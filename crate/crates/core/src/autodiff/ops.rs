//! Pure tensor kernels. The graph in [`super::graph`] records these and
//! supplies their derivatives; they can also be called directly.
//!
//! Reductions accumulate in `f64` and run in a fixed order, so results are
//! deterministic and independent of the element type's rounding.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major 2-D view dimensions of a tensor that must be a matrix.
fn matrix_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// General product `op(a) · op(b)` where `op` optionally transposes.
pub(crate) fn gemm<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = matrix_dims("matmul", a)?;
    let (br, bc) = matrix_dims("matmul", b)?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {:?}{} x {:?}{}", a.shape(), if trans_a { "ᵀ" } else { "" }, b.shape(), if trans_b { "ᵀ" } else { "" }),
        ));
    }
    let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out = vec![T::zero(); m * n];
    // SAFETY: dimensions and strides were derived from the tensors' shapes above.
    unsafe {
        T::gemm(m, k, n, a.data().as_ptr(), rsa, csa, b.data().as_ptr(), rsb, csb, out.as_mut_ptr(), n as isize, 1);
    }
    Tensor::new(&[m, n], out)?.ensure_finite("matmul")
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, false, b, false)
}

/// How `b` lines up against `a` in a binary op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b` holds one row that is applied to every row of `a`.
    Rows,
}

pub(crate) fn broadcast_mode<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.ndim() >= 2 && b.rows() == 1 && b.numel() == a.cols() {
        Ok(Broadcast::Rows)
    } else {
        Err(Error::shape(op, format!("incompatible shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

pub fn elementwise<T: Real>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mode = broadcast_mode("elementwise", a, b)?;
    let f = match kind {
        BinaryKind::Add => |x: T, y: T| x + y,
        BinaryKind::Sub => |x: T, y: T| x - y,
        BinaryKind::Mul => |x: T, y: T| x * y,
    };
    let bd = b.data();
    let data = match mode {
        Broadcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Rows => {
            let c = bd.len();
            a.data().chunks_exact(c).flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect()
        }
    };
    Tensor::new(a.shape(), data)?.ensure_finite("elementwise")
}

pub fn map_nonlinear<T: Real>(kind: Nonlinearity, a: &Tensor<T>) -> Result<Tensor<T>> {
    let out = match kind {
        Nonlinearity::Relu => a.map(|x| if x > T::zero() { x } else { T::zero() }),
        Nonlinearity::Sigmoid => a.map(|x| T::of(sigmoid_scalar(x.as_f64()))),
        Nonlinearity::Exp => a.map(|x| x.exp()),
        Nonlinearity::Log => {
            if let Some(bad) = a.data().iter().find(|&&x| x <= T::zero()) {
                return Err(Error::domain("log", format!("non-positive input {bad}")));
            }
            a.map(|x| x.ln())
        }
    };
    out.ensure_finite(match kind {
        Nonlinearity::Relu => "relu",
        Nonlinearity::Sigmoid => "sigmoid",
        Nonlinearity::Exp => "exp",
        Nonlinearity::Log => "log",
    })
}

/// `(outer, len, inner)` strides for iterating along `axis`.
pub(crate) fn axis_layout(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

/// Applies `f` to each fibre along `axis`, writing one output per fibre.
fn fold_axis<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    axis: usize,
    f: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(op, a.shape(), axis)?;
    let d = a.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut it = (0..len).map(|j| d[base + j * inner].as_f64());
            out.push(T::of(f(&mut it)));
        }
    }
    Tensor::new(&reduced_shape(a.shape(), axis), out)?.ensure_finite(op)
}

pub fn reduce<T: Real>(kind: ReduceKind, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let len = *a.shape().get(axis).unwrap_or(&1) as f64;
    match kind {
        ReduceKind::Sum => fold_axis("sum", a, axis, |it| it.sum()),
        ReduceKind::Mean => fold_axis("mean", a, axis, |it| it.sum::<f64>() / len),
    }
}

pub fn sum_all<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::scalar(T::of(a.data().iter().map(|x| x.as_f64()).sum())).ensure_finite("sum")
}

pub(crate) fn logsumexp_f64(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn logsumexp<T: Real>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("logsumexp", a.shape(), axis)?;
    let d = a.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            out.push(T::of(logsumexp_f64((0..len).map(|j| d[base + j * inner].as_f64()))));
        }
    }
    Tensor::new(&reduced_shape(a.shape(), axis), out)?.ensure_finite("logsumexp")
}

pub fn softmax<T: Real>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout("softmax", a.shape(), axis)?;
    let d = a.data();
    let mut out = vec![T::zero(); d.len()];
    let mut buf = vec![0.0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| d[base + j * inner].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = (d[base + j * inner].as_f64() - max).exp();
                total += *slot;
            }
            for (j, &e) in buf.iter().enumerate() {
                out[base + j * inner] = T::of(e / total);
            }
        }
    }
    Tensor::new(a.shape(), out)?.ensure_finite("softmax")
}
