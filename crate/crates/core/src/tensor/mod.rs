//! Dense double-precision tensors and the layer primitives the model is
//! built from. Every forward op here has a deliberately simple definition so
//! it can be checked against a naive reference, and every backward op is the
//! exact gradient of its forward map (verified by finite differences).
//!
//! Determinism is contractual: reduction orders are fixed, so identical
//! inputs produce bit-identical outputs regardless of thread count.

mod conv;
mod pool;

pub use conv::{conv2d_backward, conv2d_backward_params, conv2d_forward};
pub use pool::{maxpool2d_backward, maxpool2d_forward, pool_tie_margin, MaxPoolCtx};

use crate::error::{Error, Result};

/// Dense row-major tensor of up to 4 dimensions (NCHW for feature maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    ///
    /// Zero extents are allowed (they make `concat` with an empty operand
    /// well-defined); the data length must always equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dimension(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dimension(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(other.shape.clone())
    }

    /// n x n identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interpret as a matrix, returning (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::dimension(format!("expected rank-2 tensor, got {s:?}"))),
        }
    }

    /// Interpret as an NCHW feature map, returning (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            s => Err(Error::dimension(format!("expected rank-4 tensor, got {s:?}"))),
        }
    }

    /// Reshape without copying; the element count must be unchanged.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dimension("reshape rank must be 1..=4".to_string()));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// A parameter tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros_like(&value);
        GradPair { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }

    /// Add `g` into the accumulated gradient.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.grad.shape() {
            return Err(Error::dimension(format!(
                "gradient shape {:?} does not match parameter shape {:?}",
                g.shape(),
                self.grad.shape()
            )));
        }
        for (a, b) in self.grad.data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
        Ok(())
    }
}

/// Matrix product of an MxK and a KxN matrix.
///
/// The i-k-j loop order accumulates each output element over k ascending,
/// exactly like the naive triple loop, so results are bit-identical to the
/// reference implementation.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul inner extents disagree: {m}x{ka} . {kb}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * ka..(i + 1) * ka];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// y = x . w + b, rows of x against columns of w, bias broadcast over rows.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (dw, m) = w.dims2()?;
    if d != dw || b.shape() != [m] {
        return Err(Error::dimension(format!(
            "affine shapes disagree: x {n}x{d}, w {dw}x{m}, b {:?}",
            b.shape()
        )));
    }
    let mut y = matmul(x, w)?;
    for row in y.data.chunks_mut(m) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Gradients of `affine` w.r.t. its inputs: (grad_x, grad_w, grad_b).
pub fn affine_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = x.dims2()?;
    let (dw, m) = w.dims2()?;
    let (gn, gm) = grad_out.dims2()?;
    if d != dw || gn != n || gm != m {
        return Err(Error::dimension(format!(
            "affine_backward shapes disagree: x {n}x{d}, w {dw}x{m}, grad {gn}x{gm}"
        )));
    }
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; d * m];
    let mut gb = vec![0.0; m];
    for i in 0..n {
        let g_row = &grad_out.data[i * m..(i + 1) * m];
        let x_row = &x.data[i * d..(i + 1) * d];
        let gx_row = &mut gx[i * d..(i + 1) * d];
        for j in 0..d {
            let w_row = &w.data[j * m..(j + 1) * m];
            let mut acc = 0.0;
            for (gv, wv) in g_row.iter().zip(w_row) {
                acc += gv * wv;
            }
            gx_row[j] = acc;
            let xv = x_row[j];
            let gw_row = &mut gw[j * m..(j + 1) * m];
            for (gwv, gv) in gw_row.iter_mut().zip(g_row) {
                *gwv += xv * gv;
            }
        }
        for (gbv, gv) in gb.iter_mut().zip(g_row) {
            *gbv += gv;
        }
    }
    Ok((
        Tensor::new(vec![n, d], gx)?,
        Tensor::new(vec![d, m], gw)?,
        Tensor::new(vec![m], gb)?,
    ))
}

/// Work chunk for elementwise maps; fixed so threading cannot affect
/// results (it cannot anyway: the maps are pointwise).
const ELEMWISE_CHUNK: usize = 1 << 16;

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    use rayon::prelude::*;
    let mut data = vec![0.0; x.data.len()];
    data.par_chunks_mut(ELEMWISE_CHUNK)
        .zip(x.data.par_chunks(ELEMWISE_CHUNK))
        .for_each(|(dst, src)| {
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = if v > 0.0 { v } else { 0.0 };
            }
        });
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Gradient of `relu`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    use rayon::prelude::*;
    if x.shape() != grad_out.shape() {
        return Err(Error::dimension(format!(
            "relu_backward shapes disagree: {:?} vs {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let mut data = vec![0.0; x.data.len()];
    data.par_chunks_mut(ELEMWISE_CHUNK)
        .zip(x.data.par_chunks(ELEMWISE_CHUNK))
        .zip(grad_out.data.par_chunks(ELEMWISE_CHUNK))
        .for_each(|((dst, xs), gs)| {
            for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                *d = if xv > 0.0 { gv } else { 0.0 };
            }
        });
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// Row-wise softmax of an NxK matrix, computed with max subtraction.
pub fn softmax(c: &Tensor) -> Result<Tensor> {
    let (n, k) = c.dims2()?;
    if !c.is_finite() {
        return Err(Error::numeric("softmax input contains non-finite values".to_string()));
    }
    if k == 0 {
        return Err(Error::dimension("softmax over zero classes".to_string()));
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &c.data[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (ov, &cv) in o.iter_mut().zip(row) {
            let e = (cv - max).exp();
            *ov = e;
            sum += e;
        }
        for ov in o.iter_mut() {
            *ov /= sum;
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Gradient of `softmax` given its output `p` and the upstream gradient:
/// grad_c = p .* (g - <g, p>) per row.
pub fn softmax_backward(p: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, k) = p.dims2()?;
    if grad_out.shape() != p.shape() {
        return Err(Error::dimension(format!(
            "softmax_backward shapes disagree: {:?} vs {:?}",
            p.shape(),
            grad_out.shape()
        )));
    }
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let p_row = &p.data[i * k..(i + 1) * k];
        let g_row = &grad_out.data[i * k..(i + 1) * k];
        let dot: f64 = p_row.iter().zip(g_row).map(|(&pv, &gv)| pv * gv).sum();
        let o = &mut out[i * k..(i + 1) * k];
        for j in 0..k {
            o[j] = p_row[j] * (g_row[j] - dot);
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Row-wise concatenation of an NxD1 and an NxD2 matrix into Nx(D1+D2).
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, d1) = a.dims2()?;
    let (nb, d2) = b.dims2()?;
    if na != nb {
        return Err(Error::dimension(format!(
            "concat row counts disagree: {na} vs {nb}"
        )));
    }
    let mut out = Vec::with_capacity(na * (d1 + d2));
    for i in 0..na {
        out.extend_from_slice(&a.data[i * d1..(i + 1) * d1]);
        out.extend_from_slice(&b.data[i * d2..(i + 1) * d2]);
    }
    Tensor::new(vec![na, d1 + d2], out)
}

/// Split the gradient of `concat` back into the two operands' gradients.
pub fn concat_backward(grad_out: &Tensor, d1: usize, d2: usize) -> Result<(Tensor, Tensor)> {
    let (n, d) = grad_out.dims2()?;
    if d != d1 + d2 {
        return Err(Error::dimension(format!(
            "concat_backward widths disagree: {d} vs {d1}+{d2}"
        )));
    }
    let mut ga = Vec::with_capacity(n * d1);
    let mut gb = Vec::with_capacity(n * d2);
    for i in 0..n {
        let row = &grad_out.data[i * d..(i + 1) * d];
        ga.extend_from_slice(&row[..d1]);
        gb.extend_from_slice(&row[d1..]);
    }
    Ok((Tensor::new(vec![n, d1], ga)?, Tensor::new(vec![n, d2], gb)?))
}

/// Relative-error floor: coordinates whose analytic and numeric gradients are
/// both below this magnitude are compared absolutely instead of relatively.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Compare the analytic gradient of a scalar-valued map against central
/// finite differences, coordinate by coordinate, returning the maximum
/// relative error.
///
/// `f` must return the value and the full analytic gradient at a point.
pub fn gradcheck<F>(f: &F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, h, &coords)
}

/// `gradcheck` restricted to a subset of coordinates (for large parameter
/// tensors where probing every coordinate is wasteful).
pub fn gradcheck_coords<F>(f: &F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if h <= 0.0 {
        return Err(Error::usage("gradcheck step must be positive".to_string()));
    }
    let (fx, analytic) = f(x)?;
    if !fx.is_finite() {
        return Err(Error::numeric(format!("gradcheck: f(x) = {fx}")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::dimension(
            "gradcheck: analytic gradient shape does not match input".to_string(),
        ));
    }
    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric("gradcheck: non-finite probe value".to_string()));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let scale = a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        max_err = max_err.max((numeric - a).abs() / scale);
    }
    Ok(max_err)
}
