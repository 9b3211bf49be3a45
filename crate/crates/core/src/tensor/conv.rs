//! 2D cross-correlation with zero padding, implemented as im2col + GEMM.
//! The batch dimension is processed sample-by-sample (optionally in
//! parallel); all cross-sample reductions run in sample order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(Error::dimension(format!(
            "conv2d output extent non-positive: input {input}, kernel {k}, pad {pad}"
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn check_dims(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<ConvDims> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin {
        return Err(Error::dimension(format!(
            "conv2d channel mismatch: input {cin}, kernel {wcin}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::dimension(format!(
            "conv2d kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::usage("conv2d stride must be >= 1".to_string()));
    }
    let oh = out_extent(h, kh, stride, pad)?;
    let ow = out_extent(w, kw, stride, pad)?;
    Ok(ConvDims {
        n,
        cin,
        h,
        w,
        cout,
        k: kh,
        oh,
        ow,
    })
}

/// Expand one sample into the im2col matrix: `cin*k*k` rows by `oh*ow`
/// columns, row index ordered (cin, ki, kj) so the GEMM accumulates in the
/// same order as a naive nested loop.
fn im2col(sample: &[f64], d: &ConvDims, stride: usize, pad: usize, col: &mut [f64]) {
    let cols = d.oh * d.ow;
    debug_assert_eq!(col.len(), d.cin * d.k * d.k * cols);
    let mut r = 0;
    for ci in 0..d.cin {
        let plane = &sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &mut col[r * cols..(r + 1) * cols];
                r += 1;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy as usize >= d.h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, out) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *out = if ix < 0 || ix as usize >= d.w {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the gradient of the im2col matrix back onto the input plane.
fn col2im(col: &[f64], d: &ConvDims, stride: usize, pad: usize, sample: &mut [f64]) {
    let cols = d.oh * d.ow;
    let mut r = 0;
    for ci in 0..d.cin {
        let plane = &mut sample[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = &col[r * cols..(r + 1) * cols];
                r += 1;
                for oy in 0..d.oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src = &row[oy * d.ow..(oy + 1) * d.ow];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// C (m x n, row-major) = A (m x k) . B (k x n) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard cross-correlation with zero padding.
///
/// Input `N x Cin x H x W`, kernel `Cout x Cin x k x k` (k odd), bias `Cout`;
/// output `N x Cout x H' x W'` with `H' = (H + 2*pad - k) / stride + 1`.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    zero_pad: usize,
) -> Result<Tensor> {
    let d = check_dims(x, weight, stride, zero_pad)?;
    if bias.shape() != [d.cout] {
        return Err(Error::dimension(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            bias.shape(),
            d.cout
        )));
    }
    let kdim = d.cin * d.k * d.k;
    let cols = d.oh * d.ow;
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * cols;
    let mut out = vec![0.0; d.n * out_stride];

    out.par_chunks_mut(out_stride)
        .zip(x.data().par_chunks(in_stride))
        .for_each(|(out_s, in_s)| {
            let mut col = vec![0.0; kdim * cols];
            im2col(in_s, &d, stride, zero_pad, &mut col);
            dgemm(
                d.cout,
                kdim,
                cols,
                weight.data(),
                kdim as isize,
                1,
                &col,
                cols as isize,
                1,
                out_s,
            );
            for (c, row) in out_s.chunks_mut(cols).enumerate() {
                let b = bias.data()[c];
                for v in row.iter_mut() {
                    *v += b;
                }
            }
        });

    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

/// Exact gradients of `conv2d_forward` w.r.t. input, kernel, and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    zero_pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = check_dims(x, weight, stride, zero_pad)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::dimension(format!(
            "conv2d_backward grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            [d.n, d.cout, d.oh, d.ow]
        )));
    }
    let kdim = d.cin * d.k * d.k;
    let cols = d.oh * d.ow;
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * cols;

    let mut grad_x = vec![0.0; d.n * in_stride];
    // Per-sample kernel-gradient partials, reduced in sample order below.
    let mut gw_partials: Vec<Vec<f64>> = Vec::with_capacity(d.n);

    grad_x
        .par_chunks_mut(in_stride)
        .zip(x.data().par_chunks(in_stride))
        .zip(grad_out.data().par_chunks(out_stride))
        .map(|((gx_s, in_s), go_s)| {
            let mut col = vec![0.0; kdim * cols];
            im2col(in_s, &d, stride, zero_pad, &mut col);
            // grad_w partial = grad_out_s (Cout x L) . col^T (L x K)
            let mut gw = vec![0.0; d.cout * kdim];
            unsafe {
                matrixmultiply::dgemm(
                    d.cout,
                    cols,
                    kdim,
                    1.0,
                    go_s.as_ptr(),
                    cols as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    0.0,
                    gw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            // grad_col = w^T (K x Cout) . grad_out_s (Cout x L)
            let mut gcol = vec![0.0; kdim * cols];
            dgemm(
                kdim,
                d.cout,
                cols,
                weight.data(),
                1,
                kdim as isize,
                go_s,
                cols as isize,
                1,
                &mut gcol,
            );
            col2im(&gcol, &d, stride, zero_pad, gx_s);
            gw
        })
        .collect_into_vec(&mut gw_partials);

    let mut grad_w = vec![0.0; d.cout * kdim];
    for part in &gw_partials {
        for (a, b) in grad_w.iter_mut().zip(part) {
            *a += b;
        }
    }

    // grad_b[c] = sum of grad_out over channel c, in (n, oy, ox) order
    let mut grad_b = vec![0.0; d.cout];
    for sample in grad_out.data().chunks(out_stride) {
        for (c, row) in sample.chunks(cols).enumerate() {
            let mut acc = 0.0;
            for &g in row {
                acc += g;
            }
            grad_b[c] += acc;
        }
    }

    Ok((
        Tensor::new(vec![d.n, d.cin, d.h, d.w], grad_x)?,
        Tensor::new(vec![d.cout, d.cin, d.k, d.k], grad_w)?,
        Tensor::new(vec![d.cout], grad_b)?,
    ))
}

/// `conv2d_backward` without the input gradient, for the first layer of a
/// network where nothing upstream consumes it.
pub fn conv2d_backward_params(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    zero_pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = check_dims(x, weight, stride, zero_pad)?;
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::dimension(format!(
            "conv2d_backward_params grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            [d.n, d.cout, d.oh, d.ow]
        )));
    }
    let kdim = d.cin * d.k * d.k;
    let cols = d.oh * d.ow;
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * cols;

    let mut gw_partials: Vec<Vec<f64>> = Vec::with_capacity(d.n);
    x.data()
        .par_chunks(in_stride)
        .zip(grad_out.data().par_chunks(out_stride))
        .map(|(in_s, go_s)| {
            let mut col = vec![0.0; kdim * cols];
            im2col(in_s, &d, stride, zero_pad, &mut col);
            let mut gw = vec![0.0; d.cout * kdim];
            unsafe {
                matrixmultiply::dgemm(
                    d.cout,
                    cols,
                    kdim,
                    1.0,
                    go_s.as_ptr(),
                    cols as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    0.0,
                    gw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
            }
            gw
        })
        .collect_into_vec(&mut gw_partials);

    let mut grad_w = vec![0.0; d.cout * kdim];
    for part in &gw_partials {
        for (a, b) in grad_w.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut grad_b = vec![0.0; d.cout];
    for sample in grad_out.data().chunks(out_stride) {
        for (c, row) in sample.chunks(cols).enumerate() {
            let mut acc = 0.0;
            for &g in row {
                acc += g;
            }
            grad_b[c] += acc;
        }
    }
    Ok((
        Tensor::new(vec![d.cout, d.cin, d.k, d.k], grad_w)?,
        Tensor::new(vec![d.cout], grad_b)?,
    ))
}
