//! Fixed-window max pooling with recorded argmax positions. Ties break to
//! the first occurrence in a row-major scan of the window, which keeps the
//! op deterministic.

use super::Tensor;
use crate::error::{Error, Result};

/// Saved state from `maxpool2d_forward`, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct MaxPoolCtx {
    pub in_shape: [usize; 4],
    pub out_shape: [usize; 4],
    pub window: usize,
    pub stride: usize,
    /// Flat input index of the maximum for every output element.
    pub argmax: Vec<usize>,
}

pub fn maxpool2d_forward(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, MaxPoolCtx)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::usage("maxpool window and stride must be >= 1".to_string()));
    }
    if window > h || window > w {
        return Err(Error::dimension(format!(
            "maxpool window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];

    use rayon::prelude::*;
    let data = x.data();
    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (out_p, arg_p))| {
            let plane_base = plane * h * w;
            let mut o = 0;
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = plane_base + y0 * w + x0;
                    for ky in 0..window {
                        let row = plane_base + (y0 + ky) * w + x0;
                        for kx in 0..window {
                            let v = data[row + kx];
                            if v > best {
                                best = v;
                                best_idx = row + kx;
                            }
                        }
                    }
                    out_p[o] = best;
                    arg_p[o] = best_idx;
                    o += 1;
                }
            }
        });

    let ctx = MaxPoolCtx {
        in_shape: [n, c, h, w],
        out_shape: [n, c, oh, ow],
        window,
        stride,
        argmax,
    };
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, ctx))
}

/// Route each grad_out element to its recorded argmax position. Overlapping
/// windows accumulate additively.
pub fn maxpool2d_backward(ctx: &MaxPoolCtx, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != ctx.out_shape {
        return Err(Error::usage(format!(
            "maxpool2d_backward: grad shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            ctx.out_shape
        )));
    }
    use rayon::prelude::*;
    let [n, c, h, w] = ctx.in_shape;
    let [_, _, oh, ow] = ctx.out_shape;
    let mut gx = vec![0.0; n * c * h * w];
    // argmax indices never leave their own plane, so per-plane chunks of the
    // input gradient are written independently
    gx.par_chunks_mut(h * w)
        .zip(ctx.argmax.par_chunks(oh * ow))
        .zip(grad_out.data().par_chunks(oh * ow))
        .enumerate()
        .for_each(|(plane, ((gx_p, arg_p), g_p))| {
            let plane_base = plane * h * w;
            for (&idx, &g) in arg_p.iter().zip(g_p) {
                gx_p[idx - plane_base] += g;
            }
        });
    Tensor::new(ctx.in_shape.to_vec(), gx)
}

/// Smallest gap between the window maximum and its runner-up over all
/// windows; used by gradient checks to resample near argmax ties.
pub fn pool_tie_margin(x: &Tensor, window: usize, stride: usize) -> f64 {
    let Ok((n, c, h, w)) = x.dims4() else {
        return f64::INFINITY;
    };
    if window > h || window > w || window < 2 {
        return f64::INFINITY;
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = x.data();
    let mut margin = f64::INFINITY;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = data[row + kx];
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                // exact ties at 0 come from dead activations and are stable
                if !(best == 0.0 && second == 0.0) {
                    margin = margin.min(best - second);
                }
            }
        }
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn naive_maxpool(x: &Tensor, window: usize, stride: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let mut out = Tensor::zeros(vec![n, c, oh, ow]);
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..window {
                            for kx in 0..window {
                                let v = x.data()
                                    [((ni * c + ci) * h + oy * stride + ky) * w + ox * stride + kx];
                                best = best.max(v);
                            }
                        }
                        out.data_mut()[((ni * c + ci) * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor::full(vec![1, 2, 4, 4], 3.5);
        let (y, _) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn iota_picks_bottom_right() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (y, ctx) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(ctx.argmax, vec![5, 7, 13, 15]);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let h = rng.gen_range(3..9);
            let w = rng.gen_range(3..9);
            let window = rng.gen_range(1..=3.min(h.min(w)));
            let stride = rng.gen_range(1..=2);
            let data = (0..2 * 2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![2, 2, h, w], data).unwrap();
            let (got, _) = maxpool2d_forward(&x, window, stride).unwrap();
            let want = naive_maxpool(&x, window, stride);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn window_larger_than_input_errors() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            maxpool2d_forward(&x, 3, 1),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_is_indicator_for_distinct_maxima() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let (_, ctx) = maxpool2d_forward(&x, 2, 2).unwrap();
        let g = maxpool2d_backward(&ctx, &Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
        let want: Vec<f64> = (0..16)
            .map(|i| if [5, 7, 13, 15].contains(&i) { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.data(), want.as_slice());
    }

    #[test]
    fn overlapping_windows_accumulate() {
        // stride 1, window 2: the global max is argmax of several windows
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![0.0, 0.1, 0.2, 0.3, 9.0, 0.4, 0.5, 0.6, 0.7],
        )
        .unwrap();
        let (_, ctx) = maxpool2d_forward(&x, 2, 1).unwrap();
        let g = maxpool2d_backward(&ctx, &Tensor::full(vec![1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.data()[4], 4.0);
        assert_eq!(g.data().iter().sum::<f64>(), 4.0);
    }

    #[test]
    fn backward_finite_differences_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // values spread wide enough that h=1e-5 never flips an argmax
        let data: Vec<f64> = {
            let mut vals: Vec<f64> = (0..2 * 5 * 5).map(|i| i as f64 * 0.01).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(&mut rng);
            vals
        };
        let x0 = Tensor::new(vec![1, 2, 5, 5], data).unwrap();
        let gsum_data: Vec<f64> = (0..2 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gsum = Tensor::new(vec![1, 2, 4, 4], gsum_data).unwrap();
        let f = |x: &Tensor| -> crate::Result<(f64, Tensor)> {
            let (y, ctx) = maxpool2d_forward(x, 2, 1)?;
            let v = y.data().iter().zip(gsum.data()).map(|(&a, &b)| a * b).sum();
            Ok((v, maxpool2d_backward(&ctx, &gsum)?))
        };
        assert!(gradcheck(&f, &x0, 1e-5).unwrap() <= 1e-6);
    }

    #[test]
    fn backward_rejects_mismatched_grad() {
        let x = Tensor::zeros(vec![1, 1, 4, 4]);
        let (_, ctx) = maxpool2d_forward(&x, 2, 2).unwrap();
        let bad = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(matches!(
            maxpool2d_backward(&ctx, &bad),
            Err(crate::Error::Usage(_))
        ));
    }
}
