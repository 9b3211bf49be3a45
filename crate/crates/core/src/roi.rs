//! ROI pooling over padded feature maps.
//!
//! A `Region` locates the true image inside a padded canvas in input-pixel
//! coordinates. After mapping through the downsampling ratio, pooling reads
//! only feature locations inside the mapped rectangle, so values on padding
//! regions can never influence the output, and the output grid size is fixed
//! regardless of the region size.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rectangle of the true image inside a padded canvas, in input pixels.
/// `x0 <= x < x1`, `y0 <= y < y1`; in this artifact the anchor is always the
/// origin (`x0 = y0 = 0`), padding on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub batch_index: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Region {
    pub fn anchored(batch_index: usize, width: usize, height: usize) -> Self {
        Region {
            batch_index,
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }
}

/// Geometry of an ROI pooling layer: the cumulative stride of the layers in
/// front of it, and the fixed output grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiPoolSpec {
    /// Downsampling ratio between network input and pooling input.
    pub downsample: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl RoiPoolSpec {
    pub fn new(downsample: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if downsample == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::usage(
                "RoiPoolSpec extents and downsample ratio must be >= 1".to_string(),
            ));
        }
        Ok(RoiPoolSpec {
            downsample,
            out_h,
            out_w,
        })
    }
}

/// Map input-pixel coordinates onto the feature map: divide by the
/// downsampling ratio and round half away from zero.
pub fn map_coords(x_i: usize, y_i: usize, tau: usize) -> Result<(usize, usize)> {
    if tau == 0 {
        return Err(Error::usage("downsample ratio must be >= 1".to_string()));
    }
    Ok((round_div(x_i, tau), round_div(y_i, tau)))
}

/// round(x / tau) with half rounded away from zero, in exact integer
/// arithmetic (no float round-off for large coordinates).
fn round_div(x: usize, tau: usize) -> usize {
    (2 * x + tau) / (2 * tau)
}

/// Saved state for the backward pass of ROI / adaptive max pooling.
#[derive(Debug, Clone)]
pub struct RoiPoolCtx {
    pub in_shape: [usize; 4],
    pub out_shape: [usize; 4],
    /// Flat feature index of the maximum for every output element; always a
    /// location inside the mapped region of its own sample.
    pub argmax: Vec<usize>,
}

/// Half-open bin `[start, end)` along one axis for output cell `m`:
/// `start = floor(m * rho)`, `end = ceil((m + 1) * rho)` clamped to the
/// mapped extent. Never empty for `rho > 0`.
fn bin_bounds(m: usize, rho: f64, extent: usize) -> (usize, usize) {
    let start = (m as f64 * rho).floor() as usize;
    let end = (((m + 1) as f64 * rho).ceil() as usize).min(extent);
    let end = end.max(start + 1);
    (start, end)
}

struct MappedRegion {
    fx0: usize,
    fy0: usize,
    fw: usize,
    fh: usize,
}

fn map_region(region: &Region, tau: usize, fh: usize, fw: usize, n: usize) -> Result<MappedRegion> {
    if region.batch_index >= n {
        return Err(Error::usage(format!(
            "region batch index {} out of range ({n} samples)",
            region.batch_index
        )));
    }
    if region.x0 >= region.x1 || region.y0 >= region.y1 {
        return Err(Error::DegenerateRegion(format!(
            "region ({},{})..({},{}) has no area",
            region.x0, region.y0, region.x1, region.y1
        )));
    }
    let (mx0, my0) = map_coords(region.x0, region.y0, tau)?;
    let (mx1, my1) = map_coords(region.x1, region.y1, tau)?;
    if mx1 <= mx0 || my1 <= my0 {
        return Err(Error::DegenerateRegion(format!(
            "region ({},{})..({},{}) maps to an empty feature rectangle at ratio {tau}",
            region.x0, region.y0, region.x1, region.y1
        )));
    }
    if mx1 > fw || my1 > fh {
        return Err(Error::dimension(format!(
            "mapped region {mx0},{my0}..{mx1},{my1} exceeds feature map {fh}x{fw}"
        )));
    }
    Ok(MappedRegion {
        fx0: mx0,
        fy0: my0,
        fw: mx1 - mx0,
        fh: my1 - my0,
    })
}

/// Max-pool each region of a padded feature map onto a fixed output grid.
///
/// Bin `(m, n)` of sample `i` covers feature rows/columns inside the mapped
/// region of `regions[i]` only; no location outside it is ever read.
pub fn roi_maxpool_forward(
    features: &Tensor,
    regions: &[Region],
    spec: &RoiPoolSpec,
) -> Result<(Tensor, RoiPoolCtx)> {
    let (n, c, fh, fw) = features.dims4()?;
    if regions.len() != n {
        return Err(Error::usage(format!(
            "expected {n} regions for batch of {n}, got {}",
            regions.len()
        )));
    }
    let mapped: Vec<MappedRegion> = regions
        .iter()
        .map(|r| map_region(r, spec.downsample, fh, fw, n))
        .collect::<Result<_>>()?;

    let (oh, ow) = (spec.out_h, spec.out_w);
    let out_stride = c * oh * ow;
    let mut out = vec![0.0; n * out_stride];
    let mut argmax = vec![0usize; n * out_stride];
    let data = features.data();

    out.par_chunks_mut(out_stride)
        .zip(argmax.par_chunks_mut(out_stride))
        .zip(mapped.par_iter().zip(regions.par_iter()))
        .for_each(|((out_s, arg_s), (m, region))| {
            let rho_y = m.fh as f64 / oh as f64;
            let rho_x = m.fw as f64 / ow as f64;
            let sample_base = region.batch_index * c * fh * fw;
            let mut o = 0;
            for ci in 0..c {
                let plane = sample_base + ci * fh * fw;
                for by in 0..oh {
                    let (ys, ye) = bin_bounds(by, rho_y, m.fh);
                    for bx in 0..ow {
                        let (xs, xe) = bin_bounds(bx, rho_x, m.fw);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for y in ys..ye {
                            let row = plane + (m.fy0 + y) * fw + m.fx0;
                            for x in xs..xe {
                                let v = data[row + x];
                                if v > best {
                                    best = v;
                                    best_idx = row + x;
                                }
                            }
                        }
                        out_s[o] = best;
                        arg_s[o] = best_idx;
                        o += 1;
                    }
                }
            }
        });

    let ctx = RoiPoolCtx {
        in_shape: [n, c, fh, fw],
        out_shape: [n, c, oh, ow],
        argmax,
    };
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, ctx))
}

/// Route the pooled gradient back to the recorded argmax positions.
/// Positions outside every mapped region receive exactly 0; overlapping bins
/// accumulate additively.
pub fn roi_maxpool_backward(ctx: &RoiPoolCtx, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != ctx.out_shape {
        return Err(Error::usage(format!(
            "roi_maxpool_backward: grad shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            ctx.out_shape
        )));
    }
    let numel: usize = ctx.in_shape.iter().product();
    let mut gx = vec![0.0; numel];
    for (&idx, &g) in ctx.argmax.iter().zip(grad_out.data()) {
        gx[idx] += g;
    }
    Tensor::new(ctx.in_shape.to_vec(), gx)
}

/// Saved bilinear weights for the winning sample point of each output cell.
#[derive(Debug, Clone)]
pub struct RoiAlignCtx {
    pub in_shape: [usize; 4],
    pub out_shape: [usize; 4],
    /// Four (flat index, weight) pairs per output element.
    pub taps: Vec<[(usize, f64); 4]>,
}

/// Bilinear taps for a continuous coordinate on one feature plane.
fn bilinear_taps(
    plane_base: usize,
    fh: usize,
    fw: usize,
    sy: f64,
    sx: f64,
) -> [(usize, f64); 4] {
    let y = sy.clamp(0.0, (fh - 1) as f64);
    let x = sx.clamp(0.0, (fw - 1) as f64);
    let y_lo = y.floor() as usize;
    let x_lo = x.floor() as usize;
    let y_hi = (y_lo + 1).min(fh - 1);
    let x_hi = (x_lo + 1).min(fw - 1);
    let fy = y - y_lo as f64;
    let fx = x - x_lo as f64;
    [
        (plane_base + y_lo * fw + x_lo, (1.0 - fy) * (1.0 - fx)),
        (plane_base + y_lo * fw + x_hi, (1.0 - fy) * fx),
        (plane_base + y_hi * fw + x_lo, fy * (1.0 - fx)),
        (plane_base + y_hi * fw + x_hi, fy * fx),
    ]
}

/// ROI align: regions map through exact division (no rounding); each bin is
/// probed at a regular grid of bilinearly interpolated sample points and the
/// bin value is the maximum over those probes, mirroring the max aggregation
/// of the pooling variant.
pub fn roi_align_forward(
    features: &Tensor,
    regions: &[Region],
    spec: &RoiPoolSpec,
    samples_per_bin: usize,
) -> Result<(Tensor, RoiAlignCtx)> {
    let (n, c, fh, fw) = features.dims4()?;
    if regions.len() != n {
        return Err(Error::usage(format!(
            "expected {n} regions for batch of {n}, got {}",
            regions.len()
        )));
    }
    if samples_per_bin == 0 {
        return Err(Error::usage("samples_per_bin must be >= 1".to_string()));
    }
    let tau = spec.downsample as f64;
    for r in regions {
        if r.batch_index >= n {
            return Err(Error::usage(format!(
                "region batch index {} out of range",
                r.batch_index
            )));
        }
        if r.x0 >= r.x1 || r.y0 >= r.y1 {
            return Err(Error::DegenerateRegion("region has no area".to_string()));
        }
        if r.x1 as f64 / tau > fw as f64 || r.y1 as f64 / tau > fh as f64 {
            return Err(Error::dimension(
                "aligned region exceeds feature map".to_string(),
            ));
        }
    }

    let (oh, ow) = (spec.out_h, spec.out_w);
    let out_stride = c * oh * ow;
    let mut out = vec![0.0; n * out_stride];
    let mut taps = vec![[(0usize, 0.0f64); 4]; n * out_stride];
    let data = features.data();
    let s = samples_per_bin;

    out.par_chunks_mut(out_stride)
        .zip(taps.par_chunks_mut(out_stride))
        .zip(regions.par_iter())
        .for_each(|((out_s, taps_s), region)| {
            let fx0 = region.x0 as f64 / tau;
            let fy0 = region.y0 as f64 / tau;
            let rho_x = (region.x1 as f64 / tau - fx0) / ow as f64;
            let rho_y = (region.y1 as f64 / tau - fy0) / oh as f64;
            let sample_base = region.batch_index * c * fh * fw;
            let mut o = 0;
            for ci in 0..c {
                let plane = sample_base + ci * fh * fw;
                for by in 0..oh {
                    let bin_y = fy0 + by as f64 * rho_y;
                    for bx in 0..ow {
                        let bin_x = fx0 + bx as f64 * rho_x;
                        let mut best = f64::NEG_INFINITY;
                        let mut best_taps = [(0usize, 0.0f64); 4];
                        for sy in 0..s {
                            let py = bin_y + (sy as f64 + 0.5) * rho_y / s as f64;
                            for sx in 0..s {
                                let px = bin_x + (sx as f64 + 0.5) * rho_x / s as f64;
                                let t = bilinear_taps(plane, fh, fw, py, px);
                                let v: f64 = t.iter().map(|&(i, w)| data[i] * w).sum();
                                if v > best {
                                    best = v;
                                    best_taps = t;
                                }
                            }
                        }
                        out_s[o] = best;
                        taps_s[o] = best_taps;
                        o += 1;
                    }
                }
            }
        });

    let ctx = RoiAlignCtx {
        in_shape: [n, c, fh, fw],
        out_shape: [n, c, oh, ow],
        taps,
    };
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, ctx))
}

/// Distribute the pooled gradient through the bilinear weights of each
/// winning sample point.
pub fn roi_align_backward(ctx: &RoiAlignCtx, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != ctx.out_shape {
        return Err(Error::usage(format!(
            "roi_align_backward: grad shape {:?} does not match pooled shape {:?}",
            grad_out.shape(),
            ctx.out_shape
        )));
    }
    let numel: usize = ctx.in_shape.iter().product();
    let mut gx = vec![0.0; numel];
    for (taps, &g) in ctx.taps.iter().zip(grad_out.data()) {
        for &(idx, w) in taps {
            gx[idx] += g * w;
        }
    }
    Tensor::new(ctx.in_shape.to_vec(), gx)
}

/// Max-pool the full map onto a fixed grid: ROI pooling with the region set
/// to the whole feature map and unit downsampling ratio.
pub fn adaptive_maxpool(features: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, RoiPoolCtx)> {
    let (n, _, fh, fw) = features.dims4()?;
    let regions: Vec<Region> = (0..n).map(|i| Region::anchored(i, fw, fh)).collect();
    let spec = RoiPoolSpec::new(1, out_h, out_w)?;
    roi_maxpool_forward(features, &regions, &spec)
}

/// Smallest gap between the maximum and the runner-up over all pooling bins.
/// Bins with a single element impose no constraint. Finite-difference
/// checks use this to resample inputs that sit too close to an argmax tie.
pub fn tie_margin(features: &Tensor, regions: &[Region], spec: &RoiPoolSpec) -> f64 {
    let Ok((n, c, fh, fw)) = features.dims4() else {
        return f64::INFINITY;
    };
    let data = features.data();
    let mut margin = f64::INFINITY;
    for region in regions {
        let Ok(m) = map_region(region, spec.downsample, fh, fw, n) else {
            continue;
        };
        let rho_y = m.fh as f64 / spec.out_h as f64;
        let rho_x = m.fw as f64 / spec.out_w as f64;
        for ci in 0..c {
            let plane = (region.batch_index * c + ci) * fh * fw;
            for by in 0..spec.out_h {
                let (ys, ye) = bin_bounds(by, rho_y, m.fh);
                for bx in 0..spec.out_w {
                    let (xs, xe) = bin_bounds(bx, rho_x, m.fw);
                    let mut best = f64::NEG_INFINITY;
                    let mut second = f64::NEG_INFINITY;
                    for y in ys..ye {
                        let row = plane + (m.fy0 + y) * fw + m.fx0;
                        for x in xs..xe {
                            let v = data[row + x];
                            if v > best {
                                second = best;
                                best = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    // an exact tie at 0 is stable: dead activations cannot
                    // move under a small parameter perturbation
                    if second.is_finite() && !(best == 0.0 && second == 0.0) {
                        margin = margin.min(best - second);
                    }
                }
            }
        }
    }
    margin
}

/// `tie_margin` with the region set to the full map (adaptive pooling).
pub fn full_map_tie_margin(features: &Tensor, out_h: usize, out_w: usize) -> f64 {
    let Ok((n, _, fh, fw)) = features.dims4() else {
        return f64::INFINITY;
    };
    let regions: Vec<Region> = (0..n).map(|i| Region::anchored(i, fw, fh)).collect();
    let spec = RoiPoolSpec {
        downsample: 1,
        out_h,
        out_w,
    };
    tie_margin(features, &regions, &spec)
}
