//! The theme-aware distribution network.
//!
//! Pipeline: a small convolutional stem over the padded canvas, ROI max
//! pooling onto a fixed grid (reading only the image region), three more
//! conv/pool stages, adaptive max pooling to 4x4, then fusion of the
//! flattened visual feature with an encoded theme and a final affine layer
//! producing K logits.
//!
//! Because the stem is zero-padding-compatible and the ROI stage never reads
//! outside the mapped region, predictions are identical across any two
//! canvas sizes that both contain the image.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use serde::{Deserialize, Serialize};

use crate::data::{PaddedBatch, ThemeId, TransformMode, CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::ScoreDistribution;
use crate::roi::{
    adaptive_maxpool, map_coords, roi_align_backward, roi_align_forward, roi_maxpool_backward,
    roi_maxpool_forward, Region, RoiAlignCtx, RoiPoolCtx, RoiPoolSpec,
};
use crate::tensor::{
    affine, affine_backward, concat, concat_backward, conv2d_backward, conv2d_forward,
    maxpool2d_backward, maxpool2d_forward, relu, relu_backward, softmax, GradPair, MaxPoolCtx,
    Tensor,
};

/// Input-transform / architecture variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Padded input, ROI pooling, theme fusion (the full model).
    PadRoiTheme,
    /// Padded input, ROI pooling, theme feature zeroed.
    PadRoi,
    /// Bilinear resize to the canvas; adaptive pooling; no theme.
    Resize,
    /// Aspect-preserving resize then pad; adaptive pooling; no theme.
    ResizedPad,
    /// Resize shorter edge then random crop; adaptive pooling; no theme.
    RandomCrop,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::PadRoiTheme,
        ModelVariant::PadRoi,
        ModelVariant::Resize,
        ModelVariant::ResizedPad,
        ModelVariant::RandomCrop,
    ];

    pub fn transform_mode(self) -> TransformMode {
        match self {
            ModelVariant::PadRoiTheme | ModelVariant::PadRoi => TransformMode::Pad,
            ModelVariant::Resize => TransformMode::Resize,
            ModelVariant::ResizedPad => TransformMode::ResizedPad,
            ModelVariant::RandomCrop => TransformMode::RandomCrop,
        }
    }

    /// ROI pooling reads the per-sample region; the baselines pool the full
    /// (already fixed-size) input adaptively.
    pub fn uses_roi(self) -> bool {
        matches!(self, ModelVariant::PadRoiTheme | ModelVariant::PadRoi)
    }

    /// Only the full model consumes the theme; every baseline is
    /// theme-blind (the theme feature is zeroed, keeping parameter counts
    /// identical across the ablation).
    pub fn uses_theme(self) -> bool {
        matches!(self, ModelVariant::PadRoiTheme)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::PadRoiTheme => "pad_roi_theme",
            ModelVariant::PadRoi => "pad_roi",
            ModelVariant::Resize => "resize",
            ModelVariant::ResizedPad => "resized_pad",
            ModelVariant::RandomCrop => "random_crop",
        }
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad_roi_theme" => Ok(ModelVariant::PadRoiTheme),
            "pad_roi" => Ok(ModelVariant::PadRoi),
            "resize" => Ok(ModelVariant::Resize),
            "resized_pad" => Ok(ModelVariant::ResizedPad),
            "random_crop" => Ok(ModelVariant::RandomCrop),
            other => Err(Error::ConfigMismatch(format!("unknown variant {other:?}"))),
        }
    }
}

/// How the ROI stage aggregates: quantized max pooling, or bilinear
/// interpolation at sample points (align).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Max,
    Align,
}

/// Architectural configuration. `canvas` is the training canvas size; for
/// the padded variants predictions do not depend on it, so it is excluded
/// from the architecture digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: usize,
    /// Score bins K.
    pub bins: usize,
    /// Theme vocabulary size T.
    pub themes: usize,
    /// ROI / adaptive pooling output grid (square).
    pub roi_out: usize,
    pub theme_width: usize,
    /// Hidden width of the two-layer output head.
    pub head_hidden: usize,
    pub conv_widths: [usize; 5],
    pub variant: ModelVariant,
    pub pooling: PoolingKind,
    pub samples_per_bin: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            canvas: 128,
            bins: 10,
            themes: 4,
            roi_out: 32,
            theme_width: 16,
            head_hidden: 64,
            conv_widths: [16, 32, 64, 64, 128],
            variant: ModelVariant::PadRoiTheme,
            pooling: PoolingKind::Max,
            samples_per_bin: 2,
        }
    }
}

/// Cumulative stride of the stem in front of the ROI layer.
pub const ROI_DOWNSAMPLE: usize = 2;

/// Spatial grid of the adaptive pooling before the head.
pub const HEAD_GRID: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 {
            return Err(Error::ConfigMismatch("canvas must be >= 8".to_string()));
        }
        if self.bins < 2 {
            return Err(Error::ConfigMismatch("bins must be >= 2".to_string()));
        }
        if self.themes < 1 {
            return Err(Error::ConfigMismatch("themes must be >= 1".to_string()));
        }
        if self.roi_out < 2 {
            return Err(Error::ConfigMismatch("roi_out must be >= 2".to_string()));
        }
        if self.theme_width < 1 || self.samples_per_bin < 1 || self.head_hidden < 1 {
            return Err(Error::ConfigMismatch(
                "theme_width, head_hidden, and samples_per_bin must be >= 1".to_string(),
            ));
        }
        if self.conv_widths.contains(&0) {
            return Err(Error::ConfigMismatch("conv widths must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Flattened visual feature width after adaptive pooling.
    pub fn visual_dim(&self) -> usize {
        self.conv_widths[4] * HEAD_GRID * HEAD_GRID
    }

    /// Digest of every behavior-defining field except the canvas size
    /// (padding does not influence predictions, so the canvas may differ
    /// between training and inference for the padded variants).
    pub fn arch_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = format!(
            "bins={};themes={};roi_out={};theme_width={};head_hidden={};conv_widths={:?};variant={};pooling={:?};samples_per_bin={}",
            self.bins,
            self.themes,
            self.roi_out,
            self.theme_width,
            self.head_hidden,
            self.conv_widths,
            self.variant.as_str(),
            self.pooling,
            self.samples_per_bin,
        );
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

struct ConvSpec {
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
}

fn conv_specs(config: &ModelConfig) -> [ConvSpec; 5] {
    let w = &config.conv_widths;
    [
        // stem (before the ROI layer; cumulative stride = ROI_DOWNSAMPLE)
        ConvSpec { cin: CHANNELS, cout: w[0], stride: 2, pad: 1 },
        ConvSpec { cin: w[0], cout: w[1], stride: 1, pad: 1 },
        // backbone (after the ROI layer)
        ConvSpec { cin: w[1], cout: w[2], stride: 1, pad: 1 },
        ConvSpec { cin: w[2], cout: w[3], stride: 1, pad: 1 },
        ConvSpec { cin: w[3], cout: w[4], stride: 1, pad: 1 },
    ]
}

/// All learnable weights, each paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub conv_w: Vec<GradPair>,
    pub conv_b: Vec<GradPair>,
    pub theme_w: GradPair,
    pub theme_b: GradPair,
    pub head1_w: GradPair,
    pub head1_b: GradPair,
    pub head2_w: GradPair,
    pub head2_b: GradPair,
}

/// Names and references of every parameter tensor, in a fixed order.
impl ModelParams {
    pub fn named_pairs(&self) -> Vec<(String, &GradPair)> {
        let mut v = Vec::new();
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            v.push((format!("conv{i}.w"), w));
            v.push((format!("conv{i}.b"), b));
        }
        v.push(("theme.w".to_string(), &self.theme_w));
        v.push(("theme.b".to_string(), &self.theme_b));
        v.push(("head1.w".to_string(), &self.head1_w));
        v.push(("head1.b".to_string(), &self.head1_b));
        v.push(("head2.w".to_string(), &self.head2_w));
        v.push(("head2.b".to_string(), &self.head2_b));
        v
    }

    pub fn named_pairs_mut(&mut self) -> Vec<(String, &mut GradPair)> {
        let mut v = Vec::new();
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            v.push((format!("conv{i}.w"), w));
            v.push((format!("conv{i}.b"), b));
        }
        v.push(("theme.w".to_string(), &mut self.theme_w));
        v.push(("theme.b".to_string(), &mut self.theme_b));
        v.push(("head1.w".to_string(), &mut self.head1_w));
        v.push(("head1.b".to_string(), &mut self.head1_b));
        v.push(("head2.w".to_string(), &mut self.head2_w));
        v.push(("head2.b".to_string(), &mut self.head2_b));
        v
    }

    /// Head group = theme encoder and output layer (weights and biases);
    /// everything convolutional belongs to the base group.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("theme.") || name.starts_with("head1.") || name.starts_with("head2.")
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_pairs_mut() {
            p.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named_pairs().iter().all(|(_, p)| p.value.is_finite())
    }
}

/// One-hot encoding of a theme id.
pub fn theme_encode(t: ThemeId, theme_count: usize) -> Result<Vec<f64>> {
    if t.0 >= theme_count {
        return Err(Error::ThemeRange {
            theme: t.0,
            count: theme_count,
        });
    }
    let mut v = vec![0.0; theme_count];
    v[t.0] = 1.0;
    Ok(v)
}

/// Draw weights from a zero-mean uniform scaled by the fan-in with ReLU
/// gain, U(-sqrt(6/fan_in), sqrt(6/fan_in)), biases zero; this keeps the
/// activation variance roughly constant through the ReLU stack, which
/// training from scratch depends on. Deterministic in the seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let scale = (6.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    };

    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    for spec in conv_specs(config) {
        let fan_in = spec.cin * 9;
        conv_w.push(GradPair::new(uniform(
            vec![spec.cout, spec.cin, 3, 3],
            fan_in,
        )));
        conv_b.push(GradPair::new(Tensor::zeros(vec![spec.cout])));
    }
    let theme_w = GradPair::new(uniform(
        vec![config.themes, config.theme_width],
        config.themes,
    ));
    let theme_b = GradPair::new(Tensor::zeros(vec![config.theme_width]));
    let fused = config.visual_dim() + config.theme_width;
    let head1_w = GradPair::new(uniform(vec![fused, config.head_hidden], fused));
    let head1_b = GradPair::new(Tensor::zeros(vec![config.head_hidden]));
    let head2_w = GradPair::new(uniform(
        vec![config.head_hidden, config.bins],
        config.head_hidden,
    ));
    let head2_b = GradPair::new(Tensor::zeros(vec![config.bins]));

    Ok(ModelParams {
        config: config.clone(),
        conv_w,
        conv_b,
        theme_w,
        theme_b,
        head1_w,
        head1_b,
        head2_w,
        head2_b,
    })
}

enum RoiStage {
    Max(RoiPoolCtx),
    Align(RoiAlignCtx),
}

/// Per-sample stem state. The stem runs on a crop of the canvas that covers
/// the image region plus its receptive-field band: ROI pooling never reads
/// features beyond the mapped region, so identical pooled values come out of
/// the crop while the padding bulk is never convolved.
struct StemCache {
    crop: Tensor,
    region: Region,
    pre1: Tensor,
    act1: Tensor,
    pre2: Tensor,
    act2: Tensor,
    roi: RoiStage,
}

/// Activations saved by `forward` for the hand-wired backward pass.
pub struct ForwardCache {
    variant: ModelVariant,
    stem: Vec<StemCache>,
    pooled: Tensor,
    pre_bb: [Tensor; 3],
    act_bb: [Tensor; 3],
    mp3: MaxPoolCtx,
    p3: Tensor,
    mp4: MaxPoolCtx,
    p4: Tensor,
    adapt: RoiPoolCtx,
    visual: Tensor,
    onehot: Option<Tensor>,
    theme_pre: Option<Tensor>,
    fused: Tensor,
    head_pre: Tensor,
    head_act: Tensor,
    pub logits: Tensor,
}

fn batch_onehot(themes: &[ThemeId], theme_count: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(themes.len() * theme_count);
    for &t in themes {
        data.extend(theme_encode(t, theme_count)?);
    }
    Tensor::new(vec![themes.len(), theme_count], data)
}

fn check_batch(config: &ModelConfig, batch: &PaddedBatch) -> Result<(usize, usize)> {
    // rectangular canvases are legal (the unpadded diagnostic path feeds
    // each view at its own size); the padded pipeline always builds squares
    let (n, c, h, w) = batch.canvas.dims4()?;
    if c != CHANNELS {
        return Err(Error::usage(format!(
            "canvas must be Nx{CHANNELS}xHxW, got {:?}",
            batch.canvas.shape()
        )));
    }
    if batch.regions.len() != n || batch.themes.len() != n || batch.targets.len() != n {
        return Err(Error::usage(
            "regions/themes/targets must match the batch size".to_string(),
        ));
    }
    for r in &batch.regions {
        if r.x1 > w || r.y1 > h {
            return Err(Error::usage(format!(
                "region ({},{})..({},{}) exceeds canvas {w}",
                r.x0, r.y0, r.x1, r.y1
            )));
        }
    }
    for t in &batch.targets {
        if t.k() != config.bins {
            return Err(Error::usage(format!(
                "target has {} bins, model expects {}",
                t.k(),
                config.bins
            )));
        }
    }
    Ok((n, w))
}

/// Canvas crop extents that cover everything the ROI stage can read for a
/// region anchored at the origin: feature column j of the stride-2 stem
/// depends on input columns up to 2j + 3, and pooling reads feature columns
/// below map(x1).
fn stem_crop_extents(region: &Region, h: usize, w: usize) -> Result<(usize, usize)> {
    if region.x0 != 0 || region.y0 != 0 {
        // general regions fall back to the full canvas
        return Ok((h, w));
    }
    let (mx, my) = map_coords(region.x1, region.y1, ROI_DOWNSAMPLE)?;
    Ok(((2 * my + 2).min(h), (2 * mx + 2).min(w)))
}

fn crop_canvas(batch: &PaddedBatch, index: usize, bh: usize, bw: usize) -> Tensor {
    let (_, c, h, w) = batch.canvas.dims4().expect("validated canvas");
    let src = batch.canvas.data();
    let mut data = Vec::with_capacity(c * bh * bw);
    for ci in 0..c {
        let plane = (index * c + ci) * h * w;
        for y in 0..bh {
            let row = plane + y * w;
            data.extend_from_slice(&src[row..row + bw]);
        }
    }
    Tensor::new(vec![1, c, bh, bw], data).expect("crop shape matches")
}

/// Run the network over a padded batch, returning the cached activations;
/// the logits live in `cache.logits` (shape N x K).
pub fn forward(params: &ModelParams, batch: &PaddedBatch, variant: ModelVariant) -> Result<ForwardCache> {
    let config = &params.config;
    let (_, canvas_w) = check_batch(config, batch)?;
    let canvas_h = batch.canvas.shape()[2];
    let _ = canvas_w;
    let specs = conv_specs(config);
    let spec = RoiPoolSpec::new(ROI_DOWNSAMPLE, config.roi_out, config.roi_out)?;
    let n = batch.len();

    // per-sample stem over the cropped canvas, then the ROI stage (padded
    // variants pool the mapped region; the baselines pool the whole map)
    use rayon::prelude::*;
    let stem_results: Vec<Result<(StemCache, Tensor)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let region = batch.regions[i];
            let (bh, bw) = stem_crop_extents(&region, canvas_h, batch.canvas.shape()[3])?;
            let crop = crop_canvas(batch, i, bh, bw);
            let pre1 = conv2d_forward(
                &crop,
                &params.conv_w[0].value,
                &params.conv_b[0].value,
                specs[0].stride,
                specs[0].pad,
            )?;
            let act1 = relu(&pre1);
            let pre2 = conv2d_forward(
                &act1,
                &params.conv_w[1].value,
                &params.conv_b[1].value,
                specs[1].stride,
                specs[1].pad,
            )?;
            let act2 = relu(&pre2);
            let local = Region {
                batch_index: 0,
                ..region
            };
            let (pooled_i, roi) = if variant.uses_roi() {
                match config.pooling {
                    PoolingKind::Max => {
                        let (t, ctx) = roi_maxpool_forward(&act2, &[local], &spec)?;
                        (t, RoiStage::Max(ctx))
                    }
                    PoolingKind::Align => {
                        let (t, ctx) =
                            roi_align_forward(&act2, &[local], &spec, config.samples_per_bin)?;
                        (t, RoiStage::Align(ctx))
                    }
                }
            } else {
                let (t, ctx) = adaptive_maxpool(&act2, config.roi_out, config.roi_out)?;
                (t, RoiStage::Max(ctx))
            };
            Ok((
                StemCache {
                    crop,
                    region: local,
                    pre1,
                    act1,
                    pre2,
                    act2,
                    roi,
                },
                pooled_i,
            ))
        })
        .collect();

    let mut stem = Vec::with_capacity(n);
    let mut pooled = Tensor::zeros(vec![n, config.conv_widths[1], config.roi_out, config.roi_out]);
    let pooled_stride = config.conv_widths[1] * config.roi_out * config.roi_out;
    for (i, r) in stem_results.into_iter().enumerate() {
        let (cache_i, pooled_i) = r?;
        pooled.data_mut()[i * pooled_stride..(i + 1) * pooled_stride]
            .copy_from_slice(pooled_i.data());
        stem.push(cache_i);
    }

    // backbone
    let pre3 = conv2d_forward(
        &pooled,
        &params.conv_w[2].value,
        &params.conv_b[2].value,
        specs[2].stride,
        specs[2].pad,
    )?;
    let a3 = relu(&pre3);
    let (p3, mp3) = maxpool2d_forward(&a3, 2, 2)?;
    let pre4 = conv2d_forward(
        &p3,
        &params.conv_w[3].value,
        &params.conv_b[3].value,
        specs[3].stride,
        specs[3].pad,
    )?;
    let a4 = relu(&pre4);
    let (p4, mp4) = maxpool2d_forward(&a4, 2, 2)?;
    let pre5 = conv2d_forward(
        &p4,
        &params.conv_w[4].value,
        &params.conv_b[4].value,
        specs[4].stride,
        specs[4].pad,
    )?;
    let a5 = relu(&pre5);

    let (vis4, adapt) = adaptive_maxpool(&a5, HEAD_GRID, HEAD_GRID)?;
    let visual = vis4.reshape(vec![n, config.visual_dim()])?;

    // theme branch (zeroed for theme-blind variants, so the head shape and
    // parameter count are identical across the ablation)
    let (onehot, theme_pre, theme_feat) = if variant.uses_theme() {
        let onehot = batch_onehot(&batch.themes, config.themes)?;
        let tpre = affine(&onehot, &params.theme_w.value, &params.theme_b.value)?;
        let tfeat = relu(&tpre);
        (Some(onehot), Some(tpre), tfeat)
    } else {
        (None, None, Tensor::zeros(vec![n, config.theme_width]))
    };

    let fused = concat(&visual, &theme_feat)?;
    let head_pre = affine(&fused, &params.head1_w.value, &params.head1_b.value)?;
    let head_act = relu(&head_pre);
    let logits = affine(&head_act, &params.head2_w.value, &params.head2_b.value)?;

    Ok(ForwardCache {
        variant,
        stem,
        pooled,
        pre_bb: [pre3, pre4, pre5],
        act_bb: [a3, a4, a5],
        mp3,
        p3,
        mp4,
        p4,
        adapt,
        visual,
        onehot,
        theme_pre,
        fused,
        head_pre,
        head_act,
        logits,
    })
}

/// Exact reverse of `forward`: accumulates parameter gradients into the
/// `GradPair`s of `params`. The cache must come from a forward pass with the
/// same parameter shapes.
pub fn backward(params: &mut ModelParams, cache: &ForwardCache, grad_logits: &Tensor) -> Result<()> {
    if grad_logits.shape() != cache.logits.shape() {
        return Err(Error::usage(format!(
            "grad_logits shape {:?} does not match cached logits {:?}",
            grad_logits.shape(),
            cache.logits.shape()
        )));
    }
    let config = params.config.clone();
    let specs = conv_specs(&config);

    // head
    let (g_head_act, g_h2w, g_h2b) =
        affine_backward(&cache.head_act, &params.head2_w.value, grad_logits)?;
    params.head2_w.accumulate(&g_h2w)?;
    params.head2_b.accumulate(&g_h2b)?;
    let g_head_pre = relu_backward(&cache.head_pre, &g_head_act)?;
    let (g_fused, g_h1w, g_h1b) =
        affine_backward(&cache.fused, &params.head1_w.value, &g_head_pre)?;
    params.head1_w.accumulate(&g_h1w)?;
    params.head1_b.accumulate(&g_h1b)?;
    let (g_visual, g_theme_feat) =
        concat_backward(&g_fused, config.visual_dim(), config.theme_width)?;

    // theme branch only exists in the theme-aware variant
    if cache.variant.uses_theme() {
        let onehot = cache.onehot.as_ref().expect("theme cache present");
        let theme_pre = cache.theme_pre.as_ref().expect("theme cache present");
        let g_tpre = relu_backward(theme_pre, &g_theme_feat)?;
        let (_, g_tw, g_tb) = affine_backward(onehot, &params.theme_w.value, &g_tpre)?;
        params.theme_w.accumulate(&g_tw)?;
        params.theme_b.accumulate(&g_tb)?;
    }

    // adaptive pool + conv5
    let n = cache.visual.shape()[0];
    let g_vis4 = g_visual
        .reshape(vec![n, config.conv_widths[4], HEAD_GRID, HEAD_GRID])?;
    let g_a5 = roi_maxpool_backward(&cache.adapt, &g_vis4)?;
    let g_pre5 = relu_backward(&cache.pre_bb[2], &g_a5)?;
    let (g_p4, g_w5, g_b5) = conv2d_backward(
        &cache.p4,
        &params.conv_w[4].value,
        specs[4].stride,
        specs[4].pad,
        &g_pre5,
    )?;
    params.conv_w[4].accumulate(&g_w5)?;
    params.conv_b[4].accumulate(&g_b5)?;

    // maxpool + conv4
    let g_a4 = maxpool2d_backward(&cache.mp4, &g_p4)?;
    let g_pre4 = relu_backward(&cache.pre_bb[1], &g_a4)?;
    let (g_p3, g_w4, g_b4) = conv2d_backward(
        &cache.p3,
        &params.conv_w[3].value,
        specs[3].stride,
        specs[3].pad,
        &g_pre4,
    )?;
    params.conv_w[3].accumulate(&g_w4)?;
    params.conv_b[3].accumulate(&g_b4)?;

    // maxpool + conv3
    let g_a3 = maxpool2d_backward(&cache.mp3, &g_p3)?;
    let g_pre3 = relu_backward(&cache.pre_bb[0], &g_a3)?;
    let (g_pooled, g_w3, g_b3) = conv2d_backward(
        &cache.pooled,
        &params.conv_w[2].value,
        specs[2].stride,
        specs[2].pad,
        &g_pre3,
    )?;
    params.conv_w[2].accumulate(&g_w3)?;
    params.conv_b[2].accumulate(&g_b3)?;

    // ROI stage and stem, per sample; the stem is the input end, so only
    // parameter gradients are needed. Partials reduce in sample order.
    use rayon::prelude::*;
    let pooled_stride: usize = cache.pooled.numel() / n;
    let stem_grads: Vec<Result<[Tensor; 4]>> = cache
        .stem
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let g_pooled_i = Tensor::new(
                vec![
                    1,
                    config.conv_widths[1],
                    config.roi_out,
                    config.roi_out,
                ],
                g_pooled.data()[i * pooled_stride..(i + 1) * pooled_stride].to_vec(),
            )?;
            let g_act2 = match &s.roi {
                RoiStage::Max(ctx) => roi_maxpool_backward(ctx, &g_pooled_i)?,
                RoiStage::Align(ctx) => roi_align_backward(ctx, &g_pooled_i)?,
            };
            let g_pre2 = relu_backward(&s.pre2, &g_act2)?;
            let (g_act1, g_w2, g_b2) = conv2d_backward(
                &s.act1,
                &params.conv_w[1].value,
                specs[1].stride,
                specs[1].pad,
                &g_pre2,
            )?;
            let g_pre1 = relu_backward(&s.pre1, &g_act1)?;
            let (g_w1, g_b1) = crate::tensor::conv2d_backward_params(
                &s.crop,
                &params.conv_w[0].value,
                specs[0].stride,
                specs[0].pad,
                &g_pre1,
            )?;
            Ok([g_w1, g_b1, g_w2, g_b2])
        })
        .collect();

    for grads in stem_grads {
        let [g_w1, g_b1, g_w2, g_b2] = grads?;
        params.conv_w[0].accumulate(&g_w1)?;
        params.conv_b[0].accumulate(&g_b1)?;
        params.conv_w[1].accumulate(&g_w2)?;
        params.conv_b[1].accumulate(&g_b2)?;
    }
    Ok(())
}

/// Softmax of the forward logits, one distribution per sample.
pub fn predict_distribution(
    params: &ModelParams,
    batch: &PaddedBatch,
    variant: ModelVariant,
) -> Result<Vec<ScoreDistribution>> {
    let cache = forward(params, batch, variant)?;
    let p = softmax(&cache.logits)?;
    let k = params.config.bins;
    p.data()
        .chunks(k)
        .map(|row| ScoreDistribution::new(row.to_vec()))
        .collect()
}

/// First input column/row index (0-based) beyond which padding pixels cannot
/// influence any feature the ROI stage reads for a region of the given
/// extent. Derived from the stem geometry: a feature at stride-2 position j
/// sees input positions up to 2j + 3.
pub fn stem_influence_end(extent: usize) -> usize {
    let (m, _) = map_coords(extent, 0, ROI_DOWNSAMPLE).expect("ratio is nonzero");
    2 * m + 2
}

/// Smallest distance to a ReLU kink or pooling tie in the cached forward
/// pass. Finite-difference gradient checks resample their inputs when this
/// margin is below the probe scale, because subgradients are not defined
/// there.
pub fn kink_margin(cache: &ForwardCache, regions: &[Region], config: &ModelConfig) -> f64 {
    let _ = regions;
    let mut margin = f64::INFINITY;
    let spec = RoiPoolSpec::new(ROI_DOWNSAMPLE, config.roi_out, config.roi_out)
        .expect("validated config");
    for s in &cache.stem {
        for pre in [&s.pre1, &s.pre2] {
            for &v in pre.data() {
                margin = margin.min(v.abs());
            }
        }
        if let RoiStage::Max(_) = s.roi {
            if cache.variant.uses_roi() {
                margin = margin.min(crate::roi::tie_margin(&s.act2, &[s.region], &spec));
            } else {
                margin = margin.min(crate::roi::full_map_tie_margin(
                    &s.act2,
                    config.roi_out,
                    config.roi_out,
                ));
            }
        }
    }
    for pre in &cache.pre_bb {
        for &v in pre.data() {
            margin = margin.min(v.abs());
        }
    }
    if let Some(tpre) = &cache.theme_pre {
        for &v in tpre.data() {
            margin = margin.min(v.abs());
        }
    }
    for &v in cache.head_pre.data() {
        margin = margin.min(v.abs());
    }
    margin = margin.min(crate::tensor::pool_tie_margin(&cache.act_bb[0], 2, 2));
    margin = margin.min(crate::tensor::pool_tie_margin(&cache.act_bb[1], 2, 2));
    margin = margin.min(crate::roi::full_map_tie_margin(
        &cache.act_bb[2],
        HEAD_GRID,
        HEAD_GRID,
    ));
    margin
}
