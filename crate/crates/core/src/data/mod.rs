//! Data pipeline: padding with region bookkeeping, the resize/crop baseline
//! transforms, augmentation, batch assembly, manifest ingestion, and the
//! synthetic dataset generator.

mod ppm;
mod synth;

pub use ppm::{read_ppm, write_ppm};
pub use synth::{synth_gen, write_dataset, GenerationStats, StripeSpec, SynthConfig};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{normalize_votes, ScoreDistribution, VoteHistogram};
use crate::roi::Region;
use crate::tensor::Tensor;

/// Challenge-theme label, encoded one-hot for the theme branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ThemeId(pub usize);

/// RGB image with values in [0, 1], row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size("image extents must be >= 1".to_string()));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::dimension(format!(
                "pixel buffer length {} does not match {width}x{height}x{CHANNELS}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numeric("pixel values must lie in [0, 1]".to_string()));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Quantize to the 8-bit grid used by the PPM container, so that an
    /// in-memory image and its disk round-trip are bit-identical.
    pub fn quantized(mut self) -> Self {
        for v in self.pixels.iter_mut() {
            *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
        }
        self
    }

    /// Crop the rectangle anchored at (x, y) of the given extents.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(Error::Size(format!(
                "crop {w}x{h}+{x}+{y} exceeds image {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * CHANNELS);
        for row in y..y + h {
            let start = (row * self.width + x) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + w * CHANNELS]);
        }
        Image::new(w, h, pixels)
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }
}

/// Where a record's pixels come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Synthetic(StripeSpec),
}

impl ImageSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            ImageSource::File(p) => read_ppm(p),
            ImageSource::Synthetic(spec) => Ok(spec.render()),
        }
    }
}

/// One dataset entry: an image source, its vote histogram, and its theme.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub image: ImageSource,
    pub votes: VoteHistogram,
    pub theme: ThemeId,
}

/// A fixed-size zero-padded batch with per-sample regions, themes, and
/// normalized target distributions.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub canvas: Tensor,
    pub regions: Vec<Region>,
    pub themes: Vec<ThemeId>,
    pub targets: Vec<ScoreDistribution>,
}

impl PaddedBatch {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// How images are turned into fixed-size network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    /// Zero-pad at the origin, record the image region.
    Pad,
    /// Bilinear resize to the full canvas, region = whole canvas.
    Resize,
    /// Aspect-preserving resize so the longer edge equals the canvas, then pad.
    ResizedPad,
    /// Resize the shorter edge to the canvas, then take a random canvas-sized
    /// crop; region = whole canvas.
    RandomCrop,
}

/// Copy the image to the origin of an SxS zero canvas; padding lies along
/// the right and bottom. The transform is invertible: cropping the canvas by
/// the returned region reproduces the input bit-exactly.
pub fn pad_image(img: &Image, s: usize) -> Result<(Image, Region)> {
    if img.width > s || img.height > s {
        return Err(Error::Size(format!(
            "image {}x{} exceeds canvas {s}",
            img.width, img.height
        )));
    }
    let mut pixels = vec![0.0; s * s * CHANNELS];
    for y in 0..img.height {
        let src = (y * img.width) * CHANNELS;
        let dst = (y * s) * CHANNELS;
        pixels[dst..dst + img.width * CHANNELS]
            .copy_from_slice(&img.pixels[src..src + img.width * CHANNELS]);
    }
    let canvas = Image {
        width: s,
        height: s,
        pixels,
    };
    Ok((canvas, Region::anchored(0, img.width, img.height)))
}

/// Bilinear resize with half-pixel-center sample mapping:
/// `src = (dst + 0.5) * in/out - 0.5`, clamped to the source extent.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Size("resize extents must be >= 1".to_string()));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let mut pixels = Vec::with_capacity(out_w * out_h * CHANNELS);
    for dy in 0..out_h {
        let src_y = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = src_y - y0 as f64;
        for dx in 0..out_w {
            let src_x = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = src_x - x0 as f64;
            for c in 0..CHANNELS {
                let v00 = img.get(x0, y0, c);
                let v01 = img.get(x1, y0, c);
                let v10 = img.get(x0, y1, c);
                let v11 = img.get(x1, y1, c);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_w, out_h, pixels)
}

fn corner_crop_extents(img: &Image) -> (usize, usize) {
    (7 * img.width / 8, 7 * img.height / 8)
}

/// The fixed 6-view collection: original, horizontal flip, and the four
/// corner crops of 7/8 extent, in that order.
pub fn test_time_views(img: &Image) -> Vec<Image> {
    let (cw, ch) = corner_crop_extents(img);
    let (w, h) = (img.width, img.height);
    vec![
        img.clone(),
        img.hflip(),
        img.crop(0, 0, cw, ch).expect("corner crop fits"),
        img.crop(w - cw, 0, cw, ch).expect("corner crop fits"),
        img.crop(0, h - ch, cw, ch).expect("corner crop fits"),
        img.crop(w - cw, h - ch, cw, ch).expect("corner crop fits"),
    ]
}

/// Augmentation policy used while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// Uniform draw over original, flip, and the four corner crops.
    FlipCrop,
    /// Uniform draw over original and flip only.
    FlipOnly,
}

/// Draw one training view of the image under the full flip+crop policy.
pub fn augment(img: &Image, rng: &mut ChaCha8Rng) -> Image {
    augment_with_policy(img, AugmentPolicy::FlipCrop, rng)
}

pub fn augment_with_policy(img: &Image, policy: AugmentPolicy, rng: &mut ChaCha8Rng) -> Image {
    let n = match policy {
        AugmentPolicy::FlipCrop => 6,
        AugmentPolicy::FlipOnly => 2,
    };
    let pick = rng.gen_range(0..n);
    match pick {
        0 => img.clone(),
        1 => img.hflip(),
        _ => {
            let (cw, ch) = corner_crop_extents(img);
            let (w, h) = (img.width, img.height);
            let (x, y) = match pick {
                2 => (0, 0),
                3 => (w - cw, 0),
                4 => (0, h - ch),
                _ => (w - cw, h - ch),
            };
            img.crop(x, y, cw, ch).expect("corner crop fits")
        }
    }
}

/// One record with its image already materialized.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub image: &'a Image,
    pub votes: &'a VoteHistogram,
    pub theme: ThemeId,
}

/// Assemble a fixed-size batch under the given transform mode.
pub fn make_batch(
    items: &[BatchItem<'_>],
    mode: TransformMode,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PaddedBatch> {
    if items.is_empty() {
        return Err(Error::usage("make_batch needs at least one record".to_string()));
    }
    let n = items.len();
    let mut canvas = Tensor::zeros(vec![n, CHANNELS, s, s]);
    let mut regions = Vec::with_capacity(n);
    let mut themes = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);

    for (i, item) in items.iter().enumerate() {
        let (view, mut region) = transform_one(item.image, mode, s, rng)?;
        region.batch_index = i;
        // HWC image -> CHW canvas slice; the rest of the canvas is already 0
        let plane = s * s;
        let base = i * CHANNELS * plane;
        let data = canvas.data_mut();
        for y in 0..view.height() {
            for x in 0..view.width() {
                for c in 0..CHANNELS {
                    data[base + c * plane + y * s + x] = view.get(x, y, c);
                }
            }
        }
        regions.push(region);
        themes.push(item.theme);
        targets.push(normalize_votes(item.votes)?);
    }

    Ok(PaddedBatch {
        canvas,
        regions,
        themes,
        targets,
    })
}

fn transform_one(
    img: &Image,
    mode: TransformMode,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, Region)> {
    match mode {
        TransformMode::Pad => {
            if img.width > s || img.height > s {
                return Err(Error::Size(format!(
                    "image {}x{} exceeds canvas {s}",
                    img.width, img.height
                )));
            }
            Ok((img.clone(), Region::anchored(0, img.width, img.height)))
        }
        TransformMode::Resize => {
            let view = resize_bilinear(img, s, s)?;
            Ok((view, Region::anchored(0, s, s)))
        }
        TransformMode::ResizedPad => {
            let longest = img.width.max(img.height);
            let w = (img.width * s + longest / 2) / longest;
            let h = (img.height * s + longest / 2) / longest;
            let view = resize_bilinear(img, w.max(1).min(s), h.max(1).min(s))?;
            let region = Region::anchored(0, view.width(), view.height());
            Ok((view, region))
        }
        TransformMode::RandomCrop => {
            let shortest = img.width.min(img.height);
            let w = ((img.width * s + shortest / 2) / shortest).max(s);
            let h = ((img.height * s + shortest / 2) / shortest).max(s);
            let resized = resize_bilinear(img, w, h)?;
            let x = if w > s { rng.gen_range(0..=w - s) } else { 0 };
            let y = if h > s { rng.gen_range(0..=h - s) } else { 0 };
            let view = resized.crop(x, y, s, s)?;
            Ok((view, Region::anchored(0, s, s)))
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    image: String,
    votes: Vec<u32>,
    theme: usize,
}

/// Read a JSON-lines manifest. Image paths resolve relative to the manifest's
/// directory; vote vectors must have exactly `k` bins and themes must lie
/// below `themes`.
pub fn load_manifest(path: &Path, k: usize, themes: usize) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if row.votes.len() != k {
            return Err(Error::Schema {
                line: lineno,
                msg: format!("expected {k} vote bins, got {}", row.votes.len()),
            });
        }
        if row.theme >= themes {
            return Err(Error::Schema {
                line: lineno,
                msg: format!("theme {} out of range (theme count {themes})", row.theme),
            });
        }
        let votes = VoteHistogram::new(row.votes);
        if votes.total() == 0 {
            return Err(Error::Schema {
                line: lineno,
                msg: "vote histogram is empty".to_string(),
            });
        }
        records.push(DatasetRecord {
            image: ImageSource::File(base.join(row.image)),
            votes,
            theme: ThemeId(row.theme),
        });
    }
    Ok(records)
}

/// 8-bit in-memory copy of a decoded image, for caching datasets compactly.
#[derive(Debug, Clone)]
struct CompactImage {
    width: usize,
    height: usize,
    rgb: Vec<u8>,
}

impl CompactImage {
    fn from_image(img: &Image) -> Self {
        CompactImage {
            width: img.width,
            height: img.height,
            rgb: img
                .pixels
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect(),
        }
    }

    fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.rgb.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }
}

/// A dataset with all images decoded into memory (8-bit, ~3 bytes/pixel),
/// ready for repeated epoch sweeps.
#[derive(Debug, Clone)]
pub struct Dataset {
    images: Vec<CompactImage>,
    pub votes: Vec<VoteHistogram>,
    pub themes: Vec<ThemeId>,
}

impl Dataset {
    pub fn load(records: &[DatasetRecord]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(records.len());
        let mut votes = Vec::with_capacity(records.len());
        let mut themes = Vec::with_capacity(records.len());
        for r in records {
            let img = r.image.load()?;
            images.push(CompactImage::from_image(&img));
            votes.push(r.votes.clone());
            themes.push(r.theme);
        }
        Ok(Dataset {
            images,
            votes,
            themes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> Image {
        self.images[i].to_image()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp_image(w: usize, h: usize) -> Image {
        let mut pixels = Vec::with_capacity(w * h * CHANNELS);
        for _y in 0..h {
            for x in 0..w {
                let v = x as f64 / (w.max(2) - 1) as f64;
                for _c in 0..CHANNELS {
                    pixels.push(v);
                }
            }
        }
        Image::new(w, h, pixels).unwrap()
    }

    fn noise_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let pixels = (0..w * h * CHANNELS).map(|_| rng.gen_range(0.0..=1.0)).collect();
        Image::new(w, h, pixels).unwrap()
    }

    #[test]
    fn pad_image_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let img = noise_image(&mut rng, 4, 3);
        let (canvas, region) = pad_image(&img, 8).unwrap();
        assert_eq!(region, Region::anchored(0, 4, 3));
        // 52 of 64 canvas pixels are zero, per channel
        let mut zeros = 0;
        for y in 0..8 {
            for x in 0..8 {
                if x >= 4 || y >= 3 {
                    for c in 0..CHANNELS {
                        assert_eq!(canvas.get(x, y, c), 0.0);
                    }
                    zeros += 1;
                }
            }
        }
        assert_eq!(zeros, 52);
    }

    #[test]
    fn pad_image_boundary_and_oversize() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let img = noise_image(&mut rng, 8, 8);
        let (canvas, region) = pad_image(&img, 8).unwrap();
        assert_eq!(canvas, img);
        assert_eq!(region, Region::anchored(0, 8, 8));

        let big = noise_image(&mut rng, 9, 9);
        assert!(matches!(pad_image(&big, 8), Err(crate::Error::Size(_))));
    }

    #[test]
    fn pad_image_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..20 {
            let w = rng.gen_range(1..30);
            let h = rng.gen_range(1..30);
            let img = noise_image(&mut rng, w, h);
            let (canvas, region) = pad_image(&img, 32).unwrap();
            let back = canvas
                .crop(region.x0, region.y0, region.x1 - region.x0, region.y1 - region.y0)
                .unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let img = noise_image(&mut rng, 10, 7);
        let same = resize_bilinear(&img, 10, 7).unwrap();
        assert_eq!(same, img);

        let flat = Image::new(5, 5, vec![0.25; 5 * 5 * CHANNELS]).unwrap();
        let up = resize_bilinear(&flat, 12, 9).unwrap();
        for &v in up.pixels() {
            assert!((v - 0.25).abs() <= 1e-12);
        }
    }

    #[test]
    fn resize_ramp_matches_closed_form() {
        let w = 16;
        let img = ramp_image(w, 4);
        let out = resize_bilinear(&img, 2 * w, 4).unwrap();
        // half-pixel-center mapping: src_x = (dx + 0.5)/2 - 0.5, clamped
        for dx in 0..2 * w {
            let src = ((dx as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, (w - 1) as f64);
            let want = src / (w - 1) as f64;
            let got = out.get(dx, 2, 0);
            assert!((got - want).abs() <= 1e-12, "col {dx}: {got} vs {want}");
        }
    }

    #[test]
    fn augment_support_and_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let img = noise_image(&mut rng, 64, 64);
        let views = test_time_views(&img);
        assert_eq!(views.len(), 6);
        assert_eq!(views[0], img);
        for v in &views[2..] {
            assert_eq!((v.width(), v.height()), (56, 56));
        }
        assert_eq!(img.hflip().hflip(), img);

        let mut counts = [0usize; 6];
        for _ in 0..6000 {
            let a = augment(&img, &mut rng);
            let idx = views
                .iter()
                .position(|v| *v == a)
                .expect("augment draw must be one of the 6 views");
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / 6000.0;
            assert!((freq - 1.0 / 6.0).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn flip_only_policy_draws_two_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let img = noise_image(&mut rng, 16, 16);
        for _ in 0..100 {
            let a = augment_with_policy(&img, AugmentPolicy::FlipOnly, &mut rng);
            assert!(a == img || a == img.hflip());
        }
    }

    #[test]
    fn make_batch_pad_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let img1 = noise_image(&mut rng, 60, 40);
        let img2 = noise_image(&mut rng, 30, 90);
        let votes = VoteHistogram::new(vec![1, 1, 2]);
        let items = vec![
            BatchItem {
                image: &img1,
                votes: &votes,
                theme: ThemeId(0),
            },
            BatchItem {
                image: &img2,
                votes: &votes,
                theme: ThemeId(1),
            },
        ];
        let batch = make_batch(&items, TransformMode::Pad, 128, &mut rng).unwrap();
        assert_eq!(batch.canvas.shape(), &[2, 3, 128, 128]);
        assert_eq!(batch.regions[0], Region::anchored(0, 60, 40));
        assert_eq!(
            batch.regions[1],
            Region {
                batch_index: 1,
                ..Region::anchored(0, 30, 90)
            }
        );
        assert_eq!(batch.targets[0].probs(), &[0.25, 0.25, 0.5]);
    }

    #[test]
    fn make_batch_resize_modes_fill_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let img = noise_image(&mut rng, 100, 50);
        let votes = VoteHistogram::new(vec![2, 3]);
        let items = vec![BatchItem {
            image: &img,
            votes: &votes,
            theme: ThemeId(0),
        }];
        let b = make_batch(&items, TransformMode::Resize, 64, &mut rng).unwrap();
        assert_eq!(b.regions[0], Region::anchored(0, 64, 64));

        let b = make_batch(&items, TransformMode::ResizedPad, 64, &mut rng).unwrap();
        // longer edge scaled to 64, aspect kept
        assert_eq!(b.regions[0], Region::anchored(0, 64, 32));

        let b = make_batch(&items, TransformMode::RandomCrop, 64, &mut rng).unwrap();
        assert_eq!(b.regions[0], Region::anchored(0, 64, 64));
    }

    #[test]
    fn manifest_round_trip_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.jsonl");

        std::fs::write(&manifest, "").unwrap();
        assert!(load_manifest(&manifest, 10, 4).unwrap().is_empty());

        std::fs::write(
            &manifest,
            "{\"image\":\"a.ppm\",\"votes\":[1,2,3,4,5,6,7,8,9,10],\"theme\":3}\n",
        )
        .unwrap();
        let recs = load_manifest(&manifest, 10, 4).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].theme, ThemeId(3));
        assert_eq!(recs[0].votes.counts(), &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);

        std::fs::write(
            &manifest,
            "{\"image\":\"a.ppm\",\"votes\":[1,2,3,4,5,6,7,8,9],\"theme\":0}\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&manifest, 10, 4),
            Err(crate::Error::Schema { line: 1, .. })
        ));

        std::fs::write(&manifest, "not json\n").unwrap();
        assert!(matches!(
            load_manifest(&manifest, 10, 4),
            Err(crate::Error::Parse { line: 1, .. })
        ));
    }
}
