//! Synthetic stripe dataset.
//!
//! Each record is a sinusoidal stripe image with a per-record absolute pixel
//! period and a box-blur level. The ground-truth mean score rewards longer
//! periods, and rewards or penalizes blur depending on the parity of the
//! record's theme, so the labels carry exactly the two signals the model
//! variants differ on: an absolute-scale feature that input resizing
//! destroys, and a theme-conditional criterion that an image-only model
//! cannot resolve.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_ppm, DatasetRecord, Image, ImageSource, ThemeId, CHANNELS};
use crate::error::Result;
use crate::metrics::{dist_mean, normalize_votes, VoteHistogram};

/// Deterministic recipe for one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub width: usize,
    pub height: usize,
    /// Stripe period in pixels, measured along the stripe normal.
    pub period_px: f64,
    /// Number of 3x3 box-blur passes (0..=2).
    pub blur_level: u8,
    /// Stripe normal direction in radians.
    pub angle: f64,
    pub phase: f64,
    /// Per-channel amplitude scale.
    pub tint: [f64; 3],
}

impl StripeSpec {
    /// Render the stripes, apply the blur passes, and quantize onto the
    /// 8-bit grid so that a disk round-trip through PPM is bit-exact.
    pub fn render(&self) -> Image {
        let (w, h) = (self.width, self.height);
        let (dx, dy) = (self.angle.cos(), self.angle.sin());
        let mut pixels = Vec::with_capacity(w * h * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 * dx + y as f64 * dy) * 2.0 * PI / self.period_px + self.phase;
                let s = t.sin();
                for c in 0..CHANNELS {
                    pixels.push(0.5 + 0.45 * self.tint[c] * s);
                }
            }
        }
        let mut img = Image::new(w, h, pixels).expect("stripe values lie in [0,1]");
        for _ in 0..self.blur_level {
            img = box_blur(&img);
        }
        img.quantized()
    }
}

/// One 5x5 box-blur pass with clamp-to-edge sampling.
fn box_blur(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut pixels = Vec::with_capacity(w * h * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for ky in -2i64..=2 {
                    for kx in -2i64..=2 {
                        let sy = (y as i64 + ky).clamp(0, h as i64 - 1) as usize;
                        let sx = (x as i64 + kx).clamp(0, w as i64 - 1) as usize;
                        acc += img.get(sx, sy, c);
                    }
                }
                pixels.push(acc / 25.0);
            }
        }
    }
    Image::new(w, h, pixels).expect("blur preserves [0,1]")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    /// Theme vocabulary size T.
    pub themes: usize,
    /// Score bins K.
    pub bins: usize,
    pub min_extent: usize,
    pub max_extent: usize,
    pub voters: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 2000,
            themes: 4,
            bins: 10,
            min_extent: 64,
            max_extent: 128,
            voters: 50,
        }
    }
}

/// True mean score of a record: longer stripe periods score higher, and the
/// blur contribution flips sign with the theme parity (even themes reward
/// blur, odd themes penalize it).
fn true_mean(theme: ThemeId, blur_level: u8, period_px: f64, bins: usize) -> f64 {
    let sign = if theme.0.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mu = 5.0 + sign * (blur_level as f64 - 1.0) * 1.5 + (period_px - 10.0) / 4.0;
    mu.clamp(1.0, bins as f64)
}

/// Discretized Gaussian pmf over scores 1..=K.
fn score_pmf(mu: f64, sigma: f64, bins: usize) -> Vec<f64> {
    let mut pmf: Vec<f64> = (1..=bins)
        .map(|i| {
            let z = (i as f64 - mu) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let total: f64 = pmf.iter().sum();
    for p in pmf.iter_mut() {
        *p /= total;
    }
    pmf
}

fn sample_votes(rng: &mut ChaCha8Rng, pmf: &[f64], voters: u32) -> VoteHistogram {
    let mut counts = vec![0u32; pmf.len()];
    for _ in 0..voters {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = pmf.len() - 1;
        for (i, &p) in pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        counts[chosen] += 1;
    }
    VoteHistogram::new(counts)
}

/// Generate `config.count` records, deterministic in `seed`. Per-record
/// streams are seeded as `seed ^ index`, so generation order (or parallel
/// materialization) cannot change the result.
pub fn synth_gen(config: &SynthConfig, seed: u64) -> Vec<DatasetRecord> {
    (0..config.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let width = rng.gen_range(config.min_extent..=config.max_extent);
            let height = rng.gen_range(config.min_extent..=config.max_extent);
            let period_px = rng.gen_range(4.0..=16.0);
            let blur_level = rng.gen_range(0..=2u8);
            let theme = ThemeId(rng.gen_range(0..config.themes));
            let angle = if rng.gen::<bool>() { 0.0 } else { PI / 2.0 };
            let phase = rng.gen_range(0.0..2.0 * PI);
            let tint = [
                rng.gen_range(0.85..=1.0),
                rng.gen_range(0.85..=1.0),
                rng.gen_range(0.85..=1.0),
            ];
            let mu = true_mean(theme, blur_level, period_px, config.bins);
            let pmf = score_pmf(mu, 1.5, config.bins);
            let votes = sample_votes(&mut rng, &pmf, config.voters);
            DatasetRecord {
                image: ImageSource::Synthetic(StripeSpec {
                    width,
                    height,
                    period_px,
                    blur_level,
                    angle,
                    phase,
                    tint,
                }),
                votes,
                theme,
            }
        })
        .collect()
}

/// Summary written next to a materialized dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationStats {
    pub count: usize,
    pub total_votes: u64,
    /// Average target mean score grouped by (theme parity, blur level);
    /// index [parity][blur].
    pub mean_score_by_parity_blur: [[f64; 3]; 2],
    pub count_by_parity_blur: [[usize; 3]; 2],
}

pub fn generation_stats(records: &[DatasetRecord]) -> GenerationStats {
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [[0usize; 3]; 2];
    let mut total_votes = 0u64;
    for r in records {
        total_votes += r.votes.total();
        let parity = r.theme.0 % 2;
        let blur = match &r.image {
            ImageSource::Synthetic(s) => s.blur_level as usize,
            ImageSource::File(_) => continue,
        };
        let target = normalize_votes(&r.votes).expect("synthetic votes are non-empty");
        sums[parity][blur] += dist_mean(&target);
        counts[parity][blur] += 1;
    }
    let mut means = [[0.0f64; 3]; 2];
    for p in 0..2 {
        for b in 0..3 {
            if counts[p][b] > 0 {
                means[p][b] = sums[p][b] / counts[p][b] as f64;
            }
        }
    }
    GenerationStats {
        count: records.len(),
        total_votes,
        mean_score_by_parity_blur: means,
        count_by_parity_blur: counts,
    }
}

/// Materialize a record list: PPM images under `dir/images/`, a JSON-lines
/// manifest, and generation statistics.
pub fn write_dataset(records: &[DatasetRecord], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut manifest = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let name = format!("images/rec_{i:05}.ppm");
        let img = r.image.load()?;
        write_ppm(&img, &dir.join(&name))?;
        let row = serde_json::json!({
            "image": name,
            "votes": r.votes.counts(),
            "theme": r.theme.0,
        });
        writeln!(manifest, "{row}")?;
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    let stats = generation_stats(records);
    std::fs::write(
        dir.join("generation-stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    Ok(())
}

impl From<serde_json::Error> for crate::Error {
    fn from(e: serde_json::Error) -> Self {
        crate::Error::Parse {
            line: 0,
            msg: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    fn small_config() -> SynthConfig {
        SynthConfig {
            count: 60,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_gen(&small_config(), 7);
        let b = synth_gen(&small_config(), 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.votes.counts(), y.votes.counts());
            assert_eq!(x.theme, y.theme);
        }
        let c = synth_gen(&small_config(), 8);
        assert!(a.iter().zip(&c).any(|(x, y)| x.votes.counts() != y.votes.counts()));
    }

    #[test]
    fn histograms_total_the_voter_count() {
        let records = synth_gen(&small_config(), 3);
        for r in &records {
            assert_eq!(r.votes.total(), 50);
            assert_eq!(r.votes.k(), 10);
        }
    }

    #[test]
    fn extents_and_aspect_ratio_in_range() {
        let records = synth_gen(&small_config(), 11);
        for r in &records {
            let ImageSource::Synthetic(s) = &r.image else {
                panic!("expected synthetic source")
            };
            assert!((64..=128).contains(&s.width));
            assert!((64..=128).contains(&s.height));
            let ratio = s.width as f64 / s.height as f64;
            assert!((0.5..=2.0).contains(&ratio));
            assert!((4.0..=16.0).contains(&s.period_px));
        }
    }

    #[test]
    fn blur_reward_flips_with_theme_parity() {
        let config = SynthConfig {
            count: 600,
            ..SynthConfig::default()
        };
        let records = synth_gen(&config, 5);
        let stats = generation_stats(&records);
        // at blur level 2, even themes must score higher than odd themes
        assert!(stats.count_by_parity_blur[0][2] > 10);
        assert!(stats.count_by_parity_blur[1][2] > 10);
        assert!(
            stats.mean_score_by_parity_blur[0][2] > stats.mean_score_by_parity_blur[1][2] + 1.0,
            "even/blur2 {} vs odd/blur2 {}",
            stats.mean_score_by_parity_blur[0][2],
            stats.mean_score_by_parity_blur[1][2]
        );
    }

    #[test]
    fn rendered_images_round_trip_through_disk() {
        let records = synth_gen(
            &SynthConfig {
                count: 4,
                ..SynthConfig::default()
            },
            9,
        );
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&records, dir.path()).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.jsonl"), 10, 4).unwrap();
        assert_eq!(loaded.len(), 4);
        for (orig, disk) in records.iter().zip(&loaded) {
            assert_eq!(orig.image.load().unwrap(), disk.image.load().unwrap());
            assert_eq!(orig.votes.counts(), disk.votes.counts());
        }
        assert!(dir.path().join("generation-stats.json").exists());
    }

    #[test]
    fn manifest_bytes_are_reproducible() {
        let records = synth_gen(
            &SynthConfig {
                count: 8,
                ..SynthConfig::default()
            },
            21,
        );
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_dataset(&records, d1.path()).unwrap();
        write_dataset(&records, d2.path()).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
    }
}
