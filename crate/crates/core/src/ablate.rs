//! Ablation driver: trains the input-transform variants under identical
//! seeds on one synthetic dataset and reports the four comparison metrics
//! (SRCC of the mean, SRCC of the std, EMD r=1, KL) per variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, Dataset, DatasetRecord};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelVariant, PoolingKind};
use crate::train::{evaluate, train, MetricReport, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblateConfig {
    /// Template run configuration; each row overrides variant/pooling/
    /// augmentation as needed.
    pub base: TrainConfig,
    /// Seeds trained per row (the report averages over them).
    pub seeds: Vec<u64>,
    /// Fraction of records held out for evaluation (suffix split).
    pub holdout: f64,
    /// Additionally train the ROI variant at half the pooled grid size.
    pub size_sweep: bool,
    /// Additionally train the full model with ROI align instead of pooling.
    pub align_parity: bool,
    /// Additionally train the full model with flip-only augmentation.
    pub aug_contrast: bool,
    /// Train the five base variants (disable to run only the extra rows,
    /// e.g. when the base table already exists).
    pub include_base: bool,
    /// Suppress progress lines on stderr.
    pub quiet: bool,
}

impl AblateConfig {
    pub fn new(base: TrainConfig) -> Self {
        let seed = base.seed;
        AblateConfig {
            base,
            seeds: vec![seed, seed + 1, seed + 2],
            holdout: 0.2,
            size_sweep: false,
            align_parity: false,
            aug_contrast: false,
            include_base: true,
            quiet: false,
        }
    }
}

/// The Table-III metric columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblateMetrics {
    pub srcc_mean: Option<f64>,
    pub srcc_std: Option<f64>,
    pub emd_r1: f64,
    pub kl: f64,
}

impl AblateMetrics {
    fn from_report(r: &MetricReport) -> Self {
        AblateMetrics {
            srcc_mean: r.srcc_mean,
            srcc_std: r.srcc_std,
            emd_r1: r.emd_r1,
            kl: r.kl,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_train_loss: f64,
    pub metrics: AblateMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: String,
    pub variant: ModelVariant,
    pub roi_out: usize,
    pub pooling: PoolingKind,
    pub augment: AugmentPolicy,
    pub per_seed: Vec<SeedOutcome>,
    pub mean: AblateMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub train_records: usize,
    pub test_records: usize,
    pub rows: Vec<VariantRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plot-ready CSV: one line per (variant, seed) plus a mean line per
    /// variant.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("".to_string(), |x| format!("{x}"));
        let mut out = String::from("variant,seed,srcc_mean,srcc_std,emd_r1,kl\n");
        for row in &self.rows {
            for s in &row.per_seed {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.label,
                    s.seed,
                    fmt(s.metrics.srcc_mean),
                    fmt(s.metrics.srcc_std),
                    s.metrics.emd_r1,
                    s.metrics.kl
                ));
            }
            out.push_str(&format!(
                "{},mean,{},{},{},{}\n",
                row.label,
                fmt(row.mean.srcc_mean),
                fmt(row.mean.srcc_std),
                row.mean.emd_r1,
                row.mean.kl
            ));
        }
        out
    }
}

struct RowSpec {
    label: String,
    model: ModelConfig,
    augment: AugmentPolicy,
}

fn row_specs(config: &AblateConfig) -> Vec<RowSpec> {
    let base_model = &config.base.model;
    let mut rows: Vec<RowSpec> = if config.include_base {
        ModelVariant::ALL
            .iter()
            .map(|&variant| {
                let mut model = base_model.clone();
                model.variant = variant;
                model.pooling = PoolingKind::Max;
                RowSpec {
                    label: variant.as_str().to_string(),
                    model,
                    augment: config.base.augment,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    if config.size_sweep {
        let mut model = base_model.clone();
        model.variant = ModelVariant::PadRoi;
        model.pooling = PoolingKind::Max;
        model.roi_out = (base_model.roi_out / 2).max(2);
        rows.push(RowSpec {
            label: format!("pad_roi_out{}", model.roi_out),
            model,
            augment: config.base.augment,
        });
    }
    if config.align_parity {
        let mut model = base_model.clone();
        model.variant = ModelVariant::PadRoiTheme;
        model.pooling = PoolingKind::Align;
        rows.push(RowSpec {
            label: "pad_roi_theme_align".to_string(),
            model,
            augment: config.base.augment,
        });
    }
    if config.aug_contrast {
        let mut model = base_model.clone();
        model.variant = ModelVariant::PadRoiTheme;
        model.pooling = PoolingKind::Max;
        rows.push(RowSpec {
            label: "pad_roi_theme_flip_only".to_string(),
            model,
            augment: AugmentPolicy::FlipOnly,
        });
    }
    rows
}

fn mean_metrics(outcomes: &[SeedOutcome]) -> AblateMetrics {
    let n = outcomes.len() as f64;
    let opt_mean = |f: fn(&AblateMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = outcomes.iter().filter_map(|o| f(&o.metrics)).collect();
        if vals.len() == outcomes.len() {
            Some(vals.iter().sum::<f64>() / n)
        } else {
            None
        }
    };
    AblateMetrics {
        srcc_mean: opt_mean(|m| m.srcc_mean),
        srcc_std: opt_mean(|m| m.srcc_std),
        emd_r1: outcomes.iter().map(|o| o.metrics.emd_r1).sum::<f64>() / n,
        kl: outcomes.iter().map(|o| o.metrics.kl).sum::<f64>() / n,
    }
}

/// Train every row under every seed on a suffix train/test split of the
/// record list and aggregate the Table-III metric columns.
pub fn run_ablation(config: &AblateConfig, records: &[DatasetRecord]) -> Result<AblationReport> {
    if records.len() < 10 {
        return Err(Error::usage("ablation needs at least 10 records".to_string()));
    }
    if !(0.0 < config.holdout && config.holdout < 1.0) {
        return Err(Error::usage("holdout fraction must lie in (0, 1)".to_string()));
    }
    if config.seeds.is_empty() {
        return Err(Error::usage("at least one seed required".to_string()));
    }
    let test_len = ((records.len() as f64 * config.holdout).round() as usize)
        .clamp(1, records.len() - 1);
    let split = records.len() - test_len;
    let train_data = Dataset::load(&records[..split])?;
    let test_data = Dataset::load(&records[split..])?;

    let specs = row_specs(config);
    let jobs: Vec<(usize, u64)> = specs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| config.seeds.iter().map(move |&s| (i, s)))
        .collect();

    let outcomes: Vec<Result<(usize, SeedOutcome)>> = jobs
        .par_iter()
        .map(|&(row_idx, seed)| {
            let spec = &specs[row_idx];
            let run = TrainConfig {
                model: spec.model.clone(),
                seed,
                eval_every: 0,
                augment: spec.augment,
                ..config.base.clone()
            };
            let out = train(&run, &train_data, None)?;
            let report = evaluate(
                &out.params,
                &test_data,
                run.model.variant,
                run.model.canvas,
                seed,
            )?;
            if !config.quiet {
                eprintln!(
                    "[ablate] {} seed {} done (loss {:.4}, emd_r1 {:.4})",
                    spec.label,
                    seed,
                    out.log.last().map_or(f64::NAN, |l| l.mean_loss),
                    report.emd_r1
                );
            }
            Ok((
                row_idx,
                SeedOutcome {
                    seed,
                    final_train_loss: out.log.last().map_or(f64::NAN, |l| l.mean_loss),
                    metrics: AblateMetrics::from_report(&report),
                },
            ))
        })
        .collect();

    let mut per_row: Vec<Vec<SeedOutcome>> = vec![Vec::new(); specs.len()];
    for outcome in outcomes {
        let (row_idx, seed_outcome) = outcome?;
        per_row[row_idx].push(seed_outcome);
    }
    // rayon may finish jobs out of order; restore the configured seed order
    for outcomes in per_row.iter_mut() {
        outcomes.sort_by_key(|o| {
            config
                .seeds
                .iter()
                .position(|&s| s == o.seed)
                .expect("seed came from the config")
        });
    }

    let rows = specs
        .into_iter()
        .zip(per_row)
        .map(|(spec, per_seed)| VariantRow {
            label: spec.label,
            variant: spec.model.variant,
            roi_out: spec.model.roi_out,
            pooling: spec.model.pooling,
            augment: spec.augment,
            mean: mean_metrics(&per_seed),
            per_seed,
        })
        .collect();

    Ok(AblationReport {
        epochs: config.base.epochs,
        seeds: config.seeds.clone(),
        train_records: split,
        test_records: test_len,
        rows,
    })
}
