mod fileconfig;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aesth_core::ablate::{run_ablation, AblateConfig};
use aesth_core::data::{
    load_manifest, read_ppm, synth_gen, write_dataset, AugmentPolicy, Dataset, SynthConfig,
    ThemeId,
};
use aesth_core::metrics::{dist_mean, dist_std, divergences, emd};
use aesth_core::model::{
    load_checkpoint, save_checkpoint, ModelConfig, ModelVariant, PoolingKind,
};
use aesth_core::train::{
    evaluate_detailed, predict_image, train_with, EvalPadding, OptimizerHyper, RecordEval,
    TrainConfig,
};
use aesth_core::verify::{run_suite, Mutation};
use aesth_core::{Error, Result};
use fileconfig::FileConfig;

/// Aesthetic score-distribution model: synthesis, training, evaluation,
/// prediction, verification, and the variant ablation.
#[derive(Parser)]
#[command(name = "aesth", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stripe dataset (PPM images + JSONL manifest).
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSONL training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a manifest; metric report on stdout.
    Eval(EvalArgs),
    /// Predict the score distribution of one image.
    Predict(PredictArgs),
    /// Run the property suite (oracles, gradients, isolation, metrics).
    Verify(VerifyArgs),
    /// Train all input-transform variants and emit the comparison table.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON config file (flags win on conflicts).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of records.
    #[arg(long)]
    count: Option<usize>,
    /// Theme vocabulary size T.
    #[arg(long)]
    themes: Option<usize>,
    /// Score bins K.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long)]
    max_size: Option<usize>,
    /// Voters per record.
    #[arg(long)]
    voters: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training manifest (JSONL).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Validation manifest for the per-epoch metric log.
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Output directory (checkpoint.bin, train_log.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Canvas size S.
    #[arg(long)]
    canvas: Option<usize>,
    /// Input-transform variant.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validate every N epochs (0 = never).
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    themes: Option<usize>,
    /// ROI / adaptive pooled grid size.
    #[arg(long)]
    roi_out: Option<usize>,
    #[arg(long)]
    theme_width: Option<usize>,
    /// Use ROI align instead of ROI max pooling.
    #[arg(long)]
    align: bool,
    /// Augment with flips only (no corner crops).
    #[arg(long)]
    flip_only: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    head_multiplier: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Must match the checkpoint's variant (guard against mixups).
    #[arg(long)]
    variant: Option<String>,
    /// Canvas override; only the padded variants allow it.
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-record rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Diagnostic: feed each view at its own size instead of padding.
    #[arg(long)]
    unpadded: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input image (binary PPM).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Challenge theme id.
    #[arg(long)]
    theme: Option<usize>,
    /// Canvas override; only the padded variants allow it.
    #[arg(long)]
    canvas: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Property prefix: all, tensor, roi, metrics, model, data, train.
    #[arg(long)]
    scope: Option<String>,
    /// Deliberate corruption (for testing the tester): none,
    /// roi-bin-overreach.
    #[arg(long)]
    mutate: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Synthetic dataset manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory (ablation.json, ablation.csv).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
    /// Seeds per variant.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Held-out test fraction.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    themes: Option<usize>,
    #[arg(long)]
    roi_out: Option<usize>,
    #[arg(long)]
    theme_width: Option<usize>,
    /// Also train the ROI variant at half the pooled grid.
    #[arg(long)]
    size_sweep: bool,
    /// Also train the full model with ROI align.
    #[arg(long)]
    align_parity: bool,
    /// Also train the full model with flip-only augmentation.
    #[arg(long)]
    aug_contrast: bool,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    quiet: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        Error::Numeric(_) => 3,
        Error::ConfigMismatch(_) | Error::Checkpoint(_) => 4,
        _ => 5,
    }
}

fn main() -> ExitCode {
    aesth_core::init_thread_pool();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Verify(args) => return cmd_verify(args),
        Command::Ablate(args) => cmd_ablate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn require<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| Error::ConfigMismatch(format!("missing required {what}")))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let out = require(file.path(args.out, "out")?, "--out directory")?;
    let seed = file.u64(args.seed, "seed")?.unwrap_or(0);
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        count: file.usize(args.count, "synth.count")?.unwrap_or(defaults.count),
        themes: file.usize(args.themes, "synth.themes")?.unwrap_or(defaults.themes),
        bins: file.usize(args.bins, "synth.bins")?.unwrap_or(defaults.bins),
        min_extent: file
            .usize(args.min_size, "synth.min-size")?
            .unwrap_or(defaults.min_extent),
        max_extent: file
            .usize(args.max_size, "synth.max-size")?
            .unwrap_or(defaults.max_extent),
        voters: file.usize(args.voters, "synth.voters")?.unwrap_or(defaults.voters as usize)
            as u32,
    };
    if config.min_extent < 8 || config.min_extent > config.max_extent {
        return Err(Error::ConfigMismatch(
            "size range must satisfy 8 <= min <= max".to_string(),
        ));
    }
    let records = synth_gen(&config, seed);
    write_dataset(&records, &out)?;
    println!(
        "{}",
        serde_json::json!({
            "records": records.len(),
            "manifest": out.join("manifest.jsonl"),
            "seed": seed,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn model_config_from(
    file: &FileConfig,
    prefix: &str,
    canvas: Option<usize>,
    variant: Option<String>,
    bins: Option<usize>,
    themes: Option<usize>,
    roi_out: Option<usize>,
    theme_width: Option<usize>,
    align: bool,
) -> Result<ModelConfig> {
    let defaults = ModelConfig::default();
    let variant = match file.string(variant, "variant")? {
        Some(s) => s.parse::<ModelVariant>()?,
        None => defaults.variant,
    };
    Ok(ModelConfig {
        canvas: file.usize(canvas, "canvas")?.unwrap_or(defaults.canvas),
        bins: file.usize(bins, &format!("{prefix}.bins"))?.unwrap_or(defaults.bins),
        themes: file
            .usize(themes, &format!("{prefix}.themes"))?
            .unwrap_or(defaults.themes),
        roi_out: file
            .usize(roi_out, &format!("{prefix}.roi-out"))?
            .unwrap_or(defaults.roi_out),
        theme_width: file
            .usize(theme_width, &format!("{prefix}.theme-width"))?
            .unwrap_or(defaults.theme_width),
        head_hidden: defaults.head_hidden,
        conv_widths: defaults.conv_widths,
        variant,
        pooling: if align { PoolingKind::Align } else { PoolingKind::Max },
        samples_per_bin: defaults.samples_per_bin,
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let manifest = require(file.path(args.manifest, "train.manifest")?, "--manifest")?;
    let out = require(file.path(args.out, "out")?, "--out directory")?;
    let align = file.flag(args.align, "train.align")?;
    let model = model_config_from(
        &file,
        "train",
        args.canvas,
        args.variant,
        args.bins,
        args.themes,
        args.roi_out,
        args.theme_width,
        align,
    )?;
    let hyper_defaults = OptimizerHyper::default();
    let config = TrainConfig {
        model,
        epochs: file.usize(args.epochs, "train.epochs")?.unwrap_or(30),
        batch_size: file.usize(args.batch_size, "train.batch-size")?.unwrap_or(16),
        seed: file.u64(args.seed, "seed")?.unwrap_or(0),
        eval_every: file.usize(args.eval_every, "train.eval-every")?.unwrap_or(1),
        augment: if file.flag(args.flip_only, "train.flip-only")? {
            AugmentPolicy::FlipOnly
        } else {
            AugmentPolicy::FlipCrop
        },
        hyper: OptimizerHyper {
            lr_base: file.f64(args.lr, "train.lr")?.unwrap_or(hyper_defaults.lr_base),
            momentum: file
                .f64(args.momentum, "train.momentum")?
                .unwrap_or(hyper_defaults.momentum),
            weight_decay: file
                .f64(args.weight_decay, "train.weight-decay")?
                .unwrap_or(hyper_defaults.weight_decay),
            head_multiplier: file
                .f64(args.head_multiplier, "train.head-multiplier")?
                .unwrap_or(hyper_defaults.head_multiplier),
        },
    };

    let records = load_manifest(&manifest, config.model.bins, config.model.themes)?;
    let data = Dataset::load(&records)?;
    let val = match file.path(args.val_manifest, "train.val-manifest")? {
        Some(p) => Some(Dataset::load(&load_manifest(
            &p,
            config.model.bins,
            config.model.themes,
        )?)?),
        None => None,
    };

    std::fs::create_dir_all(&out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    // header records the full configuration, variant included
    writeln!(log_file, "{}", serde_json::json!({ "config": &config }))?;
    log_file.flush()?;

    let outcome = train_with(&config, &data, val.as_ref(), |entry| {
        writeln!(log_file, "{}", serde_json::to_string(entry)?)?;
        log_file.flush()?;
        Ok(())
    })?;

    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&outcome.params, &ckpt)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": ckpt,
            "log": log_path,
            "epochs": outcome.log.len(),
            "final_loss": outcome.log.last().map(|l| l.mean_loss),
        })
    );
    Ok(())
}

/// Canvas overrides are sound only where padding is provably inert.
fn resolve_canvas(config: &ModelConfig, requested: Option<usize>) -> Result<usize> {
    match requested {
        None => Ok(config.canvas),
        Some(c) if c == config.canvas => Ok(c),
        Some(c) if config.variant.uses_roi() => Ok(c),
        Some(c) => Err(Error::ConfigMismatch(format!(
            "canvas {c} differs from the checkpoint's {} and variant {} resizes to the canvas",
            config.canvas,
            config.variant.as_str()
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let ckpt_path = require(file.path(args.checkpoint, "eval.checkpoint")?, "--checkpoint")?;
    let manifest = require(file.path(args.manifest, "eval.manifest")?, "--manifest")?;
    let params = load_checkpoint(&ckpt_path)?;
    let config = params.config.clone();

    if let Some(v) = file.string(args.variant, "variant")? {
        let v: ModelVariant = v.parse()?;
        if v != config.variant {
            return Err(Error::ConfigMismatch(format!(
                "--variant {} does not match checkpoint variant {}",
                v.as_str(),
                config.variant.as_str()
            )));
        }
    }
    let canvas = resolve_canvas(&config, file.usize(args.canvas, "canvas")?)?;
    let seed = file.u64(args.seed, "seed")?.unwrap_or(0);
    let padding = if file.flag(args.unpadded, "eval.unpadded")? {
        EvalPadding::UnpaddedDiagnostic
    } else {
        EvalPadding::Padded
    };

    let records = load_manifest(&manifest, config.bins, config.themes)?;
    let data = Dataset::load(&records)?;
    let mut per_record: Vec<RecordEval> = Vec::new();
    let report = evaluate_detailed(
        &params,
        &data,
        config.variant,
        canvas,
        seed,
        padding,
        Some(&mut per_record),
    )?;

    if let Some(csv_path) = file.path(args.csv, "eval.csv")? {
        let mut csv = String::from(
            "index,euc,kl,js,chi2,emd_r1,emd_r2,cosine,pred_mean,gt_mean,pred_std,gt_std\n",
        );
        for (i, row) in per_record.iter().enumerate() {
            let d = divergences(&row.target, &row.prediction)?;
            let e2 = emd(&row.prediction, &row.target, 2)?;
            csv.push_str(&format!(
                "{i},{},{},{},{},{},{e2},{},{},{},{},{}\n",
                d.euclidean,
                d.kl,
                d.js,
                d.chi2,
                row.emd_r1,
                d.cosine_distance,
                dist_mean(&row.prediction),
                dist_mean(&row.target),
                dist_std(&row.prediction),
                dist_std(&row.target),
            ));
        }
        std::fs::write(csv_path, csv)?;
    }

    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let ckpt_path = require(
        file.path(args.checkpoint, "predict.checkpoint")?,
        "--checkpoint",
    )?;
    let image_path = require(file.path(args.image, "predict.image")?, "--image")?;
    let theme = ThemeId(file.usize(args.theme, "predict.theme")?.unwrap_or(0));
    let params = load_checkpoint(&ckpt_path)?;
    let config = params.config.clone();
    let canvas = resolve_canvas(&config, file.usize(args.canvas, "canvas")?)?;

    let image = read_ppm(&image_path)?;
    if config.variant.uses_roi() && (image.width() > canvas || image.height() > canvas) {
        return Err(Error::Size(format!(
            "image {}x{} exceeds canvas {canvas}; pass --canvas {} or larger \
             (padded-variant predictions are canvas-independent)",
            image.width(),
            image.height(),
            image.width().max(image.height())
        )));
    }

    let dist = predict_image(&params, &image, theme, canvas, 0)?;
    println!(
        "{}",
        serde_json::json!({
            "probs": dist.probs(),
            "mean": dist_mean(&dist),
            "std": dist_std(&dist),
            "theme": theme.0,
            "variant": config.variant.as_str(),
        })
    );
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> ExitCode {
    let run = || -> Result<Vec<aesth_core::verify::PropertyResult>> {
        let file = FileConfig::load(args.config.as_deref())?;
        let scope = file.string(args.scope, "verify.scope")?.unwrap_or_else(|| "all".to_string());
        let mutation: Mutation = file
            .string(args.mutate, "verify.mutate")?
            .unwrap_or_else(|| "none".to_string())
            .parse()?;
        Ok(run_suite(&scope, mutation))
    };
    let results = match run() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if results.is_empty() {
        eprintln!("error: scope matched no properties");
        return ExitCode::from(5);
    }
    let mut failed = 0;
    for r in &results {
        if r.passed {
            println!("PASS {}", r.name);
        } else {
            failed += 1;
            println!("FAIL {} -- {}", r.name, r.detail);
        }
    }
    println!("{} properties, {} failed", results.len(), failed);
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let manifest = require(file.path(args.manifest, "ablate.manifest")?, "--manifest")?;
    let out = require(file.path(args.out, "out")?, "--out directory")?;
    let model = model_config_from(
        &file,
        "ablate",
        args.canvas,
        None,
        args.bins,
        args.themes,
        args.roi_out,
        args.theme_width,
        false,
    )?;
    let seed = file.u64(args.seed, "seed")?.unwrap_or(0);
    let base = TrainConfig {
        model,
        epochs: file.usize(args.epochs, "ablate.epochs")?.unwrap_or(15),
        batch_size: file.usize(args.batch_size, "ablate.batch-size")?.unwrap_or(16),
        seed,
        eval_every: 0,
        augment: AugmentPolicy::FlipCrop,
        hyper: OptimizerHyper::default(),
    };
    let n_seeds = file.usize(args.seeds, "ablate.seeds")?.unwrap_or(3).max(1);
    let config = AblateConfig {
        seeds: (0..n_seeds as u64).map(|i| seed + i).collect(),
        holdout: file.f64(args.holdout, "ablate.holdout")?.unwrap_or(0.2),
        size_sweep: file.flag(args.size_sweep, "ablate.size-sweep")?,
        align_parity: file.flag(args.align_parity, "ablate.align-parity")?,
        aug_contrast: file.flag(args.aug_contrast, "ablate.aug-contrast")?,
        include_base: true,
        quiet: args.quiet,
        base,
    };

    let records = load_manifest(&manifest, config.base.model.bins, config.base.model.themes)?;
    let report = run_ablation(&config, &records)?;

    std::fs::create_dir_all(&out)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(out.join("ablation.json"), &json)?;
    std::fs::write(out.join("ablation.csv"), report.to_csv())?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}
