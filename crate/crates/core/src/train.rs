//! SGD-with-momentum training against the EMD loss, the learning-rate
//! schedule with its 10x head multiplier, and the evaluator with test-time
//! view averaging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_with_policy, make_batch, test_time_views, AugmentPolicy, BatchItem, Dataset, Image,
    PaddedBatch, ThemeId, TransformMode,
};
use crate::error::{Error, Result};
use crate::metrics::{
    dist_mean, dist_std, divergences, emd, emd_loss_grad, mse, plcc, srcc, ScoreDistribution,
    VoteHistogram,
};
use crate::model::{
    backward, forward, init_params, predict_distribution, ModelConfig, ModelParams, ModelVariant,
};
use crate::roi::Region;
use crate::tensor::{softmax, Tensor};

/// Mean EMD(r=2) between the row-wise softmax of `logits` and the targets,
/// with the exact gradient w.r.t. the logits.
pub fn batch_emd_loss(
    logits: &Tensor,
    targets: &[ScoreDistribution],
) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::usage(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * k);
    for (row, target) in probs.data().chunks(k).zip(targets) {
        let p_hat = ScoreDistribution::new(row.to_vec())?;
        loss += emd(&p_hat, target, 2)?;
        grad.extend(emd_loss_grad(&p_hat, target)?.iter().map(|g| g / n as f64));
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr_base: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub head_multiplier: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            lr_base: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            head_multiplier: 10.0,
        }
    }
}

/// Parameter groups with distinct learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Head,
}

/// Learning rate at an epoch: the base rate halves every 10 epochs; the head
/// group (theme encoder and output layer) runs 10x faster.
pub fn lr_at(hyper: &OptimizerHyper, epoch: usize, group: ParamGroup) -> f64 {
    let base = hyper.lr_base * 0.5f64.powi((epoch / 10) as i32);
    match group {
        ParamGroup::Conv => base,
        ParamGroup::Head => base * hyper.head_multiplier,
    }
}

/// Momentum buffers, one per parameter tensor, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: OptimizerHyper,
    velocity: Vec<(String, Tensor)>,
    /// Rates applied by the most recent step, for auditability.
    pub last_lr_conv: f64,
    pub last_lr_head: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: OptimizerHyper) -> Self {
        let velocity = params
            .named_pairs()
            .into_iter()
            .map(|(name, pair)| (name, Tensor::zeros_like(&pair.value)))
            .collect();
        OptimizerState {
            hyper,
            velocity,
            last_lr_conv: 0.0,
            last_lr_head: 0.0,
        }
    }
}

/// One SGD step on the accumulated gradients:
/// `v <- momentum * v + (g + weight_decay * w); w <- w - lr * v`.
pub fn sgd_step(params: &mut ModelParams, state: &mut OptimizerState, epoch: usize) -> Result<()> {
    let hyper = state.hyper;
    let lr_conv = lr_at(&hyper, epoch, ParamGroup::Conv);
    let lr_head = lr_at(&hyper, epoch, ParamGroup::Head);
    for ((name, pair), (vname, vel)) in params
        .named_pairs_mut()
        .into_iter()
        .zip(state.velocity.iter_mut())
    {
        debug_assert_eq!(&name, vname);
        let lr = if ModelParams::is_head_param(&name) {
            lr_head
        } else {
            lr_conv
        };
        if !pair.grad.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient in {name}")));
        }
        for ((w, &g), v) in pair
            .value
            .data_mut()
            .iter_mut()
            .zip(pair.grad.data())
            .zip(vel.data_mut())
        {
            *v = hyper.momentum * *v + (g + hyper.weight_decay * *w);
            *w -= lr * *v;
        }
    }
    state.last_lr_conv = lr_conv;
    state.last_lr_head = lr_head;
    Ok(())
}

/// Training-run configuration (the model architecture rides along inside).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the validation set every N epochs; 0 disables.
    pub eval_every: usize,
    pub augment: AugmentPolicy,
    pub hyper: OptimizerHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            epochs: 30,
            batch_size: 16,
            seed: 0,
            eval_every: 1,
            augment: AugmentPolicy::FlipCrop,
            hyper: OptimizerHyper::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr_conv: f64,
    pub lr_head: f64,
    pub metrics: Option<MetricReport>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn stream_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ epoch) ^ batch)
}

/// Train from a fresh initialization. Deterministic in `(config, data)`:
/// shuffles, augmentation draws, and all reductions are seeded and ordered.
pub fn train(config: &TrainConfig, data: &Dataset, val: Option<&Dataset>) -> Result<TrainOutcome> {
    train_with(config, data, val, |_| Ok(()))
}

/// `train` with a per-epoch callback (the CLI streams log lines to disk so
/// a numeric abort still leaves the completed epochs behind).
pub fn train_with<F>(
    config: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    config.model.validate()?;
    if data.is_empty() {
        return Err(Error::usage("training dataset is empty".to_string()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::usage("epochs and batch size must be >= 1".to_string()));
    }
    let variant = config.model.variant;
    let mode = variant.transform_mode();
    let canvas = config.model.canvas;
    let mut params = init_params(&config.model, config.seed)?;
    let mut state = OptimizerState::new(&params, config.hyper);
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                config.seed,
                epoch as u64,
                batch_idx as u64 + 1,
            ));
            let views: Vec<Image> = chunk
                .iter()
                .map(|&i| augment_with_policy(&data.image(i), config.augment, &mut rng))
                .collect();
            let items: Vec<BatchItem> = views
                .iter()
                .zip(chunk)
                .map(|(image, &i)| BatchItem {
                    image,
                    votes: &data.votes[i],
                    theme: data.themes[i],
                })
                .collect();
            let batch = make_batch(&items, mode, canvas, &mut rng)?;
            if mode != TransformMode::Pad {
                // the resize-family variants must not depend on regions
                debug_assert!(batch
                    .regions
                    .iter()
                    .all(|r| r.x0 == 0 && r.y0 == 0));
            }

            let mut step = || -> Result<f64> {
                let cache = forward(&params, &batch, variant)?;
                let (loss, grad_logits) = batch_emd_loss(&cache.logits, &batch.targets)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("loss = {loss}")));
                }
                params.zero_grads();
                backward(&mut params, &cache, &grad_logits)?;
                sgd_step(&mut params, &mut state, epoch)?;
                Ok(loss)
            };
            let loss = step().map_err(|e| match e {
                Error::Numeric(msg) => Error::numeric(format!(
                    "epoch {epoch} batch {batch_idx}: {msg}"
                )),
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }

        let metrics = match val {
            Some(v) if config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 => {
                Some(evaluate(&params, v, variant, canvas, config.seed)?)
            }
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr_conv: state.last_lr_conv,
            lr_head: state.last_lr_head,
            metrics,
        };
        on_epoch(&entry)?;
        log.push(entry);
    }

    Ok(TrainOutcome { params, log })
}

/// The Table I + Table II metric set: seven mean distribution distances, the
/// four correlations on per-record means and standard deviations, and the
/// MSE of the mean. Correlations are `null` when degenerate (constant
/// sequence).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub euc: f64,
    pub kl: f64,
    pub js: f64,
    pub chi2: f64,
    pub emd_r1: f64,
    pub emd_r2: f64,
    pub cosine: f64,
    pub srcc_mean: Option<f64>,
    pub plcc_mean: Option<f64>,
    pub srcc_std: Option<f64>,
    pub plcc_std: Option<f64>,
    pub mse_mean: f64,
    pub records: usize,
    pub views_per_record: usize,
}

/// Per-record evaluation rows (for the plot-ready CSV).
#[derive(Debug, Clone)]
pub struct RecordEval {
    pub prediction: ScoreDistribution,
    pub target: ScoreDistribution,
    pub emd_r1: f64,
}

/// Whether evaluation feeds padded canvases (the trained procedure) or each
/// view at its own size (diagnostic only; testing without padding departs
/// from the training distribution).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPadding {
    Padded,
    UnpaddedDiagnostic,
}

/// Predict one record by averaging the predicted distributions of its six
/// test-time views.
pub fn predict_record(
    params: &ModelParams,
    image: &Image,
    theme: ThemeId,
    variant: ModelVariant,
    canvas: usize,
    rng: &mut ChaCha8Rng,
    padding: EvalPadding,
) -> Result<ScoreDistribution> {
    let views = test_time_views(image);
    let k = params.config.bins;
    // targets are unused for prediction; feed a placeholder histogram
    let votes = VoteHistogram::new(vec![1; k]);
    let mut acc = vec![0.0; k];
    match padding {
        EvalPadding::Padded => {
            let items: Vec<BatchItem> = views
                .iter()
                .map(|image| BatchItem {
                    image,
                    votes: &votes,
                    theme,
                })
                .collect();
            let batch = make_batch(&items, variant.transform_mode(), canvas, rng)?;
            let preds = predict_distribution(params, &batch, variant)?;
            for p in &preds {
                for (a, &v) in acc.iter_mut().zip(p.probs()) {
                    *a += v;
                }
            }
        }
        EvalPadding::UnpaddedDiagnostic => {
            for view in &views {
                let batch = single_view_batch(view, &votes, theme, k)?;
                let preds = predict_distribution(params, &batch, variant)?;
                for (a, &v) in acc.iter_mut().zip(preds[0].probs()) {
                    *a += v;
                }
            }
        }
    }
    let n = views.len() as f64;
    ScoreDistribution::new(acc.into_iter().map(|v| v / n).collect())
}

/// `predict_record` with a self-contained seeded stream (covers the
/// random-crop variant's test-time crops).
pub fn predict_image(
    params: &ModelParams,
    image: &Image,
    theme: ThemeId,
    canvas: usize,
    seed: u64,
) -> Result<ScoreDistribution> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    predict_record(
        params,
        image,
        theme,
        params.config.variant,
        canvas,
        &mut rng,
        EvalPadding::Padded,
    )
}

/// A batch holding one view at its exact size (no padding), region = all.
fn single_view_batch(
    view: &Image,
    votes: &VoteHistogram,
    theme: ThemeId,
    _k: usize,
) -> Result<PaddedBatch> {
    let (w, h) = (view.width(), view.height());
    let mut canvas = Tensor::zeros(vec![1, crate::data::CHANNELS, h, w]);
    let data = canvas.data_mut();
    for y in 0..h {
        for x in 0..w {
            for c in 0..crate::data::CHANNELS {
                data[(c * h + y) * w + x] = view.get(x, y, c);
            }
        }
    }
    Ok(PaddedBatch {
        canvas,
        regions: vec![Region::anchored(0, w, h)],
        themes: vec![theme],
        targets: vec![crate::metrics::normalize_votes(votes)?],
    })
}

/// Evaluate a dataset: view-averaged prediction per record, then the full
/// metric report. Optionally fills `per_record` with per-record rows.
pub fn evaluate_detailed(
    params: &ModelParams,
    data: &Dataset,
    variant: ModelVariant,
    canvas: usize,
    seed: u64,
    padding: EvalPadding,
    per_record: Option<&mut Vec<RecordEval>>,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::usage("evaluation dataset is empty".to_string()));
    }
    let rows: Vec<(ScoreDistribution, ScoreDistribution)> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<(ScoreDistribution, ScoreDistribution)> {
            let image = data.image(i);
            let target = crate::metrics::normalize_votes(&data.votes[i])?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, u64::MAX, i as u64));
            let pred = predict_record(
                params,
                &image,
                data.themes[i],
                variant,
                canvas,
                &mut rng,
                padding,
            )?;
            Ok((pred, target))
        })
        .collect::<Result<_>>()?;

    let n = rows.len();
    let mut sums = [0.0f64; 7];
    let mut pred_means = Vec::with_capacity(n);
    let mut pred_stds = Vec::with_capacity(n);
    let mut gt_means = Vec::with_capacity(n);
    let mut gt_stds = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for (pred, target) in &rows {
        // KL runs ground-truth-first: vote histograms contain zero bins,
        // while softmax predictions have full support, so KL(gt || pred) is
        // the direction that stays finite without smoothing
        let d = divergences(target, pred)?;
        let e1 = emd(pred, target, 1)?;
        let e2 = emd(pred, target, 2)?;
        sums[0] += d.euclidean;
        sums[1] += d.kl;
        sums[2] += d.js;
        sums[3] += d.chi2;
        sums[4] += e1;
        sums[5] += e2;
        sums[6] += d.cosine_distance;
        pred_means.push(dist_mean(pred));
        pred_stds.push(dist_std(pred));
        gt_means.push(dist_mean(target));
        gt_stds.push(dist_std(target));
        records.push(RecordEval {
            prediction: pred.clone(),
            target: target.clone(),
            emd_r1: e1,
        });
    }
    if let Some(out) = per_record {
        *out = records;
    }

    let correlation = |f: fn(&[f64], &[f64]) -> Result<f64>, a: &[f64], b: &[f64]| match f(a, b) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let nf = n as f64;
    Ok(MetricReport {
        euc: sums[0] / nf,
        kl: sums[1] / nf,
        js: sums[2] / nf,
        chi2: sums[3] / nf,
        emd_r1: sums[4] / nf,
        emd_r2: sums[5] / nf,
        cosine: sums[6] / nf,
        srcc_mean: correlation(srcc, &pred_means, &gt_means)?,
        plcc_mean: correlation(plcc, &pred_means, &gt_means)?,
        srcc_std: correlation(srcc, &pred_stds, &gt_stds)?,
        plcc_std: correlation(plcc, &pred_stds, &gt_stds)?,
        mse_mean: mse(&pred_means, &gt_means)?,
        records: n,
        views_per_record: 6,
    })
}

pub fn evaluate(
    params: &ModelParams,
    data: &Dataset,
    variant: ModelVariant,
    canvas: usize,
    seed: u64,
) -> Result<MetricReport> {
    evaluate_detailed(params, data, variant, canvas, seed, EvalPadding::Padded, None)
}
