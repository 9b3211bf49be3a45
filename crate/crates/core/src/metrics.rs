//! Ground-truth construction, the EMD training loss, and the evaluation
//! metric set: distribution divergences plus correlation/error statistics on
//! the mean and standard deviation derived from distributions.
//!
//! Scores are the integers `1..=K`; distributions are probability vectors
//! over those K ordered bins.

use crate::error::{Error, Result};

/// Smoothing used when a divergence denominator or log argument would be
/// zero. Applied only in that case, so zero-free inputs take the exact path.
const EPS: f64 = 1e-12;

/// Raw rating counts over K ordered score bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteHistogram {
    counts: Vec<u32>,
}

impl VoteHistogram {
    pub fn new(counts: Vec<u32>) -> Self {
        VoteHistogram { counts }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Normalized probability vector over K ordered score bins.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: Vec<f64>,
}

impl ScoreDistribution {
    /// Validate non-negativity and unit mass (within 1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::dimension("distribution must have at least one bin".to_string()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::numeric("distribution has negative or non-finite mass".to_string()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::numeric(format!("distribution mass {sum} != 1")));
        }
        Ok(ScoreDistribution { probs })
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Point mass on bin `i` (0-based).
    pub fn one_hot(i: usize, k: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[i] = 1.0;
        ScoreDistribution { probs }
    }

    pub fn uniform(k: usize) -> Self {
        ScoreDistribution {
            probs: vec![1.0 / k as f64; k],
        }
    }
}

/// p_i = v_i / v.
pub fn normalize_votes(h: &VoteHistogram) -> Result<ScoreDistribution> {
    let total = h.total();
    if total == 0 {
        return Err(Error::EmptyHistogram);
    }
    let t = total as f64;
    Ok(ScoreDistribution {
        probs: h.counts.iter().map(|&c| c as f64 / t).collect(),
    })
}

fn check_k(p: &ScoreDistribution, q: &ScoreDistribution) -> Result<usize> {
    if p.k() != q.k() {
        return Err(Error::dimension(format!(
            "distributions have different bin counts: {} vs {}",
            p.k(),
            q.k()
        )));
    }
    Ok(p.k())
}

/// Earth mover's distance through the CDFs:
/// `((1/K) * sum_k |CDF_p(k) - CDF_q(k)|^r)^(1/r)` with `r` in {1, 2}.
pub fn emd(p: &ScoreDistribution, q: &ScoreDistribution, r: u32) -> Result<f64> {
    let k = check_k(p, q)?;
    if r != 1 && r != 2 {
        return Err(Error::usage(format!("emd exponent must be 1 or 2, got {r}")));
    }
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut acc = 0.0;
    for (pi, qi) in p.probs.iter().zip(&q.probs) {
        cp += pi;
        cq += qi;
        let d = (cp - cq).abs();
        acc += if r == 1 { d } else { d * d };
    }
    let mean = acc / k as f64;
    Ok(if r == 1 { mean } else { mean.sqrt() })
}

/// Gradient of `emd(softmax(c), p, r=2)` with respect to the logits `c`,
/// expressed through the softmax output `p_hat` alone.
///
/// At the exact minimum (`p_hat == p`) the distance has a kink; the returned
/// gradient there is zero.
pub fn emd_loss_grad(p_hat: &ScoreDistribution, p: &ScoreDistribution) -> Result<Vec<f64>> {
    let k = check_k(p_hat, p)?;
    let loss = emd(p_hat, p, 2)?;
    if loss == 0.0 {
        return Ok(vec![0.0; k]);
    }
    // d = CDF differences; dL/dp_hat_i = (1/(K*L)) * sum_{k >= i} d_k
    let mut d = vec![0.0; k];
    let mut cp = 0.0;
    let mut cq = 0.0;
    for ((di, phi), pi) in d.iter_mut().zip(&p_hat.probs).zip(&p.probs) {
        cp += phi;
        cq += pi;
        *di = cp - cq;
    }
    let mut suffix = 0.0;
    let mut g = vec![0.0; k];
    for i in (0..k).rev() {
        suffix += d[i];
        g[i] = suffix / (k as f64 * loss);
    }
    // pull back through softmax: grad_c = p_hat .* (g - <g, p_hat>)
    let dot: f64 = g.iter().zip(&p_hat.probs).map(|(&a, &b)| a * b).sum();
    Ok(p_hat
        .probs
        .iter()
        .zip(&g)
        .map(|(&ph, &gi)| ph * (gi - dot))
        .collect())
}

/// The distribution-comparison metric set reported alongside EMD.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Divergences {
    pub euclidean: f64,
    pub kl: f64,
    pub js: f64,
    pub chi2: f64,
    pub cosine_distance: f64,
}

fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            let denom = if qi > 0.0 { qi } else { EPS };
            acc += pi * (pi / denom).ln();
        }
    }
    acc
}

pub fn divergences(p: &ScoreDistribution, q: &ScoreDistribution) -> Result<Divergences> {
    check_k(p, q)?;
    let pp = &p.probs;
    let qq = &q.probs;

    let euclidean = pp
        .iter()
        .zip(qq)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();

    let kl = kl_div(pp, qq);

    let m: Vec<f64> = pp.iter().zip(qq).map(|(&a, &b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_div(pp, &m) + 0.5 * kl_div(qq, &m);

    let mut chi2 = 0.0;
    for (&a, &b) in pp.iter().zip(qq) {
        let denom = a + b;
        if denom > 0.0 {
            chi2 += (a - b) * (a - b) / denom;
        }
    }

    let dot: f64 = pp.iter().zip(qq).map(|(&a, &b)| a * b).sum();
    let np: f64 = pp.iter().map(|&a| a * a).sum::<f64>().sqrt();
    let nq: f64 = qq.iter().map(|&a| a * a).sum::<f64>().sqrt();
    let cosine_distance = 1.0 - dot / (np * nq);

    Ok(Divergences {
        euclidean,
        kl,
        js,
        chi2,
        cosine_distance,
    })
}

/// Mean score of a distribution over scores 1..=K.
pub fn dist_mean(p: &ScoreDistribution) -> f64 {
    p.probs
        .iter()
        .enumerate()
        .map(|(i, &pi)| (i + 1) as f64 * pi)
        .sum()
}

/// Standard deviation of a distribution over scores 1..=K.
pub fn dist_std(p: &ScoreDistribution) -> f64 {
    let mu = dist_mean(p);
    let ex2: f64 = p
        .probs
        .iter()
        .enumerate()
        .map(|(i, &pi)| ((i + 1) * (i + 1)) as f64 * pi)
        .sum();
    (ex2 - mu * mu).max(0.0).sqrt()
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::dimension(format!(
            "sequence lengths disagree: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::usage("need at least 2 observations".to_string()));
    }
    Ok(())
}

/// Sample Pearson linear correlation coefficient.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "constant sequence has no linear correlation".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fractional ranks, ties averaged.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("rank of NaN"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank-order correlation: Pearson correlation of fractional ranks.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    plcc(&ranks(xs), &ranks(ys))
}

/// Mean squared error between two sequences.
pub fn mse(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    Ok(xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / xs.len() as f64)
}
