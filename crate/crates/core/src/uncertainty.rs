//! Uncertainty scores, calibration and out-of-distribution detection.

use crate::bayesian::PredictiveResult;
use crate::error::{LabError, Result};

/// Shannon entropy in nats, with `0·log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn predictive_entropy(r: &PredictiveResult) -> f64 {
    entropy(&r.mean_probs).max(0.0)
}

/// Entropy of the mean minus the mean per-sample entropy, clipped at zero.
pub fn mutual_information(r: &PredictiveResult) -> f64 {
    let t = r.samples.len().max(1) as f64;
    let expected: f64 = r.samples.iter().map(|s| entropy(s)).sum::<f64>() / t;
    (entropy(&r.mean_probs) - expected).max(0.0)
}

/// Expected calibration error over equal-width confidence bins `(lo, hi]`
/// (the first bin also takes confidence 0). Empty bins are skipped.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(LabError::Config("ece needs at least one bin".into()));
    }
    if probs.len() != labels.len() {
        return Err(LabError::InvalidShape(format!("{} predictions but {} labels", probs.len(), labels.len())));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut conf = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, &y) in probs.iter().zip(labels) {
        let (arg, c) = p.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let b = ((c * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        conf[b] += c;
        hits[b] += if arg == y { 1.0 } else { 0.0 };
        count[b] += 1;
    }
    let n = probs.len() as f64;
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            m / n * (hits[b] / m - conf[b] / m).abs()
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    InDistribution,
    Ood,
}

/// Uncertainty score per input, higher meaning less certain.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub origin: Origin,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Option<Vec<usize>>, origin: Origin) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(LabError::Config(format!("score {i} is not finite")));
        }
        if let Some(l) = &labels {
            if l.len() != scores.len() {
                return Err(LabError::InvalidShape(format!("{} scores but {} labels", scores.len(), l.len())));
            }
        }
        Ok(Self { scores, labels, origin })
    }

    /// Predictive entropy of every result.
    pub fn entropy_of(results: &[PredictiveResult], origin: Origin) -> Result<Self> {
        Self::new(results.iter().map(predictive_entropy).collect(), None, origin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodReport {
    pub auroc: f64,
    pub detection_rate_at_5pct_fpr: f64,
    pub threshold: f64,
}

/// Probability that a random OOD score exceeds a random in-distribution one
/// (ties count half), from the Mann-Whitney rank sum.
pub fn auroc(in_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> =
        in_scores.iter().map(|&s| (s, false)).chain(ood_scores.iter().map(|&s| (s, true))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; a tie group shares the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n_in, n_ood) = (in_scores.len() as f64, ood_scores.len() as f64);
    (rank_sum - n_ood * (n_ood + 1.0) / 2.0) / (n_in * n_ood)
}

/// Linearly interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Threshold at the 95th in-distribution percentile; OOD inputs strictly
/// above it count as detected.
pub fn ood_eval(in_set: &ScoredSet, ood_set: &ScoredSet) -> Result<OodReport> {
    if in_set.scores.is_empty() || ood_set.scores.is_empty() {
        return Err(LabError::Config("ood_eval needs non-empty score sets".into()));
    }
    let threshold = percentile(&in_set.scores, 95.0);
    let detected = ood_set.scores.iter().filter(|&&s| s > threshold).count();
    Ok(OodReport {
        auroc: auroc(&in_set.scores, &ood_set.scores),
        detection_rate_at_5pct_fpr: detected as f64 / ood_set.scores.len() as f64,
        threshold,
    })
}
