//! Monte-Carlo Bayesian inference: neuron/spatial dropout, single-source scale
//! dropout with layer-adaptive rates, variational scale vectors, and
//! normalization with affine dropout.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::layers::{softmax_rows, sigmoid, AffineDropout, BatchNorm, Layer, PassCtx, ScaleVi};
use crate::nn::model::{Model, PassOptions};
use crate::nn::sampler::{RngStats, Sampler, SourceKind};
use crate::nn::train::batch_objective;
use crate::par;
use crate::rng;
use crate::tensor::Tensor;

/// Predictive distribution of one input from `T` stochastic passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveResult {
    pub mean_probs: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

impl PredictiveResult {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Self {
        let c = samples.first().map_or(0, Vec::len);
        let t = samples.len() as f64;
        let mut mean = vec![0.0; c];
        for s in &samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= t);
        Self { mean_probs: mean, samples }
    }

    pub fn t(&self) -> usize {
        self.samples.len()
    }

    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.mean_probs.iter().enumerate() {
            if p > self.mean_probs[best] {
                best = i;
            }
        }
        best
    }

    /// Per-class variance across samples, summed over classes.
    pub fn total_variance(&self) -> f64 {
        let t = self.samples.len() as f64;
        self.mean_probs
            .iter()
            .enumerate()
            .map(|(c, &m)| self.samples.iter().map(|s| (s[c] - m).powi(2)).sum::<f64>() / t)
            .sum()
    }
}

/// Output of [`mc_forward_instrumented`].
#[derive(Debug, Clone)]
pub struct McRun {
    pub results: Vec<PredictiveResult>,
    /// What each stochastic pass drew, in pass order.
    pub rng: Vec<RngStats>,
}

fn probabilities(model: &Model, logits: &Tensor) -> Vec<f64> {
    if matches!(model.layers.last(), Some(Layer::Softmax)) {
        logits.data().to_vec()
    } else {
        softmax_rows(logits.data(), logits.row_len())
    }
}

/// `T` stochastic forward passes over the batch `x`; pass `s` samples from a
/// stream derived from `(seed, s)` so passes can run on any worker.
pub fn mc_forward(model: &Model, x: &Tensor, t: usize, seed: u64) -> Result<Vec<PredictiveResult>> {
    Ok(mc_forward_instrumented(model, x, t, seed)?.results)
}

pub fn mc_forward_instrumented(model: &Model, x: &Tensor, t: usize, seed: u64) -> Result<McRun> {
    if t == 0 {
        return Err(LabError::Config("mc_forward needs T >= 1".into()));
    }
    let passes = par::try_map_range(t, |s| {
        let mut sampler = Sampler::new(rng::derive(seed, &[s as u64]));
        let trace = model.run(x, &PassOptions::sampling(), &mut sampler)?;
        Ok::<_, LabError>((probabilities(model, &trace.output), trace.rng))
    })?;
    let n = x.rows();
    let c = passes.first().map_or(0, |p| p.0.len() / n.max(1));
    let results = (0..n)
        .map(|i| {
            PredictiveResult::from_samples(passes.iter().map(|(p, _)| p[i * c..(i + 1) * c].to_vec()).collect())
        })
        .collect();
    Ok(McRun { results, rng: passes.into_iter().map(|(_, r)| r).collect() })
}

/// One time-multiplexed use of the model-wide scale dropout module: with
/// probability `p` the whole vector is replaced by ones.
pub fn scale_dropout_step(scales: &Tensor, p: f64, sampler: &mut Sampler, source: u32) -> Result<Tensor> {
    if sampler.bernoulli(source, SourceKind::Scale, p)? {
        Ok(Tensor::full(scales.shape(), 1.0))
    } else {
        Ok(scales.clone())
    }
}

/// `p_ℓ = p_min + (p_max − p_min) · n_ℓ / max n`, where `n_ℓ` is a layer's
/// parameter count.
pub fn adaptive_rates_from_counts(counts: &[usize], p_min: f64, p_max: f64) -> Result<Vec<f64>> {
    if !(0.0 <= p_min && p_min <= p_max && p_max < 1.0) {
        return Err(LabError::Config(format!("need 0 <= p_min <= p_max < 1, got {p_min}, {p_max}")));
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    // written from p_max down so the largest layer gets exactly p_max
    Ok(counts.iter().map(|&n| p_max - (p_max - p_min) * (1.0 - n as f64 / max)).collect())
}

/// Rates for each scale layer, sized by the matmul layer feeding it.
pub fn adaptive_rates(model: &Model, p_min: f64, p_max: f64) -> Result<Vec<f64>> {
    let mut counts = Vec::new();
    let mut last_matmul = 0;
    for l in &model.layers {
        if l.is_matmul() {
            last_matmul = l.param_count();
        }
        if let Layer::Scale(_) = l {
            counts.push(last_matmul);
        }
    }
    adaptive_rates_from_counts(&counts, p_min, p_max)
}

pub fn apply_scale_rates(model: &mut Model, rates: &[f64]) -> Result<()> {
    let mut it = rates.iter();
    for l in &mut model.layers {
        if let Layer::Scale(s) = l {
            s.drop_p = *it
                .next()
                .ok_or_else(|| LabError::Config("fewer rates than scale layers".into()))?;
        }
    }
    if it.next().is_some() {
        return Err(LabError::Config("more rates than scale layers".into()));
    }
    Ok(())
}

/// Closed-form `KL(N(mu, sigma²) ‖ N(prior_mu, prior_sigma²))`.
pub fn gaussian_kl(mu: f64, sigma: f64, prior_mu: f64, prior_sigma: f64) -> f64 {
    (prior_sigma / sigma).ln() + (sigma * sigma + (mu - prior_mu).powi(2)) / (2.0 * prior_sigma * prior_sigma) - 0.5
}

/// KL of a variational scale layer against `N(1, prior_sigma²)` and its
/// gradients with respect to `mu` and `rho`.
pub fn scale_vi_kl(v: &ScaleVi) -> (f64, Vec<f64>, Vec<f64>) {
    let ps2 = v.prior_sigma * v.prior_sigma;
    let mut kl = 0.0;
    let mut gmu = Vec::with_capacity(v.mu.len());
    let mut grho = Vec::with_capacity(v.mu.len());
    for (&mu, &rho) in v.mu.data().iter().zip(v.rho.data()) {
        let sigma = crate::nn::layers::softplus(rho);
        kl += gaussian_kl(mu, sigma, 1.0, v.prior_sigma);
        gmu.push((mu - 1.0) / ps2);
        grho.push((-1.0 / sigma + sigma / ps2) * sigmoid(rho));
    }
    (kl, gmu, grho)
}

#[derive(Debug, Clone)]
pub struct Elbo {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    /// Gradients of `loss`, one entry per layer.
    pub grads: Vec<Vec<Tensor>>,
}

/// Negative ELBO of a batch: NLL under one reparameterized sample of every
/// variational scale, plus `beta` times the summed KL.
pub fn vi_elbo(model: &Model, batch: &Dataset, beta: f64, seed: u64) -> Result<Elbo> {
    if !model.layers.iter().any(|l| matches!(l, Layer::ScaleVi(_))) {
        return Err(LabError::Config("vi_elbo needs at least one variational scale layer".into()));
    }
    let mut sampler = Sampler::new(seed);
    let trace = model.run(&batch.x, &PassOptions::train(), &mut sampler)?;
    let (nll, g) = batch_objective(&trace.output, &batch.y, batch.classes, None)?;
    let mut grads = model.backprop(&trace, g, &BTreeMap::new())?.params;
    let mut kl = 0.0;
    for (l, g) in model.layers.iter().zip(grads.iter_mut()) {
        if let Layer::ScaleVi(v) = l {
            let (k, gmu, grho) = scale_vi_kl(v);
            kl += k;
            g[0].data_mut().iter_mut().zip(&gmu).for_each(|(a, b)| *a += beta * b);
            g[1].data_mut().iter_mut().zip(&grho).for_each(|(a, b)| *a += beta * b);
        }
    }
    if !kl.is_finite() {
        return Err(LabError::NonFiniteKl);
    }
    Ok(Elbo { loss: nll + beta * kl, nll, kl, grads })
}

/// Normalizes `x` with fixed statistics, then applies `gamma`/`beta`, each
/// scaled by `1 + s·delta` where `s ∈ {−1, 0, +1}` is drawn per channel with
/// `P(s = ±1) = p/2`. With `stochastic = false`, `s = 0`.
#[allow(clippy::too_many_arguments)]
pub fn inverted_norm_affine(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    delta: f64,
    p: f64,
    sampler: &mut Sampler,
    source: u32,
    stochastic: bool,
) -> Result<Tensor> {
    if var.data().iter().any(|&v| !(v > 0.0)) {
        return Err(LabError::Config("normalization variance must be > 0".into()));
    }
    let mut bn = BatchNorm::new(gamma.len());
    bn.gamma = gamma.clone();
    bn.beta = beta.clone();
    bn.running_mean = mean.clone();
    bn.running_var = var.clone();
    bn.eps = 0.0;
    bn.affine_dropout = Some(AffineDropout { delta, p, source });
    let mut ctx = PassCtx { batch_stats: false, stochastic, sampler, weight_multiplier: None };
    Ok(Layer::BatchNorm(bn).forward(x, &mut ctx)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_form_values() {
        assert!(gaussian_kl(1.0, 0.25, 1.0, 0.25).abs() < 1e-12);
        // ln(1/0.5) + (0.25 + 0.25)/2 - 0.5
        let expected = 2f64.ln() + 0.25 - 0.5;
        assert!((gaussian_kl(1.5, 0.5, 1.0, 1.0) - expected).abs() < 1e-12);
        assert!((expected - 0.4431).abs() < 1e-4);
    }

    #[test]
    fn adaptive_rate_formula() {
        let r = adaptive_rates_from_counts(&[10, 50, 100], 0.1, 0.3).unwrap();
        for (a, b) in r.iter().zip([0.12, 0.20, 0.30]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(adaptive_rates_from_counts(&[7, 7, 7], 0.1, 0.4).unwrap(), vec![0.4; 3]);
        assert_eq!(adaptive_rates_from_counts(&[3, 9], 0.2, 0.2).unwrap(), vec![0.2; 2]);
        assert!(adaptive_rates_from_counts(&[1], 0.3, 0.2).is_err());
        assert!(adaptive_rates_from_counts(&[1], 0.1, 1.0).is_err());
    }

    #[test]
    fn scale_dropout_extremes() {
        let s = Tensor::from_vec(vec![0.5, 2.0, 3.0]);
        let mut sampler = Sampler::new(1);
        assert_eq!(scale_dropout_step(&s, 0.0, &mut sampler, 0).unwrap(), s);
        assert_eq!(scale_dropout_step(&s, 1.0, &mut sampler, 0).unwrap().data(), &[1.0; 3]);
        assert!(scale_dropout_step(&s, 0.5, &mut sampler, 4).is_err());
    }

    #[test]
    fn affine_dropout_identities() {
        let x = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 4.0, 3.0, 1.0]).unwrap();
        let mean = Tensor::from_vec(vec![1.0, 0.5]);
        let var = Tensor::from_vec(vec![4.0, 2.0]);
        let gamma = Tensor::from_vec(vec![1.5, -0.5]);
        let beta = Tensor::from_vec(vec![0.1, 0.2]);
        let mut s = Sampler::new(5);
        let plain = inverted_norm_affine(&x, &mean, &var, &gamma, &beta, 0.3, 0.0, &mut s, 1, true).unwrap();
        let expected: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i % 2;
                gamma.data()[c] * (v - mean.data()[c]) / var.data()[c].sqrt() + beta.data()[c]
            })
            .collect();
        for (a, b) in plain.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let no_delta = inverted_norm_affine(&x, &mean, &var, &gamma, &beta, 0.0, 0.9, &mut s, 1, true).unwrap();
        assert_eq!(no_delta, plain);
        let eval = inverted_norm_affine(&x, &mean, &var, &gamma, &beta, 0.5, 0.9, &mut s, 1, false).unwrap();
        assert_eq!(eval, plain);
    }
}
