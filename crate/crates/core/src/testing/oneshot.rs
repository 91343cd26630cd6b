//! A single optimized input whose hidden pre-activations form a unit
//! Gaussian on healthy hardware; faults show up as a shift in the moments.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::crossbar::{faulty_run, AnalogOptions, CrossbarProgram};
use crate::error::{LabError, Result};
use crate::nn::{Layer, Model, PassOptions, Sampler};
use crate::tensor::Tensor;
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq)]
pub struct OneShotVector {
    /// `[1, ...input_shape]`
    pub x_star: Tensor,
    pub monitored_layers: Vec<usize>,
    /// Moment distance of the generated vector on the digital model.
    pub stat_fault_free: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneShotConfig {
    pub steps: usize,
    pub lr: f64,
    /// Fault-free read-noise replays used to set the threshold.
    pub replays: usize,
    pub margin: f64,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.05, replays: 32, margin: 1.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneShotOutcome {
    pub pass: bool,
    pub statistic: f64,
}

/// Layers whose outputs feed a ReLU or sign activation.
pub fn monitored_layers(model: &Model) -> Vec<usize> {
    (0..model.layers.len().saturating_sub(1))
        .filter(|&i| matches!(model.layers[i + 1], Layer::Relu | Layer::Sign))
        .collect()
}

/// Mean and biased variance of all values in the given layer outputs.
fn moments(outputs: &[Tensor], monitored: &[usize]) -> (f64, f64, f64) {
    let n: usize = monitored.iter().map(|&i| outputs[i].len()).sum();
    let n = n as f64;
    let m1 = monitored.iter().map(|&i| outputs[i].sum()).sum::<f64>() / n;
    let m2 = monitored
        .iter()
        .flat_map(|&i| outputs[i].data().iter())
        .map(|v| (v - m1).powi(2))
        .sum::<f64>()
        / n;
    (m1, m2, n)
}

/// Distance of the pre-activation population from a unit Gaussian,
/// `sqrt(m1² + (m2 − 1)²)`.
pub fn moment_distance(outputs: &[Tensor], monitored: &[usize]) -> f64 {
    let (m1, m2, _) = moments(outputs, monitored);
    (m1 * m1 + (m2 - 1.0).powi(2)).sqrt()
}

/// `L = m1² + (m2 − 1)²` on the digital model and its gradient with respect
/// to `x`.
pub fn oneshot_loss(model: &Model, x: &Tensor, monitored: &[usize]) -> Result<(f64, Tensor)> {
    let opts = PassOptions { record: true, ..PassOptions::eval() };
    let trace = model.run(x, &opts, &mut Sampler::new(model.seed))?;
    let (m1, m2, n) = moments(&trace.outputs, monitored);
    let loss = m1 * m1 + (m2 - 1.0).powi(2);
    let mut extra = BTreeMap::new();
    for &i in monitored {
        let g = trace.outputs[i].map(|v| 2.0 * m1 / n + 2.0 * (m2 - 1.0) * 2.0 * (v - m1) / n);
        extra.insert(i, g);
    }
    let zero = Tensor::zeros(trace.output.shape());
    let grads = model.backprop(&trace, zero, &extra)?;
    Ok((loss, grads.input))
}

/// Statistic of `v` on a program, with the given read-noise seed.
pub fn oneshot_statistic(model: &Model, prog: &CrossbarProgram, v: &OneShotVector, read_seed: u64) -> Result<f64> {
    let opts = AnalogOptions { read_seed, record: true, ..AnalogOptions::default() };
    let trace = faulty_run(model, prog, &v.x_star, &opts)?;
    Ok(moment_distance(&trace.outputs, &v.monitored_layers))
}

/// Fails when the statistic exceeds the calibrated threshold.
pub fn oneshot_test(model: &Model, prog: &CrossbarProgram, v: &OneShotVector, read_seed: u64) -> Result<OneShotOutcome> {
    let statistic = oneshot_statistic(model, prog, v, read_seed)?;
    Ok(OneShotOutcome { pass: statistic <= v.tau, statistic })
}

const TAG_START: u64 = 41;
const TAG_REPLAY: u64 = 42;

/// Adam descent on the input from `x ~ N(0, 1)`. Stops once the loss drops
/// below `1e-10` and fails if it rises or stalls for 50 steps in a row. The
/// threshold is `margin` times the largest statistic over fault-free replays
/// of `clean` with fresh read noise.
pub fn generate_oneshot(model: &Model, clean: &CrossbarProgram, cfg: &OneShotConfig, seed: u64) -> Result<OneShotVector> {
    if cfg.steps == 0 {
        return Err(LabError::Config("one-shot generation needs at least one step".into()));
    }
    let monitored = monitored_layers(model);
    if monitored.is_empty() {
        return Err(LabError::Config("model has no hidden activations to monitor".into()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(model.input_shape());
    let mut x = Tensor::zeros(&shape);
    let mut r = rng::stream(seed, &[TAG_START]);
    x.data_mut().iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; x.len()];
    let mut s = vec![0.0; x.len()];
    let mut best = (f64::INFINITY, x.clone());
    let mut prev = f64::INFINITY;
    let mut stalled = 0;
    for t in 1..=cfg.steps {
        let (loss, g) = oneshot_loss(model, &x, &monitored)?;
        if !loss.is_finite() {
            return Err(LabError::NotConverged(format!("one-shot loss became non-finite at step {t}")));
        }
        if loss < best.0 {
            best = (loss, x.clone());
        }
        if loss <= 1e-10 {
            break;
        }
        stalled = if loss >= prev { stalled + 1 } else { 0 };
        if stalled >= 50 {
            return Err(LabError::NotConverged(format!("one-shot loss did not decrease for 50 steps (at step {t})")));
        }
        prev = loss;
        let (c1, c2) = (1.0 - f64::powi(b1, t as i32), 1.0 - f64::powi(b2, t as i32));
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            s[k] = b2 * s[k] + (1.0 - b2) * gk * gk;
            *v -= cfg.lr * (m[k] / c1) / ((s[k] / c2).sqrt() + eps);
        }
    }
    let x_star = best.1;
    let stat_fault_free = best.0.sqrt();
    let mut v = OneShotVector { x_star, monitored_layers: monitored, stat_fault_free, tau: 0.0 };
    let replays = par::try_map_range(cfg.replays.max(1), |k| {
        oneshot_statistic(model, clean, &v, rng::derive(seed, &[TAG_REPLAY, k as u64]))
    })?;
    let worst = replays.into_iter().fold(stat_fault_free, f64::max);
    v.tau = (cfg.margin * worst).max(stat_fault_free + 1e-9);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Dense;

    #[test]
    fn unit_gaussian_population_is_stationary() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Model::new(vec![2], vec![Layer::Dense(Dense::new(eye, Tensor::zeros(&[2]))), Layer::Relu], 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let (loss, g) = oneshot_loss(&m, &x, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let w = Tensor::new(vec![3, 2], vec![0.4, -0.3, 1.1, 0.2, -0.7, 0.9]).unwrap();
        let m = Model::new(vec![2], vec![Layer::Dense(Dense::new(w, Tensor::from_vec(vec![0.1, 0.0, -0.2]))), Layer::Relu], 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.3, -1.2]).unwrap();
        let (_, g) = oneshot_loss(&m, &x, &[0]).unwrap();
        for k in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (oneshot_loss(&m, &xp, &[0]).unwrap().0 - oneshot_loss(&m, &xm, &[0]).unwrap().0) / (2.0 * h);
            assert!((num - g.data()[k]).abs() < 1e-6, "{num} vs {}", g.data()[k]);
        }
    }
}
