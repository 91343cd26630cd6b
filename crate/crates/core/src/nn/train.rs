//! Minibatch training loop with SGD/Adam, optional weight-noise injection,
//! a KL term for variational scale layers, and an auxiliary regression head.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::layers::{softmax_rows, Layer};
use crate::nn::loss::{one_hot, Loss};
use crate::nn::model::{Model, PassOptions};
use crate::nn::sampler::Sampler;
use crate::rng;
use crate::tensor::Tensor;

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Multiplicative lognormal weight perturbation used during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
}

/// Extra outputs appended after the class logits, regressed onto `target`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxObjective {
    pub target: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub binary_weights: bool,
    pub noise_spec: Option<NoiseSpec>,
    /// KL weight for variational scale layers; `None` means `1 / batches`.
    pub kl_beta: Option<f64>,
    pub aux: Option<AuxObjective>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            binary_weights: false,
            noise_spec: None,
            kl_beta: None,
            aux: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(LabError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be >= 1".into()));
        }
        if let Some(n) = self.noise_spec {
            if !(n.sigma >= 0.0) {
                return Err(LabError::Config("noise sigma must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Per training sample, the sum over epochs of `‖softmax(z) − onehot(y)‖₂`.
    pub sample_scores: Vec<f64>,
}

/// Lognormal multipliers for every matmul layer of `model`, or `None` when
/// the noise is off. Draws are keyed by `(seed, epoch, batch, layer)`.
pub fn weight_multipliers(model: &Model, noise: &NoiseSpec, seed: u64, epoch: usize, batch: usize) -> Option<Vec<Option<Tensor>>> {
    if noise.sigma == 0.0 {
        return None;
    }
    Some(
        model
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let shape = match l {
                    Layer::Dense(d) => d.weight.shape().to_vec(),
                    Layer::Conv2d(c) => c.weight.shape().to_vec(),
                    _ => return None,
                };
                let mut r = rng::stream(seed, &[TAG_NOISE, epoch as u64, batch as u64, i as u64]);
                let mut t = Tensor::zeros(&shape);
                t.data_mut().iter_mut().for_each(|v| {
                    let e: f64 = r.sample(StandardNormal);
                    *v = (noise.sigma * e).exp();
                });
                Some(t)
            })
            .collect(),
    )
}

struct AdamState {
    m: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    t: i32,
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(LabError::Config("training set is empty".into()));
    }
    let classes = data.classes;
    if let Some(&bad) = data.y.iter().find(|&&y| y >= classes) {
        return Err(LabError::Config(format!("label {bad} out of range for {classes} classes")));
    }
    let aux_len = cfg.aux.as_ref().map_or(0, |a| a.target.len());
    if model.output_dim() != classes + aux_len {
        return Err(LabError::Config(format!(
            "model has {} outputs, expected {classes} classes + {aux_len} auxiliary",
            model.output_dim()
        )));
    }
    let mut log = TrainLog { epochs: Vec::new(), sample_scores: vec![0.0; data.len()] };
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if cfg.binary_weights {
        for l in &mut model.layers {
            match l {
                Layer::Dense(d) => d.binary = true,
                Layer::Conv2d(c) => c.binary = true,
                _ => {}
            }
        }
    }
    let n = data.len();
    let batches = n.div_ceil(cfg.batch_size);
    let beta = cfg.kl_beta.unwrap_or(1.0 / batches as f64);
    let mut adam = AdamState {
        m: model.layers.iter().map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect()).collect(),
        v: model.layers.iter().map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect()).collect(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_finite = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.x.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.y[i]).collect();
            let mults = cfg.noise_spec.as_ref().and_then(|ns| weight_multipliers(model, ns, cfg.seed, epoch, b));
            let opts = PassOptions { weight_multipliers: mults.as_deref(), ..PassOptions::train() };
            let mut sampler = Sampler::new(rng::derive(cfg.seed, &[TAG_DROPOUT, epoch as u64, b as u64]));
            let trace = model.run(&x, &opts, &mut sampler)?;
            let (mut value, grad) = batch_objective(&trace.output, &labels, classes, cfg.aux.as_ref())?;

            let task_probs = task_softmax(&trace.output, classes);
            for (r, (&i, &y)) in idx.iter().zip(&labels).enumerate() {
                let row = &task_probs[r * classes..(r + 1) * classes];
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| (p - if c == y { 1.0 } else { 0.0 }).powi(2))
                    .sum::<f64>()
                    .sqrt();
                log.sample_scores[i] += s;
                if argmax(row) == y {
                    correct += 1;
                }
            }

            let mut grads = model.backprop(&trace, grad, &BTreeMap::new())?;
            value += add_kl_terms(model, &mut grads.params, beta);
            if !value.is_finite() {
                return Err(LabError::Diverged { last_finite_epoch: last_finite });
            }
            loss_sum += value * idx.len() as f64;
            model.update_running_stats(&trace);
            step(model, &grads.params, cfg, &mut adam);
        }
        last_finite = Some(epoch);
        log.epochs.push(EpochLog { loss: loss_sum / n as f64, accuracy: correct as f64 / n as f64 });
    }
    Ok(log)
}

/// Task loss (cross-entropy on the class logits) plus the optional auxiliary
/// squared-error term.
pub fn batch_objective(out: &Tensor, labels: &[usize], classes: usize, aux: Option<&AuxObjective>) -> Result<(f64, Tensor)> {
    let n = out.rows();
    let width = out.row_len();
    match aux {
        None => Loss::CrossEntropy.evaluate(out, &one_hot(labels, classes)),
        Some(a) => {
            let f = a.target.len();
            let mut logits = Vec::with_capacity(n * classes);
            for i in 0..n {
                logits.extend_from_slice(&out.row(i)[..classes]);
            }
            let logits = Tensor::new(vec![n, classes], logits)?;
            let (ce, gce) = Loss::CrossEntropy.evaluate(&logits, &one_hot(labels, classes))?;
            let mut grad = Tensor::zeros(&[n, width]);
            let mut mse = 0.0;
            for i in 0..n {
                let row = out.row(i);
                let g = &mut grad.data_mut()[i * width..(i + 1) * width];
                g[..classes].copy_from_slice(gce.row(i));
                for j in 0..f {
                    let d = row[classes + j] - a.target[j];
                    mse += d * d;
                    g[classes + j] = a.lambda * 2.0 * d / (f * n) as f64;
                }
            }
            Ok((ce + a.lambda * mse / (f * n) as f64, grad))
        }
    }
}

fn task_softmax(out: &Tensor, classes: usize) -> Vec<f64> {
    let n = out.rows();
    let mut logits = Vec::with_capacity(n * classes);
    for i in 0..n {
        logits.extend_from_slice(&out.row(i)[..classes]);
    }
    softmax_rows(&logits, classes)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adds `beta · KL` gradients of every variational scale layer; returns the
/// weighted KL value.
fn add_kl_terms(model: &Model, grads: &mut [Vec<Tensor>], beta: f64) -> f64 {
    let mut total = 0.0;
    for (l, g) in model.layers.iter().zip(grads.iter_mut()) {
        if let Layer::ScaleVi(v) = l {
            let (kl, gmu, grho) = crate::bayesian::scale_vi_kl(v);
            total += beta * kl;
            g[0].data_mut().iter_mut().zip(&gmu).for_each(|(a, b)| *a += beta * b);
            g[1].data_mut().iter_mut().zip(&grho).for_each(|(a, b)| *a += beta * b);
        }
    }
    total
}

fn step(model: &mut Model, grads: &[Vec<Tensor>], cfg: &TrainConfig, adam: &mut AdamState) {
    adam.t += 1;
    let lr = cfg.learning_rate;
    for (li, layer) in model.layers.iter_mut().enumerate() {
        let binary = matches!(layer, Layer::Dense(d) if d.binary) || matches!(layer, Layer::Conv2d(c) if c.binary);
        for (pi, p) in layer.params_mut().into_iter().enumerate() {
            let g = grads[li][pi].data();
            match cfg.optimizer {
                Optimizer::Sgd => p.data_mut().iter_mut().zip(g).for_each(|(w, gv)| *w -= lr * gv),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let m = &mut adam.m[li][pi];
                    let v = &mut adam.v[li][pi];
                    let c1 = 1.0 - beta1.powi(adam.t);
                    let c2 = 1.0 - beta2.powi(adam.t);
                    for (k, w) in p.data_mut().iter_mut().enumerate() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
            // latent binary weights live in [-1, 1]
            if binary && pi == 0 {
                p.data_mut().iter_mut().for_each(|w| *w = w.clamp(-1.0, 1.0));
            }
        }
    }
}

/// Fraction of `data` classified correctly by the first `data.classes` outputs.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let out = model.infer(&data.x)?;
    Ok(accuracy_from_logits(&out, &data.y, data.classes))
}

pub fn accuracy_from_logits(out: &Tensor, labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = (0..out.rows())
        .filter(|&i| argmax(&out.row(i)[..classes]) == labels[i])
        .count();
    correct as f64 / labels.len() as f64
}
