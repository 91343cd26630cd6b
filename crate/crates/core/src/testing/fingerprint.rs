//! Concurrent self-test: extra output units trained to emit a constant ±1
//! code on every input, checked alongside each inference.

use rand::Rng;

use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::train::AuxObjective;
use crate::nn::{accuracy, build, train, ArchSpec, Model, TrainConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FingerprintSpec {
    /// Number of auxiliary units.
    pub width: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for FingerprintSpec {
    fn default() -> Self {
        Self { width: 8, lambda: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub f_target: Vec<f64>,
    pub lambda: f64,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct FingerprintRun {
    pub model: Model,
    pub fingerprint: Fingerprint,
    /// Task accuracy on the validation set.
    pub accuracy: f64,
    /// Same architecture and training without the auxiliary units.
    pub baseline_accuracy: f64,
}

const TAG_TARGET: u64 = 61;

/// Seeded Rademacher code.
pub fn fingerprint_target(width: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[TAG_TARGET]);
    (0..width).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// The auxiliary tail of every output row.
pub fn aux_outputs(out: &Tensor, classes: usize) -> Vec<Vec<f64>> {
    (0..out.rows()).map(|i| out.row(i)[classes..].to_vec()).collect()
}

pub fn fingerprint_distance(aux: &[f64], target: &[f64]) -> f64 {
    aux.iter().zip(target).fold(0.0, |m, (a, t)| m.max((a - t).abs()))
}

/// Passes when every auxiliary output is within `tol` of its target.
pub fn check_fingerprint(aux: &[f64], fp: &Fingerprint) -> bool {
    aux.len() == fp.f_target.len() && fingerprint_distance(aux, &fp.f_target) <= fp.tol
}

/// Trains the task network with `width` extra outputs regressed onto a fixed
/// code, and the same network without them as the accuracy baseline. The
/// tolerance is 1.5 times the worst distance on `val`.
pub fn train_with_fingerprint(
    spec: &ArchSpec,
    fp: &FingerprintSpec,
    train_set: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<FingerprintRun> {
    if !(fp.lambda > 0.0) {
        return Err(LabError::Config("fingerprint lambda must be positive".into()));
    }
    if fp.width < 4 {
        return Err(LabError::Config(format!("fingerprint needs at least 4 units, got {}", fp.width)));
    }
    let base_spec = ArchSpec { aux_outputs: 0, ..spec.clone() };
    let mut baseline = build(&base_spec, cfg.seed)?;
    train(&mut baseline, train_set, cfg)?;
    let baseline_accuracy = accuracy(&baseline, val)?;

    let target = fingerprint_target(fp.width, fp.seed);
    let fp_spec = ArchSpec { aux_outputs: fp.width, ..spec.clone() };
    let mut model = build(&fp_spec, cfg.seed)?;
    let fp_cfg = TrainConfig { aux: Some(AuxObjective { target: target.clone(), lambda: fp.lambda }), ..cfg.clone() };
    train(&mut model, train_set, &fp_cfg)?;
    let acc = accuracy(&model, val)?;
    let gap = (baseline_accuracy - acc) * 100.0;
    if gap > 3.0 {
        return Err(LabError::FingerprintCapacity { gap });
    }
    let out = model.infer(&val.x)?;
    let worst = aux_outputs(&out, val.classes)
        .iter()
        .map(|a| fingerprint_distance(a, &target))
        .fold(0.0, f64::max);
    let tol = (1.5 * worst).max(1e-9);
    if tol >= 2.0 {
        return Err(LabError::Config(format!("fingerprint tolerance {tol} does not separate the code from its negation")));
    }
    Ok(FingerprintRun {
        model,
        fingerprint: Fingerprint { f_target: target, lambda: fp.lambda, tol },
        accuracy: acc,
        baseline_accuracy,
    })
}
