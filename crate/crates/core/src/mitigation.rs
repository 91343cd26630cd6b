//! Accuracy recovery on faulty arrays: label-free batch-norm recalibration,
//! variation-aware training and sensing references for binarized partial sums.

use rand::seq::index::sample;

use crate::crossbar::analog::{layer_rows, sign_block_end, tile_currents};
use crate::crossbar::{apply_variation, faulty_run, polarities, AnalogOptions, BnPolicy, CrossbarProgram};
pub use crate::crossbar::ReferenceVector;
use crate::data::Dataset;
use crate::error::{LabError, Result};
use crate::nn::layers::nchw_to_rows;
use crate::nn::train::weight_multipliers;
use crate::nn::{Layer, Model, NoiseSpec, PassOptions, Sampler, TrainConfig};
use crate::tensor::Tensor;
use crate::testing::RankedTestSet;
use crate::{par, rng};

pub const VARIANCE_FLOOR: f64 = 1e-5;
const MAX_FRACTION: f64 = 0.01;
const TAG_CALIB: u64 = 71;
const TAG_REFERENCE: u64 = 72;

/// Unlabeled inputs used to re-estimate normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Tensor,
    /// Size relative to the training set.
    pub fraction: f64,
}

impl CalibrationSet {
    pub fn new(inputs: Tensor, train_size: usize) -> Result<Self> {
        let fraction = inputs.rows() as f64 / train_size.max(1) as f64;
        if fraction > MAX_FRACTION {
            return Err(LabError::Config(format!("calibration fraction {fraction} exceeds {MAX_FRACTION}")));
        }
        if inputs.rows() == 0 {
            return Err(LabError::Config("calibration set is empty".into()));
        }
        Ok(Self { inputs, fraction })
    }

    /// `fraction` of `train` (at least one sample): the top-ranked samples
    /// when a ranking is given, otherwise a uniform draw without replacement.
    pub fn select(train: &Dataset, fraction: f64, ranking: Option<&RankedTestSet>, seed: u64) -> Result<Self> {
        let n = ((train.len() as f64 * fraction).round() as usize).max(1);
        let idx: Vec<usize> = match ranking {
            Some(r) if r.indices.len() >= n => r.indices[..n].to_vec(),
            Some(r) => {
                return Err(LabError::Config(format!("ranking holds {} samples, {n} needed", r.indices.len())));
            }
            None => {
                let mut idx = sample(&mut rng::stream(seed, &[TAG_CALIB]), train.len(), n).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        Self::new(train.x.select_rows(&idx), train.len())
    }
}

/// Runs the calibration inputs through the faulty program with every
/// normalization layer using the statistics of that batch, and stores those
/// statistics as the running ones. Weights are untouched and no labels are
/// involved.
pub fn approx_bn_recalibrate(model: &Model, prog: &CrossbarProgram, calib: &CalibrationSet) -> Result<Model> {
    if calib.fraction > MAX_FRACTION {
        return Err(LabError::Config(format!("calibration fraction {} exceeds {MAX_FRACTION}", calib.fraction)));
    }
    if !model.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_))) {
        return Err(LabError::Config("model has no batch-norm layer to recalibrate".into()));
    }
    let opts = AnalogOptions { bn: BnPolicy::BatchStats, ..AnalogOptions::default() };
    let trace = faulty_run(model, prog, &calib.inputs, &opts)?;
    let mut out = model.clone();
    for (i, (mean, var)) in trace.norm_stats {
        let Layer::BatchNorm(bn) = &mut out.layers[i] else { continue };
        bn.running_mean = Tensor::from_vec(mean);
        let mut v = var;
        for (ch, x) in v.iter_mut().enumerate() {
            if *x < VARIANCE_FLOOR {
                log::warn!("layer {i} channel {ch}: observed variance {x:e}, floored at {VARIANCE_FLOOR:e}");
                *x = VARIANCE_FLOOR;
            }
        }
        bn.running_var = Tensor::from_vec(v);
    }
    Ok(out)
}

/// Weight perturbation applied to every training forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationPolicy {
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl VariationPolicy {
    /// Multipliers `exp(e)`, `e ~ N(0, σ²)`, for the given training batch;
    /// `None` when σ is zero.
    pub fn multipliers(&self, model: &Model, epoch: usize, batch: usize) -> Option<Vec<Option<Tensor>>> {
        weight_multipliers(model, &self.noise, self.seed, epoch, batch)
    }
}

/// The perturbation policy `train` applies for `cfg.noise_spec`.
pub fn variation_aware_loss_hook(cfg: &TrainConfig) -> Result<VariationPolicy> {
    let noise = cfg
        .noise_spec
        .ok_or_else(|| LabError::Config("variation-aware training needs a noise spec".into()))?;
    Ok(VariationPolicy { noise, seed: cfg.seed })
}

/// Threshold separating `currents` by `labels` (±1) under `sign(pol·(I − θ))`
/// with the fewest errors; among equally good splits, the one in the widest
/// gap, placed at its midpoint. A constant column gets its constant.
pub fn best_threshold(currents: &[f64], labels: &[f64], pol: f64) -> f64 {
    let mut pairs: Vec<(f64, f64)> = currents.iter().map(|&i| pol * i).zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = pairs.len();
    let (lo, hi) = (pairs[0].0, pairs[m - 1].0);
    if lo == hi {
        return pol * lo;
    }
    // split k: the first k values read as -1, the rest as +1
    let mut errors = pairs.iter().filter(|p| p.1 < 0.0).count();
    let mut best = (errors, 0.0, lo);
    for k in 1..=m {
        if pairs[k - 1].1 > 0.0 {
            errors += 1;
        } else {
            errors -= 1;
        }
        let (theta, gap) = if k == m {
            (hi + (hi - lo) * 1e-3, 0.0)
        } else if pairs[k - 1].0 < pairs[k].0 {
            ((pairs[k - 1].0 + pairs[k].0) / 2.0, pairs[k].0 - pairs[k - 1].0)
        } else {
            continue;
        };
        if errors < best.0 || (errors == best.0 && gap > best.1) {
            best = (errors, gap, theta);
        }
    }
    pol * best.2
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-column thresholds for binarized partial-sum sensing. For each of
/// `scenarios` variation samples (σ = `sigma`), every tile column feeding a
/// sign activation gets the split of its currents on `inputs` that best
/// reproduces the digital network's binarized activations; θ is the median
/// over scenarios. Columns of other layers keep θ = 0.
pub fn generate_reference(
    model: &Model,
    prog: &CrossbarProgram,
    inputs: &Tensor,
    scenarios: usize,
    sigma: f64,
    seed: u64,
) -> Result<ReferenceVector> {
    if scenarios == 0 {
        return Err(LabError::Config("reference generation needs at least one scenario".into()));
    }
    let opts = PassOptions { record: true, ..PassOptions::eval() };
    let trace = model.run(inputs, &opts, &mut Sampler::new(model.seed))?;
    let mut quiet = prog.clone();
    quiet.config.read_noise_sigma = 0.0;
    let tc = prog.config.tile_cols;
    let pol = polarities(model, prog);

    struct Block {
        map: usize,
        rows: Vec<f64>,
        m: usize,
        labels: Vec<f64>,
    }
    let mut blocks = Vec::new();
    for (k, lm) in prog.layers.iter().enumerate() {
        let Some(end) = sign_block_end(model, lm.layer) else { continue };
        let input = if lm.layer == 0 { inputs } else { &trace.outputs[lm.layer - 1] };
        let (rows, m) = layer_rows(&model.layers[lm.layer], input);
        let out = &trace.outputs[end];
        let labels = if out.shape().len() == 4 { nchw_to_rows(out) } else { out.data().to_vec() };
        blocks.push(Block { map: k, rows, m, labels });
    }

    let per_scenario: Vec<Vec<Vec<f64>>> = par::try_map_range(scenarios, |s| {
        let p = apply_variation(&quiet, sigma, rng::derive(seed, &[TAG_REFERENCE, s as u64]))?;
        let mut theta: Vec<Vec<f64>> = p.tiles.iter().map(|t| vec![0.0; t.cols]).collect();
        for blk in &blocks {
            let lm = &p.layers[blk.map];
            let cur = tile_currents(&p, lm, &blk.rows, blk.m, 0);
            for a in 0..lm.row_tiles {
                for b in 0..lm.col_tiles {
                    let ti = lm.tile_index(a, b);
                    let cols = p.tiles[ti].cols;
                    let c_t = &cur[a * lm.col_tiles + b];
                    for c in 0..cols {
                        let i: Vec<f64> = (0..blk.m).map(|r| c_t[r * cols + c]).collect();
                        let y: Vec<f64> = (0..blk.m).map(|r| blk.labels[r * lm.fan_out + b * tc + c]).collect();
                        theta[ti][c] = best_threshold(&i, &y, pol[ti][c]);
                    }
                }
            }
        }
        Ok::<_, LabError>(theta)
    })?;

    let theta = prog
        .tiles
        .iter()
        .enumerate()
        .map(|(ti, t)| (0..t.cols).map(|c| median(&mut per_scenario.iter().map(|s| s[ti][c]).collect::<Vec<_>>())).collect())
        .collect();
    Ok(ReferenceVector { theta, polarity: pol, scenario_count: scenarios })
}
