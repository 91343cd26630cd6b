use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::{CrossbarProgram, LayerMap, Sensing};
use crate::error::{LabError, Result};
use crate::nn::layers::{im2col, rows_to_nchw, sign, Cache, PassCtx};
use crate::nn::{Layer, Model, Sampler};
use crate::rng;
use crate::tensor::{matmul_nt, Tensor};

const TAG_READ: u64 = 33;

/// Which statistics the normalization layers use on the analog path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnPolicy {
    #[default]
    Running,
    /// Statistics of the batch being evaluated.
    BatchStats,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AnalogOptions {
    /// Seed of the read-noise streams.
    pub read_seed: u64,
    pub bn: BnPolicy,
    /// Keep every layer output in [`AnalogTrace::outputs`].
    pub record: bool,
}

#[derive(Debug, Clone)]
pub struct AnalogTrace {
    pub output: Tensor,
    /// Output of layer `i` at index `i` when recording. Layers folded into a
    /// binarized partial-sum block all show the block's sign output.
    pub outputs: Vec<Tensor>,
    /// Mean and biased variance seen by each normalization layer under
    /// [`BnPolicy::BatchStats`].
    pub norm_stats: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// Flattens a layer input into matmul rows: `[n, fan_in]` for dense layers,
/// image patches for convolutions.
pub(crate) fn layer_rows(layer: &Layer, x: &Tensor) -> (Vec<f64>, usize) {
    match layer {
        Layer::Conv2d(c) => {
            let s = x.shape();
            (im2col(x, c.kernel()), s[0] * s[2] * s[3])
        }
        _ => (x.data().to_vec(), x.rows()),
    }
}

fn rows_to_output(layer: &Layer, rows: Vec<f64>, x: &Tensor) -> Result<Tensor> {
    match layer {
        Layer::Conv2d(c) => {
            let s = x.shape();
            Ok(rows_to_nchw(&rows, s[0], c.out_channels(), s[2], s[3]))
        }
        Layer::Dense(d) => Tensor::new(vec![x.rows(), d.fan_out()], rows),
        _ => unreachable!("only matmul layers are mapped"),
    }
}

/// Raw column currents of every tile of a layer, `[m, tile.cols]` each,
/// in tile order. Read noise is applied when the config asks for it.
pub(crate) fn tile_currents(prog: &CrossbarProgram, lm: &LayerMap, x: &[f64], m: usize, read_seed: u64) -> Vec<Vec<f64>> {
    let tr = prog.config.tile_rows;
    let sigma = prog.config.read_noise_sigma;
    let mut out = Vec::with_capacity(lm.row_tiles * lm.col_tiles);
    for a in 0..lm.row_tiles {
        let t0 = &prog.tiles[lm.tile_index(a, 0)];
        let rows = t0.rows;
        let mut xa = Vec::with_capacity(m * rows);
        for r in 0..m {
            xa.extend_from_slice(&x[r * lm.fan_in + a * tr..r * lm.fan_in + a * tr + rows]);
        }
        for b in 0..lm.col_tiles {
            let ti = lm.tile_index(a, b);
            let t = &prog.tiles[ti];
            // [cols, rows] so that the product is x · dᵀ
            let mut d = vec![0.0; t.cols * t.rows];
            for r in 0..t.rows {
                for c in 0..t.cols {
                    d[c * t.rows + r] = t.g_plus[r * t.cols + c] - t.g_minus[r * t.cols + c];
                }
            }
            let mut cur = matmul_nt(&xa, &d, m, t.rows, t.cols);
            if sigma > 0.0 {
                for (r, row) in cur.chunks_mut(t.cols).enumerate() {
                    let mut g = rng::stream(read_seed, &[TAG_READ, lm.layer as u64, ti as u64, r as u64]);
                    for v in row.iter_mut() {
                        let e: f64 = StandardNormal.sample(&mut g);
                        *v *= 1.0 + sigma * e;
                    }
                }
            }
            out.push(cur);
        }
    }
    out
}

fn adc(i: f64, range: f64, bits: u32) -> f64 {
    if range <= 0.0 {
        return 0.0;
    }
    let half = ((1u64 << (bits - 1)) as f64 - 1.0).max(1.0);
    (i / range * half).round().clamp(-half, half) * range / half
}

/// Digital column sums `[m, fan_out]` (without bias) from tile currents.
fn linear_readout(prog: &CrossbarProgram, lm: &LayerMap, cur: &[Vec<f64>], m: usize) -> Result<Vec<f64>> {
    let tc = prog.config.tile_cols;
    let k = lm.scale / prog.config.g_range();
    let bits = match prog.config.sensing {
        Sensing::Adc { bits } => Some(bits),
        _ => None,
    };
    let ranges = match (bits, &prog.adc_range) {
        (Some(_), None) => {
            return Err(LabError::Config("ADC sensing needs calibrated ranges (calibrate_adc)".into()));
        }
        (_, r) => r.as_ref(),
    };
    let mut out = vec![0.0; m * lm.fan_out];
    for a in 0..lm.row_tiles {
        for b in 0..lm.col_tiles {
            let ti = lm.tile_index(a, b);
            let cols = prog.tiles[ti].cols;
            let c_t = &cur[a * lm.col_tiles + b];
            for r in 0..m {
                for c in 0..cols {
                    let mut i = c_t[r * cols + c];
                    if let (Some(bits), Some(rg)) = (bits, ranges) {
                        i = adc(i, rg[ti][c], bits);
                    }
                    out[r * lm.fan_out + b * tc + c] += k * i;
                }
            }
        }
    }
    Ok(out)
}

/// `sign(Σ_tiles sign(polarity · (I - θ)))` per output, with `sign(0) = +1`.
fn binarized_readout(prog: &CrossbarProgram, lm: &LayerMap, cur: &[Vec<f64>], m: usize) -> Result<Vec<f64>> {
    let reference = prog.reference.as_ref().ok_or(LabError::MissingReference)?;
    let tc = prog.config.tile_cols;
    let mut votes = vec![0.0; m * lm.fan_out];
    for a in 0..lm.row_tiles {
        for b in 0..lm.col_tiles {
            let ti = lm.tile_index(a, b);
            let cols = prog.tiles[ti].cols;
            let (theta, pol) = (&reference.theta[ti], &reference.polarity[ti]);
            let c_t = &cur[a * lm.col_tiles + b];
            for r in 0..m {
                for c in 0..cols {
                    votes[r * lm.fan_out + b * tc + c] += sign(pol[c] * (c_t[r * cols + c] - theta[c]));
                }
            }
        }
    }
    Ok(votes.into_iter().map(sign).collect())
}

/// One matmul on the array: `x` is `[m, fan_in]`, the result `[m, fan_out]`
/// in weight units (no bias). In binarized partial-sum mode the result is
/// the `±1` vote of the tiles.
pub fn analog_mvm(prog: &CrossbarProgram, layer: usize, x: &Tensor, read_seed: u64) -> Result<Tensor> {
    let lm = prog
        .layer_map(layer)
        .ok_or_else(|| LabError::Config(format!("layer {layer} is not mapped")))?;
    if x.row_len() != lm.fan_in {
        return Err(LabError::Shape { layer, detail: format!("expected {} inputs per row, got {:?}", lm.fan_in, x.shape()) });
    }
    let m = x.rows();
    let cur = tile_currents(prog, lm, x.data(), m, read_seed);
    let out = match prog.config.sensing {
        Sensing::BinarizedPartialSum => binarized_readout(prog, lm, &cur, m)?,
        _ => linear_readout(prog, lm, &cur, m)?,
    };
    Tensor::new(vec![m, lm.fan_out], out)
}

/// If matmul layer `i` is followed by normalization layers and then a sign
/// activation, the index of that sign layer.
pub(crate) fn sign_block_end(model: &Model, i: usize) -> Option<usize> {
    let mut j = i + 1;
    while matches!(model.layers.get(j), Some(Layer::BatchNorm(b)) if b.affine_dropout.is_none()) {
        j += 1;
    }
    matches!(model.layers.get(j), Some(Layer::Sign)).then_some(j)
}

fn check_mapping<'p>(model: &Model, prog: &'p CrossbarProgram, i: usize) -> Result<&'p LayerMap> {
    let lm = prog
        .layer_map(i)
        .ok_or_else(|| LabError::Config(format!("layer {i} has no crossbar mapping")))?;
    let ok = match &model.layers[i] {
        Layer::Dense(d) => d.fan_in() == lm.fan_in && d.fan_out() == lm.fan_out,
        Layer::Conv2d(c) => c.fan_in() == lm.fan_in && c.out_channels() == lm.fan_out,
        _ => false,
    };
    if !ok {
        return Err(LabError::Shape { layer: i, detail: "crossbar mapping does not match the model".into() });
    }
    Ok(lm)
}

fn run_inner(
    model: &Model,
    prog: &CrossbarProgram,
    x: &Tensor,
    opts: &AnalogOptions,
    mut ranges: Option<&mut Vec<Vec<f64>>>,
) -> Result<AnalogTrace> {
    model.check_input(x)?;
    let mut sampler = Sampler::new(model.seed);
    let mut cur = x.clone();
    let mut outputs = Vec::new();
    let mut norm_stats = BTreeMap::new();
    let bps = prog.config.sensing == Sensing::BinarizedPartialSum && ranges.is_none();
    let mut i = 0;
    while i < model.layers.len() {
        let layer = &model.layers[i];
        if layer.is_matmul() {
            let lm = check_mapping(model, prog, i)?;
            let (rows, m) = layer_rows(layer, &cur);
            let currents = tile_currents(prog, lm, &rows, m, opts.read_seed);
            if let Some(rg) = ranges.as_deref_mut() {
                for (k, c_t) in currents.iter().enumerate() {
                    let ti = lm.first_tile + k;
                    let cols = prog.tiles[ti].cols;
                    for (j, v) in c_t.iter().enumerate() {
                        let e = &mut rg[ti][j % cols];
                        *e = e.max(v.abs());
                    }
                }
            }
            if let (true, Some(end)) = (bps, sign_block_end(model, i)) {
                let y = rows_to_output(layer, binarized_readout(prog, lm, &currents, m)?, &cur)?;
                if opts.record {
                    outputs.extend(std::iter::repeat(y.clone()).take(end + 1 - i));
                }
                cur = y;
                i = end + 1;
                continue;
            }
            let mut lin = linear_readout(prog, lm, &currents, m)?;
            let bias = match layer {
                Layer::Dense(d) => d.bias.data(),
                Layer::Conv2d(c) => c.bias.data(),
                _ => unreachable!(),
            };
            for row in lin.chunks_mut(lm.fan_out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
            cur = rows_to_output(layer, lin, &cur)?;
        } else {
            let mut ctx = PassCtx {
                batch_stats: opts.bn == BnPolicy::BatchStats,
                stochastic: false,
                sampler: &mut sampler,
                weight_multiplier: None,
            };
            let (y, cache) = layer.forward(&cur, &mut ctx)?;
            if let Cache::Norm { batch_stats: true, mean, var, .. } = cache {
                norm_stats.insert(i, (mean, var));
            }
            cur = y;
        }
        if opts.record {
            outputs.push(cur.clone());
        }
        i += 1;
    }
    Ok(AnalogTrace { output: cur, outputs, norm_stats })
}

/// Evaluates the model with every dense and convolutional layer executed on
/// the crossbar; the other layers run digitally in evaluation mode.
pub fn faulty_run(model: &Model, prog: &CrossbarProgram, x: &Tensor, opts: &AnalogOptions) -> Result<AnalogTrace> {
    run_inner(model, prog, x, opts, None)
}

pub fn faulty_forward(model: &Model, prog: &CrossbarProgram, x: &Tensor) -> Result<Tensor> {
    Ok(faulty_run(model, prog, x, &AnalogOptions::default())?.output)
}

/// Sets each column's ADC full scale to the largest current magnitude seen
/// while `inputs` pass through the program at full precision.
pub fn calibrate_adc(model: &Model, prog: &CrossbarProgram, inputs: &Tensor) -> Result<CrossbarProgram> {
    let mut ideal = prog.clone();
    ideal.config.sensing = Sensing::Ideal;
    ideal.config.read_noise_sigma = 0.0;
    let mut ranges: Vec<Vec<f64>> = prog.tiles.iter().map(|t| vec![0.0; t.cols]).collect();
    run_inner(model, &ideal, inputs, &AnalogOptions::default(), Some(&mut ranges))?;
    Ok(CrossbarProgram { adc_range: Some(ranges), ..prog.clone() })
}
