//! Memristive crossbar model: weights on differential conductance pairs,
//! faults and variation on the cells, and analog matrix-vector products.

pub(crate) mod analog;
mod faults;

pub use analog::{analog_mvm, calibrate_adc, faulty_forward, faulty_run, AnalogOptions, AnalogTrace, BnPolicy};
pub use faults::{apply_fault_map, apply_tile_gain, apply_variation, inject_faults, CellId, FaultKind, FaultMap, FaultScenario};

use crate::error::{LabError, Result};
use crate::nn::{Layer, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sensing {
    /// Currents are read at full precision.
    Ideal,
    /// Symmetric uniform ADC per tile column.
    Adc { bits: u32 },
    /// Each tile column is compared against a reference and only its sign
    /// leaves the array; the signs of all row tiles are summed digitally.
    BinarizedPartialSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub g_on: f64,
    pub g_off: f64,
    /// Number of programmable conductance states per cell.
    pub levels: usize,
    pub sensing: Sensing,
    /// Relative (log-normal) conductance spread used by scenario generators.
    pub variation_sigma: f64,
    /// Relative standard deviation of each column read.
    pub read_noise_sigma: f64,
    /// Fixed weight range shared by all layers. `None` scales every layer by
    /// its own largest magnitude.
    pub w_max: Option<f64>,
}

impl Default for CrossbarConfig {
    fn default() -> Self {
        Self {
            tile_rows: 64,
            tile_cols: 64,
            g_on: 100.0,
            g_off: 1.0,
            levels: 256,
            sensing: Sensing::Ideal,
            variation_sigma: 0.0,
            read_noise_sigma: 0.0,
            w_max: None,
        }
    }
}

impl CrossbarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_on > self.g_off && self.g_off > 0.0) {
            return Err(LabError::Config(format!("need g_on > g_off > 0, got {} and {}", self.g_on, self.g_off)));
        }
        if self.tile_rows == 0 || self.tile_cols == 0 {
            return Err(LabError::Config("tile dimensions must be at least 1".into()));
        }
        if self.levels < 2 {
            return Err(LabError::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if let Sensing::Adc { bits } = self.sensing {
            if bits == 0 || bits > 52 {
                return Err(LabError::Config(format!("adc_bits must be in 1..=52, got {bits}")));
            }
        }
        if self.variation_sigma < 0.0 || self.read_noise_sigma < 0.0 {
            return Err(LabError::Config("sigmas must be non-negative".into()));
        }
        if let Some(w) = self.w_max {
            if w <= 0.0 {
                return Err(LabError::Config(format!("w_max must be positive, got {w}")));
            }
        }
        Ok(())
    }

    pub fn g_range(&self) -> f64 {
        self.g_on - self.g_off
    }
}

/// One array. Rows carry inputs, columns carry outputs; `g_plus[r * cols + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub g_plus: Vec<f64>,
    pub g_minus: Vec<f64>,
}

/// Placement of one matmul layer on a grid of tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap {
    /// Index of the layer in the model.
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Weight value represented by a full `g_on - g_off` difference.
    pub scale: f64,
    pub row_tiles: usize,
    pub col_tiles: usize,
    pub first_tile: usize,
}

impl LayerMap {
    pub fn tile_index(&self, a: usize, b: usize) -> usize {
        self.first_tile + a * self.col_tiles + b
    }
}

/// Per-column thresholds for binarized partial-sum sensing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceVector {
    /// One threshold per column of every tile.
    pub theta: Vec<Vec<f64>>,
    /// `+1` or `-1` per column: the sign of the normalization gain that
    /// follows the matmul, so that `polarity * (I - theta) >= 0` means `+1`.
    pub polarity: Vec<Vec<f64>>,
    pub scenario_count: usize,
}

impl ReferenceVector {
    /// All thresholds at zero, polarity taken from the model.
    pub fn zero(model: &Model, prog: &CrossbarProgram) -> Self {
        let theta = prog.tiles.iter().map(|t| vec![0.0; t.cols]).collect();
        Self { theta, polarity: polarities(model, prog), scenario_count: 0 }
    }

    /// `reference v1`, the scenario count, then one `theta` and one
    /// `polarity` line per tile.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = format!("reference v1\nscenarios {}\n", self.scenario_count);
        for (t, (th, po)) in self.theta.iter().zip(&self.polarity).enumerate() {
            s += &format!("theta {t} {}\npolarity {t} {}\n", join(th), join(po));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, detail: String| LabError::Parse { line, detail };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        match lines.next() {
            Some((_, "reference v1")) => {}
            _ => return Err(err(1, "expected header \"reference v1\"".into())),
        }
        let mut out = Self { theta: Vec::new(), polarity: Vec::new(), scenario_count: 0 };
        for (no, line) in lines {
            let mut it = line.split_whitespace();
            let key = it.next().unwrap_or_default();
            if key == "scenarios" {
                out.scenario_count = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(no, "bad scenario count".into()))?;
                continue;
            }
            let target = match key {
                "theta" => &mut out.theta,
                "polarity" => &mut out.polarity,
                other => return Err(err(no, format!("unknown field {other:?}"))),
            };
            let tile: usize = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| err(no, "bad tile index".into()))?;
            if tile != target.len() {
                return Err(err(no, format!("expected tile {}, got {tile}", target.len())));
            }
            let values = it.map(str::parse).collect::<Result<Vec<f64>, _>>().map_err(|e| err(no, e.to_string()))?;
            target.push(values);
        }
        let shapes = |v: &[Vec<f64>]| v.iter().map(Vec::len).collect::<Vec<_>>();
        if shapes(&out.theta) != shapes(&out.polarity) {
            return Err(err(0, "theta and polarity shapes differ".into()));
        }
        Ok(out)
    }
}

/// Sign of the normalization gain following each mapped column (`+1` when
/// no normalization follows).
pub fn polarities(model: &Model, prog: &CrossbarProgram) -> Vec<Vec<f64>> {
    let mut pol: Vec<Vec<f64>> = prog.tiles.iter().map(|t| vec![1.0; t.cols]).collect();
    for lm in &prog.layers {
        if let Some(Layer::BatchNorm(bn)) = model.layers.get(lm.layer + 1) {
            for a in 0..lm.row_tiles {
                for b in 0..lm.col_tiles {
                    let t = lm.tile_index(a, b);
                    for (c, p) in pol[t].iter_mut().enumerate() {
                        let ch = b * prog.config.tile_cols + c;
                        if bn.gamma.data()[ch] < 0.0 {
                            *p = -1.0;
                        }
                    }
                }
            }
        }
    }
    pol
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarProgram {
    pub config: CrossbarConfig,
    pub tiles: Vec<Tile>,
    pub layers: Vec<LayerMap>,
    /// Defects applied to `tiles`.
    pub faults: FaultMap,
    /// ADC full-scale current per column of every tile, from a fault-free
    /// calibration pass.
    pub adc_range: Option<Vec<Vec<f64>>>,
    pub reference: Option<ReferenceVector>,
}

impl CrossbarProgram {
    pub fn cell_count(&self) -> usize {
        self.tiles.iter().map(|t| 2 * t.rows * t.cols).sum()
    }

    pub fn layer_map(&self, layer: usize) -> Option<&LayerMap> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Every conductance, `G+` then `G-` for each tile.
    pub fn conductances(&self) -> impl Iterator<Item = f64> + '_ {
        self.tiles.iter().flat_map(|t| t.g_plus.iter().chain(&t.g_minus).copied())
    }

    /// Digital weights `[fan_out, fan_in]` that the conductances of mapped
    /// layer `layer` represent.
    pub fn read_back(&self, layer: usize) -> Result<Tensor> {
        let lm = self
            .layer_map(layer)
            .ok_or_else(|| LabError::Config(format!("layer {layer} is not mapped")))?;
        let (tr, tc) = (self.config.tile_rows, self.config.tile_cols);
        let k = lm.scale / self.config.g_range();
        let mut w = Tensor::zeros(&[lm.fan_out, lm.fan_in]);
        for a in 0..lm.row_tiles {
            for b in 0..lm.col_tiles {
                let t = &self.tiles[lm.tile_index(a, b)];
                for r in 0..t.rows {
                    for c in 0..t.cols {
                        let i = r * t.cols + c;
                        w.data_mut()[(b * tc + c) * lm.fan_in + a * tr + r] = k * (t.g_plus[i] - t.g_minus[i]);
                    }
                }
            }
        }
        Ok(w)
    }
}

/// The matmul weights of a layer as `[fan_out, fan_in]`.
pub fn matmul_weights(layer: &Layer) -> Option<Tensor> {
    match layer {
        Layer::Dense(d) => Some(d.effective_weight()),
        Layer::Conv2d(c) => {
            let w = c.effective_weight();
            let oc = c.out_channels();
            w.reshape(&[oc, c.fan_in()]).ok()
        }
        _ => None,
    }
}

fn quantize(u: f64, levels: usize) -> f64 {
    let steps = (levels - 1) as f64;
    (u.abs() * steps).round() / steps
}

/// Maps every dense and convolutional layer onto tiles. Each weight becomes
/// a pair: the magnitude of a positive weight goes to `G+`, of a negative one
/// to `G-`, quantized to `levels` states; the other cell stays at `g_off`.
pub fn map_weights(model: &Model, cfg: &CrossbarConfig) -> Result<CrossbarProgram> {
    cfg.validate()?;
    let (tr, tc) = (cfg.tile_rows, cfg.tile_cols);
    let mut tiles = Vec::new();
    let mut layers = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let Some(w) = matmul_weights(layer) else { continue };
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        let peak = w.max_abs();
        let scale = match cfg.w_max {
            Some(limit) => {
                if peak > limit {
                    return Err(LabError::WeightOutOfRange { layer: li, value: peak, w_max: limit });
                }
                limit
            }
            None if peak > 0.0 => peak,
            None => 1.0,
        };
        let row_tiles = fan_in.div_ceil(tr);
        let col_tiles = fan_out.div_ceil(tc);
        let first_tile = tiles.len();
        for a in 0..row_tiles {
            for b in 0..col_tiles {
                let rows = tr.min(fan_in - a * tr);
                let cols = tc.min(fan_out - b * tc);
                let mut t = Tile { rows, cols, g_plus: vec![cfg.g_off; rows * cols], g_minus: vec![cfg.g_off; rows * cols] };
                for r in 0..rows {
                    for c in 0..cols {
                        let v = w.data()[(b * tc + c) * fan_in + a * tr + r] / scale;
                        let g = cfg.g_off + quantize(v, cfg.levels) * cfg.g_range();
                        if v > 0.0 {
                            t.g_plus[r * cols + c] = g;
                        } else if v < 0.0 {
                            t.g_minus[r * cols + c] = g;
                        }
                    }
                }
                tiles.push(t);
            }
        }
        layers.push(LayerMap { layer: li, fan_in, fan_out, scale, row_tiles, col_tiles, first_tile });
    }
    Ok(CrossbarProgram {
        config: cfg.clone(),
        tiles,
        layers,
        faults: FaultMap::default(),
        adc_range: None,
        reference: None,
    })
}
