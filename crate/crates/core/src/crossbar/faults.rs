use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CrossbarProgram, Tile};
use crate::error::{LabError, Result};
use crate::{par, rng};

const TAG_FAULTS: u64 = 31;
const TAG_VARIATION: u64 = 32;
const TAG_TILE_GAIN: u64 = 33;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultKind {
    StuckOn,
    StuckOff,
    /// Conductance multiplied by `r` in `(0, 1]` (never below `g_off`).
    Drift(f64),
}

impl FaultKind {
    pub fn is_stuck(self) -> bool {
        matches!(self, FaultKind::StuckOn | FaultKind::StuckOff)
    }
}

/// A physical cell. Column `2j` is the `G+` cell of logical column `j`,
/// column `2j + 1` its `G-` partner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId {
    pub tile: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultMap {
    pub entries: BTreeMap<CellId, FaultKind>,
    pub seed: u64,
}

impl FaultMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, pred: impl Fn(FaultKind) -> bool) -> usize {
        self.entries.values().filter(|&&k| pred(k)).count()
    }

    /// `tile,row,col,kind[,factor]` lines after a `# seed=` header.
    pub fn to_text(&self) -> String {
        let mut s = format!("# faultmap v1\n# seed={}\n", self.seed);
        for (c, k) in &self.entries {
            let _ = match k {
                FaultKind::StuckOn => writeln!(s, "{},{},{},stuck_on", c.tile, c.row, c.col),
                FaultKind::StuckOff => writeln!(s, "{},{},{},stuck_off", c.tile, c.row, c.col),
                FaultKind::Drift(r) => writeln!(s, "{},{},{},drift,{r:?}", c.tile, c.row, c.col),
            };
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = FaultMap::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    map.seed = v.parse().map_err(|e| LabError::Parse { line: lineno, detail: format!("seed: {e}") })?;
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() < 4 {
                return Err(LabError::Parse { line: lineno, detail: format!("expected tile,row,col,kind, got {line:?}") });
            }
            let num = |s: &str, what: &str| -> Result<usize> {
                s.parse().map_err(|e| LabError::Parse { line: lineno, detail: format!("{what}: {e}") })
            };
            let cell = CellId { tile: num(f[0], "tile")?, row: num(f[1], "row")?, col: num(f[2], "col")? };
            let kind = match (f[3], f.len()) {
                ("stuck_on", 4) => FaultKind::StuckOn,
                ("stuck_off", 4) => FaultKind::StuckOff,
                ("drift", 5) => {
                    let r: f64 = f[4].parse().map_err(|e| LabError::Parse { line: lineno, detail: format!("factor: {e}") })?;
                    if !(r > 0.0 && r <= 1.0) {
                        return Err(LabError::Parse { line: lineno, detail: format!("drift factor {r} outside (0, 1]") });
                    }
                    FaultKind::Drift(r)
                }
                (k, _) => return Err(LabError::Parse { line: lineno, detail: format!("bad fault entry {k:?}") }),
            };
            if map.entries.insert(cell, kind).is_some() {
                return Err(LabError::Parse { line: lineno, detail: format!("second fault for cell {cell:?}") });
            }
        }
        Ok(map)
    }
}

fn cell_mut(t: &mut Tile, row: usize, col: usize) -> Option<&mut f64> {
    if row >= t.rows || col >= 2 * t.cols {
        return None;
    }
    let i = row * t.cols + col / 2;
    Some(if col % 2 == 0 { &mut t.g_plus[i] } else { &mut t.g_minus[i] })
}

/// Applies every entry of `map` to the conductances and merges it into the
/// program's fault map. Cells that already carry a fault keep it.
pub fn apply_fault_map(prog: &CrossbarProgram, map: &FaultMap) -> Result<CrossbarProgram> {
    let mut out = prog.clone();
    let (g_on, g_off) = (prog.config.g_on, prog.config.g_off);
    for (&cell, &kind) in &map.entries {
        if out.faults.entries.contains_key(&cell) {
            continue;
        }
        let g = out
            .tiles
            .get_mut(cell.tile)
            .and_then(|t| cell_mut(t, cell.row, cell.col))
            .ok_or_else(|| LabError::Config(format!("fault at {cell:?} lies outside the program")))?;
        *g = match kind {
            FaultKind::StuckOn => g_on,
            FaultKind::StuckOff => g_off,
            FaultKind::Drift(r) => (*g * r).max(g_off),
        };
        out.faults.entries.insert(cell, kind);
    }
    out.faults.seed = map.seed;
    Ok(out)
}

/// Independently marks every cell stuck-on with probability `stuck_on_rate`
/// and stuck-off with probability `stuck_off_rate`.
pub fn inject_faults(
    prog: &CrossbarProgram,
    stuck_on_rate: f64,
    stuck_off_rate: f64,
    seed: u64,
) -> Result<(CrossbarProgram, FaultMap)> {
    let ok = |r: f64| (0.0..=1.0).contains(&r);
    if !ok(stuck_on_rate) || !ok(stuck_off_rate) || stuck_on_rate + stuck_off_rate > 1.0 {
        return Err(LabError::Config(format!(
            "fault rates must lie in [0, 1] with sum at most 1, got {stuck_on_rate} and {stuck_off_rate}"
        )));
    }
    let per_tile = par::map_range(prog.tiles.len(), |ti| {
        let t = &prog.tiles[ti];
        let mut r = rng::stream(seed, &[TAG_FAULTS, ti as u64]);
        let mut found = Vec::new();
        for row in 0..t.rows {
            for col in 0..2 * t.cols {
                let u: f64 = r.gen();
                let kind = if u < stuck_on_rate {
                    FaultKind::StuckOn
                } else if u < stuck_on_rate + stuck_off_rate {
                    FaultKind::StuckOff
                } else {
                    continue;
                };
                found.push((CellId { tile: ti, row, col }, kind));
            }
        }
        found
    });
    let map = FaultMap { entries: per_tile.into_iter().flatten().collect(), seed };
    Ok((apply_fault_map(prog, &map)?, map))
}

/// Multiplies each conductance by `exp(e)`, `e ~ N(0, sigma²)`, clamped to
/// `[g_off, g_on]`. Stuck cells are left alone.
pub fn apply_variation(prog: &CrossbarProgram, sigma: f64, seed: u64) -> Result<CrossbarProgram> {
    if sigma < 0.0 {
        return Err(LabError::Config(format!("variation sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(prog.clone());
    }
    let (g_on, g_off) = (prog.config.g_on, prog.config.g_off);
    let tiles = par::map_range(prog.tiles.len(), |ti| {
        let mut t = prog.tiles[ti].clone();
        let mut r = rng::stream(seed, &[TAG_VARIATION, ti as u64]);
        for row in 0..t.rows {
            for col in 0..2 * t.cols {
                let e: f64 = r.sample(StandardNormal);
                let stuck = prog
                    .faults
                    .entries
                    .get(&CellId { tile: ti, row, col })
                    .is_some_and(|k| k.is_stuck());
                if stuck {
                    continue;
                }
                let g = cell_mut(&mut t, row, col).expect("cell in range");
                *g = (*g * (sigma * e).exp()).clamp(g_off, g_on);
            }
        }
        t
    });
    Ok(CrossbarProgram { tiles, ..prog.clone() })
}

/// Scales every non-stuck cell of a tile by one shared factor `exp(σ·e)`,
/// `e ~ N(0, 1)` drawn per tile, clamped to the conductance range. Models
/// array-level gain shifts such as temperature.
pub fn apply_tile_gain(prog: &CrossbarProgram, sigma: f64, seed: u64) -> Result<CrossbarProgram> {
    if sigma < 0.0 {
        return Err(LabError::Config(format!("tile gain sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(prog.clone());
    }
    let (g_on, g_off) = (prog.config.g_on, prog.config.g_off);
    let tiles = par::map_range(prog.tiles.len(), |ti| {
        let mut t = prog.tiles[ti].clone();
        let e: f64 = rng::stream(seed, &[TAG_TILE_GAIN, ti as u64]).sample(StandardNormal);
        let f = (sigma * e).exp();
        for row in 0..t.rows {
            for col in 0..2 * t.cols {
                if prog.faults.entries.get(&CellId { tile: ti, row, col }).is_some_and(|k| k.is_stuck()) {
                    continue;
                }
                let g = cell_mut(&mut t, row, col).expect("cell in range");
                *g = (*g * f).clamp(g_off, g_on);
            }
        }
        t
    });
    Ok(CrossbarProgram { tiles, ..prog.clone() })
}

/// A random hardware condition: stuck-at rates, per-cell conductance
/// variation and per-tile gain.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FaultScenario {
    pub stuck_on: f64,
    pub stuck_off: f64,
    pub variation_sigma: f64,
    pub tile_sigma: f64,
}

impl FaultScenario {
    /// Total stuck-at rate split evenly between stuck-on and stuck-off.
    pub fn stuck(rate: f64) -> Self {
        Self { stuck_on: rate / 2.0, stuck_off: rate / 2.0, ..Self::default() }
    }

    pub fn stuck_on(rate: f64) -> Self {
        Self { stuck_on: rate, ..Self::default() }
    }

    pub fn variation(sigma: f64) -> Self {
        Self { variation_sigma: sigma, ..Self::default() }
    }

    pub fn realize(&self, prog: &CrossbarProgram, seed: u64) -> Result<CrossbarProgram> {
        let (p, _) = inject_faults(prog, self.stuck_on, self.stuck_off, rng::derive(seed, &[1]))?;
        let p = apply_variation(&p, self.variation_sigma, rng::derive(seed, &[2]))?;
        apply_tile_gain(&p, self.tile_sigma, rng::derive(seed, &[3]))
    }
}
