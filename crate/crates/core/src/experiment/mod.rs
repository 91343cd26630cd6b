//! Config-driven runs: one pipeline per task, executed for every seed, with
//! a JSON summary, a per-seed CSV table and replay files written to the
//! output directory.

mod config;
mod pipelines;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    ArchName, BayesConfig, BayesKind, CrossbarSection, DatasetConfig, DatasetKind, ExperimentConfig, FaultSection,
    FingerprintSection, McSection, ModelConfig, OneShotSection, OodSection, RankSection, RecalibrateMethod,
    RecalibrateSection, SensingName, StuckKind, Task, TrainSection,
};
pub use pipelines::{load_data, Prepared};

use crate::error::Result;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "per_seed.csv";
pub const REPORT_FILE: &str = "report.csv";
/// Present in the output directory when a run stopped on an error.
pub const PARTIAL_MARKER: &str = "PARTIAL";

/// One line of the per-seed table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
    /// Fault map of this row, relative to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_map: Option<String>,
}

impl Row {
    fn new(seed: u64) -> Self {
        Self { seed, rate: None, scenario: None, metrics: BTreeMap::new(), fault_map: None }
    }

    fn set(&mut self, name: &str, value: f64) -> &mut Self {
        self.metrics.insert(name.to_string(), value);
        self
    }
}

/// Metric means over all rows sharing a fault rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub rows: usize,
    pub mean: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub task: String,
    /// SHA-256 of the canonical config text.
    pub config_hash: String,
    /// SHA-256 of every dataset the run consumed.
    pub input_hash: String,
    pub seeds: Vec<u64>,
    pub aggregate: Vec<Aggregate>,
    pub rows: Vec<Row>,
    pub wall_time_ms: u64,
}

impl Summary {
    /// Mean of `metric` at `rate` (`None` for tasks without a rate axis).
    pub fn mean(&self, rate: Option<f64>, metric: &str) -> Option<f64> {
        self.aggregate.iter().find(|a| a.rate == rate).and_then(|a| a.mean.get(metric).copied())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
    }
}

/// Writes replay files below the output directory.
pub(crate) struct Bundle<'a> {
    root: &'a Path,
}

impl Bundle<'_> {
    /// Writes `contents` to `rel` and returns `rel`.
    pub(crate) fn write(&self, rel: &str, contents: &str) -> Result<String> {
        write_atomic(&self.root.join(rel), contents)?;
        Ok(rel.to_string())
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_data(h: &mut Sha256, p: &Prepared) {
    for d in [&p.train, &p.test] {
        for v in d.x.shape() {
            h.update((*v as u64).to_le_bytes());
        }
        for v in d.x.data() {
            h.update(v.to_le_bytes());
        }
        for y in &d.y {
            h.update((*y as u64).to_le_bytes());
        }
    }
}

fn run_seeds(cfg: &ExperimentConfig, bundle: &Bundle<'_>, rows: &mut Vec<Row>, hasher: &mut Sha256) -> Result<()> {
    let task = cfg.task.expect("validated");
    for &seed in &cfg.seeds {
        let data = load_data(cfg, seed)?;
        hash_data(hasher, &data);
        log::info!("{} seed {seed}", task.name());
        rows.extend(pipelines::run(task, cfg, seed, &data, bundle)?);
    }
    Ok(())
}

/// Executes the configured task for every seed and writes `summary.json`,
/// `per_seed.csv` and the replay files into `out`. On failure the rows
/// finished so far are still written, next to a `PARTIAL` marker holding the
/// error.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Summary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let marker = out.join(PARTIAL_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut hasher = Sha256::new();
    let result = run_seeds(cfg, &Bundle { root: out }, &mut rows, &mut hasher);
    write_atomic(&out.join(TABLE_FILE), &table(&rows))?;
    if let Err(e) = result {
        write_atomic(&marker, &format!("{e}\n"))?;
        return Err(e);
    }
    let summary = Summary {
        task: cfg.task.expect("validated").name().to_string(),
        config_hash: hex(&Sha256::digest(cfg.canonical().as_bytes())),
        input_hash: hex(&hasher.finalize()),
        seeds: cfg.seeds.clone(),
        aggregate: aggregate(&rows),
        rows,
        wall_time_ms: start.elapsed().as_millis() as u64,
    };
    write_atomic(&out.join(SUMMARY_FILE), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    Ok(summary)
}

fn aggregate(rows: &[Row]) -> Vec<Aggregate> {
    let mut groups: Vec<(Option<f64>, Vec<&Row>)> = Vec::new();
    for r in rows {
        match groups.iter_mut().find(|g| g.0.map(f64::to_bits) == r.rate.map(f64::to_bits)) {
            Some(g) => g.1.push(r),
            None => groups.push((r.rate, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(rate, rs)| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for r in &rs {
                for (k, v) in &r.metrics {
                    let e = sums.entry(k.clone()).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            let mean = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            Aggregate { rate, rows: rs.len(), mean }
        })
        .collect()
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn table(rows: &[Row]) -> String {
    let mut names: Vec<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
    names.sort();
    names.dedup();
    let mut s = String::from("seed,rate,scenario");
    for n in &names {
        s += &format!(",{n}");
    }
    s += ",fault_map\n";
    for r in rows {
        s += &format!("{},{},{}", r.seed, opt(r.rate), opt(r.scenario));
        for n in &names {
            s += &format!(",{}", opt(r.metrics.get(*n)));
        }
        s += &format!(",{}\n", r.fault_map.as_deref().unwrap_or(""));
    }
    s
}

/// Merges the summaries found in `dir` and its immediate subdirectories into
/// `report.csv`, one line per (run, rate, metric).
pub fn report(dir: &Path) -> Result<PathBuf> {
    let mut runs: Vec<PathBuf> = Vec::new();
    if dir.join(SUMMARY_FILE).is_file() {
        runs.push(dir.to_path_buf());
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    subdirs.sort();
    runs.extend(subdirs);
    if runs.is_empty() {
        return Err(crate::LabError::Config(format!("no {SUMMARY_FILE} under {}", dir.display())));
    }
    let mut s = String::from("run,task,rate,rows,metric,mean\n");
    for run in &runs {
        let summary = Summary::load(run)?;
        let name = run.strip_prefix(dir).ok().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        for a in &summary.aggregate {
            for (m, v) in &a.mean {
                s += &format!("{},{},{},{},{m},{v}\n", name.display(), summary.task, opt(a.rate), a.rows);
            }
        }
    }
    let path = dir.join(REPORT_FILE);
    write_atomic(&path, &s)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_groups_by_rate() {
        let mut a = Row::new(0);
        a.rate = Some(0.1);
        a.set("acc", 0.5);
        let mut b = Row::new(1);
        b.rate = Some(0.1);
        b.set("acc", 1.0);
        let mut c = Row::new(0);
        c.rate = Some(0.2);
        c.set("acc", 0.25);
        let g = aggregate(&[a, b, c]);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].mean["acc"], 0.75);
        assert_eq!(g[1].rows, 1);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let mut a = Row::new(3);
        a.set("x", 1.5).set("y", 2.0);
        a.fault_map = Some("faults/a.txt".into());
        let t = table(&[a, Row::new(4)]);
        assert_eq!(t, "seed,rate,scenario,x,y,fault_map\n3,,,1.5,2,faults/a.txt\n4,,,,,\n");
    }
}
