use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossbar::{CrossbarConfig, FaultScenario, Sensing};
use crate::error::{LabError, Result};
use crate::nn::{Arch, Bayes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    Inject,
    McEval,
    OodEval,
    #[serde(rename = "oneshot")]
    OneShot,
    Rank,
    Fingerprint,
    Recalibrate,
    Sweep,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Inject => "inject",
            Task::McEval => "mc-eval",
            Task::OodEval => "ood-eval",
            Task::OneShot => "oneshot",
            Task::Rank => "rank",
            Task::Fingerprint => "fingerprint",
            Task::Recalibrate => "recalibrate",
            Task::Sweep => "sweep",
        }
    }
}

/// Everything a run depends on. Parsed from TOML: top-level keys plus one
/// table per section. Missing keys take the reference-task defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub bayes: BayesConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub crossbar: CrossbarSection,
    #[serde(default)]
    pub faults: FaultSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub ood: OodSection,
    #[serde(default)]
    pub oneshot: OneShotSection,
    #[serde(default)]
    pub rank: RankSection,
    #[serde(default)]
    pub fingerprint: FingerprintSection,
    #[serde(default)]
    pub recalibrate: RecalibrateSection,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Moons,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Training samples (synthetic kinds) or a cap on them (IDX).
    pub n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub center_box: f64,
    pub noise: f64,
    /// Fixed data seed; when absent every run seed draws its own dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            n: 10_000,
            test_n: 1000,
            classes: 10,
            dim: 16,
            spread: 1.0,
            center_box: 5.0,
            noise: 0.1,
            seed: None,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    MlpS,
    ConvS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchName,
    pub binary: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { arch: ArchName::MlpS, binary: false }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Arch {
        match self.arch {
            ArchName::MlpS => Arch::MlpS,
            ArchName::ConvS => Arch::ConvS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BayesKind {
    None,
    Neuron,
    Spatial,
    Scale,
    Vi,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesConfig {
    pub kind: BayesKind,
    pub p: f64,
    /// Adaptive scale-dropout rate range.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_max: Option<f64>,
    pub prior_sigma: f64,
    pub delta: f64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self { kind: BayesKind::None, p: 0.2, p_min: None, p_max: None, prior_sigma: 0.25, delta: 0.1 }
    }
}

impl BayesConfig {
    pub fn bayes(&self) -> Result<Bayes> {
        Ok(match self.kind {
            BayesKind::None => Bayes::None,
            BayesKind::Neuron => Bayes::Neuron { p: self.p },
            BayesKind::Spatial => Bayes::Spatial { p: self.p },
            BayesKind::Scale => {
                let adaptive = match (self.p_min, self.p_max) {
                    (Some(lo), Some(hi)) => Some((lo, hi)),
                    (None, None) => None,
                    _ => return Err(LabError::Config("bayes.p_min and bayes.p_max must be set together".into())),
                };
                Bayes::Scale { p: self.p, adaptive }
            }
            BayesKind::Vi => Bayes::Vi { prior_sigma: self.prior_sigma },
            BayesKind::Affine => Bayes::Affine { delta: self.delta, p: self.p },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Lognormal weight noise during training; 0 disables it.
    pub noise_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, learning_rate: 1e-3, noise_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensingName {
    Ideal,
    Adc,
    Bps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossbarSection {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub g_on: f64,
    pub g_off: f64,
    pub levels: usize,
    pub sensing: SensingName,
    pub adc_bits: u32,
    pub read_noise_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_max: Option<f64>,
}

impl Default for CrossbarSection {
    fn default() -> Self {
        let c = CrossbarConfig::default();
        Self {
            tile_rows: c.tile_rows,
            tile_cols: c.tile_cols,
            g_on: c.g_on,
            g_off: c.g_off,
            levels: c.levels,
            sensing: SensingName::Ideal,
            adc_bits: 12,
            read_noise_sigma: 0.0,
            w_max: None,
        }
    }
}

impl CrossbarSection {
    pub fn config(&self) -> CrossbarConfig {
        CrossbarConfig {
            tile_rows: self.tile_rows,
            tile_cols: self.tile_cols,
            g_on: self.g_on,
            g_off: self.g_off,
            levels: self.levels,
            sensing: match self.sensing {
                SensingName::Ideal => Sensing::Ideal,
                SensingName::Adc => Sensing::Adc { bits: self.adc_bits },
                SensingName::Bps => Sensing::BinarizedPartialSum,
            },
            variation_sigma: 0.0,
            read_noise_sigma: self.read_noise_sigma,
            w_max: self.w_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StuckKind {
    /// Half stuck-on, half stuck-off.
    Split,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSection {
    /// Total stuck-at rate.
    pub stuck_rate: f64,
    pub kind: StuckKind,
    /// Stuck rates visited by `sweep`, `oneshot`, `rank` and `fingerprint`;
    /// empty means `[stuck_rate]`.
    pub rates: Vec<f64>,
    /// Per-cell lognormal conductance variation.
    pub variation_sigma: f64,
    /// Per-tile lognormal gain.
    pub tile_sigma: f64,
    /// Fault scenarios per coverage estimate.
    pub scenarios: usize,
}

impl Default for FaultSection {
    fn default() -> Self {
        Self { stuck_rate: 0.05, kind: StuckKind::Split, rates: Vec::new(), variation_sigma: 0.0, tile_sigma: 0.0, scenarios: 100 }
    }
}

impl FaultSection {
    /// The scenario with stuck-at rate `rate` and this section's variation.
    pub fn scenario(&self, rate: f64) -> FaultScenario {
        let stuck = match self.kind {
            StuckKind::Split => FaultScenario::stuck(rate),
            StuckKind::On => FaultScenario::stuck_on(rate),
            StuckKind::Off => FaultScenario { stuck_off: rate, ..FaultScenario::default() },
        };
        FaultScenario { variation_sigma: self.variation_sigma, tile_sigma: self.tile_sigma, ..stuck }
    }

    pub fn rates(&self) -> Vec<f64> {
        if self.rates.is_empty() {
            vec![self.stuck_rate]
        } else {
            self.rates.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSection {
    pub samples: usize,
    pub ece_bins: usize,
}

impl Default for McSection {
    fn default() -> Self {
        Self { samples: 20, ece_bins: 15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSection {
    /// How far each blob center moves toward its nearest neighbour.
    pub shift: f64,
    pub n: usize,
}

impl Default for OodSection {
    fn default() -> Self {
        Self { shift: 0.5, n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneShotSection {
    pub steps: usize,
    pub lr: f64,
    pub replays: usize,
    pub margin: f64,
    /// Fault-free noisy replays used to count false alarms.
    pub checks: usize,
}

impl Default for OneShotSection {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.05, replays: 32, margin: 1.5, checks: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankSection {
    /// Test-set size relative to the training set.
    pub fraction: f64,
}

impl Default for RankSection {
    fn default() -> Self {
        Self { fraction: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSection {
    pub width: usize,
    pub lambda: f64,
}

impl Default for FingerprintSection {
    fn default() -> Self {
        Self { width: 8, lambda: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecalibrateMethod {
    ApproxBn,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecalibrateSection {
    pub method: RecalibrateMethod,
    /// Calibration set size relative to the training set.
    pub fraction: f64,
    /// Take the calibration inputs from the gradient ranking instead of uniformly.
    pub ranked: bool,
    /// Training inputs used to fit the sensing reference.
    pub reference_inputs: usize,
    /// Variation samples the reference is fitted over.
    pub reference_scenarios: usize,
    /// Variation samples each accuracy is averaged over.
    pub eval_scenarios: usize,
}

impl Default for RecalibrateSection {
    fn default() -> Self {
        Self {
            method: RecalibrateMethod::ApproxBn,
            fraction: 0.002,
            ranked: false,
            reference_inputs: 256,
            reference_scenarios: 5,
            eval_scenarios: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            LabError::Parse { line, detail: e.message().to_string() }
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical text of everything that affects results. The output
    /// directory is left out so the same experiment hashes the same wherever
    /// it is written.
    pub fn canonical(&self) -> String {
        let c = Self { output_dir: None, ..self.clone() };
        toml::to_string(&c).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task.ok_or_else(|| LabError::Config("no task given".into()))?;
        if self.seeds.is_empty() {
            return Err(LabError::Config("seeds must not be empty".into()));
        }
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Blobs if d.classes < 2 || d.dim == 0 => {
                return Err(LabError::Config("blobs need at least 2 classes and 1 dimension".into()))
            }
            DatasetKind::Idx if d.images.is_none() || d.labels.is_none() || d.test_images.is_none() || d.test_labels.is_none() => {
                return Err(LabError::Config(
                    "idx datasets need dataset.images, dataset.labels, dataset.test_images and dataset.test_labels".into(),
                ))
            }
            _ => {}
        }
        if d.n == 0 || d.test_n == 0 {
            return Err(LabError::Config("dataset.n and dataset.test_n must be positive".into()));
        }
        if task == Task::OodEval && d.kind == DatasetKind::Moons {
            return Err(LabError::Config("ood-eval needs blobs or idx data".into()));
        }
        self.bayes.bayes()?;
        self.crossbar.config().validate()?;
        let f = &self.faults;
        if f.rates().iter().any(|r| !(0.0..=1.0).contains(r)) || f.variation_sigma < 0.0 || f.tile_sigma < 0.0 {
            return Err(LabError::Config("fault rates must lie in [0, 1] and sigmas be non-negative".into()));
        }
        if f.scenarios == 0 {
            return Err(LabError::Config("faults.scenarios must be positive".into()));
        }
        if self.mc.samples == 0 || self.mc.ece_bins == 0 {
            return Err(LabError::Config("mc.samples and mc.ece_bins must be positive".into()));
        }
        if !(self.rank.fraction > 0.0 && self.rank.fraction <= 1.0) {
            return Err(LabError::Config("rank.fraction must lie in (0, 1]".into()));
        }
        let r = &self.recalibrate;
        if r.method == RecalibrateMethod::Reference && self.crossbar.sensing != SensingName::Bps {
            return Err(LabError::Config("reference recalibration needs crossbar.sensing = \"bps\"".into()));
        }
        if r.eval_scenarios == 0 || r.reference_scenarios == 0 || r.reference_inputs == 0 {
            return Err(LabError::Config("recalibration scenario and input counts must be positive".into()));
        }
        Ok(())
    }
}
