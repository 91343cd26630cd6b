use crate::crossbar::{faulty_forward, CrossbarProgram};
use crate::error::Result;
use crate::nn::Model;
use crate::tensor::Tensor;
use crate::testing::oneshot::{oneshot_test, OneShotVector};
use crate::{par, rng};

/// What is applied to each faulty program.
#[derive(Debug, Clone, Copy)]
pub enum TestSuite<'a> {
    /// Detected when any top-1 prediction differs from the fault-free program.
    Inputs(&'a Tensor),
    /// Detected when the one-shot statistic exceeds its threshold.
    OneShot(&'a OneShotVector),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioOutcome {
    pub id: usize,
    /// Seed handed to the generator; replays the scenario exactly.
    pub seed: u64,
    pub detected: bool,
    /// Fraction of flipped predictions, or the one-shot statistic.
    pub statistic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub scenarios: usize,
    pub detected: usize,
    pub per_scenario: Vec<ScenarioOutcome>,
}

impl CoverageReport {
    pub fn coverage(&self) -> f64 {
        if self.scenarios == 0 {
            0.0
        } else {
            self.detected as f64 / self.scenarios as f64
        }
    }
}

const TAG_SCENARIO: u64 = 51;

/// Seed of scenario `id` under a coverage run seeded with `seed`.
pub fn scenario_seed(seed: u64, id: usize) -> u64 {
    rng::derive(seed, &[TAG_SCENARIO, id as u64])
}

/// Runs `tests` against `n_scenarios` programs produced by `generator` from
/// the clean program, scenario `i` with seed [`scenario_seed`]`(seed, i)`.
pub fn fault_coverage<G>(
    model: &Model,
    clean: &CrossbarProgram,
    generator: G,
    tests: TestSuite<'_>,
    n_scenarios: usize,
    seed: u64,
) -> Result<CoverageReport>
where
    G: Fn(&CrossbarProgram, u64) -> Result<CrossbarProgram> + Sync,
{
    let reference = match tests {
        TestSuite::Inputs(x) => Some(faulty_forward(model, clean, x)?.argmax_rows()),
        TestSuite::OneShot(_) => None,
    };
    let per_scenario = par::try_map_range(n_scenarios, |id| {
        let s = scenario_seed(seed, id);
        let prog = generator(clean, s)?;
        let (detected, statistic) = match tests {
            TestSuite::Inputs(x) => {
                let pred = faulty_forward(model, &prog, x)?.argmax_rows();
                let base = reference.as_ref().expect("reference predictions");
                let flipped = pred.iter().zip(base).filter(|(a, b)| a != b).count();
                (flipped > 0, flipped as f64 / pred.len().max(1) as f64)
            }
            TestSuite::OneShot(v) => {
                let o = oneshot_test(model, &prog, v, rng::derive(s, &[TAG_SCENARIO]))?;
                (!o.pass, o.statistic)
            }
        };
        Ok::<_, crate::LabError>(ScenarioOutcome { id, seed: s, detected, statistic })
    })?;
    let detected = per_scenario.iter().filter(|o| o.detected).count();
    Ok(CoverageReport { scenarios: n_scenarios, detected, per_scenario })
}
