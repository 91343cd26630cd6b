//! Functional self-test: one-shot test vectors, gradient-ranked test
//! selection, fingerprint-based concurrent checking and fault coverage.

mod artifact;
pub mod coverage;
pub mod fingerprint;
pub mod oneshot;
pub mod ranking;

pub use coverage::{fault_coverage, scenario_seed, CoverageReport, ScenarioOutcome, TestSuite};
pub use fingerprint::{check_fingerprint, train_with_fingerprint, Fingerprint, FingerprintRun, FingerprintSpec};
pub use oneshot::{generate_oneshot, monitored_layers, oneshot_test, OneShotConfig, OneShotOutcome, OneShotVector};
pub use ranking::{rank_tests, RankedTestSet};
