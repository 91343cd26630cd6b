use rand::seq::index::sample;

use super::config::{DatasetKind, ExperimentConfig, RecalibrateMethod, SensingName, Task};
use super::{Bundle, Row};
use crate::bayesian::mc_forward;
use crate::crossbar::{calibrate_adc, faulty_forward, map_weights, CrossbarProgram, FaultScenario, ReferenceVector};
use crate::data::{load_idx, moons, rotate90, Blobs, Dataset};
use crate::error::{LabError, Result};
use crate::mitigation::{approx_bn_recalibrate, generate_reference, CalibrationSet};
use crate::nn::train::accuracy_from_logits;
use crate::nn::{accuracy, build, train, ArchSpec, Model, NoiseSpec, TrainConfig, TrainLog};
use crate::testing::fingerprint::aux_outputs;
use crate::testing::{
    check_fingerprint, fault_coverage, generate_oneshot, oneshot_test, rank_tests, train_with_fingerprint,
    FingerprintSpec, OneShotConfig, TestSuite,
};
use crate::uncertainty::{ece, mutual_information, ood_eval, predictive_entropy, Origin, ScoredSet};
use crate::{par, rng, Tensor};

const TAG_TEST_DATA: u64 = 81;
const TAG_MC: u64 = 83;
const TAG_SCENARIO: u64 = 84;
const TAG_ONESHOT: u64 = 85;
const TAG_CHECK: u64 = 86;
const TAG_RANDOM: u64 = 87;
const TAG_FINGERPRINT: u64 = 88;
const TAG_CALIB: u64 = 89;
const TAG_REFERENCE: u64 = 90;

/// Inputs a run seed consumes.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    /// Out-of-distribution inputs: shifted blobs or rotated images.
    pub ood: Option<Tensor>,
}

fn truncate(d: Dataset, n: usize) -> Dataset {
    if d.len() > n {
        d.split_at(n).0
    } else {
        d
    }
}

pub fn load_data(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let d = &cfg.dataset;
    let data_seed = d.seed.unwrap_or(seed);
    Ok(match d.kind {
        DatasetKind::Blobs => {
            let blobs = Blobs::new(d.classes, d.dim, d.spread, d.center_box, data_seed);
            Prepared {
                train: blobs.sample(d.n, 0),
                test: blobs.sample(d.test_n, 1),
                ood: Some(blobs.shifted(cfg.ood.shift, cfg.ood.n, 2).x),
            }
        }
        DatasetKind::Moons => Prepared {
            train: moons(d.n, d.noise, data_seed),
            test: moons(d.test_n, d.noise, rng::derive(data_seed, &[TAG_TEST_DATA])),
            ood: None,
        },
        DatasetKind::Idx => {
            let path = |p: &Option<std::path::PathBuf>| p.clone().expect("validated");
            let (x, y) = load_idx(&path(&d.images), &path(&d.labels))?;
            let (tx, ty) = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
            let classes = y.iter().chain(&ty).max().map_or(0, |m| m + 1).max(2);
            let train = truncate(Dataset::new(x, y, classes)?, d.n);
            let test = truncate(Dataset::new(tx, ty, classes)?, d.test_n);
            let ood = rotate90(&test.x);
            Prepared { train, test, ood: Some(ood) }
        }
    })
}

fn arch_spec(cfg: &ExperimentConfig, data: &Dataset) -> Result<ArchSpec> {
    Ok(ArchSpec::new(cfg.model.arch(), data.sample_shape(), data.classes)
        .with_bayes(cfg.bayes.bayes()?)
        .binary(cfg.model.binary))
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    let t = &cfg.train;
    TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        binary_weights: cfg.model.binary,
        noise_spec: (t.noise_sigma > 0.0).then_some(NoiseSpec { sigma: t.noise_sigma }),
        seed,
        ..TrainConfig::default()
    }
}

fn fit(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<(Model, TrainLog)> {
    let mut model = build(&arch_spec(cfg, &data.train)?, seed)?;
    let log = train(&mut model, &data.train, &train_config(cfg, seed))?;
    Ok((model, log))
}

/// The fault-free program, with ADC ranges calibrated on training inputs or
/// a zero sensing reference where the sensing mode needs one.
fn program(cfg: &ExperimentConfig, model: &Model, train_set: &Dataset) -> Result<CrossbarProgram> {
    let mut p = map_weights(model, &cfg.crossbar.config())?;
    match cfg.crossbar.sensing {
        SensingName::Adc => {
            let n = train_set.len().min(256);
            p = calibrate_adc(model, &p, &train_set.x.select_rows(&(0..n).collect::<Vec<_>>()))?;
        }
        SensingName::Bps => p.reference = Some(ReferenceVector::zero(model, &p)),
        SensingName::Ideal => {}
    }
    Ok(p)
}

fn scenario(cfg: &ExperimentConfig, stuck_rate: f64) -> FaultScenario {
    cfg.faults.scenario(stuck_rate)
}

fn analog_accuracy(model: &Model, prog: &CrossbarProgram, data: &Dataset) -> Result<f64> {
    Ok(accuracy_from_logits(&faulty_forward(model, prog, &data.x)?, &data.y, data.classes))
}

fn rate_row(seed: u64, rate: f64) -> Row {
    let mut r = Row::new(seed);
    r.rate = Some(rate);
    r
}

pub(crate) fn run(task: Task, cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    match task {
        Task::Train => train_task(cfg, seed, data),
        Task::Inject => inject(cfg, seed, data, bundle),
        Task::McEval => mc_eval(cfg, seed, data),
        Task::OodEval => ood(cfg, seed, data),
        Task::OneShot => oneshot(cfg, seed, data, bundle),
        Task::Rank => rank(cfg, seed, data, bundle),
        Task::Fingerprint => fingerprint(cfg, seed, data, bundle),
        Task::Recalibrate => match cfg.recalibrate.method {
            RecalibrateMethod::ApproxBn => recalibrate(cfg, seed, data, bundle),
            RecalibrateMethod::Reference => reference(cfg, seed, data, bundle),
        },
        Task::Sweep => sweep(cfg, seed, data, bundle),
    }
}

fn train_task(cfg: &ExperimentConfig, seed: u64, data: &Prepared) -> Result<Vec<Row>> {
    let (model, log) = fit(cfg, data, seed)?;
    let mut row = Row::new(seed);
    row.set("train_accuracy", accuracy(&model, &data.train)?)
        .set("test_accuracy", accuracy(&model, &data.test)?)
        .set("final_loss", log.epochs.last().map_or(f64::NAN, |e| e.loss));
    Ok(vec![row])
}

fn inject(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, _) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let clean_acc = analog_accuracy(&model, &clean, &data.test)?;
    let rate = cfg.faults.stuck_rate;
    let p = scenario(cfg, rate).realize(&clean, rng::derive(seed, &[TAG_SCENARIO]))?;
    let faulty = analog_accuracy(&model, &p, &data.test)?;
    let mut row = rate_row(seed, rate);
    row.fault_map = Some(bundle.write(&format!("faults/seed{seed}.txt"), &p.faults.to_text())?);
    row.set("digital_accuracy", accuracy(&model, &data.test)?)
        .set("clean_accuracy", clean_acc)
        .set("faulty_accuracy", faulty)
        .set("accuracy_drop", clean_acc - faulty)
        .set("fault_count", p.faults.len() as f64);
    Ok(vec![row])
}

fn mc_eval(cfg: &ExperimentConfig, seed: u64, data: &Prepared) -> Result<Vec<Row>> {
    let (model, _) = fit(cfg, data, seed)?;
    let results = mc_forward(&model, &data.test.x, cfg.mc.samples, rng::derive(seed, &[TAG_MC]))?;
    let n = results.len() as f64;
    let probs: Vec<Vec<f64>> = results.iter().map(|r| r.mean_probs.clone()).collect();
    let correct = results.iter().zip(&data.test.y).filter(|(r, &y)| r.predicted_class() == y).count();
    let mut row = Row::new(seed);
    row.set("accuracy", correct as f64 / n)
        .set("ece", ece(&probs, &data.test.y, cfg.mc.ece_bins)?)
        .set("mean_entropy", results.iter().map(predictive_entropy).sum::<f64>() / n)
        .set("mean_mutual_information", results.iter().map(mutual_information).sum::<f64>() / n);
    Ok(vec![row])
}

fn ood(cfg: &ExperimentConfig, seed: u64, data: &Prepared) -> Result<Vec<Row>> {
    let ood_x = data.ood.as_ref().ok_or_else(|| LabError::Config("dataset has no out-of-distribution pair".into()))?;
    let (model, _) = fit(cfg, data, seed)?;
    let mc_seed = rng::derive(seed, &[TAG_MC]);
    let r_in = mc_forward(&model, &data.test.x, cfg.mc.samples, mc_seed)?;
    let r_out = mc_forward(&model, ood_x, cfg.mc.samples, mc_seed)?;
    let report = ood_eval(
        &ScoredSet::entropy_of(&r_in, Origin::InDistribution)?,
        &ScoredSet::entropy_of(&r_out, Origin::Ood)?,
    )?;
    let correct = r_in.iter().zip(&data.test.y).filter(|(r, &y)| r.predicted_class() == y).count();
    let mut row = Row::new(seed);
    row.set("accuracy", correct as f64 / r_in.len() as f64)
        .set("auroc", report.auroc)
        .set("detection_rate", report.detection_rate_at_5pct_fpr)
        .set("threshold", report.threshold);
    Ok(vec![row])
}

fn oneshot(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, _) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let o = &cfg.oneshot;
    let ocfg = OneShotConfig { steps: o.steps, lr: o.lr, replays: o.replays, margin: o.margin };
    let v = generate_oneshot(&model, &clean, &ocfg, rng::derive(seed, &[TAG_ONESHOT]))?;
    bundle.write(&format!("artifacts/oneshot_seed{seed}.txt"), &v.to_text())?;
    let passes = par::try_map_range(o.checks, |k| {
        oneshot_test(&model, &clean, &v, rng::derive(seed, &[TAG_CHECK, k as u64])).map(|r| r.pass)
    })?
    .into_iter()
    .filter(|&p| p)
    .count();
    let mut rows = Vec::new();
    for rate in cfg.faults.rates() {
        let sc = scenario(cfg, rate);
        let cov = fault_coverage(
            &model,
            &clean,
            |p, s| sc.realize(p, s),
            TestSuite::OneShot(&v),
            cfg.faults.scenarios,
            rng::derive(seed, &[TAG_SCENARIO]),
        )?;
        let mut row = rate_row(seed, rate);
        row.set("coverage", cov.coverage())
            .set("fault_free_passes", passes as f64)
            .set("fault_free_checks", o.checks as f64)
            .set("tau", v.tau)
            .set("stat_fault_free", v.stat_fault_free);
        rows.push(row);
    }
    Ok(rows)
}

fn rank(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, log) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let n = data.train.len();
    let k = ((n as f64 * cfg.rank.fraction).round() as usize).max(1);
    let ranked = rank_tests(&log, k)?;
    let listing: Vec<String> = ranked.indices.iter().map(usize::to_string).collect();
    bundle.write(&format!("artifacts/ranked_seed{seed}.txt"), &(listing.join("\n") + "\n"))?;
    let mut random = sample(&mut rng::stream(seed, &[TAG_RANDOM]), n, k).into_vec();
    random.sort_unstable();
    let ranked_x = data.train.x.select_rows(&ranked.indices);
    let random_x = data.train.x.select_rows(&random);
    let mut rows = Vec::new();
    for rate in cfg.faults.rates() {
        let sc = scenario(cfg, rate);
        let scen_seed = rng::derive(seed, &[TAG_SCENARIO]);
        let cover = |x: &Tensor| {
            fault_coverage(&model, &clean, |p, s| sc.realize(p, s), TestSuite::Inputs(x), cfg.faults.scenarios, scen_seed)
        };
        let mut row = rate_row(seed, rate);
        row.set("ranked_coverage", cover(&ranked_x)?.coverage())
            .set("random_coverage", cover(&random_x)?.coverage())
            .set("k", k as f64);
        rows.push(row);
    }
    Ok(rows)
}

fn fingerprint(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let spec = arch_spec(cfg, &data.train)?;
    let fp = FingerprintSpec {
        width: cfg.fingerprint.width,
        lambda: cfg.fingerprint.lambda,
        seed: rng::derive(seed, &[TAG_FINGERPRINT]),
    };
    let run = train_with_fingerprint(&spec, &fp, &data.train, &data.test, &train_config(cfg, seed))?;
    bundle.write(&format!("artifacts/fingerprint_seed{seed}.txt"), &run.fingerprint.to_text())?;
    let classes = data.test.classes;
    let flagged = |prog: &CrossbarProgram| -> Result<usize> {
        let out = faulty_forward(&run.model, prog, &data.test.x)?;
        Ok(aux_outputs(&out, classes).iter().filter(|a| !check_fingerprint(a, &run.fingerprint)).count())
    };
    let clean = program(cfg, &run.model, &data.train)?;
    let false_positives = flagged(&clean)?;
    let n = data.test.len();
    let mut rows = Vec::new();
    for rate in cfg.faults.rates() {
        let sc = scenario(cfg, rate);
        let scen_seed = rng::derive(seed, &[TAG_SCENARIO]);
        let detected: usize = par::try_map_range(cfg.faults.scenarios, |i| {
            flagged(&sc.realize(&clean, crate::testing::scenario_seed(scen_seed, i))?)
        })?
        .into_iter()
        .sum();
        let mut row = rate_row(seed, rate);
        row.set("accuracy", run.accuracy)
            .set("baseline_accuracy", run.baseline_accuracy)
            .set("accuracy_gap", (run.baseline_accuracy - run.accuracy) * 100.0)
            .set("tol", run.fingerprint.tol)
            .set("false_positives", false_positives as f64)
            .set("calibration_size", n as f64)
            .set("detection_rate", detected as f64 / (n * cfg.faults.scenarios) as f64);
        rows.push(row);
    }
    Ok(rows)
}

fn recalibrate(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, log) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let clean_acc = analog_accuracy(&model, &clean, &data.test)?;
    let r = &cfg.recalibrate;
    let ranking = if r.ranked {
        Some(rank_tests(&log, ((data.train.len() as f64 * r.fraction).round() as usize).max(1))?)
    } else {
        None
    };
    let calib = CalibrationSet::select(&data.train, r.fraction, ranking.as_ref(), rng::derive(seed, &[TAG_CALIB]))?;
    let rate = cfg.faults.stuck_rate;
    let mut rows = Vec::new();
    for e in 0..r.eval_scenarios {
        let p = scenario(cfg, rate).realize(&clean, rng::derive(seed, &[TAG_SCENARIO, e as u64]))?;
        let faulty = analog_accuracy(&model, &p, &data.test)?;
        let fixed = approx_bn_recalibrate(&model, &p, &calib)?;
        let recal = analog_accuracy(&fixed, &p, &data.test)?;
        let mut row = rate_row(seed, rate);
        row.scenario = Some(e);
        row.fault_map = Some(bundle.write(&format!("faults/seed{seed}_scenario{e}.txt"), &p.faults.to_text())?);
        row.set("clean_accuracy", clean_acc)
            .set("faulty_accuracy", faulty)
            .set("recalibrated_accuracy", recal)
            .set("accuracy_loss", clean_acc - faulty)
            .set("accuracy_recovered", recal - faulty)
            .set("calibration_size", calib.inputs.rows() as f64);
        rows.push(row);
    }
    Ok(rows)
}

fn reference(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, _) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let r = &cfg.recalibrate;
    let m = r.reference_inputs.min(data.train.len());
    let inputs = data.train.x.select_rows(&(0..m).collect::<Vec<_>>());
    let generated = generate_reference(
        &model,
        &clean,
        &inputs,
        r.reference_scenarios,
        cfg.faults.variation_sigma,
        rng::derive(seed, &[TAG_REFERENCE]),
    )?;
    bundle.write(&format!("artifacts/reference_seed{seed}.txt"), &generated.to_text())?;
    let zero = ReferenceVector::zero(&model, &clean);
    let rate = cfg.faults.stuck_rate;
    let mut rows = Vec::new();
    for e in 0..r.eval_scenarios {
        let mut p = scenario(cfg, rate).realize(&clean, rng::derive(seed, &[TAG_SCENARIO, e as u64]))?;
        p.reference = Some(zero.clone());
        let acc_zero = analog_accuracy(&model, &p, &data.test)?;
        p.reference = Some(generated.clone());
        let acc_ref = analog_accuracy(&model, &p, &data.test)?;
        let mut row = rate_row(seed, rate);
        row.scenario = Some(e);
        row.fault_map = Some(bundle.write(&format!("faults/seed{seed}_scenario{e}.txt"), &p.faults.to_text())?);
        row.set("accuracy_theta_zero", acc_zero)
            .set("accuracy_reference", acc_ref)
            .set("improvement", acc_ref - acc_zero);
        rows.push(row);
    }
    Ok(rows)
}

fn sweep(cfg: &ExperimentConfig, seed: u64, data: &Prepared, bundle: &Bundle<'_>) -> Result<Vec<Row>> {
    let (model, _) = fit(cfg, data, seed)?;
    let clean = program(cfg, &model, &data.train)?;
    let clean_acc = analog_accuracy(&model, &clean, &data.test)?;
    let mut rows = Vec::new();
    for rate in cfg.faults.rates() {
        // one seed across rates keeps the fault sets nested
        let p = scenario(cfg, rate).realize(&clean, rng::derive(seed, &[TAG_SCENARIO]))?;
        let acc = analog_accuracy(&model, &p, &data.test)?;
        let mut row = rate_row(seed, rate);
        row.fault_map = Some(bundle.write(&format!("faults/seed{seed}_rate{rate}.txt"), &p.faults.to_text())?);
        row.set("accuracy", acc).set("accuracy_drop", clean_acc - acc).set("fault_count", p.faults.len() as f64);
        rows.push(row);
    }
    Ok(rows)
}
