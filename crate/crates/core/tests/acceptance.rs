//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use cimlab::bayesian::{mc_forward_instrumented, scale_vi_kl};
use cimlab::crossbar::{calibrate_adc, faulty_forward, map_weights, CrossbarConfig, Sensing};
use cimlab::data::Dataset;
use cimlab::experiment::{self, load_data, ExperimentConfig, Summary};
use cimlab::nn::arch::{inverse_softplus, SCALE_SOURCE};
use cimlab::nn::layers::ScaleVi;
use cimlab::nn::{build, train, Arch, ArchSpec, Bayes, TrainConfig};
use cimlab::{bayesian, par, Tensor};
use common::gradcheck::check_net;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn run_config(text: &str, dir: &Path) -> Result<Summary, Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml(text)?;
    Ok(experiment::run(&cfg, dir)?)
}

fn mean(s: &Summary, rate: Option<f64>, metric: &str) -> Result<f64, Box<dyn std::error::Error>> {
    s.mean(rate, metric).ok_or_else(|| format!("summary lacks {metric} at {rate:?}").into())
}

fn metric_by_seed(s: &Summary, metric: &str) -> Vec<f64> {
    s.rows.iter().map(|r| r.metrics[metric]).collect()
}

/// The reference MLP-S on the reference blobs task, seed 0.
fn reference_net() -> Result<(cimlab::nn::Model, Dataset, Dataset), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::from_toml("task = \"train\"")?;
    let data = load_data(&cfg, 0)?;
    let mut model = build(&ArchSpec::new(Arch::MlpS, data.train.sample_shape(), data.train.classes), 0)?;
    let tc = TrainConfig { epochs: 5, batch_size: 64, learning_rate: 1e-3, seed: 0, ..TrainConfig::default() };
    train(&mut model, &data.train, &tc)?;
    Ok((model, data.train, data.test))
}

fn gradient_oracle(_: &Path) -> Outcome {
    let t = Instant::now();
    let worst = (0..20).map(check_net).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    Ok((worst < 1e-4 && secs < 30.0, format!("worst relative error {worst:.2e} over 20 nets in {secs:.1} s")))
}

fn crossbar_fidelity(_: &Path) -> Outcome {
    let (model, train_set, test) = reference_net()?;
    let cfg = CrossbarConfig { sensing: Sensing::Adc { bits: 12 }, levels: 256, ..CrossbarConfig::default() };
    let prog = map_weights(&model, &cfg)?;
    let calib: Vec<usize> = (0..256).collect();
    let prog = calibrate_adc(&model, &prog, &train_set.x.select_rows(&calib))?;
    let analog = faulty_forward(&model, &prog, &test.x)?.argmax_rows();
    let digital = model.infer(&test.x)?.argmax_rows();
    let agree = analog.iter().zip(&digital).filter(|(a, b)| a == b).count();
    let frac = agree as f64 / test.len() as f64;
    Ok((frac >= 0.99 && test.len() >= 1000, format!("{agree}/{} top-1 agreement, 12-bit ADC, 256 levels", test.len())))
}

fn ood_detection(dir: &Path) -> Outcome {
    let t = Instant::now();
    let s = run_config(
        "task = \"ood-eval\"\nseeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]\n[bayes]\nkind = \"scale\"\np = 0.2\n",
        dir,
    )?;
    let secs = t.elapsed().as_secs_f64();
    let (det, auroc) = (mean(&s, None, "detection_rate")?, mean(&s, None, "auroc")?);
    Ok((
        det >= 0.90 && auroc >= 0.95 && secs < 300.0,
        format!("10-seed detection rate {det:.4}, AUROC {auroc:.4} in {secs:.0} s"),
    ))
}

fn single_source(_: &Path) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for depth in [2, 8, 20] {
        let spec = ArchSpec::new(Arch::Mlp(vec![12; depth]), vec![4], 3).with_bayes(Bayes::Scale { p: 0.3, adaptive: None });
        let model = build(&spec, depth as u64)?;
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64 * 0.7).sin()).collect())?;
        let run = mc_forward_instrumented(&model, &x, 16, 3)?;
        let good = run.rng.iter().all(|st| {
            let total = st.total();
            st.source_count() == 1
                && st.sources.contains_key(&SCALE_SOURCE)
                && total.bernoulli == depth as u64
                && total.gaussian == 0
                && total.ternary == 0
        });
        ok &= good && run.rng.len() == 16;
        notes.push(format!("L={depth}: {}", if good { "1 source, L draws" } else { "mismatch" }));
    }
    Ok((ok, notes.join("; ")))
}

fn vi_sanity(dir: &Path) -> Outcome {
    let prior_sigma = 0.25;
    let at_prior = ScaleVi {
        mu: Tensor::full(&[32], 1.0),
        rho: Tensor::full(&[32], inverse_softplus(prior_sigma)),
        prior_sigma,
        source: 1,
    };
    let kl_prior = scale_vi_kl(&at_prior).0;

    // one SGD epoch on the ELBO, checking the KL of every batch
    let cfg = ExperimentConfig::from_toml("task = \"train\"")?;
    let data = load_data(&cfg, 0)?;
    let spec = ArchSpec::new(Arch::MlpS, data.train.sample_shape(), data.train.classes).with_bayes(Bayes::Vi { prior_sigma });
    let mut model = build(&spec, 0)?;
    let idx: Vec<usize> = (0..data.train.len()).collect();
    let batches = idx.chunks(64).count();
    let mut min_kl = f64::INFINITY;
    for (b, chunk) in idx.chunks(64).enumerate() {
        let elbo = bayesian::vi_elbo(&model, &data.train.subset(chunk), 1.0 / batches as f64, b as u64)?;
        min_kl = min_kl.min(elbo.kl);
        for (layer, grads) in model.layers.iter_mut().zip(&elbo.grads) {
            for (p, g) in layer.params_mut().into_iter().zip(grads) {
                p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= 0.01 * d);
            }
        }
    }

    let det = run_config("task = \"mc-eval\"\n", &dir.join("det"))?;
    let vi = run_config("task = \"mc-eval\"\n[bayes]\nkind = \"vi\"\n", &dir.join("vi"))?;
    let (a_det, a_vi) = (mean(&det, None, "accuracy")?, mean(&vi, None, "accuracy")?);
    let gap = (a_det - a_vi).abs() * 100.0;
    Ok((
        min_kl >= 0.0 && kl_prior.abs() <= 1e-9 && gap <= 1.0,
        format!(
            "min batch KL {min_kl:.3e} over {batches} batches; KL at prior {kl_prior:.1e}; accuracy {a_vi:.4} vs {a_det:.4} ({gap:.2} points)"
        ),
    ))
}

fn oneshot_testing(dir: &Path) -> Outcome {
    let t = Instant::now();
    let s = run_config(
        "task = \"oneshot\"\nseeds = [0]\n[crossbar]\nread_noise_sigma = 0.01\n\
         [faults]\nkind = \"on\"\nrates = [0.01, 0.02, 0.05, 0.10]\nscenarios = 100\n[oneshot]\nchecks = 200\n",
        dir,
    )?;
    let secs = t.elapsed().as_secs_f64();
    let passes = mean(&s, Some(0.05), "fault_free_passes")?;
    let cov: Vec<f64> = [0.01, 0.02, 0.05, 0.10].iter().map(|&r| mean(&s, Some(r), "coverage")).collect::<Result<_, _>>()?;
    let monotone = cov.windows(2).all(|w| w[1] >= w[0]);
    Ok((
        passes >= 198.0 && cov[2] >= 0.95 && monotone && secs < 600.0,
        format!(
            "{passes:.0}/200 fault-free passes; detected {:.0}/100 at 5%; coverage over 1/2/5/10%: {cov:?}{} in {secs:.0} s",
            cov[2] * 100.0,
            if monotone { "" } else { " (not monotone)" }
        ),
    ))
}

/// One-sided sign test: P(at least `wins` successes in `n` fair coin flips).
fn sign_test(wins: usize, n: usize) -> f64 {
    let mut c = 1.0f64;
    let mut tail = 0.0;
    for i in 0..=n {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        if i >= wins {
            tail += c;
        }
    }
    tail / 2f64.powi(n as i32)
}

fn ranking(dir: &Path) -> Outcome {
    let seeds: Vec<String> = (0..20).map(|s| s.to_string()).collect();
    let s = run_config(&format!("task = \"rank\"\nseeds = [{}]\n", seeds.join(", ")), dir)?;
    let ranked = metric_by_seed(&s, "ranked_coverage");
    let random = metric_by_seed(&s, "random_coverage");
    let diffs: Vec<f64> = ranked.iter().zip(&random).map(|(a, b)| a - b).collect();
    let wins = diffs.iter().filter(|d| **d > 0.0).count();
    let losses = diffs.iter().filter(|d| **d < 0.0).count();
    let p = sign_test(wins, wins + losses);
    let mean_diff = diffs.iter().sum::<f64>() / diffs.len() as f64;
    Ok((
        diffs.len() == 20 && mean_diff > 0.0 && p < 0.05,
        format!("ranked beats random {wins}, loses {losses} of 20 seeds; mean difference {mean_diff:.4}; sign test p = {p:.2e}"),
    ))
}

fn fingerprint(dir: &Path) -> Outcome {
    let s = run_config(
        "task = \"fingerprint\"\nseeds = [0]\n[faults]\nkind = \"on\"\nstuck_rate = 0.05\nscenarios = 100\n",
        dir,
    )?;
    let r = Some(0.05);
    let (fp, det, gap) = (mean(&s, r, "false_positives")?, mean(&s, r, "detection_rate")?, mean(&s, r, "accuracy_gap")?);
    Ok((
        fp == 0.0 && det >= 0.90 && gap.abs() <= 1.0,
        format!("{fp:.0} false positives on the calibration set; per-input detection {det:.4}; accuracy gap {gap:.2} points"),
    ))
}

fn approx_bn(dir: &Path) -> Outcome {
    let s = run_config(
        "task = \"recalibrate\"\nseeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]\n[crossbar]\ntile_rows = 32\ntile_cols = 32\n\
         [faults]\nstuck_rate = 0.0\nvariation_sigma = 0.3\ntile_sigma = 2.0\n[recalibrate]\nfraction = 0.002\neval_scenarios = 5\n",
        dir,
    )?;
    let r = Some(0.0);
    let (loss, rec) = (mean(&s, r, "accuracy_loss")?, mean(&s, r, "accuracy_recovered")?);
    let share = rec / loss;
    Ok((
        loss >= 0.20 && share >= 0.5,
        format!("variation costs {:.1} points; recalibration recovers {:.1} ({:.0}%)", loss * 100.0, rec * 100.0, share * 100.0),
    ))
}

fn reference_generation(dir: &Path) -> Outcome {
    let s = run_config(
        "task = \"recalibrate\"\nseeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]\n[model]\nbinary = true\n[train]\nlearning_rate = 0.01\n\
         [crossbar]\nsensing = \"bps\"\n[faults]\nstuck_rate = 0.0\nvariation_sigma = 0.1\n[recalibrate]\nmethod = \"reference\"\n",
        dir,
    )?;
    let r = Some(0.0);
    let (zero, generated) = (mean(&s, r, "accuracy_theta_zero")?, mean(&s, r, "accuracy_reference")?);
    Ok((generated > zero, format!("10-seed accuracy {generated:.4} with generated references vs {zero:.4} at zero")))
}

fn strip_wall_time(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"wall_time_ms\"")).collect::<Vec<_>>().join("\n")
}

fn determinism(dir: &Path) -> Outcome {
    let configs = [
        "task = \"sweep\"\nseeds = [0, 1]\n[dataset]\nn = 2000\ntest_n = 300\n[faults]\nrates = [0.0, 0.01, 0.02, 0.05, 0.10]\n",
        "task = \"ood-eval\"\nseeds = [3]\n[dataset]\nn = 2000\ntest_n = 300\n[bayes]\nkind = \"scale\"\n",
    ];
    let mut same = true;
    for (i, text) in configs.iter().enumerate() {
        let mut outputs = Vec::new();
        for threads in [1, 3, 1] {
            let out = dir.join(format!("c{i}_t{threads}_{}", outputs.len()));
            par::with_threads(threads, || run_config(text, &out).map(|_| ()).map_err(|e| e.to_string()))?;
            let summary = std::fs::read_to_string(out.join(experiment::SUMMARY_FILE))?;
            let table = std::fs::read_to_string(out.join(experiment::TABLE_FILE))?;
            outputs.push((strip_wall_time(&summary), table));
        }
        same &= outputs.windows(2).all(|w| w[0] == w[1]);
    }
    Ok((same, "sweep and ood-eval summaries identical across 3 runs at 1 and 3 threads".into()))
}

type Criterion = fn(&Path) -> Outcome;

fn main() {
    let criteria: [(&str, Criterion); 11] = [
        ("gradient oracle", gradient_oracle),
        ("crossbar fidelity", crossbar_fidelity),
        ("OOD detection", ood_detection),
        ("single-source contract", single_source),
        ("VI sanity", vi_sanity),
        ("one-shot testing", oneshot_testing),
        ("ranking beats random", ranking),
        ("fingerprint self-test", fingerprint),
        ("ApproxBN recovery", approx_bn),
        ("reference generation", reference_generation),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let dir = root.path().join(format!("c{}", i + 1));
        let (ok, detail) = match check(&dir) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {:>2}. {name}: {detail} ({:.1} s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
