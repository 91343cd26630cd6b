use cimlab::crossbar::{faulty_forward, map_weights, CrossbarConfig, Sensing};
use cimlab::experiment::{load_data, run, ExperimentConfig};
use cimlab::mitigation::{approx_bn_recalibrate, generate_reference, variation_aware_loss_hook, CalibrationSet};
use cimlab::nn::layers::Dense;
use cimlab::nn::train::accuracy_from_logits;
use cimlab::nn::{accuracy, build, train, Arch, ArchSpec, Layer, Model, NoiseSpec, TrainConfig};
use cimlab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[test]
fn recalibrating_a_clean_array_changes_little() {
    let data = load_data(&ExperimentConfig::from_toml("task = \"train\"").unwrap(), 0).unwrap();
    let mut model = build(&ArchSpec::new(Arch::MlpS, data.train.sample_shape(), data.train.classes), 0).unwrap();
    train(&mut model, &data.train, &TrainConfig { epochs: 5, ..TrainConfig::default() }).unwrap();
    let prog = map_weights(&model, &CrossbarConfig::default()).unwrap();
    let calib = CalibrationSet::select(&data.train, 0.002, None, 1).unwrap();
    assert_eq!(calib.inputs.rows(), 20);
    let recal = approx_bn_recalibrate(&model, &prog, &calib).unwrap();
    for (a, b) in model.layers.iter().zip(&recal.layers) {
        assert_eq!(a.params(), b.params());
    }
    let before = accuracy_from_logits(&faulty_forward(&model, &prog, &data.test.x).unwrap(), &data.test.y, data.test.classes);
    let after = accuracy_from_logits(&faulty_forward(&recal, &prog, &data.test.x).unwrap(), &data.test.y, data.test.classes);
    assert!((before - after).abs() * 100.0 <= 0.5, "{before} -> {after}");
}

#[test]
fn zero_training_noise_is_the_baseline() {
    let data = cimlab::data::moons(400, 0.1, 3);
    let spec = ArchSpec::new(Arch::Mlp(vec![16, 16]), vec![2], 2);
    let cfg = TrainConfig { epochs: 3, seed: 5, ..TrainConfig::default() };
    let mut a = build(&spec, 5).unwrap();
    let mut b = build(&spec, 5).unwrap();
    let la = train(&mut a, &data, &cfg).unwrap();
    let lb = train(&mut b, &data, &TrainConfig { noise_spec: Some(NoiseSpec { sigma: 0.0 }), ..cfg }).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn training_noise_is_fresh_per_batch() {
    let spec = ArchSpec::new(Arch::Mlp(vec![4]), vec![3], 2);
    let m = build(&spec, 0).unwrap();
    let cfg = TrainConfig { noise_spec: Some(NoiseSpec { sigma: 0.1 }), ..TrainConfig::default() };
    let policy = variation_aware_loss_hook(&cfg).unwrap();
    let a = policy.multipliers(&m, 0, 0).unwrap();
    assert_ne!(a, policy.multipliers(&m, 0, 1).unwrap());
    assert_ne!(a, policy.multipliers(&m, 1, 0).unwrap());
    assert_eq!(a, policy.multipliers(&m, 0, 0).unwrap());
}

#[test]
fn noise_trained_models_hold_up_under_variation() {
    let seeds = "seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]\n";
    let eval = "[faults]\nstuck_rate = 0.0\nvariation_sigma = 0.1\n";
    let plain = ExperimentConfig::from_toml(&format!("task = \"inject\"\n{seeds}{eval}")).unwrap();
    let noisy = ExperimentConfig::from_toml(&format!("task = \"inject\"\n{seeds}[train]\nnoise_sigma = 0.1\n{eval}")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = run(&plain, &dir.path().join("plain")).unwrap().mean(Some(0.0), "faulty_accuracy").unwrap();
    let b = run(&noisy, &dir.path().join("noisy")).unwrap().mean(Some(0.0), "faulty_accuracy").unwrap();
    assert!((b - a) * 100.0 >= 2.0, "noise-trained {b} vs plain {a}");
}

fn sign_model(w: Vec<f64>, fan_out: usize, bias: f64) -> Model {
    let fan_in = w.len() / fan_out;
    let dense = Dense::new(Tensor::new(vec![fan_out, fan_in], w).unwrap(), Tensor::full(&[fan_out], bias));
    Model::new(vec![fan_in], vec![Layer::Dense(dense), Layer::Sign], 0).unwrap()
}

#[test]
fn single_scenario_reference_is_the_gap_midpoint() {
    // w = 1 spans the full conductance range of 99, so currents are 99·x₀;
    // the digital split sits between x₀ = -2 and x₀ = 1
    let model = sign_model(vec![1.0, 0.0], 1, 0.5);
    let cfg = CrossbarConfig { sensing: Sensing::BinarizedPartialSum, ..CrossbarConfig::default() };
    let prog = map_weights(&model, &cfg).unwrap();
    let x = Tensor::new(vec![4, 2], vec![-3.0, 0.0, -2.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
    let r = generate_reference(&model, &prog, &x, 1, 0.0, 0).unwrap();
    assert_eq!(r.scenario_count, 1);
    assert!((r.theta[0][0] - 99.0 * -0.5).abs() < 1e-9, "{}", r.theta[0][0]);
}

#[test]
fn mirrored_columns_get_thresholds_near_zero() {
    let mut g = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut g)).collect();
    let mut both = w.clone();
    both.extend(w.iter().map(|v| -v));
    let model = sign_model(both, 2, 0.0);
    let cfg = CrossbarConfig { sensing: Sensing::BinarizedPartialSum, ..CrossbarConfig::default() };
    let prog = map_weights(&model, &cfg).unwrap();
    let x = Tensor::new(vec![400, 8], (0..3200).map(|_| StandardNormal.sample(&mut g)).collect()).unwrap();
    let r = generate_reference(&model, &prog, &x, 5, 0.05, 9).unwrap();
    assert_eq!(r, generate_reference(&model, &prog, &x, 5, 0.05, 9).unwrap());
    let typical = prog.config.g_range() * w.iter().map(|v| v * v).sum::<f64>().sqrt() / w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for &t in &r.theta[0] {
        assert!(t.abs() <= 0.05 * typical, "theta {t} against current scale {typical}");
    }
}

#[test]
fn binary_model_trains_on_separable_blobs() {
    let blobs = cimlab::data::Blobs::new(2, 4, 1.0, 5.0, 1);
    let (tr, te) = (blobs.sample(500, 0), blobs.sample(200, 1));
    let spec = ArchSpec::new(Arch::Mlp(vec![32]), vec![4], 2).binary(true);
    let mut m = build(&spec, 1).unwrap();
    train(&mut m, &tr, &TrainConfig { epochs: 10, learning_rate: 0.01, ..TrainConfig::default() }).unwrap();
    assert!(accuracy(&m, &te).unwrap() >= 0.95);
}
