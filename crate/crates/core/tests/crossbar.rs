use cimlab::crossbar::{
    analog_mvm, apply_fault_map, apply_tile_gain, apply_variation, faulty_forward, inject_faults, map_weights,
    CrossbarConfig, CrossbarProgram, FaultKind, FaultMap,
};
use cimlab::experiment::{run, ExperimentConfig};
use cimlab::nn::layers::Dense;
use cimlab::nn::{build, Arch, ArchSpec, Layer, Model};
use cimlab::Tensor;
use proptest::prelude::*;

fn dense_model(w: Tensor) -> Model {
    let out = w.shape()[0];
    let inp = w.shape()[1];
    Model::new(vec![inp], vec![Layer::Dense(Dense::new(w, Tensor::zeros(&[out])))], 0).unwrap()
}

fn program(w: Tensor, cfg: &CrossbarConfig) -> CrossbarProgram {
    map_weights(&dense_model(w), cfg).unwrap()
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn quantization_error_is_half_a_step(w in matrix(4, 4, -1.0, 1.0)) {
        let cfg = CrossbarConfig { levels: 16, w_max: Some(1.0), ..CrossbarConfig::default() };
        let back = program(w.clone(), &cfg).read_back(0).unwrap();
        let bound = 1.0 / 15.0 / 2.0 + 1e-6;
        for (a, b) in back.data().iter().zip(w.data()) {
            prop_assert!((a - b).abs() <= bound, "{a} vs {b}");
        }
    }

    #[test]
    fn ideal_mvm_matches_digital_matmul(
        (fan_out, fan_in, w, x) in (1usize..9, 1usize..11).prop_flat_map(|(o, i)| {
            (Just(o), Just(i), matrix(o, i, -2.0, 2.0), matrix(3, i, -1.5, 1.5))
        }),
        tile in 1usize..5,
    ) {
        let cfg = CrossbarConfig { tile_rows: tile, tile_cols: tile + 1, ..CrossbarConfig::default() };
        let prog = program(w, &cfg);
        let got = analog_mvm(&prog, 0, &x, 7).unwrap();
        let back = prog.read_back(0).unwrap();
        for r in 0..3 {
            for o in 0..fan_out {
                let want: f64 = (0..fan_in).map(|i| x.row(r)[i] * back.data()[o * fan_in + i]).sum();
                let g = got.row(r)[o];
                prop_assert!((g - want).abs() <= 1e-5 * want.abs().max(1e-3), "{g} vs {want}");
            }
        }
    }

    #[test]
    fn variation_stays_in_conductance_range(sigma in 0.0f64..3.0, seed in any::<u64>()) {
        let w = Tensor::new(vec![6, 5], (0..30).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let cfg = CrossbarConfig::default();
        let prog = apply_variation(&program(w, &cfg), sigma, seed).unwrap();
        let prog = apply_tile_gain(&prog, sigma, seed ^ 1).unwrap();
        prop_assert!(prog.conductances().all(|g| (cfg.g_off..=cfg.g_on).contains(&g)));
    }

    #[test]
    fn same_seed_gives_nested_fault_sets(lo in 0.0f64..0.3, extra in 0.0f64..0.3, seed in any::<u64>()) {
        let w = Tensor::full(&[10, 12], 0.3);
        let prog = program(w, &CrossbarConfig { tile_rows: 5, tile_cols: 4, ..CrossbarConfig::default() });
        let (_, small) = inject_faults(&prog, lo, 0.0, seed).unwrap();
        let (_, large) = inject_faults(&prog, lo + extra, 0.0, seed).unwrap();
        prop_assert!(small.entries.keys().all(|c| large.entries.contains_key(c)));
    }

    #[test]
    fn fault_maps_round_trip_through_text(rate in 0.0f64..0.5, seed in any::<u64>()) {
        let prog = program(Tensor::full(&[4, 6], -0.2), &CrossbarConfig { tile_rows: 3, tile_cols: 3, ..CrossbarConfig::default() });
        let (faulty, map) = inject_faults(&prog, rate / 2.0, rate / 2.0, seed).unwrap();
        let parsed = FaultMap::from_text(&map.to_text()).unwrap();
        prop_assert_eq!(&parsed, &map);
        prop_assert_eq!(apply_fault_map(&prog, &parsed).unwrap(), faulty);
    }
}

#[test]
fn fault_count_follows_the_binomial() {
    // 5000 weights on differential pairs: 10 000 cells
    let prog = program(Tensor::full(&[50, 100], 0.1), &CrossbarConfig::default());
    assert_eq!(prog.cell_count(), 10_000);
    let sd = (10_000.0f64 * 0.05 * 0.95).sqrt();
    for seed in 0..10 {
        let (_, map) = inject_faults(&prog, 0.05, 0.0, seed).unwrap();
        assert!((map.len() as f64 - 500.0).abs() <= 4.0 * sd, "seed {seed}: {} faults", map.len());
        assert_eq!(map.count(|k| k == FaultKind::StuckOn), map.len());
    }
}

#[test]
fn variation_log_spread_matches_sigma() {
    // positive weights at half range keep the G+ cells far from both clamps
    let cfg = CrossbarConfig { w_max: Some(1.0), ..CrossbarConfig::default() };
    let prog = program(Tensor::full(&[100, 100], 0.5), &cfg);
    let varied = apply_variation(&prog, 0.1, 11).unwrap();
    let logs: Vec<f64> = prog.tiles.iter().zip(&varied.tiles)
        .flat_map(|(a, b)| a.g_plus.iter().zip(&b.g_plus).map(|(x, y)| (y / x).ln()))
        .collect();
    assert_eq!(logs.len(), 10_000);
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let sd = (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
    assert!((sd - 0.1).abs() <= 0.01, "log std {sd}");
}

#[test]
fn all_stuck_off_leaves_only_the_biases() {
    let spec = ArchSpec::new(Arch::Mlp(vec![12, 8]), vec![5], 3);
    let model = build(&spec, 4).unwrap();
    let prog = map_weights(&model, &CrossbarConfig { tile_rows: 4, tile_cols: 4, ..CrossbarConfig::default() }).unwrap();
    let (dead, _) = inject_faults(&prog, 0.0, 1.0, 9).unwrap();
    let mut zeroed = model.clone();
    for layer in &mut zeroed.layers {
        if let Layer::Dense(d) = layer {
            d.weight = Tensor::zeros(d.weight.shape());
        }
    }
    let x = Tensor::new(vec![4, 5], (0..20).map(|i| i as f64 / 7.0 - 1.0).collect()).unwrap();
    let got = faulty_forward(&model, &dead, &x).unwrap();
    let want = zeroed.infer(&x).unwrap();
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn stuck_on_faults_cost_accuracy_on_the_reference_task() {
    let cfg = ExperimentConfig::from_toml(
        "task = \"inject\"\nseeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19]\n\
         [faults]\nkind = \"on\"\nstuck_rate = 0.05\n",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let s = run(&cfg, dir.path()).unwrap();
    let clean = s.mean(Some(0.05), "clean_accuracy").unwrap();
    let faulty = s.mean(Some(0.05), "faulty_accuracy").unwrap();
    assert!(faulty < clean, "faulty {faulty} vs clean {clean}");
}
