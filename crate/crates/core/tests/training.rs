use cimlab::data::Blobs;
use cimlab::nn::layers::softmax_rows;
use cimlab::nn::{accuracy, binarize_ste, build, ste_mask, train, Arch, ArchSpec, TrainConfig};
use cimlab::Tensor;
use proptest::prelude::*;

#[test]
fn two_blobs_are_learned() {
    let data = Blobs::new(2, 8, 1.0, 5.0, 3).sample(500, 0);
    let mut m = build(&ArchSpec::new(Arch::Mlp(vec![16]), vec![8], 2), 3).unwrap();
    let log = train(&mut m, &data, &TrainConfig { epochs: 20, ..TrainConfig::default() }).unwrap();
    assert!(log.epochs.last().unwrap().accuracy >= 0.95);
    assert!(accuracy(&m, &data).unwrap() >= 0.95);
}

#[test]
fn zero_epochs_change_nothing() {
    let data = Blobs::new(3, 4, 1.0, 5.0, 0).sample(50, 0);
    let before = build(&ArchSpec::new(Arch::MlpS, vec![4], 3), 1).unwrap();
    let mut m = before.clone();
    let log = train(&mut m, &data, &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m, before);
}

#[test]
fn training_is_reproducible() {
    let data = Blobs::new(4, 6, 1.5, 4.0, 2).sample(300, 0);
    let spec = ArchSpec::new(Arch::MlpS, vec![6], 4).binary(true);
    let run = || {
        let mut m = build(&spec, 8).unwrap();
        let log = train(&mut m, &data, &TrainConfig { epochs: 2, seed: 8, ..TrainConfig::default() }).unwrap();
        (m, log)
    };
    let (a, b) = (run(), run());
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-50.0f64..50.0, 1..40), cols in 1usize..5) {
        let n = z.len() / cols * cols;
        prop_assume!(n > 0);
        let p = softmax_rows(&z[..n], cols);
        for row in p.chunks(cols) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ste_binarizes_and_masks_by_magnitude(w in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let t = Tensor::from_vec(w.clone());
        let b = binarize_ste(&t);
        let mask = ste_mask(&t);
        for ((v, s), k) in w.iter().zip(b.data()).zip(mask.data()) {
            prop_assert_eq!(*s, if *v >= 0.0 { 1.0 } else { -1.0 });
            prop_assert_eq!(*k, if v.abs() <= 1.0 { 1.0 } else { 0.0 });
        }
    }
}
