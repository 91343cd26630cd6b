//! Random small networks and a finite-difference gradient check.

use cimlab::nn::layers::{AffineDropout, BatchNorm, ChannelScale, Conv2d, Dense, Dropout, DropoutKind, Layer, ScaleVi};
use cimlab::nn::{one_hot, Loss, Mode, Model};
use cimlab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

fn dense(r: &mut ChaCha8Rng, i: usize, o: usize) -> Layer {
    Layer::Dense(Dense::new(rand_tensor(r, &[o, i], 0.8), rand_tensor(r, &[o], 0.3)))
}

fn bn(r: &mut ChaCha8Rng, c: usize, affine: bool) -> Layer {
    let mut b = BatchNorm::new(c);
    b.gamma = rand_tensor(r, &[c], 1.0).map(|v| v + 1.5);
    b.beta = rand_tensor(r, &[c], 0.5);
    if affine {
        b.affine_dropout = Some(AffineDropout { delta: 0.2, p: 0.6, source: 40 });
    }
    Layer::BatchNorm(b)
}

/// A small random network drawn from a handful of templates.
pub fn random_net(seed: u64) -> (Model, Tensor, Tensor, Loss) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let template = seed % 5;
    let n = 4;
    let (input, layers, out): (Vec<usize>, Vec<Layer>, usize) = match template {
        0 => {
            let (i, h, o) = (r.gen_range(2..5), r.gen_range(3..6), r.gen_range(2..4));
            (vec![i], vec![dense(&mut r, i, h), bn(&mut r, h, false), Layer::Relu, dense(&mut r, h, o)], o)
        }
        1 => {
            let (i, h, o) = (3, 5, 3);
            let scale = ChannelScale { scale: rand_tensor(&mut r, &[h], 1.0).map(|v| v + 1.2), drop_p: 0.5, source: 0 };
            (vec![i], vec![dense(&mut r, i, h), Layer::Scale(scale), Layer::Relu, dense(&mut r, h, o), Layer::Softmax], o)
        }
        2 => {
            let conv = Conv2d { weight: rand_tensor(&mut r, &[3, 2, 3, 3], 0.5), bias: rand_tensor(&mut r, &[3], 0.2), binary: false };
            (
                vec![2, 4, 4],
                vec![Layer::Conv2d(conv), bn(&mut r, 3, false), Layer::Relu, Layer::Flatten, dense(&mut r, 48, 3)],
                3,
            )
        }
        3 => {
            let (i, h, o) = (4, 6, 2);
            let vi = ScaleVi { mu: rand_tensor(&mut r, &[h], 0.3).map(|v| v + 1.0), rho: rand_tensor(&mut r, &[h], 1.0).map(|v| v - 2.0), prior_sigma: 0.25, source: 7 };
            let drop = Dropout { kind: DropoutKind::Neuron(0.3), source: 8 };
            (vec![i], vec![dense(&mut r, i, h), Layer::ScaleVi(vi), Layer::Relu, Layer::Dropout(drop), dense(&mut r, h, o)], o)
        }
        _ => {
            let conv = Conv2d { weight: rand_tensor(&mut r, &[4, 1, 3, 3], 0.6), bias: rand_tensor(&mut r, &[4], 0.2), binary: false };
            let drop = Dropout { kind: DropoutKind::Spatial(0.3), source: 9 };
            (
                vec![1, 3, 3],
                vec![Layer::Conv2d(conv), bn(&mut r, 4, true), Layer::Relu, Layer::Dropout(drop), Layer::Flatten, dense(&mut r, 36, 2)],
                2,
            )
        }
    };
    let mut shape = vec![n];
    shape.extend(&input);
    let x = rand_tensor(&mut r, &shape, 1.0);
    let (target, loss) = if seed % 2 == 0 {
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..out)).collect();
        (one_hot(&labels, out), if template == 1 { Loss::Mse } else { Loss::CrossEntropy })
    } else {
        (rand_tensor(&mut r, &[n, out], 1.0), Loss::Mse)
    };
    let mut m = Model::new(input, layers, seed).unwrap();
    m.mode = Mode::Train;
    (m, x, target, loss)
}

fn loss_at(m: &Model, x: &Tensor, t: &Tensor, loss: Loss) -> f64 {
    loss.evaluate(&m.forward(x).unwrap(), t).unwrap().0
}

/// Relative error with an absolute floor, so tensors whose true gradient is
/// zero (a bias feeding batch normalization) compare against rounding noise.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-5)
}

/// Worst relative error over all parameter tensors and the input.
pub fn check_net(seed: u64) -> f64 {
    let (m, x, t, loss) = random_net(seed);
    let g = m.backward(&x, &t, loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..m.layers.len() {
        for pi in 0..m.layers[li].params().len() {
            let len = m.layers[li].params()[pi].len();
            let mut num = vec![0.0; len];
            for k in 0..len {
                let mut mp = m.clone();
                mp.layers[li].params_mut()[pi].data_mut()[k] += h;
                let mut mm = m.clone();
                mm.layers[li].params_mut()[pi].data_mut()[k] -= h;
                num[k] = (loss_at(&mp, &x, &t, loss) - loss_at(&mm, &x, &t, loss)) / (2.0 * h);
            }
            let e = rel_err(g.params[li][pi].data(), &num);
            worst = worst.max(e);
        }
    }
    let mut num = vec![0.0; x.len()];
    for k in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        num[k] = (loss_at(&m, &xp, &t, loss) - loss_at(&m, &xm, &t, loss)) / (2.0 * h);
    }
    worst.max(rel_err(g.input.data(), &num))
}
