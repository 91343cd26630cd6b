use crate::error::{LabError, Result};
use crate::nn::layers::softmax_rows;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Softmax cross-entropy on logits against probability (usually one-hot) targets.
    CrossEntropy,
    /// Sum of squared errors per sample, averaged over the batch.
    Mse,
}

impl Loss {
    /// Batch-mean loss and its gradient with respect to `out`.
    pub fn evaluate(self, out: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        if out.shape() != target.shape() {
            return Err(LabError::InvalidShape(format!(
                "loss: output {:?} vs target {:?}",
                out.shape(),
                target.shape()
            )));
        }
        let n = out.rows() as f64;
        match self {
            Loss::Mse => {
                let diff = out.zip_map(target, |a, b| a - b);
                let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
                Ok((value, diff.map(|d| 2.0 * d / n)))
            }
            Loss::CrossEntropy => {
                let cols = out.row_len();
                let p = softmax_rows(out.data(), cols);
                let mut value = 0.0;
                for (pv, tv) in p.iter().zip(target.data()) {
                    if *tv != 0.0 {
                        value -= tv * pv.max(f64::MIN_POSITIVE).ln();
                    }
                }
                let grad: Vec<f64> = p.iter().zip(target.data()).map(|(pv, tv)| (pv - tv) / n).collect();
                Ok((value / n, Tensor::new(out.shape().to_vec(), grad)?))
            }
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_zero_signal() {
        let t = Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap();
        let (v, g) = Loss::Mse.evaluate(&t, &t).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::zeros(&[1, 4]);
        let (v, _) = Loss::CrossEntropy.evaluate(&z, &one_hot(&[2], 4)).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }
}
