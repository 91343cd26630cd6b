use std::collections::BTreeMap;

use crate::error::{LabError, Result};
use crate::nn::layers::{Cache, Layer, PassCtx};
use crate::nn::loss::Loss;
use crate::nn::sampler::{RngStats, Sampler};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A sequential network over batched inputs `[N, ...input_shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub mode: Mode,
    pub seed: u64,
    input_shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct PassOptions<'a> {
    pub batch_stats: bool,
    pub stochastic: bool,
    /// Optional multiplier per layer, applied to effective matmul weights.
    pub weight_multipliers: Option<&'a [Option<Tensor>]>,
    /// Keep every layer output in [`Trace::outputs`].
    pub record: bool,
}

impl PassOptions<'_> {
    pub fn eval() -> Self {
        Self::default()
    }

    /// Normalization uses running statistics but stochastic layers sample.
    pub fn sampling() -> Self {
        Self { stochastic: true, ..Self::default() }
    }

    pub fn train() -> Self {
        Self { batch_stats: true, stochastic: true, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub output: Tensor,
    pub caches: Vec<Cache>,
    /// Output of layer `i` at index `i`, when recording was requested.
    pub outputs: Vec<Tensor>,
    pub rng: RngStats,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per layer, matching [`Layer::params`].
    pub params: Vec<Vec<Tensor>>,
    pub input: Tensor,
    pub loss: f64,
}

impl Model {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let m = Self { layers, mode: Mode::Eval, seed, input_shape };
        m.layer_shapes()?;
        m.check_scale_sources()?;
        Ok(m)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = l.output_shape(&cur).map_err(|detail| LabError::Shape { layer: i, detail })?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> usize {
        self.layer_shapes()
            .ok()
            .and_then(|s| s.last().map(|v| v.iter().product()))
            .unwrap_or_else(|| self.input_shape.iter().product())
    }

    fn check_scale_sources(&self) -> Result<()> {
        let mut src = None;
        for l in &self.layers {
            if let Layer::Scale(s) = l {
                if s.drop_p > 0.0 {
                    match src {
                        Some(id) if id != s.source => {
                            return Err(LabError::Config(format!(
                                "scale dropout layers use sources {id} and {}; exactly one is allowed",
                                s.source
                            )))
                        }
                        _ => src = Some(s.source),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn has_stochastic_layers(&self) -> bool {
        self.layers.iter().any(Layer::is_stochastic)
    }

    /// Forward in the model's current mode. `Eval` is deterministic; `Train`
    /// uses batch statistics and samples stochastic layers from `self.seed`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let opts = match self.mode {
            Mode::Eval => PassOptions::eval(),
            Mode::Train => PassOptions::train(),
        };
        let mut sampler = Sampler::new(self.seed);
        Ok(self.run(x, &opts, &mut sampler)?.output)
    }

    pub fn run(&self, x: &Tensor, opts: &PassOptions<'_>, sampler: &mut Sampler) -> Result<Trace> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut shape = self.input_shape.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).map_err(|detail| LabError::Shape { layer: i, detail })?;
            let mult = opts.weight_multipliers.and_then(|m| m.get(i)).and_then(Option::as_ref);
            let mut ctx = PassCtx {
                batch_stats: opts.batch_stats,
                stochastic: opts.stochastic,
                sampler: &mut *sampler,
                weight_multiplier: mult,
            };
            let (y, cache) = layer.forward(&cur, &mut ctx)?;
            caches.push(cache);
            if opts.record {
                outputs.push(y.clone());
            }
            cur = y;
        }
        Ok(Trace { output: cur, caches, outputs, rng: sampler.stats() })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(LabError::Shape {
                layer: 0,
                detail: format!("expected [N, {:?}], got {:?}", self.input_shape, x.shape()),
            });
        }
        Ok(())
    }

    /// Backpropagates `grad_out` through a recorded trace. `extra[i]` is added
    /// to the gradient flowing into the output of layer `i`.
    pub fn backprop(&self, trace: &Trace, grad_out: Tensor, extra: &BTreeMap<usize, Tensor>) -> Result<Gradients> {
        let mut g = grad_out;
        let mut params = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            if let Some(e) = extra.get(&i) {
                g.add_assign(e);
            }
            let (gx, gp) = self.layers[i].backward(&trace.caches[i], &g)?;
            params[i] = gp;
            g = gx;
        }
        Ok(Gradients { params, input: g, loss: 0.0 })
    }

    /// Loss gradient for every trainable parameter and for the input batch.
    pub fn backward(&self, x: &Tensor, target: &Tensor, loss: Loss) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(LabError::Config("backward requires a model in Train mode".into()));
        }
        let mut sampler = Sampler::new(self.seed);
        let trace = self.run(x, &PassOptions::train(), &mut sampler)?;
        let (value, g) = loss.evaluate(&trace.output, target)?;
        if !value.is_finite() {
            return Err(LabError::NonFiniteLoss { batch: 0 });
        }
        let mut grads = self.backprop(&trace, g, &BTreeMap::new())?;
        grads.loss = value;
        Ok(grads)
    }

    /// Folds the batch statistics of a training trace into running statistics.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            if let (Layer::BatchNorm(b), Cache::Norm { batch_stats: true, mean, var, xhat, .. }) = (layer, cache) {
                let (n, _, sp) = crate::nn::layers::channel_layout(xhat.shape());
                let m = (n * sp) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let k = b.momentum;
                for (rm, &bm) in b.running_mean.data_mut().iter_mut().zip(mean) {
                    *rm = (1.0 - k) * *rm + k * bm;
                }
                for (rv, &bv) in b.running_var.data_mut().iter_mut().zip(var) {
                    *rv = ((1.0 - k) * *rv + k * bv * unbias).max(b.eps);
                }
            }
        }
    }

    /// Deterministic inference regardless of `mode`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, &PassOptions::eval(), &mut Sampler::new(self.seed))?.output)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.infer(x)?.argmax_rows())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::Dense;

    #[test]
    fn identity_model_passes_input_through() {
        let m = Model::new(vec![3], vec![], 0).unwrap();
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn identity_dense() {
        let d = Dense::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2]));
        let m = Model::new(vec![2], vec![Layer::Dense(d)], 0).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let d1 = Dense::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4]));
        let d2 = Dense::new(Tensor::zeros(&[1, 3]), Tensor::zeros(&[1]));
        match Model::new(vec![2], vec![Layer::Dense(d1), Layer::Relu, Layer::Dense(d2)], 0) {
            Err(LabError::Shape { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("unexpected {other:?}"),
        }
        let ok = Model::new(vec![2], vec![Layer::Dense(Dense::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[4])))], 0).unwrap();
        let bad = Tensor::zeros(&[1, 3]);
        assert!(matches!(ok.forward(&bad), Err(LabError::Shape { layer: 0, .. })));
    }

    #[test]
    fn backward_requires_train_mode() {
        let m = Model::new(vec![2], vec![], 0).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(m.backward(&x, &x, Loss::Mse).is_err());
    }
}
