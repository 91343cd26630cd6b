//! Reference architectures.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::nn::layers::{AffineDropout, BatchNorm, ChannelScale, Conv2d, Dense, Dropout, DropoutKind, Layer, ScaleVi};
use crate::nn::model::Model;
use crate::rng;
use crate::tensor::Tensor;

/// Source id shared by every scale-dropout layer of a model.
pub const SCALE_SOURCE: u32 = 0;
const TAG_INIT: u64 = 11;

#[derive(Debug, Clone, PartialEq)]
pub enum Bayes {
    None,
    Neuron { p: f64 },
    Spatial { p: f64 },
    /// Scale dropout; `adaptive = Some((p_min, p_max))` derives per-layer
    /// rates from layer size instead of using `p` everywhere.
    Scale { p: f64, adaptive: Option<(f64, f64)> },
    Vi { prior_sigma: f64 },
    Affine { delta: f64, p: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    /// Two hidden dense layers, 128 and 64 wide.
    MlpS,
    /// Two 3×3 conv layers (8 and 16 maps), then 64 dense and the classifier.
    ConvS,
    /// Dense stack with arbitrary hidden widths.
    Mlp(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub arch: Arch,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    /// Binary weights and sign activations.
    pub binary: bool,
    pub bayes: Bayes,
    /// Extra output units appended after the class logits.
    pub aux_outputs: usize,
    /// Insert batch normalization after every hidden matmul.
    pub batch_norm: bool,
}

impl ArchSpec {
    pub fn new(arch: Arch, input_shape: Vec<usize>, classes: usize) -> Self {
        Self { arch, input_shape, classes, binary: false, bayes: Bayes::None, aux_outputs: 0, batch_norm: true }
    }

    pub fn with_bayes(mut self, bayes: Bayes) -> Self {
        self.bayes = bayes;
        self
    }

    pub fn binary(mut self, on: bool) -> Self {
        self.binary = on;
        self
    }
}

struct Builder<'a> {
    spec: &'a ArchSpec,
    seed: u64,
    layers: Vec<Layer>,
}

impl Builder<'_> {
    fn init(&self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut r = rng::stream(self.seed, &[TAG_INIT, self.layers.len() as u64]);
        let mut t = Tensor::zeros(shape);
        t.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-bound..bound));
        t
    }

    fn source(&self) -> u32 {
        1000 + self.layers.len() as u32
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize) {
        let w = self.init(&[fan_out, fan_in], fan_in);
        let mut d = Dense::new(w, Tensor::zeros(&[fan_out]));
        d.binary = self.spec.binary;
        self.layers.push(Layer::Dense(d));
    }

    fn conv(&mut self, in_ch: usize, out_ch: usize) {
        let w = self.init(&[out_ch, in_ch, 3, 3], in_ch * 9);
        self.layers.push(Layer::Conv2d(Conv2d { weight: w, bias: Tensor::zeros(&[out_ch]), binary: self.spec.binary }));
    }

    /// Normalization, the Bayesian hook, the nonlinearity and post-activation dropout.
    fn hidden_tail(&mut self, channels: usize, spatial: bool) {
        if self.spec.batch_norm || matches!(self.spec.bayes, Bayes::Affine { .. }) {
            let mut bn = BatchNorm::new(channels);
            if let Bayes::Affine { delta, p } = self.spec.bayes {
                bn.affine_dropout = Some(AffineDropout { delta, p, source: self.source() });
            }
            self.layers.push(Layer::BatchNorm(bn));
        }
        match self.spec.bayes {
            Bayes::Scale { p, .. } => self.layers.push(Layer::Scale(ChannelScale {
                scale: Tensor::full(&[channels], 1.0),
                drop_p: p,
                source: SCALE_SOURCE,
            })),
            Bayes::Vi { prior_sigma } => {
                let source = self.source();
                self.layers.push(Layer::ScaleVi(ScaleVi {
                    mu: Tensor::full(&[channels], 1.0),
                    rho: Tensor::full(&[channels], inverse_softplus(0.05)),
                    prior_sigma,
                    source,
                }))
            }
            _ => {}
        }
        self.layers.push(if self.spec.binary { Layer::Sign } else { Layer::Relu });
        let kind = match self.spec.bayes {
            Bayes::Neuron { p } => Some(DropoutKind::Neuron(p)),
            Bayes::Spatial { p } if spatial => Some(DropoutKind::Spatial(p)),
            Bayes::Spatial { p } => Some(DropoutKind::Neuron(p)),
            _ => None,
        };
        if let Some(kind) = kind {
            let source = self.source();
            self.layers.push(Layer::Dropout(Dropout { kind, source }));
        }
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

pub fn build(spec: &ArchSpec, seed: u64) -> Result<Model> {
    let mut b = Builder { spec, seed, layers: Vec::new() };
    let outputs = spec.classes + spec.aux_outputs;
    match &spec.arch {
        Arch::MlpS | Arch::Mlp(_) => {
            let hidden = match &spec.arch {
                Arch::Mlp(h) => h.clone(),
                _ => vec![128, 64],
            };
            if spec.input_shape.len() > 1 {
                b.layers.push(Layer::Flatten);
            }
            let mut width: usize = spec.input_shape.iter().product();
            for &h in &hidden {
                b.dense(width, h);
                b.hidden_tail(h, false);
                width = h;
            }
            b.dense(width, outputs);
        }
        Arch::ConvS => {
            let s = &spec.input_shape;
            if s.len() != 3 {
                return Err(LabError::Config(format!("CONV-S expects [C, H, W] input, got {s:?}")));
            }
            b.conv(s[0], 8);
            b.hidden_tail(8, true);
            b.conv(8, 16);
            b.hidden_tail(16, true);
            b.layers.push(Layer::Flatten);
            b.dense(16 * s[1] * s[2], 64);
            b.hidden_tail(64, false);
            b.dense(64, outputs);
        }
    }
    let mut model = Model::new(spec.input_shape.clone(), b.layers, seed)?;
    if let Bayes::Scale { adaptive: Some((p_min, p_max)), .. } = spec.bayes {
        let rates = crate::bayesian::adaptive_rates(&model, p_min, p_max)?;
        crate::bayesian::apply_scale_rates(&mut model, &rates)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_s_shapes() {
        let m = build(&ArchSpec::new(Arch::MlpS, vec![784], 10), 1).unwrap();
        assert_eq!(m.output_dim(), 10);
        let dense: Vec<_> = m.layers.iter().filter(|l| l.is_matmul()).collect();
        assert_eq!(dense.len(), 3);
    }

    #[test]
    fn conv_s_shapes() {
        let spec = ArchSpec::new(Arch::ConvS, vec![1, 6, 6], 3).with_bayes(Bayes::Spatial { p: 0.2 });
        let m = build(&spec, 1).unwrap();
        assert_eq!(m.output_dim(), 3);
        let x = Tensor::zeros(&[2, 1, 6, 6]);
        assert_eq!(m.forward(&x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn scale_layers_share_one_source() {
        let spec = ArchSpec::new(Arch::Mlp(vec![8; 5]), vec![4], 2).with_bayes(Bayes::Scale { p: 0.2, adaptive: None });
        let m = build(&spec, 0).unwrap();
        let ids: Vec<u32> = m
            .layers
            .iter()
            .filter_map(|l| if let Layer::Scale(s) = l { Some(s.source) } else { None })
            .collect();
        assert_eq!(ids, vec![SCALE_SOURCE; 5]);
    }
}
