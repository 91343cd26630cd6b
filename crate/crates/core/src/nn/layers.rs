//! Layer definitions with hand-written forward and backward passes.

use crate::error::{LabError, Result};
use crate::nn::sampler::{Sampler, SourceKind};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Binarizes with `sign(0) = +1`.
pub fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Forward value of the straight-through binarizer.
pub fn binarize_ste(w: &Tensor) -> Tensor {
    w.map(sign)
}

/// Gradient mask of the straight-through binarizer: 1 where `|w| <= 1`.
pub fn ste_mask(w: &Tensor) -> Tensor {
    w.map(|v| if v.abs() <= 1.0 { 1.0 } else { 0.0 })
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of a `[N, C]` block.
pub fn softmax_rows(z: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; z.len()];
    for (zr, or) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in or.iter_mut().zip(zr) {
            *o = (v - m).exp();
            s += *o;
        }
        or.iter_mut().for_each(|o| *o /= s);
    }
    out
}

/// `(batch, channels, spatial)` view of an activation tensor.
pub fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 | 1 => (1, shape.first().copied().unwrap_or(1), 1),
        2 => (shape[0], shape[1], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub binary: bool,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        Self { weight, bias, binary: false }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Weights the matmul actually uses.
    pub fn effective_weight(&self) -> Tensor {
        if self.binary {
            binarize_ste(&self.weight)
        } else {
            self.weight.clone()
        }
    }
}

/// Square-kernel convolution, stride 1, zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_ch, in_ch, k, k]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub binary: bool,
}

impl Conv2d {
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    pub fn effective_weight(&self) -> Tensor {
        if self.binary {
            binarize_ste(&self.weight)
        } else {
            self.weight.clone()
        }
    }
}

/// Lowers `[N, C, H, W]` to `[N·H·W, C·k·k]` patches.
pub fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = (k / 2) as isize;
    let cols = c * k * k;
    let mut out = vec![0.0; n * h * w * cols];
    let xd = x.data();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * cols;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[row + (ch * k + ky) * k + kx] =
                                xd[((b * c + ch) * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse scatter-add of [`im2col`].
pub fn col2im(cols: &[f64], shape: &[usize], k: usize) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let pad = (k / 2) as isize;
    let width = c * k * k;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let row = ((b * h + y) * w + xx) * width;
                for ch in 0..c {
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            od[((b * c + ch) * h + iy as usize) * w + ix as usize] +=
                                cols[row + (ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N·H·W, C]` rows to `[N, C, H, W]`.
pub fn rows_to_nchw(rows: &[f64], n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                out[(b * c + ch) * h * w + p] = rows[(b * h * w + p) * c + ch];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("consistent conv shape")
}

/// `[N, C, H, W]` to `[N·H·W, C]` rows.
pub fn nchw_to_rows(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                out[(b * hw + p) * c + ch] = d[(b * c + ch) * hw + p];
            }
        }
    }
    out
}

/// Multiplicative perturbation of the affine parameters, drawn per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDropout {
    pub delta: f64,
    pub p: f64,
    pub source: u32,
}

/// Per-channel normalization. With `affine_dropout` set it becomes the
/// inverted-normalization layer whose affine terms are randomly perturbed
/// whenever the pass is stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub affine_dropout: Option<AffineDropout>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            affine_dropout: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DropoutKind {
    /// Independent mask per activation.
    Neuron(f64),
    /// One mask per feature map.
    Spatial(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub kind: DropoutKind,
    pub source: u32,
}

impl Dropout {
    pub fn p(&self) -> f64 {
        match self.kind {
            DropoutKind::Neuron(p) | DropoutKind::Spatial(p) => p,
        }
    }
}

/// Learned per-channel multiplier. With `drop_p > 0` the whole vector is
/// replaced by ones with that probability on every stochastic pass, using the
/// model-wide scale source.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelScale {
    pub scale: Tensor,
    pub drop_p: f64,
    pub source: u32,
}

/// Per-channel multiplier with a Gaussian posterior `N(mu, softplus(rho)²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleVi {
    pub mu: Tensor,
    pub rho: Tensor,
    pub prior_sigma: f64,
    pub source: u32,
}

impl ScaleVi {
    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    Sign,
    Softmax,
    Flatten,
    Dropout(Dropout),
    Scale(ChannelScale),
    ScaleVi(ScaleVi),
}

/// What a layer saved during forward for its backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Dense { x: Tensor, w_eff: Tensor },
    Conv { cols: Vec<f64>, in_shape: Vec<usize>, w_eff: Tensor },
    Norm { xhat: Tensor, inv_std: Vec<f64>, factor: Vec<f64>, batch_stats: bool, mean: Vec<f64>, var: Vec<f64> },
    Input(Tensor),
    Output(Tensor),
    Flatten(Vec<usize>),
    Mask(Tensor),
    Scale { x: Tensor, applied: Vec<f64>, dropped: bool },
    Vi { x: Tensor, alpha: Vec<f64>, eps: Vec<f64> },
}

/// Per-pass knobs shared by every layer.
pub struct PassCtx<'a> {
    /// Batch statistics in normalization layers.
    pub batch_stats: bool,
    /// Stochastic layers draw from `sampler`; otherwise they are deterministic.
    pub stochastic: bool,
    pub sampler: &'a mut Sampler,
    /// Multiplier applied to the effective weights of this layer, if any.
    pub weight_multiplier: Option<&'a Tensor>,
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(b) if b.affine_dropout.is_some() => "inv_norm",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::Sign => "sign",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
            Layer::Dropout(_) => "dropout",
            Layer::Scale(_) => "scale",
            Layer::ScaleVi(_) => "scale_vi",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Scale(s) => vec![&s.scale],
            Layer::ScaleVi(v) => vec![&v.mu, &v.rho],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Scale(s) => vec![&mut s.scale],
            Layer::ScaleVi(v) => vec![&mut v.mu, &mut v.rho],
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Whether this layer's weights go through a matmul (and hence a crossbar).
    pub fn is_matmul(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            Layer::Dropout(_) | Layer::ScaleVi(_) => true,
            Layer::Scale(s) => s.drop_p > 0.0,
            Layer::BatchNorm(b) => b.affine_dropout.is_some(),
            _ => false,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if n != d.fan_in() {
                    return Err(format!("dense expects {} inputs, got {input:?}", d.fan_in()));
                }
                Ok(vec![d.fan_out()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(format!(
                        "conv2d expects [{}, H, W], got {input:?}",
                        c.in_channels()
                    ));
                }
                Ok(vec![c.out_channels(), input[1], input[2]])
            }
            Layer::BatchNorm(b) => check_channels(input, b.channels(), "batch_norm"),
            Layer::Scale(s) => check_channels(input, s.scale.len(), "scale"),
            Layer::ScaleVi(v) => check_channels(input, v.mu.len(), "scale_vi"),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Softmax if input.len() != 1 => Err(format!("softmax expects a vector, got {input:?}")),
            _ => Ok(input.to_vec()),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut PassCtx<'_>) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Dense(d) => {
                let n = x.rows();
                let mut w = d.effective_weight();
                if let Some(m) = ctx.weight_multiplier {
                    w = w.zip_map(m, |a, b| a * b);
                }
                let mut y = matmul_nt(x.data(), w.data(), n, d.fan_in(), d.fan_out());
                add_bias_rows(&mut y, d.bias.data());
                let xf = x.clone().reshape(&[n, d.fan_in()])?;
                Ok((Tensor::new(vec![n, d.fan_out()], y)?, Cache::Dense { x: xf, w_eff: w }))
            }
            Layer::Conv2d(c) => {
                let s = x.shape().to_vec();
                let (n, h, w) = (s[0], s[2], s[3]);
                let k = c.kernel();
                let mut we = c.effective_weight();
                if let Some(m) = ctx.weight_multiplier {
                    we = we.zip_map(m, |a, b| a * b);
                }
                let cols = im2col(x, k);
                let mut rows = matmul_nt(&cols, we.data(), n * h * w, c.fan_in(), c.out_channels());
                add_bias_rows(&mut rows, c.bias.data());
                let y = rows_to_nchw(&rows, n, c.out_channels(), h, w);
                Ok((y, Cache::Conv { cols, in_shape: s, w_eff: we }))
            }
            Layer::BatchNorm(b) => norm_forward(b, x, ctx),
            Layer::Relu => Ok((x.map(|v| v.max(0.0)), Cache::Input(x.clone()))),
            Layer::Sign => Ok((x.map(sign), Cache::Input(x.clone()))),
            Layer::Softmax => {
                let cols = x.row_len();
                let y = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), cols))?;
                Ok((y.clone(), Cache::Output(y)))
            }
            Layer::Flatten => {
                let n = x.rows();
                let w = x.row_len();
                Ok((x.clone().reshape(&[n, w])?, Cache::Flatten(x.shape().to_vec())))
            }
            Layer::Dropout(d) => {
                if !ctx.stochastic {
                    return Ok((x.clone(), Cache::None));
                }
                let p = d.p();
                let keep = 1.0 / (1.0 - p);
                let (n, c, sp) = channel_layout(x.shape());
                let mut mask = Tensor::zeros(x.shape());
                let md = mask.data_mut();
                match d.kind {
                    DropoutKind::Neuron(_) => {
                        for m in md.iter_mut() {
                            let drop = ctx.sampler.bernoulli(d.source, SourceKind::Dropout, p)?;
                            *m = if drop { 0.0 } else { keep };
                        }
                    }
                    DropoutKind::Spatial(_) => {
                        for b in 0..n {
                            for ch in 0..c {
                                let drop = ctx.sampler.bernoulli(d.source, SourceKind::Dropout, p)?;
                                let v = if drop { 0.0 } else { keep };
                                let off = (b * c + ch) * sp;
                                md[off..off + sp].iter_mut().for_each(|m| *m = v);
                            }
                        }
                    }
                }
                Ok((x.zip_map(&mask, |a, m| a * m), Cache::Mask(mask)))
            }
            Layer::Scale(s) => {
                let dropped = ctx.stochastic
                    && s.drop_p > 0.0
                    && ctx.sampler.bernoulli(s.source, SourceKind::Scale, s.drop_p)?;
                let applied = if dropped { vec![1.0; s.scale.len()] } else { s.scale.data().to_vec() };
                let y = scale_channels(x, &applied);
                Ok((y, Cache::Scale { x: x.clone(), applied, dropped }))
            }
            Layer::ScaleVi(v) => {
                let c = v.mu.len();
                let mut eps = vec![0.0; c];
                if ctx.stochastic {
                    for e in eps.iter_mut() {
                        *e = ctx.sampler.gaussian(v.source, SourceKind::Variational)?;
                    }
                }
                let alpha: Vec<f64> = (0..c)
                    .map(|i| v.mu.data()[i] + softplus(v.rho.data()[i]) * eps[i])
                    .collect();
                let y = scale_channels(x, &alpha);
                Ok((y, Cache::Vi { x: x.clone(), alpha, eps }))
            }
        }
    }

    /// Returns the input gradient and one gradient per entry of [`Layer::params`].
    pub fn backward(&self, cache: &Cache, g: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        match (self, cache) {
            (Layer::Dense(d), Cache::Dense { x, w_eff }) => {
                let n = x.rows();
                let (fi, fo) = (d.fan_in(), d.fan_out());
                let mut gw = Tensor::new(vec![fo, fi], matmul_tn(g.data(), x.data(), n, fo, fi))?;
                if d.binary {
                    gw = gw.zip_map(&ste_mask(&d.weight), |a, m| a * m);
                }
                let gb = Tensor::new(vec![fo], col_sums(g.data(), fo))?;
                let gx = Tensor::new(vec![n, fi], matmul_nn(g.data(), w_eff.data(), n, fo, fi))?;
                Ok((gx, vec![gw, gb]))
            }
            (Layer::Conv2d(c), Cache::Conv { cols, in_shape, w_eff }) => {
                let (n, h, w) = (in_shape[0], in_shape[2], in_shape[3]);
                let rows = n * h * w;
                let (fi, oc) = (c.fan_in(), c.out_channels());
                let grows = nchw_to_rows(g);
                let mut gw = Tensor::new(c.weight.shape().to_vec(), matmul_tn(&grows, cols, rows, oc, fi))?;
                if c.binary {
                    gw = gw.zip_map(&ste_mask(&c.weight), |a, m| a * m);
                }
                let gb = Tensor::new(vec![oc], col_sums(&grows, oc))?;
                let gcols = matmul_nn(&grows, w_eff.data(), rows, oc, fi);
                Ok((col2im(&gcols, in_shape, c.kernel()), vec![gw, gb]))
            }
            (Layer::BatchNorm(b), Cache::Norm { xhat, inv_std, factor, batch_stats, .. }) => {
                Ok(norm_backward(b, g, xhat, inv_std, factor, *batch_stats))
            }
            (Layer::Relu, Cache::Input(x)) => {
                Ok((g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }), vec![]))
            }
            (Layer::Sign, Cache::Input(x)) => {
                Ok((g.zip_map(x, |gv, xv| if xv.abs() <= 1.0 { gv } else { 0.0 }), vec![]))
            }
            (Layer::Softmax, Cache::Output(y)) => {
                let cols = y.row_len();
                let mut gx = g.clone();
                for ((gr, yr), out) in g.data().chunks(cols).zip(y.data().chunks(cols)).zip(gx.data_mut().chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                Ok((gx, vec![]))
            }
            (Layer::Flatten, Cache::Flatten(shape)) => Ok((g.clone().reshape(shape)?, vec![])),
            (Layer::Dropout(_), Cache::None) => Ok((g.clone(), vec![])),
            (Layer::Dropout(_), Cache::Mask(m)) => Ok((g.zip_map(m, |a, b| a * b), vec![])),
            (Layer::Scale(s), Cache::Scale { x, applied, dropped }) => {
                let gx = scale_channels(g, applied);
                let gs = if *dropped {
                    Tensor::zeros(s.scale.shape())
                } else {
                    Tensor::from_vec(channel_dot(g, x))
                };
                Ok((gx, vec![gs]))
            }
            (Layer::ScaleVi(v), Cache::Vi { x, alpha, eps }) => {
                let gx = scale_channels(g, alpha);
                let galpha = channel_dot(g, x);
                let grho: Vec<f64> = galpha
                    .iter()
                    .zip(eps)
                    .zip(v.rho.data())
                    .map(|((ga, e), &r)| ga * e * sigmoid(r))
                    .collect();
                Ok((gx, vec![Tensor::from_vec(galpha), Tensor::from_vec(grho)]))
            }
            (layer, _) => Err(LabError::Config(format!("cache does not belong to {} layer", layer.name()))),
        }
    }
}

fn check_channels(input: &[usize], c: usize, what: &str) -> std::result::Result<Vec<usize>, String> {
    if input.first() != Some(&c) {
        return Err(format!("{what} expects {c} channels, got {input:?}"));
    }
    Ok(input.to_vec())
}

fn add_bias_rows(y: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in y.chunks_mut(n) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks(cols) {
        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    s
}

fn scale_channels(x: &Tensor, per_channel: &[f64]) -> Tensor {
    let (n, c, sp) = channel_layout(x.shape());
    let mut y = x.clone();
    let yd = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            yd[off..off + sp].iter_mut().for_each(|v| *v *= per_channel[ch]);
        }
    }
    y
}

fn channel_dot(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, c, sp) = channel_layout(a.shape());
    let mut out = vec![0.0; c];
    for bi in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (bi * c + ch) * sp;
            *o += a.data()[off..off + sp].iter().zip(&b.data()[off..off + sp]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
    out
}

/// Per-channel mean and biased variance.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, sp) = channel_layout(x.shape());
    let m = (n * sp) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let d = x.data();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            mean[ch] += d[off..off + sp].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * sp;
            var[ch] += d[off..off + sp].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn norm_forward(b: &BatchNorm, x: &Tensor, ctx: &mut PassCtx<'_>) -> Result<(Tensor, Cache)> {
    let (n, c, sp) = channel_layout(x.shape());
    let (mean, var) = if ctx.batch_stats {
        channel_moments(x)
    } else {
        (b.running_mean.data().to_vec(), b.running_var.data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
    let mut factor = vec![1.0; c];
    if let (Some(ad), true) = (b.affine_dropout, ctx.stochastic) {
        for f in factor.iter_mut() {
            let s = ctx.sampler.ternary(ad.source, SourceKind::Affine, ad.p)?;
            *f = 1.0 + f64::from(s) * ad.delta;
        }
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    let (xd, yd) = (xhat.data_mut(), y.data_mut());
    for bi in 0..n {
        for ch in 0..c {
            let off = (bi * c + ch) * sp;
            let g = b.gamma.data()[ch] * factor[ch];
            let be = b.beta.data()[ch] * factor[ch];
            for i in off..off + sp {
                let h = (xd[i] - mean[ch]) * inv_std[ch];
                xd[i] = h;
                yd[i] = g * h + be;
            }
        }
    }
    Ok((y, Cache::Norm { xhat, inv_std, factor, batch_stats: ctx.batch_stats, mean, var }))
}

fn norm_backward(
    b: &BatchNorm,
    g: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    factor: &[f64],
    batch_stats: bool,
) -> (Tensor, Vec<Tensor>) {
    let (n, c, sp) = channel_layout(g.shape());
    let m = (n * sp) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut sum_dxhat = vec![0.0; c];
    let mut sum_dxhat_xhat = vec![0.0; c];
    let (gd, hd) = (g.data(), xhat.data());
    for bi in 0..n {
        for ch in 0..c {
            let off = (bi * c + ch) * sp;
            let gt = b.gamma.data()[ch] * factor[ch];
            for i in off..off + sp {
                ggamma[ch] += gd[i] * hd[i] * factor[ch];
                gbeta[ch] += gd[i] * factor[ch];
                let dxh = gd[i] * gt;
                sum_dxhat[ch] += dxh;
                sum_dxhat_xhat[ch] += dxh * hd[i];
            }
        }
    }
    let mut gx = g.clone();
    let gxd = gx.data_mut();
    for bi in 0..n {
        for ch in 0..c {
            let off = (bi * c + ch) * sp;
            let gt = b.gamma.data()[ch] * factor[ch];
            for i in off..off + sp {
                let dxh = gd[i] * gt;
                gxd[i] = if batch_stats {
                    inv_std[ch] * (dxh - sum_dxhat[ch] / m - hd[i] * sum_dxhat_xhat[ch] / m)
                } else {
                    inv_std[ch] * dxh
                };
            }
        }
    }
    (gx, vec![Tensor::from_vec(ggamma), Tensor::from_vec(gbeta)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ste_forward_and_mask() {
        let w = Tensor::from_vec(vec![-0.3, 0.0, 2.1]);
        assert_eq!(binarize_ste(&w).data(), &[-1.0, 1.0, 1.0]);
        assert_eq!(ste_mask(&w).data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn im2col_roundtrip_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish x, c
        let x = Tensor::new(vec![1, 2, 3, 3], (0..18).map(|i| i as f64 * 0.37 - 2.0).collect()).unwrap();
        let cols = im2col(&x, 3);
        let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, x.shape(), 3);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn spatial_dropout_zeroes_whole_maps() {
        let layer = Layer::Dropout(Dropout { kind: DropoutKind::Spatial(0.5), source: 1 });
        let x = Tensor::full(&[4, 6, 3, 3], 2.0);
        let mut sampler = Sampler::new(3);
        let mut ctx = PassCtx { batch_stats: false, stochastic: true, sampler: &mut sampler, weight_multiplier: None };
        let (y, _) = layer.forward(&x, &mut ctx).unwrap();
        let mut dropped = 0;
        for map in y.data().chunks(9) {
            if map[0] == 0.0 {
                dropped += 1;
                assert!(map.iter().all(|&v| v == 0.0));
            } else {
                assert!(map.iter().all(|&v| v == 4.0));
            }
        }
        assert!(dropped > 0 && dropped < 24);
        assert_eq!(sampler.stats().total().bernoulli, 24);
    }

    #[test]
    fn softmax_rows_normalize() {
        let p = softmax_rows(&[1000.0, 0.0, -3.0, 0.5, 0.5, 0.5], 3);
        for r in p.chunks(3) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
