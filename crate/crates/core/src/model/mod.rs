//! Classifier abstraction: logits, pre-logit features, losses, and gradients
//! with respect to both parameters and inputs.

mod checkpoint;
mod layers;
mod optim;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optim::{sgd_step, Sgd};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use layers::{Builder, Cache, FwdCtx, Layer, Linear, StatUpdate};

/// Feature width of the "small-cnn" preset's hidden linear layer.
pub const SMALL_CNN_FEATURE_DIM: usize = 64;
/// Feature width of the "preactresnet18" preset (after global pooling).
pub const PREACT_RESNET18_FEATURE_DIM: usize = 512;

/// Ordered collection of parameter arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    arrays: Vec<Vec<f64>>,
}

impl Params {
    pub fn from_arrays(arrays: Vec<Vec<f64>>) -> Self {
        Self { arrays }
    }

    pub(crate) fn push(&mut self, v: Vec<f64>) -> usize {
        self.arrays.push(v);
        self.arrays.len() - 1
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.arrays[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.arrays[i]
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.arrays
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self.arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(Vec::len).sum()
    }

    pub fn is_aligned_with(&self, other: &Params) -> bool {
        self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|(a, b)| a.len() == b.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Softmax regression: the features are the flattened input.
    Linear,
    /// Two hidden ReLU layers for feature-vector inputs.
    Mlp,
    /// Two conv blocks (conv-BN-ReLU-maxpool) and one hidden linear layer.
    SmallCnn,
    #[serde(rename = "preactresnet18")]
    PreActResNet18,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Linear => "linear",
            Preset::Mlp => "mlp",
            Preset::SmallCnn => "small-cnn",
            Preset::PreActResNet18 => "preactresnet18",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Preset::Linear),
            "mlp" => Ok(Preset::Mlp),
            "small-cnn" => Ok(Preset::SmallCnn),
            "preactresnet18" => Ok(Preset::PreActResNet18),
            other => Err(Error::config(format!("unknown architecture preset {other:?}"))),
        }
    }
}

/// Architecture descriptor: preset plus the input/output geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: Preset,
    /// Per-sample input shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Hidden width; only the "mlp" preset reads it.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Fixed input normalization `(x − mean)/std` in front of the network.
    /// Attacks still operate on the raw [0,1] input.
    #[serde(default)]
    pub input_mean: f64,
    #[serde(default = "default_std")]
    pub input_std: f64,
}

fn default_std() -> f64 {
    1.0
}

fn default_hidden() -> usize {
    64
}

impl Architecture {
    pub fn new(preset: Preset, input_shape: Vec<usize>, num_classes: usize) -> Self {
        Self {
            preset,
            input_shape,
            num_classes,
            hidden: default_hidden(),
            input_mean: 0.0,
            input_std: 1.0,
        }
    }

    pub fn with_input_norm(mut self, mean: f64, std: f64) -> Self {
        self.input_mean = mean;
        self.input_std = std;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn feature_dim(&self) -> usize {
        match self.preset {
            Preset::Linear => self.input_shape.iter().product(),
            Preset::Mlp => self.hidden,
            Preset::SmallCnn => SMALL_CNN_FEATURE_DIM,
            Preset::PreActResNet18 => PREACT_RESNET18_FEATURE_DIM,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if !(self.input_std.is_finite() && self.input_std > 0.0 && self.input_mean.is_finite()) {
            return Err(Error::config("input normalization needs finite mean and positive std"));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::config(format!("bad input shape {:?}", self.input_shape)));
        }
        match self.preset {
            Preset::Linear => Ok(()),
            Preset::Mlp if self.hidden == 0 => Err(Error::config("mlp hidden width must be positive")),
            Preset::Mlp => Ok(()),
            Preset::SmallCnn | Preset::PreActResNet18 => match self.input_shape.as_slice() {
                [_, h, w] if *h >= 4 && *w >= 4 => Ok(()),
                _ => Err(Error::config(format!(
                    "{} needs a [c, h, w] input with h, w >= 4, got {:?}",
                    self.preset.name(),
                    self.input_shape
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Opaque running-statistic updates produced by a training-mode pass.
#[derive(Debug, Clone, Default)]
pub struct StatUpdates(Vec<StatUpdate>);

/// Result of a parameter-gradient pass.
#[derive(Debug, Clone)]
pub struct GradStep {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: Params,
    pub stats: StatUpdates,
}

struct Trace {
    caches: Vec<Cache>,
    features: Tensor,
    logits: Tensor,
    stats: Vec<StatUpdate>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    arch: Architecture,
    body: Vec<Layer>,
    head: Linear,
    params: Params,
    buffers: Vec<Vec<f64>>,
    mode: Mode,
}

impl Classifier {
    /// Builds a freshly initialized classifier. Weights use the uniform
    /// fan-in initialization, normalization layers start at identity.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = Params::default();
        let mut buffers = Vec::new();
        let mut r = rng::stream(seed, rng::STREAM_INIT);
        let mut b = Builder {
            params: &mut params,
            buffers: &mut buffers,
            rng: &mut r,
        };
        let mut body = Vec::new();
        let in_numel: usize = arch.input_shape.iter().product();
        if arch.input_mean != 0.0 || arch.input_std != 1.0 {
            body.push(Layer::Normalize {
                mean: arch.input_mean,
                std: arch.input_std,
            });
        }
        match arch.preset {
            Preset::Linear => {
                body.push(Layer::Flatten);
            }
            Preset::Mlp => {
                body.push(Layer::Flatten);
                body.push(Layer::Linear(b.linear(in_numel, arch.hidden)));
                body.push(Layer::Relu);
                body.push(Layer::Linear(b.linear(arch.hidden, arch.hidden)));
                body.push(Layer::Relu);
            }
            Preset::SmallCnn => {
                let (c, h, w) = (arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]);
                for (ic, oc) in [(c, 16), (16, 32)] {
                    body.push(Layer::Conv(b.conv(ic, oc, 3, 1, 1, false)));
                    body.push(Layer::BatchNorm(b.batch_norm(oc)));
                    body.push(Layer::Relu);
                    body.push(Layer::MaxPool2);
                }
                body.push(Layer::Flatten);
                body.push(Layer::Linear(b.linear(32 * (h / 4) * (w / 4), SMALL_CNN_FEATURE_DIM)));
                body.push(Layer::Relu);
            }
            Preset::PreActResNet18 => {
                let c = arch.input_shape[0];
                body.push(Layer::Conv(b.conv(c, 64, 3, 1, 1, false)));
                let mut in_c = 64;
                for (planes, stride) in [(64, 1), (128, 2), (256, 2), (512, 2)] {
                    for s in [stride, 1] {
                        body.push(Layer::PreAct(Box::new(b.preact_block(in_c, planes, s))));
                        in_c = planes;
                    }
                }
                body.push(Layer::BatchNorm(b.batch_norm(512)));
                body.push(Layer::Relu);
                body.push(Layer::GlobalAvgPool);
            }
        }
        let head = b.linear(arch.feature_dim(), arch.num_classes);
        Ok(Self {
            arch,
            body,
            head,
            params,
            buffers,
            mode: Mode::Train,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Normalization running statistics.
    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub(crate) fn set_state(&mut self, params: Params, buffers: Vec<Vec<f64>>) -> Result<()> {
        if !params.is_aligned_with(&self.params)
            || buffers.len() != self.buffers.len()
            || buffers.iter().zip(&self.buffers).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("state does not match architecture".into()));
        }
        self.params = params;
        self.buffers = buffers;
        Ok(())
    }

    /// Final linear layer as `(W [K×D] row-major, b [K])`.
    pub fn head(&self) -> (&[f64], &[f64]) {
        (self.params.get(self.head.w), self.params.get(self.head.b))
    }

    /// Zeroes the final linear layer so every input maps to all-zero logits.
    pub fn zero_head(&mut self) {
        let (w, b) = (self.head.w, self.head.b);
        self.params.get_mut(w).iter_mut().for_each(|v| *v = 0.0);
        self.params.get_mut(b).iter_mut().for_each(|v| *v = 0.0);
    }

    /// FNV-1a over the bit patterns of every parameter and buffer.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let all = self.params.arrays().iter().chain(self.buffers.iter());
        for arr in all {
            for v in arr {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.arch.input_shape.len() + 1 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(Error::Shape(format!(
                "expected batch of {:?}, got {:?}",
                self.arch.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &Tensor, train: bool) -> Result<Trace> {
        self.check_input(x)?;
        let mut ctx = FwdCtx::new(train);
        let mut caches = Vec::with_capacity(self.body.len());
        let mut h = x.clone();
        for layer in &self.body {
            let (out, cache) = layer.forward(&self.params, &self.buffers, h, &mut ctx);
            caches.push(cache);
            h = out;
        }
        let logits = self.head.forward(&self.params, &h);
        Ok(Trace {
            caches,
            features: h,
            logits,
            stats: ctx.stat_updates,
        })
    }

    fn backprop(&self, trace: &Trace, dlogits: Tensor, mut grads: Option<&mut Params>) -> Tensor {
        let head_layer = Layer::Linear(self.head.clone());
        let head_cache = Cache::Input(trace.features.clone());
        let mut g = head_layer.backward(&self.params, &head_cache, dlogits, &mut grads);
        for (layer, cache) in self.body.iter().zip(&trace.caches).rev() {
            g = layer.backward(&self.params, cache, g, &mut grads);
        }
        g
    }

    fn run_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ctx = FwdCtx::new(self.mode == Mode::Train);
        let mut h = x.clone();
        for layer in &self.body {
            h = layer.forward(&self.params, &self.buffers, h, &mut ctx).0;
        }
        Ok(h)
    }

    /// Logits for a batch. Never mutates the model, in either mode.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.run_features(x)?;
        Ok(self.head.forward(&self.params, &h))
    }

    /// Pre-logit features: the input of the final linear layer.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.run_features(x)
    }

    /// Logits and features from a single pass.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.run_features(x)?;
        let logits = self.head.forward(&self.params, &h);
        Ok((logits, h))
    }

    /// Gradient of the mean cross-entropy with respect to the input batch.
    pub fn input_gradient(&self, x: &Tensor, y: &[usize]) -> Result<Tensor> {
        Ok(self.loss_and_input_grad(x, y)?.1)
    }

    /// Per-sample losses and the input gradient of their mean.
    pub fn loss_and_input_grad(&self, x: &Tensor, y: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let trace = self.trace(x, self.mode == Mode::Train)?;
        let (losses, dlogits) = loss_and_dlogits(&trace.logits, y)?;
        let g = self.backprop(&trace, dlogits, None);
        Ok((losses, g))
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    /// In train mode the returned statistics should be handed to
    /// [`Classifier::commit_stats`] once the step is accepted.
    pub fn loss_and_grads(&self, x: &Tensor, y: &[usize]) -> Result<GradStep> {
        let trace = self.trace(x, self.mode == Mode::Train)?;
        let (losses, dlogits) = loss_and_dlogits(&trace.logits, y)?;
        let mut grads = self.params.zeros_like();
        self.backprop(&trace, dlogits, Some(&mut grads));
        let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        Ok(GradStep {
            loss,
            logits: trace.logits,
            grads,
            stats: StatUpdates(trace.stats),
        })
    }

    pub fn commit_stats(&mut self, stats: StatUpdates) {
        for u in stats.0 {
            for (r, b) in self.buffers[u.mean_buf].iter_mut().zip(&u.batch_mean) {
                *r = (1.0 - layers::BN_MOMENTUM) * *r + layers::BN_MOMENTUM * b;
            }
            for (r, b) in self.buffers[u.var_buf].iter_mut().zip(&u.batch_var_unbiased) {
                *r = (1.0 - layers::BN_MOMENTUM) * *r + layers::BN_MOMENTUM * b;
            }
        }
    }

    /// Argmax predictions for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        Ok((0..logits.batch()).map(|i| argmax(logits.row(i))).collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_labels(labels: &[usize], batch: usize, k: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Label {
            label: bad,
            num_classes: k,
        });
    }
    Ok(())
}

/// `−log softmax(z)_y` for each row.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    let k = logits.row_len();
    check_labels(labels, logits.batch(), k)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let z = logits.row(i);
            log_sum_exp(z) - z[y]
        })
        .collect())
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.batch() == 0 {
        return Err(Error::EmptyInput("cross-entropy of an empty batch".into()));
    }
    let l = per_sample_cross_entropy(logits, labels)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

fn loss_and_dlogits(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f64>, Tensor)> {
    let losses = per_sample_cross_entropy(logits, labels)?;
    let bsz = logits.batch();
    let mut d = Tensor::zeros(logits.shape().to_vec());
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax(logits.row(i));
        let row = d.row_mut(i);
        for (j, pj) in p.into_iter().enumerate() {
            row[j] = (pj - if j == y { 1.0 } else { 0.0 }) / bsz as f64;
        }
    }
    Ok((losses, d))
}
