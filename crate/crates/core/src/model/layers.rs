//! Layer kernels with hand-written backward passes.
//!
//! Layers do not own their parameters; they hold indices into a [`Params`]
//! store owned by the classifier. That keeps the optimizer, checkpointing and
//! purity checksums working on one flat list of arrays.

use rand::Rng;

use crate::model::Params;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass context: normalization mode plus the running-statistic
/// updates a training-mode pass would like to commit.
pub(crate) struct FwdCtx {
    pub train: bool,
    pub stat_updates: Vec<StatUpdate>,
}

impl FwdCtx {
    pub fn new(train: bool) -> Self {
        Self {
            train,
            stat_updates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StatUpdate {
    pub mean_buf: usize,
    pub var_buf: usize,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

/// Registers parameter arrays as layers are built.
pub(crate) struct Builder<'a, R: Rng> {
    pub params: &'a mut Params,
    pub buffers: &'a mut Vec<Vec<f64>>,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn uniform(&mut self, n: usize, bound: f64) -> usize {
        let v = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.params.push(v)
    }

    fn constant(&mut self, n: usize, value: f64) -> usize {
        self.params.push(vec![value; n])
    }

    fn buffer(&mut self, n: usize, value: f64) -> usize {
        self.buffers.push(vec![value; n]);
        self.buffers.len() - 1
    }

    pub fn linear(&mut self, in_f: usize, out_f: usize) -> Linear {
        let bound = 1.0 / (in_f as f64).sqrt();
        let w = self.uniform(in_f * out_f, bound);
        let b = self.uniform(out_f, bound);
        Linear { in_f, out_f, w, b }
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Conv2d {
        let fan_in = in_c * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.uniform(out_c * fan_in, bound);
        let b = bias.then(|| self.uniform(out_c, bound));
        Conv2d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            w,
            b,
        }
    }

    pub fn batch_norm(&mut self, c: usize) -> BatchNorm {
        BatchNorm {
            c,
            gamma: self.constant(c, 1.0),
            beta: self.constant(c, 0.0),
            running_mean: self.buffer(c, 0.0),
            running_var: self.buffer(c, 1.0),
        }
    }

    pub fn preact_block(&mut self, in_c: usize, out_c: usize, stride: usize) -> PreActBlock {
        let bn1 = self.batch_norm(in_c);
        let conv1 = self.conv(in_c, out_c, 3, stride, 1, false);
        let bn2 = self.batch_norm(out_c);
        let conv2 = self.conv(out_c, out_c, 3, 1, 1, false);
        let shortcut = (stride != 1 || in_c != out_c).then(|| self.conv(in_c, out_c, 1, stride, 0, false));
        PreActBlock {
            bn1,
            conv1,
            bn2,
            conv2,
            shortcut,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool2,
    Flatten,
    GlobalAvgPool,
    PreAct(Box<PreActBlock>),
    /// Fixed `(x − mean) / std`, applied before the first learned layer.
    Normalize { mean: f64, std: f64 },
}

pub(crate) enum Cache {
    Input(Tensor),
    BatchNorm(BnCache),
    Relu(Vec<bool>),
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Shape(Vec<usize>),
    PreAct(Box<PreActCache>),
    None,
}

impl Layer {
    pub fn forward(&self, p: &Params, bufs: &[Vec<f64>], x: Tensor, ctx: &mut FwdCtx) -> (Tensor, Cache) {
        match self {
            Layer::Linear(l) => {
                let y = l.forward(p, &x);
                (y, Cache::Input(x))
            }
            Layer::Conv(c) => {
                let y = c.forward(p, &x);
                (y, Cache::Input(x))
            }
            Layer::BatchNorm(bn) => {
                let (y, c) = bn.forward(p, bufs, &x, ctx);
                (y, Cache::BatchNorm(c))
            }
            Layer::Relu => relu_forward(x),
            Layer::Normalize { mean, std } => {
                let mut y = x;
                y.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
                (y, Cache::None)
            }
            Layer::MaxPool2 => maxpool_forward(&x),
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let b = x.batch();
                let n = x.row_len();
                (x.reshape(vec![b, n]).expect("flatten"), Cache::Shape(shape))
            }
            Layer::GlobalAvgPool => {
                let shape = x.shape().to_vec();
                (global_avg_pool(&x), Cache::Shape(shape))
            }
            Layer::PreAct(block) => {
                let (y, c) = block.forward(p, bufs, x, ctx);
                (y, Cache::PreAct(Box::new(c)))
            }
        }
    }

    pub fn backward(&self, p: &Params, cache: &Cache, g: Tensor, grads: &mut Option<&mut Params>) -> Tensor {
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => l.backward(p, x, &g, grads),
            (Layer::Conv(c), Cache::Input(x)) => c.backward(p, x, &g, grads),
            (Layer::BatchNorm(bn), Cache::BatchNorm(c)) => bn.backward(p, c, g, grads),
            (Layer::Relu, Cache::Relu(mask)) => relu_backward(g, mask),
            (Layer::Normalize { std, .. }, Cache::None) => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|v| *v /= std);
                g
            }
            (Layer::MaxPool2, Cache::MaxPool { argmax, in_shape }) => maxpool_backward(&g, argmax, in_shape),
            (Layer::Flatten, Cache::Shape(shape)) => g.reshape(shape.clone()).expect("unflatten"),
            (Layer::GlobalAvgPool, Cache::Shape(shape)) => global_avg_pool_backward(&g, shape),
            (Layer::PreAct(block), Cache::PreAct(c)) => block.backward(p, c, g, grads),
            _ => unreachable!("cache does not belong to layer"),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        let bsz = x.batch();
        let mut y = vec![0.0; bsz * self.out_f];
        matmul_bt_acc(x.data(), p.get(self.w), &mut y, bsz, self.in_f, self.out_f);
        let bias = p.get(self.b);
        for row in y.chunks_mut(self.out_f) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Tensor::new(vec![bsz, self.out_f], y).expect("linear output")
    }

    fn backward(&self, p: &Params, x: &Tensor, g: &Tensor, grads: &mut Option<&mut Params>) -> Tensor {
        let bsz = x.batch();
        if let Some(gr) = grads.as_deref_mut() {
            matmul_at_acc(g.data(), x.data(), gr.get_mut(self.w), bsz, self.out_f, self.in_f);
            let db = gr.get_mut(self.b);
            for row in g.data().chunks(self.out_f) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut dx = vec![0.0; bsz * self.in_f];
        matmul_acc(g.data(), p.get(self.w), &mut dx, bsz, self.out_f, self.in_f);
        Tensor::new(x.shape().to_vec(), dx).expect("linear grad")
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: usize,
    pub b: Option<usize>,
}

impl Conv2d {
    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.k;
        let ohw = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * ow + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                x[(c * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
        let k = self.k;
        let ohw = oh * ow;
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dx[(c * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        let s = x.shape();
        let (bsz, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_c * self.k * self.k;
        let ohw = oh * ow;
        let weight = p.get(self.w);
        let mut out = vec![0.0; bsz * self.out_c * ohw];
        let mut cols = vec![0.0; ckk * ohw];
        for n in 0..bsz {
            self.im2col(x.row(n), h, w, oh, ow, &mut cols);
            let o = &mut out[n * self.out_c * ohw..(n + 1) * self.out_c * ohw];
            matmul_acc(weight, &cols, o, self.out_c, ckk, ohw);
            if let Some(b) = self.b {
                for (oc, bias) in p.get(b).iter().enumerate() {
                    for v in &mut o[oc * ohw..(oc + 1) * ohw] {
                        *v += bias;
                    }
                }
            }
        }
        Tensor::new(vec![bsz, self.out_c, oh, ow], out).expect("conv output")
    }

    fn backward(&self, p: &Params, x: &Tensor, g: &Tensor, grads: &mut Option<&mut Params>) -> Tensor {
        let s = x.shape();
        let (bsz, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = self.out_hw(h, w);
        let ckk = self.in_c * self.k * self.k;
        let ohw = oh * ow;
        let weight = p.get(self.w);
        let mut dx = Tensor::zeros(s.to_vec());
        let mut cols = vec![0.0; ckk * ohw];
        let mut dcols = vec![0.0; ckk * ohw];
        for n in 0..bsz {
            let gn = g.row(n);
            if let Some(gr) = grads.as_deref_mut() {
                self.im2col(x.row(n), h, w, oh, ow, &mut cols);
                matmul_bt_acc(gn, &cols, gr.get_mut(self.w), self.out_c, ohw, ckk);
                if let Some(b) = self.b {
                    let db = gr.get_mut(b);
                    for (oc, d) in db.iter_mut().enumerate() {
                        *d += gn[oc * ohw..(oc + 1) * ohw].iter().sum::<f64>();
                    }
                }
            }
            dcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_at_acc(weight, gn, &mut dcols, self.out_c, ckk, ohw);
            self.col2im(&dcols, h, w, oh, ow, dx.row_mut(n));
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub c: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

pub(crate) struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    shape: Vec<usize>,
}

impl BatchNorm {
    fn spatial(shape: &[usize]) -> usize {
        shape[2..].iter().product()
    }

    fn forward(&self, p: &Params, bufs: &[Vec<f64>], x: &Tensor, ctx: &mut FwdCtx) -> (Tensor, BnCache) {
        let shape = x.shape().to_vec();
        let bsz = shape[0];
        let sp = Self::spatial(&shape);
        let c = self.c;
        let count = (bsz * sp) as f64;
        let xs = x.data();
        let idx = |n: usize, ch: usize, i: usize| (n * c + ch) * sp + i;

        let (mean, var) = if ctx.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..bsz {
                    for i in 0..sp {
                        s += xs[idx(n, ch, i)];
                    }
                }
                let m = s / count;
                let mut v = 0.0;
                for n in 0..bsz {
                    for i in 0..sp {
                        let d = xs[idx(n, ch, i)] - m;
                        v += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = v / count;
            }
            let unbiased = var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect();
            ctx.stat_updates.push(StatUpdate {
                mean_buf: self.running_mean,
                var_buf: self.running_var,
                batch_mean: mean.clone(),
                batch_var_unbiased: unbiased,
            });
            (mean, var)
        } else {
            (bufs[self.running_mean].clone(), bufs[self.running_var].clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for n in 0..bsz {
            for ch in 0..c {
                for i in 0..sp {
                    let j = idx(n, ch, i);
                    let h = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = gamma[ch] * h + beta[ch];
                }
            }
        }
        let y = Tensor::new(shape.clone(), y).expect("bn output");
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train: ctx.train,
                shape,
            },
        )
    }

    fn backward(&self, p: &Params, cache: &BnCache, g: Tensor, grads: &mut Option<&mut Params>) -> Tensor {
        let shape = &cache.shape;
        let bsz = shape[0];
        let sp = Self::spatial(shape);
        let c = self.c;
        let count = (bsz * sp) as f64;
        let gs = g.data();
        let idx = |n: usize, ch: usize, i: usize| (n * c + ch) * sp + i;

        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for n in 0..bsz {
            for ch in 0..c {
                for i in 0..sp {
                    let j = idx(n, ch, i);
                    sum_g[ch] += gs[j];
                    sum_gx[ch] += gs[j] * cache.xhat[j];
                }
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            for (d, s) in gr.get_mut(self.gamma).iter_mut().zip(&sum_gx) {
                *d += s;
            }
            for (d, s) in gr.get_mut(self.beta).iter_mut().zip(&sum_g) {
                *d += s;
            }
        }
        let gamma = p.get(self.gamma);
        let mut dx = vec![0.0; gs.len()];
        for n in 0..bsz {
            for ch in 0..c {
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in 0..sp {
                    let j = idx(n, ch, i);
                    dx[j] = if cache.train {
                        scale * (gs[j] - sum_g[ch] / count - cache.xhat[j] * sum_gx[ch] / count)
                    } else {
                        scale * gs[j]
                    };
                }
            }
        }
        Tensor::new(shape.clone(), dx).expect("bn grad")
    }
}

fn relu_forward(mut x: Tensor) -> (Tensor, Cache) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    (x, Cache::Relu(mask))
}

fn relu_backward(mut g: Tensor, mask: &[bool]) -> Tensor {
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    g
}

fn maxpool_forward(x: &Tensor) -> (Tensor, Cache) {
    let s = x.shape();
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = Vec::with_capacity(bsz * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..bsz * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if xs[j] > xs[best] {
                        best = j;
                    }
                }
                out.push(xs[best]);
                argmax.push(best);
            }
        }
    }
    (
        Tensor::new(vec![bsz, c, oh, ow], out).expect("pool output"),
        Cache::MaxPool {
            argmax,
            in_shape: s.to_vec(),
        },
    )
}

fn maxpool_backward(g: &Tensor, argmax: &[usize], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape.to_vec());
    let d = dx.data_mut();
    for (&j, &v) in argmax.iter().zip(g.data()) {
        d[j] += v;
    }
    dx
}

fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (bsz, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let out = x
        .data()
        .chunks(sp)
        .map(|plane| plane.iter().sum::<f64>() / sp as f64)
        .collect();
    Tensor::new(vec![bsz, c], out).expect("pool output")
}

fn global_avg_pool_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let sp: usize = in_shape[2..].iter().product();
    let mut data = Vec::with_capacity(g.data().len() * sp);
    for &v in g.data() {
        data.extend(std::iter::repeat_n(v / sp as f64, sp));
    }
    Tensor::new(in_shape.to_vec(), data).expect("pool grad")
}

/// Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv plus a shortcut
/// (1×1 strided conv on the activated input when the shape changes).
#[derive(Debug, Clone)]
pub(crate) struct PreActBlock {
    pub bn1: BatchNorm,
    pub conv1: Conv2d,
    pub bn2: BatchNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

pub(crate) struct PreActCache {
    bn1: BnCache,
    relu1: Vec<bool>,
    act1: Tensor,
    bn2: BnCache,
    relu2: Vec<bool>,
    act2: Tensor,
}

impl PreActBlock {
    fn forward(&self, p: &Params, bufs: &[Vec<f64>], x: Tensor, ctx: &mut FwdCtx) -> (Tensor, PreActCache) {
        let (b1, bn1) = self.bn1.forward(p, bufs, &x, ctx);
        let (act1, relu1) = match relu_forward(b1) {
            (t, Cache::Relu(m)) => (t, m),
            _ => unreachable!(),
        };
        let h1 = self.conv1.forward(p, &act1);
        let (b2, bn2) = self.bn2.forward(p, bufs, &h1, ctx);
        let (act2, relu2) = match relu_forward(b2) {
            (t, Cache::Relu(m)) => (t, m),
            _ => unreachable!(),
        };
        let mut out = self.conv2.forward(p, &act2);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(p, &act1),
            None => x,
        };
        for (o, s) in out.data_mut().iter_mut().zip(sc.data()) {
            *o += s;
        }
        (
            out,
            PreActCache {
                bn1,
                relu1,
                act1,
                bn2,
                relu2,
                act2,
            },
        )
    }

    fn backward(&self, p: &Params, c: &PreActCache, g: Tensor, grads: &mut Option<&mut Params>) -> Tensor {
        let d_act2 = self.conv2.backward(p, &c.act2, &g, grads);
        let d_b2 = relu_backward(d_act2, &c.relu2);
        let d_h1 = self.bn2.backward(p, &c.bn2, d_b2, grads);
        let mut d_act1 = self.conv1.backward(p, &c.act1, &d_h1, grads);
        if let Some(conv) = &self.shortcut {
            let d_sc = conv.backward(p, &c.act1, &g, grads);
            for (a, b) in d_act1.data_mut().iter_mut().zip(d_sc.data()) {
                *a += b;
            }
        }
        let d_b1 = relu_backward(d_act1, &c.relu1);
        let mut dx = self.bn1.backward(p, &c.bn1, d_b1, grads);
        if self.shortcut.is_none() {
            for (a, b) in dx.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        dx
    }
}
