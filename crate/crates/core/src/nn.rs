//! Layers with hand-written backward passes.
//!
//! Parameters live in a [`ParamStore`]; layers only hold ids into it. A
//! training forward returns a cache that the matching backward consumes, so
//! inference needs nothing but `&self`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running statistics are stored here too but are not optimised.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        self.entries.push(ParamEntry {
            name,
            shape,
            value,
            grad,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id].value
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id].grad
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D convolution with square kernels and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

pub enum Init {
    He,
    Zeros,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let len = out_channels * fan_in;
        let value = match init {
            Init::He => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..len).map(|_| normal.sample(rng)).collect()
            }
            Init::Zeros => vec![0.0; len],
        };
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            value,
            true,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                vec![out_channels],
                vec![0.0; out_channels],
                true,
            )
        });
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |d: usize| (d + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, col: &mut [f64]) {
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], h: usize, w: usize, dx: &mut [f64]) {
        let (oh, ow) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let cols = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * cols..][..cols];
                    for oy in 0..oh {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cols = oh * ow;
        let weight = store.value(self.weight);
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kdim * cols]
        };
        for i in 0..n {
            let input: &[f64] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            let y = out.item_mut(i);
            gemm(
                self.out_channels,
                kdim,
                cols,
                (weight, kdim as isize, 1),
                (input, cols as isize, 1),
                0.0,
                y,
            );
            if let Some(b) = self.bias {
                for (plane, bias) in y.chunks_mut(cols).zip(store.value(b)) {
                    plane.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, grad: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = self.output_size(h, w);
        let kdim = self.in_channels * self.kernel * self.kernel;
        let cols = oh * ow;
        let mut dx = Tensor::zeros(x.shape());
        let mut col = vec![0.0; kdim * cols];
        let mut dcol = vec![0.0; kdim * cols];
        let weight = store.value(self.weight).to_vec();
        for i in 0..n {
            let input: &[f64] = if self.is_pointwise() {
                x.item(i)
            } else {
                self.im2col(x.item(i), h, w, &mut col);
                &col
            };
            let gy = grad.item(i);
            // dW += dY . col^T
            gemm(
                self.out_channels,
                cols,
                kdim,
                (gy, cols as isize, 1),
                (input, 1, cols as isize),
                1.0,
                store.grad_mut(self.weight),
            );
            if let Some(b) = self.bias {
                for (g, plane) in store.grad_mut(b).iter_mut().zip(gy.chunks(cols)) {
                    *g += plane.iter().sum::<f64>();
                }
            }
            // dcol = W^T . dY
            if self.is_pointwise() {
                gemm(
                    kdim,
                    self.out_channels,
                    cols,
                    (&weight, 1, kdim as isize),
                    (gy, cols as isize, 1),
                    0.0,
                    dx.item_mut(i),
                );
            } else {
                gemm(
                    kdim,
                    self.out_channels,
                    cols,
                    (&weight, 1, kdim as isize),
                    (gy, cols as isize, 1),
                    0.0,
                    &mut dcol,
                );
                self.col2im(&dcol, h, w, dx.item_mut(i));
            }
        }
        dx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    channels: usize,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = channels;
        BatchNorm {
            channels,
            gamma: store.add(format!("{name}.weight"), vec![c], vec![1.0; c], true),
            beta: store.add(format!("{name}.bias"), vec![c], vec![0.0; c], true),
            running_mean: store.add(format!("{name}.running_mean"), vec![c], vec![0.0; c], false),
            running_var: store.add(format!("{name}.running_var"), vec![c], vec![1.0; c], false),
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (gamma, beta) = (store.value(self.gamma), store.value(self.beta));
        let (mean, var) = (
            store.value(self.running_mean),
            store.value(self.running_var),
        );
        let mut out = x.clone();
        let plane = x.plane();
        for item in out.data_mut().chunks_mut(self.channels * plane) {
            for (c, ch) in item.chunks_mut(plane).enumerate() {
                let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
                let shift = beta[c] - mean[c] * scale;
                ch.iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        out
    }

    pub fn forward_train(&self, store: &ParamStore, x: &Tensor) -> (Tensor, BnCache) {
        let [n, c, _, _] = x.shape();
        let plane = x.plane();
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (ch, vals) in x.item(i).chunks(plane).enumerate() {
                mean[ch] += vals.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for (ch, vals) in x.item(i).chunks(plane).enumerate() {
                var[ch] += vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (gamma, beta) = (store.value(self.gamma), store.value(self.beta));
        let mut x_hat = x.clone();
        let mut out = x.clone();
        for i in 0..n {
            for (ch, (xh, o)) in x_hat
                .item_mut(i)
                .chunks_mut(plane)
                .zip(out.item_mut(i).chunks_mut(plane))
                .enumerate()
            {
                for (a, b) in xh.iter_mut().zip(o.iter_mut()) {
                    *a = (*a - mean[ch]) * inv_std[ch];
                    *b = gamma[ch] * *a + beta[ch];
                }
            }
        }
        (
            out,
            BnCache {
                x_hat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Backward pass. Also folds the batch statistics into the running estimates,
    /// so every training forward must be paired with exactly one backward.
    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, grad: &Tensor) -> Tensor {
        let [n, c, _, _] = grad.shape();
        let plane = grad.plane();
        let count = (n * plane) as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for i in 0..n {
            for (ch, (g, xh)) in grad
                .item(i)
                .chunks(plane)
                .zip(cache.x_hat.item(i).chunks(plane))
                .enumerate()
            {
                sum_g[ch] += g.iter().sum::<f64>();
                sum_gx[ch] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let gamma = store.value(self.gamma).to_vec();
        let mut dx = grad.clone();
        for i in 0..n {
            for (ch, (d, xh)) in dx
                .item_mut(i)
                .chunks_mut(plane)
                .zip(cache.x_hat.item(i).chunks(plane))
                .enumerate()
            {
                let k = gamma[ch] * cache.inv_std[ch] / count;
                for (v, xh) in d.iter_mut().zip(xh) {
                    *v = k * (count * *v - sum_g[ch] - xh * sum_gx[ch]);
                }
            }
        }
        for (g, s) in store.grad_mut(self.gamma).iter_mut().zip(&sum_gx) {
            *g += s;
        }
        for (g, s) in store.grad_mut(self.beta).iter_mut().zip(&sum_g) {
            *g += s;
        }
        let unbias = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        let rm = &mut store.entries_mut()[self.running_mean].value;
        for (r, m) in rm.iter_mut().zip(&cache.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = &mut store.entries_mut()[self.running_var].value;
        for (r, v) in rv.iter_mut().zip(&cache.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
        }
        dx
    }
}

fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the (post-ReLU) activation is not positive.
fn relu_mask(grad: &mut Tensor, activation: &Tensor) {
    for (g, a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

pub struct ConvBnCache {
    input: Tensor,
    bn: BnCache,
    output: Tensor,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                false,
                Init::He,
                rng,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
            relu,
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(store, &self.conv.forward(store, x));
        if self.relu {
            relu_in_place(&mut y);
        }
        y
    }

    pub fn forward_train(&self, store: &ParamStore, x: &Tensor) -> (Tensor, ConvBnCache) {
        let (mut y, bn) = self.bn.forward_train(store, &self.conv.forward(store, x));
        if self.relu {
            relu_in_place(&mut y);
        }
        let cache = ConvBnCache {
            input: x.clone(),
            bn,
            output: y.clone(),
        };
        (y, cache)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ConvBnCache, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        if self.relu {
            relu_mask(&mut g, &cache.output);
        }
        let g = self.bn.backward(store, &cache.bn, &g);
        self.conv.backward(store, &cache.input, &g)
    }
}

/// Residual block: a chain of conv-bn layers plus an identity (or projected) shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    main: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

pub struct ResidualCache {
    main: Vec<ConvBnCache>,
    shortcut: Option<ConvBnCache>,
    output: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (width = out / 4).
    Bottleneck,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let main = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(
                    store,
                    &format!("{name}.0"),
                    in_channels,
                    out_channels,
                    3,
                    stride,
                    true,
                    rng,
                ),
                ConvBn::new(
                    store,
                    &format!("{name}.1"),
                    out_channels,
                    out_channels,
                    3,
                    1,
                    false,
                    rng,
                ),
            ],
            BlockKind::Bottleneck => {
                let mid = (out_channels / 4).max(1);
                vec![
                    ConvBn::new(
                        store,
                        &format!("{name}.0"),
                        in_channels,
                        mid,
                        1,
                        1,
                        true,
                        rng,
                    ),
                    ConvBn::new(store, &format!("{name}.1"), mid, mid, 3, stride, true, rng),
                    ConvBn::new(
                        store,
                        &format!("{name}.2"),
                        mid,
                        out_channels,
                        1,
                        1,
                        false,
                        rng,
                    ),
                ]
            }
        };
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            ConvBn::new(
                store,
                &format!("{name}.shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                false,
                rng,
            )
        });
        ResidualBlock { main, shortcut }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &self.main {
            h = layer.forward_eval(store, &h);
        }
        match &self.shortcut {
            Some(s) => h.add_assign(&s.forward_eval(store, x)),
            None => h.add_assign(x),
        }
        relu_in_place(&mut h);
        h
    }

    pub fn forward_train(&self, store: &ParamStore, x: &Tensor) -> (Tensor, ResidualCache) {
        let mut h = x.clone();
        let mut main = Vec::with_capacity(self.main.len());
        for layer in &self.main {
            let (y, cache) = layer.forward_train(store, &h);
            main.push(cache);
            h = y;
        }
        let shortcut = match &self.shortcut {
            Some(s) => {
                let (y, cache) = s.forward_train(store, x);
                h.add_assign(&y);
                Some(cache)
            }
            None => {
                h.add_assign(x);
                None
            }
        };
        relu_in_place(&mut h);
        let cache = ResidualCache {
            main,
            shortcut,
            output: h.clone(),
        };
        (h, cache)
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &ResidualCache, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        relu_mask(&mut g, &cache.output);
        let mut gx = match (&self.shortcut, &cache.shortcut) {
            (Some(s), Some(c)) => s.backward(store, c, &g),
            _ => g.clone(),
        };
        let mut gm = g;
        for (layer, c) in self.main.iter().zip(&cache.main).rev() {
            gm = layer.backward(store, c, &gm);
        }
        gx.add_assign(&gm);
        gx
    }
}

/// Upsample, concatenate the skip features, then two conv-bn-relu layers.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    up_channels: usize,
    convs: [ConvBn; 2],
}

pub struct DecoderCache {
    convs: [ConvBnCache; 2],
}

impl DecoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        up_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        DecoderBlock {
            up_channels,
            convs: [
                ConvBn::new(
                    store,
                    &format!("{name}.0"),
                    up_channels + skip_channels,
                    out_channels,
                    3,
                    1,
                    true,
                    rng,
                ),
                ConvBn::new(
                    store,
                    &format!("{name}.1"),
                    out_channels,
                    out_channels,
                    3,
                    1,
                    true,
                    rng,
                ),
            ],
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor, skip: &Tensor) -> Tensor {
        let joined = Tensor::concat_channels(&x.upsample2(), skip);
        let h = self.convs[0].forward_eval(store, &joined);
        self.convs[1].forward_eval(store, &h)
    }

    pub fn forward_train(
        &self,
        store: &ParamStore,
        x: &Tensor,
        skip: &Tensor,
    ) -> (Tensor, DecoderCache) {
        let joined = Tensor::concat_channels(&x.upsample2(), skip);
        let (h, c0) = self.convs[0].forward_train(store, &joined);
        let (y, c1) = self.convs[1].forward_train(store, &h);
        (y, DecoderCache { convs: [c0, c1] })
    }

    /// Returns the gradients for the upsampled input and for the skip features.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DecoderCache,
        grad: &Tensor,
    ) -> (Tensor, Tensor) {
        let g = self.convs[1].backward(store, &cache.convs[1], grad);
        let g = self.convs[0].backward(store, &cache.convs[0], &g);
        let (g_up, g_skip) = g.split_channels(self.up_channels);
        (g_up.upsample2_backward(), g_skip)
    }
}
