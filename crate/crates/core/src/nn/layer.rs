use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::gemm;
use crate::nn::spectral::{self, PowerIteration, SpectralCache};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv3x3,
    Deconv2x,
    Relu,
    BatchNorm,
    Dropout,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Deconv2x => "deconv2x",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Dropout => "dropout",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "dense" => LayerKind::Dense,
            "conv3x3" => LayerKind::Conv3x3,
            "deconv2x" => LayerKind::Deconv2x,
            "relu" => LayerKind::Relu,
            "batchnorm" => LayerKind::BatchNorm,
            "dropout" => LayerKind::Dropout,
            _ => return None,
        })
    }
}

/// Affine map over the channel axis, `scale * (W x + b)`. Works on `[in]` and
/// `[in, H, W]` samples; the latter is a pointwise (1x1) projection.
///
/// `scale` is fixed; a small value shrinks the effective step size of every
/// upstream parameter without changing what the layer can represent.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spectral: Option<PowerIteration>,
    pub scale: f64,
}

/// 3x3 convolution, stride 1, zero padding 1. Weight is `[out, in, 3, 3]`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spectral: Option<PowerIteration>,
}

/// 2x2 transposed convolution with stride 2. Weight is `[in, out, 2, 2]`.
#[derive(Clone, Debug)]
pub struct Deconv2x {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spectral: Option<PowerIteration>,
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense(Dense),
    Conv3x3(Conv3x3),
    Deconv2x(Deconv2x),
    Relu,
    BatchNorm(BatchNorm),
    Dropout(Dropout),
}

fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from dims")
}

fn spectral_state(enabled: bool, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Option<PowerIteration> {
    enabled.then(|| PowerIteration::new(rows, cols, rng.gen()))
}

impl Layer {
    /// Kaiming-initialized dense layer; `gain` multiplies the fan-in standard deviation.
    pub fn dense(inputs: usize, outputs: usize, gain: f64, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = kaiming(&[outputs, inputs], inputs, gain, rng);
        Layer::Dense(Dense {
            weight,
            bias: Tensor::zeros(&[outputs]),
            spectral: spectral_state(spectral, outputs, inputs, rng),
            scale: 1.0,
        })
    }

    /// Sets the fixed output scale of a dense layer; other layers are unchanged.
    pub fn with_output_scale(mut self, scale: f64) -> Self {
        if let Layer::Dense(d) = &mut self {
            d.scale = scale;
        }
        self
    }

    pub fn conv3x3(inputs: usize, outputs: usize, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = kaiming(&[outputs, inputs, 3, 3], inputs * 9, 1.0, rng);
        Layer::Conv3x3(Conv3x3 {
            weight,
            bias: Tensor::zeros(&[outputs]),
            spectral: spectral_state(spectral, outputs, inputs * 9, rng),
        })
    }

    pub fn deconv2x(inputs: usize, outputs: usize, spectral: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = kaiming(&[inputs, outputs, 2, 2], inputs, 1.0, rng);
        Layer::Deconv2x(Deconv2x {
            weight,
            bias: Tensor::zeros(&[outputs]),
            spectral: spectral_state(spectral, inputs, outputs * 4, rng),
        })
    }

    pub fn batchnorm(channels: usize) -> Self {
        Layer::BatchNorm(BatchNorm {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-9,
        })
    }

    pub fn dropout(rate: f64) -> Self {
        Layer::Dropout(Dropout { rate })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv3x3(_) => LayerKind::Conv3x3,
            Layer::Deconv2x(_) => LayerKind::Deconv2x,
            Layer::Relu => LayerKind::Relu,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Dropout(_) => LayerKind::Dropout,
        }
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral_state().is_some()
    }

    pub(crate) fn spectral_state(&self) -> Option<&PowerIteration> {
        match self {
            Layer::Dense(l) => l.spectral.as_ref(),
            Layer::Conv3x3(l) => l.spectral.as_ref(),
            Layer::Deconv2x(l) => l.spectral.as_ref(),
            _ => None,
        }
    }

    pub(crate) fn spectral_state_mut(&mut self) -> Option<&mut PowerIteration> {
        match self {
            Layer::Dense(l) => l.spectral.as_mut(),
            Layer::Conv3x3(l) => l.spectral.as_mut(),
            Layer::Deconv2x(l) => l.spectral.as_mut(),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::Conv3x3(l) => vec![&l.weight, &l.bias],
            Layer::Deconv2x(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Relu | Layer::Dropout(_) => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv3x3(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Deconv2x(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Relu | Layer::Dropout(_) => Vec::new(),
        }
    }

    /// Per-sample output shape, or a description of why `input` does not fit.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Dense(l) => {
                let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
                match input {
                    [c] | [c, _, _] if *c == inp => {
                        let mut s = input.to_vec();
                        s[0] = out;
                        Ok(s)
                    }
                    _ => Err(format!("dense expects [{inp}] or [{inp}, H, W], got {input:?}")),
                }
            }
            Layer::Conv3x3(l) => {
                let (out, inp) = (l.weight.shape()[0], l.weight.shape()[1]);
                match input {
                    [c, h, w] if *c == inp => Ok(vec![out, *h, *w]),
                    _ => Err(format!("conv3x3 expects [{inp}, H, W], got {input:?}")),
                }
            }
            Layer::Deconv2x(l) => {
                let (inp, out) = (l.weight.shape()[0], l.weight.shape()[1]);
                match input {
                    [c, h, w] if *c == inp => Ok(vec![out, 2 * h, 2 * w]),
                    _ => Err(format!("deconv2x expects [{inp}, H, W], got {input:?}")),
                }
            }
            Layer::BatchNorm(l) => {
                let ch = l.gamma.len();
                match input {
                    [c] | [c, _, _] if *c == ch => Ok(input.to_vec()),
                    _ => Err(format!("batchnorm expects {ch} channels, got {input:?}")),
                }
            }
            Layer::Relu | Layer::Dropout(_) => Ok(input.to_vec()),
        }
    }

    /// `seed` switches dropout on; the stack supplies one only when dropout is active.
    pub(crate) fn forward(&self, x: &Tensor, mode: Mode, seed: Option<u64>) -> (Tensor, LayerCache) {
        match self {
            Layer::Dense(l) => {
                let sn = l.spectral.as_ref().map(|s| spectral::effective_weight(&l.weight, s, mode == Mode::Train));
                let w = sn.as_ref().map_or(&l.weight, |c| &c.weight);
                let mut y = dense_forward(x, w, &l.bias);
                if l.scale != 1.0 {
                    y.data_mut().iter_mut().for_each(|v| *v *= l.scale);
                }
                (y, LayerCache::Affine { input: x.clone(), spectral: sn })
            }
            Layer::Conv3x3(l) => {
                let sn = l.spectral.as_ref().map(|s| spectral::effective_weight(&l.weight, s, mode == Mode::Train));
                let w = sn.as_ref().map_or(&l.weight, |c| &c.weight);
                let y = conv_forward(x, w, &l.bias);
                (y, LayerCache::Affine { input: x.clone(), spectral: sn })
            }
            Layer::Deconv2x(l) => {
                let sn = l.spectral.as_ref().map(|s| spectral::effective_weight(&l.weight, s, mode == Mode::Train));
                let w = sn.as_ref().map_or(&l.weight, |c| &c.weight);
                let y = deconv_forward(x, w, &l.bias);
                (y, LayerCache::Affine { input: x.clone(), spectral: sn })
            }
            Layer::Relu => {
                let data = x.data().iter().map(|&v| v.max(0.0)).collect();
                let y = Tensor::new(x.shape().to_vec(), data).expect("same shape");
                (y, LayerCache::Relu { input: x.clone() })
            }
            Layer::BatchNorm(l) => batchnorm_forward(l, x, mode),
            Layer::Dropout(l) => {
                let Some(seed) = seed.filter(|_| l.rate > 0.0) else {
                    return (x.clone(), LayerCache::Dropout { mask: None });
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - l.rate;
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                let y = Tensor::new(x.shape().to_vec(), data).expect("same shape");
                (y, LayerCache::Dropout { mask: Some(mask) })
            }
        }
    }

    /// Input gradient and parameter gradients (in `params()` order).
    pub(crate) fn backward(&self, cache: &LayerCache, dy: &Tensor) -> (Tensor, Vec<Tensor>) {
        match (self, cache) {
            (Layer::Dense(l), LayerCache::Affine { input, spectral }) => {
                let w = spectral.as_ref().map_or(&l.weight, |c| &c.weight);
                let scaled;
                let dy = if l.scale != 1.0 {
                    let mut t = dy.clone();
                    t.data_mut().iter_mut().for_each(|v| *v *= l.scale);
                    scaled = t;
                    &scaled
                } else {
                    dy
                };
                let (dx, dw, db) = dense_backward(input, w, dy);
                (dx, vec![unspectral(dw, spectral), db])
            }
            (Layer::Conv3x3(l), LayerCache::Affine { input, spectral }) => {
                let w = spectral.as_ref().map_or(&l.weight, |c| &c.weight);
                let (dx, dw, db) = conv_backward(input, w, dy);
                (dx, vec![unspectral(dw, spectral), db])
            }
            (Layer::Deconv2x(l), LayerCache::Affine { input, spectral }) => {
                let w = spectral.as_ref().map_or(&l.weight, |c| &c.weight);
                let (dx, dw, db) = deconv_backward(input, w, dy);
                (dx, vec![unspectral(dw, spectral), db])
            }
            (Layer::Relu, LayerCache::Relu { input }) => {
                let data = input
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                (Tensor::new(dy.shape().to_vec(), data).expect("same shape"), Vec::new())
            }
            (Layer::BatchNorm(l), LayerCache::BatchNorm(c)) => batchnorm_backward(l, c, dy),
            (Layer::Dropout(_), LayerCache::Dropout { mask }) => match mask {
                None => (dy.clone(), Vec::new()),
                Some(m) => {
                    let data = dy.data().iter().zip(m).map(|(g, m)| g * m).collect();
                    (Tensor::new(dy.shape().to_vec(), data).expect("same shape"), Vec::new())
                }
            },
            _ => unreachable!("cache kind verified by the stack"),
        }
    }
}

fn unspectral(dw: Tensor, cache: &Option<SpectralCache>) -> Tensor {
    match cache {
        Some(c) => spectral::backprop_weight(&dw, c),
        None => dw,
    }
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Affine {
        input: Tensor,
        spectral: Option<SpectralCache>,
    },
    Relu {
        input: Tensor,
    },
    BatchNorm(BatchNormCache),
    Dropout {
        mask: Option<Vec<f64>>,
    },
}

impl LayerCache {
    pub(crate) fn matches(&self, kind: LayerKind) -> bool {
        matches!(
            (self, kind),
            (LayerCache::Affine { .. }, LayerKind::Dense | LayerKind::Conv3x3 | LayerKind::Deconv2x)
                | (LayerCache::Relu { .. }, LayerKind::Relu)
                | (LayerCache::BatchNorm(_), LayerKind::BatchNorm)
                | (LayerCache::Dropout { .. }, LayerKind::Dropout)
        )
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
    pub training: bool,
}

/// (batch, channels, spatial) view of a `[N, C]` or `[N, C, H, W]` tensor.
fn channel_view(x: &Tensor) -> (usize, usize, usize) {
    let s = x.shape();
    let spatial = s.iter().skip(2).product::<usize>().max(1);
    (s[0], s[1], spatial)
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (n, _, spatial) = channel_view(x);
    let mut shape = x.shape().to_vec();
    shape[1] = out;
    let mut y = Tensor::zeros(&shape);
    if spatial == 1 && x.shape().len() == 2 {
        let yd = y.data_mut();
        for i in 0..n {
            yd[i * out..(i + 1) * out].copy_from_slice(b.data());
        }
        gemm(n, inp, out, x.data(), false, w.data(), true, 1.0, yd);
    } else {
        let yd = y.data_mut();
        for i in 0..n {
            let ys = &mut yd[i * out * spatial..(i + 1) * out * spatial];
            for (o, &bv) in b.data().iter().enumerate() {
                ys[o * spatial..(o + 1) * spatial].fill(bv);
            }
            let xs = &x.data()[i * inp * spatial..(i + 1) * inp * spatial];
            gemm(out, inp, spatial, w.data(), false, xs, false, 1.0, ys);
        }
    }
    y
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (n, _, spatial) = channel_view(x);
    let mut dx = x.zeros_like();
    let mut dw = w.zeros_like();
    let mut db = Tensor::zeros(&[out]);
    if spatial == 1 && x.shape().len() == 2 {
        gemm(n, out, inp, dy.data(), false, w.data(), false, 0.0, dx.data_mut());
        gemm(out, n, inp, dy.data(), true, x.data(), false, 0.0, dw.data_mut());
        for i in 0..n {
            for (d, g) in db.data_mut().iter_mut().zip(&dy.data()[i * out..(i + 1) * out]) {
                *d += g;
            }
        }
    } else {
        for i in 0..n {
            let xs = &x.data()[i * inp * spatial..(i + 1) * inp * spatial];
            let gs = &dy.data()[i * out * spatial..(i + 1) * out * spatial];
            let dxs = &mut dx.data_mut()[i * inp * spatial..(i + 1) * inp * spatial];
            gemm(inp, out, spatial, w.data(), true, gs, false, 0.0, dxs);
            gemm(out, spatial, inp, gs, false, xs, true, 1.0, dw.data_mut());
            for (o, d) in db.data_mut().iter_mut().enumerate() {
                *d += gs[o * spatial..(o + 1) * spatial].iter().sum::<f64>();
            }
        }
    }
    (dx, dw, db)
}

/// `[C, H, W]` → `[C*9, H*W]` patches for a padded 3x3 kernel.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - 1;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, g) in src.iter().enumerate() {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &Tensor, wt: &Tensor, b: &Tensor) -> Tensor {
    let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut y = Tensor::zeros(&[n, cout, h, w]);
    let mut cols = vec![0.0; cin * 9 * hw];
    for i in 0..n {
        im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut cols);
        let ys = &mut y.data_mut()[i * cout * hw..(i + 1) * cout * hw];
        for (o, &bv) in b.data().iter().enumerate() {
            ys[o * hw..(o + 1) * hw].fill(bv);
        }
        gemm(cout, cin * 9, hw, wt.data(), false, &cols, false, 1.0, ys);
    }
    y
}

fn conv_backward(x: &Tensor, wt: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cout, cin) = (wt.shape()[0], wt.shape()[1]);
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let mut dx = x.zeros_like();
    let mut dw = wt.zeros_like();
    let mut db = Tensor::zeros(&[cout]);
    let mut cols = vec![0.0; cin * 9 * hw];
    let mut dcols = vec![0.0; cin * 9 * hw];
    for i in 0..n {
        let gs = &dy.data()[i * cout * hw..(i + 1) * cout * hw];
        im2col(&x.data()[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut cols);
        gemm(cout, hw, cin * 9, gs, false, &cols, true, 1.0, dw.data_mut());
        gemm(cin * 9, cout, hw, wt.data(), true, gs, false, 0.0, &mut dcols);
        col2im(&dcols, cin, h, w, &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw]);
        for (o, d) in db.data_mut().iter_mut().enumerate() {
            *d += gs[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
    }
    (dx, dw, db)
}

fn deconv_forward(x: &Tensor, wt: &Tensor, b: &Tensor) -> Tensor {
    let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    let mut cols = vec![0.0; cout * 4 * hw];
    for i in 0..n {
        let xs = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        gemm(cout * 4, cin, hw, wt.data(), true, xs, false, 0.0, &mut cols);
        let ys = &mut y.data_mut()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            let bv = b.data()[co];
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &cols[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for yy in 0..h {
                        for xx in 0..w {
                            ys[co * oh * ow + (2 * yy + a) * ow + 2 * xx + bb] = row[yy * w + xx] + bv;
                        }
                    }
                }
            }
        }
    }
    y
}

fn deconv_backward(x: &Tensor, wt: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
    let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = x.zeros_like();
    let mut dw = wt.zeros_like();
    let mut db = Tensor::zeros(&[cout]);
    let mut dcols = vec![0.0; cout * 4 * hw];
    for i in 0..n {
        let gs = &dy.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
        for co in 0..cout {
            for a in 0..2 {
                for bb in 0..2 {
                    let row = &mut dcols[(co * 4 + a * 2 + bb) * hw..(co * 4 + a * 2 + bb + 1) * hw];
                    for yy in 0..h {
                        for xx in 0..w {
                            row[yy * w + xx] = gs[co * oh * ow + (2 * yy + a) * ow + 2 * xx + bb];
                        }
                    }
                }
            }
            db.data_mut()[co] += gs[co * oh * ow..(co + 1) * oh * ow].iter().sum::<f64>();
        }
        let xs = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        gemm(cin, cout * 4, hw, wt.data(), false, &dcols, false, 0.0, &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw]);
        gemm(cin, hw, cout * 4, xs, false, &dcols, true, 1.0, dw.data_mut());
    }
    (dx, dw, db)
}

fn batchnorm_forward(l: &BatchNorm, x: &Tensor, mode: Mode) -> (Tensor, LayerCache) {
    let (n, c, spatial) = channel_view(x);
    let count = n * spatial;
    let training = mode == Mode::Train;
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data()[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                mean[ch] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for i in 0..n {
            for ch in 0..c {
                let s = &x.data()[(i * c + ch) * spatial..(i * c + ch + 1) * spatial];
                var[ch] += s.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        (mean, var)
    } else {
        (l.running_mean.clone(), l.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + l.eps).sqrt()).collect();
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * spatial..(i * c + ch + 1) * spatial;
            let (g, b) = (l.gamma.data()[ch], l.beta.data()[ch]);
            for idx in range {
                let xh = (x.data()[idx] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[idx] = xh;
                y.data_mut()[idx] = g * xh + b;
            }
        }
    }
    let cache = BatchNormCache {
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
        count,
        training,
    };
    (y, LayerCache::BatchNorm(cache))
}

fn batchnorm_backward(l: &BatchNorm, cache: &BatchNormCache, dy: &Tensor) -> (Tensor, Vec<Tensor>) {
    let (n, c, spatial) = channel_view(dy);
    let m = cache.count as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            for idx in (i * c + ch) * spatial..(i * c + ch + 1) * spatial {
                dgamma[ch] += dy.data()[idx] * cache.xhat.data()[idx];
                dbeta[ch] += dy.data()[idx];
            }
        }
    }
    let mut dx = dy.zeros_like();
    for i in 0..n {
        for ch in 0..c {
            let g = l.gamma.data()[ch];
            let is = cache.inv_std[ch];
            for idx in (i * c + ch) * spatial..(i * c + ch + 1) * spatial {
                dx.data_mut()[idx] = if cache.training {
                    // sum(dxhat) = g * dbeta, sum(dxhat * xhat) = g * dgamma
                    g * is / m * (m * dy.data()[idx] - dbeta[ch] - cache.xhat.data()[idx] * dgamma[ch])
                } else {
                    g * is * dy.data()[idx]
                };
            }
        }
    }
    let dg = Tensor::new(vec![c], dgamma).expect("channels");
    let db = Tensor::new(vec![c], dbeta).expect("channels");
    (dx, vec![dg, db])
}
