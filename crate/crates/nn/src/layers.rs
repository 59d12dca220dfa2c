//! Layers with explicit forward/backward passes over [`FeatureMap`]s.
//!
//! Each layer keeps whatever it needs for its backward pass from the most
//! recent forward call made in [`Mode::Train`]. Calling `backward` without
//! such a forward is a programming error and panics.

use rand::{Rng, RngCore};

use crate::scalar::{fast_dot, fast_sum, gemm, gemm_general, gemm_into, transpose, Mat, Scalar};
use crate::tensor::{FeatureMap, Param};

/// How a forward pass treats batch norm, dropout and caching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, caches kept for backward.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics with dropout active (Monte Carlo dropout).
    McDropout,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        self == Mode::Train
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McDropout)
    }

    pub fn records(self) -> bool {
        self == Mode::Train
    }
}

fn kaiming_uniform<T: Scalar>(rng: &mut dyn RngCore, len: usize, fan_in: usize, slope: f64) -> Vec<T> {
    let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
    (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
}

/// Square convolution with stride 1 and "same" zero padding. Kernel size 1 or 3.
///
/// A 3x3 convolution is computed as nine shifted 1x1 products over a copy of
/// the input with a one-pixel zero ring around every image. In that layout a
/// kernel offset is a constant shift of the flat pixel index, so each product
/// is a plain strided GEMM and no patch matrix is ever built.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    /// Recorded input: padded for 3x3 kernels, as given for 1x1.
    input: Option<Cached<T>>,
}

#[derive(Clone, Debug)]
struct Cached<T> {
    data: Vec<T>,
    batch: usize,
    height: usize,
    width: usize,
}

/// Geometry of the zero-ringed layout for `batch` images of `h x w`.
#[derive(Clone, Copy, Debug)]
struct Padded {
    batch: usize,
    h: usize,
    w: usize,
}

impl Padded {
    fn wp(&self) -> usize {
        self.w + 2
    }

    /// Flat length of one padded channel.
    fn len(&self) -> usize {
        self.batch * (self.h + 2) * self.wp()
    }

    /// Range of flat positions covering every interior pixel; any 3x3 shift
    /// of it stays inside the channel.
    fn span(&self) -> (usize, usize) {
        (self.wp() + 1, self.len() - self.wp() - 1)
    }

    fn shift(&self, tap: usize) -> isize {
        (tap as isize / 3 - 1) * self.wp() as isize + (tap as isize % 3 - 1)
    }

    fn pad<T: Scalar>(&self, src: &[T], channels: usize) -> Vec<T> {
        let (h, w, wp, len) = (self.h, self.w, self.wp(), self.len());
        let mut out = vec![T::zero(); channels * len];
        for c in 0..channels {
            for n in 0..self.batch {
                for y in 0..h {
                    let s = ((c * self.batch + n) * h + y) * w;
                    let d = c * len + (n * (h + 2) + y + 1) * wp + 1;
                    out[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }

    fn unpad<T: Scalar>(&self, src: &[T], channels: usize) -> Vec<T> {
        let (h, w, wp, len) = (self.h, self.w, self.wp(), self.len());
        let mut out = Vec::with_capacity(channels * self.batch * h * w);
        for c in 0..channels {
            for n in 0..self.batch {
                for y in 0..h {
                    let s = c * len + (n * (h + 2) + y + 1) * wp + 1;
                    out.extend_from_slice(&src[s..s + w]);
                }
            }
        }
        out
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        with_bias: bool,
        slope: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let k = in_channels * kernel * kernel;
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            kaiming_uniform(rng, out_channels * k, k, slope),
        );
        let bias = with_bias.then(|| Param::filled(format!("{name}.bias"), vec![out_channels], T::zero()));
        Self { in_channels, out_channels, kernel, weight, bias, input: None }
    }

    /// Weights of one 3x3 tap as a `cout x cin` view.
    fn tap_weights(&self, tap: usize) -> Mat<'_, T> {
        Mat::general(&self.weight.value[tap..], self.out_channels, self.in_channels, self.in_channels * 9, 9)
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let nhw = x.channel_len();
        let (cin, cout) = (self.in_channels, self.out_channels);
        let mut out = if self.kernel == 1 {
            let mut out = FeatureMap::zeros(cout, x.batch, x.height, x.width);
            gemm(T::one(), Mat::new(&self.weight.value, cout, cin), Mat::new(&x.data, cin, nhw), T::zero(), &mut out.data);
            if mode.records() {
                self.input = Some(Cached { data: x.data.clone(), batch: x.batch, height: x.height, width: x.width });
            }
            out
        } else {
            let geo = Padded { batch: x.batch, h: x.height, w: x.width };
            let len = geo.len();
            let (p0, p1) = geo.span();
            let xpad = geo.pad(&x.data, cin);
            let mut opad = vec![T::zero(); cout * len];
            for tap in 0..9 {
                let src = (p0 as isize + geo.shift(tap)) as usize;
                gemm_into(
                    T::one(),
                    self.tap_weights(tap),
                    Mat::strided(&xpad[src..], cin, p1 - p0, len),
                    if tap == 0 { T::zero() } else { T::one() },
                    &mut opad[p0..],
                    len,
                );
            }
            let out = FeatureMap::from_vec(cout, x.batch, x.height, x.width, geo.unpad(&opad, cout));
            if mode.records() {
                self.input = Some(Cached { data: xpad, batch: x.batch, height: x.height, width: x.width });
            }
            out
        };
        if let Some(b) = &self.bias {
            for (c, &bv) in b.value.iter().enumerate() {
                out.channel_mut(c).iter_mut().for_each(|v| *v += bv);
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, grad_out: &FeatureMap<T>, need_input_grad: bool) -> Option<FeatureMap<T>> {
        let x = self.input.as_ref().expect("conv backward without a recorded forward");
        let (batch, height, width) = (x.batch, x.height, x.width);
        let nhw = batch * height * width;
        let (cin, cout) = (self.in_channels, self.out_channels);
        assert_eq!(grad_out.data.len(), cout * nhw, "conv gradient shape mismatch");
        if let Some(b) = &mut self.bias {
            for c in 0..cout {
                b.grad[c] += fast_sum(grad_out.channel(c));
            }
        }
        if self.kernel == 1 {
            // few output channels here, so plain dot products beat a GEMM
            // that would have to gather both operands
            for co in 0..cout {
                let g = grad_out.channel(co);
                for ci in 0..cin {
                    self.weight.grad[co * cin + ci] += fast_dot(g, &x.data[ci * nhw..(ci + 1) * nhw]);
                }
            }
            return need_input_grad.then(|| {
                let mut dx = FeatureMap::zeros(cin, batch, height, width);
                gemm(
                    T::one(),
                    Mat::new(&self.weight.value, cout, cin).t(),
                    Mat::new(&grad_out.data, cout, nhw),
                    T::zero(),
                    &mut dx.data,
                );
                dx
            });
        }
        let geo = Padded { batch, h: height, w: width };
        let len = geo.len();
        let (p0, p1) = geo.span();
        let n = p1 - p0;
        // Padding positions of the upstream gradient must be zero so that
        // shifted products only carry contributions from real outputs.
        let gpad = geo.pad(&grad_out.data, cout);
        let dout = Mat::strided(&gpad[p0..], cout, n, len);
        // The weight gradient contracts over pixels. Pixel-major copies let
        // the GEMM pack both operands from contiguous memory.
        let g_t = transpose(&gpad, cout, len);
        let x_t = transpose(&x.data, cin, len);
        for tap in 0..9 {
            let src = (p0 as isize + geo.shift(tap)) as usize;
            gemm_general(
                T::one(),
                Mat::general(&g_t[p0 * cout..], cout, n, 1, cout),
                Mat::new(&x_t[src * cin..(src + n) * cin], n, cin),
                T::one(),
                &mut self.weight.grad[tap..],
                cin * 9,
                9,
            );
        }
        need_input_grad.then(|| {
            let mut dpad = vec![T::zero(); cin * len];
            for tap in 0..9 {
                let dst = (p0 as isize + geo.shift(tap)) as usize;
                gemm_into(T::one(), self.tap_weights(tap).t(), dout, T::one(), &mut dpad[dst..], len);
            }
            FeatureMap::from_vec(cin, batch, height, width, geo.unpad(&dpad, cin))
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = vec![&self.weight];
        if let Some(b) = &self.bias {
            v.push(b);
        }
        v
    }
}

fn centered_sq_sum<T: Scalar>(values: &[T], mean: T) -> T {
    let mut acc = [T::zero(); 16];
    let chunks = values.chunks_exact(16);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..16 {
            let d = c[i] - mean;
            acc[i] += d * d;
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>()
}

/// Per-channel batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    cached_mode: Option<Mode>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], T::one()),
            beta: Param::filled(format!("{name}.beta"), vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64_lossy(0.1),
            eps: T::from_f64_lossy(1e-5),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            cached_mode: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, mut x: FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        let channels = self.channels();
        assert_eq!(x.channels, channels, "batch norm channel mismatch");
        let m = x.channel_len();
        let mf = T::from_usize(m).unwrap();
        let mut inv_stds = Vec::with_capacity(channels);
        for c in 0..channels {
            let data = x.channel_mut(c);
            let (mean, inv_std) = if mode.uses_batch_stats() {
                let mean = fast_sum(data) / mf;
                let var = centered_sq_sum(data, mean) / mf;
                let unbiased = if m > 1 { var * mf / (mf - T::one()) } else { var };
                let mom = self.momentum;
                self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean;
                self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
                (mean, T::one() / (var + self.eps).sqrt())
            } else {
                (self.running_mean[c], T::one() / (self.running_var[c] + self.eps).sqrt())
            };
            inv_stds.push(inv_std);
            for v in data.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        if mode.records() {
            self.xhat.clear();
            self.xhat.extend_from_slice(&x.data);
            self.inv_std = inv_stds;
            self.cached_mode = Some(mode);
        }
        for c in 0..channels {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            x.channel_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
        }
        x
    }

    pub fn backward(&mut self, mut grad: FeatureMap<T>) -> FeatureMap<T> {
        let channels = self.channels();
        assert!(self.cached_mode.is_some(), "batch norm backward without a recorded forward");
        let m = grad.channel_len();
        let mf = T::from_usize(m).unwrap();
        for c in 0..channels {
            let xhat = &self.xhat[c * m..(c + 1) * m];
            let dy = grad.channel_mut(c);
            let sum_dy = fast_sum(dy);
            let sum_dy_xhat = fast_dot(dy, xhat);
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let gamma = self.gamma.value[c];
            let inv_std = self.inv_std[c];
            let scale = gamma * inv_std / mf;
            for (g, &xh) in dy.iter_mut().zip(xhat) {
                *g = scale * (mf * *g - sum_dy - xh * sum_dy_xhat);
            }
        }
        grad
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }
}

/// Leaky ReLU applied in place.
#[derive(Clone, Debug)]
pub struct LeakyRelu<T> {
    pub slope: T,
    positive: Vec<bool>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self { slope: T::from_f64_lossy(slope), positive: Vec::new() }
    }

    pub fn forward(&mut self, mut x: FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        if mode.records() {
            self.positive.clear();
            self.positive.extend(x.data.iter().map(|&v| v > T::zero()));
        }
        let s = self.slope;
        x.data.iter_mut().for_each(|v| *v = if *v > T::zero() { *v } else { *v * s });
        x
    }

    pub fn backward(&mut self, mut grad: FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(self.positive.len(), grad.data.len(), "leaky relu backward without a recorded forward");
        let s = self.slope;
        grad.data.iter_mut().zip(&self.positive).for_each(|(g, &p)| *g = if p { *g } else { *g * s });
        grad
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub rate: f64,
    mask: Vec<T>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        Self { rate, mask: Vec::new() }
    }

    pub fn forward<R: RngCore + ?Sized>(&mut self, mut x: FeatureMap<T>, mode: Mode, rng: Option<&mut R>) -> FeatureMap<T> {
        let active = mode.dropout_active() && self.rate > 0.0;
        if !active {
            if mode.records() {
                self.mask = vec![T::one(); x.data.len()];
            }
            return x;
        }
        let rng = rng.expect("active dropout needs a random stream");
        let keep = T::from_f64_lossy(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let mask: Vec<T> = (0..x.data.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        x.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        if mode.records() {
            self.mask = mask;
        }
        x
    }

    pub fn backward(&mut self, mut grad: FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(self.mask.len(), grad.data.len(), "dropout backward without a recorded forward");
        grad.data.iter_mut().zip(&self.mask).for_each(|(g, &m)| *g = *g * m);
        grad
    }
}

/// 2x2 max pooling with stride 2.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Vec<u32>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        assert!(x.height % 2 == 0 && x.width % 2 == 0, "max pool needs even spatial size");
        let (oh, ow) = (x.height / 2, x.width / 2);
        let mut out = FeatureMap::zeros(x.channels, x.batch, oh, ow);
        let record = mode.records();
        if record {
            self.argmax.clear();
            self.argmax.reserve(out.data.len());
            self.in_shape = (x.channels, x.batch, x.height, x.width);
        }
        let w = x.width;
        let planes = x.channels * x.batch;
        let mut o = 0;
        for p in 0..planes {
            let base = p * x.plane();
            for y in 0..oh {
                for xx in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xx;
                    let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                    let mut best = cands[0];
                    for &c in &cands[1..] {
                        if x.data[c] > x.data[best] {
                            best = c;
                        }
                    }
                    out.data[o] = x.data[best];
                    if record {
                        self.argmax.push(best as u32);
                    }
                    o += 1;
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(self.argmax.len(), grad.data.len(), "max pool backward without a recorded forward");
        let (c, n, h, w) = self.in_shape;
        let mut out = FeatureMap::zeros(c, n, h, w);
        for (&idx, &g) in self.argmax.iter().zip(&grad.data) {
            out.data[idx as usize] += g;
        }
        out
    }
}

/// 2x2 transposed convolution with stride 2 (learned upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose2<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Stored `in_channels x (out_channels * 4)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Vec<T>,
    in_shape: (usize, usize, usize),
}

impl<T: Scalar> ConvTranspose2<T> {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, rng: &mut dyn RngCore) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            vec![in_channels, out_channels, 2, 2],
            kaiming_uniform(rng, in_channels * out_channels * 4, in_channels, 0.0),
        );
        let bias = Param::filled(format!("{name}.bias"), vec![out_channels], T::zero());
        Self { in_channels, out_channels, weight, bias, input: Vec::new(), in_shape: (0, 0, 0) }
    }

    pub fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channel mismatch");
        let nhw = x.channel_len();
        let rows = self.out_channels * 4;
        let mut tmp = vec![T::zero(); rows * nhw];
        gemm(
            T::one(),
            Mat::new(&self.weight.value, self.in_channels, rows).t(),
            Mat::new(&x.data, self.in_channels, nhw),
            T::zero(),
            &mut tmp,
        );
        let (h, w) = (x.height, x.width);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = FeatureMap::zeros(self.out_channels, x.batch, oh, ow);
        for co in 0..self.out_channels {
            let b = self.bias.value[co];
            for n in 0..x.batch {
                let obase = (co * x.batch + n) * oh * ow;
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let src = &tmp[(co * 4 + d) * nhw + n * h * w..][..h * w];
                    for y in 0..h {
                        let orow = obase + (2 * y + dy) * ow + dx;
                        for xx in 0..w {
                            out.data[orow + 2 * xx] = src[y * w + xx] + b;
                        }
                    }
                }
            }
        }
        if mode.records() {
            self.input = x.data.clone();
            self.in_shape = (x.batch, h, w);
        }
        out
    }

    pub fn backward(&mut self, grad: &FeatureMap<T>) -> FeatureMap<T> {
        let (batch, h, w) = self.in_shape;
        assert!(!self.input.is_empty(), "transposed conv backward without a recorded forward");
        let nhw = batch * h * w;
        let rows = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dtmp = vec![T::zero(); rows * nhw];
        for co in 0..self.out_channels {
            let mut bsum = T::zero();
            for n in 0..batch {
                let obase = (co * batch + n) * oh * ow;
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let dst = &mut dtmp[(co * 4 + d) * nhw + n * h * w..][..h * w];
                    for y in 0..h {
                        let orow = obase + (2 * y + dy) * ow + dx;
                        for xx in 0..w {
                            let g = grad.data[orow + 2 * xx];
                            dst[y * w + xx] = g;
                            bsum += g;
                        }
                    }
                }
            }
            self.bias.grad[co] += bsum;
        }
        let in_t = transpose(&self.input, self.in_channels, nhw);
        let d_t = transpose(&dtmp, rows, nhw);
        gemm(
            T::one(),
            Mat::general(&in_t, self.in_channels, nhw, 1, self.in_channels),
            Mat::new(&d_t, nhw, rows),
            T::one(),
            &mut self.weight.grad,
        );
        let mut dx = FeatureMap::zeros(self.in_channels, batch, h, w);
        gemm(
            T::one(),
            Mat::new(&self.weight.value, self.in_channels, rows),
            Mat::new(&dtmp, rows, nhw),
            T::zero(),
            &mut dx.data,
        );
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}

/// Fully connected layer on `features x batch` column matrices.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Vec<T>,
    batch: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut dyn RngCore) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_features, in_features],
            kaiming_uniform(rng, in_features * out_features, in_features, 5f64.sqrt()),
        );
        let bound = 1.0 / (in_features as f64).sqrt();
        let bias = Param::new(
            format!("{name}.bias"),
            vec![out_features],
            (0..out_features).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect(),
        );
        Self { in_features, out_features, weight, bias, input: Vec::new(), batch: 0 }
    }

    /// `x` is `in_features x batch`; returns `out_features x batch`.
    pub fn forward(&mut self, x: &[T], batch: usize, record: bool) -> Vec<T> {
        assert_eq!(x.len(), self.in_features * batch, "linear input size mismatch");
        let mut out = vec![T::zero(); self.out_features * batch];
        gemm(
            T::one(),
            Mat::new(&self.weight.value, self.out_features, self.in_features),
            Mat::new(x, self.in_features, batch),
            T::zero(),
            &mut out,
        );
        for (o, row) in out.chunks_mut(batch).enumerate() {
            let b = self.bias.value[o];
            row.iter_mut().for_each(|v| *v += b);
        }
        if record {
            self.input = x.to_vec();
            self.batch = batch;
        }
        out
    }

    pub fn backward(&mut self, grad: &[T]) -> Vec<T> {
        let batch = self.batch;
        assert_eq!(grad.len(), self.out_features * batch, "linear backward without a recorded forward");
        gemm(
            T::one(),
            Mat::new(grad, self.out_features, batch),
            Mat::new(&self.input, self.in_features, batch).t(),
            T::one(),
            &mut self.weight.grad,
        );
        for (o, row) in grad.chunks(batch).enumerate() {
            self.bias.grad[o] += row.iter().copied().sum::<T>();
        }
        let mut dx = vec![T::zero(); self.in_features * batch];
        gemm(
            T::one(),
            Mat::new(&self.weight.value, self.out_features, self.in_features).t(),
            Mat::new(grad, self.out_features, batch),
            T::zero(),
            &mut dx,
        );
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }
}
