//! UNet segmentation network.
//!
//! Encoder stages are double 3x3 conv blocks (conv, batch norm, leaky ReLU,
//! twice) followed by 2x2 max pooling. The decoder mirrors them with learned
//! 2x2 transposed convolutions and skip concatenation, and a 1x1 head maps the
//! top decoder stage to class logits.
//!
//! Dropout is applied to the bottleneck output and to the output of every
//! decoder stage except the last one, so Monte Carlo dropout perturbs all
//! scales but the full-resolution features.
//!
//! Feature taps are the decoder stage outputs, deepest first, each global
//! average pooled to a `channels x batch` matrix. The latent vector used for
//! core-set selection is the pooled bottleneck.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ModelError;
use crate::layers::{BatchNorm2d, Conv2d, ConvTranspose2, Dropout, LeakyRelu, MaxPool2, Mode};
use crate::loss::softmax_channels;
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Param};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegModelConfig {
    /// Number of pooling stages (and of decoder stages).
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub class_count: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            in_channels: 1,
            class_count: 2,
            dropout_rate: 0.5,
            negative_slope: 0.01,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 1 {
            return Err(ModelError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(ModelError::InvalidConfig("channel counts must be >= 1".into()));
        }
        if self.class_count < 2 {
            return Err(ModelError::InvalidConfig("class_count must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.negative_slope >= 0.0) {
            return Err(ModelError::InvalidConfig("negative_slope must be >= 0".into()));
        }
        Ok(())
    }

    /// Channel width at pyramid level `level` (0 = full resolution, `depth` = bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count of each feature tap, in tap order (deepest decoder stage first).
    pub fn tap_channels(&self) -> Vec<usize> {
        (0..self.depth).rev().map(|l| self.channels_at(l)).collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.channels_at(self.depth)
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Clone, Debug)]
struct ConvBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    act1: LeakyRelu<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    act2: LeakyRelu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, slope: f64, rng: &mut dyn RngCore) -> Self {
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, false, slope, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            act1: LeakyRelu::new(slope),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, false, slope, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            act2: LeakyRelu::new(slope),
        }
    }

    fn forward(&mut self, x: &FeatureMap<T>, mode: Mode) -> FeatureMap<T> {
        let h = self.conv1.forward(x, mode);
        let h = self.act1.forward(self.bn1.forward(h, mode), mode);
        let h = self.conv2.forward(&h, mode);
        self.act2.forward(self.bn2.forward(h, mode), mode)
    }

    fn backward(&mut self, grad: FeatureMap<T>, need_input_grad: bool) -> Option<FeatureMap<T>> {
        let g = self.bn2.backward(self.act2.backward(grad));
        let g = self.conv2.backward(&g, true).expect("input grad requested");
        let g = self.bn1.backward(self.act1.backward(g));
        self.conv1.backward(&g, need_input_grad)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v
    }

    fn norms(&self) -> [&BatchNorm2d<T>; 2] {
        [&self.bn1, &self.bn2]
    }

    fn norms_mut(&mut self) -> [&mut BatchNorm2d<T>; 2] {
        [&mut self.bn1, &mut self.bn2]
    }
}

/// Result of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `C x N x H x W`.
    pub logits: FeatureMap<T>,
    /// Softmax of `logits` over classes.
    pub probabilities: FeatureMap<T>,
    /// One `channels x N` matrix per decoder stage, deepest first.
    pub taps: Vec<Vec<T>>,
    /// Pooled bottleneck, `latent_dim x N`.
    pub latent: Vec<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Probability map of image `n` as `C` planes of `H * W` values.
    pub fn image_probabilities(&self, n: usize) -> Vec<Vec<T>> {
        (0..self.probabilities.channels)
            .map(|c| self.probabilities.plane_at(c, n).to_vec())
            .collect()
    }

    /// Column `n` of the pooled tap matrices.
    pub fn image_taps(&self, n: usize) -> Vec<Vec<T>> {
        let batch = self.logits.batch;
        self.taps
            .iter()
            .map(|m| m.iter().skip(n).step_by(batch).copied().collect())
            .collect()
    }

    pub fn image_latent(&self, n: usize) -> Vec<T> {
        self.latent.iter().skip(n).step_by(self.logits.batch).copied().collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    config: SegModelConfig,
    encoders: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool2>,
    bottleneck: ConvBlock<T>,
    bottleneck_dropout: Dropout<T>,
    ups: Vec<ConvTranspose2<T>>,
    decoders: Vec<ConvBlock<T>>,
    decoder_dropouts: Vec<Dropout<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: SegModelConfig, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        let slope = config.negative_slope;
        let depth = config.depth;
        let mut encoders = Vec::with_capacity(depth);
        for l in 0..depth {
            let cin = if l == 0 { config.in_channels } else { config.channels_at(l - 1) };
            encoders.push(ConvBlock::new(&format!("enc{l}"), cin, config.channels_at(l), slope, rng));
        }
        let bottleneck = ConvBlock::new(
            "bottleneck",
            config.channels_at(depth - 1),
            config.channels_at(depth),
            slope,
            rng,
        );
        let mut ups = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth);
        for l in 0..depth {
            let c = config.channels_at(l);
            ups.push(ConvTranspose2::new(&format!("up{l}"), config.channels_at(l + 1), c, rng));
            decoders.push(ConvBlock::new(&format!("dec{l}"), 2 * c, c, slope, rng));
        }
        let head = Conv2d::new("head", config.base_channels, config.class_count, 1, true, 1.0, rng);
        Ok(Self {
            encoders,
            pools: vec![MaxPool2::default(); depth],
            bottleneck,
            bottleneck_dropout: Dropout::new(config.dropout_rate),
            ups,
            decoders,
            decoder_dropouts: (0..depth).map(|_| Dropout::new(config.dropout_rate)).collect(),
            head,
            config,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn check_input(&self, images: &FeatureMap<T>) -> Result<(), ModelError> {
        let m = self.config.size_multiple();
        if images.batch == 0 {
            return Err(ModelError::Shape("empty batch".into()));
        }
        if images.channels != self.config.in_channels {
            return Err(ModelError::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels, images.channels
            )));
        }
        if images.height == 0 || images.width == 0 || images.height % m != 0 || images.width % m != 0 {
            return Err(ModelError::Shape(format!(
                "spatial size {}x{} must be a positive multiple of {m}",
                images.height, images.width
            )));
        }
        Ok(())
    }

    /// Batched forward pass. `rng` drives dropout and is required whenever
    /// `mode` activates dropout with a non-zero rate.
    pub fn forward(
        &mut self,
        images: &FeatureMap<T>,
        mode: Mode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput<T>, ModelError> {
        self.check_input(images)?;
        if mode.dropout_active() && self.config.dropout_rate > 0.0 && rng.is_none() {
            return Err(ModelError::MissingRng);
        }
        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut x = images.clone();
        for l in 0..depth {
            let s = self.encoders[l].forward(&x, mode);
            x = self.pools[l].forward(&s, mode);
            skips.push(s);
        }
        let b = self.bottleneck.forward(&x, mode);
        let latent = b.global_avg_pool();
        let mut x = self.bottleneck_dropout.forward(b, mode, rng.as_deref_mut());
        let mut taps = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let up = self.ups[l].forward(&x, mode);
            let cat = skips[l].concat_channels(&up);
            let mut d = self.decoders[l].forward(&cat, mode);
            if l > 0 {
                d = self.decoder_dropouts[l].forward(d, mode, rng.as_deref_mut());
            }
            taps.push(d.global_avg_pool());
            x = d;
        }
        let logits = self.head.forward(&x, mode);
        let probabilities = softmax_channels(&logits);
        Ok(ForwardOutput { logits, probabilities, taps, latent })
    }

    /// Backpropagates from the logits (and optionally from the pooled taps)
    /// of the last `Mode::Train` forward pass, accumulating parameter gradients.
    pub fn backward(&mut self, d_logits: &FeatureMap<T>, d_taps: Option<&[Vec<T>]>) {
        let depth = self.config.depth;
        if let Some(dt) = d_taps {
            assert_eq!(dt.len(), depth, "one tap gradient per decoder stage");
        }
        let mut d = self.head.backward(d_logits, true).expect("input grad requested");
        let mut d_skips: Vec<Option<FeatureMap<T>>> = vec![None; depth];
        for l in 0..depth {
            if let Some(dt) = d_taps {
                // taps are ordered deepest first
                d.add_global_avg_pool_grad(&dt[depth - 1 - l]);
            }
            if l > 0 {
                d = self.decoder_dropouts[l].backward(d);
            }
            let dcat = self.decoders[l].backward(d, true).expect("input grad requested");
            let (d_skip, d_up) = dcat.split_channels(self.config.channels_at(l));
            d_skips[l] = Some(d_skip);
            d = self.ups[l].backward(&d_up);
        }
        d = self.bottleneck_dropout.backward(d);
        let mut d = self.bottleneck.backward(d, true).expect("input grad requested");
        for l in (0..depth).rev() {
            let mut g = self.pools[l].backward(&d);
            g.add_assign(d_skips[l].as_ref().expect("skip gradient"));
            match self.encoders[l].backward(g, l > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for e in &self.encoders {
            v.extend(e.params());
        }
        v.extend(self.bottleneck.params());
        for (u, d) in self.ups.iter().zip(&self.decoders) {
            v.extend(u.params());
            v.extend(d.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.params_mut());
        }
        v.extend(self.bottleneck.params_mut());
        for (u, d) in self.ups.iter_mut().zip(self.decoders.iter_mut()) {
            v.extend(u.params_mut());
            v.extend(d.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    fn norms(&self) -> Vec<&BatchNorm2d<T>> {
        let mut v: Vec<&BatchNorm2d<T>> = Vec::new();
        for e in &self.encoders {
            v.extend(e.norms());
        }
        v.extend(self.bottleneck.norms());
        for d in &self.decoders {
            v.extend(d.norms());
        }
        v
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v: Vec<&mut BatchNorm2d<T>> = Vec::new();
        for e in &mut self.encoders {
            v.extend(e.norms_mut());
        }
        v.extend(self.bottleneck.norms_mut());
        for d in &mut self.decoders {
            v.extend(d.norms_mut());
        }
        v
    }

    /// Every named tensor needed to restore the model: parameters followed by
    /// batch norm running statistics.
    pub fn state(&self) -> Vec<(String, Vec<T>)> {
        let mut out: Vec<(String, Vec<T>)> =
            self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (i, bn) in self.norms().into_iter().enumerate() {
            out.push((format!("norm{i}.running_mean"), bn.running_mean.clone()));
            out.push((format!("norm{i}.running_var"), bn.running_var.clone()));
        }
        out
    }

    pub fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<(), ModelError> {
        let expected: Vec<(String, usize)> = self.state().into_iter().map(|(n, v)| (n, v.len())).collect();
        if expected.len() != state.len() {
            return Err(ModelError::State(format!(
                "expected {} tensors, found {}",
                expected.len(),
                state.len()
            )));
        }
        for ((name, len), (got_name, values)) in expected.iter().zip(state) {
            if name != got_name || *len != values.len() {
                return Err(ModelError::State(format!("tensor {got_name} does not match {name}[{len}]")));
            }
        }
        let n_params = self.params().len();
        for (p, (_, values)) in self.params_mut().into_iter().zip(state) {
            p.value.copy_from_slice(values);
        }
        let mut rest = state[n_params..].iter();
        for bn in self.norms_mut() {
            bn.running_mean.copy_from_slice(&rest.next().expect("length checked").1);
            bn.running_var.copy_from_slice(&rest.next().expect("length checked").1);
        }
        Ok(())
    }

    /// SHA-256 over the config and every state tensor.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.digest().as_bytes());
        for (name, values) in self.state() {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> SegModelConfig {
        SegModelConfig { depth: 2, base_channels: 4, class_count: 3, ..SegModelConfig::default() }
    }

    fn images(rng: &mut ChaCha8Rng, n: usize, size: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(1, n, size, size, (0..n * size * size).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        // Hand count for depth 4, base 16, one input channel, two classes:
        // encoders 293_712, bottleneck 885_760, upsamplers 174_320,
        // decoders 588_480, head 34.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::<f32>::new(SegModelConfig::default(), &mut rng).unwrap();
        assert_eq!(net.parameter_count(), 1_942_306);
    }

    #[test]
    fn probabilities_sum_to_one_and_outputs_have_expected_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = UNet::<f64>::new(toy(), &mut rng).unwrap();
        let x = images(&mut rng, 2, 8);
        let out = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(out.logits.channels, 3);
        assert_eq!(out.taps.len(), 2);
        assert_eq!(out.taps[0].len(), 8 * 2);
        assert_eq!(out.taps[1].len(), 4 * 2);
        assert_eq!(out.latent.len(), 16 * 2);
        let p = out.probabilities.channel_len();
        for i in 0..p {
            let s: f64 = (0..3).map(|c| out.probabilities.channel(c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = UNet::<f64>::new(toy(), &mut rng).unwrap();
        let x = images(&mut rng, 1, 6);
        assert!(matches!(net.forward(&x, Mode::Eval, None), Err(ModelError::Shape(_))));
        let two = FeatureMap::<f64>::zeros(2, 1, 8, 8);
        assert!(matches!(net.forward(&two, Mode::Eval, None), Err(ModelError::Shape(_))));
    }

    #[test]
    fn deterministic_mode_is_repeatable_and_dropout_mode_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = UNet::<f32>::new(toy(), &mut rng).unwrap();
        let x = FeatureMap::<f32>::from_vec(1, 1, 8, 8, (0..64).map(|_| rng.gen::<f32>()).collect());
        let a = net.forward(&x, Mode::Eval, None).unwrap();
        let b = net.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(a.logits, b.logits);
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let c = net.forward(&x, Mode::McDropout, Some(&mut r1)).unwrap();
        let d = net.forward(&x, Mode::McDropout, Some(&mut r2)).unwrap();
        assert!(c.logits.data.iter().zip(&d.logits.data).any(|(u, v)| u != v));
        assert!(matches!(net.forward(&x, Mode::McDropout, None), Err(ModelError::MissingRng)));
    }

    #[test]
    fn state_round_trips_through_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = UNet::<f32>::new(toy(), &mut rng).unwrap();
        let mut b = UNet::<f32>::new(toy(), &mut rng).unwrap();
        assert_ne!(a.digest(), b.digest());
        b.load_state(&a.state()).unwrap();
        assert_eq!(a.digest(), b.digest());
    }
}
