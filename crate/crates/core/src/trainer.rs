//! From-scratch training under a fixed step budget: Adam, linear warmup then
//! cosine decay, rotation and noise augmentation, final-step weights.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbal_nn::{joint_objective, Adam, AdamConfig, FeatureMap, LossPredictor, LossPredictorConfig, SegModelConfig, UNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{augment, AugmentConfig};
use crate::data::SliceSample;
use crate::error::{CoreError, Result};
use crate::stats::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_factor: f64,
    pub aug_rotation_deg: (f64, f64),
    pub aug_noise_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 75,
            iters_per_epoch: 250,
            batch_size: 4,
            lr_init: 1e-6,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            warmup_factor: 200.0,
            aug_rotation_deg: (-10.0, 10.0),
            aug_noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(format!("train: {m}")));
        if self.epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 {
            return fail("epochs, iters_per_epoch and batch_size must be >= 1");
        }
        if !(self.lr_init > 0.0) || !(self.warmup_factor > 0.0) {
            return fail("lr_init and warmup_factor must be > 0");
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs may not exceed epochs");
        }
        if !(self.weight_decay >= 0.0) || !(self.aug_noise_sigma >= 0.0) {
            return fail("weight_decay and aug_noise_sigma must be >= 0");
        }
        if !(self.aug_rotation_deg.0 <= self.aug_rotation_deg.1) {
            return fail("aug_rotation_deg must be an interval (lo <= hi)");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.iters_per_epoch
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.iters_per_epoch
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig { rotation_deg: self.aug_rotation_deg, noise_sigma: self.aug_noise_sigma }
    }
}

/// Learning rate at optimizer step `step` (0-based): a linear ramp from
/// `lr_init` to `warmup_factor * lr_init` over the warmup steps, then cosine
/// decay reaching zero at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_steps();
    if step >= total {
        return Err(CoreError::Invalid(format!("step {step} outside 0..{total}")));
    }
    let warm = cfg.warmup_steps();
    let peak = cfg.lr_init * cfg.warmup_factor;
    if step < warm {
        return Ok(cfg.lr_init + (peak - cfg.lr_init) * step as f64 / warm as f64);
    }
    let span = total - 1 - warm;
    if span == 0 {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / span as f64;
    Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch cross entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean batch ranking loss per epoch, when a loss predictor is trained.
    pub epoch_ranking_loss: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
    pub steps: usize,
    pub wall_time_s: f64,
}

impl TrainHistory {
    /// Hash of the deterministic content (losses, schedule, step count).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.epoch_loss.iter().chain(&self.epoch_ranking_loss).chain(&self.lr_trace) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((self.steps as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub struct Trained {
    pub model: UNet<f32>,
    pub predictor: Option<LossPredictor<f32>>,
    pub history: TrainHistory,
}

/// Packs slices into a `1 x N x H x W` batch.
pub fn images_batch(samples: &[&SliceSample]) -> Result<FeatureMap<f32>> {
    let (h, w) = samples.first().ok_or_else(|| CoreError::Invalid("empty batch".into()))?.shape();
    let mut data = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.shape() != (h, w) {
            return Err(CoreError::Invalid(format!("{} has shape {:?}, expected {:?}", s.id(), s.shape(), (h, w))));
        }
        data.extend(s.image.iter().copied());
    }
    Ok(FeatureMap::from_vec(1, samples.len(), h, w, data))
}

fn targets_batch(samples: &[SliceSample]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.mask.iter().copied()).collect()
}

/// Fresh model (and loss predictor) initialized from `seed`.
pub fn init_networks(
    model_cfg: &SegModelConfig,
    loss_module: Option<&LossPredictorConfig>,
    seed: u64,
) -> Result<(UNet<f32>, Option<LossPredictor<f32>>)> {
    let mut init = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init"));
    let model = UNet::new(model_cfg.clone(), &mut init)?;
    let predictor = match loss_module {
        Some(lp) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "lossnet-init"));
            Some(LossPredictor::new(lp.clone(), &model_cfg.tap_channels(), &mut rng)?)
        }
        None => None,
    };
    Ok((model, predictor))
}

/// Trains a freshly initialized model for exactly `epochs * iters_per_epoch`
/// optimizer steps. Every batch draws `batch_size` samples uniformly with
/// replacement from `labelled`, so tiny labelled sets repeat within batches.
/// With `loss_module`, the loss predictor is trained jointly and the
/// objective becomes `CE + loss_weight * ranking`.
pub fn train(
    model_cfg: &SegModelConfig,
    labelled: &[&SliceSample],
    cfg: &TrainConfig,
    loss_module: Option<&LossPredictorConfig>,
) -> Result<Trained> {
    cfg.validate()?;
    if labelled.is_empty() {
        return Err(CoreError::Invalid("cannot train on an empty labelled set".into()));
    }
    let start = Instant::now();
    let (mut model, mut predictor) = init_networks(model_cfg, loss_module, cfg.seed)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut opt = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let aug = cfg.augment_config();
    let mut history = TrainHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let detach = predictor.as_ref().is_some_and(|p| p.config().detached_at(epoch));
        let (mut ce_sum, mut rank_sum) = (0.0, 0.0);
        for _ in 0..cfg.iters_per_epoch {
            let batch: Vec<SliceSample> = (0..cfg.batch_size)
                .map(|_| augment(labelled[sampler.gen_range(0..labelled.len())], &aug, &mut aug_rng))
                .collect();
            let refs: Vec<&SliceSample> = batch.iter().collect();
            let images = images_batch(&refs)?;
            let targets = targets_batch(&batch);
            model.zero_grad();
            if let Some(p) = predictor.as_mut() {
                p.zero_grad();
            }
            let value = joint_objective(
                &mut model,
                predictor.as_mut(),
                &images,
                &targets,
                detach,
                Some(&mut dropout_rng as &mut dyn RngCore),
                true,
            )?;
            if !(value.cross_entropy.is_finite() && value.cross_entropy >= 0.0) || !value.total.is_finite() {
                return Err(CoreError::Invalid(format!("training diverged at step {step}: loss {}", value.total)));
            }
            let lr = lr_at(step, cfg)?;
            let mut params = model.params_mut();
            if let Some(p) = predictor.as_mut() {
                params.extend(p.params_mut());
            }
            opt.step(params, lr);
            history.lr_trace.push(lr);
            ce_sum += value.cross_entropy;
            rank_sum += value.ranking.unwrap_or(0.0);
            step += 1;
        }
        history.epoch_loss.push(ce_sum / cfg.iters_per_epoch as f64);
        if predictor.is_some() {
            history.epoch_ranking_loss.push(rank_sum / cfg.iters_per_epoch as f64);
        }
        log::debug!("epoch {epoch}: ce {:.4}", ce_sum / cfg.iters_per_epoch as f64);
    }
    history.steps = opt.steps_taken() as usize;
    history.wall_time_s = start.elapsed().as_secs_f64();
    if let Some(p) = predictor.as_mut() {
        p.mark_trained();
    }
    Ok(Trained { model, predictor, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-6);
        assert!((lr_at(2500, &cfg).unwrap() - 2e-4).abs() < 1e-15);
        assert!(lr_at(18_749, &cfg).unwrap() < 1e-9);
        assert!(lr_at(18_750, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { warmup_epochs: 80, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { aug_rotation_deg: (3.0, -3.0), ..Default::default() }.validate().is_err());
    }

    fn tiny_sample(i: usize) -> SliceSample {
        SliceSample {
            volume_id: "v".into(),
            slice_index: i,
            image: Array2::from_shape_fn((8, 8), |(y, x)| if (2..6).contains(&y) && (2..6).contains(&x) { 1.0 } else { 0.0 }),
            mask: Array2::from_shape_fn((8, 8), |(y, x)| u8::from((2..6).contains(&y) && (2..6).contains(&x))),
            spacing: [1.0; 3],
        }
    }

    #[test]
    fn single_sample_still_runs_every_step_and_is_reproducible() {
        let model_cfg = SegModelConfig { depth: 1, base_channels: 2, ..Default::default() };
        let cfg = TrainConfig { epochs: 3, iters_per_epoch: 7, warmup_epochs: 1, seed: 11, ..Default::default() };
        let s = tiny_sample(0);
        let a = train(&model_cfg, &[&s], &cfg, None).unwrap();
        let b = train(&model_cfg, &[&s], &cfg, None).unwrap();
        assert_eq!(a.history.steps, 21);
        assert_eq!(a.history.epoch_loss.len(), 3);
        assert_eq!(a.history.digest(), b.history.digest());
        assert_eq!(a.model.digest(), b.model.digest());
        for (i, lr) in a.history.lr_trace.iter().enumerate() {
            assert_eq!(*lr, lr_at(i, &cfg).unwrap());
        }
        assert!(train(&model_cfg, &[], &cfg, None).is_err());
    }

    #[test]
    fn loss_module_is_trained_jointly() {
        let model_cfg = SegModelConfig { depth: 1, base_channels: 2, ..Default::default() };
        let cfg = TrainConfig { epochs: 2, iters_per_epoch: 3, warmup_epochs: 1, ..Default::default() };
        let lp = LossPredictorConfig { tap_projection_dim: 4, detach_from_epoch: 1, ..Default::default() };
        let (s0, s1) = (tiny_sample(0), tiny_sample(1));
        let t = train(&model_cfg, &[&s0, &s1], &cfg, Some(&lp)).unwrap();
        assert!(t.predictor.unwrap().is_trained());
        assert_eq!(t.history.epoch_ranking_loss.len(), 2);
    }
}
