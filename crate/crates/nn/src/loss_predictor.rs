//! Loss-prediction head: each pooled decoder tap goes through its own
//! linear projection and ReLU, the projections are concatenated and a final
//! linear layer outputs one predicted loss per image.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::layers::Linear;
use crate::scalar::Scalar;
use crate::tensor::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossPredictorConfig {
    pub tap_projection_dim: usize,
    pub margin: f64,
    /// Weight of the ranking loss in the joint objective.
    pub loss_weight: f64,
    /// Stop the ranking-loss gradient from reaching the segmentation network
    /// once `detach_from_epoch` is reached.
    pub detach_features: bool,
    pub detach_from_epoch: usize,
}

impl Default for LossPredictorConfig {
    fn default() -> Self {
        Self { tap_projection_dim: 128, margin: 1.0, loss_weight: 1.0, detach_features: true, detach_from_epoch: 40 }
    }
}

impl LossPredictorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tap_projection_dim == 0 {
            return Err(ModelError::InvalidConfig("tap_projection_dim must be >= 1".into()));
        }
        if !(self.margin > 0.0) {
            return Err(ModelError::InvalidConfig("margin must be > 0".into()));
        }
        if !(self.loss_weight >= 0.0) {
            return Err(ModelError::InvalidConfig("loss_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether tap gradients are cut at `epoch` (0-based).
    pub fn detached_at(&self, epoch: usize) -> bool {
        self.detach_features && epoch >= self.detach_from_epoch
    }
}

#[derive(Clone, Debug)]
pub struct LossPredictor<T> {
    config: LossPredictorConfig,
    tap_channels: Vec<usize>,
    projections: Vec<Linear<T>>,
    output: Linear<T>,
    relu_masks: Vec<Vec<bool>>,
    trained: bool,
}

impl<T: Scalar> LossPredictor<T> {
    pub fn new(config: LossPredictorConfig, tap_channels: &[usize], rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        if tap_channels.is_empty() {
            return Err(ModelError::InvalidConfig("loss predictor needs at least one tap".into()));
        }
        let d = config.tap_projection_dim;
        let projections = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&format!("lossnet.tap{i}"), c, d, rng))
            .collect();
        let output = Linear::new("lossnet.out", d * tap_channels.len(), 1, rng);
        Ok(Self {
            config,
            tap_channels: tap_channels.to_vec(),
            projections,
            output,
            relu_masks: Vec::new(),
            trained: false,
        })
    }

    pub fn config(&self) -> &LossPredictorConfig {
        &self.config
    }

    /// Set once the predictor has been through joint training.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    fn check_taps(&self, taps: &[Vec<T>], batch: usize) -> Result<(), ModelError> {
        if taps.len() != self.tap_channels.len() {
            return Err(ModelError::TapMismatch(format!(
                "expected {} taps, got {}",
                self.tap_channels.len(),
                taps.len()
            )));
        }
        for (i, (t, &c)) in taps.iter().zip(&self.tap_channels).enumerate() {
            if t.len() != c * batch {
                return Err(ModelError::TapMismatch(format!(
                    "tap {i}: expected {c} x {batch} values, got {}",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    /// Predicted loss per image. `taps` are `channels x batch` matrices.
    pub fn forward(&mut self, taps: &[Vec<T>], batch: usize, record: bool) -> Result<Vec<T>, ModelError> {
        self.check_taps(taps, batch)?;
        let d = self.config.tap_projection_dim;
        let mut concat = Vec::with_capacity(d * taps.len() * batch);
        let mut masks = Vec::with_capacity(taps.len());
        for (proj, tap) in self.projections.iter_mut().zip(taps) {
            let mut h = proj.forward(tap, batch, record);
            let mask: Vec<bool> = h.iter().map(|&v| v > T::zero()).collect();
            h.iter_mut().zip(&mask).for_each(|(v, &m)| {
                if !m {
                    *v = T::zero();
                }
            });
            concat.extend_from_slice(&h);
            masks.push(mask);
        }
        if record {
            self.relu_masks = masks;
        }
        Ok(self.output.forward(&concat, batch, record))
    }

    /// Accumulates parameter gradients and returns the gradient for each tap.
    pub fn backward(&mut self, d_pred: &[T]) -> Vec<Vec<T>> {
        let batch = d_pred.len();
        let d = self.config.tap_projection_dim;
        let d_concat = self.output.backward(d_pred);
        let mut d_taps = Vec::with_capacity(self.projections.len());
        for (i, proj) in self.projections.iter_mut().enumerate() {
            let mut g = d_concat[i * d * batch..(i + 1) * d * batch].to_vec();
            g.iter_mut().zip(&self.relu_masks[i]).for_each(|(v, &m)| {
                if !m {
                    *v = T::zero();
                }
            });
            d_taps.push(proj.backward(&g));
        }
        d_taps
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for p in &self.projections {
            v.extend(p.params());
        }
        v.extend(self.output.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for p in &mut self.projections {
            v.extend(p.params_mut());
        }
        v.extend(self.output.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn state(&self) -> Vec<(String, Vec<T>)> {
        self.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn load_state(&mut self, state: &[(String, Vec<T>)]) -> Result<(), ModelError> {
        let params = self.params_mut();
        if params.len() != state.len() {
            return Err(ModelError::State("loss predictor tensor count differs".into()));
        }
        for (p, (name, values)) in params.into_iter().zip(state) {
            if &p.name != name || p.len() != values.len() {
                return Err(ModelError::State(format!("tensor {name} does not match {}", p.name)));
            }
            p.value.copy_from_slice(values);
        }
        Ok(())
    }
}
