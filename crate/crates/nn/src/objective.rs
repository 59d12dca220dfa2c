//! The joint training objective: pixel-wise cross entropy, plus
//! `loss_weight * ranking_loss` when a loss predictor is trained alongside.

use rand::RngCore;

use crate::error::ModelError;
use crate::layers::Mode;
use crate::loss::{ranking_loss, softmax_cross_entropy};
use crate::loss_predictor::LossPredictor;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;
use crate::unet::UNet;

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub cross_entropy: f64,
    pub ranking: Option<f64>,
    pub per_image_cross_entropy: Vec<f64>,
}

/// One training-mode forward pass over a batch. With `compute_grads`, the
/// backward pass runs too and gradients are *accumulated* into both networks.
///
/// The per-image cross entropy serves as the (constant) ranking target. When
/// `detach_taps` is set the ranking loss still trains the predictor but no
/// gradient flows from it into the segmentation network.
#[allow(clippy::too_many_arguments)]
pub fn joint_objective<T: Scalar>(
    model: &mut UNet<T>,
    predictor: Option<&mut LossPredictor<T>>,
    images: &FeatureMap<T>,
    targets: &[u8],
    detach_taps: bool,
    rng: Option<&mut dyn RngCore>,
    compute_grads: bool,
) -> Result<ObjectiveValue, ModelError> {
    let out = model.forward(images, Mode::Train, rng)?;
    let ce = softmax_cross_entropy(&out.logits, targets)?;
    let per_image_cross_entropy: Vec<f64> = ce.per_image.iter().map(|v| v.to_f64_lossy()).collect();
    let cross_entropy = ce.mean.to_f64_lossy();
    let Some(predictor) = predictor else {
        if compute_grads {
            model.backward(&ce.grad, None);
        }
        return Ok(ObjectiveValue { total: cross_entropy, cross_entropy, ranking: None, per_image_cross_entropy });
    };
    let batch = images.batch;
    let predicted = predictor.forward(&out.taps, batch, compute_grads)?;
    let weight = predictor.config().loss_weight;
    let margin = T::from_f64_lossy(predictor.config().margin);
    let rank = ranking_loss(&predicted, &ce.per_image, margin);
    let ranking = rank.value.to_f64_lossy();
    if compute_grads {
        let w = T::from_f64_lossy(weight);
        let d_pred: Vec<T> = rank.grad.iter().map(|&g| g * w).collect();
        let d_taps = predictor.backward(&d_pred);
        model.backward(&ce.grad, (!detach_taps).then_some(d_taps.as_slice()));
    }
    Ok(ObjectiveValue {
        total: cross_entropy + weight * ranking,
        cross_entropy,
        ranking: Some(ranking),
        per_image_cross_entropy,
    })
}
