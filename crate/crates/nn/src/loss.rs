//! Pixel-wise softmax cross entropy and the pairwise margin ranking loss
//! used to train the loss-prediction head.

use crate::error::ModelError;
use crate::scalar::Scalar;
use crate::tensor::FeatureMap;

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(logits: &FeatureMap<T>) -> FeatureMap<T> {
    let c = logits.channels;
    let m = logits.channel_len();
    let mut out = FeatureMap::zeros(c, logits.batch, logits.height, logits.width);
    for i in 0..m {
        let mut max = T::neg_infinity();
        for k in 0..c {
            max = max.max(logits.data[k * m + i]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (logits.data[k * m + i] - max).exp();
            out.data[k * m + i] = e;
            sum += e;
        }
        for k in 0..c {
            out.data[k * m + i] /= sum;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CrossEntropy<T> {
    /// Mean over every pixel of every image.
    pub mean: T,
    /// Mean over the pixels of each image.
    pub per_image: Vec<T>,
    /// Gradient of `mean` with respect to the logits.
    pub grad: FeatureMap<T>,
}

/// Cross entropy between `softmax(logits)` and integer targets laid out
/// `N x H x W`. No class weighting.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &FeatureMap<T>,
    targets: &[u8],
) -> Result<CrossEntropy<T>, ModelError> {
    let c = logits.channels;
    let m = logits.channel_len();
    if targets.len() != m {
        return Err(ModelError::Shape(format!("expected {m} target pixels, got {}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(ModelError::Shape(format!("target class {bad} out of range for {c} classes")));
    }
    let probs = softmax_channels(logits);
    let plane = logits.plane();
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let mut grad = probs;
    let mut per_image = vec![T::zero(); logits.batch];
    for i in 0..m {
        let t = targets[i] as usize;
        let p = grad.data[t * m + i];
        per_image[i / plane] += if p > T::from_f64_lossy(1e-20) {
            -p.ln()
        } else {
            // the probability underflowed; use the log-sum-exp form
            let max = (0..c).map(|k| logits.data[k * m + i]).fold(T::neg_infinity(), T::max);
            (0..c).map(|k| (logits.data[k * m + i] - max).exp()).sum::<T>().ln() + max - logits.data[t * m + i]
        };
        grad.data[t * m + i] -= T::one();
        for k in 0..c {
            grad.data[k * m + i] *= inv_m;
        }
    }
    let inv_plane = T::one() / T::from_usize(plane).unwrap();
    let total: T = per_image.iter().copied().sum();
    per_image.iter_mut().for_each(|v| *v *= inv_plane);
    Ok(CrossEntropy { mean: total * inv_m, per_image, grad })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingLoss<T> {
    pub value: T,
    /// Gradient with respect to each predicted loss.
    pub grad: Vec<T>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Pairwise margin ranking loss over consecutive pairs `(0,1), (2,3), ...`.
///
/// Each pair contributes `max(0, -sign(l_i - l_j) * (p_i - p_j) + margin)`;
/// the result is the mean over pairs. With an odd batch the last element is
/// dropped. Fewer than two elements give zero.
pub fn ranking_loss<T: Scalar>(predicted: &[T], target: &[T], margin: T) -> RankingLoss<T> {
    assert_eq!(predicted.len(), target.len(), "prediction/target length mismatch");
    let pairs = predicted.len() / 2;
    let mut grad = vec![T::zero(); predicted.len()];
    if pairs == 0 {
        return RankingLoss { value: T::zero(), grad };
    }
    let inv = T::one() / T::from_usize(pairs).unwrap();
    let mut total = T::zero();
    for p in 0..pairs {
        let (i, j) = (2 * p, 2 * p + 1);
        let s = sign(target[i] - target[j]);
        let v = -s * (predicted[i] - predicted[j]) + margin;
        if v > T::zero() {
            total += v;
            grad[i] = -s * inv;
            grad[j] = s * inv;
        }
    }
    RankingLoss { value: total * inv, grad }
}
