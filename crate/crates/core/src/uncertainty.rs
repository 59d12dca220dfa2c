//! Per-sample uncertainty scores: predictive entropy, Jensen-Shannon
//! divergence across dropout samples or test-time augmentations, and the
//! output of a jointly trained loss predictor.
//!
//! Natural logarithms throughout. Pixel maps reduce to one number per sample
//! with [`aggregate_pixels`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbal_nn::{FeatureMap, LossPredictor, Mode, UNet};
use serde::{Deserialize, Serialize};

use crate::augment::{add_gaussian_noise, draw_angle, rotate_bilinear, rotate_probabilities};
use crate::data::{SampleId, SliceSample};
use crate::error::{invalid, CoreError, Result};
use crate::stats::derive_seed;
use crate::trainer::images_batch;

/// Tolerance on per-pixel probability sums (model outputs are `f32`).
const SUM_TOLERANCE: f64 = 1e-4;

fn check_distribution(p: ArrayView3<f64>) -> Result<()> {
    for lane in p.lanes(Axis(0)) {
        let mut s = 0.0;
        for &v in lane {
            if !(v >= -1e-12 && v <= 1.0 + 1e-12) {
                return Err(invalid(format!("probability {v} outside [0, 1]")));
            }
            s += v;
        }
        if (s - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("pixel probabilities sum to {s}")));
        }
    }
    Ok(())
}

fn entropy_of(lane: impl Iterator<Item = f64>) -> f64 {
    -lane.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Shannon entropy per pixel of a `(C, H, W)` probability map, with `0 ln 0 = 0`.
pub fn pixel_entropy(prob: ArrayView3<f64>) -> Result<Array2<f64>> {
    check_distribution(prob)?;
    let (_, h, w) = prob.dim();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| entropy_of((0..prob.dim().0).map(|c| prob[[c, y, x]]))))
}

/// Per-pixel Jensen-Shannon divergence of `K >= 2` maps:
/// `H(mean_k p_k) - mean_k H(p_k)`, clamped at zero against rounding.
pub fn jsd(probs: &[ArrayView3<f64>]) -> Result<Array2<f64>> {
    if probs.len() < 2 {
        return Err(invalid("jsd needs at least two probability maps"));
    }
    let dim = probs[0].dim();
    if probs.iter().any(|p| p.dim() != dim) {
        return Err(invalid("jsd maps differ in shape"));
    }
    for p in probs {
        check_distribution(*p)?;
    }
    let k = probs.len() as f64;
    let (c, h, w) = dim;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let mean_entropy = probs.iter().map(|p| entropy_of((0..c).map(|i| p[[i, y, x]]))).sum::<f64>() / k;
        let mixture = entropy_of((0..c).map(|i| probs.iter().map(|p| p[[i, y, x]]).sum::<f64>() / k));
        (mixture - mean_entropy).max(0.0)
    }))
}

/// Reduction of a pixel map to one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "percent")]
pub enum PixelAggregation {
    #[default]
    Mean,
    Sum,
    /// Mean of the highest `q` percent of pixels (at least one pixel).
    TopPercent(f64),
}

pub fn aggregate_pixels(map: &Array2<f64>, how: PixelAggregation) -> Result<f64> {
    if map.is_empty() {
        return Err(invalid("cannot aggregate an empty map"));
    }
    if map.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in pixel map"));
    }
    let n = map.len() as f64;
    Ok(match how {
        PixelAggregation::Mean => map.sum() / n,
        PixelAggregation::Sum => map.sum(),
        PixelAggregation::TopPercent(q) => {
            if !(q > 0.0 && q <= 100.0) {
                return Err(invalid(format!("top percent {q} outside (0, 100]")));
            }
            let mut v: Vec<f64> = map.iter().copied().collect();
            v.sort_by(|a, b| b.total_cmp(a));
            let take = ((q / 100.0 * n).ceil() as usize).clamp(1, v.len());
            v[..take].iter().sum::<f64>() / take as f64
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Entropy,
    Dropout,
    Tta,
    LearnLoss,
}

impl ScorerKind {
    pub fn name(self) -> &'static str {
        match self {
            ScorerKind::Entropy => "entropy",
            ScorerKind::Dropout => "dropout",
            ScorerKind::Tta => "tta",
            ScorerKind::LearnLoss => "learnloss",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(ScorerKind::Entropy),
            "dropout" => Ok(ScorerKind::Dropout),
            "tta" => Ok(ScorerKind::Tta),
            "learnloss" => Ok(ScorerKind::LearnLoss),
            other => Err(CoreError::Config(format!("unknown scorer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Stochastic passes for dropout and TTA.
    pub k: usize,
    pub aggregation: PixelAggregation,
    pub tta_rotation_deg: (f64, f64),
    /// Standard deviation of the TTA input noise.
    pub tta_noise_sigma: f64,
    /// Images per deterministic forward pass.
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k: 8,
            aggregation: PixelAggregation::Mean,
            tta_rotation_deg: (-10.0, 10.0),
            tta_noise_sigma: 0.01,
            batch_size: 16,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CoreError::Config("scoring: k must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("scoring: batch_size must be >= 1".into()));
        }
        if !(self.tta_noise_sigma >= 0.0) || !(self.tta_rotation_deg.0 <= self.tta_rotation_deg.1) {
            return Err(CoreError::Config("scoring: invalid TTA transform parameters".into()));
        }
        if let PixelAggregation::TopPercent(q) = self.aggregation {
            if !(q > 0.0 && q <= 100.0) {
                return Err(CoreError::Config("scoring: top percent must be in (0, 100]".into()));
            }
        }
        Ok(())
    }
}

/// Anything producing per-pixel class probabilities for a batch of images.
pub trait Segmenter {
    fn class_count(&self) -> usize;

    /// Dropout rate of the stochastic mode; zero means stochastic passes are deterministic.
    fn dropout_rate(&self) -> f64;

    /// `C x N x H x W` probabilities. With `rng`, dropout is active while
    /// normalization stays in inference mode.
    fn predict(&mut self, images: &FeatureMap<f32>, rng: Option<&mut dyn RngCore>) -> Result<FeatureMap<f32>>;
}

impl Segmenter for UNet<f32> {
    fn class_count(&self) -> usize {
        self.config().class_count
    }

    fn dropout_rate(&self) -> f64 {
        self.config().dropout_rate
    }

    fn predict(&mut self, images: &FeatureMap<f32>, rng: Option<&mut dyn RngCore>) -> Result<FeatureMap<f32>> {
        let mode = if rng.is_some() { Mode::McDropout } else { Mode::Eval };
        Ok(self.forward(images, mode, rng)?.probabilities)
    }
}

/// Image `n` of a `C x N x H x W` map as an `f64` `(C, H, W)` array.
fn image_probs(p: &FeatureMap<f32>, n: usize) -> Array3<f64> {
    Array3::from_shape_fn((p.channels, p.height, p.width), |(c, y, x)| f64::from(p.plane_at(c, n)[y * p.width + x]))
}

/// Random stream of one sample, independent of scoring order and batching.
pub fn sample_rng(seed: u64, scorer: ScorerKind, id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{scorer}:{id}")))
}

/// Mean-aggregated entropy of deterministic predictions, one per sample.
pub fn score_entropy<M: Segmenter>(model: &mut M, samples: &[&SliceSample], cfg: &ScoringConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let probs = model.predict(&images_batch(chunk)?, None)?;
        for n in 0..chunk.len() {
            out.push(aggregate_pixels(&pixel_entropy(image_probs(&probs, n).view())?, cfg.aggregation)?);
        }
    }
    Ok(out)
}

/// JSD of `k` dropout-active passes (normalization frozen). A model without
/// dropout scores exactly zero.
pub fn score_dropout<M: Segmenter>(model: &mut M, sample: &SliceSample, cfg: &ScoringConfig, rng: &mut dyn RngCore) -> Result<f64> {
    if model.dropout_rate() == 0.0 {
        log::warn!("dropout scoring with dropout_rate = 0: every score is 0");
        return Ok(0.0);
    }
    let copies: Vec<&SliceSample> = vec![sample; cfg.k];
    let probs = model.predict(&images_batch(&copies)?, Some(rng))?;
    let maps: Vec<Array3<f64>> = (0..cfg.k).map(|n| image_probs(&probs, n)).collect();
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    aggregate_pixels(&jsd(&views)?, cfg.aggregation)
}

/// JSD of predictions under `k` random transforms (noise, then rotation),
/// each mapped back by the inverse rotation before comparison.
pub fn score_tta<M: Segmenter>(model: &mut M, sample: &SliceSample, cfg: &ScoringConfig, rng: &mut dyn RngCore) -> Result<f64> {
    let (h, w) = sample.shape();
    let mut angles = Vec::with_capacity(cfg.k);
    let mut transformed = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let mut img = sample.image.clone();
        add_gaussian_noise(&mut img, cfg.tta_noise_sigma, rng);
        let d = draw_angle(cfg.tta_rotation_deg, rng);
        transformed.push(SliceSample { image: rotate_bilinear(img.view(), d, 0.0), ..sample.clone() });
        angles.push(d);
    }
    let refs: Vec<&SliceSample> = transformed.iter().collect();
    let probs = model.predict(&images_batch(&refs)?, None)?;
    let c = probs.channels;
    let maps: Vec<Array3<f64>> = angles
        .iter()
        .enumerate()
        .map(|(n, &d)| {
            let mut flat = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                flat.extend_from_slice(probs.plane_at(ch, n));
            }
            let back = rotate_probabilities(&flat, c, h, w, -d);
            Array3::from_shape_fn((c, h, w), |(ch, y, x)| f64::from(back[(ch * h + y) * w + x]))
        })
        .collect();
    let views: Vec<_> = maps.iter().map(|m| m.view()).collect();
    aggregate_pixels(&jsd(&views)?, cfg.aggregation)
}

/// Predicted loss of each sample, used raw as its score.
pub fn score_learnloss(
    model: &mut UNet<f32>,
    predictor: &mut LossPredictor<f32>,
    samples: &[&SliceSample],
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    if !predictor.is_trained() {
        return Err(CoreError::Invalid("loss predictor has not been trained".into()));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let fwd = model.forward(&images_batch(chunk)?, Mode::Eval, None)?;
        let pred = predictor.forward(&fwd.taps, chunk.len(), false)?;
        for v in pred {
            let v = f64::from(v);
            if !v.is_finite() {
                return Err(invalid("loss predictor produced a non-finite score"));
            }
            out.push(v);
        }
    }
    Ok(out)
}

/// Scores of one scorer over one pool, keyed by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scorer: ScorerKind,
    pub scores: BTreeMap<SampleId, f64>,
    pub cycle: usize,
    pub model_digest: String,
}

impl ScoreTable {
    /// Tab-separated `id<TAB>score` rows after `#` header lines.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# scorer\t{}\n# cycle\t{}\n# model_digest\t{}\nid\tscore\n", self.scorer, self.cycle, self.model_digest);
        for (id, v) in &self.scores {
            s.push_str(&format!("{id}\t{v:?}\n"));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| invalid(format!("bad header line {line:?}")))?;
                header.insert(k.to_string(), v.to_string());
            } else if line == "id\tscore" || line.is_empty() {
                continue;
            } else {
                let (id, v) = line.split_once('\t').ok_or_else(|| invalid(format!("bad score line {line:?}")))?;
                let v: f64 = v.parse().map_err(|_| invalid(format!("bad score {v:?}")))?;
                scores.insert(id.to_string(), v);
            }
        }
        let get = |k: &str| header.get(k).cloned().ok_or_else(|| invalid(format!("score table lacks {k}")));
        Ok(Self {
            scorer: get("scorer")?.parse()?,
            cycle: get("cycle")?.parse().map_err(|_| invalid("bad cycle"))?,
            model_digest: get("model_digest")?,
            scores,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_tsv())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}

/// Scores every sample of `pool` with one scorer. Stochastic scorers draw
/// from a stream derived from `seed` and the sample id, so the table does not
/// depend on pool order.
pub fn score_pool(
    model: &mut UNet<f32>,
    predictor: Option<&mut LossPredictor<f32>>,
    pool: &[&SliceSample],
    scorer: ScorerKind,
    cfg: &ScoringConfig,
    seed: u64,
    cycle: usize,
) -> Result<ScoreTable> {
    cfg.validate()?;
    let mut ordered: Vec<&SliceSample> = pool.to_vec();
    ordered.sort_by_key(|s| s.id());
    let values = match scorer {
        ScorerKind::Entropy => score_entropy(model, &ordered, cfg)?,
        ScorerKind::LearnLoss => {
            let p = predictor.ok_or_else(|| CoreError::Invalid("learnloss scoring needs a loss predictor".into()))?;
            score_learnloss(model, p, &ordered, cfg)?
        }
        ScorerKind::Dropout | ScorerKind::Tta => {
            let mut v = Vec::with_capacity(ordered.len());
            for s in &ordered {
                let mut rng = sample_rng(seed, scorer, &s.id());
                v.push(if scorer == ScorerKind::Dropout {
                    score_dropout(model, s, cfg, &mut rng)?
                } else {
                    score_tta(model, s, cfg, &mut rng)?
                });
            }
            v
        }
    };
    let scores = ordered.iter().map(|s| s.id()).zip(values).collect();
    Ok(ScoreTable { scorer, scores, cycle, model_digest: model.digest() })
}
