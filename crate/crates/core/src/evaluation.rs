//! Segmentation metrics (Dice, 95th percentile Hausdorff distance) on 2D
//! slices and stacked 3D volumes, and a paired permutation test.
//!
//! Conventions for degenerate inputs: Dice of two empty masks is 100; HD95 is
//! undefined (`None`) when either mask is empty. Boundary voxels are set
//! voxels with at least one face neighbour outside the set, where positions
//! outside the array count as outside the set. `d(x, Y)` is the Euclidean
//! distance in mm from boundary voxel `x` of `X` to the nearest voxel of `Y`.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3, ArrayD, ArrayView, Axis, Dimension, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;
use crate::error::{invalid, Result};
use crate::stats::{mean, percentile_sorted};
use crate::trainer::images_batch;
use crate::uncertainty::Segmenter;

fn same_shape<D: Dimension>(a: &ArrayView<u8, D>, b: &ArrayView<u8, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Dice similarity of the `class` masks, in percent.
pub fn dsc<D: Dimension>(pred: ArrayView<u8, D>, target: ArrayView<u8, D>, class: u8) -> Result<f64> {
    same_shape(&pred, &target)?;
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let (p, t) = (p == class, t == class);
        np += p as usize;
        nt += t as usize;
        inter += (p && t) as usize;
    }
    if np + nt == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / (np + nt) as f64)
}

/// Exact squared Euclidean distance transform of one lane in place
/// (lower envelope of parabolas), samples `step` mm apart.
fn edt_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * step;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= *z.last().expect("z tracks v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared distance in mm from every voxel to the nearest set voxel
/// (infinite everywhere if the set is empty).
fn squared_distance_to(set: &ArrayD<bool>, spacing: &[f64]) -> ArrayD<f64> {
    let mut d = set.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let (mut v, mut z, mut out, mut lane_buf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in 0..d.ndim() {
        for mut lane in d.lanes_mut(Axis(axis)) {
            lane_buf.clear();
            lane_buf.extend(lane.iter().copied());
            edt_1d(&mut lane_buf, spacing[axis], &mut v, &mut z, &mut out);
            lane.iter_mut().zip(&lane_buf).for_each(|(a, b)| *a = *b);
        }
    }
    d
}

/// Set voxels with a face neighbour outside the set or outside the array.
pub fn boundary(set: &ArrayD<bool>) -> Vec<IxDyn> {
    let shape = set.shape().to_vec();
    let mut out = Vec::new();
    for (idx, &s) in set.indexed_iter() {
        if !s {
            continue;
        }
        let mut edge = false;
        'axes: for a in 0..shape.len() {
            for delta in [-1isize, 1] {
                let c = idx[a] as isize + delta;
                if c < 0 || c >= shape[a] as isize {
                    edge = true;
                    break 'axes;
                }
                let mut n = idx.clone();
                n[a] = c as usize;
                if !set[&n] {
                    edge = true;
                    break 'axes;
                }
            }
        }
        if edge {
            out.push(idx);
        }
    }
    out
}

/// 95th percentile (linear interpolation) of `d(x, Y)` over the boundary of `X`.
fn directed_hd95(x: &ArrayD<bool>, dist_to_y: &ArrayD<f64>) -> f64 {
    let mut d: Vec<f64> = boundary(x).iter().map(|i| dist_to_y[i].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 95.0)
}

/// Symmetric HD95 of the `class` masks in mm, `None` when either mask is empty.
pub fn hd95<D: Dimension>(pred: ArrayView<u8, D>, target: ArrayView<u8, D>, class: u8, spacing: &[f64]) -> Result<Option<f64>> {
    same_shape(&pred, &target)?;
    if spacing.len() != pred.ndim() || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid("hd95 needs one positive spacing per axis"));
    }
    let x = pred.into_dyn().mapv(|v| v == class);
    let y = target.into_dyn().mapv(|v| v == class);
    if !x.iter().any(|&b| b) || !y.iter().any(|&b| b) {
        return Ok(None);
    }
    let to_y = squared_distance_to(&y, spacing);
    let to_x = squared_distance_to(&x, spacing);
    Ok(Some(directed_hd95(&x, &to_y).max(directed_hd95(&y, &to_x))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Dsc,
    Hd95,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::TwoD => "2d",
            Scope::ThreeD => "3d",
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Dsc => "dsc",
            Metric::Hd95 => "hd95",
        })
    }
}

impl Metric {
    pub fn unit(self) -> &'static str {
        match self {
            Metric::Dsc => "%",
            Metric::Hd95 => "mm",
        }
    }
}

/// One metric averaged over slices (2D) or volumes (3D). Undefined values are
/// left out of the averages and counted in `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scope: Scope,
    pub metric: Metric,
    /// Foreground class -> mean over cases where the value is defined.
    pub per_class: BTreeMap<u8, f64>,
    /// Mean of `per_class`; `None` if no class has a defined value.
    pub mean: Option<f64>,
    pub undefined: BTreeMap<u8, usize>,
}

impl MetricRecord {
    fn from_cases(scope: Scope, metric: Metric, class_count: usize, cases: &[Vec<Option<f64>>]) -> Self {
        let mut per_class = BTreeMap::new();
        let mut undefined = BTreeMap::new();
        for c in 1..class_count {
            let defined: Vec<f64> = cases.iter().filter_map(|case| case[c - 1]).collect();
            undefined.insert(c as u8, cases.len() - defined.len());
            if !defined.is_empty() {
                per_class.insert(c as u8, mean(&defined));
            }
        }
        let values: Vec<f64> = per_class.values().copied().collect();
        let mean = (!values.is_empty()).then(|| crate::stats::mean(&values));
        Self { scope, metric, per_class, mean, undefined }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub records: Vec<MetricRecord>,
}

impl Evaluation {
    pub fn get(&self, scope: Scope, metric: Metric) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.scope == scope && r.metric == metric)
    }

    /// Non-background mean of one metric.
    pub fn value(&self, scope: Scope, metric: Metric) -> Option<f64> {
        self.get(scope, metric).and_then(|r| r.mean)
    }
}

fn case_values<D: Dimension>(
    pred: ArrayView<u8, D>,
    target: ArrayView<u8, D>,
    class_count: usize,
    spacing: &[f64],
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let mut d = Vec::with_capacity(class_count - 1);
    let mut h = Vec::with_capacity(class_count - 1);
    for c in 1..class_count as u8 {
        d.push(Some(dsc(pred.view(), target.view(), c)?));
        h.push(hd95(pred.view(), target.view(), c, spacing)?);
    }
    Ok((d, h))
}

/// Metrics of predicted masks against the test slices. 2D values are computed
/// per slice and averaged; 3D values on each volume (slices stacked in
/// `slice_index` order) and averaged over volumes.
pub fn evaluate_predictions(samples: &[&SliceSample], predictions: &[Array2<u8>], class_count: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    if samples.len() != predictions.len() {
        return Err(invalid("one prediction per sample required"));
    }
    if class_count < 2 {
        return Err(invalid("evaluation needs at least one foreground class"));
    }
    let (mut dsc2, mut hd2) = (Vec::new(), Vec::new());
    let mut volumes: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, (s, p)) in samples.iter().zip(predictions).enumerate() {
        let (d, h) = case_values(p.view(), s.mask.view(), class_count, &s.spacing[1..])?;
        dsc2.push(d);
        hd2.push(h);
        volumes.entry(&s.volume_id).or_default().push((s.slice_index, i));
    }
    let (mut dsc3, mut hd3) = (Vec::new(), Vec::new());
    for (vol, mut members) in volumes {
        members.sort_unstable();
        if members.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(invalid(format!("{vol}: duplicate slice index")));
        }
        let (h, w) = samples[members[0].1].shape();
        let mut pred = Array3::<u8>::zeros((members.len(), h, w));
        let mut target = Array3::<u8>::zeros((members.len(), h, w));
        for (z, &(_, i)) in members.iter().enumerate() {
            if samples[i].shape() != (h, w) || predictions[i].dim() != (h, w) {
                return Err(invalid(format!("{vol}: slices differ in shape")));
            }
            pred.index_axis_mut(Axis(0), z).assign(&predictions[i]);
            target.index_axis_mut(Axis(0), z).assign(&samples[i].mask);
        }
        let (d, hd) = case_values(pred.view(), target.view(), class_count, &samples[members[0].1].spacing)?;
        dsc3.push(d);
        hd3.push(hd);
    }
    Ok(Evaluation {
        records: vec![
            MetricRecord::from_cases(Scope::TwoD, Metric::Dsc, class_count, &dsc2),
            MetricRecord::from_cases(Scope::TwoD, Metric::Hd95, class_count, &hd2),
            MetricRecord::from_cases(Scope::ThreeD, Metric::Dsc, class_count, &dsc3),
            MetricRecord::from_cases(Scope::ThreeD, Metric::Hd95, class_count, &hd3),
        ],
    })
}

/// Hard masks (per-pixel argmax, ties to the lower class) from deterministic predictions.
pub fn predict_masks<M: Segmenter>(model: &mut M, samples: &[&SliceSample], batch_size: usize) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let probs = model.predict(&images_batch(chunk)?, None)?;
        let (h, w) = (probs.height, probs.width);
        for n in 0..chunk.len() {
            let planes: Vec<&[f32]> = (0..probs.channels).map(|c| probs.plane_at(c, n)).collect();
            out.push(Array2::from_shape_fn((h, w), |(y, x)| {
                let i = y * w + x;
                let mut best = 0;
                for c in 1..planes.len() {
                    if planes[c][i] > planes[best][i] {
                        best = c;
                    }
                }
                best as u8
            }));
        }
    }
    Ok(out)
}

pub fn evaluate_model<M: Segmenter>(model: &mut M, samples: &[&SliceSample], batch_size: usize) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let class_count = model.class_count();
    let preds = predict_masks(model, samples, batch_size)?;
    evaluate_predictions(samples, &preds, class_count)
}

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Two-sided paired permutation test on the mean difference, flipping the
/// sign of each pair at random: `p = (1 + #{|T| >= |T_obs|}) / (n_perm + 1)`.
pub fn paired_permutation_test<R: Rng + ?Sized>(a: &[f64], b: &[f64], n_perm: usize, rng: &mut R) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("paired lists differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(invalid("paired permutation test needs at least two pairs"));
    }
    if n_perm == 0 {
        return Err(invalid("n_perm must be >= 1"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diff.iter().any(|d| !d.is_finite()) {
        return Err(invalid("non-finite value in paired lists"));
    }
    let observed = diff.iter().sum::<f64>().abs();
    // absorbs rounding in sums that equal the observed one exactly in real arithmetic
    let threshold = observed - 1e-12 * diff.iter().map(|d| d.abs()).sum::<f64>();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let t: f64 = diff.iter().map(|&d| if rng.gen::<bool>() { d } else { -d }).sum();
        if t.abs() >= threshold {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}
