//! Volumes, 2D slice samples, dataset splits and the labelled/unlabelled pool.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::stats::percentile_sorted;

pub type SampleId = String;

/// Formats the stable `"{volume_id}:{slice_index}"` id.
pub fn sample_id(volume_id: &str, slice_index: usize) -> SampleId {
    format!("{volume_id}:{slice_index}")
}

/// A 3D scan. Arrays are indexed `[axis0, axis1, axis2]`; `spacing` is in mm per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub volume_id: String,
    pub intensities: Array3<f32>,
    pub labels: Array3<u8>,
    pub spacing: [f64; 3],
}

impl VolumeRecord {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.volume_id.is_empty() || self.volume_id.contains([':', '/', '\\']) {
            return Err(invalid(format!("volume id {:?} must be non-empty without ':' or path separators", self.volume_id)));
        }
        if self.intensities.shape() != self.labels.shape() {
            return Err(invalid(format!(
                "{}: intensity shape {:?} differs from label shape {:?}",
                self.volume_id,
                self.intensities.shape(),
                self.labels.shape()
            )));
        }
        if self.intensities.is_empty() {
            return Err(invalid(format!("{}: empty volume", self.volume_id)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("{}: spacing must be positive, got {:?}", self.volume_id, self.spacing)));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= class_count) {
            return Err(invalid(format!("{}: label {bad} outside 0..{class_count}", self.volume_id)));
        }
        if self.intensities.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{}: non-finite intensity", self.volume_id)));
        }
        Ok(())
    }
}

/// One annotatable 2D image/mask pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceSample {
    pub volume_id: String,
    pub slice_index: usize,
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    /// Voxel size in mm along the slice axis, rows and columns.
    pub spacing: [f64; 3],
}

impl SliceSample {
    pub fn id(&self) -> SampleId {
        sample_id(&self.volume_id, self.slice_index)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.dim()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SliceSample>,
    pub validation: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
    pub class_count: usize,
}

impl DatasetSplit {
    /// Checks class count, id uniqueness, shapes and volume-level disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(invalid("class_count must be >= 2"));
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut ids = HashSet::new();
        for (name, part) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            for s in part {
                if let Some(prev) = owner.insert(&s.volume_id, name) {
                    if prev != name {
                        return Err(invalid(format!("volume {} appears in both {prev} and {name}", s.volume_id)));
                    }
                }
                if !ids.insert(s.id()) {
                    return Err(invalid(format!("duplicate sample id {}", s.id())));
                }
                if s.image.dim() != s.mask.dim() {
                    return Err(invalid(format!("{}: image and mask shapes differ", s.id())));
                }
                if s.mask.iter().any(|&c| c as usize >= self.class_count) {
                    return Err(invalid(format!("{}: mask class out of range", s.id())));
                }
            }
        }
        Ok(())
    }

    /// Id to position in `train`.
    pub fn train_index(&self) -> BTreeMap<SampleId, usize> {
        self.train.iter().enumerate().map(|(i, s)| (s.id(), i)).collect()
    }

    pub fn train_ids(&self) -> BTreeSet<SampleId> {
        self.train.iter().map(SliceSample::id).collect()
    }
}

/// Clips to the per-scan 1st/99th percentiles and maps that range onto [0, 1].
/// A scan whose percentiles coincide maps to all zeros.
pub fn normalize_intensity(volume: &VolumeRecord) -> Result<VolumeRecord> {
    if volume.intensities.is_empty() {
        return Err(invalid(format!("{}: empty volume", volume.volume_id)));
    }
    let mut sorted: Vec<f64> = volume.intensities.iter().map(|&v| f64::from(v)).collect();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, 1.0);
    let hi = percentile_sorted(&sorted, 99.0);
    let intensities = if hi > lo {
        volume.intensities.mapv(|v| ((f64::from(v).clamp(lo, hi) - lo) / (hi - lo)) as f32)
    } else {
        Array3::zeros(volume.intensities.raw_dim())
    };
    Ok(VolumeRecord { intensities, ..volume.clone() })
}

/// Number of samples when resampling `n` voxels of `spacing` mm to `target` mm:
/// floor of the physical extent over the target spacing, plus one.
pub fn resampled_len(n: usize, spacing: f64, target: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let extent = (n - 1) as f64 * spacing;
    // the small slack keeps exact multiples from flooring one short
    (extent / target + 1e-9).floor() as usize + 1
}

fn resample_axis_linear(a: &Array3<f32>, axis: usize, n_out: usize, step: f64) -> Array3<f32> {
    let n = a.len_of(Axis(axis));
    let mut shape = a.raw_dim();
    shape[axis] = n_out;
    let mut out = Array3::zeros(shape);
    for i in 0..n_out {
        let s = (i as f64 * step).min((n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let f = (s - lo as f64) as f32;
        let (vlo, vhi) = (a.index_axis(Axis(axis), lo), a.index_axis(Axis(axis), hi));
        Zip::from(out.index_axis_mut(Axis(axis), i))
            .and(&vlo)
            .and(&vhi)
            .for_each(|o, &l, &h| *o = if f == 0.0 { l } else { l + (h - l) * f });
    }
    out
}

fn resample_axis_nearest(a: &Array3<u8>, axis: usize, n_out: usize, step: f64) -> Array3<u8> {
    let n = a.len_of(Axis(axis));
    let mut shape = a.raw_dim();
    shape[axis] = n_out;
    let mut out = Array3::zeros(shape);
    for i in 0..n_out {
        let s = ((i as f64 * step).round() as usize).min(n - 1);
        out.index_axis_mut(Axis(axis), i).assign(&a.index_axis(Axis(axis), s));
    }
    out
}

/// Source coordinate of output pixel `i` under half-pixel-centre resizing.
fn resize_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
}

/// Bilinear resize with half-pixel centres; the identity when sizes match.
pub fn resize_bilinear(img: ArrayView2<f32>, (h, w): (usize, usize)) -> Array2<f32> {
    let (hi, wi) = img.dim();
    if (hi, wi) == (h, w) {
        return img.to_owned();
    }
    let xs: Vec<(usize, usize, f32)> = (0..w)
        .map(|x| {
            let s = resize_coord(x, wi, w);
            let l = s.floor() as usize;
            (l, (l + 1).min(wi - 1), (s - l as f64) as f32)
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let s = resize_coord(y, hi, h);
        let (t, fy) = (s.floor() as usize, (s - s.floor()) as f32);
        let b = (t + 1).min(hi - 1);
        let (l, r, fx) = xs[x];
        let top = img[[t, l]] + (img[[t, r]] - img[[t, l]]) * fx;
        let bot = img[[b, l]] + (img[[b, r]] - img[[b, l]]) * fx;
        top + (bot - top) * fy
    })
}

/// Nearest-neighbour resize; the output label vocabulary is a subset of the input's.
pub fn resize_nearest(mask: ArrayView2<u8>, (h, w): (usize, usize)) -> Array2<u8> {
    let (hi, wi) = mask.dim();
    if (hi, wi) == (h, w) {
        return mask.to_owned();
    }
    let pick = |i: usize, n_in: usize, n_out: usize| (((i as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    Array2::from_shape_fn((h, w), |(y, x)| mask[[pick(y, hi, h), pick(x, wi, w)]])
}

/// Resamples to isotropic `target_spacing`, slices along the short axis (the
/// axis with fewest resampled voxels; ties go to the lower axis) and resizes
/// every slice to `target_size`. Intensities are interpolated linearly, labels
/// by nearest neighbour.
pub fn volume_to_slices(
    volume: &VolumeRecord,
    target_spacing: f64,
    target_size: (usize, usize),
) -> Result<Vec<SliceSample>> {
    if !(target_spacing > 0.0 && target_spacing.is_finite()) {
        return Err(invalid("target spacing must be positive"));
    }
    if target_size.0 == 0 || target_size.1 == 0 {
        return Err(invalid("target size must be positive"));
    }
    if volume.intensities.shape() != volume.labels.shape() {
        return Err(invalid(format!("{}: intensity and label shapes differ", volume.volume_id)));
    }
    if volume.intensities.is_empty() || volume.spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid(format!("{}: volume has no slices to resample", volume.volume_id)));
    }
    let mut img = volume.intensities.clone();
    let mut lab = volume.labels.clone();
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        let n = img.len_of(Axis(axis));
        let m = resampled_len(n, volume.spacing[axis], target_spacing);
        let step = target_spacing / volume.spacing[axis];
        if !(m == n && step == 1.0) {
            img = resample_axis_linear(&img, axis, m, step);
            lab = resample_axis_nearest(&lab, axis, m, step);
        }
        dims[axis] = m;
    }
    let short = (0..3).min_by_key(|&a| (dims[a], a)).expect("three axes");
    let plane: Vec<usize> = (0..3).filter(|&a| a != short).collect();
    let spacing = [
        target_spacing,
        target_spacing * dims[plane[0]] as f64 / target_size.0 as f64,
        target_spacing * dims[plane[1]] as f64 / target_size.1 as f64,
    ];
    let slices = (0..dims[short])
        .map(|k| SliceSample {
            volume_id: volume.volume_id.clone(),
            slice_index: k,
            image: resize_bilinear(img.index_axis(Axis(short), k), target_size),
            mask: resize_nearest(lab.index_axis(Axis(short), k), target_size),
            spacing,
        })
        .collect::<Vec<_>>();
    if slices.is_empty() {
        return Err(invalid(format!("{}: no slices after resampling", volume.volume_id)));
    }
    Ok(slices)
}

/// Labelled and unlabelled training ids. Both sets iterate in id order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labelled: BTreeSet<SampleId>,
    pub unlabelled: BTreeSet<SampleId>,
    pub cycle: usize,
}

impl PoolState {
    /// Disjoint and exhaustive over `all`.
    pub fn check_partition(&self, all: &BTreeSet<SampleId>) -> Result<()> {
        if let Some(id) = self.labelled.intersection(&self.unlabelled).next() {
            return Err(CoreError::Pool(format!("{id} is both labelled and unlabelled")));
        }
        let union: BTreeSet<_> = self.labelled.union(&self.unlabelled).cloned().collect();
        if &union != all {
            return Err(CoreError::Pool("labelled and unlabelled sets do not cover the training ids".into()));
        }
        Ok(())
    }
}

/// Draws `n_init` training ids uniformly without replacement into the labelled set.
pub fn init_pool(split: &DatasetSplit, n_init: usize, rng_seed: u64) -> Result<PoolState> {
    let ids: Vec<SampleId> = split.train_ids().into_iter().collect();
    if n_init == 0 {
        return Err(CoreError::Pool("n_init must be >= 1".into()));
    }
    if n_init > ids.len() {
        return Err(CoreError::InsufficientPool { needed: n_init, available: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let chosen: BTreeSet<usize> = sample(&mut rng, ids.len(), n_init).into_iter().collect();
    let (mut labelled, mut unlabelled) = (BTreeSet::new(), BTreeSet::new());
    for (i, id) in ids.into_iter().enumerate() {
        if chosen.contains(&i) {
            labelled.insert(id);
        } else {
            unlabelled.insert(id);
        }
    }
    Ok(PoolState { labelled, unlabelled, cycle: 0 })
}

/// Reveals the stored ground truth for `queried`: moves the ids to the
/// labelled set and advances the cycle. Any id that is not currently
/// unlabelled, or appears twice, is an error.
pub fn oracle_annotate(pool: &PoolState, queried: &[SampleId]) -> Result<PoolState> {
    if queried.is_empty() {
        return Err(CoreError::Pool("empty query".into()));
    }
    let mut seen = HashSet::new();
    for id in queried {
        if !seen.insert(id) {
            return Err(CoreError::Pool(format!("{id} queried twice")));
        }
        if pool.labelled.contains(id) {
            return Err(CoreError::Pool(format!("{id} is already labelled")));
        }
        if !pool.unlabelled.contains(id) {
            return Err(CoreError::Pool(format!("{id} is not in the pool")));
        }
    }
    let mut next = pool.clone();
    for id in queried {
        next.unlabelled.remove(id);
        next.labelled.insert(id.clone());
    }
    next.cycle += 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn volume(shape: (usize, usize, usize), spacing: [f64; 3]) -> VolumeRecord {
        let n = shape.0 * shape.1 * shape.2;
        VolumeRecord {
            volume_id: "v".into(),
            intensities: Array::from_shape_vec(shape, (0..n).map(|i| i as f32).collect()).unwrap(),
            labels: Array::from_shape_vec(shape, (0..n).map(|i| (i % 3) as u8).collect()).unwrap(),
            spacing,
        }
    }

    #[test]
    fn constant_volume_normalizes_to_zero() {
        let mut v = volume((2, 2, 2), [1.0; 3]);
        v.intensities.fill(7.0);
        assert!(normalize_intensity(&v).unwrap().intensities.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ramp_normalization_uses_interpolated_percentiles() {
        let v = volume((1, 1, 100), [1.0; 3]);
        let n = normalize_intensity(&v).unwrap();
        let want = (50.0 - 0.99) / (98.01 - 0.99);
        assert!((f64::from(n.intensities[[0, 0, 50]]) - want).abs() < 1e-6);
        assert!((want - 0.5051).abs() < 1e-4);
        assert_eq!(n.intensities[[0, 0, 0]], 0.0);
        assert_eq!(n.intensities[[0, 0, 99]], 1.0);
    }

    #[test]
    fn identity_resample_returns_input_planes() {
        let v = volume((3, 8, 8), [1.0; 3]);
        let s = volume_to_slices(&v, 1.0, (8, 8)).unwrap();
        assert_eq!(s.len(), 3);
        for (k, sl) in s.iter().enumerate() {
            assert_eq!(sl.image, v.intensities.index_axis(Axis(0), k));
            assert_eq!(sl.mask, v.labels.index_axis(Axis(0), k));
            assert_eq!(sl.spacing, [1.0; 3]);
            assert_eq!(sl.id(), format!("v:{k}"));
        }
    }

    #[test]
    fn coarse_axis_count_follows_floor_extent_rule() {
        // 10 slices at 2 mm span 18 mm: floor(18 / 1) + 1 = 19
        assert_eq!(resampled_len(10, 2.0, 1.0), 19);
        let v = volume((10, 32, 32), [2.0, 1.0, 1.0]);
        let s = volume_to_slices(&v, 1.0, (16, 16)).unwrap();
        assert_eq!(s.len(), 19);
        // slice 1 sits halfway between input slices 0 and 1
        let want = 0.5 * (v.intensities[[0, 0, 0]] + v.intensities[[1, 0, 0]]);
        let direct = volume_to_slices(&v, 1.0, (32, 32)).unwrap();
        assert!((direct[1].image[[0, 0]] - want).abs() < 1e-4);
    }

    #[test]
    fn nearest_resize_preserves_vocabulary() {
        let m = Array2::from_shape_fn((7, 5), |(y, x)| ((y * 5 + x) % 4) as u8);
        let r = resize_nearest(m.view(), (16, 11));
        let before: BTreeSet<u8> = m.iter().copied().collect();
        assert!(r.iter().all(|c| before.contains(c)));
    }

    fn toy_split(n: usize) -> DatasetSplit {
        let s = |i: usize| SliceSample {
            volume_id: format!("v{}", i / 4),
            slice_index: i % 4,
            image: Array2::zeros((2, 2)),
            mask: Array2::zeros((2, 2)),
            spacing: [1.0; 3],
        };
        DatasetSplit { train: (0..n).map(s).collect(), class_count: 2, ..Default::default() }
    }

    #[test]
    fn pool_init_and_annotation() {
        let split = toy_split(20);
        let pool = init_pool(&split, 5, 3).unwrap();
        assert_eq!(pool, init_pool(&split, 5, 3).unwrap());
        assert_eq!((pool.labelled.len(), pool.unlabelled.len()), (5, 15));
        pool.check_partition(&split.train_ids()).unwrap();
        let q: Vec<_> = pool.unlabelled.iter().take(3).cloned().collect();
        let next = oracle_annotate(&pool, &q).unwrap();
        assert_eq!((next.labelled.len(), next.unlabelled.len(), next.cycle), (8, 12, 1));
        next.check_partition(&split.train_ids()).unwrap();
        assert!(oracle_annotate(&next, &q[..1]).is_err());
        assert!(oracle_annotate(&pool, &[q[0].clone(), q[0].clone()]).is_err());
        assert!(oracle_annotate(&pool, &["nope:0".to_string()]).is_err());
        let all: Vec<_> = pool.unlabelled.iter().cloned().collect();
        assert!(oracle_annotate(&pool, &all).unwrap().unlabelled.is_empty());
        assert!(init_pool(&split, 20, 0).unwrap().unlabelled.is_empty());
        assert!(init_pool(&split, 0, 0).is_err());
        assert!(init_pool(&split, 21, 0).is_err());
    }

    #[test]
    fn split_validation_catches_shared_volumes() {
        let mut split = toy_split(8);
        split.test.push(split.train[0].clone());
        split.test[0].slice_index = 9;
        assert!(split.validate().is_err());
    }
}
