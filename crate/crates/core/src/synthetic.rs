//! Synthetic blob volumes: a cheap stand-in for real scans.
//!
//! Each volume holds one or two soft elliptical blobs per foreground class.
//! Blobs drift and swell slowly along the slice axis, so neighbouring slices
//! of one volume look alike while different volumes do not. Contrast, noise
//! level, intensity bias and a low-frequency background shading vary per
//! volume.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{normalize_intensity, volume_to_slices, DatasetSplit, SliceSample, VolumeRecord};
use crate::error::{invalid, Result};

struct Blob {
    class: u8,
    cy: f64,
    cx: f64,
    drift_y: f64,
    drift_x: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    phase: f64,
}

impl Blob {
    /// Normalized elliptical radius of pixel (y, x) at slice fraction `t` in [0, 1].
    fn rho(&self, y: f64, x: f64, t: f64) -> f64 {
        let swell = 0.6 + 0.4 * (std::f64::consts::PI * (0.15 + 0.7 * t) + self.phase).sin().abs();
        let (dy, dx) = (y - self.cy - self.drift_y * t, x - self.cx - self.drift_x * t);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / (self.rx * swell)).powi(2) + (v / (self.ry * swell)).powi(2)).sqrt()
    }
}

/// Raw (unnormalized) volumes with 1 mm isotropic spacing and shape
/// `(slices, h, w)`. Volume ids are `vol000`, `vol001`, ...
pub fn generate_synthetic_volumes(
    seed: u64,
    n_volumes: usize,
    slices_per_volume: usize,
    (h, w): (usize, usize),
    class_count: usize,
) -> Result<Vec<VolumeRecord>> {
    if n_volumes == 0 || slices_per_volume == 0 || h < 4 || w < 4 {
        return Err(invalid("synthetic volumes need >= 1 volume, >= 1 slice and >= 4x4 pixels"));
    }
    if !(2..=255).contains(&class_count) {
        return Err(invalid("class_count must be in 2..=255"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = h.min(w) as f64;
    let mut volumes = Vec::with_capacity(n_volumes);
    for v in 0..n_volumes {
        let contrast = rng.gen_range(0.35..1.0);
        let noise = Normal::new(0.0, rng.gen_range(0.08..0.22)).expect("valid sigma");
        let bias = rng.gen_range(-0.5..0.5);
        let shade = (rng.gen_range(0.0..0.3), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..2.0));
        let mut blobs = Vec::new();
        for class in 1..class_count {
            for _ in 0..rng.gen_range(1..=2) {
                let r = rng.gen_range(0.13..0.21) * size;
                blobs.push(Blob {
                    class: class as u8,
                    cy: rng.gen_range(0.3..0.7) * h as f64,
                    cx: rng.gen_range(0.3..0.7) * w as f64,
                    drift_y: rng.gen_range(-0.08..0.08) * h as f64,
                    drift_x: rng.gen_range(-0.08..0.08) * w as f64,
                    ry: r * rng.gen_range(0.75..1.25),
                    rx: r * rng.gen_range(0.75..1.25),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                    phase: rng.gen_range(0.0..0.3),
                });
            }
        }
        let class_gain: Vec<f64> = (0..class_count).map(|c| c as f64 / (class_count - 1) as f64).collect();
        let mut intensities = Array3::<f32>::zeros((slices_per_volume, h, w));
        let mut labels = Array3::<u8>::zeros((slices_per_volume, h, w));
        for z in 0..slices_per_volume {
            let t = if slices_per_volume == 1 { 0.5 } else { z as f64 / (slices_per_volume - 1) as f64 };
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let mut value = bias + shade.0 * (shade.1 + shade.2 * (xf + 0.5 * yf) / size * std::f64::consts::TAU).sin();
                    let mut label = 0u8;
                    for b in &blobs {
                        let rho = b.rho(yf, xf, t);
                        // soft edge about one pixel wide
                        let soft = 1.0 / (1.0 + ((rho - 1.0) * b.rx.min(b.ry) * 1.5).exp());
                        value += contrast * class_gain[b.class as usize] * soft;
                        if rho <= 1.0 {
                            label = label.max(b.class);
                        }
                    }
                    value += noise.sample(&mut rng);
                    intensities[[z, y, x]] = value as f32;
                    labels[[z, y, x]] = label;
                }
            }
        }
        volumes.push(VolumeRecord { volume_id: format!("vol{v:03}"), intensities, labels, spacing: [1.0; 3] });
    }
    Ok(volumes)
}

/// Number of (train, validation, test) volumes for `n` volumes: about 70/10/20
/// with at least one volume in each split.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(invalid("need at least 3 volumes to populate train, validation and test"));
    }
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    Ok((n - test - val, val, test))
}

/// Volume-disjoint split from already preprocessed slices of each volume, in
/// volume order: the first volumes train, then validation, then test.
pub fn assemble_split(volumes: &[VolumeRecord], slice_sets: Vec<Vec<SliceSample>>, class_count: usize) -> Result<DatasetSplit> {
    let (n_train, n_val, _) = split_sizes(volumes.len())?;
    let mut split = DatasetSplit { class_count, ..Default::default() };
    for (i, slices) in slice_sets.into_iter().enumerate() {
        let part = if i < n_train {
            &mut split.train
        } else if i < n_train + n_val {
            &mut split.validation
        } else {
            &mut split.test
        };
        part.extend(slices);
    }
    split.validate()?;
    Ok(split)
}

/// Generates volumes and runs them through the regular preprocessing
/// (percentile normalization, 1 mm resampling, slicing) at their native size.
pub fn generate_synthetic_dataset(
    seed: u64,
    n_volumes: usize,
    slices_per_volume: usize,
    size: (usize, usize),
    class_count: usize,
) -> Result<DatasetSplit> {
    split_sizes(n_volumes)?;
    if slices_per_volume > size.0.min(size.1) {
        // slicing follows the shortest axis, which must stay the stacking axis
        return Err(invalid("slices_per_volume may not exceed the image height or width"));
    }
    let volumes = generate_synthetic_volumes(seed, n_volumes, slices_per_volume, size, class_count)?;
    preprocess_volumes(&volumes, 1.0, size, class_count)
}

/// Normalizes and slices every volume, then splits by volume order.
pub fn preprocess_volumes(
    volumes: &[VolumeRecord],
    target_spacing: f64,
    target_size: (usize, usize),
    class_count: usize,
) -> Result<DatasetSplit> {
    let mut sets = Vec::with_capacity(volumes.len());
    for v in volumes {
        v.validate(class_count)?;
        sets.push(volume_to_slices(&normalize_intensity(v)?, target_spacing, target_size)?);
    }
    assemble_split(volumes, sets, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_synthetic_dataset(5, 4, 3, (16, 16), 2).unwrap();
        let b = generate_synthetic_dataset(5, 4, 3, (16, 16), 2).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(6, 4, 3, (16, 16), 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_are_volume_disjoint_and_sized() {
        assert_eq!(split_sizes(30).unwrap(), (21, 3, 6));
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
        assert!(split_sizes(2).is_err());
        let d = generate_synthetic_dataset(1, 10, 2, (8, 8), 3).unwrap();
        d.validate().unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (14, 2, 4));
        assert!(d.train.iter().chain(&d.test).all(|s| s.image.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_synthetic_dataset(0, 2, 3, (16, 16), 2).is_err());
        assert!(generate_synthetic_dataset(0, 4, 0, (16, 16), 2).is_err());
        assert!(generate_synthetic_dataset(0, 4, 3, (2, 16), 2).is_err());
        assert!(generate_synthetic_dataset(0, 4, 3, (16, 16), 1).is_err());
    }
}
