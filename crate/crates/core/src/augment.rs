//! Rotation and noise transforms used by training augmentation and by
//! test-time augmentation.
//!
//! Rotations turn about the image centre. Rotating by `d` and then by `-d`
//! returns every pixel whose source stayed inside the frame to its place.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SliceSample;

/// Source coordinate (y, x) sampled by output pixel (y, x) under a rotation by `degrees`.
#[derive(Clone, Copy)]
struct Rotation {
    cos: f64,
    sin: f64,
    cy: f64,
    cx: f64,
}

impl Rotation {
    fn new(degrees: f64, h: usize, w: usize) -> Self {
        let (sin, cos) = degrees.to_radians().sin_cos();
        Self { cos, sin, cy: (h as f64 - 1.0) / 2.0, cx: (w as f64 - 1.0) / 2.0 }
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
        (self.cy - self.sin * dx + self.cos * dy, self.cx + self.cos * dx + self.sin * dy)
    }
}

/// Bilinear rotation; neighbours outside the image read as `fill`.
pub fn rotate_bilinear(img: ArrayView2<f32>, degrees: f64, fill: f32) -> Array2<f32> {
    if degrees == 0.0 {
        return img.to_owned();
    }
    let (h, w) = img.dim();
    let rot = Rotation::new(degrees, h, w);
    let at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            fill
        } else {
            img[[y as usize, x as usize]]
        }
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = rot.source(y, x);
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
        let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Nearest-neighbour rotation; sources outside the image read as `fill`.
pub fn rotate_nearest(mask: ArrayView2<u8>, degrees: f64, fill: u8) -> Array2<u8> {
    if degrees == 0.0 {
        return mask.to_owned();
    }
    let (h, w) = mask.dim();
    let rot = Rotation::new(degrees, h, w);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = rot.source(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            fill
        } else {
            mask[[ry as usize, rx as usize]]
        }
    })
}

/// Rotates a `classes x h x w` probability map. Pixels whose source lies
/// inside the frame are interpolated bilinearly, clamped at zero and
/// renormalized; pixels whose source lies outside get the uniform distribution.
pub fn rotate_probabilities(probs: &[f32], classes: usize, h: usize, w: usize, degrees: f64) -> Vec<f32> {
    assert_eq!(probs.len(), classes * h * w, "probability map shape mismatch");
    if degrees == 0.0 {
        return probs.to_vec();
    }
    let rot = Rotation::new(degrees, h, w);
    let plane = h * w;
    let uniform = 1.0 / classes as f32;
    let mut out = vec![0.0f32; probs.len()];
    const SLACK: f64 = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = rot.source(y, x);
            let i = y * w + x;
            if sy < -SLACK || sx < -SLACK || sy > (h - 1) as f64 + SLACK || sx > (w - 1) as f64 + SLACK {
                (0..classes).for_each(|c| out[c * plane + i] = uniform);
                continue;
            }
            let (sy, sx) = (sy.clamp(0.0, (h - 1) as f64), sx.clamp(0.0, (w - 1) as f64));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let mut total = 0.0;
            for c in 0..classes {
                let p = &probs[c * plane..(c + 1) * plane];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                let v = (top * (1.0 - fy) + bot * fy).max(0.0);
                out[c * plane + i] = v;
                total += v;
            }
            for c in 0..classes {
                out[c * plane + i] = if total > 0.0 { out[c * plane + i] / total } else { uniform };
            }
        }
    }
    out
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every pixel. `sigma` is a standard deviation.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &mut Array2<f32>, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    img.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
}

/// Uniform draw from `[lo, hi)`, or `lo` when the interval is empty.
pub fn draw_angle<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.1 > range.0 {
        rng.gen_range(range.0..range.1)
    } else {
        range.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle range in degrees.
    pub rotation_deg: (f64, f64),
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotation_deg: (-10.0, 10.0), noise_sigma: 0.01 }
    }
}

/// Training augmentation: rotate image (bilinear) and mask (nearest) by one
/// random angle with zero / background fill, then add Gaussian noise to the image.
pub fn augment<R: Rng + ?Sized>(sample: &SliceSample, cfg: &AugmentConfig, rng: &mut R) -> SliceSample {
    let d = draw_angle(cfg.rotation_deg, rng);
    let mut image = rotate_bilinear(sample.image.view(), d, 0.0);
    let mask = rotate_nearest(sample.mask.view(), d, 0);
    add_gaussian_noise(&mut image, cfg.noise_sigma, rng);
    SliceSample { image, mask, ..sample.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn sample() -> SliceSample {
        SliceSample {
            volume_id: "v".into(),
            slice_index: 0,
            image: Array2::from_shape_fn((9, 9), |(y, x)| (y * 9 + x) as f32 / 81.0),
            mask: Array2::from_shape_fn((9, 9), |(y, x)| u8::from((2..7).contains(&y) && (3..6).contains(&x)) * 2),
            spacing: [1.0; 3],
        }
    }

    #[test]
    fn zero_angle_and_sigma_is_identity() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig { rotation_deg: (0.0, 0.0), noise_sigma: 0.0 };
        assert_eq!(augment(&s, &cfg, &mut rng), s);
    }

    #[test]
    fn quarter_turn_maps_pixels_exactly() {
        let s = sample();
        let r = rotate_bilinear(s.image.view(), 90.0, 0.0);
        let back = rotate_bilinear(r.view(), -90.0, 0.0);
        for (a, b) in back.iter().zip(s.image.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_ne!(r, s.image);
    }

    #[test]
    fn mask_rotation_keeps_vocabulary() {
        let s = sample();
        let before: BTreeSet<u8> = s.mask.iter().copied().chain([0]).collect();
        for d in [-10.0, -3.3, 7.0, 10.0] {
            assert!(rotate_nearest(s.mask.view(), d, 0).iter().all(|c| before.contains(c)));
        }
    }

    #[test]
    fn rotated_probabilities_stay_normalized() {
        let (c, h, w) = (3, 6, 7);
        let mut p = vec![0.0f32; c * h * w];
        for i in 0..h * w {
            let a = (i % 5) as f32 + 1.0;
            p[i] = a / (a + 3.0);
            p[h * w + i] = 1.0 / (a + 3.0);
            p[2 * h * w + i] = 2.0 / (a + 3.0);
        }
        let r = rotate_probabilities(&p, c, h, w, 8.0);
        for i in 0..h * w {
            let s: f32 = (0..c).map(|k| r[k * h * w + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        // a corner pixel rotates in from outside the frame
        assert!((0..c).all(|k| (r[k * h * w] - 1.0 / 3.0).abs() < 1e-6));
    }
}
