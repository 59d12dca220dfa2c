//! Channel-major activations.
//!
//! Feature maps are stored `C x N x H x W` (channel outermost). A 3x3
//! convolution over a whole batch then becomes a single GEMM, batch norm
//! statistics are contiguous per channel, and channel concatenation is a
//! plain append.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(channels: usize, batch: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * batch * height * width, "feature map size mismatch");
        Self { channels, batch, height, width, data }
    }

    /// Stacks single-channel images (each `height * width`, row-major) into a `1 x N x H x W` map.
    pub fn from_images<S: AsRef<[f32]>>(images: &[S], height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(images.len() * height * width);
        for img in images {
            let img = img.as_ref();
            assert_eq!(img.len(), height * width, "image size mismatch");
            data.extend(img.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Self::from_vec(1, images.len(), height, width, data)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel (`N * H * W`).
    pub fn channel_len(&self) -> usize {
        self.batch * self.plane()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let len = self.channel_len();
        &mut self.data[c * len..(c + 1) * len]
    }

    /// Plane `(c, n)`.
    pub fn plane_at(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let start = (c * self.batch + n) * p;
        &self.data[start..start + p]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Appends `other`'s channels after `self`'s.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert!(
            self.batch == other.batch && self.height == other.height && self.width == other.width,
            "concat requires equal batch and spatial size"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.batch, self.height, self.width, data)
    }

    /// Inverse of [`FeatureMap::concat_channels`]: the first `first` channels and the rest.
    pub fn split_channels(self, first: usize) -> (Self, Self) {
        assert!(first <= self.channels);
        let cut = first * self.channel_len();
        let mut data = self.data;
        let rest = data.split_off(cut);
        (
            Self::from_vec(first, self.batch, self.height, self.width, data),
            Self::from_vec(self.channels - first, self.batch, self.height, self.width, rest),
        )
    }

    /// Global average pooling, returned as a `C x N` matrix (row-major).
    pub fn global_avg_pool(&self) -> Vec<T> {
        let p = self.plane();
        let scale = T::one() / T::from_usize(p).unwrap();
        let mut out = Vec::with_capacity(self.channels * self.batch);
        for c in 0..self.channels {
            for n in 0..self.batch {
                let s: T = self.plane_at(c, n).iter().copied().sum();
                out.push(s * scale);
            }
        }
        out
    }

    /// Adds the gradient of [`FeatureMap::global_avg_pool`] for a `C x N` upstream gradient.
    pub fn add_global_avg_pool_grad(&mut self, grad: &[T]) {
        assert_eq!(grad.len(), self.channels * self.batch);
        let p = self.plane();
        let scale = T::one() / T::from_usize(p).unwrap();
        let batch = self.batch;
        for (idx, chunk) in self.data.chunks_mut(p).enumerate() {
            let g = grad[idx] * scale;
            debug_assert!(idx < self.channels * batch);
            for v in chunk {
                *v += g;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![T::zero(); value.len()];
        Self { name: name.into(), shape, value, grad }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: T) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}
