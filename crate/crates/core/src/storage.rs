//! On-disk dataset layout: `<root>/<split>/<volume_id>/{image,label,meta}`.
//!
//! `image` holds the intensities as little-endian `f32` and `label` one byte
//! per voxel, both in C order over `meta.shape`. `meta` is JSON with the
//! shape, the spacing in mm and the class count.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_intensity, volume_to_slices, DatasetSplit, VolumeRecord};
use crate::error::{invalid, CoreError, Result};
use crate::synthetic::{generate_synthetic_volumes, split_sizes};

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub class_count: usize,
}

pub fn write_volume(dir: &Path, volume: &VolumeRecord, class_count: usize) -> Result<()> {
    volume.validate(class_count)?;
    fs::create_dir_all(dir)?;
    let s = volume.intensities.shape();
    let meta = VolumeMeta { shape: [s[0], s[1], s[2]], spacing: volume.spacing, class_count };
    let mut image = Vec::with_capacity(volume.intensities.len() * 4);
    for v in volume.intensities.iter() {
        image.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join("image"), image)?;
    fs::write(dir.join("label"), volume.labels.iter().copied().collect::<Vec<u8>>())?;
    fs::write(dir.join("meta"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn read_volume(dir: &Path) -> Result<(VolumeRecord, usize)> {
    let volume_id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid(format!("{} has no usable directory name", dir.display())))?
        .to_string();
    let meta: VolumeMeta = serde_json::from_slice(&fs::read(dir.join("meta"))?)?;
    let n: usize = meta.shape.iter().product();
    let image = fs::read(dir.join("image"))?;
    let label = fs::read(dir.join("label"))?;
    if image.len() != n * 4 || label.len() != n {
        return Err(CoreError::Integrity(format!("{volume_id}: array sizes do not match shape {:?}", meta.shape)));
    }
    let values = image.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let shape = (meta.shape[0], meta.shape[1], meta.shape[2]);
    let volume = VolumeRecord {
        volume_id,
        intensities: Array3::from_shape_vec(shape, values).map_err(|e| invalid(e.to_string()))?,
        labels: Array3::from_shape_vec(shape, label).map_err(|e| invalid(e.to_string()))?,
        spacing: meta.spacing,
    };
    volume.validate(meta.class_count)?;
    Ok((volume, meta.class_count))
}

/// Reads every volume of one split directory, sorted by volume id. A missing
/// split directory yields no volumes.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<(VolumeRecord, usize)>> {
    let dir = root.join(split);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<_> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_volume(p)).collect()
}

/// Loads and preprocesses a dataset root: percentile normalization, isotropic
/// resampling to `target_spacing`, slicing and resizing to `target_size`.
pub fn load_dataset(root: &Path, target_spacing: f64, target_size: (usize, usize)) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(invalid(format!("dataset root {} does not exist", root.display())));
    }
    let mut split = DatasetSplit::default();
    let mut class_count = None;
    for name in SPLITS {
        for (volume, c) in read_split(root, name)? {
            if *class_count.get_or_insert(c) != c {
                return Err(invalid(format!("{}: class count {c} differs from the rest of the dataset", volume.volume_id)));
            }
            let slices = volume_to_slices(&normalize_intensity(&volume)?, target_spacing, target_size)?;
            match name {
                "train" => split.train.extend(slices),
                "validation" => split.validation.extend(slices),
                _ => split.test.extend(slices),
            }
        }
    }
    split.class_count = class_count.ok_or_else(|| invalid(format!("no volumes under {}", root.display())))?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(invalid("dataset needs at least one train and one test volume"));
    }
    split.validate()?;
    Ok(split)
}

/// Writes a synthetic dataset in the standard layout, split about 70/10/20 by volume.
pub fn write_synthetic_dataset(
    root: &Path,
    seed: u64,
    n_volumes: usize,
    slices_per_volume: usize,
    size: (usize, usize),
    class_count: usize,
) -> Result<()> {
    let (n_train, n_val, _) = split_sizes(n_volumes)?;
    let volumes = generate_synthetic_volumes(seed, n_volumes, slices_per_volume, size, class_count)?;
    for (i, v) in volumes.iter().enumerate() {
        let split = if i < n_train {
            "train"
        } else if i < n_train + n_val {
            "validation"
        } else {
            "test"
        };
        write_volume(&root.join(split).join(&v.volume_id), v, class_count)?;
    }
    Ok(())
}
