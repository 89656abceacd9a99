//! Volumes, labels, synthetic phantoms, preprocessing, and file formats.
//!
//! Arrays are indexed `(z, y, x)` with `x` fastest; the extents field is
//! `[D, H, W]` and spacing/origin follow the same `(z, y, x)` axis order.
//! World-space points, like label centroids, are `(x, y, z)` millimeter
//! triples; [`Volume::world_to_voxel`] and [`Volume::voxel_to_world`] handle
//! the axis flip in one place.

mod io;
mod phantom;
mod prep;

pub use io::{
    read_dataset, read_labels, read_volume, write_dataset, write_labels, write_volume,
};
pub use phantom::{generate_phantom, PhantomSpec};
pub use prep::{
    crop_at, crop_target_for, prepare_scan, preprocess, random_crop, random_crop_biased,
    resample_isotropic, sample_crops, TARGET_SPACING_MM,
};

use thiserror::Error;

use crate::loss::CropTarget;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> DataError {
    DataError::Invalid(msg.into())
}

/// Vertebra class names in anatomical order: 7 cervical, 12 thoracic,
/// 5 lumbar, 2 sacral.
pub const CLASS_NAMES: [&str; 26] = [
    "C1", "C2", "C3", "C4", "C5", "C6", "C7", "T1", "T2", "T3", "T4", "T5", "T6", "T7", "T8",
    "T9", "T10", "T11", "T12", "L1", "L2", "L3", "L4", "L5", "S1", "S2",
];

/// Index of a class name within [`CLASS_NAMES`].
pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&n| n == name)
}

/// Name of class `idx`; panics past the 26-class space.
pub fn class_name(idx: usize) -> &'static str {
    CLASS_NAMES[idx]
}

/// Anatomical region of the spine; the four regions partition the 26
/// classes as 7 cervical / 12 thoracic / 5 lumbar / 2 sacral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Cervical,
    Thoracic,
    Lumbar,
    Sacral,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::Cervical, Region::Thoracic, Region::Lumbar, Region::Sacral];

    pub fn of(class: usize) -> Region {
        match class {
            0..=6 => Region::Cervical,
            7..=18 => Region::Thoracic,
            19..=23 => Region::Lumbar,
            _ => Region::Sacral,
        }
    }

    /// Short column label used in metrics tables.
    pub fn tag(self) -> &'static str {
        match self {
            Region::Cervical => "Cer",
            Region::Thoracic => "Tho",
            Region::Lumbar => "Lum",
            Region::Sacral => "Sac",
        }
    }
}

/// A scalar 3-d image on a regular grid, plus the geometry needed to map
/// between voxel indices and world millimeters. Intensities are on a
/// Hounsfield-like scale before preprocessing and z-scored after.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    /// `[D, H, W]` voxel counts for the `(z, y, x)` axes.
    pub extents: [usize; 3],
    /// Millimeters per voxel step, `(z, y, x)` order.
    pub spacing: [f64; 3],
    /// World millimeters of the center of voxel `(0, 0, 0)`, `(z, y, x)` order.
    pub origin: [f64; 3],
    /// Intensities, `x` fastest.
    pub data: Vec<f32>,
    /// `(mean, std)` recorded by preprocessing, if it ran.
    pub norm: Option<(f64, f64)>,
}

impl Volume {
    pub fn new(
        extents: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Volume, DataError> {
        if extents.iter().any(|&e| e == 0) {
            return Err(invalid(format!("volume extents must be nonzero, got {extents:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("voxel spacing must be positive, got {spacing:?}")));
        }
        let numel = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| invalid(format!("extents {extents:?} overflow the voxel count")))?;
        if numel != data.len() {
            return Err(invalid(format!(
                "extents {extents:?} imply {numel} voxels, got {}",
                data.len()
            )));
        }
        Ok(Volume { extents, spacing, origin, data, norm: None })
    }

    /// Volume of constant intensity.
    pub fn filled(extents: [usize; 3], spacing: [f64; 3], origin: [f64; 3], value: f32) -> Volume {
        let numel = extents[0] * extents[1] * extents[2];
        Volume { extents, spacing, origin, data: vec![value; numel], norm: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extents[1] + y) * self.extents[2] + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// World millimeters `(x, y, z)` of a continuous voxel coordinate
    /// `(x, y, z)`.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        [
            self.origin[2] + v[0] * self.spacing[2],
            self.origin[1] + v[1] * self.spacing[1],
            self.origin[0] + v[2] * self.spacing[0],
        ]
    }

    /// Continuous voxel coordinate `(x, y, z)` of a world point `(x, y, z)`.
    pub fn world_to_voxel(&self, w: [f64; 3]) -> [f64; 3] {
        [
            (w[0] - self.origin[2]) / self.spacing[2],
            (w[1] - self.origin[1]) / self.spacing[1],
            (w[2] - self.origin[0]) / self.spacing[0],
        ]
    }

    /// Whether a world point falls between the first and last voxel centers
    /// on every axis.
    pub fn contains_world(&self, w: [f64; 3]) -> bool {
        let v = self.world_to_voxel(w);
        let ext = [self.extents[2], self.extents[1], self.extents[0]];
        v.iter().zip(ext).all(|(&c, e)| c >= 0.0 && c <= (e - 1) as f64)
    }
}

/// One labeled vertebra: class index into [`CLASS_NAMES`] and its centroid
/// in world millimeters, `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub class: usize,
    pub world: [f64; 3],
}

/// The labeled vertebrae of one scan. Class indices are unique; order is
/// preserved as given.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    labels: Vec<Label>,
}

impl LabelSet {
    pub fn new(labels: Vec<Label>) -> Result<LabelSet, DataError> {
        let mut seen = [false; CLASS_NAMES.len()];
        for l in &labels {
            if l.class >= CLASS_NAMES.len() {
                return Err(invalid(format!("class index {} out of range", l.class)));
            }
            if seen[l.class] {
                return Err(invalid(format!("duplicate label for class {}", class_name(l.class))));
            }
            seen[l.class] = true;
            if l.world.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!(
                    "label {} has non-finite centroid {:?}",
                    class_name(l.class),
                    l.world
                )));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Label> {
        self.labels.iter().find(|l| l.class == class)
    }

    /// Errors unless every centroid lies inside the volume bounds.
    pub fn validate_within(&self, vol: &Volume) -> Result<(), DataError> {
        for l in &self.labels {
            if !vol.contains_world(l.world) {
                return Err(invalid(format!(
                    "label {} at {:?} mm lies outside the volume",
                    class_name(l.class),
                    l.world
                )));
            }
        }
        Ok(())
    }
}

/// A training sample: a cropped volume and its supervision.
#[derive(Debug, Clone)]
pub struct Crop {
    pub volume: Volume,
    pub target: CropTarget,
}
