//! Volumes, the `VOL1` file format, preprocessing and augmentation.

mod augment;
mod io;
mod preprocess;

pub use augment::{augment, flip, rotate90, translate, AugmentationSpec, Axis, Rotation};
pub use io::{decode_volume, encode_volume, read_volume, write_volume};
pub use preprocess::{center_of_mass, clip_intensity, crop_roi, resample_isotropic, ClipRange};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Pet,
    Mask,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Ct => 0,
            Modality::Pet => 1,
            Modality::Mask => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::Ct),
            1 => Ok(Modality::Pet),
            2 => Ok(Modality::Mask),
            t => Err(Error::Format(format!("unknown modality tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
            Modality::Mask => "mask",
        }
    }

    /// One-letter prefix used in feature ids.
    pub fn prefix(self) -> char {
        match self {
            Modality::Ct => 'C',
            Modality::Pet => 'P',
            Modality::Mask => 'M',
        }
    }
}

/// Dense scalar field on a regular grid, stored x-fastest:
/// `index = x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
    modality: Modality,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<f32>, modality: Modality) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dims {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Length { expected: n, found: voxels.len() });
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        if modality == Modality::Mask && voxels.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary);
        }
        Ok(Self { dims, spacing, voxels, modality })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32, modality: Modality) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n], modality)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Number of nonzero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0.0).count()
    }

    /// Replace the voxel array, keeping the geometry. Mask volumes stay
    /// subject to the binary invariant.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, voxels, self.modality)
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { voxels: self.voxels.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Same geometry with a different modality tag.
    pub fn relabel(&self, modality: Modality) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.voxels.clone(), modality)
    }
}
