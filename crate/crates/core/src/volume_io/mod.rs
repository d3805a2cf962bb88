//! Volumes, NIfTI-1 I/O, resampling, intensity normalization and dataset
//! manifests.
//!
//! Spacing is always millimetres per voxel. The working resolution of the
//! pipeline is [`WORKING_SPACING_MM`].

mod manifest;
mod nifti;
mod resample;

use std::path::PathBuf;

use thiserror::Error;

pub use manifest::{load_manifest, write_manifest, StudyRecord};
pub use nifti::{read_nifti, write_nifti, NIFTI_HEADER_SIZE, NIFTI_VOX_OFFSET};
pub use resample::resample_trilinear;

/// In-plane 1 mm, 6 mm slices.
pub const WORKING_SPACING_MM: [f32; 3] = [1.0, 1.0, 6.0];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: malformed NIfTI header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path}: unsupported NIfTI datatype {code}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },
    #[error("{path}: payload truncated, expected {expected} bytes, found {found}")]
    TruncatedData {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: voxel {index} is not finite")]
    NonFiniteVoxel { path: PathBuf, index: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate case_id {0:?}")]
    DuplicateCaseId(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
}

/// Dense scalar grid indexed `(x, y, z)` with `x` varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be >= 1")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(VolumeError::Invalid(format!(
                "data length {} != {n} voxels",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid(format!("voxel {i} is not finite")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: f32) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }

    /// Voxel values copied into `(x, y, z)` row-major order (`z` fastest),
    /// the spatial layout of network tensors.
    pub fn to_xyz_major(&self) -> Vec<f32> {
        let [nx, ny, nz] = self.dims;
        let mut out = vec![0.0; self.data.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out[(x * ny + y) * nz + z] = self.data[x + nx * (y + ny * z)];
                }
            }
        }
        out
    }

    /// Inverse of [`Volume::to_xyz_major`].
    pub fn from_xyz_major(
        dims: [usize; 3],
        spacing: [f32; 3],
        values: &[f32],
    ) -> Result<Self, VolumeError> {
        let [nx, ny, nz] = dims;
        if values.len() != nx * ny * nz {
            return Err(VolumeError::Invalid(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        let mut data = vec![0.0; values.len()];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    data[x + nx * (y + ny * z)] = values[(x * ny + y) * nz + z];
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        Self::new(
            self.dims,
            self.spacing,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Z-score over all voxels with population standard deviation. A volume
/// whose standard deviation is below `1e-8` maps to all zeros.
pub fn normalize_zscore(vol: &Volume) -> Volume {
    let n = vol.data.len() as f64;
    let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let data = if std < 1e-8 {
        vec![0.0; vol.data.len()]
    } else {
        vol.data
            .iter()
            .map(|&v| ((v as f64 - mean) / std) as f32)
            .collect()
    };
    Volume {
        dims: vol.dims,
        spacing: vol.spacing,
        data,
    }
}

/// Resample to the working spacing and z-score normalize.
pub fn preprocess(vol: &Volume) -> Volume {
    let resampled = if vol.spacing == WORKING_SPACING_MM {
        vol.clone()
    } else {
        resample_trilinear(vol, WORKING_SPACING_MM)
    };
    normalize_zscore(&resampled)
}

/// Resample a binary mask to the working spacing, re-binarized at 0.5.
pub fn preprocess_mask(mask: &Volume) -> Volume {
    if mask.spacing == WORKING_SPACING_MM {
        return mask.clone();
    }
    let r = resample_trilinear(mask, WORKING_SPACING_MM);
    let data = r.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    Volume { data, ..r }
}
