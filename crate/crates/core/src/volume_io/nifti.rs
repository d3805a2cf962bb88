//! Single-file NIfTI-1 (`.nii`), little-endian, uncompressed. Orientation
//! matrices are neither read nor written.

use std::fs;
use std::path::Path;

use super::{Volume, VolumeError};

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_VOX_OFFSET: usize = 352;

const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

// byte offsets inside the 348-byte header
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;

const NIFTI_UNITS_MM: u8 = 2;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let malformed = |reason: String| VolumeError::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };

    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(malformed(format!("file is only {} bytes", bytes.len())));
    }
    let sizeof_hdr = i32_at(&bytes, 0);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        return Err(malformed(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(malformed("magic is not \"n+1\\0\"".into()));
    }
    let ndim = i16_at(&bytes, OFF_DIM);
    if ndim != 3 {
        return Err(malformed(format!("dim[0] = {ndim}, expected 3")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let v = i16_at(&bytes, OFF_DIM + 2 * (i + 1));
        if v < 1 {
            return Err(malformed(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    let mut spacing = [0f32; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(&bytes, OFF_PIXDIM + 4 * (i + 1));
        if !(v > 0.0 && v.is_finite()) {
            return Err(malformed(format!("pixdim[{}] = {v}", i + 1)));
        }
        *s = v;
    }

    let datatype = i16_at(&bytes, OFF_DATATYPE);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(VolumeError::UnsupportedDatatype {
                path: path.to_path_buf(),
                code,
            })
        }
    };

    let vox_offset = f32_at(&bytes, OFF_VOX_OFFSET);
    if !(vox_offset >= NIFTI_HEADER_SIZE as f32) || vox_offset.fract() != 0.0 {
        return Err(malformed(format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = dims[0] * dims[1] * dims[2];
    let expected = n * width;
    let found = bytes.len().saturating_sub(start);
    if found < expected {
        return Err(VolumeError::TruncatedData {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let payload = &bytes[start..start + expected];

    let slope = f32_at(&bytes, OFF_SCL_SLOPE);
    let inter = f32_at(&bytes, OFF_SCL_INTER);
    let scale = slope != 0.0 && slope.is_finite();

    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&v| v as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if scale {
        for v in &mut data {
            *v = slope * *v + inter;
        }
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(VolumeError::NonFiniteVoxel {
            path: path.to_path_buf(),
            index,
        });
    }
    Volume::new(dims, spacing, data)
}

/// Encode as float32 NIfTI-1 with `scl_slope = 0` (no scaling), so reading
/// the file back reproduces the voxels bit-for-bit.
pub fn encode_nifti(vol: &Volume) -> Result<Vec<u8>, VolumeError> {
    let mut hdr = vec![0u8; NIFTI_VOX_OFFSET];
    hdr[0..4].copy_from_slice(&(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    let mut put_i16 = |off: usize, v: i16| hdr[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let dims = vol.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for i in 0..3 {
        dim[i + 1] = i16::try_from(dims[i]).map_err(|_| {
            VolumeError::Invalid(format!("dimension {} exceeds the NIfTI-1 limit", dims[i]))
        })?;
    }
    for (i, d) in dim.iter().enumerate() {
        put_i16(OFF_DIM + 2 * i, *d);
    }
    put_i16(OFF_DATATYPE, DT_FLOAT32);
    put_i16(OFF_BITPIX, 32);
    let mut put_f32 = |off: usize, v: f32| hdr[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let sp = vol.spacing();
    put_f32(OFF_PIXDIM, 1.0);
    for i in 0..3 {
        put_f32(OFF_PIXDIM + 4 * (i + 1), sp[i]);
    }
    put_f32(OFF_VOX_OFFSET, NIFTI_VOX_OFFSET as f32);
    put_f32(OFF_SCL_SLOPE, 0.0);
    put_f32(OFF_SCL_INTER, 0.0);
    hdr[OFF_XYZT_UNITS] = NIFTI_UNITS_MM;
    hdr[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);

    hdr.reserve(vol.len() * 4);
    for v in vol.data() {
        hdr.extend_from_slice(&v.to_le_bytes());
    }
    Ok(hdr)
}

pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    let bytes = encode_nifti(vol)?;
    fs::write(path, bytes).map_err(|source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    })
}
