use std::collections::VecDeque;

use super::PipelineError;
use crate::tensor::Tensor;
use crate::volume_io::Volume;

/// Classifier input size in voxels.
pub const CROP_SIZE: [usize; 3] = [64, 64, 12];

/// Largest 26-connected foreground component (voxels `> 0.5`). Ties go to
/// the component containing the smallest linear index.
pub fn largest_component(mask: &Volume) -> Volume {
    let [nx, ny, nz] = mask.dims();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v > 0.5).collect();
    let mut label = vec![0u32; fg.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..fg.len() {
        if !fg[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for dz in -1i64..=1 {
                let zz = z as i64 + dz;
                if zz < 0 || zz >= nz as i64 {
                    continue;
                }
                for dy in -1i64..=1 {
                    let yy = y as i64 + dy;
                    if yy < 0 || yy >= ny as i64 {
                        continue;
                    }
                    for dx in -1i64..=1 {
                        let xx = x as i64 + dx;
                        if xx < 0 || xx >= nx as i64 {
                            continue;
                        }
                        let j = xx as usize + nx * (yy as usize + ny * zz as usize);
                        if fg[j] && label[j] == 0 {
                            label[j] = next;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let data = label
        .iter()
        .map(|&l| if l != 0 && l == best.0 { 1.0 } else { 0.0 })
        .collect();
    Volume::new(mask.dims(), mask.spacing(), data).expect("same geometry")
}

/// Three-channel classifier input cut from the source volumes.
#[derive(Debug, Clone)]
pub struct CropVolume {
    /// `[3, sx, sy, sz]`: T1C, T2, mask.
    pub data: Tensor<f32>,
    /// Voxel offset of the crop window in the source volume.
    pub origin: [usize; 3],
    pub fallback_used: bool,
}

/// Window of `size` centered on the bounding box of the largest mask
/// component, clamped to the volume and zero-padded where the volume is
/// smaller than the window. An empty mask falls back to the volume center.
pub fn extract_crop(t1c: &Volume, t2: &Volume, mask: &Volume, size: [usize; 3]) -> Result<CropVolume, PipelineError> {
    let dims = t1c.dims();
    if t2.dims() != dims || mask.dims() != dims {
        return Err(PipelineError::ShapeMismatch(format!(
            "crop inputs t1c {:?}, t2 {:?}, mask {:?}",
            dims,
            t2.dims(),
            mask.dims()
        )));
    }
    if size.contains(&0) {
        return Err(PipelineError::InvalidConfig(format!("crop size {size:?}")));
    }
    let comp = largest_component(mask);
    let (center, fallback_used) = match bounding_box(&comp) {
        Some((lo, hi)) => ([0, 1, 2].map(|i| (lo[i] + hi[i] + 1) / 2), false),
        None => (dims.map(|n| n / 2), true),
    };
    let origin = crop_origin(center, dims, size);

    let [sx, sy, sz] = size;
    let plane = sx * sy * sz;
    let mut data = vec![0.0f32; 3 * plane];
    for x in 0..sx.min(dims[0] - origin[0]) {
        for y in 0..sy.min(dims[1] - origin[1]) {
            for z in 0..sz.min(dims[2] - origin[2]) {
                let src = t1c.index(origin[0] + x, origin[1] + y, origin[2] + z);
                let dst = (x * sy + y) * sz + z;
                data[dst] = t1c.data()[src];
                data[plane + dst] = t2.data()[src];
                data[2 * plane + dst] = comp.data()[src];
            }
        }
    }
    Ok(CropVolume {
        data: Tensor::from_vec(&[3, sx, sy, sz], data).expect("length matches"),
        origin,
        fallback_used,
    })
}

/// `clamp(center − size/2, 0, max(0, dim − size))` per axis.
pub fn crop_origin(center: [usize; 3], dims: [usize; 3], size: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|i| {
        let hi = dims[i].saturating_sub(size[i]);
        center[i].saturating_sub(size[i] / 2).min(hi)
    })
}

/// Inclusive `(min, max)` voxel corners of the foreground.
pub fn bounding_box(mask: &Volume) -> Option<([usize; 3], [usize; 3])> {
    let [nx, ny, nz] = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0; 3];
    let mut any = false;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) > 0.5 {
                    any = true;
                    for (i, v) in [x, y, z].into_iter().enumerate() {
                        lo[i] = lo[i].min(v);
                        hi[i] = hi[i].max(v);
                    }
                }
            }
        }
    }
    any.then_some((lo, hi))
}
