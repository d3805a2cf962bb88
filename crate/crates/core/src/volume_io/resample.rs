use super::Volume;

/// Trilinear resampling onto a new voxel spacing.
///
/// Output extent per axis is `max(1, round(n·s/t))`. Grids are aligned on
/// the field-of-view centre: output voxel `j` samples input coordinate
/// `(j + ½)·t/s − ½`, clamped to the border voxels.
pub fn resample_trilinear(vol: &Volume, target_spacing: [f32; 3]) -> Volume {
    assert!(
        target_spacing.iter().all(|&t| t > 0.0 && t.is_finite()),
        "target spacing must be positive"
    );
    let dims = vol.dims();
    let spacing = vol.spacing();
    let mut out_dims = [0usize; 3];
    for i in 0..3 {
        let extent = dims[i] as f64 * spacing[i] as f64 / target_spacing[i] as f64;
        out_dims[i] = (extent.round() as usize).max(1);
    }

    // Per-axis (lower index, upper index, upper weight) lookup tables.
    let axis = |i: usize| -> Vec<(usize, usize, f64)> {
        let ratio = target_spacing[i] as f64 / spacing[i] as f64;
        let last = (dims[i] - 1) as f64;
        (0..out_dims[i])
            .map(|j| {
                let c = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(dims[i] - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));

    let src = vol.data();
    let (nx, ny) = (dims[0], dims[1]);
    let at = |x: usize, y: usize, z: usize| src[x + nx * (y + ny * z)] as f64;
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, wz) in &az {
        for &(y0, y1, wy) in &ay {
            for &(x0, x1, wx) in &ax {
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                data.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    Volume::new(out_dims, target_spacing, data).expect("resampled volume is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: [usize; 3], spacing: [f32; 3]) -> Volume {
        let n = dims.iter().product();
        Volume::new(dims, spacing, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn identity_spacing_is_identity() {
        let v = ramp([5, 4, 3], [0.7, 0.7, 6.0]);
        let r = resample_trilinear(&v, [0.7, 0.7, 6.0]);
        assert_eq!(r.dims(), v.dims());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn output_dims_follow_physical_extent() {
        let v = ramp([8, 8, 4], [0.5, 0.5, 3.0]);
        let r = resample_trilinear(&v, [1.0, 1.0, 6.0]);
        assert_eq!(r.dims(), [4, 4, 2]);
        assert_eq!(r.spacing(), [1.0, 1.0, 6.0]);
    }

    #[test]
    fn tiny_extent_keeps_one_voxel() {
        let v = ramp([2, 1, 1], [1.0; 3]);
        assert_eq!(resample_trilinear(&v, [10.0; 3]).dims(), [1, 1, 1]);
    }

    #[test]
    fn constant_stays_constant() {
        let v = Volume::filled([6, 5, 3], [1.0, 1.0, 3.0], 2.5).unwrap();
        let r = resample_trilinear(&v, [0.8, 1.7, 6.0]);
        assert!(r.data().iter().all(|&x| (x - 2.5).abs() < 1e-6));
    }

    #[test]
    fn linear_ramp_is_reproduced_inside() {
        // f(x) = x along axis 0, spacing 1 → 0.5 gives midpoints.
        let data: Vec<f32> = (0..4).map(|i| i as f32).collect();
        let v = Volume::new([4, 1, 1], [1.0; 3], data).unwrap();
        let r = resample_trilinear(&v, [0.5, 1.0, 1.0]);
        assert_eq!(r.dims(), [8, 1, 1]);
        // output j samples (j + .5)/2 - .5, clamped to [0, 3]
        let want = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        for (a, b) in r.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn output_bounded_by_input_range(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..4,
            tx in 0.3f32..3.0, ty in 0.3f32..3.0, tz in 1.0f32..9.0,
            seed in 0u32..1000,
        ) {
            let n = nx * ny * nz;
            let data: Vec<f32> = (0..n).map(|i| (((i as u32).wrapping_mul(2654435761u32) ^ seed) % 1000) as f32 / 100.0 - 5.0).collect();
            let v = Volume::new([nx, ny, nz], [1.0, 1.0, 3.0], data).unwrap();
            let lo = v.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = v.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let r = resample_trilinear(&v, [tx, ty, tz]);
            for &x in r.data() {
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5);
            }
        }
    }
}
