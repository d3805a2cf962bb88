//! Synthetic ellipsoid "tumor" phantoms with analytic ground truth, stage
//! labels and a planted progression signal.
//!
//! Progression is drawn from
//! `p = logistic(a_vol·(volume_cc − v0) + a_het·heterogeneity + bias)`
//! where `volume_cc` is the analytic ellipsoid volume and `heterogeneity`
//! is the volume fraction of the dim core inside the enhancing rim.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_rng, Stream};
use crate::volume_io::{write_manifest, write_nifti, StudyRecord, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f32; 3],
    pub noise_sigma: f64,
    /// Per-axis semi-axis range in mm.
    pub semi_axis_min_mm: [f64; 3],
    pub semi_axis_max_mm: [f64; 3],
    /// Core semi-axes as a fraction of the tumor's.
    pub core_ratio_range: [f64; 2],
    pub t1c_rim: f64,
    pub t1c_core: f64,
    pub t2_tumor: f64,
    pub a_vol: f64,
    pub v0: f64,
    pub a_het: f64,
    pub bias: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 16],
            spacing: [1.0, 1.0, 6.0],
            noise_sigma: 0.1,
            semi_axis_min_mm: [5.0, 5.0, 9.0],
            semi_axis_max_mm: [12.0, 12.0, 24.0],
            core_ratio_range: [0.3, 0.85],
            t1c_rim: 1.0,
            t1c_core: 0.6,
            t2_tumor: 0.9,
            a_vol: 2.0,
            v0: 6.0,
            a_het: 8.0,
            bias: -2.0,
            seed: 0,
        }
    }
}

/// Minimum free voxels between the ellipsoid's bounding box and the
/// volume border.
pub const MARGIN_VOXELS: usize = 2;

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::ConfigInvalid(m));
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma));
        }
        let [r0, r1] = self.core_ratio_range;
        if !(0.0 < r0 && r0 <= r1 && r1 < 1.0) {
            return bad(format!("core_ratio_range {:?} must satisfy 0 < lo <= hi < 1", self.core_ratio_range));
        }
        for i in 0..3 {
            let (lo, hi) = (self.semi_axis_min_mm[i], self.semi_axis_max_mm[i]);
            if !(self.spacing[i] > 0.0) {
                return bad(format!("spacing {:?} must be positive", self.spacing));
            }
            if !(0.0 < lo && lo <= hi && hi.is_finite()) {
                return bad(format!("semi-axis range [{lo}, {hi}] on axis {i} must satisfy 0 < min <= max"));
            }
            let need = 2 * (self.max_extent_voxels(i) + MARGIN_VOXELS) + 1;
            if self.dims[i] < need {
                return bad(format!(
                    "dims {:?}: axis {i} needs at least {need} voxels for semi-axis {hi} mm at spacing {}",
                    self.dims, self.spacing[i]
                ));
            }
        }
        for (name, v) in [
            ("t1c_rim", self.t1c_rim),
            ("t1c_core", self.t1c_core),
            ("t2_tumor", self.t2_tumor),
            ("a_vol", self.a_vol),
            ("v0", self.v0),
            ("a_het", self.a_het),
            ("bias", self.bias),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    fn max_extent_voxels(&self, axis: usize) -> usize {
        (self.semi_axis_max_mm[axis] / self.spacing[axis] as f64).ceil() as usize
    }

    /// Equivalent-diameter quartile thresholds (mm) of the semi-axis
    /// distribution, evaluated on a 16³ grid of cell midpoints.
    pub fn t_stage_thresholds(&self) -> [f64; 3] {
        const G: usize = 16;
        let mid = |i: usize, k: usize| {
            let (lo, hi) = (self.semi_axis_min_mm[i], self.semi_axis_max_mm[i]);
            lo + (hi - lo) * (k as f64 + 0.5) / G as f64
        };
        let mut d = Vec::with_capacity(G * G * G);
        for i in 0..G {
            for j in 0..G {
                for k in 0..G {
                    d.push(equivalent_diameter([mid(0, i), mid(1, j), mid(2, k)]));
                }
            }
        }
        d.sort_by(f64::total_cmp);
        let q = |f: f64| crate::metrics::quantile_sorted(&d, f);
        [q(0.25), q(0.5), q(0.75)]
    }
}

/// Diameter of the sphere with the ellipsoid's volume.
pub fn equivalent_diameter(semi_axes_mm: [f64; 3]) -> f64 {
    2.0 * (semi_axes_mm[0] * semi_axes_mm[1] * semi_axes_mm[2]).cbrt()
}

/// Ground truth behind one generated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseTruth {
    /// Voxel coordinates of the ellipsoid center.
    pub center: [f64; 3],
    pub semi_axes_mm: [f64; 3],
    pub core_ratio: f64,
    pub volume_cc: f64,
    pub heterogeneity: f64,
    pub p_progression: f64,
}

pub struct PhantomCase {
    pub t1c: Volume,
    pub t2: Volume,
    pub mask: Volume,
    pub record: StudyRecord,
    pub truth: CaseTruth,
}

pub fn case_id(index: u64) -> String {
    format!("case{index:04}")
}

/// Normalized squared radius `Σ ((v_i − c_i)·s_i / a_i)²` of voxel `v`.
pub fn ellipsoid_radius2(v: [usize; 3], center: [f64; 3], semi_axes_mm: [f64; 3], spacing: [f32; 3]) -> f64 {
    (0..3)
        .map(|i| {
            let d = (v[i] as f64 - center[i]) * spacing[i] as f64 / semi_axes_mm[i];
            d * d
        })
        .sum()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PhantomConfig {
    /// Progression probability for a tumor of the given volume and
    /// heterogeneity.
    pub fn progression_probability(&self, volume_cc: f64, heterogeneity: f64) -> f64 {
        logistic(self.a_vol * (volume_cc - self.v0) + self.a_het * heterogeneity + self.bias)
    }
}

/// Case `case_seed`, a pure function of `(cfg, case_seed)`. File
/// references in the record are the names [`generate_dataset`] writes.
pub fn generate_case(cfg: &PhantomConfig, case_seed: u64) -> Result<PhantomCase, PhantomError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Phantom, case_seed);
    let mut semi = [0.0; 3];
    for (i, s) in semi.iter_mut().enumerate() {
        let (lo, hi) = (cfg.semi_axis_min_mm[i], cfg.semi_axis_max_mm[i]);
        *s = if lo == hi { lo } else { rng.gen_range(lo..hi) };
    }
    let mut center = [0.0; 3];
    for (i, c) in center.iter_mut().enumerate() {
        let ext = (semi[i] / cfg.spacing[i] as f64).ceil() + MARGIN_VOXELS as f64;
        let (lo, hi) = (ext, (cfg.dims[i] - 1) as f64 - ext);
        *c = if lo >= hi { lo } else { rng.gen_range(lo..hi) };
    }
    let [r0, r1] = cfg.core_ratio_range;
    let core_ratio = if r0 == r1 { r0 } else { rng.gen_range(r0..r1) };
    let volume_cc = 4.0 / 3.0 * PI * semi[0] * semi[1] * semi[2] / 1000.0;
    let heterogeneity = core_ratio.powi(3);
    let p = cfg.progression_probability(volume_cc, heterogeneity);
    let progression = (rng.gen::<f64>() < p) as u8;

    let [nx, ny, nz] = cfg.dims;
    let n = nx * ny * nz;
    let mut t1c = vec![0.0f32; n];
    let mut t2 = vec![0.0f32; n];
    let mut mask = vec![0.0f32; n];
    let core2 = core_ratio * core_ratio;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let r2 = ellipsoid_radius2([x, y, z], center, semi, cfg.spacing);
                if r2 <= 1.0 {
                    let i = x + nx * (y + ny * z);
                    mask[i] = 1.0;
                    t1c[i] = if r2 <= core2 { cfg.t1c_core } else { cfg.t1c_rim } as f32;
                    t2[i] = cfg.t2_tumor as f32;
                }
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in t1c.iter_mut().chain(t2.iter_mut()) {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let thr = cfg.t_stage_thresholds();
    let d = equivalent_diameter(semi);
    let t_stage = thr.iter().filter(|&&t| d > t).count() as u8;
    let id = case_id(case_seed);
    let record = StudyRecord {
        t1c_path: PathBuf::from(format!("{id}_t1c.nii")),
        t2_path: PathBuf::from(format!("{id}_t2.nii")),
        mask_path: Some(PathBuf::from(format!("{id}_mask.nii"))),
        overall_stage: Some(t_stage),
        t_stage: Some(t_stage),
        progression_3yr: progression,
        split_tag: None,
        case_id: id,
    };
    let vol = |data| Volume::new(cfg.dims, cfg.spacing, data);
    Ok(PhantomCase {
        t1c: vol(t1c)?,
        t2: vol(t2)?,
        mask: vol(mask)?,
        record,
        truth: CaseTruth {
            center,
            semi_axes_mm: semi,
            core_ratio,
            volume_cc,
            heterogeneity,
            p_progression: p,
        },
    })
}

#[derive(Debug, Clone)]
pub struct PhantomDataset {
    pub manifest_path: PathBuf,
    pub records: Vec<StudyRecord>,
    /// Fraction of cases labelled as progressing.
    pub prevalence: f64,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes cases `0..n` as NIfTI files plus `manifest.jsonl` (relative
/// paths) into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize, out_dir: &Path) -> Result<PhantomDataset, PhantomError> {
    cfg.validate()?;
    if n == 0 {
        return Err(PhantomError::ConfigInvalid("n must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| VolumeError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut rel = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let case = generate_case(cfg, i)?;
        let r = case.record;
        write_nifti(&case.t1c, out_dir.join(&r.t1c_path))?;
        write_nifti(&case.t2, out_dir.join(&r.t2_path))?;
        write_nifti(&case.mask, out_dir.join(r.mask_path.as_ref().unwrap()))?;
        let mut abs = r.clone();
        abs.t1c_path = out_dir.join(&r.t1c_path);
        abs.t2_path = out_dir.join(&r.t2_path);
        abs.mask_path = r.mask_path.as_ref().map(|p| out_dir.join(p));
        records.push(abs);
        rel.push(r);
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    write_manifest(&rel, &manifest_path)?;
    let prevalence = records.iter().filter(|r| r.progression_3yr == 1).count() as f64 / n as f64;
    Ok(PhantomDataset {
        manifest_path,
        records,
        prevalence,
    })
}
