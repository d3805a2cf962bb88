//! Segmentation networks (VNet-T1C, V2Net, V2NetCls), the 3-D ResNet-18
//! progression classifier, and their checkpoint files.

mod layers;
mod resnet;
mod segnet;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, NamedTensor};
use crate::scalar::Scalar;
use crate::tensor::{scale, soft_dice_loss, softmax_cross_entropy, add, Param, Tensor, TensorError};

pub use resnet::ResNet3d;
pub use segnet::{SegNet, SegOutput, CLS_HIDDEN};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {message}")]
    Sidecar { path: PathBuf, message: String },
    #[error("checkpoint holds a {found} network, expected {expected}")]
    ArchMismatch { expected: String, found: Arch },
}

/// Every architecture a checkpoint can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vnet,
    V2net,
    V2netcls,
    #[serde(rename = "resnet18_3d")]
    Resnet18_3d,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Vnet => "vnet",
            Arch::V2net => "v2net",
            Arch::V2netcls => "v2netcls",
            Arch::Resnet18_3d => "resnet18_3d",
        })
    }
}

fn default_base() -> usize {
    8
}
fn default_depth() -> usize {
    4
}
fn default_convs() -> usize {
    2
}
fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}
fn default_true() -> bool {
    true
}
fn default_classes() -> usize {
    4
}
fn default_seg_shape() -> [usize; 3] {
    [48, 48, 16]
}

/// Segmentation architecture hyperparameters. `input_shape` fixes the
/// downsampling strides (and so the shapes of the transposed-conv kernels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegNetConfig {
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_convs")]
    pub convs_per_level: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    #[serde(default = "default_true")]
    pub dual_encoder: bool,
    #[serde(default = "default_true")]
    pub cls_route: bool,
    #[serde(default = "default_classes")]
    pub num_overall_classes: usize,
    #[serde(default = "default_classes")]
    pub num_t_classes: usize,
    #[serde(default = "default_seg_shape")]
    pub input_shape: [usize; 3],
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            base_channels: default_base(),
            depth: default_depth(),
            convs_per_level: default_convs(),
            kernel: default_kernel(),
            dual_encoder: true,
            cls_route: true,
            num_overall_classes: default_classes(),
            num_t_classes: default_classes(),
            input_shape: default_seg_shape(),
        }
    }
}

impl SegNetConfig {
    pub fn for_arch(mut self, arch: Arch) -> Result<Self, NetworkError> {
        (self.dual_encoder, self.cls_route) = match arch {
            Arch::Vnet => (false, false),
            Arch::V2net => (true, false),
            Arch::V2netcls => (true, true),
            Arch::Resnet18_3d => {
                return Err(NetworkError::ConfigInvalid("resnet18_3d is not a segmentation arch".into()))
            }
        };
        Ok(self)
    }

    pub fn arch(&self) -> Result<Arch, NetworkError> {
        match (self.dual_encoder, self.cls_route) {
            (false, false) => Ok(Arch::Vnet),
            (true, false) => Ok(Arch::V2net),
            (true, true) => Ok(Arch::V2netcls),
            (false, true) => Err(NetworkError::ConfigInvalid(
                "the staging route requires the dual encoder".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::ConfigInvalid(m));
        if self.base_channels < 1 {
            return bad("base_channels must be >= 1".into());
        }
        if self.depth < 2 {
            return bad(format!("depth must be >= 2, got {}", self.depth));
        }
        if self.convs_per_level < 1 {
            return bad("convs_per_level must be >= 1".into());
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return bad(format!("kernel {:?} must be odd", self.kernel));
        }
        if self.num_overall_classes < 2 || self.num_t_classes < 2 {
            return bad("stage heads need at least 2 classes".into());
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?}", self.input_shape));
        }
        self.arch()?;
        segnet::level_strides(self).map(|_| ())
    }
}

fn default_in_channels() -> usize {
    3
}
fn default_stem() -> usize {
    16
}
fn default_stages() -> [usize; 4] {
    [2, 2, 2, 2]
}
fn default_crop_shape() -> [usize; 3] {
    [64, 64, 12]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsNetConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    #[serde(default = "default_stages")]
    pub stage_blocks: [usize; 4],
    #[serde(default = "default_crop_shape")]
    pub input_shape: [usize; 3],
    /// Instance norm inside the residual blocks (the stem is always normalized).
    #[serde(default = "default_true")]
    pub block_norm: bool,
}

impl Default for ClsNetConfig {
    fn default() -> Self {
        ClsNetConfig {
            in_channels: default_in_channels(),
            stem_channels: default_stem(),
            stage_blocks: default_stages(),
            input_shape: default_crop_shape(),
            block_norm: true,
        }
    }
}

impl ClsNetConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.stage_blocks != [2, 2, 2, 2] {
            return Err(NetworkError::ConfigInvalid(format!(
                "stage_blocks {:?} is not the ResNet-18 layout [2, 2, 2, 2]",
                self.stage_blocks
            )));
        }
        if self.in_channels < 1 || self.stem_channels < 1 || self.input_shape.contains(&0) {
            return Err(NetworkError::ConfigInvalid(format!("{self:?}")));
        }
        Ok(())
    }
}

pub fn build_v2netcls<T: Scalar>(cfg: &SegNetConfig, seed: u64) -> Result<SegNet<T>, NetworkError> {
    SegNet::new(cfg.clone().for_arch(Arch::V2netcls)?, seed)
}

/// Single-encoder (T1C only) baseline without the staging route.
pub fn build_vnet_t1c<T: Scalar>(cfg: &SegNetConfig, seed: u64) -> Result<SegNet<T>, NetworkError> {
    SegNet::new(cfg.clone().for_arch(Arch::Vnet)?, seed)
}

/// Dual-encoder baseline without the staging route.
pub fn build_v2net<T: Scalar>(cfg: &SegNetConfig, seed: u64) -> Result<SegNet<T>, NetworkError> {
    SegNet::new(cfg.clone().for_arch(Arch::V2net)?, seed)
}

pub fn build_seg<T: Scalar>(arch: Arch, cfg: &SegNetConfig, seed: u64) -> Result<SegNet<T>, NetworkError> {
    SegNet::new(cfg.clone().for_arch(arch)?, seed)
}

pub fn build_resnet18_3d<T: Scalar>(cfg: &ClsNetConfig, seed: u64) -> Result<ResNet3d<T>, NetworkError> {
    ResNet3d::new(cfg.clone(), seed)
}

/// `Dice(prob_map, mask) + λ·(CE(overall) + CE(t))`; the classification
/// terms apply only when the output carries logits. `λ = 0` returns the
/// Dice term itself.
pub fn seg_loss<T: Scalar>(
    out: &SegOutput<T>,
    mask: &Tensor<T>,
    overall: &[usize],
    t: &[usize],
    lambda: f64,
) -> Result<Tensor<T>, TensorError> {
    let dice = soft_dice_loss(&out.prob_map, mask)?;
    match (&out.overall_logits, &out.t_logits) {
        (Some(o), Some(tl)) if lambda != 0.0 => {
            let ce = add(&softmax_cross_entropy(o, overall)?, &softmax_cross_entropy(tl, t)?)?;
            add(&dice, &scale(&ce, lambda)?)
        }
        _ => Ok(dice),
    }
}

/// Sidecar metadata stored next to the weights as `<checkpoint>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: Arch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_config: Option<SegNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_config: Option<ClsNetConfig>,
    /// Decision threshold frozen on validation (classifier only).
    #[serde(default, with = "crate::jsonfloat::option", skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".json");
    PathBuf::from(s)
}

fn params_to_named<T: Scalar>(params: &[Param<T>]) -> Vec<NamedTensor<T>> {
    params
        .iter()
        .map(|p| NamedTensor {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            data: p.value().to_vec(),
        })
        .collect()
}

fn assign_params<T: Scalar>(params: &[Param<T>], stored: Vec<NamedTensor<T>>) -> Result<(), NetworkError> {
    if stored.len() != params.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors for a network with {} parameters",
            stored.len(),
            params.len()
        ))
        .into());
    }
    for (p, t) in params.iter().zip(stored) {
        if p.name() != t.name || p.shape() != t.shape.as_slice() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} {:?} does not match parameter {} {:?}",
                t.name,
                t.shape,
                p.name(),
                p.shape()
            ))
            .into());
        }
        p.set_value(t.data)?;
    }
    Ok(())
}

fn write_checkpoint<T: Scalar>(path: &Path, params: &[Param<T>], meta: &CheckpointMeta) -> Result<(), NetworkError> {
    checkpoint::save(path, &params_to_named(params))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    std::fs::write(&side, json + "\n").map_err(|e| NetworkError::Sidecar {
        path: side,
        message: e.to_string(),
    })
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta, NetworkError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| NetworkError::Sidecar {
        path: side.clone(),
        message: e.to_string(),
    })?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| NetworkError::Sidecar {
        path: side.clone(),
        message: e.to_string(),
    })?;
    if meta.format_version != checkpoint::FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: meta.format_version,
            expected: checkpoint::FORMAT_VERSION,
        }
        .into());
    }
    Ok(meta)
}

impl<T: Scalar> SegNet<T> {
    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let meta = CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            arch: self.arch(),
            seg_config: Some(self.config().clone()),
            cls_config: None,
            threshold: None,
        };
        write_checkpoint(path, self.params(), &meta)
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        let meta = read_meta(path)?;
        let cfg = match (meta.arch, meta.seg_config) {
            (Arch::Resnet18_3d, _) | (_, None) => {
                return Err(NetworkError::ArchMismatch {
                    expected: "a segmentation network".into(),
                    found: meta.arch,
                })
            }
            (_, Some(cfg)) => cfg,
        };
        if cfg.arch()? != meta.arch {
            return Err(NetworkError::ArchMismatch {
                expected: cfg.arch()?.to_string(),
                found: meta.arch,
            });
        }
        let net = SegNet::new(cfg, 0)?;
        assign_params(net.params(), checkpoint::load(path)?)?;
        Ok(net)
    }
}

impl<T: Scalar> ResNet3d<T> {
    pub fn save(&self, path: &Path, threshold: Option<f64>) -> Result<(), NetworkError> {
        let meta = CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            arch: Arch::Resnet18_3d,
            seg_config: None,
            cls_config: Some(self.config().clone()),
            threshold,
        };
        write_checkpoint(path, self.params(), &meta)
    }

    /// The network and the threshold stored with it.
    pub fn load(path: &Path) -> Result<(Self, Option<f64>), NetworkError> {
        let meta = read_meta(path)?;
        let Some(cfg) = meta.cls_config.filter(|_| meta.arch == Arch::Resnet18_3d) else {
            return Err(NetworkError::ArchMismatch {
                expected: Arch::Resnet18_3d.to_string(),
                found: meta.arch,
            });
        };
        let net = ResNet3d::new(cfg, 0)?;
        assign_params(net.params(), checkpoint::load(path)?)?;
        Ok((net, meta.threshold))
    }
}
