//! Dataset splitting, the segmentation and classification training loops,
//! mask-driven crop extraction and two-stage prediction.

mod crop;
mod predict;
mod split;
mod train;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::metrics::MetricsError;
use crate::networks::NetworkError;
use crate::tensor::TensorError;
use crate::volume_io::VolumeError;

pub use crop::{bounding_box, crop_origin, extract_crop, largest_component, CropVolume, CROP_SIZE};
pub use predict::{predict, segment, Prediction, TwoStageModel};
pub use split::{split_dataset, stratum_val_counts};
pub use train::{
    class_weights, train_classifier, train_segmentation, ClsTrainOutcome, SegTrainOutcome,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("case {case_id}: no ground-truth mask")]
    MissingMask { case_id: String },
    #[error("case {case_id}: missing {field}")]
    MissingLabel { case_id: String, field: &'static str },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    DivergedLoss { epoch: usize, detail: String },
    #[error("{0}: both progression classes are required")]
    SingleClassDataset(String),
    #[error("{path}: checkpoint format version {found}, expected {expected}")]
    CheckpointVersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: NetworkError,
    },
    #[error("case {case_id}: {source}")]
    Volume {
        case_id: String,
        #[source]
        source: VolumeError,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Attach the checkpoint path to a load failure, surfacing version
    /// mismatches as their own variant.
    pub(crate) fn checkpoint(path: &Path, e: NetworkError) -> Self {
        match e {
            NetworkError::Checkpoint(CheckpointError::VersionMismatch { found, expected }) => {
                PipelineError::CheckpointVersionMismatch {
                    path: path.to_path_buf(),
                    found,
                    expected,
                }
            }
            source => PipelineError::Checkpoint {
                path: path.to_path_buf(),
                source,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    /// Weight of the staging cross-entropy in the segmentation loss.
    pub lambda_cls: f64,
    /// Class weights for the classifier; inverse class frequency if unset.
    pub w_pos: Option<f64>,
    pub w_neg: Option<f64>,
    /// Probability at which predicted masks are binarized.
    pub mask_threshold: f64,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            batch_size: 2,
            lr: 1e-4,
            val_fraction: 0.15,
            lambda_cls: 0.1,
            w_pos: None,
            w_neg: None,
            mask_threshold: 0.5,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self::default()
    }

    pub fn classification() -> Self {
        TrainConfig {
            epochs: 40,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} must lie in (0, 1)", self.val_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return bad(format!("lambda_cls {} must be non-negative", self.lambda_cls));
        }
        for (name, w) in [("w_pos", self.w_pos), ("w_neg", self.w_neg)] {
            if let Some(w) = w {
                if !(w > 0.0 && w.is_finite()) {
                    return bad(format!("{name} {w} must be positive"));
                }
            }
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask_threshold {} must lie in (0, 1)", self.mask_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation Dice (segmentation) or validation AUC (classifier).
    pub val_metric: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch,train_loss,val_metric";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for e in &self.epochs {
            writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_metric).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_csv()).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
