use std::path::Path;

use super::{extract_crop, largest_component, CropVolume, PipelineError};
use crate::networks::{ResNet3d, SegNet};
use crate::tensor::Tensor;
use crate::volume_io::Volume;

/// Binary mask `prob > threshold` predicted by `net`. Single-encoder
/// networks see only `t1c`.
pub fn segment(net: &SegNet<f32>, t1c: &Volume, t2: &Volume, threshold: f64) -> Result<Volume, PipelineError> {
    if !t1c.same_geometry(t2) {
        return Err(PipelineError::ShapeMismatch(format!(
            "t1c {:?} / {:?} mm vs t2 {:?} / {:?} mm",
            t1c.dims(),
            t1c.spacing(),
            t2.dims(),
            t2.spacing()
        )));
    }
    let dims = t1c.dims();
    if dims != net.config().input_shape {
        return Err(PipelineError::ShapeMismatch(format!(
            "volume dims {dims:?}, segmentation network expects {:?}",
            net.config().input_shape
        )));
    }
    let shape = [1, 1, dims[0], dims[1], dims[2]];
    let mut inputs = vec![Tensor::from_vec(&shape, t1c.to_xyz_major())?];
    if net.num_inputs() == 2 {
        inputs.push(Tensor::from_vec(&shape, t2.to_xyz_major())?);
    }
    let out = net.forward(&inputs, false)?;
    let bin: Vec<f32> = out
        .prob_map
        .data()
        .iter()
        .map(|&p| if p as f64 > threshold { 1.0 } else { 0.0 })
        .collect();
    Ok(Volume::from_xyz_major(dims, t1c.spacing(), &bin).expect("dims checked"))
}

/// Progression probabilities for a batch of crops.
pub(crate) fn classify(net: &ResNet3d<f32>, crops: &[&CropVolume]) -> Result<Vec<f64>, PipelineError> {
    let logits = net.forward(&stack_crops(crops)?, false)?;
    Ok(logits.data().iter().map(|&z| 1.0 / (1.0 + (-(z as f64)).exp())).collect())
}

pub(crate) fn stack_crops(crops: &[&CropVolume]) -> Result<Tensor<f32>, PipelineError> {
    let one = crops[0].data.shape();
    let mut shape = vec![crops.len()];
    shape.extend_from_slice(one);
    let mut data = Vec::with_capacity(crops.len() * crops[0].data.numel());
    for c in crops {
        data.extend_from_slice(c.data.data());
    }
    Ok(Tensor::from_vec(&shape, data)?)
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Largest connected component of the binarized probability map.
    pub mask: Volume,
    pub prob: f64,
    pub fallback_used: bool,
    pub crop_origin: [usize; 3],
}

/// Frozen segmentation and classification networks.
pub struct TwoStageModel {
    pub seg: SegNet<f32>,
    pub cls: ResNet3d<f32>,
    /// Decision threshold stored with the classifier, if any.
    pub threshold: Option<f64>,
    pub mask_threshold: f64,
}

impl TwoStageModel {
    pub fn load(seg_ckpt: &Path, cls_ckpt: &Path) -> Result<Self, PipelineError> {
        let seg = SegNet::load(seg_ckpt).map_err(|e| PipelineError::checkpoint(seg_ckpt, e))?;
        let (cls, threshold) = ResNet3d::load(cls_ckpt).map_err(|e| PipelineError::checkpoint(cls_ckpt, e))?;
        if cls.config().in_channels != 3 {
            return Err(PipelineError::InvalidConfig(format!(
                "{}: classifier takes {} channels, crops have 3",
                cls_ckpt.display(),
                cls.config().in_channels
            )));
        }
        Ok(TwoStageModel {
            seg,
            cls,
            threshold,
            mask_threshold: 0.5,
        })
    }

    /// `t1c`, `t2` must already be resampled and normalized.
    pub fn predict(&self, t1c: &Volume, t2: &Volume) -> Result<Prediction, PipelineError> {
        let raw = segment(&self.seg, t1c, t2, self.mask_threshold)?;
        let mask = largest_component(&raw);
        let crop = extract_crop(t1c, t2, &mask, self.cls.config().input_shape)?;
        let prob = classify(&self.cls, &[&crop])?[0];
        Ok(Prediction {
            mask,
            prob,
            fallback_used: crop.fallback_used,
            crop_origin: crop.origin,
        })
    }
}

/// Loads both checkpoints and runs [`TwoStageModel::predict`].
pub fn predict(seg_ckpt: &Path, cls_ckpt: &Path, t1c: &Volume, t2: &Volume) -> Result<Prediction, PipelineError> {
    TwoStageModel::load(seg_ckpt, cls_ckpt)?.predict(t1c, t2)
}
