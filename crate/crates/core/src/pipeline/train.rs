use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::predict::{classify, segment, stack_crops};
use super::{extract_crop, largest_component, CropVolume, EpochRecord, History, PipelineError, TrainConfig};
use crate::metrics::{dice_slices, median_iqr, roc_auc, youden_threshold, CaseResult, OperatingPoint};
use crate::networks::{build_resnet18_3d, build_seg, seg_loss, Arch, ClsNetConfig, NetworkError, ResNet3d, SegNet, SegNetConfig};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{adam_step, weighted_bce, AdamState, Param, Tensor, TensorError};
use crate::volume_io::{preprocess, preprocess_mask, read_nifti, StudyRecord, Volume, VolumeError};

/// Shuffle stream offset separating classifier epochs from segmentation epochs.
const CLS_SHUFFLE_OFFSET: u64 = 1 << 32;

fn volume_err(case_id: &str) -> impl FnOnce(VolumeError) -> PipelineError + '_ {
    move |source| PipelineError::Volume {
        case_id: case_id.to_string(),
        source,
    }
}

/// Preprocessed `(t1c, t2)` of a record, checked for equal geometry.
fn load_pair(r: &StudyRecord) -> Result<(Volume, Volume), PipelineError> {
    let t1c = preprocess(&read_nifti(&r.t1c_path).map_err(volume_err(&r.case_id))?);
    let t2 = preprocess(&read_nifti(&r.t2_path).map_err(volume_err(&r.case_id))?);
    if t1c.dims() != t2.dims() {
        return Err(PipelineError::ShapeMismatch(format!(
            "case {}: t1c {:?} vs t2 {:?} after resampling",
            r.case_id,
            t1c.dims(),
            t2.dims()
        )));
    }
    Ok((t1c, t2))
}

struct SegCase {
    id: String,
    /// Network-layout voxels of each input modality.
    inputs: Vec<Vec<f32>>,
    mask: Vec<f32>,
    overall: usize,
    t: usize,
}

fn load_seg_case(r: &StudyRecord, net: &SegNet<f32>, need_stages: bool) -> Result<SegCase, PipelineError> {
    let Some(mask_path) = &r.mask_path else {
        return Err(PipelineError::MissingMask {
            case_id: r.case_id.clone(),
        });
    };
    let (t1c, t2) = load_pair(r)?;
    let mask = preprocess_mask(&read_nifti(mask_path).map_err(volume_err(&r.case_id))?);
    let want = net.config().input_shape;
    if t1c.dims() != want || mask.dims() != want {
        return Err(PipelineError::ShapeMismatch(format!(
            "case {}: volume {:?}, mask {:?}, network expects {want:?}",
            r.case_id,
            t1c.dims(),
            mask.dims()
        )));
    }
    let stage = |v: Option<u8>, field| match v {
        Some(s) => Ok(s as usize),
        None if need_stages => Err(PipelineError::MissingLabel {
            case_id: r.case_id.clone(),
            field,
        }),
        None => Ok(0),
    };
    let mut inputs = vec![t1c.to_xyz_major()];
    if net.num_inputs() == 2 {
        inputs.push(t2.to_xyz_major());
    }
    Ok(SegCase {
        id: r.case_id.clone(),
        inputs,
        mask: mask.map(|v| if v > 0.5 { 1.0 } else { 0.0 }).expect("finite").to_xyz_major(),
        overall: stage(r.overall_stage, "overall_stage")?,
        t: stage(r.t_stage, "t_stage")?,
    })
}

fn stack(shape: [usize; 3], parts: &[&[f32]]) -> Result<Tensor<f32>, TensorError> {
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        data.extend_from_slice(p);
    }
    Tensor::from_vec(&[parts.len(), 1, shape[0], shape[1], shape[2]], data)
}

fn diverged(epoch: usize) -> impl Fn(NetworkError) -> PipelineError {
    move |e| match e {
        NetworkError::Tensor(TensorError::NonFinite(op)) => PipelineError::DivergedLoss {
            epoch,
            detail: format!("non-finite values in {op}"),
        },
        other => other.into(),
    }
}

fn zero_grads(params: &[Param<f32>]) {
    for p in params {
        p.zero_grad();
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_splits(train: &[StudyRecord], val: &[StudyRecord]) -> Result<(), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(PipelineError::EmptyDataset("validation split is empty".into()));
    }
    Ok(())
}

/// Result of [`train_segmentation`]; `net` holds the best-epoch weights.
pub struct SegTrainOutcome {
    pub net: SegNet<f32>,
    pub history: History,
    pub best_epoch: usize,
    pub best_mean_dice: f64,
    pub best_median_dice: f64,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    /// Validation Dice per case at the best epoch.
    pub val_cases: Vec<CaseResult>,
}

/// Trains `arch` with Adam on the soft Dice loss (plus `λ_cls` times the
/// staging cross-entropy when the network has the classification route).
/// Writes `<arch>.ckpt` for the epoch with the best mean validation Dice
/// and `<arch>_history.csv` into `cfg.checkpoint_dir`.
pub fn train_segmentation(
    cfg: &TrainConfig,
    net_cfg: &SegNetConfig,
    arch: Arch,
    train: &[StudyRecord],
    val: &[StudyRecord],
) -> Result<SegTrainOutcome, PipelineError> {
    cfg.validate()?;
    check_splits(train, val)?;
    let net = build_seg::<f32>(arch, net_cfg, cfg.seed)?;
    let need_stages = net.config().cls_route && cfg.lambda_cls > 0.0;
    let load = |recs: &[StudyRecord]| {
        recs.iter()
            .map(|r| load_seg_case(r, &net, need_stages))
            .collect::<Result<Vec<_>, _>>()
    };
    let train_cases = load(train)?;
    let val_cases = load(val)?;
    if net.num_inputs() == 1 {
        log::info!("{arch}: single-encoder network, using T1C only");
    }

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    let checkpoint_path = cfg.checkpoint_dir.join(format!("{arch}.ckpt"));
    let history_path = cfg.checkpoint_dir.join(format!("{arch}_history.csv"));
    let shape = net.config().input_shape;
    let mut adam = AdamState::new(net.params(), cfg.lr);
    let mut history = History::default();
    let mut best: Option<(usize, f64, f64, Vec<CaseResult>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let cases: Vec<&SegCase> = batch.iter().map(|&i| &train_cases[i]).collect();
            let inputs = (0..net.num_inputs())
                .map(|m| stack(shape, &cases.iter().map(|c| c.inputs[m].as_slice()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>, _>>()?;
            let mask = stack(shape, &cases.iter().map(|c| c.mask.as_slice()).collect::<Vec<_>>())?;
            let overall: Vec<usize> = cases.iter().map(|c| c.overall).collect();
            let t: Vec<usize> = cases.iter().map(|c| c.t).collect();

            zero_grads(net.params());
            let out = net.forward(&inputs, true).map_err(diverged(epoch))?;
            let loss = seg_loss(&out, &mask, &overall, &t, cfg.lambda_cls)
                .map_err(|e| diverged(epoch)(e.into()))?;
            let l = loss.item() as f64;
            if !l.is_finite() {
                return Err(PipelineError::DivergedLoss {
                    epoch,
                    detail: format!("loss {l}"),
                });
            }
            loss.backward().map_err(|e| diverged(epoch)(e.into()))?;
            adam_step(net.params(), &mut adam)?;
            loss_sum += l * batch.len() as f64;
        }
        let train_loss = loss_sum / train_cases.len() as f64;

        let mut results = Vec::with_capacity(val_cases.len());
        for c in &val_cases {
            let inputs = c
                .inputs
                .iter()
                .map(|v| stack(shape, &[v.as_slice()]))
                .collect::<Result<Vec<_>, _>>()?;
            let out = net.forward(&inputs, false).map_err(diverged(epoch))?;
            let pred: Vec<f32> = out
                .prob_map
                .data()
                .iter()
                .map(|&p| if p as f64 > cfg.mask_threshold { 1.0 } else { 0.0 })
                .collect();
            let mut r = CaseResult::new(c.id.clone());
            r.dice = Some(dice_slices(&pred, &c.mask));
            results.push(r);
        }
        let dice: Vec<f64> = results.iter().map(|r| r.dice.unwrap()).collect();
        let mean = dice.iter().sum::<f64>() / dice.len() as f64;
        let (median, _, _) = median_iqr(&dice)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: mean,
        });
        log::info!(
            "{arch} epoch {epoch}/{}: train loss {train_loss:.4}, val Dice mean {mean:.4} median {median:.4}",
            cfg.epochs
        );
        if best.as_ref().map_or(true, |b| mean > b.1) {
            net.save(&checkpoint_path)?;
            best = Some((epoch, mean, median, results));
        }
        history.write_csv(&history_path)?;
    }

    let (best_epoch, best_mean_dice, best_median_dice, val_cases) = best.expect("at least one epoch");
    let net = SegNet::load(&checkpoint_path).map_err(|e| PipelineError::checkpoint(&checkpoint_path, e))?;
    Ok(SegTrainOutcome {
        net,
        history,
        best_epoch,
        best_mean_dice,
        best_median_dice,
        checkpoint_path,
        history_path,
        val_cases,
    })
}

/// `(w_pos, w_neg)`: explicit values win, otherwise `n_neg / n_pos` and 1.
pub fn class_weights(labels: &[u8], w_pos: Option<f64>, w_neg: Option<f64>) -> Result<(f64, f64), PipelineError> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PipelineError::SingleClassDataset(format!(
            "{pos} positive and {neg} negative training cases"
        )));
    }
    Ok((w_pos.unwrap_or(neg as f64 / pos as f64), w_neg.unwrap_or(1.0)))
}

/// Result of [`train_classifier`]; `net` holds the best-epoch weights.
pub struct ClsTrainOutcome {
    pub net: ResNet3d<f32>,
    pub history: History,
    pub best_epoch: usize,
    pub best_auc: f64,
    /// Youden operating point on the validation split at the best epoch.
    pub operating_point: OperatingPoint,
    pub w_pos: f64,
    pub w_neg: f64,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
    /// Validation scores, labels and crop provenance at the best epoch.
    pub val_cases: Vec<CaseResult>,
}

struct ClsCase {
    id: String,
    crop: CropVolume,
    label: u8,
}

fn crop_cases(
    seg: &SegNet<f32>,
    recs: &[StudyRecord],
    size: [usize; 3],
    mask_threshold: f64,
) -> Result<Vec<ClsCase>, PipelineError> {
    recs.iter()
        .map(|r| {
            let (t1c, t2) = load_pair(r)?;
            let mask = largest_component(&segment(seg, &t1c, &t2, mask_threshold)?);
            Ok(ClsCase {
                id: r.case_id.clone(),
                crop: extract_crop(&t1c, &t2, &mask, size)?,
                label: r.progression_3yr,
            })
        })
        .collect()
}

/// Trains the crop classifier on crops cut around masks predicted by the
/// frozen segmentation checkpoint, with class-weighted BCE. Writes
/// `cls.ckpt` (best validation AUC, Youden threshold in the sidecar) and
/// `cls_history.csv` into `cfg.checkpoint_dir`.
pub fn train_classifier(
    cfg: &TrainConfig,
    net_cfg: &ClsNetConfig,
    train: &[StudyRecord],
    val: &[StudyRecord],
    seg_checkpoint: &Path,
) -> Result<ClsTrainOutcome, PipelineError> {
    cfg.validate()?;
    check_splits(train, val)?;
    if net_cfg.in_channels != 3 {
        return Err(PipelineError::InvalidConfig(format!(
            "classifier in_channels {} (crops have T1C, T2 and mask channels)",
            net_cfg.in_channels
        )));
    }
    let labels: Vec<u8> = train.iter().map(|r| r.progression_3yr).collect();
    let (w_pos, w_neg) = class_weights(&labels, cfg.w_pos, cfg.w_neg)?;
    let val_labels: Vec<u8> = val.iter().map(|r| r.progression_3yr).collect();
    if !val_labels.contains(&0) || !val_labels.contains(&1) {
        return Err(PipelineError::SingleClassDataset("validation split".into()));
    }
    let seg = SegNet::<f32>::load(seg_checkpoint).map_err(|e| PipelineError::checkpoint(seg_checkpoint, e))?;
    let net = build_resnet18_3d::<f32>(net_cfg, cfg.seed)?;
    let size = net_cfg.input_shape;
    let train_cases = crop_cases(&seg, train, size, cfg.mask_threshold)?;
    let val_cases = crop_cases(&seg, val, size, cfg.mask_threshold)?;
    let fallbacks = train_cases.iter().chain(&val_cases).filter(|c| c.crop.fallback_used).count();
    log::info!("classifier: w_pos {w_pos:.4}, w_neg {w_neg:.4}, {fallbacks} crops fell back to the volume center");

    std::fs::create_dir_all(&cfg.checkpoint_dir).map_err(io_err(&cfg.checkpoint_dir))?;
    let checkpoint_path = cfg.checkpoint_dir.join("cls.ckpt");
    let history_path = cfg.checkpoint_dir.join("cls_history.csv");
    let mut adam = AdamState::new(net.params(), cfg.lr);
    let mut history = History::default();
    let mut best: Option<(usize, f64, OperatingPoint, Vec<CaseResult>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_cases.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, CLS_SHUFFLE_OFFSET + epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let cases: Vec<&ClsCase> = batch.iter().map(|&i| &train_cases[i]).collect();
            let x = stack_crops(&cases.iter().map(|c| &c.crop).collect::<Vec<_>>())?;
            let y: Vec<u8> = cases.iter().map(|c| c.label).collect();
            zero_grads(net.params());
            let logits = net.forward(&x, true).map_err(diverged(epoch))?;
            let loss = weighted_bce(&logits, &y, w_pos, w_neg).map_err(|e| diverged(epoch)(e.into()))?;
            let l = loss.item() as f64;
            if !l.is_finite() {
                return Err(PipelineError::DivergedLoss {
                    epoch,
                    detail: format!("loss {l}"),
                });
            }
            loss.backward().map_err(|e| diverged(epoch)(e.into()))?;
            adam_step(net.params(), &mut adam)?;
            loss_sum += l * batch.len() as f64;
        }
        let train_loss = loss_sum / train_cases.len() as f64;

        let mut scores = Vec::with_capacity(val_cases.len());
        for chunk in val_cases.chunks(cfg.batch_size) {
            let crops: Vec<&CropVolume> = chunk.iter().map(|c| &c.crop).collect();
            scores.extend(classify(&net, &crops).map_err(|e| match e {
                PipelineError::Network(n) => diverged(epoch)(n),
                other => other,
            })?);
        }
        let auc = roc_auc(&scores, &val_labels)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: auc,
        });
        log::info!("classifier epoch {epoch}/{}: train loss {train_loss:.4}, val AUC {auc:.4}", cfg.epochs);
        if best.as_ref().map_or(true, |b| auc > b.1) {
            let op = youden_threshold(&scores, &val_labels)?;
            net.save(&checkpoint_path, Some(op.threshold))?;
            let results = val_cases
                .iter()
                .zip(&scores)
                .map(|(c, &s)| {
                    let mut r = CaseResult::new(c.id.clone());
                    r.score = Some(s);
                    r.label = Some(c.label);
                    r.crop_origin = Some(c.crop.origin);
                    r.fallback_used = Some(c.crop.fallback_used);
                    r
                })
                .collect();
            best = Some((epoch, auc, op, results));
        }
        history.write_csv(&history_path)?;
    }

    let (best_epoch, best_auc, operating_point, val_cases) = best.expect("at least one epoch");
    let (net, _) = ResNet3d::load(&checkpoint_path).map_err(|e| PipelineError::checkpoint(&checkpoint_path, e))?;
    Ok(ClsTrainOutcome {
        net,
        history,
        best_epoch,
        best_auc,
        operating_point,
        w_pos,
        w_neg,
        checkpoint_path,
        history_path,
        val_cases,
    })
}
