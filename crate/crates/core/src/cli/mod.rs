//! Command-line surface: `gen-phantom`, `train-seg`, `train-cls`,
//! `evaluate` and `predict`, driven by one JSON [`RunConfig`] whose keys
//! can be overridden by flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{dice_binary, CaseResult, EvalReport};
use crate::networks::{read_meta, Arch, ClsNetConfig, SegNetConfig};
use crate::phantom::{generate_dataset, PhantomConfig, PhantomError};
use crate::pipeline::{
    split_dataset, train_classifier, train_segmentation, PipelineError, TrainConfig, TwoStageModel,
};
use crate::volume_io::{
    load_manifest, preprocess, preprocess_mask, read_nifti, write_nifti, StudyRecord, VolumeError,
    WORKING_SPACING_MM,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub seg_checkpoint: Option<PathBuf>,
    pub cls_checkpoint: Option<PathBuf>,
    pub phantom_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: None,
            seg_checkpoint: None,
            cls_checkpoint: None,
            phantom_dir: PathBuf::from("phantom"),
            report_dir: PathBuf::from("reports"),
        }
    }
}

/// Everything a run needs, one section per subsystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Number of phantom cases `gen-phantom` writes.
    pub phantom_cases: usize,
    pub phantom: PhantomConfig,
    pub seg_net: SegNetConfig,
    pub cls_net: ClsNetConfig,
    pub seg_train: TrainConfig,
    pub cls_train: TrainConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phantom_cases: 48,
            phantom: PhantomConfig::default(),
            seg_net: SegNetConfig::default(),
            cls_net: ClsNetConfig::default(),
            seg_train: TrainConfig {
                checkpoint_dir: PathBuf::from("runs/seg"),
                ..TrainConfig::segmentation()
            },
            cls_train: TrainConfig {
                checkpoint_dir: PathBuf::from("runs/cls"),
                ..TrainConfig::classification()
            },
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "v2netcls", version, about = "Tumour segmentation and progression classification on 3-D MRI")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for splitting, initialization, shuffling and phantoms.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom dataset and its manifest.
    GenPhantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Volume dims as `X,Y,Z`.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        dims: Option<Vec<usize>>,
    },
    /// Split a manifest and train a segmentation network.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Arch>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the crop classifier on masks from a frozen segmentation checkpoint.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Two-stage inference and metrics on a held-out manifest.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seg_checkpoint: Option<PathBuf>,
        #[arg(long)]
        cls_checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Decision threshold; defaults to the one stored with the classifier.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Predict one case.
    Predict {
        #[arg(long)]
        seg_checkpoint: PathBuf,
        #[arg(long)]
        cls_checkpoint: PathBuf,
        #[arg(long)]
        t1c: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        #[arg(long)]
        out_mask: PathBuf,
    },
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    match s {
        "vnet" => Ok(Arch::Vnet),
        "v2net" => Ok(Arch::V2net),
        "v2netcls" => Ok(Arch::V2netcls),
        other => Err(format!("unknown architecture {other:?} (expected vnet, v2net or v2netcls)")),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            1
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.phantom.seed = seed;
        cfg.seg_train.seed = seed;
        cfg.cls_train.seed = seed;
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    log::info!("resolved configuration:\n{}", cfg.to_json());
    log::info!(
        "spacing is in millimetres; working resolution {}x{}x{} mm",
        WORKING_SPACING_MM[0],
        WORKING_SPACING_MM[1],
        WORKING_SPACING_MM[2]
    );
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require(v: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("{what} is required (flag or config key)")))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_records(path: &Path) -> Result<Vec<StudyRecord>, CliError> {
    let records = load_manifest(path)?;
    if records.is_empty() {
        return Err(PipelineError::EmptyDataset(format!("{} has no records", path.display())).into());
    }
    Ok(records)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenPhantom {
            common,
            out_dir,
            n,
            dims,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = out_dir {
                cfg.paths.phantom_dir = d;
            }
            if let Some(n) = n {
                cfg.phantom_cases = n;
            }
            if let Some(d) = dims {
                cfg.phantom.dims = [d[0], d[1], d[2]];
            }
            log_config(&cfg);
            let ds = generate_dataset(&cfg.phantom, cfg.phantom_cases, &cfg.paths.phantom_dir)?;
            println!("manifest: {}", ds.manifest_path.display());
            println!("cases: {}", ds.records.len());
            println!("progression prevalence: {:.4}", ds.prevalence);
            Ok(())
        }
        Command::TrainSeg {
            common,
            arch,
            manifest,
            out_dir,
            epochs,
        } => {
            let mut cfg = resolve(&common)?;
            let arch = arch.unwrap_or(Arch::V2netcls);
            if let Some(m) = manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(d) = out_dir {
                cfg.seg_train.checkpoint_dir = d;
            }
            if let Some(e) = epochs {
                cfg.seg_train.epochs = e;
            }
            cfg.seg_net = cfg
                .seg_net
                .clone()
                .for_arch(arch)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            log_config(&cfg);
            let manifest = require(cfg.paths.manifest.clone(), "--manifest")?;
            let records = load_records(&manifest)?;
            if let Some(r) = records.iter().find(|r| r.mask_path.is_none()) {
                return Err(PipelineError::MissingMask {
                    case_id: r.case_id.clone(),
                }
                .into());
            }
            if arch == Arch::Vnet {
                log::info!("vnet: training on T1C only; T2 volumes are not used");
            }
            let tc = &cfg.seg_train;
            let (train, val) = split_dataset(&records, tc.val_fraction, tc.seed)?;
            log::info!("split: {} training, {} validation cases", train.len(), val.len());
            let out = train_segmentation(tc, &cfg.seg_net, arch, &train, &val)?;
            let report = EvalReport::from_cases(arch.to_string(), "validation", out.val_cases, None);
            let dir = &tc.checkpoint_dir;
            report
                .write_json(&dir.join(format!("{arch}_val_report.json")))
                .map_err(|source| CliError::Io {
                    path: dir.join(format!("{arch}_val_report.json")),
                    source,
                })?;
            write_table(&report, &dir.join(format!("{arch}_val_table.csv")))?;
            write_file(&dir.join(format!("{arch}_run_config.json")), &(cfg.to_json() + "\n"))?;
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("history: {}", out.history_path.display());
            println!(
                "best epoch {}: validation Dice mean {:.4}, median {:.4}",
                out.best_epoch, out.best_mean_dice, out.best_median_dice
            );
            Ok(())
        }
        Command::TrainCls {
            common,
            seg_checkpoint,
            manifest,
            out_dir,
            epochs,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(s) = seg_checkpoint {
                cfg.paths.seg_checkpoint = Some(s);
            }
            if let Some(d) = out_dir {
                cfg.cls_train.checkpoint_dir = d;
            }
            if let Some(e) = epochs {
                cfg.cls_train.epochs = e;
            }
            log_config(&cfg);
            let seg = require(cfg.paths.seg_checkpoint.clone(), "--seg-checkpoint")?;
            require_file(&seg, "segmentation checkpoint")?;
            let manifest = require(cfg.paths.manifest.clone(), "--manifest")?;
            let records = load_records(&manifest)?;
            let tc = &cfg.cls_train;
            let (train, val) = split_dataset(&records, tc.val_fraction, tc.seed)?;
            log::info!("split: {} training, {} validation cases", train.len(), val.len());
            let out = train_classifier(tc, &cfg.cls_net, &train, &val, &seg)?;
            let report = EvalReport::from_cases(
                Arch::Resnet18_3d.to_string(),
                "validation",
                out.val_cases,
                Some(out.operating_point.threshold),
            );
            let dir = &tc.checkpoint_dir;
            let path = dir.join("cls_val_report.json");
            report.write_json(&path).map_err(|source| CliError::Io { path, source })?;
            write_file(&dir.join("cls_run_config.json"), &(cfg.to_json() + "\n"))?;
            println!("checkpoint: {}", out.checkpoint_path.display());
            println!("history: {}", out.history_path.display());
            println!(
                "best epoch {}: validation AUC {:.4}, threshold {}, sensitivity {:.4}, specificity {:.4}",
                out.best_epoch,
                out.best_auc,
                out.operating_point.threshold,
                out.operating_point.sensitivity,
                out.operating_point.specificity
            );
            Ok(())
        }
        Command::Evaluate {
            common,
            seg_checkpoint,
            cls_checkpoint,
            manifest,
            threshold,
            out_dir,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = manifest {
                cfg.paths.manifest = Some(m);
            }
            if let Some(s) = seg_checkpoint {
                cfg.paths.seg_checkpoint = Some(s);
            }
            if let Some(c) = cls_checkpoint {
                cfg.paths.cls_checkpoint = Some(c);
            }
            if let Some(d) = out_dir {
                cfg.paths.report_dir = d;
            }
            log_config(&cfg);
            let seg = require(cfg.paths.seg_checkpoint.clone(), "--seg-checkpoint")?;
            let cls = require(cfg.paths.cls_checkpoint.clone(), "--cls-checkpoint")?;
            require_file(&seg, "segmentation checkpoint")?;
            require_file(&cls, "classifier checkpoint")?;
            let manifest = require(cfg.paths.manifest.clone(), "--manifest")?;
            let records = load_records(&manifest)?;
            let mut model = TwoStageModel::load(&seg, &cls)?;
            model.mask_threshold = cfg.seg_train.mask_threshold;
            let threshold = threshold.or(model.threshold);
            match threshold {
                Some(t) => log::info!("decision threshold {t}"),
                None => log::info!("no stored threshold; using the Youden point of this set"),
            }
            let mut cases = Vec::with_capacity(records.len());
            for r in &records {
                let case_err = |source| PipelineError::Volume {
                    case_id: r.case_id.clone(),
                    source,
                };
                let t1c = preprocess(&read_nifti(&r.t1c_path).map_err(case_err)?);
                let t2 = preprocess(&read_nifti(&r.t2_path).map_err(case_err)?);
                let p = model.predict(&t1c, &t2)?;
                let mut c = CaseResult::new(r.case_id.clone());
                if let Some(mp) = &r.mask_path {
                    let gt = preprocess_mask(&read_nifti(mp).map_err(case_err)?);
                    c.dice = Some(dice_binary(&p.mask, &gt).map_err(PipelineError::from)?);
                }
                c.score = Some(p.prob);
                c.label = Some(r.progression_3yr);
                c.crop_origin = Some(p.crop_origin);
                c.fallback_used = Some(p.fallback_used);
                cases.push(c);
            }
            let model_name = read_meta(&seg)
                .map(|m| m.arch.to_string())
                .map_err(|e| PipelineError::checkpoint(&seg, e))?;
            let dataset = manifest
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into());
            let report = EvalReport::from_cases(model_name, dataset, cases, threshold);
            let dir = &cfg.paths.report_dir;
            create_dir(dir)?;
            let path = dir.join("eval_report.json");
            report.write_json(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            write_table(&report, &dir.join("eval_table.csv"))?;
            let a = &report.aggregate;
            println!("report: {}", path.display());
            let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            println!(
                "median Dice {} (IQR {} to {}), AUC {}, sensitivity {}, specificity {}",
                f(a.median_dice),
                f(a.dice_q1),
                f(a.dice_q3),
                f(a.auc),
                f(a.sensitivity),
                f(a.specificity)
            );
            Ok(())
        }
        Command::Predict {
            seg_checkpoint,
            cls_checkpoint,
            t1c,
            t2,
            out_mask,
        } => {
            log::info!(
                "spacing is in millimetres; inputs are resampled to {}x{}x{} mm",
                WORKING_SPACING_MM[0],
                WORKING_SPACING_MM[1],
                WORKING_SPACING_MM[2]
            );
            require_file(&seg_checkpoint, "segmentation checkpoint")?;
            require_file(&cls_checkpoint, "classifier checkpoint")?;
            let a = preprocess(&read_nifti(&t1c)?);
            let b = preprocess(&read_nifti(&t2)?);
            if !a.same_geometry(&b) {
                return Err(CliError::Usage(format!(
                    "{} has dims {:?}, {} has dims {:?}",
                    t1c.display(),
                    a.dims(),
                    t2.display(),
                    b.dims()
                )));
            }
            let model = TwoStageModel::load(&seg_checkpoint, &cls_checkpoint)?;
            let p = model.predict(&a, &b)?;
            write_nifti(&p.mask, &out_mask)?;
            println!("probability: {:.6}", p.prob);
            println!("fallback_used: {}", p.fallback_used);
            println!("mask: {}", out_mask.display());
            Ok(())
        }
    }
}

fn write_table(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    report.write_table_csv(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
