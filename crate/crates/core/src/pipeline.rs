//! Command implementations shared by the CLI and the integration tests.
//! Each function takes a resolved [`RunConfig`] and writes its artifacts
//! next to a copy of that configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::Axis;

use crate::config::RunConfig;
use crate::data::loader::{list_images, read_rgb, write_gray};
use crate::data::{load_dataset, synth_dataset, LoadOptions, SampleRecord};
use crate::distill::{
    make_depth_teacher, train_rdffnet, train_stage1, train_stage2, DepthTeacher, DepthTeacherKind,
    DepthTeacherSource, StageLoss, StudentInit, TeacherBundle, TrainOptions, TrainReport,
};
use crate::error::{DbdError, Result};
use crate::evaluation::{evaluate_dataset, load_predictor, write_pr_plot, MetricsReport};
use crate::model::{build_model, CheckpointKind, DbdNet, ModelConfig};
use crate::seed::{derive_seed, tag};

pub const REPORT_NAME: &str = "metrics.txt";
pub const PLOT_NAME: &str = "pr_curve.png";
pub const PREDICT_HEADER_NAME: &str = "checkpoint_header.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    Rdffnet,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Rdffnet => "rdffnet",
        }
    }

    /// Seed tag that keeps the initial weights of different stages independent.
    fn init_tag(self) -> u64 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Rdffnet => 3,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = DbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "rdffnet" => Ok(Stage::Rdffnet),
            other => Err(DbdError::Argument(format!(
                "unknown stage {other:?} (expected stage1, stage2 or rdffnet)"
            ))),
        }
    }
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(DbdError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

/// Renders the synthetic set into `out` (default: `data.dataset_root`) and returns the manifest path.
pub fn run_synth(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let root = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.data.dataset_root.clone());
    let manifest = synth_dataset(&root, &config.synth_config()?)?;
    config.write_echo(&root)?;
    Ok(manifest)
}

pub fn load_training_set(config: &RunConfig) -> Result<Vec<SampleRecord>> {
    let manifest = config.data.manifest_path();
    require_exists(&config.data.dataset_root, "dataset root")?;
    require_exists(&manifest, "manifest")?;
    load_dataset(
        &config.data.dataset_root,
        &manifest,
        LoadOptions {
            polarity: config.data.polarity,
        },
    )
}

pub fn stage_dir(config: &RunConfig, stage: Stage) -> PathBuf {
    config.output_dir.join(stage.name())
}

fn depth_teacher(config: &RunConfig, model: &ModelConfig) -> Result<Box<dyn DepthTeacher>> {
    let source = match config.distill.depth_teacher {
        DepthTeacherKind::SyntheticOracle => DepthTeacherSource::SyntheticOracle {
            channels: config.distill.depth_teacher_channels,
            stride: 1 << model.num_decoder_levels,
            seed: config.depth_teacher_seed(),
        },
        DepthTeacherKind::ExternalCheckpoint => {
            let path = config.distill.depth_teacher_path.clone().ok_or_else(|| {
                DbdError::Config("distill.depth_teacher = \"external_checkpoint\" needs distill.depth_teacher_path".into())
            })?;
            require_exists(&path, "depth teacher checkpoint")?;
            DepthTeacherSource::ExternalCheckpoint(path)
        }
    };
    make_depth_teacher(&source)
}

/// Outcome of [`run_train`]; `report` is `None` when the stage is disabled.
#[derive(Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: Option<TrainReport>,
}

/// Trains one stage into `<output_dir>/<stage>/`.
pub fn run_train(
    config: &RunConfig,
    stage: Stage,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    let dir = stage_dir(config, stage);
    if stage == Stage::Stage2 && config.train.stage2_loss == StageLoss::None {
        info!("stage 2 is disabled (stage2_loss = none); nothing to train");
        return Ok(TrainOutcome { dir, report: None });
    }
    let teacher_path = match stage {
        Stage::Stage2 => {
            let p = config.distill.defocus_teacher.clone().ok_or_else(|| {
                DbdError::Config("stage2 needs a defocus teacher checkpoint (distill.defocus_teacher or --defocus-teacher)".into())
            })?;
            require_exists(&p, "defocus teacher checkpoint")?;
            Some(p)
        }
        _ => None,
    };
    if let Some(p) = resume_from {
        require_exists(p, "resume checkpoint")?;
    }
    let dataset = load_training_set(config)?;
    let mut model_cfg = config.model.clone();
    if stage == Stage::Rdffnet {
        model_cfg.depth_heads = true;
    }
    let model = build_model(
        &model_cfg,
        derive_seed(config.seed, &[tag::MODEL, stage.init_tag()]),
    )?;
    config.write_echo(&dir)?;
    let options = TrainOptions {
        output_dir: Some(dir.clone()),
        resume_from: resume_from.map(Path::to_path_buf),
        run_config: Some(config.to_json()?),
    };
    let report = match stage {
        Stage::Stage1 => train_stage1(&model, &dataset, &config.train, &config.losses, &options)?,
        Stage::Stage2 => {
            let teacher_path = teacher_path.expect("checked above");
            let (defocus, _) = DbdNet::from_checkpoint(&teacher_path)?;
            if config.distill.student_init == StudentInit::WarmStart {
                model.load(&teacher_path)?;
            }
            let teachers = TeacherBundle {
                depth: depth_teacher(config, defocus.config())?,
                defocus,
            };
            train_stage2(
                &model,
                &teachers,
                &dataset,
                &config.train,
                &config.distill,
                &config.losses,
                &options,
            )?
        }
        Stage::Rdffnet => {
            let teacher = depth_teacher(config, &model_cfg)?;
            train_rdffnet(
                &model,
                teacher.as_ref(),
                &dataset,
                &config.train,
                &config.losses,
                &options,
            )?
        }
    };
    Ok(TrainOutcome {
        dir,
        report: Some(report),
    })
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig {
        depth_heads: false,
        ..a.clone()
    } == ModelConfig {
        depth_heads: false,
        ..b.clone()
    }
}

/// Where [`run_eval`] writes; defaults live under `<output_dir>/eval/`.
#[derive(Debug, Clone, Default)]
pub struct EvalPaths {
    pub dataset_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    pub report_path: PathBuf,
    pub plot_path: PathBuf,
}

pub fn run_eval(config: &RunConfig, checkpoint: &Path, paths: &EvalPaths) -> Result<EvalOutcome> {
    require_exists(checkpoint, "checkpoint")?;
    let mut data = config.data.clone();
    if let Some(root) = &paths.dataset_root {
        data.dataset_root = root.clone();
        if paths.manifest.is_none() {
            data.manifest = None;
        }
    }
    if let Some(m) = &paths.manifest {
        data.manifest = Some(m.clone());
    }
    let (predictor, header) = load_predictor(checkpoint)?;
    if header.kind == CheckpointKind::Network {
        let stored = header
            .model
            .as_ref()
            .expect("network checkpoints carry a model config");
        if !same_architecture(stored, &config.model) {
            return Err(DbdError::Config(format!(
                "checkpoint {} was trained with model config {} but the run config has {}",
                checkpoint.display(),
                serde_json::to_string(stored)?,
                serde_json::to_string(&config.model)?
            )));
        }
    }
    let records = load_training_set(&RunConfig {
        data,
        ..config.clone()
    })?;
    let metrics = evaluate_dataset(predictor.as_ref(), &records, &config.eval)?;
    let eval_dir = config.output_dir.join("eval");
    let report_path = paths
        .report
        .clone()
        .unwrap_or_else(|| eval_dir.join(REPORT_NAME));
    let plot_path = paths
        .plot
        .clone()
        .unwrap_or_else(|| eval_dir.join(PLOT_NAME));
    metrics.write(&report_path)?;
    write_pr_plot(&metrics.pr_curve, &plot_path)?;
    let echo_dir = report_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    config.write_echo(echo_dir)?;
    Ok(EvalOutcome {
        metrics,
        report_path,
        plot_path,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictSummary {
    pub written: Vec<PathBuf>,
    /// Inputs that could not be decoded.
    pub skipped: Vec<PathBuf>,
}

/// Writes one 8-bit blur map per decodable image in `image_dir`, named after its stem.
pub fn run_predict(checkpoint: &Path, image_dir: &Path, out_dir: &Path) -> Result<PredictSummary> {
    let (predictor, header) = load_predictor(checkpoint)?;
    let inputs = list_images(image_dir)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join(PREDICT_HEADER_NAME),
        serde_json::to_string_pretty(&header)?,
    )?;
    let mut summary = PredictSummary {
        written: Vec::new(),
        skipped: Vec::new(),
    };
    for path in inputs {
        let image = match read_rgb(&path) {
            Ok(i) => i,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                summary.skipped.push(path);
                continue;
            }
        };
        let map = predictor.predict(&image)?.insert_axis(Axis(0));
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let out = out_dir.join(format!("{stem}.png"));
        write_gray(&out, &map)?;
        summary.written.push(out);
    }
    Ok(summary)
}
