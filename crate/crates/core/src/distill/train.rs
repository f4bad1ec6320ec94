//! Training loops for stage 1 (defocus teacher), stage 2 (feature
//! distillation into a student) and the response-based depth baseline.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{poly_lr, Adam, AdamConfig};
use super::teacher::{DepthTeacher, DepthTeacherKind, Projectors, TeacherBundle};
use crate::data::{augment, resize_record, AugmentConfig, Batch, SampleRecord};
use crate::error::{DbdError, Result};
use crate::losses::{
    beta_schedule, multi_tap_distill_loss, rdffnet_total, stage1_total, stage2_total,
    DepthLossKind, LossBreakdown, LossScalars, LossWeights, NormGuard,
};
use crate::model::{read_checkpoint, write_checkpoint, CheckpointHeader, DbdNet, EncoderOutput};
use crate::seed::{derive_seed, stream, tag};

/// Which DBD terms a stage optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageLoss {
    /// BCE only (edge weight forced to 0).
    Bce,
    /// BCE plus the DOF-edge dice term.
    #[serde(alias = "bce&el")]
    BceAndEdge,
    /// Stage skipped.
    #[serde(alias = "-")]
    None,
}

impl StageLoss {
    pub fn lambda_edge(self, configured: f64) -> f64 {
        match self {
            StageLoss::BceAndEdge => configured,
            StageLoss::Bce | StageLoss::None => 0.0,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            StageLoss::Bce => "bce",
            StageLoss::BceAndEdge => "bce&el",
            StageLoss::None => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_model: f64,
    pub lr_poly_power: f64,
    pub lr_projector: f64,
    pub wd_projector: f64,
    pub seed: u64,
    pub stage1_loss: StageLoss,
    pub stage2_loss: StageLoss,
    /// Depth distance of the response baseline.
    pub rdffnet_depth_loss: DepthLossKind,
    pub augment: AugmentConfig,
    /// Write a resumable checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            max_epochs: 75,
            lr_model: 1e-4,
            lr_poly_power: 0.9,
            lr_projector: 1e-1,
            wd_projector: 5e-4,
            seed: 0,
            stage1_loss: StageLoss::BceAndEdge,
            stage2_loss: StageLoss::BceAndEdge,
            rdffnet_depth_loss: DepthLossKind::Normalized,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Rates may be zero (a null update); they may not be negative.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(DbdError::Config(
                "batch_size and max_epochs must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("lr_model", self.lr_model),
            ("lr_poly_power", self.lr_poly_power),
            ("lr_projector", self.lr_projector),
            ("wd_projector", self.wd_projector),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DbdError::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.stage1_loss == StageLoss::None {
            return Err(DbdError::Config("stage1_loss cannot be none".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Independent random initialisation.
    #[default]
    Fresh,
    /// Start from the defocus teacher's weights.
    WarmStart,
}

/// Where student features are compared with the teachers'.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTaps {
    /// Deepest encoder stage only.
    #[default]
    Final,
    /// Every encoder stage, each with its own projector pair; the feature
    /// loss is the mean over stages.
    PerStage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Constant distillation weight for every epoch instead of the schedule.
    pub beta_override: Option<f64>,
    pub student_init: StudentInit,
    pub taps: DistillTaps,
    pub norm_guard: NormGuard,
    /// Stage-1 checkpoint used as the frozen defocus teacher.
    pub defocus_teacher: Option<PathBuf>,
    pub depth_teacher: DepthTeacherKind,
    /// Checkpoint for `depth_teacher = "external_checkpoint"`.
    pub depth_teacher_path: Option<PathBuf>,
    /// Feature width of the synthetic depth teacher.
    pub depth_teacher_channels: usize,
    pub depth_teacher_seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta_override: None,
            student_init: StudentInit::Fresh,
            taps: DistillTaps::Final,
            norm_guard: NormGuard::default(),
            defocus_teacher: None,
            depth_teacher: DepthTeacherKind::SyntheticOracle,
            depth_teacher_path: None,
            depth_teacher_channels: 32,
            depth_teacher_seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn beta(&self, epoch: usize, last_epoch: usize) -> Result<f64> {
        match self.beta_override {
            Some(b) if b >= 0.0 && b.is_finite() => Ok(b),
            Some(b) => Err(DbdError::Config(format!(
                "beta_override must be non-negative, got {b}"
            ))),
            None => beta_schedule(epoch, last_epoch),
        }
    }
}

/// One line of the training history log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    /// Iterations completed at the end of the epoch.
    pub iteration: usize,
    /// Model learning rate at the first step of the epoch.
    pub lr: f64,
    pub lr_projector: Option<f64>,
    pub beta: Option<f64>,
    pub lambda_edge: f64,
    pub batches: usize,
    /// Mean over the epoch's batches.
    pub loss: LossScalars,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `history.jsonl` and checkpoints; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    /// Checkpoint written by an earlier run of the same stage.
    pub resume_from: Option<PathBuf>,
    /// Echoed into every checkpoint header.
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Total loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
    /// Parameter names updated by each optimizer (model first).
    pub optimizer_params: Vec<Vec<String>>,
}

pub const HISTORY_NAME: &str = "history.jsonl";
pub const FINAL_CHECKPOINT_NAME: &str = "model.safetensors";

pub fn epoch_checkpoint_path(output_dir: &Path, epoch: usize) -> PathBuf {
    output_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch:03}.safetensors"))
}

/// Reads a history log, one JSON record per line.
pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| DbdError::load(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| DbdError::load(path, e)))
        .collect()
}

enum Objective<'a> {
    Stage1,
    Stage2 {
        teachers: &'a TeacherBundle,
        projectors: Projectors,
        distill: &'a DistillConfig,
    },
    Rdffnet {
        depth_teacher: &'a dyn DepthTeacher,
        kind: DepthLossKind,
    },
}

impl Objective<'_> {
    fn stage(&self) -> &'static str {
        match self {
            Objective::Stage1 => "stage1",
            Objective::Stage2 { .. } => "stage2",
            Objective::Rdffnet { .. } => "rdffnet",
        }
    }
}

fn mean_scalars(items: &[LossScalars]) -> LossScalars {
    let n = items.len().max(1) as f64;
    let mut m = LossScalars::default();
    for s in items {
        m.total += s.total / n;
        m.bce += s.bce / n;
        m.edge += s.edge / n;
        m.edge_term += s.edge_term / n;
        m.distill += s.distill / n;
        m.distill_term += s.distill_term / n;
        m.depth += s.depth / n;
    }
    m
}

fn describe_components(s: &LossScalars) -> String {
    format!(
        "total={} bce={} edge={} distill={} depth={}",
        s.total, s.bce, s.edge, s.distill, s.depth
    )
}

/// Shuffled sample order for `epoch`; depends only on the seed and the epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[tag::DATA_ORDER, epoch as u64]));
    order
}

fn make_batch(
    dataset: &[SampleRecord],
    indices: &[usize],
    size: (usize, usize),
    config: &TrainConfig,
    epoch: usize,
    model: &DbdNet,
) -> Result<Batch> {
    let records: Vec<SampleRecord> = indices
        .iter()
        .map(|&i| {
            let seed = derive_seed(config.seed, &[tag::AUGMENT, epoch as u64, i as u64]);
            augment(&dataset[i], size, &config.augment, seed)
        })
        .collect();
    Batch::from_records(&records, model.device())
}

struct Resume {
    epoch: usize,
    iteration: usize,
    tensors: HashMap<String, Tensor>,
}

fn read_resume(path: &Path, stage: &str, model: &DbdNet) -> Result<Resume> {
    let (tensors, header) = read_checkpoint(path)?;
    if header.stage.as_deref() != Some(stage) {
        return Err(DbdError::Config(format!(
            "cannot resume {stage} from a checkpoint written by {:?}",
            header.stage
        )));
    }
    header.expect_model(model.config())?;
    Ok(Resume {
        epoch: header.epoch,
        iteration: header.iteration,
        tensors,
    })
}

fn train_loop(
    model: &DbdNet,
    mut objective: Objective<'_>,
    dataset: &[SampleRecord],
    config: &TrainConfig,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    let levels = model.config().num_decoder_levels;
    weights.validate(levels)?;
    if dataset.is_empty() {
        return Err(DbdError::EmptyDataset("training set has no samples".into()));
    }
    let stage = objective.stage();
    let stage_loss = match objective {
        Objective::Stage2 { .. } => config.stage2_loss,
        _ => config.stage1_loss,
    };
    if stage_loss == StageLoss::None {
        return Err(DbdError::Config(format!(
            "{stage} is disabled by its loss setting \"none\""
        )));
    }
    let size = model.config().input_size;
    let dataset: Vec<SampleRecord> = dataset.iter().map(|r| resize_record(r, size)).collect();
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_iters = batches_per_epoch * config.max_epochs;

    let mut model_opt = Adam::new(model.params(), AdamConfig::default())?;
    let mut proj_opt = match &objective {
        Objective::Stage2 { projectors, .. } => Some(Adam::new(
            projectors.params(),
            AdamConfig {
                weight_decay: config.wd_projector,
                ..Default::default()
            },
        )?),
        _ => None,
    };

    let mut history = Vec::new();
    let mut start_epoch = 1;
    let mut iteration = 0;
    if let Some(path) = &options.resume_from {
        let resume = read_resume(path, stage, model)?;
        model
            .params()
            .load(&crate::model::checkpoint::strip_prefix(
                &resume.tensors,
                "model.",
            ))?;
        model_opt.load_state(&resume.tensors, "opt.model.")?;
        if let (Objective::Stage2 { projectors, .. }, Some(opt)) = (&objective, proj_opt.as_mut()) {
            projectors
                .params()
                .load(&crate::model::checkpoint::strip_prefix(
                    &resume.tensors,
                    "proj.",
                ))?;
            opt.load_state(&resume.tensors, "opt.proj.")?;
        }
        start_epoch = resume.epoch + 1;
        iteration = resume.iteration;
        if let Some(dir) = &options.output_dir {
            let log = dir.join(HISTORY_NAME);
            if log.is_file() {
                history = read_history(&log)?
                    .into_iter()
                    .filter(|r| r.stage == stage && r.epoch <= resume.epoch)
                    .collect();
            }
        }
        log::info!(
            "{stage}: resuming after epoch {} (iteration {iteration})",
            resume.epoch
        );
    }

    if let Objective::Stage2 {
        teachers,
        projectors,
        distill,
    } = &objective
    {
        let sample = &dataset[..config.batch_size.min(dataset.len())];
        check_tap_points(model, teachers, projectors, distill.taps, sample, size)?;
    }

    let mut log_file = match &options.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut f = std::fs::File::create(dir.join(HISTORY_NAME))?;
            for r in &history {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            Some(f)
        }
        None => None,
    };

    let optimizer_params = std::iter::once(&model_opt)
        .chain(proj_opt.as_ref())
        .map(|o| o.names().map(String::from).collect())
        .collect();

    let mut step_losses = Vec::new();
    for epoch in start_epoch..=config.max_epochs {
        let mut w = weights.clone();
        w.lambda_edge = stage_loss.lambda_edge(weights.lambda_edge);
        let beta = match &objective {
            Objective::Stage2 { distill, .. } => Some(distill.beta(epoch, config.max_epochs)?),
            _ => None,
        };
        w.beta_now = beta.unwrap_or(0.0);
        let epoch_lr = poly_lr(
            config.lr_model,
            iteration,
            total_iters,
            config.lr_poly_power,
        );
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let mut scalars = Vec::with_capacity(batches_per_epoch);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = make_batch(&dataset, chunk, size, config, epoch, model)?;
            let output = model.forward(&batch.images)?;
            let breakdown: LossBreakdown = match &mut objective {
                Objective::Stage1 => stage1_total(&output, &batch.labels, &w)?,
                Objective::Stage2 {
                    teachers,
                    projectors,
                    distill,
                } => {
                    let (t_defocus, t_depth) = teacher_taps(teachers, distill.taps, &batch)?;
                    let lf = multi_tap_distill_loss(
                        &student_taps(&output.encoder, distill.taps),
                        &t_defocus,
                        &t_depth,
                        &projectors.pairs(),
                        distill.norm_guard,
                    )?;
                    stage2_total(&output, &batch.labels, &lf, &w)?
                }
                Objective::Rdffnet {
                    depth_teacher,
                    kind,
                } => {
                    let target = depth_teacher.pseudo_label(&batch.images, batch.depth.as_ref())?;
                    rdffnet_total(&output, &batch.labels, &target, &w, *kind)?
                }
            };
            let s = breakdown.scalars(&w)?;
            if !s.total.is_finite() {
                let err = DbdError::NonFinite {
                    epoch,
                    batch: b,
                    components: format!(
                        "{} samples={:?}",
                        describe_components(&s),
                        batch.source_ids
                    ),
                };
                if let Some(dir) = &options.output_dir {
                    std::fs::write(dir.join("nan_abort.txt"), format!("{err}\n"))?;
                }
                return Err(err);
            }
            let lr = poly_lr(
                config.lr_model,
                iteration,
                total_iters,
                config.lr_poly_power,
            );
            let grads = breakdown.total.backward()?;
            model_opt.step(&grads, lr)?;
            if let Some(opt) = proj_opt.as_mut() {
                opt.step(&grads, config.lr_projector)?;
            }
            iteration += 1;
            step_losses.push(s.total);
            scalars.push(s);
        }
        let record = EpochRecord {
            stage: stage.to_string(),
            epoch,
            iteration,
            lr: epoch_lr,
            lr_projector: proj_opt.as_ref().map(|_| config.lr_projector),
            beta,
            lambda_edge: w.lambda_edge,
            batches: scalars.len(),
            loss: mean_scalars(&scalars),
        };
        log::info!(
            "{stage} epoch {epoch}/{}: loss {:.5} (bce {:.5}, edge term {:.5}, distill term {:.5})",
            config.max_epochs,
            record.loss.total,
            record.loss.bce,
            record.loss.edge_term,
            record.loss.distill_term
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
            f.flush()?;
        }
        history.push(record);
        if let Some(dir) = &options.output_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                save_state(
                    &epoch_checkpoint_path(dir, epoch),
                    model,
                    &objective,
                    &model_opt,
                    proj_opt.as_ref(),
                    epoch,
                    iteration,
                    options,
                )?;
            }
        }
    }

    let checkpoint = match &options.output_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT_NAME);
            let last = history.last().map(|r| r.epoch).unwrap_or(config.max_epochs);
            save_state(
                &path,
                model,
                &objective,
                &model_opt,
                proj_opt.as_ref(),
                last,
                iteration,
                options,
            )?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainReport {
        history,
        step_losses,
        checkpoint,
        optimizer_params,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    path: &Path,
    model: &DbdNet,
    objective: &Objective<'_>,
    model_opt: &Adam,
    proj_opt: Option<&Adam>,
    epoch: usize,
    iteration: usize,
    options: &TrainOptions,
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .params()
        .snapshot()?
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect();
    tensors.extend(model_opt.state("opt.model.")?);
    if let Objective::Stage2 { projectors, .. } = objective {
        tensors.extend(
            projectors
                .params()
                .snapshot()?
                .into_iter()
                .map(|(k, v)| (format!("proj.{k}"), v)),
        );
    }
    if let Some(opt) = proj_opt {
        tensors.extend(opt.state("opt.proj.")?);
    }
    let header = CheckpointHeader {
        stage: Some(objective.stage().to_string()),
        epoch,
        iteration,
        run_config: options.run_config.clone(),
        ..CheckpointHeader::network(model.config().clone())
    };
    write_checkpoint(path, &tensors, &header)
}

fn student_taps(encoder: &EncoderOutput, taps: DistillTaps) -> Vec<Tensor> {
    match taps {
        DistillTaps::Final => vec![encoder.final_feature.clone()],
        DistillTaps::PerStage => encoder.stage_features.clone(),
    }
}

fn teacher_taps(
    teachers: &TeacherBundle,
    taps: DistillTaps,
    batch: &Batch,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let depth = batch.depth.as_ref();
    match taps {
        DistillTaps::Final => Ok((
            vec![teachers.defocus_features(&batch.images)?],
            vec![teachers.depth.features(&batch.images, depth)?],
        )),
        DistillTaps::PerStage => {
            let defocus = teachers.defocus_stage_features(&batch.images)?;
            let depth = teachers
                .depth
                .stage_features(&batch.images, depth, defocus.len())?;
            Ok((defocus, depth))
        }
    }
}

fn check_tap_points(
    student: &DbdNet,
    teachers: &TeacherBundle,
    projectors: &Projectors,
    taps: DistillTaps,
    sample: &[SampleRecord],
    size: (usize, usize),
) -> Result<()> {
    if teachers.defocus.config().input_size != size {
        return Err(DbdError::Config(format!(
            "defocus teacher runs at {:?} but the student at {size:?}",
            teachers.defocus.config().input_size
        )));
    }
    let batch = Batch::from_records(sample, student.device())?;
    let s = student_taps(&student.encoder_features(&batch.images)?, taps);
    let (t1, t2) = teacher_taps(teachers, taps, &batch)?;
    let pairs = projectors.pairs();
    if t1.len() != s.len() || t2.len() != s.len() || pairs.len() != s.len() {
        return Err(DbdError::Config(format!(
            "student has {} taps, defocus teacher {}, depth teacher {}, projectors {}",
            s.len(),
            t1.len(),
            t2.len(),
            pairs.len()
        )));
    }
    for (k, student_tap) in s.iter().enumerate() {
        let (_, _, sh, sw) = student_tap.dims4()?;
        for (t, who, proj) in [
            (&t1[k], "defocus", pairs[k].0),
            (&t2[k], "depth", pairs[k].1),
        ] {
            let (_, c, h, w) = t.dims4()?;
            if (h, w) != (sh, sw) {
                return Err(DbdError::Config(format!(
                    "{who} teacher tap {} is {h}x{w} but the student tap is {sh}x{sw}",
                    k + 1
                )));
            }
            if c != proj.out_channels() {
                return Err(DbdError::Config(format!(
                    "{who} teacher tap {} has {c} channels but its projector emits {}",
                    k + 1,
                    proj.out_channels()
                )));
            }
        }
    }
    Ok(())
}

/// Stage 1: trains `model` on the DBD loss of every output.
pub fn train_stage1(
    model: &DbdNet,
    dataset: &[SampleRecord],
    config: &TrainConfig,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainReport> {
    train_loop(model, Objective::Stage1, dataset, config, weights, options)
}

/// Stage 2: trains `student` and two projectors while distilling the frozen
/// teachers' deepest encoder features into the student's.
pub fn train_stage2(
    student: &DbdNet,
    teachers: &TeacherBundle,
    dataset: &[SampleRecord],
    config: &TrainConfig,
    distill: &DistillConfig,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainReport> {
    let projectors = match distill.taps {
        DistillTaps::Final => Projectors::new(
            student.feature_channels(),
            teachers.defocus.feature_channels(),
            teachers.depth.channels(),
            config.seed,
        )?,
        DistillTaps::PerStage => {
            let student_channels = student.stage_channels();
            Projectors::per_stage(
                &student_channels,
                &teachers.defocus.stage_channels(),
                &teachers.depth.stage_channels(student_channels.len())?,
                config.seed,
            )?
        }
    };
    let objective = Objective::Stage2 {
        teachers,
        projectors,
        distill,
    };
    train_loop(student, objective, dataset, config, weights, options)
}

/// Response-based baseline: DBD loss plus depth regression on extra heads.
pub fn train_rdffnet(
    model: &DbdNet,
    depth_teacher: &dyn DepthTeacher,
    dataset: &[SampleRecord],
    config: &TrainConfig,
    weights: &LossWeights,
    options: &TrainOptions,
) -> Result<TrainReport> {
    if !model.config().depth_heads {
        return Err(DbdError::Config(
            "the response baseline needs a model built with depth_heads = true".into(),
        ));
    }
    let objective = Objective::Rdffnet {
        depth_teacher,
        kind: config.rdffnet_depth_loss,
    };
    train_loop(model, objective, dataset, config, weights, options)
}
