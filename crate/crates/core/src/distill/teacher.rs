//! Feature-alignment projectors and the frozen teachers of stage 2.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{DbdError, Result};
use crate::model::{
    build_builtin_backbone, read_checkpoint, write_checkpoint, Backbone, CheckpointHeader,
    CheckpointKind, DbdNet, ModelConfig,
};
use crate::ops::{resize_bilinear, sigmoid, Conv, ConvGeometry, Gain, Init, ParamStore};
use crate::seed::{stream, tag};

/// 1x1 convolution from student channels into a teacher's channel space.
pub struct Projector {
    conv: Conv,
}

impl Projector {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        student_channels: usize,
        teacher_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::pointwise(
                init,
                name,
                (student_channels, teacher_channels),
                Gain::Linear,
            )?,
        })
    }

    /// Fixed weights `[teacher, student, 1, 1]`, e.g. for tests.
    pub fn from_weights(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        Ok(Self {
            conv: Conv::from_parts(weight, bias, ConvGeometry::new(1, 1, 0, 1))?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward(x)
    }
}

/// Projector pairs with their own parameter store (and optimizer).
pub struct Projectors {
    store: ParamStore,
    /// Deepest tap.
    pub defocus: Projector,
    pub depth: Projector,
    /// Pairs for shallower taps, shallow to deep; empty with a single tap.
    pub shallow: Vec<(Projector, Projector)>,
}

impl Projectors {
    pub fn new(
        student: usize,
        defocus_teacher: usize,
        depth_teacher: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::per_stage(&[student], &[defocus_teacher], &[depth_teacher], seed)
    }

    /// One projector pair per tap; channel lists run shallow to deep.
    pub fn per_stage(
        student: &[usize],
        defocus_teacher: &[usize],
        depth_teacher: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let n = student.len();
        if n == 0 || defocus_teacher.len() != n || depth_teacher.len() != n {
            return Err(DbdError::Config(format!(
                "tap counts differ: student {n}, defocus teacher {}, depth teacher {}",
                defocus_teacher.len(),
                depth_teacher.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[tag::PROJECTORS]);
        let device = Device::Cpu;
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            device: &device,
        };
        let defocus = Projector::new(
            &mut init,
            "proj.defocus",
            student[n - 1],
            defocus_teacher[n - 1],
        )?;
        let depth = Projector::new(
            &mut init,
            "proj.depth",
            student[n - 1],
            depth_teacher[n - 1],
        )?;
        let mut shallow = Vec::with_capacity(n - 1);
        for k in 0..n - 1 {
            let p = format!("proj.stage{}", k + 1);
            shallow.push((
                Projector::new(
                    &mut init,
                    &format!("{p}.defocus"),
                    student[k],
                    defocus_teacher[k],
                )?,
                Projector::new(
                    &mut init,
                    &format!("{p}.depth"),
                    student[k],
                    depth_teacher[k],
                )?,
            ));
        }
        Ok(Self {
            store,
            defocus,
            depth,
            shallow,
        })
    }

    /// `(defocus, depth)` pairs, shallow to deep.
    pub fn pairs(&self) -> Vec<(&Projector, &Projector)> {
        self.shallow
            .iter()
            .map(|(a, b)| (a, b))
            .chain(std::iter::once((&self.defocus, &self.depth)))
            .collect()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }
}

/// Frozen provider of depth features for a batch.
pub trait DepthTeacher {
    fn channels(&self) -> usize;
    /// Features at the distillation tap point, detached from any graph.
    /// `depth` is the ground-truth depth in metres, when the batch carries it.
    fn features(&self, images: &Tensor, depth: Option<&Tensor>) -> Result<Tensor>;
    /// Channel counts of `n` taps, shallow to deep, the last being the deepest.
    fn stage_channels(&self, n: usize) -> Result<Vec<usize>>;
    /// Features at `n` taps, shallow to deep; tap `k` of `n` has twice the
    /// resolution of tap `k + 1`.
    fn stage_features(
        &self,
        images: &Tensor,
        depth: Option<&Tensor>,
        n: usize,
    ) -> Result<Vec<Tensor>>;
    /// Depth pseudo-label `[B, 1, H, W]` in `[0, 1]` (larger = nearer), detached.
    fn pseudo_label(&self, images: &Tensor, depth: Option<&Tensor>) -> Result<Tensor>;
    fn params(&self) -> &ParamStore;
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTeacherKind {
    /// Fixed random encoding of ground-truth inverse depth.
    #[default]
    SyntheticOracle,
    /// A depth network loaded from a checkpoint.
    ExternalCheckpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DepthTeacherSource {
    SyntheticOracle {
        channels: usize,
        stride: usize,
        seed: u64,
    },
    ExternalCheckpoint(PathBuf),
}

/// Inverse depth relative to this distance, clamped to `[0, 1]`.
pub const INVERSE_DEPTH_REFERENCE_M: f64 = 0.5;

/// Shallow frozen encoder of ground-truth depth: inverse depth is average
/// pooled to the tap resolution, then passed through a random 1x1 and 3x3
/// convolution pair with ReLU.
pub struct SyntheticDepthTeacher {
    store: ParamStore,
    lift: Conv,
    mix: Conv,
    stride: usize,
}

impl SyntheticDepthTeacher {
    pub fn new(channels: usize, stride: usize, seed: u64) -> Result<Self> {
        if channels == 0 || stride == 0 {
            return Err(DbdError::Config(
                "synthetic depth teacher needs positive channels and stride".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[tag::DEPTH_TEACHER]);
        let device = Device::Cpu;
        let lift_w = store.uniform(
            "depth_teacher.lift.weight".into(),
            &[channels, 1, 1, 1],
            4.0,
            &mut rng,
            &device,
        )?;
        let lift_b = store.uniform(
            "depth_teacher.lift.bias".into(),
            &[channels],
            2.0,
            &mut rng,
            &device,
        )?;
        let bound = (6.0 / (9 * channels) as f64).sqrt();
        let mix_w = store.uniform(
            "depth_teacher.mix.weight".into(),
            &[channels, channels, 3, 3],
            bound,
            &mut rng,
            &device,
        )?;
        let mix_b = store.uniform(
            "depth_teacher.mix.bias".into(),
            &[channels],
            0.1,
            &mut rng,
            &device,
        )?;
        Ok(Self {
            store,
            lift: Conv::from_parts(lift_w, Some(lift_b), ConvGeometry::new(1, 1, 0, 1))?,
            mix: Conv::from_parts(mix_w, Some(mix_b), ConvGeometry::new(3, 1, 1, 1))?,
            stride,
        })
    }

    pub fn inverse_depth(depth: &Tensor) -> Result<Tensor> {
        Ok(depth
            .recip()?
            .affine(INVERSE_DEPTH_REFERENCE_M, 0.0)?
            .clamp(0.0, 1.0)?)
    }

    fn encode(&self, depth: Option<&Tensor>, stride: usize) -> Result<Tensor> {
        let inv = Self::inverse_depth(&require_depth(depth)?.detach())?;
        let pooled = if stride > 1 {
            inv.avg_pool2d(stride)?
        } else {
            inv
        };
        let h = self.lift.forward(&pooled)?.relu()?;
        Ok(self.mix.forward(&h)?.relu()?.detach())
    }

    fn tap_strides(&self, n: usize) -> Result<Vec<usize>> {
        (0..n)
            .map(|k| match self.stride >> (n - 1 - k) {
                0 => Err(DbdError::Config(format!(
                    "synthetic depth teacher stride {} is too small for {n} taps",
                    self.stride
                ))),
                s => Ok(s),
            })
            .collect()
    }
}

impl DepthTeacher for SyntheticDepthTeacher {
    fn channels(&self) -> usize {
        self.lift.out_channels()
    }

    fn features(&self, _images: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
        self.encode(depth, self.stride)
    }

    fn stage_channels(&self, n: usize) -> Result<Vec<usize>> {
        self.tap_strides(n)?;
        Ok(vec![self.channels(); n])
    }

    fn stage_features(
        &self,
        _images: &Tensor,
        depth: Option<&Tensor>,
        n: usize,
    ) -> Result<Vec<Tensor>> {
        self.tap_strides(n)?
            .into_iter()
            .map(|s| self.encode(depth, s))
            .collect()
    }

    fn pseudo_label(&self, _images: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
        Self::inverse_depth(&require_depth(depth)?.detach())
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        format!(
            "synthetic oracle ({} channels, stride {})",
            self.channels(),
            self.stride
        )
    }
}

fn require_depth(depth: Option<&Tensor>) -> Result<&Tensor> {
    depth.ok_or_else(|| {
        DbdError::Config(
            "the synthetic depth teacher needs ground-truth depth maps in the dataset".into(),
        )
    })
}

/// Depth network stored as a `depth_net` checkpoint: an encoder plus a 1x1
/// inverse-depth head on its deepest stage.
pub struct DepthNet {
    config: ModelConfig,
    store: ParamStore,
    backbone: Box<dyn Backbone>,
    head: Conv,
}

impl DepthNet {
    /// Uses `config.backbone`, `num_decoder_levels` and `input_size`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[tag::DEPTH_TEACHER]);
        let device = Device::Cpu;
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            device: &device,
        };
        let backbone = build_builtin_backbone(&mut init, "depth_net", config)?;
        let deepest = *backbone
            .stage_channels()
            .last()
            .expect("at least one stage");
        let head = Conv::pointwise(&mut init, "depth_net.head", (deepest, 1), Gain::Linear)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            kind: CheckpointKind::DepthNet,
            ..CheckpointHeader::network(self.config.clone())
        };
        write_checkpoint(path, &self.store.snapshot()?, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(DbdError::load(path, "depth teacher checkpoint not found"));
        }
        let (tensors, header) = read_checkpoint(path)?;
        if header.kind != CheckpointKind::DepthNet {
            return Err(DbdError::load(
                path,
                format!("expected a depth_net checkpoint, found {:?}", header.kind),
            ));
        }
        let config = header
            .model
            .ok_or_else(|| DbdError::load(path, "depth checkpoint has no configuration"))?;
        let net = Self::new(&config, 0)?;
        net.store.load(&tensors)?;
        Ok(net)
    }
}

impl DepthTeacher for DepthNet {
    fn channels(&self) -> usize {
        *self
            .backbone
            .stage_channels()
            .last()
            .expect("at least one stage")
    }

    fn features(&self, images: &Tensor, _depth: Option<&Tensor>) -> Result<Tensor> {
        let stages = self.backbone.forward(&images.detach())?;
        Ok(stages.last().expect("at least one stage").detach())
    }

    fn stage_channels(&self, n: usize) -> Result<Vec<usize>> {
        let c = self.backbone.stage_channels();
        if c.len() != n {
            return Err(DbdError::Config(format!(
                "depth network has {} stages, not {n}",
                c.len()
            )));
        }
        Ok(c)
    }

    fn stage_features(
        &self,
        images: &Tensor,
        _depth: Option<&Tensor>,
        n: usize,
    ) -> Result<Vec<Tensor>> {
        self.stage_channels(n)?;
        Ok(self
            .backbone
            .forward(&images.detach())?
            .iter()
            .map(Tensor::detach)
            .collect())
    }

    fn pseudo_label(&self, images: &Tensor, depth: Option<&Tensor>) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let logits = self.head.forward(&self.features(images, depth)?)?;
        Ok(sigmoid(&resize_bilinear(&logits, (h, w))?)?.detach())
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn describe(&self) -> String {
        format!("depth network ({} backbone)", self.config.backbone)
    }
}

pub fn make_depth_teacher(source: &DepthTeacherSource) -> Result<Box<dyn DepthTeacher>> {
    match source {
        DepthTeacherSource::SyntheticOracle {
            channels,
            stride,
            seed,
        } => Ok(Box::new(SyntheticDepthTeacher::new(
            *channels, *stride, *seed,
        )?)),
        DepthTeacherSource::ExternalCheckpoint(path) => Ok(Box::new(DepthNet::load(path)?)),
    }
}

/// Frozen defocus teacher plus depth teacher for stage 2.
pub struct TeacherBundle {
    pub defocus: DbdNet,
    pub depth: Box<dyn DepthTeacher>,
}

impl TeacherBundle {
    /// Defocus teacher features at its deepest encoder stage, detached.
    pub fn defocus_features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self
            .defocus
            .encoder_features(&images.detach())?
            .final_feature
            .detach())
    }

    /// Defocus teacher features at every encoder stage, shallow to deep, detached.
    pub fn defocus_stage_features(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self
            .defocus
            .encoder_features(&images.detach())?
            .stage_features
            .iter()
            .map(Tensor::detach)
            .collect())
    }

    /// SHA-256 of both teachers' parameters.
    pub fn fingerprints(&self) -> Result<(String, String)> {
        Ok((
            self.defocus.params().fingerprint()?,
            self.depth.params().fingerprint()?,
        ))
    }
}
