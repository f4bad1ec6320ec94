//! Two-stage depth feature distillation: optimizers, projectors, teachers and
//! the training loops.

pub mod optim;
pub mod teacher;
pub mod train;

pub use optim::{poly_lr, Adam, AdamConfig};
pub use teacher::{
    make_depth_teacher, DepthNet, DepthTeacher, DepthTeacherKind, DepthTeacherSource, Projector,
    Projectors, SyntheticDepthTeacher, TeacherBundle,
};
pub use train::{
    epoch_order, read_history, train_rdffnet, train_stage1, train_stage2, DistillConfig,
    DistillTaps, EpochRecord, StageLoss, StudentInit, TrainConfig, TrainOptions, TrainReport,
    FINAL_CHECKPOINT_NAME, HISTORY_NAME,
};
