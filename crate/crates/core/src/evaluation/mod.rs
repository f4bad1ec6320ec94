//! Pixel metrics, predictors and report writing.

pub mod metrics;
pub mod plot;
pub mod predictor;
pub mod report;

pub use metrics::{
    default_thresholds, fbeta, iou, mae, pr_curve, Confusion, PrCurve, LABEL_THRESHOLD,
};
pub use plot::{render_pr_plot, write_pr_plot};
pub use predictor::{load_predictor, write_channel_echo, ChannelEcho, NetPredictor, Predictor};
pub use report::{
    evaluate_dataset, parse_echo_line, EchoLine, EvalConfig, MetricsEcho, MetricsReport,
    POSITIVE_CLASS,
};
