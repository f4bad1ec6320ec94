//! Dataset-level evaluation and the metrics report file.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{
    self, check_thresholds, curve_from_counts, default_thresholds, Confusion, PrCurve,
};
use super::predictor::Predictor;
use crate::data::SampleRecord;
use crate::error::{DbdError, Result};
use crate::ops::resize_array;

pub const POSITIVE_CLASS: &str = "defocus";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beta_squared: f64,
    pub binarize_threshold: f64,
    pub thresholds_for_pr: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beta_squared: 0.3,
            binarize_threshold: 0.5,
            thresholds_for_pr: default_thresholds(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_squared > 0.0 && self.beta_squared.is_finite()) {
            return Err(DbdError::Config(
                "eval.beta_squared must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            return Err(DbdError::Config(
                "eval.binarize_threshold must lie in [0, 1]".into(),
            ));
        }
        check_thresholds(&self.thresholds_for_pr).map_err(|e| DbdError::Config(e.to_string()))
    }
}

/// Metric settings recorded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEcho {
    pub beta_squared: f64,
    pub binarize_threshold: f64,
    pub positive_class: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-image averages.
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub n_images: usize,
    pub config_echo: MetricsEcho,
    /// Micro-averaged over all pixels of all images.
    pub pr_curve: PrCurve,
}

/// Scores `predictor` on `records`. Predictions are resized bilinearly to the label resolution.
pub fn evaluate_dataset(
    predictor: &dyn Predictor,
    records: &[SampleRecord],
    config: &EvalConfig,
) -> Result<MetricsReport> {
    config.validate()?;
    if records.is_empty() {
        return Err(DbdError::EmptyDataset("nothing to evaluate".into()));
    }
    let thresholds = &config.thresholds_for_pr;
    let mut counts = vec![Confusion::default(); thresholds.len()];
    let (mut mae, mut f_beta, mut iou) = (0.0, 0.0, 0.0);
    for r in records {
        let label: Array2<f32> = r.blur_label.index_axis(Axis(0), 0).to_owned();
        let pred = resize_array(predictor.predict(&r.image)?.view(), label.dim());
        mae += metrics::mae(pred.view(), label.view())?;
        let c = Confusion::count(pred.view(), label.view(), config.binarize_threshold)?;
        f_beta += c.fbeta(config.beta_squared);
        iou += c.iou();
        for (acc, &t) in counts.iter_mut().zip(thresholds) {
            acc.add(&Confusion::count(pred.view(), label.view(), t)?);
        }
    }
    let n = records.len() as f64;
    Ok(MetricsReport {
        mae: mae / n,
        f_beta: f_beta / n,
        iou: iou / n,
        n_images: records.len(),
        config_echo: MetricsEcho {
            beta_squared: config.beta_squared,
            binarize_threshold: config.binarize_threshold,
            positive_class: POSITIVE_CLASS.to_string(),
        },
        pr_curve: curve_from_counts(&counts, thresholds),
    })
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| DbdError::Argument(format!("{key}: {e}")))
        })
        .collect()
}

impl MetricsReport {
    /// One `key: value` per line; floats use the shortest exact representation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mae: {}", self.mae);
        let _ = writeln!(s, "f_beta: {}", self.f_beta);
        let _ = writeln!(s, "iou: {}", self.iou);
        let _ = writeln!(s, "n_images: {}", self.n_images);
        let e = &self.config_echo;
        let _ = writeln!(s, "config_echo.beta_squared: {}", e.beta_squared);
        let _ = writeln!(
            s,
            "config_echo.binarize_threshold: {}",
            e.binarize_threshold
        );
        let _ = writeln!(s, "config_echo.positive_class: {}", e.positive_class);
        let _ = writeln!(s, "pr_thresholds: {}", join(&self.pr_curve.thresholds));
        let _ = writeln!(s, "pr_precision: {}", join(&self.pr_curve.precision));
        let _ = writeln!(s, "pr_recall: {}", join(&self.pr_curve.recall));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| DbdError::Argument(format!("malformed report line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| DbdError::Argument(format!("report lacks {k:?}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|e| DbdError::Argument(format!("{k}: {e}")))
        };
        Ok(Self {
            mae: num("mae")?,
            f_beta: num("f_beta")?,
            iou: num("iou")?,
            n_images: get("n_images")?
                .parse()
                .map_err(|e| DbdError::Argument(format!("n_images: {e}")))?,
            config_echo: MetricsEcho {
                beta_squared: num("config_echo.beta_squared")?,
                binarize_threshold: num("config_echo.binarize_threshold")?,
                positive_class: get("config_echo.positive_class")?.to_string(),
            },
            pr_curve: PrCurve {
                thresholds: parse_list("pr_thresholds", get("pr_thresholds")?)?,
                precision: parse_list("pr_precision", get("pr_precision")?)?,
                recall: parse_list("pr_recall", get("pr_recall")?)?,
            },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DbdError::load(path, e))?;
        Self::from_text(&text)
    }

    /// `mae=... f_beta=... iou=... n_images=...`
    pub fn echo_line(&self) -> String {
        format!(
            "mae={} f_beta={} iou={} n_images={}",
            self.mae, self.f_beta, self.iou, self.n_images
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EchoLine {
    pub mae: f64,
    pub f_beta: f64,
    pub iou: f64,
    pub n_images: usize,
}

/// Parses the line written by [`MetricsReport::echo_line`].
pub fn parse_echo_line(line: &str) -> Result<EchoLine> {
    let mut out = (None, None, None, None);
    for part in line.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| DbdError::Argument(format!("malformed echo field {part:?}")))?;
        let bad = |e: &dyn std::fmt::Display| DbdError::Argument(format!("{k}: {e}"));
        match k {
            "mae" => out.0 = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
            "f_beta" => out.1 = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
            "iou" => out.2 = Some(v.parse::<f64>().map_err(|e| bad(&e))?),
            "n_images" => out.3 = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            _ => {}
        }
    }
    match out {
        (Some(mae), Some(f_beta), Some(iou), Some(n_images)) => Ok(EchoLine {
            mae,
            f_beta,
            iou,
            n_images,
        }),
        _ => Err(DbdError::Argument(format!(
            "incomplete metrics line {line:?}"
        ))),
    }
}
