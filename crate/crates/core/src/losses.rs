//! Training objectives: pixel BCE, dice loss on DOF edges, the normalised
//! pair-wise feature distance, the stage totals and the distillation weight
//! schedule.
//!
//! Every function works on any float dtype; training runs in f32 and the
//! gradient checks run in f64.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::distill::Projector;
use crate::error::{DbdError, Result};
use crate::model::ModelOutput;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in both numerator and denominator of the dice score.
pub const DICE_SMOOTH: f64 = 1.0;
/// Label binarisation threshold for edge extraction.
pub const EDGE_THRESHOLD: f64 = 0.5;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DbdError::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Mean binary cross entropy `-(y ln p + (1 - y) ln(1 - p))` over all pixels.
pub fn bce_loss(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    same_shape(pred, label, "bce_loss")?;
    let p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = label.mul(&p.log()?)?;
    let neg = label.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

#[derive(Clone, Copy)]
enum Extremum {
    Max,
    Min,
}

/// 3x3 max or min filter with clamped borders, so only in-bounds neighbours count.
fn neighbourhood(x: &Tensor, which: Extremum) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let mut acc: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let s = padded.narrow(2, dy, h)?.narrow(3, dx, w)?;
            acc = Some(match (acc, which) {
                (None, _) => s,
                (Some(a), Extremum::Max) => a.maximum(&s)?,
                (Some(a), Extremum::Min) => a.minimum(&s)?,
            });
        }
    }
    Ok(acc.expect("nine taps"))
}

/// Morphological gradient (3x3 dilation minus 3x3 erosion) of a map in `[0, 1]`.
/// Differentiable; on a binary map it equals dilation XOR erosion.
pub fn soft_edges(prob: &Tensor) -> Result<Tensor> {
    let dilated = neighbourhood(prob, Extremum::Max)?;
    let eroded = neighbourhood(prob, Extremum::Min)?;
    Ok((dilated - eroded)?)
}

/// Binary DOF boundary of `mask` `[B, 1, H, W]` after binarising at `threshold`.
pub fn extract_edges(mask: &Tensor, threshold: f64) -> Result<Tensor> {
    let binary = mask.gt(threshold)?.to_dtype(mask.dtype())?;
    soft_edges(&binary.detach())
}

/// `1 - dice(pred_edge, label_edge)`, dice computed per sample and averaged over the batch.
pub fn dice_edge_loss(pred_edge: &Tensor, label_edge: &Tensor) -> Result<Tensor> {
    same_shape(pred_edge, label_edge, "dice_edge_loss")?;
    let b = pred_edge.dim(0)?;
    let p = pred_edge.reshape((b, ()))?;
    let l = label_edge.reshape((b, ()))?;
    let inter = p.mul(&l)?.sum(D::Minus1)?;
    let denom = (p.sum(D::Minus1)? + l.sum(D::Minus1)?)?.affine(1.0, DICE_SMOOTH)?;
    let dice = inter.affine(2.0, DICE_SMOOTH)?.div(&denom)?;
    Ok(dice.mean_all()?.affine(-1.0, 1.0)?)
}

/// One evaluation of the DBD loss `bce + lambda * edge`.
#[derive(Debug, Clone)]
pub struct DbdTerms {
    pub bce: Tensor,
    pub edge: Tensor,
    pub total: Tensor,
}

pub fn dbd_loss(pred: &Tensor, label: &Tensor, lambda_edge: f64) -> Result<DbdTerms> {
    let bce = bce_loss(pred, label)?;
    let edge = dice_edge_loss(&soft_edges(pred)?, &extract_edges(label, EDGE_THRESHOLD)?)?;
    let total = (&bce + edge.affine(lambda_edge, 0.0)?)?;
    Ok(DbdTerms { bce, edge, total })
}

/// Handling of zero-norm inputs in [`pairwise_similarity_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormGuard {
    /// Fail with a numeric guard error.
    Strict,
    /// Normalise by `sqrt(sum(u^2) + eps)`.
    Epsilon(f64),
}

impl Default for NormGuard {
    fn default() -> Self {
        NormGuard::Epsilon(1e-12)
    }
}

fn normalise_rows(x: &Tensor, guard: NormGuard) -> Result<Tensor> {
    let sq = x.sqr()?.sum_keepdim(D::Minus1)?;
    let norm = match guard {
        NormGuard::Strict => {
            let norms = sq.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if let Some(i) = norms.iter().position(|n| *n == 0.0) {
                return Err(DbdError::Numeric(format!(
                    "sample {i} has a zero-norm feature tensor"
                )));
            }
            sq.sqrt()?
        }
        NormGuard::Epsilon(eps) => sq.affine(1.0, eps)?.sqrt()?,
    };
    Ok(x.broadcast_div(&norm)?)
}

/// `|| u/|u| - v/|v| ||^2` with each sample's tensor flattened to one vector;
/// averaged over the batch.
pub fn pairwise_similarity_loss(u: &Tensor, v: &Tensor, guard: NormGuard) -> Result<Tensor> {
    same_shape(u, v, "pairwise_similarity_loss")?;
    let b = u.dim(0)?;
    let un = normalise_rows(&u.reshape((b, ()))?, guard)?;
    let vn = normalise_rows(&v.reshape((b, ()))?, guard)?;
    Ok((un - vn)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Plain mean squared error, the alternative depth loss for the response baseline.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "mse_loss")?;
    Ok((pred - target)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the DOF-edge term inside every DBD loss.
    pub lambda_edge: f64,
    /// Per-side-output weights, shallow to deep.
    pub alpha_side: Vec<f64>,
    /// Current weight of the feature distillation term.
    pub beta_now: f64,
    /// Weight of the depth regression block in the response baseline.
    pub rdffnet_lambda: f64,
    /// Per-side depth weights in the response baseline.
    pub rdffnet_beta_side: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_edge: 0.5,
            alpha_side: vec![1.0; 4],
            beta_now: 0.0,
            rdffnet_lambda: 1.0,
            rdffnet_beta_side: vec![1.0; 4],
        }
    }
}

impl LossWeights {
    pub fn for_levels(levels: usize) -> Self {
        Self {
            alpha_side: vec![1.0; levels],
            rdffnet_beta_side: vec![1.0; levels],
            ..Self::default()
        }
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        let all = [self.lambda_edge, self.beta_now, self.rdffnet_lambda]
            .into_iter()
            .chain(self.alpha_side.iter().copied())
            .chain(self.rdffnet_beta_side.iter().copied());
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(DbdError::Config(format!(
                    "loss weight {w} must be finite and non-negative"
                )));
            }
        }
        if self.alpha_side.len() != levels {
            return Err(DbdError::Config(format!(
                "alpha_side has {} entries for {levels} decoder levels",
                self.alpha_side.len()
            )));
        }
        Ok(())
    }
}

/// Which depth distance the response baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthLossKind {
    /// Normalised squared distance, the same form as the feature loss.
    #[default]
    Normalized,
    Mse,
}

/// All terms of one total loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub final_terms: DbdTerms,
    pub side_terms: Vec<DbdTerms>,
    /// Unweighted feature distillation loss, when present.
    pub distill: Option<Tensor>,
    /// Unweighted depth losses `[final, side_1, ...]`, when present.
    pub depth: Option<Vec<Tensor>>,
    pub total: Tensor,
}

/// Plain-number view of a [`LossBreakdown`] for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossScalars {
    pub total: f64,
    /// `bce_f + sum_k alpha_k bce_k`.
    pub bce: f64,
    /// `edge_f + sum_k alpha_k edge_k`, before the lambda weight.
    pub edge: f64,
    /// Contribution of the edge terms to the total: `lambda * edge`.
    pub edge_term: f64,
    pub distill: f64,
    /// Contribution of distillation to the total: `beta * distill`.
    pub distill_term: f64,
    pub depth: f64,
}

impl LossBreakdown {
    pub fn scalars(&self, weights: &LossWeights) -> Result<LossScalars> {
        let mut bce = scalar(&self.final_terms.bce)?;
        let mut edge = scalar(&self.final_terms.edge)?;
        for (a, t) in weights.alpha_side.iter().zip(&self.side_terms) {
            bce += a * scalar(&t.bce)?;
            edge += a * scalar(&t.edge)?;
        }
        let distill = self
            .distill
            .as_ref()
            .map(scalar)
            .transpose()?
            .unwrap_or(0.0);
        let depth = match &self.depth {
            Some(terms) => {
                let mut acc = scalar(&terms[0])?;
                for (b, t) in weights.rdffnet_beta_side.iter().zip(&terms[1..]) {
                    acc += b * scalar(t)?;
                }
                acc
            }
            None => 0.0,
        };
        Ok(LossScalars {
            total: scalar(&self.total)?,
            bce,
            edge,
            edge_term: weights.lambda_edge * edge,
            distill,
            distill_term: weights.beta_now * distill,
            depth,
        })
    }
}

/// Feature distillation loss: the pair-wise distance between the projected
/// student feature and each teacher feature. Teacher features are detached.
pub fn feature_distill_loss(
    student: &Tensor,
    defocus_teacher: &Tensor,
    depth_teacher: &Tensor,
    proj_defocus: &Projector,
    proj_depth: &Projector,
    guard: NormGuard,
) -> Result<Tensor> {
    let a = proj_defocus.forward(student)?;
    let b = proj_depth.forward(student)?;
    for (p, t, who) in [
        (&a, defocus_teacher, "defocus"),
        (&b, depth_teacher, "depth"),
    ] {
        if p.dims() != t.dims() {
            return Err(DbdError::Dimension(format!(
                "projected student feature {:?} does not match the {who} teacher feature {:?}",
                p.dims(),
                t.dims()
            )));
        }
    }
    let l1 = pairwise_similarity_loss(&a, &defocus_teacher.detach(), guard)?;
    let l2 = pairwise_similarity_loss(&b, &depth_teacher.detach(), guard)?;
    Ok((l1 + l2)?)
}

/// Mean of [`feature_distill_loss`] over taps; all slices run shallow to deep.
pub fn multi_tap_distill_loss(
    student: &[Tensor],
    defocus_teacher: &[Tensor],
    depth_teacher: &[Tensor],
    projectors: &[(&Projector, &Projector)],
    guard: NormGuard,
) -> Result<Tensor> {
    let n = student.len();
    if n == 0 || defocus_teacher.len() != n || depth_teacher.len() != n || projectors.len() != n {
        return Err(DbdError::Dimension(format!(
            "tap counts differ: student {n}, defocus teacher {}, depth teacher {}, projectors {}",
            defocus_teacher.len(),
            depth_teacher.len(),
            projectors.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for k in 0..n {
        let (pa, pb) = projectors[k];
        let l = feature_distill_loss(
            &student[k],
            &defocus_teacher[k],
            &depth_teacher[k],
            pa,
            pb,
            guard,
        )?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    let total = total.expect("at least one tap");
    if n == 1 {
        Ok(total)
    } else {
        Ok(total.affine(1.0 / n as f64, 0.0)?)
    }
}

/// `l_d(final) + sum_k alpha_k l_d(side_k)`.
pub fn stage1_total(
    output: &ModelOutput,
    label: &Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate(output.side_predictions.len())?;
    let final_terms = dbd_loss(&output.final_prediction, label, weights.lambda_edge)?;
    let mut total = final_terms.total.clone();
    let mut side_terms = Vec::with_capacity(output.side_predictions.len());
    for (side, &alpha) in output.side_predictions.iter().zip(&weights.alpha_side) {
        let t = dbd_loss(side, label, weights.lambda_edge)?;
        total = (total + t.total.affine(alpha, 0.0)?)?;
        side_terms.push(t);
    }
    Ok(LossBreakdown {
        final_terms,
        side_terms,
        distill: None,
        depth: None,
        total,
    })
}

/// Stage-1 total plus `beta * distill`, where `distill` is the feature loss.
pub fn stage2_total(
    output: &ModelOutput,
    label: &Tensor,
    distill: &Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut b = stage1_total(output, label, weights)?;
    b.total = (&b.total + distill.affine(weights.beta_now, 0.0)?)?;
    b.distill = Some(distill.clone());
    Ok(b)
}

/// Stage-1 total plus `lambda * (l2(depth_f) + sum_k beta_k l2(depth_k))`.
pub fn rdffnet_total(
    output: &ModelOutput,
    label: &Tensor,
    depth_label: &Tensor,
    weights: &LossWeights,
    kind: DepthLossKind,
) -> Result<LossBreakdown> {
    let depth = output.depth.as_ref().ok_or_else(|| {
        DbdError::Config("model has no depth heads; build it with depth_heads = true".into())
    })?;
    if weights.rdffnet_beta_side.len() != depth.side_predictions.len() {
        return Err(DbdError::Config(format!(
            "rdffnet_beta_side has {} entries for {} depth side outputs",
            weights.rdffnet_beta_side.len(),
            depth.side_predictions.len()
        )));
    }
    let dist = |p: &Tensor| match kind {
        DepthLossKind::Normalized => pairwise_similarity_loss(p, depth_label, NormGuard::default()),
        DepthLossKind::Mse => mse_loss(p, depth_label),
    };
    let mut b = stage1_total(output, label, weights)?;
    let mut terms = vec![dist(&depth.final_prediction)?];
    let mut block = terms[0].clone();
    for (side, &beta) in depth
        .side_predictions
        .iter()
        .zip(&weights.rdffnet_beta_side)
    {
        let t = dist(side)?;
        block = (block + t.affine(beta, 0.0)?)?;
        terms.push(t);
    }
    b.total = (&b.total + block.affine(weights.rdffnet_lambda, 0.0)?)?;
    b.depth = Some(terms);
    Ok(b)
}

/// Distillation weight for a 1-based `epoch` out of `last_epoch`:
/// 3 up to epoch 15, then `3 * (epoch - 15) / last_epoch`.
pub fn beta_schedule(epoch: usize, last_epoch: usize) -> Result<f64> {
    if epoch < 1 || epoch > last_epoch {
        return Err(DbdError::Argument(format!(
            "epoch {epoch} outside 1..={last_epoch}"
        )));
    }
    Ok(if epoch <= 15 {
        3.0
    } else {
        3.0 * ((epoch - 15) as f64 / last_epoch as f64)
    })
}
