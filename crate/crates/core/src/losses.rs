//! Training objective: sigmoid focal alignment loss over the concept x anchor
//! score matrix, soft-target centerness loss, GIoU box loss, and their
//! weighted sum with the regression term masked for non-detection data.
//!
//! Every loss has a `*_with_grad` form returning analytic gradients; the
//! trainer feeds those into the autodiff graph of the encoders.

use serde::{Deserialize, Serialize};

use crate::data::RecordKind;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    /// Focal class-balance weight; negative disables it.
    pub alpha_focal: f64,
    /// Centerness weight.
    pub alpha: f64,
    /// Regression weight (detection data only).
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            alpha_focal: 0.25,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ali: f64,
    pub l_cen: f64,
    pub l_reg: f64,
    pub total: f64,
    pub num_positives: usize,
    /// Weight actually applied to `l_reg` (0 for grounding and image-text data).
    pub reg_weight: f64,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal term and its derivative for one logit.
fn focal_entry(s: f64, positive: bool, gamma: f64, alpha_focal: f64) -> (f64, f64) {
    let p = sigmoid(s);
    let log_p = -softplus(-s);
    let log_1mp = -softplus(s);
    if positive {
        let a = if alpha_focal < 0.0 { 1.0 } else { alpha_focal };
        let w = (1.0 - p).powf(gamma);
        let loss = -a * w * log_p;
        let grad = a * w * (gamma * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let a = if alpha_focal < 0.0 { 1.0 } else { 1.0 - alpha_focal };
        let w = p.powf(gamma);
        let loss = -a * w * log_1mp;
        let grad = a * w * (p - gamma * (1.0 - p) * log_1mp);
        (loss, grad)
    }
}

fn check_alignment_inputs(s: &Matrix, g: &Matrix, normalizer: f64) -> Result<()> {
    if s.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "scores are {:?} but targets are {:?}",
            s.shape(),
            g.shape()
        )));
    }
    if s.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in alignment scores".into()));
    }
    if !(normalizer >= 1.0) {
        return Err(Error::Config(format!("normalizer must be >= 1, got {normalizer}")));
    }
    Ok(())
}

/// Sum of focal terms over all `N x M` entries divided by `normalizer`.
pub fn sigmoid_focal_alignment_loss(
    s: &Matrix,
    g: &Matrix,
    gamma: f64,
    alpha_focal: f64,
    normalizer: f64,
) -> Result<f64> {
    check_alignment_inputs(s, g, normalizer)?;
    let sum: f64 = s
        .as_slice()
        .iter()
        .zip(g.as_slice())
        .map(|(&x, &t)| focal_entry(x, t > 0.5, gamma, alpha_focal).0)
        .sum();
    Ok(sum / normalizer)
}

pub fn sigmoid_focal_alignment_loss_with_grad(
    s: &Matrix,
    g: &Matrix,
    gamma: f64,
    alpha_focal: f64,
    normalizer: f64,
) -> Result<(f64, Matrix)> {
    check_alignment_inputs(s, g, normalizer)?;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    let mut sum = 0.0;
    for (i, (&x, &t)) in s.as_slice().iter().zip(g.as_slice()).enumerate() {
        let (l, d) = focal_entry(x, t > 0.5, gamma, alpha_focal);
        sum += l;
        grad.as_mut_slice()[i] = d / normalizer;
    }
    Ok((sum / normalizer, grad))
}

/// Soft-target binary cross-entropy over positive anchors, divided by
/// `normalizer`. Returns the loss and the gradient w.r.t. every logit.
pub fn centerness_loss_with_grad(
    logits: &[f64],
    targets: &[f64],
    positive_mask: &[bool],
    normalizer: f64,
) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || logits.len() != positive_mask.len() {
        return Err(Error::Shape(format!(
            "centerness inputs have lengths {}, {}, {}",
            logits.len(),
            targets.len(),
            positive_mask.len()
        )));
    }
    let mut grad = vec![0.0; logits.len()];
    if !positive_mask.iter().any(|&m| m) {
        return Ok((0.0, grad));
    }
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if positive_mask[i] {
            let (x, t) = (logits[i], targets[i]);
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("centerness logit {i}")));
            }
            sum += softplus(x) - t * x;
            grad[i] = (sigmoid(x) - t) / normalizer;
        }
    }
    Ok((sum / normalizer, grad))
}

/// Centerness loss averaged over the positive anchors; 0 without positives.
pub fn centerness_loss(logits: &[f64], targets: &[f64], positive_mask: &[bool]) -> Result<f64> {
    let n = positive_mask.iter().filter(|&&m| m).count().max(1) as f64;
    Ok(centerness_loss_with_grad(logits, targets, positive_mask, n)?.0)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    Ok(giou_with_grad(a, b)?.0)
}

/// GIoU and its gradient w.r.t. the coordinates `(x1, y1, x2, y2)` of `a`.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> Result<(f64, [f64; 4])> {
    a.validate()?;
    b.validate()?;
    let (aw, ah) = (a.width(), a.height());
    let area_a = aw * ah;
    let area_b = b.area();

    let ix1_a = a.x1 > b.x1;
    let iy1_a = a.y1 > b.y1;
    let ix2_a = a.x2 < b.x2;
    let iy2_a = a.y2 < b.y2;
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = area_a + area_b - inter;

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = cw * ch;

    let value = inter / union - (hull - union) / hull;

    // d(inter)
    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if ix1_a {
            d_inter[0] = -ih;
        }
        if ix2_a {
            d_inter[2] = ih;
        }
        if iy1_a {
            d_inter[1] = -iw;
        }
        if iy2_a {
            d_inter[3] = iw;
        }
    }
    let d_area_a = [-ah, -aw, ah, aw];
    let mut d_hull = [0.0; 4];
    if a.x1 < b.x1 {
        d_hull[0] = -ch;
    }
    if a.x2 > b.x2 {
        d_hull[2] = ch;
    }
    if a.y1 < b.y1 {
        d_hull[1] = -cw;
    }
    if a.y2 > b.y2 {
        d_hull[3] = cw;
    }
    // value = I/U - 1 + U/C
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area_a[k] - d_inter[k];
        grad[k] = d_inter[k] / union - inter * d_union / (union * union) + d_union / hull
            - union * d_hull[k] / (hull * hull);
    }
    Ok((value, grad))
}

/// Mean of `1 - giou(pred, target)` over pairs; 0 for no pairs.
pub fn giou_loss(pairs: &[(BBox, BBox)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (p, t) in pairs {
        sum += 1.0 - giou(p, t)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Sum of `1 - giou` over pairs divided by `normalizer`, with per-pair
/// gradients w.r.t. the predicted box.
pub fn giou_loss_with_grad(pairs: &[(BBox, BBox)], normalizer: f64) -> Result<(f64, Vec<[f64; 4]>)> {
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for (p, t) in pairs {
        let (g, d) = giou_with_grad(p, t)?;
        sum += 1.0 - g;
        grads.push(d.map(|x| -x / normalizer));
    }
    Ok((sum / normalizer, grads))
}

/// Standard anchor-delta box parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxCoder {
    /// Upper clamp on the log-scale deltas.
    pub max_log_scale: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        BoxCoder {
            max_log_scale: (1000.0f64 / 16.0).ln(),
        }
    }
}

impl BoxCoder {
    /// `anchor + (dx, dy, dw, dh)` to a box.
    pub fn decode(&self, anchor: &BBox, d: [f64; 4]) -> BBox {
        let (acx, acy) = anchor.center();
        let (aw, ah) = (anchor.width(), anchor.height());
        let cx = acx + d[0] * aw;
        let cy = acy + d[1] * ah;
        let w = aw * d[2].min(self.max_log_scale).exp();
        let h = ah * d[3].min(self.max_log_scale).exp();
        BBox {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    /// Chain rule from a gradient w.r.t. the decoded box to the deltas.
    pub fn backprop(&self, anchor: &BBox, d: [f64; 4], grad_box: [f64; 4]) -> [f64; 4] {
        let (aw, ah) = (anchor.width(), anchor.height());
        let w = aw * d[2].min(self.max_log_scale).exp();
        let h = ah * d[3].min(self.max_log_scale).exp();
        let dw = if d[2] < self.max_log_scale { w / 2.0 } else { 0.0 };
        let dh = if d[3] < self.max_log_scale { h / 2.0 } else { 0.0 };
        [
            (grad_box[0] + grad_box[2]) * aw,
            (grad_box[1] + grad_box[3]) * ah,
            (grad_box[2] - grad_box[0]) * dw,
            (grad_box[3] - grad_box[1]) * dh,
        ]
    }

    pub fn encode(&self, anchor: &BBox, target: &BBox) -> [f64; 4] {
        let (acx, acy) = anchor.center();
        let (tcx, tcy) = target.center();
        [
            (tcx - acx) / anchor.width(),
            (tcy - acy) / anchor.height(),
            (target.width() / anchor.width()).ln(),
            (target.height() / anchor.height()).ln(),
        ]
    }
}

/// Per-image inputs to [`total_loss`].
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    pub scores: &'a Matrix,
    pub targets: &'a Matrix,
    pub centerness_logits: &'a [f64],
    pub centerness_targets: &'a [f64],
    pub positive_mask: &'a [bool],
    /// `(predicted box, target box)` for each positive anchor.
    pub box_pairs: &'a [(BBox, BBox)],
    pub kind: RecordKind,
}

/// Gradients of the weighted total w.r.t. the raw model outputs.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub scores: Matrix,
    pub centerness_logits: Vec<f64>,
    /// Parallel to `box_pairs`, w.r.t. the predicted boxes.
    pub boxes: Vec<[f64; 4]>,
}

fn regression_weight(kind: RecordKind, beta: f64) -> f64 {
    match kind {
        RecordKind::Detection => beta,
        RecordKind::Grounding | RecordKind::Imagetext => 0.0,
    }
}

/// `L_ALI + alpha * L_CEN + beta * L_REG`, with `beta` replaced by 0 for
/// grounding and image-text records. `normalizer` defaults to
/// `max(1, positives)`; batches pass their shared count.
pub fn total_loss_with_grad(
    inputs: &LossInputs<'_>,
    cfg: &LossConfig,
    normalizer: Option<f64>,
) -> Result<(LossBreakdown, LossGradients)> {
    let num_positives = inputs.positive_mask.iter().filter(|&&m| m).count();
    let norm = normalizer.unwrap_or((num_positives as f64).max(1.0));
    let (l_ali, g_ali) = sigmoid_focal_alignment_loss_with_grad(
        inputs.scores,
        inputs.targets,
        cfg.gamma,
        cfg.alpha_focal,
        norm,
    )?;
    let (l_cen, mut g_cen) = centerness_loss_with_grad(
        inputs.centerness_logits,
        inputs.centerness_targets,
        inputs.positive_mask,
        norm,
    )?;
    let (l_reg, mut g_reg) = giou_loss_with_grad(inputs.box_pairs, norm)?;
    let reg_weight = regression_weight(inputs.kind, cfg.beta);
    g_cen.iter_mut().for_each(|g| *g *= cfg.alpha);
    g_reg.iter_mut().for_each(|g| *g = g.map(|x| x * reg_weight));
    let total = l_ali + cfg.alpha * l_cen + reg_weight * l_reg;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {total}")));
    }
    Ok((
        LossBreakdown {
            l_ali,
            l_cen,
            l_reg,
            total,
            num_positives,
            reg_weight,
        },
        LossGradients {
            scores: g_ali,
            centerness_logits: g_cen,
            boxes: g_reg,
        },
    ))
}

pub fn total_loss(inputs: &LossInputs<'_>, cfg: &LossConfig) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(inputs, cfg, None)?.0)
}

/// Combines already-computed components the same way [`total_loss`] does.
pub fn combine(l_ali: f64, l_cen: f64, l_reg: f64, kind: RecordKind, cfg: &LossConfig) -> LossBreakdown {
    let reg_weight = regression_weight(kind, cfg.beta);
    LossBreakdown {
        l_ali,
        l_cen,
        l_reg,
        total: l_ali + cfg.alpha * l_cen + reg_weight * l_reg,
        num_positives: 0,
        reg_weight,
    }
}
