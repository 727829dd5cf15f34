//! Training losses: center-heatmap weighted focal loss, L1 box loss, the
//! overlap-loss family, and their weighted combination. Forward values come
//! with analytic gradients; network backprop is out of scope.

mod dual;
mod iou;

pub use dual::Dual4;
pub use iou::{
    ciou_loss, eiou_loss, giou_loss, iou, siou_loss, wiou_loss, IouKind, MIN_BOX_DIM,
};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::head::{decode_at, HeadOutput};
use crate::tensor::Tensor;

// ── Config ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
    pub iou_kind: IouKind,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
            iou_kind: IouKind::Wiou,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_l1", self.lambda_l1),
            ("focal_alpha", self.focal_alpha),
            ("focal_beta", self.focal_beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

// ── Heatmap target ──────────────────────────────────────────────────────

/// Minimum-overlap constraint used by the radius rule.
pub const RADIUS_MIN_OVERLAP: f64 = 0.7;

/// Largest Gaussian radius (in cells) such that a box jittered by it still
/// overlaps the annotation acceptably: the smallest of the three corner-jit
/// quadratic roots, in the form popularized by center-heatmap detectors.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (b1, c1) = (height + width, width * height * (1.0 - min_overlap) / (1.0 + min_overlap));
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).sqrt()) / 2.0;
    let (b2, c2) = (2.0 * (height + width), (1.0 - min_overlap) * width * height);
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).sqrt()) / 2.0;
    let (a3, b3, c3) = (
        4.0 * min_overlap,
        -2.0 * min_overlap * (height + width),
        (min_overlap - 1.0) * width * height,
    );
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Center heatmap: 1 at the annotated cell, Gaussian falloff elsewhere with
/// a box-size-dependent spread.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    pub heatmap: Tensor,
    /// (row, col) of the positive cell.
    pub center: (usize, usize),
}

impl GaussianTarget {
    /// `box_cells` is the annotated box size (w, h) in feature cells.
    pub fn new(hs: usize, ws: usize, cell: (usize, usize), box_cells: (f64, f64)) -> Result<Self> {
        let (row, col) = cell;
        if row >= hs || col >= ws {
            return Err(Error::Input(format!("target cell ({row},{col}) outside {hs}x{ws} map")));
        }
        let (bw, bh) = box_cells;
        if !(bw > 0.0 && bh > 0.0 && bw.is_finite() && bh.is_finite()) {
            return Err(Error::Input(format!("target box {bw}x{bh} cells is degenerate")));
        }
        let radius = gaussian_radius(bh, bw, RADIUS_MIN_OVERLAP).floor().max(0.0);
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let mut heatmap = Tensor::zeros(1, 1, hs, ws)?;
        for r in 0..hs {
            for q in 0..ws {
                let d2 = (r as f64 - row as f64).powi(2) + (q as f64 - col as f64).powi(2);
                heatmap.set(0, 0, r, q, (-d2 / (2.0 * sigma * sigma)).exp() as f32);
            }
        }
        heatmap.set(0, 0, row, col, 1.0);
        Ok(GaussianTarget { heatmap, center: cell })
    }

    /// Wrap a hand-built heatmap; values must lie in [0,1] but a positive
    /// cell is not required (the focal normalizer guards that case).
    pub fn from_heatmap(heatmap: Tensor, center: (usize, usize)) -> Result<Self> {
        if heatmap.n() != 1 || heatmap.c() != 1 {
            return Err(Error::Shape(format!("heatmap must be (1,1,H,W), got {:?}", heatmap.shape())));
        }
        if center.0 >= heatmap.h() || center.1 >= heatmap.w() {
            return Err(Error::Input("heatmap center outside the map".into()));
        }
        if heatmap.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("heatmap values must lie in [0,1]".into()));
        }
        Ok(GaussianTarget { heatmap, center })
    }
}

// ── Classification loss ─────────────────────────────────────────────────

const PROB_MARGIN: f64 = 1e-7;

/// Center-heatmap weighted focal loss over probabilities. Positive cells
/// (target exactly 1) pay −(1−p)^α·log p; the rest pay
/// −(1−y)^β·p^α·log(1−p). The sum is divided by the positive count (at
/// least 1). Returns the loss and ∂loss/∂p per cell.
pub fn weighted_focal_loss(
    pred: &Tensor,
    target: &GaussianTarget,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    if pred.shape() != target.heatmap.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.heatmap.shape()
        )));
    }
    let (alpha, beta) = (cfg.focal_alpha, cfg.focal_beta);
    let n_pos = target.heatmap.data().iter().filter(|&&y| y == 1.0).count();
    let norm = n_pos.max(1) as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; pred.numel()];
    for (i, (&p, &y)) in pred.data().iter().zip(target.heatmap.data()).enumerate() {
        let p = (p as f64).clamp(PROB_MARGIN, 1.0 - PROB_MARGIN);
        let y = y as f64;
        let (term, dterm) = if y == 1.0 {
            let focus = (1.0 - p).powf(alpha);
            (
                -focus * p.ln(),
                alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - focus / p,
            )
        } else {
            let weight = (1.0 - y).powf(beta);
            (
                -weight * p.powf(alpha) * (1.0 - p).ln(),
                -weight * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p)),
            )
        };
        loss += term;
        grad[i] = (dterm / norm) as f32;
    }
    let (n, c, h, w) = pred.shape();
    Ok((loss / norm, Tensor::from_vec(n, c, h, w, grad)?))
}

// ── Box regression losses ───────────────────────────────────────────────

/// Mean absolute difference over (cx, cy, w, h), with the gradient over the
/// same coordinates; exact ties contribute subgradient 0.
pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let diffs = [pred.cx() - gt.cx(), pred.cy() - gt.cy(), pred.w - gt.w, pred.h - gt.h];
    let loss = diffs.iter().map(|d| d.abs()).sum::<f64>() / 4.0;
    let grad = diffs.map(|d| {
        if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        }
    });
    (loss, grad)
}

// ── Total ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LossTargets {
    pub target: GaussianTarget,
    /// Annotated box in [0,1] search coordinates.
    pub gt_box: BBox,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub total: f64,
}

pub fn combine(cls: f64, iou: f64, l1: f64, cfg: &LossConfig) -> f64 {
    cls + cfg.lambda_iou * iou + cfg.lambda_l1 * l1
}

/// Classification plus weighted box losses; the box terms are evaluated at
/// the annotated cell's decoded box.
pub fn total_loss(out: &HeadOutput, targets: &LossTargets, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let probs = out.response.sigmoid();
    let (cls, _) = weighted_focal_loss(&probs, &targets.target, cfg)?;
    let pred = decode_at(out, targets.target.center.0, targets.target.center.1)?;
    let (iou_term, _) = cfg.iou_kind.loss(&pred, &targets.gt_box)?;
    let (l1, _) = l1_box_loss(&pred, &targets.gt_box);
    Ok(LossBreakdown { cls, iou: iou_term, l1, total: combine(cls, iou_term, l1, cfg) })
}
