//! Overlap-based box losses with analytic gradients w.r.t. the predicted
//! box in (cx, cy, w, h) form. Quantities that published formulations hold
//! fixed during backprop (the aspect trade-off in the complete-IoU loss, the
//! distance normalizer in the wise-IoU loss) enter as constants here too.

use std::f64::consts::PI;

use super::dual::Dual4;
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Predicted widths/heights are clamped up to this before any geometry.
pub const MIN_BOX_DIM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IouKind {
    Giou,
    Ciou,
    Eiou,
    Siou,
    Wiou,
}

impl IouKind {
    pub fn name(&self) -> &'static str {
        match self {
            IouKind::Giou => "giou",
            IouKind::Ciou => "ciou",
            IouKind::Eiou => "eiou",
            IouKind::Siou => "siou",
            IouKind::Wiou => "wiou",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "giou" => Ok(IouKind::Giou),
            "ciou" => Ok(IouKind::Ciou),
            "eiou" => Ok(IouKind::Eiou),
            "siou" => Ok(IouKind::Siou),
            "wiou" => Ok(IouKind::Wiou),
            other => Err(Error::Config(format!(
                "unknown iou loss `{other}` (expected giou|ciou|eiou|siou|wiou)"
            ))),
        }
    }

    pub fn loss(&self, pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
        match self {
            IouKind::Giou => giou_loss(pred, gt),
            IouKind::Ciou => ciou_loss(pred, gt),
            IouKind::Eiou => eiou_loss(pred, gt),
            IouKind::Siou => siou_loss(pred, gt),
            IouKind::Wiou => wiou_loss(pred, gt),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

// ── Shared dual-space geometry ──────────────────────────────────────────

struct Geom {
    cx: Dual4,
    cy: Dual4,
    w: Dual4,
    h: Dual4,
    iou: Dual4,
    union: Dual4,
    /// Smallest enclosing box dims.
    cw: Dual4,
    ch: Dual4,
}

fn c(v: f64) -> Dual4 {
    Dual4::constant(v)
}

/// Seed the predicted box as dual variables (clamped dims become constants,
/// the clamp subgradient) and evaluate overlap/enclosure quantities.
fn geometry(pred: &BBox, gt: &BBox) -> Result<Geom> {
    if !gt.valid() {
        return Err(Error::Input(format!(
            "degenerate reference box ({}, {}, {}, {})",
            gt.x, gt.y, gt.w, gt.h
        )));
    }
    if ![pred.x, pred.y, pred.w, pred.h].iter().all(|v| v.is_finite()) {
        return Err(Error::Input("non-finite predicted box".into()));
    }
    let clamped = |v: f64, i: usize| if v < MIN_BOX_DIM { c(MIN_BOX_DIM) } else { Dual4::var(v, i) };
    let cx = Dual4::var(pred.cx(), 0);
    let cy = Dual4::var(pred.cy(), 1);
    let w = clamped(pred.w, 2);
    let h = clamped(pred.h, 3);
    let (px1, px2) = (cx - w * 0.5, cx + w * 0.5);
    let (py1, py2) = (cy - h * 0.5, cy + h * 0.5);
    let (gx1, gx2, gy1, gy2) = (gt.x, gt.x2(), gt.y, gt.y2());

    let inter_w = (px2.min(c(gx2)) - px1.max(c(gx1))).max(c(0.0));
    let inter_h = (py2.min(c(gy2)) - py1.max(c(gy1))).max(c(0.0));
    let inter = inter_w * inter_h;
    let union = w * h + c(gt.area()) - inter;
    Ok(Geom {
        cx,
        cy,
        w,
        h,
        iou: inter / union,
        union,
        cw: px2.max(c(gx2)) - px1.min(c(gx1)),
        ch: py2.max(c(gy2)) - py1.min(c(gy1)),
    })
}

fn center_dist2(g: &Geom, gt: &BBox) -> Dual4 {
    let dx = g.cx - gt.cx();
    let dy = g.cy - gt.cy();
    dx * dx + dy * dy
}

// ── The loss family ─────────────────────────────────────────────────────

/// 1 − (IoU − |C \ (A∪B)| / |C|) with C the smallest enclosing box.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let c_area = g.cw * g.ch;
    let loss = 1.0 - (g.iou - (c_area - g.union) / c_area);
    Ok((loss.v, loss.d))
}

/// 1 − IoU + center-distance and aspect penalties; the aspect trade-off
/// weight is evaluated at the operating point and held constant.
pub fn ciou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let v0 = aspect_term(&g, gt).v;
    let alpha = v0 / ((1.0 - g.iou.v) + v0 + 1e-12);
    ciou_with_alpha(pred, gt, alpha)
}

fn aspect_term(g: &Geom, gt: &BBox) -> Dual4 {
    let diff = c((gt.w / gt.h).atan()) - (g.w / g.h).atan();
    4.0 / (PI * PI) * diff * diff
}

fn ciou_with_alpha(pred: &BBox, gt: &BBox, alpha: f64) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let diag2 = g.cw * g.cw + g.ch * g.ch;
    let loss = 1.0 - g.iou + center_dist2(&g, gt) / diag2 + alpha * aspect_term(&g, gt);
    Ok((loss.v, loss.d))
}

/// 1 − IoU + center, width, and height penalties each normalized by the
/// enclosing box.
pub fn eiou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let diag2 = g.cw * g.cw + g.ch * g.ch;
    let dw = g.w - gt.w;
    let dh = g.h - gt.h;
    let loss = 1.0 - g.iou
        + center_dist2(&g, gt) / diag2
        + dw * dw / (g.cw * g.cw)
        + dh * dh / (g.ch * g.ch);
    Ok((loss.v, loss.d))
}

/// 1 − IoU + (distance + shape)/2 with the angle-modulated distance cost;
/// shape exponent 4.
pub fn siou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let dx = g.cx - gt.cx();
    let dy = g.cy - gt.cy();
    let sigma2 = dx * dx + dy * dy;
    // sin(2θ) of the center-offset angle; defined as 0 for coincident
    // centers (the distance cost vanishes there anyway)
    let angle = if sigma2.v <= 0.0 { c(0.0) } else { 2.0 * dx.abs() * dy.abs() / sigma2 };
    let gamma = angle - 2.0;
    let rho_x = (dx / g.cw) * (dx / g.cw);
    let rho_y = (dy / g.ch) * (dy / g.ch);
    let distance = 2.0 - (gamma * rho_x).exp() - (gamma * rho_y).exp();
    let om_w = (g.w - gt.w).abs() / g.w.max(c(gt.w));
    let om_h = (g.h - gt.h).abs() / g.h.max(c(gt.h));
    let pw = 1.0 - (-om_w).exp();
    let ph = 1.0 - (-om_h).exp();
    let shape = pw * pw * pw * pw + ph * ph * ph * ph;
    let loss = 1.0 - g.iou + (distance + shape) * 0.5;
    Ok((loss.v, loss.d))
}

/// exp(center_dist² / D) · (1 − IoU) with D the squared enclosing-box
/// diagonal, held constant.
pub fn wiou_loss(pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let d0 = g.cw.v * g.cw.v + g.ch.v * g.ch.v;
    wiou_with_denom(pred, gt, d0)
}

fn wiou_with_denom(pred: &BBox, gt: &BBox, d0: f64) -> Result<(f64, [f64; 4])> {
    let g = geometry(pred, gt)?;
    let loss = (center_dist2(&g, gt) / d0).exp() * (1.0 - g.iou);
    Ok((loss.v, loss.d))
}
