//! One-pass evaluation metrics: success (AUC), center-error precision, and
//! size-normalized precision, per sequence and macro-averaged.
//!
//! Conventions: success counts frames with IoU *strictly above* each
//! threshold; both precision curves count center error *at or below* each
//! threshold. Frames without a usable ground-truth box leave every
//! denominator; a missing prediction against usable ground truth is a miss.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Success thresholds 0, 1/20, ..., 1.
pub const SUCCESS_STEPS: usize = 21;
/// Precision thresholds 0..=50 px; the headline scalar reads the curve
/// at 20 px.
pub const PRECISION_STEPS: usize = 51;
pub const PRECISION_AT_PX: usize = 20;
/// Normalized-precision thresholds 0, 0.01, ..., 0.5.
pub const NORM_PRECISION_STEPS: usize = 51;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub success: Vec<f64>,
    pub precision: Vec<f64>,
    pub norm_precision: Vec<f64>,
    pub auc: f64,
    pub p: f64,
    pub pnorm: f64,
    pub frames_evaluated: usize,
    pub frames_skipped: usize,
}

struct FrameStats {
    iou: f64,
    dist: f64,
    ndist: f64,
}

fn frame_stats(pred: Option<&BBox>, gt: &BBox) -> FrameStats {
    match pred {
        Some(p) if p.valid() => {
            let dx = p.cx() - gt.cx();
            let dy = p.cy() - gt.cy();
            FrameStats {
                iou: p.iou(gt),
                dist: gt.center_dist(p),
                ndist: ((dx / gt.w).powi(2) + (dy / gt.h).powi(2)).sqrt(),
            }
        }
        _ => FrameStats { iou: 0.0, dist: f64::INFINITY, ndist: f64::INFINITY },
    }
}

fn build_report(stats: &[FrameStats], skipped: usize) -> Result<MetricReport> {
    if stats.is_empty() {
        return Err(Error::Input("no frames with usable ground truth to evaluate".into()));
    }
    let n = stats.len() as f64;
    let frac = |hit: &dyn Fn(&FrameStats, f64) -> bool, t: f64| {
        stats.iter().filter(|s| hit(s, t)).count() as f64 / n
    };
    let success: Vec<f64> = (0..SUCCESS_STEPS)
        .map(|i| frac(&|s, t| s.iou > t, i as f64 / 20.0))
        .collect();
    let precision: Vec<f64> = (0..PRECISION_STEPS)
        .map(|i| frac(&|s, t| s.dist <= t, i as f64))
        .collect();
    let norm_precision: Vec<f64> = (0..NORM_PRECISION_STEPS)
        .map(|i| frac(&|s, t| s.ndist <= t, i as f64 / 100.0))
        .collect();
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    Ok(MetricReport {
        auc: mean(&success),
        p: precision[PRECISION_AT_PX],
        pnorm: mean(&norm_precision),
        success,
        precision,
        norm_precision,
        frames_evaluated: stats.len(),
        frames_skipped: skipped,
    })
}

/// Per-sequence metrics. Frames whose ground truth is absent or degenerate
/// are skipped; a missing prediction on a kept frame scores as a miss.
pub fn sequence_report(pred: &[Option<BBox>], gt: &[Option<BBox>]) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions against {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let mut stats = Vec::with_capacity(gt.len());
    let mut skipped = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        match g {
            Some(g) if g.valid() => stats.push(frame_stats(p.as_ref(), g)),
            _ => skipped += 1,
        }
    }
    build_report(&stats, skipped)
}

fn paired(pred: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    let pred: Vec<Option<BBox>> = pred.iter().copied().map(Some).collect();
    let gt: Vec<Option<BBox>> = gt.iter().copied().map(Some).collect();
    sequence_report(&pred, &gt)
}

/// Success curve over `SUCCESS_STEPS` overlap thresholds and its mean.
pub fn success_auc(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64)> {
    let r = paired(pred, gt)?;
    Ok((r.success, r.auc))
}

/// Center-error curve over 0..=50 px and the fraction within 20 px.
pub fn precision(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64)> {
    let r = paired(pred, gt)?;
    Ok((r.precision, r.p))
}

/// Size-normalized center-error curve and its mean.
pub fn norm_precision(pred: &[BBox], gt: &[BBox]) -> Result<(Vec<f64>, f64)> {
    let r = paired(pred, gt)?;
    Ok((r.norm_precision, r.pnorm))
}

/// Equal-weight average across sequences: curves averaged pointwise,
/// scalars recomputed from the averaged curves.
pub fn macro_average(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("no sequence reports to average".into()))?;
    let n = reports.len() as f64;
    let avg = |pick: &dyn Fn(&MetricReport) -> &[f64]| -> Vec<f64> {
        let mut acc = vec![0.0; pick(first).len()];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(pick(r)) {
                *a += v / n;
            }
        }
        acc
    };
    let success = avg(&|r| &r.success);
    let precision = avg(&|r| &r.precision);
    let norm_precision = avg(&|r| &r.norm_precision);
    let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
    Ok(MetricReport {
        auc: mean(&success),
        p: precision[PRECISION_AT_PX],
        pnorm: mean(&norm_precision),
        success,
        precision,
        norm_precision,
        frames_evaluated: reports.iter().map(|r| r.frames_evaluated).sum(),
        frames_skipped: reports.iter().map(|r| r.frames_skipped).sum(),
    })
}
