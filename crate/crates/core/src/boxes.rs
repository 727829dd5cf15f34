//! Axis-aligned boxes in top-left (x, y, w, h) form.

/// A box with its top-left corner at (x, y). Values may describe pixels or
/// normalized coordinates depending on context; the math is the same.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_cxcywh(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h }
    }

    pub fn cx(&self) -> f64 {
        self.x + self.w / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.y + self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Finite with strictly positive extent.
    pub fn valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    /// Intersection-over-union. Degenerate or non-finite boxes score 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        if !self.valid() || !other.valid() {
            return 0.0;
        }
        let iw = (self.x2().min(other.x2()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y2().min(other.y2()) - self.y.max(other.y)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Euclidean distance between centers.
    pub fn center_dist(&self, other: &BBox) -> f64 {
        let dx = self.cx() - other.cx();
        let dy = self.cy() - other.cy();
        (dx * dx + dy * dy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_identical_boxes_is_one() {
        let b = BBox::new(3.0, 4.0, 10.0, 20.0);
        assert_eq!(b.iou(&b), 1.0);
    }

    #[test]
    fn iou_of_quarter_overlapping_unit_squares() {
        // (0,0,2,2) vs (1,1,2,2): intersection 1, union 7
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_boxes_have_zero_iou() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 1.0, 1.0);
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        let a = BBox::new(0.0, 0.0, 0.0, 2.0);
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&b), 0.0);
        assert_eq!(b.iou(&a), 0.0);
        let n = BBox::new(f64::NAN, 0.0, 1.0, 1.0);
        assert_eq!(n.iou(&b), 0.0);
    }

    #[test]
    fn center_round_trip() {
        let b = BBox::from_cxcywh(10.0, 8.0, 4.0, 6.0);
        assert_eq!((b.x, b.y), (8.0, 5.0));
        assert_eq!((b.cx(), b.cy()), (10.0, 8.0));
    }

    #[test]
    fn iou_is_translation_and_scale_invariant() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let base = a.iou(&b);
        for &(tx, ty, s) in &[(5.0, -3.0, 1.0), (0.0, 0.0, 7.5), (100.0, 42.0, 0.25)] {
            let f = |bb: &BBox| BBox::new(bb.x * s + tx, bb.y * s + ty, bb.w * s, bb.h * s);
            assert!((f(&a).iou(&f(&b)) - base).abs() < 1e-12);
        }
    }
}
