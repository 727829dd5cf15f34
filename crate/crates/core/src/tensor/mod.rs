//! Dense 4-D float tensors in (n, c, h, w) row-major layout.
//!
//! Constructors validate shapes and reject non-finite input, and every kernel
//! that can overflow checks its output, so a `Tensor` in hand always holds
//! finite data.

mod conv;
mod oracle;

pub use conv::{batchnorm_infer, conv2d, BatchNormParams, Conv2dParams};
pub use oracle::conv2d_oracle;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor. Every dimension must be nonzero.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::check_dims(n, c, h, w)?;
        Ok(Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] })
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f32) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "filled" });
        }
        Self::check_dims(n, c, h, w)?;
        Ok(Tensor { n, c, h, w, data: vec![v; n * c * h * w] })
    }

    /// Takes ownership of a flat row-major buffer. Length must equal n*c*h*w
    /// and every value must be finite.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Self::check_dims(n, c, h, w)?;
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot fill ({n},{c},{h},{w})",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "from_vec" });
        }
        Ok(Tensor { n, c, h, w, data })
    }

    fn check_dims(n: usize, c: usize, h: usize, w: usize) -> Result<()> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "zero-sized tensor ({n},{c},{h},{w}) is not allowed"
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    pub fn relu(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor { data, ..*self }
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        Tensor { data, ..*self }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        let out = Tensor { data, ..*self };
        out.ensure_finite("add")?;
        Ok(out)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul_elem")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        let out = Tensor { data, ..*self };
        out.ensure_finite("mul_elem")?;
        Ok(out)
    }

    pub fn scale(&self, k: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| v * k).collect();
        let out = Tensor { data, ..*self };
        out.ensure_finite("scale")?;
        Ok(out)
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Mean over the spatial dims, giving (n, c, 1, 1).
    pub fn global_avg_pool(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * self.c);
        for n in 0..self.n {
            for c in 0..self.c {
                let base = (n * self.c + c) * hw;
                let sum: f64 = self.data[base..base + hw].iter().map(|&v| v as f64).sum();
                data.push((sum / hw as f64) as f32);
            }
        }
        Tensor { n: self.n, c: self.c, h: 1, w: 1, data }
    }

    /// Per-channel mean and population variance over the batch and spatial
    /// dims — the statistics batchnorm tracks during training.
    pub fn channel_moments(&self) -> (Vec<f32>, Vec<f32>) {
        let hw = self.h * self.w;
        let count = (self.n * hw) as f64;
        let mut means = Vec::with_capacity(self.c);
        let mut vars = Vec::with_capacity(self.c);
        for c in 0..self.c {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for n in 0..self.n {
                let base = (n * self.c + c) * hw;
                for &v in &self.data[base..base + hw] {
                    sum += v as f64;
                    sumsq += v as f64 * v as f64;
                }
            }
            let mean = sum / count;
            means.push(mean as f32);
            vars.push(((sumsq / count - mean * mean).max(0.0)) as f32);
        }
        (means, vars)
    }

    /// Multiply each channel by a per-channel gate of shape (n, c, 1, 1).
    pub fn mul_channel(&self, gate: &Tensor) -> Result<Tensor> {
        if gate.n != self.n || gate.c != self.c || gate.h != 1 || gate.w != 1 {
            return Err(Error::Shape(format!(
                "mul_channel: gate {:?} incompatible with {:?}",
                gate.shape(),
                self.shape()
            )));
        }
        let hw = self.h * self.w;
        let mut data = self.data.clone();
        for n in 0..self.n {
            for c in 0..self.c {
                let g = gate.at(n, c, 0, 0);
                let base = (n * self.c + c) * hw;
                for v in &mut data[base..base + hw] {
                    *v *= g;
                }
            }
        }
        let out = Tensor { data, ..*self };
        out.ensure_finite("mul_channel")?;
        Ok(out)
    }

    /// Stack `b` after `a` along the channel axis. Both inputs are copied
    /// verbatim, so the leading channels of the result are bit-equal to `a`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.n != b.n || a.h != b.h || a.w != b.w {
            return Err(Error::Shape(format!(
                "concat_channels: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let c = a.c + b.c;
        let hw = a.h * a.w;
        let mut data = Vec::with_capacity(a.n * c * hw);
        for n in 0..a.n {
            data.extend_from_slice(&a.data[n * a.c * hw..(n + 1) * a.c * hw]);
            data.extend_from_slice(&b.data[n * b.c * hw..(n + 1) * b.c * hw]);
        }
        Ok(Tensor { n: a.n, c, h: a.h, w: a.w, data })
    }

    /// Copy of channels `lo..hi`.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Tensor> {
        if lo >= hi || hi > self.c {
            return Err(Error::Shape(format!(
                "slice_channels {lo}..{hi} out of {} channels",
                self.c
            )));
        }
        let hw = self.h * self.w;
        let c = hi - lo;
        let mut data = Vec::with_capacity(self.n * c * hw);
        for n in 0..self.n {
            let base = (n * self.c + lo) * hw;
            data.extend_from_slice(&self.data[base..base + c * hw]);
        }
        Ok(Tensor { n: self.n, c, h: self.h, w: self.w, data })
    }

    /// Largest absolute elementwise difference; shapes must already match.
    pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape(), b.shape(), "max_abs_diff on mismatched shapes");
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    /// Relative Frobenius distance ||a-b|| / ||a||, 0 when both are all-zero.
    pub fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.shape(), b.shape(), "rel_frobenius on mismatched shapes");
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in a.data.iter().zip(&b.data) {
            let d = (*x as f64) - (*y as f64);
            num += d * d;
            den += (*x as f64) * (*x as f64);
        }
        if den == 0.0 {
            return if num == 0.0 { 0.0 } else { f64::INFINITY };
        }
        (num / den).sqrt()
    }
}

#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_sized_dimension_is_rejected() {
        assert!(Tensor::zeros(1, 0, 4, 4).is_err());
        assert!(Tensor::zeros(0, 3, 4, 4).is_err());
    }

    #[test]
    fn from_vec_rejects_wrong_length_and_non_finite() {
        assert!(Tensor::from_vec(1, 1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Tensor::from_vec(1, 1, 1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::from_vec(1, 1, 1, 2, vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::from_vec(1, 2, 2, 3, (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn relu_clamps_negatives_only() {
        let t = Tensor::from_vec(1, 1, 1, 4, vec![-1.0, -0.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.relu().data(), &[0.0, 0.0, 0.5, 2.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let t = Tensor::from_vec(1, 1, 1, 3, vec![0.0, 100.0, -100.0]).unwrap();
        let s = t.sigmoid();
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 1.0).abs() < 1e-7);
        assert!(s.data()[2] >= 0.0 && s.data()[2] < 1e-7);
        s.ensure_finite("test").unwrap();
    }

    #[test]
    fn add_overflow_is_surfaced_as_error() {
        let t = Tensor::filled(1, 1, 1, 1, f32::MAX).unwrap();
        assert!(matches!(t.add(&t), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn global_avg_pool_means_each_channel() {
        let t = Tensor::from_vec(1, 2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        let p = t.global_avg_pool();
        assert_eq!(p.shape(), (1, 2, 1, 1));
        assert_eq!(p.data(), &[2.5, 10.0]);
    }

    #[test]
    fn concat_keeps_leading_channels_bit_equal() {
        let a = Tensor::from_vec(1, 2, 4, 4, (0..32).map(|i| i as f32 * 0.37).collect()).unwrap();
        let b = Tensor::filled(1, 3, 4, 4, -1.25).unwrap();
        let cat = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), (1, 5, 4, 4));
        let front = cat.slice_channels(0, 2).unwrap();
        assert_eq!(front.data(), a.data());
        let back = cat.slice_channels(2, 5).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(1, 2, 4, 4).unwrap();
        let b = Tensor::zeros(1, 2, 4, 5).unwrap();
        assert!(Tensor::concat_channels(&a, &b).is_err());
    }

    #[test]
    fn mul_channel_scales_whole_planes() {
        let t = Tensor::filled(1, 2, 2, 2, 3.0).unwrap();
        let g = Tensor::from_vec(1, 2, 1, 1, vec![0.5, 2.0]).unwrap();
        let out = t.mul_channel(&g).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 1.5);
        assert_eq!(out.at(0, 1, 0, 0), 6.0);
    }

    proptest! {
        #[test]
        fn concat_then_slice_round_trips(
            c1 in 1usize..4, c2 in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000
        ) {
            let mk = |c: usize, s: u64| {
                let v: Vec<f32> = (0..c * h * w)
                    .map(|i| (((i as u64 + s) * 2654435761 % 1000) as f32) / 500.0 - 1.0)
                    .collect();
                Tensor::from_vec(1, c, h, w, v).unwrap()
            };
            let a = mk(c1, seed);
            let b = mk(c2, seed + 7);
            let cat = Tensor::concat_channels(&a, &b).unwrap();
            let front = cat.slice_channels(0, c1).unwrap();
            let back = cat.slice_channels(c1, c1 + c2).unwrap();
            prop_assert_eq!(front.data(), a.data());
            prop_assert_eq!(back.data(), b.data());
        }

        #[test]
        fn elementwise_ops_keep_values_finite(vals in proptest::collection::vec(-1e3f32..1e3, 8)) {
            let t = Tensor::from_vec(1, 2, 2, 2, vals).unwrap();
            t.relu().ensure_finite("relu").unwrap();
            t.sigmoid().ensure_finite("sigmoid").unwrap();
            t.add(&t).unwrap();
            t.scale(0.5).unwrap();
        }
    }
}
