//! 2-D convolution (cross-correlation convention) and inference batchnorm.

use super::Tensor;
use crate::error::{Error, Result};

/// Convolution parameters. Weight layout is (c_out, c_in/groups, kh, kw).
#[derive(Debug, Clone)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dParams {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>) -> Self {
        Conv2dParams { weight, bias, stride: 1, padding: 0, groups: 1 }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.h(), self.weight.w())
    }

    fn validate(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (c_out, cpg, kh, kw) = self.weight.shape();
        let (_, c_in, h, w) = x.shape();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("even kernel {kh}x{kw} not supported")));
        }
        if self.stride == 0 {
            return Err(Error::Shape("stride must be >= 1".into()));
        }
        if self.groups == 0 || c_in % self.groups != 0 || c_out % self.groups != 0 {
            return Err(Error::Shape(format!(
                "groups {} must divide c_in {c_in} and c_out {c_out}",
                self.groups
            )));
        }
        if cpg != c_in / self.groups {
            return Err(Error::Shape(format!(
                "weight expects {cpg} channels per group, input gives {}",
                c_in / self.groups
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != c_out {
                return Err(Error::Shape(format!(
                    "bias length {} != c_out {c_out}",
                    b.len()
                )));
            }
            if !b.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "conv2d bias" });
            }
        }
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * self.padding,
                w + 2 * self.padding
            )));
        }
        let ho = (h + 2 * self.padding - kh) / self.stride + 1;
        let wo = (w + 2 * self.padding - kw) / self.stride + 1;
        Ok((ho, wo))
    }
}

/// Direct convolution. Zero padding, cross-correlation kernel orientation
/// (no flip), grouped channels. Accumulates in f64; the inner loops run over
/// contiguous rows so release builds vectorize them.
pub fn conv2d(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (ho, wo) = p.validate(x)?;
    let (n, c_in, h, w) = x.shape();
    let (c_out, cpg, kh, kw) = p.weight.shape();
    let (s, pad, g) = (p.stride, p.padding, p.groups);
    let oc_per_g = c_out / g;

    let mut out = Tensor::zeros(n, c_out, ho, wo)?;
    let mut acc = vec![0.0f64; ho * wo];
    let xd = x.data();
    let wd = p.weight.data();

    for bn in 0..n {
        for oc in 0..c_out {
            let group = oc / oc_per_g;
            let b = p.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
            acc.iter_mut().for_each(|v| *v = b);
            for icl in 0..cpg {
                let ic = group * cpg + icl;
                let x_plane = &xd[(bn * c_in + ic) * h * w..(bn * c_in + ic + 1) * h * w];
                for kr in 0..kh {
                    // rows where ih = oh*s + kr - pad lands inside the input
                    let oh_lo = ceil_div_at_least_zero(pad as i64 - kr as i64, s);
                    let oh_hi = floor_to_exclusive(h as i64 - 1 + pad as i64 - kr as i64, s, ho);
                    for kc in 0..kw {
                        let wv = wd[((oc * cpg + icl) * kh + kr) * kw + kc] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let ow_lo = ceil_div_at_least_zero(pad as i64 - kc as i64, s);
                        let ow_hi =
                            floor_to_exclusive(w as i64 - 1 + pad as i64 - kc as i64, s, wo);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * s + kr - pad;
                            let iw0 = ow_lo * s + kc - pad;
                            let a_row = &mut acc[oh * wo + ow_lo..oh * wo + ow_hi];
                            if s == 1 {
                                let x_row = &x_plane[ih * w + iw0..ih * w + iw0 + a_row.len()];
                                for (a, &xv) in a_row.iter_mut().zip(x_row) {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                for (j, a) in a_row.iter_mut().enumerate() {
                                    *a += wv * x_plane[ih * w + iw0 + j * s] as f64;
                                }
                            }
                        }
                    }
                }
            }
            let base = (bn * c_out + oc) * ho * wo;
            let od = out.data_mut();
            for (o, &a) in od[base..base + ho * wo].iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

#[inline]
fn ceil_div_at_least_zero(num: i64, den: usize) -> usize {
    if num <= 0 {
        0
    } else {
        ((num as usize) + den - 1) / den
    }
}

#[inline]
fn floor_to_exclusive(num: i64, den: usize, cap: usize) -> usize {
    if num < 0 {
        0
    } else {
        ((num as usize) / den + 1).min(cap)
    }
}

/// Inference-mode batchnorm parameters, one value per channel.
#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

pub const BN_EPS: f32 = 1e-5;

impl BatchNormParams {
    /// Identity transform: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(c: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            mean: vec![0.0; c],
            var: vec![1.0; c],
            eps: BN_EPS,
        }
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != c {
                return Err(Error::Shape(format!(
                    "batchnorm {name} has {} entries for {c} channels",
                    v.len()
                )));
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite { op: "batchnorm params" });
            }
        }
        if self.eps < 0.0 || !self.eps.is_finite() {
            return Err(Error::Config(format!("batchnorm eps {} invalid", self.eps)));
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("batchnorm variance must be >= 0".into()));
        }
        if self.var.iter().any(|&v| v + self.eps <= 0.0) {
            return Err(Error::Config("batchnorm var + eps must be positive".into()));
        }
        Ok(())
    }
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel.
pub fn batchnorm_infer(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let (n, c, h, w) = x.shape();
    p.validate(c)?;
    let mut out = x.clone();
    let hw = h * w;
    for ch in 0..c {
        let scale = p.gamma[ch] as f64 / ((p.var[ch] as f64 + p.eps as f64)).sqrt();
        let mean = p.mean[ch] as f64;
        let beta = p.beta[ch] as f64;
        for bn in 0..n {
            let base = (bn * c + ch) * hw;
            for v in &mut out.data_mut()[base..base + hw] {
                *v = ((*v as f64 - mean) * scale + beta) as f32;
            }
        }
    }
    out.ensure_finite("batchnorm_infer")?;
    Ok(out)
}
