//! Deliberately naive convolution used as a reference in tests.
//!
//! This walks every output element with six nested loops and explicit index
//! arithmetic on the flat buffers. It shares no logic with `conv2d` — keep it
//! that way; its only job is to be obviously correct.

use super::{Conv2dParams, Tensor};
use crate::error::{Error, Result};

pub fn conv2d_oracle(x: &Tensor, p: &Conv2dParams) -> Result<Tensor> {
    let (n, c_in, h, w) = x.shape();
    let (c_out, cpg, kh, kw) = p.weight.shape();
    let g = p.groups;
    let s = p.stride;
    let pad = p.padding as i64;

    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape("oracle: even kernel".into()));
    }
    if s == 0 || g == 0 || c_in % g != 0 || c_out % g != 0 || cpg != c_in / g {
        return Err(Error::Shape("oracle: bad stride/group setup".into()));
    }
    if h + 2 * p.padding < kh || w + 2 * p.padding < kw {
        return Err(Error::Shape("oracle: kernel larger than padded input".into()));
    }
    if let Some(b) = &p.bias {
        if b.len() != c_out {
            return Err(Error::Shape("oracle: bias length".into()));
        }
    }
    let ho = (h + 2 * p.padding - kh) / s + 1;
    let wo = (w + 2 * p.padding - kw) / s + 1;

    let xd = x.data();
    let wd = p.weight.data();
    let mut od = vec![0.0f32; n * c_out * ho * wo];

    for bn in 0..n {
        for oc in 0..c_out {
            let grp = oc / (c_out / g);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut sum = 0.0f64;
                    for icl in 0..cpg {
                        let ic = grp * cpg + icl;
                        for kr in 0..kh {
                            for kc in 0..kw {
                                let ih = (oh * s + kr) as i64 - pad;
                                let iw = (ow * s + kc) as i64 - pad;
                                if ih < 0 || ih >= h as i64 || iw < 0 || iw >= w as i64 {
                                    continue; // zero padding
                                }
                                let xi = ((bn * c_in + ic) * h + ih as usize) * w + iw as usize;
                                let wi = ((oc * cpg + icl) * kh + kr) * kw + kc;
                                sum += xd[xi] as f64 * wd[wi] as f64;
                            }
                        }
                    }
                    if let Some(b) = &p.bias {
                        sum += b[oc] as f64;
                    }
                    od[((bn * c_out + oc) * ho + oh) * wo + ow] = sum as f32;
                }
            }
        }
    }
    Tensor::from_vec(n, c_out, ho, wo, od)
}
