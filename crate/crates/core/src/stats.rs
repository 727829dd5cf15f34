//! Trainable-parameter and multiply-accumulate accounting for one full
//! forward pass (template branch + search branch + fusion + head).
//!
//! Counting rules (the same ones docs/stats-formulas.md spells out):
//! - conv: params = c_out*(c_in/groups)*kh*kw (+ c_out bias);
//!   MACs = h_out*w_out * c_out*(c_in/groups)*kh*kw. Bias adds are not MACs.
//! - batchnorm: params = 2c (gamma, beta; running stats are buffers);
//!   MACs = c*h*w, one scale-shift per element.
//! - squeeze-excite: pooling is additions only (0 MACs), the two 1x1 convs
//!   count as convs on a 1x1 map, the gate costs c*h*w multiplies.
//! - correlation: Hz*Wz*Hx*Wx*(C+1) MACs — one C-term inner product plus the
//!   1/sqrt(C) rescale per output element; no parameters.
//! - elementwise adds (skips, reuse-add, branch merges), concat, ReLU, and
//!   sigmoid cost 0 MACs.

use crate::ecm::IabParams;
use crate::error::Result;
use crate::head::HeadBranch;
use crate::model::LightFc;
use crate::nn::{Backbone, ConvBn, SeBlock, BACKBONE_OUT_CHANNELS};
use crate::reparam::RepUnit;
use crate::tensor::Conv2dParams;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStat {
    pub name: String,
    pub params: usize,
    pub macs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct StatsReport {
    pub layers: Vec<LayerStat>,
}

impl StatsReport {
    fn push(&mut self, name: impl Into<String>, (params, macs): (usize, usize)) {
        self.layers.push(LayerStat { name: name.into(), params, macs });
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs(&self) -> usize {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerStat> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Output spatial size of a conv along one axis.
fn conv_out(len: usize, k: usize, pad: usize, stride: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Parameters and MACs of one conv application, plus its output spatial size.
pub fn conv_cost(p: &Conv2dParams, h: usize, w: usize) -> (usize, usize, (usize, usize)) {
    let (c_out, c_in_g, kh, kw) = p.weight.shape();
    let (ho, wo) = (conv_out(h, kh, p.padding, p.stride), conv_out(w, kw, p.padding, p.stride));
    let params = c_out * c_in_g * kh * kw + p.bias.as_ref().map_or(0, Vec::len);
    let macs = ho * wo * c_out * c_in_g * kh * kw;
    (params, macs, (ho, wo))
}

fn convbn_cost(cb: &ConvBn, h: usize, w: usize) -> (usize, usize, (usize, usize)) {
    let (p, m, (ho, wo)) = conv_cost(&cb.conv, h, w);
    let c = cb.c_out();
    (p + 2 * c, m + c * ho * wo, (ho, wo))
}

pub fn se_cost(se: &SeBlock, h: usize, w: usize) -> (usize, usize) {
    let (p_r, m_r, _) = conv_cost(&se.reduce, 1, 1);
    let (p_e, m_e, _) = conv_cost(&se.expand, 1, 1);
    let c = se.expand.c_out();
    (p_r + p_e, m_r + m_e + c * h * w)
}

pub fn correlation_macs(c: usize, hz: usize, wz: usize, hx: usize, wx: usize) -> usize {
    hz * wz * hx * wx * (c + 1)
}

fn rep_unit_cost(unit: &RepUnit, h: usize, w: usize) -> (usize, usize) {
    match unit {
        RepUnit::Train(spec) => spec
            .branches
            .iter()
            .map(|cb| {
                let (p, m, _) = convbn_cost(cb, h, w);
                (p, m)
            })
            .fold((0, 0), |(ap, am), (p, m)| (ap + p, am + m)),
        RepUnit::Deploy(f) => {
            let (p, m, _) = conv_cost(&f.conv, h, w);
            (p, m)
        }
    }
}

fn iab_cost(iab: &IabParams, h: usize, w: usize) -> (usize, usize) {
    let (pe, me, _) = convbn_cost(&iab.expand, h, w);
    let (pp, mp, _) = convbn_cost(&iab.project, h, w);
    (pe + pp, me + mp)
}

/// One row per backbone layer; MACs cover both the template and the search
/// application, parameters are counted once.
fn backbone_stats(bb: &Backbone, t_side: usize, s_side: usize, rep: &mut StatsReport) {
    let walk = |side: usize| -> Vec<(usize, usize)> {
        let mut rows = Vec::new();
        let (p, m, (mut h, mut w)) = convbn_cost(&bb.stem, side, side);
        rows.push((p, m));
        for stage in &bb.stages {
            for block in stage {
                let (mut bp, mut bm) = (0, 0);
                if let Some(e) = &block.expand {
                    let (p, m, _) = convbn_cost(e, h, w);
                    bp += p;
                    bm += m;
                }
                let (p, m, (ho, wo)) = convbn_cost(&block.depthwise, h, w);
                bp += p;
                bm += m;
                (h, w) = (ho, wo);
                let (p, m, _) = convbn_cost(&block.project, h, w);
                rows.push((bp + p, bm + m));
            }
        }
        rows
    };
    let t_rows = walk(t_side);
    let s_rows = walk(s_side);
    let mut names = vec!["backbone.stem".to_string()];
    for (i, stage) in bb.stages.iter().enumerate() {
        for j in 0..stage.len() {
            names.push(format!("backbone.stage{i}.block{j}"));
        }
    }
    for ((name, (p, mt)), (_, ms)) in names.into_iter().zip(t_rows).zip(s_rows) {
        rep.push(name, (p, mt + ms));
    }
}

fn branch_stats(name: &str, br: &HeadBranch, side: usize, rep: &mut StatsReport) {
    rep.push(format!("{name}.stage1"), rep_unit_cost(&br.stage1, side, side));
    if let Some(se) = &br.se {
        rep.push(format!("{name}.se"), se_cost(se, side, side));
    }
    for (i, block) in br.blocks.iter().enumerate() {
        rep.push(format!("{name}.stage2.block{}", i + 2), rep_unit_cost(block, side, side));
    }
    let (p, m, _) = conv_cost(&br.block5, side, side);
    rep.push(format!("{name}.stage2.block5"), (p, m));
}

/// Cost of one tracked frame: backbone over both crops, correlation, fusion
/// extras, and the three head branches. Works on either the train-form or
/// the fused model; the structural difference is exactly what separates the
/// two MAC figures.
pub fn model_stats(model: &LightFc) -> Result<StatsReport> {
    let cfg = &model.cfg;
    let mut rep = StatsReport::default();
    backbone_stats(&model.backbone, cfg.template_size, cfg.search_size, &mut rep);

    let (tz, tx) = (cfg.template_feat_side(), cfg.search_feat_side());
    rep.push(
        "ecm.correlation",
        (0, correlation_macs(BACKBONE_OUT_CHANNELS, tz, tz, tx, tx)),
    );
    rep.push("ecm.se", se_cost(&model.ecm.se, tx, tx));
    if let Some(scf) = &model.ecm.scf {
        rep.push("ecm.scf", rep_unit_cost(scf, tx, tx));
    }
    if let Some(iab) = &model.ecm.iab {
        rep.push("ecm.iab", iab_cost(iab, tx, tx));
    }

    branch_stats("head.cls", &model.head.cls, tx, &mut rep);
    branch_stats("head.offset", &model.head.offset, tx, &mut rep);
    branch_stats("head.size", &model.head.size, tx, &mut rep);
    Ok(rep)
}
