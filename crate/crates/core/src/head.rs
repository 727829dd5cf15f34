//! Center-style prediction head: three independent branches (response,
//! offset, size), each a rep-block stage followed by an optional SE gate and
//! a channel-halving conv stack, plus box decoding from the output maps.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::init::{he_conv, Prng};
use crate::nn::SeBlock;
use crate::reparam::{RepKind, RepUnit};
use crate::tensor::{conv2d, sigmoid_scalar, Conv2dParams, Tensor};
use crate::weights::Store;

// ── Config ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub stage1_kind: RepKind,
    pub stage2_kind: RepKind,
    pub use_se: bool,
    /// Stage-1 output width; stage 2 halves it three times.
    pub width: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            stage1_kind: RepKind::RepN33,
            stage2_kind: RepKind::Conv33,
            use_se: true,
            width: 128,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        for (slot, kind) in [("stage1", self.stage1_kind), ("stage2", self.stage2_kind)] {
            if kind == RepKind::Scf {
                return Err(Error::Config(format!(
                    "{slot} blocks change channel counts; scf cannot be used there"
                )));
            }
        }
        if self.width < 8 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "head width must be a positive multiple of 8, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

// ── Branch ──────────────────────────────────────────────────────────────

/// One head branch: stage1 rep block (c_in -> C) + ReLU, optional SE, three
/// rep blocks with ReLU halving channels (C -> C/2 -> C/4 -> C/8), and a
/// plain 3x3 output conv (C/8 -> out_ch) with bias and no activation.
#[derive(Debug, Clone)]
pub struct HeadBranch {
    pub stage1: RepUnit,
    pub se: Option<SeBlock>,
    pub blocks: Vec<RepUnit>,
    pub block5: Conv2dParams,
}

impl HeadBranch {
    pub fn random(rng: &mut Prng, cfg: &HeadConfig, c_in: usize, out_ch: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let stage1 = RepUnit::random(rng, cfg.stage1_kind, c_in, c)?;
        let se = cfg.use_se.then(|| SeBlock::random(rng, c));
        let blocks = vec![
            RepUnit::random(rng, cfg.stage2_kind, c, c / 2)?,
            RepUnit::random(rng, cfg.stage2_kind, c / 2, c / 4)?,
            RepUnit::random(rng, cfg.stage2_kind, c / 4, c / 8)?,
        ];
        let block5 = Conv2dParams::new(
            he_conv(rng, out_ch, c / 8, 3, 3),
            Some(vec![0.0; out_ch]),
        )
        .with_padding(1);
        Ok(HeadBranch { stage1, se, blocks, block5 })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let mut y = self.stage1.forward(f)?.relu();
        if let Some(se) = &self.se {
            y = se.forward(&y)?;
        }
        for block in &self.blocks {
            y = block.forward(&y)?.relu();
        }
        conv2d(&y, &self.block5)
    }

    pub fn fuse(&self) -> Result<HeadBranch> {
        Ok(HeadBranch {
            stage1: self.stage1.fuse()?,
            se: self.se.clone(),
            blocks: self.blocks.iter().map(|b| b.fuse()).collect::<Result<_>>()?,
            block5: self.block5.clone(),
        })
    }

    pub fn is_fused(&self) -> bool {
        self.stage1.is_fused() && self.blocks.iter().all(|b| b.is_fused())
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        self.stage1.collect(&format!("{prefix}.stage1"), store)?;
        if let Some(se) = &self.se {
            se.collect(&format!("{prefix}.se"), store)?;
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(&format!("{prefix}.stage2.block{}", i + 2), store)?;
        }
        store.insert_tensor(&format!("{prefix}.stage2.block5.weight"), &self.block5.weight)?;
        store.insert_vec(
            &format!("{prefix}.stage2.block5.bias"),
            self.block5.bias.as_ref().unwrap(),
        )?;
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        self.stage1.load(&format!("{prefix}.stage1"), store)?;
        if let Some(se) = &mut self.se {
            se.load(&format!("{prefix}.se"), store)?;
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.load(&format!("{prefix}.stage2.block{}", i + 2), store)?;
        }
        let w = store.take_tensor4(&format!("{prefix}.stage2.block5.weight"))?;
        if w.shape() != self.block5.weight.shape() {
            return Err(Error::Weights(format!(
                "{prefix}.stage2.block5.weight is {:?}, model wants {:?}",
                w.shape(),
                self.block5.weight.shape()
            )));
        }
        let b = store.take_vec(&format!("{prefix}.stage2.block5.bias"), self.block5.c_out())?;
        self.block5.weight = w;
        self.block5.bias = Some(b);
        Ok(())
    }
}

// ── Three-branch head ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Head {
    pub cls: HeadBranch,
    pub offset: HeadBranch,
    pub size: HeadBranch,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Pre-sigmoid objectness logits, (1,1,Hs,Ws).
    pub response: Tensor,
    /// Pre-sigmoid sub-cell offsets, (1,2,Hs,Ws), channels (x, y).
    pub offset: Tensor,
    /// Pre-sigmoid box dims as fractions of the search region, (1,2,Hs,Ws),
    /// channels (w, h).
    pub size: Tensor,
}

impl HeadOutput {
    fn validate(&self) -> Result<()> {
        let (h, w) = (self.response.h(), self.response.w());
        if self.response.shape() != (1, 1, h, w)
            || self.offset.shape() != (1, 2, h, w)
            || self.size.shape() != (1, 2, h, w)
        {
            return Err(Error::Shape(format!(
                "inconsistent head maps: response {:?}, offset {:?}, size {:?}",
                self.response.shape(),
                self.offset.shape(),
                self.size.shape()
            )));
        }
        Ok(())
    }
}

impl Head {
    /// Branch channel widths come from the fusion stage: `cls_in` feeds the
    /// response branch, `box_in` feeds offset and size.
    pub fn random(rng: &mut Prng, cfg: &HeadConfig, cls_in: usize, box_in: usize) -> Result<Self> {
        Ok(Head {
            cls: HeadBranch::random(rng, cfg, cls_in, 1)?,
            offset: HeadBranch::random(rng, cfg, box_in, 2)?,
            size: HeadBranch::random(rng, cfg, box_in, 2)?,
        })
    }

    pub fn forward(&self, cls_in: &Tensor, box_in: &Tensor) -> Result<HeadOutput> {
        let out = HeadOutput {
            response: self.cls.forward(cls_in)?,
            offset: self.offset.forward(box_in)?,
            size: self.size.forward(box_in)?,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn fuse(&self) -> Result<Head> {
        Ok(Head {
            cls: self.cls.fuse()?,
            offset: self.offset.fuse()?,
            size: self.size.fuse()?,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.cls.is_fused() && self.offset.is_fused() && self.size.is_fused()
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        self.cls.collect(&format!("{prefix}.cls"), store)?;
        self.offset.collect(&format!("{prefix}.offset"), store)?;
        self.size.collect(&format!("{prefix}.size"), store)
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        self.cls.load(&format!("{prefix}.cls"), store)?;
        self.offset.load(&format!("{prefix}.offset"), store)?;
        self.size.load(&format!("{prefix}.size"), store)
    }
}

// ── Decoding ────────────────────────────────────────────────────────────

/// Row-major argmax of a (1,1,H,W) map; the lowest flat index wins ties.
pub fn argmax_cell(map: &Tensor) -> Result<(usize, usize)> {
    if map.n() != 1 || map.c() != 1 {
        return Err(Error::Shape(format!("argmax_cell wants (1,1,H,W), got {:?}", map.shape())));
    }
    let (mut best, mut best_v) = (0usize, f32::NEG_INFINITY);
    for (i, &v) in map.data().iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    Ok((best / map.w(), best % map.w()))
}

/// Smallest decodable extent; a saturated size logit rounds sigmoid to
/// exactly 0 in f32, and a zero-size box cannot be mapped or scored.
pub const MIN_DECODED_SIZE: f64 = 1e-4;

/// Box at one response cell, in [0,1] search coordinates. Sigmoid keeps the
/// sub-cell offset in [0,1) and the size in (0,1].
pub fn decode_at(out: &HeadOutput, row: usize, col: usize) -> Result<BBox> {
    out.validate()?;
    let (hs, ws) = (out.response.h(), out.response.w());
    if row >= hs || col >= ws {
        return Err(Error::Shape(format!("cell ({row},{col}) outside {hs}x{ws} map")));
    }
    let ox = sigmoid_scalar(out.offset.at(0, 0, row, col)) as f64;
    let oy = sigmoid_scalar(out.offset.at(0, 1, row, col)) as f64;
    let w = (sigmoid_scalar(out.size.at(0, 0, row, col)) as f64).max(MIN_DECODED_SIZE);
    let h = (sigmoid_scalar(out.size.at(0, 1, row, col)) as f64).max(MIN_DECODED_SIZE);
    let cx = (col as f64 + ox) / ws as f64;
    let cy = (row as f64 + oy) / hs as f64;
    Ok(BBox::from_cxcywh(cx, cy, w, h))
}

/// Peak-cell decode: argmax of sigmoid(response), elementwise-masked by
/// `window` when given, then the box at that cell. Also returns the windowed
/// peak score.
pub fn decode_box(out: &HeadOutput, window: Option<&Tensor>) -> Result<(BBox, f32)> {
    out.validate()?;
    let probs = out.response.sigmoid();
    let scored = match window {
        Some(w) => probs.mul_elem(w)?,
        None => probs,
    };
    let (row, col) = argmax_cell(&scored)?;
    Ok((decode_at(out, row, col)?, scored.at(0, 0, row, col)))
}
