//! Synthetic sequences with exact ground truth, plus a hand-built ("rigged")
//! parameterization of the full network whose response peak provably lands on
//! the target cell. Together they give the pipeline an end-to-end oracle.
//!
//! The construction keeps every step exact:
//! - the target is a radial gray texture with value 1.0 at its center pixel
//!   and >= 0.55 everywhere, while the background stays <= 0.35;
//! - motion is quantized to the feature-cell lattice (one backbone stride),
//!   so well-tracked crops are integer-aligned and resampling is a copy;
//! - the rigged backbone reduces to center-tap subsampling, which maps
//!   normalized gray values through `relu(mean_c((v - mean)/std))`: positive
//!   on the target, exactly zero on the background.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;

use crate::boxes::BBox;
use crate::config::RunConfig;
use crate::ecm::{EcmParams, ReuseMode};
use crate::error::{Error, Result};
use crate::head::HeadBranch;
use crate::init::Prng;
use crate::model::LightFc;
use crate::nn::{Backbone, ConvBn, SeBlock, BACKBONE_STRIDE};
use crate::reparam::RepUnit;
use crate::seqio;
use crate::tensor::{BatchNormParams, Conv2dParams, Tensor};

/// Motion lattice step: one backbone stride, so target centers always sit on
/// feature-cell corners.
pub const LATTICE: usize = BACKBONE_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Linear,
    Sine,
}

impl MotionKind {
    pub fn name(&self) -> &'static str {
        match self {
            MotionKind::Linear => "linear",
            MotionKind::Sine => "sine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(MotionKind::Linear),
            "sine" => Ok(MotionKind::Sine),
            _ => Err(Error::Config(format!("unknown motion kind `{s}`, want linear or sine"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub target_size: usize,
    pub motion: MotionKind,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            frames: 20,
            width: 320,
            height: 240,
            target_size: 64,
            motion: MotionKind::Linear,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Input(format!("need at least 2 frames, got {}", self.frames)));
        }
        if self.frames > 9999 {
            return Err(Error::Input("frame numbering supports at most 9999 frames".into()));
        }
        let ts = self.target_size;
        if ts < 32 || ts % (2 * LATTICE) != 0 {
            return Err(Error::Input(format!(
                "target size must be a positive multiple of {}, got {ts}",
                2 * LATTICE
            )));
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v % LATTICE != 0 || v < ts + 2 * LATTICE {
                return Err(Error::Input(format!(
                    "{name} {v} must be a multiple of {LATTICE} and leave the {ts} px target room to move"
                )));
            }
        }
        Ok(())
    }
}

/// Radial gray texture: 1.0 at the center pixel (ts/2, ts/2), falling
/// linearly with distance to 0.55 at the farthest corner. Values are 8-bit
/// quantized so in-memory frames match their PNG round trip exactly.
pub fn target_texture(ts: usize) -> Vec<f32> {
    let c = (ts / 2) as f64;
    let r_corner = (c * c + c * c).sqrt();
    let mut tex = Vec::with_capacity(ts * ts);
    for y in 0..ts {
        for x in 0..ts {
            let r = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
            tex.push(quantize(1.0 - 0.45 * r / r_corner));
        }
    }
    tex
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// Static interference pattern in [0.10, 0.35]: visibly structured but dark
/// enough that normalization maps it below zero everywhere.
fn background(width: usize, height: usize, phase: (f64, f64)) -> Tensor {
    let mut frame = Tensor::zeros(1, 3, height, width).expect("valid frame dims");
    for y in 0..height {
        for x in 0..width {
            let s = (2.0 * PI * x as f64 / 23.0 + phase.0).sin()
                * (2.0 * PI * y as f64 / 17.0 + phase.1).sin();
            let checker = ((x / 32 + y / 32) % 2) as f64;
            let v = quantize(0.18 + 0.08 * s + 0.05 * checker);
            for ch in 0..3 {
                frame.set(0, ch, y, x, v);
            }
        }
    }
    frame
}

/// Top-left target positions per frame, all on the motion lattice and fully
/// inside the frame.
fn positions(spec: &SynthSpec, rng: &mut Prng) -> Vec<(usize, usize)> {
    let cell = LATTICE as isize;
    let max_x = (spec.width - spec.target_size) as isize;
    let max_y = (spec.height - spec.target_size) as isize;
    match spec.motion {
        MotionKind::Linear => {
            let mut x = cell * rng.gen_range(0..=max_x / cell);
            let mut y = cell * rng.gen_range(0..=max_y / cell);
            let mut vx = if rng.gen::<bool>() { cell } else { -cell };
            let mut vy = if rng.gen::<bool>() { cell } else { -cell };
            let mut out = vec![(x as usize, y as usize)];
            for _ in 1..spec.frames {
                let mut nx = x + vx;
                if !(0..=max_x).contains(&nx) {
                    vx = -vx;
                    nx = x + vx;
                }
                let mut ny = y + vy;
                if !(0..=max_y).contains(&ny) {
                    vy = -vy;
                    ny = y + vy;
                }
                x = nx;
                y = ny;
                out.push((x as usize, y as usize));
            }
            out
        }
        MotionKind::Sine => {
            // lattice-quantized sweep around the frame middle
            let mid_x = cell * (max_x / (2 * cell));
            let mid_y = cell * (max_y / (2 * cell));
            let amp_x = mid_x.min(max_x - mid_x) as f64;
            let amp_y = mid_y.min(max_y - mid_y) as f64;
            let (px, py) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
            (0..spec.frames)
                .map(|t| {
                    let wobble = |mid: isize, amp: f64, period: f64, phase: f64| {
                        let raw = amp * (2.0 * PI * t as f64 / period + phase).sin();
                        mid + cell * (raw / cell as f64).round() as isize
                    };
                    (
                        wobble(mid_x, amp_x, 24.0, px).clamp(0, max_x) as usize,
                        wobble(mid_y, amp_y, 17.0, py).clamp(0, max_y) as usize,
                    )
                })
                .collect()
        }
    }
}

/// Render the sequence in memory: frames in [0,1] (already 8-bit quantized)
/// plus the exact per-frame target box.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Tensor>, Vec<BBox>)> {
    spec.validate()?;
    let mut rng = Prng::seed_from_u64(spec.seed);
    let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let tex = target_texture(spec.target_size);
    let canvas = background(spec.width, spec.height, phase);
    let ts = spec.target_size;
    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for (x, y) in positions(spec, &mut rng) {
        let mut frame = canvas.clone();
        for p in 0..ts {
            for q in 0..ts {
                let v = tex[p * ts + q];
                for ch in 0..3 {
                    frame.set(0, ch, y + p, x + q, v);
                }
            }
        }
        frames.push(frame);
        boxes.push(BBox::new(x as f64, y as f64, ts as f64, ts as f64));
    }
    Ok((frames, boxes))
}

/// Write the sequence in the directory layout loaders expect:
/// `dir/img/0001.png ...` plus `dir/groundtruth.txt`.
pub fn write_sequence(spec: &SynthSpec, dir: &Path) -> Result<Vec<BBox>> {
    let (frames, boxes) = generate(spec)?;
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    for (i, frame) in frames.iter().enumerate() {
        seqio::save_frame(&img_dir.join(format!("{:04}.png", i + 1)), frame)?;
    }
    seqio::write_boxes(&dir.join("groundtruth.txt"), &boxes)?;
    Ok(boxes)
}

// ── Rigged weights ──────────────────────────────────────────────────────

fn zero_conv(conv: &mut Conv2dParams) {
    let (o, i, kh, kw) = conv.weight.shape();
    conv.weight = Tensor::zeros(o, i, kh, kw).expect("conv weight dims");
    if let Some(b) = &mut conv.bias {
        b.iter_mut().for_each(|v| *v = 0.0);
    }
}

fn reset_convbn(cb: &mut ConvBn) {
    zero_conv(&mut cb.conv);
    cb.bn = BatchNormParams::identity(cb.bn.gamma.len());
}

fn zero_se(se: &mut SeBlock) {
    zero_conv(&mut se.reduce);
    zero_conv(&mut se.expand);
}

fn zero_rep(unit: &mut RepUnit) {
    match unit {
        RepUnit::Train(spec) => spec.branches.iter_mut().for_each(reset_convbn),
        RepUnit::Deploy(f) => zero_conv(&mut f.conv),
    }
}

/// Mean gray value after per-channel normalization and the stem ReLU. The
/// background is built to land below zero here; the target above.
fn gray_feature(v: f64, mean: &[f64; 3], std: &[f64; 3]) -> f64 {
    let m: f64 = (0..3).map(|c| (v - mean[c]) / std[c]).sum::<f64>() / 3.0;
    m.max(0.0)
}

/// Sum of the rigged template features: taps land every LATTICE pixels of the
/// template crop, hitting target-local coordinates `LATTICE*u - ts/2`.
fn template_tap_sum(cfg: &RunConfig, ts: usize) -> f64 {
    let tex = target_texture(ts);
    let taps = cfg.template_size / LATTICE;
    let mut sum = 0.0;
    for u in 0..taps {
        for v in 0..taps {
            let ly = (LATTICE * u) as isize - (ts / 2) as isize;
            let lx = (LATTICE * v) as isize - (ts / 2) as isize;
            if (0..ts as isize).contains(&ly) && (0..ts as isize).contains(&lx) {
                sum += gray_feature(
                    tex[ly as usize * ts + lx as usize] as f64,
                    &cfg.norm_mean,
                    &cfg.norm_std,
                );
            }
        }
    }
    sum
}

fn rig_backbone(bb: &mut Backbone) {
    // stem: each output channel averages the three input channels at the
    // kernel center, subsampling by its stride
    reset_convbn(&mut bb.stem);
    let c_out = bb.stem.conv.weight.n();
    for o in 0..c_out {
        for c in 0..3 {
            bb.stem.conv.weight.set(o, c, 1, 1, 1.0 / 3.0);
        }
    }
    for stage in &mut bb.stages {
        for block in stage {
            if let Some(e) = &mut block.expand {
                reset_convbn(e);
                let (o_ch, i_ch, _, _) = e.conv.weight.shape();
                for o in 0..o_ch {
                    e.conv.weight.set(o, o % i_ch, 0, 0, 1.0);
                }
            }
            reset_convbn(&mut block.depthwise);
            for o in 0..block.depthwise.conv.weight.n() {
                block.depthwise.conv.weight.set(o, 0, 1, 1, 1.0);
            }
            reset_convbn(&mut block.project);
            if !block.use_skip {
                // copy channels through; with a residual the zero projection
                // already makes the whole block an identity
                for o in 0..block.project.conv.weight.n() {
                    block.project.conv.weight.set(o, o, 0, 0, 1.0);
                }
            }
        }
    }
}

fn rig_ecm(ecm: &mut EcmParams) {
    zero_se(&mut ecm.se); // gate sigmoid(0) = 0.5 everywhere
    if let Some(scf) = &mut ecm.scf {
        zero_rep(scf); // skip connection passes features through untouched
    }
    if let Some(iab) = &mut ecm.iab {
        reset_convbn(&mut iab.expand);
        reset_convbn(&mut iab.project);
    }
}

/// Zero a whole head branch and give its final conv the wanted bias.
fn rig_constant_branch(branch: &mut HeadBranch, bias: f32) {
    zero_rep(&mut branch.stage1);
    if let Some(se) = &mut branch.se {
        zero_se(se);
    }
    branch.blocks.iter_mut().for_each(zero_rep);
    zero_conv(&mut branch.block5);
    if let Some(b) = &mut branch.block5.bias {
        b.iter_mut().for_each(|v| *v = bias);
    }
}

fn first_branch(unit: &mut RepUnit) -> &mut Conv2dParams {
    match unit {
        RepUnit::Train(spec) => &mut spec.branches[0].conv,
        RepUnit::Deploy(f) => &mut f.conv,
    }
}

/// Build a parameterization of the full model that tracks the synthetic
/// target analytically: subsampling backbone, pass-through fusion extras, a
/// response branch that reads `slope * feature + bias` off the correlation
/// sum, near-zero offsets, and a constant size equal to the target's share of
/// the search region.
pub fn rigged_model(cfg: &RunConfig, target_size: usize) -> Result<LightFc> {
    cfg.validate()?;
    if cfg.template_factor != 2.0 || cfg.search_factor != 4.0 {
        return Err(Error::Config(
            "rigged weights assume crop factors 2 and 4 (integer-aligned crops)".into(),
        ));
    }
    if cfg.template_size != 2 * target_size || cfg.search_size != 4 * target_size {
        return Err(Error::Config(format!(
            "rigged weights for a {target_size} px target want template {} and search {}, config has {} and {}",
            2 * target_size,
            4 * target_size,
            cfg.template_size,
            cfg.search_size
        )));
    }
    if target_size % (2 * LATTICE) != 0 {
        return Err(Error::Config(format!(
            "target size {target_size} must be a multiple of {}",
            2 * LATTICE
        )));
    }
    if (cfg.ecm.use_scf && !cfg.ecm.scf_skip) || (cfg.ecm.use_iab && !cfg.ecm.iab_skip) {
        return Err(Error::Config(
            "rigged weights need skip connections on the fusion extras".into(),
        ));
    }
    if cfg.ecm.reuse_mode == ReuseMode::Add {
        return Err(Error::Config("rigged weights need the correlation channels unmixed".into()));
    }

    let mut model = LightFc::random(cfg)?;
    rig_backbone(&mut model.backbone);
    rig_ecm(&mut model.ecm);

    // classification branch: stage1 channel 0 sums the correlation channels,
    // stage2 carries it through, and the final conv rescales it so the
    // target-center feature (gray 1.0) lands at logit +3 and background at -3
    let corr_ch = cfg.corr_channels();
    let cls = &mut model.head.cls;
    zero_rep(&mut cls.stage1);
    {
        let s1 = first_branch(&mut cls.stage1);
        let (_, c_in, kh, kw) = s1.weight.shape();
        debug_assert!(corr_ch <= c_in);
        for k in 0..corr_ch {
            s1.weight.set(0, k, kh / 2, kw / 2, 1.0);
        }
    }
    let mut gain = 0.5 * (crate::nn::BACKBONE_OUT_CHANNELS as f64).sqrt()
        * template_tap_sum(cfg, target_size);
    if let Some(se) = &mut cls.se {
        zero_se(se);
        gain *= 0.5;
    }
    for block in &mut cls.blocks {
        zero_rep(block);
        let conv = first_branch(block);
        let (_, _, kh, kw) = conv.weight.shape();
        conv.weight.set(0, 0, kh / 2, kw / 2, 1.0);
    }
    zero_conv(&mut model.head.cls.block5);
    let x_peak = gray_feature(1.0, &cfg.norm_mean, &cfg.norm_std);
    let slope = 6.0 / x_peak;
    model.head.cls.block5.weight.set(0, 0, 1, 1, (slope / gain) as f32);
    if let Some(b) = &mut model.head.cls.block5.bias {
        b[0] = -3.0;
    }

    // offsets pinned to ~0 (sub-lattice positions never occur); size constant
    // at the target's share of the search window
    rig_constant_branch(&mut model.head.offset, -40.0);
    let size_logit = {
        let frac = target_size as f64 / cfg.search_size as f64;
        (frac / (1.0 - frac)).ln() as f32
    };
    rig_constant_branch(&mut model.head.size, size_logit);
    Ok(model)
}
