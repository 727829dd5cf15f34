//! Cross-correlation feature fusion: pixel-wise correlation between template
//! and search features, squeeze-excite gating, the SCF and IAB refinement
//! blocks with optional skips, and search-feature reuse per head branch.

use crate::error::{Error, Result};
use crate::init::Prng;
use crate::nn::{ConvBn, SeBlock};
use crate::reparam::{RepKind, RepUnit};
use crate::tensor::Tensor;
use crate::weights::Store;

// ── Config ──────────────────────────────────────────────────────────────

/// How search features rejoin the fused map before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReuseMode {
    Concat,
    Add,
    None,
}

impl ReuseMode {
    pub fn name(&self) -> &'static str {
        match self {
            ReuseMode::Concat => "concat",
            ReuseMode::Add => "add",
            ReuseMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(ReuseMode::Concat),
            "add" => Ok(ReuseMode::Add),
            "none" => Ok(ReuseMode::None),
            other => Err(Error::Config(format!(
                "unknown reuse mode `{other}` (expected concat|add|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcmConfig {
    pub use_scf: bool,
    pub use_iab: bool,
    pub scf_skip: bool,
    pub iab_skip: bool,
    pub reuse_mode: ReuseMode,
    pub reuse_cls: bool,
    pub reuse_box: bool,
    pub iab_expansion: f64,
}

impl Default for EcmConfig {
    fn default() -> Self {
        EcmConfig {
            use_scf: true,
            use_iab: true,
            scf_skip: true,
            iab_skip: true,
            reuse_mode: ReuseMode::Concat,
            reuse_cls: true,
            reuse_box: true,
            iab_expansion: 4.0,
        }
    }
}

/// Widened channel count for the IAB expansion, which must land on a whole
/// number of channels.
pub fn iab_width(c: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Config(format!("iab expansion must be positive, got {ratio}")));
    }
    let wide = c as f64 * ratio;
    if wide.fract() != 0.0 || wide < 1.0 {
        return Err(Error::Config(format!(
            "iab expansion {ratio} of {c} channels gives non-integer width {wide}"
        )));
    }
    Ok(wide as usize)
}

impl EcmConfig {
    pub fn validate(&self, corr_ch: usize, search_ch: usize) -> Result<()> {
        if self.reuse_mode == ReuseMode::Add && corr_ch != search_ch {
            return Err(Error::Config(format!(
                "add reuse needs matching channels, correlation has {corr_ch} and search has {search_ch}"
            )));
        }
        if self.use_iab {
            iab_width(corr_ch, self.iab_expansion)?;
        }
        Ok(())
    }

    /// Channel counts handed to the (cls, box) head branches.
    pub fn branch_channels(&self, corr_ch: usize, search_ch: usize) -> (usize, usize) {
        let reused = match self.reuse_mode {
            ReuseMode::Concat => corr_ch + search_ch,
            ReuseMode::Add | ReuseMode::None => corr_ch,
        };
        let pick = |wants: bool| if wants && self.reuse_mode != ReuseMode::None { reused } else { corr_ch };
        (pick(self.reuse_cls), pick(self.reuse_box))
    }
}

// ── Parameters ──────────────────────────────────────────────────────────

/// Inverted activation block: widen with a 1x1 Conv-BN-ReLU, project back
/// with a linear 1x1 Conv-BN.
#[derive(Debug, Clone)]
pub struct IabParams {
    pub expand: ConvBn,
    pub project: ConvBn,
}

impl IabParams {
    pub fn random(rng: &mut Prng, c: usize, ratio: f64) -> Result<Self> {
        let wide = iab_width(c, ratio)?;
        Ok(IabParams {
            expand: ConvBn::random(rng, c, wide, 1, 1, 1, true),
            project: ConvBn::random(rng, wide, c, 1, 1, 1, false),
        })
    }
}

#[derive(Debug, Clone)]
pub struct EcmParams {
    pub cfg: EcmConfig,
    /// Gate on the raw correlation map; always present.
    pub se: SeBlock,
    pub scf: Option<RepUnit>,
    pub iab: Option<IabParams>,
}

impl EcmParams {
    pub fn random(rng: &mut Prng, cfg: EcmConfig, corr_ch: usize, search_ch: usize) -> Result<Self> {
        cfg.validate(corr_ch, search_ch)?;
        Ok(EcmParams {
            cfg,
            se: SeBlock::random(rng, corr_ch),
            scf: if cfg.use_scf {
                Some(RepUnit::random(rng, RepKind::Scf, corr_ch, corr_ch)?)
            } else {
                None
            },
            iab: if cfg.use_iab {
                Some(IabParams::random(rng, corr_ch, cfg.iab_expansion)?)
            } else {
                None
            },
        })
    }

    pub fn fuse(&self) -> Result<EcmParams> {
        let mut out = self.clone();
        if let Some(scf) = &self.scf {
            out.scf = Some(scf.fuse()?);
        }
        Ok(out)
    }

    pub fn is_fused(&self) -> bool {
        self.scf.as_ref().map_or(true, |s| s.is_fused())
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        self.se.collect(&format!("{prefix}.se"), store)?;
        if let Some(scf) = &self.scf {
            scf.collect(&format!("{prefix}.scf"), store)?;
        }
        if let Some(iab) = &self.iab {
            iab.expand.collect(&format!("{prefix}.iab.expand"), store)?;
            iab.project.collect(&format!("{prefix}.iab.project"), store)?;
        }
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        self.se.load(&format!("{prefix}.se"), store)?;
        if let Some(scf) = &mut self.scf {
            scf.load(&format!("{prefix}.scf"), store)?;
        }
        if let Some(iab) = &mut self.iab {
            iab.expand.load(&format!("{prefix}.iab.expand"), store)?;
            iab.project.load(&format!("{prefix}.iab.project"), store)?;
        }
        Ok(())
    }
}

// ── Operations ──────────────────────────────────────────────────────────

/// Correlate every template pixel against the search map, treating template
/// pixels as 1x1 kernels. Output channel k = i*Wz + j holds the response of
/// template location (i, j); scores are scaled by 1/sqrt(C) to keep the
/// dynamic range independent of feature width.
pub fn pixelwise_corr(z: &Tensor, x: &Tensor) -> Result<Tensor> {
    if z.n() != 1 || x.n() != 1 {
        return Err(Error::Shape("pixelwise_corr expects batch 1".into()));
    }
    if z.c() != x.c() {
        return Err(Error::Shape(format!(
            "pixelwise_corr channel mismatch: template {} vs search {}",
            z.c(),
            x.c()
        )));
    }
    let c = z.c();
    let (hz, wz, hx, wx) = (z.h(), z.w(), x.h(), x.w());
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = Tensor::zeros(1, hz * wz, hx, wx)?;
    for i in 0..hz {
        for j in 0..wz {
            let k = i * wz + j;
            for p in 0..hx {
                for q in 0..wx {
                    let mut s = 0.0f64;
                    for cc in 0..c {
                        s += z.at(0, cc, i, j) as f64 * x.at(0, cc, p, q) as f64;
                    }
                    out.set(0, k, p, q, (s * scale) as f32);
                }
            }
        }
    }
    Ok(out)
}

/// SCF refinement: branch-sum of the rep unit, plus the input when `skip`.
pub fn scf_forward(f: &Tensor, scf: &RepUnit, skip: bool) -> Result<Tensor> {
    let y = scf.forward(f)?;
    if skip { y.add(f) } else { Ok(y) }
}

/// IAB refinement: project(relu(expand(f))), plus the input when `skip`.
pub fn iab_forward(f: &Tensor, iab: &IabParams, skip: bool) -> Result<Tensor> {
    let y = iab.project.forward(&iab.expand.forward(f)?)?;
    if skip { y.add(f) } else { Ok(y) }
}

/// Full fusion pass: correlation, SE gate, optional SCF and IAB, then the
/// reuse step. Returns the inputs for the (cls, box) head branches; each
/// branch gets the reused tensor only if its flag is set.
pub fn ecm_forward(z_feat: &Tensor, x_feat: &Tensor, p: &EcmParams) -> Result<(Tensor, Tensor)> {
    let corr = pixelwise_corr(z_feat, x_feat)?;
    let mut f = p.se.forward(&corr)?;
    if let Some(scf) = &p.scf {
        f = scf_forward(&f, scf, p.cfg.scf_skip)?;
    }
    if let Some(iab) = &p.iab {
        f = iab_forward(&f, iab, p.cfg.iab_skip)?;
    }
    let reused = if (p.cfg.reuse_cls || p.cfg.reuse_box) && p.cfg.reuse_mode != ReuseMode::None {
        Some(match p.cfg.reuse_mode {
            ReuseMode::Concat => Tensor::concat_channels(&f, x_feat)?,
            ReuseMode::Add => f.add(x_feat)?,
            ReuseMode::None => unreachable!(),
        })
    } else {
        None
    };
    let pick = |wants: bool| match (&reused, wants) {
        (Some(r), true) => r.clone(),
        _ => f.clone(),
    };
    Ok((pick(p.cfg.reuse_cls), pick(p.cfg.reuse_box)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform;
    use crate::tensor::{batchnorm_infer, conv2d, BatchNormParams};
    use rand::{Rng, SeedableRng};

    // Brute-force correlation with its own index arithmetic; shares no code
    // with pixelwise_corr.
    fn corr_oracle(z: &Tensor, x: &Tensor) -> Vec<f32> {
        let (c, hz, wz) = (z.c(), z.h(), z.w());
        let (hx, wx) = (x.h(), x.w());
        let zd = z.data();
        let xd = x.data();
        let mut out = vec![0.0f32; hz * wz * hx * wx];
        for zr in 0..hz {
            for zc in 0..wz {
                for xr in 0..hx {
                    for xc in 0..wx {
                        let mut acc = 0.0f64;
                        for ch in 0..c {
                            let zv = zd[(ch * hz + zr) * wz + zc] as f64;
                            let xv = xd[(ch * hx + xr) * wx + xc] as f64;
                            acc += zv * xv;
                        }
                        let k = zr * wz + zc;
                        out[(k * hx + xr) * wx + xc] = (acc / (c as f64).sqrt()) as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_template_correlates_to_zero() {
        let z = Tensor::zeros(1, 4, 3, 3).unwrap();
        let mut rng = Prng::seed_from_u64(0);
        let x = uniform(&mut rng, 1, 4, 5, 5, -1.0, 1.0);
        let out = pixelwise_corr(&z, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_single_pixel_template_copies_search_map() {
        let z = Tensor::filled(1, 1, 1, 1, 1.0).unwrap();
        let mut rng = Prng::seed_from_u64(1);
        let x = uniform(&mut rng, 1, 1, 4, 6, -2.0, 2.0);
        let out = pixelwise_corr(&z, &x).unwrap();
        assert_eq!(out.shape(), (1, 1, 4, 6));
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn correlation_matches_loop_oracle() {
        let mut rng = Prng::seed_from_u64(2);
        // the small fixed case first
        let z = uniform(&mut rng, 1, 2, 2, 2, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 2, 3, 3, -1.0, 1.0);
        let out = pixelwise_corr(&z, &x).unwrap();
        assert_eq!(out.shape(), (1, 4, 3, 3));
        for (a, b) in out.data().iter().zip(corr_oracle(&z, &x)) {
            assert!((a - b).abs() <= 1e-5);
        }
        // then randomized shapes
        for _ in 0..20 {
            let c = rng.gen_range(1..8);
            let (hz, wz) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (hx, wx) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let z = uniform(&mut rng, 1, c, hz, wz, -2.0, 2.0);
            let x = uniform(&mut rng, 1, c, hx, wx, -2.0, 2.0);
            let out = pixelwise_corr(&z, &x).unwrap();
            for (a, b) in out.data().iter().zip(corr_oracle(&z, &x)) {
                assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn correlation_is_linear_in_search_features() {
        let mut rng = Prng::seed_from_u64(3);
        let z = uniform(&mut rng, 1, 3, 2, 2, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 3, 4, 4, -1.0, 1.0);
        let doubled = pixelwise_corr(&z, &x.scale(2.0).unwrap()).unwrap();
        let base = pixelwise_corr(&z, &x).unwrap();
        assert_eq!(doubled.data(), base.scale(2.0).unwrap().data());
    }

    #[test]
    fn correlation_rejects_channel_mismatch() {
        let z = Tensor::zeros(1, 3, 2, 2).unwrap();
        let x = Tensor::zeros(1, 4, 4, 4).unwrap();
        assert!(matches!(pixelwise_corr(&z, &x), Err(Error::Shape(_))));
    }

    fn zeroed_scf(rng: &mut Prng, c: usize) -> RepUnit {
        let mut spec = crate::reparam::make_scf(rng, c);
        for br in &mut spec.branches {
            let (n, ci, kh, kw) = br.conv.weight.shape();
            br.conv.weight = Tensor::zeros(n, ci, kh, kw).unwrap();
            br.bn = BatchNormParams::identity(n);
        }
        RepUnit::Train(spec)
    }

    #[test]
    fn zero_weight_scf_with_skip_passes_input_through() {
        let mut rng = Prng::seed_from_u64(4);
        let f = uniform(&mut rng, 1, 5, 4, 4, -1.0, 1.0);
        let scf = zeroed_scf(&mut rng, 5);
        let y = scf_forward(&f, &scf, true).unwrap();
        assert_eq!(y.data(), f.data());
    }

    #[test]
    fn scf_skip_adds_exactly_the_input() {
        let mut rng = Prng::seed_from_u64(5);
        let f = uniform(&mut rng, 1, 4, 3, 3, -1.0, 1.0);
        let scf = RepUnit::random(&mut rng, RepKind::Scf, 4, 4).unwrap();
        let with = scf_forward(&f, &scf, true).unwrap();
        let without = scf_forward(&f, &scf, false).unwrap();
        assert_eq!(with.data(), without.add(&f).unwrap().data());
    }

    #[test]
    fn scf_train_and_fused_forms_agree_inside_the_skip() {
        let mut rng = Prng::seed_from_u64(6);
        let f = uniform(&mut rng, 1, 6, 5, 5, -1.0, 1.0);
        let scf = RepUnit::random(&mut rng, RepKind::Scf, 6, 6).unwrap();
        let fused = scf.fuse().unwrap();
        let a = scf_forward(&f, &scf, true).unwrap();
        let b = scf_forward(&f, &fused, true).unwrap();
        assert!(Tensor::max_abs_diff(&a, &b) <= 1e-4);
    }

    #[test]
    fn zero_projection_iab_with_skip_passes_input_through() {
        let mut rng = Prng::seed_from_u64(7);
        let mut iab = IabParams::random(&mut rng, 4, 4.0).unwrap();
        iab.project.conv.weight = Tensor::zeros(4, 16, 1, 1).unwrap();
        iab.project.bn = BatchNormParams::identity(4);
        let f = uniform(&mut rng, 1, 4, 3, 3, -1.0, 1.0);
        let y = iab_forward(&f, &iab, true).unwrap();
        assert_eq!(y.data(), f.data());
    }

    #[test]
    fn iab_maps_zero_to_zero_without_biases() {
        let mut rng = Prng::seed_from_u64(8);
        let mut iab = IabParams::random(&mut rng, 3, 2.0).unwrap();
        iab.expand.bn = BatchNormParams::identity(6);
        iab.project.bn = BatchNormParams::identity(3);
        let f = Tensor::zeros(1, 3, 4, 4).unwrap();
        let y = iab_forward(&f, &iab, false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iab_equals_handwritten_op_composition() {
        let mut rng = Prng::seed_from_u64(9);
        let iab = IabParams::random(&mut rng, 4, 4.0).unwrap();
        let f = uniform(&mut rng, 1, 4, 5, 5, -1.0, 1.0);
        let wide = batchnorm_infer(&conv2d(&f, &iab.expand.conv).unwrap(), &iab.expand.bn)
            .unwrap()
            .relu();
        let proj = batchnorm_infer(&conv2d(&wide, &iab.project.conv).unwrap(), &iab.project.bn)
            .unwrap();
        let composed = proj.add(&f).unwrap();
        let y = iab_forward(&f, &iab, true).unwrap();
        assert_eq!(y.data(), composed.data());
    }

    #[test]
    fn fractional_expanded_width_is_rejected() {
        assert!(iab_width(3, 1.5).is_err());
        assert!(iab_width(4, -1.0).is_err());
        assert_eq!(iab_width(4, 1.5).unwrap(), 6);
        let mut rng = Prng::seed_from_u64(10);
        let cfg = EcmConfig { iab_expansion: 1.5, ..EcmConfig::default() };
        assert!(EcmParams::random(&mut rng, cfg, 3, 96).is_err());
    }

    #[test]
    fn default_config_yields_160_channel_branch_inputs() {
        let mut rng = Prng::seed_from_u64(11);
        let z = uniform(&mut rng, 1, 96, 8, 8, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 96, 16, 16, -1.0, 1.0);
        let p = EcmParams::random(&mut rng, EcmConfig::default(), 64, 96).unwrap();
        let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
        assert_eq!(cls_in.shape(), (1, 160, 16, 16));
        assert_eq!(box_in.shape(), (1, 160, 16, 16));
        assert_eq!(EcmConfig::default().branch_channels(64, 96), (160, 160));
    }

    #[test]
    fn reuse_none_keeps_correlation_channels() {
        let mut rng = Prng::seed_from_u64(12);
        let z = uniform(&mut rng, 1, 96, 8, 8, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 96, 16, 16, -1.0, 1.0);
        let cfg = EcmConfig { reuse_mode: ReuseMode::None, ..EcmConfig::default() };
        let p = EcmParams::random(&mut rng, cfg, 64, 96).unwrap();
        let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
        assert_eq!(cls_in.shape(), (1, 64, 16, 16));
        assert_eq!(box_in.shape(), (1, 64, 16, 16));
    }

    #[test]
    fn concat_trail_is_search_features_bit_for_bit() {
        let mut rng = Prng::seed_from_u64(13);
        let z = uniform(&mut rng, 1, 96, 8, 8, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 96, 16, 16, -1.0, 1.0);
        let p = EcmParams::random(&mut rng, EcmConfig::default(), 64, 96).unwrap();
        let (cls_in, _) = ecm_forward(&z, &x, &p).unwrap();
        let trail = cls_in.slice_channels(64, 160).unwrap();
        assert_eq!(trail.data(), x.data());
    }

    #[test]
    fn add_reuse_requires_matching_channels() {
        let mut rng = Prng::seed_from_u64(14);
        let cfg = EcmConfig { reuse_mode: ReuseMode::Add, ..EcmConfig::default() };
        // 8x8 template -> 64 correlation channels vs 96 search channels
        assert!(matches!(EcmParams::random(&mut rng, cfg, 64, 96), Err(Error::Config(_))));
        // 4x4 template over 16 channels lines up: corr 16 == search 16
        let p = EcmParams::random(&mut rng, cfg, 16, 16).unwrap();
        let z = uniform(&mut rng, 1, 16, 4, 4, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 16, 6, 6, -1.0, 1.0);
        let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
        assert_eq!(cls_in.shape(), (1, 16, 6, 6));
        assert_eq!(box_in.shape(), (1, 16, 6, 6));
    }

    #[test]
    fn per_branch_reuse_flags_split_the_outputs() {
        let mut rng = Prng::seed_from_u64(15);
        let z = uniform(&mut rng, 1, 96, 8, 8, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 96, 16, 16, -1.0, 1.0);
        let cfg = EcmConfig { reuse_box: false, ..EcmConfig::default() };
        let p = EcmParams::random(&mut rng, cfg, 64, 96).unwrap();
        let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
        assert_eq!(cls_in.shape(), (1, 160, 16, 16));
        assert_eq!(box_in.shape(), (1, 64, 16, 16));
        assert_eq!(cfg.branch_channels(64, 96), (160, 64));
        // the plain branch is the leading slice of the concatenated one
        let lead = cls_in.slice_channels(0, 64).unwrap();
        assert_eq!(lead.data(), box_in.data());
    }

    #[test]
    fn all_toggles_off_reduces_to_gated_correlation() {
        let mut rng = Prng::seed_from_u64(16);
        let z = uniform(&mut rng, 1, 8, 3, 3, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 8, 5, 5, -1.0, 1.0);
        let cfg = EcmConfig {
            use_scf: false,
            use_iab: false,
            reuse_mode: ReuseMode::None,
            ..EcmConfig::default()
        };
        let p = EcmParams::random(&mut rng, cfg, 9, 8).unwrap();
        let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
        let baseline = p.se.forward(&pixelwise_corr(&z, &x).unwrap()).unwrap();
        assert_eq!(cls_in.data(), baseline.data());
        assert_eq!(box_in.data(), baseline.data());
    }

    #[test]
    fn output_spatial_dims_follow_the_search_map_for_every_config() {
        let mut rng = Prng::seed_from_u64(17);
        let z = uniform(&mut rng, 1, 6, 2, 3, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 6, 5, 7, -1.0, 1.0);
        for mode in [ReuseMode::Concat, ReuseMode::Add, ReuseMode::None] {
            for use_scf in [false, true] {
                for use_iab in [false, true] {
                    let cfg = EcmConfig {
                        use_scf,
                        use_iab,
                        reuse_mode: mode,
                        iab_expansion: 4.0,
                        ..EcmConfig::default()
                    };
                    // corr channels = 2*3 = 6 == search channels, so add works
                    let p = EcmParams::random(&mut rng, cfg, 6, 6).unwrap();
                    let (cls_in, box_in) = ecm_forward(&z, &x, &p).unwrap();
                    assert_eq!((cls_in.h(), cls_in.w()), (5, 7));
                    assert_eq!((box_in.h(), box_in.w()), (5, 7));
                }
            }
        }
    }

    #[test]
    fn params_round_trip_through_store() {
        let mut rng = Prng::seed_from_u64(18);
        let z = uniform(&mut rng, 1, 96, 8, 8, -1.0, 1.0);
        let x = uniform(&mut rng, 1, 96, 16, 16, -1.0, 1.0);
        let p = EcmParams::random(&mut rng, EcmConfig::default(), 64, 96).unwrap();
        let mut store = Store::new();
        p.collect("ecm", &mut store).unwrap();
        let mut fresh = EcmParams::random(&mut rng, EcmConfig::default(), 64, 96).unwrap();
        fresh.load("ecm", &mut store).unwrap();
        assert!(store.is_empty());
        let (a_cls, a_box) = ecm_forward(&z, &x, &p).unwrap();
        let (b_cls, b_box) = ecm_forward(&z, &x, &fresh).unwrap();
        assert_eq!(a_cls.data(), b_cls.data());
        assert_eq!(a_box.data(), b_box.data());
    }
}
