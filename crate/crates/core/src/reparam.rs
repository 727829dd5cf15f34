//! Structural reparameterization: Conv-BN folding and multi-branch kernel
//! fusion, plus the train-form blocks (SCF, RepN33, RepN31, Conv33) and their
//! single-conv deploy forms.
//!
//! Rep blocks here are linear — branches are Conv-BN pairs summed
//! elementwise, and any ReLU sits outside the unit.

use crate::error::{Error, Result};
use crate::init::Prng;
use crate::nn::ConvBn;
use crate::tensor::{BatchNormParams, Conv2dParams, Tensor};
use crate::weights::Store;

/// Fold inference batchnorm into the preceding conv:
/// W' = W * gamma / sqrt(var + eps) per output channel,
/// b' = beta + (b - mean) * gamma / sqrt(var + eps).
pub fn fold_conv_bn(conv: &Conv2dParams, bn: &BatchNormParams) -> Result<Conv2dParams> {
    let (c_out, cpg, kh, kw) = conv.weight.shape();
    for (name, v) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)]
    {
        if v.len() != c_out {
            return Err(Error::Shape(format!(
                "fold_conv_bn: bn.{name} has {} entries for {c_out} output channels",
                v.len()
            )));
        }
    }
    if bn.var.iter().any(|&v| (v as f64 + bn.eps as f64) <= 0.0) {
        return Err(Error::Config("fold_conv_bn: var + eps must be positive".into()));
    }
    let per = cpg * kh * kw;
    let mut w = vec![0.0f32; c_out * per];
    let mut b = vec![0.0f32; c_out];
    for oc in 0..c_out {
        let scale = bn.gamma[oc] as f64 / (bn.var[oc] as f64 + bn.eps as f64).sqrt();
        for i in 0..per {
            w[oc * per + i] = (conv.weight.data()[oc * per + i] as f64 * scale) as f32;
        }
        let b0 = conv.bias.as_ref().map_or(0.0, |b| b[oc] as f64);
        b[oc] = (bn.beta[oc] as f64 + (b0 - bn.mean[oc] as f64) * scale) as f32;
    }
    Ok(Conv2dParams::new(Tensor::from_vec(c_out, cpg, kh, kw, w)?, Some(b))
        .with_stride(conv.stride)
        .with_padding(conv.padding)
        .with_groups(conv.groups))
}

/// Embed a 1x1 kernel at the center of a zero 3x3 kernel and bump padding by
/// one, which leaves the forward map unchanged at stride 1.
pub fn pad_1x1_to_3x3(conv: &Conv2dParams) -> Result<Conv2dParams> {
    let (c_out, cpg, kh, kw) = conv.weight.shape();
    if kh != 1 || kw != 1 {
        return Err(Error::Shape(format!("pad_1x1_to_3x3 wants a 1x1 kernel, got {kh}x{kw}")));
    }
    let mut w = Tensor::zeros(c_out, cpg, 3, 3)?;
    for oc in 0..c_out {
        for ic in 0..cpg {
            w.set(oc, ic, 1, 1, conv.weight.at(oc, ic, 0, 0));
        }
    }
    Ok(Conv2dParams::new(w, conv.bias.clone())
        .with_stride(conv.stride)
        .with_padding(conv.padding + 1)
        .with_groups(conv.groups))
}

// ── Branch specs ────────────────────────────────────────────────────────

/// Parallel Conv-BN branches (kernels 1 or 3, stride 1, shared channel
/// counts) combined by elementwise sum.
#[derive(Debug, Clone)]
pub struct RepBranchSpec {
    pub branches: Vec<ConvBn>,
}

impl RepBranchSpec {
    fn validate(&self) -> Result<()> {
        let first = self.branches.first().ok_or_else(|| {
            Error::Shape("rep block needs at least one branch".into())
        })?;
        let (c_out, c_in) = (first.conv.weight.n(), first.conv.weight.c());
        for (i, br) in self.branches.iter().enumerate() {
            let (bo, bi, kh, kw) = br.conv.weight.shape();
            if (bo, bi) != (c_out, c_in) {
                return Err(Error::Shape(format!(
                    "branch {i} maps {bi}->{bo}, branch 0 maps {c_in}->{c_out}"
                )));
            }
            if !(kh == kw && (kh == 1 || kh == 3)) {
                return Err(Error::Shape(format!("branch {i} kernel {kh}x{kw} not in {{1,3}}")));
            }
            if br.conv.stride != 1 || br.conv.groups != 1 || br.conv.padding != kh / 2 {
                return Err(Error::Shape(format!(
                    "branch {i} must be stride 1, groups 1, padding {}",
                    kh / 2
                )));
            }
            if br.relu {
                return Err(Error::Shape(format!("branch {i} must be linear (no relu)")));
            }
        }
        Ok(())
    }

    pub fn c_in(&self) -> usize {
        self.branches[0].conv.weight.c()
    }

    pub fn c_out(&self) -> usize {
        self.branches[0].conv.weight.n()
    }

    /// Train-form forward: elementwise sum of every branch's Conv-BN output.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let mut acc: Option<Tensor> = None;
        for br in &self.branches {
            let y = br.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        Ok(acc.expect("validated non-empty"))
    }
}

/// Deploy form: one 3x3 conv (pad 1) with bias.
#[derive(Debug, Clone)]
pub struct FusedConv {
    pub conv: Conv2dParams,
}

impl FusedConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        crate::tensor::conv2d(x, &self.conv)
    }
}

/// Fold every branch, pad 1x1 kernels to 3x3, and sum kernels and biases
/// into a single conv.
pub fn fuse_branches(spec: &RepBranchSpec) -> Result<FusedConv> {
    spec.validate()?;
    let (c_out, c_in) = (spec.c_out(), spec.c_in());
    let mut wsum = vec![0.0f64; c_out * c_in * 9];
    let mut bsum = vec![0.0f64; c_out];
    for br in &spec.branches {
        let folded = fold_conv_bn(&br.conv, &br.bn)?;
        let folded = if folded.kernel() == (1, 1) { pad_1x1_to_3x3(&folded)? } else { folded };
        for (acc, &v) in wsum.iter_mut().zip(folded.weight.data()) {
            *acc += v as f64;
        }
        for (acc, &v) in bsum.iter_mut().zip(folded.bias.as_ref().unwrap()) {
            *acc += v as f64;
        }
    }
    let weight = Tensor::from_vec(c_out, c_in, 3, 3, wsum.iter().map(|&v| v as f32).collect())?;
    let bias: Vec<f32> = bsum.iter().map(|&v| v as f32).collect();
    Ok(FusedConv {
        conv: Conv2dParams::new(weight, Some(bias)).with_padding(1),
    })
}

// ── Constructors ────────────────────────────────────────────────────────

/// The rep-block shapes used across the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepKind {
    /// Single 3x3 Conv-BN branch; fusion is a plain fold.
    Conv33,
    /// Two parallel 3x3 Conv-BN branches.
    RepN33,
    /// A 3x3 and a 1x1 Conv-BN branch.
    RepN31,
    /// Channel-preserving 3x3 + 1x1 pair (the ECM fusion unit).
    Scf,
}

impl RepKind {
    pub fn name(&self) -> &'static str {
        match self {
            RepKind::Conv33 => "conv33",
            RepKind::RepN33 => "repn33",
            RepKind::RepN31 => "repn31",
            RepKind::Scf => "scf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv33" => Ok(RepKind::Conv33),
            "repn33" => Ok(RepKind::RepN33),
            "repn31" => Ok(RepKind::RepN31),
            "scf" => Ok(RepKind::Scf),
            other => Err(Error::Config(format!(
                "unknown rep block kind `{other}` (expected conv33|repn33|repn31|scf)"
            ))),
        }
    }
}

fn branch(rng: &mut Prng, c_in: usize, c_out: usize, k: usize) -> ConvBn {
    ConvBn::random(rng, c_in, c_out, k, 1, 1, false)
}

/// Space-and-channel fusion unit: {3x3, 1x1}, channel-preserving.
pub fn make_scf(rng: &mut Prng, c: usize) -> RepBranchSpec {
    RepBranchSpec { branches: vec![branch(rng, c, c, 3), branch(rng, c, c, 1)] }
}

/// Two parallel 3x3 Conv-BN branches.
pub fn make_repn33(rng: &mut Prng, c_in: usize, c_out: usize) -> RepBranchSpec {
    RepBranchSpec { branches: vec![branch(rng, c_in, c_out, 3), branch(rng, c_in, c_out, 3)] }
}

/// A 3x3 plus a 1x1 Conv-BN branch.
pub fn make_repn31(rng: &mut Prng, c_in: usize, c_out: usize) -> RepBranchSpec {
    RepBranchSpec { branches: vec![branch(rng, c_in, c_out, 3), branch(rng, c_in, c_out, 1)] }
}

/// Single 3x3 Conv-BN branch.
pub fn make_conv33(rng: &mut Prng, c_in: usize, c_out: usize) -> RepBranchSpec {
    RepBranchSpec { branches: vec![branch(rng, c_in, c_out, 3)] }
}

pub fn make_block(rng: &mut Prng, kind: RepKind, c_in: usize, c_out: usize) -> Result<RepBranchSpec> {
    match kind {
        RepKind::Conv33 => Ok(make_conv33(rng, c_in, c_out)),
        RepKind::RepN33 => Ok(make_repn33(rng, c_in, c_out)),
        RepKind::RepN31 => Ok(make_repn31(rng, c_in, c_out)),
        RepKind::Scf => {
            if c_in != c_out {
                return Err(Error::Config(format!(
                    "scf preserves channels, got {c_in}->{c_out}"
                )));
            }
            Ok(make_scf(rng, c_in))
        }
    }
}

// ── Two-form unit ───────────────────────────────────────────────────────

/// A rep block in either its train form (parallel branches) or deploy form
/// (one fused conv). The forward map is equivalent within float tolerance.
#[derive(Debug, Clone)]
pub enum RepUnit {
    Train(RepBranchSpec),
    Deploy(FusedConv),
}

impl RepUnit {
    pub fn random(rng: &mut Prng, kind: RepKind, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(RepUnit::Train(make_block(rng, kind, c_in, c_out)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            RepUnit::Train(spec) => spec.forward(x),
            RepUnit::Deploy(f) => f.forward(x),
        }
    }

    /// Deploy-form copy. Fusing an already-deployed unit is a no-op.
    pub fn fuse(&self) -> Result<RepUnit> {
        match self {
            RepUnit::Train(spec) => Ok(RepUnit::Deploy(fuse_branches(spec)?)),
            RepUnit::Deploy(f) => Ok(RepUnit::Deploy(f.clone())),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, RepUnit::Deploy(_))
    }

    pub fn c_in(&self) -> usize {
        match self {
            RepUnit::Train(s) => s.c_in(),
            RepUnit::Deploy(f) => f.conv.weight.c(),
        }
    }

    pub fn c_out(&self) -> usize {
        match self {
            RepUnit::Train(s) => s.c_out(),
            RepUnit::Deploy(f) => f.conv.c_out(),
        }
    }

    /// Trainable scalar count: conv weights (+bias) plus bn gamma/beta.
    pub fn param_count(&self) -> usize {
        match self {
            RepUnit::Train(s) => s
                .branches
                .iter()
                .map(|b| b.conv.weight.numel() + 2 * b.conv.c_out())
                .sum(),
            RepUnit::Deploy(f) => f.conv.weight.numel() + f.conv.c_out(),
        }
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        match self {
            RepUnit::Train(spec) => {
                for (i, br) in spec.branches.iter().enumerate() {
                    br.collect(&format!("{prefix}.branch{i}"), store)?;
                }
            }
            RepUnit::Deploy(f) => {
                store.insert_tensor(&format!("{prefix}.fused.weight"), &f.conv.weight)?;
                store.insert_vec(&format!("{prefix}.fused.bias"), f.conv.bias.as_ref().unwrap())?;
            }
        }
        Ok(())
    }

    /// Fill from a store. The container decides the form: `{prefix}.fused.*`
    /// entries load as deploy form regardless of the skeleton's form;
    /// otherwise branches load into the train-form structure.
    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        let fused_name = format!("{prefix}.fused.weight");
        if store.contains(&fused_name) {
            let (c_in, c_out) = (self.c_in(), self.c_out());
            let w = store.take_tensor4(&fused_name)?;
            if w.shape() != (c_out, c_in, 3, 3) {
                return Err(Error::Weights(format!(
                    "{fused_name} is {:?}, model wants {:?}",
                    w.shape(),
                    (c_out, c_in, 3, 3)
                )));
            }
            let b = store.take_vec(&format!("{prefix}.fused.bias"), c_out)?;
            *self = RepUnit::Deploy(FusedConv {
                conv: Conv2dParams::new(w, Some(b)).with_padding(1),
            });
            Ok(())
        } else {
            match self {
                RepUnit::Train(spec) => {
                    for (i, br) in spec.branches.iter_mut().enumerate() {
                        br.load(&format!("{prefix}.branch{i}"), store)?;
                    }
                    Ok(())
                }
                RepUnit::Deploy(_) => Err(Error::Weights(format!(
                    "missing entry `{fused_name}`"
                ))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::uniform;
    use crate::tensor::{batchnorm_infer, conv2d};
    use rand::{Rng, SeedableRng};

    fn randomize_bn(rng: &mut Prng, bn: &mut BatchNormParams) {
        for v in bn.gamma.iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.beta.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in bn.mean.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in bn.var.iter_mut() {
            *v = rng.gen_range(0.1..2.0);
        }
    }

    fn randomized(mut spec: RepBranchSpec, rng: &mut Prng) -> RepBranchSpec {
        for br in &mut spec.branches {
            randomize_bn(rng, &mut br.bn);
        }
        spec
    }

    #[test]
    fn identity_bn_fold_keeps_conv_unchanged() {
        let mut rng = Prng::seed_from_u64(0);
        let conv = Conv2dParams::new(
            uniform(&mut rng, 4, 3, 3, 3, -1.0, 1.0),
            Some(vec![0.1, -0.2, 0.3, 0.0]),
        )
        .with_padding(1);
        let mut bn = BatchNormParams::identity(4);
        bn.eps = 0.0;
        let folded = fold_conv_bn(&conv, &bn).unwrap();
        assert_eq!(folded.weight.data(), conv.weight.data());
        assert_eq!(folded.bias.as_ref().unwrap(), conv.bias.as_ref().unwrap());
    }

    #[test]
    fn zero_conv_folds_to_pure_bn_shift() {
        // W=0, b=0: folded bias = beta - mean * gamma / sqrt(var + eps)
        let conv = Conv2dParams::new(Tensor::zeros(1, 1, 3, 3).unwrap(), None).with_padding(1);
        let bn = BatchNormParams {
            gamma: vec![3.0],
            beta: vec![1.0],
            mean: vec![5.0],
            var: vec![4.0],
            eps: 0.0,
        };
        let folded = fold_conv_bn(&conv, &bn).unwrap();
        assert!(folded.weight.data().iter().all(|&v| v == 0.0));
        // 1 - 5 * 3 / 2 = -6.5
        assert_eq!(folded.bias.as_ref().unwrap()[0], -6.5);
    }

    #[test]
    fn folded_conv_forward_equals_bn_of_conv() {
        let mut rng = Prng::seed_from_u64(1);
        for _ in 0..10 {
            let c_in = rng.gen_range(1..5);
            let c_out = rng.gen_range(1..5);
            let conv = Conv2dParams::new(
                uniform(&mut rng, c_out, c_in, 3, 3, -1.0, 1.0),
                Some((0..c_out).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            )
            .with_padding(1);
            let mut bn = BatchNormParams::identity(c_out);
            randomize_bn(&mut rng, &mut bn);
            let x = uniform(&mut rng, 1, c_in, 6, 6, -1.0, 1.0);
            let reference = batchnorm_infer(&conv2d(&x, &conv).unwrap(), &bn).unwrap();
            let folded = conv2d(&x, &fold_conv_bn(&conv, &bn).unwrap()).unwrap();
            assert!(Tensor::max_abs_diff(&reference, &folded) <= 1e-4);
        }
    }

    #[test]
    fn padded_1x1_is_forward_identical_to_original() {
        let mut rng = Prng::seed_from_u64(2);
        let conv = Conv2dParams::new(
            uniform(&mut rng, 3, 2, 1, 1, -1.0, 1.0),
            Some(vec![0.5, -0.5, 0.0]),
        );
        let padded = pad_1x1_to_3x3(&conv).unwrap();
        assert_eq!(padded.kernel(), (3, 3));
        assert_eq!(padded.padding, 1);
        assert_eq!(padded.weight.at(0, 0, 1, 1), conv.weight.at(0, 0, 0, 0));
        assert_eq!(padded.weight.at(0, 0, 0, 0), 0.0);
        let x = uniform(&mut rng, 1, 2, 5, 7, -1.0, 1.0);
        let a = conv2d(&x, &conv).unwrap();
        let b = conv2d(&x, &padded).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pad_rejects_3x3_kernels() {
        let conv = Conv2dParams::new(Tensor::zeros(1, 1, 3, 3).unwrap(), None);
        assert!(pad_1x1_to_3x3(&conv).is_err());
    }

    #[test]
    fn zeroed_second_branch_fuses_to_first_branch_fold() {
        let mut rng = Prng::seed_from_u64(3);
        let mut spec = randomized(make_repn33(&mut rng, 3, 4), &mut rng);
        // dead second branch: zero weights, identity BN
        spec.branches[1].conv.weight = Tensor::zeros(4, 3, 3, 3).unwrap();
        spec.branches[1].bn = BatchNormParams::identity(4);
        let fused = fuse_branches(&spec).unwrap();
        let single = fold_conv_bn(&spec.branches[0].conv, &spec.branches[0].bn).unwrap();
        assert_eq!(fused.conv.weight.data(), single.weight.data());
        assert_eq!(fused.conv.bias.as_ref().unwrap(), single.bias.as_ref().unwrap());
    }

    #[test]
    fn constructors_have_the_documented_branch_shapes() {
        let mut rng = Prng::seed_from_u64(4);
        let scf = make_scf(&mut rng, 64);
        assert_eq!(scf.branches.len(), 2);
        assert_eq!((scf.c_in(), scf.c_out()), (64, 64));
        assert_eq!(scf.branches[0].conv.kernel(), (3, 3));
        assert_eq!(scf.branches[1].conv.kernel(), (1, 1));

        let n33 = make_repn33(&mut rng, 8, 16);
        assert_eq!(n33.branches.len(), 2);
        assert!(n33.branches.iter().all(|b| b.conv.kernel() == (3, 3)));

        let n31 = make_repn31(&mut rng, 8, 16);
        assert_eq!(n31.branches[1].conv.kernel(), (1, 1));

        let c33 = make_conv33(&mut rng, 8, 16);
        assert_eq!(c33.branches.len(), 1);

        assert!(make_block(&mut rng, RepKind::Scf, 8, 16).is_err());
    }

    #[test]
    fn conv33_fusion_is_a_plain_fold() {
        let mut rng = Prng::seed_from_u64(5);
        let spec = randomized(make_conv33(&mut rng, 3, 5), &mut rng);
        let fused = fuse_branches(&spec).unwrap();
        let folded = fold_conv_bn(&spec.branches[0].conv, &spec.branches[0].bn).unwrap();
        assert_eq!(fused.conv.weight.data(), folded.weight.data());
    }

    #[test]
    fn train_and_deploy_forms_agree_for_every_kind() {
        let mut rng = Prng::seed_from_u64(6);
        for kind in [RepKind::Conv33, RepKind::RepN33, RepKind::RepN31, RepKind::Scf] {
            for _ in 0..12 {
                let c = rng.gen_range(1..8);
                let c_out = if kind == RepKind::Scf { c } else { rng.gen_range(1..8) };
                let spec = randomized(make_block(&mut rng, kind, c, c_out).unwrap(), &mut rng);
                let unit = RepUnit::Train(spec);
                let fused = unit.fuse().unwrap();
                let x = uniform(&mut rng, 1, c, 6, 6, -2.0, 2.0);
                let a = unit.forward(&x).unwrap();
                let b = fused.forward(&x).unwrap();
                assert!(
                    Tensor::max_abs_diff(&a, &b) <= 1e-4,
                    "{} diverged: {}",
                    kind.name(),
                    Tensor::max_abs_diff(&a, &b)
                );
                assert!(Tensor::rel_frobenius(&a, &b) <= 1e-5);
            }
        }
    }

    #[test]
    fn fusing_twice_is_a_no_op() {
        let mut rng = Prng::seed_from_u64(7);
        let unit = RepUnit::Train(randomized(make_repn31(&mut rng, 4, 4), &mut rng));
        let once = unit.fuse().unwrap();
        let twice = once.fuse().unwrap();
        let x = uniform(&mut rng, 1, 4, 5, 5, -1.0, 1.0);
        assert_eq!(
            once.forward(&x).unwrap().data(),
            twice.forward(&x).unwrap().data()
        );
    }

    #[test]
    fn deploy_form_has_strictly_fewer_params() {
        let mut rng = Prng::seed_from_u64(8);
        for kind in [RepKind::RepN33, RepKind::RepN31, RepKind::Scf] {
            let unit = RepUnit::random(&mut rng, kind, 16, 16).unwrap();
            assert!(unit.fuse().unwrap().param_count() < unit.param_count());
        }
    }

    #[test]
    fn rep_unit_round_trips_both_forms_through_store() {
        let mut rng = Prng::seed_from_u64(9);
        let unit = RepUnit::Train(randomized(make_repn33(&mut rng, 3, 6), &mut rng));
        let x = uniform(&mut rng, 1, 3, 6, 6, -1.0, 1.0);

        // train form
        let mut store = Store::new();
        unit.collect("u", &mut store).unwrap();
        let mut fresh = RepUnit::random(&mut rng, RepKind::RepN33, 3, 6).unwrap();
        fresh.load("u", &mut store).unwrap();
        assert!(store.is_empty());
        assert_eq!(fresh.forward(&x).unwrap().data(), unit.forward(&x).unwrap().data());

        // deploy form loads into a train-form skeleton and switches it
        let fused = unit.fuse().unwrap();
        let mut store = Store::new();
        fused.collect("u", &mut store).unwrap();
        let mut fresh = RepUnit::random(&mut rng, RepKind::RepN33, 3, 6).unwrap();
        fresh.load("u", &mut store).unwrap();
        assert!(fresh.is_fused());
        assert_eq!(fresh.forward(&x).unwrap().data(), fused.forward(&x).unwrap().data());
    }
}
