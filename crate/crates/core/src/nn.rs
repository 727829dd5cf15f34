//! Model building blocks: Conv-BN(-ReLU), squeeze-excitation, inverted
//! residual, and the truncated MobileNetV2-style backbone (stride 16,
//! 96 output channels).

use crate::error::{Error, Result};
use crate::init::{he_conv, Prng};
use crate::tensor::{batchnorm_infer, conv2d, BatchNormParams, Conv2dParams, Tensor};
use crate::weights::Store;

/// Conv + inference batchnorm, optionally followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2dParams,
    pub bn: BatchNormParams,
    pub relu: bool,
}

impl ConvBn {
    pub fn random(
        rng: &mut Prng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Self {
        let conv = Conv2dParams::new(he_conv(rng, c_out, c_in / groups, k, k), None)
            .with_stride(stride)
            .with_padding(k / 2)
            .with_groups(groups);
        ConvBn { conv, bn: BatchNormParams::identity(c_out), relu }
    }

    pub fn c_out(&self) -> usize {
        self.conv.c_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = batchnorm_infer(&conv2d(x, &self.conv)?, &self.bn)?;
        Ok(if self.relu { y.relu() } else { y })
    }

    /// Set the batchnorm statistics to the conv output's actual per-channel
    /// moments on `x` — what training would drive the running stats toward —
    /// and return the block output. Keeps freshly random deep stacks in a
    /// sane activation range instead of compounding variance layer by layer.
    pub fn calibrate(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.conv)?;
        let (mean, var) = y.channel_moments();
        self.bn.mean = mean;
        self.bn.var = var;
        let out = batchnorm_infer(&y, &self.bn)?;
        Ok(if self.relu { out.relu() } else { out })
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        store.insert_tensor(&format!("{prefix}.conv.weight"), &self.conv.weight)?;
        store.insert_vec(&format!("{prefix}.bn.gamma"), &self.bn.gamma)?;
        store.insert_vec(&format!("{prefix}.bn.beta"), &self.bn.beta)?;
        store.insert_vec(&format!("{prefix}.bn.mean"), &self.bn.mean)?;
        store.insert_vec(&format!("{prefix}.bn.var"), &self.bn.var)?;
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        let w = store.take_tensor4(&format!("{prefix}.conv.weight"))?;
        if w.shape() != self.conv.weight.shape() {
            return Err(Error::Weights(format!(
                "{prefix}.conv.weight is {:?}, model wants {:?}",
                w.shape(),
                self.conv.weight.shape()
            )));
        }
        self.conv.weight = w;
        let c = self.c_out();
        self.bn.gamma = store.take_vec(&format!("{prefix}.bn.gamma"), c)?;
        self.bn.beta = store.take_vec(&format!("{prefix}.bn.beta"), c)?;
        self.bn.mean = store.take_vec(&format!("{prefix}.bn.mean"), c)?;
        self.bn.var = store.take_vec(&format!("{prefix}.bn.var"), c)?;
        if self.bn.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Weights(format!("{prefix}.bn.var holds negative variance")));
        }
        Ok(())
    }
}

/// Squeeze-excitation with reduction ratio 4: global average pool, 1x1 down,
/// ReLU, 1x1 up, sigmoid gate multiplied back onto the input.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub reduce: Conv2dParams,
    pub expand: Conv2dParams,
}

pub const SE_REDUCTION: usize = 4;

impl SeBlock {
    pub fn random(rng: &mut Prng, c: usize) -> Self {
        let mid = (c / SE_REDUCTION).max(1);
        SeBlock {
            reduce: Conv2dParams::new(he_conv(rng, mid, c, 1, 1), Some(vec![0.0; mid])),
            expand: Conv2dParams::new(he_conv(rng, c, mid, 1, 1), Some(vec![0.0; c])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let squeezed = x.global_avg_pool();
        let gate = conv2d(&conv2d(&squeezed, &self.reduce)?.relu(), &self.expand)?.sigmoid();
        x.mul_channel(&gate)
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        store.insert_tensor(&format!("{prefix}.reduce.weight"), &self.reduce.weight)?;
        store.insert_vec(&format!("{prefix}.reduce.bias"), self.reduce.bias.as_ref().unwrap())?;
        store.insert_tensor(&format!("{prefix}.expand.weight"), &self.expand.weight)?;
        store.insert_vec(&format!("{prefix}.expand.bias"), self.expand.bias.as_ref().unwrap())?;
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        for (name, conv) in [("reduce", &mut self.reduce), ("expand", &mut self.expand)] {
            let w = store.take_tensor4(&format!("{prefix}.{name}.weight"))?;
            if w.shape() != conv.weight.shape() {
                return Err(Error::Weights(format!(
                    "{prefix}.{name}.weight is {:?}, model wants {:?}",
                    w.shape(),
                    conv.weight.shape()
                )));
            }
            conv.weight = w;
            conv.bias =
                Some(store.take_vec(&format!("{prefix}.{name}.bias"), conv.c_out())?);
        }
        Ok(())
    }
}

/// MobileNetV2 bottleneck: optional 1x1 expansion (skipped when t = 1),
/// 3x3 depthwise, 1x1 linear projection; residual skip when the block keeps
/// stride and channel count.
#[derive(Debug, Clone)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub depthwise: ConvBn,
    pub project: ConvBn,
    pub use_skip: bool,
}

impl InvertedResidual {
    pub fn random(rng: &mut Prng, c_in: usize, c_out: usize, stride: usize, t: usize) -> Self {
        let c_mid = c_in * t;
        InvertedResidual {
            expand: (t != 1).then(|| ConvBn::random(rng, c_in, c_mid, 1, 1, 1, true)),
            depthwise: ConvBn::random(rng, c_mid, c_mid, 3, stride, c_mid, true),
            project: ConvBn::random(rng, c_mid, c_out, 1, 1, 1, false),
            use_skip: stride == 1 && c_in == c_out,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mid = match &self.expand {
            Some(e) => e.forward(x)?,
            None => x.clone(),
        };
        let y = self.project.forward(&self.depthwise.forward(&mid)?)?;
        if self.use_skip {
            x.add(&y)
        } else {
            Ok(y)
        }
    }

    pub fn calibrate(&mut self, x: &Tensor) -> Result<Tensor> {
        let mid = match &mut self.expand {
            Some(e) => e.calibrate(x)?,
            None => x.clone(),
        };
        let y = self.project.calibrate(&self.depthwise.calibrate(&mid)?)?;
        if self.use_skip {
            x.add(&y)
        } else {
            Ok(y)
        }
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        if let Some(e) = &self.expand {
            e.collect(&format!("{prefix}.expand"), store)?;
        }
        self.depthwise.collect(&format!("{prefix}.depthwise"), store)?;
        self.project.collect(&format!("{prefix}.project"), store)?;
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        if let Some(e) = &mut self.expand {
            e.load(&format!("{prefix}.expand"), store)?;
        }
        self.depthwise.load(&format!("{prefix}.depthwise"), store)?;
        self.project.load(&format!("{prefix}.project"), store)?;
        Ok(())
    }
}

// ── Backbone ────────────────────────────────────────────────────────────

/// Bottleneck stage table: (expansion t, output channels, repeats, first
/// stride). The standard MobileNetV2 table truncated after the 96-channel
/// stride-16 stage.
pub const BACKBONE_TABLE: [(usize, usize, usize, usize); 5] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
];

pub const STEM_CHANNELS: usize = 32;
pub const BACKBONE_OUT_CHANNELS: usize = 96;
pub const BACKBONE_STRIDE: usize = 16;

/// Stride-2 stem plus the truncated bottleneck stages. Maps (n, 3, h, w)
/// to (n, 96, h/16, w/16); h and w must be multiples of 16.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stem: ConvBn,
    pub stages: Vec<Vec<InvertedResidual>>,
}

impl Backbone {
    pub fn random(rng: &mut Prng) -> Self {
        let stem = ConvBn::random(rng, 3, STEM_CHANNELS, 3, 2, 1, true);
        let mut stages = Vec::new();
        let mut c_in = STEM_CHANNELS;
        for (t, c_out, n, s) in BACKBONE_TABLE {
            let mut blocks = Vec::new();
            for j in 0..n {
                let stride = if j == 0 { s } else { 1 };
                blocks.push(InvertedResidual::random(rng, c_in, c_out, stride, t));
                c_in = c_out;
            }
            stages.push(blocks);
        }
        Backbone { stem, stages }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.shape();
        if c != 3 {
            return Err(Error::Shape(format!("backbone wants 3 input channels, got {c}")));
        }
        if h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "backbone input {h}x{w} must be a multiple of {BACKBONE_STRIDE}"
            )));
        }
        let mut y = self.stem.forward(x)?;
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y)?;
            }
        }
        Ok(y)
    }

    pub fn calibrate(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.stem.calibrate(x)?;
        for stage in &mut self.stages {
            for block in stage {
                y = block.calibrate(&y)?;
            }
        }
        Ok(y)
    }

    pub fn collect(&self, prefix: &str, store: &mut Store) -> Result<()> {
        self.stem.collect(&format!("{prefix}.stem"), store)?;
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.collect(&format!("{prefix}.stage{i}.block{j}"), store)?;
            }
        }
        Ok(())
    }

    pub fn load(&mut self, prefix: &str, store: &mut Store) -> Result<()> {
        self.stem.load(&format!("{prefix}.stem"), store)?;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.load(&format!("{prefix}.stage{i}.block{j}"), store)?;
            }
        }
        Ok(())
    }
}
