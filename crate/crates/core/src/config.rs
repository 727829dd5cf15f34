//! One flat, human-readable key/value config covering every tunable:
//! resolutions, crop factors, fusion-module toggles, head shape, and loss
//! weights. Parsing starts from defaults and applies overrides, so a config
//! file only needs the keys it changes.

use std::collections::BTreeSet;
use std::path::Path;

use crate::ecm::{EcmConfig, ReuseMode};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::loss::{IouKind, LossConfig};
use crate::nn::{BACKBONE_OUT_CHANNELS, BACKBONE_STRIDE};
use crate::reparam::RepKind;

pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Blend weight of the motion prior at decode time.
    pub window_weight: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
    pub ecm: EcmConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            template_size: 128,
            search_size: 256,
            template_factor: 2.0,
            search_factor: 4.0,
            window_weight: 0.49,
            norm_mean: NORM_MEAN,
            norm_std: NORM_STD,
            ecm: EcmConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn template_feat_side(&self) -> usize {
        self.template_size / BACKBONE_STRIDE
    }

    pub fn search_feat_side(&self) -> usize {
        self.search_size / BACKBONE_STRIDE
    }

    /// One correlation channel per template-feature pixel.
    pub fn corr_channels(&self) -> usize {
        self.template_feat_side() * self.template_feat_side()
    }

    /// Channel widths handed to the (cls, box) head branches.
    pub fn branch_channels(&self) -> (usize, usize) {
        self.ecm.branch_channels(self.corr_channels(), BACKBONE_OUT_CHANNELS)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("template_size", self.template_size), ("search_size", self.search_size)] {
            if v == 0 || v % BACKBONE_STRIDE != 0 {
                return Err(Error::Config(format!(
                    "pipeline.{name} must be a positive multiple of {BACKBONE_STRIDE}, got {v}"
                )));
            }
        }
        if self.template_size >= self.search_size {
            return Err(Error::Config(format!(
                "template size {} must be smaller than search size {}",
                self.template_size, self.search_size
            )));
        }
        for (name, v) in [
            ("template_factor", self.template_factor),
            ("search_factor", self.search_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("pipeline.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(Error::Config(format!(
                "pipeline.window_weight must lie in [0,1], got {}",
                self.window_weight
            )));
        }
        for v in self.norm_mean.iter().chain(&self.norm_std) {
            if !v.is_finite() {
                return Err(Error::Config("normalization constants must be finite".into()));
            }
        }
        if self.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("pipeline.norm_std entries must be positive".into()));
        }
        self.ecm.validate(self.corr_channels(), BACKBONE_OUT_CHANNELS)?;
        self.head.validate()?;
        self.loss.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("`{v}` is not a valid value for {key}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("`{v}` is not a boolean for {key}"))),
            }
        }
        fn triple(key: &str, v: &str) -> Result<[f64; 3]> {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(Error::Config(format!("{key} wants three comma-separated values")));
            }
            Ok([num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?])
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "pipeline.template_size" => self.template_size = num(key, value)?,
            "pipeline.search_size" => self.search_size = num(key, value)?,
            "pipeline.template_factor" => self.template_factor = num(key, value)?,
            "pipeline.search_factor" => self.search_factor = num(key, value)?,
            "pipeline.window_weight" => self.window_weight = num(key, value)?,
            "pipeline.norm_mean" => self.norm_mean = triple(key, value)?,
            "pipeline.norm_std" => self.norm_std = triple(key, value)?,
            "ecm.use_scf" => self.ecm.use_scf = boolean(key, value)?,
            "ecm.use_iab" => self.ecm.use_iab = boolean(key, value)?,
            "ecm.scf_skip" => self.ecm.scf_skip = boolean(key, value)?,
            "ecm.iab_skip" => self.ecm.iab_skip = boolean(key, value)?,
            "ecm.reuse_mode" => self.ecm.reuse_mode = ReuseMode::parse(value)?,
            "ecm.reuse_cls" => self.ecm.reuse_cls = boolean(key, value)?,
            "ecm.reuse_box" => self.ecm.reuse_box = boolean(key, value)?,
            "ecm.iab_expansion" => self.ecm.iab_expansion = num(key, value)?,
            "head.stage1_kind" => self.head.stage1_kind = RepKind::parse(value)?,
            "head.stage2_kind" => self.head.stage2_kind = RepKind::parse(value)?,
            "head.use_se" => self.head.use_se = boolean(key, value)?,
            "head.width" => self.head.width = num(key, value)?,
            "loss.lambda_iou" => self.loss.lambda_iou = num(key, value)?,
            "loss.lambda_l1" => self.loss.lambda_l1 = num(key, value)?,
            "loss.iou_kind" => self.loss.iou_kind = IouKind::parse(value)?,
            "loss.focal_alpha" => self.loss.focal_alpha = num(key, value)?,
            "loss.focal_beta" => self.loss.focal_beta = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let t3 = |v: [f64; 3]| format!("{},{},{}", v[0], v[1], v[2]);
        format!(
            "# run configuration\n\
             seed = {}\n\
             \n\
             # cropping and decoding\n\
             pipeline.template_size = {}\n\
             pipeline.search_size = {}\n\
             pipeline.template_factor = {}\n\
             pipeline.search_factor = {}\n\
             pipeline.window_weight = {}\n\
             pipeline.norm_mean = {}\n\
             pipeline.norm_std = {}\n\
             \n\
             # feature fusion\n\
             ecm.use_scf = {}\n\
             ecm.use_iab = {}\n\
             ecm.scf_skip = {}\n\
             ecm.iab_skip = {}\n\
             ecm.reuse_mode = {}\n\
             ecm.reuse_cls = {}\n\
             ecm.reuse_box = {}\n\
             ecm.iab_expansion = {}\n\
             \n\
             # prediction head\n\
             head.stage1_kind = {}\n\
             head.stage2_kind = {}\n\
             head.use_se = {}\n\
             head.width = {}\n\
             \n\
             # losses\n\
             loss.lambda_iou = {}\n\
             loss.lambda_l1 = {}\n\
             loss.iou_kind = {}\n\
             loss.focal_alpha = {}\n\
             loss.focal_beta = {}\n",
            self.seed,
            self.template_size,
            self.search_size,
            self.template_factor,
            self.search_factor,
            self.window_weight,
            t3(self.norm_mean),
            t3(self.norm_std),
            self.ecm.use_scf,
            self.ecm.use_iab,
            self.ecm.scf_skip,
            self.ecm.iab_skip,
            self.ecm.reuse_mode.name(),
            self.ecm.reuse_cls,
            self.ecm.reuse_box,
            self.ecm.iab_expansion,
            self.head.stage1_kind.name(),
            self.head.stage2_kind.name(),
            self.head.use_se,
            self.head.width,
            self.loss.lambda_iou,
            self.loss.lambda_l1,
            self.loss.iou_kind.name(),
            self.loss.focal_alpha,
            self.loss.focal_beta,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::weights::write_atomic(path, self.to_text().as_bytes())
    }
}
