//! Full tracker network: backbone shared by both inputs, correlation-based
//! feature fusion, and the three-branch center head, assembled from a
//! `RunConfig` and persisted as one named-tensor container.

use std::path::Path;

use rand::SeedableRng;

use crate::config::RunConfig;
use crate::ecm::{ecm_forward, EcmParams};
use crate::error::{Error, Result};
use crate::head::{Head, HeadOutput};
use crate::init::{uniform, Prng};
use crate::nn::{Backbone, BACKBONE_OUT_CHANNELS};
use crate::tensor::Tensor;
use crate::weights::Store;

#[derive(Debug, Clone)]
pub struct LightFc {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub ecm: EcmParams,
    pub head: Head,
}

impl LightFc {
    /// Random initialization, deterministic in `cfg.seed`.
    pub fn random(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Prng::seed_from_u64(cfg.seed);
        let mut backbone = Backbone::random(&mut rng);
        // Warm up the batchnorm statistics on a probe so a random model has
        // trained-checkpoint-like activation scales end to end.
        let probe = uniform(&mut rng, 1, 3, cfg.search_size, cfg.search_size, 0.0, 1.0);
        backbone.calibrate(&probe)?;
        let ecm = EcmParams::random(
            &mut rng,
            cfg.ecm.clone(),
            cfg.corr_channels(),
            BACKBONE_OUT_CHANNELS,
        )?;
        let (cls_in, box_in) = cfg.branch_channels();
        let head = Head::random(&mut rng, &cfg.head, cls_in, box_in)?;
        Ok(LightFc { cfg: cfg.clone(), backbone, ecm, head })
    }

    fn expect_patch(&self, patch: &Tensor, size: usize, what: &str) -> Result<()> {
        let (n, c, h, w) = patch.shape();
        if (n, c, h, w) != (1, 3, size, size) {
            return Err(Error::Shape(format!(
                "{what} patch is {:?}, config wants (1, 3, {size}, {size})",
                (n, c, h, w)
            )));
        }
        Ok(())
    }

    pub fn template_features(&self, patch: &Tensor) -> Result<Tensor> {
        self.expect_patch(patch, self.cfg.template_size, "template")?;
        self.backbone.forward(patch)
    }

    pub fn search_features(&self, patch: &Tensor) -> Result<Tensor> {
        self.expect_patch(patch, self.cfg.search_size, "search")?;
        self.backbone.forward(patch)
    }

    /// Fusion plus head on already-extracted features.
    pub fn forward(&self, z_feat: &Tensor, x_feat: &Tensor) -> Result<HeadOutput> {
        let (cls_in, box_in) = ecm_forward(z_feat, x_feat, &self.ecm)?;
        self.head.forward(&cls_in, &box_in)
    }

    /// Whole pipeline on normalized image patches.
    pub fn forward_patches(&self, template: &Tensor, search: &Tensor) -> Result<HeadOutput> {
        let z = self.template_features(template)?;
        let x = self.search_features(search)?;
        self.forward(&z, &x)
    }

    pub fn fuse(&self) -> Result<LightFc> {
        Ok(LightFc {
            cfg: self.cfg.clone(),
            backbone: self.backbone.clone(),
            ecm: self.ecm.fuse()?,
            head: self.head.fuse()?,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.ecm.is_fused() && self.head.is_fused()
    }

    pub fn collect(&self) -> Result<Store> {
        let mut store = Store::new();
        self.backbone.collect("backbone", &mut store)?;
        self.ecm.collect("ecm", &mut store)?;
        self.head.collect("head", &mut store)?;
        Ok(store)
    }

    /// Consume `store` into a skeleton built from `cfg`. Either parameter
    /// form loads; entries nothing claimed are a hard error by name.
    pub fn from_store(cfg: &RunConfig, store: &mut Store) -> Result<Self> {
        let mut model = LightFc::random(cfg)?;
        model.backbone.load("backbone", store)?;
        model.ecm.load("ecm", store)?;
        model.head.load("head", store)?;
        let leftover = store.remaining();
        if !leftover.is_empty() {
            return Err(Error::Weights(format!(
                "container holds {} unknown entries: {}",
                leftover.len(),
                leftover.join(", ")
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.collect()?.save(path)
    }

    pub fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let mut store = Store::load(path)?;
        Self::from_store(cfg, &mut store)
    }
}
