//! The assembled tracker model: a shared point encoder, attention
//! feature enhancement and matching, a coarse proposal stage, and two
//! interchangeable refine paths — an explicit merged-cloud branch and
//! the restored-feature branch distilled from it.

use crate::cloud::{PointCloud, Rng};
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::heads::{
    arp_aggregate, build_dfr, ArpIds, CandidateHeadIds, CandidateSet, DfrIds, SourceIds,
};
use crate::net::{
    cross_match, self_augment, AttentionIds, BackboneConfig, BackboneIds, FeatureSet,
};
use crate::tensor::{Checkpoint, Graph, ParamStore, Value};
use std::path::Path;

/// Architecture hyper-parameters. `merge_crop_points` is the per-box
/// crop size of the merged-cloud branch; two crops must add up to
/// exactly `template_points` so the merged cloud encodes to the same
/// row count as a template.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub template_points: usize,
    pub search_points: usize,
    pub merge_crop_points: usize,
    /// Template sampling region = previous result box scaled by this
    /// factor about its center.
    pub template_expand: f64,
    /// Search region = previous result box scaled by this factor.
    pub search_expand: f64,
    pub backbone: BackboneConfig,
    /// Hidden widths of every candidate-head MLP.
    pub head_hidden: Vec<usize>,
    /// Hidden widths of the aggregation-weight MLP.
    pub arp_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Small preset that trains and evaluates in seconds on a laptop.
    pub fn desk() -> ModelConfig {
        ModelConfig {
            template_points: 512,
            search_points: 1024,
            merge_crop_points: 256,
            template_expand: 4.0,
            search_expand: 4.0,
            backbone: BackboneConfig {
                stages: vec![
                    crate::net::SaStageConfig {
                        seed_divisor: 4,
                        neighbors: 16,
                        mlp: vec![16, 32],
                    },
                    crate::net::SaStageConfig {
                        seed_divisor: 2,
                        neighbors: 16,
                        mlp: vec![32, 32],
                    },
                ],
            },
            head_hidden: vec![32, 16],
            arp_hidden: vec![8],
        }
    }

    /// Full-scale preset mirroring the published architecture sizes.
    pub fn paper() -> ModelConfig {
        ModelConfig {
            template_points: 512,
            search_points: 1024,
            merge_crop_points: 256,
            template_expand: 4.0,
            search_expand: 4.0,
            backbone: BackboneConfig {
                stages: vec![
                    crate::net::SaStageConfig {
                        seed_divisor: 2,
                        neighbors: 32,
                        mlp: vec![32, 64],
                    },
                    crate::net::SaStageConfig {
                        seed_divisor: 2,
                        neighbors: 32,
                        mlp: vec![64, 64],
                    },
                    crate::net::SaStageConfig {
                        seed_divisor: 2,
                        neighbors: 32,
                        mlp: vec![64, 64],
                    },
                ],
            },
            head_hidden: vec![64, 32],
            arp_hidden: vec![16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.template_points == 0 || self.search_points == 0 || self.merge_crop_points == 0 {
            return Err(Error::Config("point budgets must be positive".into()));
        }
        if 2 * self.merge_crop_points != self.template_points {
            return Err(Error::Config(format!(
                "two merge crops of {} points must equal the template budget {}, so the merged \
                 cloud encodes to template-shaped features",
                self.merge_crop_points, self.template_points
            )));
        }
        for (label, factor) in [
            ("template expansion", self.template_expand),
            ("search expansion", self.search_expand),
        ] {
            if !(factor >= 1.0) {
                return Err(Error::Config(format!("{label} must be >= 1, got {factor}")));
            }
        }
        if self.template_rows() == 0 || self.search_rows() == 0 {
            return Err(Error::Config(
                "backbone reduces the template or search cloud to zero seed rows".into(),
            ));
        }
        Ok(())
    }

    /// Seed rows a template-sized cloud encodes to.
    pub fn template_rows(&self) -> usize {
        self.backbone.output_rows(self.template_points)
    }

    /// Seed rows a search-sized cloud encodes to.
    pub fn search_rows(&self) -> usize {
        self.backbone.output_rows(self.search_points)
    }

    /// Backbone output channels.
    pub fn channels(&self) -> usize {
        self.backbone.channels()
    }
}

/// Counts encoder invocations — the honest cost unit when comparing the
/// restored-feature refine path (no extra pass) against the explicit
/// merged-cloud path (one extra pass per frame).
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PassCounter {
    pub backbone_passes: u64,
}

/// Output of the coarse stage.
pub struct CoarsePass {
    /// Enhanced template features (object-centered coordinates).
    pub f_t: FeatureSet,
    /// Fused search features after matching (search coordinates).
    pub f_c: FeatureSet,
    pub cands: CandidateSet,
    /// Aggregation weights over the candidates (`1 x N`), reused to
    /// condition the restoration block.
    pub w: Value,
    /// Aggregated `(dx, dy, dz, dyaw)` relative to the reference box.
    pub r: Value,
}

/// Output of either refine path.
pub struct RefinePass {
    /// Refine-stage input features (restored or explicitly encoded),
    /// one row per template-shaped seed.
    pub features: Value,
    pub cands: CandidateSet,
    /// Aggregated residual from the coarse result to the target.
    pub r: Value,
}

/// All registered parameters plus the stage wiring.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    backbone: BackboneIds,
    augment: AttentionIds,
    matcher: AttentionIds,
    coarse_heads: CandidateHeadIds,
    coarse_arp: ArpIds,
    dfr: DfrIds,
    refine_heads: CandidateHeadIds,
    refine_arp: ArpIds,
    source: SourceIds,
}

/// Translate a world-frame cloud into the reference-centered frame all
/// model inputs live in.
pub fn to_reference_frame(cloud: &PointCloud, reference: &Box3D) -> PointCloud {
    let c = reference.center();
    cloud.translated([-c[0], -c[1], -c[2]])
}

impl Model {
    /// Register every parameter. `rng` drives weight initialization, so
    /// the same seed reproduces the exact same model.
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let c = config.channels();
        let mut store = ParamStore::new();
        let backbone = BackboneIds::register(&mut store, "backbone", &config.backbone, rng)?;
        let augment = AttentionIds::register(&mut store, "augment", c, rng)?;
        let matcher = AttentionIds::register(&mut store, "match", c, rng)?;
        let coarse_heads =
            CandidateHeadIds::register(&mut store, "coarse", c, &config.head_hidden, rng)?;
        let coarse_arp =
            ArpIds::register_learned(&mut store, "coarse.arp", &config.arp_hidden, rng)?;
        let dfr = DfrIds::register(&mut store, "dfr", c, rng)?;
        let refine_heads =
            CandidateHeadIds::register(&mut store, "refine", c + 4, &config.head_hidden, rng)?;
        let refine_arp =
            ArpIds::register_learned(&mut store, "refine.arp", &config.arp_hidden, rng)?;
        let source = SourceIds::register(&mut store, "src", c, rng)?;
        Ok(Model {
            config: config.clone(),
            store,
            backbone,
            augment,
            matcher,
            coarse_heads,
            coarse_arp,
            dfr,
            refine_heads,
            refine_arp,
            source,
        })
    }

    /// Encode one reference-centered cloud (one backbone pass).
    pub fn encode(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        train_rng: Option<&mut Rng>,
        passes: &mut PassCounter,
    ) -> Result<FeatureSet> {
        passes.backbone_passes += 1;
        self.backbone.encode(g, &self.store, cloud, train_rng)
    }

    /// Coarse stage: encode both clouds, enhance each with the shared
    /// self-attention block, match search against template, propose one
    /// candidate per search seed, and aggregate.
    pub fn coarse(
        &self,
        g: &mut Graph,
        template: &PointCloud,
        search: &PointCloud,
        mut train_rng: Option<&mut Rng>,
        passes: &mut PassCounter,
    ) -> Result<CoarsePass> {
        let f_t_raw = self.encode(g, template, train_rng.as_deref_mut(), passes)?;
        let f_s_raw = self.encode(g, search, train_rng, passes)?;
        let f_t = self_augment(g, &self.store, &f_t_raw, &self.augment)?;
        let f_s = self_augment(g, &self.store, &f_s_raw, &self.augment)?;
        let f_c = cross_match(g, &self.store, &f_s, &f_t, &self.matcher)?;
        let cands = self.coarse_heads.propose(g, &self.store, &f_c)?;
        let (w, r) = arp_aggregate(g, &self.store, &cands, &self.coarse_arp)?;
        Ok(CoarsePass {
            f_t,
            f_c,
            cands,
            w,
            r,
        })
    }

    /// Single-stage refine path: restore completion features from the
    /// coarse outputs (no extra encoder pass) and run the shared refine
    /// proposal network on them.
    pub fn refine_restored(
        &self,
        g: &mut Graph,
        f_t: &FeatureSet,
        f_c: &FeatureSet,
        w: Value,
        r: Value,
    ) -> Result<RefinePass> {
        let (_f_rc, f_dev) = build_dfr(g, &self.store, &self.dfr, f_t, f_c, w, r)?;
        let fs = FeatureSet {
            features: f_dev,
            coords: f_t.coords.clone(),
        };
        let cands = self.refine_heads.propose(g, &self.store, &fs)?;
        let (_, r_ref) = arp_aggregate(g, &self.store, &cands, &self.refine_arp)?;
        Ok(RefinePass {
            features: f_dev,
            cands,
            r: r_ref,
        })
    }

    /// Explicit refine path: encode the merged cloud (one extra pass),
    /// project to the refine width, and run the same refine proposal
    /// network. `coarse_xyz` re-centers the merged seeds about the
    /// coarse-predicted center so the coordinate channel matches what
    /// the restored path feeds the shared heads.
    pub fn refine_merged(
        &self,
        g: &mut Graph,
        merged: &PointCloud,
        coarse_xyz: [f64; 3],
        train_rng: Option<&mut Rng>,
        passes: &mut PassCounter,
    ) -> Result<RefinePass> {
        let f_m = self.encode(g, merged, train_rng, passes)?;
        let f_src = self.source.apply(g, &self.store, f_m.features)?;
        let fs = FeatureSet {
            features: f_src,
            coords: f_m
                .coords
                .iter()
                .map(|p| {
                    [
                        p[0] - coarse_xyz[0],
                        p[1] - coarse_xyz[1],
                        p[2] - coarse_xyz[2],
                    ]
                })
                .collect(),
        };
        let cands = self.refine_heads.propose(g, &self.store, &fs)?;
        let (_, r_ref) = arp_aggregate(g, &self.store, &cands, &self.refine_arp)?;
        Ok(RefinePass {
            features: f_src,
            cands,
            r: r_ref,
        })
    }

    /// Persist all parameters with training metadata.
    pub fn save_checkpoint(
        &self,
        path: &Path,
        stage: u32,
        seed: u64,
        digest: &str,
    ) -> Result<()> {
        let ckpt = Checkpoint {
            stage,
            seed,
            digest: digest.to_string(),
            tensors: self.store.to_named(),
        };
        ckpt.save(path)
    }

    /// Build a model from `config` and overwrite every parameter with a
    /// checkpoint's tensors. Fails if the checkpoint does not match the
    /// architecture. Returns the model plus the checkpoint metadata.
    pub fn load_checkpoint(config: &ModelConfig, path: &Path) -> Result<(Model, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        // Initialization is immediately overwritten; the seed only has
        // to be deterministic.
        let mut rng = Rng::seed(0);
        let mut model = Model::new(config, &mut rng)?;
        model.store.load_named(&ckpt.tensors).map_err(|e| {
            Error::Config(format!(
                "checkpoint {} does not match the configured architecture: {e}",
                path.display()
            ))
        })?;
        Ok((model, ckpt))
    }
}

/// Small architecture for fast tests throughout the crate.
#[cfg(test)]
pub(crate) fn tiny_test_config() -> ModelConfig {
    use crate::net::SaStageConfig;
    ModelConfig {
        template_points: 32,
        search_points: 64,
        merge_crop_points: 16,
        template_expand: 4.0,
        search_expand: 4.0,
        backbone: BackboneConfig {
            stages: vec![
                SaStageConfig {
                    seed_divisor: 4,
                    neighbors: 4,
                    mlp: vec![8, 8],
                },
                SaStageConfig {
                    seed_divisor: 2,
                    neighbors: 4,
                    mlp: vec![8, 8],
                },
            ],
        },
        head_hidden: vec![8],
        arp_hidden: vec![4],
    }
}
