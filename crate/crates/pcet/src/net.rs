//! Network building blocks: linear layers, hierarchical set abstraction
//! over farthest-point-sampled seeds, and cosine offset attention.
//!
//! Feature extraction is deliberately translation-invariant: only
//! neighbor coordinates *re-centered about their seed* ever enter an MLP,
//! so translating a cloud moves seed coordinates but leaves features
//! untouched. Absolute position re-enters later through each
//! [`FeatureSet`]'s seed coordinates.

use crate::cloud::{fps_points, PointCloud, Rng};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Value};

/// Seed-point features paired with their seed coordinates. Row `i` of
/// `features` describes the neighborhood of `coords[i]`.
#[derive(Clone)]
pub struct FeatureSet {
    pub features: Value,
    pub coords: Vec<[f64; 3]>,
}

/// One linear layer `x W + b`.
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    /// Register weights with Xavier-uniform init and a zero bias.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<LinearIds> {
        let w = store.register(&format!("{name}.weight"), xavier(fan_in, fan_out, rng)?)?;
        let b = store.register(&format!("{name}.bias"), Tensor::zeros(1, fan_out))?;
        Ok(LinearIds { w, b })
    }

    /// Apply to a `rows x fan_in` value.
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let xw = g.matmul(x, w)?;
        let rows = g.value(xw).rows();
        let bb = g.broadcast_row(b, rows)?;
        g.add(xw, bb)
    }
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

/// A multi-layer perceptron: relu between layers, linear output.
pub struct MlpIds {
    layers: Vec<LinearIds>,
}

impl MlpIds {
    /// `widths` runs `[input, hidden..., output]` and needs at least one
    /// layer.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        rng: &mut Rng,
    ) -> Result<MlpIds> {
        if widths.len() < 2 {
            return Err(Error::invalid(format!(
                "mlp `{name}` needs at least input and output widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(LinearIds::register(
                store,
                &format!("{name}.layer{i}"),
                pair[0],
                pair[1],
                rng,
            )?);
        }
        Ok(MlpIds { layers })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Configuration of one set-abstraction stage.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaStageConfig {
    /// Seed count = input count / divisor (must strictly reduce).
    pub seed_divisor: usize,
    /// Neighbors gathered per seed (clamped to the available count).
    pub neighbors: usize,
    /// Hidden/output widths of the shared per-point MLP. The input width
    /// is derived: 3 re-centered coordinates plus the incoming channels.
    pub mlp: Vec<usize>,
}

/// Stage stack of the hierarchical encoder.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<SaStageConfig>,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.seed_divisor < 2 {
                return Err(Error::Config(format!(
                    "backbone stage {i}: seed divisor must be >= 2 so stages strictly reduce seed counts"
                )));
            }
            if s.neighbors == 0 {
                return Err(Error::Config(format!("backbone stage {i}: neighbors must be >= 1")));
            }
            if s.mlp.is_empty() {
                return Err(Error::Config(format!("backbone stage {i}: empty mlp widths")));
            }
        }
        Ok(())
    }

    /// Seed rows remaining after all stages for `input` points.
    pub fn output_rows(&self, input: usize) -> usize {
        self.stages.iter().fold(input, |n, s| n / s.seed_divisor)
    }

    /// Output channel width.
    pub fn channels(&self) -> usize {
        *self
            .stages
            .last()
            .and_then(|s| s.mlp.last())
            .expect("validated non-empty backbone")
    }
}

/// Registered parameters of one backbone (a stack of shared per-point
/// MLPs, one per stage).
pub struct BackboneIds {
    pub config: BackboneConfig,
    stages: Vec<MlpIds>,
}

impl BackboneIds {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        config: &BackboneConfig,
        rng: &mut Rng,
    ) -> Result<BackboneIds> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut in_channels = 0usize;
        for (i, stage) in config.stages.iter().enumerate() {
            let mut widths = vec![3 + in_channels];
            widths.extend_from_slice(&stage.mlp);
            stages.push(MlpIds::register(
                store,
                &format!("{name}.stage{i}"),
                &widths,
                rng,
            )?);
            in_channels = *stage.mlp.last().expect("validated");
        }
        Ok(BackboneIds {
            config: config.clone(),
            stages,
        })
    }

    /// Encode a cloud through every stage. `train_rng` picks each stage's
    /// farthest-point-sampling seed index at random during training; in
    /// evaluation (None) the seed is index 0, making encoding fully
    /// deterministic.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &PointCloud,
        mut train_rng: Option<&mut Rng>,
    ) -> Result<FeatureSet> {
        let mut fs = FeatureSet {
            features: g.input(Tensor::zeros(cloud.len(), 0))?,
            coords: cloud.points().to_vec(),
        };
        for (stage_cfg, mlp) in self.config.stages.iter().zip(&self.stages) {
            let n = fs.coords.len();
            let fps_seed = match train_rng.as_deref_mut() {
                Some(rng) => rng.index(n),
                None => 0,
            };
            fs = set_abstraction(g, store, &fs, stage_cfg, mlp, fps_seed)?;
        }
        Ok(fs)
    }
}

/// One set-abstraction stage: farthest-point-sample seeds, gather each
/// seed's nearest neighbors, re-center them about the seed, push the
/// re-centered offsets (concatenated with the neighbors' incoming
/// features) through the shared MLP, and max-pool over the neighborhood.
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    input: &FeatureSet,
    stage: &SaStageConfig,
    mlp: &MlpIds,
    fps_seed: usize,
) -> Result<FeatureSet> {
    let n = input.coords.len();
    if g.value(input.features).rows() != n {
        return Err(Error::invalid(format!(
            "feature rows {} do not match {} seed coordinates",
            g.value(input.features).rows(),
            n
        )));
    }
    if n < stage.seed_divisor {
        return Err(Error::invalid(format!(
            "set abstraction needs at least {} points, got {n}",
            stage.seed_divisor
        )));
    }
    let seeds = n / stage.seed_divisor;
    let seed_idx = fps_points(&input.coords, seeds, fps_seed)?;
    let k = stage.neighbors.min(n);

    // Flat neighbor table (seed-major) and the re-centered coordinates.
    let mut flat_idx = Vec::with_capacity(seeds * k);
    let mut recentered = Vec::with_capacity(seeds * k * 3);
    let mut seed_coords = Vec::with_capacity(seeds);
    for &si in &seed_idx {
        let center = input.coords[si];
        seed_coords.push(center);
        for ni in k_nearest(&input.coords, center, k) {
            let p = input.coords[ni];
            recentered.extend_from_slice(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
            flat_idx.push(ni);
        }
    }

    let rec = g.input(Tensor::matrix(seeds * k, 3, recentered)?)?;
    let gathered = g.gather_rows(input.features, &flat_idx)?;
    let mlp_in = g.concat_cols(&[rec, gathered])?;
    let h = mlp.apply(g, store, mlp_in)?;
    let pooled = g.group_max_pool(h, k)?;
    Ok(FeatureSet {
        features: pooled,
        coords: seed_coords,
    })
}

/// Indices of the `k` points nearest to `center` (the seed itself
/// included at distance zero), ties broken by index.
fn k_nearest(points: &[[f64; 3]], center: [f64; 3], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], i)
        })
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite distances").then(a.1.cmp(&b.1)));
    order.truncate(k);
    order.into_iter().map(|(_, i)| i).collect()
}

/// Run the shared backbone over the template and search clouds.
pub fn extract_features(
    g: &mut Graph,
    store: &ParamStore,
    backbone: &BackboneIds,
    template: &PointCloud,
    search: &PointCloud,
    mut train_rng: Option<&mut Rng>,
) -> Result<(FeatureSet, FeatureSet)> {
    let f_t = backbone.encode(g, store, template, train_rng.as_deref_mut())?;
    let f_s = backbone.encode(g, store, search, train_rng)?;
    Ok((f_t, f_s))
}

/// Parameters of one offset-attention block: square query/key/value
/// projections at a fixed width plus the output transform `phi`
/// (linear + relu).
pub struct AttentionIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub phi: LinearIds,
}

impl AttentionIds {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        rng: &mut Rng,
    ) -> Result<AttentionIds> {
        Ok(AttentionIds {
            wq: store.register(&format!("{name}.wq"), xavier(width, width, rng)?)?,
            wk: store.register(&format!("{name}.wk"), xavier(width, width, rng)?)?,
            wv: store.register(&format!("{name}.wv"), xavier(width, width, rng)?)?,
            phi: LinearIds::register(store, &format!("{name}.phi"), width, width, rng)?,
        })
    }
}

/// Cosine attention weights: project queries and keys, L2-normalize each
/// row, and take all pairwise dot products. Entries therefore lie in
/// [-1, 1].
pub fn attention_weights(
    g: &mut Graph,
    store: &ParamStore,
    q_in: Value,
    k_in: Value,
    att: &AttentionIds,
) -> Result<Value> {
    let wq = g.param(store, att.wq)?;
    let wk = g.param(store, att.wk)?;
    let q = g.matmul(q_in, wq)?;
    let k = g.matmul(k_in, wk)?;
    let qn = g.row_l2_normalize(q)?;
    let kn = g.row_l2_normalize(k)?;
    let kt = g.transpose(kn)?;
    g.matmul(qn, kt)
}

/// Offset attention: `phi(Q - softmax(W) (V Wv))` with `W` the cosine
/// weights and `phi` a linear + relu transform. Output shape matches the
/// query input.
pub fn offset_attention(
    g: &mut Graph,
    store: &ParamStore,
    q_in: Value,
    k_in: Value,
    v_in: Value,
    att: &AttentionIds,
) -> Result<Value> {
    let w = attention_weights(g, store, q_in, k_in, att)?;
    let a = g.row_softmax(w)?;
    let wv = g.param(store, att.wv)?;
    let v = g.matmul(v_in, wv)?;
    let mixed = g.matmul(a, v)?;
    let offset = g.sub(q_in, mixed)?;
    let lin = att.phi.apply(g, store, offset)?;
    g.relu(lin)
}

/// Self-attention feature enhancement; coordinates pass through.
pub fn self_augment(
    g: &mut Graph,
    store: &ParamStore,
    f: &FeatureSet,
    att: &AttentionIds,
) -> Result<FeatureSet> {
    Ok(FeatureSet {
        features: offset_attention(g, store, f.features, f.features, f.features, att)?,
        coords: f.coords.clone(),
    })
}

/// Cross attention matching search queries against template keys/values.
/// The result keeps the search seeds' coordinates, one fused row per
/// search seed.
pub fn cross_match(
    g: &mut Graph,
    store: &ParamStore,
    f_s: &FeatureSet,
    f_t: &FeatureSet,
    att: &AttentionIds,
) -> Result<FeatureSet> {
    Ok(FeatureSet {
        features: offset_attention(g, store, f_s.features, f_t.features, f_t.features, att)?,
        coords: f_s.coords.clone(),
    })
}
