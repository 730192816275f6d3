//! Prediction heads: per-seed candidate proposals, attention-weighted
//! result aggregation, completion-feature restoration for the refine
//! stage, and the training-only distillation loss that lets the restored
//! features stand in for an explicitly encoded merged cloud.

use crate::cloud::Rng;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D};
use crate::net::{AttentionIds, FeatureSet, LinearIds, MlpIds, offset_attention};
use crate::tensor::{Graph, ParamStore, Tensor, Value};

/// Per-seed proposals: a classification logit, a 4-vector offset
/// (dx, dy, dz, dyaw) relative to the reference box, and a distance
/// logit used when aggregating. Row `i` belongs to `coords[i]`.
pub struct CandidateSet {
    pub scores: Value,
    pub offsets: Value,
    pub distances: Value,
    pub coords: Vec<[f64; 3]>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Three parallel MLPs producing candidate scores, offsets, and distance
/// logits. Each consumes the per-seed feature row concatenated with the
/// seed's coordinates: features alone are translation-invariant, so the
/// coordinate channel is what lets a head express "offset from the
/// reference center".
pub struct CandidateHeadIds {
    cls: MlpIds,
    reg: MlpIds,
    dis: MlpIds,
}

impl CandidateHeadIds {
    /// `feature_width` is the incoming channel count (coordinates are
    /// appended internally); `hidden` lists the shared hidden widths.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        feature_width: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<CandidateHeadIds> {
        let make = |widths: &mut Vec<usize>, out: usize| {
            widths.push(out);
        };
        let mut base = vec![feature_width + 3];
        base.extend_from_slice(hidden);
        let mut cls_w = base.clone();
        make(&mut cls_w, 1);
        let mut reg_w = base.clone();
        make(&mut reg_w, 4);
        let mut dis_w = base;
        make(&mut dis_w, 1);
        Ok(CandidateHeadIds {
            cls: MlpIds::register(store, &format!("{name}.cls"), &cls_w, rng)?,
            reg: MlpIds::register(store, &format!("{name}.reg"), &reg_w, rng)?,
            dis: MlpIds::register(store, &format!("{name}.dis"), &dis_w, rng)?,
        })
    }

    /// Produce one candidate per seed row.
    pub fn propose(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: &FeatureSet,
    ) -> Result<CandidateSet> {
        let n = f.coords.len();
        let mut flat = Vec::with_capacity(n * 3);
        for c in &f.coords {
            flat.extend_from_slice(c);
        }
        let coords = g.input(Tensor::matrix(n, 3, flat)?)?;
        let x = g.concat_cols(&[f.features, coords])?;
        Ok(CandidateSet {
            scores: self.cls.apply(g, store, x)?,
            offsets: self.reg.apply(g, store, x)?,
            distances: self.dis.apply(g, store, x)?,
            coords: f.coords.clone(),
        })
    }
}

/// The aggregation weighting network: maps each candidate's combined
/// logit (score + distance) to an unnormalized attention logit.
/// `Identity` passes the combined logit straight through (useful for
/// hand-checked cases and ablations); `Learned` interposes a small MLP.
pub enum ArpIds {
    Identity,
    Learned(MlpIds),
}

impl ArpIds {
    pub fn register_learned(
        store: &mut ParamStore,
        name: &str,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Result<ArpIds> {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(ArpIds::Learned(MlpIds::register(store, name, &widths, rng)?))
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        match self {
            ArpIds::Identity => Ok(x),
            ArpIds::Learned(mlp) => mlp.apply(g, store, x),
        }
    }
}

/// Aggregate all candidates into one result row: softmax over the
/// (possibly MLP-transformed) combined logits weights the offset rows,
/// so the result is a convex combination of every candidate's offset
/// instead of a single arg-max pick.
///
/// Returns the softmax weights (`1 x N`, reused by the restoration block
/// to mark which rows the aggregation trusted) alongside the aggregated
/// `1 x 4` result row.
pub fn arp_aggregate(
    g: &mut Graph,
    store: &ParamStore,
    cands: &CandidateSet,
    arp: &ArpIds,
) -> Result<(Value, Value)> {
    if cands.is_empty() {
        return Err(Error::invalid("cannot aggregate zero candidates"));
    }
    let combined = g.add(cands.scores, cands.distances)?;
    let logits = arp.apply(g, store, combined)?;
    let row = g.transpose(logits)?;
    let weights = g.row_softmax(row)?;
    let r = g.matmul(weights, cands.offsets)?;
    Ok((weights, r))
}

/// Baseline aggregation: the offset row of the highest-scoring candidate
/// (ties break toward the lowest index).
pub fn top1_aggregate(g: &mut Graph, cands: &CandidateSet) -> Result<Value> {
    if cands.is_empty() {
        return Err(Error::invalid("cannot aggregate zero candidates"));
    }
    let scores = g.value(cands.scores);
    let mut best = 0usize;
    for i in 1..scores.rows() {
        if scores.get(i, 0) > scores.get(best, 0) {
            best = i;
        }
    }
    g.gather_rows(cands.offsets, &[best])
}

/// Turn an aggregated offset row `(dx, dy, dz, dyaw)` back into a world
/// box around the reference.
pub fn decode_box(reference: &Box3D, r: &Tensor) -> Result<Box3D> {
    if r.rows() != 1 || r.cols() != 4 {
        return Err(Error::invalid(format!(
            "aggregated result must be 1x4, got {}x{}",
            r.rows(),
            r.cols()
        )));
    }
    let c = reference.center();
    Box3D::new(
        [c[0] + r.get(0, 0), c[1] + r.get(0, 1), c[2] + r.get(0, 2)],
        reference.size(),
        wrap_angle(reference.yaw() + r.get(0, 3)),
    )
}

/// Parameters of the completion-feature restoration block: a linear+relu
/// lift of the result-conditioned search features and an attention block
/// at the lifted width.
pub struct DfrIds {
    rc_lift: LinearIds,
    att: AttentionIds,
}

impl DfrIds {
    /// `channels` is the fused feature width; the block operates at
    /// `channels + 4` (features plus the repeated coarse-result channel).
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<DfrIds> {
        let wide = channels + 4;
        Ok(DfrIds {
            rc_lift: LinearIds::register(store, &format!("{name}.rc_lift"), wide, wide, rng)?,
            att: AttentionIds::register(store, &format!("{name}.att"), wide, rng)?,
        })
    }
}

/// Restore completion features for the refine stage without re-encoding
/// any cloud.
///
/// Template rows are lifted with their object-centered coordinates
/// `(x, y, z, 0)` (the template box sits at the canonical origin). Fused
/// search rows are first scaled row-wise by the aggregation weights — so
/// rows the coarse stage trusted dominate and background rows fade — then
/// every row is tagged with the repeated coarse result `(x, y, z, yaw)`
/// and pushed through a linear+relu. Attention with template queries
/// against these result-conditioned search rows mixes result-region
/// content into every template row, yielding features of the *virtually
/// completed* object. Returns the lifted search rows and the restored
/// template-row features.
pub fn build_dfr(
    g: &mut Graph,
    store: &ParamStore,
    dfr: &DfrIds,
    f_t: &FeatureSet,
    f_c: &FeatureSet,
    w: Value,
    r: Value,
) -> Result<(FeatureSet, Value)> {
    let rt = g.value(r);
    if rt.rows() != 1 || rt.cols() != 4 {
        return Err(Error::invalid(format!(
            "coarse result must be 1x4, got {}x{}",
            rt.rows(),
            rt.cols()
        )));
    }
    let m = f_t.coords.len();
    let n = f_c.coords.len();
    let wt = g.value(w);
    if wt.rows() != 1 || wt.cols() != n {
        return Err(Error::invalid(format!(
            "aggregation weights must be 1x{n}, got {}x{}",
            wt.rows(),
            wt.cols()
        )));
    }

    let mut tpos = Vec::with_capacity(m * 4);
    for c in &f_t.coords {
        tpos.extend_from_slice(&[c[0], c[1], c[2], 0.0]);
    }
    let tpos = g.input(Tensor::matrix(m, 4, tpos)?)?;
    let f_tc = g.concat_cols(&[f_t.features, tpos])?;

    let w_col = g.transpose(w)?;
    let f_r = g.scale_rows(f_c.features, w_col)?;
    let tag = g.broadcast_row(r, n)?;
    let rc_raw = g.concat_cols(&[f_r, tag])?;
    let rc_lin = dfr.rc_lift.apply(g, store, rc_raw)?;
    let f_rc = g.relu(rc_lin)?;

    let f_dev = offset_attention(g, store, f_tc, f_rc, f_rc, &dfr.att)?;
    Ok((
        FeatureSet {
            features: f_rc,
            coords: f_c.coords.clone(),
        },
        f_dev,
    ))
}

/// Linear+relu projection lifting backbone channels of an explicitly
/// encoded merged cloud to the restored-feature width, so the two can be
/// compared row for row.
pub struct SourceIds {
    proj: LinearIds,
}

impl SourceIds {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<SourceIds> {
        Ok(SourceIds {
            proj: LinearIds::register(store, &format!("{name}.proj"), channels, channels + 4, rng)?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let lin = self.proj.apply(g, store, x)?;
        g.relu(lin)
    }
}

/// Distillation loss pulling restored features toward the explicitly
/// encoded source features: per-row channel softmaxes, then
/// KL(restored || source) averaged over rows. The source side is
/// detached — it is the teacher and receives no gradient.
pub fn tkt_loss(g: &mut Graph, f_dev: Value, f_src: Value) -> Result<Value> {
    let teacher = g.detach(f_src)?;
    let p = g.row_softmax(f_dev)?;
    let q = g.row_softmax(teacher)?;
    g.kl(p, q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidate_fixture(g: &mut Graph, scores: Vec<f64>, offsets: Vec<f64>) -> CandidateSet {
        let n = scores.len();
        CandidateSet {
            scores: g.input(Tensor::matrix(n, 1, scores).unwrap()).unwrap(),
            distances: g.input(Tensor::zeros(n, 1)).unwrap(),
            offsets: g.input(Tensor::matrix(n, 4, offsets).unwrap()).unwrap(),
            coords: (0..n).map(|i| [i as f64, 0.0, 0.0]).collect(),
        }
    }

    #[test]
    fn aggregation_matches_hand_computed_weights() {
        // Combined logits (0, ln2, ln4) -> softmax weights (1,2,4)/7.
        // First offset column (1,2,3) -> 17/7; others scale with it.
        let mut g = Graph::new();
        let store = ParamStore::new();
        let cands = candidate_fixture(
            &mut g,
            vec![0.0, 2.0_f64.ln(), 4.0_f64.ln()],
            vec![
                1.0, 10.0, -1.0, 0.5, //
                2.0, 20.0, -2.0, 1.0, //
                3.0, 30.0, -3.0, 1.5,
            ],
        );
        let (w, r) = arp_aggregate(&mut g, &store, &cands, &ArpIds::Identity).unwrap();
        let wt = g.value(w).clone();
        for (i, expect) in [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0].iter().enumerate() {
            assert!((wt.get(0, i) - expect).abs() < 1e-12);
        }
        let rt = g.value(r);
        assert!((rt.get(0, 0) - 17.0 / 7.0).abs() < 1e-12);
        assert!((rt.get(0, 1) - 170.0 / 7.0).abs() < 1e-12);
        assert!((rt.get(0, 2) + 17.0 / 7.0).abs() < 1e-12);
        assert!((rt.get(0, 3) - 17.0 / 14.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_convex_and_shift_invariant() {
        let mut rng = Rng::seed(3);
        let mut g = Graph::new();
        let store = ParamStore::new();
        let n = 9;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let offsets: Vec<f64> = (0..n * 4).map(|_| rng.uniform(-3.0, 3.0)).collect();
        let cands = candidate_fixture(&mut g, scores.clone(), offsets.clone());
        let (w, r) = arp_aggregate(&mut g, &store, &cands, &ArpIds::Identity).unwrap();
        let wt = g.value(w).clone();
        assert!((wt.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let rt = g.value(r).clone();
        for col in 0..4 {
            let column: Vec<f64> = (0..n).map(|i| offsets[i * 4 + col]).collect();
            let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(rt.get(0, col) >= lo - 1e-12 && rt.get(0, col) <= hi + 1e-12);
        }

        // Adding a constant to every logit must not move the result.
        let shifted = candidate_fixture(
            &mut g,
            scores.iter().map(|s| s + 5.0).collect(),
            offsets.clone(),
        );
        let (_, r2) = arp_aggregate(&mut g, &store, &shifted, &ArpIds::Identity).unwrap();
        for (a, b) in rt.data().iter().zip(g.value(r2).data()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Permuting candidate rows must not move the result and must
        // permute the weights identically.
        let perm: Vec<usize> = (0..n).map(|i| (i + 4) % n).collect();
        let pscores: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let mut poffsets = vec![0.0; n * 4];
        for (row, &src) in perm.iter().enumerate() {
            poffsets[row * 4..row * 4 + 4].copy_from_slice(&offsets[src * 4..src * 4 + 4]);
        }
        let permuted = candidate_fixture(&mut g, pscores, poffsets);
        let (w3, r3) = arp_aggregate(&mut g, &store, &permuted, &ArpIds::Identity).unwrap();
        for (a, b) in rt.data().iter().zip(g.value(r3).data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let w3t = g.value(w3);
        for (row, &src) in perm.iter().enumerate() {
            assert!((w3t.get(0, row) - wt.get(0, src)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_candidate_sets_are_rejected() {
        let mut g = Graph::new();
        let store = ParamStore::new();
        let cands = CandidateSet {
            scores: g.input(Tensor::zeros(0, 1)).unwrap(),
            distances: g.input(Tensor::zeros(0, 1)).unwrap(),
            offsets: g.input(Tensor::zeros(0, 4)).unwrap(),
            coords: vec![],
        };
        assert!(arp_aggregate(&mut g, &store, &cands, &ArpIds::Identity).is_err());
        assert!(top1_aggregate(&mut g, &cands).is_err());
    }

    #[test]
    fn top1_picks_highest_score_lowest_index_on_ties() {
        let mut g = Graph::new();
        let cands = candidate_fixture(
            &mut g,
            vec![1.0, 7.0, 7.0, -2.0],
            vec![
                0.0, 0.0, 0.0, 0.0, //
                1.0, 2.0, 3.0, 4.0, //
                9.0, 9.0, 9.0, 9.0, //
                5.0, 5.0, 5.0, 5.0,
            ],
        );
        let r = top1_aggregate(&mut g, &cands).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn decode_applies_offsets_and_wraps_yaw() {
        let reference = Box3D::new([1.0, 2.0, 3.0], [4.0, 2.0, 1.5], 0.1).unwrap();
        let r = Tensor::matrix(1, 4, vec![0.5, -0.5, 0.25, std::f64::consts::PI]).unwrap();
        let out = decode_box(&reference, &r).unwrap();
        assert_eq!(out.center(), [1.5, 1.5, 3.25]);
        assert_eq!(out.size(), [4.0, 2.0, 1.5]);
        assert!((out.yaw() - (0.1 - std::f64::consts::PI)).abs() < 1e-12);

        let bad = Tensor::zeros(2, 4);
        assert!(decode_box(&reference, &bad).is_err());
    }

    #[test]
    fn candidate_heads_emit_one_row_per_seed() {
        let mut rng = Rng::seed(11);
        let mut store = ParamStore::new();
        let heads = CandidateHeadIds::register(&mut store, "coarse", 6, &[8], &mut rng).unwrap();
        let mut g = Graph::new();
        let data: Vec<f64> = (0..5 * 6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f = FeatureSet {
            features: g.input(Tensor::matrix(5, 6, data).unwrap()).unwrap(),
            coords: (0..5).map(|i| [i as f64 * 0.3, 0.1, -0.2]).collect(),
        };
        let cands = heads.propose(&mut g, &store, &f).unwrap();
        assert_eq!(cands.len(), 5);
        assert_eq!(g.value(cands.scores).rows(), 5);
        assert_eq!(g.value(cands.scores).cols(), 1);
        assert_eq!(g.value(cands.offsets).cols(), 4);
        assert_eq!(g.value(cands.distances).cols(), 1);
    }

    #[test]
    fn restoration_shapes_and_gradient_reach_the_coarse_result() {
        let c = 6usize;
        let mut rng = Rng::seed(17);
        let mut store = ParamStore::new();
        let dfr = DfrIds::register(&mut store, "dfr", c, &mut rng).unwrap();
        let mut g = Graph::new();

        let tdata: Vec<f64> = (0..4 * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sdata: Vec<f64> = (0..7 * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let f_t = FeatureSet {
            features: g.input(Tensor::matrix(4, c, tdata).unwrap()).unwrap(),
            coords: (0..4).map(|i| [0.2 * i as f64, 0.0, 0.1]).collect(),
        };
        let f_c = FeatureSet {
            features: g.input(Tensor::matrix(7, c, sdata).unwrap()).unwrap(),
            coords: (0..7).map(|i| [0.5 * i as f64 - 1.0, 0.3, -0.1]).collect(),
        };
        let w = g
            .input(Tensor::matrix(1, 7, vec![0.3, 0.1, 0.05, 0.2, 0.15, 0.1, 0.1]).unwrap())
            .unwrap();
        let r = g
            .input(Tensor::matrix(1, 4, vec![0.4, -0.2, 0.1, 0.3]).unwrap())
            .unwrap();
        let (f_rc, f_dev) = build_dfr(&mut g, &store, &dfr, &f_t, &f_c, w, r).unwrap();
        assert_eq!(g.value(f_dev).rows(), 4);
        assert_eq!(g.value(f_dev).cols(), c + 4);
        assert_eq!(g.value(f_rc.features).rows(), 7);
        assert_eq!(g.value(f_rc.features).cols(), c + 4);
        assert_eq!(f_rc.coords, f_c.coords);

        // Both conditioning inputs participate: gradient flows into every
        // slot of the repeated result row and into the row weights.
        let loss = g.mean_all(f_dev).unwrap();
        let grads = g.backward(loss).unwrap();
        let gr = grads.wrt(r).expect("result feeds the restored features");
        assert!(gr.data().iter().all(|&v| v != 0.0));
        let gw = grads.wrt(w).expect("weights feed the restored features");
        assert!(gw.data().iter().any(|&v| v != 0.0));

        // Weight and result shapes are validated.
        let bad_w = g.input(Tensor::zeros(1, 5)).unwrap();
        assert!(build_dfr(&mut g, &store, &dfr, &f_t, &f_c, bad_w, r).is_err());
        let bad_r = g.input(Tensor::zeros(2, 4)).unwrap();
        assert!(build_dfr(&mut g, &store, &dfr, &f_t, &f_c, w, bad_r).is_err());
    }

    #[test]
    fn one_hot_weights_silence_unselected_rows() {
        let c = 5usize;
        let mut rng = Rng::seed(19);
        let mut store = ParamStore::new();
        let dfr = DfrIds::register(&mut store, "dfr", c, &mut rng).unwrap();

        let tdata: Vec<f64> = (0..3 * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sdata: Vec<f64> = (0..6 * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let hot = 2usize;
        let mut onehot = vec![0.0; 6];
        onehot[hot] = 1.0;

        let run = |sfeat: Vec<f64>| {
            let mut g = Graph::new();
            let f_t = FeatureSet {
                features: g.input(Tensor::matrix(3, c, tdata.clone()).unwrap()).unwrap(),
                coords: (0..3).map(|i| [0.1 * i as f64, 0.0, 0.0]).collect(),
            };
            let f_c = FeatureSet {
                features: g.input(Tensor::matrix(6, c, sfeat).unwrap()).unwrap(),
                coords: (0..6).map(|i| [0.4 * i as f64, 0.2, 0.0]).collect(),
            };
            let w = g
                .input(Tensor::matrix(1, 6, onehot.clone()).unwrap())
                .unwrap();
            let r = g
                .input(Tensor::matrix(1, 4, vec![0.2, -0.1, 0.05, 0.4]).unwrap())
                .unwrap();
            let (_, f_dev) = build_dfr(&mut g, &store, &dfr, &f_t, &f_c, w, r).unwrap();
            g.value(f_dev).clone()
        };

        // Rewriting every row except the selected one leaves the restored
        // features unchanged: zero-weight rows are fully silenced.
        let base = run(sdata.clone());
        let mut scrambled = sdata.clone();
        for (i, v) in scrambled.iter_mut().enumerate() {
            if i / c != hot {
                *v = 9.0 - *v;
            }
        }
        let changed = run(scrambled);
        assert_eq!(base.data(), changed.data());
    }

    #[test]
    fn distillation_is_zero_at_equality_and_spares_the_teacher() {
        let mut rng = Rng::seed(23);
        let mut store = ParamStore::new();
        let teacher_proj = SourceIds::register(&mut store, "src", 3, &mut rng).unwrap();
        let mut g = Graph::new();

        let x = g
            .input(Tensor::matrix(2, 3, vec![0.1, 0.4, -0.2, 0.9, -0.5, 0.3]).unwrap())
            .unwrap();
        let f_src = teacher_proj.apply(&mut g, &store, x).unwrap();
        let same = tkt_loss(&mut g, f_src, f_src).unwrap();
        assert!(g.value(same).item().unwrap().abs() < 1e-12);

        let other = g
            .input(Tensor::matrix(2, 7, vec![
                0.3, -0.1, 0.2, 0.0, 1.0, -0.4, 0.2, //
                -0.2, 0.5, 0.1, 0.7, -0.3, 0.0, 0.4,
            ])
            .unwrap())
            .unwrap();
        let loss = tkt_loss(&mut g, other, f_src).unwrap();
        assert!(g.value(loss).item().unwrap() > 0.0);

        // The teacher projection must receive no gradient through the
        // distillation loss.
        let grads = g.backward(loss).unwrap();
        for (name, _) in store.iter() {
            if name.starts_with("src.") {
                let id = store.id(name).unwrap();
                assert!(
                    grads.param(id).is_none(),
                    "teacher parameter `{name}` received gradient"
                );
            }
        }
    }
}
