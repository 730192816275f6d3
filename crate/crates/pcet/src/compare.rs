//! Learned aggregation versus picking the single best-scored candidate:
//! tracks the same data both ways and captures the per-candidate
//! score-vs-overlap data that explains the gap.

use crate::cloud::Rng;
use crate::dataset::LabeledSequence;
use crate::error::Result;
use crate::geom::iou3d;
use crate::heads::decode_box;
use crate::metrics::OpeSummary;
use crate::model::{Model, PassCounter};
use crate::track::{run_ope, Aggregation, Variant};
use crate::train::prepare_inputs;
use crate::tensor::{Graph, Tensor};
use std::fs;
use std::path::Path;

/// One candidate's score and the quality of its decoded box on one
/// frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScatterRow {
    pub sequence: String,
    pub frame: usize,
    pub candidate: usize,
    /// Candidate score as a probability.
    pub score: f64,
    /// Overlap of this candidate's decoded box with ground truth.
    pub iou: f64,
}

/// Both aggregation strategies scored on the same sequences, plus the
/// per-candidate data behind the comparison.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CompareReport {
    pub variant: Variant,
    pub arp: OpeSummary,
    pub top1: OpeSummary,
    pub scatter: Vec<ScatterRow>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode every candidate's box against the current ground truth along
/// a teacher-forced pass (the reference is always the previous frame's
/// true box, so rows measure matching quality, not accumulated drift).
fn gather_scatter(
    model: &Model,
    dataset: &[LabeledSequence],
    seed: u64,
) -> Result<Vec<ScatterRow>> {
    let mut rows = Vec::new();
    for (si, seq) in dataset.iter().enumerate() {
        if seq.frames.len() < 2 {
            continue;
        }
        let mut rng = Rng::stream(seed, 1000 + si as u64);
        for frame in 1..seq.frames.len() {
            let reference = seq.frames[frame - 1].gt;
            let gt = seq.frames[frame].gt;
            let inputs = prepare_inputs(
                &model.config,
                &seq.frames[frame - 1].cloud,
                &seq.frames[frame].cloud,
                &reference,
                &mut rng,
            )?;
            if inputs.degenerate {
                continue;
            }
            let mut g = Graph::new();
            let mut passes = PassCounter::default();
            let coarse =
                model.coarse(&mut g, &inputs.template, &inputs.search, None, &mut passes)?;
            let scores = g.value(coarse.cands.scores).clone();
            let offsets = g.value(coarse.cands.offsets).clone();
            for c in 0..offsets.rows() {
                let row = Tensor::matrix(1, 4, offsets.row(c).to_vec())?;
                let b = decode_box(&reference, &row)?;
                rows.push(ScatterRow {
                    sequence: seq.id.clone(),
                    frame,
                    candidate: c,
                    score: sigmoid(scores.get(c, 0)),
                    iou: iou3d(&b, &gt),
                });
            }
        }
    }
    Ok(rows)
}

/// Track the dataset once per aggregation strategy and collect the
/// candidate scatter.
pub fn run_compare(
    model: &Model,
    dataset: &[LabeledSequence],
    variant: Variant,
    seed: u64,
) -> Result<CompareReport> {
    let arp = run_ope(model, dataset, variant, Aggregation::Arp, seed)?;
    let top1 = run_ope(model, dataset, variant, Aggregation::Top1, seed)?;
    Ok(CompareReport {
        variant,
        arp: arp.summary,
        top1: top1.summary,
        scatter: gather_scatter(model, dataset, seed)?,
    })
}

/// Write scatter rows as `sequence,frame,candidate,score,iou`.
pub fn write_scatter_csv(path: &Path, rows: &[ScatterRow]) -> Result<()> {
    let mut text = String::from("sequence,frame,candidate,score,iou\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sequence, r.frame, r.candidate, r.score, r.iou
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::{arp_aggregate, top1_aggregate, ArpIds, CandidateSet};
    use crate::model::tiny_test_config;
    use crate::sim::{generate_dataset, SimConfig};
    use crate::tensor::ParamStore;

    /// Two candidates straddling the truth: picking the higher-scored
    /// one lands short, while an even mixture lands exactly on target.
    fn straddling_candidates(
        g: &mut Graph,
        scores: [f64; 2],
        distances: [f64; 2],
    ) -> CandidateSet {
        CandidateSet {
            scores: g
                .input(Tensor::matrix(2, 1, scores.to_vec()).unwrap())
                .unwrap(),
            distances: g
                .input(Tensor::matrix(2, 1, distances.to_vec()).unwrap())
                .unwrap(),
            offsets: g
                .input(
                    Tensor::matrix(2, 4, vec![0.6, 0.0, 0.0, 0.0, 1.4, 0.0, 0.0, 0.0]).unwrap(),
                )
                .unwrap(),
            coords: vec![[0.0; 3]; 2],
        }
    }

    #[test]
    fn mixture_beats_top1_when_the_best_score_is_off_target() {
        let mut g = Graph::new();
        // Score + distance logits are equal (3.0 each), so the mixture
        // is exactly even; top-1 goes by score alone and picks row 0.
        let cands = straddling_candidates(&mut g, [2.0, 1.9], [1.0, 1.1]);
        let store = ParamStore::new();
        let mixed = arp_aggregate(&mut g, &store, &cands, &ArpIds::Identity).unwrap();
        let top = top1_aggregate(&mut g, &cands).unwrap();
        let reference = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        let gt = Box3D::new([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        let mixed_box = decode_box(&reference, &g.value(mixed).clone()).unwrap();
        let top_box = decode_box(&reference, &g.value(top).clone()).unwrap();
        let mixed_iou = iou3d(&mixed_box, &gt);
        let top_iou = iou3d(&top_box, &gt);
        assert!((mixed_iou - 1.0).abs() < 1e-9, "mixture landed at {mixed_iou}");
        // Top-1 lands 0.4 m short: overlap 1.6/2.4 per the long axis.
        assert!((top_iou - 1.6 / 2.4).abs() < 1e-9, "top-1 landed at {top_iou}");
        assert!(mixed_iou > top_iou);
    }

    #[test]
    fn near_one_hot_weights_reduce_the_mixture_to_top1() {
        let mut g = Graph::new();
        let cands = straddling_candidates(&mut g, [5.0, 0.0], [10.0, -10.0]);
        let store = ParamStore::new();
        let mixed = arp_aggregate(&mut g, &store, &cands, &ArpIds::Identity).unwrap();
        let top = top1_aggregate(&mut g, &cands).unwrap();
        let m = g.value(mixed).clone();
        let t = g.value(top).clone();
        for i in 0..4 {
            assert!((m.get(0, i) - t.get(0, i)).abs() < 1e-6);
        }
    }

    #[test]
    fn scatter_covers_every_candidate_of_every_tracked_frame() {
        let config = tiny_test_config();
        let model = Model::new(&config, &mut Rng::seed(3)).unwrap();
        let sim = SimConfig {
            sequences: 2,
            frames_per_sequence: 3,
            surface_points: 48,
            clutter_points: 24,
            ..SimConfig::desk()
        };
        let dataset = generate_dataset(&sim, 5).unwrap();
        let report = run_compare(&model, &dataset, Variant::CoarseOnly, 7).unwrap();
        let tracked_frames: usize = dataset.iter().map(|s| s.frames.len() - 1).sum();
        assert_eq!(report.scatter.len(), tracked_frames * config.search_rows());
        for r in &report.scatter {
            assert!((0.0..=1.0).contains(&r.score), "score {}", r.score);
            assert!((0.0..=1.0).contains(&r.iou), "iou {}", r.iou);
        }
        for s in [&report.arp, &report.top1] {
            assert!((0.0..=100.0).contains(&s.success));
            assert!((0.0..=100.0).contains(&s.precision));
        }
    }

    #[test]
    fn scatter_csv_has_the_documented_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        let rows = vec![ScatterRow {
            sequence: "seq_0000".into(),
            frame: 1,
            candidate: 3,
            score: 0.25,
            iou: 0.5,
        }];
        write_scatter_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "sequence,frame,candidate,score,iou\nseq_0000,1,3,0.25,0.5\n");
    }
}
