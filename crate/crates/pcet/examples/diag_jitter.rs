//! TEMPORARY calibration probe: reference-jitter sweep.

use std::time::Instant;

use pcet::dataset::{dataset_digest, LabeledSequence};
use pcet::model::{Model, ModelConfig};
use pcet::sim::{generate_dataset, SimConfig};
use pcet::track::{run_ope, Aggregation, Variant};
use pcet::train::{train_all, TrainConfig};

fn snippets(dataset: &[LabeledSequence]) -> Vec<LabeledSequence> {
    dataset
        .iter()
        .flat_map(|s| {
            (1..s.frames.len()).map(move |i| LabeledSequence {
                id: format!("{}_{}", s.id, i),
                category: s.category.clone(),
                frames: vec![s.frames[i - 1].clone(), s.frames[i].clone()],
            })
        })
        .collect()
}

fn main() -> pcet::Result<()> {
    let train_set = generate_dataset(&SimConfig::desk(), 801)?;
    let eval_sim = SimConfig {
        sequences: 60,
        ..SimConfig::desk()
    };
    let eval_set = generate_dataset(&eval_sim, 803)?;
    let one_step = snippets(&eval_set);
    let config = ModelConfig::desk();
    let digest = dataset_digest(&train_set);

    let cases: &[(f64, f64)] = &[(0.20, 0.04), (0.35, 0.08)];
    for &(jxy, jyaw) in cases {
        let tc = TrainConfig {
            stage1_iterations: 1800,
            stage2_iterations: 600,
            stage3_iterations: 800,
            halve_every: 600,
            reference_jitter_xy: jxy,
            reference_jitter_yaw: jyaw,
            ..TrainConfig::desk()
        };
        let dir = tempfile::tempdir()?;
        let t0 = Instant::now();
        let summary = train_all(&config, &tc, &train_set, dir.path(), 802, &digest)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let (model, _) = Model::load_checkpoint(&config, &summary.checkpoints[2])?;

        let t1 = Instant::now();
        let refined = run_ope(&model, &eval_set, Variant::Refined, Aggregation::Arp, 804)?.summary;
        let keep =
            run_ope(&model, &eval_set, Variant::KeepPrevious, Aggregation::Arp, 804)?.summary;
        let coarse =
            run_ope(&model, &eval_set, Variant::CoarseOnly, Aggregation::Arp, 804)?.summary;
        let merge = run_ope(&model, &eval_set, Variant::CropMerge, Aggregation::Arp, 804)?.summary;
        let step_refined =
            run_ope(&model, &one_step, Variant::Refined, Aggregation::Arp, 805)?.summary;
        let step_coarse =
            run_ope(&model, &one_step, Variant::CoarseOnly, Aggregation::Arp, 805)?.summary;
        let eval_secs = t1.elapsed().as_secs_f64();

        println!(
            "=== jitter xy {jxy} yaw {jyaw}: train {train_secs:.0}s eval {eval_secs:.0}s"
        );
        println!(
            "  tracked  : refined {:.1}  coarse {:.1}  cropmerge {:.1}  keep {:.1}",
            refined.success, coarse.success, merge.success, keep.success
        );
        println!(
            "  one-step : refined {:.1}  coarse {:.1}",
            step_refined.success, step_coarse.success
        );
    }
    Ok(())
}
