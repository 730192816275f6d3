//! TEMPORARY calibration probe: long-schedule refinement fidelity.

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
    let digest = dataset_digest(&train_set);

    let cases: &[(f64, f64)] = &[(1.0, 5e-4), (1.5, 3e-4)];
    for &(klw, s3lr) in cases {
        let config = ModelConfig {
            template_expand: 1.0,
            ..ModelConfig::desk()
        };
        let tc = TrainConfig {
            stage1_iterations: 5400,
            stage2_iterations: 1500,
            stage3_iterations: 2400,
            halve_every: 1500,
            reference_jitter_xy: 0.35,
            reference_jitter_yaw: 0.08,
            kl_weight: klw,
            stage3_learning_rate: s3lr,
            ..TrainConfig::desk()
        };
        let dir = tempfile::tempdir()?;
        let t0 = Instant::now();
        let summary = train_all(&config, &tc, &train_set, dir.path(), 802, &digest)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let s1: Vec<f64> = summary
            .rows
            .iter()
            .filter(|r| r.stage == 1)
            .map(|r| r.loss)
            .collect();
        let head: f64 = s1[..10].iter().sum::<f64>() / 10.0;
        let at200: f64 = s1[190..200].iter().sum::<f64>() / 10.0;
        let (model, _) = Model::load_checkpoint(&config, &summary.checkpoints[2])?;

        let t1 = Instant::now();
        let refined = run_ope(&model, &eval_set, Variant::Refined, Aggregation::Arp, 804)?.summary;
        let keep =
            run_ope(&model, &eval_set, Variant::KeepPrevious, Aggregation::Arp, 804)?.summary;
        let top1 = run_ope(&model, &eval_set, Variant::Refined, Aggregation::Top1, 804)?.summary;
        let coarse =
            run_ope(&model, &eval_set, Variant::CoarseOnly, Aggregation::Arp, 804)?.summary;
        let merge = run_ope(&model, &eval_set, Variant::CropMerge, Aggregation::Arp, 804)?.summary;
        let step_refined =
            run_ope(&model, &one_step, Variant::Refined, Aggregation::Arp, 805)?.summary;
        let step_coarse =
            run_ope(&model, &one_step, Variant::CoarseOnly, Aggregation::Arp, 805)?.summary;
        let eval_secs = t1.elapsed().as_secs_f64();

        println!("=== kl {klw} s3lr {s3lr}: train {train_secs:.0}s eval {eval_secs:.0}s");
        println!("  stage-1 loss {head:.3} -> {at200:.3} (iter 200)");
        println!(
            "  tracked  : refined {:.1}  coarse {:.1}  cropmerge {:.1}  top1 {:.1}  keep {:.1}",
            refined.success, coarse.success, merge.success, top1.success, keep.success
        );
        println!(
            "  one-step : refined {:.1}  coarse {:.1}",
            step_refined.success, step_coarse.success
        );
    }
    Ok(())
}
