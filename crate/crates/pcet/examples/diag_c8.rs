//! TEMPORARY calibration probe for the desk training criterion.

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

    let schedules: &[(usize, usize, usize, usize)] = &[
        (450, 150, 200, 150),
        (1800, 600, 800, 600),
        (5400, 1800, 2400, 1800),
    ];
    for &(s1, s2, s3, halve) in schedules {
        let tc = TrainConfig {
            stage1_iterations: s1,
            stage2_iterations: s2,
            stage3_iterations: s3,
            halve_every: halve,
            ..TrainConfig::desk()
        };
        let dir = tempfile::tempdir()?;
        let t0 = Instant::now();
        let summary = train_all(&config, &tc, &train_set, dir.path(), 802, &digest)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let stage_ends: Vec<(u32, f64, f64)> = (1..=3u32)
            .map(|st| {
                let losses: Vec<f64> = summary
                    .rows
                    .iter()
                    .filter(|r| r.stage == st)
                    .map(|r| r.loss)
                    .collect();
                let head = losses[..10.min(losses.len())].iter().sum::<f64>()
                    / 10.min(losses.len()) as f64;
                let n = losses.len();
                let tail =
                    losses[n.saturating_sub(10)..].iter().sum::<f64>() / 10.min(n) as f64;
                (st, head, tail)
            })
            .collect();
        let (model, _) = Model::load_checkpoint(&config, &summary.checkpoints[2])?;

        let t1 = Instant::now();
        let refined = run_ope(&model, &eval_set, Variant::Refined, Aggregation::Arp, 804)?.summary;
        let keep =
            run_ope(&model, &eval_set, Variant::KeepPrevious, Aggregation::Arp, 804)?.summary;
        let top1 = run_ope(&model, &eval_set, Variant::Refined, Aggregation::Top1, 804)?.summary;
        let merge = run_ope(&model, &eval_set, Variant::CropMerge, Aggregation::Arp, 804)?.summary;
        let coarse =
            run_ope(&model, &eval_set, Variant::CoarseOnly, Aggregation::Arp, 804)?.summary;
        let step_refined =
            run_ope(&model, &one_step, Variant::Refined, Aggregation::Arp, 805)?.summary;
        let step_coarse =
            run_ope(&model, &one_step, Variant::CoarseOnly, Aggregation::Arp, 805)?.summary;
        let eval_secs = t1.elapsed().as_secs_f64();

        println!("=== schedule {s1}/{s2}/{s3} halve {halve}: train {train_secs:.0}s eval {eval_secs:.0}s");
        for (st, head, tail) in stage_ends {
            println!("  stage {st}: loss {head:.3} -> {tail:.3}");
        }
        println!(
            "  tracked  : refined {:.1}/{:.1}  coarse {:.1}  top1 {:.1}  cropmerge {:.1}  keep {:.1}",
            refined.success,
            refined.precision,
            coarse.success,
            top1.success,
            merge.success,
            keep.success
        );
        println!(
            "  one-step : refined {:.1}/{:.1}  coarse {:.1}",
            step_refined.success, step_refined.precision, step_coarse.success
        );
    }
    Ok(())
}
