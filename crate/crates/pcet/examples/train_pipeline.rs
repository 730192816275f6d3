//! Train the full three-stage pipeline on a tiny synthetic dataset and
//! print the loss trajectory of each stage.
//!
//! Stage 1 fits the coarse tracker, stage 2 fits the merged-cloud
//! teacher on top of frozen coarse outputs, and stage 3 distills the
//! teacher into the deviation-feature refiner.
//!
//! Run with: cargo run --example train_pipeline

use pcet::dataset::dataset_digest;
use pcet::model::ModelConfig;
use pcet::net::{BackboneConfig, SaStageConfig};
use pcet::sim::{generate_dataset, SimConfig};
use pcet::train::{train_all, TrainConfig};

fn tiny_model() -> ModelConfig {
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

fn main() -> pcet::Result<()> {
    let sim = SimConfig {
        sequences: 6,
        frames_per_sequence: 6,
        surface_points: 48,
        clutter_points: 16,
        ..SimConfig::desk()
    };
    let dataset = generate_dataset(&sim, 7)?;

    let tc = TrainConfig {
        stage1_iterations: 40,
        stage2_iterations: 15,
        stage3_iterations: 15,
        halve_every: 20,
        ..TrainConfig::desk()
    };

    let out = std::env::temp_dir().join("pcet_example_train");
    let digest = dataset_digest(&dataset);
    let summary = train_all(&tiny_model(), &tc, &dataset, &out, 7, &digest)?;

    for stage in 1..=3u32 {
        let rows: Vec<_> = summary.rows.iter().filter(|r| r.stage == stage).collect();
        let first = rows.first().expect("stage ran");
        let last = rows.last().expect("stage ran");
        println!(
            "stage {stage}: {} iterations, loss {:.4} -> {:.4}",
            rows.len(),
            first.loss,
            last.loss
        );
    }
    for path in &summary.checkpoints {
        println!("checkpoint: {}", path.display());
    }
    println!("loss curve: {}", out.join("loss.csv").display());
    Ok(())
}
