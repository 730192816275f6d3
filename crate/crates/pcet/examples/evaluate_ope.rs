//! Score trajectories with the one-pass-evaluation metrics: per-frame
//! box overlap drives Success (AUC of the overlap-threshold curve) and
//! center error drives Precision (AUC of the error-threshold curve up
//! to 2 m).
//!
//! Run with: cargo run --example evaluate_ope

use pcet::cloud::Rng;
use pcet::metrics::{evaluate_frames, summarize};
use pcet::model::{Model, ModelConfig};
use pcet::net::{BackboneConfig, SaStageConfig};
use pcet::sim::{generate_dataset, SimConfig};
use pcet::track::{run_ope, Aggregation, Variant};

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
        frames_per_sequence: 8,
        ..SimConfig::desk()
    };
    let dataset = generate_dataset(&sim, 11)?;

    // Feeding ground truth back as predictions scores 100/100.
    let gt: Vec<_> = dataset[0].frames.iter().map(|f| f.gt).collect();
    let evals = evaluate_frames(&gt[1..], &gt[1..])?;
    let perfect = summarize(&[(dataset[0].category.clone(), evals)])?;
    println!(
        "oracle predictions: success {:.1}, precision {:.1}",
        perfect.success, perfect.precision
    );

    // The keep-previous baseline repeats the first-frame box forever,
    // so its scores measure how quickly the objects move away.
    let model = Model::new(&tiny_model(), &mut Rng::stream(1, 1))?;
    let report = run_ope(
        &model,
        &dataset,
        Variant::KeepPrevious,
        Aggregation::Arp,
        9,
    )?;
    println!(
        "keep-previous baseline over {} evaluated frames:",
        report.summary.frames
    );
    for c in &report.summary.categories {
        println!(
            "  {:<10} {:>3} frames: success {:.1}, precision {:.1}",
            c.category, c.frames, c.success, c.precision
        );
    }
    println!(
        "  overall: success {:.1}, precision {:.1}",
        report.summary.success, report.summary.precision
    );
    Ok(())
}
