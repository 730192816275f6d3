//! Time the three tracker variants on identical inputs and print a
//! per-frame latency table with backbone pass counts.
//!
//! Coarse-only runs the backbone twice (template + search). The refined
//! tracker reuses both passes and adds only head work, while the
//! crop-merge alternative pays for a third backbone pass over the
//! merged cloud every frame.
//!
//! Run with: cargo run --example latency_bench

use pcet::bench::run_bench;
use pcet::cloud::Rng;
use pcet::model::{Model, ModelConfig};
use pcet::net::{BackboneConfig, SaStageConfig};
use pcet::sim::{generate_dataset, SimConfig};

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
        sequences: 4,
        frames_per_sequence: 6,
        ..SimConfig::desk()
    };
    let dataset = generate_dataset(&sim, 21)?;
    let model = Model::new(&tiny_model(), &mut Rng::stream(2, 1))?;

    let report = run_bench(&model, &dataset, 12, 2, 17)?;

    println!(
        "{:<12} {:>7} {:>12} {:>12} {:>8}",
        "variant", "frames", "ms/frame", "std (ms)", "passes"
    );
    for t in &report.timings {
        println!(
            "{:<12} {:>7} {:>12.3} {:>12.3} {:>8}",
            format!("{:?}", t.variant).to_lowercase(),
            t.frames,
            t.mean_seconds * 1e3,
            t.std_seconds * 1e3,
            t.backbone_passes_per_frame
        );
    }
    println!(
        "refined adds {:.3} ms over coarse-only; crop-merge adds {:.3} ms (ratio {:.2})",
        report.refined_added_seconds * 1e3,
        report.crop_merge_added_seconds * 1e3,
        report.added_ratio
    );
    Ok(())
}
