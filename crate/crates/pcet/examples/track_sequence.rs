//! Track a single simulated sequence frame by frame and print every
//! prediction next to ground truth, for the refined tracker and the
//! keep-previous baseline.
//!
//! The model here is freshly initialized (untrained), so the point of
//! the output is the mechanics: the reference box advances with each
//! prediction, and per-frame overlap/error show how drift accumulates.
//!
//! Run with: cargo run --example track_sequence

use pcet::cloud::Rng;
use pcet::geom::{center_distance, iou3d};
use pcet::model::{Model, ModelConfig};
use pcet::net::{BackboneConfig, SaStageConfig};
use pcet::sim::{generate_dataset, SimConfig};
use pcet::track::{track_sequence, Aggregation, Variant};

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
        sequences: 1,
        frames_per_sequence: 8,
        ..SimConfig::desk()
    };
    let dataset = generate_dataset(&sim, 3)?;
    let seq = &dataset[0];
    println!(
        "sequence {} [{}], {} frames",
        seq.id,
        seq.category,
        seq.frames.len()
    );

    let model = Model::new(&tiny_model(), &mut Rng::stream(5, 1))?;

    for (variant, label) in [
        (Variant::Refined, "refined tracker"),
        (Variant::KeepPrevious, "keep-previous baseline"),
    ] {
        let traj = track_sequence(&model, seq, variant, Aggregation::Arp, &mut Rng::stream(5, 2))?;
        println!("{label}:");
        for f in &traj.frames {
            let gt = &seq.frames[f.frame].gt;
            let c = f.predicted.center();
            println!(
                "  frame {}: center ({:+.2}, {:+.2}, {:+.2})  error {:.2} m  overlap {:.3}  passes {}",
                f.frame,
                c[0],
                c[1],
                c[2],
                center_distance(&f.predicted, gt),
                iou3d(&f.predicted, gt),
                f.backbone_passes,
            );
        }
        println!("  total backbone passes: {}", traj.backbone_passes());
    }
    Ok(())
}
