//! Generate a small synthetic tracking dataset and save it in the
//! normalized on-disk layout (one directory per sequence: labels.json
//! plus one binary cloud per frame).
//!
//! Run with: cargo run --example generate_scenes

use pcet::dataset::{dataset_digest, save_dataset};
use pcet::sim::{generate_dataset, SimConfig};

fn main() -> pcet::Result<()> {
    let config = SimConfig {
        sequences: 8,
        frames_per_sequence: 10,
        ..SimConfig::desk()
    };
    let dataset = generate_dataset(&config, 42)?;

    println!("generated {} sequences:", dataset.len());
    for seq in &dataset {
        let first = &seq.frames[0].gt;
        let last = &seq.frames[seq.frames.len() - 1].gt;
        let drift = {
            let a = first.center();
            let b = last.center();
            ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt()
        };
        println!(
            "  {} [{}] {} frames, {} points/frame, drifts {:.2} m",
            seq.id,
            seq.category,
            seq.frames.len(),
            seq.frames[0].cloud.len(),
            drift
        );
    }

    let dir = std::env::temp_dir().join("pcet_example_scenes");
    save_dataset(&dir, &dataset)?;
    println!("saved to {}", dir.display());
    println!("content digest: {}", dataset_digest(&dataset));
    Ok(())
}
