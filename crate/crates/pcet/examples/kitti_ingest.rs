//! Parse the bundled KITTI-tracking-format fixture: calibration,
//! tracking labels (converted from camera to sensor frame), and raw
//! velodyne scans, then demonstrate the lossless cloud round trip.
//!
//! Run with: cargo run --example kitti_ingest

use pcet::dataset::write_points_bin;
use pcet::ingest::{load_scene, read_labels, read_velodyne, split_scene, Calib};
use std::path::Path;

fn main() -> pcet::Result<()> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kitti");

    let calib = Calib::parse(&root.join("calib/0000.txt"))?;
    let tracklets = read_labels(&root.join("label_02/0000.txt"), &calib, "0000")?;
    println!("{} tracklets in scene 0000:", tracklets.len());
    for t in &tracklets {
        println!("  track {} [{}], frames {:?}", t.track, t.category, t.frames);
        for (f, b) in t.frames.iter().zip(&t.boxes) {
            let c = b.center();
            println!(
                "    frame {f}: center ({:+.3}, {:+.3}, {:+.3}) m, yaw {:+.3} rad",
                c[0],
                c[1],
                c[2],
                b.yaw()
            );
        }
    }

    let sequences = load_scene(&root, "0000")?;
    println!("scene 0000 yields {} sequences:", sequences.len());
    for s in &sequences {
        println!(
            "  {} [{}], {} frames, {} points in first frame",
            s.id,
            s.category,
            s.frames.len(),
            s.frames[0].cloud.len()
        );
    }

    println!("scene-number split assignment:");
    for scene in [0u32, 16, 17, 18, 19, 20] {
        println!("  scene {scene:04} -> {:?}", split_scene(scene)?);
    }

    // Velodyne scans survive a read/write round trip bit for bit.
    let bin = root.join("velodyne/0000/000000.bin");
    let cloud = read_velodyne(&bin)?;
    let copy = std::env::temp_dir().join("pcet_example_roundtrip.bin");
    write_points_bin(&copy, &cloud)?;
    let original = std::fs::read(&bin)?;
    let rewritten = std::fs::read(&copy)?;
    println!(
        "round trip: {} points, {} bytes, byte-identical: {}",
        cloud.len(),
        original.len(),
        original == rewritten
    );
    Ok(())
}
