//! On-disk dataset form shared by the generator, the ingester, and the
//! tracker: one directory per sequence holding `points_<frame>.bin`
//! clouds (little-endian `f32` x, y, z, intensity quadruples) and a
//! `labels.json` with the per-frame ground-truth boxes.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geom::Box3D;
use std::fs;
use std::path::{Path, PathBuf};

/// One frame: the full scene cloud and the tracked object's box.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub cloud: PointCloud,
    pub gt: Box3D,
}

/// One tracking sequence of consecutive frames.
#[derive(Debug, Clone)]
pub struct LabeledSequence {
    pub id: String,
    pub category: String,
    pub frames: Vec<LabeledFrame>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LabelsFile {
    id: String,
    category: String,
    boxes: Vec<LabelEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LabelEntry {
    frame: usize,
    gt: Box3D,
}

/// Read a raw point file: consecutive little-endian `f32`
/// (x, y, z, intensity) records.
pub fn read_points_bin(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            path.display().to_string(),
            None,
            format!(
                "point file length {} is not a multiple of 16 (x, y, z, intensity as f32)",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes([rec[o], rec[o + 1], rec[o + 2], rec[o + 3]]) as f64;
        points.push([f(0), f(4), f(8)]);
        intensity.push(f(12));
    }
    PointCloud::with_intensity(points, intensity)
        .map_err(|e| Error::format(path.display().to_string(), None, format!("invalid point data: {e}")))
}

/// Write a cloud in the raw point format. A missing intensity channel is
/// stored as zeros.
pub fn write_points_bin(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points().iter().enumerate() {
        let intensity = cloud.intensity().map_or(0.0, |v| v[i]);
        for value in [p[0], p[1], p[2], intensity] {
            let narrow = value as f32;
            if !narrow.is_finite() {
                return Err(Error::Numeric(format!(
                    "value {value} overflows the 32-bit point storage format"
                )));
            }
            bytes.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn points_file_name(frame: usize) -> String {
    format!("points_{frame:06}.bin")
}

fn validate_sequence_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::invalid(format!(
            "sequence id `{id}` must be non-empty and use only [A-Za-z0-9_-]"
        )));
    }
    Ok(())
}

/// Write one sequence into `dir` (created if needed).
pub fn save_sequence(dir: &Path, seq: &LabeledSequence) -> Result<()> {
    validate_sequence_id(&seq.id)?;
    fs::create_dir_all(dir)?;
    let labels = LabelsFile {
        id: seq.id.clone(),
        category: seq.category.clone(),
        boxes: seq
            .frames
            .iter()
            .enumerate()
            .map(|(frame, f)| LabelEntry { frame, gt: f.gt })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&labels)
        .map_err(|e| Error::invalid(format!("cannot serialize labels: {e}")))?;
    fs::write(dir.join("labels.json"), json)?;
    for (frame, f) in seq.frames.iter().enumerate() {
        write_points_bin(&dir.join(points_file_name(frame)), &f.cloud)?;
    }
    Ok(())
}

/// Read one sequence directory back.
pub fn load_sequence(dir: &Path) -> Result<LabeledSequence> {
    let labels_path = dir.join("labels.json");
    let text = fs::read_to_string(&labels_path)?;
    let labels: LabelsFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(labels_path.display().to_string(), Some(e.line()), e.to_string()))?;

    let mut last: Option<usize> = None;
    for entry in &labels.boxes {
        if let Some(prev) = last {
            if entry.frame <= prev {
                return Err(Error::format(
                    labels_path.display().to_string(),
                    None,
                    format!("frame numbers must strictly increase, got {prev} then {}", entry.frame),
                ));
            }
        }
        last = Some(entry.frame);
    }

    let bin_count = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "bin"))
        .count();
    if bin_count != labels.boxes.len() {
        return Err(Error::format(
            labels_path.display().to_string(),
            None,
            format!(
                "label count {} does not match the {} point files in {}",
                labels.boxes.len(),
                bin_count,
                dir.display()
            ),
        ));
    }

    let mut frames = Vec::with_capacity(labels.boxes.len());
    for entry in &labels.boxes {
        let cloud = read_points_bin(&dir.join(points_file_name(entry.frame)))?;
        frames.push(LabeledFrame {
            cloud,
            gt: entry.gt,
        });
    }
    Ok(LabeledSequence {
        id: labels.id,
        category: labels.category,
        frames,
    })
}

/// Write a whole dataset: one subdirectory per sequence, named by id.
pub fn save_dataset(root: &Path, sequences: &[LabeledSequence]) -> Result<()> {
    fs::create_dir_all(root)?;
    for seq in sequences {
        save_sequence(&root.join(&seq.id), seq)?;
    }
    Ok(())
}

/// Read every sequence subdirectory, sorted by directory name.
pub fn load_dataset(root: &Path) -> Result<Vec<LabeledSequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::invalid(format!(
            "dataset directory {} contains no sequence subdirectories",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Content digest of a dataset: every id, category, box, and point
/// feeds one hash, so equal digests mean equal data.
pub fn dataset_digest(sequences: &[LabeledSequence]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for seq in sequences {
        h.update(seq.id.as_bytes());
        h.update([0]);
        h.update(seq.category.as_bytes());
        h.update([0]);
        for f in &seq.frames {
            let c = f.gt.center();
            let s = f.gt.size();
            for v in [c[0], c[1], c[2], s[0], s[1], s[2], f.gt.yaw()] {
                h.update(v.to_le_bytes());
            }
            for p in f.cloud.points() {
                for v in p {
                    h.update(v.to_le_bytes());
                }
            }
            if let Some(intensity) = f.cloud.intensity() {
                for v in intensity {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
