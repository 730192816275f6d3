//! Reader for the KITTI tracking layout — velodyne clouds, camera-frame
//! labels, per-scene calibration — producing the same labeled sequences
//! the synthetic generator emits, so everything downstream has a single
//! data path.

use crate::dataset::{LabeledFrame, LabeledSequence};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::path::Path;

pub use crate::dataset::read_points_bin as read_velodyne;

/// Dataset partition by scene number.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// The standard 21-scene partition: 0-16 train, 17-18 val, 19-20 test.
pub fn split_scene(scene: u32) -> Result<Split> {
    match scene {
        0..=16 => Ok(Split::Train),
        17 | 18 => Ok(Split::Val),
        19 | 20 => Ok(Split::Test),
        other => Err(Error::Config(format!(
            "scene {other} is outside the 21-scene layout (0-20)"
        ))),
    }
}

/// Rigid sensor-to-camera transform plus the rectifying rotation, with
/// cached inverses for the camera-to-sensor direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Calib {
    r: [[f64; 3]; 3],
    t: [f64; 3],
    rect: [[f64; 3]; 3],
    r_inv: [[f64; 3]; 3],
    rect_inv: [[f64; 3]; 3],
}

fn matvec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Invert a 3x3 matrix by its adjugate.
fn invert3(m: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::Numeric(format!(
            "calibration matrix is singular (determinant {det})"
        )));
    }
    let c10 = m[0][2] * m[2][1] - m[0][1] * m[2][2];
    let c11 = m[0][0] * m[2][2] - m[0][2] * m[2][0];
    let c12 = m[0][1] * m[2][0] - m[0][0] * m[2][1];
    let c20 = m[0][1] * m[1][2] - m[0][2] * m[1][1];
    let c21 = m[0][2] * m[1][0] - m[0][0] * m[1][2];
    let c22 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    Ok([
        [c00 / det, c10 / det, c20 / det],
        [c01 / det, c11 / det, c21 / det],
        [c02 / det, c12 / det, c22 / det],
    ])
}

impl Calib {
    /// Build from the sensor-to-camera rotation/translation and the
    /// rectifying rotation.
    pub fn new(r: [[f64; 3]; 3], t: [f64; 3], rect: [[f64; 3]; 3]) -> Result<Calib> {
        Ok(Calib {
            r_inv: invert3(&r)?,
            rect_inv: invert3(&rect)?,
            r,
            t,
            rect,
        })
    }

    /// Parse a per-scene calibration file. Lines are `KEY v1 v2 …` with
    /// an optional colon after the key; the sensor-to-camera transform
    /// (12 values) and the rectifying rotation (9 values) are required,
    /// projection matrices are ignored.
    pub fn parse(path: &Path) -> Result<Calib> {
        let text = fs::read_to_string(path)?;
        let file = path.display().to_string();
        let mut velo_cam: Option<Vec<f64>> = None;
        let mut rect: Option<Vec<f64>> = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(raw_key) = parts.next() else { continue };
            let key = raw_key.trim_end_matches(':');
            let slot = match key {
                "Tr_velo_cam" | "Tr_velo_to_cam" => &mut velo_cam,
                "R_rect" | "R0_rect" => &mut rect,
                _ => continue,
            };
            let expect = if key.starts_with("Tr_") { 12 } else { 9 };
            let values: Vec<f64> = parts
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::format(
                            file.clone(),
                            Some(i + 1),
                            format!("{key} entry {s:?} is not a number"),
                        )
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != expect {
                return Err(Error::format(
                    file,
                    Some(i + 1),
                    format!("{key} needs {expect} values, found {}", values.len()),
                ));
            }
            *slot = Some(values);
        }
        let velo_cam = velo_cam.ok_or_else(|| {
            Error::format(file.clone(), None, "missing sensor-to-camera transform (Tr_velo_cam)")
        })?;
        let rect = rect.ok_or_else(|| {
            Error::format(file.clone(), None, "missing rectifying rotation (R_rect)")
        })?;
        let mut r = [[0.0; 3]; 3];
        let mut t = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = velo_cam[i * 4 + j];
            }
            t[i] = velo_cam[i * 4 + 3];
        }
        let mut rr = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rr[i][j] = rect[i * 3 + j];
            }
        }
        Calib::new(r, t, rr)
    }

    /// Sensor frame to rectified camera frame.
    pub fn sensor_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = matvec(&self.r, p);
        matvec(&self.rect, [q[0] + self.t[0], q[1] + self.t[1], q[2] + self.t[2]])
    }

    /// Rectified camera frame back to the sensor frame.
    pub fn camera_to_sensor(&self, p: [f64; 3]) -> [f64; 3] {
        let q = matvec(&self.rect_inv, p);
        matvec(
            &self.r_inv,
            [q[0] - self.t[0], q[1] - self.t[1], q[2] - self.t[2]],
        )
    }
}

/// One object's ground-truth path through a scene, in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub scene: String,
    pub track: u32,
    /// Object class, lowercased (`car`, `pedestrian`, …).
    pub category: String,
    /// Strictly increasing frame indices where the object appears.
    pub frames: Vec<usize>,
    pub boxes: Vec<Box3D>,
}

/// Parse a tracking label file and convert every box to the sensor
/// frame: the camera-frame bottom-center moves through the calibration,
/// rises by half the height, and the heading flips axes. `DontCare`
/// rows are dropped; rows group by track id in frame order.
pub fn read_labels(path: &Path, calib: &Calib, scene: &str) -> Result<Vec<Tracklet>> {
    let text = fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut by_track: BTreeMap<u32, Tracklet> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = Some(i + 1);
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 17 {
            return Err(Error::format(
                file,
                line_no,
                format!("expected 17 fields (frame track type … x y z rotation), found {}", fields.len()),
            ));
        }
        if fields[2] == "DontCare" {
            continue;
        }
        let num = |idx: usize, what: &str| -> Result<f64> {
            fields[idx].parse::<f64>().map_err(|_| {
                Error::format(
                    file.clone(),
                    line_no,
                    format!("{what} {:?} is not a number", fields[idx]),
                )
            })
        };
        let frame = fields[0].parse::<usize>().map_err(|_| {
            Error::format(file.clone(), line_no, format!("frame {:?} is not an index", fields[0]))
        })?;
        let track = fields[1].parse::<u32>().map_err(|_| {
            Error::format(
                file.clone(),
                line_no,
                format!("track id {:?} is not a non-negative integer", fields[1]),
            )
        })?;
        let height = num(10, "height")?;
        let width = num(11, "width")?;
        let length = num(12, "length")?;
        let location = [num(13, "x")?, num(14, "y")?, num(15, "z")?];
        let rotation_y = num(16, "rotation")?;

        let bottom = calib.camera_to_sensor(location);
        let center = [bottom[0], bottom[1], bottom[2] + height / 2.0];
        let yaw = wrap_angle(-rotation_y - FRAC_PI_2);
        let b = Box3D::new(center, [length, width, height], yaw).map_err(|e| {
            Error::format(file.clone(), line_no, format!("box is invalid: {e}"))
        })?;

        let entry = by_track.entry(track).or_insert_with(|| Tracklet {
            scene: scene.to_string(),
            track,
            category: fields[2].to_lowercase(),
            frames: Vec::new(),
            boxes: Vec::new(),
        });
        if let Some(&last) = entry.frames.last() {
            if frame <= last {
                return Err(Error::format(
                    file,
                    line_no,
                    format!("track {track} frame {frame} does not increase past {last}"),
                ));
            }
        }
        entry.frames.push(frame);
        entry.boxes.push(b);
    }
    Ok(by_track.into_values().collect())
}

/// Load one scene from the tracking layout: labels from
/// `label_02/{scene}.txt`, calibration from `calib/{scene}.txt`, clouds
/// from `velodyne/{scene}/{frame:06}.bin`. Each tracklet becomes one
/// labeled sequence carrying the full cloud of every frame it appears
/// in.
pub fn load_scene(root: &Path, scene: &str) -> Result<Vec<LabeledSequence>> {
    let calib = Calib::parse(&root.join("calib").join(format!("{scene}.txt")))?;
    let tracklets = read_labels(
        &root.join("label_02").join(format!("{scene}.txt")),
        &calib,
        scene,
    )?;
    let mut clouds: BTreeMap<usize, crate::cloud::PointCloud> = BTreeMap::new();
    let mut sequences = Vec::with_capacity(tracklets.len());
    for t in tracklets {
        let mut frames = Vec::with_capacity(t.frames.len());
        for (&frame, b) in t.frames.iter().zip(&t.boxes) {
            if !clouds.contains_key(&frame) {
                let path = root
                    .join("velodyne")
                    .join(scene)
                    .join(format!("{frame:06}.bin"));
                clouds.insert(frame, read_velodyne(&path)?);
            }
            frames.push(LabeledFrame {
                cloud: clouds[&frame].clone(),
                gt: *b,
            });
        }
        sequences.push(LabeledSequence {
            id: format!("{scene}_t{:03}", t.track),
            category: t.category,
            frames,
        });
    }
    Ok(sequences)
}

/// Load every scene of one split under `root`, in scene order.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<LabeledSequence>> {
    let label_dir = root.join("label_02");
    let mut scenes = Vec::new();
    for entry in fs::read_dir(&label_dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e != "txt").unwrap_or(true) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let number: u32 = stem.parse().map_err(|_| {
            Error::format(
                path.display().to_string(),
                None,
                "scene file names must be zero-padded numbers",
            )
        })?;
        if split_scene(number)? == split {
            scenes.push(stem);
        }
    }
    scenes.sort();
    if scenes.is_empty() {
        return Err(Error::Config(format!(
            "no scenes of split {split:?} under {}",
            label_dir.display()
        )));
    }
    let nested: Vec<Vec<LabeledSequence>> = scenes
        .par_iter()
        .map(|scene| load_scene(root, scene))
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
