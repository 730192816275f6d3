//! Synthetic scene generator: box-shaped objects moving with constant
//! velocity plus noise, sampled as surface point clouds with directional
//! occlusion and background clutter. Every sequence derives its own RNG
//! stream from the master seed, so generation is reproducible and
//! order-independent.

use crate::cloud::{derive_seed, PointCloud, Rng};
use crate::dataset::{LabeledFrame, LabeledSequence};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D};
use rayon::prelude::*;

/// Size ranges of one simulated object category.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub length: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
}

/// Generator knobs. Speeds are per frame; angles are radians.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimConfig {
    pub sequences: usize,
    pub frames_per_sequence: usize,
    /// Surface samples on the object before occlusion.
    pub surface_points: usize,
    /// Background points scattered around the object each frame.
    pub clutter_points: usize,
    /// Horizontal half-extent of the clutter field around the object.
    pub clutter_radius: f64,
    /// Fraction of object points hidden behind a random direction.
    pub occlusion: f64,
    pub speed_range: [f64; 2],
    pub yaw_rate_range: [f64; 2],
    /// Gaussian noise on the per-frame translation (meters).
    pub motion_noise: f64,
    /// Gaussian noise on the per-frame heading change (radians).
    pub yaw_noise: f64,
    pub categories: Vec<CategorySpec>,
}

impl SimConfig {
    /// Defaults sized for fast desk-scale experiments.
    pub fn desk() -> SimConfig {
        SimConfig {
            sequences: 200,
            frames_per_sequence: 10,
            surface_points: 256,
            clutter_points: 256,
            clutter_radius: 8.0,
            occlusion: 0.3,
            speed_range: [0.15, 0.35],
            yaw_rate_range: [-0.03, 0.03],
            motion_noise: 0.02,
            yaw_noise: 0.01,
            categories: vec![
                CategorySpec {
                    name: "compact".into(),
                    length: [3.6, 4.4],
                    width: [1.5, 1.8],
                    height: [1.3, 1.6],
                },
                CategorySpec {
                    name: "oversize".into(),
                    length: [5.0, 6.0],
                    width: [1.8, 2.1],
                    height: [1.9, 2.4],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences == 0 || self.frames_per_sequence == 0 {
            return Err(Error::Config("sequence and frame counts must be positive".into()));
        }
        if self.surface_points == 0 {
            return Err(Error::Config("surface_points must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.occlusion) {
            return Err(Error::Config(format!(
                "occlusion must be in [0, 1), got {}",
                self.occlusion
            )));
        }
        for (label, range) in [
            ("speed_range", self.speed_range),
            ("yaw_rate_range", self.yaw_rate_range),
        ] {
            if !(range[0] <= range[1]) || !range[0].is_finite() || !range[1].is_finite() {
                return Err(Error::Config(format!("{label} must be a finite lo <= hi pair")));
            }
        }
        if self.speed_range[0] < 0.0 {
            return Err(Error::Config("speeds cannot be negative".into()));
        }
        if !(self.motion_noise >= 0.0) || !(self.yaw_noise >= 0.0) {
            return Err(Error::Config("noise levels cannot be negative".into()));
        }
        if !(self.clutter_radius > 0.0) {
            return Err(Error::Config("clutter_radius must be positive".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("at least one category is required".into()));
        }
        for c in &self.categories {
            for (label, r) in [("length", c.length), ("width", c.width), ("height", c.height)] {
                if !(r[0] > 0.0 && r[0] <= r[1]) {
                    return Err(Error::Config(format!(
                        "category `{}`: {label} range must be positive lo <= hi",
                        c.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sample `n` points uniformly over a box's surface, weighting each of
/// the six faces by its area.
pub fn sample_box_surface(b: &Box3D, n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    let [l, w, h] = b.size();
    // Face order: +x, -x, +y, -y, +z, -z.
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let (sin, cos) = b.yaw().sin_cos();
    let c = b.center();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.uniform(0.0, total);
        let mut face = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a || i == areas.len() - 1 {
                face = i;
                break;
            }
            pick -= a;
        }
        let u = rng.uniform(-0.5, 0.5);
        let v = rng.uniform(-0.5, 0.5);
        let local = match face {
            0 => [l / 2.0, u * w, v * h],
            1 => [-l / 2.0, u * w, v * h],
            2 => [u * l, w / 2.0, v * h],
            3 => [u * l, -w / 2.0, v * h],
            4 => [u * l, v * w, h / 2.0],
            _ => [u * l, v * w, -h / 2.0],
        };
        out.push([
            c[0] + cos * local[0] - sin * local[1],
            c[1] + sin * local[0] + cos * local[1],
            c[2] + local[2],
        ]);
    }
    out
}

/// Hide the `fraction` of points that lie deepest along a random
/// horizontal direction — a crude stand-in for one side of the object
/// being blocked from view. Keeps point order otherwise.
pub fn occlude(points: &[[f64; 3]], fraction: f64, rng: &mut Rng) -> Vec<[f64; 3]> {
    if fraction <= 0.0 || points.is_empty() {
        return points.to_vec();
    }
    let theta = rng.uniform(0.0, std::f64::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let keep = points.len() - ((points.len() as f64) * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let pa = points[a][0] * cos + points[a][1] * sin;
        let pb = points[b][0] * cos + points[b][1] * sin;
        pa.partial_cmp(&pb).expect("finite projections").then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept.into_iter().map(|i| points[i]).collect()
}

/// Generate one sequence. The RNG stream depends only on
/// `(master_seed, sequence_index)`, never on other sequences.
pub fn generate_sequence(
    config: &SimConfig,
    category_index: usize,
    sequence_index: usize,
    master_seed: u64,
) -> Result<LabeledSequence> {
    let cat = config
        .categories
        .get(category_index)
        .ok_or_else(|| Error::invalid(format!("category index {category_index} out of range")))?;
    let mut rng = Rng::seed(derive_seed(master_seed, sequence_index as u64));

    let size = [
        rng.uniform(cat.length[0], cat.length[1]),
        rng.uniform(cat.width[0], cat.width[1]),
        rng.uniform(cat.height[0], cat.height[1]),
    ];
    let mut center = [
        rng.uniform(-10.0, 10.0),
        rng.uniform(-10.0, 10.0),
        size[2] / 2.0,
    ];
    let mut yaw = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
    let speed = rng.uniform(config.speed_range[0], config.speed_range[1]);
    let yaw_rate = rng.uniform(config.yaw_rate_range[0], config.yaw_rate_range[1]);

    let mut frames = Vec::with_capacity(config.frames_per_sequence);
    for _ in 0..config.frames_per_sequence {
        let gt = Box3D::new(center, size, yaw)?;
        let object = occlude(
            &sample_box_surface(&gt, config.surface_points, &mut rng),
            config.occlusion,
            &mut rng,
        );
        let mut points = object;
        for _ in 0..config.clutter_points {
            points.push([
                center[0] + rng.uniform(-config.clutter_radius, config.clutter_radius),
                center[1] + rng.uniform(-config.clutter_radius, config.clutter_radius),
                rng.uniform(0.0, size[2] + 1.0),
            ]);
        }
        frames.push(LabeledFrame {
            cloud: PointCloud::new(points)?,
            gt,
        });

        center[0] += speed * yaw.cos() + rng.normal(config.motion_noise);
        center[1] += speed * yaw.sin() + rng.normal(config.motion_noise);
        yaw = wrap_angle(yaw + yaw_rate + rng.normal(config.yaw_noise));
    }
    Ok(LabeledSequence {
        id: format!("seq_{sequence_index:04}"),
        category: cat.name.clone(),
        frames,
    })
}

/// Generate the full dataset in parallel; categories rotate round-robin
/// across sequences.
pub fn generate_dataset(config: &SimConfig, master_seed: u64) -> Result<Vec<LabeledSequence>> {
    config.validate()?;
    (0..config.sequences)
        .into_par_iter()
        .map(|i| generate_sequence(config, i % config.categories.len(), i, master_seed))
        .collect()
}
