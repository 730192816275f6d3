//! Oriented 3D boxes, rigid motions about the vertical axis, and exact
//! rotated-box IoU.
//!
//! Everything here is pure math on plain values: no allocation beyond the
//! polygon scratch in [`iou3d`], no global state, safe to call from any
//! thread.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// An upright oriented box: center, size `(length, width, height)` and a
/// yaw rotation about the vertical (z) axis.
///
/// `length` runs along the box's heading (local x when yaw = 0), `width`
/// across it (local y), `height` vertically. Yaw is stored wrapped to
/// (-pi, pi]; sizes are strictly positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord", into = "BoxRecord")]
pub struct Box3D {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

/// On-disk form of [`Box3D`]; deserialization re-validates invariants.
#[derive(Serialize, Deserialize)]
struct BoxRecord {
    center: [f64; 3],
    size: [f64; 3],
    yaw: f64,
}

impl TryFrom<BoxRecord> for Box3D {
    type Error = Error;
    fn try_from(r: BoxRecord) -> Result<Self> {
        Box3D::new(r.center, r.size, r.yaw)
    }
}

impl From<Box3D> for BoxRecord {
    fn from(b: Box3D) -> Self {
        BoxRecord {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        }
    }
}

impl Box3D {
    /// Build a box, validating that all components are finite and the
    /// three sizes are strictly positive. Yaw is wrapped to (-pi, pi].
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        let finite =
            center.iter().all(|v| v.is_finite()) && size.iter().all(|v| v.is_finite()) && yaw.is_finite();
        if !finite {
            return Err(Error::invalid("box has non-finite components"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!(
                "box sizes must be strictly positive, got {size:?}"
            )));
        }
        Ok(Box3D {
            center,
            size,
            yaw: wrap_angle(yaw),
        })
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    /// `(length, width, height)`.
    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    /// Yaw about the vertical axis, always in (-pi, pi].
    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The same box translated by `delta` (size and yaw unchanged).
    pub fn translated(&self, delta: [f64; 3]) -> Box3D {
        Box3D {
            center: [
                self.center[0] + delta[0],
                self.center[1] + delta[1],
                self.center[2] + delta[2],
            ],
            size: self.size,
            yaw: self.yaw,
        }
    }

    /// The same center/yaw with all three sizes scaled by `factor`.
    /// Used for search-region expansion.
    pub(crate) fn scaled(&self, factor: f64) -> Box3D {
        Box3D {
            center: self.center,
            size: [self.size[0] * factor, self.size[1] * factor, self.size[2] * factor],
            yaw: self.yaw,
        }
    }

    /// World coordinates of the 8 corners. Corners come in a fixed local
    /// order (x then y then z sign patterns), so corresponding corners of
    /// two boxes can be compared index by index.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (l2, w2, h2) = (self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let mut out = [[0.0; 3]; 8];
        let mut i = 0;
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    let (x, y, z) = (sx * l2, sy * w2, sz * h2);
                    out[i] = [
                        self.center[0] + c * x - s * y,
                        self.center[1] + s * x + c * y,
                        self.center[2] + z,
                    ];
                    i += 1;
                }
            }
        }
        out
    }

    /// Map a world point into this box's local frame.
    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]]
    }

    /// Whether a world point lies inside the box. The boundary counts as
    /// inside.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= self.size[0] / 2.0
            && q[1].abs() <= self.size[1] / 2.0
            && q[2].abs() <= self.size[2] / 2.0
    }

    /// The box footprint's 4 corners in the horizontal plane,
    /// counter-clockwise.
    fn footprint(&self) -> [[f64; 2]; 4] {
        let (l2, w2) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let (s, c) = self.yaw.sin_cos();
        let rot = |x: f64, y: f64| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        };
        [rot(l2, w2), rot(-l2, w2), rot(-l2, -w2), rot(l2, -w2)]
    }
}

/// A rigid motion in the horizontal plane: rotate by `rotation` about a
/// vertical axis through a caller-chosen pivot, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    /// Yaw delta in radians.
    pub rotation: f64,
    /// Translation applied after the rotation.
    pub translation: [f64; 3],
}

impl RigidMotion {
    /// The motion that undoes this one *about the same pivot*:
    /// applying `m` then `m.inverse()` (with one pivot) is the identity.
    pub fn inverse(&self) -> RigidMotion {
        let (s, c) = (-self.rotation).sin_cos();
        let t = self.translation;
        RigidMotion {
            rotation: -self.rotation,
            translation: [-(c * t[0] - s * t[1]), -(s * t[0] + c * t[1]), -t[2]],
        }
    }
}

/// The motion carrying box `from` onto box `to`: yaw delta wrapped to
/// (-pi, pi] plus the center translation. Applying it to `from`'s corners
/// with pivot `from.center()` lands them on `to`'s corners.
pub fn relative_motion(from: &Box3D, to: &Box3D) -> RigidMotion {
    RigidMotion {
        rotation: wrap_angle(to.yaw - from.yaw),
        translation: [
            to.center[0] - from.center[0],
            to.center[1] - from.center[1],
            to.center[2] - from.center[2],
        ],
    }
}

/// Apply a rigid motion to a point set: rotate about the vertical axis
/// through `pivot`, then translate.
pub fn transform_points(points: &[[f64; 3]], motion: &RigidMotion, pivot: [f64; 3]) -> Vec<[f64; 3]> {
    let (s, c) = motion.rotation.sin_cos();
    let t = motion.translation;
    points
        .iter()
        .map(|p| {
            let dx = p[0] - pivot[0];
            let dy = p[1] - pivot[1];
            [
                pivot[0] + c * dx - s * dy + t[0],
                pivot[1] + s * dx + c * dy + t[1],
                p[2] + t[2],
            ]
        })
        .collect()
}

/// Euclidean distance between two box centers.
pub fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    let d = [
        a.center[0] - b.center[0],
        a.center[1] - b.center[1],
        a.center[2] - b.center[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

/// Membership flags for a point set against a box (boundary inclusive).
pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> Vec<bool> {
    points.iter().map(|&p| b.contains(p)).collect()
}

/// Exact intersection-over-union of two oriented boxes: footprint overlap
/// via convex polygon clipping times vertical overlap. Degenerate
/// footprint intersections (area below 1e-12) count as zero overlap.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let a_top = a.center[2] + a.size[2] / 2.0;
    let a_bot = a.center[2] - a.size[2] / 2.0;
    let b_top = b.center[2] + b.size[2] / 2.0;
    let b_bot = b.center[2] - b.size[2] / 2.0;
    let dz = a_top.min(b_top) - a_bot.max(b_bot);
    if dz <= 0.0 {
        return 0.0;
    }
    let area = convex_intersection_area(&a.footprint(), &b.footprint());
    if area < 1e-12 {
        return 0.0;
    }
    let inter = area * dz;
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Signed side of point `p` relative to the directed edge `a -> b`
/// (positive = left, which is inside for counter-clockwise polygons).
fn edge_side(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Intersection of segment `p -> q` with the infinite line through `a, b`.
fn line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let sp = edge_side(a, b, p);
    let sq = edge_side(a, b, q);
    // Callers only invoke this when p and q straddle the line, so the
    // denominator cannot vanish.
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Area of the intersection of two convex counter-clockwise quads via
/// Sutherland-Hodgman clipping.
fn convex_intersection_area(subject: &[[f64; 2]; 4], clip: &[[f64; 2]; 4]) -> f64 {
    let mut polygon: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..4 {
        if polygon.is_empty() {
            return 0.0;
        }
        let a = clip[i];
        let b = clip[(i + 1) % 4];
        let input = std::mem::take(&mut polygon);
        let mut prev = *input.last().expect("non-empty polygon");
        for &cur in &input {
            let prev_in = edge_side(a, b, prev) >= 0.0;
            let cur_in = edge_side(a, b, cur) >= 0.0;
            if cur_in {
                if !prev_in {
                    polygon.push(line_intersection(prev, cur, a, b));
                }
                polygon.push(cur);
            } else if prev_in {
                polygon.push(line_intersection(prev, cur, a, b));
            }
            prev = cur;
        }
    }
    polygon_area(&polygon)
}

/// Shoelace area (absolute value, so winding does not matter).
fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..pts.len() {
        let j = (i + 1) % pts.len();
        acc += pts[i][0] * pts[j][1] - pts[j][0] * pts[i][1];
    }
    acc.abs() / 2.0
}
