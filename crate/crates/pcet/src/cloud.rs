//! Point clouds, the crate's seeded RNG, farthest point sampling, and the
//! crop/resample operations that feed fixed-size point budgets to the
//! network.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{relative_motion, transform_points, Box3D};

/// Deterministic RNG used everywhere randomness is needed.
///
/// The generator is ChaCha12 seeded from a 64-bit integer, so an identical
/// seed produces an identical draw sequence on every platform and run.
/// Independent streams are derived from a master seed with
/// [`derive_seed`], a splitmix64 mix.
pub struct Rng(ChaCha12Rng);

/// One splitmix64 scramble step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for an independent numbered stream under a master seed:
/// `splitmix64(master XOR (stream + 1) * golden_gamma)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl Rng {
    /// Seed a fresh generator.
    pub fn seed(seed: u64) -> Rng {
        Rng(ChaCha12Rng::seed_from_u64(seed))
    }

    /// A generator for numbered sub-stream `stream` of this master seed.
    pub fn stream(master: u64, stream: u64) -> Rng {
        Rng::seed(derive_seed(master, stream))
    }

    /// Uniform draw in `[lo, hi)`; a degenerate range returns `lo`
    /// without consuming randomness.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.0.gen_range(lo..hi)
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Zero-mean Gaussian draw with the given standard deviation.
    /// A non-finite or negative std is a caller bug, so it panics.
    pub fn normal(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std).expect("valid std").sample(&mut self.0)
    }

    /// `k` distinct indices drawn uniformly from `[0, n)`, returned in
    /// ascending order so downstream use preserves input order.
    pub fn distinct_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut picked = rand::seq::index::sample(&mut self.0, n, k).into_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.0.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.0.try_fill_bytes(dest)
    }
}

/// An unordered set of 3D points, optionally with per-point intensity.
/// All coordinates are finite by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    /// Build a cloud without intensities, validating finiteness.
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud has non-finite coordinates"));
        }
        Ok(PointCloud {
            points,
            intensity: None,
        })
    }

    /// Build a cloud with one intensity per point.
    pub fn with_intensity(points: Vec<[f64; 3]>, intensity: Vec<f64>) -> Result<Self> {
        if intensity.len() != points.len() {
            return Err(Error::invalid(format!(
                "intensity count {} does not match point count {}",
                intensity.len(),
                points.len()
            )));
        }
        if intensity.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point cloud has non-finite intensities"));
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.intensity = Some(intensity);
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    /// The same cloud translated by `delta`.
    pub fn translated(&self, delta: [f64; 3]) -> PointCloud {
        PointCloud {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]])
                .collect(),
            intensity: self.intensity.clone(),
        }
    }

    /// Select a subset (or multiset) of points by index.
    fn gather(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|w| idx.iter().map(|&i| w[i]).collect()),
        }
    }
}

/// Greedy farthest point sampling: starting from `seed_index`, repeatedly
/// pick the point with the largest distance to the already-picked set.
/// Distance ties break to the lowest index. Returns the `k` picked
/// indices in pick order; picks are unique.
pub fn fps(cloud: &PointCloud, k: usize, seed_index: usize) -> Result<Vec<usize>> {
    fps_points(cloud.points(), k, seed_index)
}

/// [`fps`] on a raw coordinate slice (used by the backbone, whose seed
/// coordinates are not wrapped in a `PointCloud`).
pub(crate) fn fps_points(pts: &[[f64; 3]], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = pts.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "fps requires 1 <= k <= point count, got k={k} for {n} points"
        )));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!(
            "fps seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut picked = Vec::with_capacity(k);
    picked.push(seed_index);
    // Squared distance from each point to its nearest picked point.
    let mut best = vec![f64::INFINITY; n];
    let mut last = seed_index;
    for _ in 1..k {
        let lp = pts[last];
        let mut far_idx = 0;
        let mut far_dist = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(*p, lp);
            if d < best[i] {
                best[i] = d;
            }
            if best[i] > far_dist {
                far_dist = best[i];
                far_idx = i;
            }
        }
        picked.push(far_idx);
        // Mark as taken so it can never win again (distance 0 to itself).
        best[far_idx] = 0.0;
        last = far_idx;
    }
    Ok(picked)
}

fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Resample a cloud to exactly `k` points: a uniform subset without
/// replacement when the cloud is large enough (input order preserved),
/// otherwise all original points plus uniform draws with replacement.
pub fn resample_to(cloud: &PointCloud, k: usize, rng: &mut Rng) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::invalid("resample target must be at least 1"));
    }
    let n = cloud.len();
    if n == 0 {
        return Err(Error::invalid("cannot resample an empty cloud"));
    }
    let idx = if n >= k {
        rng.distinct_indices(n, k)
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.extend((0..k - n).map(|_| rng.index(n)));
        idx
    };
    Ok(cloud.gather(&idx))
}

/// A cropped, fixed-size cloud. `degenerate` marks crops whose region
/// contained no points at all (the budget is filled with box centers).
#[derive(Debug, Clone)]
pub struct Crop {
    pub cloud: PointCloud,
    pub degenerate: bool,
}

/// Keep the points inside `region` (boundary inclusive) and resample the
/// survivors to exactly `k` points. An empty crop yields `k` copies of
/// the region center, flagged degenerate.
pub fn crop_and_fix(cloud: &PointCloud, region: &Box3D, k: usize, rng: &mut Rng) -> Result<Crop> {
    if k == 0 {
        return Err(Error::invalid("crop budget must be at least 1"));
    }
    let keep: Vec<usize> = cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, &p)| region.contains(p))
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        let filler = PointCloud {
            points: vec![region.center(); k],
            intensity: cloud.intensity().map(|_| vec![0.0; k]),
        };
        return Ok(Crop {
            cloud: filler,
            degenerate: true,
        });
    }
    let inside = cloud.gather(&keep);
    Ok(Crop {
        cloud: resample_to(&inside, k, rng)?,
        degenerate: false,
    })
}

/// Merge the previous frame's target crop with the current one: crop
/// `crop_k` points around each box, rigidly carry the previous crop onto
/// the current box pose (rotation about the previous box center, then
/// translation), and concatenate previous-aligned points first.
pub fn build_merged_template(
    prev_cloud: &PointCloud,
    prev_box: &Box3D,
    cur_cloud: &PointCloud,
    cur_box: &Box3D,
    crop_k: usize,
    rng: &mut Rng,
) -> Result<PointCloud> {
    let prev = crop_and_fix(prev_cloud, prev_box, crop_k, rng)?;
    let cur = crop_and_fix(cur_cloud, cur_box, crop_k, rng)?;
    let motion = relative_motion(prev_box, cur_box);
    let aligned = transform_points(prev.cloud.points(), &motion, prev_box.center());

    let mut points = aligned;
    points.extend_from_slice(cur.cloud.points());
    let intensity = match (prev.cloud.intensity(), cur.cloud.intensity()) {
        (Some(a), Some(b)) => {
            let mut w = a.to_vec();
            w.extend_from_slice(b);
            Some(w)
        }
        _ => None,
    };
    let mut merged = PointCloud::new(points)?;
    merged.intensity = intensity;
    Ok(merged)
}

/// The search region around a reference box: same center and yaw, all
/// sizes scaled by `factor` (which must be at least 1).
pub fn expand_search_region(reference: &Box3D, factor: f64) -> Result<Box3D> {
    if !(factor >= 1.0) {
        return Err(Error::invalid(format!(
            "search expansion factor must be >= 1, got {factor}"
        )));
    }
    Ok(reference.scaled(factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_cloud(n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|i| [i as f64, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn cloud_construction_validates_inputs() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::with_intensity(vec![[0.0; 3]], vec![0.1, 0.2]).is_err());
        assert!(PointCloud::with_intensity(vec![[0.0; 3]], vec![f64::INFINITY]).is_err());
        let c = PointCloud::with_intensity(vec![[1.0, 2.0, 3.0]], vec![0.5]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.intensity(), Some(&[0.5][..]));
    }

    #[test]
    fn same_seed_gives_identical_draws_and_streams_differ() {
        let mut a = Rng::seed(7);
        let mut b = Rng::seed(7);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(derive_seed(7, 0), derive_seed(7, 0));
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
    }

    #[test]
    fn fps_on_collinear_points_breaks_tie_to_lowest_index() {
        // Points at x = 0,1,2,3; after picking 0 then 3, indices 1 and 2
        // are both at min-distance 1, so the tie goes to index 1.
        let cloud = line_cloud(4);
        let picks = fps(&cloud, 3, 0).unwrap();
        assert_eq!(picks, vec![0, 3, 1]);
    }

    #[test]
    fn fps_with_k_equal_to_count_returns_every_index_once() {
        let cloud = line_cloud(9);
        let mut picks = fps(&cloud, 9, 4).unwrap();
        picks.sort_unstable();
        assert_eq!(picks, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        let cloud = line_cloud(4);
        assert!(fps(&cloud, 0, 0).is_err());
        assert!(fps(&cloud, 5, 0).is_err());
        assert!(fps(&cloud, 2, 4).is_err());
    }

    #[test]
    fn fps_spreads_picks_wider_than_uniform_sampling_on_clustered_data() {
        // Two tight clusters far apart; FPS must bridge them, so its
        // minimum pairwise pick distance beats uniform sampling on
        // average over 100 trials.
        let mut rng = Rng::seed(11);
        let mut pts = Vec::new();
        for _ in 0..60 {
            pts.push([rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5), 0.0]);
        }
        for _ in 0..60 {
            pts.push([10.0 + rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5), 0.0]);
        }
        let cloud = PointCloud::new(pts).unwrap();
        let min_pairwise = |idx: &[usize]| {
            let mut best = f64::INFINITY;
            for i in 0..idx.len() {
                for j in i + 1..idx.len() {
                    best = best.min(sq_dist(cloud.points()[idx[i]], cloud.points()[idx[j]]));
                }
            }
            best
        };
        let k = 8;
        let mut fps_sum = 0.0;
        let mut uni_sum = 0.0;
        for trial in 0..100 {
            let seed_idx = rng.index(cloud.len());
            fps_sum += min_pairwise(&fps(&cloud, k, seed_idx).unwrap());
            let _ = trial;
            uni_sum += min_pairwise(&rng.distinct_indices(cloud.len(), k));
        }
        assert!(
            fps_sum / 100.0 > uni_sum / 100.0,
            "fps mean min-pairwise {} <= uniform {}",
            fps_sum / 100.0,
            uni_sum / 100.0
        );
    }

    #[test]
    fn resample_subset_preserves_membership_and_exact_count() {
        let cloud = line_cloud(20);
        let mut rng = Rng::seed(3);
        let out = resample_to(&cloud, 8, &mut rng).unwrap();
        assert_eq!(out.len(), 8);
        for p in out.points() {
            assert!(cloud.points().contains(p));
        }
        // Deterministic under the same seed.
        let again = resample_to(&cloud, 8, &mut Rng::seed(3)).unwrap();
        let direct = resample_to(&cloud, 8, &mut Rng::seed(3)).unwrap();
        assert_eq!(again, direct);
    }

    #[test]
    fn resample_with_exact_count_returns_the_input_set_unchanged() {
        let cloud = line_cloud(6);
        let out = resample_to(&cloud, 6, &mut Rng::seed(0)).unwrap();
        assert_eq!(out, cloud);
    }

    #[test]
    fn resample_upsamples_by_duplicating_existing_points() {
        let cloud = line_cloud(3);
        let out = resample_to(&cloud, 7, &mut Rng::seed(5)).unwrap();
        assert_eq!(out.len(), 7);
        // All originals survive, fills are copies of originals.
        for p in cloud.points() {
            assert!(out.points().contains(p));
        }
        for p in out.points() {
            assert!(cloud.points().contains(p));
        }
        assert!(resample_to(&cloud, 0, &mut Rng::seed(0)).is_err());
    }

    #[test]
    fn crop_keeps_only_points_inside_the_region() {
        let cloud = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [0.4, 0.1, 0.0],
            [5.0, 0.0, 0.0],
            [-0.3, -0.2, 0.1],
        ])
        .unwrap();
        let region = Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap();
        let crop = crop_and_fix(&cloud, &region, 3, &mut Rng::seed(2)).unwrap();
        assert!(!crop.degenerate);
        assert_eq!(crop.cloud.len(), 3);
        for p in crop.cloud.points() {
            assert!(region.contains(*p));
        }
    }

    #[test]
    fn empty_crop_fills_with_center_copies_and_flags_degenerate() {
        let cloud = line_cloud(5);
        let region = Box3D::new([100.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
        let crop = crop_and_fix(&cloud, &region, 4, &mut Rng::seed(2)).unwrap();
        assert!(crop.degenerate);
        assert_eq!(crop.cloud.len(), 4);
        for p in crop.cloud.points() {
            assert_eq!(*p, [100.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn merged_template_aligns_previous_crop_onto_current_pose() {
        // A rigidly moving box: points sampled inside the previous box,
        // carried by the true motion, must land inside the current box
        // (allow a hair of slack for rounding).
        let prev_box = Box3D::new([1.0, 2.0, 0.5], [2.0, 1.0, 1.0], 0.3).unwrap();
        let cur_box = Box3D::new([2.5, 2.5, 0.6], [2.0, 1.0, 1.0], 0.8).unwrap();
        let mut rng = Rng::seed(9);
        let mut pts = Vec::new();
        for _ in 0..40 {
            let local = [
                rng.uniform(-0.9, 0.9),
                rng.uniform(-0.45, 0.45),
                rng.uniform(-0.45, 0.45),
            ];
            let (s, c) = prev_box.yaw().sin_cos();
            pts.push([
                prev_box.center()[0] + c * local[0] - s * local[1],
                prev_box.center()[1] + s * local[0] + c * local[1],
                prev_box.center()[2] + local[2],
            ]);
        }
        let prev_cloud = PointCloud::new(pts).unwrap();
        let cur_cloud = PointCloud::new(vec![cur_box.center(); 10]).unwrap();
        let merged =
            build_merged_template(&prev_cloud, &prev_box, &cur_cloud, &cur_box, 16, &mut rng).unwrap();
        assert_eq!(merged.len(), 32);
        let tolerant = Box3D::new(
            cur_box.center(),
            cur_box.size().map(|s| s + 1e-6),
            cur_box.yaw(),
        )
        .unwrap();
        for p in &merged.points()[..16] {
            assert!(tolerant.contains(*p), "aligned point {p:?} escaped current box");
        }
    }

    #[test]
    fn merged_template_with_empty_previous_crop_repeats_current_center() {
        let prev_box = Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
        let cur_box = Box3D::new([3.0, 1.0, 0.0], [1.0; 3], 0.5).unwrap();
        let prev_cloud = PointCloud::new(vec![[50.0, 50.0, 50.0]]).unwrap();
        let cur_cloud = PointCloud::new(vec![cur_box.center(); 4]).unwrap();
        let merged =
            build_merged_template(&prev_cloud, &prev_box, &cur_cloud, &cur_box, 8, &mut Rng::seed(1))
                .unwrap();
        for p in &merged.points()[..8] {
            for k in 0..3 {
                assert!((p[k] - cur_box.center()[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn search_expansion_scales_sizes_and_rejects_shrink_factors() {
        let b = Box3D::new([1.0, 2.0, 3.0], [4.0, 2.0, 1.5], 0.4).unwrap();
        let e = expand_search_region(&b, 4.0).unwrap();
        assert_eq!(e.size(), [16.0, 8.0, 6.0]);
        assert_eq!(e.center(), b.center());
        assert_eq!(e.yaw(), b.yaw());
        // Every corner of the original box stays inside the expansion.
        for corner in b.corners() {
            assert!(e.contains(corner));
        }
        assert!(expand_search_region(&b, 0.99).is_err());
        assert!(expand_search_region(&b, f64::NAN).is_err());
    }
}
