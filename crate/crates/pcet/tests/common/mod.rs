//! Independent oracles for the acceptance suite: deliberately separate
//! implementations of quantities the library computes analytically, so
//! agreement between the two is evidence rather than tautology.

use pcet::cloud::Rng;
use pcet::geom::Box3D;
use pcet::tensor::{Graph, ParamId, ParamStore, Tensor, Value};

/// Estimate 3D IoU by uniform rejection sampling over the joint
/// axis-aligned bounding box of both boxes.
pub fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut Rng) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for bx in [a, b] {
        for corner in bx.corners() {
            for d in 0..3 {
                lo[d] = lo[d].min(corner[d]);
                hi[d] = hi[d].max(corner[d]);
            }
        }
    }
    let mut in_both = 0u64;
    let mut in_either = 0u64;
    for _ in 0..samples {
        let p = [
            rng.uniform(lo[0], hi[0]),
            rng.uniform(lo[1], hi[1]),
            rng.uniform(lo[2], hi[2]),
        ];
        let ia = a.contains(p);
        let ib = b.contains(p);
        if ia && ib {
            in_both += 1;
        }
        if ia || ib {
            in_either += 1;
        }
    }
    if in_either == 0 {
        0.0
    } else {
        in_both as f64 / in_either as f64
    }
}

/// Greedy farthest-point sampling written the slow, obvious way: every
/// round recomputes each point's distance to the whole picked set from
/// scratch. Ties break toward the lowest index (strict `>` while
/// scanning indices in order).
pub fn brute_force_fps(pts: &[[f64; 3]], k: usize, seed_index: usize) -> Vec<usize> {
    let mut picked = vec![seed_index];
    while picked.len() < k {
        let mut far_idx = 0usize;
        let mut far = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let mut nearest = f64::INFINITY;
            for &j in &picked {
                let q = pts[j];
                let dx = p[0] - q[0];
                let dy = p[1] - q[1];
                let dz = p[2] - q[2];
                let d = dx * dx + dy * dy + dz * dz;
                if d < nearest {
                    nearest = d;
                }
            }
            if nearest > far {
                far = nearest;
                far_idx = i;
            }
        }
        picked.push(far_idx);
    }
    picked
}

/// Success AUC by dense midpoint threshold sweep over t in [0, 1]:
/// average of `fraction(overlap > t)`, scaled to [0, 100].
pub fn sweep_success(overlaps: &[f64], thresholds: usize) -> f64 {
    let k = thresholds as f64;
    let mut acc = 0.0;
    for i in 0..thresholds {
        let t = (i as f64 + 0.5) / k;
        acc += overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64;
    }
    100.0 * acc / k
}

/// Precision AUC by dense midpoint threshold sweep over t in [0, 2] m:
/// average of `fraction(error < t)`, scaled to [0, 100].
pub fn sweep_precision(errors: &[f64], thresholds: usize) -> f64 {
    let k = thresholds as f64;
    let mut acc = 0.0;
    for i in 0..thresholds {
        let t = 2.0 * (i as f64 + 0.5) / k;
        acc += errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64;
    }
    100.0 * acc / k
}

/// Rotate a point about the z axis.
pub fn rotate_z(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Outcome of one finite-difference sweep.
pub struct FdReport {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `build` must reconstruct the identical scalar loss from the current
/// store contents every time it is called. With `limit_per_tensor` set,
/// only the entries with the largest analytic magnitude in each listed
/// tensor are probed — for losses through the full network this keeps
/// the probe count sane and sticks to the best-conditioned entries,
/// where the central-difference estimate itself is trustworthy.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    limit_per_tensor: Option<usize>,
    build: &dyn Fn(&mut Graph, &ParamStore) -> pcet::Result<Value>,
) -> pcet::Result<FdReport> {
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for &id in ids {
        let analytic = match grads.param(id) {
            Some(t) => t.clone(),
            None => continue,
        };
        let base = store.value(id).clone();
        let (rows, cols) = (base.rows(), base.cols());
        let mut entries: Vec<(usize, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .collect();
        if let Some(limit) = limit_per_tensor {
            entries.sort_by(|a, b| {
                analytic
                    .get(b.0, b.1)
                    .abs()
                    .partial_cmp(&analytic.get(a.0, a.1).abs())
                    .expect("finite gradients")
            });
            entries.truncate(limit);
        }
        for (r, c) in entries {
            let x = base.get(r, c);
            let mut probe = |v: f64| -> pcet::Result<f64> {
                let mut data = base.data().to_vec();
                data[r * cols + c] = v;
                store.set_value(id, Tensor::matrix(rows, cols, data)?)?;
                let mut g = Graph::new();
                let loss = build(&mut g, store)?;
                g.value(loss).item()
            };
            let plus = probe(x + h)?;
            let minus = probe(x - h)?;
            store.set_value(id, base.clone())?;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(r, c);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(FdReport { checked, max_rel })
}
