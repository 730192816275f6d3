//! Three-stage training: (1) the coarse matching pipeline, (2) the
//! merged-cloud branch feeding the shared refine network, (3) the
//! restoration block distilled against the frozen merged branch. Stages
//! hand off through checkpoints whose stage tag is verified, so they can
//! only run in order.

use crate::cloud::{build_merged_template, crop_and_fix, expand_search_region, PointCloud, Rng};
use crate::dataset::LabeledSequence;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Box3D};
use crate::heads::{decode_box, tkt_loss, CandidateSet};
use crate::model::{to_reference_frame, Model, ModelConfig, PassCounter};
use crate::net::FeatureSet;
use crate::tensor::{adam_step, AdamState, Graph, Tensor, Value};
use std::fs;
use std::path::Path;

/// Optimization knobs for the three stages.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    pub stage3_iterations: usize,
    /// Base learning rate for stages 1 and 2.
    pub learning_rate: f64,
    /// Stage 3 runs at its own (lower) rate.
    pub stage3_learning_rate: f64,
    /// The learning rate halves every this many iterations.
    pub halve_every: usize,
    /// Regression weight in the merged-branch stage.
    pub stage2_reg_weight: f64,
    /// Regression weight in the refine stage.
    pub stage3_reg_weight: f64,
    /// Distillation weight in the refine stage.
    pub kl_weight: f64,
    /// Gaussian noise on the reference box center (meters), simulating
    /// an imperfect previous prediction.
    pub reference_jitter_xy: f64,
    /// Gaussian noise on the reference yaw (radians).
    pub reference_jitter_yaw: f64,
    /// When true, stage 3 trains only the restoration block, leaving
    /// the coarse pipeline and the shared refine network frozen.
    pub freeze_coarse_in_refine: bool,
}

impl TrainConfig {
    /// Minutes-scale schedule for the desk preset.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            stage1_iterations: 450,
            stage2_iterations: 150,
            stage3_iterations: 200,
            learning_rate: 1e-3,
            stage3_learning_rate: 5e-4,
            halve_every: 150,
            stage2_reg_weight: 0.1,
            stage3_reg_weight: 0.05,
            kl_weight: 1.0,
            reference_jitter_xy: 0.1,
            reference_jitter_yaw: 0.02,
            freeze_coarse_in_refine: true,
        }
    }

    /// Long schedule mirroring the published stage ratio (3:1:1) and
    /// rates; stage 3 fine-tunes everything but the merged branch.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            stage1_iterations: 3000,
            stage2_iterations: 1000,
            stage3_iterations: 1000,
            learning_rate: 1e-3,
            stage3_learning_rate: 5e-4,
            halve_every: 500,
            stage2_reg_weight: 0.1,
            stage3_reg_weight: 0.05,
            kl_weight: 1.0,
            reference_jitter_xy: 0.1,
            reference_jitter_yaw: 0.02,
            freeze_coarse_in_refine: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, lr) in [
            ("learning_rate", self.learning_rate),
            ("stage3_learning_rate", self.stage3_learning_rate),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{label} must be positive, got {lr}")));
            }
        }
        if self.halve_every == 0 {
            return Err(Error::Config("halve_every must be at least 1".into()));
        }
        for (label, w) in [
            ("stage2_reg_weight", self.stage2_reg_weight),
            ("stage3_reg_weight", self.stage3_reg_weight),
            ("kl_weight", self.kl_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{label} must be >= 0, got {w}")));
            }
        }
        if !(self.reference_jitter_xy >= 0.0) || !(self.reference_jitter_yaw >= 0.0) {
            return Err(Error::Config("reference jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Learning rate after `iteration` steps: halves every `halve_every`.
pub fn lr_at(base: f64, iteration: usize, halve_every: usize) -> f64 {
    base * 0.5_f64.powi((iteration / halve_every) as i32)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub stage: u32,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
    pub kl: f64,
}

/// Write the loss history as `iteration,stage,loss,cls,reg,kl`.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut text = String::from("iteration,stage,loss,cls,reg,kl\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.stage, r.loss, r.cls, r.reg, r.kl
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Per-candidate supervision: membership labels, the replicated offset
/// target, and the positive count.
pub struct Targets {
    pub cls: Tensor,
    pub reg: Tensor,
    pub positives: usize,
}

/// Label each seed by ground-truth box membership (`gt` must be
/// expressed in the same frame as `seeds`) and replicate the offset
/// target to every row.
pub fn assign_targets(seeds: &[[f64; 3]], gt: &Box3D, offset: [f64; 4]) -> Result<Targets> {
    let n = seeds.len();
    let mut cls = Vec::with_capacity(n);
    let mut positives = 0;
    for s in seeds {
        let inside = gt.contains(*s);
        positives += inside as usize;
        cls.push(inside as u8 as f64);
    }
    let mut reg = Vec::with_capacity(n * 4);
    for _ in 0..n {
        reg.extend_from_slice(&offset);
    }
    Ok(Targets {
        cls: Tensor::matrix(n, 1, cls)?,
        reg: Tensor::matrix(n, 4, reg)?,
        positives,
    })
}

/// The target offset row from the reference box to ground truth (both
/// world-frame): translation delta plus wrapped yaw delta.
pub fn offset_between(reference: &Box3D, gt: &Box3D) -> [f64; 4] {
    let r = reference.center();
    let g = gt.center();
    [
        g[0] - r[0],
        g[1] - r[1],
        g[2] - r[2],
        wrap_angle(gt.yaw() - reference.yaw()),
    ]
}

/// What remains of `offset` after the coarse result `r` is applied.
pub fn residual_offset(r: &[f64], offset: [f64; 4]) -> [f64; 4] {
    [
        offset[0] - r[0],
        offset[1] - r[1],
        offset[2] - r[2],
        wrap_angle(offset[3] - r[3]),
    ]
}

/// Scalar pieces of one stage loss.
pub struct LossBreakdown {
    pub total: Value,
    pub cls: Value,
    pub reg: Value,
}

/// Classification (bce on all candidates) plus regression: the masked
/// per-candidate squared error (positives only) and the squared error of
/// the aggregated result row, jointly scaled by `reg_weight`. The
/// aggregated term is what trains the aggregation weights and distance
/// logits — they influence the loss in no other way.
pub fn candidate_loss(
    g: &mut Graph,
    cands: &CandidateSet,
    targets: &Targets,
    aggregated: Value,
    reg_weight: f64,
) -> Result<LossBreakdown> {
    let cls = g.bce(cands.scores, &targets.cls)?;
    let target_row = g.input(Tensor::matrix(1, 4, targets.reg.row(0).to_vec())?)?;
    let mut reg = g.mse(aggregated, target_row)?;
    if targets.positives > 0 {
        let rows = g.input(targets.reg.clone())?;
        let diff = g.sub(cands.offsets, rows)?;
        let mask = g.input(targets.cls.clone())?;
        let masked = g.scale_rows(diff, mask)?;
        let sq = g.mul(masked, masked)?;
        let mean = g.mean_all(sq)?;
        // mean_all divided by every row; renormalize to positives only.
        let per_candidate =
            g.scalar_mul(mean, cands.len() as f64 / targets.positives as f64)?;
        reg = g.add(reg, per_candidate)?;
    }
    let weighted = g.scalar_mul(reg, reg_weight)?;
    let total = g.add(cls, weighted)?;
    Ok(LossBreakdown { total, cls, reg })
}

/// Canonical model inputs cropped around a reference box.
pub struct ModelInputs {
    pub template: PointCloud,
    pub search: PointCloud,
    /// True when either crop found no points at all.
    pub degenerate: bool,
}

/// Crop the template (previous frame, expanded reference region) and
/// search (current frame, expanded reference region) clouds and shift
/// both into the reference-centered frame.
pub fn prepare_inputs(
    config: &ModelConfig,
    prev_cloud: &PointCloud,
    cur_cloud: &PointCloud,
    reference: &Box3D,
    rng: &mut Rng,
) -> Result<ModelInputs> {
    let template_region = expand_search_region(reference, config.template_expand)?;
    let t = crop_and_fix(prev_cloud, &template_region, config.template_points, rng)?;
    let search_region = expand_search_region(reference, config.search_expand)?;
    let s = crop_and_fix(cur_cloud, &search_region, config.search_points, rng)?;
    Ok(ModelInputs {
        template: to_reference_frame(&t.cloud, reference),
        search: to_reference_frame(&s.cloud, reference),
        degenerate: t.degenerate || s.degenerate,
    })
}

struct SampleDraw<'a> {
    seq: &'a LabeledSequence,
    frame: usize,
    reference: Box3D,
    gt: Box3D,
}

/// Draw a usable (sequence, frame) pair with a jittered reference box,
/// retrying degenerate crops a bounded number of times.
fn next_sample<'a>(
    dataset: &'a [LabeledSequence],
    config: &ModelConfig,
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<(SampleDraw<'a>, ModelInputs)> {
    for _ in 0..100 {
        let seq = &dataset[rng.index(dataset.len())];
        if seq.frames.len() < 2 {
            continue;
        }
        let frame = 1 + rng.index(seq.frames.len() - 1);
        let prev_gt = &seq.frames[frame - 1].gt;
        let c = prev_gt.center();
        // Vertical drift is a fraction of horizontal drift: objects
        // mostly stay on the ground.
        let reference = Box3D::new(
            [
                c[0] + rng.normal(tc.reference_jitter_xy),
                c[1] + rng.normal(tc.reference_jitter_xy),
                c[2] + rng.normal(tc.reference_jitter_xy * 0.2),
            ],
            prev_gt.size(),
            wrap_angle(prev_gt.yaw() + rng.normal(tc.reference_jitter_yaw)),
        )?;
        let inputs = prepare_inputs(
            config,
            &seq.frames[frame - 1].cloud,
            &seq.frames[frame].cloud,
            &reference,
            rng,
        )?;
        if inputs.degenerate {
            continue;
        }
        let gt = seq.frames[frame].gt;
        return Ok((SampleDraw { seq, frame, reference, gt }, inputs));
    }
    Err(Error::invalid(
        "could not draw a non-degenerate training sample in 100 attempts; \
         the dataset's clouds may not overlap its labels",
    ))
}

fn stage1_trainable(name: &str) -> bool {
    ["backbone.", "augment.", "match.", "coarse."]
        .iter()
        .any(|p| name.starts_with(p))
}

fn stage2_trainable(name: &str) -> bool {
    name.starts_with("src.") || name.starts_with("refine.")
}

fn scalar(g: &Graph, v: Value) -> Result<f64> {
    g.value(v).item()
}

fn run_stage1(
    model: &mut Model,
    dataset: &[LabeledSequence],
    tc: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    let mut sampler = Rng::stream(seed, 11);
    let mut fps_rng = Rng::stream(seed, 12);
    let mut adam = AdamState::new(&model.store);
    let mut rows = Vec::with_capacity(tc.stage1_iterations);
    for it in 0..tc.stage1_iterations {
        let (draw, inputs) = next_sample(dataset, &model.config, tc, &mut sampler)?;
        let mut g = Graph::new();
        let mut passes = PassCounter::default();
        let coarse = model.coarse(
            &mut g,
            &inputs.template,
            &inputs.search,
            Some(&mut fps_rng),
            &mut passes,
        )?;
        let ref_center = draw.reference.center();
        let gt_local = draw
            .gt
            .translated([-ref_center[0], -ref_center[1], -ref_center[2]]);
        let offset = offset_between(&draw.reference, &draw.gt);
        let targets = assign_targets(&coarse.cands.coords, &gt_local, offset)?;
        let lb = candidate_loss(&mut g, &coarse.cands, &targets, coarse.r, 1.0)?;
        let grads = g.backward(lb.total)?;
        adam_step(
            &mut model.store,
            &mut adam,
            &grads,
            lr_at(tc.learning_rate, it, tc.halve_every),
            stage1_trainable,
        )?;
        rows.push(LossRow {
            iteration: it,
            stage: 1,
            loss: scalar(&g, lb.total)?,
            cls: scalar(&g, lb.cls)?,
            reg: scalar(&g, lb.reg)?,
            kl: 0.0,
        });
    }
    Ok(rows)
}

/// Frozen-coarse products reused by stages 2 and 3.
struct FrozenCoarse {
    f_t_features: Tensor,
    f_t_coords: Vec<[f64; 3]>,
    f_c_features: Tensor,
    f_c_coords: Vec<[f64; 3]>,
    w: Tensor,
    r: Tensor,
    merged: PointCloud,
    gt_recentered: Box3D,
    residual: [f64; 4],
}

/// Run the coarse pass without gradients, decode the coarse box, and
/// build the aligned merged cloud plus refine-stage targets.
fn frozen_coarse_products(
    model: &Model,
    draw: &SampleDraw,
    inputs: &ModelInputs,
    fps_rng: &mut Rng,
    crop_rng: &mut Rng,
) -> Result<FrozenCoarse> {
    let mut g = Graph::new();
    let mut passes = PassCounter::default();
    let coarse = model.coarse(
        &mut g,
        &inputs.template,
        &inputs.search,
        Some(fps_rng),
        &mut passes,
    )?;
    let r = g.value(coarse.r).clone();
    let coarse_box = decode_box(&draw.reference, &r)?;
    let prev_cloud = &draw.seq.frames[draw.frame - 1].cloud;
    let cur_cloud = &draw.seq.frames[draw.frame].cloud;
    let merged_world = build_merged_template(
        prev_cloud,
        &draw.reference,
        cur_cloud,
        &coarse_box,
        model.config.merge_crop_points,
        crop_rng,
    )?;
    let ref_center = draw.reference.center();
    let gt_local = draw
        .gt
        .translated([-ref_center[0], -ref_center[1], -ref_center[2]]);
    let r_xyz = [r.get(0, 0), r.get(0, 1), r.get(0, 2)];
    Ok(FrozenCoarse {
        f_t_features: g.value(coarse.f_t.features).clone(),
        f_t_coords: coarse.f_t.coords,
        f_c_features: g.value(coarse.f_c.features).clone(),
        f_c_coords: coarse.f_c.coords,
        w: g.value(coarse.w).clone(),
        gt_recentered: gt_local.translated([-r_xyz[0], -r_xyz[1], -r_xyz[2]]),
        residual: residual_offset(r.data(), offset_between(&draw.reference, &draw.gt)),
        merged: to_reference_frame(&merged_world, &draw.reference),
        r,
    })
}

fn run_stage2(
    model: &mut Model,
    dataset: &[LabeledSequence],
    tc: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    let mut sampler = Rng::stream(seed, 21);
    let mut fps_rng = Rng::stream(seed, 22);
    let mut adam = AdamState::new(&model.store);
    let mut rows = Vec::with_capacity(tc.stage2_iterations);
    for it in 0..tc.stage2_iterations {
        let (draw, inputs) = next_sample(dataset, &model.config, tc, &mut sampler)?;
        let frozen = frozen_coarse_products(model, &draw, &inputs, &mut fps_rng, &mut sampler)?;

        let mut g = Graph::new();
        let mut passes = PassCounter::default();
        let r_xyz = [frozen.r.get(0, 0), frozen.r.get(0, 1), frozen.r.get(0, 2)];
        let src = model.refine_merged(&mut g, &frozen.merged, r_xyz, Some(&mut fps_rng), &mut passes)?;
        let targets = assign_targets(&src.cands.coords, &frozen.gt_recentered, frozen.residual)?;
        let lb = candidate_loss(&mut g, &src.cands, &targets, src.r, tc.stage2_reg_weight)?;
        let grads = g.backward(lb.total)?;
        adam_step(
            &mut model.store,
            &mut adam,
            &grads,
            lr_at(tc.learning_rate, it, tc.halve_every),
            stage2_trainable,
        )?;
        rows.push(LossRow {
            iteration: it,
            stage: 2,
            loss: scalar(&g, lb.total)?,
            cls: scalar(&g, lb.cls)?,
            reg: scalar(&g, lb.reg)?,
            kl: 0.0,
        });
    }
    Ok(rows)
}

fn run_stage3(
    model: &mut Model,
    dataset: &[LabeledSequence],
    tc: &TrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    let mut sampler = Rng::stream(seed, 31);
    let mut fps_rng = Rng::stream(seed, 32);
    let mut adam = AdamState::new(&model.store);
    let mut rows = Vec::with_capacity(tc.stage3_iterations);
    for it in 0..tc.stage3_iterations {
        let (draw, inputs) = next_sample(dataset, &model.config, tc, &mut sampler)?;

        // The merged-branch teacher is always computed without
        // gradients, whatever the freeze setting.
        let frozen = frozen_coarse_products(model, &draw, &inputs, &mut fps_rng, &mut sampler)?;
        let f_src_tensor = {
            let mut g0 = Graph::new();
            let mut p0 = PassCounter::default();
            let r_xyz = [frozen.r.get(0, 0), frozen.r.get(0, 1), frozen.r.get(0, 2)];
            let src = model.refine_merged(&mut g0, &frozen.merged, r_xyz, Some(&mut fps_rng), &mut p0)?;
            g0.value(src.features).clone()
        };

        let mut g = Graph::new();
        let (f_t, f_c, w, r) = if tc.freeze_coarse_in_refine {
            let f_t = FeatureSet {
                features: g.input(frozen.f_t_features.clone())?,
                coords: frozen.f_t_coords.clone(),
            };
            let f_c = FeatureSet {
                features: g.input(frozen.f_c_features.clone())?,
                coords: frozen.f_c_coords.clone(),
            };
            let w = g.input(frozen.w.clone())?;
            let r = g.input(frozen.r.clone())?;
            (f_t, f_c, w, r)
        } else {
            let mut passes = PassCounter::default();
            let live = model.coarse(
                &mut g,
                &inputs.template,
                &inputs.search,
                Some(&mut fps_rng),
                &mut passes,
            )?;
            (live.f_t, live.f_c, live.w, live.r)
        };
        let refine = model.refine_restored(&mut g, &f_t, &f_c, w, r)?;
        let f_src = g.input(f_src_tensor)?;
        let kl = tkt_loss(&mut g, refine.features, f_src)?;
        let targets = assign_targets(&refine.cands.coords, &frozen.gt_recentered, frozen.residual)?;
        let lb = candidate_loss(&mut g, &refine.cands, &targets, refine.r, tc.stage3_reg_weight)?;
        let kl_weighted = g.scalar_mul(kl, tc.kl_weight)?;
        let total = g.add(lb.total, kl_weighted)?;
        let grads = g.backward(total)?;
        let freeze = tc.freeze_coarse_in_refine;
        adam_step(
            &mut model.store,
            &mut adam,
            &grads,
            lr_at(tc.stage3_learning_rate, it, tc.halve_every),
            |name| {
                if freeze {
                    name.starts_with("dfr.")
                } else {
                    !name.starts_with("src.")
                }
            },
        )?;
        rows.push(LossRow {
            iteration: it,
            stage: 3,
            loss: scalar(&g, total)?,
            cls: scalar(&g, lb.cls)?,
            reg: scalar(&g, lb.reg)?,
            kl: scalar(&g, kl)?,
        });
    }
    Ok(rows)
}

fn dataset_is_trainable(dataset: &[LabeledSequence]) -> Result<()> {
    if !dataset.iter().any(|s| s.frames.len() >= 2) {
        return Err(Error::invalid(
            "training needs at least one sequence with two or more frames",
        ));
    }
    Ok(())
}

/// Train one stage. Stage 1 starts from a fresh model seeded by `seed`;
/// stages 2 and 3 must receive the previous stage's checkpoint.
pub fn train_stage(
    config: &ModelConfig,
    tc: &TrainConfig,
    stage: u32,
    dataset: &[LabeledSequence],
    init_checkpoint: Option<&Path>,
    seed: u64,
) -> Result<(Model, Vec<LossRow>)> {
    config.validate()?;
    tc.validate()?;
    dataset_is_trainable(dataset)?;
    let mut model = match stage {
        1 => Model::new(config, &mut Rng::stream(seed, 1))?,
        2 | 3 => {
            let path = init_checkpoint.ok_or_else(|| {
                Error::Config(format!(
                    "stage {stage} requires the checkpoint produced by stage {}; none was given",
                    stage - 1
                ))
            })?;
            let (model, meta) = Model::load_checkpoint(config, path)?;
            if meta.stage != stage - 1 {
                return Err(Error::Config(format!(
                    "stage {stage} must start from a stage-{} checkpoint, but {} was written by \
                     stage {}",
                    stage - 1,
                    path.display(),
                    meta.stage
                )));
            }
            model
        }
        other => {
            return Err(Error::invalid(format!(
                "stage must be 1, 2, or 3, got {other}"
            )))
        }
    };
    let rows = match stage {
        1 => run_stage1(&mut model, dataset, tc, seed)?,
        2 => run_stage2(&mut model, dataset, tc, seed)?,
        _ => run_stage3(&mut model, dataset, tc, seed)?,
    };
    Ok((model, rows))
}

/// Outcome of a full three-stage run.
pub struct TrainSummary {
    pub checkpoints: [std::path::PathBuf; 3],
    pub rows: Vec<LossRow>,
}

/// Run all three stages in order, writing `stage1.ckpt` … `stage3.ckpt`
/// and `loss.csv` into `out_dir`.
pub fn train_all(
    config: &ModelConfig,
    tc: &TrainConfig,
    dataset: &[LabeledSequence],
    out_dir: &Path,
    seed: u64,
    digest: &str,
) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    let paths = [
        out_dir.join("stage1.ckpt"),
        out_dir.join("stage2.ckpt"),
        out_dir.join("stage3.ckpt"),
    ];
    let mut all_rows = Vec::new();
    let mut prev: Option<&Path> = None;
    for stage in 1..=3u32 {
        let idx = (stage - 1) as usize;
        let (model, rows) = train_stage(config, tc, stage, dataset, prev, seed)?;
        model.save_checkpoint(&paths[idx], stage, seed, digest)?;
        log::info!(
            "stage {stage} finished after {} iterations; checkpoint at {}",
            rows.len(),
            paths[idx].display()
        );
        all_rows.extend(rows);
        prev = Some(&paths[idx]);
    }
    write_loss_csv(&out_dir.join("loss.csv"), &all_rows)?;
    Ok(TrainSummary {
        checkpoints: paths,
        rows: all_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_test_config;
    use crate::sim::{generate_dataset, SimConfig};

    fn tiny_sim() -> SimConfig {
        SimConfig {
            sequences: 3,
            frames_per_sequence: 4,
            surface_points: 48,
            clutter_points: 24,
            ..SimConfig::desk()
        }
    }

    fn quick_train_config() -> TrainConfig {
        TrainConfig {
            stage1_iterations: 2,
            stage2_iterations: 2,
            stage3_iterations: 2,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn learning_rate_halves_on_schedule() {
        assert_eq!(lr_at(1e-3, 0, 50), 1e-3);
        assert_eq!(lr_at(1e-3, 49, 50), 1e-3);
        assert_eq!(lr_at(1e-3, 50, 50), 5e-4);
        assert_eq!(lr_at(1e-3, 149, 50), 2.5e-4);
    }

    #[test]
    fn target_assignment_labels_membership_and_replicates_offsets() {
        let gt = Box3D::new([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0).unwrap();
        let seeds = [[1.0, 0.0, 0.0], [5.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let t = assign_targets(&seeds, &gt, [0.1, -0.2, 0.3, 0.05]).unwrap();
        assert_eq!(t.positives, 2);
        assert_eq!(t.cls.data(), &[1.0, 0.0, 1.0]);
        assert_eq!(t.reg.row(2), &[0.1, -0.2, 0.3, 0.05]);
    }

    #[test]
    fn offset_between_wraps_the_yaw_delta() {
        let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 3.0).unwrap();
        let b = Box3D::new([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], -3.0).unwrap();
        let off = offset_between(&a, &b);
        assert_eq!(&off[..3], &[1.0, 2.0, 3.0]);
        // -3 - 3 = -6 wraps to 2*pi - 6.
        assert!((off[3] - (std::f64::consts::TAU - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn candidate_loss_matches_a_hand_computed_case() {
        // Two candidates, one positive. Logits 0 -> bce = ln 2. The
        // positive row offset (1,1,1,1) vs target (0,0,0,0): masked term
        // = (4 / positives=1) * mean over 8 entries = 4/8 * 2 ... work
        // it out: sum of squares over masked rows = 4, mean_all = 4/8,
        // rescale by n/positives = 2 -> 1.0. Aggregated (0.5 each) vs
        // target -> mse = 0.25. reg = 1.25.
        let mut g = Graph::new();
        let cands = CandidateSet {
            scores: g.input(Tensor::zeros(2, 1)).unwrap(),
            distances: g.input(Tensor::zeros(2, 1)).unwrap(),
            offsets: g
                .input(Tensor::matrix(2, 4, vec![1.0; 8]).unwrap())
                .unwrap(),
            coords: vec![[0.0; 3]; 2],
        };
        let targets = Targets {
            cls: Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            reg: Tensor::zeros(2, 4),
            positives: 1,
        };
        let aggregated = g
            .input(Tensor::matrix(1, 4, vec![0.5; 4]).unwrap())
            .unwrap();
        let lb = candidate_loss(&mut g, &cands, &targets, aggregated, 0.1).unwrap();
        let cls = g.value(lb.cls).item().unwrap();
        let reg = g.value(lb.reg).item().unwrap();
        let total = g.value(lb.total).item().unwrap();
        assert!((cls - 2.0_f64.ln()).abs() < 1e-12);
        assert!((reg - 1.25).abs() < 1e-12);
        assert!((total - (cls + 0.125)).abs() < 1e-12);
    }

    #[test]
    fn twenty_steps_on_one_sample_halve_the_coarse_loss() {
        let config = tiny_test_config();
        let mut rng = Rng::seed(5);
        let mut model = Model::new(&config, &mut rng).unwrap();
        let dataset = generate_dataset(&tiny_sim(), 17).unwrap();
        let seq = &dataset[0];
        let reference = seq.frames[0].gt;
        let gt = seq.frames[1].gt;
        let mut crop_rng = Rng::seed(9);
        let inputs = prepare_inputs(
            &config,
            &seq.frames[0].cloud,
            &seq.frames[1].cloud,
            &reference,
            &mut crop_rng,
        )
        .unwrap();

        let mut adam = AdamState::new(&model.store);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..20 {
            let mut g = Graph::new();
            let mut passes = PassCounter::default();
            let coarse = model
                .coarse(&mut g, &inputs.template, &inputs.search, None, &mut passes)
                .unwrap();
            let c = reference.center();
            let gt_local = gt.translated([-c[0], -c[1], -c[2]]);
            let targets =
                assign_targets(&coarse.cands.coords, &gt_local, offset_between(&reference, &gt))
                    .unwrap();
            let lb = candidate_loss(&mut g, &coarse.cands, &targets, coarse.r, 1.0).unwrap();
            let grads = g.backward(lb.total).unwrap();
            adam_step(&mut model.store, &mut adam, &grads, 5e-3, stage1_trainable).unwrap();
            last = g.value(lb.total).item().unwrap();
            first.get_or_insert(last);
        }
        let first = first.unwrap();
        assert!(
            last < 0.5 * first,
            "overfit failed to halve the loss: first {first}, last {last}"
        );
    }

    #[test]
    fn stages_demand_the_previous_checkpoint() {
        let config = tiny_test_config();
        let tc = quick_train_config();
        let dataset = generate_dataset(&tiny_sim(), 23).unwrap();

        let err = train_stage(&config, &tc, 2, &dataset, None, 7).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
        assert!(err.to_string().contains("stage 1"), "got {err}");

        let dir = tempfile::tempdir().unwrap();
        let ckpt1 = dir.path().join("stage1.ckpt");
        let (model, rows) = train_stage(&config, &tc, 1, &dataset, None, 7).unwrap();
        assert_eq!(rows.len(), tc.stage1_iterations);
        model
            .save_checkpoint(&ckpt1, 1, 7, &"0".repeat(64))
            .unwrap();

        // Stage 3 cannot start from a stage-1 checkpoint.
        let err = train_stage(&config, &tc, 3, &dataset, Some(&ckpt1), 7).err().unwrap();
        let text = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(text.contains("stage1.ckpt") && text.contains("stage 1"), "got {text}");

        // In order, everything runs.
        let (m2, rows2) = train_stage(&config, &tc, 2, &dataset, Some(&ckpt1), 7).unwrap();
        assert_eq!(rows2.len(), tc.stage2_iterations);
        let ckpt2 = dir.path().join("stage2.ckpt");
        m2.save_checkpoint(&ckpt2, 2, 7, &"0".repeat(64)).unwrap();
        let (_m3, rows3) = train_stage(&config, &tc, 3, &dataset, Some(&ckpt2), 7).unwrap();
        assert_eq!(rows3.len(), tc.stage3_iterations);
        assert!(rows3.iter().all(|r| r.kl >= 0.0));
    }

    #[test]
    fn loss_csv_round_trips_through_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let rows = vec![
            LossRow { iteration: 0, stage: 1, loss: 1.5, cls: 1.0, reg: 0.5, kl: 0.0 },
            LossRow { iteration: 1, stage: 3, loss: 0.75, cls: 0.5, reg: 0.2, kl: 0.05 },
        ];
        write_loss_csv(&path, &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("iteration,stage,loss,cls,reg,kl"));
        assert_eq!(lines.next(), Some("0,1,1.5,1,0.5,0"));
        assert_eq!(lines.next(), Some("1,3,0.75,0.5,0.2,0.05"));
    }

    #[test]
    fn unusable_datasets_are_rejected() {
        let config = tiny_test_config();
        let tc = quick_train_config();
        let err = train_stage(&config, &tc, 1, &[], None, 7).err().unwrap();
        assert!(err.to_string().contains("two or more frames"));
    }
}
