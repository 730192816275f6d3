//! Latency structure of the inference paths: every variant is timed on
//! the same frames, single-threaded, and the report separates each
//! refinement's added cost over the coarse-only floor.

use crate::cloud::{PointCloud, Rng};
use crate::dataset::LabeledSequence;
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::model::Model;
use crate::track::{predict_frame, Aggregation, Variant};
use crate::train::prepare_inputs;
use std::time::Instant;

/// Latency of one variant over the benchmark frames.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VariantTiming {
    pub variant: Variant,
    pub frames: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Backbone invocations per frame; constant within a variant.
    pub backbone_passes_per_frame: u64,
}

/// Timings for the three model-backed variants plus the added-latency
/// comparison between the two refinement strategies.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub timings: Vec<VariantTiming>,
    /// Mean seconds the restoration-based refinement adds per frame
    /// over coarse-only.
    pub refined_added_seconds: f64,
    /// Mean seconds the crop-and-merge second pass adds per frame over
    /// coarse-only.
    pub crop_merge_added_seconds: f64,
    /// `refined_added_seconds / crop_merge_added_seconds`.
    pub added_ratio: f64,
}

impl BenchReport {
    /// The timing row for one variant.
    pub fn timing(&self, variant: Variant) -> Option<&VariantTiming> {
        self.timings.iter().find(|t| t.variant == variant)
    }
}

/// A benchmark input: consecutive clouds and the earlier frame's box.
struct Sample {
    prev: PointCloud,
    cur: PointCloud,
    reference: Box3D,
}

/// Gather `count` non-degenerate frame pairs, walking the dataset's
/// sequences round-robin with ground-truth references.
fn gather_samples(
    model: &Model,
    dataset: &[LabeledSequence],
    count: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = Rng::stream(seed, 41);
    let mut samples = Vec::with_capacity(count);
    let usable: Vec<&LabeledSequence> =
        dataset.iter().filter(|s| s.frames.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "benchmarking needs a sequence with two or more frames",
        ));
    }
    let mut cursor = 0usize;
    let mut attempts = 0usize;
    while samples.len() < count {
        attempts += 1;
        if attempts > 100 * count {
            return Err(Error::invalid(format!(
                "found only {} of {count} usable benchmark frames; the dataset's \
                 clouds may not overlap its labels",
                samples.len()
            )));
        }
        let seq = usable[cursor % usable.len()];
        let frame = 1 + (cursor / usable.len()) % (seq.frames.len() - 1);
        cursor += 1;
        let reference = seq.frames[frame - 1].gt;
        let probe = prepare_inputs(
            &model.config,
            &seq.frames[frame - 1].cloud,
            &seq.frames[frame].cloud,
            &reference,
            &mut rng,
        )?;
        if probe.degenerate {
            continue;
        }
        samples.push(Sample {
            prev: seq.frames[frame - 1].cloud.clone(),
            cur: seq.frames[frame].cloud.clone(),
            reference,
        });
    }
    Ok(samples)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Time the three model-backed variants over `frames` identical inputs.
/// Runs on the calling thread only, with `warmup` untimed frames per
/// variant first.
pub fn run_bench(
    model: &Model,
    dataset: &[LabeledSequence],
    frames: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::invalid("benchmark needs at least one frame"));
    }
    let samples = gather_samples(model, dataset, frames, seed)?;
    let variants = [Variant::CoarseOnly, Variant::Refined, Variant::CropMerge];
    let mut timings = Vec::with_capacity(variants.len());
    for variant in variants {
        for i in 0..warmup.min(samples.len()) {
            let s = &samples[i];
            let mut rng = Rng::stream(seed, 42);
            predict_frame(
                model, &s.prev, &s.cur, &s.reference, variant, Aggregation::Arp, &mut rng,
            )?;
        }
        let mut seconds = Vec::with_capacity(samples.len());
        let mut passes = None;
        for s in &samples {
            // Every variant sees identical crops: the stream restarts
            // per frame-variant pair.
            let mut rng = Rng::stream(seed, 42);
            let start = Instant::now();
            let (_, p) = predict_frame(
                model, &s.prev, &s.cur, &s.reference, variant, Aggregation::Arp, &mut rng,
            )?;
            seconds.push(start.elapsed().as_secs_f64());
            match passes {
                None => passes = Some(p),
                Some(prev) if prev != p => {
                    return Err(Error::invalid(format!(
                        "variant {variant:?} spent {p} backbone passes on one frame but \
                         {prev} on another"
                    )))
                }
                Some(_) => {}
            }
        }
        let (mean_seconds, std_seconds) = mean_std(&seconds);
        timings.push(VariantTiming {
            variant,
            frames: samples.len(),
            mean_seconds,
            std_seconds,
            backbone_passes_per_frame: passes.unwrap_or(0),
        });
    }
    let coarse = timings[0].mean_seconds;
    let refined_added = timings[1].mean_seconds - coarse;
    let crop_merge_added = timings[2].mean_seconds - coarse;
    Ok(BenchReport {
        refined_added_seconds: refined_added,
        crop_merge_added_seconds: crop_merge_added,
        added_ratio: refined_added / crop_merge_added,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_test_config;
    use crate::sim::{generate_dataset, SimConfig};

    fn tiny_setup() -> (Model, Vec<LabeledSequence>) {
        let model = Model::new(&tiny_test_config(), &mut Rng::seed(3)).unwrap();
        let config = SimConfig {
            sequences: 2,
            frames_per_sequence: 4,
            surface_points: 48,
            clutter_points: 24,
            ..SimConfig::desk()
        };
        (model, generate_dataset(&config, 5).unwrap())
    }

    #[test]
    fn report_counts_passes_and_stays_finite() {
        let (model, dataset) = tiny_setup();
        let report = run_bench(&model, &dataset, 4, 1, 7).unwrap();
        assert_eq!(report.timings.len(), 3);
        let expect = [
            (Variant::CoarseOnly, 2),
            (Variant::Refined, 2),
            (Variant::CropMerge, 3),
        ];
        for (variant, passes) in expect {
            let t = report.timing(variant).unwrap();
            assert_eq!(t.backbone_passes_per_frame, passes);
            assert_eq!(t.frames, 4);
            assert!(t.mean_seconds > 0.0 && t.mean_seconds.is_finite());
            assert!(t.std_seconds >= 0.0 && t.std_seconds.is_finite());
        }
        assert!(report.refined_added_seconds.is_finite());
        assert!(report.crop_merge_added_seconds.is_finite());
    }

    #[test]
    fn empty_requests_are_rejected() {
        let (model, dataset) = tiny_setup();
        assert!(run_bench(&model, &dataset, 0, 0, 7).is_err());
        assert!(run_bench(&model, &[], 2, 0, 7).is_err());
    }

    #[test]
    fn mean_and_std_match_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-12);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
    }
}
