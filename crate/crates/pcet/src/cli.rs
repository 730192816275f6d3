//! Operator surface: dataset generation, staged training, tracking,
//! evaluation, the aggregation comparison, and the latency benchmark.
//! Every command is deterministic under `--seed`, and every JSON output
//! embeds the config digest and seed (CSV outputs are covered by the
//! run manifest written next to them).

use crate::bench::{run_bench, BenchReport};
use crate::compare::{run_compare, write_scatter_csv};
use crate::config::{Config, Preset, DATA_ROOT_ENV};
use crate::dataset::{dataset_digest, save_dataset, LabeledSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_frames, summarize, OpeSummary};
use crate::model::Model;
use crate::sim::generate_dataset;
use crate::track::{run_ope, Aggregation, Trajectory, Variant};
use crate::train::{train_all, train_stage, write_loss_csv};
use clap::{Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

/// Point-cloud single-object tracker: synthetic data, staged training,
/// tracking, and evaluation.
#[derive(Debug, Parser)]
#[command(name = "pcet", version, about)]
pub struct Cli {
    /// TOML settings overlaid onto the preset (any subset of fields).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master random seed; fixed seeds make runs reproducible.
    #[arg(long, global = true, value_name = "N", default_value_t = 7)]
    pub seed: u64,

    /// Directory all outputs are written into.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,

    /// Configuration baseline.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset into OUT/dataset.
    Gen,
    /// Run the training stages in order (or one stage with --stage).
    Train {
        /// Run only this stage; stages 2 and 3 need the previous
        /// stage's checkpoint (--init or OUT/stage{N-1}.ckpt).
        #[arg(long, value_name = "N")]
        stage: Option<u32>,
        /// Checkpoint that seeds the stage.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Track every sequence; writes OUT/tracks/*.json and OUT/metrics.json.
    Track {
        /// Trained weights (default: track.checkpoint from the config,
        /// then OUT/stage3.ckpt).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Prediction path (default from the config).
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        /// Candidate aggregation (default from the config).
        #[arg(long, value_enum)]
        aggregation: Option<Aggregation>,
    },
    /// Score trajectory files against ground truth.
    Eval {
        /// Directory of trajectory JSON files (default: OUT/tracks).
        #[arg(long, value_name = "DIR")]
        tracks: Option<PathBuf>,
    },
    /// Time the inference variants on identical frames, single-threaded.
    Bench {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Timed frames per variant (default from the config).
        #[arg(long, value_name = "N")]
        frames: Option<usize>,
    },
    /// Compare learned aggregation against top-1 selection; writes
    /// OUT/compare.json and OUT/scatter.csv.
    CompareArp {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

/// Identification block embedded in every JSON output.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Provenance {
    pub command: String,
    pub preset: String,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrajectoryFile {
    provenance: Provenance,
    trajectory: Trajectory,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("could not serialize {}: {e}", path.display())))?;
    fs::write(path, text)?;
    Ok(())
}

/// Sequences from (in priority order) the environment override, the
/// configured sources, or a dataset previously generated into OUT.
fn resolve_data(config: &Config, out: &Path) -> Result<Vec<LabeledSequence>> {
    if let Some(root) = std::env::var_os(DATA_ROOT_ENV) {
        return config.load_sequences_from(Some(Path::new(&root)));
    }
    if config.data.dataset_dir.is_some() || config.data.kitti_root.is_some() {
        return config.load_sequences_from(None);
    }
    let fallback = out.join("dataset");
    if fallback.is_dir() {
        return config.load_sequences_from(Some(&fallback));
    }
    Err(Error::Config(format!(
        "no data source: set data.dataset_dir or data.kitti_root in the config, export \
         {DATA_ROOT_ENV}, or run `gen` into this output directory first"
    )))
}

fn resolve_checkpoint(
    flag: Option<PathBuf>,
    config: &Config,
    out: &Path,
) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Some(p) = &config.track.checkpoint {
        return Ok(p.clone());
    }
    let fallback = out.join("stage3.ckpt");
    if fallback.exists() {
        return Ok(fallback);
    }
    Err(Error::Config(
        "no checkpoint: pass --checkpoint, set track.checkpoint in the config, or train \
         into this output directory first"
            .into(),
    ))
}

fn load_model(config: &Config, path: &Path) -> Result<Model> {
    let (model, _) = Model::load_checkpoint(&config.model, path)?;
    Ok(model)
}

/// Run one parsed invocation. All outputs land under `cli.out`.
pub fn run(cli: Cli) -> Result<()> {
    let config = Config::load(cli.config.as_deref(), cli.preset)?;
    fs::create_dir_all(&cli.out)?;
    let provenance = |command: &str| Provenance {
        command: command.to_string(),
        preset: cli.preset.name().to_string(),
        seed: cli.seed,
        config_digest: config.digest(),
    };
    match cli.command {
        Command::Gen => {
            let dataset = generate_dataset(&config.sim, cli.seed)?;
            let dir = cli.out.join("dataset");
            save_dataset(&dir, &dataset)?;
            let digest = dataset_digest(&dataset);
            #[derive(serde::Serialize)]
            struct GenManifest {
                provenance: Provenance,
                dataset_dir: PathBuf,
                sequences: usize,
                frames: usize,
                dataset_digest: String,
            }
            write_json(
                &cli.out.join("manifest.json"),
                &GenManifest {
                    provenance: provenance("gen"),
                    dataset_dir: dir,
                    sequences: dataset.len(),
                    frames: dataset.iter().map(|s| s.frames.len()).sum(),
                    dataset_digest: digest.clone(),
                },
            )?;
            println!(
                "generated {} sequences ({} frames), digest {digest}",
                dataset.len(),
                dataset.iter().map(|s| s.frames.len()).sum::<usize>()
            );
        }
        Command::Train { stage, init } => {
            let dataset = resolve_data(&config, &cli.out)?;
            let digest = config.digest();
            match stage {
                None => {
                    let summary =
                        train_all(&config.model, &config.train, &dataset, &cli.out, cli.seed, &digest)?;
                    #[derive(serde::Serialize)]
                    struct TrainManifest {
                        provenance: Provenance,
                        checkpoints: Vec<PathBuf>,
                        iterations: usize,
                        final_loss: Option<f64>,
                    }
                    write_json(
                        &cli.out.join("manifest.json"),
                        &TrainManifest {
                            provenance: provenance("train"),
                            checkpoints: summary.checkpoints.to_vec(),
                            iterations: summary.rows.len(),
                            final_loss: summary.rows.last().map(|r| r.loss),
                        },
                    )?;
                    println!(
                        "trained 3 stages ({} iterations); checkpoints in {}",
                        summary.rows.len(),
                        cli.out.display()
                    );
                }
                Some(n) => {
                    let init = match (init, n) {
                        (Some(p), _) => Some(p),
                        (None, 2 | 3) => {
                            let prev = cli.out.join(format!("stage{}.ckpt", n - 1));
                            prev.exists().then_some(prev)
                        }
                        _ => None,
                    };
                    let (model, rows) =
                        train_stage(&config.model, &config.train, n, &dataset, init.as_deref(), cli.seed)?;
                    let ckpt = cli.out.join(format!("stage{n}.ckpt"));
                    model.save_checkpoint(&ckpt, n, cli.seed, &digest)?;
                    write_loss_csv(&cli.out.join(format!("stage{n}_loss.csv")), &rows)?;
                    println!(
                        "stage {n} finished ({} iterations); checkpoint at {}",
                        rows.len(),
                        ckpt.display()
                    );
                }
            }
        }
        Command::Track {
            checkpoint,
            variant,
            aggregation,
        } => {
            let dataset = resolve_data(&config, &cli.out)?;
            let ckpt = resolve_checkpoint(checkpoint, &config, &cli.out)?;
            let model = load_model(&config, &ckpt)?;
            let variant = variant.unwrap_or(config.track.variant);
            let aggregation = aggregation.unwrap_or(config.track.aggregation);
            let report = run_ope(&model, &dataset, variant, aggregation, cli.seed)?;
            let tracks_dir = cli.out.join("tracks");
            fs::create_dir_all(&tracks_dir)?;
            for t in &report.trajectories {
                write_json(
                    &tracks_dir.join(format!("{}.json", t.sequence)),
                    &TrajectoryFile {
                        provenance: provenance("track"),
                        trajectory: t.clone(),
                    },
                )?;
            }
            #[derive(serde::Serialize)]
            struct MetricsFile {
                provenance: Provenance,
                variant: Variant,
                aggregation: Aggregation,
                checkpoint: PathBuf,
                summary: OpeSummary,
            }
            write_json(
                &cli.out.join("metrics.json"),
                &MetricsFile {
                    provenance: provenance("track"),
                    variant,
                    aggregation,
                    checkpoint: ckpt,
                    summary: report.summary.clone(),
                },
            )?;
            println!(
                "tracked {} sequences: Success {:.2}, Precision {:.2}",
                report.trajectories.len(),
                report.summary.success,
                report.summary.precision
            );
        }
        Command::Eval { tracks } => {
            let dataset = resolve_data(&config, &cli.out)?;
            let dir = tracks.unwrap_or_else(|| cli.out.join("tracks"));
            let summary = eval_trajectories(&dir, &dataset)?;
            #[derive(serde::Serialize)]
            struct EvalFile {
                provenance: Provenance,
                tracks_dir: PathBuf,
                summary: OpeSummary,
            }
            write_json(
                &cli.out.join("eval.json"),
                &EvalFile {
                    provenance: provenance("eval"),
                    tracks_dir: dir,
                    summary: summary.clone(),
                },
            )?;
            println!(
                "evaluated {} frames: Success {:.2}, Precision {:.2}",
                summary.frames, summary.success, summary.precision
            );
        }
        Command::Bench { checkpoint, frames } => {
            let dataset = resolve_data(&config, &cli.out)?;
            let ckpt = resolve_checkpoint(checkpoint, &config, &cli.out)?;
            let model = load_model(&config, &ckpt)?;
            let frames = frames.unwrap_or(config.bench.frames);
            let report = run_bench(&model, &dataset, frames, config.bench.warmup, cli.seed)?;
            #[derive(serde::Serialize)]
            struct BenchFile {
                provenance: Provenance,
                checkpoint: PathBuf,
                report: BenchReport,
            }
            write_json(
                &cli.out.join("bench.json"),
                &BenchFile {
                    provenance: provenance("bench"),
                    checkpoint: ckpt,
                    report: report.clone(),
                },
            )?;
            for t in &report.timings {
                println!(
                    "{:?}: {:.3} ms ± {:.3} ({} backbone passes/frame)",
                    t.variant,
                    t.mean_seconds * 1e3,
                    t.std_seconds * 1e3,
                    t.backbone_passes_per_frame
                );
            }
            println!(
                "added latency: restoration {:.3} ms vs crop-merge {:.3} ms (ratio {:.3})",
                report.refined_added_seconds * 1e3,
                report.crop_merge_added_seconds * 1e3,
                report.added_ratio
            );
        }
        Command::CompareArp { checkpoint } => {
            let dataset = resolve_data(&config, &cli.out)?;
            let ckpt = resolve_checkpoint(checkpoint, &config, &cli.out)?;
            let model = load_model(&config, &ckpt)?;
            let report = run_compare(&model, &dataset, config.track.variant, cli.seed)?;
            write_scatter_csv(&cli.out.join("scatter.csv"), &report.scatter)?;
            #[derive(serde::Serialize)]
            struct CompareFile {
                provenance: Provenance,
                checkpoint: PathBuf,
                variant: Variant,
                arp: OpeSummary,
                top1: OpeSummary,
                scatter_rows: usize,
            }
            write_json(
                &cli.out.join("compare.json"),
                &CompareFile {
                    provenance: provenance("compare-arp"),
                    checkpoint: ckpt,
                    variant: report.variant,
                    arp: report.arp.clone(),
                    top1: report.top1.clone(),
                    scatter_rows: report.scatter.len(),
                },
            )?;
            println!(
                "aggregation Success: learned {:.2} vs top-1 {:.2} ({} scatter rows)",
                report.arp.success,
                report.top1.success,
                report.scatter.len()
            );
        }
    }
    Ok(())
}

/// Score a directory of trajectory files against the dataset's ground
/// truth.
fn eval_trajectories(dir: &Path, dataset: &[LabeledSequence]) -> Result<OpeSummary> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|_| {
            Error::Config(format!("trajectory directory {} is not readable", dir.display()))
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "json").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no trajectory files (*.json) in {}",
            dir.display()
        )));
    }
    let mut per_sequence = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path)?;
        let parsed: TrajectoryFile = serde_json::from_str(&text).map_err(|e| {
            Error::format(path.display().to_string(), Some(e.line()), e.to_string())
        })?;
        let t = parsed.trajectory;
        let seq = dataset
            .iter()
            .find(|s| s.id == t.sequence)
            .ok_or_else(|| {
                Error::Config(format!(
                    "trajectory {} names sequence {:?}, which the dataset does not contain",
                    path.display(),
                    t.sequence
                ))
            })?;
        let gt: Vec<_> = seq.frames[1..].iter().map(|f| f.gt).collect();
        let evals = evaluate_frames(&t.boxes(), &gt)?;
        per_sequence.push((seq.category.clone(), evals));
    }
    summarize(&per_sequence)
}

/// Parse the process arguments, run, and return the exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_test_config;
    use crate::track::TrackedFrame;

    fn tiny_config_toml(dir: &Path) -> PathBuf {
        let model = tiny_test_config();
        let text = format!(
            r#"
[sim]
sequences = 2
frames_per_sequence = 3
surface_points = 48
clutter_points = 16

[model]
template_points = {}
search_points = {}
merge_crop_points = {}
head_hidden = [8]
arp_hidden = [4]
[[model.backbone.stages]]
seed_divisor = 4
neighbors = 4
mlp = [8, 8]
[[model.backbone.stages]]
seed_divisor = 2
neighbors = 4
mlp = [8, 8]

[train]
stage1_iterations = 2
stage2_iterations = 2
stage3_iterations = 2
"#,
            model.template_points, model.search_points, model.merge_crop_points
        );
        let path = dir.join("tiny.toml");
        fs::write(&path, text).unwrap();
        path
    }

    fn cli_for(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn all_documented_flags_and_subcommands_parse() {
        for sub in ["gen", "train", "track", "eval", "bench", "compare-arp"] {
            let cli = cli_for(&[
                "pcet", sub, "--seed", "9", "--out", "/tmp/x", "--preset", "paper",
                "--config", "c.toml",
            ]);
            assert_eq!(cli.seed, 9);
            assert_eq!(cli.out, PathBuf::from("/tmp/x"));
            assert_eq!(cli.preset, Preset::Paper);
            assert_eq!(cli.config.as_deref(), Some(Path::new("c.toml")));
        }
        assert!(Cli::try_parse_from(["pcet", "unknown-sub"]).is_err());
    }

    #[test]
    fn gen_is_deterministic_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_toml(dir.path());
        let digest_of = |out: &Path| {
            run(cli_for(&[
                "pcet", "gen",
                "--config", config.to_str().unwrap(),
                "--seed", "11",
                "--out", out.to_str().unwrap(),
            ]))
            .unwrap();
            let manifest: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap())
                    .unwrap();
            manifest["dataset_digest"].as_str().unwrap().to_string()
        };
        let a = digest_of(&dir.path().join("a"));
        let b = digest_of(&dir.path().join("b"));
        assert_eq!(a, b);

        // The generated tree is the normalized layout the loader reads.
        let seq = load_sequence(&dir.path().join("a/dataset/seq_0000")).unwrap();
        assert_eq!(seq.frames.len(), 3);
    }

    #[test]
    fn eval_scores_oracle_trajectories_perfectly() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_toml(dir.path());
        let out = dir.path().join("run");
        run(cli_for(&[
            "pcet", "gen",
            "--config", config.to_str().unwrap(),
            "--seed", "11",
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        let dataset = crate::dataset::load_dataset(&out.join("dataset")).unwrap();
        let tracks = out.join("tracks");
        fs::create_dir_all(&tracks).unwrap();
        for seq in &dataset {
            let frames = seq.frames[1..]
                .iter()
                .enumerate()
                .map(|(i, f)| TrackedFrame {
                    frame: i + 1,
                    predicted: f.gt,
                    backbone_passes: 0,
                    seconds: 0.0,
                })
                .collect();
            let file = TrajectoryFile {
                provenance: Provenance {
                    command: "track".into(),
                    preset: "desk".into(),
                    seed: 11,
                    config_digest: "x".into(),
                },
                trajectory: Trajectory {
                    sequence: seq.id.clone(),
                    category: seq.category.clone(),
                    variant: Variant::KeepPrevious,
                    aggregation: Aggregation::Arp,
                    frames,
                },
            };
            write_json(&tracks.join(format!("{}.json", seq.id)), &file).unwrap();
        }
        run(cli_for(&[
            "pcet", "eval",
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        let eval: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
        let success = eval["summary"]["success"].as_f64().unwrap();
        let precision = eval["summary"]["precision"].as_f64().unwrap();
        assert!((success - 100.0).abs() < 1e-9, "success {success}");
        assert!((precision - 100.0).abs() < 1e-9, "precision {precision}");
        assert_eq!(eval["provenance"]["seed"].as_u64().unwrap(), 7);
    }

    #[test]
    fn track_requires_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_toml(dir.path());
        let out = dir.path().join("run");
        run(cli_for(&[
            "pcet", "gen",
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        let err = run(cli_for(&[
            "pcet", "track",
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]))
        .err()
        .unwrap();
        assert_eq!(err.exit_code(), 2, "got {err}");
    }

    #[test]
    fn stage_three_without_stage_two_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_toml(dir.path());
        let out = dir.path().join("run");
        run(cli_for(&[
            "pcet", "gen",
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        let err = run(cli_for(&[
            "pcet", "train", "--stage", "3",
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
        ]))
        .err()
        .unwrap();
        assert_eq!(err.exit_code(), 2, "got {err}");
        assert!(err.to_string().contains("stage 2"), "got {err}");
    }

    #[test]
    fn full_pipeline_runs_end_to_end_at_tiny_scale() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config_toml(dir.path());
        let out = dir.path().join("run");
        let base = [
            "--config", config.to_str().unwrap(),
            "--out", out.to_str().unwrap(),
            "--seed", "3",
        ];
        let with_base = |head: &[&str]| {
            let mut v: Vec<&str> = head.to_vec();
            v.extend_from_slice(&base);
            run(Cli::try_parse_from(v).unwrap())
        };
        with_base(&["pcet", "gen"]).unwrap();
        with_base(&["pcet", "train"]).unwrap();
        with_base(&["pcet", "track"]).unwrap();
        with_base(&["pcet", "eval"]).unwrap();
        with_base(&["pcet", "bench", "--frames", "2"]).unwrap();
        with_base(&["pcet", "compare-arp"]).unwrap();
        for file in [
            "manifest.json",
            "loss.csv",
            "stage3.ckpt",
            "metrics.json",
            "eval.json",
            "bench.json",
            "compare.json",
            "scatter.csv",
        ] {
            assert!(out.join(file).exists(), "missing {file}");
        }
        // Trajectory files exist, one per sequence, with frame count =
        // sequence length - 1 and embedded provenance.
        let dataset = crate::dataset::load_dataset(&out.join("dataset")).unwrap();
        for seq in &dataset {
            let path = out.join("tracks").join(format!("{}.json", seq.id));
            let parsed: TrajectoryFile =
                serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
            assert_eq!(parsed.trajectory.frames.len(), seq.frames.len() - 1);
            assert_eq!(parsed.provenance.seed, 3);
            assert_eq!(parsed.provenance.config_digest.len(), 64);
        }
    }
}
