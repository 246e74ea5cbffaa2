mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};
use serde::Serialize;
use serde_json::json;
use veil::data::{save_dataset, Dataset, POSE_LIMIT_DEG};
use veil::evaluation::{render_table, run_all, ScenarioId};
use veil::model::stack_images;
use veil::morphing::{
    identity_replace, morph_sequence, step_distances, write_grid, LabeledImage, MorphMode, MorphRequest,
};
use veil::training::{
    load_checkpoint, save_checkpoint, train, JsonLinesLog, LogRecord, StepKind, TrainObserver, TrainState,
};
use veil::ModelBundle32;

use crate::config::{usage, RunConfig, UsageError};

const CHECKPOINT: &str = "checkpoint.ckpt";
const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(name = "veil", version)]
#[command(about = "Pose-preserving identity replacement: data synthesis, training, privacy evaluation and morphing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,

    /// Output directory (overrides `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Global seed (overrides `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the procedural dataset archive and a summary
    SynthData {
        #[command(flatten)]
        common: Common,

        /// Overwrite an existing archive
        #[arg(long)]
        force: bool,
    },

    /// Train a model, writing checkpoints and a loss log
    Train {
        #[command(flatten)]
        common: Common,

        /// Replace an existing run in the output directory
        #[arg(long, conflicts_with = "resume")]
        force: bool,

        /// Continue from the output directory's latest checkpoint
        #[arg(long)]
        resume: bool,
    },

    /// Run privacy attack scenarios against a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to evaluate (default: <out>/checkpoint.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        /// Comma-separated scenarios (unconstrained, attack_i, attack_ii, attack_iii)
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<ScenarioId>>,
    },

    /// Render identity replacement or morph sequences as image grids
    Morph {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to render with (default: <out>/checkpoint.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        /// pose_morph, identity_morph or identity_replace
        #[arg(long)]
        mode: Option<MorphMode>,

        /// Frames per morph sequence (>= 2)
        #[arg(long)]
        steps: Option<usize>,

        /// Identity used to pick pose-morph endpoints automatically
        #[arg(long)]
        identity: Option<u32>,

        /// Test-split index of the initial pose-morph endpoint
        #[arg(long)]
        initial: Option<usize>,

        /// Test-split index of the final pose-morph endpoint
        #[arg(long = "final")]
        final_: Option<usize>,

        /// Test-split index of the identity-morph source frame
        #[arg(long)]
        image: Option<usize>,

        /// Initial identity of an identity morph
        #[arg(long)]
        from: Option<u32>,

        /// Final identity of an identity morph
        #[arg(long)]
        to: Option<u32>,

        /// Target identity for identity replacement
        #[arg(long)]
        target: Option<u32>,

        /// Comma-separated test-split indices to replace
        #[arg(long, value_delimiter = ',')]
        images: Option<Vec<usize>>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration errors, 2 for runtime or numeric failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<veil::Error>() {
            return if err.is_config() { 1 } else { 2 };
        }
        if cause.is::<UsageError>() {
            return 1;
        }
    }
    2
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, force } => cmd_synth_data(&load(&common)?, force),
        Command::Train { common, force, resume } => cmd_train(&load(&common)?, force, resume),
        Command::Evaluate { common, checkpoint, scenarios } => {
            let mut cfg = load(&common)?;
            if let Some(s) = scenarios {
                cfg.evaluation.scenarios = s;
            }
            cmd_evaluate(&cfg, checkpoint)
        }
        Command::Morph {
            common,
            checkpoint,
            mode,
            steps,
            identity,
            initial,
            final_,
            image,
            from,
            to,
            target,
            images,
        } => {
            let mut cfg = load(&common)?;
            let m = &mut cfg.morph;
            m.mode = mode.unwrap_or(m.mode);
            m.steps = steps.unwrap_or(m.steps);
            m.identity = identity.unwrap_or(m.identity);
            m.initial = initial.or(m.initial);
            m.final_ = final_.or(m.final_);
            m.image = image.or(m.image);
            m.from = from.unwrap_or(m.from);
            m.to = to.unwrap_or(m.to);
            m.target = target.unwrap_or(m.target);
            if let Some(list) = images {
                m.images = list;
            }
            cmd_morph(&cfg, checkpoint)
        }
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("cannot create output directory {}", cfg.out_dir.display()))?;
    Ok(cfg)
}

fn archive_config(cfg: &RunConfig, command: &str) -> Result<()> {
    let path = cfg.out_dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()?).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pose_histogram(data: &Dataset, axis: usize) -> BTreeMap<String, usize> {
    let mut bins = BTreeMap::new();
    for s in &data.samples {
        let lo = ((s.pose[axis] / 10.0).floor() * 10.0).clamp(-POSE_LIMIT_DEG, POSE_LIMIT_DEG - 10.0);
        *bins.entry(format!("{:+04}..{:+04}", lo as i32, lo as i32 + 10)).or_insert(0) += 1;
    }
    bins
}

fn cmd_synth_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let pc = cfg
        .procedural()
        .ok_or_else(|| usage("synth-data requires data.source = \"procedural\""))?;
    let path = cfg.out_dir.join("dataset.veil");
    if path.exists() && !force {
        return Err(usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    let (data, split) = cfg.dataset()?;
    save_dataset(&data, &path, Some(&pc))?;
    let mut per_subject = BTreeMap::new();
    let mut per_video = BTreeMap::new();
    for s in &data.samples {
        *per_subject.entry(s.identity).or_insert(0usize) += 1;
        *per_video.entry(s.video_id).or_insert(0usize) += 1;
    }
    let summary = json!({
        "samples": data.len(),
        "n_subjects": data.n_subjects,
        "image_size": data.image_size,
        "train_samples": split.train.len(),
        "test_samples": split.test.len(),
        "frames_per_subject": per_subject,
        "frames_per_video": per_video,
        "pose_histograms_deg": {
            "yaw": pose_histogram(&data, 0),
            "pitch": pose_histogram(&data, 1),
            "roll": pose_histogram(&data, 2),
        },
    });
    write_json(&cfg.out_dir.join("dataset_summary.json"), &summary)?;
    archive_config(cfg, "synth-data")?;
    log::info!("wrote {} ({} samples)", path.display(), data.len());
    Ok(())
}

struct RunObserver<'a> {
    log: JsonLinesLog,
    cfg: &'a RunConfig,
}

impl TrainObserver<f32> for RunObserver<'_> {
    fn record(&mut self, record: &LogRecord) -> veil::Result<()> {
        if record.kind == StepKind::Generator {
            let terms: Vec<String> = record.terms.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            log::info!("generator step {}: {}", record.step, terms.join(" "));
        }
        self.log.write(record)
    }

    fn checkpoint(&mut self, state: &TrainState<f32>) -> veil::Result<()> {
        let dir = self.cfg.out_dir.join("checkpoints");
        fs::create_dir_all(&dir)?;
        save_checkpoint(state, &self.cfg.training, &dir.join(format!("g{:07}.ckpt", state.generator_steps)))?;
        save_checkpoint(state, &self.cfg.training, &self.cfg.out_dir.join(CHECKPOINT))
    }
}

fn cmd_train(cfg: &RunConfig, force: bool, resume: bool) -> Result<()> {
    let ckpt = cfg.out_dir.join(CHECKPOINT);
    let log_path = cfg.out_dir.join(TRAIN_LOG);
    let (_, split) = cfg.dataset()?;
    let model_cfg = cfg.model_config_for(split.train.n_subjects);
    let mut state = if resume {
        if !ckpt.exists() {
            return Err(usage(format!("--resume given but {} does not exist", ckpt.display())));
        }
        let (state, header) = load_checkpoint::<f32>(&ckpt, Some(&cfg.training))?;
        if header.model_config != model_cfg {
            return Err(usage("checkpoint model configuration differs from the config file"));
        }
        log::info!("resuming from generator step {}", state.generator_steps);
        state
    } else {
        if ckpt.exists() && !force {
            return Err(usage(format!(
                "{} exists; pass --resume to continue or --force to start over",
                ckpt.display()
            )));
        }
        if force {
            for stale in [log_path.clone(), ckpt.clone()] {
                if stale.exists() {
                    fs::remove_file(&stale)?;
                }
            }
            let dir = cfg.out_dir.join("checkpoints");
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
        }
        TrainState::new(model_cfg, &cfg.training)?
    };
    archive_config(cfg, "train")?;
    let mut observer = RunObserver { log: JsonLinesLog::append(&log_path)?, cfg };
    let summary = train(&mut state, &cfg.training, &split.train, &mut observer)?;
    save_checkpoint(&state, &cfg.training, &ckpt)?;
    write_json(&cfg.out_dir.join("train_summary.json"), &summary)?;
    log::info!(
        "trained to generator step {} ({} critic steps); checkpoint {}",
        summary.generator_steps,
        summary.discriminator_steps,
        ckpt.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<ModelBundle32> {
    let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT));
    let (state, _) = load_checkpoint::<f32>(&path, Some(&cfg.training))?;
    Ok(state.model)
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let (_, split) = cfg.dataset()?;
    let reports = run_all::<f32, _>(&model, &split, &cfg.evaluation, cfg.seed)?;
    let table = render_table(&reports);
    write_json(&cfg.out_dir.join("metrics.json"), &reports)?;
    fs::write(cfg.out_dir.join("metrics_table.txt"), &table)?;
    archive_config(cfg, "evaluate")?;
    print!("{table}");
    Ok(())
}

fn frame(data: &Dataset, index: usize) -> Result<(Array3<f32>, u32, [f32; 3])> {
    let s = data.samples.get(index).ok_or_else(|| {
        usage(format!("sample index {index} outside the test split (0..{})", data.len()))
    })?;
    Ok((s.image.clone(), s.identity, s.pose))
}

fn first_of(data: &Dataset, identity: u32) -> Result<usize> {
    data.samples
        .iter()
        .position(|s| s.identity == identity)
        .ok_or_else(|| usage(format!("no test frame of identity {identity}")))
}

/// Predicted `[yaw, pitch, roll]` in degrees for each frame.
fn predicted_poses(model: &ModelBundle32, frames: &[Array3<f32>]) -> Result<Vec<[f64; 3]>> {
    let dyn_frames: Vec<_> = frames.iter().map(|f| f.clone().into_dyn()).collect();
    let refs: Vec<_> = dyn_frames.iter().collect();
    let poses = model.pose_estimate(&stack_images(&refs)?)?;
    Ok(poses
        .axis_iter(Axis(0))
        .map(|r| [0, 1, 2].map(|j| f64::from(r[j]) * f64::from(POSE_LIMIT_DEG)))
        .collect())
}

fn cmd_morph(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let model = load_model(cfg, checkpoint)?;
    let (_, split) = cfg.dataset()?;
    let test = &split.test;
    let m = &cfg.morph;
    let slug = match m.mode {
        MorphMode::PoseMorph => "pose_morph",
        MorphMode::IdentityMorph => "identity_morph",
        MorphMode::IdentityReplace => "identity_replace",
    };
    let (rows, meta) = match m.mode {
        MorphMode::PoseMorph => {
            let (i, f) = match (m.initial, m.final_) {
                (Some(i), Some(f)) => (i, f),
                (None, None) => extreme_yaw(test, m.identity)?,
                _ => return Err(usage("give both --initial and --final, or neither")),
            };
            let (xi, yi, _) = frame(test, i)?;
            let (xf, yf, _) = frame(test, f)?;
            let request = MorphRequest::PoseMorph {
                initial: LabeledImage { image: xi, identity: yi },
                final_: LabeledImage { image: xf, identity: yf },
                steps: m.steps,
            };
            let seq = morph_sequence(&model, &request)?;
            let meta = json!({
                "mode": m.mode,
                "initial_index": i,
                "final_index": f,
                "identity": yi,
                "k": seq.ks,
                "predicted_pose_deg": predicted_poses(&model, &seq.frames)?,
                "step_distances": step_distances(&seq.frames),
            });
            (vec![seq.frames], meta)
        }
        MorphMode::IdentityMorph => {
            let idx = match m.image {
                Some(i) => i,
                None => first_of(test, m.identity)?,
            };
            let (x, _, _) = frame(test, idx)?;
            let request = MorphRequest::IdentityMorph { image: x, initial: m.from, final_: m.to, steps: m.steps };
            let seq = morph_sequence(&model, &request)?;
            let meta = json!({
                "mode": m.mode,
                "image_index": idx,
                "from": m.from,
                "to": m.to,
                "k": seq.ks,
                "predicted_pose_deg": predicted_poses(&model, &seq.frames)?,
                "step_distances": step_distances(&seq.frames),
            });
            (vec![seq.frames], meta)
        }
        MorphMode::IdentityReplace => {
            let indices = if m.images.is_empty() {
                (1..=test.n_subjects as u32).map(|y| first_of(test, y)).collect::<Result<Vec<_>>>()?
            } else {
                m.images.clone()
            };
            let mut inputs = Vec::new();
            let mut outputs = Vec::new();
            let mut poses = Vec::new();
            for &i in &indices {
                let (x, _, pose) = frame(test, i)?;
                outputs.push(identity_replace(&model, &x, m.target)?);
                inputs.push(x);
                poses.push(pose);
            }
            let meta = json!({
                "mode": m.mode,
                "image_indices": indices,
                "target": m.target,
                "input_pose_deg": poses,
                "predicted_pose_deg": predicted_poses(&model, &outputs)?,
            });
            (vec![inputs, outputs], meta)
        }
    };
    let png = cfg.out_dir.join(format!("{slug}.png"));
    write_grid(&png, &rows)?;
    write_json(&cfg.out_dir.join(format!("{slug}.json")), &meta)?;
    archive_config(cfg, "morph")?;
    log::info!("wrote {}", png.display());
    Ok(())
}

/// Test frames of `identity` with the smallest and largest yaw.
fn extreme_yaw(data: &Dataset, identity: u32) -> Result<(usize, usize)> {
    let mine: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].identity == identity).collect();
    let yaw = |i: &usize| data.samples[*i].pose[0];
    let lo = mine.iter().copied().min_by(|a, b| yaw(a).total_cmp(&yaw(b)));
    let hi = mine.iter().copied().max_by(|a, b| yaw(a).total_cmp(&yaw(b)));
    match (lo, hi) {
        (Some(lo), Some(hi)) if lo != hi => Ok((lo, hi)),
        _ => Err(usage(format!("identity {identity} needs two test frames for a pose morph"))),
    }
}
