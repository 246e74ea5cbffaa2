//! Run configuration: one TOML file drives every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use veil::data::{generate_procedural, load_upna, split_per_video, Dataset, ProceduralConfig, SplitPair};
use veil::evaluation::EvalConfig;
use veil::model::ModelConfig;
use veil::morphing::MorphMode;
use veil::nn::InceptionSpec;
use veil::training::TrainConfig;

/// Invalid invocation or configuration detected by the CLI itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub morph: MorphSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    Procedural {
        n_subjects: usize,
        frames_per_subject: usize,
        image_size: [usize; 2],
        #[serde(default = "three")]
        channels: usize,
        #[serde(default = "four")]
        videos_per_subject: usize,
        #[serde(default = "sixty")]
        pose_limit: f32,
        #[serde(default = "noise")]
        noise_std: f32,
        #[serde(default = "train_fraction")]
        train_fraction: f64,
    },
    Upna {
        root: PathBuf,
        image_size: [usize; 2],
        #[serde(default = "three")]
        channels: usize,
        #[serde(default = "train_fraction")]
        train_fraction: f64,
    },
}

fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn sixty() -> f32 {
    60.0
}
fn noise() -> f32 {
    0.02
}
fn train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSection {
    #[default]
    Standard,
    Compact,
    Custom {
        latent_dim: usize,
        encoder_blocks: Vec<InceptionSpec>,
        decoder_base_channels: usize,
        decoder_blocks: Vec<InceptionSpec>,
        discriminator_blocks: Vec<InceptionSpec>,
        #[serde(default = "slope")]
        leaky_slope: f64,
        #[serde(default)]
        shared_trunk: bool,
    },
}

fn slope() -> f64 {
    0.2
}

/// Morph request defaults; every field can be overridden by a flag.
/// Sample indices refer to the held-out (test) split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphSection {
    pub mode: MorphMode,
    pub steps: usize,
    /// Identity whose extreme-yaw test frames serve as pose-morph endpoints
    /// when `initial` / `final` are not given.
    pub identity: u32,
    pub initial: Option<usize>,
    #[serde(rename = "final")]
    pub final_: Option<usize>,
    /// Identity-morph source frame; defaults to the first test frame of `identity`.
    pub image: Option<usize>,
    pub from: u32,
    pub to: u32,
    pub target: u32,
    /// Identity-replacement inputs; defaults to the first test frame of each subject.
    pub images: Vec<usize>,
}

impl Default for MorphSection {
    fn default() -> Self {
        MorphSection {
            mode: MorphMode::PoseMorph,
            steps: 9,
            identity: 1,
            initial: None,
            final_: None,
            image: None,
            from: 1,
            to: 2,
            target: 1,
            images: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| usage(e.to_string()))?;
        if let Some(training) = raw.get("training").and_then(|t| t.as_table()) {
            if training.contains_key("seed") {
                return Err(usage("training.seed is not allowed; set the top-level seed"));
            }
        }
        let mut cfg: RunConfig = raw.try_into().map_err(|e: toml::de::Error| usage(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.evaluation.attacker.validate()?;
        if self.evaluation.scenarios.is_empty() {
            return Err(usage("evaluation.scenarios is empty"));
        }
        let frac = match &self.data {
            DataSection::Procedural { train_fraction, .. } => *train_fraction,
            DataSection::Upna { train_fraction, .. } => *train_fraction,
        };
        if !(frac > 0.0 && frac < 1.0) {
            return Err(usage(format!("data.train_fraction = {frac}; expected a value in (0, 1)")));
        }
        if let Some(pc) = self.procedural() {
            pc.validate()?;
        }
        self.model_config()?.validate()?;
        Ok(())
    }

    pub fn n_subjects(&self) -> Option<usize> {
        match &self.data {
            DataSection::Procedural { n_subjects, .. } => Some(*n_subjects),
            DataSection::Upna { .. } => None,
        }
    }

    pub fn image_size(&self) -> [usize; 3] {
        match &self.data {
            DataSection::Procedural { image_size, channels, .. }
            | DataSection::Upna { image_size, channels, .. } => [image_size[0], image_size[1], *channels],
        }
    }

    pub fn procedural(&self) -> Option<ProceduralConfig> {
        match &self.data {
            DataSection::Procedural {
                n_subjects,
                frames_per_subject,
                image_size,
                channels,
                videos_per_subject,
                pose_limit,
                noise_std,
                ..
            } => Some(ProceduralConfig {
                n_subjects: *n_subjects,
                frames_per_subject: *frames_per_subject,
                image_size: *image_size,
                seed: self.seed,
                channels: *channels,
                videos_per_subject: *videos_per_subject,
                pose_limit: *pose_limit,
                noise_std: *noise_std,
            }),
            DataSection::Upna { .. } => None,
        }
    }

    /// Model configuration for the data section; UPNA subject counts are only
    /// known after loading, so they are passed in.
    pub fn model_config_for(&self, n_subjects: usize) -> ModelConfig {
        let size = self.image_size();
        match &self.model {
            ModelSection::Standard => ModelConfig::new(n_subjects, size),
            ModelSection::Compact => ModelConfig::compact(n_subjects, size),
            ModelSection::Custom {
                latent_dim,
                encoder_blocks,
                decoder_base_channels,
                decoder_blocks,
                discriminator_blocks,
                leaky_slope,
                shared_trunk,
            } => ModelConfig {
                latent_dim: *latent_dim,
                n_subjects,
                image_size: size,
                encoder_blocks: encoder_blocks.clone(),
                decoder_base_channels: *decoder_base_channels,
                decoder_blocks: decoder_blocks.clone(),
                discriminator_blocks: discriminator_blocks.clone(),
                leaky_slope: *leaky_slope,
                shared_trunk: *shared_trunk,
            },
        }
    }

    fn model_config(&self) -> Result<ModelConfig> {
        Ok(self.model_config_for(self.n_subjects().unwrap_or(2)))
    }

    /// Loads or generates the dataset and splits it per video.
    pub fn dataset(&self) -> Result<(Dataset, SplitPair)> {
        let (data, frac) = match &self.data {
            DataSection::Procedural { train_fraction, .. } => {
                let pc = self.procedural().expect("procedural section");
                (generate_procedural(&pc)?, *train_fraction)
            }
            DataSection::Upna { root, image_size, channels, train_fraction } => {
                let (data, report) = load_upna(root, *image_size, *channels)?;
                log::info!(
                    "loaded {} UPNA frames ({} skipped for boxes, {} for poses)",
                    report.loaded,
                    report.skipped_bad_box,
                    report.skipped_bad_pose
                );
                (data, *train_fraction)
            }
        };
        let split = split_per_video(&data, frac, self.seed)?;
        Ok((data, split))
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut value = toml::Table::try_from(self)?;
        if let Some(t) = value.get_mut("training").and_then(|t| t.as_table_mut()) {
            t.remove("seed");
        }
        Ok(toml::to_string_pretty(&value)?)
    }
}
