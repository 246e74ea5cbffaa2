//! Privacy audits: the unconstrained baseline and attack scenarios I-III,
//! scored by identification CCR and pose MAE.

mod attacker;
mod table;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FaceSample, SplitPair};
use crate::error::{Error, Result};
use crate::model::{one_hot_rows, ModelBundle};
use crate::nn::InceptionSpec;
use crate::rng::{keyed_substream, Stream};
use crate::scalar::Scalar;
use crate::training::{sample_target_identities, TargetDistribution};

pub use attacker::{train_attacker, AttackData, Attacker, AttackerConfig, AttackerKind, ConvergencePoint, Domain};
pub use table::{render_table, PaperRow, PAPER_TABLE_SYNTHETIC, PAPER_TABLE_UPNA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioId {
    Unconstrained,
    #[serde(rename = "ATTACK_I")]
    AttackI,
    #[serde(rename = "ATTACK_II")]
    AttackII,
    #[serde(rename = "ATTACK_III")]
    AttackIII,
}

impl ScenarioId {
    /// All scenarios in table row order.
    pub const ALL: [ScenarioId; 4] = [
        ScenarioId::Unconstrained,
        ScenarioId::AttackI,
        ScenarioId::AttackII,
        ScenarioId::AttackIII,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioId::Unconstrained => "Privacy Unconstrained",
            ScenarioId::AttackI => "Attack Scenario I",
            ScenarioId::AttackII => "Attack Scenario II",
            ScenarioId::AttackIII => "Attack Scenario III",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::Unconstrained => "UNCONSTRAINED",
            ScenarioId::AttackI => "ATTACK_I",
            ScenarioId::AttackII => "ATTACK_II",
            ScenarioId::AttackIII => "ATTACK_III",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    /// Accepts `unconstrained`, `attack_i`/`attack1`/`i`, and so on, in any case.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let norm = norm.strip_prefix("attack_").or_else(|| norm.strip_prefix("attack")).unwrap_or(&norm);
        match norm {
            "unconstrained" | "baseline" | "0" => Ok(ScenarioId::Unconstrained),
            "i" | "1" => Ok(ScenarioId::AttackI),
            "ii" | "2" => Ok(ScenarioId::AttackII),
            "iii" | "3" => Ok(ScenarioId::AttackIII),
            _ => Err(Error::config(format!("unknown scenario '{s}'"))),
        }
    }
}

/// Result of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: ScenarioId,
    pub identification_ccr: f64,
    /// Yaw, pitch, roll MAE in degrees.
    pub pose_mae_deg: [f64; 3],
    pub pose_mae_average: f64,
    pub n_test: usize,
    pub attacker_fingerprint: String,
    pub seed: u64,
    pub identifier_curve: Vec<ConvergencePoint>,
    pub pose_curve: Vec<ConvergencePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub scenarios: Vec<ScenarioId>,
    pub attacker: AttackerConfig,
    pub target_identities: TargetDistribution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenarios: ScenarioId::ALL.to_vec(),
            attacker: AttackerConfig::default(),
            target_identities: TargetDistribution::Uniform,
        }
    }
}

/// What the audit needs from a privacy-protecting model.
pub trait PrivacyModel<T: Scalar> {
    fn n_subjects(&self) -> usize;
    fn image_size(&self) -> [usize; 3];
    /// `G(x, c(y))` for each row, using the encoder mean.
    fn replace_identity(&self, images: &ArrayD<T>, targets: &[u32]) -> Result<ArrayD<T>>;
    /// Encoder means, `[N, d_z]`.
    fn latent_means(&self, images: &ArrayD<T>) -> Result<Array2<T>>;
    /// Blocks cloned by image-domain attackers.
    fn attacker_blocks(&self) -> Vec<InceptionSpec>;
}

impl<T: Scalar> PrivacyModel<T> for ModelBundle<T> {
    fn n_subjects(&self) -> usize {
        self.config.n_subjects
    }

    fn image_size(&self) -> [usize; 3] {
        self.config.image_size
    }

    fn replace_identity(&self, images: &ArrayD<T>, targets: &[u32]) -> Result<ArrayD<T>> {
        let codes = one_hot_rows(targets, self.config.n_subjects)?;
        ModelBundle::replace_identity(self, images, &codes)
    }

    fn latent_means(&self, images: &ArrayD<T>) -> Result<Array2<T>> {
        Ok(self.encode(images)?.mean)
    }

    fn attacker_blocks(&self) -> Vec<InceptionSpec> {
        self.config.discriminator_blocks.clone()
    }
}

const CHUNK: usize = 64;

fn check_compatible<T: Scalar, M: PrivacyModel<T> + ?Sized>(model: &M, data: &Dataset) -> Result<()> {
    if model.n_subjects() != data.n_subjects {
        return Err(Error::config(format!(
            "model has {} subjects, dataset {}",
            model.n_subjects(),
            data.n_subjects
        )));
    }
    if model.image_size() != data.image_size {
        return Err(Error::config(format!(
            "model image size {:?} differs from dataset {:?}",
            model.image_size(),
            data.image_size
        )));
    }
    Ok(())
}

/// Replaces every image with `G(x, c(y_s))`, `y_s ~ p(y_s)`; labels stay the originals.
pub fn protect_dataset<T: Scalar, M: PrivacyModel<T> + ?Sized>(
    model: &M,
    data: &Dataset,
    dist: &TargetDistribution,
    seed: u64,
) -> Result<Dataset> {
    check_compatible(model, data)?;
    let mut rng = keyed_substream(seed, Stream::Protect, 0);
    let targets = sample_target_identities(data.len(), model.n_subjects(), dist, &mut rng)?;
    let mut samples = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch = data.batch::<T>(chunk)?;
        let ys: Vec<u32> = chunk.iter().map(|&i| targets[i]).collect();
        let out = model.replace_identity(&batch.images, &ys)?;
        for (row, &i) in chunk.iter().enumerate() {
            let img = out.index_axis(Axis(0), row).mapv(|v| v.to_f32_lossy().clamp(-1.0, 1.0));
            let src = &data.samples[i];
            samples.push(FaceSample {
                image: img.into_dimensionality().map_err(|e| Error::shape(e.to_string()))?,
                identity: src.identity,
                pose: src.pose,
                video_id: src.video_id,
            });
        }
    }
    Ok(Dataset {
        samples,
        n_subjects: data.n_subjects,
        image_size: data.image_size,
    })
}

/// Encoder means of every image, with the original labels.
pub fn encode_dataset<T: Scalar, M: PrivacyModel<T> + ?Sized>(model: &M, data: &Dataset) -> Result<AttackData<T>> {
    check_compatible(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(CHUNK) {
        let batch = data.batch::<T>(chunk)?;
        parts.push(model.latent_means(&batch.images)?.into_dyn());
    }
    Ok(AttackData {
        inputs: attacker::stack_rows(&parts)?,
        identities: data.identities(),
        poses_deg: data.samples.iter().map(|s| s.pose).collect(),
    })
}

/// Images of a dataset as attacker inputs.
pub fn image_data<T: Scalar>(data: &Dataset) -> Result<AttackData<T>> {
    let batch = data.all::<T>()?;
    Ok(AttackData {
        inputs: batch.images,
        identities: batch.identities,
        poses_deg: data.samples.iter().map(|s| s.pose).collect(),
    })
}

/// Correct classification rate in percent.
pub fn ccr(predicted: &[u32], truth: &[u32]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(format!(
            "ccr needs equal, non-empty label lists ({} vs {})",
            predicted.len(),
            truth.len()
        )));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// Per-angle mean absolute error in degrees and its average.
pub fn mae(predicted: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<([f64; 3], f64)> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape(format!(
            "mae needs equal, non-empty pose lists ({} vs {})",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sums = [0.0; 3];
    for (p, t) in predicted.iter().zip(truth) {
        for k in 0..3 {
            sums[k] += (p[k] - t[k]).abs();
        }
    }
    let n = truth.len() as f64;
    let per = sums.map(|s| s / n);
    Ok((per, (per[0] + per[1] + per[2]) / 3.0))
}

/// Attacker train and test domains for one scenario. Both attackers train
/// on `train`.
struct ScenarioData<T: Scalar> {
    train: AttackData<T>,
    test: AttackData<T>,
    domain: Domain,
}

fn scenario_data<T: Scalar, M: PrivacyModel<T> + ?Sized>(
    scenario: ScenarioId,
    model: &M,
    split: &SplitPair,
    dist: &TargetDistribution,
    seed: u64,
) -> Result<ScenarioData<T>> {
    // Independent identity draws per scenario and per split.
    let protect_seed = |part: u64| seed ^ (scenario.index() * 2 + part).wrapping_mul(0xA24B_AED4_963E_E407);
    Ok(match scenario {
        ScenarioId::Unconstrained => ScenarioData {
            train: image_data(&split.train)?,
            test: image_data(&split.test)?,
            domain: Domain::Image,
        },
        ScenarioId::AttackI => ScenarioData {
            train: image_data(&split.train)?,
            test: image_data(&protect_dataset(model, &split.test, dist, protect_seed(1))?)?,
            domain: Domain::Image,
        },
        ScenarioId::AttackII => {
            let train = image_data(&protect_dataset(model, &split.train, dist, protect_seed(0))?)?;
            ScenarioData {
                train,
                    test: image_data(&protect_dataset(model, &split.test, dist, protect_seed(1))?)?,
                domain: Domain::Image,
            }
        }
        ScenarioId::AttackIII => ScenarioData {
            train: encode_dataset(model, &split.train)?,
            test: encode_dataset(model, &split.test)?,
            domain: Domain::Latent,
        },
    })
}

/// Trains both attackers for `scenario` and scores them on its test domain.
pub fn run_scenario<T: Scalar, M: PrivacyModel<T> + ?Sized>(
    scenario: ScenarioId,
    model: &M,
    split: &SplitPair,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    check_compatible(model, &split.train)?;
    check_compatible(model, &split.test)?;
    let sd = scenario_data::<T, M>(scenario, model, split, &config.target_identities, seed)?;
    let blocks = model.attacker_blocks();
    let ns = model.n_subjects();
    let attacker_seed = seed ^ scenario.index().wrapping_mul(0x9E37_79B9);
    let (identifier, id_curve) = train_attacker(
        AttackerKind::Identifier,
        sd.domain,
        &sd.train,
        ns,
        &blocks,
        &config.attacker,
        attacker_seed,
    )?;
    // Pose estimators train on the same domain as the identifier.
    let (estimator, pose_curve) = train_attacker(
        AttackerKind::PoseEstimator,
        sd.domain,
        &sd.train,
        ns,
        &blocks,
        &config.attacker,
        attacker_seed.wrapping_add(1),
    )?;
    let predicted = identifier.predict_identities(&sd.test.inputs);
    let identification_ccr = ccr(&predicted, &sd.test.identities)?;
    let truth: Vec<[f64; 3]> = sd.test.poses_deg.iter().map(|p| p.map(f64::from)).collect();
    let (pose_mae_deg, pose_mae_average) = mae(&estimator.predict_poses_deg(&sd.test.inputs), &truth)?;
    Ok(MetricsReport {
        scenario,
        identification_ccr,
        pose_mae_deg,
        pose_mae_average,
        n_test: sd.test.len(),
        attacker_fingerprint: config.attacker.fingerprint(),
        seed,
        identifier_curve: id_curve,
        pose_curve,
    })
}

/// Runs the configured scenarios in table order.
pub fn run_all<T: Scalar, M: PrivacyModel<T> + ?Sized>(
    model: &M,
    split: &SplitPair,
    config: &EvalConfig,
    seed: u64,
) -> Result<Vec<MetricsReport>> {
    let mut scenarios = config.scenarios.clone();
    scenarios.sort();
    scenarios.dedup();
    scenarios
        .into_iter()
        .map(|s| {
            ::log::info!("evaluating {s}");
            run_scenario::<T, M>(s, model, split, config, seed)
        })
        .collect()
}
