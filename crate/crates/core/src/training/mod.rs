//! Alternating WGAN-GP/VAE optimization with Adam, seeded substreams,
//! structured logging and checkpoints.

mod checkpoint;
mod critic_probe;
mod records;

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array2, ArrayD};
use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_loss, draw_mixing, generator_loss, DiscriminatorLossBreakdown, GeneratorLossBreakdown, LossBatch,
    LossWeights,
};
use crate::model::{ModelBundle, ModelConfig, Partition, Trainable};
use crate::optim::{adam_update, AdamConfig, AdamMoments};
use crate::rng::{keyed_substream, substream, Stream, TrainRng};
use crate::scalar::Scalar;

pub use self::checkpoint::{
    config_diff, fingerprint, load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader,
};
pub use self::records::{read_log, JsonLinesLog, LogRecord, StepKind};
pub use self::critic_probe::{probe_gaussian_critic, CriticProbeConfig, CriticProbeReport};

/// Distribution `p(y_s)` of target identities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetDistribution {
    #[default]
    Uniform,
    /// Unnormalized weights for identities `1..=len`.
    Weighted { weights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub losses: LossWeights,
    pub critic_steps: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on generator steps, applied after `epochs`.
    pub max_generator_steps: Option<u64>,
    pub seed: u64,
    /// Log every n-th generator step (and the critic steps before it).
    pub log_every: u64,
    /// Checkpoint every n-th generator step.
    pub checkpoint_every: Option<u64>,
    pub target_identities: TargetDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            losses: LossWeights::default(),
            critic_steps: 5,
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 10,
            max_generator_steps: None,
            seed: 0,
            log_every: 10,
            checkpoint_every: None,
            target_identities: TargetDistribution::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        self.adam.validate()?;
        if self.critic_steps < 1 {
            return Err(Error::config("critic_steps must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be >= 2"));
        }
        if self.log_every == 0 || self.checkpoint_every == Some(0) {
            return Err(Error::config("log_every and checkpoint_every must be >= 1"));
        }
        if let TargetDistribution::Weighted { weights } = &self.target_identities {
            WeightedIndex::new(weights).map_err(|e| Error::config(format!("target_identities: {e}")))?;
        }
        Ok(())
    }
}

/// i.i.d. draws from `p(y_s)`, 1-based.
pub fn sample_target_identities<R: Rng>(
    n: usize,
    n_subjects: usize,
    dist: &TargetDistribution,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if n_subjects == 0 {
        return Err(Error::config("n_subjects must be >= 1"));
    }
    match dist {
        TargetDistribution::Uniform => Ok((0..n).map(|_| rng.random_range(1..=n_subjects as u32)).collect()),
        TargetDistribution::Weighted { weights } => {
            if weights.len() != n_subjects {
                return Err(Error::config(format!(
                    "{} target weights for {n_subjects} subjects",
                    weights.len()
                )));
            }
            let w = WeightedIndex::new(weights).map_err(|e| Error::config(e.to_string()))?;
            Ok((0..n).map(|_| w.sample(rng) as u32 + 1).collect())
        }
    }
}

/// Standard-normal matrix drawn in `f64` so both precisions see the same noise.
pub fn standard_normal<T: Scalar, R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::from_f64_lossy(StandardNormal.sample(rng))
    })
}

/// Stochastic inputs of one step.
#[derive(Debug, Clone)]
pub struct StepDraws<T: Scalar> {
    pub targets: Vec<u32>,
    pub noise: Array2<T>,
    pub mix: Vec<T>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub model: ModelBundle<T>,
    /// Adam moments, one entry per partition in [`ModelBundle::partitions`] order.
    pub moments: Vec<(Partition, AdamMoments<T>)>,
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub rng: TrainRng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model_config: ModelConfig, train: &TrainConfig) -> Result<Self> {
        let model = ModelBundle::init(model_config, &mut substream(train.seed, Stream::Init))?;
        Ok(Self::from_model(model, train.seed))
    }

    pub fn from_model(model: ModelBundle<T>, seed: u64) -> Self {
        let moments = model
            .partitions()
            .into_iter()
            .map(|(p, ps)| (p, AdamMoments::zeros_like(ps)))
            .collect();
        TrainState {
            model,
            moments,
            generator_steps: 0,
            discriminator_steps: 0,
            rng: TrainRng::new(seed),
        }
    }

    pub fn draws(&mut self, n: usize, dist: &TargetDistribution) -> Result<StepDraws<T>> {
        Ok(StepDraws {
            targets: sample_target_identities(n, self.model.n_subjects(), dist, &mut self.rng.targets)?,
            noise: standard_normal(n, self.model.latent_dim(), &mut self.rng.noise),
            mix: draw_mixing(n, &mut self.rng.mixing),
        })
    }

    /// Applies one Adam step to the partitions of one side. Nothing is
    /// written unless every new value is finite.
    fn apply(&mut self, generator_side: bool, grads: Vec<ArrayD<T>>, adam: &AdamConfig, t: u64) -> Result<()> {
        let mut grads = grads.into_iter();
        let mut staged = Vec::new();
        for (i, (p, moments)) in self.moments.iter().enumerate() {
            if p.is_generator() != generator_side {
                continue;
            }
            let params = self.model.partitions()[i].1;
            let g: Vec<_> = grads.by_ref().take(params.len()).collect();
            if g.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name())));
            }
            let (np, nm) = adam_update(adam, t, params, moments, &g)?;
            if !np.all_finite() {
                return Err(Error::NonFinite(format!("updated parameters of {}", p.name())));
            }
            staged.push((i, *p, np, nm));
        }
        for (i, p, np, nm) in staged {
            *self.model.partition_mut(p).expect("partition exists") = np;
            self.moments[i].1 = nm;
        }
        Ok(())
    }
}

fn loss_batch<'a, T: Scalar>(batch: &'a Batch<T>, draws: &'a StepDraws<T>) -> LossBatch<'a, T> {
    LossBatch {
        images: &batch.images,
        identities: &batch.identities,
        poses: &batch.poses,
        targets: &draws.targets,
        noise: &draws.noise,
    }
}

fn all_finite<T: Scalar>(terms: &[(&'static str, T)]) -> bool {
    terms.iter().all(|(_, v)| v.is_finite())
}

/// One ascent step on the cost of the critic, identity and pose networks
/// with the given draws. Generator parameters are bound as constants.
pub fn discriminator_step_with<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
    draws: &StepDraws<T>,
) -> Result<DiscriminatorLossBreakdown<T>> {
    let (breakdown, grads) = {
        let bound = state.model.bind(Trainable::Discriminator);
        let (total, breakdown) = discriminator_loss(&bound, &loss_batch(batch, draws), &config.losses, &draws.mix)?;
        if !all_finite(&breakdown.terms()) {
            return Err(Error::NonFinite(format!("discriminator loss {breakdown:?}")));
        }
        let vars = bound.discriminator_vars();
        let grads: Vec<_> = grad(&total.neg(), &vars, false).into_iter().map(Var::into_value).collect();
        (breakdown, grads)
    };
    state.apply(false, grads, &config.adam, state.discriminator_steps + 1)?;
    state.discriminator_steps += 1;
    Ok(breakdown)
}

pub fn discriminator_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
) -> Result<DiscriminatorLossBreakdown<T>> {
    let draws = state.draws(batch.identities.len(), &config.target_identities)?;
    discriminator_step_with(state, config, batch, &draws)
}

/// One descent step on the generator cost; discriminator parameters are
/// bound as constants.
pub fn generator_step_with<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
    draws: &StepDraws<T>,
) -> Result<GeneratorLossBreakdown<T>> {
    let (breakdown, grads) = {
        let bound = state.model.bind(Trainable::Generator);
        let (total, breakdown) = generator_loss(&bound, &loss_batch(batch, draws), &config.losses)?;
        if !all_finite(&breakdown.terms()) {
            return Err(Error::NonFinite(format!("generator loss {breakdown:?}")));
        }
        let vars = bound.generator_vars();
        let grads: Vec<_> = grad(&total, &vars, false).into_iter().map(Var::into_value).collect();
        (breakdown, grads)
    };
    state.apply(true, grads, &config.adam, state.generator_steps + 1)?;
    state.generator_steps += 1;
    Ok(breakdown)
}

pub fn generator_step<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    batch: &Batch<T>,
) -> Result<GeneratorLossBreakdown<T>> {
    let draws = state.draws(batch.identities.len(), &config.target_identities)?;
    generator_step_with(state, config, batch, &draws)
}

/// Minibatch order. Permutations are pure functions of (seed, stream, epoch)
/// so a resumed run sees the same batches without storing them.
#[derive(Debug)]
pub struct BatchSchedule {
    seed: u64,
    n: usize,
    batch_size: usize,
    cache: HashMap<(Stream, u64), Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Result<Self> {
        if n < batch_size {
            return Err(Error::config(format!(
                "training set has {n} samples, fewer than batch_size {batch_size}"
            )));
        }
        Ok(BatchSchedule {
            seed,
            n,
            batch_size,
            cache: HashMap::new(),
        })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.n / self.batch_size) as u64
    }

    /// Sample indices for step `step` of the given stream.
    pub fn indices(&mut self, stream: Stream, step: u64) -> Vec<usize> {
        let per = self.batches_per_epoch();
        let (epoch, pos) = (step / per, (step % per) as usize);
        let (seed, n) = (self.seed, self.n);
        // Only the current epoch is ever needed again.
        self.cache.retain(|k, _| k.0 != stream || k.1 == epoch);
        let perm = self.cache.entry((stream, epoch)).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut keyed_substream(seed, stream, epoch));
            p
        });
        perm[pos * self.batch_size..(pos + 1) * self.batch_size].to_vec()
    }
}

/// Receives log records and checkpoint opportunities during [`train`].
pub trait TrainObserver<T: Scalar> {
    fn record(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    fn checkpoint(&mut self, _state: &TrainState<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainObserver<T> for () {}

/// Outcome of a call to [`train`].
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub generator_steps: u64,
    pub discriminator_steps: u64,
    pub retried_steps: u64,
    pub last_generator: Option<GeneratorLossBreakdown<f64>>,
    pub last_discriminator: Option<DiscriminatorLossBreakdown<f64>>,
}

/// Total generator steps a config asks for on a dataset of `n` samples.
pub fn planned_generator_steps(config: &TrainConfig, n: usize) -> u64 {
    let per = (n / config.batch_size.max(1)) as u64;
    let total = config.epochs as u64 * per;
    config.max_generator_steps.map_or(total, |cap| total.min(cap))
}

fn widen_g<T: Scalar>(b: &GeneratorLossBreakdown<T>) -> GeneratorLossBreakdown<f64> {
    GeneratorLossBreakdown {
        adversarial: b.adversarial.to_f64_lossy(),
        identity_nll: b.identity_nll.to_f64_lossy(),
        pose_l1: b.pose_l1.to_f64_lossy(),
        recon_l2: b.recon_l2.to_f64_lossy(),
        kl: b.kl.to_f64_lossy(),
        total: b.total.to_f64_lossy(),
        weights: b.weights,
    }
}

fn widen_d<T: Scalar>(b: &DiscriminatorLossBreakdown<T>) -> DiscriminatorLossBreakdown<f64> {
    DiscriminatorLossBreakdown {
        wasserstein_gap: b.wasserstein_gap.to_f64_lossy(),
        identity_loglik: b.identity_loglik.to_f64_lossy(),
        pose_l1_real: b.pose_l1_real.to_f64_lossy(),
        gradient_penalty: b.gradient_penalty.to_f64_lossy(),
        total: b.total.to_f64_lossy(),
        weights: b.weights,
        gp_gamma: b.gp_gamma,
    }
}

/// Runs `step` and retries once with fresh draws if it reports a non-finite
/// value. A second consecutive failure aborts training.
fn with_retry<T: Scalar, B>(
    state: &mut TrainState<T>,
    retried: &mut u64,
    last: &str,
    mut step: impl FnMut(&mut TrainState<T>) -> Result<B>,
) -> Result<B> {
    match step(state) {
        Err(Error::NonFinite(first)) => {
            ::log::warn!("non-finite step ({first}); retrying with fresh draws");
            *retried += 1;
            step(state).map_err(|e| match e {
                Error::NonFinite(second) => {
                    Error::Diverged(format!("first: {first}; retry: {second}; last logged: {last}"))
                }
                other => other,
            })
        }
        other => other,
    }
}

/// Alternates `critic_steps` discriminator steps with one generator step
/// until the planned number of generator steps is reached. Continues from
/// the step counters in `state`, so a restored checkpoint resumes exactly.
pub fn train<T: Scalar>(
    state: &mut TrainState<T>,
    config: &TrainConfig,
    data: &Dataset,
    observer: &mut dyn TrainObserver<T>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.n_subjects != state.model.n_subjects() || data.image_size != state.model.config.image_size {
        return Err(Error::config(format!(
            "dataset ({} subjects, {:?}) does not match model ({} subjects, {:?})",
            data.n_subjects,
            data.image_size,
            state.model.n_subjects(),
            state.model.config.image_size
        )));
    }
    let mut schedule = BatchSchedule::new(config.seed, data.len(), config.batch_size)?;
    let total = planned_generator_steps(config, data.len());
    let start = Instant::now();
    let mut summary = TrainSummary {
        generator_steps: state.generator_steps,
        discriminator_steps: state.discriminator_steps,
        retried_steps: 0,
        last_generator: None,
        last_discriminator: None,
    };
    let mut last_logged = String::from("none");

    while state.generator_steps < total {
        let logging = (state.generator_steps + 1).is_multiple_of(config.log_every);
        for _ in 0..config.critic_steps {
            let idx = schedule.indices(Stream::CriticShuffle, state.discriminator_steps);
            let batch = data.batch::<T>(&idx)?;
            let bd = with_retry(state, &mut summary.retried_steps, &last_logged, |s| {
                discriminator_step(s, config, &batch)
            })?;
            let bd = widen_d(&bd);
            if logging {
                let rec = LogRecord::discriminator(state.discriminator_steps, start.elapsed(), &bd);
                observer.record(&rec)?;
            }
            summary.last_discriminator = Some(bd);
        }
        let idx = schedule.indices(Stream::GeneratorShuffle, state.generator_steps);
        let batch = data.batch::<T>(&idx)?;
        let bg = with_retry(state, &mut summary.retried_steps, &last_logged, |s| {
            generator_step(s, config, &batch)
        })?;
        let bg = widen_g(&bg);
        if logging {
            let rec = LogRecord::generator(state.generator_steps, start.elapsed(), &bg);
            last_logged = serde_json::to_string(&rec)?;
            observer.record(&rec)?;
        }
        summary.last_generator = Some(bg);
        if config.checkpoint_every.is_some_and(|k| state.generator_steps.is_multiple_of(k)) {
            observer.checkpoint(state)?;
        }
    }
    summary.generator_steps = state.generator_steps;
    summary.discriminator_steps = state.discriminator_steps;
    Ok(summary)
}
