//! Generator (encoder + identity-conditioned decoder) and the three
//! discriminator networks: Wasserstein critic, identity classifier and
//! pose regressor.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::nn::{ConvNet, Decoder, InceptionSpec, Mlp, ParamSet};
use crate::scalar::{lit, Scalar};

/// Number of pose outputs: yaw, pitch, roll.
pub const POSE_DIMS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_subjects: usize,
    /// `[height, width, channels]`.
    pub image_size: [usize; 3],
    pub encoder_blocks: Vec<InceptionSpec>,
    pub decoder_base_channels: usize,
    pub decoder_blocks: Vec<InceptionSpec>,
    pub discriminator_blocks: Vec<InceptionSpec>,
    pub leaky_slope: f64,
    /// Share one convolutional trunk between the critic, identity and pose
    /// heads. The gradient penalty then also reaches the shared trunk.
    pub shared_trunk: bool,
}

impl ModelConfig {
    /// Default architecture: three stride-2 inception blocks per encoder and
    /// discriminator network, and a decoder mirroring them with three
    /// upsampling stages.
    pub fn new(n_subjects: usize, image_size: [usize; 3]) -> Self {
        ModelConfig {
            latent_dim: 64,
            n_subjects,
            image_size,
            encoder_blocks: vec![
                InceptionSpec { branch_channels: [4, 4, 8], stride: 2 },
                InceptionSpec { branch_channels: [8, 8, 16], stride: 2 },
                InceptionSpec { branch_channels: [16, 16, 32], stride: 2 },
            ],
            decoder_base_channels: 64,
            decoder_blocks: vec![
                InceptionSpec { branch_channels: [16, 16, 32], stride: 1 },
                InceptionSpec { branch_channels: [8, 8, 16], stride: 1 },
                InceptionSpec { branch_channels: [4, 4, 8], stride: 1 },
            ],
            discriminator_blocks: vec![
                InceptionSpec { branch_channels: [4, 4, 8], stride: 2 },
                InceptionSpec { branch_channels: [8, 8, 16], stride: 2 },
                InceptionSpec { branch_channels: [16, 16, 32], stride: 2 },
            ],
            leaky_slope: 0.2,
            shared_trunk: false,
        }
    }

    /// Reduced widths for single-core CPU runs on small images: the same
    /// depths as [`ModelConfig::new`], with a narrower decoder.
    pub fn compact(n_subjects: usize, image_size: [usize; 3]) -> Self {
        let spec = |c: [usize; 3], stride| InceptionSpec { branch_channels: c, stride };
        ModelConfig {
            latent_dim: 32,
            decoder_base_channels: 32,
            encoder_blocks: vec![spec([4, 4, 8], 2), spec([8, 8, 8], 2), spec([8, 8, 16], 2)],
            decoder_blocks: vec![spec([8, 8, 16], 1), spec([4, 4, 8], 1), spec([2, 2, 4], 1)],
            discriminator_blocks: vec![spec([4, 4, 8], 2), spec([8, 8, 8], 2), spec([8, 8, 16], 2)],
            ..ModelConfig::new(n_subjects, image_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        if self.n_subjects == 0 {
            return Err(Error::config("n_subjects must be >= 1"));
        }
        if self.image_size.contains(&0) {
            return Err(Error::config(format!("image_size has a zero side: {:?}", self.image_size)));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::config("leaky_slope must lie in [0, 1)"));
        }
        for b in self
            .encoder_blocks
            .iter()
            .chain(&self.decoder_blocks)
            .chain(&self.discriminator_blocks)
        {
            b.validate()?;
        }
        self.decoder().validate()
    }

    pub fn encoder(&self) -> ConvNet {
        ConvNet {
            input: self.image_size,
            blocks: self.encoder_blocks.clone(),
            head: Some(2 * self.latent_dim),
            slope: self.leaky_slope,
        }
    }

    pub fn decoder(&self) -> Decoder {
        Decoder {
            input: self.latent_dim + self.n_subjects,
            output: self.image_size,
            base_channels: self.decoder_base_channels,
            blocks: self.decoder_blocks.clone(),
            slope: self.leaky_slope,
        }
    }

    /// A standalone discriminator-style network with `out` outputs.
    pub fn discriminator(&self, out: usize) -> ConvNet {
        ConvNet {
            input: self.image_size,
            blocks: self.discriminator_blocks.clone(),
            head: Some(out),
            slope: self.leaky_slope,
        }
    }

    fn trunk(&self) -> ConvNet {
        ConvNet {
            head: None,
            ..self.discriminator(1)
        }
    }

    fn head(&self, out: usize) -> Mlp {
        Mlp {
            input: self.trunk().feature_dim(),
            hidden: Vec::new(),
            output: out,
            slope: self.leaky_slope,
        }
    }
}

/// One network's parameter block inside a [`ModelBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Encoder,
    Decoder,
    Trunk,
    Critic,
    Identity,
    Pose,
}

impl Partition {
    pub const GENERATOR: [Partition; 2] = [Partition::Encoder, Partition::Decoder];
    pub const DISCRIMINATOR: [Partition; 4] =
        [Partition::Trunk, Partition::Critic, Partition::Identity, Partition::Pose];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Encoder => "encoder",
            Partition::Decoder => "decoder",
            Partition::Trunk => "trunk",
            Partition::Critic => "critic",
            Partition::Identity => "identity",
            Partition::Pose => "pose",
        }
    }

    pub fn is_generator(self) -> bool {
        matches!(self, Partition::Encoder | Partition::Decoder)
    }
}

/// Which partitions receive gradients in a bound forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    None,
    Generator,
    Discriminator,
    All,
}

impl Trainable {
    fn includes(self, p: Partition) -> bool {
        match self {
            Trainable::None => false,
            Trainable::Generator => p.is_generator(),
            Trainable::Discriminator => !p.is_generator(),
            Trainable::All => true,
        }
    }
}

/// Parameters of every network, plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T: Scalar> {
    pub config: ModelConfig,
    pub encoder: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub trunk: Option<ParamSet<T>>,
    pub critic: ParamSet<T>,
    pub identity: ParamSet<T>,
    pub pose: ParamSet<T>,
}

impl<T: Scalar> ModelBundle<T> {
    /// Fresh parameters: zero-mean Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder().init("encoder", rng);
        let decoder = config.decoder().init("decoder", rng);
        let ns = config.n_subjects;
        let (trunk, critic, identity, pose) = if config.shared_trunk {
            (
                Some(config.trunk().init("trunk", rng)),
                config.head(1).init("critic", rng),
                config.head(ns).init("identity", rng),
                config.head(POSE_DIMS).init("pose", rng),
            )
        } else {
            (
                None,
                config.discriminator(1).init("critic", rng),
                config.discriminator(ns).init("identity", rng),
                config.discriminator(POSE_DIMS).init("pose", rng),
            )
        };
        Ok(ModelBundle {
            config,
            encoder,
            decoder,
            trunk,
            critic,
            identity,
            pose,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn n_subjects(&self) -> usize {
        self.config.n_subjects
    }

    pub fn partitions(&self) -> Vec<(Partition, &ParamSet<T>)> {
        let mut out = vec![(Partition::Encoder, &self.encoder), (Partition::Decoder, &self.decoder)];
        if let Some(t) = &self.trunk {
            out.push((Partition::Trunk, t));
        }
        out.push((Partition::Critic, &self.critic));
        out.push((Partition::Identity, &self.identity));
        out.push((Partition::Pose, &self.pose));
        out
    }

    pub fn partition_mut(&mut self, p: Partition) -> Option<&mut ParamSet<T>> {
        match p {
            Partition::Encoder => Some(&mut self.encoder),
            Partition::Decoder => Some(&mut self.decoder),
            Partition::Trunk => self.trunk.as_mut(),
            Partition::Critic => Some(&mut self.critic),
            Partition::Identity => Some(&mut self.identity),
            Partition::Pose => Some(&mut self.pose),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.partitions().iter().map(|(_, p)| p.num_scalars()).sum()
    }

    /// Checksum over the partitions of one side of the game.
    pub fn checksum(&self, generator: bool) -> String {
        self.partitions()
            .into_iter()
            .filter(|(p, _)| p.is_generator() == generator)
            .map(|(_, ps)| ps.checksum())
            .collect::<Vec<_>>()
            .join(":")
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            trunk: self.trunk.as_ref().map(ParamSet::cast),
            critic: self.critic.cast(),
            identity: self.identity.cast(),
            pose: self.pose.cast(),
        }
    }

    pub fn bind(&self, trainable: Trainable) -> BoundModel<'_, T> {
        let b = |p: Partition, ps: &ParamSet<T>| ps.bind(trainable.includes(p));
        BoundModel {
            model: self,
            encoder: b(Partition::Encoder, &self.encoder),
            decoder: b(Partition::Decoder, &self.decoder),
            trunk: self.trunk.as_ref().map(|t| b(Partition::Trunk, t)),
            critic: b(Partition::Critic, &self.critic),
            identity: b(Partition::Identity, &self.identity),
            pose: b(Partition::Pose, &self.pose),
        }
    }

    pub fn check_images(&self, images: &ArrayD<T>) -> Result<usize> {
        let s = images.shape();
        let [h, w, c] = self.config.image_size;
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::shape(format!(
                "expected images of shape [N, {h}, {w}, {c}], got {s:?}"
            )));
        }
        Ok(s[0])
    }

    /// Encoder heads: `(mean, log_variance)`, each `[N, latent_dim]`.
    pub fn encode(&self, images: &ArrayD<T>) -> Result<LatentCode<T>> {
        self.check_images(images)?;
        no_grad(|| {
            let bound = self.bind(Trainable::None);
            let (mean, logvar) = bound.encode(&Var::constant(images.clone()));
            Ok(LatentCode {
                mean: to2(mean),
                log_variance: to2(logvar),
                sample: None,
            })
        })
    }

    /// Decodes latent rows conditioned on identity-code rows; output in `[-1, 1]`.
    pub fn decode(&self, z: &Array2<T>, codes: &Array2<T>) -> Result<ArrayD<T>> {
        if z.ncols() != self.latent_dim() {
            return Err(Error::shape(format!(
                "latent width {} != latent_dim {}",
                z.ncols(),
                self.latent_dim()
            )));
        }
        if codes.ncols() != self.n_subjects() {
            return Err(Error::shape(format!(
                "identity code length {} != n_subjects {}",
                codes.ncols(),
                self.n_subjects()
            )));
        }
        if z.nrows() != codes.nrows() {
            return Err(Error::shape(format!(
                "batch sizes differ: {} latents vs {} codes",
                z.nrows(),
                codes.nrows()
            )));
        }
        no_grad(|| {
            let bound = self.bind(Trainable::None);
            let out = bound.decode(
                &Var::constant(z.clone().into_dyn()),
                &Var::constant(codes.clone().into_dyn()),
            );
            Ok(out.into_value())
        })
    }

    pub fn critic_score(&self, images: &ArrayD<T>) -> Result<Array1<T>> {
        self.check_images(images)?;
        Ok(no_grad(|| {
            let v = self.bind(Trainable::None).critic(&Var::constant(images.clone()));
            v.into_value().into_dimensionality().unwrap()
        }))
    }

    pub fn identity_probs(&self, images: &ArrayD<T>) -> Result<Array2<T>> {
        self.check_images(images)?;
        Ok(no_grad(|| {
            to2(self.bind(Trainable::None).identity_probs(&Var::constant(images.clone())))
        }))
    }

    /// Normalized pose predictions (degrees / 90), `[N, 3]`.
    pub fn pose_estimate(&self, images: &ArrayD<T>) -> Result<Array2<T>> {
        self.check_images(images)?;
        Ok(no_grad(|| to2(self.bind(Trainable::None).pose(&Var::constant(images.clone())))))
    }

    /// Identity replacement: decode the encoder mean under each row's identity code.
    pub fn replace_identity(&self, images: &ArrayD<T>, codes: &Array2<T>) -> Result<ArrayD<T>> {
        let latent = self.encode(images)?;
        self.decode(&latent.mean, codes)
    }
}

fn to2<T: Scalar>(v: Var<T>) -> Array2<T> {
    v.into_value().into_dimensionality().expect("2-D output")
}

/// Parameters of a [`ModelBundle`] bound as graph leaves for one forward pass.
pub struct BoundModel<'a, T: Scalar> {
    pub model: &'a ModelBundle<T>,
    pub encoder: Vec<Var<T>>,
    pub decoder: Vec<Var<T>>,
    pub trunk: Option<Vec<Var<T>>>,
    pub critic: Vec<Var<T>>,
    pub identity: Vec<Var<T>>,
    pub pose: Vec<Var<T>>,
}

impl<T: Scalar> BoundModel<'_, T> {
    pub fn generator_vars(&self) -> Vec<&Var<T>> {
        self.encoder.iter().chain(&self.decoder).collect()
    }

    pub fn discriminator_vars(&self) -> Vec<&Var<T>> {
        self.trunk
            .iter()
            .flatten()
            .chain(&self.critic)
            .chain(&self.identity)
            .chain(&self.pose)
            .collect()
    }

    pub fn encode(&self, x: &Var<T>) -> (Var<T>, Var<T>) {
        let d = self.model.latent_dim();
        let h = self.model.config.encoder().forward(&self.encoder, x);
        (h.narrow_last(0, d), h.narrow_last(d, d))
    }

    /// The identity code is concatenated to `z` at the decoder input.
    pub fn decode(&self, z: &Var<T>, codes: &Var<T>) -> Var<T> {
        let input = Var::concat_last(&[z.clone(), codes.clone()]);
        self.model.config.decoder().forward(&self.decoder, &input)
    }

    fn head(&self, params: &[Var<T>], out: usize, x: &Var<T>) -> Var<T> {
        let cfg = &self.model.config;
        match &self.trunk {
            Some(trunk) => {
                let features = cfg.trunk().forward(trunk, x);
                cfg.head(out).forward(params, &features)
            }
            None => cfg.discriminator(out).forward(params, x),
        }
    }

    /// Unbounded critic score per image, `[N]`.
    pub fn critic(&self, x: &Var<T>) -> Var<T> {
        let n = x.shape()[0];
        self.head(&self.critic, 1, x).reshape(&[n])
    }

    pub fn identity_logits(&self, x: &Var<T>) -> Var<T> {
        self.head(&self.identity, self.model.n_subjects(), x)
    }

    pub fn identity_probs(&self, x: &Var<T>) -> Var<T> {
        self.identity_logits(x).softmax_last()
    }

    pub fn pose(&self, x: &Var<T>) -> Var<T> {
        self.head(&self.pose, POSE_DIMS, x)
    }
}

/// Encoder output for a batch: Gaussian posterior parameters and, when
/// drawn, the reparameterized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T: Scalar> {
    pub mean: Array2<T>,
    pub log_variance: Array2<T>,
    pub sample: Option<Array2<T>>,
}

impl<T: Scalar> LatentCode<T> {
    /// Draws `sample = mean + exp(log_variance / 2) ⊙ noise`.
    pub fn with_sample(mut self, noise: &Array2<T>) -> Result<Self> {
        self.sample = Some(reparameterize(&self.mean, &self.log_variance, noise)?);
        Ok(self)
    }
}

/// `mean + exp(log_variance / 2) ⊙ noise`.
pub fn reparameterize<T: Scalar>(
    mean: &Array2<T>,
    log_variance: &Array2<T>,
    noise: &Array2<T>,
) -> Result<Array2<T>> {
    if mean.shape() != log_variance.shape() || mean.shape() != noise.shape() {
        return Err(Error::shape(format!(
            "reparameterize: mean {:?}, log_variance {:?}, noise {:?}",
            mean.shape(),
            log_variance.shape(),
            noise.shape()
        )));
    }
    let finite = |a: &Array2<T>| a.iter().all(|v| v.is_finite());
    if !finite(mean) || !finite(log_variance) || !finite(noise) {
        return Err(Error::NonFinite("reparameterize input".into()));
    }
    let half = lit::<T>(0.5);
    Ok(mean + &(log_variance.mapv(|v| (v * half).exp()) * noise))
}

/// Differentiable form of [`reparameterize`].
pub fn reparameterize_var<T: Scalar>(mean: &Var<T>, log_variance: &Var<T>, noise: &ArrayD<T>) -> Var<T> {
    log_variance.scale(lit(0.5)).exp().mul_const(noise).add(mean)
}

/// Identity-conditioning vector: one-hot during training, a convex
/// combination of one-hot codes when morphing.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCode<T: Scalar>(Array1<T>);

impl<T: Scalar> IdentityCode<T> {
    /// Accepts any nonnegative vector whose entries sum to one (within 1e-6).
    pub fn new(v: Array1<T>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::Range("identity code is empty".into()));
        }
        if v.iter().any(|x| !x.is_finite() || *x < T::zero()) {
            return Err(Error::Range("identity code has negative or non-finite entries".into()));
        }
        let sum = v.sum().to_f64_lossy();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Range(format!("identity code sums to {sum}, not 1")));
        }
        Ok(IdentityCode(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_array(&self) -> &Array1<T> {
        &self.0
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.iter().filter(|&&x| x == T::one()).count() == 1
            && self.0.iter().all(|&x| x == T::zero() || x == T::one())
    }
}

/// One-hot code for the 1-based identity `y` among `n_subjects`.
pub fn one_hot<T: Scalar>(y: u32, n_subjects: usize) -> Result<IdentityCode<T>> {
    if y == 0 || y as usize > n_subjects {
        return Err(Error::Index(format!("identity {y} outside 1..={n_subjects}")));
    }
    let mut v = Array1::zeros(n_subjects);
    v[y as usize - 1] = T::one();
    Ok(IdentityCode(v))
}

/// Stacks one-hot codes for a batch of 1-based identities into `[N, n_subjects]`.
pub fn one_hot_rows<T: Scalar>(ids: &[u32], n_subjects: usize) -> Result<Array2<T>> {
    let mut out = Array2::zeros((ids.len(), n_subjects));
    for (mut row, &y) in out.axis_iter_mut(Axis(0)).zip(ids) {
        row.assign(one_hot::<T>(y, n_subjects)?.as_array());
    }
    Ok(out)
}

/// Stacks identity codes into `[N, n_subjects]`.
pub fn code_rows<T: Scalar>(codes: &[IdentityCode<T>]) -> Result<Array2<T>> {
    let n = codes.first().map_or(0, |c| c.len());
    let mut out = Array2::zeros((codes.len(), n));
    for (mut row, c) in out.axis_iter_mut(Axis(0)).zip(codes) {
        if c.len() != n {
            return Err(Error::shape("identity codes of different lengths"));
        }
        row.assign(c.as_array());
    }
    Ok(out)
}

/// Stacks single images `[H, W, C]` into a batch `[N, H, W, C]`.
pub fn stack_images<T: Scalar>(images: &[&ArrayD<T>]) -> Result<ArrayD<T>> {
    let first = images.first().ok_or_else(|| Error::shape("empty image list"))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut flat = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("images of different shapes"));
        }
        flat.extend(im.iter().copied());
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), flat).expect("shape computed from inputs"))
}
