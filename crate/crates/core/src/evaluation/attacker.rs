//! Identifier and pose-estimator attackers over images or latent codes.

use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::losses::{identity_nll, pose_l1};
use crate::model::POSE_DIMS;
use crate::nn::{ConvNet, InceptionSpec, Mlp, ParamSet};
use crate::optim::{adam_update, AdamConfig, AdamMoments};
use crate::rng::{keyed_substream, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    Identifier,
    PoseEstimator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Image,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Hidden widths of latent-domain perceptrons.
    pub latent_hidden: Vec<usize>,
    /// Image-domain blocks; empty means "copy the model's discriminator".
    pub image_blocks: Vec<InceptionSpec>,
    pub leaky_slope: f64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig {
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            latent_hidden: vec![256, 256],
            image_blocks: Vec::new(),
            leaky_slope: 0.2,
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("attacker batch_size must be >= 1"));
        }
        for b in &self.image_blocks {
            b.validate()?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))[..16].to_string()
    }
}

/// Labelled attacker inputs: images `[N, H, W, C]` or latents `[N, d]`.
#[derive(Debug, Clone)]
pub struct AttackData<T: Scalar> {
    pub inputs: ArrayD<T>,
    pub identities: Vec<u32>,
    pub poses_deg: Vec<[f32; 3]>,
}

impl<T: Scalar> AttackData<T> {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> ArrayD<T> {
        self.inputs.select(Axis(0), idx)
    }
}

/// One point of an attacker's training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub epoch: usize,
    pub mean_loss: f64,
    /// CCR (%) for identifiers, MAE average (degrees) for pose estimators,
    /// measured on the training batches of that epoch.
    pub train_metric: f64,
}

#[derive(Debug, Clone)]
enum Net {
    Conv(ConvNet),
    Dense(Mlp),
}

/// A trained attacker.
#[derive(Debug, Clone)]
pub struct Attacker<T: Scalar> {
    pub kind: AttackerKind,
    pub domain: Domain,
    net: Net,
    params: ParamSet<T>,
    /// Latent standardization learned from the training inputs.
    shift: Option<(Array1<T>, Array1<T>)>,
}

const INFER_CHUNK: usize = 128;

impl<T: Scalar> Attacker<T> {
    fn forward(&self, params: &[Var<T>], x: &ArrayD<T>) -> Var<T> {
        let x = match &self.shift {
            Some((mean, scale)) => {
                let x2 = x.view().into_dimensionality::<ndarray::Ix2>().expect("latent rows");
                ((&x2 - mean) / scale).into_dyn()
            }
            None => x.clone(),
        };
        let x = Var::constant(x);
        match &self.net {
            Net::Conv(c) => c.forward(params, &x),
            Net::Dense(m) => m.forward(params, &x),
        }
    }

    fn outputs(&self, inputs: &ArrayD<T>) -> Array2<T> {
        no_grad(|| {
            let params = self.params.bind(false);
            let n = inputs.shape()[0];
            let mut chunks = Vec::new();
            for start in (0..n).step_by(INFER_CHUNK) {
                let end = (start + INFER_CHUNK).min(n);
                let x = inputs.slice_axis(Axis(0), (start..end).into()).to_owned();
                let y = self.forward(&params, &x).into_value();
                chunks.push(y.into_dimensionality::<ndarray::Ix2>().expect("2-D head"));
            }
            let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        })
    }

    /// Argmax identity (1-based) per row.
    pub fn predict_identities(&self, inputs: &ArrayD<T>) -> Vec<u32> {
        self.outputs(inputs)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = i;
                    }
                }
                best as u32 + 1
            })
            .collect()
    }

    /// Pose predictions in degrees.
    pub fn predict_poses_deg(&self, inputs: &ArrayD<T>) -> Vec<[f64; 3]> {
        self.outputs(inputs)
            .rows()
            .into_iter()
            .map(|r| [0, 1, 2].map(|k| r[k].to_f64_lossy() * 90.0))
            .collect()
    }
}

fn poses_normalized<T: Scalar>(poses: &[[f32; 3]]) -> Array2<T> {
    Array2::from_shape_fn((poses.len(), POSE_DIMS), |(i, k)| T::from_f32_exact(poses[i][k]) / T::from_f32_exact(90.0))
}

/// Trains an attacker with minibatch Adam and seeded per-epoch shuffles.
pub fn train_attacker<T: Scalar>(
    kind: AttackerKind,
    domain: Domain,
    data: &AttackData<T>,
    n_subjects: usize,
    default_blocks: &[InceptionSpec],
    config: &AttackerConfig,
    seed: u64,
) -> Result<(Attacker<T>, Vec<ConvergencePoint>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::config("attacker training data is empty"));
    }
    if kind == AttackerKind::Identifier {
        let first = data.identities[0];
        if data.identities.iter().all(|&y| y == first) {
            return Err(Error::config("identifier training data contains a single class"));
        }
    }
    let out = match kind {
        AttackerKind::Identifier => n_subjects,
        AttackerKind::PoseEstimator => POSE_DIMS,
    };
    let shape = data.inputs.shape().to_vec();
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(Stream::Attacker as u64);
    let (net, shift) = match domain {
        Domain::Image => {
            if shape.len() != 4 {
                return Err(Error::shape(format!("image attacker needs [N,H,W,C] inputs, got {shape:?}")));
            }
            let blocks = if config.image_blocks.is_empty() { default_blocks.to_vec() } else { config.image_blocks.clone() };
            let net = ConvNet {
                input: [shape[1], shape[2], shape[3]],
                blocks,
                head: Some(out),
                slope: config.leaky_slope,
            };
            (Net::Conv(net), None)
        }
        Domain::Latent => {
            if shape.len() != 2 {
                return Err(Error::shape(format!("latent attacker needs [N,d] inputs, got {shape:?}")));
            }
            let x = data.inputs.view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
            let mean = x.mean_axis(Axis(0)).expect("non-empty");
            let floor = T::from_f64_lossy(1e-6);
            let scale = x.std_axis(Axis(0), T::zero()).mapv(|s| if s > floor { s } else { T::one() });
            let net = Mlp {
                input: shape[1],
                hidden: config.latent_hidden.clone(),
                output: out,
                slope: config.leaky_slope,
            };
            (Net::Dense(net), Some((mean, scale)))
        }
    };
    let params = match &net {
        Net::Conv(c) => c.init("attacker", &mut init_rng),
        Net::Dense(m) => m.init("attacker", &mut init_rng),
    };
    let mut attacker = Attacker {
        kind,
        domain,
        net,
        params,
        shift,
    };
    let mut moments = AdamMoments::zeros_like(&attacker.params);
    let poses = poses_normalized::<T>(&data.poses_deg);
    let n = data.len();
    let b = config.batch_size.min(n);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut keyed_substream(seed, Stream::Attacker, epoch as u64 + 1));
        let (mut loss_sum, mut metric_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(b) {
            let x = data.rows(idx);
            let (loss, metric, grads) = {
                let vars = attacker.params.bind(true);
                let y = attacker.forward(&vars, &x);
                let (loss, metric) = match kind {
                    AttackerKind::Identifier => {
                        let labels: Vec<u32> = idx.iter().map(|&i| data.identities[i]).collect();
                        let probs = y.softmax_last();
                        let hits = probs
                            .value()
                            .rows()
                            .into_iter()
                            .zip(&labels)
                            .filter(|(r, &l)| {
                                let top = r.iter().cloned().fold(T::neg_infinity(), T::max);
                                r[l as usize - 1] == top
                            })
                            .count();
                        (identity_nll(&probs, &labels)?, 100.0 * hits as f64 / labels.len() as f64)
                    }
                    AttackerKind::PoseEstimator => {
                        let target = Var::constant(poses.select(Axis(0), idx).into_dyn());
                        let l = pose_l1(&target, &y)?;
                        // Mean over angles of the per-angle MAE, in degrees.
                        (l.clone(), l.item().to_f64_lossy() * 90.0 / 3.0)
                    }
                };
                let refs: Vec<&Var<T>> = vars.iter().collect();
                let grads: Vec<_> = grad(&loss, &refs, false).into_iter().map(Var::into_value).collect();
                (loss.item().to_f64_lossy(), metric, grads)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("attacker loss at epoch {epoch}")));
            }
            t += 1;
            let (p, m) = adam_update(&config.adam, t, &attacker.params, &moments, &grads)?;
            attacker.params = p;
            moments = m;
            loss_sum += loss;
            metric_sum += metric;
            batches += 1;
        }
        curve.push(ConvergencePoint {
            epoch: epoch + 1,
            mean_loss: loss_sum / batches as f64,
            train_metric: metric_sum / batches as f64,
        });
    }
    Ok((attacker, curve))
}

/// Stacks `[N, ...]` rows of several arrays.
pub(crate) fn stack_rows<T: Scalar>(parts: &[ArrayD<T>]) -> Result<ArrayD<T>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}
