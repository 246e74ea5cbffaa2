//! Generator and discriminator costs, term by term.
//!
//! Each term has a differentiable form over [`Var`] (used by training) and a
//! plain-array form for evaluation. All expectations are batch means.

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{enable_grad, grad, no_grad, Var};
use crate::error::{Error, Result};
use crate::model::{one_hot_rows, reparameterize_var, BoundModel, POSE_DIMS};
use crate::scalar::{lit, Scalar};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-8;
/// Added under the square root of the critic-gradient norm.
pub const GRAD_NORM_EPS: f64 = 1e-12;

fn batch_size<T: Scalar>(v: &Var<T>) -> T {
    T::from_usize(v.shape()[0].max(1)).unwrap()
}

fn check_finite<T: Scalar>(v: &Var<T>, what: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `KL(N(mean, diag exp(log_variance)) ‖ N(0, I))`, summed over latent
/// dimensions and averaged over the batch.
pub fn kl_gaussian<T: Scalar>(mean: &Var<T>, log_variance: &Var<T>) -> Result<Var<T>> {
    if mean.shape() != log_variance.shape() {
        return Err(Error::shape(format!(
            "kl_gaussian: mean {:?} vs log_variance {:?}",
            mean.shape(),
            log_variance.shape()
        )));
    }
    check_finite(mean, "kl_gaussian mean")?;
    check_finite(log_variance, "kl_gaussian log_variance")?;
    let n = batch_size(mean);
    let per_entry = mean
        .square()
        .add(&log_variance.exp())
        .add_scalar(-T::one())
        .sub(log_variance);
    Ok(per_entry.sum_all().scale(lit::<T>(0.5) / n))
}

/// Batch mean of `Σᵢ |yⁱ − ŷⁱ|`. No angle wrapping.
pub fn pose_l1<T: Scalar>(truth: &Var<T>, predicted: &Var<T>) -> Result<Var<T>> {
    if truth.shape() != predicted.shape() || truth.shape().len() != 2 {
        return Err(Error::shape(format!(
            "pose_l1: truth {:?} vs predicted {:?}",
            truth.shape(),
            predicted.shape()
        )));
    }
    let n = batch_size(truth);
    Ok(truth.sub(predicted).abs().sum_all().scale(T::one() / n))
}

/// Batch mean of the squared L2 distance over all pixels.
pub fn recon_l2<T: Scalar>(x: &Var<T>, reconstruction: &Var<T>) -> Result<Var<T>> {
    if x.shape() != reconstruction.shape() {
        return Err(Error::shape(format!(
            "recon_l2: {:?} vs {:?}",
            x.shape(),
            reconstruction.shape()
        )));
    }
    let n = batch_size(x);
    Ok(x.sub(reconstruction).square().sum_all().scale(T::one() / n))
}

/// Batch mean of `−log max(p[target], ε_p)` for 1-based `targets`.
pub fn identity_nll<T: Scalar>(probabilities: &Var<T>, targets: &[u32]) -> Result<Var<T>> {
    let &[n, k] = probabilities.shape() else {
        return Err(Error::shape(format!(
            "identity_nll: probabilities must be [N, N_s], got {:?}",
            probabilities.shape()
        )));
    };
    if targets.len() != n {
        return Err(Error::shape(format!("identity_nll: {} targets for {n} rows", targets.len())));
    }
    let select = one_hot_rows::<T>(targets, k)?.into_dyn();
    let logp = probabilities.clamp_min(lit(PROB_FLOOR)).ln();
    Ok(logp.mul_const(&select).sum_all().scale(-T::one() / batch_size(probabilities)))
}

/// One mixing coefficient per sample, uniform on `[0, 1]`.
pub fn draw_mixing<T: Scalar, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n).map(|_| T::from_f64_lossy(rng.random::<f64>())).collect()
}

/// `γ · mean((‖∇ₓ critic(x_h)‖₂ − 1)²)` at `x_h = c·real + (1 − c)·fake`.
///
/// The result stays differentiable with respect to whatever parameters
/// `critic` closes over.
pub fn gradient_penalty_with_mix<T, F>(
    critic: F,
    real: &ArrayD<T>,
    fake: &ArrayD<T>,
    gamma: T,
    mix: &[T],
) -> Result<Var<T>>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Var<T>,
{
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!(
            "gradient_penalty: real {:?} vs fake {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    if mix.len() != n {
        return Err(Error::shape(format!("gradient_penalty: {} mixing coefficients for {n} samples", mix.len())));
    }
    if gamma <= T::zero() {
        return Err(Error::config("gradient penalty weight must be > 0"));
    }
    let mut interp = fake.clone();
    for (i, (mut row, &c)) in interp.axis_iter_mut(Axis(0)).zip(mix).enumerate() {
        let r = real.index_axis(Axis(0), i);
        row.zip_mut_with(&r, |f, &x| *f = c * x + (T::one() - c) * *f);
    }
    // The penalty is a function of an input gradient, so the critic graph
    // must be recorded even when the caller disabled gradients.
    let g = enable_grad(|| {
        let x_h = Var::param(interp);
        let scores = critic(&x_h);
        grad(&scores.sum_all(), &[&x_h], true).remove(0)
    });
    let norms = g.square().sum_per_sample().add_scalar(lit(GRAD_NORM_EPS)).sqrt();
    Ok(norms.add_scalar(-T::one()).square().mean_all().scale(gamma))
}

/// [`gradient_penalty_with_mix`] with mixing coefficients drawn from `rng`.
pub fn gradient_penalty<T, F, R>(
    critic: F,
    real: &ArrayD<T>,
    fake: &ArrayD<T>,
    gamma: T,
    rng: &mut R,
) -> Result<Var<T>>
where
    T: Scalar,
    F: Fn(&Var<T>) -> Var<T>,
    R: Rng,
{
    let mix = draw_mixing(real.shape()[0], rng);
    gradient_penalty_with_mix(critic, real, fake, gamma, &mix)
}

/// Weights of both costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Generator: adversarial, identity, pose, reconstruction, KL.
    pub generator: [f64; 5],
    /// Discriminator: Wasserstein gap, identity, pose, gradient penalty.
    pub discriminator: [f64; 4],
    pub gp_gamma: f64,
    /// Also train the identity classifier on synthesized images labelled
    /// with their target identity.
    #[serde(default)]
    pub identity_on_fakes: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            generator: [1.0, 1.0, 10.0, 10.0, 0.1],
            discriminator: [1.0, 1.0, 10.0, 1.0],
            gp_gamma: 10.0,
            identity_on_fakes: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self.generator.iter().chain(&self.discriminator);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        if !(self.gp_gamma > 0.0 && self.gp_gamma.is_finite()) {
            return Err(Error::config("gp_gamma must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossBreakdown<T> {
    pub adversarial: T,
    pub identity_nll: T,
    pub pose_l1: T,
    pub recon_l2: T,
    pub kl: T,
    pub total: T,
    pub weights: [f64; 5],
}

impl<T: Scalar> GeneratorLossBreakdown<T> {
    /// The weighted sum of the stored terms, in the order used to build `total`.
    pub fn recombine(&self) -> T {
        let w = self.weights.map(T::from_f64_lossy);
        self.adversarial * w[0] + self.identity_nll * w[1] + self.pose_l1 * w[2] + self.recon_l2 * w[3]
            + self.kl * w[4]
    }

    pub fn terms(&self) -> [(&'static str, T); 6] {
        [
            ("adversarial", self.adversarial),
            ("identity_nll", self.identity_nll),
            ("pose_l1", self.pose_l1),
            ("recon_l2", self.recon_l2),
            ("kl", self.kl),
            ("total", self.total),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorLossBreakdown<T> {
    pub wasserstein_gap: T,
    pub identity_loglik: T,
    pub pose_l1_real: T,
    pub gradient_penalty: T,
    pub total: T,
    pub weights: [f64; 4],
    pub gp_gamma: f64,
}

impl<T: Scalar> DiscriminatorLossBreakdown<T> {
    pub fn recombine(&self) -> T {
        let w = self.weights.map(T::from_f64_lossy);
        self.wasserstein_gap * w[0] + self.identity_loglik * w[1] - self.pose_l1_real * w[2]
            - self.gradient_penalty * w[3]
    }

    pub fn terms(&self) -> [(&'static str, T); 5] {
        [
            ("wasserstein_gap", self.wasserstein_gap),
            ("identity_loglik", self.identity_loglik),
            ("pose_l1_real", self.pose_l1_real),
            ("gradient_penalty", self.gradient_penalty),
            ("total", self.total),
        ]
    }
}

/// One labelled minibatch plus the stochastic draws a loss evaluation needs.
#[derive(Debug, Clone)]
pub struct LossBatch<'a, T: Scalar> {
    pub images: &'a ArrayD<T>,
    /// 1-based identities.
    pub identities: &'a [u32],
    /// Normalized pose targets, `[N, 3]`.
    pub poses: &'a Array2<T>,
    /// 1-based target identities for synthesis.
    pub targets: &'a [u32],
    /// Standard-normal draws for the reparameterized latent, `[N, latent_dim]`.
    pub noise: &'a Array2<T>,
}

impl<T: Scalar> LossBatch<'_, T> {
    fn validate(&self, model: &BoundModel<'_, T>) -> Result<usize> {
        let n = model.model.check_images(self.images)?;
        let d = model.model.latent_dim();
        if self.identities.len() != n || self.targets.len() != n {
            return Err(Error::shape("identity/target label count differs from batch size"));
        }
        if self.poses.shape() != [n, POSE_DIMS] {
            return Err(Error::shape(format!("poses must be [{n}, 3], got {:?}", self.poses.shape())));
        }
        if self.noise.shape() != [n, d] {
            return Err(Error::shape(format!("noise must be [{n}, {d}], got {:?}", self.noise.shape())));
        }
        Ok(n)
    }
}

fn weighted<T: Scalar>(terms: &[(&Var<T>, f64, bool)]) -> Var<T> {
    let mut total: Option<Var<T>> = None;
    for &(v, w, subtract) in terms {
        let scaled = v.scale(T::from_f64_lossy(w));
        total = Some(match total {
            None if subtract => scaled.neg(),
            None => scaled,
            Some(t) if subtract => t.sub(&scaled),
            Some(t) => t.add(&scaled),
        });
    }
    total.expect("at least one term")
}

/// Generator cost. Gradients flow only into whichever partitions `model`
/// bound as trainable; for a generator step that is the encoder and decoder.
pub fn generator_loss<T: Scalar>(
    model: &BoundModel<'_, T>,
    batch: &LossBatch<'_, T>,
    weights: &LossWeights,
) -> Result<(Var<T>, GeneratorLossBreakdown<T>)> {
    let n = batch.validate(model)?;
    let ns = model.model.n_subjects();
    let x = Var::constant(batch.images.clone());
    let (mean, logvar) = model.encode(&x);
    let z = reparameterize_var(&mean, &logvar, &batch.noise.clone().into_dyn());
    let swapped = model.decode(&z, &Var::constant(one_hot_rows(batch.targets, ns)?.into_dyn()));
    let recon = model.decode(&z, &Var::constant(one_hot_rows(batch.identities, ns)?.into_dyn()));

    let adversarial = model.critic(&swapped).mean_all().neg();
    let id_nll = identity_nll(&model.identity_probs(&swapped), batch.targets).map_err(|e| e.in_term("identity_nll"))?;
    let poses = Var::constant(batch.poses.clone().into_dyn());
    let pose = pose_l1(&poses, &model.pose(&swapped)).map_err(|e| e.in_term("pose_l1"))?;
    let rec = recon_l2(&x, &recon).map_err(|e| e.in_term("recon_l2"))?;
    let kl = kl_gaussian(&mean, &logvar).map_err(|e| e.in_term("kl"))?;
    debug_assert_eq!(swapped.shape()[0], n);

    let w = weights.generator;
    let total = weighted(&[
        (&adversarial, w[0], false),
        (&id_nll, w[1], false),
        (&pose, w[2], false),
        (&rec, w[3], false),
        (&kl, w[4], false),
    ]);
    let breakdown = GeneratorLossBreakdown {
        adversarial: adversarial.item(),
        identity_nll: id_nll.item(),
        pose_l1: pose.item(),
        recon_l2: rec.item(),
        kl: kl.item(),
        total: total.item(),
        weights: w,
    };
    Ok((total, breakdown))
}

/// Synthesized images `G(x, c(y_s))` from a sampled latent, with no
/// gradient path back into the generator.
pub fn synthesize_detached<T: Scalar>(model: &BoundModel<'_, T>, batch: &LossBatch<'_, T>) -> Result<ArrayD<T>> {
    let ns = model.model.n_subjects();
    no_grad(|| {
        let (mean, logvar) = model.encode(&Var::constant(batch.images.clone()));
        let z = reparameterize_var(&mean, &logvar, &batch.noise.clone().into_dyn());
        let codes = Var::constant(one_hot_rows(batch.targets, ns)?.into_dyn());
        Ok(model.decode(&z, &codes).into_value())
    })
}

/// Discriminator cost (to be maximized). The synthesized batch is produced
/// without a generator gradient path.
pub fn discriminator_loss<T: Scalar>(
    model: &BoundModel<'_, T>,
    batch: &LossBatch<'_, T>,
    weights: &LossWeights,
    mix: &[T],
) -> Result<(Var<T>, DiscriminatorLossBreakdown<T>)> {
    batch.validate(model)?;
    let fake = synthesize_detached(model, batch)?;
    let real = Var::constant(batch.images.clone());
    let fake_var = Var::constant(fake.clone());

    let gap = model.critic(&real).mean_all().sub(&model.critic(&fake_var).mean_all());
    let mut loglik = identity_nll(&model.identity_probs(&real), batch.identities)
        .map_err(|e| e.in_term("identity_loglik"))?
        .neg();
    if weights.identity_on_fakes {
        let fake_ll = identity_nll(&model.identity_probs(&fake_var), batch.targets)
            .map_err(|e| e.in_term("identity_loglik"))?
            .neg();
        loglik = loglik.add(&fake_ll).scale(lit(0.5));
    }
    let poses = Var::constant(batch.poses.clone().into_dyn());
    let pose = pose_l1(&poses, &model.pose(&real)).map_err(|e| e.in_term("pose_l1_real"))?;
    let gamma = T::from_f64_lossy(weights.gp_gamma);
    let gp = gradient_penalty_with_mix(|x| model.critic(x), batch.images, &fake, gamma, mix)
        .map_err(|e| e.in_term("gradient_penalty"))?;

    let w = weights.discriminator;
    let total = weighted(&[(&gap, w[0], false), (&loglik, w[1], false), (&pose, w[2], true), (&gp, w[3], true)]);
    let breakdown = DiscriminatorLossBreakdown {
        wasserstein_gap: gap.item(),
        identity_loglik: loglik.item(),
        pose_l1_real: pose.item(),
        gradient_penalty: gp.item(),
        total: total.item(),
        weights: w,
        gp_gamma: weights.gp_gamma,
    };
    Ok((total, breakdown))
}

/// Array form of [`kl_gaussian`].
pub fn kl_gaussian_value<T: Scalar>(mean: &Array2<T>, log_variance: &Array2<T>) -> Result<T> {
    no_grad(|| {
        kl_gaussian(&Var::constant(mean.clone().into_dyn()), &Var::constant(log_variance.clone().into_dyn()))
            .map(|v| v.item())
    })
}

/// Array form of [`pose_l1`].
pub fn pose_l1_value<T: Scalar>(truth: &Array2<T>, predicted: &Array2<T>) -> Result<T> {
    no_grad(|| {
        pose_l1(&Var::constant(truth.clone().into_dyn()), &Var::constant(predicted.clone().into_dyn()))
            .map(|v| v.item())
    })
}

/// Array form of [`recon_l2`].
pub fn recon_l2_value<T: Scalar>(x: &ArrayD<T>, reconstruction: &ArrayD<T>) -> Result<T> {
    no_grad(|| recon_l2(&Var::constant(x.clone()), &Var::constant(reconstruction.clone())).map(|v| v.item()))
}

/// Array form of [`identity_nll`].
pub fn identity_nll_value<T: Scalar>(probabilities: &Array2<T>, targets: &[u32]) -> Result<T> {
    no_grad(|| identity_nll(&Var::constant(probabilities.clone().into_dyn()), targets).map(|v| v.item()))
}

#[cfg(test)]
mod tests;
