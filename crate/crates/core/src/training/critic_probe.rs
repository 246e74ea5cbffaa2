//! WGAN-GP critic fitted between two fixed 2-D Gaussians. A sanity probe for
//! the gradient-penalty machinery: the trained critic should be close to
//! 1-Lipschitz between the distributions and its mean gap should approach the
//! distance between the means.

use ndarray::{Array2, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::losses::{draw_mixing, gradient_penalty};
use crate::nn::Mlp;
use crate::optim::{adam_update, AdamConfig, AdamMoments};
use crate::rng::{keyed_substream, Stream};
use crate::scalar::{lit, Scalar};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticProbeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub adam: AdamConfig,
    /// The learning rate decays linearly to zero over this many final steps.
    pub decay_steps: usize,
    /// The real distribution is centred at `(shift, 0)`, the fake one at the origin.
    pub shift: f64,
    pub n_probe: usize,
    pub n_gap: usize,
    pub seed: u64,
}

impl Default for CriticProbeConfig {
    fn default() -> Self {
        CriticProbeConfig {
            steps: 2000,
            batch_size: 256,
            hidden: vec![64, 64],
            gamma: 10.0,
            adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            decay_steps: 500,
            shift: 3.0,
            n_probe: 1000,
            n_gap: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticProbeReport {
    /// `‖∇ critic‖` at random interpolates between fresh real and fake draws.
    pub grad_norms: Vec<f64>,
    /// `E[critic(real)] − E[critic(fake)]` on fresh draws.
    pub mean_gap: f64,
}

impl CriticProbeReport {
    pub fn fraction_within(&self, lo: f64, hi: f64) -> f64 {
        let n = self.grad_norms.iter().filter(|g| (lo..=hi).contains(*g)).count();
        n as f64 / self.grad_norms.len().max(1) as f64
    }
}

fn gaussian<T: Scalar>(n: usize, shift: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    Array2::from_shape_fn((n, 2), |(_, j)| {
        let v: f64 = rng.sample(StandardNormal);
        lit(if j == 0 { v + shift } else { v })
    })
    .into_dyn()
}

pub fn probe_gaussian_critic<T: Scalar>(cfg: &CriticProbeConfig) -> Result<CriticProbeReport> {
    cfg.adam.validate()?;
    let net = Mlp { input: 2, hidden: cfg.hidden.clone(), output: 1, slope: 0.2 };
    let mut rng = keyed_substream(cfg.seed, Stream::Init, 0x51);
    let mut params = net.init::<T, _>("critic", &mut rng);
    let mut moments = AdamMoments::zeros_like(&params);
    let gamma: T = lit(cfg.gamma);
    let n = cfg.batch_size;
    let inv_n: T = lit(1.0 / n as f64);

    for step in 1..=cfg.steps {
        let real = gaussian::<T>(n, cfg.shift, &mut rng);
        let fake = gaussian::<T>(n, 0.0, &mut rng);
        let vars = params.bind(true);
        let critic = |x: &Var<T>| net.forward(&vars, x);
        let wasserstein = critic(&Var::constant(fake.clone()))
            .sum_all()
            .sub(&critic(&Var::constant(real.clone())).sum_all())
            .scale(inv_n);
        let total = wasserstein.add(&gradient_penalty(critic, &real, &fake, gamma, &mut rng)?);
        let refs: Vec<&Var<T>> = vars.iter().collect();
        let grads: Vec<ArrayD<T>> = grad(&total, &refs, false).into_iter().map(Var::into_value).collect();
        let left = cfg.steps + 1 - step;
        let mut adam = cfg.adam;
        if left <= cfg.decay_steps {
            adam.learning_rate *= left as f64 / (cfg.decay_steps + 1) as f64;
        }
        (params, moments) = adam_update(&adam, step as u64, &params, &moments, &grads)?;
    }

    let vars = params.bind(false);
    let real = gaussian::<T>(cfg.n_probe, cfg.shift, &mut rng);
    let fake = gaussian::<T>(cfg.n_probe, 0.0, &mut rng);
    let mix = draw_mixing::<T, _>(cfg.n_probe, &mut rng);
    let mut interp = fake;
    for (i, (mut row, &c)) in interp.axis_iter_mut(Axis(0)).zip(&mix).enumerate() {
        let r = real.index_axis(Axis(0), i);
        row.zip_mut_with(&r, |f, &x| *f = c * x + (T::one() - c) * *f);
    }
    let x = Var::param(interp);
    let g = grad(&net.forward(&vars, &x).sum_all(), &[&x], false).remove(0).into_value();
    let grad_norms = g
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect();

    let mean_gap = no_grad(|| {
        let mean = |shift: f64, rng: &mut ChaCha8Rng| {
            let x = Var::constant(gaussian::<T>(cfg.n_gap, shift, rng));
            net.forward(&vars, &x).sum_all().item().to_f64_lossy() / cfg.n_gap as f64
        };
        mean(cfg.shift, &mut rng) - mean(0.0, &mut rng)
    });
    Ok(CriticProbeReport { grad_norms, mean_gap })
}
