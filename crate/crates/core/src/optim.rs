//! Adam over named parameter sets.

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments<T: Scalar> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        AdamMoments {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn matches(&self, params: &ParamSet<T>) -> bool {
        self.m.shapes() == params.shapes() && self.v.shapes() == params.shapes()
    }
}

/// Computes updated parameters and moments for step `t` (1-based) without
/// touching the inputs, so a caller can discard a non-finite result.
pub fn adam_update<T: Scalar>(
    cfg: &AdamConfig,
    t: u64,
    params: &ParamSet<T>,
    moments: &AdamMoments<T>,
    grads: &[ArrayD<T>],
) -> Result<(ParamSet<T>, AdamMoments<T>)> {
    if grads.len() != params.len() || !moments.matches(params) {
        return Err(Error::shape("gradient/moment count or shapes differ from parameters"));
    }
    let lit = T::from_f64_lossy;
    let (b1, b2) = (lit(cfg.beta1), lit(cfg.beta2));
    let one = T::one();
    let lr = lit(cfg.learning_rate);
    let eps = lit(cfg.epsilon);
    let bc1 = one - lit(cfg.beta1.powf(t as f64));
    let bc2 = one - lit(cfg.beta2.powf(t as f64));

    let mut new_params = params.clone();
    let mut new_m = moments.clone();
    for i in 0..params.len() {
        if grads[i].shape() != params.values[i].shape() {
            return Err(Error::shape(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                params.names[i],
                grads[i].shape(),
                params.values[i].shape()
            )));
        }
        Zip::from(&mut new_params.values[i])
            .and(&mut new_m.m.values[i])
            .and(&mut new_m.v.values[i])
            .and(&grads[i])
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= step;
            });
    }
    Ok((new_params, new_m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::default();
        p.push("w".into(), arr1(&[v]).into_dyn());
        p
    }

    #[test]
    fn first_steps_match_hand_computation() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let p = single(1.0);
        let m0 = AdamMoments::zeros_like(&p);
        let (p1, m1) = adam_update(&cfg, 1, &p, &m0, &[arr1(&[2.0]).into_dyn()]).unwrap();
        // Bias correction makes the first step exactly lr * sign(g), up to epsilon.
        assert_abs_diff_eq!(p1.values[0][0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(m1.m.values[0][0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(m1.v.values[0][0], 0.004, epsilon = 1e-15);

        let (p2, _) = adam_update(&cfg, 2, &p1, &m1, &[arr1(&[-1.0]).into_dyn()]).unwrap();
        let m = 0.9 * 0.2 - 0.1;
        let v = 0.999 * 0.004 + 0.001;
        let expected = p1.values[0][0] - 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        assert_abs_diff_eq!(p2.values[0][0], expected, epsilon = 1e-14);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = single(0.0);
        let m = AdamMoments::zeros_like(&p);
        let g = ndarray::arr2(&[[1.0]]).into_dyn();
        assert!(adam_update(&AdamConfig::default(), 1, &p, &m, &[g]).is_err());
        assert!(adam_update(&AdamConfig::default(), 1, &p, &m, &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let bad = AdamConfig { beta2: 1.0, ..AdamConfig::default() };
        assert!(bad.validate().unwrap_err().is_config());
    }
}
