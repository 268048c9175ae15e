//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, blocks: &[(String, &[f64])]) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            names: blocks.iter().map(|(n, _)| n.clone()).collect(),
            m: blocks.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: blocks.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `θ ← θ − lr·(m̂ / (√v̂ + ε) + λ·θ)`.
    ///
    /// `params` and `grads` must list the same blocks, in the order given at
    /// construction.
    pub fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: &[(String, Vec<f64>)]) -> Result<()> {
        if params.len() != self.names.len() || grads.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} blocks, got {} parameters and {} gradients",
                self.names.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, ((pname, theta), (gname, g))) in params.into_iter().zip(grads).enumerate() {
            if pname != self.names[i] || *gname != self.names[i] || theta.len() != g.len() {
                return Err(Error::Contract(format!(
                    "block {i}: expected {}, got parameter {pname} and gradient {gname}",
                    self.names[i]
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..theta.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                theta[j] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * theta[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: AdamWConfig, theta: &mut Vec<f64>, grad: impl Fn(&[f64]) -> Vec<f64>, steps: usize) {
        let mut opt = AdamW::new(config, &[("x".to_string(), theta.as_slice())]).unwrap();
        for _ in 0..steps {
            let g = grad(theta);
            opt.step(vec![("x".into(), theta.as_mut_slice())], &[("x".into(), g)]).unwrap();
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        let mut theta = vec![1.0, -2.0];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        run(cfg, &mut theta, |_| vec![3.0, -0.5], 1);
        assert!((theta[0] - (1.0 - 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((theta[1] - (-2.0 + 1e-3 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut theta = vec![2.0];
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        run(cfg, &mut theta, |_| vec![0.0], 1);
        assert_eq!(theta[0], 2.0 - 0.1 * 0.5 * 2.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut theta = vec![0.3, 0.7];
        let cfg = AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        run(cfg, &mut theta, |t| t.to_vec(), 5);
        assert_eq!(theta, vec![0.3, 0.7]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut theta = vec![5.0, -3.0];
        let cfg = AdamWConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        run(cfg, &mut theta, |t| t.iter().map(|x| 2.0 * x).collect(), 2000);
        assert!(theta.iter().all(|x| x.abs() < 1e-2), "{theta:?}");
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let theta = vec![0.0];
        let mut opt = AdamW::new(AdamWConfig::default(), &[("x".to_string(), theta.as_slice())]).unwrap();
        let mut other = vec![0.0];
        let err = opt
            .step(vec![("y".into(), other.as_mut_slice())], &[("y".into(), vec![1.0])])
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(AdamW::new(
            AdamWConfig {
                beta1: 1.0,
                ..Default::default()
            },
            &[]
        )
        .is_err());
    }
}
