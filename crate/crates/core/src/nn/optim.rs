use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "adam betas must lie in [0,1) and epsilon be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer plus its per-parameter state. Moment buffers are allocated on
/// the first step and then must keep the same shapes.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to each parameter tensor in place.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("optimizer tensors", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dim(format!("optimizer tensor {i}"), p.len(), g.len()));
            }
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                } else {
                    let same =
                        self.first_moment.len() == grads.len() && self.first_moment.iter().zip(grads).all(|(m, g)| m.len() == g.len());
                    if !same {
                        return Err(Error::InvalidArgument(
                            "gradient shapes differ from the optimizer's moment buffers".into(),
                        ));
                    }
                }
                self.step += 1;
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let bias1 = 1.0 - b1.powi(self.step as i32);
                let bias2 = 1.0 - b2.powi(self.step as i32);
                for (t, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[t];
                    let v = &mut self.second_moment[t];
                    for k in 0..p.len() {
                        let gk = g[k];
                        m[k] = b1 * m[k] + (1.0 - b1) * gk;
                        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                        let m_hat = m[k] / bias1;
                        let v_hat = v[k] / bias2;
                        p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
                return Ok(());
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut theta = [1.0];
        opt.step(&mut [&mut theta[..]], &[&[2.0][..]]).unwrap();
        assert!((theta[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for cfg in [OptimizerConfig::sgd(0.5), OptimizerConfig::adam(0.5)] {
            let mut opt = Optimizer::new(cfg).unwrap();
            let mut theta = [1.5, -2.0];
            for _ in 0..3 {
                opt.step(&mut [&mut theta[..]], &[&[0.0, 0.0][..]]).unwrap();
            }
            assert_eq!(theta, [1.5, -2.0]);
        }
    }

    #[test]
    fn adam_matches_hand_trace() {
        // f(θ) = θ², g = 2θ; hand-rolled bias-corrected Adam.
        let (lr, b1, b2, eps) = (0.1_f64, 0.9_f64, 0.999_f64, 1e-8_f64);
        let mut th = 1.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut trace = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
            trace.push(th);
        }

        let mut opt = Optimizer::new(OptimizerConfig::adam(lr)).unwrap();
        let mut theta = [1.0];
        for want in trace {
            let g = [2.0 * theta[0]];
            opt.step(&mut [&mut theta[..]], &[&g[..]]).unwrap();
            assert!((theta[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1)).unwrap();
        let mut theta = [1.0, 2.0];
        assert!(opt.step(&mut [&mut theta[..]], &[&[1.0][..]]).is_err());
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1)).unwrap();
        opt.step(&mut [&mut theta[..]], &[&[1.0, 1.0][..]]).unwrap();
        let mut other = [1.0];
        assert!(opt.step(&mut [&mut other[..]], &[&[1.0][..]]).is_err());
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Optimizer::new(OptimizerConfig::sgd(0.0)).is_err());
        assert!(Optimizer::new(OptimizerConfig::adam(f64::NAN)).is_err());
    }
}
