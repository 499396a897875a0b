//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, Param};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state: step counter and moment buffers, one pair per parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First and second moment buffers.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Applies one update using each parameter's accumulated gradient. A non-finite
    /// gradient anywhere rejects the whole step and leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: gradient {:?} for value {:?}",
                    p.grad.shape(),
                    p.value.shape()
                )));
            }
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * g[i];
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network) -> Result<()> {
        self.step(&mut net.params_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64], g: &[f64]) -> Param {
        let mut p = Param::new(Tensor::from_vec(1, v.len(), v.to_vec()).unwrap());
        p.grad = Tensor::from_vec(1, g.len(), g.to_vec()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = param(&[1.0], &[1.0]);
        let mut s = AdamState::new(AdamConfig::new(5e-5, 0.5, 0.999));
        s.step(&mut [&mut p]).unwrap();
        // m̂ = v̂ = 1, so the step is α/(1+eps)
        let expect = 1.0 - 5e-5 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expect).abs() < 1e-18);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(&[0.3, -2.0], &[0.0, 0.0]);
        let mut s = AdamState::new(AdamConfig::new(1e-3, 0.9, 0.999));
        s.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.3, -2.0]);
    }

    #[test]
    fn two_steps_differ_from_one_doubled_step() {
        let cfg = AdamConfig::new(0.1, 0.5, 0.999);
        let mut a = param(&[0.0], &[1.0]);
        let mut sa = AdamState::new(cfg);
        sa.step(&mut [&mut a]).unwrap();
        sa.step(&mut [&mut a]).unwrap();

        let mut b = param(&[0.0], &[2.0]);
        let mut sb = AdamState::new(cfg);
        sb.step(&mut [&mut b]).unwrap();

        // hand trace: step 1: m=.5, v=.001, m̂=1, v̂=1 -> -0.1/(1+eps)
        // step 2: m=.75, v=.001999, m̂=1, v̂=1 -> another -0.1/(1+eps)
        let one = 0.1 / (1.0 + 1e-8);
        assert!((a.value.data()[0] + 2.0 * one).abs() < 1e-12);
        // doubled gradient: m̂=2, v̂=4 -> a single step of -0.1·2/(2+eps)
        assert!((b.value.data()[0] + 0.2 / (2.0 + 1e-8)).abs() < 1e-12);
        assert!((a.value.data()[0] - b.value.data()[0]).abs() > 0.05);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = param(&[1.0, 2.0], &[0.5, f64::NAN]);
        let mut s = AdamState::new(AdamConfig::new(1e-3, 0.5, 0.9));
        assert!(matches!(s.step(&mut [&mut p]), Err(Error::NonFinite(_))));
        assert_eq!(p.value.data(), &[1.0, 2.0]);
        assert_eq!(s.t, 0);
    }
}
