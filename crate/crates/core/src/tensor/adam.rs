use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// `beta1 = 0.9, beta2 = 0.999, eps = 1e-8`.
    pub fn standard(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// WGAN-GP practice: `beta1 = 0.5, beta2 = 0.9`.
    pub fn wgan(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.numel() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pd = p.data_mut();
            for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Functional form: returns updated copies of `params`.
pub fn adam_step(params: &[Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<Vec<Tensor>> {
    let mut out = params.to_vec();
    state.step(&mut out, grads)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_and_counts_step() {
        let p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut st = AdamState::new(AdamConfig::standard(0.1), &p);
        let out = adam_step(&p, &[Tensor::zeros(&[2])], &mut st).unwrap();
        assert_eq!(out[0].data(), p[0].data());
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [1e-3, 0.7, -42.0] {
            let p = vec![Tensor::scalar(0.0)];
            let mut st = AdamState::new(AdamConfig::standard(0.01), &p);
            let out = adam_step(&p, &[Tensor::scalar(g)], &mut st).unwrap();
            let delta = out[0].item();
            assert!((delta.abs() - 0.01).abs() < 1e-6, "{delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = AdamState::new(AdamConfig::standard(0.1), &p);
        assert!(adam_step(&p, &[Tensor::zeros(&[3])], &mut st).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
