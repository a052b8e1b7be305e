//! Adam with bias correction. Defaults follow the training setup used
//! throughout this project: lr 0.002, beta1 0.9, beta2 0.99.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with_hyperparams(lr, 0.9, 0.99, 1e-8)
    }

    pub fn with_hyperparams(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::invalid("adam: lr must be non-negative"));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid("adam: betas must lie in [0, 1)"));
        }
        if epsilon <= 0.0 {
            return Err(Error::invalid("adam: epsilon must be positive"));
        }
        Ok(AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            epsilon,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    /// Applies one bias-corrected Adam update in place. Moment buffers are
    /// allocated lazily on the first step and must keep matching shapes after.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "adam: {} params vs {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(Error::invalid("adam: parameter count changed between steps"));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.first_moment.iter().zip(&self.second_moment))
        {
            if p.numel() != g.len() || p.numel() != m.len() || p.numel() != v.len() {
                return Err(Error::invalid(format!(
                    "adam: shape mismatch (param {}, grad {}, moments {}/{})",
                    p.numel(),
                    g.len(),
                    m.len(),
                    v.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (i, pv) in param.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_param(1.25);
        let mut adam = AdamState::new(0.002).unwrap();
        adam.step(&mut [&mut p], &[vec![0.0]]).unwrap();
        assert_eq!(p.item(), 1.25);
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut p = Tensor::new(vec![3], vec![0.25, -1.5, 2.0]).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(0.0).unwrap();
        adam.step(&mut [&mut p], &[vec![1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        // After one step m_hat = g and v_hat = g^2, so the update is
        // lr * g / (|g| + eps * sqrt(1 - beta2)) within correction terms.
        let g = 0.7;
        let lr = 0.002;
        let mut p = scalar_param(1.0);
        let mut adam = AdamState::new(lr).unwrap();
        adam.step(&mut [&mut p], &[vec![g]]).unwrap();
        let expected = 1.0 - lr * g / (g.abs() + adam.epsilon);
        assert!((p.item() - expected).abs() < 1e-6);
    }

    #[test]
    fn two_step_scalar_recurrence_matches_oracle() {
        // Hand-rolled recurrence evaluated independently of `step`.
        let (lr, b1, b2, eps) = (0.002, 0.9, 0.99, 1e-8);
        let grads = [0.5, -0.25];
        let mut expected = 3.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1_powi(b1, t));
            let v_hat = v / (1.0 - b1_powi(b2, t));
            expected -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut p = scalar_param(3.0);
        let mut adam = AdamState::with_hyperparams(lr, b1, b2, eps).unwrap();
        adam.step(&mut [&mut p], &[vec![grads[0]]]).unwrap();
        adam.step(&mut [&mut p], &[vec![grads[1]]]).unwrap();
        assert!((p.item() - expected).abs() < 1e-12);
        assert_eq!(adam.step_count, 2);
    }

    fn b1_powi(b: f64, t: i32) -> f64 {
        b.powi(t)
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_param(0.0);
        let mut adam = AdamState::new(0.002).unwrap();
        assert!(adam.step(&mut [&mut p], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn invalid_hyperparams_rejected() {
        assert!(AdamState::with_hyperparams(0.002, 1.0, 0.99, 1e-8).is_err());
        assert!(AdamState::with_hyperparams(0.002, 0.9, 0.99, 0.0).is_err());
        assert!(AdamState::with_hyperparams(-0.1, 0.9, 0.99, 1e-8).is_err());
    }
}
