//! Adam with bias correction.

use super::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment buffers for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    /// One update of every parameter from its accumulated gradient, then
    /// clears the gradients. Parameters without a gradient are treated as
    /// having a zero gradient.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed since the optimizer was built");
        self.t += 1;
        let c = self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let lr = T::from_f64_lossy(c.lr);
        let eps = T::from_f64_lossy(c.eps);
        let bc1 = T::one() - T::from_f64_lossy(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::from_f64_lossy(c.beta2.powi(self.t as i32));
        for ((p, m), v) in params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad_ref();
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            drop(grad);
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = Tensor::<f32>::parameter(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.accumulate_grad(&[0.0; 3]);
        let mut adam = AdamState::new(&[p.clone()], AdamConfig::default());
        adam.step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Tensor::<f64>::parameter(&[1], vec![1.0]).unwrap();
        p.accumulate_grad(&[1.0]);
        let mut adam = AdamState::new(&[p.clone()], AdamConfig::with_lr(1e-3));
        adam.step(&[p.clone()]);
        let expect = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expect).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn replicas_stay_bit_identical() {
        let a = Tensor::<f32>::parameter(&[2], vec![0.3, -0.7]).unwrap();
        let b = Tensor::<f32>::parameter(&[2], vec![0.3, -0.7]).unwrap();
        let mut sa = AdamState::new(&[a.clone()], AdamConfig::default());
        let mut sb = AdamState::new(&[b.clone()], AdamConfig::default());
        for k in 0..5 {
            let g = [0.1 * k as f32, -0.05];
            a.accumulate_grad(&g);
            b.accumulate_grad(&g);
            sa.step(&[a.clone()]);
            sb.step(&[b.clone()]);
        }
        let bits = |t: &Tensor<f32>| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
