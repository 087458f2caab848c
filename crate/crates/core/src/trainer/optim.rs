use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Elements whose update rounds to zero
    /// are left untouched, so a zero rate or zero gradient keeps every bit.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        if grads.len() != params.len() {
            return Err(Error::MissingGradient(format!("{} of {} gradients", grads.len(), params.len())));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps, lr) = (T::one(), T::lit(self.eps), T::lit(lr));
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let update = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                if update != T::zero() {
                    *pi -= update;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::scalar(0.5f64);
        let mut s = AdamState::new([&p]);
        s.step(vec![&mut p], &[Tensor::scalar(1.0)], 1e-3).unwrap();
        // m_hat = v_hat = 1 at t = 1
        let oracle = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - oracle).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 9.999e-4).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::<f64>::from_f64(vec![3], &[1.0, -0.0, 2.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new([&p]);
        for _ in 0..3 {
            s.step(vec![&mut p], &[Tensor::zeros(vec![3])], 1e-2).unwrap();
        }
        assert_eq!(p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn matches_hand_rolled_reference() {
        let grads = [0.3, -1.2, 0.05, 2.0];
        let mut p = Tensor::scalar(1.0f64);
        let mut s = AdamState::new([&p]);
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            s.step(vec![&mut p], &[Tensor::scalar(g)], 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            th -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - th).abs() < 1e-14);
    }

    #[test]
    fn missing_gradients_rejected() {
        let mut p = Tensor::scalar(1.0f64);
        let mut s = AdamState::new([&p]);
        assert!(matches!(s.step(vec![&mut p], &[], 0.1), Err(Error::MissingGradient(_))));
    }
}
