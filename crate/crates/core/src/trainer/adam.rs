use crate::autodiff::Tensor;
use crate::{Error, Result};

/// Adam with decoupled weight decay.
///
/// Moments and step counts are kept per parameter slot, so a slot that is
/// frozen for some epochs resumes with its own bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Slot>,
}

#[derive(Clone, Debug, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    /// Updates the parameter stored in `slot` in place.
    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::InvalidConfig(format!(
                "gradient shape {:?} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Slot::default);
        }
        let s = &mut self.slots[slot];
        if s.m.len() != param.len() {
            s.m = vec![0.0; param.len()];
            s.v = vec![0.0; param.len()];
            s.t = 0;
        }
        s.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(s.t as i32);
        let c2 = 1.0 - b2.powi(s.t as i32);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for (k, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            s.m[k] = b1 * s.m[k] + (1.0 - b1) * g;
            s.v[k] = b2 * s.v[k] + (1.0 - b2) * g * g;
            let m_hat = s.m[k] / c1;
            let v_hat = s.v[k] / c2;
            *p = *p * decay - self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Number of updates applied to `slot`.
    pub fn steps_taken(&self, slot: usize) -> u64 {
        self.slots.get(slot).map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let g = Tensor::zeros(&[3]);
        for _ in 0..5 {
            opt.step(0, &mut p, &g).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 at t = 1, so the step is lr * g / (|g| + eps)
        let mut opt = AdamW::new(1e-3, 0.0);
        let mut p = Tensor::from_vec(vec![0.0, 0.0]);
        let g = Tensor::from_vec(vec![4.0, -0.02]);
        opt.step(0, &mut p, &g).unwrap();
        assert!((p.data()[0] + 1e-3 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
        assert!((p.data()[1] - 1e-3 * 0.02 / (0.02 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_multiplicatively() {
        let (lr, wd) = (0.01, 0.5);
        let mut opt = AdamW::new(lr, wd);
        let mut p = Tensor::from_vec(vec![2.0]);
        let g = Tensor::zeros(&[1]);
        for _ in 0..3 {
            opt.step(0, &mut p, &g).unwrap();
        }
        assert!((p.data()[0] - 2.0 * (1.0 - lr * wd).powi(3)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = AdamW::new(0.1, 0.0);
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step(0, &mut p, &Tensor::zeros(&[3])).is_err());
    }
}
