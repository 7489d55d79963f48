//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Fresh state for one parameter list; `shapes` fixes its order and shapes.
    pub fn new(lr: f64, shapes: &[Vec<usize>]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update in place. `params` and `grads` must match the construction
    /// order; a missing gradient (param untouched this step) is passed as None
    /// and leaves both the parameter and its moments unchanged.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: expected {} parameter slots, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if grad.shape() != params[i].shape() {
                return Err(Error::Shape(format!(
                    "adam: grad shape {:?} vs param shape {:?} at slot {i}",
                    grad.shape(),
                    params[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for ((mj, vj), (pj, &gj)) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.iter_mut().zip(grad.data()))
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_a_quadratic() {
        // f(p) = (p - 3)^2, gradient 2(p - 3).
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(0.1, &[vec![]]);
        for _ in 0..500 {
            let g = 2.0 * (params[0].item() - 3.0);
            adam.step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn skipped_slot_is_untouched() {
        let mut params = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut adam = Adam::new(0.1, &[vec![], vec![]]);
        adam.step(&mut params, &[Some(Tensor::scalar(1.0)), None])
            .unwrap();
        assert_ne!(params[0].item(), 1.0);
        assert_eq!(params[1].item(), 2.0);
    }
}
