use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are aligned with the parameter
/// list handed to [`AdamState::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Default betas (0.9, 0.999) and eps 1e-8.
    pub fn with_lr(lr: f64, params: &[Tensor]) -> Self {
        Self::new(lr, 0.9, 0.999, 1e-8, params)
    }

    /// Rebuilds a state from saved moments, e.g. when resuming a run.
    pub fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Result<Self> {
        if m.len() != v.len() {
            return Err(AutodiffError::invalid("adam", "moment lists differ in length"));
        }
        for (a, b) in m.iter().zip(&v) {
            if a.shape() != b.shape() {
                return Err(AutodiffError::mismatch("adam", a.shape(), b.shape()));
            }
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update in place. Nothing is modified when any gradient is
    /// non-finite or any shape disagrees.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(AutodiffError::invalid(
                "adam",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(AutodiffError::mismatch("adam", p.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: "adam" });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![t(&[1.0, -2.0])];
        let mut adam = AdamState::with_lr(0.0, &p);
        adam.step(&mut p, &[t(&[0.3, 5.0])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![t(&[0.0])];
        let mut adam = AdamState::new(0.1, 0.9, 0.999, 1e-8, &p);
        adam.step(&mut p, &[t(&[1.0])]).unwrap();
        // m_hat = v_hat = 1 -> delta = -0.1 / (1 + 1e-8)
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = vec![t(&[0.5, 0.25])];
        let mut adam = AdamState::with_lr(0.1, &p);
        for _ in 0..3 {
            adam.step(&mut p, &[t(&[0.0, 0.0])]).unwrap();
        }
        assert_eq!(p[0].data(), &[0.5, 0.25]);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn rejects_mismatch_and_leaves_state() {
        let mut p = vec![t(&[0.5, 0.25])];
        let mut adam = AdamState::with_lr(0.1, &p);
        assert!(adam.step(&mut p, &[t(&[1.0])]).is_err());
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn non_finite_grad_skips_step() {
        let mut p = vec![t(&[0.5])];
        let mut adam = AdamState::with_lr(0.1, &p);
        let mut g = t(&[1.0]);
        g.data_mut()[0] = f64::INFINITY;
        assert!(matches!(adam.step(&mut p, &[g]), Err(AutodiffError::NonFinite { .. })));
        assert_eq!(p[0].data(), &[0.5]);
        assert_eq!(adam.step_count(), 0);
    }
}
