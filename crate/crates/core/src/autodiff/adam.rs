//! Adam with bias correction, plus a plain SGD step.

use super::graph::AutodiffError;
use super::tensor::{Scalar, Tensor};

/// Adam first/second moment state over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Standard defaults: β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Result<Self, AutodiffError> {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self, AutodiffError> {
        if lr <= 0.0 {
            return Err(AutodiffError::NegativeLearningRate(lr));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update. Parameters and gradients pair up by
    /// position; moment buffers are allocated on the first step.
    pub fn step<'a, I>(&mut self, params: I, grads: &[Tensor<T>]) -> Result<(), AutodiffError>
    where
        I: IntoIterator<Item = &'a mut Tensor<T>>,
    {
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != grads.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} gradients for {} moment buffers", grads.len(), self.first.len()),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.epsilon);

        let mut n = 0usize;
        for (i, param) in params.into_iter().enumerate() {
            n += 1;
            let grad = &grads[i];
            if param.shape() != grad.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
                });
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for ((p, &g), (m, v)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if n != grads.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params for {} gradients", n, grads.len()),
            });
        }
        Ok(())
    }
}

/// Plain gradient descent: θ ← θ − lr·g.
pub fn sgd_step<'a, T: Scalar, I>(
    params: I,
    grads: &[Tensor<T>],
    lr: f64,
) -> Result<(), AutodiffError>
where
    I: IntoIterator<Item = &'a mut Tensor<T>>,
{
    if lr <= 0.0 {
        return Err(AutodiffError::NegativeLearningRate(lr));
    }
    let lr = T::from_f64(lr);
    for (i, param) in params.into_iter().enumerate() {
        let grad = &grads[i];
        if param.shape() != grad.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sgd_step",
                detail: format!("param {:?} vs grad {:?}", param.shape(), grad.shape()),
            });
        }
        for (p, &g) in param.data_mut().iter_mut().zip(grad.data()) {
            *p = *p - lr * g;
        }
    }
    Ok(())
}
