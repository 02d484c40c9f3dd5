use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam with bias-corrected moments. Moments are allocated lazily on the
/// first step and keyed by parameter position.
#[derive(Clone, Debug)]
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
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Every parameter must have a gradient of
    /// matching shape.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "adam got {} params and {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g.ok_or_else(|| TensorError::Contract(format!("parameter {i} has no gradient")))?;
            if g.shape() != p.shape() {
                return Err(TensorError::Shape(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape())
        {
            return Err(TensorError::Contract("adam parameter set changed between steps".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.expect("checked above");
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
