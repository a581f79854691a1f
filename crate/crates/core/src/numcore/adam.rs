use super::{Result, Tensor, TensorError};

/// Bias-corrected Adam (Kingma & Ba) over a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moments sized for `params`; beta1 0.9, beta2 0.999, epsilon 1e-8.
    pub fn new<'a>(learning_rate: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient, then zeroes the
    /// gradients. Nothing is modified if any gradient is missing.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "optimizer tracks {} parameters, got {}",
                    self.first_moment.len(),
                    params.len()
                ),
            });
        }
        for (index, p) in params.iter().enumerate() {
            match p.grad() {
                None => return Err(TensorError::MissingGrad { index }),
                Some(_) if p.numel() != self.first_moment[index].len() => {
                    return Err(TensorError::Invalid {
                        op: "adam_step",
                        msg: format!("parameter {index} changed size"),
                    })
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for (index, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let m = &mut self.first_moment[index];
            let v = &mut self.second_moment[index];
            for (((value, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *value -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Tensor], max_norm: f64) -> f64 {
    let total: f64 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let scale = max_norm / total;
        for p in params.iter_mut() {
            if let Some(g) = p.grad_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
        }
    }
    total
}
