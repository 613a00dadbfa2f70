use super::{NumericsError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Adaptive moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent.
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self, NumericsError> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(NumericsError::Usage(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self, NumericsError> {
        Self::new(OptimizerKind::default(), learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self, NumericsError> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one update to every trainable parameter from its accumulated gradient.
    ///
    /// Gradients are left as they are. If any gradient is non-finite nothing
    /// is updated and the step counter does not move.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if let Some((_, p)) = store
            .iter()
            .find(|(_, p)| p.requires_grad && !p.grad.is_finite())
        {
            return Err(NumericsError::NonFinite(format!("gradient of {}", p.name)));
        }
        while self.first.len() < store.len() {
            let n = store.get(super::ParamId(self.first.len())).value.numel();
            self.first.push(vec![0.0; n]);
            self.second.push(vec![0.0; n]);
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for p in store.params_mut().iter_mut().filter(|p| p.requires_grad) {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, p) in store.params_mut().iter_mut().enumerate() {
                    if !p.requires_grad {
                        continue;
                    }
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let grad = p.grad.data();
                    for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                        let g = grad[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
