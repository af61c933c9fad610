use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Moment buffers of [`Adam`], one pair per trainable parameter in the
/// order the parameters are passed to [`Adam::step`].
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: AdamState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState {
                first_moment: Vec::new(),
                second_moment: Vec::new(),
                step: 0,
            },
        }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// Applies one update to every parameter with `requires_grad`. The
    /// parameter list must be the same, in the same order, on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        let trainable: Vec<usize> = (0..params.len()).filter(|&i| params[i].requires_grad()).collect();
        if let Some(&missing) = trainable.iter().find(|&&i| params[i].grad().is_none()) {
            return Err(Error::MissingGrad(missing));
        }
        let state = &mut self.state;
        if state.step == 0 {
            state.first_moment = trainable.iter().map(|&i| vec![T::zero(); params[i].numel()]).collect();
            state.second_moment = state.first_moment.clone();
        }
        let shapes_match = state.first_moment.len() == trainable.len()
            && trainable
                .iter()
                .zip(&state.first_moment)
                .all(|(&i, m)| m.len() == params[i].numel());
        if !shapes_match {
            return Err(Error::config("adam", "parameter set changed between steps"));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = T::from_f64_lossy(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::from_f64_lossy(1.0 / (1.0 - self.beta2.powi(t)));
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (lr, eps) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.eps));
        for (slot, &i) in trainable.iter().enumerate() {
            let p = &mut *params[i];
            let grad = p.grad().expect("checked above").to_vec();
            let m = &mut state.first_moment[slot];
            let v = &mut state.second_moment[slot];
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
