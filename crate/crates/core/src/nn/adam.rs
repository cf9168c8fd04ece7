use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::Parameterized;

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Array2<f32>, Array2<f32>)>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// Applies one update to every trainable parameter from its accumulated
    /// gradient. Gradients are left in place.
    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.state.moments;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments.entry(name).or_insert_with(|| {
                (
                    Array2::zeros(p.value.raw_dim()),
                    Array2::zeros(p.value.raw_dim()),
                )
            });
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }
}
