//! Adam over flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], hyper: &AdamHyper) {
        assert_eq!(params.len(), grad.len(), "adam: parameter/gradient length");
        assert_eq!(params.len(), self.first_moment.len(), "adam: state length");
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - hyper.beta1.powi(t);
        let c2 = 1.0 - hyper.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            let m = hyper.beta1 * self.first_moment[i] + (1.0 - hyper.beta1) * g;
            let v = hyper.beta2 * self.second_moment[i] + (1.0 - hyper.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= hyper.learning_rate * (m / c1) / ((v / c2).sqrt() + hyper.eps);
        }
    }
}
