//! Adam with bias correction, over a fixed list of parameter tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps taken so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment accumulators start at zero, one pair per parameter tensor.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "adam: first-moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "adam: second-moment count mismatch");
        self.m = m;
        self.v = v;
    }

    /// One update over all parameters. `params[i]` and `grads[i]` must have
    /// the same length as the accumulators created at construction.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), m.len(), "adam: shape mismatch for parameter of size {}", p.len());
            assert_eq!(g.len(), m.len(), "adam: shape mismatch for gradient of size {}", g.len());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.epsilon);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![vec![0.5, -0.25]];
        let grads = vec![vec![0.0, 0.0]];
        let mut st = AdamState::new(0.001, &[2]);
        st.step(&mut params, &grads);
        assert_eq!(params[0], vec![0.5, -0.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With g = 1 everywhere, the bias-corrected first step is
        // lr * g / (sqrt(g^2) + eps) ~= lr.
        let mut params = vec![vec![1.0, 2.0, 3.0]];
        let grads = vec![vec![1.0, 1.0, 1.0]];
        let mut st = AdamState::new(0.001, &[3]);
        st.step(&mut params, &grads);
        for (p, orig) in params[0].iter().zip([1.0, 2.0, 3.0]) {
            let delta = orig - p;
            assert!((delta - 0.001).abs() < 1e-9, "delta {delta}");
        }
    }

    #[test]
    fn steps_are_bit_deterministic() {
        let run = || {
            let mut params = vec![vec![0.3, -0.8], vec![0.1]];
            let grads = vec![vec![0.2, -0.1], vec![0.05]];
            let mut st = AdamState::new(0.01, &[2, 1]);
            st.step(&mut params, &grads);
            st.step(&mut params, &grads);
            params
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a[0][0].to_bits(), b[0][0].to_bits());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_panics() {
        let mut params = vec![vec![1.0, 2.0]];
        let grads = vec![vec![1.0]];
        let mut st = AdamState::new(0.001, &[2]);
        st.step(&mut params, &grads);
    }

    #[test]
    fn clip_scales_down_large_norms() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[0][1] - 0.8).abs() < 1e-12);
    }
}
