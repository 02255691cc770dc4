//! Named parameter registry.
//!
//! Parameters live outside any tape as plain buffers; each forward pass
//! binds them onto a fresh tape. Insertion order is fixed, which keeps
//! optimizer state aligned and gradient reductions deterministic.

use crate::tensor::{Tape, TensorId};
use rand::Rng;

/// Index of a parameter within a [`ParamSet`].
pub type ParamId = usize;

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    data: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: Vec<usize>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "param {name}: data length vs shape {shape:?}");
        assert!(
            !self.names.iter().any(|n| n == name),
            "param {name}: duplicate name"
        );
        self.names.push(name.to_string());
        self.data.push(data);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    /// Xavier-style uniform matrix, limit sqrt(6 / (fan_in + fan_out)).
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, data, vec![rows, cols])
    }

    /// Xavier-style uniform vector, treated as fan_in = n, fan_out = 1.
    pub fn add_xavier_vec<R: Rng>(&mut self, name: &str, n: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (n + 1) as f64).sqrt();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, data, vec![n])
    }

    /// Embedding table: rows are selected one-hot, so the fan-in is 1 and
    /// the scale depends on the row width only.
    pub fn add_xavier_embedding<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (1 + dim) as f64).sqrt();
        let data = (0..rows * dim).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, data, vec![rows, dim])
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, vec![0.0; numel], shape)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p]
    }

    pub fn shape(&self, p: ParamId) -> &[usize] {
        &self.shapes[p]
    }

    pub fn data(&self, p: ParamId) -> &[f64] {
        &self.data[p]
    }

    pub fn data_mut(&mut self, p: ParamId) -> &mut Vec<f64> {
        &mut self.data[p]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.data.iter().map(Vec::len).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Copy every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let ids = self
            .data
            .iter()
            .zip(self.shapes.iter())
            .map(|(d, s)| tape.leaf(d.clone(), s.clone(), trainable))
            .collect();
        BoundParams { ids }
    }

    /// Mutable view of every tensor's buffer, in registry order.
    pub fn all_data_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.data
    }

    /// Apply updated values (e.g. after an optimizer step).
    pub fn set_all(&mut self, values: Vec<Vec<f64>>) {
        assert_eq!(values.len(), self.data.len(), "param count mismatch");
        for (dst, src) in self.data.iter_mut().zip(values) {
            assert_eq!(dst.len(), src.len(), "param size mismatch");
            *dst = src;
        }
    }

    pub fn clone_data(&self) -> Vec<Vec<f64>> {
        self.data.clone()
    }

    /// Collect gradients off a tape in registry order; zeros where a
    /// parameter was not touched.
    pub fn grads_from(&self, tape: &Tape, bound: &BoundParams) -> Vec<Vec<f64>> {
        bound
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.data[i].len()])
            })
            .collect()
    }
}

/// Tape-resident view of a [`ParamSet`] for one forward pass.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p]
    }

    /// Wrap externally created leaf ids (used by the gradient checker).
    pub fn from_ids(ids: Vec<TensorId>) -> Self {
        BoundParams { ids }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_at;

    #[test]
    fn bind_and_grads_align() {
        let mut rng = rng_at(1, &[0]);
        let mut ps = ParamSet::new();
        let a = ps.add_xavier("a", 2, 3, &mut rng);
        let b = ps.add_zeros("b", vec![3]);
        let mut tape = Tape::new();
        let bound = ps.bind(&mut tape, true);
        let x = tape.matmul(bound.id(a), bound.id(b));
        let l = tape.sum(x);
        tape.backward(l);
        let grads = ps.grads_from(&tape, &bound);
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0].len(), 6);
        // b is all zeros, so dL/da is zero; dL/db is generally not.
        assert!(grads[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    #[should_panic(expected = "duplicate name")]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add_zeros("w", vec![1]);
        ps.add_zeros("w", vec![1]);
    }
}
