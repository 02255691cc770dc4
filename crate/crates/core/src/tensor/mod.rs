//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! the operation that produced it. [`Tape::backward`] walks the record in
//! reverse, accumulating `dLoss/dTensor` into each node that requires
//! gradients. Tapes are single-threaded; distinct samples get distinct tapes
//! and may run concurrently as long as parameters are only read.
//!
//! Shapes are `[1]` for scalars, `[n]` for vectors, `[m, n]` for row-major
//! matrices. Shape violations panic with a message naming the op and both
//! shapes; they are contract bugs, not runtime conditions.

mod adam;
mod gradcheck;

pub use adam::{clip_global_norm, AdamState};
pub use gradcheck::{grad_check, grad_check_detail};

use rand::Rng;

/// Index of a tensor on its tape.
pub type TensorId = usize;

/// Sentinel standing in for negative infinity in masked scores. Chosen so
/// that after max-subtraction `exp` underflows to exactly 0.0, making masked
/// softmax probabilities exactly zero and reproducible.
pub const MASK_FILL: f64 = -1e30;

/// Any slice max at or below this is treated as fully masked.
const MASK_THRESHOLD: f64 = -5e29;

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// Matrix plus a row vector broadcast over rows.
    AddRow { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    MinElem { a: TensorId, b: TensorId },
    /// y = mul * x + add, elementwise with constants.
    Affine { x: TensorId, mul: f64 },
    Concat { inputs: Vec<TensorId>, axis: usize },
    StackRows { inputs: Vec<TensorId> },
    GatherRows { x: TensorId, indices: Vec<usize> },
    /// Single element of a vector as a scalar.
    Element { x: TensorId, index: usize },
    /// Scalar tiled into a vector.
    RepeatScalar { x: TensorId },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Log { x: TensorId },
    Softmax { x: TensorId, axis: usize },
    /// Max-reduce over one axis; doubles as max pooling. `argmax` holds the
    /// winning input offset per output element (first winner on ties).
    MaxAxis { x: TensorId, argmax: Vec<usize> },
    Sum { x: TensorId },
    Mean { x: TensorId },
    Transpose { x: TensorId },
    /// Fused GRU recurrence: h' = z (.) h + (1 - z) (.) c with
    /// z = sigmoid(pz[row] + h U_z), r = sigmoid(pr[row] + h U_r),
    /// c = tanh(pc[row] + (r (.) h) U_c). Gate activations are stored for
    /// the backward pass. The projection inputs are either (l, hidden)
    /// matrices indexed by `row` or plain hidden-sized vectors (row 0).
    GruStep {
        h: TensorId,
        pz: TensorId,
        pr: TensorId,
        pc: TensorId,
        row: usize,
        uz: TensorId,
        ur: TensorId,
        uc: TensorId,
        z: Vec<f64>,
        r: Vec<f64>,
        cand: Vec<f64>,
    },
    /// Matrix plus a column vector broadcast over columns.
    AddCol { a: TensorId, b: TensorId },
    /// Matrix times a row vector broadcast over rows.
    MulRow { a: TensorId, b: TensorId },
    /// Inverted dropout; mask entries are 0 or 1/keep_ratio.
    Dropout { x: TensorId, mask: Vec<f64> },
    /// Row lookup into an embedding table.
    Embed { table: TensorId, ids: Vec<usize> },
    /// Overwrite vector positions with the mask sentinel.
    MaskedFill { x: TensorId, indices: Vec<usize> },
}

pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), ops: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor (input or parameter).
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(shape.iter().all(|&d| d > 0), "leaf: zero dimension in shape {:?}", shape);
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.leaf(vec![v], vec![1], false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Tensor { shape, data, requires_grad, grad: None });
        self.ops.push(op);
        id
    }

    fn out(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        let rg = match &op {
            Op::Leaf => false,
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::AddRow { a, b }
            | Op::Mul { a, b }
            | Op::MinElem { a, b } => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::Concat { inputs, .. } | Op::StackRows { inputs } => {
                inputs.iter().any(|&i| self.nodes[i].requires_grad)
            }
            Op::AddCol { a, b } | Op::MulRow { a, b } => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::GruStep { h, pz, pr, pc, uz, ur, uc, .. } => {
                [*h, *pz, *pr, *pc, *uz, *ur, *uc]
                    .iter()
                    .any(|&i| self.nodes[i].requires_grad)
            }
            Op::Affine { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Element { x, .. }
            | Op::RepeatScalar { x }
            | Op::Tanh { x }
            | Op::Sigmoid { x }
            | Op::Log { x }
            | Op::Softmax { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Transpose { x }
            | Op::Dropout { x, .. }
            | Op::MaskedFill { x, .. } => self.nodes[*x].requires_grad,
            Op::Embed { table, .. } => self.nodes[*table].requires_grad,
        };
        self.push(data, shape, rg, op)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Matrix product. Accepts (m,k)x(k,n), (k)x(k,n) and (m,k)x(k).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        let (m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            _ => panic!("matmul: incompatible shapes {:?} and {:?}", sa, sb),
        };
        let mut data = vec![0.0; m * n];
        matmul_into(&self.nodes[a].data, &self.nodes[b].data, m, k, n, &mut data);
        self.out(data, out_shape, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert_eq!(sa, sb, "add: incompatible shapes {:?} and {:?}", sa, sb);
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.clone();
        self.out(data, shape, Op::Add { a, b })
    }

    /// `a` is (m,n), `b` is (n); adds `b` to every row of `a`.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        match (sa.as_slice(), sb.as_slice()) {
            ([_, n1], [n2]) if n1 == n2 => {}
            _ => panic!("add-row: incompatible shapes {:?} and {:?}", sa, sb),
        }
        let n = sb[0];
        let bv = &self.nodes[b].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        self.out(data, sa, Op::AddRow { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert_eq!(sa, sb, "mul: incompatible shapes {:?} and {:?}", sa, sb);
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.clone();
        self.out(data, shape, Op::Mul { a, b })
    }

    /// Elementwise minimum. On exact ties the gradient routes to `a`.
    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        assert_eq!(sa, sb, "elementwise-min: incompatible shapes {:?} and {:?}", sa, sb);
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x.min(*y))
            .collect();
        let shape = sa.clone();
        self.out(data, shape, Op::MinElem { a, b })
    }

    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| mul * v + add).collect();
        let shape = self.nodes[x].shape.clone();
        self.out(data, shape, Op::Affine { x, mul })
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.affine(x, c, 0.0)
    }

    /// Concatenate vectors (axis 0) or matrices (axis 0 stacks rows,
    /// axis 1 widens rows).
    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> TensorId {
        assert!(!inputs.is_empty(), "concat: no inputs");
        let first = self.nodes[inputs[0]].shape.clone();
        let ndim = first.len();
        assert!(axis < ndim, "concat: axis {} out of range for shape {:?}", axis, first);
        for &i in inputs {
            let s = &self.nodes[i].shape;
            assert_eq!(s.len(), ndim, "concat: rank mismatch {:?} vs {:?}", first, s);
            for d in 0..ndim {
                if d != axis {
                    assert_eq!(
                        s[d], first[d],
                        "concat: incompatible shapes {:?} and {:?} along axis {}",
                        first, s, axis
                    );
                }
            }
        }
        if ndim == 1 {
            let mut data = Vec::new();
            for &i in inputs {
                data.extend_from_slice(&self.nodes[i].data);
            }
            let len = data.len();
            return self.out(data, vec![len], Op::Concat { inputs: inputs.to_vec(), axis });
        }
        let rows = first[0];
        if axis == 0 {
            let total_rows: usize = inputs.iter().map(|&i| self.nodes[i].shape[0]).sum();
            let mut data = Vec::with_capacity(total_rows * first[1]);
            for &i in inputs {
                data.extend_from_slice(&self.nodes[i].data);
            }
            self.out(data, vec![total_rows, first[1]], Op::Concat { inputs: inputs.to_vec(), axis })
        } else {
            let widths: Vec<usize> = inputs.iter().map(|&i| self.nodes[i].shape[1]).collect();
            let total_w: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total_w];
            for r in 0..rows {
                let mut off = 0;
                for (&i, &w) in inputs.iter().zip(widths.iter()) {
                    let src = &self.nodes[i].data[r * w..(r + 1) * w];
                    data[r * total_w + off..r * total_w + off + w].copy_from_slice(src);
                    off += w;
                }
            }
            self.out(data, vec![rows, total_w], Op::Concat { inputs: inputs.to_vec(), axis })
        }
    }

    /// Build an (l, n) matrix from l vectors of length n.
    pub fn stack_rows(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "stack-rows: no inputs");
        let n = match self.nodes[inputs[0]].shape.as_slice() {
            [n] => *n,
            s => panic!("stack-rows: expected vectors, got shape {:?}", s),
        };
        let mut data = Vec::with_capacity(inputs.len() * n);
        for &i in inputs {
            let s = &self.nodes[i].shape;
            assert_eq!(s.as_slice(), [n], "stack-rows: incompatible shapes [{}] and {:?}", n, s);
            data.extend_from_slice(&self.nodes[i].data);
        }
        self.out(data, vec![inputs.len(), n], Op::StackRows { inputs: inputs.to_vec() })
    }

    /// Select rows of a matrix; duplicate indices are allowed.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let s = self.nodes[x].shape.clone();
        let (rows, cols) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => panic!("gather-rows: expected matrix, got shape {:?}", s),
        };
        assert!(!indices.is_empty(), "gather-rows: no indices");
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            assert!(r < rows, "gather-rows: row {} out of range for shape {:?}", r, s);
            data.extend_from_slice(&self.nodes[x].data[r * cols..(r + 1) * cols]);
        }
        self.out(data, vec![indices.len(), cols], Op::GatherRows { x, indices: indices.to_vec() })
    }

    /// One row of a matrix as a vector.
    pub fn row(&mut self, x: TensorId, r: usize) -> TensorId {
        let s = self.nodes[x].shape.clone();
        let (rows, cols) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => panic!("row: expected matrix, got shape {:?}", s),
        };
        assert!(r < rows, "row: index {} out of range for shape {:?}", r, s);
        let data = self.nodes[x].data[r * cols..(r + 1) * cols].to_vec();
        self.out(data, vec![cols], Op::GatherRows { x, indices: vec![r] })
    }

    /// One element of a vector as a scalar.
    pub fn element(&mut self, x: TensorId, index: usize) -> TensorId {
        let s = self.nodes[x].shape.clone();
        let n = match s.as_slice() {
            [n] => *n,
            _ => panic!("element: expected vector, got shape {:?}", s),
        };
        assert!(index < n, "element: index {} out of range for shape {:?}", index, s);
        let v = self.nodes[x].data[index];
        self.out(vec![v], vec![1], Op::Element { x, index })
    }

    /// Tile a scalar into a length-n vector.
    pub fn repeat_scalar(&mut self, x: TensorId, n: usize) -> TensorId {
        let s = self.nodes[x].shape.clone();
        assert_eq!(s.as_slice(), [1], "repeat-scalar: expected scalar, got shape {:?}", s);
        assert!(n > 0, "repeat-scalar: length must be positive");
        let v = self.nodes[x].data[0];
        self.out(vec![v; n], vec![n], Op::RepeatScalar { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x].shape.clone();
        self.out(data, shape, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.nodes[x].shape.clone();
        self.out(data, shape, Op::Sigmoid { x })
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[x].data.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x].shape.clone();
        self.out(data, shape, Op::Log { x })
    }

    /// Softmax along `axis`. Entries at or below the mask sentinel map to
    /// probability exactly 0. Panics if a whole slice is masked: the
    /// distribution would be undefined.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x].shape.clone();
        assert!(axis < shape.len(), "softmax: axis {} out of range for shape {:?}", axis, shape);
        let (outer, size, inner) = slice_dims(&shape, axis);
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * size * inner + j * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..size {
                    mx = mx.max(src[at(j)]);
                }
                assert!(
                    mx > MASK_THRESHOLD,
                    "softmax: all {} entries along axis {} are masked; distribution undefined",
                    size,
                    axis
                );
                let mut z = 0.0;
                for j in 0..size {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..size {
                    data[at(j)] /= z;
                }
            }
        }
        self.out(data, shape, Op::Softmax { x, axis })
    }

    /// Max-reduce over `axis`. A vector reduces to a scalar; a matrix loses
    /// the reduced axis. This is also the max-pooling primitive.
    pub fn max_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x].shape.clone();
        assert!(axis < shape.len(), "max-over-axis: axis {} out of range for shape {:?}", axis, shape);
        let (outer, size, inner) = slice_dims(&shape, axis);
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for j in 0..size {
                    let v = src[o * size * inner + j * inner + i];
                    if v > best {
                        best = v;
                        best_at = o * size * inner + j * inner + i;
                    }
                }
                data[o * inner + i] = best;
                argmax[o * inner + i] = best_at;
            }
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.out(data, out_shape, Op::MaxAxis { x, argmax })
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x].data.iter().sum();
        self.out(vec![s], vec![1], Op::Sum { x })
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x].data.len() as f64;
        let s: f64 = self.nodes[x].data.iter().sum();
        self.out(vec![s / n], vec![1], Op::Mean { x })
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x].shape.clone();
        let (rows, cols) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => panic!("transpose: expected matrix, got shape {:?}", s),
        };
        let src = &self.nodes[x].data;
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        self.out(data, vec![cols, rows], Op::Transpose { x })
    }

    /// `a` is (m,n), `b` is (m); adds `b[r]` to every element of row r.
    pub fn add_col(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        match (sa.as_slice(), sb.as_slice()) {
            ([m, _], [m2]) if m == m2 => {}
            _ => panic!("add-col: incompatible shapes {:?} and {:?}", sa, sb),
        }
        let n = sa[1];
        let bv = &self.nodes[b].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i / n])
            .collect();
        self.out(data, sa, Op::AddCol { a, b })
    }

    /// `a` is (m,n), `b` is (n); multiplies each row of `a` by `b` elementwise.
    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (sa, sb) = (self.nodes[a].shape.clone(), self.nodes[b].shape.clone());
        match (sa.as_slice(), sb.as_slice()) {
            ([_, n1], [n2]) if n1 == n2 => {}
            _ => panic!("mul-row: incompatible shapes {:?} and {:?}", sa, sb),
        }
        let n = sb[0];
        let bv = &self.nodes[b].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % n])
            .collect();
        self.out(data, sa, Op::MulRow { a, b })
    }

    /// Inverted dropout: keeps each element with probability `keep_ratio`
    /// and divides kept values by `keep_ratio`, so evaluation needs no
    /// rescaling. `keep_ratio == 1.0` is the identity. Evaluation-mode
    /// callers simply do not insert this op.
    pub fn dropout<R: Rng>(&mut self, x: TensorId, keep_ratio: f64, rng: &mut R) -> TensorId {
        assert!(
            keep_ratio > 0.0 && keep_ratio <= 1.0,
            "dropout: keep_ratio {} outside (0, 1]",
            keep_ratio
        );
        if keep_ratio == 1.0 {
            let data = self.nodes[x].data.clone();
            let shape = self.nodes[x].shape.clone();
            let n = data.len();
            return self.out(data, shape, Op::Dropout { x, mask: vec![1.0; n] });
        }
        let n = self.nodes[x].data.len();
        let inv = 1.0 / keep_ratio;
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < keep_ratio { inv } else { 0.0 }).collect();
        let data: Vec<f64> =
            self.nodes[x].data.iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x].shape.clone();
        self.out(data, shape, Op::Dropout { x, mask })
    }

    /// Look up rows of `table` for each id; output is (ids.len(), dim).
    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let s = self.nodes[table].shape.clone();
        let (rows, dim) = match s.as_slice() {
            [r, c] => (*r, *c),
            _ => panic!("embedding-lookup: expected matrix table, got shape {:?}", s),
        };
        assert!(!ids.is_empty(), "embedding-lookup: no ids");
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < rows, "embedding-lookup: id {} out of range for table {:?}", id, s);
            data.extend_from_slice(&self.nodes[table].data[id * dim..(id + 1) * dim]);
        }
        self.out(data, vec![ids.len(), dim], Op::Embed { table, ids: ids.to_vec() })
    }

    /// Overwrite `indices` of a vector with the mask sentinel so a following
    /// softmax assigns them probability exactly 0.
    pub fn masked_fill(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let s = self.nodes[x].shape.clone();
        let n = match s.as_slice() {
            [n] => *n,
            _ => panic!("masked-fill: expected vector, got shape {:?}", s),
        };
        let mut data = self.nodes[x].data.clone();
        for &i in indices {
            assert!(i < n, "masked-fill: index {} out of range for shape {:?}", i, s);
            data[i] = MASK_FILL;
        }
        self.out(data, s, Op::MaskedFill { x, indices: indices.to_vec() })
    }

    /// Fused GRU step; see [`Op::GruStep`]. `pz`/`pr`/`pc` hold the input
    /// projections (x W + b), precomputed per sequence; `row` picks the
    /// current position (0 for vector-shaped projections).
    #[allow(clippy::too_many_arguments)]
    pub fn gru_step(
        &mut self,
        h: TensorId,
        pz: TensorId,
        pr: TensorId,
        pc: TensorId,
        row: usize,
        uz: TensorId,
        ur: TensorId,
        uc: TensorId,
    ) -> TensorId {
        let hidden = match self.nodes[h].shape.as_slice() {
            [n] => *n,
            s => panic!("gru-step: state must be a vector, got shape {:?}", s),
        };
        for (name, u) in [("u_z", uz), ("u_r", ur), ("u_c", uc)] {
            let su = &self.nodes[u].shape;
            assert_eq!(
                su.as_slice(),
                [hidden, hidden],
                "gru-step: {name} has shape {:?}, want [{hidden}, {hidden}]",
                su
            );
        }
        let zin = row_slice(&self.nodes[pz], row, hidden, "pz").to_vec();
        let rin = row_slice(&self.nodes[pr], row, hidden, "pr").to_vec();
        let cin = row_slice(&self.nodes[pc], row, hidden, "pc").to_vec();
        let hd = &self.nodes[h].data;
        let (uzd, urd, ucd) =
            (&self.nodes[uz].data, &self.nodes[ur].data, &self.nodes[uc].data);
        let mut z = zin;
        let mut r = rin;
        vec_mat_add(hd, uzd, hidden, &mut z);
        vec_mat_add(hd, urd, hidden, &mut r);
        for v in z.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        for v in r.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let rh: Vec<f64> = r.iter().zip(hd.iter()).map(|(a, b)| a * b).collect();
        let mut cand = cin;
        vec_mat_add(&rh, ucd, hidden, &mut cand);
        for v in cand.iter_mut() {
            *v = v.tanh();
        }
        let out: Vec<f64> = z
            .iter()
            .zip(hd.iter())
            .zip(cand.iter())
            .map(|((zv, hv), cv)| zv * hv + (1.0 - zv) * cv)
            .collect();
        self.out(
            out,
            vec![hidden],
            Op::GruStep { h, pz, pr, pc, row, uz, ur, uc, z, r, cand },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each tensor with `requires_grad`
    /// reachable from `loss` receives `dLoss/dTensor`; repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss].numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[loss].shape
        );
        let n = loss + 1;
        let nodes = &mut self.nodes;
        let ops = &self.ops;
        // Live flags: nodes that both need grad and influence the loss.
        let mut live = vec![false; n];
        live[loss] = nodes[loss].requires_grad;
        if !live[loss] {
            return; // loss does not depend on any parameter
        }
        for i in (0..n).rev() {
            if live[i] {
                for_each_input(&ops[i], |inp| {
                    if nodes[inp].requires_grad {
                        live[inp] = true;
                    }
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            propagate(&ops[i], nodes, i, &g, &mut grads, &live);
            let node = &mut nodes[i];
            if node.requires_grad {
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
    }
}

/// Gradient accumulation slot for input `id`, allocated on first touch.
#[inline]
fn acc_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    live: &[bool],
    id: TensorId,
    len: usize,
) -> Option<&'a mut [f64]> {
    if !live[id] {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

/// Push `g` (the output gradient of node `i`) into the node's inputs.
/// Reads tensor data immutably and accumulates in place; no op payloads are
/// cloned.
fn propagate(
    op: &Op,
    nodes: &[Tensor],
    i: TensorId,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    live: &[bool],
) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (a, b) = (*a, *b);
            let (sa, sb) = (&nodes[a].shape, &nodes[b].shape);
            let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
                ([m, k1], [_, n]) => (*m, *k1, *n),
                ([k1], [_, n]) => (1, *k1, *n),
                ([m, k1], [_]) => (*m, *k1, 1),
                _ => unreachable!(),
            };
            if let Some(da) = acc_slot(grads, live, a, m * k) {
                // dA += G @ B^T
                let bd = &nodes[b].data;
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let darow = &mut da[r * k..(r + 1) * k];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for (gv, bv) in grow.iter().zip(brow.iter()) {
                            s += gv * bv;
                        }
                        darow[p] += s;
                    }
                }
            }
            if let Some(db) = acc_slot(grads, live, b, k * n) {
                // dB += A^T @ G
                let ad = &nodes[a].data;
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    let arow = &ad[r * k..(r + 1) * k];
                    for (p, &arp) in arow.iter().enumerate() {
                        if arp == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for (d, gv) in dbrow.iter_mut().zip(grow.iter()) {
                            *d += arp * gv;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for &id in [a, b] {
                if let Some(d) = acc_slot(grads, live, id, g.len()) {
                    for (x, y) in d.iter_mut().zip(g.iter()) {
                        *x += y;
                    }
                }
            }
        }
        Op::AddRow { a, b } => {
            if let Some(d) = acc_slot(grads, live, *a, g.len()) {
                for (x, y) in d.iter_mut().zip(g.iter()) {
                    *x += y;
                }
            }
            let nb = nodes[*b].data.len();
            if let Some(d) = acc_slot(grads, live, *b, nb) {
                for (i, gv) in g.iter().enumerate() {
                    d[i % nb] += gv;
                }
            }
        }
        Op::AddCol { a, b } => {
            if let Some(d) = acc_slot(grads, live, *a, g.len()) {
                for (x, y) in d.iter_mut().zip(g.iter()) {
                    *x += y;
                }
            }
            let ncols = nodes[i].shape[1];
            let nb = nodes[*b].data.len();
            if let Some(d) = acc_slot(grads, live, *b, nb) {
                for (i, gv) in g.iter().enumerate() {
                    d[i / ncols] += gv;
                }
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if live[a] {
                let bd = &nodes[b].data;
                let d = acc_slot(grads, live, a, g.len()).unwrap();
                for ((x, gv), y) in d.iter_mut().zip(g.iter()).zip(bd.iter()) {
                    *x += gv * y;
                }
            }
            if live[b] {
                let ad = &nodes[a].data;
                let d = acc_slot(grads, live, b, g.len()).unwrap();
                for ((x, gv), y) in d.iter_mut().zip(g.iter()).zip(ad.iter()) {
                    *x += gv * y;
                }
            }
        }
        Op::MulRow { a, b } => {
            let (a, b) = (*a, *b);
            let nb = nodes[b].data.len();
            if live[a] {
                let bd = &nodes[b].data;
                let d = acc_slot(grads, live, a, g.len()).unwrap();
                for (i, (x, gv)) in d.iter_mut().zip(g.iter()).enumerate() {
                    *x += gv * bd[i % nb];
                }
            }
            if live[b] {
                let ad = &nodes[a].data;
                let d = acc_slot(grads, live, b, nb).unwrap();
                for (i, gv) in g.iter().enumerate() {
                    d[i % nb] += gv * ad[i];
                }
            }
        }
        Op::MinElem { a, b } => {
            let (a, b) = (*a, *b);
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            if live[a] {
                let d = acc_slot(grads, live, a, g.len()).unwrap();
                for (i, gv) in g.iter().enumerate() {
                    if ad[i] <= bd[i] {
                        d[i] += gv;
                    }
                }
            }
            if live[b] {
                let d = acc_slot(grads, live, b, g.len()).unwrap();
                for (i, gv) in g.iter().enumerate() {
                    if bd[i] < ad[i] {
                        d[i] += gv;
                    }
                }
            }
        }
        Op::Affine { x, mul } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                for (v, gv) in d.iter_mut().zip(g.iter()) {
                    *v += mul * gv;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let ndim = nodes[inputs[0]].shape.len();
            if ndim == 1 || *axis == 0 {
                let mut off = 0;
                for &inp in inputs {
                    let len = nodes[inp].data.len();
                    if let Some(d) = acc_slot(grads, live, inp, len) {
                        for (v, gv) in d.iter_mut().zip(&g[off..off + len]) {
                            *v += gv;
                        }
                    }
                    off += len;
                }
            } else {
                let rows = nodes[inputs[0]].shape[0];
                let total_w = nodes[i].shape[1];
                let mut off = 0;
                for &inp in inputs {
                    let w = nodes[inp].shape[1];
                    if let Some(d) = acc_slot(grads, live, inp, rows * w) {
                        for r in 0..rows {
                            let src = &g[r * total_w + off..r * total_w + off + w];
                            for (v, gv) in d[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *v += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
        }
        Op::StackRows { inputs } => {
            let nrow = nodes[inputs[0]].data.len();
            for (r, &inp) in inputs.iter().enumerate() {
                if let Some(d) = acc_slot(grads, live, inp, nrow) {
                    for (v, gv) in d.iter_mut().zip(&g[r * nrow..(r + 1) * nrow]) {
                        *v += gv;
                    }
                }
            }
        }
        Op::GatherRows { x, indices } => {
            let x = *x;
            if live[x] {
                let cols = nodes[x].shape[1];
                let len = nodes[x].data.len();
                let d = acc_slot(grads, live, x, len).unwrap();
                for (r, &src) in indices.iter().enumerate() {
                    for (v, gv) in
                        d[src * cols..(src + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols])
                    {
                        *v += gv;
                    }
                }
            }
        }
        Op::Element { x, index } => {
            let len = nodes[*x].data.len();
            if let Some(d) = acc_slot(grads, live, *x, len) {
                d[*index] += g[0];
            }
        }
        Op::RepeatScalar { x } => {
            if let Some(d) = acc_slot(grads, live, *x, 1) {
                d[0] += g.iter().sum::<f64>();
            }
        }
        Op::Tanh { x } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                let y = &nodes[i].data;
                for ((v, gv), t) in d.iter_mut().zip(g.iter()).zip(y.iter()) {
                    *v += gv * (1.0 - t * t);
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                let y = &nodes[i].data;
                for ((v, gv), s) in d.iter_mut().zip(g.iter()).zip(y.iter()) {
                    *v += gv * s * (1.0 - s);
                }
            }
        }
        Op::Log { x } => {
            let x = *x;
            if live[x] {
                let d = acc_slot(grads, live, x, g.len()).unwrap();
                let xd = &nodes[x].data;
                for ((v, gv), xv) in d.iter_mut().zip(g.iter()).zip(xd.iter()) {
                    *v += gv / xv;
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                let y = &nodes[i].data;
                let (outer, size, inner) = slice_dims(&nodes[i].shape, *axis);
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |j: usize| o * size * inner + j * inner + ii;
                        let mut dot = 0.0;
                        for j in 0..size {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..size {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaxAxis { x, argmax } => {
            let len = nodes[*x].data.len();
            if let Some(d) = acc_slot(grads, live, *x, len) {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }
        }
        Op::Sum { x } => {
            let len = nodes[*x].data.len();
            if let Some(d) = acc_slot(grads, live, *x, len) {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Mean { x } => {
            let len = nodes[*x].data.len();
            if let Some(d) = acc_slot(grads, live, *x, len) {
                let s = g[0] / len as f64;
                for v in d.iter_mut() {
                    *v += s;
                }
            }
        }
        Op::Transpose { x } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                let (rows, cols) = (nodes[i].shape[0], nodes[i].shape[1]);
                for r in 0..rows {
                    for c in 0..cols {
                        d[c * rows + r] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                for ((v, gv), m) in d.iter_mut().zip(g.iter()).zip(mask.iter()) {
                    *v += gv * m;
                }
            }
        }
        Op::GruStep { h, pz, pr, pc, row, uz, ur, uc, z, r, cand } => {
            let n = g.len();
            let hd = &nodes[*h].data;
            let (uzd, urd, ucd) =
                (&nodes[*uz].data, &nodes[*ur].data, &nodes[*uc].data);
            // h' = z h + (1 - z) c
            let mut dh: Vec<f64> = g.iter().zip(z.iter()).map(|(gv, zv)| gv * zv).collect();
            let dz: Vec<f64> = g
                .iter()
                .zip(hd.iter())
                .zip(cand.iter())
                .map(|((gv, hv), cv)| gv * (hv - cv))
                .collect();
            let dcand: Vec<f64> =
                g.iter().zip(z.iter()).map(|(gv, zv)| gv * (1.0 - zv)).collect();
            // candidate pre-activation
            let dcin: Vec<f64> =
                dcand.iter().zip(cand.iter()).map(|(d, c)| d * (1.0 - c * c)).collect();
            // d(r (.) h) = dcin . U_c^T
            let mut drh = vec![0.0; n];
            for j in 0..n {
                let mrow = &ucd[j * n..(j + 1) * n];
                let mut s = 0.0;
                for (dc, m) in dcin.iter().zip(mrow.iter()) {
                    s += dc * m;
                }
                drh[j] = s;
            }
            let dr: Vec<f64> = drh.iter().zip(hd.iter()).map(|(d, hv)| d * hv).collect();
            for (dhv, (d, rv)) in dh.iter_mut().zip(drh.iter().zip(r.iter())) {
                *dhv += d * rv;
            }
            // gate pre-activations
            let drin: Vec<f64> =
                dr.iter().zip(r.iter()).map(|(d, rv)| d * rv * (1.0 - rv)).collect();
            let dzin: Vec<f64> =
                dz.iter().zip(z.iter()).map(|(d, zv)| d * zv * (1.0 - zv)).collect();
            // dh += dzin . U_z^T + drin . U_r^T
            for j in 0..n {
                let zrow = &uzd[j * n..(j + 1) * n];
                let rrow = &urd[j * n..(j + 1) * n];
                let mut s = 0.0;
                for k in 0..n {
                    s += dzin[k] * zrow[k] + drin[k] * rrow[k];
                }
                dh[j] += s;
            }
            // recurrent weight gradients: outer products
            if live[*uz] {
                let d = acc_slot(grads, live, *uz, n * n).unwrap();
                for (j, &hv) in hd.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    for (dv, dg) in d[j * n..(j + 1) * n].iter_mut().zip(dzin.iter()) {
                        *dv += hv * dg;
                    }
                }
            }
            if live[*ur] {
                let d = acc_slot(grads, live, *ur, n * n).unwrap();
                for (j, &hv) in hd.iter().enumerate() {
                    if hv == 0.0 {
                        continue;
                    }
                    for (dv, dg) in d[j * n..(j + 1) * n].iter_mut().zip(drin.iter()) {
                        *dv += hv * dg;
                    }
                }
            }
            if live[*uc] {
                let d = acc_slot(grads, live, *uc, n * n).unwrap();
                let rh: Vec<f64> = r.iter().zip(hd.iter()).map(|(a, b)| a * b).collect();
                for (j, &v) in rh.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    for (dv, dg) in d[j * n..(j + 1) * n].iter_mut().zip(dcin.iter()) {
                        *dv += v * dg;
                    }
                }
            }
            // projection-row gradients
            for (pid, dg) in [(pz, &dzin), (pr, &drin), (pc, &dcin)] {
                let len = nodes[*pid].data.len();
                if let Some(d) = acc_slot(grads, live, *pid, len) {
                    let off = if nodes[*pid].shape.len() == 2 { row * n } else { 0 };
                    for (dv, g2) in d[off..off + n].iter_mut().zip(dg.iter()) {
                        *dv += g2;
                    }
                }
            }
            if let Some(d) = acc_slot(grads, live, *h, n) {
                for (dv, g2) in d.iter_mut().zip(dh.iter()) {
                    *dv += g2;
                }
            }
        }
        Op::Embed { table, ids } => {
            let len = nodes[*table].data.len();
            let dim = nodes[*table].shape[1];
            if let Some(d) = acc_slot(grads, live, *table, len) {
                for (r, &id) in ids.iter().enumerate() {
                    for (v, gv) in
                        d[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim])
                    {
                        *v += gv;
                    }
                }
            }
        }
        Op::MaskedFill { x, indices } => {
            if let Some(d) = acc_slot(grads, live, *x, g.len()) {
                for (i, (v, gv)) in d.iter_mut().zip(g.iter()).enumerate() {
                    if !indices.contains(&i) {
                        *v += gv;
                    }
                }
            }
        }
    }
}

/// Visit each input id of `op` without allocating.
fn for_each_input<F: FnMut(TensorId)>(op: &Op, mut f: F) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::AddRow { a, b }
        | Op::AddCol { a, b }
        | Op::Mul { a, b }
        | Op::MulRow { a, b }
        | Op::MinElem { a, b } => {
            f(*a);
            f(*b);
        }
        Op::Concat { inputs, .. } | Op::StackRows { inputs } => {
            for &i in inputs {
                f(i);
            }
        }
        Op::GruStep { h, pz, pr, pc, uz, ur, uc, .. } => {
            for &i in [h, pz, pr, pc, uz, ur, uc].iter() {
                f(*i);
            }
        }
        Op::Affine { x, .. }
        | Op::GatherRows { x, .. }
        | Op::Element { x, .. }
        | Op::RepeatScalar { x }
        | Op::Tanh { x }
        | Op::Sigmoid { x }
        | Op::Log { x }
        | Op::Softmax { x, .. }
        | Op::MaxAxis { x, .. }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::Transpose { x }
        | Op::Dropout { x, .. }
        | Op::MaskedFill { x, .. } => f(*x),
        Op::Embed { table, .. } => f(*table),
    }
}

/// View row `row` of a (l, n) matrix node, or the whole data of an (n)
/// vector node (row must be 0).
fn row_slice<'a>(node: &'a Tensor, row: usize, n: usize, what: &str) -> &'a [f64] {
    match node.shape.as_slice() {
        [len] => {
            assert_eq!(*len, n, "gru-step: {what} has shape {:?}, want [{n}]", node.shape);
            assert_eq!(row, 0, "gru-step: {what} is a vector but row {row} requested");
            &node.data
        }
        [rows, cols] => {
            assert_eq!(*cols, n, "gru-step: {what} has shape {:?}, want (_, {n})", node.shape);
            assert!(row < *rows, "gru-step: row {row} out of range for {what} {:?}", node.shape);
            &node.data[row * n..(row + 1) * n]
        }
        _ => panic!("gru-step: {what} has shape {:?}", node.shape),
    }
}

/// out += v (1, n) times mat (n, n), accumulating into `out`.
fn vec_mat_add(v: &[f64], mat: &[f64], n: usize, out: &mut Vec<f64>) {
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let mrow = &mat[j * n..(j + 1) * n];
        for (o, m) in out.iter_mut().zip(mrow.iter()) {
            *o += vj * m;
        }
    }
}

/// Decompose a shape around `axis` into (outer, axis size, inner) extents.
fn slice_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_at;
    use rand::Rng;

    fn assert_close(got: &[f64], want: &[f64], tol: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() <= tol, "{:?} vs {:?}", got, want);
        }
    }

    /// Naive triple-loop matmul oracle, independent of the tape kernel.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = rng_at(11, &[0]);
        let (m, k, n) = (2, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let ta = tape.leaf(a.clone(), vec![m, k], false);
        let tb = tape.leaf(b.clone(), vec![k, n], false);
        let tc = tape.matmul(ta, tb);
        assert_eq!(tape.shape(tc), &[m, n]);
        assert_close(tape.value(tc), &matmul_oracle(&a, &b, m, k, n), 1e-12);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0, 0.0], vec![3], false);
        let s = tape.softmax(x, 0);
        assert_close(tape.value(s), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn masked_fill_softmax_gives_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.3, 0.1, -0.5], vec![3], false);
        let m = tape.masked_fill(x, &[1]);
        let s = tape.softmax(m, 0);
        let p = tape.value(s);
        assert_eq!(p[1], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "all 2 entries along axis 0 are masked")]
    fn softmax_all_masked_panics() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0], vec![2], false);
        let m = tape.masked_fill(x, &[0, 1]);
        tape.softmax(m, 0);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(vec![0.0; 6], vec![2, 3], false);
        let b = tape.leaf(vec![0.0; 8], vec![4, 2], false);
        tape.matmul(a, b);
    }

    #[test]
    fn tanh_grad_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0], vec![1], true);
        let y = tape.tanh(x);
        tape.backward(y);
        assert_close(tape.grad(x).unwrap(), &[1.0], 1e-15);
    }

    #[test]
    fn product_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true);
        let y = tape.leaf(vec![3.0], vec![1], true);
        let p = tape.mul(x, y);
        tape.backward(p);
        assert_close(tape.grad(x).unwrap(), &[3.0], 1e-15);
        assert_close(tape.grad(y).unwrap(), &[2.0], 1e-15);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_non_scalar_panics() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true);
        tape.backward(x);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.5], vec![1], true);
        let y = tape.affine(x, 2.0, 0.0);
        tape.backward(y);
        tape.backward(y);
        assert_close(tape.grad(x).unwrap(), &[4.0], 1e-15);
    }

    #[test]
    fn backward_of_sum_of_losses_is_linear() {
        let build = |tape: &mut Tape| -> (TensorId, TensorId, TensorId) {
            let x = tape.leaf(vec![0.4, -0.2, 0.9], vec![3], true);
            let t = tape.tanh(x);
            let l1 = tape.sum(t);
            let s = tape.sigmoid(x);
            let l2 = tape.mean(s);
            (x, l1, l2)
        };
        let mut t1 = Tape::new();
        let (x1, a1, b1) = build(&mut t1);
        let sum = t1.add(a1, b1);
        t1.backward(sum);
        let joint = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let (x2, a2, b2) = build(&mut t2);
        t2.backward(a2);
        t2.backward(b2);
        let separate = t2.grad(x2).unwrap().to_vec();
        assert_close(&joint, &separate, 1e-15);
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut rng = rng_at(3, &[9]);
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 0.5], vec![3], true);
        let y = tape.dropout(x, 1.0, &mut rng);
        assert_close(tape.value(y), &[1.0, -2.0, 0.5], 0.0);
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut rng = rng_at(5, &[1]);
        let mut tape = Tape::new();
        let n = 4000;
        let x = tape.leaf(vec![1.0; n], vec![n], false);
        let y = tape.dropout(x, 0.8, &mut rng);
        let vals = tape.value(y);
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        assert!((kept - 0.8).abs() < 0.03);
    }

    #[test]
    fn embed_scatters_gradients() {
        let mut tape = Tape::new();
        let table = tape.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true);
        let e = tape.embed(table, &[0, 2, 0]);
        let s = tape.sum(e);
        tape.backward(s);
        assert_close(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0], 1e-15);
    }

    #[test]
    fn max_axis_pools_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 5.0, 3.0, 4.0, 2.0, 0.0], vec![3, 2], true);
        let m = tape.max_axis(x, 0);
        assert_close(tape.value(m), &[3.0, 5.0], 0.0);
        let s = tape.sum(m);
        tape.backward(s);
        assert_close(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn gradcheck_random_compositions_under_1e6() {
        // Mixed three-layer compositions over 50 seeds stay below 1e-6.
        for seed in 0..50u64 {
            let mut rng = rng_at(seed, &[42]);
            let w1: Vec<f64> = (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let w2: Vec<f64> = (0..20).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let params: Vec<(Vec<f64>, Vec<usize>)> =
                vec![(w1, vec![3, 4]), (w2, vec![4, 5]), (b, vec![5])];
            let err = grad_check(
                |tape, ids| {
                    let x = tape.leaf(vec![0.3, -0.7, 0.5], vec![3], false);
                    let h = tape.matmul(x, ids[0]);
                    let h = tape.tanh(h);
                    let o = tape.matmul(h, ids[1]);
                    let o = tape.add(o, ids[2]);
                    let p = tape.softmax(o, 0);
                    let picked = tape.element(p, 2);
                    let nll = tape.log(picked);
                    let s = tape.sigmoid(o);
                    let reg = tape.mean(s);
                    let both = tape.add(nll, reg);
                    tape.neg(both)
                },
                &params,
                1e-4,
            );
            assert!(err < 1e-6, "seed {seed}: grad check error {err}");
        }
    }

    #[test]
    fn gradcheck_min_and_mask_path() {
        let params = vec![
            (vec![0.2, 0.9, -0.4], vec![3usize]),
            (vec![0.5, -0.1, 0.3], vec![3usize]),
        ];
        let err = grad_check(
            |tape, ids| {
                let m = tape.min_elem(ids[0], ids[1]);
                let f = tape.masked_fill(m, &[2]);
                let p = tape.softmax(f, 0);
                let e = tape.element(p, 0);
                tape.log(e)
            },
            &params,
            1e-5,
        );
        assert!(err < 1e-6, "grad check error {err}");
    }
}
