//! Parameterized layers: GRU cell, bidirectional RNN, character CNN,
//! linear projection, bi-directional attention and residual self-attention.
//!
//! Layers hold [`ParamId`]s into a shared [`ParamSet`] plus their dimensions;
//! forward methods build nodes on a caller-supplied tape. Nothing here
//! mutates its inputs, so concurrent forward passes on distinct tapes are
//! safe.

use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

/// Fully connected projection, row-vector convention (y = x W + b).
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl LinearParams {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_xavier(&format!("{prefix}.w"), input, output, rng);
        let b = ps.add_zeros(&format!("{prefix}.b"), vec![output]);
        LinearParams { w, b, input, output }
    }

    pub fn apply_vec(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId) -> TensorId {
        let h = tape.matmul(x, bp.id(self.w));
        tape.add(h, bp.id(self.b))
    }

    pub fn apply_mat(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId) -> TensorId {
        let h = tape.matmul(x, bp.id(self.w));
        tape.add_row(h, bp.id(self.b))
    }
}

/// Gated recurrent unit with update gate applied to the previous state:
/// h' = z (.) h + (1 - z) (.) h~.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_c: ParamId,
    pub u_c: ParamId,
    pub b_c: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut mk = |gate: &str, rows: usize| ps.add_xavier(&format!("{prefix}.{gate}"), rows, hidden, rng);
        let w_z = mk("w_z", input);
        let u_z = mk("u_z", hidden);
        let w_r = mk("w_r", input);
        let u_r = mk("u_r", hidden);
        let w_c = mk("w_c", input);
        let u_c = mk("u_c", hidden);
        let b_z = ps.add_zeros(&format!("{prefix}.b_z"), vec![hidden]);
        let b_r = ps.add_zeros(&format!("{prefix}.b_r"), vec![hidden]);
        let b_c = ps.add_zeros(&format!("{prefix}.b_c"), vec![hidden]);
        GruParams { w_z, u_z, b_z, w_r, u_r, b_r, w_c, u_c, b_c, input, hidden }
    }

    /// One recurrence step on vectors: h (hidden), x (input) -> h' (hidden).
    pub fn step(&self, tape: &mut Tape, bp: &BoundParams, h: TensorId, x: TensorId) -> TensorId {
        let xz = tape.matmul(x, bp.id(self.w_z));
        let xz = tape.add(xz, bp.id(self.b_z));
        let xr = tape.matmul(x, bp.id(self.w_r));
        let xr = tape.add(xr, bp.id(self.b_r));
        let xc = tape.matmul(x, bp.id(self.w_c));
        let xc = tape.add(xc, bp.id(self.b_c));
        tape.gru_step(h, xz, xr, xc, 0, bp.id(self.u_z), bp.id(self.u_r), bp.id(self.u_c))
    }

    /// States after each position of a (l, input) sequence, zero initial
    /// state unless `h0` is given. Input projections are batched over all
    /// positions; each step is one fused node.
    pub fn sequence(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        xs: TensorId,
        h0: Option<TensorId>,
        reverse: bool,
    ) -> Vec<TensorId> {
        let l = tape.shape(xs)[0];
        let pz = tape.matmul(xs, bp.id(self.w_z));
        let pz = tape.add_row(pz, bp.id(self.b_z));
        let pr = tape.matmul(xs, bp.id(self.w_r));
        let pr = tape.add_row(pr, bp.id(self.b_r));
        let pc = tape.matmul(xs, bp.id(self.w_c));
        let pc = tape.add_row(pc, bp.id(self.b_c));
        let mut h = h0.unwrap_or_else(|| tape.leaf(vec![0.0; self.hidden], vec![self.hidden], false));
        let mut states = vec![0usize; l];
        let order: Vec<usize> =
            if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for j in order {
            h = tape.gru_step(h, pz, pr, pc, j, bp.id(self.u_z), bp.id(self.u_r), bp.id(self.u_c));
            states[j] = h;
        }
        states
    }
}

/// Outputs of a bidirectional RNN pass.
pub struct BiRnnOut {
    /// (l, hidden) forward states.
    pub fwd: TensorId,
    /// (l, hidden) backward states, in original position order.
    pub bwd: TensorId,
    /// (l, 2*hidden) concatenation `[fwd; bwd]` per position.
    pub cat: TensorId,
}

#[derive(Debug, Clone)]
pub struct BiRnnParams {
    pub fwd: GruParams,
    pub bwd: GruParams,
    pub input: usize,
    pub hidden: usize,
}

impl BiRnnParams {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fwd = GruParams::new(ps, &format!("{prefix}.fwd"), input, hidden, rng);
        let bwd = GruParams::new(ps, &format!("{prefix}.bwd"), input, hidden, rng);
        BiRnnParams { fwd, bwd, input, hidden }
    }

    /// Run over a (l, input) sequence. Forward state at position j depends
    /// only on inputs <= j, backward only on inputs >= j.
    pub fn run(&self, tape: &mut Tape, bp: &BoundParams, xs: TensorId) -> BiRnnOut {
        let f = self.fwd.sequence(tape, bp, xs, None, false);
        let b = self.bwd.sequence(tape, bp, xs, None, true);
        let fwd = tape.stack_rows(&f);
        let bwd = tape.stack_rows(&b);
        let cat = tape.concat(&[fwd, bwd], 1);
        BiRnnOut { fwd, bwd, cat }
    }
}

/// Character-level CNN: embed characters, convolve width-`width` windows,
/// tanh, then max-pool over positions into a fixed-size word vector.
///
/// The character sequence is padded on the right with `width - 1` pad ids,
/// so every word of length n yields exactly n windows and any word of
/// length >= 1 produces a `channels`-sized vector.
#[derive(Debug, Clone)]
pub struct CharCnnParams {
    pub emb: ParamId,
    pub filters: ParamId,
    pub bias: ParamId,
    pub n_chars: usize,
    pub char_dim: usize,
    pub channels: usize,
    pub width: usize,
    pub pad_id: usize,
}

impl CharCnnParams {
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        prefix: &str,
        n_chars: usize,
        char_dim: usize,
        channels: usize,
        width: usize,
        pad_id: usize,
        rng: &mut R,
    ) -> Self {
        assert!(pad_id < n_chars);
        let emb = ps.add_xavier_embedding(&format!("{prefix}.emb"), n_chars, char_dim, rng);
        let filters = ps.add_xavier(&format!("{prefix}.filters"), width * char_dim, channels, rng);
        let bias = ps.add_zeros(&format!("{prefix}.bias"), vec![channels]);
        CharCnnParams { emb, filters, bias, n_chars, char_dim, channels, width, pad_id }
    }

    /// Word vector for a non-empty character id sequence.
    pub fn word_vector(&self, tape: &mut Tape, bp: &BoundParams, chars: &[usize]) -> TensorId {
        assert!(!chars.is_empty(), "char-cnn: empty word");
        let n = chars.len();
        let mut padded = chars.to_vec();
        padded.extend(std::iter::repeat(self.pad_id).take(self.width - 1));
        let emb = tape.embed(bp.id(self.emb), &padded);
        let shifts: Vec<TensorId> = (0..self.width)
            .map(|k| {
                let idx: Vec<usize> = (k..k + n).collect();
                tape.gather_rows(emb, &idx)
            })
            .collect();
        let windows = tape.concat(&shifts, 1);
        let conv = tape.matmul(windows, bp.id(self.filters));
        let conv = tape.add_row(conv, bp.id(self.bias));
        let act = tape.tanh(conv);
        tape.max_axis(act, 0)
    }
}

pub struct BiAttentionOut {
    /// (l, 4*dim) fused context: [c; q~; c (.) q~; c (.) c~].
    pub fused: TensorId,
    /// (l, m) context-to-query attention rows.
    pub c2q: TensorId,
}

/// Bi-directional attention between a context and a query sequence with a
/// trilinear similarity s(c, q) = w_c.c + w_q.q + w_x.(c (.) q).
#[derive(Debug, Clone)]
pub struct BiAttentionParams {
    pub w_ctx: ParamId,
    pub w_qry: ParamId,
    pub w_cross: ParamId,
    pub dim: usize,
}

impl BiAttentionParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let w_ctx = ps.add_xavier_vec(&format!("{prefix}.w_ctx"), dim, rng);
        let w_qry = ps.add_xavier_vec(&format!("{prefix}.w_qry"), dim, rng);
        let w_cross = ps.add_xavier_vec(&format!("{prefix}.w_cross"), dim, rng);
        BiAttentionParams { w_ctx, w_qry, w_cross, dim }
    }

    pub fn run(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        ctx: TensorId,
        query: TensorId,
    ) -> BiAttentionOut {
        let a = tape.matmul(ctx, bp.id(self.w_ctx)); // (l)
        let b = tape.matmul(query, bp.id(self.w_qry)); // (m)
        let cw = tape.mul_row(ctx, bp.id(self.w_cross));
        let qt_mat = tape.transpose(query);
        let cross = tape.matmul(cw, qt_mat); // (l, m)
        let s = tape.add_row(cross, b);
        let s = tape.add_col(s, a);
        let c2q = tape.softmax(s, 1);
        let attended_q = tape.matmul(c2q, query); // (l, dim)
        let row_max = tape.max_axis(s, 1); // (l)
        let beta = tape.softmax(row_max, 0);
        let attended_c = tape.matmul(beta, ctx); // (dim)
        let l = tape.shape(ctx)[0];
        let tiled = tape.stack_rows(&vec![attended_c; l]);
        let c_mul_q = tape.mul(ctx, attended_q);
        let c_mul_c = tape.mul(ctx, tiled);
        let fused = tape.concat(&[ctx, attended_q, c_mul_q, c_mul_c], 1);
        BiAttentionOut { fused, c2q }
    }
}

pub struct SelfAttentionOut {
    /// (l, dim): input plus the attention-weighted mixture of all positions.
    pub out: TensorId,
    /// (l, l) attention rows.
    pub attn: TensorId,
}

/// Dot-product self-attention with projected keys/queries and a residual
/// connection; output length equals input length.
#[derive(Debug, Clone)]
pub struct SelfAttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub dim: usize,
}

impl SelfAttentionParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, prefix: &str, dim: usize, rng: &mut R) -> Self {
        let w_q = ps.add_xavier(&format!("{prefix}.w_q"), dim, dim, rng);
        let w_k = ps.add_xavier(&format!("{prefix}.w_k"), dim, dim, rng);
        SelfAttentionParams { w_q, w_k, dim }
    }

    pub fn run(&self, tape: &mut Tape, bp: &BoundParams, xs: TensorId) -> SelfAttentionOut {
        let q = tape.matmul(xs, bp.id(self.w_q));
        let k = tape.matmul(xs, bp.id(self.w_k));
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax(scores, 1);
        let mix = tape.matmul(attn, xs);
        let out = tape.add(xs, mix);
        SelfAttentionOut { out, attn }
    }
}
