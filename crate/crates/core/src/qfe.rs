//! Sequential evidence extraction.
//!
//! The extractor keeps an RNN state over the sentences it has picked so far.
//! At each step it takes a glimpse at the query (attention conditioned on the
//! state), scores every not-yet-extracted sentence plus a trainable
//! end-of-extraction (EOE) candidate, and extracts one. Training teacher-
//! forces the gold sentence with the highest predicted probability and
//! penalizes re-attending query positions through a coverage term. Inference
//! is beam search over extraction sequences, scored by average per-step
//! negative log-likelihood; extracting EOE terminates a hypothesis.
//!
//! The sigmoid-per-sentence baseline extractor lives here too.

use crate::error::{QfeError, Result};
use crate::layers::{GruParams, LinearParams};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct QfeParams {
    /// Extraction RNN over candidate vectors; input and hidden are both 2*d_c.
    pub rnn: GruParams,
    pub w_p1: ParamId,
    pub w_p2: ParamId,
    pub w_p3: ParamId,
    pub v_p: ParamId,
    pub w_g1: ParamId,
    pub w_g2: ParamId,
    pub v_g: ParamId,
    /// Initial state projection applied to the max-pooled sentence vectors.
    pub init_fc: LinearParams,
    /// Trainable EOE candidate vector, sample-independent.
    pub x_eoe: ParamId,
    /// 2*d_c.
    pub dim: usize,
}

impl QfeParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, dim: usize, rng: &mut R) -> Self {
        let rnn = GruParams::new(ps, "qfe.rnn", dim, dim, rng);
        let w_p1 = ps.add_xavier("qfe.w_p1", dim, dim, rng);
        let w_p2 = ps.add_xavier("qfe.w_p2", dim, dim, rng);
        let w_p3 = ps.add_xavier("qfe.w_p3", dim, dim, rng);
        let v_p = ps.add_xavier_vec("qfe.v_p", dim, rng);
        let w_g1 = ps.add_xavier("qfe.w_g1", dim, dim, rng);
        let w_g2 = ps.add_xavier("qfe.w_g2", dim, dim, rng);
        let v_g = ps.add_xavier_vec("qfe.v_g", dim, rng);
        let init_fc = LinearParams::new(ps, "qfe.init_fc", dim, dim, rng);
        let x_eoe = ps.add_xavier_vec("qfe.x_eoe", dim, rng);
        QfeParams { rnn, w_p1, w_p2, w_p3, v_p, w_g1, w_g2, v_g, init_fc, x_eoe, dim }
    }

    /// Per-sample projections that do not depend on the extraction state:
    /// the candidate matrix (sentence vectors plus the EOE row), its W_p1
    /// projection, and the query's W_g1 projection.
    pub fn context(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: TensorId,
        y: TensorId,
    ) -> QfeContext {
        let l_s = tape.shape(x)[0];
        let m_w = tape.shape(y)[0];
        let eoe = tape.stack_rows(&[bp.id(self.x_eoe)]);
        let candidates = tape.concat(&[x, eoe], 0);
        let cand_proj = tape.matmul(candidates, bp.id(self.w_p1));
        let query_proj = tape.matmul(y, bp.id(self.w_g1));
        QfeContext { candidates, cand_proj, query: y, query_proj, l_s, m_w }
    }

    /// z^0 = FC(max-pool over sentence vectors). The EOE row is excluded
    /// from the pool.
    pub fn init_state(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId) -> TensorId {
        let pooled = tape.max_axis(x, 0);
        self.init_fc.apply_vec(tape, bp, pooled)
    }

    /// Glimpse attention over the query given state z:
    /// a_j = v_g . tanh(W_g1 y_j + W_g2 z), alpha = softmax(a),
    /// g = sum_j alpha_j W_g1 y_j.
    pub fn glimpse(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        z: TensorId,
    ) -> Glimpse {
        let zg = tape.matmul(z, bp.id(self.w_g2));
        let pre = tape.add_row(qc.query_proj, zg);
        let act = tape.tanh(pre);
        let scores = tape.matmul(act, bp.id(self.v_g));
        let alpha = tape.softmax(scores, 0);
        let g = tape.matmul(alpha, qc.query_proj);
        Glimpse { g, alpha }
    }

    /// Extraction distribution over candidates (sentences then EOE):
    /// u_i = v_p . tanh(W_p1 x_i + W_p2 g + W_p3 z), already-extracted ids
    /// masked to probability exactly 0. `suppress_eoe` removes the EOE
    /// candidate as well (the at-least-one-sentence rule at t = 1).
    pub fn score_candidates(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        g: TensorId,
        z: TensorId,
        extracted: &[usize],
        suppress_eoe: bool,
    ) -> TensorId {
        let gp = tape.matmul(g, bp.id(self.w_p2));
        let zp = tape.matmul(z, bp.id(self.w_p3));
        let bias = tape.add(gp, zp);
        let pre = tape.add_row(qc.cand_proj, bias);
        let act = tape.tanh(pre);
        let u = tape.matmul(act, bp.id(self.v_p));
        let mut masked: Vec<usize> = extracted.to_vec();
        if suppress_eoe {
            masked.push(qc.l_s);
        }
        let u = if masked.is_empty() { u } else { tape.masked_fill(u, &masked) };
        tape.softmax(u, 0)
    }

    /// Fresh state before the first extraction.
    pub fn start(&self, tape: &mut Tape, bp: &BoundParams, qc: &QfeContext) -> ExtractorState {
        // Pool over the sentence rows only; the candidate matrix's last row
        // is EOE, so re-slice the sentences out of it.
        let sent_rows: Vec<usize> = (0..qc.l_s).collect();
        let x_only = tape.gather_rows(qc.candidates, &sent_rows);
        let z = self.init_state(tape, bp, x_only);
        let coverage = tape.leaf(vec![0.0; qc.m_w], vec![qc.m_w], false);
        ExtractorState {
            step: 0,
            z,
            coverage,
            extracted: Vec::new(),
            alphas: Vec::new(),
            chosen_probs: Vec::new(),
            nll: 0.0,
            terminated: false,
        }
    }

    /// The current step's glimpse and extraction distribution.
    pub fn distribution(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        st: &ExtractorState,
        suppress_eoe: bool,
    ) -> StepDistribution {
        let glimpse = self.glimpse(tape, bp, qc, st.z);
        let probs =
            self.score_candidates(tape, bp, qc, glimpse.g, st.z, &st.extracted, suppress_eoe);
        StepDistribution { probs, alpha: glimpse.alpha, glimpse: glimpse.g }
    }

    /// Extract candidate `choice` (sentence id, or `qc.l_s` for EOE) and
    /// return the successor state. Extracting EOE terminates and freezes the
    /// state; anything else feeds the candidate vector into the RNN and adds
    /// this step's glimpse to the coverage vector.
    pub fn advance(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        st: &ExtractorState,
        dist: &StepDistribution,
        choice: usize,
    ) -> Result<ExtractorState> {
        if st.terminated {
            return Err(QfeError::Data("advance: state already terminated".into()));
        }
        if choice > qc.l_s {
            return Err(QfeError::Data(format!(
                "advance: candidate {choice} out of range ({} sentences + EOE)",
                qc.l_s
            )));
        }
        if st.extracted.contains(&choice) {
            return Err(QfeError::Data(format!("advance: sentence {choice} extracted twice")));
        }
        let p = tape.value(dist.probs)[choice];
        let mut next = st.clone();
        next.step += 1;
        next.nll += -p.ln();
        next.chosen_probs.push(p);
        next.alphas.push(dist.alpha);
        if choice == qc.l_s {
            next.terminated = true;
            return Ok(next);
        }
        next.extracted.push(choice);
        next.coverage = tape.add(st.coverage, dist.alpha);
        let x_e = tape.row(qc.candidates, choice);
        next.z = self.rnn.step(tape, bp, st.z, x_e);
        Ok(next)
    }

    /// Teacher-forced evidence loss over a gold set: at each step extract the
    /// remaining gold sentence with the highest predicted probability, add
    /// its negative log-likelihood plus the coverage penalty
    /// sum_j min(c_j, alpha_j), and after all gold add the EOE step the same
    /// way. Returns the loss node and a value-level trace.
    pub fn evidence_loss(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        gold: &[usize],
    ) -> Result<(TensorId, ForcedTrace)> {
        if gold.is_empty() {
            return Err(QfeError::Data("evidence_loss: empty gold evidence".into()));
        }
        self.forced_loss(tape, bp, qc, gold)
    }

    /// Training term for samples with no gold evidence (e.g. not-enough-info
    /// claims): a single step that must extract EOE immediately.
    pub fn termination_loss(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
    ) -> Result<TensorId> {
        self.forced_loss(tape, bp, qc, &[]).map(|(loss, _)| loss)
    }

    fn forced_loss(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        gold: &[usize],
    ) -> Result<(TensorId, ForcedTrace)> {
        for &g in gold {
            if g >= qc.l_s {
                return Err(QfeError::Data(format!(
                    "evidence_loss: gold id {g} out of range for {} sentences",
                    qc.l_s
                )));
            }
        }
        let mut remaining: Vec<usize> = gold.to_vec();
        remaining.sort_unstable();
        remaining.dedup();
        let mut st = self.start(tape, bp, qc);
        let mut loss: Option<TensorId> = None;
        let mut trace = ForcedTrace::default();
        for _ in 0..=remaining.len() {
            let all_extracted = remaining.is_empty();
            let dist = self.distribution(tape, bp, qc, &st, false);
            // Coverage penalty for this step, before alpha joins the coverage.
            let overlap = tape.min_elem(st.coverage, dist.alpha);
            let penalty = tape.sum(overlap);
            let choice = if all_extracted {
                qc.l_s
            } else {
                let probs = tape.value(dist.probs);
                let mut best = remaining[0];
                for &g in &remaining {
                    if probs[g] > probs[best] {
                        best = g;
                    }
                }
                best
            };
            let picked = tape.element(dist.probs, choice);
            let lp = tape.log(picked);
            let nll = tape.neg(lp);
            let step_loss = tape.add(nll, penalty);
            loss = Some(match loss {
                Some(acc) => tape.add(acc, step_loss),
                None => step_loss,
            });
            trace.order.push(choice);
            trace.step_nlls.push(tape.value(nll)[0]);
            trace.step_penalties.push(tape.value(penalty)[0]);
            st = self.advance(tape, bp, qc, &st, &dist, choice)?;
            remaining.retain(|&g| g != choice);
        }
        Ok((loss.expect("at least one step"), trace))
    }

    /// Beam-search decoding. Hypotheses terminate by extracting EOE (or are
    /// force-terminated after `max_steps` extractions) and are ranked by
    /// average per-step negative log-likelihood, the EOE step included.
    /// `min_sentences = 1` removes EOE from the candidates at the first step.
    pub fn decode_beam(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        qc: &QfeContext,
        beam_size: usize,
        max_steps: usize,
        min_sentences: usize,
    ) -> Result<Decoded> {
        if beam_size == 0 {
            return Err(QfeError::Config("decode_beam: beam size must be >= 1".into()));
        }
        if max_steps == 0 {
            return Err(QfeError::Config("decode_beam: max_steps must be >= 1".into()));
        }
        let mut active = vec![self.start(tape, bp, qc)];
        let mut finished: Vec<BeamHypothesis> = Vec::new();
        for round in 0..max_steps {
            let mut children: Vec<(ExtractorState, StepDistribution, usize, f64)> = Vec::new();
            for st in &active {
                let suppress = min_sentences >= 1 && round == 0;
                let dist = self.distribution(tape, bp, qc, st, suppress);
                let probs = tape.value(dist.probs).to_vec();
                for (cand, &p) in probs.iter().enumerate() {
                    if st.extracted.contains(&cand) || (suppress && cand == qc.l_s) {
                        continue;
                    }
                    let nll = st.nll - p.ln();
                    let avg = nll / (st.step + 1) as f64;
                    children.push((st.clone(), dist.clone(), cand, avg));
                }
            }
            if children.is_empty() {
                break;
            }
            children.sort_by(|a, b| {
                a.3.partial_cmp(&b.3)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.2.cmp(&b.2))
                    .then_with(|| a.0.extracted.cmp(&b.0.extracted))
            });
            let mut next_active = Vec::new();
            for (st, dist, cand, avg) in children {
                let is_eoe = cand == qc.l_s;
                if !is_eoe && next_active.len() >= beam_size {
                    continue;
                }
                let child = self.advance(tape, bp, qc, &st, &dist, cand)?;
                if is_eoe {
                    finished.push(BeamHypothesis { score: avg, state: child });
                } else {
                    next_active.push(child);
                }
            }
            active = next_active;
            if active.is_empty() {
                break;
            }
        }
        // Forced termination for hypotheses that ran out of steps.
        for st in active {
            if st.step > 0 {
                let score = st.nll / st.step as f64;
                finished.push(BeamHypothesis { score, state: st });
            }
        }
        let best = finished
            .into_iter()
            .min_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| a.state.extracted.cmp(&b.state.extracted))
            })
            .ok_or_else(|| QfeError::Data("decode_beam: no terminated hypothesis".into()))?;
        Ok(Decoded {
            evidence: best.state.extracted.clone(),
            chosen_probs: best.state.chosen_probs.clone(),
            ended_with_eoe: best.state.terminated,
            score: best.score,
        })
    }
}

pub struct QfeContext {
    /// (l_s + 1, 2*d_c): sentence vectors then the EOE row.
    pub candidates: TensorId,
    pub cand_proj: TensorId,
    pub query: TensorId,
    pub query_proj: TensorId,
    pub l_s: usize,
    pub m_w: usize,
}

impl QfeContext {
    pub fn eoe_index(&self) -> usize {
        self.l_s
    }
}

pub struct Glimpse {
    pub g: TensorId,
    pub alpha: TensorId,
}

#[derive(Clone)]
pub struct StepDistribution {
    /// (l_s + 1) extraction probabilities, extracted ids exactly 0.
    pub probs: TensorId,
    /// (m_w) glimpse attention over query positions.
    pub alpha: TensorId,
    pub glimpse: TensorId,
}

/// Extraction state after `step` extractions.
#[derive(Clone)]
pub struct ExtractorState {
    pub step: usize,
    pub z: TensorId,
    /// Coverage c^t = sum of glimpse attentions of previous steps.
    pub coverage: TensorId,
    /// Extracted sentence ids in extraction order (EOE never appears).
    pub extracted: Vec<usize>,
    pub alphas: Vec<TensorId>,
    pub chosen_probs: Vec<f64>,
    /// Accumulated negative log-likelihood of the chosen candidates.
    pub nll: f64,
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis {
    /// Average per-step negative log-likelihood.
    pub score: f64,
    pub state: ExtractorState,
}

impl std::fmt::Debug for ExtractorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtractorState")
            .field("step", &self.step)
            .field("extracted", &self.extracted)
            .field("nll", &self.nll)
            .field("terminated", &self.terminated)
            .finish()
    }
}

/// Value-level record of a teacher-forced pass.
#[derive(Debug, Clone, Default)]
pub struct ForcedTrace {
    /// Forced extraction order; last entry is the EOE index.
    pub order: Vec<usize>,
    pub step_nlls: Vec<f64>,
    pub step_penalties: Vec<f64>,
}

/// Beam search output.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub evidence: Vec<usize>,
    /// Probability of each chosen candidate at its step (EOE included when
    /// `ended_with_eoe`).
    pub chosen_probs: Vec<f64>,
    pub ended_with_eoe: bool,
    pub score: f64,
}

/// Independent per-sentence extractor: Pr(i) = sigmoid(w . x_i + b),
/// selected by threshold, trained with per-sentence binary cross-entropy.
#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl BaselineParams {
    pub fn new<R: Rng>(ps: &mut ParamSet, dim: usize, rng: &mut R) -> Self {
        let w = ps.add_xavier_vec("baseline.w", dim, rng);
        let b = ps.add_zeros("baseline.b", vec![1]);
        BaselineParams { w, b, dim }
    }

    /// Per-sentence probabilities, shape (l_s).
    pub fn probs(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId) -> TensorId {
        let u = self.logits(tape, bp, x);
        tape.sigmoid(u)
    }

    fn logits(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId) -> TensorId {
        let u = tape.matmul(x, bp.id(self.w));
        let l = tape.shape(u)[0];
        let b_full = tape.repeat_scalar(bp.id(self.b), l);
        tape.add(u, b_full)
    }

    /// Sentences with probability strictly above `threshold`.
    pub fn extract(&self, tape: &mut Tape, bp: &BoundParams, x: TensorId, threshold: f64) -> Vec<usize> {
        let p = self.probs(tape, bp, x);
        tape.value(p)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > threshold)
            .map(|(i, _)| i)
            .collect()
    }

    /// Sum of per-sentence binary cross-entropies against the gold set.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        x: TensorId,
        gold: &[usize],
    ) -> Result<TensorId> {
        let l_s = tape.shape(x)[0];
        for &g in gold {
            if g >= l_s {
                return Err(QfeError::Data(format!(
                    "baseline loss: gold id {g} out of range for {l_s} sentences"
                )));
            }
        }
        let u = self.logits(tape, bp, x);
        let un = tape.neg(u);
        let sp = tape.sigmoid(u);
        let sn = tape.sigmoid(un);
        let lp = tape.log(sp);
        let ln_ = tape.log(sn);
        let mut y = vec![0.0; l_s];
        for &g in gold {
            y[g] = 1.0;
        }
        let yneg: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let yt = tape.leaf(y, vec![l_s], false);
        let ynt = tape.leaf(yneg, vec![l_s], false);
        let pos = tape.mul(yt, lp);
        let neg = tape.mul(ynt, ln_);
        let s = tape.add(pos, neg);
        let total = tape.sum(s);
        Ok(tape.neg(total))
    }
}
