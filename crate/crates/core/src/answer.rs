//! Answer layer: stacked Bi-RNNs over the fused context, per-task heads,
//! the answer loss, and span decoding.
//!
//! Reading comprehension uses three stacked Bi-RNNs whose stages feed each
//! other; stage outputs map to the span-start distribution, the span-end
//! distribution, and (max-pooled) the 3-way answer-type distribution.
//! Entailment uses a single Bi-RNN and only the type distribution.

use crate::error::{QfeError, Result};
use crate::layers::BiRnnParams;
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Class index of `Span` in RC mode (classes: Yes, No, Span) and of
/// `NotEnoughInfo` in RTE mode (classes: Supports, Refutes, NEI).
pub const RC_SPAN_CLASS: usize = 2;
pub const RTE_NEI_CLASS: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Longest decodable span, exclusive: end - start < MAX_SPAN_LEN.
pub const MAX_SPAN_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    Rc,
    Rte,
}

pub struct AnswerPrediction {
    /// 3-class distribution.
    pub type_dist: TensorId,
    /// Span start distribution over context tokens (RC only).
    pub start_dist: Option<TensorId>,
    /// Span end distribution over context tokens (RC only).
    pub end_dist: Option<TensorId>,
}

/// Gold answer: class index plus inclusive token span when the class is Span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerTarget {
    pub class: usize,
    pub span: Option<(usize, usize)>,
}

impl AnswerTarget {
    pub fn validate(&self, mode: TaskMode) -> Result<()> {
        if self.class >= NUM_CLASSES {
            return Err(QfeError::Data(format!("answer class {} out of range", self.class)));
        }
        match (mode, &self.span) {
            (TaskMode::Rc, Some((s, e))) if self.class == RC_SPAN_CLASS => {
                if s > e {
                    return Err(QfeError::Data(format!("span ({s}, {e}) has start > end")));
                }
                Ok(())
            }
            (TaskMode::Rc, Some(_)) => Err(QfeError::Data(
                "span target given for a non-span answer class".into(),
            )),
            (TaskMode::Rc, None) if self.class == RC_SPAN_CLASS => {
                Err(QfeError::Data("span answer class without a span target".into()))
            }
            (TaskMode::Rte, Some(_)) => {
                Err(QfeError::Data("span target is meaningless in RTE mode".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnswerHeadParams {
    pub mode: TaskMode,
    rnns: Vec<BiRnnParams>,
    // Position-score projections carry no bias: a constant shift before the
    // positional softmax is a null direction and could never train.
    start_w: Option<ParamId>,
    end_w: Option<ParamId>,
    type_w: ParamId,
    type_b: ParamId,
    pub d_c: usize,
}

impl AnswerHeadParams {
    /// Input is the (l_w, 3*d_c) fused context.
    pub fn new<R: Rng>(ps: &mut ParamSet, mode: TaskMode, d_c: usize, rng: &mut R) -> Self {
        let input = 3 * d_c;
        let stage_out = 2 * d_c;
        let (rnns, start_w, end_w) = match mode {
            TaskMode::Rc => {
                let r1 = BiRnnParams::new(ps, "answer.rnn1", input, d_c, rng);
                let r2 = BiRnnParams::new(ps, "answer.rnn2", stage_out, d_c, rng);
                let r3 = BiRnnParams::new(ps, "answer.rnn3", stage_out, d_c, rng);
                let sw = ps.add_xavier_vec("answer.start.w", stage_out, rng);
                let ew = ps.add_xavier_vec("answer.end.w", stage_out, rng);
                (vec![r1, r2, r3], Some(sw), Some(ew))
            }
            TaskMode::Rte => {
                let r1 = BiRnnParams::new(ps, "answer.rnn1", input, d_c, rng);
                (vec![r1], None, None)
            }
        };
        let type_w = ps.add_xavier("answer.type.w", stage_out, NUM_CLASSES, rng);
        let type_b = ps.add_zeros("answer.type.b", vec![NUM_CLASSES]);
        AnswerHeadParams { mode, rnns, start_w, end_w, type_w, type_b, d_c }
    }

    fn position_scores(
        tape: &mut Tape,
        bp: &BoundParams,
        states: TensorId,
        w: ParamId,
    ) -> TensorId {
        let u = tape.matmul(states, bp.id(w));
        tape.softmax(u, 0)
    }

    fn type_scores(&self, tape: &mut Tape, bp: &BoundParams, states: TensorId) -> TensorId {
        let pooled = tape.max_axis(states, 0);
        let u = tape.matmul(pooled, bp.id(self.type_w));
        let u = tape.add(u, bp.id(self.type_b));
        tape.softmax(u, 0)
    }

    /// RC head: start, end and type distributions from C5.
    pub fn rc_forward(&self, tape: &mut Tape, bp: &BoundParams, c5: TensorId) -> AnswerPrediction {
        assert_eq!(self.mode, TaskMode::Rc, "rc_forward on an RTE head");
        let s1 = self.rnns[0].run(tape, bp, c5).cat;
        let s2 = self.rnns[1].run(tape, bp, s1).cat;
        let s3 = self.rnns[2].run(tape, bp, s2).cat;
        let start = Self::position_scores(tape, bp, s1, self.start_w.unwrap());
        let end = Self::position_scores(tape, bp, s2, self.end_w.unwrap());
        let type_dist = self.type_scores(tape, bp, s3);
        AnswerPrediction { type_dist, start_dist: Some(start), end_dist: Some(end) }
    }

    /// RTE head: type distribution only.
    pub fn rte_forward(&self, tape: &mut Tape, bp: &BoundParams, c5: TensorId) -> AnswerPrediction {
        assert_eq!(self.mode, TaskMode::Rte, "rte_forward on an RC head");
        let s1 = self.rnns[0].run(tape, bp, c5).cat;
        let type_dist = self.type_scores(tape, bp, s1);
        AnswerPrediction { type_dist, start_dist: None, end_dist: None }
    }

    pub fn forward(&self, tape: &mut Tape, bp: &BoundParams, c5: TensorId) -> AnswerPrediction {
        match self.mode {
            TaskMode::Rc => self.rc_forward(tape, bp, c5),
            TaskMode::Rte => self.rte_forward(tape, bp, c5),
        }
    }
}

/// Cross-entropy of the type distribution, plus the start/end cross-entropies
/// when the gold answer is a span. Span terms contribute nothing for
/// non-span targets.
pub fn answer_loss(
    tape: &mut Tape,
    mode: TaskMode,
    pred: &AnswerPrediction,
    target: &AnswerTarget,
) -> Result<TensorId> {
    target.validate(mode)?;
    let picked = tape.element(pred.type_dist, target.class);
    let lp = tape.log(picked);
    let mut loss = tape.neg(lp);
    if let Some((s, e)) = target.span {
        let (start, end) = match (pred.start_dist, pred.end_dist) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(QfeError::Data(
                    "span target but prediction has no span distributions".into(),
                ))
            }
        };
        let l_w = tape.shape(start)[0];
        if e >= l_w {
            return Err(QfeError::Data(format!("span ({s}, {e}) outside {l_w} tokens")));
        }
        let ps_ = tape.element(start, s);
        let lps = tape.log(ps_);
        let nls = tape.neg(lps);
        let pe = tape.element(end, e);
        let lpe = tape.log(pe);
        let nle = tape.neg(lpe);
        let span_loss = tape.add(nls, nle);
        loss = tape.add(loss, span_loss);
    }
    Ok(loss)
}

/// L = L_A + L_E, unweighted.
pub fn total_loss(tape: &mut Tape, answer: TensorId, evidence: TensorId) -> TensorId {
    tape.add(answer, evidence)
}

/// Decoded answer: the argmax class and, for span answers, the inclusive
/// token span maximizing start[s] * end[e] subject to s <= e and
/// e - s < MAX_SPAN_LEN.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAnswer {
    pub class: usize,
    pub span: Option<(usize, usize)>,
}

/// `evidence_mask`, when given, zeroes span probabilities at tokens outside
/// the predicted evidence sentences (the pipeline-style ablation; off by
/// default).
pub fn decode_answer(
    mode: TaskMode,
    type_probs: &[f64],
    start_probs: Option<&[f64]>,
    end_probs: Option<&[f64]>,
    evidence_mask: Option<&[bool]>,
) -> DecodedAnswer {
    let mut class = 0;
    for (i, &p) in type_probs.iter().enumerate() {
        if p > type_probs[class] {
            class = i;
        }
    }
    if mode != TaskMode::Rc || class != RC_SPAN_CLASS {
        return DecodedAnswer { class, span: None };
    }
    let (start, end) = match (start_probs, end_probs) {
        (Some(s), Some(e)) => (s, e),
        _ => return DecodedAnswer { class, span: None },
    };
    let masked =
        |p: &[f64], i: usize| -> f64 { if evidence_mask.is_some_and(|m| !m[i]) { 0.0 } else { p[i] } };
    let l = start.len();
    let mut best: Option<(usize, usize, f64)> = None;
    for e in 0..l {
        let pe = masked(end, e);
        let lo = e.saturating_sub(MAX_SPAN_LEN - 1);
        for s in lo..=e {
            let score = masked(start, s) * pe;
            let better = match best {
                None => true,
                Some((_, _, b)) => score > b,
            };
            if better {
                best = Some((s, e, score));
            }
        }
    }
    // Deterministic tie-break: first (s, e) found keeps the slot, and the
    // scan visits smaller e first, smaller s first within the window. To pin
    // ties to the smallest (s, e) pair ordering, rescan comparing on it.
    let (mut bs, mut be, bscore) = best.expect("non-empty distributions");
    for s in 0..l {
        for e in s..l.min(s + MAX_SPAN_LEN) {
            let score = masked(start, s) * masked(end, e);
            if score == bscore && (s, e) < (bs, be) {
                bs = s;
                be = e;
            }
        }
    }
    DecodedAnswer { class, span: Some((bs, be)) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_at;
    use rand::Rng;

    fn head(seed: u64, mode: TaskMode) -> (ParamSet, AnswerHeadParams) {
        let mut ps = ParamSet::new();
        let mut rng = rng_at(seed, &[50]);
        let h = AnswerHeadParams::new(&mut ps, mode, 4, &mut rng);
        (ps, h)
    }

    fn sums_to_one(v: &[f64]) -> bool {
        (v.iter().sum::<f64>() - 1.0).abs() < 1e-12
    }

    #[test]
    fn rc_forward_shapes_and_normalization() {
        let (ps, h) = head(1, TaskMode::Rc);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape, false);
        let mut rng = rng_at(1, &[1]);
        let c5d: Vec<f64> = (0..6 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c5 = tape.leaf(c5d, vec![6, 12], false);
        let pred = h.rc_forward(&mut tape, &bp, c5);
        assert_eq!(tape.shape(pred.start_dist.unwrap()), &[6]);
        assert_eq!(tape.shape(pred.end_dist.unwrap()), &[6]);
        assert_eq!(tape.shape(pred.type_dist), &[3]);
        assert!(sums_to_one(tape.value(pred.start_dist.unwrap())));
        assert!(sums_to_one(tape.value(pred.end_dist.unwrap())));
        assert!(sums_to_one(tape.value(pred.type_dist)));
    }

    #[test]
    fn rte_forward_has_no_span_distributions() {
        let (ps, h) = head(2, TaskMode::Rte);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape, false);
        let c5 = tape.leaf(vec![0.3; 4 * 12], vec![4, 12], false);
        let pred = h.rte_forward(&mut tape, &bp, c5);
        assert!(pred.start_dist.is_none());
        assert!(pred.end_dist.is_none());
        assert!(sums_to_one(tape.value(pred.type_dist)));

        // Deterministic across calls.
        let pred2 = h.rte_forward(&mut tape, &bp, c5);
        assert_eq!(tape.value(pred.type_dist), tape.value(pred2.type_dist));
    }

    #[test]
    fn one_hot_correct_prediction_has_zero_loss() {
        let mut tape = Tape::new();
        let t = tape.leaf(vec![0.0, 1.0, 0.0], vec![3], false);
        let pred = AnswerPrediction { type_dist: t, start_dist: None, end_dist: None };
        let target = AnswerTarget { class: 1, span: None };
        let loss = answer_loss(&mut tape, TaskMode::Rc, &pred, &target).unwrap();
        assert_eq!(tape.value(loss)[0], 0.0);
    }

    #[test]
    fn uniform_type_distribution_costs_ln3() {
        let mut tape = Tape::new();
        let t = tape.leaf(vec![1.0 / 3.0; 3], vec![3], false);
        let pred = AnswerPrediction { type_dist: t, start_dist: None, end_dist: None };
        let target = AnswerTarget { class: 0, span: None };
        let loss = answer_loss(&mut tape, TaskMode::Rc, &pred, &target).unwrap();
        assert!((tape.value(loss)[0] - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn yes_target_ignores_span_distributions() {
        let build = |bump: f64| {
            let mut tape = Tape::new();
            let t = tape.leaf(vec![0.6, 0.3, 0.1], vec![3], false);
            let mut sd = vec![0.25; 4];
            sd[0] += bump;
            sd[1] -= bump;
            let s = tape.leaf(sd, vec![4], false);
            let e = tape.leaf(vec![0.25; 4], vec![4], false);
            let pred =
                AnswerPrediction { type_dist: t, start_dist: Some(s), end_dist: Some(e) };
            let target = AnswerTarget { class: 0, span: None };
            let loss = answer_loss(&mut tape, TaskMode::Rc, &pred, &target).unwrap();
            tape.value(loss)[0]
        };
        assert_eq!(build(0.0), build(0.2));
    }

    #[test]
    fn span_target_with_non_span_class_is_an_error() {
        let target = AnswerTarget { class: 0, span: Some((1, 2)) };
        assert!(target.validate(TaskMode::Rc).is_err());
        let missing = AnswerTarget { class: RC_SPAN_CLASS, span: None };
        assert!(missing.validate(TaskMode::Rc).is_err());
        let rte_span = AnswerTarget { class: 0, span: Some((0, 0)) };
        assert!(rte_span.validate(TaskMode::Rte).is_err());
    }

    #[test]
    fn one_hot_yes_decodes_without_span() {
        let d = decode_answer(TaskMode::Rc, &[1.0, 0.0, 0.0], None, None, None);
        assert_eq!(d, DecodedAnswer { class: 0, span: None });
    }

    /// Oracle: enumerate every (s, e) pair with the constraints.
    fn span_oracle(start: &[f64], end: &[f64]) -> (usize, usize) {
        let l = start.len();
        let mut best = (0usize, 0usize, -1.0f64);
        for s in 0..l {
            for e in 0..l {
                if s > e || e - s >= MAX_SPAN_LEN {
                    continue;
                }
                let score = start[s] * end[e];
                if score > best.2 || (score == best.2 && (s, e) < (best.0, best.1)) {
                    best = (s, e, score);
                }
            }
        }
        (best.0, best.1)
    }

    #[test]
    fn decode_matches_exhaustive_span_oracle() {
        for seed in 0..200u64 {
            let mut rng = rng_at(seed, &[60]);
            let l = rng.gen_range(1..=12usize);
            let norm = |mut v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            };
            let start = norm((0..l).map(|_| rng.gen_range(0.01..1.0)).collect());
            let end = norm((0..l).map(|_| rng.gen_range(0.01..1.0)).collect());
            let d = decode_answer(
                TaskMode::Rc,
                &[0.0, 0.0, 1.0],
                Some(&start),
                Some(&end),
                None,
            );
            assert_eq!(d.span.unwrap(), span_oracle(&start, &end), "seed {seed}");
        }
    }

    #[test]
    fn start_after_end_global_maximum_is_rejected() {
        // start peaks at 3, end peaks at 1: the (3, 1) pair is invalid, so
        // the decoder must take the best valid combination instead.
        let start = vec![0.05, 0.1, 0.05, 0.7, 0.1];
        let end = vec![0.1, 0.6, 0.1, 0.1, 0.1];
        let d = decode_answer(TaskMode::Rc, &[0.0, 0.0, 1.0], Some(&start), Some(&end), None);
        let got = d.span.unwrap();
        assert_eq!(got, span_oracle(&start, &end));
        assert!(got.0 <= got.1);
        assert_ne!(got, (3, 1));
    }

    #[test]
    fn evidence_mask_restricts_span_search() {
        let start = vec![0.7, 0.1, 0.1, 0.1];
        let end = vec![0.6, 0.2, 0.1, 0.1];
        let mask = vec![false, false, true, true];
        let d = decode_answer(
            TaskMode::Rc,
            &[0.0, 0.0, 1.0],
            Some(&start),
            Some(&end),
            Some(&mask),
        );
        let (s, e) = d.span.unwrap();
        assert!(s >= 2 && e >= 2, "span must stay inside the evidence mask");
    }

    #[test]
    fn answer_loss_grad_check_through_rc_head() {
        use crate::tensor::grad_check;
        let (ps, h) = head(3, TaskMode::Rc);
        let mut rng = rng_at(3, &[2]);
        let c5d: Vec<f64> = (0..5 * 12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let params: Vec<(Vec<f64>, Vec<usize>)> =
            (0..ps.len()).map(|p| (ps.data(p).to_vec(), ps.shape(p).to_vec())).collect();
        let err = grad_check(
            |tape, ids| {
                let bp = crate::params::BoundParams::from_ids(ids.to_vec());
                let c5 = tape.leaf(c5d.clone(), vec![5, 12], false);
                let pred = h.rc_forward(tape, &bp, c5);
                let target = AnswerTarget { class: RC_SPAN_CLASS, span: Some((1, 3)) };
                answer_loss(tape, TaskMode::Rc, &pred, &target).unwrap()
            },
            &params,
            1e-5,
        );
        assert!(err < 1e-4, "answer loss grad error {err}");
    }
}
