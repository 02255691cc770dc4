//! Evaluation: answer EM/F1, evidence set metrics, joint metrics, the
//! all-or-nothing label+evidence score for claim verification, count
//! correlation, and grouped breakdowns.

use crate::answer::TaskMode;
use crate::data::{AnswerKind, ReasoningKind};
use crate::error::{QfeError, Result};
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse
/// whitespace; the usual span-normalization convention.
pub fn normalize_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String =
        lower.chars().map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' }).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// (em, f1, precision, recall) for a predicted answer against gold.
/// If either side is not a span answer, everything reduces to whether the
/// answer types match; word-level partial credit applies only to span pairs.
pub fn answer_em_f1(
    pred: (AnswerKind, Option<&str>),
    gold: (AnswerKind, Option<&str>),
) -> (f64, f64, f64, f64) {
    let (pk, pt) = pred;
    let (gk, gt) = gold;
    if pk != AnswerKind::Span || gk != AnswerKind::Span {
        let hit = if pk == gk { 1.0 } else { 0.0 };
        return (hit, hit, hit, hit);
    }
    let p_norm = normalize_answer(pt.unwrap_or(""));
    let g_norm = normalize_answer(gt.unwrap_or(""));
    let em = if p_norm == g_norm { 1.0 } else { 0.0 };
    let p_toks: Vec<&str> = p_norm.split_whitespace().collect();
    let g_toks: Vec<&str> = g_norm.split_whitespace().collect();
    if p_toks.is_empty() && g_toks.is_empty() {
        return (em, 1.0, 1.0, 1.0);
    }
    if p_toks.is_empty() || g_toks.is_empty() {
        return (em, 0.0, 0.0, 0.0);
    }
    let mut gold_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g_toks {
        *gold_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &p_toks {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return (em, 0.0, 0.0, 0.0);
    }
    let p = overlap as f64 / p_toks.len() as f64;
    let r = overlap as f64 / g_toks.len() as f64;
    (em, 2.0 * p * r / (p + r), p, r)
}

/// (em, precision, recall, f1) over evidence id sets.
pub fn evidence_scores(
    pred: &[(usize, usize)],
    gold: &[(usize, usize)],
) -> (f64, f64, f64, f64) {
    let ps: BTreeSet<_> = pred.iter().copied().collect();
    let gs: BTreeSet<_> = gold.iter().copied().collect();
    let em = if ps == gs { 1.0 } else { 0.0 };
    if ps.is_empty() && gs.is_empty() {
        return (1.0, 1.0, 1.0, 1.0);
    }
    let overlap = ps.intersection(&gs).count() as f64;
    let p = if ps.is_empty() { 0.0 } else { overlap / ps.len() as f64 };
    let r = if gs.is_empty() { 0.0 } else { overlap / gs.len() as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (em, p, r, f1)
}

/// Per-sample joint metrics: EM multiplies, precision/recall multiply and
/// recombine into F1.
pub fn joint_em_f1(
    answer: (f64, f64, f64), // (em, p, r)
    evidence: (f64, f64, f64),
) -> (f64, f64) {
    let jem = answer.0 * evidence.0;
    let jp = answer.1 * evidence.1;
    let jr = answer.2 * evidence.2;
    let jf1 = if jp + jr == 0.0 { 0.0 } else { 2.0 * jp * jr / (jp + jr) };
    (jem, jf1)
}

/// All-or-nothing score: 1 iff the label is right and, unless the gold label
/// is NEI, the predicted ids cover at least one complete gold evidence set.
pub fn fever_score(
    pred_label: AnswerKind,
    pred_ids: &[(usize, usize)],
    gold_label: AnswerKind,
    gold_sets: &[Vec<(usize, usize)>],
) -> f64 {
    if pred_label != gold_label {
        return 0.0;
    }
    if gold_label == AnswerKind::Nei {
        return 1.0;
    }
    let ps: BTreeSet<_> = pred_ids.iter().copied().collect();
    let covered = gold_sets.iter().any(|set| set.iter().all(|id| ps.contains(id)));
    if covered {
        1.0
    } else {
        0.0
    }
}

/// Tie-corrected Kendall tau-b between paired counts, via sort plus
/// merge-sort inversion counting.
pub fn kendall_tau_counts(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(QfeError::Data(format!(
            "kendall tau: length mismatch {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(QfeError::Data("kendall tau: need at least 2 pairs".into()));
    }
    let mut pairs: Vec<(usize, usize)> = pred.iter().copied().zip(gold.iter().copied()).collect();
    pairs.sort_unstable();
    let n0 = n * (n - 1) / 2;
    let tie_pairs = |counts: &BTreeMap<usize, usize>| -> usize {
        counts.values().map(|&t| t * (t - 1) / 2).sum()
    };
    let mut x_counts = BTreeMap::new();
    let mut y_counts = BTreeMap::new();
    let mut xy_counts = BTreeMap::new();
    for &(x, y) in &pairs {
        *x_counts.entry(x).or_insert(0usize) += 1;
        *y_counts.entry(y).or_insert(0usize) += 1;
        *xy_counts.entry((x, y)).or_insert(0usize) += 1;
    }
    let n1 = tie_pairs(&x_counts);
    let n2 = tie_pairs(&y_counts);
    let n3: usize = xy_counts.values().map(|&t| t * (t - 1) / 2).sum();
    if n1 == n0 || n2 == n0 {
        return Err(QfeError::Data(
            "kendall tau: undefined for a constant sequence (all ties)".into(),
        ));
    }
    let mut ys: Vec<usize> = pairs.iter().map(|&(_, y)| y).collect();
    let discordant = count_inversions(&mut ys);
    let concordant_minus_discordant =
        n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * discordant as i64;
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok(concordant_minus_discordant as f64 / denom)
}

/// Strict inversions (a later element smaller than an earlier one) by
/// merge sort.
fn count_inversions(v: &mut [usize]) -> usize {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut inv = count_inversions(left) + count_inversions(right);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            inv += left.len() - i;
            merged.push(right[j]);
            j += 1;
        } else {
            merged.push(left[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&left[i..]);
    merged.extend_from_slice(&right[j..]);
    v.copy_from_slice(&merged);
    inv
}

/// Everything needed to score one sample.
#[derive(Debug, Clone)]
pub struct SampleEval {
    pub id: String,
    pub mode: TaskMode,
    pub pred_kind: AnswerKind,
    pub pred_text: Option<String>,
    pub gold_kind: AnswerKind,
    pub gold_text: Option<String>,
    pub pred_evidence: Vec<(usize, usize)>,
    pub gold_evidence: Vec<(usize, usize)>,
    /// Alternative complete gold sets for the all-or-nothing score; when
    /// absent, `gold_evidence` is the single set.
    pub gold_alternatives: Option<Vec<Vec<(usize, usize)>>>,
    pub reasoning: Option<ReasoningKind>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GroupReport {
    pub n: usize,
    pub proportion: f64,
    pub answer_em: f64,
    pub answer_f1: f64,
    pub evidence_em: f64,
    pub evidence_precision: f64,
    pub evidence_recall: f64,
    pub evidence_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
    pub mean_predicted_evidence: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub answer_em: f64,
    pub answer_f1: f64,
    pub evidence_em: f64,
    pub evidence_precision: f64,
    pub evidence_recall: f64,
    pub evidence_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
    pub label_accuracy: f64,
    /// Mean all-or-nothing label+evidence score (RTE datasets).
    pub fever_score: Option<f64>,
    /// Kendall tau-b between predicted and gold evidence counts; absent when
    /// undefined (constant counts).
    pub kendall_tau_counts: Option<f64>,
    pub mean_predicted_evidence: f64,
    /// Histogram of (predicted count - gold count).
    pub count_delta_histogram: BTreeMap<i64, usize>,
    pub by_evidence_count: BTreeMap<usize, GroupReport>,
    pub by_reasoning: BTreeMap<String, GroupReport>,
}

fn group_report(evals: &[&SampleEval], total: usize) -> GroupReport {
    let n = evals.len();
    let mut g = GroupReport { n, proportion: n as f64 / total as f64, ..GroupReport::default() };
    if n == 0 {
        return g;
    }
    for e in evals {
        let (aem, af1, ap, ar) = answer_em_f1(
            (e.pred_kind, e.pred_text.as_deref()),
            (e.gold_kind, e.gold_text.as_deref()),
        );
        let (eem, ep, er, ef1) = evidence_scores(&e.pred_evidence, &e.gold_evidence);
        let (jem, jf1) = joint_em_f1((aem, ap, ar), (eem, ep, er));
        g.answer_em += aem;
        g.answer_f1 += af1;
        g.evidence_em += eem;
        g.evidence_precision += ep;
        g.evidence_recall += er;
        g.evidence_f1 += ef1;
        g.joint_em += jem;
        g.joint_f1 += jf1;
        g.mean_predicted_evidence += e.pred_evidence.len() as f64;
    }
    let d = n as f64;
    g.answer_em /= d;
    g.answer_f1 /= d;
    g.evidence_em /= d;
    g.evidence_precision /= d;
    g.evidence_recall /= d;
    g.evidence_f1 /= d;
    g.joint_em /= d;
    g.joint_f1 /= d;
    g.mean_predicted_evidence /= d;
    g
}

/// Aggregate a full evaluation over per-sample results.
pub fn build_report(evals: &[SampleEval]) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(QfeError::Data("build_report: no samples".into()));
    }
    let total = evals.len();
    let refs: Vec<&SampleEval> = evals.iter().collect();
    let overall = group_report(&refs, total);

    let label_accuracy = evals
        .iter()
        .map(|e| if e.pred_kind == e.gold_kind { 1.0 } else { 0.0 })
        .sum::<f64>()
        / total as f64;

    let is_rte = evals.iter().all(|e| e.mode == TaskMode::Rte);
    let fever = if is_rte {
        Some(
            evals
                .iter()
                .map(|e| {
                    let single = vec![e.gold_evidence.clone()];
                    let sets = e.gold_alternatives.as_deref().unwrap_or(&single);
                    fever_score(e.pred_kind, &e.pred_evidence, e.gold_kind, sets)
                })
                .sum::<f64>()
                / total as f64,
        )
    } else {
        None
    };

    let pred_counts: Vec<usize> = evals.iter().map(|e| e.pred_evidence.len()).collect();
    let gold_counts: Vec<usize> = evals.iter().map(|e| e.gold_evidence.len()).collect();
    let tau = kendall_tau_counts(&pred_counts, &gold_counts).ok();

    let mut histogram: BTreeMap<i64, usize> = BTreeMap::new();
    for (p, g) in pred_counts.iter().zip(gold_counts.iter()) {
        *histogram.entry(*p as i64 - *g as i64).or_insert(0) += 1;
    }

    let mut by_count: BTreeMap<usize, Vec<&SampleEval>> = BTreeMap::new();
    for e in evals {
        by_count.entry(e.gold_evidence.len()).or_default().push(e);
    }
    let by_evidence_count =
        by_count.into_iter().map(|(k, v)| (k, group_report(&v, total))).collect();

    let mut by_reason: BTreeMap<String, Vec<&SampleEval>> = BTreeMap::new();
    for e in evals {
        if let Some(r) = e.reasoning {
            let key = match r {
                ReasoningKind::Bridge => "bridge",
                ReasoningKind::Comparison => "comparison",
            };
            by_reason.entry(key.to_string()).or_default().push(e);
        }
    }
    let by_reasoning = by_reason.into_iter().map(|(k, v)| (k, group_report(&v, total))).collect();

    Ok(EvalReport {
        n: total,
        answer_em: overall.answer_em,
        answer_f1: overall.answer_f1,
        evidence_em: overall.evidence_em,
        evidence_precision: overall.evidence_precision,
        evidence_recall: overall.evidence_recall,
        evidence_f1: overall.evidence_f1,
        joint_em: overall.joint_em,
        joint_f1: overall.joint_f1,
        label_accuracy,
        fever_score: fever,
        kendall_tau_counts: tau,
        mean_predicted_evidence: overall.mean_predicted_evidence,
        count_delta_histogram: histogram,
        by_evidence_count,
        by_reasoning,
    })
}

impl EvalReport {
    /// Plain-text table for logs and the CLI.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let pct = |v: f64| format!("{:6.2}", 100.0 * v);
        out.push_str(&format!("samples: {}\n", self.n));
        out.push_str(&format!(
            "answer   EM {}  F1 {}\n",
            pct(self.answer_em),
            pct(self.answer_f1)
        ));
        out.push_str(&format!(
            "evidence EM {}  F1 {}  P {}  R {}  (mean count {:.2})\n",
            pct(self.evidence_em),
            pct(self.evidence_f1),
            pct(self.evidence_precision),
            pct(self.evidence_recall),
            self.mean_predicted_evidence
        ));
        out.push_str(&format!(
            "joint    EM {}  F1 {}\n",
            pct(self.joint_em),
            pct(self.joint_f1)
        ));
        out.push_str(&format!("label accuracy {}\n", pct(self.label_accuracy)));
        if let Some(f) = self.fever_score {
            out.push_str(&format!("label+evidence score {}\n", pct(f)));
        }
        match self.kendall_tau_counts {
            Some(t) => out.push_str(&format!("count correlation (tau-b) {t:+.3}\n")),
            None => out.push_str("count correlation (tau-b) undefined\n"),
        }
        out.push_str("count delta histogram (pred - gold):\n");
        for (delta, cnt) in &self.count_delta_histogram {
            out.push_str(&format!("  {delta:+3}: {cnt}\n"));
        }
        if !self.by_evidence_count.is_empty() {
            out.push_str("by gold evidence count:\n");
            out.push_str("  #evi  %data   ansEM   eviEM    Num\n");
            for (k, g) in &self.by_evidence_count {
                out.push_str(&format!(
                    "  {k:4}  {:5.1}  {}  {}  {:5.2}\n",
                    100.0 * g.proportion,
                    pct(g.answer_em),
                    pct(g.evidence_em),
                    g.mean_predicted_evidence
                ));
            }
        }
        if !self.by_reasoning.is_empty() {
            out.push_str("by reasoning type:\n");
            for (k, g) in &self.by_reasoning {
                out.push_str(&format!(
                    "  {k:<10} {:5.1}%  ansEM {}  eviEM {}\n",
                    100.0 * g.proportion,
                    pct(g.answer_em),
                    pct(g.evidence_em)
                ));
            }
        }
        out
    }
}
