//! Acceptance suite: one pass/fail line per criterion.
//!
//! Covers gradient correctness against finite differences, beam-search
//! equivalence with exhaustive enumeration, distribution invariants of the
//! extractor, the metric worked examples, end-to-end learnability on the
//! synthetic multi-hop set, the sequential-vs-independent extractor
//! comparison, teacher-forcing order, the at-least-one-sentence rule with
//! ensembling, and bit-level reproducibility.

use qfe_core::answer::TaskMode;
use qfe_core::checkpoint::Checkpoint;
use qfe_core::config::{Config, ExtractorKind};
use qfe_core::data::{balance_classes, AnswerKind};
use qfe_core::metrics::{
    answer_em_f1, evidence_scores, fever_score, joint_em_f1, kendall_tau_counts,
};
use qfe_core::model::Model;
use qfe_core::params::BoundParams;
use qfe_core::qfe::{ExtractorState, QfeContext, QfeParams, StepDistribution};
use qfe_core::rng::rng_at;
use qfe_core::synth::{generate_synthetic, SyntheticSpec};
use qfe_core::tensor::{grad_check, Tape};
use qfe_core::train::{
    self, build_vocabs, ensemble_predictions, evaluate_prepared, gradcheck_sample, prepare_all,
    well_conditioned_instance,
};
use rand::Rng;
use std::sync::OnceLock;
use std::time::Instant;

fn criterion(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {name} failed: {detail}");
}

// ── shared trained models (trained once, used by two criteria) ───────

struct TrainedPair {
    qfe_report: qfe_core::metrics::EvalReport,
    baseline_report: qfe_core::metrics::EvalReport,
    qfe_seconds: f64,
    qfe_epochs: usize,
}

static TRAINED: OnceLock<TrainedPair> = OnceLock::new();

fn synthetic_rc_spec(seed: u64, n: usize) -> SyntheticSpec {
    SyntheticSpec { seed, num_samples: n, mode: TaskMode::Rc, ..SyntheticSpec::default() }
}

fn desk_config(extractor: ExtractorKind) -> Config {
    Config {
        mode: TaskMode::Rc,
        extractor,
        d_c: 32,
        word_dim: 24,
        char_dim: 8,
        char_channels: 8,
        batch_size: 16,
        learning_rate: 0.003,
        beam_size: 5,
        epochs: 20,
        seed: 7,
        patience: 20,
        stop_at_evidence_em: Some(0.95),
        stop_at_answer_em: Some(0.95),
        ..Config::desk()
    }
}

fn trained() -> &'static TrainedPair {
    TRAINED.get_or_init(|| {
        let train_data = generate_synthetic(&synthetic_rc_spec(1, 2000)).unwrap();
        let dev_data = generate_synthetic(&synthetic_rc_spec(2, 200)).unwrap();

        let t0 = Instant::now();
        let qfe = train::train(&desk_config(ExtractorKind::Qfe), &train_data, &dev_data, false)
            .expect("qfe training");
        let qfe_seconds = t0.elapsed().as_secs_f64();
        let qfe_epochs = qfe.log.len();
        let (qfe_report, _, _) =
            train::evaluate(&qfe.model, &qfe.vocab, &qfe.chars, &dev_data).unwrap();

        // The independent sigmoid baseline trains on the same data under the
        // same budget; only the extractor differs.
        let base =
            train::train(&desk_config(ExtractorKind::Baseline), &train_data, &dev_data, false)
                .expect("baseline training");
        let (baseline_report, _, _) =
            train::evaluate(&base.model, &base.vocab, &base.chars, &dev_data).unwrap();

        TrainedPair { qfe_report, baseline_report, qfe_seconds, qfe_epochs }
    })
}

// ── criteria ─────────────────────────────────────────────────────────

#[test]
fn criterion_gradient_correctness() {
    // Complete loss on a 3-sentence, d_c = 2 instance; 20 seeds; h = 1e-5;
    // max relative error < 1e-4. Instances are screened for conditioning on
    // analytic gradient magnitudes only (f64 central differences bottom out
    // near 1e-10 absolute, so coordinates below ~1e-6 measure noise).
    let t0 = Instant::now();
    let sample = gradcheck_sample();
    let mut seed = 0u64;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (model, prep, next) = well_conditioned_instance(seed, &sample).unwrap();
        seed = next;
        let params: Vec<(Vec<f64>, Vec<usize>)> = (0..model.params.len())
            .map(|p| (model.params.data(p).to_vec(), model.params.shape(p).to_vec()))
            .collect();
        let err = grad_check(
            |tape, ids| {
                let bp = BoundParams::from_ids(ids.to_vec());
                model.loss_parts(tape, &bp, &prep, None).unwrap().0
            },
            &params,
            1e-5,
        );
        worst = worst.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    criterion(
        "gradient-correctness",
        worst < 1e-4 && secs < 60.0,
        &format!("max rel error {worst:.3e} over 20 seeds in {secs:.1}s"),
    );
}

fn random_qfe_instance(
    seed: u64,
    dim: usize,
    l_s: usize,
    m_w: usize,
) -> (qfe_core::params::ParamSet, QfeParams, Vec<f64>, Vec<f64>) {
    let mut ps = qfe_core::params::ParamSet::new();
    let mut rng = rng_at(seed, &[0xbea3]);
    let qfe = QfeParams::new(&mut ps, dim, &mut rng);
    for p in 0..ps.len() {
        for v in ps.data_mut(p).iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let x: Vec<f64> = (0..l_s * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..m_w * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (ps, qfe, x, y)
}

/// Exhaustive enumeration of every EOE-terminated extraction sequence,
/// scored by average per-step NLL; independent of the beam implementation.
fn exhaustive_argmin(
    tape: &mut Tape,
    bp: &BoundParams,
    qfe: &QfeParams,
    qc: &QfeContext,
) -> (Vec<usize>, f64) {
    fn recurse(
        tape: &mut Tape,
        bp: &BoundParams,
        qfe: &QfeParams,
        qc: &QfeContext,
        st: &ExtractorState,
        best: &mut Option<(Vec<usize>, f64)>,
    ) {
        let dist = qfe.distribution(tape, bp, qc, st, false);
        for cand in 0..=qc.l_s {
            if st.extracted.contains(&cand) {
                continue;
            }
            let child = qfe.advance(tape, bp, qc, st, &dist, cand).unwrap();
            if cand == qc.l_s {
                let score = child.nll / child.step as f64;
                let better = match best {
                    None => true,
                    Some((seq, s)) => score < *s || (score == *s && child.extracted < *seq),
                };
                if better {
                    *best = Some((child.extracted.clone(), score));
                }
            } else {
                recurse(tape, bp, qfe, qc, &child, best);
            }
        }
    }
    let st = qfe.start(tape, bp, qc);
    let mut best = None;
    recurse(tape, bp, qfe, qc, &st, &mut best);
    best.unwrap()
}

#[test]
fn criterion_beam_search_oracle() {
    // Beam width >= hypothesis count must equal the exhaustive argmin of
    // average NLL on every instance with l_s <= 5, over 200 seeds.
    let t0 = Instant::now();
    let mut checked = 0;
    for seed in 0..200u64 {
        let l_s = 1 + (seed as usize % 5);
        let m_w = 1 + (seed as usize % 3);
        let dim = 8;
        let (ps, qfe, xd, yd) = random_qfe_instance(seed, dim, l_s, m_w);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape, false);
        let x = tape.leaf(xd, vec![l_s, dim], false);
        let y = tape.leaf(yd, vec![m_w, dim], false);
        let qc = qfe.context(&mut tape, &bp, x, y);
        let (want_seq, want_score) = exhaustive_argmin(&mut tape, &bp, &qfe, &qc);
        let got = qfe.decode_beam(&mut tape, &bp, &qc, 1 << 12, l_s + 1, 0).unwrap();
        assert_eq!(got.evidence, want_seq, "seed {seed}");
        assert!((got.score - want_score).abs() < 1e-12, "seed {seed}");
        checked += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    criterion(
        "beam-search-oracle",
        checked == 200 && secs < 60.0,
        &format!("200 instances matched exhaustive argmin in {secs:.1}s"),
    );
}

#[test]
fn criterion_distribution_invariants() {
    // Over 1000 random extraction states: probabilities sum to 1 +- 1e-12,
    // extracted ids have probability exactly 0, glimpse attention sums to
    // 1 +- 1e-12, coverage never decreases.
    let mut states_checked = 0;
    let mut seed = 0u64;
    while states_checked < 1000 {
        let l_s = 2 + (seed as usize % 5);
        let m_w = 1 + (seed as usize % 4);
        let (ps, qfe, xd, yd) = random_qfe_instance(1000 + seed, 8, l_s, m_w);
        let mut tape = Tape::new();
        let bp = ps.bind(&mut tape, false);
        let x = tape.leaf(xd, vec![l_s, 8], false);
        let y = tape.leaf(yd, vec![m_w, 8], false);
        let qc = qfe.context(&mut tape, &bp, x, y);
        let mut st = qfe.start(&mut tape, &bp, &qc);
        let mut pick = rng_at(seed, &[0x71c4]);
        let mut prev_cov = vec![0.0; m_w];
        loop {
            let dist: StepDistribution = qfe.distribution(&mut tape, &bp, &qc, &st, false);
            let probs = tape.value(dist.probs);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for &e in &st.extracted {
                assert_eq!(probs[e], 0.0, "extracted id must have probability exactly 0");
            }
            let alpha = tape.value(dist.alpha);
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let cov = tape.value(st.coverage);
            for (c, p) in cov.iter().zip(prev_cov.iter()) {
                assert!(c >= p, "coverage decreased");
            }
            prev_cov = cov.to_vec();
            states_checked += 1;
            if states_checked >= 1000 {
                break;
            }
            // Random non-extracted sentence, or stop this instance.
            let open: Vec<usize> =
                (0..l_s).filter(|i| !st.extracted.contains(i)).collect();
            if open.is_empty() {
                break;
            }
            let choice = open[pick.gen_range(0..open.len())];
            st = qfe.advance(&mut tape, &bp, &qc, &st, &dist, choice).unwrap();
        }
        seed += 1;
    }
    criterion(
        "distribution-invariants",
        true,
        &format!("{states_checked} states: sums, exact-zero masking, coverage monotone"),
    );
}

#[test]
fn criterion_metric_oracles() {
    // Worked examples, pinned exactly.
    let (em, f1, p, r) = answer_em_f1(
        (AnswerKind::Span, Some("rock duo")),
        (AnswerKind::Span, Some("english rock duo")),
    );
    assert_eq!(em, 0.0);
    assert_eq!(p, 1.0);
    assert!((r - 2.0 / 3.0).abs() < 1e-15);
    assert!((f1 - 0.8).abs() < 1e-15);

    let ids = |v: &[usize]| v.iter().map(|&i| (0usize, i)).collect::<Vec<_>>();
    let (em, p, r, f1) = evidence_scores(&ids(&[1]), &ids(&[1, 2]));
    assert_eq!((em, p, r), (0.0, 1.0, 0.5));
    assert!((f1 - 2.0 / 3.0).abs() < 1e-15);

    let (jem, jf1) = joint_em_f1((1.0, 1.0, 1.0), (0.0, 1.0, 0.5));
    assert_eq!(jem, 0.0);
    assert!((jf1 - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(joint_em_f1((1.0, 1.0, 1.0), (1.0, 1.0, 1.0)), (1.0, 1.0));

    assert_eq!(
        fever_score(AnswerKind::Supports, &ids(&[1, 2, 3]), AnswerKind::Supports, &[ids(&[1, 2])]),
        1.0
    );
    assert_eq!(
        fever_score(AnswerKind::Nei, &ids(&[9]), AnswerKind::Nei, &[vec![]]),
        1.0
    );
    assert_eq!(
        fever_score(AnswerKind::Refutes, &ids(&[1, 2]), AnswerKind::Supports, &[ids(&[1, 2])]),
        0.0
    );

    assert_eq!(kendall_tau_counts(&[2, 3, 4], &[2, 3, 4]).unwrap(), 1.0);
    assert_eq!(kendall_tau_counts(&[2, 3, 4], &[4, 3, 2]).unwrap(), -1.0);

    // Tau against the O(n^2) pair-counting oracle on 100 random inputs.
    let mut compared = 0;
    for seed in 0..100u64 {
        let mut rng = rng_at(seed, &[0x7a0]);
        let n = rng.gen_range(2..=50usize);
        let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
        for i in 0..n {
            for j in i + 1..n {
                let dx = x[i] as i64 - x[j] as i64;
                let dy = y[i] as i64 - y[j] as i64;
                match (dx == 0, dy == 0) {
                    (true, true) => {
                        tx += 1;
                        ty += 1;
                    }
                    (true, false) => tx += 1,
                    (false, true) => ty += 1,
                    _ if dx.signum() == dy.signum() => c += 1,
                    _ => d += 1,
                }
            }
        }
        let n0 = (n * (n - 1) / 2) as i64;
        if tx == n0 || ty == n0 {
            assert!(kendall_tau_counts(&x, &y).is_err());
            continue;
        }
        let oracle = (c - d) as f64 / (((n0 - tx) as f64) * ((n0 - ty) as f64)).sqrt();
        assert_eq!(kendall_tau_counts(&x, &y).unwrap(), oracle, "seed {seed}");
        compared += 1;
    }
    criterion(
        "metric-oracles",
        compared > 90,
        &format!("worked examples exact; tau matched pair-counting oracle on {compared} inputs"),
    );
}

#[test]
fn criterion_synthetic_learnability() {
    let t = trained();
    let pass = t.qfe_report.evidence_em >= 0.90
        && t.qfe_report.answer_em >= 0.90
        && t.qfe_seconds <= 900.0;
    criterion(
        "synthetic-learnability",
        pass,
        &format!(
            "dev evidence EM {:.3}, answer EM {:.3} after {} epochs in {:.0}s (budget 900s)",
            t.qfe_report.evidence_em, t.qfe_report.answer_em, t.qfe_epochs, t.qfe_seconds
        ),
    );
}

#[test]
fn criterion_qfe_vs_baseline() {
    let t = trained();
    let qfe_zero = *t.qfe_report.count_delta_histogram.get(&0).unwrap_or(&0) as f64
        / t.qfe_report.n as f64;
    let base_zero = *t.baseline_report.count_delta_histogram.get(&0).unwrap_or(&0) as f64
        / t.baseline_report.n as f64;
    let pass = t.qfe_report.evidence_em > t.baseline_report.evidence_em && qfe_zero > base_zero;
    criterion(
        "qfe-vs-baseline",
        pass,
        &format!(
            "evidence EM {:.3} vs {:.3}; exact-count mass {:.3} vs {:.3}",
            t.qfe_report.evidence_em, t.baseline_report.evidence_em, qfe_zero, base_zero
        ),
    );
}

#[test]
fn criterion_teacher_forcing_order() {
    // Across 500 training instances the forced extraction sequence is a
    // permutation of the gold evidence followed by EOE.
    let samples = generate_synthetic(&SyntheticSpec {
        seed: 31,
        num_samples: 500,
        mode: TaskMode::Rc,
        paragraphs: 4,
        n_entities: 40,
        n_values: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (vocab, chars) = build_vocabs(&samples, None);
    let cfg = Config {
        d_c: 8,
        word_dim: 6,
        char_dim: 3,
        char_channels: 4,
        seed: 5,
        ..Config::desk()
    };
    let model = Model::new(&cfg, vocab.len(), chars.len()).unwrap();
    let prepared = prepare_all(&samples, &vocab, &chars, 2000).unwrap();
    for prep in &prepared {
        let mut tape = Tape::new();
        let bp = model.params.bind(&mut tape, false);
        let enc = model.encoder.run(&mut tape, &bp, &prep.input, None).unwrap();
        let qc = model.qfe.context(&mut tape, &bp, enc.x, enc.q2);
        let (_, trace) = model.qfe.evidence_loss(&mut tape, &bp, &qc, &prep.gold_evidence).unwrap();
        let (head, tail) = trace.order.split_at(trace.order.len() - 1);
        let mut forced = head.to_vec();
        forced.sort_unstable();
        let mut gold = prep.gold_evidence.clone();
        gold.sort_unstable();
        assert_eq!(forced, gold, "sample {}", prep.id);
        assert_eq!(tail[0], qc.eoe_index(), "sample {}", prep.id);
    }
    criterion(
        "teacher-forcing-order",
        true,
        "500 instances: forced sequence = permutation of gold, then EOE",
    );
}

#[test]
fn criterion_fever_rule_and_ensemble_union() {
    // With the at-least-one-sentence rule, no Supports/Refutes prediction
    // has empty evidence over 500 random decodes; a 3-member ensemble's
    // evidence is a superset of each member's on every sample.
    let samples = generate_synthetic(&SyntheticSpec {
        seed: 77,
        num_samples: 500,
        mode: TaskMode::Rte,
        paragraphs: 4,
        n_entities: 40,
        n_values: 12,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let balanced = balance_classes(&samples, 3).unwrap();
    let (vocab, chars) = build_vocabs(&balanced, None);
    let prepared = prepare_all(&samples, &vocab, &chars, 2000).unwrap();

    let mut member_preds = Vec::new();
    for seed in 0..3u64 {
        let cfg = Config {
            mode: TaskMode::Rte,
            d_c: 8,
            word_dim: 6,
            char_dim: 3,
            char_channels: 4,
            seed,
            beam_size: 4,
            ..Config::desk()
        };
        let model = Model::new(&cfg, vocab.len(), chars.len()).unwrap();
        let (_, _, preds) = evaluate_prepared(&model, &prepared).unwrap();
        for p in &preds {
            if matches!(p.answer_type, AnswerKind::Supports | AnswerKind::Refutes) {
                assert!(
                    !p.evidence.is_empty(),
                    "member {seed} predicted {:?} with empty evidence on {}",
                    p.answer_type,
                    p.id
                );
            }
        }
        member_preds.push(preds);
    }
    let merged = ensemble_predictions(&member_preds).unwrap();
    for (i, m) in merged.iter().enumerate() {
        for member in &member_preds {
            for id in &member[i].evidence {
                assert!(
                    m.evidence.contains(id),
                    "union on {} is missing a member's id {:?}",
                    m.id,
                    id
                );
            }
        }
        if matches!(m.answer_type, AnswerKind::Supports | AnswerKind::Refutes) {
            assert!(!m.evidence.is_empty());
        }
    }
    criterion(
        "fever-rule",
        true,
        "1500 member decodes kept evidence nonempty for supports/refutes; union covers members",
    );
}

#[test]
fn criterion_reproducibility() {
    // Identical seed/config/data give byte-identical checkpoints and
    // prediction files.
    let data = generate_synthetic(&SyntheticSpec {
        seed: 8,
        num_samples: 48,
        mode: TaskMode::Rc,
        paragraphs: 3,
        n_entities: 30,
        n_values: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = Config {
        d_c: 8,
        word_dim: 6,
        char_dim: 3,
        char_channels: 4,
        batch_size: 8,
        epochs: 2,
        dropout_keep: 0.9,
        seed: 13,
        beam_size: 3,
        ..Config::desk()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let trained = train::train(&cfg, &data, &data, true).unwrap();
        let cp = Checkpoint::from_model(
            &trained.model,
            &trained.vocab,
            &trained.chars,
            trained.best_epoch as u32,
            Some(&trained.adam),
        );
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        cp.save(&ckpt).unwrap();
        let (_, _, preds) =
            train::evaluate(&trained.model, &trained.vocab, &trained.chars, &data).unwrap();
        let pred_path = dir.path().join(format!("{tag}.jsonl"));
        train::write_predictions(&pred_path, &preds).unwrap();
        (std::fs::read(ckpt).unwrap(), std::fs::read(pred_path).unwrap())
    };
    let (ck1, pr1) = run("a");
    let (ck2, pr2) = run("b");
    criterion(
        "reproducibility",
        ck1 == ck2 && pr1 == pr2,
        &format!(
            "checkpoints {} bytes identical; prediction files {} bytes identical",
            ck1.len(),
            pr1.len()
        ),
    );
}
