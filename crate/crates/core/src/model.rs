//! Full model: encoder, evidence extractor (sequential or sigmoid baseline),
//! answer head, joint loss and per-sample prediction.

use crate::answer::{
    answer_loss, decode_answer, total_loss, AnswerHeadParams, TaskMode, RTE_NEI_CLASS,
};
use crate::config::{Config, ExtractorKind};
use crate::data::{AnswerKind, PreparedSample};
use crate::encoder::{DropoutCtx, EncoderParams};
use crate::error::Result;
use crate::params::{BoundParams, ParamSet};
use crate::qfe::{BaselineParams, QfeParams};
use crate::rng::rng_at;
use crate::tensor::Tape;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub struct Model {
    pub params: ParamSet,
    pub encoder: EncoderParams,
    pub qfe: QfeParams,
    pub baseline: BaselineParams,
    pub answer: AnswerHeadParams,
    pub cfg: Config,
}

/// Loss pieces for one sample.
pub struct SampleLoss {
    pub total: f64,
    pub answer: f64,
    pub evidence: f64,
    pub grads: Vec<Vec<f64>>,
}

/// One extraction step in a prediction trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// "sentence" or "eoe".
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<(usize, usize)>,
    /// Probability of this choice at its step.
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer_type: AnswerKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    pub evidence: Vec<(usize, usize)>,
    pub trace: Vec<TraceStep>,
}

impl Model {
    pub fn new(cfg: &Config, vocab_size: usize, n_chars: usize) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = rng_at(cfg.seed, &[0x1417]);
        let encoder = EncoderParams::new(
            &mut ps,
            vocab_size,
            n_chars,
            cfg.word_dim,
            cfg.char_dim,
            cfg.char_channels,
            cfg.d_c,
            &mut rng,
        );
        let qfe = QfeParams::new(&mut ps, 2 * cfg.d_c, &mut rng);
        let baseline = BaselineParams::new(&mut ps, 2 * cfg.d_c, &mut rng);
        let answer = AnswerHeadParams::new(&mut ps, cfg.mode, cfg.d_c, &mut rng);
        Ok(Model { params: ps, encoder, qfe, baseline, answer, cfg: cfg.clone() })
    }

    /// Build the joint loss graph for one sample and return the tape, the
    /// loss node, and the answer/evidence parts as values.
    pub fn loss_graph(
        &self,
        sample: &PreparedSample,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(Tape, crate::tensor::TensorId, f64, f64)> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, true);
        self.loss_parts(&mut tape, &bp, sample, dropout_rng)
            .map(|(loss, la, le)| (tape, loss, la, le))
    }

    /// Build the loss graph on a caller-owned tape; returns the loss node
    /// and the answer/evidence parts as values.
    pub fn loss_parts(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        sample: &PreparedSample,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(crate::tensor::TensorId, f64, f64)> {
        let dropout = match dropout_rng {
            Some(rng) if self.cfg.dropout_keep < 1.0 => {
                Some(DropoutCtx { keep_ratio: self.cfg.dropout_keep, rng })
            }
            _ => None,
        };
        let enc = self.encoder.run(tape, bp, &sample.input, dropout)?;
        let pred = self.answer.forward(tape, bp, enc.c5);
        let la = answer_loss(tape, self.cfg.mode, &pred, &sample.target)?;
        let le = match self.cfg.extractor {
            ExtractorKind::Qfe => {
                let qc = self.qfe.context(tape, bp, enc.x, enc.q2);
                if sample.gold_evidence.is_empty() {
                    self.qfe.termination_loss(tape, bp, &qc)?
                } else {
                    self.qfe.evidence_loss(tape, bp, &qc, &sample.gold_evidence)?.0
                }
            }
            ExtractorKind::Baseline => self.baseline.loss(tape, bp, enc.x, &sample.gold_evidence)?,
        };
        let la_v = tape.value(la)[0];
        let le_v = tape.value(le)[0];
        let loss = total_loss(tape, la, le);
        Ok((loss, la_v, le_v))
    }

    /// Forward + backward for one sample; gradients come back in parameter
    /// registry order.
    pub fn sample_grads(
        &self,
        sample: &PreparedSample,
        mut dropout_rng: Option<ChaCha12Rng>,
    ) -> Result<SampleLoss> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, true);
        let (loss, la, le) = self.loss_parts(&mut tape, &bp, sample, dropout_rng.as_mut())?;
        let total = tape.value(loss)[0];
        tape.backward(loss);
        let grads = self.params.grads_from(&tape, &bp);
        Ok(SampleLoss { total, answer: la, evidence: le, grads })
    }

    /// Forward + backward, adding this sample's gradients into `acc` in
    /// place (registry order); avoids materializing per-sample gradient
    /// buffers in the hot training loop.
    pub fn accumulate_grads(
        &self,
        sample: &PreparedSample,
        mut dropout_rng: Option<ChaCha12Rng>,
        acc: &mut [Vec<f64>],
    ) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, true);
        let (loss, la, le) = self.loss_parts(&mut tape, &bp, sample, dropout_rng.as_mut())?;
        let total = tape.value(loss)[0];
        tape.backward(loss);
        for p in 0..self.params.len() {
            if let Some(g) = tape.grad(bp.id(p)) {
                for (a, v) in acc[p].iter_mut().zip(g.iter()) {
                    *a += v;
                }
            }
        }
        Ok((total, la, le))
    }

    /// Decode one sample: answer head first (RTE reads the label to apply
    /// the at-least-one-sentence rule), then evidence extraction.
    pub fn predict(&self, sample: &PreparedSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bp = self.params.bind(&mut tape, false);
        let enc = self.encoder.run(&mut tape, &bp, &sample.input, None)?;
        let pred = self.answer.forward(&mut tape, &bp, enc.c5);
        let type_probs = tape.value(pred.type_dist).to_vec();

        let (evidence_idx, trace) = match self.cfg.extractor {
            ExtractorKind::Qfe => {
                let qc = self.qfe.context(&mut tape, &bp, enc.x, enc.q2);
                let min_sentences = match self.cfg.mode {
                    TaskMode::Rc => 0,
                    TaskMode::Rte => {
                        let label = argmax(&type_probs);
                        usize::from(label != RTE_NEI_CLASS)
                    }
                };
                let decoded = self.qfe.decode_beam(
                    &mut tape,
                    &bp,
                    &qc,
                    self.cfg.beam_size,
                    enc.l_s + 1,
                    min_sentences,
                )?;
                let mut trace = Vec::new();
                for (i, (&sid, &p)) in
                    decoded.evidence.iter().zip(decoded.chosen_probs.iter()).enumerate()
                {
                    trace.push(TraceStep {
                        step: i + 1,
                        kind: "sentence".into(),
                        id: Some(sample.sentence_ids[sid]),
                        prob: p,
                    });
                }
                if decoded.ended_with_eoe {
                    trace.push(TraceStep {
                        step: decoded.evidence.len() + 1,
                        kind: "eoe".into(),
                        id: None,
                        prob: *decoded.chosen_probs.last().expect("eoe step recorded"),
                    });
                }
                (decoded.evidence, trace)
            }
            ExtractorKind::Baseline => {
                let probs_id = self.baseline.probs(&mut tape, &bp, enc.x);
                let probs = tape.value(probs_id).to_vec();
                let picked: Vec<usize> = probs
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > self.cfg.baseline_threshold)
                    .map(|(i, _)| i)
                    .collect();
                let trace = picked
                    .iter()
                    .enumerate()
                    .map(|(i, &sid)| TraceStep {
                        step: i + 1,
                        kind: "sentence".into(),
                        id: Some(sample.sentence_ids[sid]),
                        prob: probs[sid],
                    })
                    .collect();
                (picked, trace)
            }
        };

        let evidence: Vec<(usize, usize)> =
            evidence_idx.iter().map(|&i| sample.sentence_ids[i]).collect();

        let evidence_mask = if self.cfg.mask_answer_by_evidence {
            let mut mask = vec![false; sample.tokens.len()];
            for &sid in &evidence_idx {
                let (j1, j2) = sample.input.boundaries[sid];
                mask[j1..=j2].iter_mut().for_each(|m| *m = true);
            }
            Some(mask)
        } else {
            None
        };

        let start = pred.start_dist.map(|id| tape.value(id).to_vec());
        let end = pred.end_dist.map(|id| tape.value(id).to_vec());
        let decoded = decode_answer(
            self.cfg.mode,
            &type_probs,
            start.as_deref(),
            end.as_deref(),
            evidence_mask.as_deref(),
        );
        let answer_type = AnswerKind::from_class(self.cfg.mode, decoded.class);
        let answer_text = decoded
            .span
            .map(|(s, e)| sample.tokens[s..=e].join(" "));

        Ok(Prediction { id: sample.id.clone(), answer_type, answer_text, evidence, trace })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
