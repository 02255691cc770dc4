//! Context encoder: word embedding, contextual Bi-RNN, query matching,
//! sentence-vector extraction and word/sentence fusion.
//!
//! The context is one connected token sequence. Evidence-candidate sentences
//! are marked by inclusive word-index boundaries; tokens outside every
//! boundary (paragraph titles, sentences dropped by truncation) still flow
//! through the word-level layers but never become extraction candidates and
//! get a zero sentence-half in the fused output.

use crate::error::{QfeError, Result};
use crate::layers::{
    BiAttentionParams, BiRnnParams, CharCnnParams, LinearParams, SelfAttentionParams,
};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tensor::{Tape, TensorId};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// One tokenized QA instance, numeric ids only.
#[derive(Debug, Clone)]
pub struct TokenizedInput {
    pub context_words: Vec<usize>,
    /// Character ids per context token; parallel to `context_words`.
    pub context_chars: Vec<Vec<usize>>,
    pub query_words: Vec<usize>,
    pub query_chars: Vec<Vec<usize>>,
    /// Inclusive (first, last) word indices of each candidate sentence,
    /// ordered and non-overlapping.
    pub boundaries: Vec<(usize, usize)>,
    /// Sentence index for each context token, `None` outside all candidates.
    pub token_sentence: Vec<Option<usize>>,
}

impl TokenizedInput {
    pub fn l_w(&self) -> usize {
        self.context_words.len()
    }

    pub fn m_w(&self) -> usize {
        self.query_words.len()
    }

    pub fn l_s(&self) -> usize {
        self.boundaries.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_words.is_empty() {
            return Err(QfeError::Data("empty context token list".into()));
        }
        if self.query_words.is_empty() {
            return Err(QfeError::Data("empty query token list".into()));
        }
        if self.context_chars.len() != self.context_words.len()
            || self.query_chars.len() != self.query_words.len()
        {
            return Err(QfeError::Data("char sequences out of step with words".into()));
        }
        if self.token_sentence.len() != self.context_words.len() {
            return Err(QfeError::Data("token-to-sentence map length mismatch".into()));
        }
        let l_w = self.l_w();
        let mut prev_end: Option<usize> = None;
        for (i, &(j1, j2)) in self.boundaries.iter().enumerate() {
            if j1 > j2 || j2 >= l_w {
                return Err(QfeError::Data(format!(
                    "sentence {i}: boundary ({j1}, {j2}) invalid for {l_w} tokens"
                )));
            }
            if let Some(pe) = prev_end {
                if j1 <= pe {
                    return Err(QfeError::Data(format!(
                        "sentence {i}: boundary ({j1}, {j2}) overlaps or disorders previous end {pe}"
                    )));
                }
            }
            prev_end = Some(j2);
            for j in j1..=j2 {
                if self.token_sentence[j] != Some(i) {
                    return Err(QfeError::Data(format!(
                        "token {j} inside sentence {i} is not mapped to it"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Tape handles for every stage of the pipeline.
pub struct EncodedContext {
    pub c1: TensorId,
    pub q1: TensorId,
    pub c2: TensorId,
    pub q2: TensorId,
    pub c3: TensorId,
    pub c4: TensorId,
    pub c4_fwd: TensorId,
    pub c4_bwd: TensorId,
    /// (l_s, 2*d_c) sentence vectors.
    pub x: TensorId,
    /// (l_w, 3*d_c) fused word+sentence vectors.
    pub c5: TensorId,
    pub l_w: usize,
    pub m_w: usize,
    pub l_s: usize,
}

/// Dropout configuration for a training-mode forward pass; absent means
/// evaluation mode (identity).
pub struct DropoutCtx<'a> {
    pub keep_ratio: f64,
    pub rng: &'a mut ChaCha12Rng,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub word_emb: ParamId,
    pub char_cnn: CharCnnParams,
    pub ctx_rnn: BiRnnParams,
    pub bi_att: BiAttentionParams,
    pub match_proj: LinearParams,
    pub match_rnn: BiRnnParams,
    pub self_att: SelfAttentionParams,
    pub ev_rnn: BiRnnParams,
    pub vocab_size: usize,
    pub word_dim: usize,
    pub d_c: usize,
}

impl EncoderParams {
    /// `d_w = word_dim + char channels`; `d_c` must be even (the matching
    /// Bi-RNN runs at d_c/2 per direction so the matched output stays d_c
    /// wide).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamSet,
        vocab_size: usize,
        n_chars: usize,
        word_dim: usize,
        char_dim: usize,
        char_channels: usize,
        d_c: usize,
        rng: &mut R,
    ) -> Self {
        assert!(d_c >= 2 && d_c % 2 == 0, "d_c must be even and >= 2, got {d_c}");
        let word_emb = ps.add_xavier_embedding("embed.word", vocab_size, word_dim, rng);
        let char_cnn = CharCnnParams::new(ps, "embed.char", n_chars, char_dim, char_channels, 5, 0, rng);
        let d_w = word_dim + char_channels;
        let ctx_rnn = BiRnnParams::new(ps, "ctx_rnn", d_w, d_c, rng);
        let bi_att = BiAttentionParams::new(ps, "match.bi_att", 2 * d_c, rng);
        let match_proj = LinearParams::new(ps, "match.proj", 8 * d_c, d_c, rng);
        let match_rnn = BiRnnParams::new(ps, "match.rnn", d_c, d_c / 2, rng);
        let self_att = SelfAttentionParams::new(ps, "match.self_att", d_c, rng);
        let ev_rnn = BiRnnParams::new(ps, "evidence.rnn", d_c, d_c, rng);
        EncoderParams {
            word_emb,
            char_cnn,
            ctx_rnn,
            bi_att,
            match_proj,
            match_rnn,
            self_att,
            ev_rnn,
            vocab_size,
            word_dim,
            d_c,
        }
    }

    pub fn d_w(&self) -> usize {
        self.word_dim + self.char_cnn.channels
    }

    /// Word-vector sequence: each row is `[word embedding; char-CNN vector]`.
    /// Char vectors are computed once per distinct word id within the call.
    pub fn embed(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        words: &[usize],
        chars: &[Vec<usize>],
    ) -> Result<TensorId> {
        if words.is_empty() {
            return Err(QfeError::Data("embed: empty token list".into()));
        }
        let word_part = tape.embed(bp.id(self.word_emb), words);
        let mut memo: HashMap<usize, TensorId> = HashMap::new();
        let mut char_rows = Vec::with_capacity(words.len());
        for (w, cs) in words.iter().zip(chars.iter()) {
            let id = match memo.get(w) {
                Some(&id) => id,
                None => {
                    let id = self.char_cnn.word_vector(tape, bp, cs);
                    memo.insert(*w, id);
                    id
                }
            };
            char_rows.push(id);
        }
        let char_part = tape.stack_rows(&char_rows);
        Ok(tape.concat(&[word_part, char_part], 1))
    }

    /// Contextual encoding; context and query share the same Bi-RNN.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        c1: TensorId,
        q1: TensorId,
    ) -> (TensorId, TensorId) {
        let c2 = self.ctx_rnn.run(tape, bp, c1).cat;
        let q2 = self.ctx_rnn.run(tape, bp, q1).cat;
        (c2, q2)
    }

    /// Matching layer: bi-attention fusion, projection to d_c, Bi-RNN,
    /// residual self-attention.
    pub fn match_layer(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        c2: TensorId,
        q2: TensorId,
    ) -> TensorId {
        let fused = self.bi_att.run(tape, bp, c2, q2).fused;
        let proj = self.match_proj.apply_mat(tape, bp, fused);
        let rnn = self.match_rnn.run(tape, bp, proj).cat;
        self.self_att.run(tape, bp, rnn).out
    }

    /// Evidence Bi-RNN over C3 plus per-sentence vectors
    /// x_i = [forward state at the sentence end; backward state at its start].
    pub fn sentence_vectors(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        c3: TensorId,
        boundaries: &[(usize, usize)],
    ) -> Result<SentenceVectors> {
        let l_w = tape.shape(c3)[0];
        if boundaries.is_empty() {
            return Err(QfeError::Data("sentence_vectors: no sentence boundaries".into()));
        }
        for &(j1, j2) in boundaries {
            if j1 > j2 || j2 >= l_w {
                return Err(QfeError::Data(format!(
                    "sentence_vectors: boundary ({j1}, {j2}) out of range for {l_w} tokens"
                )));
            }
        }
        let out = self.ev_rnn.run(tape, bp, c3);
        let ends: Vec<usize> = boundaries.iter().map(|&(_, j2)| j2).collect();
        let starts: Vec<usize> = boundaries.iter().map(|&(j1, _)| j1).collect();
        let fwd_at_end = tape.gather_rows(out.fwd, &ends);
        let bwd_at_start = tape.gather_rows(out.bwd, &starts);
        let x = tape.concat(&[fwd_at_end, bwd_at_start], 1);
        Ok(SentenceVectors { c4: out.cat, c4_fwd: out.fwd, c4_bwd: out.bwd, x })
    }

    /// c5[j] = [c3[j]; x[i(j)]]; tokens outside every sentence get zeros for
    /// the sentence half.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        c3: TensorId,
        x: TensorId,
        token_sentence: &[Option<usize>],
    ) -> Result<TensorId> {
        let l_w = tape.shape(c3)[0];
        let l_s = tape.shape(x)[0];
        let width = tape.shape(x)[1];
        if token_sentence.len() != l_w {
            return Err(QfeError::Data(format!(
                "fuse: map covers {} tokens but context has {}",
                token_sentence.len(),
                l_w
            )));
        }
        // Row l_s of the extended matrix is a zero fallback for unmapped tokens.
        let zero = tape.leaf(vec![0.0; width], vec![1, width], false);
        let extended = tape.concat(&[x, zero], 0);
        let mut idx = Vec::with_capacity(l_w);
        for (j, s) in token_sentence.iter().enumerate() {
            match s {
                Some(i) if *i < l_s => idx.push(*i),
                Some(i) => {
                    return Err(QfeError::Data(format!(
                        "fuse: token {j} mapped to sentence {i} but only {l_s} sentences exist"
                    )))
                }
                None => idx.push(l_s),
            }
        }
        let gathered = tape.gather_rows(extended, &idx);
        Ok(tape.concat(&[c3, gathered], 1))
    }

    /// Full pipeline over one tokenized input. `dropout` applies inverted
    /// dropout to the word-vector sequences (training mode only).
    pub fn run(
        &self,
        tape: &mut Tape,
        bp: &BoundParams,
        input: &TokenizedInput,
        mut dropout: Option<DropoutCtx>,
    ) -> Result<EncodedContext> {
        input.validate()?;
        let mut c1 = self.embed(tape, bp, &input.context_words, &input.context_chars)?;
        let mut q1 = self.embed(tape, bp, &input.query_words, &input.query_chars)?;
        if let Some(ctx) = dropout.as_mut() {
            c1 = tape.dropout(c1, ctx.keep_ratio, ctx.rng);
            q1 = tape.dropout(q1, ctx.keep_ratio, ctx.rng);
        }
        let (c2, q2) = self.encode(tape, bp, c1, q1);
        let c3 = self.match_layer(tape, bp, c2, q2);
        let sv = self.sentence_vectors(tape, bp, c3, &input.boundaries)?;
        let c5 = self.fuse(tape, c3, sv.x, &input.token_sentence)?;
        Ok(EncodedContext {
            c1,
            q1,
            c2,
            q2,
            c3,
            c4: sv.c4,
            c4_fwd: sv.c4_fwd,
            c4_bwd: sv.c4_bwd,
            x: sv.x,
            c5,
            l_w: input.l_w(),
            m_w: input.m_w(),
            l_s: input.l_s(),
        })
    }
}

pub struct SentenceVectors {
    pub c4: TensorId,
    pub c4_fwd: TensorId,
    pub c4_bwd: TensorId,
    pub x: TensorId,
}

/// Truncation plan for a context of `l_w` tokens clipped to `limit` words.
/// Tokens past the limit are cut; a sentence cut mid-way is dropped from the
/// candidate list entirely so evidence candidates are always whole sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncatePlan {
    /// Number of leading tokens to keep.
    pub keep_tokens: usize,
    /// Boundaries of sentences that survived, unchanged indices.
    pub boundaries: Vec<(usize, usize)>,
    /// Original indices of sentences dropped by the cut.
    pub dropped_sentences: Vec<usize>,
}

pub fn truncate(l_w: usize, boundaries: &[(usize, usize)], limit: usize) -> TruncatePlan {
    assert!(limit > 0, "truncate: limit must be positive");
    let keep_tokens = l_w.min(limit);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (i, &(j1, j2)) in boundaries.iter().enumerate() {
        if j2 < keep_tokens {
            kept.push((j1, j2));
        } else {
            dropped.push(i);
        }
    }
    TruncatePlan { keep_tokens, boundaries: kept, dropped_sentences: dropped }
}
