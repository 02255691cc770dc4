//! Dataset schema, tokenization, vocabulary, loading and class balancing.
//!
//! Datasets are UTF-8 JSON Lines, one sample per line. Paragraph titles are
//! part of the connected context text but are not extraction candidates, so
//! evidence ids are always `[paragraph_index, sentence_index]` pairs into the
//! `sentences` arrays.

use crate::answer::{AnswerTarget, TaskMode, RC_SPAN_CLASS};
use crate::encoder::{truncate, TokenizedInput};
use crate::error::{QfeError, Result};
use crate::rng::rng_at;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Yes,
    No,
    Span,
    Supports,
    Refutes,
    Nei,
}

impl AnswerKind {
    pub fn class_index(self) -> usize {
        match self {
            AnswerKind::Yes | AnswerKind::Supports => 0,
            AnswerKind::No | AnswerKind::Refutes => 1,
            AnswerKind::Span | AnswerKind::Nei => 2,
        }
    }

    pub fn from_class(mode: TaskMode, class: usize) -> Self {
        match (mode, class) {
            (TaskMode::Rc, 0) => AnswerKind::Yes,
            (TaskMode::Rc, 1) => AnswerKind::No,
            (TaskMode::Rc, _) => AnswerKind::Span,
            (TaskMode::Rte, 0) => AnswerKind::Supports,
            (TaskMode::Rte, 1) => AnswerKind::Refutes,
            (TaskMode::Rte, _) => AnswerKind::Nei,
        }
    }

    pub fn matches_mode(self, mode: TaskMode) -> bool {
        matches!(
            (mode, self),
            (TaskMode::Rc, AnswerKind::Yes | AnswerKind::No | AnswerKind::Span)
                | (TaskMode::Rte, AnswerKind::Supports | AnswerKind::Refutes | AnswerKind::Nei)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningKind {
    Bridge,
    Comparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub context: Vec<Paragraph>,
    pub answer_type: AnswerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    /// Gold evidence as (paragraph_index, sentence_index) pairs.
    pub evidence: Vec<(usize, usize)>,
    pub mode: TaskMode,
    /// Gold span as global token indices into the tokenized context, when
    /// known; otherwise derived from the first occurrence of `answer_text`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<ReasoningKind>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: String| {
            Err(QfeError::Data(format!("sample {}: {field}: {why}", self.id)))
        };
        if !self.answer_type.matches_mode(self.mode) {
            return fail("answer_type", format!("{:?} invalid in {:?} mode", self.answer_type, self.mode));
        }
        for &(p, s) in &self.evidence {
            match self.context.get(p) {
                None => return fail("evidence", format!("paragraph {p} out of range")),
                Some(par) if s >= par.sentences.len() => {
                    return fail("evidence", format!("sentence ({p}, {s}) out of range"))
                }
                _ => {}
            }
        }
        match self.mode {
            TaskMode::Rc => {
                if self.evidence.len() < 2 {
                    return fail("evidence", "RC samples need at least 2 evidence sentences".into());
                }
                if self.answer_type == AnswerKind::Span && self.answer_text.as_deref().unwrap_or("").is_empty() {
                    return fail("answer_text", "span answers need answer text".into());
                }
            }
            TaskMode::Rte => {
                if self.answer_type != AnswerKind::Nei && self.evidence.is_empty() {
                    return fail("evidence", "supports/refutes needs at least 1 evidence sentence".into());
                }
            }
        }
        if let Some((s, e)) = self.answer_span {
            if s > e {
                return fail("answer_span", format!("start {s} > end {e}"));
            }
        }
        Ok(())
    }
}

/// Lowercase, split on whitespace, split punctuation into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token-to-id bijection with reserved pad and unknown ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Build from token iterables: frequency-ranked, ties broken
    /// lexicographically, truncated to `max_size` when given.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I, max_size: Option<usize>) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut toks = vec!["<pad>".to_string(), "<unk>".to_string()];
        for (t, _) in ranked {
            if let Some(cap) = max_size {
                if toks.len() >= cap {
                    break;
                }
            }
            toks.push(t.to_string());
        }
        Self::from_tokens(toks)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Character-level vocabulary for the char CNN.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: BTreeMap<char, usize>,
}

impl CharVocab {
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let mut set: std::collections::BTreeSet<char> = std::collections::BTreeSet::new();
        for t in tokens {
            set.extend(t.chars());
        }
        let mut chars = vec!['\u{0}', '\u{1}']; // pad, unk placeholders
        chars.extend(set);
        let index = chars.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        CharVocab { chars, index }
    }

    pub fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        CharVocab { chars, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.chars.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    }

    pub fn id(&self, c: char) -> usize {
        *self.index.get(&c).unwrap_or(&UNK_ID)
    }

    pub fn word_ids(&self, token: &str) -> Vec<usize> {
        token.chars().map(|c| self.id(c)).collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

pub fn load<P: AsRef<Path>>(path: P, mode: TaskMode) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    let mut bad: Vec<String> = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| {
            QfeError::Data(format!("line {}: malformed record: {e}", ln + 1))
        })?;
        if sample.mode != mode {
            bad.push(format!("{} (mode)", sample.id));
            continue;
        }
        match sample.validate() {
            Ok(()) => samples.push(sample),
            Err(e) => bad.push(format!("{} ({e})", sample.id)),
        }
    }
    if !bad.is_empty() {
        return Err(QfeError::Data(format!("rejected {} samples: {}", bad.len(), bad.join("; "))));
    }
    Ok(samples)
}

pub fn save<P: AsRef<Path>>(path: P, samples: &[Sample]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for s in samples {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Equalize answer-type class counts by duplicating uniformly chosen samples
/// of the minority classes; deterministic per seed.
pub fn balance_classes(samples: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.answer_type.class_index()).or_default().push(i);
    }
    if by_class.values().any(Vec::is_empty) || by_class.is_empty() {
        return Err(QfeError::Data("balance_classes: empty class".into()));
    }
    let target = by_class.values().map(Vec::len).max().unwrap();
    let mut out: Vec<Sample> = samples.to_vec();
    let mut rng = rng_at(seed, &[0xba1a]);
    for (class, members) in &by_class {
        let missing = target - members.len();
        for k in 0..missing {
            let pick = members[rng.gen_range(0..members.len())];
            let _ = (class, k);
            out.push(samples[pick].clone());
        }
    }
    Ok(out)
}

/// A sample turned into model inputs. Candidate sentence ids are global
/// indices into `sentence_ids`, which maps back to (paragraph, sentence)
/// pairs for file formats and metrics.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub mode: TaskMode,
    pub input: TokenizedInput,
    /// Context tokens kept after truncation.
    pub tokens: Vec<String>,
    /// Candidate index -> (paragraph, sentence).
    pub sentence_ids: Vec<(usize, usize)>,
    /// Gold evidence as global candidate indices (reachable ones).
    pub gold_evidence: Vec<usize>,
    /// Gold pairs dropped by truncation.
    pub unreachable_gold: Vec<(usize, usize)>,
    /// All gold pairs as stated in the file (for metrics).
    pub gold_pairs: Vec<(usize, usize)>,
    pub target: AnswerTarget,
    pub answer_kind: AnswerKind,
    pub answer_text: Option<String>,
    pub reasoning: Option<ReasoningKind>,
}

/// Tokenize, truncate and index one sample.
pub fn prepare(
    sample: &Sample,
    vocab: &Vocabulary,
    chars: &CharVocab,
    truncation_limit: usize,
) -> Result<PreparedSample> {
    sample.validate()?;
    let mut ctx_tokens: Vec<String> = Vec::new();
    let mut boundaries: Vec<(usize, usize)> = Vec::new();
    let mut sentence_ids: Vec<(usize, usize)> = Vec::new();
    for (p, par) in sample.context.iter().enumerate() {
        ctx_tokens.extend(tokenize(&par.title));
        for (s, sent) in par.sentences.iter().enumerate() {
            let toks = tokenize(sent);
            if toks.is_empty() {
                return Err(QfeError::Data(format!(
                    "sample {}: context: empty sentence ({p}, {s})",
                    sample.id
                )));
            }
            let j1 = ctx_tokens.len();
            ctx_tokens.extend(toks);
            boundaries.push((j1, ctx_tokens.len() - 1));
            sentence_ids.push((p, s));
        }
    }
    if ctx_tokens.is_empty() {
        return Err(QfeError::Data(format!("sample {}: context: no tokens", sample.id)));
    }
    let plan = truncate(ctx_tokens.len(), &boundaries, truncation_limit);
    ctx_tokens.truncate(plan.keep_tokens);
    let kept = plan.boundaries.len();
    let dropped_ids: Vec<(usize, usize)> = sentence_ids.split_off(kept);
    let boundaries = plan.boundaries;

    let mut gold_evidence = Vec::new();
    let mut unreachable = Vec::new();
    for &(p, s) in &sample.evidence {
        match sentence_ids.iter().position(|&pr| pr == (p, s)) {
            Some(g) => gold_evidence.push(g),
            None => {
                debug_assert!(dropped_ids.contains(&(p, s)));
                unreachable.push((p, s));
            }
        }
    }
    gold_evidence.sort_unstable();

    let mut token_sentence = vec![None; ctx_tokens.len()];
    for (i, &(j1, j2)) in boundaries.iter().enumerate() {
        for t in token_sentence.iter_mut().take(j2 + 1).skip(j1) {
            *t = Some(i);
        }
    }

    let query_tokens = tokenize(&sample.question);
    if query_tokens.is_empty() {
        return Err(QfeError::Data(format!("sample {}: question: no tokens", sample.id)));
    }

    let class = sample.answer_type.class_index();
    let span = if sample.mode == TaskMode::Rc && class == RC_SPAN_CLASS {
        let located = match sample.answer_span {
            Some((s, e)) => {
                if e < ctx_tokens.len() {
                    Some((s, e))
                } else {
                    None // answer truncated away
                }
            }
            None => {
                let answer_toks = tokenize(sample.answer_text.as_deref().unwrap_or(""));
                find_subsequence(&ctx_tokens, &answer_toks)
            }
        };
        match located {
            Some(se) => Some(se),
            None => {
                return Err(QfeError::Data(format!(
                    "sample {}: answer_text: span not present in (possibly truncated) context",
                    sample.id
                )))
            }
        }
    } else {
        None
    };

    let input = TokenizedInput {
        context_words: ctx_tokens.iter().map(|t| vocab.id(t)).collect(),
        context_chars: ctx_tokens.iter().map(|t| chars.word_ids(t)).collect(),
        query_words: query_tokens.iter().map(|t| vocab.id(t)).collect(),
        query_chars: query_tokens.iter().map(|t| chars.word_ids(t)).collect(),
        boundaries,
        token_sentence,
    };
    input.validate()?;

    Ok(PreparedSample {
        id: sample.id.clone(),
        mode: sample.mode,
        input,
        tokens: ctx_tokens,
        sentence_ids,
        gold_evidence,
        unreachable_gold: unreachable,
        gold_pairs: sample.evidence.clone(),
        target: AnswerTarget { class, span },
        answer_kind: sample.answer_type,
        answer_text: sample.answer_text.clone(),
        reasoning: sample.reasoning,
    })
}

fn find_subsequence(haystack: &[String], needle: &[String]) -> Option<(usize, usize)> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&i| haystack[i..i + needle.len()] == *needle)
        .map(|i| (i, i + needle.len() - 1))
}
