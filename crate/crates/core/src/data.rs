//! Tokenization, vocabulary, and batching for language modeling and
//! sequence classification.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;
const SPECIALS: [&str; 3] = [PAD, UNK, EOS];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot build a vocabulary from an empty token stream")]
    EmptyStream,
    #[error("corpus of {len} tokens too short for batch {batch} x unroll {unroll} (need {need})")]
    CorpusTooShort {
        len: usize,
        batch: usize,
        unroll: usize,
        need: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
        tokens.into_iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }
}

/// Keep the `max_size` most frequent non-special tokens.
///
/// Ties are broken lexicographically. Ids 0, 1, 2 are `<pad>`, `<unk>`,
/// `<eos>`; special tokens found in the stream map onto them.
pub fn build_vocab<'a>(tokens: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Vocab, DataError> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut seen = false;
    for t in tokens {
        seen = true;
        if !SPECIALS.contains(&t) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !seen {
        return Err(DataError::EmptyStream);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
        .collect();
    Ok(Vocab::from_tokens(tokens))
}

/// Whitespace tokens with `<eos>` after every non-blank line.
pub fn tokenize_lines(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for line in text.lines() {
        let before = out.len();
        out.extend(line.split_whitespace());
        if out.len() > before {
            out.push(EOS);
        }
    }
    out
}

pub fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One `label<TAB>text` document per line.
pub fn parse_labeled<'a>(text: &'a str, origin: &str) -> Result<Vec<(usize, Vec<&'a str>)>, DataError> {
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: "expected label<TAB>text".into(),
        })?;
        let label = label.trim().parse::<usize>().map_err(|e| DataError::Parse {
            path: origin.to_string(),
            line: n + 1,
            msg: format!("bad label {label:?}: {e}"),
        })?;
        docs.push((label, body.split_whitespace().collect()));
    }
    Ok(docs)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Next-token ids, `[batch × time]` row-major.
    Tokens(Vec<usize>),
    /// One class label per sequence.
    Labels(Vec<usize>),
}

/// Token ids `[batch × time]` (row-major) with targets and optional padding mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub time: usize,
    pub inputs: Vec<usize>,
    pub targets: Targets,
    /// `true` for real tokens; `None` means no padding.
    pub mask: Option<Vec<bool>>,
}

impl SequenceBatch {
    /// Ids of every sequence at time step `t`.
    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.batch).map(|b| self.inputs[b * self.time + t]).collect()
    }

    pub fn target_column(&self, t: usize) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Tokens(ids) => Some((0..self.batch).map(|b| ids[b * self.time + t]).collect()),
            Targets::Labels(_) => None,
        }
    }

    pub fn mask_column(&self, t: usize) -> Option<Vec<bool>> {
        self.mask
            .as_ref()
            .map(|m| (0..self.batch).map(|b| m[b * self.time + t]).collect())
    }

    pub fn max_id(&self) -> Option<usize> {
        self.inputs.iter().copied().max()
    }
}

/// Contiguous LM batches: the corpus is cut into `batch` streams and each
/// batch continues every stream where the previous one stopped.
#[derive(Clone, Debug)]
pub struct LmBatches<'a> {
    ids: &'a [usize],
    batch: usize,
    unroll: usize,
    stream_len: usize,
    next: usize,
    count: usize,
}

impl LmBatches<'_> {
    pub fn num_batches(&self) -> usize {
        self.count
    }
}

impl Iterator for LmBatches<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.next >= self.count {
            return None;
        }
        let start = self.next * self.unroll;
        self.next += 1;
        let mut inputs = Vec::with_capacity(self.batch * self.unroll);
        let mut targets = Vec::with_capacity(self.batch * self.unroll);
        for b in 0..self.batch {
            let base = b * self.stream_len + start;
            inputs.extend_from_slice(&self.ids[base..base + self.unroll]);
            targets.extend_from_slice(&self.ids[base + 1..base + 1 + self.unroll]);
        }
        Some(SequenceBatch {
            batch: self.batch,
            time: self.unroll,
            inputs,
            targets: Targets::Tokens(targets),
            mask: None,
        })
    }
}

pub fn lm_batches(ids: &[usize], batch: usize, unroll: usize) -> Result<LmBatches<'_>, DataError> {
    let need = batch * (unroll + 1);
    if batch == 0 || unroll == 0 || ids.len() < need {
        return Err(DataError::CorpusTooShort {
            len: ids.len(),
            batch,
            unroll,
            need,
        });
    }
    let stream_len = ids.len() / batch;
    Ok(LmBatches {
        ids,
        batch,
        unroll,
        stream_len,
        next: 0,
        count: (stream_len - 1) / unroll,
    })
}

/// Fixed length `len`: keep the last `len` tokens, left-pad shorter docs.
pub fn pad_or_cut(doc: &[usize], len: usize) -> (Vec<usize>, Vec<bool>) {
    if doc.len() >= len {
        (doc[doc.len() - len..].to_vec(), vec![true; len])
    } else {
        let pad = len - doc.len();
        let mut ids = vec![PAD_ID; pad];
        ids.extend_from_slice(doc);
        let mut mask = vec![false; pad];
        mask.extend(std::iter::repeat_n(true, doc.len()));
        (ids, mask)
    }
}

/// Labeled document: (class label, token ids).
pub type LabeledDoc = (usize, Vec<usize>);

pub fn classification_batch(docs: &[&LabeledDoc], len: usize) -> SequenceBatch {
    let mut inputs = Vec::with_capacity(docs.len() * len);
    let mut mask = Vec::with_capacity(docs.len() * len);
    let mut labels = Vec::with_capacity(docs.len());
    for (label, ids) in docs {
        let (ids, m) = pad_or_cut(ids, len);
        inputs.extend(ids);
        mask.extend(m);
        labels.push(*label);
    }
    SequenceBatch {
        batch: docs.len(),
        time: len,
        inputs,
        targets: Targets::Labels(labels),
        mask: Some(mask),
    }
}

/// `0, 1, …, period-1, 0, 1, …` of length `len`.
pub fn periodic_corpus(period: usize, len: usize) -> Vec<usize> {
    (0..len).map(|i| i % period).collect()
}

/// Documents whose label is the parity shared by all their token ids.
///
/// Ids are drawn from `1..vocab` so `<pad>` never appears as content.
pub fn parity_documents<R: Rng + ?Sized>(
    n: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut R,
) -> Vec<LabeledDoc> {
    assert!(vocab >= 3, "need at least one odd and one even non-pad id");
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2usize);
            let len = rng.random_range(min_len..=max_len);
            let ids = (0..len)
                .map(|_| loop {
                    let id = rng.random_range(1..vocab);
                    if id % 2 == label {
                        break id;
                    }
                })
                .collect();
            (label, ids)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_small() {
        let v = build_vocab("a b a".split(' '), 10).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 3);
        assert_eq!(v.id("b"), 4);
        assert_eq!(v.id("zzz"), UNK_ID);
        let v = build_vocab("a b a".split(' '), 1).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.contains("a") && !v.contains("b"));
    }

    #[test]
    fn vocab_ties_lexicographic() {
        let v = build_vocab("c b a".split(' '), 2).unwrap();
        assert_eq!(v.decode(&[3, 4]), vec!["a", "b"]);
    }

    #[test]
    fn vocab_specials_in_stream() {
        let v = build_vocab(["<unk>", "x", "<eos>"], 10).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<eos>"), EOS_ID);
    }

    #[test]
    fn vocab_empty_errors() {
        assert!(matches!(
            build_vocab(std::iter::empty(), 3),
            Err(DataError::EmptyStream)
        ));
    }

    #[test]
    fn lm_batches_example() {
        let ids: Vec<usize> = (0..10).collect();
        let mut it = lm_batches(&ids, 2, 2).unwrap();
        assert_eq!(it.num_batches(), 2);
        let b = it.next().unwrap();
        assert_eq!(b.inputs, vec![0, 1, 5, 6]);
        assert_eq!(b.targets, Targets::Tokens(vec![1, 2, 6, 7]));
        let b = it.next().unwrap();
        assert_eq!(b.inputs, vec![2, 3, 7, 8]);
        assert_eq!(b.targets, Targets::Tokens(vec![3, 4, 8, 9]));
        assert!(it.next().is_none());
    }

    #[test]
    fn lm_batches_single_pass() {
        let ids: Vec<usize> = (0..7).collect();
        let all: Vec<_> = lm_batches(&ids, 1, 6).unwrap().collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].inputs, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn lm_batches_too_short() {
        assert!(matches!(
            lm_batches(&[1, 2, 3], 2, 2),
            Err(DataError::CorpusTooShort { need: 6, .. })
        ));
    }

    #[test]
    fn pad_or_cut_examples() {
        assert_eq!(
            pad_or_cut(&[7, 8, 9], 5),
            (vec![0, 0, 7, 8, 9], vec![false, false, true, true, true])
        );
        assert_eq!(pad_or_cut(&[1, 2, 3, 4, 5, 6, 7], 5).0, vec![3, 4, 5, 6, 7]);
        let doc: Vec<usize> = (1..=500).collect();
        let (ids, mask) = pad_or_cut(&doc, 500);
        assert_eq!(ids, doc);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn tokenize_appends_eos() {
        assert_eq!(tokenize_lines("a b\n\n c \n"), vec!["a", "b", EOS, "c", EOS]);
    }

    #[test]
    fn labeled_parse() {
        let docs = parse_labeled("1\tgood movie\n0\tbad\n", "x").unwrap();
        assert_eq!(docs, vec![(1, vec!["good", "movie"]), (0, vec!["bad"])]);
        assert!(matches!(
            parse_labeled("nolabel here", "x"),
            Err(DataError::Parse { line: 1, .. })
        ));
    }
}
