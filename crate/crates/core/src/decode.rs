//! Lexicon-constrained decoding and an additive-smoothing n-gram model.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

use crate::evalkit::levenshtein_chars;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("lexicon is empty")]
    EmptyLexicon,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("n-gram order must be ≥ 1")]
    BadOrder,
    #[error("smoothing δ must be positive and finite, got {0}")]
    BadSmoothing(f64),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Closed word list. Words are kept in first-seen order without duplicates,
/// and bucketed by character length for pruned search.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    words: Vec<String>,
    chars: Vec<Vec<char>>,
    members: HashSet<String>,
    buckets: BTreeMap<usize, Vec<usize>>,
}

impl Lexicon {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lex = Self::default();
        for w in words {
            let w: String = w.into();
            if lex.members.contains(&w) {
                continue;
            }
            let chars: Vec<char> = w.chars().collect();
            lex.buckets
                .entry(chars.len())
                .or_default()
                .push(lex.words.len());
            lex.members.insert(w.clone());
            lex.words.push(w);
            lex.chars.push(chars);
        }
        for ids in lex.buckets.values_mut() {
            let words = &lex.words;
            ids.sort_by(|&a, &b| words[a].cmp(&words[b]));
        }
        lex
    }

    /// One word per line; blank lines are skipped and trailing `\r` trimmed.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, DecodeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DecodeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.is_empty()),
        ))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, w: &str) -> bool {
        self.members.contains(w)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Ordering used to pick among equally distant words: shorter first, then
/// lexicographic.
fn better(d: usize, w: &str, wlen: usize, best: &(usize, usize, &str)) -> bool {
    (d, wlen, w) < *best
}

/// Reference nearest-word search by scanning every entry.
pub fn nearest_word_linear(pred: &str, lex: &Lexicon) -> Result<(String, usize), DecodeError> {
    let p: Vec<char> = pred.chars().collect();
    let mut best: Option<(usize, usize, &str)> = None;
    for (w, c) in lex.words.iter().zip(&lex.chars) {
        let d = levenshtein_chars(&p, c);
        if best.is_none_or(|b| better(d, w, c.len(), &b)) {
            best = Some((d, c.len(), w));
        }
    }
    best.map(|(d, _, w)| (w.to_string(), d))
        .ok_or(DecodeError::EmptyLexicon)
}

/// Nearest lexicon word by edit distance; ties go to the shorter word, then
/// the lexicographically smaller one. Buckets whose length difference alone
/// exceeds the best distance so far are skipped.
pub fn nearest_word(pred: &str, lex: &Lexicon) -> Result<(String, usize), DecodeError> {
    if lex.is_empty() {
        return Err(DecodeError::EmptyLexicon);
    }
    if lex.contains(pred) {
        return Ok((pred.to_string(), 0));
    }
    let p: Vec<char> = pred.chars().collect();
    let l = p.len();
    let max_len = *lex.buckets.keys().next_back().expect("nonempty");
    let mut best: Option<(usize, usize, &str)> = None;
    let mut row_a = Vec::new();
    let mut row_b = Vec::new();
    for delta in 0.. {
        if best.is_some_and(|b| delta > b.0) || (delta > l && l + delta > max_len) {
            break;
        }
        let mut lens = vec![];
        if delta <= l {
            lens.push(l - delta);
        }
        if delta > 0 {
            lens.push(l + delta);
        }
        for len in lens {
            let Some(ids) = lex.buckets.get(&len) else {
                continue;
            };
            for &i in ids {
                let limit = best.map_or(usize::MAX, |b| b.0);
                if let Some(d) = bounded_distance(&p, &lex.chars[i], limit, &mut row_a, &mut row_b)
                {
                    let w = lex.words[i].as_str();
                    if best.is_none_or(|b| better(d, w, len, &b)) {
                        best = Some((d, len, w));
                    }
                }
            }
        }
    }
    let (d, _, w) = best.expect("nonempty lexicon yields a candidate");
    Ok((w.to_string(), d))
}

/// Edit distance, or `None` once every cell of a DP row exceeds `limit`.
fn bounded_distance(
    a: &[char],
    b: &[char],
    limit: usize,
    prev: &mut Vec<usize>,
    cur: &mut Vec<usize>,
) -> Option<usize> {
    prev.clear();
    prev.extend(0..=b.len());
    cur.clear();
    cur.resize(b.len() + 1, 0);
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        let mut row_min = cur[0];
        for (j, cb) in b.iter().enumerate() {
            let v = (prev[j] + usize::from(ca != cb))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
            cur[j + 1] = v;
            row_min = row_min.min(v);
        }
        if row_min > limit {
            return None;
        }
        std::mem::swap(prev, cur);
    }
    let d = prev[b.len()];
    (d <= limit).then_some(d)
}

/// Snaps every prediction to its nearest lexicon word.
pub fn decode_with_lexicon<S: AsRef<str>>(
    preds: &[S],
    lex: &Lexicon,
) -> Result<Vec<(String, usize)>, DecodeError> {
    preds
        .iter()
        .map(|p| nearest_word(p.as_ref(), lex))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OovReport {
    /// Distinct out-of-lexicon references in first-seen order.
    pub words: Vec<String>,
    pub count: usize,
    /// Per-occurrence rate over all references.
    pub rate: f64,
}

pub fn oov_report<S: AsRef<str>>(lex: &Lexicon, refs: &[S]) -> OovReport {
    let mut seen = HashSet::new();
    let mut words = Vec::new();
    let mut occurrences = 0;
    for r in refs {
        let r = r.as_ref();
        if !lex.contains(r) {
            occurrences += 1;
            if seen.insert(r.to_string()) {
                words.push(r.to_string());
            }
        }
    }
    OovReport {
        count: words.len(),
        words,
        rate: if refs.is_empty() {
            0.0
        } else {
            occurrences as f64 / refs.len() as f64
        },
    }
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Order-`n` token model with additive smoothing:
/// `P(w | ctx) = (count(ctx, w) + δ) / (count(ctx) + δ·V)`.
#[derive(Debug, Clone)]
pub struct NGramLM {
    n: usize,
    delta: f64,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    counts: HashMap<Vec<usize>, HashMap<usize, u64>>,
    totals: HashMap<Vec<usize>, u64>,
}

/// Trains on token sequences; contexts are the `n − 1` preceding tokens
/// inside each sequence (no boundary padding).
pub fn ngram_train<S: AsRef<str>>(
    corpus: &[Vec<S>],
    n: usize,
    delta: f64,
) -> Result<NGramLM, DecodeError> {
    if n == 0 {
        return Err(DecodeError::BadOrder);
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DecodeError::BadSmoothing(delta));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(DecodeError::EmptyCorpus);
    }
    let mut vocab: Vec<String> = corpus
        .iter()
        .flatten()
        .map(|t| t.as_ref().to_string())
        .collect();
    vocab.sort();
    vocab.dedup();
    vocab.retain(|t| t != UNKNOWN_TOKEN);
    vocab.push(UNKNOWN_TOKEN.to_string());
    let index: HashMap<String, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let mut counts: HashMap<Vec<usize>, HashMap<usize, u64>> = HashMap::new();
    let mut totals: HashMap<Vec<usize>, u64> = HashMap::new();
    for seq in corpus {
        let ids: Vec<usize> = seq.iter().map(|t| index[t.as_ref()]).collect();
        for end in (n - 1)..ids.len() {
            let ctx = ids[end + 1 - n..end].to_vec();
            *counts
                .entry(ctx.clone())
                .or_default()
                .entry(ids[end])
                .or_default() += 1;
            *totals.entry(ctx).or_default() += 1;
        }
    }
    Ok(NGramLM {
        n,
        delta,
        vocab,
        index,
        counts,
        totals,
    })
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.n
    }

    /// Vocabulary including the unknown token.
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn id(&self, t: &str) -> usize {
        self.index.get(t).copied().unwrap_or(self.vocab.len() - 1)
    }

    fn context_ids<S: AsRef<str>>(&self, context: &[S]) -> Option<Vec<usize>> {
        let k = self.n - 1;
        if context.len() < k {
            return None;
        }
        Some(
            context[context.len() - k..]
                .iter()
                .map(|t| self.id(t.as_ref()))
                .collect(),
        )
    }

    /// Smoothed probability of `next` after `context` (only its last `n − 1`
    /// tokens matter; a shorter or unseen context gives `1/V`).
    pub fn prob<S: AsRef<str>>(&self, context: &[S], next: &str) -> f64 {
        let v = self.vocab.len() as f64;
        let Some(ctx) = self.context_ids(context) else {
            return 1.0 / v;
        };
        let total = self.totals.get(&ctx).copied().unwrap_or(0) as f64;
        let c = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&self.id(next)))
            .copied()
            .unwrap_or(0) as f64;
        (c + self.delta) / (total + self.delta * v)
    }

    /// Full conditional distribution over the vocabulary.
    pub fn distribution<S: AsRef<str>>(&self, context: &[S]) -> Vec<(String, f64)> {
        self.vocab
            .iter()
            .map(|t| (t.clone(), self.prob(context, t)))
            .collect()
    }

    /// Contexts seen during training.
    pub fn contexts(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = self
            .totals
            .keys()
            .map(|c| c.iter().map(|&i| self.vocab[i].clone()).collect())
            .collect();
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_word_examples() {
        let lex = Lexicon::new(["cat", "car"]);
        assert_eq!(nearest_word("cat", &lex).unwrap(), ("cat".into(), 0));
        assert_eq!(nearest_word("cax", &lex).unwrap(), ("car".into(), 1));
        assert_eq!(
            nearest_word("zzzz", &Lexicon::new(["a"])).unwrap(),
            ("a".into(), 4)
        );
        assert!(nearest_word("x", &Lexicon::new(Vec::<String>::new())).is_err());
    }

    #[test]
    fn shorter_word_wins_ties() {
        let lex = Lexicon::new(["abcd", "ab"]);
        // "abc" is one edit from both
        assert_eq!(nearest_word("abc", &lex).unwrap(), ("ab".into(), 1));
        assert_eq!(nearest_word_linear("abc", &lex).unwrap(), ("ab".into(), 1));
    }

    #[test]
    fn oov_counts() {
        let lex = Lexicon::new(["a", "b", "c"]);
        let refs = ["a", "x", "b", "x", "c", "a", "b", "c", "a", "y"];
        let r = oov_report(&lex, &refs);
        assert_eq!(r.words, vec!["x", "y"]);
        assert_eq!(r.count, 2);
        assert!((r.rate - 0.3).abs() < 1e-15);
        assert_eq!(oov_report(&lex, &["a", "b"]).rate, 0.0);
    }

    #[test]
    fn bigram_hand_count() {
        let corpus = vec![vec!["a", "b", "a", "b"]];
        for delta in [0.1, 1.0] {
            let lm = ngram_train(&corpus, 2, delta).unwrap();
            let v = lm.vocab().len() as f64;
            assert_eq!(v, 3.0);
            let want = (2.0 + delta) / (2.0 + delta * v);
            assert!((lm.prob(&["a"], "b") - want).abs() < 1e-15);
            assert!((lm.prob(&["zzz"], "a") - 1.0 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn large_delta_is_near_uniform() {
        let lm = ngram_train(&[vec!["a", "a", "a", "b"]], 1, 1e6).unwrap();
        let v = lm.vocab().len() as f64;
        for (_, p) in lm.distribution::<&str>(&[]) {
            assert!((p - 1.0 / v).abs() < 1e-3);
        }
    }
}
