//! Edit distance, CER/WER, classification metrics, ROC/AUC and bootstrap
//! confidence intervals.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("reference string is empty")]
    EmptyReference,
    #[error("{preds} predictions but {reals} references")]
    LengthMismatch { preds: usize, reals: usize },
    #[error("ROC needs at least one positive and one negative case")]
    SingleClass,
    #[error("{0} scores but {1} labels")]
    ScoreLabelMismatch(usize, usize),
    #[error("bootstrap needs at least 2 samples and 100 resamples (got {samples}, {resamples})")]
    TooSmall { samples: usize, resamples: usize },
    #[error("confidence level {0} must lie strictly between 0 and 1")]
    Confidence(f64),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("empty input")]
    Empty,
}

/// Unit-cost edit distance over Unicode code points.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_chars(&a, &b)
}

/// Edit distance over any comparable sequence, two-row DP.
pub fn levenshtein_chars<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `levenshtein(pred, real) / len(real)`.
pub fn cer(pred: &str, real: &str) -> Result<f64, EvalError> {
    let n = real.chars().count();
    if n == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(levenshtein(pred, real) as f64 / n as f64)
}

/// Corpus CER: total edit distance over total reference length.
pub fn corpus_cer(preds: &[String], reals: &[String]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), reals.len())?;
    let total: usize = reals.iter().map(|r| r.chars().count()).sum();
    if total == 0 {
        return Err(EvalError::EmptyReference);
    }
    let dist: usize = preds
        .iter()
        .zip(reals)
        .map(|(p, r)| levenshtein(p, r))
        .sum();
    Ok(dist as f64 / total as f64)
}

/// Fraction of positions whose prediction differs from the reference.
pub fn wer<S: AsRef<str>>(preds: &[S], reals: &[S]) -> Result<f64, EvalError> {
    check_lengths(preds.len(), reals.len())?;
    if reals.is_empty() {
        return Err(EvalError::Empty);
    }
    let wrong = preds
        .iter()
        .zip(reals)
        .filter(|(p, r)| p.as_ref() != r.as_ref())
        .count();
    Ok(wrong as f64 / reals.len() as f64)
}

fn check_lengths(preds: usize, reals: usize) -> Result<(), EvalError> {
    if preds != reals {
        return Err(EvalError::LengthMismatch { preds, reals });
    }
    Ok(())
}

/// Counts `c[i][j]` of cases with true category `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    categories: Vec<String>,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(categories: Vec<String>) -> Self {
        let n = categories.len();
        Self {
            categories,
            counts: vec![vec![0; n]; n],
        }
    }

    /// Builds a matrix over the sorted union of labels seen in both lists.
    pub fn from_pairs<S: AsRef<str>>(truth: &[S], predicted: &[S]) -> Result<Self, EvalError> {
        check_lengths(predicted.len(), truth.len())?;
        let mut cats: Vec<String> = truth
            .iter()
            .chain(predicted)
            .map(|s| s.as_ref().to_string())
            .collect();
        cats.sort();
        cats.dedup();
        let mut m = Self::new(cats);
        for (t, p) in truth.iter().zip(predicted) {
            m.record(t.as_ref(), p.as_ref())?;
        }
        Ok(m)
    }

    fn index(&self, c: &str) -> Result<usize, EvalError> {
        self.categories
            .iter()
            .position(|x| x == c)
            .ok_or_else(|| EvalError::UnknownCategory(c.to_string()))
    }

    pub fn record(&mut self, truth: &str, predicted: &str) -> Result<(), EvalError> {
        let (i, j) = (self.index(truth)?, self.index(predicted)?);
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i][j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.categories.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.categories {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (c, row) in self.categories.iter().zip(&self.counts) {
            out.push_str(&csv_field(c));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-category scores; `None` where the denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_category: Vec<CategoryMetrics>,
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationReport, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let per_category = cm
        .categories
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let tp = cm.count(i, i) as f64;
            let ratio = |den: u64| (den > 0).then(|| tp / den as f64);
            let recall = ratio(cm.row_sum(i));
            let precision = ratio(cm.col_sum(i));
            let f1 = match (recall, precision) {
                (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            CategoryMetrics {
                category: c.clone(),
                recall,
                precision,
                f1,
            }
        })
        .collect();
    Ok(ClassificationReport {
        accuracy: cm.correct() as f64 / total as f64,
        per_category,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve from `(0,0)` to `(1,1)` and its trapezoidal area. Tied scores
/// form a single threshold step.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::ScoreLabelMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint {
            threshold: s,
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
        });
    }
    let auc = curve
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((curve, auc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapCI {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    pub resamples: usize,
}

/// Percentile bootstrap of the mean of `values`.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    rng: &mut R,
) -> Result<BootstrapCI, EvalError> {
    bootstrap_with(values.len(), resamples, confidence, rng, |idx| {
        idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
    })
}

/// Percentile bootstrap of an arbitrary statistic over sample indices.
pub fn bootstrap_with<R: Rng + ?Sized>(
    n: usize,
    resamples: usize,
    confidence: f64,
    rng: &mut R,
    stat: impl Fn(&[usize]) -> f64,
) -> Result<BootstrapCI, EvalError> {
    if n < 2 || resamples < 100 {
        return Err(EvalError::TooSmall {
            samples: n,
            resamples,
        });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::Confidence(confidence));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = stat(&all);
    let mut idx = vec![0; n];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in idx.iter_mut() {
                *slot = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let lower = percentile(&stats, alpha).min(point);
    let upper = percentile(&stats, 1.0 - alpha).max(point);
    Ok(BootstrapCI {
        point,
        lower,
        upper,
        confidence,
        resamples,
    })
}

/// Linear-interpolated quantile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edit_distance_examples() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("flaw", "lawn"), 2);
        assert_eq!(levenshtein("né", "ne"), 1);
    }

    #[test]
    fn cer_and_wer_examples() {
        assert_eq!(cer("Hello", "Hello").unwrap(), 0.0);
        assert!((cer("Hxllo", "Hello").unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(cer("", "Hello").unwrap(), 1.0);
        assert_eq!(cer("x", ""), Err(EvalError::EmptyReference));
        let r = ["a", "b", "c", "d"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_eq!(wer(&["a", "b", "c", "x"], &r).unwrap(), 0.25);
        assert_eq!(wer(&["w", "x", "y", "z"], &r).unwrap(), 1.0);
        assert!(wer(&["a"], &r).is_err());
    }

    #[test]
    fn two_class_metrics() {
        let mut cm = ConfusionMatrix::new(vec!["p".into(), "n".into()]);
        for (t, p, k) in [("p", "p", 8), ("p", "n", 2), ("n", "p", 4), ("n", "n", 6)] {
            for _ in 0..k {
                cm.record(t, p).unwrap();
            }
        }
        let r = classification_metrics(&cm).unwrap();
        let p = &r.per_category[0];
        assert!((p.recall.unwrap() - 0.8).abs() < 1e-15);
        assert!((p.precision.unwrap() - 8.0 / 12.0).abs() < 1e-15);
        let want = 2.0 * (0.8 * 2.0 / 3.0) / (0.8 + 2.0 / 3.0);
        assert!((p.f1.unwrap() - want).abs() < 1e-15);
        assert!((r.accuracy - 0.7).abs() < 1e-15);
    }

    #[test]
    fn absent_category_reports_none() {
        let cm = ConfusionMatrix::from_pairs(&["a", "a"], &["a", "b"]).unwrap();
        let r = classification_metrics(&cm).unwrap();
        assert_eq!(r.per_category[1].recall, None);
        assert_eq!(r.per_category[1].precision, Some(0.0));
    }

    #[test]
    fn auc_examples() {
        let labels = [true, true, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap().1, 1.0);
        assert_eq!(roc_auc(&[0.5; 4], &labels).unwrap().1, 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap().1, 0.0);
        assert_eq!(
            roc_auc(&[0.5, 0.5], &[true, true]),
            Err(EvalError::SingleClass)
        );
    }

    #[test]
    fn bootstrap_constant_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ci = bootstrap_ci(&[0.5; 10], 200, 0.95, &mut rng).unwrap();
        assert_eq!((ci.lower, ci.point, ci.upper), (0.5, 0.5, 0.5));
        let v: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let a = bootstrap_ci(&v, 300, 0.9, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = bootstrap_ci(&v, 300, 0.9, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(bootstrap_ci(&[1.0], 200, 0.95, &mut rng).is_err());
        assert!(bootstrap_ci(&v, 99, 0.95, &mut rng).is_err());
    }
}
