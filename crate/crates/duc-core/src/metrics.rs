//! Repetition metrics: weighted n-gram repeat score, Self-BLEU (1-gram
//! precision), and normalized information entropy, plus the metric-curve
//! experiment that compares them across the repetition dataset.
//!
//! Each metric also sits behind the [`RepetitionMetric`] trait so callers can
//! select one by name at runtime.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::Hash;

use serde::Serialize;

use crate::corpus::{RepetitionSample, Scenario};
use crate::{DucError, Result};

/// Frequency profile of the unique n-grams of a sequence.
#[derive(Debug, Clone)]
pub struct NgramProfile<T: Eq + Hash + Clone> {
    pub n: usize,
    pub counts: HashMap<Vec<T>, usize>,
    pub total: usize,
}

impl<T: Eq + Hash + Clone> NgramProfile<T> {
    pub fn build(seq: &[T], n: usize) -> Result<Self> {
        if n < 1 {
            return Err(DucError::param("n", "must be >= 1"));
        }
        let mut counts: HashMap<Vec<T>, usize> = HashMap::new();
        let total = seq.len().saturating_sub(n - 1);
        if seq.len() >= n {
            for w in seq.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        Ok(NgramProfile { n, counts, total })
    }
}

/// Weighted n-gram repeat score: sum of f_i^w over n-grams with f_i > 1,
/// divided by the sum of max(f_i, 1)^w over all unique n-grams.
/// By convention returns 0 when the sequence is shorter than n.
pub fn repeat_score<T: Eq + Hash + Clone>(seq: &[T], n: usize, w: f64) -> Result<f64> {
    if n < 1 {
        return Err(DucError::param("n", "must be >= 1"));
    }
    if w <= 0.0 {
        return Err(DucError::param("w", "must be > 0"));
    }
    let profile = NgramProfile::build(seq, n)?;
    if profile.counts.is_empty() {
        return Ok(0.0);
    }
    // Sum in sorted-count order: HashMap iteration order varies per process
    // and float addition is not associative, so summing in hash order would
    // make the last bits of the score differ between same-seed runs.
    let mut freqs: Vec<usize> = profile.counts.values().copied().collect();
    freqs.sort_unstable();
    let mut num = 0.0;
    let mut den = 0.0;
    for f in freqs {
        let fw = (f as f64).powf(w);
        den += fw;
        if f > 1 {
            num += fw;
        }
    }
    Ok(num / den)
}

/// Mean 1-gram precision of each segment against the union of all other
/// segments. Returns 0 with fewer than two segments (no reference set).
pub fn self_bleu<T: Eq + Hash + Clone>(segments: &[Vec<T>]) -> f64 {
    if segments.len() < 2 {
        return 0.0;
    }
    let sets: Vec<HashSet<&T>> = segments.iter().map(|s| s.iter().collect()).collect();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            continue;
        }
        let matches = seg
            .iter()
            .filter(|t| {
                sets.iter()
                    .enumerate()
                    .any(|(j, set)| j != i && set.contains(t))
            })
            .count();
        sum += matches as f64 / seg.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

/// Shannon entropy of the token-type distribution, normalized by the maximum
/// entropy log2(N), with N the total token count. 0 for single-token or
/// single-type sequences.
pub fn entropy_norm<T: Eq + Hash + Clone>(seq: &[T]) -> Result<f64> {
    entropy_norm_ngram(seq, 1)
}

/// Entropy over the n-gram distribution (types = n-grams) normalized by
/// log2 of the n-gram count. n = 1 is the plain token-entropy reading.
pub fn entropy_norm_ngram<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> Result<f64> {
    if seq.is_empty() {
        return Err(DucError::param("seq", "must be non-empty"));
    }
    let profile = NgramProfile::build(seq, n)?;
    let total = profile.total as f64;
    if profile.total <= 1 || profile.counts.len() <= 1 {
        return Ok(0.0);
    }
    // Sorted-count order for the same bit-determinism reason as repeat_score.
    let mut freqs: Vec<usize> = profile.counts.values().copied().collect();
    freqs.sort_unstable();
    let mut h = 0.0;
    for f in freqs {
        let p = f as f64 / total;
        h -= p * p.log2();
    }
    Ok(h / total.log2())
}

/// Split a token sequence into sentence segments after tokens ending in
/// '.', '!' or '?'. A trailing fragment is kept; empty segments are dropped.
pub fn sentence_split(tokens: &[String]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        cur.push(t.clone());
        if t.ends_with('.') || t.ends_with('!') || t.ends_with('?') {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

// ---------------------------------------------------------------------------
// Metric strategies
// ---------------------------------------------------------------------------

/// A repetition metric usable interchangeably across the pipeline: scores a
/// word-token sequence in [0, 1].
pub trait RepetitionMetric: Send + Sync {
    fn name(&self) -> String;
    fn score(&self, tokens: &[String]) -> f64;
}

pub struct RepeatScoreMetric {
    pub n: usize,
    pub w: f64,
}

impl RepetitionMetric for RepeatScoreMetric {
    fn name(&self) -> String {
        format!("repeat_n{}", self.n)
    }
    fn score(&self, tokens: &[String]) -> f64 {
        repeat_score(tokens, self.n, self.w).unwrap_or(0.0)
    }
}

pub struct SelfBleuMetric;

impl RepetitionMetric for SelfBleuMetric {
    fn name(&self) -> String {
        "self_bleu".to_string()
    }
    fn score(&self, tokens: &[String]) -> f64 {
        self_bleu(&sentence_split(tokens))
    }
}

pub struct EntropyMetric {
    pub n: usize,
}

impl RepetitionMetric for EntropyMetric {
    fn name(&self) -> String {
        format!("entropy_n{}", self.n)
    }
    fn score(&self, tokens: &[String]) -> f64 {
        entropy_norm_ngram(tokens, self.n).unwrap_or(0.0)
    }
}

/// Name-keyed registry of metric strategies.
pub struct MetricRegistry {
    metrics: BTreeMap<String, Box<dyn RepetitionMetric>>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        MetricRegistry {
            metrics: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, metric: Box<dyn RepetitionMetric>) {
        self.metrics.insert(metric.name(), metric);
    }

    /// Registry with the three candidate metrics for the requested n values
    /// and weight. `kinds` filters to a subset: "repeat", "bleu", "entropy"
    /// or "all".
    pub fn standard(ns: &[usize], w: f64, kinds: &str) -> Result<Self> {
        let mut reg = MetricRegistry::new();
        let want = |k: &str| kinds == "all" || kinds == k;
        if want("repeat") {
            for &n in ns {
                reg.register(Box::new(RepeatScoreMetric { n, w }));
            }
        }
        if want("bleu") {
            reg.register(Box::new(SelfBleuMetric));
        }
        if want("entropy") {
            for &n in ns {
                reg.register(Box::new(EntropyMetric { n }));
            }
        }
        if reg.metrics.is_empty() {
            return Err(DucError::param(
                "metric",
                format!("unknown metric kind `{kinds}` (repeat|bleu|entropy|all)"),
            ));
        }
        Ok(reg)
    }

    pub fn get(&self, name: &str) -> Option<&dyn RepetitionMetric> {
        self.metrics.get(name).map(|b| b.as_ref())
    }

    pub fn names(&self) -> Vec<&str> {
        self.metrics.keys().map(|s| s.as_str()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &dyn RepetitionMetric)> {
        self.metrics.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }
}

impl Default for MetricRegistry {
    fn default() -> Self {
        MetricRegistry::standard(&[1, 2, 3], 1.0, "all").unwrap()
    }
}

// ---------------------------------------------------------------------------
// Metric curves
// ---------------------------------------------------------------------------

/// One row of the metric-curve table: mean/std of a metric over a dataset
/// cell. Paragraph cells appear twice, once for the repeated text and once
/// for the original text it was built from.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CurveRow {
    pub scenario: String,
    pub n_start: usize,
    pub group_size: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CurveTable {
    pub rows: Vec<CurveRow>,
    pub empty_cells_skipped: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn metric_order_n(name: &str) -> usize {
    name.rsplit_once("_n")
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(1)
}

/// Compute per-cell mean and standard deviation of every registered metric —
/// the data behind the metric-selection figures.
pub fn metric_curves(dataset: &[RepetitionSample], registry: &MetricRegistry) -> CurveTable {
    // (scenario label, N, M) -> token sequences
    let mut cells: BTreeMap<(String, usize, usize), Vec<&[String]>> = BTreeMap::new();
    let mut originals: BTreeMap<(String, usize, usize), Vec<Vec<String>>> = BTreeMap::new();
    for s in dataset {
        match s.scenario {
            Scenario::TokenRepetition => {
                cells
                    .entry(("token".into(), s.n_start, s.group_size))
                    .or_default()
                    .push(&s.tokens);
            }
            Scenario::ParagraphRepetition => {
                cells
                    .entry(("paragraph".into(), 0, 0))
                    .or_default()
                    .push(&s.tokens);
                // The pre-repetition text is the first of the identical chunks.
                let orig_len = s.tokens.len() / s.repeat_count.max(1);
                originals
                    .entry(("paragraph_original".into(), 0, 0))
                    .or_default()
                    .push(s.tokens[..orig_len].to_vec());
            }
        }
    }

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    let mut emit = |key: &(String, usize, usize), seqs: Vec<&[String]>, rows: &mut Vec<CurveRow>| {
        if seqs.is_empty() {
            skipped += 1;
            return;
        }
        for (name, metric) in registry.iter() {
            let scores: Vec<f64> = seqs.iter().map(|s| metric.score(s)).collect();
            let (mean, std) = mean_std(&scores);
            rows.push(CurveRow {
                scenario: key.0.clone(),
                n_start: key.1,
                group_size: key.2,
                metric: name.to_string(),
                n: metric_order_n(name),
                mean,
                std,
                count: scores.len(),
            });
        }
    };

    for (key, seqs) in &cells {
        emit(key, seqs.clone(), &mut rows);
    }
    for (key, seqs) in &originals {
        emit(key, seqs.iter().map(|v| v.as_slice()).collect(), &mut rows);
    }

    CurveTable {
        rows,
        empty_cells_skipped: skipped,
    }
}
