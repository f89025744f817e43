//! Repetition-corpus construction.
//!
//! Ingests a line-delimited JSON QA corpus and builds the two repetition
//! scenarios: token repetition (a group of M tokens cycling from position N,
//! truncated at the original length) and paragraph repetition (the whole text
//! concatenated `repeat_count` times).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::tokenize;
use crate::{derive_seed, DucError, Result};

/// One QA record from the source corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSample {
    pub id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    TokenRepetition,
    ParagraphRepetition,
}

/// A corpus record tagged with its repetition scenario and parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepetitionSample {
    pub source_id: String,
    pub scenario: Scenario,
    /// Token position where the repetition starts (N). 0 for paragraph samples.
    pub n_start: usize,
    /// Number of tokens in the repeated group (M). 1 for paragraph samples.
    pub group_size: usize,
    /// Number of paragraph copies. 1 for token samples.
    pub repeat_count: usize,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_grid: Vec<usize>,
    pub m_values: Vec<usize>,
    pub samples_per_cell: usize,
    pub paragraph_samples: usize,
    pub paragraph_repeat_count: usize,
    pub rng_seed: u64,
}

impl DatasetSpec {
    /// Grid used throughout: N in 0..=140 step 10, M in {1,2,5}, 100 samples
    /// per cell plus 1000 paragraph samples repeated five times.
    pub fn standard(rng_seed: u64) -> Self {
        DatasetSpec {
            n_grid: (0..=140).step_by(10).collect(),
            m_values: vec![1, 2, 5],
            samples_per_cell: 100,
            paragraph_samples: 1000,
            paragraph_repeat_count: 5,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() {
            return Err(DucError::param("n_grid", "must be non-empty"));
        }
        if !self.n_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(DucError::param("n_grid", "must be strictly increasing"));
        }
        if self.m_values.is_empty() || self.m_values.iter().any(|&m| m == 0) {
            return Err(DucError::param("m_values", "must be positive"));
        }
        if self.samples_per_cell == 0 {
            return Err(DucError::param("samples_per_cell", "must be positive"));
        }
        if self.paragraph_samples > 0 && self.paragraph_repeat_count == 0 {
            return Err(DucError::param("paragraph_repeat_count", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellManifest {
    pub scenario: Scenario,
    pub n_start: usize,
    pub group_size: usize,
    pub source_ids: Vec<String>,
    pub with_replacement: bool,
}

/// Reproducibility sidecar for a built dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub total_samples: usize,
    pub cells: Vec<CellManifest>,
}

pub struct LoadedCorpus {
    pub samples: Vec<RawSample>,
    /// Records missing a question or answer field (or blank answer).
    pub skipped: usize,
}

#[derive(Deserialize)]
struct RawLine {
    id: Option<String>,
    question: Option<String>,
    answer: Option<String>,
}

/// Read a line-delimited JSON corpus with `question` / `answer` fields.
/// Malformed or incomplete lines are skipped and counted.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus> {
    let file = std::fs::File::open(path).map_err(|e| DucError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DucError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawLine>(&line) {
            Ok(raw) => match (raw.question, raw.answer) {
                (Some(q), Some(a)) if !a.trim().is_empty() => {
                    let id = raw.id.unwrap_or_else(|| format!("line-{lineno}"));
                    samples.push(RawSample {
                        id,
                        question: q,
                        answer: a,
                    });
                }
                _ => skipped += 1,
            },
            Err(_) => skipped += 1,
        }
    }
    if samples.is_empty() {
        return Err(DucError::EmptyCorpus {
            path: path.to_path_buf(),
        });
    }
    Ok(LoadedCorpus { samples, skipped })
}

/// Cyclic token repetition: keep the prefix up to `n_start`, then repeat the
/// group `tokens[n_start..n_start+group_size]` until the original length is
/// reached, truncating the final cycle.
pub fn make_token_repetition<T: Clone>(
    sample: &[T],
    n_start: usize,
    group_size: usize,
) -> Result<Vec<T>> {
    if sample.is_empty() {
        return Err(DucError::param("sample", "must be non-empty"));
    }
    if group_size == 0 {
        return Err(DucError::param("group_size", "must be >= 1"));
    }
    if n_start + group_size > sample.len() {
        return Err(DucError::param(
            "n_start",
            format!(
                "n_start + group_size = {} exceeds sample length {}",
                n_start + group_size,
                sample.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(sample.len());
    out.extend_from_slice(&sample[..n_start]);
    let group = &sample[n_start..n_start + group_size];
    let mut i = 0;
    while out.len() < sample.len() {
        out.push(group[i % group_size].clone());
        i += 1;
    }
    Ok(out)
}

/// Whole-text repetition: the sample concatenated `repeat_count` times.
pub fn make_paragraph_repetition<T: Clone>(sample: &[T], repeat_count: usize) -> Result<Vec<T>> {
    if repeat_count < 1 {
        return Err(DucError::param("repeat_count", "must be >= 1"));
    }
    let mut out = Vec::with_capacity(sample.len() * repeat_count);
    for _ in 0..repeat_count {
        out.extend_from_slice(sample);
    }
    Ok(out)
}

/// Build the full repetition dataset. Pure function of `(spec, corpus)`:
/// each cell draws from its own RNG stream derived from `(seed, N, M)`.
pub fn build_dataset(
    spec: &DatasetSpec,
    corpus: &[RawSample],
) -> Result<(Vec<RepetitionSample>, DatasetManifest)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(DucError::param("corpus", "must be non-empty"));
    }
    let tokenized: Vec<Vec<String>> = corpus.iter().map(|s| tokenize(&s.answer)).collect();

    let mut samples = Vec::new();
    let mut cells = Vec::new();

    for &n in &spec.n_grid {
        for &m in &spec.m_values {
            let pool: Vec<usize> = (0..corpus.len())
                .filter(|&i| tokenized[i].len() >= n + m)
                .collect();
            if pool.is_empty() {
                return Err(DucError::CellInfeasible {
                    n_start: n,
                    group_size: m,
                });
            }
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, &format!("cell/{n}/{m}")));
            let (chosen, with_replacement) =
                draw_sources(&pool, spec.samples_per_cell, &mut rng);
            let mut ids = Vec::with_capacity(chosen.len());
            for &src in &chosen {
                let toks = make_token_repetition(&tokenized[src], n, m)?;
                ids.push(corpus[src].id.clone());
                samples.push(RepetitionSample {
                    source_id: corpus[src].id.clone(),
                    scenario: Scenario::TokenRepetition,
                    n_start: n,
                    group_size: m,
                    repeat_count: 1,
                    tokens: toks,
                });
            }
            cells.push(CellManifest {
                scenario: Scenario::TokenRepetition,
                n_start: n,
                group_size: m,
                source_ids: ids,
                with_replacement,
            });
        }
    }

    if spec.paragraph_samples > 0 {
        let pool: Vec<usize> = (0..corpus.len())
            .filter(|&i| !tokenized[i].is_empty())
            .collect();
        if pool.is_empty() {
            return Err(DucError::param("corpus", "no non-empty answers"));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, "cell/paragraph"));
        let (chosen, with_replacement) = draw_sources(&pool, spec.paragraph_samples, &mut rng);
        let mut ids = Vec::with_capacity(chosen.len());
        for &src in &chosen {
            let toks = make_paragraph_repetition(&tokenized[src], spec.paragraph_repeat_count)?;
            ids.push(corpus[src].id.clone());
            samples.push(RepetitionSample {
                source_id: corpus[src].id.clone(),
                scenario: Scenario::ParagraphRepetition,
                n_start: 0,
                group_size: 1,
                repeat_count: spec.paragraph_repeat_count,
                tokens: toks,
            });
        }
        cells.push(CellManifest {
            scenario: Scenario::ParagraphRepetition,
            n_start: 0,
            group_size: 1,
            source_ids: ids,
            with_replacement,
        });
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        total_samples: samples.len(),
        cells,
    };
    Ok((samples, manifest))
}

/// Distinct draws when the pool is large enough, otherwise with replacement
/// (recorded in the manifest).
fn draw_sources(pool: &[usize], count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    if pool.len() >= count {
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(rng);
        shuffled.truncate(count);
        (shuffled, false)
    } else {
        let drawn = (0..count)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        (drawn, true)
    }
}

pub fn write_dataset(
    path: &Path,
    samples: &[RepetitionSample],
) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| DucError::io(path, e))?;
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(file, "{line}").map_err(|e| DucError::io(path, e))?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<RepetitionSample>> {
    let file = std::fs::File::open(path).map_err(|e| DucError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DucError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: RepetitionSample =
            serde_json::from_str(&line).map_err(|e| DucError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: e.to_string(),
            })?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    // BTreeMap-free: struct field order is fixed, so output is deterministic.
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(path, json).map_err(|e| DucError::io(path, e))
}

/// Count of samples per (scenario, N, M) — used by reports and tests.
pub fn cell_counts(samples: &[RepetitionSample]) -> BTreeMap<(String, usize, usize), usize> {
    let mut map = BTreeMap::new();
    for s in samples {
        let scen = match s.scenario {
            Scenario::TokenRepetition => "token".to_string(),
            Scenario::ParagraphRepetition => "paragraph".to_string(),
        };
        *map.entry((scen, s.n_start, s.group_size)).or_insert(0) += 1;
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn load_corpus_passthrough() {
        let f = write_lines(&[
            r#"{"question":"q1","answer":"a one"}"#,
            r#"{"question":"q2","answer":"a two"}"#,
            r#"{"question":"q3","answer":"a three"}"#,
        ]);
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.samples.len(), 3);
        assert_eq!(c.skipped, 0);
        assert_eq!(c.samples[1].question, "q2");
    }

    #[test]
    fn load_corpus_skips_malformed() {
        let f = write_lines(&[
            r#"{"question":"q1","answer":"a"}"#,
            r#"{"question":"q2"}"#,
            r#"{"question":"q3","answer":"b"}"#,
        ]);
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.samples.len(), 2);
        assert_eq!(c.skipped, 1);
    }

    #[test]
    fn load_corpus_empty_is_error() {
        let f = write_lines(&[]);
        assert!(matches!(
            load_corpus(f.path()),
            Err(DucError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn token_repetition_hand_cases() {
        let abcdef = ["a", "b", "c", "d", "e", "f"];
        assert_eq!(
            make_token_repetition(&abcdef, 2, 2).unwrap(),
            ["a", "b", "c", "d", "c", "d"]
        );
        assert_eq!(
            make_token_repetition(&["a", "b", "c"], 0, 1).unwrap(),
            ["a", "a", "a"]
        );
        assert_eq!(
            make_token_repetition(&["a", "b", "c", "d", "e"], 1, 2).unwrap(),
            ["a", "b", "c", "b", "c"]
        );
    }

    #[test]
    fn token_repetition_precondition_errors() {
        let e = make_token_repetition(&["a", "b"], 1, 2).unwrap_err();
        assert!(matches!(e, DucError::Param { field: "n_start", .. }));
        let e = make_token_repetition(&["a"], 0, 0).unwrap_err();
        assert!(matches!(e, DucError::Param { field: "group_size", .. }));
    }

    #[test]
    fn paragraph_repetition_cases() {
        assert_eq!(
            make_paragraph_repetition(&["a", "b"], 5).unwrap().len(),
            10
        );
        assert_eq!(make_paragraph_repetition(&["a"], 1).unwrap(), ["a"]);
        assert_eq!(
            make_paragraph_repetition(&["a", "b", "c"], 2).unwrap(),
            ["a", "b", "c", "a", "b", "c"]
        );
        assert!(make_paragraph_repetition(&["a"], 0).is_err());
    }

    fn toy_corpus(n: usize, len: usize) -> Vec<RawSample> {
        (0..n)
            .map(|i| RawSample {
                id: format!("s{i}"),
                question: format!("q{i}"),
                answer: (0..len)
                    .map(|j| format!("w{}", (i * 7 + j * 3) % 50))
                    .collect::<Vec<_>>()
                    .join(" "),
            })
            .collect()
    }

    #[test]
    fn build_dataset_counts_and_determinism() {
        let spec = DatasetSpec {
            n_grid: vec![0, 5, 10],
            m_values: vec![1, 2],
            samples_per_cell: 4,
            paragraph_samples: 3,
            paragraph_repeat_count: 2,
            rng_seed: 11,
        };
        let corpus = toy_corpus(20, 30);
        let (a, man) = build_dataset(&spec, &corpus).unwrap();
        assert_eq!(a.len(), 3 * 2 * 4 + 3);
        assert_eq!(man.total_samples, a.len());
        let (b, _) = build_dataset(&spec, &corpus).unwrap();
        let ja = serde_json::to_string(&a).unwrap();
        let jb = serde_json::to_string(&b).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn build_dataset_minimal_grid() {
        let spec = DatasetSpec {
            n_grid: vec![0],
            m_values: vec![1],
            samples_per_cell: 1,
            paragraph_samples: 0,
            paragraph_repeat_count: 1,
            rng_seed: 0,
        };
        let corpus = toy_corpus(2, 5);
        let (samples, _) = build_dataset(&spec, &corpus).unwrap();
        assert_eq!(samples.len(), 1);
    }

    #[test]
    fn build_dataset_infeasible_cell() {
        let spec = DatasetSpec {
            n_grid: vec![100],
            m_values: vec![1],
            samples_per_cell: 1,
            paragraph_samples: 0,
            paragraph_repeat_count: 1,
            rng_seed: 0,
        };
        let corpus = toy_corpus(3, 10);
        assert!(matches!(
            build_dataset(&spec, &corpus),
            Err(DucError::CellInfeasible { n_start: 100, .. })
        ));
    }

    #[test]
    fn cyclicity_invariant() {
        let sample: Vec<String> = (0..37).map(|i| format!("t{i}")).collect();
        for &(n, m) in &[(0usize, 1usize), (3, 2), (10, 5), (30, 7)] {
            let out = make_token_repetition(&sample, n, m).unwrap();
            assert_eq!(out.len(), sample.len());
            assert_eq!(&out[..n], &sample[..n]);
            for i in n..out.len() {
                assert_eq!(out[i], sample[n + (i - n) % m], "pos {i} (N={n}, M={m})");
            }
        }
    }

    #[test]
    fn paragraph_chunks_identical() {
        let sample: Vec<String> = (0..9).map(|i| format!("t{i}")).collect();
        let out = make_paragraph_repetition(&sample, 4).unwrap();
        for chunk in out.chunks(sample.len()) {
            assert_eq!(chunk, &sample[..]);
        }
    }
}
