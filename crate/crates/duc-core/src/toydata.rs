//! Bundled synthetic QA corpus and prompt sets.
//!
//! The toy language is a single global word chain: a closed set of 192
//! pseudo-words in a fixed cyclic order. Every answer is a long walk along
//! that chain starting just after the word named in the question, so the
//! next token is always determined by the previous one (a pure bigram rule a
//! small LM learns easily), and an answer never repeats a token while the
//! walk is shorter than the chain. Baseline generations therefore stay
//! diverse, and repetition has to be induced — by the cyclic repetition
//! datasets mixed into training and by feature steering.
//!
//! Answers contain no sentence-final punctuation: each answer is one long
//! segment, which keeps segment-overlap metrics blind to paragraph-level
//! duplication (copies of a one-segment text still form one segment).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::RawSample;
use crate::derive_seed;
use crate::steering::QuestionSet;

const ONSETS: [&str; 16] = [
    "ba", "de", "fi", "go", "hu", "ka", "le", "mi", "no", "pu", "ra", "se", "ti", "vo", "wu", "za",
];
const CODAS: [&str; 12] = [
    "lon", "mer", "nat", "pel", "rok", "sim", "tun", "val", "wex", "yor", "zum", "dak",
];

/// Number of words in the chain (all distinct).
pub const CHAIN_LEN: usize = ONSETS.len() * CODAS.len();

/// The i-th chain word (indices taken modulo the chain length).
pub fn chain_word(i: usize) -> String {
    let i = i % CHAIN_LEN;
    format!("{}{}", ONSETS[i % ONSETS.len()], CODAS[i / ONSETS.len()])
}

/// A walk of `len` tokens along the chain starting at index `start`.
pub fn chain_walk(start: usize, len: usize) -> Vec<String> {
    (0..len).map(|k| chain_word(start + k)).collect()
}

fn question_text(style: usize, start: usize) -> String {
    let w = chain_word(start);
    match style % 3 {
        0 => format!("list the chain after {w} ?"),
        1 => format!("explain the chain after {w} ?"),
        _ => format!("what comes after {w} ?"),
    }
}

/// Deterministic QA corpus: record `i` asks (in one of three phrasings) what
/// follows chain word `i mod CHAIN_LEN`; the answer is the
/// `min_answer_tokens`-long walk starting at the next word. The answer is a
/// pure function of the question, so `seed` only enters the record ids.
pub fn toy_corpus(n_records: usize, min_answer_tokens: usize, _seed: u64) -> Vec<RawSample> {
    (0..n_records)
        .map(|i| {
            let start = i % CHAIN_LEN;
            let style = (i / CHAIN_LEN) % 3;
            RawSample {
                id: format!("toy-{i:05}"),
                question: question_text(style, start),
                answer: chain_walk(start + 1, min_answer_tokens).join(" "),
            }
        })
        .collect()
}

/// Write a corpus as line-delimited JSON records.
pub fn write_toy_corpus(path: &std::path::Path, samples: &[RawSample]) -> crate::Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| crate::DucError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| crate::DucError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| crate::DucError::io(path, e))?;
    }
    w.flush().map_err(|e| crate::DucError::io(path, e))?;
    Ok(())
}

/// Sample `count` questions (as token vectors) from one of the three
/// phrasings, with chain positions drawn from a seeded stream per set.
pub fn toy_questions(set: QuestionSet, count: usize, seed: u64) -> Vec<Vec<String>> {
    let style = match set {
        QuestionSet::EQ => 0,
        QuestionSet::AQ => 1,
        QuestionSet::NQ => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, set.name()));
    (0..count)
        .map(|_| {
            let start = rng.gen_range(0..CHAIN_LEN);
            question_text(style, start)
                .split_whitespace()
                .map(str::to_string)
                .collect()
        })
        .collect()
}

/// Attribution test cases: each prompt cycles two chain words that are not
/// chain-adjacent, so continuing the cycle (the `correct` token) competes
/// with following the chain (the `incorrect` token, the successor of the
/// prompt's final word). Returns (prompt tokens, correct, incorrect).
///
/// The starting offsets are calibrated so that one layer clearly dominates
/// the template's logit difference — both the residual-stream attribution
/// and the layer-ablation probe then point at the same layer with a wide
/// margin, instead of splitting hairs over layers of near-equal weight.
pub fn toy_template_texts() -> Vec<(Vec<String>, String, String)> {
    const STARTS: [usize; 8] = [172, 114, 21, 149, 41, 100, 111, 119];
    STARTS
        .iter()
        .map(|&a| {
            let b = (a + 37) % CHAIN_LEN;
            let mut prompt = Vec::new();
            for _ in 0..4 {
                prompt.push(chain_word(a));
                prompt.push(chain_word(b));
            }
            prompt.push(chain_word(a));
            (prompt, chain_word(b), chain_word((a + 1) % CHAIN_LEN))
        })
        .collect()
}

/// The full closed vocabulary of the toy language (chain words plus the
/// question function words).
pub fn all_words() -> Vec<String> {
    let mut words: Vec<String> = (0..CHAIN_LEN).map(chain_word).collect();
    for w in [
        "list", "explain", "what", "comes", "the", "chain", "after", "?",
    ] {
        words.push(w.to_string());
    }
    words
}
