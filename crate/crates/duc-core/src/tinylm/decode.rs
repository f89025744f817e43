//! Decoding strategies behind a common trait, registered by name and
//! selected at runtime: greedy, beam search, top-k and nucleus (top-p)
//! sampling. Sampling strategies are deterministic under the generation
//! seed; greedy and beam are deterministic outright.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::math::log_sum_exp;
use super::model::{GenState, HookSet, ModelParams};
use crate::{DucError, Result, TokenId, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Greedy,
    Beam,
    TopK,
    TopP,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Greedy => "greedy",
            StrategyKind::Beam => "beam",
            StrategyKind::TopK => "topk",
            StrategyKind::TopP => "topp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: StrategyKind,
    pub max_new_tokens: usize,
    pub beam_width: usize,
    pub k: usize,
    pub p: f64,
    pub temperature: f64,
    pub rng_seed: u64,
    /// Generation stops when this token is produced.
    pub eot_id: TokenId,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            strategy: StrategyKind::Greedy,
            max_new_tokens: 64,
            beam_width: 4,
            k: 50,
            p: 0.9,
            temperature: 1.0,
            rng_seed: 0,
            eot_id: 1,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(DucError::param("p", "must be in (0, 1]"));
        }
        if self.k < 1 {
            return Err(DucError::param("k", "must be >= 1"));
        }
        if self.beam_width < 1 {
            return Err(DucError::param("beam_width", "must be >= 1"));
        }
        if self.temperature <= 0.0 {
            return Err(DucError::param("temperature", "must be > 0"));
        }
        Ok(())
    }
}

/// One decoding algorithm. Implementations must be pure given
/// `(params, prompt, cfg, hooks)`.
pub trait DecodingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn generate(
        &self,
        params: &ModelParams,
        prompt: &[TokenId],
        cfg: &GenerationConfig,
        hooks: &HookSet,
    ) -> Result<TokenSeq>;
}

/// Name-keyed registry of decoding strategies.
pub struct DecoderRegistry {
    strategies: BTreeMap<&'static str, Box<dyn DecodingStrategy>>,
}

impl DecoderRegistry {
    pub fn new() -> Self {
        DecoderRegistry {
            strategies: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, s: Box<dyn DecodingStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn standard() -> Self {
        let mut reg = Self::new();
        reg.register(Box::new(GreedyDecoder));
        reg.register(Box::new(BeamDecoder));
        reg.register(Box::new(TopKDecoder));
        reg.register(Box::new(TopPDecoder));
        reg
    }

    pub fn get(&self, name: &str) -> Result<&dyn DecodingStrategy> {
        self.strategies
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                DucError::param(
                    "strategy",
                    format!("unknown decoding strategy `{name}` (greedy|beam|topk|topp)"),
                )
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

impl Default for DecoderRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

/// Generate new tokens after the prompt using the strategy named in `cfg`.
/// Returns only the newly generated tokens (the `<eot>` stop token, when
/// hit, is not included).
pub fn generate(
    params: &ModelParams,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    hooks: &HookSet,
) -> Result<TokenSeq> {
    if prompt.is_empty() {
        return Err(DucError::param("prompt", "must be non-empty"));
    }
    cfg.validate()?;
    DecoderRegistry::standard()
        .get(cfg.strategy.name())?
        .generate(params, prompt, cfg, hooks)
}

/// Argmax with ties broken by the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn feed_prompt(
    params: &ModelParams,
    prompt: &[TokenId],
    hooks: &HookSet,
) -> Result<(GenState, Vec<f64>)> {
    let mut state = GenState::new(params);
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = state.step(params, tok, hooks)?;
    }
    Ok((state, logits))
}

fn room_left(params: &ModelParams, prompt_len: usize, cfg: &GenerationConfig) -> usize {
    let cap = params.config.max_seq.saturating_sub(prompt_len);
    cfg.max_new_tokens.min(cap)
}

pub struct GreedyDecoder;

impl DecodingStrategy for GreedyDecoder {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn generate(
        &self,
        params: &ModelParams,
        prompt: &[TokenId],
        cfg: &GenerationConfig,
        hooks: &HookSet,
    ) -> Result<TokenSeq> {
        let (mut state, mut logits) = feed_prompt(params, prompt, hooks)?;
        let mut out = Vec::new();
        for _ in 0..room_left(params, prompt.len(), cfg) {
            let next = argmax(&logits) as TokenId;
            if next == cfg.eot_id {
                break;
            }
            out.push(next);
            if out.len() == cfg.max_new_tokens || state.pos() == params.config.max_seq {
                break;
            }
            logits = state.step(params, next, hooks)?;
        }
        Ok(out)
    }
}

pub struct BeamDecoder;

#[derive(Clone)]
struct Beam {
    tokens: TokenSeq,
    logprob: f64,
    state: GenState,
    logits: Vec<f64>,
    finished: bool,
}

impl DecodingStrategy for BeamDecoder {
    fn name(&self) -> &'static str {
        "beam"
    }

    fn generate(
        &self,
        params: &ModelParams,
        prompt: &[TokenId],
        cfg: &GenerationConfig,
        hooks: &HookSet,
    ) -> Result<TokenSeq> {
        let (state, logits) = feed_prompt(params, prompt, hooks)?;
        let width = cfg.beam_width;
        let budget = room_left(params, prompt.len(), cfg);
        let mut beams = vec![Beam {
            tokens: Vec::new(),
            logprob: 0.0,
            state,
            logits,
            finished: false,
        }];

        for _ in 0..budget {
            if beams.iter().all(|b| b.finished) {
                break;
            }
            // candidates: (total logprob, beam index, token)
            let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
            for (bi, beam) in beams.iter().enumerate() {
                if beam.finished {
                    cands.push((beam.logprob, bi, cfg.eot_id));
                    continue;
                }
                let lse = log_sum_exp(&beam.logits);
                // top `width` token expansions of this beam suffice
                let mut idx: Vec<usize> = (0..beam.logits.len()).collect();
                idx.sort_by(|&a, &b| {
                    beam.logits[b]
                        .partial_cmp(&beam.logits[a])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for &tok in idx.iter().take(width) {
                    cands.push((
                        beam.logprob + beam.logits[tok] - lse,
                        bi,
                        tok as TokenId,
                    ));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            cands.truncate(width);

            let mut next_beams = Vec::with_capacity(width);
            for (lp, bi, tok) in cands {
                let src = &beams[bi];
                if src.finished {
                    next_beams.push(src.clone());
                    continue;
                }
                let mut tokens = src.tokens.clone();
                let finished = tok == cfg.eot_id;
                let mut state = src.state.clone();
                let mut logits = src.logits.clone();
                if !finished {
                    tokens.push(tok);
                    if tokens.len() < budget && state.pos() < params.config.max_seq {
                        logits = state.step(params, tok, hooks)?;
                    }
                }
                next_beams.push(Beam {
                    tokens,
                    logprob: lp,
                    state,
                    logits,
                    finished,
                });
            }
            beams = next_beams;
        }

        // best by total logprob; ties by earliest beam
        let best = beams
            .iter()
            .enumerate()
            .max_by(|(ai, a), (bi, b)| {
                a.logprob
                    .partial_cmp(&b.logprob)
                    .unwrap()
                    .then(bi.cmp(ai))
            })
            .map(|(_, b)| b)
            .expect("at least one beam");
        Ok(best.tokens.clone())
    }
}

fn sample_from(probs: &[(usize, f64)], rng: &mut ChaCha8Rng) -> TokenId {
    let total: f64 = probs.iter().map(|(_, p)| p).sum();
    let mut r = rng.gen::<f64>() * total;
    for &(tok, p) in probs {
        r -= p;
        if r <= 0.0 {
            return tok as TokenId;
        }
    }
    probs.last().map(|&(t, _)| t as TokenId).unwrap_or(0)
}

/// Shared scaffolding for the two sampling strategies: temperature scaling,
/// a candidate filter, then categorical sampling.
fn sample_loop(
    params: &ModelParams,
    prompt: &[TokenId],
    cfg: &GenerationConfig,
    hooks: &HookSet,
    filter: impl Fn(&[f64]) -> Vec<(usize, f64)>,
) -> Result<TokenSeq> {
    let (mut state, mut logits) = feed_prompt(params, prompt, hooks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut out = Vec::new();
    for _ in 0..room_left(params, prompt.len(), cfg) {
        let scaled: Vec<f64> = logits.iter().map(|&l| l / cfg.temperature).collect();
        let mut probs = scaled.clone();
        super::math::softmax_inplace(&mut probs);
        let cands = filter(&probs);
        let next = sample_from(&cands, &mut rng);
        if next == cfg.eot_id {
            break;
        }
        out.push(next);
        if out.len() == cfg.max_new_tokens || state.pos() == params.config.max_seq {
            break;
        }
        logits = state.step(params, next, hooks)?;
    }
    Ok(out)
}

pub struct TopKDecoder;

impl DecodingStrategy for TopKDecoder {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn generate(
        &self,
        params: &ModelParams,
        prompt: &[TokenId],
        cfg: &GenerationConfig,
        hooks: &HookSet,
    ) -> Result<TokenSeq> {
        let k = cfg.k;
        sample_loop(params, prompt, cfg, hooks, move |probs| {
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            idx.iter().take(k).map(|&i| (i, probs[i])).collect()
        })
    }
}

pub struct TopPDecoder;

impl DecodingStrategy for TopPDecoder {
    fn name(&self) -> &'static str {
        "topp"
    }

    fn generate(
        &self,
        params: &ModelParams,
        prompt: &[TokenId],
        cfg: &GenerationConfig,
        hooks: &HookSet,
    ) -> Result<TokenSeq> {
        let p = cfg.p;
        sample_loop(params, prompt, cfg, hooks, move |probs| {
            let mut idx: Vec<usize> = (0..probs.len()).collect();
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let mut cum = 0.0;
            let mut out = Vec::new();
            for &i in &idx {
                out.push((i, probs[i]));
                cum += probs[i];
                if cum >= p {
                    break;
                }
            }
            out
        })
    }
}

/// exp(mean next-token negative log-likelihood) over positions 1..len-1,
/// hook-free.
pub fn perplexity(params: &ModelParams, tokens: &[TokenId]) -> Result<f64> {
    perplexity_from(params, tokens, 1)
}

/// Perplexity restricted to positions `from..` — used to score generated
/// continuations conditioned on their prompt.
pub fn perplexity_from(params: &ModelParams, tokens: &[TokenId], from: usize) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(DucError::param("tokens", "need at least 2 tokens"));
    }
    if from < 1 || from >= tokens.len() {
        return Err(DucError::param("from", "must be in 1..len"));
    }
    let (logits, _) = params.forward(&tokens[..tokens.len() - 1], &HookSet::empty())?;
    let mut nll = 0.0;
    let mut count = 0usize;
    for t in (from - 1)..tokens.len() - 1 {
        let row = logits.row(t);
        nll += log_sum_exp(row) - row[tokens[t + 1] as usize];
        count += 1;
    }
    Ok((nll / count as f64).exp())
}
