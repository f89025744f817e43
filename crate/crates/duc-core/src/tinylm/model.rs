//! Decoder-only transformer with a readable/writable residual stream.
//!
//! Pre-norm blocks, learned positional embeddings, weight-tied unembedding.
//! Every forward pass captures the post-block residual at each layer, and a
//! [`HookSet`] can rewrite residual rows at chosen layers before downstream
//! blocks see them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::math::{dot, gelu, vec_mat, Mat};
use crate::{DucError, Result, TokenId};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(DucError::param(name, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(DucError::param(
                "n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    /// [d_model x 3*d_model], packed q|k|v.
    pub w_qkv: Mat,
    pub b_qkv: Vec<f64>,
    /// [d_model x d_model]
    pub w_o: Mat,
    pub b_o: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    /// [d_model x d_ff]
    pub w_fc: Mat,
    pub b_fc: Vec<f64>,
    /// [d_ff x d_model]
    pub w_proj: Mat,
    pub b_proj: Vec<f64>,
}

/// Full parameter set. The token embedding doubles as the unembedding
/// (weight tying), so logits are `final_norm(x) @ tok_emb^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// [vocab x d_model]
    pub tok_emb: Mat,
    /// [max_seq x d_model]
    pub pos_emb: Mat,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
}

impl ModelParams {
    /// Small-scale normal init, deterministic under `config.rng_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let d = config.d_model;
        let std = 0.02;
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| gaussian(&mut rng) * std).collect()
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                w_qkv: Mat::from_vec(d, 3 * d, normal(d * 3 * d)),
                b_qkv: vec![0.0; 3 * d],
                w_o: Mat::from_vec(d, d, normal(d * d)),
                b_o: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w_fc: Mat::from_vec(d, config.d_ff, normal(d * config.d_ff)),
                b_fc: vec![0.0; config.d_ff],
                w_proj: Mat::from_vec(config.d_ff, d, normal(config.d_ff * d)),
                b_proj: vec![0.0; d],
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tok_emb: Mat::from_vec(config.vocab_size, d, normal(config.vocab_size * d)),
            pos_emb: Mat::from_vec(config.max_seq, d, normal(config.max_seq * d)),
            layers,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
        })
    }

    /// Zero-filled parameter set with the same shapes (gradient buffers).
    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for (_, t) in p.tensors_mut() {
            t.iter_mut().for_each(|x| *x = 0.0);
        }
        p
    }

    /// Named views of every parameter tensor, in a fixed order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), self.tok_emb.data.as_mut_slice()),
            ("pos_emb".into(), self.pos_emb.data.as_mut_slice()),
        ];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1_g"), lw.ln1_g.as_mut_slice()));
            out.push((format!("layer{l}.ln1_b"), lw.ln1_b.as_mut_slice()));
            out.push((format!("layer{l}.w_qkv"), lw.w_qkv.data.as_mut_slice()));
            out.push((format!("layer{l}.b_qkv"), lw.b_qkv.as_mut_slice()));
            out.push((format!("layer{l}.w_o"), lw.w_o.data.as_mut_slice()));
            out.push((format!("layer{l}.b_o"), lw.b_o.as_mut_slice()));
            out.push((format!("layer{l}.ln2_g"), lw.ln2_g.as_mut_slice()));
            out.push((format!("layer{l}.ln2_b"), lw.ln2_b.as_mut_slice()));
            out.push((format!("layer{l}.w_fc"), lw.w_fc.data.as_mut_slice()));
            out.push((format!("layer{l}.b_fc"), lw.b_fc.as_mut_slice()));
            out.push((format!("layer{l}.w_proj"), lw.w_proj.data.as_mut_slice()));
            out.push((format!("layer{l}.b_proj"), lw.b_proj.as_mut_slice()));
        }
        out.push(("lnf_g".into(), self.lnf_g.as_mut_slice()));
        out.push(("lnf_b".into(), self.lnf_b.as_mut_slice()));
        out
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.data.as_slice()),
            ("pos_emb".into(), self.pos_emb.data.as_slice()),
        ];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_g"), lw.ln1_g.as_slice()));
            out.push((format!("layer{l}.ln1_b"), lw.ln1_b.as_slice()));
            out.push((format!("layer{l}.w_qkv"), lw.w_qkv.data.as_slice()));
            out.push((format!("layer{l}.b_qkv"), lw.b_qkv.as_slice()));
            out.push((format!("layer{l}.w_o"), lw.w_o.data.as_slice()));
            out.push((format!("layer{l}.b_o"), lw.b_o.as_slice()));
            out.push((format!("layer{l}.ln2_g"), lw.ln2_g.as_slice()));
            out.push((format!("layer{l}.ln2_b"), lw.ln2_b.as_slice()));
            out.push((format!("layer{l}.w_fc"), lw.w_fc.data.as_slice()));
            out.push((format!("layer{l}.b_fc"), lw.b_fc.as_slice()));
            out.push((format!("layer{l}.w_proj"), lw.w_proj.data.as_slice()));
            out.push((format!("layer{l}.b_proj"), lw.b_proj.as_slice()));
        }
        out.push(("lnf_g".into(), self.lnf_g.as_slice()));
        out.push(("lnf_b".into(), self.lnf_b.as_slice()));
        out
    }

    /// Apply the final layer norm to a single residual row.
    pub fn final_norm_row(&self, x: &[f64]) -> Vec<f64> {
        layernorm_row(x, &self.lnf_g, &self.lnf_b)
    }

    /// Unembedding direction of a token (a row of the tied embedding).
    pub fn unembed_direction(&self, token: TokenId) -> Result<Vec<f64>> {
        if (token as usize) >= self.config.vocab_size {
            return Err(DucError::OutOfVocab {
                token: format!("id {token}"),
            });
        }
        Ok(self.tok_emb.row(token as usize).to_vec())
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub const LN_EPS: f64 = 1e-5;

pub fn layernorm_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&gi, &bi))| (v - mean) * rstd * gi + bi)
        .collect()
}

// ---------------------------------------------------------------------------
// Hooks
// ---------------------------------------------------------------------------

/// Rewrites one residual row in place; receives the absolute token position.
pub type HookFn = Box<dyn Fn(&mut [f64], usize) + Send + Sync>;

/// Residual-stream interventions: `(layer, transform)` pairs applied to the
/// post-block residual at that layer during forward passes.
#[derive(Default)]
pub struct HookSet {
    hooks: Vec<(usize, HookFn)>,
}

impl HookSet {
    pub fn new() -> Self {
        HookSet { hooks: Vec::new() }
    }

    pub fn empty() -> Self {
        Self::new()
    }

    pub fn add(&mut self, layer: usize, f: HookFn) {
        self.hooks.push((layer, f));
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        for (l, _) in &self.hooks {
            if *l >= n_layers {
                return Err(DucError::param(
                    "hooks",
                    format!("layer {l} out of range (n_layers {n_layers})"),
                ));
            }
        }
        Ok(())
    }

    pub fn apply(&self, layer: usize, row: &mut [f64], pos: usize) {
        for (l, f) in &self.hooks {
            if *l == layer {
                f(row, pos);
            }
        }
    }
}

/// Post-block residual matrices captured during a forward pass, with hooks
/// already applied at their layers.
pub struct ResidualTrace {
    pub layers: Vec<Mat>,
    pub final_norm_applied: bool,
}

// ---------------------------------------------------------------------------
// Full (non-incremental) forward
// ---------------------------------------------------------------------------

impl ModelParams {
    /// Hook-aware forward over a whole sequence. Returns per-position logits
    /// and the residual trace. `ablate_layer` skips that block entirely
    /// (identity), used by the zero-ablation attribution oracle.
    pub fn forward_full(
        &self,
        tokens: &[TokenId],
        hooks: &HookSet,
        ablate_layer: Option<usize>,
    ) -> Result<(Mat, ResidualTrace)> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_seq {
            return Err(DucError::Overlong {
                got: tokens.len(),
                max: cfg.max_seq,
            });
        }
        if tokens.is_empty() {
            return Err(DucError::param("tokens", "must be non-empty"));
        }
        hooks.validate(cfg.n_layers)?;
        let t_len = tokens.len();
        let d = cfg.d_model;

        let mut x = Mat::zeros(t_len, d);
        for (t, &tok) in tokens.iter().enumerate() {
            if (tok as usize) >= cfg.vocab_size {
                return Err(DucError::OutOfVocab {
                    token: format!("id {tok}"),
                });
            }
            let row = x.row_mut(t);
            for (r, (&e, &p)) in row
                .iter_mut()
                .zip(self.tok_emb.row(tok as usize).iter().zip(self.pos_emb.row(t)))
                .take(d)
            {
                *r = e + p;
            }
        }

        let mut trace = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in self.layers.iter().enumerate() {
            if ablate_layer != Some(l) {
                block_forward(cfg, lw, &mut x);
            }
            for t in 0..t_len {
                hooks.apply(l, x.row_mut(t), t);
            }
            trace.push(x.clone());
        }

        let mut logits = Mat::zeros(t_len, cfg.vocab_size);
        for t in 0..t_len {
            let normed = layernorm_row(x.row(t), &self.lnf_g, &self.lnf_b);
            let row = logits.row_mut(t);
            for (v, r) in row.iter_mut().enumerate() {
                *r = dot(&normed, self.tok_emb.row(v));
            }
        }

        Ok((
            logits,
            ResidualTrace {
                layers: trace,
                final_norm_applied: false,
            },
        ))
    }

    pub fn forward(&self, tokens: &[TokenId], hooks: &HookSet) -> Result<(Mat, ResidualTrace)> {
        self.forward_full(tokens, hooks, None)
    }
}

/// One pre-norm block applied in place over all positions.
fn block_forward(cfg: &ModelConfig, lw: &LayerWeights, x: &mut Mat) {
    let t_len = x.rows;
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    // attention
    let mut a = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let normed = layernorm_row(x.row(t), &lw.ln1_g, &lw.ln1_b);
        a.row_mut(t).copy_from_slice(&normed);
    }
    let mut qkv = a.matmul(&lw.w_qkv);
    qkv.add_row_bias(&lw.b_qkv);

    let mut ctx = Mat::zeros(t_len, d);
    for h in 0..cfg.n_heads {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        for t in 0..t_len {
            let q = &qkv.row(t)[q_off..q_off + hd];
            let mut scores = Vec::with_capacity(t + 1);
            for j in 0..=t {
                let k = &qkv.row(j)[k_off..k_off + hd];
                scores.push(dot(q, k) * scale);
            }
            super::math::softmax_inplace(&mut scores);
            let out = &mut ctx.row_mut(t)[q_off..q_off + hd];
            for (j, &p) in scores.iter().enumerate() {
                let v = &qkv.row(j)[v_off..v_off + hd];
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += p * vv;
                }
            }
        }
    }
    let mut att = ctx.matmul(&lw.w_o);
    att.add_row_bias(&lw.b_o);
    for t in 0..t_len {
        for (xv, &av) in x.row_mut(t).iter_mut().zip(att.row(t)) {
            *xv += av;
        }
    }

    // mlp
    for t in 0..t_len {
        let normed = layernorm_row(x.row(t), &lw.ln2_g, &lw.ln2_b);
        let mut u = vec_mat(&normed, &lw.w_fc);
        for (uv, &b) in u.iter_mut().zip(&lw.b_fc) {
            *uv += b;
        }
        for uv in u.iter_mut() {
            *uv = gelu(*uv);
        }
        let mut m = vec_mat(&u, &lw.w_proj);
        for (mv, &b) in m.iter_mut().zip(&lw.b_proj) {
            *mv += b;
        }
        for (xv, &mv) in x.row_mut(t).iter_mut().zip(&m) {
            *xv += mv;
        }
    }
}

// ---------------------------------------------------------------------------
// Incremental forward with per-layer KV cache (generation path)
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct LayerKv {
    /// cached keys, one row per position, [t x d_model]
    k: Vec<f64>,
    /// cached values
    v: Vec<f64>,
}

/// Incremental decoding state. Feeding tokens one at a time through
/// [`GenState::step`] reproduces the full forward pass logits exactly
/// (same reduction order), while costing O(T) per token.
#[derive(Clone)]
pub struct GenState {
    kv: Vec<LayerKv>,
    pos: usize,
}

impl GenState {
    pub fn new(params: &ModelParams) -> Self {
        GenState {
            kv: (0..params.config.n_layers)
                .map(|_| LayerKv {
                    k: Vec::new(),
                    v: Vec::new(),
                })
                .collect(),
            pos: 0,
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Advance one token; returns the next-token logits row.
    pub fn step(
        &mut self,
        params: &ModelParams,
        token: TokenId,
        hooks: &HookSet,
    ) -> Result<Vec<f64>> {
        let cfg = &params.config;
        if self.pos >= cfg.max_seq {
            return Err(DucError::Overlong {
                got: self.pos + 1,
                max: cfg.max_seq,
            });
        }
        if (token as usize) >= cfg.vocab_size {
            return Err(DucError::OutOfVocab {
                token: format!("id {token}"),
            });
        }
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let mut x: Vec<f64> = params
            .tok_emb
            .row(token as usize)
            .iter()
            .zip(params.pos_emb.row(self.pos))
            .map(|(&e, &p)| e + p)
            .collect();

        for (l, lw) in params.layers.iter().enumerate() {
            let normed = layernorm_row(&x, &lw.ln1_g, &lw.ln1_b);
            let mut qkv = vec_mat(&normed, &lw.w_qkv);
            for (q, &b) in qkv.iter_mut().zip(&lw.b_qkv) {
                *q += b;
            }
            let cache = &mut self.kv[l];
            cache.k.extend_from_slice(&qkv[d..2 * d]);
            cache.v.extend_from_slice(&qkv[2 * d..3 * d]);
            let t_now = self.pos + 1;

            let mut ctx = vec![0.0; d];
            for h in 0..cfg.n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut scores = Vec::with_capacity(t_now);
                for j in 0..t_now {
                    let k = &cache.k[j * d + h * hd..j * d + (h + 1) * hd];
                    scores.push(dot(q, k) * scale);
                }
                super::math::softmax_inplace(&mut scores);
                let out = &mut ctx[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &cache.v[j * d + h * hd..j * d + (h + 1) * hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
            let mut att = vec_mat(&ctx, &lw.w_o);
            for (a, &b) in att.iter_mut().zip(&lw.b_o) {
                *a += b;
            }
            for (xv, &av) in x.iter_mut().zip(&att) {
                *xv += av;
            }

            let normed = layernorm_row(&x, &lw.ln2_g, &lw.ln2_b);
            let mut u = vec_mat(&normed, &lw.w_fc);
            for (uv, &b) in u.iter_mut().zip(&lw.b_fc) {
                *uv += b;
            }
            for uv in u.iter_mut() {
                *uv = gelu(*uv);
            }
            let mut m = vec_mat(&u, &lw.w_proj);
            for (mv, &b) in m.iter_mut().zip(&lw.b_proj) {
                *mv += b;
            }
            for (xv, &mv) in x.iter_mut().zip(&m) {
                *xv += mv;
            }

            hooks.apply(l, &mut x, self.pos);
        }

        let normed = layernorm_row(&x, &params.lnf_g, &params.lnf_b);
        let logits = (0..cfg.vocab_size)
            .map(|v| dot(&normed, params.tok_emb.row(v)))
            .collect();
        self.pos += 1;
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq: 12,
            rng_seed: seed,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_params(0).config;
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        cfg.n_heads = 2;
        cfg.d_model = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_hookset_is_identity() {
        let p = tiny_params(1);
        let toks = vec![1, 2, 3, 4];
        let (a, _) = p.forward(&toks, &HookSet::empty()).unwrap();
        let mut hooks = HookSet::new();
        hooks.add(0, Box::new(|_row, _pos| {}));
        let (b, _) = p.forward(&toks, &hooks).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_adding_hook_is_identity() {
        let p = tiny_params(1);
        let toks = vec![1, 2, 3];
        let (a, _) = p.forward(&toks, &HookSet::empty()).unwrap();
        let mut hooks = HookSet::new();
        hooks.add(
            1,
            Box::new(|row, _| {
                for r in row.iter_mut() {
                    *r += 0.0;
                }
            }),
        );
        let (b, _) = p.forward(&toks, &hooks).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn hook_locality_layers_below_unchanged() {
        let p = tiny_params(2);
        let toks = vec![3, 4, 5, 6];
        let (_, base) = p.forward(&toks, &HookSet::empty()).unwrap();
        let mut hooks = HookSet::new();
        hooks.add(
            1,
            Box::new(|row, _| {
                for r in row.iter_mut() {
                    *r += 0.5;
                }
            }),
        );
        let (_, steered) = p.forward(&toks, &hooks).unwrap();
        assert_eq!(base.layers[0].data, steered.layers[0].data);
        assert_ne!(base.layers[1].data, steered.layers[1].data);
    }

    #[test]
    fn logits_rederivable_from_trace() {
        let p = tiny_params(3);
        let toks = vec![2, 7, 1, 9];
        let (logits, trace) = p.forward(&toks, &HookSet::empty()).unwrap();
        let last = trace.layers.last().unwrap();
        for t in 0..toks.len() {
            let normed = p.final_norm_row(last.row(t));
            for v in 0..p.config.vocab_size {
                let want = dot(&normed, p.tok_emb.row(v));
                assert_eq!(logits.at(t, v), want);
            }
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let p = tiny_params(4);
        let toks = vec![5, 3, 8, 1, 2];
        let (full, _) = p.forward(&toks, &HookSet::empty()).unwrap();
        let mut state = GenState::new(&p);
        for (t, &tok) in toks.iter().enumerate() {
            let row = state.step(&p, tok, &HookSet::empty()).unwrap();
            for v in 0..p.config.vocab_size {
                assert!(
                    (row[v] - full.at(t, v)).abs() < 1e-12,
                    "pos {t} vocab {v}"
                );
            }
        }
    }

    #[test]
    fn overlong_input_rejected() {
        let p = tiny_params(5);
        let toks = vec![1; 13];
        assert!(matches!(
            p.forward(&toks, &HookSet::empty()),
            Err(DucError::Overlong { .. })
        ));
    }

    #[test]
    fn determinism_same_seed_same_params() {
        let a = tiny_params(42);
        let b = tiny_params(42);
        assert_eq!(a.tok_emb.data, b.tok_emb.data);
        assert_eq!(a.layers[0].w_qkv.data, b.layers[0].w_qkv.data);
    }
}
