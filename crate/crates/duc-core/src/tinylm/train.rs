//! Training loop for the toy LM: cached forward, hand-derived backward,
//! Adam with global-norm clipping. Single-threaded over steps with a fixed
//! reduction order, so a (config, seed, corpus) triple fully determines the
//! resulting parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::math::{dot, gelu, gelu_grad, log_sum_exp, Mat};
use super::model::{LayerWeights, ModelConfig, ModelParams, LN_EPS};
use crate::{derive_seed, DucError, Result, TokenId, TokenSeq};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Fraction of the token stream held out for the loss check.
    pub holdout_frac: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 800,
            lr: 1e-3,
            batch_size: 8,
            seq_len: 48,
            holdout_frac: 0.05,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
}

struct NormCache {
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

fn layernorm_cached(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, NormCache) {
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut mean = Vec::with_capacity(x.rows);
    let mut rstd = Vec::with_capacity(x.rows);
    let n = x.cols as f64;
    for t in 0..x.rows {
        let row = x.row(t);
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        let orow = out.row_mut(t);
        for (o, (&xv, (&gv, &bv))) in orow.iter_mut().zip(row.iter().zip(g.iter().zip(b))) {
            *o = (xv - mu) * rs * gv + bv;
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, NormCache { mean, rstd })
}

/// dL/dx for y = g * xhat + b given dL/dy. Also accumulates dg, db.
#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    x: &Mat,
    cache: &NormCache,
    g: &[f64],
    dy: &Mat,
    dg: &mut [f64],
    db: &mut [f64],
    dx_out: &mut Mat,
) {
    let n = x.cols as f64;
    for t in 0..x.rows {
        let xr = x.row(t);
        let dyr = dy.row(t);
        let mu = cache.mean[t];
        let rs = cache.rstd[t];
        let mut m1 = 0.0; // mean(dxhat)
        let mut m2 = 0.0; // mean(dxhat * xhat)
        for j in 0..x.cols {
            let xhat = (xr[j] - mu) * rs;
            let dxhat = dyr[j] * g[j];
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= n;
        m2 /= n;
        let dxr = dx_out.row_mut(t);
        for j in 0..x.cols {
            let xhat = (xr[j] - mu) * rs;
            let dxhat = dyr[j] * g[j];
            dxr[j] += rs * (dxhat - m1 - xhat * m2);
        }
    }
}

struct LayerCache {
    x_in: Mat,
    ln1: NormCache,
    a: Mat,
    qkv: Mat,
    /// per-head causal attention probabilities, row t holds j <= t
    probs: Vec<Mat>,
    ctx: Mat,
    x_mid: Mat,
    ln2: NormCache,
    b2: Mat,
    u: Mat,
    h: Mat,
}

struct FwdCache {
    layers: Vec<LayerCache>,
    x_final: Mat,
    lnf: NormCache,
    xf: Mat,
}

fn forward_cached(params: &ModelParams, tokens: &[TokenId]) -> FwdCache {
    let cfg = &params.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Mat::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let row = x.row_mut(t);
        for (r, (&e, &p)) in row
            .iter_mut()
            .zip(params.tok_emb.row(tok as usize).iter().zip(params.pos_emb.row(t)))
        {
            *r = e + p;
        }
    }


    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for lw in &params.layers {
        let x_in = x.clone();
        let (a, ln1) = layernorm_cached(&x_in, &lw.ln1_g, &lw.ln1_b);
        let mut qkv = a.matmul(&lw.w_qkv);
        qkv.add_row_bias(&lw.b_qkv);

        let mut probs = Vec::with_capacity(cfg.n_heads);
        let mut ctx = Mat::zeros(t_len, d);
        for h in 0..cfg.n_heads {
            let q_off = h * hd;
            let k_off = d + h * hd;
            let v_off = 2 * d + h * hd;
            let mut p_h = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let q = &qkv.row(t)[q_off..q_off + hd];
                let mut scores = Vec::with_capacity(t + 1);
                for j in 0..=t {
                    scores.push(dot(q, &qkv.row(j)[k_off..k_off + hd]) * scale);
                }
                super::math::softmax_inplace(&mut scores);
                let out = &mut ctx.row_mut(t)[q_off..q_off + hd];
                for (j, &p) in scores.iter().enumerate() {
                    let v = &qkv.row(j)[v_off..v_off + hd];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                    p_h.row_mut(t)[j] = p;
                }
            }
            probs.push(p_h);
        }
        let mut att = ctx.matmul(&lw.w_o);
        att.add_row_bias(&lw.b_o);
        for i in 0..x.data.len() {
            x.data[i] += att.data[i];
        }
        let x_mid = x.clone();

        let (b2, ln2) = layernorm_cached(&x_mid, &lw.ln2_g, &lw.ln2_b);
        let mut u = b2.matmul(&lw.w_fc);
        u.add_row_bias(&lw.b_fc);
        let mut hmat = u.clone();
        hmat.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut m = hmat.matmul(&lw.w_proj);
        m.add_row_bias(&lw.b_proj);
        for i in 0..x.data.len() {
            x.data[i] += m.data[i];
        }

        layer_caches.push(LayerCache {
            x_in,
            ln1,
            a,
            qkv,
            probs,
            ctx,
            x_mid,
            ln2,
            b2,
            u,
            h: hmat,
        });
    }

    let x_final = x;
    let (xf, lnf) = layernorm_cached(&x_final, &params.lnf_g, &params.lnf_b);
    FwdCache {

        layers: layer_caches,
        x_final,
        lnf,
        xf,
    }
}

/// Cross-entropy of next-token prediction summed over positions.
/// `inv_positions` scales the gradient (1 / total positions in the batch).
fn backward_sequence(
    params: &ModelParams,
    tokens: &[TokenId],
    targets: &[TokenId],
    inv_positions: f64,
    grads: &mut ModelParams,
) -> f64 {
    let cfg = &params.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let cache = forward_cached(params, tokens);

    // logits and loss, then dlogits = (softmax - onehot) * inv_positions
    let mut loss = 0.0;
    let mut dxf = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let xf_row = cache.xf.row(t);
        let mut logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|v| dot(xf_row, params.tok_emb.row(v)))
            .collect();
        let lse = log_sum_exp(&logits);
        let target = targets[t] as usize;
        loss += lse - logits[target];
        super::math::softmax_inplace(&mut logits);
        logits[target] -= 1.0;
        // dxf += dlogits @ tok_emb ; dtok_emb += dlogits^T @ xf
        let dxf_row = dxf.row_mut(t);
        for (v, &dl) in logits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let dl = dl * inv_positions;
            let emb_row = params.tok_emb.row(v);
            for (o, &e) in dxf_row.iter_mut().zip(emb_row) {
                *o += dl * e;
            }
            let gemb = grads.tok_emb.row_mut(v);
            for (g, &xv) in gemb.iter_mut().zip(xf_row) {
                *g += dl * xv;
            }
        }
    }

    // final norm backward
    let mut dx = Mat::zeros(t_len, d);
    layernorm_backward(
        &cache.x_final,
        &cache.lnf,
        &params.lnf_g,
        &dxf,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
        &mut dx,
    );

    for (l, lw) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let gl = &mut grads.layers[l];
        backward_block(cfg, lw, lc, gl, &mut dx, d, hd, scale, t_len);
    }

    // embeddings
    for (t, &tok) in tokens.iter().enumerate() {
        let drow = dx.row(t);
        let gemb = grads.tok_emb.row_mut(tok as usize);
        for (g, &dv) in gemb.iter_mut().zip(drow) {
            *g += dv;
        }
        let gpos = grads.pos_emb.row_mut(t);
        for (g, &dv) in gpos.iter_mut().zip(drow) {
            *g += dv;
        }
    }

    loss
}

#[allow(clippy::too_many_arguments)]
fn backward_block(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    lc: &LayerCache,
    gl: &mut LayerWeights,
    dx: &mut Mat,
    d: usize,
    hd: usize,
    scale: f64,
    t_len: usize,
) {
    // ---- MLP backward: x = x_mid + m(ln2(x_mid))
    let dm = dx.clone();
    // dWproj, dbproj, dh
    let dwproj = lc.h.matmul_tn(&dm);
    for (g, &v) in gl.w_proj.data.iter_mut().zip(&dwproj.data) {
        *g += v;
    }
    for t in 0..t_len {
        for (g, &v) in gl.b_proj.iter_mut().zip(dm.row(t)) {
            *g += v;
        }
    }
    let mut du = dm.matmul_nt(&lw.w_proj); // [T,FF]
    for (duv, &uv) in du.data.iter_mut().zip(&lc.u.data) {
        *duv *= gelu_grad(uv);
    }
    let dwfc = lc.b2.matmul_tn(&du);
    for (g, &v) in gl.w_fc.data.iter_mut().zip(&dwfc.data) {
        *g += v;
    }
    for t in 0..t_len {
        for (g, &v) in gl.b_fc.iter_mut().zip(du.row(t)) {
            *g += v;
        }
    }
    let db2 = du.matmul_nt(&lw.w_fc); // [T,D]
    // dx_mid = dx (skip) + ln2 backward contribution
    layernorm_backward(
        &lc.x_mid,
        &lc.ln2,
        &lw.ln2_g,
        &db2,
        &mut gl.ln2_g,
        &mut gl.ln2_b,
        dx,
    );

    // ---- attention backward: x_mid = x_in + att(ln1(x_in))
    let datt = dx.clone();
    let dwo = lc.ctx.matmul_tn(&datt);
    for (g, &v) in gl.w_o.data.iter_mut().zip(&dwo.data) {
        *g += v;
    }
    for t in 0..t_len {
        for (g, &v) in gl.b_o.iter_mut().zip(datt.row(t)) {
            *g += v;
        }
    }
    let dctx = datt.matmul_nt(&lw.w_o); // [T,D]

    let mut dqkv = Mat::zeros(t_len, 3 * d);
    for h in 0..cfg.n_heads {
        let q_off = h * hd;
        let k_off = d + h * hd;
        let v_off = 2 * d + h * hd;
        let p_h = &lc.probs[h];
        for t in 0..t_len {
            let dctx_h = &dctx.row(t)[q_off..q_off + hd];
            // dp_j = dctx . v_j ; dv_j += p_j * dctx
            let mut dp = Vec::with_capacity(t + 1);
            for j in 0..=t {
                let p = p_h.at(t, j);
                let v = &lc.qkv.row(j)[v_off..v_off + hd];
                dp.push(dot(dctx_h, v));
                let dv = &mut dqkv.row_mut(j)[v_off..v_off + hd];
                for (o, &c) in dv.iter_mut().zip(dctx_h.iter()) {
                    *o += p * c;
                }
            }
            // softmax backward: ds_j = p_j * (dp_j - sum_k dp_k p_k)
            let mut inner = 0.0;
            for (j, &dpj) in dp.iter().enumerate() {
                inner += dpj * p_h.at(t, j);
            }
            for (j, &dpj) in dp.iter().enumerate() {
                let ds = p_h.at(t, j) * (dpj - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                // dq_t += ds * k_j ; dk_j += ds * q_t
                let k = lc.qkv.row(j)[k_off..k_off + hd].to_vec();
                let q = lc.qkv.row(t)[q_off..q_off + hd].to_vec();
                let dq = &mut dqkv.row_mut(t)[q_off..q_off + hd];
                for (o, &kv) in dq.iter_mut().zip(&k) {
                    *o += ds * kv;
                }
                let dk = &mut dqkv.row_mut(j)[k_off..k_off + hd];
                for (o, &qv) in dk.iter_mut().zip(&q) {
                    *o += ds * qv;
                }
            }
        }
    }

    let dwqkv = lc.a.matmul_tn(&dqkv);
    for (g, &v) in gl.w_qkv.data.iter_mut().zip(&dwqkv.data) {
        *g += v;
    }
    for t in 0..t_len {
        for (g, &v) in gl.b_qkv.iter_mut().zip(dqkv.row(t)) {
            *g += v;
        }
    }
    let da = dqkv.matmul_nt(&lw.w_qkv); // [T,D]
    layernorm_backward(
        &lc.x_in,
        &lc.ln1,
        &lw.ln1_g,
        &da,
        &mut gl.ln1_g,
        &mut gl.ln1_b,
        dx,
    );
}

/// Mean next-token cross-entropy of a batch (no gradient).
pub fn batch_loss(params: &ModelParams, batch: &[(TokenSeq, TokenSeq)]) -> f64 {
    let mut loss = 0.0;
    let mut positions = 0usize;
    for (inputs, targets) in batch {
        let cache = forward_cached(params, inputs);
        for t in 0..inputs.len() {
            let logits: Vec<f64> = (0..params.config.vocab_size)
                .map(|v| dot(cache.xf.row(t), params.tok_emb.row(v)))
                .collect();
            loss += log_sum_exp(&logits) - logits[targets[t] as usize];
            positions += 1;
        }
    }
    loss / positions as f64
}

/// Mean loss and parameter gradients for a batch. Public for the gradient
/// finite-difference check.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[(TokenSeq, TokenSeq)],
) -> (f64, ModelParams) {
    let mut grads = params.zeros_like();
    let total_positions: usize = batch.iter().map(|(i, _)| i.len()).sum();
    let inv = 1.0 / total_positions as f64;
    let mut loss = 0.0;
    for (inputs, targets) in batch {
        loss += backward_sequence(params, inputs, targets, inv, &mut grads);
    }
    (loss * inv, grads)
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams, lr: f64) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &mut ModelParams) {
        // global-norm clip at 1.0
        let mut sq = 0.0;
        for (_, g) in grads.tensors() {
            for &x in g {
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > 1.0 { 1.0 / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let mut mt = self.m.tensors_mut();
        let mut vt = self.v.tensors_mut();
        let gt = grads.tensors();
        let mut pt = params.tensors_mut();
        for i in 0..gt.len() {
            let g = gt[i].1;
            let m = &mut mt[i].1;
            let v = &mut vt[i].1;
            let p = &mut pt[i].1;
            for j in 0..g.len() {
                let gj = g[j] * clip;
                m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * gj;
                v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Train on a token-sequence corpus. Sequences are joined with `<eot>` into
/// one stream; training windows are sampled from the head of the stream and
/// the held-out tail provides the loss check.
pub fn train_lm(
    config: &ModelConfig,
    corpus: &[TokenSeq],
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if opts.steps < 1 {
        return Err(DucError::param("steps", "must be >= 1"));
    }
    if corpus.is_empty() {
        return Err(DucError::param("corpus", "must be non-empty"));
    }
    let eot: TokenId = 1;
    let mut stream: Vec<TokenId> = Vec::new();
    for seq in corpus {
        stream.extend_from_slice(seq);
        stream.push(eot);
    }
    let need = opts.seq_len + 1;
    if stream.len() < 4 * need {
        return Err(DucError::param(
            "corpus",
            format!("token stream too short: {} < {}", stream.len(), 4 * need),
        ));
    }
    let holdout_at = ((stream.len() as f64) * (1.0 - opts.holdout_frac)) as usize;
    let holdout_at = holdout_at.min(stream.len() - need).max(need);
    let (train, holdout) = stream.split_at(holdout_at);

    // fixed non-overlapping eval windows
    let mut eval_batch: Vec<(TokenSeq, TokenSeq)> = Vec::new();
    let mut off = 0;
    while off + need <= holdout.len() && eval_batch.len() < 32 {
        let w = &holdout[off..off + need];
        eval_batch.push((w[..opts.seq_len].to_vec(), w[1..].to_vec()));
        off += need;
    }
    if eval_batch.is_empty() {
        // tiny corpora: fall back to windows from the training region
        let w = &train[..need];
        eval_batch.push((w[..opts.seq_len].to_vec(), w[1..].to_vec()));
    }

    let mut params = ModelParams::init(config)?;
    let initial_loss = batch_loss(&params, &eval_batch);

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.rng_seed, "train-batches"));
    let mut adam = Adam::new(&params, opts.lr);

    for step in 0..opts.steps {
        let batch: Vec<(TokenSeq, TokenSeq)> = (0..opts.batch_size)
            .map(|_| {
                let off = rng.gen_range(0..train.len() - need);
                let w = &train[off..off + need];
                (w[..opts.seq_len].to_vec(), w[1..].to_vec())
            })
            .collect();
        let (loss, mut grads) = batch_loss_and_grads(&params, &batch);
        if !loss.is_finite() {
            return Err(DucError::Training { step });
        }
        adam.step(&mut params, &mut grads);
    }

    let final_loss = batch_loss(&params, &eval_batch);
    Ok((
        params,
        TrainReport {
            initial_loss,
            final_loss,
            steps: opts.steps,
        },
    ))
}
