//! Sparse autoencoder over residual-stream activations.
//!
//! `f(x) = ReLU(W_enc x + b_enc)` decomposes an activation into nonnegative
//! feature coefficients; `x_hat = b_dec + sum_i f_i W_dec,i` reconstructs it.
//! Training minimizes squared reconstruction error plus an L1 sparsity
//! penalty, renormalizing decoder rows to unit norm after every step so
//! feature activation levels stay comparable.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tinylm::math::{dot, Mat};
use crate::tinylm::model::gaussian;
use crate::tinylm::weights;
use crate::{derive_seed, DucError, Result};

#[derive(Debug, Clone)]
pub struct SaeParams {
    /// [F x D] encoder weights; feature i reads with row i.
    pub w_enc: Mat,
    /// [F]
    pub b_enc: Vec<f64>,
    /// [F x D]; row i is the decoder direction of feature i.
    pub w_dec: Mat,
    /// [D]
    pub b_dec: Vec<f64>,
    /// Residual layer this SAE was trained on.
    pub layer: usize,
}

impl SaeParams {
    pub fn n_features(&self) -> usize {
        self.w_enc.rows
    }

    pub fn d_model(&self) -> usize {
        self.w_enc.cols
    }

    /// Feature activations: ReLU(W_enc x + b_enc).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_model() {
            return Err(DucError::Dimension {
                context: "sae encode",
                expected: self.d_model(),
                got: x.len(),
            });
        }
        Ok((0..self.n_features())
            .map(|i| (dot(self.w_enc.row(i), x) + self.b_enc[i]).max(0.0))
            .collect())
    }

    /// Single-feature activation without materializing the full vector.
    pub fn encode_feature(&self, feature: usize, x: &[f64]) -> f64 {
        (dot(self.w_enc.row(feature), x) + self.b_enc[feature]).max(0.0)
    }

    /// Reconstruction: b_dec + sum_i f_i W_dec,i.
    pub fn decode(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.n_features() {
            return Err(DucError::Dimension {
                context: "sae decode",
                expected: self.n_features(),
                got: f.len(),
            });
        }
        let mut x = self.b_dec.clone();
        for (i, &fi) in f.iter().enumerate() {
            if fi == 0.0 {
                continue;
            }
            for (xv, &wv) in x.iter_mut().zip(self.w_dec.row(i)) {
                *xv += fi * wv;
            }
        }
        Ok(x)
    }

    /// (total, reconstruction, sparsity) loss terms for one activation:
    /// total = ||x - x_hat||^2 + beta * sum_i f_i.
    pub fn loss(&self, x: &[f64], beta: f64) -> Result<(f64, f64, f64)> {
        let f = self.encode(x)?;
        let xh = self.decode(&f)?;
        let recon: f64 = x
            .iter()
            .zip(&xh)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let sparsity: f64 = f.iter().sum();
        Ok((recon + beta * sparsity, recon, sparsity))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaeTrainConfig {
    /// Sparsity coefficient.
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// F = expansion * D.
    pub expansion: usize,
    pub rng_seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            beta: 5e-4,
            lr: 1e-3,
            steps: 2000,
            batch: 256,
            expansion: 8,
            rng_seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(DucError::param("beta", "must be >= 0"));
        }
        if self.expansion < 1 {
            return Err(DucError::param("expansion", "must be >= 1"));
        }
        if self.steps < 1 || self.batch < 1 {
            return Err(DucError::param("steps", "steps and batch must be >= 1"));
        }
        Ok(())
    }
}

/// Per-feature activation statistics over a calibration corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureStats {
    pub max_activation: Vec<f64>,
    pub activation_rate: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SaeEval {
    pub mean_relative_error: f64,
    pub mean_active_fraction: f64,
}

/// Mean relative reconstruction error and mean active-feature fraction over
/// a sample of activation rows.
pub fn evaluate_sae(sae: &SaeParams, rows: &Mat) -> SaeEval {
    let mut rel = 0.0;
    let mut active = 0.0;
    for t in 0..rows.rows {
        let x = rows.row(t);
        let f = sae.encode(x).expect("matching dims");
        let xh = sae.decode(&f).expect("matching dims");
        let err: f64 = x
            .iter()
            .zip(&xh)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        rel += if norm > 0.0 { err / norm } else { 0.0 };
        active += f.iter().filter(|&&v| v > 0.0).count() as f64 / f.len() as f64;
    }
    let n = rows.rows.max(1) as f64;
    SaeEval {
        mean_relative_error: rel / n,
        mean_active_fraction: active / n,
    }
}

struct AdamBuf {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamBuf {
    fn new(n: usize) -> Self {
        AdamBuf {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for j in 0..p.len() {
            let gj = g[j];
            self.m[j] = B1 * self.m[j] + (1.0 - B1) * gj;
            self.v[j] = B2 * self.v[j] + (1.0 - B2) * gj * gj;
            p[j] -= lr * (self.m[j] / bc1) / ((self.v[j] / bc2).sqrt() + EPS);
        }
    }
}

/// Train an SAE on activation rows. Deterministic under `cfg.rng_seed`;
/// requires at least `10 * F` rows.
pub fn train_sae(cfg: &SaeTrainConfig, activations: &Mat, layer: usize) -> Result<SaeParams> {
    cfg.validate()?;
    let d = activations.cols;
    let f_dim = cfg.expansion * d;
    if activations.rows < 10 * f_dim {
        return Err(DucError::param(
            "activations",
            format!("need >= {} rows, got {}", 10 * f_dim, activations.rows),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "sae-init"));
    let mut w_dec = Mat::zeros(f_dim, d);
    for i in 0..f_dim {
        let row = w_dec.row_mut(i);
        for v in row.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let norm = dot(row, row).sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    // tied init: encoder rows start as the decoder directions
    let w_enc = w_dec.clone();
    // decoder bias starts at the data mean
    let mut b_dec = vec![0.0; d];
    let probe = activations.rows.min(4096);
    for t in 0..probe {
        for (b, &x) in b_dec.iter_mut().zip(activations.row(t)) {
            *b += x;
        }
    }
    b_dec.iter_mut().for_each(|b| *b /= probe as f64);

    let mut sae = SaeParams {
        w_enc,
        b_enc: vec![0.0; f_dim],
        w_dec,
        b_dec,
        layer,
    };

    let mut adam_we = AdamBuf::new(f_dim * d);
    let mut adam_be = AdamBuf::new(f_dim);
    let mut adam_wd = AdamBuf::new(f_dim * d);
    let mut adam_bd = AdamBuf::new(d);

    let mut g_we = vec![0.0; f_dim * d];
    let mut g_be = vec![0.0; f_dim];
    let mut g_wd = vec![0.0; f_dim * d];
    let mut g_bd = vec![0.0; d];

    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "sae-batches"));
    for step in 1..=cfg.steps {
        g_we.iter_mut().for_each(|v| *v = 0.0);
        g_be.iter_mut().for_each(|v| *v = 0.0);
        g_wd.iter_mut().for_each(|v| *v = 0.0);
        g_bd.iter_mut().for_each(|v| *v = 0.0);
        let inv = 1.0 / cfg.batch as f64;
        let mut loss = 0.0;

        for _ in 0..cfg.batch {
            let row = batch_rng.gen_range(0..activations.rows);
            let x = activations.row(row);
            let f = sae.encode(x)?;
            let xh = sae.decode(&f)?;
            let mut dxh = vec![0.0; d];
            for j in 0..d {
                let r = xh[j] - x[j];
                loss += r * r;
                dxh[j] = 2.0 * r * inv;
            }
            for (bg, &dv) in g_bd.iter_mut().zip(&dxh) {
                *bg += dv;
            }
            for (i, &fi) in f.iter().enumerate() {
                if fi <= 0.0 {
                    continue;
                }
                loss += cfg.beta * fi;
                // decoder grads and feature grad
                let wd_row = sae.w_dec.row(i);
                let mut dfi = cfg.beta * inv;
                let gw = &mut g_wd[i * d..(i + 1) * d];
                for j in 0..d {
                    gw[j] += fi * dxh[j];
                    dfi += wd_row[j] * dxh[j];
                }
                // encoder grads (ReLU already gated by fi > 0)
                g_be[i] += dfi;
                let ge = &mut g_we[i * d..(i + 1) * d];
                for j in 0..d {
                    ge[j] += dfi * x[j];
                }
            }
        }
        if !loss.is_finite() {
            return Err(DucError::Training { step });
        }

        adam_we.step(&mut sae.w_enc.data, &g_we, cfg.lr, step);
        adam_be.step(&mut sae.b_enc, &g_be, cfg.lr, step);
        adam_wd.step(&mut sae.w_dec.data, &g_wd, cfg.lr, step);
        adam_bd.step(&mut sae.b_dec, &g_bd, cfg.lr, step);

        for i in 0..f_dim {
            let row = sae.w_dec.row_mut(i);
            let norm = dot(row, row).sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }

    Ok(sae)
}

/// Per-feature max activation and firing rate over an activation sample.
pub fn calibrate(sae: &SaeParams, activations: &Mat) -> Result<FeatureStats> {
    if activations.rows == 0 {
        return Err(DucError::param("activations", "must be non-empty"));
    }
    let f_dim = sae.n_features();
    let mut max_activation = vec![0.0; f_dim];
    let mut fired = vec![0usize; f_dim];
    for t in 0..activations.rows {
        let f = sae.encode(activations.row(t))?;
        for (i, &fi) in f.iter().enumerate() {
            if fi > 0.0 {
                fired[i] += 1;
                if fi > max_activation[i] {
                    max_activation[i] = fi;
                }
            }
        }
    }
    let n = activations.rows as f64;
    Ok(FeatureStats {
        max_activation,
        activation_rate: fired.iter().map(|&c| c as f64 / n).collect(),
    })
}

pub fn save_sae(path: &Path, sae: &SaeParams) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "sae",
        "layer": sae.layer,
        "features": sae.n_features(),
        "d_model": sae.d_model(),
    });
    let f_dim = sae.n_features();
    let d = sae.d_model();
    weights::save_tensors(
        path,
        meta,
        &[
            ("w_enc".to_string(), vec![f_dim, d], &sae.w_enc.data),
            ("b_enc".to_string(), vec![f_dim], &sae.b_enc),
            ("w_dec".to_string(), vec![f_dim, d], &sae.w_dec.data),
            ("b_dec".to_string(), vec![d], &sae.b_dec),
        ],
    )
}

pub fn load_sae(path: &Path) -> Result<SaeParams> {
    let (meta, tensors) = weights::load_tensors(path)?;
    let layer = meta["layer"].as_u64().ok_or_else(|| DucError::Weights {
        path: path.to_path_buf(),
        msg: "missing layer metadata".to_string(),
    })? as usize;
    let get = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.clone(), d.clone()))
            .ok_or_else(|| DucError::Weights {
                path: path.to_path_buf(),
                msg: format!("missing tensor {name}"),
            })
    };
    let (se, w_enc) = get("w_enc")?;
    let (_, b_enc) = get("b_enc")?;
    let (sd, w_dec) = get("w_dec")?;
    let (_, b_dec) = get("b_dec")?;
    Ok(SaeParams {
        w_enc: Mat::from_vec(se[0], se[1], w_enc),
        b_enc,
        w_dec: Mat::from_vec(sd[0], sd[1], w_dec),
        b_dec,
        layer,
    })
}

pub fn save_stats(path: &Path, stats: &FeatureStats) -> Result<()> {
    let json = serde_json::to_string(stats).expect("stats serialize");
    std::fs::write(path, json).map_err(|e| DucError::io(path, e))
}

pub fn load_stats(path: &Path) -> Result<FeatureStats> {
    let text = std::fs::read_to_string(path).map_err(|e| DucError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DucError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sae(f_dim: usize, d: usize) -> SaeParams {
        SaeParams {
            w_enc: Mat::zeros(f_dim, d),
            b_enc: vec![0.0; f_dim],
            w_dec: Mat::zeros(f_dim, d),
            b_dec: vec![0.0; d],
            layer: 0,
        }
    }

    #[test]
    fn encode_relu_of_negatives_is_zero() {
        let mut sae = toy_sae(3, 2);
        sae.b_enc = vec![-1.0; 3];
        let f = sae.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(f, vec![0.0; 3]);
    }

    #[test]
    fn encode_identity_rows() {
        let mut sae = toy_sae(2, 2);
        sae.w_enc.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        sae.w_enc.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        let f = sae.encode(&[1.0, 0.0]).unwrap();
        assert_eq!(f, vec![1.0, 0.0]);
    }

    #[test]
    fn encode_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sae = toy_sae(3, 2);
        for v in sae.w_enc.data.iter_mut() {
            *v = gaussian(&mut rng);
        }
        for v in sae.b_enc.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let x = [gaussian(&mut rng), gaussian(&mut rng)];
        let f = sae.encode(&x).unwrap();
        for i in 0..3 {
            let manual: f64 =
                sae.w_enc.at(i, 0) * x[0] + sae.w_enc.at(i, 1) * x[1] + sae.b_enc[i];
            assert!((f[i] - manual.max(0.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn decode_zero_is_bias() {
        let mut sae = toy_sae(3, 2);
        sae.b_dec = vec![0.7, -0.3];
        assert_eq!(sae.decode(&[0.0; 3]).unwrap(), vec![0.7, -0.3]);
    }

    #[test]
    fn decode_one_hot() {
        let mut sae = toy_sae(3, 2);
        sae.b_dec = vec![1.0, 1.0];
        sae.w_dec.row_mut(1).copy_from_slice(&[0.5, -0.5]);
        let x = sae.decode(&[0.0, 2.0, 0.0]).unwrap();
        assert_eq!(x, vec![2.0, 0.0]);
    }

    #[test]
    fn decode_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut sae = toy_sae(4, 3);
        for v in sae.w_dec.data.iter_mut() {
            *v = gaussian(&mut rng);
        }
        for v in sae.b_dec.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let f: Vec<f64> = (0..4).map(|_| gaussian(&mut rng).abs()).collect();
        let x = sae.decode(&f).unwrap();
        for j in 0..3 {
            let mut manual = sae.b_dec[j];
            for i in 0..4 {
                manual += f[i] * sae.w_dec.at(i, j);
            }
            assert!((x[j] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sae = toy_sae(5, 3);
        for v in sae.w_dec.data.iter_mut() {
            *v = gaussian(&mut rng);
        }
        for v in sae.b_dec.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let f1: Vec<f64> = (0..5).map(|_| gaussian(&mut rng)).collect();
        let f2: Vec<f64> = (0..5).map(|_| gaussian(&mut rng)).collect();
        let fsum: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let d1 = sae.decode(&f1).unwrap();
        let d2 = sae.decode(&f2).unwrap();
        let ds = sae.decode(&fsum).unwrap();
        for j in 0..3 {
            let lhs = ds[j] - sae.b_dec[j];
            let rhs = (d1[j] - sae.b_dec[j]) + (d2[j] - sae.b_dec[j]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_terms() {
        let mut sae = toy_sae(2, 2);
        // perfect autoencoder on x with f = 0 when b_dec = x
        sae.b_enc = vec![-10.0; 2];
        sae.b_dec = vec![0.3, 0.4];
        let (total, recon, sparsity) = sae.loss(&[0.3, 0.4], 1.0).unwrap();
        assert_eq!((total, recon, sparsity), (0.0, 0.0, 0.0));

        // beta = 0 -> total = recon exactly
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sae = toy_sae(3, 2);
        for v in sae
            .w_enc
            .data
            .iter_mut()
            .chain(sae.w_dec.data.iter_mut())
        {
            *v = gaussian(&mut rng);
        }
        let x = [0.5, -1.0];
        let (total, recon, _) = sae.loss(&x, 0.0).unwrap();
        assert_eq!(total, recon);

        // decomposition identity at beta > 0
        let (total, recon, sparsity) = sae.loss(&x, 0.25).unwrap();
        assert!((total - recon - 0.25 * sparsity).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let sae = toy_sae(3, 2);
        assert!(matches!(
            sae.encode(&[1.0; 3]),
            Err(DucError::Dimension { .. })
        ));
        assert!(matches!(
            sae.decode(&[1.0; 2]),
            Err(DucError::Dimension { .. })
        ));
    }

    fn synthetic_activations(rows: usize, d: usize, seed: u64) -> Mat {
        // low-rank data: 3 ground-truth directions plus noise
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dirs: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                let n = dot(&v, &v).sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let mut m = Mat::zeros(rows, d);
        for t in 0..rows {
            let row = m.row_mut(t);
            for dir in &dirs {
                let c = gaussian(&mut rng).abs();
                for (r, &dv) in row.iter_mut().zip(dir) {
                    *r += c * dv;
                }
            }
            for r in row.iter_mut() {
                *r += 0.01 * gaussian(&mut rng);
            }
        }
        m
    }

    #[test]
    fn train_sae_reduces_error_and_is_deterministic() {
        let acts = synthetic_activations(700, 8, 3);
        let cfg = SaeTrainConfig {
            beta: 1e-4,
            lr: 3e-3,
            steps: 300,
            batch: 32,
            expansion: 2,
            rng_seed: 5,
        };
        let sae = train_sae(&cfg, &acts, 1).unwrap();
        let eval = evaluate_sae(&sae, &acts);
        assert!(
            eval.mean_relative_error < 0.5,
            "rel err {}",
            eval.mean_relative_error
        );
        // unit decoder rows
        for i in 0..sae.n_features() {
            let n = dot(sae.w_dec.row(i), sae.w_dec.row(i)).sqrt();
            assert!((n - 1.0).abs() <= 1e-5, "row {i} norm {n}");
        }
        let sae2 = train_sae(&cfg, &acts, 1).unwrap();
        assert_eq!(sae.w_enc.data, sae2.w_enc.data);
        assert_eq!(sae.w_dec.data, sae2.w_dec.data);
    }

    #[test]
    fn train_sae_requires_enough_rows() {
        let acts = synthetic_activations(50, 8, 3);
        let cfg = SaeTrainConfig {
            expansion: 2,
            ..Default::default()
        };
        assert!(train_sae(&cfg, &acts, 0).is_err());
    }

    #[test]
    fn calibrate_matches_exhaustive_pass() {
        let mut sae = toy_sae(3, 2);
        sae.w_enc.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        sae.w_enc.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        sae.b_enc[2] = -100.0; // never fires
        let mut acts = Mat::zeros(4, 2);
        acts.row_mut(0).copy_from_slice(&[1.0, -1.0]);
        acts.row_mut(1).copy_from_slice(&[2.0, 0.5]);
        acts.row_mut(2).copy_from_slice(&[-3.0, 0.0]);
        acts.row_mut(3).copy_from_slice(&[0.0, 0.0]);
        let stats = calibrate(&sae, &acts).unwrap();
        assert_eq!(stats.max_activation[0], 2.0);
        assert_eq!(stats.max_activation[1], 0.5);
        assert_eq!(stats.max_activation[2], 0.0);
        assert_eq!(stats.activation_rate[0], 0.5);
        assert_eq!(stats.activation_rate[1], 0.25);
        assert_eq!(stats.activation_rate[2], 0.0);
    }

    #[test]
    fn calibrate_constant_stream_rates_are_zero_or_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut sae = toy_sae(6, 3);
        for v in sae.w_enc.data.iter_mut() {
            *v = gaussian(&mut rng);
        }
        let mut acts = Mat::zeros(5, 3);
        for t in 0..5 {
            acts.row_mut(t).copy_from_slice(&[0.5, -0.25, 1.0]);
        }
        let stats = calibrate(&sae, &acts).unwrap();
        for &r in &stats.activation_rate {
            assert!(r == 0.0 || r == 1.0);
        }
    }

    #[test]
    fn sae_save_load_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut sae = toy_sae(4, 3);
        for v in sae
            .w_enc
            .data
            .iter_mut()
            .chain(sae.w_dec.data.iter_mut())
        {
            *v = (gaussian(&mut rng) * 4.0).round() / 4.0; // f32-exact values
        }
        sae.layer = 2;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.bin");
        save_sae(&path, &sae).unwrap();
        let loaded = load_sae(&path).unwrap();
        assert_eq!(loaded.layer, 2);
        assert_eq!(loaded.w_enc.data, sae.w_enc.data);
        assert_eq!(loaded.w_dec.data, sae.w_dec.data);
    }
}
