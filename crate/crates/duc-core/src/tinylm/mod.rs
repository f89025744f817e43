//! Minimal decoder-only transformer: trainable, instrumentable (residual
//! trace + hooks), with four decoding strategies and sequence scoring.

pub mod decode;
pub mod math;
pub mod model;
pub mod train;
pub mod weights;

pub use decode::{
    generate, perplexity, perplexity_from, DecoderRegistry, DecodingStrategy, GenerationConfig,
    StrategyKind,
};
pub use math::Mat;
pub use model::{GenState, HookFn, HookSet, ModelConfig, ModelParams, ResidualTrace};
pub use train::{batch_loss, batch_loss_and_grads, train_lm, TrainOptions, TrainReport};

use std::path::Path;

use crate::{DucError, Result};

/// Save model weights in the shared container format, with the config echoed
/// in the manifest metadata.
pub fn save_model(path: &Path, params: &ModelParams) -> Result<()> {
    let meta = serde_json::json!({
        "kind": "tinylm",
        "config": params.config,
    });
    let d = params.config.d_model;
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (name, data) in params.tensors() {
        let shape = shape_of(&name, &params.config, data.len(), d);
        tensors.push((name, shape, data));
    }
    weights::save_tensors(path, meta, &tensors)
}

fn shape_of(name: &str, cfg: &ModelConfig, len: usize, d: usize) -> Vec<usize> {
    match name {
        "tok_emb" => vec![cfg.vocab_size, d],
        "pos_emb" => vec![cfg.max_seq, d],
        n if n.ends_with("w_qkv") => vec![d, 3 * d],
        n if n.ends_with("w_o") => vec![d, d],
        n if n.ends_with("w_fc") => vec![d, cfg.d_ff],
        n if n.ends_with("w_proj") => vec![cfg.d_ff, d],
        _ => vec![len],
    }
}

/// Load model weights saved by [`save_model`].
pub fn load_model(path: &Path) -> Result<ModelParams> {
    let (meta, tensors) = weights::load_tensors(path)?;
    let config: ModelConfig =
        serde_json::from_value(meta.get("config").cloned().unwrap_or_default()).map_err(|e| {
            DucError::Weights {
                path: path.to_path_buf(),
                msg: format!("missing or invalid config metadata: {e}"),
            }
        })?;
    let mut params = ModelParams::init(&config)?;
    let mut found = 0usize;
    {
        let mut views = params.tensors_mut();
        for (name, shape, data) in &tensors {
            let view = views.iter_mut().find(|(n, _)| n == name);
            let Some((_, view)) = view else {
                return Err(DucError::Weights {
                    path: path.to_path_buf(),
                    msg: format!("unknown tensor {name}"),
                });
            };
            let count: usize = shape.iter().product();
            if count != view.len() || data.len() != view.len() {
                return Err(DucError::Dimension {
                    context: "load_model",
                    expected: view.len(),
                    got: data.len(),
                });
            }
            view.copy_from_slice(data);
            found += 1;
        }
    }
    let expected = params.tensors().len();
    if found != expected {
        return Err(DucError::Weights {
            path: path.to_path_buf(),
            msg: format!("expected {expected} tensors, found {found}"),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_save_load_roundtrip() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 10,
            max_seq: 12,
            rng_seed: 3,
        };
        let params = ModelParams::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.bin");
        save_model(&path, &params).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        // values pass through f32; compare at f32 precision
        for ((_, a), (_, b)) in params.tensors().iter().zip(loaded.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn corrupted_weights_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.bin");
        std::fs::write(&path, b"garbage data").unwrap();
        assert!(load_model(&path).is_err());
    }
}
