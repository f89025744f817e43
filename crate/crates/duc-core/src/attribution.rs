//! Layer localization via logit-difference attribution.
//!
//! Each template induces a repetition and names the `correct` token that
//! continues it plus an `incorrect` distractor. A layer's contribution is the
//! dot product of its (final-normalized) residual at the last prompt position
//! with the unembedding difference of the two tokens; layers are ranked by the
//! mean contribution over templates.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tinylm::math::dot;
use crate::tinylm::{HookSet, ModelParams};
use crate::{DucError, Result, TokenId, TokenSeq};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Template {
    pub prompt: TokenSeq,
    pub correct: TokenId,
    pub incorrect: TokenId,
}

impl Template {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(DucError::param("prompt", "must be non-empty"));
        }
        if self.correct == self.incorrect {
            return Err(DucError::param(
                "incorrect",
                "correct and incorrect tokens must differ",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionResult {
    /// Mean contribution per layer, over templates.
    pub layer_contributions: Vec<f64>,
    /// Layer indices sorted by contribution descending; ties break toward
    /// the lower index.
    pub ranked_layers: Vec<usize>,
    pub templates_used: usize,
}

impl AttributionResult {
    /// The two layers fed to the downstream feature scan.
    pub fn repetition_layers(&self) -> Vec<usize> {
        self.ranked_layers.iter().take(2).copied().collect()
    }
}

/// Unembedding difference: column of `correct` minus column of `incorrect`.
pub fn diff_direction(
    params: &ModelParams,
    correct: TokenId,
    incorrect: TokenId,
) -> Result<Vec<f64>> {
    let c = params.unembed_direction(correct)?;
    let i = params.unembed_direction(incorrect)?;
    Ok(c.iter().zip(&i).map(|(a, b)| a - b).collect())
}

/// Per-layer contribution of a template: residual at the last prompt
/// position, final-normalized when `apply_final_norm`, dotted with the
/// logit-difference direction.
pub fn layer_contributions_opt(
    params: &ModelParams,
    template: &Template,
    apply_final_norm: bool,
) -> Result<Vec<f64>> {
    template.validate()?;
    let dir = diff_direction(params, template.correct, template.incorrect)?;
    let (_, trace) = params.forward(&template.prompt, &HookSet::new())?;
    let last = template.prompt.len() - 1;
    Ok(trace
        .layers
        .iter()
        .map(|resid| {
            let row = resid.row(last);
            if apply_final_norm {
                dot(&params.final_norm_row(row), &dir)
            } else {
                dot(row, &dir)
            }
        })
        .collect())
}

pub fn layer_contributions(params: &ModelParams, template: &Template) -> Result<Vec<f64>> {
    layer_contributions_opt(params, template, true)
}

/// Rank layers by mean contribution over the template set.
pub fn rank_layers(params: &ModelParams, templates: &[Template]) -> Result<AttributionResult> {
    rank_layers_opt(params, templates, true)
}

pub fn rank_layers_opt(
    params: &ModelParams,
    templates: &[Template],
    apply_final_norm: bool,
) -> Result<AttributionResult> {
    if templates.is_empty() {
        return Err(DucError::param("templates", "must be non-empty"));
    }
    let n_layers = params.config.n_layers;
    let mut mean = vec![0.0; n_layers];
    for t in templates {
        let c = layer_contributions_opt(params, t, apply_final_norm)?;
        for (m, v) in mean.iter_mut().zip(&c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= templates.len() as f64);
    let mut ranked: Vec<usize> = (0..n_layers).collect();
    ranked.sort_by(|&a, &b| {
        mean[b]
            .partial_cmp(&mean[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(AttributionResult {
        layer_contributions: mean,
        ranked_layers: ranked,
        templates_used: templates.len(),
    })
}

/// Independent check: zero out each layer's block in turn and measure the
/// drop in the final logit difference; the layer whose removal hurts most is
/// the oracle's top layer.
pub fn ablation_top_layer(params: &ModelParams, template: &Template) -> Result<usize> {
    template.validate()?;
    let last = template.prompt.len() - 1;
    let logit_diff = |ablate: Option<usize>| -> Result<f64> {
        let (logits, _) = params.forward_full(&template.prompt, &HookSet::new(), ablate)?;
        let row = logits.row(last);
        Ok(row[template.correct as usize] - row[template.incorrect as usize])
    };
    let base = logit_diff(None)?;
    let mut best = 0;
    let mut best_drop = f64::NEG_INFINITY;
    for l in 0..params.config.n_layers {
        let drop = base - logit_diff(Some(l))?;
        if drop > best_drop {
            best_drop = drop;
            best = l;
        }
    }
    Ok(best)
}

/// Templates file: one JSON object {"prompt": [ids], "correct", "incorrect"}
/// per line.
pub fn read_templates(path: &Path) -> Result<Vec<Template>> {
    let file = std::fs::File::open(path).map_err(|e| DucError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DucError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Template = serde_json::from_str(&line).map_err(|e| DucError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_templates(path: &Path, templates: &[Template]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| DucError::io(path, e))?;
    for t in templates {
        let line = serde_json::to_string(t).expect("template serializes");
        writeln!(file, "{line}").map_err(|e| DucError::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;

    fn small_model(seed: u64) -> ModelParams {
        ModelParams::init(&ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 6,
            max_seq: 16,
            rng_seed: seed,
        })
        .unwrap()
    }

    #[test]
    fn diff_direction_same_token_is_zero() {
        let m = small_model(1);
        let d = diff_direction(&m, 2, 2).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diff_direction_matches_row_subtraction() {
        let m = small_model(2);
        let d = diff_direction(&m, 1, 4).unwrap();
        for j in 0..8 {
            assert_eq!(d[j], m.tok_emb.at(1, j) - m.tok_emb.at(4, j));
        }
    }

    #[test]
    fn diff_direction_rejects_out_of_vocab() {
        let m = small_model(1);
        assert!(matches!(
            diff_direction(&m, 0, 99),
            Err(DucError::OutOfVocab { .. })
        ));
    }

    #[test]
    fn zero_direction_gives_zero_contributions() {
        let m = small_model(3);
        // validate() forbids correct == incorrect, so compute directly with
        // a zero direction through the same path
        let t = Template {
            prompt: vec![0, 1, 2],
            correct: 3,
            incorrect: 4,
        };
        let (_, trace) = m.forward(&t.prompt, &HookSet::new()).unwrap();
        let zero = vec![0.0; 8];
        for resid in &trace.layers {
            let c = dot(&m.final_norm_row(resid.row(2)), &zero);
            assert_eq!(c, 0.0);
        }
    }

    #[test]
    fn contributions_scale_with_direction() {
        let m = small_model(4);
        let t = Template {
            prompt: vec![0, 1, 2, 1],
            correct: 2,
            incorrect: 5,
        };
        let base = layer_contributions(&m, &t).unwrap();
        // scaling the direction scales each contribution; check via a manual
        // recomputation with 3x the direction
        let dir: Vec<f64> = diff_direction(&m, 2, 5)
            .unwrap()
            .iter()
            .map(|v| 3.0 * v)
            .collect();
        let (_, trace) = m.forward(&t.prompt, &HookSet::new()).unwrap();
        for (l, resid) in trace.layers.iter().enumerate() {
            let c = dot(&m.final_norm_row(resid.row(3)), &dir);
            assert!((c - 3.0 * base[l]).abs() < 1e-9 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn single_template_ranking_is_its_sort() {
        let m = small_model(5);
        let t = Template {
            prompt: vec![1, 2, 3, 2],
            correct: 3,
            incorrect: 0,
        };
        let c = layer_contributions(&m, &t).unwrap();
        let r = rank_layers(&m, std::slice::from_ref(&t)).unwrap();
        assert_eq!(r.templates_used, 1);
        for w in r.ranked_layers.windows(2) {
            assert!(c[w[0]] >= c[w[1]]);
        }
    }

    #[test]
    fn duplicated_templates_rank_identically() {
        let m = small_model(6);
        let t = Template {
            prompt: vec![0, 4, 1, 4],
            correct: 1,
            incorrect: 5,
        };
        let one = rank_layers(&m, std::slice::from_ref(&t)).unwrap();
        let four = rank_layers(&m, &vec![t; 4]).unwrap();
        assert_eq!(one.ranked_layers, four.ranked_layers);
        for (a, b) in one.layer_contributions.iter().zip(&four.layer_contributions) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_templates_rejected() {
        let m = small_model(1);
        assert!(rank_layers(&m, &[]).is_err());
    }

    #[test]
    fn templates_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.jsonl");
        let ts = vec![
            Template {
                prompt: vec![1, 2, 1, 2],
                correct: 1,
                incorrect: 3,
            },
            Template {
                prompt: vec![4, 4],
                correct: 4,
                incorrect: 0,
            },
        ];
        write_templates(&path, &ts).unwrap();
        let back = read_templates(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].prompt, ts[0].prompt);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"prompt\":[1],\"correct\":2,\"incorrect\":2}\n").unwrap();
        assert!(read_templates(&bad).is_err());
    }
}
