//! Feature steering and the repetition-feature pipeline: activate features in
//! the residual stream, scan an SAE's dictionary for features that induce
//! repetition, run the ratio-batched activation experiment, and evaluate
//! deactivation-based mitigation against standard decoding strategies.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{entropy_norm, repeat_score};
use crate::sae::{FeatureStats, SaeParams};
use crate::tinylm::math::Mat;
use crate::tinylm::{
    generate, perplexity_from, GenerationConfig, HookSet, ModelParams, StrategyKind,
};
use crate::{derive_seed, DucError, Result, TokenSeq};

/// Residual contribution a deactivated feature is reduced to.
pub const DEACTIVATION_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteeringMode {
    Activate,
    Deactivate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SteeringPositions {
    All,
    GeneratedOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub layer: usize,
    pub feature_idx: usize,
    /// Steering coefficient; used in Activate mode only.
    pub lambda: f64,
    pub mode: SteeringMode,
    pub positions: SteeringPositions,
}

impl SteeringSpec {
    pub fn activate(layer: usize, feature_idx: usize, lambda: f64) -> Self {
        SteeringSpec {
            layer,
            feature_idx,
            lambda,
            mode: SteeringMode::Activate,
            positions: SteeringPositions::All,
        }
    }

    pub fn deactivate(layer: usize, feature_idx: usize) -> Self {
        SteeringSpec {
            layer,
            feature_idx,
            lambda: 0.0,
            mode: SteeringMode::Deactivate,
            positions: SteeringPositions::All,
        }
    }

    pub fn validate(&self, sae: &SaeParams) -> Result<()> {
        if self.feature_idx >= sae.n_features() {
            return Err(DucError::param("feature_idx", "out of range"));
        }
        if self.mode == SteeringMode::Activate && self.lambda < 0.0 {
            return Err(DucError::param("lambda", "must be >= 0 in Activate mode"));
        }
        Ok(())
    }
}

/// Steer one residual row in place.
pub fn steer_row(sae: &SaeParams, spec: &SteeringSpec, row: &mut [f64]) {
    steer_row_scaled(sae, spec, row, 1.0);
}

/// Steer a raw residual row for an SAE that was trained on activations
/// standardized by `input_scale` (SAE space = `input_scale` x raw space).
/// Feature values are read in SAE space; edits are mapped back to raw space.
pub fn steer_row_scaled(sae: &SaeParams, spec: &SteeringSpec, row: &mut [f64], input_scale: f64) {
    let w = sae.w_dec.row(spec.feature_idx);
    match spec.mode {
        SteeringMode::Activate => {
            let delta = spec.lambda / input_scale;
            for (r, &wv) in row.iter_mut().zip(w) {
                *r += delta * wv;
            }
        }
        SteeringMode::Deactivate => {
            // encode is linear pre-ReLU, so f(scale*row) needs no copy
            let i = spec.feature_idx;
            let f = (crate::tinylm::math::dot(sae.w_enc.row(i), row) * input_scale
                + sae.b_enc[i])
                .max(0.0);
            if f > DEACTIVATION_FLOOR {
                let delta = (DEACTIVATION_FLOOR - f) / input_scale;
                for (r, &wv) in row.iter_mut().zip(w) {
                    *r += delta * wv;
                }
            }
        }
    }
}

/// Apply a steering edit to an activations matrix (positions x D). Rows with
/// index >= `gen_start` count as generated positions; pass 0 to treat every
/// row as selected under either positions policy.
pub fn apply_steering(
    sae: &SaeParams,
    spec: &SteeringSpec,
    x: &Mat,
    gen_start: usize,
) -> Result<Mat> {
    spec.validate(sae)?;
    if x.cols != sae.d_model() {
        return Err(DucError::Dimension {
            context: "apply_steering",
            expected: sae.d_model(),
            got: x.cols,
        });
    }
    let mut out = x.clone();
    for pos in 0..out.rows {
        if spec.positions == SteeringPositions::GeneratedOnly && pos < gen_start {
            continue;
        }
        steer_row(sae, spec, out.row_mut(pos));
    }
    Ok(out)
}

/// Build forward-pass hooks applying every spec at its layer. `prompt_len`
/// is the boundary used by the GeneratedOnly positions policy; `input_scale`
/// is the activation standardization factor the SAE was trained under
/// (1.0 when the SAE operates directly on raw residuals).
pub fn steering_hooks(
    sae: &Arc<SaeParams>,
    specs: &[SteeringSpec],
    prompt_len: usize,
    input_scale: f64,
) -> Result<HookSet> {
    if !(input_scale > 0.0) {
        return Err(DucError::param("input_scale", "must be > 0"));
    }
    let mut hooks = HookSet::new();
    for spec in specs {
        spec.validate(sae)?;
        let sae = Arc::clone(sae);
        let spec = spec.clone();
        hooks.add(
            spec.layer,
            Box::new(move |row: &mut [f64], pos: usize| {
                if spec.positions == SteeringPositions::GeneratedOnly && pos < prompt_len {
                    return;
                }
                steer_row_scaled(&sae, &spec, row, input_scale);
            }),
        );
    }
    Ok(hooks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureClass {
    RepetitionFeature,
    CommonFeature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub layer: usize,
    pub feature_idx: usize,
    pub mean_repeat_score: f64,
    pub class: FeatureClass,
    pub max_activation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionSet {
    EQ,
    AQ,
    NQ,
}

impl QuestionSet {
    pub fn name(&self) -> &'static str {
        match self {
            QuestionSet::EQ => "EQ",
            QuestionSet::AQ => "AQ",
            QuestionSet::NQ => "NQ",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Mean-repeat-score threshold for RepetitionFeature classification.
    pub rho: f64,
    /// Multiplier on a feature's calibrated max activation.
    pub lambda_scale: f64,
    /// When set, steer with this raw lambda instead of scaling max activation.
    pub lambda_absolute: Option<f64>,
    pub questions_per_feature: usize,
    pub gen_tokens: usize,
    pub question_set: QuestionSet,
    pub rng_seed: u64,
    /// Activation standardization factor the SAE was trained under.
    pub input_scale: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            rho: 0.4,
            lambda_scale: 2.0,
            lambda_absolute: None,
            questions_per_feature: 5,
            gen_tokens: 64,
            question_set: QuestionSet::EQ,
            rng_seed: 0,
            input_scale: 1.0,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(DucError::param("rho", "must be in (0,1)"));
        }
        if self.lambda_scale <= 0.0 {
            return Err(DucError::param("lambda_scale", "must be > 0"));
        }
        if self.questions_per_feature < 1 || self.gen_tokens < 1 {
            return Err(DucError::param(
                "questions_per_feature",
                "questions_per_feature and gen_tokens must be >= 1",
            ));
        }
        if !(self.input_scale > 0.0) {
            return Err(DucError::param("input_scale", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedFeature {
    pub feature_idx: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub records: Vec<FeatureRecord>,
    pub skipped: Vec<SkippedFeature>,
}

fn scan_lambda(cfg: &ScanConfig, max_activation: f64) -> f64 {
    cfg.lambda_absolute
        .unwrap_or(cfg.lambda_scale * max_activation)
}

fn classify(rs: f64, rho: f64) -> FeatureClass {
    if rs >= rho {
        FeatureClass::RepetitionFeature
    } else {
        FeatureClass::CommonFeature
    }
}

/// Steer each live feature in turn and record the mean repeat score of the
/// induced generations. Per-feature randomness is derived from
/// (seed, feature_idx), so results are independent of iteration order.
pub fn scan_features(
    params: &ModelParams,
    sae: &Arc<SaeParams>,
    stats: &FeatureStats,
    cfg: &ScanConfig,
    questions: &[TokenSeq],
) -> Result<ScanOutcome> {
    cfg.validate()?;
    if questions.is_empty() {
        return Err(DucError::param("questions", "must be non-empty"));
    }
    if stats.max_activation.len() != sae.n_features() {
        return Err(DucError::Dimension {
            context: "scan_features stats",
            expected: sae.n_features(),
            got: stats.max_activation.len(),
        });
    }
    let gcfg = GenerationConfig {
        strategy: StrategyKind::Greedy,
        max_new_tokens: cfg.gen_tokens,
        ..Default::default()
    };
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for idx in 0..sae.n_features() {
        let max_act = stats.max_activation[idx];
        if max_act <= 0.0 {
            skipped.push(SkippedFeature {
                feature_idx: idx,
                reason: "never fires on the calibration sample".to_string(),
            });
            continue;
        }
        let spec = SteeringSpec::activate(sae.layer, idx, scan_lambda(cfg, max_act));
        let hooks = steering_hooks(sae, std::slice::from_ref(&spec), 0, cfg.input_scale)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, &format!("scan/{idx}")));
        let mut total = 0.0;
        for _ in 0..cfg.questions_per_feature {
            let q = &questions[rng.gen_range(0..questions.len())];
            let gen = generate(params, q, &gcfg, &hooks)?;
            total += repeat_score(&gen, 1, 1.0)?;
        }
        let rs = total / cfg.questions_per_feature as f64;
        records.push(FeatureRecord {
            layer: sae.layer,
            feature_idx: idx,
            mean_repeat_score: rs,
            class: classify(rs, cfg.rho),
            max_activation: max_act,
        });
    }
    Ok(ScanOutcome { records, skipped })
}

/// Repetition features sorted by descending mean repeat score (ties toward
/// the lower feature index).
pub fn repetition_features(records: &[FeatureRecord]) -> Vec<&FeatureRecord> {
    let mut rf: Vec<&FeatureRecord> = records
        .iter()
        .filter(|r| r.class == FeatureClass::RepetitionFeature)
        .collect();
    rf.sort_by(|a, b| {
        b.mean_repeat_score
            .partial_cmp(&a.mean_repeat_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.feature_idx.cmp(&b.feature_idx))
    });
    rf
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionStats {
    pub mean_repeat_score: f64,
    pub mean_entropy: f64,
    pub mean_perplexity: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub dataset: String,
    pub condition: String,
    pub ratio: f64,
    pub features_used: usize,
    #[serde(flatten)]
    pub stats: ConditionStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
    pub warnings: Vec<String>,
}

pub const RATIO_LEVELS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

/// Generate on every question with the given hooks and average the metrics.
/// Perplexity is measured on the generated continuation under the hook-free
/// model.
fn condition_stats(
    params: &ModelParams,
    hooks: &HookSet,
    questions: &[TokenSeq],
    gcfg: &GenerationConfig,
) -> Result<ConditionStats> {
    let mut rs = 0.0;
    let mut ent = 0.0;
    let mut ppl = 0.0;
    let mut count = 0usize;
    let mut ppl_count = 0usize;
    for q in questions {
        let gen = generate(params, q, gcfg, hooks)?;
        rs += repeat_score(&gen, 1, 1.0)?;
        ent += if gen.is_empty() {
            0.0
        } else {
            entropy_norm(&gen)?
        };
        count += 1;
        if !gen.is_empty() {
            let mut full = q.clone();
            full.extend_from_slice(&gen);
            ppl += perplexity_from(params, &full, q.len())?;
            ppl_count += 1;
        }
    }
    let n = count.max(1) as f64;
    Ok(ConditionStats {
        mean_repeat_score: rs / n,
        mean_entropy: ent / n,
        mean_perplexity: if ppl_count > 0 {
            ppl / ppl_count as f64
        } else {
            0.0
        },
        count,
    })
}

/// Build activation specs for a joint steering intervention. `budget_split`
/// divides each feature's scan coefficient. Feature directions add roughly
/// incoherently, so a joint kick grows with the square root of the subset
/// size; the ratio experiment splits by the size of its smallest subset, so
/// the ratio-0.1 cell already intervenes at single-feature scan strength
/// (past the repetition onset for repetition features) and the kick grows
/// about threefold by ratio 1.0 while the incoherent common-feature control
/// stays below its own degeneration point at every ratio.
fn activation_specs(
    sae: &SaeParams,
    cfg: &ScanConfig,
    feats: &[&FeatureRecord],
    budget_split: f64,
) -> Vec<SteeringSpec> {
    feats
        .iter()
        .map(|r| {
            SteeringSpec::activate(
                sae.layer,
                r.feature_idx,
                scan_lambda(cfg, r.max_activation) / budget_split,
            )
        })
        .collect()
}

/// Ratio-batched activation experiment: steer growing prefixes of the
/// repetition-feature list (and matched common-feature samples), plus a
/// deactivated condition on the same subsets.
pub fn ratio_experiment(
    params: &ModelParams,
    sae: &Arc<SaeParams>,
    records: &[FeatureRecord],
    cfg: &ScanConfig,
    datasets: &[(String, Vec<TokenSeq>)],
) -> Result<RatioReport> {
    cfg.validate()?;
    let rf = repetition_features(records);
    if rf.is_empty() {
        return Err(DucError::param(
            "records",
            "need at least one RepetitionFeature",
        ));
    }
    // one shuffled CF order shared across ratios, so CF subsets nest like RF
    let mut cf: Vec<&FeatureRecord> = records
        .iter()
        .filter(|r| r.class == FeatureClass::CommonFeature)
        .collect();
    let mut cf_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, "ratio-cf"));
    cf.shuffle(&mut cf_rng);
    let joint_split = (RATIO_LEVELS[0] * rf.len() as f64).sqrt().max(1.0);

    let gcfg = GenerationConfig {
        strategy: StrategyKind::Greedy,
        max_new_tokens: cfg.gen_tokens,
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (name, questions) in datasets {
        if questions.is_empty() {
            warnings.push(format!("dataset {name} is empty; skipped"));
            continue;
        }
        let original = condition_stats(params, &HookSet::new(), questions, &gcfg)?;
        for &ratio in &RATIO_LEVELS {
            let k = ((ratio * rf.len() as f64).ceil() as usize).min(rf.len());
            if k == 0 {
                warnings.push(format!("ratio {ratio} selects no features; row skipped"));
                continue;
            }
            let rf_subset = &rf[..k];
            let cf_subset = &cf[..k.min(cf.len())];
            if cf_subset.len() < k {
                warnings.push(format!(
                    "only {} common features available for ratio {ratio}",
                    cf_subset.len()
                ));
            }

            rows.push(RatioRow {
                dataset: name.clone(),
                condition: "original".to_string(),
                ratio,
                features_used: 0,
                stats: original.clone(),
            });

            let rf_hooks = steering_hooks(
                sae,
                &activation_specs(sae, cfg, rf_subset, joint_split),
                0,
                cfg.input_scale,
            )?;
            rows.push(RatioRow {
                dataset: name.clone(),
                condition: "activated_RF".to_string(),
                ratio,
                features_used: k,
                stats: condition_stats(params, &rf_hooks, questions, &gcfg)?,
            });

            if !cf_subset.is_empty() {
                let cf_hooks = steering_hooks(
                    sae,
                    &activation_specs(sae, cfg, cf_subset, joint_split),
                    0,
                    cfg.input_scale,
                )?;
                rows.push(RatioRow {
                    dataset: name.clone(),
                    condition: "activated_CF".to_string(),
                    ratio,
                    features_used: cf_subset.len(),
                    stats: condition_stats(params, &cf_hooks, questions, &gcfg)?,
                });
            }

            let deact_specs: Vec<SteeringSpec> = rf_subset
                .iter()
                .map(|r| SteeringSpec::deactivate(sae.layer, r.feature_idx))
                .collect();
            let deact_hooks = steering_hooks(sae, &deact_specs, 0, cfg.input_scale)?;
            rows.push(RatioRow {
                dataset: name.clone(),
                condition: "deactivated".to_string(),
                ratio,
                features_used: k,
                stats: condition_stats(params, &deact_hooks, questions, &gcfg)?,
            });
        }
    }
    Ok(RatioReport { rows, warnings })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationRow {
    pub dataset: String,
    pub method: String,
    #[serde(flatten)]
    pub stats: ConditionStats,
}

/// Compare standard decoding strategies against greedy decoding with every
/// repetition feature deactivated.
pub fn mitigation_eval(
    params: &ModelParams,
    sae: &Arc<SaeParams>,
    records: &[FeatureRecord],
    datasets: &[(String, Vec<TokenSeq>)],
    gen_tokens: usize,
    rng_seed: u64,
    input_scale: f64,
) -> Result<Vec<MitigationRow>> {
    let rf = repetition_features(records);
    if rf.is_empty() {
        return Err(DucError::param(
            "records",
            "need at least one RepetitionFeature",
        ));
    }
    let deact_specs: Vec<SteeringSpec> = rf
        .iter()
        .map(|r| SteeringSpec::deactivate(sae.layer, r.feature_idx))
        .collect();
    let duc_hooks = steering_hooks(sae, &deact_specs, 0, input_scale)?;

    let base = GenerationConfig {
        max_new_tokens: gen_tokens,
        ..Default::default()
    };
    let methods: Vec<(&str, GenerationConfig)> = vec![
        ("greedy", GenerationConfig {
            strategy: StrategyKind::Greedy,
            ..base.clone()
        }),
        ("beam", GenerationConfig {
            strategy: StrategyKind::Beam,
            ..base.clone()
        }),
        ("topk", GenerationConfig {
            strategy: StrategyKind::TopK,
            rng_seed: derive_seed(rng_seed, "mitigate-topk"),
            ..base.clone()
        }),
        ("topp", GenerationConfig {
            strategy: StrategyKind::TopP,
            rng_seed: derive_seed(rng_seed, "mitigate-topp"),
            ..base.clone()
        }),
        ("duc", GenerationConfig {
            strategy: StrategyKind::Greedy,
            ..base.clone()
        }),
    ];
    let empty = HookSet::new();
    let mut rows = Vec::new();
    for (name, questions) in datasets {
        for (method, gcfg) in &methods {
            let hooks = if *method == "duc" { &duc_hooks } else { &empty };
            let stats = condition_stats(params, hooks, questions, gcfg)?;
            rows.push(MitigationRow {
                dataset: name.clone(),
                method: method.to_string(),
                stats,
            });
        }
    }
    Ok(rows)
}
