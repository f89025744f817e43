//! End-to-end pipeline with resumable, content-hash-cached stages.
//!
//! Nine stages: dataset build, metric curves, LM training, layer attribution,
//! activation collection, SAE training (with calibration), feature scan,
//! ratio experiment, mitigation report. Each stage records a manifest with a
//! key hashed from its config slice and its input artifacts; a stage whose
//! key is unchanged and whose outputs exist is skipped, so deleting one
//! artifact reruns only that stage and its descendants.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{rank_layers, Template};
use crate::corpus::{build_dataset, load_corpus, read_dataset, DatasetSpec, RepetitionSample};
use crate::metrics::{metric_curves, MetricRegistry};
use crate::report;
use crate::sae::{calibrate, evaluate_sae, train_sae, SaeTrainConfig};
use crate::steering::{mitigation_eval, ratio_experiment, scan_features, QuestionSet, ScanConfig};
use crate::tinylm::math::Mat;
use crate::tinylm::{
    load_model, save_model, train_lm, weights, HookSet, ModelConfig, TrainOptions,
};
use crate::toydata;
use crate::vocab::Vocabulary;
use crate::{derive_seed, DucError, Result, TokenSeq};

/// Worker cap from the DUC_THREADS env var (execution is sequential; values
/// below 1 clamp to 1).
pub fn worker_cap() -> usize {
    std::env::var("DUC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|v| v.max(1))
        .unwrap_or(1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// External corpus; when absent the bundled toy corpus is generated.
    pub corpus: Option<PathBuf>,
    pub corpus_records: usize,
    pub min_answer_tokens: usize,

    pub samples_per_cell: usize,
    pub paragraph_samples: usize,
    pub paragraph_repeat_count: usize,
    pub n_grid_max: usize,
    pub n_grid_step: usize,
    pub m_values: Vec<usize>,

    pub lm_layers: usize,
    pub lm_d_model: usize,
    pub lm_heads: usize,
    pub lm_ff: usize,
    pub lm_max_seq: usize,
    pub lm_steps: usize,
    pub lm_lr: f64,
    pub lm_batch: usize,
    pub lm_seq_len: usize,
    /// Cap on repetition samples mixed into LM training (spread across cells).
    pub lm_dataset_samples: usize,

    pub acts_max_rows: usize,
    /// Mean activation norm after standardization.
    pub acts_target_norm: f64,

    pub sae_beta: f64,
    pub sae_lr: f64,
    pub sae_steps: usize,
    pub sae_batch: usize,
    pub sae_expansion: usize,
    pub sae_holdout_frac: f64,

    pub scan_rho: f64,
    pub scan_lambda_scale: f64,
    pub scan_lambda_absolute: Option<f64>,
    pub scan_questions_per_feature: usize,
    pub scan_gen_tokens: usize,

    pub questions_per_set: usize,
    pub eval_gen_tokens: usize,
    pub datasets: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: None,
            corpus_records: 999,
            min_answer_tokens: 160,
            samples_per_cell: 100,
            paragraph_samples: 1000,
            paragraph_repeat_count: 5,
            n_grid_max: 140,
            n_grid_step: 10,
            m_values: vec![1, 2, 5],
            lm_layers: 4,
            lm_d_model: 128,
            lm_heads: 4,
            lm_ff: 256,
            lm_max_seq: 128,
            lm_steps: 800,
            lm_lr: 1e-3,
            lm_batch: 8,
            lm_seq_len: 48,
            lm_dataset_samples: 500,
            acts_max_rows: 120_000,
            acts_target_norm: 0.0625,
            sae_beta: 5e-4,
            sae_lr: 1e-3,
            sae_steps: 6000,
            sae_batch: 256,
            sae_expansion: 8,
            sae_holdout_frac: 0.05,
            scan_rho: 0.4,
            scan_lambda_scale: 2.0,
            scan_lambda_absolute: None,
            scan_questions_per_feature: 5,
            scan_gen_tokens: 64,
            questions_per_set: 50,
            eval_gen_tokens: 64,
            datasets: vec!["EQ".to_string(), "AQ".to_string(), "NQ".to_string()],
        }
    }
}

impl RunConfig {
    /// Apply flat `key=value` overrides (the --config file format).
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &'static str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| DucError::param(key, format!("cannot parse {v:?}")))
        }
        for (k, v) in kv {
            match k.as_str() {
                "seed" => self.seed = parse("seed", v)?,
                "corpus" => self.corpus = Some(PathBuf::from(v)),
                "corpus_records" => self.corpus_records = parse("corpus_records", v)?,
                "min_answer_tokens" => self.min_answer_tokens = parse("min_answer_tokens", v)?,
                "samples_per_cell" => self.samples_per_cell = parse("samples_per_cell", v)?,
                "paragraph_samples" => self.paragraph_samples = parse("paragraph_samples", v)?,
                "paragraph_repeat_count" => {
                    self.paragraph_repeat_count = parse("paragraph_repeat_count", v)?
                }
                "n_grid_max" => self.n_grid_max = parse("n_grid_max", v)?,
                "n_grid_step" => self.n_grid_step = parse("n_grid_step", v)?,
                "m_values" => {
                    self.m_values = v
                        .split(',')
                        .map(|s| parse("m_values", s.trim()))
                        .collect::<Result<_>>()?
                }
                "lm_layers" => self.lm_layers = parse("lm_layers", v)?,
                "lm_d_model" => self.lm_d_model = parse("lm_d_model", v)?,
                "lm_heads" => self.lm_heads = parse("lm_heads", v)?,
                "lm_ff" => self.lm_ff = parse("lm_ff", v)?,
                "lm_max_seq" => self.lm_max_seq = parse("lm_max_seq", v)?,
                "lm_steps" => self.lm_steps = parse("lm_steps", v)?,
                "lm_lr" => self.lm_lr = parse("lm_lr", v)?,
                "lm_batch" => self.lm_batch = parse("lm_batch", v)?,
                "lm_seq_len" => self.lm_seq_len = parse("lm_seq_len", v)?,
                "lm_dataset_samples" => {
                    self.lm_dataset_samples = parse("lm_dataset_samples", v)?
                }
                "acts_max_rows" => self.acts_max_rows = parse("acts_max_rows", v)?,
                "acts_target_norm" => self.acts_target_norm = parse("acts_target_norm", v)?,
                "sae_beta" => self.sae_beta = parse("sae_beta", v)?,
                "sae_lr" => self.sae_lr = parse("sae_lr", v)?,
                "sae_steps" => self.sae_steps = parse("sae_steps", v)?,
                "sae_batch" => self.sae_batch = parse("sae_batch", v)?,
                "sae_expansion" => self.sae_expansion = parse("sae_expansion", v)?,
                "sae_holdout_frac" => self.sae_holdout_frac = parse("sae_holdout_frac", v)?,
                "scan_rho" => self.scan_rho = parse("scan_rho", v)?,
                "scan_lambda_scale" => self.scan_lambda_scale = parse("scan_lambda_scale", v)?,
                "scan_lambda_absolute" => {
                    self.scan_lambda_absolute = Some(parse("scan_lambda_absolute", v)?)
                }
                "scan_questions_per_feature" => {
                    self.scan_questions_per_feature = parse("scan_questions_per_feature", v)?
                }
                "scan_gen_tokens" => self.scan_gen_tokens = parse("scan_gen_tokens", v)?,
                "questions_per_set" => self.questions_per_set = parse("questions_per_set", v)?,
                "eval_gen_tokens" => self.eval_gen_tokens = parse("eval_gen_tokens", v)?,
                "datasets" => {
                    self.datasets = v.split(',').map(|s| s.trim().to_string()).collect()
                }
                other => {
                    return Err(DucError::param(
                        "config",
                        format!("unknown config key {other:?}"),
                    ))
                }
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_grid: (0..=self.n_grid_max).step_by(self.n_grid_step).collect(),
            m_values: self.m_values.clone(),
            samples_per_cell: self.samples_per_cell,
            paragraph_samples: self.paragraph_samples,
            paragraph_repeat_count: self.paragraph_repeat_count,
            rng_seed: derive_seed(self.seed, "dataset"),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.lm_layers,
            d_model: self.lm_d_model,
            n_heads: self.lm_heads,
            d_ff: self.lm_ff,
            vocab_size,
            max_seq: self.lm_max_seq,
            rng_seed: derive_seed(self.seed, "lm-init"),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            steps: self.lm_steps,
            lr: self.lm_lr,
            batch_size: self.lm_batch,
            seq_len: self.lm_seq_len,
            holdout_frac: 0.05,
        }
    }

    pub fn sae_config(&self) -> SaeTrainConfig {
        SaeTrainConfig {
            beta: self.sae_beta,
            lr: self.sae_lr,
            steps: self.sae_steps,
            batch: self.sae_batch,
            expansion: self.sae_expansion,
            rng_seed: derive_seed(self.seed, "sae-train"),
        }
    }

    pub fn scan_config(&self, input_scale: f64) -> ScanConfig {
        ScanConfig {
            rho: self.scan_rho,
            lambda_scale: self.scan_lambda_scale,
            lambda_absolute: self.scan_lambda_absolute,
            questions_per_feature: self.scan_questions_per_feature,
            gen_tokens: self.scan_gen_tokens,
            question_set: QuestionSet::EQ,
            rng_seed: derive_seed(self.seed, "scan"),
            input_scale,
        }
    }

    fn question_sets(&self) -> Result<Vec<QuestionSet>> {
        self.datasets
            .iter()
            .map(|name| match name.as_str() {
                "EQ" => Ok(QuestionSet::EQ),
                "AQ" => Ok(QuestionSet::AQ),
                "NQ" => Ok(QuestionSet::NQ),
                other => Err(DucError::param(
                    "datasets",
                    format!("unknown question set {other:?}"),
                )),
            })
            .collect()
    }
}

/// Read a flat key=value config file ('#' starts a comment line).
pub fn read_kv_config(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DucError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| DucError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Artifact paths

pub struct Artifacts {
    pub out: PathBuf,
}

impl Artifacts {
    pub fn new(out: &Path) -> Self {
        Artifacts { out: out.to_path_buf() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.out.join("corpus.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.out.join("dataset.jsonl")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.out.join("dataset_manifest.json")
    }
    pub fn vocab(&self) -> PathBuf {
        self.out.join("vocab.json")
    }
    pub fn model(&self) -> PathBuf {
        self.out.join("model.bin")
    }
    pub fn train_report(&self) -> PathBuf {
        self.out.join("train_report.json")
    }
    pub fn templates(&self) -> PathBuf {
        self.out.join("templates.jsonl")
    }
    pub fn acts(&self) -> PathBuf {
        self.out.join("acts.bin")
    }
    pub fn sae(&self) -> PathBuf {
        self.out.join("sae.bin")
    }
    pub fn sae_meta(&self) -> PathBuf {
        self.out.join("sae_meta.json")
    }
    pub fn feature_stats(&self) -> PathBuf {
        self.out.join("feature_stats.json")
    }
    pub fn features(&self) -> PathBuf {
        self.out.join("features.jsonl")
    }
    pub fn scan_skipped(&self) -> PathBuf {
        self.out.join("scan_skipped.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.out.join("reports")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }
    pub fn stages(&self) -> PathBuf {
        self.out.join("stages")
    }
    pub fn plots(&self) -> PathBuf {
        self.report("plots")
    }
}

/// Sidecar describing the SAE's operating space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaeMeta {
    pub layer: usize,
    pub input_scale: f64,
    pub holdout_relative_error: f64,
    pub holdout_active_fraction: f64,
}

// ---------------------------------------------------------------------------
// Stage machinery

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub key: String,
    pub seed: u64,
    pub duration_secs: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub name: String,
    pub skipped: bool,
    pub duration_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub stages: Vec<StageOutcome>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DucError::io(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Stager<'a> {
    arts: &'a Artifacts,
    seed: u64,
    log: bool,
}

impl<'a> Stager<'a> {
    fn manifest_path(&self, name: &str) -> PathBuf {
        self.arts.stages().join(format!("{name}.json"))
    }

    fn failed_path(&self, name: &str) -> PathBuf {
        self.arts.stages().join(format!("{name}.failed"))
    }

    fn key(&self, name: &str, cfg_slice: &serde_json::Value, inputs: &[PathBuf]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(cfg_slice.to_string().as_bytes());
        h.update(self.seed.to_le_bytes());
        for p in inputs {
            h.update(p.file_name().unwrap_or_default().to_string_lossy().as_bytes());
            h.update(file_sha256(p)?.as_bytes());
        }
        Ok(hex(&h.finalize()))
    }

    fn run(
        &self,
        name: &str,
        cfg_slice: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageOutcome> {
        for p in inputs {
            if !p.exists() {
                return Err(DucError::MissingFile { path: p.clone() });
            }
        }
        let key = self.key(name, &cfg_slice, inputs)?;
        let mpath = self.manifest_path(name);
        if let Ok(text) = std::fs::read_to_string(&mpath) {
            if let Ok(m) = serde_json::from_str::<StageManifest>(&text) {
                if m.key == key && outputs.iter().all(|p| p.exists()) {
                    if self.log {
                        eprintln!("[{name}] up to date, skipped");
                    }
                    return Ok(StageOutcome {
                        name: name.to_string(),
                        skipped: true,
                        duration_secs: 0.0,
                    });
                }
            }
        }
        if self.log {
            eprintln!("[{name}] running");
        }
        let start = Instant::now();
        if let Err(e) = body() {
            let _ = std::fs::write(self.failed_path(name), format!("{e}\n"));
            return Err(DucError::Stage {
                stage: name.to_string(),
                msg: e.to_string(),
            });
        }
        let _ = std::fs::remove_file(self.failed_path(name));
        let duration = start.elapsed().as_secs_f64();
        let manifest = StageManifest {
            stage: name.to_string(),
            key,
            seed: self.seed,
            duration_secs: duration,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        std::fs::write(
            &mpath,
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )
        .map_err(|e| DucError::io(&mpath, e))?;
        if self.log {
            eprintln!("[{name}] done in {duration:.1}s");
        }
        Ok(StageOutcome {
            name: name.to_string(),
            skipped: false,
            duration_secs: duration,
        })
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Training sequences: question+answer streams from the corpus plus the
/// repetition samples, all vocabulary-encoded.
fn training_sequences(
    corpus: &[crate::corpus::RawSample],
    dataset: &[RepetitionSample],
    max_dataset_samples: usize,
    vocab: &Vocabulary,
) -> Vec<TokenSeq> {
    let mut seqs = Vec::with_capacity(corpus.len() + max_dataset_samples);
    for s in corpus {
        let mut seq = vocab.encode(&s.question);
        seq.extend(vocab.encode(&s.answer));
        seqs.push(seq);
    }
    // stride across the dataset so every cell contributes to the mix
    let take = max_dataset_samples.min(dataset.len());
    if take > 0 {
        let stride = (dataset.len() / take).max(1);
        for s in dataset.iter().step_by(stride).take(take) {
            seqs.push(vocab.encode_tokens(&s.tokens));
        }
    }
    seqs
}

fn encoded_questions(
    set: QuestionSet,
    count: usize,
    seed: u64,
    vocab: &Vocabulary,
) -> Vec<TokenSeq> {
    toydata::toy_questions(set, count, seed)
        .iter()
        .map(|q| vocab.encode_tokens(q))
        .collect()
}

pub fn load_acts(path: &Path) -> Result<(Mat, usize, f64)> {
    let (meta, tensors) = weights::load_tensors(path)?;
    let layer = meta["layer"].as_u64().ok_or_else(|| DucError::Weights {
        path: path.to_path_buf(),
        msg: "missing layer metadata".to_string(),
    })? as usize;
    let scale = meta["input_scale"].as_f64().unwrap_or(1.0);
    let (_, shape, data) = tensors
        .into_iter()
        .find(|(n, _, _)| n == "acts")
        .ok_or_else(|| DucError::Weights {
            path: path.to_path_buf(),
            msg: "missing acts tensor".to_string(),
        })?;
    Ok((Mat::from_vec(shape[0], shape[1], data), layer, scale))
}

fn scoped_seed(cfg: &RunConfig, label: &str) -> u64 {
    derive_seed(cfg.seed, label)
}

// ---------------------------------------------------------------------------
// Pipeline

pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    run_pipeline_opt(cfg, out, true)
}

pub fn run_pipeline_opt(cfg: &RunConfig, out: &Path, log: bool) -> Result<RunSummary> {
    let arts = Artifacts::new(out);
    std::fs::create_dir_all(arts.reports()).map_err(|e| DucError::io(&arts.reports(), e))?;
    std::fs::create_dir_all(arts.stages()).map_err(|e| DucError::io(&arts.stages(), e))?;
    let stager = Stager {
        arts: &arts,
        seed: cfg.seed,
        log,
    };
    let _ = worker_cap(); // sequential execution; env var honored as a cap
    let mut stages = Vec::new();

    stages.push(stage_dataset(cfg, &arts, &stager)?);
    stages.push(stage_curves(cfg, &arts, &stager)?);
    stages.push(stage_train_lm(cfg, &arts, &stager)?);
    stages.push(stage_attribute(cfg, &arts, &stager)?);
    stages.push(stage_collect_acts(cfg, &arts, &stager)?);
    stages.push(stage_train_sae(cfg, &arts, &stager)?);
    stages.push(stage_scan(cfg, &arts, &stager)?);
    stages.push(stage_ratio(cfg, &arts, &stager)?);
    stages.push(stage_mitigate(cfg, &arts, &stager)?);

    Ok(RunSummary { stages })
}

fn stage_dataset(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    // materialize the corpus first so it participates in the stage key
    if let Some(src) = &cfg.corpus {
        if !src.exists() {
            return Err(DucError::MissingFile { path: src.clone() });
        }
        let bytes = std::fs::read(src).map_err(|e| DucError::io(src, e))?;
        let dst = arts.corpus();
        let changed = match std::fs::read(&dst) {
            Ok(existing) => existing != bytes,
            Err(_) => true,
        };
        if changed {
            std::fs::write(&dst, bytes).map_err(|e| DucError::io(&dst, e))?;
        }
    } else if !arts.corpus().exists() {
        let samples = toydata::toy_corpus(
            cfg.corpus_records,
            cfg.min_answer_tokens,
            scoped_seed(cfg, "toy-corpus"),
        );
        toydata::write_toy_corpus(&arts.corpus(), &samples)?;
    }

    let slice = serde_json::json!({
        "spec": cfg.dataset_spec(),
        "corpus_records": cfg.corpus_records,
        "min_answer_tokens": cfg.min_answer_tokens,
    });
    let inputs = vec![arts.corpus()];
    let outputs = vec![arts.dataset(), arts.dataset_manifest(), arts.vocab()];
    stager.run("dataset", slice, &inputs, &outputs, || {
        let corpus = load_corpus(&arts.corpus())?;
        let (samples, manifest) = build_dataset(&cfg.dataset_spec(), &corpus.samples)?;
        crate::corpus::write_dataset(&arts.dataset(), &samples)?;
        crate::corpus::write_manifest(&arts.dataset_manifest(), &manifest)?;
        // include the bundled toy words so the attribution templates and
        // question sets stay encodable even under a small or external corpus
        let mut texts: Vec<String> = corpus
            .samples
            .iter()
            .flat_map(|s| [s.question.clone(), s.answer.clone()])
            .collect();
        texts.extend(toydata::all_words());
        let vocab = Vocabulary::build(texts.iter().map(String::as_str));
        vocab.save(&arts.vocab())
    })
}

fn stage_curves(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({"metrics": "repeat 1-3 w1, self_bleu, entropy n1"});
    let inputs = vec![arts.dataset()];
    let outputs = vec![arts.report("curves.csv"), arts.report("curves.json")];
    let _ = cfg;
    stager.run("curves", slice, &inputs, &outputs, || {
        let dataset = read_dataset(&arts.dataset())?;
        let registry = MetricRegistry::standard(&[1, 2, 3], 1.0, "all")?;
        let table = metric_curves(&dataset, &registry);
        report::write_curves_csv(&arts.report("curves.csv"), &table)?;
        report::write_json(&arts.report("curves.json"), &table)
    })
}

fn stage_train_lm(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "lm": [cfg.lm_layers, cfg.lm_d_model, cfg.lm_heads, cfg.lm_ff, cfg.lm_max_seq],
        "train": [cfg.lm_steps, cfg.lm_batch, cfg.lm_seq_len, cfg.lm_dataset_samples],
        "lr": cfg.lm_lr,
    });
    let inputs = vec![arts.corpus(), arts.dataset(), arts.vocab()];
    let outputs = vec![arts.model(), arts.train_report()];
    stager.run("train_lm", slice, &inputs, &outputs, || {
        let corpus = load_corpus(&arts.corpus())?;
        let dataset = read_dataset(&arts.dataset())?;
        let vocab = Vocabulary::load(&arts.vocab())?;
        let seqs =
            training_sequences(&corpus.samples, &dataset, cfg.lm_dataset_samples, &vocab);
        let mcfg = cfg.model_config(vocab.len());
        let (params, rep) = train_lm(&mcfg, &seqs, &cfg.train_options())?;
        save_model(&arts.model(), &params)?;
        report::write_json(&arts.train_report(), &rep)
    })
}

fn stage_attribute(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({"templates": "bundled induction set"});
    let _ = cfg;
    let inputs = vec![arts.model(), arts.vocab()];
    let outputs = vec![
        arts.templates(),
        arts.report("attribution.csv"),
        arts.report("attribution.json"),
    ];
    stager.run("attribute", slice, &inputs, &outputs, || {
        let vocab = Vocabulary::load(&arts.vocab())?;
        let mut templates = Vec::new();
        for (prompt, correct, incorrect) in toydata::toy_template_texts() {
            templates.push(Template {
                prompt: prompt
                    .iter()
                    .map(|w| vocab.id_or_err(w))
                    .collect::<Result<_>>()?,
                correct: vocab.id_or_err(&correct)?,
                incorrect: vocab.id_or_err(&incorrect)?,
            });
        }
        crate::attribution::write_templates(&arts.templates(), &templates)?;
        let params = load_model(&arts.model())?;
        let result = rank_layers(&params, &templates)?;
        report::write_attribution_csv(&arts.report("attribution.csv"), &result)?;
        report::write_json(&arts.report("attribution.json"), &result)
    })
}

fn stage_collect_acts(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "acts_max_rows": cfg.acts_max_rows,
        "acts_target_norm": cfg.acts_target_norm,
    });
    let inputs = vec![
        arts.model(),
        arts.dataset(),
        arts.vocab(),
        arts.report("attribution.json"),
    ];
    let outputs = vec![arts.acts()];
    stager.run("collect_acts", slice, &inputs, &outputs, || {
        let params = load_model(&arts.model())?;
        let vocab = Vocabulary::load(&arts.vocab())?;
        let dataset = read_dataset(&arts.dataset())?;
        let attr: crate::attribution::AttributionResult =
            report::read_json(&arts.report("attribution.json"))?;
        let layer = *attr.ranked_layers.first().ok_or_else(|| {
            DucError::param("attribution", "empty layer ranking")
        })?;

        let d = params.config.d_model;
        let max_seq = params.config.max_seq;
        let mut rows: Vec<f64> = Vec::new();
        let mut n_rows = 0usize;
        'outer: for s in &dataset {
            let ids = vocab.encode_tokens(&s.tokens);
            for chunk in ids.chunks(max_seq) {
                if chunk.is_empty() {
                    continue;
                }
                let (_, trace) = params.forward(chunk, &HookSet::new())?;
                let resid = &trace.layers[layer];
                for t in 0..resid.rows {
                    rows.extend_from_slice(resid.row(t));
                    n_rows += 1;
                    if n_rows >= cfg.acts_max_rows {
                        break 'outer;
                    }
                }
            }
        }
        if n_rows == 0 {
            return Err(DucError::param("dataset", "produced no activations"));
        }
        // standardize so the mean row norm hits the target
        let mut mean_norm = 0.0;
        for t in 0..n_rows {
            let row = &rows[t * d..(t + 1) * d];
            mean_norm += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        mean_norm /= n_rows as f64;
        let scale = if mean_norm > 0.0 {
            cfg.acts_target_norm / mean_norm
        } else {
            1.0
        };
        rows.iter_mut().for_each(|v| *v *= scale);
        let meta = serde_json::json!({
            "kind": "acts",
            "layer": layer,
            "input_scale": scale,
            "rows": n_rows,
        });
        weights::save_tensors(
            &arts.acts(),
            meta,
            &[("acts".to_string(), vec![n_rows, d], &rows)],
        )
    })
}

fn stage_train_sae(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "sae": [cfg.sae_steps, cfg.sae_batch, cfg.sae_expansion],
        "beta": cfg.sae_beta,
        "lr": cfg.sae_lr,
        "holdout": cfg.sae_holdout_frac,
    });
    let inputs = vec![arts.acts()];
    let outputs = vec![arts.sae(), arts.sae_meta(), arts.feature_stats()];
    stager.run("train_sae", slice, &inputs, &outputs, || {
        let (acts, layer, scale) = load_acts(&arts.acts())?;
        let holdout = ((acts.rows as f64 * cfg.sae_holdout_frac) as usize).max(1);
        let train_rows = acts.rows - holdout;
        let train = Mat::from_vec(
            train_rows,
            acts.cols,
            acts.data[..train_rows * acts.cols].to_vec(),
        );
        let held = Mat::from_vec(
            holdout,
            acts.cols,
            acts.data[train_rows * acts.cols..].to_vec(),
        );
        let sae = train_sae(&cfg.sae_config(), &train, layer)?;
        let eval = evaluate_sae(&sae, &held);
        crate::sae::save_sae(&arts.sae(), &sae)?;
        report::write_json(
            &arts.sae_meta(),
            &SaeMeta {
                layer,
                input_scale: scale,
                holdout_relative_error: eval.mean_relative_error,
                holdout_active_fraction: eval.mean_active_fraction,
            },
        )?;
        // calibrate on a bounded sample of the training rows
        let calib_rows = train_rows.min(20_000);
        let calib = Mat::from_vec(
            calib_rows,
            acts.cols,
            acts.data[..calib_rows * acts.cols].to_vec(),
        );
        let stats = calibrate(&sae, &calib)?;
        crate::sae::save_stats(&arts.feature_stats(), &stats)
    })
}

fn stage_scan(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "rho": cfg.scan_rho,
        "lambda_scale": cfg.scan_lambda_scale,
        "lambda_absolute": cfg.scan_lambda_absolute,
        "questions_per_feature": cfg.scan_questions_per_feature,
        "gen_tokens": cfg.scan_gen_tokens,
        "questions_per_set": cfg.questions_per_set,
    });
    let inputs = vec![
        arts.model(),
        arts.sae(),
        arts.sae_meta(),
        arts.feature_stats(),
        arts.vocab(),
    ];
    let outputs = vec![
        arts.features(),
        arts.scan_skipped(),
        arts.report("features.csv"),
    ];
    stager.run("scan", slice, &inputs, &outputs, || {
        let params = load_model(&arts.model())?;
        let sae = Arc::new(crate::sae::load_sae(&arts.sae())?);
        let meta: SaeMeta = report::read_json(&arts.sae_meta())?;
        let stats = crate::sae::load_stats(&arts.feature_stats())?;
        let vocab = Vocabulary::load(&arts.vocab())?;
        let scfg = cfg.scan_config(meta.input_scale);
        let questions = encoded_questions(
            scfg.question_set,
            cfg.questions_per_set,
            scoped_seed(cfg, "questions"),
            &vocab,
        );
        let outcome = scan_features(&params, &sae, &stats, &scfg, &questions)?;
        report::write_features_jsonl(&arts.features(), &outcome.records)?;
        report::write_features_csv(&arts.report("features.csv"), &outcome.records)?;
        report::write_json(&arts.scan_skipped(), &outcome.skipped)
    })
}

fn eval_datasets(cfg: &RunConfig, vocab: &Vocabulary) -> Result<Vec<(String, Vec<TokenSeq>)>> {
    cfg.question_sets()?
        .into_iter()
        .map(|set| {
            Ok((
                set.name().to_string(),
                encoded_questions(
                    set,
                    cfg.questions_per_set,
                    scoped_seed(cfg, "questions"),
                    vocab,
                ),
            ))
        })
        .collect()
}

fn stage_ratio(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "datasets": cfg.datasets,
        "questions_per_set": cfg.questions_per_set,
        "gen_tokens": cfg.eval_gen_tokens,
        "rho": cfg.scan_rho,
        "lambda_scale": cfg.scan_lambda_scale,
    });
    let inputs = vec![
        arts.model(),
        arts.sae(),
        arts.sae_meta(),
        arts.features(),
        arts.vocab(),
    ];
    let outputs = vec![arts.report("ratio.csv"), arts.report("ratio.json")];
    stager.run("ratio", slice, &inputs, &outputs, || {
        let params = load_model(&arts.model())?;
        let sae = Arc::new(crate::sae::load_sae(&arts.sae())?);
        let meta: SaeMeta = report::read_json(&arts.sae_meta())?;
        let records = report::read_features_jsonl(&arts.features())?;
        let vocab = Vocabulary::load(&arts.vocab())?;
        let mut scfg = cfg.scan_config(meta.input_scale);
        scfg.gen_tokens = cfg.eval_gen_tokens;
        let datasets = eval_datasets(cfg, &vocab)?;
        let rep = ratio_experiment(&params, &sae, &records, &scfg, &datasets)?;
        report::write_ratio_csv(&arts.report("ratio.csv"), &rep)?;
        report::write_json(&arts.report("ratio.json"), &rep)
    })
}

fn stage_mitigate(cfg: &RunConfig, arts: &Artifacts, stager: &Stager) -> Result<StageOutcome> {
    let slice = serde_json::json!({
        "datasets": cfg.datasets,
        "questions_per_set": cfg.questions_per_set,
        "gen_tokens": cfg.eval_gen_tokens,
    });
    let inputs = vec![
        arts.model(),
        arts.sae(),
        arts.sae_meta(),
        arts.features(),
        arts.vocab(),
    ];
    let outputs = vec![arts.report("mitigation.csv"), arts.report("mitigation.json")];
    stager.run("mitigate", slice, &inputs, &outputs, || {
        let params = load_model(&arts.model())?;
        let sae = Arc::new(crate::sae::load_sae(&arts.sae())?);
        let meta: SaeMeta = report::read_json(&arts.sae_meta())?;
        let records = report::read_features_jsonl(&arts.features())?;
        let vocab = Vocabulary::load(&arts.vocab())?;
        let datasets = eval_datasets(cfg, &vocab)?;
        let rows = mitigation_eval(
            &params,
            &sae,
            &records,
            &datasets,
            cfg.eval_gen_tokens,
            scoped_seed(cfg, "mitigate"),
            meta.input_scale,
        )?;
        report::write_mitigation_csv(&arts.report("mitigation.csv"), &rows)?;
        report::write_json(&arts.report("mitigation.json"), &rows)
    })
}

/// Run a single stage by name (prior artifacts must already exist).
pub fn run_stage(cfg: &RunConfig, out: &Path, name: &str) -> Result<StageOutcome> {
    let arts = Artifacts::new(out);
    std::fs::create_dir_all(arts.reports()).map_err(|e| DucError::io(&arts.reports(), e))?;
    std::fs::create_dir_all(arts.stages()).map_err(|e| DucError::io(&arts.stages(), e))?;
    let stager = Stager {
        arts: &arts,
        seed: cfg.seed,
        log: true,
    };
    match name {
        "dataset" => stage_dataset(cfg, &arts, &stager),
        "curves" => stage_curves(cfg, &arts, &stager),
        "train_lm" => stage_train_lm(cfg, &arts, &stager),
        "attribute" => stage_attribute(cfg, &arts, &stager),
        "collect_acts" => stage_collect_acts(cfg, &arts, &stager),
        "train_sae" => stage_train_sae(cfg, &arts, &stager),
        "scan" => stage_scan(cfg, &arts, &stager),
        "ratio" => stage_ratio(cfg, &arts, &stager),
        "mitigate" => stage_mitigate(cfg, &arts, &stager),
        other => Err(DucError::param("stage", format!("unknown stage {other:?}"))),
    }
}

/// Recompute per-feature calibration statistics from existing artifacts.
pub fn recalibrate(out: &Path) -> Result<()> {
    let arts = Artifacts::new(out);
    let sae = crate::sae::load_sae(&arts.sae())?;
    let (acts, _, _) = load_acts(&arts.acts())?;
    let rows = acts.rows.min(20_000);
    let calib = Mat::from_vec(rows, acts.cols, acts.data[..rows * acts.cols].to_vec());
    let stats = calibrate(&sae, &calib)?;
    crate::sae::save_stats(&arts.feature_stats(), &stats)
}

/// Emit plot-data JSON from existing reports. Missing reports are errors;
/// empty reports yield empty series files.
pub fn emit_plots(out: &Path) -> Result<Vec<PathBuf>> {
    let arts = Artifacts::new(out);
    std::fs::create_dir_all(arts.plots()).map_err(|e| DucError::io(&arts.plots(), e))?;
    let mut written = Vec::new();

    let curves_path = arts.report("curves.json");
    if !curves_path.exists() {
        return Err(DucError::MissingFile { path: curves_path });
    }
    let table: crate::metrics::CurveTable = report::read_json(&curves_path)?;
    let p = arts.plots().join("curves_plot.json");
    report::write_json(&p, &report::curve_plot(&table))?;
    written.push(p);

    let attr_path = arts.report("attribution.json");
    if !attr_path.exists() {
        return Err(DucError::MissingFile { path: attr_path });
    }
    let attr: crate::attribution::AttributionResult = report::read_json(&attr_path)?;
    let p = arts.plots().join("attribution_plot.json");
    report::write_json(&p, &report::attribution_plot(&attr))?;
    written.push(p);

    Ok(written)
}
