//! `duc`: build repetition corpora, train a toy LM and an SAE on top of it,
//! locate repetition layers and features, and run the activation /
//! deactivation experiments. All artifacts live under --out.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use duc_core::pipeline::{
    emit_plots, read_kv_config, recalibrate, run_pipeline, run_stage, RunConfig,
};
use duc_core::tinylm::{
    generate, load_model, perplexity, GenerationConfig, HookSet, StrategyKind,
};
use duc_core::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "duc", version, about = "Repetition-feature pipeline for a toy LM")]
struct Cli {
    /// Flat key=value config file overriding defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global RNG seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus, the repetition dataset, and the vocabulary.
    BuildDataset,
    /// Score the dataset with the repetition metrics.
    Curves,
    /// Train the toy language model.
    TrainLm,
    /// Generate text from the trained model.
    Generate {
        /// Prompt text (whitespace-tokenized).
        #[arg(long)]
        prompt: String,
        /// Decoding strategy: greedy, beam, topk, or topp.
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long, default_value_t = 64)]
        max_new_tokens: usize,
    },
    /// Perplexity of a text under the trained model.
    Ppl {
        #[arg(long)]
        text: String,
    },
    /// Rank layers by logit-difference attribution.
    Attribute,
    /// Collect residual activations at the attributed layer.
    CollectActs,
    /// Train the sparse autoencoder on collected activations.
    TrainSae,
    /// Recompute per-feature activation statistics.
    Calibrate,
    /// Scan SAE features for repetition behavior.
    Scan {
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        lambda_scale: Option<f64>,
        /// Use this raw steering coefficient instead of scaling max activation.
        #[arg(long)]
        lambda_absolute: Option<f64>,
    },
    /// Ratio-batched feature activation experiment.
    RatioExp {
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        lambda_scale: Option<f64>,
        /// Comma-separated question sets (EQ, AQ, NQ).
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Mitigation comparison across decoding strategies.
    Mitigate {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Emit plot-data JSON from existing reports.
    Plots,
    /// Run every stage in order.
    RunAll,
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let kv = read_kv_config(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv(&kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_strategy(name: &str) -> anyhow::Result<StrategyKind> {
    Ok(match name {
        "greedy" => StrategyKind::Greedy,
        "beam" => StrategyKind::Beam,
        "topk" => StrategyKind::TopK,
        "topp" => StrategyKind::TopP,
        other => bail!("unknown strategy {other:?} (expected greedy, beam, topk, or topp)"),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = build_config(&cli)?;
    let out = cli.out.clone();

    match &cli.command {
        Command::BuildDataset => {
            run_stage(&cfg, &out, "dataset")?;
        }
        Command::Curves => {
            run_stage(&cfg, &out, "curves")?;
        }
        Command::TrainLm => {
            run_stage(&cfg, &out, "train_lm")?;
        }
        Command::Generate {
            prompt,
            strategy,
            max_new_tokens,
        } => {
            let params = load_model(&out.join("model.bin"))?;
            let vocab = Vocabulary::load(&out.join("vocab.json"))?;
            let ids = vocab.encode(prompt);
            if ids.is_empty() {
                bail!("prompt produced no tokens");
            }
            let gcfg = GenerationConfig {
                strategy: parse_strategy(strategy)?,
                max_new_tokens: *max_new_tokens,
                rng_seed: cfg.seed,
                ..Default::default()
            };
            let gen = generate(&params, &ids, &gcfg, &HookSet::new())?;
            println!("{}", vocab.decode(&gen).join(" "));
        }
        Command::Ppl { text } => {
            let params = load_model(&out.join("model.bin"))?;
            let vocab = Vocabulary::load(&out.join("vocab.json"))?;
            let ids = vocab.encode(text);
            let ppl = perplexity(&params, &ids)?;
            println!("{ppl}");
        }
        Command::Attribute => {
            run_stage(&cfg, &out, "attribute")?;
        }
        Command::CollectActs => {
            run_stage(&cfg, &out, "collect_acts")?;
        }
        Command::TrainSae => {
            run_stage(&cfg, &out, "train_sae")?;
        }
        Command::Calibrate => {
            recalibrate(&out)?;
            println!("feature statistics refreshed");
        }
        Command::Scan {
            rho,
            lambda_scale,
            lambda_absolute,
        } => {
            if let Some(r) = rho {
                cfg.scan_rho = *r;
            }
            if let Some(s) = lambda_scale {
                cfg.scan_lambda_scale = *s;
            }
            if let Some(a) = lambda_absolute {
                cfg.scan_lambda_absolute = Some(*a);
            }
            run_stage(&cfg, &out, "scan")?;
        }
        Command::RatioExp {
            rho,
            lambda_scale,
            dataset,
        } => {
            if let Some(r) = rho {
                cfg.scan_rho = *r;
            }
            if let Some(s) = lambda_scale {
                cfg.scan_lambda_scale = *s;
            }
            if let Some(d) = dataset {
                cfg.datasets = d.split(',').map(|s| s.trim().to_string()).collect();
            }
            run_stage(&cfg, &out, "ratio")?;
        }
        Command::Mitigate { dataset } => {
            if let Some(d) = dataset {
                cfg.datasets = d.split(',').map(|s| s.trim().to_string()).collect();
            }
            run_stage(&cfg, &out, "mitigate")?;
        }
        Command::Plots => {
            for p in emit_plots(&out)? {
                println!("{}", p.display());
            }
        }
        Command::RunAll => {
            let summary = run_pipeline(&cfg, &out)?;
            for s in &summary.stages {
                let status = if s.skipped { "skipped" } else { "ran" };
                println!("{}: {} ({:.1}s)", s.name, status, s.duration_secs);
            }
        }
    }
    Ok(())
}
