//! Thin command-line front end over the library: corpus generation,
//! training, evaluation, and ablation grids. All experiment logic lives
//! in the library; this binary only parses flags and files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moe_asr::error::{Error, Result};
use moe_asr::harness::ablate::{run_ablation, GridEntry};
use moe_asr::harness::eval::evaluate;
use moe_asr::harness::synth::{generate_corpus, Corpus, SyntheticTask};
use moe_asr::harness::train::{train, TrainConfig};
use moe_asr::checkpoint;

#[derive(Parser)]
#[command(
    name = "moe-asr",
    about = "Sparsely-gated mixture-of-experts sequence models: synthetic corpora, training, evaluation, ablations",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-language corpus from a task description.
    Generate {
        /// Task description JSON (SyntheticTask fields).
        #[arg(long)]
        task: PathBuf,
        /// Number of utterances to generate.
        #[arg(long)]
        num: usize,
        /// Where to write the corpus JSON.
        #[arg(long)]
        output: PathBuf,
        /// Overrides the seed stored in the task file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a TrainConfig JSON over a generated corpus.
    Train {
        /// TrainConfig JSON (model + optimizer + schedule).
        #[arg(long)]
        config: PathBuf,
        /// Training corpus JSON.
        #[arg(long)]
        corpus: PathBuf,
        /// Directory for metrics.jsonl and checkpoints.
        #[arg(long)]
        output_dir: PathBuf,
        /// Run seed (overrides the config file's seed).
        #[arg(long)]
        seed: u64,
        /// Dotted-path config overrides, e.g. --set model.moe_every=0
        /// or --set optimizer.lr=1e-3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Greedy-decode a checkpoint over a corpus and report error rates.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation corpus JSON.
        #[arg(long)]
        corpus: PathBuf,
        /// Report JSON destination (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Attention-decoder output length bound (0 = reference max + 4).
        #[arg(long, default_value_t = 0)]
        max_decode_len: usize,
        /// Transducer per-frame emission bound.
        #[arg(long, default_value_t = 4)]
        max_symbols_per_frame: usize,
    },
    /// Train every entry of a config grid and emit a comparison CSV.
    Ablate {
        /// Grid JSON: [{"name": ..., "config": TrainConfig}, ...].
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        train_corpus: PathBuf,
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Directory for per-entry runs and ablation.csv.
        #[arg(long)]
        output_dir: PathBuf,
        /// Seed applied to every grid entry (identical budgets).
        #[arg(long)]
        seed: u64,
        /// Dotted-path overrides applied to every entry's config.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 0)]
        max_decode_len: usize,
        #[arg(long, default_value_t = 4)]
        max_symbols_per_frame: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

/// Applies `key.path=value` overrides to a JSON document. Values parse as
/// JSON when possible (numbers, booleans, null) and fall back to strings.
fn apply_overrides(doc: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for s in sets {
        let (path, raw) = s.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {s:?} must look like key.path=value"))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cursor = &mut *doc;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let obj = cursor.as_object_mut().ok_or_else(|| {
                Error::Config(format!("override path {path:?}: {seg:?} is not an object"))
            })?;
            if i + 1 == segments.len() {
                obj.insert(seg.to_string(), value);
                break;
            }
            cursor = obj
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}

fn load_train_config(path: &Path, sets: &[String], seed: u64) -> Result<TrainConfig> {
    let mut doc: serde_json::Value = read_json(path)?;
    apply_overrides(&mut doc, sets)?;
    let mut cfg: TrainConfig = serde_json::from_value(doc)?;
    cfg.seed = seed;
    Ok(cfg)
}

fn check_dims(corpus: &Corpus, d_feat: usize) -> Result<()> {
    if corpus.task.feature_dim != d_feat {
        return Err(Error::Config(format!(
            "corpus features are {}-dimensional but the model expects d_feat {}",
            corpus.task.feature_dim, d_feat
        )));
    }
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate {
            task,
            num,
            output,
            seed,
        } => {
            let mut task: SyntheticTask = read_json(&task)?;
            if let Some(seed) = seed {
                task.seed = seed;
            }
            let corpus = generate_corpus(&task, num)?;
            corpus.save(&output)?;
            let counts = corpus.language_counts();
            println!(
                "wrote {} utterances ({} languages, counts {:?}) to {}",
                corpus.utterances.len(),
                task.num_languages,
                counts,
                output.display()
            );
        }
        Cmd::Train {
            config,
            corpus,
            output_dir,
            seed,
            sets,
        } => {
            let cfg = load_train_config(&config, &sets, seed)?;
            let corpus = Corpus::load(&corpus)?;
            check_dims(&corpus, cfg.model.d_feat)?;
            let outcome = train(&cfg, &corpus, Some(&output_dir))?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "trained {} steps: task loss {:.4}, aux loss {:.4}, drop rate {:.3}",
                    outcome.metrics.len(),
                    last.task_loss,
                    last.aux_loss,
                    last.drop_rate
                );
            } else {
                println!("trained 0 steps (initial checkpoint only)");
            }
            if let Some(path) = outcome.final_checkpoint {
                println!("final checkpoint: {}", path.display());
            }
            println!("metrics: {}", output_dir.join("metrics.jsonl").display());
        }
        Cmd::Evaluate {
            checkpoint: ckpt_path,
            corpus,
            output,
            max_decode_len,
            max_symbols_per_frame,
        } => {
            let (model, _, step) = checkpoint::load_model(&ckpt_path)?;
            let corpus = Corpus::load(&corpus)?;
            check_dims(&corpus, model.cfg().d_feat)?;
            let report = evaluate(&model, &corpus, max_decode_len, max_symbols_per_frame)?;
            let json = serde_json::to_string_pretty(&report)?;
            match output {
                Some(path) => {
                    std::fs::write(&path, json)?;
                    println!(
                        "step {step}: overall token error rate {:.4} ({} / {} tokens); report: {}",
                        report.overall_error_rate,
                        report.total_errors,
                        report.total_reference_tokens,
                        path.display()
                    );
                }
                None => println!("{json}"),
            }
        }
        Cmd::Ablate {
            grid,
            train_corpus,
            eval_corpus,
            output_dir,
            seed,
            sets,
            max_decode_len,
            max_symbols_per_frame,
        } => {
            let mut docs: Vec<serde_json::Value> = read_json(&grid)?;
            let mut entries = Vec::with_capacity(docs.len());
            for doc in &mut docs {
                let name = doc
                    .get("name")
                    .and_then(|n| n.as_str())
                    .ok_or_else(|| Error::Config("grid entry is missing \"name\"".into()))?
                    .to_string();
                let config_doc = doc
                    .get_mut("config")
                    .ok_or_else(|| Error::Config(format!("grid entry {name:?} missing \"config\"")))?;
                apply_overrides(config_doc, &sets)?;
                let mut config: TrainConfig = serde_json::from_value(config_doc.clone())?;
                config.seed = seed;
                entries.push(GridEntry { name, config });
            }
            let train_c = Corpus::load(&train_corpus)?;
            let eval_c = Corpus::load(&eval_corpus)?;
            let rows = run_ablation(
                &entries,
                &train_c,
                &eval_c,
                Some(&output_dir),
                max_decode_len,
                max_symbols_per_frame,
            )?;
            for row in &rows {
                println!(
                    "{:<16} experts={:<3} params={:<8} streaming={:<5} lang_id={:<5} overall={:.4}",
                    row.model, row.experts, row.params, row.streaming, row.lang_id, row.overall_rate
                );
            }
            println!("table: {}", output_dir.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
