//! The training loop: language-balanced batch sampling, forward/backward,
//! AdamW updates, JSON-lines metrics, and periodic checkpoints.
//!
//! Everything is driven by explicit RNG substreams of the run seed, so a
//! repeated run writes byte-identical metrics and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::harness::optim::{AdamW, AdamWConfig};
use crate::harness::synth::Corpus;
use crate::losses::{combine, cross_entropy, rnnt_loss_forward, LossBreakdown};
use crate::models::{s2s_forward, tt_forward, Batch, Model, ModelConfig};
use crate::moe::{aux_loss, LoadStats};
use crate::tensor::ops::log_softmax;
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

fn default_label_smoothing() -> f64 {
    0.1
}
fn default_balance_temperature() -> f64 {
    0.5
}
fn default_batch_size() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub max_steps: u64,
    /// Checkpoint cadence in steps; 0 writes only the initial and final
    /// checkpoints.
    #[serde(default)]
    pub eval_every: u64,
    pub seed: u64,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f64,
    /// Languages are sampled with probability ∝ n_l^(1−τ): τ = 0 keeps
    /// the corpus distribution, τ = 1 samples languages uniformly.
    #[serde(default = "default_balance_temperature")]
    pub balance_temperature: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.balance_temperature) {
            return Err(Error::Config(format!(
                "balance_temperature must be in [0, 1], got {}",
                self.balance_temperature
            )));
        }
        Ok(())
    }
}

/// Per-layer routing snapshot logged every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    /// Fraction of tokens whose argmax choice was each expert.
    pub f: Vec<f64>,
    /// Mean gate probability per expert.
    pub p: Vec<f64>,
    /// Entropy (nats) of the post-capacity dispatch distribution.
    pub entropy: f64,
    pub dropped: usize,
    pub tokens: usize,
}

/// One JSON-lines metrics record per training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    /// Tokens routed through MoE layers this step (0 for dense models).
    pub tokens: usize,
    pub dropped_tokens: usize,
    pub drop_rate: f64,
    pub lr: f64,
    pub layers: Vec<LayerRecord>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepRecord>,
    /// Path of the final checkpoint when an output directory was given.
    pub final_checkpoint: Option<PathBuf>,
}

fn layer_records(stats: &[LoadStats]) -> Vec<LayerRecord> {
    stats
        .iter()
        .enumerate()
        .map(|(i, s)| LayerRecord {
            layer: i,
            f: s.f.clone(),
            p: s.p.to_vec(),
            entropy: s.dispatch_entropy(),
            dropped: s.dropped,
            tokens: s.tokens,
        })
        .collect()
}

/// Sampling weights implementing language balancing: utterance u of
/// language l is drawn with probability ∝ n_l^(−τ), which makes language
/// l's total probability ∝ n_l^(1−τ).
fn sampling_cdf(corpus: &Corpus, temperature: f64) -> Vec<f64> {
    let counts = corpus.language_counts();
    let mut cdf = Vec::with_capacity(corpus.utterances.len());
    let mut acc = 0.0;
    for u in &corpus.utterances {
        let n = counts[u.language].max(1) as f64;
        acc += n.powf(-temperature);
        cdf.push(acc);
    }
    cdf
}

fn sample_index(cdf: &[f64], rng: &mut RngStream) -> usize {
    let total = *cdf.last().unwrap();
    let x = rng.uniform() * total;
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

/// Forward pass plus task loss for either family.
pub fn batch_loss(
    model: &Model,
    batch: &Batch,
    label_smoothing: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<(LossBreakdown, Vec<LoadStats>)> {
    let (task, stats) = match model {
        Model::S2s(m) => {
            let out = s2s_forward(batch, m, rng, training)?;
            let task = cross_entropy(&out.logits, &out.targets_with_eos, label_smoothing)?;
            (task, out.moe_stats)
        }
        Model::Tt(m) => {
            let out = tt_forward(batch, m, rng, training)?;
            let mut per_utt = Vec::with_capacity(out.joints.len());
            for (joint, utt) in out.joints.iter().zip(&batch.utterances) {
                let lp = log_softmax(joint, 2)?;
                per_utt.push(rnnt_loss_forward(&lp, &utt.targets, m.cfg.blank_id)?);
            }
            let mut task = per_utt
                .into_iter()
                .reduce(|a, b| a.add(&b).unwrap())
                .ok_or_else(|| Error::Parameter("empty batch".into()))?;
            task = task.scale(1.0 / batch.utterances.len() as f64);
            (task, out.moe_stats)
        }
    };
    let alpha = model.cfg().router.alpha;
    let aux: Vec<Tensor> = stats
        .iter()
        .map(|s| aux_loss(s, alpha))
        .collect::<Result<Vec<_>>>()?;
    let dropped = stats.iter().map(|s| s.dropped).sum();
    let tokens = stats.iter().map(|s| s.tokens).sum();
    Ok((combine(task, aux, dropped, tokens)?, stats))
}

/// Runs the full training loop. With an output directory, writes
/// `metrics.jsonl`, numbered checkpoints at step 0 and every `eval_every`
/// steps, and `checkpoint-final.bin`.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, output_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    let mut init_rng = RngStream::new(cfg.seed, 0);
    let mut net_rng = RngStream::new(cfg.seed, 1);
    let mut data_rng = RngStream::new(cfg.seed, 2);
    let model = Model::init(cfg.model.clone(), &mut init_rng)?;
    let registry = model.params();
    let mut opt = AdamW::new(cfg.optimizer.clone(), &registry)?;
    let cdf = sampling_cdf(corpus, cfg.balance_temperature);

    let mut metrics_file = match output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join("metrics.jsonl"),
            )?))
        }
        None => None,
    };
    let save = |step: u64, name: &str, rng: &RngStream| -> Result<Option<PathBuf>> {
        match output_dir {
            Some(dir) => {
                let path = dir.join(name);
                checkpoint::save(&path, &cfg.model, rng, step, &registry)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };
    save(0, "checkpoint-000000.bin", &net_rng)?;

    let mut metrics = Vec::with_capacity(cfg.max_steps as usize);
    for step in 0..cfg.max_steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| sample_index(&cdf, &mut data_rng))
            .collect();
        let batch = corpus.batch(&indices)?;
        let (breakdown, stats) = batch_loss(&model, &batch, cfg.label_smoothing, &mut net_rng, true)?;
        let total = breakdown.total.item();
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                msg: format!(
                    "total loss {total} (task {}, aux {})",
                    breakdown.task.item(),
                    breakdown.aux.iter().map(|a| a.item()).sum::<f64>()
                ),
            });
        }
        breakdown.total.backward();
        let lr = opt.apply(&registry)?;
        registry.zero_grads();

        let record = StepRecord {
            step,
            task_loss: breakdown.task.item(),
            aux_loss: breakdown.aux.iter().map(|a| a.item()).sum::<f64>(),
            total_loss: total,
            tokens: breakdown.tokens,
            dropped_tokens: breakdown.dropped_tokens,
            drop_rate: if breakdown.tokens == 0 {
                0.0
            } else {
                breakdown.dropped_tokens as f64 / breakdown.tokens as f64
            },
            lr,
            layers: layer_records(&stats),
        };
        if let Some(f) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *f, &record)?;
            f.write_all(b"\n")?;
        }
        metrics.push(record);

        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.max_steps {
            save(done, &format!("checkpoint-{done:06}.bin"), &net_rng)?;
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    let final_checkpoint = save(cfg.max_steps, "checkpoint-final.bin", &net_rng)?;
    Ok(TrainOutcome {
        model,
        metrics,
        final_checkpoint,
    })
}
