//! Evaluation: greedy decoding, token edit-distance error rates, and
//! routing diagnostics.
//!
//! The error-rate unit is tokens (the synthetic data has no words); the
//! overall figure weights each language by its reference token count, so
//! it equals total errors over total reference tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::synth::Corpus;
use crate::models::{greedy_decode_s2s, greedy_decode_tt, tt_forward, s2s_forward, Batch, Model};
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

/// Levenshtein distance over token sequences (insert/delete/substitute,
/// unit costs).
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let (n, m) = (reference.len(), hypothesis.len());
    // One rolling row keeps it O(min) space.
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub utterances: usize,
    pub reference_tokens: usize,
    pub errors: usize,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_language: BTreeMap<usize, LanguageStats>,
    pub total_reference_tokens: usize,
    pub total_errors: usize,
    /// Σ errors / Σ reference tokens — the token-count-weighted mean of
    /// per-language rates.
    pub overall_error_rate: f64,
    /// Fraction of routed tokens dropped at eval time, per MoE layer,
    /// averaged over utterances. Empty for dense models.
    pub drop_rates: Vec<f64>,
}

fn rate(errors: usize, tokens: usize) -> f64 {
    if tokens == 0 {
        0.0
    } else {
        errors as f64 / tokens as f64
    }
}

/// Greedy-decodes every utterance and scores token error rates.
///
/// `max_decode_len` bounds attention-decoder output (0 picks a corpus
/// default of max reference length + 4); `max_symbols_per_frame` bounds
/// transducer emissions per frame.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    max_decode_len: usize,
    max_symbols_per_frame: usize,
) -> Result<EvalReport> {
    if corpus.task.feature_dim != model.cfg().d_feat {
        return Err(Error::Config(format!(
            "corpus features are {}-dimensional, model expects {}",
            corpus.task.feature_dim,
            model.cfg().d_feat
        )));
    }
    let max_len = if max_decode_len == 0 {
        corpus
            .utterances
            .iter()
            .map(|u| u.targets.len())
            .max()
            .unwrap_or(0)
            + 4
    } else {
        max_decode_len
    };
    let mut per_language: BTreeMap<usize, LanguageStats> = BTreeMap::new();
    for u in &corpus.utterances {
        let features = Tensor::from_vec(&[u.num_frames, corpus.task.feature_dim], u.features.clone())?;
        let hyp = match model {
            Model::S2s(m) => greedy_decode_s2s(m, &features, u.language, max_len)?,
            Model::Tt(m) => greedy_decode_tt(m, &features, u.language, max_symbols_per_frame)?,
        };
        let errors = edit_distance(&u.targets, &hyp);
        let entry = per_language.entry(u.language).or_insert(LanguageStats {
            utterances: 0,
            reference_tokens: 0,
            errors: 0,
            error_rate: 0.0,
        });
        entry.utterances += 1;
        entry.reference_tokens += u.targets.len();
        entry.errors += errors;
    }
    let mut total_tokens = 0;
    let mut total_errors = 0;
    for stats in per_language.values_mut() {
        stats.error_rate = rate(stats.errors, stats.reference_tokens);
        total_tokens += stats.reference_tokens;
        total_errors += stats.errors;
    }
    let drop_rates = eval_drop_rates(model, corpus)?;
    Ok(EvalReport {
        per_language,
        total_reference_tokens: total_tokens,
        total_errors,
        overall_error_rate: rate(total_errors, total_tokens),
        drop_rates,
    })
}

/// Per-MoE-layer token drop fraction over a forward pass of the whole
/// corpus in evaluation mode.
fn eval_drop_rates(model: &Model, corpus: &Corpus) -> Result<Vec<f64>> {
    let indices: Vec<usize> = (0..corpus.utterances.len()).collect();
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let stats = forward_stats(model, &corpus.batch(&indices)?)?;
    Ok(stats
        .iter()
        .map(|s| {
            if s.tokens == 0 {
                0.0
            } else {
                s.dropped as f64 / s.tokens as f64
            }
        })
        .collect())
}

fn forward_stats(model: &Model, batch: &Batch) -> Result<Vec<crate::moe::LoadStats>> {
    let mut rng = RngStream::new(0, 0); // evaluation mode: never consulted
    Ok(match model {
        Model::S2s(m) => s2s_forward(batch, m, &mut rng, false)?.moe_stats,
        Model::Tt(m) => tt_forward(batch, m, &mut rng, false)?.moe_stats,
    })
}

/// Mean dispatch entropy (averaged over the model's MoE layers) of each
/// language's utterances, forwarded as one batch per language. Falling
/// entropy over training signals the router specializing experts to
/// languages. Languages absent from the corpus yield `None`.
pub fn routing_entropy_by_language(model: &Model, corpus: &Corpus) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(corpus.task.num_languages);
    for lang in 0..corpus.task.num_languages {
        let indices: Vec<usize> = corpus
            .utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.language == lang)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            out.push(None);
            continue;
        }
        let stats = forward_stats(model, &corpus.batch(&indices)?)?;
        if stats.is_empty() {
            out.push(None);
            continue;
        }
        let mean =
            stats.iter().map(|s| s.dispatch_entropy()).sum::<f64>() / stats.len() as f64;
        out.push(Some(mean));
    }
    Ok(out)
}
