//! Ablation grids: train several configurations under identical budgets
//! and emit one comparison table (CSV) mirroring the usual experiment
//! axes — expert count, streaming, language-ID, parameter count.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::eval::{evaluate, EvalReport};
use crate::harness::synth::Corpus;
use crate::harness::train::{train, TrainConfig};
use crate::models::{Family, Model};

/// One named configuration in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub name: String,
    pub config: TrainConfig,
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub family: String,
    /// Router experts when any MoE layer is present, 0 for dense.
    pub experts: usize,
    pub params: usize,
    pub streaming: bool,
    pub lang_id: bool,
    pub per_language_rates: Vec<f64>,
    pub overall_rate: f64,
}

fn has_moe(cfg: &TrainConfig) -> bool {
    cfg.model.moe_every > 0
        || cfg
            .model
            .label_decoder
            .as_ref()
            .is_some_and(|ld| ld.moe_projection.is_some())
}

fn row_from(name: &str, cfg: &TrainConfig, model: &Model, report: &EvalReport, languages: usize) -> AblationRow {
    let per_language_rates = (0..languages)
        .map(|l| report.per_language.get(&l).map_or(0.0, |s| s.error_rate))
        .collect();
    AblationRow {
        model: name.to_string(),
        family: match cfg.model.family {
            Family::S2s => "s2s".into(),
            Family::Tt => "tt".into(),
        },
        experts: if has_moe(cfg) {
            cfg.model.router.num_experts
        } else {
            0
        },
        params: model.params().total_params(),
        streaming: cfg.model.streaming.is_some(),
        lang_id: cfg.model.language_id.is_some(),
        per_language_rates,
        overall_rate: report.overall_error_rate,
    }
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Trains every grid entry on `train_corpus`, evaluates on `eval_corpus`,
/// and returns the table rows in grid order. With an output directory,
/// each run's artifacts land in a per-entry subdirectory and the table is
/// written to `ablation.csv`.
pub fn run_ablation(
    grid: &[GridEntry],
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    output_dir: Option<&Path>,
    max_decode_len: usize,
    max_symbols_per_frame: usize,
) -> Result<Vec<AblationRow>> {
    if grid.len() < 2 {
        return Err(Error::Config(
            "an ablation grid needs at least 2 configurations".into(),
        ));
    }
    let languages = eval_corpus.task.num_languages;
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let run_dir = match output_dir {
            Some(dir) => {
                let d = dir.join(sanitize(&entry.name));
                std::fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        let outcome = train(&entry.config, train_corpus, run_dir.as_deref())?;
        let report = evaluate(
            &outcome.model,
            eval_corpus,
            max_decode_len,
            max_symbols_per_frame,
        )?;
        rows.push(row_from(&entry.name, &entry.config, &outcome.model, &report, languages));
    }
    if let Some(dir) = output_dir {
        write_csv(&dir.join("ablation.csv"), &rows, languages)?;
    }
    Ok(rows)
}

/// Writes rows as CSV: one column per language rate plus the weighted
/// overall rate.
pub fn write_csv(path: &Path, rows: &[AblationRow], languages: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "model".to_string(),
        "family".to_string(),
        "experts".to_string(),
        "params".to_string(),
        "streaming".to_string(),
        "lang_id".to_string(),
    ];
    header.extend((0..languages).map(|l| format!("lang{l}_rate")));
    header.push("overall_rate".to_string());
    w.write_record(&header)?;
    for row in rows {
        let mut record = vec![
            row.model.clone(),
            row.family.clone(),
            row.experts.to_string(),
            row.params.to_string(),
            row.streaming.to_string(),
            row.lang_id.to_string(),
        ];
        record.extend(row.per_language_rates.iter().map(|r| format!("{r:.6}")));
        record.push(format!("{:.6}", row.overall_rate));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
