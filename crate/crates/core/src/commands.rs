//! Implementations behind the command-line subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balance::{self, EpochEval, TraceRow};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::modality::{ModalitySet, PerModality};
use crate::model::{Ablation, Model};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACES_FILE: &str = "traces.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const DATASET_FILE: &str = "dataset.json";

/// Writes a generated dataset. `out` is either a `.json` file or a directory
/// that receives `dataset.json`.
pub fn gen_data(spec: &SynthSpec, out: &Path) -> Result<(PathBuf, Dataset)> {
    let data = dataset::generate(spec)?;
    let path = if out.extension().is_some_and(|e| e == "json") {
        out.to_path_buf()
    } else {
        out.join(DATASET_FILE)
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    data.save(&path)?;
    Ok((path, data))
}

pub fn dataset_summary(data: &Dataset) -> String {
    let hist: Vec<String> = data
        .class_histogram()
        .iter()
        .map(usize::to_string)
        .collect();
    format!(
        "{} conversations, {} utterances, class histogram [{}]",
        data.conversations.len(),
        data.num_utterances(),
        hist.join(", ")
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub modalities: ModalitySet,
    pub steps: usize,
    pub train_conversations: usize,
    pub held_out_conversations: usize,
    /// Final-epoch model on the training split.
    pub train: EvalReport,
    /// Final-epoch model on the held-out split.
    pub held_out: EvalReport,
    /// Held-out mean cosine logit at the true class, per modality.
    pub logit_trace: PerModality<Option<f64>>,
    pub best_epoch: Option<EpochEval>,
    pub epochs: Vec<EpochEval>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub traces: Vec<TraceRow>,
}

/// Held-out logit trace of `model` over `data`.
pub fn held_out_logit_trace(model: &Model, data: &Dataset) -> Result<PerModality<Option<f64>>> {
    let mut contributions = Vec::with_capacity(data.conversations.len());
    let mut labels = Vec::with_capacity(data.conversations.len());
    for conv in &data.conversations {
        contributions.push(model.predict(conv, model.modalities())?.contributions);
        labels.push(conv.labels.as_slice());
    }
    metrics::logit_trace(&contributions, &labels)
}

/// Trains on the configured split without touching the filesystem.
pub fn run_training(cfg: &RunConfig, traces: &mut Vec<TraceRow>) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let (train, test) = cfg.split(&data);
    let mut model = Model::new(
        cfg.model.clone(),
        cfg.ablation,
        data.dims,
        data.num_classes,
        cfg.optim.seed,
    )?;
    let held = (!test.conversations.is_empty()).then_some(&test);
    let summary = balance::train(&mut model, &train, &cfg.optim, held, traces)?;
    let eval_on = if held.is_some() { &test } else { &train };
    let report = TrainReport {
        modalities: model.modalities(),
        steps: summary.steps,
        train_conversations: train.conversations.len(),
        held_out_conversations: test.conversations.len(),
        train: balance::evaluate(&model, &train, model.modalities())?,
        held_out: balance::evaluate(&model, eval_on, model.modalities())?,
        logit_trace: held_out_logit_trace(&model, eval_on)?,
        best_epoch: summary
            .held_out
            .iter()
            .fold(None::<&EpochEval>, |best, e| match best {
                Some(b) if b.weighted_f1 >= e.weighted_f1 => Some(b),
                _ => Some(e),
            })
            .cloned(),
        epochs: summary.held_out,
    };
    Ok((model, report))
}

/// Trains and writes `checkpoint.bin`, `traces.csv` and `report.json` to
/// `out`. Traces gathered before a divergence are still written.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out)?;
    let mut traces = Vec::new();
    let result = run_training(cfg, &mut traces);
    fs::write(out.join(TRACES_FILE), balance::traces_csv(&traces))?;
    let (model, report) = result?;
    checkpoint::save(&model, out.join(CHECKPOINT_FILE))?;
    fs::write(
        out.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(TrainOutcome {
        model,
        report,
        traces,
    })
}

/// Evaluates a saved model on `data` with the modalities in `active`.
pub fn eval(model: &Model, data: &Dataset, active: ModalitySet) -> Result<EvalReport> {
    balance::evaluate(model, data, active)
}

/// Evaluation data for `eval`: an explicit dataset file, or the held-out
/// split of the configured data.
pub fn eval_dataset(cfg: &RunConfig, data_path: Option<&Path>) -> Result<Dataset> {
    match data_path {
        Some(p) => Dataset::load(p),
        None => {
            let data = cfg.dataset()?;
            let (_, test) = cfg.split(&data);
            if test.conversations.is_empty() {
                return Err(Error::Dataset(
                    "held-out split is empty; pass a dataset file".into(),
                ));
            }
            Ok(test)
        }
    }
}

pub fn write_eval(report: &EvalReport, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub delta_wf1: f64,
    pub delta_acc: f64,
}

pub const ABLATION_HEADER: &str = "variant,wf1,acc,delta_wf1,delta_acc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.variant, r.weighted_f1, r.accuracy, r.delta_wf1, r.delta_acc
        )
        .expect("writing to a string");
    }
    out
}

/// Trains the full model and each ablation with shared seeds. Deltas are
/// `full − variant`.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut scores = Vec::new();
    for (name, ablation) in Ablation::VARIANTS {
        let mut c = cfg.clone();
        c.ablation = ablation;
        let (_, report) = run_training(&c, &mut Vec::new())?;
        scores.push((name, report.held_out.weighted_f1, report.held_out.accuracy));
    }
    let (_, full_f1, full_acc) = scores[0];
    Ok(scores
        .into_iter()
        .map(|(variant, f1, acc)| AblationRow {
            variant,
            weighted_f1: f1,
            accuracy: acc,
            delta_wf1: full_f1 - f1,
            delta_acc: full_acc - acc,
        })
        .collect())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(ABLATION_FILE), ablation_csv(&rows))?;
    Ok(rows)
}
