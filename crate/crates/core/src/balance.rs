//! Discrepancy-ratio gradient modulation and the training loop.
//!
//! Each step scores how well every modality alone predicts the labels, turns
//! the scores into ratios against the weakest modality, and damps the
//! encoder updates of the stronger ones by `1 − tanh(α·ρ)`. Damped encoders
//! additionally receive Gaussian noise scaled by the spread of the
//! per-conversation gradients.

use std::fmt::Write as _;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::amw;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::metrics::EvalReport;
use crate::modality::{Modality, ModalitySet, PerModality};
use crate::model::{stream, stream_rng, BatchGrad, Model};
use crate::params::{ParamBlock, ParamMap, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to zero unimodal scores before division.
pub const SCORE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseEstimate {
    /// Per-parameter sample standard deviation of the per-conversation
    /// gradients in the minibatch.
    SampleStd,
    /// `|ĝ|·noise_scale`; cheaper, no per-conversation statistics needed.
    Scaled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Modulation degree α.
    pub alpha: f64,
    pub noise: bool,
    pub noise_estimate: NoiseEstimate,
    pub noise_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.1,
            alpha: 0.1,
            noise: true,
            noise_estimate: NoiseEstimate::SampleStd,
            noise_scale: 0.1,
            batch_size: 10,
            epochs: 50,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optim.learning_rate", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("optim.alpha", "must be positive"));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return Err(Error::config("optim.noise_scale", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optim.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("optim.epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Per-step balance quantities; `None` for modalities not in use.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BalanceState {
    pub s: PerModality<Option<f64>>,
    pub rho: PerModality<Option<f64>>,
    pub k: PerModality<Option<f64>>,
}

/// `Σ_j softmax(c_j + b/M)[y_j]` over the rows `c_j` of one modality's
/// contribution matrix.
pub fn unimodal_score(
    contribution: &Tensor,
    bias: &[f64],
    labels: &[usize],
    m_count: usize,
) -> Result<f64> {
    let (n, e) = contribution.dims2()?;
    if bias.len() != e || labels.len() != n {
        return Err(Error::shape(format!(
            "score inputs: {n}×{e} logits, {} biases, {} labels",
            bias.len(),
            labels.len()
        )));
    }
    let shift: Vec<f64> = bias.iter().map(|b| b / m_count as f64).collect();
    let mut total = 0.0;
    let mut row = vec![0.0; e];
    for (j, &y) in labels.iter().enumerate() {
        for (k, r) in row.iter_mut().enumerate() {
            *r = contribution.get(&[j, k]) + shift[k];
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += (row[y] - max).exp() / denom;
    }
    Ok(total)
}

/// `ρ^m = s^m / min_j s^j`, with zero scores floored.
pub fn discrepancy_ratio(s: &PerModality<Option<f64>>) -> PerModality<Option<f64>> {
    let floored = s.map(|m, v| {
        v.map(|v| {
            if v <= 0.0 {
                warn!("unimodal score for {m} is {v}; flooring at {SCORE_FLOOR}");
                SCORE_FLOOR
            } else {
                v
            }
        })
    });
    let min = floored
        .iter()
        .filter_map(|(_, v)| *v)
        .fold(f64::INFINITY, f64::min);
    floored.map(|_, v| v.map(|v| v / min))
}

/// `k = 1 − tanh(α·ρ)` when `ρ > 1`, otherwise 1.
///
/// Evaluated as `2e^{−2x}/(1 + e^{−2x})`, which avoids cancellation, and kept
/// at or above the smallest positive normal so a damped step never vanishes.
pub fn modulation_coefficient(rho: f64, alpha: f64) -> f64 {
    if rho > 1.0 {
        let e = (-2.0 * alpha * rho).exp();
        (2.0 * e / (1.0 + e)).max(f64::MIN_POSITIVE)
    } else {
        1.0
    }
}

/// Per-parameter noise standard deviations for the encoder blocks.
pub fn noise_std(bg: &BatchGrad, estimate: NoiseEstimate, scale: f64) -> ParamMap {
    let o = bg.per_conversation.len();
    bg.mean
        .iter()
        .filter(|(name, _)| matches!(ParamBlock::of(name), ParamBlock::Encoder(_)))
        .map(|(name, mean)| {
            let std = match estimate {
                NoiseEstimate::SampleStd if o > 1 => {
                    let mut var = Tensor::zeros(mean.shape());
                    for cg in &bg.per_conversation {
                        let g = &cg.grads[name];
                        for ((v, &x), &mu) in
                            var.data_mut().iter_mut().zip(g.data()).zip(mean.data())
                        {
                            *v += (x - mu) * (x - mu);
                        }
                    }
                    var.map(|v| (v / (o - 1) as f64).sqrt())
                }
                _ => mean.map(|g| g.abs() * scale),
            };
            (name.clone(), std)
        })
        .collect()
}

fn block_label(block: ParamBlock) -> String {
    match block {
        ParamBlock::Encoder(m) => format!("gradient in encoder block `{m}`"),
        ParamBlock::Shared => "gradient in shared parameters".to_string(),
    }
}

/// `θ ← θ − η·ĝ·k^m + η·h` on encoder blocks and `θ ← θ − η·ĝ` elsewhere.
///
/// `noise`, when given, holds per-parameter standard deviations for the
/// encoder blocks; samples are drawn in parameter order.
pub fn apply_update(
    params: &mut ParamStore,
    grads: &ParamMap,
    k: &PerModality<Option<f64>>,
    lr: f64,
    mut noise: Option<(&ParamMap, &mut dyn rand::RngCore)>,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Divergence(block_label(ParamBlock::of(name))));
        }
    }
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
        match ParamBlock::of(name) {
            ParamBlock::Encoder(m) => {
                let km = k[m].unwrap_or(1.0);
                for (x, &gx) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * gx * km;
                }
                if let Some((std, rng)) = noise.as_mut() {
                    if let Some(sd) = std.get(name) {
                        for (x, &s) in p.data_mut().iter_mut().zip(sd.data()) {
                            let z: f64 = rng.sample(StandardNormal);
                            *x += lr * s * z;
                        }
                    }
                }
            }
            ParamBlock::Shared => {
                for (x, &gx) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= lr * gx;
                }
            }
        }
    }
    Ok(())
}

/// One optimizer step's trace record.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
    pub balance: BalanceState,
    /// Mean fusion-head column norm per modality.
    pub wnorm: PerModality<Option<f64>>,
}

pub const TRACE_HEADER: &str = "epoch,step,loss_cls,loss_feature,loss_modal,loss_main,s_t,s_a,s_v,rho_t,rho_a,rho_v,k_t,k_a,k_v,wnorm_t,wnorm_a,wnorm_v";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.losses.cls,
            self.losses.feature,
            self.losses.modal,
            self.losses.main
        );
        for group in [
            &self.balance.s,
            &self.balance.rho,
            &self.balance.k,
            &self.wnorm,
        ] {
            for m in Modality::ALL {
                out.push(',');
                if let Some(v) = group[m] {
                    write!(out, "{v}").expect("writing to a string");
                }
            }
        }
        out
    }
}

pub fn traces_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Held-out quality after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub held_out: Vec<EpochEval>,
}

/// Predictions and labels of every utterance in `data`, flattened.
pub fn predict_dataset(
    model: &Model,
    data: &Dataset,
    active: ModalitySet,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::with_capacity(data.num_utterances());
    let mut labels = Vec::with_capacity(data.num_utterances());
    for conv in &data.conversations {
        let p = model.predict(conv, active)?;
        preds.extend(amw::argmax_rows(&p.logits));
        labels.extend_from_slice(&conv.labels);
    }
    Ok((preds, labels))
}

pub fn evaluate(model: &Model, data: &Dataset, active: ModalitySet) -> Result<EvalReport> {
    model.check_compatible(data, active)?;
    let (preds, labels) = predict_dataset(model, data, active)?;
    EvalReport::new(&preds, &labels, model.num_classes)
}

/// Scores, ratios and coefficients of one minibatch.
pub fn balance_state(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    bg: &BatchGrad,
    alpha: f64,
) -> Result<BalanceState> {
    let active = model.modalities();
    let bias = model.params.get(amw::HEAD_BIAS)?.data().to_vec();
    let mut s = PerModality::splat(None);
    for m in active.iter() {
        let mut total = 0.0;
        for (cg, &i) in bg.per_conversation.iter().zip(indices) {
            let c = cg.contributions[m]
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("no contribution for {m}")))?;
            total += unimodal_score(c, &bias, &data.conversations[i].labels, active.len())?;
        }
        s[m] = Some(total);
    }
    let rho = discrepancy_ratio(&s);
    let k = if model.ablation.disable_modulation {
        rho.map(|_, r| r.map(|_| 1.0))
    } else {
        rho.map(|_, r| r.map(|r| modulation_coefficient(r, alpha)))
    };
    Ok(BalanceState { s, rho, k })
}

fn mean_norms(model: &Model) -> PerModality<Option<f64>> {
    amw::weight_norm_trace(&model.params)
        .map(|_, n| n.as_ref().map(|n| n.iter().sum::<f64>() / n.len() as f64))
}

/// Runs the training loop, appending one row per step to `traces` (rows
/// already pushed survive an error).
pub fn train(
    model: &mut Model,
    data: &Dataset,
    cfg: &OptimizerConfig,
    held_out: Option<&Dataset>,
    traces: &mut Vec<TraceRow>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    data.validate()?;
    model.check_compatible(data, model.modalities())?;
    let mut shuffle = stream_rng(cfg.seed, stream::SHUFFLE);
    let mut noise_rng = stream_rng(cfg.seed, stream::NOISE);
    let mut dropout_rng = stream_rng(cfg.seed, stream::DROPOUT);
    let use_dropout = model.config.encoder.dropout > 0.0;
    let noise_on = cfg.noise && !model.ablation.disable_modulation;
    let mut summary = TrainSummary::default();

    for epoch in 1..=cfg.epochs {
        for batch in dataset::batches(data.conversations.len(), cfg.batch_size, &mut shuffle)? {
            let dropout: Option<&mut dyn rand::RngCore> = if use_dropout {
                Some(&mut dropout_rng)
            } else {
                None
            };
            let bg = model.batch_gradient(data, &batch, dropout)?;
            let state = balance_state(model, data, &batch, &bg, cfg.alpha)?;
            summary.steps += 1;
            traces.push(TraceRow {
                epoch,
                step: summary.steps,
                losses: bg.losses,
                balance: state,
                wnorm: mean_norms(model),
            });
            if !bg.losses.main.is_finite() {
                return Err(Error::Divergence("main loss".into()));
            }
            if noise_on {
                let std = noise_std(&bg, cfg.noise_estimate, cfg.noise_scale);
                apply_update(
                    &mut model.params,
                    &bg.mean,
                    &state.k,
                    cfg.learning_rate,
                    Some((&std, &mut noise_rng)),
                )?;
            } else {
                apply_update(
                    &mut model.params,
                    &bg.mean,
                    &state.k,
                    cfg.learning_rate,
                    None,
                )?;
            }
        }
        if let Some(test) = held_out {
            let r = evaluate(model, test, model.modalities())?;
            summary.held_out.push(EpochEval {
                epoch,
                accuracy: r.accuracy,
                weighted_f1: r.weighted_f1,
            });
        }
    }
    Ok(summary)
}
