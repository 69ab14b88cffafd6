//! Training objectives and their sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::PerModality;

/// Scalar values of each objective for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub feature: f64,
    pub modal: f64,
    pub main: f64,
}

/// Classifier cross-entropy, mean over utterances.
pub fn cls_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Cross-entropy on the fused cosine logits, before the classifier.
pub fn modal_loss(tape: &mut Tape, fused: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(fused, labels)
}

/// `(1/N) Σ_m Σ |Att_m − Att̂_m|` for one conversation of `N` utterances.
///
/// Pairs are matched by modality; a modality present on only one side is a
/// shape error.
pub fn feature_loss(
    tape: &mut Tape,
    att: &PerModality<Option<Var>>,
    att_hat: &PerModality<Option<Var>>,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut n = 0;
    for (m, a) in att.iter() {
        let (a, p) = match (*a, att_hat[m]) {
            (Some(a), Some(p)) => (a, p),
            (None, None) => continue,
            _ => return Err(Error::shape(format!("unpaired feature attention for {m}"))),
        };
        if tape.shape(a) != tape.shape(p) {
            return Err(Error::shape(format!(
                "feature attention for {m} is {:?}, prediction is {:?}",
                tape.shape(a),
                tape.shape(p)
            )));
        }
        n = tape.shape(a)[0];
        let d = tape.sub(a, p)?;
        let d = tape.abs(d);
        let s = tape.sum(d);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    match total {
        Some(t) => Ok(tape.scale(t, 1.0 / n as f64)),
        None => Ok(tape.constant(crate::tensor::Tensor::scalar(0.0))),
    }
}

/// `cls + feature + modal`. A non-finite term is reported by name.
pub fn main_loss(
    tape: &mut Tape,
    cls: Var,
    feature: Var,
    modal: Var,
) -> Result<(Var, LossBreakdown)> {
    let part = |tape: &Tape, v: Var, name: &str| -> Result<f64> {
        let x = tape.value(v).data()[0];
        if !x.is_finite() {
            return Err(Error::Divergence(format!("{name} loss ({x})")));
        }
        Ok(x)
    };
    let b_cls = part(tape, cls, "cls")?;
    let b_feature = part(tape, feature, "feature")?;
    let b_modal = part(tape, modal, "modal")?;
    let s = tape.add(cls, feature)?;
    let main = tape.add(s, modal)?;
    let breakdown = LossBreakdown {
        cls: b_cls,
        feature: b_feature,
        modal: b_modal,
        main: tape.value(main).data()[0],
    };
    Ok((main, breakdown))
}
