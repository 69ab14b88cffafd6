//! Adaptive modality weighting: per-class cosine fusion of the modality
//! representations into shared logits, and the classifier MLP on top.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::modality::{Modality, PerModality};
use crate::params::{init_uniform, Bindings, ParamStore};
use crate::tensor::Tensor;

/// Norm floor for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

pub fn head_weight(m: Modality) -> String {
    format!("head.{}.w", m.key())
}

pub const HEAD_BIAS: &str = "head.b";

/// Initializes the fusion head (`h×E` per modality plus a shared bias) for
/// the given modalities.
pub fn init_head(
    store: &mut ParamStore,
    modalities: impl IntoIterator<Item = Modality>,
    hidden: usize,
    classes: usize,
    rng: &mut impl Rng,
) {
    for m in modalities {
        store.insert(
            head_weight(m),
            init_uniform(&[hidden, classes], hidden, rng),
        );
    }
    store.insert(HEAD_BIAS, Tensor::zeros(&[classes]));
}

/// Initializes the `E → c → E` classifier.
pub fn init_classifier(store: &mut ParamStore, classes: usize, hidden: usize, rng: &mut impl Rng) {
    store.insert("clf.w1", init_uniform(&[classes, hidden], classes, rng));
    store.insert("clf.b1", Tensor::zeros(&[hidden]));
    store.insert("clf.w2", init_uniform(&[hidden, classes], hidden, rng));
    store.insert("clf.b2", Tensor::zeros(&[classes]));
}

/// `cos⟨W_k, z_n⟩` for every row `n` of `z` and column `k` of `w`.
pub fn cosine_logits(tape: &mut Tape, z: Var, w: Var) -> Result<Var> {
    let zn = tape.normalize_rows(z, NORM_FLOOR)?;
    let wt = tape.transpose(w)?;
    let wn = tape.normalize_rows(wt, NORM_FLOOR)?;
    let wn = tape.transpose(wn)?;
    tape.matmul(zn, wn)
}

/// Fused logits together with each modality's contribution before the bias.
pub struct Fusion {
    pub logits: Var,
    pub contributions: PerModality<Option<Var>>,
}

fn sum_with_bias(
    tape: &mut Tape,
    b: &Bindings,
    contributions: PerModality<Option<Var>>,
) -> Result<Fusion> {
    let mut total: Option<Var> = None;
    for c in contributions.iter().filter_map(|(_, c)| *c) {
        total = Some(match total {
            None => c,
            Some(acc) => tape.add(acc, c)?,
        });
    }
    let total = total.ok_or_else(|| crate::Error::Contract("no modality to fuse".into()))?;
    let logits = tape.add_bias(total, b.var(HEAD_BIAS)?)?;
    Ok(Fusion {
        logits,
        contributions,
    })
}

/// `Z[n,k] = Σ_m cos⟨W_k^m, z_n^m⟩ + b_k` over the modalities present in `z`.
pub fn fuse_modalities(
    tape: &mut Tape,
    b: &Bindings,
    z: &PerModality<Option<Var>>,
) -> Result<Fusion> {
    let mut contributions = PerModality::splat(None);
    for (m, zm) in z.iter() {
        if let Some(zm) = *zm {
            contributions[m] = Some(cosine_logits(tape, zm, b.var(&head_weight(m))?)?);
        }
    }
    sum_with_bias(tape, b, contributions)
}

/// Un-normalized counterpart `Σ_m Z^m·W^m + b`.
pub fn fuse_linear(tape: &mut Tape, b: &Bindings, z: &PerModality<Option<Var>>) -> Result<Fusion> {
    let mut contributions = PerModality::splat(None);
    for (m, zm) in z.iter() {
        if let Some(zm) = *zm {
            contributions[m] = Some(tape.matmul(zm, b.var(&head_weight(m))?)?);
        }
    }
    sum_with_bias(tape, b, contributions)
}

/// Classifier logits `ReLU(x·W₁ + b₁)·W₂ + b₂`.
pub fn classify(tape: &mut Tape, b: &Bindings, fused: Var) -> Result<Var> {
    let h = tape.matmul(fused, b.var("clf.w1")?)?;
    let h = tape.add_bias(h, b.var("clf.b1")?)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, b.var("clf.w2")?)?;
    tape.add_bias(out, b.var("clf.b2")?)
}

/// Column norms `‖W_k^m‖` per modality; `None` for modalities without a head.
pub fn weight_norm_trace(store: &ParamStore) -> PerModality<Option<Vec<f64>>> {
    PerModality::from_fn(|m| {
        store
            .get(&head_weight(m))
            .ok()
            .and_then(|w| w.column_norms().ok())
    })
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[logits.ndim() - 1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
