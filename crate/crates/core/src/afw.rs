//! Adaptive feature weighting.
//!
//! For each modality the encoder output `Z (N×h)` is projected twice into
//! rank-`r` factors whose row-wise Khatri-Rao product, reshaped to `N×r×r`,
//! gives the query and key tensor-ring cores. Their scaled element-wise
//! product is softmax-normalized per utterance slice into the attention
//! coefficients `Θ`. Averaging `Θ` over utterances yields a pooled `r×r`
//! matrix per modality, and every modality's `Θ` is contracted with all the
//! pooled matrices in turn before a bias-free linear map back to `N×h`. The
//! resulting feature attention gates `Z` with a `β`-weighted residual.
//!
//! A small mapping network predicts the same attention directly from `Z`;
//! the L1 gap between the two is the feature-level loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::params::{init_uniform, Bindings, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AfwConfig {
    /// Shared tensor-ring rank.
    pub rank: usize,
    /// Residual weight on the unimodal representation, in `[0, 1]`.
    pub beta: f64,
    /// Softmax scale denominator; defaults to `rank²`.
    pub d_k: Option<f64>,
}

impl Default for AfwConfig {
    fn default() -> Self {
        AfwConfig {
            rank: 4,
            beta: 0.5,
            d_k: None,
        }
    }
}

impl AfwConfig {
    pub fn d_k(&self) -> f64 {
        self.d_k.unwrap_or((self.rank * self.rank) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("model.afw.rank", "must be at least 1"));
        }
        check_beta(self.beta)?;
        check_dk(self.d_k())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(
            "model.afw.beta",
            format!("{beta} is outside [0, 1]"),
        ));
    }
    Ok(())
}

fn check_dk(d_k: f64) -> Result<()> {
    if d_k.is_nan() || d_k <= 0.0 {
        return Err(Error::config(
            "model.afw.d_k",
            format!("{d_k} must be positive"),
        ));
    }
    Ok(())
}

pub fn param_name(m: Modality, rest: &str) -> String {
    format!("afw.{}.{rest}", m.key())
}

pub fn init(
    store: &mut ParamStore,
    m: Modality,
    hidden: usize,
    cfg: &AfwConfig,
    rng: &mut impl Rng,
) {
    let (h, r) = (hidden, cfg.rank);
    for p in ["wq1", "wq2", "wk1", "wk2"] {
        store.insert(param_name(m, p), init_uniform(&[h, r], h, rng));
    }
    store.insert(param_name(m, "lin"), init_uniform(&[r * r, h], r * r, rng));
    store.insert(param_name(m, "map1.w"), init_uniform(&[h, h], h, rng));
    store.insert(param_name(m, "map1.b"), init_uniform(&[h], h, rng));
    store.insert(param_name(m, "map2.w"), init_uniform(&[h, h], h, rng));
    store.insert(param_name(m, "map2.b"), init_uniform(&[h], h, rng));
}

/// Core tensor `reshape(KR(Z·W¹, Z·W²))`, shape `N×r×r`.
pub fn make_cores(tape: &mut Tape, z: Var, w1: Var, w2: Var) -> Result<Var> {
    let (n, _) = tape.value(z).dims2()?;
    let p1 = tape.matmul(z, w1)?;
    let p2 = tape.matmul(z, w2)?;
    let r1 = tape.shape(p1)[1];
    let r2 = tape.shape(p2)[1];
    let kr = tape.khatri_rao(p1, p2)?;
    tape.reshape(kr, &[n, r1, r2])
}

/// `Θ = softmax((G_Q ⊙ G_K)/√d_k)` over the flattened `r²` entries of each
/// utterance slice.
pub fn attention_coefficients(tape: &mut Tape, gq: Var, gk: Var, d_k: f64) -> Result<Var> {
    check_dk(d_k)?;
    let (n, r1, r2) = tape.value(gq).dims3()?;
    let prod = tape.mul(gq, gk)?;
    let scaled = tape.scale(prod, 1.0 / d_k.sqrt());
    let flat = tape.reshape(scaled, &[n, r1 * r2])?;
    let probs = tape.softmax(flat)?;
    tape.reshape(probs, &[n, r1, r2])
}

/// Pooled attention: mean of `Θ` over the utterance axis, `r×r`.
pub fn pool_attention(tape: &mut Tape, theta: Var) -> Result<Var> {
    tape.mean_axis0(theta)
}

/// `Att_m = flatten(Θ_m ×A^t ×A^a ×A^v) · Lin`, contracting with every active
/// modality's pooled matrix in `t, a, v` order.
pub fn feature_attention(
    tape: &mut Tape,
    theta: Var,
    pooled: &PerModality<Option<Var>>,
    active: impl IntoIterator<Item = Modality>,
    lin: Var,
) -> Result<Var> {
    let (n, r1, r2) = tape.value(theta).dims3()?;
    let mut x = theta;
    for m in active {
        let a = pooled[m].ok_or_else(|| {
            Error::Contract(format!("pooled attention for modality {m} is missing"))
        })?;
        x = tape.contract_last(x, a)?;
    }
    let flat = tape.reshape(x, &[n, r1 * r2])?;
    tape.matmul(flat, lin)
}

/// `Z_f = Att ⊙ Z + β·Z`.
pub fn fuse_features(tape: &mut Tape, att: Var, z: Var, beta: f64) -> Result<Var> {
    check_beta(beta)?;
    let gated = tape.mul(att, z)?;
    let residual = tape.scale(z, beta);
    tape.add(gated, residual)
}

/// Attention mapping network: `ReLU(Z·W₁ + b₁)·W₂ + b₂`.
pub fn map_attention(tape: &mut Tape, b: &Bindings, m: Modality, z: Var) -> Result<Var> {
    let w1 = b.var(&param_name(m, "map1.w"))?;
    let b1 = b.var(&param_name(m, "map1.b"))?;
    let w2 = b.var(&param_name(m, "map2.w"))?;
    let b2 = b.var(&param_name(m, "map2.b"))?;
    let hdn = tape.matmul(z, w1)?;
    let hdn = tape.add_bias(hdn, b1)?;
    let hdn = tape.relu(hdn);
    let out = tape.matmul(hdn, w2)?;
    tape.add_bias(out, b2)
}

/// Per-modality values produced by one AFW pass.
pub struct AfwOutput {
    pub theta: PerModality<Option<Var>>,
    pub pooled: PerModality<Option<Var>>,
    pub att: PerModality<Option<Var>>,
    pub att_hat: PerModality<Option<Var>>,
    pub fused: PerModality<Option<Var>>,
}

/// Runs the full block over the active modalities.
pub fn forward(
    tape: &mut Tape,
    b: &Bindings,
    z: &PerModality<Option<Var>>,
    active: &[Modality],
    cfg: &AfwConfig,
) -> Result<AfwOutput> {
    let mut theta = PerModality::splat(None);
    let mut pooled = PerModality::splat(None);
    for &m in active {
        let zm = z[m].ok_or_else(|| Error::Contract(format!("no representation for {m}")))?;
        let gq = make_cores(
            tape,
            zm,
            b.var(&param_name(m, "wq1"))?,
            b.var(&param_name(m, "wq2"))?,
        )?;
        let gk = make_cores(
            tape,
            zm,
            b.var(&param_name(m, "wk1"))?,
            b.var(&param_name(m, "wk2"))?,
        )?;
        let th = attention_coefficients(tape, gq, gk, cfg.d_k())?;
        pooled[m] = Some(pool_attention(tape, th)?);
        theta[m] = Some(th);
    }
    let mut att = PerModality::splat(None);
    let mut att_hat = PerModality::splat(None);
    let mut fused = PerModality::splat(None);
    for &m in active {
        let zm = z[m].expect("checked above");
        let lin = b.var(&param_name(m, "lin"))?;
        let a = feature_attention(
            tape,
            theta[m].unwrap(),
            &pooled,
            active.iter().copied(),
            lin,
        )?;
        fused[m] = Some(fuse_features(tape, a, zm, cfg.beta)?);
        att_hat[m] = Some(map_attention(tape, b, m, zm)?);
        att[m] = Some(a);
    }
    Ok(AfwOutput {
        theta,
        pooled,
        att,
        att_hat,
        fused,
    })
}
