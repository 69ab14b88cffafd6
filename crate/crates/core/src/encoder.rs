//! Per-modality transformer encoder.
//!
//! Input projection `d_m → h`, optional sinusoidal positions, then `L`
//! post-norm layers of multi-head self-attention and a ReLU feed-forward
//! block, each wrapped in a residual connection and layer normalization.
//! Attention runs over the utterances of one conversation with no mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::{init_uniform, Bindings, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub positional: bool,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 32,
            layers: 2,
            heads: 4,
            ff: 64,
            positional: false,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.ff == 0 {
            return Err(Error::config(
                "model.encoder",
                "hidden, heads and ff must be positive",
            ));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.encoder.heads",
                format!(
                    "hidden size {} is not divisible by {} heads",
                    self.hidden, self.heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.encoder.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Scalar parameter count for input dimension `d_in`.
    pub fn param_count(&self, d_in: usize) -> usize {
        let (h, f) = (self.hidden, self.ff);
        let per_layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
        d_in * h + h + self.layers * per_layer
    }
}

fn name(m: Modality, rest: &str) -> String {
    format!("enc.{}.{rest}", m.key())
}

pub fn init(
    store: &mut ParamStore,
    m: Modality,
    d_in: usize,
    cfg: &EncoderConfig,
    rng: &mut impl Rng,
) {
    let (h, f) = (cfg.hidden, cfg.ff);
    store.insert(name(m, "in.w"), init_uniform(&[d_in, h], d_in, rng));
    store.insert(name(m, "in.b"), init_uniform(&[h], d_in, rng));
    for l in 0..cfg.layers {
        for p in ["q", "k", "v", "o"] {
            store.insert(
                name(m, &format!("l{l}.attn.{p}.w")),
                init_uniform(&[h, h], h, rng),
            );
            store.insert(
                name(m, &format!("l{l}.attn.{p}.b")),
                init_uniform(&[h], h, rng),
            );
        }
        store.insert(name(m, &format!("l{l}.ln1.g")), Tensor::ones(&[h]));
        store.insert(name(m, &format!("l{l}.ln1.b")), Tensor::zeros(&[h]));
        store.insert(
            name(m, &format!("l{l}.ff1.w")),
            init_uniform(&[h, f], h, rng),
        );
        store.insert(name(m, &format!("l{l}.ff1.b")), init_uniform(&[f], h, rng));
        store.insert(
            name(m, &format!("l{l}.ff2.w")),
            init_uniform(&[f, h], f, rng),
        );
        store.insert(name(m, &format!("l{l}.ff2.b")), init_uniform(&[h], f, rng));
        store.insert(name(m, &format!("l{l}.ln2.g")), Tensor::ones(&[h]));
        store.insert(name(m, &format!("l{l}.ln2.b")), Tensor::zeros(&[h]));
    }
}

/// Sinusoidal position table, `n × h`.
pub fn positional_table(n: usize, h: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, h]);
    for pos in 0..n {
        for i in 0..h {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / h as f64);
            let angle = pos as f64 * rate;
            t.set(
                &[pos, i],
                if i % 2 == 0 { angle.sin() } else { angle.cos() },
            );
        }
    }
    t
}

fn linear(tape: &mut Tape, b: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let w = b.var(&format!("{prefix}.w"))?;
    let bias = b.var(&format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, bias)
}

fn layer_norm(tape: &mut Tape, b: &Bindings, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let g = b.var(&format!("{prefix}.g"))?;
    let beta = b.var(&format!("{prefix}.b"))?;
    let n = tape.layer_norm(x, eps);
    let scaled = tape.mul_row(n, g)?;
    tape.add_bias(scaled, beta)
}

fn dropout(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(tape.shape(x));
    for v in mask.data_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

/// Output of [`encode`]: the representation plus each layer's per-head
/// attention probabilities (`N × N`, rows sum to one).
pub struct Encoded {
    pub z: Var,
    pub attention: Vec<Var>,
}

/// Encodes one conversation's `N × d_m` features into `N × h`.
///
/// Dropout is applied only when `rng` is given.
pub fn encode(
    tape: &mut Tape,
    b: &Bindings,
    m: Modality,
    x: Var,
    cfg: &EncoderConfig,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Encoded> {
    let (n, d_in) = tape.value(x).dims2()?;
    let w_in = b.var(&name(m, "in.w"))?;
    let expected = tape.shape(w_in)[0];
    if d_in != expected {
        return Err(Error::shape(format!(
            "modality {m} features have dim {d_in}, encoder expects {expected}"
        )));
    }
    let h = cfg.hidden;
    let dh = h / cfg.heads;
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut z = linear(tape, b, x, &name(m, "in"))?;
    if cfg.positional {
        let pe = tape.constant(positional_table(n, h));
        z = tape.add(z, pe)?;
    }

    let mut attention = Vec::new();
    for l in 0..cfg.layers {
        let q = linear(tape, b, z, &name(m, &format!("l{l}.attn.q")))?;
        let k = linear(tape, b, z, &name(m, &format!("l{l}.attn.k")))?;
        let v = linear(tape, b, z, &name(m, &format!("l{l}.attn.v")))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt_dh);
            let probs = tape.softmax(scores)?;
            attention.push(probs);
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let attn_out = linear(tape, b, cat, &name(m, &format!("l{l}.attn.o")))?;
        let attn_out = dropout(tape, attn_out, cfg.dropout, &mut rng)?;
        let res = tape.add(z, attn_out)?;
        let z1 = layer_norm(tape, b, res, &name(m, &format!("l{l}.ln1")), cfg.ln_eps)?;

        let f = linear(tape, b, z1, &name(m, &format!("l{l}.ff1")))?;
        let f = tape.relu(f);
        let f = linear(tape, b, f, &name(m, &format!("l{l}.ff2")))?;
        let f = dropout(tape, f, cfg.dropout, &mut rng)?;
        let res = tape.add(z1, f)?;
        z = layer_norm(tape, b, res, &name(m, &format!("l{l}.ln2")), cfg.ln_eps)?;
    }
    Ok(Encoded { z, attention })
}
