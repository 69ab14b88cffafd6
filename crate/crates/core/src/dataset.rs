//! Synthetic multimodal conversations, the dataset file format and minibatching.
//!
//! Each (class, modality) pair owns a fixed unit-norm prototype. An utterance
//! of class `c` gets features `γ_m·μ_{c,m} + ε` with `ε ~ N(0, σ²I)`, so
//! `γ_m` sets how informative modality `m` is relative to the shared noise.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{Modality, PerModality};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub labels: Vec<usize>,
    /// Per-modality `N × d_m` feature matrices.
    pub features: PerModality<Tensor>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dims: PerModality<usize>,
    pub conversations: Vec<Conversation>,
}

impl Dataset {
    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for c in &self.conversations {
            for &y in &c.labels {
                hist[y] += 1;
            }
        }
        hist
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            dims: self.dims,
            conversations: indices
                .iter()
                .map(|&i| self.conversations[i].clone())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Dataset(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        for conv in &self.conversations {
            if conv.labels.is_empty() {
                return Err(Error::data(&conv.id, "no utterances"));
            }
            for (m, feats) in conv.features.iter() {
                let (n, d) = feats
                    .dims2()
                    .map_err(|e| Error::data(&conv.id, format!("modality {m}: {e}")))?;
                if n != conv.labels.len() {
                    return Err(Error::data(
                        &conv.id,
                        format!(
                            "modality {m} has {n} utterances but there are {} labels",
                            conv.labels.len()
                        ),
                    ));
                }
                if d != self.dims[m] {
                    return Err(Error::data(
                        &conv.id,
                        format!("modality {m} has dim {d}, declared {}", self.dims[m]),
                    ));
                }
            }
            if let Some(&y) = conv.labels.iter().find(|&&y| y >= self.num_classes) {
                return Err(Error::data(
                    &conv.id,
                    format!("label {y} out of range for {} classes", self.num_classes),
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            num_classes: self.num_classes,
            dims: self.dims,
            conversations: self
                .conversations
                .iter()
                .map(|c| ConversationFile {
                    id: c.id.clone(),
                    labels: c.labels.clone(),
                    t: Some(rows_of(&c.features.t)),
                    a: Some(rows_of(&c.features.a)),
                    v: Some(rows_of(&c.features.v)),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text)?;
        let mut conversations = Vec::with_capacity(file.conversations.len());
        for raw in file.conversations {
            let id = raw.id;
            let n = raw.labels.len();
            let take = |m: Modality, rows: Option<Vec<Vec<f64>>>| -> Result<Tensor> {
                let rows = rows.ok_or_else(|| {
                    Error::data(&id, format!("missing modality `{}` features", m.key()))
                })?;
                if rows.len() != n {
                    return Err(Error::data(
                        &id,
                        format!(
                            "modality `{}` has {} utterances but there are {n} labels",
                            m.key(),
                            rows.len()
                        ),
                    ));
                }
                Tensor::from_rows(&rows)
                    .map_err(|e| Error::data(&id, format!("modality `{}`: {e}", m.key())))
            };
            let features = PerModality {
                t: take(Modality::Text, raw.t)?,
                a: take(Modality::Audio, raw.a)?,
                v: take(Modality::Visual, raw.v)?,
            };
            conversations.push(Conversation {
                id,
                labels: raw.labels,
                features,
            });
        }
        let ds = Dataset {
            num_classes: file.num_classes,
            dims: file.dims,
            conversations,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    num_classes: usize,
    dims: PerModality<usize>,
    conversations: Vec<ConversationFile>,
}

#[derive(Serialize, Deserialize)]
struct ConversationFile {
    id: String,
    labels: Vec<usize>,
    t: Option<Vec<Vec<f64>>>,
    a: Option<Vec<Vec<f64>>>,
    v: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRange {
    pub min: usize,
    pub max: usize,
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dims: PerModality<usize>,
    /// Informativeness `γ_m ∈ [0, 1]`.
    pub gamma: PerModality<f64>,
    pub noise_sigma: f64,
    pub conversations: usize,
    pub utterances: UtteranceRange,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            dims: PerModality {
                t: 16,
                a: 12,
                v: 12,
            },
            gamma: PerModality::splat(1.0),
            noise_sigma: 0.5,
            conversations: 60,
            utterances: UtteranceRange { min: 5, max: 10 },
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Text carries most of the signal; audio and visual are weak.
    pub fn dominant_text() -> Self {
        SynthSpec {
            gamma: PerModality {
                t: 1.0,
                a: 0.3,
                v: 0.3,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        for (m, &d) in self.dims.iter() {
            if d == 0 {
                return Err(Error::config(format!("dims.{m}"), "must be positive"));
            }
        }
        for (m, &g) in self.gamma.iter() {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(
                    format!("gamma.{m}"),
                    format!("{g} is outside [0, 1]"),
                ));
            }
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::config(
                "noise_sigma",
                "must be finite and nonnegative",
            ));
        }
        if self.conversations == 0 {
            return Err(Error::config("conversations", "must be positive"));
        }
        let r = self.utterances;
        if r.min == 0 || r.min > r.max {
            return Err(Error::config(
                "utterances",
                format!("invalid range {}..={}", r.min, r.max),
            ));
        }
        Ok(())
    }
}

/// Unit-norm class prototypes, `num_classes × d_m` per modality.
pub fn prototypes(spec: &SynthSpec) -> Result<PerModality<Tensor>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_prototypes(spec, &mut rng))
}

fn draw_prototypes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> PerModality<Tensor> {
    let mut protos = spec.dims.map(|_, &d| Tensor::zeros(&[spec.num_classes, d]));
    for c in 0..spec.num_classes {
        for m in Modality::ALL {
            let d = spec.dims[m];
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let row = &mut protos[m].data_mut()[c * d..(c + 1) * d];
            for (r, x) in row.iter_mut().zip(&v) {
                *r = x / norm;
            }
        }
    }
    protos
}

/// Generates a dataset; a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = draw_prototypes(spec, &mut rng);

    let mut conversations = Vec::with_capacity(spec.conversations);
    for ci in 0..spec.conversations {
        let n = rng.random_range(spec.utterances.min..=spec.utterances.max);
        let labels: Vec<usize> = (0..n)
            .map(|_| rng.random_range(0..spec.num_classes))
            .collect();
        let mut feats = spec.dims.map(|_, &d| Vec::with_capacity(n * d));
        for &y in &labels {
            for m in Modality::ALL {
                let d = spec.dims[m];
                let proto = &protos[m].data()[y * d..(y + 1) * d];
                for &p in proto {
                    let eps: f64 = rng.sample(StandardNormal);
                    feats[m].push(spec.gamma[m] * p + spec.noise_sigma * eps);
                }
            }
        }
        let features = PerModality::from_fn(|m| {
            Tensor::new(vec![n, spec.dims[m]], std::mem::take(&mut feats[m]))
                .expect("generated shapes agree")
        });
        conversations.push(Conversation {
            id: format!("conv{ci:04}"),
            labels,
            features,
        });
    }
    Ok(Dataset {
        num_classes: spec.num_classes,
        dims: spec.dims,
        conversations,
    })
}

/// Partitions a seeded permutation of `0..len` into batches of `batch_size`.
/// The last batch may be short.
pub fn batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Dataset("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Deterministic conversation-level split into (train, held-out) indices.
/// The held-out share is `round(len·holdout)`, leaving at least one
/// training conversation.
pub fn holdout_split(len: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((len as f64 * holdout).round() as usize).min(len.saturating_sub(1));
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    (train, test)
}
