//! The full network: per-modality encoders, feature weighting, modality
//! weighting and the classifier, plus per-conversation loss and gradients.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afw::{self, AfwConfig};
use crate::amw;
use crate::autodiff::{Tape, Var};
use crate::dataset::{Conversation, Dataset};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::modality::{Modality, ModalitySet, PerModality};
use crate::params::{Bindings, ParamMap, ParamStore};
use crate::tensor::Tensor;

/// Independent random streams derived from one seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const DROPOUT: u64 = 3;
}

/// Reborrows an optional random source for one call.
pub fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub encoder: EncoderConfig,
    #[serde(flatten)]
    pub afw: AfwConfig,
    /// Classifier hidden width; `2·classes` when unset.
    pub mlp_hidden: Option<usize>,
    /// Train the mapping network against a detached feature attention.
    pub feature_stop_grad: bool,
    pub modalities: ModalitySet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            afw: AfwConfig::default(),
            mlp_hidden: None,
            feature_stop_grad: false,
            modalities: ModalitySet::FULL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.afw.validate()?;
        if self.mlp_hidden == Some(0) {
            return Err(Error::config("model.mlp_hidden", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Replace feature weighting by the identity (`Z_f = Z`, no feature loss).
    pub disable_afw: bool,
    /// Replace cosine fusion by un-normalized linear fusion.
    pub disable_amw: bool,
    /// Force every modulation coefficient to 1 and turn noise off.
    pub disable_modulation: bool,
}

impl Ablation {
    pub const VARIANTS: [(&'static str, Ablation); 4] = [
        (
            "full",
            Ablation {
                disable_afw: false,
                disable_amw: false,
                disable_modulation: false,
            },
        ),
        (
            "w/o AFW",
            Ablation {
                disable_afw: true,
                disable_amw: false,
                disable_modulation: false,
            },
        ),
        (
            "w/o AMW",
            Ablation {
                disable_afw: false,
                disable_amw: true,
                disable_modulation: false,
            },
        ),
        (
            "w/o modulation",
            Ablation {
                disable_afw: false,
                disable_amw: false,
                disable_modulation: true,
            },
        ),
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub dims: PerModality<usize>,
    pub num_classes: usize,
    pub params: ParamStore,
}

/// Tape variables of one conversation's forward pass.
pub struct Forward {
    pub logits: Var,
    pub fused: Var,
    pub contributions: PerModality<Option<Var>>,
    pub main: Var,
    pub losses: LossBreakdown,
}

/// Values of one conversation's forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub fused: Tensor,
    pub contributions: PerModality<Option<Tensor>>,
}

/// Gradient of the main loss for one conversation.
pub struct ConversationGrad {
    pub grads: ParamMap,
    pub losses: LossBreakdown,
    pub contributions: PerModality<Option<Tensor>>,
}

/// Minibatch gradient `ĝ = (1/o) Σ ∇ℓ` and the per-conversation terms.
pub struct BatchGrad {
    pub mean: ParamMap,
    pub per_conversation: Vec<ConversationGrad>,
    pub losses: LossBreakdown,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        ablation: Ablation,
        dims: PerModality<usize>,
        num_classes: usize,
        seed: u64,
    ) -> Result<Model> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::config(
                "data.num_classes",
                "need at least two classes",
            ));
        }
        let mut rng = stream_rng(seed, stream::INIT);
        let mut params = ParamStore::new();
        let h = config.encoder.hidden;
        for m in config.modalities.iter() {
            encoder::init(&mut params, m, dims[m], &config.encoder, &mut rng);
        }
        if !ablation.disable_afw {
            for m in config.modalities.iter() {
                afw::init(&mut params, m, h, &config.afw, &mut rng);
            }
        }
        amw::init_head(
            &mut params,
            config.modalities.iter(),
            h,
            num_classes,
            &mut rng,
        );
        let hidden = config.mlp_hidden.unwrap_or(2 * num_classes);
        amw::init_classifier(&mut params, num_classes, hidden, &mut rng);
        Ok(Model {
            config,
            ablation,
            dims,
            num_classes,
            params,
        })
    }

    pub fn modalities(&self) -> ModalitySet {
        self.config.modalities
    }

    /// Checks that `active` is usable with this model and `data`.
    pub fn check_compatible(&self, data: &Dataset, active: ModalitySet) -> Result<()> {
        if !active.is_subset_of(&self.config.modalities) {
            return Err(Error::Contract(format!(
                "modalities {active} are not all covered by the model (trained on {})",
                self.config.modalities
            )));
        }
        if data.num_classes != self.num_classes {
            return Err(Error::Contract(format!(
                "dataset has {} classes, model has {}",
                data.num_classes, self.num_classes
            )));
        }
        for m in active.iter() {
            if data.dims[m] != self.dims[m] {
                return Err(Error::Contract(format!(
                    "modality {m} has dim {} in the dataset, {} in the model",
                    data.dims[m], self.dims[m]
                )));
            }
        }
        Ok(())
    }

    /// Builds one conversation's forward pass and losses on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        conv: &Conversation,
        active: ModalitySet,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let mods: Vec<Modality> = active.iter().collect();
        let mut z = PerModality::splat(None);
        for &m in &mods {
            let x = tape.constant(conv.features[m].clone());
            let enc = encoder::encode(tape, b, m, x, &self.config.encoder, reborrow(&mut dropout))
                .map_err(|e| match e {
                    Error::Shape(msg) => Error::data(&conv.id, msg),
                    other => other,
                })?;
            z[m] = Some(enc.z);
        }

        let (zf, feature) = if self.ablation.disable_afw {
            (z, tape.constant(Tensor::scalar(0.0)))
        } else {
            let out = afw::forward(tape, b, &z, &mods, &self.config.afw)?;
            let att = if self.config.feature_stop_grad {
                out.att.map(|_, a| a.map(|a| tape.detach(a)))
            } else {
                out.att
            };
            let feature = losses::feature_loss(tape, &att, &out.att_hat)?;
            (out.fused, feature)
        };

        let fusion = if self.ablation.disable_amw {
            amw::fuse_linear(tape, b, &zf)?
        } else {
            amw::fuse_modalities(tape, b, &zf)?
        };
        let logits = amw::classify(tape, b, fusion.logits)?;
        let cls = losses::cls_loss(tape, logits, &conv.labels)?;
        let modal = losses::modal_loss(tape, fusion.logits, &conv.labels)?;
        let (main, breakdown) = losses::main_loss(tape, cls, feature, modal)?;
        Ok(Forward {
            logits,
            fused: fusion.logits,
            contributions: fusion.contributions,
            main,
            losses: breakdown,
        })
    }

    pub fn predict(&self, conv: &Conversation, active: ModalitySet) -> Result<Prediction> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &b, conv, active, None)?;
        Ok(Prediction {
            logits: tape.value(f.logits).clone(),
            fused: tape.value(f.fused).clone(),
            contributions: f.contributions.map(|_, c| c.map(|c| tape.value(c).clone())),
        })
    }

    pub fn conversation_grad(
        &self,
        conv: &Conversation,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<ConversationGrad> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let f = self.forward(&mut tape, &b, conv, self.config.modalities, dropout)?;
        let mut g = tape.backward(f.main)?;
        Ok(ConversationGrad {
            grads: b.gradients(&tape, &mut g),
            losses: f.losses,
            contributions: f.contributions.map(|_, c| c.map(|c| tape.value(c).clone())),
        })
    }

    /// Mean gradient over the conversations `indices` of `data`, accumulated
    /// in index order.
    pub fn batch_gradient(
        &self,
        data: &Dataset,
        indices: &[usize],
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<BatchGrad> {
        if indices.is_empty() {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let per_conversation = indices
            .iter()
            .map(|&i| self.conversation_grad(&data.conversations[i], reborrow(&mut dropout)))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / indices.len() as f64;
        let mut mean = self.params.zeros_like();
        let mut losses = LossBreakdown::default();
        for cg in &per_conversation {
            for (name, acc) in mean.iter_mut() {
                let g = &cg.grads[name];
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
            losses.cls += cg.losses.cls;
            losses.feature += cg.losses.feature;
            losses.modal += cg.losses.modal;
        }
        for acc in mean.values_mut() {
            acc.data_mut().iter_mut().for_each(|a| *a *= inv);
        }
        losses.cls *= inv;
        losses.feature *= inv;
        losses.modal *= inv;
        losses.main = losses.cls + losses.feature + losses.modal;
        Ok(BatchGrad {
            mean,
            per_conversation,
            losses,
        })
    }
}
