use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RelationCatalog};
use crate::encoder::{
    build_token_sequence, forward_context, forward_relation, label_ids, ContextOutput, EncoderConfig,
    TransformerEncoder, Vocabulary,
};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Start the relation encoder from a copy of the context encoder's
    /// initial weights (both encoders then begin from the same point, as two
    /// copies of one pretrained language model would).
    pub copy_init: bool,
    /// Use a single set of weights for both encoders.
    pub share_weights: bool,
    /// Predict masked tokens through the transposed token-embedding table;
    /// when false a separate output matrix is learned.
    pub tie_mlm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), copy_init: true, share_weights: false, tie_mlm: true }
    }
}

/// Learnable mixing coefficients of the few-shot scorer.
#[derive(Debug, Clone, Copy)]
pub struct FewShotHead {
    pub alpha: ParamId,
    pub beta: ParamId,
}

pub const ALPHA_INIT: f64 = 0.95;
pub const BETA_INIT: f64 = 1.05;

/// Output layer of the masked-token predictor.
#[derive(Debug, Clone, Copy)]
pub struct MlmHead {
    /// `[d, V]` output matrix; `None` when tied to the token embeddings.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
}

/// Fully connected classifier from `u` (width 2d) to one logit per relation.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedHeadL {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// Projection `σ` from `u` (width 2d) into the relation-embedding space.
#[derive(Debug, Clone, Copy)]
pub struct SupervisedHeadR {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Context encoder, relation encoder, and the task heads, all sharing one
/// parameter store.
#[derive(Debug, Clone)]
pub struct MapreModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub context: TransformerEncoder,
    pub relation: TransformerEncoder,
    pub head: FewShotHead,
    pub mlm: MlmHead,
    pub head_l: Option<SupervisedHeadL>,
    pub head_r: Option<SupervisedHeadR>,
}

impl MapreModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        let mut store = ParamStore::new();
        let context = TransformerEncoder::new(config.encoder.clone(), &mut store, "context", &mut rng)?;
        let relation = if config.share_weights {
            context.clone()
        } else {
            let relation = TransformerEncoder::new(config.encoder.clone(), &mut store, "relation", &mut rng)?;
            if config.copy_init {
                for (src, dst) in context.param_ids().into_iter().zip(relation.param_ids()) {
                    let values = store.get(src).data().to_vec();
                    store.set_values(dst, &values)?;
                }
            }
            relation
        };
        let alpha = store.add("head.alpha", Tensor::scalar(ALPHA_INIT), true)?;
        let beta = store.add("head.beta", Tensor::scalar(BETA_INIT), true)?;
        let mut model = Self {
            config,
            store,
            context,
            relation,
            head: FewShotHead { alpha, beta },
            mlm: MlmHead { weight: None, bias: alpha },
            head_l: None,
            head_r: None,
        };
        let (d, v) = (model.model_dim(), model.config.encoder.vocab_size);
        model.mlm = if model.config.tie_mlm {
            MlmHead { weight: None, bias: model.store.add("mlm.bias", Tensor::zeros(&[v]), true)? }
        } else {
            let (weight, bias) = model.linear("mlm", d, v, &mut rng)?;
            MlmHead { weight: Some(weight), bias }
        };
        Ok(model)
    }

    pub fn model_dim(&self) -> usize {
        self.config.encoder.model_dim
    }

    /// Current `(α, β)`.
    pub fn coefficients(&self) -> (f64, f64) {
        (self.store.get(self.head.alpha).data()[0], self.store.get(self.head.beta).data()[0])
    }

    pub fn set_coefficients(&mut self, alpha: f64, beta: f64) -> Result<()> {
        self.store.set_values(self.head.alpha, &[alpha])?;
        self.store.set_values(self.head.beta, &[beta])
    }

    fn linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut crate::Rng,
    ) -> Result<(ParamId, ParamId)> {
        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let weight = self.store.add(format!("{name}.weight"), Tensor::matrix(fan_in, fan_out, w)?, false)?;
        let bias = self.store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true)?;
        Ok((weight, bias))
    }

    /// Adds the fully connected classifier over `classes` relations.
    pub fn add_head_l(&mut self, classes: usize, seed: u64) -> Result<SupervisedHeadL> {
        if self.head_l.is_some() {
            return Err(Error::invalid("model already has a classifier head"));
        }
        if classes == 0 {
            return Err(Error::invalid("classifier head needs at least one class"));
        }
        let d = self.model_dim();
        let (weight, bias) = self.linear("head_l", 2 * d, classes, &mut crate::seeded_rng(seed))?;
        let head = SupervisedHeadL { weight, bias, classes };
        self.head_l = Some(head);
        Ok(head)
    }

    /// Adds the projection `σ` used by the relation-matching classifier.
    pub fn add_head_r(&mut self, seed: u64) -> Result<SupervisedHeadR> {
        if self.head_r.is_some() {
            return Err(Error::invalid("model already has a projection head"));
        }
        let d = self.model_dim();
        let (weight, bias) = self.linear("head_r", 2 * d, d, &mut crate::seeded_rng(seed))?;
        let head = SupervisedHeadR { weight, bias };
        self.head_r = Some(head);
        Ok(head)
    }

    /// Encodes one sentence. `blank` selects entity blanking for (head, tail).
    pub fn encode_context(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        instance: &Instance,
        blank: (bool, bool),
        dropout: Option<&mut crate::Rng>,
    ) -> Result<ContextOutput> {
        let seq = build_token_sequence(instance, vocab, blank.0, blank.1, self.config.encoder.max_len)?;
        forward_context(&self.context, tape, &self.store, &seq, dropout)
    }

    /// `[1, d]` embedding of a relation's label.
    pub fn encode_relation(
        &self,
        tape: &mut Tape,
        vocab: &Vocabulary,
        catalog: &RelationCatalog,
        relation: &str,
    ) -> Result<Var> {
        let ids = label_ids(catalog.label(relation)?, vocab)?;
        forward_relation(&self.relation, tape, &self.store, &ids)
    }

    /// Applies a supervised head to a `[1, 2d]` context vector.
    pub(crate) fn apply_affine(&self, tape: &mut Tape, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = tape.param(&self.store, weight);
        let b = tape.param(&self.store, bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                model_dim: 8,
                num_heads: 2,
                feedforward_dim: 16,
                vocab_size: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn copy_init_matches_context_weights() {
        let m = MapreModel::new(small(), 1).unwrap();
        for (a, b) in m.context.param_ids().into_iter().zip(m.relation.param_ids()) {
            assert_ne!(a, b);
            assert_eq!(m.store.get(a).data(), m.store.get(b).data());
        }
        assert_eq!(m.coefficients(), (ALPHA_INIT, BETA_INIT));
    }

    #[test]
    fn independent_and_shared_variants() {
        let m = MapreModel::new(ModelConfig { copy_init: false, ..small() }, 1).unwrap();
        let (a, b) = (m.context.token_embedding(), m.relation.token_embedding());
        assert_ne!(m.store.get(a).data(), m.store.get(b).data());
        let s = MapreModel::new(ModelConfig { share_weights: true, ..small() }, 1).unwrap();
        assert_eq!(s.context.token_embedding(), s.relation.token_embedding());
        assert!(s.store.len() < m.store.len());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = MapreModel::new(small(), 9).unwrap();
        let b = MapreModel::new(small(), 9).unwrap();
        for id in a.store.ids() {
            assert_eq!(a.store.get(id).data(), b.store.get(id).data());
        }
    }

    #[test]
    fn heads_register_once() {
        let mut m = MapreModel::new(small(), 1).unwrap();
        let l = m.add_head_l(5, 2).unwrap();
        assert_eq!(m.store.get(l.weight).shape(), &[16, 5]);
        assert!(m.add_head_l(5, 2).is_err());
        let r = m.add_head_r(3).unwrap();
        assert_eq!(m.store.get(r.weight).shape(), &[16, 8]);
    }
}
