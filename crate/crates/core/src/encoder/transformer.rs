use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            feedforward_dim: 64,
            vocab_size: 200,
            max_len: 40,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_len < 8 {
            return Err(Error::Config(format!("max_len must be at least 8, got {}", self.max_len)));
        }
        if self.vocab_size <= super::NUM_RESERVED {
            return Err(Error::Config("vocab_size must exceed the reserved tokens".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
struct Head {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    heads: Vec<Head>,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-layer-norm transformer encoder whose weights live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<Layer>,
    final_gain: ParamId,
    final_bias: ParamId,
}

const LN_EPS: f64 = 1e-5;
const TOKEN_EMBEDDING_STD: f64 = 0.5;
const POSITION_EMBEDDING_STD: f64 = 0.1;

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut crate::Rng,
    prefix: String,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(format!("{}.{name}", self.prefix), Tensor::new(shape.to_vec(), data)?, false)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    fn fill(&mut self, name: &str, n: usize, value: f64) -> Result<ParamId> {
        self.store.add(format!("{}.{name}", self.prefix), Tensor::new(vec![n], vec![value; n])?, true)
    }
}

impl TransformerEncoder {
    /// Registers a freshly initialized encoder under `prefix` in `store`.
    pub fn new(config: EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut crate::Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let dh = config.head_dim();
        let ff = config.feedforward_dim;
        let mut init = Init { store, rng, prefix: prefix.to_string() };
        let token_embedding = init.normal("token_embedding", &[config.vocab_size, d], TOKEN_EMBEDDING_STD)?;
        let position_embedding = init.normal("position_embedding", &[config.max_len, d], POSITION_EMBEDDING_STD)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("layer{l}");
            let ln1_gain = init.fill(&format!("{p}.ln1.gain"), d, 1.0)?;
            let ln1_bias = init.fill(&format!("{p}.ln1.bias"), d, 0.0)?;
            let mut heads = Vec::with_capacity(config.num_heads);
            for h in 0..config.num_heads {
                let q = format!("{p}.attn.head{h}");
                heads.push(Head {
                    wq: init.linear(&format!("{q}.wq"), d, dh)?,
                    bq: init.fill(&format!("{q}.bq"), dh, 0.0)?,
                    wk: init.linear(&format!("{q}.wk"), d, dh)?,
                    bk: init.fill(&format!("{q}.bk"), dh, 0.0)?,
                    wv: init.linear(&format!("{q}.wv"), d, dh)?,
                    bv: init.fill(&format!("{q}.bv"), dh, 0.0)?,
                });
            }
            layers.push(Layer {
                ln1_gain,
                ln1_bias,
                heads,
                wo: init.linear(&format!("{p}.attn.wo"), d, d)?,
                bo: init.fill(&format!("{p}.attn.bo"), d, 0.0)?,
                ln2_gain: init.fill(&format!("{p}.ln2.gain"), d, 1.0)?,
                ln2_bias: init.fill(&format!("{p}.ln2.bias"), d, 0.0)?,
                w1: init.linear(&format!("{p}.ff.w1"), d, ff)?,
                b1: init.fill(&format!("{p}.ff.b1"), ff, 0.0)?,
                w2: init.linear(&format!("{p}.ff.w2"), ff, d)?,
                b2: init.fill(&format!("{p}.ff.b2"), d, 0.0)?,
            });
        }
        let final_gain = init.fill("final_ln.gain", d, 1.0)?;
        let final_bias = init.fill("final_ln.bias", d, 0.0)?;
        Ok(Self { config, token_embedding, position_embedding, layers, final_gain, final_bias })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    /// Every parameter id owned by this encoder, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for l in &self.layers {
            ids.extend([l.ln1_gain, l.ln1_bias]);
            for h in &l.heads {
                ids.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
            }
            ids.extend([l.wo, l.bo, l.ln2_gain, l.ln2_bias, l.w1, l.b1, l.w2, l.b2]);
        }
        ids.extend([self.final_gain, self.final_bias]);
        ids
    }

    fn affine(tape: &mut Tape, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = tape.param(store, w);
        let b = tape.param(store, b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut crate::Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(rng) = rng.filter(|_| p > 0.0) else { return Ok(x) };
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random_bool(p) { 0.0 } else { keep }).collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }

    /// Hidden states `[len, d]` for a token id sequence. Dropout is applied
    /// only when an RNG is supplied.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        mut dropout: Option<&mut crate::Rng>,
    ) -> Result<Var> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::Sequence("empty input".into()));
        }
        if n > self.config.max_len {
            return Err(Error::Sequence(format!("input of {n} tokens exceeds max_len {}", self.config.max_len)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Sequence(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        let table = tape.param(store, self.token_embedding);
        let tok = tape.embedding(table, ids)?;
        let pos_table = tape.param(store, self.position_embedding);
        let pos = tape.slice_rows(pos_table, 0, n)?;
        let mut x = tape.add(tok, pos)?;
        x = self.dropout(tape, x, dropout.as_deref_mut())?;

        for layer in &self.layers {
            let (g, b) = (tape.param(store, layer.ln1_gain), tape.param(store, layer.ln1_bias));
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let mut outs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = Self::affine(tape, store, h, head.wq, head.bq)?;
                let k = Self::affine(tape, store, h, head.wk, head.bk)?;
                let v = Self::affine(tape, store, h, head.wv, head.bv)?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, scale)?;
                let attn = tape.softmax(scores)?;
                outs.push(tape.matmul(attn, v)?);
            }
            let cat = tape.concat(&outs)?;
            let attn_out = Self::affine(tape, store, cat, layer.wo, layer.bo)?;
            let attn_out = self.dropout(tape, attn_out, dropout.as_deref_mut())?;
            x = tape.add(x, attn_out)?;

            let (g, b) = (tape.param(store, layer.ln2_gain), tape.param(store, layer.ln2_bias));
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let f = Self::affine(tape, store, h, layer.w1, layer.b1)?;
            let f = tape.gelu(f)?;
            let f = Self::affine(tape, store, f, layer.w2, layer.b2)?;
            let f = self.dropout(tape, f, dropout.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let (g, b) = (tape.param(store, self.final_gain), tape.param(store, self.final_bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}
