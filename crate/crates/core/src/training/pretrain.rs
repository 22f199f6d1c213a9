use serde::{Deserialize, Serialize};

use super::{abort_at, lr_schedule, MapreModel, Optimizer};
use crate::corpus::{apply_mlm_mask, Instance, RelationCatalog};
use crate::encoder::{build_token_sequence, forward_context, Vocabulary};
use crate::error::{Error, Result};
use crate::objectives::{ccr_loss, crr_loss, mlm_loss, total_loss_var, LossBreakdown};
use crate::sampling::MatchingSampler;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    /// Relations per matching batch; each contributes two sentences.
    pub batch_relations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub blank_prob: f64,
    pub mlm_rate: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            warmup_steps: 50,
            batch_relations: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            blank_prob: 0.7,
            mlm_rate: 0.15,
            temperature: 1.0,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps <= self.warmup_steps {
            return Err(Error::Config(format!(
                "pretrain steps ({}) must exceed warmup_steps ({})",
                self.steps, self.warmup_steps
            )));
        }
        if self.batch_relations < 2 {
            return Err(Error::Config("batch_relations must be at least 2".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0; clip_norm and temperature > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.blank_prob) || !(0.0..1.0).contains(&self.mlm_rate) {
            return Err(Error::Config("blank_prob must lie in [0, 1] and mlm_rate in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Contrastive pretraining with the summed CCR + CRR + MLM objective.
/// Returns the loss components of every step.
pub fn pretrain(
    model: &mut MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    instances: &[Instance],
    config: &PretrainConfig,
) -> Result<Vec<LossBreakdown>> {
    config.validate()?;
    if vocab.len() > model.config.encoder.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the encoder holds {}",
            vocab.len(),
            model.config.encoder.vocab_size
        )));
    }
    catalog.check_instances(instances)?;
    let sampler = MatchingSampler::new(instances);
    let mut rng = crate::seeded_rng(config.seed);
    let mut opt = Optimizer::new(&mut model.store, config.lr, config.weight_decay, config.clip_norm);
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch = sampler.sample(config.batch_relations, config.blank_prob, &mut rng)?;
        let mut tape = Tape::new();
        let (mut u_a, mut u_b, mut w_a, mut w_b, mut v) = (vec![], vec![], vec![], vec![], vec![]);
        for pair in &batch.pairs {
            let a = model.encode_context(&mut tape, vocab, &pair.a, pair.blank_a, Some(&mut rng))?;
            let b = model.encode_context(&mut tape, vocab, &pair.b, pair.blank_b, Some(&mut rng))?;
            u_a.push(a.u);
            u_b.push(b.u);
            w_a.push(a.w);
            w_b.push(b.w);
            v.push(model.encode_relation(&mut tape, vocab, catalog, &pair.relation)?);
        }
        let n = batch.len();
        let l_ccr = ccr_loss(&mut tape, &u_a, &u_b, config.temperature)?;
        let w: Vec<Var> = w_a.into_iter().chain(w_b).collect();
        let rel_of: Vec<usize> = (0..2 * n).map(|i| i % n).collect();
        let l_crr = crr_loss(&mut tape, &w, &v, &rel_of, config.temperature)?;

        let sentences = batch.pairs.iter().flat_map(|p| [&p.a, &p.b]);
        let l_mlm = mlm_term(model, &mut tape, vocab, sentences, config.mlm_rate, &mut rng)?;

        let (loss, parts) = total_loss_var(&mut tape, l_ccr, l_crr, l_mlm).map_err(|e| abort_at(step, e))?;
        opt.accumulate(&mut model.store, &tape, loss)?;
        opt.step(&mut model.store, lr_schedule(step + 1, config.warmup_steps, config.lr))
            .map_err(|e| abort_at(step, e))?;
        log.push(parts);
    }
    Ok(log)
}

/// Token-weighted MLM loss over separately masked, unblanked copies of the
/// batch sentences.
fn mlm_term<'a>(
    model: &MapreModel,
    tape: &mut Tape,
    vocab: &Vocabulary,
    sentences: impl Iterator<Item = &'a Instance>,
    rate: f64,
    rng: &mut crate::Rng,
) -> Result<Var> {
    let max_len = model.config.encoder.max_len;
    let decoder = match model.mlm.weight {
        Some(w) => tape.param(&model.store, w),
        None => {
            let table = tape.param(&model.store, model.context.token_embedding());
            tape.transpose(table)?
        }
    };
    let bias = tape.param(&model.store, model.mlm.bias);
    let mut parts = Vec::new();
    for inst in sentences {
        let seq = build_token_sequence(inst, vocab, false, false, max_len)?;
        let (masked, targets) = apply_mlm_mask(&seq, model.config.encoder.vocab_size, rate, rng)?;
        if targets.is_empty() {
            continue;
        }
        let out = forward_context(&model.context, tape, &model.store, &masked, Some(&mut *rng))?;
        let loss = mlm_loss(tape, out.hidden, &targets, decoder, bias)?;
        parts.push((loss, targets.len()));
    }
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut acc: Option<Var> = None;
    for (loss, count) in parts {
        let weighted = tape.scale(loss, count as f64 / total as f64)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}
