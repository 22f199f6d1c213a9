use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{abort_at, lr_schedule, MapreModel, Optimizer, ALPHA_INIT, BETA_INIT};
use crate::corpus::{Instance, RelationCatalog};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::sampling::{Episode, EpisodeSampler, EpisodeSpec};
use crate::tensor::{Tape, Tensor, Var};

/// Which terms of the episode score are active during fine-tuning and
/// evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Prototype and label terms, both coefficients learnable.
    #[default]
    Both,
    /// Prototype term only (`β = 0`), `α` learnable.
    LabelAgnostic,
    /// Label term only, fixed at `(α, β) = (0, 1)`; also the zero-shot mode.
    LabelAware,
}

impl Ablation {
    pub fn initial_coefficients(self) -> (f64, f64) {
        match self {
            Ablation::Both => (ALPHA_INIT, BETA_INIT),
            Ablation::LabelAgnostic => (ALPHA_INIT, 0.0),
            Ablation::LabelAware => (0.0, 1.0),
        }
    }

    /// Whether `α` and `β` receive gradient updates.
    pub fn learnable(self) -> (bool, bool) {
        match self {
            Ablation::Both => (true, true),
            Ablation::LabelAgnostic => (true, false),
            Ablation::LabelAware => (false, false),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Both => "both",
            Ablation::LabelAgnostic => "label-agnostic",
            Ablation::LabelAware => "label-aware",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FewShotConfig {
    pub iterations: usize,
    pub episodes_per_batch: usize,
    pub spec: EpisodeSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            episodes_per_batch: 4,
            spec: EpisodeSpec { ways: 5, shots: 1, queries: 5 },
            lr: 1e-3,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            warmup_steps: 30,
            ablation: Ablation::Both,
            seed: 2,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.iterations == 0 || self.episodes_per_batch == 0 {
            return Err(Error::Config("iterations and episodes_per_batch must be positive".into()));
        }
        if self.spec.shots == 0 && self.ablation != Ablation::LabelAware {
            return Err(Error::Config("0-shot training needs the label-aware ablation".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotStep {
    pub loss: f64,
    /// Query accuracy on the training episodes of this iteration.
    pub accuracy: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `[Q, N]` episode scores `α·u_qᵀu_r + β·w_qᵀv_r`, where `u_r` is the mean of
/// the support `u` vectors. A `None` coefficient drops its term entirely.
#[allow(clippy::too_many_arguments)]
pub(crate) fn episode_logits(
    model: &MapreModel,
    tape: &mut Tape,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    episode: &Episode,
    alpha: Option<Var>,
    beta: Option<Var>,
    mut dropout: Option<&mut crate::Rng>,
) -> Result<Var> {
    if episode.queries.is_empty() {
        return Err(Error::invalid("episode has no queries"));
    }
    if alpha.is_none() && beta.is_none() {
        return Err(Error::invalid("both score terms are disabled"));
    }
    let mut u_q = Vec::with_capacity(episode.queries.len());
    let mut w_q = Vec::with_capacity(episode.queries.len());
    for q in &episode.queries {
        let out = model.encode_context(tape, vocab, &q.instance, (false, false), dropout.as_deref_mut())?;
        u_q.push(out.u);
        w_q.push(out.w);
    }
    let mut score = None;
    if let Some(alpha) = alpha {
        if episode.support.len() != episode.ways() || episode.support.iter().any(Vec::is_empty) {
            return Err(Error::invalid("prototype term needs at least one support instance per way"));
        }
        let mut protos = Vec::with_capacity(episode.ways());
        for supports in &episode.support {
            let mut us = Vec::with_capacity(supports.len());
            for inst in supports {
                us.push(model.encode_context(tape, vocab, inst, (false, false), dropout.as_deref_mut())?.u);
            }
            protos.push(if us.len() == 1 {
                us[0]
            } else {
                let stacked = tape.stack_rows(&us)?;
                tape.mean_axis(stacked, 0)?
            });
        }
        let p = tape.stack_rows(&protos)?;
        let pt = tape.transpose(p)?;
        let uq = tape.stack_rows(&u_q)?;
        let s = tape.matmul(uq, pt)?;
        score = Some(tape.mul(s, alpha)?);
    }
    if let Some(beta) = beta {
        let mut vs = Vec::with_capacity(episode.ways());
        for r in &episode.relations {
            vs.push(model.encode_relation(tape, vocab, catalog, r)?);
        }
        let v = tape.stack_rows(&vs)?;
        let vt = tape.transpose(v)?;
        let wq = tape.stack_rows(&w_q)?;
        let s = tape.matmul(wq, vt)?;
        let s = tape.mul(s, beta)?;
        score = Some(match score {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok(score.expect("at least one term is active"))
}

fn coefficient(tape: &mut Tape, value: f64) -> Option<Var> {
    (value != 0.0).then(|| tape.constant(Tensor::scalar(value)))
}

fn softmax_rows(tape: &mut Tape, logits: Var) -> Result<Vec<Vec<f64>>> {
    let probs = tape.softmax(logits)?;
    let cols = tape.shape(probs)[1];
    Ok(tape.value(probs).chunks(cols).map(<[f64]>::to_vec).collect())
}

/// Per-query probability rows over the episode's ways at fixed `(α, β)`.
pub fn score_episode(
    model: &MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    episode: &Episode,
    alpha: f64,
    beta: f64,
) -> Result<Vec<Vec<f64>>> {
    if episode.shots() == 0 {
        return Err(Error::invalid("score_episode needs K >= 1; use predict_zeroshot for 0-shot episodes"));
    }
    let mut tape = Tape::new();
    let a = coefficient(&mut tape, alpha);
    let b = coefficient(&mut tape, beta);
    if a.is_none() && b.is_none() {
        // both terms vanish: every way scores 0
        let n = episode.ways();
        return Ok(vec![vec![1.0 / n as f64; n]; episode.queries.len()]);
    }
    let logits = episode_logits(model, &mut tape, vocab, catalog, episode, a, b, None)?;
    softmax_rows(&mut tape, logits)
}

/// Probabilities over `candidates` from label similarity alone
/// (`α = 0, β = 1`).
pub fn predict_zeroshot(
    model: &MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    candidates: &[String],
    query: &Instance,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("zero-shot prediction needs at least one candidate relation"));
    }
    let episode = Episode {
        relations: candidates.to_vec(),
        support: vec![Vec::new(); candidates.len()],
        queries: vec![crate::sampling::Query { instance: query.clone(), target: 0 }],
    };
    let mut tape = Tape::new();
    let beta = tape.constant(Tensor::scalar(1.0));
    let logits = episode_logits(model, &mut tape, vocab, catalog, &episode, None, Some(beta), None)?;
    Ok(softmax_rows(&mut tape, logits)?.remove(0))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Mean query cross-entropy of one episode with both coefficients taken from
/// the model and no dropout.
pub fn episode_loss(
    model: &MapreModel,
    tape: &mut Tape,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    episode: &Episode,
) -> Result<Var> {
    let a = tape.param(&model.store, model.head.alpha);
    let b = tape.param(&model.store, model.head.beta);
    let logits = episode_logits(model, tape, vocab, catalog, episode, Some(a), Some(b), None)?;
    let targets: Vec<usize> = episode.queries.iter().map(|q| q.target).collect();
    tape.cross_entropy(logits, &targets)
}

/// Episodic fine-tuning of both encoders and the active coefficients.
pub fn finetune_fewshot(
    model: &mut MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    train: &[Instance],
    config: &FewShotConfig,
) -> Result<Vec<FewShotStep>> {
    config.validate()?;
    let sampler = EpisodeSampler::new(train, catalog)?;
    let (alpha0, beta0) = config.ablation.initial_coefficients();
    let (learn_a, learn_b) = config.ablation.learnable();
    model.set_coefficients(alpha0, beta0)?;
    let mut rng = crate::seeded_rng(config.seed);
    let mut opt = Optimizer::new(&mut model.store, config.lr, config.weight_decay, config.clip_norm);
    let mut log = Vec::with_capacity(config.iterations);
    let weight = 1.0 / config.episodes_per_batch as f64;

    for step in 0..config.iterations {
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        for _ in 0..config.episodes_per_batch {
            let episode = sampler.sample(config.spec, &mut rng)?;
            let mut tape = Tape::new();
            let a =
                if learn_a { Some(tape.param(&model.store, model.head.alpha)) } else { coefficient(&mut tape, alpha0) };
            let b =
                if learn_b { Some(tape.param(&model.store, model.head.beta)) } else { coefficient(&mut tape, beta0) };
            let logits = episode_logits(model, &mut tape, vocab, catalog, &episode, a, b, Some(&mut rng))?;
            let targets: Vec<usize> = episode.queries.iter().map(|q| q.target).collect();
            let n = episode.ways();
            for (row, &t) in tape.value(logits).chunks(n).zip(&targets) {
                correct += usize::from(argmax(row) == t);
                total += 1;
            }
            let loss = tape.cross_entropy(logits, &targets)?;
            loss_sum += tape.scalar(loss);
            if !loss_sum.is_finite() {
                return Err(abort_at(step, Error::NonFinite(format!("episode loss is {loss_sum}"))));
            }
            let loss = tape.scale(loss, weight)?;
            opt.accumulate(&mut model.store, &tape, loss)?;
        }
        opt.step(&mut model.store, lr_schedule(step + 1, config.warmup_steps, config.lr))
            .map_err(|e| abort_at(step, e))?;
        let (alpha, beta) = model.coefficients();
        log.push(FewShotStep { loss: loss_sum * weight, accuracy: correct as f64 / total as f64, alpha, beta });
    }
    Ok(log)
}

/// Mean query accuracy over freshly sampled evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub episodes: usize,
    pub queries: usize,
    pub seed: u64,
}

/// Samples `episodes` episodes from `instances` with `seed` and scores them
/// in parallel. `shots = 0` in `spec` evaluates zero-shot; otherwise the
/// episode score uses `(alpha, beta)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_fewshot(
    model: &MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    instances: &[Instance],
    spec: EpisodeSpec,
    (alpha, beta): (f64, f64),
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let sampler = EpisodeSampler::new(instances, catalog)?;
    let mut rng = crate::seeded_rng(seed);
    let sampled = (0..episodes).map(|_| sampler.sample(spec, &mut rng)).collect::<Result<Vec<_>>>()?;
    let counts = sampled
        .par_iter()
        .map(|ep| -> Result<(usize, usize)> {
            let rows = if spec.shots == 0 {
                ep.queries
                    .iter()
                    .map(|q| predict_zeroshot(model, vocab, catalog, &ep.relations, &q.instance))
                    .collect::<Result<Vec<_>>>()?
            } else {
                score_episode(model, vocab, catalog, ep, alpha, beta)?
            };
            let correct = rows.iter().zip(&ep.queries).filter(|(r, q)| argmax(r) == q.target).count();
            Ok((correct, ep.queries.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let correct: usize = counts.iter().map(|c| c.0).sum();
    let queries: usize = counts.iter().map(|c| c.1).sum();
    Ok(EvalReport { accuracy: correct as f64 / queries as f64, episodes, queries, seed })
}
