use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{abort_at, lr_schedule, MapreModel, Optimizer};
use crate::corpus::{Instance, RelationCatalog};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Supervised classifier variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Fully connected layer over `u`; the relation encoder is unused.
    #[default]
    L,
    /// `σ(u)ᵀ v_r` against the encoded label of every catalog relation.
    R,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    /// Fraction of training instances kept, per relation, rounded up.
    pub train_fraction: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            warmup_steps: 30,
            train_fraction: 1.0,
            variant: Variant::L,
            seed: 3,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("lr and weight_decay must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedReport {
    pub accuracy: f64,
    pub train_instances: usize,
    pub test_instances: usize,
    pub losses: Vec<f64>,
}

/// Keeps `ceil(fraction * n_r)` instances of every relation `r`, so each
/// relation stays represented.
pub fn subsample_per_relation(instances: &[Instance], fraction: f64, seed: u64) -> Vec<Instance> {
    let mut by_rel: BTreeMap<&str, Vec<&Instance>> = BTreeMap::new();
    for inst in instances {
        by_rel.entry(inst.relation.as_str()).or_default().push(inst);
    }
    let mut rng = crate::seeded_rng(seed);
    let mut out = Vec::new();
    for (_, mut group) in by_rel {
        group.shuffle(&mut rng);
        let keep = ((group.len() as f64 * fraction).ceil() as usize).clamp(1, group.len());
        out.extend(group.into_iter().take(keep).cloned());
    }
    out
}

fn relation_index(catalog: &RelationCatalog) -> BTreeMap<&str, usize> {
    catalog.ids().enumerate().map(|(i, r)| (r, i)).collect()
}

/// `[B, |catalog|]` logits for a batch of sentences.
fn batch_logits(
    model: &MapreModel,
    tape: &mut Tape,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    variant: Variant,
    batch: &[&Instance],
    mut dropout: Option<&mut crate::Rng>,
) -> Result<Var> {
    let mut us = Vec::with_capacity(batch.len());
    for inst in batch {
        us.push(model.encode_context(tape, vocab, inst, (false, false), dropout.as_deref_mut())?.u);
    }
    let u = tape.stack_rows(&us)?;
    match variant {
        Variant::L => {
            let head = model.head_l.ok_or_else(|| Error::invalid("model has no classifier head"))?;
            model.apply_affine(tape, u, head.weight, head.bias)
        }
        Variant::R => {
            let head = model.head_r.ok_or_else(|| Error::invalid("model has no projection head"))?;
            let s = model.apply_affine(tape, u, head.weight, head.bias)?;
            let mut vs = Vec::with_capacity(catalog.len());
            for r in catalog.ids() {
                vs.push(model.encode_relation(tape, vocab, catalog, r)?);
            }
            let v = tape.stack_rows(&vs)?;
            let vt = tape.transpose(v)?;
            tape.matmul(s, vt)
        }
    }
}

/// Probability row over the catalog (in catalog order) for one sentence.
pub fn predict_supervised(
    model: &MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    variant: Variant,
    instance: &Instance,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let logits = batch_logits(model, &mut tape, vocab, catalog, variant, &[instance], None)?;
    let p = tape.softmax(logits)?;
    Ok(tape.value(p).to_vec())
}

/// Fraction of `instances` whose argmax prediction is the gold relation.
pub fn supervised_accuracy(
    model: &MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    variant: Variant,
    instances: &[Instance],
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    let index = relation_index(catalog);
    let n = catalog.len();
    let correct = instances
        .par_chunks(32)
        .map(|chunk| -> Result<usize> {
            let refs: Vec<&Instance> = chunk.iter().collect();
            let mut tape = Tape::new();
            let logits = batch_logits(model, &mut tape, vocab, catalog, variant, &refs, None)?;
            let mut hits = 0;
            for (row, inst) in tape.value(logits).chunks(n).zip(chunk) {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                hits += usize::from(index.get(inst.relation.as_str()) == Some(&best));
            }
            Ok(hits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / instances.len() as f64)
}

/// Trains the selected head together with the encoders on `train`, then
/// reports accuracy on `test`. Softmax normalizes over the whole catalog.
pub fn finetune_supervised(
    model: &mut MapreModel,
    vocab: &Vocabulary,
    catalog: &RelationCatalog,
    train: &[Instance],
    test: &[Instance],
    config: &SupervisedConfig,
) -> Result<SupervisedReport> {
    config.validate()?;
    if catalog.is_empty() {
        return Err(Error::invalid("supervised training needs a non-empty catalog"));
    }
    catalog.check_instances(train)?;
    catalog.check_instances(test)?;
    let train = subsample_per_relation(train, config.train_fraction, config.seed);
    let index = relation_index(catalog);
    let present: std::collections::BTreeSet<&str> = train.iter().map(|i| i.relation.as_str()).collect();
    if let Some(missing) = catalog.ids().find(|r| !present.contains(r)) {
        return Err(Error::invalid(format!("relation `{missing}` has no training instances")));
    }
    match config.variant {
        Variant::L => match model.head_l {
            Some(h) if h.classes != catalog.len() => {
                return Err(Error::invalid(format!(
                    "classifier head has {} classes but the catalog has {}",
                    h.classes,
                    catalog.len()
                )))
            }
            Some(_) => {}
            None => {
                model.add_head_l(catalog.len(), config.seed)?;
            }
        },
        Variant::R => {
            if model.head_r.is_none() {
                model.add_head_r(config.seed)?;
            }
        }
    }

    let mut rng = crate::seeded_rng(config.seed);
    let mut opt = Optimizer::new(&mut model.store, config.lr, config.weight_decay, config.clip_norm);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&train[order.pop().expect("refilled above")]);
        }
        let targets: Vec<usize> = batch.iter().map(|i| index[i.relation.as_str()]).collect();
        let mut tape = Tape::new();
        let logits = batch_logits(model, &mut tape, vocab, catalog, config.variant, &batch, Some(&mut rng))?;
        let loss = tape.cross_entropy(logits, &targets)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(abort_at(step, Error::NonFinite(format!("supervised loss is {value}"))));
        }
        opt.accumulate(&mut model.store, &tape, loss)?;
        opt.step(&mut model.store, lr_schedule(step + 1, config.warmup_steps, config.lr))
            .map_err(|e| abort_at(step, e))?;
        losses.push(value);
    }
    let accuracy = supervised_accuracy(model, vocab, catalog, config.variant, test)?;
    Ok(SupervisedReport { accuracy, train_instances: train.len(), test_instances: test.len(), losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BenchmarkParams, RelationEntry, Span, SyntheticBenchmark};
    use crate::encoder::EncoderConfig;
    use crate::training::ModelConfig;

    fn model() -> MapreModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                model_dim: 8,
                num_heads: 2,
                feedforward_dim: 16,
                num_layers: 1,
                ..Default::default()
            },
            ..Default::default()
        };
        MapreModel::new(cfg, 5).unwrap()
    }

    #[test]
    fn subsample_keeps_every_relation() {
        let bench = SyntheticBenchmark::generate(&BenchmarkParams::default()).unwrap();
        let small = subsample_per_relation(&bench.supervised_train, 0.01, 1);
        let rels: std::collections::BTreeSet<_> = small.iter().map(|i| &i.relation).collect();
        assert_eq!(rels.len(), 14);
        assert_eq!(small.len(), 14);
        assert_eq!(subsample_per_relation(&bench.supervised_train, 1.0, 1).len(), bench.supervised_train.len());
    }

    #[test]
    fn single_class_is_trivially_right() {
        let mut vocab = Vocabulary::new();
        for t in ["a", "b", "c", "x"] {
            vocab.add(t);
        }
        let mut catalog = RelationCatalog::new();
        catalog.insert("only", RelationEntry { label: vec!["x".into()], signature: vec!["x".into()] }).unwrap();
        let inst = Instance {
            tokens: vec!["a".into(), "x".into(), "b".into(), "c".into()],
            head: Span(0, 0),
            tail: Span(2, 2),
            relation: "only".into(),
        };
        for variant in [Variant::L, Variant::R] {
            let mut m = model();
            let cfg = SupervisedConfig { steps: 2, batch_size: 1, variant, ..Default::default() };
            let report = finetune_supervised(
                &mut m,
                &vocab,
                &catalog,
                std::slice::from_ref(&inst),
                std::slice::from_ref(&inst),
                &cfg,
            )
            .unwrap();
            assert_eq!(report.accuracy, 1.0);
            assert_eq!(predict_supervised(&m, &vocab, &catalog, variant, &inst).unwrap(), vec![1.0]);
        }
    }

    #[test]
    fn empty_catalog_is_an_error() {
        let mut m = model();
        let cfg = SupervisedConfig { variant: Variant::R, ..Default::default() };
        let err = finetune_supervised(&mut m, &Vocabulary::new(), &RelationCatalog::new(), &[], &[], &cfg);
        assert!(err.is_err());
    }

    #[test]
    fn missing_relation_in_training_is_an_error() {
        let bench = SyntheticBenchmark::generate(&BenchmarkParams::default()).unwrap();
        let catalog = bench.supervised_catalog().unwrap();
        let first = catalog.ids().next().unwrap().to_string();
        let train: Vec<Instance> = bench.supervised_train.iter().filter(|i| i.relation != first).cloned().collect();
        let mut m = model();
        let cfg = SupervisedConfig { steps: 1, ..Default::default() };
        assert!(finetune_supervised(&mut m, &bench.vocab, &catalog, &train, &bench.supervised_test, &cfg).is_err());
    }
}
