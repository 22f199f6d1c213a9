//! Fixed layout of the synthetic benchmark: a block of pretraining relations
//! followed by few-shot train/validation/test relations, all from disjoint
//! relation id ranges.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    generate_corpus, load_jsonl, relation_name, write_jsonl, CorpusParams, DatasetSplit, Instance, RelationCatalog,
};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkParams {
    pub pretrain_relations: usize,
    pub train_relations: usize,
    pub validation_relations: usize,
    pub test_relations: usize,
    pub entities_per_relation: usize,
    pub sentences_per_triple: usize,
    pub vocab_size: usize,
    /// Per-relation fraction of the held-out relations' instances used for
    /// supervised training; the rest is the supervised test set.
    pub supervised_train_fraction: f64,
    pub seed: u64,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            pretrain_relations: 12,
            train_relations: 8,
            validation_relations: 2,
            test_relations: 4,
            entities_per_relation: 8,
            sentences_per_triple: 6,
            vocab_size: 200,
            supervised_train_fraction: 0.8,
            seed: 7,
        }
    }
}

impl BenchmarkParams {
    pub fn total_relations(&self) -> usize {
        self.pretrain_relations + self.train_relations + self.validation_relations + self.test_relations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub vocab: Vocabulary,
    pub catalog: RelationCatalog,
    pub pretrain: Vec<Instance>,
    pub fewshot: DatasetSplit,
    pub supervised_train: Vec<Instance>,
    pub supervised_test: Vec<Instance>,
}

const FILES: [&str; 6] =
    ["pretrain.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "supervised_train.jsonl", "supervised_test.jsonl"];

impl SyntheticBenchmark {
    pub fn generate(p: &BenchmarkParams) -> Result<Self> {
        if p.pretrain_relations == 0 || p.train_relations == 0 || p.validation_relations == 0 || p.test_relations == 0 {
            return Err(Error::Corpus("every relation block needs at least one relation".into()));
        }
        if !(0.0 < p.supervised_train_fraction && p.supervised_train_fraction < 1.0) {
            return Err(Error::invalid("supervised_train_fraction must lie in (0, 1)"));
        }
        let total = p.total_relations();
        let corpus = generate_corpus(&CorpusParams {
            num_relations: total,
            entities_per_relation: p.entities_per_relation,
            sentences_per_triple: p.sentences_per_triple,
            vocab_size: p.vocab_size,
            signatures_per_sentence: 2,
            seed: p.seed,
        })?;
        let names =
            |range: std::ops::Range<usize>| -> BTreeSet<String> { range.map(|r| relation_name(r, total)).collect() };
        let a = p.pretrain_relations;
        let b = a + p.train_relations;
        let c = b + p.validation_relations;
        let pre = names(0..a);
        let (tr, va, te) = (names(a..b), names(b..c), names(c..total));
        let pick = |set: &BTreeSet<String>| -> Vec<Instance> {
            corpus.instances.iter().filter(|i| set.contains(&i.relation)).cloned().collect()
        };

        let mut rng = crate::seeded_rng(p.seed.wrapping_add(1));
        let mut supervised_train = Vec::new();
        let mut supervised_test = Vec::new();
        for rel in tr.iter().chain(&va).chain(&te) {
            let mut insts = pick(&BTreeSet::from([rel.clone()]));
            insts.shuffle(&mut rng);
            let cut = ((insts.len() as f64 * p.supervised_train_fraction).round() as usize).clamp(1, insts.len() - 1);
            supervised_test.extend(insts.split_off(cut));
            supervised_train.extend(insts);
        }

        Ok(Self {
            vocab: corpus.vocab.clone(),
            catalog: corpus.kg.catalog.clone(),
            pretrain: pick(&pre),
            fewshot: DatasetSplit {
                train: pick(&tr),
                validation: pick(&va),
                test: pick(&te),
                train_relations: tr,
                validation_relations: va,
                test_relations: te,
            },
            supervised_train,
            supervised_test,
        })
    }

    /// Relations of the supervised task (all non-pretraining relations).
    pub fn supervised_catalog(&self) -> Result<RelationCatalog> {
        let s = &self.fewshot;
        self.catalog.restrict(
            s.train_relations.iter().chain(&s.validation_relations).chain(&s.test_relations).map(String::as_str),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        self.catalog.save(&dir.join("catalog.json"))?;
        let sets = [
            &self.pretrain,
            &self.fewshot.train,
            &self.fewshot.validation,
            &self.fewshot.test,
            &self.supervised_train,
            &self.supervised_test,
        ];
        for (name, set) in FILES.iter().zip(sets) {
            write_jsonl(&dir.join(name), set)?;
        }
        Ok(())
    }

    /// Loads a corpus directory; `vocab` and `catalog` override the default
    /// file locations inside `dir`.
    pub fn load(dir: &Path, vocab: Option<&Path>, catalog: Option<&Path>) -> Result<Self> {
        let vocab = Vocabulary::load(&vocab.map(Path::to_path_buf).unwrap_or_else(|| dir.join("vocab.txt")))?;
        let catalog =
            RelationCatalog::load(&catalog.map(Path::to_path_buf).unwrap_or_else(|| dir.join("catalog.json")))?;
        let mut sets = Vec::with_capacity(FILES.len());
        for name in FILES {
            let insts = load_jsonl(&dir.join(name))?;
            catalog.check_instances(&insts)?;
            sets.push(insts);
        }
        let rels = |v: &[Instance]| v.iter().map(|i| i.relation.clone()).collect::<BTreeSet<_>>();
        let mut it = sets.into_iter();
        let pretrain = it.next().unwrap();
        let (train, validation, test) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        let (supervised_train, supervised_test) = (it.next().unwrap(), it.next().unwrap());
        let fewshot = DatasetSplit {
            train_relations: rels(&train),
            validation_relations: rels(&validation),
            test_relations: rels(&test),
            train,
            validation,
            test,
        };
        Ok(Self { vocab, catalog, pretrain, fewshot, supervised_train, supervised_test })
    }

    pub fn files() -> &'static [&'static str] {
        &FILES
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relation_blocks_are_disjoint() {
        let b = SyntheticBenchmark::generate(&BenchmarkParams::default()).unwrap();
        let pre: BTreeSet<_> = b.pretrain.iter().map(|i| i.relation.clone()).collect();
        assert_eq!(pre.len(), 12);
        let s = &b.fewshot;
        assert_eq!((s.train_relations.len(), s.validation_relations.len(), s.test_relations.len()), (8, 2, 4));
        for set in [&s.train_relations, &s.validation_relations, &s.test_relations] {
            assert!(pre.is_disjoint(set));
        }
        assert!(s.train_relations.is_disjoint(&s.test_relations));
        assert_eq!(b.supervised_catalog().unwrap().len(), 14);
        let sup: BTreeSet<_> = b.supervised_train.iter().map(|i| i.relation.clone()).collect();
        assert_eq!(sup.len(), 14);
    }

    #[test]
    fn save_load_round_trip() {
        let b = SyntheticBenchmark::generate(&BenchmarkParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(SyntheticBenchmark::load(dir.path(), None, None).unwrap(), b);
    }
}
