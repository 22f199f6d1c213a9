//! Pretraining matching batches and N-way K-shot episodes.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, RelationCatalog};
use crate::error::{Error, Result};

/// Two sentences of the same triple, with per-mention blanking decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingPair {
    pub relation: String,
    pub a: Instance,
    pub b: Instance,
    /// (head, tail) blanking for `a` and for `b`.
    pub blank_a: (bool, bool),
    pub blank_b: (bool, bool),
}

/// `N` pairs with pairwise distinct relations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingBatch {
    pub pairs: Vec<MatchingPair>,
}

impl MatchingBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.relation.as_str())
    }
}

type TripleKey = (String, Vec<String>, Vec<String>);

/// Groups instances by triple `(relation, head mention, tail mention)`.
#[derive(Debug, Clone)]
pub struct MatchingSampler {
    instances: Vec<Instance>,
    /// relation → list of triples (instance index lists with ≥ 2 entries)
    triples: BTreeMap<String, Vec<Vec<usize>>>,
}

impl MatchingSampler {
    pub fn new(instances: &[Instance]) -> Self {
        let mut groups: BTreeMap<TripleKey, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            let key = (inst.relation.clone(), inst.head_tokens().to_vec(), inst.tail_tokens().to_vec());
            groups.entry(key).or_default().push(i);
        }
        let mut triples: BTreeMap<String, Vec<Vec<usize>>> = BTreeMap::new();
        for ((rel, _, _), idx) in groups {
            if idx.len() >= 2 {
                triples.entry(rel).or_default().push(idx);
            }
        }
        Self { instances: instances.to_vec(), triples }
    }

    /// Relations that own at least one triple with two sentences.
    pub fn eligible_relations(&self) -> usize {
        self.triples.len()
    }

    pub fn sample(&self, n: usize, blank_prob: f64, rng: &mut crate::Rng) -> Result<MatchingBatch> {
        if !(0.0..=1.0).contains(&blank_prob) {
            return Err(Error::invalid(format!("blank probability must lie in [0, 1], got {blank_prob}")));
        }
        if n == 0 || self.triples.len() < n {
            return Err(Error::Sampling(format!(
                "need {n} relations with a two-sentence triple, only {} available",
                self.triples.len()
            )));
        }
        let relations: Vec<&String> = self.triples.keys().collect();
        let mut pairs = Vec::with_capacity(n);
        for rel in relations.choose_multiple(rng, n) {
            let triple = self.triples[*rel].choose(rng).expect("non-empty triple list");
            let picked: Vec<&usize> = triple.choose_multiple(rng, 2).collect();
            let mut blank = || (rng.random_bool(blank_prob), rng.random_bool(blank_prob));
            let (blank_a, blank_b) = (blank(), blank());
            pairs.push(MatchingPair {
                relation: (*rel).clone(),
                a: self.instances[*picked[0]].clone(),
                b: self.instances[*picked[1]].clone(),
                blank_a,
                blank_b,
            });
        }
        Ok(MatchingBatch { pairs })
    }
}

pub fn sample_matching_batch(instances: &[Instance], n: usize, blank_prob: f64, seed: u64) -> Result<MatchingBatch> {
    MatchingSampler::new(instances).sample(n, blank_prob, &mut crate::seeded_rng(seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub ways: usize,
    /// `0` denotes a zero-shot episode.
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Result<Self> {
        let s = Self { ways, shots, queries };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.queries < 1 {
            return Err(Error::invalid(format!(
                "episode needs at least 2 ways and 1 query, got {}-way with {} queries",
                self.ways, self.queries
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub instance: Instance,
    /// Index into the episode's relation list.
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub relations: Vec<String>,
    /// `support[i]` holds the K instances of `relations[i]`.
    pub support: Vec<Vec<Instance>>,
    pub queries: Vec<Query>,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.relations.len()
    }

    pub fn shots(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Draws episodes from the relations present in one split.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    instances: Vec<Instance>,
    by_relation: BTreeMap<String, Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(instances: &[Instance], catalog: &RelationCatalog) -> Result<Self> {
        catalog.check_instances(instances)?;
        let mut by_relation: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            by_relation.entry(inst.relation.clone()).or_default().push(i);
        }
        Ok(Self { instances: instances.to_vec(), by_relation })
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.by_relation.keys().map(String::as_str)
    }

    pub fn sample(&self, spec: EpisodeSpec, rng: &mut crate::Rng) -> Result<Episode> {
        spec.validate()?;
        if self.by_relation.len() < spec.ways {
            return Err(Error::Sampling(format!(
                "{}-way episodes need {} relations, split has {}",
                spec.ways,
                spec.ways,
                self.by_relation.len()
            )));
        }
        if let Some((rel, v)) = self.by_relation.iter().find(|(_, v)| v.len() < spec.shots + 1) {
            return Err(Error::Sampling(format!(
                "relation `{rel}` has {} instances, {}-shot episodes need at least {}",
                v.len(),
                spec.shots,
                spec.shots + 1
            )));
        }
        let keys: Vec<&String> = self.by_relation.keys().collect();
        let relations: Vec<String> = keys.choose_multiple(rng, spec.ways).map(|k| (*k).clone()).collect();

        // Shuffled pools per way: first K are support, the rest feed queries.
        let mut pools: Vec<Vec<usize>> = relations
            .iter()
            .map(|r| {
                let mut p = self.by_relation[r].clone();
                p.shuffle(rng);
                p
            })
            .collect();
        let support =
            pools.iter_mut().map(|p| p.drain(..spec.shots).map(|i| self.instances[i].clone()).collect()).collect();
        let mut queries = Vec::with_capacity(spec.queries);
        for _ in 0..spec.queries {
            let open: Vec<usize> = (0..spec.ways).filter(|&w| !pools[w].is_empty()).collect();
            let Some(&way) = open.choose(rng) else {
                return Err(Error::Sampling("ran out of query instances".into()));
            };
            let idx = pools[way].pop().expect("open pool is non-empty");
            queries.push(Query { instance: self.instances[idx].clone(), target: way });
        }
        Ok(Episode { relations, support, queries })
    }
}

pub fn sample_episode(
    instances: &[Instance],
    catalog: &RelationCatalog,
    spec: EpisodeSpec,
    seed: u64,
) -> Result<Episode> {
    EpisodeSampler::new(instances, catalog)?.sample(spec, &mut crate::seeded_rng(seed))
}
