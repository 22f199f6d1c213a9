//! Synthetic knowledge graph and sentence generator.
//!
//! Every relation owns three signature tokens that double as its label. A
//! sentence expressing a relation carries a subset of those signatures plus
//! filler words and the two entity mentions; entities are drawn from a pool
//! shared by all relations, so only the signature tokens identify the
//! relation.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Instance, RelationCatalog, RelationEntry, Span};
use crate::encoder::{Vocabulary, NUM_RESERVED};
use crate::error::{Error, Result};

pub const SIGNATURES_PER_RELATION: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub num_relations: usize,
    pub entities_per_relation: usize,
    pub sentences_per_triple: usize,
    pub vocab_size: usize,
    /// Signature tokens placed in each sentence (1..=3).
    pub signatures_per_sentence: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            num_relations: 26,
            entities_per_relation: 8,
            sentences_per_triple: 6,
            vocab_size: 200,
            signatures_per_sentence: 2,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticKG {
    pub entities: Vec<String>,
    pub catalog: RelationCatalog,
    pub triples: Vec<Triple>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub kg: SyntheticKG,
    pub instances: Vec<Instance>,
    pub vocab: Vocabulary,
}

/// Zero-padded relation id, so lexical order equals numeric order.
pub fn relation_name(index: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(2);
    format!("R{index:0width$}")
}

pub fn generate_corpus(params: &CorpusParams) -> Result<SyntheticCorpus> {
    let CorpusParams {
        num_relations,
        entities_per_relation,
        sentences_per_triple,
        vocab_size,
        signatures_per_sentence,
        seed,
    } = *params;
    if num_relations < 4 {
        return Err(Error::Corpus(format!("need at least 4 relations, got {num_relations}")));
    }
    if entities_per_relation < 2 {
        return Err(Error::Corpus("each relation needs at least 2 entities".into()));
    }
    if sentences_per_triple < 2 {
        return Err(Error::Corpus("each triple needs at least 2 sentences".into()));
    }
    if !(1..=SIGNATURES_PER_RELATION).contains(&signatures_per_sentence) {
        return Err(Error::Corpus(format!("signatures_per_sentence must be in 1..={SIGNATURES_PER_RELATION}")));
    }
    let fixed = NUM_RESERVED + SIGNATURES_PER_RELATION * num_relations;
    let min_fillers = 4;
    if vocab_size < fixed + entities_per_relation + min_fillers {
        return Err(Error::Corpus(format!(
            "vocab_size {vocab_size} too small: {num_relations} relations need {fixed} reserved+signature ids, \
             plus at least {entities_per_relation} entities and {min_fillers} fillers"
        )));
    }
    let free = vocab_size - fixed;
    let num_entities = (free / 2).max(entities_per_relation);
    let num_fillers = free - num_entities;

    let mut rng = crate::seeded_rng(seed);
    let mut vocab = Vocabulary::new();
    let mut catalog = RelationCatalog::new();
    let relation_ids: Vec<String> = (0..num_relations).map(|r| relation_name(r, num_relations)).collect();
    for (r, id) in relation_ids.iter().enumerate() {
        let sig: Vec<String> = (0..SIGNATURES_PER_RELATION).map(|k| format!("sig{r}_{k}")).collect();
        for s in &sig {
            vocab.add(s);
        }
        catalog.insert(id.clone(), RelationEntry { label: sig.clone(), signature: sig })?;
    }
    let entities: Vec<String> = (0..num_entities).map(|i| format!("ent{i}")).collect();
    let fillers: Vec<String> = (0..num_fillers).map(|i| format!("w{i}")).collect();
    for t in entities.iter().chain(&fillers) {
        vocab.add(t);
    }
    debug_assert_eq!(vocab.len(), vocab_size);

    let mut triples = Vec::new();
    let mut instances = Vec::new();
    for id in &relation_ids {
        let mut chosen: Vec<&String> = entities.choose_multiple(&mut rng, entities_per_relation).collect();
        chosen.shuffle(&mut rng);
        let k = chosen.len();
        for i in 0..k {
            let (h, t) = (chosen[i], chosen[(i + 1) % k]);
            let triple = Triple { head: h.clone(), relation: id.clone(), tail: t.clone() };
            let signature = &catalog.get(id).expect("just inserted").signature;
            for _ in 0..sentences_per_triple {
                instances.push(sentence(&mut rng, &triple, signature, signatures_per_sentence, &fillers));
            }
            triples.push(triple);
        }
    }

    Ok(SyntheticCorpus { kg: SyntheticKG { entities, catalog, triples }, instances, vocab })
}

const MAX_FILLERS: usize = 2;

fn push_fillers(rng: &mut crate::Rng, out: &mut Vec<String>, fillers: &[String], max: usize) {
    for _ in 0..rng.random_range(0..=max) {
        out.push(fillers.choose(rng).expect("filler pool is non-empty").clone());
    }
}

fn sentence(
    rng: &mut crate::Rng,
    triple: &Triple,
    signature: &[String],
    per_sentence: usize,
    fillers: &[String],
) -> Instance {
    let head_first = rng.random_bool(0.5);
    let (first, second) = if head_first { (&triple.head, &triple.tail) } else { (&triple.tail, &triple.head) };
    let mut sigs: Vec<&String> = signature.choose_multiple(rng, per_sentence).collect();
    sigs.shuffle(rng);

    // filler* first-entity signatures filler* second-entity
    let mut tokens = Vec::new();
    push_fillers(rng, &mut tokens, fillers, MAX_FILLERS);
    let first_pos = tokens.len();
    tokens.push(first.clone());
    tokens.extend(sigs.iter().map(|s| (*s).clone()));
    push_fillers(rng, &mut tokens, fillers, MAX_FILLERS);
    let second_pos = tokens.len();
    tokens.push(second.clone());

    let (head, tail) = if head_first {
        (Span(first_pos, first_pos), Span(second_pos, second_pos))
    } else {
        (Span(second_pos, second_pos), Span(first_pos, first_pos))
    };
    Instance { tokens, head, tail, relation: triple.relation.clone() }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashMap};

    use super::*;

    fn small() -> CorpusParams {
        CorpusParams { num_relations: 12, ..CorpusParams::default() }
    }

    #[test]
    fn every_sentence_carries_two_signatures() {
        let c = generate_corpus(&small()).unwrap();
        for inst in &c.instances {
            inst.validate().unwrap();
            let sig = &c.kg.catalog.get(&inst.relation).unwrap().signature;
            let hits = inst.tokens.iter().filter(|t| sig.contains(t)).count();
            assert!(hits >= 2, "{inst:?}");
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusParams { seed: 8, ..small() }).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn entities_are_shared_across_relations() {
        let c = generate_corpus(&small()).unwrap();
        let mut rels: HashMap<&str, BTreeSet<&str>> = HashMap::new();
        for t in &c.kg.triples {
            rels.entry(&t.head).or_default().insert(&t.relation);
            rels.entry(&t.tail).or_default().insert(&t.relation);
        }
        assert!(rels.values().any(|s| s.len() >= 2));
    }

    #[test]
    fn labels_equal_signatures_and_kg_is_consistent() {
        let c = generate_corpus(&small()).unwrap();
        for (_, e) in c.kg.catalog.iter() {
            assert_eq!(e.label, e.signature);
            assert_eq!(e.signature.len(), 3);
        }
        for t in &c.kg.triples {
            assert!(c.kg.entities.contains(&t.head) && c.kg.entities.contains(&t.tail));
            assert!(c.kg.catalog.contains(&t.relation));
        }
        for id in c.kg.catalog.ids() {
            assert!(c.kg.triples.iter().filter(|t| t.relation == id).count() >= 2);
        }
        assert_eq!(c.vocab.len(), small().vocab_size);
    }

    #[test]
    fn too_small_vocab_is_error() {
        let p = CorpusParams { vocab_size: 40, ..small() };
        assert!(matches!(generate_corpus(&p), Err(Error::Corpus(_))));
        let p = CorpusParams { num_relations: 3, ..small() };
        assert!(generate_corpus(&p).is_err());
    }

    #[test]
    fn relation_names_sort_numerically() {
        assert_eq!(relation_name(3, 26), "R03");
        assert!(relation_name(9, 26) < relation_name(10, 26));
    }
}
