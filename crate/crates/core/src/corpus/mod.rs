//! Instances, relation catalogs, the synthetic benchmark generator, JSONL
//! I/O, relation-disjoint splitting, and MLM corruption.

mod benchmark;
mod jsonl;
mod mlm;
mod split;
mod synthetic;
mod types;

pub use benchmark::{BenchmarkParams, SyntheticBenchmark};
pub use jsonl::{load_jsonl, read_jsonl, write_jsonl};
pub use mlm::{apply_mlm_mask, MlmTargets};
pub use split::{split_counts, split_relations_disjoint};
pub use synthetic::{
    generate_corpus, relation_name, CorpusParams, SyntheticCorpus, SyntheticKG, Triple, SIGNATURES_PER_RELATION,
};
pub use types::{DatasetSplit, Instance, RelationCatalog, RelationEntry, Span};
