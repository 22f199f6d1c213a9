use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::{DatasetSplit, Instance, RelationCatalog};
use crate::error::{Error, Result};

/// Relation counts for a three-way split of `n` relations.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions must be in [0, 1] and sum to 1, got {fractions:?}")));
    }
    let a = (fractions[0] * n as f64).round() as usize;
    let b = ((fractions[1] * n as f64).round() as usize).min(n.saturating_sub(a));
    let counts = [a, b, n - a - b];
    if counts.contains(&0) {
        return Err(Error::Corpus(format!(
            "splitting {n} relations by {fractions:?} leaves a split with zero relations ({counts:?})"
        )));
    }
    Ok(counts)
}

/// Partitions relations (shuffled by `seed`) into train/validation/test and
/// routes every instance to its relation's split.
pub fn split_relations_disjoint(
    instances: &[Instance],
    catalog: &RelationCatalog,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    catalog.check_instances(instances)?;
    let mut ids: Vec<String> = catalog.ids().map(str::to_string).collect();
    let [a, b, _] = split_counts(ids.len(), fractions)?;
    ids.shuffle(&mut crate::seeded_rng(seed));
    let train_relations: BTreeSet<String> = ids[..a].iter().cloned().collect();
    let validation_relations: BTreeSet<String> = ids[a..a + b].iter().cloned().collect();
    let test_relations: BTreeSet<String> = ids[a + b..].iter().cloned().collect();

    let pick = |set: &BTreeSet<String>| instances.iter().filter(|i| set.contains(&i.relation)).cloned().collect();
    Ok(DatasetSplit {
        train: pick(&train_relations),
        validation: pick(&validation_relations),
        test: pick(&test_relations),
        train_relations,
        validation_relations,
        test_relations,
    })
}
