//! Seeded re-split of relation ids into train/valid/test buckets.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSplit {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl RelationSplit {
    pub fn bucket(&self, name: &str) -> Option<&BTreeSet<String>> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Shuffle the sorted relation ids with a ChaCha stream seeded by `seed` and
/// cut the result into buckets of the given sizes. A pure function of
/// (relation id set, seed, sizes).
pub fn split_relations(
    dataset: &Dataset,
    seed: u64,
    sizes: (usize, usize, usize),
) -> Result<RelationSplit> {
    let mut ids: Vec<String> = dataset.relation_ids().map(str::to_owned).collect();
    let (a, b, c) = sizes;
    if a + b + c != ids.len() {
        return Err(Error::Config(format!(
            "split sizes {}+{}+{} do not cover {} relations",
            a,
            b,
            c,
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let train = ids[..a].iter().cloned().collect();
    let valid = ids[a..a + b].iter().cloned().collect();
    let test = ids[a + b..].iter().cloned().collect();
    Ok(RelationSplit { train, valid, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Instance, Span};

    fn dataset_with_relations(n: usize) -> Dataset {
        let mut ds = Dataset::new();
        for i in 0..n {
            let rel = format!("P{i:03}");
            ds.insert(
                rel.clone(),
                Instance {
                    tokens: vec!["a".into(), "b".into()],
                    head_span: Span::new(0, 1),
                    tail_span: Span::new(1, 2),
                    head_name: "a".into(),
                    tail_name: "b".into(),
                    relation: rel,
                },
            );
        }
        ds
    }

    #[test]
    fn sizes_and_disjoint_cover() {
        let ds = dataset_with_relations(80);
        let split = split_relations(&ds, 7, (50, 14, 16)).unwrap();
        assert_eq!(split.train.len(), 50);
        assert_eq!(split.valid.len(), 14);
        assert_eq!(split.test.len(), 16);
        let mut all: Vec<&String> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn membership_matches_seeded_shuffle_oracle() {
        // Independent straight-line oracle: sort ids, Fisher-Yates them with
        // the same seeded stream, cut at the bucket boundaries.
        let ds = dataset_with_relations(80);
        let split = split_relations(&ds, 7, (50, 14, 16)).unwrap();

        let mut ids: Vec<String> = (0..80).map(|i| format!("P{i:03}")).collect();
        ids.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            let bucket = if i < 50 {
                &split.train
            } else if i < 64 {
                &split.valid
            } else {
                &split.test
            };
            assert!(bucket.contains(id), "{id} landed in the wrong bucket");
        }
    }

    #[test]
    fn degenerate_sizes_put_everything_in_train() {
        let ds = dataset_with_relations(80);
        let split = split_relations(&ds, 1, (80, 0, 0)).unwrap();
        assert_eq!(split.train.len(), 80);
        assert!(split.valid.is_empty());
        assert!(split.test.is_empty());
    }

    #[test]
    fn same_seed_gives_identical_split() {
        let ds = dataset_with_relations(30);
        let s1 = split_relations(&ds, 99, (20, 5, 5)).unwrap();
        let s2 = split_relations(&ds, 99, (20, 5, 5)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let ds = dataset_with_relations(10);
        assert!(split_relations(&ds, 0, (5, 4, 2)).is_err());
    }
}
