//! N-way-K-shot episode sampling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Instance};
use crate::error::{Error, Result};

/// Shape of an episode: N classes, K supports per class, `q_queries` labeled
/// queries per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
}

impl EpisodeSpec {
    /// Defaults to one query per class (q = N).
    pub fn new(n_way: usize, k_shot: usize) -> Self {
        EpisodeSpec {
            n_way,
            k_shot,
            q_queries: n_way,
        }
    }

    pub fn with_queries(mut self, q: usize) -> Self {
        self.q_queries = q;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be ≥ 2, got {}", self.n_way)));
        }
        if self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::Config("k_shot and q_queries must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled task: N distinct classes, K supports each, labeled queries.
/// Queries are grouped by class in class order; labels index into `classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<Vec<Instance>>,
    pub queries: Vec<(Instance, usize)>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }
}

/// Sample an episode from the relations in `split`. Classes are drawn without
/// replacement from the sorted relation list; instances are drawn without
/// replacement within each relation. Queries are distributed over classes
/// round-robin (class i gets ⌈(q − i)/N⌉).
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode> {
    spec.validate()?;
    let mut available: Vec<&str> = split
        .iter()
        .map(String::as_str)
        .filter(|r| dataset.get(r).is_some())
        .collect();
    if available.len() < spec.n_way {
        return Err(Error::Config(format!(
            "split has {} usable relations, need {}",
            available.len(),
            spec.n_way
        )));
    }
    available.shuffle(rng);
    let classes: Vec<String> = available[..spec.n_way].iter().map(|s| (*s).to_owned()).collect();

    let mut support = Vec::with_capacity(spec.n_way);
    let mut queries = Vec::new();
    for (class_idx, relation) in classes.iter().enumerate() {
        let instances = dataset.get(relation).expect("class came from dataset");
        let n_queries =
            spec.q_queries / spec.n_way + usize::from(class_idx < spec.q_queries % spec.n_way);
        let needed = spec.k_shot + n_queries;
        if instances.len() < needed {
            return Err(Error::Episode {
                relation: relation.clone(),
                message: format!(
                    "needs {} instances ({} support + {} queries) but has {}",
                    needed,
                    spec.k_shot,
                    n_queries,
                    instances.len()
                ),
            });
        }
        let picks = rand::seq::index::sample(rng, instances.len(), needed);
        let picks: Vec<usize> = picks.into_iter().collect();
        support.push(picks[..spec.k_shot].iter().map(|&i| instances[i].clone()).collect());
        for &i in &picks[spec.k_shot..] {
            queries.push((instances[i].clone(), class_idx));
        }
    }
    Ok(Episode {
        classes,
        support,
        queries,
    })
}
