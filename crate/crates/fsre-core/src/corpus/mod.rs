//! Datasets, relation splits, and N-way-K-shot episodes.

mod episode;
mod fewrel;
mod split;
mod synthetic;

pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use fewrel::{load_fewrel, save_fewrel, write_fewrel};
pub use split::{split_relations, RelationSplit};
pub use synthetic::{generate_synthetic, SynthConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open token index interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// One labeled sentence with head/tail entity mentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub head_name: String,
    pub tail_name: String,
    pub relation: String,
}

impl Instance {
    /// Span bounds, non-empty tokens, non-empty relation.
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::validation(context, "empty token list"));
        }
        if self.relation.is_empty() {
            return Err(Error::validation(context, "empty relation id"));
        }
        for (name, span) in [("head", self.head_span), ("tail", self.tail_span)] {
            if span.is_empty() || span.end > self.tokens.len() {
                return Err(Error::validation(
                    context,
                    format!(
                        "{name} span [{}, {}) out of bounds for {} tokens",
                        span.start,
                        span.end,
                        self.tokens.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Relation id → instances, ordered for deterministic iteration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    relations: BTreeMap<String, Vec<Instance>>,
}

impl Dataset {
    pub fn new() -> Self {
        Dataset::default()
    }

    pub fn insert(&mut self, relation: impl Into<String>, instance: Instance) {
        self.relations.entry(relation.into()).or_default().push(instance);
    }

    pub fn get(&self, relation: &str) -> Option<&[Instance]> {
        self.relations.get(relation).map(|v| v.as_slice())
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = &str> {
        self.relations.keys().map(|s| s.as_str())
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_instances(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Instance])> {
        self.relations.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// All instances of the given relation set, in relation order.
    pub fn instances_in<'a>(
        &'a self,
        relations: &'a std::collections::BTreeSet<String>,
    ) -> impl Iterator<Item = &'a Instance> {
        self.relations
            .iter()
            .filter(move |(k, _)| relations.contains(*k))
            .flat_map(|(_, v)| v.iter())
    }

    pub fn validate(&self) -> Result<()> {
        for (rel, instances) in &self.relations {
            for (i, inst) in instances.iter().enumerate() {
                inst.validate(&format!("relation {rel:?} instance {i}"))?;
            }
        }
        Ok(())
    }
}

impl FromIterator<(String, Vec<Instance>)> for Dataset {
    fn from_iter<T: IntoIterator<Item = (String, Vec<Instance>)>>(iter: T) -> Self {
        Dataset {
            relations: iter.into_iter().collect(),
        }
    }
}
