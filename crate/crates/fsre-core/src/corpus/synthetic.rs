//! Synthetic concept-determined benchmark.
//!
//! Construction: each relation corresponds to a unique (head concept, tail
//! concept) pair; entity mentions are the only non-filler tokens and filler
//! tokens are drawn iid from a shared vocabulary, so sentence content carries
//! no information about the relation beyond the entities themselves. Entities
//! are minted per concept and partitioned across the relations that use the
//! concept, so an entity occurs in exactly one relation's instance pool:
//! after a relation split, instances of held-out relations contain only
//! entity mentions never seen in training. Each entity carries its
//! determining concept plus up to `max_distractors` distractor concepts drawn
//! from a disjoint pool of generic concepts, which is what the gate has to
//! learn to reject. Instance entities are taken round-robin from each
//! relation's pool, so with `entities_per_concept` large enough every entity
//! mention occurs in exactly one instance and sentences alone cannot be
//! memorized.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Instance, Span};
use crate::conceptkb::{ConceptIndex, ConceptTriple, EmbeddingTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of relations R; each gets a unique concept pair.
    pub relations: usize,
    /// Number of relation-bearing concepts C (pairs are drawn from C²).
    pub concepts: usize,
    /// Size of the generic distractor-concept pool.
    pub generic_concepts: usize,
    /// Entities minted per relation-bearing concept.
    pub entities_per_concept: usize,
    /// Labeled sentences per relation.
    pub instances_per_relation: usize,
    /// Sentence length L in tokens (two of them are entity mentions).
    pub sentence_len: usize,
    /// Filler vocabulary size.
    pub filler_vocab: usize,
    /// Dimension of the generated concept embeddings.
    pub concept_dim: usize,
    /// Most distractor concepts an entity can carry (total concepts 1..=1+this).
    pub max_distractors: usize,
    /// Concept cap per entity in the emitted index.
    pub max_concepts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            relations: 24,
            concepts: 6,
            generic_concepts: 6,
            entities_per_concept: 240,
            instances_per_relation: 30,
            sentence_len: 8,
            filler_vocab: 40,
            concept_dim: 16,
            max_distractors: 2,
            max_concepts: 8,
        }
    }
}

/// Generate the dataset, concept index, and concept embedding table.
pub fn generate_synthetic<R: Rng>(
    config: &SynthConfig,
    rng: &mut R,
) -> Result<(Dataset, ConceptIndex, EmbeddingTable)> {
    let c = config.concepts;
    if config.relations > c * c {
        return Err(Error::Config(format!(
            "{} relations need distinct concept pairs but {c} concepts give only {}",
            config.relations,
            c * c
        )));
    }
    if config.sentence_len < 2 {
        return Err(Error::Config("sentence_len must be at least 2".into()));
    }
    if config.relations == 0 || config.instances_per_relation == 0 {
        return Err(Error::Config("relations and instances_per_relation must be positive".into()));
    }

    let det_concepts: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    let generic_concepts: Vec<String> =
        (0..config.generic_concepts).map(|i| format!("g{i}")).collect();

    // Unit-norm Gaussian vectors for every concept.
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut table = EmbeddingTable::new(config.concept_dim);
    for name in det_concepts.iter().chain(&generic_concepts) {
        let mut v: Vec<f64> = (0..config.concept_dim).map(|_| normal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        table.insert(name.clone(), v);
    }

    // Distinct concept pairs, one per relation.
    let mut pairs: Vec<(usize, usize)> =
        (0..c).flat_map(|h| (0..c).map(move |t| (h, t))).collect();
    pairs.shuffle(rng);
    pairs.truncate(config.relations);

    // Relation-uses per concept: (relation index, is_head).
    let mut uses: Vec<Vec<(usize, bool)>> = vec![Vec::new(); c];
    for (rel, &(h, t)) in pairs.iter().enumerate() {
        uses[h].push((rel, true));
        uses[t].push((rel, false));
    }
    for (concept, u) in uses.iter().enumerate() {
        if u.len() > config.entities_per_concept {
            return Err(Error::Config(format!(
                "concept c{concept} is used by {} relation sides but only {} entities are minted per concept",
                u.len(),
                config.entities_per_concept
            )));
        }
    }

    // Mint entities per concept and hand each relation side a disjoint block.
    let mut head_pool: Vec<Vec<String>> = vec![Vec::new(); config.relations];
    let mut tail_pool: Vec<Vec<String>> = vec![Vec::new(); config.relations];
    let mut triples: Vec<ConceptTriple> = Vec::new();
    let mut entity_id = 0usize;
    for (concept_idx, concept_uses) in uses.iter().enumerate() {
        let minted: Vec<String> = (0..config.entities_per_concept)
            .map(|_| {
                let name = format!("e{entity_id:04}");
                entity_id += 1;
                name
            })
            .collect();
        for name in &minted {
            triples.push(ConceptTriple {
                entity: name.clone(),
                concept: det_concepts[concept_idx].clone(),
                confidence: Some(rng.random_range(0.8..1.0)),
            });
            let distractors = rng.random_range(0..=config.max_distractors.min(generic_concepts.len()));
            let picks = rand::seq::index::sample(rng, generic_concepts.len(), distractors);
            for g in picks {
                triples.push(ConceptTriple {
                    entity: name.clone(),
                    concept: generic_concepts[g].clone(),
                    confidence: Some(rng.random_range(0.1..0.7)),
                });
            }
        }
        if concept_uses.is_empty() {
            continue;
        }
        // Even contiguous blocks; earlier uses absorb the remainder.
        let base = minted.len() / concept_uses.len();
        let extra = minted.len() % concept_uses.len();
        let mut at = 0;
        for (i, &(rel, is_head)) in concept_uses.iter().enumerate() {
            let size = base + usize::from(i < extra);
            let block = minted[at..at + size].to_vec();
            at += size;
            if is_head {
                head_pool[rel] = block;
            } else {
                tail_pool[rel] = block;
            }
        }
    }

    let index = ConceptIndex::from_triples(triples, config.max_concepts)?;

    // Sentences: entity mentions at two distinct positions, fillers iid.
    let fillers: Vec<String> = (0..config.filler_vocab).map(|i| format!("w{i:02}")).collect();
    let mut dataset = Dataset::new();
    for rel in 0..config.relations {
        let relation = format!("rel{rel:02}");
        for i in 0..config.instances_per_relation {
            let head = head_pool[rel][i % head_pool[rel].len()].clone();
            let tail = tail_pool[rel][i % tail_pool[rel].len()].clone();
            let head_pos = rng.random_range(0..config.sentence_len);
            let tail_pos = loop {
                let p = rng.random_range(0..config.sentence_len);
                if p != head_pos {
                    break p;
                }
            };
            let tokens: Vec<String> = (0..config.sentence_len)
                .map(|i| {
                    if i == head_pos {
                        head.clone()
                    } else if i == tail_pos {
                        tail.clone()
                    } else {
                        fillers[rng.random_range(0..fillers.len())].clone()
                    }
                })
                .collect();
            dataset.insert(
                relation.clone(),
                Instance {
                    tokens,
                    head_span: Span::new(head_pos, head_pos + 1),
                    tail_span: Span::new(tail_pos, tail_pos + 1),
                    head_name: head,
                    tail_name: tail,
                    relation: relation.clone(),
                },
            );
        }
    }

    Ok((dataset, index, table))
}
