//! Concept-enhanced few-shot relation extraction.
//!
//! A desk-scale framework for N-way-K-shot relation classification where
//! entity concepts drawn from an IsA knowledge base provide clues that plain
//! sentences cannot. The pipeline: a small trainable transformer encoder maps
//! a (query, support) sentence pair to token states; a concept-sentence
//! attention gate picks at most one concept per entity mention; a
//! self-attention fusion layer mixes the selected concept vectors into the
//! token states; a linear pair head scores whether the two sentences express
//! the same relation. Class logits aggregate pair scores over each class's
//! support set.
//!
//! Everything is f64 and runs on an eager reverse-mode tape ([`graph`]), so
//! analytic gradients of the whole pipeline can be verified against central
//! finite differences ([`gradcheck`]).

pub mod checkpoint;
pub mod conceptgate;
pub mod conceptkb;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod rng;

pub use conceptgate::{GateConfig, GateDecision, ProjectionParams};
pub use conceptkb::{ConceptIndex, ConceptTriple, EmbeddingTable};
pub use corpus::{Dataset, Episode, EpisodeSpec, Instance, RelationSplit, Span, SynthConfig};
pub use encoder::{Encoding, EncoderParams, Vocab};
pub use error::{Error, Result};
pub use fewshot::{
    Aggregation, ConceptKb, EvalReport, EpisodeResult, Model, ModelConfig, ModelParams, Pooling,
    TrainLogEntry, Variant,
};
pub use fusion::{FusedSequence, FusionParams};
pub use graph::{Graph, Matrix, NodeId};
