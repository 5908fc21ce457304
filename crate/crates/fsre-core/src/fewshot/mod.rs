//! Pair-matching episodic classifier with ablation variants.
//!
//! A query is scored against every support instance as a jointly encoded
//! sentence pair; class logits aggregate the K pair scores of each class.

mod eval;
pub(crate) mod pair;
mod train;

pub use eval::{evaluate, EvalReport};
pub use pair::{episode_forward, pair_logit, pair_logit_traced, GateTraceEntry, PairTrace};
pub use train::{build_vocab, train, TrainLogEntry};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conceptgate::ProjectionParams;
use crate::conceptkb::{lookup_concepts, ConceptIndex, EmbeddingTable};
pub use crate::encoder::Pooling;
use crate::encoder::{EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::fusion::FusionParams;
use crate::graph::Matrix;
use crate::rng::gaussian_matrix;

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Gate selects concepts; fusion attends over tokens plus selections.
    #[default]
    Full,
    /// No gate: every candidate concept (up to the index cap) enters fusion.
    NoAtt,
    /// Gate selects, but selections are concatenated to the pooled state in
    /// front of a wider pair head instead of attended over.
    NoFusion,
    /// Concept surface strings become extra input tokens; no gate, no fusion
    /// slots.
    Simple,
    /// No concept path at all.
    SentenceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoAtt,
        Variant::NoFusion,
        Variant::Simple,
        Variant::SentenceOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAtt => "no_att",
            Variant::NoFusion => "no_fusion",
            Variant::Simple => "simple",
            Variant::SentenceOnly => "sentence_only",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// Whether the 01-gate runs for this variant.
    pub fn uses_gate(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoFusion)
    }
}

/// How the K pair scores of a class combine into its logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Encoder width.
    pub d: usize,
    pub d_ff: usize,
    /// Shared projection space of the gate.
    pub d_p: usize,
    /// Concept embedding dimension (must match the loaded table).
    pub d_c: usize,
    pub l_max: usize,
    /// 01-gate threshold.
    pub alpha: f64,
    pub aggregation: Aggregation,
    pub pooling: Pooling,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm gradient clip applied before each update.
    pub grad_clip: Option<f64>,
    /// Hidden width of the pair head's fully connected layer.
    pub head_hidden: usize,
    pub max_episodes: usize,
    pub seed: u64,
    /// Stop training once the mean accuracy over the last
    /// `early_stop_window` episodes reaches this value.
    pub early_stop_acc: Option<f64>,
    pub early_stop_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            d: 64,
            d_ff: 128,
            d_p: 16,
            d_c: 16,
            l_max: 128,
            alpha: 0.7,
            aggregation: Aggregation::Mean,
            pooling: Pooling::Cls,
            learning_rate: 0.1,
            momentum: 0.9,
            grad_clip: Some(1.0),
            head_hidden: 32,
            max_episodes: 2000,
            seed: 42,
            early_stop_acc: None,
            early_stop_window: 200,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        crate::conceptgate::GateConfig::new(self.alpha)?;
        for (name, v) in [
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("d_p", self.d_p),
            ("d_c", self.d_c),
            ("l_max", self.l_max),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(
                "learning_rate must be positive and momentum in [0, 1)".into(),
            ));
        }
        if self.early_stop_acc.is_some() && self.early_stop_window == 0 {
            return Err(Error::Config("early_stop_window must be positive".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {clip}")));
            }
        }
        Ok(())
    }

    /// Input width of the linear pair head.
    pub fn head_input_dim(&self) -> usize {
        match self.variant {
            // Pooled state plus one adapted slot per pair entity
            // (query head/tail, support head/tail).
            Variant::NoFusion => self.d * 5,
            _ => self.d,
        }
    }
}

/// Concept knowledge: IsA index plus pretrained concept vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptKb {
    pub index: ConceptIndex,
    pub table: EmbeddingTable,
}

impl ConceptKb {
    pub fn new(index: ConceptIndex, table: EmbeddingTable) -> Self {
        ConceptKb { index, table }
    }

    pub fn lookup(&self, mention: &str) -> Vec<(String, Vec<f64>)> {
        lookup_concepts(&self.index, &self.table, mention)
    }
}

/// Every trainable tensor of the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub gate: ProjectionParams,
    pub fusion: FusionParams,
    /// Pair head: one hidden fully connected layer, then a scalar readout.
    /// head_input_dim × head_hidden
    pub head_w1: Matrix,
    /// head_hidden × 1
    pub head_w2: Matrix,
    /// 1 × 1
    pub head_b: Matrix,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &ModelConfig, vocab_size: usize, rng: &mut R) -> Self {
        let head_in = config.head_input_dim();
        let hidden = config.head_hidden;
        ModelParams {
            encoder: EncoderParams::init(vocab_size, config.d, config.d_ff, config.l_max, rng),
            gate: ProjectionParams::init(config.d_c, config.d, config.d_p, rng),
            fusion: FusionParams::init(config.d_c, config.d, rng),
            head_w1: gaussian_matrix(head_in, hidden, 1.0 / (head_in as f64).sqrt(), rng),
            head_w2: gaussian_matrix(hidden, 1, 1.0 / (hidden as f64).sqrt(), rng),
            head_b: Matrix::zeros((1, 1)),
        }
    }

    /// Named tensors in a stable order (checkpoint and optimizer contract).
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("encoder.tok", &self.encoder.tok),
            ("encoder.pos", &self.encoder.pos),
            ("encoder.wq", &self.encoder.wq),
            ("encoder.wk", &self.encoder.wk),
            ("encoder.wv", &self.encoder.wv),
            ("encoder.wo", &self.encoder.wo),
            ("encoder.w1", &self.encoder.w1),
            ("encoder.w2", &self.encoder.w2),
            ("gate.p_c", &self.gate.p_c),
            ("gate.p_s", &self.gate.p_s),
            ("fusion.adapter", &self.fusion.adapter),
            ("fusion.wq", &self.fusion.wq),
            ("fusion.wk", &self.fusion.wk),
            ("fusion.wv", &self.fusion.wv),
            ("head.w1", &self.head_w1),
            ("head.w2", &self.head_w2),
            ("head.b", &self.head_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("encoder.tok", &mut self.encoder.tok),
            ("encoder.pos", &mut self.encoder.pos),
            ("encoder.wq", &mut self.encoder.wq),
            ("encoder.wk", &mut self.encoder.wk),
            ("encoder.wv", &mut self.encoder.wv),
            ("encoder.wo", &mut self.encoder.wo),
            ("encoder.w1", &mut self.encoder.w1),
            ("encoder.w2", &mut self.encoder.w2),
            ("gate.p_c", &mut self.gate.p_c),
            ("gate.p_s", &mut self.gate.p_s),
            ("fusion.adapter", &mut self.fusion.adapter),
            ("fusion.wq", &mut self.fusion.wq),
            ("fusion.wk", &mut self.fusion.wk),
            ("fusion.wv", &mut self.fusion.wv),
            ("head.w1", &mut self.head_w1),
            ("head.w2", &mut self.head_w2),
            ("head.b", &mut self.head_b),
        ]
    }
}

/// A trained (or freshly initialized) model bundle. The vocabulary is part
/// of the artifact: evaluation must tokenize exactly as training did.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub vocab: Vocab,
}

/// Per-episode forward results.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    /// One N-vector of class logits per query.
    pub logits: Vec<Vec<f64>>,
    /// Argmax per query; ties break toward the lowest class index.
    pub predicted: Vec<usize>,
    pub loss: f64,
    pub accuracy: f64,
}
