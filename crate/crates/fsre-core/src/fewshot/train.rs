//! Episodic SGD training loop.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::pair::{episode_loss_on, ParamNodes};
use super::{ConceptKb, Model, ModelConfig, ModelParams};
use crate::corpus::{sample_episode, Dataset, EpisodeSpec};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub episode: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Vocabulary over the training split's tokens plus every concept surface
/// string in the knowledge base. Instances outside the split contribute
/// nothing: their unseen tokens map to `[UNK]` at evaluation time.
pub fn build_vocab(dataset: &Dataset, split: &BTreeSet<String>, kb: Option<&ConceptKb>) -> Vocab {
    let corpus_tokens = dataset
        .instances_in(split)
        .flat_map(|inst| inst.tokens.iter().cloned())
        .collect::<Vec<_>>();
    let extras = kb.map(|kb| kb.index.all_concepts()).unwrap_or_default();
    Vocab::build(corpus_tokens, extras)
}

/// Train a fresh model on episodes sampled from `split`. Deterministic for a
/// fixed config seed; all randomness flows through named substreams.
pub fn train(
    dataset: &Dataset,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    config: &ModelConfig,
    kb: Option<&ConceptKb>,
) -> Result<(Model, Vec<TrainLogEntry>)> {
    config.validate()?;
    spec.validate()?;
    if let Some(kb) = kb {
        if kb.table.dim() != config.d_c {
            return Err(Error::Config(format!(
                "config d_c {} does not match concept embedding dim {}",
                config.d_c,
                kb.table.dim()
            )));
        }
    }

    let vocab = build_vocab(dataset, split, kb);
    let mut init_rng = substream(config.seed, Stream::Init);
    let params = ModelParams::init(config, vocab.len(), &mut init_rng);
    let mut model = Model {
        config: config.clone(),
        params,
        vocab,
    };

    let mut velocity: Vec<Matrix> = model
        .params
        .tensors()
        .iter()
        .map(|(_, t)| Matrix::zeros(t.dim()))
        .collect();
    let mut sample_rng = substream(config.seed, Stream::Sample);
    let mut log = Vec::new();
    let mut recent: VecDeque<f64> = VecDeque::new();

    for episode_idx in 0..config.max_episodes {
        let episode = sample_episode(dataset, split, spec, &mut sample_rng)?;
        let mut g = Graph::new();
        let nodes = ParamNodes::register(&mut g, &model);
        let (loss_node, result) = episode_loss_on(&mut g, &nodes, &episode, &model, kb)?;
        if !result.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                episode: episode_idx,
                seed: config.seed,
            });
        }
        let mut grads = g.backward(loss_node);
        let node_list = nodes.node_list();

        let mut step: Vec<Matrix> = Vec::with_capacity(node_list.len());
        for (i, (_, tensor)) in model.params.tensors().iter().enumerate() {
            step.push(
                grads
                    .take(node_list[i])
                    .unwrap_or_else(|| Matrix::zeros(tensor.dim())),
            );
        }
        if let Some(clip) = config.grad_clip {
            let norm = step
                .iter()
                .map(|m| m.iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = clip / norm;
                for m in &mut step {
                    *m *= scale;
                }
            }
        }

        let lr = config.learning_rate;
        let mu = config.momentum;
        for (i, (_, tensor)) in model.params.tensors_mut().into_iter().enumerate() {
            let grad = std::mem::replace(&mut step[i], Matrix::zeros((0, 0)));
            if mu > 0.0 {
                velocity[i] *= mu;
                velocity[i] += &grad;
                *tensor -= &(&velocity[i] * lr);
            } else {
                *tensor -= &(&grad * lr);
            }
        }

        log.push(TrainLogEntry {
            episode: episode_idx,
            loss: result.loss,
            accuracy: result.accuracy,
        });

        if let Some(threshold) = config.early_stop_acc {
            recent.push_back(result.accuracy);
            if recent.len() > config.early_stop_window {
                recent.pop_front();
            }
            if recent.len() == config.early_stop_window {
                let mean: f64 = recent.iter().sum::<f64>() / recent.len() as f64;
                if mean >= threshold {
                    break;
                }
            }
        }
    }

    Ok((model, log))
}
