//! Episodic evaluation with a normal-approximation confidence interval.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::pair::episode_forward;
use super::{ConceptKb, Model};
use crate::corpus::{sample_episode, Dataset, EpisodeSpec};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// Field order is the wire format of the report file; keep it stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Mean accuracy over freshly sampled episodes plus the 95% CI half-width
/// (normal approximation over per-episode accuracies, sample std).
pub fn evaluate(
    dataset: &Dataset,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    model: &Model,
    kb: Option<&ConceptKb>,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut rng = substream(seed, Stream::Eval);
    let mut accuracies = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let episode = sample_episode(dataset, split, spec, &mut rng)?;
        let result = episode_forward(&episode, model, kb)?;
        accuracies.push(result.accuracy);
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ci95 = if accuracies.len() > 1 {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        variant: model.config.variant.as_str().to_owned(),
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        episodes,
        seed,
        accuracy: mean,
        ci95,
    })
}
