//! Central finite-difference verification of the analytic gradients.
//!
//! The check drives the whole pair pipeline (encoder, gate projections,
//! adapter and fusion attention, pair head) through an episode loss and
//! compares every parameter entry against `(f(θ+ε) − f(θ−ε)) / 2ε`. The hard
//! gate makes the loss piecewise smooth, so the fixture is built to keep
//! every gate score away from the threshold; the margin is asserted.

use serde::Serialize;

use crate::corpus::{generate_synthetic, sample_episode, Episode, EpisodeSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::fewshot::{
    build_vocab, ConceptKb, Model, ModelConfig, ModelParams, Pooling, Variant,
};
use crate::graph::Graph;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOutcome {
    pub tolerance: f64,
    pub epsilon: f64,
    pub pass: bool,
    pub groups: Vec<GroupReport>,
}

/// Every gate score in the fixture must sit at least this far from α so a
/// ±ε parameter nudge cannot flip the hard mask mid-check.
const GATE_MARGIN: f64 = 0.05;

/// Deterministic d=4 fixture: a small synthetic task, a full-variant model,
/// and one 2-way episode whose gate decisions sit well away from α. The
/// init seed is searched in a fixed order until the margin holds, so the
/// fixture stays valid if initialization details change.
pub fn pair_pipeline_fixture() -> Result<(Model, ConceptKb, Episode)> {
    let synth = SynthConfig {
        relations: 4,
        concepts: 3,
        generic_concepts: 2,
        entities_per_concept: 8,
        instances_per_relation: 6,
        sentence_len: 5,
        filler_vocab: 8,
        concept_dim: 3,
        ..SynthConfig::default()
    };
    let (dataset, index, table) = generate_synthetic(&synth, &mut substream(13, Stream::Synth))?;
    let kb = ConceptKb::new(index, table);

    let split: std::collections::BTreeSet<String> =
        dataset.relation_ids().map(str::to_owned).collect();
    let spec = EpisodeSpec::new(2, 1).with_queries(2);
    let episode = sample_episode(&dataset, &split, &spec, &mut substream(20, Stream::Sample))?;

    for seed in 1..200 {
        let config = ModelConfig {
            variant: Variant::Full,
            d: 4,
            d_ff: 8,
            d_p: 3,
            d_c: 3,
            l_max: 24,
            alpha: 0.7,
            pooling: Pooling::Cls,
            seed,
            ..ModelConfig::default()
        };
        let vocab = build_vocab(&dataset, &split, Some(&kb));
        let mut rng = substream(config.seed, Stream::Init);
        let params = ModelParams::init(&config, vocab.len(), &mut rng);
        let model = Model {
            config,
            params,
            vocab,
        };
        if matches!(min_gate_margin(&model, &kb, &episode), Ok(m) if m > GATE_MARGIN) {
            return Ok((model, kb, episode));
        }
    }
    Err(Error::Config(
        "no init seed gave a fixture with selections and gate margin".into(),
    ))
}

/// Compare analytic episode-loss gradients against central differences.
/// `corrupt` perturbs one analytic entry first (a self-test hook: the check
/// must then fail).
pub fn check_episode_gradients(
    model: &Model,
    kb: Option<&ConceptKb>,
    episode: &Episode,
    epsilon: f64,
    tolerance: f64,
    corrupt: bool,
) -> Result<GradCheckOutcome> {
    // Analytic pass.
    let mut g = Graph::new();
    let nodes = crate::fewshot::pair::ParamNodes::register(&mut g, model);
    let (loss_node, result) =
        crate::fewshot::pair::episode_loss_on(&mut g, &nodes, episode, model, kb)?;
    if !result.loss.is_finite() {
        return Err(Error::Config("fixture loss is not finite".into()));
    }
    let grads = g.backward(loss_node);
    let node_list = nodes.node_list();

    let names: Vec<&'static str> = model.params.tensors().iter().map(|(n, _)| *n).collect();
    let mut analytic: Vec<crate::graph::Matrix> = Vec::with_capacity(names.len());
    for (i, (_, tensor)) in model.params.tensors().iter().enumerate() {
        let grad = grads
            .get(node_list[i])
            .cloned()
            .unwrap_or_else(|| crate::graph::Matrix::zeros(tensor.dim()));
        analytic.push(grad);
    }
    if corrupt {
        analytic[0][[0, 0]] += 0.5;
    }

    // Numeric pass, one entry at a time.
    let mut groups = Vec::with_capacity(names.len());
    let mut pass = true;
    for (i, name) in names.iter().enumerate() {
        let (rows, cols) = analytic[i].dim();
        let mut max_rel = 0.0f64;
        for r in 0..rows {
            for c in 0..cols {
                let numeric = {
                    let mut probe = model.clone();
                    let f = |m: &Model| -> Result<f64> {
                        Ok(crate::fewshot::episode_forward(episode, m, kb)?.loss)
                    };
                    probe.params.tensors_mut()[i].1[[r, c]] += epsilon;
                    let plus = f(&probe)?;
                    probe.params.tensors_mut()[i].1[[r, c]] -= 2.0 * epsilon;
                    let minus = f(&probe)?;
                    (plus - minus) / (2.0 * epsilon)
                };
                let a = analytic[i][[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        if max_rel > tolerance {
            pass = false;
        }
        groups.push(GroupReport {
            name: (*name).to_owned(),
            entries: rows * cols,
            max_rel_err: max_rel,
        });
    }

    Ok(GradCheckOutcome {
        tolerance,
        epsilon,
        pass,
        groups,
    })
}

/// Margin of every gate score in the episode from the threshold α; the
/// finite-difference check is only meaningful when this is comfortably
/// positive (no mask flips within ±ε).
pub fn min_gate_margin(model: &Model, kb: &ConceptKb, episode: &Episode) -> Result<f64> {
    let mut min_margin = f64::INFINITY;
    let mut saw_selection = false;
    for (query, _) in &episode.queries {
        for group in &episode.support {
            for support in group {
                let (_, trace) = crate::fewshot::pair_logit_traced(query, support, model, Some(kb))?;
                for entry in trace.gates {
                    for score in entry.decision.scores {
                        min_margin = min_margin.min((score - model.config.alpha).abs());
                    }
                    if entry.decision.selected.is_some() {
                        saw_selection = true;
                    }
                }
            }
        }
    }
    if !saw_selection {
        return Err(Error::Config(
            "fixture never selects a concept; gate gradients would be trivial".into(),
        ));
    }
    Ok(min_margin)
}
