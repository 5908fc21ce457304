//! Joint pair encoding and the per-variant concept routing.
//!
//! A pair is one sequence: `[CLS] marked-query [SEP] marked-support [SEP]`.
//! The gate scores each entity's candidates against the pooled embedding of
//! this pair sequence, and concept handling applies to the entities of both
//! sentences (query head/tail, then support head/tail).

use serde::Serialize;

use super::{Aggregation, ConceptKb, EpisodeResult, Model, Variant};
use crate::conceptgate::{self, GateConfig, GateDecision};
use crate::corpus::{Episode, Instance};
use crate::encoder::{self, Pooling, SEP, CLS};
use crate::error::{Error, Result};
use crate::fusion::{self, AttentionTrace, FusionNodes};
use crate::graph::{Graph, Matrix, NodeId};

/// All parameter nodes of one graph, registered once and reused by every
/// pair forward inside it.
pub(crate) struct ParamNodes {
    pub encoder: encoder::EncoderNodes,
    pub gate: conceptgate::ProjectionNodes,
    pub fusion: FusionNodes,
    pub head_w1: NodeId,
    pub head_w2: NodeId,
    pub head_b: NodeId,
}

impl ParamNodes {
    pub fn register(g: &mut Graph, model: &Model) -> ParamNodes {
        ParamNodes {
            encoder: model.params.encoder.register(g),
            gate: model.params.gate.register(g),
            fusion: model.params.fusion.register(g),
            head_w1: g.param(model.params.head_w1.clone()),
            head_w2: g.param(model.params.head_w2.clone()),
            head_b: g.param(model.params.head_b.clone()),
        }
    }

    /// Nodes aligned with `ModelParams::tensors()` order.
    pub fn node_list(&self) -> Vec<NodeId> {
        vec![
            self.encoder.tok,
            self.encoder.pos,
            self.encoder.wq,
            self.encoder.wk,
            self.encoder.wv,
            self.encoder.wo,
            self.encoder.w1,
            self.encoder.w2,
            self.gate.p_c,
            self.gate.p_s,
            self.fusion.adapter,
            self.fusion.wq,
            self.fusion.wk,
            self.fusion.wv,
            self.head_w1,
            self.head_w2,
            self.head_b,
        ]
    }
}

/// Gate decision for one entity of a pair, for inspection dumps.
#[derive(Debug, Clone, Serialize)]
pub struct GateTraceEntry {
    pub role: &'static str,
    pub entity: String,
    pub candidates: Vec<String>,
    pub decision: GateDecision,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PairTrace {
    pub gates: Vec<GateTraceEntry>,
    pub attention: Option<AttentionTrace>,
}

/// Token ids of the joint pair sequence. For [`Variant::Simple`] each
/// segment additionally carries its entities' concept surface strings as
/// plain tokens before the segment's `[SEP]`.
pub(crate) fn pair_ids(
    query: &Instance,
    support: &Instance,
    model: &Model,
    kb: Option<&ConceptKb>,
) -> Result<Vec<usize>> {
    let mut ids = vec![CLS];
    for instance in [query, support] {
        let (marked, _) = encoder::mark_tokens(instance);
        ids.extend(marked.iter().map(|t| model.vocab.id(t)));
        if model.config.variant == Variant::Simple {
            if let Some(kb) = kb {
                for mention in [&instance.head_name, &instance.tail_name] {
                    for (concept, _) in kb.lookup(mention) {
                        ids.push(model.vocab.id(&concept));
                    }
                }
            }
        }
        ids.push(SEP);
    }
    if ids.len() > model.config.l_max {
        return Err(Error::Encode(format!(
            "joint pair sequence of {} tokens exceeds l_max {}",
            ids.len(),
            model.config.l_max
        )));
    }
    Ok(ids)
}

fn head_logit(g: &mut Graph, nodes: &ParamNodes, pooled: NodeId) -> NodeId {
    let hidden = g.matmul(pooled, nodes.head_w1);
    let act = g.gelu(hidden);
    let wx = g.matmul(act, nodes.head_w2);
    g.add(wx, nodes.head_b)
}

fn pool_fused_on(
    g: &mut Graph,
    fused: NodeId,
    pooling: Pooling,
    token_pad: &[bool],
) -> NodeId {
    match pooling {
        Pooling::Cls => g.select_row(fused, 0),
        Pooling::Mean => {
            let total = g.value(fused).nrows();
            let mut keep: Vec<bool> = token_pad.iter().map(|&p| !p).collect();
            keep.resize(total, true);
            g.mean_rows_masked(fused, keep)
        }
    }
}

/// The four pair entities in gating/appending order.
fn pair_entities<'a>(query: &'a Instance, support: &'a Instance) -> [(&'static str, &'a str); 4] {
    [
        ("query_head", query.head_name.as_str()),
        ("query_tail", query.tail_name.as_str()),
        ("support_head", support.head_name.as_str()),
        ("support_tail", support.tail_name.as_str()),
    ]
}

/// Build one pair's same-relation logit on the tape.
pub(crate) fn pair_logit_on(
    g: &mut Graph,
    nodes: &ParamNodes,
    query: &Instance,
    support: &Instance,
    model: &Model,
    kb: Option<&ConceptKb>,
    mut trace: Option<&mut PairTrace>,
) -> Result<NodeId> {
    let config = &model.config;
    let ids = pair_ids(query, support, model, kb)?;
    let (states, pad) = encoder::encode_on(g, &ids, &nodes.encoder);
    let v_s = encoder::pool_on(g, states, config.pooling, &pad);

    let fused_and_pool = |g: &mut Graph, slot_rows: &[NodeId], trace: &mut Option<&mut PairTrace>| {
        let (seq, _slots) = fusion::append_on(g, states, slot_rows, nodes.fusion.adapter);
        let (fused, weights) = fusion::fuse_on(g, seq, &nodes.fusion, &pad);
        if let Some(t) = trace.as_deref_mut() {
            let w = g.value(weights);
            t.attention = Some(AttentionTrace {
                rows: w.nrows(),
                weights: (0..w.nrows()).map(|r| w.row(r).to_vec()).collect(),
            });
        }
        pool_fused_on(g, fused, config.pooling, &pad)
    };

    let pooled = match config.variant {
        Variant::SentenceOnly | Variant::Simple => fused_and_pool(g, &[], &mut trace),
        Variant::Full => {
            let gate_config = GateConfig::new(config.alpha)?;
            let mut slot_rows = Vec::new();
            for (role, mention) in pair_entities(query, support) {
                let candidates = kb.map(|kb| kb.lookup(mention)).unwrap_or_default();
                let matrix = conceptgate::candidate_matrix(
                    &candidates.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
                );
                let selection = conceptgate::select_on(g, v_s, &matrix, &nodes.gate, gate_config);
                if let Some((_, scaled)) = selection.scaled {
                    slot_rows.push(scaled);
                }
                if let Some(t) = trace.as_deref_mut() {
                    t.gates.push(GateTraceEntry {
                        role,
                        entity: mention.to_owned(),
                        candidates: candidates.iter().map(|(c, _)| c.clone()).collect(),
                        decision: selection.decision,
                    });
                }
            }
            fused_and_pool(g, &slot_rows, &mut trace)
        }
        Variant::NoAtt => {
            let mut slot_rows = Vec::new();
            for (_, mention) in pair_entities(query, support) {
                let candidates = kb.map(|kb| kb.lookup(mention)).unwrap_or_default();
                for (_, vector) in candidates {
                    slot_rows.push(g.row(&vector));
                }
            }
            fused_and_pool(g, &slot_rows, &mut trace)
        }
        Variant::NoFusion => {
            let gate_config = GateConfig::new(config.alpha)?;
            let mut parts = vec![v_s];
            for (role, mention) in pair_entities(query, support) {
                let candidates = kb.map(|kb| kb.lookup(mention)).unwrap_or_default();
                let matrix = conceptgate::candidate_matrix(
                    &candidates.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
                );
                let selection = conceptgate::select_on(g, v_s, &matrix, &nodes.gate, gate_config);
                let slot = match selection.scaled {
                    Some((_, scaled)) => g.matmul(scaled, nodes.fusion.adapter),
                    None => g.input(Matrix::zeros((1, config.d))),
                };
                parts.push(slot);
                if let Some(t) = trace.as_deref_mut() {
                    t.gates.push(GateTraceEntry {
                        role,
                        entity: mention.to_owned(),
                        candidates: candidates.iter().map(|(c, _)| c.clone()).collect(),
                        decision: selection.decision,
                    });
                }
            }
            g.concat_cols(&parts)
        }
    };

    Ok(head_logit(g, nodes, pooled))
}

/// Same-relation score for one (query, support) pair.
pub fn pair_logit(
    query: &Instance,
    support: &Instance,
    model: &Model,
    kb: Option<&ConceptKb>,
) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, model);
    let logit = pair_logit_on(&mut g, &nodes, query, support, model, kb, None)?;
    Ok(g.scalar_value(logit))
}

/// Pair score plus gate decisions and fusion attention weights.
pub fn pair_logit_traced(
    query: &Instance,
    support: &Instance,
    model: &Model,
    kb: Option<&ConceptKb>,
) -> Result<(f64, PairTrace)> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, model);
    let mut trace = PairTrace::default();
    let logit = pair_logit_on(&mut g, &nodes, query, support, model, kb, Some(&mut trace))?;
    Ok((g.scalar_value(logit), trace))
}

/// Class logits, loss, and accuracy of a whole episode on one tape.
pub(crate) fn episode_loss_on(
    g: &mut Graph,
    nodes: &ParamNodes,
    episode: &Episode,
    model: &Model,
    kb: Option<&ConceptKb>,
) -> Result<(NodeId, EpisodeResult)> {
    let n = episode.classes.len();
    let mut ce_nodes = Vec::with_capacity(episode.queries.len());
    let mut logits = Vec::with_capacity(episode.queries.len());
    let mut predicted = Vec::with_capacity(episode.queries.len());
    let mut correct = 0usize;

    for (query, label) in &episode.queries {
        let mut class_logits = Vec::with_capacity(n);
        for support_group in &episode.support {
            let k = support_group.len();
            let mut pair_nodes = Vec::with_capacity(k);
            for support in support_group {
                pair_nodes.push(pair_logit_on(g, nodes, query, support, model, kb, None)?);
            }
            let mut agg = pair_nodes[0];
            for &p in &pair_nodes[1..] {
                agg = g.add(agg, p);
            }
            if model.config.aggregation == Aggregation::Mean && k > 1 {
                agg = g.scale(agg, 1.0 / k as f64);
            }
            class_logits.push(agg);
        }
        let row = g.concat_cols(&class_logits);
        let row_values = g.value(row).row(0).to_vec();
        let pred = argmax_lowest(&row_values);
        if pred == *label {
            correct += 1;
        }
        predicted.push(pred);
        logits.push(row_values);
        ce_nodes.push(g.cross_entropy(row, *label));
    }

    let mut total = ce_nodes[0];
    for &ce in &ce_nodes[1..] {
        total = g.add(total, ce);
    }
    let loss = g.scale(total, 1.0 / ce_nodes.len() as f64);
    let result = EpisodeResult {
        logits,
        predicted,
        loss: g.scalar_value(loss),
        accuracy: correct as f64 / episode.queries.len() as f64,
    };
    Ok((loss, result))
}

/// Forward-only episode scoring.
pub fn episode_forward(
    episode: &Episode,
    model: &Model,
    kb: Option<&ConceptKb>,
) -> Result<EpisodeResult> {
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, model);
    let (_, result) = episode_loss_on(&mut g, &nodes, episode, model, kb)?;
    Ok(result)
}

/// Argmax with ties broken toward the lowest index.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
