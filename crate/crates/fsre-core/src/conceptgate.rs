//! Concept-sentence attention with a hard 01-gate.
//!
//! Candidate concept vectors and the sentence embedding are projected into a
//! shared space (two matrices, which reduces to the shared-matrix reading
//! when the dimensions agree), scored by dot product, softmax-normalized, and
//! thresholded: a concept is selected only when its normalized score reaches
//! α (ties at exactly α pass). Since the scores sum to one, α > 0.5 admits at
//! most one concept. The hard mask is not differentiable, so the selected
//! concept vector is scaled by its soft score on the forward path, which is
//! what lets gradients reach the projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, NodeId};
use crate::rng::gaussian_matrix;

/// Concept-side and sentence-side projections into the shared d_p space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    /// d_c × d_p
    pub p_c: Matrix,
    /// d_s × d_p
    pub p_s: Matrix,
}

impl ProjectionParams {
    pub fn init<R: Rng>(d_c: usize, d_s: usize, d_p: usize, rng: &mut R) -> Self {
        // Generous scale keeps initial gate softmaxes decisive enough that
        // some concepts clear the threshold and the projections get gradient.
        let std_c = 1.0 / (d_c as f64).sqrt();
        let std_s = 1.0 / (d_s as f64).sqrt();
        ProjectionParams {
            p_c: gaussian_matrix(d_c, d_p, 4.0 * std_c, rng),
            p_s: gaussian_matrix(d_s, d_p, 4.0 * std_s, rng),
        }
    }

    pub fn register(&self, g: &mut Graph) -> ProjectionNodes {
        ProjectionNodes {
            p_c: g.param(self.p_c.clone()),
            p_s: g.param(self.p_s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionNodes {
    pub p_c: NodeId,
    pub p_s: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    /// Threshold α in (0, 1].
    pub alpha: f64,
}

impl GateConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
        }
        Ok(GateConfig { alpha })
    }
}

/// Softmax scores over an entity's candidate concepts plus the binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    /// Highest-scoring passing concept (lowest index on ties); set iff the
    /// mask has any bit.
    pub selected: Option<usize>,
}

impl GateDecision {
    pub fn empty() -> Self {
        GateDecision {
            scores: Vec::new(),
            mask: Vec::new(),
            selected: None,
        }
    }

    fn from_scores(scores: Vec<f64>, alpha: f64) -> Self {
        let mask: Vec<bool> = scores.iter().map(|&s| s >= alpha).collect();
        let mut selected = None;
        let mut best = f64::NEG_INFINITY;
        for (i, (&s, &m)) in scores.iter().zip(&mask).enumerate() {
            if m && s > best {
                best = s;
                selected = Some(i);
            }
        }
        GateDecision {
            scores,
            mask,
            selected,
        }
    }
}

/// Raw similarity scores on the tape: `sim_cs[i] = (v_c[i]·P_c)·(v_s·P_s)`.
/// Returns a 1×n node.
pub fn similarity_on(
    g: &mut Graph,
    v_s: NodeId,
    candidates: NodeId,
    params: &ProjectionNodes,
) -> NodeId {
    let proj_c = g.matmul(candidates, params.p_c);
    let proj_s = g.matmul(v_s, params.p_s);
    g.matmul_nt(proj_s, proj_c)
}

/// A gate evaluation on the tape plus the host-side decision.
pub struct GateSelection {
    pub decision: GateDecision,
    /// `(candidate index, node)` of the selected concept's soft-scaled
    /// vector (score × v_c, a 1×d_c row).
    pub scaled: Option<(usize, NodeId)>,
}

/// Score, normalize, and threshold one entity's candidates against v_s.
pub fn select_on(
    g: &mut Graph,
    v_s: NodeId,
    candidates: &Matrix,
    params: &ProjectionNodes,
    config: GateConfig,
) -> GateSelection {
    if candidates.nrows() == 0 {
        return GateSelection {
            decision: GateDecision::empty(),
            scaled: None,
        };
    }
    let cands = g.input(candidates.clone());
    let sims = similarity_on(g, v_s, cands, params);
    let scores = g.softmax_rows(sims);
    let decision = GateDecision::from_scores(g.value(scores).row(0).to_vec(), config.alpha);
    let scaled = decision.selected.map(|i| {
        let row = g.select_row(cands, i);
        let score = g.select_col(scores, i);
        (i, g.mul_scalar(row, score))
    });
    GateSelection { decision, scaled }
}

pub(crate) fn candidate_matrix(concepts: &[Vec<f64>]) -> Matrix {
    if concepts.is_empty() {
        return Matrix::zeros((0, 0));
    }
    let d_c = concepts[0].len();
    let mut m = Matrix::zeros((concepts.len(), d_c));
    for (r, v) in concepts.iter().enumerate() {
        assert_eq!(v.len(), d_c, "candidate vectors must share a dimension");
        for (c, &x) in v.iter().enumerate() {
            m[[r, c]] = x;
        }
    }
    m
}

/// Raw (pre-softmax) concept-sentence similarities. Empty candidate list
/// yields an empty vector.
pub fn similarity(v_s: &[f64], concepts: &[Vec<f64>], params: &ProjectionParams) -> Vec<f64> {
    if concepts.is_empty() {
        return Vec::new();
    }
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let v = g.row(v_s);
    let cands = g.input(candidate_matrix(concepts));
    let sims = similarity_on(&mut g, v, cands, &nodes);
    g.value(sims).row(0).to_vec()
}

/// Softmax-normalize raw scores and apply the 01-gate.
pub fn gate(sim_cs: &[f64], config: GateConfig) -> GateDecision {
    if sim_cs.is_empty() {
        return GateDecision::empty();
    }
    let mut g = Graph::new();
    let sims = g.row(sim_cs);
    let scores = g.softmax_rows(sims);
    GateDecision::from_scores(g.value(scores).row(0).to_vec(), config.alpha)
}

/// One gated side of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct SideSelection {
    pub decision: GateDecision,
    /// Soft-scaled selected concept vector (score × v_c); None when the gate
    /// passed nothing.
    pub selected_vector: Option<Vec<f64>>,
}

/// Gate head and tail candidate lists independently against the same v_s.
/// A side with no candidates yields `None`.
pub fn select_concepts(
    v_s: &[f64],
    head_concepts: &[Vec<f64>],
    tail_concepts: &[Vec<f64>],
    params: &ProjectionParams,
    config: GateConfig,
) -> (Option<SideSelection>, Option<SideSelection>) {
    let side = |concepts: &[Vec<f64>]| -> Option<SideSelection> {
        if concepts.is_empty() {
            return None;
        }
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let v = g.row(v_s);
        let selection = select_on(&mut g, v, &candidate_matrix(concepts), &nodes, config);
        let selected_vector = selection
            .scaled
            .map(|(_, node)| g.value(node).row(0).to_vec());
        Some(SideSelection {
            decision: selection.decision,
            selected_vector,
        })
    };
    (side(head_concepts), side(tail_concepts))
}
