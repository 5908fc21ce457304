//! Word-level semantic fusion.
//!
//! Selected concept vectors are mapped into encoder space by a learned
//! adapter and appended after the token states; a single self-attention pass
//! then mixes every position with every other:
//! `fused_i = Σ_j softmax_j(q_i·k_j / √d) v_j` with q, k, v linear in the
//! input rows. There are no positional terms inside fusion, so it is
//! equivariant under row permutation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::Pooling;
use crate::graph::{Graph, Matrix, NodeId};
use crate::rng::gaussian_matrix;

/// Concept adapter plus the fusion attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// d_c × d map from concept space into encoder space.
    pub adapter: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl FusionParams {
    pub fn init<R: Rng>(d_c: usize, d: usize, rng: &mut R) -> Self {
        let std_a = 1.0 / (d_c as f64).sqrt();
        let std_w = 1.0 / (d as f64).sqrt();
        FusionParams {
            adapter: gaussian_matrix(d_c, d, 2.0 * std_a, rng),
            wq: gaussian_matrix(d, d, std_w, rng),
            wk: gaussian_matrix(d, d, std_w, rng),
            wv: gaussian_matrix(d, d, std_w, rng),
        }
    }

    pub fn register(&self, g: &mut Graph) -> FusionNodes {
        FusionNodes {
            adapter: g.param(self.adapter.clone()),
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub adapter: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Fused states with bookkeeping for the appended concept rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSequence {
    /// (L + m) × d
    pub states: Matrix,
    /// Row indices of the appended concept slots.
    pub concept_slots: Vec<usize>,
    /// Pad positions carried over from the encoder (concept slots are never
    /// padding).
    pub pad_mask: Vec<bool>,
}

/// Attention weights of one fusion pass, for inspection dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub rows: usize,
    pub weights: Vec<Vec<f64>>,
}

/// Adapt raw concept rows (1×d_c nodes) and append them after the token
/// states. Returns the pre-fusion sequence node and the slot indices.
pub fn append_on(
    g: &mut Graph,
    token_states: NodeId,
    concept_rows: &[NodeId],
    adapter: NodeId,
) -> (NodeId, Vec<usize>) {
    let base = g.value(token_states).nrows();
    if concept_rows.is_empty() {
        return (token_states, Vec::new());
    }
    let mut parts = vec![token_states];
    let mut slots = Vec::with_capacity(concept_rows.len());
    for (i, &row) in concept_rows.iter().enumerate() {
        parts.push(g.matmul(row, adapter));
        slots.push(base + i);
    }
    (g.concat_rows(&parts), slots)
}

/// Self-attention per the fusion rule. `pad_mask` covers the token positions;
/// appended slots are always live keys. Returns the fused node and the
/// attention weight node.
pub fn fuse_on(
    g: &mut Graph,
    seq: NodeId,
    params: &FusionNodes,
    pad_mask: &[bool],
) -> (NodeId, NodeId) {
    let total = g.value(seq).nrows();
    let d = g.value(params.wq).nrows();
    let mut masked = pad_mask.to_vec();
    masked.resize(total, false);

    let q = g.matmul(seq, params.wq);
    let k = g.matmul(seq, params.wk);
    let v = g.matmul(seq, params.wv);
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows_masked(scaled, masked);
    (g.matmul(weights, v), weights)
}

/// Pure-function form of the fusion pass over an already-assembled sequence.
pub fn fuse(seq: &Matrix, params: &FusionParams) -> FusedSequence {
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let input = g.input(seq.clone());
    let pad = vec![false; seq.nrows()];
    let (fused, _) = fuse_on(&mut g, input, &nodes, &pad);
    FusedSequence {
        states: g.value(fused).clone(),
        concept_slots: Vec::new(),
        pad_mask: pad,
    }
}

/// Adapt and append optional head/tail concept vectors (head first), then
/// return the pre-fusion sequence and slot indices.
pub fn append_concepts(
    token_states: &Matrix,
    head_vec: Option<&[f64]>,
    tail_vec: Option<&[f64]>,
    params: &FusionParams,
) -> (Matrix, Vec<usize>) {
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let states = g.input(token_states.clone());
    let rows: Vec<NodeId> = [head_vec, tail_vec]
        .into_iter()
        .flatten()
        .map(|v| g.row(v))
        .collect();
    let (seq, slots) = append_on(&mut g, states, &rows, nodes.adapter);
    (g.value(seq).clone(), slots)
}

/// Pool the fused sequence into the classification vector.
pub fn pool_fused(fused: &FusedSequence, pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Cls => fused.states.row(0).to_vec(),
        Pooling::Mean => {
            let keep: Vec<usize> = (0..fused.states.nrows())
                .filter(|&r| !fused.pad_mask.get(r).copied().unwrap_or(false))
                .collect();
            let mut out = vec![0.0; fused.states.ncols()];
            for &r in &keep {
                for (o, x) in out.iter_mut().zip(fused.states.row(r)) {
                    *o += x;
                }
            }
            for o in &mut out {
                *o /= keep.len() as f64;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = substream(seed, Stream::Init);
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn identity_fusion(d: usize) -> FusionParams {
        FusionParams {
            adapter: Matrix::eye(d),
            wq: Matrix::eye(d),
            wk: Matrix::eye(d),
            wv: Matrix::eye(d),
        }
    }

    /// Brute-force double-loop oracle for the fusion rule.
    fn fusion_oracle(seq: &Matrix, params: &FusionParams) -> Matrix {
        let t = seq.nrows();
        let d = seq.ncols();
        let q = seq.dot(&params.wq);
        let k = seq.dot(&params.wk);
        let v = seq.dot(&params.wv);
        let mut out = Matrix::zeros((t, d));
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[[i, c]] * k[[j, c]];
                }
                logits[j] = dot / (d as f64).sqrt();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                let w = exps[j] / sum;
                for c in 0..d {
                    out[[i, c]] += w * v[[j, c]];
                }
            }
        }
        out
    }

    #[test]
    fn append_both_concepts_adds_two_rows() {
        let mut rng = substream(1, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let states = random_matrix(11, 4, 2);
        let head = vec![0.1, 0.2, 0.3];
        let tail = vec![-0.5, 0.4, 0.0];
        let (seq, slots) = append_concepts(&states, Some(&head), Some(&tail), &params);
        assert_eq!(seq.nrows(), 13);
        assert_eq!(slots, vec![11, 12]);
    }

    #[test]
    fn append_nothing_is_identity() {
        let mut rng = substream(3, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let states = random_matrix(5, 4, 4);
        let (seq, slots) = append_concepts(&states, None, None, &params);
        assert_eq!(seq, states);
        assert!(slots.is_empty());
    }

    #[test]
    fn identity_adapter_appends_raw_vector() {
        let params = identity_fusion(4);
        let states = random_matrix(3, 4, 5);
        let head = vec![0.9, -0.1, 0.4, 0.2];
        let (seq, slots) = append_concepts(&states, Some(&head), None, &params);
        assert_eq!(slots, vec![3]);
        assert_eq!(seq.row(3).to_vec(), head);
    }

    #[test]
    fn singleton_row_with_identity_values_is_unchanged() {
        let params = identity_fusion(4);
        let seq = random_matrix(1, 4, 6);
        let fused = fuse(&seq, &params);
        for (a, b) in fused.states.iter().zip(seq.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_fuse_to_their_value_projection() {
        let mut rng = substream(7, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let row = random_matrix(1, 4, 8);
        let seq = Matrix::from_shape_fn((5, 4), |(_, c)| row[[0, c]]);
        let fused = fuse(&seq, &params);
        let expected = row.dot(&params.wv);
        for r in 0..5 {
            for c in 0..4 {
                assert!((fused.states[[r, c]] - expected[[0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_matches_double_loop_oracle() {
        let mut rng = substream(9, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let seq = random_matrix(3, 4, 10);
        let fused = fuse(&seq, &params);
        let oracle = fusion_oracle(&seq, &params);
        for (a, b) in fused.states.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = substream(11, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let seq = random_matrix(6, 4, 12);
        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let input = g.input(seq);
        let (_, weights) = fuse_on(&mut g, input, &nodes, &[false; 6]);
        for r in 0..6 {
            let sum: f64 = g.value(weights).row(r).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cls_pooling_returns_first_row() {
        let states = random_matrix(4, 3, 13);
        let fused = FusedSequence {
            pad_mask: vec![false; 4],
            concept_slots: vec![],
            states: states.clone(),
        };
        assert_eq!(pool_fused(&fused, Pooling::Cls), states.row(0).to_vec());
    }

    #[test]
    fn mean_pooling_of_identical_rows_is_that_row() {
        let row = vec![0.4, -0.2, 0.9];
        let states = Matrix::from_shape_fn((5, 3), |(_, c)| row[c]);
        let fused = FusedSequence {
            pad_mask: vec![false; 5],
            concept_slots: vec![],
            states,
        };
        let pooled = pool_fused(&fused, Pooling::Mean);
        for (a, b) in pooled.iter().zip(&row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_and_mean_pooling_differ_on_random_input() {
        let states = random_matrix(4, 3, 14);
        let fused = FusedSequence {
            pad_mask: vec![false; 4],
            concept_slots: vec![],
            states: states.clone(),
        };
        let cls = pool_fused(&fused, Pooling::Cls);
        let mean = pool_fused(&fused, Pooling::Mean);
        // Direct-computation oracle for both.
        assert_eq!(cls, states.row(0).to_vec());
        let diff: f64 = cls.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "rows are random, pools must differ");
    }

    #[test]
    fn mean_pooling_skips_pad_rows() {
        let states = random_matrix(4, 3, 15);
        let fused = FusedSequence {
            pad_mask: vec![false, false, true, true],
            concept_slots: vec![],
            states: states.clone(),
        };
        let pooled = pool_fused(&fused, Pooling::Mean);
        for c in 0..3 {
            let expected = (states[[0, c]] + states[[1, c]]) / 2.0;
            assert!((pooled[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut rng = substream(16, Stream::Init);
        let params = FusionParams::init(3, 4, &mut rng);
        let states = random_matrix(3, 4, 17);
        let concept = vec![0.2, -0.6, 0.9];

        let loss = |p: &FusionParams| -> f64 {
            let mut g = Graph::new();
            let nodes = p.register(&mut g);
            let input = g.input(states.clone());
            let row = g.row(&concept);
            let (seq, _) = append_on(&mut g, input, &[row], nodes.adapter);
            let (fused, _) = fuse_on(&mut g, seq, &nodes, &[false; 3]);
            let pooled = g.mean_rows(fused);
            let lse = g.log_sum_exp_row(pooled);
            g.scalar_value(lse)
        };

        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let input = g.input(states.clone());
        let row = g.row(&concept);
        let (seq, _) = append_on(&mut g, input, &[row], nodes.adapter);
        let (fused, _) = fuse_on(&mut g, seq, &nodes, &[false; 3]);
        let pooled = g.mean_rows(fused);
        let lse = g.log_sum_exp_row(pooled);
        let grads = g.backward(lse);

        let eps = 1e-6;
        for which in ["adapter", "wq", "wk", "wv"] {
            let node = match which {
                "adapter" => nodes.adapter,
                "wq" => nodes.wq,
                "wk" => nodes.wk,
                _ => nodes.wv,
            };
            fn field<'a>(p: &'a mut FusionParams, which: &str) -> &'a mut Matrix {
                match which {
                    "adapter" => &mut p.adapter,
                    "wq" => &mut p.wq,
                    "wk" => &mut p.wk,
                    _ => &mut p.wv,
                }
            }
            let analytic = grads.get(node).unwrap().clone();
            let (rows, cols) = analytic.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut p2 = params.clone();
                    field(&mut p2, which)[[r, c]] += eps;
                    let plus = loss(&p2);
                    field(&mut p2, which)[[r, c]] -= 2.0 * eps;
                    let minus = loss(&p2);
                    let numeric = (plus - minus) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{which}[{r},{c}]: {a} vs {numeric}"
                    );
                }
            }
        }
    }

    proptest! {
        /// Permuting input rows permutes fused rows identically.
        #[test]
        fn row_permutation_equivariance(seed in 0u64..500, rows in 2usize..6) {
            let params = {
                let mut rng = substream(seed, Stream::Init);
                FusionParams::init(3, 4, &mut rng)
            };
            let seq = random_matrix(rows, 4, seed.wrapping_add(1000));
            let fused = fuse(&seq, &params);
            // Reverse as a representative permutation.
            let mut reversed = Matrix::zeros((rows, 4));
            for r in 0..rows {
                for c in 0..4 {
                    reversed[[r, c]] = seq[[rows - 1 - r, c]];
                }
            }
            let fused_rev = fuse(&reversed, &params);
            for r in 0..rows {
                for c in 0..4 {
                    let a = fused.states[[rows - 1 - r, c]];
                    let b = fused_rev.states[[r, c]];
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
