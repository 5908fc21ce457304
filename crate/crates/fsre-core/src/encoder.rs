//! Token vocabulary, entity marking, and the single-block transformer
//! encoder that stands in for a large pretrained model at desk scale.
//!
//! Layout of an encoded sentence: `[CLS] tokens-with-entity-markers [SEP]`.
//! The sentence embedding v_s is the state at the `[CLS]` position (mean
//! pooling over non-pad positions is available behind config).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, NodeId};
use crate::rng::gaussian_matrix;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const HEAD_OPEN: usize = 3;
pub const HEAD_CLOSE: usize = 4;
pub const TAIL_OPEN: usize = 5;
pub const TAIL_CLOSE: usize = 6;
pub const UNK: usize = 7;

pub const RESERVED: [&str; 8] = [
    "[PAD]", "[CLS]", "[SEP]", "[HEAD]", "[/HEAD]", "[TAIL]", "[/TAIL]", "[UNK]",
];

/// Injective token → id map with the reserved ids fixed up front.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens, then `extra` (e.g. concept strings), then corpus
    /// tokens, each block sorted and deduplicated.
    pub fn build<I, J>(corpus_tokens: I, extra: J) -> Vocab
    where
        I: IntoIterator<Item = String>,
        J: IntoIterator<Item = String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| (*s).to_owned()).collect();
        let mut seen: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for block in [extra.into_iter().collect::<Vec<_>>(), corpus_tokens.into_iter().collect()] {
            let mut block = block;
            block.sort();
            block.dedup();
            for t in block {
                if !seen.contains_key(&t) {
                    seen.insert(t.clone(), tokens.len());
                    tokens.push(t);
                }
            }
        }
        Vocab { ids: seen, tokens }
    }

    /// Rebuild from an id-ordered token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < RESERVED.len()
            || RESERVED.iter().zip(&tokens).any(|(r, t)| r != t)
        {
            return Err(Error::Checkpoint(
                "vocabulary does not start with the reserved tokens".into(),
            ));
        }
        let ids: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if ids.len() != tokens.len() {
            return Err(Error::Checkpoint("duplicate token in vocabulary".into()));
        }
        Ok(Vocab { ids, tokens })
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// All trainable encoder tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// |V| × d token embeddings.
    pub tok: Matrix,
    /// L_max × d positional embeddings.
    pub pos: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// d × d_ff and d_ff × d feed-forward maps.
    pub w1: Matrix,
    pub w2: Matrix,
}

impl EncoderParams {
    pub fn init<R: Rng>(vocab_size: usize, d: usize, d_ff: usize, l_max: usize, rng: &mut R) -> Self {
        let attn_std = 1.0 / (d as f64).sqrt();
        let ff_std = 1.0 / (d_ff as f64).sqrt();
        EncoderParams {
            tok: gaussian_matrix(vocab_size, d, 0.1, rng),
            pos: gaussian_matrix(l_max, d, 0.1, rng),
            wq: gaussian_matrix(d, d, attn_std, rng),
            wk: gaussian_matrix(d, d, attn_std, rng),
            wv: gaussian_matrix(d, d, attn_std, rng),
            wo: gaussian_matrix(d, d, attn_std, rng),
            w1: gaussian_matrix(d, d_ff, attn_std, rng),
            w2: gaussian_matrix(d_ff, d, ff_std, rng),
        }
    }

    pub fn zeros(vocab_size: usize, d: usize, d_ff: usize, l_max: usize) -> Self {
        EncoderParams {
            tok: Matrix::zeros((vocab_size, d)),
            pos: Matrix::zeros((l_max, d)),
            wq: Matrix::zeros((d, d)),
            wk: Matrix::zeros((d, d)),
            wv: Matrix::zeros((d, d)),
            wo: Matrix::zeros((d, d)),
            w1: Matrix::zeros((d, d_ff)),
            w2: Matrix::zeros((d_ff, d)),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.nrows()
    }

    pub fn l_max(&self) -> usize {
        self.pos.nrows()
    }

    pub fn register(&self, g: &mut Graph) -> EncoderNodes {
        EncoderNodes {
            tok: g.param(self.tok.clone()),
            pos: g.param(self.pos.clone()),
            wq: g.param(self.wq.clone()),
            wk: g.param(self.wk.clone()),
            wv: g.param(self.wv.clone()),
            wo: g.param(self.wo.clone()),
            w1: g.param(self.w1.clone()),
            w2: g.param(self.w2.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub tok: NodeId,
    pub pos: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
}

/// Per-token states plus the pooled sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub token_states: Matrix,
    pub sentence_embedding: Vec<f64>,
}

/// Sentence pooling for v_s and for the post-fusion representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

/// Instance tokens with `[HEAD]`/`[/HEAD]` and `[TAIL]`/`[/TAIL]` markers
/// inserted around the entity spans. Also returns the index just past the
/// last marker, i.e. the prefix that truncation must preserve.
pub fn mark_tokens(instance: &Instance) -> (Vec<String>, usize) {
    let n = instance.tokens.len();
    let mut out = Vec::with_capacity(n + 4);
    let mut last_marker_end = 0;
    for i in 0..=n {
        // Closes before opens so adjacent spans nest correctly.
        if instance.head_span.end == i {
            out.push(RESERVED[HEAD_CLOSE].to_owned());
            last_marker_end = out.len();
        }
        if instance.tail_span.end == i {
            out.push(RESERVED[TAIL_CLOSE].to_owned());
            last_marker_end = out.len();
        }
        if instance.head_span.start == i {
            out.push(RESERVED[HEAD_OPEN].to_owned());
        }
        if instance.tail_span.start == i {
            out.push(RESERVED[TAIL_OPEN].to_owned());
        }
        if i < n {
            out.push(instance.tokens[i].clone());
        }
    }
    (out, last_marker_end)
}

/// `[CLS] marked-tokens [SEP]` as vocabulary ids, truncated to `l_max` by
/// dropping trailing tokens after the last entity marker. Errors when the
/// marked spans themselves cannot fit.
pub fn tokenize_and_mark(instance: &Instance, vocab: &Vocab, l_max: usize) -> Result<Vec<usize>> {
    instance.validate("tokenize_and_mark")?;
    let (marked, last_marker_end) = mark_tokens(instance);
    let full = marked.len() + 2;
    let keep = if full <= l_max {
        marked.len()
    } else {
        if last_marker_end + 2 > l_max {
            return Err(Error::Encode(format!(
                "marked spans need {} positions but l_max is {l_max}",
                last_marker_end + 2
            )));
        }
        l_max - 2
    };
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend(marked[..keep].iter().map(|t| vocab.id(t)));
    ids.push(SEP);
    Ok(ids)
}

/// Single transformer block on the tape: embeddings, masked self-attention
/// with a residual, GELU feed-forward with a residual. Returns the token
/// states node and the pad mask.
pub fn encode_on(
    g: &mut Graph,
    ids: &[usize],
    nodes: &EncoderNodes,
) -> (NodeId, Vec<bool>) {
    let d = g.value(nodes.wq).nrows();
    let l_max = g.value(nodes.pos).nrows();
    assert!(ids.len() <= l_max, "sequence length {} exceeds l_max {l_max}", ids.len());
    let pad_mask: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    // A degenerate all-pad sequence has no live key; attend uniformly instead
    // of excluding every column.
    let key_mask = if pad_mask.iter().all(|&b| b) {
        vec![false; ids.len()]
    } else {
        pad_mask.clone()
    };

    let tok = g.embedding(ids, nodes.tok);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embedding(&positions, nodes.pos);
    let x = g.add(tok, pos);

    let q = g.matmul(x, nodes.wq);
    let k = g.matmul(x, nodes.wk);
    let v = g.matmul(x, nodes.wv);
    let scores = g.matmul_nt(q, k);
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_rows_masked(scaled, key_mask);
    let mixed = g.matmul(weights, v);
    let projected = g.matmul(mixed, nodes.wo);
    let h = g.add(x, projected);

    let ff_in = g.matmul(h, nodes.w1);
    let ff_act = g.gelu(ff_in);
    let ff_out = g.matmul(ff_act, nodes.w2);
    let out = g.add(h, ff_out);
    (out, pad_mask)
}

/// Pool a states node into v_s.
pub fn pool_on(g: &mut Graph, states: NodeId, pooling: Pooling, pad_mask: &[bool]) -> NodeId {
    match pooling {
        Pooling::Cls => g.select_row(states, 0),
        Pooling::Mean => {
            let keep: Vec<bool> = pad_mask.iter().map(|&p| !p).collect();
            g.mean_rows_masked(states, keep)
        }
    }
}

/// Pure forward pass; v_s is the `[CLS]` state.
pub fn encode(ids: &[usize], params: &EncoderParams) -> Encoding {
    encode_pooled(ids, params, Pooling::Cls)
}

pub fn encode_pooled(ids: &[usize], params: &EncoderParams, pooling: Pooling) -> Encoding {
    let mut g = Graph::new();
    let nodes = params.register(&mut g);
    let (states, pad_mask) = encode_on(&mut g, ids, &nodes);
    let pooled = pool_on(&mut g, states, pooling, &pad_mask);
    Encoding {
        token_states: g.value(states).clone(),
        sentence_embedding: g.value(pooled).row(0).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Span;
    use crate::rng::{substream, Stream};

    fn instance(tokens: &[&str], head: (usize, usize), tail: (usize, usize)) -> Instance {
        Instance {
            tokens: tokens.iter().map(|s| (*s).to_owned()).collect(),
            head_span: Span::new(head.0, head.1),
            tail_span: Span::new(tail.0, tail.1),
            head_name: tokens[head.0].to_owned(),
            tail_name: tokens[tail.0].to_owned(),
            relation: "r".into(),
        }
    }

    fn tiny_vocab() -> Vocab {
        Vocab::build(
            ["alpha", "beta", "gamma", "delta", "eps"].map(String::from),
            std::iter::empty(),
        )
    }

    #[test]
    fn reserved_ids_are_stable_and_distinct() {
        let v = tiny_vocab();
        for (i, tok) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(tok), i);
        }
        assert_eq!(v.id("alpha"), 8);
    }

    #[test]
    fn marked_sequence_has_expected_length() {
        // 5 tokens + 4 markers + [CLS] + [SEP] = 11
        let inst = instance(&["alpha", "beta", "gamma", "delta", "eps"], (0, 1), (3, 4));
        let ids = tokenize_and_mark(&inst, &tiny_vocab(), 32).unwrap();
        assert_eq!(ids.len(), 11);
        assert_eq!(ids[0], CLS);
        assert_eq!(*ids.last().unwrap(), SEP);
        assert_eq!(ids[1], HEAD_OPEN);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let inst = instance(&["alpha", "mystery", "gamma"], (0, 1), (2, 3));
        let ids = tokenize_and_mark(&inst, &tiny_vocab(), 32).unwrap();
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn truncation_that_would_cut_a_span_is_an_error() {
        let inst = instance(&["alpha", "beta", "gamma", "delta", "eps"], (0, 1), (3, 4));
        let err = tokenize_and_mark(&inst, &tiny_vocab(), 8).unwrap_err();
        assert!(err.to_string().contains("l_max"));
    }

    #[test]
    fn trailing_tokens_after_last_marker_are_dropped() {
        let inst = instance(&["alpha", "beta", "gamma", "delta", "eps"], (0, 1), (1, 2));
        // marked: [HEAD] alpha [/HEAD] [TAIL] beta [/TAIL] gamma delta eps → 9
        let ids = tokenize_and_mark(&inst, &tiny_vocab(), 10).unwrap();
        assert_eq!(ids.len(), 10);
        assert_eq!(ids[ids.len() - 2], tiny_vocab().id("delta"));
        assert!(!ids.contains(&tiny_vocab().id("eps")));
    }

    #[test]
    fn zero_params_give_zero_states_on_pad_input() {
        let params = EncoderParams::zeros(16, 4, 8, 8);
        let enc = encode(&[PAD, PAD, PAD], &params);
        assert!(enc.token_states.iter().all(|&x| x == 0.0));
        assert!(enc.sentence_embedding.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_cls_sentence_embedding_is_that_state() {
        let mut rng = substream(1, Stream::Init);
        let params = EncoderParams::init(16, 4, 8, 8, &mut rng);
        let enc = encode(&[CLS], &params);
        assert_eq!(enc.token_states.nrows(), 1);
        assert_eq!(enc.sentence_embedding, enc.token_states.row(0).to_vec());
    }

    /// Straight-line forward oracle: no tape, plain loops.
    fn forward_oracle(ids: &[usize], p: &EncoderParams) -> Matrix {
        let t = ids.len();
        let d = p.d();
        let mut x = Matrix::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..d {
                x[[i, c]] = p.tok[[id, c]] + p.pos[[i, c]];
            }
        }
        let q = x.dot(&p.wq);
        let k = x.dot(&p.wk);
        let v = x.dot(&p.wv);
        let mut attn = Matrix::zeros((t, t));
        for i in 0..t {
            let mut row = vec![0.0; t];
            for j in 0..t {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[[i, c]] * k[[j, c]];
                }
                row[j] = dot / (d as f64).sqrt();
            }
            let mut weights = vec![0.0; t];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..t {
                if ids[j] != PAD {
                    weights[j] = (row[j] - max).exp();
                    sum += weights[j];
                }
            }
            for j in 0..t {
                attn[[i, j]] = weights[j] / sum;
            }
        }
        let h = &x + &attn.dot(&v).dot(&p.wo);
        let mut act = h.dot(&p.w1);
        for e in act.iter_mut() {
            let u = 0.797_884_560_802_865_4 * (*e + 0.044715 * *e * *e * *e);
            *e = 0.5 * *e * (1.0 + u.tanh());
        }
        &h + &act.dot(&p.w2)
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let mut rng = substream(7, Stream::Init);
        let params = EncoderParams::init(16, 4, 8, 8, &mut rng);
        let ids = [CLS, 8, 9, SEP];
        let enc = encode(&ids, &params);
        let oracle = forward_oracle(&ids, &params);
        for (a, b) in enc.token_states.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn pad_suffix_permutation_leaves_v_s_unchanged() {
        // All-pad suffixes differ only in positional embeddings of masked
        // positions; masking must keep v_s identical.
        let mut rng = substream(3, Stream::Init);
        let mut params = EncoderParams::init(16, 4, 8, 12, &mut rng);
        // Make pad rows distinctive so a masking bug would show.
        for c in 0..4 {
            params.tok[[PAD, c]] = 5.0;
        }
        let base = [CLS, 8, 9, SEP, PAD, PAD, PAD];
        let enc1 = encode(&base, &params);
        // "Permute" the pad suffix by rotating positional assignment: encode
        // a shorter and a longer pad tail.
        let enc2 = encode(&[CLS, 8, 9, SEP, PAD, PAD, PAD, PAD, PAD], &params);
        for (a, b) in enc1.sentence_embedding.iter().zip(&enc2.sentence_embedding) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_is_pure() {
        let mut rng = substream(4, Stream::Init);
        let params = EncoderParams::init(16, 4, 8, 8, &mut rng);
        let ids = [CLS, 8, 10, SEP];
        assert_eq!(encode(&ids, &params), encode(&ids, &params));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = substream(11, Stream::Init);
        let params = EncoderParams::init(12, 4, 8, 8, &mut rng);
        let ids = [CLS, 8, 9, 10, SEP];

        let loss = |p: &EncoderParams| -> f64 {
            let mut g = Graph::new();
            let nodes = p.register(&mut g);
            let (states, pad) = encode_on(&mut g, &ids, &nodes);
            let pooled = pool_on(&mut g, states, Pooling::Mean, &pad);
            let lse = g.log_sum_exp_row(pooled);
            g.scalar_value(lse)
        };

        let mut g = Graph::new();
        let nodes = params.register(&mut g);
        let (states, pad) = encode_on(&mut g, &ids, &nodes);
        let pooled = pool_on(&mut g, states, Pooling::Mean, &pad);
        let lse = g.log_sum_exp_row(pooled);
        let grads = g.backward(lse);

        let eps = 1e-6;
        for (name, node, tensor) in [
            ("tok", nodes.tok, &params.tok),
            ("pos", nodes.pos, &params.pos),
            ("wq", nodes.wq, &params.wq),
            ("wk", nodes.wk, &params.wk),
            ("wv", nodes.wv, &params.wv),
            ("wo", nodes.wo, &params.wo),
            ("w1", nodes.w1, &params.w1),
            ("w2", nodes.w2, &params.w2),
        ] {
            fn field<'a>(p: &'a mut EncoderParams, name: &str) -> &'a mut Matrix {
                match name {
                    "tok" => &mut p.tok,
                    "pos" => &mut p.pos,
                    "wq" => &mut p.wq,
                    "wk" => &mut p.wk,
                    "wv" => &mut p.wv,
                    "wo" => &mut p.wo,
                    "w1" => &mut p.w1,
                    _ => &mut p.w2,
                }
            }
            let analytic = grads.get(node).unwrap();
            let (rows, cols) = tensor.dim();
            for r in 0..rows {
                for c in 0..cols {
                    let mut p2 = params.clone();
                    field(&mut p2, name)[[r, c]] += eps;
                    let plus = loss(&p2);
                    field(&mut p2, name)[[r, c]] -= 2.0 * eps;
                    let minus = loss(&p2);
                    let numeric = (plus - minus) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-4,
                        "{name}[{r},{c}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }
}
