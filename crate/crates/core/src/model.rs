//! The snippet-level network: attention blocks that read the prototype
//! memory, a feature embedding, and the classification / attention heads.
//!
//! Each attention block projects the snippet features to queries and the
//! concatenation of snippet features and class prototypes to keys/values,
//! applies a single-head scaled dot-product attention, and finishes with a
//! residual + layer norm and a GELU feed-forward + residual + layer norm.
//! Prototype rows get no positional treatment.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Dense layer parameters; `w` is in x out, `b` is 1 x out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: Matrix::from_shape_fn((fan_in, fan_out), |_| rng.gen_range(-limit..limit)),
            b: Matrix::zeros((1, fan_out)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Linear {
            w: Matrix::eye(dim),
            b: Matrix::zeros((1, dim)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Matrix::zeros((fan_in, fan_out)),
            b: Matrix::zeros((1, fan_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Matrix::ones((1, dim)),
            beta: Matrix::zeros((1, dim)),
        }
    }
}

/// One reliability-aware attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabBlock {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_attn: LayerNorm,
    pub ln_ff: LayerNorm,
}

impl RabBlock {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        RabBlock {
            query: Linear::xavier(rng, d, d),
            key: Linear::xavier(rng, d, d),
            value: Linear::xavier(rng, d, d),
            ff1: Linear::xavier(rng, d, 4 * d),
            ff2: Linear::xavier(rng, 4 * d, d),
            ln_attn: LayerNorm::new(d),
            ln_ff: LayerNorm::new(d),
        }
    }

    /// Identity-projection block with a zero feed-forward, used by tests that
    /// hand-evaluate the attention arithmetic.
    pub fn identity(d: usize) -> Self {
        RabBlock {
            query: Linear::identity(d),
            key: Linear::identity(d),
            value: Linear::identity(d),
            ff1: Linear::zeros(d, 4 * d),
            ff2: Linear::zeros(4 * d, d),
            ln_attn: LayerNorm::new(d),
            ln_ff: LayerNorm::new(d),
        }
    }
}

/// Stage-1 parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetNet {
    pub blocks: Vec<RabBlock>,
    pub embed: Linear,
    pub classifier: Linear,
    pub attention: Linear,
    pub d: usize,
    pub num_classes: usize,
}

impl SnippetNet {
    pub fn new(seed: u64, d: usize, num_classes: usize, n_blocks: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SnippetNet {
            blocks: (0..n_blocks).map(|_| RabBlock::new(&mut rng, d)).collect(),
            embed: Linear::xavier(&mut rng, d, d),
            classifier: Linear::xavier(&mut rng, d, num_classes),
            attention: Linear::xavier(&mut rng, d, 1),
            d,
            num_classes,
        }
    }

    /// All parameter tensors in a fixed traversal order.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for l in [&b.query, &b.key, &b.value, &b.ff1, &b.ff2] {
                out.push(&l.w);
                out.push(&l.b);
            }
            out.push(&b.ln_attn.gamma);
            out.push(&b.ln_attn.beta);
            out.push(&b.ln_ff.gamma);
            out.push(&b.ln_ff.beta);
        }
        for l in [&self.embed, &self.classifier, &self.attention] {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for l in [
                &mut b.query,
                &mut b.key,
                &mut b.value,
                &mut b.ff1,
                &mut b.ff2,
            ] {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
            out.push(&mut b.ln_attn.gamma);
            out.push(&mut b.ln_attn.beta);
            out.push(&mut b.ln_ff.gamma);
            out.push(&mut b.ln_ff.beta);
        }
        for l in [
            &mut self.embed,
            &mut self.classifier,
            &mut self.attention,
        ] {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }
}

/// Tape handles for one bound linear layer.
#[derive(Clone, Copy)]
pub struct BoundLinear<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn apply(&self, x: Var<'t>) -> Var<'t> {
        x.matmul(self.w).add(self.b)
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm<'t> {
    pub gamma: Var<'t>,
    pub beta: Var<'t>,
}

pub struct BoundRabBlock<'t> {
    pub query: BoundLinear<'t>,
    pub key: BoundLinear<'t>,
    pub value: BoundLinear<'t>,
    pub ff1: BoundLinear<'t>,
    pub ff2: BoundLinear<'t>,
    pub ln_attn: BoundLayerNorm<'t>,
    pub ln_ff: BoundLayerNorm<'t>,
}

/// The whole stage-1 network bound onto a tape. `param_vars` mirrors
/// [`SnippetNet::tensors`] order.
pub struct BoundSnippetNet<'t> {
    pub blocks: Vec<BoundRabBlock<'t>>,
    pub embed: BoundLinear<'t>,
    pub classifier: BoundLinear<'t>,
    pub attention: BoundLinear<'t>,
    pub param_vars: Vec<Var<'t>>,
    pub d: usize,
}

fn bind_linear<'t>(tape: &'t Tape, l: &Linear, vars: &mut Vec<Var<'t>>) -> BoundLinear<'t> {
    let w = tape.leaf(l.w.clone());
    let b = tape.leaf(l.b.clone());
    vars.push(w);
    vars.push(b);
    BoundLinear { w, b }
}

fn bind_ln<'t>(tape: &'t Tape, l: &LayerNorm, vars: &mut Vec<Var<'t>>) -> BoundLayerNorm<'t> {
    let gamma = tape.leaf(l.gamma.clone());
    let beta = tape.leaf(l.beta.clone());
    vars.push(gamma);
    vars.push(beta);
    BoundLayerNorm { gamma, beta }
}

pub fn bind_snippet_net<'t>(tape: &'t Tape, net: &SnippetNet) -> BoundSnippetNet<'t> {
    let mut vars = Vec::new();
    let blocks = net
        .blocks
        .iter()
        .map(|b| BoundRabBlock {
            query: bind_linear(tape, &b.query, &mut vars),
            key: bind_linear(tape, &b.key, &mut vars),
            value: bind_linear(tape, &b.value, &mut vars),
            ff1: bind_linear(tape, &b.ff1, &mut vars),
            ff2: bind_linear(tape, &b.ff2, &mut vars),
            ln_attn: bind_ln(tape, &b.ln_attn, &mut vars),
            ln_ff: bind_ln(tape, &b.ln_ff, &mut vars),
        })
        .collect();
    let embed = bind_linear(tape, &net.embed, &mut vars);
    let classifier = bind_linear(tape, &net.classifier, &mut vars);
    let attention = bind_linear(tape, &net.attention, &mut vars);
    BoundSnippetNet {
        blocks,
        embed,
        classifier,
        attention,
        param_vars: vars,
        d: net.d,
    }
}

/// Attention sublayer of one block: returns the row-stochastic attention
/// (T x (T+C)) and the pre-norm residual `x + attn . V`.
pub fn rab_attention<'t>(
    x: Var<'t>,
    prototypes: Var<'t>,
    block: &BoundRabBlock<'t>,
    d: usize,
) -> (Var<'t>, Var<'t>) {
    let q = block.query.apply(x);
    let kv_in = x.concat_rows(prototypes);
    let k = block.key.apply(kv_in);
    let v = block.value.apply(kv_in);
    let attn = q
        .matmul(k.transpose())
        .mul_scalar(1.0 / (d as f64).sqrt())
        .softmax_rows();
    let residual = x.add(attn.matmul(v));
    (attn, residual)
}

fn rab_block_forward<'t>(
    x: Var<'t>,
    prototypes: Var<'t>,
    block: &BoundRabBlock<'t>,
    d: usize,
) -> (Var<'t>, Matrix) {
    let (attn, residual) = rab_attention(x, prototypes, block, d);
    let h = residual.layer_norm_rows(block.ln_attn.gamma, block.ln_attn.beta, LN_EPS);
    let ff = block.ff2.apply(block.ff1.apply(h).gelu());
    let out = h.add(ff).layer_norm_rows(block.ln_ff.gamma, block.ln_ff.beta, LN_EPS);
    (out, attn.value())
}

/// Output of a stage-1 forward pass, as tape vars.
pub struct SnippetForward<'t> {
    /// Attention-refined features, T x D (the input itself when the blocks
    /// are disabled).
    pub x_rab: Var<'t>,
    /// Embedded features, T x D.
    pub x_embed: Var<'t>,
    /// Class activation sequence, T x C in [0,1].
    pub cas: Var<'t>,
    /// Class-agnostic attention, T x 1 in [0,1].
    pub attention: Var<'t>,
    /// Fused prediction CAS * attention, T x C.
    pub fused: Var<'t>,
    /// Value snapshots of each block's attention matrix.
    pub attn_matrices: Vec<Matrix>,
}

/// Runs the attention blocks over `x` with the given prototype matrix.
pub fn rab_forward<'t>(
    bound: &BoundSnippetNet<'t>,
    x: Var<'t>,
    prototypes: Var<'t>,
) -> (Var<'t>, Vec<Matrix>) {
    let mut h = x;
    let mut attns = Vec::with_capacity(bound.blocks.len());
    for block in &bound.blocks {
        let (next, attn) = rab_block_forward(h, prototypes, block, bound.d);
        h = next;
        attns.push(attn);
    }
    (h, attns)
}

/// Embedding + heads over refined features.
pub fn heads_forward<'t>(bound: &BoundSnippetNet<'t>, x_rab: Var<'t>) -> (Var<'t>, Var<'t>, Var<'t>, Var<'t>) {
    let x_embed = bound.embed.apply(x_rab).relu();
    let cas = bound.classifier.apply(x_embed).sigmoid();
    let attention = bound.attention.apply(x_embed).sigmoid();
    let fused = cas.mul(attention);
    (x_embed, cas, attention, fused)
}

/// Full stage-1 forward: attention blocks (optional) then heads.
pub fn snippet_forward<'t>(
    bound: &BoundSnippetNet<'t>,
    x: Var<'t>,
    prototypes: Var<'t>,
    enable_rab: bool,
) -> SnippetForward<'t> {
    let (x_rab, attn_matrices) = if enable_rab {
        rab_forward(bound, x, prototypes)
    } else {
        (x, Vec::new())
    };
    let (x_embed, cas, attention, fused) = heads_forward(bound, x_rab);
    SnippetForward {
        x_rab,
        x_embed,
        cas,
        attention,
        fused,
        attn_matrices,
    }
}

/// Plain-value outputs of a frozen forward pass.
#[derive(Debug, Clone)]
pub struct SnippetOutputs {
    pub x_rab: Matrix,
    pub x_embed: Matrix,
    pub cas: Matrix,
    /// Flattened T-vector.
    pub attention: Vec<f64>,
    pub fused: Matrix,
}

/// Convenience: run the network without keeping the tape.
pub fn snippet_outputs(
    net: &SnippetNet,
    features: &Matrix,
    prototypes: &Matrix,
    enable_rab: bool,
) -> SnippetOutputs {
    let tape = Tape::new();
    let bound = bind_snippet_net(&tape, net);
    let x = tape.leaf(features.clone());
    let protos = tape.leaf(prototypes.clone());
    let fwd = snippet_forward(&bound, x, protos, enable_rab);
    SnippetOutputs {
        x_rab: fwd.x_rab.value(),
        x_embed: fwd.x_embed.value(),
        cas: fwd.cas.value(),
        attention: fwd.attention.value().column(0).to_vec(),
        fused: fwd.fused.value(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn attention_rows_sum_to_one() {
        for t in [1usize, 5, 300] {
            let net = SnippetNet::new(3, 6, 2, 2);
            let tape = Tape::new();
            let bound = bind_snippet_net(&tape, &net);
            let x = tape.leaf(Matrix::from_shape_fn((t, 6), |(r, c)| {
                ((r * 7 + c * 3) as f64).sin()
            }));
            let protos = tape.leaf(Matrix::from_shape_fn((2, 6), |(r, c)| {
                ((r + c) as f64).cos()
            }));
            let (out, attns) = rab_forward(&bound, x, protos);
            assert_eq!(out.shape(), (t, 6));
            for attn in &attns {
                assert_eq!(attn.dim(), (t, 2 + t));
                for r in 0..t {
                    let s: f64 = attn.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn identity_block_single_snippet_hand_values() {
        // T=1, C=1, identity projections, zero feed-forward, X = m = [1, 0]:
        // attention must be [0.5, 0.5] and the pre-norm residual [2, 0].
        let block = RabBlock::identity(2);
        let tape = Tape::new();
        let mut vars = Vec::new();
        let bound = BoundRabBlock {
            query: bind_linear(&tape, &block.query, &mut vars),
            key: bind_linear(&tape, &block.key, &mut vars),
            value: bind_linear(&tape, &block.value, &mut vars),
            ff1: bind_linear(&tape, &block.ff1, &mut vars),
            ff2: bind_linear(&tape, &block.ff2, &mut vars),
            ln_attn: bind_ln(&tape, &block.ln_attn, &mut vars),
            ln_ff: bind_ln(&tape, &block.ln_ff, &mut vars),
        };
        let x = tape.leaf(array![[1.0, 0.0]]);
        let m = tape.leaf(array![[1.0, 0.0]]);
        let (attn, residual) = rab_attention(x, m, &bound, 2);
        let a = attn.value();
        assert_eq!(a.dim(), (1, 2));
        assert!((a[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((a[[0, 1]] - 0.5).abs() < 1e-12);
        let r = residual.value();
        assert!((r[[0, 0]] - 2.0).abs() < 1e-12);
        assert!(r[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn prototype_row_permutation_leaves_output_unchanged() {
        let net = SnippetNet::new(11, 8, 4, 2);
        let x = Matrix::from_shape_fn((13, 8), |(r, c)| ((r * 3 + c) as f64 * 0.37).sin());
        let protos = Matrix::from_shape_fn((4, 8), |(r, c)| ((r * 5 + c) as f64 * 0.21).cos());
        let mut permuted = Matrix::zeros((4, 8));
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 3), (3, 1)] {
            permuted.row_mut(dst).assign(&protos.row(src));
        }
        let a = snippet_outputs(&net, &x, &protos, true);
        let b = snippet_outputs(&net, &x, &permuted, true);
        let max_diff = a
            .x_rab
            .iter()
            .zip(b.x_rab.iter())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn fused_prediction_is_cas_times_attention() {
        let net = SnippetNet::new(5, 4, 3, 1);
        let x = Matrix::from_shape_fn((9, 4), |(r, c)| ((r + c) as f64 * 0.11).sin());
        let protos = Matrix::zeros((3, 4));
        let out = snippet_outputs(&net, &x, &protos, true);
        for r in 0..9 {
            for c in 0..3 {
                let expect = out.cas[[r, c]] * out.attention[r];
                assert!((out.fused[[r, c]] - expect).abs() < 1e-6);
                assert!((0.0..=1.0).contains(&out.fused[[r, c]]));
                assert!((0.0..=1.0).contains(&out.cas[[r, c]]));
            }
            assert!((0.0..=1.0).contains(&out.attention[r]));
        }
    }

    #[test]
    fn saturated_negative_biases_zero_everything() {
        let mut net = SnippetNet::new(7, 4, 2, 0);
        net.classifier.w = Matrix::zeros((4, 2));
        net.classifier.b = Matrix::from_elem((1, 2), -40.0);
        net.attention.w = Matrix::zeros((4, 1));
        net.attention.b = Matrix::from_elem((1, 1), -40.0);
        let x = Matrix::ones((5, 4));
        let protos = Matrix::zeros((2, 4));
        let out = snippet_outputs(&net, &x, &protos, false);
        assert!(out.cas.iter().all(|&v| v < 1e-12));
        assert!(out.attention.iter().all(|&v| v < 1e-12));
        assert!(out.fused.iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn zero_attention_zeroes_fused_row() {
        let mut net = SnippetNet::new(7, 4, 2, 0);
        net.classifier.w = Matrix::zeros((4, 2));
        net.classifier.b = Matrix::from_elem((1, 2), 40.0); // cas -> 1
        net.attention.w = Matrix::zeros((4, 1));
        net.attention.b = Matrix::from_elem((1, 1), -40.0); // attention -> 0
        let x = Matrix::ones((3, 4));
        let out = snippet_outputs(&net, &x, &Matrix::zeros((2, 4)), false);
        assert!(out.cas.iter().all(|&v| v > 1.0 - 1e-12));
        assert!(out.fused.iter().all(|&v| v < 1e-12));
    }
}
