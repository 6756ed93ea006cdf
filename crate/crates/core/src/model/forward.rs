// SPDX-License-Identifier: MIT OR Apache-2.0

//! The encoder forward pass and the trace it records.
//!
//! Block order per layer (post-LN):
//!
//! ```text
//! A   = sum_h softmax(Q_h K_h^T / sqrt(d_head)) V_h O_h + b_o
//! Y   = LN1(X + A)
//! F   = GELU(Y W_in + b_in) W_out + b_out
//! X'  = LN2(Y + F)
//! ```
//!
//! The trace keeps every intermediate the backward pass needs.

use crate::error::{NxlError, Result};
use crate::linalg::{self, Matrix};
use crate::model::{LayerWeights, ModelSnapshot, TokenSequence};

/// Per-head intermediates for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    /// `n x d_head`
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    /// `n x n`, row `i` holds the weights of token `i` over all tokens.
    pub attention: Matrix,
    /// `attention * values`, `n x d_head`.
    pub mixed: Matrix,
}

/// Layer-norm normalized values and reciprocal standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub normalized: Matrix,
    pub rstd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub heads: Vec<HeadTrace>,
    /// Multi-head attention output before the residual.
    pub attention_output: Matrix,
    pub ln1: NormStats,
    pub post_attention: Matrix,
    /// FFN pre-activation `Y W_in + b_in`.
    pub ff_pre: Matrix,
    pub ff_act: Matrix,
    pub ln2: NormStats,
    pub output: Matrix,
}

/// Everything the encoder computed for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    input_embeddings: Matrix,
    layers: Vec<LayerTrace>,
    cls_position: usize,
}

impl ForwardTrace {
    /// `x^0`, the token-plus-position embeddings.
    pub fn input_embeddings(&self) -> &Matrix {
        &self.input_embeddings
    }

    pub fn layers(&self) -> &[LayerTrace] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.input_embeddings.rows()
    }

    pub fn cls_position(&self) -> usize {
        self.cls_position
    }

    /// Representation after layer `layer`; layer 0 is the input embedding.
    pub fn representation(&self, layer: usize) -> Result<&Matrix> {
        match layer {
            0 => Ok(&self.input_embeddings),
            l if l <= self.layers.len() => Ok(&self.layers[l - 1].output),
            l => Err(NxlError::Index(format!(
                "layer {l} requested from a {}-layer model",
                self.layers.len()
            ))),
        }
    }

    /// Output of the last layer (the embeddings for a zero-layer model).
    pub fn final_output(&self) -> &Matrix {
        self.layers.last().map_or(&self.input_embeddings, |l| &l.output)
    }

    /// Attention weights of `head` in 1-based `layer`.
    pub fn attention(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer - 1].heads[head].attention
    }

    /// Value vectors of `head` in 1-based `layer`.
    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.layers[layer - 1].heads[head].values
    }

    /// Per-head mixed outputs `sum_j alpha_ij v_j` at the CLS-analogue.
    pub fn cls_head_outputs(&self, layer: usize) -> Vec<&[f64]> {
        self.layers[layer - 1]
            .heads
            .iter()
            .map(|h| h.mixed.row(self.cls_position))
            .collect()
    }
}

/// Embeds `seq` and runs every layer.
pub fn encode(snapshot: &ModelSnapshot, seq: &TokenSequence) -> Result<ForwardTrace> {
    let x0 = snapshot.embed(seq)?;
    encode_embeddings(snapshot, x0)
}

/// Runs every layer on explicit input embeddings (used for gradient checks
/// and integration paths, where `x^0` is not a table lookup).
pub fn encode_embeddings(snapshot: &ModelSnapshot, x0: Matrix) -> Result<ForwardTrace> {
    let config = &snapshot.config;
    let n = x0.rows();
    if n == 0 || n > config.max_seq_len || x0.cols() != config.d_model {
        return Err(NxlError::Shape(format!(
            "input embeddings are {}x{}, need 1..={} rows of width {}",
            n,
            x0.cols(),
            config.max_seq_len,
            config.d_model
        )));
    }
    if !x0.is_finite() {
        return Err(NxlError::Numeric { layer: 0, op: "input embeddings" });
    }
    let mut layers = Vec::with_capacity(config.n_layers);
    for (l, weights) in snapshot.weights.layers.iter().enumerate() {
        let input = layers.last().map_or(&x0, |t: &LayerTrace| &t.output);
        let trace = layer_forward(weights, input, config.d_head, config.ln_eps, l + 1)?;
        layers.push(trace);
    }
    Ok(ForwardTrace {
        cls_position: config.cls_index(n),
        input_embeddings: x0,
        layers,
    })
}

fn project(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = linalg::matmul_unchecked(x, w);
    linalg::add_row_bias(&mut out, b);
    out
}

fn layer_norm_rows(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> (Matrix, NormStats) {
    let (n, d) = x.shape();
    let mut normalized = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    for i in 0..n {
        let (mean, r) = linalg::moments(x.row(i), eps);
        rstd.push(r);
        for j in 0..d {
            let z = (x[(i, j)] - mean) * r;
            normalized[(i, j)] = z;
            out[(i, j)] = z * gain[j] + bias[j];
        }
    }
    (out, NormStats { normalized, rstd })
}

fn finite_or(m: &Matrix, layer: usize, op: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(NxlError::Numeric { layer, op })
    }
}

fn layer_forward(
    w: &LayerWeights,
    x: &Matrix,
    d_head: usize,
    eps: f64,
    layer: usize,
) -> Result<LayerTrace> {
    let (n, d) = x.shape();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut attention_output = Matrix::zeros(n, d);
    let mut heads = Vec::with_capacity(w.attention.len());
    for head in &w.attention {
        let queries = project(x, &head.query, &head.query_bias);
        let keys = project(x, &head.key, &head.key_bias);
        let values = project(x, &head.value, &head.value_bias);
        let scores = linalg::matmul_nt(&queries, &keys);
        let mut attention = Matrix::zeros(n, n);
        for i in 0..n {
            let row: Vec<f64> = scores.row(i).iter().map(|s| s * scale).collect();
            attention.row_mut(i).copy_from_slice(&linalg::softmax(&row));
        }
        let mixed = linalg::matmul_unchecked(&attention, &values);
        attention_output.add_scaled(&linalg::matmul_unchecked(&mixed, &head.output), 1.0);
        heads.push(HeadTrace {
            queries,
            keys,
            values,
            attention,
            mixed,
        });
    }
    linalg::add_row_bias(&mut attention_output, &w.attention_output_bias);
    finite_or(&attention_output, layer, "multi-head attention")?;

    let mut resid1 = x.clone();
    resid1.add_scaled(&attention_output, 1.0);
    let (post_attention, ln1) = layer_norm_rows(&resid1, &w.ln1_gain, &w.ln1_bias, eps);

    let ff_pre = project(&post_attention, &w.ff_in, &w.ff_in_bias);
    let ff_act = Matrix::from_vec_unchecked(
        n,
        ff_pre.cols(),
        ff_pre.as_slice().iter().map(|&z| linalg::gelu(z)).collect(),
    );
    let ff_out = project(&ff_act, &w.ff_out, &w.ff_out_bias);
    finite_or(&ff_out, layer, "feed-forward")?;

    let mut resid2 = post_attention.clone();
    resid2.add_scaled(&ff_out, 1.0);
    let (output, ln2) = layer_norm_rows(&resid2, &w.ln2_gain, &w.ln2_bias, eps);
    finite_or(&output, layer, "layer output")?;

    Ok(LayerTrace {
        heads,
        attention_output,
        ln1,
        post_attention,
        ff_pre,
        ff_act,
        ln2,
        output,
    })
}
