// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients of a scalar model output with respect to the input
//! embeddings, a central-difference oracle, and Integrated Gradients.
//!
//! The backward pass walks the [`ForwardTrace`] layer by layer in reverse,
//! differentiating layer norm, GELU and softmax attention by hand. It can
//! optionally accumulate parameter gradients, which the fixture training
//! loop uses.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NxlError, Result};
use crate::linalg::{self, Matrix};
use crate::model::{
    self, encode, encode_embeddings, ForwardTrace, Heads, LayerTrace, LayerWeights, ModelSnapshot,
    NormStats, TokenSequence, Weights,
};

/// A differentiable scalar read off the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScalarTarget {
    /// Pre-softmax logit of a class at the CLS-analogue.
    ClassLogit { class: usize },
    /// Softmax probability of a class at the CLS-analogue.
    ClassProbability { class: usize },
    /// Regression output at the CLS-analogue.
    RegressionOutput,
    /// Vocabulary logit at `position`.
    VocabLogit { position: usize, token: usize },
    /// Vocabulary probability at `position`.
    VocabProbability { position: usize, token: usize },
}

/// `d target / d x^0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grads: Matrix,
    pub target: ScalarTarget,
}

/// Gradients for every model parameter, laid out like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Weights,
    pub heads: Heads,
}

impl ParamGrads {
    pub fn zeros_like(snapshot: &ModelSnapshot) -> Self {
        let mut grads = ParamGrads {
            weights: snapshot.weights.clone(),
            heads: snapshot.heads.clone(),
        };
        for slice in grads.slices_mut() {
            slice.fill(0.0);
        }
        grads
    }

    /// Every parameter buffer in a fixed order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        parameter_slices_mut(&mut self.weights, &mut self.heads)
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        parameter_slices(&self.weights, &self.heads)
    }

    /// `self += other`, buffer by buffer.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Mutable views of every parameter buffer, in the same order as
/// [`parameter_slices`].
pub fn parameter_slices_mut<'a>(weights: &'a mut Weights, heads: &'a mut Heads) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = vec![
        weights.token_embeddings.as_mut_slice(),
        weights.position_embeddings.as_mut_slice(),
    ];
    for layer in &mut weights.layers {
        for head in &mut layer.attention {
            out.push(head.query.as_mut_slice());
            out.push(&mut head.query_bias);
            out.push(head.key.as_mut_slice());
            out.push(&mut head.key_bias);
            out.push(head.value.as_mut_slice());
            out.push(&mut head.value_bias);
            out.push(head.output.as_mut_slice());
        }
        out.push(&mut layer.attention_output_bias);
        out.push(&mut layer.ln1_gain);
        out.push(&mut layer.ln1_bias);
        out.push(layer.ff_in.as_mut_slice());
        out.push(&mut layer.ff_in_bias);
        out.push(layer.ff_out.as_mut_slice());
        out.push(&mut layer.ff_out_bias);
        out.push(&mut layer.ln2_gain);
        out.push(&mut layer.ln2_bias);
    }
    if let Some(h) = &mut heads.classification {
        out.push(h.weight.as_mut_slice());
        out.push(&mut h.bias);
    }
    if let Some(h) = &mut heads.regression {
        out.push(&mut h.weight);
        out.push(std::slice::from_mut(&mut h.bias));
    }
    if let Some(h) = &mut heads.language_model {
        out.push(h.unembedding.as_mut_slice());
        out.push(&mut h.bias);
    }
    out
}

pub fn parameter_slices<'a>(weights: &'a Weights, heads: &'a Heads) -> Vec<&'a [f64]> {
    let mut out: Vec<&[f64]> = vec![
        weights.token_embeddings.as_slice(),
        weights.position_embeddings.as_slice(),
    ];
    for layer in &weights.layers {
        for head in &layer.attention {
            out.push(head.query.as_slice());
            out.push(&head.query_bias);
            out.push(head.key.as_slice());
            out.push(&head.key_bias);
            out.push(head.value.as_slice());
            out.push(&head.value_bias);
            out.push(head.output.as_slice());
        }
        out.push(&layer.attention_output_bias);
        out.push(&layer.ln1_gain);
        out.push(&layer.ln1_bias);
        out.push(layer.ff_in.as_slice());
        out.push(&layer.ff_in_bias);
        out.push(layer.ff_out.as_slice());
        out.push(&layer.ff_out_bias);
        out.push(&layer.ln2_gain);
        out.push(&layer.ln2_bias);
    }
    if let Some(h) = &heads.classification {
        out.push(h.weight.as_slice());
        out.push(&h.bias);
    }
    if let Some(h) = &heads.regression {
        out.push(&h.weight);
        out.push(std::slice::from_ref(&h.bias));
    }
    if let Some(h) = &heads.language_model {
        out.push(h.unembedding.as_slice());
        out.push(&h.bias);
    }
    out
}

fn check_target(snapshot: &ModelSnapshot, n: usize, target: ScalarTarget) -> Result<()> {
    match target {
        ScalarTarget::ClassLogit { class } | ScalarTarget::ClassProbability { class } => {
            snapshot.classification_head()?;
            if class >= snapshot.config.n_classes {
                return Err(NxlError::Index(format!(
                    "class {class} out of range for {} classes",
                    snapshot.config.n_classes
                )));
            }
        }
        ScalarTarget::RegressionOutput => {
            snapshot.regression_head()?;
        }
        ScalarTarget::VocabLogit { position, token } | ScalarTarget::VocabProbability { position, token } => {
            snapshot.language_model_head()?;
            if token >= snapshot.config.vocab_size {
                return Err(NxlError::Vocabulary {
                    id: token,
                    vocab_size: snapshot.config.vocab_size,
                });
            }
            if position >= n {
                return Err(NxlError::Index(format!(
                    "position {position} outside sequence of length {n}"
                )));
            }
        }
    }
    Ok(())
}

/// Value of `target` for an encoded sequence.
pub fn target_value(snapshot: &ModelSnapshot, trace: &ForwardTrace, target: ScalarTarget) -> Result<f64> {
    check_target(snapshot, trace.seq_len(), target)?;
    let last = trace.final_output();
    let cls = last.row(trace.cls_position());
    Ok(match target {
        ScalarTarget::ClassLogit { class } => model::class_logit(snapshot.classification_head()?, cls, class),
        ScalarTarget::ClassProbability { class } => {
            linalg::softmax(&model::apply_classification_head(snapshot, cls)?)[class]
        }
        ScalarTarget::RegressionOutput => model::apply_regression_head(snapshot, cls)?,
        ScalarTarget::VocabLogit { position, token } => {
            model::vocab_logit(snapshot.language_model_head()?, last.row(position), token)
        }
        ScalarTarget::VocabProbability { position, token } => {
            linalg::softmax(&model::apply_lm_head(snapshot, last.row(position))?)[token]
        }
    })
}

/// `d target / d (final representation)`, an `n x d_model` matrix that is
/// zero except on the row the head reads.
pub fn target_seed(snapshot: &ModelSnapshot, trace: &ForwardTrace, target: ScalarTarget) -> Result<Matrix> {
    check_target(snapshot, trace.seq_len(), target)?;
    let last = trace.final_output();
    let d = snapshot.config.d_model;
    let mut seed = Matrix::zeros(trace.seq_len(), d);
    let cls = trace.cls_position();
    match target {
        ScalarTarget::ClassLogit { class } => {
            let head = snapshot.classification_head()?;
            seed.row_mut(cls).copy_from_slice(head.weight.row(class));
        }
        ScalarTarget::ClassProbability { class } => {
            let head = snapshot.classification_head()?;
            let p = linalg::softmax(&model::apply_classification_head(snapshot, last.row(cls))?);
            softmax_seed(seed.row_mut(cls), &head.weight, &p, class);
        }
        ScalarTarget::RegressionOutput => {
            seed.row_mut(cls).copy_from_slice(&snapshot.regression_head()?.weight);
        }
        ScalarTarget::VocabLogit { position, token } => {
            let head = snapshot.language_model_head()?;
            seed.row_mut(position).copy_from_slice(head.unembedding.row(token));
        }
        ScalarTarget::VocabProbability { position, token } => {
            let head = snapshot.language_model_head()?;
            let p = linalg::softmax(&model::apply_lm_head(snapshot, last.row(position))?);
            softmax_seed(seed.row_mut(position), &head.unembedding, &p, token);
        }
    }
    Ok(seed)
}

/// `d p_c / d rep = sum_j p_c (delta_cj - p_j) W_j`.
fn softmax_seed(out: &mut [f64], weight: &Matrix, p: &[f64], c: usize) {
    for (j, &pj) in p.iter().enumerate() {
        let dlogit = p[c] * (if j == c { 1.0 } else { 0.0 } - pj);
        for (o, w) in out.iter_mut().zip(weight.row(j)) {
            *o += dlogit * w;
        }
    }
}

/// Back-propagates `d_final` (gradient with respect to the last layer's
/// output) down to the input embeddings. When `grads` is given, parameter
/// gradients of every encoder layer are accumulated into it; embedding
/// tables and heads are left to the caller.
pub fn backprop(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    d_final: &Matrix,
    mut grads: Option<&mut ParamGrads>,
) -> Result<Matrix> {
    let expected = (trace.seq_len(), snapshot.config.d_model);
    if d_final.shape() != expected {
        return Err(NxlError::Shape(format!(
            "output gradient is {:?}, expected {:?}",
            d_final.shape(),
            expected
        )));
    }
    let mut d = d_final.clone();
    for l in (0..trace.n_layers()).rev() {
        let input = trace.representation(l)?;
        let layer_grads = grads.as_deref_mut().map(|g| &mut g.weights.layers[l]);
        d = layer_backward(
            &snapshot.weights.layers[l],
            &trace.layers()[l],
            input,
            &d,
            snapshot.config.d_head,
            layer_grads,
        );
        if !d.is_finite() {
            return Err(NxlError::Numeric {
                layer: l + 1,
                op: "backward pass",
            });
        }
    }
    Ok(d)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Returns `(dx, dgain, dbias)` for a row-wise layer norm.
fn norm_backward(stats: &NormStats, gain: &[f64], dy: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xhat = stats.normalized.row(i);
        let dyi = dy.row(i);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            dxhat[j] = dyi[j] * gain[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
            dgain[j] += dyi[j] * xhat[j];
            dbias[j] += dyi[j];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let r = stats.rstd[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = r * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
    (dx, dgain, dbias)
}

fn layer_backward(
    w: &LayerWeights,
    t: &LayerTrace,
    x: &Matrix,
    dout: &Matrix,
    d_head: usize,
    mut g: Option<&mut LayerWeights>,
) -> Matrix {
    let n = x.rows();
    let scale = 1.0 / (d_head as f64).sqrt();

    // X' = LN2(Y + F)
    let (dresid2, dgain2, dbias2) = norm_backward(&t.ln2, &w.ln2_gain, dout);
    // F = GELU(Y W_in + b_in) W_out + b_out
    let dact = linalg::matmul_nt(&dresid2, &w.ff_out);
    let dpre = Matrix::from_vec_unchecked(
        n,
        dact.cols(),
        dact.as_slice()
            .iter()
            .zip(t.ff_pre.as_slice())
            .map(|(da, &z)| da * linalg::gelu_grad(z))
            .collect(),
    );
    let mut dy = dresid2.clone();
    dy.add_scaled(&linalg::matmul_nt(&dpre, &w.ff_in), 1.0);
    if let Some(g) = g.as_deref_mut() {
        add_into(&mut g.ln2_gain, &dgain2);
        add_into(&mut g.ln2_bias, &dbias2);
        g.ff_out.add_scaled(&linalg::matmul_tn(&t.ff_act, &dresid2), 1.0);
        add_into(&mut g.ff_out_bias, &linalg::column_sums(&dresid2));
        g.ff_in.add_scaled(&linalg::matmul_tn(&t.post_attention, &dpre), 1.0);
        add_into(&mut g.ff_in_bias, &linalg::column_sums(&dpre));
    }

    // Y = LN1(X + A)
    let (dresid1, dgain1, dbias1) = norm_backward(&t.ln1, &w.ln1_gain, &dy);
    let mut dx = dresid1.clone();
    if let Some(g) = g.as_deref_mut() {
        add_into(&mut g.ln1_gain, &dgain1);
        add_into(&mut g.ln1_bias, &dbias1);
        add_into(&mut g.attention_output_bias, &linalg::column_sums(&dresid1));
    }

    for (h, (head, ht)) in w.attention.iter().zip(&t.heads).enumerate() {
        let dmixed = linalg::matmul_nt(&dresid1, &head.output);
        let dattn = linalg::matmul_nt(&dmixed, &ht.values);
        let dvalues = linalg::matmul_tn(&ht.attention, &dmixed);
        let mut dscores = Matrix::zeros(n, n);
        for i in 0..n {
            let a = ht.attention.row(i);
            let da = dattn.row(i);
            let inner = linalg::dot(a, da);
            for (j, ds) in dscores.row_mut(i).iter_mut().enumerate() {
                *ds = a[j] * (da[j] - inner) * scale;
            }
        }
        let dqueries = linalg::matmul_unchecked(&dscores, &ht.keys);
        let dkeys = linalg::matmul_tn(&dscores, &ht.queries);
        dx.add_scaled(&linalg::matmul_nt(&dqueries, &head.query), 1.0);
        dx.add_scaled(&linalg::matmul_nt(&dkeys, &head.key), 1.0);
        dx.add_scaled(&linalg::matmul_nt(&dvalues, &head.value), 1.0);
        if let Some(g) = g.as_deref_mut() {
            let gh = &mut g.attention[h];
            gh.output.add_scaled(&linalg::matmul_tn(&ht.mixed, &dresid1), 1.0);
            gh.query.add_scaled(&linalg::matmul_tn(x, &dqueries), 1.0);
            add_into(&mut gh.query_bias, &linalg::column_sums(&dqueries));
            gh.key.add_scaled(&linalg::matmul_tn(x, &dkeys), 1.0);
            add_into(&mut gh.key_bias, &linalg::column_sums(&dkeys));
            gh.value.add_scaled(&linalg::matmul_tn(x, &dvalues), 1.0);
            add_into(&mut gh.value_bias, &linalg::column_sums(&dvalues));
        }
    }
    dx
}

/// Value and input gradient of `target` at explicit input embeddings.
pub fn gradient_at(snapshot: &ModelSnapshot, x0: &Matrix, target: ScalarTarget) -> Result<(f64, Matrix)> {
    let trace = encode_embeddings(snapshot, x0.clone())?;
    let value = target_value(snapshot, &trace, target)?;
    let seed = target_seed(snapshot, &trace, target)?;
    Ok((value, backprop(snapshot, &trace, &seed, None)?))
}

/// Exact reverse-mode `d target / d x^0` for a token sequence.
pub fn input_gradients(snapshot: &ModelSnapshot, seq: &TokenSequence, target: ScalarTarget) -> Result<GradientField> {
    let trace = encode(snapshot, seq)?;
    let seed = target_seed(snapshot, &trace, target)?;
    let grads = backprop(snapshot, &trace, &seed, None)?;
    Ok(GradientField { grads, target })
}

/// Value of `target` when the encoder is fed `x0` directly.
pub fn target_value_at(snapshot: &ModelSnapshot, x0: &Matrix, target: ScalarTarget) -> Result<f64> {
    let trace = encode_embeddings(snapshot, x0.clone())?;
    target_value(snapshot, &trace, target)
}

/// Central differences `(f(x + h e) - f(x - h e)) / 2h` of an arbitrary
/// scalar function, one coordinate at a time.
pub fn central_differences<F>(f: F, x0: &Matrix, h: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NxlError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut out = Matrix::zeros(x0.rows(), x0.cols());
    let mut x = x0.clone();
    for k in 0..x0.as_slice().len() {
        let orig = x.as_slice()[k];
        x.as_mut_slice()[k] = orig + h;
        let plus = f(&x)?;
        x.as_mut_slice()[k] = orig - h;
        let minus = f(&x)?;
        x.as_mut_slice()[k] = orig;
        out.as_mut_slice()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Central-difference oracle for [`input_gradients`], perturbing the input
/// embeddings directly.
pub fn finite_difference_gradients(
    snapshot: &ModelSnapshot,
    seq: &TokenSequence,
    target: ScalarTarget,
    h: f64,
) -> Result<GradientField> {
    let x0 = snapshot.embed(seq)?;
    check_target(snapshot, seq.len(), target)?;
    let grads = central_differences(|x| target_value_at(snapshot, x, target), &x0, h)?;
    Ok(GradientField { grads, target })
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, 1e-300)`: the largest deviation
/// relative to the reference field's magnitude.
pub fn max_relative_error(analytic: &Matrix, reference: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), reference.shape());
    let scale = reference.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    let worst = analytic
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    worst / scale
}

/// Integration baseline for Integrated Gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BaselineSpec {
    /// Token embeddings zeroed, position embeddings kept.
    #[default]
    TokenZero,
    /// Every coordinate zero.
    AllZero,
    Custom(Matrix),
}

impl BaselineSpec {
    pub fn materialize(&self, snapshot: &ModelSnapshot, n: usize) -> Result<Matrix> {
        let d = snapshot.config.d_model;
        match self {
            BaselineSpec::TokenZero => {
                if n > snapshot.config.max_seq_len {
                    return Err(NxlError::Shape(format!("baseline for {n} positions exceeds max_seq_len")));
                }
                let pos = &snapshot.weights.position_embeddings;
                Ok(Matrix::from_vec_unchecked(n, d, pos.as_slice()[..n * d].to_vec()))
            }
            BaselineSpec::AllZero => Ok(Matrix::zeros(n, d)),
            BaselineSpec::Custom(m) => {
                if m.shape() != (n, d) {
                    return Err(NxlError::Shape(format!(
                        "baseline is {}x{}, input is {n}x{d}",
                        m.rows(),
                        m.cols()
                    )));
                }
                Ok(m.clone())
            }
        }
    }
}

/// Signed per-coordinate Integrated Gradients with a midpoint Riemann sum:
/// `(x - b) * mean_k grad(b + (k - 0.5)/steps * (x - b))`.
///
/// Step gradients may be computed in parallel; they are summed in step order.
pub fn integrated_gradients_raw(
    snapshot: &ModelSnapshot,
    seq: &TokenSequence,
    target: ScalarTarget,
    steps: usize,
    baseline: &BaselineSpec,
) -> Result<Matrix> {
    let x0 = snapshot.embed(seq)?;
    integrated_gradients_at(snapshot, &x0, target, steps, baseline)
}

pub fn integrated_gradients_at(
    snapshot: &ModelSnapshot,
    x0: &Matrix,
    target: ScalarTarget,
    steps: usize,
    baseline: &BaselineSpec,
) -> Result<Matrix> {
    if steps == 0 {
        return Err(NxlError::Config("integrated gradients needs at least one step".into()));
    }
    let base = baseline.materialize(snapshot, x0.rows())?;
    check_target(snapshot, x0.rows(), target)?;
    let mut delta = x0.clone();
    delta.add_scaled(&base, -1.0);
    let step_grads: Vec<Matrix> = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 - 0.5) / steps as f64;
            let mut point = base.clone();
            point.add_scaled(&delta, alpha);
            gradient_at(snapshot, &point, target).map(|(_, g)| g)
        })
        .collect::<Result<_>>()?;
    let mut total = Matrix::zeros(x0.rows(), x0.cols());
    for g in &step_grads {
        total.add_scaled(g, 1.0);
    }
    Ok(delta.hadamard(&total.scale(1.0 / steps as f64)))
}
