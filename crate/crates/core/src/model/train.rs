// SPDX-License-Identifier: MIT OR Apache-2.0

//! Full-batch training used to build test fixtures (e.g. a classifier whose
//! label provably depends on one planted token). Not a general trainer.

use rayon::prelude::*;

use crate::error::{NxlError, Result};
use crate::gradients::{self, ParamGrads};
use crate::linalg::{self, Matrix};
use crate::model::{encode, ModelSnapshot, TokenSequence};

/// What one training example should produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrainTarget {
    /// Class label at the CLS-analogue (cross-entropy).
    Class(usize),
    /// Regression value at the CLS-analogue (squared error).
    Score(f64),
    /// Vocabulary id at the sequence's MASK position (cross-entropy).
    Token(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub sequence: TokenSequence,
    pub target: TrainTarget,
}

/// Adam on full-batch gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once training accuracy reaches this fraction (label targets only).
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            max_steps: 400,
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            target_accuracy: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub loss: f64,
    /// Fraction of label targets predicted correctly; `None` when every
    /// target is a regression score.
    pub accuracy: Option<f64>,
}

struct BatchStats {
    loss: f64,
    correct: usize,
    labelled: usize,
}

// Fixed chunking keeps the gradient sum independent of the thread count.
const CHUNK: usize = 16;

fn example_grads(
    snapshot: &ModelSnapshot,
    example: &TrainingExample,
    grads: &mut ParamGrads,
    weight: f64,
) -> Result<(f64, Option<bool>)> {
    let seq = &example.sequence;
    let trace = encode(snapshot, seq)?;
    let last = trace.final_output();
    let mut d_final = Matrix::zeros(seq.len(), snapshot.config.d_model);
    let (loss, correct) = match example.target {
        TrainTarget::Class(label) => {
            let head = snapshot.classification_head()?;
            let pos = trace.cls_position();
            let rep = last.row(pos);
            let logits: Vec<f64> = head.weight.row_iter().zip(&head.bias).map(|(w, b)| linalg::dot(w, rep) + b).collect();
            let (loss, dlogits) = cross_entropy(&logits, label)?;
            let gh = grads.heads.classification.as_mut().expect("grads mirror the snapshot");
            for (c, &dl) in dlogits.iter().enumerate() {
                let dl = dl * weight;
                for (g, r) in gh.weight.row_mut(c).iter_mut().zip(rep) {
                    *g += dl * r;
                }
                gh.bias[c] += dl;
                for (d, w) in d_final.row_mut(pos).iter_mut().zip(head.weight.row(c)) {
                    *d += dl * w;
                }
            }
            (loss, Some(linalg::argmax(&logits) == label))
        }
        TrainTarget::Score(y) => {
            let head = snapshot.regression_head()?;
            let pos = trace.cls_position();
            let rep = last.row(pos);
            let out = linalg::dot(&head.weight, rep) + head.bias;
            let dout = (out - y) * weight;
            let gh = grads.heads.regression.as_mut().expect("grads mirror the snapshot");
            for (g, r) in gh.weight.iter_mut().zip(rep) {
                *g += dout * r;
            }
            gh.bias += dout;
            for (d, w) in d_final.row_mut(pos).iter_mut().zip(&head.weight) {
                *d = dout * w;
            }
            (0.5 * (out - y) * (out - y), None)
        }
        TrainTarget::Token(token) => {
            let head = snapshot.language_model_head()?;
            let pos = seq
                .mask_position()
                .ok_or_else(|| NxlError::Protocol("token target needs a MASK position".into()))?;
            let rep = last.row(pos);
            let logits: Vec<f64> =
                head.unembedding.row_iter().zip(&head.bias).map(|(w, b)| linalg::dot(w, rep) + b).collect();
            let (loss, dlogits) = cross_entropy(&logits, token)?;
            let gh = grads.heads.language_model.as_mut().expect("grads mirror the snapshot");
            for (t, &dl) in dlogits.iter().enumerate() {
                let dl = dl * weight;
                for (g, r) in gh.unembedding.row_mut(t).iter_mut().zip(rep) {
                    *g += dl * r;
                }
                gh.bias[t] += dl;
                for (d, w) in d_final.row_mut(pos).iter_mut().zip(head.unembedding.row(t)) {
                    *d += dl * w;
                }
            }
            (loss, Some(linalg::argmax(&logits) == token))
        }
    };
    let dx0 = gradients::backprop(snapshot, &trace, &d_final, Some(grads))?;
    for (i, &id) in seq.token_ids().iter().enumerate() {
        let row = dx0.row(i);
        for (g, d) in grads.weights.token_embeddings.row_mut(id).iter_mut().zip(row) {
            *g += d;
        }
        for (g, d) in grads.weights.position_embeddings.row_mut(i).iter_mut().zip(row) {
            *g += d;
        }
    }
    Ok((loss, correct))
}

fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(NxlError::Index(format!("label {label} out of range for {} outputs", logits.len())));
    }
    let mut p = linalg::softmax(logits);
    let loss = -p[label].max(1e-300).ln();
    p[label] -= 1.0;
    Ok((loss, p))
}

fn batch_gradients(snapshot: &ModelSnapshot, examples: &[TrainingExample]) -> Result<(ParamGrads, BatchStats)> {
    let weight = 1.0 / examples.len() as f64;
    let partials: Vec<(ParamGrads, BatchStats)> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(snapshot);
            let mut stats = BatchStats { loss: 0.0, correct: 0, labelled: 0 };
            for ex in chunk {
                let (loss, correct) = example_grads(snapshot, ex, &mut grads, weight)?;
                stats.loss += loss * weight;
                if let Some(ok) = correct {
                    stats.labelled += 1;
                    stats.correct += usize::from(ok);
                }
            }
            Ok((grads, stats))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut stats) = iter.next().expect("at least one example");
    for (g, s) in iter {
        total.accumulate(&g);
        stats.loss += s.loss;
        stats.correct += s.correct;
        stats.labelled += s.labelled;
    }
    Ok((total, stats))
}

fn accuracy_of(stats: &BatchStats) -> Option<f64> {
    (stats.labelled > 0).then(|| stats.correct as f64 / stats.labelled as f64)
}

/// Trains every parameter in place. Deterministic for a given snapshot,
/// example list and options.
pub fn train(snapshot: &mut ModelSnapshot, examples: &[TrainingExample], options: &TrainOptions) -> Result<TrainSummary> {
    if examples.is_empty() {
        return Err(NxlError::Config("training needs at least one example".into()));
    }
    if !(options.learning_rate > 0.0) {
        return Err(NxlError::Config("learning rate must be positive".into()));
    }
    let n_params: usize = gradients::parameter_slices(&snapshot.weights, &snapshot.heads).iter().map(|s| s.len()).sum();
    let mut first = vec![0.0; n_params];
    let mut second = vec![0.0; n_params];
    for step in 0..options.max_steps {
        let (grads, stats) = batch_gradients(snapshot, examples)?;
        if let (Some(goal), Some(acc)) = (options.target_accuracy, accuracy_of(&stats)) {
            if acc >= goal {
                return Ok(TrainSummary { steps: step, loss: stats.loss, accuracy: Some(acc) });
            }
        }
        let t = (step + 1) as i32;
        let correction1 = 1.0 - options.beta1.powi(t);
        let correction2 = 1.0 - options.beta2.powi(t);
        let mut k = 0;
        let params = gradients::parameter_slices_mut(&mut snapshot.weights, &mut snapshot.heads);
        for (param, grad) in params.into_iter().zip(grads.slices()) {
            for (p, g) in param.iter_mut().zip(grad) {
                first[k] = options.beta1 * first[k] + (1.0 - options.beta1) * g;
                second[k] = options.beta2 * second[k] + (1.0 - options.beta2) * g * g;
                let m_hat = first[k] / correction1;
                let v_hat = second[k] / correction2;
                *p -= options.learning_rate * m_hat / (v_hat.sqrt() + options.epsilon);
                k += 1;
            }
        }
    }
    let (_, stats) = batch_gradients(snapshot, examples)?;
    Ok(TrainSummary {
        steps: options.max_steps,
        loss: stats.loss,
        accuracy: accuracy_of(&stats),
    })
}

/// Training-set accuracy (label targets only).
pub fn accuracy(snapshot: &ModelSnapshot, examples: &[TrainingExample]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let (_, stats) = batch_gradients(snapshot, examples)?;
    Ok(accuracy_of(&stats))
}
