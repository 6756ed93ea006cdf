// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-token attribution methods behind one interface.
//!
//! * `l2norm`: norm of each input embedding `x_i^0`.
//! * `logat`: the task head applied to each token's layer-`l`
//!   representation, read at the target label (classification / masked LM),
//!   or the absolute distance from the CLS-analogue's final output
//!   (regression).
//! * `normxlogit`: `||x_i^0||_2 * logat_i`. The norm factor always comes from
//!   the input embeddings, whatever layer LogAt reads.
//! * `grad_norm`, `grad_x_input`, `integrated_gradients`: gradient baselines,
//!   each aggregated per token with the L1 norm.
//! * `random`: a seeded permutation of `1..=n`, scaled into `(0, 1]`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NxlError, Result};
use crate::gradients::{self, BaselineSpec, ScalarTarget};
use crate::linalg::{self, Matrix};
use crate::model::{self, encode, predict_from_trace, ForwardTrace, ModelSnapshot, Task, TokenSequence};

/// Default Integrated Gradients step count.
pub const DEFAULT_IG_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    L2norm,
    Logat,
    Normxlogit,
    GradNorm,
    GradXInput,
    IntegratedGradients,
    Random,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::L2norm,
        Method::Logat,
        Method::Normxlogit,
        Method::GradNorm,
        Method::GradXInput,
        Method::IntegratedGradients,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::L2norm => "l2norm",
            Method::Logat => "logat",
            Method::Normxlogit => "normxlogit",
            Method::GradNorm => "grad_norm",
            Method::GradXInput => "grad_x_input",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Random => "random",
        }
    }

    fn uses_gradients(self) -> bool {
        matches!(self, Method::GradNorm | Method::GradXInput | Method::IntegratedGradients)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "ig" && *m == Method::IntegratedGradients))
            .ok_or_else(|| NxlError::Config(format!("unknown attribution method {s:?}")))
    }
}

/// What the gradient methods differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientObjective {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgBaseline {
    /// Token embeddings zeroed, position embeddings kept.
    #[default]
    TokenZero,
    AllZero,
}

impl IgBaseline {
    pub fn spec(self) -> BaselineSpec {
        match self {
            IgBaseline::TokenZero => BaselineSpec::TokenZero,
            IgBaseline::AllZero => BaselineSpec::AllZero,
        }
    }
}

impl std::str::FromStr for GradientObjective {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(GradientObjective::Logit),
            "probability" | "prob" => Ok(GradientObjective::Probability),
            other => Err(NxlError::Config(format!("unknown gradient objective {other:?}"))),
        }
    }
}

impl std::str::FromStr for IgBaseline {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "token_zero" => Ok(IgBaseline::TokenZero),
            "all_zero" => Ok(IgBaseline::AllZero),
            other => Err(NxlError::Config(format!("unknown IG baseline {other:?}"))),
        }
    }
}

/// Method parameters recorded with every result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodParams {
    pub ig_steps: usize,
    pub ig_baseline: IgBaseline,
    pub objective: GradientObjective,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            ig_steps: DEFAULT_IG_STEPS,
            ig_baseline: IgBaseline::default(),
            objective: GradientObjective::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionRequest {
    pub method: Method,
    pub task: Task,
    /// Class index (classification) or vocabulary id (masked LM); defaults
    /// to the model's prediction. Ignored for regression.
    pub target_label: Option<usize>,
    /// Representation layer LogAt reads, `0..=L`; defaults to `L`.
    pub layer: Option<usize>,
    pub params: MethodParams,
    pub seed: u64,
}

impl AttributionRequest {
    pub fn new(method: Method, task: Task) -> Self {
        AttributionRequest {
            method,
            task,
            target_label: None,
            layer: None,
            params: MethodParams::default(),
            seed: 0,
        }
    }
}

/// Per-token scores with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub scores: Vec<f64>,
    /// True for LogAt / NormXLogit label logits; false for norm-aggregated
    /// methods, whose scores are nonnegative.
    pub signed: bool,
    pub method: Method,
    pub target_label: Option<usize>,
    pub layer: Option<usize>,
    pub seed: Option<u64>,
}

impl AttributionResult {
    fn unsigned(scores: Vec<f64>, method: Method) -> Self {
        AttributionResult {
            scores,
            signed: false,
            method,
            target_label: None,
            layer: None,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn resolve_layer(trace: &ForwardTrace, layer: Option<usize>) -> Result<usize> {
    let l = layer.unwrap_or(trace.n_layers());
    if l > trace.n_layers() {
        return Err(NxlError::Index(format!(
            "layer {l} requested from a {}-layer model",
            trace.n_layers()
        )));
    }
    Ok(l)
}

/// `score_i = ||x_i^0||_2`.
pub fn attr_l2norm(trace: &ForwardTrace) -> AttributionResult {
    let scores = trace.input_embeddings().row_iter().map(linalg::l2_norm).collect();
    AttributionResult {
        layer: Some(0),
        ..AttributionResult::unsigned(scores, Method::L2norm)
    }
}

/// `score_i = HoT_clas(x_i^layer)[class_index]`, signed.
pub fn attr_logat_classification(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    class_index: usize,
    layer: usize,
) -> Result<AttributionResult> {
    let head = snapshot.classification_head()?;
    if class_index >= snapshot.config.n_classes {
        return Err(NxlError::Index(format!(
            "class {class_index} out of range for {} classes",
            snapshot.config.n_classes
        )));
    }
    let reps = trace.representation(layer)?;
    let scores = reps.row_iter().map(|r| model::class_logit(head, r, class_index)).collect();
    Ok(AttributionResult {
        scores,
        signed: true,
        method: Method::Logat,
        target_label: Some(class_index),
        layer: Some(layer),
        seed: None,
    })
}

/// `score_i = |HoT_reg(x_i^layer) - HoT_reg(x_cls^L)|`, unsigned.
pub fn attr_logat_regression(snapshot: &ModelSnapshot, trace: &ForwardTrace, layer: usize) -> Result<AttributionResult> {
    let reps = trace.representation(layer)?;
    let reference = model::apply_regression_head(snapshot, trace.final_output().row(trace.cls_position()))?;
    let scores = reps
        .row_iter()
        .map(|r| model::apply_regression_head(snapshot, r).map(|v| (v - reference).abs()))
        .collect::<Result<_>>()?;
    Ok(AttributionResult {
        layer: Some(layer),
        ..AttributionResult::unsigned(scores, Method::Logat)
    })
}

/// `score_i = HoT_lm(x_i^layer)[vocab_token]`, signed. Works for the target,
/// the foil or any other vocabulary entry.
pub fn attr_logat_lm(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    vocab_token: usize,
    layer: usize,
) -> Result<AttributionResult> {
    let head = snapshot.language_model_head()?;
    if vocab_token >= snapshot.config.vocab_size {
        return Err(NxlError::Vocabulary {
            id: vocab_token,
            vocab_size: snapshot.config.vocab_size,
        });
    }
    let reps = trace.representation(layer)?;
    let scores = reps.row_iter().map(|r| model::vocab_logit(head, r, vocab_token)).collect();
    Ok(AttributionResult {
        scores,
        signed: true,
        method: Method::Logat,
        target_label: Some(vocab_token),
        layer: Some(layer),
        seed: None,
    })
}

/// Picks the target label: explicit, or the model's own prediction.
fn resolve_label(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    seq: &TokenSequence,
    request: &AttributionRequest,
) -> Result<Option<usize>> {
    match (request.task, request.target_label) {
        (Task::Regression, _) => Ok(None),
        (_, Some(label)) => Ok(Some(label)),
        (task, None) => Ok(predict_from_trace(snapshot, trace, seq, task)?.label()),
    }
}

fn logat_for(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    task: Task,
    label: Option<usize>,
    layer: usize,
) -> Result<AttributionResult> {
    match task {
        Task::Classification => attr_logat_classification(snapshot, trace, label.expect("resolved"), layer),
        Task::Regression => attr_logat_regression(snapshot, trace, layer),
        Task::MaskedLm => attr_logat_lm(snapshot, trace, label.expect("resolved"), layer),
    }
}

/// `score_i = ||x_i^0||_2 * LogAt_i` for the setup in `request`.
pub fn attr_normxlogit(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    seq: &TokenSequence,
    request: &AttributionRequest,
) -> Result<AttributionResult> {
    let layer = resolve_layer(trace, request.layer)?;
    let label = resolve_label(snapshot, trace, seq, request)?;
    let logat = logat_for(snapshot, trace, request.task, label, layer)?;
    let norms = attr_l2norm(trace);
    let scores = norms.scores.iter().zip(&logat.scores).map(|(n, s)| n * s).collect();
    Ok(AttributionResult {
        scores,
        method: Method::Normxlogit,
        ..logat
    })
}

/// The scalar gradient methods differentiate for a task and label.
pub fn gradient_target(
    seq: &TokenSequence,
    task: Task,
    label: Option<usize>,
    objective: GradientObjective,
) -> Result<ScalarTarget> {
    Ok(match (task, objective) {
        (Task::Classification, GradientObjective::Logit) => ScalarTarget::ClassLogit {
            class: label.ok_or_else(|| NxlError::Config("classification target needs a label".into()))?,
        },
        (Task::Classification, GradientObjective::Probability) => ScalarTarget::ClassProbability {
            class: label.ok_or_else(|| NxlError::Config("classification target needs a label".into()))?,
        },
        (Task::Regression, _) => ScalarTarget::RegressionOutput,
        (Task::MaskedLm, objective) => {
            let position = seq
                .mask_position()
                .ok_or_else(|| NxlError::Protocol("masked-LM attribution needs a MASK position".into()))?;
            let token = label.ok_or_else(|| NxlError::Config("masked-LM target needs a token".into()))?;
            match objective {
                GradientObjective::Logit => ScalarTarget::VocabLogit { position, token },
                GradientObjective::Probability => ScalarTarget::VocabProbability { position, token },
            }
        }
    })
}

fn l1_rows(m: &Matrix) -> Vec<f64> {
    m.row_iter().map(linalg::l1_norm).collect()
}

/// `score_i = ||d target / d x_i^0||_1`.
pub fn attr_grad_norm(snapshot: &ModelSnapshot, seq: &TokenSequence, target: ScalarTarget) -> Result<AttributionResult> {
    let field = gradients::input_gradients(snapshot, seq, target)?;
    Ok(AttributionResult::unsigned(l1_rows(&field.grads), Method::GradNorm))
}

/// `score_i = ||(d target / d x_i^0) * x_i^0||_1`.
pub fn attr_grad_x_input(snapshot: &ModelSnapshot, seq: &TokenSequence, target: ScalarTarget) -> Result<AttributionResult> {
    let field = gradients::input_gradients(snapshot, seq, target)?;
    let x0 = snapshot.embed(seq)?;
    Ok(AttributionResult::unsigned(l1_rows(&field.grads.hadamard(&x0)), Method::GradXInput))
}

/// `score_i = ||IG_i||_1` over the embedding coordinates of token `i`.
pub fn attr_integrated_gradients(
    snapshot: &ModelSnapshot,
    seq: &TokenSequence,
    target: ScalarTarget,
    steps: usize,
    baseline: &BaselineSpec,
) -> Result<AttributionResult> {
    let raw = gradients::integrated_gradients_raw(snapshot, seq, target, steps, baseline)?;
    Ok(AttributionResult::unsigned(l1_rows(&raw), Method::IntegratedGradients))
}

/// A seeded random permutation of `1..=n`, divided by `n`.
pub fn attr_random(seq: &TokenSequence, seed: u64) -> AttributionResult {
    let n = seq.len();
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let scores = ranks.into_iter().map(|r| r as f64 / n as f64).collect();
    AttributionResult {
        seed: Some(seed),
        ..AttributionResult::unsigned(scores, Method::Random)
    }
}

/// Runs the method in `request` on `seq`.
pub fn attribute(snapshot: &ModelSnapshot, seq: &TokenSequence, request: &AttributionRequest) -> Result<AttributionResult> {
    let trace = encode(snapshot, seq)?;
    attribute_with_trace(snapshot, &trace, seq, request)
}

/// As [`attribute`], reusing an existing trace of `seq`.
pub fn attribute_with_trace(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    seq: &TokenSequence,
    request: &AttributionRequest,
) -> Result<AttributionResult> {
    let label = match request.method {
        Method::L2norm | Method::Random => None,
        _ => {
            snapshot.require_head(request.task)?;
            resolve_label(snapshot, trace, seq, request)?
        }
    };
    let mut result = match request.method {
        Method::L2norm => attr_l2norm(trace),
        Method::Random => attr_random(seq, request.seed),
        Method::Logat => {
            let layer = resolve_layer(trace, request.layer)?;
            logat_for(snapshot, trace, request.task, label, layer)?
        }
        Method::Normxlogit => attr_normxlogit(snapshot, trace, seq, request)?,
        m if m.uses_gradients() => {
            let target = gradient_target(seq, request.task, label, request.params.objective)?;
            match m {
                Method::GradNorm => attr_grad_norm(snapshot, seq, target)?,
                Method::GradXInput => attr_grad_x_input(snapshot, seq, target)?,
                _ => attr_integrated_gradients(
                    snapshot,
                    seq,
                    target,
                    request.params.ig_steps,
                    &request.params.ig_baseline.spec(),
                )?,
            }
        }
        _ => unreachable!("all methods handled"),
    };
    if result.target_label.is_none() {
        result.target_label = label;
    }
    if let Some(bad) = result.scores.iter().position(|s| !s.is_finite()) {
        return Err(NxlError::NonFinite(format!("{} score at position {bad}", request.method)));
    }
    Ok(result)
}

/// How signed scores are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOrder {
    /// Highest score first, signs kept.
    #[default]
    Signed,
    /// Highest magnitude first.
    Absolute,
}

/// Eligible positions sorted by descending score, ties to the lower
/// position.
pub fn rank_tokens(result: &AttributionResult, eligible: &[usize], order: RankOrder) -> Result<Vec<usize>> {
    if eligible.is_empty() {
        return Err(NxlError::Protocol("no eligible positions to rank".into()));
    }
    if let Some(&p) = eligible.iter().find(|&&p| p >= result.scores.len()) {
        return Err(NxlError::Index(format!(
            "eligible position {p} outside {} scores",
            result.scores.len()
        )));
    }
    let key = |p: usize| match order {
        RankOrder::Signed => result.scores[p],
        RankOrder::Absolute => result.scores[p].abs(),
    };
    let mut ranked = eligible.to_vec();
    ranked.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    Ok(ranked)
}

#[cfg(test)]
mod tests;
