// SPDX-License-Identifier: MIT OR Apache-2.0

//! A from-scratch post-LN transformer encoder with classification,
//! regression and language-model heads.
//!
//! Representations are row vectors: a sequence of `n` tokens is an
//! `n x d_model` matrix and every projection multiplies on the right.

mod forward;
mod io;
mod sequence;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HeadKind, NxlError, Result};
use crate::linalg::{self, Matrix, Vector, DEFAULT_LN_EPS};

pub use forward::{encode, encode_embeddings, ForwardTrace, HeadTrace, LayerTrace, NormStats};
pub use io::{config_hash, MODEL_FILE_VERSION};
pub(crate) use io::sha256_hex;
pub use sequence::TokenSequence;

/// Which position's final representation feeds whole-sequence heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsPosition {
    /// Position 0, BERT style.
    #[default]
    First,
    /// Position `n - 1`, emulating last-token classification in decoders.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub ln_eps: f64,
    #[serde(default)]
    pub cls_position: ClsPosition,
}

impl ModelConfig {
    /// Config with `d_head = d_model / n_heads` and default epsilon.
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        d_ff: usize,
        vocab_size: usize,
        max_seq_len: usize,
        n_classes: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(NxlError::Config(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        let config = ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads,
            d_ff,
            vocab_size,
            max_seq_len,
            n_classes,
            ln_eps: DEFAULT_LN_EPS,
            cls_position: ClsPosition::First,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(NxlError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(NxlError::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(NxlError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Position of the CLS-analogue in a sequence of length `n`.
    pub fn cls_index(&self, n: usize) -> usize {
        match self.cls_position {
            ClsPosition::First => 0,
            ClsPosition::Last => n - 1,
        }
    }
}

/// One attention head's projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    /// `d_model x d_head`
    pub query: Matrix,
    pub query_bias: Vec<f64>,
    pub key: Matrix,
    pub key_bias: Vec<f64>,
    pub value: Matrix,
    pub value_bias: Vec<f64>,
    /// `d_head x d_model`
    pub output: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attention: Vec<AttentionHead>,
    pub attention_output_bias: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    /// `d_model x d_ff`
    pub ff_in: Matrix,
    pub ff_in_bias: Vec<f64>,
    /// `d_ff x d_model`
    pub ff_out: Matrix,
    pub ff_out_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    /// `vocab_size x d_model`
    pub token_embeddings: Matrix,
    /// `max_seq_len x d_model`
    pub position_embeddings: Matrix,
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationHead {
    /// `n_classes x d_model`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionHead {
    pub weight: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModelHead {
    /// `vocab_size x d_model`
    pub unembedding: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationHead>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<RegressionHead>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language_model: Option<LanguageModelHead>,
}

/// Which heads to attach when generating a model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HeadSelection {
    pub classification: bool,
    pub regression: bool,
    pub language_model: bool,
}

impl HeadSelection {
    pub fn all() -> Self {
        HeadSelection {
            classification: true,
            regression: true,
            language_model: true,
        }
    }

    pub fn only(task: Task) -> Self {
        let mut s = HeadSelection::default();
        match task {
            Task::Classification => s.classification = true,
            Task::Regression => s.regression = true,
            Task::MaskedLm => s.language_model = true,
        }
        s
    }
}

/// Where a snapshot came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// Provenance stamped with this crate's name and version.
    pub fn current(config_hash: String, seed: u64) -> Self {
        Provenance {
            tool: crate::TOOL.to_string(),
            tool_version: crate::TOOL_VERSION.to_string(),
            config_hash,
            seed,
        }
    }
}

/// Weight initialization for generated models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub std: f64,
    /// Draw biases (and layer-norm gain offsets) from the same Gaussian
    /// instead of the usual zero / unit values.
    pub random_biases: bool,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            std: 0.02,
            random_biases: false,
        }
    }
}

/// Full weights and hyperparameters of a model under explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub weights: Weights,
    pub heads: Heads,
    pub provenance: Option<Provenance>,
}

/// The task a head serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
    MaskedLm,
}

impl std::str::FromStr for Task {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "regression" => Ok(Task::Regression),
            "masked_lm" | "masked-lm" => Ok(Task::MaskedLm),
            other => Err(NxlError::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
            Task::MaskedLm => "masked_lm",
        })
    }
}

/// Output of [`predict`].
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class {
        label: usize,
        logits: Vec<f64>,
        probabilities: Vec<f64>,
    },
    Score(f64),
    Token {
        position: usize,
        token: usize,
        logits: Vec<f64>,
        probabilities: Vec<f64>,
    },
}

impl Prediction {
    /// Predicted class or vocabulary id; `None` for regression.
    pub fn label(&self) -> Option<usize> {
        match self {
            Prediction::Class { label, .. } => Some(*label),
            Prediction::Token { token, .. } => Some(*token),
            Prediction::Score(_) => None,
        }
    }

    /// Probability assigned to `label`; `None` for regression.
    pub fn probability_of(&self, label: usize) -> Option<f64> {
        match self {
            Prediction::Class { probabilities, .. } | Prediction::Token { probabilities, .. } => {
                probabilities.get(label).copied()
            }
            Prediction::Score(_) => None,
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, normal: &Normal<f64>, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

fn bias_vec(rng: &mut ChaCha8Rng, normal: &Normal<f64>, len: usize, random: bool, base: f64) -> Vec<f64> {
    if random {
        (0..len).map(|_| base + normal.sample(rng)).collect()
    } else {
        vec![base; len]
    }
}

impl ModelSnapshot {
    /// Seeded Gaussian initialization. Sampling order is fixed, so the same
    /// config, heads, seed and options always yield the same weights.
    pub fn random(config: ModelConfig, heads: HeadSelection, seed: u64, init: InitOptions) -> Result<Self> {
        config.validate()?;
        if !(init.std > 0.0 && init.std.is_finite()) {
            return Err(NxlError::Config("init std must be positive".into()));
        }
        if !(heads.classification || heads.regression || heads.language_model) {
            return Err(NxlError::Config("at least one head must be attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init.std).expect("std checked above");
        let rb = init.random_biases;
        let c = &config;
        let token_embeddings = gaussian_matrix(&mut rng, &normal, c.vocab_size, c.d_model);
        let position_embeddings = gaussian_matrix(&mut rng, &normal, c.max_seq_len, c.d_model);
        let mut layers = Vec::with_capacity(c.n_layers);
        for _ in 0..c.n_layers {
            let mut attention = Vec::with_capacity(c.n_heads);
            for _ in 0..c.n_heads {
                attention.push(AttentionHead {
                    query: gaussian_matrix(&mut rng, &normal, c.d_model, c.d_head),
                    query_bias: bias_vec(&mut rng, &normal, c.d_head, rb, 0.0),
                    key: gaussian_matrix(&mut rng, &normal, c.d_model, c.d_head),
                    key_bias: bias_vec(&mut rng, &normal, c.d_head, rb, 0.0),
                    value: gaussian_matrix(&mut rng, &normal, c.d_model, c.d_head),
                    value_bias: bias_vec(&mut rng, &normal, c.d_head, rb, 0.0),
                    output: gaussian_matrix(&mut rng, &normal, c.d_head, c.d_model),
                });
            }
            layers.push(LayerWeights {
                attention,
                attention_output_bias: bias_vec(&mut rng, &normal, c.d_model, rb, 0.0),
                ln1_gain: bias_vec(&mut rng, &normal, c.d_model, rb, 1.0),
                ln1_bias: bias_vec(&mut rng, &normal, c.d_model, rb, 0.0),
                ff_in: gaussian_matrix(&mut rng, &normal, c.d_model, c.d_ff),
                ff_in_bias: bias_vec(&mut rng, &normal, c.d_ff, rb, 0.0),
                ff_out: gaussian_matrix(&mut rng, &normal, c.d_ff, c.d_model),
                ff_out_bias: bias_vec(&mut rng, &normal, c.d_model, rb, 0.0),
                ln2_gain: bias_vec(&mut rng, &normal, c.d_model, rb, 1.0),
                ln2_bias: bias_vec(&mut rng, &normal, c.d_model, rb, 0.0),
            });
        }
        let mut out_heads = Heads::default();
        if heads.classification {
            if c.n_classes < 2 {
                return Err(NxlError::Config(
                    "a classification head needs at least 2 classes".into(),
                ));
            }
            out_heads.classification = Some(ClassificationHead {
                weight: gaussian_matrix(&mut rng, &normal, c.n_classes, c.d_model),
                bias: bias_vec(&mut rng, &normal, c.n_classes, rb, 0.0),
            });
        }
        if heads.regression {
            out_heads.regression = Some(RegressionHead {
                weight: (0..c.d_model).map(|_| normal.sample(&mut rng)).collect(),
                bias: if rb { normal.sample(&mut rng) } else { 0.0 },
            });
        }
        if heads.language_model {
            out_heads.language_model = Some(LanguageModelHead {
                unembedding: gaussian_matrix(&mut rng, &normal, c.vocab_size, c.d_model),
                bias: bias_vec(&mut rng, &normal, c.vocab_size, rb, 0.0),
            });
        }
        let snapshot = ModelSnapshot {
            config,
            weights: Weights {
                token_embeddings,
                position_embeddings,
                layers,
            },
            heads: out_heads,
            provenance: None,
        };
        snapshot.validate()?;
        Ok(snapshot)
    }

    /// Checks every dimension against the config, the head requirements and
    /// finiteness of every parameter.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let mismatch = |what: &str, got: (usize, usize), want: (usize, usize)| {
            NxlError::Shape(format!("{what} is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1))
        };
        let check_m = |what: &str, m: &Matrix, want: (usize, usize)| {
            if m.shape() == want && m.is_finite() {
                Ok(())
            } else if m.shape() != want {
                Err(mismatch(what, m.shape(), want))
            } else {
                Err(NxlError::NonFinite(what.to_string()))
            }
        };
        let check_v = |what: &str, v: &[f64], want: usize| {
            if v.len() != want {
                Err(NxlError::Shape(format!("{what} has length {}, expected {want}", v.len())))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(NxlError::NonFinite(what.to_string()))
            } else {
                Ok(())
            }
        };
        let w = &self.weights;
        check_m("token_embeddings", &w.token_embeddings, (c.vocab_size, c.d_model))?;
        check_m("position_embeddings", &w.position_embeddings, (c.max_seq_len, c.d_model))?;
        if w.layers.len() != c.n_layers {
            return Err(NxlError::Shape(format!(
                "{} layers stored, config says {}",
                w.layers.len(),
                c.n_layers
            )));
        }
        for (l, layer) in w.layers.iter().enumerate() {
            if layer.attention.len() != c.n_heads {
                return Err(NxlError::Shape(format!(
                    "layer {l} has {} heads, config says {}",
                    layer.attention.len(),
                    c.n_heads
                )));
            }
            for (h, head) in layer.attention.iter().enumerate() {
                let p = format!("layer {l} head {h}");
                check_m(&format!("{p} query"), &head.query, (c.d_model, c.d_head))?;
                check_m(&format!("{p} key"), &head.key, (c.d_model, c.d_head))?;
                check_m(&format!("{p} value"), &head.value, (c.d_model, c.d_head))?;
                check_m(&format!("{p} output"), &head.output, (c.d_head, c.d_model))?;
                check_v(&format!("{p} query_bias"), &head.query_bias, c.d_head)?;
                check_v(&format!("{p} key_bias"), &head.key_bias, c.d_head)?;
                check_v(&format!("{p} value_bias"), &head.value_bias, c.d_head)?;
            }
            let p = format!("layer {l}");
            check_v(&format!("{p} attention_output_bias"), &layer.attention_output_bias, c.d_model)?;
            check_v(&format!("{p} ln1_gain"), &layer.ln1_gain, c.d_model)?;
            check_v(&format!("{p} ln1_bias"), &layer.ln1_bias, c.d_model)?;
            check_m(&format!("{p} ff_in"), &layer.ff_in, (c.d_model, c.d_ff))?;
            check_v(&format!("{p} ff_in_bias"), &layer.ff_in_bias, c.d_ff)?;
            check_m(&format!("{p} ff_out"), &layer.ff_out, (c.d_ff, c.d_model))?;
            check_v(&format!("{p} ff_out_bias"), &layer.ff_out_bias, c.d_model)?;
            check_v(&format!("{p} ln2_gain"), &layer.ln2_gain, c.d_model)?;
            check_v(&format!("{p} ln2_bias"), &layer.ln2_bias, c.d_model)?;
        }
        let heads = &self.heads;
        if heads.classification.is_none() && heads.regression.is_none() && heads.language_model.is_none() {
            return Err(NxlError::Config("model has no head attached".into()));
        }
        if let Some(head) = &heads.classification {
            if c.n_classes < 2 {
                return Err(NxlError::Config("classification head needs at least 2 classes".into()));
            }
            check_m("classification weight", &head.weight, (c.n_classes, c.d_model))?;
            check_v("classification bias", &head.bias, c.n_classes)?;
        }
        if let Some(head) = &heads.regression {
            check_v("regression weight", &head.weight, c.d_model)?;
            check_v("regression bias", std::slice::from_ref(&head.bias), 1)?;
        }
        if let Some(head) = &heads.language_model {
            check_m("unembedding", &head.unembedding, (c.vocab_size, c.d_model))?;
            check_v("language-model bias", &head.bias, c.vocab_size)?;
        }
        Ok(())
    }

    pub fn has_head(&self, task: Task) -> bool {
        match task {
            Task::Classification => self.heads.classification.is_some(),
            Task::Regression => self.heads.regression.is_some(),
            Task::MaskedLm => self.heads.language_model.is_some(),
        }
    }

    /// `MissingHead` unless the head for `task` is present.
    pub fn require_head(&self, task: Task) -> Result<()> {
        if self.has_head(task) {
            return Ok(());
        }
        Err(NxlError::MissingHead(match task {
            Task::Classification => HeadKind::Classification,
            Task::Regression => HeadKind::Regression,
            Task::MaskedLm => HeadKind::LanguageModel,
        }))
    }

    pub fn classification_head(&self) -> Result<&ClassificationHead> {
        self.heads
            .classification
            .as_ref()
            .ok_or(NxlError::MissingHead(HeadKind::Classification))
    }

    pub fn regression_head(&self) -> Result<&RegressionHead> {
        self.heads.regression.as_ref().ok_or(NxlError::MissingHead(HeadKind::Regression))
    }

    pub fn language_model_head(&self) -> Result<&LanguageModelHead> {
        self.heads
            .language_model
            .as_ref()
            .ok_or(NxlError::MissingHead(HeadKind::LanguageModel))
    }

    /// Token plus position embedding for every position.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Matrix> {
        seq.validate_for(&self.config)?;
        let d = self.config.d_model;
        let mut out = Matrix::zeros(seq.len(), d);
        for (i, &id) in seq.token_ids().iter().enumerate() {
            let tok = self.weights.token_embeddings.row(id);
            let pos = self.weights.position_embeddings.row(i);
            for ((o, t), p) in out.row_mut(i).iter_mut().zip(tok).zip(pos) {
                *o = t + p;
            }
        }
        Ok(out)
    }
}

fn check_rep(rep: &[f64], d_model: usize) -> Result<()> {
    if rep.len() != d_model {
        return Err(NxlError::Shape(format!(
            "representation has length {}, expected {d_model}",
            rep.len()
        )));
    }
    Ok(())
}

/// Raw class logits `W rep + b`.
pub fn apply_classification_head(snapshot: &ModelSnapshot, rep: &[f64]) -> Result<Vector> {
    let head = snapshot.classification_head()?;
    check_rep(rep, snapshot.config.d_model)?;
    let logits = head
        .weight
        .row_iter()
        .zip(&head.bias)
        .map(|(w, b)| linalg::dot(w, rep) + b)
        .collect();
    Ok(Vector::from_vec_unchecked(logits))
}

/// Class logit for a single label.
pub(crate) fn class_logit(head: &ClassificationHead, rep: &[f64], class: usize) -> f64 {
    linalg::dot(head.weight.row(class), rep) + head.bias[class]
}

pub fn apply_regression_head(snapshot: &ModelSnapshot, rep: &[f64]) -> Result<f64> {
    let head = snapshot.regression_head()?;
    check_rep(rep, snapshot.config.d_model)?;
    Ok(linalg::dot(&head.weight, rep) + head.bias)
}

/// Vocabulary logits `unembedding rep + bias`.
pub fn apply_lm_head(snapshot: &ModelSnapshot, rep: &[f64]) -> Result<Vector> {
    let head = snapshot.language_model_head()?;
    check_rep(rep, snapshot.config.d_model)?;
    let logits = head
        .unembedding
        .row_iter()
        .zip(&head.bias)
        .map(|(w, b)| linalg::dot(w, rep) + b)
        .collect();
    Ok(Vector::from_vec_unchecked(logits))
}

pub(crate) fn vocab_logit(head: &LanguageModelHead, rep: &[f64], token: usize) -> f64 {
    linalg::dot(head.unembedding.row(token), rep) + head.bias[token]
}

/// Runs the model and reads the head for `task`.
pub fn predict(snapshot: &ModelSnapshot, seq: &TokenSequence, task: Task) -> Result<Prediction> {
    let trace = encode(snapshot, seq)?;
    predict_from_trace(snapshot, &trace, seq, task)
}

/// Prediction from an existing trace of `seq`.
pub fn predict_from_trace(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    seq: &TokenSequence,
    task: Task,
) -> Result<Prediction> {
    let last = trace.final_output();
    match task {
        Task::Classification => {
            let logits = apply_classification_head(snapshot, last.row(trace.cls_position()))?.into_inner();
            let probabilities = linalg::softmax(&logits);
            Ok(Prediction::Class {
                label: linalg::argmax(&logits),
                logits,
                probabilities,
            })
        }
        Task::Regression => Ok(Prediction::Score(apply_regression_head(
            snapshot,
            last.row(trace.cls_position()),
        )?)),
        Task::MaskedLm => {
            let position = seq.mask_position().ok_or_else(|| {
                NxlError::Protocol("language-model prediction needs a flagged MASK position".into())
            })?;
            let logits = apply_lm_head(snapshot, last.row(position))?.into_inner();
            let probabilities = linalg::softmax(&logits);
            Ok(Prediction::Token {
                position,
                token: linalg::argmax(&logits),
                logits,
                probabilities,
            })
        }
    }
}
