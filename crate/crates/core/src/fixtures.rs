// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic datasets with known evidence, and models trained on them.
//!
//! Vocabulary layout shared by every generator:
//!
//! | id | role |
//! |----|------|
//! | 0 | CLS-analogue |
//! | 1 | MASK |
//! | 2 .. 2+C | planted tokens, one per class (classification, regression) |
//! | 2, 3 | singular / plural subject (masked LM) |
//! | 4, 5 | singular / plural verb (masked LM) |
//! | rest | fillers |
//!
//! Classification: exactly one planted token per sequence; its class is the
//! label and its position is the evidence. Regression: the same, with gold
//! score `-1 + 2c/(C-1)` for planted class `c`. Masked LM: one subject and
//! one MASK slot; the target is the verb agreeing with the subject, the foil
//! the other verb, and the subject position is the evidence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NxlError, Result};
use crate::evaluation::{EvidenceVector, Gold, Instance, LabeledDataset};
use crate::model::train::{self, TrainOptions, TrainSummary, TrainTarget, TrainingExample};
use crate::model::{encode, HeadSelection, InitOptions, ModelConfig, ModelSnapshot, Prediction, Task, TokenSequence};

pub const CLS_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
pub const FIRST_PLANTED: usize = 2;
pub const SINGULAR_SUBJECT: usize = 2;
pub const PLURAL_SUBJECT: usize = 3;
pub const SINGULAR_VERB: usize = 4;
pub const PLURAL_VERB: usize = 5;

/// Accuracy (or Pearson, for regression) a trained fixture must reach.
pub const FIXTURE_THRESHOLD: f64 = 0.99;

/// Shape of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub task: Task,
    pub instances: usize,
    pub vocab_size: usize,
    pub n_classes: usize,
    /// Sequence length range, CLS included.
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    /// Spec sized for `config`: lengths 3..=max_seq_len.
    pub fn for_config(task: Task, instances: usize, config: &ModelConfig) -> Self {
        SyntheticSpec {
            task,
            instances,
            vocab_size: config.vocab_size,
            n_classes: config.n_classes,
            min_len: 3.min(config.max_seq_len),
            max_len: config.max_seq_len,
        }
    }

    fn first_filler(&self) -> usize {
        match self.task {
            Task::MaskedLm => PLURAL_VERB + 1,
            _ => FIRST_PLANTED + self.n_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(NxlError::Config("dataset needs at least one instance".into()));
        }
        if self.task != Task::MaskedLm && self.n_classes < 2 {
            return Err(NxlError::Config("planted datasets need at least two classes".into()));
        }
        let min_len = if self.task == Task::MaskedLm { 3 } else { 2 };
        if self.min_len < min_len || self.min_len > self.max_len {
            return Err(NxlError::Config(format!(
                "sequence lengths {}..={} invalid (minimum {min_len})",
                self.min_len, self.max_len
            )));
        }
        if self.vocab_size <= self.first_filler() {
            return Err(NxlError::Config(format!(
                "vocabulary of {} leaves no filler tokens (need more than {})",
                self.vocab_size,
                self.first_filler()
            )));
        }
        Ok(())
    }
}

fn filler(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> usize {
    rng.random_range(spec.first_filler()..spec.vocab_size)
}

fn regression_score(class: usize, n_classes: usize) -> f64 {
    -1.0 + 2.0 * class as f64 / (n_classes - 1) as f64
}

/// Generates a dataset; deterministic in `seed`. Classes cycle through
/// `0..C` in a shuffled order, so label counts differ by at most one.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labels = if spec.task == Task::MaskedLm { 2 } else { spec.n_classes };
    let mut labels: Vec<usize> = (0..spec.instances).map(|i| i % n_labels).collect();
    labels.shuffle(&mut rng);
    let instances = labels
        .into_iter()
        .enumerate()
        .map(|(i, class)| {
            let n = rng.random_range(spec.min_len..=spec.max_len);
            let mut ids: Vec<usize> = (0..n).map(|_| filler(&mut rng, spec)).collect();
            ids[CLS_TOKEN] = CLS_TOKEN;
            let id = format!("{i:05}");
            match spec.task {
                Task::MaskedLm => {
                    let mut slots: Vec<usize> = (1..n).collect();
                    slots.shuffle(&mut rng);
                    let (subject, mask) = (slots[0], slots[1]);
                    ids[subject] = SINGULAR_SUBJECT + class;
                    ids[mask] = MASK_TOKEN;
                    let target = SINGULAR_VERB + class;
                    Ok(Instance {
                        id,
                        sequence: TokenSequence::new(ids, [])?.with_mask_position(mask)?,
                        gold: Gold::Label(target),
                        evidence: Some(EvidenceVector::from_positions(n, &[subject])?),
                        target_token: Some(target),
                        foil_token: Some(SINGULAR_VERB + 1 - class),
                    })
                }
                task => {
                    let planted = rng.random_range(1..n);
                    ids[planted] = FIRST_PLANTED + class;
                    Ok(Instance {
                        id,
                        sequence: TokenSequence::new(ids, [])?,
                        gold: if task == Task::Regression {
                            Gold::Score(regression_score(class, spec.n_classes))
                        } else {
                            Gold::Label(class)
                        },
                        evidence: Some(EvidenceVector::from_positions(n, &[planted])?),
                        target_token: None,
                        foil_token: None,
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(spec.task, instances)
}

/// Training pairs for a dataset.
pub fn training_examples(dataset: &LabeledDataset) -> Vec<TrainingExample> {
    dataset
        .instances
        .iter()
        .map(|inst| TrainingExample {
            sequence: inst.sequence.clone(),
            target: match (dataset.task, inst.gold) {
                (Task::Classification, g) => TrainTarget::Class(g.label().expect("validated label")),
                (Task::MaskedLm, g) => TrainTarget::Token(g.label().expect("validated label")),
                (Task::Regression, g) => TrainTarget::Score(g.score()),
            },
        })
        .collect()
}

/// How well `snapshot` fits `dataset`: accuracy, or Pearson for regression.
pub fn fit_quality(snapshot: &ModelSnapshot, dataset: &LabeledDataset) -> Result<f64> {
    let predictions = dataset
        .instances
        .iter()
        .map(|inst| {
            let trace = encode(snapshot, &inst.sequence)?;
            crate::model::predict_from_trace(snapshot, &trace, &inst.sequence, dataset.task)
        })
        .collect::<Result<Vec<_>>>()?;
    if dataset.task == Task::Regression {
        let outputs: Vec<f64> = predictions
            .iter()
            .map(|p| match p {
                Prediction::Score(s) => *s,
                _ => unreachable!("regression prediction"),
            })
            .collect();
        let gold: Vec<f64> = dataset.instances.iter().map(|i| i.gold.score()).collect();
        return crate::evaluation::pearson(&outputs, &gold);
    }
    let correct = predictions
        .iter()
        .zip(&dataset.instances)
        .filter(|(p, inst)| p.label() == inst.gold.label())
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Options for [`planted_model`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedOptions {
    pub train_instances: usize,
    pub init_std: f64,
    /// Start every head's value/output pair at identity blocks (plus the
    /// random init), so attention initially copies content.
    pub copy_values: bool,
    pub train: TrainOptions,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        PlantedOptions {
            train_instances: 256,
            init_std: 0.02,
            copy_values: true,
            train: TrainOptions {
                max_steps: 600,
                learning_rate: 0.005,
                ..TrainOptions::default()
            },
        }
    }
}

/// Result of [`planted_model`].
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub snapshot: ModelSnapshot,
    pub summary: TrainSummary,
    /// Accuracy (or Pearson) on the training set after training.
    pub fit: f64,
}

/// Adds identity blocks to each head's value and output projections: head
/// `h` reads and writes coordinates `h*d_head .. (h+1)*d_head`.
pub fn copy_value_init(snapshot: &mut ModelSnapshot) {
    let d_head = snapshot.config.d_head;
    for layer in &mut snapshot.weights.layers {
        for (h, head) in layer.attention.iter_mut().enumerate() {
            for k in 0..d_head {
                head.value.as_mut_slice()[(h * d_head + k) * d_head + k] += 1.0;
                head.output.as_mut_slice()[k * snapshot.config.d_model + h * d_head + k] += 1.0;
            }
        }
    }
}

/// A random model for `config` trained on its own synthetic `task` data.
/// Training stops as soon as every training instance is fitted; the result
/// must reach [`FIXTURE_THRESHOLD`] or a fixture error is returned.
pub fn planted_model(config: ModelConfig, task: Task, seed: u64, options: &PlantedOptions) -> Result<PlantedModel> {
    let mut snapshot = ModelSnapshot::random(
        config,
        HeadSelection::only(task),
        seed,
        InitOptions {
            std: options.init_std,
            random_biases: false,
        },
    )?;
    if options.copy_values {
        copy_value_init(&mut snapshot);
    }
    let spec = SyntheticSpec::for_config(task, options.train_instances, &snapshot.config);
    let data = synthetic_dataset(&spec, seed ^ 0x5EED_DA7A)?;
    let mut train_options = options.train.clone();
    if task == Task::Regression {
        train_options.target_accuracy = None;
    }
    let summary = train::train(&mut snapshot, &training_examples(&data), &train_options)?;
    let fit = fit_quality(&snapshot, &data)?;
    if !(fit >= FIXTURE_THRESHOLD) {
        return Err(NxlError::Fixture(format!(
            "training reached {fit:.4} after {} steps, below the {FIXTURE_THRESHOLD} threshold",
            summary.steps
        )));
    }
    Ok(PlantedModel { snapshot, summary, fit })
}
