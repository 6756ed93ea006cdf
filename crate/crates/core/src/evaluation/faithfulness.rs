// SPDX-License-Identifier: MIT OR Apache-2.0

//! Perturbation curves: AOPC and accuracy (or Pearson correlation for
//! regression) after perturbing the top-K% ranked tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_with_trace, rank_tokens, AttributionRequest, Method, MethodParams, RankOrder};
use crate::error::{NxlError, Result};
use crate::evaluation::metrics::pearson;
use crate::evaluation::perturb::{is_degenerate, perturb, PerturbationMode, PerturbationSpec};
use crate::evaluation::{Gold, LabeledDataset};
use crate::model::{encode, predict_from_trace, ModelSnapshot, Prediction, Provenance, Task};

/// Method settings shared by every instance of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub params: MethodParams,
    /// LogAt layer; `None` is the last layer.
    pub layer: Option<usize>,
    /// Explained label; `None` explains each instance's own prediction.
    pub target_label: Option<usize>,
    pub rank_order: RankOrder,
    pub seed: u64,
}

impl MethodConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        MethodConfig {
            method,
            params: MethodParams::default(),
            layer: None,
            target_label: None,
            rank_order: RankOrder::default(),
            seed,
        }
    }

    /// The request for instance `index` of a dataset.
    pub fn request(&self, task: Task, index: usize) -> AttributionRequest {
        AttributionRequest {
            method: self.method,
            task,
            target_label: self.target_label,
            layer: self.layer,
            params: self.params,
            seed: instance_seed(self.seed, index),
        }
    }
}

/// Per-instance seed derived from a run seed (splitmix64 finalizer).
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One point of a perturbation curve. `None` values mark metrics that are
/// undefined at that ratio (no evaluable instance, or zero variance for
/// Pearson).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    pub ratio: f64,
    pub aopc: Option<f64>,
    pub accuracy: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMetric {
    Accuracy,
    Pearson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub provenance: Provenance,
    pub task: Task,
    pub method: MethodConfig,
    pub perturbation: PerturbationSpec,
    pub instances: usize,
    pub accuracy_metric: AccuracyMetric,
    /// Accuracy (or Pearson) on the unperturbed inputs.
    pub unperturbed_accuracy: Option<f64>,
    pub entries: Vec<RatioEntry>,
    /// Mean of the defined per-ratio AOPC values; absent for regression.
    pub mean_aopc: Option<f64>,
    pub mean_accuracy: Option<f64>,
    /// Instance-ratio pairs skipped as degenerate, summed over ratios.
    pub skipped_total: usize,
}

#[derive(Debug, Clone, Copy)]
struct Observation {
    /// Probability of the frozen prediction (label tasks).
    probability: Option<f64>,
    label: Option<usize>,
    score: Option<f64>,
}

struct InstanceOutcome {
    original: Observation,
    perturbed: Vec<Option<Observation>>,
}

fn observe(prediction: &Prediction, frozen: Option<usize>) -> Observation {
    match prediction {
        Prediction::Score(s) => Observation {
            probability: None,
            label: None,
            score: Some(*s),
        },
        p => Observation {
            probability: frozen.and_then(|y| p.probability_of(y)),
            label: p.label(),
            score: None,
        },
    }
}

fn evaluate_instance(
    snapshot: &ModelSnapshot,
    dataset: &LabeledDataset,
    index: usize,
    config: &MethodConfig,
    spec: &PerturbationSpec,
) -> Result<InstanceOutcome> {
    let task = dataset.task;
    let seq = &dataset.instances[index].sequence;
    let trace = encode(snapshot, seq)?;
    let prediction = predict_from_trace(snapshot, &trace, seq, task)?;
    let frozen = prediction.label();
    let original = observe(&prediction, frozen);
    let eligible = seq.eligible_positions();
    if eligible.is_empty() {
        return Ok(InstanceOutcome {
            original,
            perturbed: vec![None; spec.ratios.len()],
        });
    }
    let result = attribute_with_trace(snapshot, &trace, seq, &config.request(task, index))?;
    let ranking = rank_tokens(&result, &eligible, config.rank_order)?;
    let perturbed = spec
        .ratios
        .iter()
        .map(|&ratio| {
            let p = perturb(seq, &ranking, ratio, spec)?;
            if spec.mode == PerturbationMode::Delete && is_degenerate(&p) {
                return Ok(None);
            }
            let trace = encode(snapshot, &p)?;
            Ok(Some(observe(&predict_from_trace(snapshot, &trace, &p, task)?, frozen)))
        })
        .collect::<Result<_>>()?;
    Ok(InstanceOutcome { original, perturbed })
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Accuracy over `(observation, gold)` pairs; `None` when undefined.
fn accuracy_of(task: Task, pairs: &[(Observation, Gold)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    match task {
        Task::Regression => {
            let outputs: Vec<f64> = pairs.iter().map(|(o, _)| o.score.expect("regression observation")).collect();
            let gold: Vec<f64> = pairs.iter().map(|(_, g)| g.score()).collect();
            pearson(&outputs, &gold).ok()
        }
        _ => {
            let correct = pairs.iter().filter(|(o, g)| o.label.is_some() && o.label == g.label()).count();
            Some(correct as f64 / pairs.len() as f64)
        }
    }
}

/// AOPC and accuracy curves for one method over a dataset.
///
/// Instances are evaluated in parallel and reduced in dataset order, so the
/// report does not depend on the thread count.
pub fn faithfulness(
    snapshot: &ModelSnapshot,
    dataset: &LabeledDataset,
    config: &MethodConfig,
    spec: &PerturbationSpec,
    provenance: Provenance,
) -> Result<FaithfulnessReport> {
    spec.validate()?;
    spec.validate_vocab(snapshot.config.vocab_size)?;
    dataset.validate_for(snapshot)?;
    let task = dataset.task;
    let outcomes: Vec<InstanceOutcome> = (0..dataset.len())
        .into_par_iter()
        .map(|i| evaluate_instance(snapshot, dataset, i, config, spec))
        .collect::<Result<_>>()?;

    let golds: Vec<Gold> = dataset.instances.iter().map(|inst| inst.gold).collect();
    let baseline_pairs: Vec<(Observation, Gold)> = outcomes.iter().map(|o| o.original).zip(golds.iter().copied()).collect();
    let unperturbed_accuracy = accuracy_of(task, &baseline_pairs);

    let mut entries = Vec::with_capacity(spec.ratios.len());
    for (r, &ratio) in spec.ratios.iter().enumerate() {
        let mut drops = Vec::new();
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for (outcome, &gold) in outcomes.iter().zip(&golds) {
            match outcome.perturbed[r] {
                Some(obs) => {
                    if let (Some(before), Some(after)) = (outcome.original.probability, obs.probability) {
                        drops.push(before - after);
                    }
                    pairs.push((obs, gold));
                }
                None => skipped += 1,
            }
        }
        entries.push(RatioEntry {
            ratio,
            aopc: if task == Task::Regression { None } else { mean(&drops) },
            accuracy: accuracy_of(task, &pairs),
            evaluated: pairs.len(),
            skipped,
        });
    }
    let defined = |f: fn(&RatioEntry) -> Option<f64>| mean(&entries.iter().filter_map(f).collect::<Vec<_>>());
    let mean_aopc = defined(|e| e.aopc);
    let mean_accuracy = defined(|e| e.accuracy);
    let skipped_total = entries.iter().map(|e| e.skipped).sum();
    Ok(FaithfulnessReport {
        provenance,
        task,
        method: config.clone(),
        perturbation: spec.clone(),
        instances: dataset.len(),
        accuracy_metric: if task == Task::Regression {
            AccuracyMetric::Pearson
        } else {
            AccuracyMetric::Accuracy
        },
        unperturbed_accuracy,
        entries,
        mean_aopc,
        mean_accuracy,
        skipped_total,
    })
}

/// AOPC curve; requires a classification or masked-LM dataset.
pub fn aopc(
    snapshot: &ModelSnapshot,
    dataset: &LabeledDataset,
    config: &MethodConfig,
    spec: &PerturbationSpec,
    provenance: Provenance,
) -> Result<FaithfulnessReport> {
    if dataset.task == Task::Regression {
        return Err(NxlError::Config("AOPC needs a classification or masked-LM dataset".into()));
    }
    faithfulness(snapshot, dataset, config, spec, provenance)
}

/// Accuracy (or Pearson) curve. Regression runs with fewer than two
/// instances, or with constant outputs at every ratio, are undefined.
pub fn accuracy_under_perturbation(
    snapshot: &ModelSnapshot,
    dataset: &LabeledDataset,
    config: &MethodConfig,
    spec: &PerturbationSpec,
    provenance: Provenance,
) -> Result<FaithfulnessReport> {
    if dataset.task == Task::Regression && dataset.len() < 2 {
        return Err(NxlError::UndefinedMetric("pearson needs at least two instances".into()));
    }
    let report = faithfulness(snapshot, dataset, config, spec, provenance)?;
    if dataset.task == Task::Regression && report.mean_accuracy.is_none() {
        return Err(NxlError::UndefinedMetric("pearson undefined at every ratio".into()));
    }
    Ok(report)
}
