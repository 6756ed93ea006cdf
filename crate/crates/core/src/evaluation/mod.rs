// SPDX-License-Identifier: MIT OR Apache-2.0

//! Faithfulness and evidence-alignment evaluation over labelled datasets.

mod alignment;
mod dataset;
mod faithfulness;
pub mod metrics;
pub mod perturb;
pub mod report;

pub use alignment::{
    instance_alignment, per_layer_alignment, variant_scores, AlignmentReport, AlignmentRow, AlignmentVariant,
};
pub use dataset::{EvidenceVector, Gold, Instance, LabeledDataset};
pub use faithfulness::{
    accuracy_under_perturbation, aopc, faithfulness, instance_seed, AccuracyMetric, FaithfulnessReport, MethodConfig,
    RatioEntry,
};
pub use metrics::{average_precision, dot_alignment, pearson, rank_by_score};
pub use perturb::{default_ratios, perturb, PerturbationMode, PerturbationSpec};
