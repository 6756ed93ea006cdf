// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer agreement between attributions and annotated evidence.
//!
//! Scores and evidence are compared over non-special positions only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attr_l2norm, attr_logat_lm};
use crate::error::{NxlError, Result};
use crate::evaluation::metrics::{average_precision, dot_alignment};
use crate::evaluation::{Instance, LabeledDataset};
use crate::model::{encode, ForwardTrace, ModelSnapshot, Provenance, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignmentVariant {
    /// LogAt for the instance's target token.
    LogatTarget,
    /// LogAt for the instance's foil token.
    LogatFoil,
    /// LogAt for a fixed vocabulary entry.
    LogatToken { token: usize },
    /// NormXLogit for the target token.
    Normxlogit,
    /// Input-embedding norms; a single layer-0 row.
    L2norm,
}

impl AlignmentVariant {
    pub fn name(self) -> String {
        match self {
            AlignmentVariant::LogatTarget => "logat_target".into(),
            AlignmentVariant::LogatFoil => "logat_foil".into(),
            AlignmentVariant::LogatToken { token } => format!("logat_token_{token}"),
            AlignmentVariant::Normxlogit => "normxlogit".into(),
            AlignmentVariant::L2norm => "l2norm".into(),
        }
    }

    pub fn default_set() -> Vec<AlignmentVariant> {
        vec![
            AlignmentVariant::LogatTarget,
            AlignmentVariant::LogatFoil,
            AlignmentVariant::Normxlogit,
            AlignmentVariant::L2norm,
        ]
    }

    fn layers(self, n_layers: usize) -> std::ops::RangeInclusive<usize> {
        match self {
            AlignmentVariant::L2norm => 0..=0,
            _ => 1..=n_layers,
        }
    }
}

impl std::str::FromStr for AlignmentVariant {
    type Err = NxlError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "logat_target" | "target" => AlignmentVariant::LogatTarget,
            "logat_foil" | "foil" => AlignmentVariant::LogatFoil,
            "normxlogit" => AlignmentVariant::Normxlogit,
            "l2norm" => AlignmentVariant::L2norm,
            other => {
                let token = other
                    .strip_prefix("logat_token_")
                    .or_else(|| other.strip_prefix("token:"))
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| NxlError::Config(format!("unknown alignment variant {other:?}")))?;
                AlignmentVariant::LogatToken { token }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub variant: String,
    pub layer: usize,
    pub mean_dot: f64,
    pub mean_ap: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub provenance: Provenance,
    pub variants: Vec<AlignmentVariant>,
    pub instances: usize,
    pub rows: Vec<AlignmentRow>,
}

/// Raw per-position scores for one variant at one layer.
pub fn variant_scores(
    snapshot: &ModelSnapshot,
    trace: &ForwardTrace,
    instance: &Instance,
    variant: AlignmentVariant,
    layer: usize,
) -> Result<Vec<f64>> {
    let token = |t: Option<usize>, what: &str| {
        t.ok_or_else(|| NxlError::Load {
            what: format!("instance {}", instance.id),
            reason: format!("alignment needs a {what} token"),
        })
    };
    Ok(match variant {
        AlignmentVariant::L2norm => attr_l2norm(trace).scores,
        AlignmentVariant::LogatTarget => attr_logat_lm(snapshot, trace, token(instance.target_token, "target")?, layer)?.scores,
        AlignmentVariant::LogatFoil => attr_logat_lm(snapshot, trace, token(instance.foil_token, "foil")?, layer)?.scores,
        AlignmentVariant::LogatToken { token } => attr_logat_lm(snapshot, trace, token, layer)?.scores,
        AlignmentVariant::Normxlogit => {
            let logat = attr_logat_lm(snapshot, trace, token(instance.target_token, "target")?, layer)?;
            attr_l2norm(trace).scores.iter().zip(&logat.scores).map(|(n, s)| n * s).collect()
        }
    })
}

/// `(dot, AP)` over the non-special positions of `instance`.
pub fn instance_alignment(instance: &Instance, scores: &[f64]) -> Result<(f64, f64)> {
    let evidence = instance.evidence.as_ref().ok_or_else(|| NxlError::Load {
        what: format!("instance {}", instance.id),
        reason: "alignment needs evidence".into(),
    })?;
    let eligible = instance.sequence.eligible_positions();
    let e = evidence.select(&eligible);
    let s: Vec<f64> = eligible.iter().map(|&p| scores[p]).collect();
    Ok((dot_alignment(&e, &s)?, average_precision(&e, &s)?))
}

/// Dataset-mean dot product and AP per variant and layer.
pub fn per_layer_alignment(
    snapshot: &ModelSnapshot,
    dataset: &LabeledDataset,
    variants: &[AlignmentVariant],
    provenance: Provenance,
) -> Result<AlignmentReport> {
    if dataset.task != Task::MaskedLm {
        return Err(NxlError::Config("per-layer alignment needs a masked-LM dataset".into()));
    }
    if variants.is_empty() {
        return Err(NxlError::Config("no alignment variants requested".into()));
    }
    dataset.validate_for(snapshot)?;
    let n_layers = snapshot.config.n_layers;
    let cells: Vec<(AlignmentVariant, usize)> =
        variants.iter().flat_map(|&v| v.layers(n_layers).map(move |l| (v, l))).collect();
    let per_instance: Vec<Vec<(f64, f64)>> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let trace = encode(snapshot, &inst.sequence)?;
            cells
                .iter()
                .map(|&(v, l)| instance_alignment(inst, &variant_scores(snapshot, &trace, inst, v, l)?))
                .collect()
        })
        .collect::<Result<_>>()?;
    let m = dataset.len() as f64;
    let rows = cells
        .iter()
        .enumerate()
        .map(|(c, &(v, layer))| {
            let (dot, ap) = per_instance.iter().fold((0.0, 0.0), |(d, a), inst| (d + inst[c].0, a + inst[c].1));
            AlignmentRow {
                variant: v.name(),
                layer,
                mean_dot: dot / m,
                mean_ap: ap / m,
                instances: dataset.len(),
            }
        })
        .collect();
    Ok(AlignmentReport {
        provenance,
        variants: variants.to_vec(),
        instances: dataset.len(),
        rows,
    })
}
