// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labelled datasets in JSONL form.
//!
//! One instance per line:
//! `{"id", "tokens", "special", "gold", "evidence"?, "target_token"?, "foil_token"?}`.
//! A line holding only a `"meta"` object (written first by this crate) is
//! skipped on load, as are blank lines.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NxlError, Result};
use crate::model::{ModelSnapshot, Provenance, Task, TokenSequence};

/// Gold annotation: a class / vocabulary index or a real-valued score.
///
/// JSON integers read as labels and JSON floats as scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Label(usize),
    Score(f64),
}

impl Gold {
    pub fn label(self) -> Option<usize> {
        match self {
            Gold::Label(l) => Some(l),
            Gold::Score(_) => None,
        }
    }

    pub fn score(self) -> f64 {
        match self {
            Gold::Label(l) => l as f64,
            Gold::Score(s) => s,
        }
    }
}

/// Binary ground-truth rationale over token positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceVector {
    bits: Vec<bool>,
}

impl EvidenceVector {
    pub fn new(bits: Vec<bool>) -> Self {
        EvidenceVector { bits }
    }

    /// Indicator vector of length `n` with ones at `positions`.
    pub fn from_positions(n: usize, positions: &[usize]) -> Result<Self> {
        let mut bits = vec![false; n];
        for &p in positions {
            *bits
                .get_mut(p)
                .ok_or_else(|| NxlError::Index(format!("evidence position {p} outside length {n}")))? = true;
        }
        Ok(EvidenceVector { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Evidence restricted to `positions`, in that order.
    pub fn select(&self, positions: &[usize]) -> EvidenceVector {
        EvidenceVector {
            bits: positions.iter().map(|&p| self.bits[p]).collect(),
        }
    }
}

impl Serialize for EvidenceVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.bits.iter().map(|&b| u8::from(b)))
    }
}

impl<'de> Deserialize<'de> for EvidenceVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        let bits = raw
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("evidence bit must be 0 or 1, got {other}"))),
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(EvidenceVector { bits })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub sequence: TokenSequence,
    pub gold: Gold,
    pub evidence: Option<EvidenceVector>,
    pub target_token: Option<usize>,
    pub foil_token: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub task: Task,
    pub instances: Vec<Instance>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdRepr {
    Text(String),
    Number(u64),
}

fn de_id<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    Ok(match IdRepr::deserialize(d)? {
        IdRepr::Text(s) => s,
        IdRepr::Number(n) => n.to_string(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(deserialize_with = "de_id")]
    id: String,
    tokens: Vec<usize>,
    #[serde(default)]
    special: Vec<usize>,
    gold: Gold,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    evidence: Option<EvidenceVector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    foil_token: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct MetaLine<'a> {
    pub meta: std::borrow::Cow<'a, Provenance>,
}

fn data_error(line: usize, reason: impl Into<String>) -> NxlError {
    NxlError::Load {
        what: format!("dataset line {line}"),
        reason: reason.into(),
    }
}

/// Task implied by the records: masked LM if any instance names a target
/// token, classification if every gold value is an integer, otherwise
/// regression.
fn infer_task(records: &[(usize, Record)]) -> Task {
    if records.iter().any(|(_, r)| r.target_token.is_some()) {
        Task::MaskedLm
    } else if records.iter().all(|(_, r)| matches!(r.gold, Gold::Label(_))) {
        Task::Classification
    } else {
        Task::Regression
    }
}

impl Instance {
    fn from_record(line: usize, r: Record, task: Task) -> Result<Self> {
        let n = r.tokens.len();
        let mut sequence = TokenSequence::new(r.tokens, r.special.iter().copied()).map_err(|e| data_error(line, e.to_string()))?;
        if task == Task::MaskedLm {
            let candidates: Vec<usize> = r.special.iter().copied().filter(|&p| p != 0).collect();
            let &[mask] = candidates.as_slice() else {
                return Err(data_error(
                    line,
                    format!("masked-LM instance needs exactly one non-CLS special position, found {}", candidates.len()),
                ));
            };
            sequence = sequence.with_mask_position(mask)?;
        }
        let gold = match (task, r.gold) {
            (Task::Regression, g) => Gold::Score(g.score()),
            (_, Gold::Label(l)) => Gold::Label(l),
            (_, Gold::Score(s)) => return Err(data_error(line, format!("{task} gold must be an integer, got {s}"))),
        };
        if let Some(ev) = &r.evidence {
            if ev.len() != n {
                return Err(data_error(line, format!("evidence length {} differs from sequence length {n}", ev.len())));
            }
        }
        if task == Task::MaskedLm && r.target_token.is_none() {
            return Err(data_error(line, "masked-LM instance needs target_token"));
        }
        Ok(Instance {
            id: r.id,
            sequence,
            gold,
            evidence: r.evidence,
            target_token: r.target_token,
            foil_token: r.foil_token,
        })
    }

    fn to_record(&self) -> Record {
        Record {
            id: self.id.clone(),
            tokens: self.sequence.token_ids().to_vec(),
            special: self.sequence.special_positions().iter().copied().collect(),
            gold: self.gold,
            evidence: self.evidence.clone(),
            target_token: self.target_token,
            foil_token: self.foil_token,
        }
    }
}

impl LabeledDataset {
    pub fn new(task: Task, instances: Vec<Instance>) -> Result<Self> {
        let ds = LabeledDataset { task, instances };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(NxlError::Load {
                what: "dataset".into(),
                reason: "no instances".into(),
            });
        }
        for (i, inst) in self.instances.iter().enumerate() {
            let gold_ok = match self.task {
                Task::Regression => matches!(inst.gold, Gold::Score(_)),
                _ => matches!(inst.gold, Gold::Label(_)),
            };
            if !gold_ok {
                return Err(data_error(i + 1, format!("gold {:?} does not match task {}", inst.gold, self.task)));
            }
            if let Some(ev) = &inst.evidence {
                if ev.len() != inst.sequence.len() {
                    return Err(data_error(i + 1, "evidence length differs from sequence length"));
                }
            }
            if self.task == Task::MaskedLm && (inst.sequence.mask_position().is_none() || inst.target_token.is_none()) {
                return Err(data_error(i + 1, "masked-LM instance needs a MASK position and target_token"));
            }
        }
        Ok(())
    }

    /// Checks every sequence, gold label and token annotation against a model.
    pub fn validate_for(&self, snapshot: &ModelSnapshot) -> Result<()> {
        snapshot.require_head(self.task)?;
        let config = &snapshot.config;
        for inst in &self.instances {
            inst.sequence.validate_for(config)?;
            let limit = match self.task {
                Task::Classification => config.n_classes,
                Task::MaskedLm => config.vocab_size,
                Task::Regression => usize::MAX,
            };
            if let Gold::Label(l) = inst.gold {
                if l >= limit {
                    return Err(NxlError::Index(format!("instance {}: gold label {l} out of range", inst.id)));
                }
            }
            for id in [inst.target_token, inst.foil_token].into_iter().flatten() {
                if id >= config.vocab_size {
                    return Err(NxlError::Vocabulary {
                        id,
                        vocab_size: config.vocab_size,
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses JSONL text. `task` overrides inference from the records.
    pub fn from_jsonl(text: &str, task: Option<Task>) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(line).map_err(|e| data_error(line_no, e.to_string()))?;
            if value.get("meta").is_some() {
                continue;
            }
            let record: Record = serde_json::from_value(value).map_err(|e| data_error(line_no, e.to_string()))?;
            records.push((line_no, record));
        }
        let task = task.unwrap_or_else(|| infer_task(&records));
        let instances = records
            .into_iter()
            .map(|(line, r)| Instance::from_record(line, r, task))
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(task, instances)
    }

    pub fn load(path: &Path, task: Option<Task>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NxlError::io(path, e))?;
        Self::from_jsonl(&text, task)
    }

    /// JSONL bytes, preceded by a meta line when `provenance` is given.
    pub fn to_jsonl(&self, provenance: Option<&Provenance>) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(p) = provenance {
            serde_json::to_writer(&mut out, &MetaLine { meta: std::borrow::Cow::Borrowed(p) }).expect("meta serializes");
            out.push(b'\n');
        }
        for inst in &self.instances {
            serde_json::to_writer(&mut out, &inst.to_record()).expect("record serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn save(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| NxlError::io(path, e))?;
        file.write_all(&self.to_jsonl(provenance)).map_err(|e| NxlError::io(path, e))
    }

    /// SHA-256 of the instance lines (without any meta line).
    pub fn content_hash(&self) -> String {
        crate::model::sha256_hex(&self.to_jsonl(None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINES: &str = r#"{"meta":{"tool":"nxl","tool_version":"0","config_hash":"x","seed":1}}
{"id":"a","tokens":[0,4,5],"special":[0],"gold":1,"evidence":[0,1,0]}

{"id":7,"tokens":[0,6],"special":[],"gold":0}
"#;

    #[test]
    fn parses_and_skips_meta_and_blank_lines() {
        let ds = LabeledDataset::from_jsonl(LINES, None).unwrap();
        assert_eq!(ds.task, Task::Classification);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.instances[1].id, "7");
        assert_eq!(ds.instances[0].evidence.as_ref().unwrap().positions(), vec![1]);
        assert!(ds.instances[1].sequence.is_special(0));
    }

    #[test]
    fn round_trips_through_jsonl() {
        let ds = LabeledDataset::from_jsonl(LINES, None).unwrap();
        let p = Provenance::current("abc".into(), 3);
        let bytes = ds.to_jsonl(Some(&p));
        let back = LabeledDataset::from_jsonl(std::str::from_utf8(&bytes).unwrap(), None).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(Some(&p)), bytes);
    }

    #[test]
    fn infers_regression_and_masked_lm() {
        let reg = LabeledDataset::from_jsonl(r#"{"id":"r","tokens":[0,2],"gold":0.5}"#, None).unwrap();
        assert_eq!(reg.task, Task::Regression);
        let lm = LabeledDataset::from_jsonl(
            r#"{"id":"m","tokens":[0,2,1,3],"special":[0,2],"gold":4,"evidence":[0,1,0,0],"target_token":4,"foil_token":5}"#,
            None,
        )
        .unwrap();
        assert_eq!(lm.task, Task::MaskedLm);
        assert_eq!(lm.instances[0].sequence.mask_position(), Some(2));
        // integer gold scores become regression scores under an override
        let forced = LabeledDataset::from_jsonl(r#"{"id":"r","tokens":[0,2],"gold":3}"#, Some(Task::Regression)).unwrap();
        assert_eq!(forced.instances[0].gold, Gold::Score(3.0));
    }

    #[test]
    fn rejects_malformed_instances() {
        let cases = [
            r#"{"id":"a","tokens":[],"gold":1}"#,
            r#"{"id":"a","tokens":[0,1],"gold":1,"evidence":[1]}"#,
            r#"{"id":"a","tokens":[0,1],"gold":1,"evidence":[0,2]}"#,
            r#"{"id":"a","tokens":[0,1],"gold":1,"extra":true}"#,
            r#"{"id":"a","tokens":[0,1],"special":[5],"gold":1}"#,
            r#"{"id":"a","tokens":[0,1,2],"special":[0],"gold":1,"target_token":3}"#,
            "not json",
        ];
        for case in cases {
            let err = LabeledDataset::from_jsonl(case, None).unwrap_err();
            assert_eq!(err.exit_code(), 3, "{case}: {err}");
        }
        assert!(LabeledDataset::from_jsonl("", None).is_err());
        assert!(LabeledDataset::from_jsonl(r#"{"id":"a","tokens":[0,1],"gold":0.5}"#, Some(Task::Classification)).is_err());
    }
}
