// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON and CSV renderings of evaluation reports.
//!
//! CSV files start with one `#` comment line carrying the provenance
//! (`tool`, `tool_version`, `config_hash`, `seed`), then a header row.
//!
//! * faithfulness: `method,ratio,aopc,accuracy,evaluated,skipped`
//! * alignment: `variant,layer,mean_dot,mean_ap,instances`
//!
//! Undefined values are written as empty fields. Numbers use the shortest
//! representation that round-trips.

use std::fmt::Write;

use serde::Serialize;

use crate::evaluation::{AlignmentReport, FaithfulnessReport};
use crate::model::Provenance;

fn provenance_line(p: &Provenance) -> String {
    format!(
        "# tool={} tool_version={} config_hash={} seed={}\n",
        p.tool, p.tool_version, p.config_hash, p.seed
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

/// One CSV for several methods run under the same provenance.
pub fn faithfulness_csv(provenance: &Provenance, reports: &[FaithfulnessReport]) -> String {
    let mut out = provenance_line(provenance);
    out.push_str("method,ratio,aopc,accuracy,evaluated,skipped\n");
    for r in reports {
        for e in &r.entries {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.method.method,
                e.ratio,
                opt(e.aopc),
                opt(e.accuracy),
                e.evaluated,
                e.skipped
            )
            .expect("string write");
        }
    }
    out
}

pub fn alignment_csv(report: &AlignmentReport) -> String {
    let mut out = provenance_line(&report.provenance);
    out.push_str("variant,layer,mean_dot,mean_ap,instances\n");
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.variant, row.layer, row.mean_dot, row.mean_ap, row.instances
        )
        .expect("string write");
    }
    out
}
