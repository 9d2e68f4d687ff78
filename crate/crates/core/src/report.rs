//! Results files: JSON with config echo and input digests, plus CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hierarchy::hex;
use crate::metrics::MetricsReport;
use crate::prompthead::format_param_count;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Conventions every results file states explicitly.
#[derive(Debug, Clone, Serialize)]
pub struct ResultsMetadata {
    pub averaging: &'static str,
    pub f1: &'static str,
    pub empty_prediction_precision: &'static str,
    pub loss_reduction: &'static str,
    pub decision_rule: String,
}

impl ResultsMetadata {
    /// `threshold` is `None` when labels come from an external model.
    pub fn new(threshold: Option<f64>) -> Self {
        ResultsMetadata {
            averaging: "example-based: per-sample precision, recall and Jaccard IoU averaged over samples",
            f1: "harmonic mean of the averaged precision and recall",
            empty_prediction_precision: "0 when the ground-truth set is non-empty",
            loss_reduction: "asymmetric loss averaged over classes, then over the batch",
            decision_rule: match threshold {
                Some(t) => format!("label predicted when p > {t}"),
                None => "external fine-grained predictions mapped up the hierarchy".into(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultsFile {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub metadata: ResultsMetadata,
    pub levels: Vec<MetricsReport>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl ResultsFile {
    pub fn new(
        command: impl Into<String>,
        config: BTreeMap<String, String>,
        inputs: BTreeMap<String, String>,
        threshold: Option<f64>,
        levels: Vec<MetricsReport>,
    ) -> Self {
        ResultsFile {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config,
            inputs,
            metadata: ResultsMetadata::new(threshold),
            levels: levels.iter().map(MetricsReport::rounded).collect(),
            extra: serde_json::Value::Null,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }
}

/// `level,P,R,IOU,F1,#P,params` with two-decimal percentages.
pub fn metrics_csv(levels: &[MetricsReport]) -> String {
    let mut out = String::from("level,P,R,IOU,F1,#P,params\n");
    for r in levels {
        let (short, raw) = match r.trainable_params {
            Some(n) => (format_param_count(n), n.to_string()),
            None => ("-".into(), String::new()),
        };
        let _ = writeln!(
            out,
            "{},{:.2},{:.2},{:.2},{:.2},{},{}",
            r.level, r.precision, r.recall, r.iou, r.f1, short, raw
        );
    }
    out
}

/// `level,label,f1` rows for every scored class.
pub fn per_class_csv(levels: &[MetricsReport]) -> String {
    let mut out = String::from("level,label,f1\n");
    for r in levels {
        for (label, f1) in &r.per_class_f1 {
            let quoted = if label.contains([',', '"']) {
                format!("\"{}\"", label.replace('"', "\"\""))
            } else {
                label.clone()
            };
            let _ = writeln!(out, "{},{},{:.2}", r.level, quoted, f1);
        }
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
