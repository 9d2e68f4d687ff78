//! Scores externally produced fine-grained predictions at every hierarchy
//! level by mapping them (and the ground truth) upward.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::DatasetSplit;
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelSet, Level};
use crate::metrics::{MetricsReport, SamplePredictions};

/// Raw fine-level predictions of one external model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalPredictions {
    pub model_name: String,
    pub records: Vec<RawPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    pub id: String,
    pub labels_l1: Vec<String>,
}

impl ExternalPredictions {
    pub fn parse_jsonl(model_name: impl Into<String>, text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: RawPrediction = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert(rec.id.clone()) {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: format!("duplicate prediction id {:?}", rec.id),
                });
            }
            records.push(rec);
        }
        Ok(ExternalPredictions {
            model_name: model_name.into(),
            records,
        })
    }

    pub fn load(model_name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(model_name, &text, path)
    }
}

/// Matches free-text labels to the fine label space: exact match, then
/// trimmed lowercase match, then the alias table.
#[derive(Debug, Clone)]
pub struct LabelMatcher {
    exact: HashSet<String>,
    /// Lowercased label -> canonical, `None` when two labels collide.
    folded: HashMap<String, Option<String>>,
    aliases: HashMap<String, String>,
}

impl LabelMatcher {
    pub fn new(h: &Hierarchy) -> Self {
        let space = h.space(Level::Fine);
        let mut folded: HashMap<String, Option<String>> = HashMap::new();
        for l in space.labels() {
            folded
                .entry(l.to_lowercase())
                .and_modify(|v| *v = None)
                .or_insert_with(|| Some(l.clone()));
        }
        LabelMatcher {
            exact: space.labels().iter().cloned().collect(),
            folded,
            aliases: HashMap::new(),
        }
    }

    /// Adds aliases from a TSV of `variant<TAB>canonical` rows. `#` starts a comment.
    pub fn with_alias_tsv(mut self, text: &str, origin: &Path) -> Result<Self> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message,
            };
            let cols: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if cols.len() != 2 || cols.iter().any(|c| c.is_empty()) {
                return Err(err("expected \"variant<TAB>canonical\"".into()));
            }
            if !self.exact.contains(cols[1]) {
                return Err(err(format!("alias target {:?} is not a fine-level label", cols[1])));
            }
            self.aliases.insert(cols[0].to_lowercase(), cols[1].to_string());
        }
        Ok(self)
    }

    pub fn resolve(&self, raw: &str) -> Option<&str> {
        let t = raw.trim();
        if let Some(l) = self.exact.get(t) {
            return Some(l.as_str());
        }
        let folded = t.to_lowercase();
        if let Some(Some(l)) = self.folded.get(&folded) {
            return Some(l.as_str());
        }
        self.aliases.get(&folded).map(String::as_str)
    }
}

/// Fine-level predictions after label matching.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPrediction {
    pub id: String,
    pub labels: LabelSet,
    pub unmatched: Vec<String>,
}

pub fn match_predictions(preds: &ExternalPredictions, matcher: &LabelMatcher) -> Vec<MatchedPrediction> {
    preds
        .records
        .iter()
        .map(|r| {
            let mut labels = LabelSet::new();
            let mut unmatched = Vec::new();
            for raw in &r.labels_l1 {
                match matcher.resolve(raw) {
                    Some(l) => {
                        labels.insert(l.to_string());
                    }
                    None => unmatched.push(raw.clone()),
                }
            }
            MatchedPrediction {
                id: r.id.clone(),
                labels,
                unmatched,
            }
        })
        .collect()
}

/// Derives mid and coarse predictions from fine ones.
pub fn map_predictions(h: &Hierarchy, fine: &LabelSet) -> Result<(LabelSet, LabelSet)> {
    h.derive_label_sets(fine)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub model_name: String,
    pub levels: Vec<MetricsReport>,
    pub unmatched_label_count: usize,
    /// Unmatched raw label -> occurrences.
    pub unmatched_labels: BTreeMap<String, usize>,
    pub predictions: Vec<SamplePredictions>,
}

/// Maps predictions up the hierarchy and scores each level against the
/// derived ground truth. Every sample in `data` needs a prediction and
/// vice versa.
pub fn evaluate_zeroshot(
    preds: &ExternalPredictions,
    data: &DatasetSplit,
    h: &Hierarchy,
    matcher: &LabelMatcher,
) -> Result<ZeroShotReport> {
    let matched = match_predictions(preds, matcher);
    let by_id: HashMap<&str, &MatchedPrediction> = matched.iter().map(|m| (m.id.as_str(), m)).collect();
    if let Some(extra) = matched.iter().find(|m| data.get(&m.id).is_none()) {
        return Err(Error::Alignment(format!(
            "prediction for unknown sample {:?}",
            extra.id
        )));
    }

    let mut unmatched_labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut mapped = Vec::with_capacity(data.len());
    for s in &data.samples {
        let m = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Alignment(format!("no prediction for sample {:?}", s.id)))?;
        for u in &m.unmatched {
            *unmatched_labels.entry(u.clone()).or_default() += 1;
        }
        let (p2, p3) = map_predictions(h, &m.labels)?;
        mapped.push(SamplePredictions {
            id: s.id.clone(),
            labels_l1: m.labels.clone(),
            labels_l2: p2,
            labels_l3: p3,
        });
    }

    let levels = Level::ALL
        .iter()
        .map(|&lv| {
            let p: Vec<LabelSet> = mapped.iter().map(|m| m.labels(lv).clone()).collect();
            MetricsReport::compute(lv, &p, &data.targets(lv), h.space(lv), None)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ZeroShotReport {
        model_name: preds.model_name.clone(),
        levels,
        unmatched_label_count: unmatched_labels.values().sum(),
        unmatched_labels,
        predictions: mapped,
    })
}
