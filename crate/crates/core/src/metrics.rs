//! Example-based multi-label metrics, per-class F1, and prediction diffs.
//!
//! P, R and IoU (Jaccard) are computed per sample and averaged; F1 is the
//! harmonic mean of the averaged P and R. All values are percentages.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelSet, LabelSpace, Level};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub n_samples: usize,
}

/// `2PR / (P + R)`, zero when both are zero.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Rounds to two decimals, the precision results tables use.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn check_lengths(predictions: &[LabelSet], targets: &[LabelSet]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} prediction sets vs {} target sets",
            predictions.len(),
            targets.len()
        )));
    }
    if let Some(i) = targets.iter().position(|t| t.is_empty()) {
        return Err(Error::Dataset(format!("target set {i} is empty")));
    }
    Ok(())
}

pub fn evaluate(predictions: &[LabelSet], targets: &[LabelSet]) -> Result<SetMetrics> {
    check_lengths(predictions, targets)?;
    let n = targets.len();
    if n == 0 {
        return Err(Error::Dataset("no samples to evaluate".into()));
    }
    let (mut p_sum, mut r_sum, mut j_sum) = (0.0, 0.0, 0.0);
    for (pred, gt) in predictions.iter().zip(targets) {
        let inter = pred.intersection(gt).count() as f64;
        let union = pred.union(gt).count() as f64;
        // gt is non-empty, so an empty prediction scores zero precision
        p_sum += if pred.is_empty() { 0.0 } else { inter / pred.len() as f64 };
        r_sum += inter / gt.len() as f64;
        j_sum += inter / union;
    }
    let scale = 100.0 / n as f64;
    let precision = p_sum * scale;
    let recall = r_sum * scale;
    Ok(SetMetrics {
        precision,
        recall,
        iou: j_sum * scale,
        f1: f1_score(precision, recall),
        n_samples: n,
    })
}

/// Binary F1 of every class over samples. Classes never present and never
/// predicted are omitted.
pub fn per_class_f1(
    predictions: &[LabelSet],
    targets: &[LabelSet],
    space: &LabelSpace,
) -> Result<BTreeMap<String, f64>> {
    check_lengths(predictions, targets)?;
    let n = space.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; n], vec![0usize; n], vec![0usize; n]);
    for (pred, gt) in predictions.iter().zip(targets) {
        let pi: BTreeSet<usize> = space.indices(pred)?.into_iter().collect();
        let gi: BTreeSet<usize> = space.indices(gt)?.into_iter().collect();
        for &c in pi.intersection(&gi) {
            tp[c] += 1;
        }
        for &c in pi.difference(&gi) {
            fp[c] += 1;
        }
        for &c in gi.difference(&pi) {
            fn_[c] += 1;
        }
    }
    Ok((0..n)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| {
            let f1 = 100.0 * 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64;
            (space.label(c).to_string(), f1)
        })
        .collect())
}

/// Metrics of one hierarchy level, as written to results files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: u8,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub n_samples: usize,
    pub per_class_f1: BTreeMap<String, f64>,
    pub trainable_params: Option<usize>,
}

impl MetricsReport {
    pub fn compute(
        level: Level,
        predictions: &[LabelSet],
        targets: &[LabelSet],
        space: &LabelSpace,
        trainable_params: Option<usize>,
    ) -> Result<Self> {
        let m = evaluate(predictions, targets)?;
        Ok(MetricsReport {
            level: level.number(),
            precision: m.precision,
            recall: m.recall,
            iou: m.iou,
            f1: m.f1,
            n_samples: m.n_samples,
            per_class_f1: per_class_f1(predictions, targets, space)?,
            trainable_params,
        })
    }

    /// Copy with every percentage rounded to two decimals.
    pub fn rounded(&self) -> Self {
        MetricsReport {
            precision: round2(self.precision),
            recall: round2(self.recall),
            iou: round2(self.iou),
            f1: round2(self.f1),
            per_class_f1: self
                .per_class_f1
                .iter()
                .map(|(k, v)| (k.clone(), round2(*v)))
                .collect(),
            ..self.clone()
        }
    }
}

/// Per-level predicted label sets of one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePredictions {
    pub id: String,
    pub labels_l1: LabelSet,
    pub labels_l2: LabelSet,
    pub labels_l3: LabelSet,
}

impl SamplePredictions {
    pub fn labels(&self, level: Level) -> &LabelSet {
        match level {
            Level::Fine => &self.labels_l1,
            Level::Mid => &self.labels_l2,
            Level::Coarse => &self.labels_l3,
        }
    }
}

pub fn predictions_to_jsonl(preds: &[SamplePredictions]) -> String {
    preds
        .iter()
        .map(|p| serde_json::to_string(p).expect("plain record") + "\n")
        .collect()
}

pub fn predictions_from_jsonl(text: &str, origin: &std::path::Path) -> Result<Vec<SamplePredictions>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Two labels with the same parent, one kept by the new model, the other dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiblingPair {
    pub kept: String,
    pub removed: String,
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LevelDiff {
    pub level: u8,
    /// `(new ∩ gt) \ base`: true positives gained.
    pub added_correct: LabelSet,
    /// `(base \ gt) \ new`: wrong predictions the new model no longer makes.
    pub removed_incorrect: LabelSet,
    pub sibling_pairs: Vec<SiblingPair>,
}

impl LevelDiff {
    pub fn is_empty(&self) -> bool {
        self.added_correct.is_empty() && self.removed_incorrect.is_empty() && self.sibling_pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDiff {
    pub id: String,
    pub levels: Vec<LevelDiff>,
}

impl SampleDiff {
    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(LevelDiff::is_empty)
    }
}

/// Compares two sets of predictions against ground truth at one level.
pub fn level_diff(
    level: Level,
    base: &LabelSet,
    new: &LabelSet,
    gt: &LabelSet,
    hierarchy: Option<&Hierarchy>,
) -> LevelDiff {
    let added_correct = new
        .intersection(gt)
        .filter(|l| !base.contains(*l))
        .cloned()
        .collect();
    let removed_incorrect = base
        .iter()
        .filter(|l| !gt.contains(*l) && !new.contains(*l))
        .cloned()
        .collect();
    let mut sibling_pairs = Vec::new();
    if let Some(h) = hierarchy {
        let kept: Vec<&String> = base.intersection(new).collect();
        let dropped: Vec<&String> = base.difference(new).collect();
        for k in &kept {
            let Some(pk) = h.parent(k, level) else { continue };
            for r in &dropped {
                if h.parent(r, level) == Some(pk) {
                    sibling_pairs.push(SiblingPair {
                        kept: (*k).clone(),
                        removed: (*r).clone(),
                        parent: pk.to_string(),
                    });
                }
            }
        }
    }
    LevelDiff {
        level: level.number(),
        added_correct,
        removed_incorrect,
        sibling_pairs,
    }
}

/// Per-sample, per-level differences between a baseline and a new model.
/// All three inputs must cover the same sample ids.
pub fn qualitative_diff(
    base: &[SamplePredictions],
    new: &[SamplePredictions],
    targets: &[SamplePredictions],
    hierarchy: Option<&Hierarchy>,
) -> Result<Vec<SampleDiff>> {
    let index = |preds: &[SamplePredictions], what: &str| -> Result<HashMap<String, usize>> {
        let mut m = HashMap::new();
        for (i, p) in preds.iter().enumerate() {
            if m.insert(p.id.clone(), i).is_some() {
                return Err(Error::Alignment(format!("duplicate id {:?} in {what}", p.id)));
            }
        }
        Ok(m)
    };
    let base_idx = index(base, "baseline predictions")?;
    let new_idx = index(new, "new predictions")?;
    index(targets, "targets")?;
    if base.len() != targets.len() || new.len() != targets.len() {
        return Err(Error::Alignment(format!(
            "baseline has {} samples, new {}, targets {}",
            base.len(),
            new.len(),
            targets.len()
        )));
    }
    targets
        .iter()
        .map(|gt| {
            let b = base_idx
                .get(&gt.id)
                .map(|&i| &base[i])
                .ok_or_else(|| Error::Alignment(format!("sample {:?} missing from baseline", gt.id)))?;
            let n = new_idx
                .get(&gt.id)
                .map(|&i| &new[i])
                .ok_or_else(|| Error::Alignment(format!("sample {:?} missing from new predictions", gt.id)))?;
            Ok(SampleDiff {
                id: gt.id.clone(),
                levels: Level::ALL
                    .iter()
                    .map(|&lv| level_diff(lv, b.labels(lv), n.labels(lv), gt.labels(lv), hierarchy))
                    .collect(),
            })
        })
        .collect()
}

/// Plain-text rendering; samples without differences are skipped.
pub fn render_diff(diffs: &[SampleDiff]) -> String {
    let mut out = String::new();
    let join = |s: &LabelSet| s.iter().cloned().collect::<Vec<_>>().join(", ");
    for d in diffs.iter().filter(|d| !d.is_empty()) {
        let _ = writeln!(out, "{}", d.id);
        for lv in d.levels.iter().filter(|l| !l.is_empty()) {
            if !lv.added_correct.is_empty() {
                let _ = writeln!(out, "  L{} + added correct: {}", lv.level, join(&lv.added_correct));
            }
            if !lv.removed_incorrect.is_empty() {
                let _ = writeln!(out, "  L{} - removed incorrect: {}", lv.level, join(&lv.removed_incorrect));
            }
            for p in &lv.sibling_pairs {
                let _ = writeln!(
                    out,
                    "  L{} ~ kept {:?}, dropped sibling {:?} (parent {:?})",
                    lv.level, p.kept, p.removed, p.parent
                );
            }
        }
    }
    out
}
