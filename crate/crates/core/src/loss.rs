//! Asymmetric multi-label loss and the weighted cross-level objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelSet, LabelSpace, Level};
use crate::prompthead::LevelScores;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probability margin; negatives with `p <= margin` contribute nothing.
    pub margin: f64,
    /// Clamp for the log arguments.
    pub eps: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        AslConfig {
            gamma_pos: 1.0,
            gamma_neg: 2.0,
            margin: 0.05,
            eps: 1e-8,
        }
    }
}

impl AslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config("ASL focusing exponents must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("ASL margin must lie in [0, 1), got {}", self.margin)));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Config(format!("ASL eps must lie in (0, 1), got {}", self.eps)));
        }
        Ok(())
    }
}

/// `x^g` with `0^0 = 1`, and the derivative `g x^(g-1)` with the `g = 0` case
/// pinned to zero.
fn pow_and_slope(x: f64, g: f64) -> (f64, f64) {
    if g == 0.0 {
        (1.0, 0.0)
    } else if x == 0.0 {
        (0.0, if g == 1.0 { 1.0 } else if g > 1.0 { 0.0 } else { f64::INFINITY })
    } else {
        (x.powf(g), g * x.powf(g - 1.0))
    }
}

/// Loss of one class and its derivative w.r.t. `p`.
pub fn asl_term(p: f64, positive: bool, cfg: &AslConfig) -> (f64, f64) {
    if positive {
        let clamped = p.max(cfg.eps);
        let nll = -clamped.ln();
        let dnll = if p > cfg.eps { -1.0 / p } else { 0.0 };
        let (w, dw) = pow_and_slope(1.0 - p, cfg.gamma_pos);
        // d/dp of (1-p)^g is -g(1-p)^(g-1)
        (w * nll, -dw * nll + w * dnll)
    } else {
        let shifted = (p - cfg.margin).max(0.0);
        if shifted == 0.0 {
            return (0.0, 0.0);
        }
        let q = (1.0 - shifted).max(cfg.eps);
        let nll = -q.ln();
        let dnll = if 1.0 - shifted > cfg.eps { 1.0 / (1.0 - shifted) } else { 0.0 };
        let (w, dw) = pow_and_slope(shifted, cfg.gamma_neg);
        (w * nll, dw * nll + w * dnll)
    }
}

/// Class-averaged asymmetric loss of one probability vector.
pub fn asl(p: &[f64], y: &[bool], cfg: &AslConfig) -> Result<f64> {
    Ok(asl_with_grad(p, y, cfg)?.0)
}

/// Class-averaged asymmetric loss and its gradient w.r.t. each `p_c`.
pub fn asl_with_grad(p: &[f64], y: &[bool], cfg: &AslConfig) -> Result<(f64, Vec<f64>)> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "probabilities have {} entries, targets {}",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = p.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pc, &yc) in p.iter().zip(y) {
        let (v, dv) = asl_term(pc, yc, cfg);
        total += v;
        grad.push(dv / n);
    }
    Ok((total / n, grad))
}

/// Binary presence targets of one sample at one level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelTargets {
    pub level: Level,
    pub present: Vec<bool>,
}

impl LevelTargets {
    pub fn from_labels(space: &LabelSpace, labels: &LabelSet) -> Result<Self> {
        let mut present = vec![false; space.len()];
        for idx in space.indices(labels)? {
            present[idx] = true;
        }
        Ok(LevelTargets {
            level: space.level(),
            present,
        })
    }
}

/// Per-level loss averaged over a batch.
pub fn stage1_loss(scores: &[LevelScores], targets: &[LevelTargets], cfg: &AslConfig) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score rows vs {} target rows",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for (s, t) in scores.iter().zip(targets) {
        if s.level != t.level {
            return Err(Error::Shape(format!(
                "scores are for level {}, targets for level {}",
                s.level, t.level
            )));
        }
        total += asl(&s.probs, &t.present, cfg)?;
    }
    Ok(total / scores.len() as f64)
}

/// Level weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaWeights(pub [f64; 3]);

impl Default for LambdaWeights {
    fn default() -> Self {
        LambdaWeights([0.6, 0.25, 0.15])
    }
}

impl LambdaWeights {
    /// Checks non-negativity and, unless `allow_unnormalized`, that the
    /// weights sum to one within 1e-6.
    pub fn validated(weights: [f64; 3], allow_unnormalized: bool) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "lambda weights must be finite and non-negative, got {weights:?}"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if !allow_unnormalized && (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "lambda weights must sum to 1 (got {sum}); pass --allow-unnormalized-lambda to override"
            )));
        }
        Ok(LambdaWeights(weights))
    }

    pub fn get(&self, level: Level) -> f64 {
        self.0[level.slot()]
    }
}

pub fn stage2_loss(per_level: [f64; 3], weights: &LambdaWeights) -> f64 {
    per_level
        .iter()
        .zip(weights.0.iter())
        .map(|(l, w)| l * w)
        .sum()
}
