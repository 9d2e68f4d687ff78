//! Brute-force reference implementations. Nothing here calls into the
//! library code it is used to check.

use std::collections::BTreeSet;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub oracle: &'static str,
    pub inputs_digest: String,
    pub values: Vec<f64>,
    pub tolerance: f64,
}

fn digest(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Non-negative fraction, always reduced.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Frac {
    num: u128,
    den: u128,
}

impl Frac {
    fn new(num: u128, den: u128) -> Frac {
        assert!(den > 0);
        let g = gcd(num, den).max(1);
        Frac { num: num / g, den: den / g }
    }
    fn add(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
    fn mul(self, o: Frac) -> Frac {
        Frac::new(self.num * o.num, self.den * o.den)
    }
    fn div(self, o: Frac) -> Frac {
        Frac::new(self.num * o.den, self.den * o.num)
    }
    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Example-based (P, R, IoU, F1) in percent, by exact rational arithmetic on
/// plain label lists. Empty predictions score zero precision.
pub fn oracle_metrics(preds: &[Vec<String>], targets: &[Vec<String>]) -> OracleResult {
    assert_eq!(preds.len(), targets.len());
    let n = targets.len() as u128;
    let zero = Frac::new(0, 1);
    let (mut p, mut r, mut j) = (zero, zero, zero);
    let mut parts = Vec::new();
    for (pred, gt) in preds.iter().zip(targets) {
        let pred: Vec<&String> = dedup(pred);
        let gt: Vec<&String> = dedup(gt);
        let mut inter = 0u128;
        for a in &pred {
            if gt.contains(a) {
                inter += 1;
            }
        }
        let union = pred.len() as u128 + gt.len() as u128 - inter;
        if !pred.is_empty() {
            p = p.add(Frac::new(inter, pred.len() as u128));
        }
        r = r.add(Frac::new(inter, gt.len() as u128));
        j = j.add(Frac::new(inter, union));
        parts.push(format!("{pred:?}|{gt:?}"));
    }
    let hundred_over_n = Frac::new(100, n);
    let (p, r, j) = (p.mul(hundred_over_n), r.mul(hundred_over_n), j.mul(hundred_over_n));
    let f1 = if p.num == 0 && r.num == 0 {
        zero
    } else {
        Frac::new(2, 1).mul(p).mul(r).div(p.add(r))
    };
    OracleResult {
        oracle: "oracle_metrics",
        inputs_digest: digest(&parts),
        values: vec![p.to_f64(), r.to_f64(), j.to_f64(), f1.to_f64()],
        tolerance: 1e-9,
    }
}

fn dedup(v: &[String]) -> Vec<&String> {
    let mut out: Vec<&String> = Vec::new();
    for x in v {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` on every coordinate.
pub fn oracle_grad(loss: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> OracleResult {
    let mut x = params.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = loss(&x);
        x[i] = orig - h;
        let down = loss(&x);
        x[i] = orig;
        assert!(up.is_finite() && down.is_finite(), "non-finite loss at coordinate {i}");
        g.push((up - down) / (2.0 * h));
    }
    OracleResult {
        oracle: "oracle_grad",
        inputs_digest: digest(&params.iter().map(|v| v.to_bits().to_string()).collect::<Vec<_>>()),
        values: g,
        tolerance: 1e-4,
    }
}

/// Per region, the fine class whose prototype has the highest cosine
/// similarity; the union over regions whose best similarity exceeds `cutoff`.
pub fn oracle_nearest_prototype(regions: &[Vec<f64>], prototypes: &[Vec<f64>], cutoff: f64) -> BTreeSet<usize> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = BTreeSet::new();
    for region in regions {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (c, proto) in prototypes.iter().enumerate() {
            let dot: f64 = region.iter().zip(proto).map(|(a, b)| a * b).sum();
            let cos = dot / (norm(region) * norm(proto));
            if cos > best.0 {
                best = (cos, c);
            }
        }
        if best.0 > cutoff {
            out.insert(best.1);
        }
    }
    out
}

/// Asymmetric loss of one probability, written out term by term.
/// Positive: `-(1-p)^gp · ln p`. Negative: `-q^gn · ln(1-q)`, `q = max(p-m, 0)`.
pub fn oracle_asl(p: f64, positive: bool, gamma_pos: f64, gamma_neg: f64, margin: f64, eps: f64) -> f64 {
    if positive {
        -(1.0 - p).powf(gamma_pos) * p.max(eps).ln()
    } else {
        let q = if p - margin > 0.0 { p - margin } else { 0.0 };
        -q.powf(gamma_neg) * (1.0 - q).max(eps).ln()
    }
}

/// Mean of [`oracle_asl`] over classes.
pub fn oracle_asl_mean(p: &[f64], y: &[bool], gamma_pos: f64, gamma_neg: f64, margin: f64, eps: f64) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| oracle_asl(p, y, gamma_pos, gamma_neg, margin, eps))
        .sum::<f64>()
        / p.len() as f64
}
