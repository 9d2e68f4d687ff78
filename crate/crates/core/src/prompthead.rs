//! Dual learnable-prompt classification head.
//!
//! Every class owns a positive and a negative context (a short sequence of
//! learnable token vectors). Each context is prepended to the class-name
//! tokens and encoded by the frozen text encoder. Region features are
//! compared to both text embeddings by cosine similarity and pooled with a
//! class-specific spatial softmax driven by the positive branch. The pooled
//! pair of logits gives the presence probability
//! `p = exp(l+) / (exp(l+) + exp(l-))`.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneAdapter;
use crate::error::{Error, Result};
use crate::hierarchy::{LabelSet, LabelSpace, Level};
use crate::loss::{asl_with_grad, AslConfig, LevelTargets};

pub const DEFAULT_CONTEXT_TOKENS: usize = 16;
pub const DEFAULT_TOKEN_DIM: usize = 512;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub m_pos: usize,
    pub m_neg: usize,
    /// Inverse temperature of the spatial softmax. `None` uses the backbone's logit scale.
    pub agg_scale: Option<f64>,
    pub threshold: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            m_pos: DEFAULT_CONTEXT_TOKENS,
            m_neg: DEFAULT_CONTEXT_TOKENS,
            agg_scale: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_pos == 0 || self.m_neg == 0 {
            return Err(Error::Config("context lengths must be >= 1".into()));
        }
        check_threshold(self.threshold)?;
        if let Some(a) = self.agg_scale {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::Config(format!("agg_scale must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

fn check_threshold(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must lie in (0, 1), got {tau}")))
    }
}

/// Learnable prompt contexts of one level: the only trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    pub level: Level,
    pub classes: Vec<String>,
    /// `classes x m_pos x token_dim`
    pub pos_ctx: Array3<f64>,
    /// `classes x m_neg x token_dim`
    pub neg_ctx: Array3<f64>,
}

/// Draws contexts i.i.d. from N(0, 0.02^2).
pub fn init_prompts(space: &LabelSpace, m_pos: usize, m_neg: usize, token_dim: usize, seed: u64) -> Result<PromptState> {
    if m_pos == 0 || m_neg == 0 || token_dim == 0 {
        return Err(Error::Config(format!(
            "context shape must be positive, got m_pos={m_pos} m_neg={m_neg} token_dim={token_dim}"
        )));
    }
    let n = space.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || INIT_STD * rng.sample::<f64, _>(StandardNormal);
    let pos_ctx = Array3::from_shape_simple_fn((n, m_pos, token_dim), &mut draw);
    let neg_ctx = Array3::from_shape_simple_fn((n, m_neg, token_dim), &mut draw);
    Ok(PromptState {
        level: space.level(),
        classes: space.labels().to_vec(),
        pos_ctx,
        neg_ctx,
    })
}

/// `classes * (m_pos + m_neg) * token_dim`.
pub fn trainable_param_count(classes: usize, m_pos: usize, m_neg: usize, token_dim: usize) -> usize {
    classes * (m_pos + m_neg) * token_dim
}

/// Parameter count rounded to 0.1M, the way results tables show it.
pub fn format_param_count(n: usize) -> String {
    format!("{:.1}M", n as f64 / 1e6)
}

impl PromptState {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn m_pos(&self) -> usize {
        self.pos_ctx.dim().1
    }

    pub fn m_neg(&self) -> usize {
        self.neg_ctx.dim().1
    }

    pub fn token_dim(&self) -> usize {
        self.pos_ctx.dim().2
    }

    pub fn count_trainable_params(&self) -> usize {
        self.pos_ctx.len() + self.neg_ctx.len()
    }

    pub fn class_digest(&self) -> String {
        // Same digest as the label space the state was initialised from.
        LabelSpace::new(self.level, self.classes.iter().cloned())
            .map(|s| s.digest())
            .unwrap_or_default()
    }

    pub fn is_finite(&self) -> bool {
        self.pos_ctx.iter().chain(self.neg_ctx.iter()).all(|x| x.is_finite())
    }

    /// Full forward pass for one image.
    pub fn forward(&self, backbone: &dyn BackboneAdapter, agg_scale: Option<f64>, image: &crate::datamodel::ImageRef) -> Result<LevelScores> {
        let bank = TextBank::build(self, backbone)?;
        let regions = normalize_regions(backbone.encode_image(image)?.view());
        let scales = Scales::new(backbone, agg_scale);
        Ok(bank.score(&regions, scales)?.0)
    }
}

/// Gradient w.r.t. a [`PromptState`], same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGrad {
    pub pos: Array3<f64>,
    pub neg: Array3<f64>,
}

impl PromptGrad {
    pub fn zeros_like(state: &PromptState) -> Self {
        PromptGrad {
            pos: Array3::zeros(state.pos_ctx.raw_dim()),
            neg: Array3::zeros(state.neg_ctx.raw_dim()),
        }
    }

    pub fn scaled_add(&mut self, alpha: f64, other: &PromptGrad) {
        self.pos.scaled_add(alpha, &other.pos);
        self.neg.scaled_add(alpha, &other.neg);
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.pos.iter().chain(self.neg.iter())
    }
}

/// Presence probabilities and paired logits of one sample at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScores {
    pub level: Level,
    pub probs: Vec<f64>,
    pub logits_pos: Vec<f64>,
    pub logits_neg: Vec<f64>,
}

/// `exp(a) / (exp(a) + exp(b))` without overflow.
pub fn pair_softmax(a: f64, b: f64) -> f64 {
    let z = a - b;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Indices of classes whose probability strictly exceeds `tau`.
pub fn threshold(probs: &[f64], tau: f64) -> Result<Vec<usize>> {
    check_threshold(tau)?;
    Ok(probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > tau)
        .map(|(i, _)| i)
        .collect())
}

impl LevelScores {
    pub fn predict(&self, space: &LabelSpace, tau: f64) -> Result<LabelSet> {
        if space.len() != self.probs.len() {
            return Err(Error::Shape(format!(
                "{} scores for a label space of {}",
                self.probs.len(),
                space.len()
            )));
        }
        Ok(threshold(&self.probs, tau)?
            .into_iter()
            .map(|i| space.label(i).to_string())
            .collect())
    }
}

/// Unit-normalised region features; all-zero rows stay zero.
pub fn normalize_regions(features: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = features.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scales {
    pub logit: f64,
    pub agg: f64,
}

impl Scales {
    pub fn new(backbone: &dyn BackboneAdapter, agg_scale: Option<f64>) -> Self {
        let logit = backbone.logit_scale();
        Scales {
            logit,
            agg: agg_scale.unwrap_or(logit),
        }
    }
}

/// Encoded class texts of one level for the current prompt values.
/// Rebuilt after every parameter update.
#[derive(Debug, Clone)]
pub struct TextBank {
    level: Level,
    m_pos: usize,
    m_neg: usize,
    /// `classes x feature_dim`
    pos: Array2<f64>,
    neg: Array2<f64>,
    pos_seqs: Vec<Array2<f64>>,
    neg_seqs: Vec<Array2<f64>>,
}

/// Intermediate values of one sample's forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    /// `regions x classes`
    sim_pos: Array2<f64>,
    sim_neg: Array2<f64>,
    weights: Array2<f64>,
    probs: Vec<f64>,
}

/// Gradient w.r.t. the encoded class texts, accumulated over a batch.
#[derive(Debug, Clone)]
pub struct TextGrad {
    pos: Array2<f64>,
    neg: Array2<f64>,
}

fn token_sequence<'v>(ctx: ArrayView2<'v, f64>, name: &'v Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[ctx, name.view()]).expect("matching token widths")
}

impl TextBank {
    pub fn build(state: &PromptState, backbone: &dyn BackboneAdapter) -> Result<Self> {
        let dims = backbone.dims();
        if state.token_dim() != dims.token_dim {
            return Err(Error::Shape(format!(
                "prompt token_dim {} does not match backbone token_dim {}",
                state.token_dim(),
                dims.token_dim
            )));
        }
        let n = state.num_classes();
        let mut pos = Array2::zeros((n, dims.feature_dim));
        let mut neg = Array2::zeros((n, dims.feature_dim));
        let mut pos_seqs = Vec::with_capacity(n);
        let mut neg_seqs = Vec::with_capacity(n);
        for (c, class) in state.classes.iter().enumerate() {
            let name = backbone.embed_tokens(&backbone.tokenize(class))?;
            let ps = token_sequence(state.pos_ctx.index_axis(Axis(0), c), &name);
            let ns = token_sequence(state.neg_ctx.index_axis(Axis(0), c), &name);
            pos.row_mut(c).assign(&backbone.encode_text(ps.view())?);
            neg.row_mut(c).assign(&backbone.encode_text(ns.view())?);
            pos_seqs.push(ps);
            neg_seqs.push(ns);
        }
        Ok(TextBank {
            level: state.level,
            m_pos: state.m_pos(),
            m_neg: state.m_neg(),
            pos,
            neg,
            pos_seqs,
            neg_seqs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.pos.nrows()
    }

    pub fn zero_grad(&self) -> TextGrad {
        TextGrad {
            pos: Array2::zeros(self.pos.raw_dim()),
            neg: Array2::zeros(self.neg.raw_dim()),
        }
    }

    /// Scores one image given its normalised region features.
    pub fn score(&self, regions: &Array2<f64>, scales: Scales) -> Result<(LevelScores, ScoreCache)> {
        if regions.ncols() != self.pos.ncols() {
            return Err(Error::Shape(format!(
                "region width {} does not match text width {}",
                regions.ncols(),
                self.pos.ncols()
            )));
        }
        if regions.nrows() == 0 {
            return Err(Error::Shape("image has no regions".into()));
        }
        let sim_pos = regions.dot(&self.pos.t());
        let sim_neg = regions.dot(&self.neg.t());
        let n = self.num_classes();
        let mut weights = Array2::zeros(sim_pos.raw_dim());
        let mut logits_pos = Vec::with_capacity(n);
        let mut logits_neg = Vec::with_capacity(n);
        let mut probs = Vec::with_capacity(n);
        for c in 0..n {
            let sp = sim_pos.column(c);
            let sn = sim_neg.column(c);
            let max = sp.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut w: Array1<f64> = sp.mapv(|v| (scales.agg * (v - max)).exp());
            w /= w.sum();
            let e_pos = w.dot(&sp);
            let e_neg = w.dot(&sn);
            let lp = scales.logit * e_pos;
            let ln = scales.logit * e_neg;
            weights.column_mut(c).assign(&w);
            logits_pos.push(lp);
            logits_neg.push(ln);
            probs.push(pair_softmax(lp, ln));
        }
        let cache = ScoreCache {
            sim_pos,
            sim_neg,
            weights,
            probs: probs.clone(),
        };
        Ok((
            LevelScores {
                level: self.level,
                probs,
                logits_pos,
                logits_neg,
            },
            cache,
        ))
    }

    /// Backpropagates `dL/dp` of one sample into the text-embedding gradient.
    pub fn backward(
        &self,
        regions: &Array2<f64>,
        cache: &ScoreCache,
        dprob: &[f64],
        scales: Scales,
        acc: &mut TextGrad,
    ) {
        let r_count = regions.nrows();
        let mut ds_pos = Array2::<f64>::zeros((r_count, self.num_classes()));
        let mut ds_neg = Array2::<f64>::zeros((r_count, self.num_classes()));
        for (c, &g) in dprob.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let p = cache.probs[c];
            let dz = g * p * (1.0 - p);
            let de_pos = scales.logit * dz;
            let de_neg = -scales.logit * dz;
            let w = cache.weights.column(c);
            let sp = cache.sim_pos.column(c);
            let sn = cache.sim_neg.column(c);
            let dw: Array1<f64> = &sp * de_pos + &sn * de_neg;
            let wdw = w.dot(&dw);
            for r in 0..r_count {
                let da = w[r] * (dw[r] - wdw);
                ds_pos[[r, c]] = de_pos * w[r] + scales.agg * da;
                ds_neg[[r, c]] = de_neg * w[r];
            }
        }
        // dT = dS^T F_hat
        acc.pos += &ds_pos.t().dot(regions);
        acc.neg += &ds_neg.t().dot(regions);
    }

    /// Maps a text-embedding gradient back onto the learnable contexts.
    pub fn backprop_to_prompts(&self, backbone: &dyn BackboneAdapter, grad: &TextGrad) -> Result<PromptGrad> {
        let n = self.num_classes();
        let dt = self.pos_seqs.first().map(|s| s.ncols()).unwrap_or(0);
        let mut pos = Array3::zeros((n, self.m_pos, dt));
        let mut neg = Array3::zeros((n, self.m_neg, dt));
        for c in 0..n {
            let gp = grad.pos.row(c);
            if gp.iter().any(|&x| x != 0.0) {
                let g = backbone.encode_text_vjp(self.pos_seqs[c].view(), gp)?;
                pos.index_axis_mut(Axis(0), c).assign(&g.slice(s![..self.m_pos, ..]));
            }
            let gn = grad.neg.row(c);
            if gn.iter().any(|&x| x != 0.0) {
                let g = backbone.encode_text_vjp(self.neg_seqs[c].view(), gn)?;
                neg.index_axis_mut(Axis(0), c).assign(&g.slice(s![..self.m_neg, ..]));
            }
        }
        Ok(PromptGrad { pos, neg })
    }
}

/// One sample's inputs to a loss evaluation at one level.
pub struct BatchItem<'a> {
    pub regions: &'a Array2<f64>,
    pub targets: &'a LevelTargets,
}

/// Batch-mean asymmetric loss of one level and its gradient w.r.t. the prompts.
pub fn loss_and_grad(
    state: &PromptState,
    backbone: &dyn BackboneAdapter,
    scales: Scales,
    batch: &[BatchItem<'_>],
    asl: &AslConfig,
) -> Result<(f64, PromptGrad)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let bank = TextBank::build(state, backbone)?;
    let mut acc = bank.zero_grad();
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        if item.targets.level != state.level {
            return Err(Error::Shape(format!(
                "targets for level {} fed to level {} prompts",
                item.targets.level, state.level
            )));
        }
        let (scores, cache) = bank.score(item.regions, scales)?;
        let (loss, mut dprob) = asl_with_grad(&scores.probs, &item.targets.present, asl)?;
        total += loss * inv_b;
        dprob.iter_mut().for_each(|g| *g *= inv_b);
        bank.backward(item.regions, &cache, &dprob, scales, &mut acc);
    }
    let grad = bank.backprop_to_prompts(backbone, &acc)?;
    Ok((total, grad))
}

/// Batch-mean loss only.
pub fn batch_loss(
    state: &PromptState,
    backbone: &dyn BackboneAdapter,
    scales: Scales,
    batch: &[BatchItem<'_>],
    asl: &AslConfig,
) -> Result<f64> {
    let bank = TextBank::build(state, backbone)?;
    let mut scores = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for item in batch {
        scores.push(bank.score(item.regions, scales)?.0);
        targets.push(item.targets.clone());
    }
    crate::loss::stage1_loss(&scores, &targets, asl)
}

const CHECKPOINT_FORMAT: &str = "hiertune-prompts";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    level: u8,
    class_digest: String,
    classes: Vec<String>,
    m_pos: usize,
    m_neg: usize,
    token_dim: usize,
    pos_context: Vec<f64>,
    neg_context: Vec<f64>,
    config: serde_json::Value,
}

impl PromptState {
    pub fn to_checkpoint_json(&self, config: &serde_json::Value) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            level: self.level.number(),
            class_digest: self.class_digest(),
            classes: self.classes.clone(),
            m_pos: self.m_pos(),
            m_neg: self.m_neg(),
            token_dim: self.token_dim(),
            pos_context: self.pos_ctx.iter().copied().collect(),
            neg_context: self.neg_ctx.iter().copied().collect(),
            config: config.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_json(config)?).map_err(|e| Error::io(path, e))
    }

    /// Parses a checkpoint and checks its class digest against `space`.
    pub fn from_checkpoint_json(text: &str, space: &LabelSpace) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let level = Level::from_number(file.level)?;
        if level != space.level() {
            return Err(Error::Checkpoint(format!(
                "checkpoint is for level {level}, label space is level {}",
                space.level()
            )));
        }
        if file.class_digest != space.digest() || file.classes != space.labels() {
            return Err(Error::Checkpoint(format!(
                "class-list digest mismatch for level {level}: checkpoint {} vs hierarchy {}",
                file.class_digest,
                space.digest()
            )));
        }
        let n = file.classes.len();
        let pos_ctx = Array3::from_shape_vec((n, file.m_pos, file.token_dim), file.pos_context)
            .map_err(|e| Error::Checkpoint(format!("positive context: {e}")))?;
        let neg_ctx = Array3::from_shape_vec((n, file.m_neg, file.token_dim), file.neg_context)
            .map_err(|e| Error::Checkpoint(format!("negative context: {e}")))?;
        let state = PromptState {
            level,
            classes: file.classes,
            pos_ctx,
            neg_ctx,
        };
        if !state.is_finite() {
            return Err(Error::Checkpoint("non-finite context values".into()));
        }
        Ok(state)
    }

    pub fn load(path: impl AsRef<Path>, space: &LabelSpace) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PromptState::from_checkpoint_json(&text, space).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn space(n: usize) -> LabelSpace {
        LabelSpace::new(Level::Fine, (0..n).map(|i| format!("c{i:03}"))).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(trainable_param_count(353, 16, 16, 512), 5_783_552);
        assert_eq!(trainable_param_count(138, 16, 16, 512), 2_260_992);
        assert_eq!(trainable_param_count(13, 16, 16, 512), 212_992);
        assert_eq!(trainable_param_count(1, 1, 1, 1), 2);
        assert_eq!(format_param_count(5_783_552), "5.8M");
        assert_eq!(format_param_count(2_260_992), "2.3M");
        assert_eq!(format_param_count(212_992), "0.2M");
    }

    #[test]
    fn init_is_seeded_and_sized() {
        let s = space(13);
        let a = init_prompts(&s, 16, 16, 512, 3).unwrap();
        assert_eq!(a.count_trainable_params(), 212_992);
        assert_eq!(a, init_prompts(&s, 16, 16, 512, 3).unwrap());
        assert_ne!(a, init_prompts(&s, 16, 16, 512, 4).unwrap());
        let std = (a.pos_ctx.iter().map(|x| x * x).sum::<f64>() / a.pos_ctx.len() as f64).sqrt();
        assert!((std - INIT_STD).abs() < 0.001, "{std}");
        assert!(init_prompts(&s, 0, 16, 512, 3).is_err());
    }

    #[test]
    fn thresholding_is_strict() {
        assert_eq!(threshold(&[0.9, 0.1], 0.5).unwrap(), vec![0]);
        assert!(threshold(&[0.5, 0.5], 0.5).unwrap().is_empty());
        assert_eq!(threshold(&[0.6, 0.55, 0.2], 0.5).unwrap(), vec![0, 1]);
        assert!(threshold(&[0.6], 1.0).is_err());
        assert!(threshold(&[0.6], 0.0).is_err());
    }

    #[test]
    fn pair_softmax_symmetry_and_range() {
        assert_eq!(pair_softmax(3.0, 3.0), 0.5);
        assert!((pair_softmax(1.0, -1.0) + pair_softmax(-1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(pair_softmax(-800.0, 800.0) >= 0.0);
        assert!(pair_softmax(800.0, -800.0) <= 1.0);
    }

    fn bank_from(pos: Array2<f64>, neg: Array2<f64>) -> TextBank {
        TextBank {
            level: Level::Fine,
            m_pos: 1,
            m_neg: 1,
            pos,
            neg,
            pos_seqs: vec![],
            neg_seqs: vec![],
        }
    }

    #[test]
    fn single_region_pools_to_similarity() {
        let bank = bank_from(array![[0.6, 0.8]], array![[1.0, 0.0]]);
        let regions = array![[1.0, 0.0]];
        let (scores, _) = bank.score(&regions, Scales { logit: 10.0, agg: 10.0 }).unwrap();
        assert!((scores.logits_pos[0] - 6.0).abs() < 1e-12);
        assert!((scores.logits_neg[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn two_region_attention_weights() {
        // s+ = (1, 0), s- = (0, 1)
        let bank = bank_from(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let regions = array![[1.0, 0.0], [0.0, 1.0]];
        let (scores, cache) = bank.score(&regions, Scales { logit: 1.0, agg: 1.0 }).unwrap();
        let w0 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert!((cache.weights[[0, 0]] - w0).abs() < 1e-12);
        assert!((scores.logits_pos[0] - 0.731_058_578_6).abs() < 1e-9);
        assert!((scores.logits_neg[0] - 0.268_941_421_4).abs() < 1e-9);
    }

    #[test]
    fn equal_logits_give_half() {
        let bank = bank_from(array![[1.0, 0.0]], array![[1.0, 0.0]]);
        let (scores, _) = bank
            .score(&array![[0.3, 0.7], [0.9, 0.1]], Scales { logit: 100.0, agg: 100.0 })
            .unwrap();
        assert_eq!(scores.probs[0], 0.5);
    }

    #[test]
    fn checkpoint_roundtrip_and_digest_check() {
        let s = space(3);
        let st = init_prompts(&s, 2, 3, 4, 9).unwrap();
        let json = st.to_checkpoint_json(&serde_json::json!({"k": 1})).unwrap();
        let back = PromptState::from_checkpoint_json(&json, &s).unwrap();
        assert_eq!(back, st);

        let other = space(4);
        let err = PromptState::from_checkpoint_json(&json, &other).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"), "{err}");
    }
}
