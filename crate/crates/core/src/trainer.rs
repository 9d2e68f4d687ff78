//! Two-stage prompt training.
//!
//! Stage 1 tunes each level's prompts on its own loss. Stage 2 starts from
//! the three stage-1 states and minimises `λ1 L1 + λ2 L2 + λ3 L3` jointly,
//! with every batch encoded once and shared by the three heads. The backbone
//! is only ever borrowed immutably; its digest is recorded before and after.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneAdapter;
use crate::datamodel::DatasetSplit;
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelSet, Level};
use crate::loss::{AslConfig, LambdaWeights, LevelTargets};
use crate::metrics::evaluate;
use crate::prompthead::{
    init_prompts, loss_and_grad, normalize_regions, BatchItem, HeadConfig, PromptGrad, PromptState, Scales,
    TextBank,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Used by stage 2 only.
    pub lambda: LambdaWeights,
    /// Write a checkpoint (and validate) every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        TrainConfig {
            stage: Stage::One,
            epochs: 110,
            lr0: 0.002,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            lambda: LambdaWeights::default(),
            checkpoint_every: 10,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: Stage::Two,
            epochs: 60,
            lr0: 0.001,
            ..TrainConfig::stage1()
        }
    }

    pub fn validate(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Config(format!(
                "stage {} config passed to stage {} training",
                self.stage.number(),
                expected.number()
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// `lr0 · ½ · (1 + cos(π t / T))`.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (PI * t).cos())
}

/// SGD with heavy-ball momentum: `v = μ v + g (+ wd·θ)`, `θ -= lr · v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Option<PromptGrad>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, state: &mut PromptState, grad: &PromptGrad, lr: f64) {
        let mut g = grad.clone();
        if self.weight_decay != 0.0 {
            g.pos.scaled_add(self.weight_decay, &state.pos_ctx);
            g.neg.scaled_add(self.weight_decay, &state.neg_ctx);
        }
        let v = match self.velocity.take() {
            None => g,
            Some(mut v) => {
                v.pos *= self.momentum;
                v.neg *= self.momentum;
                v.scaled_add(1.0, &g);
                v
            }
        };
        state.pos_ctx.scaled_add(-lr, &v.pos);
        state.neg_ctx.scaled_add(-lr, &v.neg);
        self.velocity = Some(v);
    }
}

/// Shared, read-only pieces every training and evaluation call needs.
#[derive(Clone, Copy)]
pub struct TrainContext<'a> {
    pub hierarchy: &'a Hierarchy,
    pub backbone: &'a dyn BackboneAdapter,
    pub head: HeadConfig,
    pub asl: AslConfig,
}

impl<'a> TrainContext<'a> {
    pub fn scales(&self) -> Scales {
        Scales::new(self.backbone, self.head.agg_scale)
    }

    /// Seeded fresh prompts for one level.
    pub fn init_level(&self, level: Level, seed: u64) -> Result<PromptState> {
        init_prompts(
            self.hierarchy.space(level),
            self.head.m_pos,
            self.head.m_neg,
            self.backbone.dims().token_dim,
            seed.wrapping_mul(31).wrapping_add(level.number() as u64),
        )
    }

    /// Encodes and normalises every image of a split once, with the binary
    /// targets of all three levels.
    pub fn encode_split(&self, data: &DatasetSplit) -> Result<EncodedSplit> {
        let dims = self.backbone.dims();
        let mut regions = Vec::with_capacity(data.len());
        let mut targets = Vec::with_capacity(data.len());
        for s in &data.samples {
            let f = self.backbone.encode_image(&s.image_ref)?;
            if f.ncols() != dims.feature_dim {
                return Err(Error::Shape(format!(
                    "image {} has feature width {}, backbone reports {}",
                    s.image_ref,
                    f.ncols(),
                    dims.feature_dim
                )));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Backbone(format!("non-finite features for {}", s.image_ref)));
            }
            regions.push(normalize_regions(f.view()));
            let t = Level::ALL
                .iter()
                .map(|&lv| LevelTargets::from_labels(self.hierarchy.space(lv), s.labels(lv)))
                .collect::<Result<Vec<_>>>()?;
            targets.push([t[0].clone(), t[1].clone(), t[2].clone()]);
        }
        Ok(EncodedSplit { regions, targets })
    }

    /// Thresholded predictions of one level for every encoded sample.
    pub fn predict(&self, state: &PromptState, encoded: &EncodedSplit) -> Result<Vec<LabelSet>> {
        let bank = TextBank::build(state, self.backbone)?;
        let space = self.hierarchy.space(state.level);
        encoded
            .regions
            .iter()
            .map(|r| bank.score(r, self.scales())?.0.predict(space, self.head.threshold))
            .collect()
    }

    /// Mean loss of one level over a whole encoded split.
    pub fn full_loss(&self, state: &PromptState, encoded: &EncodedSplit) -> Result<f64> {
        let items: Vec<BatchItem<'_>> = encoded.items(state.level, 0..encoded.len());
        crate::prompthead::batch_loss(state, self.backbone, self.scales(), &items, &self.asl)
    }
}

/// Normalised region features and binary targets of a split.
#[derive(Debug, Clone)]
pub struct EncodedSplit {
    pub regions: Vec<Array2<f64>>,
    pub targets: Vec<[LevelTargets; 3]>,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn items(&self, level: Level, idx: impl IntoIterator<Item = usize>) -> Vec<BatchItem<'_>> {
        idx.into_iter()
            .map(|i| BatchItem {
                regions: &self.regions[i],
                targets: &self.targets[i][level.slot()],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss per level (`None` for levels not trained in this run).
    pub level_loss: [Option<f64>; 3],
    /// Mean weighted loss (stage 2 only).
    pub combined_loss: Option<f64>,
    /// Validation F1 per level, on checkpoint epochs when a validation split is given.
    pub val_f1: Option<[Option<f64>; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub levels: Vec<u8>,
    pub epochs: Vec<EpochRecord>,
    /// Full-split loss per level before the first step.
    pub initial_loss: [Option<f64>; 3],
    /// Full-split loss per level of the returned states.
    pub final_loss: [Option<f64>; 3],
    pub total_steps: usize,
    pub best_epoch: Option<usize>,
    pub backbone_digest_before: String,
    pub backbone_digest_after: String,
    pub config: TrainConfig,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn backbone_unchanged(&self) -> bool {
        self.backbone_digest_before == self.backbone_digest_after
    }

    /// Per-epoch losses as CSV: `epoch,lr,loss_l1,loss_l2,loss_l3,combined`.
    pub fn loss_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.8}")).unwrap_or_default();
        let mut out = String::from("epoch,lr,loss_l1,loss_l2,loss_l3,combined\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.8},{},{},{},{}\n",
                e.epoch,
                e.lr,
                cell(e.level_loss[0]),
                cell(e.level_loss[1]),
                cell(e.level_loss[2]),
                cell(e.combined_loss)
            ));
        }
        out
    }
}

/// Receives intermediate states: `(epoch, states)`, with `epoch = None` for
/// the final states.
pub type CheckpointSink<'s> = dyn FnMut(Option<usize>, &[&PromptState]) -> Result<()> + 's;

/// Drives the training loop. Deterministic for a fixed config seed.
pub struct Trainer<'a, 's> {
    ctx: TrainContext<'a>,
    config: TrainConfig,
    validation: Option<&'a DatasetSplit>,
    sink: Option<&'s mut CheckpointSink<'s>>,
}

struct LevelRun {
    state: PromptState,
    opt: Sgd,
    weight: f64,
}

impl<'a, 's> Trainer<'a, 's> {
    pub fn new(ctx: TrainContext<'a>, config: TrainConfig) -> Self {
        Trainer {
            ctx,
            config,
            validation: None,
            sink: None,
        }
    }

    /// Enables best-on-validation selection by mean per-level F1.
    pub fn with_validation(mut self, val: &'a DatasetSplit) -> Self {
        self.validation = Some(val);
        self
    }

    pub fn with_checkpoint_sink(mut self, sink: &'s mut CheckpointSink<'s>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn train_stage1(self, level: Level, init: PromptState, data: &DatasetSplit) -> Result<(PromptState, TrainReport)> {
        self.config.validate(Stage::One)?;
        if init.level != level {
            return Err(Error::Config(format!(
                "stage 1 for level {level} given prompts of level {}",
                init.level
            )));
        }
        let (mut states, report) = self.run(vec![(init, 1.0)], data)?;
        Ok((states.remove(0), report))
    }

    pub fn train_stage2(self, states: [PromptState; 3], data: &DatasetSplit) -> Result<([PromptState; 3], TrainReport)> {
        self.config.validate(Stage::Two)?;
        for (i, s) in states.iter().enumerate() {
            if s.level.slot() != i {
                return Err(Error::Config(format!(
                    "stage 2 expects prompts for levels 1, 2, 3 in order; slot {} holds level {}",
                    i + 1,
                    s.level
                )));
            }
        }
        let lambda = self.config.lambda;
        let runs: Vec<(PromptState, f64)> = states
            .into_iter()
            .map(|s| {
                let w = lambda.get(s.level);
                (s, w)
            })
            .collect();
        let (out, report) = self.run(runs, data)?;
        let [a, b, c]: [PromptState; 3] = out.try_into().expect("three levels in, three out");
        Ok(([a, b, c], report))
    }

    fn run(mut self, states: Vec<(PromptState, f64)>, data: &DatasetSplit) -> Result<(Vec<PromptState>, TrainReport)> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let ctx = self.ctx;
        if data.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        for (s, _) in &states {
            if s.classes != ctx.hierarchy.space(s.level).labels() {
                return Err(Error::Checkpoint(format!(
                    "level {} prompts do not match the hierarchy's label space",
                    s.level
                )));
            }
        }
        let digest_before = ctx.backbone.parameter_digest();
        let encoded = ctx.encode_split(data)?;
        let val_encoded = self.validation.map(|v| ctx.encode_split(v)).transpose()?;

        let mut runs: Vec<LevelRun> = states
            .into_iter()
            .map(|(state, weight)| LevelRun {
                state,
                opt: Sgd::new(cfg.momentum, cfg.weight_decay),
                weight,
            })
            .collect();

        let mut initial_loss = [None; 3];
        for r in &runs {
            initial_loss[r.state.level.slot()] = Some(ctx.full_loss(&r.state, &encoded)?);
        }

        let n = encoded.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * steps_per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0usize;
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize, Vec<PromptState>)> = None;
        let stage2 = cfg.stage == Stage::Two;

        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut level_sum = [0.0; 3];
            let mut combined_sum = 0.0;
            let mut lr = cfg.lr0;
            for chunk in order.chunks(cfg.batch_size) {
                lr = cosine_lr(cfg.lr0, step, total_steps);
                let mut combined = 0.0;
                for r in runs.iter_mut() {
                    let level = r.state.level;
                    let items = encoded.items(level, chunk.iter().copied());
                    let (loss, grad) = loss_and_grad(&r.state, ctx.backbone, ctx.scales(), &items, &ctx.asl)?;
                    level_sum[level.slot()] += loss;
                    combined += r.weight * loss;
                    if stage2 {
                        let mut scaled = PromptGrad::zeros_like(&r.state);
                        scaled.scaled_add(r.weight, &grad);
                        r.opt.step(&mut r.state, &scaled, lr);
                    } else {
                        r.opt.step(&mut r.state, &grad, lr);
                    }
                }
                combined_sum += combined;
                step += 1;
            }
            if let Some(r) = runs.iter().find(|r| !r.state.is_finite()) {
                return Err(Error::Config(format!(
                    "level {} prompts diverged at epoch {epoch}; lower lr0",
                    r.state.level
                )));
            }

            let mut level_loss = [None; 3];
            for r in &runs {
                let slot = r.state.level.slot();
                level_loss[slot] = Some(level_sum[slot] / steps_per_epoch as f64);
            }

            let checkpoint_epoch = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            let mut val_f1 = None;
            if checkpoint_epoch || epoch == cfg.epochs {
                if let (Some(venc), Some(val)) = (&val_encoded, self.validation) {
                    let mut f1s = [None; 3];
                    let mut sum = 0.0;
                    for r in &runs {
                        let lv = r.state.level;
                        let preds = ctx.predict(&r.state, venc)?;
                        let f1 = evaluate(&preds, &val.targets(lv))?.f1;
                        f1s[lv.slot()] = Some(f1);
                        sum += f1;
                    }
                    let mean = sum / runs.len() as f64;
                    if best.as_ref().map_or(true, |(b, _, _)| mean > *b) {
                        best = Some((mean, epoch, runs.iter().map(|r| r.state.clone()).collect()));
                    }
                    val_f1 = Some(f1s);
                }
                if checkpoint_epoch {
                    if let Some(sink) = self.sink.as_mut() {
                        let refs: Vec<&PromptState> = runs.iter().map(|r| &r.state).collect();
                        sink(Some(epoch), &refs)?;
                    }
                }
            }

            epochs.push(EpochRecord {
                epoch,
                lr,
                level_loss,
                combined_loss: stage2.then(|| combined_sum / steps_per_epoch as f64),
                val_f1,
            });
        }

        let (final_states, best_epoch) = match best {
            Some((_, epoch, states)) => (states, Some(epoch)),
            None => (runs.into_iter().map(|r| r.state).collect::<Vec<_>>(), None),
        };
        if let Some(sink) = self.sink.as_mut() {
            let refs: Vec<&PromptState> = final_states.iter().collect();
            sink(None, &refs)?;
        }

        let mut final_loss = [None; 3];
        for s in &final_states {
            final_loss[s.level.slot()] = Some(ctx.full_loss(s, &encoded)?);
        }

        let report = TrainReport {
            stage: cfg.stage.number(),
            levels: final_states.iter().map(|s| s.level.number()).collect(),
            epochs,
            initial_loss,
            final_loss,
            total_steps,
            best_epoch,
            backbone_digest_before: digest_before,
            backbone_digest_after: ctx.backbone.parameter_digest(),
            config: cfg,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        };
        Ok((final_states, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.002, 0, 100), 0.002);
        assert!(cosine_lr(0.002, 100, 100).abs() < 1e-18);
        assert_eq!(cosine_lr(0.002, 50, 100), 0.001);
        assert!(cosine_lr(0.002, 30, 100) > cosine_lr(0.002, 31, 100));
    }

    #[test]
    fn stage_defaults() {
        let s1 = TrainConfig::stage1();
        assert_eq!((s1.epochs, s1.lr0, s1.momentum, s1.batch_size), (110, 0.002, 0.9, 32));
        let s2 = TrainConfig::stage2();
        assert_eq!((s2.epochs, s2.lr0), (60, 0.001));
        assert!(s2.validate(Stage::One).is_err());
        assert!(s2.validate(Stage::Two).is_ok());
    }

    #[test]
    fn sgd_momentum_matches_hand_update() {
        use crate::hierarchy::LabelSpace;
        let space = LabelSpace::new(Level::Fine, ["a".to_string()]).unwrap();
        let mut st = init_prompts(&space, 1, 1, 2, 1).unwrap();
        let start = st.clone();
        let mut grad = PromptGrad::zeros_like(&st);
        grad.pos.fill(1.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut st, &grad, 0.1);
        opt.step(&mut st, &grad, 0.1);
        // v1 = 1, v2 = 1.9; total move 0.1 * 2.9
        let moved = start.pos_ctx[[0, 0, 0]] - st.pos_ctx[[0, 0, 0]];
        assert!((moved - 0.29).abs() < 1e-15);
        assert_eq!(st.neg_ctx, start.neg_ctx);
    }
}
