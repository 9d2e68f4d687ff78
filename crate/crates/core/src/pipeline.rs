//! End-to-end orchestration shared by the CLI and integration tests:
//! assembling data and backbone from a [`RunConfig`], running both training
//! stages with checkpoint output, and evaluating prompt states.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneAdapter, BackboneRegistry, SyntheticBackbone};
use crate::config::{BackboneKind, RunConfig};
use crate::datamodel::{generate_synthetic, load_annotations, DatasetSplit, FeatureStore, ImageRef, SplitName, SyntheticData};
use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelSet, Level};
use crate::metrics::{predictions_to_jsonl, MetricsReport, SamplePredictions};
use crate::prompthead::PromptState;
use crate::report::{file_digest, sha256_bytes, write_file};
use crate::trainer::{TrainConfig, TrainContext, TrainReport, Trainer};

/// Data, hierarchy and backbone of one run.
pub struct Workspace {
    pub hierarchy: Hierarchy,
    pub train: DatasetSplit,
    pub val: Option<DatasetSplit>,
    pub test: Option<DatasetSplit>,
    pub backbone: Box<dyn BackboneAdapter>,
    /// Input name -> SHA-256, echoed into results files.
    pub inputs: BTreeMap<String, String>,
}

impl Workspace {
    pub fn split(&self, name: SplitName) -> Result<&DatasetSplit> {
        match name {
            SplitName::Train => Some(&self.train),
            SplitName::Val => self.val.as_ref(),
            SplitName::Test => self.test.as_ref(),
        }
        .ok_or_else(|| Error::Dataset(format!("no {name} split configured")))
    }

    pub fn context(&self, cfg: &RunConfig) -> TrainContext<'_> {
        TrainContext {
            hierarchy: &self.hierarchy,
            backbone: self.backbone.as_ref(),
            head: cfg.head,
            asl: cfg.asl,
        }
    }
}

/// On-disk region features for the synthetic backbone.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureFile {
    pub feature_dim: usize,
    pub regions: usize,
    pub images: BTreeMap<String, Vec<Vec<f64>>>,
}

impl FeatureFile {
    pub fn from_store(store: &FeatureStore, feature_dim: usize, regions: usize) -> Self {
        FeatureFile {
            feature_dim,
            regions,
            images: store
                .features
                .iter()
                .map(|(k, v)| (k.0.clone(), v.rows().into_iter().map(|r| r.to_vec()).collect()))
                .collect(),
        }
    }

    pub fn into_store(self) -> Result<FeatureStore> {
        let mut store = FeatureStore::default();
        for (k, rows) in self.images {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let arr = Array2::from_shape_vec((rows.len(), self.feature_dim), flat)
                .map_err(|e| Error::Backbone(format!("features of {k}: {e}")))?;
            store.features.insert(ImageRef(k), arr);
        }
        Ok(store)
    }
}

fn synthetic_backbone(cfg: &RunConfig, dim: usize, regions: usize, store: FeatureStore) -> Result<Box<dyn BackboneAdapter>> {
    Ok(Box::new(SyntheticBackbone::new(
        cfg.synthetic_backbone.clone(),
        dim,
        regions,
        Arc::new(store),
    )?))
}

/// Builds the workspace: generated synthetic data unless `data.hierarchy`
/// points to files.
pub fn load_workspace(cfg: &RunConfig, registry: &BackboneRegistry) -> Result<Workspace> {
    cfg.validate()?;
    let mut inputs = BTreeMap::new();
    let Some(hpath) = &cfg.data.hierarchy else {
        let data = generate_synthetic(&cfg.synthetic)?;
        inputs.insert(
            "synthetic".to_string(),
            sha256_bytes(serde_json::to_string(&cfg.synthetic)?.as_bytes()),
        );
        let backbone = match &cfg.backbone {
            BackboneKind::Synthetic => synthetic_backbone(
                cfg,
                cfg.synthetic.dim,
                cfg.synthetic.regions,
                data.features.clone(),
            )?,
            BackboneKind::External(name) => registry.build(name, &cfg.echo())?,
        };
        let SyntheticData {
            hierarchy,
            train,
            val,
            test,
            ..
        } = data;
        return Ok(Workspace {
            hierarchy,
            train,
            val: Some(val),
            test: Some(test),
            backbone,
            inputs,
        });
    };

    let hierarchy = Hierarchy::load(hpath)?;
    inputs.insert("hierarchy".into(), file_digest(hpath)?);
    let mut load = |key: &str, path: &Option<PathBuf>, name: SplitName| -> Result<Option<DatasetSplit>> {
        match path {
            None => Ok(None),
            Some(p) => {
                inputs.insert(key.into(), file_digest(p)?);
                Ok(Some(load_annotations(p, name, &hierarchy)?))
            }
        }
    };
    let train = load("train", &cfg.data.train, SplitName::Train)?
        .ok_or_else(|| Error::Config("data.hierarchy is set but data.train is not".into()))?;
    let val = load("val", &cfg.data.val, SplitName::Val)?;
    let test = load("test", &cfg.data.test, SplitName::Test)?;

    let backbone = match &cfg.backbone {
        BackboneKind::Synthetic => {
            let fpath = cfg.data.features.as_ref().ok_or_else(|| {
                Error::Config("the synthetic backbone needs data.features when reading data from files".into())
            })?;
            let text = std::fs::read_to_string(fpath).map_err(|e| Error::io(fpath, e))?;
            inputs.insert("features".into(), sha256_bytes(text.as_bytes()));
            let file: FeatureFile = serde_json::from_str(&text)?;
            let (dim, regions) = (file.feature_dim, file.regions);
            synthetic_backbone(cfg, dim, regions, file.into_store()?)?
        }
        BackboneKind::External(name) => registry.build(name, &cfg.echo())?,
    };
    Ok(Workspace {
        hierarchy,
        train,
        val,
        test,
        backbone,
        inputs,
    })
}

/// Writes a generated synthetic dataset as files a file-mode config can read.
pub fn export_synthetic(cfg: &RunConfig, dir: &Path) -> Result<SyntheticData> {
    let data = generate_synthetic(&cfg.synthetic)?;
    write_file(&dir.join("hierarchy.tsv"), &data.hierarchy.to_tsv())?;
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        write_file(&dir.join(format!("{split}.jsonl")), &data.split(split).to_jsonl())?;
    }
    let features = FeatureFile::from_store(&data.features, cfg.synthetic.dim, cfg.synthetic.regions);
    write_file(&dir.join("features.json"), &serde_json::to_string(&features)?)?;
    let mut file_cfg = cfg.clone();
    file_cfg.data.hierarchy = Some(dir.join("hierarchy.tsv"));
    file_cfg.data.train = Some(dir.join("train.jsonl"));
    file_cfg.data.val = Some(dir.join("val.jsonl"));
    file_cfg.data.test = Some(dir.join("test.jsonl"));
    file_cfg.data.features = Some(dir.join("features.json"));
    write_file(&dir.join("config.ini"), &file_cfg.to_ini())?;
    Ok(data)
}

pub fn checkpoint_path(dir: &Path, level: Level, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("level{}_epoch{e:03}.json", level.number())),
        None => dir.join(format!("level{}.json", level.number())),
    }
}

/// Loads the final checkpoints of all three levels from `dir`.
pub fn load_checkpoints(dir: &Path, h: &Hierarchy) -> Result<[PromptState; 3]> {
    let load = |lv: Level| {
        let p = checkpoint_path(dir, lv, None);
        if !p.exists() {
            return Err(Error::Checkpoint(format!("missing checkpoint {}", p.display())));
        }
        PromptState::load(&p, h.space(lv))
    };
    Ok([load(Level::Fine)?, load(Level::Mid)?, load(Level::Coarse)?])
}

fn write_checkpoints(dir: &Path, epoch: Option<usize>, states: &[&PromptState], echo: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in states {
        s.save(checkpoint_path(dir, s.level, epoch), echo)?;
    }
    Ok(())
}

/// Outcome of a training stage.
pub struct StageOutcome {
    pub states: [PromptState; 3],
    pub reports: Vec<TrainReport>,
}

#[derive(Serialize)]
struct TrainReportFile<'a> {
    stage: u8,
    config: BTreeMap<String, String>,
    inputs: &'a BTreeMap<String, String>,
    reports: &'a [TrainReport],
}

fn write_train_outputs(dir: &Path, stage: u8, cfg: &RunConfig, ws: &Workspace, reports: &[TrainReport]) -> Result<()> {
    let file = TrainReportFile {
        stage,
        config: cfg.echo(),
        inputs: &ws.inputs,
        reports,
    };
    write_file(&dir.join("train_report.json"), &(serde_json::to_string_pretty(&file)? + "\n"))?;
    for r in reports {
        let name = if r.levels.len() == 1 {
            format!("loss_level{}.csv", r.levels[0])
        } else {
            "loss.csv".to_string()
        };
        write_file(&dir.join(name), &r.loss_csv())?;
    }
    write_file(&dir.join("config.ini"), &cfg.to_ini())
}

/// Stage 1: trains the three levels independently from seeded prompts.
pub fn run_stage1(ws: &Workspace, cfg: &RunConfig, out: Option<&Path>) -> Result<StageOutcome> {
    let ctx = ws.context(cfg);
    let echo = cfg.echo_json();
    let mut states = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);
    for level in Level::ALL {
        let init = ctx.init_level(level, cfg.stage1.seed)?;
        let (state, report) = train_with_sink(ctx, cfg.stage1.clone(), ws.val.as_ref(), out, &echo, |t| {
            t.train_stage1(level, init, &ws.train).map(|(s, r)| (vec![s], r))
        })?;
        states.extend(state);
        reports.push(report);
    }
    let states: [PromptState; 3] = states.try_into().expect("three levels");
    if let Some(dir) = out {
        write_train_outputs(dir, 1, cfg, ws, &reports)?;
    }
    Ok(StageOutcome { states, reports })
}

/// Stage 2: joint weighted training from three stage-1 states.
pub fn run_stage2(ws: &Workspace, cfg: &RunConfig, init: [PromptState; 3], out: Option<&Path>) -> Result<StageOutcome> {
    let ctx = ws.context(cfg);
    let echo = cfg.echo_json();
    let (states, report) = train_with_sink(ctx, cfg.stage2.clone(), ws.val.as_ref(), out, &echo, |t| {
        t.train_stage2(init, &ws.train).map(|(s, r)| (s.to_vec(), r))
    })?;
    let states: [PromptState; 3] = states.try_into().expect("three levels");
    let reports = vec![report];
    if let Some(dir) = out {
        write_train_outputs(dir, 2, cfg, ws, &reports)?;
    }
    Ok(StageOutcome { states, reports })
}

fn train_with_sink<'a>(
    ctx: TrainContext<'a>,
    tcfg: TrainConfig,
    val: Option<&'a DatasetSplit>,
    out: Option<&Path>,
    echo: &serde_json::Value,
    run: impl FnOnce(Trainer<'a, '_>) -> Result<(Vec<PromptState>, TrainReport)>,
) -> Result<(Vec<PromptState>, TrainReport)> {
    let mut sink = |epoch: Option<usize>, states: &[&PromptState]| -> Result<()> {
        match out {
            Some(dir) => write_checkpoints(dir, epoch, states, echo),
            None => Ok(()),
        }
    };
    let mut trainer = Trainer::new(ctx, tcfg).with_checkpoint_sink(&mut sink);
    if let Some(v) = val {
        trainer = trainer.with_validation(v);
    }
    run(trainer)
}

/// Evaluation of three prompt states on one split.
pub struct Evaluation {
    pub levels: Vec<MetricsReport>,
    pub predictions: Vec<SamplePredictions>,
}

impl Evaluation {
    pub fn mean_iou(&self) -> f64 {
        self.levels.iter().map(|r| r.iou).sum::<f64>() / self.levels.len() as f64
    }

    pub fn mean_f1(&self) -> f64 {
        self.levels.iter().map(|r| r.f1).sum::<f64>() / self.levels.len() as f64
    }

    pub fn predictions_jsonl(&self) -> String {
        predictions_to_jsonl(&self.predictions)
    }
}

pub fn evaluate_states(ws: &Workspace, cfg: &RunConfig, states: &[PromptState; 3], split: &DatasetSplit) -> Result<Evaluation> {
    let ctx = ws.context(cfg);
    let encoded = ctx.encode_split(split)?;
    let mut per_level: Vec<Vec<LabelSet>> = Vec::with_capacity(3);
    let mut levels = Vec::with_capacity(3);
    for state in states {
        let lv = state.level;
        let preds = ctx.predict(state, &encoded)?;
        levels.push(MetricsReport::compute(
            lv,
            &preds,
            &split.targets(lv),
            ws.hierarchy.space(lv),
            Some(state.count_trainable_params()),
        )?);
        per_level.push(preds);
    }
    let predictions = split
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| SamplePredictions {
            id: s.id.clone(),
            labels_l1: per_level[0][i].clone(),
            labels_l2: per_level[1][i].clone(),
            labels_l3: per_level[2][i].clone(),
        })
        .collect();
    Ok(Evaluation { levels, predictions })
}

/// Ground truth of a split in prediction-record form.
pub fn targets_as_predictions(split: &DatasetSplit) -> Vec<SamplePredictions> {
    split
        .samples
        .iter()
        .map(|s| SamplePredictions {
            id: s.id.clone(),
            labels_l1: s.y1().clone(),
            labels_l2: s.y2().clone(),
            labels_l3: s.y3().clone(),
        })
        .collect()
}

/// Stage-1 versus stage-2 scores on one split.
#[derive(Debug, Clone, Serialize)]
pub struct StageComparison {
    pub split: String,
    pub stage1: Vec<MetricsReport>,
    pub stage2: Vec<MetricsReport>,
    pub stage1_mean_iou: f64,
    pub stage2_mean_iou: f64,
    /// Stage-2 mean IoU minus stage-1 mean IoU, in points.
    pub mean_iou_delta: f64,
}

pub fn compare_stages(
    ws: &Workspace,
    cfg: &RunConfig,
    stage1: &[PromptState; 3],
    stage2: &[PromptState; 3],
    split: &DatasetSplit,
) -> Result<StageComparison> {
    let before = evaluate_states(ws, cfg, stage1, split)?;
    let after = evaluate_states(ws, cfg, stage2, split)?;
    Ok(StageComparison {
        split: split.name.to_string(),
        stage1_mean_iou: before.mean_iou(),
        stage2_mean_iou: after.mean_iou(),
        mean_iou_delta: after.mean_iou() - before.mean_iou(),
        stage1: before.levels.iter().map(MetricsReport::rounded).collect(),
        stage2: after.levels.iter().map(MetricsReport::rounded).collect(),
    })
}
