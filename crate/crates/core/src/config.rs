//! Run configuration: INI-style file with dotted keys, overridden by flags,
//! and echoed in full into every results file.
//!
//! ```ini
//! [train.stage1]
//! lr0 = 0.002
//! # equivalent top-level form:
//! train.stage2.lambda = 0.6,0.25,0.15
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::backbone::SyntheticBackboneConfig;
use crate::datamodel::SyntheticSpec;
use crate::error::{Error, Result};
use crate::loss::{AslConfig, LambdaWeights};
use crate::prompthead::HeadConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneKind {
    Synthetic,
    /// Out-of-tree adapter registered under this name.
    External(String),
}

/// Optional file inputs. When `hierarchy` is unset the synthetic dataset is
/// generated in memory from `synthetic.*`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPaths {
    pub hierarchy: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Region features for the synthetic backbone (written by `hiertune synth`).
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub data: DataPaths,
    pub backbone: BackboneKind,
    pub synthetic_backbone: SyntheticBackboneConfig,
    pub head: HeadConfig,
    pub asl: AslConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub allow_unnormalized_lambda: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synthetic: SyntheticSpec::default(),
            data: DataPaths::default(),
            backbone: BackboneKind::Synthetic,
            synthetic_backbone: SyntheticBackboneConfig::default(),
            head: HeadConfig::default(),
            asl: AslConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            allow_unnormalized_lambda: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn parse_lambda(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse::<f64>(key, p))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs three comma-separated weights, got {value:?}")))
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Reads an INI file into flat dotted keys.
pub fn read_ini(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ini(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_ini(text: &str) -> Result<BTreeMap<String, String>> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (section, props) in ini.iter() {
        for (k, v) in props.iter() {
            let key = match section {
                Some(s) => format!("{s}.{k}"),
                None => k.to_string(),
            };
            out.insert(key, v.to_string());
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synthetic;
        match key {
            "synthetic.seed" => s.seed = parse(key, value)?,
            "synthetic.n_fine" => s.n_fine = parse(key, value)?,
            "synthetic.n_mid" => s.n_mid = parse(key, value)?,
            "synthetic.n_coarse" => s.n_coarse = parse(key, value)?,
            "synthetic.dim" => s.dim = parse(key, value)?,
            "synthetic.regions" => s.regions = parse(key, value)?,
            "synthetic.noise_sigma" => s.noise_sigma = parse(key, value)?,
            "synthetic.labels_min" => s.labels_min = parse(key, value)?,
            "synthetic.labels_max" => s.labels_max = parse(key, value)?,
            "synthetic.train" => s.train = parse(key, value)?,
            "synthetic.val" => s.val = parse(key, value)?,
            "synthetic.test" => s.test = parse(key, value)?,

            "data.hierarchy" => self.data.hierarchy = parse_path(value),
            "data.train" => self.data.train = parse_path(value),
            "data.val" => self.data.val = parse_path(value),
            "data.test" => self.data.test = parse_path(value),
            "data.features" => self.data.features = parse_path(value),

            "backbone.kind" => {
                self.backbone = match value.trim() {
                    "synthetic" => BackboneKind::Synthetic,
                    "external" => BackboneKind::External(match &self.backbone {
                        BackboneKind::External(n) => n.clone(),
                        BackboneKind::Synthetic => String::new(),
                    }),
                    other => {
                        return Err(Error::Config(format!(
                            "backbone.kind must be \"synthetic\" or \"external\", got {other:?}"
                        )))
                    }
                }
            }
            "backbone.external" => {
                if let BackboneKind::External(name) = &mut self.backbone {
                    *name = value.trim().to_string();
                } else if !value.trim().is_empty() {
                    self.backbone = BackboneKind::External(value.trim().to_string());
                }
            }
            "backbone.seed" => self.synthetic_backbone.seed = parse(key, value)?,
            "backbone.token_dim" => self.synthetic_backbone.token_dim = parse(key, value)?,
            "backbone.vocab_size" => self.synthetic_backbone.vocab_size = parse(key, value)?,
            "backbone.logit_scale" => self.synthetic_backbone.logit_scale = parse(key, value)?,

            "prompt.m_pos" => self.head.m_pos = parse(key, value)?,
            "prompt.m_neg" => self.head.m_neg = parse(key, value)?,
            "prompt.agg_scale" => {
                self.head.agg_scale = match value.trim() {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "prompt.threshold" => self.head.threshold = parse(key, value)?,

            "loss.gamma_pos" => self.asl.gamma_pos = parse(key, value)?,
            "loss.gamma_neg" => self.asl.gamma_neg = parse(key, value)?,
            "loss.margin" => self.asl.margin = parse(key, value)?,
            "loss.eps" => self.asl.eps = parse(key, value)?,

            "train.seed" => {
                let v = parse(key, value)?;
                self.stage1.seed = v;
                self.stage2.seed = v;
            }
            "train.batch_size" => {
                let v = parse(key, value)?;
                self.stage1.batch_size = v;
                self.stage2.batch_size = v;
            }
            "train.momentum" => {
                let v = parse(key, value)?;
                self.stage1.momentum = v;
                self.stage2.momentum = v;
            }
            "train.weight_decay" => {
                let v = parse(key, value)?;
                self.stage1.weight_decay = v;
                self.stage2.weight_decay = v;
            }
            "train.checkpoint_every" => {
                let v = parse(key, value)?;
                self.stage1.checkpoint_every = v;
                self.stage2.checkpoint_every = v;
            }
            "train.allow_unnormalized_lambda" => self.allow_unnormalized_lambda = parse_bool(key, value)?,
            "train.stage1.epochs" => self.stage1.epochs = parse(key, value)?,
            "train.stage1.lr0" => self.stage1.lr0 = parse(key, value)?,
            "train.stage2.epochs" => self.stage2.epochs = parse(key, value)?,
            "train.stage2.lr0" => self.stage2.lr0 = parse(key, value)?,
            // Validated together with the override flag in `validate`.
            "train.stage2.lambda" => self.stage2.lambda = LambdaWeights(parse_lambda(key, value)?),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // backbone.kind before backbone.external so the name survives
        if let Some(v) = map.get("backbone.kind") {
            cfg.set("backbone.kind", v)?;
        }
        for (k, v) in map {
            if k != "backbone.kind" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.head.validate()?;
        self.asl.validate()?;
        LambdaWeights::validated(self.stage2.lambda.0, self.allow_unnormalized_lambda)?;
        if let BackboneKind::External(name) = &self.backbone {
            if name.is_empty() {
                return Err(Error::Config("backbone.kind=external requires backbone.external=<name>".into()));
            }
        }
        Ok(())
    }

    /// Every resolved key, in sorted order.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let s = &self.synthetic;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("synthetic.seed", s.seed.to_string());
        put("synthetic.n_fine", s.n_fine.to_string());
        put("synthetic.n_mid", s.n_mid.to_string());
        put("synthetic.n_coarse", s.n_coarse.to_string());
        put("synthetic.dim", s.dim.to_string());
        put("synthetic.regions", s.regions.to_string());
        put("synthetic.noise_sigma", s.noise_sigma.to_string());
        put("synthetic.labels_min", s.labels_min.to_string());
        put("synthetic.labels_max", s.labels_max.to_string());
        put("synthetic.train", s.train.to_string());
        put("synthetic.val", s.val.to_string());
        put("synthetic.test", s.test.to_string());
        put("data.hierarchy", fmt_path(&self.data.hierarchy));
        put("data.train", fmt_path(&self.data.train));
        put("data.val", fmt_path(&self.data.val));
        put("data.test", fmt_path(&self.data.test));
        put("data.features", fmt_path(&self.data.features));
        let (kind, ext) = match &self.backbone {
            BackboneKind::Synthetic => ("synthetic", String::new()),
            BackboneKind::External(n) => ("external", n.clone()),
        };
        put("backbone.kind", kind.into());
        put("backbone.external", ext);
        let b = &self.synthetic_backbone;
        put("backbone.seed", b.seed.to_string());
        put("backbone.token_dim", b.token_dim.to_string());
        put("backbone.vocab_size", b.vocab_size.to_string());
        put("backbone.logit_scale", b.logit_scale.to_string());
        put("prompt.m_pos", self.head.m_pos.to_string());
        put("prompt.m_neg", self.head.m_neg.to_string());
        put(
            "prompt.agg_scale",
            self.head.agg_scale.map(|a| a.to_string()).unwrap_or_else(|| "auto".into()),
        );
        put("prompt.threshold", self.head.threshold.to_string());
        put("loss.gamma_pos", self.asl.gamma_pos.to_string());
        put("loss.gamma_neg", self.asl.gamma_neg.to_string());
        put("loss.margin", self.asl.margin.to_string());
        put("loss.eps", self.asl.eps.to_string());
        put("train.seed", self.stage1.seed.to_string());
        put("train.batch_size", self.stage1.batch_size.to_string());
        put("train.momentum", self.stage1.momentum.to_string());
        put("train.weight_decay", self.stage1.weight_decay.to_string());
        put("train.checkpoint_every", self.stage1.checkpoint_every.to_string());
        put("train.allow_unnormalized_lambda", self.allow_unnormalized_lambda.to_string());
        put("train.stage1.epochs", self.stage1.epochs.to_string());
        put("train.stage1.lr0", self.stage1.lr0.to_string());
        put("train.stage2.epochs", self.stage2.epochs.to_string());
        put("train.stage2.lr0", self.stage2.lr0.to_string());
        let l = self.stage2.lambda.0;
        put("train.stage2.lambda", format!("{},{},{}", l[0], l[1], l[2]));
        m
    }

    pub fn echo_json(&self) -> serde_json::Value {
        serde_json::to_value(self.echo()).expect("string map")
    }

    /// Renders the config back to INI text that reproduces it.
    pub fn to_ini(&self) -> String {
        self.echo()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
