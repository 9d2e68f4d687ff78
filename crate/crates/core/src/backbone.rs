//! Frozen vision-language encoder interface and a deterministic synthetic
//! implementation.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::datamodel::{FeatureStore, ImageRef};
use crate::error::{Error, Result};
use crate::hierarchy::hex;

pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackboneDims {
    /// Width of region features and text embeddings.
    pub feature_dim: usize,
    /// Width of token embeddings (and of learnable context vectors).
    pub token_dim: usize,
    pub regions: usize,
}

/// A frozen encoder. Every method takes `&self`: parameters never change
/// after construction.
pub trait BackboneAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn dims(&self) -> BackboneDims;

    fn logit_scale(&self) -> f64;

    fn tokenize(&self, text: &str) -> Vec<u32>;

    /// Token embedding lookup, one row per id.
    fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>>;

    /// Final spatial feature map, `regions x feature_dim`, no pooling.
    fn encode_image(&self, image: &ImageRef) -> Result<Array2<f64>>;

    /// Encodes a token-embedding sequence into a unit-norm vector.
    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>>;

    /// Gradient of a scalar w.r.t. every row of `tokens`, given its gradient
    /// w.r.t. the output of [`BackboneAdapter::encode_text`].
    fn encode_text_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>>;

    /// Digest over every parameter byte. Used to prove the encoder stayed frozen.
    fn parameter_digest(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticBackboneConfig {
    pub seed: u64,
    pub token_dim: usize,
    pub vocab_size: usize,
    pub logit_scale: f64,
}

impl Default for SyntheticBackboneConfig {
    fn default() -> Self {
        SyntheticBackboneConfig {
            seed: 11,
            token_dim: 64,
            vocab_size: 1024,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

/// Synthetic encoder: images resolve to stored region features, text is
/// `normalize(P · mean(tokens))` for a fixed random projection `P`, and
/// token embeddings come from a seeded table indexed by word hash.
pub struct SyntheticBackbone {
    config: SyntheticBackboneConfig,
    feature_dim: usize,
    regions: usize,
    token_table: Array2<f64>,
    projection: Array2<f64>,
    features: Arc<FeatureStore>,
}

impl fmt::Debug for SyntheticBackbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticBackbone")
            .field("config", &self.config)
            .field("feature_dim", &self.feature_dim)
            .field("regions", &self.regions)
            .field("images", &self.features.features.len())
            .finish()
    }
}

impl SyntheticBackbone {
    pub fn new(
        config: SyntheticBackboneConfig,
        feature_dim: usize,
        regions: usize,
        features: Arc<FeatureStore>,
    ) -> Result<Self> {
        if config.token_dim == 0 || config.vocab_size == 0 || feature_dim == 0 || regions == 0 {
            return Err(Error::Backbone("dimensions must be positive".into()));
        }
        if !(config.logit_scale > 0.0 && config.logit_scale.is_finite()) {
            return Err(Error::Backbone(format!(
                "logit_scale must be positive, got {}",
                config.logit_scale
            )));
        }
        for (image, f) in &features.features {
            if f.dim() != (regions, feature_dim) {
                return Err(Error::Backbone(format!(
                    "stored features for {image} have shape {:?}, expected ({regions}, {feature_dim})",
                    f.dim()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_table = Array2::from_shape_simple_fn((config.vocab_size, config.token_dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        let scale = 1.0 / (config.token_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((feature_dim, config.token_dim), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(SyntheticBackbone {
            config,
            feature_dim,
            regions,
            token_table,
            projection,
            features,
        })
    }

    pub fn config(&self) -> &SyntheticBackboneConfig {
        &self.config
    }

    fn projected(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        if tokens.nrows() == 0 {
            return Err(Error::Backbone("cannot encode an empty token sequence".into()));
        }
        if tokens.ncols() != self.config.token_dim {
            return Err(Error::Shape(format!(
                "token width {} does not match backbone token_dim {}",
                tokens.ncols(),
                self.config.token_dim
            )));
        }
        let mean = tokens.mean_axis(Axis(0)).expect("non-empty");
        Ok(self.projection.dot(&mean))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl BackboneAdapter for SyntheticBackbone {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn dims(&self) -> BackboneDims {
        BackboneDims {
            feature_dim: self.feature_dim,
            token_dim: self.config.token_dim,
            regions: self.regions,
        }
    }

    fn logit_scale(&self) -> f64 {
        self.config.logit_scale
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| (fnv1a(w.to_lowercase().as_bytes()) % self.config.vocab_size as u64) as u32)
            .collect()
    }

    fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.token_dim));
        for (row, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Backbone(format!("token id {id} outside vocabulary")));
            }
            out.row_mut(row).assign(&self.token_table.row(id));
        }
        Ok(out)
    }

    fn encode_image(&self, image: &ImageRef) -> Result<Array2<f64>> {
        self.features
            .get(image)
            .cloned()
            .ok_or_else(|| Error::Backbone(format!("unresolvable image reference {image}")))
    }

    fn encode_text(&self, tokens: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let u = self.projected(tokens)?;
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Backbone(format!("degenerate text embedding (norm {norm})")));
        }
        Ok(u / norm)
    }

    fn encode_text_vjp(
        &self,
        tokens: ArrayView2<'_, f64>,
        grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        let u = self.projected(tokens)?;
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Backbone(format!("degenerate text embedding (norm {norm})")));
        }
        let t = &u / norm;
        // d normalize(u) = (I - t t^T) / |u|
        let du = (&grad_out - &(&t * t.dot(&grad_out))) / norm;
        let dmean = self.projection.t().dot(&du) / tokens.nrows() as f64;
        let mut out = Array2::zeros(tokens.raw_dim());
        for mut row in out.rows_mut() {
            row.assign(&dmean);
        }
        Ok(out)
    }

    fn parameter_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"synthetic-backbone");
        hasher.update(self.config.logit_scale.to_le_bytes());
        for x in self.token_table.iter().chain(self.projection.iter()) {
            hasher.update(x.to_le_bytes());
        }
        hex(&hasher.finalize())
    }
}

/// Constructor for an out-of-tree adapter, given its flattened config keys.
pub type AdapterFactory =
    Box<dyn Fn(&BTreeMap<String, String>) -> Result<Box<dyn BackboneAdapter>> + Send + Sync>;

/// Named external adapters. Real pretrained encoders register here.
#[derive(Default)]
pub struct BackboneRegistry {
    factories: BTreeMap<String, AdapterFactory>,
}

impl BackboneRegistry {
    pub fn register(&mut self, name: impl Into<String>, factory: AdapterFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, config: &BTreeMap<String, String>) -> Result<Box<dyn BackboneAdapter>> {
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Backbone(format!(
                "no external adapter registered under {name:?} (registered: [{}])",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(config)
    }
}
