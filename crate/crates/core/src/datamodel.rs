//! Samples, dataset splits, annotation files, and the seeded synthetic dataset.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, LabelSet, Level};

/// Opaque handle a backbone resolves into region features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageRef(pub String);

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image_ref: ImageRef,
    /// Whether the annotation carried an explicit image path.
    pub has_image_path: bool,
    labels: [LabelSet; 3],
}

impl Sample {
    pub fn new(h: &Hierarchy, id: impl Into<String>, image: Option<String>, fine: LabelSet) -> Result<Self> {
        let id = id.into();
        if fine.is_empty() {
            return Err(Error::Dataset(format!("sample {id:?} has an empty label set")));
        }
        for label in &fine {
            if !h.space(Level::Fine).contains(label) {
                return Err(Error::Dataset(format!(
                    "sample {id:?}: unknown label {label:?}"
                )));
            }
        }
        let (mid, coarse) = h.derive_label_sets(&fine)?;
        let has_image_path = image.is_some();
        let image_ref = ImageRef(image.unwrap_or_else(|| id.clone()));
        Ok(Sample {
            id,
            image_ref,
            has_image_path,
            labels: [fine, mid, coarse],
        })
    }

    pub fn labels(&self, level: Level) -> &LabelSet {
        &self.labels[level.slot()]
    }

    pub fn y1(&self) -> &LabelSet {
        &self.labels[0]
    }

    pub fn y2(&self) -> &LabelSet {
        &self.labels[1]
    }

    pub fn y3(&self) -> &LabelSet {
        &self.labels[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Dataset(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate sample id {:?}", s.id)));
            }
        }
        Ok(DatasetSplit { name, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Per-sample label sets at one level, in sample order.
    pub fn targets(&self, level: Level) -> Vec<LabelSet> {
        self.samples.iter().map(|s| s.labels(level).clone()).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let record = AnnotationRecord {
                id: s.id.clone(),
                image: s.has_image_path.then(|| s.image_ref.0.clone()),
                labels_l1: s.y1().iter().cloned().collect(),
            };
            out.push_str(&serde_json::to_string(&record).expect("plain record"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    id: String,
    image: Option<String>,
    labels_l1: Vec<String>,
}

/// Parses JSON-lines annotations, deriving mid and coarse labels for each sample.
pub fn parse_annotations(text: &str, origin: &Path, name: SplitName, h: &Hierarchy) -> Result<DatasetSplit> {
    let mut samples = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(format!("duplicate sample id {:?}", rec.id)));
        }
        let fine: LabelSet = rec.labels_l1.iter().map(|l| l.trim().to_string()).collect();
        if let Some(bad) = fine.iter().find(|l| !h.space(Level::Fine).contains(l)) {
            return Err(parse_err(format!(
                "sample {:?}: unknown label {bad:?}",
                rec.id
            )));
        }
        let sample = Sample::new(h, rec.id, rec.image, fine).map_err(|e| parse_err(e.to_string()))?;
        samples.push(sample);
    }
    DatasetSplit::new(name, samples)
}

pub fn load_annotations(path: impl AsRef<Path>, name: SplitName, h: &Hierarchy) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, name, h)
}

/// Parameters of the seeded synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_fine: usize,
    pub n_mid: usize,
    pub n_coarse: usize,
    /// Feature dimension of region vectors.
    pub dim: usize,
    /// Number of spatial regions per image.
    pub regions: usize,
    pub noise_sigma: f64,
    pub labels_min: usize,
    pub labels_max: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            n_fine: 12,
            n_mid: 6,
            n_coarse: 3,
            dim: 64,
            regions: 4,
            noise_sigma: 0.1,
            labels_min: 1,
            labels_max: 3,
            train: 500,
            val: 100,
            test: 200,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if !(self.n_coarse >= 1 && self.n_coarse <= self.n_mid && self.n_mid <= self.n_fine) {
            return bad(format!(
                "level sizes must satisfy 1 <= n_coarse <= n_mid <= n_fine, got {}/{}/{}",
                self.n_fine, self.n_mid, self.n_coarse
            ));
        }
        if self.dim < 8 {
            return bad(format!("dim must be >= 8, got {}", self.dim));
        }
        if self.regions < 1 {
            return bad("regions must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.labels_min < 1 || self.labels_min > self.labels_max {
            return bad(format!(
                "labels per sample range {}..={} is invalid",
                self.labels_min, self.labels_max
            ));
        }
        if self.labels_max > self.n_fine {
            return bad(format!(
                "labels_max {} exceeds the number of fine classes {}",
                self.labels_max, self.n_fine
            ));
        }
        if self.labels_max > self.regions {
            return bad(format!(
                "labels_max {} exceeds the number of regions {} (labels occupy disjoint regions)",
                self.labels_max, self.regions
            ));
        }
        Ok(())
    }
}

/// Unit-norm class prototypes of the synthetic feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// One row per fine label, in fine label-space order.
    pub fine: Array2<f64>,
    pub mid: Array2<f64>,
    pub coarse: Array2<f64>,
    /// Content of regions that hold no labelled object.
    pub background: Array1<f64>,
}

/// Region features keyed by image reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureStore {
    pub features: BTreeMap<ImageRef, Array2<f64>>,
}

impl FeatureStore {
    pub fn get(&self, image: &ImageRef) -> Option<&Array2<f64>> {
        self.features.get(image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub hierarchy: Hierarchy,
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub prototypes: PrototypeBank,
    pub features: FeatureStore,
}

impl SyntheticData {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    normalized(v)
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Builds a random balanced hierarchy, prototypes, and three splits. The
/// output is a pure function of `spec`.
///
/// Prototypes nest: a mid direction is `normalize(coarse + noise_dir)` and a
/// fine prototype is `normalize(mid + noise_dir)`, so siblings share about
/// half their direction and coarse levels separate more easily than fine.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let name = |prefix: &str, i: usize, n: usize| format!("{prefix}_{i:0w$}", w = width(n));
    let balanced = |rng: &mut ChaCha8Rng, n_child: usize, n_parent: usize| {
        let mut perm: Vec<usize> = (0..n_child).collect();
        perm.shuffle(rng);
        let mut parent = vec![0; n_child];
        for (slot, &child) in perm.iter().enumerate() {
            parent[child] = slot % n_parent;
        }
        parent
    };
    let mid_parent = balanced(&mut rng, spec.n_mid, spec.n_coarse);
    let fine_parent = balanced(&mut rng, spec.n_fine, spec.n_mid);

    let fine_edges: Vec<(String, String)> = (0..spec.n_fine)
        .map(|i| {
            (
                name("fine", i, spec.n_fine),
                name("mid", fine_parent[i], spec.n_mid),
            )
        })
        .collect();
    let mid_edges: Vec<(String, String)> = (0..spec.n_mid)
        .map(|j| {
            (
                name("mid", j, spec.n_mid),
                name("coarse", mid_parent[j], spec.n_coarse),
            )
        })
        .collect();
    let hierarchy = Hierarchy::from_edges(&fine_edges, &mid_edges)?;

    // Zero-padded names keep label-space order equal to generation order.
    let d = spec.dim;
    let mut coarse = Array2::zeros((spec.n_coarse, d));
    for k in 0..spec.n_coarse {
        coarse.row_mut(k).assign(&random_unit(&mut rng, d));
    }
    let mut mid = Array2::zeros((spec.n_mid, d));
    for j in 0..spec.n_mid {
        let v = &coarse.row(mid_parent[j]) + &random_unit(&mut rng, d);
        mid.row_mut(j).assign(&normalized(v));
    }
    let mut fine = Array2::zeros((spec.n_fine, d));
    for i in 0..spec.n_fine {
        let v = &mid.row(fine_parent[i]) + &random_unit(&mut rng, d);
        fine.row_mut(i).assign(&normalized(v));
    }
    let background = random_unit(&mut rng, d);
    let prototypes = PrototypeBank {
        fine,
        mid,
        coarse,
        background,
    };

    let mut features = FeatureStore::default();
    let mut make_split = |split: SplitName, n: usize, rng: &mut ChaCha8Rng| -> Result<DatasetSplit> {
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let id = format!("{split}_{k:05}");
            let count = rng.gen_range(spec.labels_min..=spec.labels_max);
            let mut classes = sample_indices(rng, spec.n_fine, count).into_vec();
            classes.sort_unstable();
            let regions = sample_indices(rng, spec.regions, count).into_vec();

            let mut feats = Array2::zeros((spec.regions, d));
            for r in 0..spec.regions {
                feats.row_mut(r).assign(&prototypes.background);
            }
            for (&c, &r) in classes.iter().zip(&regions) {
                feats.row_mut(r).assign(&prototypes.fine.row(c));
            }
            if spec.noise_sigma > 0.0 {
                for x in feats.iter_mut() {
                    *x += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }

            let labels: LabelSet = classes
                .iter()
                .map(|&c| hierarchy.space(Level::Fine).label(c).to_string())
                .collect();
            let sample = Sample::new(&hierarchy, id, None, labels)?;
            features.features.insert(sample.image_ref.clone(), feats);
            samples.push(sample);
        }
        DatasetSplit::new(split, samples)
    };
    let train = make_split(SplitName::Train, spec.train, &mut rng)?;
    let val = make_split(SplitName::Val, spec.val, &mut rng)?;
    let test = make_split(SplitName::Test, spec.test, &mut rng)?;

    Ok(SyntheticData {
        hierarchy,
        train,
        val,
        test,
        prototypes,
        features,
    })
}
