//! Data preparation: CSV ingestion, normalization, non-IID sharding with label
//! noise, train/test splitting and a synthetic clustered-task generator.
//!
//! Every stage is a pure function of its input and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::model::{Dataset, LabeledSample, LinearModel};

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A CSV column addressed by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl ColumnRef {
    fn resolve(&self, headers: &csv::StringRecord, path: &Path) -> Result<usize> {
        let found = match self {
            ColumnRef::Index(i) => (*i < headers.len()).then_some(*i),
            ColumnRef::Name(n) => headers.iter().position(|h| h == n),
        };
        found.ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: self.to_string(),
            message: "column not found in header".into(),
        })
    }
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "#{i}"),
            ColumnRef::Name(n) => f.write_str(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub feature_columns: Vec<ColumnRef>,
    pub label_column: ColumnRef,
    /// Raw label strings mapped to `+1`; every other listed value is `-1`.
    pub positive_values: BTreeSet<String>,
    /// Raw label strings mapped to `-1`. Empty means "anything not positive".
    #[serde(default)]
    pub negative_values: BTreeSet<String>,
    /// Feature columns that are one-hot encoded instead of parsed as numbers.
    #[serde(default)]
    pub categorical_columns: Vec<ColumnRef>,
}

impl CsvSchema {
    pub fn validate(&self) -> Result<()> {
        if self.positive_values.is_empty() {
            return Err(Error::invalid("positive_values must not be empty"));
        }
        if self.feature_columns.contains(&self.label_column) {
            return Err(Error::invalid(format!(
                "label column {} is also listed as a feature",
                self.label_column
            )));
        }
        if let Some(c) = self
            .categorical_columns
            .iter()
            .find(|c| !self.feature_columns.contains(c))
        {
            return Err(Error::invalid(format!("categorical column {c} is not a feature column")));
        }
        Ok(())
    }
}

/// Category vocabularies per categorical feature column, lexicographically ordered.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CategoryEncoding {
    pub categories: BTreeMap<String, Vec<String>>,
}

/// Reads a headed CSV into a dataset. Categorical columns are one-hot encoded
/// with categories sorted lexicographically.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    load_csv_encoded(path, schema, None).map(|(d, _)| d)
}

/// Like [`load_csv`], optionally reusing a previously learned encoding. With a
/// given encoding, unseen categories encode as all zeros.
pub fn load_csv_encoded(
    path: &Path,
    schema: &CsvSchema,
    encoding: Option<&CategoryEncoding>,
) -> Result<(Dataset, CategoryEncoding)> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, "-", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(path, 0, "-", e.to_string()))?
        .clone();
    let label_idx = schema.label_column.resolve(&headers, path)?;
    let feature_idx: Vec<usize> = schema
        .feature_columns
        .iter()
        .map(|c| c.resolve(&headers, path))
        .collect::<Result<_>>()?;
    let categorical: BTreeSet<usize> = schema
        .categorical_columns
        .iter()
        .map(|c| c.resolve(&headers, path))
        .collect::<Result<_>>()?;

    let records: Vec<csv::StringRecord> = reader
        .records()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| csv_error(path, i + 1, "-", e.to_string())))
        .collect::<Result<_>>()?;

    let encoding = match encoding {
        Some(e) => e.clone(),
        None => {
            let mut categories = BTreeMap::new();
            for &c in &categorical {
                let vocab: BTreeSet<String> =
                    records.iter().map(|r| r[c].trim().to_string()).collect();
                categories.insert(headers[c].to_string(), vocab.into_iter().collect());
            }
            CategoryEncoding { categories }
        }
    };

    let mut dim = 0;
    for &c in &feature_idx {
        dim += if categorical.contains(&c) {
            encoding.categories.get(&headers[c]).map_or(0, Vec::len)
        } else {
            1
        };
    }

    let mut samples = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let row = i + 1;
        let mut x = Vec::with_capacity(dim);
        for &c in &feature_idx {
            let cell = rec[c].trim();
            if categorical.contains(&c) {
                let vocab = encoding
                    .categories
                    .get(&headers[c])
                    .map(Vec::as_slice)
                    .unwrap_or(&[]);
                x.extend(vocab.iter().map(|v| if v == cell { 1.0 } else { 0.0 }));
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    csv_error(path, row, &headers[c], format!("cannot parse `{cell}` as a number"))
                })?;
                x.push(v);
            }
        }
        let raw = rec[label_idx].trim();
        let label = if schema.positive_values.contains(raw) {
            1.0
        } else if schema.negative_values.is_empty() || schema.negative_values.contains(raw) {
            -1.0
        } else {
            return Err(csv_error(
                path,
                row,
                &headers[label_idx],
                format!("unknown label value `{raw}`"),
            ));
        };
        samples.push(LabeledSample { features: x, label });
    }
    Ok((Dataset::new(samples, dim)?, encoding))
}

fn csv_error(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMethod {
    None,
    MinMax,
    ZScore,
}

/// Per-feature affine statistics: `(min, max)` for min-max, `(mean, std)` for z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub method: NormMethod,
    pub per_feature: Vec<(f64, f64)>,
}

impl NormParams {
    /// Applies the stored transform. Constant features map to 0.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if self.method == NormMethod::None {
            return Ok(data.clone());
        }
        if data.dim() != self.per_feature.len() {
            return Err(Error::DimensionMismatch {
                expected: self.per_feature.len(),
                found: data.dim(),
            });
        }
        let samples = data
            .iter()
            .map(|s| LabeledSample {
                features: s
                    .features
                    .iter()
                    .zip(&self.per_feature)
                    .map(|(&x, &(a, b))| self.transform(x, a, b))
                    .collect(),
                label: s.label,
            })
            .collect();
        Dataset::new(samples, data.dim())
    }

    fn transform(&self, x: f64, a: f64, b: f64) -> f64 {
        match self.method {
            NormMethod::None => x,
            NormMethod::MinMax => {
                if b > a {
                    (x - a) / (b - a)
                } else {
                    0.0
                }
            }
            NormMethod::ZScore => {
                if b > 0.0 {
                    (x - a) / b
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fits normalization statistics on `data` and applies them to it.
pub fn normalize(data: &Dataset, method: NormMethod) -> Result<(Dataset, NormParams)> {
    let params = fit_normalization(data, method)?;
    Ok((params.apply(data)?, params))
}

pub fn fit_normalization(data: &Dataset, method: NormMethod) -> Result<NormParams> {
    if data.is_empty() {
        return Err(Error::invalid("cannot normalize an empty dataset"));
    }
    let d = data.dim();
    let n = data.len() as f64;
    let per_feature = (0..d)
        .map(|j| match method {
            NormMethod::None => (0.0, 1.0),
            NormMethod::MinMax => data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, s| {
                (acc.0.min(s.features[j]), acc.1.max(s.features[j]))
            }),
            NormMethod::ZScore => {
                let mean = data.iter().map(|s| s.features[j]).sum::<f64>() / n;
                let var = data
                    .iter()
                    .map(|s| (s.features[j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let std = var.sqrt();
                // Treat round-off-level spread as constant.
                let scale = mean.abs().max(1.0);
                (mean, if std > 1e-12 * scale { std } else { 0.0 })
            }
        })
        .collect();
    Ok(NormParams {
        method,
        per_feature,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardDraw {
    pub shards: Vec<Dataset>,
    /// True when the pool was too small and shards overlap.
    pub with_replacement: bool,
}

/// Splits `data` into `n_shards` shards of sizes drawn uniformly from
/// `size_range` (inclusive).
///
/// If the drawn sizes fit in the pool, shards are disjoint slices of one random
/// permutation. Otherwise, and only when `allow_replacement` is set, every shard is
/// drawn from the whole pool (no repeats within a shard, overlap across shards).
pub fn shard(
    data: &Dataset,
    n_shards: usize,
    size_range: (usize, usize),
    seed: u64,
    allow_replacement: bool,
) -> Result<ShardDraw> {
    let (lo, hi) = size_range;
    if lo < 1 || hi < lo {
        return Err(Error::invalid(format!("invalid shard size range ({lo}, {hi})")));
    }
    if n_shards == 0 {
        return Err(Error::invalid("n_shards must be >= 1"));
    }
    let n = data.len();
    if n_shards * lo > n && !allow_replacement {
        return Err(Error::invalid(format!(
            "{n_shards} shards of at least {lo} samples need {} samples, pool has {n}; enable replacement",
            n_shards * lo
        )));
    }
    let mut rng = rng_for(seed, 1);
    let sizes: Vec<usize> = (0..n_shards).map(|_| rng.random_range(lo..=hi)).collect();
    let total: usize = sizes.iter().sum();
    let samples = data.samples();
    let pick = |idx: &[usize]| {
        Dataset::new(idx.iter().map(|&i| samples[i].clone()).collect(), data.dim())
    };

    if total <= n {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut start = 0;
        let shards = sizes
            .iter()
            .map(|&s| {
                let part = pick(&perm[start..start + s]);
                start += s;
                part
            })
            .collect::<Result<_>>()?;
        return Ok(ShardDraw {
            shards,
            with_replacement: false,
        });
    }
    if !allow_replacement {
        return Err(Error::invalid(format!(
            "drawn shard sizes total {total} exceed the pool of {n}; enable replacement"
        )));
    }
    log::warn!("sharding {total} slots from {n} samples: shards overlap");
    let shards = sizes
        .iter()
        .map(|&s| {
            let idx: Vec<usize> = if s <= n {
                index::sample(&mut rng, n, s).into_vec()
            } else {
                (0..s).map(|_| rng.random_range(0..n)).collect()
            };
            pick(&idx)
        })
        .collect::<Result<_>>()?;
    Ok(ShardDraw {
        shards,
        with_replacement: true,
    })
}

/// Negates exactly `round(rate * n)` labels at uniformly chosen positions.
pub fn flip_labels(data: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("flip rate must be in [0, 1), got {rate}")));
    }
    let n = data.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = rng_for(seed, 2);
    let mut samples = data.samples().to_vec();
    for i in index::sample(&mut rng, n, count.min(n)) {
        samples[i].label = -samples[i].label;
    }
    Dataset::new(samples, data.dim())
}

/// Random split into `(round(ratio n), n - round(ratio n))`, both non-empty.
pub fn train_test_split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n = data.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n < 2 || n_train == 0 || n_train == n {
        return Err(Error::invalid(format!(
            "split of {n} samples at ratio {ratio} leaves an empty part"
        )));
    }
    let mut rng = rng_for(seed, 3);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let samples = data.samples();
    let take = |idx: &[usize]| {
        Dataset::new(idx.iter().map(|&i| samples[i].clone()).collect(), data.dim())
    };
    Ok((take(&perm[..n_train])?, take(&perm[n_train..])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub node_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSet {
    pub shards: Vec<Shard>,
    pub normalization: Option<NormParams>,
    #[serde(default)]
    pub with_replacement: bool,
}

impl ShardSet {
    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.shards.first().map_or(0, |s| s.train.dim())
    }

    pub fn train_sets(&self) -> Vec<&Dataset> {
        self.shards.iter().map(|s| &s.train).collect()
    }

    pub fn test_sets(&self) -> Vec<&Dataset> {
        self.shards.iter().map(|s| &s.test).collect()
    }

    /// Checks one shard per node id `0..n_nodes`, non-empty parts and a shared dimension.
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        if self.shards.len() != n_nodes {
            return Err(Error::invalid(format!(
                "{} shards for {n_nodes} graph nodes",
                self.shards.len()
            )));
        }
        let dim = self.dim();
        for (i, s) in self.shards.iter().enumerate() {
            if s.node_id != i {
                return Err(Error::invalid(format!("shard {i} carries node id {}", s.node_id)));
            }
            if s.train.is_empty() || s.test.is_empty() {
                return Err(Error::invalid(format!("node {i} has an empty train or test set")));
            }
            if s.train.dim() != dim || s.test.dim() != dim {
                return Err(Error::invalid(format!("node {i} has a different feature dimension")));
            }
        }
        Ok(())
    }

    /// SHA-256 over node ids, labels and feature bit patterns, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.shards {
            h.update((s.node_id as u64).to_le_bytes());
            for part in [&s.train, &s.test] {
                h.update((part.len() as u64).to_le_bytes());
                for x in part.iter() {
                    h.update(x.label.to_bits().to_le_bytes());
                    for f in &x.features {
                        h.update(f.to_bits().to_le_bytes());
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardParams {
    pub size_range: (usize, usize),
    #[serde(default = "default_flip_rate")]
    pub flip_rate: f64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default = "default_norm")]
    pub normalize: NormMethod,
    #[serde(default = "default_true")]
    pub allow_replacement: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_flip_rate() -> f64 {
    0.1
}
fn default_split_ratio() -> f64 {
    0.7
}
fn default_norm() -> NormMethod {
    NormMethod::MinMax
}
fn default_true() -> bool {
    true
}

/// Shard, add label noise, split, then normalize with statistics fitted on the
/// union of the training parts only.
pub fn prepare_shards(data: &Dataset, n_nodes: usize, p: &ShardParams) -> Result<ShardSet> {
    let draw = shard(data, n_nodes, p.size_range, p.seed, p.allow_replacement)?;
    let mut raw = Vec::with_capacity(n_nodes);
    for (node_id, part) in draw.shards.iter().enumerate() {
        let node_seed = p.seed.wrapping_add(1 + node_id as u64);
        let noisy = flip_labels(part, p.flip_rate, node_seed)?;
        let (train, test) = train_test_split(&noisy, p.split_ratio, node_seed)?;
        raw.push(Shard {
            node_id,
            train,
            test,
        });
    }
    let set = ShardSet {
        shards: raw,
        normalization: None,
        with_replacement: draw.with_replacement,
    };
    normalize_shards(set, p.normalize)
}

/// Fits normalization on the training parts and applies it to train and test.
pub fn normalize_shards(set: ShardSet, method: NormMethod) -> Result<ShardSet> {
    if method == NormMethod::None {
        return Ok(set);
    }
    let pool = Dataset::concat(set.shards.iter().map(|s| &s.train))?;
    let params = fit_normalization(&pool, method)?;
    let shards = set
        .shards
        .into_iter()
        .map(|s| {
            Ok(Shard {
                node_id: s.node_id,
                train: params.apply(&s.train)?,
                test: params.apply(&s.test)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ShardSet {
        shards,
        normalization: Some(params),
        with_replacement: set.with_replacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub samples_per_node: (usize, usize),
    #[serde(default)]
    pub margin_noise: f64,
    #[serde(default)]
    pub flip_rate: f64,
    #[serde(default = "default_split_ratio")]
    pub split_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 1 {
            return Err(Error::invalid("dim must be >= 1"));
        }
        if self.n_clusters < 1 || self.n_clusters > self.n_nodes {
            return Err(Error::invalid(format!(
                "n_clusters must be in [1, n_nodes = {}], got {}",
                self.n_nodes, self.n_clusters
            )));
        }
        let (lo, hi) = self.samples_per_node;
        if lo < 2 || hi < lo {
            return Err(Error::invalid(format!("invalid samples_per_node ({lo}, {hi})")));
        }
        if !(self.margin_noise >= 0.0) {
            return Err(Error::invalid("margin_noise must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            return Err(Error::invalid("flip_rate must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub shards: ShardSet,
    /// Cluster of each node.
    pub assignment: Vec<usize>,
    /// Unit-norm generating model per cluster (zero bias).
    pub true_models: Vec<LinearModel>,
}

/// Nodes are assigned to clusters round-robin; node data is `x ~ N(0, I)`,
/// `y = sign(w_c·x + margin_noise·ε)` with `ε ~ N(0, 1)`, then label flips, then a
/// train/test split.
pub fn synth_clustered(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut model_rng = rng_for(cfg.seed, 10);
    let true_models: Vec<LinearModel> = (0..cfg.n_clusters)
        .map(|_| loop {
            let w: Vec<f64> = (0..cfg.dim)
                .map(|_| StandardNormal.sample(&mut model_rng))
                .collect();
            let nrm = norm(&w);
            if nrm > 1e-12 {
                break LinearModel::new(w.iter().map(|x| x / nrm).collect(), 0.0);
            }
        })
        .collect();
    let assignment: Vec<usize> = (0..cfg.n_nodes).map(|i| i % cfg.n_clusters).collect();

    let mut shards = Vec::with_capacity(cfg.n_nodes);
    for (node_id, &c) in assignment.iter().enumerate() {
        let mut rng = rng_for(cfg.seed, 100 + node_id as u64);
        let n = rng.random_range(cfg.samples_per_node.0..=cfg.samples_per_node.1);
        let samples = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps: f64 = StandardNormal.sample(&mut rng);
                let m = true_models[c].margin(&x) + cfg.margin_noise * eps;
                LabeledSample {
                    features: x,
                    label: if m >= 0.0 { 1.0 } else { -1.0 },
                }
            })
            .collect();
        let data = Dataset::new(samples, cfg.dim)?;
        let node_seed = cfg.seed.wrapping_add(1 + node_id as u64);
        let noisy = flip_labels(&data, cfg.flip_rate, node_seed)?;
        let (train, test) = train_test_split(&noisy, cfg.split_ratio, node_seed)?;
        shards.push(Shard {
            node_id,
            train,
            test,
        });
    }
    Ok(SynthOutput {
        shards: ShardSet {
            shards,
            normalization: None,
            with_replacement: false,
        },
        assignment,
        true_models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub node_id: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_file: String,
    pub test_file: String,
}

/// Index written next to the per-node CSV files of a persisted [`ShardSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub dim: usize,
    pub seeds: BTreeMap<String, u64>,
    pub normalization: Option<NormParams>,
    pub with_replacement: bool,
    pub checksum: String,
    pub nodes: Vec<ManifestEntry>,
}

fn write_dataset_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, "-", e.to_string()))?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    let err = |e: csv::Error| csv_error(path, 0, "-", e.to_string());
    w.write_record(&header).map_err(err)?;
    for s in data.iter() {
        let mut row: Vec<String> = s.features.iter().map(|x| format!("{x:?}")).collect();
        row.push(format!("{}", s.label as i32));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_dataset_csv(path: &Path, dim: usize) -> Result<Dataset> {
    let schema = CsvSchema {
        feature_columns: (0..dim).map(ColumnRef::Index).collect(),
        label_column: ColumnRef::Index(dim),
        positive_values: BTreeSet::from(["1".to_string()]),
        negative_values: BTreeSet::from(["-1".to_string()]),
        categorical_columns: Vec::new(),
    };
    load_csv(path, &schema)
}

/// Writes `node_<id>_train.csv`, `node_<id>_test.csv` and `manifest.json` into `dir`.
pub fn write_shard_set(set: &ShardSet, dir: &Path, seeds: BTreeMap<String, u64>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut nodes = Vec::with_capacity(set.len());
    for s in &set.shards {
        let train_file = format!("node_{}_train.csv", s.node_id);
        let test_file = format!("node_{}_test.csv", s.node_id);
        write_dataset_csv(&s.train, &dir.join(&train_file))?;
        write_dataset_csv(&s.test, &dir.join(&test_file))?;
        nodes.push(ManifestEntry {
            node_id: s.node_id,
            n_train: s.train.len(),
            n_test: s.test.len(),
            train_file,
            test_file,
        });
    }
    let manifest = ShardManifest {
        dim: set.dim(),
        seeds,
        normalization: set.normalization.clone(),
        with_replacement: set.with_replacement,
        checksum: set.checksum(),
        nodes,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_shard_set(dir: &Path) -> Result<(ShardSet, ShardManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ShardManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let shards = manifest
        .nodes
        .iter()
        .map(|m| {
            let train = read_dataset_csv(&dir.join(&m.train_file), manifest.dim)?;
            let test = read_dataset_csv(&dir.join(&m.test_file), manifest.dim)?;
            if train.len() != m.n_train || test.len() != m.n_test {
                return Err(Error::invalid(format!(
                    "node {} sizes disagree with the manifest",
                    m.node_id
                )));
            }
            Ok(Shard {
                node_id: m.node_id,
                train,
                test,
            })
        })
        .collect::<Result<_>>()?;
    let set = ShardSet {
        shards,
        normalization: manifest.normalization.clone(),
        with_replacement: manifest.with_replacement,
    };
    Ok((set, manifest))
}
