use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CsvSchema, NormMethod, SynthConfig};
use crate::error::{Error, Result};
use crate::mocha::{MochaOpts, OmegaMode};
use crate::model::LossConfig;
use crate::netlasso::AdmmOpts;

/// Schema version accepted in the `spec_version` field.
pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Netlasso,
    Mocha,
    Local,
    Global,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Netlasso, Strategy::Mocha, Strategy::Local, Strategy::Global];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Netlasso => "netlasso",
            Strategy::Mocha => "mocha",
            Strategy::Local => "local",
            Strategy::Global => "global",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?} (expected netlasso, mocha, local or global)")))
    }
}

/// Parses a comma-separated strategy list.
pub fn parse_strategies(list: &str) -> Result<Vec<Strategy>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySource {
    /// Sites uniform in the unit square.
    Random { n_nodes: usize, k: usize },
    /// Sites in spatial groups; site `i` is in group `i % n_groups`.
    Clustered {
        n_nodes: usize,
        k: usize,
        n_groups: usize,
        spread: f64,
    },
    /// A graph file; with no `edge` lines the kNN mesh over its sites is used.
    File {
        path: PathBuf,
        #[serde(default = "default_k")]
        k: usize,
    },
}

fn default_k() -> usize {
    5
}

impl TopologySource {
    pub fn n_nodes(&self) -> Option<usize> {
        match self {
            TopologySource::Random { n_nodes, .. } | TopologySource::Clustered { n_nodes, .. } => Some(*n_nodes),
            TopologySource::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthBlock {
    pub n_nodes: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub samples_per_node: (usize, usize),
    #[serde(default)]
    pub margin_noise: f64,
    #[serde(default)]
    pub flip_rate: f64,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
}

impl SynthBlock {
    pub fn to_synth(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_nodes: self.n_nodes,
            dim: self.dim,
            n_clusters: self.n_clusters,
            samples_per_node: self.samples_per_node,
            margin_noise: self.margin_noise,
            flip_rate: self.flip_rate,
            split_ratio: self.split_ratio,
            seed,
        }
    }
}

fn default_split() -> f64 {
    0.7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardBlock {
    pub size_range: (usize, usize),
    #[serde(default = "default_flip")]
    pub flip_rate: f64,
    #[serde(default = "default_split")]
    pub split_ratio: f64,
    #[serde(default = "default_norm")]
    pub normalize: NormMethod,
    #[serde(default = "default_true")]
    pub allow_replacement: bool,
}

fn default_flip() -> f64 {
    0.1
}
fn default_norm() -> NormMethod {
    NormMethod::MinMax
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SynthBlock),
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        shards: ShardBlock,
    },
    /// A directory written by `write_shard_set`.
    Shards { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetlassoBlock {
    /// Candidate λ values, strictly increasing; one value skips selection.
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps_abs")]
    pub eps_abs: f64,
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "default_admm_iters")]
    pub max_iters: usize,
    /// Fraction of each node's training data held out to choose λ.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Models closer than this are treated as one cluster.
    #[serde(default = "default_cluster_tol")]
    pub cluster_tol: f64,
}

fn default_lambda_grid() -> Vec<f64> {
    (0..8).map(|i| 0.01 * 3f64.powi(i)).collect()
}
fn default_rho() -> f64 {
    1.0
}
fn default_eps_abs() -> f64 {
    1e-4
}
fn default_eps_rel() -> f64 {
    1e-3
}
fn default_admm_iters() -> usize {
    1000
}
fn default_validation() -> f64 {
    0.25
}
fn default_cluster_tol() -> f64 {
    1e-2
}

impl Default for NetlassoBlock {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            rho: default_rho(),
            eps_abs: default_eps_abs(),
            eps_rel: default_eps_rel(),
            max_iters: default_admm_iters(),
            validation_fraction: default_validation(),
            cluster_tol: default_cluster_tol(),
        }
    }
}

impl NetlassoBlock {
    pub fn admm_opts(&self, lambda: f64) -> AdmmOpts {
        AdmmOpts {
            rho: self.rho,
            lambda,
            eps_abs: self.eps_abs,
            eps_rel: self.eps_rel,
            max_iters: self.max_iters,
            ..AdmmOpts::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MochaBlock {
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    /// When non-empty, λ₁ is chosen from these by the same holdout protocol.
    #[serde(default)]
    pub lambda1_grid: Vec<f64>,
    #[serde(default = "default_passes")]
    pub local_passes: usize,
    #[serde(default)]
    pub sigma_prime: Option<f64>,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_omega_mode")]
    pub omega_mode: OmegaMode,
    #[serde(default = "default_task_l2")]
    pub task_l2: f64,
}

fn default_lambda1() -> f64 {
    MochaOpts::default().lambda1
}
fn default_passes() -> usize {
    MochaOpts::default().local_passes
}
fn default_rounds() -> usize {
    MochaOpts::default().max_rounds
}
fn default_gap_tol() -> f64 {
    MochaOpts::default().gap_tol
}
fn default_omega_mode() -> OmegaMode {
    MochaOpts::default().omega_mode
}
fn default_task_l2() -> f64 {
    MochaOpts::default().task_l2
}

impl Default for MochaBlock {
    fn default() -> Self {
        let o = MochaOpts::default();
        Self {
            lambda1: o.lambda1,
            lambda1_grid: Vec::new(),
            local_passes: o.local_passes,
            sigma_prime: o.sigma_prime,
            max_rounds: o.max_rounds,
            gap_tol: o.gap_tol,
            omega_mode: o.omega_mode,
            task_l2: o.task_l2,
        }
    }
}

impl MochaBlock {
    pub fn opts(&self, lambda1: f64) -> MochaOpts {
        MochaOpts {
            lambda1,
            local_passes: self.local_passes,
            sigma_prime: self.sigma_prime,
            max_rounds: self.max_rounds,
            gap_tol: self.gap_tol,
            omega_mode: self.omega_mode,
            task_l2: self.task_l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselinesBlock {
    #[serde(default = "default_l2")]
    pub l2: f64,
}

fn default_l2() -> f64 {
    LossConfig::default().l2
}

impl Default for BaselinesBlock {
    fn default() -> Self {
        Self { l2: default_l2() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    /// Accuracy is sampled along traces every this many rounds.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Extra absolute accuracy targets for the rounds table.
    #[serde(default)]
    pub accuracy_targets: Vec<f64>,
    pub topology: TopologySource,
    pub data: DataSource,
    #[serde(default)]
    pub netlasso: NetlassoBlock,
    #[serde(default)]
    pub mocha: MochaBlock,
    #[serde(default)]
    pub baselines: BaselinesBlock,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_eval_every() -> usize {
    1
}

fn increasing(name: &str, v: &[f64], min_exclusive: Option<f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || x < &0.0 || min_exclusive.is_some_and(|m| *x <= m)) {
        return Err(Error::invalid(format!("{name} has an out-of-range value: {v:?}")));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(format!("{name} must be strictly increasing: {v:?}")));
    }
    Ok(())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config serialization: {e}")))
    }

    /// Resolved per-component seeds.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("global".to_string(), self.seed),
            ("topology".to_string(), self.seed),
            ("data".to_string(), self.seed.wrapping_add(1)),
            ("validation".to_string(), self.seed.wrapping_add(2)),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::invalid(format!(
                "unsupported spec_version {} (this build reads {SPEC_VERSION})",
                self.spec_version
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::invalid("no strategies selected"));
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(Error::invalid("strategies are listed more than once"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        if self.accuracy_targets.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("accuracy targets must be in (0, 1]"));
        }
        match &self.topology {
            TopologySource::Random { n_nodes, k } | TopologySource::Clustered { n_nodes, k, .. } => {
                if *n_nodes < 2 || *k < 1 || k >= n_nodes {
                    return Err(Error::invalid(format!(
                        "topology needs n_nodes >= 2 and 1 <= k < n_nodes (got {n_nodes}, {k})"
                    )));
                }
                if let TopologySource::Clustered { n_groups, spread, .. } = &self.topology {
                    if *n_groups < 1 || !(*spread >= 0.0) {
                        return Err(Error::invalid("clustered topology needs n_groups >= 1 and spread >= 0"));
                    }
                }
            }
            TopologySource::File { k, .. } => {
                if *k < 1 {
                    return Err(Error::invalid("k must be >= 1"));
                }
            }
        }
        match &self.data {
            DataSource::Synthetic(s) => {
                s.to_synth(0).validate()?;
                if let Some(n) = self.topology.n_nodes() {
                    if n != s.n_nodes {
                        return Err(Error::invalid(format!(
                            "synthetic data has {} nodes but the topology has {n}",
                            s.n_nodes
                        )));
                    }
                }
            }
            DataSource::Csv { schema, shards, .. } => {
                schema.validate()?;
                let (lo, hi) = shards.size_range;
                if lo < 2 || hi < lo {
                    return Err(Error::invalid(format!("invalid shard size range ({lo}, {hi})")));
                }
                if !(0.0..1.0).contains(&shards.flip_rate) || !(shards.split_ratio > 0.0 && shards.split_ratio < 1.0) {
                    return Err(Error::invalid("shard flip_rate must be in [0, 1) and split_ratio in (0, 1)"));
                }
            }
            DataSource::Shards { .. } => {}
        }
        let nl = &self.netlasso;
        if nl.lambda_grid.is_empty() {
            return Err(Error::invalid("netlasso.lambda_grid is empty"));
        }
        increasing("netlasso.lambda_grid", &nl.lambda_grid, None)?;
        nl.admm_opts(nl.lambda_grid[0]).validate()?;
        if !(nl.validation_fraction > 0.0 && nl.validation_fraction < 1.0) {
            return Err(Error::invalid("netlasso.validation_fraction must be in (0, 1)"));
        }
        if !(nl.cluster_tol > 0.0) {
            return Err(Error::invalid("netlasso.cluster_tol must be > 0"));
        }
        self.mocha.opts(self.mocha.lambda1).validate()?;
        increasing("mocha.lambda1_grid", &self.mocha.lambda1_grid, Some(0.0))?;
        LossConfig::new(self.baselines.l2).validate()?;
        if !(self.baselines.l2 > 0.0) {
            return Err(Error::invalid("baselines.l2 must be > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
spec_version = 1
seed = 3

[topology]
source = "clustered"
n_nodes = 6
k = 2
n_groups = 2
spread = 0.1

[data]
source = "synthetic"
n_nodes = 6
dim = 3
n_clusters = 2
samples_per_node = [20, 30]
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("c.toml")).unwrap();
        assert_eq!(c.strategies, Strategy::ALL.to_vec());
        assert_eq!(c.netlasso.lambda_grid.len(), 8);
        assert_eq!(c.mocha.lambda1, 1.0);
        assert_eq!(c.seeds()["data"], 4);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::from_toml_str(MINIMAL, Path::new("c.toml")).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap(), Path::new("c2.toml")).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn rejects_wrong_version_and_node_mismatch() {
        let v2 = MINIMAL.replace("spec_version = 1", "spec_version = 2");
        assert!(ExperimentConfig::from_toml_str(&v2, Path::new("c.toml")).is_err());
        let bad = MINIMAL.replacen("n_nodes = 6\ndim", "n_nodes = 7\ndim", 1);
        let err = ExperimentConfig::from_toml_str(&bad, Path::new("c.toml")).unwrap_err();
        assert!(err.to_string().contains("7 nodes"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let bad = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        match ExperimentConfig::from_toml_str(&bad, Path::new("c.toml")).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn strategy_lists() {
        assert_eq!(
            parse_strategies("netlasso, local").unwrap(),
            vec![Strategy::Netlasso, Strategy::Local]
        );
        assert!(parse_strategies("nl").is_err());
    }
}
