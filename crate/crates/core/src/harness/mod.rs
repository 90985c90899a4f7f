//! Config-driven experiments: one shard set, every strategy, one report.

mod config;
mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{
    parse_strategies, BaselinesBlock, DataSource, ExperimentConfig, MochaBlock, NetlassoBlock, ShardBlock, Strategy,
    SynthBlock, TopologySource, SPEC_VERSION,
};
pub use report::{emit_report, read_report, Format};

use crate::baselines::{train_global, train_local};
use crate::data::{load_csv, prepare_shards, read_shard_set, synth_clustered, train_test_split, ShardParams, ShardSet};
use crate::error::{Error, Result, Stage};
use crate::metrics::adjusted_rand_index;
use crate::mocha::mocha_solve;
use crate::model::{accuracy, Dataset, InnerSolveOpts, LinearModel, LossConfig};
use crate::netlasso::{admm_solve, extract_clusters, regularization_path};
use crate::topology::{build_knn_graph, clustered_sites, random_sites, read_graph_file, validate_graph, MecGraph};
use crate::trace::{macro_accuracy, AccuracyProbe, ConvergenceTrace};

/// One candidate hyper-parameter and its holdout score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPoint {
    pub value: f64,
    pub validation_accuracy: f64,
    pub rounds: usize,
    /// Clusters at this point (network lasso only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_clusters: Option<usize>,
    /// Agreement with the generating clusters, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub per_node_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
    /// Communication rounds of the reported run (0 for the baselines).
    pub total_rounds: usize,
    /// Chosen regularization weight, if the strategy has one to choose.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selection: Vec<SelectionPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<ConvergenceTrace>,
    pub models: Vec<LinearModel>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub lambda: f64,
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsRow {
    pub label: String,
    pub target: f64,
    /// First round reaching the target; `None` when never reached.
    pub rounds: BTreeMap<Strategy, Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub spec_version: u32,
    pub seeds: BTreeMap<String, u64>,
    pub shard_checksum: String,
    pub n_nodes: usize,
    pub dim: usize,
    /// Strategies in canonical order.
    pub strategies: Vec<StrategyReport>,
    pub rounds_to_accuracy: Vec<RoundsRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clusters: Option<ClusterReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<usize>>,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    /// Copy with every wall-clock field zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for s in &mut r.strategies {
            s.wall_ms = 0.0;
            s.trace = s.trace.as_ref().map(ConvergenceTrace::without_timings);
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }
}

/// First `rounds` value whose sampled accuracy reaches `target`.
pub fn rounds_to_accuracy(trace: &ConvergenceTrace, target: f64) -> Result<Option<usize>> {
    if trace.rows.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("target must be in (0, 1], got {target}")));
    }
    if !trace.has_accuracy() {
        return Err(Error::invalid("trace has no accuracy samples"));
    }
    Ok(trace
        .rows
        .iter()
        .find(|r| r.accuracy.is_some_and(|a| a >= target))
        .map(|r| r.rounds))
}

pub fn build_topology(cfg: &ExperimentConfig) -> Result<MecGraph> {
    let seed = cfg.seeds()["topology"];
    let graph = match &cfg.topology {
        TopologySource::Random { n_nodes, k } => build_knn_graph(&random_sites(*n_nodes, seed), *k)?,
        TopologySource::Clustered {
            n_nodes,
            k,
            n_groups,
            spread,
        } => build_knn_graph(&clustered_sites(*n_nodes, *n_groups, *spread, seed)?, *k)?,
        TopologySource::File { path, k } => read_graph_file(path)?.into_graph(*k)?,
    };
    let problems = validate_graph(&graph);
    if !problems.is_empty() {
        return Err(Error::invalid(format!("invalid graph: {}", problems.join("; "))));
    }
    Ok(graph)
}

/// Shards plus the generating cluster of each node when the data is synthetic.
pub struct PreparedData {
    pub shards: ShardSet,
    pub ground_truth: Option<Vec<usize>>,
    pub true_models: Option<Vec<LinearModel>>,
}

pub fn build_data(cfg: &ExperimentConfig, n_nodes: usize) -> Result<PreparedData> {
    let seed = cfg.seeds()["data"];
    let prepared = match &cfg.data {
        DataSource::Synthetic(s) => {
            let out = synth_clustered(&s.to_synth(seed))?;
            PreparedData {
                shards: out.shards,
                ground_truth: Some(out.assignment),
                true_models: Some(out.true_models),
            }
        }
        DataSource::Csv { path, schema, shards } => {
            let pool = load_csv(path, schema)?;
            let params = ShardParams {
                size_range: shards.size_range,
                flip_rate: shards.flip_rate,
                split_ratio: shards.split_ratio,
                normalize: shards.normalize,
                allow_replacement: shards.allow_replacement,
                seed,
            };
            PreparedData {
                shards: prepare_shards(&pool, n_nodes, &params)?,
                ground_truth: None,
                true_models: None,
            }
        }
        DataSource::Shards { dir } => PreparedData {
            shards: read_shard_set(dir)?.0,
            ground_truth: None,
            true_models: None,
        },
    };
    prepared.shards.validate(n_nodes)?;
    Ok(prepared)
}

struct Holdout {
    fit: Vec<Dataset>,
    val: Vec<Dataset>,
}

fn holdout(train: &[&Dataset], fraction: f64, seed: u64) -> Result<Holdout> {
    let mut fit = Vec::with_capacity(train.len());
    let mut val = Vec::with_capacity(train.len());
    for (t, d) in train.iter().enumerate() {
        let (a, b) = train_test_split(d, 1.0 - fraction, seed.wrapping_add(t as u64))
            .map_err(|e| Error::invalid(format!("holdout split of node {t}: {e}")))?;
        fit.push(a);
        val.push(b);
    }
    Ok(Holdout { fit, val })
}

/// Index of the best score; ties go to the earlier candidate.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn per_node_accuracy(models: &[LinearModel], test: &[&Dataset]) -> Result<Vec<f64>> {
    models.iter().zip(test).map(|(m, d)| accuracy(m, d)).collect()
}

fn strategy_report(
    strategy: Strategy,
    models: Vec<LinearModel>,
    test: &[&Dataset],
    trace: Option<ConvergenceTrace>,
    start: Instant,
) -> Result<StrategyReport> {
    let per_node = per_node_accuracy(&models, test)?;
    let macro_accuracy = per_node.iter().sum::<f64>() / per_node.len() as f64;
    Ok(StrategyReport {
        strategy,
        per_node_accuracy: per_node,
        macro_accuracy,
        total_rounds: trace.as_ref().map_or(0, ConvergenceTrace::total_rounds),
        selected: None,
        selection: Vec::new(),
        trace,
        models,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn run_netlasso(
    cfg: &ExperimentConfig,
    graph: &MecGraph,
    shards: &ShardSet,
    truth: Option<&[usize]>,
    loss: &LossConfig,
) -> Result<(StrategyReport, ClusterReport)> {
    let start = Instant::now();
    let nl = &cfg.netlasso;
    let train = shards.train_sets();
    let test = shards.test_sets();
    let mut selection = Vec::new();
    if nl.lambda_grid.len() > 1 {
        let h = holdout(&train, nl.validation_fraction, cfg.seeds()["validation"])?;
        let fit: Vec<&Dataset> = h.fit.iter().collect();
        let val: Vec<&Dataset> = h.val.iter().collect();
        let (path, _) = regularization_path(graph, &fit, loss, &nl.lambda_grid, &nl.admm_opts(0.0), None)?;
        for p in &path {
            let clusters = extract_clusters(&p.models, graph, nl.cluster_tol)?;
            selection.push(SelectionPoint {
                value: p.lambda,
                validation_accuracy: macro_accuracy(&p.models, &val)?,
                rounds: p.trace.total_rounds(),
                n_clusters: Some(clusters.iter().max().map_or(0, |m| m + 1)),
                ari: truth.map(|t| adjusted_rand_index(&clusters, t)).transpose()?,
            });
        }
    }
    let lambda = if selection.is_empty() {
        nl.lambda_grid[0]
    } else {
        let scores: Vec<f64> = selection.iter().map(|p| p.validation_accuracy).collect();
        selection[argmax(&scores)].value
    };
    let probe = AccuracyProbe::new(test.clone(), cfg.eval_every);
    let sol = admm_solve(graph, &train, loss, &nl.admm_opts(lambda), None, Some(&probe))?;
    let assignment = extract_clusters(&sol.models, graph, nl.cluster_tol)?;
    let clusters = ClusterReport {
        lambda,
        n_clusters: assignment.iter().max().map_or(0, |m| m + 1),
        ari: truth.map(|t| adjusted_rand_index(&assignment, t)).transpose()?,
        assignment,
    };
    let mut rep = strategy_report(Strategy::Netlasso, sol.models, &test, Some(sol.trace), start)?;
    rep.selected = Some(lambda);
    rep.selection = selection;
    Ok((rep, clusters))
}

fn run_mocha(cfg: &ExperimentConfig, graph: &MecGraph, shards: &ShardSet) -> Result<StrategyReport> {
    let start = Instant::now();
    let mb = &cfg.mocha;
    let train = shards.train_sets();
    let test = shards.test_sets();
    let mut selection = Vec::new();
    if mb.lambda1_grid.len() > 1 {
        let h = holdout(&train, cfg.netlasso.validation_fraction, cfg.seeds()["validation"])?;
        let fit: Vec<&Dataset> = h.fit.iter().collect();
        let val: Vec<&Dataset> = h.val.iter().collect();
        for &l1 in &mb.lambda1_grid {
            let sol = mocha_solve(graph, &fit, &mb.opts(l1), None)?;
            selection.push(SelectionPoint {
                value: l1,
                validation_accuracy: macro_accuracy(&sol.models, &val)?,
                rounds: sol.trace.total_rounds(),
                n_clusters: None,
                ari: None,
            });
        }
    }
    let lambda1 = match selection.len() {
        0 => mb.lambda1_grid.first().copied().unwrap_or(mb.lambda1),
        _ => {
            let scores: Vec<f64> = selection.iter().map(|p| p.validation_accuracy).collect();
            selection[argmax(&scores)].value
        }
    };
    let probe = AccuracyProbe::new(test.clone(), cfg.eval_every);
    let sol = mocha_solve(graph, &train, &mb.opts(lambda1), Some(&probe))?;
    if sol.omega_fallbacks > 0 {
        log::warn!("mocha kept the previous relationship matrix in {} rounds", sol.omega_fallbacks);
    }
    let mut rep = strategy_report(Strategy::Mocha, sol.models, &test, Some(sol.trace), start)?;
    rep.selected = Some(lambda1);
    rep.selection = selection;
    Ok(rep)
}

fn rounds_table(strategies: &[StrategyReport], cfg: &ExperimentConfig) -> Result<Vec<RoundsRow>> {
    let mut targets: Vec<(String, f64)> = cfg
        .accuracy_targets
        .iter()
        .map(|t| (format!("{t}"), *t))
        .collect();
    if let Some(local) = strategies.iter().find(|s| s.strategy == Strategy::Local) {
        let t = local.macro_accuracy + 0.02;
        if t <= 1.0 {
            targets.push(("local+0.02".to_string(), t));
        }
    }
    targets
        .into_iter()
        .map(|(label, target)| {
            let rounds = strategies
                .iter()
                .filter_map(|s| s.trace.as_ref().filter(|t| !t.rows.is_empty()).map(|t| (s.strategy, t)))
                .map(|(s, t)| Ok((s, rounds_to_accuracy(t, target)?)))
                .collect::<Result<_>>()?;
            Ok(RoundsRow { label, target, rounds })
        })
        .collect()
}

/// Builds the topology and shards once, runs every configured strategy on them
/// and collects the results. Failures carry the stage they happened in.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate().map_err(|e| e.at(Stage::Config))?;
    let graph = build_topology(cfg).map_err(|e| e.at(Stage::Topology))?;
    let data = build_data(cfg, graph.n_nodes()).map_err(|e| e.at(Stage::Data))?;
    let shards = &data.shards;
    let loss = LossConfig::new(cfg.baselines.l2);
    let inner = InnerSolveOpts::default();
    let test = shards.test_sets();

    let mut strategies = Vec::new();
    let mut clusters = None;
    let mut order = cfg.strategies.clone();
    order.sort();
    for s in order {
        let rep = match s {
            Strategy::Netlasso => {
                let (rep, c) = run_netlasso(cfg, &graph, shards, data.ground_truth.as_deref(), &loss)
                    .map_err(|e| e.at(Stage::NetLasso))?;
                clusters = Some(c);
                rep
            }
            Strategy::Mocha => run_mocha(cfg, &graph, shards).map_err(|e| e.at(Stage::Mocha))?,
            Strategy::Local => {
                let start = Instant::now();
                train_local(&shards.train_sets(), &loss, &inner)
                    .and_then(|m| strategy_report(s, m, &test, None, start))
                    .map_err(|e| e.at(Stage::Baselines))?
            }
            Strategy::Global => {
                let start = Instant::now();
                train_global(&shards.train_sets(), &loss, &inner)
                    .and_then(|m| strategy_report(s, vec![m; shards.len()], &test, None, start))
                    .map_err(|e| e.at(Stage::Baselines))?
            }
        };
        strategies.push(rep);
    }
    let rounds_to_accuracy = rounds_table(&strategies, cfg).map_err(|e| e.at(Stage::Report))?;
    Ok(Report {
        spec_version: SPEC_VERSION,
        seeds: cfg.seeds(),
        shard_checksum: shards.checksum(),
        n_nodes: graph.n_nodes(),
        dim: shards.dim(),
        strategies,
        rounds_to_accuracy,
        clusters,
        ground_truth: data.ground_truth,
        config: cfg.clone(),
    })
}
