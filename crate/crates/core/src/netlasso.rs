//! Network lasso solved by ADMM.
//!
//! Minimizes `Σ_t ℓ_t(w_t) + λ Σ_{(j,k)∈E} a_jk ‖w_j - w_k‖₂` where `ℓ_t` is the
//! node's averaged hinge objective. Each undirected edge carries a pair of
//! directed copies `z_ti`, `z_it` and scaled duals `u_ti`, `u_it`. One outer
//! iteration runs three barrier-separated phases:
//!
//! 1. w: every node solves its proximal SVM against anchors `z_ti - u_ti`;
//! 2. z: every edge applies the closed-form two-point prox ([`edge_prox`]);
//! 3. u: `u_ti += w_t - z_ti` on every directed edge.
//!
//! Models are augmented (`[w, b]`), so the edge penalty acts on the bias too.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dist, sq_norm};
use crate::model::{
    hinge_objective_unchecked, solve_prox_svm_from, Anchor, Dataset, InnerSolveOpts, LinearModel,
    LossConfig, ProxSolution,
};
use crate::topology::{validate_graph, MecGraph};
use crate::trace::{AccuracyProbe, ConvergenceTrace, TraceRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmOpts {
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_eps_abs")]
    pub eps_abs: f64,
    #[serde(default = "default_eps_rel")]
    pub eps_rel: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub inner: InnerSolveOpts,
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
fn default_max_iters() -> usize {
    1000
}

impl Default for AdmmOpts {
    fn default() -> Self {
        Self {
            rho: default_rho(),
            lambda: 0.0,
            eps_abs: default_eps_abs(),
            eps_rel: default_eps_rel(),
            max_iters: default_max_iters(),
            inner: InnerSolveOpts::default(),
        }
    }
}

impl AdmmOpts {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return Err(Error::invalid("eps_abs and eps_rel must be > 0"));
        }
        if self.max_iters < 1 {
            return Err(Error::invalid("max_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Full iterate of the ADMM loop.
///
/// `z[t][s]` and `u[t][s]` belong to the directed edge from `t` to its `s`-th
/// neighbour (neighbours in ascending id order), in augmented layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub w: Vec<LinearModel>,
    pub z: Vec<Vec<Vec<f64>>>,
    pub u: Vec<Vec<Vec<f64>>>,
    pub iteration: usize,
    pub residuals: Vec<(f64, f64)>,
    /// Inner-solver duals per node, reused to warm-start the next w-update.
    node_duals: Vec<Vec<f64>>,
}

impl AdmmState {
    /// `w = z = u = 0`.
    pub fn zeros(graph: &MecGraph, dim: usize) -> Self {
        let n = graph.n_nodes();
        let per_edge = |t: usize| vec![vec![0.0; dim + 1]; graph.degree(t)];
        Self {
            w: vec![LinearModel::zeros(dim); n],
            z: (0..n).map(per_edge).collect(),
            u: (0..n).map(per_edge).collect(),
            iteration: 0,
            residuals: Vec::new(),
            node_duals: vec![Vec::new(); n],
        }
    }

    pub fn dim(&self) -> usize {
        self.w.first().map_or(0, LinearModel::dim)
    }

    /// Checks shapes against the graph.
    pub fn check(&self, graph: &MecGraph, dim: usize) -> Result<()> {
        let n = graph.n_nodes();
        if self.w.len() != n || self.z.len() != n || self.u.len() != n {
            return Err(Error::invalid("ADMM state does not match the graph size"));
        }
        for t in 0..n {
            if self.w[t].dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: self.w[t].dim(),
                });
            }
            let deg = graph.degree(t);
            if self.z[t].len() != deg || self.u[t].len() != deg {
                return Err(Error::invalid(format!("node {t}: edge variables do not match its degree")));
            }
            if self.z[t].iter().chain(&self.u[t]).any(|v| v.len() != dim + 1) {
                return Err(Error::invalid(format!("node {t}: edge variable has wrong length")));
            }
        }
        Ok(())
    }

    fn slot(graph: &MecGraph, t: usize, i: usize) -> Result<usize> {
        graph
            .adjacent(t)
            .binary_search(&i)
            .map_err(|_| Error::invalid(format!("({t},{i}) is not an edge")))
    }

    pub fn z_edge(&self, graph: &MecGraph, t: usize, i: usize) -> Result<&[f64]> {
        Ok(&self.z[t][Self::slot(graph, t, i)?])
    }

    pub fn u_edge(&self, graph: &MecGraph, t: usize, i: usize) -> Result<&[f64]> {
        Ok(&self.u[t][Self::slot(graph, t, i)?])
    }
}

/// Undirected edge with the positions of both directed copies.
#[derive(Debug, Clone, Copy)]
struct EdgeSlots {
    t: usize,
    slot_t: usize,
    i: usize,
    slot_i: usize,
    weight: f64,
}

fn edge_slots(graph: &MecGraph) -> Vec<EdgeSlots> {
    graph
        .edges()
        .iter()
        .map(|e| EdgeSlots {
            t: e.j,
            slot_t: graph.adjacent(e.j).binary_search(&e.k).expect("edge in adjacency"),
            i: e.k,
            slot_i: graph.adjacent(e.k).binary_search(&e.j).expect("edge in adjacency"),
            weight: e.weight,
        })
        .collect()
}

/// Exact minimizer of `penalty ‖z1 - z2‖ + (rho/2)(‖p - z1‖² + ‖q - z2‖²)`,
/// with `penalty = λ a_ti`.
///
/// With `δ = ‖p - q‖`, `θ = max(1/2, 1 - penalty/(rho δ))`, the solution is
/// `z1 = θ p + (1-θ) q`, `z2 = (1-θ) p + θ q`; `δ = 0` gives `z1 = z2 = p`.
pub fn edge_prox(p: &[f64], q: &[f64], penalty: f64, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let delta = dist(p, q);
    let theta = if delta == 0.0 {
        0.5
    } else {
        (1.0 - penalty / (rho * delta)).max(0.5)
    };
    let z1 = p
        .iter()
        .zip(q)
        .map(|(a, b)| theta * a + (1.0 - theta) * b)
        .collect();
    let z2 = p
        .iter()
        .zip(q)
        .map(|(a, b)| (1.0 - theta) * a + theta * b)
        .collect();
    (z1, z2)
}

/// Anchors for node `t`: one per neighbour, centred at `z_ti - u_ti` with weight `rho`.
fn node_anchors(state: &AdmmState, t: usize, rho: f64) -> Vec<Anchor> {
    state.z[t]
        .iter()
        .zip(&state.u[t])
        .map(|(z, u)| Anchor {
            center: z.iter().zip(u).map(|(a, b)| a - b).collect(),
            weight: rho,
        })
        .collect()
}

/// Proximal node update: `argmin ℓ_t(w) + Σ_i (rho/2)‖w - z_ti + u_ti‖²`.
pub fn w_update(
    node: usize,
    state: &AdmmState,
    shard: &Dataset,
    cfg: &LossConfig,
    opts: &AdmmOpts,
) -> Result<ProxSolution> {
    if node >= state.w.len() {
        return Err(Error::invalid(format!("unknown node {node}")));
    }
    let anchors = node_anchors(state, node, opts.rho);
    let warm = state.node_duals.get(node).map(Vec::as_slice);
    solve_prox_svm_from(shard, cfg, &anchors, &opts.inner, warm)
}

/// Closed-form update of both directed copies of edge `(t, i)` from the current
/// `w` and `u`. Returns `(z_ti, z_it)`.
pub fn z_update(
    graph: &MecGraph,
    state: &AdmmState,
    (t, i): (usize, usize),
    lambda: f64,
    rho: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = graph
        .edge_weight(t, i)
        .ok_or_else(|| Error::invalid(format!("({t},{i}) is not an edge")))?;
    let mut p = state.w[t].augmented();
    axpy(1.0, state.u_edge(graph, t, i)?, &mut p);
    let mut q = state.w[i].augmented();
    axpy(1.0, state.u_edge(graph, i, t)?, &mut q);
    Ok(edge_prox(&p, &q, lambda * a, rho))
}

/// `u_ti += w_t - z_ti` and `u_it += w_i - z_it`, in place.
pub fn u_update(graph: &MecGraph, state: &mut AdmmState, (t, i): (usize, usize)) -> Result<()> {
    for (from, to) in [(t, i), (i, t)] {
        let s = AdmmState::slot(graph, from, to)?;
        let w = state.w[from].augmented();
        let z = &state.z[from][s];
        for ((u, wv), zv) in state.u[from][s].iter_mut().zip(&w).zip(z) {
            *u += wv - zv;
        }
    }
    Ok(())
}

/// `(‖r_p‖₂, ‖r_s‖₂)` with `r_p` the stack of `w_t - z_ti` over directed edges and
/// `r_s = rho (z - z_prev)`.
pub fn residuals(prev_z: &[Vec<Vec<f64>>], state: &AdmmState, rho: f64) -> (f64, f64) {
    let mut rp = 0.0;
    let mut rs = 0.0;
    for (t, (zs, zps)) in state.z.iter().zip(prev_z).enumerate() {
        let w = state.w[t].augmented();
        for (z, zp) in zs.iter().zip(zps) {
            rp += w.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            rs += z.iter().zip(zp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    (rp.sqrt(), rho * rs.sqrt())
}

/// Network lasso objective at the given per-node models.
pub fn network_lasso_objective(
    models: &[LinearModel],
    graph: &MecGraph,
    shards: &[&Dataset],
    cfg: &LossConfig,
    lambda: f64,
) -> f64 {
    let nodes: f64 = models
        .iter()
        .zip(shards)
        .map(|(m, d)| hinge_objective_unchecked(m, d, cfg.l2))
        .sum();
    let edges: f64 = graph
        .edges()
        .iter()
        .map(|e| e.weight * dist(&models[e.j].augmented(), &models[e.k].augmented()))
        .sum();
    nodes + lambda * edges
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub models: Vec<LinearModel>,
    pub trace: ConvergenceTrace,
    pub state: AdmmState,
    /// Number of w-updates whose inner solve hit its iteration cap.
    pub inner_warnings: usize,
}

fn check_inputs(graph: &MecGraph, shards: &[&Dataset]) -> Result<usize> {
    let problems = validate_graph(graph);
    if !problems.is_empty() {
        return Err(Error::invalid(format!("invalid graph: {}", problems.join("; "))));
    }
    if shards.len() != graph.n_nodes() {
        return Err(Error::invalid(format!(
            "{} shards for {} nodes",
            shards.len(),
            graph.n_nodes()
        )));
    }
    let dim = shards.first().map_or(0, |d| d.dim());
    for (t, d) in shards.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::invalid(format!("shard of node {t} is empty")));
        }
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: d.dim(),
            });
        }
    }
    Ok(dim)
}

/// Runs ADMM from `warm` (or from zero) until both residuals fall below their
/// tolerances or `max_iters` outer iterations have run.
///
/// Tolerances follow the usual absolute/relative split with `p` the number of
/// stacked coordinates over directed edges:
/// `ε_pri = √p ε_abs + ε_rel max(‖w‖, ‖z‖)`, `ε_dual = √p ε_abs + ε_rel ‖ρ u‖`.
pub fn admm_solve(
    graph: &MecGraph,
    shards: &[&Dataset],
    cfg: &LossConfig,
    opts: &AdmmOpts,
    warm: Option<&AdmmState>,
    probe: Option<&AccuracyProbe<'_>>,
) -> Result<AdmmSolution> {
    opts.validate()?;
    cfg.validate()?;
    let dim = check_inputs(graph, shards)?;
    let mut state = match warm {
        Some(s) => {
            s.check(graph, dim)?;
            s.clone()
        }
        None => AdmmState::zeros(graph, dim),
    };
    state.iteration = 0;
    state.residuals.clear();

    let edges = edge_slots(graph);
    let n_directed: usize = (0..graph.n_nodes()).map(|t| graph.degree(t)).sum();
    let sqrt_p = ((n_directed * (dim + 1)) as f64).sqrt();
    let start = Instant::now();
    let mut trace = ConvergenceTrace::default();
    let mut inner_warnings = 0;

    for k in 1..=opts.max_iters {
        // w-phase
        let solved: Vec<ProxSolution> = (0..graph.n_nodes())
            .into_par_iter()
            .map(|t| w_update(t, &state, shards[t], cfg, opts))
            .collect::<Result<_>>()?;
        for (t, sol) in solved.into_iter().enumerate() {
            inner_warnings += usize::from(!sol.converged);
            state.w[t] = sol.model;
            state.node_duals[t] = sol.duals;
        }

        // z-phase
        let prev_z = state.z.clone();
        let aug: Vec<Vec<f64>> = state.w.iter().map(LinearModel::augmented).collect();
        let updates: Vec<(Vec<f64>, Vec<f64>)> = edges
            .par_iter()
            .map(|e| {
                let mut p = aug[e.t].clone();
                axpy(1.0, &state.u[e.t][e.slot_t], &mut p);
                let mut q = aug[e.i].clone();
                axpy(1.0, &state.u[e.i][e.slot_i], &mut q);
                edge_prox(&p, &q, opts.lambda * e.weight, opts.rho)
            })
            .collect();
        for (e, (zt, zi)) in edges.iter().zip(updates) {
            state.z[e.t][e.slot_t] = zt;
            state.z[e.i][e.slot_i] = zi;
        }

        // u-phase
        for (t, (us, zs)) in state.u.iter_mut().zip(&state.z).enumerate() {
            for (u, z) in us.iter_mut().zip(zs) {
                for ((uv, wv), zv) in u.iter_mut().zip(&aug[t]).zip(z) {
                    *uv += wv - zv;
                }
            }
        }

        let (rp, rs) = residuals(&prev_z, &state, opts.rho);
        state.iteration = k;
        state.residuals.push((rp, rs));

        let mut w_norm = 0.0;
        let mut z_norm = 0.0;
        let mut u_norm = 0.0;
        for t in 0..graph.n_nodes() {
            let wn = sq_norm(&aug[t]);
            for (z, u) in state.z[t].iter().zip(&state.u[t]) {
                w_norm += wn;
                z_norm += sq_norm(z);
                u_norm += sq_norm(u);
            }
        }
        let eps_pri = sqrt_p * opts.eps_abs + opts.eps_rel * w_norm.sqrt().max(z_norm.sqrt());
        let eps_dual = sqrt_p * opts.eps_abs + opts.eps_rel * opts.rho * u_norm.sqrt();

        let objective = network_lasso_objective(&state.w, graph, shards, cfg, opts.lambda);
        trace.rows.push(TraceRow {
            iter: k,
            r_p: Some(rp),
            r_s: Some(rs),
            gap: None,
            objective,
            rounds: k,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            accuracy: probe.and_then(|p| p.sample(k, &state.w)),
        });
        if rp <= eps_pri && rs <= eps_dual {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!(
            "ADMM at lambda = {} stopped at max_iters = {} without meeting tolerances",
            opts.lambda,
            opts.max_iters
        );
    }
    Ok(AdmmSolution {
        models: state.w.clone(),
        trace,
        state,
        inner_warnings,
    })
}

#[derive(Debug, Clone)]
pub struct PathPoint {
    pub lambda: f64,
    pub models: Vec<LinearModel>,
    pub trace: ConvergenceTrace,
    /// Rounds spent on this and all previous path points.
    pub cumulative_rounds: usize,
}

/// Solves at each `λ` in increasing order, warm-starting from the previous
/// solution's full state. Returns the per-λ results and the final state.
pub fn regularization_path(
    graph: &MecGraph,
    shards: &[&Dataset],
    cfg: &LossConfig,
    lambdas: &[f64],
    opts: &AdmmOpts,
    probe: Option<&AccuracyProbe<'_>>,
) -> Result<(Vec<PathPoint>, AdmmState)> {
    if lambdas.is_empty() {
        return Err(Error::invalid("regularization path needs at least one lambda"));
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("lambdas must be strictly increasing"));
    }
    let mut points = Vec::with_capacity(lambdas.len());
    let mut state: Option<AdmmState> = None;
    let mut rounds = 0;
    for &lambda in lambdas {
        let sol = admm_solve(
            graph,
            shards,
            cfg,
            &opts.clone().with_lambda(lambda),
            state.as_ref(),
            probe,
        )?;
        rounds += sol.trace.total_rounds();
        points.push(PathPoint {
            lambda,
            models: sol.models,
            trace: sol.trace,
            cumulative_rounds: rounds,
        });
        state = Some(sol.state);
    }
    Ok((points, state.expect("non-empty path")))
}

/// Connected components of the graph after dropping edges whose models differ
/// by more than `tol` (Euclidean, augmented). Cluster ids are numbered in order
/// of their smallest node.
pub fn extract_clusters(models: &[LinearModel], graph: &MecGraph, tol: f64) -> Result<Vec<usize>> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tol must be > 0, got {tol}")));
    }
    let n = graph.n_nodes();
    if models.len() != n {
        return Err(Error::invalid(format!("{} models for {n} nodes", models.len())));
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for e in graph.edges() {
        if dist(&models[e.j].augmented(), &models[e.k].augmented()) <= tol {
            let a = find(&mut parent, e.j);
            let b = find(&mut parent, e.k);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut out = vec![0; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        out[v] = label[r];
    }
    Ok(out)
}

/// Writes `node_id,cluster_id` rows.
pub fn clusters_to_csv(clusters: &[usize]) -> String {
    let mut s = String::from("node_id,cluster_id\n");
    for (i, c) in clusters.iter().enumerate() {
        s.push_str(&format!("{i},{c}\n"));
    }
    s
}
