//! Federated multi-task learning in the Mocha style.
//!
//! Primal problem, with `W = [w_1 .. w_m]` in augmented layout:
//!
//! ```text
//! P(W) = Σ_t (1/n_t) Σ_i max(0, 1 - y_ti w_t·x̃_ti) + ½ tr(W K Wᵀ),   K = λ₁ Ω̄ + l2_task I
//! ```
//!
//! Dual variables satisfy `y_ti α_ti ∈ [0, 1]`; each task keeps
//! `v_t = (1/n_t) Σ_i α_ti x̃_ti` (its data matrix with columns scaled by `1/n_t`,
//! times `α_t`), and the primal point is recovered as `W = V K⁻¹`. The dual is
//!
//! ```text
//! D(α) = Σ_t (1/n_t) Σ_i y_ti α_ti - ½ tr(V K⁻¹ Vᵀ).
//! ```
//!
//! Each round every task runs coordinate ascent on its local quadratic model of
//! `D`, with the coupling term bounded by `σ′ (K⁻¹)_tt ‖Δv_t‖²`, then the centre
//! sums the `Δv_t`, recomputes `W` and optionally re-estimates `Ω̄`.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::model::{mean_hinge, Dataset, LinearModel};
use crate::topology::{laplacian, MecGraph};
use crate::trace::{AccuracyProbe, ConvergenceTrace, TraceRow};

/// Smallest eigenvalue accepted for `Ω̄`.
pub const EPS_PD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaMode {
    /// `Ω̄ = L + ε I` from the graph, never changed.
    StaticLaplacian,
    /// `Ω̄ = Σ⁻¹` with `Σ = (WᵀW + ε I)^{1/2}` scaled to unit trace, refreshed every round.
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MochaOpts {
    pub lambda1: f64,
    /// Local passes over each task's samples per round.
    #[serde(default = "default_passes")]
    pub local_passes: usize,
    /// Defaults to the number of tasks.
    #[serde(default)]
    pub sigma_prime: Option<f64>,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_gap_tol")]
    pub gap_tol: f64,
    #[serde(default = "default_mode")]
    pub omega_mode: OmegaMode,
    /// Per-task ridge added to the relationship regularizer.
    #[serde(default = "default_task_l2")]
    pub task_l2: f64,
}

fn default_passes() -> usize {
    1
}
fn default_rounds() -> usize {
    500
}
fn default_gap_tol() -> f64 {
    1e-3
}
fn default_task_l2() -> f64 {
    0.1
}
fn default_mode() -> OmegaMode {
    OmegaMode::StaticLaplacian
}

impl Default for MochaOpts {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            local_passes: default_passes(),
            sigma_prime: None,
            max_rounds: default_rounds(),
            gap_tol: default_gap_tol(),
            omega_mode: default_mode(),
            task_l2: default_task_l2(),
        }
    }
}

impl MochaOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(Error::invalid(format!("lambda1 must be > 0, got {}", self.lambda1)));
        }
        if self.local_passes < 1 {
            return Err(Error::invalid("local_passes must be >= 1"));
        }
        if let Some(s) = self.sigma_prime {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("sigma_prime must be > 0, got {s}")));
            }
        }
        if self.max_rounds < 1 {
            return Err(Error::invalid("max_rounds must be >= 1"));
        }
        if !(self.gap_tol > 0.0) {
            return Err(Error::invalid("gap_tol must be > 0"));
        }
        if !(self.task_l2 >= 0.0) {
            return Err(Error::invalid("task_l2 must be >= 0"));
        }
        Ok(())
    }

    pub fn sigma(&self, m: usize) -> f64 {
        self.sigma_prime.unwrap_or(m as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MochaState {
    /// Signed duals per task, `y_i α_i ∈ [0, 1]`.
    pub alpha: Vec<Vec<f64>>,
    /// `v_t = (1/n_t) Σ_i α_ti x̃_ti`.
    pub v: Vec<Vec<f64>>,
    /// Relationship matrix in `(λ₁/2) tr(W Ω̄ Wᵀ)`.
    pub omega: DMatrix<f64>,
    pub w: Vec<LinearModel>,
    pub round: usize,
    /// Number of aggregation steps, i.e. communication rounds.
    pub comm_rounds: usize,
    lambda1: f64,
    task_l2: f64,
    k_inv: DMatrix<f64>,
    static_omega: DMatrix<f64>,
}

/// Checks symmetry and the eigenvalue floor.
fn check_omega(omega: &DMatrix<f64>) -> Result<()> {
    if !omega.is_square() {
        return Err(Error::invalid("omega must be square"));
    }
    if omega.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("omega has non-finite entries".into()));
    }
    let asym = (omega - omega.transpose()).abs().max();
    if asym > 1e-9 * omega.abs().max().max(1.0) {
        return Err(Error::invalid(format!("omega is not symmetric (max asymmetry {asym:e})")));
    }
    let min_eig = SymmetricEigen::new(omega.clone()).eigenvalues.min();
    // eigenvalue error is on the order of machine precision times the matrix scale
    if min_eig < EPS_PD - 1e-12 * omega.abs().max().max(1.0) {
        return Err(Error::Numerical(format!(
            "omega min eigenvalue {min_eig:e} below {EPS_PD:e}"
        )));
    }
    Ok(())
}

fn inverse_of_k(omega: &DMatrix<f64>, lambda1: f64, task_l2: f64) -> Result<DMatrix<f64>> {
    let m = omega.nrows();
    let k = omega * lambda1 + DMatrix::identity(m, m) * task_l2;
    let inv = k
        .cholesky()
        .ok_or_else(|| Error::Numerical("relationship matrix is not positive definite".into()))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `Ω̄ = L + ε I` for the graph.
pub fn static_omega(graph: &MecGraph) -> DMatrix<f64> {
    let n = graph.n_nodes();
    laplacian(graph) + DMatrix::identity(n, n) * EPS_PD
}

impl MochaState {
    /// Zero duals, zero models, the given `Ω̄` (also used as the static matrix).
    pub fn new(omega: DMatrix<f64>, shards: &[&Dataset], opts: &MochaOpts) -> Result<Self> {
        opts.validate()?;
        check_omega(&omega)?;
        let m = shards.len();
        if omega.nrows() != m {
            return Err(Error::invalid(format!("omega is {0}x{0} for {m} tasks", omega.nrows())));
        }
        let dim = shards.first().map_or(0, |d| d.dim());
        let k_inv = inverse_of_k(&omega, opts.lambda1, opts.task_l2)?;
        Ok(Self {
            alpha: shards.iter().map(|d| vec![0.0; d.len()]).collect(),
            v: vec![vec![0.0; dim + 1]; m],
            w: vec![LinearModel::zeros(dim); m],
            round: 0,
            comm_rounds: 0,
            lambda1: opts.lambda1,
            task_l2: opts.task_l2,
            k_inv,
            static_omega: omega.clone(),
            omega,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.v.len()
    }

    /// `(K⁻¹)_tt`, the local curvature scale of task `t`.
    pub fn local_scale(&self, t: usize) -> f64 {
        self.k_inv[(t, t)]
    }

    /// `K = λ₁ Ω̄ + l2_task I`.
    pub fn regularizer_matrix(&self) -> DMatrix<f64> {
        let m = self.n_tasks();
        &self.omega * self.lambda1 + DMatrix::identity(m, m) * self.task_l2
    }

    /// Largest `|y_i α_i|` violation of the box `[0, 1]`, zero when feasible.
    pub fn dual_infeasibility(&self, shards: &[&Dataset]) -> f64 {
        self.alpha
            .iter()
            .zip(shards)
            .flat_map(|(a, d)| a.iter().zip(d.iter()).map(|(ai, s)| ai * s.label))
            .map(|b| (-b).max(b - 1.0).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Max-norm distance between the stored `v` and `v` recomputed from `α`.
    pub fn v_drift(&self, shards: &[&Dataset]) -> f64 {
        self.v
            .iter()
            .zip(recompute_v(&self.alpha, shards))
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

fn recompute_v(alpha: &[Vec<f64>], shards: &[&Dataset]) -> Vec<Vec<f64>> {
    alpha
        .iter()
        .zip(shards)
        .map(|(a, d)| {
            let n = d.len() as f64;
            let mut v = vec![0.0; d.dim() + 1];
            for (ai, s) in a.iter().zip(d.iter()) {
                axpy(ai / n, &s.features, &mut v[..d.dim()]);
                v[d.dim()] += ai / n;
            }
            v
        })
        .collect()
}

/// `w_t = Σ_s (K⁻¹)_{ts} v_s`; with `l2_task = 0` this is `(1/λ₁) V Ω̄⁻¹`.
pub fn recover_w(state: &MochaState) -> Vec<LinearModel> {
    let m = state.n_tasks();
    (0..m)
        .map(|t| {
            let mut w = vec![0.0; state.v[t].len()];
            for s in 0..m {
                axpy(state.k_inv[(t, s)], &state.v[s], &mut w);
            }
            LinearModel::from_augmented(&w)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskUpdate {
    pub delta_alpha: Vec<f64>,
    pub delta_v: Vec<f64>,
}

/// Runs `passes` cyclic passes of exact coordinate maximization of task `t`'s
/// local dual model and returns the accumulated change.
pub fn local_subproblem(
    t: usize,
    state: &MochaState,
    shard: &Dataset,
    sigma_prime: f64,
    passes: usize,
) -> TaskUpdate {
    let n = shard.len();
    let nf = n as f64;
    let d = shard.dim();
    let curv = sigma_prime * state.local_scale(t);
    let mut delta_alpha = vec![0.0; n];
    let mut delta_v = vec![0.0; d + 1];
    // w_eff = w_t + σ′ (K⁻¹)_tt Δv_t
    let mut w_eff = state.w[t].augmented();
    for _ in 0..passes {
        for (i, s) in shard.iter().enumerate() {
            let sq = s.augmented_sq_norm();
            if sq == 0.0 || curv <= 0.0 {
                continue;
            }
            let beta = s.label * (state.alpha[t][i] + delta_alpha[i]);
            let margin = dot(&w_eff[..d], &s.features) + w_eff[d];
            let next = (beta + nf * (1.0 - s.label * margin) / (curv * sq)).clamp(0.0, 1.0);
            let step = next - beta;
            if step != 0.0 {
                let da = s.label * step;
                delta_alpha[i] += da;
                axpy(da / nf, &s.features, &mut delta_v[..d]);
                delta_v[d] += da / nf;
                axpy(curv * da / nf, &s.features, &mut w_eff[..d]);
                w_eff[d] += curv * da / nf;
            }
        }
    }
    TaskUpdate {
        delta_alpha,
        delta_v,
    }
}

/// Applies every task's update, recovers `W` and counts one communication round.
pub fn aggregate(mut state: MochaState, updates: &[TaskUpdate]) -> Result<MochaState> {
    if updates.len() != state.n_tasks() {
        return Err(Error::invalid(format!(
            "{} updates for {} tasks",
            updates.len(),
            state.n_tasks()
        )));
    }
    for (t, u) in updates.iter().enumerate() {
        if u.delta_alpha.len() != state.alpha[t].len() || u.delta_v.len() != state.v[t].len() {
            return Err(Error::invalid(format!("update for task {t} has the wrong shape")));
        }
        for (a, da) in state.alpha[t].iter_mut().zip(&u.delta_alpha) {
            *a += da;
        }
        for (v, dv) in state.v[t].iter_mut().zip(&u.delta_v) {
            *v += dv;
        }
    }
    state.w = recover_w(&state);
    state.round += 1;
    state.comm_rounds += 1;
    Ok(state)
}

/// New `Ω̄` for `mode` and whether the dynamic estimate was rejected (the
/// previous matrix is returned in that case).
pub fn omega_update(state: &MochaState, mode: OmegaMode) -> (DMatrix<f64>, bool) {
    match mode {
        OmegaMode::StaticLaplacian => (state.static_omega.clone(), false),
        OmegaMode::Dynamic => match dynamic_omega(&state.w) {
            Ok(o) => (o, false),
            Err(e) => {
                log::warn!("dynamic omega update failed ({e}); keeping the previous matrix");
                (state.omega.clone(), true)
            }
        },
    }
}

fn dynamic_omega(w: &[LinearModel]) -> Result<DMatrix<f64>> {
    let m = w.len();
    let d1 = w.first().map_or(0, |x| x.dim() + 1);
    let cols: Vec<f64> = w.iter().flat_map(LinearModel::augmented).collect();
    let wm = DMatrix::from_column_slice(d1, m, &cols);
    let gram = wm.transpose() * &wm + DMatrix::identity(m, m) * EPS_PD;
    let eig = SymmetricEigen::new(gram);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let trace: f64 = roots.sum();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::Numerical("degenerate task covariance".into()));
    }
    // Σ = Q diag(√l / tr) Qᵀ, Ω̄ = Σ⁻¹ = Q diag(tr / √l) Qᵀ
    let inv = roots.map(|r| if r > 0.0 { trace / r } else { f64::INFINITY });
    let q = &eig.eigenvectors;
    let omega = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let omega = (&omega + omega.transpose()) * 0.5;
    check_omega(&omega)?;
    Ok(omega)
}

/// Makes `omega` current: refreshes `K⁻¹` and `W`. Rejects an invalid matrix.
pub fn set_omega(state: &mut MochaState, omega: DMatrix<f64>) -> Result<()> {
    check_omega(&omega)?;
    state.k_inv = inverse_of_k(&omega, state.lambda1, state.task_l2)?;
    state.omega = omega;
    state.w = recover_w(state);
    Ok(())
}

/// `P(W) = Σ_t mean hinge_t + ½ tr(W K Wᵀ)`.
pub fn primal_objective(state: &MochaState, shards: &[&Dataset]) -> f64 {
    let k = state.regularizer_matrix();
    let m = state.n_tasks();
    let aug: Vec<Vec<f64>> = state.w.iter().map(LinearModel::augmented).collect();
    let mut reg = 0.0;
    for s in 0..m {
        for t in 0..m {
            if k[(s, t)] != 0.0 {
                reg += k[(s, t)] * dot(&aug[s], &aug[t]);
            }
        }
    }
    let loss: f64 = state.w.iter().zip(shards).map(|(w, d)| mean_hinge(w, d)).sum();
    loss + 0.5 * reg
}

/// `D(α) = Σ_t (1/n_t) Σ_i y_ti α_ti - ½ tr(V K⁻¹ Vᵀ)`.
pub fn dual_objective(state: &MochaState, shards: &[&Dataset]) -> f64 {
    let linear: f64 = state
        .alpha
        .iter()
        .zip(shards)
        .map(|(a, d)| {
            a.iter().zip(d.iter()).map(|(ai, s)| ai * s.label).sum::<f64>() / d.len() as f64
        })
        .sum();
    // tr(V K⁻¹ Vᵀ) = Σ_t ⟨v_t, w_t⟩ since W = V K⁻¹
    let quad: f64 = state
        .v
        .iter()
        .zip(&state.w)
        .map(|(v, w)| dot(v, &w.augmented()))
        .sum();
    linear - 0.5 * quad
}

pub fn duality_gap(state: &MochaState, shards: &[&Dataset]) -> f64 {
    primal_objective(state, shards) - dual_objective(state, shards)
}

#[derive(Debug, Clone)]
pub struct MochaSolution {
    pub models: Vec<LinearModel>,
    pub trace: ConvergenceTrace,
    pub state: MochaState,
    /// Rounds where a dynamic Ω̄ update was rejected.
    pub omega_fallbacks: usize,
}

fn check_shards(shards: &[&Dataset]) -> Result<()> {
    if shards.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    let dim = shards[0].dim();
    for (t, d) in shards.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::invalid(format!("shard of task {t} is empty")));
        }
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: d.dim(),
            });
        }
    }
    Ok(())
}

/// Rounds of {parallel local solves, aggregation, Ω̄ update} starting from
/// `state`, until the duality gap is at most `gap_tol` or `max_rounds` is reached.
pub fn mocha_run(
    mut state: MochaState,
    shards: &[&Dataset],
    opts: &MochaOpts,
    probe: Option<&AccuracyProbe<'_>>,
) -> Result<MochaSolution> {
    opts.validate()?;
    check_shards(shards)?;
    if shards.len() != state.n_tasks() || state.alpha.iter().zip(shards).any(|(a, d)| a.len() != d.len()) {
        return Err(Error::invalid("Mocha state does not match the shards"));
    }
    let sigma = opts.sigma(state.n_tasks());
    let start = Instant::now();
    let mut trace = ConvergenceTrace::default();
    let mut omega_fallbacks = 0;
    for k in 1..=opts.max_rounds {
        let updates: Vec<TaskUpdate> = (0..state.n_tasks())
            .into_par_iter()
            .map(|t| local_subproblem(t, &state, shards[t], sigma, opts.local_passes))
            .collect();
        state = aggregate(state, &updates)?;
        let (omega, fell_back) = omega_update(&state, opts.omega_mode);
        omega_fallbacks += usize::from(fell_back);
        if opts.omega_mode == OmegaMode::Dynamic && !fell_back {
            set_omega(&mut state, omega)?;
        }
        let gap = duality_gap(&state, shards);
        trace.rows.push(TraceRow {
            iter: k,
            r_p: None,
            r_s: None,
            gap: Some(gap),
            objective: primal_objective(&state, shards),
            rounds: state.comm_rounds,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            accuracy: probe.and_then(|p| p.sample(state.comm_rounds, &state.w)),
        });
        if gap <= opts.gap_tol {
            trace.converged = true;
            break;
        }
    }
    Ok(MochaSolution {
        models: state.w.clone(),
        trace,
        state,
        omega_fallbacks,
    })
}

/// Mocha on the graph's tasks with `Ω̄ = L + ε I` as the (initial) relationship.
pub fn mocha_solve(
    graph: &MecGraph,
    shards: &[&Dataset],
    opts: &MochaOpts,
    probe: Option<&AccuracyProbe<'_>>,
) -> Result<MochaSolution> {
    check_shards(shards)?;
    if shards.len() != graph.n_nodes() {
        return Err(Error::invalid(format!(
            "{} shards for {} nodes",
            shards.len(),
            graph.n_nodes()
        )));
    }
    let mut state = MochaState::new(static_omega(graph), shards, opts)?;
    if opts.omega_mode == OmegaMode::Dynamic {
        let (omega, _) = omega_update(&state, OmegaMode::Dynamic);
        set_omega(&mut state, omega)?;
    }
    mocha_run(state, shards, opts, probe)
}
