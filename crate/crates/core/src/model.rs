//! Linear binary classifiers: prediction, the averaged hinge objective and a
//! proximal SVM solver that every framework and baseline builds on.
//!
//! Models are handled in augmented form `[w_0, .., w_{d-1}, b]`, the bias being a
//! regularized coordinate whose feature value is always 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sq_norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    /// Exactly `-1.0` or `+1.0`.
    pub label: f64,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: f64) -> Result<Self> {
        if label != 1.0 && label != -1.0 {
            return Err(Error::invalid(format!("label must be +1 or -1, got {label}")));
        }
        Ok(Self { features, label })
    }

    /// Squared norm of the augmented feature vector `[x, 1]`.
    #[inline]
    pub fn augmented_sq_norm(&self) -> f64 {
        sq_norm(&self.features) + 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    dim: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, dim: usize) -> Result<Self> {
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.features.len() != dim)
        {
            return Err(Error::invalid(format!(
                "sample {i} has dimension {}, dataset dimension is {dim}",
                s.features.len()
            )));
        }
        Ok(Self { samples, dim })
    }

    /// Builds a dataset from `(features, label)` pairs, inferring the dimension.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Result<Self> {
        let samples = pairs
            .into_iter()
            .map(|(x, y)| LabeledSample::new(x, y))
            .collect::<Result<Vec<_>>>()?;
        let dim = samples.first().map_or(0, |s| s.features.len());
        Self::new(samples, dim)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            samples: Vec::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample> {
        self.samples.iter()
    }

    pub fn into_samples(self) -> Vec<LabeledSample> {
        self.samples
    }

    /// Concatenates datasets in order. All parts must share a dimension.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a Dataset>) -> Result<Dataset> {
        let mut dim = None;
        let mut samples = Vec::new();
        for p in parts {
            match dim {
                None => dim = Some(p.dim),
                Some(d) if d != p.dim => {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: p.dim,
                    })
                }
                _ => {}
            }
            samples.extend(p.samples.iter().cloned());
        }
        Ok(Dataset {
            samples,
            dim: dim.unwrap_or(0),
        })
    }

    fn require_non_empty(&self) -> Result<()> {
        if self.samples.is_empty() {
            Err(Error::invalid("dataset is empty"))
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias }
    }

    /// Splits an augmented vector `[w, b]` into a model.
    pub fn from_augmented(v: &[f64]) -> Self {
        let (w, b) = v.split_at(v.len() - 1);
        Self {
            weights: w.to_vec(),
            bias: b[0],
        }
    }

    pub fn augmented(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weights.len() + 1);
        v.extend_from_slice(&self.weights);
        v.push(self.bias);
        v
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn margin(&self, features: &[f64]) -> f64 {
        dot(&self.weights, features) + self.bias
    }

    pub fn negated(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| -w).collect(),
            bias: -self.bias,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.weights.len() != dim {
            Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                found: dim,
            })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// Bias is the last coordinate of the augmented model and is L2-penalized
    /// like every weight.
    #[default]
    AugmentedRegularized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub l2: f64,
    #[serde(default)]
    pub bias_mode: BiasMode,
}

impl LossConfig {
    pub fn new(l2: f64) -> Self {
        Self {
            l2,
            bias_mode: BiasMode::AugmentedRegularized,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::new(0.1)
    }
}

/// Returns the predicted label and the raw margin. Margin 0 predicts `+1`.
pub fn predict(model: &LinearModel, sample: &LabeledSample) -> Result<(f64, f64)> {
    model.check_dim(sample.features.len())?;
    let m = model.margin(&sample.features);
    Ok((if m >= 0.0 { 1.0 } else { -1.0 }, m))
}

/// `(1/n) Σ max(0, 1 - y (w·x + b)) + (l2/2)(‖w‖² + b²)`.
pub fn hinge_objective(model: &LinearModel, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    data.require_non_empty()?;
    model.check_dim(data.dim())?;
    Ok(hinge_objective_unchecked(model, data, cfg.l2))
}

pub(crate) fn mean_hinge(model: &LinearModel, data: &Dataset) -> f64 {
    let total: f64 = data
        .iter()
        .map(|s| (1.0 - s.label * model.margin(&s.features)).max(0.0))
        .sum();
    total / data.len() as f64
}

pub(crate) fn hinge_objective_unchecked(model: &LinearModel, data: &Dataset, l2: f64) -> f64 {
    mean_hinge(model, data) + 0.5 * l2 * (sq_norm(&model.weights) + model.bias * model.bias)
}

/// Subgradient of [`hinge_objective`] in augmented layout `[∂w, ∂b]`.
/// Samples sitting exactly on the margin contribute nothing.
pub fn hinge_subgradient(model: &LinearModel, data: &Dataset, cfg: &LossConfig) -> Result<Vec<f64>> {
    data.require_non_empty()?;
    model.check_dim(data.dim())?;
    let mut g = vec![0.0; data.dim() + 1];
    accumulate_hinge_subgradient(model, data, 1.0, &mut g);
    let d = data.dim();
    for (gi, wi) in g[..d].iter_mut().zip(&model.weights) {
        *gi += cfg.l2 * wi;
    }
    g[d] += cfg.l2 * model.bias;
    Ok(g)
}

/// Adds `scale * ∂(mean hinge)` into `g` (augmented layout).
pub(crate) fn accumulate_hinge_subgradient(
    model: &LinearModel,
    data: &Dataset,
    scale: f64,
    g: &mut [f64],
) {
    let d = data.dim();
    let coef = -scale / data.len() as f64;
    for s in data.iter() {
        if s.label * model.margin(&s.features) < 1.0 {
            axpy(coef * s.label, &s.features, &mut g[..d]);
            g[d] += coef * s.label;
        }
    }
}

pub fn accuracy(model: &LinearModel, data: &Dataset) -> Result<f64> {
    data.require_non_empty()?;
    model.check_dim(data.dim())?;
    let correct = data
        .iter()
        .filter(|s| {
            let m = model.margin(&s.features);
            (if m >= 0.0 { 1.0 } else { -1.0 }) == s.label
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Quadratic pull `(weight/2) ‖model - center‖²` on the augmented model.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub center: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    /// Exact dual coordinate ascent; stops on the duality gap.
    DualCoordinate,
    /// Full-batch subgradient descent with step `1/(L k)`; stops on objective stall.
    Subgradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolveOpts {
    pub method: InnerMethod,
    /// Duality gap for [`InnerMethod::DualCoordinate`], objective change for
    /// [`InnerMethod::Subgradient`].
    pub tol: f64,
    /// Passes over the data (dual) or iterations (subgradient).
    pub max_iters: usize,
}

impl Default for InnerSolveOpts {
    fn default() -> Self {
        Self {
            method: InnerMethod::DualCoordinate,
            tol: 1e-11,
            max_iters: 5000,
        }
    }
}

impl InnerSolveOpts {
    pub fn subgradient() -> Self {
        Self {
            method: InnerMethod::Subgradient,
            tol: 1e-6,
            max_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxSolution {
    pub model: LinearModel,
    /// False when the iteration budget ran out before the tolerance was met.
    pub converged: bool,
    pub iterations: usize,
    /// Box-constrained duals `y_i α_i ∈ [0, 1]`, empty for the subgradient method.
    pub duals: Vec<f64>,
}

/// Minimizes `hinge_objective + Σ_a (weight_a/2) ‖model - center_a‖²`.
///
/// Starts from the zero model. When the problem has no strong convexity at all
/// (`l2 = 0`, no anchors) the subgradient method is used regardless of `opts.method`.
pub fn solve_prox_svm(
    data: &Dataset,
    cfg: &LossConfig,
    anchors: &[Anchor],
    opts: &InnerSolveOpts,
) -> Result<ProxSolution> {
    solve_prox_svm_from(data, cfg, anchors, opts, None)
}

/// Same as [`solve_prox_svm`] but the dual method may start from previous duals.
pub(crate) fn solve_prox_svm_from(
    data: &Dataset,
    cfg: &LossConfig,
    anchors: &[Anchor],
    opts: &InnerSolveOpts,
    warm_duals: Option<&[f64]>,
) -> Result<ProxSolution> {
    data.require_non_empty()?;
    cfg.validate()?;
    let d1 = data.dim() + 1;
    for a in anchors {
        if !(a.weight >= 0.0) {
            return Err(Error::invalid(format!("anchor weight must be >= 0, got {}", a.weight)));
        }
        if a.center.len() != d1 {
            return Err(Error::DimensionMismatch {
                expected: d1,
                found: a.center.len(),
            });
        }
    }
    let mu = cfg.l2 + anchors.iter().map(|a| a.weight).sum::<f64>();
    let sol = if mu > 0.0 && opts.method == InnerMethod::DualCoordinate {
        let mut center = vec![0.0; d1];
        for a in anchors {
            axpy(a.weight / mu, &a.center, &mut center);
        }
        dual_coordinate_ascent(data, mu, &center, opts, warm_duals)
    } else {
        subgradient_descent(data, cfg.l2, anchors, opts)
    };
    if !sol.converged {
        log::warn!(
            "prox-svm solve stopped at iteration cap {} before reaching tol {:e}",
            opts.max_iters,
            opts.tol
        );
    }
    Ok(sol)
}

/// Dual coordinate ascent for `min (1/n) Σ hinge + (mu/2)‖w - c‖²`.
///
/// With `β_i = y_i α_i ∈ [0, 1]` the primal point is
/// `w(β) = c + (1/(mu n)) Σ β_i y_i x̃_i`, and each coordinate has the clipped
/// closed form `β_i ← clip(β_i + mu n (1 - y_i w·x̃_i) / ‖x̃_i‖², 0, 1)`.
fn dual_coordinate_ascent(
    data: &Dataset,
    mu: f64,
    center: &[f64],
    opts: &InnerSolveOpts,
    warm_duals: Option<&[f64]>,
) -> ProxSolution {
    let n = data.len();
    let nf = n as f64;
    let d = data.dim();
    let mut beta = match warm_duals {
        Some(b) if b.len() == n => b.to_vec(),
        _ => vec![0.0; n],
    };
    let mut w = center.to_vec();
    for (s, &b) in data.iter().zip(&beta) {
        if b != 0.0 {
            let step = b * s.label / (mu * nf);
            axpy(step, &s.features, &mut w[..d]);
            w[d] += step;
        }
    }
    let sq_norms: Vec<f64> = data.iter().map(LabeledSample::augmented_sq_norm).collect();

    let mut converged = false;
    let mut passes = 0;
    while passes < opts.max_iters {
        if dual_gap(data, mu, center, &w, &beta) <= opts.tol {
            converged = true;
            break;
        }
        passes += 1;
        for (i, s) in data.iter().enumerate() {
            let margin = dot(&w[..d], &s.features) + w[d];
            let proposal = beta[i] + mu * nf * (1.0 - s.label * margin) / sq_norms[i];
            let next = proposal.clamp(0.0, 1.0);
            let delta = next - beta[i];
            if delta != 0.0 {
                beta[i] = next;
                let step = delta * s.label / (mu * nf);
                axpy(step, &s.features, &mut w[..d]);
                w[d] += step;
            }
        }
    }
    if !converged && dual_gap(data, mu, center, &w, &beta) <= opts.tol {
        converged = true;
    }
    ProxSolution {
        model: LinearModel::from_augmented(&w),
        converged,
        iterations: passes,
        duals: beta,
    }
}

fn dual_gap(data: &Dataset, mu: f64, center: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let d = data.dim();
    let nf = data.len() as f64;
    let mut hinge = 0.0;
    let mut linear = 0.0;
    for (s, &b) in data.iter().zip(beta) {
        let m = dot(&w[..d], &s.features) + w[d];
        hinge += (1.0 - s.label * m).max(0.0);
        let mc = dot(&center[..d], &s.features) + center[d];
        linear += b * (1.0 - s.label * mc);
    }
    // The quadratic terms of primal and dual cancel into mu ‖w - c‖².
    let quad: f64 = w.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
    (hinge - linear) / nf + mu * quad
}

fn prox_objective(model: &LinearModel, data: &Dataset, l2: f64, anchors: &[Anchor]) -> f64 {
    let aug = model.augmented();
    let pull: f64 = anchors
        .iter()
        .map(|a| {
            0.5 * a.weight
                * aug
                    .iter()
                    .zip(&a.center)
                    .map(|(x, c)| (x - c) * (x - c))
                    .sum::<f64>()
        })
        .sum();
    hinge_objective_unchecked(model, data, l2) + pull
}

fn subgradient_descent(
    data: &Dataset,
    l2: f64,
    anchors: &[Anchor],
    opts: &InnerSolveOpts,
) -> ProxSolution {
    let d1 = data.dim() + 1;
    let max_sq = data
        .iter()
        .map(LabeledSample::augmented_sq_norm)
        .fold(0.0, f64::max);
    let lip = l2 + anchors.iter().map(|a| a.weight).sum::<f64>() + max_sq;

    let mut model = LinearModel::zeros(data.dim());
    let mut best = model.clone();
    let mut best_obj = prox_objective(&model, data, l2, anchors);
    let mut prev_obj = best_obj;
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=opts.max_iters {
        iterations = k;
        let mut g = vec![0.0; d1];
        accumulate_hinge_subgradient(&model, data, 1.0, &mut g);
        let aug = model.augmented();
        for (gi, wi) in g.iter_mut().zip(&aug) {
            *gi += l2 * wi;
        }
        for a in anchors {
            for ((gi, wi), ci) in g.iter_mut().zip(&aug).zip(&a.center) {
                *gi += a.weight * (wi - ci);
            }
        }
        let step = 1.0 / (lip * k as f64);
        let next: Vec<f64> = aug.iter().zip(&g).map(|(w, gi)| w - step * gi).collect();
        model = LinearModel::from_augmented(&next);
        let obj = prox_objective(&model, data, l2, anchors);
        if obj < best_obj {
            best_obj = obj;
            best = model.clone();
        }
        if (prev_obj - obj).abs() <= opts.tol && g.iter().all(|x| x.is_finite()) {
            converged = true;
            break;
        }
        prev_obj = obj;
    }
    ProxSolution {
        model: best,
        converged,
        iterations,
        duals: Vec::new(),
    }
}
