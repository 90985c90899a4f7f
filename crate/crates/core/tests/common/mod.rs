//! Shared fixtures and brute-force oracles for the integration suites.
//!
//! The oracles only evaluate objectives and subgradients directly; none of them
//! call into the solvers they are used to check.
#![allow(dead_code)]

use edgemtl::model::{Dataset, LinearModel};
use edgemtl::topology::{Edge, MecGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn path_graph(n: usize) -> MecGraph {
    MecGraph::from_edges(
        n,
        (0..n - 1).map(|j| Edge { j, k: j + 1, weight: 1.0 }).collect(),
    )
}

/// Per-node datasets: node `t` follows cluster `t % n_clusters`, labels from a
/// random unit model with `flip` label noise.
pub fn node_data(seed: u64, n_nodes: usize, n: usize, dim: usize, n_clusters: usize, flip: f64) -> Vec<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            let w: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let nrm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter().map(|x| x / nrm).collect()
        })
        .collect();
    (0..n_nodes)
        .map(|t| {
            let w = &models[t % n_clusters];
            Dataset::from_pairs((0..n).map(|_| {
                let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let m: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + 0.3;
                let mut y = if m >= 0.0 { 1.0 } else { -1.0 };
                if rng.random_bool(flip) {
                    y = -y;
                }
                (x, y)
            }))
            .unwrap()
        })
        .collect()
}

pub fn refs(v: &[Dataset]) -> Vec<&Dataset> {
    v.iter().collect()
}

fn aug(m: &LinearModel) -> Vec<f64> {
    m.augmented()
}

/// `(1/n) Σ hinge + (l2/2)‖w̃‖²` and one subgradient, evaluated directly.
pub fn svm_value_grad(w: &[f64], data: &Dataset, l2: f64) -> (f64, Vec<f64>) {
    let d = data.dim();
    let n = data.len() as f64;
    let mut g: Vec<f64> = w.iter().map(|x| l2 * x).collect();
    let mut v = 0.5 * l2 * w.iter().map(|x| x * x).sum::<f64>();
    for s in data.iter() {
        let m: f64 = s.features.iter().zip(&w[..d]).map(|(a, b)| a * b).sum::<f64>() + w[d];
        let h = 1.0 - s.label * m;
        if h > 0.0 {
            v += h / n;
            for j in 0..d {
                g[j] -= s.label * s.features[j] / n;
            }
            g[d] -= s.label / n;
        }
    }
    (v, g)
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn nl_objective_direct(ws: &[Vec<f64>], graph: &MecGraph, shards: &[Dataset], l2: f64, lambda: f64) -> f64 {
    let nodes: f64 = ws.iter().zip(shards).map(|(w, d)| svm_value_grad(w, d, l2).0).sum();
    let edges: f64 = graph
        .edges()
        .iter()
        .map(|e| e.weight * l2_dist(&ws[e.j], &ws[e.k]))
        .sum();
    nodes + lambda * edges
}

/// Monolithic subgradient descent on the whole network lasso objective,
/// step `1 / (mu (k + k0))`, best iterate kept.
pub fn network_lasso_oracle(
    graph: &MecGraph,
    shards: &[Dataset],
    l2: f64,
    lambda: f64,
    iters: usize,
) -> (Vec<LinearModel>, f64) {
    let d1 = shards[0].dim() + 1;
    let n = shards.len();
    let mut ws = vec![vec![0.0; d1]; n];
    let mut best = ws.clone();
    let mut best_f = nl_objective_direct(&ws, graph, shards, l2, lambda);
    let k0 = 10.0;
    for k in 0..iters {
        let mut grads: Vec<Vec<f64>> = ws
            .iter()
            .zip(shards)
            .map(|(w, d)| svm_value_grad(w, d, l2).1)
            .collect();
        for e in graph.edges() {
            let diff: Vec<f64> = ws[e.j].iter().zip(&ws[e.k]).map(|(a, b)| a - b).collect();
            let nrm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm > 0.0 {
                for j in 0..d1 {
                    let g = lambda * e.weight * diff[j] / nrm;
                    grads[e.j][j] += g;
                    grads[e.k][j] -= g;
                }
            }
        }
        let step = 1.0 / (l2 * (k as f64 + k0));
        for (w, g) in ws.iter_mut().zip(&grads) {
            for (a, b) in w.iter_mut().zip(g) {
                *a -= step * b;
            }
        }
        let f = nl_objective_direct(&ws, graph, shards, l2, lambda);
        if f < best_f {
            best_f = f;
            best = ws.clone();
        }
    }
    (best.iter().map(|w| LinearModel::from_augmented(w)).collect(), best_f)
}

/// One model minimizing `Σ_t [(1/n_t) Σ hinge + (l2/2)‖w̃‖²]` by subgradient
/// descent with suffix averaging over the second half of the run.
pub fn pooled_oracle(shards: &[Dataset], l2: f64, iters: usize) -> (LinearModel, f64) {
    let d1 = shards[0].dim() + 1;
    let mu = l2 * shards.len() as f64;
    let value_grad = |w: &[f64]| {
        let mut v = 0.0;
        let mut g = vec![0.0; d1];
        for d in shards {
            let (a, b) = svm_value_grad(w, d, l2);
            v += a;
            for (x, y) in g.iter_mut().zip(&b) {
                *x += y;
            }
        }
        (v, g)
    };
    let mut w = vec![0.0; d1];
    let mut avg = vec![0.0; d1];
    let mut count = 0.0;
    let mut best = w.clone();
    let mut best_f = value_grad(&w).0;
    for k in 0..iters {
        let (f, g) = value_grad(&w);
        if f < best_f {
            best_f = f;
            best = w.clone();
        }
        let step = 1.0 / (mu * (k as f64 + 10.0));
        for (a, b) in w.iter_mut().zip(&g) {
            *a -= step * b;
        }
        if k >= iters / 2 {
            count += 1.0;
            for (a, b) in avg.iter_mut().zip(&w) {
                *a += (b - *a) / count;
            }
        }
    }
    let fa = value_grad(&avg).0;
    if fa < best_f {
        best_f = fa;
        best = avg;
    }
    (LinearModel::from_augmented(&best), best_f)
}

pub fn max_abs_diff(a: &LinearModel, b: &LinearModel) -> f64 {
    a.augmented()
        .iter()
        .zip(b.augmented())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `Σ_t (1/n_t) Σ hinge(w_t) + ½ Σ_{s,t} K_st ⟨w_s, w_t⟩`, evaluated directly.
pub fn mtl_objective_direct(ws: &[Vec<f64>], shards: &[Dataset], k: &[Vec<f64>]) -> f64 {
    let loss: f64 = ws.iter().zip(shards).map(|(w, d)| svm_value_grad(w, d, 0.0).0).sum();
    let mut reg = 0.0;
    for s in 0..ws.len() {
        for t in 0..ws.len() {
            reg += k[s][t] * ws[s].iter().zip(&ws[t]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    loss + 0.5 * reg
}

/// Subgradient descent on the multi-task objective above with step
/// `1 / (mu (k + 10))`, suffix averaging and best iterate kept.
pub fn mtl_oracle(shards: &[Dataset], k: &[Vec<f64>], mu: f64, iters: usize) -> f64 {
    let m = shards.len();
    let d1 = shards[0].dim() + 1;
    let mut ws = vec![vec![0.0; d1]; m];
    let mut avg = ws.clone();
    let mut count = 0.0;
    let mut best = mtl_objective_direct(&ws, shards, k);
    for it in 0..iters {
        let mut grads: Vec<Vec<f64>> = ws.iter().zip(shards).map(|(w, d)| svm_value_grad(w, d, 0.0).1).collect();
        for t in 0..m {
            for s in 0..m {
                for j in 0..d1 {
                    grads[t][j] += k[t][s] * ws[s][j];
                }
            }
        }
        let step = 1.0 / (mu * (it as f64 + 10.0));
        for (w, g) in ws.iter_mut().zip(&grads) {
            for (a, b) in w.iter_mut().zip(g) {
                *a -= step * b;
            }
        }
        best = best.min(mtl_objective_direct(&ws, shards, k));
        if it >= iters / 2 {
            count += 1.0;
            for (a, w) in avg.iter_mut().zip(&ws) {
                for (x, y) in a.iter_mut().zip(w) {
                    *x += (y - *x) / count;
                }
            }
        }
    }
    best.min(mtl_objective_direct(&avg, shards, k))
}
