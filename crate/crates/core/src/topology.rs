//! Simulated edge-site topology: planar sites, a symmetrized k-nearest-neighbour
//! mesh and its Laplacian.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

/// Undirected edge stored once with `j < k` when built by this module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub j: usize,
    pub k: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MecGraph {
    n_nodes: usize,
    edges: Vec<Edge>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
    #[serde(default)]
    sites: Vec<Site>,
}

impl MecGraph {
    /// Builds a graph from explicit edges. Edges are taken as given; call
    /// [`validate_graph`] to check them.
    pub fn from_edges(n_nodes: usize, edges: Vec<Edge>) -> Self {
        let mut g = Self {
            n_nodes,
            edges,
            adjacency: Vec::new(),
            sites: Vec::new(),
        };
        g.rebuild_adjacency();
        g
    }

    pub fn with_sites(mut self, sites: Vec<Site>) -> Self {
        self.sites = sites;
        self
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj = vec![BTreeSet::new(); self.n_nodes];
        for e in &self.edges {
            if e.j < self.n_nodes && e.k < self.n_nodes && e.j != e.k {
                adj[e.j].insert(e.k);
                adj[e.k].insert(e.j);
            }
        }
        self.adjacency = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.get(node).map_or(0, Vec::len)
    }

    /// Sorted neighbour ids; panics on an out-of-range id (see [`neighbors`]).
    pub(crate) fn adjacent(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    /// Weight of edge `{j, k}`, if present.
    pub fn edge_weight(&self, j: usize, k: usize) -> Option<f64> {
        self.edges
            .iter()
            .find(|e| (e.j == j && e.k == k) || (e.j == k && e.k == j))
            .map(|e| e.weight)
    }

    /// Replaces the weight of an existing edge.
    pub fn set_edge_weight(&mut self, j: usize, k: usize, weight: f64) -> Result<()> {
        let e = self
            .edges
            .iter_mut()
            .find(|e| (e.j == j && e.k == k) || (e.j == k && e.k == j))
            .ok_or_else(|| Error::invalid(format!("no edge ({j},{k})")))?;
        e.weight = weight;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn push_edge_unchecked(&mut self, e: Edge) {
        self.edges.push(e);
        self.rebuild_adjacency();
    }
}

/// Connects each site to its `k` nearest sites (Euclidean, ties by smaller id),
/// then symmetrizes by union. All weights are 1.
pub fn build_knn_graph(sites: &[Site], k: usize) -> Result<MecGraph> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if k >= sites.len() {
        return Err(Error::invalid(format!(
            "k = {k} needs more than {k} sites, got {}",
            sites.len()
        )));
    }
    for (i, s) in sites.iter().enumerate() {
        if s.id != i {
            return Err(Error::invalid(format!(
                "site ids must be contiguous from 0; position {i} has id {}",
                s.id
            )));
        }
        if !(s.x.is_finite() && s.y.is_finite()) {
            return Err(Error::invalid(format!("site {i} has non-finite coordinates")));
        }
    }

    let mut pairs = BTreeSet::new();
    for a in sites {
        let mut others: Vec<(f64, usize)> = sites
            .iter()
            .filter(|b| b.id != a.id)
            .map(|b| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2), b.id))
            .collect();
        others.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        for &(_, b) in others.iter().take(k) {
            pairs.insert((a.id.min(b), a.id.max(b)));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(j, k)| Edge { j, k, weight: 1.0 })
        .collect();
    Ok(MecGraph::from_edges(sites.len(), edges).with_sites(sites.to_vec()))
}

/// `n` sites drawn uniformly from the unit square.
pub fn random_sites(n: usize, seed: u64) -> Vec<Site> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| Site {
            id,
            x: rng.random::<f64>(),
            y: rng.random::<f64>(),
        })
        .collect()
}

/// `n` sites in `n_groups` spatial blobs: site `i` belongs to group
/// `i % n_groups`, whose centre sits on a circle of radius 0.35 around
/// (0.5, 0.5); offsets are Gaussian with standard deviation `spread`.
pub fn clustered_sites(n: usize, n_groups: usize, spread: f64, seed: u64) -> Result<Vec<Site>> {
    if n_groups == 0 || !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::invalid(format!(
            "clustered sites need n_groups >= 1 and spread >= 0 (got {n_groups}, {spread})"
        )));
    }
    let centre = |g: usize| {
        if n_groups == 1 {
            return (0.5, 0.5);
        }
        let a = std::f64::consts::TAU * g as f64 / n_groups as f64;
        (0.5 + 0.35 * a.cos(), 0.5 + 0.35 * a.sin())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|id| {
            let (cx, cy) = centre(id % n_groups);
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            Site {
                id,
                x: cx + spread * dx,
                y: cy + spread * dy,
            }
        })
        .collect())
}

pub fn neighbors(graph: &MecGraph, node: usize) -> Result<BTreeSet<usize>> {
    if node >= graph.n_nodes {
        return Err(Error::invalid(format!(
            "unknown node {node} (graph has {} nodes)",
            graph.n_nodes
        )));
    }
    Ok(graph.adjacency[node].iter().copied().collect())
}

/// `L = D - A` with the edge weights.
pub fn laplacian(graph: &MecGraph) -> DMatrix<f64> {
    let n = graph.n_nodes;
    let mut l = DMatrix::zeros(n, n);
    for e in &graph.edges {
        if e.j == e.k || e.j >= n || e.k >= n {
            continue;
        }
        l[(e.j, e.k)] -= e.weight;
        l[(e.k, e.j)] -= e.weight;
        l[(e.j, e.j)] += e.weight;
        l[(e.k, e.k)] += e.weight;
    }
    l
}

/// Lists every broken graph invariant; empty means the graph is valid.
pub fn validate_graph(graph: &MecGraph) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in &graph.edges {
        if e.j == e.k {
            out.push(format!("self-loop at {}", e.j));
            continue;
        }
        if e.j >= graph.n_nodes || e.k >= graph.n_nodes {
            out.push(format!("edge ({},{}) references unknown node", e.j, e.k));
            continue;
        }
        if !(e.weight > 0.0 && e.weight.is_finite()) {
            out.push(format!("edge ({},{}) has non-positive weight {}", e.j, e.k, e.weight));
        }
        *seen.entry((e.j.min(e.k), e.j.max(e.k))).or_default() += 1;
    }
    for ((j, k), count) in seen {
        if count > 1 {
            out.push(format!("duplicate edge ({j},{k}) appears {count} times"));
        }
    }
    for (i, s) in graph.sites.iter().enumerate() {
        if s.id != i {
            out.push(format!("site at position {i} has id {}", s.id));
        }
    }
    out
}

/// Serializes to the line format `node <id> <x> <y>` / `edge <j> <k> <weight>`.
///
/// Floats use Rust's shortest round-trip formatting, so reading back is lossless.
pub fn graph_to_string(graph: &MecGraph) -> String {
    let mut s = String::new();
    for site in &graph.sites {
        let _ = writeln!(s, "node {} {:?} {:?}", site.id, site.x, site.y);
    }
    for e in &graph.edges {
        let _ = writeln!(s, "edge {} {} {:?}", e.j, e.k, e.weight);
    }
    s
}

/// What a graph file contained: always sites, edges only if any were listed.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFile {
    pub sites: Vec<Site>,
    pub edges: Vec<Edge>,
}

impl GraphFile {
    /// The listed edges as a graph, or a kNN graph over the sites when the file has none.
    pub fn into_graph(self, k: usize) -> Result<MecGraph> {
        if self.edges.is_empty() {
            build_knn_graph(&self.sites, k)
        } else {
            let n = self.sites.len().max(
                self.edges
                    .iter()
                    .map(|e| e.j.max(e.k) + 1)
                    .max()
                    .unwrap_or(0),
            );
            let g = MecGraph::from_edges(n, self.edges).with_sites(self.sites);
            let problems = validate_graph(&g);
            if !problems.is_empty() {
                return Err(Error::invalid(problems.join("; ")));
            }
            Ok(g)
        }
    }
}

pub fn parse_graph(text: &str, path: &Path) -> Result<GraphFile> {
    let mut sites = Vec::new();
    let mut edges = Vec::new();
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = raw.split_whitespace().collect();
        match parts.as_slice() {
            ["node", id, x, y] => {
                let id: usize = id.parse().map_err(|e| err(line, format!("bad id: {e}")))?;
                let x: f64 = x.parse().map_err(|e| err(line, format!("bad x: {e}")))?;
                let y: f64 = y.parse().map_err(|e| err(line, format!("bad y: {e}")))?;
                sites.push(Site { id, x, y });
            }
            ["edge", j, k, w] => {
                let j: usize = j.parse().map_err(|e| err(line, format!("bad node id: {e}")))?;
                let k: usize = k.parse().map_err(|e| err(line, format!("bad node id: {e}")))?;
                let weight: f64 = w.parse().map_err(|e| err(line, format!("bad weight: {e}")))?;
                edges.push(Edge { j, k, weight });
            }
            _ => return Err(err(line, format!("unrecognized line `{raw}`"))),
        }
    }
    sites.sort_by_key(|s| s.id);
    Ok(GraphFile { sites, edges })
}

pub fn read_graph_file(path: &Path) -> Result<GraphFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, path)
}

pub fn write_graph_file(graph: &MecGraph, path: &Path) -> Result<()> {
    std::fs::write(path, graph_to_string(graph)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn line_sites(xs: &[f64]) -> Vec<Site> {
        xs.iter()
            .enumerate()
            .map(|(id, &x)| Site { id, x, y: 0.0 })
            .collect()
    }

    #[test]
    fn clustered_sites_group_by_index() {
        let sites = clustered_sites(40, 2, 0.05, 3).unwrap();
        assert_eq!(sites, clustered_sites(40, 2, 0.05, 3).unwrap());
        let mean_x = |g: usize| {
            let xs: Vec<f64> = sites.iter().filter(|s| s.id % 2 == g).map(|s| s.x).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        assert!((mean_x(0) - 0.85).abs() < 0.05);
        assert!((mean_x(1) - 0.15).abs() < 0.05);
        let g = build_knn_graph(&sites, 3).unwrap();
        assert!(g.edges().iter().all(|e| e.j % 2 == e.k % 2));
        assert!(clustered_sites(5, 0, 0.1, 0).is_err());
        assert!(clustered_sites(5, 2, -1.0, 0).is_err());
    }

    fn edge_set(g: &MecGraph) -> BTreeSet<(usize, usize)> {
        g.edges().iter().map(|e| (e.j, e.k)).collect()
    }

    /// O(n²) kNN reference: full distance sort per node, union symmetrization.
    fn brute_force_knn(sites: &[Site], k: usize) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        for a in sites {
            let mut d: Vec<(f64, usize)> = Vec::new();
            for b in sites {
                if a.id != b.id {
                    d.push((((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt(), b.id));
                }
            }
            d.sort_by(|p, q| p.partial_cmp(q).unwrap());
            for &(_, b) in &d[..k] {
                out.insert(if a.id < b { (a.id, b) } else { (b, a.id) });
            }
        }
        out
    }

    #[test]
    fn collinear_k1() {
        let g = build_knn_graph(&line_sites(&[0.0, 1.0, 2.0]), 1).unwrap();
        assert_eq!(edge_set(&g), BTreeSet::from([(0, 1), (1, 2)]));
    }

    #[test]
    fn square_corners_k1() {
        let sites = vec![
            Site { id: 0, x: 0.0, y: 0.0 },
            Site { id: 1, x: 1.0, y: 0.0 },
            Site { id: 2, x: 1.0, y: 1.0 },
            Site { id: 3, x: 0.0, y: 1.0 },
        ];
        let g = build_knn_graph(&sites, 1).unwrap();
        assert!(g.edges().len() >= 2);
        assert!((0..4).all(|i| g.degree(i) >= 1));
    }

    #[test]
    fn random_k5_matches_brute_force() {
        let sites = random_sites(100, 42);
        let g = build_knn_graph(&sites, 5).unwrap();
        assert_eq!(edge_set(&g), brute_force_knn(&sites, 5));
        let oracle = brute_force_knn(&sites, 5);
        for i in 0..100 {
            let deg = g.degree(i);
            assert!((5..=99).contains(&deg), "node {i} degree {deg}");
            let expected: BTreeSet<usize> = oracle
                .iter()
                .filter_map(|&(a, b)| match (a == i, b == i) {
                    (true, _) => Some(b),
                    (_, true) => Some(a),
                    _ => None,
                })
                .collect();
            assert_eq!(neighbors(&g, i).unwrap(), expected);
        }
        assert!(validate_graph(&g).is_empty());
    }

    #[test]
    fn knn_rejects_bad_k() {
        let sites = line_sites(&[0.0, 1.0, 2.0]);
        assert!(build_knn_graph(&sites, 3).is_err());
        assert!(build_knn_graph(&sites, 0).is_err());
    }

    #[test]
    fn duplicate_coordinates_break_ties_by_id() {
        let sites = line_sites(&[0.0, 0.0, 0.0, 5.0]);
        let g = build_knn_graph(&sites, 1).unwrap();
        // 0 -> 1, 1 -> 0, 2 -> 0, 3 -> 0 (all three at distance 5, smallest id wins)
        assert_eq!(edge_set(&g), BTreeSet::from([(0, 1), (0, 2), (0, 3)]));
    }

    #[test]
    fn knn_is_deterministic() {
        let sites = random_sites(40, 9);
        assert_eq!(build_knn_graph(&sites, 5).unwrap(), build_knn_graph(&sites, 5).unwrap());
    }

    #[test]
    fn neighbors_of_path() {
        let g = build_knn_graph(&line_sites(&[0.0, 1.0, 2.0]), 1).unwrap();
        assert_eq!(neighbors(&g, 1).unwrap(), BTreeSet::from([0, 2]));
        assert_eq!(neighbors(&g, 0).unwrap(), BTreeSet::from([1]));
        assert!(neighbors(&g, 3).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let g = MecGraph::from_edges(2, vec![Edge { j: 0, k: 1, weight: 1.0 }]);
        let l = laplacian(&g);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let empty = MecGraph::from_edges(3, vec![]);
        assert_eq!(laplacian(&empty), DMatrix::zeros(3, 3));
    }

    #[test]
    fn laplacian_quadratic_form_matches_edge_sum() {
        let mut g = build_knn_graph(&random_sites(30, 5), 3).unwrap();
        g.set_edge_weight(g.edges()[0].j, g.edges()[0].k, 2.5).unwrap();
        let l = laplacian(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for row in 0..30 {
            assert!(l.row(row).sum().abs() < 1e-12);
        }
        assert_eq!(l, l.transpose());
        for _ in 0..20 {
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
            let xv = nalgebra::DVector::from_vec(x.clone());
            let quad = (xv.transpose() * &l * &xv)[(0, 0)];
            let direct: f64 = g
                .edges()
                .iter()
                .map(|e| e.weight * (x[e.j] - x[e.k]).powi(2))
                .sum();
            assert!((quad - direct).abs() <= 1e-9);
        }
    }

    #[test]
    fn validate_reports_violations() {
        let mut g = build_knn_graph(&line_sites(&[0.0, 1.0, 2.0, 3.0, 4.0]), 1).unwrap();
        assert!(validate_graph(&g).is_empty());
        g.push_edge_unchecked(Edge { j: 3, k: 3, weight: 1.0 });
        assert_eq!(validate_graph(&g), vec!["self-loop at 3".to_string()]);
        g.edges.pop();
        g.push_edge_unchecked(Edge { j: 1, k: 0, weight: 1.0 });
        let v = validate_graph(&g);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("duplicate"));
    }

    #[test]
    fn graph_file_round_trip() {
        let mut g = build_knn_graph(&random_sites(12, 3), 2).unwrap();
        g.set_edge_weight(g.edges()[1].j, g.edges()[1].k, 0.123456789).unwrap();
        let text = graph_to_string(&g);
        let back = parse_graph(&text, Path::new("mem")).unwrap().into_graph(2).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.sites(), g.sites());
        assert_eq!(graph_to_string(&back), text);
    }

    #[test]
    fn sites_only_file_builds_knn() {
        let text = "node 0 0.0 0.0\nnode 1 1.0 0.0\nnode 2 2.0 0.0\n";
        let g = parse_graph(text, Path::new("mem")).unwrap().into_graph(1).unwrap();
        assert_eq!(edge_set(&g), BTreeSet::from([(0, 1), (1, 2)]));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_graph("node 0 0 0\nedge 0 x 1\n", Path::new("g.txt")).unwrap_err();
        assert!(err.to_string().contains("g.txt:2"), "{err}");
    }
}
