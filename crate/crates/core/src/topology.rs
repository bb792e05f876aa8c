//! Backhaul graphs, cluster assignment, mixing matrices and the spectral
//! constants that govern gossip.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Undirected simple graph on `m` vertices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackhaulGraph {
    m: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl BackhaulGraph {
    /// Builds a graph from an edge list. Self-loops are rejected; duplicate
    /// and reversed edges collapse.
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("graph needs at least one vertex".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= m || b >= m {
                return Err(Error::IndexOutOfRange { index: a.max(b), dim: m });
            }
            if a == b {
                return Err(Error::InvalidParameter(format!("self-loop on vertex {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); m];
        for &(a, b) in &edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Self { m, edges, adjacency })
    }

    pub fn vertex_count(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency[v].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].binary_search(&b).is_ok()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.m];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Text form: a `# vertices <m>` comment, then one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# vertices {}\n", self.m);
        for (a, b) in &self.edges {
            writeln!(out, "{a} {b}").unwrap();
        }
        out
    }

    /// Parses [`BackhaulGraph::to_edge_list`] output. Without the vertex
    /// comment the vertex count is `max index + 1`.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut m = None;
        let mut edges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(count) = comment.trim().strip_prefix("vertices") {
                    m = Some(count.trim().parse().map_err(|_| {
                        Error::Parse(format!("line {}: bad vertex count", n + 1))
                    })?);
                }
                continue;
            }
            let mut parts = line.split_whitespace().map(str::parse::<usize>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => return Err(Error::Parse(format!("line {}: expected \"i j\", got {line:?}", n + 1))),
            }
        }
        let m = match m {
            Some(m) => m,
            None => edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(1),
        };
        Self::new(m, edges)
    }
}

/// Cycle on `m >= 2` vertices; `m = 2` is the single edge.
pub fn build_ring(m: usize) -> Result<BackhaulGraph> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!("ring needs at least 2 vertices, got {m}")));
    }
    BackhaulGraph::new(m, (0..m).map(|i| (i, (i + 1) % m)))
}

/// Complete graph `K_m`. `m = 1` gives the single isolated server.
pub fn build_complete(m: usize) -> Result<BackhaulGraph> {
    BackhaulGraph::new(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))))
}

/// Maximum connectivity rejections in [`build_erdos_renyi`].
pub const MAX_TOPOLOGY_ATTEMPTS: usize = 10_000;

/// One G(m, p) draw with no connectivity requirement.
pub fn erdos_renyi_raw<R: Rng + ?Sized>(m: usize, p_edge: f64, rng: &mut R) -> Result<BackhaulGraph> {
    if !(p_edge > 0.0 && p_edge <= 1.0) {
        return Err(Error::InvalidParameter(format!("edge probability must be in (0, 1], got {p_edge}")));
    }
    let mut edges = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if p_edge >= 1.0 || rng.random::<f64>() < p_edge {
                edges.push((i, j));
            }
        }
    }
    BackhaulGraph::new(m, edges)
}

/// Connected G(m, p) graph: draws are rejected until connected, each retry
/// on the next sub-seed.
pub fn build_erdos_renyi(m: usize, p_edge: f64, seed: u64) -> Result<BackhaulGraph> {
    for attempt in 0..MAX_TOPOLOGY_ATTEMPTS {
        let g = erdos_renyi_raw(m, p_edge, &mut stream(seed, Purpose::Topology, &[attempt as u64]))?;
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::DisconnectedGraph(MAX_TOPOLOGY_ATTEMPTS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GraphSpec {
    Ring,
    Complete,
    ErdosRenyi { p_edge: f64 },
}

impl GraphSpec {
    pub fn build(&self, m: usize, seed: u64) -> Result<BackhaulGraph> {
        match *self {
            // a lone server has nothing to gossip with
            _ if m == 1 => build_complete(1),
            GraphSpec::Ring => build_ring(m),
            GraphSpec::Complete => build_complete(m),
            GraphSpec::ErdosRenyi { p_edge } => build_erdos_renyi(m, p_edge, seed),
        }
    }
}

/// Metropolis-Hastings weights: `1 / (1 + max(d_i, d_j))` on edges and the
/// remaining mass on the diagonal.
pub fn metropolis_mixing(graph: &BackhaulGraph) -> DMatrix<f64> {
    let m = graph.vertex_count();
    let mut h = DMatrix::<f64>::zeros(m, m);
    for &(a, b) in graph.edges() {
        let w = 1.0 / (1.0 + graph.degree(a).max(graph.degree(b)) as f64);
        h[(a, b)] = w;
        h[(b, a)] = w;
    }
    for i in 0..m {
        let off: f64 = graph.neighbors(i).iter().map(|&j| h[(i, j)]).sum();
        h[(i, i)] = 1.0 - off;
    }
    h
}

/// `max(|lambda_2|, |lambda_m|)` of a symmetric matrix, i.e. the largest
/// eigenvalue magnitude once the top eigenvalue is removed.
pub fn spectral_gap(h: &DMatrix<f64>) -> Result<f64> {
    if h.nrows() != h.ncols() {
        return Err(Error::DimensionMismatch { expected: h.nrows(), actual: h.ncols() });
    }
    if h.nrows() == 1 {
        return Ok(0.0);
    }
    let eig = h.clone().try_symmetric_eigen(1e-14, 100_000).ok_or(Error::EigenFailure)?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values[1].abs().max(values[values.len() - 1].abs()))
}

/// Tolerance for the doubly-stochastic checks.
pub const MIXING_TOLERANCE: f64 = 1e-12;

/// Checks symmetry, double stochasticity, support on `graph` plus the
/// diagonal, and `zeta < 1`. Returns `zeta`.
pub fn validate_mixing(h: &DMatrix<f64>, graph: &BackhaulGraph) -> Result<f64> {
    let m = graph.vertex_count();
    if h.nrows() != m || h.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, actual: h.nrows() });
    }
    for i in 0..m {
        let row: f64 = h.row(i).iter().sum();
        let col: f64 = h.column(i).iter().sum();
        if (row - 1.0).abs() > MIXING_TOLERANCE || (col - 1.0).abs() > MIXING_TOLERANCE {
            return Err(Error::InvalidMixingMatrix(format!("row/column {i} does not sum to 1")));
        }
        for j in 0..m {
            let v = h[(i, j)];
            if (v - h[(j, i)]).abs() > MIXING_TOLERANCE {
                return Err(Error::InvalidMixingMatrix(format!("asymmetric at ({i}, {j})")));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidMixingMatrix(format!("entry ({i}, {j}) = {v} outside [0, 1]")));
            }
            if i != j && (v > 0.0) != graph.has_edge(i, j) {
                return Err(Error::InvalidMixingMatrix(format!("support mismatch at ({i}, {j})")));
            }
        }
    }
    let zeta = spectral_gap(h)?;
    if zeta >= 1.0 - MIXING_TOLERANCE {
        return Err(Error::InvalidMixingMatrix(format!("zeta = {zeta} is not below 1")));
    }
    Ok(zeta)
}

/// `1/(1 - z^2) + 2/(1 - z) + z/(1 - z)^2`.
pub fn omega1(zeta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(Error::InvalidParameter(format!("zeta must be in [0, 1), got {zeta}")));
    }
    let gap = 1.0 - zeta;
    Ok(1.0 / (1.0 - zeta * zeta) + 2.0 / gap + zeta / (gap * gap))
}

/// Largest learning rate admitted by the convergence bound: the minimum of
/// the topology term `1 / (4 L q^2 tau^2 Omega1)` and every per-device term
/// `(rho^2 - 2 rho^2 (1 - theta)) / (2 L (2 - theta) rho)`. The result is
/// `<= 0` when some `theta < 1/2`; callers must treat that as "no admissible
/// rate".
pub fn max_learning_rate(zeta: f64, q: usize, tau: usize, l_smooth: f64, rho: &[f64], theta: &[f64]) -> f64 {
    let omega = match omega1(zeta) {
        Ok(o) => o,
        Err(_) => return 0.0,
    };
    let qt = (q * tau) as f64;
    let global = 1.0 / (4.0 * l_smooth * qt * qt * omega);
    rho.iter().zip(theta).fold(global, |acc, (&r, &t)| {
        let per_device = (r * r - 2.0 * r * r * (1.0 - t)) / (2.0 * l_smooth * (2.0 - t) * r);
        acc.min(per_device)
    })
}

/// Device-to-cluster assignment plus the backhaul graph and its mixing matrix.
#[derive(Debug, Clone)]
pub struct ClusterTopology {
    assignment: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    graph: BackhaulGraph,
    mixing: DMatrix<f64>,
    zeta: f64,
}

impl ClusterTopology {
    /// Splits `n_devices` into contiguous, near-equal clusters, one per
    /// graph vertex.
    pub fn even(n_devices: usize, graph: BackhaulGraph) -> Result<Self> {
        let m = graph.vertex_count();
        if n_devices < m {
            return Err(Error::InvalidParameter(format!("{n_devices} devices cannot fill {m} clusters")));
        }
        let assignment = (0..n_devices).map(|n| n * m / n_devices).collect();
        Self::with_assignment(assignment, graph)
    }

    pub fn with_assignment(assignment: Vec<usize>, graph: BackhaulGraph) -> Result<Self> {
        let m = graph.vertex_count();
        if !graph.is_connected() {
            return Err(Error::InvalidParameter("backhaul graph must be connected".into()));
        }
        let mut clusters = vec![Vec::new(); m];
        for (device, &c) in assignment.iter().enumerate() {
            if c >= m {
                return Err(Error::IndexOutOfRange { index: c, dim: m });
            }
            clusters[c].push(device);
        }
        if let Some(empty) = clusters.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCluster(empty));
        }
        let mixing = metropolis_mixing(&graph);
        let zeta = validate_mixing(&mixing, &graph)?;
        Ok(Self { assignment, clusters, graph, mixing, zeta })
    }

    pub fn n_devices(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster_of(&self, device: usize) -> usize {
        self.assignment[device]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Vec::len).collect()
    }

    pub fn graph(&self) -> &BackhaulGraph {
        &self.graph
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }
}
