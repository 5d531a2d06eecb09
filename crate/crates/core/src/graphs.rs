//! Undirected communication graphs: synthetic families, edge-list ingestion
//! and hop distances.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::rng::{derive_seed, stream_rng, streams};

/// Attempts made for a random family before giving up on connectivity.
pub const MAX_CONNECTIVITY_ATTEMPTS: u32 = 100;

/// A connected, simple, undirected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    positions: Option<Vec<[f64; 2]>>,
    blocks: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list, rejecting self-edges, duplicates,
    /// out-of-range ids and disconnected results.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n < 2 {
            return Err(invalid(format!("graph needs at least 2 nodes, got {n}")));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(invalid(format!("edge ({u}, {v}) out of range for n = {n}")));
            }
            if u == v {
                return Err(invalid(format!("self-edge on node {u}")));
            }
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for (u, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(invalid(format!("duplicate edge at node {u}")));
            }
        }
        let g = Graph {
            neighbors,
            positions: None,
            blocks: None,
        };
        let components = g.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.neighbors[u].len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Edges as `(u, v)` with `u < v`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    /// Node coordinates in the unit square, for geometric graphs.
    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    /// Cluster label per node, for stochastic block models.
    pub fn blocks(&self) -> Option<&[usize]> {
        self.blocks.as_deref()
    }

    pub fn is_regular(&self) -> Option<usize> {
        let d = self.degree(0);
        self.neighbors.iter().all(|l| l.len() == d).then_some(d)
    }

    pub fn is_bipartite(&self) -> bool {
        let n = self.n();
        let mut color = vec![u8::MAX; n];
        for start in 0..n {
            if color[start] != u8::MAX {
                continue;
            }
            color[start] = 0;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.neighbors[u] {
                    if color[v] == u8::MAX {
                        color[v] = 1 - color[u];
                        queue.push_back(v);
                    } else if color[v] == color[u] {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn component_count(&self) -> usize {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(u) = stack.pop() {
                for &v in &self.neighbors[u] {
                    if !seen[v] {
                        seen[v] = true;
                        stack.push(v);
                    }
                }
            }
        }
        components
    }

    fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Self {
        self.positions = Some(positions);
        self
    }

    fn with_blocks(mut self, blocks: Vec<usize>) -> Self {
        self.blocks = Some(blocks);
        self
    }

    /// `u v` per line, `u < v`.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for (u, v) in self.edges() {
            out.push_str(&format!("{u} {v}\n"));
        }
        out
    }
}

/// Graph families. Sizes live in the variant since several families derive
/// `n` from their shape parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Family {
    Complete { n: usize },
    Ring { n: usize },
    /// Node 0 is the hub.
    Star { n: usize },
    /// rows x cols lattice without wraparound.
    Grid2d { rows: usize, cols: usize },
    /// 2^dim nodes; the "exponential graph" used for power-of-two n.
    Hypercube { dim: u32 },
    ErdosRenyi { n: usize, q: f64 },
    /// Uniform points in the unit square joined when within `radius`.
    Geometric {
        n: usize,
        #[serde(default)]
        radius: Option<f64>,
    },
    /// Consecutive node ranges form the clusters.
    Sbm { sizes: Vec<usize>, probs: Vec<Vec<f64>> },
    EdgeList { path: PathBuf },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Complete { .. } => "complete",
            Family::Ring { .. } => "ring",
            Family::Star { .. } => "star",
            Family::Grid2d { .. } => "grid2d",
            Family::Hypercube { .. } => "hypercube",
            Family::ErdosRenyi { .. } => "erdos_renyi",
            Family::Geometric { .. } => "geometric",
            Family::Sbm { .. } => "sbm",
            Family::EdgeList { .. } => "edge_list",
        }
    }

    fn is_random(&self) -> bool {
        matches!(
            self,
            Family::ErdosRenyi { .. } | Family::Geometric { .. } | Family::Sbm { .. }
        )
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
}

impl GraphSpec {
    pub fn new(family: Family, seed: u64) -> Self {
        GraphSpec { family, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.family {
            Family::Complete { n } | Family::Star { n } => check_n(*n, 2),
            Family::Ring { n } => check_n(*n, 3),
            Family::Grid2d { rows, cols } => {
                if *rows == 0 || *cols == 0 || rows * cols < 2 {
                    Err(invalid(format!("grid {rows}x{cols} needs at least 2 nodes")))
                } else {
                    Ok(())
                }
            }
            Family::Hypercube { dim } => {
                if *dim == 0 || *dim > 24 {
                    Err(invalid(format!("hypercube dimension must be in 1..=24, got {dim}")))
                } else {
                    Ok(())
                }
            }
            Family::ErdosRenyi { n, q } => {
                check_n(*n, 2)?;
                if !(*q > 0.0 && *q <= 1.0) {
                    return Err(invalid(format!("erdos_renyi q must be in (0, 1], got {q}")));
                }
                Ok(())
            }
            Family::Geometric { n, radius } => {
                check_n(*n, 2)?;
                if let Some(r) = radius {
                    if !(*r > 0.0 && *r <= std::f64::consts::SQRT_2) {
                        return Err(invalid(format!("geometric radius must be in (0, sqrt 2], got {r}")));
                    }
                }
                Ok(())
            }
            Family::Sbm { sizes, probs } => {
                let k = sizes.len();
                if k == 0 || sizes.contains(&0) {
                    return Err(invalid("sbm cluster sizes must be non-empty and positive"));
                }
                check_n(sizes.iter().sum(), 2)?;
                if probs.len() != k || probs.iter().any(|r| r.len() != k) {
                    return Err(invalid(format!("sbm prob matrix must be {k}x{k}")));
                }
                for (i, row) in probs.iter().enumerate() {
                    for (j, &p) in row.iter().enumerate() {
                        if !(0.0..=1.0).contains(&p) {
                            return Err(invalid(format!("sbm probability {p} outside [0, 1]")));
                        }
                        if (p - probs[j][i]).abs() > 0.0 {
                            return Err(invalid("sbm prob matrix must be symmetric"));
                        }
                    }
                }
                Ok(())
            }
            Family::EdgeList { .. } => Ok(()),
        }
    }
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        Err(invalid(format!("n must be at least {min}, got {n}")))
    } else {
        Ok(())
    }
}

/// Connectivity-threshold radius `1.1 * sqrt(2 ln n / n)`, capped at sqrt 2.
pub fn default_geometric_radius(n: usize) -> f64 {
    let n = n as f64;
    (1.1 * (2.0 * n.ln() / n).sqrt()).min(std::f64::consts::SQRT_2)
}

/// Edge probability `c ln(n) / n`, clamped into (0, 1].
pub fn erdos_renyi_q(n: usize, c: f64) -> f64 {
    (c * (n as f64).ln() / n as f64).clamp(f64::MIN_POSITIVE, 1.0)
}

/// Provenance recorded alongside exported graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub n: usize,
    pub family: String,
    pub seed: u64,
    pub retries: u32,
}

#[derive(Debug, Clone)]
pub struct GeneratedGraph {
    pub graph: Graph,
    pub meta: GraphMeta,
    /// Original ids for edge-list inputs, indexed by dense id.
    pub id_map: Option<Vec<u64>>,
}

/// Builds the graph described by `spec`. Random families redraw with derived
/// sub-seeds until connected, up to [`MAX_CONNECTIVITY_ATTEMPTS`] draws.
pub fn generate(spec: &GraphSpec) -> Result<GeneratedGraph> {
    spec.validate()?;
    let family_name = spec.family.name().to_string();
    if let Family::EdgeList { path } = &spec.family {
        let (graph, ids) = load_edge_list(path)?;
        return Ok(GeneratedGraph {
            meta: GraphMeta {
                n: graph.n(),
                family: family_name,
                seed: spec.seed,
                retries: 0,
            },
            graph,
            id_map: Some(ids),
        });
    }
    if !spec.family.is_random() {
        let graph = deterministic(&spec.family)?;
        return Ok(GeneratedGraph {
            meta: GraphMeta {
                n: graph.n(),
                family: family_name,
                seed: spec.seed,
                retries: 0,
            },
            graph,
            id_map: None,
        });
    }
    for attempt in 0..MAX_CONNECTIVITY_ATTEMPTS {
        let sub_seed = derive_seed(spec.seed, attempt as u64);
        match random_draw(&spec.family, sub_seed) {
            Ok(graph) => {
                return Ok(GeneratedGraph {
                    meta: GraphMeta {
                        n: graph.n(),
                        family: family_name,
                        seed: spec.seed,
                        retries: attempt,
                    },
                    graph,
                    id_map: None,
                })
            }
            Err(Error::Disconnected { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConnectivityRetriesExhausted {
        attempts: MAX_CONNECTIVITY_ATTEMPTS,
    })
}

fn deterministic(family: &Family) -> Result<Graph> {
    match *family {
        Family::Complete { n } => {
            let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            Graph::from_edges(n, &edges)
        }
        Family::Ring { n } => {
            let edges: Vec<_> = (0..n).map(|u| (u, (u + 1) % n)).collect();
            Graph::from_edges(n, &edges)
        }
        Family::Star { n } => {
            let edges: Vec<_> = (1..n).map(|v| (0, v)).collect();
            Graph::from_edges(n, &edges)
        }
        Family::Grid2d { rows, cols } => {
            let id = |r: usize, c: usize| r * cols + c;
            let mut edges = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if c + 1 < cols {
                        edges.push((id(r, c), id(r, c + 1)));
                    }
                    if r + 1 < rows {
                        edges.push((id(r, c), id(r + 1, c)));
                    }
                }
            }
            Graph::from_edges(rows * cols, &edges)
        }
        Family::Hypercube { dim } => {
            let n = 1usize << dim;
            let mut edges = Vec::with_capacity(n * dim as usize / 2);
            for u in 0..n {
                for b in 0..dim {
                    let v = u ^ (1 << b);
                    if u < v {
                        edges.push((u, v));
                    }
                }
            }
            Graph::from_edges(n, &edges)
        }
        _ => unreachable!("random families are drawn separately"),
    }
}

fn random_draw(family: &Family, seed: u64) -> Result<Graph> {
    let mut rng = stream_rng(seed, streams::GRAPH);
    match family {
        Family::ErdosRenyi { n, q } => {
            let mut edges = Vec::new();
            for u in 0..*n {
                for v in u + 1..*n {
                    if rng.random::<f64>() < *q {
                        edges.push((u, v));
                    }
                }
            }
            Graph::from_edges(*n, &edges)
        }
        Family::Geometric { n, radius } => {
            let r = radius.unwrap_or_else(|| default_geometric_radius(*n));
            let pts: Vec<[f64; 2]> = (0..*n).map(|_| [rng.random(), rng.random()]).collect();
            let mut edges = Vec::new();
            for u in 0..*n {
                for v in u + 1..*n {
                    let dx = pts[u][0] - pts[v][0];
                    let dy = pts[u][1] - pts[v][1];
                    if (dx * dx + dy * dy).sqrt() <= r {
                        edges.push((u, v));
                    }
                }
            }
            Ok(Graph::from_edges(*n, &edges)?.with_positions(pts))
        }
        Family::Sbm { sizes, probs } => {
            let blocks: Vec<usize> = sizes
                .iter()
                .enumerate()
                .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
                .collect();
            let n = blocks.len();
            let mut edges = Vec::new();
            for u in 0..n {
                for v in u + 1..n {
                    if rng.random::<f64>() < probs[blocks[u]][blocks[v]] {
                        edges.push((u, v));
                    }
                }
            }
            Ok(Graph::from_edges(n, &edges)?.with_blocks(blocks))
        }
        _ => unreachable!("deterministic families are built separately"),
    }
}

/// Parses `u v` lines (`#` comments allowed) and remaps ids to `0..n` in
/// first-appearance order. Repeated undirected edges are merged.
pub fn parse_edge_list(text: &str) -> Result<(Graph, Vec<u64>)> {
    let mut dense: HashMap<u64, usize> = HashMap::new();
    let mut ids: Vec<u64> = Vec::new();
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next_id = || -> Result<u64> {
            let tok = parts.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: "expected two node ids".into(),
            })?;
            tok.parse::<u64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad node id {tok:?}: {e}"),
            })
        };
        let a = next_id()?;
        let b = next_id()?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                message: "expected exactly two node ids".into(),
            });
        }
        if a == b {
            return Err(Error::Parse {
                line: line_no,
                message: format!("self-edge on node {a}"),
            });
        }
        let mut intern = |id: u64| {
            *dense.entry(id).or_insert_with(|| {
                ids.push(id);
                ids.len() - 1
            })
        };
        let (u, v) = (intern(a), intern(b));
        edges.push((u.min(v), u.max(v)));
    }
    edges.sort_unstable();
    edges.dedup();
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let graph = Graph::from_edges(ids.len(), &edges)?;
    Ok((graph, ids))
}

pub fn load_edge_list(path: &Path) -> Result<(Graph, Vec<u64>)> {
    let text = std::fs::read_to_string(path)?;
    parse_edge_list(&text)
}

/// Writes the edge list and a `<path>.json` sidecar with provenance.
pub fn export_graph(g: &GeneratedGraph, path: &Path) -> Result<()> {
    write_atomic(path, g.graph.to_edge_list().as_bytes())?;
    let sidecar = sidecar_path(path);
    write_atomic(&sidecar, serde_json::to_string_pretty(&g.meta)?.as_bytes())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// All-pairs hop counts.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    hops: Vec<u32>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.hops[u * self.n + v]
    }

    pub fn diameter(&self) -> u32 {
        self.hops.iter().copied().max().unwrap_or(0)
    }
}

/// Breadth-first search from every node.
pub fn shortest_path_distances(g: &Graph) -> DistanceMatrix {
    let n = g.n();
    let mut hops = vec![u32::MAX; n * n];
    let mut queue = VecDeque::with_capacity(n);
    for s in 0..n {
        let row = &mut hops[s * n..(s + 1) * n];
        row[s] = 0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            let du = row[u];
            for &v in g.neighbors(u) {
                if row[v] == u32::MAX {
                    row[v] = du + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    DistanceMatrix { n, hops }
}
