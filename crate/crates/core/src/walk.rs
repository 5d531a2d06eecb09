//! The token's Markov chain: sampling trajectories, node views and empirical
//! visit statistics.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::io::write_atomic;
use crate::rng::{counter_rng, streams};
use crate::transition::TransitionMatrix;

/// Magic header of the binary trajectory format.
pub const BINARY_MAGIC: &[u8; 8] = b"TWLK0001";

/// Per-row cumulative distributions over the support of `W`.
#[derive(Debug, Clone)]
pub struct WalkSampler {
    rows: Vec<Vec<(usize, f64)>>,
    w_hash: u64,
}

impl WalkSampler {
    pub fn new(w: &TransitionMatrix) -> Self {
        let n = w.n();
        let rows = (0..n)
            .map(|u| {
                let mut acc = 0.0;
                (0..n)
                    .filter(|&v| w.get(u, v) > 0.0)
                    .map(|v| {
                        acc += w.get(u, v);
                        (v, acc)
                    })
                    .collect()
            })
            .collect();
        WalkSampler {
            rows,
            w_hash: w.hash(),
        }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Inverse-CDF draw of the successor of `v` for a uniform `x` in [0, 1).
    pub fn successor(&self, v: usize, x: f64) -> usize {
        let row = &self.rows[v];
        let total = row.last().map_or(1.0, |r| r.1);
        let target = x * total;
        let idx = row.partition_point(|&(_, c)| c <= target);
        row[idx.min(row.len() - 1)].0
    }

    /// Successor at step `t` of a run keyed by `seed`; random access in `t`.
    pub fn step(&self, v: usize, seed: u64, t: u64) -> usize {
        let x: f64 = counter_rng(seed, streams::WALK, t).random();
        self.successor(v, x)
    }
}

/// What the token does at a trajectory position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    /// Walks without updating.
    BurnIn,
    /// The visited node updates with its gradient.
    Update,
    /// The node has used up its contribution cap and only adds noise.
    NoiseOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `v_0, ..., v_T`.
    pub nodes: Vec<usize>,
    pub seed: u64,
    pub w_hash: u64,
    /// Role of each position `0..T`; empty unless assigned.
    pub roles: Vec<StepRole>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Marks the first `burn_in` positions as burn-in and, when `cap` is set,
    /// every visit of a node beyond its cap as noise-only.
    pub fn assign_roles(&mut self, n: usize, burn_in: usize, cap: Option<u64>) {
        let mut used = vec![0u64; n];
        self.roles = (0..self.steps())
            .map(|t| {
                if t < burn_in {
                    return StepRole::BurnIn;
                }
                let v = self.nodes[t];
                used[v] += 1;
                match cap {
                    Some(c) if used[v] > c => StepRole::NoiseOnly,
                    _ => StepRole::Update,
                }
            })
            .collect();
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,node\n");
        for (t, v) in self.nodes.iter().enumerate() {
            out.push_str(&format!("{t},{v}\n"));
        }
        out
    }

    /// `TWLK0001` followed by the nodes as little-endian `u32`.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(8 + 4 * self.nodes.len());
        out.extend_from_slice(BINARY_MAGIC);
        for &v in &self.nodes {
            let v = u32::try_from(v).map_err(|_| invalid(format!("node id {v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn export_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn export_binary(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_binary()?)
    }
}

/// Decodes the node sequence of a binary trajectory.
pub fn read_binary(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 || &bytes[..8] != BINARY_MAGIC {
        return Err(invalid("missing TWLK0001 header"));
    }
    let body = &bytes[8..];
    if !body.len().is_multiple_of(4) {
        return Err(invalid("truncated trajectory body"));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect())
}

/// Samples `v_0 = v0, ..., v_T` with `v_{t+1}` drawn from row `v_t` of `W`.
pub fn simulate(w: &TransitionMatrix, v0: usize, steps: usize, seed: u64) -> Result<Trajectory> {
    simulate_with(&WalkSampler::new(w), v0, steps, seed)
}

pub fn simulate_with(sampler: &WalkSampler, v0: usize, steps: usize, seed: u64) -> Result<Trajectory> {
    if v0 >= sampler.n() {
        return Err(invalid(format!("start node {v0} out of range")));
    }
    let mut nodes = Vec::with_capacity(steps + 1);
    nodes.push(v0);
    let mut v = v0;
    for t in 0..steps {
        v = sampler.step(v, seed, t as u64);
        nodes.push(v);
    }
    Ok(Trajectory {
        nodes,
        seed,
        w_hash: sampler.w_hash,
        roles: Vec::new(),
    })
}

/// Visits per node over all `T + 1` positions.
pub fn visit_counts(traj: &Trajectory, n: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n];
    for &v in &traj.nodes {
        counts[v] += 1;
    }
    counts
}

/// One observation by a node: the token was here at `t` and left for `successor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ViewEvent {
    pub t: usize,
    /// `None` at the final position.
    pub successor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeView {
    pub owner: usize,
    pub events: Vec<ViewEvent>,
}

pub fn view_of(traj: &Trajectory, v: usize) -> NodeView {
    let events = traj
        .nodes
        .iter()
        .enumerate()
        .filter(|&(_, &x)| x == v)
        .map(|(t, _)| ViewEvent {
            t,
            successor: traj.nodes.get(t + 1).copied(),
        })
        .collect();
    NodeView { owner: v, events }
}

/// For each lag `i` in `1..=max_lag`, the fraction of visits to `u` followed
/// by `v` exactly `i` steps later, with the number of visits to `u` it is
/// based on.
#[derive(Debug, Clone)]
pub struct ArrivalFrequencies {
    /// `freq[i - 1][(u, v)]`.
    pub freq: Vec<DMatrix<f64>>,
    /// `trials[i - 1][u]`.
    pub trials: Vec<Vec<u64>>,
}

pub fn arrival_frequencies(traj: &Trajectory, n: usize, max_lag: usize) -> Result<ArrivalFrequencies> {
    if max_lag == 0 {
        return Err(invalid("max_lag must be at least 1"));
    }
    if traj.nodes.iter().any(|&v| v >= n) {
        return Err(Error::ShapeMismatch {
            expected: n,
            found: traj.nodes.iter().copied().max().unwrap_or(0) + 1,
        });
    }
    let mut freq = Vec::with_capacity(max_lag);
    let mut trials = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        let mut counts = DMatrix::<f64>::zeros(n, n);
        let mut from = vec![0u64; n];
        for pair in traj.nodes.windows(lag + 1) {
            counts[(pair[0], pair[lag])] += 1.0;
            from[pair[0]] += 1;
        }
        for (u, &visits) in from.iter().enumerate() {
            if visits > 0 {
                let mut row = counts.row_mut(u);
                row /= visits as f64;
            }
        }
        freq.push(counts);
        trials.push(from);
    }
    Ok(ArrivalFrequencies { freq, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{generate, Family, GraphSpec};
    use crate::transition::{hamilton_weighting, with_self_loops};

    fn graph(f: Family) -> crate::graphs::Graph {
        generate(&GraphSpec::new(f, 0)).unwrap().graph
    }

    #[test]
    fn deterministic_chain() {
        let w = TransitionMatrix::from_dense(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let traj = simulate(&w, 0, 4, 99).unwrap();
        assert_eq!(traj.nodes, vec![0, 1, 0, 1, 0]);
    }

    #[test]
    fn complete_graph_never_stays() {
        let w = hamilton_weighting(&graph(Family::Complete { n: 6 }));
        let traj = simulate(&w, 2, 2000, 5).unwrap();
        assert!(traj.nodes.windows(2).all(|p| p[0] != p[1]));
    }

    #[test]
    fn reproducible_and_in_support() {
        let g = graph(Family::Grid2d { rows: 3, cols: 3 });
        let w = hamilton_weighting(&g);
        let a = simulate(&w, 0, 500, 11).unwrap();
        assert_eq!(a, simulate(&w, 0, 500, 11).unwrap());
        assert_ne!(a.nodes, simulate(&w, 0, 500, 12).unwrap().nodes);
        assert!(a.nodes.windows(2).all(|p| w.get(p[0], p[1]) > 0.0));
        assert_eq!(a.w_hash, w.hash());
    }

    #[test]
    fn inverse_cdf_edges() {
        let w = TransitionMatrix::from_dense(DMatrix::from_row_slice(3, 3, &[0.5, 0.0, 0.5, 0.2, 0.3, 0.5, 0.0, 0.0, 1.0]))
            .unwrap();
        let s = WalkSampler::new(&w);
        assert_eq!(s.successor(0, 0.0), 0);
        assert_eq!(s.successor(0, 0.4999), 0);
        assert_eq!(s.successor(0, 0.5), 2);
        assert_eq!(s.successor(0, 0.999_999_999), 2);
        assert_eq!(s.successor(1, 0.25), 1);
        assert_eq!(s.successor(2, 0.0), 2);
    }

    #[test]
    fn visit_count_edges() {
        let w = hamilton_weighting(&graph(Family::Ring { n: 5 }));
        let traj = simulate(&w, 3, 0, 1).unwrap();
        assert_eq!(visit_counts(&traj, 5), vec![0, 0, 0, 1, 0]);
        let traj = simulate(&w, 3, 1000, 1).unwrap();
        assert_eq!(visit_counts(&traj, 5).iter().sum::<u64>(), 1001);
    }

    #[test]
    fn views_partition_positions() {
        let traj = Trajectory {
            nodes: vec![0, 1, 0],
            seed: 0,
            w_hash: 0,
            roles: vec![],
        };
        assert_eq!(
            view_of(&traj, 1).events,
            vec![ViewEvent {
                t: 1,
                successor: Some(0)
            }]
        );
        assert!(view_of(&traj, 2).events.is_empty());

        let w = with_self_loops(&graph(Family::Ring { n: 6 }), 0.3).unwrap();
        let traj = simulate(&w, 0, 777, 3).unwrap();
        let total: usize = (0..6).map(|v| view_of(&traj, v).events.len()).sum();
        assert_eq!(total, 778);
    }

    #[test]
    fn roles_respect_burn_in_and_cap() {
        let traj = Trajectory {
            nodes: vec![0, 1, 0, 1, 0, 1, 0],
            seed: 0,
            w_hash: 0,
            roles: vec![],
        };
        let mut t = traj.clone();
        t.assign_roles(2, 2, Some(1));
        use StepRole::*;
        assert_eq!(t.roles, vec![BurnIn, BurnIn, Update, Update, NoiseOnly, NoiseOnly]);
        let mut t = traj;
        t.assign_roles(2, 0, None);
        assert!(t.roles.iter().all(|&r| r == Update));
    }

    #[test]
    fn binary_round_trip() {
        let w = hamilton_weighting(&graph(Family::Star { n: 7 }));
        let traj = simulate(&w, 0, 300, 8).unwrap();
        let bytes = traj.to_binary().unwrap();
        assert_eq!(&bytes[..8], b"TWLK0001");
        assert_eq!(bytes.len(), 8 + 4 * 301);
        assert_eq!(read_binary(&bytes).unwrap(), traj.nodes);
        assert!(read_binary(b"TWLK0002").is_err());
        assert!(read_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_export() {
        let traj = Trajectory {
            nodes: vec![4, 2],
            seed: 0,
            w_hash: 0,
            roles: vec![],
        };
        assert_eq!(traj.to_csv(), "t,node\n0,4\n1,2\n");
    }

    #[test]
    fn transition_frequencies_match_rows() {
        for w in [
            with_self_loops(&graph(Family::Ring { n: 6 }), 0.2).unwrap(),
            hamilton_weighting(&graph(Family::Star { n: 5 })),
            hamilton_weighting(&graph(Family::Grid2d { rows: 2, cols: 3 })),
        ] {
            let n = w.n();
            let traj = simulate(&w, 0, 1_000_000, 21).unwrap();
            let af = arrival_frequencies(&traj, n, 1).unwrap();
            for u in 0..n {
                let visits = af.trials[0][u] as f64;
                for v in 0..n {
                    let diff = (af.freq[0][(u, v)] - w.get(u, v)).abs();
                    assert!(diff <= 5.0 / visits.sqrt(), "({u},{v}) diff {diff}");
                }
            }
        }
    }
}
