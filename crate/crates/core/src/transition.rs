//! Row-stochastic transition matrices supported on a graph.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graphs::Graph;
use crate::io::{matrix_from_csv, matrix_hash, matrix_to_csv, write_atomic};

/// Absolute tolerance on row/column sums and symmetry.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Iteration cap for power iteration on non-bistochastic chains.
pub const MAX_POWER_ITERATIONS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    w: DMatrix<f64>,
    symmetric: bool,
    bistochastic: bool,
    self_loop_kappa: Option<f64>,
}

impl TransitionMatrix {
    /// Wraps a dense matrix, checking it is square and row-stochastic with
    /// entries in [0, 1]. Symmetry and bistochasticity are detected.
    pub fn from_dense(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if n != w.ncols() {
            return Err(Error::ShapeMismatch {
                expected: n,
                found: w.ncols(),
            });
        }
        if n == 0 {
            return Err(invalid("transition matrix is empty"));
        }
        if let Some(x) = w.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(invalid(format!("transition entry {x} outside [0, 1]")));
        }
        let row_err = max_row_violation(&w);
        if row_err > STOCHASTIC_TOL {
            return Err(invalid(format!("row sums deviate from 1 by {row_err:e}")));
        }
        let symmetric = max_asymmetry(&w) <= STOCHASTIC_TOL;
        let bistochastic = max_column_violation(&w) <= STOCHASTIC_TOL;
        Ok(TransitionMatrix {
            w,
            symmetric,
            bistochastic,
            self_loop_kappa: None,
        })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.w[(u, v)]
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn is_bistochastic(&self) -> bool {
        self.bistochastic
    }

    pub fn self_loop_kappa(&self) -> Option<f64> {
        self.self_loop_kappa
    }

    /// Identity used to tie trajectories and loss matrices to the chain.
    pub fn hash(&self) -> u64 {
        matrix_hash(&self.w)
    }

    /// `(1 - kappa) W + kappa I`; keeps symmetry and bistochasticity.
    pub fn blend(&self, kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        let n = self.n();
        let w = &self.w * (1.0 - kappa) + DMatrix::identity(n, n) * kappa;
        Ok(TransitionMatrix {
            w,
            symmetric: self.symmetric,
            bistochastic: self.bistochastic,
            self_loop_kappa: Some(kappa),
        })
    }

    /// Errors unless the chain is symmetric and bistochastic, which the
    /// spectral accountant needs.
    pub fn require_symmetric_bistochastic(&self) -> Result<()> {
        if !self.symmetric {
            return Err(Error::NotSymmetric {
                max_asymmetry: max_asymmetry(&self.w),
            });
        }
        if !self.bistochastic {
            return Err(Error::NotBistochastic);
        }
        Ok(())
    }

    /// Writes the matrix as CSV and a `<path>.json` sidecar with the flags.
    pub fn export(&self, path: &Path) -> Result<()> {
        write_atomic(path, matrix_to_csv(&self.w).as_bytes())?;
        let meta = TransitionMeta {
            n: self.n(),
            symmetric: self.symmetric,
            bistochastic: self.bistochastic,
            self_loop_kappa: self.self_loop_kappa,
        };
        write_atomic(
            &crate::graphs::sidecar_path(path),
            serde_json::to_string_pretty(&meta)?.as_bytes(),
        )
    }

    /// Reads a CSV written by [`TransitionMatrix::export`]. Flags are
    /// recomputed from the values; κ is taken from the sidecar if present.
    pub fn import(path: &Path) -> Result<Self> {
        let w = matrix_from_csv(&std::fs::read_to_string(path)?)?;
        let mut tm = Self::from_dense(w)?;
        let sidecar = crate::graphs::sidecar_path(path);
        if sidecar.exists() {
            let meta: TransitionMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
            if meta.n != tm.n() {
                return Err(Error::ShapeMismatch {
                    expected: meta.n,
                    found: tm.n(),
                });
            }
            tm.self_loop_kappa = meta.self_loop_kappa;
        }
        Ok(tm)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransitionMeta {
    n: usize,
    symmetric: bool,
    bistochastic: bool,
    self_loop_kappa: Option<f64>,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(invalid(format!("kappa must be in [0, 1), got {kappa}")));
    }
    Ok(())
}

/// Self-loop probability `1 / T^2` used when κ is requested without a value.
pub fn default_kappa(steps: u64) -> f64 {
    let t = steps.max(2) as f64;
    1.0 / (t * t)
}

/// `W_uv = 1 / max(d_u, d_v)` on edges; the diagonal absorbs the remainder.
pub fn hamilton_weighting(g: &Graph) -> TransitionMatrix {
    let n = g.n();
    let mut w = DMatrix::zeros(n, n);
    for u in 0..n {
        let du = g.degree(u);
        let mut off = 0.0;
        for &v in g.neighbors(u) {
            let x = 1.0 / du.max(g.degree(v)) as f64;
            w[(u, v)] = x;
            off += x;
        }
        w[(u, u)] = (1.0 - off).max(0.0);
    }
    TransitionMatrix {
        w,
        symmetric: true,
        bistochastic: true,
        self_loop_kappa: None,
    }
}

/// `(1 - kappa) A / d + kappa I` on a d-regular graph.
pub fn with_self_loops(g: &Graph, kappa: f64) -> Result<TransitionMatrix> {
    check_kappa(kappa)?;
    let degrees = g.degrees();
    let d = match g.is_regular() {
        Some(d) => d,
        None => {
            return Err(Error::NotRegular {
                min: *degrees.iter().min().expect("n >= 2"),
                max: *degrees.iter().max().expect("n >= 2"),
            })
        }
    };
    let n = g.n();
    let off = (1.0 - kappa) / d as f64;
    let mut w = DMatrix::zeros(n, n);
    for u in 0..n {
        for &v in g.neighbors(u) {
            w[(u, v)] = off;
        }
        w[(u, u)] = kappa;
    }
    Ok(TransitionMatrix {
        w,
        symmetric: true,
        bistochastic: true,
        self_loop_kappa: Some(kappa),
    })
}

fn max_row_violation(w: &DMatrix<f64>) -> f64 {
    w.row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn max_column_violation(w: &DMatrix<f64>) -> f64 {
    w.column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn max_asymmetry(w: &DMatrix<f64>) -> f64 {
    let n = w.nrows();
    let mut m = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            m = m.max((w[(i, j)] - w[(j, i)]).abs());
        }
    }
    m
}

/// Outcome of [`validate`]; every check carries its flag and worst violation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub stochastic: bool,
    pub max_row_violation: f64,
    pub entries_in_unit_interval: bool,
    pub symmetric: bool,
    pub max_asymmetry: f64,
    pub bistochastic: bool,
    pub max_column_violation: f64,
    pub support_matches_graph: bool,
    /// Largest weight placed on a non-edge.
    pub max_off_support: f64,
    pub aperiodic: bool,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.stochastic
            && self.entries_in_unit_interval
            && self.symmetric
            && self.bistochastic
            && self.support_matches_graph
            && self.aperiodic
    }
}

/// Checks a raw dense matrix against a graph without rejecting anything.
pub fn validate_dense(w: &DMatrix<f64>, g: &Graph) -> ValidationReport {
    let n = w.nrows();
    let max_row = max_row_violation(w);
    let max_col = max_column_violation(w);
    let asym = max_asymmetry(w);
    let mut max_off_support = 0.0f64;
    for u in 0..n {
        for v in 0..n {
            if u != v && (v >= g.n() || u >= g.n() || !g.has_edge(u, v)) {
                max_off_support = max_off_support.max(w[(u, v)].abs());
            }
        }
    }
    let positive_diagonal = (0..n).any(|u| w[(u, u)] > 0.0);
    ValidationReport {
        stochastic: max_row <= STOCHASTIC_TOL,
        max_row_violation: max_row,
        entries_in_unit_interval: w.iter().all(|x| (0.0..=1.0).contains(x)),
        symmetric: asym <= STOCHASTIC_TOL,
        max_asymmetry: asym,
        bistochastic: max_col <= STOCHASTIC_TOL,
        max_column_violation: max_col,
        support_matches_graph: n == g.n() && max_off_support == 0.0,
        max_off_support,
        aperiodic: positive_diagonal || !g.is_bipartite(),
    }
}

pub fn validate(w: &TransitionMatrix, g: &Graph) -> ValidationReport {
    validate_dense(&w.w, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pub pi: DVector<f64>,
}

impl StationaryDistribution {
    pub fn min(&self) -> f64 {
        self.pi.min()
    }
}

/// Uniform for bistochastic chains, otherwise power iteration from uniform
/// until `||pi W - pi||_1 <= 1e-10`.
pub fn stationary_distribution(w: &TransitionMatrix) -> Result<StationaryDistribution> {
    let n = w.n();
    let uniform = DVector::from_element(n, 1.0 / n as f64);
    if w.bistochastic {
        return Ok(StationaryDistribution { pi: uniform });
    }
    let wt = w.w.transpose();
    let mut pi = uniform;
    for _ in 0..MAX_POWER_ITERATIONS {
        let mut next = &wt * &pi;
        let s = next.sum();
        next /= s;
        let diff = (&next - &pi).lp_norm(1);
        pi = next;
        if diff <= 1e-10 {
            let residual = (&wt * &pi - &pi).lp_norm(1);
            if residual <= 1e-10 {
                return Ok(StationaryDistribution { pi });
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_POWER_ITERATIONS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{generate, Family, GraphSpec};
    use proptest::prelude::*;

    fn graph(f: Family) -> Graph {
        generate(&GraphSpec::new(f, 0)).unwrap().graph
    }

    #[test]
    fn hamilton_on_path() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let w = hamilton_weighting(&g);
        assert_eq!(w.get(0, 1), 0.5);
        assert_eq!(w.get(1, 2), 0.5);
        assert_eq!(w.get(0, 0), 0.5);
        assert_eq!(w.get(1, 1), 0.0);
        assert_eq!(w.get(2, 2), 0.5);
    }

    #[test]
    fn hamilton_on_small_star() {
        let w = hamilton_weighting(&graph(Family::Star { n: 3 }));
        assert_eq!(w.get(0, 1), 0.5);
        assert_eq!(w.get(0, 2), 0.5);
        assert_eq!(w.get(0, 0), 0.0);
        assert_eq!(w.get(1, 1), 0.5);
        assert_eq!(w.get(2, 2), 0.5);
    }

    #[test]
    fn hamilton_on_complete() {
        let n = 6;
        let w = hamilton_weighting(&graph(Family::Complete { n }));
        for u in 0..n {
            for v in 0..n {
                let expected = if u == v { 0.0 } else { 1.0 / (n - 1) as f64 };
                assert!((w.get(u, v) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn self_loops_on_ring() {
        let w = with_self_loops(&graph(Family::Ring { n: 4 }), 0.5).unwrap();
        assert_eq!(w.get(0, 0), 0.5);
        assert_eq!(w.get(0, 1), 0.25);
        assert_eq!(w.get(0, 3), 0.25);
        assert_eq!(w.get(0, 2), 0.0);
    }

    #[test]
    fn zero_kappa_ring_is_periodic() {
        let g = graph(Family::Ring { n: 4 });
        let w = with_self_loops(&g, 0.0).unwrap();
        assert_eq!(w.get(0, 1), 0.5);
        assert!(!validate(&w, &g).aperiodic);
    }

    #[test]
    fn equal_probability_ring() {
        let g = graph(Family::Ring { n: 3 });
        let w = with_self_loops(&g, 1.0 / 3.0).unwrap();
        for u in 0..3 {
            for v in 0..3 {
                assert!((w.get(u, v) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn self_loops_reject_irregular() {
        let g = graph(Family::Star { n: 5 });
        assert!(matches!(
            with_self_loops(&g, 0.1).unwrap_err(),
            Error::NotRegular { min: 1, max: 4 }
        ));
    }

    #[test]
    fn validation_flags() {
        let ring = graph(Family::Ring { n: 4 });
        let report = validate(&hamilton_weighting(&ring), &ring);
        assert!(!report.aperiodic);
        assert!(report.symmetric && report.bistochastic && report.stochastic);

        assert!(validate(&with_self_loops(&ring, 0.1).unwrap(), &ring).all_pass());

        let mut bad = hamilton_weighting(&ring).matrix().clone();
        bad[(0, 1)] -= 0.1;
        let report = validate_dense(&bad, &ring);
        assert!(!report.stochastic);
        assert!((report.max_row_violation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stationary_examples() {
        let w = hamilton_weighting(&graph(Family::Hypercube { dim: 3 }));
        let pi = stationary_distribution(&w).unwrap();
        assert!(pi.pi.iter().all(|&p| p == 0.125));

        let two = TransitionMatrix::from_dense(DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75])).unwrap();
        assert!(stationary_distribution(&two).unwrap().pi.iter().all(|&p| p == 0.5));

        let star = hamilton_weighting(&graph(Family::Star { n: 5 }));
        assert!(star.is_bistochastic());
        assert!(stationary_distribution(&star).unwrap().pi.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn stationary_power_iteration() {
        let w = TransitionMatrix::from_dense(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7])).unwrap();
        assert!(!w.is_bistochastic());
        let pi = stationary_distribution(&w).unwrap().pi;
        assert!((pi[0] - 0.75).abs() < 1e-9 && (pi[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let w = with_self_loops(&graph(Family::Ring { n: 5 }), 0.2).unwrap();
        w.export(&path).unwrap();
        let back = TransitionMatrix::import(&path).unwrap();
        assert_eq!(back, w);
    }

    fn connected_graph() -> impl Strategy<Value = Graph> {
        (3usize..=64, any::<u64>()).prop_map(|(n, seed)| {
            let q = (3.0 * (n as f64).ln() / n as f64).min(1.0);
            generate(&GraphSpec::new(Family::ErdosRenyi { n, q }, seed))
                .map(|g| g.graph)
                .unwrap_or_else(|_| graph(Family::Ring { n }))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn hamilton_is_valid(g in connected_graph()) {
            let w = hamilton_weighting(&g);
            let report = validate(&w, &g);
            prop_assert!(report.symmetric && report.bistochastic && report.stochastic);
            prop_assert!(report.support_matches_graph && report.entries_in_unit_interval);
            let ones = DVector::from_element(g.n(), 1.0);
            prop_assert!((w.matrix() * &ones - &ones).amax() <= 1e-10);
        }

        #[test]
        fn self_loop_entries_exact(n in 3usize..40, kappa in 0.0f64..0.99) {
            let g = graph(Family::Ring { n });
            let w = with_self_loops(&g, kappa).unwrap();
            for u in 0..n {
                for v in 0..n {
                    if u != v {
                        let a = if g.has_edge(u, v) { 1.0 } else { 0.0 };
                        prop_assert_eq!(w.get(u, v), (1.0 - kappa) * a / 2.0);
                    }
                }
            }
        }
    }
}
