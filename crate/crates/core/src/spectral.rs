//! Eigendecomposition of symmetric chains and the quantities derived from it:
//! the matrix logarithm term, communicability, Katz centrality and mixing times.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::io::fmt_full;
use crate::transition::{stationary_distribution, TransitionMatrix};

/// Eigenvalues closer to 1 than this count as a missing spectral gap.
pub const GAP_TOL: f64 = 1e-10;

/// Hard cap on the number of steps explored by [`mixing_time_empirical`].
pub const MIXING_CAP: u64 = 1_000_000;

/// Eigenvalues in descending order with orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    w_hash: u64,
}

impl SpectralDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Hash of the matrix this decomposition was computed from.
    pub fn source_hash(&self) -> u64 {
        self.w_hash
    }

    /// Second largest eigenvalue.
    pub fn lambda2(&self) -> f64 {
        if self.n() < 2 {
            f64::NEG_INFINITY
        } else {
            self.eigenvalues[1]
        }
    }

    /// `sum_j weights[j] phi_j phi_j^T`, symmetrized.
    pub fn synthesize(&self, weights: &[f64]) -> DMatrix<f64> {
        assert_eq!(weights.len(), self.n());
        let mut scaled = self.eigenvectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= weights[j];
        }
        let m = scaled * self.eigenvectors.transpose();
        (&m + m.transpose()) * 0.5
    }

    /// `sum_j weights[j] phi_j(u) phi_j(v)` for a single entry.
    pub fn synthesize_entry(&self, weights: &[f64], u: usize, v: usize) -> f64 {
        let phi = &self.eigenvectors;
        (0..self.n()).map(|j| weights[j] * phi[(u, j)] * phi[(v, j)]).sum()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.synthesize(self.eigenvalues.as_slice())
    }

    pub fn orthonormality_error(&self) -> f64 {
        let n = self.n();
        (self.eigenvectors.transpose() * &self.eigenvectors - DMatrix::identity(n, n)).amax()
    }

    /// Spectrum as `index,eigenvalue` CSV (1-based index).
    pub fn spectrum_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue\n");
        for (i, l) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, fmt_full(*l)));
        }
        out
    }
}

/// Full symmetric eigendecomposition; eigenvector signs are fixed so that the
/// first component above 1e-12 in magnitude is positive.
pub fn decompose(w: &TransitionMatrix) -> Result<SpectralDecomposition> {
    if !w.is_symmetric() {
        let m = w.matrix();
        return Err(Error::NotSymmetric {
            max_asymmetry: (m - m.transpose()).amax(),
        });
    }
    let mut sd = decompose_symmetric(w.matrix())?;
    sd.w_hash = w.hash();
    Ok(sd)
}

/// Decomposes any symmetric dense matrix (only the lower triangle is read).
pub fn decompose_symmetric(m: &DMatrix<f64>) -> Result<SpectralDecomposition> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::ShapeMismatch {
            expected: n,
            found: m.ncols(),
        });
    }
    let fm = faer::Mat::<f64>::from_fn(n, n, |i, j| m[(i, j)]);
    let eig = fm
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Eigensolver(format!("{e:?}")))?;
    let s = eig.S().column_vector();
    let u = eig.U();
    // faer returns ascending order.
    let eigenvalues = DVector::from_fn(n, |k, _| s[n - 1 - k]);
    let mut eigenvectors = DMatrix::from_fn(n, n, |i, k| u[(i, n - 1 - k)]);
    for mut col in eigenvectors.column_iter_mut() {
        if let Some(&first) = col.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
    if eigenvalues.iter().any(|x| !x.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
        w_hash: crate::io::matrix_hash(m),
    })
}

/// `1 - max(|lambda_2|, |lambda_n|)`.
pub fn spectral_gap(sd: &SpectralDecomposition) -> f64 {
    let n = sd.n();
    if n < 2 {
        return 1.0;
    }
    1.0 - sd.eigenvalues[1].abs().max(sd.eigenvalues[n - 1].abs())
}

fn require_gap(sd: &SpectralDecomposition) -> Result<()> {
    let l2 = sd.lambda2();
    if l2 >= 1.0 - GAP_TOL {
        return Err(Error::NoSpectralGap { lambda2: l2 });
    }
    Ok(())
}

/// `ln(I - W + 11^T / n)`, built as `sum_{j>=2} ln(1 - lambda_j) phi_j phi_j^T`
/// so the top component is exactly zero.
pub fn matrix_log_term(sd: &SpectralDecomposition) -> Result<DMatrix<f64>> {
    require_gap(sd)?;
    Ok(sd.synthesize(&log_weights(sd)))
}

/// Single entry of [`matrix_log_term`].
pub fn matrix_log_entry(sd: &SpectralDecomposition, u: usize, v: usize) -> Result<f64> {
    require_gap(sd)?;
    Ok(sd.synthesize_entry(&log_weights(sd), u, v))
}

fn log_weights(sd: &SpectralDecomposition) -> Vec<f64> {
    sd.eigenvalues
        .iter()
        .enumerate()
        .map(|(j, &l)| if j == 0 { 0.0 } else { (-l).ln_1p() })
        .collect()
}

/// `sum_{i=1}^{T} lambda^i / i`, stopping once the power underflows.
pub fn harmonic_power_sum(lambda: f64, steps: u64) -> f64 {
    let mut sum = 0.0;
    let mut p = 1.0;
    for i in 1..=steps {
        p *= lambda;
        if p == 0.0 {
            break;
        }
        sum += p / i as f64;
    }
    sum
}

/// Coefficient families `c_i` for communicability series.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    /// `scale / i`.
    Harmonic { scale: f64 },
    /// `a^i`.
    Katz { attenuation: f64 },
    /// `1 / i!`.
    Factorial,
    /// `c_1, c_2, ...`; must be positive and non-increasing. Only finite sums.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Steps(u64),
    Infinite,
}

impl Coefficients {
    fn validate(&self, horizon: Horizon) -> Result<()> {
        match self {
            Coefficients::Harmonic { scale } if !(*scale > 0.0) => {
                Err(invalid(format!("harmonic scale must be positive, got {scale}")))
            }
            Coefficients::Katz { attenuation } if !(*attenuation > 0.0 && *attenuation <= 1.0) => Err(
                invalid(format!("katz attenuation must be in (0, 1], got {attenuation}")),
            ),
            Coefficients::Custom(c) => {
                if c.iter().any(|&x| !(x > 0.0)) || c.windows(2).any(|p| p[1] > p[0]) {
                    return Err(invalid("custom coefficients must be positive and non-increasing"));
                }
                match horizon {
                    Horizon::Infinite => Err(invalid("custom coefficients need a finite horizon")),
                    Horizon::Steps(t) if t as usize > c.len() => Err(invalid(format!(
                        "horizon {t} exceeds the {} custom coefficients",
                        c.len()
                    ))),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    /// `sum_i c_i lambda^i` over the horizon.
    pub fn series(&self, lambda: f64, horizon: Horizon) -> Result<f64> {
        Ok(match (self, horizon) {
            (Coefficients::Harmonic { scale }, Horizon::Steps(t)) => scale * harmonic_power_sum(lambda, t),
            (Coefficients::Harmonic { scale }, Horizon::Infinite) => {
                if lambda >= 1.0 {
                    return Err(Error::Divergent(format!("harmonic series at eigenvalue {lambda}")));
                }
                -scale * (-lambda).ln_1p()
            }
            (Coefficients::Katz { attenuation }, h) => {
                let x = attenuation * lambda;
                match h {
                    Horizon::Steps(t) => {
                        let mut sum = 0.0;
                        let mut p = 1.0;
                        for _ in 0..t {
                            p *= x;
                            if p == 0.0 {
                                break;
                            }
                            sum += p;
                        }
                        sum
                    }
                    Horizon::Infinite => {
                        if x.abs() >= 1.0 {
                            return Err(Error::Divergent(format!("katz series at a*lambda = {x}")));
                        }
                        x / (1.0 - x)
                    }
                }
            }
            (Coefficients::Factorial, Horizon::Steps(t)) => {
                let mut sum = 0.0;
                let mut term = 1.0;
                for i in 1..=t {
                    term *= lambda / i as f64;
                    if term == 0.0 {
                        break;
                    }
                    sum += term;
                }
                sum
            }
            (Coefficients::Factorial, Horizon::Infinite) => lambda.exp_m1(),
            (Coefficients::Custom(c), Horizon::Steps(t)) => {
                let mut sum = 0.0;
                let mut p = 1.0;
                for &ci in &c[..t as usize] {
                    p *= lambda;
                    sum += ci * p;
                }
                sum
            }
            (Coefficients::Custom(_), Horizon::Infinite) => unreachable!("rejected by validate"),
        })
    }
}

/// `sum_i c_i (W - 11^T/n)^i`, evaluated on the spectrum without the top
/// eigenvector.
pub fn communicability(
    sd: &SpectralDecomposition,
    coeffs: &Coefficients,
    horizon: Horizon,
) -> Result<DMatrix<f64>> {
    coeffs.validate(horizon)?;
    let mut weights = vec![0.0; sd.n()];
    for (j, &l) in sd.eigenvalues.iter().enumerate().skip(1) {
        weights[j] = coeffs.series(l, horizon)?;
    }
    Ok(sd.synthesize(&weights))
}

/// Row sums of `sum_{i>=1} a^i W^i`, i.e. the solution of `(I - aW) x = aW1`.
pub fn katz_centrality(w: &TransitionMatrix, attenuation: f64) -> Result<DVector<f64>> {
    // Row-stochastic matrices have spectral radius 1.
    if !(0.0..1.0).contains(&attenuation) {
        return Err(Error::Divergent(format!(
            "katz attenuation {attenuation} must lie in [0, 1) for a stochastic matrix"
        )));
    }
    let n = w.n();
    let m = w.matrix();
    let rhs = m * DVector::from_element(n, attenuation);
    let a = DMatrix::identity(n, n) - m * attenuation;
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Divergent("singular Katz system".into()))
}

/// `ceil(ln(1 / min_v pi_v) / gap)`.
pub fn mixing_time_spectral_bound(w: &TransitionMatrix) -> Result<u64> {
    let sd = decompose(w)?;
    let gap = spectral_gap(&sd);
    if gap <= GAP_TOL {
        return Err(Error::NoSpectralGap { lambda2: sd.lambda2() });
    }
    let pi_min = stationary_distribution(w)?.min();
    Ok(((1.0 / pi_min).ln() / gap).ceil() as u64)
}

/// Worst-case total-variation distance `max_v ||(W^t)_v - pi||_TV` at `t`.
pub fn worst_tv_distance(w: &TransitionMatrix, t: u64) -> Result<f64> {
    let pi = stationary_distribution(w)?.pi;
    let n = w.n();
    let mut p = DMatrix::<f64>::identity(n, n);
    for _ in 0..t {
        p = &p * w.matrix();
    }
    Ok(max_row_tv(&p, &pi))
}

fn max_row_tv(p: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    p.row_iter()
        .map(|r| 0.5 * r.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Smallest `t` with worst-case TV distance at most `iota`.
pub fn mixing_time_empirical(w: &TransitionMatrix, iota: f64) -> Result<u64> {
    if !(iota > 0.0 && iota < 1.0) {
        return Err(invalid(format!("iota must be in (0, 1), got {iota}")));
    }
    let pi = stationary_distribution(w)?.pi;
    let n = w.n();
    let mut p = DMatrix::<f64>::identity(n, n);
    for t in 0..=MIXING_CAP {
        if max_row_tv(&p, &pi) <= iota {
            return Ok(t);
        }
        p = &p * w.matrix();
    }
    Err(Error::NonConvergence {
        iterations: MIXING_CAP,
    })
}
