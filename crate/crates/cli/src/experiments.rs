//! Experiment building blocks shared by the `sgd` presets and the
//! acceptance suite.

use std::path::PathBuf;

use serde::Serialize;
use tokenwalk::accountant::{
    calibrate_local, calibrate_sigma, Accountant, AlphaChoice, Calibration, DpPoint, Method, PrivacyParams, Statistic,
};
use tokenwalk::datasets::{
    load_csv, preprocess, synth_gaussian_values, synth_heterogeneous_geometric, synth_linear, Dataset,
    PreprocessOptions,
};
use tokenwalk::graphs::{generate, Family, Graph, GraphSpec};
use tokenwalk::optim::{
    sgd_error_bound, run_central_dpsgd, run_local_dpsgd, run_rw_dpsgd, auto_step_size, BoundInputs,
    Objective, RunRecord, SgdConfig,
};
use tokenwalk::spectral::{mixing_time_empirical, mixing_time_spectral_bound};
use tokenwalk::transition::{hamilton_weighting, with_self_loops, TransitionMatrix};

use crate::config::DataSource;
use crate::error::{self, CliError};

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "TOKENWALK_DATA_DIR";

/// Hamilton chain, with `kappa` self-loop mass when given: the uniform
/// self-loop chain on regular graphs, a blend with the identity otherwise.
pub fn transition_for(g: &Graph, kappa: Option<f64>) -> tokenwalk::Result<TransitionMatrix> {
    match kappa {
        None => Ok(hamilton_weighting(g)),
        Some(k) if g.is_regular().is_some() => with_self_loops(g, k),
        Some(k) => hamilton_weighting(g).blend(k),
    }
}

/// Mixing time fed to the step-size rule: empirical at 1/4 for small chains,
/// the spectral bound beyond 256 nodes.
pub fn tau_mix(w: &TransitionMatrix) -> tokenwalk::Result<u64> {
    if w.n() <= 256 {
        mixing_time_empirical(w, 0.25)
    } else {
        mixing_time_spectral_bound(w)
    }
}

// ---------------------------------------------------------------------------
// Averaging

#[derive(Debug, Clone, Serialize)]
pub struct AveragingOptions {
    pub n: usize,
    pub kappa: f64,
    pub steps: u64,
    /// Scalar start; far from the mean so the step-size rule's log branch is active.
    pub x0: f64,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub trace_points: u64,
}

impl Default for AveragingOptions {
    fn default() -> Self {
        AveragingOptions {
            n: 32,
            kappa: 1.0 / 3.0,
            steps: 50_000,
            x0: 100.0,
            data_seed: 42,
            seeds: (0..10).collect(),
            trace_points: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AveragingReport {
    pub values_variance: f64,
    pub mean: f64,
    pub tau_mix: u64,
    pub zeta_star: f64,
    pub dist0: f64,
    pub step_size: f64,
    pub bound: f64,
    pub threshold: f64,
    pub sq_errors: Vec<f64>,
    pub mean_sq_error: f64,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
}

/// Non-private RW-SGD on `f_v(x) = (x - y_v)^2` over a ring with the Auto
/// step size, one run per seed.
pub fn averaging_suite(opts: &AveragingOptions) -> tokenwalk::Result<AveragingReport> {
    let g = generate(&GraphSpec::new(Family::Ring { n: opts.n }, 0))?.graph;
    let w = transition_for(&g, Some(opts.kappa))?;
    let values = synth_gaussian_values(opts.n, opts.data_seed);
    let mean = values.iter().sum::<f64>() / opts.n as f64;
    let values_variance = values.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / opts.n as f64;
    let obj = Objective::averaging_scalars(&values)?;
    let tau = tau_mix(&w)?;
    let zeta = obj.zeta_star().expect("averaging optimum is known");
    let (l, mu) = (obj.smoothness(), obj.strong_convexity());
    let dist0 = (opts.x0 - mean).powi(2);
    let gamma = auto_step_size(l, mu, opts.steps, dist0, tau as f64, zeta);
    let bound = sgd_error_bound(&BoundInputs {
        l,
        mu,
        steps: opts.steps,
        dist0,
        tau_mix: tau as f64,
        zeta_star: zeta,
        dim: 1,
        sigma: 0.0,
        delta_sens: 1.0,
        sigma_sgd: 0.0,
    });
    let mut records = Vec::with_capacity(opts.seeds.len());
    for &seed in &opts.seeds {
        let mut cfg = SgdConfig::new(opts.steps, gamma, seed);
        cfg.x0 = Some(vec![opts.x0]);
        cfg.trace_stride = (opts.steps / opts.trace_points.max(1)).max(1);
        records.push(run_rw_dpsgd(&w, &obj, &cfg)?);
    }
    let sq_errors: Vec<f64> = records.iter().map(|r| (r.final_x[0] - mean).powi(2)).collect();
    let mean_sq_error = sq_errors.iter().sum::<f64>() / sq_errors.len().max(1) as f64;
    Ok(AveragingReport {
        values_variance,
        mean,
        tau_mix: tau,
        zeta_star: zeta,
        dist0,
        step_size: gamma,
        bound,
        threshold: 1e-2 * values_variance,
        sq_errors,
        mean_sq_error,
        records,
    })
}

// ---------------------------------------------------------------------------
// Private logistic regression

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    RandomWalk,
    Local,
    Central,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RandomWalk => "rw",
            Algorithm::Local => "local",
            Algorithm::Central => "central",
        }
    }
}

/// Defaults follow the documented guesses: batch 1, clip 1, `T = 10 n`.
#[derive(Debug, Clone, Serialize)]
pub struct LogisticOptions {
    pub steps_per_node: u64,
    /// `None` uses `1 / L`.
    pub step_size: Option<f64>,
    pub clip: f64,
    pub minibatch: usize,
    pub l2: f64,
    pub target: DpPoint,
    /// Fixed noise multiplier instead of calibration.
    pub sigma: Option<f64>,
    pub method: Method,
    pub trace_points: u64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            steps_per_node: 10,
            step_size: None,
            clip: 1.0,
            minibatch: 1,
            l2: 0.0,
            target: DpPoint {
                epsilon: 1.0,
                delta: 1e-6,
            },
            sigma: None,
            method: Method::Closed,
            trace_points: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LogisticRun {
    pub algorithm: Algorithm,
    pub graph: Option<String>,
    pub seed: u64,
    pub sigma: f64,
    pub calibration: Option<Calibration>,
    pub accuracy: f64,
    pub objective: f64,
    #[serde(skip)]
    pub record: RunRecord,
}

/// Calibrates the random-walk noise so the mean pairwise loss meets `target`.
pub fn calibrate_walk(w: &TransitionMatrix, steps: u64, target: DpPoint, method: Method) -> tokenwalk::Result<Calibration> {
    calibrate_walk_with(&Accountant::new(w.clone())?, steps, target, method)
}

pub fn calibrate_walk_with(acc: &Accountant, steps: u64, target: DpPoint, method: Method) -> tokenwalk::Result<Calibration> {
    let template = PrivacyParams::new(2.0, 1.0, steps);
    calibrate_sigma(acc, &template, method, target, Statistic::MeanPairs, &AlphaChoice::Optimal, None)
}

/// One private logistic-regression run. `w` is required for the random walk.
pub fn run_logistic(
    algorithm: Algorithm,
    w: Option<&TransitionMatrix>,
    data: &Dataset,
    opts: &LogisticOptions,
    seed: u64,
) -> tokenwalk::Result<LogisticRun> {
    let obj = Objective::logistic(data.clone(), opts.l2)?;
    let n = obj.n();
    let steps = opts.steps_per_node * n as u64;
    let gamma = opts.step_size.unwrap_or_else(|| 1.0 / obj.smoothness());
    let (calibration, rounds) = match algorithm {
        Algorithm::RandomWalk => {
            let w = w.ok_or_else(|| tokenwalk::Error::InvalidParameter("random walk needs a transition matrix".into()))?;
            let cal = match opts.sigma {
                Some(_) => None,
                None => Some(calibrate_walk(w, steps, opts.target, opts.method)?),
            };
            (cal, steps)
        }
        // Each node releases steps/n noisy gradients on average.
        Algorithm::Local => (
            opts.sigma.is_none().then(|| calibrate_local(steps as f64 / n as f64, opts.target)).transpose()?,
            steps,
        ),
        // One release per round for every node.
        Algorithm::Central => (
            opts.sigma
                .is_none()
                .then(|| calibrate_local(opts.steps_per_node as f64, opts.target))
                .transpose()?,
            opts.steps_per_node,
        ),
    };
    let sigma = opts.sigma.unwrap_or_else(|| calibration.expect("calibrated").sigma2.sqrt());
    let mut cfg = SgdConfig::new(rounds, gamma, seed);
    cfg.sigma = sigma;
    cfg.clip = opts.clip;
    cfg.minibatch = opts.minibatch;
    cfg.trace_stride = (rounds / opts.trace_points.max(1)).max(1);
    let record = match algorithm {
        Algorithm::RandomWalk => run_rw_dpsgd(w.expect("checked above"), &obj, &cfg)?,
        Algorithm::Local => run_local_dpsgd(&obj, &cfg)?,
        Algorithm::Central => run_central_dpsgd(&obj, &cfg)?,
    };
    Ok(LogisticRun {
        algorithm,
        graph: None,
        seed,
        sigma,
        calibration,
        accuracy: record.final_accuracy().unwrap_or(f64::NAN),
        objective: *record.objective.last().expect("initial point recorded"),
        record,
    })
}

/// Resolves a data source into a preprocessed dataset over `n` nodes.
/// A missing Houses file is a data error carrying fetch instructions.
pub fn load_dataset(src: &DataSource, n: usize, seed: u64) -> Result<Dataset, CliError> {
    match src {
        DataSource::Synthetic { per_user, dim, margin } => {
            synth_linear(n, *per_user, *dim, *margin, seed).map_err(error::cfg)
        }
        DataSource::Houses { path, label_column } => {
            let path = houses_path(path.as_ref())?;
            let raw = load_csv(&path, label_column).map_err(error::data)?;
            preprocess(&raw, &PreprocessOptions::new(n), seed).map_err(error::data)
        }
    }
}

fn houses_path(explicit: Option<&PathBuf>) -> Result<PathBuf, CliError> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join("houses.csv"),
            None => {
                return Err(CliError::data(format!(
                    "Houses dataset not configured: set {DATA_DIR_ENV} to a directory containing houses.csv \
                     (fetch it with scripts/fetch_houses.sh) or pass --data, or use --dataset synthetic"
                )))
            }
        },
    };
    if !path.is_file() {
        return Err(CliError::data(format!(
            "Houses dataset not found at {}; fetch it with `scripts/fetch_houses.sh <dir>` and set {DATA_DIR_ENV}=<dir>, \
             or use --dataset synthetic",
            path.display()
        )));
    }
    Ok(path)
}

/// Graphs of the logistic presets at `n` nodes (`n` a power of two for the
/// hypercube; the grid takes the most square factorization).
pub fn preset_family(name: &str, n: usize) -> Result<Family, CliError> {
    Ok(match name {
        "complete" => Family::Complete { n },
        "hypercube" | "exponential" => {
            if !n.is_power_of_two() {
                return Err(CliError::config(format!("hypercube needs a power-of-two n, got {n}")));
            }
            Family::Hypercube {
                dim: n.trailing_zeros(),
            }
        }
        "geometric" => Family::Geometric { n, radius: None },
        "grid" => {
            let mut rows = (n as f64).sqrt() as usize;
            while rows > 1 && !n.is_multiple_of(rows) {
                rows -= 1;
            }
            Family::Grid2d { rows, cols: n / rows }
        }
        other => return Err(CliError::config(format!("unknown preset graph {other:?}"))),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Mean and sample standard deviation.
pub fn summarize(xs: &[f64]) -> Summary {
    let count = xs.len();
    let mean = xs.iter().sum::<f64>() / count.max(1) as f64;
    let std = if count > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, count }
}

/// Central, random-walk (on each graph) and local runs for one seed, all
/// on the same data draw.
pub fn comparison_seed(
    graphs: &[&str],
    src: &DataSource,
    n: usize,
    opts: &LogisticOptions,
    seed: u64,
) -> Result<Vec<LogisticRun>, CliError> {
    let data = load_dataset(src, n, seed)?;
    let mut runs = Vec::new();
    runs.push(run_logistic(Algorithm::Central, None, &data, opts, seed).map_err(error::acct)?);
    for name in graphs {
        let g = generate(&GraphSpec::new(preset_family(name, n)?, seed)).map_err(error::cfg)?.graph;
        let w = hamilton_weighting(&g);
        let mut run = run_logistic(Algorithm::RandomWalk, Some(&w), &data, opts, seed).map_err(error::acct)?;
        run.graph = Some((*name).to_string());
        runs.push(run);
    }
    runs.push(run_logistic(Algorithm::Local, None, &data, opts, seed).map_err(error::acct)?);
    Ok(runs)
}

// ---------------------------------------------------------------------------
// Heterogeneity

#[derive(Debug, Clone, Serialize)]
pub struct HeterogeneityOptions {
    pub n: usize,
    pub per_node: usize,
    pub steps_per_node: u64,
    pub sigma: f64,
    pub seeds: Vec<u64>,
}

impl Default for HeterogeneityOptions {
    fn default() -> Self {
        HeterogeneityOptions {
            n: 200,
            per_node: 8,
            steps_per_node: 20,
            sigma: 0.0,
            seeds: (0..5).collect(),
        }
    }
}

/// Non-private (by default) RW-SGD on position-dependent labels and on the
/// same graph with labels shuffled.
pub fn heterogeneity_runs(opts: &HeterogeneityOptions, seed: u64) -> tokenwalk::Result<[RunRecord; 2]> {
    let g = generate(&GraphSpec::new(Family::Geometric { n: opts.n, radius: None }, seed))?.graph;
    let w = hamilton_weighting(&g);
    let run = |shuffled: bool| -> tokenwalk::Result<RunRecord> {
        let data = synth_heterogeneous_geometric(&g, opts.per_node, seed, shuffled)?;
        let obj = Objective::logistic(data, 0.0)?;
        let steps = opts.steps_per_node * opts.n as u64;
        let mut cfg = SgdConfig::new(steps, 1.0 / obj.smoothness(), seed);
        cfg.sigma = opts.sigma;
        cfg.clip = 1.0;
        cfg.trace_stride = (steps / 200).max(1);
        run_rw_dpsgd(&w, &obj, &cfg)
    };
    Ok([run(false)?, run(true)?])
}
