//! Private SGD along the token walk, its local and central baselines, and the
//! step size and error bound for strongly convex objectives.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{invalid, Result};
use crate::io::{fmt_full, write_atomic};
use crate::rng::{counter_rng, streams};
use crate::transition::TransitionMatrix;
use crate::walk::{simulate, StepRole};

/// Constant of the error bound: `3 * C` with `C = 13`.
pub const BOUND_CONSTANT: f64 = 39.0;

#[derive(Debug, Clone)]
pub enum ObjectiveKind {
    /// `f_v(x) = ||x - y_v||^2`; `values` holds one `y_v` per node.
    Averaging { values: Vec<DVector<f64>> },
    /// Regularized logistic loss over each node's block of `data`.
    Logistic { data: Dataset, l2: f64 },
}

#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: ObjectiveKind,
    optimum: Option<DVector<f64>>,
}

impl Objective {
    pub fn averaging(values: Vec<DVector<f64>>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("averaging needs at least one node"));
        }
        let d = values[0].len();
        if values.iter().any(|y| y.len() != d) {
            return Err(invalid("averaging values must share one dimension"));
        }
        let mean = values.iter().fold(DVector::zeros(d), |acc, y| acc + y) / values.len() as f64;
        Ok(Objective {
            kind: ObjectiveKind::Averaging { values },
            optimum: Some(mean),
        })
    }

    /// Scalar values, one per node.
    pub fn averaging_scalars(values: &[f64]) -> Result<Self> {
        Self::averaging(values.iter().map(|&y| DVector::from_element(1, y)).collect())
    }

    /// `l2 > 0` makes the objective strongly convex; the optimum is computed
    /// with [`Objective::solve_reference`] on demand.
    pub fn logistic(data: Dataset, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0) {
            return Err(invalid(format!("l2 must be >= 0, got {l2}")));
        }
        if data.partition.iter().any(Vec::is_empty) {
            return Err(invalid("every node needs at least one training row"));
        }
        Ok(Objective {
            kind: ObjectiveKind::Logistic { data, l2 },
            optimum: None,
        })
    }

    pub fn n(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Averaging { values } => values.len(),
            ObjectiveKind::Logistic { data, .. } => data.n_nodes(),
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ObjectiveKind::Averaging { values } => values[0].len(),
            ObjectiveKind::Logistic { data, .. } => data.dim(),
        }
    }

    /// Smoothness constant `L`. For logistic loss on rows of norm at most 1
    /// it is `1/4 + l2`.
    pub fn smoothness(&self) -> f64 {
        match &self.kind {
            ObjectiveKind::Averaging { .. } => 2.0,
            ObjectiveKind::Logistic { data, l2 } => {
                let r2 = data
                    .train
                    .iter()
                    .map(|&i| data.features.row(i).norm_squared())
                    .fold(0.0, f64::max);
                0.25 * r2 + l2
            }
        }
    }

    /// Strong convexity constant `mu`.
    pub fn strong_convexity(&self) -> f64 {
        match &self.kind {
            ObjectiveKind::Averaging { .. } => 2.0,
            ObjectiveKind::Logistic { l2, .. } => *l2,
        }
    }

    pub fn optimum(&self) -> Option<&DVector<f64>> {
        self.optimum.as_ref()
    }

    /// Full local gradient of `f_v` at `x`.
    pub fn local_gradient(&self, v: usize, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ObjectiveKind::Averaging { values } => (x - &values[v]) * 2.0,
            ObjectiveKind::Logistic { data, l2 } => {
                let rows = &data.partition[v];
                let mut g = DVector::zeros(x.len());
                for &i in rows {
                    g += logistic_sample_gradient(data, i, x);
                }
                g / rows.len() as f64 + x * *l2
            }
        }
    }

    /// Unbiased estimate of the local gradient: `batch` rows drawn uniformly
    /// with replacement from the node's data. Averaging always returns the
    /// exact gradient.
    pub fn stochastic_gradient(&self, v: usize, x: &DVector<f64>, batch: usize, rng: &mut impl Rng) -> DVector<f64> {
        match &self.kind {
            ObjectiveKind::Averaging { .. } => self.local_gradient(v, x),
            ObjectiveKind::Logistic { data, l2 } => {
                let rows = &data.partition[v];
                let b = batch.max(1);
                let mut g = DVector::zeros(x.len());
                for _ in 0..b {
                    let i = rows[rng.random_range(0..rows.len())];
                    g += logistic_sample_gradient(data, i, x);
                }
                g / b as f64 + x * *l2
            }
        }
    }

    /// `(1/n) sum_v f_v(x)`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            ObjectiveKind::Averaging { values } => {
                values.iter().map(|y| (x - y).norm_squared()).sum::<f64>() / values.len() as f64
            }
            ObjectiveKind::Logistic { data, l2 } => {
                let per_node: f64 = data
                    .partition
                    .iter()
                    .map(|rows| rows.iter().map(|&i| logistic_sample_loss(data, i, x)).sum::<f64>() / rows.len() as f64)
                    .sum();
                per_node / data.n_nodes() as f64 + 0.5 * l2 * x.norm_squared()
            }
        }
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        (0..n).fold(DVector::zeros(x.len()), |acc, v| acc + self.local_gradient(v, x)) / n as f64
    }

    pub fn test_accuracy(&self, x: &DVector<f64>) -> Option<f64> {
        match &self.kind {
            ObjectiveKind::Averaging { .. } => None,
            ObjectiveKind::Logistic { data, .. } => Some(data.test_accuracy(x)),
        }
    }

    /// Runs full-batch gradient descent with step `1/L` until the gradient
    /// norm drops below `tol`, and stores the result as the optimum.
    pub fn solve_reference(&mut self, max_iters: usize, tol: f64) -> &DVector<f64> {
        if self.optimum.is_none() {
            let step = 1.0 / self.smoothness();
            let mut x = DVector::zeros(self.dim());
            for _ in 0..max_iters {
                let g = self.gradient(&x);
                if g.norm() < tol {
                    break;
                }
                x -= g * step;
            }
            self.optimum = Some(x);
        }
        self.optimum.as_ref().expect("set above")
    }

    /// `max_v ||grad f_v(x*)||`, when the optimum is known.
    pub fn zeta_star(&self) -> Option<f64> {
        let x = self.optimum.as_ref()?;
        Some((0..self.n()).map(|v| self.local_gradient(v, x).norm()).fold(0.0, f64::max))
    }
}

fn logistic_sample_gradient(data: &Dataset, i: usize, x: &DVector<f64>) -> DVector<f64> {
    let a = data.features.row(i).transpose();
    let y = data.labels[i];
    let z = y * a.dot(x);
    // d/dx log(1 + exp(-z)) = -y a sigmoid(-z)
    let s = 1.0 / (1.0 + z.exp());
    a * (-y * s)
}

fn logistic_sample_loss(data: &Dataset, i: usize, x: &DVector<f64>) -> f64 {
    let z = data.labels[i] * data.features.row(i).dot(&x.transpose());
    // log(1 + exp(-z)), stable for both signs.
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Rescales `g` onto the ball of radius `delta`.
pub fn clip(g: &DVector<f64>, delta: f64) -> DVector<f64> {
    let norm = g.norm();
    if norm <= delta || norm == 0.0 {
        g.clone()
    } else {
        g * (delta / norm)
    }
}

/// `min(1/L, ln(T dist0 mu^2 / (39 L tau zeta^2)) / (T mu))`, falling back to
/// `1/L` when `zeta = 0` or the logarithm is not positive.
pub fn auto_step_size(l: f64, mu: f64, steps: u64, dist0: f64, tau_mix: f64, zeta_star: f64) -> f64 {
    let base = 1.0 / l;
    let t = steps as f64;
    let denom = BOUND_CONSTANT * l / (mu * mu) * tau_mix * zeta_star * zeta_star;
    if !(zeta_star > 0.0) || !(denom > 0.0) {
        return base;
    }
    let log = (t * dist0 / denom).ln();
    if !(log > 0.0) {
        return base;
    }
    base.min(log / (t * mu))
}

/// Inputs of [`sgd_error_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub l: f64,
    pub mu: f64,
    pub steps: u64,
    pub dist0: f64,
    pub tau_mix: f64,
    pub zeta_star: f64,
    pub dim: usize,
    pub sigma: f64,
    pub delta_sens: f64,
    pub sigma_sgd: f64,
}

/// `2 e^{-T mu / L} dist0 + (39 tau zeta^2 L / (mu^3 T) + (d sigma^2 Delta^2 + sigma_sgd^2) L / (mu^2 T))
/// * ln(T mu^2 dist0 / (39 L tau zeta^2))`.
///
/// When the logarithm is not positive the step size falls back to `1/L`, and
/// the factor it stands for (`T mu gamma`) becomes `T mu / L`.
pub fn sgd_error_bound(b: &BoundInputs) -> f64 {
    let t = b.steps as f64;
    let head = 2.0 * (-t * b.mu / b.l).exp() * b.dist0;
    let zeta2 = b.zeta_star * b.zeta_star;
    let drift = BOUND_CONSTANT * b.tau_mix * zeta2 * b.l / (b.mu.powi(3) * t);
    let noise = (b.dim as f64 * b.sigma * b.sigma * b.delta_sens * b.delta_sens + b.sigma_sgd * b.sigma_sgd) * b.l
        / (b.mu * b.mu * t);
    let arg = t * b.mu * b.mu * b.dist0 / (BOUND_CONSTANT * b.l * b.tau_mix * zeta2);
    let log = if arg > 1.0 && arg.is_finite() { arg.ln() } else { t * b.mu / b.l };
    let tail = drift + noise;
    head + if tail == 0.0 { 0.0 } else { tail * log }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `gamma / (k + 1)` at the k-th update.
    InverseT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    /// Number of updates `T` (burn-in steps come on top).
    pub steps: u64,
    pub step_size: f64,
    /// Noise multiplier: per-coordinate noise is `N(0, clip^2 sigma^2)`.
    pub sigma: f64,
    /// Clip threshold `Delta`; `f64::INFINITY` disables clipping.
    pub clip: f64,
    pub schedule: Schedule,
    pub burn_in: u64,
    pub seed: u64,
    pub cap: Option<u64>,
    pub minibatch: usize,
    pub start_node: usize,
    pub x0: Option<Vec<f64>>,
    /// Record every `trace_stride` updates (and the last one).
    pub trace_stride: u64,
}

impl SgdConfig {
    pub fn new(steps: u64, step_size: f64, seed: u64) -> Self {
        SgdConfig {
            steps,
            step_size,
            sigma: 0.0,
            clip: f64::INFINITY,
            schedule: Schedule::Constant,
            burn_in: 0,
            seed,
            cap: None,
            minibatch: 1,
            start_node: 0,
            x0: None,
            trace_stride: (steps / 100).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("step size must be finite and >= 0, got {}", self.step_size)));
        }
        if !(self.clip > 0.0) {
            return Err(invalid(format!("clip threshold must be > 0, got {}", self.clip)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(invalid(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        if self.trace_stride == 0 {
            return Err(invalid("trace stride must be positive"));
        }
        Ok(())
    }

    fn noise_std(&self) -> f64 {
        if self.sigma == 0.0 {
            0.0
        } else {
            self.clip * self.sigma
        }
    }

    fn gamma(&self, k: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.step_size,
            Schedule::InverseT => self.step_size / (k + 1) as f64,
        }
    }

    fn start(&self, d: usize) -> Result<DVector<f64>> {
        match &self.x0 {
            None => Ok(DVector::zeros(d)),
            Some(x) if x.len() == d => Ok(DVector::from_column_slice(x)),
            Some(x) => Err(invalid(format!("x0 has dimension {}, expected {d}", x.len()))),
        }
    }
}

/// Gaussian noise vector for update `t` of a run.
pub fn draw_noise(seed: u64, t: u64, dim: usize, std: f64) -> DVector<f64> {
    if std == 0.0 {
        return DVector::zeros(dim);
    }
    let mut rng = counter_rng(seed, streams::NOISE, t);
    DVector::from_fn(dim, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub algorithm: String,
    /// Update index of each trace row.
    pub t: Vec<u64>,
    pub iterates: Vec<Vec<f64>>,
    pub objective: Vec<f64>,
    pub sq_distance: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub final_x: Vec<f64>,
    pub stride: u64,
    pub seed: u64,
    /// Hash of the transition matrix for walk-based runs.
    pub w_hash: Option<String>,
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.last().copied().flatten()
    }

    pub fn final_sq_distance(&self) -> Option<f64> {
        self.sq_distance.last().copied().flatten()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,objective,sq_distance,accuracy\n");
        for k in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.t[k],
                fmt_full(self.objective[k]),
                self.sq_distance[k].map(fmt_full).unwrap_or_default(),
                self.accuracy[k].map(fmt_full).unwrap_or_default()
            ));
        }
        out
    }

    /// Writes `<stem>.csv` and a `<stem>.json` header with stride and seed.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        let header = serde_json::json!({
            "algorithm": self.algorithm,
            "stride": self.stride,
            "rows": self.t.len(),
            "seed": self.seed,
            "w_hash": self.w_hash,
            "final_x": self.final_x,
        });
        write_atomic(
            &dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&header)?.as_bytes(),
        )
    }
}

struct Recorder<'a> {
    obj: &'a Objective,
    rec: RunRecord,
}

impl<'a> Recorder<'a> {
    fn new(obj: &'a Objective, algorithm: &str, cfg: &SgdConfig) -> Self {
        Recorder {
            obj,
            rec: RunRecord {
                algorithm: algorithm.to_string(),
                t: Vec::new(),
                iterates: Vec::new(),
                objective: Vec::new(),
                sq_distance: Vec::new(),
                accuracy: Vec::new(),
                final_x: Vec::new(),
                stride: cfg.trace_stride,
                seed: cfg.seed,
                w_hash: None,
                wall_clock_s: 0.0,
            },
        }
    }

    fn record(&mut self, k: u64, x: &DVector<f64>) {
        self.rec.t.push(k);
        self.rec.iterates.push(x.as_slice().to_vec());
        self.rec.objective.push(self.obj.value(x));
        self.rec.sq_distance.push(self.obj.optimum().map(|o| (x - o).norm_squared()));
        self.rec.accuracy.push(self.obj.test_accuracy(x));
    }

    fn finish(mut self, x: DVector<f64>, started: Instant) -> RunRecord {
        self.rec.final_x = x.as_slice().to_vec();
        self.rec.wall_clock_s = started.elapsed().as_secs_f64();
        self.rec
    }
}

/// Shared update loop: `node(k)` gives the node acting at update `k`,
/// `role(k)` whether it updates or only adds noise.
fn run_loop(
    obj: &Objective,
    cfg: &SgdConfig,
    algorithm: &str,
    node: impl Fn(u64) -> usize,
    role: impl Fn(u64) -> StepRole,
) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let d = obj.dim();
    let mut x = cfg.start(d)?;
    let mut rec = Recorder::new(obj, algorithm, cfg);
    rec.record(0, &x);
    let std = cfg.noise_std();
    for k in 0..cfg.steps {
        let gamma = cfg.gamma(k);
        let noise = draw_noise(cfg.seed, k, d, std);
        match role(k) {
            StepRole::Update => {
                let mut rng = counter_rng(cfg.seed, streams::MINIBATCH, k);
                let g = obj.stochastic_gradient(node(k), &x, cfg.minibatch, &mut rng);
                x -= (clip(&g, cfg.clip) + noise) * gamma;
            }
            StepRole::NoiseOnly => x -= noise * gamma,
            StepRole::BurnIn => {}
        }
        if (k + 1) % cfg.trace_stride == 0 || k + 1 == cfg.steps {
            rec.record(k + 1, &x);
        }
    }
    Ok(rec.finish(x, started))
}

/// Private random-walk SGD: the token walks `burn_in + T` steps on `W`; at
/// each post-burn-in position the current node clips its stochastic
/// gradient, adds `N(0, clip^2 sigma^2)` noise per coordinate and updates.
/// Nodes over their contribution cap only add noise.
pub fn run_rw_dpsgd(w: &TransitionMatrix, obj: &Objective, cfg: &SgdConfig) -> Result<RunRecord> {
    if w.n() != obj.n() {
        return Err(crate::Error::ShapeMismatch {
            expected: obj.n(),
            found: w.n(),
        });
    }
    let burn = cfg.burn_in as usize;
    let total = burn + cfg.steps as usize;
    let mut traj = simulate(w, cfg.start_node, total, cfg.seed)?;
    traj.assign_roles(w.n(), burn, cfg.cap);
    let nodes = &traj.nodes[burn..];
    let roles = &traj.roles[burn..];
    let mut rec = run_loop(obj, cfg, "rw", |k| nodes[k as usize], |k| roles[k as usize])?;
    rec.w_hash = Some(format!("{:016x}", w.hash()));
    Ok(rec)
}

/// Same loop with the acting node drawn uniformly at each update. Calibrate
/// `cfg.sigma` with the local-DP accountant before calling.
pub fn run_local_dpsgd(obj: &Objective, cfg: &SgdConfig) -> Result<RunRecord> {
    let n = obj.n();
    let seed = cfg.seed;
    let cap = cfg.cap;
    let schedule: Vec<usize> = (0..cfg.steps)
        .map(|k| counter_rng(seed, streams::SCHEDULE, k).random_range(0..n))
        .collect();
    let mut used = vec![0u64; n];
    let roles: Vec<StepRole> = schedule
        .iter()
        .map(|&v| {
            used[v] += 1;
            match cap {
                Some(c) if used[v] > c => StepRole::NoiseOnly,
                _ => StepRole::Update,
            }
        })
        .collect();
    run_loop(obj, cfg, "local", |k| schedule[k as usize], |k| roles[k as usize])
}

/// Trusted aggregator: each round averages the clipped stochastic gradients
/// of all `n` nodes and adds one `N(0, clip^2 sigma^2 / n^2)` draw per
/// coordinate. `cfg.steps` counts rounds.
pub fn run_central_dpsgd(obj: &Objective, cfg: &SgdConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let n = obj.n();
    let d = obj.dim();
    let mut x = cfg.start(d)?;
    let mut rec = Recorder::new(obj, "central", cfg);
    rec.record(0, &x);
    let std = cfg.noise_std() / n as f64;
    for k in 0..cfg.steps {
        let mut rng = counter_rng(cfg.seed, streams::MINIBATCH, k);
        let mut avg = DVector::zeros(d);
        for v in 0..n {
            avg += clip(&obj.stochastic_gradient(v, &x, cfg.minibatch, &mut rng), cfg.clip);
        }
        avg /= n as f64;
        x -= (avg + draw_noise(cfg.seed, k, d, std)) * cfg.gamma(k);
        if (k + 1) % cfg.trace_stride == 0 || k + 1 == cfg.steps {
            rec.record(k + 1, &x);
        }
    }
    Ok(rec.finish(x, started))
}
