//! Subcommand definitions and handlers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use tokenwalk::accountant::{
    calibrate_local, calibrate_sigma, distance_series_csv, local_dp_baseline, mean_loss_by_distance, rdp_to_dp,
    read_overlay_csv, Accountant, AlphaChoice, Contributions, DistanceBucket, DpPoint, Method, PrivacyParams,
    Statistic,
};
use tokenwalk::graphs::{
    erdos_renyi_q, export_graph, generate, shortest_path_distances, Family, GeneratedGraph, GraphSpec,
};
use tokenwalk::io::{fmt_full, matrix_to_csv};
use tokenwalk::spectral::{decompose, spectral_gap};
use tokenwalk::transition::TransitionMatrix;

use crate::config::{
    CalibrationStanza, DataSource, ExperimentConfig, Kappa, KappaRule, Preset, PrivacyStanza, SgdStanza,
};
use crate::error::{self, CliError};
use crate::experiments::{
    averaging_suite, calibrate_walk_with, comparison_seed, heterogeneity_runs, preset_family, run_logistic,
    summarize, transition_for, Algorithm, AveragingOptions, HeterogeneityOptions, LogisticOptions, LogisticRun,
};
use crate::manifest::Outputs;

#[derive(Debug, Parser)]
#[command(name = "tokenwalk", version, about = "Pairwise privacy accounting and random-walk DP-SGD experiments")]
pub struct Cli {
    /// Worker threads; 1 gives single-threaded execution.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a graph: edge list, provenance sidecar and stats.
    Graph(GraphArgs),
    /// Pairwise privacy losses, distance series and (ε, δ) conversion.
    Privacy(PrivacyArgs),
    /// Private SGD presets.
    Sgd(SgdArgs),
    /// Noise level meeting a target (ε, δ) for a statistic of the pairwise losses.
    Calibrate(CalibrateArgs),
    /// Merge distance series into one long-format CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Complete,
    Ring,
    Star,
    Grid,
    Hypercube,
    ErdosRenyi,
    Geometric,
    Sbm,
    EdgeList,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GraphFlags {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Erdős–Rényi edge probability.
    #[arg(long)]
    pub q: Option<f64>,
    /// Erdős–Rényi density: q = c ln(n) / n (default c = 2).
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub dim: Option<u32>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// SBM cluster sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// SBM probability matrix: rows separated by ';', entries by ','.
    #[arg(long)]
    pub probs: Option<String>,
    /// Edge-list input file.
    #[arg(long)]
    pub path: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[command(flatten)]
    pub graph: GraphFlags,
    /// Edge-list output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ChainFlags {
    /// Self-loop mass: a number, or `auto` for 1/T².
    #[arg(long)]
    pub kappa: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    /// Cap on contributions per node (default: expected T/n).
    #[arg(long)]
    pub cap: Option<u64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Exact,
    MatrixPower,
    Closed,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Exact => Method::Exact,
            MethodArg::MatrixPower => Method::MatrixPower,
            MethodArg::Closed => Method::Closed,
        }
    }
}

#[derive(Debug, Args)]
pub struct PrivacyArgs {
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub chain: ChainFlags,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// One graph draw per seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub graph: GraphFlags,
    #[command(flatten)]
    pub chain: ChainFlags,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// `mean`, `max` or `distance:<d>`.
    #[arg(long)]
    pub statistic: Option<String>,
    /// Rényi order: `optimal`, `grid` or a number.
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Fig2,
    Table1Rw,
    Heterogeneity,
    Averaging,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Fig2 => Preset::Fig2,
            PresetArg::Table1Rw => Preset::Table1Rw,
            PresetArg::Heterogeneity => Preset::Heterogeneity,
            PresetArg::Averaging => Preset::Averaging,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Houses,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct SgdArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Fixed noise multiplier (0 for non-private runs); skips calibration.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub steps_per_node: Option<u64>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub trace_points: Option<u64>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetArg>,
    /// Houses CSV path (defaults to $TOKENWALK_DATA_DIR/houses.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Distance-series CSVs (distance,mean,std,count).
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    /// External (distance,mean) curves passed through untouched.
    #[arg(long = "overlay")]
    pub overlays: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        // Ignore the error when a pool already exists (repeated in-process calls).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    match cli.command {
        Command::Graph(a) => cmd_graph(a),
        Command::Privacy(a) => cmd_privacy(a),
        Command::Sgd(a) => cmd_sgd(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Report(a) => cmd_report(a),
    }
}

// ---------------------------------------------------------------------------
// Flag handling

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::empty()),
    }
}

fn need<T>(v: Option<T>, flag: &str, family: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::config(format!("--{flag} is required for --family {family}")))
}

fn parse_probs(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    text.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::config(format!("bad --probs entry {x:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

impl GraphFlags {
    fn family(&self) -> Result<Option<Family>, CliError> {
        let Some(kind) = self.family else {
            return Ok(None);
        };
        let name = format!("{kind:?}").to_lowercase();
        let n = || need(self.n, "n", &name);
        Ok(Some(match kind {
            FamilyArg::Complete => Family::Complete { n: n()? },
            FamilyArg::Ring => Family::Ring { n: n()? },
            FamilyArg::Star => Family::Star { n: n()? },
            FamilyArg::Grid => Family::Grid2d {
                rows: need(self.rows, "rows", &name)?,
                cols: need(self.cols, "cols", &name)?,
            },
            FamilyArg::Hypercube => Family::Hypercube {
                dim: match (self.dim, self.n) {
                    (Some(d), _) => d,
                    (None, Some(n)) if n.is_power_of_two() => n.trailing_zeros(),
                    _ => return Err(CliError::config("--dim (or a power-of-two --n) is required for --family hypercube")),
                },
            },
            FamilyArg::ErdosRenyi => {
                let n = n()?;
                let q = match (self.q, self.c) {
                    (Some(q), _) => q,
                    (None, c) => erdos_renyi_q(n, c.unwrap_or(2.0)),
                };
                Family::ErdosRenyi { n, q }
            }
            FamilyArg::Geometric => Family::Geometric {
                n: n()?,
                radius: self.radius,
            },
            FamilyArg::Sbm => Family::Sbm {
                sizes: need(self.sizes.clone(), "sizes", &name)?,
                probs: parse_probs(&need(self.probs.clone(), "probs", &name)?)?,
            },
            FamilyArg::EdgeList => Family::EdgeList {
                path: need(self.path.clone(), "path", &name)?,
            },
        }))
    }

    /// Config file (if any) with the graph flags applied on top.
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(self.config.as_deref())?;
        if let Some(family) = self.family()? {
            cfg.graph = Some(GraphSpec::new(family, self.seed.unwrap_or(0)));
        } else if let (Some(seed), Some(g)) = (self.seed, cfg.graph.as_mut()) {
            g.seed = seed;
        }
        if let Some(g) = &cfg.graph {
            g.validate().map_err(error::cfg)?;
        }
        Ok(cfg)
    }
}

fn parse_kappa(text: &str) -> Result<Kappa, CliError> {
    if text == "auto" {
        return Ok(Kappa::Rule(KappaRule::InverseSquareSteps));
    }
    text.parse::<f64>()
        .map(Kappa::Value)
        .map_err(|_| CliError::config(format!("--kappa must be a number or `auto`, got {text:?}")))
}

impl ChainFlags {
    fn apply(&self, cfg: &mut ExperimentConfig, alpha: Option<f64>, sigma2: Option<f64>) -> Result<(), CliError> {
        if let Some(k) = &self.kappa {
            cfg.transition.kappa = Some(parse_kappa(k)?);
        }
        let any = self.steps.is_some() || self.method.is_some() || self.cap.is_some() || self.delta.is_some();
        if cfg.privacy.is_none() && (any || alpha.is_some() || sigma2.is_some()) {
            let steps = self
                .steps
                .ok_or_else(|| CliError::config("--steps is required without a privacy stanza"))?;
            cfg.privacy = Some(PrivacyStanza {
                alpha: 2.0,
                sigma2: 16.0,
                steps,
                contributions: Contributions::Expected,
                method: Method::Exact,
                delta: 1e-6,
            });
        }
        if let Some(p) = cfg.privacy.as_mut() {
            if let Some(s) = self.steps {
                p.steps = s;
            }
            if let Some(m) = self.method {
                p.method = m.into();
            }
            if let Some(max) = self.cap {
                p.contributions = Contributions::Capped { max };
            }
            if let Some(d) = self.delta {
                p.delta = d;
            }
            if let Some(a) = alpha {
                p.alpha = a;
            }
            if let Some(s) = sigma2 {
                p.sigma2 = s;
            }
        }
        Ok(())
    }
}

fn require_privacy(cfg: &ExperimentConfig) -> Result<PrivacyStanza, CliError> {
    cfg.privacy
        .ok_or_else(|| CliError::config("no privacy parameters: pass --steps or a config with a privacy stanza"))
}

fn build_chain(cfg: &ExperimentConfig, seed: u64, steps: u64) -> Result<(GeneratedGraph, TransitionMatrix), CliError> {
    let mut spec = cfg.require_graph()?.clone();
    spec.seed = seed;
    let gg = generate(&spec).map_err(error::cfg)?;
    let kappa = cfg.transition.kappa.map(|k| k.resolve(steps));
    let w = transition_for(&gg.graph, kappa).map_err(error::cfg)?;
    Ok((gg, w))
}

fn privacy_params(p: &PrivacyStanza) -> PrivacyParams {
    PrivacyParams::new(p.alpha, p.sigma2, p.steps).with_contributions(p.contributions)
}

// ---------------------------------------------------------------------------
// graph

#[derive(Debug, Serialize)]
struct GraphStats {
    family: String,
    n: usize,
    edges: usize,
    min_degree: usize,
    max_degree: usize,
    mean_degree: f64,
    diameter: u32,
    regular: bool,
    bipartite: bool,
    seed: u64,
    retries: u32,
}

fn cmd_graph(args: GraphArgs) -> Result<(), CliError> {
    let mut cfg = args.graph.into_config()?;
    if let Some(out) = args.out {
        cfg.output = Some(out);
    }
    let out = cfg.require_output()?.to_path_buf();
    let spec = cfg.require_graph()?.clone();
    let gg = generate(&spec).map_err(error::cfg)?;
    let g = &gg.graph;
    let degrees = g.degrees();
    let stats = GraphStats {
        family: spec.family.name().to_string(),
        n: g.n(),
        edges: g.edge_count(),
        min_degree: *degrees.iter().min().expect("n >= 2"),
        max_degree: *degrees.iter().max().expect("n >= 2"),
        mean_degree: degrees.iter().sum::<usize>() as f64 / g.n() as f64,
        diameter: shortest_path_distances(g).diameter(),
        regular: g.is_regular().is_some(),
        bipartite: g.is_bipartite(),
        seed: spec.seed,
        retries: gg.meta.retries,
    };
    let root = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = out
        .file_name()
        .ok_or_else(|| CliError::config("--out must name a file"))?
        .to_string_lossy()
        .into_owned();
    let mut outputs = Outputs::new(root)?;
    export_graph(&gg, &out).map_err(CliError::io)?;
    outputs.track(out.clone());
    outputs.track(tokenwalk::graphs::sidecar_path(&out));
    outputs.write_json(&format!("{file}.stats.json"), &stats)?;
    outputs.finish("graph", &cfg, vec![spec.seed], &format!("{file}.manifest.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// privacy

#[derive(Debug, Serialize)]
struct PrivacySeedSummary {
    seed: u64,
    n: usize,
    mean: f64,
    min: f64,
    max: f64,
    mean_dp_epsilon: f64,
    local_baseline_rdp: f64,
    local_baseline_dp_epsilon: f64,
}

/// Pools per-seed buckets into one series (count-weighted mean, pooled std).
fn pool_series(all: &[Vec<DistanceBucket>]) -> Vec<DistanceBucket> {
    let mut acc: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for series in all {
        for b in series {
            let e = acc.entry(b.distance).or_insert((0.0, 0.0, 0));
            let c = b.count as f64;
            e.0 += c * b.mean;
            e.1 += c * (b.std * b.std + b.mean * b.mean);
            e.2 += b.count;
        }
    }
    acc.into_iter()
        .map(|(distance, (s, s2, count))| {
            let mean = s / count as f64;
            DistanceBucket {
                distance,
                mean,
                std: (s2 / count as f64 - mean * mean).max(0.0).sqrt(),
                count,
            }
        })
        .collect()
}

fn cmd_privacy(args: PrivacyArgs) -> Result<(), CliError> {
    let mut cfg = args.graph.into_config()?;
    args.chain.apply(&mut cfg, args.alpha, args.sigma2)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = args.out {
        cfg.output = Some(out);
    }
    let out = cfg.require_output()?.to_path_buf();
    let stanza = require_privacy(&cfg)?;
    let p = privacy_params(&stanza);
    p.validate().map_err(error::cfg)?;
    let seeds = cfg.seed_list();
    let mut outputs = Outputs::new(&out)?;
    let mut summaries = Vec::new();
    let mut all_series = Vec::new();
    let family = cfg.require_graph()?.family.name().to_string();
    for &seed in &seeds {
        let (gg, w) = build_chain(&cfg, seed, stanza.steps)?;
        let acc = Accountant::new(w).map_err(error::acct)?;
        let m = acc.pairwise_matrix(&p, stanza.method).map_err(error::acct)?;
        let dist = shortest_path_distances(&gg.graph);
        let series = mean_loss_by_distance(&m, &dist).map_err(error::acct)?;

        let pairwise = outputs.path(&format!("pairwise_seed{seed}.csv"));
        m.export(&pairwise).map_err(CliError::io)?;
        outputs.track(tokenwalk::graphs::sidecar_path(&pairwise));
        outputs.track(pairwise);
        let mut dp_err = None;
        let dp = m.eps.map(|e| {
            if e.is_nan() {
                return f64::NAN;
            }
            match rdp_to_dp(p.alpha, e, stanza.delta) {
                Ok(d) => d.epsilon,
                Err(err) => {
                    dp_err = Some(err);
                    f64::NAN
                }
            }
        });
        if let Some(err) = dp_err {
            return Err(error::cfg(err));
        }
        outputs.write(&format!("pairwise_dp_seed{seed}.csv"), matrix_to_csv(&dp).as_bytes())?;
        outputs.write(&format!("distance_series_seed{seed}.csv"), distance_series_csv(&series).as_bytes())?;

        let n = m.n();
        let local = local_dp_baseline(&p, n);
        let mean_dp = dp.iter().filter(|x| !x.is_nan()).sum::<f64>() / (n * (n - 1)) as f64;
        summaries.push(PrivacySeedSummary {
            seed,
            n,
            mean: m.mean(),
            min: m.min(),
            max: m.max(),
            mean_dp_epsilon: mean_dp,
            local_baseline_rdp: local,
            local_baseline_dp_epsilon: rdp_to_dp(p.alpha, local, stanza.delta).map_err(error::cfg)?.epsilon,
        });
        all_series.push(series);
    }
    let pooled = pool_series(&all_series);
    let series_path = outputs.write("distance_series.csv", distance_series_csv(&pooled).as_bytes())?;
    let meta = serde_json::json!({ "method": stanza.method.to_string(), "graph": family, "seeds": seeds });
    outputs.write_json(
        &tokenwalk::graphs::sidecar_path(&series_path).file_name().expect("file").to_string_lossy(),
        &meta,
    )?;
    outputs.write_json("summary.json", &summaries)?;
    outputs.finish("privacy", &cfg, seeds, "manifest.json")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate

fn parse_statistic(text: &str) -> Result<Statistic, CliError> {
    match text {
        "mean" => Ok(Statistic::MeanPairs),
        "max" => Ok(Statistic::MaxPairs),
        _ => text
            .strip_prefix("distance:")
            .and_then(|d| d.parse().ok())
            .map(|distance| Statistic::MeanAtDistance { distance })
            .ok_or_else(|| CliError::config(format!("--statistic must be mean, max or distance:<d>, got {text:?}"))),
    }
}

fn parse_alpha_choice(text: &str) -> Result<AlphaChoice, CliError> {
    match text {
        "optimal" => Ok(AlphaChoice::Optimal),
        "grid" => Ok(AlphaChoice::default_grid()),
        _ => text
            .parse()
            .map(|alpha| AlphaChoice::Fixed { alpha })
            .map_err(|_| CliError::config(format!("--alpha must be optimal, grid or a number, got {text:?}"))),
    }
}

#[derive(Debug, Serialize)]
struct CalibrationReport {
    sigma2: f64,
    sigma: f64,
    alpha: f64,
    achieved_epsilon: f64,
    target_epsilon: f64,
    delta: f64,
    within_tolerance: bool,
    statistic: Statistic,
    method: Method,
    steps: u64,
    n: usize,
    /// Noise the local-DP baseline would need for the same target.
    local_sigma2: f64,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let mut cfg = args.graph.into_config()?;
    args.chain.apply(&mut cfg, None, None)?;
    if cfg.calibration.is_none() {
        let epsilon = args
            .epsilon
            .ok_or_else(|| CliError::config("--epsilon is required without a calibration stanza"))?;
        cfg.calibration = Some(CalibrationStanza {
            epsilon,
            delta: 1e-6,
            statistic: Statistic::MeanPairs,
            alpha: AlphaChoice::Optimal,
        });
    }
    {
        let c = cfg.calibration.as_mut().expect("set above");
        if let Some(e) = args.epsilon {
            c.epsilon = e;
        }
        if let Some(d) = args.chain.delta {
            c.delta = d;
        }
        if let Some(s) = &args.statistic {
            c.statistic = parse_statistic(s)?;
        }
        if let Some(a) = &args.alpha {
            c.alpha = parse_alpha_choice(a)?;
        }
    }
    if let Some(out) = args.out {
        cfg.output = Some(out);
    }
    let out = cfg.require_output()?.to_path_buf();
    let stanza = require_privacy(&cfg)?;
    let cal = cfg.calibration.clone().expect("set above");
    let target = DpPoint {
        epsilon: cal.epsilon,
        delta: cal.delta,
    };
    let seed = cfg.require_graph()?.seed;
    let (gg, w) = build_chain(&cfg, seed, stanza.steps)?;
    let dist = matches!(cal.statistic, Statistic::MeanAtDistance { .. }).then(|| shortest_path_distances(&gg.graph));
    let acc = Accountant::new(w).map_err(error::acct)?;
    let template = privacy_params(&stanza);
    let result = calibrate_sigma(&acc, &template, stanza.method, target, cal.statistic, &cal.alpha, dist.as_ref())
        .map_err(error::acct)?;
    let local = calibrate_local(template.contributions_per_node(acc.n()), target).map_err(error::acct)?;
    let report = CalibrationReport {
        sigma2: result.sigma2,
        sigma: result.sigma2.sqrt(),
        alpha: result.alpha,
        achieved_epsilon: result.achieved_epsilon,
        target_epsilon: result.target_epsilon,
        delta: result.delta,
        within_tolerance: result.within_tolerance,
        statistic: cal.statistic,
        method: stanza.method,
        steps: stanza.steps,
        n: acc.n(),
        local_sigma2: local.sigma2,
    };
    let mut outputs = Outputs::new(&out)?;
    outputs.write_json("calibration.json", &report)?;
    outputs.note("sigma2", result.sigma2);
    outputs.note("achieved_epsilon", result.achieved_epsilon);
    outputs.finish("calibrate", &cfg, vec![seed], "manifest.json")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// sgd

impl SgdArgs {
    fn into_config(self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = base_config(self.config.as_deref())?;
        if let Some(p) = self.preset {
            cfg.preset = Some(p.into());
        }
        if let Some(seeds) = self.seeds {
            cfg.seeds = seeds;
        }
        if let Some(out) = self.out {
            cfg.output = Some(out);
        }
        let s = cfg.sgd.get_or_insert_with(SgdStanza::default);
        s.sigma = self.sigma.or(s.sigma);
        s.nodes = self.nodes.or(s.nodes);
        s.steps_per_node = self.steps_per_node.or(s.steps_per_node);
        s.step_size = self.step_size.or(s.step_size);
        s.clip = self.clip.or(s.clip);
        s.minibatch = self.minibatch.or(s.minibatch);
        s.epsilon = self.epsilon.or(s.epsilon);
        s.delta = self.delta.or(s.delta);
        s.trace_points = self.trace_points.or(s.trace_points);
        match (self.dataset, self.data) {
            (Some(DatasetArg::Synthetic), _) => cfg.dataset = Some(DataSource::synthetic_default()),
            (_, Some(path)) => {
                cfg.dataset = Some(DataSource::Houses {
                    path: Some(path),
                    label_column: crate::config::default_label_column(),
                })
            }
            (Some(DatasetArg::Houses), None) => cfg.dataset = Some(DataSource::houses_default()),
            (None, None) => {}
        }
        Ok(cfg)
    }
}

fn logistic_options(s: &SgdStanza) -> Result<LogisticOptions, CliError> {
    let mut o = LogisticOptions::default();
    if let Some(v) = s.steps_per_node {
        o.steps_per_node = v;
    }
    o.step_size = s.step_size.or(o.step_size);
    if let Some(v) = s.clip {
        o.clip = v;
    }
    if let Some(v) = s.minibatch {
        o.minibatch = v;
    }
    if let Some(v) = s.epsilon {
        o.target.epsilon = v;
    }
    if let Some(v) = s.delta {
        o.target.delta = v;
    }
    if let Some(v) = s.trace_points {
        o.trace_points = v;
    }
    o.sigma = s.sigma;
    if o.clip <= 0.0 || o.target.epsilon <= 0.0 || !(o.target.delta > 0.0 && o.target.delta < 1.0) {
        return Err(CliError::config("clip and epsilon must be positive and delta in (0, 1)"));
    }
    Ok(o)
}

fn cmd_sgd(args: SgdArgs) -> Result<(), CliError> {
    let mut cfg = args.into_config()?;
    let preset = cfg
        .preset
        .ok_or_else(|| CliError::config("--preset (or a config with a preset) is required"))?;
    if cfg.seeds.is_empty() {
        cfg.seeds = match preset {
            Preset::Averaging => (0..10).collect(),
            Preset::Heterogeneity => (0..5).collect(),
            Preset::Fig2 | Preset::Table1Rw => (0..8).collect(),
        };
    }
    let out = cfg.require_output()?.to_path_buf();
    let mut outputs = Outputs::new(&out)?;
    match preset {
        Preset::Averaging => sgd_averaging(&cfg, &mut outputs)?,
        Preset::Fig2 => sgd_fig2(&mut cfg, &mut outputs)?,
        Preset::Table1Rw => sgd_table1(&mut cfg, &mut outputs)?,
        Preset::Heterogeneity => sgd_heterogeneity(&cfg, &mut outputs)?,
    }
    let seeds = cfg.seeds.clone();
    outputs.finish(&format!("sgd {}", preset.name()), &cfg, seeds, "manifest.json")?;
    Ok(())
}

fn sgd_averaging(cfg: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.sgd.clone().unwrap_or_default();
    let mut opts = AveragingOptions {
        seeds: cfg.seeds.clone(),
        ..AveragingOptions::default()
    };
    if let Some(n) = s.nodes {
        opts.n = n;
    }
    if let Some(spn) = s.steps_per_node {
        opts.steps = spn * opts.n as u64;
    }
    if let Some(tp) = s.trace_points {
        opts.trace_points = tp;
    }
    let report = averaging_suite(&opts).map_err(error::cfg)?;
    for (rec, seed) in report.records.iter().zip(&opts.seeds) {
        let stem = format!("averaging_seed{seed}");
        rec.export(outputs.root(), &stem).map_err(CliError::io)?;
        outputs.track(outputs.path(&format!("{stem}.csv")));
        outputs.track(outputs.path(&format!("{stem}.json")));
    }
    outputs.write_json("summary.json", &serde_json::json!({ "options": opts, "report": report }))?;
    outputs.note("step_size", report.step_size);
    Ok(())
}

fn export_run(outputs: &mut Outputs, prefix: &str, run: &LogisticRun) -> Result<(), CliError> {
    let stem = match &run.graph {
        Some(g) => format!("{prefix}_{}_{g}_seed{}", run.algorithm.name(), run.seed),
        None => format!("{prefix}_{}_seed{}", run.algorithm.name(), run.seed),
    };
    run.record.export(outputs.root(), &stem).map_err(CliError::io)?;
    outputs.track(outputs.path(&format!("{stem}.csv")));
    outputs.track(outputs.path(&format!("{stem}.json")));
    Ok(())
}

#[derive(Debug, Serialize)]
struct AccuracyRow {
    algorithm: String,
    graph: Option<String>,
    epsilon: f64,
    mean_accuracy: f64,
    std_accuracy: f64,
    runs: usize,
    mean_sigma: f64,
}

fn accuracy_rows(runs: &[LogisticRun], epsilon: f64) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<(String, Option<String>), Vec<&LogisticRun>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.algorithm.name().to_string(), r.graph.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((algorithm, graph), rs)| {
            let acc = summarize(&rs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
            AccuracyRow {
                algorithm,
                graph,
                epsilon,
                mean_accuracy: acc.mean,
                std_accuracy: acc.std,
                runs: acc.count,
                mean_sigma: rs.iter().map(|r| r.sigma).sum::<f64>() / rs.len() as f64,
            }
        })
        .collect()
}

fn rows_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("algorithm,graph,epsilon,mean_accuracy,std_accuracy,runs,mean_sigma\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.algorithm,
            r.graph.as_deref().unwrap_or(""),
            r.epsilon,
            fmt_full(r.mean_accuracy),
            fmt_full(r.std_accuracy),
            r.runs,
            fmt_full(r.mean_sigma)
        ));
    }
    out
}

fn preset_nodes(cfg: &ExperimentConfig) -> usize {
    cfg.sgd.as_ref().and_then(|s| s.nodes).unwrap_or(2048)
}

fn preset_data(cfg: &mut ExperimentConfig) -> DataSource {
    cfg.dataset.get_or_insert_with(DataSource::houses_default).clone()
}

pub const FIG2_GRAPHS: [&str; 3] = ["complete", "hypercube", "geometric"];
pub const TABLE1_GRAPHS: [&str; 4] = ["complete", "exponential", "geometric", "grid"];
pub const TABLE1_EPSILONS: [f64; 3] = [0.5, 1.0, 2.0];

fn sgd_fig2(cfg: &mut ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let n = preset_nodes(cfg);
    let src = preset_data(cfg);
    let opts = logistic_options(&cfg.sgd.clone().unwrap_or_default())?;
    let per_seed: Vec<Result<Vec<LogisticRun>, CliError>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| comparison_seed(&FIG2_GRAPHS, &src, n, &opts, seed))
        .collect();
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }
    for run in &runs {
        export_run(outputs, "fig2", run)?;
    }
    let rows = accuracy_rows(&runs, opts.target.epsilon);
    outputs.write("fig2_summary.csv", rows_csv(&rows).as_bytes())?;
    outputs.write_json("summary.json", &serde_json::json!({ "options": opts, "runs": runs, "rows": rows }))?;
    Ok(())
}

fn sgd_table1(cfg: &mut ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let n = preset_nodes(cfg);
    let src = preset_data(cfg);
    let base = logistic_options(&cfg.sgd.clone().unwrap_or_default())?;
    let epsilons: Vec<f64> = match cfg.sgd.as_ref().and_then(|s| s.epsilon) {
        Some(e) => vec![e],
        None => TABLE1_EPSILONS.to_vec(),
    };
    let steps = base.steps_per_node * n as u64;
    // One graph draw, dataset and spectrum per (graph, seed), shared by all ε.
    let cells: Vec<(&str, u64)> = TABLE1_GRAPHS
        .iter()
        .flat_map(|g| cfg.seeds.iter().map(move |&s| (*g, s)))
        .collect();
    let per_cell: Vec<Result<Vec<(f64, LogisticRun)>, CliError>> = cells
        .par_iter()
        .map(|&(name, seed)| {
            let data = crate::experiments::load_dataset(&src, n, seed)?;
            let g = generate(&GraphSpec::new(preset_family(name, n)?, seed)).map_err(error::cfg)?.graph;
            let w = tokenwalk::transition::hamilton_weighting(&g);
            let acc = Accountant::new(w.clone()).map_err(error::acct)?;
            let mut out = Vec::new();
            for &eps in &epsilons {
                let mut opts = base.clone();
                opts.target.epsilon = eps;
                let cal = match base.sigma {
                    Some(_) => None,
                    None => Some(calibrate_walk_with(&acc, steps, opts.target, opts.method).map_err(error::acct)?),
                };
                if let Some(c) = &cal {
                    opts.sigma = Some(c.sigma2.sqrt());
                }
                let mut run = run_logistic(Algorithm::RandomWalk, Some(&w), &data, &opts, seed).map_err(error::acct)?;
                run.calibration = cal;
                run.graph = Some(name.to_string());
                out.push((eps, run));
            }
            Ok(out)
        })
        .collect();
    let mut by_eps: BTreeMap<u64, Vec<LogisticRun>> = BTreeMap::new();
    for cell in per_cell {
        for (eps, run) in cell? {
            by_eps.entry(eps.to_bits()).or_default().push(run);
        }
    }
    let mut rows = Vec::new();
    for (bits, runs) in &by_eps {
        let eps = f64::from_bits(*bits);
        for run in runs {
            export_run(outputs, &format!("table1_eps{eps}"), run)?;
        }
        rows.extend(accuracy_rows(runs, eps));
    }
    outputs.write("table1_rw.csv", rows_csv(&rows).as_bytes())?;
    outputs.write_json("summary.json", &serde_json::json!({ "options": base, "rows": rows }))?;
    Ok(())
}

fn sgd_heterogeneity(cfg: &ExperimentConfig, outputs: &mut Outputs) -> Result<(), CliError> {
    let s = cfg.sgd.clone().unwrap_or_default();
    let mut opts = HeterogeneityOptions {
        seeds: cfg.seeds.clone(),
        ..HeterogeneityOptions::default()
    };
    if let Some(n) = s.nodes {
        opts.n = n;
    }
    if let Some(spn) = s.steps_per_node {
        opts.steps_per_node = spn;
    }
    if let Some(sigma) = s.sigma {
        opts.sigma = sigma;
    }
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let [het, shuf] = heterogeneity_runs(&opts, seed).map_err(error::cfg)?;
        for (label, rec) in [("heterogeneous", &het), ("shuffled", &shuf)] {
            let stem = format!("heterogeneity_{label}_seed{seed}");
            rec.export(outputs.root(), &stem).map_err(CliError::io)?;
            outputs.track(outputs.path(&format!("{stem}.csv")));
            outputs.track(outputs.path(&format!("{stem}.json")));
            rows.push(serde_json::json!({
                "seed": seed,
                "data": label,
                "final_objective": rec.objective.last(),
                "final_accuracy": rec.final_accuracy(),
            }));
        }
    }
    outputs.write_json("summary.json", &serde_json::json!({ "options": opts, "runs": rows }))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report

const SERIES_HEADER: [&str; 4] = ["distance", "mean", "std", "count"];

fn sidecar_labels(path: &Path) -> (String, String) {
    let meta = std::fs::read_to_string(tokenwalk::graphs::sidecar_path(path))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok());
    let get = |key: &str, default: &str| {
        meta.as_ref()
            .and_then(|m| m.get(key))
            .and_then(|v| v.as_str())
            .unwrap_or(default)
            .to_string()
    };
    (get("method", "unknown"), get("graph", "unknown"))
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    if args.inputs.is_empty() && args.overlays.is_empty() {
        return Err(CliError::config("report needs at least one --input or --overlay"));
    }
    let mut out = String::from("distance,mean,std,method,graph,source\n");
    for path in &args.inputs {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        if headers != SERIES_HEADER {
            return Err(CliError::config(format!(
                "{}: expected columns {:?}, found {:?}",
                path.display(),
                SERIES_HEADER,
                headers
            )));
        }
        let (method, graph) = sidecar_labels(path);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            out.push_str(&format!("{},{},{},{method},{graph},{}\n", &rec[0], &rec[1], &rec[2], path.display()));
        }
    }
    for path in &args.overlays {
        let rows = read_overlay_csv(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let (_, graph) = sidecar_labels(path);
        for (d, m) in rows {
            out.push_str(&format!("{d},{},,overlay,{graph},{}\n", fmt_full(m), path.display()));
        }
    }
    let root = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = args
        .out
        .file_name()
        .ok_or_else(|| CliError::config("--out must name a file"))?
        .to_string_lossy()
        .into_owned();
    let mut outputs = Outputs::new(root)?;
    outputs.write(&file, out.as_bytes())?;
    let mut cfg = ExperimentConfig::empty();
    cfg.output = Some(args.out.clone());
    outputs.note("inputs", &args.inputs);
    outputs.note("overlays", &args.overlays);
    outputs.finish("report", &cfg, Vec::new(), &format!("{file}.manifest.json"))?;
    Ok(())
}

/// Spectral summary used by `graph` consumers and tests.
pub fn chain_gap(w: &TransitionMatrix) -> Result<f64, CliError> {
    Ok(spectral_gap(&decompose(w).map_err(error::acct)?))
}
