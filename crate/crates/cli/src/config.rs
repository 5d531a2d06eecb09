//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tokenwalk::accountant::{AlphaChoice, Contributions, Method, Statistic};
use tokenwalk::graphs::GraphSpec;
use tokenwalk::io::sha256_hex;

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a command needs. Commands read the stanzas they use and
/// reject configs missing a required one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub transition: TransitionOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyStanza>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationStanza>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<SgdStanza>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DataSource>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn empty() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            preset: None,
            graph: None,
            transition: TransitionOptions::default(),
            privacy: None,
            calibration: None,
            sgd: None,
            dataset: None,
            seeds: Vec::new(),
            output: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn require_graph(&self) -> Result<&GraphSpec, CliError> {
        self.graph.as_ref().ok_or_else(|| CliError::config("config has no graph stanza"))
    }

    pub fn require_output(&self) -> Result<&Path, CliError> {
        self.output.as_deref().ok_or_else(|| CliError::config("no output location given"))
    }

    /// Configured seeds, or the graph seed when none are listed.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.graph.as_ref().map_or(0, |g| g.seed)]
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Fig2,
    Table1Rw,
    Heterogeneity,
    Averaging,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Table1Rw => "table1-rw",
            Preset::Heterogeneity => "heterogeneity",
            Preset::Averaging => "averaging",
        }
    }
}

/// Self-loop mass added to the Hamilton chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Kappa {
    Value(f64),
    Rule(KappaRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaRule {
    /// `1 / T^2`.
    InverseSquareSteps,
}

impl Kappa {
    pub fn resolve(self, steps: u64) -> f64 {
        match self {
            Kappa::Value(k) => k,
            Kappa::Rule(KappaRule::InverseSquareSteps) => tokenwalk::transition::default_kappa(steps),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionOptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Kappa>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyStanza {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    pub steps: u64,
    #[serde(default = "default_contributions")]
    pub contributions: Contributions,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationStanza {
    pub epsilon: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_statistic")]
    pub statistic: Statistic,
    #[serde(default = "default_alpha_choice")]
    pub alpha: AlphaChoice,
}

/// Overrides of preset defaults; unset fields keep the preset value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdStanza {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_node: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Fixed noise multiplier; skips calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minibatch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_points: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Houses CSV; defaults to `$TOKENWALK_DATA_DIR/houses.csv`.
    Houses {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    /// Linearly separable unit-norm Gaussian data.
    Synthetic {
        #[serde(default = "default_per_user")]
        per_user: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        margin: f64,
    },
}

impl DataSource {
    pub fn houses_default() -> Self {
        DataSource::Houses {
            path: None,
            label_column: default_label_column(),
        }
    }

    pub fn synthetic_default() -> Self {
        DataSource::Synthetic {
            per_user: default_per_user(),
            dim: default_dim(),
            margin: 0.0,
        }
    }
}

fn default_alpha() -> f64 {
    2.0
}
fn default_sigma2() -> f64 {
    16.0
}
fn default_contributions() -> Contributions {
    Contributions::Expected
}
fn default_method() -> Method {
    Method::Exact
}
fn default_delta() -> f64 {
    1e-6
}
fn default_statistic() -> Statistic {
    Statistic::MeanPairs
}
fn default_alpha_choice() -> AlphaChoice {
    AlphaChoice::Optimal
}
pub fn default_label_column() -> String {
    "median_house_value".to_string()
}
fn default_per_user() -> usize {
    8
}
fn default_dim() -> usize {
    8
}
