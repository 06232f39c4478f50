//! Experiment configuration: one TOML (or JSON) file with a flat section
//! per module.
//!
//! ```toml
//! command = "lan-check"
//! seed = 7
//! out = "runs/lan"
//!
//! [model]
//! id = "mean_field_ou"
//! kappa = 0.0
//!
//! [theta]
//! theta1 = 1.0
//! theta2 = 1.0
//! box1 = [0.5, 2.0]
//! box2 = [0.5, 2.0]
//!
//! [simulate]
//! n_particles = 2000
//! n_steps = 50
//! mode = { kind = "exact_oracle" }
//!
//! [lan]
//! u = 1.0
//! v = 1.0
//! replications = 500
//! ```

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mkv_lan::inference::ContrastKind;
use mkv_lan::lan::ConditionalExpectation;
use mkv_lan::{BuiltinModel, InitialLaw, Interval, SimConfig, SimMode, ThetaPair};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    LanCheck,
    Fisher,
    Estimate,
    Rates,
    ValidateModel,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::LanCheck => "lan-check",
            Command::Fisher => "fisher",
            Command::Estimate => "estimate",
            Command::Rates => "rates",
            Command::ValidateModel => "validate-model",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When present it must match the subcommand on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    /// Mandatory unless given with `--seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelSection,
    pub theta: ThetaSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub lan: LanSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub rates: RatesSection,
    #[serde(default)]
    pub validate: ValidateSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `mean_field_ou` or `tanh_interaction`.
    pub id: String,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub eps: f64,
    #[serde(default = "one")]
    pub dim: usize,
    /// Defaults to the stationary law of the oracle at `θ`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialLaw>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub theta1: f64,
    pub theta2: f64,
    #[serde(default = "default_box")]
    pub box1: [f64; 2],
    #[serde(default = "default_box")]
    pub box2: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_particles: usize,
    pub n_steps: usize,
    pub horizon: f64,
    pub substeps: usize,
    pub mode: SimMode,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { n_particles: 200, n_steps: 50, horizon: 1.0, substeps: 8, mode: SimMode::Particles }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanSection {
    pub u: f64,
    pub v: f64,
    pub replications: usize,
    pub quadrature_order: usize,
    /// Also compute `Σζ̂` and the expansion gaps.
    pub expansion: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clt: Option<ConditionalExpectation>,
    /// Fixed `[Σ_b, Σ_a]` instead of a pilot quadrature.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<[f64; 2]>,
    pub pilot_particles: usize,
    pub ks_alpha: f64,
    pub bins: usize,
}

impl Default for LanSection {
    fn default() -> Self {
        LanSection {
            u: 1.0,
            v: 1.0,
            replications: 100,
            quadrature_order: mkv_lan::lan::DEFAULT_QUADRATURE_ORDER,
            expansion: false,
            clt: None,
            sigma: None,
            pilot_particles: 0,
            ks_alpha: 0.01,
            bins: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimateSection {
    pub contrast: ContrastKind,
    /// Starting point; the box midpoint when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<[f64; 2]>,
    pub tol: f64,
    pub max_iter: usize,
    pub profile_theta1: bool,
    /// Read the observations from a grid file (`.csv` or binary) instead of
    /// simulating them. Relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl Default for EstimateSection {
    fn default() -> Self {
        EstimateSection {
            contrast: ContrastKind::default(),
            init: None,
            tol: 1e-8,
            max_iter: 500,
            profile_theta1: true,
            data: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RatesSection {
    pub ns: Vec<usize>,
    /// Observation count for each entry of `ns`.
    pub n_steps: Vec<usize>,
    pub reps: usize,
}

impl Default for RatesSection {
    fn default() -> Self {
        RatesSection { ns: vec![250, 1000, 4000], n_steps: vec![25, 50, 100], reps: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    pub probes: usize,
}

impl Default for ValidateSection {
    fn default() -> Self {
        ValidateSection { probes: 20 }
    }
}

fn one() -> usize {
    1
}

fn default_box() -> [f64; 2] {
    [0.1, 5.0]
}

impl ExperimentConfig {
    /// Parse by extension: `.json` is JSON, anything else TOML. Errors name
    /// the offending key path.
    pub fn from_str_with_format(text: &str, json: bool) -> Result<Self, CliError> {
        let value: serde_json::Value = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?
        } else {
            let t: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?;
            serde_json::to_value(t).map_err(|e| CliError::Config(e.to_string()))?
        };
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at key `{path}`: {}", e.into_inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::from_str_with_format(&text, json)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn theta(&self) -> Result<ThetaPair, CliError> {
        let t = &self.theta;
        let b1 = Interval::new(t.box1[0], t.box1[1]).map_err(|e| invalid("theta.box1", e))?;
        let b2 = Interval::new(t.box2[0], t.box2[1]).map_err(|e| invalid("theta.box2", e))?;
        ThetaPair::new(t.theta1, t.theta2, b1, b2).map_err(|e| invalid("theta", e))
    }

    pub fn model(&self) -> Result<BuiltinModel, CliError> {
        let m = &self.model;
        let initial = match &m.initial {
            Some(law) => law.clone(),
            None => {
                let t = &self.theta;
                if !(t.theta1 > 0.0) {
                    return Err(CliError::Config(
                        "at key `model.initial`: required when theta1 <= 0 (no stationary default)".into(),
                    ));
                }
                InitialLaw::stationary_ou(m.dim, t.theta1, t.theta2)
            }
        };
        if initial.dim() != m.dim {
            return Err(CliError::Config(format!(
                "at key `model.initial`: dimension {} does not match model.dim = {}",
                initial.dim(),
                m.dim
            )));
        }
        BuiltinModel::from_id(&m.id, m.kappa, m.eps, initial).map_err(|e| invalid("model.id", e))
    }

    pub fn sim_config(&self, seed: u64) -> Result<SimConfig, CliError> {
        let s = &self.simulate;
        let cfg = SimConfig {
            mode: s.mode,
            ..SimConfig::new(s.n_particles, s.n_steps, s.horizon, s.substeps, seed, self.theta()?)
        };
        cfg.validate().map_err(|e| invalid("simulate", e))?;
        Ok(cfg)
    }
}

fn invalid(key: &str, e: mkv_lan::Error) -> CliError {
    CliError::Config(format!("at key `{key}`: {e}"))
}
