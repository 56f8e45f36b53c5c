//! Run configuration files (`schema_version: 1`).

use std::path::{Path, PathBuf};

use serde::Deserialize;
use srelasso::data::{EquationSchema, LagDirective, PanelSchema};
use srelasso::dgp::{Alpha0Law, DepScenario, ExperimentConfig, IidScenario, InferenceScenario, Scenario};
use srelasso::penalty::{FinalFit, PenaltyMethod, PenaltyScope, TuningConfig};
use srelasso::{DebiasConfig, DebiasMethod};

use crate::failure::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub data: Option<DataSection>,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default = "post_lasso")]
    pub final_fit: FinalFit,
    /// Plan file written by `tune`; `estimate` and `infer` reuse it instead of tuning.
    pub plan: Option<PathBuf>,
    pub inference: Option<InferenceSection>,
    pub scan: Option<ScanSection>,
    pub simulate: Option<ExperimentConfig>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

fn post_lasso() -> FinalFit {
    FinalFit::PostLasso
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub equations: Vec<EquationSchema>,
    #[serde(default)]
    pub lags: Vec<LagDirective>,
}

impl DataSection {
    pub fn schema(&self) -> PanelSchema {
        PanelSchema {
            equations: self.equations.clone(),
            lags: self.lags.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub equation: String,
    pub covariate: String,
    #[serde(default)]
    pub null: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapKind {
    Pivot,
    Residual,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub targets: Vec<TargetSpec>,
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "pivot")]
    pub bootstrap: BootstrapKind,
    #[serde(default)]
    pub debias: DebiasConfig,
}

fn default_draws() -> usize {
    1000
}

fn default_alpha() -> f64 {
    0.05
}

fn pivot() -> BootstrapKind {
    BootstrapKind::Pivot
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub grid: Vec<usize>,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

fn default_holdout() -> f64 {
    0.2
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub c: Option<f64>,
    pub b_n: Option<usize>,
    pub draws: Option<usize>,
    pub method: Option<DebiasMethod>,
    pub penalty: Option<PenaltyChoice>,
    pub scenario: Option<ScenarioKind>,
    pub rho: Option<f64>,
    pub reps: Option<usize>,
    pub block_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyChoice {
    Joint,
    PerEquation,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Iid,
    Dep,
    Infer,
}

/// Which command the configuration is resolved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Tune,
    Estimate,
    Infer,
    Simulate,
    ScanBlockSize,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => return Err(CliError::config(format!("schema_version: unsupported version {v}, expected {SCHEMA_VERSION}"))),
            None => return Err(CliError::config("schema_version: missing or not an integer")),
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        log::debug!("config {} schema_version {}", path.display(), cfg.schema_version);
        // Relative paths are resolved against the config file's directory.
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            if let Some(p) = d.path.as_mut() {
                rebase(p);
            }
        }
        if let Some(p) = cfg.plan.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            rebase(p);
        }
        if let Some(s) = cfg.simulate.as_mut() {
            if let Some(p) = s.checkpoint.as_mut() {
                rebase(p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides, cmd: Command) -> CliResult<()> {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if cmd != Command::Simulate && (o.scenario.is_some() || o.rho.is_some() || o.reps.is_some() || o.block_grid.is_some()) {
            return Err(CliError::config("--scenario, --rho, --reps and --block-grid apply to simulate only"));
        }
        if o.method.is_some() && !matches!(cmd, Command::Infer | Command::Simulate) {
            log::warn!("--method has no effect on this command");
        }
        match cmd {
            Command::Simulate => {
                let sim = self.simulate.as_mut().ok_or_else(|| CliError::config("simulate: section is required for simulate"))?;
                if let Some(s) = self.seed {
                    sim.seed = s;
                }
                apply_tuning(&mut sim.tuning, o, true);
                if let Some(kind) = o.scenario {
                    sim.scenario = convert_scenario(&sim.scenario, kind);
                }
                if let Some(rho) = o.rho {
                    match &mut sim.scenario {
                        Scenario::Iid(_) => return Err(CliError::config("--rho: the iid scenario has no decay exponent")),
                        Scenario::Dep(s) => s.rho = rho,
                        Scenario::Infer(s) => s.rho = rho,
                    }
                }
                if let Some(r) = o.reps {
                    sim.replications = r;
                }
                if let Some(g) = &o.block_grid {
                    sim.block_grid = g.clone();
                }
                if let Some(m) = o.method {
                    sim.debias.method = m;
                }
                sim.validate().map_err(|e| CliError::config(format!("simulate: {e}")))?;
            }
            Command::Infer => {
                if let Some(s) = self.seed {
                    self.tuning.seed = s;
                }
                apply_tuning(&mut self.tuning, o, false);
                let inf = self.inference.as_mut().ok_or_else(|| CliError::config("inference: section is required for infer"))?;
                if let Some(a) = o.alpha {
                    inf.alpha = a;
                }
                if let Some(d) = o.draws {
                    inf.draws = d;
                    self.tuning.draws = d;
                }
                if let Some(m) = o.method {
                    inf.debias.method = m;
                }
                if !(inf.alpha > 0.0 && inf.alpha < 1.0) {
                    return Err(CliError::config("inference.alpha: must lie in (0, 1)"));
                }
                if inf.targets.is_empty() {
                    return Err(CliError::config("inference.targets: at least one target is required"));
                }
            }
            _ => {
                if let Some(s) = self.seed {
                    self.tuning.seed = s;
                }
                apply_tuning(&mut self.tuning, o, true);
            }
        }
        self.tuning.validate().map_err(|e| CliError::config(format!("tuning: {e}")))?;
        Ok(())
    }

    pub fn data_path(&self) -> CliResult<&Path> {
        let d = self.data.as_ref().ok_or_else(|| CliError::config("data: section is required"))?;
        d.path.as_deref().ok_or_else(|| CliError::config("data.path: missing dataset path"))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// `--alpha` and `--draws` target the penalty only when `penalty_level` is set.
fn apply_tuning(t: &mut TuningConfig, o: &Overrides, penalty_level: bool) {
    if let Some(c) = o.c {
        t.c = c;
    }
    if let Some(b) = o.b_n {
        t.block_size = b;
    }
    if penalty_level {
        if let Some(a) = o.alpha {
            t.alpha = a;
        }
        if let Some(d) = o.draws {
            t.draws = d;
        }
    }
    match o.penalty {
        Some(PenaltyChoice::Joint) => {
            t.scope = PenaltyScope::Joint;
            t.method = PenaltyMethod::Bootstrap;
        }
        Some(PenaltyChoice::PerEquation) => {
            t.scope = PenaltyScope::PerEquation;
            t.method = PenaltyMethod::Bootstrap;
        }
        Some(PenaltyChoice::Gaussian) => {
            t.scope = PenaltyScope::Joint;
            t.method = PenaltyMethod::GaussianCanonical;
        }
        None => {}
    }
}

fn convert_scenario(s: &Scenario, kind: ScenarioKind) -> Scenario {
    let (j, k, n) = s.dims();
    let rho = s.rho().unwrap_or(0.1);
    match kind {
        ScenarioKind::Iid => Scenario::Iid(IidScenario::new(j, k, n)),
        ScenarioKind::Dep => Scenario::Dep(DepScenario::new(j, k, n, rho)),
        ScenarioKind::Infer => {
            let law = match s {
                Scenario::Infer(i) => i.alpha0,
                _ => Alpha0Law::Zero,
            };
            Scenario::Infer(InferenceScenario::new(j, k, n, rho, law))
        }
    }
}
