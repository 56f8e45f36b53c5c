//! Simulation designs and the replication harness.
//!
//! Three designs are provided: Gaussian covariates with Toeplitz covariance,
//! linear processes driven by ARCH-scaled Student-t innovations, and the
//! partially linear system used for inference experiments. Every generator is
//! a pure function of its scenario and seed.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoefVector, EquationSpec, PanelDataset, TargetSet};
use crate::debias::{run_algorithm, DebiasConfig};
use crate::error::{config, Error, Result};
use crate::inference::{bootstrap_pivots, build_report};
use crate::penalty::{fit_system, mean_prediction_error, run_pilot, tune_from_pilot, FinalFit, PenaltyScope, TuningConfig};
use crate::rng::{self, tag};
use crate::stats;

const COEF_BLOCK: usize = 5;

/// Whether covariate `k` and equation `j` fall in the same block of five.
pub fn same_block(j: usize, k: usize) -> bool {
    j / COEF_BLOCK == k / COEF_BLOCK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IidScenario {
    pub j: usize,
    pub k: usize,
    pub n: usize,
    #[serde(default = "default_gamma")]
    pub toeplitz_gamma: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_signal() -> f64 {
    10.0
}

impl IidScenario {
    pub fn new(j: usize, k: usize, n: usize) -> Self {
        Self {
            j,
            k,
            n,
            toeplitz_gamma: 0.5,
            signal: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepScenario {
    pub j: usize,
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_df")]
    pub innovation_df: f64,
    #[serde(default = "default_signal")]
    pub signal: f64,
}

fn default_truncation() -> usize {
    1000
}

fn default_df() -> f64 {
    8.0
}

impl DepScenario {
    pub fn new(j: usize, k: usize, n: usize, rho: f64) -> Self {
        Self {
            j,
            k,
            n,
            rho,
            truncation: 1000,
            innovation_df: 8.0,
            signal: 10.0,
        }
    }
}

/// Law of the common target coefficient `α⁰`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Alpha0Law {
    Zero,
    Uniform { upper: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceScenario {
    pub j: usize,
    pub k: usize,
    pub n: usize,
    pub rho: f64,
    pub alpha0: Alpha0Law,
    #[serde(default = "default_truncation")]
    pub truncation: usize,
    #[serde(default = "default_df")]
    pub innovation_df: f64,
    #[serde(default = "default_beta_upper")]
    pub beta_upper: f64,
    #[serde(default = "default_theta_upper")]
    pub theta_upper: f64,
}

fn default_beta_upper() -> f64 {
    5.0
}

fn default_theta_upper() -> f64 {
    0.25
}

impl InferenceScenario {
    pub fn new(j: usize, k: usize, n: usize, rho: f64, alpha0: Alpha0Law) -> Self {
        Self {
            j,
            k,
            n,
            rho,
            alpha0,
            truncation: 1000,
            innovation_df: 8.0,
            beta_upper: 5.0,
            theta_upper: 0.25,
        }
    }

    fn process(&self) -> DepScenario {
        DepScenario {
            j: self.j,
            k: self.k,
            n: self.n,
            rho: self.rho,
            truncation: self.truncation,
            innovation_df: self.innovation_df,
            signal: 0.0,
        }
    }
}

/// True coefficients in each equation's covariate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub coefficients: Vec<Vec<f64>>,
    /// Nodewise coefficients `θ⁰_j` (inference design only).
    pub theta: Option<Vec<Vec<f64>>>,
    pub alpha0: Option<f64>,
    /// Target coefficients, `(j, 0)` for the inference design.
    pub targets: Vec<(usize, usize)>,
    /// `K` is not a multiple of the block length.
    pub short_block: bool,
}

fn check_dims(j: usize, k: usize, n: usize) -> Result<()> {
    if j == 0 || k == 0 || n < 4 {
        return config(format!("scenario needs J, K >= 1 and n >= 4, got J={j}, K={k}, n={n}"));
    }
    Ok(())
}

fn block_coefficients(j_count: usize, k: usize, mut value: impl FnMut() -> f64) -> Vec<Vec<f64>> {
    (0..j_count)
        .map(|j| (0..k).map(|c| if same_block(j, c) { value() } else { 0.0 }).collect())
        .collect()
}

fn responses(x: &DMatrix<f64>, coefs: &[Vec<f64>], noise: &DMatrix<f64>) -> DMatrix<f64> {
    let b = DMatrix::from_fn(x.ncols(), coefs.len(), |c, j| coefs[j][c]);
    x * b + noise
}

fn shared_specs(j: usize, k: usize) -> Vec<EquationSpec> {
    (0..j).map(|e| EquationSpec::new(e, (0..k).collect(), false)).collect()
}

/// Gaussian rows with covariance `γ^{|k1-k2|}`.
pub fn toeplitz_gaussian(n: usize, k: usize, gamma: f64, r: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    let sigma = DMatrix::from_fn(k, k, |a, b| gamma.powi((a as i32 - b as i32).abs()));
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Config(format!("Toeplitz covariance with gamma {gamma} is not positive definite")))?;
    let z: DMatrix<f64> = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(r));
    Ok(z * chol.l().transpose())
}

pub fn gen_iid(s: &IidScenario, seed: u64) -> Result<(PanelDataset, Truth)> {
    check_dims(s.j, s.k, s.n)?;
    let mut rx = rng::stream(seed, &[tag::DGP, 0]);
    let mut re = rng::stream(seed, &[tag::DGP, 1]);
    let x = toeplitz_gaussian(s.n, s.k, s.toeplitz_gamma, &mut rx)?;
    let coefs = block_coefficients(s.j, s.k, || s.signal);
    let noise = DMatrix::from_fn(s.n, s.j, |_, _| -> f64 { StandardNormal.sample(&mut re) });
    let y = responses(&x, &coefs, &noise);
    let data = PanelDataset::new(y, x, shared_specs(s.j, s.k))?;
    Ok((
        data,
        Truth {
            coefficients: coefs,
            theta: None,
            alpha0: None,
            targets: Vec::new(),
            short_block: s.k % COEF_BLOCK != 0,
        },
    ))
}

/// `e_t ~ t(df) / √(df/(df-2))`, `ξ_t = e_t (0.8 e²_{t-1} + 0.2)^{1/2}`;
/// returns a `dim × len` matrix.
pub fn arch_innovations(dim: usize, len: usize, df: f64, r: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if !(df > 2.0) {
        return config(format!("innovation degrees of freedom must exceed 2, got {df}"));
    }
    let t = StudentT::new(df).map_err(|e| Error::Config(format!("Student-t law: {e}")))?;
    let scale = ((df - 2.0) / df).sqrt();
    let e = DMatrix::from_fn(dim, len + 1, |_, _| t.sample(r) * scale);
    Ok(DMatrix::from_fn(dim, len, |k, c| {
        let prev = e[(k, c)];
        e[(k, c + 1)] * (0.8 * prev * prev + 0.2).sqrt()
    }))
}

/// `X_t = Σ_{ℓ=0}^{L} (ℓ+1)^{-ρ-1} M_ℓ ξ_{t-ℓ}` with Ginibre `M_ℓ`, as `n × dim`.
pub fn linear_process(dim: usize, n: usize, rho: f64, truncation: usize, df: f64, r: &mut ChaCha8Rng) -> Result<DMatrix<f64>> {
    if !(rho > 0.0) {
        return config(format!("decay exponent rho must be positive, got {rho}"));
    }
    if truncation == 0 {
        return config("truncation must be at least 1");
    }
    let weights: Vec<f64> = (0..=truncation).map(|l| ((l + 1) as f64).powf(-rho - 1.0)).collect();
    let mut m = DMatrix::zeros(dim, dim);
    let mut mats = Vec::with_capacity(truncation + 1);
    for &w in &weights {
        for v in m.iter_mut() {
            let z: f64 = StandardNormal.sample(r);
            *v = w * z;
        }
        mats.push(m.clone());
    }
    let xi = arch_innovations(dim, n + truncation, df, r)?;
    let mut x = DMatrix::zeros(dim, n);
    for (l, a) in mats.iter().enumerate() {
        let lagged = xi.columns(truncation - l, n);
        x.gemm(1.0, a, &lagged, 1.0);
    }
    Ok(x.transpose())
}

pub fn gen_dependent(s: &DepScenario, seed: u64) -> Result<(PanelDataset, Truth)> {
    check_dims(s.j, s.k, s.n)?;
    let mut rx = rng::stream(seed, &[tag::DGP, 0]);
    let mut re = rng::stream(seed, &[tag::DGP, 1]);
    let x = linear_process(s.k, s.n, s.rho, s.truncation, s.innovation_df, &mut rx)?;
    let noise = linear_process(s.j, s.n, s.rho, s.truncation, s.innovation_df, &mut re)?;
    let coefs = block_coefficients(s.j, s.k, || s.signal);
    let y = responses(&x, &coefs, &noise);
    let data = PanelDataset::new(y, x, shared_specs(s.j, s.k))?;
    Ok((
        data,
        Truth {
            coefficients: coefs,
            theta: None,
            alpha0: None,
            targets: Vec::new(),
            short_block: s.k % COEF_BLOCK != 0,
        },
    ))
}

/// `Y_j = d_j α⁰ + X β_j + ε_j`, `d_j = X θ_j + v_j`. The pool holds
/// `[d_1, ..., d_J, X_1, ..., X_K]` and equation `j` uses `[d_j, X]`.
pub fn gen_inference(s: &InferenceScenario, seed: u64) -> Result<(PanelDataset, Truth)> {
    check_dims(s.j, s.k, s.n)?;
    let p = s.process();
    let mut rx = rng::stream(seed, &[tag::DGP, 0]);
    let mut re = rng::stream(seed, &[tag::DGP, 1]);
    let mut rv = rng::stream(seed, &[tag::DGP, 2]);
    let mut rc = rng::stream(seed, &[tag::DGP, 3]);
    let x = linear_process(s.k, s.n, p.rho, p.truncation, p.innovation_df, &mut rx)?;
    let eps = linear_process(s.j, s.n, p.rho, p.truncation, p.innovation_df, &mut re)?;
    let v = linear_process(s.j, s.n, p.rho, p.truncation, p.innovation_df, &mut rv)?;
    let alpha0 = match s.alpha0 {
        Alpha0Law::Zero => 0.0,
        Alpha0Law::Uniform { upper } => {
            if !(upper > 0.0) {
                return config("alpha0 upper bound must be positive");
            }
            rc.random_range(0.0..upper)
        }
    };
    let beta = block_coefficients(s.j, s.k, || rc.random_range(0.0..s.beta_upper));
    let theta = block_coefficients(s.j, s.k, || rc.random_range(0.0..s.theta_upper));
    let d = responses(&x, &theta, &v);
    let y = responses(&x, &beta, &eps) + &d * alpha0;
    let mut pool = DMatrix::zeros(s.n, s.j + s.k);
    pool.columns_mut(0, s.j).copy_from(&d);
    pool.columns_mut(s.j, s.k).copy_from(&x);
    let specs = (0..s.j)
        .map(|j| {
            let mut cols = vec![j];
            cols.extend(s.j..s.j + s.k);
            EquationSpec::new(j, cols, false)
        })
        .collect();
    let coefficients = beta
        .iter()
        .map(|b| std::iter::once(alpha0).chain(b.iter().copied()).collect())
        .collect();
    let data = PanelDataset::new(y, pool, specs)?;
    Ok((
        data,
        Truth {
            coefficients,
            theta: Some(theta),
            alpha0: Some(alpha0),
            targets: (0..s.j).map(|j| (j, 0)).collect(),
            short_block: s.k % COEF_BLOCK != 0,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    Iid(IidScenario),
    Dep(DepScenario),
    Infer(InferenceScenario),
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Iid(_) => "iid",
            Scenario::Dep(_) => "dep",
            Scenario::Infer(_) => "infer",
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Scenario::Iid(s) => (s.j, s.k, s.n),
            Scenario::Dep(s) => (s.j, s.k, s.n),
            Scenario::Infer(s) => (s.j, s.k, s.n),
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self {
            Scenario::Iid(_) => None,
            Scenario::Dep(s) => Some(s.rho),
            Scenario::Infer(s) => Some(s.rho),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<(PanelDataset, Truth)> {
        match self {
            Scenario::Iid(s) => gen_iid(s, seed),
            Scenario::Dep(s) => gen_dependent(s, seed),
            Scenario::Infer(s) => gen_inference(s, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tuning: TuningConfig,
    /// Block sizes to evaluate with the joint penalty in addition to
    /// `tuning.block_size`.
    #[serde(default)]
    pub block_grid: Vec<usize>,
    #[serde(default = "default_final_fit")]
    pub final_fit: FinalFit,
    #[serde(default)]
    pub debias: DebiasConfig,
    #[serde(default = "default_inference_draws")]
    pub inference_draws: usize,
    #[serde(default = "default_inference_alpha")]
    pub inference_alpha: f64,
    /// JSON-lines file of finished replications, appended as they complete.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_final_fit() -> FinalFit {
    FinalFit::PostLasso
}

fn default_inference_draws() -> usize {
    1000
}

fn default_inference_alpha() -> f64 {
    0.05
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, replications: usize, seed: u64) -> Self {
        Self {
            scenario,
            replications,
            seed,
            tuning: TuningConfig::default(),
            block_grid: Vec::new(),
            final_fit: FinalFit::PostLasso,
            debias: DebiasConfig::default(),
            inference_draws: 1000,
            inference_alpha: 0.05,
            checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return config("replications must be positive");
        }
        self.tuning.validate()?;
        if self.block_grid.contains(&0) {
            return config("block grid entries must be positive");
        }
        if !(self.inference_alpha > 0.0 && self.inference_alpha < 1.0) {
            return config("inference alpha must lie in (0, 1)");
        }
        if matches!(self.scenario, Scenario::Infer(_)) && self.inference_draws == 0 {
            return config("inference draws must be positive");
        }
        Ok(())
    }

    /// Identity of everything that affects replication results.
    fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.replications = 0;
        c.checkpoint = None;
        Ok(serde_json::to_string(&c)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResults {
    pub config: ExperimentConfig,
    pub replications: Vec<ReplicationResult>,
    pub summary: Vec<MetricSummary>,
}

impl ExperimentResults {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|m| m.metric == name)
    }

    /// Per-replication values of one metric, in replication order.
    pub fn values(&self, name: &str) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.metrics.get(name).copied()).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scenario", "J", "K", "n", "rho", "b_n", "metric", "mean", "median", "sd", "R", "seed"])?;
        let (j, k, n) = self.config.scenario.dims();
        let rho = self.config.scenario.rho().map(|r| r.to_string()).unwrap_or_default();
        for m in &self.summary {
            w.write_record([
                self.config.scenario.name().to_string(),
                j.to_string(),
                k.to_string(),
                n.to_string(),
                rho.clone(),
                self.config.tuning.block_size.to_string(),
                m.metric.clone(),
                format!("{:.16e}", m.mean),
                format!("{:.16e}", m.median),
                format!("{:.16e}", m.sd),
                self.replications.len().to_string(),
                self.config.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn ratio_of_means(a: &[f64], b: &[f64]) -> f64 {
    stats::mean(a) / stats::mean(b)
}

/// Per-equation ratios averaged over equations.
fn mean_ratio(a: &[f64], b: &[f64]) -> f64 {
    let r: Vec<f64> = a.iter().zip(b).map(|(x, y)| x / y).collect();
    stats::mean(&r)
}

fn euclidean_errors(fits: &[crate::lasso::LassoFit], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    fits.iter()
        .zip(truth)
        .map(|(f, t)| f.coef.difference(t).map(|d| crate::data::euclidean_norm(&d)))
        .collect()
}

fn prediction_errors(data: &PanelDataset, fits: &[crate::lasso::LassoFit], truth: &[Vec<f64>]) -> Result<Vec<f64>> {
    fits.iter()
        .enumerate()
        .map(|(j, f)| {
            let d: CoefVector = f.coef.difference(&truth[j])?;
            data.design(j).prediction_norm(&d.values)
        })
        .collect()
}

/// One replication: generate, tune, fit and (for inference designs) test.
pub fn run_replication(cfg: &ExperimentConfig, replication: usize) -> Result<ReplicationResult> {
    let rep_seed = rng::derive_seed(cfg.seed, &[tag::EXPERIMENT, replication as u64]);
    let (data, truth) = cfg.scenario.generate(rep_seed)?;
    let tuning = TuningConfig {
        seed: rng::derive_seed(rep_seed, &[tag::PENALTY]),
        ..cfg.tuning.clone()
    };
    let pilot = run_pilot(&data, &tuning)?;
    let mut metrics = BTreeMap::new();
    match &cfg.scenario {
        Scenario::Infer(_) => {
            let joint = tune_from_pilot(&data, &pilot, &TuningConfig { scope: PenaltyScope::Joint, ..tuning.clone() })?;
            let targets = TargetSet::new(truth.targets.clone(), &data)?;
            let ests = run_algorithm(&data, &targets, &joint.plan, &cfg.debias)?;
            let boot_seed = rng::derive_seed(rep_seed, &[tag::PIVOT]);
            let crit = bootstrap_pivots(&ests, &joint.plan.scheme, cfg.inference_draws, boot_seed, cfg.inference_alpha)?;
            let nulls = vec![0.0; ests.len()];
            let report = build_report(&data, &ests, &crit, &nulls)?;
            let frac = |f: &dyn Fn(&crate::inference::TargetReport) -> bool| {
                report.rows.iter().filter(|r| f(r)).count() as f64 / report.rows.len() as f64
            };
            metrics.insert("reject_asymptotic".into(), frac(&|r| r.reject_asymptotic));
            metrics.insert("reject_individual".into(), frac(&|r| r.reject_individual));
            metrics.insert("reject_stepdown".into(), frac(&|r| r.reject_stepdown));
            metrics.insert("reject_simultaneous".into(), f64::from(u8::from(report.joint_reject)));
            metrics.insert("alpha0".into(), truth.alpha0.unwrap_or(0.0));
            let truth_alpha = truth.alpha0.unwrap_or(0.0);
            let covered = report.rows.iter().filter(|r| r.ci_bootstrap.contains(truth_alpha)).count();
            metrics.insert("coverage_individual".into(), covered as f64 / report.rows.len() as f64);
        }
        _ => {
            let outcome = tune_from_pilot(&data, &pilot, &tuning)?;
            let joint_plan = outcome.plan_for_scope(&data, PenaltyScope::Joint);
            let per_plan = outcome.plan_for_scope(&data, PenaltyScope::PerEquation);
            let joint = fit_system(&data, &joint_plan, cfg.final_fit, &tuning.solver)?;
            let per = fit_system(&data, &per_plan, cfg.final_fit, &tuning.solver)?;
            let pj = prediction_errors(&data, &joint, &truth.coefficients)?;
            let pp = prediction_errors(&data, &per, &truth.coefficients)?;
            let ej = euclidean_errors(&joint, &truth.coefficients)?;
            let ep = euclidean_errors(&per, &truth.coefficients)?;
            metrics.insert("pred_norm_joint".into(), stats::mean(&pj));
            metrics.insert("pred_norm_per_equation".into(), stats::mean(&pp));
            metrics.insert("pred_norm_ratio".into(), mean_ratio(&pj, &pp));
            metrics.insert("euclid_norm_ratio".into(), mean_ratio(&ej, &ep));
            metrics.insert("pred_norm_ratio_of_means".into(), ratio_of_means(&pj, &pp));
            metrics.insert("euclid_norm_ratio_of_means".into(), ratio_of_means(&ej, &ep));
            metrics.insert("lambda_joint".into(), joint_plan.lambdas[0]);
            metrics.insert("lambda_per_equation_mean".into(), stats::mean(&per_plan.lambdas));
            for &b in &cfg.block_grid {
                if 2 * b > data.n() {
                    continue;
                }
                let plan = if b == tuning.block_size {
                    joint_plan.clone()
                } else {
                    let t = TuningConfig {
                        block_size: b,
                        scope: PenaltyScope::Joint,
                        ..tuning.clone()
                    };
                    tune_from_pilot(&data, &pilot, &t)?.plan
                };
                let fits = fit_system(&data, &plan, cfg.final_fit, &tuning.solver)?;
                metrics.insert(format!("pred_norm_joint_b{b}"), mean_prediction_error(&data, &fits, &truth.coefficients)?);
            }
        }
    }
    Ok(ReplicationResult { replication, metrics })
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CheckpointLine {
    Header { fingerprint: String },
    Result(ReplicationResult),
}

fn read_checkpoint(path: &Path, fingerprint: &str) -> Result<Vec<ReplicationResult>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut done = Vec::new();
    let mut header_ok = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CheckpointLine>(&line) {
            Ok(CheckpointLine::Header { fingerprint: f }) => {
                if f != fingerprint {
                    return config(format!("checkpoint {} was written by a different experiment", path.display()));
                }
                header_ok = true;
            }
            Ok(CheckpointLine::Result(r)) if header_ok => done.push(r),
            // A torn final line from an interrupted run is ignored.
            Err(_) if i > 0 => log::warn!("ignoring unreadable checkpoint line {}", i + 1),
            _ => return config(format!("checkpoint {} has no valid header", path.display())),
        }
    }
    Ok(done)
}

/// Runs every replication in parallel and summarizes each metric.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint()?;
    let mut done: BTreeMap<usize, ReplicationResult> = BTreeMap::new();
    let mut sink = None;
    if let Some(path) = &cfg.checkpoint {
        for r in read_checkpoint(path, &fingerprint)? {
            if r.replication < cfg.replications {
                done.insert(r.replication, r);
            }
        }
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", serde_json::to_string(&CheckpointLine::Header { fingerprint: fingerprint.clone() })?)?;
        }
        sink = Some(std::sync::Mutex::new(f));
    }
    let todo: Vec<usize> = (0..cfg.replications).filter(|r| !done.contains_key(r)).collect();
    if !done.is_empty() {
        log::info!("resuming: {} of {} replications already done", done.len(), cfg.replications);
    }
    let fresh: Vec<ReplicationResult> = todo
        .par_iter()
        .map(|&rep| {
            let r = run_replication(cfg, rep)?;
            if let Some(sink) = &sink {
                let line = serde_json::to_string(&CheckpointLine::Result(r.clone()))?;
                let mut f = sink.lock().expect("checkpoint lock");
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            Ok(r)
        })
        .collect::<Result<_>>()?;
    for r in fresh {
        done.insert(r.replication, r);
    }
    let replications: Vec<ReplicationResult> = done.into_values().collect();
    let mut names: Vec<String> = replications.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let summary = names
        .into_iter()
        .map(|metric| {
            let vals: Vec<f64> = replications.iter().filter_map(|r| r.metrics.get(&metric).copied()).collect();
            MetricSummary {
                mean: stats::mean(&vals),
                median: stats::median(&vals),
                sd: if vals.len() > 1 { stats::sd(&vals) } else { 0.0 },
                metric,
            }
        })
        .collect();
    Ok(ExperimentResults {
        config: cfg.clone(),
        replications,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (stats::mean(a), stats::mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn col(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
        m.column(c).iter().copied().collect()
    }

    fn lag1(x: &[f64]) -> f64 {
        corr(&x[1..], &x[..x.len() - 1])
    }

    #[test]
    fn identity_covariance_limit() {
        let mut r = rng::stream(1, &[1]);
        let x = toeplitz_gaussian(2000, 6, 0.0, &mut r).unwrap();
        for a in 0..6 {
            for b in 0..a {
                assert!(corr(&col(&x, a), &col(&x, b)).abs() < 0.1);
            }
        }
    }

    #[test]
    fn toeplitz_neighbour_covariance() {
        let mut r = rng::stream(2, &[1]);
        let x = toeplitz_gaussian(5000, 4, 0.5, &mut r).unwrap();
        let (a, b) = (col(&x, 0), col(&x, 1));
        let cov = a.iter().zip(&b).map(|(u, v)| u * v).sum::<f64>() / 5000.0;
        assert!((cov - 0.5).abs() < 0.05, "{cov}");
    }

    #[test]
    fn iid_truth_has_block_structure() {
        let (data, truth) = gen_iid(&IidScenario::new(12, 20, 30), 3).unwrap();
        assert_eq!(data.n(), 30);
        for (j, b) in truth.coefficients.iter().enumerate() {
            let nz: Vec<usize> = (0..20).filter(|&k| b[k] != 0.0).collect();
            assert_eq!(nz.len(), 5);
            assert!(nz.iter().all(|&k| same_block(j, k) && b[k] == 10.0));
        }
        assert!(!truth.short_block);
        let (_, t) = gen_iid(&IidScenario::new(2, 7, 30), 3).unwrap();
        assert!(t.short_block);
        assert_eq!(t.coefficients[1].iter().filter(|&&v| v != 0.0).count(), 5);
    }

    #[test]
    fn innovation_variance_is_one() {
        let mut r = rng::stream(4, &[1]);
        let xi = arch_innovations(5, 20_000, 8.0, &mut r).unwrap();
        let mut vars = Vec::new();
        for k in 0..5 {
            let row: Vec<f64> = xi.row(k).iter().copied().collect();
            vars.push(row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64);
        }
        let v = stats::mean(&vars);
        assert!((v - 1.0).abs() < 0.1, "{v}");
    }

    #[test]
    fn fast_decay_has_no_memory() {
        let mut r = rng::stream(5, &[1]);
        let x = linear_process(4, 2000, 50.0, 1000, 8.0, &mut r).unwrap();
        for c in 0..4 {
            assert!(lag1(&col(&x, c)).abs() < 0.1);
        }
    }

    #[test]
    fn slower_decay_has_more_memory() {
        let (mut strong, mut weak) = (0.0, 0.0);
        for seed in 0..10 {
            let s = gen_dependent(&DepScenario::new(1, 10, 200, 0.1), seed).unwrap().0;
            let w = gen_dependent(&DepScenario::new(1, 10, 200, 1.0), seed).unwrap().0;
            for c in 0..10 {
                strong += lag1(&col(s.covariate_pool(), c)).abs();
                weak += lag1(&col(w.covariate_pool(), c)).abs();
            }
        }
        assert!(strong > weak, "{strong} vs {weak}");
    }

    #[test]
    fn inference_null_truth() {
        let s = InferenceScenario::new(6, 10, 40, 0.5, Alpha0Law::Zero);
        let (data, truth) = gen_inference(&s, 6).unwrap();
        assert_eq!(truth.alpha0, Some(0.0));
        assert!(truth.coefficients.iter().all(|c| c[0] == 0.0));
        assert_eq!(data.pool_width(), 16);
        assert_eq!(data.spec(2).covariate_indices[0], 2);
        assert_eq!(truth.targets, (0..6).map(|j| (j, 0)).collect::<Vec<_>>());
        let theta = truth.theta.unwrap();
        for (j, th) in theta.iter().enumerate() {
            for (k, &v) in th.iter().enumerate() {
                assert_eq!(v != 0.0, same_block(j, k));
                assert!((0.0..0.25).contains(&v));
            }
        }
    }

    #[test]
    fn nodewise_coefficients_are_recoverable() {
        let s = InferenceScenario {
            truncation: 50,
            ..InferenceScenario::new(2, 5, 5000, 1.0, Alpha0Law::Uniform { upper: 5.0 })
        };
        let (data, truth) = gen_inference(&s, 7).unwrap();
        let theta = truth.theta.unwrap();
        let x = data.covariate_pool().columns(2, 5).into_owned();
        for j in 0..2 {
            let d = data.covariate_pool().column(j).into_owned();
            let coef = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * d));
            for k in 0..5 {
                assert!((coef[k] - theta[j][k]).abs() < 0.05, "{} vs {}", coef[k], theta[j][k]);
            }
        }
        let a = truth.alpha0.unwrap();
        assert!(truth.coefficients.iter().all(|c| c[0] == a));
    }

    #[test]
    fn generators_are_deterministic() {
        let s = DepScenario {
            truncation: 30,
            ..DepScenario::new(3, 5, 25, 0.3)
        };
        let a = gen_dependent(&s, 9).unwrap().0;
        let b = gen_dependent(&s, 9).unwrap().0;
        assert_eq!(a.covariate_pool(), b.covariate_pool());
        assert_eq!(a.responses(), b.responses());
        let c = gen_dependent(&s, 10).unwrap().0;
        assert_ne!(a.responses(), c.responses());
    }

    #[test]
    fn single_replication_smoke_and_resume() {
        let mut cfg = ExperimentConfig::new(Scenario::Iid(IidScenario::new(4, 10, 40)), 3, 11);
        cfg.tuning.draws = 200;
        cfg.block_grid = vec![1, 2, 30];
        let full = run_experiment(&cfg).unwrap();
        assert_eq!(full.replications.len(), 3);
        assert!(full.metric("pred_norm_ratio").is_some());
        assert!(full.metric("pred_norm_joint_b2").is_some());
        assert!(full.metric("pred_norm_joint_b30").is_none());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.jsonl");
        let mut partial = cfg.clone();
        partial.replications = 2;
        partial.checkpoint = Some(path.clone());
        run_experiment(&partial).unwrap();
        let mut resumed = cfg.clone();
        resumed.checkpoint = Some(path.clone());
        let r = run_experiment(&resumed).unwrap();
        assert_eq!(r.replications, full.replications);
        let mut other = resumed.clone();
        other.seed = 12;
        assert!(matches!(run_experiment(&other), Err(Error::Config(_))));

        let mut buf = Vec::new();
        full.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,J,K,n,rho,b_n,metric,mean,median,sd,R,seed"));
        assert_eq!(text.lines().count(), 1 + full.summary.len());
    }

    #[test]
    fn inference_replication_reports_rates() {
        let mut cfg = ExperimentConfig::new(
            Scenario::Infer(InferenceScenario {
                truncation: 50,
                ..InferenceScenario::new(5, 10, 60, 1.0, Alpha0Law::Zero)
            }),
            1,
            3,
        );
        cfg.tuning.draws = 200;
        cfg.tuning.block_size = 2;
        cfg.inference_draws = 200;
        let r = run_experiment(&cfg).unwrap();
        for m in ["reject_individual", "reject_simultaneous", "reject_stepdown", "reject_asymptotic"] {
            let v = r.metric(m).unwrap().mean;
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
