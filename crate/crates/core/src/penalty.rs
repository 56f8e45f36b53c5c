//! Penalty level selection.
//!
//! The pipeline mirrors the three-stage procedure for dependent data:
//!
//! 1. a pilot LASSO per equation with the canonical Gaussian level and
//!    loadings built from the centered responses,
//! 2. loadings refined from the pilot residuals,
//! 3. the final level `λ = 2c√n q(1-α)` from a non-overlapping block
//!    multiplier bootstrap of `max |Z_jk / Ψ_jk|`.
//!
//! Per-equation levels `λ_j` are read off the same bootstrap draws, so the
//! joint level always dominates every per-equation level.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoefVector, PanelDataset};
use crate::error::{config, Error, Result};
use crate::lasso::{post_lasso_ols, solve_lasso, LassoFit, LassoProblem, SolverOptions};
use crate::lrv::{self, BlockScheme, HacOptions, LoadingMatrix};
use crate::rng::{self, tag};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyScope {
    Joint,
    PerEquation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMethod {
    GaussianCanonical,
    Bootstrap,
}

/// Final estimator applied with a selected penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinalFit {
    Lasso,
    PostLasso,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub scope: PenaltyScope,
    pub method: PenaltyMethod,
    pub alpha: f64,
    pub c: f64,
    /// Bootstrap replications `B`.
    pub draws: usize,
    /// Block size `b_n`.
    pub block_size: usize,
    /// Newey–West bandwidth; automatic when `None`.
    pub bandwidth: Option<usize>,
    pub pilot_alpha: f64,
    pub pilot_c: f64,
    /// Pilot fit and loading updates performed after the preliminary loadings.
    pub loading_passes: usize,
    /// Residuals feeding the refined loadings come from this refit of the pilot.
    pub pilot_refit: FinalFit,
    pub seed: u64,
    pub solver: SolverOptions,
}

pub const LOADING_PASSES: usize = 1;

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            scope: PenaltyScope::Joint,
            method: PenaltyMethod::Bootstrap,
            alpha: 0.1,
            c: 1.1,
            draws: 5000,
            block_size: 1,
            bandwidth: None,
            pilot_alpha: 0.1,
            pilot_c: 0.5,
            loading_passes: LOADING_PASSES,
            pilot_refit: FinalFit::PostLasso,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return config(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.c > 1.0) {
            return config(format!("c must exceed 1, got {}", self.c));
        }
        if !(self.pilot_alpha > 0.0 && self.pilot_alpha < 1.0) || !(self.pilot_c > 0.0) {
            return config("pilot alpha must lie in (0, 1) and pilot c must be positive");
        }
        if self.method == PenaltyMethod::Bootstrap && self.draws < 100 {
            return config(format!("at least 100 bootstrap draws are required, got {}", self.draws));
        }
        if self.block_size == 0 {
            return config("block size must be positive");
        }
        if self.loading_passes == 0 {
            return config("loading_passes must be at least 1");
        }
        Ok(())
    }
}

/// A selected penalty level with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPlan {
    pub scope: PenaltyScope,
    pub method: PenaltyMethod,
    pub alpha: f64,
    pub c: f64,
    /// Level used for each equation (all equal under joint scope).
    pub lambdas: Vec<f64>,
    pub loadings: LoadingMatrix,
    pub scheme: BlockScheme,
    pub draws: usize,
    pub seed: u64,
    /// Every bootstrap statistic was zero.
    pub degenerate: bool,
    pub diagnostics: Vec<String>,
}

impl PenaltyPlan {
    pub fn lambda(&self, j: usize) -> f64 {
        self.lambdas[j]
    }

    pub fn joint_lambda(&self) -> Option<f64> {
        match self.scope {
            PenaltyScope::Joint => self.lambdas.first().copied(),
            PenaltyScope::PerEquation => None,
        }
    }
}

/// Bootstrap maxima: `per_equation[(b, j)] = max_k |Z_jk^[b] / Ψ_jk|` and
/// `max_stats[b] = max_j per_equation[(b, j)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapDraws {
    pub per_equation: DMatrix<f64>,
    pub max_stats: Vec<f64>,
    pub seed: u64,
}

impl BootstrapDraws {
    pub fn len(&self) -> usize {
        self.max_stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.max_stats.is_empty()
    }

    pub fn joint_quantile(&self, level: f64) -> f64 {
        stats::order_statistic(&self.max_stats, level)
    }

    pub fn equation_quantile(&self, j: usize, level: f64) -> f64 {
        let col: Vec<f64> = self.per_equation.column(j).iter().copied().collect();
        stats::order_statistic(&col, level)
    }
}

/// `2c√n Φ⁻¹(1 - α/(2·K·J_eff))`.
pub fn lambda_gaussian_canonical(alpha: f64, c: f64, n: usize, k: usize, j_eff: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return config(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if !(c > 0.0) || k == 0 || j_eff == 0 {
        return config("canonical penalty needs c > 0, K >= 1 and J >= 1");
    }
    let tail = alpha / (2.0 * k as f64 * j_eff as f64);
    if tail >= 1.0 {
        return config("alpha / (2 K J) must be below 1");
    }
    Ok(2.0 * c * (n as f64).sqrt() * stats::normal_quantile(1.0 - tail))
}

/// Block sums of `ε_t X_tk / (√n Ψ_k)` for one equation, `l_n × K`.
fn scaled_block_sums(x: &DMatrix<f64>, resid: &[f64], loadings: &[f64], scheme: &BlockScheme) -> DMatrix<f64> {
    let sqrt_n = (x.nrows() as f64).sqrt();
    DMatrix::from_fn(scheme.block_count, x.ncols(), |i, k| {
        let start = i * scheme.block_size;
        let s: f64 = (start..start + scheme.block_size).map(|t| resid[t] * x[(t, k)]).sum();
        s / (sqrt_n * loadings[k])
    })
}

/// Multipliers `e_{j,i}` for draw `b`, equation `j`.
pub(crate) fn multipliers(seed: u64, domain: u64, draw: usize, equation: usize, blocks: usize) -> impl Iterator<Item = f64> {
    let mut r = rng::stream(seed, &[domain, draw as u64, equation as u64]);
    (0..blocks).map(move |_| StandardNormal.sample(&mut r))
}

/// Draws `B` bootstrap maxima of the standardized block multiplier scores.
pub fn bootstrap_max_stats(
    data: &PanelDataset,
    residuals: &[Vec<f64>],
    loadings: &LoadingMatrix,
    scheme: &BlockScheme,
    draws: usize,
    seed: u64,
) -> Result<BootstrapDraws> {
    let n_eq = data.num_equations();
    if residuals.len() != n_eq || loadings.values.len() != n_eq {
        return config("residuals and loadings must cover every equation");
    }
    if scheme.block_count < 2 {
        return config("block scheme leaves fewer than 2 blocks");
    }
    if draws == 0 {
        return config("need at least one bootstrap draw");
    }
    for j in 0..n_eq {
        if residuals[j].len() != data.n() {
            return config(format!("equation {j}: residual length differs from n"));
        }
    }
    let columns: Vec<Vec<f64>> = (0..n_eq)
        .into_par_iter()
        .map(|j| {
            let sums = scaled_block_sums(data.design(j).x(), &residuals[j], loadings.row(j), scheme);
            let mut e = DMatrix::zeros(draws, scheme.block_count);
            for b in 0..draws {
                for (i, v) in multipliers(seed, tag::PENALTY, b, j, scheme.block_count).enumerate() {
                    e[(b, i)] = v;
                }
            }
            let z = e * sums;
            (0..draws).map(|b| z.row(b).amax()).collect()
        })
        .collect();
    let per_equation = DMatrix::from_fn(draws, n_eq, |b, j| columns[j][b]);
    let max_stats = (0..draws).map(|b| per_equation.row(b).max()).collect();
    Ok(BootstrapDraws {
        per_equation,
        max_stats,
        seed,
    })
}

fn plan_from_draws(
    draws: &BootstrapDraws,
    data: &PanelDataset,
    loadings: &LoadingMatrix,
    scheme: &BlockScheme,
    alpha: f64,
    c: f64,
    scope: PenaltyScope,
) -> PenaltyPlan {
    let scale = 2.0 * c * (data.n() as f64).sqrt();
    let level = 1.0 - alpha;
    let lambdas: Vec<f64> = match scope {
        PenaltyScope::Joint => vec![scale * draws.joint_quantile(level); data.num_equations()],
        PenaltyScope::PerEquation => (0..data.num_equations())
            .map(|j| scale * draws.equation_quantile(j, level))
            .collect(),
    };
    let degenerate = draws.max_stats.iter().all(|&v| v == 0.0);
    let mut diagnostics = Vec::new();
    if degenerate {
        diagnostics.push("all bootstrap statistics are zero; penalty level is 0".into());
    }
    if loadings.any_floored() {
        diagnostics.push(format!("{} penalty loadings hit the variance floor", loadings.floored_count()));
    }
    PenaltyPlan {
        scope,
        method: PenaltyMethod::Bootstrap,
        alpha,
        c,
        lambdas,
        loadings: loadings.clone(),
        scheme: *scheme,
        draws: draws.len(),
        seed: draws.seed,
        degenerate,
        diagnostics,
    }
}

/// Bootstrap penalty level for the given scope.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_penalty(
    data: &PanelDataset,
    residuals: &[Vec<f64>],
    loadings: &LoadingMatrix,
    scheme: &BlockScheme,
    draws: usize,
    alpha: f64,
    c: f64,
    seed: u64,
    scope: PenaltyScope,
) -> Result<(PenaltyPlan, BootstrapDraws)> {
    if !(alpha > 0.0 && alpha < 1.0) || !(c > 0.0) {
        return config("bootstrap penalty needs alpha in (0, 1) and c > 0");
    }
    let bd = bootstrap_max_stats(data, residuals, loadings, scheme, draws, seed)?;
    let plan = plan_from_draws(&bd, data, loadings, scheme, alpha, c, scope);
    Ok((plan, bd))
}

/// Result of the pilot stage.
#[derive(Debug, Clone)]
pub struct PilotStage {
    pub pilots: Vec<LassoFit>,
    pub pilot_lambdas: Vec<f64>,
    pub preliminary_loadings: LoadingMatrix,
    /// Loadings from the pilot residuals.
    pub loadings: LoadingMatrix,
    pub hac: HacOptions,
}

impl PilotStage {
    pub fn residuals(&self) -> Vec<Vec<f64>> {
        self.pilots.iter().map(|f| f.residuals.clone()).collect()
    }
}

/// Pilot fits with the canonical Gaussian level and refined loadings.
pub fn run_pilot(data: &PanelDataset, config: &TuningConfig) -> Result<PilotStage> {
    config.validate()?;
    let n = data.n();
    let hac = HacOptions::resolve(config.bandwidth, n);
    // Preliminary errors: centered responses.
    let prelim: Vec<Vec<f64>> = (0..data.num_equations())
        .map(|j| {
            let y = data.responses().column(data.spec(j).response_index);
            let m = y.mean();
            y.iter().map(|v| v - m).collect()
        })
        .collect();
    let preliminary_loadings = lrv::compute_loadings(data, &prelim, &hac)?;
    let pilot_lambdas = (0..data.num_equations())
        .map(|j| lambda_gaussian_canonical(config.pilot_alpha, config.pilot_c, n, data.spec(j).num_covariates(), 1))
        .collect::<Result<Vec<_>>>()?;
    let mut loadings = preliminary_loadings.clone();
    let mut pilots = Vec::new();
    for _ in 0..config.loading_passes {
        pilots = (0..data.num_equations())
            .into_par_iter()
            .map(|j| {
                let p = LassoProblem::new(j, data.design(j), data.response(j), pilot_lambdas[j], loadings.row(j));
                let fit = solve_lasso(&p, &config.solver)?;
                match config.pilot_refit {
                    FinalFit::Lasso => Ok(fit),
                    FinalFit::PostLasso => post_lasso_ols(&fit, data.design(j), data.response(j)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let resid: Vec<Vec<f64>> = pilots.iter().map(|f| f.residuals.clone()).collect();
        loadings = lrv::compute_loadings(data, &resid, &hac)?;
    }
    Ok(PilotStage {
        pilots,
        pilot_lambdas,
        preliminary_loadings,
        loadings,
        hac,
    })
}

/// Final tuning from a completed pilot stage.
pub fn tune_from_pilot(data: &PanelDataset, pilot: &PilotStage, config: &TuningConfig) -> Result<TuningOutcome> {
    config.validate()?;
    let scheme = BlockScheme::new(config.block_size, data.n())?;
    let mut diagnostics = vec![format!(
        "pilot stage used c' = {} < 1 and alpha' = {}",
        config.pilot_c, config.pilot_alpha
    )];
    match config.method {
        PenaltyMethod::Bootstrap => {
            let (mut plan, draws) = bootstrap_penalty(
                data,
                &pilot.residuals(),
                &pilot.loadings,
                &scheme,
                config.draws,
                config.alpha,
                config.c,
                config.seed,
                config.scope,
            )?;
            diagnostics.append(&mut plan.diagnostics);
            plan.diagnostics = diagnostics;
            Ok(TuningOutcome {
                plan,
                pilot: pilot.clone(),
                draws: Some(draws),
            })
        }
        PenaltyMethod::GaussianCanonical => {
            let n = data.n();
            let lambdas = match config.scope {
                PenaltyScope::Joint => {
                    // Heterogeneous K_j: the count of all (j, k) pairs plays the role of K·J.
                    let total: usize = data.specs().iter().map(|s| s.num_covariates()).sum();
                    vec![lambda_gaussian_canonical(config.alpha, config.c, n, total, 1)?; data.num_equations()]
                }
                PenaltyScope::PerEquation => (0..data.num_equations())
                    .map(|j| lambda_gaussian_canonical(config.alpha, config.c, n, data.spec(j).num_covariates(), 1))
                    .collect::<Result<Vec<_>>>()?,
            };
            if pilot.loadings.any_floored() {
                diagnostics.push(format!("{} penalty loadings hit the variance floor", pilot.loadings.floored_count()));
            }
            Ok(TuningOutcome {
                plan: PenaltyPlan {
                    scope: config.scope,
                    method: PenaltyMethod::GaussianCanonical,
                    alpha: config.alpha,
                    c: config.c,
                    lambdas,
                    loadings: pilot.loadings.clone(),
                    scheme,
                    draws: 0,
                    seed: config.seed,
                    degenerate: false,
                    diagnostics,
                },
                pilot: pilot.clone(),
                draws: None,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TuningOutcome {
    pub plan: PenaltyPlan,
    pub pilot: PilotStage,
    pub draws: Option<BootstrapDraws>,
}

impl TuningOutcome {
    /// Plan for another scope built from the same bootstrap draws.
    pub fn plan_for_scope(&self, data: &PanelDataset, scope: PenaltyScope) -> PenaltyPlan {
        match &self.draws {
            Some(d) => {
                let mut plan = plan_from_draws(d, data, &self.plan.loadings, &self.plan.scheme, self.plan.alpha, self.plan.c, scope);
                plan.diagnostics = self.plan.diagnostics.clone();
                plan
            }
            None => self.plan.clone(),
        }
    }
}

/// Pilot, loading refinement and final tuning in one call.
pub fn run_pilot_then_tune(data: &PanelDataset, config: &TuningConfig) -> Result<TuningOutcome> {
    let pilot = run_pilot(data, config)?;
    tune_from_pilot(data, &pilot, config)
}

/// Fits every equation with the plan's penalty.
pub fn fit_system(data: &PanelDataset, plan: &PenaltyPlan, kind: FinalFit, options: &SolverOptions) -> Result<Vec<LassoFit>> {
    if plan.lambdas.len() != data.num_equations() {
        return config("penalty plan does not match the number of equations");
    }
    (0..data.num_equations())
        .into_par_iter()
        .map(|j| fit_equation(data, j, plan, kind, options))
        .collect()
}

pub fn fit_equation(data: &PanelDataset, j: usize, plan: &PenaltyPlan, kind: FinalFit, options: &SolverOptions) -> Result<LassoFit> {
    let design = data.design(j);
    let y = data.response(j);
    let p = LassoProblem::new(j, design, y, plan.lambda(j), plan.loadings.row(j));
    let fit = solve_lasso(&p, options)?;
    match kind {
        FinalFit::Lasso => Ok(fit),
        FinalFit::PostLasso => post_lasso_ols(&fit, design, y),
    }
}

/// How candidate block sizes are compared.
#[derive(Debug, Clone, Copy)]
pub enum ScanCriterion<'a> {
    /// Mean prediction norm against known coefficients (simulation).
    Oracle(&'a [Vec<f64>]),
    /// Mean out-of-sample RMSE on the trailing `fraction` of observations.
    Holdout { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScanRow {
    pub block_size: usize,
    /// `None` when the grid entry was skipped.
    pub criterion: Option<f64>,
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScan {
    pub rows: Vec<BlockScanRow>,
    pub best_block_size: usize,
    pub warnings: Vec<String>,
}

/// Mean over equations of the prediction norm of `fits` against `truth`.
pub fn mean_prediction_error(data: &PanelDataset, fits: &[LassoFit], truth: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (j, fit) in fits.iter().enumerate() {
        let delta = fit.coef.difference(&truth[j])?;
        total += data.design(j).prediction_norm(&delta.values)?;
    }
    Ok(total / fits.len() as f64)
}

/// Evaluates each block size in `grid` and picks the smallest criterion.
pub fn scan_block_size(
    data: &PanelDataset,
    tuning: &TuningConfig,
    grid: &[usize],
    criterion: ScanCriterion<'_>,
    kind: FinalFit,
) -> Result<BlockScan> {
    if grid.is_empty() {
        return config("block size grid is empty");
    }
    let (train, holdout) = match criterion {
        ScanCriterion::Oracle(truth) => {
            if truth.len() != data.num_equations() {
                return config("oracle coefficients must cover every equation");
            }
            (data.clone(), None)
        }
        ScanCriterion::Holdout { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return config("holdout fraction must lie in (0, 1)");
            }
            let n_train = ((1.0 - fraction) * data.n() as f64).round() as usize;
            if n_train < 4 || n_train >= data.n() {
                return config("holdout split leaves too few observations");
            }
            (data.rows(0..n_train)?, Some(n_train))
        }
    };
    let pilot = run_pilot(&train, tuning)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    for &b in grid {
        if b == 0 || 2 * b > train.n() {
            let msg = format!("block size {b} skipped: exceeds n/2 = {}", train.n() / 2);
            log::warn!("{msg}");
            warnings.push(msg);
            rows.push(BlockScanRow {
                block_size: b,
                criterion: None,
                lambda: None,
            });
            continue;
        }
        let cfg = TuningConfig {
            block_size: b,
            ..tuning.clone()
        };
        let outcome = tune_from_pilot(&train, &pilot, &cfg)?;
        let fits = fit_system(&train, &outcome.plan, kind, &tuning.solver)?;
        let value = match (criterion, holdout) {
            (ScanCriterion::Oracle(truth), _) => mean_prediction_error(&train, &fits, truth)?,
            (ScanCriterion::Holdout { .. }, Some(n_train)) => holdout_rmse(data, &train, &fits, n_train)?,
            _ => unreachable!(),
        };
        rows.push(BlockScanRow {
            block_size: b,
            criterion: Some(value),
            lambda: outcome.plan.lambdas.first().copied(),
        });
    }
    let best = rows
        .iter()
        .filter_map(|r| r.criterion.map(|c| (r.block_size, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(b, _)| b)
        .ok_or_else(|| Error::Config("every block size in the grid was skipped".into()))?;
    Ok(BlockScan {
        rows,
        best_block_size: best,
        warnings,
    })
}

fn holdout_rmse(full: &PanelDataset, train: &PanelDataset, fits: &[LassoFit], n_train: usize) -> Result<f64> {
    let n_test = full.n() - n_train;
    let mut total = 0.0;
    for (j, fit) in fits.iter().enumerate() {
        let spec = full.spec(j);
        let design = train.design(j);
        let intercept = if spec.intercept {
            train.response_mean(j) - design.column_means().dot(&DVector::from_column_slice(&fit.coef.values))
        } else {
            0.0
        };
        let mut sse = 0.0;
        for t in n_train..full.n() {
            let mut pred = intercept;
            for (k, &c) in spec.covariate_indices.iter().enumerate() {
                pred += full.covariate_pool()[(t, c)] * fit.coef.values[k];
            }
            let e = full.responses()[(t, spec.response_index)] - pred;
            sse += e * e;
        }
        total += (sse / n_test as f64).sqrt();
    }
    Ok(total / fits.len() as f64)
}

/// Intercept implied by a fit on a centered design.
pub fn recover_intercept(data: &PanelDataset, j: usize, coef: &CoefVector) -> f64 {
    if !data.spec(j).intercept {
        return 0.0;
    }
    data.response_mean(j) - data.design(j).column_means().dot(&DVector::from_column_slice(&coef.values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EquationSpec;
    use rand::Rng;

    fn gaussian_panel(seed: u64, n: usize, k: usize, j: usize) -> PanelDataset {
        let mut r = rng::stream(seed, &[0x21]);
        let x = DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal));
        let mut y = DMatrix::zeros(n, j);
        for e in 0..j {
            for t in 0..n {
                y[(t, e)] = 2.0 * x[(t, e % k)] + r.sample::<f64, _>(StandardNormal);
            }
        }
        let specs = (0..j).map(|e| EquationSpec::new(e, (0..k).collect(), false)).collect();
        PanelDataset::new(y, x, specs).unwrap()
    }

    #[test]
    fn canonical_level_examples() {
        let v = lambda_gaussian_canonical(0.05, 1.1, 100, 1, 1).unwrap();
        assert!((v - 22.0 * 1.959_963_985).abs() < 1e-6, "{v}");
        assert!((v - 43.119).abs() < 1e-3);
        let tiny = lambda_gaussian_canonical(0.9999, 1.1, 100, 1, 1).unwrap();
        // 22 Φ⁻¹(0.50005) with Φ⁻¹(0.5 + h) ≈ h√(2π).
        let expected = 22.0 * 0.00005 * (2.0 * std::f64::consts::PI).sqrt();
        assert!((tiny - expected).abs() < 1e-6, "{tiny}");
        assert!((tiny - 0.0028).abs() < 1e-4);
        assert!(lambda_gaussian_canonical(0.1, 1.1, 100, 20, 1).unwrap() > lambda_gaussian_canonical(0.1, 1.1, 100, 10, 1).unwrap());
        assert!(lambda_gaussian_canonical(1.0, 1.1, 100, 1, 1).is_err());
        assert!(lambda_gaussian_canonical(0.1, 1.1, 100, 0, 1).is_err());
    }

    #[test]
    fn zero_residuals_give_degenerate_zero_level() {
        let data = gaussian_panel(1, 40, 3, 2);
        let resid = vec![vec![0.0; 40]; 2];
        let loadings = lrv::compute_loadings(&data, &resid, &HacOptions { bandwidth: 0 }).unwrap();
        let scheme = BlockScheme::new(1, 40).unwrap();
        let (plan, draws) = bootstrap_penalty(&data, &resid, &loadings, &scheme, 200, 0.1, 1.1, 3, PenaltyScope::Joint).unwrap();
        assert!(draws.max_stats.iter().all(|&v| v == 0.0));
        assert_eq!(plan.lambdas, vec![0.0, 0.0]);
        assert!(plan.degenerate);
    }

    #[test]
    fn too_few_blocks_is_an_error() {
        let data = gaussian_panel(1, 40, 3, 1);
        let resid = vec![vec![1.0; 40]];
        let loadings = lrv::compute_loadings(&data, &resid, &HacOptions { bandwidth: 0 }).unwrap();
        let scheme = BlockScheme::new(30, 40).unwrap();
        let err = bootstrap_penalty(&data, &resid, &loadings, &scheme, 200, 0.1, 1.1, 3, PenaltyScope::Joint).unwrap_err();
        assert!(err.to_string().contains("fewer than 2 blocks"));
    }

    #[test]
    fn single_block_statistic_is_scaled_half_normal() {
        // One block spanning all observations: Z = e √n mean(εX).
        let n = 60;
        let data = gaussian_panel(2, n, 1, 1);
        let mut r = rng::stream(5, &[1]);
        let resid: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let loadings = lrv::compute_loadings(&data, &[resid.clone()], &HacOptions { bandwidth: 0 }).unwrap();
        let x = data.design(0).x();
        let mean_ex: f64 = (0..n).map(|t| resid[t] * x[(t, 0)]).sum::<f64>() / n as f64;
        let scale = (n as f64).sqrt() * mean_ex.abs() / loadings.values[0][0];
        let scheme = BlockScheme { block_size: n, block_count: 1 };
        // Bypass the two-block guard to exercise the single-block identity directly.
        let sums = scaled_block_sums(x, &resid, &loadings.values[0], &scheme);
        let stats: Vec<f64> = (0..10_000)
            .map(|b| (multipliers(9, tag::PENALTY, b, 0, 1).next().unwrap() * sums[(0, 0)]).abs())
            .collect();
        let q = stats::order_statistic(&stats, 0.95);
        assert!((q - 1.96 * scale).abs() < 0.05 * 1.96 * scale, "{q} vs {}", 1.96 * scale);
    }

    #[test]
    fn unit_blocks_match_observation_level_multiplier_bootstrap() {
        let n = 30;
        let data = gaussian_panel(3, n, 4, 2);
        let mut r = rng::stream(6, &[2]);
        let resid: Vec<Vec<f64>> = (0..2).map(|_| (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect();
        let loadings = lrv::compute_loadings(&data, &resid, &HacOptions { bandwidth: 1 }).unwrap();
        let scheme = BlockScheme::new(1, n).unwrap();
        let draws = bootstrap_max_stats(&data, &resid, &loadings, &scheme, 50, 77).unwrap();
        // Independent implementation: one multiplier per observation.
        for b in 0..50 {
            let mut joint: f64 = 0.0;
            for j in 0..2 {
                let e: Vec<f64> = multipliers(77, tag::PENALTY, b, j, n).collect();
                let x = data.design(j).x();
                let mut m: f64 = 0.0;
                for k in 0..4 {
                    let z: f64 = (0..n).map(|t| e[t] * resid[j][t] * x[(t, k)]).sum::<f64>() / (n as f64).sqrt();
                    m = m.max((z / loadings.values[j][k]).abs());
                }
                assert!((draws.per_equation[(b, j)] - m).abs() <= 1e-12 * m.max(1.0));
                joint = joint.max(m);
            }
            assert!((draws.max_stats[b] - joint).abs() <= 1e-12 * joint.max(1.0));
        }
    }

    #[test]
    fn bootstrap_level_tracks_gaussian_max_oracle() {
        // i.i.d. X and ε, K = 50, n = 200, b_n = 1.
        let (n, k) = (200, 50);
        let mut r = rng::stream(10, &[3]);
        let x = DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 1, |_, _| r.sample::<f64, _>(StandardNormal));
        let data = PanelDataset::new(y.clone(), x, vec![EquationSpec::new(0, (0..k).collect(), false)]).unwrap();
        let resid = vec![y.column(0).iter().copied().collect::<Vec<_>>()];
        let loadings = lrv::compute_loadings(&data, &resid, &HacOptions { bandwidth: 0 }).unwrap();
        let scheme = BlockScheme::new(1, n).unwrap();
        let (plan, _) = bootstrap_penalty(&data, &resid, &loadings, &scheme, 5000, 0.1, 1.1, 11, PenaltyScope::Joint).unwrap();
        // Oracle: max of 50 independent standardized Gaussian sums.
        let mut o = rng::stream(12, &[4]);
        let maxima: Vec<f64> = (0..20_000)
            .map(|_| (0..k).map(|_| o.sample::<f64, _>(StandardNormal).abs()).fold(0.0, f64::max))
            .collect();
        let oracle = 2.0 * 1.1 * (n as f64).sqrt() * stats::order_statistic(&maxima, 0.9);
        assert!((plan.lambdas[0] - oracle).abs() < 0.1 * oracle, "{} vs {oracle}", plan.lambdas[0]);
    }

    #[test]
    fn joint_level_dominates_and_is_monotone() {
        let data = gaussian_panel(4, 80, 6, 4);
        let cfg = TuningConfig {
            draws: 400,
            seed: 5,
            ..Default::default()
        };
        let out = run_pilot_then_tune(&data, &cfg).unwrap();
        let draws = out.draws.as_ref().unwrap();
        let per = out.plan_for_scope(&data, PenaltyScope::PerEquation);
        let joint = out.plan.joint_lambda().unwrap();
        for j in 0..4 {
            assert!(joint >= per.lambdas[j]);
        }
        // Monotone in c and α on fixed draws.
        let mut last = 0.0;
        for c in [1.01, 1.1, 1.5, 2.0] {
            let l = plan_from_draws(draws, &data, &out.plan.loadings, &out.plan.scheme, 0.1, c, PenaltyScope::Joint).lambdas[0];
            assert!(l >= last);
            last = l;
        }
        let mut last = f64::INFINITY;
        for a in [0.01, 0.05, 0.1, 0.3, 0.6] {
            let l = plan_from_draws(draws, &data, &out.plan.loadings, &out.plan.scheme, a, 1.1, PenaltyScope::Joint).lambdas[0];
            assert!(l <= last);
            last = l;
        }
    }

    #[test]
    fn single_equation_scopes_coincide() {
        let data = gaussian_panel(5, 60, 5, 1);
        let cfg = TuningConfig {
            draws: 300,
            seed: 8,
            ..Default::default()
        };
        let joint = run_pilot_then_tune(&data, &cfg).unwrap();
        let per = run_pilot_then_tune(
            &data,
            &TuningConfig {
                scope: PenaltyScope::PerEquation,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(joint.plan.lambdas, per.plan.lambdas);
    }

    #[test]
    fn tuning_is_deterministic() {
        let data = gaussian_panel(6, 60, 5, 3);
        let cfg = TuningConfig {
            draws: 300,
            seed: 99,
            block_size: 3,
            ..Default::default()
        };
        let a = run_pilot_then_tune(&data, &cfg).unwrap();
        let b = run_pilot_then_tune(&data, &cfg).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.draws, b.draws);
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = single.install(|| run_pilot_then_tune(&data, &cfg).unwrap());
        assert_eq!(a.plan, c.plan);
    }

    #[test]
    fn pure_noise_pipeline_completes() {
        let n = 80;
        let mut r = rng::stream(7, &[5]);
        let x = DMatrix::from_fn(n, 10, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let specs = (0..2).map(|j| EquationSpec::new(j, (0..10).collect(), true)).collect();
        let data = PanelDataset::new(y, x, specs).unwrap();
        let out = run_pilot_then_tune(&data, &TuningConfig { draws: 300, ..Default::default() }).unwrap();
        assert!(out.plan.lambdas[0] > 0.0);
        let fits = fit_system(&data, &out.plan, FinalFit::Lasso, &SolverOptions::default()).unwrap();
        assert!(fits.iter().all(|f| f.coef.support.len() <= 2), "{:?}", fits.iter().map(|f| f.coef.support.len()).collect::<Vec<_>>());
    }

    #[test]
    fn gaussian_method_uses_canonical_levels() {
        let data = gaussian_panel(8, 60, 5, 3);
        let cfg = TuningConfig {
            method: PenaltyMethod::GaussianCanonical,
            ..Default::default()
        };
        let out = run_pilot_then_tune(&data, &cfg).unwrap();
        let expected = lambda_gaussian_canonical(0.1, 1.1, 60, 15, 1).unwrap();
        assert!(out.plan.lambdas.iter().all(|&l| l == expected));
        assert!(out.draws.is_none());
    }

    #[test]
    fn scan_with_single_entry_selects_it() {
        let data = gaussian_panel(9, 60, 5, 2);
        let truth = vec![vec![2.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 0.0, 0.0, 0.0]];
        let cfg = TuningConfig { draws: 200, ..Default::default() };
        let scan = scan_block_size(&data, &cfg, &[1], ScanCriterion::Oracle(&truth), FinalFit::PostLasso).unwrap();
        assert_eq!(scan.best_block_size, 1);
        let scan = scan_block_size(&data, &cfg, &[1, 2, 40], ScanCriterion::Holdout { fraction: 0.2 }, FinalFit::PostLasso).unwrap();
        assert_eq!(scan.rows[2].criterion, None);
        assert_eq!(scan.warnings.len(), 1);
        assert!(scan.best_block_size == 1 || scan.best_block_size == 2);
    }
}
