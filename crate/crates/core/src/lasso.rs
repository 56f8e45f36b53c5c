//! Weighted-ℓ1 penalized least squares by cyclic coordinate descent.
//!
//! The objective for equation `j` is
//!
//! ```text
//! (1/n) Σ_t (y_t - x_t'β)² + (λ/n) Σ_k Ψ_k |β_k|
//! ```
//!
//! so `λ` carries the `√n` scaling of the penalty rules in [`crate::penalty`].
//! The solver works on the Gram matrix (covariance updates) and keeps the
//! score vector `X'r` current after every coordinate move.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CoefVector, Design};
use crate::error::{config, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Maximum number of full sweeps.
    pub max_iter: usize,
    /// Stop when the largest coefficient move in a sweep is below
    /// `tol * max(1, max|β|)`.
    pub tol: f64,
    /// Record the objective after every sweep.
    pub track_objective: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-7,
            track_objective: false,
        }
    }
}

/// One penalized regression.
#[derive(Debug, Clone, Copy)]
pub struct LassoProblem<'a> {
    pub equation: usize,
    pub design: &'a Design,
    pub y: &'a DVector<f64>,
    pub lambda: f64,
    pub loadings: &'a [f64],
}

impl<'a> LassoProblem<'a> {
    pub fn new(equation: usize, design: &'a Design, y: &'a DVector<f64>, lambda: f64, loadings: &'a [f64]) -> Self {
        Self {
            equation,
            design,
            y,
            lambda,
            loadings,
        }
    }

    fn validate(&self) -> Result<()> {
        let (n, k) = (self.design.n(), self.design.k());
        if n < 2 || k < 1 {
            return config(format!("lasso needs n >= 2 and K >= 1, got n={n}, K={k}"));
        }
        if self.y.len() != n {
            return config(format!("response has length {} but design has {n} rows", self.y.len()));
        }
        if self.loadings.len() != k {
            return config(format!("{} loadings for {k} covariates", self.loadings.len()));
        }
        if self.y.iter().any(|v| !v.is_finite()) || self.design.x().iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("NaN or infinite value in lasso inputs".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Input(format!("penalty level must be finite and >= 0, got {}", self.lambda)));
        }
        if self.loadings.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::Input("penalty loadings must be finite and strictly positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    pub coef: CoefVector,
    pub residuals: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_used: f64,
    pub loadings_used: Vec<f64>,
    /// Set by [`post_lasso_ols`] when the active submatrix was rank deficient.
    pub rank_deficient: bool,
    pub diagnostics: Vec<String>,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl LassoFit {
    pub fn support(&self) -> &[usize] {
        &self.coef.support
    }
}

/// Penalized objective at `beta`, computed from an explicit residual.
pub fn objective(design: &Design, y: &DVector<f64>, beta: &[f64], lambda: f64, loadings: &[f64]) -> Result<f64> {
    let r = y - design.predict(beta)?;
    let n = design.n() as f64;
    let pen: f64 = beta.iter().zip(loadings).map(|(b, l)| b.abs() * l).sum();
    Ok(r.norm_squared() / n + lambda / n * pen)
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    // |z| == t resolves to exactly zero.
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

pub fn solve_lasso(problem: &LassoProblem<'_>, options: &SolverOptions) -> Result<LassoFit> {
    solve_lasso_warm(problem, options, None)
}

/// Coordinate descent started from `start` (zeros when `None`).
pub fn solve_lasso_warm(problem: &LassoProblem<'_>, options: &SolverOptions, start: Option<&[f64]>) -> Result<LassoFit> {
    problem.validate()?;
    let design = problem.design;
    let (n, k) = (design.n(), design.k());
    let nf = n as f64;
    let gram = design.gram();
    let xty: DVector<f64> = design.x().tr_mul(problem.y);
    let yty = problem.y.norm_squared();

    let mut beta = match start {
        Some(s) if s.len() == k => s.to_vec(),
        Some(_) => return config("warm start has the wrong length"),
        None => vec![0.0; k],
    };

    let max_diag = (0..k).map(|c| gram[(c, c)]).fold(0.0, f64::max);
    let mut diagnostics = Vec::new();
    let degenerate: Vec<bool> = (0..k).map(|c| gram[(c, c)] <= 1e-12 * max_diag.max(f64::MIN_POSITIVE)).collect();
    for (c, &d) in degenerate.iter().enumerate() {
        if d {
            beta[c] = 0.0;
            log::warn!("equation {}: covariate {c} has zero variance; coefficient fixed at 0", problem.equation);
            diagnostics.push(format!("zero-variance covariate {c} fixed at 0"));
        }
    }

    // score[c] = X_c'(y - Xβ)
    let mut score = xty.clone();
    for (c, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            score.axpy(-b, &gram.column(c), 1.0);
        }
    }
    let thresholds: Vec<f64> = problem.loadings.iter().map(|l| 0.5 * problem.lambda * l).collect();
    let pen_obj = |beta: &[f64], score: &DVector<f64>| -> f64 {
        // rss = y'y - β'X'y - β'score
        let mut rss = yty;
        let mut pen = 0.0;
        for c in 0..k {
            rss -= beta[c] * (xty[c] + score[c]);
            pen += beta[c].abs() * problem.loadings[c];
        }
        rss.max(0.0) / nf + problem.lambda / nf * pen
    };

    let mut trace = Vec::new();
    if options.track_objective {
        trace.push(pen_obj(&beta, &score));
    }
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        iterations += 1;
        let mut max_delta: f64 = 0.0;
        for c in 0..k {
            if degenerate[c] {
                continue;
            }
            let g = gram[(c, c)];
            let old = beta[c];
            let z = score[c] + g * old;
            let new = soft_threshold(z, thresholds[c]) / g;
            let delta = new - old;
            if delta != 0.0 {
                score.axpy(-delta, &gram.column(c), 1.0);
                beta[c] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if options.track_objective {
            trace.push(pen_obj(&beta, &score));
        }
        let scale = beta.iter().fold(1.0f64, |m, b| m.max(b.abs()));
        if max_delta < options.tol * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "equation {}: coordinate descent did not converge in {} sweeps",
            problem.equation,
            options.max_iter
        );
        diagnostics.push(format!("not converged after {} sweeps", options.max_iter));
    }

    let residuals = problem.y - design.predict(&beta)?;
    let pen: f64 = beta.iter().zip(problem.loadings).map(|(b, l)| b.abs() * l).sum();
    let objective = residuals.norm_squared() / nf + problem.lambda / nf * pen;
    Ok(LassoFit {
        coef: CoefVector::new(problem.equation, beta),
        residuals: residuals.as_slice().to_vec(),
        objective,
        iterations,
        converged,
        lambda_used: problem.lambda,
        loadings_used: problem.loadings.to_vec(),
        rank_deficient: false,
        diagnostics,
        objective_trace: trace,
    })
}

/// Largest violation of the subgradient optimality conditions, measured in
/// units of the `(2/n) X'r` score.
pub fn kkt_violation(problem: &LassoProblem<'_>, fit: &LassoFit) -> f64 {
    let n = problem.design.n() as f64;
    let r = DVector::from_column_slice(&fit.residuals);
    let grad = problem.design.x().tr_mul(&r) * (2.0 / n);
    let mut worst: f64 = 0.0;
    let max_diag = (0..problem.design.k()).map(|c| problem.design.gram()[(c, c)]).fold(0.0, f64::max);
    for c in 0..problem.design.k() {
        if problem.design.gram()[(c, c)] <= 1e-12 * max_diag.max(f64::MIN_POSITIVE) {
            continue;
        }
        let pen = problem.lambda / n * problem.loadings[c];
        let b = fit.coef.values[c];
        let v = if b != 0.0 {
            (grad[c] - b.signum() * pen).abs()
        } else {
            (grad[c].abs() - pen).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Warm-started fits along a descending penalty grid.
pub fn solve_lasso_path(problem: &LassoProblem<'_>, lambda_grid: &[f64], options: &SolverOptions) -> Result<Vec<LassoFit>> {
    if lambda_grid.windows(2).any(|w| w[0] < w[1]) {
        return config("penalty grid must be sorted in descending order");
    }
    let mut fits = Vec::with_capacity(lambda_grid.len());
    let mut start: Option<Vec<f64>> = None;
    for &lambda in lambda_grid {
        let p = LassoProblem { lambda, ..*problem };
        let fit = solve_lasso_warm(&p, options, start.as_deref())?;
        start = Some(fit.coef.values.clone());
        fits.push(fit);
    }
    Ok(fits)
}

/// Least squares of `y` on the design columns `columns`.
///
/// Returns the coefficients (in `columns` order) and whether the restricted
/// design was rank deficient, in which case the minimum-norm solution is used.
pub fn least_squares(design: &Design, y: &DVector<f64>, columns: &[usize]) -> Result<(Vec<f64>, bool)> {
    if columns.is_empty() {
        return Ok((Vec::new(), false));
    }
    let m = columns.len();
    let gram = DMatrix::from_fn(m, m, |a, b| design.gram()[(columns[a], columns[b])]);
    let rhs = DVector::from_fn(m, |a, _| design.x().column(columns[a]).dot(y));
    let max_diag = (0..m).map(|a| gram[(a, a)]).fold(0.0, f64::max);
    if max_diag > 0.0 {
        if let Some(chol) = gram.clone().cholesky() {
            let l = chol.l();
            let min_piv = (0..m).map(|a| l[(a, a)] * l[(a, a)]).fold(f64::INFINITY, f64::min);
            if min_piv > 1e-10 * max_diag {
                let sol = chol.solve(&rhs);
                return Ok((sol.as_slice().to_vec(), false));
            }
        }
    }
    let xs = DMatrix::from_fn(design.n(), m, |t, a| design.x()[(t, columns[a])]);
    let svd = xs.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (design.n().max(m) as f64) * f64::EPSILON;
    let sol = svd
        .solve(y, eps)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok((sol.as_slice().to_vec(), true))
}

/// OLS refit on the support of `fit`.
pub fn post_lasso_ols(fit: &LassoFit, design: &Design, y: &DVector<f64>) -> Result<LassoFit> {
    let k = design.k();
    if fit.coef.len() != k || y.len() != design.n() {
        return config("post-lasso refit: dimensions do not match the fit");
    }
    let support = fit.coef.support.clone();
    let (sol, rank_deficient) = least_squares(design, y, &support)?;
    let mut values = vec![0.0; k];
    for (a, &c) in support.iter().enumerate() {
        values[c] = sol[a];
    }
    let residuals = y - design.predict(&values)?;
    let mut diagnostics = fit.diagnostics.clone();
    if rank_deficient {
        diagnostics.push("post-lasso active set rank deficient; minimum-norm solution used".into());
    }
    Ok(LassoFit {
        coef: CoefVector::new(fit.coef.equation, values),
        objective: residuals.norm_squared() / design.n() as f64,
        residuals: residuals.as_slice().to_vec(),
        iterations: fit.iterations,
        converged: fit.converged,
        lambda_used: fit.lambda_used,
        loadings_used: fit.loadings_used.clone(),
        rank_deficient,
        diagnostics,
        objective_trace: Vec::new(),
    })
}
