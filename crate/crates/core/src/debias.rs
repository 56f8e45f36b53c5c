//! De-biased estimates of individual coefficients.
//!
//! For a target `(j, k)` an instrument `v̂ = X_jk - X_j(-k) γ̂` is obtained
//! from a LASSO of `X_jk` on the remaining covariates of equation `j`. The
//! outcome LASSO residuals are then corrected in the direction of `v̂` (LS-IV),
//! an IV median regression is solved (LAD-IV), or an unpenalized regression on
//! the union of both supports is run (double selection). Every method
//! produces the score series `ψ̂`, its Jacobian `φ̂` and the studentized series
//! `ζ̂` consumed by the bootstrap.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CoefVector, Design, PanelDataset, TargetSet};
use crate::error::{config, Error, Result};
use crate::lasso::{least_squares, post_lasso_ols, solve_lasso, solve_lasso_warm, LassoFit, LassoProblem, SolverOptions};
use crate::lrv::{self, BlockScheme, HacOptions};
use crate::penalty::{fit_equation, lambda_gaussian_canonical, FinalFit, PenaltyPlan};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DebiasMethod {
    LsIv,
    LadIv,
    DoubleLs,
    DoubleLad,
}

impl DebiasMethod {
    pub fn name(self) -> &'static str {
        match self {
            DebiasMethod::LsIv => "ls-iv",
            DebiasMethod::LadIv => "lad-iv",
            DebiasMethod::DoubleLs => "double-ls",
            DebiasMethod::DoubleLad => "double-lad",
        }
    }
}

impl std::str::FromStr for DebiasMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ls-iv" => Ok(DebiasMethod::LsIv),
            "lad-iv" => Ok(DebiasMethod::LadIv),
            "double-ls" => Ok(DebiasMethod::DoubleLs),
            "double-lad" => Ok(DebiasMethod::DoubleLad),
            other => config(format!("unknown de-biasing method '{other}'")),
        }
    }
}

/// Settings for the instrument (nodewise) regressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstrumentOptions {
    pub alpha: f64,
    pub c: f64,
    /// Refit the selected columns by OLS before forming `v̂`.
    pub post_lasso: bool,
    /// Fixed penalty level; the canonical Gaussian level when `None`.
    pub lambda: Option<f64>,
    pub bandwidth: Option<usize>,
}

impl Default for InstrumentOptions {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            c: 1.1,
            post_lasso: false,
            lambda: None,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebiasConfig {
    pub method: DebiasMethod,
    /// Use the post-LASSO refit as the first-stage outcome estimate.
    pub post_lasso_outcome: bool,
    pub instrument: InstrumentOptions,
    pub solver: SolverOptions,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            method: DebiasMethod::LsIv,
            post_lasso_outcome: true,
            instrument: InstrumentOptions::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentFit {
    pub target: (usize, usize),
    /// Equation-level column indices of `X_j(-k)`, in order.
    pub others: Vec<usize>,
    /// Coefficients over `others`.
    pub gamma: CoefVector,
    pub v_hat: Vec<f64>,
    pub loadings: Vec<f64>,
    pub lambda: f64,
    pub degenerate: bool,
}

impl InstrumentFit {
    /// Support of `γ̂` mapped to equation-level column indices.
    pub fn support(&self) -> Vec<usize> {
        self.gamma.support.iter().map(|&i| self.others[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedEstimate {
    pub target: (usize, usize),
    pub method: DebiasMethod,
    pub beta2: f64,
    pub phi: f64,
    pub omega: f64,
    pub sigma: f64,
    pub score_series: Vec<f64>,
    pub zeta_series: Vec<f64>,
    pub omega_floored: bool,
    pub diagnostics: Vec<String>,
}

impl DebiasedEstimate {
    /// `σ̂ / √n`.
    pub fn standard_error(&self) -> f64 {
        self.sigma / (self.score_series.len() as f64).sqrt()
    }

    /// `√n (β̂ - b0) / σ̂`.
    pub fn pivot(&self, b0: f64) -> f64 {
        (self.score_series.len() as f64).sqrt() * (self.beta2 - b0) / self.sigma
    }
}

fn column(design: &Design, k: usize) -> Vec<f64> {
    design.x().column(k).iter().copied().collect()
}

fn sd_pop(xs: &[f64]) -> f64 {
    let m = stats::mean(xs);
    (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nodewise LASSO of `X_jk` on `X_j(-k)` with one loading refinement.
pub fn fit_instrument(data: &PanelDataset, target: (usize, usize), opts: &InstrumentOptions, solver: &SolverOptions) -> Result<InstrumentFit> {
    let (j, k) = target;
    if j >= data.num_equations() || k >= data.spec(j).num_covariates() {
        return config(format!("target ({j}, {k}) out of range"));
    }
    let design = data.design(j);
    let xk = column(design, k);
    let others: Vec<usize> = (0..design.k()).filter(|&c| c != k).collect();
    let n = design.n();
    let xk_mean = stats::mean(&xk);
    if others.is_empty() {
        return Ok(InstrumentFit {
            target,
            others,
            gamma: CoefVector::zeros(j, 0),
            degenerate: sd_pop(&xk) == 0.0,
            v_hat: xk,
            loadings: Vec::new(),
            lambda: 0.0,
        });
    }
    if sd_pop(&xk) == 0.0 {
        return Ok(InstrumentFit {
            target,
            gamma: CoefVector::zeros(j, others.len()),
            v_hat: xk.iter().map(|v| v - xk_mean).collect(),
            loadings: vec![1.0; others.len()],
            lambda: 0.0,
            degenerate: true,
            others,
        });
    }
    let sub = design.select(&others);
    let y = DVector::from_column_slice(&xk);
    let hac = HacOptions::resolve(opts.bandwidth, n);
    let lambda = match opts.lambda {
        Some(l) => l,
        None => lambda_gaussian_canonical(opts.alpha, opts.c, n, others.len(), 1)?,
    };
    let centered: Vec<f64> = xk.iter().map(|v| v - xk_mean).collect();
    let initial = lrv::floor_loadings(vec![lrv::score_variances(sub.x(), &centered, &hac)?], hac.bandwidth);
    let first = solve_lasso(&LassoProblem::new(j, &sub, &y, lambda, initial.row(0)), solver)?;
    let refined = lrv::floor_loadings(vec![lrv::score_variances(sub.x(), &first.residuals, &hac)?], hac.bandwidth);
    let problem = LassoProblem::new(j, &sub, &y, lambda, refined.row(0));
    let mut fit = solve_lasso_warm(&problem, solver, Some(&first.coef.values))?;
    if opts.post_lasso {
        fit = post_lasso_ols(&fit, &sub, &y)?;
    }
    let scale = centered.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    let v_mean_abs = fit.residuals.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    Ok(InstrumentFit {
        target,
        others,
        gamma: fit.coef,
        degenerate: v_mean_abs <= 1e-8 * scale,
        v_hat: fit.residuals,
        loadings: refined.values.into_iter().next().unwrap_or_default(),
        lambda,
    })
}

fn check_instrument(target: (usize, usize), xk: &[f64], v: &[f64]) -> Result<f64> {
    let n = xk.len() as f64;
    let vx = dot(v, xk);
    let (sv, sx) = (sd_pop(v), sd_pop(xk));
    let collapsed = sv <= 1e-8 * sx && v.iter().map(|a| a.abs()).sum::<f64>() <= 1e-8 * xk.iter().map(|a| a.abs()).sum::<f64>();
    if vx == 0.0 || collapsed || (vx / n).abs() < 1e-8 * sv * sx || !vx.is_finite() {
        return Err(Error::WeakInstrument {
            equation: target.0,
            covariate: target.1,
            detail: format!("|v'X|/n = {:.3e}", (vx / n).abs()),
        });
    }
    Ok(vx)
}

fn finish(
    target: (usize, usize),
    method: DebiasMethod,
    beta2: f64,
    score: Vec<f64>,
    phi: f64,
    scheme: &BlockScheme,
    mut diagnostics: Vec<String>,
) -> Result<DebiasedEstimate> {
    if !beta2.is_finite() || !phi.is_finite() || phi == 0.0 {
        return Err(Error::Numerical(format!(
            "target ({}, {}): non-finite estimate or zero Jacobian",
            target.0, target.1
        )));
    }
    let omega = lrv::omega_jk(&score, scheme)?;
    if omega.floored {
        diagnostics.push("score long-run variance hit the floor".into());
    }
    let sigma = omega.value.sqrt() / phi.abs();
    let zeta: Vec<f64> = score.iter().map(|s| -s / (phi * sigma)).collect();
    if zeta.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical(format!("target ({}, {}): non-finite studentized score", target.0, target.1)));
    }
    let sd = stats::sd(&score);
    if sd > 0.0 {
        let ratio = stats::mean(&score).abs() / sd;
        diagnostics.push(format!("score mean / sd = {ratio:.3e}"));
    }
    Ok(DebiasedEstimate {
        target,
        method,
        beta2,
        phi,
        omega: omega.value,
        sigma,
        score_series: score,
        zeta_series: zeta,
        omega_floored: omega.floored,
        diagnostics,
    })
}

/// LS-IV estimate from `X_jk`, the partial response `Ỹ` and the instrument.
pub fn ls_iv_series(target: (usize, usize), xk: &[f64], y_tilde: &[f64], v: &[f64], scheme: &BlockScheme) -> Result<DebiasedEstimate> {
    if xk.len() != y_tilde.len() || xk.len() != v.len() {
        return config("series lengths differ");
    }
    let vx = check_instrument(target, xk, v)?;
    let beta2 = dot(v, y_tilde) / vx;
    let score: Vec<f64> = (0..xk.len()).map(|t| (y_tilde[t] - xk[t] * beta2) * v[t]).collect();
    let phi = -vx / xk.len() as f64;
    finish(target, DebiasMethod::LsIv, beta2, score, phi, scheme, Vec::new())
}

/// `β̂_jk + v̂'(Y - X β̂) / v̂'X_jk`, algebraically equal to the IV form.
pub fn desparsified_sum_form(beta1_k: f64, xk: &[f64], residuals: &[f64], v: &[f64]) -> f64 {
    beta1_k + dot(v, residuals) / dot(v, xk)
}

/// Gaussian kernel density at zero with Silverman's bandwidth.
pub fn density_at_zero(residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    let sd = stats::sd(residuals);
    let scale = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max).max(1.0);
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-10 * scale);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    residuals.iter().map(|r| (-0.5 * (r / h).powi(2)).exp()).sum::<f64>() * norm
}

fn lad_moment(xk: &[f64], y_tilde: &[f64], v: &[f64], beta: f64) -> f64 {
    let s: f64 = (0..xk.len())
        .map(|t| {
            let ind = if y_tilde[t] <= xk[t] * beta { 1.0 } else { 0.0 };
            (0.5 - ind) * v[t]
        })
        .sum();
    s / xk.len() as f64
}

/// Root of the LAD-IV moment by bisection around `center`.
pub fn solve_lad_moment(xk: &[f64], y_tilde: &[f64], v: &[f64], center: f64, half_width: f64) -> Result<f64> {
    let n = xk.len();
    let tol = 1e-3 / (n as f64).sqrt();
    let m = |b: f64| lad_moment(xk, y_tilde, v, b);
    let mut width = half_width.max(tol);
    for _ in 0..=6 {
        let (mut lo, mut hi) = (center - width, center + width);
        let (mut mlo, mhi) = (m(lo), m(hi));
        if mlo == 0.0 {
            return Ok(lo);
        }
        if mhi == 0.0 {
            return Ok(hi);
        }
        if mlo.signum() != mhi.signum() {
            for _ in 0..200 {
                if hi - lo <= tol {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let mm = m(mid);
                if mm == 0.0 {
                    return Ok(mid);
                }
                if mm.signum() == mlo.signum() {
                    lo = mid;
                    mlo = mm;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        width *= 10.0;
    }
    Err(Error::Numerical("LAD moment has no root in range".into()))
}

/// LAD-IV estimate; the bracket is centered at the LS-IV solution.
pub fn lad_iv_series(target: (usize, usize), xk: &[f64], y_tilde: &[f64], v: &[f64], scheme: &BlockScheme) -> Result<DebiasedEstimate> {
    let ls = ls_iv_series(target, xk, y_tilde, v, scheme)?;
    let n = xk.len();
    let scale = 1e-6 * (1.0 + ls.beta2.abs());
    let beta2 = solve_lad_moment(xk, y_tilde, v, ls.beta2, (10.0 * ls.standard_error()).max(scale))?;
    let resid: Vec<f64> = (0..n).map(|t| y_tilde[t] - xk[t] * beta2).collect();
    lad_finish(target, DebiasMethod::LadIv, beta2, &resid, xk, v, scheme)
}

fn lad_finish(
    target: (usize, usize),
    method: DebiasMethod,
    beta2: f64,
    resid: &[f64],
    xk: &[f64],
    v: &[f64],
    scheme: &BlockScheme,
) -> Result<DebiasedEstimate> {
    let n = xk.len();
    let score: Vec<f64> = (0..n).map(|t| (0.5 - if resid[t] <= 0.0 { 1.0 } else { 0.0 }) * v[t]).collect();
    let f0 = density_at_zero(resid);
    let phi = -f0 * dot(v, xk) / n as f64;
    let mut diagnostics = vec![format!("residual density at zero = {f0:.4e}")];
    if stats::sd(resid) == 0.0 {
        diagnostics.push("LAD residuals are identically zero".into());
    }
    finish(target, method, beta2, score, phi, scheme, diagnostics)
}

/// Partial response `Ỹ = Y_j - X_j(-k) β̂_j(-k)` from a first-stage fit.
pub fn partial_response(design: &Design, fit: &LassoFit, k: usize) -> Vec<f64> {
    let xk = design.x().column(k);
    (0..design.n()).map(|t| fit.residuals[t] + xk[t] * fit.coef.values[k]).collect()
}

pub fn ls_iv_estimate(data: &PanelDataset, target: (usize, usize), beta1: &LassoFit, instrument: &InstrumentFit, scheme: &BlockScheme) -> Result<DebiasedEstimate> {
    let design = data.design(target.0);
    let xk = column(design, target.1);
    let y_tilde = partial_response(design, beta1, target.1);
    let mut est = ls_iv_series(target, &xk, &y_tilde, &instrument.v_hat, scheme)?;
    let alt = desparsified_sum_form(beta1.coef.values[target.1], &xk, &beta1.residuals, &instrument.v_hat);
    let gap = (alt - est.beta2).abs() / est.beta2.abs().max(1.0);
    if gap > 1e-10 {
        est.diagnostics.push(format!("de-sparsified forms differ by {gap:.3e}"));
    }
    Ok(est)
}

pub fn lad_iv_estimate(data: &PanelDataset, target: (usize, usize), beta1: &LassoFit, instrument: &InstrumentFit, scheme: &BlockScheme) -> Result<DebiasedEstimate> {
    let design = data.design(target.0);
    let xk = column(design, target.1);
    let y_tilde = partial_response(design, beta1, target.1);
    lad_iv_series(target, &xk, &y_tilde, &instrument.v_hat, scheme)
}

/// Least absolute deviations by iteratively reweighted least squares.
pub fn lad_regression(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Vec<f64>> {
    let (n, m) = x.shape();
    if m == 0 {
        return Ok(Vec::new());
    }
    let scale = y.amax().max(1.0);
    let mut beta = DVector::zeros(m);
    let mut weights: DVector<f64> = DVector::from_element(n, 1.0);
    for iter in 0..500 {
        let mut wx = x.clone();
        for t in 0..n {
            let w = weights[t].sqrt();
            wx.row_mut(t).scale_mut(w);
        }
        let wy = y.component_mul(&weights.map(f64::sqrt));
        let svd = wx.svd(true, true);
        let eps = svd.singular_values.max() * (n.max(m) as f64) * f64::EPSILON;
        let next = svd.solve(&wy, eps).map_err(|e| Error::Numerical(format!("LAD solve failed: {e}")))?;
        let change = (&next - &beta).amax();
        beta = next;
        let r = y - x * &beta;
        weights = r.map(|v| 1.0 / v.abs().max(1e-9 * scale));
        if iter > 0 && change <= 1e-10 * beta.amax().max(1.0) {
            break;
        }
    }
    Ok(beta.as_slice().to_vec())
}

/// Unpenalized LS or LAD on `X_jk` and `union` (equation-level columns,
/// not containing `k`).
pub fn double_selection_estimate(
    data: &PanelDataset,
    target: (usize, usize),
    union: &[usize],
    lad: bool,
    scheme: &BlockScheme,
) -> Result<DebiasedEstimate> {
    let (j, k) = target;
    let design = data.design(j);
    let y = data.response(j);
    let n = design.n();
    let union: Vec<usize> = union.iter().copied().filter(|&c| c != k).collect();
    if union.len() + 1 >= n {
        return config(format!("union support of size {} leaves no degrees of freedom", union.len()));
    }
    let xk = column(design, k);
    let mut diagnostics = vec![format!("union support size {}", union.len())];
    let (proj, rd_v) = least_squares(design, &DVector::from_column_slice(&xk), &union)?;
    let mut v = xk.clone();
    for (a, &c) in union.iter().enumerate() {
        for t in 0..n {
            v[t] -= proj[a] * design.x()[(t, c)];
        }
    }
    let mut cols = vec![k];
    cols.extend_from_slice(&union);
    if !lad {
        let (sol, rd) = least_squares(design, y, &cols)?;
        if rd || rd_v {
            diagnostics.push("union design rank deficient; minimum-norm solution used".into());
        }
        check_instrument(target, &xk, &v)?;
        let beta2 = sol[0];
        let mut resid: Vec<f64> = y.iter().copied().collect();
        for (a, &c) in cols.iter().enumerate() {
            for t in 0..n {
                resid[t] -= sol[a] * design.x()[(t, c)];
            }
        }
        let score: Vec<f64> = (0..n).map(|t| resid[t] * v[t]).collect();
        let phi = -dot(&v, &xk) / n as f64;
        return finish(target, DebiasMethod::DoubleLs, beta2, score, phi, scheme, diagnostics);
    }
    check_instrument(target, &xk, &v)?;
    let intercept = data.spec(j).intercept;
    let width = cols.len() + usize::from(intercept);
    let xm = DMatrix::from_fn(n, width, |t, a| if a < cols.len() { design.x()[(t, cols[a])] } else { 1.0 });
    let sol = lad_regression(&xm, y)?;
    let fitted = &xm * DVector::from_column_slice(&sol);
    let resid: Vec<f64> = (0..n).map(|t| y[t] - fitted[t]).collect();
    let mut est = lad_finish(target, DebiasMethod::DoubleLad, sol[0], &resid, &xk, &v, scheme)?;
    est.diagnostics.splice(0..0, diagnostics);
    Ok(est)
}

/// First-stage fits, instruments and de-biased estimates for every target.
pub fn run_algorithm(data: &PanelDataset, targets: &TargetSet, plan: &PenaltyPlan, cfg: &DebiasConfig) -> Result<Vec<DebiasedEstimate>> {
    let kind = if cfg.post_lasso_outcome {
        FinalFit::PostLasso
    } else {
        FinalFit::Lasso
    };
    let mut equations: Vec<usize> = targets.targets().iter().map(|t| t.0).collect();
    equations.sort_unstable();
    equations.dedup();
    let fits: Vec<(usize, LassoFit)> = equations
        .par_iter()
        .map(|&j| fit_equation(data, j, plan, kind, &cfg.solver).map(|f| (j, f)))
        .collect::<Result<_>>()?;
    let fit_for = |j: usize| &fits.iter().find(|(e, _)| *e == j).expect("fit for every target equation").1;
    targets
        .targets()
        .par_iter()
        .map(|&target| {
            let beta1 = fit_for(target.0);
            let inst = fit_instrument(data, target, &cfg.instrument, &cfg.solver)?;
            match cfg.method {
                DebiasMethod::LsIv => ls_iv_estimate(data, target, beta1, &inst, &plan.scheme),
                DebiasMethod::LadIv => lad_iv_estimate(data, target, beta1, &inst, &plan.scheme),
                DebiasMethod::DoubleLs | DebiasMethod::DoubleLad => {
                    let mut union: Vec<usize> = beta1.coef.support.iter().copied().filter(|&c| c != target.1).collect();
                    union.extend(inst.support());
                    union.sort_unstable();
                    union.dedup();
                    double_selection_estimate(data, target, &union, cfg.method == DebiasMethod::DoubleLad, &plan.scheme)
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EquationSpec;
    use crate::lasso::solve_lasso;
    use crate::penalty::{run_pilot_then_tune, TuningConfig};
    use crate::rng;
    use rand::Rng;
    use rand_distr::{StandardNormal, StudentT};

    fn normals(r: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    fn unit_scheme(n: usize) -> BlockScheme {
        BlockScheme::new(1, n).unwrap()
    }

    fn toeplitz_x(r: &mut impl Rng, n: usize, k: usize) -> DMatrix<f64> {
        let sigma = DMatrix::from_fn(k, k, |a, b| 0.5f64.powi((a as i32 - b as i32).abs()));
        let l = sigma.cholesky().unwrap().l();
        let z = DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal));
        z * l.transpose()
    }

    fn panel(x: DMatrix<f64>, y: Vec<f64>, intercept: bool) -> PanelDataset {
        let n = x.nrows();
        let k = x.ncols();
        PanelDataset::new(DMatrix::from_column_slice(n, 1, &y), x, vec![EquationSpec::new(0, (0..k).collect(), intercept)]).unwrap()
    }

    #[test]
    fn independent_column_gives_unit_instrument() {
        // Orthogonal columns: every correlation is exactly zero.
        let n = 64;
        let x = DMatrix::from_fn(n, 4, |t, c| {
            let s = |bit: usize| if (t >> bit) & 1 == 0 { 1.0 } else { -1.0 };
            match c {
                0 => s(0),
                1 => s(1),
                2 => s(2),
                _ => s(0) * s(1),
            }
        });
        let data = panel(x.clone(), vec![0.0; n], false);
        let inst = fit_instrument(&data, (0, 0), &InstrumentOptions::default(), &SolverOptions::default()).unwrap();
        assert!(inst.gamma.values.iter().all(|&g| g == 0.0));
        assert_eq!(inst.v_hat, x.column(0).iter().copied().collect::<Vec<_>>());
        assert!(!inst.degenerate);
    }

    #[test]
    fn copied_column_is_degenerate_and_weak() {
        let mut r = rng::stream(1, &[1]);
        let n = 80;
        let base = normals(&mut r, n);
        let x = DMatrix::from_fn(n, 3, |t, c| if c < 2 { base[t] } else { r.sample(StandardNormal) });
        let y = normals(&mut r, n);
        let data = panel(x, y, false);
        let opts = InstrumentOptions {
            post_lasso: true,
            ..Default::default()
        };
        let inst = fit_instrument(&data, (0, 0), &opts, &SolverOptions::default()).unwrap();
        assert!(inst.degenerate);
        let fit = solve_lasso(
            &LassoProblem::new(0, data.design(0), data.response(0), 10.0, &[1.0, 1.0, 1.0]),
            &SolverOptions::default(),
        )
        .unwrap();
        let err = ls_iv_estimate(&data, (0, 0), &fit, &inst, &unit_scheme(n)).unwrap_err();
        assert!(matches!(err, Error::WeakInstrument { .. }));
        assert!(err.to_string().contains("double selection"));
    }

    #[test]
    fn toeplitz_instrument_support_is_local() {
        // Partial regression of X_k on the rest has nonzeros only at k ± 1.
        let (n, k, target) = (400, 20, 10);
        let mut local = 0;
        for seed in 0..100 {
            let mut r = rng::stream(seed, &[2]);
            let x = toeplitz_x(&mut r, n, k);
            let data = panel(x, vec![0.0; n], false);
            let inst = fit_instrument(&data, (0, target), &InstrumentOptions::default(), &SolverOptions::default()).unwrap();
            if inst.support().iter().all(|&c| c.abs_diff(target) <= 2) {
                local += 1;
            }
        }
        assert!(local >= 90, "{local}");
    }

    #[test]
    fn unpenalized_first_stage_reproduces_ols() {
        let mut r = rng::stream(3, &[3]);
        let (n, k) = (120, 5);
        let x = toeplitz_x(&mut r, n, k);
        let eps = normals(&mut r, n);
        let y: Vec<f64> = (0..n).map(|t| x[(t, 0)] - 2.0 * x[(t, 3)] + eps[t]).collect();
        let data = panel(x, y, true);
        let design = data.design(0);
        let (ols, _) = least_squares(design, data.response(0), &(0..k).collect::<Vec<_>>()).unwrap();
        let fit = post_lasso_ols(
            &solve_lasso(&LassoProblem::new(0, design, data.response(0), 0.0, &[1.0; 5]), &SolverOptions::default()).unwrap(),
            design,
            data.response(0),
        )
        .unwrap();
        let opts = InstrumentOptions {
            lambda: Some(0.0),
            post_lasso: true,
            ..Default::default()
        };
        for target in 0..k {
            let inst = fit_instrument(&data, (0, target), &opts, &SolverOptions::default()).unwrap();
            let est = ls_iv_estimate(&data, (0, target), &fit, &inst, &unit_scheme(n)).unwrap();
            assert!((est.beta2 - ols[target]).abs() < 1e-8, "{} vs {}", est.beta2, ols[target]);
        }
    }

    #[test]
    fn oracle_nuisances_give_unbiased_estimates() {
        let (n, reps) = (200, 500);
        let mut errors = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut r = rng::stream(rep as u64, &[4]);
            let z = normals(&mut r, n);
            let v = normals(&mut r, n);
            let xk: Vec<f64> = (0..n).map(|t| 0.5 * z[t] + v[t]).collect();
            let eps = normals(&mut r, n);
            // Ỹ built from the true nuisance coefficients: β_k X_k + ε.
            let y_tilde: Vec<f64> = (0..n).map(|t| 1.5 * xk[t] + eps[t]).collect();
            let est = ls_iv_series((0, 0), &xk, &y_tilde, &v, &unit_scheme(n)).unwrap();
            errors.push(est.beta2 - 1.5);
        }
        let mc_se = stats::sd(&errors) / (reps as f64).sqrt();
        assert!(stats::mean(&errors).abs() < 2.0 * mc_se, "{} vs {mc_se}", stats::mean(&errors));
    }

    #[test]
    fn desparsified_forms_agree() {
        for seed in 0..20 {
            let mut r = rng::stream(seed, &[5]);
            let (n, k) = (90, 12);
            let x = toeplitz_x(&mut r, n, k);
            let eps = normals(&mut r, n);
            let y: Vec<f64> = (0..n).map(|t| 3.0 * x[(t, 1)] + x[(t, 7)] + eps[t]).collect();
            let data = panel(x, y, seed % 2 == 0);
            let design = data.design(0);
            let fit = solve_lasso(&LassoProblem::new(0, design, data.response(0), 25.0, &[1.0; 12]), &SolverOptions::default()).unwrap();
            for target in [0, 1, 7] {
                let inst = fit_instrument(&data, (0, target), &InstrumentOptions::default(), &SolverOptions::default()).unwrap();
                let est = ls_iv_estimate(&data, (0, target), &fit, &inst, &unit_scheme(n)).unwrap();
                let xk = column(design, target);
                let alt = desparsified_sum_form(fit.coef.values[target], &xk, &fit.residuals, &inst.v_hat);
                assert!((alt - est.beta2).abs() <= 1e-10 * est.beta2.abs().max(1.0));
                assert!(est.sigma > 0.0);
            }
        }
    }

    #[test]
    fn ls_iv_is_scale_equivariant() {
        let mut r = rng::stream(6, &[6]);
        let n = 100;
        let xk = normals(&mut r, n);
        let v: Vec<f64> = xk.iter().map(|x| x + 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
        let y: Vec<f64> = (0..n).map(|t| 0.7 * xk[t] + r.sample::<f64, _>(StandardNormal)).collect();
        let scheme = BlockScheme::new(5, n).unwrap();
        let a = ls_iv_series((0, 0), &xk, &y, &v, &scheme).unwrap();
        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let b = ls_iv_series((0, 0), &xk, &y3, &v, &scheme).unwrap();
        assert!((b.beta2 - 3.0 * a.beta2).abs() <= 1e-12 * b.beta2.abs());
        assert!((b.sigma - 3.0 * a.sigma).abs() <= 1e-10 * b.sigma);
        for (za, zb) in a.zeta_series.iter().zip(&b.zeta_series) {
            assert!((za - zb).abs() < 1e-10);
        }
    }

    #[test]
    fn lad_with_unit_regressor_is_the_median() {
        let mut r = rng::stream(7, &[7]);
        let n = 101;
        let y = normals(&mut r, n);
        let ones = vec![1.0; n];
        let est = lad_iv_series((0, 0), &ones, &y, &ones, &unit_scheme(n)).unwrap();
        assert!((est.beta2 - stats::median(&y)).abs() <= 1e-3 / (n as f64).sqrt());
    }

    #[test]
    fn lad_recovers_noiseless_slope() {
        let mut r = rng::stream(8, &[8]);
        let n = 50;
        let xk = normals(&mut r, n);
        let y: Vec<f64> = xk.iter().map(|x| 2.0 * x).collect();
        let est = lad_iv_series((0, 0), &xk, &y, &xk, &unit_scheme(n)).unwrap();
        assert!((est.beta2 - 2.0).abs() <= 1e-3 / (n as f64).sqrt());
    }

    #[test]
    fn lad_beats_ls_under_heavy_tails() {
        let (n, reps) = (200, 500);
        let t3 = StudentT::new(3.0).unwrap();
        let (mut ls, mut lad) = (0.0, 0.0);
        for rep in 0..reps {
            let mut r = rng::stream(rep as u64, &[9]);
            let xk = normals(&mut r, n);
            let y: Vec<f64> = xk.iter().map(|x| x + r.sample(t3)).collect();
            let scheme = unit_scheme(n);
            ls += (ls_iv_series((0, 0), &xk, &y, &xk, &scheme).unwrap().beta2 - 1.0).powi(2);
            lad += (lad_iv_series((0, 0), &xk, &y, &xk, &scheme).unwrap().beta2 - 1.0).powi(2);
        }
        assert!(lad <= ls, "lad {lad} ls {ls}");
    }

    #[test]
    fn lad_moment_without_root_errors() {
        // X ≡ 0 makes the moment constant in β.
        let zeros = vec![0.0; 10];
        let ones = vec![1.0; 10];
        assert!(matches!(solve_lad_moment(&zeros, &zeros, &ones, 5.0, 0.1), Err(Error::Numerical(_))));
        // An identically zero moment is solved at the bracket edge.
        assert!(solve_lad_moment(&ones, &zeros, &zeros, 0.0, 1.0).is_ok());
    }

    #[test]
    fn empty_union_is_simple_regression() {
        let mut r = rng::stream(10, &[10]);
        let n = 60;
        let x = DMatrix::from_fn(n, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|t| 1.2 * x[(t, 1)] + r.sample::<f64, _>(StandardNormal)).collect();
        let xk: Vec<f64> = x.column(1).iter().copied().collect();
        let data = panel(x, y.clone(), false);
        let est = double_selection_estimate(&data, (0, 1), &[], false, &unit_scheme(n)).unwrap();
        let slope = dot(&xk, &y) / dot(&xk, &xk);
        assert!((est.beta2 - slope).abs() < 1e-12);
    }

    #[test]
    fn double_lad_recovers_noiseless_coefficients() {
        let mut r = rng::stream(11, &[11]);
        let n = 40;
        let x = DMatrix::from_fn(n, 4, |_, _| r.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|t| 2.0 * x[(t, 0)] - x[(t, 2)] + 3.0).collect();
        let data = panel(x, y, true);
        let est = double_selection_estimate(&data, (0, 0), &[2], true, &unit_scheme(n)).unwrap();
        assert!((est.beta2 - 2.0).abs() < 1e-6, "{}", est.beta2);
    }

    #[test]
    fn double_selection_coverage() {
        let (n, k, reps) = (200, 50, 500);
        let z = stats::normal_quantile(0.975);
        let mut covered = 0;
        for rep in 0..reps {
            let mut r = rng::stream(rep as u64, &[12]);
            let x = toeplitz_x(&mut r, n, k);
            let y: Vec<f64> = (0..n)
                .map(|t| 0.5 * x[(t, 0)] + x[(t, 1)] - x[(t, 5)] + r.sample::<f64, _>(StandardNormal))
                .collect();
            let data = panel(x, y, false);
            // Union covering the outcome support and the neighbours of the target.
            let est = double_selection_estimate(&data, (0, 0), &[1, 2, 5, 9], false, &unit_scheme(n)).unwrap();
            if (est.beta2 - 0.5).abs() <= z * est.standard_error() {
                covered += 1;
            }
        }
        let rate = covered as f64 / reps as f64;
        assert!((0.92..=0.98).contains(&rate), "{rate}");
    }

    #[test]
    fn methods_agree_on_one_instance() {
        let mut r = rng::stream(13, &[13]);
        let (n, k) = (200, 30);
        let x = toeplitz_x(&mut r, n, k);
        let y: Vec<f64> = (0..n)
            .map(|t| 1.0 * x[(t, 0)] + 2.0 * x[(t, 3)] + r.sample::<f64, _>(StandardNormal))
            .collect();
        let data = panel(x, y, true);
        let targets = TargetSet::new(vec![(0, 0), (0, 1)], &data).unwrap();
        let tuning = TuningConfig {
            draws: 500,
            ..Default::default()
        };
        let plan = run_pilot_then_tune(&data, &tuning).unwrap().plan;
        let runs: Vec<Vec<DebiasedEstimate>> = [DebiasMethod::LsIv, DebiasMethod::LadIv, DebiasMethod::DoubleLs, DebiasMethod::DoubleLad]
            .iter()
            .map(|&method| {
                let cfg = DebiasConfig {
                    method,
                    ..Default::default()
                };
                run_algorithm(&data, &targets, &plan, &cfg).unwrap()
            })
            .collect();
        for t in 0..2 {
            let se = runs.iter().map(|r| r[t].standard_error()).fold(0.0, f64::max);
            let vals: Vec<f64> = runs.iter().map(|r| r[t].beta2).collect();
            let spread = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - vals.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            assert!(spread <= 4.0 * se, "{vals:?} se {se}");
        }
        assert!((runs[0][0].beta2 - 1.0).abs() < 4.0 * runs[0][0].standard_error());
    }

    #[test]
    fn null_zeta_is_centered() {
        let mut r = rng::stream(14, &[14]);
        let (n, k) = (200, 20);
        let x = toeplitz_x(&mut r, n, k);
        let y: Vec<f64> = (0..n).map(|t| x[(t, 2)] + r.sample::<f64, _>(StandardNormal)).collect();
        let data = panel(x, y, false);
        let targets = TargetSet::new(vec![(0, 0)], &data).unwrap();
        let plan = run_pilot_then_tune(&data, &TuningConfig { draws: 300, ..Default::default() }).unwrap().plan;
        let est = &run_algorithm(&data, &targets, &plan, &DebiasConfig::default()).unwrap()[0];
        assert!(stats::mean(&est.zeta_series).abs() <= 10.0 / (n as f64).sqrt());
    }
}
