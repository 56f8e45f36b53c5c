//! Bootstrap inference on de-biased coefficients.
//!
//! Pivots `T_jk = √n(β̂_jk - b0)/σ̂_jk` are compared with block multiplier
//! bootstrap quantiles of `T*_jk = n^{-1/2} Σ_i e_{j,i} Σ_{t ∈ block i} ζ̂_jk,t`.
//! Multipliers are indexed by (draw, equation, block) and shared by every
//! target in the same equation.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, TargetSet};
use crate::debias::{fit_instrument, lad_iv_series, ls_iv_series, partial_response, DebiasConfig, DebiasMethod, DebiasedEstimate};
use crate::error::{config, Error, Result};
use crate::lasso::{post_lasso_ols, solve_lasso, LassoProblem};
use crate::lrv::BlockScheme;
use crate::penalty::{fit_equation, multipliers, FinalFit, PenaltyPlan};
use crate::rng::tag;
use crate::stats;

/// Bootstrap draws of the pivots and their quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct BootCriticalValues {
    pub targets: Vec<(usize, usize)>,
    /// `B × |G|` matrix of `T*_jk`.
    pub draws: DMatrix<f64>,
    pub individual: Vec<f64>,
    pub joint: f64,
    pub alpha: f64,
    pub block_size: usize,
    pub seed: u64,
}

impl BootCriticalValues {
    pub fn num_draws(&self) -> usize {
        self.draws.nrows()
    }

    /// Quantile of `max_{g ∈ subset} |T*_g|`.
    pub fn max_quantile(&self, subset: &[usize], level: f64) -> f64 {
        if subset.is_empty() {
            return 0.0;
        }
        let maxima: Vec<f64> = (0..self.draws.nrows())
            .map(|b| subset.iter().map(|&g| self.draws[(b, g)].abs()).fold(0.0, f64::max))
            .collect();
        stats::order_statistic(&maxima, level)
    }
}

/// Quantiles of a draw matrix at level `1 - alpha`.
pub fn critical_values_from_draws(
    targets: Vec<(usize, usize)>,
    draws: DMatrix<f64>,
    alpha: f64,
    block_size: usize,
    seed: u64,
) -> Result<BootCriticalValues> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return config(format!("alpha must lie in (0, 1), got {alpha}"));
    }
    if draws.nrows() == 0 || draws.ncols() != targets.len() {
        return config("draw matrix does not match the target set");
    }
    let level = 1.0 - alpha;
    let individual = (0..draws.ncols())
        .map(|g| {
            let col: Vec<f64> = draws.column(g).iter().map(|v| v.abs()).collect();
            stats::order_statistic(&col, level)
        })
        .collect();
    let mut crit = BootCriticalValues {
        targets,
        draws,
        individual,
        joint: 0.0,
        alpha,
        block_size,
        seed,
    };
    let all: Vec<usize> = (0..crit.targets.len()).collect();
    crit.joint = crit.max_quantile(&all, level);
    Ok(crit)
}

/// Block multiplier bootstrap of the studentized scores.
pub fn bootstrap_pivots(estimates: &[DebiasedEstimate], scheme: &BlockScheme, draws: usize, seed: u64, alpha: f64) -> Result<BootCriticalValues> {
    if estimates.is_empty() {
        return config("no targets to bootstrap");
    }
    if scheme.block_count < 2 {
        return config("block scheme leaves fewer than 2 blocks");
    }
    if draws == 0 {
        return config("need at least one bootstrap draw");
    }
    let n = estimates[0].zeta_series.len();
    if estimates.iter().any(|e| e.zeta_series.len() != n) || scheme.used() > n {
        return config("studentized score series must share one length compatible with the block scheme");
    }
    let mut equations: Vec<usize> = estimates.iter().map(|e| e.target.0).collect();
    equations.sort_unstable();
    equations.dedup();
    let sqrt_n = (n as f64).sqrt();
    let blocks: Vec<(usize, Vec<usize>, DMatrix<f64>)> = equations
        .par_iter()
        .map(|&j| {
            let members: Vec<usize> = (0..estimates.len()).filter(|&g| estimates[g].target.0 == j).collect();
            let sums = DMatrix::from_fn(scheme.block_count, members.len(), |i, m| {
                let z = &estimates[members[m]].zeta_series;
                let start = i * scheme.block_size;
                z[start..start + scheme.block_size].iter().sum::<f64>() / sqrt_n
            });
            let mut e = DMatrix::zeros(draws, scheme.block_count);
            for b in 0..draws {
                for (i, v) in multipliers(seed, tag::PIVOT, b, j, scheme.block_count).enumerate() {
                    e[(b, i)] = v;
                }
            }
            (j, members, e * sums)
        })
        .collect();
    let mut out = DMatrix::zeros(draws, estimates.len());
    for (_, members, t) in &blocks {
        for (m, &g) in members.iter().enumerate() {
            out.set_column(g, &t.column(m));
        }
    }
    let targets = estimates.iter().map(|e| e.target).collect();
    critical_values_from_draws(targets, out, alpha, scheme.block_size, seed)
}

/// Single-step rejections are a subset of the result.
pub fn stepdown_multiple_test(estimates: &[DebiasedEstimate], crit: &BootCriticalValues, nulls: &[f64]) -> Vec<usize> {
    let t: Vec<f64> = estimates.iter().zip(nulls).map(|(e, &b0)| e.pivot(b0).abs()).collect();
    let level = 1.0 - crit.alpha;
    let mut active: Vec<usize> = (0..estimates.len()).collect();
    let mut rejected = Vec::new();
    loop {
        let q = crit.max_quantile(&active, level);
        let (hit, keep): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&g| t[g] > q);
        if hit.is_empty() {
            break;
        }
        rejected.extend(hit);
        active = keep;
        if active.is_empty() {
            break;
        }
    }
    rejected.sort_unstable();
    rejected
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    fn around(center: f64, half: f64) -> Self {
        Self {
            lo: center - half,
            hi: center + half,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub equation: usize,
    pub covariate: usize,
    pub response: String,
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub null_value: f64,
    pub t_stat: f64,
    pub q_individual: f64,
    pub q_joint: f64,
    pub ci_asymptotic: Interval,
    pub ci_bootstrap: Interval,
    pub ci_simultaneous: Interval,
    pub reject_asymptotic: bool,
    pub reject_individual: bool,
    pub reject_simultaneous: bool,
    pub reject_stepdown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub method: DebiasMethod,
    pub alpha: f64,
    pub draws: usize,
    pub block_size: usize,
    pub seed: u64,
    pub rows: Vec<TargetReport>,
    pub joint_reject: bool,
    pub diagnostics: Vec<String>,
}

/// Interval families and tests for every target.
pub fn build_report(
    data: &PanelDataset,
    estimates: &[DebiasedEstimate],
    crit: &BootCriticalValues,
    nulls: &[f64],
) -> Result<ConfidenceReport> {
    if estimates.len() != crit.targets.len() || nulls.len() != estimates.len() {
        return config("estimates, critical values and null values must cover the same targets");
    }
    let z = stats::normal_quantile(1.0 - crit.alpha / 2.0);
    let stepdown = stepdown_multiple_test(estimates, crit, nulls);
    let mut rows = Vec::with_capacity(estimates.len());
    let mut max_t: f64 = 0.0;
    for (g, est) in estimates.iter().enumerate() {
        if est.target != crit.targets[g] {
            return config("target order differs between estimates and critical values");
        }
        let (j, k) = est.target;
        let se = est.standard_error();
        let t = est.pivot(nulls[g]);
        max_t = max_t.max(t.abs());
        rows.push(TargetReport {
            equation: j,
            covariate: k,
            response: data.response_name(j).to_string(),
            name: data.covariate_name(j, k).to_string(),
            estimate: est.beta2,
            se,
            null_value: nulls[g],
            t_stat: t,
            q_individual: crit.individual[g],
            q_joint: crit.joint,
            ci_asymptotic: Interval::around(est.beta2, z * se),
            ci_bootstrap: Interval::around(est.beta2, crit.individual[g] * se),
            ci_simultaneous: Interval::around(est.beta2, crit.joint * se),
            reject_asymptotic: t.abs() > z,
            reject_individual: t.abs() > crit.individual[g],
            reject_simultaneous: t.abs() > crit.joint,
            reject_stepdown: stepdown.contains(&g),
        });
    }
    let diagnostics = estimates
        .iter()
        .flat_map(|e| e.diagnostics.iter().map(move |d| format!("({}, {}): {d}", e.target.0, e.target.1)))
        .collect();
    Ok(ConfidenceReport {
        method: estimates[0].method,
        alpha: crit.alpha,
        draws: crit.num_draws(),
        block_size: crit.block_size,
        seed: crit.seed,
        rows,
        joint_reject: max_t > crit.joint,
        diagnostics,
    })
}

pub const REPORT_COLUMNS: [&str; 20] = [
    "equation",
    "covariate",
    "response",
    "name",
    "estimate",
    "se",
    "null",
    "t",
    "q_individual",
    "q_joint",
    "ci_asy_lo",
    "ci_asy_hi",
    "ci_boot_lo",
    "ci_boot_hi",
    "ci_sim_lo",
    "ci_sim_hi",
    "reject_asy",
    "reject_boot",
    "reject_sim",
    "reject_stepdown",
];

impl ConfidenceReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(REPORT_COLUMNS)?;
        for r in &self.rows {
            let nums = [
                r.estimate,
                r.se,
                r.null_value,
                r.t_stat,
                r.q_individual,
                r.q_joint,
                r.ci_asymptotic.lo,
                r.ci_asymptotic.hi,
                r.ci_bootstrap.lo,
                r.ci_bootstrap.hi,
                r.ci_simultaneous.lo,
                r.ci_simultaneous.hi,
            ];
            let mut rec = vec![r.equation.to_string(), r.covariate.to_string(), r.response.clone(), r.name.clone()];
            rec.extend(nums.iter().map(|v| crate::data::format_exact(*v)));
            rec.extend([r.reject_asymptotic, r.reject_individual, r.reject_simultaneous, r.reject_stepdown].map(|b| b.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "method {}, alpha {}, B = {}, b_n = {}, seed {}\n\n",
            self.method.name(),
            self.alpha,
            self.draws,
            self.block_size,
            self.seed
        );
        s.push_str("| response | covariate | estimate | se | t | boot CI | simultaneous CI | reject (boot/sim/step-down) |\n");
        s.push_str("|---|---|---:|---:|---:|---|---|---|\n");
        let yn = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {:.4} | {:.4} | {:.4} | [{:.4}, {:.4}] | [{:.4}, {:.4}] | {}/{}/{} |\n",
                r.response,
                r.name,
                r.estimate,
                r.se,
                r.t_stat,
                r.ci_bootstrap.lo,
                r.ci_bootstrap.hi,
                r.ci_simultaneous.lo,
                r.ci_simultaneous.hi,
                yn(r.reject_individual),
                yn(r.reject_simultaneous),
                yn(r.reject_stepdown)
            ));
        }
        s.push_str(&format!(
            "\njoint null rejected: {}\n",
            if self.joint_reject { "yes" } else { "no" }
        ));
        s
    }
}

/// Residual multiplier bootstrap: responses are rebuilt as
/// `Y* = X β̂ + e ε̂` with block-shared multipliers and the whole IV step is
/// rerun with the instruments held fixed. Only IV methods are supported.
pub fn residual_bootstrap_pivots(
    data: &PanelDataset,
    targets: &TargetSet,
    plan: &PenaltyPlan,
    cfg: &DebiasConfig,
    draws: usize,
    seed: u64,
    alpha: f64,
) -> Result<BootCriticalValues> {
    if !matches!(cfg.method, DebiasMethod::LsIv | DebiasMethod::LadIv) {
        return config("the residual bootstrap supports ls-iv and lad-iv only");
    }
    let scheme = plan.scheme;
    if scheme.block_count < 2 {
        return config("block scheme leaves fewer than 2 blocks");
    }
    let kind = if cfg.post_lasso_outcome {
        FinalFit::PostLasso
    } else {
        FinalFit::Lasso
    };
    let n = data.n();
    let mut equations: Vec<usize> = targets.targets().iter().map(|t| t.0).collect();
    equations.sort_unstable();
    equations.dedup();
    let fits = equations
        .iter()
        .map(|&j| fit_equation(data, j, plan, kind, &cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    let instruments = targets
        .targets()
        .par_iter()
        .map(|&t| fit_instrument(data, t, &cfg.instrument, &cfg.solver))
        .collect::<Result<Vec<_>>>()?;
    let eq_pos = |j: usize| equations.iter().position(|&e| e == j).expect("equation fitted");
    let rows: Vec<Vec<f64>> = (0..draws)
        .into_par_iter()
        .map(|b| -> Result<Vec<f64>> {
            let mut refits = Vec::with_capacity(equations.len());
            for (pos, &j) in equations.iter().enumerate() {
                let design = data.design(j);
                let e: Vec<f64> = multipliers(seed, tag::RESIDUAL, b, j, scheme.block_count).collect();
                let fitted = design.predict(&fits[pos].coef.values)?;
                let mut y = DVector::from_fn(n, |t, _| {
                    let i = (t / scheme.block_size).min(scheme.block_count - 1);
                    fitted[t] + e[i] * fits[pos].residuals[t]
                });
                if data.spec(j).intercept {
                    let m = y.mean();
                    y.add_scalar_mut(-m);
                }
                let p = LassoProblem::new(j, design, &y, plan.lambda(j), plan.loadings.row(j));
                let mut fit = solve_lasso(&p, &cfg.solver)?;
                if kind == FinalFit::PostLasso {
                    fit = post_lasso_ols(&fit, design, &y)?;
                }
                refits.push(fit);
            }
            targets
                .targets()
                .iter()
                .zip(&instruments)
                .map(|(&(j, k), inst)| {
                    let pos = eq_pos(j);
                    let design = data.design(j);
                    let xk: Vec<f64> = design.x().column(k).iter().copied().collect();
                    let yt = partial_response(design, &refits[pos], k);
                    let est = match cfg.method {
                        DebiasMethod::LsIv => ls_iv_series((j, k), &xk, &yt, &inst.v_hat, &scheme)?,
                        _ => lad_iv_series((j, k), &xk, &yt, &inst.v_hat, &scheme)?,
                    };
                    Ok(est.pivot(fits[pos].coef.values[k]))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let g = targets.len();
    let mat = DMatrix::from_fn(draws, g, |b, c| rows[b][c]);
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite residual bootstrap pivot".into()));
    }
    critical_values_from_draws(targets.targets().to_vec(), mat, alpha, scheme.block_size, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EquationSpec;
    use crate::debias::run_algorithm;
    use crate::penalty::{run_pilot_then_tune, TuningConfig};
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn estimate(target: (usize, usize), beta2: f64, zeta: Vec<f64>) -> DebiasedEstimate {
        DebiasedEstimate {
            target,
            method: DebiasMethod::LsIv,
            beta2,
            phi: -1.0,
            omega: 1.0,
            sigma: 1.0,
            score_series: zeta.clone(),
            zeta_series: zeta,
            omega_floored: false,
            diagnostics: Vec::new(),
        }
    }

    fn normal_series(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, &[0x31]);
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    fn toy_data(n: usize, k: usize, j: usize) -> PanelDataset {
        let specs = (0..j).map(|e| EquationSpec::new(e, (0..k).collect(), false)).collect();
        PanelDataset::new(DMatrix::zeros(n, j), DMatrix::from_fn(n, k, |t, c| (t * (c + 1)) as f64), specs).unwrap()
    }

    #[test]
    fn zero_scores_give_zero_quantiles() {
        let n = 40;
        let ests = vec![estimate((0, 0), 1.0, vec![0.0; n]), estimate((0, 1), 1.0, normal_series(1, n))];
        let crit = bootstrap_pivots(&ests, &BlockScheme::new(2, n).unwrap(), 500, 3, 0.05).unwrap();
        assert!(crit.draws.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(crit.individual[0], 0.0);
        assert!(crit.individual[1] > 0.0);
    }

    #[test]
    fn single_target_joint_equals_individual() {
        let n = 60;
        let data = toy_data(n, 2, 1);
        let ests = vec![estimate((0, 1), 0.3, normal_series(2, n))];
        let crit = bootstrap_pivots(&ests, &BlockScheme::new(3, n).unwrap(), 1000, 4, 0.1).unwrap();
        assert_eq!(crit.joint, crit.individual[0]);
        let report = build_report(&data, &ests, &crit, &[0.0]).unwrap();
        assert_eq!(report.rows[0].ci_simultaneous, report.rows[0].ci_bootstrap);
    }

    #[test]
    fn iid_scores_give_half_normal_quantile() {
        let n = 2000;
        let zeta = normal_series(5, n);
        let scale = (zeta.iter().map(|z| z * z).sum::<f64>() / n as f64).sqrt();
        let ests = vec![estimate((0, 0), 0.0, zeta)];
        let crit = bootstrap_pivots(&ests, &BlockScheme::new(1, n).unwrap(), 10_000, 6, 0.05).unwrap();
        assert!((crit.individual[0] - 1.96).abs() < 0.05, "{}", crit.individual[0]);
        assert!((crit.individual[0] / scale - 1.96).abs() < 0.05);
        // Bootstrap and asymptotic half-widths agree within 5%.
        let data = toy_data(n, 1, 1);
        let report = build_report(&data, &ests, &crit, &[0.0]).unwrap();
        let r = &report.rows[0];
        let ratio = r.ci_bootstrap.half_width() / r.ci_asymptotic.half_width();
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn null_at_estimate_is_never_rejected() {
        let n = 50;
        let data = toy_data(n, 3, 2);
        let ests = vec![
            estimate((0, 0), 1.5, normal_series(7, n)),
            estimate((1, 2), -0.5, normal_series(8, n)),
        ];
        let crit = bootstrap_pivots(&ests, &BlockScheme::new(1, n).unwrap(), 300, 9, 0.05).unwrap();
        let report = build_report(&data, &ests, &crit, &[1.5, -0.5]).unwrap();
        for r in &report.rows {
            assert_eq!(r.t_stat, 0.0);
            assert!(!r.reject_individual && !r.reject_simultaneous && !r.reject_stepdown && !r.reject_asymptotic);
            for ci in [r.ci_asymptotic, r.ci_bootstrap, r.ci_simultaneous] {
                assert!(((ci.hi - r.estimate) - (r.estimate - ci.lo)).abs() <= 1e-12 * ci.half_width().max(1.0));
            }
        }
        assert!(!report.joint_reject);
    }

    #[test]
    fn joint_quantile_dominates_and_nests_intervals() {
        for seed in 0..20 {
            let n = 80;
            let data = toy_data(n, 4, 3);
            let ests: Vec<DebiasedEstimate> = (0..6)
                .map(|g| estimate((g % 3, g / 3), 0.1 * g as f64, normal_series(seed * 10 + g as u64, n)))
                .collect();
            let crit = bootstrap_pivots(&ests, &BlockScheme::new(4, n).unwrap(), 400, seed, 0.1).unwrap();
            let report = build_report(&data, &ests, &crit, &[0.0; 6]).unwrap();
            for (g, r) in report.rows.iter().enumerate() {
                assert!(crit.joint >= crit.individual[g]);
                assert!(r.ci_simultaneous.lo <= r.ci_bootstrap.lo && r.ci_simultaneous.hi >= r.ci_bootstrap.hi);
            }
        }
    }

    #[test]
    fn multipliers_are_shared_within_equation() {
        // Identical score series in the same equation produce identical draws;
        // in different equations they do not.
        let n = 40;
        let z = normal_series(11, n);
        let ests = vec![estimate((0, 0), 0.0, z.clone()), estimate((0, 1), 0.0, z.clone()), estimate((1, 0), 0.0, z)];
        let crit = bootstrap_pivots(&ests, &BlockScheme::new(2, n).unwrap(), 100, 12, 0.1).unwrap();
        assert_eq!(crit.draws.column(0), crit.draws.column(1));
        assert_ne!(crit.draws.column(0), crit.draws.column(2));
    }

    #[test]
    fn stepdown_edge_cases_and_monotonicity() {
        let n = 60;
        let quiet: Vec<DebiasedEstimate> = (0..4).map(|g| estimate((0, g), 0.0, normal_series(20 + g as u64, n))).collect();
        let crit = bootstrap_pivots(&quiet, &BlockScheme::new(1, n).unwrap(), 300, 1, 0.05).unwrap();
        assert!(stepdown_multiple_test(&quiet, &crit, &[0.0; 4]).is_empty());
        let loud: Vec<DebiasedEstimate> = quiet.iter().map(|e| DebiasedEstimate { beta2: 1e6, ..e.clone() }).collect();
        assert_eq!(stepdown_multiple_test(&loud, &crit, &[0.0; 4]), vec![0, 1, 2, 3]);
        for seed in 0..100u64 {
            let mut r = rng::stream(seed, &[0x32]);
            let ests: Vec<DebiasedEstimate> = (0..5)
                .map(|g| {
                    let b: f64 = r.random_range(0.0..0.6);
                    estimate((g % 2, g), b, normal_series(seed * 7 + g as u64, n))
                })
                .collect();
            let crit = bootstrap_pivots(&ests, &BlockScheme::new(2, n).unwrap(), 200, seed, 0.1).unwrap();
            let step = stepdown_multiple_test(&ests, &crit, &[0.0; 5]);
            for (g, e) in ests.iter().enumerate() {
                if e.pivot(0.0).abs() > crit.joint {
                    assert!(step.contains(&g));
                }
            }
        }
    }

    #[test]
    fn too_few_blocks_is_an_error() {
        let ests = vec![estimate((0, 0), 0.0, vec![1.0; 10])];
        assert!(bootstrap_pivots(&ests, &BlockScheme::new(6, 10).unwrap(), 100, 0, 0.1).is_err());
    }

    fn small_system(seed: u64) -> (PanelDataset, TargetSet, PenaltyPlan) {
        let mut r = rng::stream(seed, &[0x33]);
        let (n, k) = (100, 10);
        let x = DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal));
        let y = DMatrix::from_fn(n, 2, |t, j| x[(t, j + 2)] + r.sample::<f64, _>(StandardNormal));
        let specs = (0..2).map(|j| EquationSpec::new(j, (0..k).collect(), true)).collect();
        let data = PanelDataset::new(y, x, specs).unwrap();
        let targets = TargetSet::new(vec![(0, 0), (0, 2), (1, 1)], &data).unwrap();
        let tuning = TuningConfig {
            draws: 300,
            block_size: 2,
            seed,
            ..Default::default()
        };
        let plan = run_pilot_then_tune(&data, &tuning).unwrap().plan;
        (data, targets, plan)
    }

    #[test]
    fn report_is_deterministic_and_thread_independent() {
        let (data, targets, plan) = small_system(1);
        let run = || {
            let ests = run_algorithm(&data, &targets, &plan, &DebiasConfig::default()).unwrap();
            let crit = bootstrap_pivots(&ests, &plan.scheme, 500, 77, 0.05).unwrap();
            let report = build_report(&data, &ests, &crit, &[0.0; 3]).unwrap();
            let mut buf = Vec::new();
            report.write_csv(&mut buf).unwrap();
            buf
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert_eq!(text.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn residual_bootstrap_is_comparable() {
        let (data, targets, plan) = small_system(2);
        let cfg = DebiasConfig::default();
        let ests = run_algorithm(&data, &targets, &plan, &cfg).unwrap();
        let score = bootstrap_pivots(&ests, &plan.scheme, 400, 5, 0.1).unwrap();
        let resid = residual_bootstrap_pivots(&data, &targets, &plan, &cfg, 400, 5, 0.1).unwrap();
        let again = residual_bootstrap_pivots(&data, &targets, &plan, &cfg, 400, 5, 0.1).unwrap();
        assert_eq!(resid, again);
        let ratio = resid.joint / score.joint;
        assert!((0.6..1.6).contains(&ratio), "{ratio}");
        let double = DebiasConfig {
            method: DebiasMethod::DoubleLs,
            ..cfg
        };
        assert!(residual_bootstrap_pivots(&data, &targets, &plan, &double, 10, 5, 0.1).is_err());
    }

    #[test]
    fn markdown_lists_every_target() {
        let (data, targets, plan) = small_system(3);
        let ests = run_algorithm(&data, &targets, &plan, &DebiasConfig::default()).unwrap();
        let crit = bootstrap_pivots(&ests, &plan.scheme, 200, 1, 0.05).unwrap();
        let md = build_report(&data, &ests, &crit, &[0.0; 3]).unwrap().to_markdown();
        assert_eq!(md.lines().filter(|l| l.starts_with("| y")).count(), 3);
    }
}
