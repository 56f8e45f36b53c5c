use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use srelasso::data::{euclidean_norm, format_exact, load_panel_csv};
use srelasso::debias::run_algorithm;
use srelasso::dgp::run_experiment;
use srelasso::inference::{bootstrap_pivots, build_report, residual_bootstrap_pivots};
use srelasso::penalty::{
    fit_system, lambda_gaussian_canonical, recover_intercept, run_pilot, scan_block_size, tune_from_pilot, PenaltyMethod, PenaltyPlan,
    PenaltyScope, ScanCriterion,
};
use srelasso::rng::{self, tag};
use srelasso::{PanelDataset, TargetSet};

use crate::config::{BootstrapKind, RunConfig};
use crate::failure::{CliError, CliResult};

fn load_data(cfg: &RunConfig) -> CliResult<PanelDataset> {
    let path = cfg.data_path()?;
    let schema = cfg.data.as_ref().expect("checked by data_path").schema();
    if !path.exists() {
        return Err(CliError::data(format!("data.path: {} does not exist", path.display())));
    }
    let data = load_panel_csv(path, &schema).map_err(|e| CliError::from(e).context(&format!("data.path {}", path.display())))?;
    log::info!("loaded {} rows, {} equations from {}", data.n(), data.num_equations(), path.display());
    Ok(data)
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("out: cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::data(e.to_string()))
}

/// Plan from `plan` when given, otherwise a fresh tuning run.
fn obtain_plan(cfg: &RunConfig, data: &PanelDataset) -> CliResult<PenaltyPlan> {
    if let Some(path) = &cfg.plan {
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("plan: cannot read {}: {e}", path.display())))?;
        let plan: PenaltyPlan = serde_json::from_str(&text).map_err(|e| CliError::config(format!("plan: {}: {e}", path.display())))?;
        if plan.lambdas.len() != data.num_equations() || plan.loadings.values.len() != data.num_equations() {
            return Err(CliError::config(format!("plan: {} does not match the dataset's equations", path.display())));
        }
        log::info!("using penalty plan from {}", path.display());
        return Ok(plan);
    }
    let pilot = run_pilot(data, &cfg.tuning)?;
    Ok(tune_from_pilot(data, &pilot, &cfg.tuning)?.plan)
}

pub fn tune(cfg: &RunConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    let t = &cfg.tuning;
    let pilot = run_pilot(&data, t)?;
    let outcome = tune_from_pilot(&data, &pilot, t)?;
    let plan = &outcome.plan;
    let out = cfg.out_dir();
    write_out(&out, "plan.json", serde_json::to_string_pretty(plan)?.as_bytes())?;

    let (joint, per): (f64, Vec<f64>) = match t.method {
        PenaltyMethod::Bootstrap => (
            outcome.plan_for_scope(&data, PenaltyScope::Joint).lambdas[0],
            outcome.plan_for_scope(&data, PenaltyScope::PerEquation).lambdas,
        ),
        PenaltyMethod::GaussianCanonical => {
            let per = (0..data.num_equations())
                .map(|j| lambda_gaussian_canonical(t.alpha, t.c, data.n(), data.spec(j).num_covariates(), 1))
                .collect::<Result<Vec<_>, _>>()?;
            let total: usize = (0..data.num_equations()).map(|j| data.spec(j).num_covariates()).sum();
            (lambda_gaussian_canonical(t.alpha, t.c, data.n(), total, 1)?, per)
        }
    };
    let mean_per = per.iter().sum::<f64>() / per.len() as f64;
    let max_per = per.iter().cloned().fold(f64::MIN, f64::max);

    let mut s = String::new();
    let _ = writeln!(s, "# Penalty plan\n");
    let _ = writeln!(
        s,
        "scope {:?}, method {:?}, alpha {}, c {}, B = {}, b_n = {} ({} blocks), seed {}\n",
        plan.scope, plan.method, plan.alpha, plan.c, plan.draws, plan.scheme.block_size, plan.scheme.block_count, plan.seed
    );
    let _ = writeln!(s, "| equation | response | lambda | loading min | loading mean | loading max | floored |");
    let _ = writeln!(s, "|---:|---|---:|---:|---:|---:|---:|");
    for j in 0..data.num_equations() {
        let row = plan.loadings.row(j);
        let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let avg = row.iter().sum::<f64>() / row.len() as f64;
        let floored = plan.loadings.floor_applied[j].iter().filter(|f| **f).count();
        let _ = writeln!(s, "| {j} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {floored} |", data.response_name(j), plan.lambda(j), mn, avg, mx);
    }
    let _ = writeln!(s, "\n## Joint versus per-equation\n");
    let _ = writeln!(s, "joint lambda {joint:.4}; per-equation lambda mean {mean_per:.4}, max {max_per:.4}");
    let _ = writeln!(
        s,
        "joint >= mean per-equation: {}; joint >= every per-equation: {}",
        if joint >= mean_per { "yes" } else { "no" },
        if joint >= max_per { "yes" } else { "no" }
    );
    if !plan.diagnostics.is_empty() {
        let _ = writeln!(s, "\n## Diagnostics\n");
        for d in &plan.diagnostics {
            let _ = writeln!(s, "- {d}");
        }
    }
    write_out(&out, "tune_summary.md", s.as_bytes())?;
    print!("{s}");
    Ok(())
}

pub const FIT_COLUMNS: [&str; 11] = [
    "equation",
    "response",
    "lambda",
    "support_size",
    "converged",
    "rank_deficient",
    "intercept",
    "l1_norm",
    "l2_norm",
    "prediction_norm",
    "residual_rms",
];

pub fn estimate(cfg: &RunConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    let plan = obtain_plan(cfg, &data)?;
    let fits = fit_system(&data, &plan, cfg.final_fit, &cfg.tuning.solver)?;
    let mut coef_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let mut md = String::from("| equation | response | lambda | support | l2 norm | prediction norm | residual rms |\n|---:|---|---:|---:|---:|---:|---:|\n");
    for (j, fit) in fits.iter().enumerate() {
        for (k, &b) in fit.coef.values.iter().enumerate() {
            coef_rows.push(vec![
                j.to_string(),
                data.response_name(j).to_string(),
                k.to_string(),
                data.covariate_name(j, k).to_string(),
                format_exact(b),
                (b != 0.0).to_string(),
            ]);
        }
        let l1: f64 = fit.coef.values.iter().map(|v| v.abs()).sum();
        let l2 = euclidean_norm(&fit.coef);
        let pn = data.design(j).prediction_norm(&fit.coef.values)?;
        let rms = (fit.residuals.iter().map(|r| r * r).sum::<f64>() / fit.residuals.len() as f64).sqrt();
        fit_rows.push(vec![
            j.to_string(),
            data.response_name(j).to_string(),
            format_exact(plan.lambda(j)),
            fit.coef.support.len().to_string(),
            fit.converged.to_string(),
            fit.rank_deficient.to_string(),
            format_exact(recover_intercept(&data, j, &fit.coef)),
            format_exact(l1),
            format_exact(l2),
            format_exact(pn),
            format_exact(rms),
        ]);
        let _ = writeln!(
            md,
            "| {j} | {} | {:.4} | {} | {:.4} | {:.4} | {:.4} |",
            data.response_name(j),
            plan.lambda(j),
            fit.coef.support.len(),
            l2,
            pn,
            rms
        );
    }
    let out = cfg.out_dir();
    write_out(
        &out,
        "coefficients.csv",
        &csv_bytes(&["equation", "response", "covariate", "name", "coefficient", "selected"], &coef_rows)?,
    )?;
    write_out(&out, "fit_summary.csv", &csv_bytes(&FIT_COLUMNS, &fit_rows)?)?;
    write_out(&out, "fit_summary.md", md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn resolve_targets(cfg: &RunConfig, data: &PanelDataset) -> CliResult<(Vec<(usize, usize)>, Vec<f64>)> {
    let inf = cfg.inference.as_ref().expect("checked by apply");
    let mut targets = Vec::new();
    let mut nulls = Vec::new();
    for (i, t) in inf.targets.iter().enumerate() {
        let j = data
            .response_names()
            .iter()
            .position(|r| *r == t.equation)
            .ok_or_else(|| CliError::config(format!("inference.targets[{i}].equation: no equation with response '{}'", t.equation)))?;
        let k = (0..data.spec(j).num_covariates())
            .find(|&k| data.covariate_name(j, k) == t.covariate)
            .ok_or_else(|| CliError::config(format!("inference.targets[{i}].covariate: '{}' is not a covariate of '{}'", t.covariate, t.equation)))?;
        targets.push((j, k));
        nulls.push(t.null);
    }
    Ok((targets, nulls))
}

pub fn infer(cfg: &RunConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    let inf = cfg.inference.as_ref().expect("checked by apply");
    let (targets, nulls) = resolve_targets(cfg, &data)?;
    let set = TargetSet::new(targets, &data).map_err(|e| CliError::from(e).context("inference.targets"))?;
    let plan = obtain_plan(cfg, &data)?;
    let estimates = run_algorithm(&data, &set, &plan, &inf.debias)?;
    let seed = cfg.seed.unwrap_or(cfg.tuning.seed);
    let crit = match inf.bootstrap {
        BootstrapKind::Pivot => bootstrap_pivots(&estimates, &plan.scheme, inf.draws, rng::derive_seed(seed, &[tag::PIVOT]), inf.alpha)?,
        BootstrapKind::Residual => residual_bootstrap_pivots(
            &data,
            &set,
            &plan,
            &inf.debias,
            inf.draws,
            rng::derive_seed(seed, &[tag::RESIDUAL]),
            inf.alpha,
        )?,
    };
    let report = build_report(&data, &estimates, &crit, &nulls)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    let out = cfg.out_dir();
    write_out(&out, "report.csv", &buf)?;
    let md = report.to_markdown();
    write_out(&out, "report.md", md.as_bytes())?;
    for d in &report.diagnostics {
        log::info!("{d}");
    }
    print!("{md}");
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> CliResult<()> {
    let sim = cfg.simulate.as_ref().expect("checked by apply");
    let res = run_experiment(sim)?;
    let mut buf = Vec::new();
    res.write_csv(&mut buf)?;
    let out = cfg.out_dir();
    write_out(&out, "results.csv", &buf)?;
    let (j, k, n) = sim.scenario.dims();
    let mut md = format!(
        "scenario {}, J = {j}, K = {k}, n = {n}{}, b_n = {}, R = {}, seed {}\n\n| metric | mean | median | sd |\n|---|---:|---:|---:|\n",
        sim.scenario.name(),
        sim.scenario.rho().map(|r| format!(", rho = {r}")).unwrap_or_default(),
        sim.tuning.block_size,
        res.replications.len(),
        sim.seed
    );
    for m in &res.summary {
        let _ = writeln!(md, "| {} | {:.4} | {:.4} | {:.4} |", m.metric, m.mean, m.median, m.sd);
    }
    write_out(&out, "results.md", md.as_bytes())?;
    print!("{md}");
    Ok(())
}

pub fn scan(cfg: &RunConfig) -> CliResult<()> {
    let data = load_data(cfg)?;
    let sc = cfg.scan.as_ref().ok_or_else(|| CliError::config("scan: section is required for scan-block-size"))?;
    let res = scan_block_size(
        &data,
        &cfg.tuning,
        &sc.grid,
        ScanCriterion::Holdout {
            fraction: sc.holdout_fraction,
        },
        cfg.final_fit,
    )
    .map_err(|e| CliError::from(e).context("scan"))?;
    let opt = |v: Option<f64>| v.map(format_exact).unwrap_or_default();
    let rows: Vec<Vec<String>> = res
        .rows
        .iter()
        .map(|r| vec![r.block_size.to_string(), opt(r.criterion), opt(r.lambda), (r.block_size == res.best_block_size).to_string()])
        .collect();
    let out = cfg.out_dir();
    write_out(&out, "block_scan.csv", &csv_bytes(&["block_size", "holdout_rmse", "lambda", "selected"], &rows)?)?;
    let mut md = String::from("| b_n | holdout RMSE | lambda |\n|---:|---:|---:|\n");
    for r in &res.rows {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "skipped".into());
        let mark = if r.block_size == res.best_block_size { " **" } else { "" };
        let _ = writeln!(md, "| {}{mark} | {} | {} |", r.block_size, f(r.criterion), f(r.lambda));
    }
    let _ = writeln!(md, "\nselected b_n = {}", res.best_block_size);
    for w in &res.warnings {
        log::warn!("{w}");
    }
    write_out(&out, "block_scan.md", md.as_bytes())?;
    print!("{md}");
    Ok(())
}
