//! The convex verification suite: every harness check on a random quadratic
//! for each configured noise level.

use std::path::{Path, PathBuf};

use breglearn::analysis::{
    check_bregman_convergence, check_iterate_invariants, check_loss_decay, check_step_identity, check_summability,
    record_trajectory, CheckReport, CheckStatus, ConvergenceSetup, ConvexRun, DecayMode, Trajectory,
};
use breglearn::optim::{Method, StepSchedule};
use breglearn::problems::{make_quadratic, ConvexProblem};
use breglearn::{GroupLayout, ParamVector, Regularizer};

use crate::config::{ConfigError, ExperimentConfig, RegKind};
use crate::output::write_rows;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub sigma: f64,
    pub report: CheckReport,
}

pub fn problem(cfg: &ExperimentConfig) -> Result<ConvexProblem, ConfigError> {
    Ok(make_quadratic(cfg.quad_dim, cfg.quad_cond, cfg.quad_sparsity, cfg.quad_seed)?)
}

pub fn regularizer(cfg: &ExperimentConfig) -> Result<Regularizer, ConfigError> {
    let layout = GroupLayout::entrywise(cfg.quad_dim);
    match cfg.reg_kind()? {
        RegKind::None => Ok(Regularizer::zero(layout)),
        RegKind::L1 => Ok(Regularizer::l1(cfg.lambda, layout)?),
        RegKind::GroupRows => Err(ConfigError::Field {
            field: "regularizer".into(),
            message: "the convex suite supports `none` and `l1`".into(),
        }),
    }
}

fn traces(
    p: &ConvexProblem,
    reg: &Regularizer,
    run: &ConvexRun,
    n: usize,
) -> Result<Vec<Trajectory>, ConfigError> {
    let theta0 = ParamVector::zeros(p.dim());
    (0..n as u64)
        .map(|s| record_trajectory(p, reg, run, &theta0, s).map_err(ConfigError::from))
        .collect()
}

/// Runs loss decay, summability, convergence, the pathwise step identities
/// and the iterate invariants of every Bregman method for one noise level.
pub fn run_sigma(cfg: &ExperimentConfig, sigma: f64) -> Result<Vec<CheckReport>, ConfigError> {
    let p = problem(cfg)?;
    let reg = regularizer(cfg)?;
    let hyper = cfg.hyperparams()?;
    let delta = hyper.delta;
    let constant = StepSchedule::Constant(cfg.tau);
    constant.validate().map_err(|e| ConfigError::Field {
        field: "tau".into(),
        message: e.to_string(),
    })?;
    let decay = cfg.decay_schedule()?;
    let deterministic = sigma == 0.0;
    let (n, steps) = if deterministic { (1, cfg.decay_steps) } else { (cfg.mc_seeds, cfg.mc_steps) };
    let run = |method, schedule, steps| ConvexRun {
        method,
        hyper,
        schedule,
        sigma,
        steps,
    };
    let mut out = Vec::new();

    let tr = traces(&p, &reg, &run(Method::LinBreg, constant, steps), n)?;
    let mode = if deterministic { DecayMode::Deterministic } else { DecayMode::MonteCarlo };
    out.push(check_loss_decay(&tr, &reg, p.l_lip, delta, sigma, mode)?);
    drop(tr);

    let summable = cfg.summable_schedule()?;
    let tr = traces(&p, &reg, &run(Method::LinBreg, summable, steps), n)?;
    out.push(check_summability(&tr, &reg, delta, &summable)?);
    drop(tr);

    let setup = ConvergenceSetup {
        delta,
        schedule: decay,
        sigma,
        n_seeds: cfg.mc_seeds,
        horizon: cfg.horizon,
        burn_in: cfg.burn_in,
        target_ratio: cfg.target_ratio,
    };
    out.push(check_bregman_convergence(&p, &reg, &setup)?);

    let theta0 = ParamVector::zeros(p.dim());
    let tr = record_trajectory(&p, &reg, &run(Method::LinBreg, constant, cfg.identity_steps), &theta0, 0)?;
    out.push(check_step_identity(&tr, &reg, delta, &p.theta_star, cfg.identity_tol)?);
    for method in [Method::LinBreg, Method::LinBregMomentum, Method::AdaBreg] {
        let tr = record_trajectory(&p, &reg, &run(method, constant, cfg.identity_steps), &theta0, 0)?;
        let mut rep = check_iterate_invariants(&tr, &reg, delta, &p.theta_star, cfg.identity_tol)?;
        rep.name = format!("{} ({method})", rep.name);
        out.push(rep);
    }
    Ok(out)
}

pub fn run_suite(cfg: &ExperimentConfig) -> Result<Vec<SuiteResult>, ConfigError> {
    let mut results = Vec::new();
    for &sigma in &cfg.sigmas {
        for report in run_sigma(cfg, sigma)? {
            results.push(SuiteResult { sigma, report });
        }
    }
    Ok(results)
}

/// Any check failed; precondition violations are not failures.
pub fn any_failed(results: &[SuiteResult]) -> bool {
    results.iter().any(|r| r.report.status == CheckStatus::Fail)
}

/// Writes the report to `output` and the checkpoint series to
/// `<stem>_series.csv`.
pub fn write_report(output: &Path, results: &[SuiteResult]) -> Result<PathBuf, ConfigError> {
    let header: Vec<String> = ["sigma", "check", "status", "n_checked", "first_violation", "worst_margin", "detail"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.sigma),
                r.report.name.clone(),
                r.report.status.to_string(),
                r.report.n_checked.to_string(),
                r.report.first_violation.map_or_else(String::new, |k| k.to_string()),
                format!("{}", r.report.worst_margin),
                r.report.detail.clone(),
            ]
        })
        .collect();
    write_rows(output, &header, &rows)?;

    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let series_path = output.with_file_name(format!("{stem}_series.csv"));
    let header: Vec<String> = ["sigma", "check", "step", "value"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = results
        .iter()
        .flat_map(|r| {
            r.report.series.iter().map(move |(k, v)| {
                vec![format!("{}", r.sigma), r.report.name.clone(), k.to_string(), format!("{v}")]
            })
        })
        .collect();
    write_rows(&series_path, &header, &rows)?;
    Ok(series_path)
}
