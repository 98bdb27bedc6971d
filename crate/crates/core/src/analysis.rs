//! Metrics and executable checks of the convergence theory on quadratic
//! testbeds.
//!
//! Monte-Carlo checks estimate expectations by averaging over seeds and allow
//! a slack of four standard errors.

use std::fmt;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{argmax_rows, forward, MlpSpec};
use crate::optim::{Hyperparams, Method, OptimizerState, StepSchedule};
use crate::problems::{noisy_grad, ConvexProblem, Dataset, NoiseChannel};
use crate::regularizers::{BlockKind, GroupLayout, Regularizer};
use crate::{Error, ParamVector, Result};

/// Slack of Monte-Carlo checks, in standard errors.
pub const MC_SLACK_SE: f64 = 4.0;

/// One row of a training or verification trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    /// Validation loss, for runs without class labels.
    pub val_loss: Option<f64>,
    pub l1_norm: f64,
    pub nonzero_fraction_total: f64,
    pub nonzero_fraction_rows: Option<f64>,
    pub d_k: Option<f64>,
    pub sym_breg_step: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparsityScope {
    /// Entries of all weight blocks.
    AllWeights,
    /// Rows of all weight blocks; a row counts as nonzero unless it is
    /// identically zero.
    Rows,
}

fn weight_blocks(layout: &GroupLayout) -> impl Iterator<Item = &crate::Block> {
    layout.blocks().iter().filter(|b| b.kind != BlockKind::Bias)
}

/// Fraction of nonzero weights (or rows); biases are excluded. Zero when the
/// layout has no weights.
pub fn nonzero_fraction(theta: &ParamVector, layout: &GroupLayout, scope: SparsityScope) -> Result<f64> {
    layout.check_dim("nonzero_fraction", theta.len())?;
    let (mut nz, mut total) = (0usize, 0usize);
    for b in weight_blocks(layout) {
        let seg = theta.slice(ndarray::s![b.range()]);
        match scope {
            SparsityScope::AllWeights => {
                nz += seg.iter().filter(|&&x| x != 0.0).count();
                total += b.len();
            }
            SparsityScope::Rows => {
                nz += active_rows(seg.as_slice().expect("contiguous"), b.cols);
                total += b.rows;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { nz as f64 / total as f64 })
}

fn active_rows(w: &[f64], cols: usize) -> usize {
    w.chunks(cols.max(1)).filter(|r| r.iter().any(|&x| x != 0.0)).count()
}

/// Number of not identically zero rows in each weight block, in layout order.
pub fn active_rows_per_block(theta: &ParamVector, layout: &GroupLayout) -> Result<Vec<usize>> {
    layout.check_dim("active_rows_per_block", theta.len())?;
    Ok(weight_blocks(layout)
        .map(|b| {
            let seg = theta.slice(ndarray::s![b.range()]);
            active_rows(seg.as_slice().expect("contiguous"), b.cols)
        })
        .collect())
}

/// `l1` norm of all weights, biases excluded.
pub fn weight_l1_norm(theta: &ParamVector, layout: &GroupLayout) -> Result<f64> {
    layout.check_dim("weight_l1_norm", theta.len())?;
    Ok(weight_blocks(layout)
        .map(|b| theta.slice(ndarray::s![b.range()]).iter().map(|x| x.abs()).sum::<f64>())
        .sum())
}

/// `d_k = D_{J_delta}^{v_k}(theta*, theta_k)`.
pub fn track_bregman_to_min(
    problem: &ConvexProblem,
    reg: &Regularizer,
    delta: f64,
    theta_k: &ParamVector,
    v_k: &ParamVector,
) -> Result<f64> {
    reg.elastic_bregman_distance(delta, &problem.theta_star, theta_k, v_k)
}

/// Argmax accuracy, evaluated in chunks.
pub fn classification_accuracy(spec: &MlpSpec, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset split"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(2000) {
        let out = forward(spec, theta, data.inputs(chunk).view())?;
        correct += argmax_rows(&out)
            .into_iter()
            .zip(chunk)
            .filter(|&(p, &i)| p == data.label(i))
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A recorded Bregman run: `thetas`, `vs` and `losses` hold `K + 1` entries,
/// `grads` and `taus` the `K` gradients and step sizes used.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub thetas: Vec<ParamVector>,
    pub vs: Vec<ParamVector>,
    pub grads: Vec<ParamVector>,
    pub taus: Vec<f64>,
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.taus.len()
    }
}

/// Setup of a stochastic Bregman run on a quadratic.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexRun {
    pub method: Method,
    pub hyper: Hyperparams,
    pub schedule: StepSchedule,
    pub sigma: f64,
    pub steps: usize,
}

/// Noise generator of Monte-Carlo replicate `seed`.
pub fn seed_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b7e9);
    rng.set_stream(seed);
    rng
}

/// Runs from `theta0` with noisy gradients and records every iterate.
/// Non-Bregman methods record an empty `v`.
pub fn record_trajectory(
    problem: &ConvexProblem,
    reg: &Regularizer,
    run: &ConvexRun,
    theta0: &ParamVector,
    seed: u64,
) -> Result<Trajectory> {
    let mut theta = theta0.clone();
    let mut state = OptimizerState::new(run.method, run.hyper, run.schedule, reg, &theta)?;
    let channel = NoiseChannel { sigma: run.sigma };
    let mut rng = seed_rng(seed);
    let mut tr = Trajectory {
        thetas: vec![theta.clone()],
        vs: vec![state.v.clone()],
        losses: vec![problem.loss(&theta)],
        ..Default::default()
    };
    for _ in 0..run.steps {
        let g = noisy_grad(problem, &channel, &theta, &mut rng);
        let tau = state.current_tau();
        state.step(&mut theta, &g, reg)?;
        tr.grads.push(g);
        tr.taus.push(tau);
        tr.thetas.push(theta.clone());
        tr.vs.push(state.v.clone());
        tr.losses.push(problem.loss(&theta));
    }
    Ok(tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The check's hypotheses do not hold; nothing was claimed.
    PreconditionViolated,
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::PreconditionViolated => "PRECONDITION",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub status: CheckStatus,
    /// Number of individual inequalities or identities evaluated.
    pub n_checked: usize,
    pub first_violation: Option<usize>,
    /// Largest `lhs - rhs` over all evaluated steps; negative or zero means
    /// every inequality held.
    pub worst_margin: f64,
    pub detail: String,
    /// Optional `(step, value)` series for diagnosis, e.g. mean `d_k` at
    /// checkpoints.
    pub series: Vec<(usize, f64)>,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        CheckReport {
            name: name.to_string(),
            status: CheckStatus::Pass,
            n_checked: 0,
            first_violation: None,
            worst_margin: f64::NEG_INFINITY,
            detail: String::new(),
            series: Vec::new(),
        }
    }

    fn precondition(name: &str, detail: String) -> Self {
        CheckReport {
            status: CheckStatus::PreconditionViolated,
            detail,
            ..CheckReport::new(name)
        }
    }

    /// Records `margin = lhs - rhs` of step `k`; positive margins fail.
    fn record(&mut self, k: usize, margin: f64) {
        self.n_checked += 1;
        if margin > self.worst_margin || margin.is_nan() {
            self.worst_margin = margin;
        }
        if !(margin <= 0.0) && self.first_violation.is_none() {
            self.first_violation = Some(k);
            self.status = CheckStatus::Fail;
        }
    }

    pub fn passed(&self) -> bool {
        self.status == CheckStatus::Pass
    }

    pub fn summary(&self) -> String {
        let first = self.first_violation.map_or(String::new(), |k| format!(", first violation at step {k}"));
        format!(
            "{} {}: {} checks, worst margin {:.3e}{}{}{}",
            self.status,
            self.name,
            self.n_checked,
            self.worst_margin,
            first,
            if self.detail.is_empty() { "" } else { "; " },
            self.detail
        )
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sq_dist(a: &ParamVector, b: &ParamVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Subgradient of `J` encoded by the subgradient variable: `p = v - theta / delta`.
fn primal_subgradient(v: &ParamVector, theta: &ParamVector, delta: f64) -> ParamVector {
    let mut p = v.clone();
    p.scaled_add(-1.0 / delta, theta);
    p
}

/// `D_J^sym(theta_{k+1}, theta_k)` along a trajectory.
pub fn sym_breg_steps(tr: &Trajectory, reg: &Regularizer, delta: f64) -> Result<Vec<f64>> {
    (0..tr.steps())
        .map(|k| {
            let p1 = primal_subgradient(&tr.vs[k + 1], &tr.thetas[k + 1], delta);
            let p0 = primal_subgradient(&tr.vs[k], &tr.thetas[k], delta);
            reg.sym_bregman_distance(&tr.thetas[k + 1], &tr.thetas[k], &p1, &p0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayMode {
    /// Exact gradients: `loss_{k+1} <= loss_k + 1e-12` on every trace.
    Deterministic,
    /// Seed-averaged form of the stochastic loss decay inequality.
    MonteCarlo,
}

/// Constants of the stochastic loss decay inequality used by the harness.
///
/// Young's inequality is applied with `c = (2 - L delta tau) / 2`, which
/// leaves `C = (2 - L delta tau) / 2` in front of the step length term:
///
/// `E L_{k+1} + E D^sym / tau + C / (2 delta tau) E|dtheta|^2 <= E L_k + tau delta sigma^2 / (2 c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayConstants {
    pub c: f64,
    pub big_c: f64,
}

impl DecayConstants {
    /// `None` unless `tau < 2 / (delta L)`.
    pub fn new(l_lip: f64, delta: f64, tau: f64) -> Option<Self> {
        let c = (2.0 - l_lip * delta * tau) / 2.0;
        (c > 0.0).then_some(DecayConstants { c, big_c: c })
    }
}

/// Loss decay along recorded trajectories under `tau_k <= 2 / (delta L)`.
pub fn check_loss_decay(
    traces: &[Trajectory],
    reg: &Regularizer,
    l_lip: f64,
    delta: f64,
    sigma: f64,
    mode: DecayMode,
) -> Result<CheckReport> {
    let name = match mode {
        DecayMode::Deterministic => "loss decay (deterministic)",
        DecayMode::MonteCarlo => "loss decay (Monte-Carlo)",
    };
    if traces.is_empty() {
        return Err(Error::Empty("trace list"));
    }
    let bound = 2.0 / (delta * l_lip);
    let steps = traces[0].steps();
    if traces.iter().any(|t| t.steps() != steps) {
        return Err(Error::Layout("traces must have equal length".into()));
    }
    for (k, &tau) in traces[0].taus.iter().enumerate() {
        let ok = match mode {
            DecayMode::Deterministic => tau <= bound,
            DecayMode::MonteCarlo => tau < bound,
        };
        if !ok {
            return Ok(CheckReport::precondition(
                name,
                format!("step {k}: tau = {tau} exceeds 2/(delta L) = {bound}"),
            ));
        }
    }
    let mut report = CheckReport::new(name);
    match mode {
        DecayMode::Deterministic => {
            for tr in traces {
                for k in 0..steps {
                    report.record(k, tr.losses[k + 1] - tr.losses[k] - 1e-12);
                }
            }
            report.detail = format!("{} trace(s), slack 1e-12", traces.len());
        }
        DecayMode::MonteCarlo => {
            let syms = traces.iter().map(|t| sym_breg_steps(t, reg, delta)).collect::<Result<Vec<_>>>()?;
            let mut diffs = vec![0.0; traces.len()];
            for k in 0..steps {
                let tau = traces[0].taus[k];
                let consts = DecayConstants::new(l_lip, delta, tau).expect("checked above");
                for (s, tr) in traces.iter().enumerate() {
                    let step_sq = sq_dist(&tr.thetas[k + 1], &tr.thetas[k]);
                    diffs[s] = tr.losses[k + 1] + syms[s][k] / tau + consts.big_c / (2.0 * delta * tau) * step_sq
                        - tr.losses[k];
                }
                let (mean, se) = mean_se(&diffs);
                let rhs = tau * delta * sigma * sigma / (2.0 * consts.c);
                report.record(k, mean - rhs - MC_SLACK_SE * se);
            }
            report.detail = format!(
                "{} seeds, slack {MC_SLACK_SE} standard errors, c = C = (2 - L delta tau)/2",
                traces.len()
            );
        }
    }
    Ok(report)
}

/// Tail-flatness of the partial sums of `E D^sym(theta_{k+1}, theta_k)` and
/// `E|theta_{k+1} - theta_k|^2`: the last 10% of the steps contribute at most
/// 5% of each total.
pub fn check_summability(
    traces: &[Trajectory],
    reg: &Regularizer,
    delta: f64,
    schedule: &StepSchedule,
) -> Result<CheckReport> {
    let name = "summability";
    if !schedule.is_square_summable() {
        return Ok(CheckReport::precondition(
            name,
            format!("schedule {schedule:?} is not nonincreasing and square-summable"),
        ));
    }
    if traces.is_empty() {
        return Err(Error::Empty("trace list"));
    }
    let steps = traces[0].steps();
    if steps == 0 || traces.iter().any(|t| t.steps() != steps) {
        return Err(Error::Layout("traces must be nonempty and of equal length".into()));
    }
    let mut sym = vec![0.0; steps];
    let mut sq = vec![0.0; steps];
    let n = traces.len() as f64;
    for tr in traces {
        for (k, s) in sym_breg_steps(tr, reg, delta)?.into_iter().enumerate() {
            sym[k] += s / n;
            sq[k] += sq_dist(&tr.thetas[k + 1], &tr.thetas[k]) / n;
        }
    }
    let tail_start = steps - steps.div_ceil(10);
    let mut report = CheckReport::new(name);
    let mut parts = Vec::new();
    for (label, xs) in [("D^sym", &sym), ("|dtheta|^2", &sq)] {
        let total: f64 = xs.iter().sum();
        let tail: f64 = xs[tail_start..].iter().sum();
        report.record(tail_start, tail - 0.05 * total);
        parts.push(format!("{label}: tail {tail:.3e} of total {total:.3e}"));
    }
    report.detail = parts.join(", ");
    Ok(report)
}

/// Setup of the Monte-Carlo Bregman distance convergence check.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceSetup {
    pub delta: f64,
    pub schedule: StepSchedule,
    pub sigma: f64,
    pub n_seeds: usize,
    pub horizon: usize,
    /// Steps excluded from the monotonicity test of the checkpoint means.
    pub burn_in: usize,
    /// Required ratio `mean d_horizon / mean d_0`.
    pub target_ratio: f64,
}

/// Checkpoints `0, 1, 2, 4, ...` up to and including `horizon`.
pub fn log_checkpoints(horizon: usize) -> Vec<usize> {
    let mut cps = vec![0];
    let mut k = 1;
    while k < horizon {
        cps.push(k);
        k *= 2;
    }
    if horizon > 0 {
        cps.push(horizon);
    }
    cps
}

/// Runs stochastic LinBreg from `theta = 0, v = 0` over `n_seeds` replicates
/// and checks that the mean `d_k` falls to `target_ratio` of its initial
/// value at the horizon and decreases over logarithmic checkpoints after the
/// burn-in (up to the Monte-Carlo slack).
pub fn check_bregman_convergence(problem: &ConvexProblem, reg: &Regularizer, setup: &ConvergenceSetup) -> Result<CheckReport> {
    let name = "Bregman distance convergence";
    let delta = setup.delta;
    let limit = problem.mu / (2.0 * delta * problem.l_lip * problem.l_lip);
    match setup.schedule {
        StepSchedule::PowerDecay { c, p } if c <= limit && p > 0.5 && p <= 1.0 => {}
        s => {
            return Ok(CheckReport::precondition(
                name,
                format!("schedule {s:?} needs power decay with c <= mu/(2 delta L^2) = {limit:.4e} and p in (1/2, 1]"),
            ));
        }
    }
    if setup.n_seeds == 0 {
        return Err(Error::Empty("seed list"));
    }
    let cps = log_checkpoints(setup.horizon);
    let mut samples = vec![Vec::with_capacity(setup.n_seeds); cps.len()];
    let hyper = Hyperparams { delta, ..Default::default() };
    let channel = NoiseChannel { sigma: setup.sigma };
    for seed in 0..setup.n_seeds {
        let mut theta = ParamVector::zeros(problem.dim());
        let mut state = OptimizerState::new(Method::LinBreg, hyper, setup.schedule, reg, &theta)?;
        let mut rng = seed_rng(seed as u64);
        let mut next = 0;
        for k in 0..=setup.horizon {
            if cps[next] == k {
                let d = track_bregman_to_min(problem, reg, delta, &theta, &state.v)?;
                samples[next].push(d);
                next += 1;
                if next == cps.len() {
                    break;
                }
            }
            let g = noisy_grad(problem, &channel, &theta, &mut rng);
            state.step(&mut theta, &g, reg)?;
        }
    }
    let stats: Vec<(f64, f64)> = samples.iter().map(|s| mean_se(s)).collect();
    let mut report = CheckReport::new(name);
    report.series = cps.iter().zip(&stats).map(|(&k, &(m, _))| (k, m)).collect();
    let (d0, _) = stats[0];
    let (dh, _) = stats[stats.len() - 1];
    report.record(setup.horizon, dh - setup.target_ratio * d0);
    for j in 1..cps.len() {
        if cps[j - 1] < setup.burn_in {
            continue;
        }
        let (a, sa) = stats[j - 1];
        let (b, sb) = stats[j];
        report.record(cps[j], b - a - MC_SLACK_SE * (sa * sa + sb * sb).sqrt());
    }
    report.detail = format!(
        "{} seeds, mean d_0 = {d0:.4e}, mean d_{} = {dh:.4e} (ratio {:.4}, target {})",
        setup.n_seeds,
        setup.horizon,
        dh / d0,
        setup.target_ratio
    );
    Ok(report)
}

/// Pathwise identities for the difference of consecutive distances
/// `d_k = D_{J_delta}^{v_k}(theta*, theta_k)` of a LinBreg trajectory:
///
/// `d_{k+1} - d_k = -D_{J_delta}^{v_k}(theta_{k+1}, theta_k) + tau <g_k, theta* - theta_{k+1}>`
///
/// `d_{k+1} - d_k = D_{J_delta}^{v_{k+1}}(theta_k, theta_{k+1}) + tau <g_k, theta* - theta_k>`
pub fn check_step_identity(tr: &Trajectory, reg: &Regularizer, delta: f64, theta_star: &ParamVector, tol: f64) -> Result<CheckReport> {
    let mut report = CheckReport::new("pathwise step identities");
    let d: Vec<f64> = (0..=tr.steps())
        .map(|k| reg.elastic_bregman_distance(delta, theta_star, &tr.thetas[k], &tr.vs[k]))
        .collect::<Result<_>>()?;
    for k in 0..tr.steps() {
        let tau = tr.taus[k];
        let g = &tr.grads[k];
        let lhs = d[k + 1] - d[k];
        let first = -reg.elastic_bregman_distance(delta, &tr.thetas[k + 1], &tr.thetas[k], &tr.vs[k])?
            + tau * g.dot(&(theta_star - &tr.thetas[k + 1]));
        let second = reg.elastic_bregman_distance(delta, &tr.thetas[k], &tr.thetas[k + 1], &tr.vs[k + 1])?
            + tau * g.dot(&(theta_star - &tr.thetas[k]));
        report.record(k, (lhs - first).abs() - tol);
        report.record(k, (lhs - second).abs() - tol);
    }
    report.detail = format!("{} steps, tolerance {tol:e}", tr.steps());
    Ok(report)
}

/// Prox feasibility `v_k in dJ_delta(theta_k)` and the split of the elastic
/// Bregman distance, checked at every iterate against the direct formula
/// `J_delta(bar) - J_delta(theta) - <v, bar - theta>` with `bar = theta*`.
pub fn check_iterate_invariants(
    tr: &Trajectory,
    reg: &Regularizer,
    delta: f64,
    theta_star: &ParamVector,
    tol: f64,
) -> Result<CheckReport> {
    let mut report = CheckReport::new("feasibility and split identity");
    let j_star = reg.eval_elastic(delta, theta_star)?;
    for (k, (theta, v)) in tr.thetas.iter().zip(&tr.vs).enumerate() {
        let feasible = reg.check_feasibility(delta, theta, v, tol)?;
        report.record(k, feasible.map_or(-tol, |viol| viol.residual - tol));
        let split = reg.elastic_bregman_distance(delta, theta_star, theta, v)?;
        let direct = j_star - reg.eval_elastic(delta, theta)? - v.dot(&(theta_star - theta));
        report.record(k, (split - direct).abs() - tol);
    }
    report.detail = format!("{} iterates, tolerance {tol:e}", tr.thetas.len());
    Ok(report)
}
