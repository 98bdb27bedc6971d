//! Bregman optimizers and their baselines as step functions over
//! `(theta, state, gradient)`.
//!
//! The Bregman family (LinBreg, LinBreg with momentum, AdaBreg) runs a
//! gradient-type update on the subgradient variable `v` and recovers the
//! parameters through `theta = prox_{delta J}(delta v)`, so that
//! `v in dJ_delta(theta)` holds after every step. SGD, Adam and proximal
//! gradient descent act on `theta` directly.
//!
//! Optimizers only consume gradients, never loss values.

use std::fmt;
use std::str::FromStr;

use ndarray::Zip;

use crate::regularizers::{check_delta, Regularizer};
use crate::{Error, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `tau_k = c / (k + 1)^p`
    PowerDecay { c: f64, p: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant(tau) if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::hyper("tau", tau, "must be positive and finite"))
            }
            StepSchedule::PowerDecay { c, .. } if !(c > 0.0 && c.is_finite()) => {
                Err(Error::hyper("c", c, "must be positive and finite"))
            }
            StepSchedule::PowerDecay { p, .. } if !(p >= 0.0 && p.is_finite()) => {
                Err(Error::hyper("p", p, "must be nonnegative and finite"))
            }
            _ => Ok(()),
        }
    }

    /// Step size for the `k`-th step, counting from zero.
    pub fn step_size(&self, k: usize) -> f64 {
        match *self {
            StepSchedule::Constant(tau) => tau,
            StepSchedule::PowerDecay { c, p } => c / ((k + 1) as f64).powf(p),
        }
    }

    /// Nonincreasing and square-summable, the regime of the summability and
    /// convergence results.
    pub fn is_square_summable(&self) -> bool {
        matches!(*self, StepSchedule::PowerDecay { p, .. } if p > 0.5)
    }
}

/// Convenience wrapper for [`StepSchedule::step_size`].
pub fn step_size(schedule: &StepSchedule, k: usize) -> f64 {
    schedule.step_size(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    /// Elastic net parameter.
    pub delta: f64,
    /// Momentum of LinBreg with momentum.
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            delta: 1.0,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        for (name, b) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::hyper(name, b, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::hyper("eps", self.eps, "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    LinBreg,
    LinBregMomentum,
    AdaBreg,
    Sgd,
    Adam,
    ProxGd,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::LinBreg,
        Method::LinBregMomentum,
        Method::AdaBreg,
        Method::Sgd,
        Method::Adam,
        Method::ProxGd,
    ];

    /// Whether the method tracks a subgradient variable `v`.
    pub fn is_bregman(self) -> bool {
        matches!(self, Method::LinBreg | Method::LinBregMomentum | Method::AdaBreg)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::LinBreg => "linbreg",
            Method::LinBregMomentum => "linbreg-momentum",
            Method::AdaBreg => "adabreg",
            Method::Sgd => "sgd",
            Method::Adam => "adam",
            Method::ProxGd => "proxgd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown optimizer `{s}`"))
    }
}

/// Mutable optimizer state. Buffers a method does not use stay empty.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub method: Method,
    pub hyper: Hyperparams,
    pub schedule: StepSchedule,
    /// Multiplies the scheduled step size (plateau decay).
    pub lr_scale: f64,
    /// Number of steps taken so far.
    pub k: usize,
    /// Subgradient variable, `v in dJ_delta(theta)`.
    pub v: ParamVector,
    /// Momentum buffer of LinBreg with momentum.
    pub m: ParamVector,
    pub m1: ParamVector,
    pub m2: ParamVector,
}

impl OptimizerState {
    /// Validates the hyperparameters and initializes the buffers at `theta`;
    /// for Bregman methods `v = p + theta / delta` with the zero subgradient
    /// selection.
    pub fn new(
        method: Method,
        hyper: Hyperparams,
        schedule: StepSchedule,
        reg: &Regularizer,
        theta: &ParamVector,
    ) -> Result<Self> {
        hyper.validate()?;
        schedule.validate()?;
        if reg.dim() != theta.len() {
            return Err(Error::dim("OptimizerState::new", reg.dim(), theta.len()));
        }
        let d = theta.len();
        let empty = || ParamVector::zeros(0);
        let v = if method.is_bregman() {
            reg.elastic_subgradient(hyper.delta, theta)?
        } else {
            empty()
        };
        let m = if method == Method::LinBregMomentum { ParamVector::zeros(d) } else { empty() };
        let (m1, m2) = if matches!(method, Method::AdaBreg | Method::Adam) {
            (ParamVector::zeros(d), ParamVector::zeros(d))
        } else {
            (empty(), empty())
        };
        Ok(OptimizerState {
            method,
            hyper,
            schedule,
            lr_scale: 1.0,
            k: 0,
            v,
            m,
            m1,
            m2,
        })
    }

    /// Step size used by the next step.
    pub fn current_tau(&self) -> f64 {
        self.schedule.step_size(self.k) * self.lr_scale
    }

    pub fn subgradient_var(&self) -> Option<&ParamVector> {
        self.method.is_bregman().then_some(&self.v)
    }

    /// Advances `theta` by one step of the configured method.
    pub fn step(&mut self, theta: &mut ParamVector, g: &ParamVector, reg: &Regularizer) -> Result<()> {
        match self.method {
            Method::LinBreg => linbreg_step(theta, self, g, reg),
            Method::LinBregMomentum => linbreg_momentum_step(theta, self, g, reg),
            Method::AdaBreg => adabreg_step(theta, self, g, reg),
            Method::Sgd => sgd_step(theta, self, g),
            Method::Adam => adam_step(theta, self, g),
            Method::ProxGd => proxgd_step(theta, self, g, reg),
        }
    }

    fn take_tau(&mut self, theta: &ParamVector, g: &ParamVector) -> Result<f64> {
        if g.len() != theta.len() {
            return Err(Error::dim("optimizer step (gradient)", theta.len(), g.len()));
        }
        let tau = self.current_tau();
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::hyper("tau", tau, "step size must be positive and finite"));
        }
        self.k += 1;
        Ok(tau)
    }

    fn check_method(&self, expected: Method) {
        debug_assert_eq!(self.method, expected, "state initialized for a different method");
    }
}

fn recover_theta(theta: &mut ParamVector, state: &OptimizerState, reg: &Regularizer) -> Result<()> {
    reg.prox_scaled_into(state.hyper.delta, &state.v, theta)?;
    // relative slack: the residual of v - theta / delta carries roundoff of |v|
    #[cfg(debug_assertions)]
    {
        let scale = state.v.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if let Some(viol) = reg.check_feasibility(state.hyper.delta, theta, &state.v, 1e-9 * scale)? {
            panic!("prox feasibility violated after step {}: {viol:?}", state.k);
        }
    }
    Ok(())
}

/// `v <- v - tau g`, `theta <- prox_{delta J}(delta v)`.
pub fn linbreg_step(theta: &mut ParamVector, state: &mut OptimizerState, g: &ParamVector, reg: &Regularizer) -> Result<()> {
    state.check_method(Method::LinBreg);
    let tau = state.take_tau(theta, g)?;
    Zip::from(&mut state.v).and(g).for_each(|v, &g| *v -= tau * g);
    recover_theta(theta, state, reg)
}

/// `m <- beta m + (1 - beta) tau g`, `v <- v - m`, `theta <- prox_{delta J}(delta v)`.
///
/// The momentum buffer accumulates `tau g` with the step size current at the
/// time of accumulation; older contributions are not rescaled when the
/// schedule changes.
pub fn linbreg_momentum_step(
    theta: &mut ParamVector,
    state: &mut OptimizerState,
    g: &ParamVector,
    reg: &Regularizer,
) -> Result<()> {
    state.check_method(Method::LinBregMomentum);
    let tau = state.take_tau(theta, g)?;
    let beta = state.hyper.beta;
    Zip::from(&mut state.v).and(&mut state.m).and(g).for_each(|v, m, &g| {
        *m = beta * *m + (1.0 - beta) * (tau * g);
        *v -= *m;
    });
    recover_theta(theta, state, reg)
}

/// Bias corrected moment step `tau m1_hat / (sqrt(m2_hat) + eps)`, shared by
/// AdaBreg and Adam; `apply` receives each coordinate's update.
fn adam_direction(state: &mut OptimizerState, g: &ParamVector, tau: f64, mut apply: impl FnMut(usize, f64)) {
    let Hyperparams { beta1, beta2, eps, .. } = state.hyper;
    let k = state.k as i32;
    let c1 = 1.0 - beta1.powi(k);
    let c2 = 1.0 - beta2.powi(k);
    let m1 = state.m1.as_slice_mut().expect("contiguous");
    let m2 = state.m2.as_slice_mut().expect("contiguous");
    for (i, &gi) in g.iter().enumerate() {
        m1[i] = beta1 * m1[i] + (1.0 - beta1) * gi;
        m2[i] = beta2 * m2[i] + (1.0 - beta2) * gi * gi;
        let m1_hat = m1[i] / c1;
        let m2_hat = m2[i] / c2;
        apply(i, tau * m1_hat / (m2_hat.sqrt() + eps));
    }
}

/// Adam moments on the subgradient variable followed by the prox recovery.
pub fn adabreg_step(theta: &mut ParamVector, state: &mut OptimizerState, g: &ParamVector, reg: &Regularizer) -> Result<()> {
    state.check_method(Method::AdaBreg);
    let tau = state.take_tau(theta, g)?;
    let mut v = std::mem::take(&mut state.v);
    {
        let vs = v.as_slice_mut().expect("contiguous");
        adam_direction(state, g, tau, |i, d| vs[i] -= d);
    }
    state.v = v;
    recover_theta(theta, state, reg)
}

/// `theta <- theta - tau g`.
pub fn sgd_step(theta: &mut ParamVector, state: &mut OptimizerState, g: &ParamVector) -> Result<()> {
    state.check_method(Method::Sgd);
    let tau = state.take_tau(theta, g)?;
    Zip::from(theta).and(g).for_each(|t, &g| *t -= tau * g);
    Ok(())
}

/// Reference Adam with bias correction, acting on `theta` directly.
pub fn adam_step(theta: &mut ParamVector, state: &mut OptimizerState, g: &ParamVector) -> Result<()> {
    state.check_method(Method::Adam);
    let tau = state.take_tau(theta, g)?;
    let ts = theta.as_slice_mut().expect("contiguous");
    adam_direction(state, g, tau, |i, d| ts[i] -= d);
    Ok(())
}

/// `theta <- prox_{tau J}(theta - tau g)`. The prox is scaled by the step
/// size, not by `delta`.
pub fn proxgd_step(theta: &mut ParamVector, state: &mut OptimizerState, g: &ParamVector, reg: &Regularizer) -> Result<()> {
    state.check_method(Method::ProxGd);
    let tau = state.take_tau(theta, g)?;
    Zip::from(&mut *theta).and(g).for_each(|t, &g| *t -= tau * g);
    reg.prox_in_place(tau, theta)
}
