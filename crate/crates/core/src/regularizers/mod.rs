//! Sparsity promoting functionals `J`, the elastic net `J_delta = J + |.|^2 / (2 delta)`,
//! closed-form proximal maps, subgradient selections and Bregman distances.
//!
//! All functionals act on a flat [`ParamVector`] through a [`GroupLayout`];
//! indices outside regularized blocks contribute nothing to `J`.
//!
//! Subgradients are selected deterministically: at a nonsmooth point (an
//! entry or a whole group equal to zero) the zero element is chosen.

mod layout;

pub use layout::{Block, BlockKind, Group, GroupLayout};

use ndarray::{ArrayView1, Zip};

use crate::{Error, ParamVector, Result};

/// Scalar soft shrinkage `sign(x) max(|x| - t, 0)`.
#[inline]
pub fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Zero,
    /// `lambda * sum_g |g|_1`
    L1 { lambda: f64 },
    /// `lambda * sum_g sqrt(n_g) |g|_2`
    GroupL12 { lambda: f64 },
}

impl Penalty {
    pub fn lambda(&self) -> f64 {
        match *self {
            Penalty::Zero => 0.0,
            Penalty::L1 { lambda } | Penalty::GroupL12 { lambda } => lambda,
        }
    }
}

/// A penalty bound to the layout it acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularizer {
    penalty: Penalty,
    layout: GroupLayout,
}

/// First index at which the optimality condition `v in dJ_delta(theta)` fails.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityViolation {
    pub index: usize,
    pub residual: f64,
}

impl Regularizer {
    pub fn new(penalty: Penalty, layout: GroupLayout) -> Result<Self> {
        let lambda = penalty.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::hyper("lambda", lambda, "must be finite and nonnegative"));
        }
        Ok(Regularizer { penalty, layout })
    }

    pub fn zero(layout: GroupLayout) -> Self {
        Regularizer {
            penalty: Penalty::Zero,
            layout,
        }
    }

    pub fn l1(lambda: f64, layout: GroupLayout) -> Result<Self> {
        Self::new(Penalty::L1 { lambda }, layout)
    }

    pub fn group_l12(lambda: f64, layout: GroupLayout) -> Result<Self> {
        Self::new(Penalty::GroupL12 { lambda }, layout)
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    /// `J(theta)`.
    pub fn eval(&self, theta: &ParamVector) -> Result<f64> {
        self.layout.check_dim("eval", theta.len())?;
        let t = as_slice(theta);
        Ok(match self.penalty {
            Penalty::Zero => 0.0,
            Penalty::L1 { lambda } => {
                let s: f64 = self
                    .layout
                    .regularized_blocks()
                    .map(|b| t[b.range()].iter().map(|x| x.abs()).sum::<f64>())
                    .sum();
                lambda * s
            }
            Penalty::GroupL12 { lambda } => {
                let s: f64 = self
                    .layout
                    .groups()
                    .map(|g| (g.n_g() as f64).sqrt() * norm2(&t[g.range]))
                    .sum();
                lambda * s
            }
        })
    }

    /// Elastic net `J_delta(theta) = J(theta) + |theta|^2 / (2 delta)`.
    pub fn eval_elastic(&self, delta: f64, theta: &ParamVector) -> Result<f64> {
        check_delta(delta)?;
        Ok(self.eval(theta)? + theta.dot(theta) / (2.0 * delta))
    }

    /// `argmin_x 1/2 |x - w|^2 + scale * J(x)`.
    pub fn prox(&self, scale: f64, w: &ParamVector) -> Result<ParamVector> {
        let mut out = w.clone();
        self.prox_in_place(scale, &mut out)?;
        Ok(out)
    }

    /// Overwrites `w` with `prox_{scale J}(w)`.
    pub fn prox_in_place(&self, scale: f64, w: &mut ParamVector) -> Result<()> {
        check_delta(scale)?;
        self.layout.check_dim("prox", w.len())?;
        let w = as_slice_mut(w);
        match self.penalty {
            Penalty::Zero => {}
            Penalty::L1 { lambda } => {
                let t = scale * lambda;
                for b in self.layout.regularized_blocks() {
                    for x in &mut w[b.range()] {
                        *x = shrink(*x, t);
                    }
                }
            }
            Penalty::GroupL12 { lambda } => {
                for g in self.layout.groups() {
                    let t = scale * lambda * (g.n_g() as f64).sqrt();
                    let seg = &mut w[g.range];
                    let n = norm2(seg);
                    let factor = if n > t { 1.0 - t / n } else { 0.0 };
                    seg.iter_mut().for_each(|x| *x *= factor);
                }
            }
        }
        Ok(())
    }

    /// Writes `prox_{delta J}(delta v)` into `theta`, evaluated through the
    /// scale identity `prox_{delta J}(delta v) = delta prox_J(v)`. This is
    /// the primal recovery step shared by all Bregman optimizers.
    pub fn prox_scaled_into(&self, delta: f64, v: &ParamVector, theta: &mut ParamVector) -> Result<()> {
        check_delta(delta)?;
        self.layout.check_dim("prox_scaled_into", v.len())?;
        self.layout.check_dim("prox_scaled_into", theta.len())?;
        theta.assign(v);
        self.prox_in_place(1.0, theta)?;
        if delta != 1.0 {
            theta.mapv_inplace(|x| delta * x);
        }
        Ok(())
    }

    /// The deterministic selection `p in dJ(theta)`.
    pub fn subgradient(&self, theta: &ParamVector) -> Result<ParamVector> {
        self.layout.check_dim("subgradient", theta.len())?;
        let mut p = ParamVector::zeros(theta.len());
        let t = as_slice(theta);
        let ps = as_slice_mut(&mut p);
        match self.penalty {
            Penalty::Zero => {}
            Penalty::L1 { lambda } => {
                for b in self.layout.regularized_blocks() {
                    for i in b.range() {
                        ps[i] = lambda * sign(t[i]);
                    }
                }
            }
            Penalty::GroupL12 { lambda } => {
                for g in self.layout.groups() {
                    let n = norm2(&t[g.range.clone()]);
                    if n > 0.0 {
                        let c = lambda * (g.n_g() as f64).sqrt() / n;
                        for i in g.range {
                            ps[i] = c * t[i];
                        }
                    }
                }
            }
        }
        Ok(p)
    }

    /// `v = p + theta / delta in dJ_delta(theta)` with the zero selection for `p`.
    pub fn elastic_subgradient(&self, delta: f64, theta: &ParamVector) -> Result<ParamVector> {
        check_delta(delta)?;
        let mut v = self.subgradient(theta)?;
        v.scaled_add(1.0 / delta, theta);
        Ok(v)
    }

    /// `D_J^p(bar, theta) = J(bar) - J(theta) - <p, bar - theta>`.
    ///
    /// Nonnegative whenever `p in dJ(theta)`, up to rounding.
    pub fn bregman_distance(&self, bar: &ParamVector, theta: &ParamVector, p: &ParamVector) -> Result<f64> {
        self.layout.check_dim("bregman_distance", p.len())?;
        let jb = self.eval(bar)?;
        let jt = self.eval(theta)?;
        Ok(jb - jt - dot_diff(p.view(), bar.view(), theta.view()))
    }

    /// `D_{J_delta}^v(bar, theta)`, computed as `D_J^p(bar, theta) + |bar - theta|^2 / (2 delta)`
    /// with `p = v - theta / delta`.
    pub fn elastic_bregman_distance(
        &self,
        delta: f64,
        bar: &ParamVector,
        theta: &ParamVector,
        v: &ParamVector,
    ) -> Result<f64> {
        check_delta(delta)?;
        self.layout.check_dim("elastic_bregman_distance", v.len())?;
        let mut p = v.clone();
        p.scaled_add(-1.0 / delta, theta);
        let dj = self.bregman_distance(bar, theta, &p)?;
        let sq: f64 = Zip::from(bar).and(theta).fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        Ok(dj + sq / (2.0 * delta))
    }

    /// `<p_bar - p, bar - theta>`, the sum of the two one-sided distances.
    pub fn sym_bregman_distance(
        &self,
        bar: &ParamVector,
        theta: &ParamVector,
        p_bar: &ParamVector,
        p: &ParamVector,
    ) -> Result<f64> {
        for x in [bar, theta, p_bar, p] {
            self.layout.check_dim("sym_bregman_distance", x.len())?;
        }
        let mut s = 0.0;
        Zip::from(bar).and(theta).and(p_bar).and(p).for_each(|&b, &t, &pb, &pt| {
            s += (pb - pt) * (b - t);
        });
        Ok(s)
    }

    /// Checks the componentwise optimality condition `v in dJ_delta(theta)`
    /// that holds after every `theta = prox_{delta J}(delta v)`.
    pub fn check_feasibility(
        &self,
        delta: f64,
        theta: &ParamVector,
        v: &ParamVector,
        tol: f64,
    ) -> Result<Option<FeasibilityViolation>> {
        check_delta(delta)?;
        self.layout.check_dim("check_feasibility", theta.len())?;
        self.layout.check_dim("check_feasibility", v.len())?;
        let t = as_slice(theta);
        let vs = as_slice(v);
        let mut regularized = vec![false; t.len()];
        let lambda = self.penalty.lambda();

        let mut worst: Option<FeasibilityViolation> = None;
        let mut report = |index: usize, residual: f64| {
            if residual > tol && worst.is_none() {
                worst = Some(FeasibilityViolation { index, residual });
            }
        };

        match self.penalty {
            Penalty::Zero => {}
            Penalty::L1 { .. } => {
                for b in self.layout.regularized_blocks() {
                    for i in b.range() {
                        regularized[i] = true;
                        let r = if t[i] != 0.0 {
                            (vs[i] - t[i] / delta - lambda * sign(t[i])).abs()
                        } else {
                            vs[i].abs() - lambda
                        };
                        report(i, r);
                    }
                }
            }
            Penalty::GroupL12 { .. } => {
                for g in self.layout.groups() {
                    let w = lambda * (g.n_g() as f64).sqrt();
                    let n = norm2(&t[g.range.clone()]);
                    if n > 0.0 {
                        for i in g.range {
                            regularized[i] = true;
                            report(i, (vs[i] - t[i] / delta - w * t[i] / n).abs());
                        }
                    } else {
                        let vn = norm2(&vs[g.range.clone()]);
                        for i in g.range.clone() {
                            regularized[i] = true;
                        }
                        report(g.range.start, vn - w);
                    }
                }
            }
        }
        for i in 0..t.len() {
            if !regularized[i] {
                report(i, (vs[i] - t[i] / delta).abs());
            }
        }
        Ok(worst)
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::hyper("delta", delta, "must be positive and finite"));
    }
    Ok(())
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot_diff(p: ArrayView1<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    Zip::from(p).and(a).and(b).fold(0.0, |acc, &p, &a, &b| acc + p * (a - b))
}

pub(crate) fn as_slice(x: &ParamVector) -> &[f64] {
    x.as_slice().expect("parameter vectors are contiguous")
}

pub(crate) fn as_slice_mut(x: &mut ParamVector) -> &mut [f64] {
    x.as_slice_mut().expect("parameter vectors are contiguous")
}

#[cfg(test)]
mod tests;
