//! Sparse initialization: weights are masked by independent Bernoulli(r)
//! draws and the surviving entries are rescaled so the overall variance still
//! matches the dense target `alpha`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal, Uniform};

use crate::regularizers::{BlockKind, GroupLayout};
use crate::{Error, ParamVector, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// tanh-like, `sigma(-x) = -sigma(x)`.
    Antisymmetric,
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "antisymmetric" => Ok(Activation::Antisymmetric),
            _ => Err(format!("unknown activation `{s}`")),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Antisymmetric => "antisymmetric",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FanMode {
    /// `2 / n_in`
    FanIn,
    /// `2 / n_out`
    FanOut,
    /// `2 / (n_out n_in)`
    FanBoth,
}

impl FanMode {
    pub fn default_for(activation: Activation) -> Self {
        match activation {
            Activation::Relu => FanMode::FanIn,
            Activation::Antisymmetric => FanMode::FanBoth,
        }
    }
}

impl FromStr for FanMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fan_in" => Ok(FanMode::FanIn),
            "fan_out" => Ok(FanMode::FanOut),
            "fan_both" => Ok(FanMode::FanBoth),
            _ => Err(format!("unknown fan mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasRule {
    PositiveUniform { lo: f64, hi: f64 },
    /// Uniform on `(-a, a)` with exact zeros rejected.
    SymmetricUniform { a: f64 },
}

impl BiasRule {
    pub fn default_for(activation: Activation) -> Self {
        match activation {
            Activation::Relu => BiasRule::PositiveUniform { lo: 0.01, hi: 0.1 },
            Activation::Antisymmetric => BiasRule::SymmetricUniform { a: 0.1 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    /// Expected fraction of nonzero weights.
    pub r: f64,
    pub activation: Activation,
    pub fan_mode: FanMode,
    pub bias_rule: BiasRule,
    pub seed: u64,
}

impl InitSpec {
    /// Spec with the activation's default fan mode and bias rule.
    pub fn new(r: f64, activation: Activation, seed: u64) -> Result<Self> {
        let spec = InitSpec {
            r,
            activation,
            fan_mode: FanMode::default_for(activation),
            bias_rule: BiasRule::default_for(activation),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(Error::hyper("r", self.r, "nonzero fraction must lie in (0, 1]"));
        }
        match self.bias_rule {
            BiasRule::PositiveUniform { lo, .. } if !(lo > 0.0) => {
                Err(Error::hyper("bias lo", lo, "must be positive"))
            }
            BiasRule::PositiveUniform { lo, hi } if !(hi > lo && hi.is_finite()) => {
                Err(Error::hyper("bias hi", hi, "must be finite and exceed lo"))
            }
            BiasRule::SymmetricUniform { a } if !(a > 0.0 && a.is_finite()) => {
                Err(Error::hyper("bias a", a, "must be positive and finite"))
            }
            _ => Ok(()),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    pub fn variance(&self, n_out: usize, n_in: usize) -> f64 {
        variance_target(self.fan_mode, n_out, n_in)
    }
}

/// Dense variance target `alpha(n_out, n_in)`.
///
/// # Panics
/// If `n_out` or `n_in` is zero.
pub fn variance_target(fan_mode: FanMode, n_out: usize, n_in: usize) -> f64 {
    assert!(n_out >= 1 && n_in >= 1, "layer dimensions must be positive");
    match fan_mode {
        FanMode::FanIn => 2.0 / n_in as f64,
        FanMode::FanOut => 2.0 / n_out as f64,
        FanMode::FanBoth => 2.0 / (n_out as f64 * n_in as f64),
    }
}

/// I.i.d. Bernoulli(r) mask.
///
/// # Panics
/// If `r` is outside `[0, 1]`.
pub fn sparse_mask<R: Rng + ?Sized>(n: usize, r: f64, rng: &mut R) -> Vec<bool> {
    let b = Bernoulli::new(r).expect("r must lie in [0, 1]");
    (0..n).map(|_| b.sample(rng)).collect()
}

fn masked_gaussian<R: Rng + ?Sized>(mask: &[bool], variance: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    mask.iter()
        .map(|&keep| {
            let w = normal.sample(rng);
            if keep { w } else { 0.0 }
        })
        .collect()
}

/// Row-major `n_out x n_in` weights `W = W_tilde * M` with
/// `Var(W_tilde) = alpha / r`, together with the mask.
pub fn init_weights<R: Rng + ?Sized>(
    n_out: usize,
    n_in: usize,
    spec: &InitSpec,
    rng: &mut R,
) -> Result<(ParamVector, Vec<bool>)> {
    spec.validate()?;
    let mask = sparse_mask(n_out * n_in, spec.r, rng);
    let w = masked_gaussian(&mask, spec.variance(n_out, n_in) / spec.r, rng);
    Ok((ParamVector::from(w), mask))
}

/// Bias segment following the spec's bias rule. Never contains exact zeros.
pub fn init_biases<R: Rng + ?Sized>(n: usize, spec: &InitSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let out = match spec.bias_rule {
        BiasRule::PositiveUniform { lo, hi } => {
            let u = Uniform::new(lo, hi).expect("validated range");
            (0..n).map(|_| u.sample(rng)).collect()
        }
        BiasRule::SymmetricUniform { a } => {
            let u = Uniform::new(-a, a).expect("validated range");
            (0..n)
                .map(|_| loop {
                    let b = u.sample(rng);
                    if b != 0.0 {
                        break b;
                    }
                })
                .collect()
        }
    };
    Ok(out)
}

/// Initializes a full parameter vector block by block. Each group of a
/// regularized block is kept or zeroed by a single Bernoulli(r) draw, kept
/// groups get Gaussian entries of variance `alpha / r` with `alpha` from the
/// block's shape, and bias blocks follow the bias rule. Indices outside every
/// block stay zero.
pub fn init_group_masked<R: Rng + ?Sized>(layout: &GroupLayout, spec: &InitSpec, rng: &mut R) -> Result<ParamVector> {
    spec.validate()?;
    let mut theta = ParamVector::zeros(layout.total_dim());
    for block in layout.blocks() {
        let segment = if block.kind == BlockKind::Bias {
            init_biases(block.len(), spec, rng)?.to_vec()
        } else {
            if block.is_empty() {
                continue;
            }
            let group_mask = sparse_mask(block.n_groups(), spec.r, rng);
            let mut mask = vec![false; block.len()];
            for (gi, &keep) in group_mask.iter().enumerate() {
                if keep {
                    let g = block.group(gi);
                    mask[g.start - block.offset..g.end - block.offset].fill(true);
                }
            }
            masked_gaussian(&mask, spec.variance(block.rows, block.cols) / spec.r, rng)
        };
        theta
            .slice_mut(ndarray::s![block.range()])
            .assign(&ndarray::ArrayView1::from(&segment[..]));
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizers::Block;

    fn relu(r: f64) -> InitSpec {
        InitSpec::new(r, Activation::Relu, 7).unwrap()
    }

    fn mean_var(x: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = x.clone().count() as f64;
        let mean = x.clone().sum::<f64>() / n;
        let var = x.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn variance_target_examples() {
        assert!((variance_target(FanMode::FanBoth, 200, 784) - 1.2755e-5).abs() < 1e-9);
        assert_eq!(variance_target(FanMode::FanIn, 200, 784), 2.0 / 784.0);
        assert_eq!(variance_target(FanMode::FanOut, 200, 784), 0.01);
        assert_eq!(FanMode::default_for(Activation::Antisymmetric), FanMode::FanBoth);
        assert_eq!(FanMode::default_for(Activation::Relu), FanMode::FanIn);
    }

    #[test]
    fn mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sparse_mask(1000, 0.0, &mut rng).iter().all(|&m| !m));
        assert!(sparse_mask(1000, 1.0, &mut rng).iter().all(|&m| m));
    }

    #[test]
    fn mask_count_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, r) = (1_000_000usize, 0.01);
        let count = sparse_mask(n, r, &mut rng).iter().filter(|&&m| m).count() as f64;
        let sd = (n as f64 * r * (1.0 - r)).sqrt();
        assert!((count - 1e4).abs() <= 4.0 * sd, "count {count}");
    }

    #[test]
    fn r_zero_is_rejected() {
        let mut spec = relu(0.5);
        spec.r = 0.0;
        let mut rng = spec.rng();
        assert!(init_weights(3, 3, &spec, &mut rng).is_err());
        assert!(InitSpec::new(1.5, Activation::Relu, 0).is_err());
        let mut bad = relu(0.5);
        bad.bias_rule = BiasRule::PositiveUniform { lo: 0.0, hi: 0.1 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn weight_statistics_match_targets() {
        let (n_out, n_in, r) = (1000, 1000, 0.1);
        let spec = relu(r);
        let mut rng = spec.rng();
        let (w, mask) = init_weights(n_out, n_in, &spec, &mut rng).unwrap();
        let alpha = variance_target(FanMode::FanIn, n_out, n_in);
        let (mean, var) = mean_var(w.iter().copied());
        assert!((var - alpha).abs() <= 0.1 * alpha, "var {var} alpha {alpha}");
        let se = (var / w.len() as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se);

        let n = w.len() as f64;
        let frac = mask.iter().filter(|&&m| m).count() as f64 / n;
        assert!((frac - r).abs() <= 4.0 * (r * (1.0 - r) / n).sqrt());
        assert!(w.iter().zip(&mask).all(|(&x, &m)| m || x == 0.0));

        let kept = w.iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x);
        let (_, var_tilde) = mean_var(kept);
        assert!((var_tilde - alpha / r).abs() <= 0.1 * alpha / r);
    }

    #[test]
    fn dense_reduction() {
        let spec = relu(1.0);
        let mut rng = spec.rng();
        let (w, mask) = init_weights(500, 400, &spec, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!(w.iter().all(|&x| x != 0.0));
        let (_, var) = mean_var(w.iter().copied());
        assert!((var - 2.0 / 400.0).abs() <= 0.1 * 2.0 / 400.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let layout = GroupLayout::new(
            30,
            vec![Block::new("w", 0, 4, 5, BlockKind::Rows), Block::new("b", 20, 1, 4, BlockKind::Bias)],
        )
        .unwrap();
        let spec = relu(0.5);
        let a = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
        let b = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert!(a.slice(ndarray::s![24..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn biases_follow_rule() {
        let spec = relu(0.5);
        let mut rng = spec.rng();
        let b = init_biases(10_000, &spec, &mut rng).unwrap();
        assert!(b.iter().all(|&x| (0.01..0.1).contains(&x)));
        assert_eq!(init_biases(0, &spec, &mut rng).unwrap().len(), 0);

        let sym = InitSpec::new(0.5, Activation::Antisymmetric, 3).unwrap();
        let mut rng = sym.rng();
        let b = init_biases(1_000_000, &sym, &mut rng).unwrap();
        assert!(b.iter().all(|&x| x != 0.0 && x.abs() < 0.1));
        assert!(b.iter().any(|&x| x < 0.0) && b.iter().any(|&x| x > 0.0));
    }

    fn rows_layout(rows: usize, cols: usize) -> GroupLayout {
        GroupLayout::new(
            rows * cols + rows,
            vec![
                Block::new("w", 0, rows, cols, BlockKind::Rows),
                Block::new("b", rows * cols, 1, rows, BlockKind::Bias),
            ],
        )
        .unwrap()
    }

    #[test]
    fn group_masking_keeps_or_zeroes_whole_rows() {
        let layout = rows_layout(256, 16);
        let mut total = 0usize;
        let seeds = 400;
        for seed in 0..seeds {
            let spec = InitSpec::new(0.01, Activation::Relu, seed).unwrap();
            let theta = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
            let mut active = 0;
            for row in 0..256 {
                let seg = theta.slice(ndarray::s![row * 16..(row + 1) * 16]);
                let nz = seg.iter().filter(|&&x| x != 0.0).count();
                assert!(nz == 0 || nz == 16, "row partially zeroed");
                active += usize::from(nz == 16);
            }
            // P(Bin(256, 0.01) > 14) < 1e-7
            assert!(active <= 14);
            total += active;
            assert!(theta.slice(ndarray::s![256 * 16..]).iter().all(|&x| x > 0.0));
        }
        let mean = total as f64 / seeds as f64;
        let sd = (256.0 * 0.01 * 0.99 / seeds as f64).sqrt();
        assert!((mean - 2.56).abs() <= 4.0 * sd, "mean active rows {mean}");
    }

    #[test]
    fn group_masking_respects_block_offsets() {
        let layout = GroupLayout::new(
            2 + 40 * 3,
            vec![Block::new("b", 0, 1, 2, BlockKind::Bias), Block::new("w", 2, 40, 3, BlockKind::Rows)],
        )
        .unwrap();
        let spec = relu(0.5);
        let theta = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
        for row in 0..40 {
            let nz = theta.slice(ndarray::s![2 + row * 3..2 + (row + 1) * 3]).iter().filter(|&&x| x != 0.0).count();
            assert!(nz == 0 || nz == 3);
        }
    }

    #[test]
    fn group_masking_with_r_one_keeps_everything() {
        let layout = rows_layout(32, 8);
        let spec = relu(1.0);
        let theta = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
        assert!(theta.iter().all(|&x| x != 0.0));
    }

    #[test]
    fn kept_groups_have_rescaled_variance() {
        let (rows, cols, r) = (2000, 500, 0.2);
        let layout = rows_layout(rows, cols);
        let spec = relu(r);
        let theta = init_group_masked(&layout, &spec, &mut spec.rng()).unwrap();
        let w = theta.slice(ndarray::s![..rows * cols]);
        let alpha = 2.0 / cols as f64;
        let (_, var) = mean_var(w.iter().copied());
        assert!((var - alpha).abs() <= 0.1 * alpha, "var {var}");
        let kept = w.iter().copied().filter(|&x| x != 0.0);
        let (_, var_tilde) = mean_var(kept);
        assert!((var_tilde - alpha / r).abs() <= 0.1 * alpha / r);
    }
}
