//! Empirical statistics of the sparse initialization against their targets.

use breglearn::init::{init_biases, init_weights, BiasRule};

use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct StatCheck {
    pub name: &'static str,
    pub target: f64,
    pub empirical: f64,
    /// Allowed absolute deviation.
    pub tolerance: f64,
    pub passed: bool,
}

impl StatCheck {
    fn new(name: &'static str, target: f64, empirical: f64, tolerance: f64) -> Self {
        StatCheck {
            name,
            target,
            empirical,
            tolerance,
            passed: (empirical - target).abs() <= tolerance,
        }
    }
}

/// Samples `ceil(init_min_entries / (rows cols))` weight matrices and bias
/// vectors from one seeded generator and compares:
///
/// - the nonzero fraction with `r`, within 4 binomial standard deviations;
/// - the variance of the values on the mask with `alpha / r`, within 10%;
/// - the variance of the masked matrix with `alpha`, within 10%;
/// - the mean of the masked matrix with 0, within 4 standard errors;
/// - the fraction of biases inside the bias rule's support with 1.
pub fn run_init_stats(cfg: &ExperimentConfig) -> Result<Vec<StatCheck>, ConfigError> {
    let spec = cfg.init_spec(cfg.seeds[0])?;
    let (rows, cols) = (cfg.init_rows, cfg.init_cols);
    let per_draw = rows * cols;
    let draws = cfg.init_min_entries.div_ceil(per_draw).max(1);
    let mut rng = spec.rng();

    let (mut n_masked, mut sum_masked, mut sq_masked) = (0usize, 0.0, 0.0);
    let (mut sum_all, mut sq_all) = (0.0, 0.0);
    let (mut biases_ok, mut n_biases) = (0usize, 0usize);
    for _ in 0..draws {
        let (w, mask) = init_weights(rows, cols, &spec, &mut rng)?;
        for (&x, &m) in w.iter().zip(&mask) {
            sum_all += x;
            sq_all += x * x;
            if m {
                n_masked += 1;
                sum_masked += x;
                sq_masked += x * x;
            }
        }
        let b = init_biases(rows, &spec, &mut rng)?;
        n_biases += b.len();
        biases_ok += b
            .iter()
            .filter(|&&x| match spec.bias_rule {
                BiasRule::PositiveUniform { lo, hi } => (lo..=hi).contains(&x),
                BiasRule::SymmetricUniform { a } => x != 0.0 && x.abs() <= a,
            })
            .count();
    }

    let n = (draws * per_draw) as f64;
    let r = spec.r;
    let alpha = spec.variance(rows, cols);
    let frac = n_masked as f64 / n;
    let var = |sum: f64, sq: f64, count: f64| {
        let mean = sum / count;
        (sq - count * mean * mean) / (count - 1.0).max(1.0)
    };
    Ok(vec![
        StatCheck::new("nonzero_fraction", r, frac, 4.0 * (r * (1.0 - r) / n).sqrt()),
        StatCheck::new(
            "variance_on_mask",
            alpha / r,
            var(sum_masked, sq_masked, n_masked as f64),
            0.1 * alpha / r,
        ),
        StatCheck::new("variance_masked", alpha, var(sum_all, sq_all, n), 0.1 * alpha),
        StatCheck::new("mean_masked", 0.0, sum_all / n, 4.0 * (alpha / n).sqrt()),
        StatCheck::new("bias_support_fraction", 1.0, biases_ok as f64 / n_biases as f64, 0.0),
    ])
}

pub const STAT_COLUMNS: [&str; 5] = ["check", "target", "empirical", "tolerance", "status"];

pub fn stat_rows(checks: &[StatCheck]) -> Vec<Vec<String>> {
    checks
        .iter()
        .map(|c| {
            vec![
                c.name.to_string(),
                format!("{}", c.target),
                format!("{}", c.empirical),
                format!("{}", c.tolerance),
                if c.passed { "PASS" } else { "FAIL" }.to_string(),
            ]
        })
        .collect()
}
