//! Command-line experiment runner: `train`, `convex-verify` and
//! `init-stats`, each driven by a flat TOML config whose keys double as
//! flags.
//!
//! Exit status: 0 on success, 1 when a check fails, 2 on configuration or
//! data errors.

pub mod config;
pub mod convex;
pub mod init_stats;
pub mod output;
pub mod train;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{ConfigError, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Flag aliases beyond the one-to-one key flags.
const ALIASES: [(&str, &str); 2] = [("seed", "seeds"), ("out", "output_csv")];

fn command() -> Command {
    let keys: Vec<String> = ExperimentConfig::default_table().keys().cloned().collect();
    let with_keys = |mut cmd: Command| {
        cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(clap::value_parser!(PathBuf))
                .help("flat TOML config file"),
        );
        for key in &keys {
            let mut arg = Arg::new(key.clone()).long(key.clone()).value_name("VALUE").action(ArgAction::Set);
            let dashed = key.replace('_', "-");
            if dashed != *key {
                arg = arg.alias(dashed);
            }
            if let Some((alias, _)) = ALIASES.iter().find(|(_, k)| k == key) {
                arg = arg.alias(*alias);
            }
            cmd = cmd.arg(arg);
        }
        cmd
    };
    Command::new("breglearn")
        .about("Sparse training with linearized Bregman iterations")
        .subcommand_required(true)
        .subcommand(with_keys(Command::new("train").about("train networks on MNIST-format data")))
        .subcommand(with_keys(Command::new("convex-verify").about("run the convergence checks on quadratics")))
        .subcommand(with_keys(Command::new("init-stats").about("check sparse initialization statistics")))
}

fn load(m: &ArgMatches) -> Result<ExperimentConfig, ConfigError> {
    let overrides: Vec<(String, String)> = ExperimentConfig::default_table()
        .keys()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.clone(), v.clone())))
        .collect();
    ExperimentConfig::load(m.get_one::<PathBuf>("config").map(PathBuf::as_path), &overrides)
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<i32, ConfigError> {
    let (train_set, val) = train::load_splits(cfg)?;
    let traces = train::train_all(cfg, &train_set, &val)?;
    for t in &traces {
        let last = t.last();
        println!(
            "seed {}: epoch {} loss {:.4} val_acc {} nonzero {:.4}",
            t.seed,
            last.record.epoch,
            last.record.loss,
            last.record.val_acc.map_or("-".into(), |a| format!("{a:.4}")),
            last.record.nonzero_fraction_total
        );
    }
    for p in train::write_traces(cfg, &traces)? {
        println!("wrote {}", p.display());
    }
    Ok(EXIT_OK)
}

fn convex_cmd(cfg: &ExperimentConfig) -> Result<i32, ConfigError> {
    let results = convex::run_suite(cfg)?;
    for r in &results {
        println!("sigma={}: {}", r.sigma, r.report.summary());
    }
    let output = Path::new(&cfg.output_csv);
    let series = convex::write_report(output, &results)?;
    println!("wrote {} and {}", output.display(), series.display());
    Ok(if convex::any_failed(&results) { EXIT_CHECK_FAILED } else { EXIT_OK })
}

fn init_stats_cmd(cfg: &ExperimentConfig) -> Result<i32, ConfigError> {
    let checks = init_stats::run_init_stats(cfg)?;
    for c in &checks {
        println!(
            "{} {}: empirical {:.6e}, target {:.6e}, tolerance {:.3e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.empirical,
            c.target,
            c.tolerance
        );
    }
    let header: Vec<String> = init_stats::STAT_COLUMNS.map(String::from).to_vec();
    output::write_rows(Path::new(&cfg.output_csv), &header, &init_stats::stat_rows(&checks))?;
    println!("wrote {}", cfg.output_csv);
    Ok(if checks.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = load(sub).and_then(|cfg| match name {
        "train" => train_cmd(&cfg),
        "convex-verify" => convex_cmd(&cfg),
        "init-stats" => init_stats_cmd(&cfg),
        _ => unreachable!("unknown subcommand {name}"),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }
}
