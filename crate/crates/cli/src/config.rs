//! Flat experiment configuration shared by all subcommands.
//!
//! A config file is a flat TOML table whose keys are the fields of
//! [`ExperimentConfig`]. Every key is also a command-line flag
//! (`--lambda 0.1`, `--layers 784,200,10`), and flags override file values.

use std::fmt;
use std::path::{Path, PathBuf};

use breglearn::init::{Activation, BiasRule, FanMode, InitSpec};
use breglearn::nn::{HiddenActivation, LossKind, MlpSpec, RegularizeMode};
use breglearn::optim::{Hyperparams, Method, StepSchedule};
use serde::{Deserialize, Serialize};

/// Errors that map to exit status 2.
#[derive(Debug)]
pub enum ConfigError {
    /// A field failed to parse or validate.
    Field { field: String, message: String },
    /// The file could not be read or is not valid TOML for this schema.
    File { path: PathBuf, message: String },
    /// A flag value could not be parsed.
    Flag { flag: String, message: String },
    /// Input data is missing or malformed.
    Data(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Field { field, message } => write!(f, "config field `{field}`: {message}"),
            ConfigError::File { path, message } => write!(f, "config file {}: {message}", path.display()),
            ConfigError::Flag { flag, message } => write!(f, "flag --{flag}: {message}"),
            ConfigError::Data(m) => write!(f, "data: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<breglearn::Error> for ConfigError {
    fn from(e: breglearn::Error) -> Self {
        ConfigError::Data(e.to_string())
    }
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `classify` or `autoencoder`.
    pub task: String,
    pub layers: Vec<usize>,
    /// Hidden activation, `relu` or `tanh`.
    pub activation: String,
    /// `default` (cross-entropy for classify, MSE for autoencoder), `mse` or
    /// `cross_entropy`.
    pub loss: String,
    /// Std of the Gaussian pixel noise fed to the autoencoder.
    pub noise_std: f64,
    pub data_dir: String,
    /// Training images taken from the start of the training file; the
    /// validation split follows them.
    pub n_train: usize,
    pub n_val: usize,

    pub optimizer: String,
    /// `none`, `l1` or `group-rows`.
    pub regularizer: String,
    pub lambda: f64,
    pub delta: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `constant` (uses `tau`) or `power` (uses `decay_c`, `decay_p`).
    pub schedule: String,
    pub tau: f64,
    pub decay_c: f64,
    pub decay_p: f64,
    pub lr_decay_on_plateau: bool,
    pub plateau_factor: f64,
    pub plateau_patience: usize,

    pub init_r: f64,
    /// `default`, `fan_in`, `fan_out` or `fan_both`.
    pub fan_mode: String,
    pub bias_lo: f64,
    pub bias_hi: f64,
    pub bias_a: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Concurrent seed runs; 0 picks the number of available cores.
    pub workers: usize,
    /// Output path. Training writes `<stem>_seed<k>.csv` per seed and the
    /// aggregate to this path itself.
    pub output_csv: String,

    pub quad_dim: usize,
    pub quad_cond: f64,
    pub quad_sparsity: f64,
    pub quad_seed: u64,
    pub sigmas: Vec<f64>,
    pub mc_seeds: usize,
    pub mc_steps: usize,
    pub decay_steps: usize,
    pub horizon: usize,
    pub burn_in: usize,
    pub target_ratio: f64,
    pub identity_steps: usize,
    pub identity_tol: f64,

    pub init_rows: usize,
    pub init_cols: usize,
    pub init_min_entries: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "classify".into(),
            layers: vec![784, 200, 80, 10],
            activation: "relu".into(),
            loss: "default".into(),
            noise_std: 0.3,
            data_dir: "data/mnist".into(),
            n_train: 55_000,
            n_val: 5_000,
            optimizer: "linbreg".into(),
            regularizer: "l1".into(),
            lambda: 0.1,
            delta: 1.0,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: "constant".into(),
            tau: 0.1,
            decay_c: 0.0025,
            decay_p: 0.75,
            lr_decay_on_plateau: true,
            plateau_factor: 0.5,
            plateau_patience: 5,
            init_r: 0.01,
            fan_mode: "default".into(),
            bias_lo: 0.01,
            bias_hi: 0.1,
            bias_a: 0.1,
            epochs: 100,
            batch_size: 128,
            seeds: vec![0, 1, 2],
            workers: 0,
            output_csv: "results/out.csv".into(),
            quad_dim: 20,
            quad_cond: 10.0,
            quad_sparsity: 0.25,
            quad_seed: 2024,
            sigmas: vec![0.0, 0.5],
            mc_seeds: 100,
            mc_steps: 1000,
            decay_steps: 10_000,
            horizon: 50_000,
            burn_in: 1000,
            target_ratio: 0.05,
            identity_steps: 1000,
            identity_tol: 1e-9,
            init_rows: 200,
            init_cols: 784,
            init_min_entries: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classify,
    Autoencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    None,
    L1,
    GroupRows,
}

impl RegKind {
    pub fn mode(self) -> RegularizeMode {
        match self {
            RegKind::GroupRows => RegularizeMode::Rows,
            _ => RegularizeMode::Entrywise,
        }
    }
}

impl ExperimentConfig {
    /// Keys and default values, used to build the flag set.
    pub fn default_table() -> toml::Table {
        toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes")
    }

    /// Reads `path` (if any), applies `overrides` on top and checks every
    /// field.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                text.parse::<toml::Table>().map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => toml::Table::new(),
        };
        let defaults = Self::default_table();
        for (key, raw) in overrides {
            let value = parse_flag_value(key, raw, &defaults)?;
            table.insert(key.clone(), value);
        }
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            ConfigError::File {
                path: path.map_or_else(|| PathBuf::from("<flags>"), Path::to_path_buf),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the fields used by every command.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.task()?;
        self.method()?;
        self.reg_kind()?;
        self.hidden_activation()?;
        self.loss_kind()?;
        self.hyperparams()?;
        self.schedule()?;
        self.decay_schedule()?;
        self.init_spec(0)?;
        self.mlp()?;
        if self.seeds.is_empty() {
            return Err(field_err("seeds", "must list at least one seed"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(field_err("lambda", "must be finite and nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(field_err("batch_size", "must be positive"));
        }
        if self.n_train == 0 {
            return Err(field_err("n_train", "must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(field_err("noise_std", "must be finite and nonnegative"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(field_err("plateau_factor", "must lie in (0, 1]"));
        }
        if self.plateau_patience == 0 {
            return Err(field_err("plateau_patience", "must be positive"));
        }
        if self.output_csv.is_empty() {
            return Err(field_err("output_csv", "must not be empty"));
        }
        if self.quad_dim == 0 {
            return Err(field_err("quad_dim", "must be positive"));
        }
        if !(self.quad_cond >= 1.0 && self.quad_cond.is_finite()) {
            return Err(field_err("quad_cond", "must be at least 1"));
        }
        if !(self.quad_sparsity > 0.0 && self.quad_sparsity <= 1.0) {
            return Err(field_err("quad_sparsity", "must lie in (0, 1]"));
        }
        if self.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(field_err("sigmas", "noise levels must be finite and nonnegative"));
        }
        if self.mc_seeds < 2 {
            return Err(field_err("mc_seeds", "need at least 2 seeds for a standard error"));
        }
        if self.mc_steps == 0 || self.decay_steps == 0 || self.identity_steps == 0 {
            return Err(field_err("mc_steps", "step counts must be positive"));
        }
        if self.horizon == 0 || self.burn_in >= self.horizon {
            return Err(field_err("burn_in", "must be smaller than a positive horizon"));
        }
        if !(self.target_ratio > 0.0 && self.target_ratio.is_finite()) {
            return Err(field_err("target_ratio", "must be positive"));
        }
        if !(self.identity_tol > 0.0) {
            return Err(field_err("identity_tol", "must be positive"));
        }
        if self.init_rows == 0 || self.init_cols == 0 {
            return Err(field_err("init_rows", "matrix dimensions must be positive"));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task, ConfigError> {
        match self.task.as_str() {
            "classify" => Ok(Task::Classify),
            "autoencoder" => Ok(Task::Autoencoder),
            other => Err(field_err("task", format!("unknown task `{other}`"))),
        }
    }

    pub fn method(&self) -> Result<Method, ConfigError> {
        self.optimizer.parse().map_err(|e: String| field_err("optimizer", e))
    }

    pub fn reg_kind(&self) -> Result<RegKind, ConfigError> {
        match self.regularizer.as_str() {
            "none" => Ok(RegKind::None),
            "l1" => Ok(RegKind::L1),
            "group-rows" => Ok(RegKind::GroupRows),
            other => Err(field_err("regularizer", format!("unknown regularizer `{other}`"))),
        }
    }

    pub fn hidden_activation(&self) -> Result<HiddenActivation, ConfigError> {
        match self.activation.as_str() {
            "relu" => Ok(HiddenActivation::Relu),
            "tanh" => Ok(HiddenActivation::Tanh),
            other => Err(field_err("activation", format!("unknown activation `{other}`"))),
        }
    }

    pub fn loss_kind(&self) -> Result<LossKind, ConfigError> {
        match (self.loss.as_str(), self.task()?) {
            ("default", Task::Classify) => Ok(LossKind::CrossEntropy),
            ("default", Task::Autoencoder) => Ok(LossKind::Mse),
            (_, Task::Autoencoder) if self.loss != "mse" => {
                Err(field_err("loss", "the autoencoder is trained with `mse`"))
            }
            (s, _) => s.parse().map_err(|e: String| field_err("loss", e)),
        }
    }

    pub fn hyperparams(&self) -> Result<Hyperparams, ConfigError> {
        let h = Hyperparams {
            delta: self.delta,
            beta: self.beta,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        };
        h.validate().map_err(|e| hyper_field(&e))?;
        Ok(h)
    }

    pub fn schedule(&self) -> Result<StepSchedule, ConfigError> {
        let s = match self.schedule.as_str() {
            "constant" => StepSchedule::Constant(self.tau),
            "power" => StepSchedule::PowerDecay {
                c: self.decay_c,
                p: self.decay_p,
            },
            other => return Err(field_err("schedule", format!("unknown schedule `{other}`"))),
        };
        s.validate().map_err(|e| hyper_field(&e))?;
        Ok(s)
    }

    /// The square-summable schedule of the convergence check.
    pub fn decay_schedule(&self) -> Result<StepSchedule, ConfigError> {
        let s = StepSchedule::PowerDecay {
            c: self.decay_c,
            p: self.decay_p,
        };
        s.validate().map_err(|e| hyper_field(&e))?;
        Ok(s)
    }

    /// The square-summable schedule of the summability check,
    /// `tau / (k + 1)^decay_p`.
    pub fn summable_schedule(&self) -> Result<StepSchedule, ConfigError> {
        let s = StepSchedule::PowerDecay {
            c: self.tau,
            p: self.decay_p,
        };
        s.validate().map_err(|e| field_err("tau", e.to_string()))?;
        Ok(s)
    }

    pub fn init_activation(&self) -> Result<Activation, ConfigError> {
        Ok(match self.hidden_activation()? {
            HiddenActivation::Relu => Activation::Relu,
            HiddenActivation::Tanh => Activation::Antisymmetric,
        })
    }

    pub fn init_spec(&self, seed: u64) -> Result<InitSpec, ConfigError> {
        let activation = self.init_activation()?;
        let fan_mode = match self.fan_mode.as_str() {
            "default" => FanMode::default_for(activation),
            s => s.parse().map_err(|e: String| field_err("fan_mode", e))?,
        };
        let bias_rule = match activation {
            Activation::Relu => BiasRule::PositiveUniform {
                lo: self.bias_lo,
                hi: self.bias_hi,
            },
            Activation::Antisymmetric => BiasRule::SymmetricUniform { a: self.bias_a },
        };
        let spec = InitSpec {
            r: self.init_r,
            activation,
            fan_mode,
            bias_rule,
            seed,
        };
        spec.validate().map_err(|e| match e {
            breglearn::Error::Hyperparameter { name, .. } => field_err(
                match name {
                    "r" => "init_r",
                    "bias lo" => "bias_lo",
                    "bias hi" => "bias_hi",
                    _ => "bias_a",
                },
                e.to_string(),
            ),
            other => field_err("init_r", other.to_string()),
        })?;
        Ok(spec)
    }

    pub fn mlp(&self) -> Result<MlpSpec, ConfigError> {
        MlpSpec::new(self.layers.clone(), self.hidden_activation()?).map_err(|e| field_err("layers", e.to_string()))
    }
}

fn hyper_field(e: &breglearn::Error) -> ConfigError {
    let field = match e {
        breglearn::Error::Hyperparameter { name, .. } => match *name {
            "c" => "decay_c",
            "p" => "decay_p",
            n => n,
        },
        _ => "hyperparameters",
    };
    field_err(field, e.to_string())
}

/// Parses a flag value according to the type of the key's default.
fn parse_flag_value(key: &str, raw: &str, defaults: &toml::Table) -> Result<toml::Value, ConfigError> {
    let flag_err = |message: String| ConfigError::Flag {
        flag: key.replace('_', "-"),
        message,
    };
    let default = defaults.get(key).ok_or_else(|| flag_err("unknown key".into()))?;
    let scalar = |template: &toml::Value, s: &str| -> Result<toml::Value, ConfigError> {
        let s = s.trim();
        Ok(match template {
            toml::Value::Integer(_) => toml::Value::Integer(
                s.parse::<i64>().map_err(|e| flag_err(format!("`{s}` is not an integer: {e}")))?,
            ),
            toml::Value::Float(_) => {
                toml::Value::Float(s.parse::<f64>().map_err(|e| flag_err(format!("`{s}` is not a number: {e}")))?)
            }
            toml::Value::Boolean(_) => toml::Value::Boolean(
                s.parse::<bool>().map_err(|_| flag_err(format!("`{s}` is not true or false")))?,
            ),
            _ => toml::Value::String(s.to_string()),
        })
    };
    match default {
        toml::Value::Array(items) => {
            let template = items.first().cloned().unwrap_or(toml::Value::Integer(0));
            let values = raw
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| scalar(&template, s))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(toml::Value::Array(values))
        }
        other => scalar(other, raw),
    }
}
