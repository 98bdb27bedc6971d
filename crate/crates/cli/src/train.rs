//! Minibatch training on MNIST-format data with per-epoch traces.

use std::path::{Path, PathBuf};

use breglearn::analysis::{
    active_rows_per_block, classification_accuracy, nonzero_fraction, weight_l1_norm, MetricsRecord, SparsityScope,
};
use breglearn::init::init_group_masked;
use breglearn::nn::{argmax_rows, default_layout, forward, loss_grad_and_output, Batch, LossKind, MlpSpec, Targets};
use breglearn::optim::OptimizerState;
use breglearn::problems::{batches, load_mnist_idx, Dataset};
use breglearn::{BlockKind, GroupLayout, ParamVector, Regularizer};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ConfigError, ExperimentConfig, RegKind, Task};
use crate::output::{fmt_opt, write_rows};

/// Leading trace columns, named after the [`MetricsRecord`] fields, followed
/// by `lr` and one `active_rows_<block>` column per weight block.
pub const TRACE_COLUMNS: [&str; 11] = [
    "epoch",
    "loss",
    "train_acc",
    "val_acc",
    "val_loss",
    "l1_norm",
    "nonzero_fraction_total",
    "nonzero_fraction_rows",
    "d_k",
    "sym_breg_step",
    "lr",
];

/// One trace row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub record: MetricsRecord,
    /// Step size in effect at the end of the epoch.
    pub lr: f64,
    pub active_rows: Vec<usize>,
}

impl EpochRow {
    pub fn values(&self) -> Vec<Option<f64>> {
        let r = &self.record;
        let mut v = vec![
            Some(r.epoch as f64),
            Some(r.loss),
            r.train_acc,
            r.val_acc,
            r.val_loss,
            Some(r.l1_norm),
            Some(r.nonzero_fraction_total),
            r.nonzero_fraction_rows,
            r.d_k,
            r.sym_breg_step,
            Some(self.lr),
        ];
        v.extend(self.active_rows.iter().map(|&n| Some(n as f64)));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedTrace {
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<EpochRow>,
}

impl SeedTrace {
    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("a trace holds at least the epoch-0 row")
    }
}

/// Training and validation splits taken from the training files in
/// `data_dir`.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), ConfigError> {
    let dir = Path::new(&cfg.data_dir);
    let images = dir.join("train-images-idx3-ubyte");
    let labels = dir.join("train-labels-idx1-ubyte");
    for p in [&images, &labels] {
        if !p.exists() {
            return Err(ConfigError::Data(format!("missing {}", p.display())));
        }
    }
    let all = load_mnist_idx(&images, &labels)?;
    if cfg.n_train + cfg.n_val > all.len() {
        return Err(ConfigError::Data(format!(
            "n_train + n_val = {} exceeds the {} available samples",
            cfg.n_train + cfg.n_val,
            all.len()
        )));
    }
    let (train, rest) = all.split(cfg.n_train)?;
    let (val, _) = rest.split(cfg.n_val)?;
    Ok((train, val))
}

fn check_shapes(cfg: &ExperimentConfig, spec: &MlpSpec, data: &Dataset) -> Result<(), ConfigError> {
    let field = |m: String| ConfigError::Field {
        field: "layers".into(),
        message: m,
    };
    if spec.n_inputs() != data.n_features() {
        return Err(field(format!(
            "input width {} does not match the {} pixels per image",
            spec.n_inputs(),
            data.n_features()
        )));
    }
    match cfg.task()? {
        Task::Autoencoder if spec.n_outputs() != data.n_features() => Err(field(format!(
            "autoencoder output width {} must equal the input width {}",
            spec.n_outputs(),
            data.n_features()
        ))),
        Task::Classify if spec.n_outputs() < 10 => {
            Err(field(format!("{} outputs cannot represent 10 classes", spec.n_outputs())))
        }
        _ => Ok(()),
    }
}

pub fn build_regularizer(kind: RegKind, lambda: f64, layout: GroupLayout) -> Result<Regularizer, ConfigError> {
    Ok(match kind {
        RegKind::None => Regularizer::zero(layout),
        RegKind::L1 => Regularizer::l1(lambda, layout)?,
        RegKind::GroupRows => Regularizer::group_l12(lambda, layout)?,
    })
}

fn noise_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1 << 63) | epoch);
    rng
}

/// Batch of `idx`; the autoencoder sees noisy inputs and clean targets.
fn make_batch(data: &Dataset, idx: &[usize], task: Task, noise_std: f64, rng: &mut ChaCha8Rng) -> Batch {
    match task {
        Task::Classify => data.labeled_batch(idx),
        Task::Autoencoder => {
            let clean = data.inputs(idx);
            let mut noisy = clean.clone();
            if noise_std > 0.0 {
                noisy.mapv_inplace(|x| x + noise_std * rng.sample::<f64, _>(StandardNormal));
            }
            Batch {
                inputs: noisy,
                targets: Targets::Values(clean),
            }
        }
    }
}

fn count_correct(out: &Array2<f64>, targets: &Targets) -> usize {
    match targets {
        Targets::Labels(labels) => argmax_rows(out).iter().zip(labels).filter(|(p, y)| p == y).count(),
        Targets::Values(_) => 0,
    }
}

/// Mean loss and accuracy over a whole split, in chunks.
fn evaluate(
    spec: &MlpSpec,
    theta: &ParamVector,
    data: &Dataset,
    task: Task,
    loss_kind: LossKind,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(f64, Option<f64>), ConfigError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut correct) = (0.0, 0usize);
    let mut noise = noise;
    for chunk in idx.chunks(2000) {
        let batch = match noise.as_mut() {
            Some((std, rng)) => make_batch(data, chunk, task, *std, rng),
            None => make_batch(data, chunk, task, 0.0, &mut noise_rng(0, 0)),
        };
        let out = forward(spec, theta, batch.inputs.view())?;
        total += breglearn::nn::loss(spec, theta, &batch, loss_kind)? * chunk.len() as f64;
        correct += count_correct(&out, &batch.targets);
    }
    let n = data.len() as f64;
    let acc = (task == Task::Classify).then(|| correct as f64 / n);
    Ok((total / n, acc))
}

struct Plateau {
    best: f64,
    since_best: usize,
}

impl Plateau {
    /// Records a score (higher is better); true when the step size should
    /// be decayed.
    fn update(&mut self, score: f64, patience: usize) -> bool {
        if score > self.best {
            self.best = score;
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        if self.since_best >= patience {
            self.since_best = 0;
            return true;
        }
        false
    }
}

fn primal_subgradient(v: &ParamVector, theta: &ParamVector, delta: f64) -> ParamVector {
    let mut p = v.clone();
    p.scaled_add(-1.0 / delta, theta);
    p
}

/// Trains one seed and returns its trace; row 0 describes the
/// initialization.
pub fn train_seed(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset, seed: u64) -> Result<SeedTrace, ConfigError> {
    let task = cfg.task()?;
    let spec = cfg.mlp()?;
    check_shapes(cfg, &spec, train)?;
    let loss_kind = cfg.loss_kind()?;
    let kind = cfg.reg_kind()?;
    let layout = default_layout(&spec, kind.mode());
    let reg = build_regularizer(kind, cfg.lambda, layout.clone())?;
    let init = cfg.init_spec(seed)?;
    let mut theta = init_group_masked(&layout, &init, &mut init.rng())?;
    let hyper = cfg.hyperparams()?;
    let mut state = OptimizerState::new(cfg.method()?, hyper, cfg.schedule()?, &reg, &theta)?;

    let columns = TRACE_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain(
            layout
                .blocks()
                .iter()
                .filter(|b| b.kind != BlockKind::Bias)
                .map(|b| format!("active_rows_{}", b.name)),
        )
        .collect();

    let metrics = |theta: &ParamVector| -> Result<(f64, f64, f64, Vec<usize>), ConfigError> {
        Ok((
            weight_l1_norm(theta, &layout)?,
            nonzero_fraction(theta, &layout, SparsityScope::AllWeights)?,
            nonzero_fraction(theta, &layout, SparsityScope::Rows)?,
            active_rows_per_block(theta, &layout)?,
        ))
    };
    let validate = |theta: &ParamVector| -> Result<(Option<f64>, Option<f64>), ConfigError> {
        if val.is_empty() {
            return Ok((None, None));
        }
        Ok(match task {
            Task::Classify => (Some(classification_accuracy(&spec, theta, val)?), None),
            Task::Autoencoder => (None, Some(evaluate(&spec, theta, val, task, loss_kind, None)?.0)),
        })
    };
    let row = |epoch, loss, train_acc, theta: &ParamVector, lr, sym| -> Result<EpochRow, ConfigError> {
        let (l1, nz, nz_rows, active) = metrics(theta)?;
        let (val_acc, val_loss) = validate(theta)?;
        Ok(EpochRow {
            record: MetricsRecord {
                epoch,
                loss,
                train_acc,
                val_acc,
                val_loss,
                l1_norm: l1,
                nonzero_fraction_total: nz,
                nonzero_fraction_rows: Some(nz_rows),
                d_k: None,
                sym_breg_step: sym,
            },
            lr,
            active_rows: active,
        })
    };

    let mut rng0 = noise_rng(seed, 0);
    let (loss0, acc0) = evaluate(&spec, &theta, train, task, loss_kind, Some((cfg.noise_std, &mut rng0)))?;
    let mut rows = vec![row(0, loss0, acc0, &theta, state.current_tau(), None)?];
    let mut plateau = Plateau {
        best: f64::NEG_INFINITY,
        since_best: 0,
    };
    let mut prev_p = state.subgradient_var().map(|v| primal_subgradient(v, &theta, hyper.delta));

    for epoch in 1..=cfg.epochs {
        let theta_prev = theta.clone();
        let mut rng = noise_rng(seed, epoch as u64);
        let (mut total, mut correct) = (0.0, 0usize);
        for idx in batches(train.len(), cfg.batch_size, seed, epoch as u64)? {
            let batch = make_batch(train, &idx, task, cfg.noise_std, &mut rng);
            let (l, g, out) = loss_grad_and_output(&spec, &theta, &batch, loss_kind)?;
            total += l * idx.len() as f64;
            correct += count_correct(&out, &batch.targets);
            state.step(&mut theta, &g, &reg)?;
        }
        let n = train.len() as f64;
        let train_acc = (task == Task::Classify).then(|| correct as f64 / n);
        let p = state.subgradient_var().map(|v| primal_subgradient(v, &theta, hyper.delta));
        let sym = match (&p, &prev_p) {
            (Some(p1), Some(p0)) => Some(reg.sym_bregman_distance(&theta, &theta_prev, p1, p0)?),
            _ => None,
        };
        prev_p = p;
        let mut r = row(epoch, total / n, train_acc, &theta, state.current_tau(), sym)?;
        if cfg.lr_decay_on_plateau {
            let score = match (r.record.val_acc, r.record.val_loss) {
                (Some(a), _) => a,
                (None, Some(l)) => -l,
                (None, None) => -r.record.loss,
            };
            if plateau.update(score, cfg.plateau_patience) {
                state.lr_scale *= cfg.plateau_factor;
                r.lr = state.current_tau();
            }
        }
        rows.push(r);
    }
    Ok(SeedTrace { seed, columns, rows })
}

/// Runs every configured seed, at most `workers` at a time, in seed order.
pub fn train_all(cfg: &ExperimentConfig, train: &Dataset, val: &Dataset) -> Result<Vec<SeedTrace>, ConfigError> {
    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, usize::from),
        w => w,
    };
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for group in cfg.seeds.chunks(workers) {
        let results: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| s.spawn(move || train_seed(cfg, train, val, seed)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Per-seed trace files: `<stem>_seed<k>.<ext>` next to `output`.
pub fn seed_path(output: &Path, seed: u64) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    output.with_file_name(format!("{stem}_seed{seed}.{ext}"))
}

/// Mean and sample standard deviation of every column per epoch. Cells are
/// empty when a seed lacks the value; the deviation is empty for one seed.
pub fn aggregate(traces: &[SeedTrace]) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let first = &traces[0];
    let mut columns = vec!["epoch".to_string()];
    for c in &first.columns[1..] {
        columns.push(format!("{c}_mean"));
        columns.push(format!("{c}_std"));
    }
    let n_rows = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(n_rows);
    for e in 0..n_rows {
        let values: Vec<Vec<Option<f64>>> = traces.iter().map(|t| t.rows[e].values()).collect();
        let mut row = vec![values[0][0]];
        for c in 1..first.columns.len() {
            let xs: Option<Vec<f64>> = values.iter().map(|v| v[c]).collect();
            match xs {
                Some(xs) => {
                    let n = xs.len() as f64;
                    let mean = xs.iter().sum::<f64>() / n;
                    let std = (xs.len() > 1)
                        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
                    row.push(Some(mean));
                    row.push(std);
                }
                None => row.extend([None, None]),
            }
        }
        rows.push(row);
    }
    (columns, rows)
}

/// Writes the per-seed traces and the aggregate to `cfg.output_csv`.
pub fn write_traces(cfg: &ExperimentConfig, traces: &[SeedTrace]) -> Result<Vec<PathBuf>, ConfigError> {
    let output = PathBuf::from(&cfg.output_csv);
    let mut written = Vec::new();
    for t in traces {
        let path = seed_path(&output, t.seed);
        let rows: Vec<Vec<String>> = t.rows.iter().map(|r| r.values().into_iter().map(fmt_opt).collect()).collect();
        write_rows(&path, &t.columns, &rows)?;
        written.push(path);
    }
    let (columns, rows) = aggregate(traces);
    let rows: Vec<Vec<String>> = rows.into_iter().map(|r| r.into_iter().map(fmt_opt).collect()).collect();
    write_rows(&output, &columns, &rows)?;
    written.push(output);
    Ok(written)
}
