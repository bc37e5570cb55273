//! Experiment runner: one training run per (method, fold), writing metrics,
//! norm traces, activation histograms and checkpoints to an output directory.
//!
//! `metrics.csv` holds only values that are a pure function of (config, seed);
//! wall-clock times go to `timing.csv`.

use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::cell::{ModelError, NormMethod};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::diagnostics::{
    default_selectors, record_histograms, shift_metric, write_histograms_csv, DiagError, NeuronHistograms, NormTrace,
};
use crate::network::Model;
use crate::tasks::{export, generate, import, split, Dataset, TaskError};
use crate::train::{evaluate, train_epoch, EpochMetrics, EvalMetrics, IterationInfo, TrainError, TrainObserver, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diag(#[from] DiagError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint belongs to {0}")]
    Mismatch(String),
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        RunError::Train(e.into())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub fold: usize,
    pub train: EpochMetrics,
    pub test: EvalMetrics,
    pub eval_seconds: f64,
}

/// Outcome of one (method, fold) run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: NormMethod,
    pub fold: usize,
    pub records: Vec<EpochRecord>,
    /// Pre-clip gradient norm per iteration.
    pub grad_norm: NormTrace,
    /// L2 norm of the detrended outputs per iteration (empty without detrending).
    pub detrended_norm: NormTrace,
    /// Histograms after the first and the last epoch of this invocation.
    pub histograms: Vec<(usize, Vec<NeuronHistograms>)>,
    pub model: Model,
    pub trainer: Trainer,
}

impl RunResult {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// First epoch whose training joint accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.train.joint_acc >= threshold).map(|r| r.train.epoch)
    }

    /// Per-unit total-variation distance between the first and last recorded
    /// histograms, `(neuron, tv of h, tv of y)`.
    pub fn histogram_shift(&self) -> Result<Vec<(String, f64, Option<f64>)>, DiagError> {
        let (Some(first), Some(last)) = (self.histograms.first(), self.histograms.last()) else {
            return Ok(Vec::new());
        };
        first
            .1
            .iter()
            .zip(&last.1)
            .map(|(a, b)| {
                let y = match (&a.detrended, &b.detrended) {
                    (Some(x), Some(y)) => Some(shift_metric(x, y)?),
                    _ => None,
                };
                Ok((a.selector.name(), shift_metric(&a.hidden, &b.hidden)?, y))
            })
            .collect()
    }
}

#[derive(Default)]
struct Traces {
    grad: NormTrace,
    detrended: NormTrace,
}

impl TrainObserver for Traces {
    fn on_iteration(&mut self, info: &IterationInfo<'_>) {
        self.grad.push(info.grad_norm);
        if let Some(y) = info.detrended_norm {
            self.detrended.push(y);
        }
    }
}

/// Directory of one run below the experiment output directory.
pub fn run_dir(out: &Path, method: NormMethod, fold: usize) -> PathBuf {
    out.join(method.name()).join(format!("fold{fold}"))
}

/// Loads the dataset from `cache` when present there, otherwise generates it
/// (and fills the cache).
pub fn load_dataset(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<Dataset, RunError> {
    let spec = cfg.task.spec();
    let Some(root) = cache else {
        return Ok(generate(&spec, cfg.data_seed)?);
    };
    let dir = root.join(format!("{}_{}", cfg.task.name(), cfg.data_seed));
    if dir.join("manifest.csv").is_file() {
        let samples = import(&dir)?;
        return Ok(Dataset {
            spec,
            seed: cfg.data_seed,
            samples,
        });
    }
    let data = generate(&spec, cfg.data_seed)?;
    export(&data, &dir)?;
    Ok(data)
}

fn append(path: &Path) -> Result<(BufWriter<File>, bool), RunError> {
    let fresh = !path.exists();
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    Ok((BufWriter::new(f), fresh))
}

fn metrics_header(heads: &[&str]) -> Vec<String> {
    let mut h = vec!["fold".to_string(), "epoch".into(), "train_loss".into()];
    h.extend(heads.iter().map(|n| format!("train_acc_{n}")));
    h.push("train_joint".into());
    h.push("test_loss".into());
    h.extend(heads.iter().map(|n| format!("test_acc_{n}")));
    h.push("test_joint".into());
    h
}

fn metrics_row(r: &EpochRecord) -> Vec<String> {
    let mut row = vec![r.fold.to_string(), r.train.epoch.to_string(), r.train.loss.to_string()];
    row.extend(r.train.head_acc.iter().map(|a| a.to_string()));
    row.push(r.train.joint_acc.to_string());
    row.push(r.test.loss.to_string());
    row.extend(r.test.head_acc.iter().map(|a| a.to_string()));
    row.push(r.test.joint_acc.to_string());
    row
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), RunError> {
    let (w, fresh) = append(path)?;
    let mut out = csv::Writer::from_writer(w);
    if fresh {
        out.write_record(header)?;
    }
    for r in rows {
        out.write_record(r)?;
    }
    out.flush()?;
    Ok(())
}

fn write_trace(path: &Path, trace: &NormTrace, start_iter: usize) -> Result<(), RunError> {
    let header = ["iter", "raw", "smoothed"].map(String::from);
    let rows: Vec<Vec<String>> = trace
        .raw
        .iter()
        .zip(&trace.smoothed)
        .enumerate()
        .map(|(i, (r, s))| vec![(start_iter + i + 1).to_string(), r.to_string(), s.to_string()])
        .collect();
    write_rows(path, &header, &rows)
}

/// Trains one method on one fold up to `cfg.train.epochs`, starting fresh or
/// from `resume`. With `out`, results are appended below
/// [`run_dir`]`(out, method, fold)`.
pub fn run(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    method: NormMethod,
    fold: usize,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<RunResult, RunError> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let net = cfg.network(method, dataset.heads());
    let mut model = Model::build(net, cfg.seed, tc.precision)?;
    let mut trainer = Trainer::new(tc, &model)?;
    if let Some(ck) = resume {
        if ck.method != method.name() || ck.fold != fold {
            return Err(RunError::Mismatch(format!("{} fold {}", ck.method, ck.fold)));
        }
        ck.restore(&mut model, &mut trainer)?;
    }
    let start_iter = trainer.iteration;

    let (train_idx, test_idx) = split(dataset, fold)?;
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(&test_idx);
    let t_max = dataset.max_len();
    let heads = dataset.spec.head_names();

    let dir = out.map(|o| run_dir(o, method, fold));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let selectors = if cfg.diag_neurons > 0 && model.config.is_recurrent() {
        let top = model.cells()?.last().map(|(i, _)| *i).unwrap_or(0);
        let layer = if cfg.diag_layer == 0 { top } else { cfg.diag_layer };
        default_selectors(&model, layer, cfg.diag_neurons)?
    } else {
        Vec::new()
    };

    let mut traces = Traces::default();
    let mut records = Vec::new();
    let mut histograms = Vec::new();
    let first_epoch = trainer.epoch + 1;
    while trainer.epoch < tc.epochs {
        let train_m = train_epoch(&mut model, &mut trainer, &train, t_max, &mut traces)?;
        let t0 = Instant::now();
        let test_m = evaluate(&model, &test, tc.crop, tc.batch_size)?;
        let record = EpochRecord {
            fold,
            train: train_m,
            test: test_m,
            eval_seconds: t0.elapsed().as_secs_f64(),
        };
        let epoch = trainer.epoch;
        if !selectors.is_empty() && (epoch == first_epoch || epoch == tc.epochs) {
            histograms.push((epoch, record_histograms(&model, &train, tc.crop, tc.batch_size, &selectors)?));
        }
        if let Some(d) = &dir {
            write_rows(&d.join("metrics.csv"), &metrics_header(&heads), &[metrics_row(&record)])?;
            write_rows(
                &d.join("timing.csv"),
                &["fold", "epoch", "train_seconds", "eval_seconds"].map(String::from),
                &[vec![
                    fold.to_string(),
                    epoch.to_string(),
                    format!("{:.3}", record.train.seconds),
                    format!("{:.3}", record.eval_seconds),
                ]],
            )?;
            let due = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
            if due || epoch == tc.epochs {
                let ck = Checkpoint::capture(&model, &trainer, &cfg.to_text(), method.name(), fold);
                if due {
                    ck.save(&d.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
                if epoch == tc.epochs {
                    ck.save(&d.join("final.ckpt"))?;
                }
            }
        }
        records.push(record);
    }

    let result = RunResult {
        method,
        fold,
        records,
        grad_norm: traces.grad,
        detrended_norm: traces.detrended,
        histograms,
        model,
        trainer,
    };
    if let Some(d) = &dir {
        write_trace(&d.join("grad_norm.csv"), &result.grad_norm, start_iter)?;
        if !result.detrended_norm.is_empty() {
            write_trace(&d.join("detrended_norm.csv"), &result.detrended_norm, start_iter)?;
        }
        if !result.histograms.is_empty() {
            write_histograms_csv(File::create(d.join("histograms.csv"))?, &result.histograms)?;
            let rows: Vec<Vec<String>> = result
                .histogram_shift()?
                .into_iter()
                .map(|(n, h, y)| vec![n, h.to_string(), y.map_or(String::new(), |v| v.to_string())])
                .collect();
            let path = d.join("histogram_shift.csv");
            if path.exists() {
                fs::remove_file(&path)?;
            }
            write_rows(&path, &["neuron", "tv_h", "tv_y"].map(String::from), &rows)?;
        }
    }
    Ok(result)
}

/// Runs every configured method on every configured fold, writing the config
/// and a fold summary to `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, cache: Option<&Path>) -> Result<Vec<RunResult>, RunError> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.cfg"), cfg.to_text())?;
    let dataset = load_dataset(cfg, cache)?;
    let heads = dataset.spec.head_names();
    let mut results = Vec::new();
    for &method in &cfg.methods {
        for &fold in &cfg.folds {
            results.push(run(cfg, &dataset, method, fold, Some(&cfg.out), None)?);
        }
    }
    let mut header = vec!["method".to_string(), "fold".into(), "epochs_to_90".into()];
    header.extend(heads.iter().map(|n| format!("test_acc_{n}")));
    header.push("test_joint".into());
    let rows: Vec<Vec<String>> = results
        .iter()
        .filter_map(|r| {
            let last = r.last()?;
            let mut row = vec![
                r.method.name().to_string(),
                r.fold.to_string(),
                r.epochs_to(0.9).map_or("never".into(), |e| e.to_string()),
            ];
            row.extend(last.test.head_acc.iter().map(|a| a.to_string()));
            row.push(last.test.joint_acc.to_string());
            Some(row)
        })
        .collect();
    let path = cfg.out.join("summary.csv");
    if path.exists() {
        fs::remove_file(&path)?;
    }
    write_rows(&path, &header, &rows)?;
    Ok(results)
}
