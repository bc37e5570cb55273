use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use detrend::cell::{CellKind, NormMethod, Placement};
use detrend::checkpoint::{Checkpoint, CheckpointError};
use detrend::checks::{cell_gradcheck, CellCase};
use detrend::config::{ConfigError, ExperimentConfig};
use detrend::diagnostics::{
    default_selectors, record_histograms, record_neuron_trace, shift_metric, write_histograms_csv, DiagError,
};
use detrend::experiment::{load_dataset, run, run_dir, run_experiment, RunError};
use detrend::grad::{AdjointFault, GradCheckOptions};
use detrend::network::Model;
use detrend::plot::{line_chart, series_from_csv};
use detrend::tasks::{split, Sample};
use detrend::train::{evaluate, TrainError, Trainer};

const DATA_ENV: &str = "DETREND_DATA_DIR";

#[derive(Parser)]
#[command(name = "detrend", version, about = "Recurrent networks with adaptive detrending")]
struct Cli {
    /// Worker threads for convolution kernels and data generation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method on every configured fold.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue a run from a checkpoint (single method and fold).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test subjects of a fold.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the checkpoint's fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Finite-difference gradient check of a miniature cell.
    Gradcheck {
        /// gru or convgru.
        #[arg(long, default_value = "gru")]
        cell: String,
        #[arg(long, default_value = "ad")]
        norm: String,
        #[arg(long, default_value = "hidden")]
        placement: String,
        #[arg(long = "T", default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Scale the nonlinearity adjoints by 1.05; the check must then fail.
        #[arg(long)]
        corrupt_adjoint: bool,
        /// Write per-element results as CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Activation histograms and neuron traces of a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Earlier checkpoint of the same run; adds a histogram drift summary.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        neurons: usize,
        /// Recurrent layer index; defaults to the top one.
        #[arg(long)]
        layer: Option<usize>,
        /// Sample id for the neuron traces; defaults to the first test sample.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Generate the configured synthetic dataset into the cache.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a run directory or a CSV file to SVG.
    Plot {
        /// Run directory (with metrics.csv) or a CSV file.
        #[arg(long)]
        input: PathBuf,
        /// X column when plotting a CSV file.
        #[arg(long, default_value = "epoch")]
        x: String,
        /// Comma-separated Y columns when plotting a CSV file.
        #[arg(long, default_value = "train_joint,test_joint")]
        y: String,
        /// Output file (CSV input) or directory (run input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Check(String),
    Config(String),
    Numeric(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) | Failure::Runtime(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Numeric(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            RunError::Train(t) => t.into(),
            RunError::Checkpoint(c) => c.into(),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numeric(e.to_string()),
            TrainError::Config(m) => Failure::Config(m),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Config(format!("checkpoint: {e}"))
    }
}

impl From<DiagError> for Failure {
    fn from(e: DiagError) -> Self {
        match e {
            DiagError::Selector(s) => Failure::Config(format!("invalid selector {s}")),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for s in &args.set {
        cfg.apply_override(s)?;
    }
    if let Some(seed) = args.seed {
        cfg.apply_override(&format!("seed={seed}"))?;
    }
    if let Some(p) = &args.precision {
        cfg.apply_override(&format!("train.precision={p}"))?;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(DATA_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out.join("data"))
}

/// Rebuilds the model and trainer a checkpoint was taken from.
fn restore(ck: &Checkpoint) -> Result<(ExperimentConfig, Model, Trainer), Failure> {
    let cfg = ExperimentConfig::parse(&ck.config)?;
    let method = NormMethod::parse(&ck.method).ok_or_else(|| Failure::Config(format!("unknown method {}", ck.method)))?;
    let net = cfg.network(method, cfg.task.spec().heads());
    let tc = cfg.train_config();
    let mut model = Model::build(net, ck.model_seed, tc.precision).map_err(|e| Failure::Config(e.to_string()))?;
    let mut trainer = Trainer::new(tc, &model)?;
    ck.restore(&mut model, &mut trainer)?;
    Ok((cfg, model, trainer))
}

fn cmd_train(args: &ConfigArgs, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let cache = data_dir(&cfg);
    match resume {
        None => {
            let results = run_experiment(&cfg, Some(&cache))?;
            for r in &results {
                if let Some(last) = r.last() {
                    println!(
                        "{} fold {}: epoch {} train joint {:.4} test joint {:.4} test heads {:?}",
                        r.method,
                        r.fold,
                        last.train.epoch,
                        last.train.joint_acc,
                        last.test.joint_acc,
                        last.test.head_acc
                    );
                }
            }
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let method =
                NormMethod::parse(&ck.method).ok_or_else(|| Failure::Config(format!("unknown method {}", ck.method)))?;
            let dataset = load_dataset(&cfg, Some(&cache))?;
            let r = run(&cfg, &dataset, method, ck.fold, Some(&cfg.out), Some(&ck))?;
            println!(
                "resumed {} fold {} from epoch {} to {}; results in {}",
                method,
                ck.fold,
                ck.epoch,
                r.trainer.epoch,
                run_dir(&cfg.out, method, ck.fold).display()
            );
        }
    }
    Ok(())
}

fn cmd_eval(checkpoint: &Path, fold: Option<usize>) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, model, _) = restore(&ck)?;
    let dataset = load_dataset(&cfg, Some(&data_dir(&cfg)))?;
    let fold = fold.unwrap_or(ck.fold);
    let (_, test_idx) = split(&dataset, fold).map_err(|e| Failure::Config(e.to_string()))?;
    let m = evaluate(&model, &dataset.subset(&test_idx), cfg.train.crop, cfg.train.batch_size)?;
    let names = dataset.spec.head_names();
    println!("fold,samples,loss,{},joint", names.join(","));
    let heads: Vec<String> = m.head_acc.iter().map(|a| a.to_string()).collect();
    println!("{fold},{},{},{},{}", test_idx.len(), m.loss, heads.join(","), m.joint_acc);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    cell: &str,
    norm: &str,
    placement: &str,
    steps: usize,
    tolerance: f64,
    step: f64,
    seed: u64,
    corrupt: bool,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let kind = match cell {
        "gru" => CellKind::Gru,
        "convgru" => CellKind::ConvGru,
        _ => return Err(Failure::Config(format!("unknown cell `{cell}` (gru, convgru)"))),
    };
    let method = NormMethod::parse(norm).ok_or_else(|| Failure::Config(format!("unknown norm `{norm}`")))?;
    let placement =
        Placement::parse(placement).ok_or_else(|| Failure::Config(format!("unknown placement `{placement}`")))?;
    if steps == 0 {
        return Err(Failure::Config("--T must be positive".into()));
    }
    let case = CellCase {
        kind,
        method,
        placement,
        steps,
    };
    let opts = GradCheckOptions {
        step,
        tolerance,
        fault: corrupt.then(AdjointFault::default),
    };
    let rep = cell_gradcheck(&case, opts, seed).map_err(|e| Failure::Runtime(e.to_string()))?;
    if let Some(path) = report {
        rep.write_csv(fs::File::create(path)?).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let verdict = if rep.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} {} params {} max rel err {:.3e} (tolerance {tolerance:e}, step {step:e})",
        case.label(),
        rep.param_count(),
        rep.max_rel_err()
    );
    if rep.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", case.label())))
    }
}

fn cmd_diagnose(
    checkpoint: &Path,
    baseline: Option<&Path>,
    out: &Path,
    neurons: usize,
    layer: Option<usize>,
    sample: Option<usize>,
) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, model, _) = restore(&ck)?;
    if !model.config.is_recurrent() {
        return Err(Failure::Config("diagnostics need a recurrent network".into()));
    }
    let dataset = load_dataset(&cfg, Some(&data_dir(&cfg)))?;
    let (train_idx, test_idx) = split(&dataset, ck.fold).map_err(|e| Failure::Config(e.to_string()))?;
    let train = dataset.subset(&train_idx);
    let top = model
        .cells()
        .map_err(|e| Failure::Runtime(e.to_string()))?
        .last()
        .map(|(i, _)| *i)
        .unwrap_or(0);
    let selectors = default_selectors(&model, layer.unwrap_or(top), neurons)?;
    fs::create_dir_all(out)?;

    let crop = cfg.train.crop;
    let batch = cfg.train.batch_size;
    let mut epochs = Vec::new();
    if let Some(b) = baseline {
        let bck = Checkpoint::load(b)?;
        let (_, bmodel, _) = restore(&bck)?;
        epochs.push((bck.epoch, record_histograms(&bmodel, &train, crop, batch, &selectors)?));
    }
    epochs.push((ck.epoch, record_histograms(&model, &train, crop, batch, &selectors)?));
    write_histograms_csv(fs::File::create(out.join("histograms.csv"))?, &epochs)?;
    if epochs.len() == 2 {
        let mut w = csv::Writer::from_path(out.join("histogram_shift.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
        let csv_err = |e: csv::Error| Failure::Runtime(e.to_string());
        w.write_record(["neuron", "tv_h", "tv_y"]).map_err(csv_err)?;
        for (a, b) in epochs[0].1.iter().zip(&epochs[1].1) {
            let y = match (&a.detrended, &b.detrended) {
                (Some(x), Some(y)) => shift_metric(x, y)?.to_string(),
                _ => String::new(),
            };
            w.write_record([a.selector.name(), shift_metric(&a.hidden, &b.hidden)?.to_string(), y])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }

    let chosen: &Sample = match sample {
        Some(id) => dataset
            .samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Failure::Config(format!("no sample with id {id}")))?,
        None => &dataset.samples[test_idx[0]],
    };
    for (k, sel) in selectors.iter().enumerate() {
        let trace = record_neuron_trace(&model, chosen, crop, *sel)?;
        let path = out.join(format!("neuron_trace_{}.csv", sel.name()));
        trace.write_csv(fs::File::create(&path)?)?;
        if k == 0 {
            let text = fs::read_to_string(&path)?;
            let series = series_from_csv(&text, "t", &["h_tilde", "h", "z", "y"]).map_err(|e| Failure::Runtime(e.to_string()))?;
            fs::write(
                out.join("neuron_trace.svg"),
                line_chart(&format!("{} on sample {}", sel.name(), chosen.id), "t", "value", &series),
            )?;
        }
    }
    println!("wrote diagnostics for {} units to {}", selectors.len(), out.display());
    Ok(())
}

fn cmd_gen_data(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    let dir = match (&args.out, std::env::var_os(DATA_ENV)) {
        (Some(o), _) => o.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => PathBuf::from("data"),
    };
    let data = load_dataset(&cfg, Some(&dir))?;
    println!(
        "{} videos of task {} (seed {}) in {}",
        data.samples.len(),
        cfg.task.name(),
        cfg.data_seed,
        dir.join(format!("{}_{}", cfg.task.name(), cfg.data_seed)).display()
    );
    Ok(())
}

fn render(csv_path: &Path, x: &str, ys: &[&str], title: &str, out: &Path) -> Result<bool, Failure> {
    if !csv_path.is_file() {
        return Ok(false);
    }
    let text = fs::read_to_string(csv_path)?;
    let series = series_from_csv(&text, x, ys).map_err(|e| Failure::Runtime(e.to_string()))?;
    if series.is_empty() {
        return Err(Failure::Config(format!("{}: no columns {x} / {ys:?}", csv_path.display())));
    }
    fs::write(out, line_chart(title, x, &ys.join(", "), &series))?;
    Ok(true)
}

fn cmd_plot(input: &Path, x: &str, y: &str, out: Option<&Path>) -> Result<(), Failure> {
    if input.is_dir() {
        let dir = out.unwrap_or(input);
        fs::create_dir_all(dir)?;
        let mut made = 0;
        let metrics = input.join("metrics.csv");
        if metrics.is_file() {
            let header = fs::read_to_string(&metrics)?.lines().next().unwrap_or("").to_string();
            let accs: Vec<&str> = header.split(',').filter(|c| c.contains("acc") || c.ends_with("joint")).collect();
            made += render(&metrics, "epoch", &accs, "accuracy", &dir.join("accuracy.svg"))? as usize;
            made += render(&metrics, "epoch", &["train_loss", "test_loss"], "loss", &dir.join("loss.svg"))? as usize;
        }
        for name in ["grad_norm", "detrended_norm"] {
            made += render(
                &input.join(format!("{name}.csv")),
                "iter",
                &["smoothed"],
                name,
                &dir.join(format!("{name}.svg")),
            )? as usize;
        }
        if made == 0 {
            return Err(Failure::Config(format!("{}: nothing to plot", input.display())));
        }
        println!("wrote {made} plots to {}", dir.display());
        return Ok(());
    }
    let ys: Vec<&str> = y.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let target = out.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("svg"));
    if !render(input, x, &ys, &input.display().to_string(), &target)? {
        return Err(Failure::Config(format!("{}: no such file", input.display())));
    }
    println!("wrote {}", target.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = detrend::init_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Train { cfg, resume } => cmd_train(cfg, resume.as_deref()),
        Command::Eval { checkpoint, fold } => cmd_eval(checkpoint, *fold),
        Command::Gradcheck {
            cell,
            norm,
            placement,
            steps,
            tolerance,
            step,
            seed,
            corrupt_adjoint,
            report,
        } => cmd_gradcheck(
            cell,
            norm,
            placement,
            *steps,
            *tolerance,
            *step,
            *seed,
            *corrupt_adjoint,
            report.as_deref(),
        ),
        Command::Diagnose {
            checkpoint,
            baseline,
            out,
            neurons,
            layer,
            sample,
        } => cmd_diagnose(checkpoint, baseline.as_deref(), out, *neurons, *layer, *sample),
        Command::GenData { cfg } => cmd_gen_data(cfg),
        Command::Plot { input, x, y, out } => cmd_plot(input, x, y, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
