//! Command-line experiment runner.
//!
//! `run_command` is the whole program; `main` only forwards `std::env::args`
//! and exits with its code: 0 success, 1 usage, 2 data, 3 numeric failure.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use envae::data::{load_csv, synthetic_hdlss, write_csv, write_latents_csv, Dataset, SplitPlan};
use envae::metrics::{estimate_tc, LatentSource, LatentTable, DEFAULT_TC_JITTER};
use envae::model::{Checkpoint, EnVae};
use envae::numeric::{derive_seed, Matrix, Rng};
use envae::parallel::{try_map_indexed, Execution};
use envae::report::{mean_std, ReportRecord, RunReport, Timing};
use envae::training::{cross_validate, eval_downstream, mask_eval, DownstreamRun, FoldRun};

use crate::config::{parse_config, Settings, TcSplit, KEYS};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Lib(#[from] envae::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Lib(e) if e.is_numeric() => 3,
            CliError::Lib(e) if e.is_data() => 2,
            CliError::Lib(envae::Error::Shape(_)) => 2,
            CliError::Lib(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_help() -> String {
    let mut s = String::from("Config keys (flat `key = value` file, overridden by --set key=value):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<16} {d}\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.");
    s
}

#[derive(Parser, Debug)]
#[command(name = "envae", version, about = "Ensemble VAEs over disjoint feature groups", after_help = config_help())]
struct Cli {
    /// Run folds and seeds on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input CSV; overrides `data`.
    #[arg(long)]
    data: Option<String>,
    /// Label column; overrides `label`.
    #[arg(long)]
    label: Option<String>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic high-dimensional labelled CSV.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        latent_dim: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "label")]
        label: String,
        #[arg(long, default_value = "synthetic.csv")]
        out: PathBuf,
    },
    /// Cross-validated training; writes checkpoints and a report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Add a classification head and train it jointly.
        #[arg(long)]
        supervised: bool,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Downstream classifier protocol on a trained run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Total correlation of each fold's latents.
    Tc {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `tc_source` (mean | sample).
        #[arg(long)]
        source: Option<String>,
    },
    /// Accuracy with groups missing at inference, for every drop count.
    MaskEval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `reduction` (poe_full | mixture_mean).
        #[arg(long)]
        reduction: Option<String>,
    },
    /// Latent means of every sample for one fold's model.
    ExportLatents {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value = "latents.csv")]
        out: PathBuf,
    },
    /// Train and evaluate for several expert counts against k = 1.
    SweepExperts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8")]
        ks: Vec<usize>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Synth {
            n,
            d,
            classes,
            latent_dim,
            noise,
            seed,
            label,
            out,
        } => {
            let data = synthetic_hdlss(n, d, latent_dim, classes, noise, seed)?;
            write_csv(&data.dataset, &out, &label)?;
            Ok(())
        }
        Command::Train { cfg, supervised, out } => {
            let mut settings = resolve(&cfg)?;
            settings.train.supervised |= supervised;
            settings.train.execution = exec;
            let ds = load_dataset(&settings)?;
            create_dir(&out)?;
            train_run(&settings, &ds, &out)?;
            Ok(())
        }
        Command::Eval { run, out } => {
            let (settings, ds, folds) = load_run(&run, exec)?;
            let report = eval_report(&settings, &ds, &folds, exec)?;
            report.write_jsonl(out.unwrap_or_else(|| run.join("eval.jsonl")))?;
            Ok(())
        }
        Command::Tc { run, out, source } => {
            let (mut settings, ds, folds) = load_run(&run, exec)?;
            if let Some(s) = source {
                settings.set("tc_source", &s)?;
            }
            let report = tc_report(&settings, &ds, &folds)?;
            report.write_jsonl(out.unwrap_or_else(|| run.join("tc.jsonl")))?;
            Ok(())
        }
        Command::MaskEval { run, out, reduction } => {
            let (mut settings, ds, folds) = load_run(&run, exec)?;
            if let Some(r) = reduction {
                settings.set("reduction", &r)?;
            }
            let report = mask_report(&settings, &ds, &folds, exec)?;
            report.write_jsonl(out.unwrap_or_else(|| run.join("mask.jsonl")))?;
            report.write_table_csv(run.join("mask.csv"))?;
            Ok(())
        }
        Command::ExportLatents { run, fold, out } => {
            let (_, ds, folds) = load_run(&run, exec)?;
            let f = folds
                .get(fold)
                .ok_or_else(|| CliError::Usage(format!("run has {} folds, no fold {fold}", folds.len())))?;
            let z = f.model.latent_means(&f.scaler.transform(&ds.x)?)?;
            let idx: Vec<usize> = (0..ds.n_samples()).collect();
            let labels: Vec<String> = ds.y.iter().map(|&c| ds.class_names[c].clone()).collect();
            write_latents_csv(&out, &idx, &labels, &z)?;
            Ok(())
        }
        Command::SweepExperts { cfg, ks, out } => {
            let mut settings = resolve(&cfg)?;
            settings.train.execution = exec;
            let ds = load_dataset(&settings)?;
            create_dir(&out)?;
            sweep(&settings, &ds, &ks, &out, exec)
        }
    }
}

fn resolve(args: &ConfigArgs) -> CliResult<Settings> {
    let mut overrides = Vec::new();
    if let Some(d) = &args.data {
        overrides.push(format!("data={d}"));
    }
    if let Some(l) = &args.label {
        overrides.push(format!("label={l}"));
    }
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(args.set.iter().cloned());
    parse_config(args.config.as_deref(), &overrides)
}

fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::Data(format!("cannot create {}: {e}", p.display())))
}

fn load_dataset(settings: &Settings) -> CliResult<Dataset> {
    let path = settings
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("no input data: pass --data or set `data` in the config".into()))?;
    Ok(load_csv(path, &settings.label)?)
}

fn config_record(command: &str, settings: &Settings) -> CliResult<ReportRecord> {
    Ok(ReportRecord::Config {
        command: command.to_string(),
        seed: settings.train.seed,
        config: serde_json::to_value(settings).map_err(envae::Error::from)?,
    })
}

/// A fold restored from disk.
pub struct LoadedFold {
    pub plan: SplitPlan,
    pub scaler: envae::data::MinMaxScaler,
    pub model: EnVae,
}

fn checkpoint_name(fold: usize) -> String {
    format!("fold{fold}.json")
}

/// Trains every fold, writes checkpoints, histories and the run report.
pub fn train_run(settings: &Settings, ds: &Dataset, out: &Path) -> CliResult<RunReport> {
    let start = Instant::now();
    let folds: Vec<FoldRun> = cross_validate(ds, &settings.train)?;
    let mut report = RunReport::default();
    report.push(config_record("train", settings)?);
    let mut timing = Timing::default();
    for f in &folds {
        let name = checkpoint_name(f.plan.fold);
        let history = format!("fold{}_history.csv", f.plan.fold);
        let meta = serde_json::json!({ "fold": f.plan.fold, "plan": f.plan });
        Checkpoint::new(f.model.clone(), Some(f.scaler.clone()), meta).save(out.join(&name))?;
        f.history.write_csv(out.join(&history))?;
        timing.record(format!("fold{}", f.plan.fold), f.history.wall_seconds);
        report.push(ReportRecord::Fold {
            fold: f.plan.fold,
            train_size: f.plan.train.len(),
            valid_size: f.plan.valid.len(),
            test_size: f.plan.test.len(),
            epochs_run: f.history.epochs_run(),
            best_epoch: f.history.best_epoch,
            best_valid_loss: f.history.best_valid_loss(),
            checkpoint: Some(name),
            history: Some(history),
        });
    }
    let losses = folds.iter().map(|f| f.history.best_valid_loss()).collect();
    report.summarize("best_valid_loss", losses);
    report.write_jsonl(out.join("report.jsonl"))?;
    report.write_table_csv(out.join("report.csv"))?;
    timing.record("train_total", start.elapsed().as_secs_f64());
    timing.write_json(out.join("timing.json"))?;
    Ok(report)
}

/// Settings, dataset and fold models of a finished `train` run.
pub fn load_run(run: &Path, _exec: Execution) -> CliResult<(Settings, Dataset, Vec<LoadedFold>)> {
    let report = RunReport::read_jsonl(run.join("report.jsonl"))?;
    let settings: Settings = report
        .records
        .iter()
        .find_map(|r| match r {
            ReportRecord::Config { config, .. } => Some(serde_json::from_value(config.clone())),
            _ => None,
        })
        .ok_or_else(|| CliError::Data(format!("{}: report has no config record", run.display())))?
        .map_err(envae::Error::from)?;
    let ds = load_dataset(&settings)?;
    let mut folds = Vec::new();
    for r in &report.records {
        if let ReportRecord::Fold { checkpoint: Some(name), .. } = r {
            let ck = Checkpoint::load(run.join(name))?;
            let plan: SplitPlan = serde_json::from_value(ck.meta["plan"].clone()).map_err(envae::Error::from)?;
            plan.validate(ds.n_samples())?;
            let scaler = ck
                .scaler
                .ok_or_else(|| CliError::Data(format!("{name}: checkpoint has no scaler")))?;
            folds.push(LoadedFold {
                plan,
                scaler,
                model: ck.model,
            });
        }
    }
    if folds.is_empty() {
        return Err(CliError::Data(format!("{}: no fold checkpoints", run.display())));
    }
    Ok((settings, ds, folds))
}

fn downstream_for(settings: &Settings, ds: &Dataset, f: &LoadedFold, exec: Execution) -> CliResult<(Matrix, Vec<DownstreamRun>)> {
    let x = f.scaler.transform(&ds.x)?;
    let seed = derive_seed(settings.train.seed, &[0xE7A1, f.plan.fold as u64]);
    let runs = eval_downstream(&f.model, &x, &ds.y, &f.plan, ds.n_classes(), &settings.train.classifier, seed, exec)?;
    Ok((x, runs))
}

/// Downstream balanced accuracy for every fold and classifier seed.
pub fn eval_report(settings: &Settings, ds: &Dataset, folds: &[LoadedFold], exec: Execution) -> CliResult<RunReport> {
    let mut report = RunReport::default();
    report.push(config_record("eval", settings)?);
    let per_fold = try_map_indexed(folds.len(), exec, |i| {
        downstream_for(settings, ds, &folds[i], Execution::Sequential).map_err(|e| match e {
            CliError::Lib(l) => l,
            other => envae::Error::InvalidArgument(other.to_string()),
        })
    })?;
    let mut values = Vec::new();
    for (f, (_, runs)) in folds.iter().zip(&per_fold) {
        for r in runs {
            report.push(ReportRecord::Downstream {
                fold: f.plan.fold,
                seed_index: r.seed_index,
                balanced_accuracy: r.balanced_accuracy,
            });
            values.push(r.balanced_accuracy);
        }
    }
    report.summarize("balanced_accuracy", values);
    Ok(report)
}

/// Fitted-Gaussian total correlation per fold.
pub fn tc_report(settings: &Settings, ds: &Dataset, folds: &[LoadedFold]) -> CliResult<RunReport> {
    let mut report = RunReport::default();
    report.push(config_record("tc", settings)?);
    let mut values = Vec::new();
    for f in folds {
        let rows: Vec<usize> = match settings.tc_split {
            TcSplit::All => (0..ds.n_samples()).collect(),
            TcSplit::Train => f.plan.train.clone(),
            TcSplit::Test => f.plan.test.clone(),
        };
        let x = f.scaler.transform(&ds.x.select_rows(&rows))?;
        let post = f.model.infer_latent(
            &x,
            envae::model::GroupMask::full(f.model.n_groups()),
            envae::model::LatentReduction::PoeFull,
        )?;
        let z = match settings.tc_source {
            LatentSource::Mean => post.mean,
            LatentSource::Sample => {
                let mut rng = Rng::substream(settings.train.seed, &[0x7C, f.plan.fold as u64]);
                let mut z = post.mean.clone();
                for (v, lv) in z.data_mut().iter_mut().zip(post.log_var.data()) {
                    *v += (0.5 * lv).exp() * rng.normal();
                }
                z
            }
        };
        let n = z.rows();
        let est = estimate_tc(&LatentTable::new(z, settings.tc_source)?, DEFAULT_TC_JITTER)?;
        let tc = est.tc.max(0.0);
        report.push(ReportRecord::Tc {
            fold: f.plan.fold,
            tc,
            jitter: est.jitter,
            source: format!("{:?}", settings.tc_source).to_lowercase(),
            n_samples: n,
        });
        values.push(tc);
    }
    report.summarize("tc", values);
    Ok(report)
}

/// Missing-group protocol: classifiers from the eval protocol, test latents
/// inferred from every subset of remaining groups.
pub fn mask_report(settings: &Settings, ds: &Dataset, folds: &[LoadedFold], exec: Execution) -> CliResult<RunReport> {
    let mut report = RunReport::default();
    report.push(config_record("mask-eval", settings)?);
    let m = folds[0].model.n_groups();
    if folds.iter().any(|f| f.model.n_groups() != m) {
        return Err(CliError::Data("folds disagree on the number of groups".into()));
    }
    let per_fold = try_map_indexed(folds.len(), exec, |i| {
        let f = &folds[i];
        let (x, runs) = downstream_for(settings, ds, f, Execution::Sequential).map_err(|e| match e {
            CliError::Lib(l) => l,
            other => envae::Error::InvalidArgument(other.to_string()),
        })?;
        let classifiers: Vec<_> = runs.into_iter().map(|r| r.classifier).collect();
        let y_test = ds.labels_at(&f.plan.test);
        mask_eval(&f.model, &classifiers, &x.select_rows(&f.plan.test), &y_test, ds.n_classes(), settings.reduction)
    })?;
    for d in 0..m {
        let values: Vec<f64> = per_fold
            .iter()
            .flat_map(|rows| rows[d].accuracies.iter().flatten().copied())
            .collect();
        let (mean, std) = mean_std(&values);
        report.push(ReportRecord::Mask {
            dropped: d,
            n_subsets: per_fold[0][d].n_subsets,
            values,
            mean,
            std,
        });
    }
    Ok(report)
}

fn sweep(settings: &Settings, ds: &Dataset, ks: &[usize], out: &Path, exec: Execution) -> CliResult<()> {
    let mut all: Vec<usize> = vec![1];
    all.extend(ks.iter().copied().filter(|&k| k != 1));
    let mut report = RunReport::default();
    report.push(config_record("sweep-experts", settings)?);
    let mut baseline = None;
    for k in all {
        let mut s = settings.clone();
        s.set("m", &k.to_string())?;
        if s.train.model.elbo_mode.is_some_and(|mode| mode.validate(k).is_err()) {
            s.set("elbo_mode", "auto")?;
        }
        let dir = out.join(format!("k{k}"));
        create_dir(&dir)?;
        train_run(&s, ds, &dir)?;
        let (_, _, folds) = load_run(&dir, exec)?;
        let ev = eval_report(&s, ds, &folds, exec)?;
        ev.write_jsonl(dir.join("eval.jsonl"))?;
        let (mean, std) = ev.summary("balanced_accuracy").expect("eval summary");
        let base = *baseline.get_or_insert(mean);
        report.push(ReportRecord::Sweep {
            k,
            mean,
            std,
            improvement: mean - base,
        });
    }
    report.write_jsonl(out.join("sweep.jsonl"))?;
    report.write_table_csv(out.join("sweep.csv"))?;
    Ok(())
}
