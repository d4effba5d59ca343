use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use realmlp::bench::{self, Aggregation, AltAggregate, BenchTable};
use realmlp::config::{parse_stop_metric, RealMlpConfig};
use realmlp::dataio::{load_csv, load_csv_features, make_split, Dataset, DatasetSchema, Task};
use realmlp::ensemble::{train_ensemble, Ensemble, EnsembleMode, EnsembleSpec, Stopping};
use realmlp::hpo::{metric_on_rows, random_search, write_trial_log, SearchSpace};
use realmlp::modelfile;
use realmlp::train::{argmax_rows, cross_entropy, fit, EpochSelection, Prediction, TrainedModel};

#[derive(Parser)]
#[command(
    name = "realmlp",
    version,
    about = "RealMLP for tabular classification and regression"
)]
struct Cli {
    /// Worker threads for HPO trials and ensemble members.
    #[arg(long, env = "REALMLP_JOBS", global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Err,
    Nrmse,
    AucOvr,
    Ce,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    Sgm,
    Arith,
    Rank,
    Norm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Bagging,
    Refitting,
}

#[derive(Clone, Copy, ValueEnum)]
enum StoppingArg {
    Indiv,
    Joint,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// td, tds, td-class, td-reg, tds-class or tds-reg.
    #[arg(long, default_value = "td")]
    preset: String,
    /// `key = value` override file applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// err, rmse or ce.
    #[arg(long)]
    stop_metric: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a seeded 60/20/20 split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model file; the epoch log goes next to it as `<out>.epochs.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write predictions for every row of a CSV file.
    Predict {
        /// Model file or ensemble directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on a labelled CSV file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Random search over the RealMLP-HPO space.
    Hpo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Bagging or refitting ensemble over five folds of train ∪ validation.
    Ensemble {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "bagging")]
        mode: ModeArg,
        #[arg(long, default_value_t = 5)]
        members: usize,
        #[arg(long, value_enum, default_value = "indiv")]
        stopping: StoppingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Aggregate a long-format error table.
    Bench {
        /// CSV with columns method,dataset,split,error.
        #[arg(long)]
        errors: PathBuf,
        /// CSV with columns dataset,group.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sgm")]
        agg: Agg,
        #[arg(long, default_value_t = bench::DEFAULT_EPS)]
        eps: f64,
        /// Add 95% confidence intervals (sgm only).
        #[arg(long)]
        ci: bool,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs, task: Task) -> Result<RealMlpConfig> {
    let mut cfg = RealMlpConfig::preset(&args.preset, task)?;
    if let Some(path) = &args.config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_overrides(&text)?;
    }
    if let Some(m) = &args.stop_metric {
        cfg.stop_metric =
            parse_stop_metric(m).with_context(|| format!("unknown stop metric {m:?}"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(data: &Path, schema: &Path) -> Result<Dataset> {
    let schema = DatasetSchema::load(schema)
        .with_context(|| format!("reading schema {}", schema.display()))?;
    load_csv(data, &schema).with_context(|| format!("reading {}", data.display()))
}

enum Predictor {
    Single(Box<TrainedModel>),
    Ensemble(Ensemble),
}

impl Predictor {
    fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(Predictor::Ensemble(Ensemble::load_dir(path)?))
        } else {
            Ok(Predictor::Single(Box::new(
                modelfile::load(path).with_context(|| format!("loading {}", path.display()))?,
            )))
        }
    }

    fn reference(&self) -> Result<&TrainedModel> {
        match self {
            Predictor::Single(m) => Ok(m),
            Predictor::Ensemble(e) => e.members.first().context("ensemble has no members"),
        }
    }

    fn predict(&self, ds: &Dataset) -> Result<Prediction> {
        Ok(match self {
            Predictor::Single(m) => m.predict_all(ds)?,
            Predictor::Ensemble(e) => e.predict_all(ds)?,
        })
    }
}

/// Values are written with the shortest representation that parses back
/// to the same f64.
fn write_predictions(pred: &Prediction, class_names: &[String], out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    match pred {
        Prediction::Probabilities(p) => {
            let mut header: Vec<String> = class_names.iter().map(|c| format!("prob_{c}")).collect();
            header.push("label".into());
            w.write_record(&header)?;
            for (row, label) in p.rows().into_iter().zip(argmax_rows(p)) {
                let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                rec.push(class_names[label].clone());
                w.write_record(&rec)?;
            }
        }
        Prediction::Values(v) => {
            w.write_record(["prediction"])?;
            for x in v {
                w.write_record([x.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_train(data: &Path, schema: &Path, cfg: &ConfigArgs, seed: u64, out: &Path) -> Result<()> {
    let ds = load_dataset(data, schema)?;
    let config = load_config(cfg, ds.task())?;
    let split = make_split(ds.n_rows(), seed)?;
    let (model, record) = fit(
        &ds,
        &split.train,
        &split.validation,
        &config,
        EpochSelection::Best,
        seed,
    )?;
    modelfile::save(&model, out)?;
    let log = PathBuf::from(format!("{}.epochs.csv", out.display()));
    record.write_csv(fs::File::create(&log)?)?;
    if let Some(msg) = &record.aborted {
        eprintln!("warning: training stopped early: {msg}");
    }
    let test = metric_on_rows(&model, &ds, &split.test, config.stop_metric)?;
    let selected = record
        .selected_epoch
        .map_or("none".into(), |e| e.to_string());
    let val = record
        .selected_epoch
        .map_or(f64::NAN, |e| record.epochs[e].val_metric);
    println!("selected_epoch,{selected}");
    println!("val_metric,{}", bench::fmt9(val));
    println!("test_metric,{}", bench::fmt9(test));
    Ok(())
}

fn cmd_predict(model: &Path, data: &Path, out: &Path) -> Result<()> {
    let predictor = Predictor::load(model)?;
    let reference = predictor.reference()?;
    let ds = load_csv_features(data, &reference.schema)
        .with_context(|| format!("reading {}", data.display()))?;
    write_predictions(&predictor.predict(&ds)?, &reference.class_names, out)
}

fn cmd_evaluate(model: &Path, data: &Path, metric: Metric) -> Result<()> {
    let predictor = Predictor::load(model)?;
    let reference = predictor.reference()?;
    let mut ds =
        load_csv(data, &reference.schema).with_context(|| format!("reading {}", data.display()))?;
    if reference.task() == Task::Classification {
        ds.remap_classes(&reference.class_names)?;
    }
    let pred = predictor.predict(&ds)?;
    let (name, value) = match (metric, &pred) {
        (Metric::Err, Prediction::Probabilities(p)) => (
            "err",
            bench::classification_error(ds.class_labels()?.0, &argmax_rows(p)),
        ),
        (Metric::Ce, Prediction::Probabilities(p)) => {
            ("ce", cross_entropy(p, ds.class_labels()?.0))
        }
        (Metric::AucOvr, Prediction::Probabilities(p)) => {
            ("auc-ovr", bench::auroc_ovr(ds.class_labels()?.0, p)?)
        }
        (Metric::Nrmse, Prediction::Values(v)) => ("nrmse", bench::nrmse(ds.target_values()?, v)?),
        (Metric::Nrmse, _) => bail!("nrmse needs a regression model"),
        _ => bail!("err, ce and auc-ovr need a classification model"),
    };
    println!("metric,value");
    println!("{name},{}", bench::fmt9(value));
    if name == "auc-ovr" {
        println!("auc-ovr-error,{}", bench::fmt9(1.0 - value));
    }
    Ok(())
}

fn cmd_hpo(
    data: &Path,
    schema: &Path,
    steps: usize,
    seed: u64,
    out_dir: &Path,
    parallel: bool,
) -> Result<()> {
    let ds = load_dataset(data, schema)?;
    let base = RealMlpConfig::td(ds.task());
    let space = SearchSpace::realmlp(ds.task());
    let split = make_split(ds.n_rows(), seed)?;
    let result = random_search(&ds, &split, &space, &base, steps, seed, parallel)?;
    fs::create_dir_all(out_dir)?;
    write_trial_log(
        &space,
        &result.trials,
        fs::File::create(out_dir.join("trials.csv"))?,
    )?;
    modelfile::save(&result.best_output, out_dir.join("best.rmlp"))?;
    let mut cfg_file = fs::File::create(out_dir.join("best_config.txt"))?;
    for (k, v) in result.best_output.config.to_key_values() {
        writeln!(cfg_file, "{k} = {v}")?;
    }
    let best = &result.trials[result.best];
    println!("best_trial,{}", best.index);
    println!("val_metric,{}", bench::fmt9(best.val_metric));
    println!("test_metric,{}", bench::fmt9(best.test_metric));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ensemble(
    data: &Path,
    schema: &Path,
    cfg: &ConfigArgs,
    mode: ModeArg,
    members: usize,
    stopping: StoppingArg,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let ds = load_dataset(data, schema)?;
    let config = load_config(cfg, ds.task())?;
    let split = make_split(ds.n_rows(), seed)?;
    let spec = EnsembleSpec {
        members,
        mode: match mode {
            ModeArg::Bagging => EnsembleMode::Bagging,
            ModeArg::Refitting => EnsembleMode::Refitting,
        },
        stopping: match stopping {
            StoppingArg::Indiv => Stopping::Individual,
            StoppingArg::Joint => Stopping::Joint,
        },
        seed,
    };
    let ens = train_ensemble(&ds, &split.train_val(), &config, spec)?;
    ens.save_dir(out_dir)?;
    let test = match ens.predict(&ds, &split.test)? {
        Prediction::Probabilities(p) => {
            let labels = ds.class_labels()?.0;
            let y: Vec<usize> = split.test.iter().map(|&r| labels[r]).collect();
            bench::classification_error(&y, &argmax_rows(&p))
        }
        Prediction::Values(v) => {
            let t = ds.target_values()?;
            let y: Vec<f64> = split.test.iter().map(|&r| t[r]).collect();
            bench::rmse(&y, &v)
        }
    };
    println!(
        "epochs,{}",
        ens.info
            .epochs
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    );
    println!("test_metric,{}", bench::fmt9(test));
    Ok(())
}

fn cmd_bench(
    errors: &Path,
    groups: Option<&Path>,
    agg: Agg,
    eps: f64,
    ci: bool,
    out: Option<&Path>,
) -> Result<()> {
    let table = BenchTable::load(errors, groups)?;
    let agg = match agg {
        Agg::Sgm => Aggregation::Sgm,
        Agg::Arith => Aggregation::Alt(AltAggregate::Arithmetic),
        Agg::Rank => Aggregation::Alt(AltAggregate::MeanRank),
        Agg::Norm => Aggregation::Alt(AltAggregate::Normalized),
    };
    let report = bench::report(&table, agg, eps, ci)?;
    match out {
        Some(p) => fs::write(p, report)?,
        None => print!("{report}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| match cli.command {
        Command::Train {
            data,
            schema,
            cfg,
            seed,
            out,
        } => cmd_train(&data, &schema, &cfg, seed, &out),
        Command::Predict { model, data, out } => cmd_predict(&model, &data, &out),
        Command::Evaluate {
            model,
            data,
            metric,
        } => cmd_evaluate(&model, &data, metric),
        Command::Hpo {
            data,
            schema,
            steps,
            seed,
            out_dir,
        } => cmd_hpo(&data, &schema, steps, seed, &out_dir, jobs > 1),
        Command::Ensemble {
            data,
            schema,
            cfg,
            mode,
            members,
            stopping,
            seed,
            out_dir,
        } => cmd_ensemble(
            &data, &schema, &cfg, mode, members, stopping, seed, &out_dir,
        ),
        Command::Bench {
            errors,
            groups,
            agg,
            eps,
            ci,
            out,
        } => cmd_bench(&errors, groups.as_deref(), agg, eps, ci, out.as_deref()),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
