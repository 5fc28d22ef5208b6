//! Command-line front end. `run` parses arguments, executes one subcommand and
//! returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | runtime failure (bad data, invalid parameters) |
//! | 2 | usage error |
//! | 3 | a verification check failed |

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use iir::bench::{
    self, baseline_comparison, error_curve, estimate_rate, run_verification, DataSource, ExperimentConfig,
    RateConfig, RateMode, VerifyConfig,
};
use iir::iir::GammaRange;
use iir::io::{curve_to_csv, write_atomic, ResultEnvelope, TargetColumn};
use iir::kernel::KernelSpec;
use iir::model::{DataSet, Task};
use iir::stopping::{holdout_select, stopping_time, EpochTrainer, Method, StepPolicy, StoppingRule};
use iir::synth::{sample_trig, Preset, TrigProblem};

#[derive(Debug, Parser)]
#[command(
    name = "iir",
    version,
    about = "Early-stopped incremental gradient descent for least squares",
    arg_required_else_help = true
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
struct Global {
    /// Seed for every random choice; outputs are a function of it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Step size: `auto` (1/kappa), a number, or `<c>/kappa`.
    #[arg(long, global = true, default_value = "auto")]
    gamma: String,
    /// Allow step sizes up to n/kappa instead of 1/kappa.
    #[arg(long, global = true)]
    relaxed_step: bool,
    /// Kernel (`linear`, `gaussian:<sigma>`, `polynomial:<p>[,<c>]`, `trig:<d>`);
    /// without it the linear model is fit in the primal.
    #[arg(long, global = true)]
    kernel: Option<String>,
    /// Stopping rule: `fixed:<T>`, `norm:<r>`, `risk:<r>`, `nonattainable`,
    /// `holdout[:<fraction>[,<max_epochs>]]`.
    #[arg(long, global = true)]
    rule: Option<String>,
    /// Write the result here (atomically) instead of standard output.
    #[arg(long, global = true)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with a stopping rule and report coefficients and errors.
    Fit(FitArgs),
    /// Training, validation and test error after every epoch.
    Curve(CurveArgs),
    /// Fit the convergence rate of the stopped estimator over a grid of n.
    Rates(RatesArgs),
    /// Check bounds, operator identities and concentration frequencies.
    Verify(VerifyArgs),
    /// Compare hold-out-stopped KIIR and KIR with tuned kernel ridge regression.
    Bench(BenchArgs),
    /// Write a generated data set as CSV.
    Synth(SynthArgs),
}

#[derive(Debug, Args, Serialize)]
struct SourceArgs {
    /// Synthetic problem: `trig-d<k>[:noise=<sd>]` or `source:r=<r>[,decay=..,d=..,noise=..,norm=..,layout=..]`.
    #[arg(long, conflicts_with_all = ["csv", "libsvm"])]
    preset: Option<String>,
    /// CSV data file.
    #[arg(long, conflicts_with = "libsvm")]
    csv: Option<PathBuf>,
    /// LIBSVM data file.
    #[arg(long)]
    libsvm: Option<PathBuf>,
    /// CSV target column: `last`, `first`, or a 0-based index.
    #[arg(long, default_value = "last")]
    target: String,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
    /// How outputs are scored.
    #[arg(long, value_enum, default_value_t = TaskArg::Regression)]
    task: TaskArg,
    /// Training sample size for presets.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Test sample size for presets.
    #[arg(long, default_value_t = bench::DEFAULT_TEST_SIZE)]
    test_size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Regression,
    Classification,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Regression => Task::Regression,
            TaskArg::Classification => Task::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Incremental,
    Batch,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Incremental => Method::Incremental,
            MethodArg::Batch => Method::Batch,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Incremental)]
    method: MethodArg,
    /// Epoch budget for the hold-out rule when `--rule holdout` gives none.
    #[arg(long, default_value_t = 100)]
    epochs: usize,
}

#[derive(Debug, Args, Serialize)]
struct CurveArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Incremental)]
    method: MethodArg,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Fraction of the training sample used for the validation column.
    #[arg(long, default_value_t = iir::stopping::DEFAULT_VALIDATION_FRACTION)]
    validation_fraction: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Norm,
    Risk,
}

#[derive(Debug, Args, Serialize)]
struct RatesArgs {
    /// Source problem preset.
    #[arg(long, default_value = "source:r=1.5")]
    preset: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Norm)]
    mode: ModeArg,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096,8192")]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    /// Source problem preset.
    #[arg(long, default_value = "source:r=1.5")]
    preset: String,
    /// Epochs of the population iteration checked against the bounds.
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Sample size setting the inner step gamma/n.
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Random instances per identity check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    /// Sample size for the concentration check.
    #[arg(long, default_value_t = 200)]
    concentration_n: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 500)]
    trials: usize,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    source: SourceArgs,
    /// Number of seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Epoch budget for hold-out selection.
    #[arg(long, default_value_t = 200)]
    epochs: usize,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// `trig-d<k>` writes dictionary features, `source:...` the support coordinates.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// For trig presets: write the scalar input x instead of its features.
    #[arg(long)]
    raw: bool,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    configure_threads();
    exit_code(execute(&cli))
}

fn exit_code(result: anyhow::Result<Outcome>) -> i32 {
    match result {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::VerificationFailed) => {
            eprintln!("verification failed");
            3
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var("IIR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // Fails only if the pool already exists, in which case it stays as is.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

enum Outcome {
    Ok,
    VerificationFailed,
}

struct Settings {
    step: StepPolicy,
    range: GammaRange,
    kernel: Option<KernelSpec>,
    rule: Option<StoppingRule>,
}

fn settings(g: &Global) -> anyhow::Result<Settings> {
    Ok(Settings {
        step: g.gamma.parse()?,
        range: if g.relaxed_step { GammaRange::Relaxed } else { GammaRange::Strict },
        kernel: g.kernel.as_deref().map(str::parse).transpose()?,
        rule: g.rule.as_deref().map(str::parse).transpose()?,
    })
}

fn data_source(args: &SourceArgs) -> anyhow::Result<DataSource> {
    let task: Task = args.task.into();
    match (&args.preset, &args.csv, &args.libsvm) {
        (Some(p), None, None) => {
            if task == Task::Classification {
                bail!("presets are regression problems; --task classification needs a data file");
            }
            Ok(DataSource::Preset { preset: p.parse()? })
        }
        (None, Some(path), None) => Ok(DataSource::Csv {
            path: path.clone(),
            target: args.target.parse::<TargetColumn>()?,
            header: args.header,
            task,
        }),
        (None, None, Some(path)) => Ok(DataSource::Libsvm { path: path.clone(), task }),
        (None, None, None) => bail!("one of --preset, --csv or --libsvm is required"),
        _ => bail!("--preset, --csv and --libsvm are mutually exclusive"),
    }
}

fn source_preset(s: &str) -> anyhow::Result<iir::synth::SpectrumSpec> {
    match s.parse::<Preset>()? {
        Preset::Source { spec, .. } => Ok(spec),
        Preset::Trig { .. } => bail!("this command needs a source:r=... preset, got '{s}'"),
    }
}

fn emit(global: &Global, text: &str) -> anyhow::Result<()> {
    match &global.out {
        Some(path) => write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn envelope<T: Serialize>(
    name: &str,
    cli: &Cli,
    args: &impl Serialize,
    metrics: T,
    started: Instant,
) -> anyhow::Result<String> {
    let config = serde_json::json!({ "global": &cli.global, "command": args });
    Ok(ResultEnvelope::new(name, config, cli.global.seed, metrics, started.elapsed()).to_json()?)
}

fn execute(cli: &Cli) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let g = &cli.global;
    let s = settings(g)?;
    match &cli.command {
        Command::Fit(args) => {
            let text = envelope("fit", cli, args, fit(args, &s, g.seed)?, started)?;
            emit(g, &text)?;
        }
        Command::Curve(args) => {
            let mut config = ExperimentConfig::new(data_source(&args.source)?);
            config.kernel = s.kernel;
            config.method = args.method.into();
            config.step = s.step;
            config.range = s.range;
            config.seed = g.seed;
            config.epochs = args.epochs;
            config.validation_fraction = args.validation_fraction;
            config.test_size = args.source.test_size;
            config.grid = vec![args.source.n];
            let (curve, metadata) = error_curve(&config, args.source.n)?;
            let text = match g.format.unwrap_or(Format::Csv) {
                Format::Csv => curve_to_csv(&curve),
                Format::Json => envelope(
                    "curve",
                    cli,
                    args,
                    serde_json::json!({ "curve": curve, "problem": metadata }),
                    started,
                )?,
            };
            emit(g, &text)?;
        }
        Command::Rates(args) => {
            let spec = source_preset(&args.preset)?;
            let mode = match args.mode {
                ModeArg::Norm => RateMode::Norm,
                ModeArg::Risk => RateMode::Risk,
            };
            let mut config = RateConfig::new(spec, mode);
            config.grid = args.grid.clone();
            config.replicates = args.replicates;
            config.rule = s.rule;
            config.step = s.step;
            config.seed = g.seed;
            let report = estimate_rate(&config)?;
            let text = match g.format.unwrap_or(Format::Json) {
                Format::Json => envelope("rates", cli, args, &report, started)?,
                Format::Csv => {
                    let mut t = String::from("n,epochs,mean_error,median_error\n");
                    for p in &report.points {
                        t.push_str(&format!("{},{},{},{}\n", p.n, p.epochs, p.mean_error, p.median_error));
                    }
                    t
                }
            };
            emit(g, &text)?;
        }
        Command::Verify(args) => {
            let mut config = VerifyConfig::new(source_preset(&args.preset)?);
            config.epochs = args.epochs;
            config.n = args.n;
            config.step = s.step;
            config.range = s.range;
            config.identity_instances = args.instances;
            config.concentration_n = args.concentration_n;
            config.concentration_delta = args.delta;
            config.concentration_trials = args.trials;
            config.seed = g.seed;
            let report = run_verification(&config)?;
            let passed = report.passed;
            emit(g, &envelope("verify", cli, args, &report, started)?)?;
            if !passed {
                return Ok(Outcome::VerificationFailed);
            }
        }
        Command::Bench(args) => {
            let mut config = ExperimentConfig::new(data_source(&args.source)?);
            config.kernel = s.kernel;
            config.step = s.step;
            config.range = s.range;
            config.seed = g.seed;
            config.epochs = args.epochs;
            config.test_size = args.source.test_size;
            config.grid = vec![args.source.n];
            config.rule = match s.rule {
                Some(r @ StoppingRule::Holdout { .. }) => r,
                Some(other) => bail!("bench selects epochs by hold-out; got rule {other}"),
                None => StoppingRule::Holdout {
                    validation_fraction: config.validation_fraction,
                    max_epochs: args.epochs,
                },
            };
            if let StoppingRule::Holdout { validation_fraction, .. } = config.rule {
                config.validation_fraction = validation_fraction;
            }
            let seeds: Vec<u64> = (0..args.seeds).map(|k| g.seed + k).collect();
            let report = baseline_comparison(&config, args.source.n, &seeds)?;
            let text = match g.format.unwrap_or(Format::Json) {
                Format::Json => envelope("bench", cli, args, &report, started)?,
                Format::Csv => {
                    let mut t = String::from("method,metric,median_error\n");
                    for row in &report.rows {
                        t.push_str(&format!("{},{},{}\n", row.method, row.metric, row.median_error));
                    }
                    t
                }
            };
            emit(g, &text)?;
        }
        Command::Synth(args) => emit(g, &synth(args, g.seed)?)?,
    }
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct FitReport {
    model: &'static str,
    kernel: Option<KernelSpec>,
    rule: StoppingRule,
    gamma: f64,
    epochs: usize,
    n_train: usize,
    n_test: usize,
    metric: &'static str,
    train_error: f64,
    test_error: f64,
    /// w for the primal model, dual coefficients otherwise.
    coefficients: Vec<f64>,
    holdout_curve: Option<Vec<(usize, f64)>>,
    problem: serde_json::Value,
}

fn fit(args: &FitArgs, s: &Settings, seed: u64) -> anyhow::Result<FitReport> {
    let source = data_source(&args.source)?;
    let data = source.realize(args.source.n, args.source.test_size, seed)?;
    let rule = s.rule.unwrap_or(StoppingRule::Holdout {
        validation_fraction: iir::stopping::DEFAULT_VALIDATION_FRACTION,
        max_epochs: args.epochs,
    });
    let method: Method = args.method.into();
    let make = || {
        let t = match s.kernel {
            Some(k) => iir::stopping::Trainer::kernel(k, method),
            None => iir::stopping::Trainer::linear(method),
        };
        t.with_step(s.step, s.range)
    };
    let (epochs, holdout_curve) = match rule {
        StoppingRule::Holdout { .. } => {
            let sel = holdout_select(&data.train, &mut make(), &rule, seed)?;
            (sel.t_selected, Some(sel.curve))
        }
        _ => (stopping_time(&rule, data.train.n())?, None),
    };
    let mut trainer = make();
    trainer.begin(&data.train, &[&data.test])?;
    for _ in 0..epochs {
        trainer.advance()?;
    }
    let task = data.train.task();
    Ok(FitReport {
        model: if s.kernel.is_some() { "dual" } else { "primal" },
        kernel: s.kernel,
        rule,
        gamma: trainer.gamma(),
        epochs,
        n_train: data.train.n(),
        n_test: data.test.n(),
        metric: task.metric_name(),
        train_error: task.score(&trainer.train_predictions(), data.train.outputs())?,
        test_error: task.score(&trainer.probe_predictions(0), data.test.outputs())?,
        coefficients: trainer.coefficients().map(|c| c.as_slice().to_vec()).unwrap_or_default(),
        holdout_curve,
        problem: data.metadata,
    })
}

fn dataset_csv(data: &DataSet, names: &[String]) -> String {
    let mut out = names.join(",");
    out.push_str(",y\n");
    for i in 0..data.n() {
        for v in data.input(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", data.output(i)));
    }
    out
}

fn synth(args: &SynthArgs, seed: u64) -> anyhow::Result<String> {
    let preset: Preset = args.preset.parse()?;
    let data = match &preset {
        Preset::Trig { d, noise_sd } => {
            let problem = TrigProblem::random(*d, *noise_sd, seed)?;
            if args.raw {
                iir::synth::sample_trig_raw(&problem, args.n, seed)?
            } else {
                sample_trig(&problem, args.n, seed)?
            }
        }
        Preset::Source { spec, .. } => {
            if args.raw {
                bail!("--raw applies to trig presets only");
            }
            let problem = iir::synth::make_source_problem(spec, seed)?;
            problem.distribution.sample(args.n, &mut iir::rng::stream(seed, 1))?
        }
    };
    let names: Vec<String> = if args.raw { vec!["x".into()] } else { (1..=data.d()).map(|k| format!("x{k}")).collect() };
    if data.n() == 0 {
        return Err(anyhow!("empty data set"));
    }
    Ok(dataset_csv(&data, &names))
}
