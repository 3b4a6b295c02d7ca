//! Command-line front end: problem generation, single-run inference,
//! replicated coverage experiments, cross-problem percentile tables, bias
//! estimation, quantile-quantile export, and the resampling baseline.
//!
//! Every command is deterministic: the same command line with the same
//! seeds writes byte-identical files, regardless of `--jobs`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use lsa_core::problem::{
    logistic_problem, multiplicative_noise_problem, random_lsa_problem, random_regression_problem,
    realizable_td_problem,
};
use lsa_core::{
    empirical_bias, percentile_summary, qq_export, BootstrapConfig, ExperimentSpec, LsaProblem,
    Method, Problem, SummaryRow,
};

use lsa_cli::formats::{
    bias_csv, fmt_float, grid_csv, percentile_csv, qq_csv, raw_csv, read_problem_file,
    summary_csv, write_json, write_text, ProblemFile, ReportFile,
};
use lsa_cli::methods::{parse_method, parse_methods};
use lsa_cli::runner::{bootstrap_report, run_experiment, single_report};

#[derive(Parser)]
#[command(
    name = "lsa",
    version,
    about = "Constant-stepsize stochastic approximation on Markovian data: \
             batch-mean confidence intervals, stepsize extrapolation, and \
             coverage experiments",
    propagate_version = true
)]
struct Cli {
    /// Directory that relative output paths land in.
    #[arg(long, global = true, env = "LSA_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random linear problem and write it as JSON.
    GenProblem(GenProblemArgs),
    /// Run one method once and write an interval report.
    Infer(InferArgs),
    /// Replicated coverage experiment; writes raw.csv and summary.csv.
    Experiment(ExperimentArgs),
    /// Coverage percentiles across a grid of random problems; writes
    /// percentiles.csv and grid.csv.
    Percentiles(PercentilesArgs),
    /// Estimate the stationary bias of a constant-stepsize run.
    Bias(BiasArgs),
    /// Export sorted replicate means against normal quantiles.
    Qq(QqArgs),
    /// Resampling baseline on a stored shuffled trajectory.
    Bootstrap(BootstrapArgs),
}

/// Where the problem comes from: a JSON file, or the generator.
#[derive(Args)]
struct ProblemSource {
    /// Problem JSON file; overrides the generator flags.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// States in the generated chain.
    #[arg(long, default_value_t = 10)]
    states: usize,
    /// Iterate dimension of the generated problem.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    problem_seed: u64,
    /// Replace the chain with i.i.d. draws from its stationary law.
    #[arg(long)]
    iid: bool,
    /// Rescale the averaged dynamics to this spectral norm.
    #[arg(long)]
    norm: Option<f64>,
}

impl ProblemSource {
    fn load(&self) -> Result<(LsaProblem, Option<u64>)> {
        if let Some(path) = &self.problem {
            let file = read_problem_file(path)?;
            let problem = file.into_problem()?;
            return Ok((problem, file.seed));
        }
        let mut problem = random_lsa_problem(self.states, self.dim, self.problem_seed)?;
        if let Some(norm) = self.norm {
            problem = problem.with_dynamics_norm(norm)?;
        }
        if self.iid {
            problem = problem.with_iid_sampling()?;
        }
        Ok((problem, Some(self.problem_seed)))
    }
}

#[derive(Args)]
struct GenProblemArgs {
    /// States in the chain.
    #[arg(long, default_value_t = 10)]
    states: usize,
    /// Iterate dimension.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Replace the chain with i.i.d. draws from its stationary law.
    #[arg(long)]
    iid: bool,
    /// Rescale the averaged dynamics to this spectral norm.
    #[arg(long)]
    norm: Option<f64>,
    /// Output file.
    #[arg(short, long, default_value = "problem.json")]
    output: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    source: ProblemSource,
    /// Method token, like const:0.02, rr:0.2:0.02, dim:0.2:0.5, or
    /// bootstrap.
    #[arg(long, default_value = "const:0.2", conflicts_with = "alpha")]
    method: String,
    /// Shorthand for const:<alpha>.
    #[arg(long)]
    alpha: Option<f64>,
    /// Update steps.
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Batch count; the default is round(length^0.3).
    #[arg(long)]
    batches: Option<usize>,
    /// Interval miss probability q; intervals cover at level 1 - q.
    #[arg(long, default_value_t = 0.05)]
    confidence_q: f64,
    /// Data seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file.
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    source: ProblemSource,
    /// Comma-separated method tokens.
    #[arg(long)]
    methods: String,
    /// Update steps per run.
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Batch count; the default is round(length^0.3).
    #[arg(long)]
    batches: Option<usize>,
    /// Replicates.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Master seed; replicate r reads data substream r.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// One-based coordinate the summary reports coverage for.
    #[arg(long, default_value_t = 1)]
    coordinate: usize,
    /// Interval miss probability q.
    #[arg(long, default_value_t = 0.05)]
    confidence_q: f64,
    /// Worker threads for replicates; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for raw.csv and summary.csv.
    #[arg(short, long, default_value = ".")]
    output: PathBuf,
}

#[derive(Args)]
struct PercentilesArgs {
    /// Random problems in the grid.
    #[arg(long, default_value_t = 20)]
    problems: usize,
    /// Generator seed of the first problem; later problems increment it.
    #[arg(long, default_value_t = 101)]
    first_problem_seed: u64,
    /// States per generated chain.
    #[arg(long, default_value_t = 10)]
    states: usize,
    /// Iterate dimension.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Comma-separated method tokens.
    #[arg(long, default_value = "const:0.2,const:0.02,rr:0.2:0.02,dim:0.02:0.5")]
    methods: String,
    /// Update steps per run.
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Batch count; the default is round(length^0.3).
    #[arg(long)]
    batches: Option<usize>,
    /// Replicates per problem.
    #[arg(long, default_value_t = 50)]
    reps: usize,
    /// Master seed shared by every problem's experiment.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// One-based coordinate the summaries report coverage for.
    #[arg(long, default_value_t = 1)]
    coordinate: usize,
    /// Interval miss probability q.
    #[arg(long, default_value_t = 0.05)]
    confidence_q: f64,
    /// Worker threads for replicates; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory for percentiles.csv and grid.csv.
    #[arg(short, long, default_value = ".")]
    output: PathBuf,
}

#[derive(Args)]
struct BiasArgs {
    /// Problem family: lsa, mult-noise, td, regression, or logistic.
    #[arg(long, default_value = "lsa")]
    family: String,
    /// States in the generated chain (lsa, mult-noise, td, regression).
    #[arg(long, default_value_t = 10)]
    states: usize,
    /// Iterate dimension.
    #[arg(long, default_value_t = 5)]
    dim: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 2)]
    problem_seed: u64,
    /// Replace the chain with i.i.d. draws (lsa and mult-noise).
    #[arg(long)]
    iid: bool,
    /// Spectral norm for the averaged dynamics (lsa and mult-noise).
    #[arg(long)]
    norm: Option<f64>,
    /// Multiplier noise bound (mult-noise).
    #[arg(long, default_value_t = 0.05)]
    noise_bound: f64,
    /// Discount factor (td).
    #[arg(long, default_value_t = 0.5)]
    discount: f64,
    /// Observation noise standard deviation (regression).
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    /// Covariate autocorrelation (logistic).
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Constant stepsize.
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Update steps per replicate.
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Replicates.
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Master seed.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output file.
    #[arg(short, long, default_value = "bias.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct QqArgs {
    /// Problem JSON file; overrides the generator flags.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// States in the generated chain.
    #[arg(long, default_value_t = 5)]
    states: usize,
    /// Iterate dimension.
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 2)]
    problem_seed: u64,
    /// Replace the chain with i.i.d. draws from its stationary law.
    #[arg(long)]
    iid: bool,
    /// Constant stepsize.
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Update steps per replicate.
    #[arg(long, default_value_t = 100_000)]
    length: usize,
    /// Replicates.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Master seed.
    #[arg(long, default_value_t = 9)]
    seed: u64,
    /// Iterates dropped before averaging each replicate.
    #[arg(long, default_value_t = 100)]
    burn_in: usize,
    /// Output file.
    #[arg(short, long, default_value = "qq.csv")]
    output: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    #[command(flatten)]
    source: ProblemSource,
    /// States simulated and stored.
    #[arg(long, default_value_t = 1_000_000)]
    stored: usize,
    /// States drawn with replacement per replicate.
    #[arg(long, default_value_t = 10_000)]
    resample: usize,
    /// Bootstrap replicates.
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Interval miss probability q.
    #[arg(long, default_value_t = 0.05)]
    confidence_q: f64,
    /// Data seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Data substream the stored trajectory is drawn from.
    #[arg(long, default_value_t = 0)]
    stream: u64,
    /// Output file.
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code(&error))
        }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(core) = cause.downcast_ref::<lsa_core::Error>() {
            return match core {
                lsa_core::Error::Validation(_) | lsa_core::Error::Plan(_) => 2,
                lsa_core::Error::Numeric(_) => 3,
                lsa_core::Error::Internal(_) => 4,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 5;
        }
    }
    2
}

fn dispatch(cli: Cli) -> Result<()> {
    let out_dir = cli.out_dir;
    match cli.command {
        Command::GenProblem(args) => gen_problem(&out_dir, args),
        Command::Infer(args) => infer(&out_dir, args),
        Command::Experiment(args) => experiment(&out_dir, args),
        Command::Percentiles(args) => percentiles(&out_dir, args),
        Command::Bias(args) => bias(&out_dir, args),
        Command::Qq(args) => qq(&out_dir, args),
        Command::Bootstrap(args) => bootstrap(&out_dir, args),
    }
}

fn resolve(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

fn gen_problem(out_dir: &Path, args: GenProblemArgs) -> Result<()> {
    let mut problem = random_lsa_problem(args.states, args.dim, args.seed)?;
    if let Some(norm) = args.norm {
        problem = problem.with_dynamics_norm(norm)?;
    }
    if args.iid {
        problem = problem.with_iid_sampling()?;
    }
    let path = resolve(out_dir, &args.output);
    write_json(&path, &ProblemFile::from_problem(&problem, Some(args.seed)))?;
    println!(
        "wrote {} ({} states, dimension {}, seed {})",
        path.display(),
        args.states,
        args.dim,
        args.seed
    );
    Ok(())
}

fn infer(out_dir: &Path, args: InferArgs) -> Result<()> {
    let (problem, _) = args.source.load()?;
    let problem = Problem::Linear(problem);
    let method = match args.alpha {
        Some(alpha) => Method::Constant { alpha },
        None => parse_method(&args.method, args.length, args.confidence_q)?,
    };
    let (report, plan) = single_report(
        &problem,
        &method,
        args.length,
        args.batches,
        args.confidence_q,
        args.seed,
        0,
    )?;
    let bootstrap_config = match &method {
        Method::Bootstrap { config } => Some(config.clone()),
        _ => None,
    };
    let path = resolve(out_dir, &args.output);
    write_json(
        &path,
        &ReportFile::new(method.label(), &report, plan, bootstrap_config.as_ref()),
    )?;
    print_interval_line(&method.label(), &report);
    println!("wrote {}", path.display());
    Ok(())
}

fn print_interval_line(label: &str, report: &lsa_core::InferenceReport) {
    let first_lower = report.ci_lower[0];
    let first_upper = report.ci_upper[0];
    println!(
        "{label}: level {} interval for coordinate 1 is [{}, {}]",
        fmt_float(report.level),
        fmt_float(first_lower),
        fmt_float(first_upper)
    );
}

fn experiment(out_dir: &Path, args: ExperimentArgs) -> Result<()> {
    let (problem, seed_label) = args.source.load()?;
    let problem = Problem::Linear(problem);
    let spec = experiment_spec(
        &args.methods,
        args.length,
        args.batches,
        args.reps,
        args.seed,
        args.coordinate,
        args.confidence_q,
    )?;
    let outcome = run_experiment(&problem, &spec, args.jobs)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    let dir = resolve(out_dir, &args.output);
    let raw_path = dir.join("raw.csv");
    let summary_path = dir.join("summary.csv");
    write_text(&raw_path, &raw_csv(seed_label.unwrap_or(0), &outcome.trials, problem.dim()))?;
    write_text(&summary_path, &summary_csv(&outcome.summaries))?;
    for row in &outcome.summaries {
        print_summary_line(row);
    }
    println!("wrote {}", raw_path.display());
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn experiment_spec(
    methods: &str,
    length: usize,
    batches: Option<usize>,
    reps: usize,
    seed: u64,
    coordinate: usize,
    confidence_q: f64,
) -> Result<ExperimentSpec> {
    let methods = parse_methods(methods, length, confidence_q)?;
    let mut spec = ExperimentSpec::new(methods, length, reps, seed);
    spec.batch_count = batches;
    spec.confidence_q = confidence_q;
    spec.target_coordinate = coordinate
        .checked_sub(1)
        .ok_or_else(|| anyhow::anyhow!("--coordinate is one-based; 0 is out of range"))?;
    Ok(spec)
}

fn print_summary_line(row: &SummaryRow) {
    if row.failed {
        println!("{}: every replicate diverged", row.method);
        return;
    }
    println!(
        "{}: coverage {:.1}% ({} of {} replicates, {} diverged), width {:.5}, l2 error {:.5}",
        row.method,
        row.coverage_percent,
        row.covered,
        row.replicates - row.diverged,
        row.diverged,
        row.width_mean,
        row.l2_mean
    );
}

fn percentiles(out_dir: &Path, args: PercentilesArgs) -> Result<()> {
    if args.problems == 0 {
        bail!("--problems must be at least 1");
    }
    let spec = experiment_spec(
        &args.methods,
        args.length,
        args.batches,
        args.reps,
        args.seed,
        args.coordinate,
        args.confidence_q,
    )?;
    let mut seeds = Vec::with_capacity(args.problems);
    let mut per_problem: Vec<Vec<SummaryRow>> = Vec::with_capacity(args.problems);
    for index in 0..args.problems {
        let problem_seed = args.first_problem_seed + index as u64;
        let problem =
            Problem::Linear(random_lsa_problem(args.states, args.dim, problem_seed)?);
        let outcome = run_experiment(&problem, &spec, args.jobs)?;
        for warning in &outcome.warnings {
            eprintln!("warning: problem {problem_seed}: {warning}");
        }
        seeds.push(problem_seed);
        per_problem.push(outcome.summaries);
    }
    let rows = percentile_summary(&per_problem)?;
    let dir = resolve(out_dir, &args.output);
    let percentile_path = dir.join("percentiles.csv");
    let grid_path = dir.join("grid.csv");
    write_text(&percentile_path, &percentile_csv(&rows))?;
    write_text(&grid_path, &grid_csv(&seeds, &per_problem))?;
    for row in rows.iter().filter(|r| r.level == 50) {
        println!(
            "{}: median coverage {:.1}%, median width {:.5}, median l2 error {:.5}",
            row.method, row.coverage_percent, row.ci_width, row.l2_error
        );
    }
    println!("wrote {}", percentile_path.display());
    println!("wrote {}", grid_path.display());
    Ok(())
}

fn bias_problem(args: &BiasArgs) -> Result<Problem> {
    match args.family.as_str() {
        "lsa" => {
            let mut problem = random_lsa_problem(args.states, args.dim, args.problem_seed)?;
            if let Some(norm) = args.norm {
                problem = problem.with_dynamics_norm(norm)?;
            }
            if args.iid {
                problem = problem.with_iid_sampling()?;
            }
            Ok(Problem::Linear(problem))
        }
        "mult-noise" => {
            let mut base = random_lsa_problem(args.states, args.dim, args.problem_seed)?;
            if args.iid {
                base = base.with_iid_sampling()?;
            }
            if let Some(norm) = args.norm {
                base = base.with_dynamics_norm(norm)?;
            }
            let problem = multiplicative_noise_problem(&base, args.noise_bound)?;
            let residuals = problem.zero_bias_residuals()?;
            let worst = residuals.iter().cloned().fold(0.0, f64::max);
            println!("zero-bias residual: {}", fmt_float(worst));
            Ok(Problem::MultiplicativeNoise(problem))
        }
        "td" => {
            let problem =
                realizable_td_problem(args.states, args.dim, args.discount, args.problem_seed)?;
            let residuals = problem.backward_conditional_residuals()?;
            let worst = residuals.iter().cloned().fold(0.0, f64::max);
            println!("zero-bias residual: {}", fmt_float(worst));
            Ok(Problem::TemporalDifference(problem))
        }
        "regression" => Ok(Problem::Regression(random_regression_problem(
            args.states,
            args.dim,
            args.noise_sd,
            args.problem_seed,
        )?)),
        "logistic" => {
            Ok(Problem::Logistic(logistic_problem(args.dim, args.rho, args.problem_seed)?))
        }
        other => bail!(
            "unknown family '{other}'; expected lsa, mult-noise, td, regression, or logistic"
        ),
    }
}

fn bias(out_dir: &Path, args: BiasArgs) -> Result<()> {
    let problem = bias_problem(&args)?;
    let report = empirical_bias(&problem, args.alpha, args.length, args.reps, args.seed)?;
    let path = resolve(out_dir, &args.output);
    write_text(&path, &bias_csv(&report))?;
    let worst_ratio = report
        .bias
        .iter()
        .zip(report.standard_error.iter())
        .map(|(b, se)| (b / se).abs())
        .fold(0.0, f64::max);
    println!(
        "{} family at stepsize {}: worst |bias|/se {:.2} over {} replicates ({} diverged)",
        problem.family_name(),
        fmt_float(args.alpha),
        worst_ratio,
        report.replicates_used,
        report.diverged
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn qq(out_dir: &Path, args: QqArgs) -> Result<()> {
    let problem = match &args.problem {
        Some(path) => {
            let file = read_problem_file(path)?;
            file.into_problem()?
        }
        None => {
            let mut problem = random_lsa_problem(args.states, args.dim, args.problem_seed)?;
            if args.iid {
                problem = problem.with_iid_sampling()?;
            }
            problem
        }
    };
    let problem = Problem::Linear(problem);
    let data = qq_export(&problem, args.alpha, args.length, args.reps, args.seed, args.burn_in)?;
    let path = resolve(out_dir, &args.output);
    write_text(&path, &qq_csv(&data))?;
    let worst = data.correlations.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "quantile correlation per coordinate: [{}] (worst {:.5}, {} replicates, {} diverged)",
        data.correlations.iter().map(|c| format!("{c:.5}")).collect::<Vec<_>>().join(", "),
        worst,
        data.replicates_used,
        data.diverged
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn bootstrap(out_dir: &Path, args: BootstrapArgs) -> Result<()> {
    let (problem, _) = args.source.load()?;
    let problem = Problem::Linear(problem);
    let config = BootstrapConfig {
        trajectory_length: args.stored,
        resample_size: args.resample,
        replicates: args.reps,
        confidence_q: args.confidence_q,
    };
    let report = bootstrap_report(&problem, &config, args.seed, args.stream)?;
    let path = resolve(out_dir, &args.output);
    write_json(&path, &ReportFile::new(String::from("bootstrap"), &report, None, Some(&config)))?;
    print_interval_line("bootstrap", &report);
    println!("wrote {}", path.display());
    Ok(())
}
