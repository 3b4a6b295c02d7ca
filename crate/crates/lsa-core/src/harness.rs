//! Replicated Monte-Carlo experiments over the run engine: coupled
//! multi-method trials, coverage summaries, cross-problem percentile
//! tables, constant-stepsize bias estimation, and quantile-quantile
//! export for normality checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::bootstrap::{bootstrap_inference, BootstrapConfig};
use crate::engine::{run_coupled, IterateSink, MeanSink, RunConfig, StepsizeSchedule};
use crate::error::{Error, Result};
use crate::extrapolation::{rr_combine, RrSchedule};
use crate::inference::{
    diminishing_batch_bounds, normal_quantile, vector_mean, BatchAccumulator, BatchMeans,
    BatchPlan, BoundedBatchAccumulator, InferenceReport,
};
use crate::problem::Problem;

/// Percentile levels reported by [`percentile_summary`].
pub const PERCENTILE_LEVELS: [u8; 5] = [10, 25, 50, 75, 90];

/// Replicate count below which coverage standard errors are flagged as
/// unreliable.
pub const RELIABLE_REPLICATES: usize = 30;

/// One inference method evaluated inside a trial.
#[derive(Debug, Clone)]
pub enum Method {
    /// Constant stepsize with equal-batch intervals.
    Constant { alpha: f64 },
    /// Extrapolation across coupled constant-stepsize runs.
    Extrapolated { schedule: RrSchedule },
    /// Polynomially decaying stepsize `base * k^(-exponent)` with growing
    /// batches.
    Diminishing { base: f64, exponent: f64 },
    /// Resampling a stored shuffled trajectory; draws its own data.
    Bootstrap { config: BootstrapConfig },
}

impl Method {
    /// Stable tag used in result rows and CSV output.
    pub fn label(&self) -> String {
        match self {
            Method::Constant { alpha } => format!("const:{alpha}"),
            Method::Extrapolated { schedule } => {
                let mut label = String::from("rr");
                for alpha in schedule.stepsizes() {
                    label.push(':');
                    label.push_str(&format!("{alpha}"));
                }
                label
            }
            Method::Diminishing { base, exponent } => format!("dim:{base}:{exponent}"),
            Method::Bootstrap { .. } => String::from("bootstrap"),
        }
    }
}

/// Description of a replicated coverage experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    /// Update steps per run.
    pub total_steps: usize,
    /// Batch count for the fixed plan; `None` uses `round(T^0.3)`.
    pub batch_count: Option<usize>,
    pub replicates: usize,
    /// Master seed; replicate `r` reads the `(seed, Trajectory, r)`
    /// substream.
    pub seed: u64,
    /// Interval miss probability.
    pub confidence_q: f64,
    /// Zero-based coordinate whose interval the summary reports.
    pub target_coordinate: usize,
}

impl ExperimentSpec {
    pub fn new(methods: Vec<Method>, total_steps: usize, replicates: usize, seed: u64) -> Self {
        Self {
            methods,
            total_steps,
            batch_count: None,
            replicates,
            seed,
            confidence_q: 0.05,
            target_coordinate: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Validation("at least one method is required".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Validation("at least one replicate is required".into()));
        }
        if !(self.confidence_q > 0.0 && self.confidence_q < 1.0) {
            return Err(Error::Validation(format!(
                "miss probability {} must lie in (0, 1)",
                self.confidence_q
            )));
        }
        Ok(())
    }

    /// The equal-batch plan shared by the constant-stepsize methods.
    pub fn plan(&self) -> Result<BatchPlan> {
        BatchPlan::with_defaults(self.total_steps, self.batch_count)
    }
}

/// Per-method metrics from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub method: String,
    /// `||point estimate - target||_2`; NaN when diverged.
    pub l2_error: f64,
    /// Per-coordinate interval widths; NaN when diverged.
    pub ci_widths: Vec<f64>,
    /// Per-coordinate flags for the target lying inside the interval.
    pub covered: Vec<bool>,
    pub diverged: bool,
    /// Fold of the consumed data stream; `None` for diverged methods and
    /// for methods that draw their own data.
    pub data_checksum: Option<u64>,
}

/// Aggregate over replicates for one method.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub l2_mean: f64,
    pub l2_se: f64,
    /// Mean interval width of the reported coordinate.
    pub width_mean: f64,
    pub width_se: f64,
    /// Percent of non-diverged replicates covering the target coordinate.
    pub coverage_percent: f64,
    /// Binomial standard error of the coverage, in percentage points.
    pub coverage_se: f64,
    pub covered: usize,
    pub diverged: usize,
    pub replicates: usize,
    /// Every replicate diverged; the metric fields are NaN.
    pub failed: bool,
}

/// Raw per-replicate results in replicate order plus per-method summaries.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub trials: Vec<Vec<TrialResult>>,
    pub summaries: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

/// Percentile of one metric across problems, for one method.
#[derive(Debug, Clone)]
pub struct PercentileRow {
    pub method: String,
    pub level: u8,
    pub l2_error: f64,
    pub ci_width: f64,
    pub coverage_percent: f64,
}

/// Constant-stepsize bias of the post-burn-in mean, averaged across
/// replicates.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub bias: DVector<f64>,
    pub standard_error: DVector<f64>,
    pub replicates_used: usize,
    pub diverged: usize,
}

/// Per-coordinate sorted standardized replicate means paired with normal
/// quantiles.
#[derive(Debug, Clone)]
pub struct QqData {
    /// One `(sample_quantile, normal_quantile)` list per coordinate.
    pub pairs: Vec<Vec<(f64, f64)>>,
    /// Pearson correlation of the paired quantiles, per coordinate.
    pub correlations: Vec<f64>,
    pub replicates_used: usize,
    pub diverged: usize,
}

/// Runs every method of `spec` for one replicate. All constant stepsizes,
/// including the extrapolation constituents, share a single coupled run;
/// diminishing methods replay the same data stream; the bootstrap draws
/// its own. Divergence is recorded per method, never propagated as an
/// error.
pub fn run_trial(problem: &Problem, spec: &ExperimentSpec, replicate: u64) -> Result<Vec<TrialResult>> {
    spec.validate()?;
    let dim = problem.dim();
    if spec.target_coordinate >= dim {
        return Err(Error::Validation(format!(
            "target coordinate {} out of range for dimension {dim}",
            spec.target_coordinate
        )));
    }
    let plan = spec.plan()?;
    let target = problem.target();

    let mut alphas: Vec<f64> = Vec::new();
    for method in &spec.methods {
        match method {
            Method::Constant { alpha } => add_distinct(&mut alphas, *alpha),
            Method::Extrapolated { schedule } => {
                for &alpha in schedule.stepsizes() {
                    add_distinct(&mut alphas, alpha);
                }
            }
            _ => {}
        }
    }

    let mut config = RunConfig::new(spec.total_steps, spec.seed);
    config.replicate = replicate;

    let mut constant_means: Vec<Option<BatchMeans>> = Vec::new();
    let mut constant_checksums: Vec<u64> = Vec::new();
    if !alphas.is_empty() {
        let schedules = alphas
            .iter()
            .map(|&alpha| StepsizeSchedule::constant(alpha))
            .collect::<Result<Vec<_>>>()?;
        let mut accumulators: Vec<BatchAccumulator> =
            alphas.iter().map(|_| BatchAccumulator::new(plan, dim)).collect();
        let mut sinks: Vec<&mut dyn IterateSink> =
            accumulators.iter_mut().map(|a| a as &mut dyn IterateSink).collect();
        let outcomes = run_coupled(problem, &schedules, &config, &mut sinks)?;
        drop(sinks);
        for (accumulator, outcome) in accumulators.into_iter().zip(&outcomes) {
            constant_means.push(if outcome.diverged_at.is_none() {
                Some(accumulator.finish()?)
            } else {
                None
            });
            constant_checksums.push(outcome.data_checksum);
        }
    }

    let mut results = Vec::with_capacity(spec.methods.len());
    for method in &spec.methods {
        let result = match method {
            Method::Constant { alpha } => {
                let index = position_of(&alphas, *alpha);
                match &constant_means[index] {
                    Some(means) => finished_result(
                        method.label(),
                        &InferenceReport::from_batch_means(means, spec.confidence_q)?,
                        target,
                        Some(constant_checksums[index]),
                    ),
                    None => diverged_result(method.label(), dim),
                }
            }
            Method::Extrapolated { schedule } => {
                let indices: Vec<usize> =
                    schedule.stepsizes().iter().map(|&a| position_of(&alphas, a)).collect();
                if indices.iter().any(|&i| constant_means[i].is_none()) {
                    diverged_result(method.label(), dim)
                } else {
                    let runs: Vec<BatchMeans> = indices
                        .iter()
                        .map(|&i| constant_means[i].clone().expect("survival checked above"))
                        .collect();
                    let combined = rr_combine(&runs, schedule)?;
                    finished_result(
                        method.label(),
                        &InferenceReport::from_batch_means(&combined, spec.confidence_q)?,
                        target,
                        Some(constant_checksums[indices[0]]),
                    )
                }
            }
            Method::Diminishing { base, exponent } => {
                let bounds = diminishing_batch_bounds(spec.total_steps, plan.batch_count, *exponent)?;
                let mut accumulator = BoundedBatchAccumulator::new(bounds, dim)?;
                let schedule = StepsizeSchedule::polynomial(*base, *exponent)?;
                let mut sinks: [&mut dyn IterateSink; 1] = [&mut accumulator];
                let outcomes =
                    run_coupled(problem, core::slice::from_ref(&schedule), &config, &mut sinks)?;
                if outcomes[0].diverged_at.is_some() {
                    diverged_result(method.label(), dim)
                } else {
                    let weighted = accumulator.finish()?;
                    finished_result(
                        method.label(),
                        &InferenceReport::from_weighted(&weighted, spec.confidence_q)?,
                        target,
                        Some(outcomes[0].data_checksum),
                    )
                }
            }
            Method::Bootstrap { config: bootstrap_config } => {
                let linear = match problem {
                    Problem::Linear(p) => p,
                    _ => {
                        return Err(Error::Validation(format!(
                            "the bootstrap needs a finite linear problem, got the {} family",
                            problem.family_name()
                        )))
                    }
                };
                let report = bootstrap_inference(linear, bootstrap_config, spec.seed, replicate)?;
                finished_result(method.label(), &report, target, None)
            }
        };
        results.push(result);
    }

    let mut checksums = results.iter().filter_map(|r| r.data_checksum);
    if let Some(first) = checksums.next() {
        if checksums.any(|c| c != first) {
            return Err(Error::Internal("coupled runs consumed different data streams".into()));
        }
    }
    Ok(results)
}

/// Runs all replicates sequentially and aggregates them. Replicates are
/// independent by construction (each reads its own substream), so callers
/// may instead run [`run_trial`] concurrently and reduce with
/// [`summarize`]; the aggregate is identical either way.
pub fn coverage_experiment(problem: &Problem, spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let mut warnings = Vec::new();
    if spec.replicates < RELIABLE_REPLICATES {
        warnings.push(format!(
            "{} replicates give unreliable standard errors; use at least {RELIABLE_REPLICATES}",
            spec.replicates
        ));
    }
    let trials = (0..spec.replicates)
        .map(|r| run_trial(problem, spec, r as u64))
        .collect::<Result<Vec<_>>>()?;
    let summaries = summarize(&trials, spec)?;
    Ok(ExperimentOutcome { trials, summaries, warnings })
}

/// Deterministic reduce over replicate-ordered trial results. Diverged
/// replicates are excluded from the metric means but counted; a method
/// whose replicates all diverged is marked failed with NaN metrics.
pub fn summarize(trials: &[Vec<TrialResult>], spec: &ExperimentSpec) -> Result<Vec<SummaryRow>> {
    if trials.is_empty() {
        return Err(Error::Validation("no trial results to summarize".into()));
    }
    if trials.iter().any(|row| row.len() != spec.methods.len()) {
        return Err(Error::Validation("trial rows disagree with the method list".into()));
    }
    let coordinate = spec.target_coordinate;
    let mut rows = Vec::with_capacity(spec.methods.len());
    for (index, method) in spec.methods.iter().enumerate() {
        let label = method.label();
        let mut l2 = Vec::new();
        let mut widths = Vec::new();
        let mut covered = 0usize;
        let mut diverged = 0usize;
        for replicate in trials {
            let result = &replicate[index];
            if result.method != label {
                return Err(Error::Validation("trial method order disagrees with the method list".into()));
            }
            if result.diverged {
                diverged += 1;
                continue;
            }
            l2.push(result.l2_error);
            widths.push(result.ci_widths[coordinate]);
            covered += usize::from(result.covered[coordinate]);
        }
        if l2.is_empty() {
            rows.push(SummaryRow {
                method: label,
                l2_mean: f64::NAN,
                l2_se: f64::NAN,
                width_mean: f64::NAN,
                width_se: f64::NAN,
                coverage_percent: f64::NAN,
                coverage_se: f64::NAN,
                covered: 0,
                diverged,
                replicates: trials.len(),
                failed: true,
            });
            continue;
        }
        let (l2_mean, l2_se) = mean_and_se(&l2);
        let (width_mean, width_se) = mean_and_se(&widths);
        let rate = covered as f64 / l2.len() as f64;
        rows.push(SummaryRow {
            method: label,
            l2_mean,
            l2_se,
            width_mean,
            width_se,
            coverage_percent: 100.0 * rate,
            coverage_se: 100.0 * libm::sqrt(rate * (1.0 - rate) / l2.len() as f64),
            covered,
            diverged,
            replicates: trials.len(),
            failed: false,
        });
    }
    Ok(rows)
}

/// Per-method empirical percentiles of the summary metrics across many
/// problems, at the levels in [`PERCENTILE_LEVELS`]. Rows from problems
/// where the method failed are skipped.
pub fn percentile_summary(per_problem: &[Vec<SummaryRow>]) -> Result<Vec<PercentileRow>> {
    if per_problem.len() < 10 {
        return Err(Error::Validation(format!(
            "percentiles need at least 10 problems, got {}",
            per_problem.len()
        )));
    }
    let first = &per_problem[0];
    for rows in per_problem {
        if rows.len() != first.len() || rows.iter().zip(first).any(|(a, b)| a.method != b.method) {
            return Err(Error::Validation("problems report different method lists".into()));
        }
    }
    let mut table = Vec::new();
    for (index, reference) in first.iter().enumerate() {
        let mut l2 = Vec::new();
        let mut widths = Vec::new();
        let mut coverage = Vec::new();
        for rows in per_problem {
            let row = &rows[index];
            if row.failed {
                continue;
            }
            l2.push(row.l2_mean);
            widths.push(row.width_mean);
            coverage.push(row.coverage_percent);
        }
        if l2.is_empty() {
            return Err(Error::Numeric(format!(
                "method {} failed on every problem",
                reference.method
            )));
        }
        l2.sort_by(f64::total_cmp);
        widths.sort_by(f64::total_cmp);
        coverage.sort_by(f64::total_cmp);
        for &level in &PERCENTILE_LEVELS {
            table.push(PercentileRow {
                method: reference.method.clone(),
                level,
                l2_error: percentile_of_sorted(&l2, level),
                ci_width: percentile_of_sorted(&widths, level),
                coverage_percent: percentile_of_sorted(&coverage, level),
            });
        }
    }
    Ok(table)
}

/// Bias of the constant-stepsize post-burn-in mean: runs `replicates`
/// independent trajectories, averages each after the default plan's
/// burn-in, and reports the averaged mean minus the target with
/// per-coordinate standard errors. Diverged replicates are dropped but
/// counted.
pub fn empirical_bias(
    problem: &Problem,
    alpha: f64,
    total_steps: usize,
    replicates: usize,
    seed: u64,
) -> Result<BiasReport> {
    if total_steps < 10_000 {
        return Err(Error::Validation(format!(
            "bias estimation needs at least 10000 steps, got {total_steps}"
        )));
    }
    if replicates < 2 {
        return Err(Error::Validation("bias standard errors need at least 2 replicates".into()));
    }
    let plan = BatchPlan::with_defaults(total_steps, None)?;
    let schedule = StepsizeSchedule::constant(alpha)?;
    let (means, diverged) =
        replicate_means(problem, &schedule, total_steps, replicates, seed, plan.burn_in)?;
    if means.len() < 2 {
        return Err(Error::Numeric(format!(
            "only {} of {replicates} replicates survived; cannot form standard errors",
            means.len()
        )));
    }
    let average = vector_mean(&means)?;
    let dim = problem.dim();
    let mut variance = DVector::<f64>::zeros(dim);
    for mean in &means {
        for i in 0..dim {
            let delta = mean[i] - average[i];
            variance[i] += delta * delta;
        }
    }
    let count = means.len() as f64;
    let standard_error = variance.map(|v| libm::sqrt(v / (count - 1.0) / count));
    Ok(BiasReport {
        bias: average - problem.target(),
        standard_error,
        replicates_used: means.len(),
        diverged,
    })
}

/// Sorted standardized replicate means per coordinate, paired with normal
/// quantiles at `(rank - 0.5) / count`. The replicate mean is the average
/// iterate after an explicit burn-in.
pub fn qq_export(
    problem: &Problem,
    alpha: f64,
    total_steps: usize,
    replicates: usize,
    seed: u64,
    burn_in: usize,
) -> Result<QqData> {
    if replicates < 100 {
        return Err(Error::Validation(format!(
            "quantile export needs at least 100 replicates, got {replicates}"
        )));
    }
    let schedule = StepsizeSchedule::constant(alpha)?;
    let (means, diverged) =
        replicate_means(problem, &schedule, total_steps, replicates, seed, burn_in)?;
    if means.len() < 100 {
        return Err(Error::Numeric(format!(
            "only {} of {replicates} replicates survived the divergence filter",
            means.len()
        )));
    }
    let dim = problem.dim();
    let mut pairs = Vec::with_capacity(dim);
    let mut correlations = Vec::with_capacity(dim);
    for coordinate in 0..dim {
        let values: Vec<f64> = means.iter().map(|m| m[coordinate]).collect();
        let coordinate_pairs = qq_pairs(&values)?;
        let (sample, normal): (Vec<f64>, Vec<f64>) = coordinate_pairs.iter().copied().unzip();
        correlations.push(pearson_correlation(&sample, &normal)?);
        pairs.push(coordinate_pairs);
    }
    Ok(QqData { pairs, correlations, replicates_used: means.len(), diverged })
}

/// Standardizes by the sample mean and standard deviation, sorts
/// ascending, and pairs rank `i` (1-based) with
/// `normal_quantile((i - 0.5) / n)`.
pub fn qq_pairs(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.len() < 2 {
        return Err(Error::Validation("quantile pairs need at least two values".into()));
    }
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    let sd = libm::sqrt(variance);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Numeric("sample is degenerate: zero standard deviation".into()));
    }
    let mut standardized: Vec<f64> = values.iter().map(|v| (v - mean) / sd).collect();
    standardized.sort_by(f64::total_cmp);
    standardized
        .into_iter()
        .enumerate()
        .map(|(index, value)| Ok((value, normal_quantile((index as f64 + 0.5) / count)?)))
        .collect()
}

/// Pearson correlation between two equal-length samples.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Validation("correlation needs two equal-length samples".into()));
    }
    let count = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / count;
    let y_mean = ys.iter().sum::<f64>() / count;
    let mut cross = 0.0;
    let mut x_sq = 0.0;
    let mut y_sq = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - x_mean;
        let dy = y - y_mean;
        cross += dx * dy;
        x_sq += dx * dx;
        y_sq += dy * dy;
    }
    if x_sq <= 0.0 || y_sq <= 0.0 {
        return Err(Error::Numeric("correlation is undefined for a constant sample".into()));
    }
    Ok(cross / libm::sqrt(x_sq * y_sq))
}

fn replicate_means(
    problem: &Problem,
    schedule: &StepsizeSchedule,
    total_steps: usize,
    replicates: usize,
    seed: u64,
    burn_in: usize,
) -> Result<(Vec<DVector<f64>>, usize)> {
    let dim = problem.dim();
    let mut means = Vec::with_capacity(replicates);
    let mut diverged = 0usize;
    for replicate in 0..replicates {
        let mut config = RunConfig::new(total_steps, seed);
        config.replicate = replicate as u64;
        let mut sink = MeanSink::new(dim, burn_in);
        let mut sinks: [&mut dyn IterateSink; 1] = [&mut sink];
        let outcomes = run_coupled(problem, core::slice::from_ref(schedule), &config, &mut sinks)?;
        if outcomes[0].diverged_at.is_some() {
            diverged += 1;
            continue;
        }
        means.push(sink.mean().ok_or_else(|| {
            Error::Plan(format!("burn-in {burn_in} leaves no iterates from {total_steps} steps"))
        })?);
    }
    Ok((means, diverged))
}

/// Linear-interpolation percentile of an ascending-sorted sample.
fn percentile_of_sorted(sorted: &[f64], level: u8) -> f64 {
    let position = (sorted.len() - 1) as f64 * f64::from(level) / 100.0;
    let low = position as usize;
    let high = (low + 1).min(sorted.len() - 1);
    let fraction = position - low as f64;
    sorted[low] + fraction * (sorted[high] - sorted[low])
}

fn add_distinct(alphas: &mut Vec<f64>, alpha: f64) {
    if !alphas.iter().any(|&a| a.to_bits() == alpha.to_bits()) {
        alphas.push(alpha);
    }
}

fn position_of(alphas: &[f64], alpha: f64) -> usize {
    alphas
        .iter()
        .position(|&a| a.to_bits() == alpha.to_bits())
        .expect("every stepsize was collected before running")
}

fn finished_result(
    method: String,
    report: &InferenceReport,
    target: &DVector<f64>,
    data_checksum: Option<u64>,
) -> TrialResult {
    TrialResult {
        method,
        l2_error: (&report.point_estimate - target).norm(),
        ci_widths: report.widths().iter().copied().collect(),
        covered: report.covers(target),
        diverged: false,
        data_checksum,
    }
}

fn diverged_result(method: String, dim: usize) -> TrialResult {
    TrialResult {
        method,
        l2_error: f64::NAN,
        ci_widths: vec![f64::NAN; dim],
        covered: vec![false; dim],
        diverged: true,
        data_checksum: None,
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let count = values.len() as f64;
    let mean = values.iter().sum::<f64>() / count;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let variance =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
    (mean, libm::sqrt(variance / count))
}
