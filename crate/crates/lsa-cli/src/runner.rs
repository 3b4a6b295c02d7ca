//! Replicate execution for the command-line tools. The parallel path
//! produces the same outcome as the sequential one because replicates
//! read disjoint substreams keyed by replicate index, so the schedule of
//! workers cannot change any row.

use lsa_core::harness::RELIABLE_REPLICATES;
use lsa_core::{
    bootstrap_inference, coverage_experiment, diminishing_batch_bounds, rr_combine, run_coupled,
    run_trial, summarize, BatchAccumulator, BatchMeans, BatchPlan, BootstrapConfig,
    BoundedBatchAccumulator, Error, ExperimentOutcome, ExperimentSpec, InferenceReport,
    IterateSink, Method, Problem, Result, RunConfig, ScheduleOutcome, StepsizeSchedule,
    TrialResult,
};

/// Runs every replicate of `spec`, with `jobs` worker threads when
/// `jobs > 1`. Rows land in replicate order either way.
pub fn run_experiment(
    problem: &Problem,
    spec: &ExperimentSpec,
    jobs: usize,
) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let workers = jobs.max(1).min(spec.replicates);
    if workers <= 1 {
        return coverage_experiment(problem, spec);
    }
    let mut warnings = Vec::new();
    if spec.replicates < RELIABLE_REPLICATES {
        warnings.push(format!(
            "{} replicates give unreliable standard errors; use at least {RELIABLE_REPLICATES}",
            spec.replicates
        ));
    }
    let mut slots = vec![None; spec.replicates];
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|worker| {
                scope.spawn(move || -> Result<Vec<(usize, Vec<TrialResult>)>> {
                    let mut rows = Vec::new();
                    let mut replicate = worker;
                    while replicate < spec.replicates {
                        rows.push((replicate, run_trial(problem, spec, replicate as u64)?));
                        replicate += workers;
                    }
                    Ok(rows)
                })
            })
            .collect();
        for handle in handles {
            let rows = handle
                .join()
                .map_err(|_| Error::Internal("a replicate worker panicked".into()))??;
            for (index, row) in rows {
                slots[index] = Some(row);
            }
        }
        Ok(())
    })?;
    let trials: Vec<_> = slots
        .into_iter()
        .map(|slot| slot.expect("each replicate index belongs to exactly one worker"))
        .collect();
    let summaries = summarize(&trials, spec)?;
    Ok(ExperimentOutcome { trials, summaries, warnings })
}

/// Runs one method once and returns the full interval report plus the
/// equal-batch plan when one applies. Divergence is an error here, unlike
/// in replicated experiments where it is only counted.
pub fn single_report(
    problem: &Problem,
    method: &Method,
    total_steps: usize,
    batch_count: Option<usize>,
    confidence_q: f64,
    seed: u64,
    replicate: u64,
) -> Result<(InferenceReport, Option<BatchPlan>)> {
    match method {
        Method::Constant { alpha } => {
            let plan = BatchPlan::with_defaults(total_steps, batch_count)?;
            let means =
                constant_batch_means(problem, &[*alpha], total_steps, plan, seed, replicate)?;
            Ok((InferenceReport::from_batch_means(&means[0], confidence_q)?, Some(plan)))
        }
        Method::Extrapolated { schedule } => {
            let plan = BatchPlan::with_defaults(total_steps, batch_count)?;
            let runs = constant_batch_means(
                problem,
                schedule.stepsizes(),
                total_steps,
                plan,
                seed,
                replicate,
            )?;
            let combined = rr_combine(&runs, schedule)?;
            Ok((InferenceReport::from_batch_means(&combined, confidence_q)?, Some(plan)))
        }
        Method::Diminishing { base, exponent } => {
            let plan = BatchPlan::with_defaults(total_steps, batch_count)?;
            let bounds = diminishing_batch_bounds(total_steps, plan.batch_count, *exponent)?;
            let mut accumulator = BoundedBatchAccumulator::new(bounds, problem.dim())?;
            let schedule = StepsizeSchedule::polynomial(*base, *exponent)?;
            let mut config = RunConfig::new(total_steps, seed);
            config.replicate = replicate;
            let mut sinks: [&mut dyn IterateSink; 1] = [&mut accumulator];
            let outcomes =
                run_coupled(problem, std::slice::from_ref(&schedule), &config, &mut sinks)?;
            require_converged(&outcomes)?;
            let weighted = accumulator.finish()?;
            Ok((InferenceReport::from_weighted(&weighted, confidence_q)?, None))
        }
        Method::Bootstrap { config } => {
            let report = bootstrap_report(problem, config, seed, replicate)?;
            Ok((report, None))
        }
    }
}

/// Bootstrap interval on a freshly stored trajectory; `stream` selects the
/// data substream the trajectory is drawn from.
pub fn bootstrap_report(
    problem: &Problem,
    config: &BootstrapConfig,
    seed: u64,
    stream: u64,
) -> Result<InferenceReport> {
    let linear = match problem {
        Problem::Linear(inner) => inner,
        _ => {
            return Err(Error::Validation(format!(
                "the bootstrap needs a finite linear problem, got the {} family",
                problem.family_name()
            )))
        }
    };
    bootstrap_inference(linear, config, seed, stream)
}

fn constant_batch_means(
    problem: &Problem,
    alphas: &[f64],
    total_steps: usize,
    plan: BatchPlan,
    seed: u64,
    replicate: u64,
) -> Result<Vec<BatchMeans>> {
    let schedules = alphas
        .iter()
        .map(|&alpha| StepsizeSchedule::constant(alpha))
        .collect::<Result<Vec<_>>>()?;
    let mut accumulators: Vec<BatchAccumulator> =
        alphas.iter().map(|_| BatchAccumulator::new(plan, problem.dim())).collect();
    let mut sinks: Vec<&mut dyn IterateSink> =
        accumulators.iter_mut().map(|a| a as &mut dyn IterateSink).collect();
    let mut config = RunConfig::new(total_steps, seed);
    config.replicate = replicate;
    let outcomes = run_coupled(problem, &schedules, &config, &mut sinks)?;
    drop(sinks);
    require_converged(&outcomes)?;
    accumulators.into_iter().map(BatchAccumulator::finish).collect()
}

fn require_converged(outcomes: &[ScheduleOutcome]) -> Result<()> {
    for outcome in outcomes {
        if let Some(step) = outcome.diverged_at {
            return Err(Error::Numeric(format!(
                "the run diverged at step {step}; use a smaller stepsize"
            )));
        }
    }
    Ok(())
}
