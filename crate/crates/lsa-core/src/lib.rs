//! Statistical inference for linear stochastic approximation driven by
//! Markovian data.
//!
//! The crate builds up from finite Markov chains ([`chain`]) and problem
//! families ([`problem`]) to a coupled constant-stepsize iteration engine
//! ([`engine`]), batch-mean confidence intervals ([`inference`]),
//! Richardson-Romberg stepsize extrapolation ([`extrapolation`]), a
//! resampling baseline ([`bootstrap`]), and replicated coverage experiments
//! ([`harness`]).
//!
//! Everything is deterministic given a master seed: randomness flows through
//! counter-based substreams (see [`rng`]), so coupled runs, parallel
//! replicates, and repeated invocations reproduce byte-identical results.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod bootstrap;
pub mod chain;
pub mod engine;
pub mod error;
pub mod extrapolation;
pub mod harness;
pub mod inference;
pub mod problem;
pub mod rng;

pub use bootstrap::{bootstrap_inference, BootstrapConfig};
pub use chain::{ArOneProcess, ErgodicityReport, FiniteChain, Start};
pub use engine::{
    run_coupled, run_nonlinear, CollectSink, IterateSink, MeanSink, NullSink, RunConfig,
    ScheduleOutcome, StepsizeSchedule,
};
pub use error::{Error, Result};
pub use extrapolation::{
    equidistant_schedule, geometric_schedule, rr_coefficients, rr_combine, RrSchedule,
    ScheduleKind,
};
pub use harness::{
    coverage_experiment, empirical_bias, pearson_correlation, percentile_summary, qq_export,
    qq_pairs, run_trial, summarize, BiasReport, ExperimentOutcome, ExperimentSpec, Method,
    PercentileRow, QqData, SummaryRow, TrialResult,
};
pub use inference::{
    batch_means, confidence_intervals, covariance_estimator, diminishing_batch_bounds,
    normal_quantile, overall_mean, BatchAccumulator, BatchMeans, BatchPlan,
    BoundedBatchAccumulator, InferenceReport, WeightedBatchMeans,
};
pub use problem::{
    LsaProblem, MrpProblem, MultiplicativeNoiseProblem, NonlinearProblem, Problem,
    RegressionProblem,
};
