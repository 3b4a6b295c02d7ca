//! Streaming stochastic approximation over a shared data stream.
//!
//! [`run_coupled`] samples one data trajectory and advances any number of
//! stepsize schedules over it in lockstep, pushing each schedule's iterates
//! into its own [`IterateSink`]. Nothing is materialized unless a sink
//! stores it, so memory stays constant in the trajectory length. A run with
//! `total_steps = T` performs `T` updates and pushes `T + 1` iterates
//! (the initial point first).
//!
//! Every random draw comes from the substream `(seed, Trajectory,
//! replicate)` in a fixed documented order per family, so a run is
//! reproducible and two runs over the same config consume identical data.

use alloc::{boxed::Box, format, vec::Vec};
use nalgebra::DVector;
use rand::Rng as _;

use crate::chain::Start;
use crate::error::{Error, Result};
use crate::problem::{
    LsaProblem, MrpProblem, MultiplicativeNoiseProblem, NonlinearProblem, Problem,
    RegressionProblem,
};
use crate::rng::{self, Domain, Stream};

/// Any iterate coordinate beyond this magnitude (or any non-finite value)
/// marks the schedule as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// A stepsize sequence indexed by update number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepsizeSchedule {
    /// The same stepsize at every update.
    Constant { alpha: f64 },
    /// `base` at update 0, then `base * k^(-exponent)` at update `k`.
    Polynomial { base: f64, exponent: f64 },
}

impl StepsizeSchedule {
    pub fn constant(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Validation(format!("stepsize {alpha} must be positive")));
        }
        Ok(Self::Constant { alpha })
    }

    pub fn polynomial(base: f64, exponent: f64) -> Result<Self> {
        if !(base > 0.0) {
            return Err(Error::Validation(format!("initial stepsize {base} must be positive")));
        }
        if !(exponent > 0.0 && exponent <= 1.0) {
            return Err(Error::Validation(format!(
                "decay exponent {exponent} must lie in (0, 1]"
            )));
        }
        Ok(Self::Polynomial { base, exponent })
    }

    /// The stepsize applied at update index `k` (0-based).
    pub fn stepsize_at(&self, k: usize) -> f64 {
        match *self {
            Self::Constant { alpha } => alpha,
            Self::Polynomial { base, exponent } => {
                if k == 0 {
                    base
                } else {
                    base * libm::pow(k as f64, -exponent)
                }
            }
        }
    }
}

/// Everything a single run needs besides the problem and schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Number of update steps; the run pushes `total_steps + 1` iterates.
    pub total_steps: usize,
    /// Initial iterate; zero vector when absent.
    pub initial: Option<DVector<f64>>,
    /// How the data stream chooses its first state.
    pub start: Start,
    /// Master seed; data comes from the `(seed, Trajectory, replicate)`
    /// substream.
    pub seed: u64,
    /// Replicate index selecting the substream.
    pub replicate: u64,
}

impl RunConfig {
    pub fn new(total_steps: usize, seed: u64) -> Self {
        Self { total_steps, initial: None, start: Start::Stationary, seed, replicate: 0 }
    }
}

/// Streaming consumer of one schedule's iterates.
pub trait IterateSink {
    fn push(&mut self, theta: &DVector<f64>);
}

/// Stores every iterate. Only for short runs and tests.
#[derive(Debug, Clone, Default)]
pub struct CollectSink {
    pub iterates: Vec<DVector<f64>>,
}

impl IterateSink for CollectSink {
    fn push(&mut self, theta: &DVector<f64>) {
        self.iterates.push(theta.clone());
    }
}

/// Running mean of all iterates after a burn-in prefix.
#[derive(Debug, Clone)]
pub struct MeanSink {
    burn_in: usize,
    seen: usize,
    counted: usize,
    sum: DVector<f64>,
}

impl MeanSink {
    pub fn new(dim: usize, burn_in: usize) -> Self {
        Self { burn_in, seen: 0, counted: 0, sum: DVector::zeros(dim) }
    }

    /// Mean of the post-burn-in iterates, or None when none arrived.
    pub fn mean(&self) -> Option<DVector<f64>> {
        if self.counted == 0 {
            None
        } else {
            Some(&self.sum / self.counted as f64)
        }
    }

    pub fn counted(&self) -> usize {
        self.counted
    }
}

impl IterateSink for MeanSink {
    fn push(&mut self, theta: &DVector<f64>) {
        self.seen += 1;
        if self.seen > self.burn_in {
            self.sum += theta;
            self.counted += 1;
        }
    }
}

/// Discards everything; for runs measured only through their outcome.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullSink;

impl IterateSink for NullSink {
    fn push(&mut self, _theta: &DVector<f64>) {}
}

/// Per-schedule result of a coupled run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleOutcome {
    pub schedule: StepsizeSchedule,
    /// Updates applied before divergence or completion.
    pub steps_accepted: usize,
    /// 1-based index of the diverging update, when one occurred.
    pub diverged_at: Option<usize>,
    /// Order-sensitive hash of the data points this schedule consumed.
    /// Schedules that saw identical data report identical checksums.
    pub data_checksum: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fold_token(mut checksum: u64, token: u64) -> u64 {
    for byte in token.to_le_bytes() {
        checksum ^= byte as u64;
        checksum = checksum.wrapping_mul(FNV_PRIME);
    }
    checksum
}

/// One data point's worth of simulation: sources own the stream state and
/// the RNG, expose a token identifying the current data point, apply the
/// current update to an iterate, and advance to the next point.
trait SaSource {
    fn token(&self) -> u64;
    /// Applies `theta += alpha * g(x_t, theta)` for the current data point.
    /// `scratch` is a caller-provided dim-length buffer.
    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, scratch: &mut DVector<f64>);
    /// Draws the next data point.
    fn advance(&mut self);
}

/// Finite-chain linear updates. Draw order: initial state at construction,
/// then one state per advance.
struct LinearSource<'a> {
    problem: &'a LsaProblem,
    rng: Stream,
    state: usize,
}

impl SaSource for LinearSource<'_> {
    fn token(&self) -> u64 {
        self.state as u64
    }

    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, scratch: &mut DVector<f64>) {
        scratch.copy_from(self.problem.b_map(self.state));
        scratch.gemv(1.0, self.problem.a_map(self.state), theta, 1.0);
        theta.axpy(alpha, scratch, 1.0);
    }

    fn advance(&mut self) {
        self.state = self.problem.chain().next_state(self.state, &mut self.rng);
    }
}

/// Mean dynamics plus fresh bounded matrix noise. Draw order: initial state,
/// then the noise matrix in column-major order; each advance draws the next
/// state followed by a fresh noise matrix.
struct MultiplicativeNoiseSource<'a> {
    problem: &'a MultiplicativeNoiseProblem,
    rng: Stream,
    state: usize,
    noise: nalgebra::DMatrix<f64>,
}

impl MultiplicativeNoiseSource<'_> {
    fn redraw_noise(&mut self) {
        let bound = self.problem.noise_bound();
        for entry in self.noise.iter_mut() {
            *entry = bound * (2.0 * self.rng.random::<f64>() - 1.0);
        }
    }
}

impl SaSource for MultiplicativeNoiseSource<'_> {
    fn token(&self) -> u64 {
        self.state as u64 ^ self.noise[(0, 0)].to_bits()
    }

    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, scratch: &mut DVector<f64>) {
        scratch.copy_from(self.problem.b_map(self.state));
        scratch.gemv(1.0, self.problem.a_bar(), theta, 1.0);
        scratch.gemv(1.0, &self.noise, theta, 1.0);
        theta.axpy(alpha, scratch, 1.0);
    }

    fn advance(&mut self) {
        self.state = self.problem.chain().next_state(self.state, &mut self.rng);
        self.redraw_noise();
    }
}

/// Covariate-indexed least-squares updates. Draw order: initial state, then
/// the Gaussian response noise; each advance draws the next state followed
/// by fresh noise.
struct RegressionSource<'a> {
    problem: &'a RegressionProblem,
    rng: Stream,
    state: usize,
    noise: f64,
}

impl SaSource for RegressionSource<'_> {
    fn token(&self) -> u64 {
        self.state as u64 ^ self.noise.to_bits()
    }

    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, _scratch: &mut DVector<f64>) {
        let covariate = self.problem.covariate(self.state);
        let residual =
            covariate.dot(self.problem.true_weights()) - covariate.dot(theta) + self.noise;
        theta.axpy(alpha * residual, covariate, 1.0);
    }

    fn advance(&mut self) {
        self.state = self.problem.chain().next_state(self.state, &mut self.rng);
        self.noise = self.problem.noise_sd() * rng::standard_normal(&mut self.rng);
    }
}

/// Temporal-difference updates with a fresh next-state sample. Draw order:
/// initial state, then its fresh next-state; each advance moves the main
/// chain one step and then draws the fresh next-state of the new state.
struct TemporalDifferenceSource<'a> {
    problem: &'a MrpProblem,
    rng: Stream,
    state: usize,
    fresh_next: usize,
}

impl SaSource for TemporalDifferenceSource<'_> {
    fn token(&self) -> u64 {
        (self.state * self.problem.chain().n_states() + self.fresh_next) as u64
    }

    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, _scratch: &mut DVector<f64>) {
        let feature = self.problem.feature(self.state);
        let temporal_difference = self.problem.reward(self.state)
            + self.problem.discount() * self.problem.feature(self.fresh_next).dot(theta)
            - feature.dot(theta);
        theta.axpy(alpha * temporal_difference, feature, 1.0);
    }

    fn advance(&mut self) {
        let chain = self.problem.chain();
        self.state = chain.next_state(self.state, &mut self.rng);
        self.fresh_next = chain.next_state(self.state, &mut self.rng);
    }
}

/// Logistic-score updates on AR(1) covariates. Draw order: stationary
/// covariate draw, then the label's uniform; each advance steps the
/// covariate process and draws a fresh label.
struct LogisticSource<'a> {
    problem: &'a NonlinearProblem,
    rng: Stream,
    covariate: DVector<f64>,
    label: f64,
}

impl LogisticSource<'_> {
    fn redraw_label(&mut self) {
        let success = sigmoid(self.problem.true_weights().dot(&self.covariate));
        self.label = if self.rng.random::<f64>() < success { 1.0 } else { 0.0 };
    }
}

impl SaSource for LogisticSource<'_> {
    fn token(&self) -> u64 {
        self.covariate[0].to_bits() ^ self.label as u64
    }

    fn apply(&self, theta: &mut DVector<f64>, alpha: f64, _scratch: &mut DVector<f64>) {
        let score = self.label - sigmoid(self.covariate.dot(theta));
        theta.axpy(alpha * score, &self.covariate, 1.0);
    }

    fn advance(&mut self) {
        self.problem.covariate_process().step(&mut self.covariate, &mut self.rng);
        self.redraw_label();
    }
}

fn make_source<'a>(problem: &'a Problem, config: &RunConfig) -> Result<Box<dyn SaSource + 'a>> {
    let mut rng = rng::stream(config.seed, Domain::Trajectory, config.replicate);
    match problem {
        Problem::Linear(p) => {
            let state = p.chain().initial_state(config.start, &mut rng)?;
            Ok(Box::new(LinearSource { problem: p, rng, state }))
        }
        Problem::MultiplicativeNoise(p) => {
            let state = p.chain().initial_state(config.start, &mut rng)?;
            let noise = nalgebra::DMatrix::zeros(p.dim(), p.dim());
            let mut source = MultiplicativeNoiseSource { problem: p, rng, state, noise };
            source.redraw_noise();
            Ok(Box::new(source))
        }
        Problem::Regression(p) => {
            let state = p.chain().initial_state(config.start, &mut rng)?;
            let noise = p.noise_sd() * rng::standard_normal(&mut rng);
            Ok(Box::new(RegressionSource { problem: p, rng, state, noise }))
        }
        Problem::TemporalDifference(p) => {
            let state = p.chain().initial_state(config.start, &mut rng)?;
            let fresh_next = p.chain().next_state(state, &mut rng);
            Ok(Box::new(TemporalDifferenceSource { problem: p, rng, state, fresh_next }))
        }
        Problem::Logistic(p) => {
            if !matches!(config.start, Start::Stationary) {
                return Err(Error::Validation(
                    "logistic covariates start from their stationary law; \
                     a fixed start state is not supported"
                        .into(),
                ));
            }
            let covariate = p.covariate_process().stationary_draw(&mut rng);
            let mut source = LogisticSource { problem: p, rng, covariate, label: 0.0 };
            source.redraw_label();
            Ok(Box::new(source))
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// One linear update `theta + alpha (A(x) theta + b(x))`.
pub fn lsa_step(
    theta: &DVector<f64>,
    state: usize,
    alpha: f64,
    problem: &LsaProblem,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(Error::Validation(format!("stepsize {alpha} must be positive")));
    }
    if state >= problem.chain().n_states() {
        return Err(Error::Validation(format!(
            "state {state} out of range for {} states",
            problem.chain().n_states()
        )));
    }
    if theta.len() != problem.dim() {
        return Err(Error::Validation(format!(
            "iterate has dimension {}, problem has {}",
            theta.len(),
            problem.dim()
        )));
    }
    let mut update = problem.b_map(state).clone();
    update.gemv(1.0, problem.a_map(state), theta, 1.0);
    let mut next = theta.clone();
    next.axpy(alpha, &update, 1.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("update produced a non-finite iterate".into()));
    }
    Ok(next)
}

/// One logistic-score update `w + alpha * x * (y - sigmoid(w^T x))`.
/// A zero stepsize is allowed and leaves the weights unchanged.
pub fn logistic_score_step(
    weights: &DVector<f64>,
    covariate: &DVector<f64>,
    label: f64,
    alpha: f64,
) -> DVector<f64> {
    let mut next = weights.clone();
    next.axpy(alpha * (label - sigmoid(covariate.dot(weights))), covariate, 1.0);
    next
}

/// Runs every schedule over one shared data stream.
///
/// The stream is sampled once; each schedule keeps its own iterate and its
/// own sink (`sinks[i]` belongs to `schedules[i]`). Each sink first receives
/// the initial iterate and then one iterate per accepted update. A schedule
/// whose update leaves the divergence envelope stops consuming data (its
/// outcome records the failing update index); the others continue.
pub fn run_coupled(
    problem: &Problem,
    schedules: &[StepsizeSchedule],
    config: &RunConfig,
    sinks: &mut [&mut dyn IterateSink],
) -> Result<Vec<ScheduleOutcome>> {
    if schedules.is_empty() {
        return Err(Error::Validation("at least one stepsize schedule is required".into()));
    }
    if sinks.len() != schedules.len() {
        return Err(Error::Validation(format!(
            "{} sinks for {} schedules",
            sinks.len(),
            schedules.len()
        )));
    }
    if config.total_steps == 0 {
        return Err(Error::Validation("a run needs at least one update step".into()));
    }
    let dim = problem.dim();
    let initial = match &config.initial {
        Some(theta) => {
            if theta.len() != dim {
                return Err(Error::Validation(format!(
                    "initial iterate has dimension {}, problem has {dim}",
                    theta.len()
                )));
            }
            theta.clone()
        }
        None => DVector::zeros(dim),
    };

    let mut source = make_source(problem, config)?;

    struct ScheduleState {
        theta: DVector<f64>,
        checksum: u64,
        steps_accepted: usize,
        diverged_at: Option<usize>,
    }
    let mut states: Vec<ScheduleState> = schedules
        .iter()
        .map(|_| ScheduleState {
            theta: initial.clone(),
            checksum: FNV_OFFSET,
            steps_accepted: 0,
            diverged_at: None,
        })
        .collect();
    for sink in sinks.iter_mut() {
        sink.push(&initial);
    }

    let mut scratch = DVector::zeros(dim);
    for t in 1..=config.total_steps {
        let token = source.token();
        let mut any_alive = false;
        for (i, state) in states.iter_mut().enumerate() {
            if state.diverged_at.is_some() {
                continue;
            }
            state.checksum = fold_token(state.checksum, token);
            source.apply(&mut state.theta, schedules[i].stepsize_at(t - 1), &mut scratch);
            if state.theta.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                state.diverged_at = Some(t);
            } else {
                state.steps_accepted += 1;
                sinks[i].push(&state.theta);
                any_alive = true;
            }
        }
        if !any_alive {
            break;
        }
        if t < config.total_steps {
            source.advance();
        }
    }

    Ok(states
        .into_iter()
        .zip(schedules)
        .map(|(state, &schedule)| ScheduleOutcome {
            schedule,
            steps_accepted: state.steps_accepted,
            diverged_at: state.diverged_at,
            data_checksum: state.checksum,
        })
        .collect())
}

/// Runs a single schedule on a logistic problem.
pub fn run_nonlinear(
    problem: &NonlinearProblem,
    schedule: StepsizeSchedule,
    config: &RunConfig,
    sink: &mut dyn IterateSink,
) -> Result<ScheduleOutcome> {
    let wrapped = Problem::Logistic(problem.clone());
    let mut outcomes = run_coupled(&wrapped, &[schedule], config, &mut [sink])?;
    Ok(outcomes.pop().expect("one schedule yields one outcome"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::FiniteChain;
    use crate::problem::{logistic_problem, random_lsa_problem, realizable_td_problem};
    use nalgebra::DMatrix;

    fn single_state_problem(a: f64, b: f64) -> LsaProblem {
        let chain = FiniteChain::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        LsaProblem::new(
            chain,
            vec![DMatrix::from_element(1, 1, a)],
            vec![DVector::from_element(1, b)],
        )
        .unwrap()
    }

    #[test]
    fn stepsize_schedules_follow_their_formulas() {
        let constant = StepsizeSchedule::constant(0.2).unwrap();
        assert_eq!(constant.stepsize_at(1_000_000), 0.2);

        let poly = StepsizeSchedule::polynomial(0.2, 0.5).unwrap();
        assert_eq!(poly.stepsize_at(0), 0.2);
        assert!((poly.stepsize_at(4) - 0.1).abs() <= 1e-15);
        assert!((poly.stepsize_at(100) - 0.02).abs() <= 1e-15);
    }

    #[test]
    fn schedule_validation_rejects_bad_parameters() {
        assert!(StepsizeSchedule::constant(0.0).is_err());
        assert!(StepsizeSchedule::constant(-0.1).is_err());
        assert!(StepsizeSchedule::polynomial(0.2, 0.0).is_err());
        assert!(StepsizeSchedule::polynomial(0.2, 1.5).is_err());
        assert!(StepsizeSchedule::polynomial(1.0, 1.0).is_ok());
    }

    #[test]
    fn lsa_step_matches_hand_computations() {
        let scalar = single_state_problem(-1.0, 1.0);
        let stepped = lsa_step(&DVector::from_element(1, 0.0), 0, 0.1, &scalar).unwrap();
        assert_eq!(stepped[0], 0.1);
        let fixed = lsa_step(&DVector::from_element(1, 1.0), 0, 0.1, &scalar).unwrap();
        assert_eq!(fixed[0], 1.0);

        let chain = FiniteChain::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let planar = LsaProblem::new(
            chain,
            vec![DMatrix::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 })],
            vec![DVector::from_column_slice(&[1.0, 2.0])],
        )
        .unwrap();
        let stepped = lsa_step(&DVector::zeros(2), 0, 0.5, &planar).unwrap();
        assert_eq!(stepped, DVector::from_column_slice(&[0.5, 1.0]));
    }

    #[test]
    fn lsa_step_validates_inputs() {
        let p = single_state_problem(-1.0, 1.0);
        assert!(lsa_step(&DVector::zeros(1), 0, 0.0, &p).is_err());
        assert!(lsa_step(&DVector::zeros(1), 1, 0.1, &p).is_err());
        assert!(lsa_step(&DVector::zeros(2), 0, 0.1, &p).is_err());
        let err = lsa_step(&DVector::from_element(1, f64::MAX), 0, 1.5, &p).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn scalar_recursion_produces_the_hand_iterates() {
        let p = Problem::Linear(single_state_problem(-1.0, 1.0));
        let schedule = StepsizeSchedule::constant(0.5).unwrap();
        let mut sink = CollectSink::default();
        let config = RunConfig::new(3, 0);
        let outcomes = run_coupled(&p, &[schedule], &config, &mut [&mut sink]).unwrap();

        let collected: Vec<f64> = sink.iterates.iter().map(|v| v[0]).collect();
        assert_eq!(collected, vec![0.0, 0.5, 0.75, 0.875]);
        assert_eq!(outcomes[0].steps_accepted, 3);
        assert_eq!(outcomes[0].diverged_at, None);
    }

    #[test]
    fn identical_schedules_produce_bitwise_identical_streams() {
        let p = Problem::Linear(random_lsa_problem(5, 3, 11).unwrap());
        let schedule = StepsizeSchedule::constant(0.1).unwrap();
        let (mut a, mut b) = (CollectSink::default(), CollectSink::default());
        let config = RunConfig::new(400, 7);
        let outcomes =
            run_coupled(&p, &[schedule, schedule], &config, &mut [&mut a, &mut b]).unwrap();
        assert_eq!(a.iterates, b.iterates);
        assert_eq!(outcomes[0].data_checksum, outcomes[1].data_checksum);
    }

    #[test]
    fn coupled_run_equals_a_replay_over_the_materialized_trajectory() {
        let lsa = random_lsa_problem(5, 3, 11).unwrap();
        let p = Problem::Linear(lsa.clone());
        let schedules = [
            StepsizeSchedule::constant(0.2).unwrap(),
            StepsizeSchedule::constant(0.02).unwrap(),
        ];
        let config = RunConfig::new(500, 42);
        let (mut fast, mut slow) = (CollectSink::default(), CollectSink::default());
        run_coupled(&p, &schedules, &config, &mut [&mut fast, &mut slow]).unwrap();

        // The engine consumes the trajectory substream exactly like the
        // chain sampler, so an explicit trajectory replays it bitwise.
        let mut stream = rng::stream(config.seed, Domain::Trajectory, config.replicate);
        let states = lsa
            .chain()
            .sample_trajectory_with(Start::Stationary, config.total_steps, &mut stream)
            .unwrap();
        for (alpha, sink) in [(0.2, &fast), (0.02, &slow)] {
            let mut theta = DVector::zeros(3);
            assert_eq!(sink.iterates[0], theta);
            for (t, &state) in states.iter().enumerate() {
                theta = lsa_step(&theta, state, alpha, &lsa).unwrap();
                assert_eq!(sink.iterates[t + 1], theta, "alpha {alpha}, step {t}");
            }
        }
    }

    #[test]
    fn diverging_schedule_is_isolated_from_the_others() {
        let p = Problem::Linear(single_state_problem(-1.0, 1.0));
        let schedules = [
            StepsizeSchedule::constant(3.0).unwrap(),
            StepsizeSchedule::constant(0.5).unwrap(),
        ];
        let (mut wild, mut tame) = (CollectSink::default(), CollectSink::default());
        let config = RunConfig::new(200, 0);
        let outcomes = run_coupled(&p, &schedules, &config, &mut [&mut wild, &mut tame]).unwrap();

        let failure = outcomes[0].diverged_at.expect("stepsize 3 on a contraction of rate 1 explodes");
        assert!(failure < 100, "diverged at {failure}");
        assert_eq!(outcomes[0].steps_accepted, failure - 1);
        assert_eq!(wild.iterates.len(), failure);

        assert_eq!(outcomes[1].diverged_at, None);
        assert_eq!(outcomes[1].steps_accepted, 200);
        assert!((tame.iterates.last().unwrap()[0] - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn mean_sink_skips_the_burn_in_prefix() {
        let mut sink = MeanSink::new(1, 2);
        for value in [10.0, 20.0, 3.0, 5.0] {
            sink.push(&DVector::from_element(1, value));
        }
        assert_eq!(sink.counted(), 2);
        assert_eq!(sink.mean().unwrap()[0], 4.0);
        assert_eq!(MeanSink::new(1, 9).mean(), None);
    }

    #[test]
    fn run_validation_rejects_inconsistent_arguments() {
        let p = Problem::Linear(single_state_problem(-1.0, 1.0));
        let schedule = StepsizeSchedule::constant(0.5).unwrap();
        let config = RunConfig::new(10, 0);
        assert!(run_coupled(&p, &[], &config, &mut []).is_err());
        assert!(run_coupled(&p, &[schedule], &config, &mut []).is_err());
        let mut sink = NullSink;
        let zero_steps = RunConfig::new(10, 0);
        let zero_steps = RunConfig { total_steps: 0, ..zero_steps };
        assert!(run_coupled(&p, &[schedule], &zero_steps, &mut [&mut sink]).is_err());
        let bad_initial = RunConfig {
            initial: Some(DVector::zeros(3)),
            ..RunConfig::new(10, 0)
        };
        assert!(run_coupled(&p, &[schedule], &bad_initial, &mut [&mut sink]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(710.0) - 1.0).abs() <= 1e-15);
        assert!(sigmoid(-710.0) > 0.0);
        assert!(sigmoid(-710.0) < 1e-300);
        for z in [-3.0, -0.7, 0.2, 5.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn logistic_step_matches_the_hand_example_and_zero_stepsize_is_identity() {
        let x = DVector::from_column_slice(&[0.3, -0.4]);
        let w0 = DVector::zeros(2);
        let stepped = logistic_score_step(&w0, &x, 1.0, 0.2);
        // With w = 0 the predicted probability is 1/2, so the update is
        // alpha * x * (1 - 1/2).
        assert_eq!(stepped, DVector::from_column_slice(&[0.2 * 0.3 * 0.5, 0.2 * -0.4 * 0.5]));

        let frozen = logistic_score_step(&stepped, &x, 0.0, 0.0);
        assert_eq!(frozen, stepped);
    }

    #[test]
    fn nonlinear_runs_are_deterministic_and_reject_fixed_starts() {
        let problem = logistic_problem(2, 0.5, 3).unwrap();
        let schedule = StepsizeSchedule::constant(0.1).unwrap();
        let config = RunConfig::new(300, 5);
        let (mut a, mut b) = (CollectSink::default(), CollectSink::default());
        run_nonlinear(&problem, schedule, &config, &mut a).unwrap();
        run_nonlinear(&problem, schedule, &config, &mut b).unwrap();
        assert_eq!(a.iterates, b.iterates);

        let fixed_start = RunConfig { start: Start::State(0), ..RunConfig::new(300, 5) };
        let err = run_nonlinear(&problem, schedule, &fixed_start, &mut NullSink).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn logistic_score_is_centered_at_the_true_weights() {
        // Monte-Carlo check that the expected update direction vanishes at
        // w = w*: average the score over many fresh draws.
        let problem = logistic_problem(2, 0.0, 9).unwrap();
        let w_star = problem.true_weights().clone();
        let mut rng = rng::stream(9, Domain::Trajectory, 0);
        let n = 100_000;
        let mut sum = DVector::<f64>::zeros(2);
        let mut sum_sq = DVector::<f64>::zeros(2);
        for _ in 0..n {
            let x = problem.covariate_process().stationary_draw(&mut rng);
            let y = if rng.random::<f64>() < sigmoid(w_star.dot(&x)) { 1.0 } else { 0.0 };
            let score = &x * (y - sigmoid(w_star.dot(&x)));
            for i in 0..2 {
                sum[i] += score[i];
                sum_sq[i] += score[i] * score[i];
            }
        }
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let variance = sum_sq[i] / n as f64 - mean * mean;
            let standard_error = libm::sqrt(variance / n as f64);
            assert!(
                mean.abs() <= 3.0 * standard_error,
                "coordinate {i}: mean {mean:.3e}, SE {standard_error:.3e}"
            );
        }
    }

    #[test]
    fn multiplicative_noise_with_zero_bound_matches_the_averaged_problem() {
        let base = random_lsa_problem(5, 3, 13).unwrap().with_dynamics_norm(0.5).unwrap();
        let noisy = crate::problem::multiplicative_noise_problem(&base, 0.0).unwrap();
        let averaged = noisy.state_averaged();

        // The two updates agree pointwise; the runs themselves consume RNG
        // differently (the noise source still draws xi entries), so the
        // comparison is at the update-map level on a shared state sequence.
        let states = base.chain().sample_trajectory(Start::Stationary, 200, 3).unwrap();
        let mut theta = DVector::from_column_slice(&[0.3, -0.2, 0.1]);
        for &state in &states {
            let via_averaged = lsa_step(&theta, state, 0.1, &averaged).unwrap();
            let mut scratch = DVector::zeros(3);
            let source = MultiplicativeNoiseSource {
                problem: &noisy,
                rng: rng::stream(0, Domain::Trajectory, 0),
                state,
                noise: DMatrix::zeros(3, 3),
            };
            let mut via_noisy = theta.clone();
            source.apply(&mut via_noisy, 0.1, &mut scratch);
            assert_eq!(via_noisy, via_averaged);
            theta = via_averaged;
        }
    }

    #[test]
    fn uniform_noise_matrices_have_near_zero_mean() {
        let base = random_lsa_problem(4, 3, 17).unwrap().with_dynamics_norm(0.5).unwrap();
        let bound = 0.1;
        let noisy = crate::problem::multiplicative_noise_problem(&base, bound).unwrap();
        let mut source = MultiplicativeNoiseSource {
            problem: &noisy,
            rng: rng::stream(17, Domain::Trajectory, 0),
            state: 0,
            noise: DMatrix::zeros(3, 3),
        };
        let draws = 100_000usize;
        let mut sum = 0.0;
        for _ in 0..draws {
            source.redraw_noise();
            sum += source.noise[(0, 0)];
        }
        let mean = sum / draws as f64;
        // Uniform on [-u, u] has variance u^2 / 3.
        let tolerance = 3.0 * bound / libm::sqrt(3.0 * draws as f64);
        assert!(mean.abs() <= tolerance, "mean {mean:.3e}, tolerance {tolerance:.3e}");
    }

    #[test]
    fn td_runs_drift_toward_the_value_weights() {
        let problem = realizable_td_problem(6, 3, 0.5, 21).unwrap();
        let target = problem.theta_star().clone();
        let p = Problem::TemporalDifference(problem);
        let schedule = StepsizeSchedule::constant(0.1).unwrap();
        let mut sink = MeanSink::new(3, 2_000);
        let config = RunConfig::new(20_000, 4);
        let outcomes = run_coupled(&p, &[schedule], &config, &mut [&mut sink]).unwrap();
        assert_eq!(outcomes[0].diverged_at, None);
        let mean = sink.mean().unwrap();
        let error = (&mean - &target).norm();
        assert!(error <= 0.2, "post-burn-in mean is {error:.3} away from the target");
    }

    #[test]
    fn running_mean_error_stays_under_the_frozen_stability_guard() {
        // Regression guard: on a fixed seeded problem the full running mean
        // obeys ||mean - theta*|| <= C (alpha + 1/sqrt(T)) with C frozen
        // after one calibration run (see the assertion message for the
        // measured values).
        let lsa = random_lsa_problem(10, 5, 1).unwrap();
        let target = lsa.theta_star().clone();
        let p = Problem::Linear(lsa);
        let total_steps = 100_000;
        let guard = 2.0;
        for alpha in [0.05, 0.01] {
            let schedule = StepsizeSchedule::constant(alpha).unwrap();
            let mut sink = MeanSink::new(5, 0);
            let config = RunConfig::new(total_steps, 2024);
            let outcomes = run_coupled(&p, &[schedule], &config, &mut [&mut sink]).unwrap();
            assert_eq!(outcomes[0].diverged_at, None);
            let error = (sink.mean().unwrap() - &target).norm();
            let budget = guard * (alpha + 1.0 / libm::sqrt(total_steps as f64));
            assert!(
                error <= budget,
                "alpha {alpha}: error {error:.4} exceeds budget {budget:.4}"
            );
        }
    }
}
