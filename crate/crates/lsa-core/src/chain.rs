//! Finite-state Markov chains and a Gaussian AR(1) covariate process.
//!
//! A [`FiniteChain`] couples a row-stochastic transition matrix with its
//! stationary distribution. Construction solves for the stationary
//! distribution directly on small state spaces and falls back to power
//! iteration on large ones. Trajectory sampling is fully seeded: the same
//! seed always reproduces the same state sequence.

use alloc::{format, vec, vec::Vec};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Domain, Stream};

/// Largest allowed deviation of a transition-matrix row sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;
/// Residual bound `max_j |sum_i pi_i P_ij - pi_j|` the stationary
/// distribution must satisfy.
pub const STATIONARY_RESIDUAL_TOLERANCE: f64 = 1e-10;
/// State counts up to this limit solve the stationary system directly;
/// larger chains use power iteration.
const DIRECT_SOLVE_LIMIT: usize = 200;
/// Iteration cap for the power-iteration fallback.
const POWER_ITERATION_CAP: usize = 50_000;
/// Attempt cap for rejection sampling in [`random_ergodic_chain`].
const GENERATION_ATTEMPT_CAP: usize = 1000;

/// How a run chooses its first state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Start {
    /// Draw the first state from the stationary distribution by inverse CDF.
    #[default]
    Stationary,
    /// Begin in a fixed state.
    State(usize),
}

/// Outcome of [`check_ergodicity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErgodicityReport {
    /// Whether the positive-entry digraph is strongly connected.
    pub irreducible: bool,
    /// Whether every state that lies on a cycle has return-time gcd one.
    pub aperiodic: bool,
}

impl ErgodicityReport {
    pub fn is_ergodic(&self) -> bool {
        self.irreducible && self.aperiodic
    }
}

/// An ergodic (or at least stationary-solvable) finite Markov chain.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    transition: DMatrix<f64>,
    stationary: DVector<f64>,
}

impl FiniteChain {
    /// Builds a chain from a row-stochastic matrix, solving for the
    /// stationary distribution.
    pub fn new(transition: DMatrix<f64>) -> Result<Self> {
        let stationary = stationary_distribution(&transition)?;
        Ok(Self { transition, stationary })
    }

    /// Builds a chain from a transition matrix and a stationary distribution
    /// that is validated rather than recomputed. Intended for deserialized
    /// problems, where the stored distribution must be kept bit-for-bit.
    pub fn with_stationary(transition: DMatrix<f64>, stationary: DVector<f64>) -> Result<Self> {
        validate_stochastic(&transition)?;
        if stationary.len() != transition.nrows() {
            return Err(Error::Validation(format!(
                "stationary distribution has {} entries for {} states",
                stationary.len(),
                transition.nrows()
            )));
        }
        if stationary.iter().any(|&p| p < 0.0) {
            return Err(Error::Validation("stationary distribution has a negative entry".into()));
        }
        let sum: f64 = stationary.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("stationary distribution sums to {sum}")));
        }
        let residual = stationary_residual(&transition, &stationary);
        if residual > STATIONARY_RESIDUAL_TOLERANCE {
            return Err(Error::Validation(format!(
                "stationary distribution residual {residual:.3e} exceeds {STATIONARY_RESIDUAL_TOLERANCE:.0e}"
            )));
        }
        Ok(Self { transition, stationary })
    }

    /// Builds the i.i.d. chain with every row equal to `stationary`, so each
    /// step samples independently from that distribution.
    pub fn iid(stationary: DVector<f64>) -> Result<Self> {
        let n = stationary.len();
        let mut transition = DMatrix::zeros(n, n);
        for i in 0..n {
            transition.row_mut(i).copy_from(&stationary.transpose());
        }
        Self::with_stationary(transition, stationary)
    }

    /// The i.i.d. chain that shares this chain's stationary distribution.
    pub fn to_iid(&self) -> Self {
        Self::iid(self.stationary.clone()).expect("stationary distribution is already validated")
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn stationary(&self) -> &DVector<f64> {
        &self.stationary
    }

    /// Classifies irreducibility and aperiodicity of this chain.
    pub fn check_ergodicity(&self) -> ErgodicityReport {
        check_ergodicity(&self.transition).expect("transition matrix is already validated")
    }

    /// Draws the first state of a run.
    pub fn initial_state(&self, start: Start, rng: &mut Stream) -> Result<usize> {
        match start {
            Start::Stationary => Ok(pick_index(self.stationary.iter().copied(), rng.random())),
            Start::State(s) => {
                if s >= self.n_states() {
                    return Err(Error::Validation(format!(
                        "start state {s} out of range for {} states",
                        self.n_states()
                    )));
                }
                Ok(s)
            }
        }
    }

    /// Samples the successor of `state` by inverse CDF over its row.
    pub fn next_state(&self, state: usize, rng: &mut Stream) -> usize {
        pick_index(self.transition.row(state).iter().copied(), rng.random())
    }

    /// Samples a state trajectory of the given length using the substream
    /// `(seed, Trajectory, 0)`.
    pub fn sample_trajectory(&self, start: Start, length: usize, seed: u64) -> Result<Vec<usize>> {
        let mut rng = rng::stream(seed, Domain::Trajectory, 0);
        self.sample_trajectory_with(start, length, &mut rng)
    }

    /// Samples a trajectory from an already opened stream. Coupled runs use
    /// this to share one state sequence across stepsizes.
    pub fn sample_trajectory_with(
        &self,
        start: Start,
        length: usize,
        rng: &mut Stream,
    ) -> Result<Vec<usize>> {
        if length == 0 {
            return Err(Error::Validation("trajectory length must be at least 1".into()));
        }
        let mut states = Vec::with_capacity(length);
        let mut current = self.initial_state(start, rng)?;
        states.push(current);
        for _ in 1..length {
            current = self.next_state(current, rng);
            states.push(current);
        }
        Ok(states)
    }
}

/// Inverse-CDF selection: returns the first index whose cumulative weight
/// exceeds `u`, falling back to the last index against rounding in the
/// cumulative sum.
fn pick_index(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        cumulative += w;
        last = i;
        if u < cumulative {
            return i;
        }
    }
    last
}

fn validate_stochastic(transition: &DMatrix<f64>) -> Result<()> {
    let n = transition.nrows();
    if n == 0 {
        return Err(Error::Validation("transition matrix is empty".into()));
    }
    if transition.ncols() != n {
        return Err(Error::Validation(format!(
            "transition matrix is {}x{}, expected square",
            n,
            transition.ncols()
        )));
    }
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            let p = transition[(i, j)];
            if !(p >= 0.0) {
                return Err(Error::Validation(format!("transition entry ({i}, {j}) is {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Validation(format!("transition row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn stationary_residual(transition: &DMatrix<f64>, pi: &DVector<f64>) -> f64 {
    let image = transition.transpose() * pi;
    (image - pi).amax()
}

/// Solves for a stationary distribution of a row-stochastic matrix.
///
/// Chains with up to 200 states replace one balance equation with the
/// normalization constraint and solve the linear system directly; larger
/// chains run power iteration. Either way the result is checked against
/// [`STATIONARY_RESIDUAL_TOLERANCE`].
pub fn stationary_distribution(transition: &DMatrix<f64>) -> Result<DVector<f64>> {
    validate_stochastic(transition)?;
    let n = transition.nrows();
    let pi = if n <= DIRECT_SOLVE_LIMIT {
        stationary_direct(transition)?
    } else {
        stationary_power(transition)?
    };
    let residual = stationary_residual(transition, &pi);
    if residual > STATIONARY_RESIDUAL_TOLERANCE {
        return Err(Error::Numeric(format!(
            "stationary distribution residual {residual:.3e} exceeds {STATIONARY_RESIDUAL_TOLERANCE:.0e}"
        )));
    }
    Ok(pi)
}

fn stationary_direct(transition: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = transition.nrows();
    // Balance equations (P^T - I) pi = 0 with the last one replaced by the
    // normalization sum_i pi_i = 1.
    let mut system = transition.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        system[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mut pi = nalgebra::linalg::LU::new(system)
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("stationary system is singular; chain may be reducible".into()))?;
    let mut negative = 0.0f64;
    for p in pi.iter_mut() {
        if *p < 0.0 {
            negative = negative.max(-*p);
            *p = 0.0;
        }
    }
    if negative > 1e-9 {
        return Err(Error::Numeric(format!(
            "stationary solve produced negative mass {negative:.3e}; chain may be reducible"
        )));
    }
    let sum: f64 = pi.iter().sum();
    pi /= sum;
    Ok(pi)
}

fn stationary_power(transition: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = transition.nrows();
    let transposed = transition.transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    let mut delta = f64::INFINITY;
    for _ in 0..POWER_ITERATION_CAP {
        let mut next = &transposed * &pi;
        let sum: f64 = next.iter().sum();
        next /= sum;
        delta = (&next - &pi).abs().sum();
        pi = next;
        if delta <= 1e-13 {
            return Ok(pi);
        }
    }
    Err(Error::Numeric(format!(
        "power iteration did not converge within {POWER_ITERATION_CAP} iterations; last step moved {delta:.3e}"
    )))
}

/// Classifies a transition matrix as irreducible and/or aperiodic.
///
/// Irreducibility is strong connectivity of the positive-entry digraph.
/// The period of each strongly connected component with at least one
/// internal edge is the gcd of `depth(u) + 1 - depth(v)` over its internal
/// edges `u -> v`, taken from a breadth-first search inside the component;
/// the chain is aperiodic when every such component has period one. States
/// that lie on no cycle put no constraint on the period.
pub fn check_ergodicity(transition: &DMatrix<f64>) -> Result<ErgodicityReport> {
    validate_stochastic(transition)?;
    let n = transition.nrows();
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| transition[(i, j)] > 0.0).collect())
        .collect();

    let components = strongly_connected_components(&adjacency);
    let irreducible = components.len() == 1;

    let mut component_of = vec![0usize; n];
    for (c, members) in components.iter().enumerate() {
        for &v in members {
            component_of[v] = c;
        }
    }

    let mut aperiodic = true;
    for members in &components {
        let c = component_of[members[0]];
        let internal_edge = members
            .iter()
            .any(|&u| adjacency[u].iter().any(|&v| component_of[v] == c));
        if !internal_edge {
            continue;
        }
        // Breadth-first depths inside the component; paths between members
        // of a strongly connected component never leave it.
        let mut depth = vec![usize::MAX; n];
        let root = members[0];
        depth[root] = 0;
        let mut queue = alloc::collections::VecDeque::new();
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            for &v in &adjacency[u] {
                if component_of[v] == c && depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let mut period = 0u64;
        for &u in members {
            for &v in &adjacency[u] {
                if component_of[v] == c {
                    let diff = depth[u] as i64 + 1 - depth[v] as i64;
                    period = gcd(period, diff.unsigned_abs());
                }
            }
        }
        if period != 1 {
            aperiodic = false;
        }
    }
    Ok(ErgodicityReport { irreducible, aperiodic })
}

/// Kosaraju's algorithm; returns the components as lists of states.
fn strongly_connected_components(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    // Iterative depth-first search recording finish order.
    for start in 0..n {
        if visited[start] {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        visited[start] = true;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next < adjacency[u].len() {
                let v = adjacency[u][*next];
                *next += 1;
                if !visited[v] {
                    visited[v] = true;
                    stack.push((v, 0));
                }
            } else {
                order.push(u);
                stack.pop();
            }
        }
    }

    let mut reversed = vec![Vec::new(); n];
    for (u, targets) in adjacency.iter().enumerate() {
        for &v in targets {
            reversed[v].push(u);
        }
    }

    let mut component_of = vec![usize::MAX; n];
    let mut components = Vec::new();
    for &start in order.iter().rev() {
        if component_of[start] != usize::MAX {
            continue;
        }
        let c = components.len();
        let mut members = vec![start];
        component_of[start] = c;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &reversed[u] {
                if component_of[v] == usize::MAX {
                    component_of[v] = c;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        components.push(members);
    }
    components
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Draws a random ergodic chain: entries uniform on [0, 1), rows normalized,
/// rejected and redrawn until the result is ergodic.
///
/// Uses the substream `(seed, Chain, 0)`, so problem constructors layered on
/// top can draw from their own substreams without overlap.
pub fn random_ergodic_chain(n_states: usize, seed: u64) -> Result<FiniteChain> {
    if n_states == 0 {
        return Err(Error::Validation("chain needs at least one state".into()));
    }
    let mut rng = rng::stream(seed, Domain::Chain, 0);
    for _ in 0..GENERATION_ATTEMPT_CAP {
        let mut transition = DMatrix::zeros(n_states, n_states);
        for i in 0..n_states {
            let mut sum = 0.0;
            for j in 0..n_states {
                let p: f64 = rng.random();
                transition[(i, j)] = p;
                sum += p;
            }
            if sum == 0.0 {
                continue;
            }
            for j in 0..n_states {
                transition[(i, j)] /= sum;
            }
        }
        if check_ergodicity(&transition)?.is_ergodic() {
            return FiniteChain::new(transition);
        }
    }
    Err(Error::Numeric(format!(
        "no ergodic chain found in {GENERATION_ATTEMPT_CAP} attempts"
    )))
}

/// A stationary Gaussian AR(1) process `x' = rho x + scale z` with
/// independent standard normal `z` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArOneProcess {
    dim: usize,
    autocorrelation: f64,
    noise_scale: f64,
}

impl ArOneProcess {
    pub fn new(dim: usize, autocorrelation: f64, noise_scale: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("AR(1) process needs at least one coordinate".into()));
        }
        if !(autocorrelation.abs() < 1.0) {
            return Err(Error::Validation(format!(
                "AR(1) autocorrelation {autocorrelation} must satisfy |rho| < 1"
            )));
        }
        if !(noise_scale > 0.0) {
            return Err(Error::Validation(format!(
                "AR(1) noise scale {noise_scale} must be positive"
            )));
        }
        Ok(Self { dim, autocorrelation, noise_scale })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn autocorrelation(&self) -> f64 {
        self.autocorrelation
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// Draws from the stationary law, a centered normal with standard
    /// deviation `scale / sqrt(1 - rho^2)` per coordinate.
    pub fn stationary_draw(&self, rng: &mut Stream) -> DVector<f64> {
        let sd = self.noise_scale / libm::sqrt(1.0 - self.autocorrelation * self.autocorrelation);
        DVector::from_fn(self.dim, |_, _| sd * rng::standard_normal(rng))
    }

    /// Advances the process one step in place.
    pub fn step(&self, current: &mut DVector<f64>, rng: &mut Stream) {
        for x in current.iter_mut() {
            *x = self.autocorrelation * *x + self.noise_scale * rng::standard_normal(rng);
        }
    }
}
