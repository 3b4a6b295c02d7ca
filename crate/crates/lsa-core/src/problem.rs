//! Problem families for stochastic approximation experiments.
//!
//! The central type is [`LsaProblem`]: per-state update maps `A(x)`, `b(x)`
//! over a finite chain, together with the averaged dynamics `a_bar`, `b_bar`
//! and the target `theta_star` solving `a_bar * theta + b_bar = 0`. Around it
//! sit four structured families used to probe when the constant-stepsize
//! iteration has zero asymptotic bias: multiplicative matrix noise around a
//! fixed mean dynamics, linear regression with independent additive noise,
//! realizable temporal-difference learning on a Markov reward process, and a
//! logistic-score iteration on AR(1) covariates.

use alloc::{format, string::String, vec, vec::Vec};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::chain::{random_ergodic_chain, ArOneProcess, FiniteChain};
use crate::error::{Error, Result};
use crate::rng::{self, Domain, Stream};

/// Largest allowed deviation when validating stored averaged dynamics
/// against a recomputation from per-state maps.
pub const AVERAGE_RECOMPUTE_TOLERANCE: f64 = 1e-12;
/// Largest allowed steady-state residual `||a_bar * theta_star + b_bar||_2`.
pub const STEADY_STATE_TOLERANCE: f64 = 1e-10;
/// Largest allowed realizability residual for an [`MrpProblem`].
pub const REALIZABILITY_TOLERANCE: f64 = 1e-10;
/// Attempt cap for generators that redraw on degenerate samples.
const GENERATION_ATTEMPT_CAP: u64 = 32;

/// Largest real part among the eigenvalues of a square matrix, computed from
/// a real Schur decomposition.
pub fn max_real_eigenvalue(matrix: &DMatrix<f64>) -> Result<f64> {
    let schur = nalgebra::linalg::Schur::try_new(matrix.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| Error::Numeric("eigenvalue iteration did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `a_bar * theta + b_bar = 0` for the target vector.
pub fn target_vector(a_bar: &DMatrix<f64>, b_bar: &DVector<f64>) -> Result<DVector<f64>> {
    let theta = nalgebra::linalg::LU::new(a_bar.clone())
        .solve(&(-b_bar))
        .ok_or_else(|| Error::Numeric("averaged dynamics matrix is singular".into()))?;
    let residual = (a_bar * &theta + b_bar).norm();
    if residual > STEADY_STATE_TOLERANCE {
        return Err(Error::Numeric(format!(
            "steady-state residual {residual:.3e} exceeds {STEADY_STATE_TOLERANCE:.0e}"
        )));
    }
    Ok(theta)
}

fn weighted_average_maps(
    chain: &FiniteChain,
    a_maps: &[DMatrix<f64>],
    b_maps: &[DVector<f64>],
) -> (DMatrix<f64>, DVector<f64>) {
    let dim = b_maps[0].len();
    let mut a_bar = DMatrix::zeros(dim, dim);
    let mut b_bar = DVector::zeros(dim);
    for x in 0..chain.n_states() {
        let weight = chain.stationary()[x];
        a_bar += weight * &a_maps[x];
        b_bar += weight * &b_maps[x];
    }
    (a_bar, b_bar)
}

fn validate_map_shapes(
    chain: &FiniteChain,
    a_maps: &[DMatrix<f64>],
    b_maps: &[DVector<f64>],
) -> Result<usize> {
    let n = chain.n_states();
    if a_maps.len() != n || b_maps.len() != n {
        return Err(Error::Validation(format!(
            "{} update matrices and {} intercepts for {} states",
            a_maps.len(),
            b_maps.len(),
            n
        )));
    }
    let dim = b_maps[0].len();
    if dim == 0 {
        return Err(Error::Validation("problem dimension must be at least 1".into()));
    }
    for (x, (a, b)) in a_maps.iter().zip(b_maps).enumerate() {
        if a.nrows() != dim || a.ncols() != dim || b.len() != dim {
            return Err(Error::Validation(format!(
                "state {x} has A of shape {}x{} and b of length {}, expected dimension {dim}",
                a.nrows(),
                a.ncols(),
                b.len()
            )));
        }
    }
    Ok(dim)
}

/// A linear stochastic approximation problem on a finite chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LsaProblem {
    chain: FiniteChain,
    dim: usize,
    a_maps: Vec<DMatrix<f64>>,
    b_maps: Vec<DVector<f64>>,
    a_bar: DMatrix<f64>,
    b_bar: DVector<f64>,
    theta_star: DVector<f64>,
}

impl LsaProblem {
    /// Builds a problem from per-state maps, computing the averaged dynamics
    /// and the target vector. Requires the averaged matrix to be Hurwitz.
    pub fn new(
        chain: FiniteChain,
        a_maps: Vec<DMatrix<f64>>,
        b_maps: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let dim = validate_map_shapes(&chain, &a_maps, &b_maps)?;
        let (a_bar, b_bar) = weighted_average_maps(&chain, &a_maps, &b_maps);
        let max_re = max_real_eigenvalue(&a_bar)?;
        if max_re >= 0.0 {
            return Err(Error::Validation(format!(
                "averaged dynamics matrix is not Hurwitz: max eigenvalue real part {max_re:.3e}"
            )));
        }
        let theta_star = target_vector(&a_bar, &b_bar)?;
        Ok(Self { chain, dim, a_maps, b_maps, a_bar, b_bar, theta_star })
    }

    /// Rebuilds a problem from stored fields, validating them against a
    /// recomputation instead of overwriting. Intended for deserialization.
    pub fn from_parts(
        chain: FiniteChain,
        a_maps: Vec<DMatrix<f64>>,
        b_maps: Vec<DVector<f64>>,
        a_bar: DMatrix<f64>,
        b_bar: DVector<f64>,
        theta_star: DVector<f64>,
    ) -> Result<Self> {
        let dim = validate_map_shapes(&chain, &a_maps, &b_maps)?;
        if a_bar.nrows() != dim || a_bar.ncols() != dim || b_bar.len() != dim || theta_star.len() != dim
        {
            return Err(Error::Validation("averaged dynamics fields disagree on dimension".into()));
        }
        let (a_check, b_check) = weighted_average_maps(&chain, &a_maps, &b_maps);
        let a_dev = (&a_check - &a_bar).amax();
        let b_dev = (&b_check - &b_bar).amax();
        if a_dev > AVERAGE_RECOMPUTE_TOLERANCE || b_dev > AVERAGE_RECOMPUTE_TOLERANCE {
            return Err(Error::Validation(format!(
                "stored averaged dynamics deviate from recomputation by {:.3e}",
                a_dev.max(b_dev)
            )));
        }
        let max_re = max_real_eigenvalue(&a_bar)?;
        if max_re >= 0.0 {
            return Err(Error::Validation(format!(
                "averaged dynamics matrix is not Hurwitz: max eigenvalue real part {max_re:.3e}"
            )));
        }
        let residual = (&a_bar * &theta_star + &b_bar).norm();
        if residual > STEADY_STATE_TOLERANCE {
            return Err(Error::Validation(format!(
                "stored target vector has steady-state residual {residual:.3e}"
            )));
        }
        Ok(Self { chain, dim, a_maps, b_maps, a_bar, b_bar, theta_star })
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a_map(&self, state: usize) -> &DMatrix<f64> {
        &self.a_maps[state]
    }

    pub fn b_map(&self, state: usize) -> &DVector<f64> {
        &self.b_maps[state]
    }

    pub fn a_maps(&self) -> &[DMatrix<f64>] {
        &self.a_maps
    }

    pub fn b_maps(&self) -> &[DVector<f64>] {
        &self.b_maps
    }

    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    pub fn b_bar(&self) -> &DVector<f64> {
        &self.b_bar
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    /// Largest spectral norm among the per-state update matrices.
    pub fn a_max(&self) -> f64 {
        self.a_maps
            .iter()
            .map(|a| spectral_norm(a))
            .fold(0.0, f64::max)
    }

    /// Largest Euclidean norm among the per-state intercepts.
    pub fn b_max(&self) -> f64 {
        self.b_maps.iter().map(|b| b.norm()).fold(0.0, f64::max)
    }

    /// Rescales every `A(x)` and `b(x)` by the same factor so the averaged
    /// dynamics matrix gets spectral norm `target`. The target vector is
    /// unchanged because the steady-state equation scales homogeneously.
    pub fn with_dynamics_norm(&self, target: f64) -> Result<Self> {
        if !(target > 0.0) {
            return Err(Error::Validation(format!("target norm {target} must be positive")));
        }
        let scale = target / spectral_norm(&self.a_bar);
        let a_maps = self.a_maps.iter().map(|a| scale * a).collect();
        let b_maps = self.b_maps.iter().map(|b| scale * b).collect();
        Self::new(self.chain.clone(), a_maps, b_maps)
    }

    /// The same per-state maps driven by i.i.d. draws from the stationary
    /// distribution instead of the Markov kernel. Averaged dynamics and
    /// target are unchanged.
    pub fn with_iid_sampling(&self) -> Result<Self> {
        Self::new(self.chain.to_iid(), self.a_maps.clone(), self.b_maps.clone())
    }
}

fn spectral_norm(matrix: &DMatrix<f64>) -> f64 {
    matrix
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Draws a random problem: a random ergodic chain, a Hurwitz-shifted
/// standard-normal averaged matrix, and per-state perturbations centered so
/// the stationary average reproduces the mean dynamics exactly.
///
/// The last state absorbs the correction `-sum_x pi_x E(x) / pi_n`, which
/// makes `sum_x pi(x) A(x)` equal the mean matrix up to rounding. Intercepts
/// have entries uniform on [-1, 1]. Degenerate draws (a mean matrix with a
/// zero-real-part eigenvalue or a singular solve) move to the next substream.
pub fn random_lsa_problem(n_states: usize, dim: usize, seed: u64) -> Result<LsaProblem> {
    if n_states < 2 {
        return Err(Error::Validation("random problems need at least two states".into()));
    }
    if dim == 0 {
        return Err(Error::Validation("problem dimension must be at least 1".into()));
    }
    let chain = random_ergodic_chain(n_states, seed)?;
    let mut last_error: Option<Error> = None;
    for attempt in 0..GENERATION_ATTEMPT_CAP {
        let mut rng = rng::stream(seed, Domain::Problem, attempt);
        let gaussian = DMatrix::from_fn(dim, dim, |_, _| rng::standard_normal(&mut rng));
        let max_re = max_real_eigenvalue(&gaussian)?;
        let mean_dynamics = if max_re >= 0.0 {
            &gaussian - DMatrix::from_diagonal_element(dim, dim, 2.0 * max_re)
        } else {
            gaussian
        };

        let mut perturbations: Vec<DMatrix<f64>> = (0..n_states - 1)
            .map(|_| DMatrix::from_fn(dim, dim, |_, _| uniform_symmetric(&mut rng)))
            .collect();
        let mut correction = DMatrix::zeros(dim, dim);
        for (x, e) in perturbations.iter().enumerate() {
            correction += chain.stationary()[x] * e;
        }
        perturbations.push(-correction / chain.stationary()[n_states - 1]);

        let a_maps: Vec<DMatrix<f64>> =
            perturbations.into_iter().map(|e| &mean_dynamics + e).collect();
        let b_maps: Vec<DVector<f64>> = (0..n_states)
            .map(|_| DVector::from_fn(dim, |_, _| uniform_symmetric(&mut rng)))
            .collect();

        match LsaProblem::new(chain.clone(), a_maps, b_maps) {
            Ok(problem) => return Ok(problem),
            Err(e) => last_error = Some(e),
        }
    }
    Err(Error::Numeric(format!(
        "no valid random problem in {GENERATION_ATTEMPT_CAP} attempts; last error: {}",
        last_error.map_or_else(|| String::from("none"), |e| format!("{e}"))
    )))
}

fn uniform_symmetric(rng: &mut Stream) -> f64 {
    2.0 * rng.random::<f64>() - 1.0
}

fn unit_sphere_vector(dim: usize, rng: &mut Stream) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| rng::standard_normal(rng));
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Per-state residual norms of the backward conditional
/// `E[A(x_t) theta* + b(x_t) | x_{t+1} = x]`.
///
/// The conditional law of `x_t` given `x_{t+1} = x` puts mass
/// `pi(s) P(s, x) / pi(x)` on `s`, so the residual at `x` is the norm of
/// `sum_s pi(s) P(s, x) (A(s) theta* + b(s)) / pi(x)`. All residuals below
/// 1e-8 certify the sufficient condition for zero asymptotic bias; an
/// i.i.d. chain always passes because the conditional collapses to the
/// steady-state equation.
pub fn check_zero_bias_condition(problem: &LsaProblem) -> Result<Vec<f64>> {
    let chain = problem.chain();
    let n = chain.n_states();
    let contributions: Vec<DVector<f64>> = (0..n)
        .map(|s| problem.a_map(s) * problem.theta_star() + problem.b_map(s))
        .collect();
    let mut residuals = Vec::with_capacity(n);
    for x in 0..n {
        let weight = chain.stationary()[x];
        if weight <= 0.0 {
            return Err(Error::Validation(format!(
                "state {x} has zero stationary mass; the backward conditional is undefined"
            )));
        }
        let mut conditional = DVector::zeros(problem.dim());
        for s in 0..n {
            conditional += chain.stationary()[s] * chain.transition()[(s, x)] * &contributions[s];
        }
        residuals.push(conditional.norm() / weight);
    }
    Ok(residuals)
}

/// LSA with a fixed mean dynamics matrix perturbed by fresh bounded
/// zero-mean matrix noise each step: `A(s, xi) = a_bar + xi`, `b(s, xi) =
/// b(s)`, with `xi` entries i.i.d. uniform on [-u, u].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplicativeNoiseProblem {
    chain: FiniteChain,
    dim: usize,
    a_bar: DMatrix<f64>,
    b_maps: Vec<DVector<f64>>,
    b_bar: DVector<f64>,
    theta_star: DVector<f64>,
    noise_bound: f64,
}

/// Builds the multiplicative-noise variant of a base problem, keeping its
/// chain, intercepts, averaged dynamics, and target.
///
/// The per-step update matrix satisfies `||a_bar + xi||_2 <= ||a_bar||_2 +
/// d*u`, and that bound must stay within the unit normalization required of
/// update matrices; rescale the base with
/// [`LsaProblem::with_dynamics_norm`] first if it does not. Noise is drawn
/// at run time from the run's stream, so coupled runs share one noise
/// sequence.
pub fn multiplicative_noise_problem(
    base: &LsaProblem,
    noise_bound: f64,
) -> Result<MultiplicativeNoiseProblem> {
    if !(noise_bound >= 0.0) {
        return Err(Error::Validation(format!("noise bound {noise_bound} must be nonnegative")));
    }
    let worst_norm = spectral_norm(base.a_bar()) + base.dim() as f64 * noise_bound;
    if worst_norm > 1.0 + 1e-12 {
        return Err(Error::Validation(format!(
            "update matrix norm can reach {worst_norm:.6}, above the unit bound; \
             rescale the base dynamics or shrink the noise bound"
        )));
    }
    Ok(MultiplicativeNoiseProblem {
        chain: base.chain().clone(),
        dim: base.dim(),
        a_bar: base.a_bar().clone(),
        b_maps: base.b_maps().to_vec(),
        b_bar: base.b_bar().clone(),
        theta_star: base.theta_star().clone(),
        noise_bound,
    })
}

impl MultiplicativeNoiseProblem {
    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a_bar(&self) -> &DMatrix<f64> {
        &self.a_bar
    }

    pub fn b_map(&self, state: usize) -> &DVector<f64> {
        &self.b_maps[state]
    }

    pub fn b_bar(&self) -> &DVector<f64> {
        &self.b_bar
    }

    pub fn theta_star(&self) -> &DVector<f64> {
        &self.theta_star
    }

    pub fn noise_bound(&self) -> f64 {
        self.noise_bound
    }

    /// The deterministic-dynamics problem this family averages to:
    /// `A(s) = a_bar` for every state with the intercepts kept. Running it
    /// reproduces the noise-free (`u = 0`) update exactly.
    pub fn state_averaged(&self) -> LsaProblem {
        let a_maps = vec![self.a_bar.clone(); self.chain.n_states()];
        LsaProblem::new(self.chain.clone(), a_maps, self.b_maps.clone())
            .expect("averaged dynamics were validated when the base problem was built")
    }

    /// Backward-conditional residuals for this family.
    ///
    /// The matrix noise is independent of everything else and has exact
    /// zero mean, so it drops out of the conditional analytically; what
    /// remains is the state-marginal condition on `A(s) = a_bar`, `b(s)`,
    /// evaluated by direct summation.
    pub fn zero_bias_residuals(&self) -> Result<Vec<f64>> {
        check_zero_bias_condition(&self.state_averaged())
    }
}

/// Linear regression in stochastic-approximation form: states index
/// covariate vectors `s`, the update uses `A(x) = -s s^T` and
/// `b(x) = s (s^T w* + eps)` with independent Gaussian noise `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    chain: FiniteChain,
    covariates: Vec<DVector<f64>>,
    true_weights: DVector<f64>,
    noise_sd: f64,
}

impl RegressionProblem {
    pub fn new(
        chain: FiniteChain,
        covariates: Vec<DVector<f64>>,
        true_weights: DVector<f64>,
        noise_sd: f64,
    ) -> Result<Self> {
        if covariates.len() != chain.n_states() {
            return Err(Error::Validation(format!(
                "{} covariate vectors for {} states",
                covariates.len(),
                chain.n_states()
            )));
        }
        let dim = true_weights.len();
        if dim == 0 {
            return Err(Error::Validation("regression dimension must be at least 1".into()));
        }
        if covariates.iter().any(|s| s.len() != dim) {
            return Err(Error::Validation("covariate dimensions disagree with the weights".into()));
        }
        if !(noise_sd >= 0.0) {
            return Err(Error::Validation(format!("noise level {noise_sd} must be nonnegative")));
        }
        let mut second_moment = DMatrix::zeros(dim, dim);
        for (x, s) in covariates.iter().enumerate() {
            second_moment += chain.stationary()[x] * s * s.transpose();
        }
        if nalgebra::linalg::Cholesky::new(second_moment).is_none() {
            return Err(Error::Validation(
                "covariate second moment is rank-deficient; the target is not identified".into(),
            ));
        }
        Ok(Self { chain, covariates, true_weights, noise_sd })
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn dim(&self) -> usize {
        self.true_weights.len()
    }

    pub fn covariate(&self, state: usize) -> &DVector<f64> {
        &self.covariates[state]
    }

    pub fn true_weights(&self) -> &DVector<f64> {
        &self.true_weights
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    /// The target of the iteration; regression is realizable, so it is the
    /// true weight vector.
    pub fn theta_star(&self) -> &DVector<f64> {
        &self.true_weights
    }
}

/// Draws a regression problem: a random ergodic chain over `n_states`
/// covariates with standard-normal entries scaled by `1/sqrt(dim)`, and a
/// true weight vector uniform on the unit sphere.
pub fn random_regression_problem(
    n_states: usize,
    dim: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<RegressionProblem> {
    if n_states < 2 {
        return Err(Error::Validation("random problems need at least two states".into()));
    }
    if dim == 0 {
        return Err(Error::Validation("regression dimension must be at least 1".into()));
    }
    if n_states < dim {
        return Err(Error::Validation(format!(
            "{n_states} covariates cannot span dimension {dim}"
        )));
    }
    let chain = random_ergodic_chain(n_states, seed)?;
    let mut last_error: Option<Error> = None;
    for attempt in 0..GENERATION_ATTEMPT_CAP {
        let mut rng = rng::stream(seed, Domain::Problem, attempt);
        let scale = 1.0 / libm::sqrt(dim as f64);
        let covariates: Vec<DVector<f64>> = (0..n_states)
            .map(|_| DVector::from_fn(dim, |_, _| scale * rng::standard_normal(&mut rng)))
            .collect();
        let true_weights = unit_sphere_vector(dim, &mut rng);
        match RegressionProblem::new(chain.clone(), covariates, true_weights, noise_sd) {
            Ok(problem) => return Ok(problem),
            Err(e) => last_error = Some(e),
        }
    }
    Err(Error::Numeric(format!(
        "no valid regression problem in {GENERATION_ATTEMPT_CAP} attempts; last error: {}",
        last_error.map_or_else(|| String::from("none"), |e| format!("{e}"))
    )))
}

/// A Markov reward process with linear value approximation, realizable by
/// construction: `V(s) = phi(s)^T v` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct MrpProblem {
    chain: FiniteChain,
    features: Vec<DVector<f64>>,
    rewards: Vec<f64>,
    discount: f64,
    value_weights: DVector<f64>,
}

impl MrpProblem {
    pub fn new(
        chain: FiniteChain,
        features: Vec<DVector<f64>>,
        rewards: Vec<f64>,
        discount: f64,
        value_weights: DVector<f64>,
    ) -> Result<Self> {
        let n = chain.n_states();
        if features.len() != n || rewards.len() != n {
            return Err(Error::Validation(format!(
                "{} feature vectors and {} rewards for {n} states",
                features.len(),
                rewards.len()
            )));
        }
        let dim = value_weights.len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::Validation("feature dimensions disagree with the weights".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Validation(format!("discount {discount} must lie in [0, 1)")));
        }
        let norm_cap = 1.0 / libm::sqrt(1.0 + discount);
        let max_norm = features.iter().map(|f| f.norm()).fold(0.0, f64::max);
        if max_norm > norm_cap + 1e-12 {
            return Err(Error::Validation(format!(
                "feature norm {max_norm:.6} exceeds the cap {norm_cap:.6}"
            )));
        }
        let problem = Self { chain, features, rewards, discount, value_weights };
        let residual = problem.realizability_residual();
        if residual > REALIZABILITY_TOLERANCE {
            return Err(Error::Validation(format!(
                "realizability residual {residual:.3e} exceeds {REALIZABILITY_TOLERANCE:.0e}"
            )));
        }
        Ok(problem)
    }

    pub fn chain(&self) -> &FiniteChain {
        &self.chain
    }

    pub fn dim(&self) -> usize {
        self.value_weights.len()
    }

    pub fn feature(&self, state: usize) -> &DVector<f64> {
        &self.features[state]
    }

    pub fn features(&self) -> &[DVector<f64>] {
        &self.features
    }

    pub fn reward(&self, state: usize) -> f64 {
        self.rewards[state]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn value_weights(&self) -> &DVector<f64> {
        &self.value_weights
    }

    /// The target of the temporal-difference iteration; equals the value
    /// weights by realizability.
    pub fn theta_star(&self) -> &DVector<f64> {
        &self.value_weights
    }

    /// Largest violation of the Bellman identity
    /// `phi(s)^T v = r(s) + gamma * sum_{s'} P(s, s') phi(s')^T v`.
    pub fn realizability_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.chain.n_states() {
            let mut expected_next = 0.0;
            for s_next in 0..self.chain.n_states() {
                let weight = self.chain.transition()[(s, s_next)];
                if weight > 0.0 {
                    expected_next += weight * self.features[s_next].dot(&self.value_weights);
                }
            }
            let residual = self.features[s].dot(&self.value_weights)
                - self.rewards[s]
                - self.discount * expected_next;
            worst = worst.max(residual.abs());
        }
        worst
    }

    /// Backward-conditional residuals for the extended state `(s, s_next)`
    /// of the fresh-next-state sampling scheme.
    ///
    /// The extended chain moves `(s, s') -> (u, u')` with probability
    /// `P(s, u) P(u, u')` and has stationary mass `pi(s) P(s, s')`, so the
    /// conditional law of the previous extended state given the next one
    /// depends only on `u`. The residual at `u` is the norm of the double
    /// sum over `(s, s')` of `pi(s) P(s, s') P(s, u) / pi(u)` times
    /// `phi(s) ((gamma phi(s') - phi(s))^T v + r(s))`, evaluated without
    /// using the realizability identity to collapse the inner sum.
    pub fn backward_conditional_residuals(&self) -> Result<Vec<f64>> {
        let n = self.chain.n_states();
        let pi = self.chain.stationary();
        let p = self.chain.transition();
        let mut residuals = Vec::with_capacity(n);
        for u in 0..n {
            if pi[u] <= 0.0 {
                return Err(Error::Validation(format!(
                    "state {u} has zero stationary mass; the backward conditional is undefined"
                )));
            }
            let mut conditional = DVector::zeros(self.dim());
            for s in 0..n {
                for s_next in 0..n {
                    let weight = pi[s] * p[(s, s_next)] * p[(s, u)];
                    if weight == 0.0 {
                        continue;
                    }
                    let temporal_difference = self.rewards[s]
                        + self.discount * self.features[s_next].dot(&self.value_weights)
                        - self.features[s].dot(&self.value_weights);
                    conditional += weight * temporal_difference * &self.features[s];
                }
            }
            residuals.push(conditional.norm() / pi[u]);
        }
        Ok(residuals)
    }
}

/// Draws a realizable MRP: random ergodic chain, Gaussian features rescaled
/// so the largest feature norm sits exactly at the cap `1/sqrt(1+gamma)`,
/// Gaussian value weights, and rewards defined by the Bellman identity so
/// realizability holds by construction.
pub fn realizable_td_problem(
    n_states: usize,
    dim: usize,
    discount: f64,
    seed: u64,
) -> Result<MrpProblem> {
    if n_states < 2 {
        return Err(Error::Validation("random problems need at least two states".into()));
    }
    if dim == 0 || dim > n_states {
        return Err(Error::Validation(format!(
            "feature dimension {dim} must lie in 1..={n_states}"
        )));
    }
    let chain = random_ergodic_chain(n_states, seed)?;
    let mut rng = rng::stream(seed, Domain::Problem, 0);
    let mut features: Vec<DVector<f64>> = (0..n_states)
        .map(|_| DVector::from_fn(dim, |_, _| rng::standard_normal(&mut rng)))
        .collect();
    let max_norm = features.iter().map(|f| f.norm()).fold(0.0, f64::max);
    let scale = (1.0 / libm::sqrt(1.0 + discount)) / max_norm;
    for f in features.iter_mut() {
        *f *= scale;
    }
    let value_weights = DVector::from_fn(dim, |_, _| rng::standard_normal(&mut rng));
    let rewards: Vec<f64> = (0..n_states)
        .map(|s| {
            let mut expected_next = 0.0;
            for s_next in 0..n_states {
                expected_next +=
                    chain.transition()[(s, s_next)] * features[s_next].dot(&value_weights);
            }
            features[s].dot(&value_weights) - discount * expected_next
        })
        .collect();
    MrpProblem::new(chain, features, rewards, discount, value_weights)
}

/// Logistic-score estimation on AR(1) Gaussian covariates: labels are
/// Bernoulli with success probability `sigmoid(w*^T x)` and the iteration
/// follows the score `x (y - sigmoid(w^T x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearProblem {
    covariate_process: ArOneProcess,
    true_weights: DVector<f64>,
}

impl NonlinearProblem {
    pub fn new(covariate_process: ArOneProcess, true_weights: DVector<f64>) -> Result<Self> {
        if true_weights.len() != covariate_process.dim() {
            return Err(Error::Validation(
                "weight dimension disagrees with the covariate process".into(),
            ));
        }
        if (true_weights.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "true weights have norm {:.12}, expected a unit vector",
                true_weights.norm()
            )));
        }
        Ok(Self { covariate_process, true_weights })
    }

    pub fn covariate_process(&self) -> &ArOneProcess {
        &self.covariate_process
    }

    pub fn dim(&self) -> usize {
        self.true_weights.len()
    }

    pub fn true_weights(&self) -> &DVector<f64> {
        &self.true_weights
    }
}

/// Draws a logistic problem with a unit-variance stationary AR(1) covariate
/// process and a true weight vector uniform on the unit sphere.
pub fn logistic_problem(dim: usize, autocorrelation: f64, seed: u64) -> Result<NonlinearProblem> {
    let noise_scale = libm::sqrt(1.0 - autocorrelation * autocorrelation);
    let process = ArOneProcess::new(dim, autocorrelation, noise_scale)?;
    let mut rng = rng::stream(seed, Domain::Problem, 0);
    NonlinearProblem::new(process, unit_sphere_vector(dim, &mut rng))
}

/// Any of the problem families the engine can iterate.
#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Linear(LsaProblem),
    MultiplicativeNoise(MultiplicativeNoiseProblem),
    Regression(RegressionProblem),
    TemporalDifference(MrpProblem),
    Logistic(NonlinearProblem),
}

impl Problem {
    pub fn dim(&self) -> usize {
        match self {
            Problem::Linear(p) => p.dim(),
            Problem::MultiplicativeNoise(p) => p.dim(),
            Problem::Regression(p) => p.dim(),
            Problem::TemporalDifference(p) => p.dim(),
            Problem::Logistic(p) => p.dim(),
        }
    }

    /// The vector the iteration estimates.
    pub fn target(&self) -> &DVector<f64> {
        match self {
            Problem::Linear(p) => p.theta_star(),
            Problem::MultiplicativeNoise(p) => p.theta_star(),
            Problem::Regression(p) => p.theta_star(),
            Problem::TemporalDifference(p) => p.theta_star(),
            Problem::Logistic(p) => p.true_weights(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Problem::Linear(_) => "lsa",
            Problem::MultiplicativeNoise(_) => "mult-noise",
            Problem::Regression(_) => "regression",
            Problem::TemporalDifference(_) => "td",
            Problem::Logistic(_) => "logistic",
        }
    }
}
