//! Bias extrapolation across coupled runs at different constant stepsizes.
//!
//! A constant-stepsize run settles around a point whose offset from the
//! target expands in powers of the stepsize. Combining M runs with
//! coefficients `h_m` chosen so that `sum h_m = 1` and
//! `sum h_m alpha_m^l = 0` for `l = 1..M-1` cancels the first `M - 1`
//! powers of that expansion. The coefficients have the closed form
//! `h_m = prod_{l != m} alpha_l / (alpha_l - alpha_m)`, the inverse of a
//! Vandermonde system.

use alloc::{format, vec::Vec};
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::inference::BatchMeans;

/// Scaled constraint residual above which a schedule is flagged as
/// ill-conditioned. The schedule is still usable; consumers surface the
/// flag instead of rejecting it.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-9;

/// How a stepsize set was generated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    Explicit,
    /// `alpha_m = initial / ratio^(m-1)`.
    Geometric { initial: f64, ratio: f64 },
    /// `alpha_m = a + b (M - m) / (M - 1)`, from `a + b` down to `a`.
    Equidistant { a: f64, b: f64 },
}

/// A set of distinct constant stepsizes with its extrapolation
/// coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct RrSchedule {
    stepsizes: Vec<f64>,
    coefficients: Vec<f64>,
    kind: ScheduleKind,
    constraint_residual: f64,
}

impl RrSchedule {
    /// Builds a schedule from explicit stepsizes (any order; stored
    /// decreasing).
    pub fn explicit(mut stepsizes: Vec<f64>) -> Result<Self> {
        stepsizes.sort_by(|x, y| y.partial_cmp(x).expect("validated finite"));
        Self::from_sorted(stepsizes, ScheduleKind::Explicit)
    }

    fn from_sorted(stepsizes: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        let coefficients = rr_coefficients(&stepsizes)?;
        let constraint_residual = constraint_residual(&stepsizes, &coefficients);
        Ok(Self { stepsizes, coefficients, kind, constraint_residual })
    }

    /// Stepsizes in strictly decreasing order.
    pub fn stepsizes(&self) -> &[f64] {
        &self.stepsizes
    }

    /// Combination coefficients aligned with [`Self::stepsizes`].
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.stepsizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stepsizes.is_empty()
    }

    /// Worst scaled violation of the combination constraints.
    pub fn constraint_residual(&self) -> f64 {
        self.constraint_residual
    }

    /// False when the stepsizes are too close for the coefficients to
    /// satisfy their constraints at working precision.
    pub fn well_conditioned(&self) -> bool {
        self.constraint_residual <= CONSTRAINT_TOLERANCE
    }

    pub fn max_coefficient_magnitude(&self) -> f64 {
        self.coefficients.iter().fold(0.0, |acc, h| acc.max(h.abs()))
    }
}

/// Closed-form extrapolation coefficients
/// `h_m = prod_{l != m} alpha_l / (alpha_l - alpha_m)`.
pub fn rr_coefficients(stepsizes: &[f64]) -> Result<Vec<f64>> {
    if stepsizes.is_empty() {
        return Err(Error::Validation("at least one stepsize is required".into()));
    }
    for (i, &alpha) in stepsizes.iter().enumerate() {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Validation(format!("stepsize {alpha} must be positive and finite")));
        }
        if stepsizes[..i].contains(&alpha) {
            return Err(Error::Validation(format!("duplicate stepsize {alpha}")));
        }
    }
    let coefficients = stepsizes
        .iter()
        .enumerate()
        .map(|(m, &alpha_m)| {
            stepsizes
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != m)
                .map(|(_, &alpha_l)| alpha_l / (alpha_l - alpha_m))
                .product()
        })
        .collect();
    Ok(coefficients)
}

/// Worst violation of the combination constraints, scaled per moment:
/// `|sum h_m - 1|` and `|sum h_m alpha_m^l| / max_m alpha_m^l` for
/// `l = 1..M-1`.
pub fn constraint_residual(stepsizes: &[f64], coefficients: &[f64]) -> f64 {
    let count = stepsizes.len();
    let mut powers: Vec<f64> = alloc::vec![1.0; count];
    let mut worst: f64 = 0.0;
    for moment in 0..count {
        let target = if moment == 0 { 1.0 } else { 0.0 };
        let mut sum = NeumaierSum::default();
        for (h, power) in coefficients.iter().zip(&powers) {
            sum.add(h * power);
        }
        let scale = if moment == 0 {
            1.0
        } else {
            powers.iter().fold(0.0f64, |acc, &p| acc.max(p))
        };
        worst = worst.max((sum.value() - target).abs() / scale);
        for (power, alpha) in powers.iter_mut().zip(stepsizes) {
            *power *= alpha;
        }
    }
    worst
}

/// Compensated accumulator so the residual reports the coefficients'
/// defect rather than the summation's.
#[derive(Default)]
struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    fn add(&mut self, value: f64) {
        let next = self.sum + value;
        self.compensation += if self.sum.abs() >= value.abs() {
            (self.sum - next) + value
        } else {
            (value - next) + self.sum
        };
        self.sum = next;
    }

    fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Largest coefficient magnitude a geometric schedule with decay ratio
/// `c >= 2` can produce: `exp(2 / (c - 1))`.
pub fn geometric_magnitude_bound(ratio: f64) -> f64 {
    libm::exp(2.0 / (ratio - 1.0))
}

/// Geometric stepsizes `alpha_1 / ratio^(m-1)` with their coefficients.
/// Verifies the coefficient magnitudes against [`geometric_magnitude_bound`].
pub fn geometric_schedule(alpha_1: f64, ratio: f64, count: usize) -> Result<RrSchedule> {
    if !(alpha_1 > 0.0 && alpha_1 < 1.0) {
        return Err(Error::Validation(format!("largest stepsize {alpha_1} must lie in (0, 1)")));
    }
    if !(ratio >= 2.0) {
        return Err(Error::Validation(format!("decay ratio {ratio} must be at least 2")));
    }
    if count == 0 {
        return Err(Error::Validation("at least one stepsize is required".into()));
    }
    let mut stepsizes = Vec::with_capacity(count);
    let mut alpha = alpha_1;
    for _ in 0..count {
        stepsizes.push(alpha);
        alpha /= ratio;
    }
    let schedule =
        RrSchedule::from_sorted(stepsizes, ScheduleKind::Geometric { initial: alpha_1, ratio })?;
    let bound = geometric_magnitude_bound(ratio);
    let largest = schedule.max_coefficient_magnitude();
    if largest > bound * (1.0 + 1e-12) {
        return Err(Error::Internal(format!(
            "geometric coefficients reach {largest:.6}, above their bound {bound:.6}"
        )));
    }
    Ok(schedule)
}

/// Closed-form coefficient magnitude for an equidistant schedule:
/// `|h_m| = C(M, m) * b m / (a (M-1) + b (M-m))
///        * prod_{l=1}^{M} (a (M-1) + b (l-1)) / (b l)`.
pub fn equidistant_magnitude(a: f64, b: f64, count: usize, m: usize) -> f64 {
    let (count_f, m_f) = (count as f64, m as f64);
    let mut value = b * m_f / (a * (count_f - 1.0) + b * (count_f - m_f));
    for i in 1..=m {
        value *= (count - m + i) as f64 / i as f64;
    }
    for l in 1..=count {
        value *= (a * (count_f - 1.0) + b * (l as f64 - 1.0)) / (b * l as f64);
    }
    value
}

/// Evenly spaced stepsizes from `a + b` down to `a` with their
/// coefficients. Cross-checks the computed magnitudes against
/// [`equidistant_magnitude`].
pub fn equidistant_schedule(a: f64, b: f64, count: usize) -> Result<RrSchedule> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Validation(format!("spacing parameters a={a}, b={b} must be positive")));
    }
    if !(a + b < 1.0) {
        return Err(Error::Validation(format!("a + b = {} must be below 1", a + b)));
    }
    if count < 2 {
        return Err(Error::Validation("an equidistant schedule needs at least 2 stepsizes".into()));
    }
    let gaps = (count - 1) as f64;
    let stepsizes: Vec<f64> =
        (1..=count).map(|m| a + b * (count - m) as f64 / gaps).collect();
    let schedule = RrSchedule::from_sorted(stepsizes, ScheduleKind::Equidistant { a, b })?;
    for (m, &h) in schedule.coefficients().iter().enumerate() {
        let expected = equidistant_magnitude(a, b, count, m + 1);
        let relative = (h.abs() - expected).abs() / expected;
        if relative > 1e-8 {
            return Err(Error::Internal(format!(
                "equidistant coefficient {} has magnitude {:.12}, closed form gives {expected:.12}",
                m + 1,
                h.abs()
            )));
        }
    }
    Ok(schedule)
}

/// Combines per-stepsize batch means into extrapolated batch means
/// `combined_k = sum_m h_m mean_k^(m)`. All runs must share the same
/// batch layout; the result reuses it, so downstream inference applies
/// unchanged.
pub fn rr_combine(runs: &[BatchMeans], schedule: &RrSchedule) -> Result<BatchMeans> {
    if runs.len() != schedule.len() {
        return Err(Error::Validation(format!(
            "{} runs for a schedule of {} stepsizes",
            runs.len(),
            schedule.len()
        )));
    }
    let first = &runs[0];
    for run in runs {
        if run.plan != first.plan || run.means.len() != first.means.len() {
            return Err(Error::Validation(
                "all runs must share the same batch plan and batch count".into(),
            ));
        }
    }
    let batches = first.means.len();
    let dim = first.means.first().map(|m| m.len()).unwrap_or(0);
    let mut combined = alloc::vec![DVector::zeros(dim); batches];
    for (run, &h) in runs.iter().zip(schedule.coefficients()) {
        for (target, mean) in combined.iter_mut().zip(&run.means) {
            if mean.len() != dim {
                return Err(Error::Validation("batch means differ in dimension".into()));
            }
            target.axpy(h, mean, 1.0);
        }
    }
    Ok(BatchMeans { means: combined, plan: first.plan })
}
