//! Batch-mean point estimates, covariance estimates, and confidence
//! intervals.
//!
//! A run's iterate stream is cut into `K` batches after a burn-in prefix;
//! within-batch means are nearly independent at constant stepsize, so their
//! spread estimates the sampling covariance of the overall mean. Constant
//! stepsize uses equal batch sizes ([`BatchPlan`]); diminishing stepsize
//! uses growing batches ([`diminishing_batch_bounds`]) whose unequal
//! lengths enter the covariance as per-batch weights.

use alloc::{format, vec, vec::Vec};
use nalgebra::{DMatrix, DVector};

use crate::engine::IterateSink;
use crate::error::{Error, Result};

/// Batch means with diagonal covariance entries below this (after the
/// `-1e-12` clamp window) indicate a numerical defect rather than roundoff.
const NEGATIVE_DIAGONAL_TOLERANCE: f64 = -1e-12;

/// Equal-size batching layout for a constant-stepsize run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    /// Iterates skipped before the first batch.
    pub burn_in: usize,
    /// Iterates per batch.
    pub batch_size: usize,
    /// Iterates dropped at the start of every batch.
    pub discard: usize,
    /// Number of batches.
    pub batch_count: usize,
}

impl BatchPlan {
    pub fn new(
        burn_in: usize,
        batch_size: usize,
        discard: usize,
        batch_count: usize,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Validation("batch size must be positive".into()));
        }
        if batch_count == 0 {
            return Err(Error::Validation("batch count must be positive".into()));
        }
        if discard >= batch_size {
            return Err(Error::Validation(format!(
                "per-batch discard {discard} must be smaller than the batch size {batch_size}"
            )));
        }
        Ok(Self { burn_in, batch_size, discard, batch_count })
    }

    /// The default layout for a run of `total_steps` updates: batch count
    /// `round(T^0.3)` unless given, batch size `T / (K + 1)`, the full
    /// first batch as burn-in, and no per-batch discard.
    pub fn with_defaults(total_steps: usize, batch_count: Option<usize>) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Validation("a plan needs at least one step".into()));
        }
        let batch_count = match batch_count {
            Some(k) => k,
            None => {
                let k = libm::round(libm::pow(total_steps as f64, 0.3)) as usize;
                k.max(1)
            }
        };
        if batch_count == 0 {
            return Err(Error::Validation("batch count must be positive".into()));
        }
        let batch_size = total_steps / (batch_count + 1);
        if batch_size == 0 {
            return Err(Error::Validation(format!(
                "{total_steps} steps cannot fill {batch_count} batches plus burn-in"
            )));
        }
        Self::new(batch_size, batch_size, 0, batch_count)
    }

    /// Iterates consumed by the plan: burn-in plus all batches.
    pub fn consumed_steps(&self) -> usize {
        self.burn_in + self.batch_count * self.batch_size
    }

    /// Iterates contributing to each batch mean.
    pub fn kept_per_batch(&self) -> usize {
        self.batch_size - self.discard
    }

    /// Total iterates behind the point estimate; scales the CI width.
    pub fn effective_count(&self) -> usize {
        self.batch_count * self.kept_per_batch()
    }
}

/// Per-batch means produced by an equal-size plan.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMeans {
    pub means: Vec<DVector<f64>>,
    pub plan: BatchPlan,
}

/// Per-batch means with explicit per-batch iterate counts, for layouts
/// whose batches differ in length.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatchMeans {
    pub means: Vec<DVector<f64>>,
    pub kept: Vec<usize>,
}

/// Point estimate with its estimated covariance and per-coordinate
/// confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub point_estimate: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub ci_lower: DVector<f64>,
    pub ci_upper: DVector<f64>,
    /// Confidence level `1 - q`.
    pub level: f64,
}

impl InferenceReport {
    pub fn from_batch_means(batch_means: &BatchMeans, q: f64) -> Result<Self> {
        let point = overall_mean(batch_means)?;
        let covariance = covariance_estimator(batch_means)?;
        let (ci_lower, ci_upper) =
            confidence_intervals(&point, &covariance, q, &batch_means.plan)?;
        Ok(Self { point_estimate: point, covariance, ci_lower, ci_upper, level: 1.0 - q })
    }

    pub fn from_weighted(weighted: &WeightedBatchMeans, q: f64) -> Result<Self> {
        let point = vector_mean(&weighted.means)?;
        let covariance = covariance_weighted(&weighted.means, &weighted.kept)?;
        let effective: usize = weighted.kept.iter().sum();
        let (ci_lower, ci_upper) =
            confidence_intervals_scaled(&point, &covariance, q, effective)?;
        Ok(Self { point_estimate: point, covariance, ci_lower, ci_upper, level: 1.0 - q })
    }

    /// True for each coordinate whose interval contains the target.
    pub fn covers(&self, target: &DVector<f64>) -> Vec<bool> {
        (0..self.point_estimate.len())
            .map(|i| self.ci_lower[i] <= target[i] && target[i] <= self.ci_upper[i])
            .collect()
    }

    /// Per-coordinate interval widths.
    pub fn widths(&self) -> DVector<f64> {
        &self.ci_upper - &self.ci_lower
    }
}

/// Cuts a materialized iterate list into batch means.
///
/// Batch `k` (1-indexed) averages the iterates at absolute indices
/// `[b + (k-1) n + n0, b + k n - 1]`.
pub fn batch_means(iterates: &[DVector<f64>], plan: &BatchPlan) -> Result<BatchMeans> {
    let mut accumulator = BatchAccumulator::new(*plan, dimension_of(iterates)?);
    for theta in iterates {
        accumulator.push(theta);
    }
    accumulator.finish()
}

fn dimension_of(iterates: &[DVector<f64>]) -> Result<usize> {
    iterates
        .first()
        .map(|v| v.len())
        .ok_or_else(|| Error::Validation("empty iterate stream".into()))
}

/// Streaming form of [`batch_means`]: feed iterates as they are produced
/// (it is an [`IterateSink`]), then call [`BatchAccumulator::finish`].
/// Memory stays at one running sum per batch.
#[derive(Debug, Clone)]
pub struct BatchAccumulator {
    plan: BatchPlan,
    seen: usize,
    sums: Vec<DVector<f64>>,
}

impl BatchAccumulator {
    pub fn new(plan: BatchPlan, dim: usize) -> Self {
        Self { plan, seen: 0, sums: vec![DVector::zeros(dim); plan.batch_count] }
    }

    pub fn finish(self) -> Result<BatchMeans> {
        let needed = self.plan.consumed_steps();
        if self.seen < needed {
            return Err(Error::Plan(format!(
                "batch plan needs {needed} iterates but only {} arrived",
                self.seen
            )));
        }
        let kept = self.plan.kept_per_batch() as f64;
        let means = self.sums.into_iter().map(|sum| sum / kept).collect();
        Ok(BatchMeans { means, plan: self.plan })
    }
}

impl IterateSink for BatchAccumulator {
    fn push(&mut self, theta: &DVector<f64>) {
        let index = self.seen;
        self.seen += 1;
        if index < self.plan.burn_in {
            return;
        }
        let offset = index - self.plan.burn_in;
        let batch = offset / self.plan.batch_size;
        if batch >= self.plan.batch_count {
            return;
        }
        if offset % self.plan.batch_size >= self.plan.discard {
            self.sums[batch] += theta;
        }
    }
}

/// Streaming batch means over explicit end indices: iterates before
/// `bounds[0]` are burned, then batch `j` covers `[bounds[j], bounds[j+1])`.
/// Produces [`WeightedBatchMeans`] carrying the unequal batch lengths.
#[derive(Debug, Clone)]
pub struct BoundedBatchAccumulator {
    bounds: Vec<usize>,
    seen: usize,
    cursor: usize,
    sums: Vec<DVector<f64>>,
}

impl BoundedBatchAccumulator {
    /// `bounds` are the `K + 1` exclusive batch-end indices `e_0..e_K`,
    /// strictly increasing with `e_0 >= 1`.
    pub fn new(bounds: Vec<usize>, dim: usize) -> Result<Self> {
        if bounds.len() < 2 {
            return Err(Error::Validation("need at least two batch-end indices".into()));
        }
        if bounds[0] == 0 || bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation(
                "batch-end indices must be strictly increasing and start past 0".into(),
            ));
        }
        let batches = bounds.len() - 1;
        Ok(Self { bounds, seen: 0, cursor: 0, sums: vec![DVector::zeros(dim); batches] })
    }

    pub fn finish(self) -> Result<WeightedBatchMeans> {
        let needed = *self.bounds.last().expect("validated nonempty");
        if self.seen < needed {
            return Err(Error::Plan(format!(
                "batch bounds need {needed} iterates but only {} arrived",
                self.seen
            )));
        }
        let kept: Vec<usize> = self.bounds.windows(2).map(|w| w[1] - w[0]).collect();
        let means = self
            .sums
            .into_iter()
            .zip(&kept)
            .map(|(sum, &count)| sum / count as f64)
            .collect();
        Ok(WeightedBatchMeans { means, kept })
    }
}

impl IterateSink for BoundedBatchAccumulator {
    fn push(&mut self, theta: &DVector<f64>) {
        let index = self.seen;
        self.seen += 1;
        if index < self.bounds[0] {
            return;
        }
        while self.cursor + 1 < self.bounds.len() && index >= self.bounds[self.cursor + 1] {
            self.cursor += 1;
        }
        if self.cursor + 1 < self.bounds.len() {
            self.sums[self.cursor] += theta;
        }
    }
}

/// Arithmetic mean of the batch means.
pub fn overall_mean(batch_means: &BatchMeans) -> Result<DVector<f64>> {
    vector_mean(&batch_means.means)
}

/// Unweighted mean of a nonempty list of equal-dimension vectors.
pub fn vector_mean(vectors: &[DVector<f64>]) -> Result<DVector<f64>> {
    let dim = dimension_of(vectors)?;
    let mut sum = DVector::zeros(dim);
    for v in vectors {
        if v.len() != dim {
            return Err(Error::Validation("vectors differ in dimension".into()));
        }
        sum += v;
    }
    Ok(sum / vectors.len() as f64)
}

/// Batch-mean covariance estimate `((n - n0) / K) sum (m_k - m)(m_k - m)^T`.
pub fn covariance_estimator(batch_means: &BatchMeans) -> Result<DMatrix<f64>> {
    let kept = vec![batch_means.plan.kept_per_batch(); batch_means.means.len()];
    covariance_weighted(&batch_means.means, &kept)
}

/// Covariance estimate for unequal batches:
/// `(1 / K) sum_k m_k (mean_k - mean)(mean_k - mean)^T` with `m_k` the
/// iterate count of batch `k`. For equal counts this is the constant-plan
/// estimator exactly.
pub fn covariance_weighted(means: &[DVector<f64>], kept: &[usize]) -> Result<DMatrix<f64>> {
    let count = means.len();
    if count < 2 {
        return Err(Error::Validation(format!(
            "covariance estimation needs at least 2 batch means, got {count}"
        )));
    }
    if kept.len() != count {
        return Err(Error::Validation(format!(
            "{} batch means but {} batch lengths",
            count,
            kept.len()
        )));
    }
    if kept.iter().any(|&m| m == 0) {
        return Err(Error::Validation("every batch must keep at least one iterate".into()));
    }
    let mean = vector_mean(means)?;
    let dim = mean.len();
    let mut sigma = DMatrix::zeros(dim, dim);
    for (batch_mean, &weight) in means.iter().zip(kept) {
        let centered = batch_mean - &mean;
        sigma.ger(weight as f64, &centered, &centered, 1.0);
    }
    Ok(sigma / count as f64)
}

/// Two-sided normal confidence intervals scaled by the plan's effective
/// iterate count: coordinate `i` gets
/// `point_i ± z_{1-q/2} sqrt(cov_ii / (K (n - n0)))`.
pub fn confidence_intervals(
    point: &DVector<f64>,
    covariance: &DMatrix<f64>,
    q: f64,
    plan: &BatchPlan,
) -> Result<(DVector<f64>, DVector<f64>)> {
    confidence_intervals_scaled(point, covariance, q, plan.effective_count())
}

/// [`confidence_intervals`] with the effective count supplied directly
/// (for unequal batches it is the total kept iterate count).
pub fn confidence_intervals_scaled(
    point: &DVector<f64>,
    covariance: &DMatrix<f64>,
    q: f64,
    effective_count: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let dim = point.len();
    if covariance.nrows() != dim || covariance.ncols() != dim {
        return Err(Error::Validation(format!(
            "covariance is {}x{}, point estimate has dimension {dim}",
            covariance.nrows(),
            covariance.ncols()
        )));
    }
    if effective_count == 0 {
        return Err(Error::Validation("effective iterate count must be positive".into()));
    }
    let z = normal_quantile(1.0 - q / 2.0)?;
    let mut lower = point.clone();
    let mut upper = point.clone();
    for i in 0..dim {
        let diagonal = covariance[(i, i)];
        if diagonal < NEGATIVE_DIAGONAL_TOLERANCE {
            return Err(Error::Numeric(format!(
                "covariance diagonal {diagonal:e} at coordinate {i} is negative"
            )));
        }
        let variance = diagonal.max(0.0) / effective_count as f64;
        let half_width = z * libm::sqrt(variance);
        lower[i] -= half_width;
        upper[i] += half_width;
    }
    Ok((lower, upper))
}

/// Inverse standard normal CDF, accurate to better than 1e-8 absolute
/// (algorithm AS 241, PPND16).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Validation(format!(
            "quantile level {p} must lie strictly between 0 and 1"
        )));
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * rational(r, &CENTRAL_NUMERATOR, &CENTRAL_DENOMINATOR));
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = libm::sqrt(-libm::log(r));
    let magnitude = if r <= 5.0 {
        let r = r - 1.6;
        rational(r, &TAIL_NUMERATOR, &TAIL_DENOMINATOR)
    } else {
        let r = r - 5.0;
        rational(r, &FAR_TAIL_NUMERATOR, &FAR_TAIL_DENOMINATOR)
    };
    Ok(if q < 0.0 { -magnitude } else { magnitude })
}

fn rational(r: f64, numerator: &[f64; 8], denominator: &[f64; 8]) -> f64 {
    horner(r, numerator) / horner(r, denominator)
}

fn horner(r: f64, coefficients: &[f64; 8]) -> f64 {
    let mut acc = coefficients[7];
    for &c in coefficients[..7].iter().rev() {
        acc = acc * r + c;
    }
    acc
}

const CENTRAL_NUMERATOR: [f64; 8] = [
    3.387_132_872_796_366_608e0,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const CENTRAL_DENOMINATOR: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const TAIL_NUMERATOR: [f64; 8] = [
    1.423_437_110_749_683_577_34e0,
    4.630_337_846_156_545_295_9e0,
    5.769_497_221_460_691_405_5e0,
    3.647_848_324_763_204_605_04e0,
    1.270_458_252_452_368_382_58e0,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const TAIL_DENOMINATOR: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87e0,
    1.676_384_830_183_803_849_4e0,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const FAR_TAIL_NUMERATOR: [f64; 8] = [
    6.657_904_643_501_103_777_2e0,
    5.463_784_911_164_114_369_9e0,
    1.784_826_539_917_291_335_8e0,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const FAR_TAIL_DENOMINATOR: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

/// Exclusive batch-end indices `e_0..e_K` for a diminishing-stepsize run of
/// `total_steps` updates: `e_k = round(((k+1) r)^{1/(1-beta)})` with
/// `r = T^{1-beta} / (K+1)`, repaired to be strictly increasing by forward
/// bumping, with `e_K = T` exactly. Iterates before `e_0` form the
/// burned first batch.
pub fn diminishing_batch_bounds(
    total_steps: usize,
    batch_count: usize,
    beta: f64,
) -> Result<Vec<usize>> {
    if total_steps == 0 || batch_count == 0 {
        return Err(Error::Validation("step and batch counts must be positive".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Validation(format!(
            "decay exponent {beta} must lie in (0, 1)"
        )));
    }
    let t = total_steps as f64;
    let growth = 1.0 / (1.0 - beta);
    let rate = libm::pow(t, 1.0 - beta) / (batch_count + 1) as f64;
    let mut bounds = Vec::with_capacity(batch_count + 1);
    let mut previous = 0usize;
    for k in 0..=batch_count {
        let end = if k == batch_count {
            total_steps
        } else {
            let raw = libm::floor(libm::pow((k + 1) as f64 * rate, growth) + 0.5);
            (raw as usize).max(previous + 1)
        };
        let room = total_steps.checked_sub(batch_count - k);
        if end <= previous || room.is_none_or(|limit| end > limit) {
            return Err(Error::Plan(format!(
                "{total_steps} steps cannot hold {} growing batches; use fewer batches",
                batch_count + 1
            )));
        }
        bounds.push(end);
        previous = end;
    }
    Ok(bounds)
}
