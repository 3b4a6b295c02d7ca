//! On-disk formats: problem and report JSON plus the CSV tables the
//! command-line tools write. Floats are rendered with the shortest
//! round-trip representation, so identical inputs produce identical bytes.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lsa_core::{
    BatchPlan, BiasReport, BootstrapConfig, FiniteChain, InferenceReport, LsaProblem,
    PercentileRow, QqData, SummaryRow, TrialResult,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Serialized linear problem. Matrices are row-major; `A` holds one
/// flattened `dim x dim` matrix per state and `b` one intercept per state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    pub family: String,
    /// Generator seed when the problem was drawn; used to label result
    /// rows. Hand-built files may omit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub n_states: usize,
    pub dim: usize,
    /// Row-stochastic transition matrix, one row per state.
    pub transition: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub theta_star: Vec<f64>,
}

impl ProblemFile {
    pub fn from_problem(problem: &LsaProblem, seed: Option<u64>) -> Self {
        let chain = problem.chain();
        let n_states = chain.n_states();
        let transition = (0..n_states)
            .map(|row| (0..n_states).map(|col| chain.transition()[(row, col)]).collect())
            .collect();
        Self {
            family: String::from("lsa"),
            seed,
            n_states,
            dim: problem.dim(),
            transition,
            stationary: vector_values(chain.stationary()),
            a: problem.a_maps().iter().map(matrix_rows).collect(),
            b: problem.b_maps().iter().map(|b| vector_values(b)).collect(),
            a_bar: matrix_rows(problem.a_bar()),
            b_bar: vector_values(problem.b_bar()),
            theta_star: vector_values(problem.theta_star()),
        }
    }

    /// Rebuilds the problem, validating every stored derived field against
    /// a recomputation from the per-state maps and the chain.
    pub fn into_problem(&self) -> Result<LsaProblem> {
        if self.family != "lsa" {
            bail!("problem family '{}' has no JSON form; only 'lsa' does", self.family);
        }
        let n = self.n_states;
        let d = self.dim;
        if n == 0 || d == 0 {
            bail!("problem file declares {n} states and dimension {d}; both must be positive");
        }
        if self.transition.len() != n || self.transition.iter().any(|row| row.len() != n) {
            bail!("transition matrix is not {n} x {n}");
        }
        if self.stationary.len() != n {
            bail!("stationary vector has {} entries, expected {n}", self.stationary.len());
        }
        if self.a.len() != n || self.a.iter().any(|m| m.len() != d * d) {
            bail!("field A needs {n} row-major {d} x {d} matrices");
        }
        if self.b.len() != n || self.b.iter().any(|v| v.len() != d) {
            bail!("field b needs {n} intercepts of length {d}");
        }
        if self.a_bar.len() != d * d || self.b_bar.len() != d || self.theta_star.len() != d {
            bail!("averaged dynamics fields disagree with dimension {d}");
        }
        let flat: Vec<f64> = self.transition.iter().flatten().copied().collect();
        let chain = FiniteChain::with_stationary(
            DMatrix::from_row_slice(n, n, &flat),
            DVector::from_column_slice(&self.stationary),
        )?;
        let a_maps = self
            .a
            .iter()
            .map(|m| DMatrix::from_row_slice(d, d, m))
            .collect();
        let b_maps = self.b.iter().map(|v| DVector::from_column_slice(v)).collect();
        let problem = LsaProblem::from_parts(
            chain,
            a_maps,
            b_maps,
            DMatrix::from_row_slice(d, d, &self.a_bar),
            DVector::from_column_slice(&self.b_bar),
            DVector::from_column_slice(&self.theta_star),
        )?;
        Ok(problem)
    }
}

/// Serialized confidence-interval report. The covariance is row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub method: String,
    pub point_estimate: Vec<f64>,
    pub covariance: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub burn_in: usize,
    pub batch_size: usize,
    pub discard: usize,
    pub batch_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapFile {
    pub trajectory_length: usize,
    pub resample_size: usize,
    pub replicates: usize,
}

impl ReportFile {
    pub fn new(
        method: String,
        report: &InferenceReport,
        plan: Option<BatchPlan>,
        bootstrap: Option<&BootstrapConfig>,
    ) -> Self {
        Self {
            method,
            point_estimate: vector_values(&report.point_estimate),
            covariance: matrix_rows(&report.covariance),
            ci_lower: vector_values(&report.ci_lower),
            ci_upper: vector_values(&report.ci_upper),
            level: report.level,
            plan: plan.map(|p| PlanFile {
                burn_in: p.burn_in,
                batch_size: p.batch_size,
                discard: p.discard,
                batch_count: p.batch_count,
            }),
            bootstrap: bootstrap.map(|c| BootstrapFile {
                trajectory_length: c.trajectory_length,
                resample_size: c.resample_size,
                replicates: c.replicates,
            }),
        }
    }
}

pub fn read_problem_file(path: &Path) -> Result<ProblemFile> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading problem file {}", path.display()))?;
    let file: ProblemFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing problem file {}", path.display()))?;
    Ok(file)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing to JSON")?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Shortest round-trip decimal; `NaN` for NaN so spreadsheets see a
/// consistent token.
pub fn fmt_float(value: f64) -> String {
    if value.is_nan() {
        String::from("NaN")
    } else {
        format!("{value}")
    }
}

fn fmt_flag(value: bool) -> &'static str {
    if value {
        "1"
    } else {
        "0"
    }
}

/// Per-replicate rows: one line per method per replicate, with
/// per-coordinate interval widths and coverage flags.
pub fn raw_csv(problem_seed: u64, trials: &[Vec<TrialResult>], dim: usize) -> String {
    let mut out = String::from("problem_seed,replicate,method,l2_error");
    for i in 1..=dim {
        out.push_str(&format!(",ci_width_{i}"));
    }
    for i in 1..=dim {
        out.push_str(&format!(",covered_{i}"));
    }
    out.push_str(",diverged\n");
    for (replicate, row) in trials.iter().enumerate() {
        for trial in row {
            out.push_str(&format!("{problem_seed},{replicate},{}", trial.method));
            out.push(',');
            out.push_str(&fmt_float(trial.l2_error));
            for width in &trial.ci_widths {
                out.push(',');
                out.push_str(&fmt_float(*width));
            }
            for flag in &trial.covered {
                out.push(',');
                out.push_str(fmt_flag(*flag));
            }
            out.push(',');
            out.push_str(fmt_flag(trial.diverged));
            out.push('\n');
        }
    }
    out
}

pub const SUMMARY_HEADER: &str = "method,replicates,diverged,covered,failed,l2_mean,l2_se,width_mean,width_se,coverage_percent,coverage_se";

fn summary_fields(row: &SummaryRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        row.method,
        row.replicates,
        row.diverged,
        row.covered,
        fmt_flag(row.failed),
        fmt_float(row.l2_mean),
        fmt_float(row.l2_se),
        fmt_float(row.width_mean),
        fmt_float(row.width_se),
        fmt_float(row.coverage_percent),
        fmt_float(row.coverage_se),
    )
}

/// Per-method aggregate table for one problem.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&summary_fields(row));
        out.push('\n');
    }
    out
}

/// Per-problem aggregate table for a grid of problems.
pub fn grid_csv(problem_seeds: &[u64], per_problem: &[Vec<SummaryRow>]) -> String {
    let mut out = String::from("problem_seed,");
    out.push_str(SUMMARY_HEADER);
    out.push('\n');
    for (seed, rows) in problem_seeds.iter().zip(per_problem) {
        for row in rows {
            out.push_str(&format!("{seed},"));
            out.push_str(&summary_fields(row));
            out.push('\n');
        }
    }
    out
}

/// Cross-problem percentiles of each metric, one row per method and level.
pub fn percentile_csv(rows: &[PercentileRow]) -> String {
    let mut out = String::from("method,level,l2_error,ci_width,coverage_percent\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.method,
            row.level,
            fmt_float(row.l2_error),
            fmt_float(row.ci_width),
            fmt_float(row.coverage_percent),
        ));
    }
    out
}

/// Sorted standardized replicate means against normal quantiles;
/// coordinates are one-based.
pub fn qq_csv(data: &QqData) -> String {
    let mut out = String::from("coordinate,sample_quantile,normal_quantile\n");
    for (coordinate, pairs) in data.pairs.iter().enumerate() {
        for (sample, normal) in pairs {
            out.push_str(&format!(
                "{},{},{}\n",
                coordinate + 1,
                fmt_float(*sample),
                fmt_float(*normal),
            ));
        }
    }
    out
}

/// Per-coordinate bias of the post-burn-in mean with its standard error;
/// `ratio` is bias over standard error.
pub fn bias_csv(report: &BiasReport) -> String {
    let mut out = String::from("coordinate,bias,standard_error,ratio\n");
    for i in 0..report.bias.len() {
        let bias = report.bias[i];
        let se = report.standard_error[i];
        out.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            fmt_float(bias),
            fmt_float(se),
            fmt_float(bias / se),
        ));
    }
    out
}

pub fn vector_values(vector: &DVector<f64>) -> Vec<f64> {
    vector.iter().copied().collect()
}

pub fn matrix_rows(matrix: &DMatrix<f64>) -> Vec<f64> {
    let (rows, cols) = matrix.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(matrix[(r, c)]);
        }
    }
    out
}
