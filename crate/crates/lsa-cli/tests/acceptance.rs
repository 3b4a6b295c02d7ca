//! Acceptance gate. Each test checks one release criterion end to end and
//! prints a single `acceptance: <name>: PASS (<elapsed>)` line; run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lsa_core::problem::{multiplicative_noise_problem, random_lsa_problem, realizable_td_problem};
use lsa_core::{
    equidistant_schedule, geometric_schedule, overall_mean, rr_coefficients, rr_combine,
    BatchMeans, BatchPlan, RrSchedule,
};
use nalgebra::{DMatrix, DVector};

fn pass(name: &str, started: Instant) {
    println!("acceptance: {name}: PASS ({:.1?})", started.elapsed());
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lsa")
}

fn run(dir: &Path, args: &[&str]) -> String {
    let output = Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to spawn the lsa binary");
    assert!(
        output.status.success(),
        "lsa {:?} failed with {:?}:\n{}",
        args,
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8(output.stdout).expect("stdout was not UTF-8")
}

#[derive(Debug, Clone)]
struct SummaryRecord {
    method: String,
    l2_mean: f64,
    width_mean: f64,
    coverage_percent: f64,
}

fn read_summary(path: &Path) -> Vec<SummaryRecord> {
    let text = std::fs::read_to_string(path).expect("reading summary.csv");
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("summary header").split(',').collect();
    let index = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .unwrap_or_else(|| panic!("summary.csv has no column {name}"))
    };
    let (m, l2, w, cov) =
        (index("method"), index("l2_mean"), index("width_mean"), index("coverage_percent"));
    lines
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            SummaryRecord {
                method: fields[m].to_string(),
                l2_mean: fields[l2].parse().expect("l2_mean"),
                width_mean: fields[w].parse().expect("width_mean"),
                coverage_percent: fields[cov].parse().expect("coverage_percent"),
            }
        })
        .collect()
}

fn record<'a>(rows: &'a [SummaryRecord], method: &str) -> &'a SummaryRecord {
    rows.iter()
        .find(|r| r.method == method)
        .unwrap_or_else(|| panic!("summary.csv has no row for {method}"))
}

const DESK_PROBLEM: &[&str] =
    &["gen-problem", "--states", "10", "--dim", "5", "--seed", "2", "-o", "problem.json"];

fn run_desk_experiment(dir: &Path, out: &str) -> (Vec<u8>, Vec<SummaryRecord>) {
    run(dir, DESK_PROBLEM);
    run(
        dir,
        &[
            "experiment",
            "--problem",
            "problem.json",
            "--methods",
            "const:0.2,rr:0.2:0.02,bootstrap:100000:1000:500",
            "--length",
            "100000",
            "--reps",
            "100",
            "--seed",
            "1",
            "-o",
            out,
        ],
    );
    let raw = std::fs::read(dir.join(out).join("raw.csv")).expect("raw.csv");
    let summary = read_summary(&dir.join(out).join("summary.csv"));
    (raw, summary)
}

struct DeskRun {
    _dir: tempfile::TempDir,
    raw: Vec<u8>,
    summary: Vec<SummaryRecord>,
    elapsed: Duration,
}

static DESK: OnceLock<DeskRun> = OnceLock::new();

fn desk() -> &'static DeskRun {
    DESK.get_or_init(|| {
        let started = Instant::now();
        let dir = tempfile::tempdir().expect("tempdir");
        let (raw, summary) = run_desk_experiment(dir.path(), "out");
        DeskRun { _dir: dir, raw, summary, elapsed: started.elapsed() }
    })
}

struct SplitMix(u64);

impl SplitMix {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn draw_separated_stepsizes(rng: &mut SplitMix, count: usize) -> Vec<f64> {
    let (low, high) = (1e-3f64.ln(), 0.5f64.ln());
    loop {
        let mut stepsizes: Vec<f64> =
            (0..count).map(|_| (low + rng.uniform() * (high - low)).exp()).collect();
        stepsizes.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let separated =
            stepsizes.windows(2).all(|pair| (pair[0] - pair[1]) / pair[0] >= 2e-2);
        if separated {
            return stepsizes;
        }
    }
}

fn vandermonde_solve(stepsizes: &[f64]) -> Vec<f64> {
    let count = stepsizes.len();
    let matrix =
        DMatrix::from_fn(count, count, |row, col| stepsizes[col].powi(row as i32));
    let mut rhs = DVector::zeros(count);
    rhs[0] = 1.0;
    let lu = matrix.clone().lu();
    let mut solution = lu.solve(&rhs).expect("Vandermonde system is regular");
    // Graded nodes make the system ill-conditioned; two refinement steps
    // recover the accuracy the comparison needs.
    for _ in 0..2 {
        let residual = &rhs - &matrix * &solution;
        if let Some(correction) = lu.solve(&residual) {
            solution += correction;
        }
    }
    solution.iter().copied().collect()
}

#[test]
fn criterion_rr_coefficients_match_a_direct_solve() {
    let started = Instant::now();
    let mut rng = SplitMix(0x5EED_CAFE);
    for _ in 0..200 {
        let count = 2 + (rng.next_u64() % 5) as usize;
        let stepsizes = draw_separated_stepsizes(&mut rng, count);
        let closed = rr_coefficients(&stepsizes).expect("closed-form coefficients");
        let direct = vandermonde_solve(&stepsizes);
        let scale = closed.iter().fold(1.0f64, |acc, h| acc.max(h.abs()));
        for (index, (cf, dr)) in closed.iter().zip(&direct).enumerate() {
            assert!(
                (cf - dr).abs() <= 1e-8 * scale,
                "set {stepsizes:?}: coefficient {index} closed form {cf} vs direct {dr}"
            );
        }
        let sum_residual = (closed.iter().sum::<f64>() - 1.0).abs();
        assert!(sum_residual <= 1e-9, "set {stepsizes:?}: sum residual {sum_residual:e}");
        for power in 1..count {
            let mut weighted = 0.0;
            let mut largest_term = 0.0f64;
            for (h, alpha) in closed.iter().zip(&stepsizes) {
                let term = alpha.powi(power as i32);
                weighted += h * term;
                largest_term = largest_term.max(term);
            }
            assert!(
                weighted.abs() <= 1e-9 * largest_term,
                "set {stepsizes:?}: power {power} residual {:e}",
                weighted.abs()
            );
        }
    }
    assert!(started.elapsed() < Duration::from_secs(1), "took {:?}", started.elapsed());
    pass("rr-coefficients-closed-form", started);
}

#[test]
fn criterion_synthetic_polynomial_bias_extrapolates_away() {
    let started = Instant::now();
    let target = DVector::from_vec(vec![0.7, -1.3, 2.1]);
    let bias_directions = [
        DVector::from_vec(vec![1.9, -0.4, 0.8]),
        DVector::from_vec(vec![-1.1, 2.2, 0.5]),
        DVector::from_vec(vec![0.3, 1.0, -2.0]),
    ];
    for count in [2usize, 3, 4] {
        let stepsizes: Vec<f64> = (0..count).map(|m| 0.4 / 2f64.powi(m as i32)).collect();
        let schedule = RrSchedule::explicit(stepsizes).expect("schedule");
        let plan = BatchPlan::new(0, 25, 0, 8).expect("plan");
        let runs: Vec<BatchMeans> = schedule
            .stepsizes()
            .iter()
            .map(|&alpha| {
                let mut mean = target.clone();
                for (power, direction) in bias_directions.iter().take(count - 1).enumerate() {
                    mean += alpha.powi(power as i32 + 1) * direction;
                }
                BatchMeans { means: vec![mean; 8], plan }
            })
            .collect();
        let combined = rr_combine(&runs, &schedule).expect("combine");
        let recovered = overall_mean(&combined).expect("mean");
        let deviation = (&recovered - &target).amax();
        assert!(deviation <= 1e-9, "M={count}: deviation {deviation:e}");
    }
    assert!(started.elapsed() < Duration::from_secs(1), "took {:?}", started.elapsed());
    pass("polynomial-bias-elimination", started);
}

fn closed_form_equidistant(a: f64, b: f64, count: usize, m: usize) -> f64 {
    let (count_f, m_f) = (count as f64, m as f64);
    let mut binomial = 1.0;
    for i in 1..=m {
        binomial *= (count - m + i) as f64 / i as f64;
    }
    let mut value = binomial * b * m_f / (a * (count_f - 1.0) + b * (count_f - m_f));
    for l in 1..=count {
        value *= (a * (count_f - 1.0) + b * (l as f64 - 1.0)) / (b * l as f64);
    }
    value
}

#[test]
fn criterion_ladder_coefficients_obey_their_bounds() {
    let started = Instant::now();
    for ratio in [2.0f64, 3.0, 4.0, 8.0] {
        let bound = (2.0 / (ratio - 1.0)).exp();
        for count in 2..=10 {
            let schedule = geometric_schedule(0.4, ratio, count).expect("geometric schedule");
            let largest =
                schedule.coefficients().iter().fold(0.0f64, |acc, h| acc.max(h.abs()));
            assert!(
                largest <= bound * (1.0 + 1e-12),
                "ratio {ratio} M={count}: largest coefficient {largest} above bound {bound}"
            );
        }
    }
    let (a, b) = (0.05, 0.3);
    for count in 2..=8 {
        let schedule = equidistant_schedule(a, b, count).expect("equidistant schedule");
        for (index, h) in schedule.coefficients().iter().enumerate() {
            let expected = closed_form_equidistant(a, b, count, index + 1);
            let relative = (h.abs() - expected).abs() / expected;
            assert!(
                relative <= 1e-8,
                "M={count} m={}: |h|={} but the closed form gives {expected}",
                index + 1,
                h.abs()
            );
        }
    }
    pass("ladder-coefficient-bounds", started);
}

#[test]
fn criterion_desk_scale_coverage_bands_hold() {
    let started = Instant::now();
    let desk = desk();
    let constant = record(&desk.summary, "const:0.2");
    let extrapolated = record(&desk.summary, "rr:0.2:0.02");
    assert!(
        constant.coverage_percent <= 30.0,
        "constant-stepsize coverage {}%, expected at most 30%",
        constant.coverage_percent
    );
    assert!(
        (80.0..=98.0).contains(&extrapolated.coverage_percent),
        "extrapolated coverage {}%, expected within [80, 98]",
        extrapolated.coverage_percent
    );
    assert!(
        constant.l2_mean > extrapolated.l2_mean,
        "l2 error {} is not above the extrapolated {}",
        constant.l2_mean,
        extrapolated.l2_mean
    );
    assert!(desk.elapsed <= Duration::from_secs(600), "experiment took {:?}", desk.elapsed);
    pass("desk-coverage-table", started);
}

#[test]
fn criterion_batch_count_robustness_trend() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    run(dir.path(), DESK_PROBLEM);
    for (batches, out) in [("50", "k50"), ("1000", "k1000")] {
        run(
            dir.path(),
            &[
                "experiment",
                "--problem",
                "problem.json",
                "--methods",
                "const:0.02,dim:0.2:0.5",
                "--length",
                "200000",
                "--batches",
                batches,
                "--reps",
                "100",
                "--seed",
                "1",
                "-o",
                out,
            ],
        );
    }
    let k50 = read_summary(&dir.path().join("k50").join("summary.csv"));
    let k1000 = read_summary(&dir.path().join("k1000").join("summary.csv"));
    let constant_delta = (record(&k50, "const:0.02").coverage_percent
        - record(&k1000, "const:0.02").coverage_percent)
        .abs();
    assert!(
        constant_delta <= 10.0,
        "constant-stepsize coverage moved {constant_delta} points between batch counts"
    );
    let diminishing_drop = record(&k50, "dim:0.2:0.5").coverage_percent
        - record(&k1000, "dim:0.2:0.5").coverage_percent;
    assert!(
        diminishing_drop >= 10.0,
        "diminishing coverage dropped only {diminishing_drop} points at the large batch count"
    );
    assert!(started.elapsed() <= Duration::from_secs(1200), "took {:?}", started.elapsed());
    pass("batch-count-robustness", started);
}

fn bias_command<'a>(family: &'a str, alpha: &'a str, extra: &[&'a str], out: &'a str) -> Vec<&'a str> {
    let mut args = vec![
        "bias",
        "--family",
        family,
        "--states",
        "10",
        "--dim",
        "5",
        "--problem-seed",
        "2",
        "--alpha",
        alpha,
        "--length",
        "100000",
        "--reps",
        "100",
        "--seed",
        "7",
        "-o",
        out,
    ];
    args.extend_from_slice(extra);
    args
}

const MULT_NOISE_FLAGS: &[&str] = &["--iid", "--norm", "0.6", "--noise-bound", "0.05"];
const TD_FLAGS: &[&str] = &["--discount", "0.5"];

fn worst_bias_ratio(path: &Path) -> f64 {
    let text = std::fs::read_to_string(path).expect("reading bias.csv");
    let mut worst = 0.0f64;
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let bias: f64 = fields[1].parse().expect("bias");
        let se: f64 = fields[2].parse().expect("standard error");
        worst = worst.max((bias / se).abs());
    }
    worst
}

#[test]
fn criterion_zero_bias_families_show_no_detectable_bias() {
    let started = Instant::now();
    let base = random_lsa_problem(10, 5, 2)
        .and_then(|p| p.with_iid_sampling())
        .and_then(|p| p.with_dynamics_norm(0.6))
        .expect("base problem");
    let mult = multiplicative_noise_problem(&base, 0.05).expect("multiplicative-noise problem");
    let residual = mult
        .zero_bias_residuals()
        .expect("residuals")
        .into_iter()
        .fold(0.0f64, f64::max);
    assert!(residual <= 1e-8, "multiplicative-noise residual {residual:e}");
    let td = realizable_td_problem(10, 5, 0.5, 2).expect("td problem");
    let td_residual = td
        .backward_conditional_residuals()
        .expect("residuals")
        .into_iter()
        .fold(0.0f64, f64::max);
    assert!(td_residual <= 1e-8, "td backward-conditional residual {td_residual:e}");

    let dir = tempfile::tempdir().expect("tempdir");
    for alpha in ["0.2", "0.05"] {
        for (family, extra) in [("mult-noise", MULT_NOISE_FLAGS), ("td", TD_FLAGS)] {
            let out = format!("{family}-{alpha}.csv");
            run(dir.path(), &bias_command(family, alpha, extra, &out));
            let worst = worst_bias_ratio(&dir.path().join(&out));
            assert!(
                worst <= 3.0,
                "{family} at stepsize {alpha}: worst |bias|/se {worst}, expected at most 3"
            );
        }
    }
    run(dir.path(), &bias_command("lsa", "0.2", &[], "generic.csv"));
    let generic = worst_bias_ratio(&dir.path().join("generic.csv"));
    assert!(generic > 5.0, "generic problem worst |bias|/se {generic}, expected above 5");
    pass("zero-bias-families", started);
}

#[test]
fn criterion_iid_baseline_coverage_band_holds() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    run(
        dir.path(),
        &["gen-problem", "--states", "10", "--dim", "5", "--seed", "2", "--iid", "-o", "iid.json"],
    );
    run(
        dir.path(),
        &[
            "experiment",
            "--problem",
            "iid.json",
            "--methods",
            "const:0.02",
            "--length",
            "100000",
            "--batches",
            "50",
            "--reps",
            "500",
            "--seed",
            "1",
            "-o",
            "out",
        ],
    );
    let rows = read_summary(&dir.path().join("out").join("summary.csv"));
    let coverage = record(&rows, "const:0.02").coverage_percent;
    assert!(
        (91.0..=97.0).contains(&coverage),
        "first-coordinate coverage {coverage}%, expected within [91, 97]"
    );
    pass("iid-baseline-coverage", started);
}

#[test]
fn criterion_bootstrap_baseline_band_and_width() {
    let started = Instant::now();
    let desk = desk();
    let bootstrap = record(&desk.summary, "bootstrap");
    let extrapolated = record(&desk.summary, "rr:0.2:0.02");
    assert!(
        (85.0..=98.0).contains(&bootstrap.coverage_percent),
        "bootstrap coverage {}%, expected within [85, 98]",
        bootstrap.coverage_percent
    );
    assert!(
        bootstrap.width_mean > extrapolated.width_mean,
        "bootstrap width {} is not above the extrapolated width {}",
        bootstrap.width_mean,
        extrapolated.width_mean
    );
    pass("bootstrap-baseline", started);
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    let (mut sum_x, mut sum_y) = (0.0, 0.0);
    for (x, y) in pairs {
        sum_x += x;
        sum_y += y;
    }
    let (mean_x, mean_y) = (sum_x / n, sum_y / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

#[test]
fn criterion_qq_quantile_correlations_are_high() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    run(
        dir.path(),
        &[
            "qq",
            "--states",
            "5",
            "--dim",
            "3",
            "--problem-seed",
            "2",
            "--alpha",
            "0.2",
            "--length",
            "100000",
            "--reps",
            "1000",
            "--seed",
            "9",
            "--burn-in",
            "100",
            "-o",
            "qq.csv",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("qq.csv")).expect("qq.csv");
    let mut per_coordinate: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let coordinate: usize = fields[0].parse().expect("coordinate");
        let sample: f64 = fields[1].parse().expect("sample quantile");
        let normal: f64 = fields[2].parse().expect("normal quantile");
        per_coordinate.entry(coordinate).or_default().push((sample, normal));
    }
    assert_eq!(per_coordinate.len(), 3, "expected three coordinates");
    for (coordinate, pairs) in &per_coordinate {
        assert_eq!(pairs.len(), 1000, "coordinate {coordinate} has {} pairs", pairs.len());
        let correlation = pearson(pairs);
        assert!(
            correlation >= 0.995,
            "coordinate {coordinate}: quantile correlation {correlation}, expected at least 0.995"
        );
    }
    assert!(started.elapsed() <= Duration::from_secs(900), "took {:?}", started.elapsed());
    pass("qq-normality", started);
}

#[test]
fn criterion_reruns_write_byte_identical_raw_csvs() {
    let started = Instant::now();
    let first = desk();
    let dir = tempfile::tempdir().expect("tempdir");
    let (raw_again, _) = run_desk_experiment(dir.path(), "again");
    assert_eq!(
        first.raw, raw_again,
        "the desk experiment wrote different raw.csv bytes on a rerun"
    );
    let bias_dirs = (tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir"));
    let command = bias_command("mult-noise", "0.2", MULT_NOISE_FLAGS, "bias.csv");
    run(bias_dirs.0.path(), &command);
    run(bias_dirs.1.path(), &command);
    let bias_first = std::fs::read(bias_dirs.0.path().join("bias.csv")).expect("bias.csv");
    let bias_again = std::fs::read(bias_dirs.1.path().join("bias.csv")).expect("bias.csv");
    assert_eq!(bias_first, bias_again, "the bias table differs between identical invocations");
    pass("byte-identical-reruns", started);
}

#[test]
fn percentile_grid_preserves_the_method_ordering() {
    let started = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    run(
        dir.path(),
        &[
            "percentiles",
            "--problems",
            "20",
            "--first-problem-seed",
            "101",
            "--states",
            "10",
            "--dim",
            "5",
            "--methods",
            "const:0.2,const:0.02,rr:0.2:0.02,dim:0.02:0.5",
            "--length",
            "100000",
            "--reps",
            "50",
            "--seed",
            "1",
            "-o",
            "out",
        ],
    );
    let text = std::fs::read_to_string(dir.path().join("out").join("percentiles.csv"))
        .expect("percentiles.csv");
    let mut medians: BTreeMap<String, f64> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields[1] == "50" {
            medians.insert(fields[0].to_string(), fields[4].parse().expect("coverage"));
        }
    }
    let coverage = |method: &str| {
        *medians.get(method).unwrap_or_else(|| panic!("no median row for {method}"))
    };
    assert!(
        coverage("rr:0.2:0.02") >= coverage("const:0.2"),
        "median extrapolated coverage {} below the large constant stepsize {}",
        coverage("rr:0.2:0.02"),
        coverage("const:0.2")
    );
    assert!(
        coverage("const:0.02") >= coverage("dim:0.02:0.5"),
        "median small-constant coverage {} below the diminishing schedule {}",
        coverage("const:0.02"),
        coverage("dim:0.02:0.5")
    );
    pass("percentile-grid-ordering", started);
}
