//! The comma-separated method mini-language used on the command line.
//!
//! Tokens:
//! - `const:<alpha>` constant stepsize with equal-batch intervals
//! - `rr:<alpha1>:<alpha2>[:<alpha3>...]` extrapolation across coupled runs
//! - `rr-geo:<alpha1>:<ratio>:<count>` geometric stepsize ladder
//! - `rr-eqd:<a>:<b>:<count>` equidistant ladder from `a + b` down to `a`
//! - `dim:<base>:<exponent>` diminishing stepsize `base * k^(-exponent)`
//! - `bootstrap[:<stored>:<resample>:<replicates>]` trajectory resampling;
//!   the short form stores one run's worth of states and resamples 1% of
//!   them per replicate across 500 replicates

use anyhow::{bail, Context, Result};
use lsa_core::{equidistant_schedule, geometric_schedule, BootstrapConfig, Method, RrSchedule};

/// Replicates used by the short `bootstrap` token.
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 500;

/// Config for the short `bootstrap` token: store as many states as the
/// experiment has update steps and resample 1% of them per replicate.
pub fn default_bootstrap_config(total_steps: usize, confidence_q: f64) -> BootstrapConfig {
    BootstrapConfig {
        trajectory_length: total_steps,
        resample_size: (total_steps / 100).max(1),
        replicates: DEFAULT_BOOTSTRAP_REPLICATES,
        confidence_q,
    }
}

pub fn parse_methods(list: &str, total_steps: usize, confidence_q: f64) -> Result<Vec<Method>> {
    let tokens: Vec<&str> = list.split(',').map(str::trim).collect();
    if tokens.iter().any(|t| t.is_empty()) {
        bail!("method list '{list}' has an empty entry");
    }
    tokens
        .iter()
        .map(|token| parse_method(token, total_steps, confidence_q))
        .collect()
}

pub fn parse_method(token: &str, total_steps: usize, confidence_q: f64) -> Result<Method> {
    let mut parts = token.split(':');
    let head = parts.next().unwrap_or_default();
    let rest: Vec<&str> = parts.collect();
    match head {
        "const" => {
            expect_args(token, &rest, 1)?;
            Ok(Method::Constant { alpha: parse_f64(token, rest[0], "stepsize")? })
        }
        "rr" => {
            if rest.len() < 2 {
                bail!("method '{token}': extrapolation needs at least two stepsizes, like rr:0.2:0.02");
            }
            let stepsizes = rest
                .iter()
                .map(|p| parse_f64(token, p, "stepsize"))
                .collect::<Result<Vec<_>>>()?;
            let schedule =
                RrSchedule::explicit(stepsizes).with_context(|| format!("method '{token}'"))?;
            Ok(Method::Extrapolated { schedule })
        }
        "rr-geo" => {
            expect_args(token, &rest, 3)?;
            let schedule = geometric_schedule(
                parse_f64(token, rest[0], "leading stepsize")?,
                parse_f64(token, rest[1], "ratio")?,
                parse_usize(token, rest[2], "stepsize count")?,
            )
            .with_context(|| format!("method '{token}'"))?;
            Ok(Method::Extrapolated { schedule })
        }
        "rr-eqd" => {
            expect_args(token, &rest, 3)?;
            let schedule = equidistant_schedule(
                parse_f64(token, rest[0], "offset")?,
                parse_f64(token, rest[1], "span")?,
                parse_usize(token, rest[2], "stepsize count")?,
            )
            .with_context(|| format!("method '{token}'"))?;
            Ok(Method::Extrapolated { schedule })
        }
        "dim" => {
            expect_args(token, &rest, 2)?;
            Ok(Method::Diminishing {
                base: parse_f64(token, rest[0], "base stepsize")?,
                exponent: parse_f64(token, rest[1], "exponent")?,
            })
        }
        "bootstrap" => match rest.len() {
            0 => Ok(Method::Bootstrap {
                config: default_bootstrap_config(total_steps, confidence_q),
            }),
            3 => Ok(Method::Bootstrap {
                config: BootstrapConfig {
                    trajectory_length: parse_usize(token, rest[0], "stored length")?,
                    resample_size: parse_usize(token, rest[1], "resample size")?,
                    replicates: parse_usize(token, rest[2], "replicate count")?,
                    confidence_q,
                },
            }),
            _ => bail!(
                "method '{token}': use bare 'bootstrap' or bootstrap:<stored>:<resample>:<replicates>"
            ),
        },
        other => bail!(
            "unknown method '{other}' in '{token}'; expected const:, rr:, rr-geo:, rr-eqd:, dim:, or bootstrap"
        ),
    }
}

fn expect_args(token: &str, rest: &[&str], wanted: usize) -> Result<()> {
    if rest.len() != wanted {
        bail!("method '{token}' takes {wanted} argument(s), got {}", rest.len());
    }
    Ok(())
}

fn parse_f64(token: &str, text: &str, what: &str) -> Result<f64> {
    text.parse::<f64>()
        .with_context(|| format!("method '{token}': {what} '{text}' is not a number"))
}

fn parse_usize(token: &str, text: &str, what: &str) -> Result<usize> {
    text.parse::<usize>()
        .with_context(|| format!("method '{token}': {what} '{text}' is not a count"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip_through_labels() {
        let methods =
            parse_methods("const:0.2, rr:0.2:0.02, dim:0.2:0.5, bootstrap", 100_000, 0.05)
                .unwrap();
        let labels: Vec<String> = methods.iter().map(Method::label).collect();
        assert_eq!(labels, ["const:0.2", "rr:0.2:0.02", "dim:0.2:0.5", "bootstrap"]);
    }

    #[test]
    fn short_bootstrap_token_scales_with_the_run() {
        let method = parse_method("bootstrap", 100_000, 0.1).unwrap();
        match method {
            Method::Bootstrap { config } => {
                assert_eq!(config.trajectory_length, 100_000);
                assert_eq!(config.resample_size, 1_000);
                assert_eq!(config.replicates, DEFAULT_BOOTSTRAP_REPLICATES);
                assert_eq!(config.confidence_q, 0.1);
            }
            other => panic!("expected a bootstrap method, got {}", other.label()),
        }
    }

    #[test]
    fn ladder_tokens_expand_to_extrapolation_schedules() {
        let geo = parse_method("rr-geo:0.2:2:3", 100_000, 0.05).unwrap();
        match geo {
            Method::Extrapolated { schedule } => {
                assert_eq!(schedule.stepsizes(), [0.2, 0.1, 0.05]);
            }
            other => panic!("expected extrapolation, got {}", other.label()),
        }
        let eqd = parse_method("rr-eqd:0.1:0.2:3", 100_000, 0.05).unwrap();
        match eqd {
            Method::Extrapolated { schedule } => {
                assert_eq!(schedule.stepsizes().len(), 3);
            }
            other => panic!("expected extrapolation, got {}", other.label()),
        }
    }

    #[test]
    fn malformed_tokens_are_refused_with_the_token_named() {
        for bad in ["const", "const:zero", "rr:0.2", "dim:0.2", "bootstrap:5", "warp:0.1", ""] {
            let error = parse_methods(bad, 1_000, 0.05).unwrap_err();
            let text = format!("{error:#}");
            assert!(
                text.contains(bad) || text.contains("empty"),
                "error for '{bad}' does not name it: {text}"
            );
        }
    }

    #[test]
    fn duplicate_stepsizes_in_a_ladder_are_refused() {
        assert!(parse_method("rr:0.2:0.2", 1_000, 0.05).is_err());
    }
}
