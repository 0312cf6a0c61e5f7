//! Synthetic request traces.
//!
//! Context lengths follow a lognormal clipped to `[min_tokens, max_tokens]`
//! whose parameters are solved so that the *clipped* distribution has the
//! requested mean and standard deviation. Arrivals are Poisson.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid trace spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible {moment}: {detail}")]
    Infeasible { moment: &'static str, detail: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TraceError>;

fn default_output_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub min_tokens: u64,
    pub max_tokens: u64,
    pub target_mean: f64,
    pub target_sd: f64,
    /// Requests per second.
    pub request_rate: f64,
    pub count: usize,
    pub seed: u64,
    /// Share of each request's context that is generated output.
    #[serde(default = "default_output_fraction")]
    pub output_fraction: f64,
}

/// Range, mean and standard deviation of the nine reference workloads
/// (0-2 short, 3-8 long).
pub const REFERENCE_TRACES: [(u64, u64, f64, f64); 9] = [
    (1, 60_000, 1233.0, 7785.68),
    (1, 60_000, 712.0, 5531.4),
    (1, 60_000, 469.0, 3506.36),
    (1, 200_000, 56362.0, 28787.78),
    (1, 280_000, 75650.0, 39479.42),
    (1, 600_000, 160239.0, 87906.67),
    (1, 480_000, 128804.0, 70647.93),
    (1, 1_200_000, 293945.0, 172169.14),
    (1, 2_000_000, 498609.0, 261817.24),
];

impl TraceSpec {
    pub fn reference(index: usize, count: usize, request_rate: f64, seed: u64) -> Option<Self> {
        let (lo, hi, mean, sd) = *REFERENCE_TRACES.get(index)?;
        Some(Self {
            min_tokens: lo,
            max_tokens: hi,
            target_mean: mean,
            target_sd: sd,
            request_rate,
            count,
            seed,
            output_fraction: default_output_fraction(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(m.to_string()));
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad("need 1 <= min_tokens <= max_tokens");
        }
        if !(self.target_sd.is_finite() && self.target_sd >= 0.0) {
            return bad("target_sd must be finite and non-negative");
        }
        if !(self.request_rate.is_finite() && self.request_rate > 0.0) {
            return bad("request_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.output_fraction) {
            return bad("output_fraction must be in [0, 1)");
        }
        let (lo, hi) = (self.min_tokens as f64, self.max_tokens as f64);
        if !(self.target_mean >= lo && self.target_mean <= hi) {
            return Err(TraceError::Infeasible {
                moment: "mean",
                detail: format!("{} is outside the length range [{lo}, {hi}]", self.target_mean),
            });
        }
        Ok(())
    }
}

/// Mean and standard deviation of `clamp(exp(mu + sigma Z), lo, hi)`.
pub fn clipped_lognormal_moments(mu: f64, sigma: f64, lo: f64, hi: f64) -> (f64, f64) {
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let (a, b) = (lo.ln(), hi.ln());
    // P(alpha < Z < beta), computed on the side of the distribution that
    // keeps precision.
    let mass = |alpha: f64, beta: f64| {
        if alpha > 0.0 {
            std.sf(alpha) - std.sf(beta)
        } else {
            std.cdf(beta) - std.cdf(alpha)
        }
    };
    let partial = |k: f64| {
        let m = mass((a - mu - k * sigma * sigma) / sigma, (b - mu - k * sigma * sigma) / sigma);
        if m <= 0.0 {
            0.0
        } else {
            (k * mu + 0.5 * k * k * sigma * sigma + m.ln()).exp()
        }
    };
    let p_lo = std.cdf((a - mu) / sigma);
    let p_hi = std.sf((b - mu) / sigma);
    let m1 = lo * p_lo + hi * p_hi + partial(1.0);
    let m2 = lo * lo * p_lo + hi * hi * p_hi + partial(2.0);
    (m1, (m2 - m1 * m1).max(0.0).sqrt())
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const SIGMA_MAX: f64 = 14.0;

fn mu_for_mean(sigma: f64, lo: f64, hi: f64, mean: f64) -> f64 {
    let span = 40.0 * sigma + 40.0;
    bisect(lo.ln() - span, hi.ln() + span, |mu| {
        clipped_lognormal_moments(mu, sigma, lo, hi).0 - mean
    })
}

/// Lognormal `(mu, sigma)` whose clipped moments hit the spec's targets.
/// `sigma` is zero for a degenerate spec.
pub fn fit_clipped_lognormal(spec: &TraceSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    let (lo, hi) = (spec.min_tokens as f64, spec.max_tokens as f64);
    if spec.target_sd == 0.0 || lo == hi {
        return Ok((spec.target_mean.ln(), 0.0));
    }
    let sd_at = |sigma: f64| {
        let mu = mu_for_mean(sigma, lo, hi, spec.target_mean);
        clipped_lognormal_moments(mu, sigma, lo, hi).1
    };
    // Largest spread reachable with this mean inside the range: all mass on
    // the two ends.
    let p = (spec.target_mean - lo) / (hi - lo);
    let two_point = (hi - lo) * (p * (1.0 - p)).sqrt();
    let reachable = sd_at(SIGMA_MAX);
    if spec.target_sd > reachable {
        return Err(TraceError::Infeasible {
            moment: "sd",
            detail: format!(
                "{} exceeds the largest clipped-lognormal sd {reachable:.2} for mean {} in [{lo}, {hi}] (any distribution: {two_point:.2})",
                spec.target_sd, spec.target_mean
            ),
        });
    }
    let sigma = bisect(1e-9, SIGMA_MAX, |s| sd_at(s) - spec.target_sd);
    Ok((mu_for_mean(sigma, lo, hi, spec.target_mean), sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRequest {
    pub req_id: u64,
    pub arrival_time_ms: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
}

impl TraceRequest {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.output_tokens
    }
}

/// Splits a context length into prompt and generated tokens.
fn split_length(len: u64, output_fraction: f64) -> (u64, u64) {
    let out = ((len as f64 * output_fraction).round() as u64).max(1);
    (len.saturating_sub(out).max(1), out)
}

pub fn generate_trace(spec: &TraceSpec) -> Result<Vec<TraceRequest>> {
    let (mu, sigma) = fit_clipped_lognormal(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = Exp::new(spec.request_rate).expect("validated rate");
    let mut t = 0.0;
    let mut out = Vec::with_capacity(spec.count);
    for req_id in 0..spec.count as u64 {
        if req_id > 0 {
            t += gaps.sample(&mut rng);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = if sigma == 0.0 { spec.target_mean } else { (mu + sigma * z).exp() };
        let len = x.round().clamp(spec.min_tokens as f64, spec.max_tokens as f64) as u64;
        let (prompt_tokens, output_tokens) = split_length(len, spec.output_fraction);
        out.push(TraceRequest {
            req_id,
            arrival_time_ms: (t * 1e6).round() / 1e3,
            prompt_tokens,
            output_tokens,
        });
    }
    Ok(out)
}

pub const TRACE_HEADER: &str = "req_id arrival_time_ms prompt_tokens output_tokens";

pub fn format_trace(reqs: &[TraceRequest]) -> String {
    let mut s = String::with_capacity(32 * (reqs.len() + 1));
    s.push_str(TRACE_HEADER);
    s.push('\n');
    for r in reqs {
        let _ = writeln!(
            s,
            "{} {:.3} {} {}",
            r.req_id, r.arrival_time_ms, r.prompt_tokens, r.output_tokens
        );
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRequest>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == TRACE_HEADER {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line: line_no, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", f.len())));
        }
        let int = |s: &str, name: &str| s.parse::<u64>().map_err(|e| err(format!("{name}: {e}")));
        let arrival_time_ms: f64 = f[1].parse().map_err(|e| err(format!("arrival_time_ms: {e}")))?;
        if !(arrival_time_ms.is_finite() && arrival_time_ms >= 0.0) {
            return Err(err("arrival_time_ms must be a non-negative number".into()));
        }
        let r = TraceRequest {
            req_id: int(f[0], "req_id")?,
            arrival_time_ms,
            prompt_tokens: int(f[2], "prompt_tokens")?,
            output_tokens: int(f[3], "output_tokens")?,
        };
        if r.prompt_tokens == 0 || r.output_tokens == 0 {
            return Err(err("prompt_tokens and output_tokens must be positive".into()));
        }
        if out.last().is_some_and(|p: &TraceRequest| p.arrival_time_ms > r.arrival_time_ms) {
            return Err(err("arrivals must be non-decreasing".into()));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn write_trace(path: &Path, reqs: &[TraceRequest]) -> Result<()> {
    std::fs::write(path, format_trace(reqs))?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRequest>> {
    parse_trace(&std::fs::read_to_string(path)?)
}

/// Sample mean and (population) standard deviation of context lengths.
pub fn length_stats(reqs: &[TraceRequest]) -> (f64, f64) {
    let n = reqs.len() as f64;
    let mean = reqs.iter().map(|r| r.total_tokens() as f64).sum::<f64>() / n;
    let var = reqs
        .iter()
        .map(|r| (r.total_tokens() as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}
