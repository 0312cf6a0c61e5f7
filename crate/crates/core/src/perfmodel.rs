//! Analytical throughput model of a serving instance.
//!
//! One transformer layer costs `W(b) / f(b) + sum_r S_r * a / g(S)`: batched
//! non-attention work at the batch-dependent GEMM rate `f`, plus per-request
//! attention work over each request's context at the (roughly constant)
//! attention rate `g`. Offloading `K` context tokens to another instance
//! removes `K * a / g` from the borrower's layer and adds it to the
//! holder's. Instance throughput is `b / (n_layers * layer_time)` and
//! cluster throughput is the sum over instances.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("invalid performance curve: {0}")]
    InvalidCurve(String),
    #[error("invalid model shape: {0}")]
    InvalidShape(String),
    #[error("layer time is undefined for an empty batch")]
    EmptyBatch,
    #[error("batch of {batch} requests but {ctx} context lengths")]
    BatchMismatch { batch: usize, ctx: usize },
    #[error("offloaded {offloaded} tokens exceeds total context of {total} tokens")]
    OffloadExceedsContext { offloaded: u64, total: u64 },
}

pub type Result<T> = std::result::Result<T, PerfError>;

/// What a curve measures; GEMM-rate curves must not decrease with batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveRole {
    Gemm,
    Attention,
}

/// Sampled effective-rate curve, linearly interpolated and clamped at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct PerfCurve {
    samples: Vec<(f64, f64)>,
}

impl TryFrom<Vec<[f64; 2]>> for PerfCurve {
    type Error = PerfError;

    fn try_from(raw: Vec<[f64; 2]>) -> Result<Self> {
        Self::from_samples(raw.into_iter().map(|[x, y]| (x, y)).collect())
    }
}

impl From<PerfCurve> for Vec<[f64; 2]> {
    fn from(c: PerfCurve) -> Self {
        c.samples.into_iter().map(|(x, y)| [x, y]).collect()
    }
}

impl PerfCurve {
    /// Builds a curve and checks the role-specific shape constraint.
    pub fn new(samples: Vec<(f64, f64)>, role: CurveRole) -> Result<Self> {
        let c = Self::from_samples(samples)?;
        c.check_role(role)?;
        Ok(c)
    }

    fn from_samples(samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(PerfError::InvalidCurve(format!(
                "need at least 2 samples, got {}",
                samples.len()
            )));
        }
        for &(x, y) in &samples {
            if !(x.is_finite() && x > 0.0 && y.is_finite() && y > 0.0) {
                return Err(PerfError::InvalidCurve(format!(
                    "sample ({x}, {y}) must have positive finite coordinates"
                )));
            }
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(PerfError::InvalidCurve(
                "sample points must be strictly increasing".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn check_role(&self, role: CurveRole) -> Result<()> {
        if role == CurveRole::Gemm && self.samples.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(PerfError::InvalidCurve(
                "GEMM rate must be nondecreasing in batch size".into(),
            ));
        }
        Ok(())
    }

    /// Flat curve.
    pub fn constant(rate: f64) -> Result<Self> {
        Self::from_samples(vec![(1.0, rate), (2.0, rate)])
    }

    /// `rate(b) = max_rate * b / (b + half_batch)` sampled at powers of two
    /// up to `max_batch`.
    pub fn saturating(max_rate: f64, half_batch: f64, max_batch: u32) -> Result<Self> {
        let mut xs = Vec::new();
        let mut b = 1u32;
        while b < max_batch {
            xs.push(b);
            b = b.saturating_mul(2);
        }
        xs.push(max_batch.max(2));
        let samples = xs
            .into_iter()
            .map(|b| {
                let b = f64::from(b);
                (b, max_rate * b / (b + half_batch))
            })
            .collect();
        Self::new(samples, CurveRole::Gemm)
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s = &self.samples;
        let (x0, y0) = s[0];
        let (xn, yn) = s[s.len() - 1];
        if x <= x0 {
            return y0;
        }
        if x >= xn {
            return yn;
        }
        let i = s.partition_point(|p| p.0 <= x);
        let (xa, ya) = s[i - 1];
        let (xb, yb) = s[i];
        ya + (yb - ya) * (x - xa) / (xb - xa)
    }

    /// Smallest sampled batch at which the rate reaches `fraction` of the
    /// curve's largest sampled rate.
    pub fn saturation_point(&self, fraction: f64) -> f64 {
        let peak = self.samples.iter().map(|p| p.1).fold(0.0, f64::max);
        self.samples
            .iter()
            .find(|p| p.1 >= fraction * peak)
            .map(|p| p.0)
            .unwrap_or(self.samples[self.samples.len() - 1].0)
    }

    /// Copy with every rate multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::from_samples(self.samples.iter().map(|&(x, y)| (x, y * k)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_layers: u32,
    /// Non-attention work per batched token per layer.
    pub workload_per_token: f64,
    /// Attention work per context token per layer.
    pub attn_work_per_ctx_token: f64,
    pub kv_bytes_per_token: u64,
    pub block_size_tokens: u64,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_layers > 0
            && self.workload_per_token.is_finite()
            && self.workload_per_token > 0.0
            && self.attn_work_per_ctx_token.is_finite()
            && self.attn_work_per_ctx_token > 0.0
            && self.kv_bytes_per_token > 0
            && self.block_size_tokens > 0;
        if ok {
            Ok(())
        } else {
            Err(PerfError::InvalidShape(format!("{self:?}")))
        }
    }

    /// 7B-class decoder (32 layers, 4096 hidden, fp16 KV).
    pub fn llama_7b() -> Self {
        Self {
            n_layers: 32,
            workload_per_token: 4.0e8,
            attn_work_per_ctx_token: 16384.0,
            kv_bytes_per_token: 524_288,
            block_size_tokens: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceLoad {
    pub batch: usize,
    pub ctx_lengths: Vec<u64>,
    /// Tokens held remotely for a debtor, or hosted for others by a creditor.
    pub offloaded_tokens: u64,
}

impl InstanceLoad {
    pub fn new(ctx_lengths: Vec<u64>, offloaded_tokens: u64) -> Self {
        Self {
            batch: ctx_lengths.len(),
            ctx_lengths,
            offloaded_tokens,
        }
    }

    pub fn total_ctx(&self) -> u64 {
        self.ctx_lengths.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Neutral,
    Debtor,
    Creditor,
}

/// Shape plus measured (or synthetic) rate curves.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfModel {
    pub shape: ModelShape,
    /// GEMM rate as a function of batch size.
    pub gemm_rate: PerfCurve,
    /// Attention rate as a function of the instance's total context tokens.
    pub attn_rate: PerfCurve,
}

impl PerfModel {
    pub fn new(shape: ModelShape, gemm_rate: PerfCurve, attn_rate: PerfCurve) -> Result<Self> {
        shape.validate()?;
        gemm_rate.check_role(CurveRole::Gemm)?;
        attn_rate.check_role(CurveRole::Attention)?;
        Ok(Self {
            shape,
            gemm_rate,
            attn_rate,
        })
    }

    /// Non-attention time of one layer for a batch of `batch` tokens.
    pub fn gemm_time(&self, batch: usize) -> f64 {
        let b = batch as f64;
        self.shape.workload_per_token * b / self.gemm_rate.eval(b)
    }

    /// Time to attend over `tokens` context tokens in one layer on an
    /// instance whose total context is `total_ctx`.
    pub fn attention_time(&self, tokens: u64, total_ctx: u64) -> f64 {
        tokens as f64 * self.shape.attn_work_per_ctx_token / self.attn_rate.eval(total_ctx as f64)
    }

    fn check_load(load: &InstanceLoad) -> Result<()> {
        if load.batch == 0 {
            return Err(PerfError::EmptyBatch);
        }
        if load.ctx_lengths.len() != load.batch {
            return Err(PerfError::BatchMismatch {
                batch: load.batch,
                ctx: load.ctx_lengths.len(),
            });
        }
        Ok(())
    }

    pub fn layer_time(&self, load: &InstanceLoad) -> Result<f64> {
        Self::check_load(load)?;
        let total = load.total_ctx();
        Ok(self.gemm_time(load.batch) + self.attention_time(total, total))
    }

    pub fn debtor_layer_time(&self, load: &InstanceLoad) -> Result<f64> {
        let base = self.layer_time(load)?;
        let total = load.total_ctx();
        if load.offloaded_tokens > total {
            return Err(PerfError::OffloadExceedsContext {
                offloaded: load.offloaded_tokens,
                total,
            });
        }
        Ok(base - self.attention_time(load.offloaded_tokens, total))
    }

    pub fn creditor_layer_time(&self, load: &InstanceLoad) -> Result<f64> {
        let base = self.layer_time(load)?;
        Ok(base + self.attention_time(load.offloaded_tokens, load.total_ctx()))
    }

    pub fn role_layer_time(&self, load: &InstanceLoad, role: Role) -> Result<f64> {
        match role {
            Role::Neutral => self.layer_time(load),
            Role::Debtor => self.debtor_layer_time(load),
            Role::Creditor => self.creditor_layer_time(load),
        }
    }

    /// Tokens per second of one instance. An idle instance produces none.
    pub fn instance_tps(&self, load: &InstanceLoad, role: Role) -> Result<f64> {
        if load.batch == 0 && load.ctx_lengths.is_empty() {
            return Ok(0.0);
        }
        let t = self.role_layer_time(load, role)?;
        Ok(load.batch as f64 / (f64::from(self.shape.n_layers) * t))
    }

    pub fn cluster_tps(&self, loads: &[(InstanceLoad, Role)]) -> Result<f64> {
        loads
            .iter()
            .map(|(load, role)| self.instance_tps(load, *role))
            .sum()
    }
}

pub fn kv_memory_bytes(tokens: u64, shape: &ModelShape) -> u64 {
    tokens * shape.kv_bytes_per_token
}

pub fn kv_blocks(tokens: u64, shape: &ModelShape) -> u64 {
    tokens.div_ceil(shape.block_size_tokens)
}

/// Size of the block-placement search space for `n_debtors` debtors and
/// creditors with `creditor_blocks[i]` spare blocks each:
/// `(N + 1)^(sum Y) / prod(Y_i!)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSpace {
    /// Natural logarithm of the size.
    pub ln_value: f64,
    /// `exp(ln_value)`; infinite when not representable.
    pub value: f64,
}

pub fn search_space_size(n_debtors: u64, creditor_blocks: &[u64]) -> SearchSpace {
    let total: u64 = creditor_blocks.iter().sum();
    let ln_value = total as f64 * ((n_debtors + 1) as f64).ln()
        - creditor_blocks.iter().map(|&y| ln_factorial(y)).sum::<f64>();
    SearchSpace {
        ln_value,
        value: ln_value.exp(),
    }
}

/// The same formula evaluated directly in `f64`, `None` if an intermediate
/// overflows.
pub fn search_space_direct(n_debtors: u64, creditor_blocks: &[u64]) -> Option<f64> {
    let total: u64 = creditor_blocks.iter().sum();
    let num = ((n_debtors + 1) as f64).powi(i32::try_from(total).ok()?);
    let den: f64 = creditor_blocks
        .iter()
        .map(|&y| (1..=y).map(|k| k as f64).product::<f64>())
        .product();
    (num.is_finite() && den.is_finite()).then(|| num / den)
}

/// Number of distinct ways to hand each creditor's interchangeable blocks to
/// `n_debtors` debtors or keep them: `prod C(N + Y_i, Y_i)`.
pub fn exact_assignment_count(n_debtors: u64, creditor_blocks: &[u64]) -> Option<u128> {
    creditor_blocks.iter().try_fold(1u128, |acc, &y| {
        // C(N + y, y) built incrementally stays integral at every step.
        let mut c: u128 = 1;
        for i in 1..=u128::from(y) {
            c = c.checked_mul(u128::from(n_debtors) + i)? / i;
        }
        acc.checked_mul(c)
    })
}
