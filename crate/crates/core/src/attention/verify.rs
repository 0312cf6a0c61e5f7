//! Randomized partition-invariance checking of the blockwise attention path.
//!
//! Every trial draws a head layout, head width, sequence length and a random
//! partition of the sequence into contiguous segments, aggregates the
//! per-segment partials and compares each query head's output with the
//! extended-precision reference.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use super::reference::{extended_attention, relative_error};
use super::{
    aggregate_heads, micro_attention_heads, naive_attention_heads, AttentionConfig,
    HeadLayout, KvSegment, QueryVector, Result,
};

pub const HEAD_DIMS: [usize; 3] = [32, 64, 128];
pub const QUERY_HEADS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyParams {
    pub trials: usize,
    pub max_seq: usize,
    pub max_partitions: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            trials: 1000,
            max_seq: 2048,
            max_partitions: 64,
            seed: 0,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialOutcome {
    pub layout: HeadLayout,
    pub head_dim: usize,
    pub seq: usize,
    pub partitions: usize,
    /// Blockwise output vs. the extended-precision reference.
    pub err_vs_reference: f64,
    /// Blockwise output vs. the single-segment working-precision path.
    pub err_vs_naive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub params: VerifyParams,
    pub trials: usize,
    pub failures: usize,
    pub max_err_vs_reference: f64,
    pub max_err_vs_naive: f64,
    pub per_layout: [(HeadLayout, usize); 3],
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials == self.params.trials
    }
}

impl std::fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "trials: {} (seed {}, max_seq {}, max_partitions {})",
            self.trials, self.params.seed, self.params.max_seq, self.params.max_partitions
        )?;
        for (layout, n) in &self.per_layout {
            writeln!(f, "  {layout:?}: {n}")?;
        }
        writeln!(f, "max relative error vs reference: {:.3e}", self.max_err_vs_reference)?;
        writeln!(f, "max relative error vs naive:     {:.3e}", self.max_err_vs_naive)?;
        write!(
            f,
            "{}: {} failure(s) at tolerance {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.failures,
            self.params.tolerance
        )
    }
}

fn layout_config(layout: HeadLayout, head_dim: usize) -> Result<AttentionConfig> {
    let kv = match layout {
        HeadLayout::MultiHead => QUERY_HEADS,
        HeadLayout::MultiQuery => 1,
        HeadLayout::GroupedQuery => 2,
    };
    AttentionConfig::new(head_dim, QUERY_HEADS, kv)
}

/// Runs a single seeded trial.
pub fn run_trial(params: &VerifyParams, trial: usize) -> Result<TrialOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(trial as u64);

    let layout = [
        HeadLayout::MultiHead,
        HeadLayout::MultiQuery,
        HeadLayout::GroupedQuery,
    ][trial % 3];
    let head_dim = HEAD_DIMS[rng.random_range(0..HEAD_DIMS.len())];
    let cfg = layout_config(layout, head_dim)?;
    let seq = rng.random_range(1..=params.max_seq.max(1));
    let partitions = rng.random_range(1..=params.max_partitions.clamp(1, seq));
    let mut cuts: Vec<usize> = if partitions > 1 {
        sample(&mut rng, seq - 1, partitions - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect()
    } else {
        Vec::new()
    };
    cuts.sort_unstable();

    // Query magnitude spread pushes logits from near-uniform to very peaked.
    let q_sigma = rng.random_range(0.25..4.0);
    let q_dist = Normal::new(0.0, q_sigma).expect("positive sigma");
    let queries = (0..cfg.num_q_heads)
        .map(|_| QueryVector::new((0..head_dim).map(|_| q_dist.sample(&mut rng)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let kv = (0..cfg.num_kv_heads)
        .map(|_| {
            let keys = (0..seq * head_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let values = (0..seq * head_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            KvSegment::from_flat(head_dim, keys, values)
        })
        .collect::<Result<Vec<_>>>()?;

    let per_head_parts = kv
        .iter()
        .map(|s| s.split_at_cuts(&cuts))
        .collect::<Result<Vec<_>>>()?;
    let per_segment = (0..partitions)
        .map(|j| {
            let seg_kv: Vec<KvSegment> = per_head_parts.iter().map(|p| p[j].clone()).collect();
            micro_attention_heads(&queries, &seg_kv, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let blockwise = aggregate_heads(&per_segment)?;
    let naive = naive_attention_heads(&queries, &kv, &cfg)?;

    let mut err_vs_reference = 0.0_f64;
    let mut err_vs_naive = 0.0_f64;
    for (h, q) in queries.iter().enumerate() {
        let reference = extended_attention(q, &kv[super::gqa_kv_head(h, &cfg)?], &cfg);
        err_vs_reference = err_vs_reference.max(relative_error(&blockwise[h], &reference));
        err_vs_naive = err_vs_naive.max(relative_error(&blockwise[h], &naive[h]));
    }
    Ok(TrialOutcome {
        layout,
        head_dim,
        seq,
        partitions,
        err_vs_reference,
        err_vs_naive,
    })
}

/// Runs all trials (in parallel; results do not depend on scheduling).
pub fn run_verification(params: &VerifyParams) -> Result<VerifyReport> {
    let outcomes = (0..params.trials)
        .into_par_iter()
        .map(|t| run_trial(params, t))
        .collect::<Result<Vec<_>>>()?;
    let mut per_layout = [
        (HeadLayout::MultiHead, 0),
        (HeadLayout::MultiQuery, 0),
        (HeadLayout::GroupedQuery, 0),
    ];
    let mut report = VerifyReport {
        params: *params,
        trials: outcomes.len(),
        failures: 0,
        max_err_vs_reference: 0.0,
        max_err_vs_naive: 0.0,
        per_layout,
    };
    for o in &outcomes {
        if o.err_vs_reference.is_nan() || o.err_vs_reference >= params.tolerance {
            report.failures += 1;
        }
        report.max_err_vs_reference = report.max_err_vs_reference.max(o.err_vs_reference);
        report.max_err_vs_naive = report.max_err_vs_naive.max(o.err_vs_naive);
        for slot in per_layout.iter_mut() {
            if slot.0 == o.layout {
                slot.1 += 1;
            }
        }
    }
    report.per_layout = per_layout;
    Ok(report)
}
