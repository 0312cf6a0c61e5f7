//! The four-instance placement scenario.
//!
//! Instance 0 is saturated by one long request that still fits in its
//! memory, instance 1 serves a long request with memory to spare, and a
//! burst of short requests fills every batch. Queued work behind the
//! saturated instance can only start there once its long request gives up
//! memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::config::ClusterConfig;
use crate::trace::TraceRequest;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FourInstanceParams {
    pub saturating_prompt: u64,
    pub saturating_output: u64,
    pub headroom_prompt: u64,
    pub headroom_output: u64,
    pub short_requests: u64,
    /// Arrival rate of the short requests, per second.
    pub short_rate: f64,
    pub short_prompt: (u64, u64),
    pub short_output: (u64, u64),
    pub seed: u64,
}

impl Default for FourInstanceParams {
    fn default() -> Self {
        Self {
            saturating_prompt: 29_000,
            saturating_output: 2_500,
            headroom_prompt: 16_000,
            headroom_output: 2_000,
            short_requests: 1_500,
            short_rate: 5_000.0,
            short_prompt: (32, 384),
            short_output: (16, 128),
            seed: 7,
        }
    }
}

/// Desk-scale cluster of four instances.
pub fn four_instance_config() -> ClusterConfig {
    let mut c = ClusterConfig::desk_default();
    c.instances.count = 4;
    c
}

pub fn four_instance_trace(p: &FourInstanceParams) -> Vec<TraceRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let gap = Exp::new(p.short_rate / 1e3).expect("positive rate");
    let mut out = vec![
        TraceRequest {
            req_id: 0,
            arrival_time_ms: 0.0,
            prompt_tokens: p.saturating_prompt,
            output_tokens: p.saturating_output,
        },
        TraceRequest {
            req_id: 1,
            arrival_time_ms: 1.0,
            prompt_tokens: p.headroom_prompt,
            output_tokens: p.headroom_output,
        },
    ];
    let mut t = 2.0;
    for i in 0..p.short_requests {
        t += gap.sample(&mut rng);
        out.push(TraceRequest {
            req_id: 2 + i,
            arrival_time_ms: t,
            prompt_tokens: rng.random_range(p.short_prompt.0..=p.short_prompt.1),
            output_tokens: rng.random_range(p.short_output.0..=p.short_output.1),
        });
    }
    out
}
