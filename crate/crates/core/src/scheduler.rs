//! Greedy debtor/creditor KV block placement.
//!
//! Small-batch instances (debtors) lend out parts of their longest request's
//! KV cache to instances with spare memory (creditors). For every debtor, in
//! ascending batch order, the planner sweeps every feasible block count
//! against each creditor in ascending memory-utilization order and keeps the
//! count that maximizes the modeled throughput of the pair, stopping at the
//! first creditor where moving nothing is best.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perfmodel::{PerfError, PerfModel, Role};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("instance {instance}: {invariant}")]
    InvalidSnapshot { instance: u32, invariant: String },
    #[error("instance {0} appears more than once")]
    DuplicateInstance(u32),
    #[error("cannot move {k} blocks: at most {max} are movable")]
    MoveOutOfBounds { k: u64, max: u64 },
    #[error("instance {0} has no request to offload")]
    NoRequest(u32),
    #[error(transparent)]
    Perf(#[from] PerfError),
}

pub type Result<T> = std::result::Result<T, SchedulerError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestSlot {
    pub request_id: u64,
    /// Blocks of this request held on its home instance.
    pub local_blocks: u64,
    /// Blocks of this request held on other instances.
    pub remote_blocks: u64,
    pub total_ctx_tokens: u64,
}

impl RequestSlot {
    pub fn total_blocks(&self) -> u64 {
        self.local_blocks + self.remote_blocks
    }
}

/// Current lending state of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleLock {
    None,
    Debtor,
    Creditor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSnapshot {
    pub instance_id: u32,
    pub batch: usize,
    pub mem_capacity_blocks: u64,
    pub mem_used_blocks: u64,
    /// Blocks hosted on behalf of other instances' requests.
    #[serde(default)]
    pub lent_blocks: u64,
    /// Requests waiting for admission on this instance.
    #[serde(default)]
    pub pending_queue: usize,
    #[serde(default)]
    pub requests: Vec<RequestSlot>,
}

impl InstanceSnapshot {
    pub fn mem_util(&self) -> f64 {
        self.mem_used_blocks as f64 / self.mem_capacity_blocks as f64
    }

    pub fn free_blocks(&self) -> u64 {
        self.mem_capacity_blocks.saturating_sub(self.mem_used_blocks)
    }

    pub fn role_lock(&self) -> RoleLock {
        if self.requests.iter().any(|r| r.remote_blocks > 0) {
            RoleLock::Debtor
        } else if self.lent_blocks > 0 {
            RoleLock::Creditor
        } else {
            RoleLock::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |invariant: String| {
            Err(SchedulerError::InvalidSnapshot {
                instance: self.instance_id,
                invariant,
            })
        };
        if self.mem_capacity_blocks == 0 {
            return fail("mem_capacity_blocks must be positive".into());
        }
        if self.mem_used_blocks > self.mem_capacity_blocks {
            return fail(format!(
                "mem_used_blocks ({}) exceeds mem_capacity_blocks ({})",
                self.mem_used_blocks, self.mem_capacity_blocks
            ));
        }
        let local: u64 = self.requests.iter().map(|r| r.local_blocks).sum();
        if local + self.lent_blocks > self.mem_used_blocks {
            return fail(format!(
                "local request blocks ({local}) plus lent blocks ({}) exceed mem_used_blocks ({})",
                self.lent_blocks, self.mem_used_blocks
            ));
        }
        if self.requests.len() != self.batch {
            return fail(format!(
                "batch ({}) differs from the number of listed requests ({})",
                self.batch,
                self.requests.len()
            ));
        }
        if self.lent_blocks > 0 && self.requests.iter().any(|r| r.remote_blocks > 0) {
            return fail("instance is both borrowing and lending blocks".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// Instances with batch at or below this are debtor candidates.
    pub batch_threshold: usize,
    /// Instances with memory utilization at or below this are creditor candidates.
    pub mem_util_threshold: f64,
    pub planning_period_s: f64,
    /// Fraction of a request's blocks that must stay on its home instance.
    #[serde(default = "default_retain")]
    pub retain_local_ratio: f64,
}

fn default_retain() -> f64 {
    0.5
}

impl SchedulerConfig {
    /// Defaults derived from a GEMM curve: debtors are instances at no more
    /// than a quarter of the batch where the curve reaches 90% of its peak.
    pub fn derived_from(gemm_rate: &crate::perfmodel::PerfCurve) -> Self {
        let sat = gemm_rate.saturation_point(0.9);
        Self {
            batch_threshold: ((0.25 * sat).floor() as usize).max(1),
            mem_util_threshold: 0.8,
            planning_period_s: 1.0,
            retain_local_ratio: default_retain(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_threshold < 1 {
            return Err("batch_threshold must be at least 1".into());
        }
        if !(self.mem_util_threshold > 0.0 && self.mem_util_threshold <= 1.0) {
            return Err("mem_util_threshold must be in (0, 1]".into());
        }
        if !(self.planning_period_s.is_finite() && self.planning_period_s > 0.0) {
            return Err("planning_period_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.retain_local_ratio) {
            return Err("retain_local_ratio must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// Everything the planner needs besides the snapshots.
#[derive(Debug, Clone)]
pub struct PlanContext {
    pub model: PerfModel,
    pub cfg: SchedulerConfig,
    /// Context size assumed for each request admitted into freed memory.
    pub expected_new_request_tokens: u64,
    /// One-way time to ship a query to a creditor or a partial back. Remote
    /// attention plus both transfers that local attention cannot hide is
    /// charged to the debtor.
    pub query_transfer_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MoveDirective {
    pub request_id: u64,
    pub src_instance: u32,
    pub dst_instance: u32,
    pub num_blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedMove {
    pub directive: MoveDirective,
    pub estimated_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub moves: Vec<PlannedMove>,
    pub tps_before: f64,
    pub tps_after: f64,
    /// Number of pair-throughput evaluations performed.
    pub evaluations: usize,
}

impl Plan {
    pub fn directives(&self) -> Vec<MoveDirective> {
        self.moves.iter().map(|m| m.directive).collect()
    }
}

/// Debtors sorted by ascending batch, creditors by ascending memory
/// utilization; ties go to the lower instance id.
pub fn classify_roles(snapshots: &[InstanceSnapshot], cfg: &SchedulerConfig) -> (Vec<u32>, Vec<u32>) {
    let mut debtors: Vec<&InstanceSnapshot> = snapshots
        .iter()
        .filter(|s| {
            s.batch >= 1 && s.batch <= cfg.batch_threshold && s.role_lock() != RoleLock::Creditor
        })
        .collect();
    let debtor_ids: BTreeSet<u32> = debtors.iter().map(|s| s.instance_id).collect();
    let mut creditors: Vec<&InstanceSnapshot> = snapshots
        .iter()
        .filter(|s| {
            s.mem_util() <= cfg.mem_util_threshold
                && s.role_lock() != RoleLock::Debtor
                && !debtor_ids.contains(&s.instance_id)
        })
        .collect();
    debtors.sort_by_key(|s| (s.batch, s.instance_id));
    creditors.sort_by(|a, b| {
        a.mem_util()
            .total_cmp(&b.mem_util())
            .then(a.instance_id.cmp(&b.instance_id))
    });
    (
        debtors.iter().map(|s| s.instance_id).collect(),
        creditors.iter().map(|s| s.instance_id).collect(),
    )
}

/// Requests admitted into `freed_blocks` of memory, capped by the queue.
pub fn derive_feasible_batch(
    debtor: &InstanceSnapshot,
    freed_blocks: u64,
    pending: usize,
    block_size_tokens: u64,
    expected_new_request_tokens: u64,
) -> usize {
    if expected_new_request_tokens == 0 {
        return debtor.batch;
    }
    let fit = freed_blocks * block_size_tokens / expected_new_request_tokens;
    debtor.batch + pending.min(usize::try_from(fit).unwrap_or(usize::MAX))
}

/// Longest request of an instance; ties go to the lowest request id.
pub fn pick_longest_request(s: &InstanceSnapshot) -> Option<&RequestSlot> {
    s.requests
        .iter()
        .max_by(|a, b| {
            a.total_ctx_tokens
                .cmp(&b.total_ctx_tokens)
                .then(b.request_id.cmp(&a.request_id))
        })
}

/// Local blocks of `r` that may leave its home instance.
pub fn movable_blocks(r: &RequestSlot, retain_local_ratio: f64) -> u64 {
    let retain = (retain_local_ratio * r.total_blocks() as f64).ceil() as u64;
    r.local_blocks.saturating_sub(retain)
}

/// Mutable per-instance view the planner updates as it emits moves.
#[derive(Debug, Clone)]
struct ModelState {
    id: u32,
    batch: usize,
    total_ctx: u64,
    remote_tokens: u64,
    hosted_tokens: u64,
    capacity: u64,
    used: u64,
    pending: usize,
}

impl ModelState {
    fn from_snapshot(s: &InstanceSnapshot, block: u64) -> Self {
        let total_ctx: u64 = s.requests.iter().map(|r| r.total_ctx_tokens).sum();
        let remote: u64 = s.requests.iter().map(|r| r.remote_blocks).sum::<u64>() * block;
        Self {
            id: s.instance_id,
            batch: s.batch,
            total_ctx,
            remote_tokens: remote.min(total_ctx),
            hosted_tokens: s.lent_blocks * block,
            capacity: s.mem_capacity_blocks,
            used: s.mem_used_blocks,
            pending: s.pending_queue,
        }
    }

    fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }

    fn util(&self) -> f64 {
        self.used as f64 / self.capacity as f64
    }

    fn tps(&self, ctx: &PlanContext) -> f64 {
        let model = &ctx.model;
        if self.batch == 0 {
            return 0.0;
        }
        let base = model.gemm_time(self.batch) + model.attention_time(self.total_ctx, self.total_ctx);
        let t = if self.remote_tokens > 0 {
            let remote = model.attention_time(self.remote_tokens, self.total_ctx);
            let local = model.attention_time(self.total_ctx - self.remote_tokens, self.total_ctx);
            let uncovered = (remote + 2.0 * ctx.query_transfer_s - local).max(0.0);
            base - remote + uncovered
        } else if self.hosted_tokens > 0 {
            base + model.attention_time(self.hosted_tokens, self.total_ctx)
        } else {
            base
        };
        self.batch as f64 / (f64::from(model.shape.n_layers) * t)
    }
}

/// Debtor and creditor state after moving `k` blocks of a request with
/// `request_tokens` context from `d` to `c`.
fn after_move(d: &ModelState, c: &ModelState, k: u64, request_tokens: u64, ctx: &PlanContext) -> (ModelState, ModelState) {
    let block = ctx.model.shape.block_size_tokens;
    let mut d = d.clone();
    let mut c = c.clone();
    let moved_tokens = (k * block).min(request_tokens);
    d.remote_tokens = (d.remote_tokens + moved_tokens).min(d.total_ctx);
    d.used -= k;
    let admitted = (k * block)
        .checked_div(ctx.expected_new_request_tokens)
        .map_or(0, |fit| d.pending.min(usize::try_from(fit).unwrap_or(usize::MAX)));
    d.batch += admitted;
    d.pending -= admitted;
    d.total_ctx += admitted as u64 * ctx.expected_new_request_tokens;
    d.used += admitted as u64 * ctx.expected_new_request_tokens.div_ceil(block);
    c.used += k;
    c.hosted_tokens += k * block;
    (d, c)
}

/// Modeled cluster-throughput change from moving `k` blocks of the debtor's
/// longest request to the creditor.
pub fn estimate_pair_gain(
    k: u64,
    debtor: &InstanceSnapshot,
    creditor: &InstanceSnapshot,
    ctx: &PlanContext,
) -> Result<f64> {
    let r = pick_longest_request(debtor).ok_or(SchedulerError::NoRequest(debtor.instance_id))?;
    let max = movable_blocks(r, ctx.cfg.retain_local_ratio).min(creditor.free_blocks());
    if k > max {
        return Err(SchedulerError::MoveOutOfBounds { k, max });
    }
    if k == 0 {
        return Ok(0.0);
    }
    let block = ctx.model.shape.block_size_tokens;
    let d = ModelState::from_snapshot(debtor, block);
    let c = ModelState::from_snapshot(creditor, block);
    let before = d.tps(ctx) + c.tps(ctx);
    let (d2, c2) = after_move(&d, &c, k, r.total_ctx_tokens, ctx);
    Ok(d2.tps(ctx) + c2.tps(ctx) - before)
}

fn validate_all(snapshots: &[InstanceSnapshot]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in snapshots {
        s.validate()?;
        if !seen.insert(s.instance_id) {
            return Err(SchedulerError::DuplicateInstance(s.instance_id));
        }
    }
    Ok(())
}

/// Greedy lending plan over a consistent set of snapshots.
pub fn plan_moves(snapshots: &[InstanceSnapshot], ctx: &PlanContext) -> Result<Plan> {
    validate_all(snapshots)?;
    let block = ctx.model.shape.block_size_tokens;
    let mut states: Vec<ModelState> = snapshots
        .iter()
        .map(|s| ModelState::from_snapshot(s, block))
        .collect();
    let index_of = |id: u32| snapshots.iter().position(|s| s.instance_id == id).expect("known id");
    let tps_before: f64 = states.iter().map(|s| s.tps(ctx)).sum();

    let (debtors, creditors) = classify_roles(snapshots, &ctx.cfg);
    let mut creditor_pool: Vec<usize> = creditors.iter().map(|&id| index_of(id)).collect();
    let mut moves = Vec::new();
    let mut evaluations = 0usize;

    for did in debtors {
        let di = index_of(did);
        let Some(r) = pick_longest_request(&snapshots[di]) else {
            continue;
        };
        let mut block_max = movable_blocks(r, ctx.cfg.retain_local_ratio);
        let mut visited = BTreeSet::new();
        while block_max > 0 {
            creditor_pool.retain(|&ci| states[ci].free() > 0);
            creditor_pool.sort_by(|&a, &b| {
                states[a]
                    .util()
                    .total_cmp(&states[b].util())
                    .then(states[a].id.cmp(&states[b].id))
            });
            let Some(&ci) = creditor_pool.iter().find(|ci| !visited.contains(*ci)) else {
                break;
            };
            visited.insert(ci);

            let limit = block_max.min(states[ci].free());
            let before = states[di].tps(ctx) + states[ci].tps(ctx);
            let (mut best_k, mut best_tps) = (0u64, before);
            for k in 1..=limit {
                let (d2, c2) = after_move(&states[di], &states[ci], k, r.total_ctx_tokens, ctx);
                let tps = d2.tps(ctx) + c2.tps(ctx);
                if tps > best_tps {
                    best_k = k;
                    best_tps = tps;
                }
            }
            evaluations += limit as usize + 1;
            if best_k == 0 {
                break;
            }
            let (d2, c2) = after_move(&states[di], &states[ci], best_k, r.total_ctx_tokens, ctx);
            states[di] = d2;
            states[ci] = c2;
            moves.push(PlannedMove {
                directive: MoveDirective {
                    request_id: r.request_id,
                    src_instance: did,
                    dst_instance: states[ci].id,
                    num_blocks: best_k,
                },
                estimated_gain: best_tps - before,
            });
            block_max -= best_k;
        }
    }

    let tps_after = states.iter().map(|s| s.tps(ctx)).sum();
    Ok(Plan {
        moves,
        tps_before,
        tps_after,
        evaluations,
    })
}

/// Blocks of `request_id` (homed on `home`) currently held by `holder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteHolding {
    pub request_id: u64,
    pub home: u32,
    pub holder: u32,
    pub blocks: u64,
}

/// Moves that bring lent blocks back before any new lending:
///
/// - a home instance whose batch is above the debtor threshold, with free
///   memory beyond one block per running request and nothing queued, pulls
///   its remote blocks back;
/// - a lender with queued work and less free memory than one expected
///   request returns what it hosts, to the home instance when it has room,
///   otherwise to the emptiest instance that is not borrowing.
pub fn plan_reclaims(
    snapshots: &[InstanceSnapshot],
    holdings: &[RemoteHolding],
    cfg: &SchedulerConfig,
    block_size_tokens: u64,
    expected_new_request_tokens: u64,
) -> Vec<MoveDirective> {
    let mut free: std::collections::BTreeMap<u32, u64> =
        snapshots.iter().map(|s| (s.instance_id, s.free_blocks())).collect();
    let by_id = |id: u32| snapshots.iter().find(|s| s.instance_id == id);
    let mut out = Vec::new();
    let mut srcs = BTreeSet::new();
    let mut dsts = BTreeSet::new();

    let mut sorted: Vec<RemoteHolding> = holdings.iter().copied().filter(|h| h.blocks > 0).collect();
    sorted.sort_by_key(|h| (h.home, std::cmp::Reverse(h.blocks), h.request_id, h.holder));

    for h in &sorted {
        let Some(home) = by_id(h.home) else { continue };
        if home.batch <= cfg.batch_threshold
            || home.pending_queue > 0
            || srcs.contains(&h.home)
            || dsts.contains(&h.holder)
        {
            continue;
        }
        let headroom = home.batch as u64;
        let avail = free[&h.home].saturating_sub(headroom);
        let n = avail.min(h.blocks);
        if n == 0 {
            continue;
        }
        *free.get_mut(&h.home).unwrap() -= n;
        *free.get_mut(&h.holder).unwrap() += n;
        srcs.insert(h.holder);
        dsts.insert(h.home);
        out.push(MoveDirective {
            request_id: h.request_id,
            src_instance: h.holder,
            dst_instance: h.home,
            num_blocks: n,
        });
    }

    let need = expected_new_request_tokens.div_ceil(block_size_tokens.max(1)).max(1);
    let mut sorted: Vec<RemoteHolding> = holdings.iter().copied().filter(|h| h.blocks > 0).collect();
    sorted.sort_by_key(|h| (h.holder, std::cmp::Reverse(h.blocks), h.request_id, h.home));
    for h in &sorted {
        let Some(holder) = by_id(h.holder) else { continue };
        if holder.pending_queue == 0 || free[&h.holder] >= need || dsts.contains(&h.holder) {
            continue;
        }
        if out.iter().any(|d| d.request_id == h.request_id && d.src_instance == h.holder) {
            continue;
        }
        let target = if free[&h.home] >= h.blocks && !srcs.contains(&h.home) {
            Some(h.home)
        } else {
            snapshots
                .iter()
                .filter(|s| {
                    s.instance_id != h.holder
                        && s.role_lock() != RoleLock::Debtor
                        && !srcs.contains(&s.instance_id)
                        && free[&s.instance_id] >= h.blocks
                })
                .max_by(|a, b| {
                    free[&a.instance_id]
                        .cmp(&free[&b.instance_id])
                        .then(b.instance_id.cmp(&a.instance_id))
                })
                .map(|s| s.instance_id)
        };
        let Some(dst) = target else { continue };
        *free.get_mut(&dst).unwrap() -= h.blocks;
        *free.get_mut(&h.holder).unwrap() += h.blocks;
        srcs.insert(h.holder);
        dsts.insert(dst);
        out.push(MoveDirective {
            request_id: h.request_id,
            src_instance: h.holder,
            dst_instance: dst,
            num_blocks: h.blocks,
        });
    }
    out
}

/// One planning round: reclaims first, then lending among instances the
/// reclaims did not touch.
pub fn plan_round(
    snapshots: &[InstanceSnapshot],
    holdings: &[RemoteHolding],
    ctx: &PlanContext,
) -> Result<Plan> {
    validate_all(snapshots)?;
    let reclaims = plan_reclaims(
        snapshots,
        holdings,
        &ctx.cfg,
        ctx.model.shape.block_size_tokens,
        ctx.expected_new_request_tokens,
    );
    let touched: BTreeSet<u32> = reclaims
        .iter()
        .flat_map(|d| [d.src_instance, d.dst_instance])
        .collect();
    let rest: Vec<InstanceSnapshot> = snapshots
        .iter()
        .filter(|s| !touched.contains(&s.instance_id))
        .cloned()
        .collect();
    let mut plan = plan_moves(&rest, ctx)?;
    let mut moves: Vec<PlannedMove> = reclaims
        .into_iter()
        .map(|directive| PlannedMove {
            directive,
            estimated_gain: 0.0,
        })
        .collect();
    moves.append(&mut plan.moves);
    plan.moves = moves;
    Ok(plan)
}

/// Role an instance plays in the throughput model.
pub fn model_role(s: &InstanceSnapshot) -> Role {
    match s.role_lock() {
        RoleLock::Debtor => Role::Debtor,
        RoleLock::Creditor => Role::Creditor,
        RoleLock::None => Role::Neutral,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::{ModelShape, PerfCurve};

    fn inst(id: u32, batch: usize, cap: u64, used: u64) -> InstanceSnapshot {
        let per = if batch == 0 { 0 } else { used / batch as u64 };
        InstanceSnapshot {
            instance_id: id,
            batch,
            mem_capacity_blocks: cap,
            mem_used_blocks: used,
            lent_blocks: 0,
            pending_queue: 0,
            requests: (0..batch)
                .map(|i| RequestSlot {
                    request_id: u64::from(id) * 1000 + i as u64,
                    local_blocks: per,
                    remote_blocks: 0,
                    total_ctx_tokens: per * 16,
                })
                .collect(),
        }
    }

    fn cfg(batch_threshold: usize, util: f64) -> SchedulerConfig {
        SchedulerConfig {
            batch_threshold,
            mem_util_threshold: util,
            planning_period_s: 1.0,
            retain_local_ratio: 0.5,
        }
    }

    fn ctx() -> PlanContext {
        PlanContext {
            model: PerfModel::new(
                ModelShape::llama_7b(),
                PerfCurve::saturating(4e13, 8.0, 128).unwrap(),
                PerfCurve::constant(1.5e12).unwrap(),
            )
            .unwrap(),
            cfg: cfg(8, 0.8),
            expected_new_request_tokens: 512,
            query_transfer_s: 0.0,
        }
    }

    #[test]
    fn debtors_sorted_by_batch() {
        let snaps = vec![inst(1, 2, 100, 90), inst(2, 8, 100, 90), inst(3, 1, 100, 90)];
        let (d, _) = classify_roles(&snaps, &cfg(4, 0.5));
        assert_eq!(d, vec![3, 1]);
    }

    #[test]
    fn creditors_sorted_by_util() {
        let snaps = vec![inst(10, 20, 100, 90), inst(11, 20, 100, 20), inst(12, 20, 100, 40)];
        let (_, c) = classify_roles(&snaps, &cfg(4, 0.5));
        assert_eq!(c, vec![11, 12]);
    }

    #[test]
    fn both_qualifying_is_debtor_only() {
        let snaps = vec![inst(1, 2, 100, 10)];
        let (d, c) = classify_roles(&snaps, &cfg(4, 0.5));
        assert_eq!((d, c), (vec![1], vec![]));
    }

    #[test]
    fn no_debtors_empty_plan() {
        let snaps = vec![inst(1, 50, 1000, 900), inst(2, 60, 1000, 100)];
        let p = plan_moves(&snaps, &ctx()).unwrap();
        assert!(p.moves.is_empty());
        assert_eq!(p.tps_before, p.tps_after);
    }

    #[test]
    fn single_instance_empty_plan() {
        let mut s = inst(1, 1, 1000, 600);
        s.pending_queue = 10;
        let p = plan_moves(&[s], &ctx()).unwrap();
        assert!(p.moves.is_empty());
    }

    #[test]
    fn feasible_batch_derivation() {
        let s = inst(1, 3, 1000, 600);
        assert_eq!(derive_feasible_batch(&s, 0, 10, 16, 512), 3);
        assert_eq!(derive_feasible_batch(&s, 640, 0, 16, 512), 3);
        assert_eq!(derive_feasible_batch(&s, 64, 10, 16, 512), 5);
        assert_eq!(derive_feasible_batch(&s, 64, 1, 16, 512), 4);
    }

    #[test]
    fn gain_bounds() {
        let mut d = inst(1, 1, 1000, 600);
        d.pending_queue = 5;
        let c = inst(2, 40, 1000, 1000);
        assert_eq!(estimate_pair_gain(0, &d, &c, &ctx()).unwrap(), 0.0);
        assert_eq!(
            estimate_pair_gain(1, &d, &c, &ctx()),
            Err(SchedulerError::MoveOutOfBounds { k: 1, max: 0 })
        );
    }

    #[test]
    fn snapshot_validation_names_invariant() {
        let mut s = inst(7, 1, 100, 50);
        s.mem_used_blocks = 150;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("instance 7") && err.contains("exceeds mem_capacity_blocks"));
        let mut s = inst(7, 1, 100, 50);
        s.mem_used_blocks = 60;
        s.lent_blocks = 1;
        s.requests[0].remote_blocks = 1;
        assert!(s.validate().unwrap_err().to_string().contains("both borrowing and lending"));
    }

    #[test]
    fn identical_creditors_tie_to_lowest_id() {
        let mut d = inst(0, 1, 1000, 600);
        d.pending_queue = 20;
        let snaps = vec![d, inst(5, 40, 1000, 300), inst(3, 40, 1000, 300)];
        let p = plan_moves(&snaps, &ctx()).unwrap();
        assert!(!p.moves.is_empty());
        assert_eq!(p.moves[0].directive.dst_instance, 3);
    }

    #[test]
    fn movable_respects_retention() {
        let r = RequestSlot {
            request_id: 1,
            local_blocks: 600,
            remote_blocks: 0,
            total_ctx_tokens: 9600,
        };
        assert_eq!(movable_blocks(&r, 0.5), 300);
        let r = RequestSlot {
            local_blocks: 310,
            remote_blocks: 290,
            ..r
        };
        assert_eq!(movable_blocks(&r, 0.5), 10);
    }

    #[test]
    fn reclaim_to_home_with_free_space() {
        let mut home = inst(0, 20, 1000, 300);
        home.requests[0].remote_blocks = 100;
        let mut holder = inst(1, 10, 1000, 600);
        holder.lent_blocks = 100;
        let holdings = [RemoteHolding {
            request_id: 0,
            home: 0,
            holder: 1,
            blocks: 100,
        }];
        let r = plan_reclaims(&[home.clone(), holder.clone()], &holdings, &cfg(16, 0.8), 16, 512);
        assert_eq!(
            r,
            vec![MoveDirective {
                request_id: 0,
                src_instance: 1,
                dst_instance: 0,
                num_blocks: 100
            }]
        );
        // A home small enough to be a debtor keeps its attention offloaded.
        home.batch = 1;
        home.requests.truncate(1);
        assert!(plan_reclaims(&[home, holder], &holdings, &cfg(16, 0.8), 16, 512).is_empty());
    }

    #[test]
    fn creditor_under_pressure_returns_blocks() {
        let mut home = inst(0, 1, 1000, 1000);
        home.requests[0].remote_blocks = 50;
        let mut holder = inst(1, 10, 1000, 1000);
        holder.lent_blocks = 50;
        holder.pending_queue = 3;
        let other = inst(2, 10, 1000, 100);
        let holdings = [RemoteHolding {
            request_id: 0,
            home: 0,
            holder: 1,
            blocks: 50,
        }];
        let r = plan_reclaims(&[home, holder, other], &holdings, &cfg(16, 0.8), 16, 512);
        assert_eq!(r.len(), 1);
        assert_eq!((r[0].src_instance, r[0].dst_instance, r[0].num_blocks), (1, 2, 50));
    }
}
