//! Discrete-event simulation of a serving cluster.
//!
//! Instances run continuous-batching decode steps whose durations come from
//! the performance model. Requests arrive from a trace, are dispatched to the
//! instance with the most uncommitted memory and grow by one token per step.
//! Under [`Policy::Infinite`] the instances run the control-plane protocol
//! and a planner periodically moves KV blocks between them.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::attention::reference::{extended_attention, relative_error};
use crate::attention::{aggregate_partials, compute_micro_attention, AttentionConfig, KvSegment, QueryVector};
use crate::config::ClusterConfig;
use crate::controlplane::{
    ControlMessage, Endpoint, GManager, InstId, MoveOutcome, Network, Outbox, RManager, ReqId,
};
use crate::perfmodel::PerfModel;
use crate::scheduler::{plan_round, PlanContext};
use crate::trace::TraceRequest;

pub mod scenario;

/// Relative error allowed between the blockwise and reference outputs in a
/// spot check.
pub const SPOT_CHECK_TOLERANCE: f64 = 1e-6;
const SPOT_CHECK_HEAD_DIM: usize = 32;
/// Sample ticks without progress before the run is declared stalled.
const STALL_TICKS: u32 = 8;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error("duplicate request id {0} in trace")]
    DuplicateRequest(u64),
    #[error("invariant violated at t={time:.9}: {detail}")]
    Invariant { time: f64, detail: String },
    #[error("attention spot check failed at t={time:.9} for request {req}: relative error {err:.3e}")]
    SpotCheck { time: f64, req: u64, err: f64 },
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Policy {
    /// Planner-driven block lending over the control plane.
    Infinite,
    /// Local placement; blocks that do not fit locally go to the instance
    /// with the most free memory.
    Strawman,
    /// Peak memory reserved at admission; requests larger than an instance
    /// are rejected.
    Static,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Infinite, Policy::Strawman, Policy::Static];
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Infinite => "infinite",
            Policy::Strawman => "strawman",
            Policy::Static => "static",
        })
    }
}

impl FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "infinite" => Ok(Policy::Infinite),
            "strawman" => Ok(Policy::Strawman),
            "static" => Ok(Policy::Static),
            other => Err(format!("unknown policy `{other}` (expected infinite, strawman or static)")),
        }
    }
}

/// Instance with the most free blocks; ties go to the lowest id.
pub fn dispatch_request(free_blocks: &[(InstId, i64)]) -> Option<InstId> {
    free_blocks
        .iter()
        .copied()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(id, _)| id)
}

/// Time by which remote attention overruns the local attention it overlaps
/// with. Each remote part costs its compute time plus sending the query and
/// returning the partial.
pub fn remote_attention_extension(local_time: f64, remote_times: &[f64], query_transfer_s: f64) -> f64 {
    remote_times
        .iter()
        .map(|r| r + 2.0 * query_transfer_s)
        .fold(0.0f64, |acc, r| acc.max(r - local_time))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Pending,
    Queued,
    Running,
    Completed,
    Rejected,
    Stalled,
}

impl fmt::Display for RequestState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RequestState::Pending => "pending",
            RequestState::Queued => "queued",
            RequestState::Running => "running",
            RequestState::Completed => "completed",
            RequestState::Rejected => "rejected",
            RequestState::Stalled => "stalled",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRequest {
    pub req_id: u64,
    pub arrival_time: f64,
    pub prompt_tokens: u64,
    pub target_output_tokens: u64,
    pub state: RequestState,
    pub generated_tokens: u64,
    pub home: Option<InstId>,
    pub admitted_at: Option<f64>,
    pub completed_at: Option<f64>,
    /// Blocks the request owns across the cluster.
    pub blocks: u64,
    /// Decode steps skipped because no instance had room for a new block.
    pub stalled_steps: u64,
    /// Largest number of blocks held away from the home instance.
    pub peak_remote_blocks: u64,
    pub preemptions: u64,
    in_step: bool,
    prefilled: bool,
}

impl SimRequest {
    pub fn context_tokens(&self) -> u64 {
        self.prompt_tokens + self.generated_tokens
    }

    pub fn latency(&self) -> Option<f64> {
        self.completed_at.map(|t| t - self.arrival_time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub start: f64,
    pub inst: InstId,
    pub batch: usize,
    /// Duration from compute alone.
    pub compute_latency: f64,
    /// Duration including any migration slowdown.
    pub step_latency: f64,
    pub moved_tokens: u64,
    pub local_tokens: u64,
    pub hosted_tokens: u64,
    pub remote_extension: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSample {
    pub tokens_per_s: f64,
    pub mem_util: f64,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub instances: Vec<InstanceSample>,
    pub cluster_tokens_per_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveStats {
    pub planning_rounds: u64,
    pub instructions: u64,
    pub completed: u64,
    pub rejected: u64,
    pub deferred: u64,
    pub aborted: u64,
    pub blocks_moved: u64,
    /// Blocks placed away from home because the home was full.
    pub overflow_blocks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    Finished,
    Stalled,
    TimeLimit,
}

impl fmt::Display for EndReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndReason::Finished => "finished",
            EndReason::Stalled => "stalled",
            EndReason::TimeLimit => "time_limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub policy: Policy,
    pub seed: u64,
    pub end_reason: EndReason,
    pub end_time: f64,
    pub requests: Vec<SimRequest>,
    pub samples: Vec<Sample>,
    pub steps: Vec<StepRecord>,
    pub total_steps: u64,
    pub preemptions: u64,
    pub moves: MoveStats,
    pub spot_checks: u64,
    pub spot_check_max_err: f64,
}

impl Metrics {
    pub fn count(&self, state: RequestState) -> usize {
        self.requests.iter().filter(|r| r.state == state).count()
    }

    pub fn completed_tokens(&self) -> u64 {
        self.requests
            .iter()
            .filter(|r| r.state == RequestState::Completed)
            .map(|r| r.target_output_tokens)
            .sum()
    }

    /// Time of the last completion.
    pub fn makespan(&self) -> f64 {
        self.requests
            .iter()
            .filter_map(|r| r.completed_at)
            .fold(0.0, f64::max)
    }

    /// Completed output tokens per simulated second.
    pub fn throughput(&self) -> f64 {
        let t = self.makespan();
        if t > 0.0 {
            self.completed_tokens() as f64 / t
        } else {
            0.0
        }
    }

    /// Mean, median and 99th percentile latency of completed requests.
    pub fn latency_stats(&self) -> Option<(f64, f64, f64)> {
        let mut l: Vec<f64> = self.requests.iter().filter_map(SimRequest::latency).collect();
        if l.is_empty() {
            return None;
        }
        l.sort_by(f64::total_cmp);
        let rank = |p: f64| l[((p * l.len() as f64).ceil() as usize).clamp(1, l.len()) - 1];
        Some((l.iter().sum::<f64>() / l.len() as f64, rank(0.5), rank(0.99)))
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "policy: {}", self.policy);
        let _ = writeln!(w, "seed: {}", self.seed);
        let _ = writeln!(w, "end_reason: {}", self.end_reason);
        let _ = writeln!(w, "end_time_s: {:.6}", self.end_time);
        let _ = writeln!(w, "requests: {}", self.requests.len());
        for st in [
            RequestState::Completed,
            RequestState::Rejected,
            RequestState::Stalled,
        ] {
            let _ = writeln!(w, "{st}: {}", self.count(st));
        }
        let _ = writeln!(w, "completed_tokens: {}", self.completed_tokens());
        let _ = writeln!(w, "makespan_s: {:.6}", self.makespan());
        let _ = writeln!(w, "throughput_tokens_per_s: {:.6}", self.throughput());
        match self.latency_stats() {
            Some((mean, p50, p99)) => {
                let _ = writeln!(w, "latency_mean_s: {mean:.6}");
                let _ = writeln!(w, "latency_p50_s: {p50:.6}");
                let _ = writeln!(w, "latency_p99_s: {p99:.6}");
            }
            None => {
                let _ = writeln!(w, "latency_mean_s: n/a");
            }
        }
        let _ = writeln!(w, "decode_steps: {}", self.total_steps);
        let _ = writeln!(w, "preemptions: {}", self.preemptions);
        let m = &self.moves;
        let _ = writeln!(w, "planning_rounds: {}", m.planning_rounds);
        let _ = writeln!(w, "move_instructions: {}", m.instructions);
        let _ = writeln!(
            w,
            "moves_completed: {} rejected: {} deferred: {} aborted: {}",
            m.completed, m.rejected, m.deferred, m.aborted
        );
        let _ = writeln!(w, "blocks_moved: {}", m.blocks_moved);
        let _ = writeln!(w, "overflow_blocks: {}", m.overflow_blocks);
        let _ = writeln!(
            w,
            "attention_spot_checks: {} (max relative error {:.3e})",
            self.spot_checks, self.spot_check_max_err
        );
        s
    }

    pub fn timeseries_tsv(&self) -> String {
        let n = self.samples.first().map_or(0, |s| s.instances.len());
        let mut s = String::from("time_s");
        for i in 0..n {
            let _ = write!(s, "\tr{i}_tokens_per_s\tr{i}_mem_util\tr{i}_batch");
        }
        s.push_str("\tcluster_tokens_per_s\n");
        for row in &self.samples {
            let _ = write!(s, "{:.6}", row.time);
            for i in &row.instances {
                let _ = write!(s, "\t{:.6}\t{:.6}\t{}", i.tokens_per_s, i.mem_util, i.batch);
            }
            let _ = writeln!(s, "\t{:.6}", row.cluster_tokens_per_s);
        }
        s
    }

    pub fn requests_tsv(&self) -> String {
        let mut s = String::from(
            "req_id\tarrival_s\tprompt_tokens\toutput_tokens\tstate\thome\tadmitted_s\tcompleted_s\tlatency_s\tpeak_remote_blocks\tpreemptions\tstalled_steps\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |t| format!("{t:.6}"));
        for r in &self.requests {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.req_id,
                r.arrival_time,
                r.prompt_tokens,
                r.target_output_tokens,
                r.state,
                r.home.map_or_else(|| "-".to_string(), |h| format!("r{h}")),
                opt(r.admitted_at),
                opt(r.completed_at),
                opt(r.latency()),
                r.peak_remote_blocks,
                r.preemptions,
                r.stalled_steps,
            );
        }
        s
    }

    pub fn steps_tsv(&self) -> String {
        let mut s = String::from(
            "start_s\tinst\tbatch\tcompute_latency_s\tstep_latency_s\tmoved_tokens\tlocal_tokens\thosted_tokens\tremote_extension_s\n",
        );
        for r in &self.steps {
            let _ = writeln!(
                s,
                "{:.9}\tr{}\t{}\t{:.12e}\t{:.12e}\t{}\t{}\t{}\t{:.6e}",
                r.start,
                r.inst,
                r.batch,
                r.compute_latency,
                r.step_latency,
                r.moved_tokens,
                r.local_tokens,
                r.hosted_tokens,
                r.remote_extension
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub metrics: Metrics,
    /// One line per protocol message, in send order.
    pub event_log: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrival(usize),
    StepEnd(InstId),
    HeartbeatTick,
    ScheduleTick,
    SampleTick,
}

/// Ordering key: non-negative times compare like their bit patterns.
type Key = (u64, u64);

struct Instance {
    rm: RManager,
    queue: VecDeque<usize>,
    running: Vec<usize>,
    busy: bool,
    /// Blocks promised to queued requests, used by dispatch.
    queued_blocks: u64,
    tokens_since_sample: u64,
}

struct Sim<'a> {
    cfg: &'a ClusterConfig,
    policy: Policy,
    perf: PerfModel,
    bs: u64,
    now: f64,
    seq: u64,
    events: BTreeMap<Key, Event>,
    net: Network,
    gm: Option<GManager>,
    insts: Vec<Instance>,
    reqs: Vec<SimRequest>,
    index: BTreeMap<ReqId, usize>,
    /// Chunks delivered to a destination whose ack has not reached the
    /// source yet, keyed by (source, request).
    unacked: BTreeMap<(InstId, ReqId), u64>,
    rng: ChaCha8Rng,
    query_transfer_s: f64,
    pending_arrivals: usize,
    progress: u64,
    last_sample: (f64, u64),
    idle_ticks: u32,
    completed_total_tokens: (u64, u64),
    metrics: Metrics,
}

fn key(time: f64, seq: u64) -> Key {
    debug_assert!(time >= 0.0 && time.is_finite());
    (time.to_bits(), seq)
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, time: f64, ev: Event) {
        debug_assert!(time >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.events.insert(key(time, self.seq), ev);
    }

    fn invariant(&self, detail: String) -> SimError {
        SimError::Invariant {
            time: self.now,
            detail,
        }
    }

    fn send(&mut self, from: Endpoint, out: Outbox) {
        let block_bytes = self.cfg.block_bytes();
        for (to, msg) in out {
            if let ControlMessage::MoveKvcache { .. } = msg {
                self.metrics.moves.instructions += 1;
            }
            let delay = self.cfg.controlplane.link.delay(msg.wire_bytes(block_bytes));
            self.net.send(self.now, from, to, msg, delay);
        }
    }

    /// Blocks of `req` stored on `inst` that have not yet been handed over
    /// to another instance.
    fn logical_blocks(&self, inst: InstId, req: ReqId) -> u64 {
        let stored = self.insts[inst as usize].rm.stored_blocks(req);
        stored - self.unacked.get(&(inst, req)).copied().unwrap_or(0)
    }

    fn remote_blocks(&self, r: &SimRequest) -> Vec<(InstId, u64)> {
        let home = r.home.expect("admitted request has a home");
        (0..self.insts.len() as InstId)
            .filter(|&j| j != home)
            .map(|j| (j, self.logical_blocks(j, r.req_id)))
            .filter(|&(_, b)| b > 0)
            .collect()
    }

    fn home_tokens(&self, r: &SimRequest) -> u64 {
        let remote: u64 = self.remote_blocks(r).iter().map(|(_, b)| b).sum();
        r.context_tokens().saturating_sub(remote * self.bs)
    }

    fn check_capacity(&self) -> Result<()> {
        for i in &self.insts {
            let used = i.rm.held_blocks() + i.rm.reserved_blocks();
            if used > i.rm.capacity_blocks {
                return Err(self.invariant(format!(
                    "instance {} holds {used} blocks with capacity {}",
                    i.rm.inst_id, i.rm.capacity_blocks
                )));
            }
        }
        Ok(())
    }

    fn check_accounting(&self, idx: usize) -> Result<()> {
        let r = &self.reqs[idx];
        let held: u64 = (0..self.insts.len() as InstId)
            .map(|j| self.logical_blocks(j, r.req_id))
            .sum();
        let live = matches!(r.state, RequestState::Running | RequestState::Stalled);
        let want_total = if live { r.blocks } else { 0 };
        let want_cover = if live {
            (r.context_tokens() + u64::from(r.in_step)).div_ceil(self.bs)
        } else {
            0
        };
        if held != want_total || r.blocks != want_cover && live {
            return Err(self.invariant(format!(
                "request {} holds {held} blocks, owns {}, context needs {want_cover}",
                r.req_id, r.blocks
            )));
        }
        Ok(())
    }

    fn peak_blocks(&self, idx: usize) -> u64 {
        let r = &self.reqs[idx];
        (r.prompt_tokens + r.target_output_tokens).div_ceil(self.bs)
    }

    /// Blocks a queued request occupies once admitted.
    fn commitment(&self, idx: usize) -> u64 {
        self.reqs[idx].context_tokens().div_ceil(self.bs)
    }

    fn enqueue(&mut self, i: InstId, idx: usize, front: bool) {
        let c = self.commitment(idx);
        let inst = &mut self.insts[i as usize];
        if front {
            inst.queue.push_front(idx);
        } else {
            inst.queue.push_back(idx);
        }
        inst.queued_blocks += c;
        self.reqs[idx].state = RequestState::Queued;
    }

    fn on_arrival(&mut self, idx: usize) -> Result<()> {
        self.pending_arrivals -= 1;
        let cap = self.cfg.instances.capacity_blocks;
        let need = match self.policy {
            Policy::Static => self.peak_blocks(idx),
            _ => (self.reqs[idx].prompt_tokens + 1).div_ceil(self.bs),
        };
        if need > cap {
            self.reqs[idx].state = RequestState::Rejected;
            return Ok(());
        }
        let free: Vec<(InstId, i64)> = self
            .insts
            .iter()
            .map(|i| (i.rm.inst_id, i.rm.free_blocks() as i64 - i.queued_blocks as i64))
            .collect();
        let target = dispatch_request(&free).expect("at least one instance");
        self.reqs[idx].home = Some(target);
        self.enqueue(target, idx, false);
        self.try_start(target)
    }

    /// Admits queued requests while the batch and memory allow, keeping a
    /// small watermark of free blocks for the running requests to grow into.
    fn admit_from_queue(&mut self, i: InstId, participants: &mut Vec<usize>) -> Result<()> {
        let watermark = self.cfg.instances.capacity_blocks.div_ceil(100);
        loop {
            let inst = &self.insts[i as usize];
            let Some(&idx) = inst.queue.front() else { break };
            if inst.running.len() >= self.cfg.instances.max_batch {
                break;
            }
            let first_step = (self.reqs[idx].context_tokens() + 1).div_ceil(self.bs);
            if inst.rm.free_blocks() < first_step + watermark {
                break;
            }
            let c = self.commitment(idx);
            let inst = &mut self.insts[i as usize];
            inst.queue.pop_front();
            inst.queued_blocks -= c;
            let req_id = self.reqs[idx].req_id;
            let admitted = inst.rm.admit(req_id, first_step);
            admitted.map_err(|e| self.invariant(e.to_string()))?;
            self.insts[i as usize].running.push(idx);
            let r = &mut self.reqs[idx];
            r.state = RequestState::Running;
            r.admitted_at.get_or_insert(self.now);
            r.blocks = first_step;
            r.in_step = true;
            participants.push(idx);
            self.progress += 1;
        }
        Ok(())
    }

    /// Finds room for one more block of a request homed on `home`.
    fn place_block(&mut self, idx: usize, home: InstId) -> Result<bool> {
        let req_id = self.reqs[idx].req_id;
        if self.insts[home as usize].rm.free_blocks() > 0 {
            self.insts[home as usize]
                .rm
                .add_blocks(req_id, 1)
                .map_err(|e| self.invariant(e.to_string()))?;
            return Ok(true);
        }
        if self.policy == Policy::Static {
            return Ok(false);
        }
        let best = self
            .insts
            .iter()
            .filter(|i| i.rm.inst_id != home && i.rm.free_blocks() > 0)
            .max_by(|a, b| {
                a.rm.free_blocks()
                    .cmp(&b.rm.free_blocks())
                    .then(b.rm.inst_id.cmp(&a.rm.inst_id))
            })
            .map(|i| i.rm.inst_id);
        let Some(dst) = best else { return Ok(false) };
        self.insts[dst as usize]
            .rm
            .add_blocks(req_id, 1)
            .map_err(|e| self.invariant(e.to_string()))?;
        self.metrics.moves.overflow_blocks += 1;
        Ok(true)
    }

    /// Frees every block of a running request and puts it back at the head
    /// of its instance's queue; it is prefilled again on readmission.
    fn preempt(&mut self, i: InstId, idx: usize) -> Result<()> {
        let req_id = self.reqs[idx].req_id;
        for inst in &mut self.insts {
            inst.rm.release(req_id);
        }
        self.unacked.retain(|&(_, r), _| r != req_id);
        self.insts[i as usize].running.retain(|&x| x != idx);
        let r = &mut self.reqs[idx];
        r.blocks = 0;
        r.in_step = false;
        r.prefilled = false;
        r.preemptions += 1;
        self.metrics.preemptions += 1;
        self.enqueue(i, idx, true);
        self.check_accounting(idx)
    }

    /// Gives every running request room for its next token, oldest first.
    /// When no instance has room the youngest running request is preempted;
    /// a request that is alone on its instance stalls instead.
    fn grow_running(&mut self, i: InstId, participants: &mut Vec<usize>) -> Result<bool> {
        let mut preempted = false;
        let mut pos = 0;
        while pos < self.insts[i as usize].running.len() {
            let idx = self.insts[i as usize].running[pos];
            let need = (self.reqs[idx].context_tokens() + 1).div_ceil(self.bs);
            let mut placed = need <= self.reqs[idx].blocks;
            while !placed {
                if self.place_block(idx, i)? {
                    placed = true;
                    continue;
                }
                let running = &self.insts[i as usize].running;
                if running.len() == 1 {
                    break;
                }
                let victim = *running.last().expect("non-empty");
                self.preempt(i, victim)?;
                preempted = true;
                if victim == idx {
                    break;
                }
            }
            if !self.insts[i as usize].running.contains(&idx) {
                continue;
            }
            let r = &mut self.reqs[idx];
            if placed {
                r.blocks = need;
                r.state = RequestState::Running;
                r.in_step = true;
                participants.push(idx);
            } else {
                r.state = RequestState::Stalled;
                r.stalled_steps += 1;
            }
            pos += 1;
        }
        Ok(preempted)
    }

    fn try_start(&mut self, i: InstId) -> Result<()> {
        if self.insts[i as usize].busy {
            return Ok(());
        }
        let mut participants = Vec::new();
        if !self.grow_running(i, &mut participants)? {
            self.admit_from_queue(i, &mut participants)?;
        }
        if participants.is_empty() {
            return Ok(());
        }
        let rec = self.step_record(i, &participants)?;
        self.insts[i as usize].busy = true;
        self.progress += 1;
        self.metrics.total_steps += 1;
        if self.cfg.sim.record_steps {
            self.metrics.steps.push(rec);
        }
        let every = self.cfg.sim.spot_check_every_steps;
        if every > 0 && self.metrics.total_steps.is_multiple_of(every) {
            self.spot_check(&participants)?;
        }
        for &idx in &participants {
            let remote: u64 = self.remote_blocks(&self.reqs[idx]).iter().map(|(_, b)| b).sum();
            let r = &mut self.reqs[idx];
            r.prefilled = true;
            r.peak_remote_blocks = r.peak_remote_blocks.max(remote);
            self.check_accounting(idx)?;
        }
        self.schedule(self.now + rec.step_latency, Event::StepEnd(i));
        Ok(())
    }

    /// Computes the duration of the step about to start and sends this
    /// step's migration chunks.
    fn step_record(&mut self, i: InstId, participants: &[usize]) -> Result<StepRecord> {
        let bs = self.bs;
        let mut local = 0u64;
        let mut remote_parts: Vec<(InstId, u64)> = Vec::new();
        let mut prefill_tokens = 0u64;
        for &idx in participants {
            let r = &self.reqs[idx];
            local += self.home_tokens(r);
            remote_parts.extend(self.remote_blocks(r).into_iter().map(|(j, b)| (j, b * bs)));
            if !r.prefilled {
                prefill_tokens += r.context_tokens();
            }
        }
        let stored = self.insts[i as usize].rm.stored();
        let hosted: u64 = stored
            .iter()
            .filter(|(_, h)| !h.local)
            .map(|(&req, _)| self.logical_blocks(i, req) * bs)
            .sum();
        let total = local + hosted;
        let p = &self.perf;
        let t_local = p.attention_time(local, total);
        let t_hosted = p.attention_time(hosted, total);
        let remote_times: Vec<f64> = remote_parts
            .iter()
            .map(|&(j, tokens)| {
                let there = self.insts[j as usize].rm.held_blocks() * bs;
                p.attention_time(tokens, there.max(tokens))
            })
            .collect();
        let ext = remote_attention_extension(t_local, &remote_times, self.query_transfer_s);
        let per_layer = p.gemm_time(participants.len()) + t_local + t_hosted + ext;
        let compute = f64::from(p.shape.n_layers) * per_layer
            + prefill_tokens as f64 * self.cfg.sim.prefill_time_per_token_s;

        let chunk = self.cfg.migration.chunk_blocks(bs);
        let out = self.insts[i as usize].rm.pump_transfers(chunk);
        let moved_blocks: u64 = out
            .iter()
            .map(|(_, m)| match m {
                ControlMessage::DataTransfer { num_blocks, .. } => *num_blocks,
                _ => 0,
            })
            .sum();
        self.collect_outcomes(i);
        self.send(Endpoint::Instance(i), out);
        let moved_tokens = moved_blocks * bs;
        Ok(StepRecord {
            start: self.now,
            inst: i,
            batch: participants.len(),
            compute_latency: compute,
            step_latency: compute * self.cfg.migration.step_factor(moved_tokens),
            moved_tokens,
            local_tokens: local,
            hosted_tokens: hosted,
            remote_extension: ext,
        })
    }

    fn collect_outcomes(&mut self, i: InstId) {
        for rec in self.insts[i as usize].rm.take_outcomes() {
            let m = &mut self.metrics.moves;
            match rec.outcome {
                MoveOutcome::Completed => {
                    m.completed += 1;
                    m.blocks_moved += rec.num_blocks;
                }
                MoveOutcome::Rejected => m.rejected += 1,
                MoveOutcome::Deferred => m.deferred += 1,
                MoveOutcome::Aborted => m.aborted += 1,
            }
        }
    }

    /// Runs the blockwise attention path over a scaled-down copy of one
    /// request's current layout and compares it with the reference.
    fn spot_check(&mut self, participants: &[usize]) -> Result<()> {
        let pick = participants
            .iter()
            .copied()
            .max_by_key(|&idx| (self.remote_blocks(&self.reqs[idx]).len(), std::cmp::Reverse(idx)))
            .expect("non-empty step");
        let r = &self.reqs[pick];
        let mut parts: Vec<u64> = vec![self.home_tokens(r)];
        parts.extend(self.remote_blocks(r).iter().map(|(_, b)| b * self.bs));
        parts.retain(|&t| t > 0);
        let total: u64 = parts.iter().sum();
        let budget = self.cfg.sim.spot_check_max_tokens.max(parts.len() as u64);
        let lens: Vec<usize> = parts
            .iter()
            .map(|&t| ((t as u128 * budget as u128 / total.max(1) as u128) as usize).max(1))
            .collect();
        let n: usize = lens.iter().sum();
        let d = SPOT_CHECK_HEAD_DIM;
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| self.rng.sample(StandardNormal)).collect() };
        let q = draw(d);
        let keys = draw(n * d);
        let values = draw(n * d);
        let cfg = AttentionConfig::new(d, 1, 1).expect("valid head config");
        let q = QueryVector::new(q).expect("non-empty query");
        let whole = KvSegment::from_flat(d, keys, values).expect("consistent segment");
        let mut cuts = Vec::new();
        let mut acc = 0;
        for l in &lens[..lens.len() - 1] {
            acc += l;
            cuts.push(acc);
        }
        let check = || -> std::result::Result<f64, crate::attention::AttentionError> {
            let partials = whole
                .split_at_cuts(&cuts)?
                .iter()
                .map(|s| compute_micro_attention(&q, s, &cfg))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let got = aggregate_partials(&partials)?;
            Ok(relative_error(&got, &extended_attention(&q, &whole, &cfg)))
        };
        let err = check().unwrap_or(f64::INFINITY);
        self.metrics.spot_checks += 1;
        self.metrics.spot_check_max_err = self.metrics.spot_check_max_err.max(err);
        if err.is_nan() || err >= SPOT_CHECK_TOLERANCE {
            return Err(SimError::SpotCheck {
                time: self.now,
                req: self.reqs[pick].req_id,
                err,
            });
        }
        Ok(())
    }

    fn on_step_end(&mut self, i: InstId) -> Result<()> {
        self.insts[i as usize].busy = false;
        let running = std::mem::take(&mut self.insts[i as usize].running);
        let mut still = Vec::with_capacity(running.len());
        let mut finished = false;
        for idx in running {
            if !self.reqs[idx].in_step {
                still.push(idx);
                continue;
            }
            let r = &mut self.reqs[idx];
            r.in_step = false;
            r.generated_tokens += 1;
            self.insts[i as usize].tokens_since_sample += 1;
            if r.generated_tokens == r.target_output_tokens {
                self.complete(idx)?;
                finished = true;
            } else {
                self.check_accounting(idx)?;
                still.push(idx);
            }
        }
        self.insts[i as usize].running = still;
        self.try_start(i)?;
        if finished {
            self.kick_idle()?;
        }
        Ok(())
    }

    fn complete(&mut self, idx: usize) -> Result<()> {
        let req_id = self.reqs[idx].req_id;
        for inst in &mut self.insts {
            inst.rm.release(req_id);
        }
        self.unacked.retain(|&(_, r), _| r != req_id);
        let r = &mut self.reqs[idx];
        r.state = RequestState::Completed;
        r.completed_at = Some(self.now);
        r.blocks = 0;
        self.completed_total_tokens.0 += r.prompt_tokens + r.target_output_tokens;
        self.completed_total_tokens.1 += 1;
        self.check_accounting(idx)
    }

    fn kick_idle(&mut self) -> Result<()> {
        for i in 0..self.insts.len() as InstId {
            self.try_start(i)?;
        }
        Ok(())
    }

    fn deliver(&mut self) -> Result<()> {
        let m = self.net.pop().expect("message due");
        self.now = self.now.max(m.time);
        match m.to {
            Endpoint::GManager => {
                let gm = self.gm.as_mut().expect("gManager runs under the infinite policy");
                let out = gm.handle(self.now, &m.msg);
                self.send(Endpoint::GManager, out);
            }
            Endpoint::Instance(i) => {
                let (batch, pending) = {
                    let inst = &self.insts[i as usize];
                    (inst.running.len(), inst.queue.len())
                };
                let touched = match &m.msg {
                    ControlMessage::DataTransfer { req_id, .. }
                    | ControlMessage::TransferAck { req_id, .. }
                    | ControlMessage::TransferAbort { req_id, .. } => Some(*req_id),
                    _ => None,
                };
                if let ControlMessage::TransferAck {
                    req_id, num_blocks, ..
                } = &m.msg
                {
                    if let Some(u) = self.unacked.get_mut(&(i, *req_id)) {
                        *u = u.saturating_sub(*num_blocks);
                        if *u == 0 {
                            self.unacked.remove(&(i, *req_id));
                        }
                    }
                }
                let out = self.insts[i as usize].rm.handle(self.now, m.msg, batch, pending);
                for (_, msg) in &out {
                    if let ControlMessage::TransferAck {
                        reservation_id,
                        req_id,
                        num_blocks,
                    } = msg
                    {
                        let src = (reservation_id >> 40) as InstId;
                        *self.unacked.entry((src, *req_id)).or_insert(0) += num_blocks;
                    }
                }
                self.collect_outcomes(i);
                self.send(Endpoint::Instance(i), out);
                if let Some(req) = touched {
                    self.progress += 1;
                    if let Some(&idx) = self.index.get(&req) {
                        self.check_accounting(idx)?;
                    }
                }
                self.kick_idle()?;
            }
        }
        Ok(())
    }

    fn on_heartbeat_tick(&mut self) -> Result<()> {
        let chunk = self.cfg.migration.chunk_blocks(self.bs);
        for i in 0..self.insts.len() as InstId {
            let now = self.now;
            let inst = &mut self.insts[i as usize];
            inst.rm.expire(now);
            // Idle instances still make progress on their transfers.
            let out = if inst.busy {
                Vec::new()
            } else {
                inst.rm.pump_transfers(chunk)
            };
            let hb = inst.rm.heartbeat(inst.running.len(), inst.queue.len());
            self.collect_outcomes(i);
            self.send(Endpoint::Instance(i), out);
            self.send(Endpoint::Instance(i), vec![(Endpoint::GManager, hb)]);
        }
        self.kick_idle()?;
        self.schedule(
            self.now + self.cfg.controlplane.heartbeat_period_s,
            Event::HeartbeatTick,
        );
        Ok(())
    }

    fn on_schedule_tick(&mut self) -> Result<()> {
        let gm = self.gm.as_ref().expect("gManager runs under the infinite policy");
        let fresh_after = self.now - self.cfg.controlplane.stale_after_s;
        let (snaps, holdings) = gm.snapshots(fresh_after, self.bs);
        let (sum, n) = self.completed_total_tokens;
        let expected = sum
            .checked_div(n)
            .map_or(self.cfg.sim.expected_request_tokens, |m| m.max(1));
        let ctx = PlanContext {
            model: self.perf.clone(),
            cfg: self.cfg.scheduler.clone(),
            expected_new_request_tokens: expected,
            query_transfer_s: self.cfg.controlplane.link.delay(self.cfg.controlplane.exchange_bytes),
        };
        let plan = plan_round(&snaps, &holdings, &ctx).map_err(|e| self.invariant(e.to_string()))?;
        let out = gm.instructions(&plan.directives());
        self.metrics.moves.planning_rounds += 1;
        self.send(Endpoint::GManager, out);
        self.schedule(
            self.now + self.cfg.scheduler.planning_period_s,
            Event::ScheduleTick,
        );
        Ok(())
    }

    fn record_sample(&mut self) {
        let (t0, _) = self.last_sample;
        let dt = self.now - t0;
        if dt <= 0.0 {
            return;
        }
        let instances: Vec<InstanceSample> = self
            .insts
            .iter_mut()
            .map(|i| {
                let s = InstanceSample {
                    tokens_per_s: i.tokens_since_sample as f64 / dt,
                    mem_util: (i.rm.held_blocks() + i.rm.reserved_blocks()) as f64
                        / i.rm.capacity_blocks as f64,
                    batch: i.running.len(),
                };
                i.tokens_since_sample = 0;
                s
            })
            .collect();
        let cluster = instances.iter().map(|s| s.tokens_per_s).sum();
        self.metrics.samples.push(Sample {
            time: self.now,
            instances,
            cluster_tokens_per_s: cluster,
        });
        self.last_sample = (self.now, self.progress);
    }

    fn finished(&self) -> bool {
        self.pending_arrivals == 0
            && self.reqs.iter().all(|r| {
                matches!(r.state, RequestState::Completed | RequestState::Rejected)
            })
    }

    /// Returns true when the run should stop because nothing can move.
    fn on_sample_tick(&mut self) -> bool {
        let before = self.last_sample.1;
        self.record_sample();
        let idle = self.insts.iter().all(|i| !i.busy) && self.pending_arrivals == 0;
        if idle && self.progress == before {
            self.idle_ticks += 1;
        } else {
            self.idle_ticks = 0;
        }
        if self.idle_ticks >= STALL_TICKS {
            return true;
        }
        self.schedule(self.now + self.cfg.sim.sample_interval_s, Event::SampleTick);
        false
    }

    fn run(mut self) -> Result<SimOutput> {
        let mut end = EndReason::Finished;
        loop {
            if self.finished() {
                break;
            }
            let ev_time = self.events.keys().next().map(|k| f64::from_bits(k.0));
            let net_time = self.net.next_time();
            let t = match (ev_time, net_time) {
                (None, None) => break,
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
            };
            if t > self.cfg.sim.max_sim_time_s {
                end = EndReason::TimeLimit;
                break;
            }
            if net_time.is_some_and(|n| n <= t) {
                self.deliver()?;
            } else {
                let (k, ev) = self.events.pop_first().expect("event due");
                self.now = f64::from_bits(k.0);
                match ev {
                    Event::Arrival(idx) => self.on_arrival(idx)?,
                    Event::StepEnd(i) => self.on_step_end(i)?,
                    Event::HeartbeatTick => self.on_heartbeat_tick()?,
                    Event::ScheduleTick => self.on_schedule_tick()?,
                    Event::SampleTick => {
                        if self.on_sample_tick() {
                            end = EndReason::Stalled;
                            break;
                        }
                    }
                }
            }
            self.check_capacity()?;
        }
        self.record_sample();
        for r in &mut self.reqs {
            if !matches!(r.state, RequestState::Completed | RequestState::Rejected) {
                r.state = RequestState::Stalled;
                if end == EndReason::Finished {
                    end = EndReason::Stalled;
                }
            }
        }
        self.metrics.end_reason = end;
        self.metrics.end_time = self.now;
        self.metrics.requests = self.reqs;
        Ok(SimOutput {
            metrics: self.metrics,
            event_log: self.net.log_lines().to_vec(),
        })
    }
}

/// Runs `trace` to completion on the cluster described by `cfg`.
pub fn run_simulation(cfg: &ClusterConfig, trace: &[TraceRequest], policy: Policy) -> Result<SimOutput> {
    cfg.validate().map_err(|e| SimError::Config(e.to_string()))?;
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let perf = cfg.perf_model().map_err(|e| SimError::Config(e.to_string()))?;
    let n = cfg.instances.count;
    let mut index = BTreeMap::new();
    let mut reqs = Vec::with_capacity(trace.len());
    for (i, t) in trace.iter().enumerate() {
        if index.insert(t.req_id, i).is_some() {
            return Err(SimError::DuplicateRequest(t.req_id));
        }
        reqs.push(SimRequest {
            req_id: t.req_id,
            arrival_time: t.arrival_time_ms / 1e3,
            prompt_tokens: t.prompt_tokens,
            target_output_tokens: t.output_tokens.max(1),
            state: RequestState::Pending,
            generated_tokens: 0,
            home: None,
            admitted_at: None,
            completed_at: None,
            blocks: 0,
            stalled_steps: 0,
            peak_remote_blocks: 0,
            preemptions: 0,
            in_step: false,
            prefilled: false,
        });
    }
    let ids: Vec<InstId> = (0..n).collect();
    let mut net = Network::new(true);
    let gm = if policy == Policy::Infinite {
        let (gm, solicit) = GManager::recover(1, &ids);
        let delay = cfg.controlplane.link.latency_s;
        for (to, msg) in solicit {
            net.send(0.0, Endpoint::GManager, to, msg, delay);
        }
        Some(gm)
    } else {
        None
    };
    let mut sim = Sim {
        cfg,
        policy,
        perf,
        bs: cfg.model.block_size_tokens,
        now: 0.0,
        seq: 0,
        events: BTreeMap::new(),
        net,
        gm,
        insts: ids
            .iter()
            .map(|&i| Instance {
                rm: RManager::new(
                    i,
                    cfg.instances.capacity_blocks,
                    cfg.controlplane.reservation_timeout_s,
                ),
                queue: VecDeque::new(),
                running: Vec::new(),
                busy: false,
                queued_blocks: 0,
                tokens_since_sample: 0,
            })
            .collect(),
        reqs,
        index,
        unacked: BTreeMap::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        query_transfer_s: cfg.controlplane.link.delay(cfg.controlplane.exchange_bytes),
        pending_arrivals: trace.len(),
        progress: 0,
        last_sample: (0.0, 0),
        idle_ticks: 0,
        completed_total_tokens: (0, 0),
        metrics: Metrics {
            policy,
            seed: cfg.seed,
            end_reason: EndReason::Finished,
            end_time: 0.0,
            requests: Vec::new(),
            samples: Vec::new(),
            steps: Vec::new(),
            total_steps: 0,
            preemptions: 0,
            moves: MoveStats::default(),
            spot_checks: 0,
            spot_check_max_err: 0.0,
        },
    };
    // Arrivals in trace order at equal times.
    let mut order: Vec<usize> = (0..sim.reqs.len()).collect();
    order.sort_by(|&a, &b| sim.reqs[a].arrival_time.total_cmp(&sim.reqs[b].arrival_time));
    for idx in order {
        let t = sim.reqs[idx].arrival_time.max(0.0);
        sim.schedule(t, Event::Arrival(idx));
    }
    sim.schedule(cfg.sim.sample_interval_s, Event::SampleTick);
    if policy == Policy::Infinite {
        sim.schedule(cfg.controlplane.heartbeat_period_s, Event::HeartbeatTick);
        sim.schedule(cfg.scheduler.planning_period_s, Event::ScheduleTick);
    }
    sim.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(id: u64, at_ms: f64, prompt: u64, out: u64) -> TraceRequest {
        TraceRequest {
            req_id: id,
            arrival_time_ms: at_ms,
            prompt_tokens: prompt,
            output_tokens: out,
        }
    }

    fn small_cfg() -> ClusterConfig {
        let mut c = ClusterConfig::desk_default();
        c.sim.spot_check_every_steps = 7;
        c
    }

    #[test]
    fn dispatch_picks_most_free_lowest_id() {
        assert_eq!(dispatch_request(&[(0, 10), (1, 50)]), Some(1));
        assert_eq!(dispatch_request(&[(0, 10), (1, 10)]), Some(0));
        assert_eq!(dispatch_request(&[]), None);
    }

    #[test]
    fn extension_cases() {
        assert_eq!(remote_attention_extension(1.0, &[], 0.1), 0.0);
        assert_eq!(remote_attention_extension(1.0, &[0.5], 0.1), 0.0);
        let e = remote_attention_extension(1.0, &[2.0, 0.3], 0.1);
        assert!((e - 1.2).abs() < 1e-15);
    }

    #[test]
    fn single_request_latency_is_sum_of_steps() {
        let mut c = small_cfg();
        c.instances.count = 1;
        for policy in Policy::ALL {
            let out = run_simulation(&c, &[req(1, 0.0, 100, 40)], policy).unwrap();
            let m = &out.metrics;
            assert_eq!(m.count(RequestState::Completed), 1, "{policy}");
            assert_eq!(m.total_steps, 40);
            let sum: f64 = m.steps.iter().map(|s| s.step_latency).sum();
            let lat = m.requests[0].latency().unwrap();
            assert!((lat - sum).abs() <= 1e-12 * sum, "{lat} vs {sum}");
        }
    }

    #[test]
    fn static_rejects_oversized_request_only() {
        let c = small_cfg();
        let cap_tokens = c.instances.capacity_blocks * c.model.block_size_tokens;
        let trace = [
            req(1, 0.0, 200, 20),
            req(2, 1.0, cap_tokens / 2, cap_tokens),
            req(3, 2.0, 300, 30),
        ];
        let m = run_simulation(&c, &trace, Policy::Static).unwrap().metrics;
        assert_eq!(m.count(RequestState::Rejected), 1);
        assert_eq!(m.requests[1].state, RequestState::Rejected);
        assert_eq!(m.count(RequestState::Completed), 2);
    }

    #[test]
    fn strawman_overflows_to_most_free_instance() {
        let mut c = small_cfg();
        c.instances.count = 2;
        c.instances.capacity_blocks = 64;
        // Grows from 60 to 80 blocks.
        let trace = [req(1, 0.0, 60 * 16 - 1, 20 * 16)];
        let m = run_simulation(&c, &trace, Policy::Strawman).unwrap().metrics;
        assert_eq!(m.count(RequestState::Completed), 1);
        assert!(m.moves.overflow_blocks >= 16);
        assert!(m.requests[0].peak_remote_blocks >= 16);
    }

    #[test]
    fn runs_are_deterministic_and_series_sum() {
        let c = small_cfg();
        let trace: Vec<TraceRequest> = (0..40)
            .map(|i| req(i, i as f64 * 3.0, 200 + 97 * (i % 7), 30 + 11 * (i % 5)))
            .collect();
        for policy in Policy::ALL {
            let a = run_simulation(&c, &trace, policy).unwrap();
            let b = run_simulation(&c, &trace, policy).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.metrics.count(RequestState::Completed), 40);
            for s in &a.metrics.samples {
                let sum: f64 = s.instances.iter().map(|i| i.tokens_per_s).sum();
                assert_eq!(sum, s.cluster_tokens_per_s);
            }
        }
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(
            run_simulation(&small_cfg(), &[], Policy::Infinite),
            Err(SimError::EmptyTrace)
        ));
    }

    #[test]
    fn policy_names_round_trip() {
        for p in Policy::ALL {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("vllm".parse::<Policy>().is_err());
    }
}
