//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use distkv_core::attention::verify::{run_verification, VerifyParams};
use distkv_core::attention::{combine_partials, compute_micro_attention, AttentionConfig, AttentionPartial, KvSegment, QueryVector};
use distkv_core::config::ClusterConfig;
use distkv_core::controlplane::fuzz::{run_schedule, FuzzParams};
use distkv_core::controlplane::{parse_log_line, ControlMessage, Endpoint, RManager, RequestPlacementEntry};
use distkv_core::perfmodel::{exact_assignment_count, search_space_direct, search_space_size, InstanceLoad, ModelShape, PerfCurve, PerfModel, Role};
use distkv_core::scheduler::{movable_blocks, pick_longest_request, plan_moves, InstanceSnapshot, PlanContext, RequestSlot, SchedulerConfig};
use distkv_core::sim::{run_simulation, Metrics, Policy, RequestState};
use distkv_core::trace::{generate_trace, length_stats, read_trace, TraceSpec};

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn vec_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if diff == 0.0 {
        0.0
    } else {
        diff / norm.max(f64::MIN_POSITIVE)
    }
}

fn attention_equivalence() -> Outcome {
    let params = VerifyParams {
        trials: 10_000,
        max_seq: 2048,
        max_partitions: 64,
        seed: 1,
        tolerance: 1e-6,
    };
    let start = Instant::now();
    let report = match run_verification(&params) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let took = start.elapsed();
    let layouts_covered = report.per_layout.iter().all(|(_, n)| *n > 0);
    outcome(
        report.passed() && layouts_covered && took < Duration::from_secs(120),
        format!(
            "{} trials, max rel error {:.3e}, {} failures, {:.1} s",
            report.trials,
            report.max_err_vs_reference,
            report.failures,
            took.as_secs_f64()
        ),
    )
}

fn random_partial(rng: &mut ChaCha8Rng, head_dim: usize) -> AttentionPartial {
    let seq = rng.random_range(1..=64);
    let scale = rng.random_range(0.1..4.0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
    let seg = KvSegment::from_flat(head_dim, draw(seq * head_dim), draw(seq * head_dim)).unwrap();
    let q = QueryVector::new(draw(head_dim)).unwrap();
    let cfg = AttentionConfig::new(head_dim, 1, 1).unwrap();
    compute_micro_attention(&q, &seg, &cfg).unwrap()
}

fn partial_rel(a: &AttentionPartial, b: &AttentionPartial) -> f64 {
    rel(a.max_logit(), b.max_logit())
        .max(rel(a.exp_sum(), b.exp_sum()))
        .max(vec_rel(a.weighted_values(), b.weighted_values()))
}

fn reduction_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut comm, mut assoc) = (0.0f64, 0.0f64);
    let mut identity_exact = true;
    for _ in 0..10_000 {
        let d = [8, 32, 64][rng.random_range(0..3)];
        let (a, b, c) = (random_partial(&mut rng, d), random_partial(&mut rng, d), random_partial(&mut rng, d));
        let ab = combine_partials(&a, &b).unwrap();
        comm = comm.max(partial_rel(&ab, &combine_partials(&b, &a).unwrap()));
        let left = combine_partials(&ab, &c).unwrap();
        let right = combine_partials(&a, &combine_partials(&b, &c).unwrap()).unwrap();
        assoc = assoc.max(partial_rel(&left, &right));
        let empty = AttentionPartial::empty(d);
        identity_exact &= combine_partials(&a, &empty).unwrap() == a && combine_partials(&empty, &a).unwrap() == a;
    }
    outcome(
        comm < 1e-10 && assoc < 1e-10 && identity_exact,
        format!("10000 triples, commutativity {comm:.2e}, associativity {assoc:.2e}, identity exact {identity_exact}"),
    )
}

fn constant_payload() -> Outcome {
    let head_dim = 64;
    let cfg = AttentionConfig::new(head_dim, 1, 1).unwrap();
    let q = QueryVector::new((0..head_dim).map(|i| (i as f64 * 0.1).sin()).collect()).unwrap();
    let sizes: Vec<(usize, usize)> = [1usize, 10, 10_000]
        .iter()
        .map(|&n| {
            let flat: Vec<f64> = (0..n * head_dim).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect();
            let seg = KvSegment::from_flat(head_dim, flat.clone(), flat).unwrap();
            let p = compute_micro_attention(&q, &seg, &cfg).unwrap();
            (n, p.encode_payload().len())
        })
        .collect();
    let same = sizes.iter().all(|s| s.1 == sizes[0].1);
    outcome(
        same && sizes[0].1 == (head_dim + 2) * 8,
        format!("payload bytes by seq_p {sizes:?}"),
    )
}

fn plan_context(expected: u64) -> PlanContext {
    PlanContext {
        model: PerfModel::new(
            ModelShape::llama_7b(),
            PerfCurve::saturating(4e13, 8.0, 128).unwrap(),
            PerfCurve::constant(1.5e12).unwrap(),
        )
        .unwrap(),
        cfg: SchedulerConfig {
            batch_threshold: 16,
            mem_util_threshold: 0.8,
            planning_period_s: 1.0,
            retain_local_ratio: 0.5,
        },
        expected_new_request_tokens: expected,
        query_transfer_s: 0.0,
    }
}

fn instance(id: u32, ctx_tokens: &[u64], cap: u64, pending: usize) -> InstanceSnapshot {
    let requests: Vec<RequestSlot> = ctx_tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| RequestSlot {
            request_id: u64::from(id) * 10_000 + i as u64,
            local_blocks: t.div_ceil(16),
            remote_blocks: 0,
            total_ctx_tokens: t,
        })
        .collect();
    let used = requests.iter().map(|r| r.local_blocks).sum();
    InstanceSnapshot {
        instance_id: id,
        batch: requests.len(),
        mem_capacity_blocks: cap.max(used),
        mem_used_blocks: used,
        lent_blocks: 0,
        pending_queue: pending,
        requests,
    }
}

/// Aggregate modeled throughput of the pair after moving `k` blocks,
/// rebuilt from per-request loads.
fn pair_tps(d: &InstanceSnapshot, c: &InstanceSnapshot, k: u64, pc: &PlanContext) -> f64 {
    let r = pick_longest_request(d).unwrap();
    let mut d_ctx: Vec<u64> = d.requests.iter().map(|r| r.total_ctx_tokens).collect();
    let admitted = d.pending_queue.min((k * 16 / pc.expected_new_request_tokens) as usize);
    d_ctx.extend(std::iter::repeat_n(pc.expected_new_request_tokens, admitted));
    let off = (k * 16).min(r.total_ctx_tokens);
    let c_ctx: Vec<u64> = c.requests.iter().map(|r| r.total_ctx_tokens).collect();
    pc.model
        .cluster_tps(&[
            (InstanceLoad::new(d_ctx, off), if off > 0 { Role::Debtor } else { Role::Neutral }),
            (InstanceLoad::new(c_ctx, k * 16), if k > 0 { Role::Creditor } else { Role::Neutral }),
        ])
        .unwrap()
}

fn scheduler_argmax() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut matched, mut nonzero) = (0, 0);
    for _ in 0..100 {
        let pc = plan_context(rng.random_range(128..2048));
        let d_ctx: Vec<u64> = (0..rng.random_range(1..=16)).map(|_| rng.random_range(256..60_000)).collect();
        let d = instance(0, &d_ctx, rng.random_range(1_000..8_000), rng.random_range(0..40));
        let c_batch = rng.random_range(17..64);
        let c_ctx: Vec<u64> = (0..c_batch).map(|_| rng.random_range(64..1_024)).collect();
        let c_used: u64 = c_ctx.iter().map(|t| t.div_ceil(16)).sum();
        let c = instance(1, &c_ctx, (c_used as f64 / rng.random_range(0.05..0.8)) as u64 + 1, 0);
        let chosen: u64 = match plan_moves(&[d.clone(), c.clone()], &pc) {
            Ok(p) => p.moves.iter().map(|m| m.directive.num_blocks).sum(),
            Err(e) => return outcome(false, e.to_string()),
        };
        let limit = movable_blocks(pick_longest_request(&d).unwrap(), 0.5).min(c.free_blocks());
        let mut best = (0, pair_tps(&d, &c, 0, &pc));
        for k in 1..=limit {
            let v = pair_tps(&d, &c, k, &pc);
            if v > best.1 {
                best = (k, v);
            }
        }
        matched += usize::from(chosen == best.0);
        nonzero += usize::from(best.0 > 0);
    }
    let took = start.elapsed();
    outcome(
        matched == 100 && nonzero > 0 && took < Duration::from_secs(30),
        format!("{matched}/100 match the sweep argmax ({nonzero} nonzero), {:.1} s", took.as_secs_f64()),
    )
}

fn monotone_improvement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut ok, mut moves) = (0, 0);
    for _ in 0..100 {
        let pc = plan_context(rng.random_range(128..2048));
        let snaps: Vec<InstanceSnapshot> = (0..rng.random_range(2..=8))
            .map(|i| {
                let n = rng.random_range(0..48);
                let ctx: Vec<u64> = (0..n).map(|_| rng.random_range(64..40_000)).collect();
                instance(i, &ctx, rng.random_range(500..40_000), rng.random_range(0..30))
            })
            .collect();
        let plan = plan_moves(&snaps, &pc).unwrap();
        moves += plan.moves.len();
        ok += usize::from(plan.tps_after >= plan.tps_before && plan.moves.iter().all(|m| m.estimated_gain > 0.0));
    }
    outcome(ok == 100 && moves > 0, format!("{ok}/100 non-decreasing with positive gains, {moves} directives"))
}

/// Placement map rebuilt from the logged heartbeats alone: per instance,
/// the last full heartbeat followed by every later delta.
fn replay_heartbeats(log: &[String], skip_last: bool) -> Vec<RequestPlacementEntry> {
    let mut per_inst: BTreeMap<u32, Vec<(bool, Vec<RequestPlacementEntry>)>> = BTreeMap::new();
    for line in log {
        let (_, _, to, msg) = parse_log_line(line).expect("log line parses");
        if let (Endpoint::GManager, ControlMessage::Heartbeat { inst_id, full, entries, .. }) = (to, msg) {
            per_inst.entry(inst_id).or_default().push((full, entries));
        }
    }
    let mut out = Vec::new();
    for (_, mut hbs) in per_inst {
        if skip_last {
            hbs.pop();
        }
        let Some(start) = hbs.iter().rposition(|(full, _)| *full) else {
            continue;
        };
        let mut state: BTreeMap<u64, RequestPlacementEntry> = BTreeMap::new();
        for (_, entries) in &hbs[start..] {
            for e in entries {
                if e.num_blocks == 0 {
                    state.remove(&e.req_id);
                } else {
                    state.insert(e.req_id, *e);
                }
            }
        }
        out.extend(state.into_values());
    }
    out.sort();
    out
}

fn protocol_safety() -> Outcome {
    let params = FuzzParams {
        seed: 6,
        ..FuzzParams::default()
    };
    let (mut bad, mut cap, mut home, mut failovers, mut instructions) = (0, 0, 0, 0, 0);
    for i in 0..10_000 {
        let o = run_schedule(&params, i);
        cap += o.capacity_violations;
        home += o.home_violations;
        failovers += usize::from(o.failover_at.is_some());
        instructions += o.move_instructions;
        let after_deltas = replay_heartbeats(&o.log, true);
        let after_full = replay_heartbeats(&o.log, false);
        if o.map_after_deltas != after_deltas || o.map_after_full != after_full || after_full != o.truth {
            bad += 1;
        }
    }
    outcome(
        bad == 0 && cap == 0 && home == 0 && failovers == 10_000,
        format!(
            "10000 schedules, {instructions} move instructions, capacity violations {cap}, home violations {home}, map mismatches {bad}"
        ),
    )
}

fn try_move(res: u64, n: u64) -> ControlMessage {
    ControlMessage::TryMoveKvcache {
        reservation_id: res,
        req_id: res,
        num_blocks: n,
        src_inst: 9,
    }
}

fn accepted(rm: &mut RManager, res: u64, n: u64) -> bool {
    let out = rm.handle(0.0, try_move(res, n), 0, 0);
    matches!(out.as_slice(), [(_, ControlMessage::TryMoveResp { accepted: true, .. })])
}

fn fcfs_arbitration() -> Outcome {
    let dst = |used: u64| {
        let mut rm = RManager::new(1, 10 + used, 100.0);
        if used > 0 {
            rm.admit(1_000, used).unwrap();
        }
        rm
    };
    let mut a = dst(0);
    let first = (accepted(&mut a, 1, 6), accepted(&mut a, 2, 5));
    let mut b = dst(0);
    let second = (accepted(&mut b, 1, 6), accepted(&mut b, 2, 4));
    let forced = first == (true, false) && second == (true, true);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1_000 {
        let cap = rng.random_range(1..64u64);
        let used = rng.random_range(0..=cap);
        let mut rm = RManager::new(1, cap, 100.0);
        if used > 0 {
            rm.admit(1_000, used).unwrap();
        }
        let mut free = cap - used;
        for res in 0..rng.random_range(1..12u64) {
            let n = rng.random_range(1..=16);
            let want = n <= free;
            if want {
                free -= n;
            }
            mismatches += usize::from(accepted(&mut rm, res, n) != want);
        }
    }
    outcome(
        forced && mismatches == 0,
        format!("6 then 5 at 10 free {first:?}, 6 then 4 {second:?}, randomized mismatches {mismatches}/1000 schedules"),
    )
}

fn ln_fact(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// Assignments of `y` interchangeable blocks to `n + 1` destinations.
fn count_assignments(y: u64, dests: u64) -> u128 {
    if dests == 1 {
        return 1;
    }
    (0..=y).map(|first| count_assignments(y - first, dests - 1)).sum()
}

fn search_space() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=20u64);
        let ys: Vec<u64> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..=30)).collect();
        let s = search_space_size(n, &ys);
        let total: u64 = ys.iter().sum();
        let ln = total as f64 * ((n + 1) as f64).ln() - ys.iter().map(|&y| ln_fact(y)).sum::<f64>();
        worst = worst.max(rel(s.ln_value.exp(), ln.exp())).max(rel(s.value, ln.exp()));
        if let Some(direct) = search_space_direct(n, &ys) {
            worst = worst.max(rel(direct, ln.exp()));
        }
    }
    let mut pairs = Vec::new();
    let mut exact_ok = true;
    for n in 1..=3u64 {
        let mut stack: Vec<Vec<u64>> = vec![vec![]];
        while let Some(ys) = stack.pop() {
            let sum: u64 = ys.iter().sum();
            if !ys.is_empty() {
                let brute: u128 = ys.iter().map(|&y| count_assignments(y, n + 1)).product();
                exact_ok &= exact_assignment_count(n, &ys) == Some(brute);
                pairs.push((n, ys.clone(), search_space_size(n, &ys).value, brute));
            }
            for y in 1..=6 - sum {
                let mut next = ys.clone();
                next.push(y);
                stack.push(next);
            }
        }
    }
    pairs.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let differ = pairs.iter().filter(|p| (p.2 - p.3 as f64).abs() > 1e-9 * p.3 as f64).count();
    let example = pairs
        .iter()
        .find(|p| p.0 == 1 && p.1 == [2])
        .map(|p| format!("N=1 Y=[2] formula {} exact {}", p.2.round(), p.3))
        .unwrap_or_default();
    println!("    search space formula vs exact (N, Y, formula, exact):");
    for (n, ys, f, e) in &pairs {
        println!("      {n} {ys:?} {f:.4} {e}");
    }
    outcome(
        worst < 1e-9 && exact_ok && !pairs.is_empty(),
        format!(
            "50 random cases, worst rel {worst:.2e}; {} exact cases, {differ} differ from the formula, {example}",
            pairs.len()
        ),
    )
}

fn trace_moments() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for index in [0usize, 2, 3, 8] {
        let spec = TraceSpec::reference(index, 20_000, 10.0, 90 + index as u64).unwrap();
        let reqs = generate_trace(&spec).unwrap();
        let (mean, sd) = length_stats(&reqs);
        let (em, es) = (rel(mean, spec.target_mean), rel(sd, spec.target_sd));
        pass &= reqs.len() == 20_000 && (mean - spec.target_mean).abs() <= 0.10 * spec.target_mean;
        pass &= (sd - spec.target_sd).abs() <= 0.15 * spec.target_sd;
        details.push(format!("spec {index}: mean {mean:.0} ({:.1}%) sd {sd:.0} ({:.1}%)", em * 100.0, es * 100.0));
    }
    outcome(pass, details.join(", "))
}

fn scenario_metrics(policy: Policy) -> Metrics {
    let cfg = ClusterConfig::load(&configs().join("desk.toml")).unwrap();
    let trace = read_trace(&configs().join("four_instance.trace")).unwrap();
    run_simulation(&cfg, &trace, policy).unwrap().metrics
}

fn four_instance_scenario() -> Outcome {
    let start = Instant::now();
    let inf = scenario_metrics(Policy::Infinite);
    let straw = scenario_metrics(Policy::Strawman);
    let stat = scenario_metrics(Policy::Static);
    let took = start.elapsed();
    let all_done = [&inf, &straw, &stat]
        .iter()
        .all(|m| m.count(RequestState::Completed) == m.requests.len());
    let (rs, rt) = (inf.throughput() / straw.throughput(), inf.throughput() / stat.throughput());
    outcome(
        all_done && rs >= 1.2 && rt >= 1.2 && took < Duration::from_secs(300),
        format!(
            "throughput infinite {:.1}, strawman {:.1}, static {:.1} tokens/s; infinite/strawman {rs:.3}, infinite/static {rt:.3}; {:.1} s",
            inf.throughput(),
            straw.throughput(),
            stat.throughput(),
            took.as_secs_f64()
        ),
    )
}

fn migration_overlap() -> Outcome {
    let trace = read_trace(&configs().join("four_instance.trace")).unwrap();
    let run = |chunk: u64| {
        let mut cfg = ClusterConfig::desk_default();
        cfg.migration.chunk_tokens = chunk;
        run_simulation(&cfg, &trace, Policy::Infinite).unwrap().metrics
    };
    let at_cap = run(16);
    let moving = at_cap.steps.iter().filter(|s| s.moved_tokens > 0).count();
    let equal = at_cap.steps.iter().all(|s| s.step_latency == s.compute_latency);
    let double = run(32);
    let full: Vec<f64> = double
        .steps
        .iter()
        .filter(|s| s.moved_tokens == 32)
        .map(|s| s.step_latency / s.compute_latency)
        .collect();
    let worst = full.iter().map(|r| (r - 1.086).abs()).fold(0.0, f64::max);
    let idle_equal = double
        .steps
        .iter()
        .filter(|s| s.moved_tokens <= 16)
        .all(|s| s.step_latency == s.compute_latency);
    outcome(
        moving > 0 && equal && !full.is_empty() && worst < 1e-9 && idle_equal,
        format!(
            "at cap: {moving} migrating steps, all equal to baseline {equal}; at 2x cap: {} steps inflated by {:.4}",
            full.len(),
            full.first().map_or(0.0, |r| r - 1.0)
        ),
    )
}

fn run_cli(out: &Path, log: &Path) -> bool {
    let c = configs();
    Command::new(env!("CARGO_BIN_EXE_distkv"))
        .args(["run", "--policy", "infinite", "--seed", "11", "--config"])
        .arg(c.join("desk.toml"))
        .arg(c.join("four_instance.trace"))
        .arg("--out")
        .arg(out)
        .arg("--event-log")
        .arg(log)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    if !(run_cli(&a, &dir.path().join("a.log")) && run_cli(&b, &dir.path().join("b.log"))) {
        return outcome(false, "run failed");
    }
    let mut files = vec![];
    for name in ["summary.txt", "timeseries.tsv", "requests.tsv", "steps.tsv"] {
        files.push((a.join(name), b.join(name)));
    }
    files.push((dir.path().join("a.log"), dir.path().join("b.log")));
    let mut bytes = 0;
    let mut same = true;
    for (x, y) in &files {
        let (x, y) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        same &= x == y;
        bytes += x.len();
    }
    outcome(same, format!("{} files, {bytes} bytes, identical {same}", files.len()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("attention equivalence", attention_equivalence),
        ("reduction algebra", reduction_algebra),
        ("constant payload", constant_payload),
        ("scheduler argmax optimality", scheduler_argmax),
        ("monotone improvement", monotone_improvement),
        ("protocol safety", protocol_safety),
        ("FCFS arbitration", fcfs_arbitration),
        ("search-space formula", search_space),
        ("trace moments", trace_moments),
        ("four-instance scenario", four_instance_scenario),
        ("migration overlap", migration_overlap),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        failed += usize::from(!o.pass);
        println!("[{}] {:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
