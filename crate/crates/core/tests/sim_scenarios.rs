use distkv_core::config::ClusterConfig;
use distkv_core::controlplane::{ControlMessage, Endpoint, RManager};
use distkv_core::sim::scenario::{four_instance_config, four_instance_trace, FourInstanceParams};
use distkv_core::sim::{
    dispatch_request, remote_attention_extension, run_simulation, Metrics, Policy, RequestState,
};
use distkv_core::trace::TraceRequest;

fn run(cfg: &ClusterConfig, trace: &[TraceRequest], policy: Policy) -> Metrics {
    run_simulation(cfg, trace, policy).unwrap().metrics
}

#[test]
fn four_instance_ordering() {
    let cfg = four_instance_config();
    let trace = four_instance_trace(&FourInstanceParams::default());
    let inf = run(&cfg, &trace, Policy::Infinite);
    let straw = run(&cfg, &trace, Policy::Strawman);
    let stat = run(&cfg, &trace, Policy::Static);
    for m in [&inf, &straw, &stat] {
        assert_eq!(m.count(RequestState::Completed), trace.len(), "{}", m.policy);
        assert!(m.spot_checks > 0);
    }
    assert!(inf.moves.blocks_moved > 0);
    assert!(inf.throughput() >= straw.throughput());
    assert!(straw.throughput() >= stat.throughput());
    println!(
        "infinite/strawman {:.3} infinite/static {:.3}",
        inf.throughput() / straw.throughput(),
        inf.throughput() / stat.throughput()
    );
}

#[test]
fn over_capacity_request_orders_policies() {
    let cfg = four_instance_config();
    let p = FourInstanceParams {
        saturating_prompt: 30_000,
        saturating_output: 4_000,
        ..FourInstanceParams::default()
    };
    let trace = four_instance_trace(&p);
    let inf = run(&cfg, &trace, Policy::Infinite);
    let straw = run(&cfg, &trace, Policy::Strawman);
    let stat = run(&cfg, &trace, Policy::Static);
    assert_eq!(stat.count(RequestState::Rejected), 1);
    assert_eq!(stat.requests[0].state, RequestState::Rejected);
    assert_eq!(inf.count(RequestState::Completed), trace.len());
    assert_eq!(straw.count(RequestState::Completed), trace.len());
    assert!(straw.moves.overflow_blocks > 0);
    assert!(inf.throughput() >= straw.throughput());
}

fn migration_run(chunk_tokens: u64) -> Metrics {
    let mut cfg = four_instance_config();
    cfg.migration.chunk_tokens = chunk_tokens;
    run(&cfg, &four_instance_trace(&FourInstanceParams::default()), Policy::Infinite)
}

#[test]
fn migration_at_cap_is_free_and_above_cap_is_penalized() {
    let at_cap = migration_run(16);
    let moving: Vec<_> = at_cap.steps.iter().filter(|s| s.moved_tokens > 0).collect();
    assert!(!moving.is_empty());
    assert!(moving.iter().all(|s| s.moved_tokens <= 16));
    assert!(at_cap.steps.iter().all(|s| s.step_latency == s.compute_latency));

    let double = migration_run(32);
    let penalty = four_instance_config().migration.overflow_penalty_per_token;
    let mut full = 0;
    for s in &double.steps {
        let want = 1.0 + penalty * s.moved_tokens.saturating_sub(16) as f64;
        assert!((s.step_latency / s.compute_latency - want).abs() < 1e-12);
        if s.moved_tokens == 32 {
            full += 1;
            assert!((s.step_latency / s.compute_latency - 1.086).abs() < 1e-12);
        }
    }
    assert!(full > 0);
}

#[test]
fn sixty_four_token_move_takes_four_steps() {
    let cfg = ClusterConfig::desk_default();
    let chunk = cfg.migration.chunk_blocks(cfg.model.block_size_tokens);
    let mut src = RManager::new(0, 100, 10.0);
    let mut dst = RManager::new(1, 100, 10.0);
    src.admit(5, 20).unwrap();
    let try_move = src.handle(
        0.0,
        ControlMessage::MoveKvcache {
            epoch: 0,
            req_id: 5,
            num_blocks: 64 / cfg.model.block_size_tokens,
            dst_inst: 1,
        },
        1,
        0,
    );
    let resp = dst.handle(0.0, try_move[0].1.clone(), 0, 0);
    src.handle(0.0, resp[0].1.clone(), 1, 0);
    let mut steps = 0;
    while dst.holding(5).is_none_or(|h| h.blocks < 4) {
        let out = src.pump_transfers(chunk);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, Endpoint::Instance(1));
        for ack in dst.handle(0.0, out[0].1.clone(), 0, 0) {
            src.handle(0.0, ack.1, 1, 0);
        }
        steps += 1;
    }
    assert_eq!(steps, 4);
    assert_eq!(src.holding(5).unwrap().blocks, 16);
}

#[test]
fn dispatch_matches_replay_oracle() {
    let mut cfg = ClusterConfig::desk_default();
    cfg.instances.count = 4;
    cfg.instances.capacity_blocks = 4096;
    let bs = cfg.model.block_size_tokens;
    // Simultaneous arrivals: each instance admits its first request and
    // queues the rest, so memory only changes through dispatch.
    let trace: Vec<TraceRequest> = (0..100)
        .map(|i| TraceRequest {
            req_id: i,
            arrival_time_ms: 0.0,
            prompt_tokens: 17 + (i * 7919) % 1500,
            output_tokens: 5,
        })
        .collect();
    let m = run(&cfg, &trace, Policy::Strawman);
    let mut free = [cfg.instances.capacity_blocks as i64; 4];
    let mut seen = [false; 4];
    for (t, r) in trace.iter().zip(&m.requests) {
        let mut best = 0;
        for i in 1..4 {
            if free[i] > free[best] {
                best = i;
            }
        }
        assert_eq!(r.home, Some(best as u32), "request {}", t.req_id);
        free[best] -= if seen[best] {
            t.prompt_tokens.div_ceil(bs) as i64
        } else {
            (t.prompt_tokens + 1).div_ceil(bs) as i64
        };
        seen[best] = true;
    }
    assert_eq!(dispatch_request(&[(0, 10), (1, 50)]), Some(1));
    assert_eq!(dispatch_request(&[(0, 10), (1, 10)]), Some(0));
}

#[test]
fn single_request_closed_form() {
    let mut cfg = ClusterConfig::desk_default();
    cfg.instances.count = 1;
    let trace = [TraceRequest {
        req_id: 9,
        arrival_time_ms: 250.0,
        prompt_tokens: 1000,
        output_tokens: 64,
    }];
    let m = run(&cfg, &trace, Policy::Infinite);
    let perf = cfg.perf_model().unwrap();
    let n = f64::from(cfg.model.n_layers);
    let mut want = 1000.0 * cfg.sim.prefill_time_per_token_s;
    for g in 0..64u64 {
        let ctx = 1000 + g;
        want += n * (perf.gemm_time(1) + perf.attention_time(ctx, ctx));
    }
    let got = m.requests[0].latency().unwrap();
    assert_eq!(m.total_steps, 64);
    assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
}

#[test]
fn remote_share_below_half_is_covered_with_default_curves() {
    let cfg = ClusterConfig::desk_default();
    let perf = cfg.perf_model().unwrap();
    let q = cfg.controlplane.link.delay(cfg.controlplane.exchange_bytes);
    assert_eq!(remote_attention_extension(1.0, &[], q), 0.0);
    for ctx in [10_000u64, 100_000] {
        for pct in [10u64, 25, 40] {
            let remote = ctx * pct / 100;
            let local = perf.attention_time(ctx - remote, ctx);
            let r = perf.attention_time(remote, ctx);
            assert_eq!(remote_attention_extension(local, &[r], q), 0.0, "{ctx} {pct}");
        }
    }
    // A short context leaves too little local work to hide the exchange.
    let local = perf.attention_time(2_400, 4_000);
    let r = perf.attention_time(1_600, 4_000);
    assert!(remote_attention_extension(local, &[r], q) > 0.0);
    // Remote work forced to twice the local work.
    let local = perf.attention_time(5_000, 10_000);
    let slow = cfg.curves.attention.scaled(0.5).unwrap();
    let r = 5_000.0 * cfg.model.attn_work_per_ctx_token / slow.eval(10_000.0);
    let ext = remote_attention_extension(local, &[r], q);
    assert_eq!(ext, r + 2.0 * q - local);
    assert!((r / local - 2.0).abs() < 1e-12);
}
