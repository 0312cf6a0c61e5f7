//! Randomized protocol schedules.
//!
//! A schedule drives a handful of rManagers and one gManager through random
//! admissions, growth, completions, heartbeats, overlapping move
//! instructions, reservation expiry and one gManager failover, delivering
//! messages with random delays. Invariants are checked after every event.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ControlMessage, Endpoint, GManager, InstId, Network, RManager, ReqId, RequestPlacementEntry,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzParams {
    pub seed: u64,
    pub max_instances: u32,
    pub capacity_blocks: u64,
    pub actions: usize,
    pub max_delay: f64,
    pub reservation_timeout: f64,
}

impl Default for FuzzParams {
    fn default() -> Self {
        Self {
            seed: 0,
            max_instances: 5,
            capacity_blocks: 16,
            actions: 120,
            max_delay: 3.0,
            reservation_timeout: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FuzzOutcome {
    pub delivered: usize,
    pub move_instructions: usize,
    pub accepted_reservations: usize,
    pub rejected_reservations: usize,
    /// Events after which some instance had used + reserved > capacity.
    pub capacity_violations: usize,
    /// Events after which a live request lacked exactly one home.
    pub home_violations: usize,
    pub failover_at: Option<usize>,
    /// Map after quiescence and a delta heartbeat round.
    pub map_after_deltas: Vec<RequestPlacementEntry>,
    /// Map after a further full heartbeat round.
    pub map_after_full: Vec<RequestPlacementEntry>,
    /// Union of the instances' own entries at the end.
    pub truth: Vec<RequestPlacementEntry>,
    pub log: Vec<String>,
}

struct World {
    now: f64,
    rms: BTreeMap<InstId, RManager>,
    gm: GManager,
    net: Network,
    live: BTreeMap<ReqId, InstId>,
    out: FuzzOutcome,
}

impl World {
    fn send_all(&mut self, from: Endpoint, msgs: super::Outbox, rng: &mut ChaCha8Rng, max_delay: f64) {
        for (to, msg) in msgs {
            if let ControlMessage::TryMoveResp { accepted, .. } = msg {
                if accepted {
                    self.out.accepted_reservations += 1;
                } else {
                    self.out.rejected_reservations += 1;
                }
            }
            let delay = rng.random_range(0.0..=max_delay);
            self.net.send(self.now, from, to, msg, delay);
        }
    }

    fn deliver_one(&mut self, rng: &mut ChaCha8Rng, max_delay: f64) -> bool {
        let Some(m) = self.net.pop() else {
            return false;
        };
        self.now = self.now.max(m.time);
        self.out.delivered += 1;
        match m.to {
            Endpoint::GManager => {
                let out = self.gm.handle(self.now, &m.msg);
                self.send_all(Endpoint::GManager, out, rng, max_delay);
            }
            Endpoint::Instance(i) => {
                let r = self.rms.get_mut(&i).expect("known instance");
                let out = r.handle(self.now, m.msg, 0, 0);
                self.send_all(Endpoint::Instance(i), out, rng, max_delay);
            }
        }
        true
    }

    fn check(&mut self) {
        if self
            .rms
            .values()
            .any(|r| r.held_blocks() + r.reserved_blocks() > r.capacity_blocks)
        {
            self.out.capacity_violations += 1;
        }
        for req in self.live.keys() {
            let homes = self
                .rms
                .values()
                .filter(|r| r.holding(*req).is_some_and(|h| h.local))
                .count();
            if homes != 1 {
                self.out.home_violations += 1;
                break;
            }
        }
    }

    fn heartbeat(&mut self, inst: InstId, rng: &mut ChaCha8Rng, max_delay: f64) {
        let hb = self.rms.get_mut(&inst).unwrap().heartbeat(0, 0);
        self.send_all(Endpoint::Instance(inst), vec![(Endpoint::GManager, hb)], rng, max_delay);
    }

    fn drain(&mut self, rng: &mut ChaCha8Rng, max_delay: f64) {
        loop {
            while self.deliver_one(rng, max_delay) {
                self.check();
            }
            let ids: Vec<InstId> = self.rms.keys().copied().collect();
            let mut sent = false;
            for i in ids {
                let out = self.rms.get_mut(&i).unwrap().pump_transfers(u64::MAX);
                sent |= !out.is_empty();
                self.send_all(Endpoint::Instance(i), out, rng, max_delay);
            }
            if !sent && self.net.is_empty() {
                break;
            }
        }
    }
}

/// Runs schedule number `index` of the family seeded by `params.seed`.
pub fn run_schedule(params: &FuzzParams, index: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index);
    let n = rng.random_range(2..=params.max_instances.max(2));
    let ids: Vec<InstId> = (0..n).collect();
    let (gm, solicit) = GManager::recover(1, &ids);
    let mut w = World {
        now: 0.0,
        rms: ids
            .iter()
            .map(|&i| (i, RManager::new(i, params.capacity_blocks, params.reservation_timeout)))
            .collect(),
        gm,
        net: Network::new(true),
        live: BTreeMap::new(),
        out: FuzzOutcome::default(),
    };
    let d = params.max_delay;
    w.send_all(Endpoint::GManager, solicit, &mut rng, d);
    let failover = rng.random_range(params.actions / 4..params.actions.max(2) * 3 / 4);
    let mut next_req: ReqId = 1;

    for step in 0..params.actions {
        w.now += rng.random_range(0.0..1.0);
        if step == failover {
            let (gm, solicit) = GManager::recover(w.gm.epoch + 1, &ids);
            w.gm = gm;
            w.out.failover_at = Some(step);
            w.send_all(Endpoint::GManager, solicit, &mut rng, d);
        }
        match rng.random_range(0..10) {
            0 => {
                let inst = ids[rng.random_range(0..ids.len())];
                let blocks = rng.random_range(1..=6);
                if w.rms.get_mut(&inst).unwrap().admit(next_req, blocks).is_ok() {
                    w.live.insert(next_req, inst);
                }
                next_req += 1;
            }
            1 => {
                if let Some((&req, _)) = w.live.iter().nth(rng.random_range(0..w.live.len().max(1))) {
                    let holders: Vec<InstId> = w
                        .rms
                        .values()
                        .filter(|r| r.holding(req).is_some())
                        .map(|r| r.inst_id)
                        .collect();
                    if !holders.is_empty() {
                        let inst = holders[rng.random_range(0..holders.len())];
                        let _ = w.rms.get_mut(&inst).unwrap().add_blocks(req, rng.random_range(1..=3));
                    }
                }
            }
            2 => {
                if let Some((&req, _)) = w.live.iter().nth(rng.random_range(0..w.live.len().max(1))) {
                    for r in w.rms.values_mut() {
                        r.release(req);
                    }
                    w.live.remove(&req);
                }
            }
            3 => {
                let inst = ids[rng.random_range(0..ids.len())];
                w.heartbeat(inst, &mut rng, d);
            }
            4 | 5 => {
                // Instructions from the gManager, possibly several aimed at
                // one destination at once.
                let dst = ids[rng.random_range(0..ids.len())];
                for _ in 0..rng.random_range(1..=3) {
                    let Some((&req, _)) = w.live.iter().nth(rng.random_range(0..w.live.len().max(1))) else {
                        break;
                    };
                    let holders: Vec<InstId> = w
                        .rms
                        .values()
                        .filter(|r| r.holding(req).is_some())
                        .map(|r| r.inst_id)
                        .collect();
                    let src = holders[rng.random_range(0..holders.len())];
                    let msg = ControlMessage::MoveKvcache {
                        epoch: w.gm.epoch,
                        req_id: req,
                        num_blocks: rng.random_range(1..=5),
                        dst_inst: dst,
                    };
                    w.out.move_instructions += 1;
                    w.send_all(Endpoint::GManager, vec![(Endpoint::Instance(src), msg)], &mut rng, d);
                }
            }
            6 => {
                let inst = ids[rng.random_range(0..ids.len())];
                let cap = rng.random_range(1..=3);
                let out = w.rms.get_mut(&inst).unwrap().pump_transfers(cap);
                w.send_all(Endpoint::Instance(inst), out, &mut rng, d);
            }
            7 => {
                let now = w.now;
                for r in w.rms.values_mut() {
                    r.expire(now);
                }
            }
            _ => {
                for _ in 0..rng.random_range(1..=4) {
                    if !w.deliver_one(&mut rng, d) {
                        break;
                    }
                    w.check();
                }
            }
        }
        w.check();
    }

    // Quiescence: finish transfers, let unused reservations lapse, then one
    // delta round and one full round.
    w.drain(&mut rng, d);
    w.now += params.reservation_timeout + 1.0;
    let now = w.now;
    for r in w.rms.values_mut() {
        r.expire(now);
    }
    for &i in &ids {
        w.heartbeat(i, &mut rng, d);
    }
    w.drain(&mut rng, d);
    w.out.map_after_deltas = w.gm.map().sorted_entries();
    for &i in &ids {
        let out = w.rms.get_mut(&i).unwrap().handle(
            w.now,
            ControlMessage::Solicit { epoch: w.gm.epoch },
            0,
            0,
        );
        w.send_all(Endpoint::Instance(i), out, &mut rng, d);
    }
    w.drain(&mut rng, d);
    w.out.map_after_full = w.gm.map().sorted_entries();
    let mut truth: Vec<RequestPlacementEntry> = w.rms.values().flat_map(|r| r.entries()).collect();
    truth.sort();
    w.out.truth = truth;
    w.out.log = w.net.log_lines().to_vec();
    w.out
}
