//! gManager / rManager coordination.
//!
//! Each rManager owns the block holdings of one instance and reports them to
//! the gManager in heartbeats: only changed entries normally, everything
//! after it observes a new gManager epoch. The gManager keeps the cluster
//! placement map, plans, and sends `move_kvcache` instructions. A mover asks
//! the destination to reserve space (`try_move_kvcache`); the destination
//! decides first-come-first-serve on its own state, so a stale map can never
//! overcommit it. Accepted moves stream block data in chunks.
//!
//! All state machines are plain values driven by messages; [`Network`]
//! delivers messages in per-channel FIFO order and can log them.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheduler::{InstanceSnapshot, MoveDirective, RemoteHolding, RequestSlot};

pub type ReqId = u64;
pub type InstId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("instance {inst}: not enough free blocks ({free} free, {needed} needed)")]
    NoSpace { inst: InstId, free: u64, needed: u64 },
    #[error("instance {inst} holds no blocks of request {req}")]
    UnknownRequest { inst: InstId, req: ReqId },
    #[error("request {req} already admitted on instance {inst}")]
    AlreadyAdmitted { inst: InstId, req: ReqId },
    #[error("heartbeat from instance {inst} rejected: {reason}")]
    MalformedHeartbeat { inst: InstId, reason: String },
}

/// One row of the placement map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestPlacementEntry {
    pub req_id: ReqId,
    pub inst_id: InstId,
    pub num_blocks: u64,
    /// Marks the request's home (debtor) instance.
    pub local: bool,
}

/// Instance-level aggregates carried with every heartbeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstanceStatus {
    /// Blocks held plus blocks reserved for incoming transfers.
    pub used_blocks: u64,
    pub capacity_blocks: u64,
    pub batch: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlMessage {
    Heartbeat {
        inst_id: InstId,
        epoch: u64,
        full: bool,
        entries: Vec<RequestPlacementEntry>,
        status: InstanceStatus,
    },
    /// gManager to the source instance.
    MoveKvcache {
        epoch: u64,
        req_id: ReqId,
        num_blocks: u64,
        dst_inst: InstId,
    },
    /// Source to destination: reserve space.
    TryMoveKvcache {
        reservation_id: u64,
        req_id: ReqId,
        num_blocks: u64,
        src_inst: InstId,
    },
    TryMoveResp {
        reservation_id: u64,
        req_id: ReqId,
        accepted: bool,
    },
    DataTransfer {
        reservation_id: u64,
        req_id: ReqId,
        num_blocks: u64,
        last: bool,
    },
    /// Destination to source: a chunk was stored.
    TransferAck {
        reservation_id: u64,
        req_id: ReqId,
        num_blocks: u64,
    },
    /// Destination to source: a chunk arrived for an unknown reservation.
    TransferAbort {
        reservation_id: u64,
        req_id: ReqId,
        num_blocks: u64,
    },
    /// gManager asks for a full heartbeat.
    Solicit { epoch: u64 },
}

impl ControlMessage {
    /// Bytes on the wire; data transfers are dominated by block payload.
    pub fn wire_bytes(&self, block_bytes: u64) -> u64 {
        match self {
            ControlMessage::Heartbeat { entries, .. } => 64 + 24 * entries.len() as u64,
            ControlMessage::DataTransfer { num_blocks, .. } => 64 + num_blocks * block_bytes,
            _ => 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    GManager,
    Instance(InstId),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::GManager => write!(f, "g"),
            Endpoint::Instance(i) => write!(f, "r{i}"),
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "g" {
            return Ok(Endpoint::GManager);
        }
        s.strip_prefix('r')
            .and_then(|n| n.parse().ok())
            .map(Endpoint::Instance)
            .ok_or_else(|| format!("bad endpoint {s:?}"))
    }
}

pub type Outbox = Vec<(Endpoint, ControlMessage)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoveOutcome {
    Completed,
    /// The source could not perform the move at all.
    Rejected,
    /// The destination declined the reservation.
    Deferred,
    /// The reservation vanished while data was in flight.
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub req_id: ReqId,
    pub dst_inst: InstId,
    pub num_blocks: u64,
    pub outcome: MoveOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Holding {
    pub blocks: u64,
    pub local: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Reservation {
    src: InstId,
    req_id: ReqId,
    remaining: u64,
    expiry: f64,
    started: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutState {
    AwaitingResp,
    Transferring,
}

#[derive(Debug, Clone, PartialEq)]
struct Outgoing {
    req_id: ReqId,
    dst: InstId,
    total: u64,
    remaining: u64,
    state: OutState,
}

/// Chunks sent but not yet acknowledged; they still occupy source memory.
#[derive(Debug, Clone, Copy, PartialEq)]
struct InTransit {
    req_id: ReqId,
    local: bool,
    blocks: u64,
}

/// Per-instance manager.
#[derive(Debug, Clone, PartialEq)]
pub struct RManager {
    pub inst_id: InstId,
    pub capacity_blocks: u64,
    /// How long an untouched reservation is kept.
    pub reservation_timeout: f64,
    holdings: BTreeMap<ReqId, Holding>,
    last_sent: BTreeMap<ReqId, Holding>,
    epoch: u64,
    need_full: bool,
    reservations: BTreeMap<u64, Reservation>,
    outgoing: BTreeMap<u64, Outgoing>,
    in_transit: BTreeMap<u64, InTransit>,
    next_reservation: u64,
    outcomes: Vec<MoveRecord>,
}

impl RManager {
    pub fn new(inst_id: InstId, capacity_blocks: u64, reservation_timeout: f64) -> Self {
        Self {
            inst_id,
            capacity_blocks,
            reservation_timeout,
            holdings: BTreeMap::new(),
            last_sent: BTreeMap::new(),
            epoch: 0,
            need_full: true,
            reservations: BTreeMap::new(),
            outgoing: BTreeMap::new(),
            in_transit: BTreeMap::new(),
            next_reservation: 0,
            outcomes: Vec::new(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Blocks stored here, including sent but unacknowledged chunks.
    pub fn held_blocks(&self) -> u64 {
        self.holdings.values().map(|h| h.blocks).sum::<u64>()
            + self.in_transit.values().map(|t| t.blocks).sum::<u64>()
    }

    pub fn reserved_blocks(&self) -> u64 {
        self.reservations.values().map(|r| r.remaining).sum()
    }

    pub fn free_blocks(&self) -> u64 {
        self.capacity_blocks
            .saturating_sub(self.held_blocks() + self.reserved_blocks())
    }

    pub fn holding(&self, req: ReqId) -> Option<Holding> {
        self.holdings.get(&req).copied()
    }

    pub fn holdings(&self) -> impl Iterator<Item = (ReqId, Holding)> + '_ {
        self.holdings.iter().map(|(r, h)| (*r, *h))
    }

    /// Blocks hosted on behalf of requests homed elsewhere.
    pub fn hosted_blocks(&self) -> u64 {
        self.holdings.values().filter(|h| !h.local).map(|h| h.blocks).sum()
    }

    /// Current holdings with unacknowledged chunks still counted here.
    fn reported(&self) -> BTreeMap<ReqId, Holding> {
        let mut m = self.holdings.clone();
        for t in self.in_transit.values() {
            m.entry(t.req_id)
                .or_insert(Holding {
                    blocks: 0,
                    local: t.local,
                })
                .blocks += t.blocks;
        }
        m.retain(|_, h| h.blocks > 0);
        m
    }

    /// Blocks per request stored here, including unacknowledged chunks.
    pub fn stored(&self) -> BTreeMap<ReqId, Holding> {
        self.reported()
    }

    /// Blocks of `req` stored here, including unacknowledged chunks.
    pub fn stored_blocks(&self, req: ReqId) -> u64 {
        self.holdings.get(&req).map_or(0, |h| h.blocks)
            + self
                .in_transit
                .values()
                .filter(|t| t.req_id == req)
                .map(|t| t.blocks)
                .sum::<u64>()
    }

    /// Placement entries describing this instance's current truth.
    pub fn entries(&self) -> Vec<RequestPlacementEntry> {
        self.reported()
            .iter()
            .map(|(&req_id, h)| RequestPlacementEntry {
                req_id,
                inst_id: self.inst_id,
                num_blocks: h.blocks,
                local: h.local,
            })
            .collect()
    }

    pub fn outcomes(&self) -> &[MoveRecord] {
        &self.outcomes
    }

    pub fn take_outcomes(&mut self) -> Vec<MoveRecord> {
        std::mem::take(&mut self.outcomes)
    }

    pub fn has_active_transfers(&self) -> bool {
        !self.outgoing.is_empty() || !self.reservations.is_empty() || !self.in_transit.is_empty()
    }

    /// Blocks of `req` currently committed to outgoing moves.
    pub fn outgoing_blocks(&self, req: ReqId) -> u64 {
        self.outgoing
            .values()
            .filter(|o| o.req_id == req)
            .map(|o| o.remaining)
            .sum()
    }

    fn ensure_space(&self, n: u64) -> Result<(), ControlError> {
        let free = self.free_blocks();
        if n > free {
            return Err(ControlError::NoSpace {
                inst: self.inst_id,
                free,
                needed: n,
            });
        }
        Ok(())
    }

    /// Registers a new request homed here with its initial blocks.
    pub fn admit(&mut self, req: ReqId, blocks: u64) -> Result<(), ControlError> {
        if self.holdings.contains_key(&req) {
            return Err(ControlError::AlreadyAdmitted {
                inst: self.inst_id,
                req,
            });
        }
        self.ensure_space(blocks)?;
        self.holdings.insert(req, Holding { blocks, local: true });
        Ok(())
    }

    /// Adds `n` blocks of `req` here, creating a hosted entry if needed.
    pub fn add_blocks(&mut self, req: ReqId, n: u64) -> Result<(), ControlError> {
        self.ensure_space(n)?;
        self.holdings
            .entry(req)
            .or_insert(Holding {
                blocks: 0,
                local: false,
            })
            .blocks += n;
        Ok(())
    }

    /// Drops every trace of `req`; returns the blocks freed.
    pub fn release(&mut self, req: ReqId) -> u64 {
        self.outgoing.retain(|_, o| o.req_id != req);
        let transit: u64 = self
            .in_transit
            .values()
            .filter(|t| t.req_id == req)
            .map(|t| t.blocks)
            .sum();
        self.in_transit.retain(|_, t| t.req_id != req);
        self.reservations.retain(|_, r| r.req_id != req);
        transit + self.holdings.remove(&req).map_or(0, |h| h.blocks)
    }

    /// Drops reservations whose transfer never started.
    pub fn expire(&mut self, now: f64) {
        self.reservations
            .retain(|_, r| r.started || r.expiry > now);
    }

    /// Builds the next heartbeat and records it as sent.
    pub fn heartbeat(&mut self, batch: usize, pending: usize) -> ControlMessage {
        let full = self.need_full;
        let now = self.reported();
        let entries = if full {
            self.entries()
        } else {
            let mut changed = Vec::new();
            for (&req_id, h) in &now {
                if self.last_sent.get(&req_id) != Some(h) {
                    changed.push(RequestPlacementEntry {
                        req_id,
                        inst_id: self.inst_id,
                        num_blocks: h.blocks,
                        local: h.local,
                    });
                }
            }
            for (&req_id, h) in &self.last_sent {
                if !now.contains_key(&req_id) {
                    changed.push(RequestPlacementEntry {
                        req_id,
                        inst_id: self.inst_id,
                        num_blocks: 0,
                        local: h.local,
                    });
                }
            }
            changed.sort();
            changed
        };
        self.last_sent = now;
        self.need_full = false;
        ControlMessage::Heartbeat {
            inst_id: self.inst_id,
            epoch: self.epoch,
            full,
            entries,
            status: InstanceStatus {
                used_blocks: self.held_blocks() + self.reserved_blocks(),
                capacity_blocks: self.capacity_blocks,
                batch,
                pending,
            },
        }
    }

    /// Returns true when the message comes from a superseded gManager.
    fn observe_epoch(&mut self, epoch: u64) -> bool {
        match epoch.cmp(&self.epoch) {
            Ordering::Less => true,
            Ordering::Greater => {
                self.epoch = epoch;
                self.need_full = true;
                false
            }
            Ordering::Equal => false,
        }
    }

    fn reject(&mut self, req_id: ReqId, dst_inst: InstId, num_blocks: u64, outcome: MoveOutcome) {
        self.outcomes.push(MoveRecord {
            req_id,
            dst_inst,
            num_blocks,
            outcome,
        });
    }

    /// Blocks of `req` that a new move may take from this instance.
    pub fn movable_blocks(&self, req: ReqId) -> u64 {
        let Some(h) = self.holdings.get(&req) else {
            return 0;
        };
        let keep = u64::from(h.local);
        h.blocks
            .saturating_sub(keep)
            .saturating_sub(self.outgoing_blocks(req))
    }

    /// Consumes one message. `batch` and `pending` feed solicited heartbeats.
    pub fn handle(&mut self, now: f64, msg: ControlMessage, batch: usize, pending: usize) -> Outbox {
        let me = self.inst_id;
        let mut out = Outbox::new();
        match msg {
            ControlMessage::Solicit { epoch } => {
                if !self.observe_epoch(epoch) {
                    self.need_full = true;
                    out.push((Endpoint::GManager, self.heartbeat(batch, pending)));
                }
            }
            ControlMessage::MoveKvcache {
                epoch,
                req_id,
                num_blocks,
                dst_inst,
            } => {
                if self.observe_epoch(epoch) {
                    return out;
                }
                let busy = self.outgoing.values().any(|o| o.req_id == req_id);
                if dst_inst == me
                    || num_blocks == 0
                    || busy
                    || self.movable_blocks(req_id) < num_blocks
                {
                    self.reject(req_id, dst_inst, num_blocks, MoveOutcome::Rejected);
                    return out;
                }
                let reservation_id = (u64::from(me) << 40) | self.next_reservation;
                self.next_reservation += 1;
                self.outgoing.insert(
                    reservation_id,
                    Outgoing {
                        req_id,
                        dst: dst_inst,
                        total: num_blocks,
                        remaining: num_blocks,
                        state: OutState::AwaitingResp,
                    },
                );
                out.push((
                    Endpoint::Instance(dst_inst),
                    ControlMessage::TryMoveKvcache {
                        reservation_id,
                        req_id,
                        num_blocks,
                        src_inst: me,
                    },
                ));
            }
            ControlMessage::TryMoveKvcache {
                reservation_id,
                req_id,
                num_blocks,
                src_inst,
            } => {
                self.expire(now);
                let accepted = self.ensure_space(num_blocks).is_ok();
                if accepted {
                    self.reservations.insert(
                        reservation_id,
                        Reservation {
                            src: src_inst,
                            req_id,
                            remaining: num_blocks,
                            expiry: now + self.reservation_timeout,
                            started: false,
                        },
                    );
                }
                out.push((
                    Endpoint::Instance(src_inst),
                    ControlMessage::TryMoveResp {
                        reservation_id,
                        req_id,
                        accepted,
                    },
                ));
            }
            ControlMessage::TryMoveResp {
                reservation_id,
                accepted,
                ..
            } => {
                if let Some(o) = self.outgoing.get_mut(&reservation_id) {
                    if accepted {
                        o.state = OutState::Transferring;
                    } else {
                        let o = self.outgoing.remove(&reservation_id).unwrap();
                        self.reject(o.req_id, o.dst, o.total, MoveOutcome::Deferred);
                    }
                }
            }
            ControlMessage::DataTransfer {
                reservation_id,
                req_id,
                num_blocks,
                last,
            } => {
                self.expire(now);
                match self.reservations.get_mut(&reservation_id) {
                    Some(r) if r.req_id == req_id && r.remaining >= num_blocks => {
                        r.started = true;
                        r.remaining -= num_blocks;
                        let done = last || r.remaining == 0;
                        if done {
                            self.reservations.remove(&reservation_id);
                        }
                        self.holdings
                            .entry(req_id)
                            .or_insert(Holding {
                                blocks: 0,
                                local: false,
                            })
                            .blocks += num_blocks;
                        let src = (reservation_id >> 40) as InstId;
                        out.push((
                            Endpoint::Instance(src),
                            ControlMessage::TransferAck {
                                reservation_id,
                                req_id,
                                num_blocks,
                            },
                        ));
                    }
                    _ => {
                        let src = (reservation_id >> 40) as InstId;
                        out.push((
                            Endpoint::Instance(src),
                            ControlMessage::TransferAbort {
                                reservation_id,
                                req_id,
                                num_blocks,
                            },
                        ));
                    }
                }
            }
            ControlMessage::TransferAck {
                reservation_id,
                num_blocks,
                ..
            } => {
                if let Some(t) = self.in_transit.get_mut(&reservation_id) {
                    t.blocks = t.blocks.saturating_sub(num_blocks);
                    if t.blocks == 0 {
                        self.in_transit.remove(&reservation_id);
                    }
                }
            }
            ControlMessage::TransferAbort {
                reservation_id,
                num_blocks,
                ..
            } => {
                if let Some(o) = self.outgoing.remove(&reservation_id) {
                    self.reject(o.req_id, o.dst, o.total, MoveOutcome::Aborted);
                }
                if let Some(t) = self.in_transit.get_mut(&reservation_id) {
                    let n = num_blocks.min(t.blocks);
                    t.blocks -= n;
                    let back = *t;
                    if t.blocks == 0 {
                        self.in_transit.remove(&reservation_id);
                    }
                    self.holdings
                        .entry(back.req_id)
                        .or_insert(Holding {
                            blocks: 0,
                            local: back.local,
                        })
                        .blocks += n;
                }
            }
            ControlMessage::Heartbeat { .. } => {}
        }
        out
    }

    /// Sends the next chunks of accepted transfers, oldest reservation
    /// first. Call once per decode step; `max_blocks` caps the blocks sent
    /// by this call.
    pub fn pump_transfers(&mut self, max_blocks: u64) -> Outbox {
        let mut out = Outbox::new();
        let mut budget = max_blocks;
        let ids: Vec<u64> = self
            .outgoing
            .iter()
            .filter(|(_, o)| o.state == OutState::Transferring)
            .map(|(id, _)| *id)
            .collect();
        for id in ids {
            let o = self.outgoing.get(&id).unwrap().clone();
            let Some(h) = self.holdings.get(&o.req_id).copied() else {
                self.outgoing.remove(&id);
                continue;
            };
            let avail = h.blocks.saturating_sub(u64::from(h.local));
            let n = o.remaining.min(budget).min(avail);
            if n == 0 {
                continue;
            }
            budget -= n;
            let h = self.holdings.get_mut(&o.req_id).unwrap();
            h.blocks -= n;
            let local = h.local;
            if h.blocks == 0 {
                self.holdings.remove(&o.req_id);
            }
            self.in_transit
                .entry(id)
                .or_insert(InTransit {
                    req_id: o.req_id,
                    local,
                    blocks: 0,
                })
                .blocks += n;
            let remaining = o.remaining - n;
            let last = remaining == 0;
            out.push((
                Endpoint::Instance(o.dst),
                ControlMessage::DataTransfer {
                    reservation_id: id,
                    req_id: o.req_id,
                    num_blocks: n,
                    last,
                },
            ));
            if last {
                self.outgoing.remove(&id);
                self.outcomes.push(MoveRecord {
                    req_id: o.req_id,
                    dst_inst: o.dst,
                    num_blocks: o.total,
                    outcome: MoveOutcome::Completed,
                });
            } else {
                self.outgoing.get_mut(&id).unwrap().remaining = remaining;
            }
        }
        out
    }

    /// Blocks of accepted reservations whose data has not arrived, by source.
    pub fn inbound(&self) -> BTreeMap<InstId, u64> {
        let mut m = BTreeMap::new();
        for r in self.reservations.values() {
            *m.entry(r.src).or_insert(0) += r.remaining;
        }
        m
    }
}

/// gManager's view of one instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceView {
    pub status: InstanceStatus,
    pub last_seen: f64,
    /// A full heartbeat has been applied since the last resync request.
    pub synced: bool,
}

/// Cluster placement map keyed by (req_id, inst_id).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlacementMap {
    pub entries: BTreeMap<(ReqId, InstId), RequestPlacementEntry>,
    pub instances: BTreeMap<InstId, InstanceView>,
}

impl PlacementMap {
    pub fn sorted_entries(&self) -> Vec<RequestPlacementEntry> {
        self.entries.values().copied().collect()
    }

    /// Requests with a number of local entries other than one.
    pub fn home_violations(&self) -> Vec<ReqId> {
        let mut homes: BTreeMap<ReqId, usize> = BTreeMap::new();
        for e in self.entries.values() {
            *homes.entry(e.req_id).or_insert(0) += usize::from(e.local);
        }
        homes
            .into_iter()
            .filter(|(_, n)| *n != 1)
            .map(|(r, _)| r)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GManager {
    pub epoch: u64,
    map: PlacementMap,
}

impl GManager {
    /// A gManager for `epoch` that knows nothing yet, plus the messages
    /// soliciting full state from every instance.
    pub fn recover(epoch: u64, instances: &[InstId]) -> (Self, Outbox) {
        let map = PlacementMap {
            entries: BTreeMap::new(),
            instances: instances
                .iter()
                .map(|&i| {
                    (
                        i,
                        InstanceView {
                            status: InstanceStatus::default(),
                            last_seen: f64::NEG_INFINITY,
                            synced: false,
                        },
                    )
                })
                .collect(),
        };
        let out = instances
            .iter()
            .map(|&i| (Endpoint::Instance(i), ControlMessage::Solicit { epoch }))
            .collect();
        (Self { epoch, map }, out)
    }

    pub fn map(&self) -> &PlacementMap {
        &self.map
    }

    /// Applies a heartbeat. Deltas are ignored until the instance has sent a
    /// full heartbeat. Malformed heartbeats flag the instance for resync.
    pub fn apply_heartbeat(&mut self, now: f64, hb: &ControlMessage) -> Result<(), ControlError> {
        let ControlMessage::Heartbeat {
            inst_id,
            full,
            entries,
            status,
            ..
        } = hb
        else {
            return Ok(());
        };
        let inst = *inst_id;
        let malformed = |reason: String| ControlError::MalformedHeartbeat { inst, reason };
        let err = if !self.map.instances.contains_key(&inst) {
            Some(malformed("unknown instance".into()))
        } else if let Some(e) = entries.iter().find(|e| e.inst_id != inst) {
            Some(malformed(format!("entry for request {} names instance {}", e.req_id, e.inst_id)))
        } else if entries.iter().map(|e| e.req_id).collect::<BTreeSet<_>>().len() != entries.len() {
            Some(malformed("duplicate request entries".into()))
        } else if status.used_blocks > status.capacity_blocks {
            Some(malformed("used blocks exceed capacity".into()))
        } else {
            None
        };
        if let Some(e) = err {
            if let Some(v) = self.map.instances.get_mut(&inst) {
                v.synced = false;
            }
            return Err(e);
        }
        let view = self.map.instances.get_mut(&inst).unwrap();
        if !*full && !view.synced {
            return Ok(());
        }
        view.status = *status;
        view.last_seen = now;
        if *full {
            view.synced = true;
            self.map.entries.retain(|(_, i), _| *i != inst);
        }
        for e in entries {
            if e.num_blocks == 0 {
                self.map.entries.remove(&(e.req_id, inst));
            } else {
                self.map.entries.insert((e.req_id, inst), *e);
            }
        }
        Ok(())
    }

    /// Consumes one message; returns resync requests for rejected heartbeats.
    pub fn handle(&mut self, now: f64, msg: &ControlMessage) -> Outbox {
        match self.apply_heartbeat(now, msg) {
            Err(ControlError::MalformedHeartbeat { inst, .. }) if self.map.instances.contains_key(&inst) => {
                vec![(Endpoint::Instance(inst), ControlMessage::Solicit { epoch: self.epoch })]
            }
            _ => Vec::new(),
        }
    }

    /// Scheduler inputs built from the map, skipping instances that are not
    /// synced or were last heard from before `fresh_after`.
    pub fn snapshots(&self, fresh_after: f64, block_size_tokens: u64) -> (Vec<InstanceSnapshot>, Vec<RemoteHolding>) {
        let live: BTreeSet<InstId> = self
            .map
            .instances
            .iter()
            .filter(|(_, v)| v.synced && v.last_seen >= fresh_after)
            .map(|(i, _)| *i)
            .collect();
        let mut homes: BTreeMap<ReqId, InstId> = BTreeMap::new();
        let mut totals: BTreeMap<ReqId, u64> = BTreeMap::new();
        for e in self.map.entries.values() {
            if e.local {
                homes.insert(e.req_id, e.inst_id);
            }
            *totals.entry(e.req_id).or_insert(0) += e.num_blocks;
        }
        let mut holdings = Vec::new();
        let mut snaps = Vec::new();
        for &inst in &live {
            let view = &self.map.instances[&inst];
            let mut requests = Vec::new();
            let mut lent = 0;
            for e in self.map.entries.values().filter(|e| e.inst_id == inst) {
                if e.local {
                    let total = totals[&e.req_id];
                    requests.push(RequestSlot {
                        request_id: e.req_id,
                        local_blocks: e.num_blocks,
                        remote_blocks: total - e.num_blocks,
                        total_ctx_tokens: total * block_size_tokens,
                    });
                } else {
                    lent += e.num_blocks;
                    if let Some(&home) = homes.get(&e.req_id) {
                        if live.contains(&home) {
                            holdings.push(RemoteHolding {
                                request_id: e.req_id,
                                home,
                                holder: inst,
                                blocks: e.num_blocks,
                            });
                        }
                    }
                }
            }
            let s = InstanceSnapshot {
                instance_id: inst,
                batch: requests.len(),
                mem_capacity_blocks: view.status.capacity_blocks,
                mem_used_blocks: view.status.used_blocks,
                lent_blocks: lent,
                pending_queue: view.status.pending,
                requests,
            };
            if s.validate().is_ok() {
                snaps.push(s);
            }
        }
        let kept: BTreeSet<InstId> = snaps.iter().map(|s| s.instance_id).collect();
        holdings.retain(|h| kept.contains(&h.home) && kept.contains(&h.holder));
        (snaps, holdings)
    }

    pub fn instructions(&self, directives: &[MoveDirective]) -> Outbox {
        directives
            .iter()
            .map(|d| {
                (
                    Endpoint::Instance(d.src_instance),
                    ControlMessage::MoveKvcache {
                        epoch: self.epoch,
                        req_id: d.request_id,
                        num_blocks: d.num_blocks,
                        dst_inst: d.dst_instance,
                    },
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InFlight {
    pub time: f64,
    pub seq: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub msg: ControlMessage,
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so the max-heap pops the earliest message.
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Latency plus serialization delay of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub latency_s: f64,
    pub bandwidth_bytes_per_s: f64,
}

impl LinkModel {
    pub fn delay(&self, bytes: u64) -> f64 {
        self.latency_s + bytes as f64 / self.bandwidth_bytes_per_s
    }
}

/// Deterministic message transport, FIFO per (from, to) channel.
#[derive(Debug, Default)]
pub struct Network {
    queue: BinaryHeap<InFlight>,
    channel_clock: BTreeMap<(Endpoint, Endpoint), f64>,
    seq: u64,
    log: Option<Vec<String>>,
}

impl Network {
    pub fn new(logging: bool) -> Self {
        Self {
            log: logging.then(Vec::new),
            ..Self::default()
        }
    }

    /// Queues `msg`; it is delivered after `delay` but never before earlier
    /// messages on the same channel. Returns the delivery time.
    pub fn send(&mut self, now: f64, from: Endpoint, to: Endpoint, msg: ControlMessage, delay: f64) -> f64 {
        let clock = self.channel_clock.entry((from, to)).or_insert(f64::NEG_INFINITY);
        let time = (now + delay).max(*clock);
        *clock = time;
        if let Some(log) = &mut self.log {
            log.push(format_log_line(now, from, to, &msg));
        }
        self.queue.push(InFlight {
            time,
            seq: self.seq,
            from,
            to,
            msg,
        });
        self.seq += 1;
        time
    }

    pub fn next_time(&self) -> Option<f64> {
        self.queue.peek().map(|m| m.time)
    }

    pub fn pop(&mut self) -> Option<InFlight> {
        self.queue.pop()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    pub fn log_lines(&self) -> &[String] {
        self.log.as_deref().unwrap_or(&[])
    }
}

/// `<send time> <from> <to> <json message>`
pub fn format_log_line(now: f64, from: Endpoint, to: Endpoint, msg: &ControlMessage) -> String {
    format!(
        "{now:.9} {from} {to} {}",
        serde_json::to_string(msg).expect("messages serialize")
    )
}

pub fn parse_log_line(line: &str) -> Result<(f64, Endpoint, Endpoint, ControlMessage), String> {
    let mut it = line.splitn(4, ' ');
    let mut field = || it.next().ok_or_else(|| format!("short log line: {line:?}"));
    let time = field()?.parse::<f64>().map_err(|e| e.to_string())?;
    let from = field()?.parse()?;
    let to = field()?.parse()?;
    let msg = serde_json::from_str(field()?).map_err(|e| e.to_string())?;
    Ok((time, from, to, msg))
}

pub mod fuzz;
