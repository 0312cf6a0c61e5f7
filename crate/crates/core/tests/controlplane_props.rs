use distkv_core::controlplane::fuzz::{run_schedule, FuzzParams};
use distkv_core::controlplane::{ControlMessage, Endpoint, RManager};
use proptest::prelude::*;

const TIMEOUT: f64 = 2.5;

fn try_move(res: u64, n: u64) -> ControlMessage {
    ControlMessage::TryMoveKvcache {
        reservation_id: res,
        req_id: res,
        num_blocks: n,
        src_inst: 0,
    }
}

fn accepted(out: &[(Endpoint, ControlMessage)]) -> bool {
    matches!(out, [(_, ControlMessage::TryMoveResp { accepted: true, .. })])
}

proptest! {
    #[test]
    fn arbitration_is_first_come_first_served(
        cap in 1u64..64,
        used_frac in 0.0f64..1.0,
        arrivals in prop::collection::vec((0u64..3, 1u64..20), 1..30),
    ) {
        let used = (cap as f64 * used_frac) as u64;
        let mut rm = RManager::new(1, cap, TIMEOUT);
        if used > 0 {
            rm.admit(99, used).unwrap();
        }
        // Sequential oracle: unexpired reservations hold their space.
        let mut live: Vec<(f64, u64)> = Vec::new();
        let mut now = 0.0;
        for (res, (gap, n)) in arrivals.into_iter().enumerate() {
            now += gap as f64;
            live.retain(|(expiry, _)| *expiry > now);
            let free = cap - used - live.iter().map(|l| l.1).sum::<u64>();
            let want = n <= free;
            if want {
                live.push((now + TIMEOUT, n));
            }
            let out = rm.handle(now, try_move(res as u64, n), 0, 0);
            prop_assert_eq!(accepted(&out), want);
            prop_assert!(rm.held_blocks() + rm.reserved_blocks() <= cap);
        }
    }

    #[test]
    fn rejected_reservation_changes_nothing(cap in 1u64..32, fill in 0u64..32, extra in 1u64..16) {
        let fill = fill.min(cap);
        let mut dst = RManager::new(1, cap, TIMEOUT);
        if fill > 0 {
            dst.admit(7, fill).unwrap();
        }
        let before = (dst.held_blocks(), dst.reserved_blocks(), dst.entries());
        let out = dst.handle(0.0, try_move(1, cap - fill + extra), 0, 0);
        prop_assert!(!accepted(&out));
        prop_assert_eq!(before, (dst.held_blocks(), dst.reserved_blocks(), dst.entries()));

        let mut src = RManager::new(0, 64, TIMEOUT);
        src.admit(5, 40).unwrap();
        let out = src.handle(
            0.0,
            ControlMessage::MoveKvcache { epoch: 0, req_id: 5, num_blocks: 8, dst_inst: 1 },
            0,
            0,
        );
        let ControlMessage::TryMoveKvcache { reservation_id, .. } = out[0].1 else {
            panic!("expected a reservation request");
        };
        let before = (src.held_blocks(), src.entries());
        src.handle(0.0, ControlMessage::TryMoveResp { reservation_id, req_id: 5, accepted: false }, 0, 0);
        prop_assert_eq!(before, (src.held_blocks(), src.entries()));
        prop_assert!(src.pump_transfers(u64::MAX).is_empty());
    }

    #[test]
    fn fuzzed_schedules_stay_safe(seed in any::<u64>(), index in 0u64..1_000_000) {
        let o = run_schedule(&FuzzParams { seed, ..FuzzParams::default() }, index);
        prop_assert_eq!(o.capacity_violations, 0);
        prop_assert_eq!(o.home_violations, 0);
        prop_assert_eq!(&o.map_after_deltas, &o.truth);
        prop_assert_eq!(&o.map_after_full, &o.truth);
    }
}
