use std::collections::BTreeSet;

use proptest::prelude::*;
use smcheck::dispatch::{decode_point, decode_report, encode_point, encode_report};
use smcheck::explorer::BacktrackStore;
use smcheck::model::{BacktrackPoint, RaceDetail};
use smcheck::tracer::{parse_trace_str, render_trace, Found};
use smcheck::{ExplorationReport, ObjectId, ThreadId, Trace, ViolationReport};

fn tids(max_len: usize) -> impl Strategy<Value = Vec<ThreadId>> {
    prop::collection::vec((0..6u32).prop_map(ThreadId), 0..max_len)
}

fn point() -> impl Strategy<Value = BacktrackPoint> {
    (
        tids(12),
        prop::collection::btree_set((0..6u32).prop_map(ThreadId), 1..4),
        prop::collection::btree_set((0..6u32).prop_map(ThreadId), 0..4),
        0..1000u64,
    )
        .prop_map(|(prefix, pending, done, iter)| {
            let mut p = BacktrackPoint::new(prefix, iter);
            p.done = done;
            p.pending = pending
                .difference(&p.done)
                .copied()
                .collect::<BTreeSet<_>>();
            p
        })
        .prop_filter("stored points are valid", |p| p.validate().is_ok())
}

fn violation() -> impl Strategy<Value = ViolationReport> {
    (tids(20), 0..500u64, 0..3u8, 0..4u32, 1..3u32, 0..3u32).prop_map(
        |(steps, iter, kind, oid, w, r)| {
            let trace = Trace::new(steps, iter);
            match kind {
                0 => ViolationReport::deadlock(trace),
                1 => ViolationReport::livelock(trace),
                _ => ViolationReport::data_race(
                    trace,
                    RaceDetail {
                        object: ObjectId(oid),
                        readers_pending: r + 1,
                        writers_pending: w,
                    },
                )
                .expect("valid detail"),
            }
        },
    )
}

proptest! {
    #[test]
    fn traces_round_trip(steps in tids(40)) {
        let text = render_trace(&steps);
        prop_assert_eq!(parse_trace_str(&text, "mem").unwrap(), steps);
    }

    #[test]
    fn points_round_trip(p in point()) {
        let line = encode_point(&p);
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(decode_point(&line, 1).unwrap(), p);
    }

    #[test]
    fn reports_round_trip(
        violations in prop::collection::vec(violation(), 0..6),
        iterations in 0..10_000u64,
        warnings in 0..50u64,
        points in 0..200u64,
        node in 0..4u32,
    ) {
        let report = ExplorationReport {
            iterations_run: iterations,
            violations: violations.into_iter().map(|report| Found { node, report }).collect(),
            bound_warnings: warnings,
            points_explored: points,
        };
        let decoded = decode_report(&encode_report(&report), node).unwrap();
        prop_assert_eq!(decoded, report);
    }

    #[test]
    fn stores_round_trip(points in prop::collection::vec(point(), 0..8)) {
        let mut store = BacktrackStore::new();
        for p in points {
            let _ = store.insert(p);
        }
        let again = BacktrackStore::decode(&store.encode()).unwrap();
        prop_assert_eq!(again.encode(), store.encode());
        prop_assert_eq!(again.len(), store.len());
    }
}

#[test]
fn malformed_traces_are_rejected() {
    for bad in [
        "1 0",
        "0 0.\n",
        "1 x.\n",
        "2 0.\n",
        "1 0.\n1 0.\n",
        "1  0.\n",
    ] {
        assert!(parse_trace_str(bad, "mem").is_err(), "{bad:?} accepted");
    }
    assert!(parse_trace_str("", "mem").unwrap().is_empty());
}

#[test]
fn malformed_points_are_rejected() {
    for bad in [
        "",
        "depth=1",
        "depth=2 iter=0 done= pending=1 prefix=0",
        "depth=x iter=0 done= pending= prefix=",
    ] {
        assert!(decode_point(bad, 3).is_err(), "{bad:?} accepted");
    }
}
