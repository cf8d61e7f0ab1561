//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treedoc::bench::{self, BenchConfig};
use treedoc::protocol::{
    initiate_flatten, AbortReason, CoreEndpoint, FlattenOutcome, OpKind, Offline, Role, Site,
};
use treedoc::sim::{self, CrashWindow, Partition, SimConfig};
use treedoc::trace::{revisions_to_trace, Granularity, Replayer, TraceEvent};
use treedoc::{compare_tid, flatten_local, Atom, SiteId, Tid, Treedoc};

type Outcome = Result<String, String>;

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 convergence suite", convergence_suite),
        ("2 commutativity and idempotence", commutativity),
        ("3 order oracle", order_oracle),
        ("4 flatten compaction", flatten_compaction),
        ("5 update wins", update_wins),
        ("6 catch-up walkthrough", catch_up_walkthrough),
        ("7 throughput", throughput),
        ("8 trace round trip", trace_round_trip),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.2}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> SimConfig {
    let core_count = rng.gen_range(2..=5);
    let nebula_count = rng.gen_range(0..=3);
    let n = core_count + nebula_count;
    let op_count = rng.gen_range(1..=2000);
    let horizon = (op_count as u64 * 2).max(20);
    let mut crashes = Vec::new();
    if rng.gen_bool(0.3) {
        let down = rng.gen_range(0..horizon);
        crashes.push(CrashWindow { site: rng.gen_range(0..n), down, up: down + rng.gen_range(1..=horizon / 2 + 1) });
    }
    let mut partitions = Vec::new();
    if rng.gen_bool(0.2) {
        let start = rng.gen_range(0..horizon);
        partitions.push(Partition {
            start,
            end: start + rng.gen_range(1..=horizon / 4 + 1),
            group: (0..n).filter(|_| rng.gen_bool(0.5)).collect(),
        });
    }
    SimConfig {
        seed,
        core_count,
        nebula_count,
        op_count,
        delete_ratio: rng.gen_range(0.0..=0.6),
        max_delay: rng.gen_range(1..=20),
        duplicate_prob: rng.gen_range(0.05..=0.3),
        drop_prob: rng.gen_range(0.0..=0.2),
        flatten_interval: rng.gen_range(50..=600),
        pause_prob: 0.02,
        crashes,
        partitions,
        metrics_every: 50,
        inject_skip_delivery: false,
    }
}

fn convergence_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut converged = 0;
    let (mut commits, mut catch_ups) = (0, 0);
    let mut failures = Vec::new();
    for seed in 0..200 {
        let cfg = random_config(&mut rng, seed);
        match sim::run(&cfg) {
            Ok(r) if r.converged => {
                converged += 1;
                commits += r.stats.flattens_committed;
                catch_ups += r.stats.catch_ups;
            }
            Ok(r) => failures.push(format!("seed {seed}: {:?}", r.divergence.first())),
            Err(e) => failures.push(format!("seed {seed}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("{converged}/200 converged, {commits} flattens committed, {catch_ups} catch-ups, {secs:.1}s");
    if converged == 200 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join(" | ")))
    }
}

/// A random document built by a few sites, every site holding every op.
fn random_doc(rng: &mut ChaCha8Rng, max_ops: usize) -> Treedoc {
    let sites: Vec<SiteId> = ["A", "B", "C"].into_iter().map(SiteId::from).collect();
    let mut doc = Treedoc::new();
    let ops = rng.gen_range(0..=max_ops);
    for i in 0..ops {
        let site = &sites[rng.gen_range(0..sites.len())];
        if doc.len() > 0 && rng.gen_bool(0.3) {
            let tid = doc.tid_at(rng.gen_range(0..doc.len())).unwrap();
            doc.delete(&tid).unwrap();
        } else {
            let tid = doc.alloc_tid_at_position(rng.gen_range(0..=doc.len()), site).unwrap();
            doc.insert(&tid, Atom::from(format!("{i}."))).unwrap();
        }
    }
    doc
}

#[derive(Clone)]
enum Op {
    Ins(Tid, Atom),
    Del(Tid),
}

fn apply(doc: &mut Treedoc, op: &Op) {
    match op {
        Op::Ins(t, a) => {
            doc.insert(t, a.clone()).unwrap();
        }
        Op::Del(t) => {
            doc.delete(t).unwrap();
        }
    }
}

/// An operation generated by `site` against `doc`.
fn random_op(rng: &mut ChaCha8Rng, doc: &Treedoc, site: &SiteId, tag: &str) -> Op {
    if doc.len() > 0 && rng.gen_bool(0.4) {
        Op::Del(doc.tid_at(rng.gen_range(0..doc.len())).unwrap())
    } else {
        Op::Ins(doc.alloc_tid_at_position(rng.gen_range(0..=doc.len()), site).unwrap(), Atom::from(tag))
    }
}

fn commutativity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for _ in 0..1000 {
        let base = random_doc(&mut rng, 40);
        let x = random_op(&mut rng, &base, &SiteId::from("X"), "x");
        let y = random_op(&mut rng, &base, &SiteId::from("Y"), "y");
        let mut xy = base.clone();
        apply(&mut xy, &x);
        apply(&mut xy, &y);
        let mut yx = base.clone();
        apply(&mut yx, &y);
        apply(&mut yx, &x);
        let mut twice = base.clone();
        for op in [&x, &x, &y, &y] {
            apply(&mut twice, op);
        }
        let d = xy.digest();
        if d != yx.digest() || d != twice.digest() || xy.text_bytes() != yx.text_bytes() {
            failures += 1;
        }
    }
    if failures == 0 {
        Ok("1000/1000 pairs commute, double application idempotent".into())
    } else {
        Err(format!("{failures} failing pairs"))
    }
}

fn order_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    let mut largest = 0;
    for _ in 0..500 {
        let mut doc = random_doc(&mut rng, 150);
        // concurrent inserts at one position give major nodes with several minis
        for _ in 0..rng.gen_range(0..20) {
            if doc.node_count() >= 200 {
                break;
            }
            let pos = rng.gen_range(0..=doc.len());
            for s in ["P", "Q"] {
                if doc.node_count() < 200 {
                    let tid = doc.alloc_tid_at_position(pos, &SiteId::from(s)).unwrap();
                    doc.insert(&tid, Atom::from(s)).unwrap();
                }
            }
        }
        largest = largest.max(doc.node_count());
        let infix: Vec<Tid> = doc.nodes().map(|n| n.tid()).collect();
        let mut sorted = infix.clone();
        sorted.sort_by(compare_tid);
        if sorted != infix {
            failures += 1;
        }
    }
    if failures == 0 {
        Ok(format!("500/500 trees (up to {largest} nodes) sort to infix order"))
    } else {
        Err(format!("{failures} trees out of order"))
    }
}

fn flatten_compaction() -> Outcome {
    let site = SiteId::from("A");
    let mut doc = Treedoc::new();
    for i in 0..1000 {
        let tid = doc.alloc_tid_at_position(doc.len(), &site).map_err(|e| e.to_string())?;
        doc.insert(&tid, Atom::from(format!("{i} "))).map_err(|e| e.to_string())?;
    }
    let tids = doc.live_tids();
    for tid in tids.iter().step_by(2) {
        doc.delete(tid).map_err(|e| e.to_string())?;
    }
    let before = doc.stats();
    let after = flatten_local(&doc).new_doc.stats();
    let ratio = before.mean_tid_encoded_bytes / after.mean_tid_encoded_bytes;
    let detail = format!(
        "before: depth {} tombstones {} mean TID {:.1}B; after: depth {} tombstones {} mean TID {:.2}B; ratio {ratio:.1}",
        before.max_depth,
        before.tombstone_count,
        before.mean_tid_encoded_bytes,
        after.max_depth,
        after.tombstone_count,
        after.mean_tid_encoded_bytes
    );
    if before.tombstone_count == 500 && after.tombstone_count == 0 && after.max_depth <= 10 && ratio >= 5.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn core(name: &str) -> Site {
    Site::new(SiteId::from(name), Role::Core)
}

fn synced_trio() -> (Site, Site, Site) {
    let (mut a, mut b, mut c) = (core("A"), core("B"), core("C"));
    for (i, s) in ["p", "q", "r"].into_iter().enumerate() {
        a.insert_at(i, s).unwrap();
    }
    a.delete_at(1).unwrap();
    for op in a.take_outbox() {
        b.deliver(op.clone());
        c.deliver(op);
    }
    (a, b, c)
}

fn update_wins() -> Outcome {
    let (mut a, mut b, mut c) = synced_trio();
    let in_flight = c.insert_at(1, "late").map_err(|e| e.to_string())?;
    c.take_outbox();
    let before: Vec<Vec<_>> = [&a, &b, &c].iter().map(|s| s.replica().snapshot()).collect();
    let outcome = initiate_flatten(&mut a, &mut [&mut b as &mut dyn CoreEndpoint, &mut c], 1).map_err(|e| e.to_string())?;
    let after: Vec<Vec<_>> = [&a, &b, &c].iter().map(|s| s.replica().snapshot()).collect();
    let no_vote = outcome == FlattenOutcome::Aborted(AbortReason::NoVote(SiteId::from("C")));
    if !no_vote || before != after || [&a, &b, &c].iter().any(|s| s.epoch() != 0 || s.is_prepared()) {
        return Err(format!("in-flight update: {outcome:?}, replicas unchanged: {}", before == after));
    }
    // the update survives and reaches everyone
    a.deliver(in_flight.clone());
    b.deliver(in_flight);

    let (mut a, mut b, mut c) = synced_trio();
    let before = c.replica().snapshot();
    let outcome = initiate_flatten(&mut a, &mut [&mut b as &mut dyn CoreEndpoint, &mut Offline(&mut c)], 2)
        .map_err(|e| e.to_string())?;
    let crashed = outcome == FlattenOutcome::Aborted(AbortReason::CrashedMember(SiteId::from("C")));
    if !crashed || a.epoch() != 0 || b.epoch() != 0 || c.replica().snapshot() != before {
        return Err(format!("crashed member: {outcome:?}"));
    }
    Ok("in-flight update -> Aborted(NoVote), replicas unchanged; crashed member -> Aborted(CrashedMember)".into())
}

fn catch_up_walkthrough() -> Outcome {
    let mut c1 = core("C1");
    let mut c2 = core("C2");
    let mut n = Site::new(SiteId::from("N"), Role::Nebula);
    c1.insert_at(0, "a").map_err(|e| e.to_string())?;
    c1.insert_at(1, "c").map_err(|e| e.to_string())?;
    for op in c1.take_outbox() {
        c2.deliver(op.clone());
        n.deliver(op);
    }
    n.insert_at(1, "b").map_err(|e| e.to_string())?;
    n.delete_at(2).map_err(|e| e.to_string())?;
    n.take_outbox();
    let core_log = c1.log().ops().to_vec();
    let outcome = initiate_flatten(&mut c1, &mut [&mut c2 as &mut dyn CoreEndpoint], 1).map_err(|e| e.to_string())?;
    if outcome != FlattenOutcome::Committed(1) {
        return Err(format!("core flatten: {outcome:?}"));
    }
    let emitted = n.catch_up(&core_log, 1).map_err(|e| e.to_string())?;
    let inserts = emitted.iter().filter(|o| o.kind == OpKind::Insert).count();
    let deletes = emitted.iter().filter(|o| o.kind == OpKind::Delete).count();
    for op in n.take_outbox() {
        c1.deliver(op.clone());
        c2.deliver(op);
    }
    let texts: Vec<String> = [&c1, &c2, &n].iter().map(|s| s.replica().text_string()).collect();
    let tids_equal = c1.replica().live_tids() == n.replica().live_tids() && c2.replica().live_tids() == n.replica().live_tids();
    let epochs_ok = emitted.iter().all(|o| o.epoch == 1);
    let detail = format!("emitted {inserts} insert + {deletes} delete, texts {texts:?}, identical live TIDs: {tids_equal}");
    if inserts == 1 && deletes == 1 && epochs_ok && texts.iter().all(|t| t == "ab") && tids_equal {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn throughput() -> Outcome {
    let with = bench::run(&BenchConfig { ops: 100_000, flatten_every: 1000, ..BenchConfig::default() })
        .map_err(|e| e.to_string())?;
    let without = bench::run(&BenchConfig { ops: 100_000, flatten_every: 0, ..BenchConfig::default() })
        .map_err(|e| e.to_string())?;
    let soft_rate = if with.ops_per_sec >= 10_000.0 { "met" } else { "not met" };
    let soft_latency = if with.max_op_latency_ns < without.max_op_latency_ns { "met" } else { "not met" };
    let detail = format!(
        "{:.0} ops/s with {} flattens (10k target {soft_rate}); worst op {:.3} ms vs {:.3} ms without flattening ({soft_latency})",
        with.ops_per_sec,
        with.flattens,
        with.max_op_latency_ns as f64 / 1e6,
        without.max_op_latency_ns as f64 / 1e6
    );
    if with.ops_per_sec >= 1000.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_revision(rng: &mut ChaCha8Rng, prev: &[String]) -> Vec<String> {
    let mut paras = prev.to_vec();
    for _ in 0..rng.gen_range(0..4) {
        match rng.gen_range(0..3) {
            0 if !paras.is_empty() => {
                paras.remove(rng.gen_range(0..paras.len()));
            }
            1 if !paras.is_empty() => {
                let i = rng.gen_range(0..paras.len());
                paras[i] = format!("{} edited{}", paras[i], rng.gen_range(0..100));
            }
            _ => {
                let words: Vec<String> = (0..rng.gen_range(1..6)).map(|_| format!("w{}", rng.gen_range(0..20))).collect();
                paras.insert(rng.gen_range(0..=paras.len()), words.join(" "));
            }
        }
    }
    paras
}

fn trace_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    let mut checked = 0;
    for chain in 0..100 {
        let granularity = if chain % 2 == 0 { Granularity::Paragraph } else { Granularity::Word };
        let mut paras = Vec::new();
        let mut revisions = Vec::new();
        for _ in 0..rng.gen_range(1..=50) {
            paras = random_revision(&mut rng, &paras);
            revisions.push(paras.join("\n\n"));
        }
        let events = revisions_to_trace(&revisions, granularity);
        let flatten_every = [0, 3, 10][chain % 3];
        let mut replayer = Replayer::new(flatten_every, 1 + chain % 3);
        let mut next = events.iter().peekable();
        for (k, text) in revisions.iter().enumerate() {
            while let Some(e) = next.next_if(|e: &&TraceEvent| e.revision == k as u64) {
                if replayer.apply(e).is_err() {
                    failures += 1;
                }
            }
            checked += 1;
            if replayer.text() != text.as_bytes() {
                failures += 1;
            }
        }
    }
    if failures == 0 {
        Ok(format!("100/100 chains, {checked} revisions reproduced exactly"))
    } else {
        Err(format!("{failures} mismatches over {checked} revisions"))
    }
}
