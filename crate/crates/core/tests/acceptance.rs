//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::rc::Rc;
use std::time::{Duration, Instant};

use streamtrig::bench::life::{run_game_of_life, Board, LifeConfig};
use streamtrig::bench::{run_pingpong_size, run_scaling_sweep, Backend, SweepConfig};
use streamtrig::error::Error;
use streamtrig::nicsim::{DeferredWorkEntry, WorkKind};
use streamtrig::observe::WorkTag;
use streamtrig::stqueue::MAX_ENTRIES_PER_OP;
use streamtrig::{cluster, CostModel};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn protocol_safety() -> Result<String, String> {
    let start = Instant::now();
    let mut writes = 0;
    let mut entries = 0;
    for seed in 0..1000u64 {
        let stats = common::run_safety_schedule(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        writes += stats.data_writes;
        entries += stats.entries;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(60), || format!("took {took:?}"))?;
    Ok(format!(
        "1000 schedules (seeds 0..1000), {writes} regular-send data writes, {entries} entries, 0 violations in {took:.2?}"
    ))
}

fn oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let cm = CostModel::default();
    let expect = common::oracle_digest(64, 100);
    let mut runs = 0;
    for grid in [(1, 1), (2, 2), (4, 2), (4, 4)] {
        for backend in Backend::ALL {
            let cfg = LifeConfig {
                backend,
                grid,
                steps: 100,
                initial: Board::glider_blinker(64),
                verify: false,
                trace: false,
            };
            let run = run_game_of_life(&cm, &cfg).map_err(|e| e.to_string())?;
            ensure(run.digest == expect, || {
                format!("{backend} {}x{}: {} != oracle {expect}", grid.0, grid.1, run.digest)
            })?;
            runs += 1;
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(30), || format!("took {took:?}"))?;
    Ok(format!("{runs}/12 digests equal oracle {}… in {took:.2?}", &expect[..12]))
}

fn latency(cm: &CostModel, backend: Backend, size: usize, iters: usize) -> Result<f64, String> {
    run_pingpong_size(cm, backend, size, iters, false)
        .map(|r| r.result.metric("latency_ns").unwrap())
        .map_err(|e| e.to_string())
}

fn latency_ordering() -> Result<String, String> {
    let cm = CostModel::default();
    let mut lo: f64 = 1.0;
    let mut hi: f64 = 0.0;
    let mut size = 32;
    while size <= 512 << 10 {
        let base = latency(&cm, Backend::Baseline, size, 50)?;
        let send = latency(&cm, Backend::StSend, size, 50)?;
        let rsend = latency(&cm, Backend::StRsend, size, 50)?;
        ensure(rsend < send && send < base, || {
            format!("{size} B: rsend {rsend} send {send} baseline {base}")
        })?;
        let reduction = 1.0 - send / base;
        ensure((0.10..=0.60).contains(&reduction), || {
            format!("{size} B: st-send reduction {:.1}%", reduction * 100.0)
        })?;
        lo = lo.min(reduction);
        hi = hi.max(reduction);
        size *= 2;
    }
    Ok(format!(
        "st-rsend < st-send < baseline for 32 B..512 KiB; st-send reduction {:.1}%..{:.1}%",
        lo * 100.0,
        hi * 100.0
    ))
}

fn large_message_crossover() -> Result<String, String> {
    let cm = CostModel::default();
    let mut worst: f64 = 0.0;
    for size in [8 << 20, 16 << 20] {
        let base = latency(&cm, Backend::Baseline, size, 3)?;
        for backend in [Backend::StSend, Backend::StRsend] {
            let st = latency(&cm, backend, size, 3)?;
            let gap = (st - base).abs() / base;
            ensure(gap <= 0.10, || format!("{backend} at {size} B differs by {:.1}%", gap * 100.0))?;
            worst = worst.max(gap);
        }
    }
    Ok(format!("8 and 16 MiB: stream-triggered within {:.2}% of baseline", worst * 100.0))
}

fn small_message_crossover() -> Result<String, String> {
    let cm = CostModel::default();
    let cfg = SweepConfig {
        n: 128,
        grids: vec![(1, 1), (1, 2), (2, 2), (2, 4), (4, 4), (8, 8)],
        backends: Backend::ALL.to_vec(),
        steps: 10,
        seed: 11,
    };
    let rows = run_scaling_sweep(&cm, &cfg, None).map_err(|e| e.to_string())?;
    let speedup = |b: Backend, ranks: usize| {
        rows.iter()
            .find(|r| r.backend == b && r.ranks == ranks)
            .and_then(|r| r.metric("speedup"))
            .unwrap()
    };
    let mut points = 0;
    for r in rows.iter().filter(|r| r.backend == Backend::Baseline) {
        let edge = r.metric("edge_bytes").unwrap();
        ensure(edge < cm.eager_threshold_bytes as f64, || format!("edge {edge} not small"))?;
        let (b, s, rs) = (
            speedup(Backend::Baseline, r.ranks),
            speedup(Backend::StSend, r.ranks),
            speedup(Backend::StRsend, r.ranks),
        );
        ensure(b > s, || format!("{} ranks: baseline {b:.3} <= st-send {s:.3}", r.ranks))?;
        ensure(rs > b, || format!("{} ranks: st-rsend {rs:.3} <= baseline {b:.3}", r.ranks))?;
        ensure(rs >= s, || format!("{} ranks: st-rsend {rs:.3} < st-send {s:.3}", r.ranks))?;
        points += 1;
    }
    ensure(speedup(Backend::Baseline, 1) == 1.0, || "baseline 1-rank speedup != 1".into())?;
    Ok(format!("{points} sweep points with edges < eager threshold: st-send < baseline < st-rsend"))
}

fn resource_semantics() -> Result<String, String> {
    let cm = CostModel::default();
    ensure(cm.dwq_pool_capacity == 500 && MAX_ENTRIES_PER_OP == 2, || "pool figures".into())?;

    // 501 triggered sends on one rank; only the first is released at 10 us.
    let (mut sim, hosts) = cluster(2, cm.clone());
    let (h, releaser) = (hosts[0].clone(), hosts[0].clone());
    let posted = Rc::new(Cell::new((0u64, 0usize)));
    let p = posted.clone();
    let counter = h.alloc_counter();
    let dst = hosts[1].alloc(8);
    let region = hosts[1].register_region(dst, false).map_err(|e| e.to_string())?;
    let src = h.alloc(8);
    sim.spawn(0, async move {
        for i in 0..501u64 {
            let entry = DeferredWorkEntry {
                kind: WorkKind::RemoteWrite {
                    src_base: src.base,
                    len: 8,
                    dest: region.addr(0),
                },
                counter,
                threshold: i + 1,
                completion_counter: None,
                tag: WorkTag::USER,
            };
            h.post_deferred(entry).await?;
            if i == 499 {
                p.set((h.now(), h.world().borrow().nic.in_use(0)));
            }
        }
        let stalled_at = p.get();
        p.set((h.now(), stalled_at.1));
        releaser.sleep(0).await;
        Ok(())
    });
    let rel = hosts[0].clone();
    sim.spawn(0, async move {
        rel.sleep(10_000).await;
        rel.increment_counter(counter, 1)?;
        rel.sleep(1_000_000).await;
        rel.increment_counter(counter, 500)?;
        Ok(())
    });
    let out = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    ensure(out.is_completed(), || format!("{out:?}"))?;
    let (resumed, full) = posted.get();
    let retire = 10_000 + cm.transfer_time(8);
    ensure(full == 500, || format!("pool held {full} before post 501"))?;
    ensure(resumed == retire, || format!("post 501 resumed at {resumed}, first retire at {retire}"))?;
    let max = sim.world().borrow().nic.max_in_use(0);
    ensure(max == 500, || format!("max in use {max}"))?;

    // Per-operation bound: a 16-request halo start consumes 2 entries each.
    let (mut sim, hosts) = cluster(2, cm.clone());
    let c = hosts[0].comm_world();
    let mut reqs = [Vec::new(), Vec::new()];
    for (rank, h) in hosts.iter().enumerate() {
        for t in 0..8 {
            reqs[rank].push(h.recv_init(h.alloc(8), 1 - rank, t, c).unwrap());
            reqs[rank].push(h.send_init(h.alloc(8), 1 - rank, t, c, false).unwrap());
        }
    }
    let per_op = Rc::new(Cell::new(0usize));
    for (rank, h) in hosts.iter().enumerate() {
        let (h, r, per_op) = (h.clone(), reqs[rank].clone(), per_op.clone());
        sim.spawn(rank, async move {
            h.match_all(&r).await?;
            let (_, q) = common::queue_on(&h);
            let before = h.world().borrow().nic.in_use(h.rank());
            h.enqueue_start_all(q, &r).await?;
            let used = h.world().borrow().nic.in_use(h.rank()) - before;
            per_op.set(per_op.get().max(used.div_ceil(r.len())));
            assert_eq!(used, 2 * r.len());
            h.enqueue_wait_all(q, &r)?;
            h.queue_wait(q).await;
            h.queue_free(q)
        });
    }
    let out = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    ensure(out.is_completed(), || format!("{out:?}"))?;
    ensure(per_op.get() <= MAX_ENTRIES_PER_OP, || format!("{} entries per op", per_op.get()))?;

    // Partner never starts: deadlock names the CTS-gated data write.
    let (mut sim, hosts) = cluster(2, cm.clone());
    let (a, b) = (hosts[0].clone(), hosts[1].clone());
    let s = a.send_init(a.alloc(16), 1, 0, c, false).unwrap();
    let r = b.recv_init(b.alloc(16), 0, 0, c).unwrap();
    sim.spawn(0, async move {
        a.match_all(&[s]).await?;
        let (_, q) = common::queue_on(&a);
        a.enqueue_start_all(q, &[s]).await?;
        a.enqueue_wait_all(q, &[s])?;
        a.queue_wait(q).await;
        Ok(())
    });
    sim.spawn(1, async move { b.match_all(&[r]).await });
    let out = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    let report = out.deadlock().ok_or("expected a deadlock")?;
    let named = report
        .unfired
        .iter()
        .find(|u| u.contains("send-data") && u.contains("threshold 2 (value 1)"))
        .ok_or_else(|| format!("report lacks the CTS-gated entry:\n{report}"))?;
    ensure(report.blocked.iter().any(|t| t.condition.contains("queue_wait")), || {
        format!("{report}")
    })?;
    Ok(format!(
        "post 501 stalled until t={resumed} ns; <= {MAX_ENTRIES_PER_OP} entries/op; deadlock names `{named}`"
    ))
}

fn api_conformance() -> Result<String, String> {
    let (mut sim, hosts) = cluster(2, CostModel::default());
    let c = hosts[0].comm_world();
    let (a, b) = (hosts[0].clone(), hosts[1].clone());
    let checked = Rc::new(Cell::new(0));
    let n = checked.clone();
    sim.spawn(0, async move {
        let buf = a.alloc(8);
        let plain = a.isend(buf, 1, 9, c)?;
        let s1 = a.send_init(buf, 1, 1, c, false)?;
        let s2 = a.send_init(buf, 1, 2, c, false)?;
        let lonely = a.send_init(buf, 1, 3, c, true)?;
        assert!(matches!(a.imatch_all(&[s1, plain]), Err(Error::NotPersistent(id)) if id == plain));
        a.match_all(&[s1, s2]).await?;
        assert!(matches!(a.imatch_all(&[s1]), Err(Error::AlreadyMatched(_))));
        let (s_a, q1) = common::queue_on(&a);
        let (_, q2) = common::queue_on(&a);
        let before = (a.world().borrow().nic.in_use(0), a.world().borrow().gpu.pending_ops(s_a));
        assert!(matches!(a.enqueue_start_all(q1, &[s1, lonely]).await, Err(Error::NotMatched(id)) if id == lonely));
        let after = (a.world().borrow().nic.in_use(0), a.world().borrow().gpu.pending_ops(s_a));
        assert_eq!(before, after, "rejected start armed or enqueued work");
        a.enqueue_start_all(q1, &[s1]).await?;
        assert!(matches!(a.enqueue_start_all(q1, &[s1]).await, Err(Error::AlreadyStarted(_))));
        assert!(matches!(a.enqueue_wait_all(q2, &[s1]), Err(Error::WrongQueue { .. })));
        assert!(matches!(a.enqueue_wait_all(q1, &[s2]), Err(Error::NotStarted(_))));
        assert!(matches!(a.queue_free(q1), Err(Error::QueueBusy(_))));
        a.enqueue_wait_all(q1, &[s1])?;
        a.queue_wait(q1).await;
        a.queue_free(q1)?;
        a.queue_free(q2)?;
        a.wait_all(&[plain]).await?;
        n.set(7);
        Ok(())
    });
    sim.spawn(1, async move {
        let buf = b.alloc(8);
        let r1 = b.recv_init(buf, 0, 1, c)?;
        let r2 = b.recv_init(buf, 0, 2, c)?;
        b.match_all(&[r1, r2]).await?;
        let (_, q) = common::queue_on(&b);
        b.enqueue_start_all(q, &[r1]).await?;
        b.enqueue_wait_all(q, &[r1])?;
        b.queue_wait(q).await;
        b.blocking_recv(buf, 0, 9, c).await?;
        b.queue_free(q)
    });
    let out = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    ensure(out.is_completed(), || format!("{out:?}"))?;
    ensure(checked.get() == 7, || "checks did not run".into())?;
    Ok("non-persistent match, unmatched start (rolled back), double start, cross-queue wait, \
        unstarted wait, busy queue free all rejected"
        .into())
}

fn determinism() -> Result<String, String> {
    let exe = env!("CARGO_BIN_EXE_bench");
    let dir = std::env::temp_dir().join(format!("streamtrig-determinism-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in 0..2 {
        let csv = dir.join(format!("sweep{run}.csv"));
        let trace = dir.join(format!("trace{run}.txt"));
        let status = Command::new(exe)
            .args(["sweep", "--sizes", "64", "--steps", "10", "--seed", "42", "--grid", "1x1,2x2,2x4,4x4,8x8"])
            .arg("--csv")
            .arg(&csv)
            .arg("--trace")
            .arg(&trace)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("bench sweep exited with {status}"))?;
        let read = |p| std::fs::read(p).map_err(|e: std::io::Error| e.to_string());
        outputs.push((read(&csv)?, read(&trace)?));
    }
    let _ = std::fs::remove_dir_all(&dir);
    let (a, b) = (&outputs[0], &outputs[1]);
    ensure(!a.1.is_empty() && a.0.len() > 100, || "empty outputs".into())?;
    ensure(a.0 == b.0, || "CSV differs between runs".into())?;
    ensure(a.1 == b.1, || "trace differs between runs".into())?;
    let lines = a.1.iter().filter(|&&c| c == b'\n').count();
    Ok(format!("two seeded sweeps: identical CSV ({} B) and trace ({lines} events)", a.0.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("protocol safety", protocol_safety),
        ("oracle equivalence", oracle_equivalence),
        ("latency ordering", latency_ordering),
        ("large-message crossover", large_message_crossover),
        ("small-message crossover", small_message_crossover),
        ("resource semantics", resource_semantics),
        ("API conformance", api_conformance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
