//! GPU ping-pong between two ranks.
//!
//! Rank 0 packs a buffer, sends it, receives the echo and unpacks it; rank 1
//! echoes. Each round trip is two hops. Rank 0's pack kernel stamps the
//! iteration into the payload and its unpack kernel checks the echo, so a
//! timing is only reported for a byte-exact run.

use std::cell::Cell;
use std::rc::Rc;

use crate::bench::{mean, Backend, BenchResult};
use crate::costmodel::CostModel;
use crate::error::{Error, Result};
use crate::mpicore::RequestId;
use crate::simclock::{Nanos, TraceRecord};
use crate::stqueue::QueueId;
use crate::world::{cluster, Buffer, Host};

const PING: i64 = 1;
const PONG: i64 = 2;

/// Iterations used when none are given: fewer for larger messages.
pub fn default_iterations(size: usize) -> usize {
    if size < 4 << 20 {
        1000
    } else if size <= 64 << 20 {
        100
    } else {
        10
    }
}

#[derive(Clone, Debug)]
pub struct PingPongRun {
    pub result: BenchResult,
    /// Virtual time of the timed loop, excluding setup and matching.
    pub total_ns: Nanos,
    pub trace: Vec<TraceRecord>,
}

fn pattern(i: usize) -> u8 {
    (i as u8).wrapping_mul(31).wrapping_add(7)
}

fn stamp(src: &[u8], iter: usize) -> impl Iterator<Item = u8> + '_ {
    let k = pattern(iter);
    src.iter().map(move |b| b.wrapping_add(k))
}

struct Buffers {
    src: Buffer,
    send: Buffer,
    recv: Buffer,
}

fn alloc_buffers(h: &Host, size: usize) -> Buffers {
    let src = h.alloc(size);
    let init: Vec<u8> = (0..size).map(|i| (i % 251) as u8).collect();
    h.write(src, &init);
    Buffers {
        src,
        send: h.alloc(size),
        recv: h.alloc(size),
    }
}

/// Pack kernel on rank 0: stamped copy of the source.
fn launch_pack0(h: &Host, s: crate::gpusim::StreamId, b: &Buffers, iter: usize) -> Result<()> {
    let (src, dst, len) = (b.src.base, b.send.base, b.src.len);
    let t = h.cost().pack_time(len);
    h.launch_kernel(s, t, "pack", move |m| {
        let data: Vec<u8> = stamp(m.slice(src, len), iter).collect();
        m.slice_mut(dst, len).copy_from_slice(&data);
    })?;
    Ok(())
}

/// Unpack kernel on rank 0: checks the echo against the stamped source.
fn launch_unpack0(
    h: &Host,
    s: crate::gpusim::StreamId,
    b: &Buffers,
    iter: usize,
    ok: &Rc<Cell<bool>>,
) -> Result<()> {
    let (src, from, len) = (b.src.base, b.recv.base, b.src.len);
    let t = h.cost().pack_time(len);
    let ok = ok.clone();
    h.launch_kernel(s, t, "unpack", move |m| {
        if !stamp(m.slice(src, len), iter).eq(m.slice(from, len).iter().copied()) {
            ok.set(false);
        }
    })?;
    Ok(())
}

/// Echo kernels on rank 1: unpack into the working buffer, pack it back.
fn launch_echo(h: &Host, s: crate::gpusim::StreamId, b: &Buffers) -> Result<()> {
    let (work, recv, send, len) = (b.src.base, b.recv.base, b.send.base, b.src.len);
    let t = h.cost().pack_time(len);
    h.launch_kernel(s, t, "unpack", move |m| m.copy_within(recv, work, len))?;
    h.launch_kernel(s, t, "pack", move |m| m.copy_within(work, send, len))?;
    Ok(())
}

async fn baseline_rank0(h: Host, size: usize, iters: usize, ok: Rc<Cell<bool>>, span: Rc<Cell<(Nanos, Nanos)>>) -> Result<()> {
    let b = alloc_buffers(&h, size);
    let s = h.create_stream();
    let c = h.comm_world();
    let t0 = h.now();
    for i in 0..iters {
        launch_pack0(&h, s, &b, i)?;
        h.stream_synchronize(s).await;
        h.blocking_send(b.send, 1, PING, c).await?;
        h.blocking_recv(b.recv, 1, PONG, c).await?;
        launch_unpack0(&h, s, &b, i, &ok)?;
    }
    h.stream_synchronize(s).await;
    span.set((t0, h.now()));
    Ok(())
}

async fn baseline_rank1(h: Host, size: usize, iters: usize) -> Result<()> {
    let b = alloc_buffers(&h, size);
    let s = h.create_stream();
    let c = h.comm_world();
    for _ in 0..iters {
        h.blocking_recv(b.recv, 0, PING, c).await?;
        launch_echo(&h, s, &b)?;
        h.stream_synchronize(s).await;
        h.blocking_send(b.send, 0, PONG, c).await?;
    }
    Ok(())
}

async fn st_setup(h: &Host, b: &Buffers, backend: Backend, send_tag: i64, recv_tag: i64) -> Result<(QueueId, RequestId, RequestId)> {
    let peer = 1 - h.rank();
    let c = h.comm_world();
    let send = h.send_init(b.send, peer, send_tag, c, backend.ready())?;
    let recv = h.recv_init(b.recv, peer, recv_tag, c)?;
    h.match_all(&[send, recv]).await?;
    let q = h.queue_init("cxi", h.create_stream())?;
    Ok((q, send, recv))
}

fn stream_of(h: &Host, q: QueueId) -> crate::gpusim::StreamId {
    h.world().borrow().stq.get(q).expect("live queue").stream
}

async fn st_rank0(
    h: Host,
    backend: Backend,
    size: usize,
    iters: usize,
    ok: Rc<Cell<bool>>,
    span: Rc<Cell<(Nanos, Nanos)>>,
) -> Result<()> {
    let b = alloc_buffers(&h, size);
    let (q, ping, pong) = st_setup(&h, &b, backend, PING, PONG).await?;
    let s = stream_of(&h, q);
    let t0 = h.now();
    for i in 0..iters {
        launch_pack0(&h, s, &b, i)?;
        h.enqueue_start_all(q, &[pong, ping]).await?;
        h.enqueue_wait_all(q, &[pong, ping])?;
        launch_unpack0(&h, s, &b, i, &ok)?;
    }
    h.queue_wait(q).await;
    span.set((t0, h.now()));
    h.queue_free(q)
}

async fn st_rank1(h: Host, backend: Backend, size: usize, iters: usize) -> Result<()> {
    let b = alloc_buffers(&h, size);
    let (q, pong, ping) = st_setup(&h, &b, backend, PONG, PING).await?;
    let s = stream_of(&h, q);
    h.enqueue_start_all(q, &[ping]).await?;
    for i in 0..iters {
        h.enqueue_wait_all(q, &[ping])?;
        launch_echo(&h, s, &b)?;
        if i + 1 < iters {
            h.enqueue_start_all(q, &[pong, ping]).await?;
        } else {
            h.enqueue_start_all(q, &[pong]).await?;
        }
        h.enqueue_wait_all(q, &[pong])?;
    }
    h.queue_wait(q).await;
    h.queue_free(q)
}

/// Runs one message size. `trace` records every dispatched event.
pub fn run_pingpong_size(
    cost: &CostModel,
    backend: Backend,
    size: usize,
    iterations: usize,
    trace: bool,
) -> Result<PingPongRun> {
    if iterations == 0 {
        return Err(Error::Bench("iterations must be > 0".into()));
    }
    let (mut sim, hosts) = cluster(2, cost.clone());
    if trace {
        sim.world().borrow_mut().clock.enable_trace();
    }
    let ok = Rc::new(Cell::new(true));
    let span = Rc::new(Cell::new((0, 0)));
    let (h0, h1) = (hosts[0].clone(), hosts[1].clone());
    if backend.is_stream_triggered() {
        sim.spawn(0, st_rank0(h0, backend, size, iterations, ok.clone(), span.clone()));
        sim.spawn(1, st_rank1(h1, backend, size, iterations));
    } else {
        sim.spawn(0, baseline_rank0(h0, size, iterations, ok.clone(), span.clone()));
        sim.spawn(1, baseline_rank1(h1, size, iterations));
    }
    let outcome = sim.run_until_quiescent()?;
    if let Some(report) = outcome.deadlock() {
        return Err(Error::Bench(format!("ping-pong deadlocked:\n{report}")));
    }
    if !ok.get() {
        return Err(Error::Bench(format!("{backend} ping-pong of {size} B corrupted the payload")));
    }
    let (t0, t1) = span.get();
    let total_ns = t1 - t0;
    let rtt = mean(total_ns, iterations);
    let latency = rtt / 2.0;
    let result = BenchResult {
        backend,
        size_bytes: size as u64,
        ranks: 2,
        iterations,
        mean_ns: rtt,
        metrics: vec![
            ("latency_ns", latency),
            ("bandwidth_gb_s", size as f64 / latency),
        ],
    };
    let trace = sim.world().borrow().clock.trace().to_vec();
    Ok(PingPongRun {
        result,
        total_ns,
        trace,
    })
}

/// Runs every size, with `iterations` or the size-based default.
pub fn run_pingpong(
    cost: &CostModel,
    backend: Backend,
    sizes: &[usize],
    iterations: Option<usize>,
) -> Result<Vec<BenchResult>> {
    sizes
        .iter()
        .map(|&size| {
            let n = iterations.unwrap_or_else(|| default_iterations(size));
            run_pingpong_size(cost, backend, size, n, false).map(|r| r.result)
        })
        .collect()
}
