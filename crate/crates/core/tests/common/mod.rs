#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use streamtrig::bench::life::{BLINKER, GLIDER};
use streamtrig::gpusim::StreamOp;
use streamtrig::mpicore::RequestId;
use streamtrig::nicsim::EntryId;
use streamtrig::observe::{Observation, Purpose};
use streamtrig::{cluster, CostModel, Host};

/// Sparse Life: live cells as a set, neighbor counts by hashing.
pub struct OracleLife {
    pub n: usize,
    pub live: HashSet<(usize, usize)>,
}

impl OracleLife {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            live: HashSet::new(),
        }
    }

    pub fn add(&mut self, r: usize, c: usize, shape: &[(usize, usize)]) {
        for &(dr, dc) in shape {
            self.live.insert(((r + dr) % self.n, (c + dc) % self.n));
        }
    }

    pub fn glider_blinker(n: usize) -> Self {
        let mut o = Self::new(n);
        o.add(1, 1, &GLIDER);
        o.add(n / 2, n / 2, &BLINKER);
        o
    }

    pub fn step(&mut self) {
        let n = self.n;
        let mut counts: HashMap<(usize, usize), u32> = HashMap::new();
        for &(r, c) in &self.live {
            for dr in [n - 1, 0, 1] {
                for dc in [n - 1, 0, 1] {
                    if (dr, dc) != (0, 0) {
                        *counts.entry(((r + dr) % n, (c + dc) % n)).or_default() += 1;
                    }
                }
            }
        }
        self.live = counts
            .into_iter()
            .filter(|(cell, k)| *k == 3 || (*k == 2 && self.live.contains(cell)))
            .map(|(cell, _)| cell)
            .collect();
    }

    pub fn digest(&self) -> String {
        let mut bytes = vec![0u8; self.n * self.n];
        for &(r, c) in &self.live {
            bytes[r * self.n + c] = 1;
        }
        let d = Sha256::digest(&bytes);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn oracle_digest(n: usize, steps: usize) -> String {
    let mut o = OracleLife::glider_blinker(n);
    for _ in 0..steps {
        o.step();
    }
    o.digest()
}

/// Payload byte of send `i` in epoch `e`.
fn payload(e: u64, i: usize, j: usize) -> u8 {
    (e as u8).wrapping_mul(37) ^ (i as u8).wrapping_mul(11) ^ (j as u8)
}

#[derive(Debug, Default)]
pub struct SafetyStats {
    pub data_writes: usize,
    pub entries: usize,
    pub increments: usize,
}

/// One randomized schedule: rank 0 streams `k` regular sends to rank 1 for
/// several epochs. Both streams and both hosts run with random delays, which
/// randomizes the relative order of GPU triggers and CTS arrivals. Returns a
/// description of the first violated property.
pub fn run_safety_schedule(seed: u64) -> Result<SafetyStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(1..=3);
    let epochs = rng.gen_range(1..=4u64);
    let len = rng.gen_range(1..=96usize);
    let mut delays = |n: u64| -> Vec<(u64, u64)> {
        (0..n)
            .map(|_| (rng.gen_range(0..20_000), rng.gen_range(0..20_000)))
            .collect()
    };
    let send_delays = delays(epochs);
    let recv_delays = delays(epochs);

    let (mut sim, hosts) = cluster(2, CostModel::default());
    sim.world().borrow_mut().obs.enable();
    let (a, b) = (hosts[0].clone(), hosts[1].clone());
    let c = a.comm_world();
    let sbufs: Vec<_> = (0..k).map(|_| a.alloc(len)).collect();
    let rbufs: Vec<_> = (0..k).map(|_| b.alloc(len)).collect();
    let sends: Vec<RequestId> = (0..k)
        .map(|i| a.send_init(sbufs[i], 1, i as i64, c, false).unwrap())
        .collect();
    let recvs: Vec<RequestId> = (0..k)
        .map(|i| b.recv_init(rbufs[i], 0, i as i64, c).unwrap())
        .collect();
    let bad = std::rc::Rc::new(std::cell::Cell::new(None::<String>));

    let (sreq, sb) = (sends.clone(), sbufs.clone());
    sim.spawn(0, async move {
        a.match_all(&sreq).await?;
        let s = a.create_stream();
        let q = a.queue_init("cxi", s)?;
        for (e, &(gpu, host)) in (1..).zip(&send_delays) {
            a.sleep(host).await;
            a.stream_enqueue(s, StreamOp::compute(gpu))?;
            let bufs = sb.clone();
            a.launch_kernel(s, 10, "pack", move |m| {
                for (i, buf) in bufs.iter().enumerate() {
                    for (j, byte) in m.slice_mut(buf.base, buf.len).iter_mut().enumerate() {
                        *byte = payload(e, i, j);
                    }
                }
            })?;
            a.enqueue_start_all(q, &sreq).await?;
            a.enqueue_wait_all(q, &sreq)?;
        }
        a.queue_wait(q).await;
        a.queue_free(q)
    });
    let (rreq, rb, flag) = (recvs.clone(), rbufs.clone(), bad.clone());
    sim.spawn(1, async move {
        b.match_all(&rreq).await?;
        let s = b.create_stream();
        let q = b.queue_init("cxi", s)?;
        for (e, &(gpu, host)) in (1..).zip(&recv_delays) {
            b.sleep(host).await;
            b.stream_enqueue(s, StreamOp::compute(gpu))?;
            b.enqueue_start_all(q, &rreq).await?;
            b.enqueue_wait_all(q, &rreq)?;
            let (bufs, flag) = (rb.clone(), flag.clone());
            b.launch_kernel(s, 10, "check", move |m| {
                for (i, buf) in bufs.iter().enumerate() {
                    let got = m.slice(buf.base, buf.len);
                    if got.iter().enumerate().any(|(j, &x)| x != payload(e, i, j)) {
                        flag.set(Some(format!("epoch {e} buffer {i} holds wrong bytes")));
                    }
                }
            })?;
        }
        b.queue_wait(q).await;
        b.queue_free(q)
    });
    let out = sim.run_until_quiescent().map_err(|e| e.to_string())?;
    if let Some(report) = out.deadlock() {
        return Err(format!("deadlock: {report}"));
    }
    if let Some(msg) = bad.take() {
        return Err(msg);
    }
    let world = sim.world();
    let result = check_observations(&world.borrow(), &sends, &recvs, &rbufs, epochs);
    result
}

fn check_observations(
    w: &streamtrig::World,
    sends: &[RequestId],
    recvs: &[RequestId],
    rbufs: &[streamtrig::Buffer],
    epochs: u64,
) -> Result<SafetyStats, String> {
    let log = w.obs.log();
    let mut stats = SafetyStats::default();
    // (request, epoch, purpose) -> time
    let mut triggered = HashMap::new();
    let mut executed = HashMap::new();
    let mut fired_at = HashMap::new();
    let mut armed: BTreeMap<EntryId, usize> = BTreeMap::new();
    let mut fired: BTreeMap<EntryId, usize> = BTreeMap::new();
    let mut done: BTreeMap<EntryId, usize> = BTreeMap::new();
    let mut last: HashMap<(usize, usize), u64> = HashMap::new();
    let mut writes: Vec<(u64, usize, usize)> = Vec::new();

    for o in log {
        match o {
            Observation::StreamOpDone { time, tags, .. } => {
                for t in tags {
                    triggered.insert((t.request, t.epoch, t.purpose), *time);
                }
            }
            Observation::EntryArmed { entry, .. } => *armed.entry(*entry).or_default() += 1,
            Observation::EntryFired { time, entry, tag } => {
                *fired.entry(*entry).or_default() += 1;
                fired_at.insert((tag.request, tag.epoch, tag.purpose), *time);
            }
            Observation::EntryExecuted { time, entry, tag } => {
                *done.entry(*entry).or_default() += 1;
                executed.insert((tag.request, tag.epoch, tag.purpose), *time);
            }
            Observation::CounterIncrement {
                rank,
                counter,
                old,
                new,
                ..
            } => {
                stats.increments += 1;
                let prev = last.insert((*rank, counter.0), *new).unwrap_or(0);
                if *old != prev || new < old {
                    return Err(format!("counter {} on rank {rank} went {prev} -> {old} -> {new}", counter.0));
                }
            }
            Observation::MemoryWrite { time, rank, base, len } => writes.push((*time, *rank, base + len)),
            Observation::EntryRetired { .. } => {}
        }
    }

    // (c) exactly-once firing and execution of every armed entry.
    for (id, n) in &armed {
        if *n != 1 || fired.get(id) != Some(&1) || done.get(id) != Some(&1) {
            return Err(format!(
                "entry {} armed {n}, fired {:?}, executed {:?}",
                id.0,
                fired.get(id),
                done.get(id)
            ));
        }
    }
    if fired.len() != armed.len() {
        return Err("an entry fired without being armed".into());
    }
    stats.entries = armed.len();

    for (&s, &r) in sends.iter().zip(recvs) {
        for e in 1..=epochs {
            let key = |req: RequestId, p: Purpose| (Some(req), e, p);
            let data_fire = fired_at[&key(s, Purpose::SendData)];
            let data_land = executed[&key(s, Purpose::SendData)];
            let gpu = triggered[&key(s, Purpose::SendData)];
            let cts = executed[&key(r, Purpose::Cts)];
            let recv_start = triggered[&key(r, Purpose::Cts)];
            // (a) the data write waits for both the local trigger and the CTS.
            if data_fire < gpu.max(cts) {
                return Err(format!(
                    "epoch {e}: data fired at {data_fire}, trigger {gpu}, cts {cts}"
                ));
            }
            // (b) no bytes land before the receiver's start op ran.
            if data_land < recv_start {
                return Err(format!("epoch {e}: data landed at {data_land} before start at {recv_start}"));
            }
            stats.data_writes += 1;
        }
        // Exactly-once completion per start, on both sides.
        for (id, rank) in [(s, 0), (r, 1)] {
            let res = w.mpi.request(id).unwrap().resources.unwrap();
            let v = w.mem[rank].read_u64(res.completion_slot().base);
            if v != epochs {
                return Err(format!("completion slot of request {} is {v}, expected {epochs}", id.0));
            }
        }
    }
    // (b) again, from raw memory writes: the j-th write into a receive buffer
    // follows the receiver's j-th start.
    for (i, buf) in rbufs.iter().enumerate() {
        let hits: Vec<u64> = writes
            .iter()
            .filter(|(_, rank, end)| *rank == 1 && *end == buf.end())
            .map(|(t, _, _)| *t)
            .collect();
        if hits.len() as u64 != epochs {
            return Err(format!("buffer {i} written {} times over {epochs} epochs", hits.len()));
        }
        for (e, t) in (1..).zip(hits) {
            let start = triggered[&(Some(recvs[i]), e, Purpose::Cts)];
            if t < start {
                return Err(format!("buffer {i} written at {t} before start {e} at {start}"));
            }
        }
    }
    Ok(stats)
}

/// Host helper used by several tests: a stream with a queue on it.
pub fn queue_on(h: &Host) -> (streamtrig::gpusim::StreamId, streamtrig::stqueue::QueueId) {
    let s = h.create_stream();
    (s, h.queue_init("cxi", s).unwrap())
}
