//! The simulated machine: per-rank memory, NICs, GPU streams, the MPI layer
//! and stream-triggered queues, all driven by one [`EventQueue`].

use std::fmt;

use crate::costmodel::CostModel;
use crate::error::{Error, Result};
use crate::gpusim::{Gpu, GpuEvent, StreamId};
use crate::mpicore::{MatchRequestId, Mpi, MpiEvent, RequestId};
use crate::nicsim::{Nic, NicEvent};
use crate::observe::Observer;
use crate::simclock::{self, EventKind, EventQueue, Nanos, Shared, Simulation, Target};
use crate::stqueue::{QueueId, Queues};

/// Byte-addressed memory owned by one rank. Buffers, completion slots and
/// kernel working sets all live here.
#[derive(Debug, Default)]
pub struct RankMemory {
    bytes: Vec<u8>,
}

/// A contiguous byte range of one rank's memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Buffer {
    pub rank: usize,
    pub base: usize,
    pub len: usize,
}

impl Buffer {
    pub fn end(&self) -> usize {
        self.base + self.len
    }
}

impl RankMemory {
    /// Bump-allocates `len` zeroed bytes, 8-byte aligned.
    pub fn alloc(&mut self, len: usize) -> usize {
        let base = self.bytes.len().next_multiple_of(8);
        self.bytes.resize(base + len, 0);
        base
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn contains(&self, base: usize, len: usize) -> bool {
        base.checked_add(len).is_some_and(|end| end <= self.bytes.len())
    }

    pub fn slice(&self, base: usize, len: usize) -> &[u8] {
        &self.bytes[base..base + len]
    }

    pub fn slice_mut(&mut self, base: usize, len: usize) -> &mut [u8] {
        &mut self.bytes[base..base + len]
    }

    pub fn read_u64(&self, addr: usize) -> u64 {
        u64::from_le_bytes(self.bytes[addr..addr + 8].try_into().unwrap())
    }

    /// `memmove` within this memory.
    pub fn copy_within(&mut self, from: usize, to: usize, len: usize) {
        self.bytes.copy_within(from..from + len, to);
    }

    pub fn write_u64(&mut self, addr: usize, v: u64) {
        self.bytes[addr..addr + 8].copy_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug)]
pub enum Event {
    Nic(NicEvent),
    Gpu(GpuEvent),
    Mpi(MpiEvent),
}

impl EventKind for Event {
    fn kind(&self) -> &'static str {
        match self {
            Event::Nic(e) => e.kind(),
            Event::Gpu(e) => e.kind(),
            Event::Mpi(e) => e.kind(),
        }
    }
}

/// Conditions a host task can block on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Cond {
    StreamIdle(StreamId),
    DwqSlot(usize),
    Requests(Vec<RequestId>),
    Matched(MatchRequestId),
    QueueDrained(QueueId),
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cond::StreamIdle(s) => write!(f, "stream_synchronize(stream {})", s.0),
            Cond::DwqSlot(r) => write!(f, "free DWQ entry on rank {r}"),
            Cond::Requests(reqs) => {
                let ids: Vec<String> = reqs.iter().map(|r| r.0.to_string()).collect();
                write!(f, "wait(requests {})", ids.join(","))
            }
            Cond::Matched(m) => write!(f, "match(match request {})", m.0),
            Cond::QueueDrained(q) => write!(f, "queue_wait(queue {})", q.0),
        }
    }
}

pub struct World {
    pub clock: EventQueue<Event, Cond>,
    pub cost: CostModel,
    pub mem: Vec<RankMemory>,
    pub nic: Nic,
    pub gpu: Gpu,
    pub mpi: Mpi,
    pub stq: Queues,
    pub obs: Observer,
}

impl World {
    pub fn new(nranks: usize, cost: CostModel) -> Self {
        let pool = cost.dwq_pool_capacity;
        Self {
            clock: EventQueue::new(),
            cost,
            mem: (0..nranks).map(|_| RankMemory::default()).collect(),
            nic: Nic::new(nranks, pool),
            gpu: Gpu::default(),
            mpi: Mpi::new(nranks),
            stq: Queues::default(),
            obs: Observer::default(),
        }
    }

    pub fn nranks(&self) -> usize {
        self.mem.len()
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    pub fn check_rank(&self, rank: usize) -> Result<()> {
        if rank < self.nranks() {
            Ok(())
        } else {
            Err(Error::UnknownRank(rank))
        }
    }

    pub fn alloc(&mut self, rank: usize, len: usize) -> Result<Buffer> {
        self.check_rank(rank)?;
        let base = self.mem[rank].alloc(len);
        Ok(Buffer { rank, base, len })
    }

    pub fn read(&self, buf: Buffer) -> &[u8] {
        self.mem[buf.rank].slice(buf.base, buf.len)
    }

    pub fn write(&mut self, buf: Buffer, data: &[u8]) {
        assert_eq!(data.len(), buf.len, "write length mismatch");
        self.mem[buf.rank]
            .slice_mut(buf.base, buf.len)
            .copy_from_slice(data);
    }
}

impl simclock::World for World {
    type Event = Event;
    type Cond = Cond;

    fn clock(&self) -> &EventQueue<Event, Cond> {
        &self.clock
    }

    fn clock_mut(&mut self) -> &mut EventQueue<Event, Cond> {
        &mut self.clock
    }

    fn dispatch(&mut self, target: Target, event: Event) -> Result<()> {
        match event {
            Event::Nic(e) => self.nic_dispatch(e),
            Event::Gpu(e) => match target {
                Target::Gpu(s) => self.gpu_dispatch(StreamId(s), e),
                other => Err(Error::Fault(format!("gpu event sent to {other}"))),
            },
            Event::Mpi(e) => self.mpi_dispatch(e),
        }
    }

    fn holds(&self, cond: &Cond) -> bool {
        match cond {
            Cond::StreamIdle(s) => self.gpu.is_idle(*s),
            Cond::DwqSlot(rank) => self.nic.has_free_entry(*rank),
            Cond::Requests(reqs) => reqs.iter().all(|r| self.mpi.is_complete(*r)),
            Cond::Matched(m) => self.mpi.match_done(*m),
            Cond::QueueDrained(q) => self.queue_drained(*q),
        }
    }

    fn unfired_work(&self) -> Vec<String> {
        self.nic
            .unfired_entries()
            .into_iter()
            .map(|u| u.to_string())
            .collect()
    }
}

/// Host-side view of one rank. Cloned freely into that rank's program.
#[derive(Clone)]
pub struct Host {
    pub(crate) world: Shared<World>,
    pub(crate) rank: usize,
}

impl Host {
    pub fn new(world: &Shared<World>, rank: usize) -> Self {
        Self {
            world: world.clone(),
            rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.world.borrow().nranks()
    }

    pub fn now(&self) -> Nanos {
        self.world.borrow().now()
    }

    pub fn cost(&self) -> CostModel {
        self.world.borrow().cost.clone()
    }

    pub fn world(&self) -> &Shared<World> {
        &self.world
    }

    pub async fn sleep(&self, ns: Nanos) {
        simclock::sleep(&self.world, ns).await
    }

    pub(crate) async fn block(&self, cond: Cond) {
        simclock::block_on(&self.world, cond).await
    }

    pub fn alloc(&self, len: usize) -> Buffer {
        self.world
            .borrow_mut()
            .alloc(self.rank, len)
            .expect("host rank exists")
    }

    pub fn write(&self, buf: Buffer, data: &[u8]) {
        self.world.borrow_mut().write(buf, data)
    }

    pub fn read(&self, buf: Buffer) -> Vec<u8> {
        self.world.borrow().read(buf).to_vec()
    }
}

/// A simulation of `nranks` ranks plus one host handle per rank.
pub fn cluster(nranks: usize, cost: CostModel) -> (Simulation<World>, Vec<Host>) {
    let sim = Simulation::new(World::new(nranks, cost));
    let hosts = (0..nranks).map(|r| Host::new(sim.world(), r)).collect();
    (sim, hosts)
}
