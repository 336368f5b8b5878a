//! Stream-triggered queues.
//!
//! A queue binds matched persistent requests to a GPU stream. Starting a
//! request arms NIC deferred work and enqueues a counter write on the stream.
//! Waiting enqueues a poll on completion slots. The host only arms work; the
//! per-message path runs between the GPU and the NIC.
//!
//! Regular sends gate their data write at `2 * epoch` on a private counter
//! that also counts CTS atomics from the receiver, so the write fires only
//! once both the local stream and the remote receive have reached the start.
//! Ready sends and receive-side CTS releases share one counter per queue,
//! gated at the queue's shared epoch.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::gpusim::{OpHandle, StreamId, StreamOp};
use crate::mpicore::{MatchOffer, RequestId, RequestKind, RequestState};
use crate::nicsim::{CounterId, DeferredWorkEntry, MemoryRegion, RemoteAddr, WorkKind};
use crate::observe::{Purpose, WorkTag};
use crate::world::{Cond, Host, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueueId(pub usize);

/// Backend of a queue. Only the triggered-operation NIC is implemented.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueKind {
    Cxi,
}

impl std::str::FromStr for QueueKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cxi" => Ok(QueueKind::Cxi),
            other => Err(Error::UnknownQueueKind(other.to_string())),
        }
    }
}

/// Most deferred entries a single send or receive may consume per start.
pub const MAX_ENTRIES_PER_OP: usize = 2;

#[derive(Debug)]
pub struct StQueue {
    pub id: QueueId,
    pub rank: usize,
    pub kind: QueueKind,
    pub stream: StreamId,
    /// Started on this queue, poll not yet complete.
    pub outstanding: BTreeSet<RequestId>,
    pub shared_counter: CounterId,
    pub shared_epoch: u64,
    freed: bool,
}

/// Start/wait bookkeeping of one persistent request.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Epochs {
    pub start_epoch: u64,
    pub waited: u64,
    pub completed: u64,
    pub queue: Option<QueueId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SendResources {
    /// Private trigger counter of a regular send; ready sends use the
    /// queue's shared counter.
    pub trigger_counter: Option<CounterId>,
    pub write_completion_counter: CounterId,
    pub completion_slot: MemoryRegion,
    /// Counted by `trigger_counter`. Regular sends only.
    pub cts_region: Option<MemoryRegion>,
    /// Data region of the matched receive.
    pub dest: Option<RemoteAddr>,
    pub epochs: Epochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecvResources {
    pub data_region: MemoryRegion,
    pub completion_slot: MemoryRegion,
    /// CTS region of the matched regular send.
    pub peer_cts_slot: Option<RemoteAddr>,
    pub epochs: Epochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resources {
    Send(SendResources),
    Recv(RecvResources),
}

impl Resources {
    pub fn epochs(&self) -> &Epochs {
        match self {
            Resources::Send(s) => &s.epochs,
            Resources::Recv(r) => &r.epochs,
        }
    }

    fn epochs_mut(&mut self) -> &mut Epochs {
        match self {
            Resources::Send(s) => &mut s.epochs,
            Resources::Recv(r) => &mut r.epochs,
        }
    }

    pub fn completion_slot(&self) -> MemoryRegion {
        match self {
            Resources::Send(s) => s.completion_slot,
            Resources::Recv(r) => r.completion_slot,
        }
    }
}

#[derive(Debug, Default)]
pub struct Queues {
    queues: Vec<StQueue>,
    polls: BTreeMap<OpHandle, Vec<RequestId>>,
}

impl Queues {
    pub fn get(&self, q: QueueId) -> Option<&StQueue> {
        self.queues.get(q.0).filter(|q| !q.freed)
    }

    fn get_mut(&mut self, q: QueueId) -> Result<&mut StQueue> {
        self.queues
            .get_mut(q.0)
            .filter(|q| !q.freed)
            .ok_or(Error::UnknownQueue(q))
    }
}

impl World {
    pub fn queue_init(&mut self, rank: usize, kind: &str, stream: StreamId) -> Result<QueueId> {
        let kind: QueueKind = kind.parse()?;
        match self.gpu.rank_of(stream) {
            Some(r) if r == rank => {}
            _ => return Err(Error::UnknownStream(stream.0)),
        }
        let shared_counter = self.alloc_counter(rank)?;
        let id = QueueId(self.stq.queues.len());
        self.stq.queues.push(StQueue {
            id,
            rank,
            kind,
            stream,
            outstanding: BTreeSet::new(),
            shared_counter,
            shared_epoch: 0,
            freed: false,
        });
        Ok(id)
    }

    pub fn queue_free(&mut self, rank: usize, q: QueueId) -> Result<()> {
        let queue = self.stq.get_mut(q)?;
        if queue.rank != rank {
            return Err(Error::UnknownQueue(q));
        }
        if !queue.outstanding.is_empty() {
            return Err(Error::QueueBusy(q));
        }
        queue.freed = true;
        let counter = queue.shared_counter;
        self.free_counter(rank, counter)
    }

    pub fn queue_drained(&self, q: QueueId) -> bool {
        self.stq
            .queues
            .get(q.0)
            .is_none_or(|queue| queue.outstanding.is_empty() && self.gpu.is_idle(queue.stream))
    }

    /// Allocates the local half of a request's NIC resources before matching.
    /// Returns the address the peer needs.
    pub(crate) fn st_prepare(&mut self, id: RequestId) -> Result<Option<RemoteAddr>> {
        let r = self.mpi.request(id).ok_or(Error::UnknownRequest(id))?;
        let (rank, kind, buffer) = (r.owner, r.kind, r.buffer);
        if r.resources.is_some() {
            return Err(Error::AlreadyMatched(id));
        }
        let slot = self.alloc(rank, 8)?;
        let completion_slot = self.register_region(rank, slot.base, 8, false)?;
        let (res, addr) = match kind {
            RequestKind::Recv => {
                let data_region = self.register_region(rank, buffer.base, buffer.len, true)?;
                let res = Resources::Recv(RecvResources {
                    data_region,
                    completion_slot,
                    peer_cts_slot: None,
                    epochs: Epochs::default(),
                });
                (res, Some(data_region.addr(0)))
            }
            RequestKind::Send | RequestKind::Rsend => {
                let write_completion_counter = self.alloc_counter(rank)?;
                let (trigger_counter, cts_region) = if kind == RequestKind::Send {
                    let t = self.alloc_counter(rank)?;
                    let cts = self.alloc(rank, 8)?;
                    (Some(t), Some(self.register_region_counted_by(rank, cts.base, 8, Some(t))?))
                } else {
                    (None, None)
                };
                let res = Resources::Send(SendResources {
                    trigger_counter,
                    write_completion_counter,
                    completion_slot,
                    cts_region,
                    dest: None,
                    epochs: Epochs::default(),
                });
                (res, cts_region.map(|c| c.addr(0)))
            }
        };
        self.mpi.request_mut(id)?.resources = Some(res);
        Ok(addr)
    }

    /// Records the peer's addresses once pairing is fixed.
    pub(crate) fn st_bind(&mut self, id: RequestId, offer: &MatchOffer) -> Result<()> {
        match self.mpi.request_mut(id)?.resources.as_mut() {
            Some(Resources::Send(s)) => s.dest = offer.addr,
            Some(Resources::Recv(r)) => {
                r.peer_cts_slot = if offer.kind == RequestKind::Send {
                    offer.addr
                } else {
                    None
                }
            }
            None => {}
        }
        Ok(())
    }

    pub(crate) fn st_release(&mut self, id: RequestId) -> Result<()> {
        let r = self.mpi.request(id).ok_or(Error::UnknownRequest(id))?;
        let rank = r.owner;
        let Some(res) = r.resources else {
            return Ok(());
        };
        if res.epochs().completed != res.epochs().start_epoch {
            return Err(Error::RequestActive(id));
        }
        self.deregister_region(rank, res.completion_slot().key)?;
        match res {
            Resources::Send(s) => {
                self.free_counter(rank, s.write_completion_counter)?;
                if let Some(c) = s.cts_region {
                    self.deregister_region(rank, c.key)?;
                }
                if let Some(t) = s.trigger_counter {
                    self.free_counter(rank, t)?;
                }
            }
            Resources::Recv(r) => {
                let counter = r.data_region.remote_write_counter;
                self.deregister_region(rank, r.data_region.key)?;
                if let Some(c) = counter {
                    self.free_counter(rank, c)?;
                }
            }
        }
        Ok(())
    }

    fn check_startable(&self, rank: usize, q: QueueId, reqs: &[RequestId]) -> Result<()> {
        let queue = self.stq.get(q).ok_or(Error::UnknownQueue(q))?;
        if queue.rank != rank {
            return Err(Error::UnknownQueue(q));
        }
        for (i, &id) in reqs.iter().enumerate() {
            let r = self.mpi.request(id).ok_or(Error::UnknownRequest(id))?;
            if r.owner != rank {
                return Err(Error::ForeignRequest(id));
            }
            if !r.persistent {
                return Err(Error::NotPersistent(id));
            }
            let Some(res) = r.resources.filter(|_| r.is_matched()) else {
                return Err(Error::NotMatched(id));
            };
            let e = res.epochs();
            if e.start_epoch != e.waited || reqs[..i].contains(&id) {
                return Err(Error::AlreadyStarted(id));
            }
        }
        Ok(())
    }

    /// Validates and commits a start. Returns the deferred entries to arm and
    /// the stream writes to enqueue after them, in order.
    fn plan_start(
        &mut self,
        rank: usize,
        q: QueueId,
        reqs: &[RequestId],
    ) -> Result<(Vec<DeferredWorkEntry>, Vec<StreamOp>)> {
        self.check_startable(rank, q, reqs)?;
        let needs_shared = reqs.iter().any(|id| match self.mpi.request(*id).and_then(|r| r.resources) {
            Some(Resources::Send(s)) => s.trigger_counter.is_none(),
            Some(Resources::Recv(r)) => r.peer_cts_slot.is_some(),
            None => false,
        });
        let queue = self.stq.get_mut(q)?;
        if needs_shared {
            queue.shared_epoch += 1;
        }
        let (shared, shared_epoch) = (queue.shared_counter, queue.shared_epoch);

        let mut entries = Vec::new();
        let mut shared_tags = Vec::new();
        let mut private_writes = Vec::new();
        for &id in reqs {
            let r = self.mpi.request_mut(id)?;
            r.state = RequestState::Started;
            let buffer = r.buffer;
            let res = r.resources.as_mut().expect("validated");
            let e = res.epochs_mut();
            e.start_epoch += 1;
            e.queue = Some(q);
            let epoch = e.start_epoch;
            let before = entries.len();
            match *res {
                Resources::Send(s) => {
                    let (counter, threshold) = match s.trigger_counter {
                        Some(t) => (t, 2 * epoch),
                        None => (shared, shared_epoch),
                    };
                    let data_tag = WorkTag::new(Purpose::SendData, id, epoch);
                    entries.push(DeferredWorkEntry {
                        kind: WorkKind::RemoteWrite {
                            src_base: buffer.base,
                            len: buffer.len,
                            dest: s.dest.expect("matched send knows its target"),
                        },
                        counter,
                        threshold,
                        completion_counter: Some(s.write_completion_counter),
                        tag: data_tag,
                    });
                    entries.push(DeferredWorkEntry {
                        kind: WorkKind::Atomic {
                            dest: s.completion_slot.addr(0),
                            add: 1,
                        },
                        counter: s.write_completion_counter,
                        threshold: epoch,
                        completion_counter: None,
                        tag: WorkTag::new(Purpose::SendCompletion, id, epoch),
                    });
                    match s.trigger_counter {
                        Some(t) => private_writes.push(StreamOp::WriteValue {
                            counter: t,
                            amount: 1,
                            tags: vec![data_tag],
                        }),
                        None => shared_tags.push(data_tag),
                    }
                }
                Resources::Recv(rr) => {
                    entries.push(DeferredWorkEntry {
                        kind: WorkKind::Atomic {
                            dest: rr.completion_slot.addr(0),
                            add: 1,
                        },
                        counter: rr.data_region.remote_write_counter.expect("counted region"),
                        threshold: epoch,
                        completion_counter: None,
                        tag: WorkTag::new(Purpose::RecvCompletion, id, epoch),
                    });
                    if let Some(cts) = rr.peer_cts_slot {
                        let tag = WorkTag::new(Purpose::Cts, id, epoch);
                        entries.push(DeferredWorkEntry {
                            kind: WorkKind::Atomic { dest: cts, add: 1 },
                            counter: shared,
                            threshold: shared_epoch,
                            completion_counter: None,
                            tag,
                        });
                        shared_tags.push(tag);
                    }
                }
            }
            assert!(entries.len() - before <= MAX_ENTRIES_PER_OP);
            self.stq.get_mut(q)?.outstanding.insert(id);
        }

        let mut ops = Vec::new();
        if needs_shared {
            ops.push(StreamOp::WriteValue {
                counter: shared,
                amount: 1,
                tags: shared_tags,
            });
        }
        ops.extend(private_writes);
        Ok((entries, ops))
    }

    /// Enqueues one poll covering `reqs`, or every request started on the
    /// queue and not yet waited when `reqs` is `None`.
    pub fn enqueue_wait_all(
        &mut self,
        rank: usize,
        q: QueueId,
        reqs: Option<&[RequestId]>,
    ) -> Result<Option<OpHandle>> {
        let queue = self.stq.get(q).ok_or(Error::UnknownQueue(q))?;
        if queue.rank != rank {
            return Err(Error::UnknownQueue(q));
        }
        let stream = queue.stream;
        let reqs: Vec<RequestId> = match reqs {
            Some(r) => r.to_vec(),
            None => queue
                .outstanding
                .iter()
                .copied()
                .filter(|id| {
                    self.mpi
                        .request(*id)
                        .and_then(|r| r.resources)
                        .is_some_and(|res| res.epochs().start_epoch > res.epochs().waited)
                })
                .collect(),
        };
        for (i, &id) in reqs.iter().enumerate() {
            let r = self.mpi.request(id).ok_or(Error::UnknownRequest(id))?;
            if r.owner != rank {
                return Err(Error::ForeignRequest(id));
            }
            let Some(res) = r.resources else {
                return Err(Error::NotStarted(id));
            };
            let e = res.epochs();
            if e.start_epoch != e.waited + 1 || reqs[..i].contains(&id) {
                return Err(Error::NotStarted(id));
            }
            if e.queue != Some(q) {
                return Err(Error::WrongQueue {
                    req: id,
                    started_on: e.queue.expect("started"),
                    waited_on: q,
                });
            }
        }
        if reqs.is_empty() {
            return Ok(None);
        }
        let mut slots = Vec::with_capacity(reqs.len());
        for &id in &reqs {
            let res = self.mpi.request_mut(id)?.resources.as_mut().expect("validated");
            let e = res.epochs_mut();
            e.waited += 1;
            let target = e.start_epoch;
            slots.push((res.completion_slot().base, target));
        }
        let handle = self.stream_enqueue(stream, StreamOp::PollValue { slots })?;
        self.stq.polls.insert(handle, reqs);
        Ok(Some(handle))
    }

    /// Stream hook: a completed poll retires its requests from their queue.
    pub(crate) fn stq_op_done(&mut self, op: OpHandle) {
        let Some(reqs) = self.stq.polls.remove(&op) else {
            return;
        };
        for id in reqs {
            let Ok(r) = self.mpi.request_mut(id) else {
                continue;
            };
            let res = r.resources.as_mut().expect("waited request has resources");
            let e = res.epochs_mut();
            e.completed += 1;
            let (caught_up, queue) = (e.completed == e.start_epoch, e.queue);
            if caught_up {
                r.state = RequestState::Matched;
                if let Some(q) = queue {
                    self.stq.queues[q.0].outstanding.remove(&id);
                }
            }
        }
    }
}

impl Host {
    pub fn queue_init(&self, kind: &str, stream: StreamId) -> Result<QueueId> {
        self.world.borrow_mut().queue_init(self.rank, kind, stream)
    }

    pub fn queue_free(&self, q: QueueId) -> Result<()> {
        self.world.borrow_mut().queue_free(self.rank, q)
    }

    /// Arms every request's deferred work, then enqueues the trigger writes.
    /// Nothing is armed or enqueued if any request is rejected. Blocks while
    /// the deferred work pool is full.
    pub async fn enqueue_start_all(&self, q: QueueId, reqs: &[RequestId]) -> Result<()> {
        let (entries, ops) = self.world.borrow_mut().plan_start(self.rank, q, reqs)?;
        for entry in entries {
            self.post_deferred(entry).await?;
        }
        let stream = self.world.borrow().stq.get(q).ok_or(Error::UnknownQueue(q))?.stream;
        for op in ops {
            self.stream_enqueue(stream, op)?;
        }
        Ok(())
    }

    pub fn enqueue_wait_all(&self, q: QueueId, reqs: &[RequestId]) -> Result<Option<OpHandle>> {
        self.world.borrow_mut().enqueue_wait_all(self.rank, q, Some(reqs))
    }

    pub fn enqueue_wait_outstanding(&self, q: QueueId) -> Result<Option<OpHandle>> {
        self.world.borrow_mut().enqueue_wait_all(self.rank, q, None)
    }

    /// Blocks until the queue's stream has drained and no request is
    /// outstanding, then pays a stream barrier.
    pub async fn queue_wait(&self, q: QueueId) {
        self.block(Cond::QueueDrained(q)).await;
        let barrier = self.world.borrow().cost.gpu_barrier_ns;
        self.sleep(barrier).await;
    }
}
