//! Host-side two-sided messaging: communicators, persistent requests, the
//! baseline eager/rendezvous transport and the permanent-pairing match engine.
//!
//! Tag matching is exact on `(comm, source, tag)` with posting-order FIFO
//! among identical signatures. Wildcards are not supported.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::nicsim::RemoteAddr;
use crate::simclock::Target;
use crate::stqueue::Resources;
use crate::world::{Buffer, Cond, Event, Host, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchRequestId(pub u64);

/// Bytes charged on the wire for one match offer (keys plus signature).
pub const OFFER_BYTES: usize = 64;

/// User tags live in `[0, TAG_UB)`; everything else is reserved.
pub const TAG_UB: i64 = 1 << 31;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Communicator {
    pub id: CommId,
    /// World rank of each communicator rank.
    pub ranks: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestKind {
    Send,
    Rsend,
    Recv,
}

impl RequestKind {
    pub fn is_send(self) -> bool {
        !matches!(self, RequestKind::Recv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RequestState {
    Inactive,
    MatchPending,
    Matched,
    Started,
    Complete,
}

#[derive(Debug)]
pub struct Request {
    pub id: RequestId,
    /// World rank that created the request.
    pub owner: usize,
    pub kind: RequestKind,
    pub persistent: bool,
    /// World rank of the peer.
    pub peer: usize,
    pub tag: i64,
    pub comm: CommId,
    pub buffer: Buffer,
    pub state: RequestState,
    /// Remote counterpart, fixed once matched.
    pub pair: Option<RequestId>,
    pub resources: Option<Resources>,
    /// Bytes delivered by the last completed receive.
    pub received: usize,
}

impl Request {
    pub fn is_matched(&self) -> bool {
        self.pair.is_some()
    }
}

/// What one side of a match tells the other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchOffer {
    pub from_req: RequestId,
    pub from_rank: usize,
    pub to_rank: usize,
    pub comm: CommId,
    pub tag: i64,
    pub kind: RequestKind,
    pub len: usize,
    /// Data region of a receive, or CTS region of a regular send.
    pub addr: Option<RemoteAddr>,
}

#[derive(Debug)]
enum Unexpected {
    Eager {
        src: usize,
        comm: CommId,
        tag: i64,
        bytes: Vec<u8>,
    },
    Rts {
        src: usize,
        comm: CommId,
        tag: i64,
        send: RequestId,
    },
}

impl Unexpected {
    fn signature(&self) -> (usize, CommId, i64) {
        match *self {
            Unexpected::Eager { src, comm, tag, .. } | Unexpected::Rts { src, comm, tag, .. } => {
                (src, comm, tag)
            }
        }
    }
}

#[derive(Debug, Default)]
struct RankMpi {
    posted: VecDeque<RequestId>,
    unexpected: VecDeque<Unexpected>,
    match_pending: VecDeque<RequestId>,
    offers: VecDeque<MatchOffer>,
}

#[derive(Debug)]
pub enum MpiEvent {
    EagerInjected {
        send: RequestId,
    },
    EagerArrive {
        src: usize,
        dst: usize,
        comm: CommId,
        tag: i64,
        bytes: Vec<u8>,
    },
    RtsArrive {
        send: RequestId,
    },
    CtsArrive {
        send: RequestId,
        recv: RequestId,
    },
    DataArrive {
        send: RequestId,
        recv: RequestId,
        bytes: Vec<u8>,
    },
    OfferArrive(MatchOffer),
}

impl MpiEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            MpiEvent::EagerInjected { .. } => "mpi.eager_injected",
            MpiEvent::EagerArrive { .. } => "mpi.eager_arrive",
            MpiEvent::RtsArrive { .. } => "mpi.rts",
            MpiEvent::CtsArrive { .. } => "mpi.cts",
            MpiEvent::DataArrive { .. } => "mpi.data",
            MpiEvent::OfferArrive(_) => "mpi.match_offer",
        }
    }
}

#[derive(Debug)]
pub struct Mpi {
    comms: Vec<Communicator>,
    ranks: Vec<RankMpi>,
    requests: BTreeMap<RequestId, Request>,
    next_req: u64,
    matches: Vec<Vec<RequestId>>,
}

impl Mpi {
    pub fn new(nranks: usize) -> Self {
        Self {
            comms: vec![Communicator {
                id: CommId(0),
                ranks: (0..nranks).collect(),
            }],
            ranks: (0..nranks).map(|_| RankMpi::default()).collect(),
            requests: BTreeMap::new(),
            next_req: 0,
            matches: Vec::new(),
        }
    }

    pub fn comm(&self, id: CommId) -> Option<&Communicator> {
        self.comms.get(id.0)
    }

    pub fn request(&self, id: RequestId) -> Option<&Request> {
        self.requests.get(&id)
    }

    pub(crate) fn request_mut(&mut self, id: RequestId) -> Result<&mut Request> {
        self.requests.get_mut(&id).ok_or(Error::UnknownRequest(id))
    }

    pub fn live_requests(&self) -> usize {
        self.requests.len()
    }

    /// True once the request is no longer in flight.
    pub fn is_complete(&self, id: RequestId) -> bool {
        self.requests
            .get(&id)
            .is_none_or(|r| !matches!(r.state, RequestState::Started | RequestState::MatchPending))
    }

    pub fn is_matched(&self, id: RequestId) -> bool {
        self.requests.get(&id).is_some_and(Request::is_matched)
    }

    pub fn match_done(&self, m: MatchRequestId) -> bool {
        self.matches[m.0 as usize].iter().all(|r| {
            self.requests
                .get(r)
                .is_none_or(|r| r.state != RequestState::MatchPending)
        })
    }
}

fn signature_matches(req: &Request, src: usize, comm: CommId, tag: i64) -> bool {
    req.peer == src && req.comm == comm && req.tag == tag
}

impl World {
    #[allow(clippy::too_many_arguments)]
    fn new_request(
        &mut self,
        owner: usize,
        kind: RequestKind,
        persistent: bool,
        buffer: Buffer,
        peer: usize,
        tag: i64,
        comm: CommId,
    ) -> Result<RequestId> {
        let communicator = self.mpi.comm(comm).ok_or(Error::Bench(format!("unknown communicator {}", comm.0)))?;
        let size = communicator.ranks.len();
        let peer = *communicator
            .ranks
            .get(peer)
            .ok_or(Error::InvalidPeer { peer, size })?;
        if !(0..TAG_UB).contains(&tag) {
            return Err(Error::ReservedTag(tag));
        }
        if buffer.rank != owner || !self.mem[owner].contains(buffer.base, buffer.len) {
            return Err(Error::InvalidRange {
                rank: owner,
                base: buffer.base,
                len: buffer.len,
            });
        }
        let id = RequestId(self.mpi.next_req);
        self.mpi.next_req += 1;
        self.mpi.requests.insert(
            id,
            Request {
                id,
                owner,
                kind,
                persistent,
                peer,
                tag,
                comm,
                buffer,
                state: RequestState::Inactive,
                pair: None,
                resources: None,
                received: 0,
            },
        );
        Ok(id)
    }

    fn owned(&self, owner: usize, id: RequestId) -> Result<&Request> {
        let r = self.mpi.request(id).ok_or(Error::UnknownRequest(id))?;
        if r.owner != owner {
            return Err(Error::ForeignRequest(id));
        }
        Ok(r)
    }

    /// Host-driven start of inactive requests on the baseline transport.
    pub fn start(&mut self, owner: usize, reqs: &[RequestId]) -> Result<()> {
        for &id in reqs {
            let r = self.owned(owner, id)?;
            match r.state {
                RequestState::Inactive | RequestState::Complete => {}
                RequestState::Started => return Err(Error::AlreadyStarted(id)),
                RequestState::MatchPending | RequestState::Matched => {
                    return Err(Error::AlreadyMatched(id))
                }
            }
        }
        for &id in reqs {
            self.begin_transfer(id)?;
        }
        Ok(())
    }

    fn begin_transfer(&mut self, id: RequestId) -> Result<()> {
        let r = self.mpi.request_mut(id)?;
        r.state = RequestState::Started;
        r.received = 0;
        let (kind, len, owner) = (r.kind, r.buffer.len, r.owner);
        if !kind.is_send() {
            return self.post_recv(owner, id);
        }
        let setup = self.cost.match_setup_ns;
        if self.cost.is_eager(len) {
            self.clock.schedule(
                setup,
                Target::Mpi(owner),
                Event::Mpi(MpiEvent::EagerInjected { send: id }),
            );
        } else {
            let peer = self.mpi.requests[&id].peer;
            self.clock.schedule(
                setup + self.cost.wire_latency_ns,
                Target::Mpi(peer),
                Event::Mpi(MpiEvent::RtsArrive { send: id }),
            );
        }
        Ok(())
    }

    fn post_recv(&mut self, rank: usize, id: RequestId) -> Result<()> {
        let req = &self.mpi.requests[&id];
        let pos = self.mpi.ranks[rank]
            .unexpected
            .iter()
            .position(|u| {
                let (src, comm, tag) = u.signature();
                signature_matches(req, src, comm, tag)
            });
        let Some(pos) = pos else {
            self.mpi.ranks[rank].posted.push_back(id);
            return Ok(());
        };
        match self.mpi.ranks[rank].unexpected.remove(pos).expect("found") {
            Unexpected::Eager { bytes, .. } => self.deliver(id, &bytes),
            Unexpected::Rts { send, .. } => self.send_cts(send, id),
        }
    }

    fn take_posted(&mut self, rank: usize, src: usize, comm: CommId, tag: i64) -> Option<RequestId> {
        let requests = &self.mpi.requests;
        let posted = &mut self.mpi.ranks[rank].posted;
        let pos = posted
            .iter()
            .position(|r| signature_matches(&requests[r], src, comm, tag))?;
        posted.remove(pos)
    }

    fn send_cts(&mut self, send: RequestId, recv: RequestId) -> Result<()> {
        let sent = self.mpi.requests[&send].buffer.len;
        let capacity = self.mpi.requests[&recv].buffer.len;
        if sent > capacity {
            return Err(Error::Truncated { sent, capacity });
        }
        let sender = self.mpi.requests[&send].owner;
        self.clock.schedule(
            self.cost.wire_latency_ns,
            Target::Mpi(sender),
            Event::Mpi(MpiEvent::CtsArrive { send, recv }),
        );
        Ok(())
    }

    fn deliver(&mut self, recv: RequestId, bytes: &[u8]) -> Result<()> {
        let r = self.mpi.request_mut(recv)?;
        if bytes.len() > r.buffer.len {
            return Err(Error::Truncated {
                sent: bytes.len(),
                capacity: r.buffer.len,
            });
        }
        r.state = RequestState::Complete;
        r.received = bytes.len();
        let dest = Buffer {
            len: bytes.len(),
            ..r.buffer
        };
        self.write(dest, bytes);
        Ok(())
    }

    fn complete(&mut self, id: RequestId) -> Result<()> {
        self.mpi.request_mut(id)?.state = RequestState::Complete;
        Ok(())
    }

    pub(crate) fn mpi_dispatch(&mut self, ev: MpiEvent) -> Result<()> {
        match ev {
            MpiEvent::EagerInjected { send } => {
                let r = &self.mpi.requests[&send];
                let (src, dst, comm, tag) = (r.owner, r.peer, r.comm, r.tag);
                let bytes = self.read(r.buffer).to_vec();
                let delay = self.cost.transfer_time(bytes.len());
                self.clock.schedule(
                    delay,
                    Target::Mpi(dst),
                    Event::Mpi(MpiEvent::EagerArrive {
                        src,
                        dst,
                        comm,
                        tag,
                        bytes,
                    }),
                );
                self.complete(send)
            }
            MpiEvent::EagerArrive {
                src,
                dst,
                comm,
                tag,
                bytes,
            } => match self.take_posted(dst, src, comm, tag) {
                Some(recv) => self.deliver(recv, &bytes),
                None => {
                    self.mpi.ranks[dst].unexpected.push_back(Unexpected::Eager {
                        src,
                        comm,
                        tag,
                        bytes,
                    });
                    Ok(())
                }
            },
            MpiEvent::RtsArrive { send } => {
                let r = &self.mpi.requests[&send];
                let (src, dst, comm, tag) = (r.owner, r.peer, r.comm, r.tag);
                match self.take_posted(dst, src, comm, tag) {
                    Some(recv) => self.send_cts(send, recv),
                    None => {
                        self.mpi.ranks[dst].unexpected.push_back(Unexpected::Rts {
                            src,
                            comm,
                            tag,
                            send,
                        });
                        Ok(())
                    }
                }
            }
            MpiEvent::CtsArrive { send, recv } => {
                let r = &self.mpi.requests[&send];
                let (dst, bytes) = (r.peer, self.read(r.buffer).to_vec());
                let delay = self.cost.transfer_time(bytes.len());
                self.clock.schedule(
                    delay,
                    Target::Mpi(dst),
                    Event::Mpi(MpiEvent::DataArrive { send, recv, bytes }),
                );
                Ok(())
            }
            MpiEvent::DataArrive { send, recv, bytes } => {
                self.deliver(recv, &bytes)?;
                self.complete(send)
            }
            MpiEvent::OfferArrive(offer) => self.accept_offer(offer),
        }
    }

    /// After a host wait: persistent requests go inactive, others are freed.
    fn retire_waited(&mut self, reqs: &[RequestId]) {
        for id in reqs {
            let Some(r) = self.mpi.requests.get_mut(id) else {
                continue;
            };
            if r.state != RequestState::Complete {
                continue;
            }
            if r.persistent {
                r.state = RequestState::Inactive;
            } else {
                self.mpi.requests.remove(id);
            }
        }
    }

    /// Starts matching. Validation is all-or-nothing.
    pub fn imatch_all(&mut self, owner: usize, reqs: &[RequestId]) -> Result<MatchRequestId> {
        for (i, &id) in reqs.iter().enumerate() {
            let r = self.owned(owner, id)?;
            if !r.persistent {
                return Err(Error::NotPersistent(id));
            }
            match r.state {
                RequestState::Inactive | RequestState::Complete => {}
                RequestState::Started => return Err(Error::RequestActive(id)),
                RequestState::MatchPending | RequestState::Matched => {
                    return Err(Error::AlreadyMatched(id))
                }
            }
            if r.pair.is_some() || reqs[..i].contains(&id) {
                return Err(Error::AlreadyMatched(id));
            }
        }
        for &id in reqs {
            let addr = self.st_prepare(id)?;
            let r = self.mpi.request_mut(id)?;
            r.state = RequestState::MatchPending;
            let offer = MatchOffer {
                from_req: id,
                from_rank: r.owner,
                to_rank: r.peer,
                comm: r.comm,
                tag: r.tag,
                kind: r.kind,
                len: r.buffer.len,
                addr,
            };
            let delay = self.cost.match_setup_ns + self.cost.transfer_time(OFFER_BYTES);
            self.clock.schedule(
                delay,
                Target::Mpi(offer.to_rank),
                Event::Mpi(MpiEvent::OfferArrive(offer)),
            );
            self.mpi.ranks[owner].match_pending.push_back(id);
            self.pair_from_stored_offers(owner, id)?;
        }
        self.mpi.matches.push(reqs.to_vec());
        Ok(MatchRequestId(self.mpi.matches.len() as u64 - 1))
    }

    fn offer_fits(req: &Request, offer: &MatchOffer) -> bool {
        req.kind.is_send() != offer.kind.is_send()
            && signature_matches(req, offer.from_rank, offer.comm, offer.tag)
    }

    fn pair_from_stored_offers(&mut self, rank: usize, id: RequestId) -> Result<()> {
        let req = &self.mpi.requests[&id];
        let stored = &self.mpi.ranks[rank].offers;
        if let Some(pos) = stored.iter().position(|o| Self::offer_fits(req, o)) {
            let offer = self.mpi.ranks[rank].offers.remove(pos).expect("found");
            self.bind(id, offer)?;
        }
        Ok(())
    }

    fn accept_offer(&mut self, offer: MatchOffer) -> Result<()> {
        let rank = offer.to_rank;
        let requests = &self.mpi.requests;
        let pending = &self.mpi.ranks[rank].match_pending;
        match pending
            .iter()
            .position(|r| Self::offer_fits(&requests[r], &offer))
        {
            Some(pos) => {
                let id = self.mpi.ranks[rank].match_pending.remove(pos).expect("found");
                self.bind(id, offer)
            }
            None => {
                self.mpi.ranks[rank].offers.push_back(offer);
                Ok(())
            }
        }
    }

    fn bind(&mut self, id: RequestId, offer: MatchOffer) -> Result<()> {
        let r = self.mpi.request_mut(id)?;
        let (sent, capacity) = if r.kind.is_send() {
            (r.buffer.len, offer.len)
        } else {
            (offer.len, r.buffer.len)
        };
        if sent > capacity {
            return Err(Error::Truncated { sent, capacity });
        }
        r.pair = Some(offer.from_req);
        r.state = RequestState::Matched;
        let owner = r.owner;
        self.mpi.ranks[owner].match_pending.retain(|q| *q != id);
        self.st_bind(id, &offer)
    }

    /// Frees an inactive request, releasing its pairing and NIC resources.
    pub fn request_free(&mut self, owner: usize, id: RequestId) -> Result<()> {
        let r = self.owned(owner, id)?;
        if matches!(r.state, RequestState::Started | RequestState::MatchPending) {
            return Err(Error::RequestActive(id));
        }
        self.st_release(id)?;
        self.mpi.ranks[owner].posted.retain(|q| *q != id);
        self.mpi.requests.remove(&id);
        Ok(())
    }
}

impl Host {
    pub fn comm_world(&self) -> CommId {
        CommId(0)
    }

    pub fn send_init(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId, ready: bool) -> Result<RequestId> {
        let kind = if ready {
            RequestKind::Rsend
        } else {
            RequestKind::Send
        };
        self.world
            .borrow_mut()
            .new_request(self.rank, kind, true, buf, peer, tag, comm)
    }

    pub fn recv_init(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId) -> Result<RequestId> {
        self.world
            .borrow_mut()
            .new_request(self.rank, RequestKind::Recv, true, buf, peer, tag, comm)
    }

    pub fn isend(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId) -> Result<RequestId> {
        let mut w = self.world.borrow_mut();
        let id = w.new_request(self.rank, RequestKind::Send, false, buf, peer, tag, comm)?;
        w.begin_transfer(id)?;
        Ok(id)
    }

    pub fn irecv(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId) -> Result<RequestId> {
        let mut w = self.world.borrow_mut();
        let id = w.new_request(self.rank, RequestKind::Recv, false, buf, peer, tag, comm)?;
        w.begin_transfer(id)?;
        Ok(id)
    }

    pub fn start(&self, reqs: &[RequestId]) -> Result<()> {
        self.world.borrow_mut().start(self.rank, reqs)
    }

    pub async fn wait_all(&self, reqs: &[RequestId]) -> Result<()> {
        for &id in reqs {
            self.world.borrow().owned(self.rank, id)?;
        }
        self.block(Cond::Requests(reqs.to_vec())).await;
        self.world.borrow_mut().retire_waited(reqs);
        Ok(())
    }

    pub async fn blocking_send(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId) -> Result<()> {
        let id = self.isend(buf, peer, tag, comm)?;
        self.wait_all(&[id]).await
    }

    /// Returns the number of bytes received.
    pub async fn blocking_recv(&self, buf: Buffer, peer: usize, tag: i64, comm: CommId) -> Result<usize> {
        let id = self.irecv(buf, peer, tag, comm)?;
        self.block(Cond::Requests(vec![id])).await;
        let n = self.world.borrow().mpi.request(id).map_or(0, |r| r.received);
        self.world.borrow_mut().retire_waited(&[id]);
        Ok(n)
    }

    pub fn imatch_all(&self, reqs: &[RequestId]) -> Result<MatchRequestId> {
        self.world.borrow_mut().imatch_all(self.rank, reqs)
    }

    pub async fn wait_match(&self, m: MatchRequestId) {
        self.block(Cond::Matched(m)).await
    }

    /// Blocks until every request is permanently paired.
    pub async fn match_all(&self, reqs: &[RequestId]) -> Result<()> {
        let m = self.imatch_all(reqs)?;
        self.wait_match(m).await;
        Ok(())
    }

    pub fn is_matched(&self, id: RequestId) -> bool {
        self.world.borrow().mpi.is_matched(id)
    }

    pub fn request_free(&self, id: RequestId) -> Result<()> {
        self.world.borrow_mut().request_free(self.rank, id)
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;
    use std::rc::Rc;

    use super::*;
    use crate::costmodel::CostModel;
    use crate::world::cluster;

    #[test]
    fn eager_send_completes_without_receiver() {
        let cm = CostModel::default();
        let (mut sim, hosts) = cluster(2, cm.clone());
        let h = hosts[0].clone();
        let done = Rc::new(RefCell::new(0));
        let d = done.clone();
        sim.spawn(0, async move {
            let buf = h.alloc(8);
            h.write(buf, &[1; 8]);
            h.blocking_send(buf, 1, 0, h.comm_world()).await?;
            *d.borrow_mut() = h.now();
            Ok(())
        });
        let out = sim.run_until_quiescent().unwrap();
        assert!(out.is_completed());
        assert_eq!(*done.borrow(), cm.match_setup_ns);
    }

    #[test]
    fn late_receive_takes_from_unexpected_queue() {
        let (mut sim, hosts) = cluster(2, CostModel::default());
        let (a, b) = (hosts[0].clone(), hosts[1].clone());
        sim.spawn(0, async move {
            let buf = a.alloc(8);
            a.write(buf, b"abcdefgh");
            a.blocking_send(buf, 1, 3, a.comm_world()).await
        });
        sim.spawn(1, async move {
            b.sleep(1_000_000).await;
            let buf = b.alloc(16);
            let n = b.blocking_recv(buf, 0, 3, b.comm_world()).await?;
            assert_eq!(n, 8);
            assert_eq!(&b.read(buf)[..8], b"abcdefgh");
            assert_eq!(b.now(), 1_000_000);
            Ok(())
        });
        assert!(sim.run_until_quiescent().unwrap().is_completed());
    }

    #[test]
    fn rendezvous_sender_waits_for_cts_round_trip() {
        let cm = CostModel::default();
        let len = 1 << 20;
        let (mut sim, hosts) = cluster(2, cm.clone());
        let (a, b) = (hosts[0].clone(), hosts[1].clone());
        let times = Rc::new(RefCell::new((0, 0)));
        let (ta, tb) = (times.clone(), times.clone());
        sim.spawn(0, async move {
            let buf = a.alloc(len);
            a.write(buf, &vec![9; len]);
            a.blocking_send(buf, 1, 0, a.comm_world()).await?;
            ta.borrow_mut().0 = a.now();
            Ok(())
        });
        sim.spawn(1, async move {
            b.sleep(50_000).await;
            let buf = b.alloc(len);
            b.blocking_recv(buf, 0, 0, b.comm_world()).await?;
            assert!(b.read(buf).iter().all(|&x| x == 9));
            tb.borrow_mut().1 = b.now();
            Ok(())
        });
        assert!(sim.run_until_quiescent().unwrap().is_completed());
        // RTS waits in the unexpected queue until the receive is posted.
        let expect = 50_000 + cm.wire_latency_ns + cm.transfer_time(len);
        assert_eq!(*times.borrow(), (expect, expect));

        let (mut sim, hosts) = cluster(2, cm.clone());
        let (a, b) = (hosts[0].clone(), hosts[1].clone());
        let t = Rc::new(RefCell::new(0));
        let t2 = t.clone();
        sim.spawn(0, async move {
            let buf = a.alloc(len);
            a.blocking_send(buf, 1, 0, a.comm_world()).await?;
            *t2.borrow_mut() = a.now();
            Ok(())
        });
        sim.spawn(1, async move {
            let buf = b.alloc(len);
            b.blocking_recv(buf, 0, 0, b.comm_world()).await.map(|_| ())
        });
        sim.run_until_quiescent().unwrap();
        assert_eq!(*t.borrow(), cm.baseline_send_path(len));
    }

    #[test]
    fn invalid_peer_and_reserved_tags_are_rejected() {
        let (_sim, hosts) = cluster(2, CostModel::default());
        let h = &hosts[0];
        let buf = h.alloc(8);
        let c = h.comm_world();
        assert!(matches!(h.send_init(buf, 2, 0, c, false), Err(Error::InvalidPeer { .. })));
        assert!(matches!(h.recv_init(buf, 1, -1, c), Err(Error::ReservedTag(-1))));
        assert!(h.recv_init(h.alloc(0), 1, 0, c).is_ok());
        let rs = h.send_init(buf, 1, 0, c, true).unwrap();
        assert_eq!(h.world().borrow().mpi.request(rs).unwrap().kind, RequestKind::Rsend);
    }

    #[test]
    fn persistent_baseline_requests_restart() {
        let (mut sim, hosts) = cluster(2, CostModel::default());
        let (a, b) = (hosts[0].clone(), hosts[1].clone());
        sim.spawn(0, async move {
            let buf = a.alloc(4);
            let s = a.send_init(buf, 1, 5, a.comm_world(), false)?;
            for i in 0..3u8 {
                a.write(buf, &[i; 4]);
                a.start(&[s])?;
                assert!(matches!(a.start(&[s]), Err(Error::AlreadyStarted(_))));
                a.wait_all(&[s]).await?;
            }
            Ok(())
        });
        sim.spawn(1, async move {
            let buf = b.alloc(4);
            let r = b.recv_init(buf, 0, 5, b.comm_world())?;
            for i in 0..3u8 {
                b.start(&[r])?;
                b.wait_all(&[r]).await?;
                assert_eq!(b.read(buf), vec![i; 4]);
            }
            Ok(())
        });
        assert!(sim.run_until_quiescent().unwrap().is_completed());
    }
}
