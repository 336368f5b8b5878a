//! 8-point periodic halo exchange of width 1 on a Cartesian rank grid.
//!
//! Each rank stores its block with a one-cell ghost ring, row-major, one byte
//! per cell: `(h + 2) x (w + 2)` bytes. A message toward direction `d` carries
//! the owned cells on side `d` and lands in the neighbor's ghost cells on side
//! `-d`. Send tags are `offset + d`, so every direction is distinct even when
//! one neighbor sits on several sides.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::gpusim::StreamId;
use crate::mpicore::RequestId;
use crate::stqueue::QueueId;
use crate::world::{Buffer, Host};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Direction {
    pub dr: isize,
    pub dc: isize,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction { dr: -1, dc: 0 },
        Direction { dr: 1, dc: 0 },
        Direction { dr: 0, dc: -1 },
        Direction { dr: 0, dc: 1 },
        Direction { dr: -1, dc: -1 },
        Direction { dr: -1, dc: 1 },
        Direction { dr: 1, dc: -1 },
        Direction { dr: 1, dc: 1 },
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|d| *d == self).expect("unit direction")
    }

    pub fn opposite(self) -> Direction {
        Direction {
            dr: -self.dr,
            dc: -self.dc,
        }
    }

    pub fn is_corner(self) -> bool {
        self.dr != 0 && self.dc != 0
    }
}

/// A `(from, to, len)` byte copy.
pub type Run = (usize, usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaloPattern {
    /// Global board edge.
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
}

impl HaloPattern {
    pub fn new(n: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || n == 0 || !n.is_multiple_of(rows) || !n.is_multiple_of(cols) {
            return Err(Error::Bench(format!(
                "{n}x{n} board does not divide over a {rows}x{cols} rank grid"
            )));
        }
        Ok(Self { n, rows, cols })
    }

    pub fn ranks(&self) -> usize {
        self.rows * self.cols
    }

    pub fn local_h(&self) -> usize {
        self.n / self.rows
    }

    pub fn local_w(&self) -> usize {
        self.n / self.cols
    }

    /// Padded row stride.
    pub fn stride(&self) -> usize {
        self.local_w() + 2
    }

    pub fn padded_len(&self) -> usize {
        (self.local_h() + 2) * self.stride()
    }

    pub fn coords(&self, rank: usize) -> (usize, usize) {
        (rank / self.cols, rank % self.cols)
    }

    pub fn neighbor(&self, rank: usize, d: Direction) -> usize {
        let (r, c) = self.coords(rank);
        let r = (r as isize + d.dr).rem_euclid(self.rows as isize) as usize;
        let c = (c as isize + d.dc).rem_euclid(self.cols as isize) as usize;
        r * self.cols + c
    }

    /// Bytes of the message toward `d`.
    pub fn msg_len(&self, d: Direction) -> usize {
        match (d.dr, d.dc) {
            (0, _) => self.local_h(),
            (_, 0) => self.local_w(),
            _ => 1,
        }
    }

    /// Mean edge message size.
    pub fn edge_bytes(&self) -> f64 {
        (self.local_h() + self.local_w()) as f64 / 2.0
    }

    fn span(lo_ghost: bool, d: isize, extent: usize) -> (usize, usize) {
        match (d, lo_ghost) {
            (-1, false) => (1, 1),
            (-1, true) => (0, 1),
            (1, false) => (extent, 1),
            (1, true) => (extent + 1, 1),
            _ => (1, extent),
        }
    }

    /// Row-major runs of padded-board offsets on side `d`: owned cells, or
    /// ghost cells when `ghost`.
    pub fn side_runs(&self, d: Direction, ghost: bool) -> Vec<(usize, usize)> {
        let (r0, nr) = Self::span(ghost, d.dr, self.local_h());
        let (c0, nc) = Self::span(ghost, d.dc, self.local_w());
        (r0..r0 + nr).map(|r| (r * self.stride() + c0, nc)).collect()
    }

    pub fn send_tag(&self, offset: i64, d: Direction) -> i64 {
        offset + d.index() as i64
    }

    /// Tag of the message arriving from the neighbor on side `d`.
    pub fn recv_tag(&self, offset: i64, d: Direction) -> i64 {
        offset + d.opposite().index() as i64
    }
}

/// Buffers and persistent requests of one rank's halo.
#[derive(Clone, Debug)]
pub struct Halo {
    pub pattern: HaloPattern,
    pub board: Buffer,
    pub send_bufs: Vec<Buffer>,
    pub recv_bufs: Vec<Buffer>,
    pub sends: Vec<RequestId>,
    pub recvs: Vec<RequestId>,
    pack: Rc<Vec<Run>>,
    unpack: Rc<Vec<Run>>,
}

impl Halo {
    /// Allocates buffers and creates 8 receives and 8 sends, in direction
    /// order, receives first.
    pub fn new(h: &Host, pattern: HaloPattern, board: Buffer, ready: bool, tag_offset: i64) -> Result<Self> {
        let c = h.comm_world();
        let mut halo = Halo {
            pattern,
            board,
            send_bufs: Vec::new(),
            recv_bufs: Vec::new(),
            sends: Vec::new(),
            recvs: Vec::new(),
            pack: Rc::default(),
            unpack: Rc::default(),
        };
        let (mut pack, mut unpack) = (Vec::new(), Vec::new());
        for d in Direction::ALL {
            let len = pattern.msg_len(d);
            let (sb, rb) = (h.alloc(len), h.alloc(len));
            let mut off = 0;
            for (cell, n) in pattern.side_runs(d, false) {
                pack.push((board.base + cell, sb.base + off, n));
                off += n;
            }
            let mut off = 0;
            for (cell, n) in pattern.side_runs(d, true) {
                unpack.push((rb.base + off, board.base + cell, n));
                off += n;
            }
            halo.send_bufs.push(sb);
            halo.recv_bufs.push(rb);
        }
        for (i, d) in Direction::ALL.into_iter().enumerate() {
            let peer = pattern.neighbor(h.rank(), d);
            let tag = pattern.recv_tag(tag_offset, d);
            halo.recvs.push(h.recv_init(halo.recv_bufs[i], peer, tag, c)?);
        }
        for (i, d) in Direction::ALL.into_iter().enumerate() {
            let peer = pattern.neighbor(h.rank(), d);
            let tag = pattern.send_tag(tag_offset, d);
            halo.sends.push(h.send_init(halo.send_bufs[i], peer, tag, c, ready)?);
        }
        halo.pack = Rc::new(pack);
        halo.unpack = Rc::new(unpack);
        Ok(halo)
    }

    pub fn all_requests(&self) -> Vec<RequestId> {
        self.recvs.iter().chain(&self.sends).copied().collect()
    }

    pub fn halo_bytes(&self) -> usize {
        self.send_bufs.iter().map(|b| b.len).sum()
    }

    fn launch_copies(&self, h: &Host, s: StreamId, runs: &Rc<Vec<Run>>, label: &'static str) -> Result<()> {
        let runs = runs.clone();
        let t = h.cost().pack_time(self.halo_bytes());
        h.launch_kernel(s, t, label, move |m| {
            for &(from, to, len) in runs.iter() {
                m.copy_within(from, to, len);
            }
        })?;
        Ok(())
    }

    pub fn launch_pack(&self, h: &Host, s: StreamId) -> Result<()> {
        self.launch_copies(h, s, &self.pack, "pack")
    }

    pub fn launch_unpack(&self, h: &Host, s: StreamId) -> Result<()> {
        self.launch_copies(h, s, &self.unpack, "unpack")
    }

    /// Host-driven exchange: fence the stream, start every request on the
    /// baseline transport and wait for all of them.
    pub async fn exchange_baseline(&self, h: &Host, s: StreamId) -> Result<()> {
        self.launch_pack(h, s)?;
        h.stream_synchronize(s).await;
        h.start(&self.recvs)?;
        h.start(&self.sends)?;
        h.wait_all(&self.all_requests()).await?;
        self.launch_unpack(h, s)
    }
}

/// A halo whose exchange runs on a stream-triggered queue. Construction
/// completes matching before any gather is enqueued.
#[derive(Clone, Debug)]
pub struct StreamHalo {
    pub halo: Halo,
    pub queue: QueueId,
    pub stream: StreamId,
}

impl StreamHalo {
    pub async fn new(
        h: &Host,
        pattern: HaloPattern,
        board: Buffer,
        queue: QueueId,
        ready: bool,
        tag_offset: i64,
    ) -> Result<Self> {
        let halo = Halo::new(h, pattern, board, ready, tag_offset)?;
        h.match_all(&halo.all_requests()).await?;
        let stream = h
            .world()
            .borrow()
            .stq
            .get(queue)
            .ok_or(Error::UnknownQueue(queue))?
            .stream;
        Ok(Self { halo, queue, stream })
    }

    /// Receive starts, pack, send starts, wait on all 16, unpack.
    pub async fn enqueue_gather(&self, h: &Host) -> Result<()> {
        h.enqueue_start_all(self.queue, &self.halo.recvs).await?;
        self.halo.launch_pack(h, self.stream)?;
        h.enqueue_start_all(self.queue, &self.halo.sends).await?;
        h.enqueue_wait_all(self.queue, &self.halo.all_requests())?;
        self.halo.launch_unpack(h, self.stream)
    }
}
