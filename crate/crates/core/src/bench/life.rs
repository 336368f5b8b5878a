//! Conway's Game of Life on a periodic board, decomposed over a rank grid.
//!
//! Every step exchanges the halo, then advances the owned block with a
//! compute kernel. The final board is assembled from all ranks and hashed;
//! a run whose board disagrees with a single-process update is an error.

use std::cell::RefCell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bench::halo::{Halo, HaloPattern, StreamHalo};
use crate::bench::{mean, Backend, BenchResult};
use crate::costmodel::CostModel;
use crate::error::{Error, Result};
use crate::simclock::{Nanos, TraceRecord};
use crate::world::{cluster, Buffer, Host, RankMemory};

/// Square board, one byte per cell (0 dead, 1 alive), row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Board {
    pub n: usize,
    pub cells: Vec<u8>,
}

impl Board {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            cells: vec![0; n * n],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.n + c]
    }

    pub fn set(&mut self, r: usize, c: usize, alive: bool) {
        self.cells[r * self.n + c] = u8::from(alive);
    }

    /// Places live cells at `(row, col)` offsets from `(r, c)`, wrapping.
    pub fn place(&mut self, r: usize, c: usize, cells: &[(usize, usize)]) {
        for &(dr, dc) in cells {
            self.set((r + dr) % self.n, (c + dc) % self.n, true);
        }
    }

    pub fn glider(n: usize) -> Self {
        let mut b = Self::empty(n);
        b.place(1, 1, &GLIDER);
        b
    }

    /// A glider near the top-left and a blinker near the center.
    pub fn glider_blinker(n: usize) -> Self {
        let mut b = Self::glider(n);
        b.place(n / 2, n / 2, &BLINKER);
        b
    }

    /// Random soup with roughly one live cell in three.
    pub fn soup(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            n,
            cells: (0..n * n).map(|_| u8::from(rng.gen_ratio(1, 3))).collect(),
        }
    }

    pub fn population(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(&self.cells))
    }

    /// One single-process generation.
    pub fn step(&self) -> Board {
        let n = self.n;
        let mut next = Board::empty(n);
        for r in 0..n {
            for c in 0..n {
                let mut live = 0;
                for (dr, dc) in NEIGHBORHOOD {
                    live += self.get((r + n).wrapping_add_signed(dr) % n, (c + n).wrapping_add_signed(dc) % n);
                }
                next.set(r, c, rule(self.get(r, c), live) == 1);
            }
        }
        next
    }
}

pub const GLIDER: [(usize, usize); 5] = [(0, 1), (1, 2), (2, 0), (2, 1), (2, 2)];
pub const BLINKER: [(usize, usize); 3] = [(0, 0), (0, 1), (0, 2)];

const NEIGHBORHOOD: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn rule(alive: u8, live_neighbors: u8) -> u8 {
    u8::from(live_neighbors == 3 || (alive == 1 && live_neighbors == 2))
}

/// Advances the owned block of a padded board in place. Ghosts must be
/// current.
fn advance_padded(m: &mut RankMemory, base: usize, h: usize, w: usize) {
    let stride = w + 2;
    let cur = m.slice(base, (h + 2) * stride).to_vec();
    let out = m.slice_mut(base, (h + 2) * stride);
    for r in 1..=h {
        for c in 1..=w {
            let at = |rr: usize, cc: usize| cur[rr * stride + cc];
            let live = at(r - 1, c - 1)
                + at(r - 1, c)
                + at(r - 1, c + 1)
                + at(r, c - 1)
                + at(r, c + 1)
                + at(r + 1, c - 1)
                + at(r + 1, c)
                + at(r + 1, c + 1);
            out[r * stride + c] = rule(at(r, c), live);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LifeConfig {
    pub backend: Backend,
    pub grid: (usize, usize),
    pub steps: usize,
    pub initial: Board,
    /// Compare against the single-process update before reporting.
    pub verify: bool,
    pub trace: bool,
}

#[derive(Clone, Debug)]
pub struct LifeRun {
    pub result: BenchResult,
    pub board: Board,
    pub digest: String,
    /// Solve time: from the last rank finishing setup to the last rank done.
    pub solve_ns: Nanos,
    pub trace: Vec<TraceRecord>,
}

struct Shared {
    boards: Vec<Option<Buffer>>,
    start: Nanos,
    end: Nanos,
}

fn write_local(h: &Host, p: &HaloPattern, initial: &Board, board: Buffer) {
    let (r, c) = p.coords(h.rank());
    let (lh, lw) = (p.local_h(), p.local_w());
    let mut padded = vec![0u8; p.padded_len()];
    for i in 0..lh {
        let row = (r * lh + i) * initial.n + c * lw;
        let dst = (i + 1) * p.stride() + 1;
        padded[dst..dst + lw].copy_from_slice(&initial.cells[row..row + lw]);
    }
    h.write(board, &padded);
}

fn launch_compute(h: &Host, s: crate::gpusim::StreamId, p: &HaloPattern, board: Buffer) -> Result<()> {
    let (lh, lw) = (p.local_h(), p.local_w());
    let t = h.cost().life_time(lh * lw);
    h.launch_kernel(s, t, "life", move |m| advance_padded(m, board.base, lh, lw))?;
    Ok(())
}

async fn rank_program(h: Host, p: HaloPattern, cfg: Rc<LifeConfig>, shared: Rc<RefCell<Shared>>) -> Result<()> {
    let board = h.alloc(p.padded_len());
    write_local(&h, &p, &cfg.initial, board);
    shared.borrow_mut().boards[h.rank()] = Some(board);
    let stream = h.create_stream();

    if cfg.backend.is_stream_triggered() {
        let q = h.queue_init("cxi", stream)?;
        // Ready sends need the receive started before a neighbor can write
        // again, so consecutive steps alternate between two halos.
        let copies: usize = if cfg.backend.ready() { 2 } else { 1 };
        let mut halos = Vec::new();
        for k in 0..copies {
            halos.push(StreamHalo::new(&h, p, board, q, cfg.backend.ready(), 16 * k as i64).await?);
        }
        let t0 = h.now();
        {
            let mut s = shared.borrow_mut();
            s.start = s.start.max(t0);
        }
        for step in 0..cfg.steps {
            halos[step % copies].enqueue_gather(&h).await?;
            launch_compute(&h, stream, &p, board)?;
        }
        h.queue_wait(q).await;
        h.queue_free(q)?;
    } else {
        let halo = Halo::new(&h, p, board, false, 0)?;
        shared.borrow_mut().start = 0;
        for _ in 0..cfg.steps {
            halo.exchange_baseline(&h, stream).await?;
            launch_compute(&h, stream, &p, board)?;
        }
        h.stream_synchronize(stream).await;
    }
    let mut s = shared.borrow_mut();
    s.end = s.end.max(h.now());
    Ok(())
}

fn assemble(world: &crate::world::World, p: &HaloPattern, boards: &[Option<Buffer>]) -> Board {
    let mut out = Board::empty(p.n);
    let (lh, lw) = (p.local_h(), p.local_w());
    for (rank, buf) in boards.iter().enumerate() {
        let buf = buf.expect("every rank allocated its board");
        let local = world.read(buf);
        let (r, c) = p.coords(rank);
        for i in 0..lh {
            let src = (i + 1) * p.stride() + 1;
            let dst = (r * lh + i) * p.n + c * lw;
            out.cells[dst..dst + lw].copy_from_slice(&local[src..src + lw]);
        }
    }
    out
}

pub fn run_game_of_life(cost: &CostModel, cfg: &LifeConfig) -> Result<LifeRun> {
    let n = cfg.initial.n;
    let p = HaloPattern::new(n, cfg.grid.0, cfg.grid.1)?;
    if cfg.steps == 0 {
        return Err(Error::Bench("steps must be > 0".into()));
    }
    let (mut sim, hosts) = cluster(p.ranks(), cost.clone());
    if cfg.trace {
        sim.world().borrow_mut().clock.enable_trace();
    }
    let shared = Rc::new(RefCell::new(Shared {
        boards: vec![None; p.ranks()],
        start: 0,
        end: 0,
    }));
    let cfg_rc = Rc::new(cfg.clone());
    for h in hosts {
        let rank = h.rank();
        sim.spawn(rank, rank_program(h, p, cfg_rc.clone(), shared.clone()));
    }
    let outcome = sim.run_until_quiescent()?;
    if let Some(report) = outcome.deadlock() {
        return Err(Error::Bench(format!("life deadlocked:\n{report}")));
    }
    let s = shared.borrow();
    let board = assemble(&sim.world().borrow(), &p, &s.boards);
    if cfg.verify {
        let mut expect = cfg.initial.clone();
        for _ in 0..cfg.steps {
            expect = expect.step();
        }
        if expect != board {
            return Err(Error::Bench(format!(
                "{} on {}x{} ranks diverged from the single-process board",
                cfg.backend, p.rows, p.cols
            )));
        }
    }
    let solve_ns = s.end - s.start;
    let result = BenchResult {
        backend: cfg.backend,
        size_bytes: (n * n) as u64,
        ranks: p.ranks(),
        iterations: cfg.steps,
        mean_ns: mean(solve_ns, cfg.steps),
        metrics: vec![
            ("solve_ns", solve_ns as f64),
            ("edge_bytes", p.edge_bytes()),
        ],
    };
    let trace = sim.world().borrow().clock.trace().to_vec();
    Ok(LifeRun {
        result,
        digest: board.digest(),
        board,
        solve_ns,
        trace,
    })
}
