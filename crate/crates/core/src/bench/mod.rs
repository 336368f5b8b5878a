//! Benchmarks driven on the simulator: GPU ping-pong, a Game of Life halo
//! exchange and a strong-scaling sweep, each under three backends.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::simclock::Nanos;

pub mod halo;
pub mod life;
pub mod pingpong;
pub mod sweep;

pub use halo::{Direction, HaloPattern, StreamHalo};
pub use life::{run_game_of_life, Board, LifeConfig, LifeRun};
pub use pingpong::{run_pingpong, run_pingpong_size, PingPongRun};
pub use sweep::{run_scaling_sweep, SweepConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Backend {
    /// Host-driven: stream synchronize, then host MPI calls.
    Baseline,
    /// Stream-triggered regular sends.
    StSend,
    /// Stream-triggered ready sends.
    StRsend,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Baseline, Backend::StSend, Backend::StRsend];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Baseline => "baseline",
            Backend::StSend => "st-send",
            Backend::StRsend => "st-rsend",
        }
    }

    pub fn is_stream_triggered(self) -> bool {
        self != Backend::Baseline
    }

    pub fn ready(self) -> bool {
        self == Backend::StRsend
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backend::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Bench(format!("unknown backend {s:?}")))
    }
}

/// One benchmark measurement; emitted as one CSV row per metric.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub backend: Backend,
    pub size_bytes: u64,
    pub ranks: usize,
    pub iterations: usize,
    pub mean_ns: f64,
    pub metrics: Vec<(&'static str, f64)>,
}

impl BenchResult {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(m, _)| *m == name).map(|&(_, v)| v)
    }
}

pub const CSV_HEADER: [&str; 7] = [
    "backend",
    "size_bytes",
    "ranks",
    "iterations",
    "mean_ns",
    "metric",
    "value",
];

pub fn write_csv<W: Write>(out: W, results: &[BenchResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in results {
        for (metric, value) in &r.metrics {
            w.write_record([
                r.backend.name().to_string(),
                r.size_bytes.to_string(),
                r.ranks.to_string(),
                r.iterations.to_string(),
                format!("{:.3}", r.mean_ns),
                metric.to_string(),
                format!("{value:.6}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a byte count with an optional binary suffix: `8`, `64K`, `8MiB`.
pub fn parse_size(s: &str) -> Result<usize> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, suffix) = t.split_at(split);
    let n: usize = digits
        .parse()
        .map_err(|_| Error::Bench(format!("bad size {s:?}")))?;
    let shift = match suffix.to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kb" | "kib" => 10,
        "m" | "mb" | "mib" => 20,
        "g" | "gb" | "gib" => 30,
        _ => return Err(Error::Bench(format!("bad size suffix in {s:?}"))),
    };
    n.checked_mul(1 << shift)
        .ok_or_else(|| Error::Bench(format!("size {s:?} overflows")))
}

/// Parses `RxC`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Bench(format!("bad grid {s:?}, expected RxC"));
    let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.parse().map_err(|_| bad())?;
    let c: usize = c.parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

pub(crate) fn mean(total: Nanos, n: usize) -> f64 {
    total as f64 / n as f64
}
