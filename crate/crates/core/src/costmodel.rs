//! Latency and bandwidth parameters charged by every simulated component.
//!
//! All times are virtual nanoseconds. The model is plain data: it is loaded
//! once, then shared read-only by the world.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::simclock::Nanos;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub kernel_launch_ns: Nanos,
    pub gpu_barrier_ns: Nanos,
    /// Host-side RTS/CTS and matching overhead per baseline message.
    pub match_setup_ns: Nanos,
    pub wire_latency_ns: Nanos,
    pub bandwidth_bytes_per_ns: u64,
    pub atomic_ns: Nanos,
    pub eager_threshold_bytes: usize,
    pub dwq_pool_capacity: usize,
    /// Extra time a stream poll spends after its condition holds.
    pub poll_overhead_ns: Nanos,
    /// GPU copy rate of pack/unpack kernels.
    pub pack_bytes_per_ns: u64,
    /// Game of Life update rate of the compute kernel.
    pub life_cells_per_ns: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            kernel_launch_ns: 1000,
            gpu_barrier_ns: 1000,
            match_setup_ns: 3000,
            wire_latency_ns: 2000,
            bandwidth_bytes_per_ns: 25,
            atomic_ns: 500,
            eager_threshold_bytes: 8192,
            dwq_pool_capacity: 500,
            poll_overhead_ns: 0,
            pack_bytes_per_ns: 100,
            life_cells_per_ns: 10,
        }
    }
}

const KEYS: &[&str] = &[
    "kernel_launch_ns",
    "gpu_barrier_ns",
    "match_setup_ns",
    "wire_latency_ns",
    "bandwidth_bytes_per_ns",
    "atomic_ns",
    "eager_threshold_bytes",
    "dwq_pool_capacity",
    "poll_overhead_ns",
    "pack_bytes_per_ns",
    "life_cells_per_ns",
];

impl CostModel {
    /// Wire latency plus serialization time of `len` bytes.
    pub fn transfer_time(&self, len: usize) -> Nanos {
        self.wire_latency_ns + (len as u64).div_ceil(self.bandwidth_bytes_per_ns)
    }

    /// Body time of a kernel copying `len` bytes.
    pub fn pack_time(&self, len: usize) -> Nanos {
        (len as u64).div_ceil(self.pack_bytes_per_ns)
    }

    pub fn life_time(&self, cells: usize) -> Nanos {
        (cells as u64).div_ceil(self.life_cells_per_ns)
    }

    pub fn is_eager(&self, len: usize) -> bool {
        len < self.eager_threshold_bytes
    }

    /// Delay of a triggered atomic to a slot on this or another rank.
    pub fn atomic_time(&self, remote: bool) -> Nanos {
        if remote {
            self.transfer_time(8) + self.atomic_ns
        } else {
            self.atomic_ns
        }
    }

    /// Time from the start of a blocking send until the payload lands.
    ///
    /// Eager messages leave after the host-side setup; rendezvous messages
    /// additionally pay an RTS and a CTS crossing.
    pub fn baseline_send_path(&self, len: usize) -> Nanos {
        let handshake = if self.is_eager(len) {
            0
        } else {
            2 * self.wire_latency_ns
        };
        self.match_setup_ns + handshake + self.transfer_time(len)
    }

    /// Closed form of one steady-state baseline ping-pong hop: an unpack and a
    /// pack kernel, a stream synchronize, then the blocking send.
    pub fn baseline_hop_ns(&self, len: usize) -> Nanos {
        2 * (self.kernel_launch_ns + self.pack_time(len))
            + self.gpu_barrier_ns
            + self.baseline_send_path(len)
    }

    /// Closed form of one steady-state stream-triggered ping-pong hop.
    ///
    /// Unpack and pack kernels, the trigger write (a ready send shares it with
    /// the next receive; a regular send adds a second write for its CTS
    /// release), the data write, then the completion atomic seen by the poll.
    pub fn st_hop_ns(&self, len: usize, ready: bool) -> Nanos {
        let writes = if ready { 1 } else { 2 };
        (2 + writes) * self.kernel_launch_ns
            + 2 * self.pack_time(len)
            + self.transfer_time(len)
            + self.atomic_ns
            + self.poll_overhead_ns
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth_bytes_per_ns == 0 {
            return Err(Error::Config("bandwidth_bytes_per_ns must be > 0".into()));
        }
        if self.pack_bytes_per_ns == 0 || self.life_cells_per_ns == 0 {
            return Err(Error::Config("kernel rates must be > 0".into()));
        }
        if self.dwq_pool_capacity == 0 {
            return Err(Error::Config("dwq_pool_capacity must be > 0".into()));
        }
        Ok(())
    }

    /// Parses flat `key=value` text. Blank lines and `#` comments are
    /// skipped; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cm = CostModel::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let value: u64 = value.trim().parse().map_err(|_| {
                Error::Config(format!("line {}: {key} needs a non-negative integer", lineno + 1))
            })?;
            cm.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cm.validate()?;
        Ok(cm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: u64) -> std::result::Result<(), String> {
        match key {
            "kernel_launch_ns" => self.kernel_launch_ns = v,
            "gpu_barrier_ns" => self.gpu_barrier_ns = v,
            "match_setup_ns" => self.match_setup_ns = v,
            "wire_latency_ns" => self.wire_latency_ns = v,
            "bandwidth_bytes_per_ns" => self.bandwidth_bytes_per_ns = v,
            "atomic_ns" => self.atomic_ns = v,
            "eager_threshold_bytes" => self.eager_threshold_bytes = v as usize,
            "dwq_pool_capacity" => self.dwq_pool_capacity = v as usize,
            "poll_overhead_ns" => self.poll_overhead_ns = v,
            "pack_bytes_per_ns" => self.pack_bytes_per_ns = v,
            "life_cells_per_ns" => self.life_cells_per_ns = v,
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> u64 {
        match key {
            "kernel_launch_ns" => self.kernel_launch_ns,
            "gpu_barrier_ns" => self.gpu_barrier_ns,
            "match_setup_ns" => self.match_setup_ns,
            "wire_latency_ns" => self.wire_latency_ns,
            "bandwidth_bytes_per_ns" => self.bandwidth_bytes_per_ns,
            "atomic_ns" => self.atomic_ns,
            "eager_threshold_bytes" => self.eager_threshold_bytes as u64,
            "dwq_pool_capacity" => self.dwq_pool_capacity as u64,
            "poll_overhead_ns" => self.poll_overhead_ns,
            "pack_bytes_per_ns" => self.pack_bytes_per_ns,
            "life_cells_per_ns" => self.life_cells_per_ns,
            _ => unreachable!("key list and accessors disagree"),
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key}={}", self.get(key));
        }
        s
    }
}
