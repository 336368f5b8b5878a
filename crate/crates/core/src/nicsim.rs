//! Simulated triggered-operation NIC.
//!
//! Each rank owns memory regions (addressable remotely by key), triggering
//! counters, and a bounded pool of deferred work entries. An entry is armed on
//! a `(counter, threshold)` pair and fires the first time the counter reaches
//! the threshold. Counters are advanced by the host, by GPU stream writes, or
//! by remote writes and atomics landing in a region that counts them.
//!
//! GPUs cannot read counters. Completion is made visible to them through
//! triggered atomics into 8-byte slots of ordinary memory.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::observe::{Observation, WorkTag};
use crate::simclock::Target;
use crate::world::{Cond, Event, Host, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CounterId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntryId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionKey(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryRegion {
    pub rank: usize,
    pub key: RegionKey,
    pub base: usize,
    pub len: usize,
    /// Counter bumped once per remote write or atomic landing in the region.
    pub remote_write_counter: Option<CounterId>,
}

impl MemoryRegion {
    pub fn addr(&self, offset: usize) -> RemoteAddr {
        RemoteAddr {
            rank: self.rank,
            key: self.key,
            offset,
        }
    }
}

/// Address of a byte inside a registered region, as a peer names it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RemoteAddr {
    pub rank: usize,
    pub key: RegionKey,
    pub offset: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkKind {
    /// Copy `len` local bytes starting at `src_base` to `dest`.
    RemoteWrite {
        src_base: usize,
        len: usize,
        dest: RemoteAddr,
    },
    /// Add to the 8-byte little-endian slot at `dest`.
    Atomic { dest: RemoteAddr, add: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeferredWorkEntry {
    pub kind: WorkKind,
    pub counter: CounterId,
    pub threshold: u64,
    /// Local counter bumped when the operation completes at the source.
    pub completion_counter: Option<CounterId>,
    pub tag: WorkTag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    Armed,
    Fired,
    Retired,
}

#[derive(Debug)]
struct EntrySlot {
    rank: usize,
    entry: DeferredWorkEntry,
    state: EntryState,
}

#[derive(Debug, Default)]
pub struct TriggerCounter {
    value: u64,
    writeback: u64,
    watchers: BTreeMap<(u64, u64), EntryId>,
    live: bool,
}

impl TriggerCounter {
    pub fn value(&self) -> u64 {
        self.value
    }
}

#[derive(Debug, Default)]
struct RankNic {
    regions: BTreeMap<RegionKey, MemoryRegion>,
    next_key: u64,
    counters: Vec<TriggerCounter>,
    in_use: usize,
    max_in_use: usize,
}

#[derive(Debug)]
pub struct Nic {
    ranks: Vec<RankNic>,
    capacity: usize,
    entries: BTreeMap<EntryId, EntrySlot>,
    next_entry: u64,
    arm_seq: u64,
}

/// An armed entry whose trigger was never reached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnfiredEntry {
    pub entry: EntryId,
    pub rank: usize,
    pub tag: WorkTag,
    pub kind: WorkKind,
    pub counter: CounterId,
    pub threshold: u64,
    pub value: u64,
}

impl fmt::Display for UnfiredEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.kind {
            WorkKind::RemoteWrite { len, dest, .. } => {
                format!("remote write of {len} B to rank {}", dest.rank)
            }
            WorkKind::Atomic { dest, add } => format!("atomic +{add} to rank {}", dest.rank),
        };
        write!(
            f,
            "entry {} on rank {} [{}",
            self.entry.0,
            self.rank,
            self.tag.purpose.label()
        )?;
        if let Some(req) = self.tag.request {
            write!(f, " req {} epoch {}", req.0, self.tag.epoch)?;
        }
        write!(
            f,
            "] {op} armed on counter {} at threshold {} (value {})",
            self.counter.0, self.threshold, self.value
        )
    }
}

#[derive(Debug)]
pub enum NicEvent {
    WriteArrive { entry: EntryId, bytes: Vec<u8> },
    WriteLocalDone { entry: EntryId },
    AtomicApply { entry: EntryId },
}

impl NicEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            NicEvent::WriteArrive { .. } => "nic.write_arrive",
            NicEvent::WriteLocalDone { .. } => "nic.write_local_done",
            NicEvent::AtomicApply { .. } => "nic.atomic_apply",
        }
    }
}

impl Nic {
    pub fn new(nranks: usize, capacity: usize) -> Self {
        Self {
            ranks: (0..nranks).map(|_| RankNic::default()).collect(),
            capacity,
            entries: BTreeMap::new(),
            next_entry: 0,
            arm_seq: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn in_use(&self, rank: usize) -> usize {
        self.ranks[rank].in_use
    }

    pub fn max_in_use(&self, rank: usize) -> usize {
        self.ranks[rank].max_in_use
    }

    pub fn has_free_entry(&self, rank: usize) -> bool {
        self.ranks[rank].in_use < self.capacity
    }

    pub fn live_counters(&self, rank: usize) -> usize {
        self.ranks[rank].counters.iter().filter(|c| c.live).count()
    }

    pub fn region_count(&self, rank: usize) -> usize {
        self.ranks[rank].regions.len()
    }

    pub fn counter(&self, rank: usize, id: CounterId) -> Result<&TriggerCounter> {
        self.ranks
            .get(rank)
            .ok_or(Error::UnknownRank(rank))?
            .counters
            .get(id.0)
            .filter(|c| c.live)
            .ok_or(Error::UnknownCounter {
                rank,
                counter: id.0,
            })
    }

    fn counter_mut(&mut self, rank: usize, id: CounterId) -> Result<&mut TriggerCounter> {
        self.ranks
            .get_mut(rank)
            .ok_or(Error::UnknownRank(rank))?
            .counters
            .get_mut(id.0)
            .filter(|c| c.live)
            .ok_or(Error::UnknownCounter {
                rank,
                counter: id.0,
            })
    }

    pub fn region(&self, rank: usize, key: RegionKey) -> Result<&MemoryRegion> {
        self.ranks
            .get(rank)
            .ok_or(Error::UnknownRank(rank))?
            .regions
            .get(&key)
            .ok_or(Error::UnknownKey { rank, key: key.0 })
    }

    pub fn entry_state(&self, id: EntryId) -> Option<EntryState> {
        self.entries.get(&id).map(|e| e.state)
    }

    pub fn entry(&self, id: EntryId) -> Option<&DeferredWorkEntry> {
        self.entries.get(&id).map(|e| &e.entry)
    }

    pub fn unfired_entries(&self) -> Vec<UnfiredEntry> {
        self.entries
            .iter()
            .filter(|(_, s)| s.state == EntryState::Armed)
            .map(|(id, s)| UnfiredEntry {
                entry: *id,
                rank: s.rank,
                tag: s.entry.tag,
                kind: s.entry.kind,
                counter: s.entry.counter,
                threshold: s.entry.threshold,
                value: self.ranks[s.rank].counters[s.entry.counter.0].value,
            })
            .collect()
    }
}

impl World {
    pub fn alloc_counter(&mut self, rank: usize) -> Result<CounterId> {
        self.check_rank(rank)?;
        let counters = &mut self.nic.ranks[rank].counters;
        counters.push(TriggerCounter {
            live: true,
            ..TriggerCounter::default()
        });
        Ok(CounterId(counters.len() - 1))
    }

    /// Releases a counter. Watchers still armed on it are dropped from the
    /// pool as if retired.
    pub fn free_counter(&mut self, rank: usize, id: CounterId) -> Result<()> {
        let watchers = std::mem::take(&mut self.nic.counter_mut(rank, id)?.watchers);
        for entry in watchers.into_values() {
            self.retire(entry);
        }
        self.nic.ranks[rank].counters[id.0].live = false;
        Ok(())
    }

    pub fn counter_value(&self, rank: usize, id: CounterId) -> Result<u64> {
        Ok(self.nic.counter(rank, id)?.value)
    }

    /// Host-readable shadow value. Only [`World::host_progress`] refreshes it.
    pub fn counter_writeback(&self, rank: usize, id: CounterId) -> Result<u64> {
        Ok(self.nic.counter(rank, id)?.writeback)
    }

    /// Host progress: copies every live counter into its writeback buffer.
    pub fn host_progress(&mut self, rank: usize) {
        for c in self.nic.ranks[rank].counters.iter_mut().filter(|c| c.live) {
            c.writeback = c.value;
        }
    }

    pub fn register_region(
        &mut self,
        rank: usize,
        base: usize,
        len: usize,
        count_remote_writes: bool,
    ) -> Result<MemoryRegion> {
        self.check_rank(rank)?;
        if !self.mem[rank].contains(base, len) {
            return Err(Error::InvalidRange { rank, base, len });
        }
        let counter = if count_remote_writes {
            Some(self.alloc_counter(rank)?)
        } else {
            None
        };
        self.register_region_counted_by(rank, base, len, counter)
    }

    /// Registers a region whose remote writes bump an existing counter.
    pub fn register_region_counted_by(
        &mut self,
        rank: usize,
        base: usize,
        len: usize,
        counter: Option<CounterId>,
    ) -> Result<MemoryRegion> {
        self.check_rank(rank)?;
        if !self.mem[rank].contains(base, len) {
            return Err(Error::InvalidRange { rank, base, len });
        }
        if let Some(c) = counter {
            self.nic.counter(rank, c)?;
        }
        let nic = &mut self.nic.ranks[rank];
        let key = RegionKey(nic.next_key);
        nic.next_key += 1;
        let region = MemoryRegion {
            rank,
            key,
            base,
            len,
            remote_write_counter: counter,
        };
        nic.regions.insert(key, region);
        Ok(region)
    }

    pub fn deregister_region(&mut self, rank: usize, key: RegionKey) -> Result<()> {
        self.nic.ranks[rank]
            .regions
            .remove(&key)
            .map(|_| ())
            .ok_or(Error::UnknownKey { rank, key: key.0 })
    }

    /// Advances a counter and fires every watcher whose threshold is now met,
    /// lowest threshold first, ties in arming order.
    pub fn increment_counter(&mut self, rank: usize, id: CounterId, amount: u64) -> Result<u64> {
        let now = self.now();
        let counter = self.nic.counter_mut(rank, id)?;
        let old = counter.value;
        counter.value += amount;
        let new = counter.value;
        let rest = counter.watchers.split_off(&(new + 1, 0));
        let ready = std::mem::replace(&mut counter.watchers, rest);
        self.obs.record(|| Observation::CounterIncrement {
            time: now,
            rank,
            counter: id,
            old,
            new,
        });
        for entry in ready.into_values() {
            self.fire(entry)?;
        }
        Ok(new)
    }

    /// Arms an entry, or fails with [`Error::PoolFull`] if the rank's pool is
    /// exhausted. Malformed targets are rejected here rather than at firing.
    pub fn try_post_deferred(&mut self, rank: usize, entry: DeferredWorkEntry) -> Result<EntryId> {
        self.check_rank(rank)?;
        self.nic.counter(rank, entry.counter)?;
        if let Some(c) = entry.completion_counter {
            self.nic.counter(rank, c)?;
        }
        let dest = match entry.kind {
            WorkKind::RemoteWrite { src_base, len, dest } => {
                if !self.mem[rank].contains(src_base, len) {
                    return Err(Error::InvalidRange {
                        rank,
                        base: src_base,
                        len,
                    });
                }
                dest
            }
            WorkKind::Atomic { dest, .. } => dest,
        };
        self.nic.region(dest.rank, dest.key)?;

        let nic = &mut self.nic.ranks[rank];
        if nic.in_use >= self.nic.capacity {
            return Err(Error::PoolFull(rank));
        }
        nic.in_use += 1;
        nic.max_in_use = nic.max_in_use.max(nic.in_use);

        let id = EntryId(self.nic.next_entry);
        self.nic.next_entry += 1;
        self.nic.entries.insert(
            id,
            EntrySlot {
                rank,
                entry,
                state: EntryState::Armed,
            },
        );
        let now = self.now();
        self.obs.record(|| Observation::EntryArmed {
            time: now,
            entry: id,
            tag: entry.tag,
        });

        let seq = self.nic.arm_seq;
        self.nic.arm_seq += 1;
        let counter = self.nic.counter_mut(rank, entry.counter)?;
        if counter.value >= entry.threshold {
            self.fire(id)?;
        } else {
            counter.watchers.insert((entry.threshold, seq), id);
        }
        Ok(id)
    }

    fn fire(&mut self, id: EntryId) -> Result<()> {
        let now = self.now();
        let slot = self.nic.entries.get_mut(&id).expect("armed entry");
        debug_assert_eq!(slot.state, EntryState::Armed, "entry fired twice");
        slot.state = EntryState::Fired;
        let (rank, entry) = (slot.rank, slot.entry);
        self.obs.record(|| Observation::EntryFired {
            time: now,
            entry: id,
            tag: entry.tag,
        });
        match entry.kind {
            WorkKind::RemoteWrite { src_base, len, dest } => {
                // The NIC reads the source when the operation executes.
                let bytes = self.mem[rank].slice(src_base, len).to_vec();
                let delay = self.cost.transfer_time(len);
                self.clock.schedule(
                    delay,
                    Target::Nic(dest.rank),
                    Event::Nic(NicEvent::WriteArrive { entry: id, bytes }),
                );
            }
            WorkKind::Atomic { dest, .. } => {
                let delay = self.cost.atomic_time(dest.rank != rank);
                self.clock.schedule(
                    delay,
                    Target::Nic(dest.rank),
                    Event::Nic(NicEvent::AtomicApply { entry: id }),
                );
            }
        }
        Ok(())
    }

    fn retire(&mut self, id: EntryId) {
        let now = self.now();
        let slot = self.nic.entries.get_mut(&id).expect("known entry");
        if slot.state == EntryState::Retired {
            return;
        }
        slot.state = EntryState::Retired;
        self.nic.ranks[slot.rank].in_use -= 1;
        self.obs.record(|| Observation::EntryRetired {
            time: now,
            entry: id,
        });
    }

    pub(crate) fn nic_dispatch(&mut self, ev: NicEvent) -> Result<()> {
        match ev {
            NicEvent::WriteArrive { entry, bytes } => self.execute_remote_write(entry, bytes),
            NicEvent::WriteLocalDone { entry } => {
                let slot = &self.nic.entries[&entry];
                let (rank, completion) = (slot.rank, slot.entry.completion_counter);
                self.retire(entry);
                if let Some(c) = completion {
                    self.increment_counter(rank, c, 1)?;
                }
                Ok(())
            }
            NicEvent::AtomicApply { entry } => self.execute_triggered_atomic(entry),
        }
    }

    /// Lands a remote write. Payload delivery and the destination counter
    /// bump happen in this one event; local completion follows separately.
    fn execute_remote_write(&mut self, id: EntryId, bytes: Vec<u8>) -> Result<()> {
        let slot = &self.nic.entries[&id];
        let (src_rank, tag) = (slot.rank, slot.entry.tag);
        let WorkKind::RemoteWrite { dest, .. } = slot.entry.kind else {
            unreachable!("write arrival for a non-write entry");
        };
        let region = *self.nic.region(dest.rank, dest.key)?;
        if dest.offset + bytes.len() > region.len {
            return Err(Error::Fault(format!(
                "remote write of {} B at offset {} overflows region {} ({} B) on rank {}",
                bytes.len(),
                dest.offset,
                region.key.0,
                region.len,
                dest.rank
            )));
        }
        let base = region.base + dest.offset;
        self.mem[dest.rank]
            .slice_mut(base, bytes.len())
            .copy_from_slice(&bytes);
        let now = self.now();
        self.obs.record(|| Observation::MemoryWrite {
            time: now,
            rank: dest.rank,
            base,
            len: bytes.len(),
        });
        self.obs.record(|| Observation::EntryExecuted {
            time: now,
            entry: id,
            tag,
        });
        if let Some(c) = region.remote_write_counter {
            self.increment_counter(dest.rank, c, 1)?;
        }
        self.gpu_memory_changed(dest.rank);
        self.clock.schedule(
            0,
            Target::Nic(src_rank),
            Event::Nic(NicEvent::WriteLocalDone { entry: id }),
        );
        Ok(())
    }

    fn execute_triggered_atomic(&mut self, id: EntryId) -> Result<()> {
        let slot = &self.nic.entries[&id];
        let (src_rank, tag, completion) = (slot.rank, slot.entry.tag, slot.entry.completion_counter);
        let WorkKind::Atomic { dest, add } = slot.entry.kind else {
            unreachable!("atomic apply for a non-atomic entry");
        };
        let region = *self.nic.region(dest.rank, dest.key)?;
        let addr = region.base + dest.offset;
        if addr % 8 != 0 || dest.offset + 8 > region.len {
            return Err(Error::Fault(format!(
                "misaligned atomic slot at offset {} of region {} on rank {}",
                dest.offset, region.key.0, dest.rank
            )));
        }
        let mem = &mut self.mem[dest.rank];
        let v = mem.read_u64(addr).wrapping_add(add);
        mem.write_u64(addr, v);
        let now = self.now();
        self.obs.record(|| Observation::EntryExecuted {
            time: now,
            entry: id,
            tag,
        });
        if let Some(c) = region.remote_write_counter {
            self.increment_counter(dest.rank, c, 1)?;
        }
        self.retire(id);
        if let Some(c) = completion {
            self.increment_counter(src_rank, c, 1)?;
        }
        self.gpu_memory_changed(dest.rank);
        Ok(())
    }
}

impl Host {
    pub fn register_region(&self, buf: crate::world::Buffer, count_remote_writes: bool) -> Result<MemoryRegion> {
        self.world
            .borrow_mut()
            .register_region(self.rank, buf.base, buf.len, count_remote_writes)
    }

    pub fn alloc_counter(&self) -> CounterId {
        self.world
            .borrow_mut()
            .alloc_counter(self.rank)
            .expect("host rank exists")
    }

    pub fn increment_counter(&self, counter: CounterId, amount: u64) -> Result<u64> {
        self.world
            .borrow_mut()
            .increment_counter(self.rank, counter, amount)
    }

    pub fn counter_value(&self, counter: CounterId) -> Result<u64> {
        self.world.borrow().counter_value(self.rank, counter)
    }

    /// Arms a deferred entry, blocking the host while the pool is full.
    pub async fn post_deferred(&self, entry: DeferredWorkEntry) -> Result<EntryId> {
        loop {
            let res = self.world.borrow_mut().try_post_deferred(self.rank, entry);
            match res {
                Err(Error::PoolFull(_)) => self.block(Cond::DwqSlot(self.rank)).await,
                other => return other,
            }
        }
    }

}
