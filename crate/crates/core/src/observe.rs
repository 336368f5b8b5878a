//! Structured record of protocol-relevant happenings, for property checks.
//!
//! Off by default; the trace in [`crate::simclock`] is the replay format,
//! this log carries the extra fields the safety checks need.

use crate::gpusim::{OpHandle, StreamId};
use crate::mpicore::RequestId;
use crate::nicsim::{CounterId, EntryId};
use crate::simclock::Nanos;

/// Why a deferred entry or stream trigger exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Purpose {
    SendData,
    SendCompletion,
    RecvCompletion,
    Cts,
    User,
}

impl Purpose {
    pub fn label(self) -> &'static str {
        match self {
            Purpose::SendData => "send-data",
            Purpose::SendCompletion => "send-completion",
            Purpose::RecvCompletion => "recv-completion",
            Purpose::Cts => "cts",
            Purpose::User => "user",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkTag {
    pub purpose: Purpose,
    pub request: Option<RequestId>,
    pub epoch: u64,
}

impl WorkTag {
    pub const USER: WorkTag = WorkTag {
        purpose: Purpose::User,
        request: None,
        epoch: 0,
    };

    pub fn new(purpose: Purpose, request: RequestId, epoch: u64) -> Self {
        Self {
            purpose,
            request: Some(request),
            epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Observation {
    CounterIncrement {
        time: Nanos,
        rank: usize,
        counter: CounterId,
        old: u64,
        new: u64,
    },
    EntryArmed {
        time: Nanos,
        entry: EntryId,
        tag: WorkTag,
    },
    EntryFired {
        time: Nanos,
        entry: EntryId,
        tag: WorkTag,
    },
    /// The entry's effect became visible at its destination.
    EntryExecuted {
        time: Nanos,
        entry: EntryId,
        tag: WorkTag,
    },
    EntryRetired {
        time: Nanos,
        entry: EntryId,
    },
    StreamOpDone {
        time: Nanos,
        stream: StreamId,
        op: OpHandle,
        kind: &'static str,
        tags: Vec<WorkTag>,
    },
    /// Bytes landed in rank memory from the network.
    MemoryWrite {
        time: Nanos,
        rank: usize,
        base: usize,
        len: usize,
    },
}

impl Observation {
    pub fn time(&self) -> Nanos {
        match self {
            Observation::CounterIncrement { time, .. }
            | Observation::EntryArmed { time, .. }
            | Observation::EntryFired { time, .. }
            | Observation::EntryExecuted { time, .. }
            | Observation::EntryRetired { time, .. }
            | Observation::StreamOpDone { time, .. }
            | Observation::MemoryWrite { time, .. } => *time,
        }
    }
}

#[derive(Debug, Default)]
pub struct Observer {
    enabled: bool,
    log: Vec<Observation>,
}

impl Observer {
    pub fn enable(&mut self) {
        self.enabled = true;
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, obs: impl FnOnce() -> Observation) {
        if self.enabled {
            self.log.push(obs());
        }
    }

    pub fn log(&self) -> &[Observation] {
        &self.log
    }
}
