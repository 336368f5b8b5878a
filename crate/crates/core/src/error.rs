use thiserror::Error;

use crate::mpicore::RequestId;
use crate::stqueue::QueueId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task {task} (rank {rank}) failed: {source}")]
    Task {
        task: usize,
        rank: usize,
        source: Box<Error>,
    },
    #[error("task {task} returned Pending without naming a condition")]
    SilentPending { task: usize },
    #[error("simulation fault: {0}")]
    Fault(String),

    #[error("unknown rank {0}")]
    UnknownRank(usize),
    #[error("range [{base}, {base}+{len}) is outside rank {rank} memory")]
    InvalidRange { rank: usize, base: usize, len: usize },
    #[error("rank {rank} has no memory region with key {key}")]
    UnknownKey { rank: usize, key: u64 },
    #[error("rank {rank} has no counter {counter}")]
    UnknownCounter { rank: usize, counter: usize },
    #[error("unknown stream {0}")]
    UnknownStream(usize),
    #[error("deferred work pool on rank {0} is full")]
    PoolFull(usize),

    #[error("peer {peer} is not in communicator of size {size}")]
    InvalidPeer { peer: usize, size: usize },
    #[error("tag {0} is reserved for internal use")]
    ReservedTag(i64),
    #[error("unknown request {0:?}")]
    UnknownRequest(RequestId),
    #[error("request {0:?} is not a persistent point-to-point request")]
    NotPersistent(RequestId),
    #[error("request {0:?} is already matched or matching")]
    AlreadyMatched(RequestId),
    #[error("request {0:?} is not matched")]
    NotMatched(RequestId),
    #[error("request {0:?} has a start without a corresponding wait")]
    AlreadyStarted(RequestId),
    #[error("request {0:?} has not been started")]
    NotStarted(RequestId),
    #[error("request {req:?} was started on queue {started_on:?}, not {waited_on:?}")]
    WrongQueue {
        req: RequestId,
        started_on: QueueId,
        waited_on: QueueId,
    },
    #[error("request {0:?} belongs to a different rank")]
    ForeignRequest(RequestId),
    #[error("message of {sent} bytes truncated by receive buffer of {capacity} bytes")]
    Truncated { sent: usize, capacity: usize },
    #[error("request {0:?} is active and cannot be freed")]
    RequestActive(RequestId),

    #[error("unknown queue {0:?}")]
    UnknownQueue(QueueId),
    #[error("queue {0:?} still has outstanding operations")]
    QueueBusy(QueueId),
    #[error("unsupported queue kind {0:?}")]
    UnknownQueueKind(String),

    #[error("invalid cost model: {0}")]
    Config(String),
    #[error("invalid benchmark setup: {0}")]
    Bench(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
