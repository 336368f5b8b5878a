//! Deterministic discrete-event engine.
//!
//! Virtual time is kept in integer nanoseconds. Events are ordered by
//! `(time, seq)` where `seq` is a run-wide insertion counter, so two events at
//! the same instant dispatch in the order they were scheduled.
//!
//! Host programs are ordinary `async` blocks. They never run in parallel: the
//! [`Simulation`] polls them one at a time with a no-op waker and records the
//! [`Condition`] a task is blocked on. A blocked task is re-polled only once
//! its condition holds. When no task is runnable and no event is pending, the
//! run ends; any task still blocked at that point is reported as deadlocked.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::future::Future;
use std::io::{self, Write};
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll, Waker};

use crate::error::{Error, Result};

/// Virtual nanoseconds.
pub type Nanos = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(pub u64);

/// Component an event is addressed to. Only used for tracing and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Host(TaskId),
    Nic(usize),
    Gpu(usize),
    Mpi(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Host(t) => write!(f, "host@{}", t.0),
            Target::Nic(r) => write!(f, "nic@{r}"),
            Target::Gpu(s) => write!(f, "gpu@{s}"),
            Target::Mpi(r) => write!(f, "mpi@{r}"),
        }
    }
}

/// Short, stable name of an event payload, written into traces.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

/// Engine-level payload: either a host timer or a model event.
#[derive(Debug)]
pub enum Payload<P> {
    Wake(TimerId),
    Model(P),
}

impl<P: EventKind> EventKind for Payload<P> {
    fn kind(&self) -> &'static str {
        match self {
            Payload::Wake(_) => "wake",
            Payload::Model(p) => p.kind(),
        }
    }
}

#[derive(Debug)]
pub struct SimEvent<P> {
    pub time: Nanos,
    pub seq: u64,
    pub target: Target,
    pub payload: Payload<P>,
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // Reversed so that `BinaryHeap` pops the earliest `(time, seq)` first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// One dispatched event, as written by [`EventQueue::dump_trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: Nanos,
    pub seq: u64,
    pub target: Target,
    pub kind: &'static str,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.time, self.seq, self.target, self.kind)
    }
}

/// What a host task is waiting for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition<C> {
    Timer(TimerId),
    Model(C),
}

impl<C: fmt::Display> fmt::Display for Condition<C> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Timer(t) => write!(f, "timer {}", t.0),
            Condition::Model(c) => c.fmt(f),
        }
    }
}

pub struct EventQueue<P, C> {
    now: Nanos,
    next_seq: u64,
    next_timer: u64,
    heap: BinaryHeap<SimEvent<P>>,
    fired_timers: BTreeSet<TimerId>,
    trace: Option<Vec<TraceRecord>>,
    current_task: Option<TaskId>,
    pending_block: Option<Condition<C>>,
}

impl<P: EventKind, C> Default for EventQueue<P, C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P: EventKind, C> EventQueue<P, C> {
    pub fn new() -> Self {
        Self {
            now: 0,
            next_seq: 0,
            next_timer: 0,
            heap: BinaryHeap::new(),
            fired_timers: BTreeSet::new(),
            trace: None,
            current_task: None,
            pending_block: None,
        }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Writes the trace as newline-delimited `time,seq,target,kind` records.
    pub fn dump_trace<W: Write>(&self, mut out: W) -> io::Result<()> {
        for rec in self.trace() {
            writeln!(out, "{rec}")?;
        }
        Ok(())
    }

    pub fn schedule(&mut self, delay: Nanos, target: Target, payload: P) -> EventId {
        self.push(delay, target, Payload::Model(payload))
    }

    pub fn schedule_at(&mut self, time: Nanos, target: Target, payload: P) -> EventId {
        let delay = time.saturating_sub(self.now);
        self.schedule(delay, target, payload)
    }

    fn push(&mut self, delay: Nanos, target: Target, payload: Payload<P>) -> EventId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            time: self.now + delay,
            seq,
            target,
            payload,
        });
        EventId(seq)
    }

    /// Arms a host timer that fires `delay` ns from now.
    pub fn timer(&mut self, delay: Nanos, task: TaskId) -> TimerId {
        let id = TimerId(self.next_timer);
        self.next_timer += 1;
        self.push(delay, Target::Host(task), Payload::Wake(id));
        id
    }

    pub fn timer_fired(&self, id: TimerId) -> bool {
        self.fired_timers.contains(&id)
    }

    pub fn is_idle(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn pending_events(&self) -> usize {
        self.heap.len()
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.now, "virtual time went backwards");
        self.now = ev.time;
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                time: ev.time,
                seq: ev.seq,
                target: ev.target,
                kind: ev.payload.kind(),
            });
        }
        Some(ev)
    }

    /// The task currently being polled, if any.
    pub fn current_task(&self) -> Option<TaskId> {
        self.current_task
    }

    /// Called by a blocking future before it returns `Pending`.
    pub fn block_current(&mut self, cond: Condition<C>) {
        self.pending_block = Some(cond);
    }
}

/// The state a [`Simulation`] drives.
pub trait World: Sized + 'static {
    type Event: EventKind + fmt::Debug;
    type Cond: Clone + fmt::Debug + fmt::Display;

    fn clock(&self) -> &EventQueue<Self::Event, Self::Cond>;
    fn clock_mut(&mut self) -> &mut EventQueue<Self::Event, Self::Cond>;
    fn dispatch(&mut self, target: Target, event: Self::Event) -> Result<()>;
    fn holds(&self, cond: &Self::Cond) -> bool;
    /// Deferred work that is armed but has not fired, for deadlock reports.
    fn unfired_work(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Shared handle through which host programs reach the world.
pub type Shared<W> = Rc<RefCell<W>>;

/// Future that resolves once `cond` holds.
pub struct BlockOn<W: World> {
    world: Shared<W>,
    cond: Condition<W::Cond>,
}

impl<W: World> Future for BlockOn<W> {
    type Output = ();

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        let mut w = self.world.borrow_mut();
        if condition_holds(&*w, &self.cond) {
            Poll::Ready(())
        } else {
            w.clock_mut().block_current(self.cond.clone());
            Poll::Pending
        }
    }
}

pub fn block_on<W: World>(world: &Shared<W>, cond: W::Cond) -> BlockOn<W> {
    BlockOn {
        world: world.clone(),
        cond: Condition::Model(cond),
    }
}

/// Suspends the calling task for `delay` virtual ns.
pub fn sleep<W: World>(world: &Shared<W>, delay: Nanos) -> BlockOn<W> {
    let cond = {
        let mut w = world.borrow_mut();
        let clock = w.clock_mut();
        let task = clock
            .current_task()
            .expect("sleep called outside of a host task");
        Condition::Timer(clock.timer(delay, task))
    };
    BlockOn {
        world: world.clone(),
        cond,
    }
}

fn condition_holds<W: World>(w: &W, cond: &Condition<W::Cond>) -> bool {
    match cond {
        Condition::Timer(t) => w.clock().timer_fired(*t),
        Condition::Model(c) => w.holds(c),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskState {
    Runnable,
    Blocked(String),
    Finished,
}

type Program = Pin<Box<dyn Future<Output = Result<()>>>>;

struct HostTask<C> {
    rank: usize,
    state: TaskState,
    blocked_on: Option<Condition<C>>,
    program: Option<Program>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockedTask {
    pub task: TaskId,
    pub rank: usize,
    pub condition: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeadlockReport {
    pub time: Nanos,
    pub blocked: Vec<BlockedTask>,
    pub unfired: Vec<String>,
}

impl fmt::Display for DeadlockReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "deadlock at t={} ns", self.time)?;
        for b in &self.blocked {
            writeln!(f, "  task {} (rank {}) blocked on {}", b.task.0, b.rank, b.condition)?;
        }
        for u in &self.unfired {
            writeln!(f, "  unfired: {u}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed { time: Nanos },
    Deadlock(DeadlockReport),
}

impl Outcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, Outcome::Completed { .. })
    }

    pub fn deadlock(&self) -> Option<&DeadlockReport> {
        match self {
            Outcome::Deadlock(r) => Some(r),
            Outcome::Completed { .. } => None,
        }
    }
}

pub struct Simulation<W: World> {
    world: Shared<W>,
    tasks: Vec<HostTask<W::Cond>>,
}

impl<W: World> Simulation<W> {
    pub fn new(world: W) -> Self {
        Self {
            world: Rc::new(RefCell::new(world)),
            tasks: Vec::new(),
        }
    }

    pub fn world(&self) -> &Shared<W> {
        &self.world
    }

    pub fn now(&self) -> Nanos {
        self.world.borrow().clock().now()
    }

    /// Registers a host program for `rank`. Tasks are polled in spawn order.
    pub fn spawn<F>(&mut self, rank: usize, program: F) -> TaskId
    where
        F: Future<Output = Result<()>> + 'static,
    {
        let id = TaskId(self.tasks.len());
        self.tasks.push(HostTask {
            rank,
            state: TaskState::Runnable,
            blocked_on: None,
            program: Some(Box::pin(program)),
        });
        id
    }

    pub fn task_state(&self, id: TaskId) -> &TaskState {
        &self.tasks[id.0].state
    }

    /// Runs until no task can make progress and no event is pending.
    ///
    /// Errors raised by a host program or by event dispatch (simulation
    /// faults) abort the run.
    pub fn run_until_quiescent(&mut self) -> Result<Outcome> {
        loop {
            self.poll_runnable()?;
            let ev = self.world.borrow_mut().clock_mut().pop();
            let Some(ev) = ev else { break };
            match ev.payload {
                Payload::Wake(id) => {
                    self.world.borrow_mut().clock_mut().fired_timers.insert(id);
                }
                Payload::Model(p) => self.world.borrow_mut().dispatch(ev.target, p)?,
            }
        }
        let world = self.world.borrow();
        let time = world.clock().now();
        let blocked: Vec<BlockedTask> = self
            .tasks
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match &t.state {
                TaskState::Blocked(c) => Some(BlockedTask {
                    task: TaskId(i),
                    rank: t.rank,
                    condition: c.clone(),
                }),
                _ => None,
            })
            .collect();
        if blocked.is_empty() {
            Ok(Outcome::Completed { time })
        } else {
            Ok(Outcome::Deadlock(DeadlockReport {
                time,
                blocked,
                unfired: world.unfired_work(),
            }))
        }
    }

    fn poll_runnable(&mut self) -> Result<()> {
        let waker = Waker::noop();
        let mut cx = Context::from_waker(waker);
        loop {
            let mut progressed = false;
            for i in 0..self.tasks.len() {
                let ready = match &self.tasks[i].state {
                    TaskState::Finished => false,
                    TaskState::Runnable => true,
                    TaskState::Blocked(_) => {
                        let cond = self.tasks[i].blocked_on.as_ref().expect("blocked task");
                        condition_holds(&*self.world.borrow(), cond)
                    }
                };
                if !ready {
                    continue;
                }
                progressed = true;
                self.world.borrow_mut().clock_mut().current_task = Some(TaskId(i));
                let program = self.tasks[i].program.as_mut().expect("live task");
                let res = program.as_mut().poll(&mut cx);
                let pending = {
                    let mut w = self.world.borrow_mut();
                    let clock = w.clock_mut();
                    clock.current_task = None;
                    clock.pending_block.take()
                };
                let task = &mut self.tasks[i];
                match res {
                    Poll::Ready(Ok(())) => {
                        task.state = TaskState::Finished;
                        task.blocked_on = None;
                        task.program = None;
                    }
                    Poll::Ready(Err(e)) => {
                        return Err(Error::Task {
                            task: i,
                            rank: task.rank,
                            source: Box::new(e),
                        })
                    }
                    Poll::Pending => {
                        let cond = pending.ok_or(Error::SilentPending { task: i })?;
                        task.state = TaskState::Blocked(cond.to_string());
                        task.blocked_on = Some(cond);
                    }
                }
            }
            if !progressed {
                return Ok(());
            }
        }
    }
}
