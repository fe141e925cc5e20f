//! Deterministic discrete-event engine: simulation clock, event queue
//! ordered by (time, insertion sequence), seeded random source, and the
//! run trace.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::netsim::Packet;
use crate::time::SimTime;
use crate::trace::{Trace, TraceRecord};

/// Payload of a scheduled event.
#[derive(Debug, Clone)]
pub enum EventKind {
    /// A packet arrives at one receiver.
    PacketDelivery { packet: Packet, receiver: String },
    /// A node's outbound message enters the network after its processing
    /// delay.
    PacketSend {
        src: String,
        /// `None` means broadcast.
        dst: Option<String>,
        payload: Vec<u8>,
        origin_stamp: Option<SimTime>,
    },
    TimerFire {
        node: String,
        timer: String,
        generation: u64,
    },
    FaultApply { index: usize },
    /// Marks the start of co-simulation window `index`.
    WindowBoundary { index: u64 },
    /// A datagram handed in by the gateway, stamped at a window boundary.
    ExternalInjection { src: String, payload: Vec<u8> },
}

#[derive(Debug)]
pub struct SimEvent {
    pub at: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.0.at == other.0.at && self.0.seq == other.0.seq
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap, we want the earliest (at, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.at, other.0.seq).cmp(&(self.0.at, self.0.seq))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("SCHEDULE_IN_PAST: event at {at} but clock is {clock}")]
    ScheduleInPast { at: SimTime, clock: SimTime },
}

pub struct Engine {
    clock: SimTime,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    rng: ChaCha8Rng,
    pub trace: Trace,
}

impl Engine {
    pub fn new(seed: u64) -> Self {
        Engine {
            clock: SimTime::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Trace::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueues an event; events may not be scheduled in the past.
    pub fn schedule(&mut self, at: SimTime, kind: EventKind) -> Result<(), ScheduleError> {
        if at < self.clock {
            return Err(ScheduleError::ScheduleInPast { at, clock: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(SimEvent { at, seq, kind }));
        Ok(())
    }

    /// Pops the next event strictly before `t`, advancing the clock to it.
    pub fn pop_before(&mut self, t: SimTime) -> Option<SimEvent> {
        if self.queue.peek().map(|q| q.0.at < t).unwrap_or(false) {
            let ev = self.queue.pop().unwrap().0;
            debug_assert!(ev.at >= self.clock);
            self.clock = ev.at;
            Some(ev)
        } else {
            None
        }
    }

    /// Processes all events with timestamp in `[clock, t)` through the
    /// handler, then sets the clock to `t`. Events scheduled by the handler
    /// inside the window are processed in the same call.
    pub fn run_until<F>(&mut self, t: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Engine, SimEvent),
    {
        let mut processed = 0;
        while let Some(ev) = self.pop_before(t) {
            handler(self, ev);
            processed += 1;
        }
        self.clock = t;
        processed
    }

    /// Next 64-bit draw from the run's single PRNG stream. The `_purpose`
    /// tag documents the draw site; draws happen only inside event
    /// processing, in processing order.
    pub fn next_u64(&mut self, _purpose: &str) -> u64 {
        self.rng.next_u64()
    }

    /// Next unit-interval draw in `[0, 1)`.
    pub fn next_unit(&mut self, _purpose: &str) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn record(&mut self, rec: TraceRecord) {
        self.trace.push(rec);
    }
}
