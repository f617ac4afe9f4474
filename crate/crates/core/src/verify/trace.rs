//! Execution traces captured for the verification oracles.
//!
//! Events are appended under one mutex, so their indices form a total order
//! that agrees with each thread's program order. Values that other threads
//! act on (a buffer's DSN, the CSN) are published inside
//! [`TraceRecorder::publish`], which keeps the event and the store
//! indivisible: any thread that observes the new value does so after the
//! event was recorded.

use parking_lot::Mutex;

use crate::types::{Key, Ssn, TxnClass, TxnId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    /// First read of `key`, with the SSN the tuple carried at that moment.
    Read { txn: TxnId, key: Key, observed: Ssn },
    /// A write-set value installed in the table.
    WriteApply {
        txn: TxnId,
        key: Key,
        ssn: Ssn,
        value: Vec<u8>,
    },
    /// `txn` finished its write phase and waits in a commit queue.
    Enqueue {
        txn: TxnId,
        ssn: Ssn,
        class: TxnClass,
        buffer: usize,
    },
    /// A buffer's DSN moved to `dsn`.
    Durable { buffer: usize, dsn: Ssn },
    /// The global CSN moved to `csn`.
    Csn { csn: Ssn },
    /// The engine acknowledged the commit of `txn`.
    Commit {
        txn: TxnId,
        ssn: Ssn,
        class: TxnClass,
        buffer: usize,
    },
    /// Everything after this point is lost.
    Crash,
}

#[derive(Debug, Default)]
pub struct TraceRecorder {
    events: Mutex<Vec<Event>>,
}

impl TraceRecorder {
    pub fn new() -> Self {
        TraceRecorder::default()
    }

    pub fn record(&self, event: Event) {
        self.events.lock().push(event);
    }

    /// Runs `publish` and records the event it returns without letting any
    /// other event in between.
    pub fn publish<R>(&self, publish: impl FnOnce() -> (Option<Event>, R)) -> R {
        let mut events = self.events.lock();
        let (event, out) = publish();
        if let Some(event) = event {
            events.push(event);
        }
        out
    }

    pub fn crash(&self) {
        let mut events = self.events.lock();
        if !events.contains(&Event::Crash) {
            events.push(Event::Crash);
        }
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> ExecutionTrace {
        ExecutionTrace {
            events: self.events.lock().clone(),
        }
    }
}

/// An ordered list of events; the index of an event is its position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecutionTrace {
    pub events: Vec<Event>,
}

impl ExecutionTrace {
    pub fn new(events: Vec<Event>) -> Self {
        ExecutionTrace { events }
    }

    /// Events up to, not including, the first crash.
    pub fn before_crash(&self) -> &[Event] {
        let end = self
            .events
            .iter()
            .position(|e| matches!(e, Event::Crash))
            .unwrap_or(self.events.len());
        &self.events[..end]
    }

    pub fn crashed(&self) -> bool {
        self.events.iter().any(|e| matches!(e, Event::Crash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_after_crash_are_cut() {
        let rec = TraceRecorder::new();
        rec.record(Event::Csn { csn: Ssn(1) });
        rec.crash();
        rec.crash();
        rec.record(Event::Csn { csn: Ssn(2) });
        let trace = rec.snapshot();
        assert!(trace.crashed());
        assert_eq!(trace.before_crash(), &[Event::Csn { csn: Ssn(1) }]);
        assert_eq!(trace.events.len(), 3);
    }

    #[test]
    fn publish_skips_absent_event() {
        let rec = TraceRecorder::new();
        let v = rec.publish(|| (None, 5));
        assert_eq!(v, 5);
        assert!(rec.is_empty());
    }
}
