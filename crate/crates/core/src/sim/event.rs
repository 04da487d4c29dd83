use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Result, SimError};
use crate::time::SimTime;

#[derive(Debug, Clone)]
pub struct Event<K> {
    pub time: SimTime,
    pub sequence: u64,
    pub kind: K,
}

impl<K> PartialEq for Event<K> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.sequence) == (other.time, other.sequence)
    }
}

impl<K> Eq for Event<K> {}

impl<K> PartialOrd for Event<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Event<K> {
    /// Reversed so that `BinaryHeap` pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.sequence).cmp(&(self.time, self.sequence))
    }
}

/// Min-queue over (time, insertion sequence).
#[derive(Debug)]
pub struct EventQueue<K> {
    heap: BinaryHeap<Event<K>>,
    now: SimTime,
    next_seq: u64,
    popped: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            popped: 0,
        }
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Number of events processed so far.
    pub fn processed(&self) -> u64 {
        self.popped
    }

    pub fn schedule(&mut self, time: SimTime, kind: K) -> Result<()> {
        if time < self.now {
            return Err(SimError::Invariant {
                event_index: self.popped,
                message: format!("event scheduled at {time} before the clock {}", self.now),
            });
        }
        self.heap.push(Event {
            time,
            sequence: self.next_seq,
            kind,
        });
        self.next_seq += 1;
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: SimTime, kind: K) -> Result<()> {
        self.schedule(self.now + delay, kind)
    }

    pub fn pop(&mut self) -> Option<Event<K>> {
        let ev = self.heap.pop()?;
        self.now = ev.time;
        self.popped += 1;
        Some(ev)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_by_time_then_insertion() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), "b").unwrap();
        q.schedule(SimTime(5), "a").unwrap();
        q.schedule(SimTime(10), "c").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.pop().map(|e| e.kind)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
        assert_eq!(q.now(), SimTime(10));
        assert_eq!(q.processed(), 3);
    }

    #[test]
    fn rejects_the_past() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(10), ()).unwrap();
        q.pop();
        assert!(q.schedule(SimTime(9), ()).is_err());
        assert!(q.schedule(SimTime(10), ()).is_ok());
    }
}
