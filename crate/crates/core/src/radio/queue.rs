use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// Virtual time in milliseconds.
pub type TimeMs = u64;

struct Entry<E> {
    time: TimeMs,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Pending events ordered by `(time, insertion sequence)`.
///
/// Equal-time events come out in the order they were scheduled, so a run is
/// a pure function of its inputs.
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    seq: u64,
    now: TimeMs,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> TimeMs {
        self.now
    }

    /// Schedules at an absolute time; times in the past are moved to `now`.
    pub fn schedule_at(&mut self, time: TimeMs, event: E) {
        let time = time.max(self.now);
        self.heap.push(Reverse(Entry {
            time,
            seq: self.seq,
            event,
        }));
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: TimeMs, event: E) {
        self.schedule_at(self.now + delay, event);
    }

    pub fn peek_time(&self) -> Option<TimeMs> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    pub fn pop(&mut self) -> Option<(TimeMs, E)> {
        let Reverse(entry) = self.heap.pop()?;
        debug_assert!(entry.time >= self.now);
        self.now = entry.time;
        Some((entry.time, entry.event))
    }

    /// Moves the clock forward without dequeuing, never past the next
    /// pending event.
    pub fn advance_to(&mut self, time: TimeMs) {
        let limit = self.peek_time().map_or(time, |next| time.min(next));
        self.now = self.now.max(limit);
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_break_by_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule_at(5, "b");
        q.schedule_at(0, "a1");
        q.schedule_at(0, "a2");
        q.schedule_at(5, "c");
        let order: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
        assert_eq!(order, vec![(0, "a1"), (0, "a2"), (5, "b"), (5, "c")]);
    }

    #[test]
    fn past_events_clamp_to_now() {
        let mut q = EventQueue::new();
        q.schedule_at(10, 1);
        assert_eq!(q.pop(), Some((10, 1)));
        q.schedule_at(3, 2);
        assert_eq!(q.pop(), Some((10, 2)));
    }

    proptest! {
        #[test]
        fn time_never_decreases(times in prop::collection::vec(0u64..1000, 1..200), extra in prop::collection::vec(0u64..50, 0..200)) {
            let mut q = EventQueue::new();
            for (i, t) in times.iter().enumerate() {
                q.schedule_at(*t, i);
            }
            let mut last = 0;
            let mut extra = extra.into_iter();
            while let Some((t, _)) = q.pop() {
                prop_assert!(t >= last);
                last = t;
                if let Some(d) = extra.next() {
                    q.schedule_in(d, usize::MAX);
                }
            }
        }
    }
}
