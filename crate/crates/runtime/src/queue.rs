//! Bounded single-producer/single-consumer queues that drop the oldest entry
//! instead of blocking the producer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_queue::ArrayQueue;

struct Shared<T> {
    queue: ArrayQueue<T>,
    evictions: AtomicU64,
}

/// Sending half. Not `Clone`, so there is exactly one producer.
pub struct Producer<T> {
    shared: Arc<Shared<T>>,
}

/// Receiving half. Not `Clone`, so there is exactly one consumer.
pub struct Consumer<T> {
    shared: Arc<Shared<T>>,
}

pub fn spsc<T>(capacity: usize) -> (Producer<T>, Consumer<T>) {
    let shared = Arc::new(Shared {
        queue: ArrayQueue::new(capacity.max(1)),
        evictions: AtomicU64::new(0),
    });
    (
        Producer {
            shared: Arc::clone(&shared),
        },
        Consumer { shared },
    )
}

impl<T> Producer<T> {
    /// Enqueues without blocking. Returns the evicted oldest entry when full.
    pub fn push(&self, item: T) -> Option<T> {
        let evicted = self.shared.queue.force_push(item);
        if evicted.is_some() {
            self.shared.evictions.fetch_add(1, Ordering::Relaxed);
        }
        evicted
    }

    pub fn evictions(&self) -> u64 {
        self.shared.evictions.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.shared.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.shared.queue.capacity()
    }
}

impl<T> Consumer<T> {
    pub fn pop(&self) -> Option<T> {
        self.shared.queue.pop()
    }

    pub fn evictions(&self) -> u64 {
        self.shared.evictions.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.shared.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_within_capacity() {
        let (tx, rx) = spsc(8);
        for i in 0..5 {
            assert!(tx.push(i).is_none());
        }
        assert_eq!(tx.len(), 5);
        let got: Vec<i32> = std::iter::from_fn(|| rx.pop()).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn overflow_drops_oldest() {
        let (tx, rx) = spsc(1);
        tx.push('a');
        assert_eq!(tx.push('b'), Some('a'));
        assert_eq!(rx.evictions(), 1);
        assert_eq!(rx.pop(), Some('b'));
        assert_eq!(rx.pop(), None);
    }

    #[test]
    fn survives_thread_handoff() {
        let (tx, rx) = spsc(4);
        let h = std::thread::spawn(move || {
            for i in 0..1000u32 {
                tx.push(i);
            }
            tx.evictions()
        });
        let mut last = None;
        let mut seen = 0u64;
        loop {
            match rx.pop() {
                Some(v) => {
                    if let Some(prev) = last {
                        assert!(v > prev);
                    }
                    last = Some(v);
                    seen += 1;
                    if v == 999 {
                        break;
                    }
                }
                None => std::thread::yield_now(),
            }
        }
        let evicted = h.join().unwrap();
        assert_eq!(seen + evicted + rx.len() as u64, 1000);
    }
}
