//! In-process publish/subscribe with per-subscriber ordered queues.

use std::sync::mpsc::{self, Receiver, Sender};

use super::ContextEvent;
use crate::predicate::LabelPattern;

struct Subscriber {
    id: u64,
    pattern: LabelPattern,
    tx: Sender<ContextEvent>,
}

/// Receiving end of a subscription. `Send`, so consumers may live on their
/// own threads.
pub struct Subscription {
    pub id: u64,
    pub pattern: LabelPattern,
    rx: Receiver<ContextEvent>,
}

impl Subscription {
    pub fn try_next(&self) -> Option<ContextEvent> {
        self.rx.try_recv().ok()
    }

    /// Everything queued so far, in publication order.
    pub fn drain(&self) -> Vec<ContextEvent> {
        self.rx.try_iter().collect()
    }

    /// Blocks until the next event or until the broker is dropped.
    pub fn recv(&self) -> Option<ContextEvent> {
        self.rx.recv().ok()
    }
}

#[derive(Default)]
pub struct Broker {
    next_id: u64,
    subscribers: Vec<Subscriber>,
}

impl Broker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, pattern: LabelPattern) -> Subscription {
        let (tx, rx) = mpsc::channel();
        self.next_id += 1;
        self.subscribers.push(Subscriber {
            id: self.next_id,
            pattern: pattern.clone(),
            tx,
        });
        Subscription {
            id: self.next_id,
            pattern,
            rx,
        }
    }

    pub fn unsubscribe(&mut self, id: u64) {
        self.subscribers.retain(|s| s.id != id);
    }

    /// Delivers to every matching subscriber; returns the delivery count.
    /// Subscribers whose receiver is gone are dropped.
    pub fn publish(&mut self, event: &ContextEvent) -> usize {
        let mut delivered = 0;
        self.subscribers.retain(|s| {
            if !s.pattern.matches(&event.hlc.label) {
                return true;
            }
            match s.tx.send(event.clone()) {
                Ok(()) => {
                    delivered += 1;
                    true
                }
                Err(_) => false,
            }
        });
        delivered
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("subscribers", &self.subscribers.len())
            .finish()
    }
}
