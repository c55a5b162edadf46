//! Seeded discrete-event simulator: virtual clock, link latency model,
//! message delivery and fault injection.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ids::{ClientId, NodeId, SimTime, NS_PER_US};

/// Addressee of a scheduled event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Entity {
    Node(NodeId),
    Client(ClientId),
    Coordinator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<P> {
    pub t: SimTime,
    pub seq: u64,
    pub target: Entity,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinkModel {
    pub a: NodeId,
    pub b: NodeId,
    pub base_latency_us: u64,
    pub jitter_us: u64,
    pub partitioned_until: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Partition { a: NodeId, b: NodeId, duration_ns: u64 },
    Crash(NodeId),
    Restart(NodeId),
    Wear { node: NodeId, milli: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("no link between nodes {0} and {1}")]
    UnknownLink(NodeId, NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    /// Scheduled; arrives after `latency_ns`.
    Delivered {
        handle: EventHandle,
        latency_ns: u64,
    },
    Partitioned,
    /// The destination node is down.
    TargetDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeState {
    pub up: bool,
    pub wear_milli: u64,
}

pub struct Sim<P> {
    now: SimTime,
    next_seq: u64,
    queue: BTreeMap<(SimTime, u64), (Entity, P)>,
    due: HashMap<u64, SimTime>,
    rng: ChaCha8Rng,
    nodes: BTreeMap<NodeId, NodeState>,
    links: BTreeMap<(NodeId, NodeId), LinkModel>,
    default_latency_us: u64,
    default_jitter_us: u64,
}

fn link_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl<P> Sim<P> {
    pub fn new(seed: u64) -> Self {
        Sim {
            now: 0,
            next_seq: 0,
            queue: BTreeMap::new(),
            due: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: BTreeMap::new(),
            links: BTreeMap::new(),
            default_latency_us: 1000,
            default_jitter_us: 0,
        }
    }

    /// Latency model for node pairs with no explicit link.
    pub fn set_default_link(&mut self, base_latency_us: u64, jitter_us: u64) {
        self.default_latency_us = base_latency_us;
        self.default_jitter_us = jitter_us;
    }

    pub fn add_node(&mut self, id: NodeId) {
        self.nodes.insert(id, NodeState { up: true, wear_milli: 0 });
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId, base_latency_us: u64, jitter_us: u64) -> Result<(), SimError> {
        self.node(a)?;
        self.node(b)?;
        self.links.insert(link_key(a, b), LinkModel { a, b, base_latency_us, jitter_us, partitioned_until: None });
        Ok(())
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn node(&self, id: NodeId) -> Result<NodeState, SimError> {
        self.nodes.get(&id).copied().ok_or(SimError::UnknownNode(id))
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn is_up(&self, id: NodeId) -> bool {
        self.nodes.get(&id).is_some_and(|n| n.up)
    }

    /// The link between `a` and `b`; pairs without an explicit link use the
    /// default model. A node's link to itself has zero latency.
    pub fn link(&self, a: NodeId, b: NodeId) -> LinkModel {
        if a == b {
            return LinkModel { a, b, base_latency_us: 0, jitter_us: 0, partitioned_until: None };
        }
        self.links.get(&link_key(a, b)).copied().unwrap_or(LinkModel {
            a,
            b,
            base_latency_us: self.default_latency_us,
            jitter_us: self.default_jitter_us,
            partitioned_until: None,
        })
    }

    pub fn is_partitioned(&self, a: NodeId, b: NodeId) -> bool {
        a != b && self.link(a, b).partitioned_until.is_some_and(|until| self.now < until)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, delay_ns: u64, target: Entity, payload: P) -> EventHandle {
        self.schedule_at(self.now.saturating_add(delay_ns), target, payload)
    }

    pub fn schedule_at(&mut self, t: SimTime, target: Entity, payload: P) -> EventHandle {
        let t = t.max(self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((t, seq), (target, payload));
        self.due.insert(seq, t);
        EventHandle(seq)
    }

    /// Returns whether the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        match self.due.remove(&handle.0) {
            Some(t) => self.queue.remove(&(t, handle.0)).is_some(),
            None => false,
        }
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    /// Removes the next event and advances the clock to it.
    pub fn pop(&mut self) -> Option<SimEvent<P>> {
        let ((t, seq), (target, payload)) = self.queue.pop_first()?;
        self.due.remove(&seq);
        self.now = t;
        Some(SimEvent { t, seq, target, payload })
    }

    /// Advances the clock without running anything; used to stop at a horizon.
    pub fn advance_to(&mut self, t: SimTime) {
        self.now = self.now.max(t);
    }

    /// Draws a one-way latency for the link between `a` and `b`.
    pub fn sample_latency_ns(&mut self, a: NodeId, b: NodeId) -> u64 {
        let link = self.link(a, b);
        let jitter = if link.jitter_us == 0 { 0 } else { self.rng.gen_range(0..=link.jitter_us) };
        (link.base_latency_us + jitter) * NS_PER_US
    }

    /// Sends `payload` over the `from`→`to` link to `target`, adding
    /// `extra_ns` of access latency.
    pub fn send(&mut self, from: NodeId, to: NodeId, extra_ns: u64, target: Entity, payload: P) -> Delivery {
        if self.is_partitioned(from, to) {
            return Delivery::Partitioned;
        }
        if let Entity::Node(n) = target {
            if !self.is_up(n) {
                return Delivery::TargetDown;
            }
        }
        let latency_ns = self.sample_latency_ns(from, to) + extra_ns;
        let handle = self.schedule(latency_ns, target, payload);
        Delivery::Delivered { handle, latency_ns }
    }

    /// Applies a fault. Crashing drops every pending event addressed to the
    /// node and returns how many were dropped.
    pub fn inject(&mut self, fault: Fault) -> Result<usize, SimError> {
        match fault {
            Fault::Partition { a, b, duration_ns } => {
                self.node(a)?;
                self.node(b)?;
                let until = self.now.saturating_add(duration_ns);
                let mut link = self.link(a, b);
                link.partitioned_until = Some(link.partitioned_until.map_or(until, |u| u.max(until)));
                self.links.insert(link_key(a, b), link);
                Ok(0)
            }
            Fault::Crash(n) => {
                self.node(n)?;
                self.nodes.get_mut(&n).expect("checked").up = false;
                let doomed: Vec<(SimTime, u64)> =
                    self.queue.iter().filter(|(_, (target, _))| *target == Entity::Node(n)).map(|(k, _)| *k).collect();
                for k in &doomed {
                    self.queue.remove(k);
                    self.due.remove(&k.1);
                }
                Ok(doomed.len())
            }
            Fault::Restart(n) => {
                self.node(n)?;
                self.nodes.get_mut(&n).expect("checked").up = true;
                Ok(0)
            }
            Fault::Wear { node, milli } => {
                self.node(node)?;
                let st = self.nodes.get_mut(&node).expect("checked");
                st.wear_milli = st.wear_milli.max(milli.min(1000));
                Ok(0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> Sim<&'static str> {
        let mut s = Sim::new(7);
        s.add_node(NodeId(1));
        s.add_node(NodeId(2));
        s
    }

    fn drain(s: &mut Sim<&'static str>) -> Vec<&'static str> {
        std::iter::from_fn(|| s.pop().map(|e| e.payload)).collect()
    }

    #[test]
    fn seq_breaks_ties() {
        let mut s = sim();
        s.schedule(0, Entity::Coordinator, "x");
        s.schedule(0, Entity::Coordinator, "y");
        assert_eq!(drain(&mut s), ["x", "y"]);
    }

    #[test]
    fn time_orders_events() {
        let mut s = sim();
        s.schedule(5, Entity::Coordinator, "x");
        s.schedule(3, Entity::Coordinator, "y");
        assert_eq!(drain(&mut s), ["y", "x"]);
        assert_eq!(s.now(), 5);
    }

    #[test]
    fn cancel_prevents_execution() {
        let mut s = sim();
        let h = s.schedule(10, Entity::Coordinator, "x");
        assert!(s.cancel(h));
        assert!(!s.cancel(h));
        assert!(drain(&mut s).is_empty());
    }

    #[test]
    fn zero_jitter_is_exact() {
        let mut s = sim();
        s.add_link(NodeId(1), NodeId(2), 500, 0).unwrap();
        let d = s.send(NodeId(1), NodeId(2), 0, Entity::Node(NodeId(2)), "m");
        assert!(matches!(d, Delivery::Delivered { latency_ns: 500_000, .. }));
        let e = s.pop().unwrap();
        assert_eq!(e.t, 500_000);
    }

    #[test]
    fn partition_drops() {
        let mut s = sim();
        s.inject(Fault::Partition { a: NodeId(2), b: NodeId(1), duration_ns: 3_000_000_000 }).unwrap();
        assert_eq!(s.send(NodeId(1), NodeId(2), 0, Entity::Node(NodeId(2)), "m"), Delivery::Partitioned);
        s.advance_to(3_000_000_000);
        assert!(matches!(s.send(NodeId(1), NodeId(2), 0, Entity::Node(NodeId(2)), "m"), Delivery::Delivered { .. }));
    }

    #[test]
    fn crash_drops_pending_and_wear_is_monotone() {
        let mut s = sim();
        s.schedule(1, Entity::Node(NodeId(2)), "timer");
        s.schedule(1, Entity::Node(NodeId(1)), "other");
        assert_eq!(s.inject(Fault::Crash(NodeId(2))).unwrap(), 1);
        assert_eq!(drain(&mut s), ["other"]);
        assert_eq!(s.send(NodeId(1), NodeId(2), 0, Entity::Node(NodeId(2)), "m"), Delivery::TargetDown);
        s.inject(Fault::Wear { node: NodeId(1), milli: 950 }).unwrap();
        s.inject(Fault::Wear { node: NodeId(1), milli: 100 }).unwrap();
        assert_eq!(s.node(NodeId(1)).unwrap().wear_milli, 950);
        assert_eq!(s.inject(Fault::Crash(NodeId(9))), Err(SimError::UnknownNode(NodeId(9))));
    }
}
