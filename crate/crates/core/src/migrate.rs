//! Trigger-driven session migration: planning with MIGRATION appcode and the
//! freeze / copy / switch / replay state machine shared with every chain
//! membership change.

use std::collections::BTreeSet;
use std::fmt;

use crate::appcode::{HookKind, ScratchMap, TrapCode, VerifiedProgram};
use crate::chain::{run_change_hook, ChainError, ChangeContext, ChangeDecision, NodeView, ReplicaChain};
use crate::ids::{AppId, NodeId, SimTime, NS_PER_MS, NS_PER_S};
use crate::monitor::FiredEvent;

pub const COPY_TIMEOUT_NS: u64 = 5 * NS_PER_S;
pub const SNAPSHOT_RETRY_NS: u64 = 500 * NS_PER_MS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationPlan {
    pub app_id: AppId,
    pub old_chain: ReplicaChain,
    pub new_nodes: Vec<NodeId>,
    pub cause: FiredEvent,
    pub views: Vec<NodeView>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanOutcome {
    Plan(MigrationPlan),
    /// Nothing emitted, or the current chain emitted unchanged.
    NoChange,
    Trap(TrapCode),
}

/// Runs the MIGRATION program and turns its output into a plan.
pub fn plan(
    event: &FiredEvent,
    chain: &ReplicaChain,
    mig_ac: &VerifiedProgram,
    views: &[NodeView],
    extra: &ChangeContext,
    map: &mut ScratchMap,
) -> Result<PlanOutcome, ChainError> {
    Ok(match run_change_hook(HookKind::Migration, event, chain, mig_ac, views, extra, map, event.t)? {
        ChangeDecision::NoChange => PlanOutcome::NoChange,
        ChangeDecision::Trap(code) => PlanOutcome::Trap(code),
        ChangeDecision::NewChain(nodes) if nodes == chain.nodes() => PlanOutcome::NoChange,
        ChangeDecision::NewChain(new_nodes) => PlanOutcome::Plan(MigrationPlan {
            app_id: chain.app_id,
            old_chain: chain.clone(),
            new_nodes,
            cause: *event,
            views: views.to_vec(),
        }),
    })
}

/// Why a chain is changing membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    Migration(FiredEvent),
    Rebalance(FiredEvent),
    /// A retiring node leaves the chain; its data is erased afterwards.
    EndOfLife(NodeId),
    /// Explicit reconfiguration.
    Manual,
}

impl ChangeKind {
    pub fn reason(&self) -> &'static str {
        match self {
            ChangeKind::Migration(_) => "migrate",
            ChangeKind::Rebalance(_) => "rebalance",
            ChangeKind::EndOfLife(_) => "eol",
            ChangeKind::Manual => "manual",
        }
    }

    pub fn is_migration(&self) -> bool {
        matches!(self, ChangeKind::Migration(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Frozen; waiting for writes already past the head to commit.
    Draining,
    /// Joining replicas are receiving the old tail's snapshot.
    Copying,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Draining => "draining",
            Phase::Copying => "copying",
        })
    }
}

/// An in-flight membership change of one app. `W` is the buffered write
/// type.
#[derive(Debug, Clone)]
pub struct Transition<W> {
    pub id: u64,
    pub kind: ChangeKind,
    pub old: ReplicaChain,
    /// Empty only when a retiring node was the app's last replica.
    pub new_nodes: Vec<NodeId>,
    pub phase: Phase,
    pub started_at: SimTime,
    /// Joiners still waiting for their snapshot.
    pub awaiting: BTreeSet<NodeId>,
    /// Joiners that installed a snapshot.
    pub installed: BTreeSet<NodeId>,
    /// Client writes that arrived while frozen, in arrival order.
    pub buffered: Vec<W>,
}

impl<W> Transition<W> {
    pub fn new(id: u64, kind: ChangeKind, old: ReplicaChain, new_nodes: Vec<NodeId>, now: SimTime) -> Self {
        let awaiting = new_nodes.iter().filter(|n| !old.contains(**n)).copied().collect();
        Transition {
            id,
            kind,
            old,
            new_nodes,
            phase: Phase::Draining,
            started_at: now,
            awaiting,
            installed: BTreeSet::new(),
            buffered: Vec::new(),
        }
    }

    pub fn joiners(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.new_nodes.iter().copied().filter(|n| !self.old.contains(*n))
    }

    pub fn departing(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.old.nodes().iter().copied().filter(|n| !self.new_nodes.contains(n))
    }

    pub fn deadline(&self) -> SimTime {
        self.started_at + COPY_TIMEOUT_NS
    }

    /// Whether `node` takes part on either side of the change.
    pub fn involves(&self, node: NodeId) -> bool {
        self.old.contains(node) || self.new_nodes.contains(&node)
    }

    /// Records a completed snapshot install; true once every joiner has one.
    pub fn mark_installed(&mut self, node: NodeId) -> bool {
        if self.awaiting.remove(&node) {
            self.installed.insert(node);
        }
        self.awaiting.is_empty()
    }
}
