//! Replica chains: placement, membership changes and load-balancing
//! decisions. The replication protocol itself runs in [`crate::cluster`].

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::appcode::{field, node_field, run, HelperEnv, HookKind, ScratchMap, TrapCode, VerifiedProgram};
use crate::ids::{AppId, NodeId};
use crate::monitor::FiredEvent;

/// Monitoring snapshot of one node as seen by placement and rebalancing code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeView {
    pub node_id: NodeId,
    pub load_milli: u64,
    pub free_bytes: u64,
    pub x_micro: i64,
    pub y_micro: i64,
    pub wear_milli: u64,
    pub rtt_us_to_origin: u64,
    pub healthy: bool,
}

impl NodeView {
    pub fn new(node_id: NodeId) -> Self {
        NodeView { node_id, healthy: true, ..Default::default() }
    }

    pub fn field(&self, id: u64) -> Option<u64> {
        Some(match id {
            node_field::NODE_ID => self.node_id.0,
            node_field::LOAD_MILLI => self.load_milli,
            node_field::FREE_BYTES => self.free_bytes,
            node_field::X_MICRO => self.x_micro as u64,
            node_field::Y_MICRO => self.y_micro as u64,
            node_field::WEAR_MILLI => self.wear_milli,
            node_field::RTT_US_TO_ORIGIN => self.rtt_us_to_origin,
            node_field::HEALTHY => u64::from(self.healthy),
            _ => return None,
        })
    }

    /// Squared Euclidean distance to a point, as appcode computes it.
    pub fn dist2(&self, x: i64, y: i64) -> u64 {
        let dx = (self.x_micro as u64).wrapping_sub(x as u64);
        let dy = (self.y_micro as u64).wrapping_sub(y as u64);
        dx.wrapping_mul(dx).wrapping_add(dy.wrapping_mul(dy))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("replica chain must not be empty")]
    Empty,
    #[error("node {0} appears twice in the chain")]
    Duplicate(NodeId),
    #[error("state transfer to joining replicas timed out")]
    SyncTimeout,
    #[error("program hook {0} is not {1}")]
    HookMismatch(HookKind, HookKind),
}

/// Ordered replicas of one app: writes enter at the head, reads are served
/// by the tail.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplicaChain {
    pub app_id: AppId,
    nodes: Vec<NodeId>,
    pub epoch: u64,
}

fn check_members(nodes: &[NodeId]) -> Result<(), ChainError> {
    if nodes.is_empty() {
        return Err(ChainError::Empty);
    }
    for (i, n) in nodes.iter().enumerate() {
        if nodes[..i].contains(n) {
            return Err(ChainError::Duplicate(*n));
        }
    }
    Ok(())
}

impl ReplicaChain {
    pub fn new(app_id: AppId, nodes: Vec<NodeId>) -> Result<Self, ChainError> {
        check_members(&nodes)?;
        Ok(ReplicaChain { app_id, nodes, epoch: 1 })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn head(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn tail(&self) -> NodeId {
        *self.nodes.last().expect("chains are non-empty")
    }

    pub fn contains(&self, n: NodeId) -> bool {
        self.nodes.contains(&n)
    }

    pub fn position(&self, n: NodeId) -> Option<usize> {
        self.nodes.iter().position(|&m| m == n)
    }

    pub fn successor(&self, n: NodeId) -> Option<NodeId> {
        self.position(n).and_then(|i| self.nodes.get(i + 1).copied())
    }

    pub fn predecessor(&self, n: NodeId) -> Option<NodeId> {
        self.position(n).filter(|&i| i > 0).map(|i| self.nodes[i - 1])
    }

    /// The chain after a membership change; the epoch always advances, even
    /// when the membership is unchanged.
    pub fn reconfigure(&self, new_nodes: Vec<NodeId>) -> Result<ReplicaChain, ChainError> {
        check_members(&new_nodes)?;
        Ok(ReplicaChain { app_id: self.app_id, nodes: new_nodes, epoch: self.epoch + 1 })
    }
}

impl fmt::Display for ReplicaChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&join_nodes(&self.nodes))
    }
}

/// `1,2,3`, or `-` for an empty list.
pub fn join_nodes(nodes: &[NodeId]) -> String {
    if nodes.is_empty() {
        return "-".into();
    }
    nodes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}

/// Inputs describing where an app's users are.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AppPlacement {
    pub app_id: AppId,
    pub origin: NodeId,
    pub origin_x: i64,
    pub origin_y: i64,
    pub replica_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementWarning {
    /// The program emitted no nodes.
    EmptyPlacement,
    /// The program trapped, e.g. by emitting an unknown node.
    Trap(TrapCode),
}

impl fmt::Display for PlacementWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementWarning::EmptyPlacement => f.write_str("empty_placement"),
            PlacementWarning::Trap(c) => write!(f, "trap:{}", c.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub chain: ReplicaChain,
    pub warning: Option<PlacementWarning>,
}

/// Picks an app's initial chain. Without appcode the app is not replicated:
/// the chain is just its origin node. With appcode, the emitted nodes form
/// the chain in emit order; an empty or trapped run falls back to the
/// default with a warning.
pub fn place_replicas(
    app: &AppPlacement,
    candidates: &[NodeView],
    placement_ac: Option<(&VerifiedProgram, &mut ScratchMap)>,
) -> Result<Placement, ChainError> {
    let default = || ReplicaChain::new(app.app_id, vec![app.origin]);
    let Some((ac, map)) = placement_ac else {
        return Ok(Placement { chain: default()?, warning: None });
    };
    if ac.hook_kind() != HookKind::ReplicaPlace {
        return Err(ChainError::HookMismatch(ac.hook_kind(), HookKind::ReplicaPlace));
    }
    let ctx = BTreeMap::from([
        (field::PLACE_ORIGIN_NODE, app.origin.0),
        (field::PLACE_REPLICA_COUNT, app.replica_count),
        (field::PLACE_ORIGIN_X, app.origin_x as u64),
        (field::PLACE_ORIGIN_Y, app.origin_y as u64),
        (field::PLACE_APP_ID, app.app_id.0),
    ]);
    let mut env = HelperEnv { ctx, nodes: candidates.to_vec(), map: std::mem::take(map), ..Default::default() };
    let res = run(ac, &mut env);
    *map = env.map;
    let warning = match res.trap() {
        Some(code) => Some(PlacementWarning::Trap(code)),
        None if res.output_nodes.is_empty() => Some(PlacementWarning::EmptyPlacement),
        None => None,
    };
    let chain = match warning {
        Some(_) => default()?,
        None => ReplicaChain::new(app.app_id, res.output_nodes)?,
    };
    Ok(Placement { chain, warning })
}

/// Lists the chain's members first, in chain order, followed by every other
/// node in id order. Change hooks rely on this layout.
pub fn chain_first_views(chain: &[NodeId], all: &[NodeView]) -> Vec<NodeView> {
    let mut out: Vec<NodeView> = chain.iter().filter_map(|n| all.iter().find(|v| v.node_id == *n).copied()).collect();
    let mut rest: Vec<NodeView> = all.iter().filter(|v| !chain.contains(&v.node_id)).copied().collect();
    rest.sort_by_key(|v| v.node_id);
    out.extend(rest);
    out
}

/// Extra context for LOAD_BALANCE and MIGRATION programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChangeContext {
    pub origin_x: i64,
    pub origin_y: i64,
    pub replica_count: u64,
    pub eol_node: Option<NodeId>,
}

/// What a LOAD_BALANCE or MIGRATION program decided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChangeDecision {
    /// Nothing emitted.
    NoChange,
    Trap(TrapCode),
    NewChain(Vec<NodeId>),
}

pub(crate) fn run_change_hook(
    hook: HookKind,
    event: &FiredEvent,
    chain: &ReplicaChain,
    ac: &VerifiedProgram,
    views: &[NodeView],
    extra: &ChangeContext,
    map: &mut ScratchMap,
    now: u64,
) -> Result<ChangeDecision, ChainError> {
    if ac.hook_kind() != hook {
        return Err(ChainError::HookMismatch(ac.hook_kind(), hook));
    }
    let mut ctx = BTreeMap::from([
        (field::CHG_TRIGGER_ID, event.trigger_id.0),
        (field::CHG_CAUSE_NODE, event.node.0),
        (field::CHG_CAUSE_METRIC, event.metric_code),
        (field::CHG_CAUSE_VALUE, event.value),
        (field::CHG_CHAIN_LEN, chain.len() as u64),
        (field::CHG_ORIGIN_X, extra.origin_x as u64),
        (field::CHG_ORIGIN_Y, extra.origin_y as u64),
        (field::CHG_REPLICA_COUNT, extra.replica_count),
        (field::CHG_EOL_NODE, extra.eol_node.map_or(0, |n| n.0)),
    ]);
    for (i, n) in chain.nodes().iter().enumerate() {
        ctx.insert(field::CHG_CHAIN_BASE + i as u32, n.0);
    }
    let mut env = HelperEnv {
        ctx,
        nodes: chain_first_views(chain.nodes(), views),
        map: std::mem::take(map),
        now_ns: now,
        ..Default::default()
    };
    let res = run(ac, &mut env);
    *map = env.map;
    Ok(match res.trap() {
        Some(code) => ChangeDecision::Trap(code),
        None if res.output_nodes.is_empty() => ChangeDecision::NoChange,
        None => ChangeDecision::NewChain(res.output_nodes),
    })
}

/// Runs the load-balancing program for a fired trigger. Any emitted list,
/// including the current one, becomes the next chain.
pub fn rebalance(
    event: &FiredEvent,
    chain: &ReplicaChain,
    lb_ac: &VerifiedProgram,
    views: &[NodeView],
    extra: &ChangeContext,
    map: &mut ScratchMap,
) -> Result<ChangeDecision, ChainError> {
    run_change_hook(HookKind::LoadBalance, event, chain, lb_ac, views, extra, map, event.t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appcode::{library, load};
    use crate::ids::TriggerId;

    fn view(id: u64, free: u64, load_milli: u64, x: i64, y: i64) -> NodeView {
        NodeView { free_bytes: free, load_milli, x_micro: x, y_micro: y, ..NodeView::new(NodeId(id)) }
    }

    fn lib(name: &str) -> VerifiedProgram {
        load(library::source(name).unwrap()).unwrap()
    }

    fn app(count: u64) -> AppPlacement {
        AppPlacement { app_id: AppId(1), origin: NodeId(3), replica_count: count, ..Default::default() }
    }

    #[test]
    fn default_is_origin_only() {
        let p = place_replicas(&app(3), &[view(1, 1, 0, 0, 0), view(3, 1, 0, 0, 0)], None).unwrap();
        assert_eq!(p.chain.nodes(), [NodeId(3)]);
        assert_eq!(p.chain.epoch, 1);
    }

    #[test]
    fn top_free_bytes() {
        const GB: u64 = 1 << 30;
        let views = [view(1, 10 * GB, 0, 0, 0), view(2, 50 * GB, 0, 0, 0), view(3, 30 * GB, 0, 0, 0)];
        let ac = lib("place_topk_free");
        let p = place_replicas(&app(2), &views, Some((&ac, &mut ScratchMap::new()))).unwrap();
        assert_eq!(p.chain.nodes(), [NodeId(2), NodeId(3)]);
    }

    #[test]
    fn nearest_head_skips_unhealthy() {
        let mut views = vec![view(1, 0, 0, 500, 500), view(2, 0, 0, 10, 10), view(3, 0, 0, -3, 4)];
        views[2].healthy = false;
        let ac = lib("place_nearest");
        let p = place_replicas(&app(2), &views, Some((&ac, &mut ScratchMap::new()))).unwrap();
        assert_eq!(p.chain.nodes(), [NodeId(2), NodeId(1)]);
    }

    #[test]
    fn empty_and_unknown_emits_fall_back() {
        let none = load(".program p replica_place\nmov r0, 0\nexit").unwrap();
        let p = place_replicas(&app(1), &[view(3, 0, 0, 0, 0)], Some((&none, &mut ScratchMap::new()))).unwrap();
        assert_eq!((p.chain.nodes(), p.warning), (&[NodeId(3)][..], Some(PlacementWarning::EmptyPlacement)));
        let bad = load(".program p replica_place\nmov r1, 99\ncall emit_node\nmov r0, 0\nexit").unwrap();
        let p = place_replicas(&app(1), &[view(3, 0, 0, 0, 0)], Some((&bad, &mut ScratchMap::new()))).unwrap();
        assert_eq!(p.warning, Some(PlacementWarning::Trap(TrapCode::HelperFault)));
    }

    #[test]
    fn reconfigure_bumps_epoch() {
        let c = ReplicaChain::new(AppId(1), vec![NodeId(1)]).unwrap();
        let c2 = c.reconfigure(vec![NodeId(1), NodeId(2)]).unwrap();
        assert_eq!(c2.epoch, 2);
        assert_eq!(c2.reconfigure(vec![NodeId(1), NodeId(2)]).unwrap().epoch, 3);
        assert_eq!(c.reconfigure(vec![]), Err(ChainError::Empty));
        assert_eq!(c.reconfigure(vec![NodeId(2), NodeId(2)]), Err(ChainError::Duplicate(NodeId(2))));
        assert_eq!(c2.successor(NodeId(1)), Some(NodeId(2)));
        assert_eq!(c2.predecessor(NodeId(1)), None);
    }

    #[test]
    fn lb_swaps_least_loaded_head() {
        let ev = FiredEvent { trigger_id: TriggerId(1), node: NodeId(1), metric_code: 0, value: 950, t: 0 };
        let chain = ReplicaChain::new(AppId(1), vec![NodeId(1), NodeId(2), NodeId(3)]).unwrap();
        let views = [view(1, 0, 950, 0, 0), view(2, 0, 400, 0, 0), view(3, 0, 100, 0, 0), view(4, 0, 0, 0, 0)];
        let ac = lib("lb_swap_least_loaded");
        let d = rebalance(&ev, &chain, &ac, &views, &ChangeContext::default(), &mut ScratchMap::new()).unwrap();
        assert_eq!(d, ChangeDecision::NewChain(vec![NodeId(3), NodeId(1), NodeId(2)]));
        let calm = [view(1, 0, 10, 0, 0), view(2, 0, 400, 0, 0), view(3, 0, 100, 0, 0)];
        let d = rebalance(&ev, &chain, &ac, &calm, &ChangeContext::default(), &mut ScratchMap::new()).unwrap();
        assert_eq!(d, ChangeDecision::NoChange);
    }
}
