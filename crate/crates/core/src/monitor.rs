//! Metrics sampling, trigger evaluation and end-of-life node selection.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::appcode::{field, run, HelperEnv, HookKind, ScratchMap, TrapCode, VerifiedProgram};
use crate::chain::NodeView;
use crate::ids::{AppId, NodeId, SimTime, TriggerId};

/// Samples kept per node.
pub const SAMPLE_RING: usize = 256;
/// Wear at which the built-in end-of-life trigger fires.
pub const EOL_WEAR_MILLI: u64 = 900;
/// Id reserved for the built-in end-of-life trigger.
pub const EOL_TRIGGER: TriggerId = TriggerId(0);
/// Simulated CPU cost of handling one message.
pub const CPU_MILLI_PER_MSG: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetricsSample {
    pub node_id: NodeId,
    pub t: SimTime,
    pub cpu_milli: u64,
    pub used_bytes: u64,
    pub capacity_bytes: u64,
    pub wear_milli: u64,
    pub rtt_us: BTreeMap<NodeId, u64>,
    pub msgs_in: u64,
    pub msgs_out: u64,
}

/// Utilization model: a fixed background load plus a cost per message
/// handled since the previous sample.
pub fn cpu_milli(base_load_milli: u64, msgs_in: u64, msgs_out: u64) -> u64 {
    (base_load_milli + CPU_MILLI_PER_MSG * (msgs_in + msgs_out)).min(1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    CpuMilli,
    UsedBytes,
    FreeBytes,
    CapacityBytes,
    UsedMilli,
    WearMilli,
    MsgsIn,
    MsgsOut,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::CpuMilli,
        Metric::UsedBytes,
        Metric::FreeBytes,
        Metric::CapacityBytes,
        Metric::UsedMilli,
        Metric::WearMilli,
        Metric::MsgsIn,
        Metric::MsgsOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::CpuMilli => "cpu_milli",
            Metric::UsedBytes => "used_bytes",
            Metric::FreeBytes => "free_bytes",
            Metric::CapacityBytes => "capacity_bytes",
            Metric::UsedMilli => "used_milli",
            Metric::WearMilli => "wear_milli",
            Metric::MsgsIn => "msgs_in",
            Metric::MsgsOut => "msgs_out",
        }
    }

    /// Numeric code passed to appcode as the cause metric.
    pub fn code(self) -> u64 {
        Metric::ALL.iter().position(|m| *m == self).expect("listed") as u64 + 1
    }

    pub fn value(self, s: &MetricsSample) -> u64 {
        match self {
            Metric::CpuMilli => s.cpu_milli,
            Metric::UsedBytes => s.used_bytes,
            Metric::FreeBytes => s.capacity_bytes.saturating_sub(s.used_bytes),
            Metric::CapacityBytes => s.capacity_bytes,
            Metric::UsedMilli => (s.used_bytes * 1000).checked_div(s.capacity_bytes).unwrap_or(1000),
            Metric::WearMilli => s.wear_milli,
            Metric::MsgsIn => s.msgs_in,
            Metric::MsgsOut => s.msgs_out,
        }
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Metric::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cmp {
    Gt,
    Ge,
    Lt,
    Le,
    Eq,
    Ne,
}

impl Cmp {
    pub fn holds(self, a: u64, b: u64) -> bool {
        match self {
            Cmp::Gt => a > b,
            Cmp::Ge => a >= b,
            Cmp::Lt => a < b,
            Cmp::Le => a <= b,
            Cmp::Eq => a == b,
            Cmp::Ne => a != b,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Cmp::Gt => "gt",
            Cmp::Ge => "ge",
            Cmp::Lt => "lt",
            Cmp::Le => "le",
            Cmp::Eq => "eq",
            Cmp::Ne => "ne",
        }
    }
}

impl FromStr for Cmp {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [Cmp::Gt, Cmp::Ge, Cmp::Lt, Cmp::Le, Cmp::Eq, Cmp::Ne]
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown comparator `{s}`"))
    }
}

/// Where a trigger is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum AttachPoint {
    #[default]
    Tick,
    PreWrite,
    PostRead,
    GcScan,
}

impl AttachPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            AttachPoint::Tick => "tick",
            AttachPoint::PreWrite => "pre_write",
            AttachPoint::PostRead => "post_read",
            AttachPoint::GcScan => "gc_scan",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            AttachPoint::Tick => 0,
            AttachPoint::PreWrite => 1,
            AttachPoint::PostRead => 2,
            AttachPoint::GcScan => 3,
        }
    }
}

impl FromStr for AttachPoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [AttachPoint::Tick, AttachPoint::PreWrite, AttachPoint::PostRead, AttachPoint::GcScan]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attach point `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub enum TriggerSource {
    Threshold {
        metric: Metric,
        cmp: Cmp,
        value: u64,
    },
    /// TRIGGER-hook program; a non-zero r0 is a breach.
    Appcode(VerifiedProgram),
    /// Fires only when injected by the workload.
    Manual,
}

/// Which nodes a trigger watches.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    All,
    Nodes(Vec<NodeId>),
    /// The current chain members of an app.
    App(AppId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TriggerAction {
    Rebalance,
    Migrate,
    /// Releases objects whose lifetime waits on this trigger.
    Gc,
    #[default]
    Notify,
}

impl TriggerAction {
    pub fn as_str(self) -> &'static str {
        match self {
            TriggerAction::Rebalance => "rebalance",
            TriggerAction::Migrate => "migrate",
            TriggerAction::Gc => "gc",
            TriggerAction::Notify => "notify",
        }
    }
}

impl FromStr for TriggerAction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        [TriggerAction::Rebalance, TriggerAction::Migrate, TriggerAction::Gc, TriggerAction::Notify]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown trigger action `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct TriggerSpec {
    pub name: String,
    pub source: TriggerSource,
    pub sustain: u32,
    pub attach: AttachPoint,
    pub scope: Scope,
    pub action: TriggerAction,
    pub app: Option<AppId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FiredEvent {
    pub trigger_id: TriggerId,
    /// Node whose sample or operation caused the firing.
    pub node: NodeId,
    /// [`Metric::code`], or 0 for appcode and manual triggers.
    pub metric_code: u64,
    pub value: u64,
    pub t: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("trigger appcode has hook {0}, expected trigger")]
    HookMismatch(HookKind),
    #[error("sustain count must be at least 1")]
    ZeroSustain,
}

/// Per-evaluation input beyond the sample itself.
#[derive(Debug, Clone, Default)]
pub struct TriggerInput {
    pub ctx: BTreeMap<u32, u64>,
    pub nodes: Vec<NodeView>,
}

/// Result of evaluating triggers at one point.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evaluation {
    pub fired: Vec<FiredEvent>,
    /// Triggers whose appcode trapped (counted as not breaching).
    pub traps: Vec<(TriggerId, TrapCode)>,
}

/// Fills the TRIGGER context fields that come from a sample.
pub fn sample_ctx(s: &MetricsSample, healthy: bool) -> BTreeMap<u32, u64> {
    BTreeMap::from([
        (field::TRG_ATTACH, AttachPoint::Tick.code()),
        (field::TRG_NODE_ID, s.node_id.0),
        (field::TRG_CPU_MILLI, s.cpu_milli),
        (field::TRG_USED_BYTES, s.used_bytes),
        (field::TRG_CAPACITY_BYTES, s.capacity_bytes),
        (field::TRG_WEAR_MILLI, s.wear_milli),
        (field::TRG_MSGS_IN, s.msgs_in),
        (field::TRG_MSGS_OUT, s.msgs_out),
        (field::TRG_NOW, s.t),
        (field::TRG_FREE_BYTES, s.capacity_bytes.saturating_sub(s.used_bytes)),
        (field::TRG_HEALTHY, u64::from(healthy)),
    ])
}

#[derive(Debug, Default)]
pub struct TriggerRegistry {
    specs: Vec<(TriggerId, TriggerSpec)>,
    streaks: BTreeMap<(TriggerId, NodeId), u32>,
    maps: BTreeMap<TriggerId, ScratchMap>,
}

impl TriggerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trigger; ids start at 1 and are never reused.
    pub fn register(&mut self, spec: TriggerSpec) -> Result<TriggerId, RegisterError> {
        if spec.sustain == 0 {
            return Err(RegisterError::ZeroSustain);
        }
        if let TriggerSource::Appcode(vp) = &spec.source {
            if vp.hook_kind() != HookKind::Trigger {
                return Err(RegisterError::HookMismatch(vp.hook_kind()));
            }
        }
        let id = TriggerId(self.specs.len() as u64 + 1);
        self.specs.push((id, spec));
        Ok(id)
    }

    pub fn get(&self, id: TriggerId) -> Option<&TriggerSpec> {
        self.specs.iter().find(|(i, _)| *i == id).map(|(_, s)| s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TriggerId, &TriggerSpec)> {
        self.specs.iter().map(|(i, s)| (*i, s))
    }

    pub fn by_name(&self, name: &str) -> Option<TriggerId> {
        self.specs.iter().find(|(_, s)| s.name == name).map(|(i, _)| *i)
    }

    /// Counts a breach or a clean evaluation; returns true when the streak
    /// reaches the sustain count, which also starts a new streak.
    fn bump(&mut self, id: TriggerId, node: NodeId, sustain: u32, breach: bool) -> bool {
        let streak = self.streaks.entry((id, node)).or_insert(0);
        if !breach {
            *streak = 0;
            return false;
        }
        *streak += 1;
        if *streak >= sustain {
            *streak = 0;
            return true;
        }
        false
    }

    /// Evaluates every trigger attached at `attach` whose scope includes
    /// `node`. `sample` is required for threshold triggers, which only run
    /// on ticks.
    pub fn evaluate(
        &mut self,
        attach: AttachPoint,
        node: NodeId,
        sample: Option<&MetricsSample>,
        input: &TriggerInput,
        in_scope: impl Fn(TriggerId, &TriggerSpec) -> bool,
        now: SimTime,
    ) -> Evaluation {
        let mut out = Evaluation::default();
        let mut hits = Vec::new();
        for (id, spec) in &self.specs {
            if spec.attach != attach || !in_scope(*id, spec) {
                continue;
            }
            let outcome = match &spec.source {
                TriggerSource::Manual => continue,
                TriggerSource::Threshold { metric, cmp, value } => {
                    let Some(s) = sample else { continue };
                    let v = metric.value(s);
                    Some((cmp.holds(v, *value), metric.code(), v))
                }
                TriggerSource::Appcode(vp) => {
                    let mut ctx = input.ctx.clone();
                    ctx.insert(field::TRG_ATTACH, attach.code());
                    ctx.insert(field::TRG_NODE_ID, node.0);
                    ctx.insert(field::TRG_NOW, now);
                    let map = self.maps.entry(*id).or_default();
                    let mut env = HelperEnv {
                        ctx,
                        nodes: input.nodes.clone(),
                        map: std::mem::take(map),
                        now_ns: now,
                        ..Default::default()
                    };
                    let res = run(vp, &mut env);
                    *map = env.map;
                    match res.r0() {
                        Some(r0) => Some((r0 != 0, 0, r0)),
                        None => {
                            out.traps.push((*id, res.trap().expect("trapped")));
                            Some((false, 0, 0))
                        }
                    }
                }
            };
            if let Some((breach, metric_code, value)) = outcome {
                hits.push((*id, spec.sustain, breach, metric_code, value));
            }
        }
        for (id, sustain, breach, metric_code, value) in hits {
            if self.bump(id, node, sustain, breach) {
                out.fired.push(FiredEvent { trigger_id: id, node, metric_code, value, t: now });
            }
        }
        out
    }

    /// Forgets breach streaks for a node, e.g. after it crashes.
    pub fn reset_node(&mut self, node: NodeId) {
        self.streaks.retain(|(_, n), _| *n != node);
    }
}

/// The last [`SAMPLE_RING`] samples per node.
#[derive(Debug, Clone, Default)]
pub struct SampleRing {
    rings: BTreeMap<NodeId, VecDeque<MetricsSample>>,
}

impl SampleRing {
    pub fn push(&mut self, s: MetricsSample) {
        let ring = self.rings.entry(s.node_id).or_default();
        if ring.len() == SAMPLE_RING {
            ring.pop_front();
        }
        ring.push_back(s);
    }

    pub fn latest(&self, node: NodeId) -> Option<&MetricsSample> {
        self.rings.get(&node).and_then(|r| r.back())
    }

    pub fn history(&self, node: NodeId) -> impl Iterator<Item = &MetricsSample> {
        self.rings.get(&node).into_iter().flatten()
    }
}

/// Replacement for a retiring node: the least-loaded healthy candidate with
/// room for `needed_bytes`, ties to the lowest id.
pub fn pick_replacement(views: &[NodeView], exclude: &[NodeId], needed_bytes: u64) -> Option<NodeId> {
    views
        .iter()
        .filter(|v| v.healthy && v.wear_milli < EOL_WEAR_MILLI && !exclude.contains(&v.node_id))
        .filter(|v| v.free_bytes >= needed_bytes)
        .min_by_key(|v| (v.load_milli, v.node_id))
        .map(|v| v.node_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::appcode::{library, load};

    fn sample(node: u64, cpu: u64, wear: u64) -> MetricsSample {
        MetricsSample {
            node_id: NodeId(node),
            cpu_milli: cpu,
            wear_milli: wear,
            capacity_bytes: 100,
            ..Default::default()
        }
    }

    fn threshold(sustain: u32) -> TriggerSpec {
        TriggerSpec {
            name: "hot".into(),
            source: TriggerSource::Threshold { metric: Metric::CpuMilli, cmp: Cmp::Gt, value: 900 },
            sustain,
            attach: AttachPoint::Tick,
            scope: Scope::All,
            action: TriggerAction::Notify,
            app: None,
        }
    }

    fn tick(reg: &mut TriggerRegistry, s: &MetricsSample) -> Vec<TriggerId> {
        reg.evaluate(AttachPoint::Tick, s.node_id, Some(s), &TriggerInput::default(), |_, _| true, s.t)
            .fired
            .into_iter()
            .map(|f| f.trigger_id)
            .collect()
    }

    #[test]
    fn sustain_needs_consecutive_breaches() {
        let mut reg = TriggerRegistry::new();
        let id = reg.register(threshold(3)).unwrap();
        let cpus = [950, 950, 100, 950, 950, 950, 950];
        let fired: Vec<bool> = cpus.iter().map(|&c| !tick(&mut reg, &sample(1, c, 0)).is_empty()).collect();
        assert_eq!(fired, [false, false, false, false, false, true, false]);
        assert_eq!(id, TriggerId(1));
    }

    #[test]
    fn duplicate_specs_fire_independently() {
        let mut reg = TriggerRegistry::new();
        let a = reg.register(threshold(1)).unwrap();
        let b = reg.register(threshold(1)).unwrap();
        assert_ne!(a, b);
        assert_eq!(tick(&mut reg, &sample(1, 999, 0)), [a, b]);
    }

    #[test]
    fn wear_appcode_fires_first_breach() {
        let mut reg = TriggerRegistry::new();
        let vp = load(library::source("trigger_wear").unwrap()).unwrap();
        reg.register(TriggerSpec { source: TriggerSource::Appcode(vp), sustain: 1, ..threshold(1) }).unwrap();
        for (wear, expect) in [(100, false), (899, false), (900, true), (950, true)] {
            let s = sample(1, 0, wear);
            let input = TriggerInput { ctx: sample_ctx(&s, true), nodes: vec![] };
            let ev = reg.evaluate(AttachPoint::Tick, s.node_id, Some(&s), &input, |_, _| true, 0);
            assert_eq!(!ev.fired.is_empty(), expect, "wear {wear}");
        }
    }

    #[test]
    fn wrong_hook_rejected() {
        let mut reg = TriggerRegistry::new();
        let vp = load(".program x compute\nmov r0, 1\nexit").unwrap();
        let err = reg.register(TriggerSpec { source: TriggerSource::Appcode(vp), ..threshold(1) }).unwrap_err();
        assert_eq!(err, RegisterError::HookMismatch(HookKind::Compute));
        assert_eq!(reg.register(threshold(0)).unwrap_err(), RegisterError::ZeroSustain);
    }

    #[test]
    fn ring_is_bounded() {
        let mut ring = SampleRing::default();
        for t in 0..300 {
            ring.push(MetricsSample { t, ..sample(1, 0, 0) });
        }
        assert_eq!(ring.history(NodeId(1)).count(), SAMPLE_RING);
        assert_eq!(ring.latest(NodeId(1)).unwrap().t, 299);
    }

    #[test]
    fn replacement_is_least_loaded_with_room() {
        let v = |id, load_milli, free| NodeView { load_milli, free_bytes: free, ..NodeView::new(NodeId(id)) };
        let views = [v(1, 10, 1000), v(2, 5, 10), v(3, 7, 1000), v(4, 7, 1000)];
        assert_eq!(pick_replacement(&views, &[NodeId(1)], 100), Some(NodeId(3)));
        assert_eq!(pick_replacement(&views, &[], 5000), None);
    }
}
