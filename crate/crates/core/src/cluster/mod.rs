//! The simulated edge cluster: storage nodes, per-app replica chains,
//! clients and a logically centralized coordinator, all driven by one
//! deterministic event loop.

mod control;
mod replication;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::appcode::{HookKind, ScratchMap, VerifiedProgram};
use crate::chain::{place_replicas, AppPlacement, ChainError, NodeView, ReplicaChain};
use crate::consistency::HoldQueue;
use crate::harness::scenario::{
    AppSpec, FaultKindSpec, OpKindSpec, Scenario, ScenarioError, ScopeDecl, TriggerSourceDecl,
};
use crate::harness::trace::{hex, TraceRecord};
use crate::ids::{AppId, ClientId, NodeId, OpId, SimTime, NS_PER_MS, NS_PER_US};
use crate::migrate::{ChangeKind, Transition};
use crate::monitor::{FiredEvent, RegisterError, SampleRing, Scope, TriggerRegistry, TriggerSource, TriggerSpec};
use crate::simnet::{Delivery, Entity, Fault, Sim};
use crate::store::{LifetimePolicy, NodeStore};

pub const HEARTBEAT_NS: u64 = 100 * NS_PER_MS;
/// Missed-heartbeat window after which a crashed node is declared failed.
pub const FAILURE_TIMEOUT_NS: u64 = 3 * HEARTBEAT_NS;
pub const RETRANSMIT_NS: u64 = 200 * NS_PER_MS;
pub const EOL_RETRY_NS: u64 = 500 * NS_PER_MS;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Trigger(#[from] RegisterError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Counts printed after a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub ops_issued: u64,
    pub acked: u64,
    pub rejected: u64,
    pub held: u64,
    pub timeouts: u64,
    pub gc_removed: u64,
    pub reconfigs: u64,
    pub migrations: u64,
    pub aborts: u64,
    pub eols: u64,
    pub events: u64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ops={} acked={} rejected={} held={} timeouts={} gc={} reconfigs={} migrations={} aborts={} eol={} events={}",
            self.ops_issued,
            self.acked,
            self.rejected,
            self.held,
            self.timeouts,
            self.gc_removed,
            self.reconfigs,
            self.migrations,
            self.aborts,
            self.eols,
            self.events
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ReqBody {
    Put { value: Vec<u8>, lifetime: LifetimePolicy },
    Delete,
    Get,
    Compute,
}

/// A client operation travelling to, or waiting at, a storage node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Request {
    pub op: OpId,
    pub client: ClientId,
    pub app: AppId,
    pub key: String,
    pub ts: SimTime,
    pub writer: NodeId,
    pub session: u64,
    pub body: ReqBody,
}

impl Request {
    fn is_write(&self) -> bool {
        matches!(self.body, ReqBody::Put { .. } | ReqBody::Delete)
    }

    /// Prefix of the op's trace events.
    fn ev_prefix(&self) -> &'static str {
        match self.body {
            ReqBody::Put { .. } => "put",
            ReqBody::Delete => "del",
            ReqBody::Get => "get",
            ReqBody::Compute => "compute",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct OpRef {
    pub op: OpId,
    pub client: ClientId,
    pub session: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Change {
    Put { value: Vec<u8>, state: Option<Vec<u8>> },
    Del,
    Gc,
}

impl Change {
    fn as_str(&self) -> &'static str {
        match self {
            Change::Put { .. } => "put",
            Change::Del => "del",
            Change::Gc => "gc",
        }
    }
}

/// One sequenced chain update. `prev` is the sequence number the sender
/// had applied before this one; replicas apply strictly in `prev` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Update {
    pub app: AppId,
    pub epoch: u64,
    pub seq: u64,
    pub prev: u64,
    pub key: String,
    pub change: Change,
    pub op: Option<OpRef>,
    pub created_at: SimTime,
    pub lifetime: LifetimePolicy,
}

#[derive(Debug, Clone)]
pub(crate) enum Ev {
    Issue(usize),
    Fault(usize),
    Req(Request),
    Update(Update),
    Ack { app: AppId, epoch: u64, seq: u64 },
    Hint { app: AppId, epoch: u64, key: String, seq: u64, state: Option<Vec<u8>> },
    ReadNotice { app: AppId, epoch: u64, key: String },
    Snapshot { app: AppId, tid: u64, seq: u64, records: Vec<crate::store::ObjectRecord> },
    Reply(OpId),
    Heartbeat,
    Retransmit,
    GcTick,
    SampleTick,
    Recheck { node: NodeId, app: AppId, key: String },
    ClientTimeout(OpId),
    StartTransition(AppId),
    CopyDeadline { app: AppId, tid: u64 },
    SnapshotRetry { app: AppId, tid: u64 },
    Fired(FiredEvent),
    EolStart(NodeId),
    EolRetry { app: AppId, node: NodeId },
}

impl Ev {
    fn msg_name(&self) -> &'static str {
        match self {
            Ev::Req(r) => r.ev_prefix(),
            Ev::Update(_) => "update",
            Ev::Ack { .. } => "ack",
            Ev::Hint { .. } => "hint",
            Ev::ReadNotice { .. } => "read_notice",
            Ev::Snapshot { .. } => "snapshot",
            Ev::Reply(_) => "reply",
            _ => "timer",
        }
    }
}

/// Replication state of one node for one app.
#[derive(Debug, Clone, Default)]
pub(crate) struct Replica {
    pub applied: u64,
    pub committed: u64,
    /// Applied but not yet acknowledged by the successor, by seq.
    pub pending: BTreeMap<u64, Update>,
    /// Arrived early, keyed by `prev`.
    pub parked: BTreeMap<u64, Update>,
    /// Consistency state the head admitted but this tail has not applied.
    pub hints: BTreeMap<String, (u64, Option<Vec<u8>>)>,
    /// Read-once keys the head has not yet been told about.
    pub notices: BTreeMap<String, SimTime>,
}

pub(crate) struct NodeRt {
    pub x: i64,
    pub y: i64,
    pub load: u64,
    pub store: NodeStore,
    pub down_since: Option<SimTime>,
    pub declared_down: bool,
    pub eol: bool,
    pub eol_done: bool,
    pub replicas: BTreeMap<AppId, Replica>,
    pub holds: BTreeMap<AppId, HoldQueue<Request>>,
    pub maps: BTreeMap<(AppId, HookKind), ScratchMap>,
    pub msgs_in: u64,
    pub msgs_out: u64,
}

pub(crate) struct AppRt {
    pub spec: AppSpec,
    pub chain: Option<ReplicaChain>,
    /// Epoch of the last chain, kept when the app goes offline.
    pub epoch: u64,
    pub last_seq: u64,
    pub cw: Option<VerifiedProgram>,
    pub cr: Option<VerifiedProgram>,
    pub placement: Option<VerifiedProgram>,
    pub lb: Option<VerifiedProgram>,
    pub migration: Option<VerifiedProgram>,
    pub gc: Option<VerifiedProgram>,
    pub compute: Vec<VerifiedProgram>,
    pub maps: BTreeMap<HookKind, ScratchMap>,
    pub origin: NodeId,
    pub origin_x: i64,
    pub origin_y: i64,
    pub policies: Vec<(String, LifetimePolicy)>,
    pub transition: Option<Transition<Request>>,
    pub queued: VecDeque<ChangeKind>,
}

pub(crate) struct ClientRt {
    pub origin: NodeId,
    pub session: u64,
    pub latency_ns: u64,
    pub skew_ns: u64,
}

pub(crate) struct OpRt {
    pub client: ClientId,
    pub prefix: &'static str,
    pub app: AppId,
    pub key: String,
    pub resolved: bool,
}

pub(crate) struct Cluster<'a> {
    pub sc: &'a Scenario,
    pub sim: Sim<Ev>,
    pub trace: Vec<TraceRecord>,
    pub summary: Summary,
    pub nodes: BTreeMap<NodeId, NodeRt>,
    pub apps: BTreeMap<AppId, AppRt>,
    pub clients: BTreeMap<ClientId, ClientRt>,
    pub ops: BTreeMap<OpId, OpRt>,
    pub registry: TriggerRegistry,
    pub samples: SampleRing,
    pub next_tid: u64,
}

/// Runs `sc` to its configured duration with the given verified appcode.
pub fn simulate(sc: &Scenario, programs: &BTreeMap<String, VerifiedProgram>) -> Result<RunOutput, ClusterError> {
    let mut cluster = Cluster::new(sc, programs)?;
    cluster.run();
    Ok(RunOutput { trace: cluster.trace, summary: cluster.summary })
}

impl<'a> Cluster<'a> {
    fn new(sc: &'a Scenario, programs: &BTreeMap<String, VerifiedProgram>) -> Result<Self, ClusterError> {
        let mut sim = Sim::new(sc.sim.seed);
        sim.set_default_link(sc.sim.link_latency_us, sc.sim.link_jitter_us);
        let mut nodes = BTreeMap::new();
        for n in &sc.nodes {
            sim.add_node(n.id);
            nodes.insert(
                n.id,
                NodeRt {
                    x: n.x,
                    y: n.y,
                    load: n.load.min(1000),
                    store: NodeStore::new(n.id, n.capacity),
                    down_since: None,
                    declared_down: false,
                    eol: false,
                    eol_done: false,
                    replicas: BTreeMap::new(),
                    holds: BTreeMap::new(),
                    maps: BTreeMap::new(),
                    msgs_in: 0,
                    msgs_out: 0,
                },
            );
        }
        for l in &sc.links {
            sim.add_link(l.a, l.b, l.latency_us, l.jitter_us).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        let prog = |name: &Option<String>| name.as_ref().map(|n| programs[n].clone());
        let mut apps = BTreeMap::new();
        for a in &sc.apps {
            let (cw, cr) = match a.consistency {
                crate::consistency::Model::Custom => (prog(&a.cw), prog(&a.cr)),
                model => model.programs(),
            };
            let origin = &nodes[&a.origin];
            let policies =
                sc.policies.iter().filter(|p| p.app == a.id).map(|p| (p.prefix.clone(), p.lifetime)).collect();
            apps.insert(
                a.id,
                AppRt {
                    spec: a.clone(),
                    chain: None,
                    epoch: 0,
                    last_seq: 0,
                    cw,
                    cr,
                    placement: prog(&a.placement),
                    lb: prog(&a.lb),
                    migration: prog(&a.migration),
                    gc: prog(&a.gc),
                    compute: a.compute.iter().map(|c| programs[c].clone()).collect(),
                    maps: BTreeMap::new(),
                    origin: a.origin,
                    origin_x: origin.x,
                    origin_y: origin.y,
                    policies,
                    transition: None,
                    queued: VecDeque::new(),
                },
            );
        }
        let clients = sc
            .clients
            .iter()
            .map(|c| {
                (
                    c.id,
                    ClientRt {
                        origin: c.origin,
                        session: c.session,
                        latency_ns: c.latency_us * NS_PER_US,
                        skew_ns: c.skew_us * NS_PER_US,
                    },
                )
            })
            .collect();
        let mut registry = TriggerRegistry::new();
        for t in &sc.triggers {
            let source = match &t.source {
                TriggerSourceDecl::Threshold { metric, cmp, value } => {
                    TriggerSource::Threshold { metric: *metric, cmp: *cmp, value: *value }
                }
                TriggerSourceDecl::Appcode(name) => TriggerSource::Appcode(programs[name].clone()),
                TriggerSourceDecl::Manual => TriggerSource::Manual,
            };
            let scope = match &t.scope {
                ScopeDecl::All => Scope::All,
                ScopeDecl::Nodes(ns) => Scope::Nodes(ns.clone()),
                ScopeDecl::App => Scope::App(t.app.expect("validated")),
            };
            registry.register(TriggerSpec {
                name: t.name.clone(),
                source,
                sustain: t.sustain,
                attach: t.attach,
                scope,
                action: t.action,
                app: t.app,
            })?;
        }
        let mut cluster = Cluster {
            sc,
            sim,
            trace: Vec::new(),
            summary: Summary::default(),
            nodes,
            apps,
            clients,
            ops: BTreeMap::new(),
            registry,
            samples: SampleRing::default(),
            next_tid: 1,
        };
        cluster.place_all()?;
        Ok(cluster)
    }

    fn place_all(&mut self) -> Result<(), ClusterError> {
        let ids: Vec<AppId> = self.apps.keys().copied().collect();
        for id in ids {
            let app = &self.apps[&id];
            let placement = AppPlacement {
                app_id: id,
                origin: app.origin,
                origin_x: app.origin_x,
                origin_y: app.origin_y,
                replica_count: app.spec.replicas,
            };
            let views = self.views(app.origin);
            let app = self.apps.get_mut(&id).expect("known app");
            let hook = app.placement.as_ref().map(|vp| (vp, app.maps.entry(HookKind::ReplicaPlace).or_default()));
            let placed = place_replicas(&placement, &views, hook)?;
            app.epoch = placed.chain.epoch;
            let chain = placed.chain;
            if let Some(w) = placed.warning {
                let r = self.rec(None, "warn").with("app", id).with("what", "placement").with("detail", w);
                self.log(r);
            }
            for n in chain.nodes() {
                self.nodes.get_mut(n).expect("placed on a known node").replicas.entry(id).or_default();
            }
            let r = self
                .rec(None, "reconfig")
                .with("app", id)
                .with("epoch", chain.epoch)
                .with("chain", &chain)
                .with("reason", "place");
            self.log(r);
            self.apps.get_mut(&id).expect("known app").chain = Some(chain);
        }
        Ok(())
    }

    fn run(&mut self) {
        for (i, op) in self.sc.ops.iter().enumerate() {
            self.sim.schedule_at(op.t, Entity::Coordinator, Ev::Issue(i));
        }
        for (i, f) in self.sc.faults.iter().enumerate() {
            self.sim.schedule_at(f.t, Entity::Coordinator, Ev::Fault(i));
        }
        self.sim.schedule_at(HEARTBEAT_NS, Entity::Coordinator, Ev::Heartbeat);
        self.sim.schedule_at(RETRANSMIT_NS, Entity::Coordinator, Ev::Retransmit);
        if self.sc.sim.gc_interval > 0 {
            self.sim.schedule_at(self.sc.sim.gc_interval, Entity::Coordinator, Ev::GcTick);
        }
        if self.sc.sim.sample_interval > 0 {
            self.sim.schedule_at(self.sc.sim.sample_interval, Entity::Coordinator, Ev::SampleTick);
        }
        let end = self.sc.sim.duration;
        while self.sim.peek_time().is_some_and(|t| t <= end) {
            let ev = self.sim.pop().expect("peeked");
            self.summary.events += 1;
            self.dispatch(ev.target, ev.payload);
        }
        self.sim.advance_to(end);
        self.final_dump();
    }

    fn dispatch(&mut self, target: Entity, ev: Ev) {
        if let Entity::Node(n) = target {
            if !self.sim.is_up(n) {
                return;
            }
            self.node_mut(n).msgs_in += 1;
            match ev {
                Ev::Req(req) => self.on_request(n, req),
                Ev::Update(u) => self.on_update(n, u),
                Ev::Ack { app, epoch, seq } => self.on_ack(n, app, epoch, seq),
                Ev::Hint { app, epoch, key, seq, state } => self.on_hint(n, app, epoch, key, seq, state),
                Ev::ReadNotice { app, epoch, key } => self.on_read_notice(n, app, epoch, key),
                Ev::Snapshot { app, tid, seq, records } => self.on_snapshot(n, app, tid, seq, records),
                other => unreachable!("{} sent to a node", other.msg_name()),
            }
            return;
        }
        match ev {
            Ev::Issue(i) => self.issue(i),
            Ev::Fault(i) => self.fault(i),
            Ev::Reply(op) => {
                if let Some(o) = self.ops.get_mut(&op) {
                    o.resolved = true;
                }
            }
            Ev::ClientTimeout(op) => self.client_timeout(op),
            Ev::Heartbeat => {
                self.heartbeat();
                self.sim.schedule(HEARTBEAT_NS, Entity::Coordinator, Ev::Heartbeat);
            }
            Ev::Retransmit => {
                self.retransmit();
                self.sim.schedule(RETRANSMIT_NS, Entity::Coordinator, Ev::Retransmit);
            }
            Ev::GcTick => {
                let apps: Vec<AppId> = self.apps.keys().copied().collect();
                for app in apps {
                    self.gc_at_head(app, true);
                }
                self.sim.schedule(self.sc.sim.gc_interval, Entity::Coordinator, Ev::GcTick);
            }
            Ev::SampleTick => {
                self.sample_tick();
                self.sim.schedule(self.sc.sim.sample_interval, Entity::Coordinator, Ev::SampleTick);
            }
            Ev::Recheck { node, app, key } => {
                if self.sim.is_up(node) {
                    self.recheck(node, app, &key, crate::consistency::Recheck::Timer);
                }
            }
            Ev::StartTransition(app) => self.start_transition(app),
            Ev::CopyDeadline { app, tid } => self.copy_deadline(app, tid),
            Ev::SnapshotRetry { app, tid } => self.snapshot_retry(app, tid),
            Ev::Fired(fe) => self.on_fired(fe),
            Ev::EolStart(n) => self.eol_start(n),
            Ev::EolRetry { app, node } => self.eol_retry(app, node),
            other => unreachable!("{} sent to the coordinator", other.msg_name()),
        }
    }

    pub(crate) fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub(crate) fn rec(&self, node: Option<NodeId>, ev: &str) -> TraceRecord {
        TraceRecord::new(self.now(), node, ev)
    }

    pub(crate) fn log(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    pub(crate) fn node_mut(&mut self, n: NodeId) -> &mut NodeRt {
        self.nodes.get_mut(&n).expect("known node")
    }

    pub(crate) fn app_mut(&mut self, a: AppId) -> &mut AppRt {
        self.apps.get_mut(&a).expect("known app")
    }

    pub(crate) fn replica_mut(&mut self, n: NodeId, a: AppId) -> &mut Replica {
        self.node_mut(n).replicas.entry(a).or_default()
    }

    pub(crate) fn chain(&self, a: AppId) -> Option<&ReplicaChain> {
        self.apps[&a].chain.as_ref()
    }

    /// Node views for appcode; `origin` anchors the rtt field.
    pub(crate) fn views(&self, origin: NodeId) -> Vec<NodeView> {
        self.nodes
            .iter()
            .map(|(id, n)| {
                let st = self.sim.node(*id).expect("known node");
                let load = self.samples.latest(*id).map_or(n.load, |s| s.cpu_milli);
                NodeView {
                    node_id: *id,
                    load_milli: load.min(1000),
                    free_bytes: n.store.free_bytes(),
                    x_micro: n.x,
                    y_micro: n.y,
                    wear_milli: st.wear_milli,
                    rtt_us_to_origin: 2 * self.sim.link(origin, *id).base_latency_us,
                    healthy: st.up && st.wear_milli < 1000 && !n.eol,
                }
            })
            .collect()
    }

    /// Sends a node-to-node message; traces a `drop` when it cannot go out.
    pub(crate) fn send(&mut self, from: NodeId, to: NodeId, ev: Ev) -> bool {
        let name = ev.msg_name();
        if !self.sim.is_up(from) {
            let r = self
                .rec(Some(from), "drop")
                .with("from", from)
                .with("to", to)
                .with("msg", name)
                .with("reason", "src_down");
            self.log(r);
            return false;
        }
        self.node_mut(from).msgs_out += 1;
        let outcome = self.sim.send(from, to, 0, Entity::Node(to), ev);
        self.note_delivery(Some(from), from, to, name, outcome)
    }

    fn note_delivery(&mut self, node: Option<NodeId>, from: NodeId, to: NodeId, msg: &str, d: Delivery) -> bool {
        let reason = match d {
            Delivery::Delivered { .. } => return true,
            Delivery::Partitioned => "partition",
            Delivery::TargetDown => "down",
        };
        let r = self.rec(node, "drop").with("from", from).with("to", to).with("msg", msg).with("reason", reason);
        self.log(r);
        false
    }

    /// A client request leaving the client's access node.
    fn client_send(&mut self, c: ClientId, to: NodeId, req: Request) {
        let cl = &self.clients[&c];
        let (origin, extra) = (cl.origin, cl.latency_ns);
        let name = req.ev_prefix();
        let outcome = self.sim.send(origin, to, extra, Entity::Node(to), Ev::Req(req));
        self.note_delivery(None, origin, to, name, outcome);
    }

    /// Sends the outcome of `op` from node `from` back to its client.
    pub(crate) fn reply(&mut self, from: NodeId, client: ClientId, op: OpId) {
        let cl = &self.clients[&client];
        let (origin, extra) = (cl.origin, cl.latency_ns);
        self.node_mut(from).msgs_out += 1;
        let outcome = self.sim.send(from, origin, extra, Entity::Client(client), Ev::Reply(op));
        self.note_delivery(Some(from), from, origin, "reply", outcome);
    }

    fn lifetime_for(&self, app: AppId, key: &str, explicit: Option<LifetimePolicy>) -> LifetimePolicy {
        if let Some(l) = explicit {
            return l;
        }
        let a = &self.apps[&app];
        a.policies
            .iter()
            .filter(|(prefix, _)| key.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(a.spec.lifetime, |(_, l)| *l)
    }

    fn issue(&mut self, i: usize) {
        let op = &self.sc.ops[i];
        let id = OpId(i as u64 + 1);
        let now = self.now();
        let request = |app: AppId, key: &str, body: ReqBody| {
            let c = op.client.expect("validated");
            let cl = &self.clients[&c];
            Request {
                op: id,
                client: c,
                app,
                key: key.to_owned(),
                ts: now + cl.skew_ns,
                writer: cl.origin,
                session: cl.session,
                body,
            }
        };
        let req = match &op.kind {
            OpKindSpec::Put { app, key, value, lifetime } => {
                let lifetime = self.lifetime_for(*app, key, *lifetime);
                request(*app, key, ReqBody::Put { value: value.bytes(), lifetime })
            }
            OpKindSpec::Get { app, key } => request(*app, key, ReqBody::Get),
            OpKindSpec::Delete { app, key } => request(*app, key, ReqBody::Delete),
            OpKindSpec::Compute { app, key } => request(*app, key, ReqBody::Compute),
            OpKindSpec::Move { app, x, y, origin } => {
                let c = op.client.expect("validated");
                let a = self.app_mut(*app);
                a.origin_x = *x;
                a.origin_y = *y;
                if let Some(o) = origin {
                    a.origin = *o;
                    self.clients.get_mut(&c).expect("validated").origin = *o;
                }
                let o = self.clients[&c].origin;
                let r = self
                    .rec(None, "move")
                    .with("client", c)
                    .with("op", id)
                    .with("app", app)
                    .with("x", x)
                    .with("y", y)
                    .with("origin", o);
                self.log(r);
                return;
            }
            OpKindSpec::Fire { trigger, node } => {
                let tid = self.registry.by_name(trigger).expect("validated");
                let spec_app = self.registry.get(tid).and_then(|s| s.app);
                let at = node.or_else(|| spec_app.map(|a| self.apps[&a].origin)).unwrap_or_default();
                let fe = FiredEvent { trigger_id: tid, node: at, metric_code: 0, value: 0, t: now };
                self.fire(fe, trigger, Some(id));
                return;
            }
        };
        self.summary.ops_issued += 1;
        let mut r = self
            .rec(None, &format!("{}_issue", req.ev_prefix()))
            .with("client", req.client)
            .with("op", id)
            .with("app", req.app)
            .with("key", &req.key);
        match &req.body {
            ReqBody::Put { value, lifetime } => {
                r = r.with("ts", req.ts).with("session", req.session).with("life", lifetime).with("val", hex(value));
            }
            ReqBody::Get => r = r.with("session", req.session),
            _ => {}
        }
        self.log(r);
        self.ops.insert(
            id,
            OpRt { client: req.client, prefix: req.ev_prefix(), app: req.app, key: req.key.clone(), resolved: false },
        );
        self.sim.schedule(self.sc.sim.write_timeout, Entity::Coordinator, Ev::ClientTimeout(id));
        let target = self.chain(req.app).map(|ch| if req.is_write() { ch.head() } else { ch.tail() });
        match target {
            Some(t) => self.client_send(req.client, t, req),
            None => self.reject(None, &req, "offline"),
        }
    }

    fn client_timeout(&mut self, op: OpId) {
        let Some(o) = self.ops.get_mut(&op) else { return };
        if o.resolved {
            return;
        }
        o.resolved = true;
        let (c, prefix, app, key) = (o.client, o.prefix, o.app, o.key.clone());
        self.summary.timeouts += 1;
        let r = self
            .rec(None, &format!("{prefix}_timeout"))
            .with("client", c)
            .with("op", op)
            .with("app", app)
            .with("key", key);
        self.log(r);
    }

    fn fault(&mut self, i: usize) {
        let f = self.sc.faults[i].kind.clone();
        match f {
            FaultKindSpec::Partition { a, b, duration } => {
                self.sim.inject(Fault::Partition { a, b, duration_ns: duration }).expect("validated");
                let r = self.rec(None, "partition").with("a", a).with("b", b).with("until", self.now() + duration);
                self.log(r);
            }
            FaultKindSpec::Crash(n) => self.crash(n),
            FaultKindSpec::Restart(n) => self.restart(n),
            FaultKindSpec::Wear { node, milli } => {
                self.sim.inject(Fault::Wear { node, milli }).expect("validated");
                let wear = self.sim.node(node).expect("validated").wear_milli;
                let r = self.rec(Some(node), "wear").with("milli", wear);
                self.log(r);
            }
            FaultKindSpec::Eol(n) => {
                if !self.nodes[&n].eol {
                    self.node_mut(n).eol = true;
                    self.sim.schedule(0, Entity::Coordinator, Ev::EolStart(n));
                }
            }
        }
    }

    fn final_dump(&mut self) {
        let mut recs = Vec::new();
        for (id, n) in &self.nodes {
            for (k, rec) in n.store.objects() {
                recs.push(
                    self.rec(Some(*id), "final")
                        .with("app", k.app)
                        .with("key", &k.key)
                        .with("ver", rec.version)
                        .with("len", rec.value.len())
                        .with("val", hex(&rec.value)),
                );
            }
        }
        for (id, a) in &self.apps {
            let (epoch, chain) = match &a.chain {
                Some(c) => (c.epoch, c.to_string()),
                None => (a.epoch, "-".to_owned()),
            };
            recs.push(self.rec(None, "final_chain").with("app", id).with("epoch", epoch).with("chain", chain));
        }
        self.trace.extend(recs);
    }
}
