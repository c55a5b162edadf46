//! Trace checker: replays a trace against a model of every node's store and
//! every app's chain and evaluates each invariant by name.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::consistency::Model;
use crate::harness::scenario::{Scenario, ScopeDecl, TriggerSourceDecl};
use crate::harness::trace::{unhex, MalformedTrace, TraceRecord};
use crate::ids::{AppId, NodeId, SimTime};
use crate::monitor::{AttachPoint, MetricsSample, TriggerAction};
use crate::store::{LifetimeKind, LifetimePolicy, OBJECT_OVERHEAD};

/// Every invariant the checker evaluates, in report order.
pub const INVARIANTS: [&str; 21] = [
    "clock_monotonicity",
    "version_monotonicity",
    "store_accounting",
    "state_bound",
    "ack_durability",
    "single_writer_order",
    "default_placement",
    "epoch_safety",
    "fail_closed",
    "lww_convergence",
    "lww_admission",
    "fww_immutability",
    "fww_admission",
    "rmw_session",
    "gc_safety",
    "eol_safety",
    "trigger_sustain",
    "sample_monotone",
    "migration_atomicity",
    "order_preservation",
    "no_default_migration",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// 1-based trace line; 0 when the violation is about the run as a whole.
    pub line: usize,
    pub record: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantResult {
    pub name: &'static str,
    /// False when the scenario has nothing this invariant talks about.
    pub applicable: bool,
    /// Records or objects the invariant was evaluated on.
    pub checked: u64,
    pub violation: Option<Violation>,
}

impl InvariantResult {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckReport {
    pub results: Vec<InvariantResult>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(InvariantResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&InvariantResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            match &r.violation {
                None if r.applicable => writeln!(f, "PASS {} ({} checked)", r.name, r.checked)?,
                None => writeln!(f, "PASS {} (not applicable)", r.name)?,
                Some(v) if v.line == 0 => writeln!(f, "FAIL {}: {}", r.name, v.msg)?,
                Some(v) => writeln!(f, "FAIL {}: {} at line {}: {}", r.name, v.msg, v.line, v.record)?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Ty {
    U64,
    Str,
    Hex,
    HexOrDash,
    Nodes,
    Life,
    U64OrDash,
}

/// Required fields per event type; anything else is passed through.
fn schema(ev: &str) -> Option<(bool, &'static [(&'static str, Ty)])> {
    use Ty::*;
    Some(match ev {
        "put_issue" => (
            false,
            &[("op", U64), ("app", U64), ("key", Str), ("ts", U64), ("session", U64), ("life", Life), ("val", Hex)],
        ),
        "admit" => (
            true,
            &[
                ("app", U64),
                ("key", Str),
                ("op", U64),
                ("kind", Str),
                ("verdict", Str),
                ("ts", U64),
                ("writer", U64),
                ("session", U64),
                ("ver", U64),
                ("state", HexOrDash),
                ("new", HexOrDash),
                ("note", Str),
            ],
        ),
        "put_ack" => (true, &[("app", U64), ("key", Str), ("op", U64), ("session", U64), ("ver", U64), ("seq", U64)]),
        "del_ack" => (true, &[("app", U64), ("key", Str), ("op", U64), ("ver", U64), ("seq", U64)]),
        "buffer" => (true, &[("app", U64), ("key", Str), ("op", U64)]),
        "chain_apply" => (
            true,
            &[
                ("app", U64),
                ("key", Str),
                ("seq", U64),
                ("epoch", U64),
                ("kind", Str),
                ("ver", U64),
                ("op", U64OrDash),
                ("via", Str),
                ("created", U64OrDash),
                ("val", HexOrDash),
                ("state", HexOrDash),
            ],
        ),
        "get_ok" => (true, &[("app", U64), ("key", Str), ("session", U64), ("ver", U64), ("val", Hex)]),
        "get_notfound" => (true, &[("app", U64), ("key", Str), ("session", U64)]),
        "gc_delete" => (true, &[("app", U64), ("key", Str), ("ver", U64), ("by", Str)]),
        "backup" => (true, &[("app", U64), ("key", Str)]),
        "erase" => (true, &[("app", U64), ("key", Str)]),
        "evict" => (true, &[("app", U64)]),
        "sample" => (true, &[("cpu", U64), ("used", U64), ("cap", U64), ("wear", U64), ("in", U64), ("out", U64)]),
        "trigger_fire" => (true, &[("trigger", Str), ("id", U64)]),
        "reconfig" => (false, &[("app", U64), ("epoch", U64), ("chain", Nodes)]),
        "final_chain" => (false, &[("app", U64), ("chain", Nodes)]),
        "migrate_begin" => (false, &[("app", U64), ("from", Nodes), ("to", Nodes), ("tid", U64)]),
        "migrate_switch" => (false, &[("app", U64), ("to", Nodes), ("tid", U64)]),
        "migrate_abort" | "reconfig_abort" => (false, &[("app", U64), ("reason", Str), ("tid", U64)]),
        "freeze" | "unfreeze" => (false, &[("app", U64), ("tid", U64)]),
        "copy_begin" => (true, &[("app", U64), ("tid", U64)]),
        "provider_notice" => (true, &[("erased", U64)]),
        "final" => (true, &[("app", U64), ("key", Str), ("ver", U64), ("val", Hex)]),
        "drop" => (false, &[("msg", Str)]),
        "crash" | "restart" | "node_down" => (true, &[]),
        _ => return None,
    })
}

fn nodes_of(s: &str) -> Option<Vec<NodeId>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.parse().ok().map(NodeId)).collect()
}

fn validate(line: usize, r: &TraceRecord) -> Result<(), MalformedTrace> {
    let Some((needs_node, fields)) = schema(&r.ev) else { return Ok(()) };
    let bad = |msg: String| MalformedTrace { line, msg };
    if needs_node && r.node.is_none() {
        return Err(bad(format!("`{}` needs a node", r.ev)));
    }
    for (k, ty) in fields {
        let v = r.get(k).ok_or_else(|| bad(format!("`{}` lacks `{k}`", r.ev)))?;
        let ok = match ty {
            Ty::U64 => v.parse::<u64>().is_ok(),
            Ty::Str => true,
            Ty::Hex => unhex(v).is_some(),
            Ty::HexOrDash => v == "-" || unhex(v).is_some(),
            Ty::Nodes => nodes_of(v).is_some(),
            Ty::Life => v.parse::<LifetimePolicy>().is_ok(),
            Ty::U64OrDash => v == "-" || v.parse::<u64>().is_ok(),
        };
        if !ok {
            return Err(bad(format!("`{}` has a malformed `{k}`", r.ev)));
        }
    }
    Ok(())
}

// Accessors for fields `validate` has already checked.
fn u(r: &TraceRecord, k: &str) -> u64 {
    r.u64(k).unwrap_or_default()
}

fn s<'a>(r: &'a TraceRecord, k: &str) -> &'a str {
    r.get(k).unwrap_or("-")
}

fn app(r: &TraceRecord) -> AppId {
    AppId(u(r, "app"))
}

fn okey(r: &TraceRecord) -> (AppId, String) {
    (app(r), s(r, "key").to_owned())
}

fn hex_opt(r: &TraceRecord, k: &str) -> Option<Vec<u8>> {
    r.get(k).and_then(unhex)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Obj {
    ver: u64,
    val: String,
    len: u64,
}

/// The replayed state of the cluster.
#[derive(Default)]
struct World {
    chains: BTreeMap<AppId, (u64, Vec<NodeId>)>,
    models: BTreeMap<NodeId, BTreeMap<(AppId, String), Obj>>,
    max_seq: BTreeMap<(NodeId, AppId), u64>,
    /// Latest acknowledged (version, seq) per key.
    acked: BTreeMap<(AppId, String), (u64, u64)>,
    removal_seq: BTreeMap<(AppId, String), u64>,
    frozen: BTreeSet<AppId>,
    down: BTreeSet<NodeId>,
}

impl World {
    fn head(&self, a: AppId) -> Option<NodeId> {
        self.chains.get(&a).and_then(|(_, c)| c.first().copied())
    }

    fn members(&self, a: AppId) -> &[NodeId] {
        self.chains.get(&a).map_or(&[], |(_, c)| c.as_slice())
    }

    fn model(&self, n: NodeId) -> impl Iterator<Item = (&(AppId, String), &Obj)> {
        self.models.get(&n).into_iter().flatten()
    }

    fn obj(&self, n: NodeId, k: &(AppId, String)) -> Option<&Obj> {
        self.models.get(&n).and_then(|m| m.get(k))
    }

    fn used(&self, n: NodeId) -> u64 {
        self.model(n).map(|(_, o)| o.len + OBJECT_OVERHEAD).sum()
    }

    fn unack(&mut self, k: &(AppId, String), seq: Option<u64>) {
        self.acked.remove(k);
        if let Some(seq) = seq {
            let e = self.removal_seq.entry(k.clone()).or_default();
            *e = (*e).max(seq);
        }
    }

    fn apply(&mut self, r: &TraceRecord) {
        let n = r.node.unwrap_or_default();
        match r.ev.as_str() {
            "reconfig" => {
                self.chains.insert(app(r), (u(r, "epoch"), nodes_of(s(r, "chain")).unwrap_or_default()));
            }
            "chain_apply" => {
                let k = okey(r);
                let seq = u(r, "seq");
                let m = self.models.entry(n).or_default();
                if s(r, "kind") == "put" {
                    let val = s(r, "val").to_owned();
                    let len = unhex(&val).map_or(0, |v| v.len() as u64);
                    m.insert(k.clone(), Obj { ver: u(r, "ver"), val, len });
                } else {
                    m.remove(&k);
                    if self.head(k.0) == Some(n) {
                        self.unack(&k, Some(seq));
                    }
                }
                let e = self.max_seq.entry((n, k.0)).or_default();
                *e = if s(r, "via") == "snapshot" { seq } else { (*e).max(seq) };
            }
            "evict" => {
                let a = app(r);
                if let Some(m) = self.models.get_mut(&n) {
                    m.retain(|(x, _), _| *x != a);
                }
            }
            "erase" => {
                if let Some(m) = self.models.get_mut(&n) {
                    m.remove(&okey(r));
                }
            }
            "put_ack" => {
                let k = okey(r);
                let (ver, seq) = (u(r, "ver"), u(r, "seq"));
                if self.removal_seq.get(&k).is_some_and(|rs| *rs > seq) {
                    return;
                }
                if self.acked.get(&k).is_none_or(|(_, s0)| *s0 < seq) {
                    self.acked.insert(k, (ver, seq));
                }
            }
            "del_ack" => self.unack(&okey(r), Some(u(r, "seq"))),
            "gc_delete" | "backup" => self.unack(&okey(r), None),
            "freeze" => {
                self.frozen.insert(app(r));
            }
            "unfreeze" => {
                self.frozen.remove(&app(r));
            }
            "crash" => {
                self.down.insert(n);
            }
            "restart" => {
                self.down.remove(&n);
            }
            _ => {}
        }
    }
}

struct Outcome {
    checked: u64,
    violation: Option<Violation>,
    applicable: bool,
}

/// Per-object GC bookkeeping at the app level.
struct GcObj {
    created: SimTime,
    /// When the current lifetime was assigned.
    since: SimTime,
    life: LifetimePolicy,
    first_read: Option<SimTime>,
    acked_at: Option<SimTime>,
    judged: bool,
    notice_lost: bool,
}

struct Checker<'a> {
    sc: &'a Scenario,
    w: World,
    out: BTreeMap<&'static str, Outcome>,
    line: usize,
    rec: Option<TraceRecord>,
    last_t: SimTime,
    models: BTreeMap<AppId, Model>,
    // ack durability / sessions
    session_acked: BTreeMap<(AppId, String, u64), u64>,
    // single writer order
    seq_sig: BTreeMap<(AppId, u64), (String, String, u64, String)>,
    // fail closed
    failed_ops: BTreeSet<u64>,
    // op metadata: val, ts, writer
    op_val: BTreeMap<u64, String>,
    op_order: BTreeMap<u64, (u64, u64)>,
    op_key: BTreeMap<u64, (AppId, String)>,
    removed_ever: BTreeSet<(AppId, String)>,
    acked_ops: BTreeMap<(AppId, String), Vec<u64>>,
    fww_first: BTreeMap<(AppId, String), String>,
    // gc
    gc: BTreeMap<(AppId, String), GcObj>,
    fired: BTreeSet<u64>,
    disturb: BTreeMap<AppId, Vec<(SimTime, SimTime)>>,
    // eol
    notices: BTreeSet<NodeId>,
    erased_since: BTreeMap<NodeId, u64>,
    // triggers
    streaks: BTreeMap<(usize, NodeId), u32>,
    expected_fires: Vec<(SimTime, NodeId, String)>,
    last_sample: BTreeMap<NodeId, SimTime>,
    // migration
    mig_tids: BTreeSet<u64>,
    copy_snap: BTreeMap<u64, (NodeId, BTreeMap<String, u64>)>,
    mig_from: BTreeMap<u64, Vec<NodeId>>,
    buffered: BTreeMap<AppId, Vec<u64>>,
    replay_expect: BTreeMap<AppId, Vec<u64>>,
    // finals
    finals: BTreeMap<(NodeId, AppId, String), (u64, String)>,
    final_chains: BTreeMap<AppId, Vec<NodeId>>,
}

/// Parses and checks a rendered trace.
pub fn check_text(text: &str, sc: &Scenario) -> Result<CheckReport, MalformedTrace> {
    let recs = crate::harness::trace::parse_trace(text)?;
    check(&recs, sc)
}

/// Evaluates every invariant over `records` (one record per trace line).
pub fn check(records: &[TraceRecord], sc: &Scenario) -> Result<CheckReport, MalformedTrace> {
    for (i, r) in records.iter().enumerate() {
        validate(i + 1, r)?;
    }
    let models: BTreeMap<AppId, Model> = sc.apps.iter().map(|a| (a.id, a.consistency)).collect();
    let uses = |m: Model| models.values().any(|x| *x == m);
    let mut out = BTreeMap::new();
    for name in INVARIANTS {
        let applicable = match name {
            "lww_convergence" | "lww_admission" => uses(Model::Lww),
            "fww_immutability" | "fww_admission" => uses(Model::Fww),
            "rmw_session" => uses(Model::Rmw),
            "trigger_sustain" => sc.triggers.iter().any(|t| matches!(t.source, TriggerSourceDecl::Threshold { .. })),
            _ => true,
        };
        out.insert(name, Outcome { checked: 0, violation: None, applicable });
    }
    let mut c = Checker {
        sc,
        w: World::default(),
        out,
        line: 0,
        rec: None,
        last_t: 0,
        models,
        session_acked: BTreeMap::new(),
        seq_sig: BTreeMap::new(),
        failed_ops: BTreeSet::new(),
        op_val: BTreeMap::new(),
        op_order: BTreeMap::new(),
        op_key: BTreeMap::new(),
        removed_ever: BTreeSet::new(),
        acked_ops: BTreeMap::new(),
        fww_first: BTreeMap::new(),
        gc: BTreeMap::new(),
        fired: BTreeSet::new(),
        disturb: BTreeMap::new(),
        notices: BTreeSet::new(),
        erased_since: BTreeMap::new(),
        streaks: BTreeMap::new(),
        expected_fires: Vec::new(),
        last_sample: BTreeMap::new(),
        mig_tids: BTreeSet::new(),
        copy_snap: BTreeMap::new(),
        mig_from: BTreeMap::new(),
        buffered: BTreeMap::new(),
        replay_expect: BTreeMap::new(),
        finals: BTreeMap::new(),
        final_chains: BTreeMap::new(),
    };
    for (i, r) in records.iter().enumerate() {
        c.line = i + 1;
        c.rec = Some(r.clone());
        c.observe(r);
        c.w.apply(r);
    }
    c.line = 0;
    c.rec = None;
    c.finish();
    let results = INVARIANTS
        .iter()
        .map(|name| {
            let o = c.out.remove(name).expect("every invariant has an entry");
            InvariantResult { name, applicable: o.applicable, checked: o.checked, violation: o.violation }
        })
        .collect();
    Ok(CheckReport { results })
}

impl Checker<'_> {
    fn count(&mut self, name: &'static str) {
        self.out.get_mut(name).expect("known invariant").checked += 1;
    }

    fn fail(&mut self, name: &'static str, msg: impl Into<String>) {
        let o = self.out.get_mut(name).expect("known invariant");
        if o.violation.is_none() {
            o.violation = Some(Violation {
                line: self.line,
                record: self.rec.as_ref().map(ToString::to_string).unwrap_or_default(),
                msg: msg.into(),
            });
        }
    }

    fn model_of(&self, a: AppId) -> Option<Model> {
        self.models.get(&a).copied()
    }

    fn observe(&mut self, r: &TraceRecord) {
        self.count("clock_monotonicity");
        if r.t < self.last_t {
            self.fail("clock_monotonicity", format!("time went back from {}", self.last_t));
        }
        if r.t > self.last_t {
            self.advance(r.t);
        }
        self.last_t = r.t;
        let n = r.node.unwrap_or_default();
        if matches!(r.ev.as_str(), "admit" | "chain_apply" | "put_reject" | "del_reject" | "put_ack" | "del_ack")
            && r.get("op").is_some()
        {
            self.on_replayed(r);
        }
        match r.ev.as_str() {
            "put_issue" => {
                self.op_val.insert(u(r, "op"), s(r, "val").to_owned());
            }
            "admit" => self.on_admit(r),
            "chain_apply" => self.on_apply(n, r),
            "put_ack" => self.on_put_ack(n, r),
            "del_ack" => {
                let k = okey(r);
                self.on_removed(&k);
            }
            "get_ok" => self.on_get_ok(n, r),
            "get_notfound" => {
                self.count("ack_durability");
                if let Some((v, _)) = self.w.acked.get(&okey(r)) {
                    self.fail("ack_durability", format!("acked version {v} not found"));
                }
            }
            "gc_delete" => self.on_gc_delete(r),
            "backup" => {
                let k = okey(r);
                self.on_removed(&k);
                self.gc.remove(&k);
            }
            "evict" | "erase" => {
                if r.ev == "erase" {
                    *self.erased_since.entry(n).or_default() += 1;
                }
                if self.notices.contains(&n) {
                    self.fail("eol_safety", "store activity after provider notice");
                }
            }
            "sample" => self.on_sample(n, r),
            "trigger_fire" => self.on_trigger_fire(n, r),
            "reconfig" => self.on_reconfig(r),
            "crash" => {
                self.streaks.retain(|(_, m), _| *m != n);
                for (a, (_, c)) in &self.w.chains {
                    if c.first() == Some(&n) {
                        self.disturb.entry(*a).or_default().push((r.t, SimTime::MAX));
                    }
                }
            }
            "restart" => {
                for (a, (_, c)) in &self.w.chains {
                    if c.first() == Some(&n) {
                        close_open(self.disturb.entry(*a).or_default(), r.t);
                    }
                }
            }
            "freeze" => {
                let a = app(r);
                self.disturb.entry(a).or_default().push((r.t, SimTime::MAX));
                self.buffered.insert(a, Vec::new());
            }
            "unfreeze" => {
                let a = app(r);
                close_open(self.disturb.entry(a).or_default(), r.t);
                if let Some(b) = self.buffered.remove(&a) {
                    if !b.is_empty() {
                        self.replay_expect.insert(a, b);
                    }
                }
            }
            "buffer" => {
                let a = app(r);
                self.buffered.entry(a).or_default().push(u(r, "op"));
            }
            "drop" if s(r, "msg") == "read_notice" => {
                for g in self.gc.values_mut() {
                    if g.first_read.is_some() {
                        g.notice_lost = true;
                    }
                }
            }
            "migrate_begin" | "migrate_switch" | "migrate_abort" => self.on_migration(r),
            "copy_begin" => {
                let tid = u(r, "tid");
                if self.mig_tids.contains(&tid) {
                    let a = app(r);
                    let snap =
                        self.w.model(n).filter(|((x, _), _)| *x == a).map(|((_, k), o)| (k.clone(), o.ver)).collect();
                    self.copy_snap.insert(tid, (n, snap));
                }
            }
            "provider_notice" => self.on_provider_notice(n, r),
            "final" => {
                self.finals.insert((n, app(r), s(r, "key").to_owned()), (u(r, "ver"), s(r, "val").to_owned()));
            }
            "final_chain" => {
                self.final_chains.insert(app(r), nodes_of(s(r, "chain")).unwrap_or_default());
            }
            _ => {}
        }
    }

    /// Judges deadlines that passed before `t`.
    fn advance(&mut self, t: SimTime) {
        if let Some(pos) = self.expected_fires.iter().position(|(ft, _, _)| *ft < t) {
            let (ft, node, name) = self.expected_fires[pos].clone();
            self.fail("trigger_sustain", format!("trigger {name} should have fired at node {node} at t={ft}"));
            self.expected_fires.retain(|(ft, _, _)| *ft >= t);
        }
        let gi = self.sc.sim.gc_interval;
        let mut late = Vec::new();
        for ((a, key), g) in self.gc.iter_mut() {
            if g.judged {
                continue;
            }
            let window = match g.life.kind {
                LifetimeKind::Ttl(d) => {
                    let start = (g.created + d).max(g.since);
                    Some((start, start + gi))
                }
                LifetimeKind::ReadOnce => g.first_read.map(|fr| (fr, fr + gi)),
                _ => None,
            };
            let Some((start, deadline)) = window else { continue };
            if deadline >= t {
                continue;
            }
            g.judged = true;
            let disturbed =
                self.disturb.get(a).is_some_and(|iv| iv.iter().any(|(s0, e)| *s0 <= deadline && *e >= start));
            if disturbed || (g.life.kind == LifetimeKind::ReadOnce && g.notice_lost) {
                continue;
            }
            late.push(format!("{a}/{key} not deleted by t={deadline}"));
        }
        let n = late.len() as u64;
        self.out.get_mut("gc_safety").expect("known").checked += n;
        if let Some(m) = late.into_iter().next() {
            self.fail("gc_safety", m);
        }
    }

    fn on_admit(&mut self, r: &TraceRecord) {
        let op = u(r, "op");
        let verdict = s(r, "verdict");
        let note = s(r, "note");
        let a = app(r);
        self.count("fail_closed");
        if note != "-" {
            if verdict != "reject" {
                self.fail("fail_closed", "trapped admission was not rejected");
            }
            self.failed_ops.insert(op);
        }
        self.count("state_bound");
        if hex_opt(r, "new").is_some_and(|v| v.len() > crate::appcode::STATE_CAP) {
            self.fail("state_bound", "admitted state larger than 256 bytes");
        }
        if s(r, "kind") != "write" {
            return;
        }
        if verdict == "accept" {
            self.op_order.insert(op, (u(r, "ts"), u(r, "writer")));
            self.op_key.insert(op, okey(r));
        }
        let state = hex_opt(r, "state");
        let (ts, writer) = (u(r, "ts"), u(r, "writer"));
        let (name, expect) = match self.model_of(a) {
            Some(Model::Lww) => ("lww_admission", lww_oracle(state.as_deref(), ts, writer)),
            Some(Model::Fww) => ("fww_admission", fww_oracle(state.as_deref())),
            _ => return,
        };
        self.count(name);
        let got = (verdict.to_owned(), hex_opt(r, "new"));
        if got != (expect.0.to_owned(), expect.1.clone()) {
            self.fail(name, format!("oracle says {} with state {:?}", expect.0, expect.1.map(hex::encode)));
        }
    }

    fn on_replayed(&mut self, r: &TraceRecord) {
        let a = app(r);
        let op = u(r, "op");
        let Some(mut list) = self.replay_expect.remove(&a) else { return };
        if let Some(pos) = list.iter().position(|o| *o == op) {
            self.count("order_preservation");
            if pos != 0 {
                let first = list[0];
                self.fail("order_preservation", format!("buffered op {op} handled before op {first}"));
            }
            list.drain(..=pos);
        }
        if !list.is_empty() {
            self.replay_expect.insert(a, list);
        }
    }

    fn on_apply(&mut self, n: NodeId, r: &TraceRecord) {
        let k = okey(r);
        let (seq, epoch, ver) = (u(r, "seq"), u(r, "epoch"), u(r, "ver"));
        let kind = s(r, "kind");
        let via = s(r, "via");
        let cur = self.w.obj(n, &k).map(|o| o.ver);
        self.count("version_monotonicity");
        match (kind, via) {
            ("put", "snapshot") => {}
            ("put", _) => {
                let want = cur.unwrap_or(0) + 1;
                if ver != want {
                    self.fail("version_monotonicity", format!("version {ver} applied, expected {want}"));
                }
            }
            _ => {
                if ver != cur.unwrap_or(0) {
                    self.fail("version_monotonicity", format!("removed version {ver}, store had {}", cur.unwrap_or(0)));
                }
            }
        }
        self.count("state_bound");
        if hex_opt(r, "state").is_some_and(|v| v.len() > crate::appcode::STATE_CAP) {
            self.fail("state_bound", "stored state larger than 256 bytes");
        }
        if self.notices.contains(&n) {
            self.fail("eol_safety", "replica applied on an erased node");
        }
        if let Ok(op) = s(r, "op").parse::<u64>() {
            self.count("fail_closed");
            if self.failed_ops.contains(&op) {
                self.fail("fail_closed", format!("op {op} applied after a fail-closed admission"));
            }
        }
        if via == "snapshot" {
            return;
        }
        self.count("epoch_safety");
        let (cur_epoch, members) = self.w.chains.get(&k.0).cloned().unwrap_or_default();
        if epoch != cur_epoch {
            self.fail("epoch_safety", format!("update of epoch {epoch} applied in epoch {cur_epoch}"));
        } else if !members.contains(&n) {
            self.fail("epoch_safety", "update applied on a non-member");
        }
        self.count("single_writer_order");
        let last = self.w.max_seq.get(&(n, k.0)).copied().unwrap_or(0);
        if seq <= last {
            self.fail("single_writer_order", format!("seq {seq} applied after seq {last}"));
        }
        let sig = (k.1.clone(), kind.to_owned(), ver, s(r, "val").to_owned());
        match self.seq_sig.get(&(k.0, seq)) {
            Some(prev) if *prev != sig => {
                self.fail("single_writer_order", format!("seq {seq} differs from its first application"));
            }
            Some(_) => {}
            None => {
                self.seq_sig.insert((k.0, seq), sig);
            }
        }
        let is_head = self.w.head(k.0) == Some(n);
        if kind == "put" && is_head {
            let life: LifetimePolicy = s(r, "life").parse().unwrap_or_default();
            let created = u(r, "created");
            let g = self.gc.entry(k.clone()).or_insert(GcObj {
                created,
                since: r.t,
                life,
                first_read: None,
                acked_at: None,
                judged: false,
                notice_lost: false,
            });
            g.created = created;
            if g.life != life {
                g.life = life;
                g.since = r.t;
                g.first_read = None;
                g.judged = false;
            }
        } else if kind != "put" && is_head {
            self.on_removed(&k);
            self.gc.remove(&k);
        }
    }

    /// A key was deleted; per-incarnation bookkeeping starts over.
    fn on_removed(&mut self, k: &(AppId, String)) {
        self.removed_ever.insert(k.clone());
        self.fww_first.remove(k);
        self.session_acked.retain(|(a, key, _), _| !(*a == k.0 && *key == k.1));
    }

    fn on_put_ack(&mut self, _n: NodeId, r: &TraceRecord) {
        let k = okey(r);
        let (ver, seq, op) = (u(r, "ver"), u(r, "seq"), u(r, "op"));
        if self.w.removal_seq.get(&k).is_some_and(|rs| *rs > seq) {
            return;
        }
        self.count("ack_durability");
        let lagging =
            self.w.members(k.0).iter().find(|m| self.w.max_seq.get(&(**m, k.0)).copied().unwrap_or(0) < seq).copied();
        if let Some(m) = lagging {
            self.fail("ack_durability", format!("acked seq {seq} before node {m} applied it"));
        }
        if let Some(g) = self.gc.get_mut(&k) {
            g.acked_at.get_or_insert(r.t);
        }
        self.acked_ops.entry(k.clone()).or_default().push(op);
        let session = u(r, "session");
        let e = self.session_acked.entry((k.0, k.1.clone(), session)).or_default();
        *e = (*e).max(ver);
        if self.model_of(k.0) == Some(Model::Fww) {
            self.count("fww_immutability");
            let val = self.op_val.get(&op).cloned().unwrap_or_default();
            match self.fww_first.get(&k) {
                Some(first) if *first != val => self.fail("fww_immutability", "second value acked for key"),
                Some(_) => {}
                None => {
                    self.fww_first.insert(k, val);
                }
            }
        }
    }

    fn on_get_ok(&mut self, n: NodeId, r: &TraceRecord) {
        let k = okey(r);
        let ver = u(r, "ver");
        self.count("ack_durability");
        if let Some((v, _)) = self.w.acked.get(&k) {
            if ver < *v {
                self.fail("ack_durability", format!("read version {ver} after version {v} was acked"));
            }
        }
        self.count("version_monotonicity");
        match self.w.obj(n, &k) {
            Some(o) if o.ver == ver && o.val == s(r, "val") => {}
            _ => self.fail("version_monotonicity", "read does not match the serving replica"),
        }
        if let Some(g) = self.gc.get_mut(&k) {
            g.first_read.get_or_insert(r.t);
        }
        let session = u(r, "session");
        if self.model_of(k.0) == Some(Model::Rmw) {
            self.count("rmw_session");
            if let Some(seen) = self.session_acked.get(&(k.0, k.1.clone(), session)) {
                if ver < *seen {
                    self.fail("rmw_session", format!("session {session} read version {ver} after acked {seen}"));
                }
            }
        }
        if self.model_of(k.0) == Some(Model::Fww) {
            self.count("fww_immutability");
            if self.fww_first.get(&k).is_some_and(|first| first != s(r, "val")) {
                self.fail("fww_immutability", "read returned a value other than the first acked");
            }
        }
    }

    fn on_gc_delete(&mut self, r: &TraceRecord) {
        let k = okey(r);
        self.on_removed(&k);
        let Some(g) = self.gc.remove(&k) else { return };
        if s(r, "by") == "hook" {
            return;
        }
        self.count("gc_safety");
        let t = r.t;
        let early = match g.life.kind {
            LifetimeKind::Manual => Some("manual object removed by policy".to_owned()),
            LifetimeKind::Ttl(d) if t < g.created + d => Some(format!("deleted before expiry at {}", g.created + d)),
            LifetimeKind::ReadOnce if g.first_read.is_none_or(|fr| fr > t) => {
                Some("read-once object deleted unread".into())
            }
            LifetimeKind::WriteOnce if g.acked_at.is_none() => Some("write-once object deleted before its ack".into()),
            LifetimeKind::OnEvent(id) if !self.fired.contains(&id.0) => {
                Some(format!("deleted before trigger {id} fired"))
            }
            _ => None,
        };
        if let Some(m) = early {
            self.fail("gc_safety", m);
        }
    }

    fn on_sample(&mut self, n: NodeId, r: &TraceRecord) {
        self.count("store_accounting");
        let used = u(r, "used");
        let model = self.w.used(n);
        if used != model {
            self.fail("store_accounting", format!("sample reports {used} bytes, replay gives {model}"));
        }
        self.count("sample_monotone");
        let iv = self.sc.sim.sample_interval;
        let gap = match self.last_sample.insert(n, r.t) {
            Some(prev) => r.t.checked_sub(prev).filter(|g| *g > 0),
            None => Some(r.t),
        };
        if gap.is_none_or(|g| iv == 0 || g % iv != 0) {
            self.fail("sample_monotone", "sample time off the sampling grid");
        }
        let sample = MetricsSample {
            node_id: n,
            t: r.t,
            cpu_milli: u(r, "cpu"),
            used_bytes: used,
            capacity_bytes: u(r, "cap"),
            wear_milli: u(r, "wear"),
            msgs_in: u(r, "in"),
            msgs_out: u(r, "out"),
            ..Default::default()
        };
        for (i, t) in self.sc.triggers.iter().enumerate() {
            let TriggerSourceDecl::Threshold { metric, cmp, value } = t.source else { continue };
            if t.attach != AttachPoint::Tick {
                continue;
            }
            let in_scope = match &t.scope {
                ScopeDecl::All => true,
                ScopeDecl::Nodes(ns) => ns.contains(&n),
                ScopeDecl::App => t.app.is_some_and(|a| self.w.members(a).contains(&n)),
            };
            if !in_scope {
                continue;
            }
            self.count("trigger_sustain");
            let streak = self.streaks.entry((i, n)).or_default();
            if !cmp.holds(metric.value(&sample), value) {
                *streak = 0;
                continue;
            }
            *streak += 1;
            if *streak >= t.sustain {
                *streak = 0;
                self.expected_fires.push((r.t, n, t.name.clone()));
            }
        }
    }

    fn on_trigger_fire(&mut self, n: NodeId, r: &TraceRecord) {
        self.fired.insert(u(r, "id"));
        let name = s(r, "trigger");
        let threshold = self.sc.triggers.iter().any(|t| {
            t.name == name && t.attach == AttachPoint::Tick && matches!(t.source, TriggerSourceDecl::Threshold { .. })
        });
        if !threshold || r.get("op").is_some() {
            return;
        }
        match self.expected_fires.iter().position(|(t, m, nm)| *t == r.t && *m == n && nm == name) {
            Some(i) => {
                self.expected_fires.remove(i);
            }
            None => self.fail("trigger_sustain", format!("trigger {name} fired without a sustained breach")),
        }
    }

    fn on_reconfig(&mut self, r: &TraceRecord) {
        let a = app(r);
        let nodes = nodes_of(s(r, "chain")).unwrap_or_default();
        let old_head = self.w.head(a);
        if old_head.is_some() && old_head != nodes.first().copied() {
            let iv = self.disturb.entry(a).or_default();
            close_open(iv, r.t);
            iv.push((r.t, r.t));
        }
        self.count("default_placement");
        let spec = self.sc.app(a);
        if let Some(spec) = spec.filter(|s| s.placement.is_none()) {
            let reshapes = spec.lb.is_some() || spec.migration.is_some();
            if nodes.len() > 1 && (s(r, "reason") == "place" || !reshapes) {
                self.fail(
                    "default_placement",
                    format!("app {a} without placement appcode got {} replicas", nodes.len()),
                );
            }
        }
        for n in &nodes {
            if self.notices.contains(n) {
                self.fail("eol_safety", format!("erased node {n} joined a chain"));
            }
        }
    }

    fn on_migration(&mut self, r: &TraceRecord) {
        self.count("no_default_migration");
        let has_trigger = self.sc.triggers.iter().any(|t| t.action == TriggerAction::Migrate);
        if !has_trigger {
            self.fail("no_default_migration", "migration without a migration trigger");
        }
        let tid = u(r, "tid");
        let a = app(r);
        match r.ev.as_str() {
            "migrate_begin" => {
                self.mig_tids.insert(tid);
                self.mig_from.insert(tid, nodes_of(s(r, "from")).unwrap_or_default());
            }
            "migrate_switch" => {
                self.count("migration_atomicity");
                let to = nodes_of(s(r, "to")).unwrap_or_default();
                let Some(&tail) = to.last() else { return };
                let mut missing = None;
                for ((x, key), (v, _)) in &self.w.acked {
                    if *x == a && self.w.obj(tail, &(a, key.clone())).is_none_or(|o| o.ver < *v) {
                        missing = Some(format!("acked {key} v{v} missing at new tail {tail}"));
                        break;
                    }
                }
                if missing.is_none() {
                    if let Some((_, snap)) = self.copy_snap.get(&tid) {
                        for (key, v) in snap {
                            if self.w.obj(tail, &(a, key.clone())).is_none_or(|o| o.ver < *v) {
                                missing = Some(format!("{key} v{v} from the old tail missing at {tail}"));
                                break;
                            }
                        }
                    }
                }
                if let Some(m) = missing {
                    self.fail("migration_atomicity", m);
                }
            }
            _ => {
                if s(r, "reason") != "copy_timeout" {
                    return;
                }
                let Some((tail, snap)) = self.copy_snap.get(&tid).cloned() else { return };
                self.count("migration_atomicity");
                let now: BTreeMap<String, u64> =
                    self.w.model(tail).filter(|((x, _), _)| *x == a).map(|((_, k), o)| (k.clone(), o.ver)).collect();
                if now != snap {
                    self.fail("migration_atomicity", "aborted migration changed the old tail's key versions");
                }
            }
        }
    }

    fn on_provider_notice(&mut self, n: NodeId, r: &TraceRecord) {
        self.count("eol_safety");
        if !self.notices.insert(n) {
            self.fail("eol_safety", "second provider notice for node");
        }
        let erased = self.erased_since.remove(&n).unwrap_or(0);
        if erased != u(r, "erased") {
            self.fail("eol_safety", format!("notice counts {} erased objects, trace shows {erased}", u(r, "erased")));
        }
        if self.w.model(n).next().is_some() {
            self.fail("eol_safety", "objects remain on the erased node");
        }
        for (a, (_, c)) in &self.w.chains {
            if c.contains(&n) {
                self.fail("eol_safety", format!("erased node still in chain of app {a}"));
                return;
            }
        }
        let lost = self.w.acked.iter().find(|((a, key), (v, _))| {
            !self.w.members(*a).iter().any(|m| self.w.obj(*m, &(*a, key.clone())).is_some_and(|o| o.ver >= *v))
        });
        if let Some(((a, key), (v, _))) = lost {
            let m = format!("acked {a}/{key} v{v} readable nowhere");
            self.fail("eol_safety", m);
        }
    }

    fn finish(&mut self) {
        self.advance(self.sc.sim.duration.max(self.last_t));
        // Final dumps must agree with the replayed stores.
        if !self.final_chains.is_empty() {
            self.count("store_accounting");
            let mut replay = BTreeMap::new();
            for (n, m) in &self.w.models {
                for ((a, key), o) in m {
                    replay.insert((*n, *a, key.clone()), (o.ver, o.val.clone()));
                }
            }
            if replay != self.finals {
                let diff = replay
                    .iter()
                    .find(|(k, v)| self.finals.get(*k) != Some(*v))
                    .map(|(k, _)| k.clone())
                    .or_else(|| self.finals.keys().find(|k| !replay.contains_key(*k)).cloned());
                let msg = match diff {
                    Some((n, a, key)) => format!("final store of node {n} disagrees with replay on {a}/{key}"),
                    None => "final store disagrees with replay".to_owned(),
                };
                self.fail("store_accounting", msg);
            }
        }
        // LWW: live members agree on a value at least as new as the greatest acked write.
        let mut keys: Vec<(AppId, String)> = self.acked_ops.keys().cloned().collect();
        keys.retain(|k| self.model_of(k.0) == Some(Model::Lww) && !self.removed_ever.contains(k));
        for k in keys {
            self.count("lww_convergence");
            let best = self.acked_ops[&k].iter().filter_map(|op| self.op_order.get(op).copied()).max();
            let Some(best) = best else { continue };
            let newer: BTreeSet<String> = self
                .op_order
                .iter()
                .filter(|(op, o)| **o >= best && self.op_key.get(*op) == Some(&k))
                .filter_map(|(op, _)| self.op_val.get(op).cloned())
                .collect();
            let mut members = self.final_chains.get(&k.0).cloned().unwrap_or_default();
            members.retain(|m| !self.w.down.contains(m));
            let mut seen: Option<String> = None;
            for m in members {
                let got = self.finals.get(&(m, k.0, k.1.clone())).map(|(_, v)| v.clone());
                let msg = match (&got, &seen) {
                    (None, _) => Some(format!("node {m} lost {}/{}", k.0, k.1)),
                    (Some(v), _) if !newer.contains(v) => {
                        Some(format!("node {m} ends with a value older than the last acked write to {}/{}", k.0, k.1))
                    }
                    (Some(v), Some(prev)) if v != prev => Some(format!("live members disagree on {}/{}", k.0, k.1)),
                    _ => None,
                };
                if let Some(msg) = msg {
                    self.fail("lww_convergence", msg);
                }
                seen = got.or(seen);
            }
        }
    }
}

fn close_open(iv: &mut [(SimTime, SimTime)], t: SimTime) {
    for e in iv.iter_mut().filter(|(_, e)| *e == SimTime::MAX) {
        e.1 = t;
    }
}

/// Host-side last-writer-wins admission.
pub fn lww_oracle(state: Option<&[u8]>, ts: u64, writer: u64) -> (&'static str, Option<Vec<u8>>) {
    let accept = match state {
        Some(st) if st.len() >= 16 => {
            let sts = u64::from_le_bytes(st[..8].try_into().expect("8 bytes"));
            let sw = u64::from_le_bytes(st[8..16].try_into().expect("8 bytes"));
            (ts, writer) > (sts, sw)
        }
        _ => true,
    };
    if accept {
        let mut new = ts.to_le_bytes().to_vec();
        new.extend_from_slice(&writer.to_le_bytes());
        ("accept", Some(new))
    } else {
        ("reject", None)
    }
}

/// Host-side first-writer-wins admission.
pub fn fww_oracle(state: Option<&[u8]>) -> (&'static str, Option<Vec<u8>>) {
    match state {
        Some(_) => ("reject", None),
        None => ("accept", Some(1u64.to_le_bytes().to_vec())),
    }
}
