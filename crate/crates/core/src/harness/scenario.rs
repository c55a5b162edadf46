//! Scenario files: one `directive key=value ...` per line, `#` comments.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::appcode::{library, load, load_all, HookKind, LoadError, VerifiedProgram};
use crate::consistency::{Model, FWW_SOURCE, LWW_SOURCE, RMW_SOURCE};
use crate::ids::{AppId, ClientId, NodeId, SimTime, NS_PER_MS, NS_PER_S, NS_PER_US};
use crate::monitor::{AttachPoint, Cmp, Metric, TriggerAction};
use crate::store::{LifetimeKind, LifetimePolicy};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("appcode `{name}`: {source}")]
    Load { name: String, source: LoadError },
    #[error("appcode `{name}`: {msg}")]
    Appcode { name: String, msg: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: SimTime,
    pub gc_interval: u64,
    pub sample_interval: u64,
    pub write_timeout: u64,
    pub copy_timeout: u64,
    pub link_latency_us: u64,
    pub link_jitter_us: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            duration: 10 * NS_PER_S,
            gc_interval: 50 * NS_PER_MS,
            sample_interval: 100 * NS_PER_MS,
            write_timeout: 2 * NS_PER_S,
            copy_timeout: 5 * NS_PER_S,
            link_latency_us: 1000,
            link_jitter_us: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub capacity: u64,
    pub x: i64,
    pub y: i64,
    /// Background CPU load in milli.
    pub load: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub latency_us: u64,
    pub jitter_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodeSource {
    Builtin(String),
    /// Path relative to the scenario file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppcodeSpec {
    pub name: String,
    pub source: CodeSource,
    /// Program to pick from a multi-program source.
    pub program: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppSpec {
    pub id: AppId,
    pub origin: NodeId,
    pub replicas: u64,
    pub consistency: Model,
    pub cw: Option<String>,
    pub cr: Option<String>,
    pub placement: Option<String>,
    pub lb: Option<String>,
    pub migration: Option<String>,
    pub gc: Option<String>,
    pub compute: Vec<String>,
    pub lifetime: LifetimePolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSpec {
    pub id: ClientId,
    pub origin: NodeId,
    pub session: u64,
    pub latency_us: u64,
    /// How far the client's clock runs ahead of simulated time.
    pub skew_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectPolicySpec {
    pub app: AppId,
    pub prefix: String,
    pub lifetime: LifetimePolicy,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TriggerSourceDecl {
    Threshold { metric: Metric, cmp: Cmp, value: u64 },
    Appcode(String),
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScopeDecl {
    All,
    App,
    Nodes(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerDecl {
    pub name: String,
    pub app: Option<AppId>,
    pub source: TriggerSourceDecl,
    pub sustain: u32,
    pub attach: AttachPoint,
    pub scope: ScopeDecl,
    pub action: TriggerAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueSpec {
    Bytes(Vec<u8>),
    /// `size` deterministic filler bytes.
    Fill(usize),
}

impl ValueSpec {
    pub fn bytes(&self) -> Vec<u8> {
        match self {
            ValueSpec::Bytes(b) => b.clone(),
            ValueSpec::Fill(n) => (0..*n).map(|i| (i * 31 + 7) as u8).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKindSpec {
    Put {
        app: AppId,
        key: String,
        value: ValueSpec,
        lifetime: Option<LifetimePolicy>,
    },
    Get {
        app: AppId,
        key: String,
    },
    Delete {
        app: AppId,
        key: String,
    },
    Compute {
        app: AppId,
        key: String,
    },
    /// The client (and the app's users) move to a new position.
    Move {
        app: AppId,
        x: i64,
        y: i64,
        origin: Option<NodeId>,
    },
    /// Fires a trigger by hand.
    Fire {
        trigger: String,
        node: Option<NodeId>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpec {
    pub t: SimTime,
    pub client: Option<ClientId>,
    pub kind: OpKindSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultKindSpec {
    Partition {
        a: NodeId,
        b: NodeId,
        duration: u64,
    },
    Crash(NodeId),
    Restart(NodeId),
    Wear {
        node: NodeId,
        milli: u64,
    },
    /// Starts the end-of-life workflow without waiting for wear.
    Eol(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpec {
    pub t: SimTime,
    pub kind: FaultKindSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub sim: SimConfig,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub appcode: Vec<AppcodeSpec>,
    pub apps: Vec<AppSpec>,
    pub clients: Vec<ClientSpec>,
    pub policies: Vec<ObjectPolicySpec>,
    pub triggers: Vec<TriggerDecl>,
    pub ops: Vec<OpSpec>,
    pub faults: Vec<FaultSpec>,
}

/// Parses `10ms`, `3s`, `250us`, `7ns` or a bare nanosecond count.
pub fn parse_duration(s: &str) -> Result<u64, String> {
    let (num, mult) = if let Some(n) = s.strip_suffix("ns") {
        (n, 1)
    } else if let Some(n) = s.strip_suffix("us") {
        (n, NS_PER_US)
    } else if let Some(n) = s.strip_suffix("ms") {
        (n, NS_PER_MS)
    } else if let Some(n) = s.strip_suffix('s') {
        (n, NS_PER_S)
    } else {
        (s, 1)
    };
    let v: u64 = num.parse().map_err(|_| format!("bad duration `{s}`"))?;
    v.checked_mul(mult).ok_or_else(|| format!("duration `{s}` overflows"))
}

pub fn format_duration(ns: u64) -> String {
    if ns == 0 {
        "0".into()
    } else if ns.is_multiple_of(NS_PER_S) {
        format!("{}s", ns / NS_PER_S)
    } else if ns.is_multiple_of(NS_PER_MS) {
        format!("{}ms", ns / NS_PER_MS)
    } else if ns.is_multiple_of(NS_PER_US) {
        format!("{}us", ns / NS_PER_US)
    } else {
        format!("{ns}ns")
    }
}

/// Lifetime with an optional duration suffix on the ttl.
fn parse_lifetime(s: &str) -> Result<LifetimePolicy, String> {
    if let Some(rest) = s.strip_prefix("ttl:") {
        let (d, disposal) = match rest.split_once('/') {
            Some((d, disp)) => (d, Some(disp)),
            None => (rest, None),
        };
        let ns = parse_duration(d)?;
        let canon = match disposal {
            Some(disp) => format!("ttl:{ns}/{disp}"),
            None => format!("ttl:{ns}"),
        };
        return canon.parse();
    }
    s.parse()
}

fn format_lifetime(p: &LifetimePolicy) -> String {
    match p.kind {
        LifetimeKind::Ttl(ns) => format!("ttl:{}/{}", format_duration(ns), p.disposal.as_str()),
        _ => p.to_string(),
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"_./:-".contains(&b))
}

fn parse_value(s: &str) -> Result<ValueSpec, String> {
    if let Some(h) = s.strip_prefix("0x") {
        return hex::decode(h).map(ValueSpec::Bytes).map_err(|_| format!("bad hex value `{s}`"));
    }
    Ok(ValueSpec::Bytes(s.as_bytes().to_vec()))
}

fn format_value(v: &ValueSpec) -> String {
    match v {
        ValueSpec::Fill(n) => format!("size={n}"),
        ValueSpec::Bytes(b) => match std::str::from_utf8(b) {
            Ok(s) if is_token(s) && !s.starts_with("0x") => format!("value={s}"),
            _ => format!("value=0x{}", hex::encode(b)),
        },
    }
}

fn parse_nodes(s: &str) -> Result<Vec<NodeId>, String> {
    s.split(',').map(|p| p.parse().map(NodeId).map_err(|_| format!("bad node list `{s}`"))).collect()
}

struct Fields {
    line: usize,
    pairs: BTreeMap<String, String>,
}

impl Fields {
    fn new(line: usize, toks: &[&str]) -> Result<Self, ScenarioError> {
        let mut pairs = BTreeMap::new();
        for tok in toks {
            let (k, v) = tok.split_once('=').ok_or_else(|| perr(line, format!("expected key=value, got `{tok}`")))?;
            if pairs.insert(k.to_owned(), v.to_owned()).is_some() {
                return Err(perr(line, format!("duplicate key `{k}`")));
            }
        }
        Ok(Fields { line, pairs })
    }

    fn take_str(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key)
    }

    fn req_str(&mut self, key: &str) -> Result<String, ScenarioError> {
        self.take_str(key).ok_or_else(|| perr(self.line, format!("missing `{key}`")))
    }

    fn conv<T>(&self, key: &str, v: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ScenarioError> {
        f(v).map_err(|e| perr(self.line, format!("`{key}`: {e}")))
    }

    fn opt<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ScenarioError> {
        match self.take_str(key) {
            Some(v) => self.conv(key, &v, f).map(Some),
            None => Ok(None),
        }
    }

    fn req<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T, String>) -> Result<T, ScenarioError> {
        let v = self.req_str(key)?;
        self.conv(key, &v, f)
    }

    fn finish(self) -> Result<(), ScenarioError> {
        match self.pairs.keys().next() {
            Some(k) => Err(perr(self.line, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn perr(line: usize, msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Parse { line, msg: msg.into() }
}

fn num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("bad number `{s}`"))
}

fn parsed<T: FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn token(s: &str) -> Result<String, String> {
    if is_token(s) && s.len() <= crate::store::MAX_KEY_LEN {
        Ok(s.to_owned())
    } else {
        Err(format!("`{s}` is not a valid name"))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        let mut saw_sim = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = content.split_whitespace().collect();
            let Some((&directive, rest)) = toks.split_first() else { continue };
            let mut f = Fields::new(line, rest)?;
            match directive {
                "sim" => {
                    if saw_sim {
                        return Err(perr(line, "second `sim` directive"));
                    }
                    saw_sim = true;
                    let d = SimConfig::default();
                    sc.sim = SimConfig {
                        seed: f.opt("seed", num)?.unwrap_or(d.seed),
                        duration: f.opt("duration", parse_duration)?.unwrap_or(d.duration),
                        gc_interval: f.opt("gc_interval", parse_duration)?.unwrap_or(d.gc_interval),
                        sample_interval: f.opt("sample_interval", parse_duration)?.unwrap_or(d.sample_interval),
                        write_timeout: f.opt("write_timeout", parse_duration)?.unwrap_or(d.write_timeout),
                        copy_timeout: f.opt("copy_timeout", parse_duration)?.unwrap_or(d.copy_timeout),
                        link_latency_us: f.opt("link_latency_us", num)?.unwrap_or(d.link_latency_us),
                        link_jitter_us: f.opt("link_jitter_us", num)?.unwrap_or(d.link_jitter_us),
                    };
                }
                "node" => sc.nodes.push(NodeSpec {
                    id: NodeId(f.req("id", num)?),
                    capacity: f.req("capacity", num)?,
                    x: f.opt("x", num)?.unwrap_or(0),
                    y: f.opt("y", num)?.unwrap_or(0),
                    load: f.opt("load", num)?.unwrap_or(0),
                }),
                "link" => sc.links.push(LinkSpec {
                    a: NodeId(f.req("a", num)?),
                    b: NodeId(f.req("b", num)?),
                    latency_us: f.req("latency_us", num)?,
                    jitter_us: f.opt("jitter_us", num)?.unwrap_or(0),
                }),
                "appcode" => {
                    let name = f.req("name", token)?;
                    let source = match (f.take_str("builtin"), f.take_str("file")) {
                        (Some(b), None) => CodeSource::Builtin(b),
                        (None, Some(p)) => CodeSource::File(PathBuf::from(p)),
                        _ => return Err(perr(line, "appcode needs exactly one of `builtin` or `file`")),
                    };
                    let program = f.opt("program", token)?;
                    sc.appcode.push(AppcodeSpec { name, source, program });
                }
                "app" => sc.apps.push(AppSpec {
                    id: AppId(f.req("id", num)?),
                    origin: NodeId(f.req("origin", num)?),
                    replicas: f.opt("replicas", num)?.unwrap_or(1),
                    consistency: f.opt("consistency", parsed)?.unwrap_or_default(),
                    cw: f.opt("cw", token)?,
                    cr: f.opt("cr", token)?,
                    placement: f.opt("placement", token)?,
                    lb: f.opt("lb", token)?,
                    migration: f.opt("migration", token)?,
                    gc: f.opt("gc", token)?,
                    compute: f
                        .opt("compute", |s| s.split(',').map(token).collect::<Result<Vec<_>, _>>())?
                        .unwrap_or_default(),
                    lifetime: f.opt("lifetime", parse_lifetime)?.unwrap_or_default(),
                }),
                "client" => {
                    let id = ClientId(f.req("id", num)?);
                    sc.clients.push(ClientSpec {
                        id,
                        origin: NodeId(f.req("origin", num)?),
                        session: f.opt("session", num)?.unwrap_or(id.0),
                        latency_us: f.opt("latency_us", num)?.unwrap_or(0),
                        skew_us: f.opt("skew_us", num)?.unwrap_or(0),
                    });
                }
                "object_policy" => sc.policies.push(ObjectPolicySpec {
                    app: AppId(f.req("app", num)?),
                    prefix: f.req("prefix", token)?,
                    lifetime: f.req("lifetime", parse_lifetime)?,
                }),
                "trigger" => {
                    let name = f.req("name", token)?;
                    let source = match f.req_str("source")?.as_str() {
                        "threshold" => TriggerSourceDecl::Threshold {
                            metric: f.req("metric", parsed)?,
                            cmp: f.req("cmp", parsed)?,
                            value: f.req("value", num)?,
                        },
                        "appcode" => TriggerSourceDecl::Appcode(f.req("appcode", token)?),
                        "manual" => TriggerSourceDecl::Manual,
                        other => return Err(perr(line, format!("unknown trigger source `{other}`"))),
                    };
                    let scope = match f.take_str("scope").as_deref() {
                        None | Some("all") => ScopeDecl::All,
                        Some("app") => ScopeDecl::App,
                        Some(list) => ScopeDecl::Nodes(f.conv("scope", list, parse_nodes)?),
                    };
                    sc.triggers.push(TriggerDecl {
                        name,
                        app: f.opt("app", num)?.map(AppId),
                        source,
                        sustain: f.opt("sustain", num)?.unwrap_or(1),
                        attach: f.opt("attach", parsed)?.unwrap_or_default(),
                        scope,
                        action: f.opt("action", parsed)?.unwrap_or_default(),
                    });
                }
                "op" => {
                    let t = f.req("t", parse_duration)?;
                    let client = f.opt("client", num)?.map(ClientId);
                    let kind = match f.req_str("kind")?.as_str() {
                        "put" => {
                            let app = AppId(f.req("app", num)?);
                            let key = f.req("key", token)?;
                            let value = match (f.take_str("value"), f.opt("size", num)?) {
                                (Some(v), None) => f.conv("value", &v, parse_value)?,
                                (None, Some(n)) => ValueSpec::Fill(n),
                                _ => return Err(perr(line, "put needs exactly one of `value` or `size`")),
                            };
                            OpKindSpec::Put { app, key, value, lifetime: f.opt("lifetime", parse_lifetime)? }
                        }
                        "get" => OpKindSpec::Get { app: AppId(f.req("app", num)?), key: f.req("key", token)? },
                        "delete" => OpKindSpec::Delete { app: AppId(f.req("app", num)?), key: f.req("key", token)? },
                        "compute" => OpKindSpec::Compute { app: AppId(f.req("app", num)?), key: f.req("key", token)? },
                        "move" => OpKindSpec::Move {
                            app: AppId(f.req("app", num)?),
                            x: f.req("x", num)?,
                            y: f.req("y", num)?,
                            origin: f.opt("origin", num)?.map(NodeId),
                        },
                        "fire" => OpKindSpec::Fire {
                            trigger: f.req("trigger", token)?,
                            node: f.opt("node", num)?.map(NodeId),
                        },
                        other => return Err(perr(line, format!("unknown op kind `{other}`"))),
                    };
                    sc.ops.push(OpSpec { t, client, kind });
                }
                "fault" => {
                    let t = f.req("t", parse_duration)?;
                    let kind = match f.req_str("kind")?.as_str() {
                        "partition" => FaultKindSpec::Partition {
                            a: NodeId(f.req("a", num)?),
                            b: NodeId(f.req("b", num)?),
                            duration: f.req("duration", parse_duration)?,
                        },
                        "crash" => FaultKindSpec::Crash(NodeId(f.req("node", num)?)),
                        "restart" => FaultKindSpec::Restart(NodeId(f.req("node", num)?)),
                        "wear" => {
                            FaultKindSpec::Wear { node: NodeId(f.req("node", num)?), milli: f.req("milli", num)? }
                        }
                        "eol" => FaultKindSpec::Eol(NodeId(f.req("node", num)?)),
                        other => return Err(perr(line, format!("unknown fault kind `{other}`"))),
                    };
                    sc.faults.push(FaultSpec { t, kind });
                }
                other => return Err(perr(line, format!("unknown directive `{other}`"))),
            }
            f.finish()?;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn app(&self, id: AppId) -> Option<&AppSpec> {
        self.apps.iter().find(|a| a.id == id)
    }

    pub fn trigger_index(&self, name: &str) -> Option<usize> {
        self.triggers.iter().position(|t| t.name == name)
    }

    /// Checks ids are unique and every cross-reference resolves.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let mut node_ids = BTreeSet::new();
        for n in &self.nodes {
            if !node_ids.insert(n.id) {
                return bad(format!("duplicate node {}", n.id));
            }
        }
        if node_ids.is_empty() {
            return bad("no nodes".into());
        }
        let node = |n: &NodeId| node_ids.contains(n);
        for l in &self.links {
            if !node(&l.a) || !node(&l.b) || l.a == l.b {
                return bad(format!("link {}-{} must join two distinct known nodes", l.a, l.b));
            }
        }
        let mut code = BTreeSet::new();
        for c in &self.appcode {
            if !code.insert(c.name.as_str()) {
                return bad(format!("duplicate appcode `{}`", c.name));
            }
        }
        let known_code = |name: &Option<String>| name.as_ref().is_none_or(|n| code.contains(n.as_str()));
        let mut app_ids = BTreeSet::new();
        for a in &self.apps {
            if !app_ids.insert(a.id) {
                return bad(format!("duplicate app {}", a.id));
            }
            if !node(&a.origin) {
                return bad(format!("app {} origin {} is not a node", a.id, a.origin));
            }
            for r in [&a.cw, &a.cr, &a.placement, &a.lb, &a.migration, &a.gc] {
                if !known_code(r) {
                    return bad(format!("app {} refers to unknown appcode `{}`", a.id, r.as_deref().unwrap_or("")));
                }
            }
            if a.compute.iter().any(|c| !code.contains(c.as_str())) {
                return bad(format!("app {} compute stage refers to unknown appcode", a.id));
            }
            if (a.cw.is_some() || a.cr.is_some()) && a.consistency != Model::Custom {
                return bad(format!("app {}: cw/cr need consistency=custom", a.id));
            }
        }
        let mut client_ids = BTreeSet::new();
        for c in &self.clients {
            if !client_ids.insert(c.id) {
                return bad(format!("duplicate client {}", c.id));
            }
            if !node(&c.origin) {
                return bad(format!("client {} origin {} is not a node", c.id, c.origin));
            }
            if c.session == 0 {
                return bad(format!("client {} session must be non-zero", c.id));
            }
        }
        let mut trigger_names = BTreeSet::new();
        for t in &self.triggers {
            if !trigger_names.insert(t.name.as_str()) {
                return bad(format!("duplicate trigger `{}`", t.name));
            }
            if t.sustain == 0 {
                return bad(format!("trigger `{}` sustain must be at least 1", t.name));
            }
            if let Some(app) = t.app {
                if !app_ids.contains(&app) {
                    return bad(format!("trigger `{}` refers to unknown app {app}", t.name));
                }
            }
            if let TriggerSourceDecl::Appcode(c) = &t.source {
                if !code.contains(c.as_str()) {
                    return bad(format!("trigger `{}` refers to unknown appcode `{c}`", t.name));
                }
            }
            if t.scope == ScopeDecl::App && t.app.is_none() {
                return bad(format!("trigger `{}` has scope=app but no app", t.name));
            }
            if let ScopeDecl::Nodes(ns) = &t.scope {
                if !ns.iter().all(node) {
                    return bad(format!("trigger `{}` scope names an unknown node", t.name));
                }
            }
            if matches!(t.action, TriggerAction::Rebalance | TriggerAction::Migrate) && t.app.is_none() {
                return bad(format!("trigger `{}` needs an app for its action", t.name));
            }
        }
        let lifetime_ok = |p: &LifetimePolicy| match p.kind {
            LifetimeKind::OnEvent(id) => id.0 >= 1 && (id.0 as usize) <= self.triggers.len(),
            _ => true,
        };
        for a in &self.apps {
            if !lifetime_ok(&a.lifetime) {
                return bad(format!("app {} lifetime names an unknown trigger", a.id));
            }
        }
        for p in &self.policies {
            if !app_ids.contains(&p.app) || !lifetime_ok(&p.lifetime) {
                return bad(format!("object_policy for app {} does not resolve", p.app));
            }
        }
        for (i, op) in self.ops.iter().enumerate() {
            let n = i + 1;
            if op.t > self.sim.duration {
                return bad(format!("op {n} at {} is after the end of the run", op.t));
            }
            let needs_client = !matches!(op.kind, OpKindSpec::Fire { .. });
            match op.client {
                Some(c) if !client_ids.contains(&c) => return bad(format!("op {n} refers to unknown client {c}")),
                None if needs_client => return bad(format!("op {n} needs a client")),
                _ => {}
            }
            match &op.kind {
                OpKindSpec::Put { app, lifetime, .. } => {
                    if !app_ids.contains(app) || !lifetime.as_ref().is_none_or(lifetime_ok) {
                        return bad(format!("op {n} does not resolve"));
                    }
                }
                OpKindSpec::Get { app, .. }
                | OpKindSpec::Delete { app, .. }
                | OpKindSpec::Compute { app, .. }
                | OpKindSpec::Move { app, .. } => {
                    if !app_ids.contains(app) {
                        return bad(format!("op {n} refers to unknown app {app}"));
                    }
                    if let OpKindSpec::Move { origin: Some(o), .. } = &op.kind {
                        if !node(o) {
                            return bad(format!("op {n} moves to unknown node {o}"));
                        }
                    }
                }
                OpKindSpec::Fire { trigger, node: at } => {
                    if !trigger_names.contains(trigger.as_str()) || !at.as_ref().is_none_or(node) {
                        return bad(format!("op {n} fires unknown trigger `{trigger}`"));
                    }
                }
            }
        }
        for f in &self.faults {
            if f.t > self.sim.duration {
                return bad(format!("fault at {} is after the end of the run", f.t));
            }
            let ok = match &f.kind {
                FaultKindSpec::Partition { a, b, .. } => node(a) && node(b) && a != b,
                FaultKindSpec::Crash(n) | FaultKindSpec::Restart(n) | FaultKindSpec::Eol(n) => node(n),
                FaultKindSpec::Wear { node: n, milli } => node(n) && *milli <= 1000,
            };
            if !ok {
                return bad(format!("fault at {} refers to unknown entities", f.t));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_owned(), source })?;
        Scenario::parse(&text)
    }

    /// Assembles and verifies every named appcode; file paths resolve against
    /// `base_dir`.
    pub fn load_programs(&self, base_dir: &Path) -> Result<BTreeMap<String, VerifiedProgram>, ScenarioError> {
        let mut out = BTreeMap::new();
        for spec in &self.appcode {
            let lerr = |source| ScenarioError::Load { name: spec.name.clone(), source };
            let text: String = match &spec.source {
                CodeSource::Builtin(b) => builtin_source(b)
                    .ok_or_else(|| ScenarioError::Appcode {
                        name: spec.name.clone(),
                        msg: format!("no builtin `{b}`"),
                    })?
                    .to_owned(),
                CodeSource::File(p) => {
                    let path = base_dir.join(p);
                    std::fs::read_to_string(&path).map_err(|source| ScenarioError::Io { path, source })?
                }
            };
            let progs = load_all(&text).map_err(lerr)?;
            let vp = match &spec.program {
                Some(name) => progs.into_iter().find(|p| p.name() == name).ok_or_else(|| ScenarioError::Appcode {
                    name: spec.name.clone(),
                    msg: format!("no program `{name}` in source"),
                })?,
                None if progs.len() == 1 => progs.into_iter().next().expect("one program"),
                None => {
                    return Err(ScenarioError::Appcode {
                        name: spec.name.clone(),
                        msg: "source has several programs; pick one with `program=`".into(),
                    })
                }
            };
            out.insert(spec.name.clone(), vp);
        }
        self.check_hooks(&out)?;
        Ok(out)
    }

    fn check_hooks(&self, progs: &BTreeMap<String, VerifiedProgram>) -> Result<(), ScenarioError> {
        let expect = |name: &Option<String>, hook: HookKind| -> Result<(), ScenarioError> {
            if let Some(n) = name {
                let found = progs[n].hook_kind();
                if found != hook {
                    return Err(ScenarioError::Appcode {
                        name: n.clone(),
                        msg: format!("hook {found} used where {hook} is required"),
                    });
                }
            }
            Ok(())
        };
        for a in &self.apps {
            expect(&a.cw, HookKind::ConsistencyWrite)?;
            expect(&a.cr, HookKind::ConsistencyRead)?;
            expect(&a.placement, HookKind::ReplicaPlace)?;
            expect(&a.lb, HookKind::LoadBalance)?;
            expect(&a.migration, HookKind::Migration)?;
            expect(&a.gc, HookKind::GcScan)?;
            for c in &a.compute {
                expect(&Some(c.clone()), HookKind::Compute)?;
            }
        }
        for t in &self.triggers {
            if let TriggerSourceDecl::Appcode(c) = &t.source {
                expect(&Some(c.clone()), HookKind::Trigger)?;
            }
        }
        Ok(())
    }
}

/// Source text for `builtin=<name>`.
pub fn builtin_source(name: &str) -> Option<&'static str> {
    match name {
        "lww" => Some(LWW_SOURCE),
        "fww" => Some(FWW_SOURCE),
        "rmw" => Some(RMW_SOURCE),
        _ => library::source(name),
    }
}

/// Verifies a builtin by name; test and tooling convenience.
pub fn builtin_program(name: &str) -> Option<VerifiedProgram> {
    load(builtin_source(name)?).ok()
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.sim;
        writeln!(
            f,
            "sim seed={} duration={} gc_interval={} sample_interval={} write_timeout={} copy_timeout={} link_latency_us={} link_jitter_us={}",
            s.seed,
            format_duration(s.duration),
            format_duration(s.gc_interval),
            format_duration(s.sample_interval),
            format_duration(s.write_timeout),
            format_duration(s.copy_timeout),
            s.link_latency_us,
            s.link_jitter_us
        )?;
        for n in &self.nodes {
            writeln!(f, "node id={} capacity={} x={} y={} load={}", n.id, n.capacity, n.x, n.y, n.load)?;
        }
        for l in &self.links {
            writeln!(f, "link a={} b={} latency_us={} jitter_us={}", l.a, l.b, l.latency_us, l.jitter_us)?;
        }
        for c in &self.appcode {
            let mut line = format!("appcode name={}", c.name);
            match &c.source {
                CodeSource::Builtin(b) => write!(line, " builtin={b}")?,
                CodeSource::File(p) => write!(line, " file={}", p.display())?,
            }
            if let Some(p) = &c.program {
                write!(line, " program={p}")?;
            }
            writeln!(f, "{line}")?;
        }
        for a in &self.apps {
            let mut line = format!(
                "app id={} origin={} replicas={} consistency={}",
                a.id,
                a.origin,
                a.replicas,
                a.consistency.as_str()
            );
            for (k, v) in [
                ("cw", &a.cw),
                ("cr", &a.cr),
                ("placement", &a.placement),
                ("lb", &a.lb),
                ("migration", &a.migration),
                ("gc", &a.gc),
            ] {
                if let Some(v) = v {
                    write!(line, " {k}={v}")?;
                }
            }
            if !a.compute.is_empty() {
                write!(line, " compute={}", a.compute.join(","))?;
            }
            write!(line, " lifetime={}", format_lifetime(&a.lifetime))?;
            writeln!(f, "{line}")?;
        }
        for c in &self.clients {
            writeln!(
                f,
                "client id={} origin={} session={} latency_us={} skew_us={}",
                c.id, c.origin, c.session, c.latency_us, c.skew_us
            )?;
        }
        for p in &self.policies {
            writeln!(f, "object_policy app={} prefix={} lifetime={}", p.app, p.prefix, format_lifetime(&p.lifetime))?;
        }
        for t in &self.triggers {
            let mut line = format!("trigger name={}", t.name);
            if let Some(a) = t.app {
                write!(line, " app={a}")?;
            }
            match &t.source {
                TriggerSourceDecl::Threshold { metric, cmp, value } => {
                    write!(line, " source=threshold metric={metric} cmp={} value={value}", cmp.as_str())?
                }
                TriggerSourceDecl::Appcode(c) => write!(line, " source=appcode appcode={c}")?,
                TriggerSourceDecl::Manual => write!(line, " source=manual")?,
            }
            let scope = match &t.scope {
                ScopeDecl::All => "all".to_owned(),
                ScopeDecl::App => "app".to_owned(),
                ScopeDecl::Nodes(ns) => crate::chain::join_nodes(ns),
            };
            write!(
                line,
                " sustain={} attach={} scope={scope} action={}",
                t.sustain,
                t.attach.as_str(),
                t.action.as_str()
            )?;
            writeln!(f, "{line}")?;
        }
        for op in &self.ops {
            let mut line = format!("op t={}", format_duration(op.t));
            if let Some(c) = op.client {
                write!(line, " client={c}")?;
            }
            match &op.kind {
                OpKindSpec::Put { app, key, value, lifetime } => {
                    write!(line, " kind=put app={app} key={key} {}", format_value(value))?;
                    if let Some(l) = lifetime {
                        write!(line, " lifetime={}", format_lifetime(l))?;
                    }
                }
                OpKindSpec::Get { app, key } => write!(line, " kind=get app={app} key={key}")?,
                OpKindSpec::Delete { app, key } => write!(line, " kind=delete app={app} key={key}")?,
                OpKindSpec::Compute { app, key } => write!(line, " kind=compute app={app} key={key}")?,
                OpKindSpec::Move { app, x, y, origin } => {
                    write!(line, " kind=move app={app} x={x} y={y}")?;
                    if let Some(o) = origin {
                        write!(line, " origin={o}")?;
                    }
                }
                OpKindSpec::Fire { trigger, node } => {
                    write!(line, " kind=fire trigger={trigger}")?;
                    if let Some(n) = node {
                        write!(line, " node={n}")?;
                    }
                }
            }
            writeln!(f, "{line}")?;
        }
        for fault in &self.faults {
            let t = format_duration(fault.t);
            match &fault.kind {
                FaultKindSpec::Partition { a, b, duration } => {
                    writeln!(f, "fault t={t} kind=partition a={a} b={b} duration={}", format_duration(*duration))?
                }
                FaultKindSpec::Crash(n) => writeln!(f, "fault t={t} kind=crash node={n}")?,
                FaultKindSpec::Restart(n) => writeln!(f, "fault t={t} kind=restart node={n}")?,
                FaultKindSpec::Wear { node, milli } => writeln!(f, "fault t={t} kind=wear node={node} milli={milli}")?,
                FaultKindSpec::Eol(n) => writeln!(f, "fault t={t} kind=eol node={n}")?,
            }
        }
        Ok(())
    }
}
