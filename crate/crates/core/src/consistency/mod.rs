//! Admission control: consistency appcode decides whether each read or write
//! proceeds, is refused, or waits.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::appcode::{field, load, load_all, run, HelperEnv, HookKind, ScratchMap, TrapCode, VerifiedProgram};
use crate::ids::{key_hash, NodeId, SessionId, SimTime, NS_PER_MS};

pub const LWW_SOURCE: &str = include_str!("assets/lww.gasm");
pub const FWW_SOURCE: &str = include_str!("assets/fww.gasm");
pub const RMW_SOURCE: &str = include_str!("assets/rmw.gasm");

/// Built-in programs as (file name, source).
pub const BUILTIN_FILES: [(&str, &str); 3] =
    [("lww.gasm", LWW_SOURCE), ("fww.gasm", FWW_SOURCE), ("rmw.gasm", RMW_SOURCE)];

pub const HOLD_RETRIES: u8 = 3;
pub const HOLD_RECHECK_NS: u64 = 100 * NS_PER_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdmissionAction {
    Accept,
    Reject,
    Hold,
}

impl AdmissionAction {
    pub fn as_str(self) -> &'static str {
        match self {
            AdmissionAction::Accept => "accept",
            AdmissionAction::Reject => "reject",
            AdmissionAction::Hold => "hold",
        }
    }
}

impl fmt::Display for AdmissionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Read => "read",
            OpKind::Write => "write",
        }
    }

    pub fn hook(self) -> HookKind {
        match self {
            OpKind::Read => HookKind::ConsistencyRead,
            OpKind::Write => HookKind::ConsistencyWrite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdmissionContext {
    pub key: String,
    pub state: Option<Vec<u8>>,
    pub ts_ns: SimTime,
    pub writer: NodeId,
    pub session: SessionId,
    pub applied_version: u64,
    pub op: OpKind,
    pub value_len: u64,
    /// Node evaluating the admission.
    pub node: NodeId,
}

impl AdmissionContext {
    pub fn ctx_fields(&self) -> BTreeMap<u32, u64> {
        BTreeMap::from([
            (field::OP_KIND, u64::from(self.op == OpKind::Write)),
            (field::TS_NS, self.ts_ns),
            (field::WRITER_NODE, self.writer.0),
            (field::SESSION, self.session.0),
            (field::APPLIED_VERSION, self.applied_version),
            (field::STATE_LEN, self.state.as_ref().map_or(0, |s| s.len() as u64)),
            (field::STATE_PRESENT, u64::from(self.state.is_some())),
            (field::VALUE_LEN, self.value_len),
            (field::NODE_ID, self.node.0),
            (field::KEY_HASH, key_hash(&self.key)),
        ])
    }
}

/// Why an admission was forced to Reject.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmitWarning {
    Trap(TrapCode),
    /// r0 outside {0, 1, 2}.
    BadVerdict(u64),
}

impl fmt::Display for AdmitWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdmitWarning::Trap(code) => write!(f, "trap:{}", code.as_str()),
            AdmitWarning::BadVerdict(v) => write!(f, "verdict:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    pub action: AdmissionAction,
    /// State to store with the object; only ever set on Accept, and only
    /// when the program wrote one.
    pub new_state: Option<Vec<u8>>,
    pub warning: Option<AdmitWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("program hook {found} does not match {expected}")]
pub struct HookMismatch {
    pub expected: HookKind,
    pub found: HookKind,
}

/// Runs the consistency program `ac` for one operation.
pub fn admit(
    ctx: &AdmissionContext,
    ac: &VerifiedProgram,
    map: &mut ScratchMap,
    now: SimTime,
) -> Result<Admission, HookMismatch> {
    if ac.hook_kind() != ctx.op.hook() {
        return Err(HookMismatch { expected: ctx.op.hook(), found: ac.hook_kind() });
    }
    let mut env = HelperEnv {
        ctx: ctx.ctx_fields(),
        state: ctx.state.clone(),
        map: std::mem::take(map),
        now_ns: now,
        ..Default::default()
    };
    let res = run(ac, &mut env);
    *map = env.map;
    let reject = |w| Admission { action: AdmissionAction::Reject, new_state: None, warning: Some(w) };
    Ok(match res.outcome {
        crate::appcode::Outcome::Trap { code, .. } => reject(AdmitWarning::Trap(code)),
        crate::appcode::Outcome::Return(0) => {
            Admission { action: AdmissionAction::Accept, new_state: res.new_state, warning: None }
        }
        crate::appcode::Outcome::Return(1) => {
            Admission { action: AdmissionAction::Reject, new_state: None, warning: None }
        }
        crate::appcode::Outcome::Return(2) => {
            Admission { action: AdmissionAction::Hold, new_state: None, warning: None }
        }
        crate::appcode::Outcome::Return(v) => reject(AdmitWarning::BadVerdict(v)),
    })
}

fn builtin(src: &str) -> VerifiedProgram {
    load(src).expect("built-in appcode verifies")
}

pub fn builtin_lww() -> VerifiedProgram {
    builtin(LWW_SOURCE)
}

pub fn builtin_fww() -> VerifiedProgram {
    builtin(FWW_SOURCE)
}

/// Read-my-writes needs both hooks: returns (write program, read program).
pub fn builtin_rmw() -> (VerifiedProgram, VerifiedProgram) {
    let mut both = load_all(RMW_SOURCE).expect("built-in appcode verifies");
    let read = both.pop().expect("two programs");
    let write = both.pop().expect("two programs");
    (write, read)
}

/// The consistency models a scenario can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Model {
    #[default]
    None,
    Lww,
    Fww,
    Rmw,
    /// Programs supplied by the scenario.
    Custom,
}

impl Model {
    pub fn as_str(self) -> &'static str {
        match self {
            Model::None => "none",
            Model::Lww => "lww",
            Model::Fww => "fww",
            Model::Rmw => "rmw",
            Model::Custom => "custom",
        }
    }

    /// Write and read programs for built-in models.
    pub fn programs(self) -> (Option<VerifiedProgram>, Option<VerifiedProgram>) {
        match self {
            Model::None | Model::Custom => (None, None),
            Model::Lww => (Some(builtin_lww()), None),
            Model::Fww => (Some(builtin_fww()), None),
            Model::Rmw => {
                let (w, r) = builtin_rmw();
                (Some(w), Some(r))
            }
        }
    }
}

impl std::str::FromStr for Model {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "none" => Model::None,
            "lww" => Model::Lww,
            "fww" => Model::Fww,
            "rmw" => Model::Rmw,
            "custom" => Model::Custom,
            _ => return Err(format!("unknown consistency model `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOp<T> {
    pub op: T,
    pub retries_left: u8,
    pub next_eval: SimTime,
}

/// How a held op left the queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Release {
    Accept,
    Reject,
    /// Still held after its last retry.
    Exhausted,
}

/// What prompted a re-evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recheck {
    /// A write to the key was applied: every held op is re-evaluated.
    WriteApplied,
    /// Timer: only ops whose recheck time has come.
    Timer,
}

/// Per-key FIFO queues of held operations.
#[derive(Debug, Clone)]
pub struct HoldQueue<T> {
    queues: BTreeMap<String, VecDeque<HeldOp<T>>>,
}

impl<T> Default for HoldQueue<T> {
    fn default() -> Self {
        HoldQueue { queues: BTreeMap::new() }
    }
}

impl<T> HoldQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Queues `op`; returns when it is next due for re-evaluation.
    pub fn hold(&mut self, key: &str, op: T, now: SimTime) -> SimTime {
        let next_eval = now + HOLD_RECHECK_NS;
        self.queues.entry(key.to_owned()).or_default().push_back(HeldOp { op, retries_left: HOLD_RETRIES, next_eval });
        next_eval
    }

    pub fn len(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.queues.keys().map(String::as_str)
    }

    pub fn held(&self, key: &str) -> impl Iterator<Item = &HeldOp<T>> {
        self.queues.get(key).into_iter().flatten()
    }

    /// Appends every op of `other` behind this queue's ops for the same key.
    pub fn absorb(&mut self, other: HoldQueue<T>) {
        for (k, q) in other.queues {
            self.queues.entry(k).or_default().extend(q);
        }
    }

    /// Removes and returns every queued op in key order, then FIFO.
    pub fn drain_all(&mut self) -> Vec<(String, HeldOp<T>)> {
        std::mem::take(&mut self.queues)
            .into_iter()
            .flat_map(|(k, q)| q.into_iter().map(move |h| (k.clone(), h)))
            .collect()
    }

    /// Re-admits due ops for `key` in enqueue order. Each re-evaluation that
    /// holds again spends a retry; the op is rejected once none remain.
    pub fn resolve_holds(
        &mut self,
        key: &str,
        now: SimTime,
        why: Recheck,
        mut readmit: impl FnMut(&T) -> AdmissionAction,
    ) -> Vec<(T, Release)> {
        let Some(queue) = self.queues.remove(key) else { return Vec::new() };
        let mut kept = VecDeque::new();
        let mut released = Vec::new();
        for mut h in queue {
            if why == Recheck::Timer && h.next_eval > now {
                kept.push_back(h);
                continue;
            }
            match readmit(&h.op) {
                AdmissionAction::Accept => released.push((h.op, Release::Accept)),
                AdmissionAction::Reject => released.push((h.op, Release::Reject)),
                AdmissionAction::Hold => {
                    h.retries_left -= 1;
                    if h.retries_left == 0 {
                        released.push((h.op, Release::Exhausted));
                    } else {
                        h.next_eval = now + HOLD_RECHECK_NS;
                        kept.push_back(h);
                    }
                }
            }
        }
        if !kept.is_empty() {
            self.queues.insert(key.to_owned(), kept);
        }
        released
    }
}
