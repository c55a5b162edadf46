//! Per-node object storage: versioned records, lifetime policies, garbage
//! collection and erasure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::appcode::{field, run, HelperEnv, ScratchMap, VerifiedProgram, STATE_CAP};
use crate::ids::{key_hash, key_prefix8, AppId, NodeId, SimTime, TriggerId};

/// Fixed per-object accounting overhead in bytes.
pub const OBJECT_OVERHEAD: u64 = 64;
pub const MAX_KEY_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("capacity exceeded: need {needed} bytes, {free} free")]
    CapacityExceeded { needed: u64, free: u64 },
    #[error("node has been erased")]
    NodeErased,
    #[error("object not found")]
    NotFound,
    #[error("key longer than {MAX_KEY_LEN} bytes")]
    KeyTooLong,
    #[error("consistency state longer than {STATE_CAP} bytes")]
    StateTooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Disposal {
    Erase,
    Backup,
}

impl Disposal {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposal::Erase => "erase",
            Disposal::Backup => "backup",
        }
    }
}

impl FromStr for Disposal {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "erase" => Ok(Disposal::Erase),
            "backup" => Ok(Disposal::Backup),
            _ => Err(format!("unknown disposal `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LifetimeKind {
    Manual,
    /// Remove once `created_at + ttl` has passed.
    Ttl(u64),
    ReadOnce,
    WriteOnce,
    OnEvent(TriggerId),
}

impl LifetimeKind {
    fn code(self) -> u64 {
        match self {
            LifetimeKind::Manual => 0,
            LifetimeKind::Ttl(_) => 1,
            LifetimeKind::ReadOnce => 2,
            LifetimeKind::WriteOnce => 3,
            LifetimeKind::OnEvent(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LifetimePolicy {
    pub kind: LifetimeKind,
    pub disposal: Disposal,
}

impl LifetimePolicy {
    pub const MANUAL: LifetimePolicy = LifetimePolicy { kind: LifetimeKind::Manual, disposal: Disposal::Erase };

    pub fn new(kind: LifetimeKind, disposal: Disposal) -> Self {
        assert!(!matches!(kind, LifetimeKind::Ttl(0)), "ttl duration must be positive");
        LifetimePolicy { kind, disposal }
    }

    pub fn ttl(ns: u64) -> Self {
        LifetimePolicy::new(LifetimeKind::Ttl(ns), Disposal::Erase)
    }
}

impl Default for LifetimePolicy {
    fn default() -> Self {
        LifetimePolicy::MANUAL
    }
}

/// `manual`, `ttl:<ns>`, `read_once`, `write_once` or `on_event:<trigger>`,
/// followed by `/erase` or `/backup`.
impl fmt::Display for LifetimePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LifetimeKind::Manual => f.write_str("manual")?,
            LifetimeKind::Ttl(ns) => write!(f, "ttl:{ns}")?,
            LifetimeKind::ReadOnce => f.write_str("read_once")?,
            LifetimeKind::WriteOnce => f.write_str("write_once")?,
            LifetimeKind::OnEvent(t) => write!(f, "on_event:{t}")?,
        }
        write!(f, "/{}", self.disposal.as_str())
    }
}

impl FromStr for LifetimePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, disposal) = match s.split_once('/') {
            Some((k, d)) => (k, d.parse()?),
            None => (s, Disposal::Erase),
        };
        let kind = match kind.split_once(':') {
            None if kind == "manual" => LifetimeKind::Manual,
            None if kind == "read_once" => LifetimeKind::ReadOnce,
            None if kind == "write_once" => LifetimeKind::WriteOnce,
            Some(("ttl", v)) => {
                let ns: u64 = v.parse().map_err(|_| format!("bad ttl `{v}`"))?;
                if ns == 0 {
                    return Err("ttl duration must be positive".into());
                }
                LifetimeKind::Ttl(ns)
            }
            Some(("on_event", v)) => {
                LifetimeKind::OnEvent(TriggerId(v.parse().map_err(|_| format!("bad trigger `{v}`"))?))
            }
            _ => return Err(format!("unknown lifetime `{kind}`")),
        };
        Ok(LifetimePolicy { kind, disposal })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectKey {
    pub app: AppId,
    pub key: String,
}

impl ObjectKey {
    pub fn new(app: AppId, key: impl Into<String>) -> Self {
        ObjectKey { app, key: key.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectRecord {
    pub key: String,
    pub app_id: AppId,
    pub value: Vec<u8>,
    pub version: u64,
    pub created_at: SimTime,
    pub last_read_at: Option<SimTime>,
    pub last_written_at: SimTime,
    pub consistency_state: Option<Vec<u8>>,
    pub lifetime: LifetimePolicy,
    /// Set once a ReadOnce / WriteOnce / OnEvent condition has been met.
    pub due_at: Option<SimTime>,
}

impl ObjectRecord {
    fn footprint(&self) -> u64 {
        self.value.len() as u64 + OBJECT_OVERHEAD
    }

    /// Earliest time the declarative policy allows removal, if known.
    pub fn removal_time(&self) -> Option<SimTime> {
        let ttl = match self.lifetime.kind {
            LifetimeKind::Ttl(ns) => Some(self.created_at.saturating_add(ns)),
            _ => None,
        };
        match (ttl, self.due_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn expired_at(&self, now: SimTime) -> bool {
        self.removal_time().is_some_and(|t| t <= now)
    }
}

/// Metadata accompanying a write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteMeta {
    pub now: SimTime,
    /// Creation time to record when the write creates the object; replicas
    /// receive the head's value so all copies agree.
    pub created_at: Option<SimTime>,
    pub state: Option<Vec<u8>>,
    pub lifetime: LifetimePolicy,
}

impl WriteMeta {
    pub fn at(now: SimTime) -> Self {
        WriteMeta { now, created_at: None, state: None, lifetime: LifetimePolicy::MANUAL }
    }
}

/// Outcome of garbage collecting one object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GcRemoval {
    pub key: ObjectKey,
    pub version: u64,
    pub size: u64,
    pub disposal: Disposal,
    pub by_hook: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GcReport {
    pub removed: Vec<GcRemoval>,
    /// Keys whose GC_SCAN hook trapped; they were kept.
    pub hook_traps: Vec<ObjectKey>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeStore {
    pub node_id: NodeId,
    capacity_bytes: u64,
    used_bytes: u64,
    objects: BTreeMap<ObjectKey, ObjectRecord>,
    expiry_index: BTreeSet<(SimTime, ObjectKey)>,
    erased: bool,
}

impl NodeStore {
    pub fn new(node_id: NodeId, capacity_bytes: u64) -> Self {
        NodeStore {
            node_id,
            capacity_bytes,
            used_bytes: 0,
            objects: BTreeMap::new(),
            expiry_index: BTreeSet::new(),
            erased: false,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes.saturating_sub(self.used_bytes)
    }

    pub fn is_erased(&self) -> bool {
        self.erased
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn get(&self, key: &ObjectKey) -> Option<&ObjectRecord> {
        self.objects.get(key)
    }

    pub fn objects(&self) -> impl Iterator<Item = (&ObjectKey, &ObjectRecord)> {
        self.objects.iter()
    }

    pub fn app_objects(&self, app: AppId) -> impl Iterator<Item = (&ObjectKey, &ObjectRecord)> {
        let start = ObjectKey::new(app, "");
        self.objects.range(start..).take_while(move |(k, _)| k.app == app)
    }

    pub fn app_bytes(&self, app: AppId) -> u64 {
        self.app_objects(app).map(|(_, r)| r.footprint()).sum()
    }

    /// Recomputes `used_bytes` from the records.
    pub fn recomputed_used_bytes(&self) -> u64 {
        self.objects.values().map(ObjectRecord::footprint).sum()
    }

    fn index_remove(&mut self, key: &ObjectKey, rec: &ObjectRecord) {
        if let Some(t) = rec.removal_time() {
            self.expiry_index.remove(&(t, key.clone()));
        }
    }

    fn index_insert(&mut self, key: &ObjectKey) {
        if let Some(t) = self.objects[key].removal_time() {
            self.expiry_index.insert((t, key.clone()));
        }
    }

    /// Upserts an object and returns its new version.
    pub fn apply_write(&mut self, key: &ObjectKey, value: Vec<u8>, meta: WriteMeta) -> Result<u64, StoreError> {
        if self.erased {
            return Err(StoreError::NodeErased);
        }
        if key.key.len() > MAX_KEY_LEN {
            return Err(StoreError::KeyTooLong);
        }
        if meta.state.as_ref().is_some_and(|s| s.len() > STATE_CAP) {
            return Err(StoreError::StateTooLarge);
        }
        let old = self.objects.get(key).map(ObjectRecord::footprint).unwrap_or(0);
        let new = value.len() as u64 + OBJECT_OVERHEAD;
        let projected = self.used_bytes - old + new;
        if projected > self.capacity_bytes {
            return Err(StoreError::CapacityExceeded {
                needed: new,
                free: self.capacity_bytes - (self.used_bytes - old),
            });
        }
        self.used_bytes = projected;
        let record = match self.objects.remove(key) {
            Some(mut rec) => {
                self.index_remove(key, &rec);
                rec.value = value;
                rec.version += 1;
                rec.last_written_at = meta.now;
                if meta.state.is_some() {
                    rec.consistency_state = meta.state;
                }
                rec.lifetime = meta.lifetime;
                rec
            }
            None => ObjectRecord {
                key: key.key.clone(),
                app_id: key.app,
                value,
                version: 1,
                created_at: meta.created_at.unwrap_or(meta.now),
                last_read_at: None,
                last_written_at: meta.now,
                consistency_state: meta.state,
                lifetime: meta.lifetime,
                due_at: None,
            },
        };
        let version = record.version;
        self.objects.insert(key.clone(), record);
        self.index_insert(key);
        Ok(version)
    }

    /// Installs a record verbatim (state transfer to a joining replica).
    pub fn install(&mut self, key: &ObjectKey, record: ObjectRecord) -> Result<(), StoreError> {
        if self.erased {
            return Err(StoreError::NodeErased);
        }
        let old = self.objects.get(key).map(ObjectRecord::footprint).unwrap_or(0);
        let projected = self.used_bytes - old + record.footprint();
        if projected > self.capacity_bytes {
            return Err(StoreError::CapacityExceeded {
                needed: record.footprint(),
                free: self.capacity_bytes - (self.used_bytes - old),
            });
        }
        if let Some(prev) = self.objects.remove(key) {
            self.index_remove(key, &prev);
        }
        self.used_bytes = projected;
        self.objects.insert(key.clone(), record);
        self.index_insert(key);
        Ok(())
    }

    pub fn read(&mut self, key: &ObjectKey, now: SimTime) -> Result<(Vec<u8>, u64), StoreError> {
        let rec = self.objects.get(key).ok_or(StoreError::NotFound)?.clone();
        self.index_remove(key, &rec);
        let rec = self.objects.get_mut(key).expect("present");
        rec.last_read_at = Some(now);
        if rec.lifetime.kind == LifetimeKind::ReadOnce && rec.due_at.is_none() {
            rec.due_at = Some(now);
        }
        let out = (rec.value.clone(), rec.version);
        self.index_insert(key);
        Ok(out)
    }

    /// Arms deletion of an object at `now` (WriteOnce after propagation,
    /// OnEvent after its trigger). Returns whether the object exists.
    pub fn mark_due(&mut self, key: &ObjectKey, now: SimTime) -> bool {
        let Some(rec) = self.objects.get(key).cloned() else { return false };
        if rec.due_at.is_some_and(|d| d <= now) {
            return true;
        }
        self.index_remove(key, &rec);
        self.objects.get_mut(key).expect("present").due_at = Some(now);
        self.index_insert(key);
        true
    }

    pub fn remove(&mut self, key: &ObjectKey) -> Option<ObjectRecord> {
        let mut rec = self.objects.remove(key)?;
        self.index_remove(key, &rec);
        self.used_bytes -= rec.footprint();
        rec.value.fill(0);
        Some(rec)
    }

    /// Drops every object of `app`, returning how many were removed.
    pub fn remove_app(&mut self, app: AppId) -> usize {
        let keys: Vec<ObjectKey> = self.app_objects(app).map(|(k, _)| k.clone()).collect();
        for k in &keys {
            self.remove(k);
        }
        keys.len()
    }

    /// Removes every expired object; with a GC_SCAN hook, the hook decides
    /// per object (0 keep, 1 delete, 2 backup, anything else defers to the
    /// declarative policy).
    pub fn gc_tick(&mut self, now: SimTime, hook: Option<(&VerifiedProgram, &mut ScratchMap)>) -> GcReport {
        self.gc_scan(None, now, hook)
    }

    /// [`gc_tick`](Self::gc_tick) restricted to one application's objects.
    pub fn gc_app(&mut self, app: AppId, now: SimTime, hook: Option<(&VerifiedProgram, &mut ScratchMap)>) -> GcReport {
        self.gc_scan(Some(app), now, hook)
    }

    fn gc_scan(
        &mut self,
        app: Option<AppId>,
        now: SimTime,
        hook: Option<(&VerifiedProgram, &mut ScratchMap)>,
    ) -> GcReport {
        let mut report = GcReport::default();
        let mut decisions: Vec<(ObjectKey, Disposal, bool)> = Vec::new();
        match hook {
            None => {
                for (t, key) in &self.expiry_index {
                    if *t > now {
                        break;
                    }
                    if app.is_none_or(|a| a == key.app) {
                        decisions.push((key.clone(), self.objects[key].lifetime.disposal, false));
                    }
                }
            }
            Some((vp, map)) => {
                let candidates: Vec<ObjectKey> = match app {
                    Some(a) => self.app_objects(a).map(|(k, _)| k.clone()).collect(),
                    None => self.objects.keys().cloned().collect(),
                };
                for key in candidates {
                    let rec = &self.objects[&key];
                    let expired = rec.expired_at(now);
                    let mut env = HelperEnv {
                        object: rec.value.clone(),
                        map: std::mem::take(map),
                        now_ns: now,
                        ..Default::default()
                    };
                    env.ctx = gc_context(&key, rec, now, expired);
                    let res = run(vp, &mut env);
                    *map = env.map;
                    let decision = match res.r0() {
                        None => {
                            report.hook_traps.push(key.clone());
                            None
                        }
                        Some(0) => None,
                        Some(1) => Some((Disposal::Erase, true)),
                        Some(2) => Some((Disposal::Backup, true)),
                        Some(_) => expired.then_some((rec.lifetime.disposal, false)),
                    };
                    if let Some((d, by_hook)) = decision {
                        decisions.push((key, d, by_hook));
                    }
                }
            }
        }
        for (key, disposal, by_hook) in decisions {
            let rec = self.remove(&key).expect("candidate exists");
            report.removed.push(GcRemoval {
                key,
                version: rec.version,
                size: rec.value.len() as u64,
                disposal,
                by_hook,
            });
        }
        report
    }

    /// Zeroes and drops every object and marks the node erased. Returns the
    /// keys destroyed.
    pub fn secure_erase(&mut self) -> Vec<ObjectKey> {
        let keys: Vec<ObjectKey> = self.objects.keys().cloned().collect();
        for rec in self.objects.values_mut() {
            rec.value.fill(0);
            if let Some(s) = rec.consistency_state.as_mut() {
                s.fill(0);
            }
        }
        self.objects.clear();
        self.expiry_index.clear();
        self.used_bytes = 0;
        self.erased = true;
        keys
    }

    /// Clears the erased flag; called when a node restarts.
    pub fn reset_erased(&mut self) {
        self.erased = false;
    }
}

pub fn gc_context(key: &ObjectKey, rec: &ObjectRecord, now: SimTime, expired: bool) -> BTreeMap<u32, u64> {
    BTreeMap::from([
        (field::GC_NOW, now),
        (field::GC_CREATED_AT, rec.created_at),
        (field::GC_LAST_READ_AT, rec.last_read_at.unwrap_or(0)),
        (field::GC_LAST_WRITTEN_AT, rec.last_written_at),
        (field::GC_VERSION, rec.version),
        (field::GC_VALUE_LEN, rec.value.len() as u64),
        (field::GC_LIFETIME_KIND, rec.lifetime.kind.code()),
        (field::GC_EXPIRED, u64::from(expired)),
        (field::GC_KEY_LEN, key.key.len() as u64),
        (field::GC_KEY_PREFIX8, key_prefix8(&key.key)),
        (field::GC_KEY_HASH, key_hash(&key.key)),
        (field::GC_DISPOSAL, u64::from(rec.lifetime.disposal == Disposal::Backup)),
    ])
}
