//! Coordinator duties: failure detection and chain repair, periodic GC and
//! sampling, trigger handling, membership transitions and end of life.

use std::collections::BTreeMap;

use crate::appcode::{field, HookKind};
use crate::chain::{join_nodes, rebalance, run_change_hook, ChangeContext, ChangeDecision};
use crate::consistency::HoldQueue;
use crate::harness::trace::hex;
use crate::ids::{AppId, NodeId, OpId};
use crate::migrate::{plan, ChangeKind, Phase, PlanOutcome, Transition, SNAPSHOT_RETRY_NS};
use crate::monitor::{
    cpu_milli, pick_replacement, sample_ctx, AttachPoint, FiredEvent, Metric, MetricsSample, Scope, TriggerAction,
    TriggerInput, EOL_TRIGGER, EOL_WEAR_MILLI,
};
use crate::simnet::{Entity, Fault};
use crate::store::{Disposal, LifetimeKind, ObjectKey, ObjectRecord};

use super::{Change, Cluster, Ev, Request, Update, EOL_RETRY_NS, FAILURE_TIMEOUT_NS};

impl Cluster<'_> {
    pub(crate) fn heartbeat(&mut self) {
        let now = self.now();
        let failed: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, n)| !n.declared_down && n.down_since.is_some_and(|t| now - t >= FAILURE_TIMEOUT_NS))
            .map(|(id, _)| *id)
            .collect();
        for n in failed {
            self.node_down(n);
        }
    }

    fn node_down(&mut self, n: NodeId) {
        self.node_mut(n).declared_down = true;
        let r = self.rec(Some(n), "node_down");
        self.log(r);
        let apps: Vec<AppId> = self.apps.keys().copied().collect();
        let mut replays = Vec::new();
        for &a in &apps {
            if self.apps[&a].transition.as_ref().is_some_and(|t| t.involves(n)) {
                let buffered = self.abort(a, "node_down", false);
                replays.push((a, buffered));
            }
        }
        for &a in &apps {
            if self.chain(a).is_some_and(|c| c.contains(n)) {
                self.repair(a, n);
            }
        }
        for (a, buffered) in replays {
            self.replay(a, buffered);
        }
        self.eol_progress();
    }

    /// Excises a failed node from `app`'s chain.
    fn repair(&mut self, app: AppId, failed: NodeId) {
        let old = self.chain(app).expect("member of a live chain").clone();
        if old.len() == 1 {
            return;
        }
        let pred = old.predecessor(failed);
        let was_tail = old.tail() == failed;
        let nodes: Vec<NodeId> = old.nodes().iter().copied().filter(|m| *m != failed).collect();
        let chain = old.reconfigure(nodes).expect("members stay distinct");
        self.summary.reconfigs += 1;
        let r = self
            .rec(None, "reconfig")
            .with("app", app)
            .with("epoch", chain.epoch)
            .with("chain", &chain)
            .with("reason", "failure");
        self.log(r);
        let a = self.app_mut(app);
        a.epoch = chain.epoch;
        a.chain = Some(chain.clone());
        self.node_mut(failed).replicas.remove(&app);
        for &m in chain.nodes() {
            self.replica_mut(m, app).parked.clear();
        }
        let Some(p) = pred else { return };
        if was_tail {
            let pending: Vec<Update> = std::mem::take(&mut self.replica_mut(p, app).pending).into_values().collect();
            let last = pending.last().map(|u| u.seq);
            for u in &pending {
                self.commit(p, u);
            }
            if let (Some(seq), Some(pp)) = (last, chain.predecessor(p)) {
                self.send(p, pp, Ev::Ack { app, epoch: chain.epoch, seq });
            }
        } else {
            self.resend_pending(p, app);
        }
    }

    pub(crate) fn crash(&mut self, n: NodeId) {
        if !self.sim.is_up(n) {
            return;
        }
        let dropped = self.sim.inject(Fault::Crash(n)).expect("validated");
        let r = self.rec(Some(n), "crash").with("dropped", dropped);
        self.log(r);
        let now = self.now();
        let node = self.node_mut(n);
        node.down_since = Some(now);
        node.holds.clear();
        self.registry.reset_node(n);
    }

    pub(crate) fn restart(&mut self, n: NodeId) {
        if self.sim.is_up(n) {
            return;
        }
        self.sim.inject(Fault::Restart(n)).expect("validated");
        let r = self.rec(Some(n), "restart");
        self.log(r);
        self.node_mut(n).down_since = None;
        if !self.nodes[&n].declared_down {
            return;
        }
        let apps: Vec<AppId> = self.apps.keys().copied().collect();
        for a in apps {
            if self.chain(a).is_some_and(|c| c.contains(n)) {
                continue;
            }
            self.node_mut(n).replicas.remove(&a);
            self.evict(n, a, "stale");
        }
        let node = self.node_mut(n);
        node.store.reset_erased();
        node.declared_down = false;
    }

    /// Drops every object of `app` held at `n`.
    fn evict(&mut self, n: NodeId, app: AppId, reason: &str) {
        let count = self.node_mut(n).store.remove_app(app);
        if count > 0 {
            let r = self.rec(Some(n), "evict").with("app", app).with("count", count).with("reason", reason);
            self.log(r);
        }
    }

    /// Runs garbage collection for `app` at its head and propagates the
    /// deletions down the chain.
    pub(crate) fn gc_at_head(&mut self, app: AppId, periodic: bool) {
        let Some(chain) = self.chain(app).cloned() else { return };
        let head = chain.head();
        if self.apps[&app].transition.is_some() || !self.sim.is_up(head) {
            return;
        }
        if periodic {
            self.eval_triggers(AttachPoint::GcScan, head, None, Some(app), &[]);
            if self.chain(app) != Some(&chain) || self.apps[&app].transition.is_some() {
                return;
            }
        }
        let now = self.now();
        let prog = self.apps[&app].gc.clone();
        let node = self.node_mut(head);
        let report = match &prog {
            Some(vp) => {
                let map = node.maps.entry((app, HookKind::GcScan)).or_default();
                node.store.gc_app(app, now, Some((vp, map)))
            }
            None => node.store.gc_app(app, now, None),
        };
        for k in &report.hook_traps {
            let r = self.rec(Some(head), "warn").with("app", app).with("what", "gc_hook").with("detail", &k.key);
            self.log(r);
        }
        for rm in report.removed {
            self.summary.gc_removed += 1;
            let by = if rm.by_hook { "hook" } else { "policy" };
            let r = self
                .rec(Some(head), "gc_delete")
                .with("app", app)
                .with("key", &rm.key.key)
                .with("ver", rm.version)
                .with("disposal", rm.disposal.as_str())
                .with("by", by);
            self.log(r);
            if rm.disposal == Disposal::Backup {
                let r = self
                    .rec(Some(head), "backup")
                    .with("app", app)
                    .with("key", &rm.key.key)
                    .with("size", rm.size)
                    .with("target", "cloud");
                self.log(r);
            }
            let u = self.sequence(head, app, rm.key.key, Change::Gc, None, now, Default::default());
            self.trace_apply(head, &u, rm.version, "chain");
            self.after_apply(head, u);
        }
    }

    pub(crate) fn sample_tick(&mut self) {
        let now = self.now();
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        for n in ids {
            let st = self.sim.node(n).expect("known node");
            if !st.up {
                continue;
            }
            let node = self.node_mut(n);
            let s = MetricsSample {
                node_id: n,
                t: now,
                cpu_milli: cpu_milli(node.load, node.msgs_in, node.msgs_out),
                used_bytes: node.store.used_bytes(),
                capacity_bytes: node.store.capacity_bytes(),
                wear_milli: st.wear_milli,
                rtt_us: BTreeMap::new(),
                msgs_in: node.msgs_in,
                msgs_out: node.msgs_out,
            };
            node.msgs_in = 0;
            node.msgs_out = 0;
            let healthy = st.wear_milli < 1000 && !node.eol;
            let r = self
                .rec(Some(n), "sample")
                .with("cpu", s.cpu_milli)
                .with("used", s.used_bytes)
                .with("cap", s.capacity_bytes)
                .with("wear", s.wear_milli)
                .with("in", s.msgs_in)
                .with("out", s.msgs_out);
            self.log(r);
            self.samples.push(s.clone());
            let ctx = sample_ctx(&s, healthy);
            self.eval_tick(n, &s, ctx);
            if s.wear_milli >= EOL_WEAR_MILLI && !self.nodes[&n].eol {
                let r = self
                    .rec(Some(n), "trigger_fire")
                    .with("trigger", "eol")
                    .with("id", EOL_TRIGGER)
                    .with("metric", Metric::WearMilli)
                    .with("value", s.wear_milli)
                    .with("action", "eol");
                self.log(r);
                self.node_mut(n).eol = true;
                self.sim.schedule(0, Entity::Coordinator, Ev::EolStart(n));
            }
        }
    }

    /// Tick triggers for one sample; each sees the origin and head position
    /// of its own app.
    fn eval_tick(&mut self, n: NodeId, s: &MetricsSample, base: BTreeMap<u32, u64>) {
        let ticks: Vec<_> = self
            .registry
            .iter()
            .filter(|(_, spec)| spec.attach == AttachPoint::Tick)
            .map(|(id, spec)| (id, spec.app))
            .collect();
        for (tid, app) in ticks {
            let mut ctx = base.clone();
            let origin = app.map_or(n, |a| self.apps[&a].origin);
            if let Some(a) = app.map(|a| &self.apps[&a]) {
                ctx.insert(field::TRG_ORIGIN_X, a.origin_x as u64);
                ctx.insert(field::TRG_ORIGIN_Y, a.origin_y as u64);
                if let Some(h) = a.chain.as_ref().map(|c| &self.nodes[&c.head()]) {
                    ctx.insert(field::TRG_HEAD_X, h.x as u64);
                    ctx.insert(field::TRG_HEAD_Y, h.y as u64);
                }
            }
            let input = TriggerInput { ctx, nodes: self.views(origin) };
            let now = self.now();
            let apps = &self.apps;
            let ev = self.registry.evaluate(
                AttachPoint::Tick,
                n,
                Some(s),
                &input,
                |id, spec| id == tid && in_scope(apps, &spec.scope, n),
                now,
            );
            self.after_eval(n, ev);
        }
    }

    /// Evaluates triggers attached to an operation or GC scan at `n`.
    pub(crate) fn eval_triggers(
        &mut self,
        attach: AttachPoint,
        n: NodeId,
        sample: Option<&MetricsSample>,
        app: Option<AppId>,
        extra: &[(u32, u64)],
    ) {
        if !self.registry.iter().any(|(_, s)| s.attach == attach) {
            return;
        }
        let mut ctx: BTreeMap<u32, u64> = extra.iter().copied().collect();
        let origin = app.map_or(n, |a| self.apps[&a].origin);
        if let Some(a) = app.map(|a| &self.apps[&a]) {
            ctx.insert(field::TRG_ORIGIN_X, a.origin_x as u64);
            ctx.insert(field::TRG_ORIGIN_Y, a.origin_y as u64);
        }
        let input = TriggerInput { ctx, nodes: self.views(origin) };
        let now = self.now();
        let apps = &self.apps;
        let ev = self.registry.evaluate(
            attach,
            n,
            sample,
            &input,
            |_, spec| (app.is_none() || spec.app.is_none() || spec.app == app) && in_scope(apps, &spec.scope, n),
            now,
        );
        self.after_eval(n, ev);
    }

    fn after_eval(&mut self, n: NodeId, ev: crate::monitor::Evaluation) {
        for (tid, code) in ev.traps {
            let name = self.registry.get(tid).map(|s| s.name.clone()).unwrap_or_default();
            let r = self
                .rec(Some(n), "warn")
                .with("what", "trigger")
                .with("trigger", name)
                .with("detail", format!("trap:{}", code.as_str()));
            self.log(r);
        }
        for fe in ev.fired {
            let name = self.registry.get(fe.trigger_id).expect("registered").name.clone();
            self.fire(fe, &name, None);
        }
    }

    /// Records a firing and schedules its handler.
    pub(crate) fn fire(&mut self, fe: FiredEvent, name: &str, op: Option<OpId>) {
        let spec = self.registry.get(fe.trigger_id).expect("registered");
        let action = spec.action;
        let metric = crate::monitor::Metric::ALL
            .get((fe.metric_code as usize).wrapping_sub(1))
            .map_or_else(|| "-".to_owned(), |m| m.to_string());
        let mut r = self
            .rec(Some(fe.node), "trigger_fire")
            .with("trigger", name)
            .with("id", fe.trigger_id)
            .with("metric", metric)
            .with("value", fe.value)
            .with("action", action.as_str());
        if let Some(op) = op {
            r = r.with("op", op);
        }
        self.log(r);
        self.sim.schedule(0, Entity::Coordinator, Ev::Fired(fe));
    }

    pub(crate) fn on_fired(&mut self, fe: FiredEvent) {
        let Some(spec) = self.registry.get(fe.trigger_id) else { return };
        let (action, spec_app) = (spec.action, spec.app);
        let apps: Vec<AppId> = self.apps.keys().copied().collect();
        let now = self.now();
        for &a in &apps {
            let Some(head) = self.chain(a).map(|c| c.head()) else { continue };
            let store = &mut self.node_mut(head).store;
            let keys: Vec<ObjectKey> = store
                .app_objects(a)
                .filter(|(_, r)| r.lifetime.kind == LifetimeKind::OnEvent(fe.trigger_id))
                .map(|(k, _)| k.clone())
                .collect();
            for k in &keys {
                store.mark_due(k, now);
            }
            if !keys.is_empty() {
                self.gc_at_head(a, false);
            }
        }
        let targets: Vec<AppId> = match spec_app {
            Some(a) => vec![a],
            None => apps,
        };
        match action {
            TriggerAction::Rebalance => {
                for a in targets {
                    if self.apps[&a].lb.is_some() {
                        self.request_change(a, ChangeKind::Rebalance(fe));
                    }
                }
            }
            TriggerAction::Migrate => {
                for a in targets {
                    if self.apps[&a].migration.is_some() {
                        self.request_change(a, ChangeKind::Migration(fe));
                    }
                }
            }
            TriggerAction::Gc => {
                for a in targets {
                    self.gc_at_head(a, false);
                }
            }
            TriggerAction::Notify => {}
        }
    }

    pub(crate) fn request_change(&mut self, app: AppId, kind: ChangeKind) {
        self.app_mut(app).queued.push_back(kind);
        self.sim.schedule(0, Entity::Coordinator, Ev::StartTransition(app));
    }

    pub(crate) fn start_transition(&mut self, app: AppId) {
        if self.apps[&app].transition.is_some() {
            return;
        }
        while let Some(kind) = self.app_mut(app).queued.pop_front() {
            if self.chain(app).is_none() {
                self.app_mut(app).queued.clear();
                return;
            }
            if let Some(nodes) = self.plan_change(app, kind) {
                self.begin(app, kind, nodes);
                return;
            }
        }
    }

    /// Decides the next membership for a requested change; `None` when
    /// there is nothing to do.
    fn plan_change(&mut self, app: AppId, kind: ChangeKind) -> Option<Vec<NodeId>> {
        let chain = self.chain(app)?.clone();
        let a = &self.apps[&app];
        let views = self.views(a.origin);
        let mut extra = ChangeContext {
            origin_x: a.origin_x,
            origin_y: a.origin_y,
            replica_count: a.spec.replicas,
            eol_node: None,
        };
        let skip = |c: &mut Self, why: String| {
            let r = c.rec(None, "change_skip").with("app", app).with("reason", kind.reason()).with("why", why);
            c.log(r);
            None
        };
        let nodes = match kind {
            ChangeKind::Migration(fe) => {
                let vp = a.migration.clone()?;
                let map = self.app_mut(app).maps.entry(HookKind::Migration).or_default();
                match plan(&fe, &chain, &vp, &views, &extra, map).expect("hook kinds checked at load") {
                    PlanOutcome::Plan(p) => p.new_nodes,
                    PlanOutcome::NoChange => return skip(self, "nochange".into()),
                    PlanOutcome::Trap(code) => return skip(self, format!("trap:{}", code.as_str())),
                }
            }
            ChangeKind::Rebalance(fe) => {
                let vp = a.lb.clone()?;
                let map = self.app_mut(app).maps.entry(HookKind::LoadBalance).or_default();
                match rebalance(&fe, &chain, &vp, &views, &extra, map).expect("hook kinds checked at load") {
                    ChangeDecision::NewChain(nodes) => nodes,
                    ChangeDecision::NoChange => return skip(self, "nochange".into()),
                    ChangeDecision::Trap(code) => return skip(self, format!("trap:{}", code.as_str())),
                }
            }
            ChangeKind::EndOfLife(eol) => {
                if !chain.contains(eol) {
                    return None;
                }
                extra.eol_node = Some(eol);
                let mut chosen = Vec::new();
                if let Some(vp) = a.migration.clone() {
                    let wear = self.sim.node(eol).expect("known node").wear_milli;
                    let fe = FiredEvent {
                        trigger_id: EOL_TRIGGER,
                        node: eol,
                        metric_code: Metric::WearMilli.code(),
                        value: wear,
                        t: self.now(),
                    };
                    let now = self.now();
                    let map = self.app_mut(app).maps.entry(HookKind::Migration).or_default();
                    let out = run_change_hook(HookKind::Migration, &fe, &chain, &vp, &views, &extra, map, now)
                        .expect("hook kinds checked at load");
                    if let ChangeDecision::NewChain(nodes) = out {
                        chosen = nodes.into_iter().filter(|n| *n != eol).collect();
                    }
                }
                if chosen.is_empty() {
                    let need = self.nodes[&eol].store.app_bytes(app);
                    chosen = chain.nodes().to_vec();
                    let pos = chain.position(eol).expect("member");
                    match pick_replacement(&views, chain.nodes(), need) {
                        Some(r) => chosen[pos] = r,
                        None => {
                            chosen.remove(pos);
                        }
                    }
                }
                chosen
            }
            ChangeKind::Manual => return None,
        };
        let mut seen = std::collections::BTreeSet::new();
        let valid = nodes.iter().all(|n| self.nodes.get(n).is_some_and(|rt| !rt.eol) && seen.insert(*n));
        if !valid || (nodes.is_empty() && !matches!(kind, ChangeKind::EndOfLife(_))) {
            return skip(self, format!("invalid:{}", join_nodes(&nodes)));
        }
        Some(nodes)
    }

    fn begin(&mut self, app: AppId, kind: ChangeKind, nodes: Vec<NodeId>) {
        let old = self.chain(app).expect("live chain").clone();
        let tid = self.next_tid;
        self.next_tid += 1;
        let now = self.now();
        if kind.is_migration() {
            let r = self
                .rec(None, "migrate_begin")
                .with("app", app)
                .with("from", &old)
                .with("to", join_nodes(&nodes))
                .with("tid", tid);
            self.log(r);
        }
        let r = self.rec(None, "freeze").with("app", app).with("epoch", old.epoch).with("tid", tid);
        self.log(r);
        let mut t = Transition::new(tid, kind, old.clone(), nodes, now);
        let head = old.head();
        let held = self.node_mut(head).holds.remove(&app).map(|mut q| q.drain_all()).unwrap_or_default();
        let mut keep = HoldQueue::new();
        for (key, h) in held {
            if h.op.is_write() {
                let r = self.rec(Some(head), "buffer").with("app", app).with("key", &key).with("op", h.op.op);
                self.log(r);
                t.buffered.push(h.op);
            } else {
                keep.hold(&key, h.op, now);
            }
        }
        if !keep.is_empty() {
            let keys: Vec<String> = keep.keys().map(str::to_owned).collect();
            self.node_mut(head).holds.insert(app, keep);
            for key in keys {
                let at = now + crate::consistency::HOLD_RECHECK_NS;
                self.sim.schedule_at(at, Entity::Coordinator, Ev::Recheck { node: head, app, key });
            }
        }
        self.app_mut(app).transition = Some(t);
        self.sim.schedule(self.sc.sim.copy_timeout, Entity::Coordinator, Ev::CopyDeadline { app, tid });
        self.check_drain(app);
    }

    /// Moves a draining transition to copying once every write past the
    /// head has committed.
    pub(crate) fn check_drain(&mut self, app: AppId) {
        let Some(t) = self.apps[&app].transition.as_ref() else { return };
        if t.phase != Phase::Draining {
            return;
        }
        let (head, tail, tid) = (t.old.head(), t.old.tail(), t.id);
        let applied = self.nodes[&head].replicas.get(&app).map_or(0, |r| r.applied);
        let committed = self.nodes[&tail].replicas.get(&app).map_or(0, |r| r.committed);
        if committed < applied {
            return;
        }
        let t = self.app_mut(app).transition.as_mut().expect("checked");
        t.phase = Phase::Copying;
        let no_joiners = t.awaiting.is_empty();
        let r = self
            .rec(Some(tail), "copy_begin")
            .with("app", app)
            .with("from", tail)
            .with("seq", committed)
            .with("tid", tid);
        self.log(r);
        if no_joiners {
            self.switch(app);
        } else {
            self.send_snapshots(app);
        }
    }

    fn send_snapshots(&mut self, app: AppId) {
        let t = self.apps[&app].transition.as_ref().expect("copying");
        let (tail, tid) = (t.old.tail(), t.id);
        let awaiting: Vec<NodeId> = t.awaiting.iter().copied().collect();
        let seq = self.nodes[&tail].replicas.get(&app).map_or(0, |r| r.committed);
        let records: Vec<ObjectRecord> = self.nodes[&tail].store.app_objects(app).map(|(_, r)| r.clone()).collect();
        for j in awaiting {
            self.send(tail, j, Ev::Snapshot { app, tid, seq, records: records.clone() });
        }
        self.sim.schedule(SNAPSHOT_RETRY_NS, Entity::Coordinator, Ev::SnapshotRetry { app, tid });
    }

    pub(crate) fn snapshot_retry(&mut self, app: AppId, tid: u64) {
        let live = self.apps[&app].transition.as_ref().is_some_and(|t| t.id == tid && t.phase == Phase::Copying);
        if live {
            self.send_snapshots(app);
        }
    }

    pub(crate) fn on_snapshot(&mut self, n: NodeId, app: AppId, tid: u64, seq: u64, records: Vec<ObjectRecord>) {
        let ok = self.apps[&app]
            .transition
            .as_ref()
            .is_some_and(|t| t.id == tid && t.phase == Phase::Copying && t.awaiting.contains(&n));
        if !ok {
            return;
        }
        let epoch = self.apps[&app].transition.as_ref().expect("checked").old.epoch;
        self.evict(n, app, "snapshot");
        for rec in records {
            let key = ObjectKey::new(app, rec.key.clone());
            if let Err(e) = self.node_mut(n).store.install(&key, rec.clone()) {
                let r = self
                    .rec(Some(n), "warn")
                    .with("app", app)
                    .with("what", "snapshot")
                    .with("detail", e.to_string().replace(' ', "_"));
                self.log(r);
                self.abort(app, "capacity", true);
                return;
            }
            let r = self
                .rec(Some(n), "chain_apply")
                .with("app", app)
                .with("key", &rec.key)
                .with("seq", seq)
                .with("epoch", epoch)
                .with("kind", "put")
                .with("ver", rec.version)
                .with("op", "-")
                .with("via", "snapshot")
                .with("created", rec.created_at)
                .with("life", rec.lifetime)
                .with("val", hex(&rec.value))
                .with("state", rec.consistency_state.as_ref().map_or_else(|| "-".to_owned(), |s| hex(s)));
            self.log(r);
        }
        let rep = self.replica_mut(n, app);
        *rep = Default::default();
        rep.applied = seq;
        rep.committed = seq;
        let done = self.app_mut(app).transition.as_mut().expect("checked").mark_installed(n);
        if done {
            self.switch(app);
        }
    }

    pub(crate) fn copy_deadline(&mut self, app: AppId, tid: u64) {
        if self.apps[&app].transition.as_ref().is_some_and(|t| t.id == tid) {
            self.abort(app, "copy_timeout", true);
        }
    }

    fn switch(&mut self, app: AppId) {
        let t = self.app_mut(app).transition.take().expect("in transition");
        let old = t.old.clone();
        let head = old.head();
        let finished: Vec<Update> = self.replica_mut(head, app).pending.values().cloned().collect();
        for u in &finished {
            self.head_committed(head, u);
        }
        for &m in old.nodes() {
            let rep = self.replica_mut(m, app);
            rep.pending.clear();
            rep.committed = rep.applied;
        }
        let eol_node = match t.kind {
            ChangeKind::EndOfLife(n) => Some(n),
            _ => None,
        };
        let mut redispatch: Vec<(NodeId, Request)> = Vec::new();
        for d in t.departing().collect::<Vec<_>>() {
            self.node_mut(d).replicas.remove(&app);
            if let Some(mut q) = self.node_mut(d).holds.remove(&app) {
                redispatch.extend(q.drain_all().into_iter().map(|(_, h)| (d, h.op)));
            }
            if Some(d) != eol_node {
                self.evict(d, app, t.kind.reason());
            }
        }
        if t.new_nodes.is_empty() {
            self.go_offline(app, t, &old);
            return;
        }
        let chain = old.reconfigure(t.new_nodes.clone()).expect("validated");
        for &m in chain.nodes() {
            self.replica_mut(m, app);
        }
        self.summary.reconfigs += 1;
        let a = self.app_mut(app);
        a.epoch = chain.epoch;
        a.chain = Some(chain.clone());
        let r = self
            .rec(None, "reconfig")
            .with("app", app)
            .with("epoch", chain.epoch)
            .with("chain", &chain)
            .with("reason", t.kind.reason());
        self.log(r);
        if t.kind.is_migration() {
            self.summary.migrations += 1;
            let r = self
                .rec(None, "migrate_switch")
                .with("app", app)
                .with("from", &old)
                .with("to", &chain)
                .with("epoch", chain.epoch)
                .with("tid", t.id);
            self.log(r);
        }
        let r = self.rec(None, "unfreeze").with("app", app).with("epoch", chain.epoch).with("tid", t.id);
        self.log(r);
        for (from, req) in redispatch {
            let to = if req.is_write() { chain.head() } else { chain.tail() };
            self.send(from, to, Ev::Req(req));
        }
        self.replay(app, t.buffered);
        self.eol_progress();
        self.sim.schedule(0, Entity::Coordinator, Ev::StartTransition(app));
    }

    /// The last replica retired: the app's data goes to cloud backup and the
    /// app has no chain.
    fn go_offline(&mut self, app: AppId, t: Transition<Request>, old: &crate::chain::ReplicaChain) {
        let tail = old.tail();
        let objs: Vec<(String, u64)> =
            self.nodes[&tail].store.app_objects(app).map(|(k, r)| (k.key.clone(), r.value.len() as u64)).collect();
        for (key, size) in objs {
            let r = self
                .rec(Some(tail), "backup")
                .with("app", app)
                .with("key", key)
                .with("size", size)
                .with("target", "cloud");
            self.log(r);
        }
        for &m in old.nodes() {
            self.node_mut(m).replicas.remove(&app);
        }
        self.summary.reconfigs += 1;
        let a = self.app_mut(app);
        a.chain = None;
        a.epoch += 1;
        let epoch = a.epoch;
        let r =
            self.rec(None, "reconfig").with("app", app).with("epoch", epoch).with("chain", "-").with("reason", "eol");
        self.log(r);
        let r = self.rec(None, "unfreeze").with("app", app).with("epoch", epoch).with("tid", t.id);
        self.log(r);
        let head = old.head();
        let from = self.sim.is_up(head).then_some(head);
        for req in t.buffered {
            self.reject(from, &req, "offline");
        }
        self.eol_progress();
    }

    /// Cancels the app's transition. Buffered writes are replayed at the
    /// head when `replay` is set, otherwise handed back.
    pub(crate) fn abort(&mut self, app: AppId, reason: &str, replay: bool) -> Vec<Request> {
        let t = self.app_mut(app).transition.take().expect("in transition");
        self.summary.aborts += 1;
        let ev = if t.kind.is_migration() { "migrate_abort" } else { "reconfig_abort" };
        let r = self.rec(None, ev).with("app", app).with("reason", reason).with("tid", t.id);
        self.log(r);
        for j in t.joiners().collect::<Vec<_>>() {
            self.node_mut(j).replicas.remove(&app);
            self.evict(j, app, "abort");
        }
        let r = self.rec(None, "unfreeze").with("app", app).with("epoch", t.old.epoch).with("tid", t.id);
        self.log(r);
        if let ChangeKind::EndOfLife(node) = t.kind {
            self.sim.schedule(EOL_RETRY_NS, Entity::Coordinator, Ev::EolRetry { app, node });
        }
        self.sim.schedule(0, Entity::Coordinator, Ev::StartTransition(app));
        if replay {
            self.replay(app, t.buffered);
            Vec::new()
        } else {
            t.buffered
        }
    }

    /// Re-submits buffered writes, in arrival order, at the current head.
    fn replay(&mut self, app: AppId, buffered: Vec<Request>) {
        for req in buffered {
            let Some(head) = self.chain(app).map(|c| c.head()) else {
                self.reject(None, &req, "offline");
                continue;
            };
            if !self.sim.is_up(head) {
                continue;
            }
            self.write_request(head, req);
        }
    }

    pub(crate) fn eol_start(&mut self, n: NodeId) {
        if self.nodes[&n].eol_done {
            return;
        }
        self.summary.eols += 1;
        let wear = self.sim.node(n).expect("known node").wear_milli;
        let r = self.rec(Some(n), "eol_begin").with("wear", wear);
        self.log(r);
        let apps: Vec<AppId> =
            self.apps.keys().copied().filter(|a| self.chain(*a).is_some_and(|c| c.contains(n))).collect();
        for a in apps {
            self.request_change(a, ChangeKind::EndOfLife(n));
        }
        self.eol_progress();
    }

    pub(crate) fn eol_retry(&mut self, app: AppId, node: NodeId) {
        if !self.nodes[&node].eol_done && self.chain(app).is_some_and(|c| c.contains(node)) {
            self.request_change(app, ChangeKind::EndOfLife(node));
        }
    }

    /// Erases retiring nodes that no chain depends on any more.
    pub(crate) fn eol_progress(&mut self) {
        let ready: Vec<NodeId> = self
            .nodes
            .iter()
            .filter(|(_, rt)| rt.eol && !rt.eol_done)
            .map(|(id, _)| *id)
            .filter(|id| self.apps.values().all(|a| a.chain.as_ref().is_none_or(|c| !c.contains(*id))))
            .collect();
        for n in ready {
            let node = self.node_mut(n);
            node.eol_done = true;
            node.replicas.clear();
            node.holds.clear();
            let keys = node.store.secure_erase();
            for k in &keys {
                let r = self.rec(Some(n), "erase").with("app", k.app).with("key", &k.key);
                self.log(r);
            }
            let r = self.rec(Some(n), "provider_notice").with("erased", keys.len());
            self.log(r);
        }
    }
}

fn in_scope(apps: &BTreeMap<AppId, super::AppRt>, scope: &Scope, n: NodeId) -> bool {
    match scope {
        Scope::All => true,
        Scope::Nodes(ns) => ns.contains(&n),
        Scope::App(a) => apps.get(a).and_then(|a| a.chain.as_ref()).is_some_and(|c| c.contains(n)),
    }
}
