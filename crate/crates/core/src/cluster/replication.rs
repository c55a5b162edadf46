//! Client requests, admission, and the chain update / ack protocol.

use crate::appcode::{field, run_pipeline, HelperEnv, HookKind};
use crate::consistency::{admit, AdmissionAction, AdmissionContext, OpKind, Recheck, Release};
use crate::harness::trace::hex;
use crate::ids::{key_hash, AppId, NodeId, SessionId};
use crate::monitor::AttachPoint;
use crate::simnet::Entity;
use crate::store::{LifetimeKind, ObjectKey, WriteMeta, OBJECT_OVERHEAD};

use super::{Change, Cluster, Ev, OpRef, ReqBody, Request, Update};

/// Result of running admission for one request.
enum Decision {
    Accept(Option<Vec<u8>>),
    Reject(&'static str),
    Hold,
}

fn state_hex(s: &Option<Vec<u8>>) -> String {
    s.as_ref().map_or_else(|| "-".to_owned(), |b| hex(b))
}

impl Cluster<'_> {
    pub(crate) fn on_request(&mut self, n: NodeId, req: Request) {
        let Some(chain) = self.chain(req.app) else {
            self.reject(Some(n), &req, "offline");
            return;
        };
        let target = if req.is_write() { chain.head() } else { chain.tail() };
        if target != n {
            self.send(n, target, Ev::Req(req));
            return;
        }
        if req.is_write() {
            self.write_request(n, req);
        } else {
            self.read_request(n, req);
        }
    }

    /// A write at the head: buffer while frozen, else admit.
    pub(crate) fn write_request(&mut self, n: NodeId, req: Request) {
        if self.apps[&req.app].transition.is_some() {
            let r = self.rec(Some(n), "buffer").with("app", req.app).with("key", &req.key).with("op", req.op);
            self.log(r);
            self.app_mut(req.app).transition.as_mut().expect("frozen").buffered.push(req);
            return;
        }
        if let ReqBody::Put { value, .. } = &req.body {
            let extra = [(field::TRG_KEY_HASH, key_hash(&req.key)), (field::TRG_VALUE_LEN, value.len() as u64)];
            self.eval_triggers(AttachPoint::PreWrite, n, None, Some(req.app), &extra);
        }
        match self.decide(n, &req) {
            Decision::Accept(state) => self.execute_write(n, req, state),
            Decision::Reject(reason) => self.reject(Some(n), &req, reason),
            Decision::Hold => self.hold(n, req),
        }
    }

    pub(crate) fn read_request(&mut self, n: NodeId, req: Request) {
        if req.body == ReqBody::Compute {
            self.serve_compute(n, &req);
            return;
        }
        match self.decide(n, &req) {
            Decision::Accept(_) => self.serve_read(n, &req),
            Decision::Reject(reason) => self.reject(Some(n), &req, reason),
            Decision::Hold => self.hold(n, req),
        }
    }

    /// Runs the app's consistency program for `req` at node `n`, tracing
    /// the decision. Deletes and apps without a program always proceed.
    fn decide(&mut self, n: NodeId, req: &Request) -> Decision {
        let write = req.is_write();
        let app = &self.apps[&req.app];
        let prog = if write { app.cw.clone() } else { app.cr.clone() };
        let Some(prog) = prog.filter(|_| req.body != ReqBody::Delete) else {
            return Decision::Accept(None);
        };
        let okey = ObjectKey::new(req.app, req.key.clone());
        let node = &self.nodes[&n];
        let rec = node.store.get(&okey);
        let applied_version = rec.map_or(0, |r| r.version);
        let mut state = rec.and_then(|r| r.consistency_state.clone());
        if !write {
            if let Some((_, hinted)) = node.replicas.get(&req.app).and_then(|r| r.hints.get(&req.key)) {
                state = hinted.clone();
            }
        }
        let value_len = match &req.body {
            ReqBody::Put { value, .. } => value.len() as u64,
            _ => 0,
        };
        let ctx = AdmissionContext {
            key: req.key.clone(),
            state,
            ts_ns: req.ts,
            writer: req.writer,
            session: SessionId(req.session),
            applied_version,
            op: if write { OpKind::Write } else { OpKind::Read },
            value_len,
            node: n,
        };
        let now = self.now();
        let map = self.node_mut(n).maps.entry((req.app, prog.hook_kind())).or_default();
        let adm = admit(&ctx, &prog, map, now).expect("hook kinds checked at load");
        let r = self
            .rec(Some(n), "admit")
            .with("app", req.app)
            .with("key", &req.key)
            .with("op", req.op)
            .with("kind", ctx.op.as_str())
            .with("verdict", adm.action)
            .with("ts", req.ts)
            .with("writer", req.writer)
            .with("session", req.session)
            .with("ver", applied_version)
            .with("state", state_hex(&ctx.state))
            .with("new", state_hex(&adm.new_state))
            .with("note", adm.warning.map_or_else(|| "-".to_owned(), |w| w.to_string()));
        self.log(r);
        if let Some(w) = adm.warning {
            let r = self.rec(Some(n), "warn").with("app", req.app).with("what", "admission").with("detail", w);
            self.log(r);
        }
        match adm.action {
            AdmissionAction::Accept => Decision::Accept(adm.new_state),
            AdmissionAction::Reject if adm.warning.is_some() => Decision::Reject("fail_closed"),
            AdmissionAction::Reject => Decision::Reject("consistency"),
            AdmissionAction::Hold => Decision::Hold,
        }
    }

    /// Tells the client its op failed. `n` is the node refusing it, if any.
    pub(crate) fn reject(&mut self, n: Option<NodeId>, req: &Request, reason: &str) {
        self.summary.rejected += 1;
        let ev = match req.body {
            ReqBody::Compute => "compute_err".to_owned(),
            _ => format!("{}_reject", req.ev_prefix()),
        };
        let r = self
            .rec(n, &ev)
            .with("app", req.app)
            .with("key", &req.key)
            .with("op", req.op)
            .with("client", req.client)
            .with("reason", reason);
        self.log(r);
        match n {
            Some(n) => self.reply(n, req.client, req.op),
            None => {
                if let Some(o) = self.ops.get_mut(&req.op) {
                    o.resolved = true;
                }
            }
        }
    }

    fn hold(&mut self, n: NodeId, req: Request) {
        self.summary.held += 1;
        let kind = if req.is_write() { "write" } else { "read" };
        let r =
            self.rec(Some(n), "hold").with("app", req.app).with("key", &req.key).with("op", req.op).with("kind", kind);
        self.log(r);
        let now = self.now();
        let (app, key) = (req.app, req.key.clone());
        let due = self.node_mut(n).holds.entry(app).or_default().hold(&key, req, now);
        self.sim.schedule_at(due, Entity::Coordinator, Ev::Recheck { node: n, app, key });
    }

    /// Re-admits held ops for `key` at `n`.
    pub(crate) fn recheck(&mut self, n: NodeId, app: AppId, key: &str, why: Recheck) {
        let Some(mut queue) = self.node_mut(n).holds.remove(&app) else { return };
        let now = self.now();
        let released = queue.resolve_holds(key, now, why, |req| {
            let decision = self.decide(n, req);
            let verdict = match &decision {
                Decision::Accept(_) => AdmissionAction::Accept,
                Decision::Reject(_) => AdmissionAction::Reject,
                Decision::Hold => return AdmissionAction::Hold,
            };
            let r = self
                .rec(Some(n), "release")
                .with("app", req.app)
                .with("key", &req.key)
                .with("op", req.op)
                .with("verdict", verdict);
            self.log(r);
            match decision {
                Decision::Accept(state) => {
                    if req.is_write() {
                        self.execute_write(n, req.clone(), state);
                    } else {
                        self.serve_read(n, req);
                    }
                }
                Decision::Reject(reason) => self.reject(Some(n), req, reason),
                Decision::Hold => unreachable!(),
            }
            verdict
        });
        let again = now + crate::consistency::HOLD_RECHECK_NS;
        let rearmed = queue.held(key).any(|h| h.next_eval == again);
        let node = self.node_mut(n);
        match node.holds.remove(&app) {
            Some(newer) => {
                queue.absorb(newer);
                node.holds.insert(app, queue);
            }
            None if queue.is_empty() => {}
            None => {
                node.holds.insert(app, queue);
            }
        }
        for (req, how) in released {
            if how == Release::Exhausted {
                let r = self
                    .rec(Some(n), "release")
                    .with("app", req.app)
                    .with("key", &req.key)
                    .with("op", req.op)
                    .with("verdict", "exhausted");
                self.log(r);
                self.reject(Some(n), &req, "hold_exhausted");
            }
        }
        if rearmed {
            self.sim.schedule_at(again, Entity::Coordinator, Ev::Recheck { node: n, app, key: key.to_owned() });
        }
    }

    /// Applies an admitted write at the head and starts it down the chain.
    pub(crate) fn execute_write(&mut self, head: NodeId, req: Request, state: Option<Vec<u8>>) {
        let app = req.app;
        let chain = self.chain(app).expect("writes reach only live chains").clone();
        let okey = ObjectKey::new(app, req.key.clone());
        let existing = self.nodes[&head].store.get(&okey).cloned();
        let (change, lifetime) = match req.body.clone() {
            ReqBody::Put { value, lifetime } => {
                let need = value.len() as u64 + OBJECT_OVERHEAD;
                let short = chain.nodes().iter().find(|m| {
                    let st = &self.nodes[m].store;
                    let old = st.get(&okey).map_or(0, |r| r.value.len() as u64 + OBJECT_OVERHEAD);
                    st.free_bytes() + old < need
                });
                if short.is_some() {
                    self.reject(Some(head), &req, "capacity");
                    return;
                }
                let state = state.or_else(|| existing.as_ref().and_then(|r| r.consistency_state.clone()));
                (Change::Put { value, state }, lifetime)
            }
            ReqBody::Delete => {
                let Some(rec) = existing.as_ref() else {
                    self.summary.acked += 1;
                    let r = self
                        .rec(Some(head), "del_ack")
                        .with("app", app)
                        .with("key", &req.key)
                        .with("op", req.op)
                        .with("client", req.client)
                        .with("ver", 0)
                        .with("seq", 0);
                    self.log(r);
                    self.reply(head, req.client, req.op);
                    return;
                };
                (Change::Del, rec.lifetime)
            }
            _ => unreachable!("reads are not executed as writes"),
        };
        let created_at = existing.as_ref().map_or(self.now(), |r| r.created_at);
        let op = Some(OpRef { op: req.op, client: req.client, session: req.session });
        let upd = self.sequence(head, app, req.key.clone(), change, op, created_at, lifetime);
        if self.apply_local(head, &upd).is_none() {
            return;
        }
        if matches!(upd.change, Change::Put { .. }) && self.apps[&app].cr.is_some() && chain.len() > 1 {
            let state = match &upd.change {
                Change::Put { state, .. } => state.clone(),
                _ => None,
            };
            let ev = Ev::Hint { app, epoch: chain.epoch, key: upd.key.clone(), seq: upd.seq, state };
            self.send(head, chain.tail(), ev);
        }
        self.after_apply(head, upd);
    }

    /// Assigns the next sequence number of `app` for an update made at
    /// the head.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn sequence(
        &mut self,
        head: NodeId,
        app: AppId,
        key: String,
        change: Change,
        op: Option<OpRef>,
        created_at: u64,
        lifetime: crate::store::LifetimePolicy,
    ) -> Update {
        let epoch = self.chain(app).expect("live chain").epoch;
        let a = self.app_mut(app);
        a.last_seq += 1;
        let seq = a.last_seq;
        let prev = self.replica_mut(head, app).applied;
        Update { app, epoch, seq, prev, key, change, op, created_at, lifetime }
    }

    /// Applies `u` to the local store and traces it. Returns the resulting
    /// version, or `None` when the store refused the write.
    pub(crate) fn apply_local(&mut self, n: NodeId, u: &Update) -> Option<u64> {
        let okey = ObjectKey::new(u.app, u.key.clone());
        let now = self.now();
        let store = &mut self.node_mut(n).store;
        let ver = match &u.change {
            Change::Put { value, state } => {
                let meta =
                    WriteMeta { now, created_at: Some(u.created_at), state: state.clone(), lifetime: u.lifetime };
                match store.apply_write(&okey, value.clone(), meta) {
                    Ok(v) => v,
                    Err(e) => {
                        let r = self
                            .rec(Some(n), "warn")
                            .with("app", u.app)
                            .with("what", "apply")
                            .with("detail", e.to_string().replace(' ', "_"));
                        self.log(r);
                        return None;
                    }
                }
            }
            Change::Del | Change::Gc => store.remove(&okey).map_or(0, |r| r.version),
        };
        self.trace_apply(n, u, ver, "chain");
        Some(ver)
    }

    pub(crate) fn trace_apply(&mut self, n: NodeId, u: &Update, ver: u64, via: &str) {
        let (created, life, val, state) = match &u.change {
            Change::Put { value, state } => {
                (u.created_at.to_string(), u.lifetime.to_string(), hex(value), state_hex(state))
            }
            _ => ("-".to_owned(), "-".to_owned(), "-".to_owned(), "-".to_owned()),
        };
        let r = self
            .rec(Some(n), "chain_apply")
            .with("app", u.app)
            .with("key", &u.key)
            .with("seq", u.seq)
            .with("epoch", u.epoch)
            .with("kind", u.change.as_str())
            .with("ver", ver)
            .with("op", u.op.map_or_else(|| "-".to_owned(), |o| o.op.to_string()))
            .with("via", via)
            .with("created", created)
            .with("life", life)
            .with("val", val)
            .with("state", state);
        self.log(r);
    }

    /// Bookkeeping after `n` applied `u`: commit at the tail, otherwise
    /// remember and forward.
    pub(crate) fn after_apply(&mut self, n: NodeId, u: Update) {
        let app = u.app;
        let chain = self.chain(app).expect("live chain").clone();
        let rep = self.replica_mut(n, app);
        rep.applied = u.seq;
        if rep.hints.get(&u.key).is_some_and(|(s, _)| *s <= u.seq) {
            rep.hints.remove(&u.key);
        }
        if !matches!(u.change, Change::Put { .. }) {
            rep.notices.remove(&u.key);
        }
        let key = u.key.clone();
        if chain.tail() == n {
            self.commit(n, &u);
            if let Some(p) = chain.predecessor(n) {
                self.send(n, p, Ev::Ack { app, epoch: chain.epoch, seq: u.seq });
            }
        } else {
            let succ = chain.successor(n).expect("not the tail");
            let fwd = u.clone();
            self.replica_mut(n, app).pending.insert(u.seq, u);
            self.send(n, succ, Ev::Update(fwd));
        }
        self.recheck(n, app, &key, Recheck::WriteApplied);
    }

    /// `u` is committed: it reached the tail `n`.
    pub(crate) fn commit(&mut self, n: NodeId, u: &Update) {
        let rep = self.replica_mut(n, u.app);
        rep.committed = rep.committed.max(u.seq);
        if let Some(op) = u.op {
            let ver = self.nodes[&n].store.get(&ObjectKey::new(u.app, u.key.clone())).map_or(0, |r| r.version);
            let (ev, ver) = match u.change {
                Change::Put { .. } => ("put_ack", ver),
                Change::Del => ("del_ack", 0),
                Change::Gc => unreachable!("gc updates carry no op"),
            };
            self.summary.acked += 1;
            let r = self
                .rec(Some(n), ev)
                .with("app", u.app)
                .with("key", &u.key)
                .with("op", op.op)
                .with("client", op.client)
                .with("session", op.session)
                .with("ver", ver)
                .with("seq", u.seq);
            self.log(r);
            self.reply(n, op.client, op.op);
        }
        if self.chain(u.app).is_some_and(|c| c.head() == n) {
            self.head_committed(n, u);
        }
        self.check_drain(u.app);
    }

    /// The head learned that `u` is committed.
    pub(crate) fn head_committed(&mut self, head: NodeId, u: &Update) {
        if !matches!(u.change, Change::Put { .. }) || u.lifetime.kind != LifetimeKind::WriteOnce {
            return;
        }
        let now = self.now();
        if self.node_mut(head).store.mark_due(&ObjectKey::new(u.app, u.key.clone()), now) {
            self.gc_at_head(u.app, false);
        }
    }

    fn stale(&mut self, n: NodeId, app: AppId, msg: &str, epoch: u64) {
        let cur = self.chain(app).map_or(self.apps[&app].epoch, |c| c.epoch);
        let r = self.rec(Some(n), "stale").with("app", app).with("msg", msg).with("epoch", epoch).with("current", cur);
        self.log(r);
    }

    /// Whether a chain message for `app` at `epoch` may be processed at `n`.
    fn current(&mut self, n: NodeId, app: AppId, epoch: u64, msg: &str) -> bool {
        let ok = self.chain(app).is_some_and(|c| c.epoch == epoch && c.contains(n));
        if !ok {
            self.stale(n, app, msg, epoch);
        }
        ok
    }

    pub(crate) fn on_update(&mut self, n: NodeId, u: Update) {
        if !self.current(n, u.app, u.epoch, "update") {
            return;
        }
        let app = u.app;
        let chain = self.chain(app).expect("checked").clone();
        let rep = self.replica_mut(n, app);
        if u.seq <= rep.applied {
            let committed = rep.committed;
            if chain.tail() == n {
                if let Some(p) = chain.predecessor(n) {
                    self.send(n, p, Ev::Ack { app, epoch: chain.epoch, seq: committed });
                }
            }
            return;
        }
        if u.prev != rep.applied {
            rep.parked.insert(u.prev, u);
            return;
        }
        let mut next = Some(u);
        while let Some(u) = next {
            if self.apply_local(n, &u).is_none() {
                return;
            }
            let seq = u.seq;
            self.after_apply(n, u);
            if self.chain(app).is_none_or(|c| c.epoch != chain.epoch) {
                return;
            }
            next = self.replica_mut(n, app).parked.remove(&seq);
        }
    }

    pub(crate) fn on_ack(&mut self, n: NodeId, app: AppId, epoch: u64, seq: u64) {
        if !self.current(n, app, epoch, "ack") {
            return;
        }
        let chain = self.chain(app).expect("checked").clone();
        let rep = self.replica_mut(n, app);
        rep.committed = rep.committed.max(seq);
        let done: Vec<u64> = rep.pending.range(..=seq).map(|(s, _)| *s).collect();
        let done: Vec<Update> = done.into_iter().filter_map(|s| rep.pending.remove(&s)).collect();
        if chain.head() == n {
            for u in &done {
                self.head_committed(n, u);
            }
        }
        if let Some(p) = chain.predecessor(n) {
            self.send(n, p, Ev::Ack { app, epoch, seq });
        }
        self.check_drain(app);
    }

    pub(crate) fn on_hint(&mut self, n: NodeId, app: AppId, epoch: u64, key: String, seq: u64, state: Option<Vec<u8>>) {
        if !self.current(n, app, epoch, "hint") {
            return;
        }
        let rep = self.replica_mut(n, app);
        if seq > rep.applied && rep.hints.get(&key).is_none_or(|(s, _)| *s < seq) {
            rep.hints.insert(key.clone(), (seq, state));
            self.recheck(n, app, &key, Recheck::WriteApplied);
        }
    }

    fn serve_read(&mut self, n: NodeId, req: &Request) {
        let okey = ObjectKey::new(req.app, req.key.clone());
        let now = self.now();
        let got = self.node_mut(n).store.read(&okey, now);
        match got {
            Ok((value, ver)) => {
                self.summary.acked += 1;
                let r = self
                    .rec(Some(n), "get_ok")
                    .with("app", req.app)
                    .with("key", &req.key)
                    .with("op", req.op)
                    .with("client", req.client)
                    .with("session", req.session)
                    .with("ver", ver)
                    .with("val", hex(&value));
                self.log(r);
                let read_once =
                    self.nodes[&n].store.get(&okey).is_some_and(|r| r.lifetime.kind == LifetimeKind::ReadOnce);
                if read_once {
                    self.note_read_once(n, req.app, &req.key);
                }
                let extra = [(field::TRG_KEY_HASH, key_hash(&req.key)), (field::TRG_VERSION, ver)];
                self.eval_triggers(AttachPoint::PostRead, n, None, Some(req.app), &extra);
            }
            Err(_) => {
                let r = self
                    .rec(Some(n), "get_notfound")
                    .with("app", req.app)
                    .with("key", &req.key)
                    .with("op", req.op)
                    .with("client", req.client)
                    .with("session", req.session);
                self.log(r);
            }
        }
        self.reply(n, req.client, req.op);
    }

    /// A read-once object was read at tail `n`; the head schedules its
    /// deletion.
    fn note_read_once(&mut self, n: NodeId, app: AppId, key: &str) {
        let chain = self.chain(app).expect("live chain").clone();
        if chain.head() == n {
            self.read_once_at_head(n, app, key);
            return;
        }
        let now = self.now();
        self.replica_mut(n, app).notices.insert(key.to_owned(), now);
        self.send(n, chain.head(), Ev::ReadNotice { app, epoch: chain.epoch, key: key.to_owned() });
    }

    pub(crate) fn on_read_notice(&mut self, n: NodeId, app: AppId, epoch: u64, key: String) {
        if !self.current(n, app, epoch, "read_notice") {
            return;
        }
        if self.chain(app).is_some_and(|c| c.head() == n) {
            self.read_once_at_head(n, app, &key);
        }
    }

    fn read_once_at_head(&mut self, head: NodeId, app: AppId, key: &str) {
        let okey = ObjectKey::new(app, key.to_owned());
        let now = self.now();
        let store = &mut self.node_mut(head).store;
        let is_read_once = store.get(&okey).is_some_and(|r| r.lifetime.kind == LifetimeKind::ReadOnce);
        if is_read_once && store.mark_due(&okey, now) {
            self.gc_at_head(app, false);
        }
    }

    fn serve_compute(&mut self, n: NodeId, req: &Request) {
        let okey = ObjectKey::new(req.app, req.key.clone());
        let Some(rec) = self.nodes[&n].store.get(&okey).cloned() else {
            self.reject(Some(n), req, "notfound");
            return;
        };
        let stages = self.apps[&req.app].compute.clone();
        if stages.is_empty() {
            self.reject(Some(n), req, "no_compute");
            return;
        }
        let map_key = (req.app, HookKind::Compute);
        let mut env = HelperEnv {
            object: rec.value.clone(),
            map: self.node_mut(n).maps.remove(&map_key).unwrap_or_default(),
            now_ns: self.now(),
            ..Default::default()
        };
        env.ctx.insert(field::CMP_VERSION, rec.version);
        env.ctx.insert(field::CMP_KEY_HASH, key_hash(&req.key));
        let res = run_pipeline(&stages, &mut env);
        self.node_mut(n).maps.insert(map_key, env.map);
        match res.r0() {
            Some(r0) => {
                self.summary.acked += 1;
                let r = self
                    .rec(Some(n), "compute_ok")
                    .with("app", req.app)
                    .with("key", &req.key)
                    .with("op", req.op)
                    .with("client", req.client)
                    .with("ver", rec.version)
                    .with("r0", r0)
                    .with("out", hex(&res.output_bytes));
                self.log(r);
                self.reply(n, req.client, req.op);
            }
            None => {
                let reason = format!("trap:{}", res.trap().expect("trapped").as_str());
                self.reject(Some(n), req, &reason);
            }
        }
    }

    /// Resends unacknowledged updates and read notices.
    pub(crate) fn retransmit(&mut self) {
        let apps: Vec<AppId> = self.apps.keys().copied().collect();
        for app in apps {
            let Some(chain) = self.chain(app).cloned() else { continue };
            for &n in chain.nodes() {
                if !self.sim.is_up(n) {
                    continue;
                }
                let rep = self.replica_mut(n, app);
                let pending: Vec<Update> = rep.pending.values().cloned().collect();
                let notices: Vec<String> = rep.notices.keys().cloned().collect();
                if let Some(succ) = chain.successor(n) {
                    for mut u in pending {
                        u.epoch = chain.epoch;
                        self.send(n, succ, Ev::Update(u));
                    }
                }
                if chain.head() != n {
                    for key in notices {
                        self.send(n, chain.head(), Ev::ReadNotice { app, epoch: chain.epoch, key });
                    }
                }
            }
        }
    }

    /// Resends `p`'s pending updates to its successor right away, after the
    /// chain changed under it.
    pub(crate) fn resend_pending(&mut self, p: NodeId, app: AppId) {
        let Some(chain) = self.chain(app).cloned() else { return };
        let Some(succ) = chain.successor(p) else { return };
        if !self.sim.is_up(p) {
            return;
        }
        let pending: Vec<Update> = self.replica_mut(p, app).pending.values().cloned().collect();
        for mut u in pending {
            u.epoch = chain.epoch;
            self.send(p, succ, Ev::Update(u));
        }
    }
}
