//! Acceptance run: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{chain_batch, eol_workload, gc_workload, migration, run_text, two_writer, unreplicated, Run};
use gryphon::appcode::{run, verify};
use gryphon::harness::{render_trace, run_scenario, Scenario, TraceRecord};
use gryphon::store::{LifetimeKind, LifetimePolicy};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

fn field<'a>(r: &'a TraceRecord, k: &str) -> &'a str {
    r.get(k).unwrap_or_else(|| panic!("`{}` without `{k}`", r.ev))
}

fn num(r: &TraceRecord, k: &str) -> u64 {
    field(r, k).parse().unwrap_or_else(|_| panic!("`{}` has non-numeric `{k}`", r.ev))
}

fn okey(r: &TraceRecord) -> (u64, String) {
    (num(r, "app"), field(r, "key").to_owned())
}

fn require_checks(run: &Run, names: &[&str]) -> Result<(), String> {
    for n in names {
        let res = run.report.get(n).ok_or_else(|| format!("{n} missing from report"))?;
        if let Some(v) = &res.violation {
            return Err(format!("seed {}: {n}: {} (line {})", run.sc.sim.seed, v.msg, v.line));
        }
    }
    if !run.report.passed() {
        return Err(format!("seed {}: {}", run.sc.sim.seed, run.failures()));
    }
    Ok(())
}

fn within(start: Instant, budget: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    if took <= budget {
        Ok(took)
    } else {
        Err(format!("took {took:?}, budget {budget:?}"))
    }
}

fn vm_conformance() -> Verdict {
    let start = Instant::now();
    let (ok, bad, failures) = common::vm::run_corpus();
    if ok < 40 || bad < 20 {
        return Err(format!("corpus too small: {ok} conformance, {bad} malformed"));
    }
    if let Some(f) = failures.first() {
        return Err(f.clone());
    }
    let took = within(start, Duration::from_secs(1))?;
    Ok(format!("{ok} conformance + {bad} malformed fixtures in {took:?}"))
}

fn termination_fuzz() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let (mut verified, mut executed_steps) = (0u64, 0u64);
    for i in 0..10_000 {
        let prog = common::fuzz::program(&mut rng);
        let Ok(vp) = verify(&prog) else { continue };
        verified += 1;
        for _ in 0..3 {
            let mut env = common::fuzz::env(&mut rng);
            let res = run(&vp, &mut env);
            if res.steps > vp.max_steps() || res.steps > prog.len() {
                return Err(format!("program {i} ran {} steps, length {}", res.steps, prog.len()));
            }
            executed_steps += res.steps as u64;
        }
    }
    if verified < 1000 {
        return Err(format!("only {verified} of 10000 programs verified"));
    }
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!("10000 programs, {verified} verified and run 3x ({executed_steps} steps) in {took:?}"))
}

fn chain_safety() -> Verdict {
    let start = Instant::now();
    let mut acked = 0;
    for seed in 1..=10 {
        let run = run_text(&chain_batch(seed));
        require_checks(&run, &["ack_durability", "version_monotonicity", "epoch_safety"])?;
        if run.out.summary.ops_issued != 1000 {
            return Err(format!("seed {seed}: {} ops", run.out.summary.ops_issued));
        }
        let crash = run.events("crash").next().ok_or(format!("seed {seed}: no crash"))?;
        let tail = run
            .events("reconfig")
            .take_while(|r| r.t <= crash.t)
            .last()
            .and_then(|r| field(r, "chain").rsplit(',').next().map(str::to_owned));
        if crash.node.map(|n| n.0.to_string()) == tail {
            return Err(format!("seed {seed}: crashed node is the tail"));
        }
        if run.events("partition").count() < 2 {
            return Err(format!("seed {seed}: partitions not injected"));
        }
        acked += run.out.summary.acked;
    }
    let took = within(start, Duration::from_secs(60))?;
    Ok(format!("10 seeds x 1000 ops, {acked} acks, all invariants hold, {took:?}"))
}

/// Independent admission oracle: replays each node's stored consistency
/// state from `chain_apply` and recomputes every write admission.
fn replay_admissions(run: &Run, model: &str) -> Result<u64, String> {
    let mut state: BTreeMap<(u64, u64, String), Vec<u8>> = BTreeMap::new();
    let mut n = 0;
    for r in &run.out.trace {
        let node = r.node.map(|n| n.0).unwrap_or(0);
        match r.ev.as_str() {
            "chain_apply" => {
                let (app, key) = okey(r);
                let st = field(r, "state");
                if field(r, "kind") == "put" && st != "-" {
                    state.insert((node, app, key), hex::decode(&st[2..]).unwrap());
                } else {
                    state.remove(&(node, app, key));
                }
            }
            "evict" | "erase" => {
                let app = num(r, "app");
                state.retain(|(nd, a, k), _| !(*nd == node && *a == app && r.get("key").is_none_or(|x| x == k)));
            }
            "admit" if field(r, "kind") == "write" => {
                let (app, key) = okey(r);
                let stored = state.get(&(node, app, key.clone()));
                let seen = match field(r, "state") {
                    "-" => None,
                    h => Some(hex::decode(&h[2..]).unwrap()),
                };
                if seen.as_ref() != stored {
                    return Err(format!("t={} {key}: program saw state {seen:?}, node stores {stored:?}", r.t));
                }
                let (ts, writer) = (num(r, "ts"), num(r, "writer"));
                let (accept, new) = match model {
                    "lww" => {
                        let newer = match stored {
                            Some(s) if s.len() >= 16 => {
                                let sts = u64::from_le_bytes(s[0..8].try_into().unwrap());
                                let sw = u64::from_le_bytes(s[8..16].try_into().unwrap());
                                ts > sts || (ts == sts && writer > sw)
                            }
                            _ => true,
                        };
                        let mut st = ts.to_le_bytes().to_vec();
                        st.extend(writer.to_le_bytes());
                        (newer, newer.then_some(st))
                    }
                    _ => (stored.is_none(), stored.is_none().then(|| 1u64.to_le_bytes().to_vec())),
                };
                let got_new = match field(r, "new") {
                    "-" => None,
                    h => Some(hex::decode(&h[2..]).unwrap()),
                };
                let verdict = if accept { "accept" } else { "reject" };
                if field(r, "verdict") != verdict || got_new != new {
                    return Err(format!(
                        "t={} {key}: trace {} {:?}, oracle {verdict} {new:?}",
                        r.t,
                        field(r, "verdict"),
                        got_new
                    ));
                }
                n += 1;
            }
            _ => {}
        }
    }
    Ok(n)
}

fn consistency_models() -> Verdict {
    let mut decisions = 0;
    let mut rejects = 0;
    let mut holds = 0;
    for model in ["lww", "fww", "rmw"] {
        let name = match model {
            "lww" => "lww_convergence",
            "fww" => "fww_immutability",
            _ => "rmw_session",
        };
        for seed in 1..=10 {
            let run = run_text(&two_writer(model, seed));
            require_checks(&run, &[name])?;
            let ops = run.out.summary.ops_issued;
            if ops < 200 {
                return Err(format!("{model} seed {seed}: {ops} ops"));
            }
            if run.report.get(name).is_none_or(|r| r.checked == 0) {
                return Err(format!("{model} seed {seed}: {name} checked nothing"));
            }
            if model != "rmw" {
                decisions += replay_admissions(&run, model).map_err(|e| format!("{model} seed {seed}: {e}"))?;
            }
            rejects += run.out.summary.rejected;
            holds += run.out.summary.held;
        }
    }
    Ok(format!("30 runs; {decisions} LWW/FWW admissions match the oracle exactly; {rejects} rejects, {holds} holds"))
}

fn default_no_replication() -> Verdict {
    let mut chains = 0;
    for v in 0..5 {
        let run = run_text(&unreplicated(v));
        require_checks(&run, &["default_placement"])?;
        for r in run.events("reconfig").chain(run.events("final_chain")) {
            let c = field(r, "chain");
            if c.contains(',') {
                return Err(format!("variant {v}: chain {c} at t={}", r.t));
            }
            chains += 1;
        }
    }
    Ok(format!("5 scenarios, {chains} chain records, all of length 1"))
}

struct Tracked {
    created: u64,
    since: u64,
    life: LifetimePolicy,
    first_read: Option<u64>,
}

fn gc_timing() -> Verdict {
    let (mut ttl, mut once) = (0, 0);
    for seed in 1..=5 {
        let run = run_text(&gc_workload(seed));
        require_checks(&run, &["gc_safety"])?;
        let gi = run.sc.sim.gc_interval;
        let heads: BTreeMap<u64, u64> = run
            .events("reconfig")
            .map(|r| (num(r, "app"), field(r, "chain").split(',').next().unwrap().parse().unwrap()))
            .collect();
        let mut live: BTreeMap<(u64, String), Tracked> = BTreeMap::new();
        let check_deadlines = |live: &BTreeMap<(u64, String), Tracked>, now: u64| -> Result<(), String> {
            for ((a, k), o) in live {
                let deadline = match o.life.kind {
                    LifetimeKind::Ttl(d) => (o.created + d).max(o.since) + gi,
                    LifetimeKind::ReadOnce => match o.first_read {
                        Some(fr) => fr + gi,
                        None => continue,
                    },
                    _ => continue,
                };
                if now > deadline {
                    return Err(format!("seed {seed}: {a}/{k} still present at t={now}, deadline {deadline}"));
                }
            }
            Ok(())
        };
        for r in &run.out.trace {
            check_deadlines(&live, r.t)?;
            let head = |a: u64| heads.get(&a).copied() == r.node.map(|n| n.0);
            match r.ev.as_str() {
                "chain_apply" if head(num(r, "app")) => {
                    let k = okey(r);
                    if field(r, "kind") != "put" {
                        live.remove(&k);
                        continue;
                    }
                    let life: LifetimePolicy = field(r, "life").parse().unwrap();
                    let created = num(r, "created");
                    match live.get_mut(&k) {
                        Some(o) if o.life == life => o.created = created,
                        _ => {
                            live.insert(k, Tracked { created, since: r.t, life, first_read: None });
                        }
                    }
                }
                "get_ok" => {
                    if let Some(o) = live.get_mut(&okey(r)) {
                        o.first_read.get_or_insert(r.t);
                    }
                }
                "gc_delete" => {
                    let o = live.remove(&okey(r)).ok_or(format!("seed {seed}: gc of untracked object at t={}", r.t))?;
                    match o.life.kind {
                        LifetimeKind::Ttl(d) => {
                            if r.t < o.created + d {
                                return Err(format!("seed {seed}: ttl object deleted early at t={}", r.t));
                            }
                            ttl += 1;
                        }
                        LifetimeKind::ReadOnce => {
                            if o.first_read.is_none_or(|fr| fr > r.t) {
                                return Err(format!("seed {seed}: read-once object deleted unread at t={}", r.t));
                            }
                            once += 1;
                        }
                        _ => return Err(format!("seed {seed}: {:?} object collected", o.life.kind)),
                    }
                }
                _ => {}
            }
        }
    }
    if ttl == 0 || once == 0 {
        return Err(format!("workload collected {ttl} ttl and {once} read-once objects"));
    }
    Ok(format!("{ttl} ttl deletions within expiry + gc interval, {once} read-once deletions by the next tick"))
}

fn end_of_life() -> Verdict {
    let mut summary = String::new();
    for seed in 1..=3 {
        let run = run_text(&eol_workload(seed));
        require_checks(&run, &["eol_safety", "ack_durability"])?;
        let on_one: BTreeSet<(u64, String)> = run
            .events("chain_apply")
            .filter(|r| r.node.is_some_and(|n| n.0 == 1) && field(r, "kind") == "put")
            .map(okey)
            .collect();
        let chains_with_one = run
            .events("reconfig")
            .filter(|r| field(r, "epoch") == "1" && field(r, "chain").split(',').any(|n| n == "1"))
            .count();
        if on_one.len() != 50 || chains_with_one != 10 {
            return Err(format!("seed {seed}: node 1 held {} objects in {chains_with_one} chains", on_one.len()));
        }
        let notices: Vec<_> = run.events("provider_notice").collect();
        if notices.len() != 1 || notices[0].node.map(|n| n.0) != Some(1) {
            return Err(format!("seed {seed}: {} provider notices", notices.len()));
        }
        let erased: BTreeSet<(u64, String)> =
            run.events("erase").filter(|r| r.node.is_some_and(|n| n.0 == 1)).map(okey).collect();
        if erased != on_one || num(notices[0], "erased") != 50 {
            return Err(format!("seed {seed}: erased {} of {} objects", erased.len(), on_one.len()));
        }
        if run.out.trace.iter().any(|r| r.ev == "final" && r.node.is_some_and(|n| n.0 == 1)) {
            return Err(format!("seed {seed}: objects remain on node 1"));
        }
        let acked: BTreeMap<(u64, String), u64> = run.events("put_ack").map(|r| (okey(r), num(r, "ver"))).collect();
        let served: BTreeMap<(u64, String), u64> =
            run.events("get_ok").filter(|r| r.t > notices[0].t).map(|r| (okey(r), num(r, "ver"))).collect();
        if acked.len() != 50 || served != acked {
            return Err(format!("seed {seed}: {} acked, {} readable after erase", acked.len(), served.len()));
        }
        summary = "50 objects in 10 chains moved off node 1, 0 lost, 50 erased, 1 provider notice (3 seeds)".to_owned();
    }
    Ok(summary)
}

fn migration_atomicity() -> Verdict {
    let (mut switched, mut aborted, mut verified_keys) = (0, 0, 0);
    for seed in 1..=10 {
        let run = run_text(&migration(seed, false));
        require_checks(&run, &["migration_atomicity", "order_preservation", "ack_durability"])?;
        let sw = run.events("migrate_switch").next().ok_or(format!("seed {seed}: no switch"))?;
        if field(sw, "from") != "1" || field(sw, "to") != "3" {
            return Err(format!("seed {seed}: moved {} -> {}", field(sw, "from"), field(sw, "to")));
        }
        let mut acked: BTreeMap<String, u64> = BTreeMap::new();
        for r in run.events("put_ack").filter(|r| r.t <= sw.t) {
            acked.insert(field(r, "key").to_owned(), num(r, "ver"));
        }
        let mut at_b: BTreeMap<String, u64> = BTreeMap::new();
        for r in run.out.trace.iter().filter(|r| r.t <= sw.t && r.node.is_some_and(|n| n.0 == 3)) {
            if r.ev == "chain_apply" {
                at_b.insert(field(r, "key").to_owned(), num(r, "ver"));
            }
        }
        for (k, v) in &acked {
            if at_b.get(k).is_none_or(|b| b < v) {
                return Err(format!("seed {seed}: acked {k} v{v} not at node 3 on switch"));
            }
        }
        verified_keys += acked.len();
        switched += 1;

        let run = run_text(&migration(seed, true));
        require_checks(&run, &["migration_atomicity", "ack_durability"])?;
        let trace = &run.out.trace;
        let abort_at = trace.iter().position(|r| r.ev == "migrate_abort").ok_or(format!("seed {seed}: no abort"))?;
        let ab = &trace[abort_at];
        if field(ab, "reason") != "copy_timeout" {
            return Err(format!("seed {seed}: aborted for {}", field(ab, "reason")));
        }
        let versions_before = |end: usize| -> BTreeMap<String, u64> {
            let mut m = BTreeMap::new();
            for r in trace[..end].iter().filter(|r| r.node.is_some_and(|n| n.0 == 1) && r.ev == "chain_apply") {
                if field(r, "kind") == "put" {
                    m.insert(field(r, "key").to_owned(), num(r, "ver"));
                } else {
                    m.remove(field(r, "key"));
                }
            }
            m
        };
        let begin = trace.iter().position(|r| r.ev == "freeze").ok_or(format!("seed {seed}: no freeze"))?;
        if versions_before(begin) != versions_before(abort_at) || run.events("migrate_switch").next().is_some() {
            return Err(format!("seed {seed}: abort changed the key-version map"));
        }
        aborted += 1;
    }
    Ok(format!(
        "{switched} switches ({verified_keys} acked keys present at B), {aborted} copy-timeout aborts with maps intact"
    ))
}

fn fixture_scenarios() -> Vec<(String, Scenario, std::path::PathBuf)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scenarios");
    let mut out = Vec::new();
    let mut paths: Vec<_> = std::fs::read_dir(&dir).expect("scenario dir").map(|e| e.unwrap().path()).collect();
    paths.sort();
    for p in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "scn")) {
        let sc = Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), sc, dir.clone()));
    }
    out
}

fn determinism() -> Verdict {
    let mut scenarios = fixture_scenarios();
    for (name, text) in [
        ("chain_batch", chain_batch(1)),
        ("lww", two_writer("lww", 1)),
        ("migration", migration(1, false)),
        ("gc", gc_workload(1)),
        ("eol", eol_workload(1)),
    ] {
        scenarios.push((name.into(), Scenario::parse(&text).unwrap(), ".".into()));
    }
    let mut differing = Vec::new();
    for (name, sc, dir) in &scenarios {
        let a = render_trace(&run_scenario(sc, dir).map_err(|e| format!("{name}: {e}"))?.trace);
        let b = render_trace(&run_scenario(sc, dir).map_err(|e| format!("{name}: {e}"))?.trace);
        if a != b {
            return Err(format!("{name}: two runs with seed {} differ", sc.sim.seed));
        }
        if !sc.faults.is_empty() {
            let mut other = sc.clone();
            other.sim.seed = sc.sim.seed.wrapping_add(1);
            let c = render_trace(&run_scenario(&other, dir).map_err(|e| format!("{name}: {e}"))?.trace);
            if c != a {
                differing.push(name.clone());
            }
        }
    }
    if differing.is_empty() {
        return Err("no fault-bearing scenario changes with the seed".into());
    }
    Ok(format!(
        "{} scenarios byte-identical across reruns; seed changes {} fault-bearing traces",
        scenarios.len(),
        differing.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 vm conformance", vm_conformance),
        ("2 termination fuzz", termination_fuzz),
        ("3 chain safety batch", chain_safety),
        ("4 consistency models", consistency_models),
        ("5 default no replication", default_no_replication),
        ("6 gc timing", gc_timing),
        ("7 end of life", end_of_life),
        ("8 migration atomicity", migration_atomicity),
        ("9 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        match std::panic::catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS criterion {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
