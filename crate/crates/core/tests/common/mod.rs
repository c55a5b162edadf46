//! Scenario generators and run helpers shared by the integration tests.
#![allow(dead_code)]

pub mod fuzz;
pub mod vm;

use std::fmt::Write as _;
use std::path::Path;

use gryphon::cluster::RunOutput;
use gryphon::harness::{check, run_scenario, CheckReport, Scenario, TraceRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Run {
    pub sc: Scenario,
    pub out: RunOutput,
    pub report: CheckReport,
}

impl Run {
    pub fn events<'a>(&'a self, ev: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.out.trace.iter().filter(move |r| r.ev == ev)
    }

    pub fn failures(&self) -> String {
        self.report.failures().map(|r| format!("{r:?}")).collect::<Vec<_>>().join("\n")
    }
}

pub fn run_text(text: &str) -> Run {
    let sc = Scenario::parse(text).unwrap_or_else(|e| panic!("scenario does not parse: {e}\n{text}"));
    let out = run_scenario(&sc, Path::new(".")).expect("scenario runs");
    let report = check(&out.trace, &sc).expect("trace is well formed");
    Run { sc, out, report }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 5 nodes, one 3-replica chain on nodes 1,2,3, 1000 client ops, two
/// partitions inside the chain and a crash of a non-tail member.
pub fn chain_batch(seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    writeln!(s, "sim seed={seed} duration=4s write_timeout=500ms link_jitter_us=300").unwrap();
    writeln!(s, "appcode name=place builtin=place_topk_free").unwrap();
    for i in 1..=5 {
        writeln!(s, "node id={i} capacity=1000000 x={} y=0", i * 10).unwrap();
    }
    writeln!(s, "app id=1 origin=1 replicas=3 placement=place").unwrap();
    writeln!(s, "client id=1 origin=1").unwrap();
    writeln!(s, "client id=2 origin=4").unwrap();
    for k in 0..1000u64 {
        let t = 1000 + k * 3000 + r.gen_range(0..2000);
        let c = r.gen_range(1..=2);
        let key = format!("k{}", r.gen_range(0..20));
        match r.gen_range(0..20) {
            0 => writeln!(s, "op t={t}us client={c} kind=delete app=1 key={key}"),
            1..=10 => writeln!(s, "op t={t}us client={c} kind=put app=1 key={key} size={}", r.gen_range(1..64)),
            _ => writeln!(s, "op t={t}us client={c} kind=get app=1 key={key}"),
        }
        .unwrap();
    }
    let (a, b) = if r.gen_bool(0.5) { (1, 2) } else { (2, 3) };
    writeln!(s, "fault t={}ms kind=partition a={a} b={b} duration=300ms", r.gen_range(300..700)).unwrap();
    writeln!(s, "fault t={}ms kind=partition a=1 b=3 duration=200ms", r.gen_range(900..1300)).unwrap();
    writeln!(s, "fault t={}ms kind=crash node={}", r.gen_range(1600..2200), r.gen_range(1..=2)).unwrap();
    s
}

/// Two writers with skewed clocks racing on a handful of keys.
pub fn two_writer(model: &str, seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    writeln!(s, "sim seed={seed} duration=3s link_jitter_us=800").unwrap();
    writeln!(s, "appcode name=place builtin=place_topk_free").unwrap();
    for i in 1..=3 {
        writeln!(s, "node id={i} capacity=1000000").unwrap();
    }
    writeln!(s, "app id=1 origin=1 replicas=3 placement=place consistency={model}").unwrap();
    writeln!(s, "client id=1 origin=1 latency_us=300").unwrap();
    writeln!(s, "client id=2 origin=3 latency_us=700 skew_us={}", r.gen_range(0..20_000)).unwrap();
    for k in 0..240u64 {
        let t = 1000 + k * 4000 + r.gen_range(0..3000);
        let c = r.gen_range(1..=2);
        let key = format!("k{}", r.gen_range(0..6));
        if r.gen_bool(0.6) {
            writeln!(s, "op t={t}us client={c} kind=put app=1 key={key} size={}", r.gen_range(1..20)).unwrap();
        } else {
            writeln!(s, "op t={t}us client={c} kind=get app=1 key={key}").unwrap();
        }
    }
    s
}

/// Continuous writes while a geo trigger moves the app from node 1 to
/// node 3. With `abort`, node 1 cannot reach node 3 and the copy times out.
pub fn migration(seed: u64, abort: bool) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    writeln!(s, "sim seed={seed} duration=3s copy_timeout=300ms link_latency_us=5000 link_jitter_us=2000").unwrap();
    writeln!(s, "appcode name=mig builtin=mig_nearest").unwrap();
    writeln!(s, "appcode name=geo builtin=trigger_geo").unwrap();
    for (i, x) in [(1, 0), (2, 100), (3, 200)] {
        writeln!(s, "node id={i} capacity=1000000 x={x} y=0").unwrap();
    }
    writeln!(s, "app id=1 origin=1 migration=mig").unwrap();
    writeln!(s, "trigger name=follow source=appcode appcode=geo app=1 scope=app action=migrate").unwrap();
    writeln!(s, "client id=1 origin=1").unwrap();
    for k in 0..400u64 {
        let t = 5000 + k * 5000 + r.gen_range(0..4000);
        let key = format!("k{}", r.gen_range(0..10));
        if r.gen_bool(0.7) {
            writeln!(s, "op t={t}us client=1 kind=put app=1 key={key} size={}", r.gen_range(1..30)).unwrap();
        } else {
            writeln!(s, "op t={t}us client=1 kind=get app=1 key={key}").unwrap();
        }
    }
    let move_at = r.gen_range(900..1100);
    writeln!(s, "op t={move_at}ms client=1 kind=move app=1 x=190 y=0").unwrap();
    if abort {
        writeln!(s, "fault t={move_at}ms kind=partition a=1 b=3 duration=3s").unwrap();
    }
    s
}

/// Fault-free lifetime workload: ttl, read-once and manual objects.
pub fn gc_workload(seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    writeln!(s, "sim seed={seed} duration=3s gc_interval=50ms").unwrap();
    writeln!(s, "appcode name=place builtin=place_topk_free").unwrap();
    for i in 1..=3 {
        writeln!(s, "node id={i} capacity=1000000").unwrap();
    }
    writeln!(s, "app id=1 origin=1 replicas=3 placement=place").unwrap();
    writeln!(s, "app id=2 origin=2").unwrap();
    writeln!(s, "object_policy app=1 prefix=tmp/ lifetime=ttl:200ms").unwrap();
    writeln!(s, "object_policy app=1 prefix=once/ lifetime=read_once").unwrap();
    writeln!(s, "object_policy app=2 prefix=once/ lifetime=read_once/backup").unwrap();
    writeln!(s, "client id=1 origin=1").unwrap();
    for k in 0..300u64 {
        let t = 5000 + k * 7000 + r.gen_range(0..5000);
        let app = r.gen_range(1..=2);
        let key = format!("{}{}", ["tmp/", "once/", "keep/"][r.gen_range(0..3)], r.gen_range(0..8));
        if r.gen_bool(0.55) {
            let life = if app == 2 && key.starts_with("tmp/") { " lifetime=ttl:150ms/backup" } else { "" };
            writeln!(s, "op t={t}us client=1 kind=put app={app} key={key} size=8{life}").unwrap();
        } else {
            writeln!(s, "op t={t}us client=1 kind=get app={app} key={key}").unwrap();
        }
    }
    s
}

/// Ten 3-replica apps all placed on node 1, five objects each, then wear
/// 950 on node 1.
pub fn eol_workload(seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    writeln!(s, "sim seed={seed} duration=2s link_jitter_us=500").unwrap();
    writeln!(s, "appcode name=place builtin=place_nearest").unwrap();
    writeln!(s, "node id=1 capacity=1000000 x=0 y=0").unwrap();
    for i in 2..=6 {
        writeln!(s, "node id={i} capacity=1000000 x={} y={}", r.gen_range(10..100), r.gen_range(0..100)).unwrap();
    }
    for a in 1..=10 {
        writeln!(s, "app id={a} origin=1 replicas=3 placement=place").unwrap();
    }
    writeln!(s, "client id=1 origin=1").unwrap();
    for a in 1..=10 {
        for k in 0..5 {
            writeln!(s, "op t={}ms client=1 kind=put app={a} key=o{k} size={}", 10 + a * 10 + k, r.gen_range(8..64))
                .unwrap();
        }
    }
    writeln!(s, "fault t=500ms kind=wear node=1 milli=950").unwrap();
    for a in 1..=10 {
        for k in 0..5 {
            writeln!(s, "op t={}ms client=1 kind=get app={a} key=o{k}", 1200 + a * 10 + k).unwrap();
        }
    }
    s
}

/// Apps without placement appcode, in assorted shapes.
pub fn unreplicated(variant: u64) -> String {
    let mut s = String::new();
    writeln!(s, "sim seed={variant} duration=2s").unwrap();
    for i in 1..=4 {
        writeln!(s, "node id={i} capacity=1000000 x={} y=0", i * 10).unwrap();
    }
    match variant {
        0 => writeln!(s, "app id=1 origin=1").unwrap(),
        1 => writeln!(s, "app id=1 origin=2 replicas=3").unwrap(),
        2 => {
            writeln!(s, "app id=1 origin=1 consistency=lww").unwrap();
            writeln!(s, "app id=2 origin=3 consistency=fww replicas=2").unwrap();
        }
        3 => {
            writeln!(s, "appcode name=lb builtin=lb_swap_least_loaded").unwrap();
            writeln!(s, "app id=1 origin=4 lb=lb replicas=4").unwrap();
            writeln!(s, "trigger name=hot source=threshold metric=cpu_milli cmp=ge value=0 app=1 action=rebalance")
                .unwrap();
        }
        _ => {
            writeln!(s, "app id=1 origin=1 consistency=rmw").unwrap();
            writeln!(s, "app id=2 origin=2").unwrap();
            writeln!(s, "fault t=500ms kind=crash node=3").unwrap();
        }
    }
    writeln!(s, "client id=1 origin=1").unwrap();
    let apps = if matches!(variant, 2 | 4) { 2 } else { 1 };
    for k in 0..60u64 {
        let app = 1 + k % apps;
        let t = 10 + k * 20;
        writeln!(s, "op t={t}ms client=1 kind=put app={app} key=k{} size=16", k % 7).unwrap();
        writeln!(s, "op t={}ms client=1 kind=get app={app} key=k{}", t + 5, k % 5).unwrap();
    }
    s
}

/// A small scenario drawing on every feature: models, placement, lifetimes,
/// compute, triggers, partitions, crashes and wear.
pub fn random_scenario(seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::new();
    let nodes = r.gen_range(1..=5u64);
    writeln!(
        s,
        "sim seed={seed} duration={}ms write_timeout={}ms copy_timeout={}ms link_jitter_us={}",
        r.gen_range(1000..1500),
        r.gen_range(100..600),
        r.gen_range(50..400),
        r.gen_range(0..1500)
    )
    .unwrap();
    writeln!(s, "appcode name=place builtin=place_topk_free").unwrap();
    writeln!(s, "appcode name=near builtin=place_nearest").unwrap();
    writeln!(s, "appcode name=mig builtin=mig_nearest").unwrap();
    writeln!(s, "appcode name=lb builtin=lb_swap_least_loaded").unwrap();
    writeln!(s, "appcode name=len builtin=compute_len").unwrap();
    for i in 1..=nodes {
        writeln!(
            s,
            "node id={i} capacity={} x={} y={}",
            r.gen_range(2_000..200_000),
            r.gen_range(0..100),
            r.gen_range(0..100)
        )
        .unwrap();
    }
    let apps = r.gen_range(1..=3u64);
    for a in 1..=apps {
        let model = ["none", "lww", "fww", "rmw"][r.gen_range(0..4)];
        let mut line = format!("app id={a} origin={} consistency={model} compute=len", r.gen_range(1..=nodes));
        match r.gen_range(0..4) {
            0 => {}
            1 => line += &format!(" placement=place replicas={}", r.gen_range(1..=nodes)),
            2 => line += &format!(" placement=near replicas={} lb=lb", r.gen_range(1..=nodes)),
            _ => line += " migration=mig",
        }
        writeln!(s, "{line}").unwrap();
        if r.gen_bool(0.5) {
            writeln!(s, "object_policy app={a} prefix=t/ lifetime=ttl:{}ms", r.gen_range(20..300)).unwrap();
        }
        if r.gen_bool(0.5) {
            writeln!(s, "object_policy app={a} prefix=o/ lifetime=read_once").unwrap();
        }
    }
    if r.gen_bool(0.5) {
        writeln!(s, "trigger name=busy source=threshold metric=msgs_in cmp=gt value={} sustain={} app=1 scope=app action=rebalance", r.gen_range(0..20), r.gen_range(1..4))
            .unwrap();
    }
    writeln!(s, "trigger name=go source=manual app=1 action=migrate").unwrap();
    let clients = r.gen_range(1..=3u64);
    for c in 1..=clients {
        writeln!(
            s,
            "client id={c} origin={} latency_us={} skew_us={}",
            r.gen_range(1..=nodes),
            r.gen_range(0..500),
            r.gen_range(0..3000)
        )
        .unwrap();
    }
    let ops = r.gen_range(10..150);
    for _ in 0..ops {
        let t = r.gen_range(1..1000);
        let c = r.gen_range(1..=clients);
        let a = r.gen_range(1..=apps);
        let key = format!("{}{}", ["t/", "o/", "k/"][r.gen_range(0..3)], r.gen_range(0..5));
        match r.gen_range(0..20) {
            0 => writeln!(s, "op t={t}ms client={c} kind=delete app={a} key={key}"),
            1 => writeln!(s, "op t={t}ms client={c} kind=compute app={a} key={key}"),
            2 => {
                writeln!(s, "op t={t}ms client={c} kind=move app=1 x={} y={}", r.gen_range(0..100), r.gen_range(0..100))
            }
            3 => writeln!(s, "op t={t}ms client={c} kind=fire trigger=go"),
            4..=11 => writeln!(s, "op t={t}ms client={c} kind=put app={a} key={key} size={}", r.gen_range(0..200)),
            _ => writeln!(s, "op t={t}ms client={c} kind=get app={a} key={key}"),
        }
        .unwrap();
    }
    for _ in 0..r.gen_range(0..4) {
        let t = r.gen_range(1..1000);
        let n = r.gen_range(1..=nodes);
        match r.gen_range(0..5) {
            0 if nodes > 1 => {
                let m = 1 + (n % nodes);
                writeln!(s, "fault t={t}ms kind=partition a={n} b={m} duration={}ms", r.gen_range(10..400)).unwrap()
            }
            1 => writeln!(s, "fault t={t}ms kind=crash node={n}").unwrap(),
            2 => writeln!(s, "fault t={t}ms kind=restart node={n}").unwrap(),
            3 => writeln!(s, "fault t={t}ms kind=wear node={n} milli={}", r.gen_range(0..1000)).unwrap(),
            _ => {}
        }
    }
    s
}
