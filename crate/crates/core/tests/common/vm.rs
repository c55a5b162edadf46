//! Fixture runner for the `.gasm` conformance corpus. Each file carries its
//! inputs and expected outcome in `; key value` header comments.

use std::path::{Path, PathBuf};

use gryphon::appcode::{assemble, load, run, verify, HelperEnv, Outcome};
use gryphon::chain::NodeView;
use gryphon::ids::NodeId;

pub fn fixtures(kind: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/vm").join(kind);
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .expect("fixture dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "gasm"))
        .collect();
    v.sort();
    v
}

fn header(text: &str) -> Vec<(&str, &str)> {
    text.lines()
        .filter_map(|l| l.strip_prefix("; "))
        .filter_map(|l| l.split_once(' '))
        .filter(|(k, _)| matches!(*k, "ctx" | "object" | "state" | "nodes" | "now" | "expect"))
        .collect()
}

fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s.trim_start_matches("0x")).expect("hex in fixture header")
}

fn node_view(spec: &str) -> NodeView {
    let mut parts = spec.split(':');
    let mut v = NodeView::new(NodeId(parts.next().unwrap().parse().unwrap()));
    for kv in parts {
        let (k, val) = kv.split_once('=').unwrap();
        let val: u64 = val.parse().unwrap();
        match k {
            "free" => v.free_bytes = val,
            "load" => v.load_milli = val,
            "wear" => v.wear_milli = val,
            other => panic!("unknown node field {other}"),
        }
    }
    v
}

fn env_for(hdr: &[(&str, &str)]) -> HelperEnv {
    let mut env = HelperEnv::new();
    for (k, v) in hdr {
        match *k {
            "ctx" => {
                for kv in v.split_whitespace() {
                    let (id, val) = kv.split_once('=').unwrap();
                    env.ctx.insert(id.parse().unwrap(), val.parse().unwrap());
                }
            }
            "object" => env.object = unhex(v),
            "state" if *v == "none" => env.state = None,
            "state" => env.state = Some(unhex(v)),
            "nodes" => env.nodes = v.split(',').map(node_view).collect(),
            "now" => env.now_ns = v.parse().unwrap(),
            _ => {}
        }
    }
    env
}

pub fn run_ok_fixture(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).unwrap();
    let hdr = header(&text);
    let vp = load(&text).map_err(|e| format!("does not load: {e}"))?;
    let mut env = env_for(&hdr);
    let res = run(&vp, &mut env);
    if res.steps > vp.max_steps() {
        return Err(format!("{} steps exceeds bound {}", res.steps, vp.max_steps()));
    }
    for (_, v) in hdr.iter().filter(|(k, _)| *k == "expect") {
        let (what, want) = v.split_once('=').unwrap();
        let got = match what {
            "r0" => match res.outcome {
                Outcome::Return(r) => r.to_string(),
                Outcome::Trap { code, .. } => format!("trap {code}"),
            },
            "trap" => res.trap().map(|t| t.to_string()).unwrap_or_else(|| "none".into()),
            "state" => res.new_state.as_ref().map(|s| format!("0x{}", hex::encode(s))).unwrap_or_else(|| "none".into()),
            "out" => format!("0x{}", hex::encode(&res.output_bytes)),
            "nodes" => res.output_nodes.iter().map(|n| n.0.to_string()).collect::<Vec<_>>().join(","),
            "log" => res.log_codes.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            other => return Err(format!("unknown expectation {other}")),
        };
        if got != want {
            return Err(format!("{what}: got {got}, want {want}"));
        }
    }
    Ok(())
}

pub fn run_bad_fixture(path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).unwrap();
    let hdr = header(&text);
    let (_, want) = hdr.iter().find(|(k, _)| *k == "expect").ok_or("no expectation")?;
    let (stage, reason) = want.split_once('=').unwrap();
    let got = match (stage, assemble(&text)) {
        ("asm", Err(e)) => format!("{:?}", e.kind),
        ("asm", Ok(_)) => return Err("assembled".into()),
        ("verify", Err(e)) => return Err(format!("did not assemble: {e}")),
        ("verify", Ok(p)) => match verify(&p) {
            Ok(_) => return Err("verified".into()),
            Err(e) => e.reason.to_string(),
        },
        _ => return Err(format!("bad expectation {want}")),
    };
    if got.starts_with(reason) {
        Ok(())
    } else {
        Err(format!("got {got}, want {reason}"))
    }
}

/// Runs the whole corpus; returns (ok count, malformed count, failures).
pub fn run_corpus() -> (usize, usize, Vec<String>) {
    let ok = fixtures("ok");
    let bad = fixtures("bad");
    let mut failures = Vec::new();
    for p in &ok {
        if let Err(e) = run_ok_fixture(p) {
            failures.push(format!("{}: {e}", p.display()));
        }
    }
    for p in &bad {
        if let Err(e) = run_bad_fixture(p) {
            failures.push(format!("{}: {e}", p.display()));
        }
    }
    (ok.len(), bad.len(), failures)
}
