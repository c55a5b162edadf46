use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gryphon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gryphon")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("out.trace");
    let scn = fixture("scenarios/minimal.scn");
    let o = gryphon(&["run", s(&scn), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ops=2 acked=2"));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.contains("ev=put_ack") && text.contains("ev=get_ok"));

    let o = gryphon(&["check", s(&trace), s(&scn)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn dropped_chain_apply_fails_check_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("out.trace");
    let scn = fixture("scenarios/minimal.scn");
    assert_eq!(gryphon(&["run", s(&scn), "--trace", s(&trace)]).status.code(), Some(0));
    let text = std::fs::read_to_string(&trace).unwrap();
    let edited: String = text.lines().filter(|l| !l.contains("ev=chain_apply")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&trace, edited).unwrap();

    let o = gryphon(&["check", s(&trace), s(&scn)]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("FAIL ack_durability")).expect("ack durability fails");
    assert!(line.contains("at line 3"), "{line}");
}

#[test]
fn seed_flag_overrides_scenario_seed() {
    let dir = tempfile::tempdir().unwrap();
    let scn = fixture("scenarios/partition_mid_write.scn");
    let mut traces = Vec::new();
    for (i, seed) in ["5", "5", "6"].iter().enumerate() {
        let t = dir.path().join(format!("{i}.trace"));
        assert_eq!(gryphon(&["run", s(&scn), "--seed", seed, "--trace", s(&t)]).status.code(), Some(0));
        traces.push(std::fs::read(&t).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert_ne!(traces[0], traces[2]);
}

#[test]
fn default_trace_path_sits_next_to_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("mini.scn");
    std::fs::copy(fixture("scenarios/minimal.scn"), &scn).unwrap();
    assert_eq!(gryphon(&["run", s(&scn)]).status.code(), Some(0));
    assert!(dir.path().join("mini.trace").exists());
}

#[test]
fn unverifiable_appcode_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("never.trace");
    let o = gryphon(&["run", s(&fixture("broken/uses_backward.scn")), "--trace", s(&trace)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("BackwardJump"));
    assert!(!trace.exists());

    let o = gryphon(&["asm", s(&fixture("broken/backward.gasm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn asm_reports_verified_programs() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("seven.gasm");
    std::fs::write(&src, ".program seven compute\n    mov r0, 7\n    exit\n").unwrap();
    let o = gryphon(&["asm", s(&src)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "seven: 2 instructions, hook compute, verified");
}

#[test]
fn builtins_written_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("lib");
    assert_eq!(gryphon(&["builtins", s(&out)]).status.code(), Some(0));
    for (name, src) in gryphon::consistency::BUILTIN_FILES {
        assert_eq!(std::fs::read_to_string(out.join(name)).unwrap(), src);
        assert_eq!(gryphon(&["asm", s(&out.join(name))]).status.code(), Some(0));
    }
}

#[test]
fn builtins_into_a_file_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("taken");
    std::fs::write(&file, "").unwrap();
    assert_eq!(gryphon(&["builtins", s(&file)]).status.code(), Some(2));
}

#[test]
fn missing_and_malformed_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gryphon(&["run", s(&dir.path().join("nope.scn"))]).status.code(), Some(2));

    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "node id=1\n").unwrap();
    let o = gryphon(&["run", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let trace = dir.path().join("garbage.trace");
    std::fs::write(&trace, "not a trace\n").unwrap();
    assert_eq!(gryphon(&["check", s(&trace), s(&fixture("scenarios/minimal.scn"))]).status.code(), Some(2));
}
