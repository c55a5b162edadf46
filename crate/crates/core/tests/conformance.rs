mod common;

use std::time::Instant;

use common::vm::{fixtures, run_corpus};
use gryphon::appcode::{load, LoadError};

#[test]
fn vm_fixtures() {
    let start = Instant::now();
    let (ok, bad, failures) = run_corpus();
    assert!(ok >= 40, "only {ok} conformance fixtures");
    assert!(bad >= 20, "only {bad} malformed fixtures");
    assert!(failures.is_empty(), "{}", failures.join("\n"));
    eprintln!("{ok} + {bad} fixtures in {:?}", start.elapsed());
}

#[test]
fn malformed_programs_never_load() {
    for p in fixtures("bad") {
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(matches!(load(&text), Err(LoadError::Asm(_) | LoadError::Verify(_))), "{}", p.display());
    }
}
