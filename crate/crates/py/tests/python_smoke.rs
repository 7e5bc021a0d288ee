//! Runs python/smoke_test.py against the library built for this test.

use std::path::{Path, PathBuf};
use std::process::Command;

fn built_library() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let profile_dir = exe.parent()?.parent()?;
    let lib = profile_dir.join("libtode.so");
    lib.exists().then_some(lib)
}

#[test]
fn python_smoke_script() {
    let Some(lib) = built_library() else {
        eprintln!("skipping: libtode.so was not built for this platform");
        return;
    };
    if Command::new("python3").arg("--version").output().is_err() {
        eprintln!("skipping: python3 not available");
        return;
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new("python3").arg(&script).arg("--lib").arg(&lib).output().expect("run python3");
    let stdout = String::from_utf8_lossy(&out.stdout);
    println!("{stdout}");
    assert!(out.status.success(), "smoke test failed:\n{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("all smoke checks passed"));
}
