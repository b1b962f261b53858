//! Compile and run a C program against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "logocaf.h"

int main(void) {
    LgcfModel *m = NULL;
    if (lgcf_model_create_toy(2, 1, 3, 0, &m) != LGCF_STATUS_OK) return 1;
    double hsi[16 * 16 * 2], x[16 * 16], logits[16 * 16 * 3];
    for (int i = 0; i < 16 * 16 * 2; i++) hsi[i] = i % 7 * 0.1;
    for (int i = 0; i < 16 * 16; i++) x[i] = i % 5 * 0.2;
    if (lgcf_model_forward(m, hsi, x, 16, 16, logits, 16 * 16 * 3) != LGCF_STATUS_OK) return 2;
    if (lgcf_model_forward(m, hsi, x, 16, 16, logits, 3) != LGCF_STATUS_BUFFER_TOO_SMALL) return 3;
    if (lgcf_last_error()[0] == '\0') return 4;
    lgcf_model_free(m);
    printf("ok %s\n", lgcf_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

/// `cargo test` links the rlib only, so build the static library explicitly.
fn build_static_lib() -> PathBuf {
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "--profile", "test", "-p", "logocaf-ffi", "--lib"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()
        .expect("run cargo");
    assert!(status.success(), "building the static library failed");
    target_dir().join("liblogocaf_ffi.a")
}

#[test]
fn c_program_links_and_runs() {
    let lib = build_static_lib();
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let exe = dir.path().join("main");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .expect("run the C compiler");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let text = String::from_utf8(run.stdout).unwrap();
    assert_eq!(text.trim(), format!("ok {}", env!("CARGO_PKG_VERSION")));
}
