use std::env;
use std::path::{Path, PathBuf};
use std::process::Command;

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn header() -> PathBuf {
    crate_dir().join("include").join("modbench.h")
}

fn compiler() -> String {
    env::var("CC").unwrap_or_else(|_| "cc".into())
}

/// Directory holding the library artifacts of the current build.
fn artifact_dir() -> PathBuf {
    let exe = env::current_exe().expect("test executable path");
    exe.parent().and_then(Path::parent).expect("target/<profile>/deps layout").to_path_buf()
}

#[test]
fn header_declares_the_interface() {
    let text = std::fs::read_to_string(header()).expect("generated header");
    for symbol in [
        "mb_last_error",
        "mb_task_new",
        "mb_model_new",
        "mb_model_train",
        "mb_model_evaluate",
        "mb_stats_report",
        "mb_alignment",
        "mb_hungarian",
        "MB_STATUS_PANIC",
        "MB_LEVEL_RANDOM_GATE",
    ] {
        assert!(text.contains(symbol), "{symbol} missing from header");
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    for (lang, std) in [("c", "-std=c99"), ("c++", "-std=c++11")] {
        let out = Command::new(compiler())
            .args(["-fsyntax-only", "-Wall", "-Werror", std, "-x", lang])
            .arg(header())
            .output()
            .expect("C compiler available");
        assert!(out.status.success(), "{lang}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = artifact_dir().join("libmodbench_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let out = Command::new(compiler())
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(crate_dir().join("tests").join("c").join("smoke.c"))
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .expect("C compiler available");
    assert!(out.status.success(), "compile: {}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "run: {}{}", String::from_utf8_lossy(&run.stdout), String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
