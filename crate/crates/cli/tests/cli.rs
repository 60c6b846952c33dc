use std::path::Path;
use std::process::{Command, Output};

fn dima(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dima"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(
        dir.path(),
        r#"{"dataset_manifest": "data/manifest.json", "output_dir": "out"}"#,
    );
    assert_eq!(
        code(&dima(&["report", "--config", "/nonexistent/run.json"])),
        2
    );
    assert_eq!(
        code(&dima(&[
            "report",
            "--config",
            &good,
            "--set",
            "schedule.timesteps=0"
        ])),
        2
    );
    assert_eq!(
        code(&dima(&[
            "report",
            "--config",
            &good,
            "--set",
            "unknown_field=1"
        ])),
        2
    );
    assert_eq!(
        code(&dima(&[
            "report",
            "--config",
            &good,
            "--set",
            "no-equals-sign"
        ])),
        2
    );
    assert_eq!(code(&dima(&["frobnicate", "--config", &good])), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(
        code(&dima(&["report", "--config", bad.to_str().unwrap()])),
        2
    );
}

#[test]
fn missing_upstream_exits_3_without_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset_manifest": "data/manifest.json", "output_dir": "out"}"#,
    );
    for cmd in [
        "simulate",
        "train-ddpm",
        "train-corrector",
        "evaluate",
        "report",
    ] {
        let out = dima(&[cmd, "--config", &cfg]);
        assert_eq!(
            code(&out),
            3,
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let left: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(left, vec![std::ffi::OsString::from("run.json")]);
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"dataset_manifest": "data/manifest.json", "output_dir": "unused",
            "phantom": {"size": [8, 8, 8], "corpus_size": 2, "ghost_spacing": 2}}"#,
    );
    let out_dir = dir.path().join("elsewhere");
    let out = dima(&[
        "phantom",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("data/run_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["command"], "phantom");
    assert!(!dir.path().join("unused").exists());
}

#[test]
fn help_lists_every_command() {
    let out = dima(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "train-ddpm",
        "simulate",
        "train-corrector",
        "evaluate",
        "report",
        "phantom",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
