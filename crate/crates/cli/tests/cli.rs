#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixture, json_close};
use serde_json::Value;

fn deskmanip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deskmanip"))
        .args(args)
        .env_remove("DESKMANIP_LLM_ENDPOINT")
        .env_remove("DESKMANIP_LLM_MODEL")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn ground_output_matches_goldens() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["tweezer_stirbar", "open_cylinder_rim", "switch_ridge", "pestle_mortar"] {
        let out = dir.path().join(name);
        let o = deskmanip(&[
            "ground",
            "--scene",
            p(&fixture(&format!("scenes/{name}.json"))),
            "--task",
            p(&fixture(&format!("tasks/{name}.json"))),
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let got = read_json(&out.join("grounding.json"));
        let want = read_json(&fixture(&format!("goldens/{name}.grounding.json")));
        if let Err(e) = json_close(&got, &want, 1e-12) {
            panic!("{name}: {e}");
        }
        let audit = std::fs::read_to_string(out.join("reasoner_audit.jsonl")).unwrap();
        assert!(audit.lines().count() >= 2);
    }
}

#[test]
fn debug_render_writes_overlay_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let renders = dir.path().join("renders");
    let o = deskmanip(&[
        "ground",
        "--scene",
        p(&fixture("scenes/tweezer_stirbar.json")),
        "--task",
        p(&fixture("tasks/tweezer_stirbar.json")),
        "--out",
        p(dir.path()),
        "--debug-render",
        p(&renders),
    ]);
    assert_eq!(code(&o), 0);
    for f in ["overlay.pgm", "grid_subtask1.pgm"] {
        let bytes = std::fs::read(renders.join(f)).unwrap();
        assert!(bytes.starts_with(b"P5"), "{f}");
    }
}

#[test]
fn run_writes_summary_and_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let o = deskmanip(&[
        "run",
        "--scene",
        p(&fixture("scenes/pestle_mortar.json")),
        "--task",
        p(&fixture("tasks/pestle_mortar.json")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["outcome"], "completed");
    let ticks = summary["counters"]["ticks"].as_u64().unwrap();
    let lines = std::fs::read_to_string(dir.path().join("trajectory.jsonl")).unwrap();
    assert_eq!(lines.lines().count() as u64, ticks);
}

#[test]
fn observe_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = deskmanip(&["observe", "--scene", p(&fixture("scenes/switch_ridge.json")), "--out", p(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("objects.json").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let scene = fixture("scenes/pestle_mortar.json");
    let task = fixture("tasks/pestle_mortar.json");
    let run = |scene: &Path, extra: &[&str]| {
        let mut args = vec!["run", "--scene", p(scene), "--task", p(&task), "--out", p(&out)];
        args.extend_from_slice(extra);
        code(&deskmanip(&args))
    };

    assert_eq!(code(&deskmanip(&["run"])), 2, "missing arguments");
    assert_eq!(run(&dir.path().join("nope.json"), &[]), 2, "missing scene file");

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&bad, &[]), 4, "unparseable scene");

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{ "tick_hz": 30.0 }"#).unwrap();
    assert_eq!(run(&scene, &["--config", p(&cfg)]), 3, "dt disagrees with the tick rate");

    assert_eq!(run(&scene, &["--backend", "http"]), 3, "http backend without environment");

    let unreachable = Command::new(env!("CARGO_BIN_EXE_deskmanip"))
        .args(["run", "--scene", p(&scene), "--task", p(&task), "--out", p(&out), "--backend", "http"])
        .env("DESKMANIP_LLM_ENDPOINT", "http://127.0.0.1:9/v1/chat/completions")
        .env("DESKMANIP_LLM_MODEL", "m")
        .env("DESKMANIP_LLM_TOKEN", "t")
        .env("DESKMANIP_LLM_TIMEOUT_S", "2")
        .output()
        .unwrap();
    assert_eq!(code(&unreachable), 8, "{}", String::from_utf8_lossy(&unreachable.stderr));

    assert_eq!(run(&fixture("scenes/pestle_mortar_teleport.json"), &[]), 6, "budget exhausted");

    let short = dir.path().join("short.json");
    std::fs::write(&short, r#"{ "tick_limit": 20 }"#).unwrap();
    assert_eq!(run(&scene, &["--config", p(&short)]), 7, "tick limit");
}
