use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(format!("{name}.toml"))
}

fn canstack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canstack"))
        .args(args)
        .env_remove("CANSTACK_MODE")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn clean_exploration_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = canstack(&[path(&scenario("minimal")), "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("7 states"), "{stdout}");
    assert!(stdout.contains("holds-within-bound"));
    let report = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    for line in report.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(dir.path().join("summary.txt").exists());
}

#[test]
fn violation_exits_one_and_writes_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let out = canstack(&[
        path(&scenario("minimal")),
        "--mutation",
        "drop-frag-ack",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
    let cex = dir.path().join("cex-P2.jsonl");
    assert!(cex.exists());

    let replayed = canstack(&[
        path(&scenario("minimal")),
        "--mutation",
        "drop-frag-ack",
        "--mode",
        "replay",
        "--trace",
        path(&cex),
    ]);
    assert_eq!(
        code(&replayed),
        0,
        "{}",
        String::from_utf8_lossy(&replayed.stdout)
    );
}

#[test]
fn malformed_table_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("minimal")).unwrap()
        + "\n[[message]]\nid = 52\nsender = \"sender\"\nreceivers = [\"b\"]\nparts = 2\nfrag = \"frag\"\n";
    let line = text
        .lines()
        .enumerate()
        .filter(|(_, l)| *l == "[[message]]")
        .nth(1)
        .unwrap()
        .0
        + 1;
    let file = dir.path().join("bad.toml");
    fs::write(&file, &text).unwrap();
    let out = canstack(&[path(&file)]);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains(&format!("bad.toml:{line}:")), "{stderr}");
    assert!(stderr.contains("overlap"), "{stderr}");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&canstack(&["/nonexistent/scenario.toml"])), 2);
    assert_eq!(
        code(&canstack(&[path(&scenario("minimal")), "--mode", "replay"])),
        2
    );
    assert_eq!(
        code(&canstack(&[path(&scenario("minimal")), "--mode", "bogus"])),
        2
    );
}

#[test]
fn simulate_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = canstack(&[
        path(&scenario("two_node_full")),
        "--mode",
        "simulate",
        "--seed",
        "3",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = dir.path().join("trace.jsonl");
    let replayed = canstack(&[
        path(&scenario("two_node_full")),
        "--mode",
        "replay",
        "--trace",
        path(&trace),
    ]);
    assert_eq!(code(&replayed), 0);

    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.swap(1, 2);
    let tampered = dir.path().join("tampered.jsonl");
    fs::write(&tampered, lines.join("\n")).unwrap();
    let diverged = canstack(&[
        path(&scenario("two_node_full")),
        "--mode",
        "replay",
        "--trace",
        path(&tampered),
    ]);
    assert_eq!(code(&diverged), 1);
}

#[test]
fn simulate_to_stdout_is_deterministic() {
    let fig1 = scenario("fig1");
    let args = [path(&fig1), "--mode", "simulate", "--seed", "11"];
    let a = canstack(&args);
    let b = canstack(&args);
    assert_eq!(code(&a), 0);
    assert!(!a.stdout.is_empty());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn fig1_mode_reproduces_inversion() {
    let dir = tempfile::tempdir().unwrap();
    let out = canstack(&[
        path(&scenario("fig1")),
        "--mode",
        "fig1",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("bypass-cex-PI.jsonl").exists());
    assert!(!dir.path().join("mux-cex-PI.jsonl").exists());
    let verdict = fs::read_to_string(dir.path().join("fig1.txt")).unwrap();
    assert!(verdict.starts_with("reproduced"));
}

#[test]
fn environment_selects_mode() {
    let out = Command::new(env!("CARGO_BIN_EXE_canstack"))
        .arg(path(&scenario("minimal")))
        .env("CANSTACK_MODE", "simulate")
        .env("CANSTACK_SEED", "5")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout)
        .unwrap()
        .starts_with("{\"step\":0"));
}

#[test]
fn starvation_mode_is_descriptive() {
    let dir = tempfile::tempdir().unwrap();
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/descriptive/starvation.toml");
    let out = canstack(&[
        path(&file),
        "--mode",
        "starvation",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("low: starvable"), "{stdout}");
    let trace = dir.path().join("starve-low.jsonl");
    let replayed = canstack(&[path(&file), "--mode", "replay", "--trace", path(&trace)]);
    assert_eq!(code(&replayed), 0);
}
