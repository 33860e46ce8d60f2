use std::path::PathBuf;
use std::process::Command;

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("lintrack-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn lintrack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lintrack")).args(args).output().unwrap()
}

/// CSV body with the wall-clock timing columns dropped.
fn without_timing(path: &PathBuf) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[..f.len() - 2].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn simulate_writes_reproducible_csv() {
    let dir = scratch("repro");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for p in [&a, &b] {
        let out = lintrack(&["simulate", "--steps", "20", "--csv", p.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let body = without_timing(&a);
    assert_eq!(body, without_timing(&b));
    // header plus one row per step plus the final state
    assert_eq!(body.lines().count(), 22);
}

#[test]
fn zero_steps_logs_only_the_initial_state() {
    let dir = scratch("zero");
    let csv = dir.join("z.csv");
    let out = lintrack(&["simulate", "--steps", "0", "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = scratch("invalid");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "[mpc]\nN = 0\n").unwrap();
    let out = lintrack(&["simulate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mpc.N"));

    let out = lintrack(&["simulate", "--controller", "pid"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_start_exits_with_two_and_keeps_the_log() {
    let dir = scratch("infeasible");
    let cfg = dir.join("hot.toml");
    std::fs::write(&cfg, "[mpc]\nN = 5\n\n[sim]\nx0 = [0.2, 0.9]\nsteps = 10\n").unwrap();
    let csv = dir.join("hot.csv");
    let out = lintrack(&["simulate", cfg.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);
}
