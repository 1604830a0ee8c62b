//! End-to-end behavior of the command-line interface: flag validation,
//! artifact layout, resume ergonomics, and the summarizer.

use std::path::Path;
use std::process::Command;

/// Posterior mean of p1 for coinflip(100000, 50000), frozen from the
/// incomplete-beta quadrature oracle.
const COINFLIP_E_P1: f64 = 0.7213423171376138;

fn roost(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_roost"))
        .args(args)
        .output()
        .expect("roost binary runs")
}

fn roost_env(args: &[&str], envs: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_roost"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("roost binary runs")
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn usage_errors_exit_2() {
    // y > n
    let out = roost(&["run", "--target", "coinflip", "--y", "200", "--n", "100"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    // unknown target
    let out = roost(&["run", "--target", "pancake"]);
    assert_eq!(code(&out), 2);
    // missing target
    let out = roost(&["run"]);
    assert_eq!(code(&out), 2);
    // unknown recorder
    let out = roost(&["run", "--target", "mvn", "--record", "telepathy"]);
    assert_eq!(code(&out), 2);
    // sequential backend with several workers
    let out = roost(&[
        "run", "--target", "mvn", "--backend", "sequential", "--workers", "3",
    ]);
    assert_eq!(code(&out), 2);
    // bridge without a command
    let out = roost(&["run", "--target", "bridge", "--dim", "2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn help_exits_0() {
    let out = roost(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("summarize"));
}

#[test]
fn run_writes_standard_artifacts_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = roost(&[
        "run", "--target", "mvn", "--dim", "2", "--ref-sd", "2", "--chains", "4", "--rounds", "5",
        "--record", "traces,online,round_trip", "--output", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("#scans"), "table header missing:\n{stdout}");
    assert!(stdout.contains("log(Z₁/Z₀)"));
    assert!(stdout.lines().count() >= 5 + 3, "five rounds plus framing");
    assert!(dir.join("trace.csv").is_file());
    assert!(dir.join("report.json").is_file());
    assert!(dir.join("schedule_history.csv").is_file());
    // final round of 2^5 scans -> 32 trace rows plus the header
    let trace = std::fs::read_to_string(dir.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 33);
    assert!(trace.starts_with("scan,x1,x2\n"));
}

#[test]
fn identical_invocations_have_identical_stdout_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let strip_time = |stdout: &str| -> String {
        // time(s) is the 4th column; blank it before comparing
        stdout
            .lines()
            .map(|line| {
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() >= 7 && fields[0].chars().next().unwrap_or('x').is_ascii_digit() {
                    let mut fields = fields;
                    fields[3] = "-";
                    fields.join(" ")
                } else {
                    line.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut tables = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        let out = roost(&[
            "run", "--target", "coinflip", "--n", "1000", "--y", "400", "--chains", "5",
            "--rounds", "6", "--seed", "42", "--output", dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        tables.push(strip_time(&String::from_utf8_lossy(&out.stdout)));
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn summarize_recovers_quadrature_moments() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = roost(&[
        "run", "--target", "coinflip", "--chains", "10", "--rounds", "10", "--seed", "1",
        "--record", "traces", "--output", dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = roost(&["summarize", "--input", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["samples"], 1024);
    let marginals = summary["marginals"].as_array().unwrap();
    assert_eq!(marginals.len(), 2);
    let p1_mean = marginals[0]["mean"].as_f64().unwrap();
    assert!(
        (0.6..0.9).contains(&p1_mean),
        "p1 mean {p1_mean} should sit near the oracle value {COINFLIP_E_P1}"
    );
    let counts: u64 = marginals[0]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(counts, 1024);
    assert_eq!(marginals[0]["counts"].as_array().unwrap().len(), 50);
    assert_eq!(marginals[0]["edges"].as_array().unwrap().len(), 51);
    assert!(dir.join("summary.dat").is_file());
}

#[test]
fn summarize_missing_and_empty_traces_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let out = roost(&["summarize", "--input", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);

    std::fs::write(tmp.path().join("trace.csv"), "scan,x1\n").unwrap();
    let out = roost(&["summarize", "--input", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn summarize_constant_column_has_zero_variance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trace = String::from("scan,x1\n");
    for t in 1..=10 {
        trace.push_str(&format!("{t},2.5\n"));
    }
    std::fs::write(tmp.path().join("trace.csv"), trace).unwrap();
    let out = roost(&["summarize", "--input", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["marginals"][0]["variance"], 0.0);
    assert_eq!(summary["marginals"][0]["counts"][0], 10);
}

#[test]
fn resume_of_a_finished_run_is_a_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = roost(&[
        "run", "--target", "mvn", "--chains", "4", "--rounds", "3", "--checkpoint", "--output",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = roost(&["resume", "--from", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("nothing to resume"));
}

#[test]
fn resume_rejects_corrupt_magic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("out");
    let out = roost(&[
        "run", "--target", "mvn", "--chains", "4", "--rounds", "3", "--checkpoint", "--output",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    // corrupt every snapshot's magic bytes
    let run_dir_text = std::fs::read_to_string(dir.join("latest")).unwrap();
    let run_dir = Path::new(run_dir_text.trim());
    for entry in std::fs::read_dir(run_dir).unwrap() {
        let path = entry.unwrap().path();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
    }
    let out = roost(&["resume", "--from", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn worker_with_wrong_port_times_out() {
    let out = roost_env(
        &[
            "worker", "--rank", "2", "--workers", "2", "--target", "mvn", "--base-port", "49999",
        ],
        &[("ROOST_CONNECT_TIMEOUT_MS", "300")],
    );
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rendezvous"));
}

#[test]
fn worker_rank_1_is_rejected() {
    let out = roost(&["worker", "--rank", "1", "--target", "mvn"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn hostfile_mesh_matches_loopback_mesh() {
    let tmp = tempfile::tempdir().unwrap();
    let hostfile = tmp.path().join("hosts");
    std::fs::write(
        &hostfile,
        "# three local workers\n127.0.0.1:48710\n127.0.0.1:48711\n127.0.0.1:48712\n",
    )
    .unwrap();
    let with_hosts = tmp.path().join("hosts_out");
    let without = tmp.path().join("plain_out");
    let base: [&str; 14] = [
        "run", "--target", "coinflip", "--n", "2000", "--y", "700", "--chains", "6", "--rounds",
        "6", "--record", "traces", "--workers",
    ];

    let mut args: Vec<&str> = base.to_vec();
    args.extend_from_slice(&["3", "--output", with_hosts.to_str().unwrap()]);
    let out = roost_env(&args, &[("ROOST_HOSTFILE", hostfile.to_str().unwrap())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut args: Vec<&str> = base.to_vec();
    args.extend_from_slice(&[
        "3",
        "--base-port",
        "48720",
        "--output",
        without.to_str().unwrap(),
    ]);
    let out = roost(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        std::fs::read(with_hosts.join("trace.csv")).unwrap(),
        std::fs::read(without.join("trace.csv")).unwrap()
    );
}
