use std::fs;
use std::process::Command;

fn kpplab(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_kpplab"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn wave_writes_a_profile() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.txt");
    let (code, _, err) = kpplab(&["wave", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(err.contains("c = 2"));
    let text = fs::read_to_string(path).unwrap();
    assert!(text.starts_with("# c = 2, lambda = 1"));
}

#[test]
fn unknown_keys_and_broken_hypotheses_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "scenario = thm1-k>-3\nk = 0\ncolour = blue\n").unwrap();
    assert_eq!(
        kpplab(&["scenario", "--config", cfg.to_str().unwrap()]).0,
        4
    );
    assert_eq!(
        kpplab(&["scenario", "--scenario", "thm3-k<-3", "--k", "-2"]).0,
        4
    );
    assert_eq!(
        kpplab(&[
            "scenario",
            "--scenario",
            "thm4-single-wave",
            "--k",
            "0",
            "--a1",
            "1",
            "--a2",
            "2"
        ])
        .0,
        4
    );
    assert_eq!(kpplab(&["scenario"]).0, 4);
}

#[test]
fn passing_scenario_exits_zero_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, stdout, err) = kpplab(&[
        "scenario",
        "--scenario",
        "linear-asymptotics",
        "--k",
        "0",
        "--t-end",
        "1e3",
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stdout}{err}");
    assert!(stdout.contains("[PASS]"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("# kpplab-checks v1"));
    assert!(out.join("linear-asymptotics-prefactors.csv").exists());
}

#[test]
fn failed_acceptance_exits_two() {
    // A short horizon leaves the fitted coefficient far from its limit.
    let (code, stdout, _) = kpplab(&[
        "scenario",
        "--scenario",
        "thm1-k>-3",
        "--k",
        "2",
        "--t-end",
        "40",
        "--window-lo",
        "4",
        "--window-hi",
        "40",
    ]);
    assert_eq!(code, 2, "{stdout}");
    assert!(stdout.contains("FAIL"));
}

#[test]
fn numerical_failures_exit_three() {
    let (code, _, err) = kpplab(&[
        "simulate", "--k", "0", "--t-end", "200", "--dx", "0.125", "--dt", "1",
    ]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("numerical failure"));
}

#[test]
fn track_then_fit_round_trips_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let (code, _, err) = kpplab(&[
        "track",
        "--k",
        "2",
        "--t-end",
        "200",
        "--out",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("# kpplab-trace v1"));
    let (code, stdout, err) = kpplab(&[
        "fit",
        "--trace",
        trace.to_str().unwrap(),
        "--k",
        "2",
        "--window-lo",
        "20",
        "--window-hi",
        "200",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("ln t"));
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let (code, _, err) = kpplab(&[
            "track",
            "--k",
            "0",
            "--a1",
            "1",
            "--a2",
            "2",
            "--seed",
            "7",
            "--t-end",
            "50",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn report_combines_configs() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = dir.path().join("lin.cfg");
    let c2 = dir.path().join("lin2.cfg");
    fs::write(&c1, "scenario = linear-asymptotics\nk = 0\nt_end = 1e3\n").unwrap();
    fs::write(
        &c2,
        "# flat data\nscenario = linear-asymptotics\nnu = 1\nt_end = 1e3\n",
    )
    .unwrap();
    let out = dir.path().join("report");
    let (code, stdout, err) = kpplab(&[
        "report",
        c1.to_str().unwrap(),
        c2.to_str().unwrap(),
        "--outdir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{stdout}{err}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("[PASS]"));
    assert!(out
        .join("lin")
        .join("linear-asymptotics-checks.csv")
        .exists());
}
