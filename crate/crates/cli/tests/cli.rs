use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use edgesim_core::experiment::import_csv_log;
use serde_json::Value;

fn edgesim() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edgesim"));
    c.env_remove("EDGESIM_ADDR");
    c
}

fn run(args: &[&str]) -> Output {
    edgesim().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Served {
    child: Child,
    addr: String,
}

impl Served {
    fn start(extra: &[&str]) -> Served {
        let mut child = edgesim()
            .args(["serve", "--listen", "127.0.0.1:0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Served { child, addr }
    }

    fn interrupt(&mut self) -> i32 {
        let pid = self.child.id().to_string();
        assert!(Command::new("kill").args(["-INT", &pid]).status().unwrap().success());
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code().unwrap_or(-1);
            }
            assert!(Instant::now() < deadline, "server ignored SIGINT");
            thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn overall_accuracy(o: &Output) -> f64 {
    let v: Value = serde_json::from_str(stdout(o).trim()).unwrap();
    v["stats"]["overall_accuracy"].as_f64().unwrap()
}

#[test]
fn bad_listen_address_is_a_usage_error() {
    let o = run(&["serve", "--listen", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn live_without_bridge_is_a_usage_error() {
    let o = run(&["session", "--live"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_plan_is_a_usage_error() {
    let o = run(&["session", "--sim", "--repetitions", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("repetitions"));
}

#[test]
fn serve_answers_hello_and_stops_on_interrupt() {
    let mut s = Served::start(&[]);
    let stream = std::net::TcpStream::connect(&s.addr).unwrap();
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).unwrap();
    let hello: Value = serde_json::from_str(&line).unwrap();
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["version"], 1);
    assert_eq!(s.interrupt(), 0);
}

#[test]
fn sim_session_writes_log_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s.csv");
    let stats = dir.path().join("stats.json");
    let o = run(&[
        "--format",
        "structured",
        "session",
        "--sim",
        "--seed",
        "7",
        "--log",
        log.to_str().unwrap(),
        "--stats",
        stats.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(overall_accuracy(&o), 1.0);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 21);
    let s: Value = serde_json::from_str(&fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(s["trials"], 20);
}

#[test]
fn session_against_served_device() {
    let mut s = Served::start(&["--time-scale", "50"]);
    let o = run(&[
        "--format",
        "structured",
        "session",
        "--addr",
        &s.addr,
        "--time-scale",
        "50",
        "--repetitions",
        "1",
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(overall_accuracy(&o), 1.0);
    assert_eq!(s.interrupt(), 0);
}

#[test]
fn unreachable_server_is_a_runtime_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let o = run(&["session", "--addr", &format!("127.0.0.1:{port}")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn server_killed_mid_session_keeps_partial_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("partial.csv");
    let mut s = Served::start(&["--time-scale", "20"]);
    let session = edgesim()
        .args(["session", "--addr", &s.addr, "--time-scale", "20", "--log"])
        .arg(&log)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(2500));
    s.child.kill().unwrap();
    let o = session.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let records = import_csv_log(&log).unwrap();
    assert!(!records.is_empty() && records.len() < 20, "{} records", records.len());
}

#[test]
fn edge_spool_override_changes_session_timing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("big_spool.toml");
    fs::write(&cfg, "[mechanism.edge]\nspool_radius_mm = 10.0\n").unwrap();
    let mean_edge_rt = |extra: &[&str]| {
        let o = edgesim()
            .args(["--format", "structured", "session", "--sim", "--seed", "5"])
            .args(extra)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        let per = v["stats"]["per_condition"].as_array().unwrap().clone();
        per.iter()
            .find(|c| c["condition"] == "EH")
            .unwrap()["mean_rt_s"]
            .as_f64()
            .unwrap()
    };
    let default = mean_edge_rt(&[]);
    let larger = mean_edge_rt(&["--config", cfg.to_str().unwrap()]);
    assert!(larger < default, "{larger} vs {default}");
}

#[test]
fn analyze_perfect_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("p.json");
    let o = run(&[
        "session",
        "--sim",
        "--log",
        log.to_str().unwrap(),
        "--log-format",
        "structured",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["analyze", "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let overall = text.lines().find(|l| l.starts_with("overall")).unwrap();
    assert!(overall.contains("100.0%"), "{text}");
    assert_eq!(text.matches("100.0%").count(), 5);
}

#[test]
fn truncated_log_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("s.csv");
    assert!(run(&["session", "--sim", "--log", log.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().take(3).collect();
    lines.push("3,EL,EL");
    fs::write(&log, lines.join("\n") + "\n").unwrap();
    let o = run(&["analyze", "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

fn four_way_accuracy(report: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with("4-way accuracy")).unwrap();
    line.trim_start_matches("4-way accuracy ")
        .trim_end_matches('%')
        .parse()
        .unwrap()
}

#[test]
fn frames_then_analyze_classifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("corpus");
    let o = run(&["frames", "--out", out.to_str().unwrap(), "--count", "40"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 5);
    let heat = dir.path().join("heat");
    let o = edgesim()
        .arg("analyze")
        .arg("--frames")
        .args(&files)
        .arg("--heatmap-dir")
        .arg(&heat)
        .arg("--png")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(four_way_accuracy(&stdout(&o)) >= 95.0, "{}", stdout(&o));
    assert!(Path::new(&heat.join("frames_SH.png")).exists());
    assert!(Path::new(&heat.join("frames_EL.csv")).exists());
}
