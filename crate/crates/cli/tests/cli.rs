use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Stdio};

use volunteer_core::client_runtime::run_task;
use volunteer_core::domain::PolicyConfig;
use volunteer_core::metrics::read_summaries_csv;
use volunteer_core::protocol::{self, ClientMessage, CodecConfig, ServerMessage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volunteer"))
}

const SMALL: &str = r#"
total_tasks = 30
worker_slots = 4
task_size = 1000
compute_scale = 0.0001
[dwell_model]
kind = "weibull"
shape = 0.75
scale = 0.2
"#;

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "bogus = 1\n");
    let invalid = write(dir.path(), "invalid.toml", "worker_slots = 0\n");
    for args in [
        vec!["simulate", "--config", bad.to_str().unwrap()],
        vec!["simulate", "--config", invalid.to_str().unwrap()],
        vec!["simulate", "--config", "/definitely/not/here.toml"],
        vec!["simulate", "--transport", "carrier-pigeon"],
        vec!["sweep", bad.to_str().unwrap()],
        vec!["serve", "--listen", "not-an-address"],
        vec!["no-such-command"],
    ] {
        let st = bin().args(&args).stdout(Stdio::null()).stderr(Stdio::null()).status().unwrap();
        assert_eq!(st.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["report", dir.path().join("missing.ndjson").to_str().unwrap()])
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
    let starved = write(
        dir.path(),
        "starved.toml",
        &format!("time_cap = 5.0\n{SMALL}").replace("scale = 0.2", "scale = 0.001"),
    );
    let st = bin()
        .args(["simulate", "--config", starved.to_str().unwrap(), "--out"])
        .arg(dir.path().join("o"))
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(1));
}

#[test]
fn repeats_write_one_log_per_run_and_a_mean_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.toml", SMALL);
    let out = dir.path().join("out");
    let st = bin()
        .args(["simulate", "--repeats", "3", "--seed", "11", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    let rows = read_summaries_csv(std::fs::File::open(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r.seed).take(3).collect::<Vec<_>>(), vec![11, 12, 13]);
    assert_eq!(rows[3].label, "virtual-mean");
    for i in 0..3 {
        assert!(out.join(format!("run-{i}.ndjson")).exists());
        assert!(out.join(format!("run-{i}.sessions.csv")).exists());
    }

    // the report of a log reproduces the run's summary
    let rep = dir.path().join("rep");
    let st = bin()
        .arg("report")
        .arg(out.join("run-1.ndjson"))
        .arg("--out")
        .arg(&rep)
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    let r = read_summaries_csv(std::fs::File::open(rep.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(r[0].runtime, rows[1].runtime);
    assert_eq!(r[0].value_sessions, rows[1].value_sessions);
    assert_eq!(r[0].downtime, rows[1].downtime);
}

#[test]
fn sweeps_write_one_row_per_cell_and_empty_ones_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for text in ["", "[axes]\nshape = []\n", "[axes]\ntask_size = [1000]\ntransport = []\n"] {
        let m = write(dir.path(), "empty.toml", text);
        let st = bin().arg("sweep").arg(&m).arg("--out").arg(&out).stdout(Stdio::null()).status().unwrap();
        assert_eq!(st.code(), Some(0), "{text:?}");
        assert!(!out.exists());
    }
    let m = write(
        dir.path(),
        "m.toml",
        &format!(
            "repeats = 2\n[base]\n{}\n[axes]\ntask_size = [1000, 500]\ntransport = [\"request-response\", \"stream\"]\n",
            SMALL.replace("[dwell_model]", "dwell_model = { kind = \"weibull\", shape = 0.75, scale = 0.2 }\n#")
                .replace("kind = \"weibull\"\nshape = 0.75\nscale = 0.2\n", "")
        ),
    );
    let st = bin().arg("sweep").arg(&m).arg("--out").arg(&out).stdout(Stdio::null()).status().unwrap();
    assert!(st.success());
    let summary = read_summaries_csv(std::fs::File::open(out.join("summary.csv")).unwrap()).unwrap();
    assert_eq!(summary.len(), 4);
    assert_eq!(summary[0].label, "size=1000,request-response");
    assert_eq!(summary[3].total_tasks, 60);
    let runs = read_summaries_csv(std::fs::File::open(out.join("runs.csv")).unwrap()).unwrap();
    assert_eq!(runs.len(), 8);
}

fn exchange(http: &reqwest::blocking::Client, base: &str, path: &str, session: Option<u64>, msg: &ClientMessage) -> ServerMessage {
    let mut req = http.post(format!("{base}{path}")).body(protocol::encode(msg, &CodecConfig::default()));
    if let Some(s) = session {
        req = req.header("x-session", s.to_string());
    }
    protocol::decode(&req.send().unwrap().bytes().unwrap()).unwrap()
}

#[test]
fn serve_takes_its_address_from_the_environment_and_exits_when_done() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "server.toml",
        "poll_interval = 0.02\n[source]\nkind = \"benchmark\"\ntotal_tasks = 3\ntask_size = 2000\n",
    );
    let mut child = bin()
        .args(["serve", "--exit-when-done", "--config"])
        .arg(&cfg)
        .env("VOLUNTEER_LISTEN", "127.0.0.1:0")
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let first = lines.next().unwrap().unwrap();
    let base = first.strip_prefix("listening on ").unwrap().to_string();
    let http = reqwest::blocking::Client::new();
    std::thread::sleep(std::time::Duration::from_millis(100));
    let ServerMessage::Welcome { session_id } =
        exchange(&http, &base, "/api/hello", None, &ClientMessage::Hello { client_info: "test".into() })
    else {
        panic!()
    };
    let s = Some(session_id.0);
    let ServerMessage::Tasks { tasks } = exchange(&http, &base, "/api/tasks", s, &ClientMessage::RequestTasks { count: 3 }) else {
        panic!()
    };
    assert_eq!(tasks.len(), 3);
    for t in tasks {
        let steps = run_task(t, &PolicyConfig::sync_single()).unwrap();
        exchange(&http, &base, "/api/final", s, &steps.last().unwrap().message);
    }
    let status = child.wait().unwrap();
    assert!(status.success());
    let rest: Vec<String> = lines.map(Result::unwrap).collect();
    assert!(rest.iter().any(|l| l == "3 of 3 results delivered"), "{rest:?}");
    assert!(rest.iter().any(|l| l.starts_with("pi estimate 3.")), "{rest:?}");
}
