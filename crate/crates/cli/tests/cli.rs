use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_griffonforge");

fn cmd(dir: &Path) -> Command {
    let mut c = Command::new(BIN);
    c.current_dir(dir)
        .env_remove("GRIFFONFORGE_SEED")
        .env_remove("GRIFFONFORGE_LOG_LEVEL");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    cmd(dir).args(args).output().unwrap()
}

fn run_stdin(dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = cmd(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn wait_healthy(port: u16) {
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if let Ok(r) = reqwest::blocking::get(format!("http://127.0.0.1:{port}/healthz")) {
            if r.status().is_success() {
                return;
            }
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("server on {port} never became healthy");
}

struct Server(Child);

impl Server {
    fn spawn(dir: &Path, args: &[&str]) -> Self {
        Server(
            cmd(dir)
                .args(args)
                .stderr(Stdio::piped())
                .stdout(Stdio::null())
                .spawn()
                .unwrap(),
        )
    }

    fn terminate(mut self) -> i32 {
        Command::new("kill")
            .arg("-TERM")
            .arg(self.0.id().to_string())
            .status()
            .unwrap();
        let status = self.0.wait().unwrap();
        std::mem::forget(self);
        status.code().unwrap_or(-1)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn qa(id: &str, question: &str, answer: &str) -> String {
    format!(
        r#"{{"id":"{id}","image":{{"id":"img-{id}","width":320,"height":240,"uri":"synthetic://{id}.png"}},"question":"{question}","answer":"{answer}","source_dataset":"demo"}}"#
    )
}

#[test]
fn filter_empty_input_is_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_stdin(dir.path(), &["filter", "-"], "");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn filter_bad_line_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let input = format!(
        "{}\n{{not json\n",
        qa("1", "Is the cup left of the plate?", "yes")
    );
    let o = run_stdin(dir.path(), &["filter", "-"], &input);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn filter_writes_kept_records_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let input = [
        qa("1", "Is the red cup to the left of the plate?", "yes"),
        qa("2", "What is the man holding in his hand?", "a phone"),
        // same image and question as record 1
        qa("3", "Is the red cup to the left of the plate?", "no").replace("img-3", "img-1"),
        qa("4", "What color?", "red"),
    ]
    .join("\n");
    std::fs::write(dir.path().join("in.jsonl"), input).unwrap();
    let o = run(
        dir.path(),
        &[
            "filter",
            "in.jsonl",
            "--out",
            "kept.jsonl",
            "--stats",
            "stats.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(o.stdout.is_empty(), "logs must stay off stdout");
    let kept = std::fs::read_to_string(dir.path().join("kept.jsonl")).unwrap();
    let ids: Vec<String> = kept
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, ["1"]);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("stats.json")).unwrap())
            .unwrap();
    assert_eq!(stats["total"], 4);
    assert_eq!(stats["kept"], 1);
    assert_eq!(stats["per_reason"]["duplicate"], 1);
    // record 4 is both too simple and criterion-free
    assert_eq!(stats["per_reason"]["no_criterion"], 2);
    assert_eq!(stats["per_reason"]["too_simple"], 1);

    // filter output pipes back in unchanged
    let again = run_stdin(dir.path(), &["filter", "-"], &kept);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(String::from_utf8(again.stdout).unwrap(), kept);
}

#[test]
fn eval_oracle_mock_and_toolkit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(
        d,
        &[
            "--seed",
            "11",
            "gen-bench",
            "--n",
            "150",
            "--out",
            "bench.jsonl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = run(
        d,
        &[
            "eval",
            "bench.jsonl",
            "--backend",
            "oracle",
            "--min-accuracy",
            "1.0",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy: 1.0000 (150/150)"));

    let o = run(
        d,
        &[
            "eval",
            "bench.jsonl",
            "--backend",
            "mock",
            "--corruption",
            "0.3",
            "--min-accuracy",
            "1.0",
        ],
    );
    assert_eq!(code(&o), 5);

    let o = run(
        d,
        &[
            "eval",
            "bench.jsonl",
            "--backend",
            "mock",
            "--mode",
            "toolkit",
            "--n-tools",
            "3",
            "--report",
            "r.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["model_calls"], 150 * 5);
    assert!(r["per_case"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["model_calls"] == 5));
}

fn strip_timing(mut v: serde_json::Value) -> serde_json::Value {
    v.as_object_mut().unwrap().remove("timing");
    for c in v["per_case"].as_array_mut().unwrap() {
        c.as_object_mut().unwrap().remove("timing");
    }
    v
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        let out = format!("{name}.jsonl");
        assert_eq!(
            code(&run(
                d,
                &["--seed", "5", "gen-bench", "--n", "80", "--out", &out]
            )),
            0
        );
        let report = format!("{name}.json");
        let o = run(
            d,
            &[
                "--seed",
                "9",
                "eval",
                &out,
                "--backend",
                "mock",
                "--corruption",
                "0.25",
                "--report",
                &report,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("b.jsonl")).unwrap()
    );
    let load = |n: &str| {
        strip_timing(serde_json::from_str(&std::fs::read_to_string(d.join(n)).unwrap()).unwrap())
    };
    assert_eq!(load("a.json"), load("b.json"));
    let o = run(
        d,
        &["--seed", "6", "gen-bench", "--n", "80", "--out", "c.jsonl"],
    );
    assert_eq!(code(&o), 0);
    assert_ne!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("c.jsonl")).unwrap()
    );
}

#[test]
fn config_file_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("gf.toml"),
        "seed = 5\nbackend = \"mock\"\ncorruption = 0.5\nmin_accuracy = 0.99\n",
    )
    .unwrap();
    assert_eq!(
        code(&run(
            d,
            &[
                "--config",
                "gf.toml",
                "gen-bench",
                "--n",
                "60",
                "--out",
                "b.jsonl"
            ]
        )),
        0
    );
    let o = run(d, &["--config", "gf.toml", "eval", "b.jsonl"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = cmd(d)
        .args(["--config", "gf.toml", "eval", "b.jsonl"])
        .env("GRIFFONFORGE_BACKEND", "oracle")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(d.join("bad.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(
        code(&run(d, &["--config", "bad.toml", "gen-bench", "--n", "1"])),
        2
    );
}

#[test]
fn annotate_is_deterministic_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let port = free_port();
    let _fake = Server::spawn(
        d,
        &["fake-expert", "--listen", &format!("127.0.0.1:{port}")],
    );
    let deadline = Instant::now() + Duration::from_secs(20);
    while std::net::TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "fake expert did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    std::fs::write(
        d.join("expert.toml"),
        format!(
            "base_url = \"http://127.0.0.1:{port}/v1\"\ncache_dir = \"cache\"\nretry_base_ms = 5\n"
        ),
    )
    .unwrap();
    let input = [
        qa("1", "Is the red balloon below the white balloon?", "yes"),
        qa("2", "How many dogs are next to the bench?", "2"),
        qa("3", "What is written on the sign above the door?", "exit"),
    ]
    .join("\n");
    std::fs::write(d.join("in.jsonl"), input).unwrap();
    let args = |out: &'static str| {
        vec![
            "annotate",
            "in.jsonl",
            "--expert-config",
            "expert.toml",
            "--out",
            out,
        ]
    };
    let first = run(d, &args("a.jsonl"));
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(!stderr(&first).contains("network_calls=0"));
    let second = run(d, &args("b.jsonl"));
    assert_eq!(code(&second), 0, "{}", stderr(&second));
    assert!(
        stderr(&second).contains("network_calls=0"),
        "{}",
        stderr(&second)
    );
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}

#[test]
fn annotate_unreachable_endpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let port = free_port();
    std::fs::write(
        d.join("expert.toml"),
        format!("base_url = \"http://127.0.0.1:{port}/v1\"\nretry_limit = 1\nretry_base_ms = 1\ncache_dir = \"c\"\n"),
    )
    .unwrap();
    std::fs::write(
        d.join("in.jsonl"),
        qa("1", "Is the cup on the table?", "yes"),
    )
    .unwrap();
    let o = run(
        d,
        &[
            "annotate",
            "in.jsonl",
            "--expert-config",
            "expert.toml",
            "--out",
            "o.jsonl",
        ],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

fn sample_json(id: &str) -> serde_json::Value {
    serde_json::json!({
        "id": id,
        "image": {"id": format!("img-{id}"), "width": 200, "height": 200, "uri": "synthetic://x.png"},
        "question": "Is the red balloon below the white balloon?",
        "answer": "yes",
        "state": "AiAnnotated",
        "analysis": {
            "key_entities": ["red balloon", "white balloon"],
            "plan": [{"capability": "Visual Grounding", "targets": ["red balloon", "white balloon"]}],
            "raw_i1_response": "", "raw_i2_response": "", "warnings": []
        },
        "pending": [{"capability": "Visual Grounding", "targets": ["red balloon", "white balloon"]}]
    })
}

#[test]
fn serve_round_trip_port_in_use_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let port = free_port();
    let listen = format!("127.0.0.1:{port}");
    let base = format!("http://{listen}");
    let server = Server::spawn(d, &["serve", "--data-dir", "data", "--listen", &listen]);
    wait_healthy(port);

    let busy = run(d, &["serve", "--data-dir", "other", "--listen", &listen]);
    assert_eq!(code(&busy), 4, "{}", stderr(&busy));
    assert!(!d.join("other").exists());

    let http = reqwest::blocking::Client::new();
    let r = http
        .post(format!("{base}/api/samples"))
        .json(&vec![sample_json("s1"), sample_json("s2")])
        .send()
        .unwrap();
    assert_eq!(r.status(), 201);
    for _ in 0..2 {
        let rec: serde_json::Value = http
            .get(format!("{base}/api/queue/next?reviewer=r"))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let id = rec["id"].as_str().unwrap().to_string();
        let cues = serde_json::json!({"reviewer_id": "r", "cues": [
            {"label": "red balloon", "payload": {"type": "boxes", "boxes": [[10, 120, 40, 160]]}},
            {"label": "white balloon", "payload": {"type": "boxes", "boxes": [[15, 20, 45, 60]]}}
        ]});
        assert_eq!(
            http.post(format!("{base}/api/samples/{id}/annotation"))
                .json(&cues)
                .send()
                .unwrap()
                .status(),
            200
        );
        let r = http
            .post(format!("{base}/api/samples/{id}/decision"))
            .json(&serde_json::json!({"reviewer_id": "r", "decision": "accept"}))
            .send()
            .unwrap();
        assert_eq!(r.status(), 200);
    }
    assert_eq!(
        http.get(format!("{base}/api/queue/next?reviewer=r"))
            .send()
            .unwrap()
            .status(),
        204
    );
    assert_eq!(server.terminate(), 0);

    let exported = run(d, &["export", "--data-dir", "data"]);
    assert_eq!(code(&exported), 0, "{}", stderr(&exported));
    assert_eq!(String::from_utf8_lossy(&exported.stdout).lines().count(), 2);

    let server = Server::spawn(d, &["serve", "--data-dir", "data", "--listen", &listen]);
    wait_healthy(port);
    let stats: serde_json::Value = http
        .get(format!("{base}/api/stats"))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(stats["accepted"], 2);
    drop(server);
}
