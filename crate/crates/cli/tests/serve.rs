mod common;

use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::process::{Child, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

use common::{bin, fixture, s};
use empathic::model::checkpoint;
use empathic::session::{replay, run_online_episode, Recording, SessionConfig};

type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

struct Server {
    child: Child,
    url: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(extra: &[&str]) -> Server {
    let f = fixture();
    let mut child = bin()
        .args(["serve", "--bind", "127.0.0.1:0", "--model", s(&f.model)])
        .args(extra)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_string();
    Server { child, url }
}

fn connect(url: &str) -> Ws {
    let (ws, _) = tungstenite::connect(url).unwrap();
    ws
}

fn recv(ws: &mut Ws) -> Value {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Close(_) => panic!("connection closed"),
            _ => {}
        }
    }
}

/// Next message of type `kind`, skipping streamed state and metrics.
fn recv_kind(ws: &mut Ws, kind: &str) -> Value {
    loop {
        let m = recv(ws);
        if m["type"] == kind {
            return m;
        }
    }
}

fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::text(v.to_string())).unwrap();
}

#[test]
fn handshake_gesture_and_errors() {
    let srv = start(&["--live", "--tick-ms", "20"]);
    let mut ws = connect(&srv.url);
    let hello = recv(&mut ws);
    assert_eq!(hello["type"], "ack");
    assert_eq!(hello["payload"]["protocol_version"], 1);
    assert_eq!(hello["payload"]["hypotheses"].as_array().unwrap().len(), 6);

    send(&mut ws, json!({"type": "control", "seq": 1, "payload": {"action": "start"}}));
    assert_eq!(recv_kind(&mut ws, "ack")["payload"]["ack"], 1);
    send(&mut ws, json!({"type": "gesture", "seq": 2, "payload": {"kind": "Smile", "client_ts": 1.5}}));
    let ack = recv_kind(&mut ws, "ack");
    assert_eq!(ack["payload"]["ack"], 2);
    assert!(ack["payload"]["frame"].is_u64());
    assert!(recv_kind(&mut ws, "state")["payload"]["tick"].is_u64());

    // malformed input is answered, and the connection stays usable
    ws.send(Message::text("{not json")).unwrap();
    assert!(recv_kind(&mut ws, "error")["payload"]["reason"].as_str().unwrap().contains("malformed"));
    send(&mut ws, json!({"type": "state", "seq": 3, "payload": {}}));
    recv_kind(&mut ws, "error");
    send(&mut ws, json!({"type": "control", "seq": 2, "payload": {"action": "pause"}}));
    assert!(recv_kind(&mut ws, "error")["payload"]["reason"].as_str().unwrap().contains("seq"));
    send(&mut ws, json!({"type": "control", "seq": 4, "payload": {"action": "pause"}}));
    assert_eq!(recv_kind(&mut ws, "ack")["payload"]["ack"], 4);
}

#[test]
fn second_client_is_rejected() {
    let srv = start(&["--live", "--tick-ms", "50"]);
    let mut first = connect(&srv.url);
    recv(&mut first);
    let mut second = connect(&srv.url);
    let m = recv(&mut second);
    assert_eq!(m["type"], "error");
    assert!(m["payload"]["reason"].as_str().unwrap().contains("already connected"));
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match second.read() {
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => assert!(Instant::now() < deadline, "rejected client not closed"),
        }
    }
    // the first client is unaffected
    send(&mut first, json!({"type": "control", "seq": 1, "payload": {"action": "start"}}));
    assert_eq!(recv_kind(&mut first, "ack")["payload"]["ack"], 1);
    drop(first);
    // and the slot frees up once it leaves
    std::thread::sleep(Duration::from_millis(200));
    let mut third = connect(&srv.url);
    assert_eq!(recv(&mut third)["type"], "ack");
}

#[test]
fn headless_fallback_runs_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("session.rec");
    let mut srv = start(&["--seed", "3", "--tick-ms", "1", "--exit-on-finish", "--record", s(&rec)]);
    let deadline = Instant::now() + Duration::from_secs(60);
    while srv.child.try_wait().unwrap().is_none() {
        assert!(Instant::now() < deadline, "server did not finish");
        std::thread::sleep(Duration::from_millis(20));
    }
    let recording = Recording::load(&rec).unwrap();
    let model = Arc::new(checkpoint::load(&fixture().model).unwrap());
    let (live, _) = replay(&recording, model.clone(), false).unwrap();
    let (log, outcome) = run_online_episode(SessionConfig { seed: 3, ..Default::default() }, model).unwrap();
    assert_eq!(live.session().log(), &log);
    assert_eq!(live.session().metrics(), outcome.metrics.as_slice());
}

#[test]
fn reset_with_seed_matches_fresh_run() {
    let srv = start(&["--live", "--tick-ms", "5"]);
    let mut ws = connect(&srv.url);
    recv(&mut ws);
    send(&mut ws, json!({"type": "control", "seq": 1, "payload": {"action": "reset", "seed": 9}}));
    recv_kind(&mut ws, "ack");
    send(&mut ws, json!({"type": "control", "seq": 2, "payload": {"action": "start"}}));
    let states: Vec<Value> = (0..5).map(|_| recv_kind(&mut ws, "state")["payload"].clone()).collect();

    let srv2 = start(&["--live", "--seed", "9", "--tick-ms", "5"]);
    let mut ws2 = connect(&srv2.url);
    recv(&mut ws2);
    send(&mut ws2, json!({"type": "control", "seq": 1, "payload": {"action": "start"}}));
    let fresh: Vec<Value> = (0..5).map(|_| recv_kind(&mut ws2, "state")["payload"].clone()).collect();
    assert_eq!(states, fresh);
}
