use std::io::{Read, Write};
use std::net::SocketAddr;
use std::time::Duration;

use ble_lab::config::ScenarioConfig;
use ble_lab::gatt::HEART_RATE_MEASUREMENT;
use ble_lab::mitm::{ModificationRule, RuleDirection, Transform};
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn start(config: ScenarioConfig, time_scale: f64) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = super::router(config, time_scale).unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

/// Minimal HTTP/1.1 exchange; returns status and JSON body.
async fn http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, Value) {
    let request = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    tokio::task::spawn_blocking(move || {
        let mut stream = std::net::TcpStream::connect(addr).unwrap();
        stream.write_all(request.as_bytes()).unwrap();
        let mut raw = String::new();
        stream.read_to_string(&mut raw).unwrap();
        let status: u16 = raw[9..12].parse().unwrap();
        let (_, payload) = raw.split_once("\r\n\r\n").unwrap();
        (status, serde_json::from_str(payload).unwrap())
    })
    .await
    .unwrap()
}

async fn connect(addr: SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn send(ws: &mut Ws, json: &str) {
    ws.send(Message::Text(json.into())).await.unwrap();
}

/// Reads events until one satisfies `pred`, returning everything read.
async fn read_until(ws: &mut Ws, pred: impl Fn(&Value) -> bool) -> Vec<Value> {
    let mut seen = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(30);
    loop {
        let msg = tokio::time::timeout_at(deadline, ws.next())
            .await
            .expect("timed out waiting for event")
            .unwrap()
            .unwrap();
        if let Message::Text(t) = msg {
            let v: Value = serde_json::from_str(t.as_str()).unwrap();
            let done = pred(&v);
            seen.push(v);
            if done {
                return seen;
            }
        }
    }
}

fn manual_config() -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        seed: 2,
        ..ScenarioConfig::default()
    };
    cfg.mitm.manual_mode = true;
    cfg.mitm.hold_timeout_ms = 3_600_000;
    cfg.mitm.rules = vec![ModificationRule {
        match_uuid: HEART_RATE_MEASUREMENT,
        direction: RuleDirection::ToCentral,
        transform: Transform::Passthrough,
    }];
    cfg
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_holds_and_edits_a_notification() {
    let addr = start(manual_config(), 100.0).await;
    // Five virtual seconds: the phone is connected and the core has heard
    // the sensor advertise.
    tokio::time::sleep(Duration::from_millis(50)).await;

    let (status, roster) = http(addr, "GET", "/api/devices", "").await;
    assert_eq!(status, 200);
    let devices: Vec<&Value> = roster.as_array().unwrap().iter().filter(|e| e["type"] == "device").collect();
    assert_eq!(devices.len(), 4);
    assert_eq!(devices.iter().filter(|d| d["is_fake"] == true).count(), 1);
    assert!(devices.iter().any(|d| d["name"] == "PolarSim H7"));

    let mut ws = connect(addr).await;
    send(&mut ws, r#"{"type":"start_mitm","target":"PolarSim H7"}"#).await;
    let events = read_until(&mut ws, |e| e["type"] == "op" && e["held"] == true).await;
    assert!(events.iter().any(|e| e["type"] == "ack" && e["command"] == "start_mitm"));
    assert!(events.iter().any(|e| e["type"] == "session" && e["state"] == "active"));
    let held = events.last().unwrap();
    assert_eq!(held["uuid"], "0x2a37");
    assert_eq!(held["direction"], "to_central");
    let op_id = held["op_id"].as_u64().unwrap();

    let body = format!(r#"{{"type":"decision","op_id":{op_id},"action":"modify","bytes_hex":"00ff"}}"#);
    let (status, reply) = http(addr, "POST", "/api/command", &body).await;
    assert_eq!(status, 200, "{reply}");
    let reply = reply.as_array().unwrap();
    let decided = reply.iter().find(|e| e["type"] == "op").unwrap();
    assert_eq!(decided["op_id"].as_u64(), Some(op_id));
    assert_eq!(decided["decision"], "manual-modify");
    assert_eq!(decided["after_hex"], "00ff");
    assert_eq!(reply.last().unwrap()["type"], "ack");

    read_until(&mut ws, |e| e["type"] == "hr" && e["bpm"] == 255).await;

    let (status, reply) = http(addr, "POST", "/api/command", &body).await;
    assert_eq!(status, 400);
    assert_eq!(reply[0]["type"], "error");
    let (status, _) = http(addr, "POST", "/api/command", r#"{"type":"reboot"}"#).await;
    assert_eq!(status, 400);

    send(&mut ws, "not json").await;
    let events = read_until(&mut ws, |e| e["type"] == "error" && e.get("command").is_none()).await;
    assert!(!events.is_empty());
}

#[tokio::test(flavor = "multi_thread")]
async fn unattended_holds_time_out() {
    let mut cfg = manual_config();
    cfg.mitm.enabled = true;
    cfg.mitm.start_ms = 2_000;
    cfg.mitm.hold_timeout_ms = 5_000;
    let addr = start(cfg, 200.0).await;
    tokio::time::sleep(Duration::from_millis(300)).await;
    let mut ws = connect(addr).await;
    let events = read_until(&mut ws, |e| e["type"] == "op" && e["decision"] == "timeout-forward").await;
    let released = events.last().unwrap();
    assert_eq!(released["before_hex"], released["after_hex"]);
    assert!(events
        .iter()
        .any(|e| e["type"] == "op" && e["held"] == true && e["op_id"] == released["op_id"]));
}

#[tokio::test(flavor = "multi_thread")]
async fn reconnecting_replays_the_same_history() {
    let addr = start(manual_config(), 100.0).await;
    // The core needs to have heard the target advertise first.
    loop {
        let (status, reply) = http(addr, "POST", "/api/command", r#"{"type":"start_mitm","target":"PolarSim H7"}"#).await;
        if status == 200 {
            break;
        }
        assert!(reply[0]["message"].as_str().unwrap().contains("seen advertising"), "{reply}");
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    let mut first = connect(addr).await;
    let a = read_until(&mut first, |e| e["type"] == "op" && e["held"] == true).await;
    drop(first);
    let mut second = connect(addr).await;
    let b = read_until(&mut second, |e| e["type"] == "op" && e["held"] == true).await;
    assert_eq!(a, b);
}

#[tokio::test(flavor = "multi_thread")]
async fn rejects_bad_time_scale() {
    assert!(super::router(ScenarioConfig::default(), 0.0).is_err());
    assert!(super::router(ScenarioConfig::default(), f64::NAN).is_err());
}
