use ble_lab::config::ScenarioConfig;
use ble_lab::control::{Command, ServerEvent};
use ble_lab::gatt::HEART_RATE_MEASUREMENT;
use ble_lab::mitm::{Decision, ModificationRule, RuleDirection, SessionState, Transform};
use ble_lab::sim::World;

fn cmd(json: &str) -> Command {
    serde_json::from_str(json).unwrap()
}

/// Manual interception with a rule that proposes no change, so every
/// decision is the operator's.
fn manual_world() -> World {
    let mut cfg = ScenarioConfig::paper_attack();
    cfg.mitm.manual_mode = true;
    cfg.mitm.rules = vec![ModificationRule {
        match_uuid: HEART_RATE_MEASUREMENT,
        direction: RuleDirection::ToCentral,
        transform: Transform::Passthrough,
    }];
    World::new(cfg).unwrap()
}

fn bpm_at(w: &World, t: u64) -> Option<u16> {
    w.phone.received.iter().find(|r| r.time_ms == t).map(|r| r.bpm)
}

fn held_ops(events: &[ServerEvent]) -> Vec<(u64, Option<u64>)> {
    events
        .iter()
        .filter_map(|e| match e {
            ServerEvent::Op {
                op_id,
                held: true,
                deadline_ms,
                ..
            } => Some((*op_id, *deadline_ms)),
            _ => None,
        })
        .collect()
}

#[test]
fn hold_modify_drop_and_timeout() {
    let mut w = manual_world();
    w.run_until(62_100);
    let held = held_ops(&w.drain_outbox());
    // The subscription relayed automatically; the first notify waits.
    assert_eq!(held, [(2, Some(92_005))]);
    assert_eq!(w.phone.received.last().unwrap().bpm, 70);

    w.apply(cmd(r#"{"type":"decision","op_id":2,"action":"modify","bytes_hex":"00ff"}"#))
        .unwrap();
    w.run_until(63_100);
    assert_eq!(bpm_at(&w, 62_105), Some(255));
    assert_eq!(w.session().unwrap().entry(2).unwrap().decision, Decision::ManualModify);
    assert_eq!(w.session().unwrap().entry(2).unwrap().after_hex, "00ff");

    w.apply(cmd(r#"{"type":"decision","op_id":3,"action":"drop"}"#)).unwrap();
    w.run_until(64_100);
    assert_eq!(bpm_at(&w, 63_105), None);
    assert!(w.phone.received.iter().all(|r| !(63_000..64_100).contains(&r.time_ms)));
    assert_eq!(w.session().unwrap().entry(3).unwrap().decision, Decision::ManualDrop);

    w.apply(cmd(r#"{"type":"decision","op_id":4,"action":"forward"}"#)).unwrap();
    w.run_until(64_200);
    assert_eq!(bpm_at(&w, 64_105), Some(70));

    // Nobody answers op 5: it goes out unchanged at its deadline.
    w.run_until(95_010);
    let e = w.session().unwrap().entry(5).unwrap();
    assert_eq!(e.decision, Decision::TimeoutForward);
    assert_eq!(e.before_hex, e.after_hex);
    assert_eq!(bpm_at(&w, 95_010), Some(70));
    assert!(w.session().unwrap().held_ids().count() >= 29);
}

#[test]
fn bad_decisions_are_reported() {
    let mut w = manual_world();
    w.run_until(62_100);
    w.drain_outbox();
    assert!(w.apply(cmd(r#"{"type":"decision","op_id":1,"action":"forward"}"#)).is_err());
    assert!(w.apply(cmd(r#"{"type":"decision","op_id":2,"action":"modify"}"#)).is_err());
    assert!(w.apply(cmd(r#"{"type":"decision","op_id":2,"action":"modify","bytes_hex":"zz"}"#)).is_err());
    assert!(w.apply(cmd(r#"{"type":"decision","op_id":99,"action":"drop"}"#)).is_err());
    let errors: Vec<serde_json::Value> = w
        .drain_outbox()
        .iter()
        .map(|e| serde_json::to_value(e).unwrap())
        .collect();
    assert_eq!(errors.len(), 4);
    assert!(errors.iter().all(|e| e["type"] == "error" && e["command"] == "decision"));
    // Still held after the rejected attempts.
    assert_eq!(w.session().unwrap().held_ids().collect::<Vec<_>>(), [2]);
}

#[test]
fn replay_resends_exact_bytes() {
    let mut w = World::new(ScenarioConfig::paper_attack()).unwrap();
    w.run_until(62_500);
    let original = w.session().unwrap().entry(2).unwrap().clone();
    w.apply(cmd(r#"{"type":"replay","op_id":2}"#)).unwrap();
    w.run_until(62_600);
    assert_eq!(bpm_at(&w, 62_505), Some(255));
    let s = w.session().unwrap();
    let copies: Vec<_> = s.journal().filter(|e| e.time_ms == 62_500).collect();
    assert_eq!(copies.len(), 1);
    assert_eq!(copies[0].before_hex, original.after_hex);
    assert_eq!(copies[0].after_hex, original.after_hex);
    assert!(w.apply(cmd(r#"{"type":"replay","op_id":500}"#)).is_err());
}

#[test]
fn switching_manual_mode_mid_session() {
    let mut w = World::new(ScenarioConfig::paper_attack()).unwrap();
    w.run_until(63_000);
    assert!(w.session().unwrap().held_ids().next().is_none());
    w.apply(cmd(r#"{"type":"set_manual","on":true}"#)).unwrap();
    w.run_until(64_100);
    let held: Vec<u64> = w.session().unwrap().held_ids().collect();
    // Notifies arriving at 63 005 and 64 005.
    assert_eq!(held.len(), 2);
    w.apply(cmd(r#"{"type":"set_manual","on":false}"#)).unwrap();
    for id in held {
        w.apply(cmd(&format!(r#"{{"type":"decision","op_id":{id},"action":"forward"}}"#)))
            .unwrap();
    }
    w.run_until(66_000);
    assert!(w.session().unwrap().held_ids().next().is_none());
    assert!(w.phone.received.iter().filter(|r| r.time_ms > 62_000).all(|r| r.bpm == 255));
}

#[test]
fn rules_can_change_live() {
    let mut w = World::new(ScenarioConfig::paper_attack()).unwrap();
    w.run_until(63_000);
    w.apply(cmd(
        r#"{"type":"set_rules","rules":[{"match_uuid":"2A37","direction":"to_central","transform":{"kind":"hr_offset","delta":-20}}]}"#,
    ))
    .unwrap();
    w.run_until(66_000);
    assert_eq!(bpm_at(&w, 64_010), Some(50));
    let bad = w.apply(cmd(
        r#"{"type":"set_rules","rules":[{"match_uuid":"2A38","direction":"both","transform":{"kind":"hr_override","bpm":1}}]}"#,
    ));
    assert!(bad.is_err());
    w.run_until(67_000);
    assert_eq!(bpm_at(&w, 66_010), Some(50));
}

#[test]
fn operator_session_lifecycle() {
    let mut cfg = ScenarioConfig::default();
    cfg.mitm.rules = ScenarioConfig::paper_attack().mitm.rules;
    let mut w = World::new(cfg).unwrap();
    w.run_until(5_000);
    w.apply(cmd(r#"{"type":"list_devices"}"#)).unwrap();
    let roster: Vec<serde_json::Value> = w
        .drain_outbox()
        .iter()
        .map(|e| serde_json::to_value(e).unwrap())
        .filter(|v| v["type"] == "device")
        .collect();
    assert_eq!(roster.len(), 4);
    assert_eq!(roster.iter().filter(|d| d["is_fake"] == true).count(), 1);
    assert!(roster.iter().any(|d| d["name"] == "PolarSim H7" && d["connected_to"].is_string()));

    w.apply(cmd(r#"{"type":"start_mitm","target":"PolarSim H7"}"#)).unwrap();
    w.run_until(8_000);
    assert_eq!(w.session().unwrap().state, SessionState::Active);
    let states: Vec<SessionState> = w
        .drain_outbox()
        .iter()
        .filter_map(|e| match e {
            ServerEvent::Session { state, .. } => Some(*state),
            _ => None,
        })
        .collect();
    assert_eq!(states, [SessionState::Cloning, SessionState::Active]);
    assert!(w.phone.received.iter().any(|r| r.bpm == 255));

    w.apply(cmd(r#"{"type":"stop_mitm"}"#)).unwrap();
    w.run_until(12_000);
    assert_eq!(w.session().unwrap().state, SessionState::Stopped);
    let last = w.phone.received.last().unwrap();
    assert_eq!((last.bpm, last.from), (70, ble_lab::sim::SENSOR_ADDRESS));
    assert!(w.apply(cmd(r#"{"type":"stop_mitm"}"#)).is_err());
}

#[test]
fn streaming_events_carry_readings() {
    let mut w = World::new(ScenarioConfig {
        seed: 2,
        ..ScenarioConfig::default()
    })
    .unwrap();
    w.run_until(5_000);
    let events: Vec<serde_json::Value> = w
        .drain_outbox()
        .iter()
        .map(|e| serde_json::to_value(e).unwrap())
        .collect();
    let hr = events.iter().filter(|e| e["type"] == "hr").count();
    let rssi = events.iter().filter(|e| e["type"] == "rssi").count();
    assert_eq!(hr, w.phone.received.len());
    assert_eq!(rssi, hr);
    assert!(events.iter().all(|e| e["type"] != "alert"));
}
