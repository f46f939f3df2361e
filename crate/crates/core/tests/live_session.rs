use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use edgesim_core::bridge::{self, Bridge, BridgeMessage, EngineLink, Role};
use edgesim_core::condition::Condition;
use edgesim_core::device::{Device, DeviceConfig};
use edgesim_core::experiment::{
    compute_stats, run_session, LiveResponder, NoEvents, RemoteRig, RigError, ScriptedResponder, SessionError,
    SessionEvent, SessionPlan, SessionStats,
};
use edgesim_core::protocol::{Client, Server, ServerOptions};
use serde_json::Value;
use tungstenite::{Message as WsMessage, WebSocket};

fn server(time_scale: f64) -> Server {
    let device = Device::new(DeviceConfig::default()).unwrap();
    let opts = ServerOptions {
        time_scale,
        ..ServerOptions::default()
    };
    Server::bind(device, "127.0.0.1:0", opts).unwrap()
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &BridgeMessage) {
    ws.send(WsMessage::Text(msg.to_line())).unwrap();
}

#[derive(Default, Debug)]
struct UiTally {
    accepted: usize,
    rejected: usize,
    frames: usize,
    trial_ends: usize,
    stats: Option<SessionStats>,
}

/// Headless participant: answers EL on every prompt, presses twice, and
/// presses again during each inter-stimulus interval.
fn drive_ui(addr: String) -> UiTally {
    let mut ws = bridge::connect(&addr, Role::Ui).unwrap();
    ws.get_ref().set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let mut tally = UiTally::default();
    let press = |index: u64| {
        BridgeMessage::Response(edgesim_core::experiment::UiResponse {
            index: index as usize,
            choice: Condition::EL,
            client_t_ms: Some(0.0),
        })
    };
    loop {
        let text = match ws.read().unwrap() {
            WsMessage::Text(t) => t,
            _ => continue,
        };
        let v: Value = serde_json::from_str(&text).unwrap();
        match v["type"].as_str().unwrap() {
            "await_response" => {
                let i = v["index"].as_u64().unwrap();
                send(&mut ws, &press(i));
                send(&mut ws, &press(i));
            }
            "trial_end" => {
                tally.trial_ends += 1;
                let i = v["record"]["index"].as_u64().unwrap();
                send(&mut ws, &press(i));
            }
            "accepted" => tally.accepted += 1,
            "rejected" => tally.rejected += 1,
            "frame" => tally.frames += 1,
            "session_end" => {
                tally.stats = Some(serde_json::from_value(v["stats"].clone()).unwrap());
                break;
            }
            _ => {}
        }
    }
    // Let trailing rejections arrive; frames keep streaming meanwhile.
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    let until = Instant::now() + Duration::from_millis(300);
    while Instant::now() < until {
        let Ok(m) = ws.read() else { continue };
        if let WsMessage::Text(t) = m {
            if t.contains("\"rejected\"") {
                tally.rejected += 1;
            }
        }
    }
    tally
}

#[test]
fn live_session_through_bridge() {
    let server = server(20.0);
    let bridge = Bridge::bind("127.0.0.1:0").unwrap();
    bridge.relay_frames(server.frame_tap());
    let bridge = bridge.spawn().unwrap();
    let server = server.spawn().unwrap();

    let url = bridge.url();
    let ui = thread::spawn(move || drive_ui(url));
    // Give the UI time to join before events flow.
    thread::sleep(Duration::from_millis(100));

    let mut link = EngineLink::connect(&bridge.url()).unwrap();
    let mut responder = LiveResponder::new(link.take_responses().unwrap());
    let client = Client::connect(server.addr(), Duration::from_secs(2)).unwrap();
    let mut rig = RemoteRig::new(client, 20.0);
    rig.calibrate_both().unwrap();
    rig.client().stream(true, 10.0).unwrap();
    let plan = SessionPlan {
        repetitions: 1,
        rng_seed: 4,
        response_timeout_s: 10.0,
        ..SessionPlan::default()
    };
    let abort = link.abort_flag();
    let log = run_session(&plan, &mut rig, &mut responder, &mut link, Some(&abort)).unwrap();
    link.close();
    let tally = ui.join().unwrap();

    assert!(log.complete);
    assert_eq!(log.records.len(), 4);
    for r in &log.records {
        assert_eq!(r.responded, Some(Condition::EL));
        assert!(r.response_time_s > 0.0);
        assert!(r.t_response_ms >= r.t_settle_ms);
    }
    assert_eq!(tally.trial_ends, 4);
    assert_eq!(tally.accepted, 4, "{tally:?}");
    // One duplicate and one ISI press per trial.
    assert_eq!(tally.rejected, 8, "{tally:?}");
    assert!(tally.frames > 0);
    assert_eq!(tally.stats.unwrap(), compute_stats(&log.records).unwrap());
}

#[test]
fn ui_abort_stops_session() {
    let server = server(20.0);
    let bridge = Bridge::bind("127.0.0.1:0").unwrap().spawn().unwrap();
    let server = server.spawn().unwrap();
    let mut link = EngineLink::connect(&bridge.url()).unwrap();
    let mut responder = LiveResponder::new(link.take_responses().unwrap());
    let url = bridge.url();
    let ui = thread::spawn(move || {
        let mut ws = bridge::connect(&url, Role::Ui).unwrap();
        loop {
            if let WsMessage::Text(t) = ws.read().unwrap() {
                if t.contains("\"await_response\"") {
                    let v: Value = serde_json::from_str(&t).unwrap();
                    send(&mut ws, &BridgeMessage::Abort);
                    send(
                        &mut ws,
                        &BridgeMessage::Response(edgesim_core::experiment::UiResponse {
                            index: v["index"].as_u64().unwrap() as usize,
                            choice: Condition::SH,
                            client_t_ms: None,
                        }),
                    );
                    break;
                }
            }
        }
    });
    thread::sleep(Duration::from_millis(100));
    let mut rig = RemoteRig::new(Client::connect(server.addr(), Duration::from_secs(2)).unwrap(), 20.0);
    rig.calibrate_both().unwrap();
    let abort = link.abort_flag();
    let log = run_session(&SessionPlan::default(), &mut rig, &mut responder, &mut link, Some(&abort)).unwrap();
    ui.join().unwrap();
    assert!(!log.complete);
    assert_eq!(log.records.len(), 1);
}

#[test]
fn remote_scripted_session_timing() {
    let server = server(50.0);
    let server = server.spawn().unwrap();
    let mut rig = RemoteRig::new(Client::connect(server.addr(), Duration::from_secs(2)).unwrap(), 50.0);
    rig.calibrate_both().unwrap();
    let plan = SessionPlan {
        repetitions: 1,
        rng_seed: 12,
        ..SessionPlan::default()
    };
    let mut events = Vec::new();
    let log = run_session(&plan, &mut rig, &mut ScriptedResponder::perfect(), &mut events, None).unwrap();
    assert!(log.complete);
    assert!(log.records.iter().all(|r| r.correct));
    for w in log.records.windows(2) {
        // settle + response + NC settle + ISI all elapse between commands
        assert!(w[1].t_command_ms - w[0].t_command_ms >= (w[0].t_settle_ms - w[0].t_command_ms) + 1000.0 + 3000.0);
    }
    assert!(matches!(events.last(), Some(SessionEvent::SessionEnd { complete: true, .. })));
}

#[test]
fn server_loss_keeps_partial_log() {
    let server = server(50.0);
    let server = server.spawn().unwrap();
    let mut client = Client::connect(server.addr(), Duration::from_secs(2)).unwrap();
    client.set_timeout(Duration::from_millis(500));
    let mut rig = RemoteRig::new(client, 50.0);
    rig.calibrate_both().unwrap();
    let killer = thread::spawn(move || {
        thread::sleep(Duration::from_millis(700));
        server.shutdown();
    });
    let t = Instant::now();
    let err = run_session(&SessionPlan::default(), &mut rig, &mut ScriptedResponder::perfect(), &mut NoEvents, None)
        .unwrap_err();
    killer.join().unwrap();
    assert!(t.elapsed() < Duration::from_secs(10));
    match err {
        SessionError::Rig { source, partial } => {
            assert!(matches!(source, RigError::Transport(_)), "{source}");
            assert!(!partial.complete);
            assert!(partial.records.len() < 20);
        }
        other => panic!("{other}"),
    }
}
