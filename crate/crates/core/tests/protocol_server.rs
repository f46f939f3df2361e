use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use approx::assert_abs_diff_eq;
use edgesim_core::condition::Condition;
use edgesim_core::device::{Device, DeviceConfig};
use edgesim_core::error::ErrorCode;
use edgesim_core::mechmodel::Axis;
use edgesim_core::protocol::{decode, Client, ClientError, Message, Server, ServerHandle, ServerOptions};

fn serve(time_scale: f64) -> ServerHandle {
    serve_with(DeviceConfig::default(), time_scale)
}

fn serve_with(config: DeviceConfig, time_scale: f64) -> ServerHandle {
    let device = Device::new(config).unwrap();
    let opts = ServerOptions {
        time_scale,
        ..ServerOptions::default()
    };
    Server::bind(device, "127.0.0.1:0", opts).unwrap().spawn().unwrap()
}

fn connect(h: &ServerHandle) -> Client {
    Client::connect(h.addr(), Duration::from_secs(2)).unwrap()
}

fn wait_settled(c: &mut Client) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while c.status().unwrap().moving {
        assert!(Instant::now() < deadline, "device never settled");
        std::thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn hello_comes_first() {
    let h = serve(1.0);
    let stream = TcpStream::connect(h.addr()).unwrap();
    let mut line = String::new();
    BufReader::new(stream).read_line(&mut line).unwrap();
    assert_eq!(line, "{\"type\":\"hello\",\"version\":1}\n");
}

#[test]
fn fresh_device_status() {
    let h = serve(1.0);
    let mut c = connect(&h);
    assert_eq!(c.server_version(), 1);
    let s = c.status().unwrap();
    assert_eq!((s.surface_mm, s.edge_mm, s.moving), (0.0, 0.0, false));
    assert!(!s.calibrated_surface && !s.calibrated_edge);
}

#[test]
fn raw_lines_get_one_reply_each_in_order() {
    let h = serve(1.0);
    let mut stream = TcpStream::connect(h.addr()).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    stream
        .write_all(
            b"{\"type\":\"status\"}\n{\"type\":\"warp\"}\n{\"type\":\"preset\"}\n{\"type\":\"move\",\"surface_mm\":0.35}\n{\"type\":\"status\",\"extra\":[1,2]}\n",
        )
        .unwrap();
    let mut replies = Vec::new();
    for _ in 0..5 {
        line.clear();
        reader.read_line(&mut line).unwrap();
        replies.push(decode(line.as_bytes()).unwrap());
    }
    assert!(matches!(replies[0], Message::State { .. }));
    assert!(matches!(&replies[1], Message::Error { code: ErrorCode::Protocol, .. }));
    match &replies[2] {
        Message::Error {
            code: ErrorCode::Protocol,
            detail,
        } => assert!(detail.contains("condition"), "{detail}"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(&replies[3], Message::Error { code: ErrorCode::NotCalibrated, .. }));
    assert!(matches!(replies[4], Message::State { .. }));
}

#[test]
fn preset_sh_then_status() {
    let h = serve(20.0);
    let mut c = connect(&h);
    c.calibrate(Axis::Surface).unwrap();
    c.calibrate(Axis::Edge).unwrap();
    c.preset(Condition::SH).unwrap();
    wait_settled(&mut c);
    let s = c.status().unwrap();
    assert_abs_diff_eq!(s.surface_mm, 0.70, epsilon = 0.0075);
    assert_abs_diff_eq!(s.edge_mm, -1.5, epsilon = 0.03);
    assert!(!s.moving && s.calibrated_surface && s.calibrated_edge);
}

#[test]
fn motion_policy_retargets_and_calibrate_is_busy() {
    let h = serve(1.0);
    let mut c = connect(&h);
    c.calibrate(Axis::Surface).unwrap();
    c.calibrate(Axis::Edge).unwrap();
    // Edge moves take seconds at real time.
    let first = c.move_to(None, Some(3.0)).unwrap();
    assert!(first.moving);
    let second = c.move_to(None, Some(-3.0)).unwrap();
    assert!(second.moving);
    match c.calibrate(Axis::Edge) {
        Err(ClientError::Device { code, .. }) => assert_eq!(code, ErrorCode::Busy),
        other => panic!("{other:?}"),
    }
    let target = h.with_device(|d| d.target_mm(Axis::Edge));
    assert_abs_diff_eq!(target, -3.0, epsilon = 0.03);
}

#[test]
fn out_of_window_move_rejected() {
    let h = serve(1.0);
    let mut c = connect(&h);
    c.calibrate(Axis::Surface).unwrap();
    match c.move_to(Some(0.875), None) {
        Err(ClientError::Device { code, .. }) => assert_eq!(code, ErrorCode::OutOfRange),
        other => panic!("{other:?}"),
    }
}

#[test]
fn ten_hz_stream_over_one_second() {
    let h = serve(1.0);
    let mut c = connect(&h);
    c.stream(true, 10.0).unwrap();
    std::thread::sleep(Duration::from_millis(1100));
    c.stream(false, 10.0).unwrap();
    let frames = c.drain_frames();
    assert!(frames.len() >= 9, "{} frames", frames.len());
    assert!(frames.windows(2).all(|w| w[0].t_ms < w[1].t_ms));
    let in_first_second = frames.iter().filter(|f| f.t_ms <= frames[0].t_ms - 100 + 1000).count();
    assert!(in_first_second >= 9);
}

#[test]
fn responses_stay_ordered_while_streaming() {
    let h = serve(5.0);
    let mut c = connect(&h);
    c.stream(true, 200.0).unwrap();
    for _ in 0..200 {
        assert!(matches!(c.request(&Message::Status).unwrap(), Message::State { .. }));
    }
    c.stream(false, 1.0).unwrap();
    let frames = c.drain_frames();
    assert!(!frames.is_empty());
    assert!(frames.windows(2).all(|w| w[0].t_ms < w[1].t_ms));
}

#[test]
fn disconnect_stops_stream_and_keeps_targets() {
    let h = serve(1.0);
    {
        let mut c = connect(&h);
        c.calibrate(Axis::Surface).unwrap();
        c.calibrate(Axis::Edge).unwrap();
        c.stream(true, 10.0).unwrap();
        c.move_to(None, Some(3.0)).unwrap();
    }
    let deadline = Instant::now() + Duration::from_secs(2);
    while h.with_device(|d| d.is_streaming()) {
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
    let target = h.with_device(|d| d.target_mm(Axis::Edge));
    assert_abs_diff_eq!(target, 3.0, epsilon = 0.03);
    // A new client sees the same device.
    let mut c = connect(&h);
    assert!(c.status().unwrap().calibrated_edge);
}

#[test]
fn spool_override_changes_edge_timing() {
    let mut config = DeviceConfig::default();
    config.mechanism.edge.spool_radius_mm = 10.0;
    let h = serve_with(config, 1.0);
    let mut c = connect(&h);
    c.calibrate(Axis::Edge).unwrap();
    c.move_to(None, Some(1.5)).unwrap();
    // Twice the radius: half the steps, so half the settle time.
    let eta = h.with_device(|d| d.settle_eta_ms());
    let default_eta = {
        let mut d = Device::new(DeviceConfig::default()).unwrap();
        d.calibrate(Axis::Edge).unwrap();
        d.apply(&edgesim_core::DeviceCommand::Move {
            surface_mm: None,
            edge_mm: Some(1.5),
        })
        .unwrap();
        d.settle_eta_ms()
    };
    assert!(eta < default_eta * 6 / 10, "{eta} vs {default_eta}");
}

#[test]
fn request_after_kill_is_transport_error() {
    let h = serve(1.0);
    let mut c = connect(&h);
    c.set_timeout(Duration::from_millis(500));
    h.shutdown();
    let t = Instant::now();
    let err = c.status().unwrap_err();
    assert!(err.is_transport(), "{err}");
    assert!(t.elapsed() < Duration::from_secs(1));
}
