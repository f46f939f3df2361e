//! Psychophysics session engine.
//!
//! A session presents each condition `repetitions` times in a seeded random
//! order. Every trial issues the preset, waits for the device to settle,
//! collects a response, then returns the device to the no-contact pose and
//! holds it there for the inter-stimulus interval (clocked from the
//! no-contact settle).
//!
//! The engine talks to the device through a [`Rig`] and to the participant
//! through a [`Responder`], so the same loop drives an in-process simulator
//! on simulated time, a remote device over the wire protocol, or a live UI.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::Condition;
use crate::device::{Device, DeviceCommand};
use crate::mechmodel::Axis;
use crate::protocol::{Client, ClientError};

pub const DEFAULT_RESPONSE_TIMEOUT_S: f64 = 30.0;
/// Simulated time allowed for any single settle before the rig gives up.
pub const SETTLE_LIMIT_MS: u64 = 120_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPlan {
    pub repetitions: u32,
    pub conditions: Vec<Condition>,
    pub isi_s: f64,
    pub rng_seed: u64,
    pub response_timeout_s: f64,
}

impl Default for SessionPlan {
    fn default() -> Self {
        SessionPlan {
            repetitions: 5,
            conditions: Condition::STIMULI.to_vec(),
            isi_s: 3.0,
            rng_seed: 0,
            response_timeout_s: DEFAULT_RESPONSE_TIMEOUT_S,
        }
    }
}

impl SessionPlan {
    pub fn with_seed(seed: u64) -> Self {
        SessionPlan {
            rng_seed: seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        if self.repetitions == 0 {
            return Err(SessionError::InvalidPlan("repetitions must be at least 1".into()));
        }
        if self.conditions.is_empty() {
            return Err(SessionError::InvalidPlan("no conditions".into()));
        }
        let mut seen = self.conditions.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.conditions.len() {
            return Err(SessionError::InvalidPlan("conditions must be distinct".into()));
        }
        if !(self.isi_s >= 0.0 && self.isi_s.is_finite()) {
            return Err(SessionError::InvalidPlan(format!("bad ISI {}", self.isi_s)));
        }
        if !(self.response_timeout_s > 0.0) {
            return Err(SessionError::InvalidPlan("response timeout must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded uniform shuffle of `repetitions` copies of each condition.
///
/// The unshuffled order is `conditions` repeated `repetitions` times; it is
/// shuffled in place with a ChaCha8 generator seeded from `rng_seed`.
pub fn make_schedule(plan: &SessionPlan) -> Result<Vec<Condition>, SessionError> {
    plan.validate()?;
    let mut schedule: Vec<Condition> = (0..plan.repetitions)
        .flat_map(|_| plan.conditions.iter().copied())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.rng_seed);
    schedule.shuffle(&mut rng);
    Ok(schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub presented: Condition,
    /// `None` when the responder timed out.
    pub responded: Option<Condition>,
    pub correct: bool,
    /// From preset command to response receipt.
    pub response_time_s: f64,
    pub t_command_ms: f64,
    pub t_settle_ms: f64,
    pub t_response_ms: f64,
}

impl TrialRecord {
    /// Response time measured from the stimulus settle instead of the command.
    pub fn settle_response_time_s(&self) -> f64 {
        (self.t_response_ms - self.t_settle_ms) / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub schedule: Vec<Condition>,
    pub records: Vec<TrialRecord>,
    /// False when the session stopped before the last scheduled trial.
    pub complete: bool,
}

#[derive(Debug, Error)]
pub enum RigError {
    #[error("device not calibrated: {0}")]
    NotCalibrated(String),
    #[error("device did not settle within {0} ms")]
    SettleTimeout(u64),
    #[error("device rejected command: {0}")]
    Device(String),
    #[error("transport failure: {0}")]
    Transport(String),
}

impl From<ClientError> for RigError {
    fn from(e: ClientError) -> Self {
        if e.is_transport() {
            RigError::Transport(e.to_string())
        } else {
            RigError::Device(e.to_string())
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session plan: {0}")]
    InvalidPlan(String),
    #[error("session stopped after {} of {} trials: {source}", partial.records.len(), partial.schedule.len())]
    Rig {
        source: RigError,
        partial: Box<SessionLog>,
    },
    #[error("device not ready: {0}")]
    NotReady(RigError),
    #[error("no trial records")]
    EmptyRecords,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
}

/// The device side of a session, with its own notion of time.
pub trait Rig {
    /// Session clock, milliseconds.
    fn now_ms(&self) -> f64;
    /// Both axes calibrated.
    fn ensure_ready(&mut self) -> Result<(), RigError>;
    fn present(&mut self, condition: Condition) -> Result<(), RigError>;
    fn await_settle(&mut self) -> Result<(), RigError>;
    fn wait(&mut self, seconds: f64) -> Result<(), RigError>;
}

/// In-process simulator running on simulated time; waits cost nothing.
pub struct SimRig {
    device: Device,
}

impl SimRig {
    pub fn new(device: Device) -> Self {
        SimRig { device }
    }

    /// Wraps a device after calibrating both axes.
    pub fn calibrated(mut device: Device) -> Self {
        device.calibrate(Axis::Surface).expect("idle device calibrates");
        device.calibrate(Axis::Edge).expect("idle device calibrates");
        SimRig { device }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn into_device(self) -> Device {
        self.device
    }
}

impl Rig for SimRig {
    fn now_ms(&self) -> f64 {
        self.device.clock_ms() as f64
    }

    fn ensure_ready(&mut self) -> Result<(), RigError> {
        let s = self.device.status();
        if s.calibrated_surface && s.calibrated_edge {
            Ok(())
        } else {
            Err(RigError::NotCalibrated(format!(
                "surface={} edge={}",
                s.calibrated_surface, s.calibrated_edge
            )))
        }
    }

    fn present(&mut self, condition: Condition) -> Result<(), RigError> {
        self.device
            .apply(&DeviceCommand::Preset(condition))
            .map_err(|e| RigError::Device(e.to_string()))
    }

    fn await_settle(&mut self) -> Result<(), RigError> {
        self.device.run_until_settled(5, SETTLE_LIMIT_MS);
        if self.device.is_moving() {
            return Err(RigError::SettleTimeout(SETTLE_LIMIT_MS));
        }
        Ok(())
    }

    fn wait(&mut self, seconds: f64) -> Result<(), RigError> {
        let ms = (seconds * 1000.0).round().max(0.0) as u64;
        if ms > 0 {
            self.device.tick(ms);
        }
        Ok(())
    }
}

/// Remote device reached through the wire protocol; waits block in real
/// time divided by the server's time scale.
pub struct RemoteRig {
    client: Client,
    start: Instant,
    time_scale: f64,
    poll: Duration,
}

impl RemoteRig {
    pub fn new(client: Client, time_scale: f64) -> Self {
        RemoteRig {
            client,
            start: Instant::now(),
            time_scale,
            poll: Duration::from_millis(10),
        }
    }

    pub fn client(&mut self) -> &mut Client {
        &mut self.client
    }

    pub fn calibrate_both(&mut self) -> Result<(), RigError> {
        self.client.calibrate(Axis::Surface)?;
        self.client.calibrate(Axis::Edge)?;
        Ok(())
    }
}

impl Rig for RemoteRig {
    fn now_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1000.0 * self.time_scale
    }

    fn ensure_ready(&mut self) -> Result<(), RigError> {
        let s = self.client.status()?;
        if s.calibrated_surface && s.calibrated_edge {
            Ok(())
        } else {
            Err(RigError::NotCalibrated(format!(
                "surface={} edge={}",
                s.calibrated_surface, s.calibrated_edge
            )))
        }
    }

    fn present(&mut self, condition: Condition) -> Result<(), RigError> {
        self.client.preset(condition)?;
        Ok(())
    }

    fn await_settle(&mut self) -> Result<(), RigError> {
        let deadline = Instant::now() + Duration::from_secs_f64(SETTLE_LIMIT_MS as f64 / 1000.0 / self.time_scale);
        loop {
            if !self.client.status()?.moving {
                return Ok(());
            }
            if Instant::now() > deadline {
                return Err(RigError::SettleTimeout(SETTLE_LIMIT_MS));
            }
            thread::sleep(self.poll);
        }
    }

    fn wait(&mut self, seconds: f64) -> Result<(), RigError> {
        thread::sleep(Duration::from_secs_f64(seconds.max(0.0) / self.time_scale));
        Ok(())
    }
}

/// What a responder is asked after the stimulus settles.
#[derive(Debug, Clone)]
pub struct Prompt<'a> {
    pub index: usize,
    pub presented: Condition,
    pub choices: &'a [Condition],
    pub timeout_s: f64,
}

pub trait Responder {
    /// Returns the chosen condition, or `None` on timeout. Scripted responders
    /// spend their latency on the rig clock.
    fn respond(&mut self, prompt: &Prompt<'_>, rig: &mut dyn Rig) -> Result<Option<Condition>, RigError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRule {
    pub from: Condition,
    pub to: Condition,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptKind {
    /// Always answers the presented condition.
    Perfect,
    /// Answers `to` instead of `from` with probability `prob`.
    Confusion(Vec<ConfusionRule>),
    /// Never answers.
    Silent,
}

#[derive(Debug, Error)]
#[error("bad responder spec `{spec}`: {msg}")]
pub struct ResponderSpecError {
    spec: String,
    msg: String,
}

impl FromStr for ScriptKind {
    type Err = ResponderSpecError;

    /// `perfect`, `silent`, or `confusion:SH->SL:0.16[,EL->EH:0.05...]`.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let err = |msg: &str| ResponderSpecError {
            spec: spec.to_string(),
            msg: msg.to_string(),
        };
        match spec.trim() {
            "perfect" => return Ok(ScriptKind::Perfect),
            "silent" => return Ok(ScriptKind::Silent),
            _ => {}
        }
        let rules = spec
            .trim()
            .strip_prefix("confusion:")
            .ok_or_else(|| err("expected perfect, silent or confusion:<FROM>-><TO>:<p>"))?;
        let mut out = Vec::new();
        for rule in rules.split(',') {
            let (pair, prob) = rule.rsplit_once(':').ok_or_else(|| err("missing probability"))?;
            let (from, to) = pair.split_once("->").ok_or_else(|| err("expected FROM->TO"))?;
            let from: Condition = from.parse().map_err(|e: crate::condition::UnknownCondition| err(&e.to_string()))?;
            let to: Condition = to.parse().map_err(|e: crate::condition::UnknownCondition| err(&e.to_string()))?;
            let prob: f64 = prob.trim().parse().map_err(|_| err("probability is not a number"))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(err("probability outside [0, 1]"));
            }
            out.push(ConfusionRule { from, to, prob });
        }
        Ok(ScriptKind::Confusion(out))
    }
}

/// Deterministic stand-in for a participant.
#[derive(Debug, Clone)]
pub struct ScriptedResponder {
    kind: ScriptKind,
    latency_s: f64,
    rng: ChaCha8Rng,
}

impl ScriptedResponder {
    pub const DEFAULT_LATENCY_S: f64 = 1.0;

    pub fn new(kind: ScriptKind, seed: u64) -> Self {
        ScriptedResponder {
            kind,
            latency_s: Self::DEFAULT_LATENCY_S,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn perfect() -> Self {
        Self::new(ScriptKind::Perfect, 0)
    }

    pub fn with_latency(mut self, latency_s: f64) -> Self {
        self.latency_s = latency_s;
        self
    }
}

impl Responder for ScriptedResponder {
    fn respond(&mut self, prompt: &Prompt<'_>, rig: &mut dyn Rig) -> Result<Option<Condition>, RigError> {
        match &self.kind {
            ScriptKind::Silent => {
                rig.wait(prompt.timeout_s)?;
                Ok(None)
            }
            ScriptKind::Perfect => {
                rig.wait(self.latency_s)?;
                Ok(Some(prompt.presented))
            }
            ScriptKind::Confusion(rules) => {
                rig.wait(self.latency_s)?;
                let mut answer = prompt.presented;
                // One draw per trial keeps the stream aligned across rule sets.
                let u: f64 = self.rng.gen();
                let mut acc = 0.0;
                for rule in rules.iter().filter(|r| r.from == prompt.presented) {
                    acc += rule.prob;
                    if u < acc {
                        answer = rule.to;
                        break;
                    }
                }
                Ok(Some(answer))
            }
        }
    }
}

/// A participant answer delivered from a live interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiResponse {
    pub index: usize,
    pub choice: Condition,
    /// Advisory client timestamp; the engine clock is authoritative.
    #[serde(default)]
    pub client_t_ms: Option<f64>,
}

/// Waits for UI responses. Only the first answer carrying the current trial
/// index is accepted; answers for other trials are discarded.
pub struct LiveResponder {
    incoming: Receiver<UiResponse>,
}

impl LiveResponder {
    pub fn new(incoming: Receiver<UiResponse>) -> Self {
        LiveResponder { incoming }
    }
}

impl Responder for LiveResponder {
    fn respond(&mut self, prompt: &Prompt<'_>, _rig: &mut dyn Rig) -> Result<Option<Condition>, RigError> {
        let deadline = Instant::now() + Duration::from_secs_f64(prompt.timeout_s);
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.incoming.recv_timeout(left) {
                Ok(r) if r.index == prompt.index && prompt.choices.contains(&r.choice) => {
                    return Ok(Some(r.choice))
                }
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(RigError::Transport("response channel closed".into()))
                }
            }
        }
    }
}

/// Live-session events, encoded like wire messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    TrialStart { index: usize, total: usize },
    AwaitResponse { index: usize, t0: f64 },
    TrialEnd { record: TrialRecord },
    SessionEnd { stats: SessionStats, complete: bool },
}

impl SessionEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

pub trait EventSink {
    fn emit(&mut self, event: &SessionEvent);
}

impl EventSink for Vec<SessionEvent> {
    fn emit(&mut self, event: &SessionEvent) {
        self.push(event.clone());
    }
}

/// Discards events.
pub struct NoEvents;

impl EventSink for NoEvents {
    fn emit(&mut self, _event: &SessionEvent) {}
}

/// Runs the schedule. Setting `abort` stops before the next trial and
/// returns the records so far with `complete = false`.
pub fn run_session(
    plan: &SessionPlan,
    rig: &mut dyn Rig,
    responder: &mut dyn Responder,
    events: &mut dyn EventSink,
    abort: Option<&AtomicBool>,
) -> Result<SessionLog, SessionError> {
    let schedule = make_schedule(plan)?;
    rig.ensure_ready().map_err(SessionError::NotReady)?;
    let mut log = SessionLog {
        schedule: schedule.clone(),
        records: Vec::with_capacity(schedule.len()),
        complete: false,
    };
    for (index, &presented) in schedule.iter().enumerate() {
        if abort.is_some_and(|a| a.load(Ordering::SeqCst)) {
            break;
        }
        match run_trial(plan, index, presented, schedule.len(), rig, responder, events) {
            Ok(record) => log.records.push(record),
            Err(source) => {
                finish(&log, events);
                return Err(SessionError::Rig {
                    source,
                    partial: Box::new(log),
                });
            }
        }
    }
    log.complete = log.records.len() == schedule.len();
    finish(&log, events);
    Ok(log)
}

fn finish(log: &SessionLog, events: &mut dyn EventSink) {
    if let Ok(stats) = compute_stats(&log.records) {
        events.emit(&SessionEvent::SessionEnd {
            stats,
            complete: log.complete,
        });
    }
}

fn run_trial(
    plan: &SessionPlan,
    index: usize,
    presented: Condition,
    total: usize,
    rig: &mut dyn Rig,
    responder: &mut dyn Responder,
    events: &mut dyn EventSink,
) -> Result<TrialRecord, RigError> {
    events.emit(&SessionEvent::TrialStart { index, total });
    let t_command_ms = rig.now_ms();
    rig.present(presented)?;
    rig.await_settle()?;
    let t_settle_ms = rig.now_ms();
    events.emit(&SessionEvent::AwaitResponse {
        index,
        t0: t_command_ms,
    });
    let prompt = Prompt {
        index,
        presented,
        choices: &plan.conditions,
        timeout_s: plan.response_timeout_s,
    };
    let responded = responder.respond(&prompt, rig)?;
    let t_response_ms = rig.now_ms();
    let record = TrialRecord {
        index,
        presented,
        responded,
        correct: responded == Some(presented),
        response_time_s: (t_response_ms - t_command_ms) / 1000.0,
        t_command_ms,
        t_settle_ms,
        t_response_ms,
    };
    events.emit(&SessionEvent::TrialEnd {
        record: record.clone(),
    });
    rig.present(Condition::NC)?;
    rig.await_settle()?;
    rig.wait(plan.isi_s)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionStats {
    pub condition: Condition,
    pub trials: usize,
    pub correct: usize,
    pub no_response: usize,
    pub accuracy: f64,
    /// Mean over answered trials; `None` if none were answered.
    pub mean_rt_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    /// Row and column order of `confusion`.
    pub conditions: Vec<Condition>,
    pub per_condition: Vec<ConditionStats>,
    pub trials: usize,
    pub overall_accuracy: f64,
    pub overall_mean_rt_s: Option<f64>,
    /// Rows are presented conditions, columns responded conditions.
    pub confusion: Vec<Vec<usize>>,
}

pub fn compute_stats(records: &[TrialRecord]) -> Result<SessionStats, SessionError> {
    if records.is_empty() {
        return Err(SessionError::EmptyRecords);
    }
    let mut conditions: Vec<Condition> = records
        .iter()
        .flat_map(|r| std::iter::once(r.presented).chain(r.responded))
        .collect();
    conditions.sort();
    conditions.dedup();
    let pos = |c: Condition| conditions.iter().position(|&x| x == c).expect("listed");
    let n = conditions.len();
    let mut confusion = vec![vec![0usize; n]; n];
    let mut per: Vec<ConditionStats> = conditions
        .iter()
        .map(|&condition| ConditionStats {
            condition,
            trials: 0,
            correct: 0,
            no_response: 0,
            accuracy: 0.0,
            mean_rt_s: None,
        })
        .collect();
    let mut rt_sums = vec![(0.0f64, 0usize); n];
    for r in records {
        let row = pos(r.presented);
        let s = &mut per[row];
        s.trials += 1;
        if r.correct {
            s.correct += 1;
        }
        match r.responded {
            Some(c) => {
                confusion[row][pos(c)] += 1;
                rt_sums[row].0 += r.response_time_s;
                rt_sums[row].1 += 1;
            }
            None => s.no_response += 1,
        }
    }
    for (s, (sum, k)) in per.iter_mut().zip(&rt_sums) {
        if s.trials > 0 {
            s.accuracy = s.correct as f64 / s.trials as f64;
        }
        if *k > 0 {
            s.mean_rt_s = Some(sum / *k as f64);
        }
    }
    let correct = records.iter().filter(|r| r.correct).count();
    let (rt_total, rt_n) = rt_sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    // Only presented conditions get rows in the report.
    per.retain(|s| s.trials > 0);
    Ok(SessionStats {
        conditions,
        per_condition: per,
        trials: records.len(),
        overall_accuracy: correct as f64 / records.len() as f64,
        overall_mean_rt_s: (rt_n > 0).then(|| rt_total / rt_n as f64),
        confusion,
    })
}

impl SessionStats {
    pub fn condition(&self, c: Condition) -> Option<&ConditionStats> {
        self.per_condition.iter().find(|s| s.condition == c)
    }

    /// Plain-text accuracy and response-time table followed by the
    /// confusion matrix.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<9} {:>6} {:>9} {:>10}", "condition", "trials", "accuracy", "mean_rt_s");
        let rt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        for s in &self.per_condition {
            let _ = writeln!(
                out,
                "{:<9} {:>6} {:>8.1}% {:>10}",
                s.condition.label(),
                s.trials,
                s.accuracy * 100.0,
                rt(s.mean_rt_s)
            );
        }
        let _ = writeln!(
            out,
            "{:<9} {:>6} {:>8.1}% {:>10}",
            "overall",
            self.trials,
            self.overall_accuracy * 100.0,
            rt(self.overall_mean_rt_s)
        );
        let _ = writeln!(out);
        let _ = write!(out, "{:<9}", "pres\\resp");
        for c in &self.conditions {
            let _ = write!(out, " {:>4}", c.label());
        }
        let _ = writeln!(out);
        for (c, row) in self.conditions.iter().zip(&self.confusion) {
            if self.condition(*c).is_none() {
                continue;
            }
            let _ = write!(out, "{:<9}", c.label());
            for v in row {
                let _ = write!(out, " {v:>4}");
            }
            let _ = writeln!(out);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    Structured,
}

impl FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(LogFormat::Csv),
            "structured" | "json" => Ok(LogFormat::Structured),
            other => Err(format!("unknown log format `{other}` (csv or structured)")),
        }
    }
}

pub const CSV_HEADER: [&str; 8] = [
    "index",
    "presented",
    "responded",
    "correct",
    "response_time_s",
    "t_command_ms",
    "t_settle_ms",
    "t_response_ms",
];

pub const STRUCTURED_FORMAT: &str = "edgesim-session";
pub const STRUCTURED_VERSION: u32 = 1;

/// Structured session document. See `schema/session_log.schema.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDocument {
    pub format: String,
    pub version: u32,
    pub complete: bool,
    pub records: Vec<TrialRecord>,
    pub stats: Option<SessionStats>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LogError + '_ {
    move |source| LogError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn export_log(log: &SessionLog, stats: Option<&SessionStats>, path: &Path, format: LogFormat) -> Result<(), LogError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    match format {
        LogFormat::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in &log.records {
                w.serialize(r).map_err(|e| LogError::Io {
                    path: path.display().to_string(),
                    source: io::Error::other(e),
                })?;
            }
            if log.records.is_empty() {
                w.write_record(CSV_HEADER).map_err(|e| LogError::Io {
                    path: path.display().to_string(),
                    source: io::Error::other(e),
                })?;
            }
            w.flush().map_err(io_err(path))?;
        }
        LogFormat::Structured => {
            let doc = SessionDocument {
                format: STRUCTURED_FORMAT.into(),
                version: STRUCTURED_VERSION,
                complete: log.complete,
                records: log.records.clone(),
                stats: stats.cloned(),
            };
            serde_json::to_writer_pretty(&mut out, &doc).map_err(|e| LogError::Io {
                path: path.display().to_string(),
                source: io::Error::other(e),
            })?;
            out.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

/// Reads a CSV log back, naming the offending line on malformed input.
pub fn import_csv_log(path: &Path) -> Result<Vec<TrialRecord>, LogError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(file);
    let parse = |line: u64, msg: String| LogError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let headers = reader.headers().map_err(|e| parse(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse(1, format!("expected header {}", CSV_HEADER.join(","))));
    }
    let mut records = Vec::new();
    for row in reader.deserialize::<TrialRecord>() {
        let record = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse(line, e.to_string())
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn import_structured_log(path: &Path) -> Result<SessionDocument, LogError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let doc: SessionDocument = serde_json::from_str(&text).map_err(|e| LogError::Parse {
        path: path.display().to_string(),
        line: e.line() as u64,
        msg: e.to_string(),
    })?;
    if doc.format != STRUCTURED_FORMAT {
        return Err(LogError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("unknown document format `{}`", doc.format),
        });
    }
    Ok(doc)
}
