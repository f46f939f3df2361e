use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context};
use edgesim_core::bridge::EngineLink;
use edgesim_core::device::Device;
use edgesim_core::experiment::{
    compute_stats, export_log, run_session, EventSink, LiveResponder, NoEvents, RemoteRig, Responder, Rig,
    ScriptedResponder, SessionError, SessionLog, SessionPlan, SimRig,
};
use edgesim_core::frame::{write_frames, FsrFrame};
use edgesim_core::protocol::{Client, DEFAULT_TIMEOUT};
use log::warn;

use crate::{load_config, usage_error, SessionArgs};

pub fn run(args: SessionArgs, structured: bool) -> anyhow::Result<()> {
    let plan = SessionPlan {
        repetitions: args.repetitions,
        isi_s: args.isi,
        rng_seed: args.seed,
        response_timeout_s: args.response_timeout,
        ..SessionPlan::default()
    };
    if let Err(e) = plan.validate() {
        usage_error("session", e);
    }
    if !(args.time_scale > 0.0) {
        usage_error("session", "--time-scale must be positive");
    }

    let mut link = match &args.ui_bridge {
        Some(url) => Some(EngineLink::connect(url).with_context(|| format!("ui bridge {url}"))?),
        None => None,
    };
    // UI abort requests and Ctrl-C share one flag.
    let abort: Arc<AtomicBool> = link.as_ref().map(|l| l.abort_flag()).unwrap_or_default();
    {
        let flag = Arc::clone(&abort);
        ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("cannot install interrupt handler")?;
    }

    let mut responder: Box<dyn Responder> = if args.live {
        let rx = link
            .as_mut()
            .and_then(|l| l.take_responses())
            .context("live mode needs --ui-bridge")?;
        Box::new(LiveResponder::new(rx))
    } else {
        let mut r = ScriptedResponder::new(args.responder.clone(), args.seed);
        if let Some(l) = args.latency {
            r = r.with_latency(l);
        }
        Box::new(r)
    };

    let stream_hz = args.stream_hz.or(args.live.then_some(10.0));
    let mut remote = None;
    let mut sim = None;
    if args.sim {
        let config = load_config(args.config.as_ref())?;
        sim = Some(SimRig::calibrated(Device::new(config)?));
    } else {
        let client = Client::connect(args.addr.as_str(), DEFAULT_TIMEOUT)
            .with_context(|| format!("cannot reach device at {}", args.addr))?;
        let mut rig = RemoteRig::new(client, args.time_scale);
        rig.calibrate_both().context("calibration failed")?;
        if let Some(hz) = stream_hz {
            rig.client().stream(true, hz).context("cannot enable streaming")?;
        }
        remote = Some(rig);
    }
    let rig: &mut dyn Rig = match (&mut sim, &mut remote) {
        (Some(s), _) => s,
        (_, Some(r)) => r,
        _ => unreachable!(),
    };

    let mut no_events = NoEvents;
    let sink: &mut dyn EventSink = match link.as_mut() {
        Some(l) => l,
        None => &mut no_events,
    };
    let outcome = run_session(&plan, rig, responder.as_mut(), sink, Some(&abort));

    if let Some(rig) = remote.as_mut() {
        if stream_hz.is_some() {
            let _ = rig.client().stream(false, 1.0);
        }
        if let Some(path) = &args.frames_out {
            let frames: Vec<FsrFrame> = rig.client().drain_frames();
            write_frame_file(path, &frames)?;
        }
    }
    if let Some(l) = link {
        l.close();
    }

    let log = match outcome {
        Ok(log) => log,
        Err(SessionError::Rig { source, partial }) => {
            save(&args, &partial, structured)?;
            bail!("session stopped after {} trials: {source}", partial.records.len());
        }
        Err(e) => return Err(e.into()),
    };
    save(&args, &log, structured)?;
    if !log.complete {
        bail!("session aborted after {} of {} trials", log.records.len(), log.schedule.len());
    }
    Ok(())
}

fn write_frame_file(path: &Path, frames: &[FsrFrame]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("{}", path.display()))?;
    write_frames(BufWriter::new(f), frames).with_context(|| format!("{}", path.display()))
}

fn save(args: &SessionArgs, log: &SessionLog, structured: bool) -> anyhow::Result<()> {
    let stats = compute_stats(&log.records).ok();
    if let Some(path) = &args.log {
        export_log(log, stats.as_ref(), path, args.log_format)?;
    }
    if let (Some(path), Some(s)) = (&args.stats, &stats) {
        let text = serde_json::to_string_pretty(s)?;
        fs::write(path, text + "\n").with_context(|| format!("{}", path.display()))?;
    }
    if structured {
        println!(
            "{}",
            serde_json::json!({
                "complete": log.complete,
                "trials": log.records.len(),
                "scheduled": log.schedule.len(),
                "stats": stats,
            })
        );
    } else if let Some(s) = &stats {
        print!("{}", s.table());
        if !log.complete {
            println!("incomplete: {} of {} trials", log.records.len(), log.schedule.len());
        }
    } else {
        warn!("no trials completed");
    }
    Ok(())
}
