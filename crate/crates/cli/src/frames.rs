use std::fs::{self, File};
use std::io::BufWriter;

use anyhow::Context;
use edgesim_core::condition::Condition;
use edgesim_core::device::{Device, DeviceCommand};
use edgesim_core::frame::write_frames;
use edgesim_core::mechmodel::Axis;

use crate::{load_config, FramesArgs};

pub fn run(args: FramesArgs, structured: bool) -> anyhow::Result<()> {
    let mut config = load_config(args.config.as_ref())?;
    if let Some(seed) = args.seed {
        config.contact.rng_seed = seed;
    }
    let mut device = Device::new(config)?;
    device.calibrate(Axis::Surface)?;
    device.calibrate(Axis::Edge)?;
    fs::create_dir_all(&args.out).with_context(|| format!("{}", args.out.display()))?;
    let mut written = Vec::new();
    for c in Condition::STIMULI.into_iter().chain([Condition::NC]) {
        let frames = device.settled_frames(c, args.count, args.rate)?;
        let path = args.out.join(format!("{}_{}.csv", args.prefix, c.label()));
        let file = File::create(&path).with_context(|| format!("{}", path.display()))?;
        write_frames(BufWriter::new(file), &frames).with_context(|| format!("{}", path.display()))?;
        device.apply(&DeviceCommand::Preset(Condition::NC))?;
        let eta = device.settle_eta_ms();
        device.tick(eta);
        written.push(path.display().to_string());
    }
    if structured {
        println!("{}", serde_json::json!({ "files": written, "frames_per_condition": args.count }));
    } else {
        for w in &written {
            println!("{w}");
        }
    }
    Ok(())
}
