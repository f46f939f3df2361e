use std::sync::mpsc;

use anyhow::Context;
use edgesim_core::bridge::Bridge;
use edgesim_core::device::Device;
use edgesim_core::protocol::{Server, ServerOptions};
use log::info;

use crate::{load_config, ServeArgs};

pub fn run(args: ServeArgs, structured: bool) -> anyhow::Result<()> {
    let config = load_config(args.config.as_ref())?;
    let device = Device::new(config)?;
    let options = ServerOptions {
        time_scale: args.time_scale,
        ..ServerOptions::default()
    };
    let server = Server::bind(device, args.listen.as_str(), options)
        .with_context(|| format!("cannot listen on {}", args.listen))?;
    let addr = server.local_addr()?;

    let bridge = match &args.ui_bridge {
        Some(a) => {
            let b = Bridge::bind(a.as_str()).with_context(|| format!("cannot open ui bridge on {a}"))?;
            b.relay_frames(server.frame_tap());
            Some(b.spawn()?)
        }
        None => None,
    };
    let handle = server.spawn()?;

    let bridge_url = bridge.as_ref().map(|b| b.url());
    if structured {
        println!(
            "{}",
            serde_json::json!({ "listen": addr.to_string(), "ui_bridge": bridge_url, "time_scale": args.time_scale })
        );
    } else {
        println!("listening on {addr}");
        if let Some(u) = &bridge_url {
            println!("ui bridge on {u}");
        }
    }

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("cannot install interrupt handler")?;
    let _ = rx.recv();
    info!("shutting down");
    handle.shutdown();
    if let Some(b) = bridge {
        b.shutdown();
    }
    Ok(())
}
