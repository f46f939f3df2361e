//! Digital twin and control stack for a dual-motor fingertip haptic device.
//!
//! - [`mechmodel`]: step, cable, force and endurance arithmetic for both drives.
//! - [`device`]: the virtual device with calibration, motion and 6x6 pressure frames.
//! - [`protocol`]: newline-delimited JSON wire protocol, server and client.
//! - [`analytics`]: outlier masking, band features and contact classification.
//! - [`experiment`]: trial schedules, session engine, statistics and logs.
//! - [`bridge`]: WebSocket relay between a live session and its response UI.

pub mod analytics;
pub mod bridge;
pub mod condition;
pub mod device;
pub mod error;
pub mod experiment;
pub mod frame;
pub mod mechmodel;
pub mod protocol;

pub use condition::Condition;
pub use device::{Device, DeviceCommand, DeviceConfig, DeviceError};
pub use error::ErrorCode;
pub use frame::FsrFrame;
pub use mechmodel::{Axis, MechanismConfig};
