//! Firmware-style virtual device.
//!
//! Positions are held as whole motor steps; millimetre values are derived
//! through the mechanism model. Motion runs at a constant step rate from the
//! moment a target is set, so a position is a pure function of the move
//! origin, the target and the elapsed simulated time.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::Condition;
use crate::error::ErrorCode;
use crate::frame::{FsrFrame, CELLS, GRID};
use crate::mechmodel::{self, Axis, MechError, MechanismConfig};

/// How fast the cable moves relative to the motor step rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeSpeedModel {
    /// Cable steps advance at `step_rate / gear_ratio`.
    GearReduced,
    /// Cable steps advance at the motor step rate.
    MotorRate,
}

/// Displacement units and command windows established by calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationGeometry {
    /// Surface displacement unit `a`.
    pub a_mm: f64,
    /// Edge cable displacement unit `b`.
    pub b_mm: f64,
    /// Lowest reachable position, in multiples of the axis unit below zero.
    pub retract_units: f64,
    /// Highest reachable position in axis units; also the retraction applied
    /// after driving to the maximum-force end.
    pub advance_units: f64,
}

impl Default for CalibrationGeometry {
    fn default() -> Self {
        CalibrationGeometry {
            a_mm: 0.35,
            b_mm: 1.5,
            retract_units: 3.0,
            advance_units: 2.0,
        }
    }
}

/// Parameters of the synthetic fingertip contact and the 6x6 sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactModel {
    pub fingertip_stiffness_n_per_mm: f64,
    pub edge_stiffness_n_per_mm: f64,
    pub contact_onset_mm: f64,
    pub aperture_row: usize,
    pub surface_sigma_cells: f64,
    pub edge_sigma_rows: f64,
    /// Standard deviation of the per-cell multiplicative noise factor.
    pub noise_sigma: f64,
    pub outlier_prob: f64,
    /// Sensor units per newton of contact force.
    pub units_per_newton: f64,
    pub rng_seed: u64,
}

impl Default for ContactModel {
    fn default() -> Self {
        ContactModel {
            fingertip_stiffness_n_per_mm: 4.0,
            edge_stiffness_n_per_mm: 0.6,
            contact_onset_mm: 0.0,
            aperture_row: 3,
            surface_sigma_cells: 1.5,
            edge_sigma_rows: 0.3,
            noise_sigma: 0.05,
            outlier_prob: 0.1,
            units_per_newton: 100.0,
            rng_seed: 0x5eed,
        }
    }
}

impl ContactModel {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.fingertip_stiffness_n_per_mm > 0.0 && self.edge_stiffness_n_per_mm > 0.0) {
            return bad("contact stiffnesses must be positive".into());
        }
        if self.aperture_row >= GRID {
            return bad(format!("aperture_row {} outside 0..=5", self.aperture_row));
        }
        if !(self.surface_sigma_cells > 0.0 && self.edge_sigma_rows > 0.0) {
            return bad("contact spread widths must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be non-negative", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_prob) {
            return bad(format!("outlier_prob {} outside [0, 1]", self.outlier_prob));
        }
        if !(self.units_per_newton > 0.0) {
            return bad("units_per_newton must be positive".into());
        }
        if !self.contact_onset_mm.is_finite() {
            return bad("contact_onset_mm must be finite".into());
        }
        Ok(())
    }
}

/// Complete simulator configuration, loadable from a TOML file in which
/// every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub mechanism: MechanismConfig,
    pub calibration: CalibrationGeometry,
    pub contact: ContactModel,
    /// Commanded step rate for both motors, steps per second.
    pub step_rate: f64,
    pub edge_speed: EdgeSpeedModel,
    pub stream_rate_hz: f64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            mechanism: MechanismConfig::default(),
            calibration: CalibrationGeometry::default(),
            contact: ContactModel::default(),
            step_rate: 200.0,
            edge_speed: EdgeSpeedModel::GearReduced,
            stream_rate_hz: 10.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Mechanism(#[from] MechError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl DeviceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: DeviceConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mechanism.validate()?;
        self.contact.validate()?;
        let c = &self.calibration;
        if !(c.a_mm > 0.0 && c.b_mm > 0.0 && c.retract_units > 0.0 && c.advance_units > 0.0) {
            return Err(ConfigError::Invalid(
                "calibration units and windows must be positive".into(),
            ));
        }
        let max_rate = self
            .mechanism
            .surface
            .motor
            .max_step_rate
            .min(self.mechanism.edge.motor.max_step_rate);
        if !(self.step_rate > 0.0 && self.step_rate <= max_rate) {
            return Err(ConfigError::Invalid(format!(
                "step_rate {} outside (0, {max_rate}]",
                self.step_rate
            )));
        }
        if !(self.stream_rate_hz > 0.0 && self.stream_rate_hz <= MAX_STREAM_HZ) {
            return Err(ConfigError::Invalid(format!(
                "stream_rate_hz {} outside (0, {MAX_STREAM_HZ}]",
                self.stream_rate_hz
            )));
        }
        Ok(())
    }

    pub fn mm_per_step(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Surface => self.mechanism.surface.mm_per_step(),
            Axis::Edge => mechmodel::edge_cable_mm_per_step(&self.mechanism.edge),
        }
    }

    /// Steps per second at which the axis position counter advances.
    pub fn axis_step_rate(&self, axis: Axis) -> f64 {
        match (axis, self.edge_speed) {
            (Axis::Surface, _) | (Axis::Edge, EdgeSpeedModel::MotorRate) => self.step_rate,
            (Axis::Edge, EdgeSpeedModel::GearReduced) => {
                self.step_rate / self.mechanism.edge.gear_ratio
            }
        }
    }

    fn unit_mm(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Surface => self.calibration.a_mm,
            Axis::Edge => self.calibration.b_mm,
        }
    }

    fn to_steps(&self, axis: Axis, mm: f64) -> Result<i64, MechError> {
        match axis {
            Axis::Surface => mechmodel::surface_mm_to_steps(mm, &self.mechanism.surface),
            Axis::Edge => mechmodel::edge_cable_mm_to_steps(mm, &self.mechanism.edge),
        }
    }

    /// Reachable step window after calibrating `axis`.
    pub fn window_steps(&self, axis: Axis) -> (i64, i64) {
        let unit = self.unit_mm(axis);
        let step = self.mm_per_step(axis);
        let lo = (-self.calibration.retract_units * unit / step).round() as i64;
        let hi = (self.calibration.advance_units * unit / step).round() as i64;
        (lo, hi)
    }

    /// Preset targets in millimetres (surface, edge cable).
    pub fn preset_targets_mm(&self, condition: Condition) -> (f64, f64) {
        let (ka, kb) = condition.multiples();
        (ka * self.calibration.a_mm, kb * self.calibration.b_mm)
    }
}

pub const MAX_STREAM_HZ: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code}: {detail}")]
pub struct DeviceError {
    pub code: ErrorCode,
    pub detail: String,
}

impl DeviceError {
    fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        DeviceError {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceCommand {
    Calibrate(Axis),
    Move {
        surface_mm: Option<f64>,
        edge_mm: Option<f64>,
    },
    Preset(Condition),
    Stream { enable: bool, rate_hz: f64 },
    Status,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisState {
    pub calibrated: bool,
    pub pos_steps: i64,
    pub target_steps: i64,
    origin_steps: i64,
    move_start_ms: u64,
    /// Inclusive reachable step window; meaningful once calibrated.
    pub window: (i64, i64),
}

impl AxisState {
    pub fn is_moving(&self) -> bool {
        self.pos_steps != self.target_steps
    }

    fn retarget(&mut self, target: i64, now_ms: u64) {
        self.origin_steps = self.pos_steps;
        self.move_start_ms = now_ms;
        self.target_steps = target;
    }

    fn advance_to(&mut self, now_ms: u64, rate: f64) {
        if !self.is_moving() {
            return;
        }
        let elapsed_s = now_ms.saturating_sub(self.move_start_ms) as f64 / 1000.0;
        // Small epsilon so exact step boundaries are not lost to rounding.
        let allowed = (rate * elapsed_s + 1e-9).floor() as i64;
        let span = self.target_steps - self.origin_steps;
        self.pos_steps = self.origin_steps + span.signum() * allowed.min(span.abs());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub rate_hz: f64,
    start_ms: u64,
    emitted: u64,
}

impl StreamState {
    fn next_frame_ms(&self) -> u64 {
        self.start_ms + ((self.emitted + 1) as f64 * 1000.0 / self.rate_hz).round() as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub surface: AxisState,
    pub edge: AxisState,
    pub streaming: Option<StreamState>,
    pub clock_ms: u64,
}

impl DeviceState {
    pub fn axis(&self, axis: Axis) -> &AxisState {
        match axis {
            Axis::Surface => &self.surface,
            Axis::Edge => &self.edge,
        }
    }

    fn axis_mut(&mut self, axis: Axis) -> &mut AxisState {
        match axis {
            Axis::Surface => &mut self.surface,
            Axis::Edge => &mut self.edge,
        }
    }

    pub fn is_moving(&self) -> bool {
        self.surface.is_moving() || self.edge.is_moving()
    }
}

/// Snapshot reported in answer to a status request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatusReport {
    pub surface_mm: f64,
    pub edge_mm: f64,
    pub moving: bool,
    pub calibrated_surface: bool,
    pub calibrated_edge: bool,
}

/// A virtual device: configuration plus mutable state.
#[derive(Debug, Clone)]
pub struct Device {
    config: DeviceConfig,
    state: DeviceState,
}

impl Device {
    pub fn new(config: DeviceConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Device {
            config,
            state: DeviceState::default(),
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    pub fn state(&self) -> &DeviceState {
        &self.state
    }

    pub fn clock_ms(&self) -> u64 {
        self.state.clock_ms
    }

    pub fn position_mm(&self, axis: Axis) -> f64 {
        position_mm(&self.state, &self.config, axis)
    }

    pub fn target_mm(&self, axis: Axis) -> f64 {
        self.state.axis(axis).target_steps as f64 * self.config.mm_per_step(axis)
    }

    pub fn is_moving(&self) -> bool {
        self.state.is_moving()
    }

    pub fn is_streaming(&self) -> bool {
        self.state.streaming.is_some()
    }

    pub fn status(&self) -> StatusReport {
        StatusReport {
            surface_mm: self.position_mm(Axis::Surface),
            edge_mm: self.position_mm(Axis::Edge),
            moving: self.is_moving(),
            calibrated_surface: self.state.surface.calibrated,
            calibrated_edge: self.state.edge.calibrated,
        }
    }

    /// Drives the axis to its maximum-force end, retracts by the advance
    /// window and declares that pose the zero.
    pub fn calibrate(&mut self, axis: Axis) -> Result<(), DeviceError> {
        if self.is_moving() {
            return Err(DeviceError::new(
                ErrorCode::Busy,
                format!("cannot calibrate {axis} axis while moving"),
            ));
        }
        let window = self.config.window_steps(axis);
        let now = self.state.clock_ms;
        let st = self.state.axis_mut(axis);
        st.calibrated = true;
        st.pos_steps = 0;
        st.origin_steps = 0;
        st.target_steps = 0;
        st.move_start_ms = now;
        st.window = window;
        Ok(())
    }

    pub fn apply(&mut self, command: &DeviceCommand) -> Result<(), DeviceError> {
        match *command {
            DeviceCommand::Calibrate(axis) => self.calibrate(axis),
            DeviceCommand::Move {
                surface_mm,
                edge_mm,
            } => {
                if surface_mm.is_none() && edge_mm.is_none() {
                    return Err(DeviceError::new(
                        ErrorCode::BadCommand,
                        "move needs surface_mm and/or edge_mm",
                    ));
                }
                self.move_to(surface_mm, edge_mm)
            }
            DeviceCommand::Preset(condition) => {
                let (s, e) = self.config.preset_targets_mm(condition);
                self.move_to(Some(s), Some(e))
            }
            DeviceCommand::Stream { enable, rate_hz } => self.set_streaming(enable, rate_hz),
            DeviceCommand::Status => Ok(()),
        }
    }

    /// Validates every requested axis before retargeting any of them.
    fn move_to(&mut self, surface_mm: Option<f64>, edge_mm: Option<f64>) -> Result<(), DeviceError> {
        let mut plan = Vec::with_capacity(2);
        for (axis, mm) in [(Axis::Surface, surface_mm), (Axis::Edge, edge_mm)] {
            let Some(mm) = mm else { continue };
            if !mm.is_finite() {
                return Err(DeviceError::new(
                    ErrorCode::BadCommand,
                    format!("{axis} target {mm} is not a number"),
                ));
            }
            let st = self.state.axis(axis);
            if !st.calibrated {
                return Err(DeviceError::new(
                    ErrorCode::NotCalibrated,
                    format!("{axis} axis is not calibrated"),
                ));
            }
            let steps = self
                .config
                .to_steps(axis, mm)
                .map_err(|e| DeviceError::new(ErrorCode::OutOfRange, e.to_string()))?;
            let (lo, hi) = st.window;
            if steps < lo || steps > hi {
                let step = self.config.mm_per_step(axis);
                return Err(DeviceError::new(
                    ErrorCode::OutOfRange,
                    format!(
                        "{axis} target {mm} mm outside calibrated window [{:.4}, {:.4}] mm",
                        lo as f64 * step,
                        hi as f64 * step
                    ),
                ));
            }
            plan.push((axis, steps));
        }
        let now = self.state.clock_ms;
        for (axis, steps) in plan {
            self.state.axis_mut(axis).retarget(steps, now);
        }
        Ok(())
    }

    fn set_streaming(&mut self, enable: bool, rate_hz: f64) -> Result<(), DeviceError> {
        if !enable {
            self.state.streaming = None;
            return Ok(());
        }
        if !(rate_hz > 0.0 && rate_hz <= MAX_STREAM_HZ) {
            return Err(DeviceError::new(
                ErrorCode::OutOfRange,
                format!("stream rate {rate_hz} Hz outside (0, {MAX_STREAM_HZ}]"),
            ));
        }
        self.state.streaming = Some(StreamState {
            rate_hz,
            start_ms: self.state.clock_ms,
            emitted: 0,
        });
        Ok(())
    }

    pub fn stop_streaming(&mut self) {
        self.state.streaming = None;
    }

    /// Advances simulated time by `dt_ms`, returning the frames whose sample
    /// instants fall inside the interval.
    pub fn tick(&mut self, dt_ms: u64) -> Vec<FsrFrame> {
        let end = self.state.clock_ms + dt_ms;
        let mut frames = Vec::new();
        loop {
            let next = match &self.state.streaming {
                Some(s) if s.next_frame_ms() <= end => s.next_frame_ms(),
                _ => break,
            };
            self.advance_to(next);
            frames.push(self.frame_now());
            if let Some(s) = self.state.streaming.as_mut() {
                s.emitted += 1;
            }
        }
        self.advance_to(end);
        frames
    }

    fn advance_to(&mut self, t_ms: u64) {
        self.state.clock_ms = t_ms;
        let rs = self.config.axis_step_rate(Axis::Surface);
        let re = self.config.axis_step_rate(Axis::Edge);
        self.state.surface.advance_to(t_ms, rs);
        self.state.edge.advance_to(t_ms, re);
    }

    /// Simulated milliseconds until both axes reach their targets.
    pub fn settle_eta_ms(&self) -> u64 {
        let now = self.state.clock_ms;
        [Axis::Surface, Axis::Edge]
            .into_iter()
            .map(|axis| {
                let st = self.state.axis(axis);
                if !st.is_moving() {
                    return 0;
                }
                let span = (st.target_steps - st.origin_steps).abs() as f64;
                let rate = self.config.axis_step_rate(axis);
                let done_at = st.move_start_ms + ((span - 1e-9) / rate * 1000.0).ceil() as u64;
                done_at.saturating_sub(now).max(1)
            })
            .max()
            .unwrap_or(0)
    }

    /// Ticks until both axes rest on their targets. Returns the elapsed
    /// simulated milliseconds and any frames streamed meanwhile.
    pub fn run_until_settled(&mut self, dt_ms: u64, max_ms: u64) -> (u64, Vec<FsrFrame>) {
        let start = self.state.clock_ms;
        let mut frames = Vec::new();
        while self.is_moving() && self.state.clock_ms - start < max_ms {
            let step = if self.is_streaming() {
                dt_ms
            } else {
                self.settle_eta_ms().min(max_ms)
            };
            frames.extend(self.tick(step.max(1)));
        }
        (self.state.clock_ms - start, frames)
    }

    /// The frame the sensor would report at the current instant.
    pub fn frame_now(&self) -> FsrFrame {
        synth_frame(&self.state, &self.config)
    }

    /// Presets `condition`, waits for it to settle, then records `count`
    /// frames at `rate_hz`. Streaming is left off afterwards.
    pub fn settled_frames(&mut self, condition: Condition, count: usize, rate_hz: f64) -> Result<Vec<FsrFrame>, DeviceError> {
        self.apply(&DeviceCommand::Preset(condition))?;
        let eta = self.settle_eta_ms();
        self.tick(eta);
        self.set_streaming(true, rate_hz)?;
        let mut frames = Vec::with_capacity(count);
        while frames.len() < count {
            frames.extend(self.tick(((1000.0 / rate_hz).ceil() as u64).max(1)));
        }
        frames.truncate(count);
        self.stop_streaming();
        Ok(frames)
    }
}

fn position_mm(state: &DeviceState, config: &DeviceConfig, axis: Axis) -> f64 {
    state.axis(axis).pos_steps as f64 * config.mm_per_step(axis)
}

/// Contact forces (surface, edge) in newtons for the current pose.
pub fn contact_forces_n(state: &DeviceState, config: &DeviceConfig) -> (f64, f64) {
    let model = &config.contact;
    let mech = &config.mechanism;
    let surface_mm = position_mm(state, config, Axis::Surface);
    let indentation = surface_mm - model.contact_onset_mm;
    if indentation <= 0.0 {
        return (0.0, 0.0);
    }
    let surface_n = (model.fingertip_stiffness_n_per_mm * indentation).min(mech.surface.max_force_n);
    let protrusion = position_mm(state, config, Axis::Edge) / mech.edge.lever_gain;
    let edge_n = if protrusion > 0.0 {
        let tension = (model.edge_stiffness_n_per_mm * protrusion).min(mech.edge.max_cable_tension_n);
        mechmodel::edge_net_force_n(tension, &mech.edge).unwrap_or(0.0)
    } else {
        0.0
    };
    (surface_n, edge_n)
}

fn gaussian(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Synthesizes the sensor frame for `state` at its clock instant.
///
/// Surface force spreads as an isotropic bell centred on the grid; edge force
/// concentrates in a band along `aperture_row`. Noise and the occasional
/// border-cell outlier come from an RNG seeded by the model seed and the
/// timestamp, so equal inputs give bit-identical frames.
pub fn synth_frame(state: &DeviceState, config: &DeviceConfig) -> FsrFrame {
    let model = &config.contact;
    let (surface_n, edge_n) = contact_forces_n(state, config);
    let t_ms = state.clock_ms;
    let mut frame = FsrFrame::zeros(t_ms);
    if surface_n <= 0.0 && edge_n <= 0.0 {
        return frame;
    }

    let centre = (GRID as f64 - 1.0) / 2.0;
    let mut blob = [0.0; CELLS];
    for r in 0..GRID {
        for c in 0..GRID {
            blob[r * GRID + c] = gaussian(r as f64 - centre, model.surface_sigma_cells)
                * gaussian(c as f64 - centre, model.surface_sigma_cells);
        }
    }
    let blob_sum: f64 = blob.iter().sum();

    let mut band_rows = [0.0; GRID];
    for (r, w) in band_rows.iter_mut().enumerate() {
        *w = gaussian(r as f64 - model.aperture_row as f64, model.edge_sigma_rows);
    }
    let band_sum: f64 = band_rows.iter().sum::<f64>() * GRID as f64;

    for r in 0..GRID {
        for c in 0..GRID {
            let i = r * GRID + c;
            let newtons = surface_n * blob[i] / blob_sum + edge_n * band_rows[r] / band_sum;
            frame.cells[i] = newtons * model.units_per_newton;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed ^ t_ms.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    if model.noise_sigma > 0.0 {
        for cell in frame.cells.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *cell *= (1.0 + model.noise_sigma * z).max(0.0);
        }
    }
    if model.outlier_prob > 0.0 && rng.gen_bool(model.outlier_prob) {
        let peak = frame.cells.iter().cloned().fold(0.0, f64::max);
        let border: Vec<usize> = (0..CELLS)
            .filter(|&i| FsrFrame::is_border(i / GRID, i % GRID))
            .collect();
        let i = border[rng.gen_range(0..border.len())];
        frame.cells[i] = frame.cells[i].max(peak * rng.gen_range(5.0..10.0));
    }
    frame
}
