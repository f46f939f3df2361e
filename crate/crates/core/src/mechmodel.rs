//! Stateless model of the two actuation chains.
//!
//! The surface axis is a lead-screw stepper moving the contact plate; the edge
//! axis is a geared stepper winding a cable on a spool, which raises the edge
//! element through a lever. Everything here is plain arithmetic over
//! immutable specs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the two actuated axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Surface,
    Edge,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::Surface => f.write_str("surface"),
            Axis::Edge => f.write_str("edge"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MechError {
    #[error("{axis} axis: {quantity} {value} outside [{min}, {max}]")]
    Range {
        axis: Axis,
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid mechanism spec: {0}")]
    InvalidSpec(String),
    #[error("no active loads selected")]
    NoActiveLoads,
    #[error("unknown load `{0}`")]
    UnknownLoad(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotorSpec {
    pub step_angle_deg: f64,
    pub steps_per_rev: u32,
    /// Linear travel per output revolution. `None` for rotary outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stroke_per_rev_mm: Option<f64>,
    pub max_step_rate: f64,
    pub power_w: f64,
}

impl MotorSpec {
    pub fn validate(&self, axis: Axis) -> Result<(), MechError> {
        let positive = [
            ("step_angle_deg", self.step_angle_deg),
            ("steps_per_rev", f64::from(self.steps_per_rev)),
            ("max_step_rate", self.max_step_rate),
            ("power_w", self.power_w),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(MechError::InvalidSpec(format!(
                    "{axis} motor: {name} must be positive, got {v}"
                )));
            }
        }
        if let Some(stroke) = self.stroke_per_rev_mm {
            if !(stroke.is_finite() && stroke > 0.0) {
                return Err(MechError::InvalidSpec(format!(
                    "{axis} motor: stroke_per_rev_mm must be positive, got {stroke}"
                )));
            }
        }
        let full_turn = self.step_angle_deg * f64::from(self.steps_per_rev);
        if (full_turn - 360.0).abs() > 1e-9 {
            return Err(MechError::InvalidSpec(format!(
                "{axis} motor: {}° x {} steps = {full_turn}°, expected 360°",
                self.step_angle_deg, self.steps_per_rev
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceDriveSpec {
    pub motor: MotorSpec,
    pub max_force_n: f64,
    pub stroke_range_mm: f64,
}

impl SurfaceDriveSpec {
    pub fn validate(&self) -> Result<(), MechError> {
        self.motor.validate(Axis::Surface)?;
        if self.motor.stroke_per_rev_mm.is_none() {
            return Err(MechError::InvalidSpec(
                "surface motor needs stroke_per_rev_mm".into(),
            ));
        }
        if !(self.max_force_n > 0.0 && self.stroke_range_mm > 0.0) {
            return Err(MechError::InvalidSpec(
                "surface max_force_n and stroke_range_mm must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Linear travel of one full step.
    pub fn mm_per_step(&self) -> f64 {
        self.motor.stroke_per_rev_mm.unwrap_or(0.0) / f64::from(self.motor.steps_per_rev)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeDriveSpec {
    pub motor: MotorSpec,
    /// Reduction between motor and spool (output = input / ratio).
    pub gear_ratio: f64,
    /// Force amplification between cable tension and edge force.
    pub lever_gain: f64,
    pub spool_radius_mm: f64,
    pub max_cable_tension_n: f64,
    /// Constant force of the return spring opposing the edge.
    pub spring_force_n: f64,
}

impl EdgeDriveSpec {
    pub fn validate(&self) -> Result<(), MechError> {
        self.motor.validate(Axis::Edge)?;
        if !(self.gear_ratio > 1.0) {
            return Err(MechError::InvalidSpec(format!(
                "edge gear_ratio must exceed 1, got {}",
                self.gear_ratio
            )));
        }
        if !(self.lever_gain > 1.0) {
            return Err(MechError::InvalidSpec(format!(
                "edge lever_gain must exceed 1, got {}",
                self.lever_gain
            )));
        }
        if !(self.spool_radius_mm > 0.0 && self.max_cable_tension_n > 0.0) {
            return Err(MechError::InvalidSpec(
                "edge spool_radius_mm and max_cable_tension_n must be positive".into(),
            ));
        }
        if !(self.spring_force_n >= 0.0) {
            return Err(MechError::InvalidSpec(format!(
                "edge spring_force_n must be non-negative, got {}",
                self.spring_force_n
            )));
        }
        Ok(())
    }
}

/// A named electrical load drawn from the battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub label: String,
    pub watts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerBudget {
    pub battery_voltage_v: f64,
    pub battery_capacity_mah: f64,
    pub loads: Vec<Load>,
}

impl PowerBudget {
    pub fn energy_wh(&self) -> f64 {
        self.battery_voltage_v * self.battery_capacity_mah / 1000.0
    }

    pub fn validate(&self) -> Result<(), MechError> {
        if !(self.energy_wh() > 0.0) {
            return Err(MechError::InvalidSpec("battery energy must be positive".into()));
        }
        if let Some(bad) = self.loads.iter().find(|l| !(l.watts > 0.0)) {
            return Err(MechError::InvalidSpec(format!(
                "load `{}` must draw positive power, got {} W",
                bad.label, bad.watts
            )));
        }
        Ok(())
    }
}

/// Every physical constant of the device.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismConfig {
    pub surface: SurfaceDriveSpec,
    pub edge: EdgeDriveSpec,
    pub power: PowerBudget,
}

impl Default for SurfaceDriveSpec {
    fn default() -> Self {
        SurfaceDriveSpec {
            motor: MotorSpec {
                step_angle_deg: 18.0,
                steps_per_rev: 20,
                stroke_per_rev_mm: Some(0.3),
                max_step_rate: 200.0,
                power_w: 0.76,
            },
            max_force_n: 3.18,
            stroke_range_mm: 6.5,
        }
    }
}

impl Default for EdgeDriveSpec {
    fn default() -> Self {
        EdgeDriveSpec {
            // An 8 degree step angle cannot give 20
            // steps/rev; 18 degrees reproduces the 0.68 degree output step.
            motor: MotorSpec {
                step_angle_deg: 18.0,
                steps_per_rev: 20,
                stroke_per_rev_mm: None,
                max_step_rate: 200.0,
                power_w: 0.52,
            },
            gear_ratio: 26.45,
            lever_gain: 2.63,
            spool_radius_mm: 5.0,
            max_cable_tension_n: 2.21,
            spring_force_n: 0.3,
        }
    }
}

impl Default for PowerBudget {
    fn default() -> Self {
        PowerBudget {
            battery_voltage_v: 3.7,
            battery_capacity_mah: 2000.0,
            loads: vec![
                Load {
                    label: "surface".into(),
                    watts: 0.76,
                },
                Load {
                    label: "edge".into(),
                    watts: 0.52,
                },
            ],
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<(), MechError> {
        self.surface.validate()?;
        self.edge.validate()?;
        self.power.validate()
    }
}

pub fn surface_steps_to_mm(steps: i64, spec: &SurfaceDriveSpec) -> f64 {
    // Multiply before dividing so whole revolutions come out exact.
    steps as f64 * spec.motor.stroke_per_rev_mm.unwrap_or(0.0) / f64::from(spec.motor.steps_per_rev)
}

/// Quantizes a surface position to the nearest whole step, rounding half
/// away from zero.
pub fn surface_mm_to_steps(target_mm: f64, spec: &SurfaceDriveSpec) -> Result<i64, MechError> {
    let limit = spec.stroke_range_mm;
    if !target_mm.is_finite() || target_mm.abs() > limit {
        return Err(MechError::Range {
            axis: Axis::Surface,
            quantity: "target_mm",
            value: target_mm,
            min: -limit,
            max: limit,
        });
    }
    Ok((target_mm / spec.mm_per_step()).round() as i64)
}

pub fn edge_effective_step_deg(spec: &EdgeDriveSpec) -> f64 {
    spec.motor.step_angle_deg / spec.gear_ratio
}

/// Cable taken up by the spool for one motor step.
pub fn edge_cable_mm_per_step(spec: &EdgeDriveSpec) -> f64 {
    edge_effective_step_deg(spec).to_radians() * spec.spool_radius_mm
}

pub fn edge_steps_to_cable_mm(steps: i64, spec: &EdgeDriveSpec) -> f64 {
    steps as f64 * edge_cable_mm_per_step(spec)
}

/// Nearest whole step for a cable displacement, rounding half away from zero.
pub fn edge_cable_mm_to_steps(cable_mm: f64, spec: &EdgeDriveSpec) -> Result<i64, MechError> {
    if !cable_mm.is_finite() {
        return Err(MechError::Range {
            axis: Axis::Edge,
            quantity: "cable_mm",
            value: cable_mm,
            min: f64::NEG_INFINITY,
            max: f64::INFINITY,
        });
    }
    Ok((cable_mm / edge_cable_mm_per_step(spec)).round() as i64)
}

/// Edge force after lever amplification minus the return spring, clamped at zero.
pub fn edge_net_force_n(cable_tension_n: f64, spec: &EdgeDriveSpec) -> Result<f64, MechError> {
    if !(0.0..=spec.max_cable_tension_n).contains(&cable_tension_n) {
        return Err(MechError::Range {
            axis: Axis::Edge,
            quantity: "cable_tension_n",
            value: cable_tension_n,
            min: 0.0,
            max: spec.max_cable_tension_n,
        });
    }
    Ok((spec.lever_gain * cable_tension_n - spec.spring_force_n).max(0.0))
}

pub fn motion_duration_s(steps: u64, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    steps as f64 / rate
}

/// Hours of operation with the named loads running continuously.
pub fn endurance_h(budget: &PowerBudget, active: &[&str]) -> Result<f64, MechError> {
    if active.is_empty() {
        return Err(MechError::NoActiveLoads);
    }
    let mut watts = 0.0;
    for label in active {
        let load = budget
            .loads
            .iter()
            .find(|l| l.label == *label)
            .ok_or_else(|| MechError::UnknownLoad(label.to_string()))?;
        watts += load.watts;
    }
    Ok(budget.energy_wh() / watts)
}

/// Endurance with every configured load active.
pub fn endurance_all_h(budget: &PowerBudget) -> Result<f64, MechError> {
    let labels: Vec<&str> = budget.loads.iter().map(|l| l.label.as_str()).collect();
    endurance_h(budget, &labels)
}
