//! Pressure-frame processing: border outlier masking, the band-concentration
//! feature and contact classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::Condition;
use crate::frame::{FsrFrame, CELLS, GRID};

/// Height of the horizontal window used to look for an edge band.
pub const BAND_ROWS: usize = 2;
pub const DEFAULT_OUTLIER_K: f64 = 6.0;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("frame has zero total pressure; band ratio is undefined")]
    ZeroTotal,
    #[error("classifier thresholds are not calibrated: {0}")]
    Uncalibrated(String),
    #[error("need at least {needed} frames per class, got {light} light and {heavy} heavy")]
    InsufficientSamples {
        needed: usize,
        light: usize,
        heavy: usize,
    },
    #[error("light mean total {light} is not below heavy mean total {heavy}")]
    DegenerateSplit { light: f64, heavy: f64 },
    #[error("writing {path}: {msg}")]
    Export { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Geometry {
    NoContact,
    Surface,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Light,
    Heavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactClass {
    pub geometry: Geometry,
    /// Present iff `geometry` is not `NoContact`.
    pub intensity: Option<Intensity>,
    pub band_ratio: f64,
    pub total_pressure: f64,
}

impl ContactClass {
    /// The stimulus condition this class corresponds to.
    pub fn condition(&self) -> Condition {
        match (self.geometry, self.intensity) {
            (Geometry::Edge, Some(Intensity::Heavy)) => Condition::EH,
            (Geometry::Edge, _) => Condition::EL,
            (Geometry::Surface, Some(Intensity::Heavy)) => Condition::SH,
            (Geometry::Surface, _) => Condition::SL,
            (Geometry::NoContact, _) => Condition::NC,
        }
    }
}

pub fn geometry_of(condition: Condition) -> Geometry {
    match condition {
        Condition::EL | Condition::EH => Geometry::Edge,
        Condition::SL | Condition::SH => Geometry::Surface,
        Condition::NC => Geometry::NoContact,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub contact_total_min: Option<f64>,
    pub band_ratio_edge_min: f64,
    pub light_heavy_split: Option<f64>,
}

impl Default for ClassifierThresholds {
    /// Uncalibrated thresholds with the default band cut.
    fn default() -> Self {
        ClassifierThresholds {
            contact_total_min: None,
            band_ratio_edge_min: 0.60,
            light_heavy_split: None,
        }
    }
}

impl ClassifierThresholds {
    fn checked(&self) -> Result<(f64, f64), AnalyticsError> {
        let min = self
            .contact_total_min
            .ok_or_else(|| AnalyticsError::Uncalibrated("contact_total_min unset".into()))?;
        let split = self
            .light_heavy_split
            .ok_or_else(|| AnalyticsError::Uncalibrated("light_heavy_split unset".into()))?;
        if !(min > 0.0 && split > 0.0) {
            return Err(AnalyticsError::Uncalibrated(
                "thresholds must be positive".into(),
            ));
        }
        if !(self.band_ratio_edge_min > 0.0 && self.band_ratio_edge_min < 1.0) {
            return Err(AnalyticsError::Uncalibrated(format!(
                "band_ratio_edge_min {} outside (0, 1)",
                self.band_ratio_edge_min
            )));
        }
        Ok((min, split))
    }
}

fn median(values: &mut [f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

pub fn interior_median(frame: &FsrFrame) -> f64 {
    let mut interior: Vec<f64> = (1..GRID - 1)
        .flat_map(|r| (1..GRID - 1).map(move |c| (r, c)))
        .map(|(r, c)| frame.at(r, c))
        .collect();
    median(&mut interior)
}

fn neighbours(row: usize, col: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = row.saturating_sub(1)..=(row + 1).min(GRID - 1);
    rows.flat_map(move |r| {
        (col.saturating_sub(1)..=(col + 1).min(GRID - 1)).map(move |c| (r, c))
    })
    .filter(move |&(r, c)| (r, c) != (row, col))
}

/// Replaces border cells above `k` times the interior median with the median
/// of their in-grid neighbours. Interior cells are never touched.
///
/// Flagged neighbours are left out of the replacement median, and the result
/// is capped at the flagging threshold so a second pass is a no-op.
pub fn mask_outliers_k(frame: &FsrFrame, k: f64) -> FsrFrame {
    let threshold = k * interior_median(frame);
    let flagged: Vec<bool> = (0..CELLS)
        .map(|i| {
            let (r, c) = (i / GRID, i % GRID);
            FsrFrame::is_border(r, c) && frame.cells[i] > threshold
        })
        .collect();
    let mut out = frame.clone();
    for i in (0..CELLS).filter(|&i| flagged[i]) {
        let (r, c) = (i / GRID, i % GRID);
        let mut clean: Vec<f64> = neighbours(r, c)
            .filter(|&(nr, nc)| !flagged[nr * GRID + nc])
            .map(|(nr, nc)| frame.at(nr, nc))
            .collect();
        if clean.is_empty() {
            clean = neighbours(r, c).map(|(nr, nc)| frame.at(nr, nc)).collect();
        }
        out.cells[i] = median(&mut clean).min(threshold);
    }
    out
}

pub fn mask_outliers(frame: &FsrFrame) -> FsrFrame {
    mask_outliers_k(frame, DEFAULT_OUTLIER_K)
}

/// Largest share of the frame total held by any two adjacent rows.
pub fn band_ratio(frame: &FsrFrame) -> Result<f64, AnalyticsError> {
    let rows = frame.row_sums();
    let total: f64 = rows.iter().sum();
    if !(total > 0.0) {
        return Err(AnalyticsError::ZeroTotal);
    }
    let best = rows
        .windows(BAND_ROWS)
        .map(|w| w.iter().sum::<f64>())
        .fold(0.0, f64::max);
    Ok((best / total).clamp(0.0, 1.0))
}

pub fn classify(frame: &FsrFrame, thresholds: &ClassifierThresholds) -> Result<ContactClass, AnalyticsError> {
    let (contact_min, split) = thresholds.checked()?;
    let total = frame.total();
    if total < contact_min || total <= 0.0 {
        return Ok(ContactClass {
            geometry: Geometry::NoContact,
            intensity: None,
            band_ratio: band_ratio(frame).unwrap_or(0.0),
            total_pressure: total,
        });
    }
    let ratio = band_ratio(frame)?;
    let geometry = if ratio >= thresholds.band_ratio_edge_min {
        Geometry::Edge
    } else {
        Geometry::Surface
    };
    let intensity = if total >= split {
        Intensity::Heavy
    } else {
        Intensity::Light
    };
    Ok(ContactClass {
        geometry,
        intensity: Some(intensity),
        band_ratio: ratio,
        total_pressure: total,
    })
}

pub const MIN_CALIBRATION_FRAMES: usize = 3;
pub const DEFAULT_CONTACT_FRACTION: f64 = 0.25;

/// Per-session intensity calibration from settled light and heavy frames.
pub fn calibrate_thresholds(
    light: &[FsrFrame],
    heavy: &[FsrFrame],
) -> Result<ClassifierThresholds, AnalyticsError> {
    let totals = |frames: &[FsrFrame]| -> Vec<f64> { frames.iter().map(FsrFrame::total).collect() };
    calibrate_from_totals(&totals(light), &totals(heavy))
}

pub fn calibrate_from_totals(light: &[f64], heavy: &[f64]) -> Result<ClassifierThresholds, AnalyticsError> {
    if light.len() < MIN_CALIBRATION_FRAMES || heavy.len() < MIN_CALIBRATION_FRAMES {
        return Err(AnalyticsError::InsufficientSamples {
            needed: MIN_CALIBRATION_FRAMES,
            light: light.len(),
            heavy: heavy.len(),
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (lm, hm) = (mean(light), mean(heavy));
    if !(lm > 0.0 && hm > lm) {
        return Err(AnalyticsError::DegenerateSplit { light: lm, heavy: hm });
    }
    Ok(ClassifierThresholds {
        contact_total_min: Some(DEFAULT_CONTACT_FRACTION * lm),
        band_ratio_edge_min: ClassifierThresholds::default().band_ratio_edge_min,
        light_heavy_split: Some((lm + hm) / 2.0),
    })
}

/// Accuracy of the mask-then-classify pipeline on labelled frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub frames: usize,
    pub geometry_correct: usize,
    pub condition_correct: usize,
    /// (presented, predicted) -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ClassificationReport {
    pub fn geometry_accuracy(&self) -> f64 {
        ratio(self.geometry_correct, self.frames)
    }

    pub fn condition_accuracy(&self) -> f64 {
        ratio(self.condition_correct, self.frames)
    }
}

fn ratio(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub fn evaluate(
    labelled: &[(Condition, FsrFrame)],
    thresholds: &ClassifierThresholds,
) -> Result<ClassificationReport, AnalyticsError> {
    let mut report = ClassificationReport::default();
    for (label, frame) in labelled {
        let class = classify(&mask_outliers(frame), thresholds)?;
        let predicted = class.condition();
        report.frames += 1;
        if class.geometry == geometry_of(*label) {
            report.geometry_correct += 1;
        }
        if predicted == *label {
            report.condition_correct += 1;
        }
        *report
            .confusion
            .entry(label.to_string())
            .or_default()
            .entry(predicted.to_string())
            .or_default() += 1;
    }
    Ok(report)
}

/// Calibrates on light (EL, SL) and heavy (EH, SH) frames after masking.
pub fn calibrate_on_labelled(
    labelled: &[(Condition, FsrFrame)],
) -> Result<ClassifierThresholds, AnalyticsError> {
    let mut light = Vec::new();
    let mut heavy = Vec::new();
    for (label, frame) in labelled {
        if *label == Condition::NC {
            continue;
        }
        let masked = mask_outliers(frame);
        if label.is_heavy() {
            heavy.push(masked);
        } else {
            light.push(masked);
        }
    }
    calibrate_thresholds(&light, &heavy)
}

/// 8-bit grayscale levels, one per cell, scaled so the frame maximum is 255.
pub fn heatmap_levels(frame: &FsrFrame) -> [u8; CELLS] {
    let max = frame.cells.iter().cloned().fold(0.0, f64::max);
    let mut out = [0u8; CELLS];
    if max > 0.0 {
        for (o, v) in out.iter_mut().zip(frame.cells.iter()) {
            *o = (v / max * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Writes `<stem>.csv` (6x6 grid) and, when `image` is set, `<stem>.png`.
pub fn export_heatmap(frame: &FsrFrame, dir: &Path, stem: &str, image: bool) -> Result<(), AnalyticsError> {
    let err = |path: &Path, msg: String| AnalyticsError::Export {
        path: path.display().to_string(),
        msg,
    };
    fs::create_dir_all(dir).map_err(|e| err(dir, e.to_string()))?;
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, frame.grid_csv()).map_err(|e| err(&csv_path, e.to_string()))?;
    if image {
        let png_path = dir.join(format!("{stem}.png"));
        let img = image::GrayImage::from_raw(GRID as u32, GRID as u32, heatmap_levels(frame).to_vec())
            .expect("6x6 buffer");
        img.save(&png_path).map_err(|e| err(&png_path, e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn uniform(v: f64) -> FsrFrame {
        FsrFrame::new(0, [v; CELLS])
    }

    fn calibrated() -> ClassifierThresholds {
        ClassifierThresholds {
            contact_total_min: Some(10.0),
            band_ratio_edge_min: 0.6,
            light_heavy_split: Some(100.0),
        }
    }

    #[test]
    fn all_equal_frame_unchanged() {
        let f = uniform(3.0);
        assert_eq!(mask_outliers(&f), f);
    }

    #[test]
    fn border_spike_replaced_by_neighbour_median() {
        let mut f = uniform(2.0);
        *f.at_mut(0, 2) = 1.0;
        *f.at_mut(1, 1) = 4.0;
        *f.at_mut(0, 3) = 200.0;
        let out = mask_outliers(&f);
        // neighbours of (0,3): (0,2)=1, (0,4)=2, (1,2)=2, (1,3)=2, (1,4)=2
        let mut oracle = vec![1.0, 2.0, 2.0, 2.0, 2.0];
        oracle.sort_by(f64::total_cmp);
        assert_eq!(out.at(0, 3), oracle[2]);
        for i in 0..CELLS {
            if i != 3 {
                assert_eq!(out.cells[i], f.cells[i]);
            }
        }
    }

    #[test]
    fn corner_spike_uses_three_neighbours() {
        let mut f = uniform(1.0);
        *f.at_mut(0, 1) = 3.0;
        *f.at_mut(5, 5) = 500.0;
        *f.at_mut(4, 5) = 2.0;
        let out = mask_outliers(&f);
        // (4,4)=1, (4,5)=2, (5,4)=1
        assert_eq!(out.at(5, 5), 1.0);
    }

    #[test]
    fn interior_spike_preserved() {
        let mut f = uniform(2.0);
        *f.at_mut(2, 3) = 500.0;
        assert_eq!(mask_outliers(&f), f);
    }

    #[test]
    fn band_ratio_cases() {
        let mut rows = [[0.0; GRID]; GRID];
        rows[2] = [1.0; GRID];
        rows[3] = [2.0; GRID];
        assert_eq!(band_ratio(&FsrFrame::from_rows(0, rows)).unwrap(), 1.0);
        assert_eq!(band_ratio(&uniform(1.0)).unwrap(), 1.0 / 3.0);
        assert!(matches!(band_ratio(&uniform(0.0)), Err(AnalyticsError::ZeroTotal)));
    }

    #[test]
    fn classify_zero_frame() {
        let c = classify(&uniform(0.0), &calibrated()).unwrap();
        assert_eq!(c.geometry, Geometry::NoContact);
        assert_eq!(c.intensity, None);
        assert_eq!(c.condition(), Condition::NC);
    }

    #[test]
    fn classify_rules() {
        let t = calibrated();
        let c = classify(&uniform(1.0), &t).unwrap(); // total 36, ratio 1/3
        assert_eq!((c.geometry, c.intensity), (Geometry::Surface, Some(Intensity::Light)));
        let mut rows = [[0.1; GRID]; GRID];
        rows[3] = [30.0; GRID];
        let c = classify(&FsrFrame::from_rows(0, rows), &t).unwrap();
        assert_eq!((c.geometry, c.intensity), (Geometry::Edge, Some(Intensity::Heavy)));
    }

    #[test]
    fn uncalibrated_thresholds_rejected() {
        let err = classify(&uniform(1.0), &ClassifierThresholds::default()).unwrap_err();
        assert!(matches!(err, AnalyticsError::Uncalibrated(_)));
        let mut bad = calibrated();
        bad.band_ratio_edge_min = 1.2;
        assert!(classify(&uniform(1.0), &bad).is_err());
    }

    #[test]
    fn calibration_midpoint() {
        let t = calibrate_from_totals(&[9.0, 10.0, 11.0], &[19.0, 20.0, 21.0]).unwrap();
        assert_abs_diff_eq!(t.light_heavy_split.unwrap(), 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.contact_total_min.unwrap(), 2.5, epsilon = 1e-12);
        assert!(matches!(
            calibrate_from_totals(&[10.0; 3], &[10.0; 3]),
            Err(AnalyticsError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            calibrate_from_totals(&[10.0; 2], &[20.0; 3]),
            Err(AnalyticsError::InsufficientSamples { .. })
        ));
        let frames = |v: f64| vec![uniform(v); 3];
        let t = calibrate_thresholds(&frames(1.0), &frames(2.0)).unwrap();
        assert_abs_diff_eq!(t.light_heavy_split.unwrap(), 54.0, epsilon = 1e-9);
    }

    #[test]
    fn heatmap_export() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = uniform(1.0);
        *f.at_mut(1, 2) = 4.0;
        export_heatmap(&f, dir.path(), "frame0", true).unwrap();
        let csv = fs::read_to_string(dir.path().join("frame0.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        let img = image::open(dir.path().join("frame0.png")).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (6, 6));
        assert_eq!(img.get_pixel(2, 1).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 64);
        assert_eq!(heatmap_levels(&uniform(0.0)), [0; CELLS]);
    }

    fn any_frame() -> impl Strategy<Value = FsrFrame> {
        prop::collection::vec(0.0f64..1000.0, CELLS).prop_map(|v| {
            let mut cells = [0.0; CELLS];
            cells.copy_from_slice(&v);
            FsrFrame::new(0, cells)
        })
    }

    proptest! {
        #[test]
        fn mask_is_idempotent(f in any_frame(), spikes in prop::collection::vec((0usize..20, 1.0f64..1e5), 0..6)) {
            let mut f = f;
            let border: Vec<usize> = (0..CELLS).filter(|&i| FsrFrame::is_border(i / GRID, i % GRID)).collect();
            for (i, v) in spikes {
                f.cells[border[i]] = v;
            }
            let once = mask_outliers(&f);
            prop_assert_eq!(mask_outliers(&once), once.clone());
            for r in 1..GRID - 1 {
                for c in 1..GRID - 1 {
                    prop_assert_eq!(once.at(r, c), f.at(r, c));
                }
            }
        }

        #[test]
        fn band_ratio_scale_invariant(f in any_frame(), k in 0.01f64..100.0) {
            prop_assume!(f.total() > 0.0);
            let mut g = f.clone();
            for c in g.cells.iter_mut() { *c *= k; }
            let (a, b) = (band_ratio(&f).unwrap(), band_ratio(&g).unwrap());
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((1.0 / 3.0 - 1e-12..=1.0).contains(&a));
        }
    }
}
