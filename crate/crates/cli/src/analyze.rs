use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context};
use edgesim_core::analytics::{calibrate_on_labelled, evaluate, export_heatmap, ClassificationReport};
use edgesim_core::condition::Condition;
use edgesim_core::experiment::{compute_stats, import_csv_log, import_structured_log, TrialRecord};
use edgesim_core::frame::{read_frames, FsrFrame};
use serde_json::json;

use crate::AnalyzeArgs;

pub fn run(args: AnalyzeArgs, structured: bool) -> anyhow::Result<()> {
    if args.logs.is_empty() && args.frames.is_empty() {
        bail!("nothing to analyze; pass --log and/or --frames");
    }
    let mut out = serde_json::Map::new();

    if !args.logs.is_empty() {
        let mut records: Vec<TrialRecord> = Vec::new();
        let mut incomplete = Vec::new();
        for path in &args.logs {
            if is_structured(path)? {
                let doc = import_structured_log(path)?;
                if !doc.complete {
                    incomplete.push(path.display().to_string());
                }
                records.extend(doc.records);
            } else {
                records.extend(import_csv_log(path)?);
            }
        }
        let stats = compute_stats(&records).context("logs contain no trials")?;
        if structured {
            out.insert("stats".into(), serde_json::to_value(&stats)?);
            out.insert("incomplete_logs".into(), json!(incomplete));
        } else {
            print!("{}", stats.table());
            for p in &incomplete {
                println!("note: {p} is an incomplete session");
            }
        }
    }

    if !args.frames.is_empty() {
        let mut labelled: Vec<(Condition, FsrFrame)> = Vec::new();
        for path in &args.frames {
            let frames = read_frames(BufReader::new(File::open(path).with_context(|| format!("{}", path.display()))?))
                .with_context(|| format!("{}", path.display()))?;
            if let Some(dir) = &args.heatmap_dir {
                if let Some(peak) = frames.iter().max_by(|a, b| a.total().total_cmp(&b.total())) {
                    fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))?;
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frames");
                    export_heatmap(peak, dir, stem, args.png)?;
                }
            }
            if let Some(label) = label_of(path) {
                labelled.extend(frames.into_iter().map(|f| (label, f)));
            }
        }
        if labelled.is_empty() {
            if !structured {
                println!("no labelled frame files; skipped classification");
            }
        } else {
            let (report, calibration_frames) = classify_corpus(&labelled)?;
            if structured {
                out.insert(
                    "classification".into(),
                    json!({
                        "calibration_frames": calibration_frames,
                        "frames": report.frames,
                        "geometry_accuracy": report.geometry_accuracy(),
                        "condition_accuracy": report.condition_accuracy(),
                        "confusion": report.confusion,
                    }),
                );
            } else {
                print_report(&report, calibration_frames);
            }
        }
    }

    if structured {
        println!("{}", serde_json::Value::Object(out));
    }
    Ok(())
}

fn is_structured(path: &Path) -> anyhow::Result<bool> {
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(true);
    }
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    Ok(text.trim_start().starts_with('{'))
}

/// `frames_SH.csv` -> SH
fn label_of(path: &Path) -> Option<Condition> {
    let stem = path.file_stem()?.to_str()?;
    let (_, tag) = stem.rsplit_once('_')?;
    tag.parse().ok()
}

/// Calibrates on every other frame of each stimulus condition and evaluates
/// on the rest. No-contact frames are not scored.
fn classify_corpus(labelled: &[(Condition, FsrFrame)]) -> anyhow::Result<(ClassificationReport, usize)> {
    let mut calibration = Vec::new();
    let mut test = Vec::new();
    for c in Condition::STIMULI {
        for (i, item) in labelled.iter().filter(|(l, _)| *l == c).enumerate() {
            if i % 2 == 0 {
                calibration.push(item.clone());
            } else {
                test.push(item.clone());
            }
        }
    }
    let thresholds = calibrate_on_labelled(&calibration).context("cannot calibrate intensity threshold")?;
    let report = evaluate(&test, &thresholds)?;
    Ok((report, calibration.len()))
}

fn print_report(report: &ClassificationReport, calibration_frames: usize) {
    println!(
        "classifier: {} frames ({} more used for calibration)",
        report.frames, calibration_frames
    );
    println!("geometry accuracy {:.1}%", report.geometry_accuracy() * 100.0);
    println!("4-way accuracy {:.1}%", report.condition_accuracy() * 100.0);
    for (presented, row) in &report.confusion {
        let cells: Vec<String> = row.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("  {presented}: {}", cells.join(" "));
    }
}
