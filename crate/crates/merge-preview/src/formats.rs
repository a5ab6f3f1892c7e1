//! Surface CSV, report and dataset JSON, and IDX file loading.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! value reads back bitwise.

use std::fs;
use std::path::Path;

use merge_preview_core::preview::SweepReport;
use merge_preview_core::tasks::{dataset_from_idx, parse_idx_images, parse_idx_labels, Dataset};
use merge_preview_core::{PreviewSurface, SimplexGrid, SurfaceEntry};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::store::write_atomic;

pub fn surface_header(tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=tasks).map(|i| format!("alpha_{i}")).collect();
    h.extend(["metric", "iterations", "converged", "note"].map(String::from));
    h
}

pub fn surface_to_csv(surface: &PreviewSurface) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format("<surface>", e);
    w.write_record(surface_header(surface.grid.tasks)).map_err(fail)?;
    for e in &surface.entries {
        let mut row: Vec<String> = e.alpha.iter().map(|a| a.to_string()).collect();
        row.push(e.metric.map(|m| m.to_string()).unwrap_or_default());
        row.push(e.iterations.to_string());
        row.push(e.converged.to_string());
        row.push(e.note.clone().unwrap_or_default());
        w.write_record(&row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("<surface>", e))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Smallest `n` with `C(n + T − 1, T − 1) = rows`.
fn divisions_for_rows(tasks: usize, rows: usize) -> Option<usize> {
    let count = |n: usize| -> usize {
        (1..tasks).fold(1usize, |acc, i| acc.saturating_mul(n + i) / i)
    };
    if tasks == 1 {
        return (rows == 1).then_some(1);
    }
    (1..=rows).find(|&n| count(n) == rows)
}

/// Parses a surface CSV in any row order. The grid is recovered from the
/// task count and the number of rows.
pub fn surface_from_csv(text: &str, method: &str, path: &Path) -> Result<PreviewSurface> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::format(path, e))?.clone();
    let tasks = header.iter().take_while(|h| h.starts_with("alpha_")).count();
    if tasks == 0 || header.len() < tasks + 3 {
        return Err(Error::format(path, "missing alpha or metric columns"));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", line + 1));
        let alpha = (0..tasks)
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad("alpha")))
            .collect::<Result<Vec<_>>>()?;
        let metric = match &rec[tasks] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| bad("metric"))?),
        };
        let iterations = rec[tasks + 1].parse().map_err(|_| bad("iterations"))?;
        let converged = rec[tasks + 2].parse().map_err(|_| bad("converged"))?;
        let note = rec.get(tasks + 3).filter(|s| !s.is_empty()).map(String::from);
        rows.push(SurfaceEntry {
            alpha,
            metric,
            iterations,
            converged,
            note,
        });
    }
    let n = divisions_for_rows(tasks, rows.len())
        .ok_or_else(|| Error::format(path, format!("{} rows do not form a simplex grid", rows.len())))?;
    let grid = SimplexGrid::with_divisions(tasks, n)?;
    PreviewSurface::from_unordered(&grid, method, rows).map_err(|e| Error::format(path, e))
}

pub fn write_surface_csv(path: &Path, surface: &PreviewSurface) -> Result<()> {
    write_atomic(path, surface_to_csv(surface)?.as_bytes())
}

pub fn read_surface_csv(path: &Path, method: &str) -> Result<PreviewSurface> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    surface_from_csv(&text, method, path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::format(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

pub fn write_report(path: &Path, report: &SweepReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<SweepReport> {
    read_json(path)
}

/// Reads a dataset JSON file and re-checks its invariants.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let ds: Dataset = read_json(path)?;
    ds.validate().map_err(|e| Error::format(path, e))?;
    Ok(ds)
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` and optionally
/// resampling to `side × side`.
pub fn load_idx_dataset(images: &Path, labels: &Path, side: Option<usize>, classes: usize) -> Result<Dataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let img = parse_idx_images(&img_bytes).map_err(|e| Error::format(images, e))?;
    let lab = parse_idx_labels(&lab_bytes).map_err(|e| Error::format(labels, e))?;
    Ok(dataset_from_idx(&img, &lab, side, classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn surface() -> PreviewSurface {
        let grid = SimplexGrid::new(3, 0.5).unwrap();
        let entries = grid
            .points()
            .iter()
            .enumerate()
            .map(|(i, w)| SurfaceEntry {
                alpha: w.alpha().to_vec(),
                metric: (i != 2).then(|| 0.1 * i as f64 + 1.0 / 3.0),
                iterations: i,
                converged: i % 2 == 0,
                note: (i == 2).then(|| "failed, with comma".into()),
            })
            .collect();
        PreviewSurface::from_entries(&grid, "simple", entries).unwrap()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = surface();
        let text = surface_to_csv(&s).unwrap();
        assert!(text.starts_with("alpha_1,alpha_2,alpha_3,metric,iterations,converged,note\n"));
        let back = surface_from_csv(&text, "simple", Path::new("s.csv")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn shuffled_rows_read_back_in_grid_order() {
        let s = surface();
        let text = surface_to_csv(&s).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines[1..].reverse();
        let back = surface_from_csv(&(lines.join("\n") + "\n"), "simple", Path::new("s.csv")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn row_counts_map_to_divisions() {
        assert_eq!(divisions_for_rows(3, 66), Some(10));
        assert_eq!(divisions_for_rows(3, 1326), Some(50));
        assert_eq!(divisions_for_rows(2, 3), Some(2));
        assert_eq!(divisions_for_rows(3, 7), None);
    }

    #[test]
    fn dataset_json_is_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let ds = Dataset::new(2, 2, vec![0.0, 0.5, 1.0, 0.25], vec![0, 1]).unwrap();
        write_json(&path, &ds).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        fs::write(&path, r#"{"dim":1,"classes":2,"features":[2.0],"labels":[0]}"#).unwrap();
        assert!(read_dataset(&path).is_err());
    }
}
