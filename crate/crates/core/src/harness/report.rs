//! Run reports: CSV rows, JSON summary and SVG curves.

use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cil::{summarize_top1, PhaseResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub phase: usize,
    pub classes_seen: usize,
    pub top1: f64,
    pub exemplar_count: usize,
    pub mean_bpp: f64,
    pub buffer_bits: u64,
    pub budget_bits: u64,
    pub wall_seconds: f64,
}

impl From<&PhaseResult> for PhaseRow {
    fn from(r: &PhaseResult) -> Self {
        Self {
            phase: r.phase,
            classes_seen: r.classes_seen,
            top1: r.top1,
            exemplar_count: r.exemplar_count,
            mean_bpp: r.mean_record_bpp,
            buffer_bits: r.buffer_bits,
            budget_bits: r.budget_bits,
            wall_seconds: r.wall_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub seed: u64,
    pub config_digest: String,
    pub rows: Vec<PhaseRow>,
    pub avg: f64,
    pub last: f64,
}

#[derive(Serialize, Deserialize)]
pub struct Summary {
    pub avg: f64,
    pub last: f64,
    pub config_digest: String,
}

impl RunReport {
    pub fn new(mode: &str, seed: u64, config_digest: &str, results: &[PhaseResult]) -> Result<Self> {
        let rows: Vec<PhaseRow> = results.iter().map(PhaseRow::from).collect();
        let (avg, last) = summarize_top1(&rows.iter().map(|r| r.top1).collect::<Vec<_>>())?;
        Ok(Self { mode: mode.to_string(), seed, config_digest: config_digest.to_string(), rows, avg, last })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `metrics.csv`, `summary.json` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(&dir.join("metrics.csv"))?;
        let summary = Summary { avg: self.avg, last: self.last, config_digest: self.config_digest.clone() };
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub fn read_csv(path: &Path) -> Result<Vec<PhaseRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The series drawn by [`emit_plots`], in plot units.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotData {
    /// `(mode, [(phase, top-1 accuracy %)])`.
    pub accuracy: Vec<(String, Vec<(f64, f64)>)>,
    /// `(mode, [(phase, mean record bpp)])`.
    pub bpp: Vec<(String, Vec<(f64, f64)>)>,
}

const COLOURS: [RGBColor; 5] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40), RGBColor(148, 103, 189)];

fn draw(path: &Path, caption: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Io(std::io::Error::other(format!("plot {}: {e}", path.display())));
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = points.clone().map(|p| p.0).fold(0.0, f64::max);
    let (y_min, y_max) = points.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let pad = ((y_max - y_min) * 0.1).max(0.5);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5..x_max + 0.5, (y_min - pad).max(0.0)..y_max + pad)
        .map_err(|e| plot_err(&e))?;
    chart.configure_mesh().x_desc("phase").y_desc(y_label).draw().map_err(|e| plot_err(&e))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), colour.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], colour.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, colour.filled()))).map_err(|e| plot_err(&e))?;
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Writes `accuracy.svg` and `bpp.svg` with one curve per report.
pub fn emit_plots(reports: &[&RunReport], dir: &Path) -> Result<PlotData> {
    if reports.iter().any(|r| r.rows.is_empty()) || reports.is_empty() {
        return Err(Error::EmptyInput("plots need at least one phase".into()));
    }
    std::fs::create_dir_all(dir)?;
    let series = |f: fn(&PhaseRow) -> f64| -> Vec<(String, Vec<(f64, f64)>)> {
        reports.iter().map(|r| (r.mode.clone(), r.rows.iter().map(|row| (row.phase as f64, f(row))).collect())).collect()
    };
    let data = PlotData { accuracy: series(|r| r.top1 * 100.0), bpp: series(|r| r.mean_bpp) };
    draw(&dir.join("accuracy.svg"), "Top-1 accuracy on seen classes", "top-1 (%)", &data.accuracy)?;
    draw(&dir.join("bpp.svg"), "Mean exemplar bits per pixel", "bpp", &data.bpp)?;
    Ok(data)
}
