//! Loss, schedule and position-MI curves from a metrics log.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{CapiError, Result};
use crate::trainer::StepMetrics;

/// Position MI above this many nats signals positional collapse.
pub const COLLAPSE_THRESHOLD: f64 = 0.05;

/// The arrays behind every emitted plot, keyed by series name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotData {
    pub series: BTreeMap<String, Vec<(f64, f64)>>,
    pub files: Vec<PathBuf>,
}

/// Parses line-delimited metric records, skipping malformed lines with a
/// warning.
pub fn parse_metrics(log: &str) -> Vec<StepMetrics> {
    log.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .filter_map(|(i, l)| match serde_json::from_str(l) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("skipping malformed metrics record on line {}: {e}", i + 1);
                None
            }
        })
        .collect()
}

fn plot_err<E: std::fmt::Display>(e: E) -> CapiError {
    CapiError::Plot(e.to_string())
}

fn bounds(lines: &[&[(f64, f64)]]) -> ((f64, f64), (f64, f64)) {
    let pts = || lines.iter().flat_map(|l| l.iter());
    let fold = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo {
            0.05 * (hi - lo)
        } else {
            0.5_f64.max(lo.abs() * 0.1)
        };
        (lo - pad, hi + pad)
    };
    (fold(|p| p.0), fold(|p| p.1))
}

fn draw(path: &Path, lines: &[(&[(f64, f64)], RGBColor)]) -> Result<()> {
    let root = BitMapBackend::new(path, (640, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let refs: Vec<&[(f64, f64)]> = lines.iter().map(|l| l.0).collect();
    let ((x0, x1), (y0, y1)) = bounds(&refs);
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .plotting_area()
        .draw(&Rectangle::new([(x0, y0), (x1, y1)], BLACK.stroke_width(1)))
        .map_err(plot_err)?;
    for &(pts, color) in lines {
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?;
        if pts.len() == 1 {
            chart
                .draw_series(pts.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `loss.png` (MIM in blue, clustering in red), `lr.png`,
/// `momentum.png` and `position_mi.png` (with the collapse threshold in
/// grey) into `out_dir`.
pub fn emit_plots(log: &str, out_dir: &Path) -> Result<PlotData> {
    let records = parse_metrics(log);
    if records.is_empty() {
        return Err(CapiError::Dataset(
            "metrics log has no valid records".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let series = |f: fn(&StepMetrics) -> f64| -> Vec<(f64, f64)> {
        records.iter().map(|m| (m.step as f64, f(m))).collect()
    };
    let mut data = PlotData::default();
    for (name, f) in [
        (
            "mim_loss",
            (|m: &StepMetrics| m.mim_loss) as fn(&StepMetrics) -> f64,
        ),
        ("cluster_loss", |m| m.cluster_loss),
        ("lr", |m| m.lr),
        ("momentum", |m| m.momentum),
        ("position_mi", |m| m.position_mi),
    ] {
        data.series.insert(name.to_string(), series(f));
    }
    let (first, last) = (
        records[0].step as f64,
        records[records.len() - 1].step as f64,
    );
    data.series.insert(
        "collapse_threshold".into(),
        vec![(first, COLLAPSE_THRESHOLD), (last, COLLAPSE_THRESHOLD)],
    );

    let s = |k: &str| data.series[k].as_slice();
    let grey = RGBColor(150, 150, 150);
    let plots: [(&str, Vec<(&[(f64, f64)], RGBColor)>); 4] = [
        (
            "loss.png",
            vec![(s("mim_loss"), BLUE), (s("cluster_loss"), RED)],
        ),
        ("lr.png", vec![(s("lr"), BLUE)]),
        ("momentum.png", vec![(s("momentum"), BLUE)]),
        (
            "position_mi.png",
            vec![(s("collapse_threshold"), grey), (s("position_mi"), BLUE)],
        ),
    ];
    let mut files = Vec::new();
    for (file, lines) in plots {
        let path = out_dir.join(file);
        draw(&path, &lines)?;
        files.push(path);
    }
    data.files = files;
    Ok(data)
}
