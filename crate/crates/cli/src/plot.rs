//! SVG figures, each written next to a CSV of exactly the plotted values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBar {
    pub observer: String,
    pub signal: String,
    pub task: String,
    pub dims: String,
    pub contrast: f64,
    pub pc: f64,
    pub se: f64,
}

impl MetricBar {
    fn group(&self) -> String {
        format!("{} {} {}", self.signal, self.task, self.dims)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EccentricityPoint {
    pub signal: String,
    pub eccentricity_dva: f64,
    pub observed_dprime: f64,
    pub model_dprime: f64,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize().enumerate() {
        out.push(row.with_context(|| format!("{} line {}", path.display(), i + 2))?);
    }
    if out.is_empty() {
        bail!("{} has no rows", path.display());
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_bars(path: &Path) -> Result<Vec<MetricBar>> {
    read_csv(path)
}

pub fn write_bar_csv(path: &Path, bars: &[MetricBar]) -> Result<()> {
    write_csv(path, bars)
}

pub fn read_eccentricity(path: &Path) -> Result<Vec<EccentricityPoint>> {
    read_csv(path)
}

pub fn write_eccentricity_csv(path: &Path, points: &[EccentricityPoint]) -> Result<()> {
    write_csv(path, points)
}

fn distinct(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn plot_err<E: std::fmt::Display>(e: E) -> anyhow::Error {
    anyhow::anyhow!("plotting failed: {e}")
}

/// Grouped PC bars, one group per condition and one color per observer, with 1-SE whiskers.
pub fn draw_pc_bars(path: &Path, bars: &[MetricBar]) -> Result<()> {
    let groups = distinct(bars.iter().map(MetricBar::group));
    let observers = distinct(bars.iter().map(|b| b.observer.clone()));
    let width = (160 * groups.len()).max(640) as u32;
    let root = SVGBackend::new(path, (width, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption("Proportion correct", ("sans-serif", 20))
        .build_cartesian_2d(0.0..groups.len() as f64, 0.4..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups.len() + 1)
        .x_label_formatter(&|x| {
            let i = (x - 0.5).round();
            if (x - 0.5 - i).abs() < 1e-6 && i >= 0.0 {
                groups.get(i as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("PC")
        .draw()
        .map_err(plot_err)?;
    let slot = 0.8 / observers.len() as f64;
    for (oi, obs) in observers.iter().enumerate() {
        let color = Palette99::pick(oi).to_rgba();
        let mine: Vec<(f64, &MetricBar)> = bars
            .iter()
            .filter(|b| &b.observer == obs)
            .filter_map(|b| groups.iter().position(|g| *g == b.group()).map(|gi| (gi as f64 + 0.1 + slot * oi as f64, b)))
            .collect();
        chart
            .draw_series(mine.iter().map(|(x, b)| Rectangle::new([(*x, 0.4), (*x + slot * 0.9, b.pc)], color.filled())))
            .map_err(plot_err)?
            .label(obs.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        chart
            .draw_series(mine.iter().map(|(x, b)| {
                let c = *x + slot * 0.45;
                PathElement::new(vec![(c, b.pc - b.se), (c, b.pc + b.se)], BLACK)
            }))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Observed d' as points and model d' as lines, one color per signal.
pub fn draw_eccentricity(path: &Path, points: &[EccentricityPoint]) -> Result<()> {
    let signals = distinct(points.iter().map(|p| p.signal.clone()));
    let emax = points.iter().map(|p| p.eccentricity_dva).fold(1.0, f64::max);
    let dmax = points
        .iter()
        .flat_map(|p| [p.observed_dprime, p.model_dprime])
        .filter(|v| v.is_finite())
        .fold(0.5, f64::max);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption("d' against eccentricity", ("sans-serif", 20))
        .build_cartesian_2d(0.0..emax * 1.05, 0.0..dmax * 1.1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("eccentricity (deg)")
        .y_desc("d'")
        .draw()
        .map_err(plot_err)?;
    for (si, signal) in signals.iter().enumerate() {
        let color = Palette99::pick(si).to_rgba();
        let mut mine: Vec<&EccentricityPoint> = points.iter().filter(|p| &p.signal == signal).collect();
        mine.sort_by(|a, b| a.eccentricity_dva.total_cmp(&b.eccentricity_dva));
        chart
            .draw_series(LineSeries::new(
                mine.iter().filter(|p| p.model_dprime.is_finite()).map(|p| (p.eccentricity_dva, p.model_dprime)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(signal.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(
                mine.iter()
                    .filter(|p| p.observed_dprime.is_finite())
                    .map(|p| Circle::new((p.eccentricity_dva, p.observed_dprime), 4, color.filled())),
            )
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
