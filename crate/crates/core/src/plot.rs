//! SVG figures: per-frame metric traces and robustness curves.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::SequenceReport;
use crate::sweep::{Metric, Sweep, SweepKind};

const PANEL: (u32, u32) = (420, 320);
const COLORS: [RGBColor; 4] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40)];

fn draw_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::format(path, format!("plot failed: {e:?}"))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    let pad = ((hi - lo) * 0.08).max(1e-6);
    (lo, hi + pad)
}

struct Series<'a> {
    name: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel<DB: DrawingBackend>(
    area: &DrawingArea<DB, plotters::coord::Shift>,
    title: &str,
    x_desc: &str,
    y_desc: &str,
    series: &[Series<'_>],
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(area)
        .caption(title, ("sans-serif", 16))
        .margin(8)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(x0..x1.max(x0 + 1e-6), y0..y1)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).light_line_style(WHITE).draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(s.points.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    if series.len() > 1 {
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw()?;
    }
    Ok(())
}

/// One panel per metric, each with one line per report, plotted against the
/// tracked frame index.
pub fn plot_metric_vs_frame(reports: &[SequenceReport], path: &Path) -> Result<()> {
    if reports.iter().all(|r| r.frames.is_empty()) {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let root = SVGBackend::new(path, (PANEL.0 * 3, PANEL.1)).into_drawing_area();
    let err = draw_err(path);
    root.fill(&WHITE).map_err(&err)?;
    for (area, metric) in root.split_evenly((1, 3)).iter().zip(Metric::ALL) {
        let series: Vec<Series> = reports
            .iter()
            .map(|r| Series {
                name: &r.seq_id,
                points: r.frames.iter().enumerate().map(|(t, f)| ((t + 1) as f64, metric.of(f))).collect(),
            })
            .collect();
        panel(area, metric.label(), "frame", metric.label(), &series).map_err(&err)?;
    }
    root.present().map_err(&err)
}

/// Robustness figure: one panel per metric plus one for A_d.
pub fn plot_sweep(sweep: &Sweep, path: &Path) -> Result<()> {
    if sweep.points.is_empty() {
        return Err(Error::InvalidInput("sweep has no points".into()));
    }
    let x_desc = match sweep.kind {
        SweepKind::Noise => "noise level (x)",
        SweepKind::FrameDrop => "kept frame fraction",
    };
    let root = SVGBackend::new(path, (PANEL.0 * 4, PANEL.1)).into_drawing_area();
    let err = draw_err(path);
    root.fill(&WHITE).map_err(&err)?;
    let areas = root.split_evenly((1, 4));
    for (area, metric) in areas.iter().zip(Metric::ALL) {
        let series = [Series { name: metric.label(), points: sweep.curve(metric) }];
        panel(area, metric.label(), x_desc, metric.label(), &series).map_err(&err)?;
    }
    let names: Vec<String> = sweep.points[0].report.accuracy.iter().map(|a| format!("A_{}cm", a.threshold_cm)).collect();
    let acc: Vec<Series> = sweep.points[0]
        .report
        .accuracy
        .iter()
        .zip(&names)
        .map(|(a, name)| Series { name, points: sweep.accuracy_curve(a.threshold_cm) })
        .collect();
    panel(&areas[3], "accuracy", x_desc, "fraction of frames", &acc).map_err(&err)?;
    root.present().map_err(&err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::FrameMetrics;
    use crate::sweep::SweepPoint;

    fn report(id: &str, k: f64) -> SequenceReport {
        let frames = (0..5).map(|t| FrameMetrics { d_nocs: 0.01 * k * t as f64, d_chamf: k, d_corr: k + t as f64 }).collect();
        SequenceReport::from_frames(id, frames, &[3.0, 5.0]).unwrap()
    }

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("frames.svg");
        plot_metric_vs_frame(&[report("a", 1.0), report("b", 2.0)], &p).unwrap();
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("D_nocs"));

        let sweep = Sweep {
            kind: SweepKind::Noise,
            points: (1..=3).map(|k| SweepPoint { label: format!("{k}x"), x: k as f64, report: report("all", k as f64) }).collect(),
        };
        let p = dir.path().join("noise.svg");
        plot_sweep(&sweep, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("A_3cm"));
        assert!(plot_sweep(&Sweep { kind: SweepKind::Noise, points: vec![] }, &p).is_err());
    }
}
