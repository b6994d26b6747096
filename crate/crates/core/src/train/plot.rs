//! SVG plots: training curves and grid bar charts.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{MipaError, Result};

use super::grid::GridRow;
use super::metrics::{MetricsRecord, RecordKind};

fn plot_err<E: std::fmt::Display>(e: E) -> MipaError {
    MipaError::InvalidValue(format!("plotting failed: {e}"))
}

/// Detection loss per logged step (left) and AP50 per epoch (right).
pub fn plot_training_curves(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let root = SVGBackend::new(path, (960, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (left, right) = root.split_horizontally(480);

    let loss: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Train)
        .filter_map(|r| r.l_det.map(|l| (r.step as f64, l)))
        .collect();
    let max_step = loss.last().map_or(1.0, |p| p.0.max(1.0));
    let max_loss = loss.iter().map(|p| p.1).fold(1e-6, f64::max);
    let mut chart = ChartBuilder::on(&left)
        .caption("detection loss", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_step, 0.0..max_loss * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").draw().map_err(plot_err)?;
    chart.draw_series(LineSeries::new(loss, &BLUE)).map_err(plot_err)?;

    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Eval).collect();
    let n_epochs = evals.last().map_or(1, |r| r.epoch + 1) as f64;
    let mut chart = ChartBuilder::on(&right)
        .caption("AP50 per epoch", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n_epochs + 1.0, 0.0..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    let series: [(&str, fn(&MetricsRecord) -> Option<f64>, RGBColor); 3] = [
        ("rgb", |r| r.ap50_rgb, RED),
        ("ir", |r| r.ap50_ir, BLACK),
        ("avg", |r| r.ap50_avg, BLUE),
    ];
    for (label, get, color) in series {
        let pts: Vec<(f64, f64)> = evals
            .iter()
            .filter_map(|r| get(r).map(|v| ((r.epoch + 1) as f64, v)))
            .collect();
        chart
            .draw_series(LineSeries::new(pts, &color))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
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

/// Grouped bars of mean AP50 (rgb, ir, average) per grid cell, with
/// ±std whiskers.
pub fn plot_grid_bars(path: &Path, rows: &[GridRow]) -> Result<()> {
    let width = (160 * rows.len().max(1) + 120) as u32;
    let root = SVGBackend::new(path, (width.max(480), 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = rows.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption("AP50 by grid cell", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..n as f64, 0.0..1.0)
        .map_err(plot_err)?;
    let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .draw()
        .map_err(plot_err)?;
    let colors = [RED, BLACK, BLUE];
    let names = ["rgb", "ir", "avg"];
    for (k, color) in colors.into_iter().enumerate() {
        let bars = rows.iter().enumerate().filter_map(|(i, r)| {
            let (m, _) = r.ap50(k)?;
            let x0 = i as f64 + 0.15 + 0.23 * k as f64;
            Some(Rectangle::new([(x0, 0.0), (x0 + 0.2, m)], color.mix(0.7).filled()))
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(names[k])
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
        let whiskers = rows.iter().enumerate().filter_map(|(i, r)| {
            let (m, s) = r.ap50(k)?;
            let x = i as f64 + 0.25 + 0.23 * k as f64;
            Some(PathElement::new(vec![(x, (m - s).max(0.0)), (x, (m + s).min(1.0))], BLACK))
        });
        chart.draw_series(whiskers).map_err(plot_err)?;
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
