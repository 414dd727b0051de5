//! Static SVG figures built from metric logs only.

use std::path::Path;

use plotters::prelude::*;

use crate::train::{LogRecord, PowersetTable};
use crate::{Error, Result};

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::validation(format!("plot: {e}"))
}

const PALETTE: [RGBColor; 4] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
];

/// Vertical bars, one per label.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::validation("plot: no bars"));
    }
    let top = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-6) * 1.1;
    let width = (120 + 60 * bars.len() as u32).max(480);
    let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(56)
        .build_cartesian_2d((0..bars.len()).into_segmented(), 0.0..top)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc(y_label)
        .x_labels(bars.len())
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => bars.get(*i).map(|b| b.0.clone()).unwrap_or_default(),
            _ => String::new(),
        })
        .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
            let mut r = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), *v)],
                PALETTE[0].filled(),
            );
            r.set_margin(0, 0, 6, 6);
            r
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Line series sharing one axis pair.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        return Err(Error::validation("plot: no points"));
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Per-epoch mean loss, α, and evaluation IoU where logged.
pub fn training_curves(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut loss = Vec::new();
    let mut alpha = Vec::new();
    let mut iou = Vec::new();
    for r in log {
        if let LogRecord::Epoch {
            epoch,
            alpha: a,
            mean_loss,
            eval,
            ..
        } = r
        {
            loss.push((*epoch as f64, *mean_loss));
            alpha.push((*epoch as f64, *a));
            if let Some(e) = eval {
                iou.push((*epoch as f64, e.mean_iou));
            }
        }
    }
    let mut series = vec![("mean loss".to_string(), loss), ("alpha".to_string(), alpha)];
    if !iou.is_empty() {
        series.push(("eval mean IoU".to_string(), iou));
    }
    line_chart(path, "Training", "epoch", "value", &series)
}

pub fn powerset_bars(path: &Path, table: &PowersetTable) -> Result<()> {
    let bars: Vec<(String, f64)> = table.rows.iter().map(|r| (r.subset.clone(), r.mean_iou)).collect();
    bar_chart(path, "Mean IoU per prior subset", "mean IoU", &bars)
}

/// One bar per labelled run, e.g. `vr` and `rv`.
pub fn fusion_order_bars(path: &Path, runs: &[(String, f64)]) -> Result<()> {
    bar_chart(path, "Fusion order", "mean IoU", runs)
}
