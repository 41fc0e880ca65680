use std::path::Path;

use mutualseg::eval::DiceReport;
use mutualseg::trainer::MetricsRecord;
use plotters::prelude::*;

use crate::CliError;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Plot(format!("{}: {e}", path.display()))
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= w {
            sum -= v[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Loss terms against iteration, smoothed over 20 iterations.
pub fn loss_curves(path: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    const TERMS: [&str; 9] = ["sup_syn", "sup_real", "kd_s2r", "kd_r2s", "adv_t", "adv_a", "cyc", "d_t", "d_a"];
    let series: Vec<(&str, Vec<f64>)> = TERMS
        .iter()
        .map(|&t| {
            let v: Vec<f64> = records.iter().map(|r| r.report.get(t).unwrap_or(0.0)).collect();
            (t, moving_average(&v, 20))
        })
        .filter(|(_, v)| v.iter().any(|&x| x != 0.0))
        .collect();
    let n = records.len().max(2) as f64;
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1e-3, f64::max)
        * 1.05;
    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses (20-iteration moving average)", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..n, 0f64..ymax)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (i, (name, v)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                v.iter().enumerate().map(|(k, &y)| ((k + 1) as f64, y)),
                color.stroke_width(2),
            ))
            .map_err(|e| plot_err(path, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// One bar per report: foreground mean Dice.
pub fn dice_bars(path: &Path, rows: &[(String, DiceReport)]) -> Result<(), CliError> {
    let n = rows.len().max(1);
    let root = SVGBackend::new(path, ((120 + 70 * n) as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mean foreground Dice", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(120)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..n as f64, 0f64..1f64)
        .map_err(|e| plot_err(path, e))?;
    let labels: Vec<String> = rows
        .iter()
        .map(|(exp, r)| format!("{exp}:{}", r.model_tag.as_str()))
        .collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            labels.get(i).cloned().unwrap_or_default()
        })
        .x_label_style(("sans-serif", 11).into_font().transform(FontTransform::Rotate90))
        .y_desc("Dice")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, (_, r))| {
            let color = Palette99::pick(r.model_tag as usize).filled();
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, r.mean.clamp(0.0, 1.0))], color)
        }))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
