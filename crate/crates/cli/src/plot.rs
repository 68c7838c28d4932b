//! Self-contained SVG renderings of training curves and ROC curves.

use std::fmt::Write as _;
use std::path::Path;

use cct::train::TrainLog;

use crate::error::CliError;

const PALETTE: [&str; 9] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#000000"];

/// One line on a chart.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let sx = if self.xr.1 > self.xr.0 { (x - self.xr.0) / (self.xr.1 - self.xr.0) } else { 0.5 };
        let sy = if self.yr.1 > self.yr.0 { (y - self.yr.0) / (self.yr.1 - self.yr.0) } else { 0.5 };
        (self.x0 + sx * self.w, self.y0 + self.h - sy * self.h)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// One chart panel with axes, ticks, title, polylines and a legend.
fn panel(out: &mut String, frame: &Frame, title: &str, xlabel: &str, ylabel: &str, series: &[Series]) {
    let Frame { x0, y0, w, h, .. } = *frame;
    writeln!(out, r#"<g class="panel">"#).unwrap();
    writeln!(out, r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="15">{}</text>"#, x0 + w / 2.0, y0 - 10.0, escape(title))
        .unwrap();
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, x0 + w / 2.0, y0 + h + 36.0, escape(xlabel))
        .unwrap();
    writeln!(
        out,
        r#"<text x="{x}" y="{y}" text-anchor="middle" font-size="12" transform="rotate(-90 {x} {y})">{}</text>"#,
        escape(ylabel),
        x = x0 - 44.0,
        y = y0 + h / 2.0
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.xr.0 + f * (frame.xr.1 - frame.xr.0);
        let yv = frame.yr.0 + f * (frame.yr.1 - frame.yr.0);
        let (tx, _) = frame.px(xv, frame.yr.0);
        let (_, ty) = frame.px(frame.xr.0, yv);
        writeln!(out, r#"<text x="{tx:.1}" y="{:.1}" text-anchor="middle" font-size="10">{xv:.2}</text>"#, y0 + h + 16.0).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{yv:.2}</text>"#, x0 - 6.0, ty + 3.0).unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = frame.px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
            escape(&s.label),
            pts.join(" ")
        )
        .unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = y0 + 14.0 + i as f64 * 16.0;
        let lx = x0 + w + 14.0;
        writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(out, r#"<text class="legend" x="{}" y="{}" font-size="11">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label))
            .unwrap();
    }
    writeln!(out, "</g>").unwrap();
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Loss and accuracy panels, train and validation series each.
pub fn training_svg(log: &TrainLog) -> Result<String, CliError> {
    if log.rows.is_empty() {
        return Err(CliError::Usage("trainlog has no epochs to plot".into()));
    }
    let col = |f: fn(&cct::EpochRow) -> f64| log.rows.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    let loss = [
        Series { label: "train loss".into(), points: col(|r| r.train_loss), dashed: false },
        Series { label: "validation loss".into(), points: col(|r| r.val_loss), dashed: true },
    ];
    let acc = [
        Series { label: "train accuracy".into(), points: col(|r| r.train_acc), dashed: false },
        Series { label: "validation accuracy".into(), points: col(|r| r.val_acc), dashed: true },
    ];
    let xr = padded_range(log.rows.iter().map(|r| r.epoch as f64));
    let loss_range = padded_range(loss.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut body = String::new();
    let frame = |x0: f64, yr| Frame { x0, y0: 40.0, w: 330.0, h: 300.0, xr, yr };
    panel(&mut body, &frame(70.0, loss_range), "Loss", "epoch", "loss", &loss);
    panel(&mut body, &frame(600.0, (0.0, 1.0)), "Accuracy", "epoch", "accuracy", &acc);
    Ok(document(1120.0, 400.0, &body))
}

/// Overlaid ROC curves with a diagonal chance line.
pub fn roc_svg(series: &[Series]) -> String {
    let mut body = String::new();
    let frame = Frame { x0: 70.0, y0: 40.0, w: 420.0, h: 420.0, xr: (0.0, 1.0), yr: (0.0, 1.0) };
    let (ax, ay) = frame.px(0.0, 0.0);
    let (bx, by) = frame.px(1.0, 1.0);
    writeln!(body, r##"<line x1="{ax}" y1="{ay}" x2="{bx}" y2="{by}" stroke="#bbb" stroke-dasharray="4 4"/>"##).unwrap();
    panel(&mut body, &frame, "Multiclass ROC (one vs rest)", "false positive rate", "true positive rate", series);
    document(860.0, 520.0, &body)
}

/// `(fpr, tpr)` points of a `threshold,fpr,tpr` CSV.
pub fn read_roc_csv(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, why: &str| CliError::Usage(format!("{}:{line}: {why}", path.display()));
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, h)| h.trim()) != Some("threshold,fpr,tpr") {
        return Err(bad(1, "expected header `threshold,fpr,tpr`"));
    }
    let mut points = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        if f.len() != 3 {
            return Err(bad(i + 1, "expected 3 fields"));
        }
        parse(f[0])?;
        points.push((parse(f[1])?, parse(f[2])?));
    }
    if points.len() < 2 {
        return Err(bad(1, "need at least two ROC points"));
    }
    Ok(points)
}

pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Write `text` to `path` via a temporary sibling, so a failure never
/// leaves a truncated file behind.
pub fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("svg.partial");
    let result = std::fs::write(&tmp, text).and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cct::EpochRow;

    #[test]
    fn training_svg_has_one_point_per_epoch() {
        let rows = (1..=5)
            .map(|e| EpochRow {
                epoch: e,
                train_loss: 2.0 / e as f64,
                train_acc: 0.1 * e as f64,
                val_loss: 2.1 / e as f64,
                val_acc: 0.09 * e as f64,
                wall_seconds: 0.0,
            })
            .collect();
        let svg = training_svg(&TrainLog { rows }).unwrap();
        let polylines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert_eq!(polylines.len(), 4);
        for p in polylines {
            let pts = p.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            assert_eq!(pts.split(' ').count(), 5);
        }
        assert!(training_svg(&TrainLog::default()).is_err());
    }

    #[test]
    fn auc_of_diagonal_and_step() {
        assert_eq!(trapezoid_auc(&[(0.0, 0.0), (1.0, 1.0)]), 0.5);
        assert_eq!(trapezoid_auc(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]), 1.0);
    }
}
