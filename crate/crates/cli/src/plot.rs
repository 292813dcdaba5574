//! Hand-written SVG charts for the pipeline's report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tealeaf_core::adversarial::SweepReport;
use tealeaf_core::evaluator::SavedEvaluation;
use tealeaf_core::trainer::{load_history, TrainingHistory};

use crate::CliError;

const W: f64 = 420.0;
const H: f64 = 300.0;
const MARGIN: (f64, f64, f64, f64) = (50.0, 20.0, 30.0, 45.0); // left, right, top, bottom
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 { lo.abs() * 0.05 } else { 0.5 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// A line chart placed at `(ox, oy)`, `W`×`H` in size.
pub fn line_chart(title: &str, x_label: &str, series: &[Series], marker: Option<f64>, ox: f64, oy: f64) -> String {
    let (l, r, t, b) = MARGIN;
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| ox + l + (x - x0) / (x1 - x0) * (W - l - r);
    let py = |y: f64| oy + H - b - (y - y0) / (y1 - y0) * (H - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        ox + W / 2.0,
        oy + 18.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        ox + l,
        oy + t,
        W - l - r,
        H - t - b
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(xv),
            oy + H - b + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            ox + l - 4.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        ox + l + (W - l - r) / 2.0,
        oy + H - 8.0,
        esc(x_label)
    );
    if let Some(m) = marker {
        let _ = writeln!(
            s,
            r##"<line x1="{0}" x2="{0}" y1="{1}" y2="{2}" stroke="#888" stroke-dasharray="4 3"/>"##,
            px(m),
            oy + t,
            oy + H - b
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.2" fill="{color}"/>"#);
        }
        let ly = oy + t + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" text-anchor="end" fill="{color}">{}</text>"#,
            ox + W - r - 6.0,
            esc(&ser.name)
        );
    }
    s.push_str("</g>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

pub fn history_svg(history: &TrainingHistory) -> String {
    let col = |f: fn(&tealeaf_core::trainer::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        history.records.iter().map(|r| (r.epoch as f64, f(r))).collect()
    };
    let marker = (history.best_epoch > 0).then_some(history.best_epoch as f64);
    let loss = [
        Series {
            name: "train".into(),
            points: col(|r| r.train_loss),
        },
        Series {
            name: "validation".into(),
            points: col(|r| r.val_loss),
        },
    ];
    let acc = [
        Series {
            name: "train".into(),
            points: col(|r| r.train_accuracy),
        },
        Series {
            name: "validation".into(),
            points: col(|r| r.val_accuracy),
        },
    ];
    let body =
        line_chart("Loss", "epoch", &loss, marker, 0.0, 0.0) + &line_chart("Accuracy", "epoch", &acc, marker, W, 0.0);
    document(2.0 * W, H, &body)
}

pub fn sweep_svg(report: &SweepReport) -> String {
    let acc = [Series {
        name: "validation accuracy".into(),
        points: report.rows.iter().map(|r| (r.epsilon, r.val_accuracy)).collect(),
    }];
    let loss = [Series {
        name: "validation loss".into(),
        points: report.rows.iter().map(|r| (r.epsilon, r.val_loss)).collect(),
    }];
    let body = line_chart("Accuracy vs epsilon", "epsilon", &acc, None, 0.0, 0.0)
        + &line_chart("Loss vs epsilon", "epsilon", &loss, None, W, 0.0);
    document(2.0 * W, H, &body)
}

pub fn confusion_svg(saved: &SavedEvaluation) -> String {
    let k = saved.class_names.len();
    let cell = 44.0;
    let left = 10.0 + 7.0 * saved.class_names.iter().map(|n| n.len()).max().unwrap_or(4) as f64;
    let top = 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" font-family="sans-serif" font-size="13">Confusion matrix (accuracy {:.4})</text>"#,
        left, saved.accuracy
    );
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11">"#);
    for (i, row) in saved.matrix.iter().enumerate() {
        let total: u64 = row.iter().sum();
        let y = top + i as f64 * cell;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell / 2.0 + 4.0,
            esc(&saved.class_names[i])
        );
        for (j, &n) in row.iter().enumerate() {
            let frac = if total > 0 { n as f64 / total as f64 } else { 0.0 };
            let shade = (255.0 * (1.0 - 0.85 * frac)).round() as u8;
            let x = left + j as f64 * cell;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#ccc"/>"##
            );
            let ink = if frac > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{n}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    let base = top + k as f64 * cell;
    for (j, name) in saved.class_names.iter().enumerate() {
        let x = left + j as f64 * cell + cell / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="end" transform="rotate(-40 {x} {})">{}</text>"#,
            base + 12.0,
            base + 12.0,
            esc(name)
        );
    }
    s.push_str("</g>\n");
    let width = left + k as f64 * cell + 20.0;
    let height = base + left.max(60.0);
    document(width, height, &s)
}

/// Renders whichever known report format `path` holds.
pub fn render_file(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("{} not found", path.display())));
    }
    if path.extension().is_some_and(|e| e == "json") {
        return SavedEvaluation::load(path)
            .map(|s| confusion_svg(&s))
            .map_err(|e| CliError::Input(format!("{}: not an evaluation report ({e})", path.display())));
    }
    if let Ok(h) = load_history(path) {
        return Ok(history_svg(&h));
    }
    SweepReport::load(path).map(|r| sweep_svg(&r)).map_err(|_| {
        CliError::Input(format!(
            "{}: neither a training history nor a sweep report",
            path.display()
        ))
    })
}

/// Report files a run directory may hold, in a stable order.
pub fn discover(dir: &Path) -> Vec<PathBuf> {
    let mut found: Vec<PathBuf> = ["history.jsonl", "adv_history.jsonl", "sweep.jsonl"]
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| p.exists())
        .collect();
    if let Ok(entries) = std::fs::read_dir(dir) {
        let mut metrics: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with("_metrics.json"))
            .collect();
        metrics.sort();
        found.extend(metrics);
    }
    found
}

#[cfg(test)]
mod tests {
    use super::*;
    use tealeaf_core::adversarial::SweepRow;
    use tealeaf_core::trainer::{export_history, EpochRecord};

    #[test]
    fn history_file_round_trips_into_a_chart() {
        let dir = tempfile::tempdir().unwrap();
        let history = TrainingHistory {
            records: (1..=4)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    train_accuracy: 0.2 * e as f64,
                    val_loss: 1.2 / e as f64,
                    val_accuracy: 0.18 * e as f64,
                })
                .collect(),
            best_epoch: 4,
            stopped_early: false,
        };
        let path = dir.path().join("history.jsonl");
        export_history(&history, &path).unwrap();
        let svg = render_file(&path).unwrap();
        assert_eq!(svg, history_svg(&history));
        assert!(svg.contains("<polyline") && svg.contains("Accuracy"));
    }

    #[test]
    fn sweep_file_round_trips_into_a_chart() {
        let dir = tempfile::tempdir().unwrap();
        let report = SweepReport {
            rows: vec![
                SweepRow {
                    epsilon: 0.0,
                    val_loss: 0.1,
                    val_accuracy: 0.99,
                    optimal_epochs: 3,
                },
                SweepRow {
                    epsilon: 0.1,
                    val_loss: 0.2,
                    val_accuracy: 0.98,
                    optimal_epochs: 4,
                },
            ],
        };
        let path = dir.path().join("sweep.jsonl");
        report.save(&path).unwrap();
        assert_eq!(render_file(&path).unwrap(), sweep_svg(&report));
    }

    #[test]
    fn unrelated_files_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("notes.jsonl");
        std::fs::write(&path, "{\"hello\": 1}\n").unwrap();
        assert!(render_file(&path).is_err());
        assert!(render_file(&dir.path().join("missing.jsonl")).is_err());
    }

    #[test]
    fn names_are_escaped() {
        let saved = SavedEvaluation {
            classes: vec![],
            accuracy: 0.5,
            class_names: vec!["a<b".into(), "c&d".into()],
            matrix: vec![vec![1, 1], vec![0, 2]],
        };
        let svg = confusion_svg(&saved);
        assert!(svg.contains("a&lt;b") && svg.contains("c&amp;d"));
        assert!(!svg.contains("a<b"));
    }
}
