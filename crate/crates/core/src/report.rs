//! Metrics persistence and report emission: per-run CSVs, SVG charts of
//! training curves and group accuracies, and sweep summary tables.
//!
//! All output is plain text and byte-deterministic for identical inputs.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "epoch,step,loss_b,loss_d,loss_constraint,mean_w,acc_unbiased,acc_ba,acc_bc";

/// One recorded evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_b: f64,
    pub loss_d: f64,
    pub loss_constraint: f64,
    pub mean_w: f64,
    pub acc_unbiased: f64,
    pub acc_ba: f64,
    pub acc_bc: f64,
}

/// Time-ordered record of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.step,
                fmt_g6(r.loss_b),
                fmt_g6(r.loss_d),
                fmt_g6(r.loss_constraint),
                fmt_g6(r.mean_w),
                fmt_g6(r.acc_unbiased),
                fmt_g6(r.acc_ba),
                fmt_g6(r.acc_bc),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunMetrics> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty metrics file".into()))?;
        if header != METRICS_HEADER {
            return Err(Error::Format(format!(
                "unexpected metrics header '{header}'"
            )));
        }
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 9 {
                return Err(Error::Format(format!(
                    "metrics line {} has {} fields",
                    lineno + 2,
                    fields.len()
                )));
            }
            let int = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad integer '{s}'")))
            };
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number '{s}'")))
            };
            rows.push(MetricsRow {
                epoch: int(fields[0])?,
                step: int(fields[1])?,
                loss_b: num(fields[2])?,
                loss_d: num(fields[3])?,
                loss_constraint: num(fields[4])?,
                mean_w: num(fields[5])?,
                acc_unbiased: num(fields[6])?,
                acc_ba: num(fields[7])?,
                acc_bc: num(fields[8])?,
            });
        }
        Ok(RunMetrics { rows })
    }
}

pub fn write_metrics_csv(metrics: &RunMetrics, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(metrics.to_csv().as_bytes())?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<RunMetrics> {
    RunMetrics::from_csv(&fs::read_to_string(path)?)
}

/// Formats with six significant digits, printf `%g` style: plain decimal
/// in a readable exponent range, scientific otherwise, trailing zeros
/// trimmed.
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("numeric exponent");
    if !(-4..=5).contains(&exp) {
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{exp}")
    } else {
        let prec = (5 - exp).max(0) as usize;
        let s = format!("{x:.prec$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

const CHART_COLORS: [&str; 10] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf",
];

const W: f64 = 800.0;
const H: f64 = 500.0;
const ML: f64 = 60.0;
const MR: f64 = 150.0;
const MT: f64 = 20.0;
const MB: f64 = 45.0;

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <title>{title}</title>\n\
         <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = ML;
    let x1 = W - MR;
    let y0 = H - MB;
    let y1 = MT;
    let mut s = String::new();
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        (x0 + x1) / 2.0,
        H - 8.0
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    ));
    s
}

fn y_ticks_unit_interval() -> String {
    let mut s = String::new();
    let y0 = H - MB;
    let y1 = MT;
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y0 + (y1 - y0) * v;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"#cccccc\"/>\n",
            ML,
            W - MR
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            y + 4.0,
            fmt_g6(v)
        ));
    }
    s
}

/// Line chart of pooled accuracy against training step, one polyline per
/// run.
pub fn accuracy_line_chart(histories: &[RunMetrics], labels: &[String]) -> String {
    let max_step = histories
        .iter()
        .flat_map(|h| h.rows.iter().map(|r| r.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x0 = ML;
    let x1 = W - MR;
    let y0 = H - MB;
    let y1 = MT;
    let mut s = svg_header("accuracy vs step");
    s.push_str(&y_ticks_unit_interval());
    s.push_str(&axes("step", "accuracy (pooled)"));
    for i in 0..=4 {
        let frac = i as f64 / 4.0;
        let x = x0 + (x1 - x0) * frac;
        s.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 18.0,
            fmt_g6((max_step * frac).round())
        ));
    }
    for (run, (h, label)) in histories.iter().zip(labels).enumerate() {
        let color = CHART_COLORS[run % CHART_COLORS.len()];
        let points: Vec<String> = h
            .rows
            .iter()
            .map(|r| {
                let x = x0 + (x1 - x0) * (r.step as f64 / max_step);
                let y = y0 + (y1 - y0) * r.acc_unbiased.clamp(0.0, 1.0);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = MT + 16.0 * run as f64 + 10.0;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"3\"/>\n",
            W - MR + 8.0,
            W - MR + 28.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            W - MR + 34.0,
            ly + 4.0,
            xml_escape(label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart of final BA / BC / pooled accuracy per run.
pub fn group_bar_chart(histories: &[RunMetrics], labels: &[String]) -> String {
    let series = ["BA", "BC", "unbiased"];
    let x0 = ML;
    let x1 = W - MR;
    let y0 = H - MB;
    let y1 = MT;
    let n = histories.len().max(1) as f64;
    let group_w = (x1 - x0) / n;
    let bar_w = group_w / 4.0;
    let mut s = svg_header("group accuracy per run");
    s.push_str(&y_ticks_unit_interval());
    s.push_str(&axes("run", "accuracy"));
    for (run, (h, label)) in histories.iter().zip(labels).enumerate() {
        let values = match h.last() {
            Some(r) => [r.acc_ba, r.acc_bc, r.acc_unbiased],
            None => [0.0; 3],
        };
        let gx = x0 + group_w * run as f64;
        for (j, v) in values.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            let bx = gx + bar_w * (0.5 + j as f64);
            let bh = (y0 - y1) * v;
            s.push_str(&format!(
                "<rect x=\"{bx:.2}\" y=\"{:.2}\" width=\"{bar_w:.2}\" height=\"{bh:.2}\" fill=\"{}\"/>\n",
                y0 - bh,
                CHART_COLORS[j]
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            gx + group_w / 2.0,
            y0 + 18.0,
            xml_escape(label)
        ));
    }
    for (j, name) in series.iter().enumerate() {
        let ly = MT + 16.0 * j as f64 + 10.0;
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"14\" height=\"10\" fill=\"{}\"/>\n",
            W - MR + 8.0,
            ly - 8.0,
            CHART_COLORS[j]
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\">{name}</text>\n",
            W - MR + 28.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Sweep table: rows by one grid axis, columns by the other, cells either
/// a value or a failure marker.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    /// First header cell, e.g. `lambda_c`.
    pub row_axis: String,
    pub row_labels: Vec<String>,
    /// Column header prefix, e.g. `ratio_`.
    pub col_prefix: String,
    pub col_labels: Vec<String>,
    /// Row-major; `None` marks a failed cell.
    pub cells: Vec<Option<f64>>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = self.row_axis.clone();
        for c in &self.col_labels {
            out.push(',');
            out.push_str(&format!("{}{}", self.col_prefix, c));
        }
        out.push('\n');
        for (i, r) in self.row_labels.iter().enumerate() {
            out.push_str(r);
            for j in 0..self.col_labels.len() {
                out.push(',');
                match self.cells[i * self.col_labels.len() + j] {
                    Some(v) => out.push_str(&fmt_g6(v)),
                    None => out.push_str("FAIL"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Parses labels of the form `lambda=<tok> ratio=<tok> [seed=<tok>]` and
/// assembles the sweep table from final bias-conflicting accuracies,
/// averaging over seeds. Returns `None` when the labels do not carry a
/// sweep grid.
pub fn sweep_summary_from_labels(
    histories: &[RunMetrics],
    labels: &[String],
) -> Option<SweepSummary> {
    let mut parsed = Vec::with_capacity(labels.len());
    for (h, label) in histories.iter().zip(labels) {
        let mut lambda = None;
        let mut ratio = None;
        for tok in label.split_whitespace() {
            if let Some(v) = tok.strip_prefix("lambda=") {
                lambda = Some(v.to_string());
            } else if let Some(v) = tok.strip_prefix("ratio=") {
                ratio = Some(v.to_string());
            }
        }
        parsed.push((lambda?, ratio?, h.last()?.acc_bc));
    }
    let mut row_labels: Vec<String> = Vec::new();
    let mut col_labels: Vec<String> = Vec::new();
    for (l, r, _) in &parsed {
        if !row_labels.contains(l) {
            row_labels.push(l.clone());
        }
        if !col_labels.contains(r) {
            col_labels.push(r.clone());
        }
    }
    let mut cells = vec![None; row_labels.len() * col_labels.len()];
    for (i, l) in row_labels.iter().enumerate() {
        for (j, r) in col_labels.iter().enumerate() {
            let vals: Vec<f64> = parsed
                .iter()
                .filter(|(pl, pr, _)| pl == l && pr == r)
                .map(|(_, _, v)| *v)
                .collect();
            if !vals.is_empty() {
                cells[i * col_labels.len() + j] =
                    Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
    }
    Some(SweepSummary {
        row_axis: "lambda_c".to_string(),
        row_labels,
        col_prefix: "ratio_".to_string(),
        col_labels,
        cells,
    })
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes per-run metrics CSVs, the accuracy-vs-step line chart, the
/// grouped BA/BC/pooled bar chart, and (when labels carry a lambda/ratio
/// grid) the sweep summary table.
pub fn emit_report(histories: &[RunMetrics], labels: &[String], out_dir: &Path) -> Result<()> {
    if histories.is_empty() {
        return Err(Error::Config("emit_report needs at least one run".into()));
    }
    if histories.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} histories but {} labels",
            histories.len(),
            labels.len()
        )));
    }
    fs::create_dir_all(out_dir)?;
    for (h, label) in histories.iter().zip(labels) {
        write_metrics_csv(h, &out_dir.join(format!("metrics_{}.csv", sanitize(label))))?;
    }
    fs::write(
        out_dir.join("accuracy_vs_step.svg"),
        accuracy_line_chart(histories, labels),
    )?;
    fs::write(
        out_dir.join("group_accuracy.svg"),
        group_bar_chart(histories, labels),
    )?;
    if let Some(summary) = sweep_summary_from_labels(histories, labels) {
        fs::write(out_dir.join("sweep_summary.csv"), summary.to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, step: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            step,
            loss_b: 1.5,
            loss_d: 0.75,
            loss_constraint: 0.01,
            mean_w: 0.4,
            acc_unbiased: acc,
            acc_ba: acc + 0.05,
            acc_bc: acc - 0.05,
        }
    }

    #[test]
    fn fmt_g6_cases() {
        assert_eq!(fmt_g6(0.0), "0");
        assert_eq!(fmt_g6(1.0), "1");
        assert_eq!(fmt_g6(0.5), "0.5");
        assert_eq!(fmt_g6(2.302585093), "2.30259");
        assert_eq!(fmt_g6(1e-7), "1e-7");
        assert_eq!(fmt_g6(0.0001), "0.0001");
        assert_eq!(fmt_g6(123456789.0), "1.23457e8");
        assert_eq!(fmt_g6(-0.25), "-0.25");
        assert_eq!(fmt_g6(0.123456789), "0.123457");
    }

    #[test]
    fn metrics_csv_round_trip() {
        let m = RunMetrics {
            rows: vec![row(0, 10, 0.5), row(1, 20, 0.625)],
        };
        let csv = m.to_csv();
        assert!(csv.starts_with(METRICS_HEADER));
        assert!(!csv.contains('\r'));
        let back = RunMetrics::from_csv(&csv).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].step, 20);
        assert!((back.rows[1].acc_unbiased - 0.625).abs() < 1e-12);
    }

    #[test]
    fn metrics_csv_rejects_bad_header() {
        assert!(RunMetrics::from_csv("nope\n1,2,3").is_err());
    }

    #[test]
    fn line_chart_single_run_two_rows_one_polyline_two_points() {
        let m = RunMetrics {
            rows: vec![row(0, 1, 0.3), row(0, 2, 0.6)],
        };
        let svg = accuracy_line_chart(&[m], &["run".to_string()]);
        let polylines = svg.matches("<polyline").count();
        assert_eq!(polylines, 1);
        let points_attr = svg
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        assert_eq!(points_attr.split(' ').count(), 2);
    }

    #[test]
    fn charts_are_deterministic() {
        let m = RunMetrics {
            rows: vec![row(0, 1, 0.3), row(1, 2, 0.6)],
        };
        let labels = vec!["a".to_string()];
        assert_eq!(
            accuracy_line_chart(&[m.clone()], &labels),
            accuracy_line_chart(&[m.clone()], &labels)
        );
        assert_eq!(
            group_bar_chart(&[m.clone()], &labels),
            group_bar_chart(&[m], &labels)
        );
    }

    #[test]
    fn sweep_summary_shape_matches_grid() {
        let lambdas = ["1e-1", "1e-2", "1e-3", "1e-4", "1e-5", "1e-7", "1e-8"];
        let ratios = ["0.005", "0.01", "0.02", "0.05"];
        let mut histories = Vec::new();
        let mut labels = Vec::new();
        for l in &lambdas {
            for r in &ratios {
                histories.push(RunMetrics {
                    rows: vec![row(0, 1, 0.5)],
                });
                labels.push(format!("lambda={l} ratio={r} seed=7"));
            }
        }
        let summary = sweep_summary_from_labels(&histories, &labels).unwrap();
        let csv = summary.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 7);
        assert_eq!(lines[0].split(',').count(), 1 + 4);
        assert!(lines[0].starts_with("lambda_c,ratio_0.005"));
    }

    #[test]
    fn sweep_summary_averages_seeds_and_marks_gaps() {
        let histories = vec![
            RunMetrics { rows: vec![row(0, 1, 0.5)] },  // acc_bc 0.45
            RunMetrics { rows: vec![row(0, 1, 0.7)] },  // acc_bc 0.65
            RunMetrics { rows: vec![row(0, 1, 0.9)] },
        ];
        let labels = vec![
            "lambda=1e-1 ratio=0.01 seed=1".to_string(),
            "lambda=1e-1 ratio=0.01 seed=2".to_string(),
            "lambda=1e-2 ratio=0.05 seed=1".to_string(),
        ];
        let s = sweep_summary_from_labels(&histories, &labels).unwrap();
        assert_eq!(s.row_labels, vec!["1e-1", "1e-2"]);
        assert_eq!(s.col_labels, vec!["0.01", "0.05"]);
        assert!((s.cells[0].unwrap() - 0.55).abs() < 1e-12);
        assert!(s.cells[1].is_none()); // 1e-1 x 0.05 never ran
        assert!(s.to_csv().contains("FAIL"));
    }

    #[test]
    fn emit_report_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunMetrics {
            rows: vec![row(0, 1, 0.4), row(1, 2, 0.6)],
        };
        emit_report(
            &[m.clone(), m],
            &["lambda=1e-1 ratio=0.01".to_string(), "lambda=1e-2 ratio=0.01".to_string()],
            dir.path(),
        )
        .unwrap();
        for name in [
            "metrics_lambda_1e-1_ratio_0.01.csv",
            "accuracy_vs_step.svg",
            "group_accuracy.svg",
            "sweep_summary.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
    }
}
