//! Self-contained SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::{EvalMode, EvalScores, StepRecord, SyntheticSample};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Data range widened by 5% of its span on each side.
///
/// A zero span is widened by 5% of the magnitude, or by 0.05 at zero.
pub fn padded_range(min: f64, max: f64) -> (f64, f64) {
    let span = max - min;
    let pad = if span > 0.0 {
        0.05 * span
    } else if min != 0.0 {
        0.05 * min.abs()
    } else {
        0.05
    };
    (min - pad, max + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".into() } else { s.to_string() }
    }
}

fn header(out: &mut String, title: &str, run_id: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12" data-run-id="{}">"#,
        escape(run_id)
    );
    let _ = writeln!(out, "<title>{} ({})</title>", escape(title), escape(run_id));
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), x_label: &str, y_label: &str, x_ticks: bool) {
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = writeln!(
        out,
        r#"<rect class="frame" x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=TICKS {
        let t = i as f64 / TICKS as f64;
        let y = TOP + ph * (1.0 - t);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            tick_label(y0 + t * (y1 - y0))
        );
        if x_ticks {
            let x = LEFT + pw * t;
            let _ = writeln!(
                out,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                TOP + ph + 16.0,
                tick_label(x0 + t * (x1 - x0))
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, labels: &[&str]) {
    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 14.0;
        let _ = writeln!(
            out,
            r#"<g class="legend-entry"><rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text></g>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(l)
        );
    }
    let _ = writeln!(out, "</g>");
}

/// One polyline per series, axes padded 5% around the data.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], run_id: &str) -> Result<String> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::invalid("line chart needs at least one point"));
    }
    if all.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Numeric(format!("non-finite point in chart '{title}'")));
    }
    let min_max = |f: fn(&(f64, f64)) -> f64| {
        all.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (xr, yr) = (min_max(|p| p.0), min_max(|p| p.1));
    let (x0, x1) = padded_range(xr.0, xr.1);
    let (y0, y1) = padded_range(yr.0, yr.1);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);

    let mut out = String::new();
    header(&mut out, title, run_id);
    axes(&mut out, (x0, x1), (y0, y1), x_label, y_label, true);
    let _ = writeln!(
        out,
        r#"<g class="plot-area" data-x-min="{x0}" data-x-max="{x1}" data-y-min="{y0}" data-y-max="{y1}">"#
    );
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let px = LEFT + pw * (x - x0) / (x1 - x0);
                let py = TOP + ph * (1.0 - (y - y0) / (y1 - y0));
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.label),
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let _ = writeln!(out, "</g>");
    legend(&mut out, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars: one group per category, one bar per entry of `bar_labels`.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    bar_labels: &[&str],
    groups: &[(String, Vec<f64>)],
    run_id: &str,
) -> Result<String> {
    if groups.is_empty() || bar_labels.is_empty() {
        return Err(Error::invalid("bar chart needs at least one group and one bar"));
    }
    if groups.iter().any(|(_, v)| v.len() != bar_labels.len()) {
        return Err(Error::shape("every bar group needs one value per bar label"));
    }
    if groups.iter().flat_map(|(_, v)| v).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value in chart '{title}'")));
    }
    let max = groups.iter().flat_map(|(_, v)| v.iter().copied()).fold(0.0, f64::max);
    let (y0, y1) = (0.0, padded_range(0.0, max).1);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let slot = pw / groups.len() as f64;
    let bar_w = 0.8 * slot / bar_labels.len() as f64;

    let mut out = String::new();
    header(&mut out, title, run_id);
    axes(&mut out, (0.0, 1.0), (y0, y1), "", y_label, false);
    let _ = writeln!(out, r#"<g class="plot-area" data-y-min="{y0}" data-y-max="{y1}">"#);
    for (g, (name, values)) in groups.iter().enumerate() {
        let gx = LEFT + slot * g as f64 + 0.1 * slot;
        for (b, &v) in values.iter().enumerate() {
            let h = ph * (v - y0) / (y1 - y0);
            let _ = writeln!(
                out,
                r#"<rect class="bar" data-group="{}" data-bar="{}" data-value="{v}" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                escape(name),
                escape(bar_labels[b]),
                gx + bar_w * b as f64,
                TOP + ph - h,
                bar_w,
                h,
                PALETTE[b % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"#,
            LEFT + slot * (g as f64 + 0.5),
            TOP + ph + 16.0,
            escape(name)
        );
    }
    let _ = writeln!(out, "</g>");
    legend(&mut out, bar_labels);
    out.push_str("</svg>\n");
    Ok(out)
}

/// One curve (and optionally its evaluation) to draw.
#[derive(Clone, Debug)]
pub struct Trace {
    pub label: String,
    pub records: Vec<StepRecord>,
    pub eval: Option<EvalScores>,
}

#[derive(Clone, Debug)]
pub struct PlotReport {
    pub run_id: String,
    /// Trailing window of the bias curve.
    pub window: usize,
    pub traces: Vec<Trace>,
}

/// Trailing mean of `|grad_a - grad_b|` over up to `window` steps, one point per record.
pub fn rolling_bias(records: &[StepRecord], window: usize) -> Vec<(f64, f64)> {
    let w = window.max(1);
    let diffs: Vec<f64> = records.iter().map(|r| (r.grad_a - r.grad_b).abs()).collect();
    let mut sum = 0.0;
    diffs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            sum += d;
            if i >= w {
                sum -= diffs[i - w];
            }
            (records[i].step as f64, sum / (i + 1).min(w) as f64)
        })
        .collect()
}

/// Writes `<prefix>gradient_bias.svg`, `<prefix>grad_contrib.svg` and
/// `<prefix>eval_scores.svg`, skipping charts without data.
pub fn render_plots(report: &PlotReport, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let with_records: Vec<&Trace> = report.traces.iter().filter(|t| !t.records.is_empty()).collect();
    let with_eval: Vec<&Trace> = report.traces.iter().filter(|t| t.eval.is_some()).collect();
    if with_records.is_empty() && with_eval.is_empty() {
        return Err(Error::invalid("report has nothing to plot"));
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let path = dir.join(format!("{prefix}{name}"));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    if !with_records.is_empty() {
        let bias: Vec<Series> = with_records
            .iter()
            .map(|t| Series {
                label: t.label.clone(),
                points: rolling_bias(&t.records, report.window),
            })
            .collect();
        emit(
            "gradient_bias.svg",
            line_chart("Gradient bias", "step", "|grad_a - grad_b| (trailing mean)", &bias, &report.run_id)?,
        )?;
        let mut contrib = Vec::new();
        for t in &with_records {
            for (branch, f) in [("A", (|r: &StepRecord| r.grad_a) as fn(&StepRecord) -> f64), ("B", |r| r.grad_b)] {
                let label = if with_records.len() == 1 {
                    format!("branch {branch}")
                } else {
                    format!("{} {branch}", t.label)
                };
                contrib.push(Series {
                    label,
                    points: t.records.iter().map(|r| (r.step as f64, f(r))).collect(),
                });
            }
        }
        emit(
            "grad_contrib.svg",
            line_chart("Gradient contribution", "step", "encoder gradient norm", &contrib, &report.run_id)?,
        )?;
    }
    if !with_eval.is_empty() {
        let modes: Vec<&str> = EvalMode::ALL.iter().map(|m| m.as_str()).collect();
        let groups: Vec<(String, Vec<f64>)> = with_eval
            .iter()
            .map(|t| {
                let e = t.eval.expect("filtered");
                (t.label.clone(), EvalMode::ALL.iter().map(|&m| e.get(m)).collect())
            })
            .collect();
        emit(
            "eval_scores.svg",
            bar_chart("Restricted evaluation", "soft-IoU", &modes, &groups, &report.run_id)?,
        )?;
    }
    Ok(written)
}

pub const PREVIEW_FILE: &str = "samples_preview.svg";
const PREVIEW_ROWS: usize = 4;
const CELL: f64 = 12.0;

/// Grayscale grid of the first few samples: modality A, modality B, ground truth.
pub fn sample_preview(samples: &[SyntheticSample], run_id: &str) -> Result<String> {
    let shown = &samples[..samples.len().min(PREVIEW_ROWS)];
    let first = shown.first().ok_or_else(|| Error::invalid("no samples to preview"))?;
    let (h, w) = (first.gt.height(), first.gt.width());
    let (panel_w, panel_h) = (w as f64 * CELL + 20.0, h as f64 * CELL + 20.0);
    let (total_w, total_h) = (3.0 * panel_w + 20.0, shown.len() as f64 * panel_h + 40.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" font-family="sans-serif" font-size="12" data-run-id="{}">"#,
        escape(run_id)
    );
    let _ = writeln!(out, "<title>Synthetic samples ({})</title>", escape(run_id));
    for (c, name) in ["modality A", "modality B", "ground truth"].iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{:.1}" y="20">{name}</text>"#, 10.0 + c as f64 * panel_w);
    }
    for (r, s) in shown.iter().enumerate() {
        if s.gt.height() != h || s.gt.width() != w {
            return Err(Error::shape("preview samples must share one size"));
        }
        for (c, data) in [s.mod_a.data(), s.mod_b.data(), s.gt.data()].iter().enumerate() {
            let (ox, oy) = (10.0 + c as f64 * panel_w, 30.0 + r as f64 * panel_h);
            for (i, v) in data.iter().enumerate() {
                let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="rgb({g},{g},{g})"/>"#,
                    ox + (i % w) as f64 * CELL,
                    oy + (i / w) as f64 * CELL
                );
            }
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(svg: &str, name: &str) -> f64 {
        let key = format!("{name}=\"");
        let start = svg.find(&key).unwrap() + key.len();
        let end = start + svg[start..].find('"').unwrap();
        svg[start..end].parse().unwrap()
    }

    fn rec(step: usize, a: f64, b: f64) -> StepRecord {
        StepRecord {
            step,
            task_loss: 0.0,
            distill_loss: 0.0,
            grad_a: a,
            grad_b: b,
            s_a: 0.5,
            s_b: 0.5,
            entropy_a: 0.0,
            entropy_b: 0.0,
        }
    }

    #[test]
    fn padding_examples() {
        assert_eq!(padded_range(0.0, 10.0), (-0.5, 10.5));
        assert_eq!(padded_range(2.0, 2.0), (1.9, 2.1));
        assert_eq!(padded_range(0.0, 0.0), (-0.05, 0.05));
    }

    #[test]
    fn axis_bounds_on_fixture() {
        let s = Series {
            label: "x".into(),
            points: vec![(0.0, 1.0), (10.0, 3.0), (20.0, 2.0)],
        };
        let svg = line_chart("t", "x", "y", &[s], "rid").unwrap();
        // x in [0, 20] -> pad 1; y in [1, 3] -> pad 0.1.
        assert_eq!(attr(&svg, "data-x-min"), -1.0);
        assert_eq!(attr(&svg, "data-x-max"), 21.0);
        assert!((attr(&svg, "data-y-min") - 0.9).abs() < 1e-12);
        assert!((attr(&svg, "data-y-max") - 3.1).abs() < 1e-12);
        assert!(svg.contains("rid"));
    }

    #[test]
    fn single_series_vertex_count() {
        let records: Vec<_> = (0..37).map(|i| rec(i, i as f64, 1.0)).collect();
        let s = Series {
            label: "uniform".into(),
            points: rolling_bias(&records, 10),
        };
        let svg = line_chart("t", "x", "y", &[s], "rid").unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        let start = svg.find("points=\"").unwrap() + 8;
        let end = start + svg[start..].find('"').unwrap();
        assert_eq!(svg[start..end].split(' ').count(), 37);
    }

    #[test]
    fn two_strategies_two_legend_entries() {
        let mk = |l: &str| Series {
            label: l.into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        };
        let svg = line_chart("t", "x", "y", &[mk("inverse"), mk("forward")], "rid").unwrap();
        assert_eq!(svg.matches("class=\"legend-entry\"").count(), 2);
    }

    #[test]
    fn labels_are_escaped() {
        let s = Series {
            label: "a<b&c".into(),
            points: vec![(0.0, 0.0)],
        };
        let svg = line_chart("t", "x", "y", &[s], "rid").unwrap();
        assert!(svg.contains("a&lt;b&amp;c"));
    }

    #[test]
    fn rolling_bias_oracle() {
        let r = vec![rec(0, 1.0, 0.0), rec(1, 3.0, 0.0), rec(2, 0.0, 5.0)];
        assert_eq!(rolling_bias(&r, 2), vec![(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)]);
    }

    #[test]
    fn empty_report_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty = PlotReport {
            run_id: "r".into(),
            window: 10,
            traces: vec![],
        };
        assert!(matches!(render_plots(&empty, dir.path(), ""), Err(Error::InvalidArgument(_))));
        assert!(line_chart("t", "x", "y", &[], "r").is_err());
        assert!(bar_chart("t", "y", &["a"], &[], "r").is_err());
    }

    #[test]
    fn render_writes_three_charts() {
        let dir = tempfile::tempdir().unwrap();
        let report = PlotReport {
            run_id: "r".into(),
            window: 5,
            traces: vec![Trace {
                label: "run".into(),
                records: (0..20).map(|i| rec(i, 1.0, 0.5)).collect(),
                eval: Some(EvalScores {
                    both: 0.9,
                    a_only: 0.8,
                    b_only: 0.1,
                }),
            }],
        };
        let files = render_plots(&report, dir.path(), "p_").unwrap();
        assert_eq!(files.len(), 3);
        let bars = fs::read_to_string(dir.path().join("p_eval_scores.svg")).unwrap();
        assert_eq!(bars.matches("class=\"bar\"").count(), 3);
        assert!(bars.ends_with("</svg>\n"));
    }

    #[test]
    fn preview_has_one_rect_per_pixel() {
        use crate::sim::{gen_sample, GeneratorConfig};
        let cfg = GeneratorConfig::a_dominant();
        let samples: Vec<_> = (0..6).map(|i| gen_sample(&cfg, i).unwrap()).collect();
        let svg = sample_preview(&samples, "r").unwrap();
        assert_eq!(svg.matches("<rect").count(), PREVIEW_ROWS * 3 * cfg.height * cfg.width);
        assert!(sample_preview(&[], "r").is_err());
    }

    #[test]
    fn eval_only_report_renders_bars() {
        let dir = tempfile::tempdir().unwrap();
        let report = PlotReport {
            run_id: "r".into(),
            window: 5,
            traces: vec![Trace {
                label: "run".into(),
                records: vec![],
                eval: Some(EvalScores::default()),
            }],
        };
        assert_eq!(render_plots(&report, dir.path(), "").unwrap().len(), 1);
    }
}
