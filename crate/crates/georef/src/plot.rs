//! Minimal SVG rendering for the two report figures: metric-vs-iteration
//! line charts and box plots of feature-distance distributions. Output is
//! self-contained SVG 1.1 with no external dependencies.

use thiserror::Error;

use crate::evalmetrics::{CctStats, DistSummary, MetricReport};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot: {0}")]
    Empty(String),
    #[error("non-finite value in series {series:?} at index {index}")]
    NonFinite { series: String, index: usize },
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named line on a chart; `values[i]` is plotted at x = i.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSeries {
    pub label: String,
    pub values: Vec<f64>,
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn check_finite(series: &LineSeries) -> Result<(), PlotError> {
    for (i, v) in series.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(PlotError::NonFinite {
                series: series.label.clone(),
                index: i,
            });
        }
    }
    Ok(())
}

/// Padded [lo, hi] covering all data; degenerate ranges are widened so the
/// mapping to pixels stays invertible.
fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-12 * hi.abs().max(1.0));
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn svg_open(out: &mut String, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        xml_escape(title)
    ));
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let x1 = MARGIN_L;
    let y1 = HEIGHT - MARGIN_B;
    let x2 = WIDTH - MARGIN_R;
    out.push_str(&format!(
        "<line x1=\"{x1:.1}\" y1=\"{y1:.1}\" x2=\"{x2:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{x1:.1}\" y1=\"{:.1}\" x2=\"{x1:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n",
        MARGIN_T
    ));
    out.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
        (x1 + x2) / 2.0,
        HEIGHT - 12.0,
        xml_escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        (MARGIN_T + y1) / 2.0,
        (MARGIN_T + y1) / 2.0,
        xml_escape(y_label)
    ));
}

fn y_ticks(out: &mut String, lo: f64, hi: f64) {
    let to_px = |v: f64| {
        HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * (HEIGHT - MARGIN_T - MARGIN_B)
    };
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = to_px(v);
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            MARGIN_L - 4.0,
            MARGIN_L
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>\n",
            MARGIN_L - 7.0,
            y + 4.0,
            v
        ));
    }
}

/// Render named series against integer x positions starting at `x0`.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[LineSeries],
    x0: usize,
) -> Result<String, PlotError> {
    if series.is_empty() || series.iter().all(|s| s.values.is_empty()) {
        return Err(PlotError::Empty("line chart needs at least one point".into()));
    }
    for s in series {
        check_finite(s)?;
    }
    let n = series.iter().map(|s| s.values.len()).max().unwrap();
    let (lo, hi) = y_range(series.iter().flat_map(|s| s.values.iter().copied()));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let to_x = |i: usize| MARGIN_L + if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 } * plot_w;
    let to_y = |v: f64| HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * plot_h;

    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, x_label, y_label);
    y_ticks(&mut out, lo, hi);
    for i in 0..n {
        let x = to_x(i);
        out.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 4.0
        ));
        out.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 17.0,
            x0 + i
        ));
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", to_x(i), to_y(*v)))
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for (i, v) in s.values.iter().enumerate() {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                to_x(i),
                to_y(*v)
            ));
        }
        let ly = MARGIN_T + 14.0 * si as f64;
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            WIDTH - MARGIN_R + 10.0,
            ly
        ));
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            WIDTH - MARGIN_R + 25.0,
            ly + 9.0,
            xml_escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Box-and-whisker chart of named distributions: whiskers at min/max, box
/// from q25 to q75, a median bar, and a dot at the mean.
pub fn box_plot(
    title: &str,
    y_label: &str,
    groups: &[(String, DistSummary)],
) -> Result<String, PlotError> {
    if groups.is_empty() {
        return Err(PlotError::Empty("box plot needs at least one group".into()));
    }
    for (label, s) in groups {
        for (i, v) in [s.min, s.q25, s.median, s.q75, s.max, s.mean].iter().enumerate() {
            if !v.is_finite() {
                return Err(PlotError::NonFinite {
                    series: label.clone(),
                    index: i,
                });
            }
        }
    }
    let (lo, hi) = y_range(groups.iter().flat_map(|(_, s)| [s.min, s.max]));
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let to_y = |v: f64| HEIGHT - MARGIN_B - (v - lo) / (hi - lo) * plot_h;
    let slot = plot_w / groups.len() as f64;
    let box_w = (slot * 0.4).min(60.0);

    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, "", y_label);
    y_ticks(&mut out, lo, hi);
    for (gi, (label, s)) in groups.iter().enumerate() {
        let cx = MARGIN_L + slot * (gi as f64 + 0.5);
        let color = PALETTE[gi % PALETTE.len()];
        out.push_str(&format!(
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            to_y(s.max),
            to_y(s.min)
        ));
        for v in [s.min, s.max] {
            out.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
                cx - box_w / 4.0,
                to_y(v),
                cx + box_w / 4.0,
                to_y(v)
            ));
        }
        out.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{box_w:.1}\" height=\"{:.1}\" \
             fill=\"{color}\" fill-opacity=\"0.35\" stroke=\"{color}\"/>\n",
            cx - box_w / 2.0,
            to_y(s.q75),
            (to_y(s.q25) - to_y(s.q75)).max(0.5)
        ));
        out.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            cx - box_w / 2.0,
            to_y(s.median),
            cx + box_w / 2.0,
            to_y(s.median)
        ));
        out.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
            to_y(s.mean)
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 17.0,
            xml_escape(label)
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Iteration curve of the headline mean metrics.
pub fn curve_chart(curve: &[MetricReport]) -> Result<String, PlotError> {
    let pick = |f: &dyn Fn(&MetricReport) -> f64| curve.iter().map(f).collect::<Vec<_>>();
    let series = vec![
        LineSeries {
            label: "5deg 2cm".into(),
            values: pick(&|r| r.mean.deg5_cm2),
        },
        LineSeries {
            label: "5deg 5cm".into(),
            values: pick(&|r| r.mean.deg5_cm5),
        },
        LineSeries {
            label: "10deg 2cm".into(),
            values: pick(&|r| r.mean.deg10_cm2),
        },
        LineSeries {
            label: "IoU75".into(),
            values: pick(&|r| r.mean.iou75),
        },
    ];
    line_chart(
        "Accuracy vs refinement iteration",
        "iteration",
        "fraction",
        &series,
        0,
    )
}

/// Before/after box plot of the cross-cloud feature distances.
pub fn cct_box_plot(stats: &CctStats) -> Result<String, PlotError> {
    box_plot(
        "Feature distance around mixing",
        "chamfer distance",
        &[
            ("before".to_string(), stats.summary_before),
            ("after".to_string(), stats.summary_after),
        ],
    )
}
