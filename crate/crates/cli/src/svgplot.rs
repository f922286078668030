//! Small hand-rolled SVG charts: loss curves as line plots and the ablation
//! table as a bar chart. No styling dependencies; the files open in any
//! browser or image viewer.

use std::fmt::Write as _;
use std::path::Path;

use adaseg_core::error::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

const WIDTH: f64 = 880.0;
const HEIGHT: f64 = 460.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Picks round tick positions covering [lo, hi].
fn ticks(lo: f64, hi: f64, want: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let span = hi - lo;
    let raw = span / want as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= want as f64 + 0.5)
        .unwrap_or(mag * 10.0);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// A line chart of one or more series over a shared integer x-axis.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let pad = (ymax - ymin) * 0.05;
    let (ymin, ymax) = (ymin - pad, ymax + pad);

    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - ymin) / (ymax - ymin) * ph;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        esc(title)
    );

    for t in ticks(ymin, ymax, 6) {
        let y = sy(t);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L + pw,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    for t in ticks(xmin, xmax, 8) {
        let x = sx(t);
        let _ = write!(
            svg,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#eee\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T,
            MARGIN_T + ph,
            MARGIN_T + ph + 18.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{pw:.1}\" height=\"{ph:.1}\" \
         fill=\"none\" stroke=\"#555\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        esc(x_label),
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        esc(y_label)
    );

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        // Thin dense traces so files stay small.
        let stride = (pts.len() / 1500).max(1);
        for (k, &(x, y)) in pts.iter().step_by(stride).enumerate() {
            if !x.is_finite() || !y.is_finite() {
                continue;
            }
            let _ = write!(d, "{}{:.1},{:.1} ", if k == 0 { "M" } else { "L" }, sx(x), sy(y));
        }
        let _ = write!(
            svg,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            d.trim_end()
        );
        let ly = MARGIN_T + 14.0 + i as f64 * 18.0;
        let _ = write!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{}</text>\n",
            MARGIN_L + pw + 10.0,
            MARGIN_L + pw + 34.0,
            MARGIN_L + pw + 40.0,
            ly + 4.0,
            esc(name)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

/// A vertical bar chart (values in percent).
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[(String, f64)]) -> Result<()> {
    let ymax = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1.0) * 1.1;
    let pw = WIDTH - MARGIN_L - 30.0;
    let ph = HEIGHT - MARGIN_T - MARGIN_B - 25.0;
    let n = bars.len().max(1) as f64;
    let slot = pw / n;
    let bw = slot * 0.62;
    let sy = |y: f64| MARGIN_T + ph - y / ymax * ph;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_L + pw / 2.0,
        esc(title)
    );
    for t in ticks(0.0, ymax, 6) {
        let y = sy(t);
        let _ = write!(
            svg,
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L + pw,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" \
         transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0,
        esc(y_label)
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN_L + i as f64 * slot + (slot - bw) / 2.0;
        let y = sy(*value);
        let color = PALETTE[i % PALETTE.len()];
        let cx = x + bw / 2.0;
        let lby = MARGIN_T + ph + 14.0;
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{color}\"/>\n\
             <text x=\"{cx:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>\n\
             <text x=\"{cx:.1}\" y=\"{lby:.1}\" font-size=\"10\" text-anchor=\"end\" \
             transform=\"rotate(-35 {cx:.1} {lby:.1})\">{}</text>\n",
            MARGIN_T + ph - y,
            y - 5.0,
            value,
            esc(label)
        );
    }
    let _ = write!(
        svg,
        "<line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#555\"/>\n",
        MARGIN_T + ph,
        MARGIN_L + pw,
        MARGIN_T + ph
    );
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
