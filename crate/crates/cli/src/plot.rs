//! Static charts: SVG written directly, PNG rasterized from the same SVG.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::PlotFormat;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const TITLE_H: f64 = 34.0;
const LEGEND_H: f64 = 26.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// A rendered SVG document and its size in pixels.
pub struct Chart {
    pub svg: String,
    pub width: f64,
    pub height: f64,
}

impl Chart {
    /// Places the charts top to bottom in one document.
    pub fn stack(parts: &[Chart]) -> Chart {
        let width = parts.iter().map(|c| c.width).fold(0.0, f64::max);
        let mut body = String::new();
        let mut y = 0.0;
        for c in parts {
            let _ = writeln!(
                body,
                r#"<svg x="0" y="{y:.0}" width="{:.0}" height="{:.0}">"#,
                c.width, c.height
            );
            // drop the inner XML root, keep its content
            let inner = c.svg.split_once('\n').map_or("", |(_, rest)| rest);
            let inner = inner.trim_end().strip_suffix("</svg>").unwrap_or(inner);
            body.push_str(inner);
            body.push_str("</svg>\n");
            y += c.height;
        }
        Chart {
            svg: format!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{y:.0}\" viewBox=\"0 0 {width:.0} {y:.0}\" font-family=\"DejaVu Sans, sans-serif\">\n{body}</svg>\n"
            ),
            width,
            height: y,
        }
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Plot `log10(y)`; nonpositive values are dropped.
    pub log_y: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rasterizing {path}: {detail}")]
    Raster { path: String, detail: String },
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * hi.abs().max(1.0) {
        let pad = 0.5 * hi.abs().max(1e-3);
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn draw_panel(svg: &mut String, panel: &Panel, labels: &[String], ox: f64, oy: f64) {
    let y_of = |y: f64| {
        if panel.log_y {
            (y > 0.0).then(|| y.log10())
        } else {
            Some(y)
        }
    };
    let series: Vec<Vec<(f64, f64)>> = panel
        .series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter_map(|&(x, y)| y_of(y).map(|y| (x, y)))
                .collect()
        })
        .collect();
    let (x0, x1) = range(series.iter().flatten().map(|p| p.0));
    let (y0, y1) = range(series.iter().flatten().map(|p| p.1));
    let pw = PANEL_W - MARGIN_L - MARGIN_R;
    let ph = PANEL_H - MARGIN_T - MARGIN_B;
    let (left, top) = (ox + MARGIN_L, oy + MARGIN_T);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        oy + 18.0,
        escape(&panel.title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"##,
            top,
            top + ph,
            top + ph + 14.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let label = if panel.log_y {
            format!("1e{}", fmt_tick(t))
        } else {
            fmt_tick(t)
        };
        let _ = writeln!(
            svg,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
            left + pw,
            left - 4.0,
            y + 3.5,
            label
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        top + ph + 30.0,
        escape(&panel.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate({:.1},{:.1}) rotate(-90)" font-size="11" text-anchor="middle">{}</text>"#,
        ox + 14.0,
        top + ph / 2.0,
        escape(&panel.y_label)
    );
    for (s, pts) in panel.series.iter().zip(&series) {
        if pts.is_empty() {
            continue;
        }
        let k = labels.iter().position(|l| *l == s.label).unwrap_or(0);
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.6" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            path.join(" ")
        );
    }
}

fn legend(svg: &mut String, labels: &[String], y: f64) {
    let mut x = 20.0;
    for (k, label) in labels.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<rect x="{x:.1}" y="{:.1}" width="14" height="4" fill="{c}"/><text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#,
            y - 4.0,
            x + 18.0,
            y + 1.0,
            escape(label)
        );
        x += 30.0 + 7.0 * label.len() as f64;
    }
}

fn document(width: f64, height: f64, title: &str, body: &str) -> Chart {
    let svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"DejaVu Sans, sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"22\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n{body}</svg>\n",
        width / 2.0,
        escape(title)
    );
    Chart { svg, width, height }
}

/// Grid of line panels sharing one legend; a label keeps its colour across panels.
pub fn line_chart(title: &str, panels: &[Panel], columns: usize) -> Chart {
    let columns = columns.max(1);
    let rows = panels.len().div_ceil(columns);
    let width = columns as f64 * PANEL_W;
    let height = TITLE_H + LEGEND_H + rows as f64 * PANEL_H;
    let mut body = String::new();
    let mut labels: Vec<String> = Vec::new();
    for s in panels.iter().flat_map(|p| &p.series) {
        if !labels.contains(&s.label) {
            labels.push(s.label.clone());
        }
    }
    legend(&mut body, &labels, TITLE_H + 10.0);
    for (i, p) in panels.iter().enumerate() {
        let ox = (i % columns) as f64 * PANEL_W;
        let oy = TITLE_H + LEGEND_H + (i / columns) as f64 * PANEL_H;
        draw_panel(&mut body, p, &labels, ox, oy);
    }
    document(width, height, title, &body)
}

/// One bar group per entry of `groups`, bars labelled by category.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    categories: &[String],
    groups: &[(String, Vec<f64>)],
) -> Chart {
    let width = (MARGIN_L + MARGIN_R + 110.0 * categories.len().max(1) as f64).max(PANEL_W);
    let height = TITLE_H + LEGEND_H + PANEL_H;
    let mut body = String::new();
    let labels: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
    legend(&mut body, &labels, TITLE_H + 10.0);
    let top = TITLE_H + LEGEND_H + MARGIN_T;
    let pw = width - MARGIN_L - MARGIN_R;
    let ph = PANEL_H - MARGIN_T - MARGIN_B;
    let hi = groups
        .iter()
        .flat_map(|g| g.1.iter().copied())
        .fold(0.0, f64::max);
    let hi = if hi > 0.0 { hi * 1.08 } else { 1.0 };
    let sy = |v: f64| top + ph - v / hi * ph;
    let _ = writeln!(
        body,
        r##"<rect x="{MARGIN_L:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    for t in ticks(0.0, hi) {
        let _ = writeln!(
            body,
            r##"<line x1="{MARGIN_L:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
            MARGIN_L + pw,
            MARGIN_L - 4.0,
            sy(t) + 3.5,
            fmt_tick(t),
            y = sy(t)
        );
    }
    let _ = writeln!(
        body,
        r#"<text transform="translate(14,{:.1}) rotate(-90)" font-size="11" text-anchor="middle">{}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    let slot = pw / categories.len().max(1) as f64;
    let bar = 0.8 * slot / groups.len().max(1) as f64;
    for (c, name) in categories.iter().enumerate() {
        let base = MARGIN_L + c as f64 * slot + 0.1 * slot;
        for (g, (_, values)) in groups.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(0.0).max(0.0);
            let _ = writeln!(
                body,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                base + g as f64 * bar,
                sy(v),
                bar * 0.95,
                top + ph - sy(v),
                PALETTE[g % PALETTE.len()]
            );
        }
        let _ = writeln!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            base + 0.4 * slot,
            top + ph + 16.0,
            escape(name)
        );
    }
    document(width, height, title, &body)
}

/// Writes `stem.svg` or `stem.png`; `None` for [`PlotFormat::None`].
pub fn save(chart: &Chart, stem: &Path, format: PlotFormat) -> Result<Option<PathBuf>, PlotError> {
    let path = match format {
        PlotFormat::None => return Ok(None),
        PlotFormat::Svg => stem.with_extension("svg"),
        PlotFormat::Png => stem.with_extension("png"),
    };
    let io = |source| PlotError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        PlotFormat::Svg => std::fs::write(&path, &chart.svg).map_err(io)?,
        PlotFormat::Png => {
            let raster = |detail: String| PlotError::Raster {
                path: path.display().to_string(),
                detail,
            };
            let mut opts = resvg::usvg::Options::default();
            opts.fontdb_mut().load_system_fonts();
            let tree = resvg::usvg::Tree::from_str(&chart.svg, &opts)
                .map_err(|e| raster(e.to_string()))?;
            let size = tree.size().to_int_size();
            let mut pixmap = resvg::tiny_skia::Pixmap::new(size.width(), size.height())
                .ok_or_else(|| raster("empty image".into()))?;
            resvg::render(
                &tree,
                resvg::tiny_skia::Transform::identity(),
                &mut pixmap.as_mut(),
            );
            let bytes = pixmap.encode_png().map_err(|e| raster(e.to_string()))?;
            std::fs::write(&path, bytes).map_err(io)?;
        }
        PlotFormat::None => unreachable!(),
    }
    Ok(Some(path))
}
