//! Deterministic SVG plots. Every byte is a pure function of the input
//! series, so regenerating from the same CSV reproduces the file exactly.
//!
//! Plotting consumes persisted CSV tables, never live experiment state.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::record::write_atomic;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// One labeled polyline or point cloud.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Lines,
    Points,
}

pub struct PlotSpec<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub style: Style,
    /// Draw the y = x guide (eigenvalue-vs-target scatters).
    pub identity_line: bool,
}

impl Default for PlotSpec<'_> {
    fn default() -> Self {
        Self {
            title: "",
            x_label: "",
            y_label: "",
            x_scale: Scale::Linear,
            y_scale: Scale::Linear,
            style: Style::Lines,
            identity_line: false,
        }
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    scale: Scale,
}

impl Axis {
    fn from_values(values: impl Iterator<Item = f64>, scale: Scale) -> Result<Self> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if !v.is_finite() {
                continue;
            }
            if scale == Scale::Log && v <= 0.0 {
                continue;
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            bail!("no plottable values for axis");
        }
        if lo == hi {
            // Widen degenerate ranges deterministically.
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
            if scale == Scale::Log {
                lo = lo.max(hi / 10.0);
            }
        }
        Ok(Self { lo, hi, scale })
    }

    fn transform(&self, v: f64) -> f64 {
        match self.scale {
            Scale::Linear => (v - self.lo) / (self.hi - self.lo),
            Scale::Log => (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln()),
        }
    }

    fn ticks(&self) -> Vec<f64> {
        match self.scale {
            Scale::Linear => {
                let span = self.hi - self.lo;
                let raw = span / 4.0;
                let mag = 10f64.powf(raw.log10().floor());
                let step = [1.0, 2.0, 5.0, 10.0]
                    .iter()
                    .map(|m| m * mag)
                    .find(|s| span / s <= 5.0)
                    .unwrap_or(mag * 10.0);
                let start = (self.lo / step).ceil() * step;
                let mut out = Vec::new();
                let mut t = start;
                while t <= self.hi + step * 1e-9 {
                    out.push(t);
                    t += step;
                }
                out
            }
            Scale::Log => {
                let lo_dec = self.lo.log10().floor() as i32;
                let hi_dec = self.hi.log10().ceil() as i32;
                (lo_dec..=hi_dec)
                    .map(|d| 10f64.powi(d))
                    .filter(|t| *t >= self.lo * 0.999 && *t <= self.hi * 1.001)
                    .collect()
            }
        }
    }
}

/// Renders series into an SVG file. Errors when every series is empty.
pub fn render(path: &Path, spec: &PlotSpec, series: &[Series]) -> Result<()> {
    let total_points: usize = series.iter().map(|s| s.points.len()).sum();
    if series.is_empty() || total_points == 0 {
        bail!("nothing to plot: empty metric table");
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let x_axis = Axis::from_values(xs, spec.x_scale).context("x axis")?;
    let y_axis = Axis::from_values(ys, spec.y_scale).context("y axis")?;

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + x_axis.transform(x) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - y_axis.transform(y)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        xml_escape(spec.title)
    );

    // Frame.
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="black" stroke-width="1"/>"#
    );

    // Ticks and grid.
    for t in x_axis.ticks() {
        let x = px(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{:.1}" x2="{x:.2}" y2="{:.1}" stroke="#dddddd" stroke-width="0.5"/>"##,
            MARGIN_T,
            MARGIN_T + plot_h
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.2}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            MARGIN_T + plot_h + 16.0,
            fmt_num(t)
        );
    }
    for t in y_axis.ticks() {
        let y = py(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="#dddddd" stroke-width="0.5"/>"##,
            MARGIN_L,
            MARGIN_L + plot_w
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{y:.2}" font-family="sans-serif" font-size="11" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            MARGIN_L - 6.0,
            fmt_num(t)
        );
    }

    // Axis labels.
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 14.0,
        xml_escape(spec.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        xml_escape(spec.y_label)
    );

    if spec.identity_line {
        let lo = x_axis.lo.max(y_axis.lo);
        let hi = x_axis.hi.min(y_axis.hi);
        if hi > lo {
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#999999" stroke-width="1" stroke-dasharray="5,4"/>"##,
                px(lo),
                py(lo),
                px(hi),
                py(hi)
            );
        }
    }

    // Series.
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let visible: Vec<(f64, f64)> = s
            .points
            .iter()
            .copied()
            .filter(|(x, y)| {
                x.is_finite()
                    && y.is_finite()
                    && (spec.x_scale == Scale::Linear || *x > 0.0)
                    && (spec.y_scale == Scale::Linear || *y > 0.0)
            })
            .collect();
        match spec.style {
            Style::Lines => {
                let pts: Vec<String> = visible
                    .iter()
                    .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
                    .collect();
                if !pts.is_empty() {
                    let _ = writeln!(
                        svg,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                        pts.join(" ")
                    );
                }
            }
            Style::Points => {
                for (x, y) in &visible {
                    let _ = writeln!(
                        svg,
                        r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" fill="{color}" fill-opacity="0.75"/>"#,
                        px(*x),
                        py(*y)
                    );
                }
            }
        }
        // Legend.
        let ly = MARGIN_T + 14.0 + 18.0 * k as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" dominant-baseline="middle">{}</text>"#,
            lx + 24.0,
            ly,
            xml_escape(&s.label)
        );
    }

    let _ = writeln!(svg, "</svg>");
    write_atomic(path, svg.as_bytes())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Loads `(x, y)` series from a CSV file, grouped by the values of
/// `group_cols` (joined with `/`), filtered so that `filter_col == value`
/// when given. Rows whose fields fail to parse as floats are skipped.
pub fn series_from_csv(
    path: &Path,
    x_col: &str,
    y_col: &str,
    group_cols: &[&str],
    filter: Option<(&str, &str)>,
) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .with_context(|| format!("column '{name}' not in {}", path.display()))
    };
    let xi = idx(x_col)?;
    let yi = idx(y_col)?;
    let gis: Vec<usize> = group_cols.iter().map(|c| idx(c)).collect::<Result<_>>()?;
    let fi = filter.map(|(c, _)| idx(c)).transpose()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::BTreeMap<String, Series> = Default::default();
    for row in reader.records() {
        let row = row?;
        if let (Some(fidx), Some((_, want))) = (fi, filter) {
            if &row[fidx] != want {
                continue;
            }
        }
        let (Ok(x), Ok(y)) = (row[xi].parse::<f64>(), row[yi].parse::<f64>()) else {
            continue;
        };
        let key = if gis.is_empty() {
            y_col.to_string()
        } else {
            gis.iter().map(|&g| row[g].to_string()).collect::<Vec<_>>().join("/")
        };
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key.clone()).or_insert_with(|| Series::new(key)).points.push((x, y));
    }
    Ok(order.into_iter().map(|k| groups.remove(&k).unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_series_is_an_error_and_writes_nothing() {
        let dir = std::env::temp_dir().join(format!("fls-plot-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.svg");
        let err = render(&path, &PlotSpec::default(), &[]);
        assert!(err.is_err());
        assert!(!path.exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn two_series_produce_two_polylines_and_legend() {
        let dir = std::env::temp_dir().join(format!("fls-plot2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("two.svg");
        let series = vec![
            Series {
                label: "a".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
            },
            Series {
                label: "b".into(),
                points: vec![(0.0, 2.0), (1.0, 1.0)],
            },
        ];
        render(&path, &PlotSpec::default(), &series).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches("<polyline").count(), 2);
        assert!(text.contains(">a</text>"));
        assert!(text.contains(">b</text>"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let dir = std::env::temp_dir().join(format!("fls-plot3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let series = vec![Series {
            label: "m".into(),
            points: (0..50).map(|i| (i as f64, (i as f64 * 0.37).sin())).collect(),
        }];
        let spec = PlotSpec {
            title: "t",
            ..Default::default()
        };
        let p1 = dir.join("a.svg");
        let p2 = dir.join("b.svg");
        render(&p1, &spec, &series).unwrap();
        render(&p2, &spec, &series).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn csv_series_loader_groups_rows() {
        let dir = std::env::temp_dir().join(format!("fls-plot4-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let csv_path = dir.join("m.csv");
        std::fs::write(
            &csv_path,
            "method,step,value\nx,0,1.0\nx,1,2.0\ny,0,3.0\n",
        )
        .unwrap();
        let series = series_from_csv(&csv_path, "step", "value", &["method"], None).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].label, "x");
        assert_eq!(series[0].points, vec![(0.0, 1.0), (1.0, 2.0)]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
