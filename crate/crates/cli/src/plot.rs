//! Deterministic SVG rendering of the CSV files the other commands write.

use std::fmt::Write as _;

use spnn::Error;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 130.0;
const MARGIN_Y: f64 = 40.0;
const TICKS: usize = 5;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Metrics,
    Raster,
    Voltage,
    Decoded,
}

impl PlotKind {
    fn from_header(header: &[&str]) -> Option<Self> {
        match header {
            ["epoch", "train_err", "test_err", "loss"] => Some(PlotKind::Metrics),
            ["layer", "neuron", "time_ms"] => Some(PlotKind::Raster),
            ["time_ms", "V_m_mV"] => Some(PlotKind::Voltage),
            ["time_ms", "predicted_class"] => Some(PlotKind::Decoded),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct Plot {
    pub kind: PlotKind,
    pub svg: String,
    pub rows: usize,
}

fn parse_error(line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Validation(format!("line {line}: {msg}"))
}

/// Parses one of the known CSV layouts. Errors carry 1-based line numbers.
fn parse(text: &str) -> Result<(PlotKind, Vec<Vec<f64>>), Error> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_error(1, e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let kind = PlotKind::from_header(&names).ok_or_else(|| parse_error(1, format!("unrecognized header {:?}", names.join(","))))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(record.len());
        for (field, name) in record.iter().zip(&names) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_error(line, format!("{name}: cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_error(line, format!("{name}: non-finite value")));
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok((kind, rows))
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
    line: bool,
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(series: &[Series]) -> Self {
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let widen = |lo: f64, hi: f64| {
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Axes {
            x: widen(x0, x1),
            y: widen(y0, y1),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_Y - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN_Y)
    }
}

fn render(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let axes = Axes::fit(series);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right) = (MARGIN_LEFT, WIDTH - MARGIN_RIGHT);
    let (top, bottom) = (MARGIN_Y, HEIGHT - MARGIN_Y);
    let _ = writeln!(
        s,
        r#"<path d="M{left:.2},{top:.2} L{left:.2},{bottom:.2} L{right:.2},{bottom:.2}" fill="none" stroke="black"/>"#
    );
    for k in 0..=TICKS {
        let f = k as f64 / TICKS as f64;
        let xv = axes.x.0 + f * (axes.x.1 - axes.x.0);
        let yv = axes.y.0 + f * (axes.y.1 - axes.y.0);
        let (x, y) = (axes.px(xv), axes.py(yv));
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, bottom + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(xv));
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, tick(yv));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if ser.line && ser.points.len() > 1 {
            let mut d = String::new();
            for (k, &(x, y)) in ser.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if k == 0 { "M" } else { "L" }, axes.px(x), axes.py(y));
            }
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end());
        }
        if !ser.line || ser.points.len() <= 40 {
            let r = if ser.line { 2.5 } else { 1.5 };
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}"/>"#, axes.px(x), axes.py(y));
            }
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            right + 12.0,
            ly - 9.0,
            right + 26.0,
            ly,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let t = format!("{v:.3}");
    let t = t.trim_end_matches('0').trim_end_matches('.');
    if t == "-0" { "0".into() } else { t.into() }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders CSV text. The same text always yields the same bytes.
pub fn plot_csv(text: &str) -> Result<Plot, Error> {
    let (kind, rows) = parse(text)?;
    let column = |i: usize, j: usize| -> Vec<(f64, f64)> { rows.iter().map(|r| (r[i], r[j])).collect() };
    let svg = match kind {
        PlotKind::Metrics => render(
            "Error rate per epoch",
            "epoch",
            "error rate",
            &[
                Series { label: "train".into(), points: column(0, 1), line: true },
                Series { label: "test".into(), points: column(0, 2), line: true },
            ],
        ),
        PlotKind::Raster => {
            // Stack layers bottom to top, one row per neuron.
            let n_layers = rows.iter().map(|r| r[0] as usize + 1).max().unwrap_or(0);
            let mut height = vec![0usize; n_layers];
            for r in &rows {
                let l = r[0] as usize;
                height[l] = height[l].max(r[1] as usize + 1);
            }
            let offsets: Vec<usize> = height
                .iter()
                .scan(0, |acc, h| {
                    let o = *acc;
                    *acc += h;
                    Some(o)
                })
                .collect();
            let series: Vec<Series> = (0..n_layers)
                .map(|l| Series {
                    label: format!("layer {l}"),
                    points: rows
                        .iter()
                        .filter(|r| r[0] as usize == l)
                        .map(|r| (r[2], (offsets[l] + r[1] as usize) as f64))
                        .collect(),
                    line: false,
                })
                .collect();
            render("Spike raster", "time (ms)", "neuron", &series)
        }
        PlotKind::Voltage => render(
            "Membrane potential",
            "time (ms)",
            "V_m (mV)",
            &[Series { label: "V_m".into(), points: column(0, 1), line: true }],
        ),
        PlotKind::Decoded => render(
            "Decoded class",
            "time (ms)",
            "class",
            &[Series { label: "class".into(), points: column(0, 1), line: false }],
        ),
    };
    Ok(Plot { kind, svg, rows: rows.len() })
}
