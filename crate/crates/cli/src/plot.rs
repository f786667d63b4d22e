//! Figures built from result files, rendered as self-contained SVG.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ail_core::workload::running_average;
use ail_core::Latching;

use crate::report::RunFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Response time of every query, log scale.
    F11a,
    /// Running average of response time, log scale.
    F11b,
    /// Total time against number of clients.
    F12a,
    /// Throughput against number of clients.
    F12b,
    /// Total time with and without latching, grouped by clients.
    F13,
    /// Total time against clients, one line per selectivity.
    F14,
    /// Per-query wait and crack time.
    F15,
}

impl Figure {
    pub const ALL: [Figure; 7] = [
        Figure::F11a,
        Figure::F11b,
        Figure::F12a,
        Figure::F12b,
        Figure::F13,
        Figure::F14,
        Figure::F15,
    ];
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Figure::F11a => "f11a",
            Figure::F11b => "f11b",
            Figure::F12a => "f12a",
            Figure::F12b => "f12b",
            Figure::F13 => "f13",
            Figure::F14 => "f14",
            Figure::F15 => "f15",
        })
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Figure::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| format!("unknown figure '{s}' (expected one of f11a f11b f12a f12b f13 f14 f15)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chart {
    Lines {
        title: String,
        x_label: String,
        y_label: String,
        log_y: bool,
        series: Vec<Series>,
    },
    /// `series[s].points[c].1` is the height of series `s` in category `c`.
    Bars {
        title: String,
        y_label: String,
        categories: Vec<String>,
        series: Vec<Series>,
    },
}

impl Chart {
    pub fn series(&self) -> &[Series] {
        match self {
            Chart::Lines { series, .. } | Chart::Bars { series, .. } => series,
        }
    }
}

const MS: f64 = 1e6;

fn per_query(run: &RunFile, label: String, f: impl Fn(&ail_core::QueryMetrics) -> f64) -> Series {
    Series {
        label,
        points: run
            .rows
            .iter()
            .enumerate()
            .map(|(i, m)| ((i + 1) as f64, f(m)))
            .collect(),
    }
}

/// One series per group of runs, x = clients.
fn by_clients(runs: &[RunFile], group: impl Fn(&RunFile) -> String, y: impl Fn(&RunFile) -> f64) -> Vec<Series> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in runs {
        groups
            .entry(group(r))
            .or_default()
            .push((r.meta.config.clients as f64, y(r)));
    }
    groups
        .into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points }
        })
        .collect()
}

fn total_secs(r: &RunFile) -> f64 {
    r.meta.elapsed_ns as f64 / 1e9
}

/// Builds `fig` from parsed runs. Also returns warnings about degenerate input.
pub fn figure(fig: Figure, runs: &[RunFile]) -> (Chart, Vec<String>) {
    let mut warnings = Vec::new();
    if runs.is_empty() {
        warnings.push("no input files; drawing axes only".to_string());
    }
    for r in runs.iter().filter(|r| r.rows.is_empty()) {
        warnings.push(format!("{} has no query rows", r.label()));
    }
    let lines = |title: &str, x: &str, y: &str, log_y: bool, series: Vec<Series>| Chart::Lines {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_y,
        series,
    };
    let chart = match fig {
        Figure::F11a => lines(
            "Response time per query",
            "query sequence",
            "response time (ms)",
            true,
            runs.iter()
                .map(|r| per_query(r, r.meta.config.method.to_string(), |m| m.response_ns as f64 / MS))
                .collect(),
        ),
        Figure::F11b => lines(
            "Running average response time",
            "query sequence",
            "average response time (ms)",
            true,
            runs.iter()
                .map(|r| Series {
                    label: r.meta.config.method.to_string(),
                    points: running_average(r.rows.iter().map(|m| m.response_ns))
                        .into_iter()
                        .enumerate()
                        .map(|(i, v)| ((i + 1) as f64, v / MS))
                        .collect(),
                })
                .collect(),
        ),
        Figure::F12a => lines(
            "Total time",
            "clients",
            "total time (s)",
            false,
            by_clients(runs, RunFile::label, total_secs),
        ),
        Figure::F12b => lines(
            "Throughput",
            "clients",
            "queries per second",
            false,
            by_clients(runs, RunFile::label, |r| r.meta.queries_per_second),
        ),
        Figure::F13 => {
            let mut clients: Vec<usize> = runs.iter().map(|r| r.meta.config.clients).collect();
            clients.sort_unstable();
            clients.dedup();
            let series = [("latching off", false), ("latching on", true)]
                .into_iter()
                .map(|(label, on)| Series {
                    label: label.into(),
                    points: clients
                        .iter()
                        .enumerate()
                        .map(|(i, &c)| {
                            let total = runs
                                .iter()
                                .find(|r| r.meta.config.clients == c && (r.meta.config.latching != Latching::None) == on)
                                .map_or(0.0, total_secs);
                            (i as f64, total)
                        })
                        .collect(),
                })
                .collect();
            Chart::Bars {
                title: "Concurrency control overhead".into(),
                y_label: "total time (s)".into(),
                categories: clients.iter().map(|c| format!("{c} client{}", if *c == 1 { "" } else { "s" })).collect(),
                series,
            }
        }
        Figure::F14 => lines(
            "Total time by selectivity",
            "clients",
            "total time (s)",
            false,
            by_clients(runs, |r| format!("{}% selectivity", r.meta.config.selectivity * 100.0), total_secs),
        ),
        Figure::F15 => {
            let prefix = |r: &RunFile, what: &str| {
                if runs.len() == 1 {
                    what.to_string()
                } else {
                    format!("{} {what}", r.label())
                }
            };
            lines(
                "Wait and crack time per query",
                "query sequence",
                "time (ms)",
                false,
                runs.iter()
                    .flat_map(|r| {
                        [
                            per_query(r, prefix(r, "wait"), |m| m.wait_ns as f64 / MS),
                            per_query(r, prefix(r, "crack"), |m| m.crack_ns as f64 / MS),
                        ]
                    })
                    .collect(),
            )
        }
    };
    (chart, warnings)
}

const W: f64 = 800.0;
const H: f64 = 500.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e5 || v.abs() < 1e-3 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// A linear or base-10 logarithmic axis mapping data to pixels.
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool, from: f64, to: f64, zero_based: bool) -> Self {
        let vals: Vec<f64> = values.filter(|v| v.is_finite() && (!log || *v > 0.0)).collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if vals.is_empty() {
            (lo, hi) = if log { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            lo = 10f64.powf(lo.log10().floor());
            hi = 10f64.powf(hi.log10().ceil());
            if hi <= lo {
                hi = lo * 10.0;
            }
        } else {
            if zero_based {
                lo = lo.min(0.0);
            }
            if hi <= lo {
                hi = lo + 1.0;
            }
            let step = nice_step(hi - lo);
            lo = (lo / step).floor() * step;
            hi = (hi / step).ceil() * step;
        }
        Self { lo, hi, log, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        let t = if self.log {
            let v = v.max(self.lo);
            (v.log10() - self.lo.log10()) / (self.hi.log10() - self.lo.log10())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        };
        self.from + t * (self.to - self.from)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.log10().round() as i32, self.hi.log10().round() as i32);
            (a..=b).map(|e| 10f64.powi(e)).collect()
        } else {
            let step = nice_step(self.hi - self.lo);
            let n = ((self.hi - self.lo) / step).round() as usize;
            (0..=n).map(|i| self.lo + i as f64 * step).collect()
        }
    }
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 15.0,
        esc(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text transform="translate(20 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        esc(y_label)
    );
    let _ = writeln!(
        out,
        r#"<rect class="plot-area" x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
}

fn y_ticks(out: &mut String, y: &Axis) {
    for t in y.ticks() {
        let py = y.map(t);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            py + 4.0,
            fmt_tick(t)
        );
    }
}

fn legend(out: &mut String, labels: impl Iterator<Item = String>) {
    for (i, label) in labels.enumerate() {
        let y = TOP + 14.0 + i as f64 * 16.0;
        let x = W - RIGHT - 200.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="4" fill="{}"/><text class="legend" x="{}" y="{}">{}</text>"#,
            y - 4.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            esc(&label)
        );
    }
}

pub fn render_svg(chart: &Chart) -> String {
    let mut out = String::new();
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    match chart {
        Chart::Lines {
            title,
            x_label,
            y_label,
            log_y,
            series,
        } => {
            frame(&mut out, title, x_label, y_label);
            let all = || series.iter().flat_map(|s| s.points.iter());
            let x = Axis::new(all().map(|p| p.0), false, x0, x1, false);
            let y = Axis::new(all().map(|p| p.1), *log_y, y0, y1, true);
            y_ticks(&mut out, &y);
            for t in x.ticks() {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    x.map(t),
                    y0 + 18.0,
                    fmt_tick(t)
                );
            }
            for (i, s) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .filter(|p| p.0.is_finite() && p.1.is_finite())
                    .map(|&(px, py)| format!("{:.1},{:.1}", x.map(px), y.map(py)))
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<polyline class="series" data-label="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    esc(&s.label),
                    pts.join(" ")
                );
                if s.points.len() <= 16 {
                    for &(px, py) in &s.points {
                        let _ = writeln!(
                            out,
                            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                            x.map(px),
                            y.map(py)
                        );
                    }
                }
            }
            legend(&mut out, series.iter().map(|s| s.label.clone()));
        }
        Chart::Bars {
            title,
            y_label,
            categories,
            series,
        } => {
            frame(&mut out, title, "", y_label);
            let y = Axis::new(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), false, y0, y1, true);
            y_ticks(&mut out, &y);
            let slot = (x1 - x0) / categories.len().max(1) as f64;
            let bar = slot * 0.8 / series.len().max(1) as f64;
            for (c, name) in categories.iter().enumerate() {
                let cx = x0 + slot * (c as f64 + 0.5);
                let _ = writeln!(
                    out,
                    r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#,
                    y0 + 18.0,
                    esc(name)
                );
                for (s, ser) in series.iter().enumerate() {
                    let v = ser.points.get(c).map_or(0.0, |p| p.1);
                    let top = y.map(v);
                    let _ = writeln!(
                        out,
                        r#"<rect class="bar" data-label="{}" x="{:.1}" y="{top:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                        esc(&ser.label),
                        x0 + slot * c as f64 + slot * 0.1 + bar * s as f64,
                        (y0 - top).max(0.0),
                        PALETTE[s % PALETTE.len()]
                    );
                }
            }
            legend(&mut out, series.iter().map(|s| s.label.clone()));
        }
    }
    out.push_str("</svg>\n");
    out
}
