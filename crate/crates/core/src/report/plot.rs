//! Static SVG charts. Output depends only on the input rows, so the same CSV
//! always produces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// Mean IE per layer, one series per (token role, kind).
    Trace,
    /// Mean relative difference per center layer, one series per partition.
    Knockout,
    /// Event rate per layer, one series per sublayer kind.
    Extraction,
    /// Mean relative differences of the context and patch objects per layer.
    PatchCurve,
    /// Stacked label counts per layer.
    PatchHistogram,
}

fn num(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: &[f64]) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    for &x in x_ticks {
        let px = num(f.px(x));
        let _ = writeln!(out, r#"<line x1="{px}" y1="{b}" x2="{px}" y2="{}" stroke="black"/>"#, b + 4.0);
        let _ = writeln!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, x);
    }
    for i in 0..=4 {
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let py = num(f.py(y));
        let _ = writeln!(out, r#"<line x1="{}" y1="{py}" x2="{l}" y2="{py}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(out, r#"<text x="{}" y="{py}" text-anchor="end" dy="4">{}</text>"#, l - 6.0, num(y));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 14.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 14.0, y + 9.0, escape(n));
    }
}

fn warning(out: &mut String, text: &str) {
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" text-anchor="middle" fill="#b00000">{}</text>"##,
        (LEFT + W - RIGHT) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(text)
    );
}

fn integer_ticks(x0: f64, x1: f64) -> Vec<f64> {
    if !(x1 >= x0) {
        return vec![];
    }
    (x0.ceil() as i64..=x1.floor() as i64).map(|x| x as f64).collect()
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    (lo, hi)
}

/// Line chart; an empty `series` (or all-empty series) draws bare axes with a warning.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let pts = || series.iter().flat_map(|s| s.points.iter());
    if pts().next().is_none() {
        let f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        axes(&mut out, &f, x_label, y_label, &[]);
        warning(&mut out, "no data");
        out.push_str("</svg>\n");
        return out;
    }
    let x0 = pts().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x1 = pts().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = y_range(pts().map(|p| p.1));
    let f = Frame { x0, x1, y0, y1 };
    axes(&mut out, &f, x_label, y_label, &integer_ticks(x0, x1));
    if y0 < 0.0 && y1 > 0.0 {
        let py = num(f.py(0.0));
        let _ = writeln!(out, r##"<line x1="{LEFT}" y1="{py}" x2="{}" y2="{py}" stroke="#999" stroke-dasharray="3 3"/>"##, W - RIGHT);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{} {}", if j == 0 { "M" } else { "L" }, num(f.px(x)), num(f.py(y))))
            .collect();
        let _ = writeln!(out, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{}" cy="{}" r="2.5" fill="{color}"/>"#, num(f.px(x)), num(f.py(y)));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Stacked bars: one bar per x value, one segment per category.
pub fn histogram_svg(title: &str, x_label: &str, categories: &[String], bars: &[(usize, Vec<usize>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let max = bars.iter().map(|(_, c)| c.iter().sum::<usize>()).max().unwrap_or(0);
    if bars.is_empty() || max == 0 {
        let f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        axes(&mut out, &f, x_label, "count", &[]);
        warning(&mut out, "no data");
        out.push_str("</svg>\n");
        return out;
    }
    let x0 = bars.iter().map(|b| b.0).min().unwrap_or(0) as f64 - 0.5;
    let x1 = bars.iter().map(|b| b.0).max().unwrap_or(0) as f64 + 0.5;
    let f = Frame { x0, x1, y0: 0.0, y1: max as f64 };
    axes(&mut out, &f, x_label, "count", &integer_ticks(x0, x1));
    let width = (f.px(1.0) - f.px(0.0)) * 0.7;
    for (x, counts) in bars {
        let mut acc = 0usize;
        for (i, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let top = f.py((acc + c) as f64);
            let bottom = f.py(acc as f64);
            let _ = writeln!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}"/>"#,
                num(f.px(*x as f64) - width / 2.0),
                num(top),
                num(width),
                num(bottom - top),
                PALETTE[i % PALETTE.len()]
            );
            acc += c;
        }
    }
    legend(&mut out, categories);
    out.push_str("</svg>\n");
    out
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { file: path.display().to_string(), header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema { column: name.into(), file: self.file.clone() })
    }

    fn num(&self, row: &csv::StringRecord, col: usize) -> Result<f64> {
        let raw = row.get(col).unwrap_or("");
        raw.parse().map_err(|_| Error::Schema { column: self.header[col].clone(), file: self.file.clone() })
    }
}

/// Mean of `y` per (series key, x), with series in first-seen order.
fn grouped(t: &Table, key: &[usize], x: usize, y: usize) -> Result<Vec<Series>> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(usize, i64), (f64, usize)> = BTreeMap::new();
    for row in &t.rows {
        let name = key.iter().map(|&k| row.get(k).unwrap_or("")).collect::<Vec<_>>().join("/");
        let idx = match order.iter().position(|n| *n == name) {
            Some(i) => i,
            None => {
                order.push(name);
                order.len() - 1
            }
        };
        let xv = t.num(row, x)?;
        let e = acc.entry((idx, xv as i64)).or_insert((0.0, 0));
        e.0 += t.num(row, y)?;
        e.1 += 1;
    }
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, name)| Series {
            name,
            points: acc.range((i, i64::MIN)..=(i, i64::MAX)).map(|(&(_, x), &(s, n))| (x as f64, s / n as f64)).collect(),
        })
        .collect())
}

const HIST_LABELS: [&str; 7] =
    ["context_obj", "patch_obj", "patch_lang_ctx_obj", "ctx_lang_patch_obj", "cross_rp_sc", "cross_rc_sp", "other"];

/// Renders one CSV into one SVG file. Missing columns are reported by name.
pub fn emit_plot(kind: PlotKind, csv_path: &Path, out: &Path, title: &str) -> Result<()> {
    let t = Table::read(csv_path)?;
    let svg = match kind {
        PlotKind::Trace => {
            let s = grouped(&t, &[t.col("token_role")?, t.col("kind")?], t.col("layer")?, t.col("ie_mean")?)?;
            line_chart_svg(title, "layer", "mean indirect effect", &s)
        }
        PlotKind::Knockout => {
            let s = grouped(&t, &[t.col("partition")?], t.col("center_layer")?, t.col("mean_rel_diff")?)?;
            line_chart_svg(title, "center layer", "relative difference", &s)
        }
        PlotKind::Extraction => {
            let s = grouped(&t, &[t.col("kind")?], t.col("layer")?, t.col("rate")?)?;
            line_chart_svg(title, "layer", "extraction rate", &s)
        }
        PlotKind::PatchCurve => {
            let (c, l) = (t.col("condition")?, t.col("layer")?);
            let mut s = grouped(&t, &[c], l, t.col("mean_rel_ctx")?)?;
            let p = grouped(&t, &[c], l, t.col("mean_rel_patch")?)?;
            for x in &mut s {
                x.name = format!("context object ({})", x.name);
            }
            s.extend(p.into_iter().map(|x| Series { name: format!("patch object ({})", x.name), ..x }));
            line_chart_svg(title, "layer", "relative difference", &s)
        }
        PlotKind::PatchHistogram => {
            let layer = t.col("layer")?;
            let cols = HIST_LABELS.iter().map(|c| t.col(c)).collect::<Result<Vec<_>>>()?;
            let mut bars: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for row in &t.rows {
                let l = t.num(row, layer)? as usize;
                let entry = bars.entry(l).or_insert_with(|| vec![0; cols.len()]);
                for (slot, &c) in entry.iter_mut().zip(&cols) {
                    *slot += t.num(row, c)? as usize;
                }
            }
            let cats: Vec<String> = HIST_LABELS.iter().map(|s| s.to_string()).collect();
            histogram_svg(title, "layer", &cats, &bars.into_iter().collect::<Vec<_>>())
        }
    };
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, svg)?;
    Ok(())
}
