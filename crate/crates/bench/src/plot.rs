//! Self-contained SVG figures and plain-text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use shiftbench_core::autodiff::Tensor;
use shiftbench_core::domains::DomainDataset;
use shiftbench_core::models::{ModelBundle, ModelError};
use thiserror::Error;

use crate::records::{final_summary, ExperimentRecord, SeedKey};

/// Cells per axis of the decision-region raster.
pub const BOUNDARY_GRID: usize = 200;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2", "#eeca3b", "#9d755d"];
const REGION: [&str; 8] = ["#c6d7ea", "#fcd9b6", "#cbe5c7", "#f5c6c6", "#d4ebe9", "#e6d3e2", "#f8edc0", "#e0d2c6"];

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot: {0}")]
    Empty(String),
    #[error("boundary plots need 1-D or 2-D inputs, got {0}")]
    InputDim(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }

    fn axes(&self, s: &mut String, x_label: &str, y_label: &str) {
        let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
        let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#333"/>"##, r - l, b - t);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = self.x0 + f * (self.x1 - self.x0);
            let yv = self.y0 + f * (self.y1 - self.y0);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, self.px(xv), b + 16.0, tick(xv));
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, self.py(yv) + 4.0, tick(yv));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, escape(x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(y_label)
        );
    }
}

fn tick(v: f64) -> String {
    let t = format!("{v:.2}");
    t.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Decision regions of `model` rasterized on a 200×200 grid, with source
/// points filled and target points hollow.
pub fn boundary_svg(model: &ModelBundle, dataset: &DomainDataset, title: &str) -> Result<String, PlotError> {
    let dim = dataset.input_dim();
    if dim != 1 && dim != 2 {
        return Err(PlotError::InputDim(dim));
    }
    let src: Vec<(&[f64], usize)> = dataset.source_labeled.iter().map(|s| (s.x.as_slice(), s.y)).collect();
    let tgt: Vec<(&[f64], usize)> = dataset
        .target_unlabeled
        .iter()
        .zip(dataset.target_train_labels.reveal())
        .map(|(x, &y)| (x.as_slice(), y))
        .collect();
    let all = src.iter().chain(&tgt);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, _) in all {
        x0 = x0.min(x[0]);
        x1 = x1.max(x[0]);
        if dim == 2 {
            y0 = y0.min(x[1]);
            y1 = y1.max(x[1]);
        }
    }
    if dim == 1 {
        (y0, y1) = (0.0, 1.0);
    }
    let (px, py) = (0.05 * (x1 - x0).max(1e-9), 0.05 * (y1 - y0).max(1e-9));
    let frame = Frame::new(x0 - px, x1 + px, y0 - py, y1 + py);

    let n = BOUNDARY_GRID;
    let cx = |i: usize| frame.x0 + (i as f64 + 0.5) / n as f64 * (frame.x1 - frame.x0);
    let cy = |j: usize| frame.y0 + (j as f64 + 0.5) / n as f64 * (frame.y1 - frame.y0);
    let labels = if dim == 1 {
        let row = model.predict_labels(&Tensor::new(vec![n, 1], (0..n).map(cx).collect()).expect("grid"))?;
        (0..n).flat_map(|_| row.iter().copied()).collect::<Vec<_>>()
    } else {
        let mut data = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                data.push(cx(i));
                data.push(cy(j));
            }
        }
        model.predict_labels(&Tensor::new(vec![n * n, 2], data).expect("grid"))?
    };

    let mut s = String::new();
    header(&mut s, title);
    let (cw, ch) = ((W - 2.0 * MARGIN) / n as f64, (H - 2.0 * MARGIN) / n as f64);
    for j in 0..n {
        let row = &labels[j * n..(j + 1) * n];
        let mut i = 0;
        while i < n {
            let mut k = i;
            while k < n && row[k] == row[i] {
                k += 1;
            }
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                MARGIN + i as f64 * cw,
                H - MARGIN - (j + 1) as f64 * ch,
                (k - i) as f64 * cw,
                ch,
                REGION[row[i] % REGION.len()]
            );
            i = k;
        }
    }
    let y_of = |x: &[f64], lane: f64| if dim == 2 { x[1] } else { lane };
    for (x, y) in &tgt {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="none" stroke="{}"/>"#,
            frame.px(x[0]),
            frame.py(y_of(x, 0.75)),
            PALETTE[y % PALETTE.len()]
        );
    }
    for (x, y) in &src {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{}" stroke="#000" stroke-width="0.5"/>"##,
            frame.px(x[0]),
            frame.py(y_of(x, 0.25)),
            PALETTE[y % PALETTE.len()]
        );
    }
    frame.axes(&mut s, "x0", if dim == 2 { "x1" } else { "source (lower) / target (upper)" });
    s.push_str("</svg>\n");
    Ok(s)
}

/// One polyline per series, one vertex per point.
pub fn convergence_svg(series: &[Series], title: &str, y_label: &str) -> Result<String, PlotError> {
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if pts.is_empty() {
        return Err(PlotError::Empty("no convergence points".into()));
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, k: fn(&(f64, f64)) -> f64| pts.iter().map(k).fold(init, f);
    let frame = Frame::new(
        fold(f64::min, f64::INFINITY, |p| p.0),
        fold(f64::max, f64::NEG_INFINITY, |p| p.0),
        fold(f64::min, f64::INFINITY, |p| p.1),
        fold(f64::max, f64::NEG_INFINITY, |p| p.1),
    );
    let mut s = String::new();
    header(&mut s, title);
    frame.axes(&mut s, "step", y_label);
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        let ly = MARGIN + 14.0 + 14.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{ly:.2}" fill="{color}" text-anchor="end">{}</text>"#, W - MARGIN - 6.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Bars of mean value with ±std whiskers.
pub fn bars_svg(bars: &[(String, f64, f64)], title: &str, y_label: &str) -> Result<String, PlotError> {
    if bars.is_empty() {
        return Err(PlotError::Empty("no bars".into()));
    }
    let top = bars.iter().map(|b| b.1 + b.2).fold(0.0f64, f64::max).max(1e-9);
    let frame = Frame::new(0.0, bars.len() as f64, 0.0, top * 1.1);
    let mut s = String::new();
    header(&mut s, title);
    let slot = (W - 2.0 * MARGIN) / bars.len() as f64;
    for (k, (label, mean, std)) in bars.iter().enumerate() {
        let x = MARGIN + k as f64 * slot + 0.15 * slot;
        let (yt, yb) = (frame.py(*mean), frame.py(0.0));
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{yt:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
            0.7 * slot,
            yb - yt,
            PALETTE[k % PALETTE.len()]
        );
        let xm = x + 0.35 * slot;
        let _ = writeln!(
            s,
            r##"<line x1="{xm:.2}" y1="{:.2}" x2="{xm:.2}" y2="{:.2}" stroke="#000"/>"##,
            frame.py(mean + std),
            frame.py((mean - std).max(0.0))
        );
        let _ = writeln!(
            s,
            r#"<text x="{xm:.2}" y="{:.2}" text-anchor="end" transform="rotate(-30 {xm:.2} {:.2})">{}</text>"#,
            H - MARGIN + 14.0,
            H - MARGIN + 14.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{MARGIN}" y1="{:.2}" x2="{MARGIN}" y2="{MARGIN}" stroke="#333"/>"##,
        H - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

/// A rows×columns grid of strings.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &[String]| -> String {
            let cells: Vec<String> = r
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut s = line(&self.header);
        s.push('\n');
        s.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }

    pub fn to_svg(&self, title: &str) -> String {
        let mut s = String::new();
        let rows = self.rows.len() + 1;
        let height = 50.0 + 20.0 * rows as f64;
        let col_w = 130.0;
        let width = 40.0 + col_w * self.header.len() as f64;
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
        );
        let _ = writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
        let _ = writeln!(s, r#"<text x="20" y="22" font-size="14" font-family="sans-serif">{}</text>"#, escape(title));
        for (ri, r) in std::iter::once(&self.header).chain(&self.rows).enumerate() {
            let y = 50.0 + 20.0 * ri as f64;
            let weight = if ri == 0 { r#" font-weight="bold""# } else { "" };
            for (ci, c) in r.iter().enumerate() {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}"{weight}>{}</text>"#, 20.0 + col_w * ci as f64, escape(c));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Mean curves of `metric` per method for one task and split.
pub fn convergence_series(records: &[ExperimentRecord], task: &str, split: &str, metric: &str) -> Vec<Series> {
    let mut by_method: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.seed == SeedKey::Mean && r.task == task && r.split == split && r.metric == metric)
    {
        by_method.entry(&r.method).or_default().push((r.step as f64, r.value));
    }
    by_method
        .into_iter()
        .map(|(m, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                label: m.to_string(),
                points,
            }
        })
        .collect()
}

/// Final-step (mean, std) of `proxy_a_distance` per method of one task.
pub fn adist_bars(records: &[ExperimentRecord], task: &str) -> Vec<(String, f64, f64)> {
    final_summary(records, "transductive", "proxy_a_distance")
        .into_iter()
        .filter(|((t, _), _)| t == task)
        .map(|((_, m), (mean, std))| (m, mean, std))
        .collect()
}

/// Methods × tasks table of final `mean ± std` (in percent for accuracies).
pub fn summary_table(records: &[ExperimentRecord], split: &str, metric: &str) -> Table {
    let summary = final_summary(records, split, metric);
    let mut tasks: Vec<&str> = summary.keys().map(|(t, _)| t.as_str()).collect();
    tasks.dedup();
    tasks.sort_unstable();
    tasks.dedup();
    let mut methods: Vec<&str> = summary.keys().map(|(_, m)| m.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let pct = metric.contains("acc");
    let rows = methods
        .iter()
        .map(|m| {
            std::iter::once(m.to_string())
                .chain(tasks.iter().map(|t| match summary.get(&(t.to_string(), m.to_string())) {
                    Some(&(mean, std)) if pct => format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * std),
                    Some(&(mean, std)) => format!("{mean:.3}±{std:.3}"),
                    None => "-".into(),
                }))
                .collect()
        })
        .collect();
    Table {
        header: std::iter::once(format!("{metric} ({split})"))
            .chain(tasks.iter().map(|t| t.to_string()))
            .collect(),
        rows,
    }
}
