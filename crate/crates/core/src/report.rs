//! Self-contained SVG figures from sweep output: theory curve, empirical
//! medians and the interquartile band, one panel per varied parameter.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sweep::{aggregate, write_csv, AggregateRow, Axis, ColumnSummary, EmpiricalColumn, SweepRecord};
use crate::theory::{self, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Mu,
    Sigma,
    Eta,
}

impl ReportKind {
    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Mu => "mu",
            ReportKind::Sigma => "sigma",
            ReportKind::Eta => "eta",
        }
    }

    fn label(self) -> &'static str {
        match self {
            ReportKind::Mu => "μ",
            ReportKind::Sigma => "σ²",
            ReportKind::Eta => "η",
        }
    }

    fn theory_of(self, params: &ModelParams) -> Option<f64> {
        let t = theory::predict(params).ok()?;
        Some(match self {
            ReportKind::Mu => t.mu,
            ReportKind::Sigma => t.sigma_sq,
            ReportKind::Eta => t.eta,
        })
    }

    /// Empirical column for this kind; η prefers the Monte Carlo estimate.
    fn summary(self, row: &AggregateRow) -> ColumnSummary {
        match self {
            ReportKind::Mu => row.summary(EmpiricalColumn::Mu),
            ReportKind::Sigma => row.summary(EmpiricalColumn::Sigma2),
            ReportKind::Eta => {
                let mc = row.summary(EmpiricalColumn::EtaMc);
                if mc.median.is_finite() {
                    mc
                } else {
                    row.summary(EmpiricalColumn::EtaPlugin)
                }
            }
        }
    }

    fn theory_column(self, row: &AggregateRow) -> f64 {
        match self {
            ReportKind::Mu => row.mu_theory,
            ReportKind::Sigma => row.sigma2_theory,
            ReportKind::Eta => row.eta_theory,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesPoint {
    pub x: f64,
    pub theory: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisSeries {
    pub axis: Axis,
    pub kind: ReportKind,
    pub base: ModelParams,
    pub points: Vec<SeriesPoint>,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

/// Rows whose other three parameters sit at `base`, one per axis value,
/// sorted by that value.
pub fn axis_series(rows: &[AggregateRow], axis: Axis, kind: ReportKind, base: &ModelParams) -> AxisSeries {
    let mut points: Vec<SeriesPoint> = Vec::new();
    for row in rows {
        let params = row.params();
        let others_match = Axis::ALL
            .iter()
            .filter(|&&a| a != axis)
            .all(|a| close(a.value(&params), a.value(base)));
        let x = axis.value(&params);
        if !others_match || points.iter().any(|p| close(p.x, x)) {
            continue;
        }
        let s = kind.summary(row);
        points.push(SeriesPoint { x, theory: kind.theory_column(row), median: s.median, q25: s.q25, q75: s.q75 });
    }
    points.sort_by(|a, b| a.x.total_cmp(&b.x));
    AxisSeries { axis, kind, base: *base, points }
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
    log_x: bool,
}

impl Frame {
    fn tx(&self, x: f64) -> f64 {
        let (x, lo, hi) = if self.log_x { (x.log10(), self.xmin.log10(), self.xmax.log10()) } else { (x, self.xmin, self.xmax) };
        self.x0 + (x - lo) / (hi - lo) * self.w
    }

    fn ty(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.ymin) / (self.ymax - self.ymin) * self.h
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        let pad = 0.1 * hi.abs().max(1e-3);
        return (lo - pad, hi + pad);
    }
    let pad = 0.08 * (hi - lo);
    (lo - pad, hi + pad)
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e-2 && v.abs() < 1e3 {
        format!("{}", (v * 1e4).round() / 1e4)
    } else {
        format!("{v:.1e}")
    }
}

/// Smooth theory curve over the axis range, skipping points where the closed
/// form is undefined.
fn theory_curve(series: &AxisSeries, frame: &Frame) -> Vec<(f64, f64)> {
    let steps = 120;
    (0..=steps)
        .filter_map(|i| {
            let t = i as f64 / steps as f64;
            let x = if frame.log_x {
                10f64.powf(frame.xmin.log10() + t * (frame.xmax.log10() - frame.xmin.log10()))
            } else {
                frame.xmin + t * (frame.xmax - frame.xmin)
            };
            let mut params = series.base;
            series.axis.set(&mut params, x);
            series.kind.theory_of(&params).filter(|y| y.is_finite()).map(|y| (x, y))
        })
        .collect()
}

fn draw_panel(out: &mut String, series: &AxisSeries, x0: f64, y0: f64, w: f64, h: f64) {
    let pts = &series.points;
    let log_x = series.axis == Axis::Lambda && pts.iter().all(|p| p.x > 0.0);
    let (xmin, xmax) = match (pts.first(), pts.last()) {
        (Some(a), Some(b)) if b.x > a.x => (a.x, b.x),
        (Some(a), _) => (a.x * 0.5, a.x * 1.5 + 1e-3),
        _ => (0.0, 1.0),
    };
    let mut frame = Frame { x0, y0, w, h, xmin, xmax, ymin: 0.0, ymax: 1.0, log_x };
    let curve = theory_curve(series, &frame);
    let ys = pts
        .iter()
        .flat_map(|p| [p.theory, p.median, p.q25, p.q75])
        .chain(curve.iter().map(|c| c.1))
        .filter(|y| y.is_finite());
    let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    (frame.ymin, frame.ymax) = padded(lo, hi);

    let _ = writeln!(out, r##"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##);
    for i in 0..=4 {
        let fy = frame.ymin + (frame.ymax - frame.ymin) * i as f64 / 4.0;
        let py = frame.ty(fy);
        let _ = writeln!(
            out,
            r##"<line x1="{x0}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{}</text>"##,
            x0 + w,
            x0 - 4.0,
            py + 3.0,
            tick_label(fy)
        );
    }
    for p in pts {
        let px = frame.tx(p.x);
        let _ = writeln!(
            out,
            r##"<text x="{px:.2}" y="{:.2}" font-size="10" text-anchor="middle">{}</text>"##,
            y0 + h + 14.0,
            tick_label(p.x)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{}</text>"##,
        x0 + w / 2.0,
        y0 + h + 30.0,
        series.axis.name()
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{} vs {}</text>"##,
        x0 + w / 2.0,
        y0 - 8.0,
        series.kind.label(),
        series.axis.name()
    );

    let band: Vec<&SeriesPoint> = pts.iter().filter(|p| p.q25.is_finite() && p.q75.is_finite()).collect();
    if !band.is_empty() {
        let mut poly = String::new();
        for p in &band {
            let _ = write!(poly, "{:.2},{:.2} ", frame.tx(p.x), frame.ty(p.q75));
        }
        for p in band.iter().rev() {
            let _ = write!(poly, "{:.2},{:.2} ", frame.tx(p.x), frame.ty(p.q25));
        }
        let _ = writeln!(
            out,
            r##"<polygon class="iqr" points="{}" fill="#f4a261" fill-opacity="0.35" stroke="#f4a261"/>"##,
            poly.trim_end()
        );
    }
    if curve.len() > 1 {
        let line: Vec<String> = curve.iter().map(|&(x, y)| format!("{:.2},{:.2}", frame.tx(x), frame.ty(y))).collect();
        let _ = writeln!(
            out,
            r##"<polyline class="theory" points="{}" fill="none" stroke="#1d3557" stroke-width="1.5"/>"##,
            line.join(" ")
        );
    }
    for p in pts.iter().filter(|p| p.median.is_finite()) {
        let _ = writeln!(
            out,
            r##"<circle class="median" cx="{:.2}" cy="{:.2}" r="3.5" fill="#e63946"/>"##,
            frame.tx(p.x),
            frame.ty(p.median)
        );
    }
}

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const GAP: f64 = 40.0;

/// One SVG with the given panels side by side.
pub fn render_svg(panels: &[AxisSeries]) -> String {
    let width = MARGIN_L + panels.len() as f64 * (PANEL_W + GAP);
    let height = MARGIN_T + PANEL_H + MARGIN_B;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, s) in panels.iter().enumerate() {
        draw_panel(&mut out, s, MARGIN_L + i as f64 * (PANEL_W + GAP), MARGIN_T, PANEL_W, PANEL_H);
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub aggregate_csv: PathBuf,
    pub svgs: Vec<PathBuf>,
}

/// Aggregate `records`, write `<stem>_agg.csv`, one `<stem>_<kind>_<axis>.svg`
/// per axis with data at `base`, and `<stem>_<kind>_panels.svg` with all of
/// them side by side.
pub fn write_report(
    records: &[SweepRecord],
    kind: ReportKind,
    axes: &[Axis],
    base: &ModelParams,
    out_dir: &Path,
    stem: &str,
) -> Result<ReportOutputs> {
    if records.is_empty() {
        return Err(Error::SchemaMismatch("no records to report".into()));
    }
    let rows = aggregate(records)?;
    std::fs::create_dir_all(out_dir)?;
    let aggregate_csv = out_dir.join(format!("{stem}_agg.csv"));
    write_csv(std::fs::File::create(&aggregate_csv)?, &rows)?;

    let mut svgs = Vec::new();
    let mut panels = Vec::new();
    for &axis in axes {
        let series = axis_series(&rows, axis, kind, base);
        if series.points.is_empty() {
            log::warn!("no grid points vary {} around the base point; panel skipped", axis.name());
            continue;
        }
        let path = out_dir.join(format!("{stem}_{}_{}.svg", kind.name(), axis.name()));
        std::fs::write(&path, render_svg(std::slice::from_ref(&series)))?;
        svgs.push(path);
        panels.push(series);
    }
    if panels.is_empty() {
        return Err(Error::SchemaMismatch("no grid point matches the base parameters".into()));
    }
    let path = out_dir.join(format!("{stem}_{}_panels.svg", kind.name()));
    std::fs::write(&path, render_svg(&panels))?;
    svgs.push(path);
    Ok(ReportOutputs { aggregate_csv, svgs })
}
