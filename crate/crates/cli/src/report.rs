//! Plots and comparison tables from finished or live run directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};
use crate::runner::{EVENTS_FILE, METRICS_FILE};
use crate::stats::{mean, stderr};

/// Columns of one metrics CSV, parsed as numbers (non-numeric cells become NaN).
#[derive(Clone, Debug)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
        let headers: Vec<String> = reader.headers().map_err(|e| CliError::io(path, e))?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| CliError::io(path, e))?;
            rows.push(record.iter().map(|c| c.parse().unwrap_or(f64::NAN)).collect());
        }
        Ok(Table { headers, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

/// Per-seed metrics and replacement events of one run directory.
#[derive(Clone, Debug)]
pub struct RunData {
    pub dir: PathBuf,
    pub label: String,
    pub seeds: Vec<Table>,
    pub events: Vec<Table>,
}

impl RunData {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut seed_dirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
            .collect();
        seed_dirs.sort();
        let mut seeds = Vec::new();
        let mut events = Vec::new();
        for s in &seed_dirs {
            let metrics = s.join(METRICS_FILE);
            if !metrics.exists() {
                continue;
            }
            seeds.push(Table::read(&metrics)?);
            let ev = s.join(EVENTS_FILE);
            let non_empty = ev.exists() && fs::metadata(&ev).map_err(|e| CliError::io(&ev, e))?.len() > 0;
            events.push(if non_empty { Table::read(&ev)? } else { Table { headers: vec![], rows: vec![] } });
        }
        if seeds.is_empty() {
            return Err(CliError::Io(format!("{} has no seed_<n>/{METRICS_FILE}", dir.display())));
        }
        let label = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(RunData { dir: dir.to_path_buf(), label, seeds, events })
    }

    /// Fails with the list of available columns when `name` is missing from any seed.
    pub fn require(&self, name: &str) -> Result<()> {
        for t in &self.seeds {
            if !t.headers.iter().any(|h| h == name) {
                return Err(CliError::Config(format!(
                    "metric `{name}` not found in {}; available columns: {}",
                    self.dir.display(),
                    t.headers.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// `(x, mean, stderr)` over seeds, truncated to the shortest seed.
    pub fn curve(&self, x: &str, metric: &str) -> Result<Vec<(f64, f64, f64)>> {
        self.require(x)?;
        self.require(metric)?;
        let xs = self.seeds[0].column(x).expect("required");
        let ys: Vec<Vec<f64>> = self.seeds.iter().map(|t| t.column(metric).expect("required")).collect();
        let len = ys.iter().map(Vec::len).min().unwrap_or(0).min(xs.len());
        Ok((0..len)
            .map(|i| {
                let v: Vec<f64> = ys.iter().map(|y| y[i]).collect();
                (xs[i], mean(&v), stderr(&v))
            })
            .collect())
    }

    /// Distinct x positions of replacement events over all seeds.
    pub fn event_positions(&self, x: &str) -> Vec<f64> {
        let mut set = BTreeSet::new();
        for t in &self.events {
            if let Some(col) = t.column(x) {
                for v in col.into_iter().filter(|v| v.is_finite()) {
                    set.insert(v.to_bits());
                }
            }
        }
        let mut out: Vec<f64> = set.into_iter().map(f64::from_bits).collect();
        out.sort_by(f64::total_cmp);
        out
    }

    /// Mean and standard error over seeds of the last row of `metric`.
    pub fn final_value(&self, metric: &str) -> Result<(f64, f64)> {
        self.require(metric)?;
        let v: Vec<f64> =
            self.seeds.iter().filter_map(|t| t.column(metric).and_then(|c| c.last().copied())).collect();
        Ok((mean(&v), stderr(&v)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalisedRow {
    pub run: String,
    pub metric: String,
    pub final_mean: f64,
    pub final_stderr: f64,
    /// `final_mean` divided by the baseline run's `final_mean`.
    pub normalised: f64,
}

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub metrics: Vec<String>,
    /// Column used as the x axis; `None` picks `frames`, `epoch` or `f`, whichever exists.
    pub x: Option<String>,
    /// Index into the run list of the normalisation baseline.
    pub baseline: usize,
    pub out: PathBuf,
}

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub svgs: Vec<PathBuf>,
    pub table: PathBuf,
    pub rows: Vec<NormalisedRow>,
}

fn default_x(run: &RunData) -> String {
    ["frames", "epoch", "f"]
        .iter()
        .find(|c| run.seeds[0].headers.iter().any(|h| h == *c))
        .map_or_else(|| run.seeds[0].headers[0].clone(), |c| c.to_string())
}

pub fn report(run_dirs: &[PathBuf], opts: &ReportOptions) -> Result<ReportOutput> {
    if run_dirs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    if opts.metrics.is_empty() {
        return Err(CliError::Usage("report needs at least one metric".into()));
    }
    if opts.baseline >= run_dirs.len() {
        return Err(CliError::Usage(format!("baseline index {} is out of range", opts.baseline)));
    }
    let runs: Vec<RunData> = run_dirs.iter().map(|d| RunData::load(d)).collect::<Result<_>>()?;
    let x = opts.x.clone().unwrap_or_else(|| default_x(&runs[0]));
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;

    let mut svgs = Vec::new();
    let mut rows = Vec::new();
    for metric in &opts.metrics {
        let curves: Vec<Vec<(f64, f64, f64)>> = runs.iter().map(|r| r.curve(&x, metric)).collect::<Result<_>>()?;
        let mut markers: Vec<f64> = runs.iter().flat_map(|r| r.event_positions(&x)).collect();
        markers.sort_by(f64::total_cmp);
        markers.dedup();
        let labels: Vec<&str> = runs.iter().map(|r| r.label.as_str()).collect();
        let svg = line_plot(metric, &x, &labels, &curves, &markers);
        let path = opts.out.join(format!("{}.svg", sanitise(metric)));
        fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
        svgs.push(path);

        let (base, _) = runs[opts.baseline].final_value(metric)?;
        for r in &runs {
            let (m, se) = r.final_value(metric)?;
            rows.push(NormalisedRow {
                run: r.label.clone(),
                metric: metric.clone(),
                final_mean: m,
                final_stderr: se,
                normalised: m / base,
            });
        }
    }
    let table = opts.out.join("normalised.csv");
    let mut w = csv::Writer::from_path(&table).map_err(|e| CliError::io(&table, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::io(&table, e))?;
    }
    w.flush().map_err(|e| CliError::io(&table, e))?;
    Ok(ReportOutput { svgs, table, rows })
}

fn sanitise(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 30.0, 50.0);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A line per curve with a shaded ±stderr band and dashed vertical markers.
pub fn line_plot(title: &str, x_label: &str, labels: &[&str], curves: &[Vec<(f64, f64, f64)>], markers: &[f64]) -> String {
    let finite = |v: f64| v.is_finite();
    let xs = curves.iter().flatten().map(|p| p.0).chain(markers.iter().copied()).filter(|v| finite(*v));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let ys = curves.iter().flatten().flat_map(|p| [p.1 - p.2, p.1 + p.2]).filter(|v| finite(*v));
    let (y_min, y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x_min, x_max) = widen(x_min, x_max);
    let (y_min, y_max) = widen(y_min, y_max);
    let (left, right, top, bottom) = MARGIN;
    let sx = |x: f64| left + (x - x_min) / (x_max - x_min) * (WIDTH - left - right);
    let sy = |y: f64| HEIGHT - bottom - (y - y_min) / (y_max - y_min) * (HEIGHT - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#, WIDTH / 2.0, escape(title));
    let (x0, x1, y0, y1) = (sx(x_min), sx(x_max), sy(y_min), sy(y_max));
    let _ = writeln!(s, r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#);
    for (v, anchor, px, py) in [
        (x_min, "start", x0, y0 + 16.0),
        (x_max, "end", x1, y0 + 16.0),
        (y_min, "end", x0 - 6.0, y0),
        (y_max, "end", x0 - 6.0, y1 + 10.0),
    ] {
        let _ = writeln!(s, r#"<text x="{px}" y="{py}" font-size="11" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#, tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
    for m in markers {
        let _ = writeln!(s, r##"<line class="replacement" x1="{0}" y1="{y0}" x2="{0}" y2="{y1}" stroke="#555" stroke-dasharray="5,4"/>"##, sx(*m));
    }
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<&(f64, f64, f64)> = curve.iter().filter(|p| finite(p.0) && finite(p.1)).collect();
        if pts.iter().any(|p| p.2 > 0.0) {
            let upper = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 + p.2)));
            let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 - p.2)));
            let poly: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, poly.join(" "));
        }
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(s, r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, line.join(" "));
        let label = labels.get(i).copied().unwrap_or("");
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{color}" font-family="sans-serif">{}</text>"#, x0 + 10.0, y1 + 14.0 + 14.0 * i as f64, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}
