//! Text tables and SVG plots built from a [`Summary`]. Every output is a pure
//! function of its input, so regenerating a report gives identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};
use crate::evaluation::{Metric, Scope};
use crate::experiment::{metric_key, Summary, REPORT_METRICS};
use crate::stats::percentile;

/// Parses keys such as `3d_dsc` or `2d_hd95`.
pub fn parse_metric_key(key: &str) -> Result<(Scope, Metric)> {
    let (s, m) = key.split_once('_').ok_or_else(|| invalid(format!("unknown metric {key:?}")))?;
    let scope = match s {
        "2d" => Scope::TwoD,
        "3d" => Scope::ThreeD,
        _ => return Err(invalid(format!("unknown metric {key:?}"))),
    };
    let metric = match m {
        "dsc" => Metric::Dsc,
        "hd95" => Metric::Hd95,
        _ => return Err(invalid(format!("unknown metric {key:?}"))),
    };
    Ok((scope, metric))
}

fn label(scope: Scope, metric: Metric) -> String {
    format!("{} {}", scope.to_string().to_uppercase(), metric.to_string().to_uppercase())
}

fn decimals(metric: Metric) -> usize {
    match metric {
        Metric::Dsc => 2,
        Metric::Hd95 => 3,
    }
}

/// One row per method with `mean (std)` over seeds of the mean over cycles >= 1.
pub fn format_table(summary: &Summary) -> String {
    let mut out = String::from("method\tseeds");
    for (s, m) in REPORT_METRICS {
        write!(out, "\t{}", label(s, m)).unwrap();
    }
    out.push('\n');
    for ms in &summary.methods {
        write!(out, "{}\t{}", ms.method, ms.seeds.len()).unwrap();
        for (s, m) in REPORT_METRICS {
            match ms.overall.get(&metric_key(s, m)) {
                Some(v) => write!(out, "\t{:.*} ({:.*})", decimals(m), v.mean, decimals(m), v.std).unwrap(),
                None => out.push_str("\tn/a"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn format_p_values(summary: &Summary) -> String {
    let mut out = String::from("method_a\tmethod_b\tmetric\tpairs\tp\n");
    for p in &summary.p_values {
        writeln!(out, "{}\t{}\t{}\t{}\t{:.5}", p.a, p.b, p.metric, p.pairs, p.p).unwrap();
    }
    out
}

pub fn format_curves(summary: &Summary) -> String {
    let mut out = String::from("method\tmetric\tcycle\tlabelled\tmean\tstd\tn\n");
    for ms in &summary.methods {
        for (key, points) in &ms.curves {
            for p in points {
                writeln!(out, "{}\t{key}\t{}\t{}\t{:.6}\t{:.6}\t{}", ms.method, p.cycle, p.labelled_size, p.value.mean, p.value.std, p.value.n)
                    .unwrap();
            }
        }
    }
    out
}

/// Writes `table.tsv`, `p_values.tsv`, `curves.tsv` and `summary.json` into `dir`.
pub fn write_report(summary: &Summary, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        ("table.tsv", format_table(summary)),
        ("p_values.tsv", format_p_values(summary)),
        ("curves.tsv", format_curves(summary)),
        ("summary.json", serde_json::to_string_pretty(summary)? + "\n"),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XAxis {
    LabelledSize,
    Cycle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub metric: (Scope, Metric),
    pub x: XAxis,
    pub include_cycle0: bool,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self { metric: (Scope::ThreeD, Metric::Dsc), x: XAxis::LabelledSize, include_cycle0: false }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: (f64, f64), ys: (f64, f64)) -> Self {
        let pad = |lo: f64, hi: f64| if hi > lo { ((hi - lo) * 0.05, 0.0) } else { (1.0, 1.0) };
        let (py, ey) = pad(ys.0, ys.1);
        let (x0, x1) = if xs.1 > xs.0 { xs } else { (xs.0 - 1.0, xs.1 + 1.0) };
        Self { x0, x1, y0: ys.0 - py - ey, y1: ys.1 + py + ey }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, f: &Frame, title: &str, xlabel: &str, ylabel: &str, xticks: &[(f64, String)]) {
    let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (l + r) / 2.0, escape(title)).unwrap();
    writeln!(svg, r#"<path d="M{l:.1},{t:.1} V{b:.1} H{r:.1}" fill="none" stroke="black"/>"#).unwrap();
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.py(v);
        writeln!(svg, r#"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="black"/>"#, l - 4.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, l - 7.0, y + 4.0).unwrap();
    }
    for (v, text) in xticks {
        let x = f.px(*v);
        writeln!(svg, r#"<line x1="{x:.1}" y1="{b:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/>"#, b + 4.0).unwrap();
        writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, b + 18.0, escape(text)).unwrap();
    }
    writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(svg, r#"<text transform="translate(18,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#, (t + b) / 2.0, escape(ylabel)).unwrap();
}

fn legend(svg: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let c = PALETTE[i % PALETTE.len()];
        writeln!(svg, r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{c}" stroke-width="2"/>"#, x + 20.0).unwrap();
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 26.0, y + 4.0, escape(name)).unwrap();
    }
}

/// Learning curves per method: mean over seeds with a normal-approximation
/// 95% band (`mean +- 1.96 std / sqrt(n)`) wherever at least two seeds exist.
pub fn learning_curve_svg(summary: &Summary, spec: &PlotSpec) -> Result<String> {
    let key = metric_key(spec.metric.0, spec.metric.1);
    let mut series = Vec::new();
    for ms in &summary.methods {
        let Some(points) = ms.curves.get(&key) else { continue };
        let pts: Vec<(f64, f64, Option<f64>)> = points
            .iter()
            .filter(|p| spec.include_cycle0 || p.cycle > 0)
            .map(|p| {
                let x = match spec.x {
                    XAxis::LabelledSize => p.labelled_size as f64,
                    XAxis::Cycle => p.cycle as f64,
                };
                let half = (p.value.n >= 2).then(|| 1.96 * p.value.std / (p.value.n as f64).sqrt());
                (x, p.value.mean, half)
            })
            .collect();
        if !pts.is_empty() {
            series.push((ms.method.as_str(), pts));
        }
    }
    if series.is_empty() {
        return Err(invalid(format!("no data for metric {key}")));
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, h) in all {
        let h = h.unwrap_or(0.0);
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y - h);
        ymax = ymax.max(y + h);
    }
    let f = Frame::new((xmin, xmax), (ymin, ymax));
    let mut xs: Vec<f64> = series.iter().flat_map(|(_, p)| p.iter().map(|t| t.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let ticks: Vec<(f64, String)> = xs.iter().map(|&x| (x, format!("{x}"))).collect();
    let xlabel = match spec.x {
        XAxis::LabelledSize => "labelled images",
        XAxis::Cycle => "cycle",
    };
    let ylabel = format!("{} ({})", label(spec.metric.0, spec.metric.1), spec.metric.1.unit());
    let mut svg = String::new();
    axes(&mut svg, &f, &format!("{} vs labelled set", label(spec.metric.0, spec.metric.1)), xlabel, &ylabel, &ticks);
    for (i, (_, pts)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        if pts.iter().all(|p| p.2.is_some()) && pts.len() > 1 {
            let mut d = String::new();
            for (j, (x, y, h)) in pts.iter().enumerate() {
                write!(d, "{}{:.1},{:.1} ", if j == 0 { "M" } else { "L" }, f.px(*x), f.py(y + h.unwrap())).unwrap();
            }
            for (x, y, h) in pts.iter().rev() {
                write!(d, "L{:.1},{:.1} ", f.px(*x), f.py(y - h.unwrap())).unwrap();
            }
            writeln!(svg, r#"<path d="{}Z" fill="{c}" fill-opacity="0.18" stroke="none"/>"#, d).unwrap();
        }
        let line: Vec<String> = pts.iter().map(|(x, y, _)| format!("{:.1},{:.1}", f.px(*x), f.py(*y))).collect();
        writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, line.join(" ")).unwrap();
        for (x, y, _) in pts {
            writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, f.px(*x), f.py(*y)).unwrap();
        }
    }
    legend(&mut svg, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Box plot of one metric per method across several summaries (for example
/// one per hyper-parameter set). Boxes span the quartiles, whiskers the range.
pub fn box_plot_svg(summaries: &[Summary], metric: (Scope, Metric)) -> Result<String> {
    let key = metric_key(metric.0, metric.1);
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for s in summaries {
        for ms in &s.methods {
            if let Some(v) = ms.overall.get(&key) {
                match groups.iter_mut().find(|g| g.0 == ms.method) {
                    Some(g) => g.1.push(v.mean),
                    None => groups.push((ms.method.clone(), vec![v.mean])),
                }
            }
        }
    }
    if groups.is_empty() {
        return Err(invalid(format!("no data for metric {key}")));
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    let lo = groups.iter().flat_map(|g| g.1.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = groups.iter().flat_map(|g| g.1.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let f = Frame::new((0.5, groups.len() as f64 + 0.5), (lo, hi));
    let ticks: Vec<(f64, String)> = groups.iter().enumerate().map(|(i, g)| ((i + 1) as f64, g.0.clone())).collect();
    let ylabel = format!("{} ({})", label(metric.0, metric.1), metric.1.unit());
    let mut svg = String::new();
    axes(&mut svg, &f, &format!("{} over settings", label(metric.0, metric.1)), "method", &ylabel, &ticks);
    let half = 0.25 * (f.px(2.0) - f.px(1.0)).abs().min(80.0);
    for (i, (_, v)) in groups.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let x = f.px((i + 1) as f64);
        let q = |p: f64| f.py(percentile(v, p));
        let (min, q1, med, q3, max) = (q(0.0), q(25.0), q(50.0), q(75.0), q(100.0));
        writeln!(svg, r#"<line x1="{x:.1}" y1="{min:.1}" x2="{x:.1}" y2="{max:.1}" stroke="{c}"/>"#).unwrap();
        writeln!(
            svg,
            r#"<rect x="{:.1}" y="{q3:.1}" width="{:.1}" height="{:.1}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
            x - half,
            2.0 * half,
            (q1 - q3).max(0.5)
        )
        .unwrap();
        writeln!(svg, r#"<line x1="{:.1}" y1="{med:.1}" x2="{:.1}" y2="{med:.1}" stroke="{c}" stroke-width="2"/>"#, x - half, x + half).unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
