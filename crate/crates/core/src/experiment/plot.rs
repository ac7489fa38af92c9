//! Static plots: a scatter PNG for 2-D samples and SVG line charts of the
//! loss, metric and sweep tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};
use crate::evaluation::METRIC_HEADER;

use super::commands::SWEEP_HEADER;

const SCATTER_SIZE: u32 = 256;
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#7f7f7f"];

/// Scatter of the first two coordinates of each row on a square canvas
/// centered at the origin.
pub fn scatter_png(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    if rows.iter().any(|r| r.len() < 2) {
        return Err(invalid("scatter needs rows with two coordinates"));
    }
    let extent = rows.iter().flat_map(|r| [r[0].abs(), r[1].abs()]).filter(|v| v.is_finite()).fold(1e-9, f64::max) * 1.1;
    let mut img = image::RgbImage::from_pixel(SCATTER_SIZE, SCATTER_SIZE, image::Rgb([255, 255, 255]));
    let last = (SCATTER_SIZE - 1) as f64;
    for r in rows {
        if !(r[0].is_finite() && r[1].is_finite()) {
            continue;
        }
        let px = ((r[0] / extent + 1.0) * 0.5 * last).round() as i64;
        let py = ((1.0 - r[1] / extent) * 0.5 * last).round() as i64;
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (x, y) = (px + dx, py + dy);
            if (0..SCATTER_SIZE as i64).contains(&x) && (0..SCATTER_SIZE as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, image::Rgb([20, 60, 160]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Named series of `(x, y)` points.
pub type Series = BTreeMap<String, Vec<(f64, f64)>>;

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Series,
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self.series.values().flatten().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let bounds = |f: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            match (lo.is_finite(), hi > lo) {
                (true, true) => (lo, hi),
                (true, false) => (lo - 0.5, lo + 0.5),
                _ => (0.0, 1.0),
            }
        };
        let (x0, x1) = bounds(|p| p.0);
        let (y0, y1) = bounds(|p| p.1);
        let (pw, ph) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r#"<path d="M{m},{t} V{b} H{r}" stroke="black" fill="none"/>"#,
            m = MARGIN,
            t = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), HEIGHT - MARGIN + 16.0, fmt_tick(xv));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(yv) + 4.0, fmt_tick(yv));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{y}" text-anchor="middle" transform="rotate(-90 14 {y})">{}</text>"#,
            escape(&self.y_label),
            y = HEIGHT / 2.0
        );
        for (i, (name, points)) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let mut sorted = points.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let d: Vec<String> = sorted.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
            for &(x, y) in &sorted {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = MARGIN + 14.0 * i as f64;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#, WIDTH - MARGIN - 150.0, escape(name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn parse(field: &str, line: usize) -> Result<f64> {
    field.trim().parse().map_err(|_| invalid(format!("line {line}: {field:?} is not a number")))
}

/// Chart of a loss, metric or sweep table, recognized by its header.
pub fn chart_from_csv(text: &str) -> Result<Chart> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid("empty table"))?.trim();
    let rows: Vec<(usize, Vec<&str>)> =
        lines.enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 2, l.split(',').collect())).collect();
    let mut series = Series::new();
    let chart = |title: &str, x: &str, y: &str, series| Chart { title: title.into(), x_label: x.into(), y_label: y.into(), series };
    if header == "step,loss,wall_ms" {
        for (n, r) in &rows {
            series.entry("loss".into()).or_insert_with(Vec::new).push((parse(r[0], *n)?, parse(r[1], *n)?));
        }
        Ok(chart("training loss", "step", "loss", series))
    } else if header == METRIC_HEADER {
        for (n, r) in &rows {
            series.entry(r[1].to_string()).or_insert_with(Vec::new).push((parse(r[2], *n)?, parse(r[5], *n)?));
        }
        Ok(chart("score during training", "checkpoint step", "Fréchet distance", series))
    } else if header == SWEEP_HEADER {
        let mut groups: BTreeMap<(String, u64, u64), Vec<f64>> = BTreeMap::new();
        for (n, r) in &rows {
            let key = (r[0].to_string(), parse(r[2], *n)? as u64, parse(r[1], *n)? as u64);
            groups.entry(key).or_default().push(parse(r[3], *n)?);
        }
        for ((arm, budget, dim), scores) in groups {
            series.entry(format!("{arm} budget {budget}")).or_insert_with(Vec::new).push((dim as f64, median(scores)));
        }
        Ok(chart("score versus conditioning dimension (median over seeds)", "dimension or clusters", "Fréchet distance", series))
    } else {
        Err(invalid(format!("unrecognized table header {header:?}")))
    }
}

/// Render `input` to an SVG beside it and return the SVG path.
pub fn cmd_plot(input: &Path) -> Result<PathBuf> {
    let chart = chart_from_csv(&std::fs::read_to_string(input)?)?;
    let out = input.with_extension("svg");
    std::fs::write(&out, chart.to_svg())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_table_groups_by_method() {
        let csv = format!("{METRIC_HEADER}\nh,vcdm,500,10,identity,0.5,0\nh,vcdm,1000,10,identity,0.25,0\nh,edm,1000,10,identity,0.75,0\n");
        let c = chart_from_csv(&csv).unwrap();
        assert_eq!(c.series["vcdm"], vec![(500.0, 0.5), (1000.0, 0.25)]);
        assert_eq!(c.series["edm"].len(), 1);
        let svg = c.to_svg();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    #[test]
    fn sweep_table_takes_medians_over_seeds() {
        let csv = format!("{SWEEP_HEADER}\npca,2,100,1.0,0,0.1\npca,2,100,3.0,1,0.1\npca,2,100,2.0,2,0.1\n");
        let c = chart_from_csv(&csv).unwrap();
        assert_eq!(c.series["pca budget 100"], vec![(2.0, 2.0)]);
    }

    #[test]
    fn unknown_header_is_rejected() {
        assert!(chart_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn scatter_has_fixed_canvas() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        scatter_png(&[vec![1.0, -1.0], vec![0.0, 0.5]], &p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (SCATTER_SIZE, SCATTER_SIZE));
    }
}
