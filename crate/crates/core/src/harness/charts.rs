//! Static SVG rendering, no external assets.
//!
//! Heatmaps encode attention probability on a grayscale ramp: 0 maps to
//! white (#ffffff), 1 to black (#000000), linearly in between. Axis and
//! label strokes use #333333 so cell intensities stay unambiguous.

use super::pareto::ParetoFront;
use crate::economics::{AttentionDump, RunResult};
use crate::error::{Error, Result};
use crate::stats::mean;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const MARGIN: f64 = 56.0;
const PLOT_W: f64 = 480.0;
const PLOT_H: f64 = 280.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, class: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}"/>"#
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        if pts.is_empty() {
            return;
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            coords.join(" ")
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r##"<text x="{x:.2}" y="{y:.2}" font-size="{size:.1}" font-family="monospace" fill="#333333" text-anchor="{anchor}">{}</text>"##,
            escape_xml(content)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0}\" height=\"{:.0}\" viewBox=\"0 0 {:.0} {:.0}\">\n{}</svg>\n",
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

struct Scale {
    min: f64,
    max: f64,
    pixels: f64,
    offset: f64,
    flip: bool,
}

impl Scale {
    fn new(values: &[f64], pixels: f64, offset: f64, flip: bool) -> Self {
        let mut min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !min.is_finite() || !max.is_finite() {
            min = 0.0;
            max = 1.0;
        }
        if (max - min).abs() < 1e-12 {
            min -= 0.5;
            max += 0.5;
        }
        let pad = (max - min) * 0.06;
        Self {
            min: min - pad,
            max: max + pad,
            pixels,
            offset,
            flip,
        }
    }

    fn at(&self, v: f64) -> f64 {
        let frac = (v - self.min) / (self.max - self.min);
        if self.flip {
            self.offset + self.pixels * (1.0 - frac)
        } else {
            self.offset + self.pixels * frac
        }
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.min + (self.max - self.min) * i as f64 / n as f64)
            .collect()
    }
}

fn axis_labels(svg: &mut Svg, xs: &Scale, ys: &Scale, x_label: &str, y_label: &str) {
    let x0 = MARGIN;
    let y0 = MARGIN + PLOT_H;
    svg.line(x0, y0, x0 + PLOT_W, y0, "#333333");
    svg.line(x0, MARGIN, x0, y0, "#333333");
    for t in xs.ticks(5) {
        let px = xs.at(t);
        svg.line(px, y0, px, y0 + 4.0, "#333333");
        svg.text(px, y0 + 16.0, 9.0, "middle", &format!("{t:.3}"));
    }
    for t in ys.ticks(5) {
        let py = ys.at(t);
        svg.line(x0 - 4.0, py, x0, py, "#333333");
        svg.text(x0 - 6.0, py + 3.0, 9.0, "end", &format!("{t:.3}"));
    }
    svg.text(x0 + PLOT_W / 2.0, y0 + 32.0, 11.0, "middle", x_label);
    svg.text(14.0, MARGIN - 10.0, 11.0, "start", y_label);
}

/// Single-panel line chart with one series per label.
fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(&str, Vec<(f64, f64)>)],
) -> String {
    let mut svg = Svg::new(MARGIN * 2.0 + PLOT_W, MARGIN * 2.0 + PLOT_H);
    let all_x: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .collect();
    let all_y: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.1))
        .collect();
    let xs = Scale::new(&all_x, PLOT_W, MARGIN, false);
    let ys = Scale::new(&all_y, PLOT_H, MARGIN, true);
    svg.text(MARGIN, MARGIN - 28.0, 12.0, "start", title);
    axis_labels(&mut svg, &xs, &ys, x_label, y_label);
    let palette = ["#1f6fb2", "#b2521f", "#3a8a3a", "#7a3ab2"];
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = palette[i % palette.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite x"));
        let px: Vec<(f64, f64)> = sorted.iter().map(|&(x, y)| (xs.at(x), ys.at(y))).collect();
        svg.polyline(&px, color);
        for &(x, y) in &px {
            svg.circle(x, y, 2.5, color, "series-point");
        }
        svg.text(
            MARGIN + PLOT_W - 4.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            10.0,
            "end",
            label,
        );
        svg.line(
            MARGIN + PLOT_W - 70.0,
            MARGIN + 14.0 * (i as f64 + 1.0) - 3.0,
            MARGIN + PLOT_W - 56.0,
            MARGIN + 14.0 * (i as f64 + 1.0) - 3.0,
            color,
        );
    }
    svg.finish()
}

/// Scatter of every point plus the frontier polyline.
pub fn pareto_chart(points: &[(f64, f64, String)], front: &ParetoFront) -> String {
    let mut svg = Svg::new(MARGIN * 2.0 + PLOT_W, MARGIN * 2.0 + PLOT_H);
    let mut all_x: Vec<f64> = points.iter().map(|p| p.0).collect();
    let mut all_y: Vec<f64> = points.iter().map(|p| p.1).collect();
    for p in &front.points {
        all_x.push(p.flops_effective as f64);
        all_y.push(p.metric);
    }
    let xs = Scale::new(&all_x, PLOT_W, MARGIN, false);
    let ys = Scale::new(&all_y, PLOT_H, MARGIN, true);
    svg.text(MARGIN, MARGIN - 28.0, 12.0, "start", "task metric vs effective FLOPs");
    axis_labels(
        &mut svg,
        &xs,
        &ys,
        "effective FLOPs per forward (count)",
        "task metric (accuracy fraction)",
    );
    let color_of = |provenance: &str| match provenance {
        "incentive" => "#1f6fb2",
        "posthoc_mask" => "#b2521f",
        "dense" => "#3a8a3a",
        _ => "#777777",
    };
    for (x, y, provenance) in points {
        svg.circle(xs.at(*x), ys.at(*y), 3.0, color_of(provenance), "scatter-point");
    }
    let front_px: Vec<(f64, f64)> = front
        .points
        .iter()
        .map(|p| (xs.at(p.flops_effective as f64), ys.at(p.metric)))
        .collect();
    svg.polyline(&front_px, "#111111");
    for &(x, y) in &front_px {
        svg.circle(x, y, 3.5, "#111111", "front-point");
    }
    let mut legend_y = MARGIN + 14.0;
    for (label, color) in [
        ("incentive", "#1f6fb2"),
        ("posthoc_mask", "#b2521f"),
        ("dense", "#3a8a3a"),
        ("front", "#111111"),
    ] {
        svg.circle(MARGIN + PLOT_W - 72.0, legend_y - 3.0, 3.0, color, "legend");
        svg.text(MARGIN + PLOT_W - 64.0, legend_y, 10.0, "start", label);
        legend_y += 14.0;
    }
    svg.finish()
}

/// Grayscale attention heatmaps, one panel per (layer, head).
pub fn heatmap_svg(dumps: &[AttentionDump], title: &str) -> String {
    let cell = 4.0;
    let gap = 26.0;
    let panels = dumps.len().max(1) as f64;
    let n = dumps.first().map_or(1, |d| d.seq_len) as f64;
    let panel_w = n * cell;
    let width = gap + panels * (panel_w + gap);
    let height = gap * 2.5 + n * cell;
    let mut svg = Svg::new(width, height);
    svg.text(gap, 14.0, 11.0, "start", title);
    for (i, dump) in dumps.iter().enumerate() {
        let ox = gap + i as f64 * (panel_w + gap);
        let oy = gap * 1.5;
        svg.text(
            ox,
            oy - 6.0,
            9.0,
            "start",
            &format!("layer {} head {}", dump.layer, dump.head),
        );
        let n = dump.seq_len;
        for r in 0..n {
            for c in 0..n {
                let p = dump.probs[r * n + c].clamp(0.0, 1.0);
                let level = (255.0 * (1.0 - p)).round() as u8;
                let fill = format!("#{level:02x}{level:02x}{level:02x}");
                svg.rect(
                    ox + c as f64 * cell,
                    oy + r as f64 * cell,
                    cell,
                    cell,
                    &fill,
                );
            }
        }
    }
    svg.finish()
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Render every chart the results support: metric-vs-budget lines when
/// top-k points exist, the Pareto scatter when a front is given, and one
/// heatmap per attention snapshot.
pub fn emit_charts(
    results: &[RunResult],
    front: &ParetoFront,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Config("emit_charts needs at least one result".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, content: String| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    // budget charts: group top-k results by k
    let mut by_k: BTreeMap<usize, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if let Some(k) = r.budget_k() {
            by_k.entry(k).or_default().push(r);
        }
    }
    if !by_k.is_empty() {
        let acc_pts: Vec<(f64, f64)> = by_k
            .iter()
            .map(|(k, rs)| {
                let accs: Vec<f64> = rs.iter().filter_map(|r| r.accuracy).collect();
                (*k as f64, mean(&accs))
            })
            .collect();
        let ppl_pts: Vec<(f64, f64)> = by_k
            .iter()
            .map(|(k, rs)| {
                let v: Vec<f64> = rs.iter().map(|r| r.perplexity).collect();
                (*k as f64, mean(&v))
            })
            .collect();
        write(
            "accuracy_vs_k.svg".into(),
            line_chart(
                "task metric under decreasing attention budget",
                "attention budget k (positions)",
                "metric",
                &[("accuracy", acc_pts), ("perplexity / max", normalize(ppl_pts))],
            ),
        )?;
        let gini_pts: Vec<(f64, f64)> = by_k
            .iter()
            .map(|(k, rs)| {
                let v: Vec<f64> = rs.iter().map(|r| r.metrics.mean_gini).collect();
                (*k as f64, mean(&v))
            })
            .collect();
        let ent_pts: Vec<(f64, f64)> = by_k
            .iter()
            .map(|(k, rs)| {
                let v: Vec<f64> = rs.iter().map(|r| r.metrics.mean_entropy_bits).collect();
                (*k as f64, mean(&v))
            })
            .collect();
        write(
            "gini_vs_k.svg".into(),
            line_chart(
                "attention concentration vs budget",
                "attention budget k (positions)",
                "mean Gini (dimensionless)",
                &[("gini", gini_pts)],
            ),
        )?;
        write(
            "entropy_vs_k.svg".into(),
            line_chart(
                "attention entropy vs budget",
                "attention budget k (positions)",
                "mean entropy (bits)",
                &[("entropy", ent_pts)],
            ),
        )?;
    }

    if !front.points.is_empty() {
        let pts: Vec<(f64, f64, String)> = results
            .iter()
            .filter(|r| {
                matches!(r.provenance.as_str(), "incentive" | "posthoc_mask" | "dense")
            })
            .map(|r| {
                (
                    r.metrics.flops_effective as f64,
                    r.accuracy.unwrap_or(0.0),
                    r.provenance.clone(),
                )
            })
            .collect();
        write("pareto.svg".into(), pareto_chart(&pts, front))?;
    }

    for r in results {
        if let Some(dumps) = &r.sample_attention {
            let tag = sanitize(&format!("{}_{}_{}", r.provenance, r.constraint, r.seed));
            write(
                format!("heatmap_{tag}.svg"),
                heatmap_svg(dumps, &format!("attention probabilities ({tag})")),
            )?;
        }
    }
    Ok(written)
}

fn normalize(pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max == 0.0 {
        return pts;
    }
    pts.into_iter().map(|(x, y)| (x, y / max)).collect()
}
