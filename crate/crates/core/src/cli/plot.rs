//! Minimal SVG charts: line charts with error bands and a heatmap.

use std::fmt::Write as _;

use crate::eval::{HparamRow, TransferDirection};
use crate::stats::TrajectoryPoint;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub dashed: bool,
    /// Draw connecting lines; markers only otherwise.
    pub line: bool,
    /// `(x, y, se)`
    pub points: Vec<(f64, f64, Option<f64>)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let n = raw / mag;
    mag * if n < 1.5 {
        1.0
    } else if n < 3.5 {
        2.0
    } else if n < 7.5 {
        5.0
    } else {
        10.0
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title)
    );
}

/// Line chart; `log_x` puts the x axis on a log10 scale.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, log_x: bool, series: &[Series]) -> String {
    let tx = |x: f64| if log_x { x.max(1e-12).log10() } else { x };
    let all: Vec<(f64, f64, Option<f64>)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
        (a.min(tx(p.0)), b.max(tx(p.0)))
    });
    let (mut y0, mut y1) = all.iter().fold((0.0f64, f64::NEG_INFINITY), |(a, b), p| {
        let se = p.2.unwrap_or(0.0);
        (a.min(p.1 - se), b.max(p.1 + se))
    });
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y1.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let ystep = nice_step(y1 - y0);
    y0 = (y0 / ystep).floor() * ystep;
    y1 = (y1 / ystep).ceil() * ystep;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    let mut y = y0;
    while y <= y1 + ystep * 1e-6 {
        let yy = py(y);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            yy + 4.0,
            fmt_tick(y, ystep)
        );
        y += ystep;
    }
    if log_x {
        let mut e = x0.floor() as i32;
        while (e as f64) <= x1 + 1e-9 {
            if (e as f64) >= x0 - 1e-9 {
                let xx = LEFT + (e as f64 - x0) / (x1 - x0) * pw;
                let _ = writeln!(
                    out,
                    r##"<line x1="{xx:.1}" y1="{TOP}" x2="{xx:.1}" y2="{:.1}" stroke="#eee"/><text x="{xx:.1}" y="{:.1}" text-anchor="middle">1e{e}</text>"##,
                    TOP + ph,
                    TOP + ph + 16.0
                );
            }
            e += 1;
        }
    } else {
        let step = nice_step(x1 - x0);
        let mut x = (x0 / step).ceil() * step;
        while x <= x1 + step * 1e-6 {
            let xx = LEFT + (x - x0) / (x1 - x0) * pw;
            let _ = writeln!(
                out,
                r#"<text x="{xx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                TOP + ph + 16.0,
                fmt_tick(x, step)
            );
            x += step;
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for s in series {
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if s.line && pts.iter().any(|p| p.2.is_some()) {
            let upper: Vec<String> = pts
                .iter()
                .map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1 + p.2.unwrap_or(0.0))))
                .collect();
            let lower: Vec<String> = pts
                .iter()
                .rev()
                .map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1 - p.2.unwrap_or(0.0))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polygon points="{} {}" fill="{}" fill-opacity="0.15" stroke="none"/>"#,
                upper.join(" "),
                lower.join(" "),
                s.color
            );
        }
        if s.line {
            let path: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"{dash}/>"#,
                path.join(" "),
                s.color
            );
        }
        for p in &pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                px(p.0),
                py(p.1),
                s.color
            );
        }
    }
    for (i, s) in series.iter().enumerate() {
        let ly = TOP + 10.0 + i as f64 * 18.0;
        let lx = W - RIGHT + 12.0;
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 22.0,
            s.color,
            lx + 28.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    let s = format!("{v:.decimals$}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Heatmap with one cell per (row, column) value, viridis-like ramp.
pub fn heatmap(title: &str, row_label: &str, col_label: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let lo = values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let cw = pw / cols.len().max(1) as f64;
    let ch = ph / rows.len().max(1) as f64;
    let mut out = String::new();
    header(&mut out, title);
    for (i, r) in rows.iter().enumerate() {
        let y = TOP + i as f64 * ch;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + ch / 2.0 + 4.0,
            escape(r)
        );
        for (j, v) in values[i].iter().enumerate() {
            let x = LEFT + j as f64 * cw;
            let t = (v - lo) / span;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}"/><text x="{:.1}" y="{:.1}" text-anchor="middle" fill="{}">{v:.2}</text>"#,
                ramp(t),
                x + cw / 2.0,
                y + ch / 2.0 + 4.0,
                if t > 0.6 { "black" } else { "white" }
            );
        }
    }
    for (j, c) in cols.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + (j as f64 + 0.5) * cw,
            TOP + ph + 16.0,
            escape(c)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 14.0,
        escape(col_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(row_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}">min {lo:.2}</text><text x="{:.1}" y="{:.1}">max {hi:.2}</text>"#,
        W - RIGHT + 12.0,
        TOP + 12.0,
        W - RIGHT + 12.0,
        TOP + 30.0
    );
    out.push_str("</svg>\n");
    out
}

fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn direction_color(d: TransferDirection) -> &'static str {
    match d {
        TransferDirection::WhWh => "#1f77b4",
        TransferDirection::TopicTopic => "#2ca02c",
        TransferDirection::WhTopic => "#d62728",
        TransferDirection::TopicWh => "#9467bd",
    }
}

/// Max-odds against tokens seen, one band per transfer direction.
pub fn trajectory_svg(points: &[TrajectoryPoint]) -> String {
    let series: Vec<Series> = TransferDirection::ALL
        .into_iter()
        .filter_map(|d| {
            let pts: Vec<_> = points
                .iter()
                .filter(|p| p.direction == d && p.animacy_match.is_none())
                .map(|p| (p.tokens_seen as f64, p.mean, p.se))
                .collect();
            (!pts.is_empty()).then(|| Series {
                label: d.to_string(),
                color: direction_color(d),
                dashed: !d.is_within(),
                line: true,
                points: pts,
            })
        })
        .collect();
    line_chart("Max odds across training (±1 SE)", "tokens seen", "max odds", true, &series)
}

/// As [`trajectory_svg`] split by animacy pairing; mismatched dashed.
pub fn animacy_svg(points: &[TrajectoryPoint]) -> String {
    let mut series = Vec::new();
    for d in TransferDirection::ALL {
        for m in [true, false] {
            let pts: Vec<_> = points
                .iter()
                .filter(|p| p.direction == d && p.animacy_match == Some(m))
                .map(|p| (p.tokens_seen as f64, p.mean, p.se))
                .collect();
            if !pts.is_empty() {
                series.push(Series {
                    label: format!("{d} {}", if m { "matched" } else { "mismatched" }),
                    color: direction_color(d),
                    dashed: !m,
                    line: true,
                    points: pts,
                });
            }
        }
    }
    line_chart("Max odds by animacy pairing (±1 SE)", "tokens seen", "max odds", true, &series)
}

/// Batch size × steps surface of max-odds.
pub fn hparam_svg(rows: &[HparamRow]) -> String {
    let mut bs: Vec<usize> = rows.iter().map(|r| r.batch_size).collect();
    bs.sort_unstable();
    bs.dedup();
    let mut st: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    st.sort_unstable();
    st.dedup();
    let values: Vec<Vec<f64>> = bs
        .iter()
        .map(|&b| {
            st.iter()
                .map(|&s| {
                    rows.iter()
                        .find(|r| r.batch_size == b && r.steps == s)
                        .map_or(f64::NAN, |r| r.max_odds)
                })
                .collect()
        })
        .collect();
    heatmap(
        "Max odds over DAS batch size and steps",
        "batch size",
        "steps",
        &bs.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
        &st.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        &values,
    )
}

/// Max-odds against total samples, collapsed across batch sizes.
pub fn samples_svg(rows: &[HparamRow]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let mut bs: Vec<usize> = rows.iter().map(|r| r.batch_size).collect();
    bs.sort_unstable();
    bs.dedup();
    let series: Vec<Series> = bs
        .iter()
        .enumerate()
        .map(|(i, &b)| Series {
            label: format!("batch {b}"),
            color: COLORS[i % COLORS.len()],
            dashed: false,
            line: false,
            points: rows
                .iter()
                .filter(|r| r.batch_size == b)
                .map(|r| (r.samples as f64, r.max_odds, None))
                .collect(),
        })
        .collect();
    line_chart("Max odds against DAS training samples", "samples (batch × steps)", "max odds", false, &series)
}

pub const SAMPLES_HEADER: &str = "samples,batch_size,steps,max_odds,fraction_of_grid_max";

/// Hyperparameter cells sorted by samples, each with its share of the grid
/// maximum.
pub fn samples_csv(rows: &[HparamRow]) -> String {
    let best = rows.iter().map(|r| r.max_odds).fold(f64::NEG_INFINITY, f64::max);
    let mut sorted: Vec<&HparamRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.samples, r.batch_size, r.steps));
    let mut out = format!("{SAMPLES_HEADER}\n");
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.4}",
            r.samples,
            r.batch_size,
            r.steps,
            r.max_odds,
            r.max_odds / best
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_well_formed() {
        let s = Series {
            label: "a<b".into(),
            color: "#000",
            dashed: false,
            line: true,
            points: vec![(1000.0, 1.0, Some(0.5)), (10000.0, 3.0, None)],
        };
        let svg = line_chart("t", "x", "y", true, &[s]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("<polygon"));
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(ramp(0.0), "#440154");
        assert_eq!(ramp(1.0), "#fde725");
    }

    #[test]
    fn ticks() {
        assert_eq!(nice_step(10.0), 2.0);
        assert_eq!(fmt_tick(-0.0, 1.0), "0");
        assert_eq!(fmt_tick(0.25, 0.05), "0.25");
    }
}
