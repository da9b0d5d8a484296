//! Minimal standalone SVG line charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A dashed straight segment between two data-space points.
#[derive(Clone, Debug)]
pub struct Guide {
    pub name: String,
    pub from: (f64, f64),
    pub to: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    pub guides: Vec<Guide>,
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tr(v: f64, log: bool) -> Option<f64> {
    let t = if log { v.log10() } else { v };
    t.is_finite().then_some(t)
}

fn fmt_tick(v: f64, log: bool) -> String {
    let value = if log { 10f64.powf(v) } else { v };
    if value != 0.0 && (value.abs() >= 1e4 || value.abs() < 1e-2) {
        format!("{value:.1e}")
    } else if value.abs() >= 10.0 {
        format!("{value:.0}")
    } else {
        format!("{value:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    fn bounds(&self) -> Option<((f64, f64), (f64, f64))> {
        let pts = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .chain(self.guides.iter().flat_map(|g| [g.from, g.to]))
            .filter_map(|(x, y)| Some((tr(x, self.log_x)?, tr(y, self.log_y)?)));
        let mut b: Option<((f64, f64), (f64, f64))> = None;
        for (x, y) in pts {
            b = Some(match b {
                None => ((x, x), (y, y)),
                Some(((x0, x1), (y0, y1))) => ((x0.min(x), x1.max(x)), (y0.min(y), y1.max(y))),
            });
        }
        b.map(|((x0, x1), (y0, y1))| {
            let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
            (pad(x0, x1), pad(y0, y1))
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(&self.title));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let _ = writeln!(
            out,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        let Some(((x0, x1), (y0, y1))) = self.bounds() else {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, W / 2.0, H / 2.0);
            out.push_str("</svg>\n");
            return out;
        };
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                sx(xv),
                TOP + ph + 18.0,
                fmt_tick(xv, self.log_x)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(yv) + 4.0,
                fmt_tick(yv, self.log_y)
            );
        }
        let mut legend_y = TOP + 10.0;
        let mut legend = |out: &mut String, color: &str, dash: &str, name: &str| {
            let lx = W - RIGHT + 10.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{color}" stroke-width="2"{dash}/>"#,
                lx + 20.0
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, legend_y + 4.0, escape(name));
            legend_y += 18.0;
        };
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = s
                .points
                .iter()
                .filter_map(|&(x, y)| Some(format!("{:.2},{:.2}", sx(tr(x, self.log_x)?), sy(tr(y, self.log_y)?))))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
            legend(&mut out, color, "", &s.name);
        }
        for (i, g) in self.guides.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let (Some(ax), Some(ay), Some(bx), Some(by)) =
                (tr(g.from.0, self.log_x), tr(g.from.1, self.log_y), tr(g.to.0, self.log_x), tr(g.to.1, self.log_y))
            else {
                continue;
            };
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1" stroke-dasharray="5,4"/>"#,
                sx(ax),
                sy(ay),
                sx(bx),
                sy(by)
            );
            legend(&mut out, color, r#" stroke-dasharray="5,4""#, &g.name);
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }

    #[test]
    fn empty_chart_still_renders() {
        let svg = Chart { title: "t".into(), ..Default::default() }.render();
        assert!(svg.contains("no data") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn log_axes_skip_nonpositive_points() {
        let chart = Chart {
            log_y: true,
            series: vec![Series { name: "s".into(), points: vec![(1.0, 0.0), (2.0, 1.0), (3.0, 10.0)] }],
            ..Default::default()
        };
        let svg = chart.render();
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(line.matches(',').count(), 2);
    }
}
