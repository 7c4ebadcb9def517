//! Static SVG charts for ablation tables.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: (f64, f64, f64, f64) = (56.0, 24.0, 40.0, 72.0); // left, right, top, bottom
const COLORS: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
}

fn axes(out: &mut String, y_max: f64) {
    let (l, r, t, b) = MARGIN;
    let (x0, x1, y0, y1) = (l, WIDTH - r, HEIGHT - b, t);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(out, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = MARGIN.0 + 8.0 + 110.0 * i as f64;
        let y = HEIGHT - 16.0;
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(n));
    }
}

fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        1.0
    } else {
        (v * 1.1 * 10.0).ceil() / 10.0
    }
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = nice_max(series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max));
    axes(&mut out, y_max);
    let (l, r, t, b) = MARGIN;
    let plot_w = WIDTH - l - r;
    let plot_h = HEIGHT - t - b;
    let group = plot_w / categories.len().max(1) as f64;
    let bar = group * 0.7 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = l + group * ci as f64 + group * 0.15;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0);
            let h = plot_h * v / y_max;
            let x = gx + bar * si as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{v:.4}</title></rect>"#,
                HEIGHT - b - h,
                bar * 0.9,
                COLORS[si % COLORS.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            l + group * (ci as f64 + 0.5),
            HEIGHT - b + 16.0,
            escape(cat)
        );
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Polylines over shared x labels, one per series.
pub fn line_chart(title: &str, x_labels: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let y_max = nice_max(series.iter().flat_map(|s| s.1.iter().copied()).fold(0.0, f64::max));
    axes(&mut out, y_max);
    let (l, r, t, b) = MARGIN;
    let plot_w = WIDTH - l - r;
    let plot_h = HEIGHT - t - b;
    let step = plot_w / x_labels.len().max(1) as f64;
    let x_at = |i: usize| l + step * (i as f64 + 0.5);
    for (i, label) in x_labels.iter().enumerate() {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x_at(i), HEIGHT - b + 16.0, escape(label));
    }
    for (si, (_, values)) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), HEIGHT - b - plot_h * v / y_max))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for (i, v) in values.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"><title>{v:.4}</title></circle>"#,
                x_at(i),
                HEIGHT - b - plot_h * v / y_max
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let cats = vec!["a<b".to_string(), "c".to_string()];
        let svg = bar_chart("t", &cats, &[("mAP", vec![0.5, 0.25]), ("NDS*", vec![0.4, 0.3])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect x=").count(), 4 + 2);
        assert!(svg.contains("a&lt;b"));
        let line = line_chart("t", &cats, &[("x", vec![0.1, 0.2])]);
        assert_eq!(line.matches("<circle").count(), 2);
    }
}
