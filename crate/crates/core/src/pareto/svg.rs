use super::{Frontier, Split};
use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 440.0;
const PAD: f64 = 60.0;

fn px(x: f64) -> f64 {
    PAD + x * (W - 2.0 * PAD)
}

fn py(y: f64) -> f64 {
    H - PAD - y * (H - 2.0 * PAD)
}

/// Scatter of both splits with their fitted curves on the unit square.
pub fn render_svg(frontier: &Frontier) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (px(0.0), px(1.0), py(0.0), py(1.0));
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.1}</text>"#, px(t), y0 + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"#, x0 - 6.0, py(t) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Normalized cost</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">Recall</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (split, color, legend_y) in [(Split::Train, "#1f77b4", 20.0), (Split::Test, "#d62728", 36.0)] {
        if let Some(fit) = frontier.fit(split) {
            let pts: Vec<String> = (0..=50)
                .map(|i| {
                    let x = i as f64 / 50.0;
                    format!("{:.1},{:.1}", px(x), py(fit.eval(x).clamp(-0.1, 1.1)))
                })
                .collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-dasharray="4 3" points="{}"/>"#, pts.join(" "));
        }
        for (x, y) in frontier.series(split) {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{color}"/>"#, px(x), py(y));
        }
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{legend_y}" r="4" fill="{color}"/>"#, W - 110.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{split}</text>"#, W - 100.0, legend_y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}
