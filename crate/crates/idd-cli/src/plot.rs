//! Minimal static SVG plots; no dependencies, just enough for offline
//! inspection of evaluation bars and training curves.

use std::path::Path;

use anyhow::{Context, Result};

const PALETTE: [&str; 8] = [
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0", "#797979",
];

fn svg_header(w: usize, h: usize, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bar chart of values in [0, 1].
pub fn bar_chart(labels: &[String], values: &[f64], title: &str, path: &Path) -> Result<()> {
    let (w, h) = (80 + labels.len().max(1) * 70, 320usize);
    let (x0, y0, y1) = (60.0, 40.0, 270.0);
    let mut svg = svg_header(w, h, title);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y1 - v * (y1 - y0);
        svg.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            w as f64 - 20.0,
            x0 - 6.0,
            y + 4.0
        ));
    }
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let clamped = v.clamp(0.0, 1.0);
        let bx = x0 + 10.0 + i as f64 * 70.0;
        let bh = clamped * (y1 - y0);
        svg.push_str(&format!(
            "<rect x=\"{bx:.1}\" y=\"{:.1}\" width=\"44\" height=\"{bh:.1}\" fill=\"{}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{:.3}</text>\n",
            y1 - bh,
            PALETTE[i % PALETTE.len()],
            bx + 22.0,
            y1 + 16.0,
            xml_escape(label),
            bx + 22.0,
            y1 - bh - 4.0,
            v
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Multi-series line chart; series are `(name, points)` with x ascending.
pub fn line_chart(series: &[(String, Vec<(f64, f64)>)], title: &str, path: &Path) -> Result<()> {
    let (w, h) = (640usize, 360usize);
    let (x0, x1, y0, y1) = (60.0, 610.0, 40.0, 300.0);
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let x_max = xs.fold(1.0f64, f64::max);
    let mut svg = svg_header(w, h, title);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y1 - v * (y1 - y0);
        svg.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            x0 - 6.0,
            y + 4.0
        ));
    }
    for (i, (name, points)) in series.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let path_d: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let px = x0 + (x / x_max) * (x1 - x0);
                let py = y1 - y.clamp(0.0, 1.0) * (y1 - y0);
                format!("{px:.1},{py:.1}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path_d.join(" ")
        ));
        let ly = 46.0 + i as f64 * 16.0;
        svg.push_str(&format!(
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            x1 - 140.0,
            ly - 9.0,
            x1 - 126.0,
            ly,
            xml_escape(name)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">iteration</text>\n",
        (x0 + x1) / 2.0,
        y1 + 30.0
    ));
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
