//! Side-by-side SVG scatter plots of 2-d samples, coloured by oracle label.

use std::fmt::Write as _;

use crate::concepts::ConceptUniverse;
use crate::numerics::Vector;

const PANEL: f64 = 280.0;
const PAD: f64 = 24.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

pub struct Panel<'a> {
    pub title: String,
    pub samples: &'a [Vector],
}

/// One panel per entry; only the first two coordinates are drawn. Mode
/// centres are marked with black crosses.
pub fn scatter_svg(universe: &ConceptUniverse, panels: &[Panel<'_>]) -> String {
    let (lo, hi) = bounds(universe, panels);
    let span = (hi - lo).max(1e-9);
    let to_px = |v: f64, flip: bool| {
        let u = (v - lo) / span;
        PAD + if flip { 1.0 - u } else { u } * (PANEL - 2.0 * PAD)
    };
    let width = PANEL * panels.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}" font-family="sans-serif" font-size="12">"#,
        h = PANEL + 20.0
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        let ox = i as f64 * PANEL;
        let _ = writeln!(s, r#"<g transform="translate({ox},0)">"#);
        let _ = writeln!(
            s,
            r##"<rect x="{PAD}" y="{PAD}" width="{w}" height="{w}" fill="none" stroke="#999"/>"##,
            w = PANEL - 2.0 * PAD
        );
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="16" text-anchor="middle">{}</text>"#,
            escape(&panel.title),
            x = PANEL / 2.0
        );
        let inside = |p: &&Vector| p.len() >= 2 && p[0].abs() <= hi && p[1].abs() <= hi;
        for p in panel.samples.iter().filter(inside) {
            let label = universe.classify(p);
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.6"/>"#,
                to_px(p[0], false),
                to_px(p[1], true),
                PALETTE[label % PALETTE.len()]
            );
        }
        for comp in universe.components().iter().filter(|c| c.mean.len() >= 2) {
            let (x, y) = (to_px(comp.mean[0], false), to_px(comp.mean[1], true));
            let _ = writeln!(
                s,
                r#"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="black" stroke-width="1.5"/>"#,
                x - 5.0,
                y - 5.0,
                x + 5.0,
                y + 5.0,
                x - 5.0,
                y + 5.0,
                x + 5.0,
                y - 5.0
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(
        s,
        r##"<text x="4" y="{}" fill="#555">axes span [{lo:.1}, {hi:.1}] in both coordinates</text>"##,
        PANEL + 14.0
    );
    s.push_str("</svg>\n");
    s
}

/// Square window around the mode centres, widened to include samples but
/// never beyond three times the centre extent.
fn bounds(universe: &ConceptUniverse, panels: &[Panel<'_>]) -> (f64, f64) {
    let centre = universe
        .components()
        .iter()
        .flat_map(|c| c.mean.iter().take(2))
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        + 1.0;
    let data = panels
        .iter()
        .flat_map(|p| p.samples.iter())
        .flat_map(|p| p.iter().take(2))
        .filter(|v| v.is_finite())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let r = data.clamp(centre, 3.0 * centre);
    (-r, r)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_and_points() {
        let u = ConceptUniverse::reference();
        let a = vec![vec![2.0, 2.0], vec![-2.0, -2.0]];
        let b = vec![vec![0.0, 0.0]];
        let svg = scatter_svg(
            &u,
            &[
                Panel {
                    title: "original".into(),
                    samples: &a,
                },
                Panel {
                    title: "erased <c0>".into(),
                    samples: &b,
                },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert_eq!(svg.matches("<g ").count(), 2);
        assert!(svg.contains("erased &lt;c0&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
