//! Deterministic SVG scatter renders.

use std::fmt::Write as _;

use ndarray::Array2;

const SIZE: f64 = 480.0;
const AZIMUTH: f64 = 0.6;
const ELEVATION: f64 = 0.35;

/// Orthographic view from a fixed camera; returns screen x, y and depth.
fn project(points: &Array2<f64>) -> Vec<(f64, f64, f64)> {
    let (sa, ca) = AZIMUTH.sin_cos();
    let (se, ce) = ELEVATION.sin_cos();
    points
        .outer_iter()
        .map(|p| {
            let x = ca * p[0] - sa * p[1];
            let y0 = sa * p[0] + ca * p[1];
            let y = ce * p[2] - se * y0;
            let depth = se * p[2] + ce * y0;
            (x, y, depth)
        })
        .collect()
}

/// Blue through light grey to red.
fn color(u: f64) -> (u8, u8, u8) {
    let lo = (59.0, 76.0, 192.0);
    let mid = (221.0, 221.0, 221.0);
    let hi = (180.0, 4.0, 38.0);
    let (a, b, w) = if u < 0.5 { (lo, mid, u * 2.0) } else { (mid, hi, u * 2.0 - 1.0) };
    let mix = |x: f64, y: f64| (x + (y - x) * w).round().clamp(0.0, 255.0) as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Scatter of `points`; with `values`, higher values are drawn redder and larger.
pub fn scatter_svg(points: &Array2<f64>, values: Option<&[f64]>, title: &str) -> String {
    let proj = project(points);
    let extent = proj.iter().fold(1e-9_f64, |m, &(x, y, _)| m.max(x.abs()).max(y.abs()));
    let scale = 0.45 * SIZE / extent;
    let norm: Vec<f64> = match values {
        Some(v) => {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            v.iter().map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }).collect()
        }
        None => vec![0.5; proj.len()],
    };
    let mut order: Vec<usize> = (0..proj.len()).collect();
    order.sort_by(|&i, &j| proj[i].2.total_cmp(&proj[j].2).then(i.cmp(&j)));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="8" y="18" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    for i in order {
        let (x, y, _) = proj[i];
        let u = norm[i];
        let (r, g, b) = if values.is_some() { color(u) } else { (70, 90, 140) };
        let radius = if values.is_some() { 1.5 + 3.5 * u } else { 2.5 };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius:.2}" fill="rgb({r},{g},{b})" fill-opacity="0.9"/>"#,
            SIZE / 2.0 + scale * x,
            SIZE / 2.0 - scale * y
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radii(svg: &str) -> Vec<f64> {
        svg.lines()
            .filter_map(|l| l.split("r=\"").nth(1))
            .filter_map(|r| r.split('"').next()?.parse().ok())
            .collect()
    }

    #[test]
    fn saliency_drives_color_and_size() {
        let pts = Array2::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let svg = scatter_svg(&pts, Some(&[0.0, 1.0]), "t");
        let r = radii(&svg);
        assert_eq!(r.len(), 2);
        assert!(r.contains(&1.5) && r.contains(&5.0));
        assert!(svg.contains("rgb(180,4,38)") && svg.contains("rgb(59,76,192)"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let pts = Array2::from_shape_fn((20, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let v: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        assert_eq!(scatter_svg(&pts, Some(&v), "a"), scatter_svg(&pts, Some(&v), "a"));
    }
}
