//! Self-contained SVG figures.
//!
//! Heat maps fill each triangle with the colour of its mean nodal value on a
//! fixed linear scale `[lo, hi]` (values outside are clamped) through five
//! viridis stops: #440154, #3b528b, #21918c, #5ec962, #fde725.

use std::f64::consts::TAU;
use std::fmt::Write;

use eit_shape::geometry::{ElectrodeLayout, StarShape};
use eit_shape::mesher::Mesh2D;

const SIZE: f64 = 480.0;
const STOPS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

pub fn color(value: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((value - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let c: Vec<u8> = (0..3).map(|k| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Maps the square `[−extent, extent]²` onto the canvas, y up.
struct Frame {
    extent: f64,
}

impl Frame {
    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        let s = SIZE / (2.0 * self.extent);
        (SIZE / 2.0 + s * p[0], SIZE / 2.0 - s * p[1])
    }

    fn path(&self, points: &[[f64; 2]], closed: bool) -> String {
        let mut d = String::new();
        for (i, p) in points.iter().enumerate() {
            let (x, y) = self.map(*p);
            let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
        }
        if closed {
            d.push('Z');
        }
        d
    }
}

fn header(out: &mut String, width: f64, height: f64, hash: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(out, "<!-- config {hash} -->");
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
}

fn curve(shape: &dyn StarShape<f64>, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|k| shape.point(TAU * k as f64 / n as f64)).collect()
}

fn electrode_paths(frame: &Frame, shape: &dyn StarShape<f64>, layout: &ElectrodeLayout, color: &str) -> String {
    let mut out = String::new();
    let Ok(arcs) = layout.arcs(shape) else {
        return out;
    };
    for e in 0..layout.count() {
        let (a, b) = (arcs.start[e], arcs.end[e]);
        let pts: Vec<[f64; 2]> = (0..=16).map(|k| shape.point(a + (b - a) * k as f64 / 16.0)).collect();
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"5\" stroke-opacity=\"0.6\"/>",
            frame.path(&pts, false)
        );
    }
    out
}

/// True curve (red solid) against the reconstruction (blue dashed), with
/// electrodes drawn as thick arcs.
pub fn boundary_overlay(
    truth: Option<(&dyn StarShape<f64>, &ElectrodeLayout)>,
    recon: (&dyn StarShape<f64>, &ElectrodeLayout),
    extent: f64,
    hash: &str,
) -> String {
    let frame = Frame { extent };
    let mut out = String::new();
    header(&mut out, SIZE, SIZE, hash);
    if let Some((shape, layout)) = truth {
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>",
            frame.path(&curve(shape, 720), true)
        );
        out.push_str(&electrode_paths(&frame, shape, layout, "red"));
    }
    let _ = writeln!(
        out,
        "<path d=\"{}\" fill=\"none\" stroke=\"blue\" stroke-width=\"2\" stroke-dasharray=\"8 5\"/>",
        frame.path(&curve(recon.0, 720), true)
    );
    out.push_str(&electrode_paths(&frame, recon.0, recon.1, "blue"));
    out.push_str("</svg>\n");
    out
}

/// Per-triangle heat map of a nodal field with a colour bar.
pub fn heat_map(mesh: &Mesh2D, values: &[f64], lo: f64, hi: f64, extent: f64, hash: &str) -> String {
    let frame = Frame { extent };
    let mut out = String::new();
    header(&mut out, SIZE + 90.0, SIZE, hash);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let v = tri.iter().map(|&i| values[i]).sum::<f64>() / 3.0;
        let c = color(v, lo, hi);
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"{c}\" stroke=\"{c}\" stroke-width=\"0.3\"/>",
            frame.path(&mesh.triangle_points(t), true)
        );
    }
    let (x0, y0, h) = (SIZE + 20.0, 40.0, SIZE - 80.0);
    for k in 0..100 {
        let v = hi - (hi - lo) * (k as f64 + 0.5) / 100.0;
        let _ = writeln!(
            out,
            "<rect x=\"{x0}\" y=\"{:.2}\" width=\"20\" height=\"{:.2}\" fill=\"{}\"/>",
            y0 + h * k as f64 / 100.0,
            h / 100.0 + 0.5,
            color(v, lo, hi)
        );
    }
    for (v, y) in [(hi, y0), (lo, y0 + h)] {
        let _ = writeln!(out, "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\" font-family=\"sans-serif\">{v:.3}</text>", x0 + 26.0, y + 4.0);
    }
    out.push_str("</svg>\n");
    out
}

/// `log₁₀ Φ` against the accepted iterate index; stages are separated by a
/// grey line.
pub fn phi_history(stages: &[(u8, Vec<f64>)], hash: &str) -> String {
    let (w, h, pad) = (SIZE * 1.3, SIZE * 0.7, 50.0);
    let mut out = String::new();
    header(&mut out, w, h, hash);
    let all: Vec<f64> = stages.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| *v > 0.0 && v.is_finite()).collect();
    if all.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil().max(lo + 1.0);
    let total: usize = stages.iter().map(|(_, v)| v.len()).sum();
    let sx = (w - 2.0 * pad) / (total.max(2) - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v.max(10f64.powf(lo)).log10() - lo) / (hi - lo);
    let _ = writeln!(
        out,
        "<path d=\"M{pad},{pad} L{pad},{} L{},{}\" fill=\"none\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    for e in lo as i32..=hi as i32 {
        let yy = y(10f64.powi(e));
        let _ = writeln!(out, "<text x=\"4\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\">1e{e}</text>", yy + 4.0);
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    let mut offset = 0;
    for (i, (stage, values)) in stages.iter().enumerate() {
        if offset > 0 {
            let x = pad + sx * (offset as f64 - 0.5);
            let _ = writeln!(out, "<path d=\"M{x:.2},{pad} L{x:.2},{}\" stroke=\"grey\" stroke-dasharray=\"3 3\"/>", h - pad);
        }
        let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(k, v)| (pad + sx * (offset + k) as f64, y(*v))).collect();
        let c = colors[i % colors.len()];
        let mut d = String::new();
        for (k, (px, py)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{px:.2},{py:.2} ", if k == 0 { "M" } else { "L" });
            let _ = writeln!(out, "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{c}\"/>");
        }
        let _ = writeln!(out, "<path d=\"{d}\" fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\"/>");
        if let Some((px, _)) = pts.first() {
            let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\">stage {stage}</text>", px, pad - 10.0);
        }
        offset += values.len();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colour_scale_ends() {
        assert_eq!(color(0.0, 0.0, 1.0), "#440154");
        assert_eq!(color(1.0, 0.0, 1.0), "#fde725");
        assert_eq!(color(5.0, 0.0, 1.0), "#fde725");
        assert_eq!(color(0.5, 0.0, 1.0), "#21918c");
    }
}
