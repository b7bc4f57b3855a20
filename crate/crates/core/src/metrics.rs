//! Reconstruction error measures against a known target.

use std::f64::consts::TAU;

use crate::error::Result;
use crate::geometry::StarShape;
use crate::mesher::{Mesh2D, ReconGrid};
use crate::quadrature::triangle6;

fn polyline<S: StarShape<f64> + ?Sized>(shape: &S, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|k| shape.point(TAU * k as f64 / n as f64)).collect()
}

fn point_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

fn directed(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let n = to.len();
    from.iter()
        .map(|&p| (0..n).map(|i| point_segment(p, to[i], to[(i + 1) % n])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance between two closed curves, each sampled
/// at `samples` polar angles and compared point-to-polyline.
pub fn hausdorff<A, B>(a: &A, b: &B, samples: usize) -> f64
where
    A: StarShape<f64> + ?Sized,
    B: StarShape<f64> + ?Sized,
{
    let pa = polyline(a, samples);
    let pb = polyline(b, samples);
    directed(&pa, &pb).max(directed(&pb, &pa))
}

/// Area of the symmetric difference of two domains star-shaped about the
/// origin, `∫ ½|r_a² − r_b²| dφ` (periodic trapezoid rule).
pub fn area_mismatch<A, B>(a: &A, b: &B, samples: usize) -> f64
where
    A: StarShape<f64> + ?Sized,
    B: StarShape<f64> + ?Sized,
{
    let h = TAU / samples as f64;
    (0..samples)
        .map(|k| {
            let phi = h * k as f64;
            0.5 * (a.radius(phi).powi(2) - b.radius(phi).powi(2)).abs()
        })
        .sum::<f64>()
        * h
}

/// `‖σ_rec − σ_true‖ / ‖σ_true‖` in `L²` over the domain covered by `mesh`,
/// with `σ_rec` the piecewise-linear field of the grid coefficients.
pub fn relative_l2(mesh: &Mesh2D, truth: impl Fn([f64; 2]) -> f64, grid: &ReconGrid, coeffs: &[f64]) -> Result<f64> {
    let quad = triangle6::<f64>();
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..mesh.triangles().len() {
        let p = mesh.triangle_points(t);
        let area = mesh.triangle_area(t);
        for (l, w) in &quad {
            let x = [
                l[0] * p[0][0] + l[1] * p[1][0] + l[2] * p[2][0],
                l[0] * p[0][1] + l[1] * p[1][1] + l[2] * p[2][1],
            ];
            let (tri, bary) = grid.locate(x)?;
            let idx = grid.mesh().triangles()[tri];
            let rec: f64 = (0..3).map(|k| bary[k] * coeffs[idx[k]]).sum();
            let s = truth(x);
            num += w * area * (rec - s).powi(2);
            den += w * area * s * s;
        }
    }
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FourierBoundary;

    #[test]
    fn concentric_circles() {
        let a = FourierBoundary::<f64>::circle(1.0, 2).unwrap();
        let b = FourierBoundary::<f64>::circle(1.2, 0).unwrap();
        assert!((hausdorff(&a, &b, 512) - 0.2).abs() < 1e-3);
        let ring = std::f64::consts::PI * (1.44 - 1.0);
        assert!((area_mismatch(&a, &b, 512) - ring).abs() < 1e-12);
        assert_eq!(hausdorff(&a, &a, 128), 0.0);
    }
}
