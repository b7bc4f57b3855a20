//! Star-shaped boundary curves `r(φ)·(cos φ, sin φ)`, their differential
//! geometry, and electrode placement by arc length.
//!
//! Curvature is signed so that convex parts are positive (a circle of
//! radius `r` has `κ = 1/r`), and the normal is the exterior one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::scalar::{wrap_angle, Real};

/// Relative tolerance for arc-length quadrature.
pub const ARC_TOL: f64 = 1e-10;

/// Point, unit tangent, exterior unit normal, parametric speed and signed
/// curvature of a boundary curve at one polar angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryFrame<T = f64> {
    pub point: [T; 2],
    pub tangent: [T; 2],
    pub normal: [T; 2],
    pub speed: T,
    pub curvature: T,
}

/// A closed curve given by a positive radius function of the polar angle.
pub trait StarShape<T: Real>: Send + Sync {
    fn radius(&self, phi: T) -> T;

    fn radius_d1(&self, phi: T) -> T;

    /// Second derivative of the radius; defaults to a central difference
    /// of [`StarShape::radius_d1`].
    fn radius_d2(&self, phi: T) -> T {
        let h = T::epsilon().cbrt() * T::lit(4.0);
        (self.radius_d1(phi + h) - self.radius_d1(phi - h)) / (h + h)
    }

    fn point(&self, phi: T) -> [T; 2] {
        let r = self.radius(phi);
        [r * phi.cos(), r * phi.sin()]
    }

    /// |γ'(φ)| = √(r² + r'²).
    fn speed(&self, phi: T) -> T {
        self.radius(phi).hypot(self.radius_d1(phi))
    }

    fn frame(&self, phi: T) -> BoundaryFrame<T> {
        let r = self.radius(phi);
        let dr = self.radius_d1(phi);
        let ddr = self.radius_d2(phi);
        let (s, c) = phi.sin_cos();
        let speed = r.hypot(dr);
        let tangent = [(dr * c - r * s) / speed, (dr * s + r * c) / speed];
        let two = T::lit(2.0);
        let curvature = (r * r + two * dr * dr - r * ddr) / (speed * speed * speed);
        BoundaryFrame {
            point: [r * c, r * s],
            tangent,
            normal: [tangent[1], -tangent[0]],
            speed,
            curvature,
        }
    }

    /// Arc length between polar angles `a ≤ b ≤ a + 2π`.
    fn arclength(&self, a: T, b: T) -> T {
        integrate(|phi| self.speed(phi), a, b, ARC_TOL)
    }

    fn perimeter(&self) -> T {
        self.arclength(T::zero(), T::TAU())
    }

    /// Polar angle `φ_end ≥ start` such that the arc from `start` to
    /// `φ_end` has length `width`. The result is not wrapped.
    fn terminal_angle(&self, start: T, width: T) -> Result<T> {
        if width <= T::zero() {
            return Err(Error::InvalidArgument("electrode width must be positive".into()));
        }
        let perimeter = self.perimeter();
        if width >= perimeter {
            return Err(Error::InvalidLayout(format!(
                "width {:.4} exceeds perimeter {:.4}",
                width.as_f64(),
                perimeter.as_f64()
            )));
        }
        Ok(advance_by_arclength(self, start, width))
    }

    /// Minimum and maximum radius over `samples` equispaced angles, with the
    /// angle of the minimum.
    fn sampled_radius_range(&self, samples: usize) -> (T, T, T) {
        let mut min = T::infinity();
        let mut arg = T::zero();
        let mut max = T::neg_infinity();
        for i in 0..samples {
            let phi = T::TAU() * T::of_usize(i) / T::of_usize(samples);
            let r = self.radius(phi);
            if r < min {
                min = r;
                arg = phi;
            }
            max = max.max(r);
        }
        (min, arg, max)
    }
}

/// Polar angle reached by travelling arc length `len` counter-clockwise
/// from `start` (Newton on the arc-length integral, bracketed).
pub fn advance_by_arclength<T: Real, S: StarShape<T> + ?Sized>(shape: &S, start: T, len: T) -> T {
    if len <= T::zero() {
        return start;
    }
    let tol = T::tol(1e-13) * len.max(T::one());
    let mut lo = start;
    let mut hi = start + T::TAU();
    let mut phi = start + len / shape.speed(start);
    if phi >= hi {
        phi = (lo + hi) * T::lit(0.5);
    }
    let mut acc = shape.arclength(start, phi);
    for _ in 0..100 {
        let resid = acc - len;
        if resid.abs() <= tol {
            break;
        }
        if resid > T::zero() {
            hi = phi;
        } else {
            lo = phi;
        }
        let mut next = phi - resid / shape.speed(phi);
        if !(next > lo && next < hi) {
            next = (lo + hi) * T::lit(0.5);
        }
        acc = if next > phi {
            acc + shape.arclength(phi, next)
        } else {
            acc - shape.arclength(next, phi)
        };
        phi = next;
    }
    phi
}

/// Boundary `r(φ) = α₀ + Σⱼ (αⱼ cos jφ + α_{j+N} sin jφ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct FourierBoundary<T = f64> {
    order: usize,
    coeffs: Vec<T>,
}

/// The `l`-th Fourier mode: `cos lφ` for `l ≤ N`, `sin (l−N)φ` beyond.
#[inline]
pub fn fourier_mode<T: Real>(l: usize, order: usize, phi: T) -> T {
    if l <= order {
        (T::of_usize(l) * phi).cos()
    } else {
        (T::of_usize(l - order) * phi).sin()
    }
}

/// First derivative of [`fourier_mode`] in `φ`.
#[inline]
pub fn fourier_mode_d1<T: Real>(l: usize, order: usize, phi: T) -> T {
    if l <= order {
        let k = T::of_usize(l);
        -k * (k * phi).sin()
    } else {
        let k = T::of_usize(l - order);
        k * (k * phi).cos()
    }
}

impl<T: Real> FourierBoundary<T> {
    /// Builds a boundary from `2N+1` coefficients and checks that the radius
    /// is positive on `64·(N+1)` sample angles.
    pub fn new(coeffs: Vec<T>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.len() % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "Fourier coefficient vector must have odd length 2N+1, got {}",
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Fourier coefficient".into()));
        }
        let b = Self {
            order: (coeffs.len() - 1) / 2,
            coeffs,
        };
        let (min, arg, _) = b.sampled_radius_range(b.positivity_samples());
        if min <= T::zero() {
            return Err(Error::NonPositiveRadius {
                min_radius: min.as_f64(),
                phi: arg.as_f64(),
            });
        }
        Ok(b)
    }

    /// Circle of radius `r` with `order` (zero) higher modes.
    pub fn circle(r: T, order: usize) -> Result<Self> {
        let mut coeffs = vec![T::zero(); 2 * order + 1];
        coeffs[0] = r;
        Self::new(coeffs)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn num_coeffs(&self) -> usize {
        self.coeffs.len()
    }

    pub fn positivity_samples(&self) -> usize {
        64 * (self.order + 1)
    }

    fn series(&self, phi: T, deriv: u8) -> T {
        let n = self.order;
        let mut acc = if deriv == 0 { self.coeffs[0] } else { T::zero() };
        for j in 1..=n {
            let k = T::of_usize(j);
            let (s, c) = (k * phi).sin_cos();
            let (a, b) = (self.coeffs[j], self.coeffs[j + n]);
            acc += match deriv {
                0 => a * c + b * s,
                1 => k * (b * c - a * s),
                _ => -k * k * (a * c + b * s),
            };
        }
        acc
    }
}

impl<T: Real> StarShape<T> for FourierBoundary<T> {
    fn radius(&self, phi: T) -> T {
        self.series(phi, 0)
    }
    fn radius_d1(&self, phi: T) -> T {
        self.series(phi, 1)
    }
    fn radius_d2(&self, phi: T) -> T {
        self.series(phi, 2)
    }
}

/// `M` electrodes of common arc-length width, each identified by the polar
/// angle where it starts (counter-clockwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ElectrodeLayout<T = f64> {
    angles: Vec<T>,
    width: T,
}

/// Start and (unwrapped) end polar angles of every electrode on a curve.
#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeArcs<T = f64> {
    pub start: Vec<T>,
    pub end: Vec<T>,
}

impl<T: Real> ElectrodeArcs<T> {
    /// Whether the wrapped angle `phi` lies strictly inside electrode `m`.
    pub fn contains(&self, m: usize, phi: T) -> bool {
        let rel = wrap_angle(phi - self.start[m]);
        rel > T::zero() && rel < self.end[m] - self.start[m]
    }

    /// Electrode containing `phi`, if any.
    pub fn electrode_at(&self, phi: T) -> Option<usize> {
        (0..self.start.len()).find(|&m| self.contains(m, phi))
    }
}

impl<T: Real> ElectrodeLayout<T> {
    /// Angles are wrapped to `[0, 2π)` and must be strictly increasing
    /// cyclically (one full turn in total).
    pub fn new(angles: Vec<T>, width: T) -> Result<Self> {
        if angles.len() < 2 {
            return Err(Error::InvalidLayout("at least two electrodes required".into()));
        }
        if !(width > T::zero()) {
            return Err(Error::InvalidLayout("electrode width must be positive".into()));
        }
        let angles: Vec<T> = angles.into_iter().map(wrap_angle).collect();
        let m = angles.len();
        let mut turn = T::zero();
        for i in 0..m {
            let d = wrap_angle(angles[(i + 1) % m] - angles[i]);
            if d <= T::zero() {
                return Err(Error::InvalidLayout(format!("electrodes {i} and {} coincide", (i + 1) % m)));
            }
            turn += d;
        }
        if (turn - T::TAU()).abs() > T::tol(1e-9) * T::lit(10.0) {
            return Err(Error::InvalidLayout("electrode angles are not in counter-clockwise order".into()));
        }
        Ok(Self { angles, width })
    }

    /// `M` electrodes starting at `2π(m−1)/M`.
    pub fn equispaced(count: usize, width: T) -> Result<Self> {
        let angles = (0..count)
            .map(|m| T::TAU() * T::of_usize(m) / T::of_usize(count))
            .collect();
        Self::new(angles, width)
    }

    pub fn count(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn width(&self) -> T {
        self.width
    }

    pub fn with_angles(&self, angles: Vec<T>) -> Result<Self> {
        Self::new(angles, self.width)
    }

    /// Places the electrodes on `shape` and checks that they are pairwise
    /// disjoint.
    pub fn arcs<S: StarShape<T> + ?Sized>(&self, shape: &S) -> Result<ElectrodeArcs<T>> {
        let m = self.count();
        let perimeter = shape.perimeter();
        if self.width * T::of_usize(m) >= perimeter {
            return Err(Error::InvalidLayout(format!(
                "{m} electrodes of width {:.4} do not fit on perimeter {:.4}",
                self.width.as_f64(),
                perimeter.as_f64()
            )));
        }
        let mut end = Vec::with_capacity(m);
        for i in 0..m {
            let start = self.angles[i];
            let stop = shape.terminal_angle(start, self.width)?;
            let next = start + wrap_angle(self.angles[(i + 1) % m] - start);
            if stop >= next {
                return Err(Error::InvalidLayout(format!(
                    "electrode {} (ends at {:.4}) overlaps electrode {} (starts at {:.4})",
                    i,
                    stop.as_f64(),
                    (i + 1) % m,
                    next.as_f64()
                )));
            }
            end.push(stop);
        }
        Ok(ElectrodeArcs {
            start: self.angles.clone(),
            end,
        })
    }
}

/// Derivatives of each electrode's terminal angle with respect to its
/// initial angle and to the Fourier coefficients, at fixed width.
#[derive(Clone, Debug)]
pub struct EndpointSensitivities<T = f64> {
    pub arcs: ElectrodeArcs<T>,
    /// `∂φ_end,m / ∂θ_m`.
    pub d_end_d_start: Vec<T>,
    /// `∂φ_end,m / ∂α_l`, row `m`, column `l`.
    pub d_end_d_coeff: Vec<Vec<T>>,
}

/// Terminal-angle sensitivities from differentiating the fixed-width
/// constraint `∫_{θ}^{φ_end} |γ'| dφ = w`.
pub fn endpoint_sensitivities<T: Real>(
    boundary: &FourierBoundary<T>,
    layout: &ElectrodeLayout<T>,
) -> Result<EndpointSensitivities<T>> {
    let arcs = layout.arcs(boundary)?;
    let n = boundary.order();
    let num = boundary.num_coeffs();
    let mut d_end_d_start = Vec::with_capacity(layout.count());
    let mut d_end_d_coeff = Vec::with_capacity(layout.count());
    for (&start, &end) in arcs.start.iter().zip(&arcs.end) {
        let speed_end = boundary.speed(end);
        d_end_d_start.push(boundary.speed(start) / speed_end);
        let row = (0..num)
            .map(|l| {
                let dspeed = |phi: T| {
                    let r = boundary.radius(phi);
                    let dr = boundary.radius_d1(phi);
                    (r * fourier_mode(l, n, phi) + dr * fourier_mode_d1(l, n, phi)) / r.hypot(dr)
                };
                -integrate(dspeed, start, end, ARC_TOL) / speed_end
            })
            .collect();
        d_end_d_coeff.push(row);
    }
    Ok(EndpointSensitivities {
        arcs,
        d_end_d_start,
        d_end_d_coeff,
    })
}

/// Radial perturbation field of the `l`-th coefficient,
/// `h(φ) = ψ_l(φ)·(cos φ, sin φ)`.
pub fn shape_basis<T: Real>(l: usize, order: usize, phi: T) -> [T; 2] {
    let psi = fourier_mode(l, order, phi);
    let (s, c) = phi.sin_cos();
    [psi * c, psi * s]
}

/// Normal/tangential split of a vector field value at a boundary frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSplit<T = f64> {
    /// `h·ν`.
    pub normal: T,
    /// `h·t`, the signed tangential component.
    pub tangential: T,
    /// `h − (h·ν)ν`.
    pub tangential_vec: [T; 2],
}

pub fn split_field<T: Real>(h: [T; 2], frame: &BoundaryFrame<T>) -> FieldSplit<T> {
    let hn = h[0] * frame.normal[0] + h[1] * frame.normal[1];
    let ht = h[0] * frame.tangent[0] + h[1] * frame.tangent[1];
    FieldSplit {
        normal: hn,
        tangential: ht,
        tangential_vec: [h[0] - hn * frame.normal[0], h[1] - hn * frame.normal[1]],
    }
}
