//! Triangulation of star-shaped domains with electrode endpoints as boundary
//! vertices, mesh morphing between nearby geometries, and the fixed disk grid
//! that carries the admittivity coefficients.
//!
//! Meshes number their boundary vertices first, in counter-clockwise loop
//! order starting at the first electrode's initial endpoint.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spade::{
    AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation,
};

use crate::error::{Error, Result};
use crate::geometry::{advance_by_arclength, ElectrodeArcs, ElectrodeLayout, StarShape};
use crate::scalar::{wrap_angle, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTag {
    /// Zero-based electrode index.
    Electrode(usize),
    Gap,
}

/// A boundary edge `a → b` (counter-clockwise) with the polar-angle interval
/// it spans and the triangle it belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BoundaryEdge<T = f64> {
    pub a: usize,
    pub b: usize,
    pub tag: EdgeTag,
    /// Polar angles of `a` and `b`; `phi[1] > phi[0]`, not wrapped.
    pub phi: [T; 2],
    pub triangle: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshOptions {
    /// Target edge length; `None` uses perimeter / 200.
    pub h_target: Option<f64>,
    /// Boundary spacing at electrode endpoints as a fraction of `h_target`.
    pub endpoint_refinement: f64,
    /// Growth rate of the boundary spacing away from electrode endpoints.
    pub grading: f64,
    /// Angle bound requested from the refinement (degrees).
    pub refine_angle_deg: f64,
    /// Minimum angle every accepted mesh must satisfy (degrees).
    pub min_angle_deg: f64,
    /// Offset in `[0, 1)` of the gap samples, in units of the local
    /// spacing; 0 places them symmetrically.
    pub gap_phase: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            h_target: None,
            endpoint_refinement: 0.3,
            grading: 0.3,
            refine_angle_deg: 25.0,
            min_angle_deg: 15.0,
            gap_phase: 0.0,
        }
    }
}

impl MeshOptions {
    pub fn with_h(h: f64) -> Self {
        Self {
            h_target: Some(h),
            ..Self::default()
        }
    }

    pub fn uniform(h: f64) -> Self {
        Self {
            h_target: Some(h),
            endpoint_refinement: 1.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Mesh2D<T = f64> {
    vertices: Vec<[T; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary_edges: Vec<BoundaryEdge<T>>,
    /// Polar angle of each boundary vertex (vertices `0..n_b`), increasing
    /// along the loop and spanning less than one turn.
    boundary_phi: Vec<T>,
    /// Boundary vertex indices of each electrode's initial and terminal
    /// endpoint.
    electrode_endpoints: Vec<[usize; 2]>,
    h_target: f64,
}

/// Graded arc-length positions strictly inside `(0, len)` for a boundary
/// piece whose two ends are electrode endpoints.
fn graded_positions(len: f64, h: f64, h_end: f64, grading: f64, phase: f64) -> Vec<f64> {
    let h_end = h_end.min(h);
    let d_star = if grading > 0.0 { (h - h_end) / grading } else { 0.0 };
    // G(d) = ∫₀^d dx / size(x), size(x) = min(h, h_end + g x).
    let g_fwd = |d: f64| {
        if d <= d_star {
            (grading * d / h_end).ln_1p() / grading
        } else {
            let head = if d_star > 0.0 { (h / h_end).ln() / grading } else { 0.0 };
            head + (d - d_star) / h
        }
    };
    let g_inv = |v: f64| {
        let head = if d_star > 0.0 { (h / h_end).ln() / grading } else { 0.0 };
        if v <= head {
            h_end * (v * grading).exp_m1() / grading
        } else {
            d_star + (v - head) * h
        }
    };
    let half = 0.5 * len;
    let g_half = g_fwd(half);
    let total = 2.0 * g_half;
    let n = (total - 1e-9).ceil().max(1.0) as usize;
    // A phase adds one sample so that no spacing exceeds the unshifted one.
    let (shift, points) = if phase > 0.0 { (phase - 1.0, n) } else { (0.0, n - 1) };
    (1..=points)
        .map(|k| {
            let v = total * (k as f64 + shift) / n as f64;
            if v <= g_half {
                g_inv(v)
            } else {
                len - g_inv(total - v)
            }
        })
        .collect()
}

/// Raw boundary loop handed to the triangulator.
struct BoundaryLoop<T> {
    phi: Vec<T>,
    points: Vec<[T; 2]>,
    /// Tag of edge `i → i+1`.
    tags: Vec<EdgeTag>,
    endpoints: Vec<[usize; 2]>,
}

fn electrode_loop<T: Real, S: StarShape<T> + ?Sized>(
    shape: &S,
    layout: &ElectrodeLayout<T>,
    arcs: &ElectrodeArcs<T>,
    h: f64,
    opts: &MeshOptions,
) -> BoundaryLoop<T> {
    let m = layout.count();
    let h_end = h * opts.endpoint_refinement;
    let mut phi = Vec::new();
    let mut tags = Vec::new();
    let mut endpoints = Vec::with_capacity(m);
    let piece = |a: T, b: T, len: T, tag: EdgeTag, phase: f64, phi: &mut Vec<T>, tags: &mut Vec<EdgeTag>| {
        let first = phi.len();
        phi.push(a);
        let mut prev_s = 0.0;
        let mut cur = a;
        for s in graded_positions(len.as_f64(), h, h_end, opts.grading, phase) {
            cur = advance_by_arclength(shape, cur, T::lit(s - prev_s));
            prev_s = s;
            if cur >= b {
                break;
            }
            phi.push(cur);
        }
        tags.extend(std::iter::repeat(tag).take(phi.len() - first));
        first
    };
    for i in 0..m {
        let start = arcs.start[i];
        let end = arcs.end[i];
        let next = start + wrap_angle(arcs.start[(i + 1) % m] - start);
        let s_idx = piece(start, end, layout.width(), EdgeTag::Electrode(i), 0.0, &mut phi, &mut tags);
        let gap_len = shape.arclength(end, next);
        let e_idx = piece(end, next, gap_len, EdgeTag::Gap, opts.gap_phase, &mut phi, &mut tags);
        endpoints.push([s_idx, e_idx]);
    }
    // Keep the loop's angles increasing from the first start.
    let base = phi[0];
    let phi: Vec<T> = phi.into_iter().map(|p| base + wrap_angle(p - base)).collect();
    let points = phi.iter().map(|&p| shape.point(p)).collect();
    BoundaryLoop {
        phi,
        points,
        tags,
        endpoints,
    }
}

fn signed_area<T: Real>(p: [T; 2], q: [T; 2], r: [T; 2]) -> T {
    ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) * T::lit(0.5)
}

fn triangulate<T: Real>(
    lp: BoundaryLoop<T>,
    curve: &dyn Fn(T) -> [T; 2],
    h: f64,
    opts: &MeshOptions,
) -> Result<Mesh2D<T>> {
    let nb0 = lp.phi.len();
    if nb0 < 3 {
        return Err(Error::Mesh("boundary loop has fewer than three vertices".into()));
    }
    let mut cdt = ConstrainedDelaunayTriangulation::<Point2<f64>>::new();
    let mut handles = Vec::with_capacity(nb0);
    for p in &lp.points {
        let hnd = cdt
            .insert(Point2::new(p[0].as_f64(), p[1].as_f64()))
            .map_err(|e| Error::Mesh(format!("vertex insertion failed: {e:?}")))?;
        handles.push(hnd);
    }
    if cdt.num_vertices() != nb0 {
        return Err(Error::Mesh("boundary samples coincide".into()));
    }
    for i in 0..nb0 {
        let (a, b) = (handles[i], handles[(i + 1) % nb0]);
        if !cdt.can_add_constraint(a, b) {
            return Err(Error::Mesh("boundary polyline self-intersects".into()));
        }
        cdt.add_constraint(a, b);
    }
    let poly_area: f64 = (0..nb0)
        .map(|i| {
            let p = &lp.points[i];
            let q = &lp.points[(i + 1) % nb0];
            0.5 * (p[0].as_f64() * q[1].as_f64() - q[0].as_f64() * p[1].as_f64())
        })
        .sum();
    let max_area = 3f64.sqrt() / 4.0 * h * h;
    let budget = (40.0 * poly_area.abs() / max_area) as usize + 20 * nb0 + 1000;
    let params = RefinementParameters::<f64>::new()
        .with_angle_limit(AngleLimit::from_deg(opts.refine_angle_deg))
        .with_max_allowed_area(max_area)
        .exclude_outer_faces(true)
        .with_max_additional_vertices(budget);
    let result = cdt.refine(params);
    if !result.refinement_complete {
        return Err(Error::Mesh("refinement exhausted its vertex budget".into()));
    }
    let excluded: std::collections::HashSet<_> = result.excluded_faces.iter().copied().collect();

    let positions: Vec<[f64; 2]> = cdt
        .vertices()
        .map(|v| {
            let p = v.position();
            [p.x, p.y]
        })
        .collect();
    let mut tris: Vec<[usize; 3]> = Vec::new();
    for f in cdt.inner_faces() {
        if excluded.contains(&f.fix()) {
            continue;
        }
        let vs = f.vertices();
        tris.push([vs[0].fix().index(), vs[1].fix().index(), vs[2].fix().index()]);
    }
    tris.sort_unstable();

    // Directed edges seen once are boundary edges, oriented counter-clockwise.
    let mut directed: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * tris.len());
    for (t, tri) in tris.iter().enumerate() {
        for k in 0..3 {
            directed.insert((tri[k], tri[(k + 1) % 3]), t);
        }
    }
    let mut next: HashMap<usize, (usize, usize)> = HashMap::new();
    for (&(a, b), &t) in &directed {
        if !directed.contains_key(&(b, a)) && next.insert(a, (b, t)).is_some() {
            return Err(Error::Mesh("boundary is not a simple loop".into()));
        }
    }
    let mut order = vec![0usize];
    let mut edge_tri = Vec::new();
    loop {
        let cur = *order.last().unwrap();
        let &(nxt, t) = next
            .get(&cur)
            .ok_or_else(|| Error::Mesh("boundary loop is open".into()))?;
        edge_tri.push(t);
        if nxt == 0 {
            break;
        }
        if order.len() > next.len() {
            return Err(Error::Mesh("boundary loop does not close".into()));
        }
        order.push(nxt);
    }
    if order.len() != next.len() {
        return Err(Error::Mesh(format!(
            "boundary splits into several loops ({} of {} edges reached)",
            order.len(),
            next.len()
        )));
    }

    // Parameters of refinement-inserted boundary vertices follow from their
    // chord position; they are then moved onto the curve.
    let nb = order.len();
    let mut phi_b = vec![T::zero(); nb];
    let mut tag_b = vec![EdgeTag::Gap; nb];
    let originals: Vec<usize> = (0..nb).filter(|&i| order[i] < nb0).collect();
    if originals.len() != nb0 {
        return Err(Error::Mesh("boundary sample missing from the loop".into()));
    }
    for (j, &i0) in originals.iter().enumerate() {
        let i1 = originals.get(j + 1).copied().unwrap_or(nb);
        let v0 = order[i0];
        let v1 = order[i1 % nb];
        if v1 != (v0 + 1) % nb0 {
            return Err(Error::Mesh("boundary samples out of order".into()));
        }
        let p0 = lp.phi[v0];
        let p1 = if v1 == 0 { lp.phi[0] + T::TAU() } else { lp.phi[v1] };
        let a = positions[v0];
        let b = positions[v1];
        let chord = (b[0] - a[0]).hypot(b[1] - a[1]);
        for i in i0..i1 {
            let q = positions[order[i]];
            let t = (q[0] - a[0]).hypot(q[1] - a[1]) / chord;
            phi_b[i] = p0 + (p1 - p0) * T::lit(t);
            tag_b[i] = lp.tags[v0];
        }
    }

    let mut new_index = vec![usize::MAX; positions.len()];
    for (i, &v) in order.iter().enumerate() {
        new_index[v] = i;
    }
    let mut vertices: Vec<[T; 2]> = Vec::with_capacity(positions.len());
    for (i, &v) in order.iter().enumerate() {
        vertices.push(if v < nb0 { lp.points[v] } else { curve(phi_b[i]) });
    }
    let mut used = vec![false; positions.len()];
    for tri in &tris {
        for &v in tri {
            used[v] = true;
        }
    }
    for (v, p) in positions.iter().enumerate() {
        if new_index[v] == usize::MAX && used[v] {
            new_index[v] = vertices.len();
            vertices.push([T::lit(p[0]), T::lit(p[1])]);
        }
    }
    let triangles: Vec<[usize; 3]> = tris
        .iter()
        .map(|t| [new_index[t[0]], new_index[t[1]], new_index[t[2]]])
        .collect();
    let boundary_edges = (0..nb)
        .map(|i| {
            let j = (i + 1) % nb;
            let end = if j == 0 { phi_b[0] + T::TAU() } else { phi_b[j] };
            BoundaryEdge {
                a: i,
                b: j,
                tag: tag_b[i],
                phi: [phi_b[i], end],
                triangle: edge_tri[i],
            }
        })
        .collect();
    let electrode_endpoints = lp
        .endpoints
        .iter()
        .map(|&[s, e]| [new_index[s], new_index[e]])
        .collect();
    let mesh = Mesh2D {
        vertices,
        triangles,
        boundary_edges,
        boundary_phi: phi_b,
        electrode_endpoints,
        h_target: h,
    };
    mesh.validate(opts.min_angle_deg)?;
    Ok(mesh)
}

/// Default target edge length for a curve.
pub fn default_h<T: Real, S: StarShape<T> + ?Sized>(shape: &S) -> f64 {
    shape.perimeter().as_f64() / 200.0
}

/// Meshes the domain bounded by `shape` with the electrodes of `layout`.
pub fn build_mesh<T: Real, S: StarShape<T> + ?Sized>(
    shape: &S,
    layout: &ElectrodeLayout<T>,
    opts: &MeshOptions,
) -> Result<Mesh2D<T>> {
    let (min_r, arg, _) = shape.sampled_radius_range(1024);
    if !(min_r > T::zero()) {
        return Err(Error::NonPositiveRadius {
            min_radius: min_r.as_f64(),
            phi: arg.as_f64(),
        });
    }
    let arcs = layout.arcs(shape)?;
    let h = opts.h_target.unwrap_or_else(|| default_h(shape));
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("mesh size must be positive".into()));
    }
    let lp = electrode_loop(shape, layout, &arcs, h, opts);
    triangulate(lp, &|p| shape.point(p), h, opts)
}

impl<T: Real> Mesh2D<T> {
    pub fn vertices(&self) -> &[[T; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[BoundaryEdge<T>] {
        &self.boundary_edges
    }

    pub fn boundary_phi(&self) -> &[T] {
        &self.boundary_phi
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_boundary_vertices(&self) -> usize {
        self.boundary_phi.len()
    }

    pub fn electrode_endpoints(&self) -> &[[usize; 2]] {
        &self.electrode_endpoints
    }

    pub fn num_electrodes(&self) -> usize {
        self.electrode_endpoints.len()
    }

    pub fn h_target(&self) -> f64 {
        self.h_target
    }

    pub fn triangle_points(&self, t: usize) -> [[T; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, t: usize) -> T {
        let [p, q, r] = self.triangle_points(t);
        signed_area(p, q, r)
    }

    pub fn total_area(&self) -> T {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Shoelace area of the boundary polyline.
    pub fn polygon_area(&self) -> T {
        self.boundary_edges
            .iter()
            .map(|e| {
                let p = self.vertices[e.a];
                let q = self.vertices[e.b];
                (p[0] * q[1] - q[0] * p[1]) * T::lit(0.5)
            })
            .sum()
    }

    pub fn edge_length(&self, e: &BoundaryEdge<T>) -> T {
        let p = self.vertices[e.a];
        let q = self.vertices[e.b];
        (q[0] - p[0]).hypot(q[1] - p[1])
    }

    /// Polyline length of every electrode.
    pub fn electrode_lengths(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.num_electrodes()];
        for e in &self.boundary_edges {
            if let EdgeTag::Electrode(m) = e.tag {
                out[m] += self.edge_length(e);
            }
        }
        out
    }

    /// Largest boundary edge length.
    pub fn max_boundary_spacing(&self) -> T {
        self.boundary_edges
            .iter()
            .fold(T::zero(), |m, e| m.max(self.edge_length(e)))
    }

    pub fn min_angle_deg(&self) -> f64 {
        let mut min = f64::INFINITY;
        for t in 0..self.triangles.len() {
            let p = self.triangle_points(t).map(|v| [v[0].as_f64(), v[1].as_f64()]);
            for k in 0..3 {
                let a = p[k];
                let b = p[(k + 1) % 3];
                let c = p[(k + 2) % 3];
                let u = [b[0] - a[0], b[1] - a[1]];
                let v = [c[0] - a[0], c[1] - a[1]];
                let cross = u[0] * v[1] - u[1] * v[0];
                let dot = u[0] * v[0] + u[1] * v[1];
                min = min.min(cross.atan2(dot).to_degrees());
            }
        }
        min
    }

    /// Structural and quality checks: positive orientation, angle bound,
    /// a single counter-clockwise boundary loop.
    pub fn validate(&self, min_angle_deg: f64) -> Result<()> {
        for t in 0..self.triangles.len() {
            if !(self.triangle_area(t) > T::zero()) {
                return Err(Error::Mesh(format!("triangle {t} is not positively oriented")));
            }
        }
        let angle = self.min_angle_deg();
        if angle < min_angle_deg {
            return Err(Error::Mesh(format!(
                "minimum angle {angle:.2} deg below {min_angle_deg} deg"
            )));
        }
        let nb = self.boundary_edges.len();
        for (i, e) in self.boundary_edges.iter().enumerate() {
            if e.a != i || e.b != (i + 1) % nb {
                return Err(Error::Mesh("boundary edges do not form a single loop".into()));
            }
            let tri = self.triangles[e.triangle];
            let has = (0..3).any(|k| tri[k] == e.a && tri[(k + 1) % 3] == e.b);
            if !has {
                return Err(Error::Mesh(format!("boundary edge {i} not on its triangle")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the vertex coordinates (as `f64` bits) and connectivity.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.vertices {
            h.update(v[0].as_f64().to_le_bytes());
            h.update(v[1].as_f64().to_le_bytes());
        }
        for t in &self.triangles {
            for &i in t {
                h.update((i as u64).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Electrode endpoint angles of this mesh in loop order
    /// (start₁, end₁, start₂, …).
    fn knots(&self) -> Vec<T> {
        self.electrode_endpoints
            .iter()
            .flat_map(|&[s, e]| [self.boundary_phi[s], self.boundary_phi[e]])
            .collect()
    }

    /// The same connectivity carried over to a nearby geometry.
    ///
    /// Polar angles are shifted piecewise linearly so that the electrode
    /// endpoints of this mesh land on `to_arcs`; boundary vertices are placed
    /// on `to`, interior vertices keep their relative radius and receive the
    /// angular shift weighted by its square.
    pub fn morph<S1, S2>(&self, from: &S1, to: &S2, to_arcs: &ElectrodeArcs<T>) -> Result<Mesh2D<T>>
    where
        S1: StarShape<T> + ?Sized,
        S2: StarShape<T> + ?Sized,
    {
        let m = self.num_electrodes();
        if to_arcs.start.len() != m {
            return Err(Error::Dimension("electrode count differs".into()));
        }
        let old = self.knots();
        let new: Vec<T> = (0..m).flat_map(|i| [to_arcs.start[i], to_arcs.end[i]]).collect();
        let shift: Vec<T> = old
            .iter()
            .zip(&new)
            .map(|(&o, &n)| {
                let d = wrap_angle(n - o + T::PI()) - T::PI();
                d
            })
            .collect();
        let base = old[0];
        let k = old.len();
        let delta = |phi: T| -> T {
            let rel = base + wrap_angle(phi - base);
            let mut j = old.partition_point(|&o| o <= rel);
            j = j.max(1);
            let (a, da) = (old[j - 1], shift[j - 1]);
            let (b, db) = if j == k {
                (old[0] + T::TAU(), shift[0])
            } else {
                (old[j], shift[j])
            };
            let t = (rel - a) / (b - a);
            da + (db - da) * t
        };
        let nb = self.num_boundary_vertices();
        let mut vertices = Vec::with_capacity(self.vertices.len());
        let mut boundary_phi = Vec::with_capacity(nb);
        for &phi in &self.boundary_phi {
            let p = phi + delta(phi);
            boundary_phi.push(p);
            vertices.push(to.point(p));
        }
        for v in &self.vertices[nb..] {
            let rho = v[0].hypot(v[1]);
            let phi = v[1].atan2(v[0]);
            let s = rho / from.radius(phi);
            let p = phi + s * s * delta(phi);
            let r = s * to.radius(p);
            vertices.push([r * p.cos(), r * p.sin()]);
        }
        let boundary_edges = self
            .boundary_edges
            .iter()
            .map(|e| {
                let end = if e.b == 0 { boundary_phi[0] + T::TAU() } else { boundary_phi[e.b] };
                BoundaryEdge {
                    phi: [boundary_phi[e.a], end],
                    ..e.clone()
                }
            })
            .collect();
        let mesh = Mesh2D {
            vertices,
            triangles: self.triangles.clone(),
            boundary_edges,
            boundary_phi,
            electrode_endpoints: self.electrode_endpoints.clone(),
            h_target: self.h_target,
        };
        for t in 0..mesh.triangles.len() {
            if !(mesh.triangle_area(t) > T::zero()) {
                return Err(Error::Mesh("morph inverted a triangle".into()));
            }
        }
        Ok(mesh)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fixed triangulation of the disk of radius `R_B` carrying the nodal
/// admittivity coefficients.
#[derive(Clone, Debug)]
pub struct ReconGrid<T = f64> {
    mesh: Mesh2D<T>,
    radius: T,
    bins: BinGrid,
}

#[derive(Clone, Debug)]
struct BinGrid {
    lo: f64,
    cell: f64,
    n: usize,
    cells: Vec<Vec<usize>>,
}

/// Row-wise interpolation weights from grid coefficients to mesh vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct Transfer<T = f64> {
    rows: Vec<[(usize, T); 3]>,
    src_len: usize,
}

impl<T: Real> ReconGrid<T> {
    pub fn disk(radius: T, h: f64) -> Result<Self> {
        if !(radius > T::zero()) || !(h > 0.0) {
            return Err(Error::InvalidArgument("disk radius and spacing must be positive".into()));
        }
        let n = ((T::TAU() * radius).as_f64() / h).ceil().max(8.0) as usize;
        let phi: Vec<T> = (0..n).map(|i| T::TAU() * T::of_usize(i) / T::of_usize(n)).collect();
        let points = phi.iter().map(|&p| [radius * p.cos(), radius * p.sin()]).collect();
        let lp = BoundaryLoop {
            phi,
            points,
            tags: vec![EdgeTag::Gap; n],
            endpoints: Vec::new(),
        };
        let curve = |p: T| [radius * p.cos(), radius * p.sin()];
        let opts = MeshOptions::uniform(h);
        let mesh = triangulate(lp, &curve, h, &opts)?;
        let r = radius.as_f64();
        let nbin = ((2.0 * r / h).ceil() as usize).max(1);
        let cell = 2.0 * r / nbin as f64 * (1.0 + 1e-12);
        let mut cells = vec![Vec::new(); nbin * nbin];
        let clamp = |x: f64| (((x + r) / cell).floor().max(0.0) as usize).min(nbin - 1);
        for t in 0..mesh.triangles.len() {
            let p = mesh.triangle_points(t).map(|v| [v[0].as_f64(), v[1].as_f64()]);
            let (x0, x1) = (p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min), p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max));
            let (y0, y1) = (p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min), p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max));
            for i in clamp(x0)..=clamp(x1) {
                for j in clamp(y0)..=clamp(y1) {
                    cells[j * nbin + i].push(t);
                }
            }
        }
        Ok(Self {
            mesh,
            radius,
            bins: BinGrid {
                lo: -r,
                cell,
                n: nbin,
                cells,
            },
        })
    }

    pub fn mesh(&self) -> &Mesh2D<T> {
        &self.mesh
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    /// Number of nodal coefficients `K`.
    pub fn len(&self) -> usize {
        self.mesh.num_vertices()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Radius of the largest origin-centered disk inside the grid polygon.
    pub fn inner_radius(&self) -> T {
        let n = self.mesh.num_boundary_vertices();
        self.radius * (T::PI() / T::of_usize(n)).cos()
    }

    /// Checks that a star-shaped domain lies inside the grid.
    pub fn contains_shape<S: StarShape<T> + ?Sized>(&self, shape: &S) -> Result<()> {
        let (_, _, max) = shape.sampled_radius_range(2048);
        if max >= self.inner_radius() {
            return Err(Error::OutsideGrid {
                x: max.as_f64(),
                y: 0.0,
            });
        }
        Ok(())
    }

    /// Containing triangle and clamped barycentric coordinates of `p`.
    pub fn locate(&self, p: [T; 2]) -> Result<(usize, [T; 3])> {
        let (x, y) = (p[0].as_f64(), p[1].as_f64());
        let b = &self.bins;
        let outside = || Error::OutsideGrid { x, y };
        let i = ((x - b.lo) / b.cell).floor();
        let j = ((y - b.lo) / b.cell).floor();
        if !(i >= 0.0 && j >= 0.0 && (i as usize) < b.n && (j as usize) < b.n) {
            return Err(outside());
        }
        let tol = T::tol(1e-12);
        for &t in &b.cells[j as usize * b.n + i as usize] {
            let [a, bb, c] = self.mesh.triangle_points(t);
            let area = signed_area(a, bb, c);
            let l = [
                signed_area(p, bb, c) / area,
                signed_area(a, p, c) / area,
                signed_area(a, bb, p) / area,
            ];
            if l.iter().all(|&v| v >= -tol) {
                let mut l = l.map(|v| v.max(T::zero()));
                let s = l[0] + l[1] + l[2];
                for v in &mut l {
                    *v /= s;
                }
                return Ok((t, l));
            }
        }
        Err(outside())
    }

    /// Interpolation weights of the grid's piecewise-linear field at every
    /// vertex of `dst`.
    pub fn transfer_to(&self, dst: &Mesh2D<T>) -> Result<Transfer<T>> {
        let rows = dst
            .vertices()
            .iter()
            .map(|&p| {
                let (t, l) = self.locate(p)?;
                let tri = self.mesh.triangles[t];
                Ok([(tri[0], l[0]), (tri[1], l[1]), (tri[2], l[2])])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Transfer {
            rows,
            src_len: self.len(),
        })
    }

    /// Nodal values of `sigma` on `dst`.
    pub fn transfer(&self, sigma: &[T], dst: &Mesh2D<T>) -> Result<Vec<T>> {
        self.transfer_to(dst)?.apply(sigma)
    }
}

impl<T: Real> Transfer<T> {
    pub fn rows(&self) -> &[[(usize, T); 3]] {
        &self.rows
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    pub fn apply(&self, src: &[T]) -> Result<Vec<T>> {
        if src.len() != self.src_len {
            return Err(Error::Dimension(format!(
                "{} coefficients for a grid of {}",
                src.len(),
                self.src_len
            )));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| r.iter().map(|&(k, w)| w * src[k]).sum())
            .collect())
    }

    /// `Tᵀ g`: pulls a per-vertex gradient back to grid coefficients.
    pub fn apply_transpose(&self, g: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.src_len];
        for (r, &gv) in self.rows.iter().zip(g) {
            for &(k, w) in r {
                out[k] += w * gv;
            }
        }
        out
    }
}
