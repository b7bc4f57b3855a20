//! Complete electrode model on a triangle mesh: quadratic potentials,
//! piecewise-linear admittivity, electrode contact terms and a zero-mean
//! ground on the electrode potentials.
//!
//! Unknowns are ordered as vertex potentials, edge-midpoint potentials, then
//! the `M` electrode potentials.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{SparseCholesky, SparseSym, TripletBuilder};
use crate::mesher::{EdgeTag, Mesh2D};
use crate::quadrature::{gauss3_unit, triangle6};
use crate::scalar::Real;

/// Relative residual every forward solve must reach.
pub const SOLVE_TOL: f64 = 1e-10;

/// Contact impedance of each electrode.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactImpedances<T = f64> {
    z: Vec<T>,
}

impl<T: Real> ContactImpedances<T> {
    pub fn new(z: Vec<T>) -> Result<Self> {
        if let Some(bad) = z.iter().find(|&&v| !(v > T::zero()) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "contact impedance must be positive, got {}",
                bad.as_f64()
            )));
        }
        Ok(Self { z })
    }

    pub fn uniform(count: usize, z: T) -> Result<Self> {
        Self::new(vec![z; count])
    }

    pub fn values(&self) -> &[T] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Zero-sum current patterns.
#[derive(Clone, Debug, PartialEq)]
pub struct DriveBasis<T = f64> {
    currents: Vec<Vec<T>>,
}

impl<T: Real> DriveBasis<T> {
    pub fn new(currents: Vec<Vec<T>>) -> Result<Self> {
        let m = currents.first().map_or(0, Vec::len);
        for (j, c) in currents.iter().enumerate() {
            if c.len() != m {
                return Err(Error::Dimension(format!("drive {j} has {} entries, expected {m}", c.len())));
            }
            let sum: T = c.iter().copied().sum();
            let scale = c.iter().fold(T::zero(), |a, v| a.max(v.abs()));
            if sum.abs() > T::tol(1e-12) * scale.max(T::one()) {
                return Err(Error::InvalidArgument(format!("drive {j} does not sum to zero")));
            }
        }
        Ok(Self { currents })
    }

    /// `I⁽ʲ⁾ = e₁ − e_{j+1}`, `j = 1, …, M−1`.
    pub fn adjacent_to_first(m: usize) -> Self {
        let currents = (1..m)
            .map(|j| {
                let mut c = vec![T::zero(); m];
                c[0] = T::one();
                c[j] = -T::one();
                c
            })
            .collect();
        Self { currents }
    }

    pub fn currents(&self) -> &[Vec<T>] {
        &self.currents
    }

    pub fn num_drives(&self) -> usize {
        self.currents.len()
    }

    pub fn num_electrodes(&self) -> usize {
        self.currents.first().map_or(0, Vec::len)
    }
}

/// Degree-of-freedom map of the quadratic space.
#[derive(Clone, Debug)]
pub struct P2Dofs {
    /// Global index of the midpoint of local edge `k` (vertices `k`, `k+1`).
    pub tri_edges: Vec<[usize; 3]>,
    /// Midpoint index of every boundary edge.
    pub boundary_mid: Vec<usize>,
    /// Potential unknowns (vertices plus edges).
    pub num_potential: usize,
}

impl P2Dofs {
    pub fn new<T: Real>(mesh: &Mesh2D<T>) -> Self {
        let nv = mesh.num_vertices();
        let mut edges: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * mesh.triangles().len());
        let mut tri_edges = Vec::with_capacity(mesh.triangles().len());
        for tri in mesh.triangles() {
            let mut loc = [0; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let next = nv + edges.len();
                loc[k] = *edges.entry(key).or_insert(next);
            }
            tri_edges.push(loc);
        }
        let boundary_mid = mesh
            .boundary_edges()
            .iter()
            .map(|e| edges[&(e.a.min(e.b), e.a.max(e.b))])
            .collect();
        Self {
            tri_edges,
            boundary_mid,
            num_potential: nv + edges.len(),
        }
    }

    /// The six global unknowns of triangle `t`: vertices then midpoints.
    pub fn local(&self, tri: &[usize; 3], t: usize) -> [usize; 6] {
        let e = self.tri_edges[t];
        [tri[0], tri[1], tri[2], e[0], e[1], e[2]]
    }
}

/// Gradients of the barycentric coordinates and the area of a triangle.
pub fn barycentric_gradients<T: Real>(p: &[[T; 2]; 3]) -> ([[T; 2]; 3], T) {
    let two_area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    let mut g = [[T::zero(); 2]; 3];
    for k in 0..3 {
        let a = p[(k + 1) % 3];
        let b = p[(k + 2) % 3];
        g[k] = [(a[1] - b[1]) / two_area, (b[0] - a[0]) / two_area];
    }
    (g, two_area * T::lit(0.5))
}

/// Gradients of the six quadratic basis functions at barycentric point `l`.
pub fn p2_basis_gradients<T: Real>(g: &[[T; 2]; 3], l: &[T; 3]) -> [[T; 2]; 6] {
    let four = T::lit(4.0);
    let mut out = [[T::zero(); 2]; 6];
    for k in 0..3 {
        let s = four * l[k] - T::one();
        out[k] = [s * g[k][0], s * g[k][1]];
        let (a, b) = (k, (k + 1) % 3);
        out[3 + k] = [
            four * (l[a] * g[b][0] + l[b] * g[a][0]),
            four * (l[a] * g[b][1] + l[b] * g[a][1]),
        ];
    }
    out
}

pub fn p2_basis_values<T: Real>(l: &[T; 3]) -> [T; 6] {
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    [
        l[0] * (two * l[0] - T::one()),
        l[1] * (two * l[1] - T::one()),
        l[2] * (two * l[2] - T::one()),
        four * l[0] * l[1],
        four * l[1] * l[2],
        four * l[2] * l[0],
    ]
}

/// Quadratic trace basis on an edge at parameter `t`: start, midpoint, end.
#[inline]
pub(crate) fn edge_basis<T: Real>(t: T) -> [T; 3] {
    let one = T::one();
    let two = T::lit(2.0);
    [(one - t) * (one - two * t), T::lit(4.0) * t * (one - t), t * (two * t - one)]
}

#[inline]
pub(crate) fn edge_basis_d<T: Real>(t: T) -> [T; 3] {
    let four = T::lit(4.0);
    [four * t - T::lit(3.0), four - T::lit(8.0) * t, four * t - T::one()]
}

fn check_inputs<T: Real>(mesh: &Mesh2D<T>, sigma: &[T], z: &ContactImpedances<T>) -> Result<()> {
    if sigma.len() != mesh.num_vertices() {
        return Err(Error::Dimension(format!(
            "{} admittivity values for {} vertices",
            sigma.len(),
            mesh.num_vertices()
        )));
    }
    let min = sigma.iter().fold(T::infinity(), |a, &v| a.min(v));
    if !(min > T::zero()) || sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonPositiveAdmittivity(min.as_f64()));
    }
    if z.len() != mesh.num_electrodes() {
        return Err(Error::Dimension(format!(
            "{} contact impedances for {} electrodes",
            z.len(),
            mesh.num_electrodes()
        )));
    }
    Ok(())
}

/// Matrix of the bilinear form over potentials ⊕ electrode potentials,
/// with `ground` added to every electrode–electrode entry when given.
pub fn assemble_form<T: Real>(
    mesh: &Mesh2D<T>,
    dofs: &P2Dofs,
    sigma: &[T],
    z: &ContactImpedances<T>,
    ground: Option<T>,
) -> Result<SparseSym<T>> {
    check_inputs(mesh, sigma, z)?;
    let m = z.len();
    let nu = dofs.num_potential;
    let n = nu + m;
    let mut tb = TripletBuilder::with_capacity(n, 21 * mesh.triangles().len() + 9 * mesh.boundary_edges().len() + m * m);
    let quad = triangle6::<T>();
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let p = mesh.triangle_points(t);
        let (g, area) = barycentric_gradients(&p);
        let s = [sigma[tri[0]], sigma[tri[1]], sigma[tri[2]]];
        let mut k = [[T::zero(); 6]; 6];
        for (l, w) in &quad {
            let sq = s[0] * l[0] + s[1] * l[1] + s[2] * l[2];
            let gr = p2_basis_gradients(&g, l);
            let f = *w * area * sq;
            for i in 0..6 {
                for j in i..6 {
                    k[i][j] += f * (gr[i][0] * gr[j][0] + gr[i][1] * gr[j][1]);
                }
            }
        }
        let idx = dofs.local(tri, t);
        for i in 0..6 {
            for j in i..6 {
                tb.add(idx[i], idx[j], k[i][j]);
            }
        }
    }
    let gauss = gauss3_unit::<T>();
    for (e, edge) in mesh.boundary_edges().iter().enumerate() {
        let EdgeTag::Electrode(em) = edge.tag else { continue };
        let len = mesh.edge_length(edge);
        let zi = T::one() / z.values()[em];
        let idx = [edge.a, dofs.boundary_mid[e], edge.b];
        let ue = nu + em;
        let mut mass = [[T::zero(); 3]; 3];
        let mut col = [T::zero(); 3];
        for &(t, w) in &gauss {
            let nb = edge_basis(t);
            for i in 0..3 {
                col[i] += w * nb[i];
                for j in 0..3 {
                    mass[i][j] += w * nb[i] * nb[j];
                }
            }
        }
        for i in 0..3 {
            for j in i..3 {
                tb.add(idx[i], idx[j], zi * len * mass[i][j]);
            }
            tb.add(idx[i], ue, -zi * len * col[i]);
        }
        tb.add(ue, ue, zi * len);
    }
    if let Some(c) = ground {
        for a in 0..m {
            for b in a..m {
                tb.add(nu + a, nu + b, c);
            }
        }
    }
    Ok(tb.build())
}

/// Assembled and factored forward problem on one mesh.
pub struct CemSystem<'a, T: Real = f64> {
    mesh: &'a Mesh2D<T>,
    dofs: P2Dofs,
    sigma: Vec<T>,
    z: ContactImpedances<T>,
    matrix: SparseSym<T>,
    factor: SparseCholesky<T>,
}

/// Potentials for every drive.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSolution<T = f64> {
    /// Full unknown vector per drive (potentials then electrode potentials).
    states: Vec<Vec<T>>,
    num_potential: usize,
    num_electrodes: usize,
}

impl<T: Real> ForwardSolution<T> {
    pub fn num_drives(&self) -> usize {
        self.states.len()
    }

    pub fn num_electrodes(&self) -> usize {
        self.num_electrodes
    }

    pub fn state(&self, j: usize) -> &[T] {
        &self.states[j]
    }

    /// Quadratic finite element coefficients of drive `j`.
    pub fn potential(&self, j: usize) -> &[T] {
        &self.states[j][..self.num_potential]
    }

    /// Electrode potentials of drive `j`.
    pub fn voltages(&self, j: usize) -> &[T] {
        &self.states[j][self.num_potential..]
    }

    /// `[U⁽¹⁾; …; U⁽ᴹ⁻¹⁾]`, entry `j·M + m`.
    pub fn measurement_vector(&self) -> Vec<T> {
        (0..self.num_drives()).flat_map(|j| self.voltages(j).iter().copied()).collect()
    }
}

/// Splits a stacked measurement vector into per-drive blocks of length `m`.
pub fn unstack<T: Real>(v: &[T], m: usize) -> Result<Vec<Vec<T>>> {
    if m == 0 || v.len() % m != 0 {
        return Err(Error::Dimension(format!("length {} is not a multiple of {m}", v.len())));
    }
    Ok(v.chunks(m).map(<[T]>::to_vec).collect())
}

/// Boundary data at one Gauss point of a boundary edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint<T = f64> {
    pub edge: usize,
    pub tag: EdgeTag,
    /// Parameter along the edge in `[0, 1]`.
    pub t: T,
    /// Polar angle interpolated linearly along the edge.
    pub phi: T,
    pub point: [T; 2],
    /// Gauss weight times edge length.
    pub weight: T,
    /// Unit tangent and exterior unit normal of the edge.
    pub tangent: [T; 2],
    pub normal: [T; 2],
    pub sigma: T,
    pub value: T,
    /// Derivative of the trace along the edge.
    pub d_tangential: T,
    /// Gradient of the element containing the edge.
    pub gradient: [T; 2],
    /// Element gradient in the normal direction.
    pub d_normal: T,
    /// `U_m − u` on electrodes.
    pub jump: Option<T>,
    /// `(U_m − u) / (z_m σ)` on electrodes, the normal derivative implied
    /// by the contact condition.
    pub d_normal_robin: Option<T>,
}

impl<T: Real> TracePoint<T> {
    /// Tangential part of the current density, `(σ∇u)_τ`.
    pub fn flux_tangential(&self) -> T {
        self.sigma * self.d_tangential
    }

    /// Normal current density `σ ∂u/∂ν`: from the contact condition on
    /// electrodes, zero on the insulated gaps.
    pub fn flux_normal(&self) -> T {
        self.d_normal_robin.map_or(T::zero(), |d| self.sigma * d)
    }

    /// Normal current density from the element gradient.
    pub fn flux_normal_element(&self) -> T {
        self.sigma * self.d_normal
    }
}

impl<'a, T: Real> CemSystem<'a, T> {
    pub fn assemble(mesh: &'a Mesh2D<T>, sigma: &[T], z: &ContactImpedances<T>) -> Result<Self> {
        check_inputs(mesh, sigma, z)?;
        let dofs = P2Dofs::new(mesh);
        // A rank-one term on the electrode potentials fixes the additive
        // constant; because every admissible right-hand side is orthogonal to
        // the constants, it enforces ΣU = 0 exactly.
        let m = z.len();
        let lengths = mesh.electrode_lengths();
        let ground = lengths
            .iter()
            .zip(z.values())
            .map(|(&l, &zi)| l / zi)
            .sum::<T>()
            / T::of_usize(m.max(1));
        let matrix = assemble_form(mesh, &dofs, sigma, z, Some(ground))?;
        let last: Vec<usize> = (dofs.num_potential..dofs.num_potential + m).collect();
        let factor = SparseCholesky::factor(&matrix, &last)?;
        Ok(Self {
            mesh,
            dofs,
            sigma: sigma.to_vec(),
            z: z.clone(),
            matrix,
            factor,
        })
    }

    pub fn mesh(&self) -> &Mesh2D<T> {
        self.mesh
    }

    pub fn dofs(&self) -> &P2Dofs {
        &self.dofs
    }

    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    pub fn impedances(&self) -> &ContactImpedances<T> {
        &self.z
    }

    pub fn matrix(&self) -> &SparseSym<T> {
        &self.matrix
    }

    pub fn num_electrodes(&self) -> usize {
        self.z.len()
    }

    pub fn num_unknowns(&self) -> usize {
        self.matrix.dim()
    }

    /// Solves for electrode currents `current` (must sum to zero).
    pub fn solve(&self, current: &[T]) -> Result<Vec<T>> {
        let m = self.num_electrodes();
        if current.len() != m {
            return Err(Error::Dimension(format!("{} currents for {m} electrodes", current.len())));
        }
        let mut b = vec![T::zero(); self.num_unknowns()];
        b[self.dofs.num_potential..].copy_from_slice(current);
        self.solve_rhs(&b)
    }

    /// Solves with a general right-hand side over all unknowns.
    pub fn solve_rhs(&self, b: &[T]) -> Result<Vec<T>> {
        let (x, rel) = self.factor.solve_refined(&self.matrix, b, T::tol(1e-13));
        if !(rel <= T::tol(SOLVE_TOL)) {
            return Err(Error::Residual(rel.as_f64()));
        }
        Ok(x)
    }

    /// One factorization, all drives solved in parallel.
    pub fn solve_all(&self, drives: &DriveBasis<T>) -> Result<ForwardSolution<T>> {
        if drives.num_electrodes() != self.num_electrodes() {
            return Err(Error::Dimension("drive basis and electrode count differ".into()));
        }
        let states = drives
            .currents()
            .par_iter()
            .map(|c| self.solve(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardSolution {
            states,
            num_potential: self.dofs.num_potential,
            num_electrodes: self.num_electrodes(),
        })
    }

    /// Electrode currents `∫_{E_m} (U_m − u)/z_m ds` recovered from a state.
    pub fn electrode_currents(&self, state: &[T]) -> Vec<T> {
        let m = self.num_electrodes();
        let nu = self.dofs.num_potential;
        let mut out = vec![T::zero(); m];
        let gauss = gauss3_unit::<T>();
        for (e, edge) in self.mesh.boundary_edges().iter().enumerate() {
            let EdgeTag::Electrode(em) = edge.tag else { continue };
            let len = self.mesh.edge_length(edge);
            let c = [state[edge.a], state[self.dofs.boundary_mid[e]], state[edge.b]];
            for &(t, w) in &gauss {
                let nb = edge_basis(t);
                let u = c[0] * nb[0] + c[1] * nb[1] + c[2] * nb[2];
                out[em] += w * len * (state[nu + em] - u) / self.z.values()[em];
            }
        }
        out
    }

    /// Value and gradient of a state inside triangle `t` at barycentric `l`.
    pub fn eval_in_triangle(&self, state: &[T], t: usize, l: &[T; 3]) -> (T, [T; 2]) {
        let tri = self.mesh.triangles()[t];
        let p = self.mesh.triangle_points(t);
        let (g, _) = barycentric_gradients(&p);
        let idx = self.dofs.local(&tri, t);
        let vals = p2_basis_values(l);
        let grads = p2_basis_gradients(&g, l);
        let mut v = T::zero();
        let mut gr = [T::zero(); 2];
        for k in 0..6 {
            let c = state[idx[k]];
            v += c * vals[k];
            gr[0] += c * grads[k][0];
            gr[1] += c * grads[k][1];
        }
        (v, gr)
    }

    /// Traces of a state at three Gauss points per boundary edge.
    pub fn boundary_traces(&self, state: &[T]) -> Vec<TracePoint<T>> {
        let nu = self.dofs.num_potential;
        let gauss = gauss3_unit::<T>();
        let mut out = Vec::with_capacity(3 * self.mesh.boundary_edges().len());
        for (e, edge) in self.mesh.boundary_edges().iter().enumerate() {
            let pa = self.mesh.vertices()[edge.a];
            let pb = self.mesh.vertices()[edge.b];
            let len = mesh_len(pa, pb);
            let tangent = [(pb[0] - pa[0]) / len, (pb[1] - pa[1]) / len];
            let normal = [tangent[1], -tangent[0]];
            let tri = self.mesh.triangles()[edge.triangle];
            let k = (0..3).find(|&k| tri[k] == edge.a).expect("edge on its triangle");
            let c = [state[edge.a], state[self.dofs.boundary_mid[e]], state[edge.b]];
            for &(t, w) in &gauss {
                let nb = edge_basis(t);
                let nd = edge_basis_d(t);
                let value = c[0] * nb[0] + c[1] * nb[1] + c[2] * nb[2];
                let d_tangential = (c[0] * nd[0] + c[1] * nd[1] + c[2] * nd[2]) / len;
                let mut l = [T::zero(); 3];
                l[k] = T::one() - t;
                l[(k + 1) % 3] = t;
                let (_, gradient) = self.eval_in_triangle(state, edge.triangle, &l);
                let sigma = self.sigma[edge.a] * (T::one() - t) + self.sigma[edge.b] * t;
                let (jump, d_normal_robin) = match edge.tag {
                    EdgeTag::Electrode(m) => {
                        let j = state[nu + m] - value;
                        (Some(j), Some(j / (self.z.values()[m] * sigma)))
                    }
                    EdgeTag::Gap => (None, None),
                };
                out.push(TracePoint {
                    edge: e,
                    tag: edge.tag,
                    t,
                    phi: edge.phi[0] + (edge.phi[1] - edge.phi[0]) * t,
                    point: [pa[0] + (pb[0] - pa[0]) * t, pa[1] + (pb[1] - pa[1]) * t],
                    weight: w * len,
                    tangent,
                    normal,
                    sigma,
                    value,
                    d_tangential,
                    gradient,
                    d_normal: gradient[0] * normal[0] + gradient[1] * normal[1],
                    jump,
                    d_normal_robin,
                });
            }
        }
        out
    }

    /// `U_m − u` at the initial and terminal endpoint of every electrode.
    pub fn endpoint_jumps(&self, state: &[T]) -> Vec<[T; 2]> {
        let nu = self.dofs.num_potential;
        self.mesh
            .electrode_endpoints()
            .iter()
            .enumerate()
            .map(|(m, &[s, e])| [state[nu + m] - state[s], state[nu + m] - state[e]])
            .collect()
    }
}

fn mesh_len<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

/// Convenience: assemble, solve every drive and return the measurement
/// vector.
pub fn simulate_measurements<T: Real>(
    mesh: &Mesh2D<T>,
    sigma: &[T],
    z: &ContactImpedances<T>,
    drives: &DriveBasis<T>,
) -> Result<Vec<T>> {
    let sys = CemSystem::assemble(mesh, sigma, z)?;
    Ok(sys.solve_all(drives)?.measurement_vector())
}
