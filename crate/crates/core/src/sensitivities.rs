//! Jacobians of the stacked electrode voltages with respect to the nodal
//! admittivity, the Fourier shape coefficients and the electrode angles.
//!
//! Every block is built from pairings `P_jk = I⁽ᵏ⁾ · U′⁽ʲ⁾` between the
//! solutions of the drive basis. A grounded voltage is the pairing with
//! `e_m − 1/M`, which in the drive basis has the coefficients returned by
//! [`readout_coefficients`], so no solves beyond the forward ones are needed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{barycentric_gradients, edge_basis, edge_basis_d, p2_basis_gradients, CemSystem, DriveBasis, ForwardSolution};
use crate::geometry::{endpoint_sensitivities, shape_basis, split_field, ElectrodeLayout, FourierBoundary, StarShape};
use crate::linalg::Matrix;
use crate::mesher::{build_mesh, EdgeTag, Mesh2D, MeshOptions, Transfer};
use crate::quadrature::{gauss7_unit, graded_log_unit, triangle6};
use crate::scalar::Real;

/// How `∂u/∂ν` is evaluated on electrodes in the shape derivative.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalDerivative {
    /// `(U_m − u) / (z_m σ)` from the contact condition.
    #[default]
    Contact,
    /// Normal component of the element gradient.
    Element,
}

/// Which terms enter the shape Jacobian.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeOptions {
    pub normal_derivative: NormalDerivative,
    /// Include the electrode endpoint terms (motion of the electrode ends
    /// along the boundary).
    pub endpoint_terms: bool,
    /// Boundary edges on each side of an electrode end on which the
    /// tangential derivative uses the logarithmic end expansion; 0 uses the
    /// plain trace derivative everywhere.
    pub singular_edges: usize,
}

impl Default for ShapeOptions {
    fn default() -> Self {
        Self {
            normal_derivative: NormalDerivative::Contact,
            endpoint_terms: true,
            singular_edges: 1,
        }
    }
}

/// `C[m][k]`: coefficients of `e_m − 1/M` in the basis `I⁽ᵏ⁾ = e₁ − e_{k+1}`.
pub fn readout_coefficients<T: Real>(m: usize) -> Matrix<T> {
    let inv = T::one() / T::of_usize(m);
    Matrix::from_fn(m, m - 1, |row, k| if row == k + 1 { inv - T::one() } else { inv })
}

/// Readout coefficients for a general zero-sum drive basis: least-squares
/// representation of `e_m − 1/M` in the span of the drives.
fn readout_for<T: Real>(drives: &DriveBasis<T>) -> Result<Matrix<T>> {
    let m = drives.num_electrodes();
    let nd = drives.num_drives();
    let std = DriveBasis::<T>::adjacent_to_first(m);
    if drives.currents() == std.currents() {
        return Ok(readout_coefficients(m));
    }
    if nd != m - 1 {
        return Err(Error::InvalidArgument("drive basis must have M−1 patterns".into()));
    }
    // Solve D c = e_m − 1/M for the M×(M−1) drive matrix D through its Gram matrix.
    let d = Matrix::from_fn(m, nd, |r, k| drives.currents()[k][r]);
    let gram = d.gram_cols();
    let chol = crate::linalg::Cholesky::factor(&gram)
        .map_err(|_| Error::InvalidArgument("drive basis is not linearly independent".into()))?;
    let inv = T::one() / T::of_usize(m);
    let mut c = Matrix::zeros(m, nd);
    for row in 0..m {
        let target: Vec<T> = (0..m).map(|r| if r == row { T::one() - inv } else { -inv }).collect();
        let coef = chol.solve(&d.tr_matvec(&target));
        c.row_mut(row).copy_from_slice(&coef);
    }
    Ok(c)
}

/// Writes one Jacobian column from a pairing matrix: entry `j·M + m` is
/// `Σ_k P[j][k] C[m][k]`.
fn pairing_to_column<T: Real>(p: &Matrix<T>, c: &Matrix<T>) -> Vec<T> {
    let nd = p.rows();
    let m = c.rows();
    let mut out = Vec::with_capacity(nd * m);
    for j in 0..nd {
        for row in 0..m {
            out.push(p.row(j).iter().zip(c.row(row)).map(|(&a, &b)| a * b).sum());
        }
    }
    out
}

fn columns_to_matrix<T: Real>(cols: Vec<Vec<T>>, rows: usize) -> Matrix<T> {
    let n = cols.len();
    let mut out = Matrix::zeros(rows, n);
    for (j, col) in cols.iter().enumerate() {
        out.set_column(j, col);
    }
    out
}

/// Derivatives with respect to the nodal admittivity on the domain mesh,
/// from `I⁽ᵏ⁾·U′⁽ʲ⁾ = −∫ φ_v ∇u⁽ʲ⁾·∇u⁽ᵏ⁾ dx`.
pub fn jac_sigma_nodal<T: Real>(
    sys: &CemSystem<T>,
    sol: &ForwardSolution<T>,
    drives: &DriveBasis<T>,
) -> Result<Matrix<T>> {
    let mesh = sys.mesh();
    let nd = sol.num_drives();
    let m = sol.num_electrodes();
    let c = readout_for(drives)?;
    let nv = mesh.num_vertices();
    let quad = triangle6::<T>();
    // Pairing matrices (upper triangles) per element corner, summed per vertex.
    let dofs = sys.dofs();
    let locals: Vec<[Vec<T>; 3]> = mesh
        .triangles()
        .par_iter()
        .enumerate()
        .map(|(t, tri)| {
            let p = mesh.triangle_points(t);
            let (g, area) = barycentric_gradients(&p);
            let idx = dofs.local(tri, t);
            let mut local = [vec![T::zero(); nd * nd], vec![T::zero(); nd * nd], vec![T::zero(); nd * nd]];
            let mut grads = vec![[T::zero(); 2]; nd];
            for (l, w) in &quad {
                let gr = p2_basis_gradients(&g, l);
                for (j, gj) in grads.iter_mut().enumerate() {
                    let x = sol.state(j);
                    *gj = [T::zero(); 2];
                    for k in 0..6 {
                        gj[0] += x[idx[k]] * gr[k][0];
                        gj[1] += x[idx[k]] * gr[k][1];
                    }
                }
                for (a, loc) in local.iter_mut().enumerate() {
                    let f = *w * area * l[a];
                    for j in 0..nd {
                        for k in j..nd {
                            loc[j * nd + k] -= f * (grads[j][0] * grads[k][0] + grads[j][1] * grads[k][1]);
                        }
                    }
                }
            }
            local
        })
        .collect();
    let mut pairings = vec![vec![T::zero(); nd * nd]; nv];
    for (tri, local) in mesh.triangles().iter().zip(locals) {
        for (a, loc) in local.into_iter().enumerate() {
            for (s, x) in pairings[tri[a]].iter_mut().zip(loc) {
                *s += x;
            }
        }
    }
    let rows = nd * m;
    let mut out = Matrix::zeros(rows, nv);
    for (v, upper) in pairings.iter().enumerate() {
        let p = Matrix::from_fn(nd, nd, |j, k| if j <= k { upper[j * nd + k] } else { upper[k * nd + j] });
        let col = pairing_to_column(&p, &c);
        for (r, val) in col.into_iter().enumerate() {
            out[(r, v)] = val;
        }
    }
    Ok(out)
}

/// Derivatives with respect to the reconstruction-grid coefficients:
/// the nodal Jacobian composed with the grid-to-mesh interpolation.
pub fn jac_sigma<T: Real>(
    sys: &CemSystem<T>,
    sol: &ForwardSolution<T>,
    drives: &DriveBasis<T>,
    transfer: &Transfer<T>,
) -> Result<Matrix<T>> {
    let nodal = jac_sigma_nodal(sys, sol, drives)?;
    let rows = nodal.rows();
    let k = transfer.src_len();
    let mut out = Matrix::zeros(rows, k);
    for (v, row) in transfer.rows().iter().enumerate() {
        for &(src, w) in row {
            if w == T::zero() {
                continue;
            }
            for r in 0..rows {
                out[(r, src)] += nodal[(r, v)] * w;
            }
        }
    }
    Ok(out)
}

/// Boundary data of all drives at the boundary Gauss points, with the
/// continuous curve's frame at the interpolated polar angle.
pub struct ShapeTraces<T = f64> {
    pub weight: Vec<T>,
    pub phi: Vec<T>,
    pub normal: Vec<[T; 2]>,
    pub curvature: Vec<T>,
    pub sigma: Vec<T>,
    pub electrode: Vec<Option<usize>>,
    /// `[point][drive]` tangential derivative of the trace.
    pub d_tangential: Vec<Vec<T>>,
    /// `[point][drive]` `U_m − u` (zero on gaps).
    pub jump: Vec<Vec<T>>,
    /// `[point][drive]` normal derivative by the chosen route.
    pub d_normal: Vec<Vec<T>>,
    /// `[electrode][drive]` `U_m − u` at the initial and terminal endpoints.
    pub endpoint_jump: Vec<Vec<[T; 2]>>,
    pub num_drives: usize,
}

impl<T: Real> ShapeTraces<T> {
    pub fn new<S: StarShape<T> + ?Sized>(
        sys: &CemSystem<T>,
        sol: &ForwardSolution<T>,
        shape: &S,
        opts: &ShapeOptions,
    ) -> Self {
        let route = opts.normal_derivative;
        let nd = sol.num_drives();
        let mesh = sys.mesh();
        let z = sys.impedances().values();
        let per_drive: Vec<_> = (0..nd).map(|j| sys.boundary_traces(sol.state(j))).collect();
        let np = per_drive.first().map_or(0, Vec::len);
        let mut st = ShapeTraces {
            weight: Vec::with_capacity(np),
            phi: Vec::with_capacity(np),
            normal: Vec::with_capacity(np),
            curvature: Vec::with_capacity(np),
            sigma: Vec::with_capacity(np),
            electrode: Vec::with_capacity(np),
            d_tangential: Vec::with_capacity(np),
            jump: Vec::with_capacity(np),
            d_normal: Vec::with_capacity(np),
            endpoint_jump: Vec::new(),
            num_drives: nd,
        };
        let m = sol.num_electrodes();
        let ends: Vec<Vec<[T; 2]>> = (0..nd).map(|j| sys.endpoint_jumps(sol.state(j))).collect();
        st.endpoint_jump = (0..m).map(|e| (0..nd).map(|j| ends[j][e]).collect()).collect();
        let near = near_endpoint_edges(mesh, opts.singular_edges);
        let gauss = gauss7_unit::<T>();
        let graded = graded_log_unit::<T>();
        for (e, edge) in mesh.boundary_edges().iter().enumerate() {
            let electrode = match edge.tag {
                EdgeTag::Electrode(k) => Some(k),
                EdgeTag::Gap => None,
            };
            let Some(near) = near[e] else {
                for tp in &per_drive[0][3 * e..3 * e + 3] {
                    let frame = shape.frame(tp.phi);
                    st.weight.push(tp.weight);
                    st.phi.push(tp.phi);
                    st.normal.push(frame.normal);
                    st.curvature.push(frame.curvature);
                    st.sigma.push(tp.sigma);
                    st.electrode.push(electrode);
                }
                for q in 3 * e..3 * e + 3 {
                    st.d_tangential.push((0..nd).map(|j| per_drive[j][q].d_tangential).collect());
                    st.jump.push((0..nd).map(|j| per_drive[j][q].jump.unwrap_or(T::zero())).collect());
                    st.d_normal.push(
                        (0..nd)
                            .map(|j| {
                                let tp = &per_drive[j][q];
                                match route {
                                    NormalDerivative::Contact => tp.d_normal_robin.unwrap_or(T::zero()),
                                    NormalDerivative::Element => tp.d_normal,
                                }
                            })
                            .collect(),
                    );
                }
                continue;
            };
            // Near an electrode end the trace behaves like u₀ + A(s ln|s| − s) + smooth,
            // with A fixed by the jump of the boundary flux. The expansion is
            // subtracted before interpolating the nodal trace values.
            let len = mesh.edge_length(edge);
            let (s_a, s_b) = (near.offset_a, near.offset_a + len);
            let sing = |s: T| if s == T::zero() { T::zero() } else { s * s.abs().ln() - s };
            let sig_end = sys.sigma()[near.vertex];
            let coef: Vec<T> = (0..nd)
                .map(|j| {
                    let jump = ends[j][near.electrode][if near.start { 0 } else { 1 }];
                    let flux_jump = (if near.start { jump } else { -jump }) / z[near.electrode];
                    -flux_jump / (T::PI() * sig_end)
                })
                .collect();
            let mid = sys.dofs().boundary_mid[e];
            let nodal: Vec<[T; 3]> = (0..nd)
                .map(|j| {
                    let x = sol.state(j);
                    let a = coef[j];
                    let s_m = (s_a + s_b) * T::lit(0.5);
                    [x[edge.a] - a * sing(s_a), x[mid] - a * sing(s_m), x[edge.b] - a * sing(s_b)]
                })
                .collect();
            // Graded towards the end of the edge that touches the electrode end.
            let rule: Vec<(T, T)> = if s_a == T::zero() {
                graded.to_vec()
            } else if s_b == T::zero() {
                graded.iter().map(|&(t, w)| (T::one() - t, w)).collect()
            } else {
                gauss.to_vec()
            };
            for (t, w) in rule {
                let s = s_a + (s_b - s_a) * t;
                let phi = edge.phi[0] + (edge.phi[1] - edge.phi[0]) * t;
                let frame = shape.frame(phi);
                let sigma = sys.sigma()[edge.a] * (T::one() - t) + sys.sigma()[edge.b] * t;
                st.weight.push(w * len);
                st.phi.push(phi);
                st.normal.push(frame.normal);
                st.curvature.push(frame.curvature);
                st.sigma.push(sigma);
                st.electrode.push(electrode);
                let nb = edge_basis(t);
                let dnb = edge_basis_d(t);
                let mut dt = Vec::with_capacity(nd);
                let mut jumps = Vec::with_capacity(nd);
                let mut dn = Vec::with_capacity(nd);
                for j in 0..nd {
                    let c = &nodal[j];
                    let smooth = c[0] * nb[0] + c[1] * nb[1] + c[2] * nb[2];
                    let d_smooth = (c[0] * dnb[0] + c[1] * dnb[1] + c[2] * dnb[2]) / len;
                    let value = smooth + coef[j] * sing(s);
                    dt.push(d_smooth + coef[j] * s.abs().ln());
                    let jump = match electrode {
                        Some(k) => sol.state(j)[sys.dofs().num_potential + k] - value,
                        None => T::zero(),
                    };
                    jumps.push(jump);
                    dn.push(match (route, electrode) {
                        (NormalDerivative::Contact, Some(k)) => jump / (z[k] * sigma),
                        (NormalDerivative::Contact, None) => T::zero(),
                        (NormalDerivative::Element, _) => {
                            let tri = mesh.triangles()[edge.triangle];
                            let k = (0..3).find(|&k| tri[k] == edge.a).expect("edge on its triangle");
                            let mut l = [T::zero(); 3];
                            l[k] = T::one() - t;
                            l[(k + 1) % 3] = t;
                            let (_, g) = sys.eval_in_triangle(sol.state(j), edge.triangle, &l);
                            let p = mesh.vertices();
                            let (pa, pb) = (p[edge.a], p[edge.b]);
                            (g[0] * (pb[1] - pa[1]) - g[1] * (pb[0] - pa[0])) / len
                        }
                    });
                }
                st.d_tangential.push(dt);
                st.jump.push(jumps);
                st.d_normal.push(dn);
            }
        }
        st
    }

    pub fn num_points(&self) -> usize {
        self.weight.len()
    }
}

/// Electrode end that a boundary edge is attributed to, with the signed
/// arc length (along the polygon, counter-clockwise) of the edge's first
/// vertex measured from that end.
#[derive(Clone, Copy, Debug)]
struct NearEnd<T> {
    vertex: usize,
    electrode: usize,
    start: bool,
    offset_a: T,
    rank: usize,
}

/// Marks the `reach` boundary edges on each side of every electrode end.
fn near_endpoint_edges<T: Real>(mesh: &Mesh2D<T>, reach: usize) -> Vec<Option<NearEnd<T>>> {
    let edges = mesh.boundary_edges();
    let mut out: Vec<Option<NearEnd<T>>> = vec![None; edges.len()];
    if reach == 0 {
        return out;
    }
    let nb = mesh.num_boundary_vertices();
    let mut ahead = vec![usize::MAX; nb];
    let mut behind = vec![usize::MAX; nb];
    for (e, edge) in edges.iter().enumerate() {
        ahead[edge.a] = e;
        behind[edge.b] = e;
    }
    let mut mark = |e: usize, cand: NearEnd<T>| {
        if out[e].map_or(true, |old| old.rank > cand.rank) {
            out[e] = Some(cand);
        }
    };
    for (k, ends) in mesh.electrode_endpoints().iter().enumerate() {
        for (i, &v) in ends.iter().enumerate() {
            let base = NearEnd { vertex: v, electrode: k, start: i == 0, offset_a: T::zero(), rank: 0 };
            let mut e = ahead[v];
            let mut dist = T::zero();
            for rank in 0..reach {
                mark(e, NearEnd { offset_a: dist, rank, ..base });
                dist += mesh.edge_length(&edges[e]);
                e = ahead[edges[e].b];
            }
            let mut e = behind[v];
            let mut dist = T::zero();
            for rank in 0..reach {
                dist += mesh.edge_length(&edges[e]);
                mark(e, NearEnd { offset_a: -dist, rank, ..base });
                e = behind[edges[e].a];
            }
        }
    }
    out
}

/// Pairing matrix of the boundary and electrode integrals for a normal
/// velocity `h_ν` given at every boundary Gauss point.
///
/// `P_jk = −∫ h_ν σ ∂τu⁽ʲ⁾ ∂τu⁽ᵏ⁾ − Σ_m (1/z_m) ∫_{E_m} h_ν (κ(U_m−u⁽ʲ⁾) − ∂νu⁽ʲ⁾)(U_m−u⁽ᵏ⁾)`.
pub fn surface_pairing<T: Real>(traces: &ShapeTraces<T>, z: &[T], h_normal: &[T]) -> Matrix<T> {
    let nd = traces.num_drives;
    let mut p = Matrix::zeros(nd, nd);
    for q in 0..traces.num_points() {
        let hn = h_normal[q];
        if hn == T::zero() {
            continue;
        }
        let w = traces.weight[q] * hn;
        let a = w * traces.sigma[q];
        let dt = &traces.d_tangential[q];
        let electrode = traces.electrode[q];
        let (jump, dn) = (&traces.jump[q], &traces.d_normal[q]);
        let (kappa, zi) = match electrode {
            Some(m) => (traces.curvature[q], w / z[m]),
            None => (T::zero(), T::zero()),
        };
        for j in 0..nd {
            let left = kappa * jump[j] - dn[j];
            let row = p.row_mut(j);
            for k in 0..nd {
                let mut v = a * dt[j] * dt[k];
                if electrode.is_some() {
                    v += zi * left * jump[k];
                }
                row[k] -= v;
            }
        }
    }
    p
}

/// Pairing matrix of the endpoint terms, `−Σ_m (1/z_m)[v_end f_end − v_start f_start]`
/// with `f = (U_m − u⁽ʲ⁾)(U_m − u⁽ᵏ⁾)` and `v` the endpoint velocities
/// along the counter-clockwise tangent.
pub fn endpoint_pairing<T: Real>(traces: &ShapeTraces<T>, z: &[T], v_start: &[T], v_end: &[T]) -> Matrix<T> {
    let nd = traces.num_drives;
    let mut p = Matrix::zeros(nd, nd);
    for (m, ends) in traces.endpoint_jump.iter().enumerate() {
        let (vs, ve) = (v_start[m], v_end[m]);
        if vs == T::zero() && ve == T::zero() {
            continue;
        }
        let zi = T::one() / z[m];
        for j in 0..nd {
            for k in 0..nd {
                let f_end = ends[j][1] * ends[k][1];
                let f_start = ends[j][0] * ends[k][0];
                p[(j, k)] -= zi * (ve * f_end - vs * f_start);
            }
        }
    }
    p
}

/// Derivatives with respect to the Fourier coefficients of the boundary at
/// fixed electrode initial angles and widths.
pub fn jac_shape<T: Real>(
    sys: &CemSystem<T>,
    sol: &ForwardSolution<T>,
    drives: &DriveBasis<T>,
    boundary: &FourierBoundary<T>,
    layout: &ElectrodeLayout<T>,
    opts: ShapeOptions,
) -> Result<Matrix<T>> {
    let traces = ShapeTraces::new(sys, sol, boundary, &opts);
    jac_shape_from_traces(&traces, sys, drives, boundary, layout, opts)
}

pub fn jac_shape_from_traces<T: Real>(
    traces: &ShapeTraces<T>,
    sys: &CemSystem<T>,
    drives: &DriveBasis<T>,
    boundary: &FourierBoundary<T>,
    layout: &ElectrodeLayout<T>,
    opts: ShapeOptions,
) -> Result<Matrix<T>> {
    let c = readout_for(drives)?;
    let z = sys.impedances().values();
    let order = boundary.order();
    let num = boundary.num_coeffs();
    let ends = endpoint_sensitivities(boundary, layout)?;
    let m = layout.count();
    let frames_start: Vec<_> = ends.arcs.start.iter().map(|&p| boundary.frame(p)).collect();
    let frames_end: Vec<_> = ends.arcs.end.iter().map(|&p| boundary.frame(p)).collect();
    let cols: Vec<Vec<T>> = (0..num)
        .into_par_iter()
        .map(|l| {
            let hn: Vec<T> = (0..traces.num_points())
                .map(|q| {
                    let h = shape_basis(l, order, traces.phi[q]);
                    h[0] * traces.normal[q][0] + h[1] * traces.normal[q][1]
                })
                .collect();
            let mut p = surface_pairing(traces, z, &hn);
            if opts.endpoint_terms {
                // Tangential velocity of each endpoint: the field itself plus,
                // at the terminal end, the slide that keeps the width fixed.
                let vs: Vec<T> = (0..m)
                    .map(|e| split_field(shape_basis(l, order, ends.arcs.start[e]), &frames_start[e]).tangential)
                    .collect();
                let ve: Vec<T> = (0..m)
                    .map(|e| {
                        let h = split_field(shape_basis(l, order, ends.arcs.end[e]), &frames_end[e]).tangential;
                        h + frames_end[e].speed * ends.d_end_d_coeff[e][l]
                    })
                    .collect();
                let pe = endpoint_pairing(traces, z, &vs, &ve);
                for j in 0..p.rows() {
                    for k in 0..p.cols() {
                        p[(j, k)] += pe[(j, k)];
                    }
                }
            }
            pairing_to_column(&p, &c)
        })
        .collect();
    Ok(columns_to_matrix(cols, drives.num_drives() * m))
}

/// Derivatives with respect to the electrode initial angles (each electrode
/// slides along the boundary with its width fixed).
pub fn jac_theta<T: Real, S: StarShape<T> + ?Sized>(
    sys: &CemSystem<T>,
    sol: &ForwardSolution<T>,
    drives: &DriveBasis<T>,
    shape: &S,
    layout: &ElectrodeLayout<T>,
) -> Result<Matrix<T>> {
    let traces = ShapeTraces::new(sys, sol, shape, &ShapeOptions::default());
    jac_theta_from_traces(&traces, sys, drives, shape, layout)
}

pub fn jac_theta_from_traces<T: Real, S: StarShape<T> + ?Sized>(
    traces: &ShapeTraces<T>,
    sys: &CemSystem<T>,
    drives: &DriveBasis<T>,
    shape: &S,
    layout: &ElectrodeLayout<T>,
) -> Result<Matrix<T>> {
    let c = readout_for(drives)?;
    let z = sys.impedances().values();
    let m = layout.count();
    let cols: Vec<Vec<T>> = (0..m)
        .map(|e| {
            // Both ends move at the arc-length speed of the initial angle.
            let v = shape.speed(layout.angles()[e]);
            let mut vs = vec![T::zero(); m];
            let mut ve = vec![T::zero(); m];
            vs[e] = v;
            ve[e] = v;
            pairing_to_column(&endpoint_pairing(traces, z, &vs, &ve), &c)
        })
        .collect();
    Ok(columns_to_matrix(cols, drives.num_drives() * m))
}

/// All three Jacobian blocks for the current state.
#[derive(Clone, Debug)]
pub struct JacobianBlocks<T = f64> {
    pub sigma: Matrix<T>,
    pub shape: Matrix<T>,
    pub angles: Matrix<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn jacobian_blocks<T: Real>(
    sys: &CemSystem<T>,
    sol: &ForwardSolution<T>,
    drives: &DriveBasis<T>,
    transfer: &Transfer<T>,
    boundary: &FourierBoundary<T>,
    layout: &ElectrodeLayout<T>,
    opts: ShapeOptions,
) -> Result<JacobianBlocks<T>> {
    let traces = ShapeTraces::new(sys, sol, boundary, &opts);
    Ok(JacobianBlocks {
        sigma: jac_sigma(sys, sol, drives, transfer)?,
        shape: jac_shape_from_traces(&traces, sys, drives, boundary, layout, opts)?,
        angles: jac_theta_from_traces(&traces, sys, drives, boundary, layout)?,
    })
}

/// Parameter block probed by [`fd_column`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    /// Nodal admittivity at a mesh vertex.
    SigmaNodal(usize),
    Shape(usize),
    Angle(usize),
}

/// How the perturbed geometries are meshed in [`fd_column`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Remeshing {
    /// Same connectivity, vertices moved onto the perturbed geometry.
    Morph,
    /// Independent meshes with the base mesh's options.
    Remesh,
}

/// Everything the finite-difference oracle needs to rerun the forward map.
pub struct ForwardSetup<'a, T: Real = f64> {
    pub boundary: &'a FourierBoundary<T>,
    pub layout: &'a ElectrodeLayout<T>,
    pub mesh: &'a Mesh2D<T>,
    pub mesh_options: &'a MeshOptions,
    pub z: &'a crate::forward::ContactImpedances<T>,
    pub drives: &'a DriveBasis<T>,
    /// Nodal admittivity of any mesh of the domain.
    pub sigma: &'a (dyn Fn(&Mesh2D<T>) -> Result<Vec<T>> + Sync),
}

/// Forward map `U(p + step·e)` for one parameter; the base state is
/// reproduced exactly for `step = 0`.
pub fn perturbed_forward<T: Real>(setup: &ForwardSetup<T>, component: Component, step: T, remesh: Remeshing) -> Result<Vec<T>> {
    match component {
        Component::SigmaNodal(v) => {
            let mut s = (setup.sigma)(setup.mesh)?;
            s[v] += step;
            crate::forward::simulate_measurements(setup.mesh, &s, setup.z, setup.drives)
        }
        Component::Shape(l) => {
            let mut coeffs = setup.boundary.coeffs().to_vec();
            coeffs[l] += step;
            let b = FourierBoundary::new(coeffs)?;
            rerun(setup, &b, setup.layout, remesh)
        }
        Component::Angle(e) => {
            let mut angles = setup.layout.angles().to_vec();
            angles[e] += step;
            let layout = setup.layout.with_angles(angles)?;
            rerun(setup, setup.boundary, &layout, remesh)
        }
    }
}

/// Central finite difference `(U(p + ε e) − U(p − ε e)) / 2ε` of the full
/// forward map for one parameter.
pub fn fd_column<T: Real>(setup: &ForwardSetup<T>, component: Component, eps: T, remesh: Remeshing) -> Result<Vec<T>> {
    let plus = perturbed_forward(setup, component, eps, remesh)?;
    let minus = perturbed_forward(setup, component, -eps, remesh)?;
    let two_eps = eps + eps;
    Ok(plus.iter().zip(&minus).map(|(&a, &b)| (a - b) / two_eps).collect())
}

/// Remainders `‖U(p + ε e) − U(p) − ε·column‖` of the linear model along one
/// parameter for each step in `eps`, on morphed meshes.
pub fn taylor_remainders<T: Real>(setup: &ForwardSetup<T>, component: Component, column: &[T], eps: &[T]) -> Result<Vec<T>> {
    let base = perturbed_forward(setup, component, T::zero(), Remeshing::Morph)?;
    eps.iter()
        .map(|&e| {
            let u = perturbed_forward(setup, component, e, Remeshing::Morph)?;
            let r2 = u
                .iter()
                .zip(&base)
                .zip(column)
                .fold(T::zero(), |acc, ((&a, &b), &c)| {
                    let d = a - b - e * c;
                    acc + d * d
                });
            Ok(r2.sqrt())
        })
        .collect()
}

/// Observed convergence orders `log(r_k/r_{k+1}) / log(ε_k/ε_{k+1})` of
/// successive remainders.
pub fn observed_orders<T: Real>(eps: &[T], remainders: &[T]) -> Vec<T> {
    eps.windows(2)
        .zip(remainders.windows(2))
        .map(|(e, r)| (r[0] / r[1]).ln() / (e[0] / e[1]).ln())
        .collect()
}

/// Analytic-versus-oracle comparison of the three Jacobian blocks.
#[derive(Clone, Debug)]
pub struct JacobianCheck<T = f64> {
    /// `‖J − J_fd‖_F / ‖J_fd‖_F` over the probed columns of each block.
    pub sigma: T,
    pub shape: T,
    pub angles: T,
    /// Per-column relative errors of the shape block.
    pub shape_columns: Vec<T>,
    pub angle_columns: Vec<T>,
    /// Remainders and observed orders of the shape block, one entry per
    /// coefficient index, for the steps in [`CheckSettings::taylor_steps`].
    pub taylor: Vec<(usize, Vec<T>, Vec<T>)>,
    pub num_unknowns: usize,
}

#[derive(Clone, Debug)]
pub struct CheckSettings<T = f64> {
    /// Probed vertices for `J_σ` (every `sigma_stride`-th one).
    pub sigma_stride: usize,
    pub fd_step: T,
    pub taylor_steps: Vec<T>,
    pub shape: ShapeOptions,
}

impl<T: Real> Default for CheckSettings<T> {
    fn default() -> Self {
        Self {
            sigma_stride: 1,
            fd_step: T::lit(1e-5),
            taylor_steps: vec![T::lit(1e-2), T::lit(5e-3), T::lit(2.5e-3)],
            shape: ShapeOptions::default(),
        }
    }
}

fn block_error<T: Real>(analytic: &[Vec<T>], oracle: &[Vec<T>]) -> (T, Vec<T>) {
    let mut num = T::zero();
    let mut den = T::zero();
    let cols = analytic
        .iter()
        .zip(oracle)
        .map(|(a, f)| {
            let (n, d) = a.iter().zip(f).fold((T::zero(), T::zero()), |(n, d), (&x, &y)| (n + (x - y) * (x - y), d + y * y));
            num += n;
            den += d;
            (n / d).sqrt()
        })
        .collect();
    ((num / den).sqrt(), cols)
}

/// Compares the analytic Jacobians at `setup` with central differences on
/// morphed meshes and measures the Taylor remainder of the shape block.
pub fn check_jacobians<T: Real>(setup: &ForwardSetup<T>, settings: &CheckSettings<T>) -> Result<JacobianCheck<T>> {
    let sigma = (setup.sigma)(setup.mesh)?;
    let sys = CemSystem::assemble(setup.mesh, &sigma, setup.z)?;
    let sol = sys.solve_all(setup.drives)?;
    let js = jac_sigma_nodal(&sys, &sol, setup.drives)?;
    let ja = jac_shape(&sys, &sol, setup.drives, setup.boundary, setup.layout, settings.shape)?;
    let jt = jac_theta(&sys, &sol, setup.drives, setup.boundary, setup.layout)?;
    let eps = settings.fd_step;

    let vertices: Vec<usize> = (0..setup.mesh.num_vertices()).step_by(settings.sigma_stride.max(1)).collect();
    let fd = |c: Component| fd_column(setup, c, eps, Remeshing::Morph);
    let sigma_fd = vertices.par_iter().map(|&v| fd(Component::SigmaNodal(v))).collect::<Result<Vec<_>>>()?;
    let sigma_an: Vec<Vec<T>> = vertices.iter().map(|&v| js.column(v)).collect();
    let shape_fd = (0..ja.cols()).into_par_iter().map(|l| fd(Component::Shape(l))).collect::<Result<Vec<_>>>()?;
    let shape_an: Vec<Vec<T>> = (0..ja.cols()).map(|l| ja.column(l)).collect();
    let angle_fd = (0..jt.cols()).into_par_iter().map(|e| fd(Component::Angle(e))).collect::<Result<Vec<_>>>()?;
    let angle_an: Vec<Vec<T>> = (0..jt.cols()).map(|e| jt.column(e)).collect();

    let (sigma_err, _) = block_error(&sigma_an, &sigma_fd);
    let (shape_err, shape_columns) = block_error(&shape_an, &shape_fd);
    let (angle_err, angle_columns) = block_error(&angle_an, &angle_fd);
    let taylor = (0..ja.cols())
        .into_par_iter()
        .map(|l| {
            let r = taylor_remainders(setup, Component::Shape(l), &shape_an[l], &settings.taylor_steps)?;
            let o = observed_orders(&settings.taylor_steps, &r);
            Ok((l, r, o))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JacobianCheck {
        sigma: sigma_err,
        shape: shape_err,
        angles: angle_err,
        shape_columns,
        angle_columns,
        taylor,
        num_unknowns: sys.num_unknowns(),
    })
}

fn rerun<T: Real>(
    setup: &ForwardSetup<T>,
    boundary: &FourierBoundary<T>,
    layout: &ElectrodeLayout<T>,
    remesh: Remeshing,
) -> Result<Vec<T>> {
    let mesh = match remesh {
        Remeshing::Morph => setup.mesh.morph(setup.boundary, boundary, &layout.arcs(boundary)?)?,
        Remeshing::Remesh => build_mesh(boundary, layout, setup.mesh_options)?,
    };
    let sigma = (setup.sigma)(&mesh)?;
    crate::forward::simulate_measurements(&mesh, &sigma, setup.z, setup.drives)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn readout_reproduces_grounded_unit_vectors() {
        let m = 5;
        let c = readout_coefficients::<f64>(m);
        let drives = DriveBasis::<f64>::adjacent_to_first(m);
        for row in 0..m {
            let mut v = vec![0.0; m];
            for k in 0..m - 1 {
                for (x, d) in v.iter_mut().zip(&drives.currents()[k]) {
                    *x += c[(row, k)] * d;
                }
            }
            for (r, x) in v.iter().enumerate() {
                let expect = if r == row { 1.0 - 0.2 } else { -0.2 };
                assert!((x - expect).abs() < 1e-15);
            }
        }
        let general = readout_for(&drives).unwrap();
        assert_eq!(general, c);
    }

    #[test]
    fn general_drive_basis_readout() {
        let m = 4;
        let currents = vec![
            vec![1.0, -1.0, 0.0, 0.0],
            vec![0.0, 1.0, -1.0, 0.0],
            vec![0.0, 0.0, 1.0, -1.0],
        ];
        let drives = DriveBasis::new(currents.clone()).unwrap();
        let c = readout_for(&drives).unwrap();
        for row in 0..m {
            for r in 0..m {
                let v: f64 = (0..3).map(|k| c[(row, k)] * currents[k][r]).sum();
                let expect = if r == row { 0.75 } else { -0.25 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }
}
