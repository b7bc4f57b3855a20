use eit_shape::forward::CemSystem;
use eit_shape::geometry::{endpoint_sensitivities, shape_basis, split_field, StarShape};
use eit_shape::linalg::Matrix;
use eit_shape::mesher::{build_mesh, Mesh2D, MeshOptions};
use eit_shape::sensitivities::*;
use eit_shape::{Boundary, Drives, Grid, Impedances, Layout};

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let n: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    n / b.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Case {
    b: Boundary,
    layout: Layout,
    z: Impedances,
    drives: Drives,
    opts: MeshOptions,
    mesh: Mesh2D,
}

impl Case {
    fn new(b: Boundary, layout: Layout, z: f64, opts: MeshOptions) -> Self {
        let m = layout.count();
        let mesh = build_mesh(&b, &layout, &opts).unwrap();
        Case { b, layout, z: Impedances::uniform(m, z).unwrap(), drives: Drives::adjacent_to_first(m), opts, mesh }
    }

    fn disk(m: usize, h: f64) -> Self {
        Self::new(Boundary::circle(1.0, 2).unwrap(), Layout::equispaced(m, 0.3).unwrap(), 1.0, MeshOptions::with_h(h))
    }

    /// Disk with the boundary spacing at the electrode ends refined to `er·h`.
    fn graded_disk(m: usize, h: f64, er: f64) -> Self {
        let mut opts = MeshOptions::with_h(h);
        opts.endpoint_refinement = er;
        Self::new(Boundary::circle(1.0, 2).unwrap(), Layout::equispaced(m, 0.3).unwrap(), 1.0, opts)
    }

    fn wavy(opts: MeshOptions) -> Self {
        let b = Boundary::new(vec![1.0, 0.1, 0.0, 0.05, -0.08]).unwrap();
        let layout = Layout::new((0..6).map(|k| 0.3 + k as f64).collect(), 0.4).unwrap();
        Self::new(b, layout, 0.5, opts)
    }
}

fn sigma_of(mesh: &Mesh2D) -> eit_shape::Result<Vec<f64>> {
    Ok(mesh.vertices().iter().map(|p| 1.0 + 0.3 * p[0] - 0.2 * p[1] * p[1]).collect())
}

fn unit_sigma(mesh: &Mesh2D) -> eit_shape::Result<Vec<f64>> {
    Ok(vec![1.0; mesh.num_vertices()])
}

fn with_setup<R>(c: &Case, sigma: &(dyn Fn(&Mesh2D) -> eit_shape::Result<Vec<f64>> + Sync), f: impl FnOnce(&ForwardSetup) -> R) -> R {
    let setup = ForwardSetup {
        boundary: &c.b,
        layout: &c.layout,
        mesh: &c.mesh,
        mesh_options: &c.opts,
        z: &c.z,
        drives: &c.drives,
        sigma,
    };
    f(&setup)
}

fn blocks_sum_to_zero(j: &Matrix<f64>, m: usize) {
    let scale = j.max_abs();
    for col in 0..j.cols() {
        let c = j.column(col);
        for block in c.chunks(m) {
            let s: f64 = block.iter().sum();
            assert!(s.abs() <= 1e-10 * scale.max(1e-300), "column {col}: block sum {s}");
        }
    }
}

#[test]
fn sigma_jacobian_matches_finite_differences() {
    let c = Case::new(
        Boundary::new(vec![1.0, 0.05, 0.0, 0.0, 0.05]).unwrap(),
        Layout::equispaced(6, 0.35).unwrap(),
        0.7,
        MeshOptions::uniform(0.25),
    );
    let nv = c.mesh.num_vertices();
    assert!((60..=260).contains(&nv), "{nv} vertices");
    let sigma = sigma_of(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let j = jac_sigma_nodal(&sys, &sol, &c.drives).unwrap();
    blocks_sum_to_zero(&j, 6);
    let mut fd = Matrix::zeros(j.rows(), nv);
    with_setup(&c, &sigma_of, |s| {
        for v in 0..nv {
            fd.set_column(v, &fd_column(s, Component::SigmaNodal(v), 1e-5, Remeshing::Morph).unwrap());
        }
    });
    let err = rel(j.as_slice(), fd.as_slice());
    assert!(err < 1e-3, "{err}");
}

#[test]
fn sigma_jacobian_on_the_grid_chains_the_transfer() {
    let c = Case::disk(6, 0.3);
    let grid = Grid::disk(1.2, 0.35).unwrap();
    let transfer = grid.transfer_to(&c.mesh).unwrap();
    let coeffs: Vec<f64> = grid.mesh().vertices().iter().map(|p| 1.0 + 0.2 * p[0]).collect();
    let sigma = transfer.apply(&coeffs).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let jg = jac_sigma(&sys, &sol, &c.drives, &transfer).unwrap();
    assert_eq!(jg.cols(), grid.len());
    blocks_sum_to_zero(&jg, 6);
    // Nodes whose hat function misses the domain get zero columns.
    let touched: std::collections::HashSet<usize> =
        transfer.rows().iter().flat_map(|r| r.iter().filter(|(_, w)| *w != 0.0).map(|(k, _)| *k)).collect();
    for k in 0..grid.len() {
        if !touched.contains(&k) {
            assert!(jg.column(k).iter().all(|&x| x == 0.0));
        }
    }
    let base = sys.solve_all(&c.drives).unwrap().measurement_vector();
    for k in [0usize, 7, 20] {
        let eps = 1e-5;
        let mut p = coeffs.clone();
        p[k] += eps;
        let s = transfer.apply(&p).unwrap();
        let up = CemSystem::assemble(&c.mesh, &s, &c.z).unwrap().solve_all(&c.drives).unwrap().measurement_vector();
        let fd: Vec<f64> = up.iter().zip(&base).map(|(a, b)| (a - b) / eps).collect();
        let col = jg.column(k);
        assert!(norm(&fd) < 1e-12 || rel(&col, &fd) < 1e-3, "node {k}: {}", rel(&col, &fd));
    }
}

#[test]
fn shape_and_angle_blocks_have_zero_mean_voltages() {
    let c = Case::wavy(MeshOptions::with_h(0.2));
    let sigma = sigma_of(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let ja = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
    let jt = jac_theta(&sys, &sol, &c.drives, &c.b, &c.layout).unwrap();
    assert_eq!((ja.rows(), ja.cols()), (30, 5));
    assert_eq!((jt.rows(), jt.cols()), (30, 6));
    blocks_sum_to_zero(&ja, 6);
    blocks_sum_to_zero(&jt, 6);
}

#[test]
fn dual_pairing_is_symmetric() {
    let c = Case::wavy(MeshOptions::with_h(0.15));
    let sigma = sigma_of(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let traces = ShapeTraces::new(&sys, &sol, &c.b, &ShapeOptions::default());
    for l in 0..c.b.num_coeffs() {
        let hn: Vec<f64> = (0..traces.num_points())
            .map(|q| {
                let h = shape_basis(l, 2, traces.phi[q]);
                h[0] * traces.normal[q][0] + h[1] * traces.normal[q][1]
            })
            .collect();
        let p = surface_pairing(&traces, c.z.values(), &hn);
        assert!(p.is_symmetric(1e-12), "surface pairing, l = {l}");
        let v: Vec<f64> = (0..6).map(|k| 0.3 * k as f64 - 0.7).collect();
        let w: Vec<f64> = (0..6).map(|k| 1.0 - 0.2 * k as f64).collect();
        let e = endpoint_pairing(&traces, c.z.values(), &v, &w);
        assert!(e.is_symmetric(1e-12));
    }
}

#[test]
fn endpoint_terms_are_the_tangential_part() {
    let c = Case::wavy(MeshOptions::with_h(0.2));
    let sigma = sigma_of(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let full = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
    let normal_only =
        jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions { endpoint_terms: false, ..Default::default() })
            .unwrap();
    let traces = ShapeTraces::new(&sys, &sol, &c.b, &ShapeOptions::default());
    let ends = endpoint_sensitivities(&c.b, &c.layout).unwrap();
    let cm = readout_coefficients::<f64>(6);
    for l in 0..c.b.num_coeffs() {
        let tangential = |phi: f64| split_field(shape_basis(l, 2, phi), &c.b.frame(phi)).tangential;
        let vs: Vec<f64> = ends.arcs.start.iter().map(|&p| tangential(p)).collect();
        let ve: Vec<f64> = (0..6)
            .map(|e| {
                let p = ends.arcs.end[e];
                tangential(p) + c.b.speed(p) * ends.d_end_d_coeff[e][l]
            })
            .collect();
        let p = endpoint_pairing(&traces, c.z.values(), &vs, &ve);
        let diff: Vec<f64> = full.column(l).iter().zip(normal_only.column(l)).map(|(a, b)| a - b).collect();
        for j in 0..5 {
            for m in 0..6 {
                let expect: f64 = (0..5).map(|k| p[(j, k)] * cm[(m, k)]).sum();
                let got = diff[j * 6 + m];
                assert!((got - expect).abs() <= 1e-12 * (1.0 + expect.abs()), "l {l} j {j} m {m}: {got} vs {expect}");
            }
        }
    }
}

#[test]
fn inflating_the_disk_acts_equally_on_every_adjacent_drive() {
    let m = 8;
    let c = Case::graded_disk(m, 0.07, 0.002);
    let sigma = unit_sigma(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let ja = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
    let col = ja.column(0);
    let responses: Vec<f64> = (0..m)
        .map(|k| {
            // e_k − e_{k+1} = I⁽ᵏ⁾ − I⁽ᵏ⁻¹⁾, and e_{M−1} − e_0 = −I⁽ᴹ⁻²⁾.
            let mut coef = vec![0.0; m - 1];
            if k + 1 < m {
                coef[k] += 1.0;
                if k > 0 {
                    coef[k - 1] -= 1.0;
                }
            } else {
                coef[m - 2] -= 1.0;
            }
            let mut pattern = vec![0.0; m];
            pattern[k] = 1.0;
            pattern[(k + 1) % m] = -1.0;
            let mut du = vec![0.0; m];
            for (j, &cj) in coef.iter().enumerate() {
                for e in 0..m {
                    du[e] += cj * col[j * m + e];
                }
            }
            pattern.iter().zip(&du).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mean = responses.iter().sum::<f64>() / m as f64;
    for r in &responses {
        assert!((r - mean).abs() <= 1e-3 * mean.abs(), "{responses:?}");
    }
}

#[test]
fn rotating_all_electrodes_on_the_disk_changes_nothing() {
    let m = 8;
    let c = Case::graded_disk(m, 0.1, 0.01);
    let sigma = unit_sigma(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let jt = jac_theta(&sys, &sol, &c.drives, &c.b, &c.layout).unwrap();
    let total = jt.matvec(&vec![1.0; m]);
    assert!(norm(&total) <= 1e-3 * jt.frobenius(), "{} vs {}", norm(&total), jt.frobenius());
}

#[test]
fn angle_jacobian_matches_morphed_differences() {
    let mut opts = MeshOptions::with_h(0.2);
    opts.endpoint_refinement = 0.05;
    let c = Case::wavy(opts);
    let sigma = sigma_of(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let jt = jac_theta(&sys, &sol, &c.drives, &c.b, &c.layout).unwrap();
    with_setup(&c, &sigma_of, |s| {
        for e in 0..6 {
            let fd = fd_column(s, Component::Angle(e), 1e-4, Remeshing::Morph).unwrap();
            let err = rel(&jt.column(e), &fd);
            assert!(err < 1e-2, "electrode {e}: {err}");
        }
    });
}

#[test]
fn moving_an_electrode_towards_the_driver() {
    // Sliding electrode 2 towards electrode 1 under drive e₁ − e₂: the
    // linearised and the directly perturbed voltage change agree in sign.
    let c = Case::disk(6, 0.1);
    let sigma = unit_sigma(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let jt = jac_theta(&sys, &sol, &c.drives, &c.b, &c.layout).unwrap();
    let step = -0.02;
    let mut angles = c.layout.angles().to_vec();
    angles[1] += step;
    let moved = c.layout.with_angles(angles).unwrap();
    let mesh = build_mesh(&c.b, &moved, &c.opts).unwrap();
    let s2 = unit_sigma(&mesh).unwrap();
    let v1 = CemSystem::assemble(&mesh, &s2, &c.z).unwrap().solve_all(&c.drives).unwrap().measurement_vector();
    let v0 = sol.measurement_vector();
    let drop = |v: &[f64]| v[0] - v[1];
    let predicted = step * (jt[(0, 1)] - jt[(1, 1)]);
    let actual = drop(&v1) - drop(&v0);
    assert!(predicted.signum() == actual.signum(), "{predicted} vs {actual}");
    assert!((predicted - actual).abs() < 0.2 * actual.abs());
}

#[test]
fn shape_jacobian_approaches_the_oracle_with_endpoint_grading() {
    let sigma_fn = unit_sigma;
    let errors: Vec<f64> = [0.3, 0.05]
        .iter()
        .map(|&er| {
            let mut opts = MeshOptions::with_h(0.2);
            opts.endpoint_refinement = er;
            let c = Case::wavy(opts);
            let sigma = sigma_fn(&c.mesh).unwrap();
            let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
            let sol = sys.solve_all(&c.drives).unwrap();
            let ja = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
            with_setup(&c, &sigma_fn, |s| {
                (0..c.b.num_coeffs())
                    .map(|l| rel(&ja.column(l), &fd_column(s, Component::Shape(l), 1e-4, Remeshing::Morph).unwrap()))
                    .fold(0.0, f64::max)
            })
        })
        .collect();
    assert!(errors[1] < 0.5 * errors[0], "{errors:?}");
    assert!(errors[1] < 0.1, "{errors:?}");
}

#[test]
fn end_expansion_improves_the_tangential_term() {
    let c = Case::wavy(MeshOptions::with_h(0.15));
    let sigma = unit_sigma(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let plain = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions { singular_edges: 0, ..Default::default() })
        .unwrap();
    let expanded = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
    with_setup(&c, &unit_sigma, |s| {
        let fd = fd_column(s, Component::Shape(0), 1e-4, Remeshing::Morph).unwrap();
        let (e0, e1) = (rel(&plain.column(0), &fd), rel(&expanded.column(0), &fd));
        assert!(e1 < 0.7 * e0, "{e0} -> {e1}");
    });
}

#[test]
fn finite_difference_step_plateau() {
    let c = Case::disk(6, 0.25);
    with_setup(&c, &sigma_of, |s| {
        let cols: Vec<Vec<f64>> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| fd_column(s, Component::SigmaNodal(3), eps, Remeshing::Morph).unwrap())
            .collect();
        assert!(rel(&cols[0], &cols[1]) < 1e-4);
        assert!(rel(&cols[2], &cols[1]) < 1e-4);
        let shape: Vec<Vec<f64>> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| fd_column(s, Component::Shape(1), eps, Remeshing::Morph).unwrap())
            .collect();
        assert!(rel(&shape[0], &shape[1]) < 1e-4);
        assert!(rel(&shape[2], &shape[1]) < 1e-4);
    });
}

#[test]
fn translation_is_invisible() {
    // Shifting a homogeneous disk along x moves the boundary by cos φ
    // radially and the electrode initial angles by −sin θ_m; the measured
    // voltages do not change.
    let mut opts = MeshOptions::with_h(0.15);
    opts.endpoint_refinement = 0.05;
    let c = Case::new(Boundary::circle(1.0, 1).unwrap(), Layout::equispaced(6, 0.3).unwrap(), 1.0, opts);
    let sigma = unit_sigma(&c.mesh).unwrap();
    let sys = CemSystem::assemble(&c.mesh, &sigma, &c.z).unwrap();
    let sol = sys.solve_all(&c.drives).unwrap();
    let ja = jac_shape(&sys, &sol, &c.drives, &c.b, &c.layout, ShapeOptions::default()).unwrap();
    let jt = jac_theta(&sys, &sol, &c.drives, &c.b, &c.layout).unwrap();
    let dtheta: Vec<f64> = c.layout.angles().iter().map(|t| -t.sin()).collect();
    let a1 = ja.column(1);
    let t = jt.matvec(&dtheta);
    let analytic: Vec<f64> = a1.iter().zip(&t).map(|(a, b)| a + b).collect();
    let oracle = with_setup(&c, &unit_sigma, |s| {
        let fa = fd_column(s, Component::Shape(1), 1e-4, Remeshing::Morph).unwrap();
        let mut ft = vec![0.0; fa.len()];
        for (e, d) in dtheta.iter().enumerate() {
            let col = fd_column(s, Component::Angle(e), 1e-4, Remeshing::Morph).unwrap();
            for (x, y) in ft.iter_mut().zip(col) {
                *x += d * y;
            }
        }
        fa.iter().zip(&ft).map(|(a, b)| a + b).collect::<Vec<f64>>()
    });
    let scale = norm(&a1);
    assert!(norm(&oracle) < 1e-3 * scale, "oracle {}", norm(&oracle) / scale);
    assert!(norm(&analytic) < 0.1 * scale, "analytic {}", norm(&analytic) / scale);
}
