use std::sync::Arc;

use eit_shape::forward::simulate_measurements;
use eit_shape::linalg::{Cholesky, Matrix};
use eit_shape::mesher::{build_mesh, MeshOptions};
use eit_shape::priors::{ElectrodePrior, NoiseModel, Priors, ShapePrior, SmoothnessPrior};
use eit_shape::recon::*;
use eit_shape::sensitivities::ShapeOptions;
use eit_shape::{Boundary, Drives, Grid, Impedances, Layout};
use proptest::prelude::*;

const M: usize = 8;
const WIDTH: f64 = 0.3;

struct Fixture {
    data: Vec<f64>,
    noise: NoiseModel,
    z: Impedances,
    drives: Drives,
    grid: Grid,
}

impl Fixture {
    /// Data of `sigma` on the domain bounded by `b`, simulated on a mesh of
    /// spacing `h`.
    fn new(b: &Boundary, layout: &Layout, h: f64, sigma: impl Fn([f64; 2]) -> f64, z: f64) -> Self {
        let mesh = build_mesh(b, layout, &MeshOptions::with_h(h)).unwrap();
        let s: Vec<f64> = mesh.vertices().iter().map(|&p| sigma(p)).collect();
        let z = Impedances::uniform(M, z).unwrap();
        let drives = Drives::adjacent_to_first(M);
        let data = simulate_measurements(&mesh, &s, &z, &drives).unwrap();
        let noise = NoiseModel::from_clean(&data, M, 0.01, 0.001).unwrap();
        Self {
            data,
            noise,
            z,
            drives,
            grid: Grid::disk(1.6, 0.3).unwrap(),
        }
    }

    fn problem(&self, h: f64) -> Problem<'_> {
        Problem {
            data: &self.data,
            noise: &self.noise,
            z: &self.z,
            drives: &self.drives,
            grid: &self.grid,
            width: WIDTH,
            mesh: MeshOptions::with_h(h),
            shape_options: ShapeOptions::default(),
        }
    }
}

fn disk() -> (Boundary, Layout) {
    (Boundary::circle(1.0, 2).unwrap(), Layout::equispaced(M, WIDTH).unwrap())
}

fn fixed(b: &Boundary, layout: &Layout) -> Geometry<f64> {
    Geometry::Fixed {
        shape: Arc::new(b.clone()),
        layout: layout.clone(),
    }
}

#[test]
fn identity_example_steps() {
    let n = 4;
    let j = Matrix::identity(n);
    let x = [0.3, -1.0, 2.0, 0.5];
    let truth = [0.0, 1.0, 1.5, 0.5];
    let r: Vec<f64> = x.iter().zip(&truth).map(|(a, b)| a - b).collect();
    // Prior centered at the truth: the offset equals the residual.
    let step = gauss_newton_direction(&j, &r, &r, 0.0).unwrap();
    for (s, ri) in step.iter().zip(&r) {
        assert!((s + ri).abs() < 1e-14);
    }
    // Prior centered at the current point: zero offset.
    let step = gauss_newton_direction(&j, &r, &[0.0; 4], 0.0).unwrap();
    for (s, ri) in step.iter().zip(&r) {
        assert!((s + 0.5 * ri).abs() < 1e-14);
    }
}

#[test]
fn stationary_point_gives_no_step() {
    // r = −J w makes the gradient Jᵀ r + w vanish when JᵀJ w = w.
    let j = Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let w = [0.4, -0.2];
    let r = [-0.4, 0.2];
    let step = gauss_newton_direction(&j, &r, &w, 0.0).unwrap();
    assert!(step.iter().map(|s| s * s).sum::<f64>().sqrt() < 1e-8);
}

fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
    (1usize..8, 1usize..8).prop_flat_map(|(m, n)| {
        (
            Just(m),
            Just(n),
            prop::collection::vec(-2.0f64..2.0, m * n),
            prop::collection::vec(-1.0f64..1.0, m),
            prop::collection::vec(-1.0f64..1.0, n),
            0.0f64..5.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn direction_solves_the_normal_equations((m, n, a, r, w, lambda) in matrix_strategy()) {
        let j = Matrix::from_rows(m, n, a).unwrap();
        let d = gauss_newton_direction(&j, &r, &w, lambda).unwrap();
        // Residual of (JᵀJ + (1+λ)I) d + Jᵀr + w.
        let jd = j.matvec(&d);
        let mut res = j.tr_matvec(&jd);
        let jr = j.tr_matvec(&r);
        for i in 0..n {
            res[i] += (1.0 + lambda) * d[i] + jr[i] + w[i];
        }
        let scale = 1.0 + jr.iter().chain(&w).map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(res.iter().all(|v| v.abs() < 1e-10 * scale));
        // Descent direction for ‖r + J d‖² + ‖w + d‖².
        let g: f64 = (0..n).map(|i| (jr[i] + w[i]) * d[i]).sum();
        prop_assert!(g <= 0.0);
    }
}

#[test]
fn homogeneous_disk_recovers_sigma_one() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.1, |_| 1.0, 1.0);
    let p = f.problem(0.1);
    let model = ForwardModel::new(&p, fixed(&b, &layout)).unwrap();
    let s = fit_sigma_star(&model, &[], &[], &SolverSettings::default()).unwrap();
    assert!((s - 1.0).abs() < 0.05, "{s}");
    // Same geometry and mesh: essentially exact.
    assert!((s - 1.0).abs() < 2e-3, "{s}");

    // Misfit is monotone on either side of the minimizer.
    let misfit = |x: f64| model.evaluate(SigmaField::Constant(x), &[], &[], false).unwrap().misfit;
    let grid: Vec<f64> = (0..21).map(|k| 10f64.powf(-1.0 + 0.1 * k as f64)).collect();
    let vals: Vec<f64> = grid.iter().map(|&x| misfit(x)).collect();
    let kmin = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
    assert_eq!(kmin, 10);
    assert!(vals[..=kmin].windows(2).all(|w| w[0] > w[1]));
    assert!(vals[kmin..].windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn free_iterates_must_stay_inside_the_grid() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.15, |_| 1.0, 1.0);
    let p = f.problem(0.15);
    let theta = layout.angles().to_vec();
    let big = [1.7, 0.0, 0.0];
    let model = ForwardModel::new(&p, Geometry::Free).unwrap();
    assert!(model.evaluate(SigmaField::Constant(1.0), &[1.0, 0.0, 0.0], &theta, false).is_ok());
    assert!(model.evaluate(SigmaField::Constant(1.0), &big, &theta, false).is_err());
    let model = ForwardModel::new(&p, Geometry::Free).unwrap().unconfined();
    assert!(model.evaluate(SigmaField::Constant(1.0), &big, &theta, false).is_ok());
}

#[test]
fn scaled_data_scales_sigma_star() {
    let (b, layout) = disk();
    let c = 3.0;
    let mut f = Fixture::new(&b, &layout, 0.1, |_| 1.0, 1.0);
    f.data.iter_mut().for_each(|v| *v /= c);
    f.noise = NoiseModel::from_clean(&f.data, M, 0.01, 0.001).unwrap();
    f.z = Impedances::uniform(M, 1.0 / c).unwrap();
    let p = f.problem(0.1);
    let model = ForwardModel::new(&p, fixed(&b, &layout)).unwrap();
    let s = fit_sigma_star(&model, &[], &[], &SolverSettings::default()).unwrap();
    assert!((s / c - 1.0).abs() < 5e-3, "{s}");
}

fn geometry_priors(order: usize, alpha: Vec<f64>, theta: Vec<f64>) -> (ShapePrior, ElectrodePrior) {
    (
        ShapePrior::new(order, 0.5, 1.0, alpha).unwrap(),
        ElectrodePrior::new(theta, std::f64::consts::TAU / M as f64).unwrap(),
    )
}

#[test]
fn stage1_stops_at_once_on_data_from_the_initial_geometry() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.15, |_| 1.0, 1.0);
    let p = f.problem(0.15);
    let model = ForwardModel::new(&p, Geometry::Free).unwrap();
    let (sp, ap) = geometry_priors(2, b.coeffs().to_vec(), layout.angles().to_vec());
    let r = stage1(&model, &sp, &ap, 1.0, b.coeffs(), layout.angles(), &SolverSettings::default()).unwrap();
    assert_eq!(r.termination, Termination::Converged);
    assert_eq!(r.iterations, 0);
    assert!(r.history[0] < 1e-12, "{:?}", r.history);
}

#[test]
fn stage1_recovers_a_perturbed_disk() {
    let truth = Boundary::new(vec![1.1, 0.08, -0.05, 0.0, 0.06]).unwrap();
    let true_layout = Layout::new((0..M).map(|k| std::f64::consts::TAU * k as f64 / M as f64 + 0.04 * (k as f64).sin()).collect(), WIDTH).unwrap();
    let f = Fixture::new(&truth, &true_layout, 0.06, |_| 1.0, 1.0);
    let p = f.problem(0.12);
    let model = ForwardModel::new(&p, Geometry::Free).unwrap();
    let (b0, l0) = disk();
    let (sp, ap) = geometry_priors(2, b0.coeffs().to_vec(), l0.angles().to_vec());
    let r = stage1(&model, &sp, &ap, 1.0, b0.coeffs(), l0.angles(), &SolverSettings::default()).unwrap();
    assert!(r.history.windows(2).all(|w| w[1] <= w[0]), "{:?}", r.history);
    assert!(r.iterations >= 2 && r.iterations <= 25, "{}", r.iterations);
    assert!(r.history.last().unwrap() < &(0.05 * r.history[0]), "{:?}", r.history);
    let rec = Boundary::new(r.state.alpha.clone()).unwrap();
    let d = eit_shape::metrics::hausdorff(&truth, &rec, 512);
    assert!(d < 0.05, "Hausdorff {d}");
    for rec in &r.records {
        assert!(!rec.accepted || rec.phi_new < rec.phi);
    }
}

fn smooth_sigma(p: [f64; 2]) -> f64 {
    1.0 + 0.5 * (-((p[0] - 0.3).powi(2) + (p[1] + 0.2).powi(2)) / 0.2).exp()
}

fn sigma_priors(f: &Fixture, mean: f64) -> StagePriors {
    StagePriors {
        sigma: Some(SmoothnessPrior::new(f.grid.mesh().vertices(), mean, 0.5 * mean, 0.6, 1e-4).unwrap()),
        shape: None,
        angles: None,
    }
}

#[test]
fn fixed_geometry_step_matches_parameter_space_normal_equations() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.06, smooth_sigma, 1.0);
    let p = f.problem(0.12);
    let model = ForwardModel::new(&p, fixed(&b, &layout)).unwrap();
    let priors = sigma_priors(&f, 1.0);
    let k = f.grid.len();
    let state = ReconState {
        sigma: (0..k).map(|i| 1.0 + 0.05 * (i as f64).cos()).collect(),
        alpha: Vec::new(),
        theta: Vec::new(),
    };
    let ev = model.evaluate(SigmaField::Grid(&state.sigma), &[], &[], true).unwrap();
    let jac = &ev.jacobians.as_ref().unwrap()[0];
    let weights = f.noise.weights();
    // Whitened route.
    let jw = priors.whitened_jacobian(ev.jacobians.as_ref().unwrap(), &weights).unwrap();
    let r: Vec<f64> = ev.residual.iter().zip(&weights).map(|(a, b)| a * b).collect();
    let w = priors.whiten(&state).unwrap();
    let dw = gauss_newton_direction(&jw, &r, &w, 0.0).unwrap();
    let step = priors.unwhiten_step(&dw, &state).sigma;
    // Reference: (JᵀΓ_η⁻¹J + Γ_σ⁻¹) δ = −(JᵀΓ_η⁻¹ r + Γ_σ⁻¹(σ − σ★)).
    let sp = priors.sigma.as_ref().unwrap();
    let cov = SmoothnessPrior::covariance_matrix(f.grid.mesh().vertices(), 0.5, 0.6, 1e-4);
    let cchol = Cholesky::factor(&cov).unwrap();
    let prec = Matrix::from_fn(k, k, |i, j| {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        cchol.solve(&e)[i]
    });
    let mut jwt = jac.clone();
    jwt.scale_rows(&weights);
    let mut h = jwt.gram_cols();
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] += prec[(i, j)];
        }
    }
    let dev: Vec<f64> = state.sigma.iter().zip(sp.mean()).map(|(a, b)| a - b).collect();
    let pd = prec.matvec(&dev);
    let rhs: Vec<f64> = jwt.tr_matvec(&r).iter().zip(&pd).map(|(a, b)| -(a + b)).collect();
    let reference = Cholesky::factor(&h).unwrap().solve(&rhs);
    let scale = reference.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let diff = step.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-6 * scale, "{diff} vs {scale}");
}

#[test]
fn objective_is_misfit_plus_regularizer() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.08, smooth_sigma, 1.0);
    let p = f.problem(0.12);
    let model = ForwardModel::new(&p, Geometry::Free).unwrap();
    let k = f.grid.len();
    let alpha = vec![1.02, 0.01, 0.0, -0.02, 0.01];
    let theta: Vec<f64> = layout.angles().iter().map(|t| t + 0.01).collect();
    let sigma: Vec<f64> = (0..k).map(|i| 1.1 + 0.02 * (i as f64 * 0.7).sin()).collect();
    let sp = SmoothnessPrior::new(f.grid.mesh().vertices(), 1.0, 0.5, 0.6, 1e-4).unwrap();
    let (shp, ap) = geometry_priors(2, b.coeffs().to_vec(), layout.angles().to_vec());
    let stage = StagePriors {
        sigma: Some(sp.clone()),
        shape: Some(shp.clone()),
        angles: Some(ap.clone()),
    };
    let state = ReconState { sigma: sigma.clone(), alpha: alpha.clone(), theta: theta.clone() };
    let o = try_objective(&model, &stage, &state, None, 1e-3).unwrap();
    let priors = Priors { sigma: sp, shape: shp, angles: ap };
    let reg = priors.regularizer(&sigma, &alpha, &theta).unwrap().value;
    let ev = model.evaluate(SigmaField::Grid(&sigma), &alpha, &theta, false).unwrap();
    let misfit = f.noise.misfit(&ev.residual);
    assert!((o.value - (misfit + reg)).abs() <= 1e-10 * o.value);
    assert!(o.value >= 0.0);

    // Admittivity below the floor is inadmissible.
    let mut low = state.clone();
    low.sigma[3] = 5e-4;
    assert_eq!(objective(&model, &stage, &low, None, 1e-3), f64::INFINITY);
    // So is a self-intersecting boundary.
    let mut bad = state;
    bad.alpha[1] = 2.0;
    assert_eq!(objective(&model, &stage, &bad, None, 1e-3), f64::INFINITY);
}

#[test]
fn admittivity_gradient_matches_differences() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.06, smooth_sigma, 1.0);
    let p = f.problem(0.12);
    let model = ForwardModel::new(&p, fixed(&b, &layout)).unwrap();
    let priors = sigma_priors(&f, 1.0);
    let k = f.grid.len();
    for seed in 0..3u64 {
        let sigma: Vec<f64> = (0..k).map(|i| 1.0 + 0.3 * ((i as f64 + 1.0) * (seed as f64 + 0.37)).sin()).collect();
        let state = ReconState { sigma, alpha: Vec::new(), theta: Vec::new() };
        let g = objective_gradient(&model, &priors, &state, None).unwrap();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Directional derivative along a fixed smooth direction and a few
        // coordinates.
        let dir: Vec<f64> = (0..k).map(|i| ((i * 7 + seed as usize) as f64).cos()).collect();
        let eps = 1e-5;
        let phi = |t: f64| {
            let s = ReconState {
                sigma: state.sigma.iter().zip(&dir).map(|(a, d)| a + t * d).collect(),
                ..state.clone()
            };
            objective(&model, &priors, &s, None, 1e-3)
        };
        let fd = (phi(eps) - phi(-eps)) / (2.0 * eps);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-3 * an.abs().max(1e-3 * gnorm), "seed {seed}: {fd} vs {an}");
    }
}

#[test]
fn fixed_geometry_reconstruction_lowers_phi_and_is_deterministic() {
    let (b, layout) = disk();
    let f = Fixture::new(&b, &layout, 0.06, smooth_sigma, 1.0);
    let p = f.problem(0.12);
    let opts = RunOptions {
        mode: Mode::FixedGeometryGuess,
        alpha0: b.coeffs().to_vec(),
        theta0: layout.angles().to_vec(),
        priors: PriorSettings::default(),
        solver: SolverSettings { stage2_max_iter: 6, ..SolverSettings::default() },
        skip_stage1: false,
        known_sigma: None,
        truth: None,
    };
    let a = reconstruct(&p, &opts).unwrap();
    let s2 = a.stage2.as_ref().unwrap();
    assert!(s2.history.windows(2).all(|w| w[1] <= w[0]));
    assert!(s2.history.last().unwrap() < &s2.history[0]);
    assert!(a.misfit < 0.5 * s2.history[0]);
    let b2 = reconstruct(&p, &opts).unwrap();
    assert_eq!(a.phi, b2.phi);
    assert_eq!(a.state, b2.state);
}
