//! MAP reconstruction of admittivity, boundary shape and electrode angles.
//!
//! Stage 0 fits a constant admittivity at the initial geometry. Stage 1
//! runs damped Gauss–Newton on the geometry alone, with the prior means
//! following the iterate, and its result becomes the geometry prior mean of
//! stage 2, which minimizes the full functional.
//!
//! All steps are computed in whitened coordinates `w = S⁻¹(x − x★)`, where
//! `S` is the block-diagonal prior square root, so the functional reads
//! `‖Γ_η^{-1/2}(U − V)‖² + ‖w‖²`.

use std::sync::Arc;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{CemSystem, ContactImpedances, DriveBasis};
use crate::geometry::{ElectrodeLayout, FourierBoundary, StarShape};
use crate::linalg::{Cholesky, Matrix};
use crate::mesher::{build_mesh, Mesh2D, MeshOptions, ReconGrid, Transfer};
use crate::priors::{ElectrodePrior, NoiseModel, ShapePrior, SmoothnessPrior};
use crate::scalar::{dot, Real};
use crate::sensitivities::{jac_shape_from_traces, jac_sigma, jac_theta_from_traces, ShapeOptions, ShapeTraces};

/// `(√5 − 1)/2`.
pub const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Result of a golden-section search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoldenSection<T> {
    /// Midpoint of the final interval.
    pub x: T,
    /// Best evaluated point and its value.
    pub best: (T, T),
    pub iterations: usize,
}

/// Number of golden-ratio reductions that bring an interval of length `len`
/// below `tol`.
pub fn golden_iterations(len: f64, tol: f64) -> usize {
    if tol >= len {
        return 0;
    }
    ((tol / len).ln() / GOLDEN.ln()).ceil() as usize
}

/// Minimizes a unimodal `f` on `[lo, hi]`. NaN values count as `+∞`.
pub fn golden_section<T: Real>(mut f: impl FnMut(T) -> T, lo: T, hi: T, tol: T) -> GoldenSection<T> {
    let n = golden_iterations((hi - lo).as_f64(), tol.as_f64());
    let rho = T::lit(GOLDEN);
    let mut eval = |x: T| {
        let v = f(x);
        if v.is_nan() {
            T::infinity()
        } else {
            v
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut best = (T::nan(), T::infinity());
    if n == 0 {
        let x = (a + b) / T::lit(2.0);
        return GoldenSection { x, best: (x, eval(x)), iterations: 0 };
    }
    let mut c = b - rho * (b - a);
    let mut d = a + rho * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    for _ in 0..n {
        for (x, v) in [(c, fc), (d, fd)] {
            if v < best.1 || best.0.is_nan() {
                best = (x, v);
            }
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - rho * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + rho * (b - a);
            fd = eval(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v < best.1 {
            best = (x, v);
        }
    }
    GoldenSection {
        x: (a + b) / T::lit(2.0),
        best,
        iterations: n,
    }
}

/// Solves `(ĴᵀĴ + (1 + λ) I) δ = −(Ĵᵀ r + w)` for whitened Jacobian `Ĵ`,
/// residual `r` and prior offset `w`. With more unknowns than data the
/// system is solved through the data space (Woodbury identity).
pub fn gauss_newton_direction<T: Real>(jac: &Matrix<T>, residual: &[T], offset: &[T], damping: T) -> Result<Vec<T>> {
    let (m, n) = (jac.rows(), jac.cols());
    if residual.len() != m || offset.len() != n {
        return Err(Error::Dimension(format!(
            "{}x{} Jacobian with {} residuals and {} offsets",
            m,
            n,
            residual.len(),
            offset.len()
        )));
    }
    let mu = T::one() + damping;
    if !(mu > T::zero()) {
        return Err(Error::InvalidArgument("damping must exceed -1".into()));
    }
    let mut g = jac.tr_matvec(residual);
    for (gi, wi) in g.iter_mut().zip(offset) {
        *gi += *wi;
    }
    if n <= m {
        let mut h = jac.gram_cols();
        for i in 0..n {
            h[(i, i)] += mu;
        }
        let chol = Cholesky::factor(&h)?;
        Ok(chol.solve(&g).into_iter().map(|v| -v).collect())
    } else {
        let mut a = jac.gram_rows();
        for i in 0..m {
            a[(i, i)] += mu;
        }
        let chol = Cholesky::factor(&a)?;
        let y = chol.solve(&jac.matvec(&g));
        let back = jac.tr_matvec(&y);
        Ok(g.iter().zip(&back).map(|(gi, bi)| -(*gi - *bi) / mu).collect())
    }
}

/// Parameters of one reconstruction state. Inactive blocks are carried along
/// unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ReconState<T = f64> {
    /// Nodal coefficients on the reconstruction grid.
    pub sigma: Vec<T>,
    pub alpha: Vec<T>,
    pub theta: Vec<T>,
}

/// Admittivity used by a forward evaluation.
#[derive(Clone, Copy, Debug)]
pub enum SigmaField<'s, T> {
    Constant(T),
    Grid(&'s [T]),
}

/// Measurement geometry of the forward model.
pub enum Geometry<T: Real> {
    /// Fourier boundary `α` and electrode angles `θ` taken from the state.
    Free,
    /// A fixed curve and layout; the mesh is built once.
    Fixed {
        shape: Arc<dyn StarShape<T>>,
        layout: ElectrodeLayout<T>,
    },
}

/// Everything fixed during a reconstruction.
pub struct Problem<'a, T: Real = f64> {
    pub data: &'a [T],
    pub noise: &'a NoiseModel<T>,
    pub z: &'a ContactImpedances<T>,
    pub drives: &'a DriveBasis<T>,
    pub grid: &'a ReconGrid<T>,
    /// Electrode width (arc length).
    pub width: T,
    /// `None` target spacing means `perimeter / 200` of each geometry.
    pub mesh: MeshOptions,
    pub shape_options: ShapeOptions,
}

/// Forward voltages at a state, optionally with the Jacobian blocks.
#[derive(Clone, Debug)]
pub struct Evaluation<T = f64> {
    pub voltages: Vec<T>,
    /// `U − V`.
    pub residual: Vec<T>,
    pub misfit: T,
    pub mesh: Mesh2D<T>,
    pub sigma_nodal: Vec<T>,
    /// `(J_σ, J_α, J_θ)`; the geometry blocks are empty for fixed geometry
    /// and `J_σ` is empty for a constant admittivity.
    pub jacobians: Option<[Matrix<T>; 3]>,
}

/// Evaluates the forward map for a [`Problem`] and a [`Geometry`].
pub struct ForwardModel<'a, T: Real = f64> {
    problem: &'a Problem<'a, T>,
    geometry: Geometry<T>,
    fixed: Option<(Mesh2D<T>, Transfer<T>)>,
    confined: bool,
}

impl<'a, T: Real> ForwardModel<'a, T> {
    pub fn new(problem: &'a Problem<'a, T>, geometry: Geometry<T>) -> Result<Self> {
        let m = problem.drives.num_electrodes();
        if problem.data.len() != problem.drives.num_drives() * m || problem.noise.len() != problem.data.len() {
            return Err(Error::Dimension(format!(
                "{} data, {} noise variances for {} drives on {} electrodes",
                problem.data.len(),
                problem.noise.len(),
                problem.drives.num_drives(),
                m
            )));
        }
        let fixed = match &geometry {
            Geometry::Free => None,
            Geometry::Fixed { shape, layout } => {
                let mesh = mesh_for(shape.as_ref(), layout, &problem.mesh)?;
                let transfer = problem.grid.transfer_to(&mesh)?;
                Some((mesh, transfer))
            }
        };
        Ok(Self {
            problem,
            geometry,
            fixed,
            confined: true,
        })
    }

    /// Lets constant-admittivity evaluations use domains that leave the
    /// grid; every iterate stays inside it by default.
    pub fn unconfined(mut self) -> Self {
        self.confined = false;
        self
    }

    pub fn problem(&self) -> &Problem<'a, T> {
        self.problem
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed.is_some()
    }

    pub fn evaluate(&self, sigma: SigmaField<T>, alpha: &[T], theta: &[T], jacobians: bool) -> Result<Evaluation<T>> {
        let p = self.problem;
        match &self.geometry {
            Geometry::Fixed { .. } => {
                let (mesh, transfer) = self.fixed.as_ref().expect("fixed mesh");
                self.solve(mesh.clone(), Some(transfer), sigma, jacobians, None)
            }
            Geometry::Free => {
                let boundary = FourierBoundary::new(alpha.to_vec())?;
                let layout = ElectrodeLayout::new(theta.to_vec(), p.width)?;
                if self.confined || matches!(sigma, SigmaField::Grid(_)) {
                    p.grid.contains_shape(&boundary)?;
                }
                let mesh = mesh_for(&boundary, &layout, &p.mesh)?;
                let transfer = match sigma {
                    SigmaField::Grid(_) => Some(p.grid.transfer_to(&mesh)?),
                    SigmaField::Constant(_) => None,
                };
                self.solve(mesh, transfer.as_ref(), sigma, jacobians, Some((&boundary, &layout)))
            }
        }
    }

    fn solve(
        &self,
        mesh: Mesh2D<T>,
        transfer: Option<&Transfer<T>>,
        sigma: SigmaField<T>,
        jacobians: bool,
        free: Option<(&FourierBoundary<T>, &ElectrodeLayout<T>)>,
    ) -> Result<Evaluation<T>> {
        let p = self.problem;
        let sigma_nodal = match sigma {
            SigmaField::Constant(s) => vec![s; mesh.num_vertices()],
            SigmaField::Grid(s) => transfer.expect("grid transfer").apply(s)?,
        };
        let sys = CemSystem::assemble(&mesh, &sigma_nodal, p.z)?;
        let sol = sys.solve_all(p.drives)?;
        let voltages = sol.measurement_vector();
        let residual: Vec<T> = voltages.iter().zip(p.data).map(|(u, v)| *u - *v).collect();
        let misfit = p.noise.misfit(&residual);
        let jacobians = if jacobians {
            let empty = || Matrix::zeros(voltages.len(), 0);
            let sigma_block = match (sigma, transfer) {
                (SigmaField::Grid(_), Some(tr)) => jac_sigma(&sys, &sol, p.drives, tr)?,
                _ => empty(),
            };
            Some(match free {
                Some((boundary, layout)) => {
                    let opts = p.shape_options;
                    let traces = ShapeTraces::new(&sys, &sol, boundary, &opts);
                    let shape = jac_shape_from_traces(&traces, &sys, p.drives, boundary, layout, opts)?;
                    let angles = jac_theta_from_traces(&traces, &sys, p.drives, boundary, layout)?;
                    [sigma_block, shape, angles]
                }
                None => [sigma_block, empty(), empty()],
            })
        } else {
            None
        };
        drop(sys);
        Ok(Evaluation {
            voltages,
            residual,
            misfit,
            mesh,
            sigma_nodal,
            jacobians,
        })
    }
}

fn mesh_for<T: Real, S: StarShape<T> + ?Sized>(shape: &S, layout: &ElectrodeLayout<T>, opts: &MeshOptions) -> Result<Mesh2D<T>> {
    build_mesh(shape, layout, opts)
}

/// Which parameter blocks a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveBlocks {
    pub sigma: bool,
    pub shape: bool,
    pub angles: bool,
}

impl ActiveBlocks {
    pub const ALL: Self = Self { sigma: true, shape: true, angles: true };
    pub const GEOMETRY: Self = Self { sigma: false, shape: true, angles: true };
    pub const SIGMA: Self = Self { sigma: true, shape: false, angles: false };
}

/// Prior square roots and means of the active blocks.
#[derive(Clone, Debug)]
pub struct StagePriors<T = f64> {
    pub sigma: Option<SmoothnessPrior<T>>,
    pub shape: Option<ShapePrior<T>>,
    pub angles: Option<ElectrodePrior<T>>,
}

impl<T: Real> StagePriors<T> {
    fn active(&self) -> ActiveBlocks {
        ActiveBlocks {
            sigma: self.sigma.is_some(),
            shape: self.shape.is_some(),
            angles: self.angles.is_some(),
        }
    }

    /// Concatenated whitened offsets of the active blocks.
    pub fn whiten(&self, state: &ReconState<T>) -> Result<Vec<T>> {
        let mut w = Vec::new();
        if let Some(p) = &self.sigma {
            if p.len() != state.sigma.len() {
                return Err(Error::Dimension("admittivity prior size".into()));
            }
            let d: Vec<T> = state.sigma.iter().zip(p.mean()).map(|(a, b)| *a - *b).collect();
            w.extend(p.factor().solve_lower(&d));
        }
        if let Some(p) = &self.shape {
            if p.mean().len() != state.alpha.len() {
                return Err(Error::Dimension("shape prior size".into()));
            }
            w.extend(state.alpha.iter().zip(p.mean()).zip(p.std()).map(|((a, m), s)| (*a - *m) / *s));
        }
        if let Some(p) = &self.angles {
            if p.mean().len() != state.theta.len() {
                return Err(Error::Dimension("electrode prior size".into()));
            }
            let tau = p.tau();
            w.extend(state.theta.iter().zip(p.mean()).map(|(a, m)| (*a - *m) / tau));
        }
        Ok(w)
    }

    /// Maps a whitened step to parameter space, `S δw`.
    pub fn unwhiten_step(&self, dw: &[T], like: &ReconState<T>) -> ReconState<T> {
        let mut out = ReconState {
            sigma: vec![T::zero(); like.sigma.len()],
            alpha: vec![T::zero(); like.alpha.len()],
            theta: vec![T::zero(); like.theta.len()],
        };
        let mut at = 0;
        if let Some(p) = &self.sigma {
            let k = p.len();
            out.sigma = p.factor().mul_lower(&dw[at..at + k]);
            at += k;
        }
        if let Some(p) = &self.shape {
            for (o, (d, s)) in out.alpha.iter_mut().zip(dw[at..].iter().zip(p.std())) {
                *o = *d * *s;
            }
            at += p.std().len();
        }
        if let Some(p) = &self.angles {
            let tau = p.tau();
            for (o, d) in out.theta.iter_mut().zip(&dw[at..]) {
                *o = *d * tau;
            }
        }
        out
    }

    /// `Γ_η^{-1/2} [J_σ L | J_α diag(a) | J_θ τ]` over the active blocks.
    pub fn whitened_jacobian(&self, blocks: &[Matrix<T>; 3], weights: &[T]) -> Result<Matrix<T>> {
        let mut parts = Vec::new();
        if let Some(p) = &self.sigma {
            if blocks[0].cols() != p.len() {
                return Err(Error::Dimension("admittivity Jacobian is missing".into()));
            }
            parts.push(blocks[0].matmul(p.factor().lower()));
        }
        if let Some(p) = &self.shape {
            let mut j = blocks[1].clone();
            if j.cols() != p.std().len() {
                return Err(Error::Dimension("shape Jacobian is missing".into()));
            }
            j.scale_cols(p.std());
            parts.push(j);
        }
        if let Some(p) = &self.angles {
            let mut j = blocks[2].clone();
            if j.cols() != p.mean().len() {
                return Err(Error::Dimension("angle Jacobian is missing".into()));
            }
            j.scale_cols(&vec![p.tau(); j.cols()]);
            parts.push(j);
        }
        let refs: Vec<&Matrix<T>> = parts.iter().collect();
        let mut out = Matrix::hstack(&refs)?;
        out.scale_rows(weights);
        Ok(out)
    }

    fn recenter(&mut self, state: &ReconState<T>) -> Result<()> {
        if let Some(p) = &self.shape {
            self.shape = Some(p.with_mean(state.alpha.clone())?);
        }
        if let Some(p) = &self.angles {
            self.angles = Some(p.with_mean(state.theta.clone()));
        }
        Ok(())
    }
}

/// Stopping rules, line search and damping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Stop when an accepted step lowers Φ by less than this fraction.
    pub rel_tol: f64,
    pub stage1_max_iter: usize,
    pub stage2_max_iter: usize,
    /// Step lengths searched: `[0, line_search_max]` times the GN step.
    pub line_search_max: f64,
    pub line_search_tol: f64,
    /// Undamped stages retry a failed line search on brackets shrunk by
    /// factors of ten, at most this many times.
    pub line_search_shrinks: usize,
    /// Smallest admissible admittivity coefficient.
    pub sigma_min: f64,
    /// Initial damping as a fraction of the mean diagonal of the normal
    /// matrix.
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Log-scale bracket and relative tolerance of the stage-0 fit.
    pub sigma_star_bracket: [f64; 2],
    pub sigma_star_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            stage1_max_iter: 25,
            stage2_max_iter: 30,
            line_search_max: 2.0,
            line_search_tol: 1e-3,
            line_search_shrinks: 3,
            sigma_min: 1e-3,
            lambda_init: 1e-2,
            lambda_factor: 10.0,
            lambda_max: 1e8,
            sigma_star_bracket: [1e-2, 1e2],
            sigma_star_tol: 1e-3,
        }
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: u8,
    pub iteration: usize,
    /// Φ at the start of the iteration.
    pub phi: f64,
    pub misfit: f64,
    /// Φ after the step (equal to `phi` when rejected).
    pub phi_new: f64,
    pub step_length: f64,
    /// Euclidean norm of the whitened step.
    pub step_norm: f64,
    pub lambda: Option<f64>,
    pub accepted: bool,
}

/// Why a stage ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative decrease below tolerance.
    Converged,
    MaxIterations,
    /// No step lowered Φ; the best state so far is returned.
    Stalled,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct StageResult<T = f64> {
    pub state: ReconState<T>,
    /// Φ at the initial and at every accepted iterate.
    pub history: Vec<T>,
    pub misfit: T,
    /// Accepted iterations.
    pub iterations: usize,
    pub termination: Termination,
    pub records: Vec<IterationRecord>,
}

/// Objective of a stage at a state: data misfit plus whitened prior norm.
#[derive(Clone, Debug)]
pub struct Objective<T = f64> {
    pub misfit: T,
    pub regularizer: T,
    pub value: T,
}

/// Φ without Jacobians; `+∞` for inadmissible states.
pub fn objective<T: Real>(model: &ForwardModel<T>, priors: &StagePriors<T>, state: &ReconState<T>, sigma_const: Option<T>, sigma_min: T) -> T {
    match try_objective(model, priors, state, sigma_const, sigma_min) {
        Ok(o) => o.value,
        Err(e) => {
            debug!("inadmissible state: {e}");
            T::infinity()
        }
    }
}

pub fn try_objective<T: Real>(
    model: &ForwardModel<T>,
    priors: &StagePriors<T>,
    state: &ReconState<T>,
    sigma_const: Option<T>,
    sigma_min: T,
) -> Result<Objective<T>> {
    let field = field_of(state, sigma_const, sigma_min)?;
    let ev = model.evaluate(field, &state.alpha, &state.theta, false)?;
    let w = priors.whiten(state)?;
    let regularizer = dot(&w, &w);
    Ok(Objective {
        misfit: ev.misfit,
        regularizer,
        value: ev.misfit + regularizer,
    })
}

fn field_of<T: Real>(state: &ReconState<T>, sigma_const: Option<T>, sigma_min: T) -> Result<SigmaField<'_, T>> {
    match sigma_const {
        Some(s) => Ok(SigmaField::Constant(s)),
        None => {
            let lo = state.sigma.iter().copied().fold(T::infinity(), T::min);
            if !(lo >= sigma_min) {
                return Err(Error::NonPositiveAdmittivity(lo.as_f64()));
            }
            Ok(SigmaField::Grid(&state.sigma))
        }
    }
}

/// Gradient of Φ with respect to the active blocks in parameter space,
/// `2 Jᵀ Γ_η⁻¹ r + 2 Γ⁻¹(x − x★)`, ordered as σ, α, θ.
pub fn objective_gradient<T: Real>(model: &ForwardModel<T>, priors: &StagePriors<T>, state: &ReconState<T>, sigma_const: Option<T>) -> Result<Vec<T>> {
    let field = field_of(state, sigma_const, T::neg_infinity())?;
    let ev = model.evaluate(field, &state.alpha, &state.theta, true)?;
    let blocks = ev.jacobians.expect("requested");
    let inv_var: Vec<T> = model.problem().noise.variance().iter().map(|v| T::one() / *v).collect();
    let wr: Vec<T> = ev.residual.iter().zip(&inv_var).map(|(r, iv)| *r * *iv).collect();
    let w = priors.whiten(state)?;
    let two = T::lit(2.0);
    let mut out = Vec::new();
    let mut at = 0;
    if let Some(p) = &priors.sigma {
        let k = p.len();
        let prior = p.factor().solve_upper(&w[at..at + k]);
        out.extend(blocks[0].tr_matvec(&wr).into_iter().zip(prior).map(|(a, b)| two * (a + b)));
        at += k;
    }
    if let Some(p) = &priors.shape {
        let n = p.std().len();
        let g = blocks[1].tr_matvec(&wr);
        out.extend((0..n).map(|i| two * (g[i] + w[at + i] / p.std()[i])));
        at += n;
    }
    if let Some(p) = &priors.angles {
        let g = blocks[2].tr_matvec(&wr);
        out.extend(g.iter().zip(&w[at..]).map(|(a, b)| two * (*a + *b / p.tau())));
    }
    Ok(out)
}

/// Constant admittivity minimizing the weighted misfit at a fixed geometry
/// (golden section in `ln σ`).
pub fn fit_sigma_star<T: Real>(model: &ForwardModel<T>, alpha: &[T], theta: &[T], settings: &SolverSettings) -> Result<T> {
    let [lo, hi] = settings.sigma_star_bracket;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument("admittivity bracket must be positive and increasing".into()));
    }
    // Surface geometry errors before the search hides them as +∞.
    model.evaluate(SigmaField::Constant(T::one()), alpha, theta, false)?;
    let misfit = |ls: T| match model.evaluate(SigmaField::Constant(ls.exp()), alpha, theta, false) {
        Ok(ev) => ev.misfit,
        Err(_) => T::infinity(),
    };
    let r = golden_section(misfit, T::lit(lo.ln()), T::lit(hi.ln()), T::lit(settings.sigma_star_tol));
    let sigma = r.x.exp();
    info!("stage 0: sigma* = {:.6}", sigma.as_f64());
    Ok(sigma)
}

/// Gauss–Newton with golden-section line search on the active blocks.
///
/// With `moving_mean` the geometry prior means are reset to the iterate
/// before every step (stage 1), so the prior penalizes the step rather than
/// the distance to a fixed mean; `damping` enables the adaptive
/// Levenberg–Marquardt term.
#[allow(clippy::too_many_arguments)]
pub fn gauss_newton<T: Real>(
    model: &ForwardModel<T>,
    priors: &mut StagePriors<T>,
    start: ReconState<T>,
    sigma_const: Option<T>,
    settings: &SolverSettings,
    stage: u8,
    max_iter: usize,
    moving_mean: bool,
    damping: bool,
) -> Result<StageResult<T>> {
    let active = priors.active();
    if active.sigma && sigma_const.is_some() {
        return Err(Error::InvalidArgument("a constant admittivity cannot be an unknown".into()));
    }
    let weights = model.problem().noise.weights();
    let sigma_min = T::lit(settings.sigma_min);
    let tol = T::lit(settings.rel_tol);
    let mut state = start;
    if moving_mean {
        priors.recenter(&state)?;
    }
    let field = field_of(&state, sigma_const, sigma_min)?;
    let mut ev = model.evaluate(field, &state.alpha, &state.theta, true)?;
    let mut w = priors.whiten(&state)?;
    let mut phi = ev.misfit + dot(&w, &w);
    let mut history = vec![phi];
    let mut records = Vec::new();
    let mut lambda: Option<T> = None;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    'outer: while iterations < max_iter {
        let r: Vec<T> = ev.residual.iter().zip(&weights).map(|(a, b)| *a * *b).collect();
        let blocks = ev.jacobians.as_ref().expect("requested");
        let jw = priors.whitened_jacobian(blocks, &weights)?;
        let mut g = jw.tr_matvec(&r);
        for (gi, wi) in g.iter_mut().zip(&w) {
            *gi += *wi;
        }
        if damping && lambda.is_none() {
            let n = jw.cols().max(1);
            let trace = jw.frobenius().powi(2) / T::of_usize(n) + T::one();
            lambda = Some(T::lit(settings.lambda_init) * trace);
        }
        loop {
            let lam = lambda.unwrap_or_else(T::zero);
            let dw = match gauss_newton_direction(&jw, &r, &w, lam) {
                Ok(d) => d,
                Err(e) if damping => {
                    warn!("stage {stage}: normal equations failed ({e}); raising damping");
                    lambda = Some(lam * T::lit(settings.lambda_factor));
                    if lambda.unwrap() > T::lit(settings.lambda_max) {
                        termination = Termination::Stalled;
                        break 'outer;
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            let slope = dot(&g, &dw);
            if !(slope <= T::zero()) {
                return Err(Error::InvalidArgument(format!("stage {stage}: step is not a descent direction ({slope})")));
            }
            // Predicted decrease of the quadratic model; at a stationary point
            // the iteration has nothing left to do.
            if -slope <= tol * phi {
                termination = Termination::Converged;
                break 'outer;
            }
            let dx = priors.unwhiten_step(&dw, &state);
            let trial = |t: T| -> ReconState<T> { axpy_state(&state, t, &dx) };
            let search = |hi: T| {
                let ls = golden_section(
                    |t| objective(model, priors, &trial(t), sigma_const, sigma_min),
                    T::zero(),
                    hi,
                    T::lit(settings.line_search_tol) * hi / T::lit(settings.line_search_max),
                );
                let mid_val = objective(model, priors, &trial(ls.x), sigma_const, sigma_min);
                if mid_val <= ls.best.1 {
                    (ls.x, mid_val)
                } else {
                    ls.best
                }
            };
            let mut hi = T::lit(settings.line_search_max);
            let (mut t, mut phi_new) = search(hi);
            // Without damping the only way to shorten the step is to shrink
            // the bracket.
            let mut shrinks = 0;
            while lambda.is_none() && !(phi_new < phi) && shrinks < settings.line_search_shrinks {
                hi = hi / T::lit(10.0);
                (t, phi_new) = search(hi);
                shrinks += 1;
            }
            let step_norm = dot(&dw, &dw).sqrt() * t;
            let accepted = phi_new < phi;
            records.push(IterationRecord {
                stage,
                iteration: iterations + 1,
                phi: phi.as_f64(),
                misfit: ev.misfit.as_f64(),
                phi_new: if accepted { phi_new.as_f64() } else { phi.as_f64() },
                step_length: t.as_f64(),
                step_norm: step_norm.as_f64(),
                lambda: lambda.map(|l| l.as_f64()),
                accepted,
            });
            if accepted {
                debug!("stage {stage} iteration {}: phi {:.6e} -> {:.6e} (t = {:.4})", iterations + 1, phi.as_f64(), phi_new.as_f64(), t.as_f64());
                if let Some(l) = lambda {
                    lambda = Some(l / T::lit(settings.lambda_factor));
                }
                iterations += 1;
                let decrease = (phi - phi_new) / phi;
                state = trial(t);
                if moving_mean {
                    priors.recenter(&state)?;
                }
                let field = field_of(&state, sigma_const, sigma_min)?;
                ev = model.evaluate(field, &state.alpha, &state.theta, true)?;
                w = priors.whiten(&state)?;
                phi = ev.misfit + dot(&w, &w);
                history.push(phi);
                if decrease < tol {
                    termination = Termination::Converged;
                    break 'outer;
                }
                break;
            }
            match lambda {
                Some(l) if l * T::lit(settings.lambda_factor) <= T::lit(settings.lambda_max) => {
                    lambda = Some(l * T::lit(settings.lambda_factor));
                }
                _ => {
                    warn!("stage {stage}: line search found no decrease; keeping the best state");
                    termination = Termination::Stalled;
                    break 'outer;
                }
            }
        }
    }
    info!(
        "stage {stage}: {:?} after {iterations} iterations, phi = {:.6e}, misfit = {:.6e}",
        termination,
        phi.as_f64(),
        ev.misfit.as_f64()
    );
    Ok(StageResult {
        state,
        history,
        misfit: ev.misfit,
        iterations,
        termination,
        records,
    })
}

fn axpy_state<T: Real>(x: &ReconState<T>, t: T, d: &ReconState<T>) -> ReconState<T> {
    let f = |a: &[T], b: &[T]| a.iter().zip(b).map(|(p, q)| *p + t * *q).collect();
    ReconState {
        sigma: f(&x.sigma, &d.sigma),
        alpha: f(&x.alpha, &d.alpha),
        theta: f(&x.theta, &d.theta),
    }
}

/// Geometry-only stage: admittivity fixed at `sigma_star`, LM-damped steps
/// with the prior means following the iterate.
pub fn stage1<T: Real>(
    model: &ForwardModel<T>,
    shape_prior: &ShapePrior<T>,
    angle_prior: &ElectrodePrior<T>,
    sigma_star: T,
    alpha0: &[T],
    theta0: &[T],
    settings: &SolverSettings,
) -> Result<StageResult<T>> {
    let mut priors = StagePriors {
        sigma: None,
        shape: Some(shape_prior.clone()),
        angles: Some(angle_prior.clone()),
    };
    let start = ReconState {
        sigma: Vec::new(),
        alpha: alpha0.to_vec(),
        theta: theta0.to_vec(),
    };
    gauss_newton(model, &mut priors, start, Some(sigma_star), settings, 1, settings.stage1_max_iter, true, true)
}

/// Full MAP stage: fixed prior means, undamped Gauss–Newton, started at the
/// means. Blocks without a prior are held fixed.
pub fn stage2<T: Real>(model: &ForwardModel<T>, priors: &StagePriors<T>, start: ReconState<T>, settings: &SolverSettings) -> Result<StageResult<T>> {
    let mut priors = priors.clone();
    gauss_newton(model, &mut priors, start, None, settings, 2, settings.stage2_max_iter, false, false)
}

/// The three comparison cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Geometry estimated together with the admittivity.
    Simultaneous,
    /// Admittivity only, on the true geometry.
    FixedGeometryTruth,
    /// Admittivity only, on the initial guess geometry.
    FixedGeometryGuess,
}

/// Prior hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSettings {
    /// Shape prior scale `a` and decay `s`.
    pub a: f64,
    pub s: f64,
    /// Electrode angle standard deviation; `None` is `2π/M`.
    pub tau: Option<f64>,
    /// Correlation length of the admittivity prior.
    pub corr_len: f64,
    /// Admittivity prior standard deviation as a multiple of `σ★`.
    pub sigma_std_factor: f64,
    pub nugget: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            a: 0.1,
            s: 1.0,
            tau: None,
            corr_len: 0.6,
            sigma_std_factor: 0.5,
            nugget: crate::priors::DEFAULT_NUGGET,
        }
    }
}

/// Outcome of a complete reconstruction.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Reconstruction<T = f64> {
    pub mode: Mode,
    pub sigma_star: T,
    pub stage1: Option<StageResult<T>>,
    pub stage2: Option<StageResult<T>>,
    /// Final state; `alpha`/`theta` are the fixed geometry's parameters in
    /// the fixed modes when it is Fourier, empty otherwise.
    pub state: ReconState<T>,
    pub phi: T,
    pub misfit: T,
}

impl<T: Real> Reconstruction<T> {
    pub fn records(&self) -> Vec<IterationRecord> {
        let mut out = Vec::new();
        for s in [&self.stage1, &self.stage2].into_iter().flatten() {
            out.extend(s.records.iter().cloned());
        }
        out
    }
}

/// Options of [`reconstruct`].
pub struct RunOptions<T: Real> {
    pub mode: Mode,
    pub alpha0: Vec<T>,
    pub theta0: Vec<T>,
    pub priors: PriorSettings,
    pub solver: SolverSettings,
    /// Use the initial geometry as the stage-2 prior mean.
    pub skip_stage1: bool,
    /// Known constant admittivity: skips stage 0 and stage 2 (geometry only).
    pub known_sigma: Option<T>,
    /// True curve and layout, required by [`Mode::FixedGeometryTruth`].
    pub truth: Option<(Arc<dyn StarShape<T>>, ElectrodeLayout<T>)>,
}

/// Runs the stages of the selected mode.
pub fn reconstruct<T: Real>(problem: &Problem<T>, opts: &RunOptions<T>) -> Result<Reconstruction<T>> {
    let m = problem.drives.num_electrodes();
    if opts.theta0.len() != m {
        return Err(Error::Dimension(format!("{} initial angles for {m} electrodes", opts.theta0.len())));
    }
    let order = match opts.alpha0.len() {
        n if n % 2 == 1 => (n - 1) / 2,
        n => return Err(Error::Dimension(format!("{n} Fourier coefficients (must be odd)"))),
    };
    let ps = &opts.priors;
    let tau = T::lit(ps.tau.unwrap_or(std::f64::consts::TAU / m as f64));
    let shape_prior = ShapePrior::new(order, T::lit(ps.a), T::lit(ps.s), opts.alpha0.clone())?;
    let angle_prior = ElectrodePrior::new(opts.theta0.clone(), tau)?;
    let sigma_prior = |sigma_star: T| {
        SmoothnessPrior::new(
            problem.grid.mesh().vertices(),
            sigma_star,
            sigma_star * T::lit(ps.sigma_std_factor),
            T::lit(ps.corr_len),
            T::lit(ps.nugget),
        )
    };
    let k = problem.grid.len();
    match opts.mode {
        Mode::Simultaneous => {
            let mut model = ForwardModel::new(problem, Geometry::Free)?;
            if opts.known_sigma.is_some() {
                model = model.unconfined();
            }
            let sigma_star = match opts.known_sigma {
                Some(s) => s,
                None => fit_sigma_star(&model, &opts.alpha0, &opts.theta0, &opts.solver)?,
            };
            let s1 = if opts.skip_stage1 {
                None
            } else {
                Some(stage1(&model, &shape_prior, &angle_prior, sigma_star, &opts.alpha0, &opts.theta0, &opts.solver)?)
            };
            let (alpha, theta) = match &s1 {
                Some(r) => (r.state.alpha.clone(), r.state.theta.clone()),
                None => (opts.alpha0.clone(), opts.theta0.clone()),
            };
            if opts.known_sigma.is_some() {
                let (phi, misfit) = s1.as_ref().map_or((T::nan(), T::nan()), |r| (*r.history.last().unwrap(), r.misfit));
                return Ok(Reconstruction {
                    mode: opts.mode,
                    sigma_star,
                    stage1: s1,
                    stage2: None,
                    state: ReconState {
                        sigma: vec![sigma_star; k],
                        alpha,
                        theta,
                    },
                    phi,
                    misfit,
                });
            }
            let priors = StagePriors {
                sigma: Some(sigma_prior(sigma_star)?),
                shape: Some(shape_prior.with_mean(alpha.clone())?),
                angles: Some(angle_prior.with_mean(theta.clone())),
            };
            let start = ReconState {
                sigma: vec![sigma_star; k],
                alpha,
                theta,
            };
            let s2 = stage2(&model, &priors, start, &opts.solver)?;
            Ok(Reconstruction {
                mode: opts.mode,
                sigma_star,
                phi: *s2.history.last().unwrap(),
                misfit: s2.misfit,
                state: s2.state.clone(),
                stage1: s1,
                stage2: Some(s2),
            })
        }
        Mode::FixedGeometryTruth | Mode::FixedGeometryGuess => {
            let (geometry, alpha, theta) = if opts.mode == Mode::FixedGeometryTruth {
                let (shape, layout) = opts
                    .truth
                    .as_ref()
                    .ok_or_else(|| Error::Config("fixed-geometry-truth needs the true geometry".into()))?;
                let geometry = Geometry::Fixed {
                    shape: shape.clone(),
                    layout: layout.clone(),
                };
                (geometry, Vec::new(), layout.angles().to_vec())
            } else {
                let geometry = Geometry::Fixed {
                    shape: Arc::new(FourierBoundary::new(opts.alpha0.clone())?),
                    layout: ElectrodeLayout::new(opts.theta0.clone(), problem.width)?,
                };
                (geometry, opts.alpha0.clone(), opts.theta0.clone())
            };
            let model = ForwardModel::new(problem, geometry)?;
            let sigma_star = match opts.known_sigma {
                Some(s) => s,
                None => fit_sigma_star(&model, &[], &[], &opts.solver)?,
            };
            let priors = StagePriors {
                sigma: Some(sigma_prior(sigma_star)?),
                shape: None,
                angles: None,
            };
            let start = ReconState {
                sigma: vec![sigma_star; k],
                alpha,
                theta,
            };
            let s2 = stage2(&model, &priors, start, &opts.solver)?;
            Ok(Reconstruction {
                mode: opts.mode,
                sigma_star,
                phi: *s2.history.last().unwrap(),
                misfit: s2.misfit,
                state: s2.state.clone(),
                stage1: None,
                stage2: Some(s2),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_examples() {
        let r = golden_section(|t: f64| (t - 0.3).powi(2), 0.0, 1.0, 1e-6);
        assert!((r.x - 0.3).abs() <= 1e-6);
        assert_eq!(r.iterations, golden_iterations(1.0, 1e-6));
        let r = golden_section(|t: f64| (t - 0.5).abs(), 0.0, 1.0, 1e-4);
        assert!((r.x - 0.5).abs() <= 1e-4);
    }

    #[test]
    fn iteration_count_is_the_ceiling() {
        for (len, tol) in [(1.0, 1e-6), (2.0, 1e-3), (9.2, 1e-3), (1.0, 0.5), (1.0, 2.0)] {
            let n = if tol >= len { 0 } else { ((tol / len as f64).ln() / 0.618f64.ln()).ceil() as usize };
            assert_eq!(golden_iterations(len, tol), n, "{len} {tol}");
            let mut calls = 0;
            let r = golden_section(
                |t: f64| {
                    calls += 1;
                    t * t
                },
                0.0,
                len,
                tol,
            );
            assert_eq!(r.iterations, n);
            assert_eq!(calls, if n == 0 { 1 } else { n + 2 });
        }
    }

    #[test]
    fn infinite_values_are_avoided() {
        let r = golden_section(|t: f64| if t > 0.4 { f64::INFINITY } else { (t - 0.1).powi(2) }, 0.0, 2.0, 1e-6);
        assert!((r.x - 0.1).abs() < 1e-5, "{}", r.x);
    }
}
