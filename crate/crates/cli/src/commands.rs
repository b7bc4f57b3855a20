use std::path::{Path, PathBuf};
use std::sync::Arc;

use eit_shape::forward::{ContactImpedances, DriveBasis};
use eit_shape::geometry::{ElectrodeLayout, FourierBoundary, StarShape};
use eit_shape::mesher::{build_mesh, MeshOptions, ReconGrid};
use eit_shape::metrics::{area_mismatch, hausdorff, relative_l2};
use eit_shape::phantoms::{config_hash, simulate as simulate_data, DataSet, Phantom, PhantomId};
use eit_shape::priors::NoiseModel;
use eit_shape::recon::{reconstruct as run, IterationRecord, Mode, Problem, ReconState, RunOptions, Termination};
use eit_shape::sensitivities::{check_jacobians as check, CheckSettings, ForwardSetup};
use eit_shape::{Boundary, Drives, Error, Impedances, Layout, Result};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, OUTPUT_ROOT_VAR};
use crate::svg;

/// Exit code for a breached threshold.
pub const THRESHOLD_BREACH: u8 = 3;

pub fn load_config(path: Option<&Path>, phantom: Option<PhantomId>, seed: Option<u64>) -> Result<RunConfig> {
    let mut c = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = phantom {
        c.phantom = p;
    }
    if let Some(s) = seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists (use --force to overwrite)", path.display())));
    }
    Ok(())
}

pub fn simulate(c: &RunConfig, out: Option<PathBuf>, force: bool) -> Result<u8> {
    let stem = out.unwrap_or_else(|| output_root().join(format!("{}-s{}", c.phantom, c.seed)));
    let phantom = Phantom::new(c.phantom_config(), c.seed)?;
    let ds = simulate_data(&phantom, &c.simulation, c.seed)?;
    let [csv, json] = ds.write(&stem, force)?;
    let clean = ds.clean.as_deref().unwrap_or(&ds.voltages);
    let rel_noise = ds.noise_std.iter().map(|s| s * s).sum::<f64>().sqrt() / clean.iter().map(|u| u * u).sum::<f64>().sqrt();
    println!("phantom      {}{}", c.phantom, if ds.meta.stand_in { " (stand-in admittivity)" } else { "" });
    println!("perimeter    {:.6}", ds.meta.perimeter);
    println!("width        {:.6}", ds.meta.width);
    println!("coverage     {:.6}", ds.meta.coverage);
    println!("noise level  {:.4e} (relative, normwise)", rel_noise);
    println!("mesh         {} vertices, h = {:.4}", ds.meta.num_vertices, ds.meta.h_target);
    println!("wrote        {}", csv.display());
    println!("wrote        {}", json.display());
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct StageSummary {
    pub iterations: usize,
    pub termination: Termination,
}

/// Summary of a reconstruction run.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config_hash: String,
    pub data_hash: String,
    pub phantom: PhantomId,
    pub seed: u64,
    pub mode: Mode,
    pub sigma_star: f64,
    pub final_phi: f64,
    pub final_misfit: f64,
    /// `M(M−1)`, the expected misfit at the noise level.
    pub expected_misfit: f64,
    pub stage1: Option<StageSummary>,
    pub stage2: Option<StageSummary>,
    pub hausdorff: Option<f64>,
    pub area_mismatch: Option<f64>,
    pub sigma_relative_l2: Option<f64>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    record: &'a IterationRecord,
}

#[derive(Serialize)]
struct FinalState<'a> {
    config_hash: &'a str,
    sigma_star: f64,
    state: &'a ReconState<f64>,
}

fn data_path(p: &Path) -> PathBuf {
    match p.extension().and_then(|e| e.to_str()) {
        Some("csv") | Some("json") => p.with_extension(""),
        _ => p.to_path_buf(),
    }
}

pub fn reconstruct(c: &RunConfig, force: bool) -> Result<RunReport> {
    let hash = config_hash(c)?;
    let dir = c.output_dir();
    let report_path = dir.join("report.json");
    guard(&report_path, force)?;

    let ds = match &c.data {
        Some(p) => DataSet::read(&data_path(p))?,
        None => {
            let phantom = Phantom::new(c.phantom_config(), c.seed)?;
            simulate_data(&phantom, &c.simulation, c.seed)?
        }
    };
    let meta = &ds.meta;
    let m = ds.electrodes();
    let (truth_shape, truth_layout) = meta.geometry()?;
    let truth_sigma = meta.admittivity.clone();

    let noise = NoiseModel::from_variance(ds.variance())?;
    let drives = DriveBasis::adjacent_to_first(m);
    let z = ContactImpedances::uniform(m, meta.z)?;
    let grid = ReconGrid::disk(c.grid_radius(), c.grid.h)?;
    let problem = Problem {
        data: &ds.voltages,
        noise: &noise,
        z: &z,
        drives: &drives,
        grid: &grid,
        width: meta.width,
        mesh: c.mesh.clone(),
        shape_options: Default::default(),
    };
    let order = c.order();
    let mut alpha0 = vec![0.0; 2 * order + 1];
    alpha0[0] = c.initial_radius();
    let theta0: Vec<f64> = (0..m).map(|k| std::f64::consts::TAU * k as f64 / m as f64).collect();
    let opts = RunOptions {
        mode: c.mode,
        alpha0: alpha0.clone(),
        theta0: theta0.clone(),
        priors: c.priors.clone(),
        solver: c.solver.clone(),
        skip_stage1: c.skip_stage1,
        known_sigma: c.known_sigma,
        truth: Some((Arc::new(truth_shape.clone()) as Arc<dyn StarShape<f64>>, truth_layout.clone())),
    };
    info!("reconstructing {} ({:?}), config {}", meta.phantom, c.mode, &hash[..12]);
    let rec = run(&problem, &opts)?;

    // Final geometry in the parametrization of the mode.
    let (shape, layout): (Box<dyn StarShape<f64>>, ElectrodeLayout) = match c.mode {
        Mode::Simultaneous => (
            Box::new(FourierBoundary::new(rec.state.alpha.clone())?),
            ElectrodeLayout::new(rec.state.theta.clone(), meta.width)?,
        ),
        Mode::FixedGeometryGuess => (Box::new(FourierBoundary::new(alpha0)?), ElectrodeLayout::new(theta0, meta.width)?),
        Mode::FixedGeometryTruth => (Box::new(truth_shape.clone()), truth_layout.clone()),
    };
    let truth_mesh = build_mesh(&truth_shape, &truth_layout, &MeshOptions::default())?;
    let err_l2 = relative_l2(&truth_mesh, |x| truth_sigma.value(x), &grid, &rec.state.sigma)?;
    let hd = hausdorff(&truth_shape, shape.as_ref(), 2048);
    let area = area_mismatch(&truth_shape, shape.as_ref(), 4096);

    let mut warnings = Vec::new();
    for (name, stage) in [("stage 1", &rec.stage1), ("stage 2", &rec.stage2)] {
        if let Some(s) = stage {
            if s.termination != Termination::Converged {
                warnings.push(format!("{name} did not converge ({:?} after {} iterations)", s.termination, s.iterations));
            }
        }
    }
    let expected = (m * (m - 1)) as f64;
    if rec.misfit.is_finite() && !(rec.misfit >= 0.5 * expected && rec.misfit <= 2.0 * expected) {
        warnings.push(format!("final misfit {:.1} is outside [{:.0}, {:.0}]", rec.misfit, 0.5 * expected, 2.0 * expected));
    }
    if meta.stand_in {
        warnings.push("phantom admittivity is a stand-in, not a published field".into());
    }

    std::fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        guard(&p, force)?;
        std::fs::write(&p, text)?;
        artifacts.push(p);
        Ok(())
    };

    let mut log = String::new();
    for r in rec.records() {
        log.push_str(&serde_json::to_string(&LogLine { config_hash: &hash, record: &r })?);
        log.push('\n');
    }
    write("log.jsonl", log)?;
    write(
        "state.json",
        serde_json::to_string_pretty(&FinalState { config_hash: &hash, sigma_star: rec.sigma_star, state: &rec.state })? + "\n",
    )?;

    let extent = c.grid_radius() * 1.05;
    write(
        "boundary.svg",
        svg::boundary_overlay(Some((&truth_shape, &truth_layout)), (shape.as_ref(), &layout), extent, &hash),
    )?;
    let true_nodal = truth_sigma.nodal(&truth_mesh);
    let (mut lo, mut hi) = true_nodal.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 * hi.abs().max(1.0) {
        (lo, hi) = (0.5 * lo, 1.5 * hi);
    }
    let final_mesh = build_mesh(shape.as_ref(), &layout, &c.mesh)?;
    let values = grid.transfer(&rec.state.sigma, &final_mesh)?;
    write("sigma.svg", svg::heat_map(&final_mesh, &values, lo, hi, extent, &hash))?;
    write("sigma_true.svg", svg::heat_map(&truth_mesh, &true_nodal, lo, hi, extent, &hash))?;
    let mut stages = Vec::new();
    if let Some(s) = &rec.stage1 {
        stages.push((1u8, s.history.clone()));
    }
    if let Some(s) = &rec.stage2 {
        stages.push((2u8, s.history.clone()));
    }
    write("phi.svg", svg::phi_history(&stages, &hash))?;
    artifacts.push(report_path.clone());

    let summary = |s: &Option<eit_shape::recon::StageResult<f64>>| {
        s.as_ref().map(|s| StageSummary { iterations: s.iterations, termination: s.termination })
    };
    let report = RunReport {
        config_hash: hash,
        data_hash: meta.config_hash.clone(),
        phantom: meta.phantom,
        seed: meta.seed,
        mode: c.mode,
        sigma_star: rec.sigma_star,
        final_phi: rec.phi,
        final_misfit: rec.misfit,
        expected_misfit: expected,
        stage1: summary(&rec.stage1),
        stage2: summary(&rec.stage2),
        hausdorff: Some(hd),
        area_mismatch: Some(area),
        sigma_relative_l2: Some(err_l2),
        warnings,
        artifacts,
    };
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!(
        "phi {:.4} misfit {:.2} (expected {:.0})  hausdorff {:.4}  area {:.4}  sigma L2 {:.4}",
        report.final_phi, report.final_misfit, expected, hd, area, err_l2
    );
    println!("report {}", report_path.display());
    Ok(report)
}

#[derive(clap::Args, Debug)]
pub struct CheckArgs {
    /// Mesh spacing of the coarse case.
    #[arg(long, default_value_t = 0.3)]
    pub h: f64,
    /// Boundary spacing at electrode ends as a fraction of `h`.
    #[arg(long, default_value_t = 0.05)]
    pub endpoint_refinement: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub sigma_tol: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub alpha_tol: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub theta_tol: f64,
    /// Required observed Taylor order of the shape remainder.
    #[arg(long, default_value_t = 1.8)]
    pub min_order: f64,
    /// Probe every n-th vertex for the admittivity block.
    #[arg(long, default_value_t = 1)]
    pub sigma_stride: usize,
}

/// The coarse verification case: a wavy second-order boundary with six
/// electrodes of width 0.4, contact impedance 0.5 and
/// `σ = 1 + 0.3x − 0.2y²`.
pub fn coarse_case(h: f64) -> Result<(Boundary, Layout, MeshOptions, Impedances, Drives)> {
    let b = Boundary::new(vec![1.0, 0.1, 0.0, 0.05, -0.08])?;
    let layout = Layout::new((0..6).map(|k| 0.3 + k as f64).collect(), 0.4)?;
    Ok((b, layout, MeshOptions::with_h(h), Impedances::uniform(6, 0.5)?, Drives::adjacent_to_first(6)))
}

pub fn check_jacobians(args: &CheckArgs) -> Result<u8> {
    let (b, layout, mut opts, z, drives) = coarse_case(args.h)?;
    opts.endpoint_refinement = args.endpoint_refinement;
    let mesh = build_mesh(&b, &layout, &opts)?;
    let sigma = |mesh: &eit_shape::Mesh| -> Result<Vec<f64>> {
        Ok(mesh.vertices().iter().map(|p| 1.0 + 0.3 * p[0] - 0.2 * p[1] * p[1]).collect())
    };
    let setup = ForwardSetup {
        boundary: &b,
        layout: &layout,
        mesh: &mesh,
        mesh_options: &opts,
        z: &z,
        drives: &drives,
        sigma: &sigma,
    };
    let settings = CheckSettings { sigma_stride: args.sigma_stride, ..Default::default() };
    let r = check(&setup, &settings)?;
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let mut ok = true;
    println!("coarse case: {} vertices, {} potential unknowns", mesh.num_vertices(), r.num_unknowns);
    println!("{:<8} {:>12} {:>10}  status", "block", "rel. error", "threshold");
    for (name, err, tol) in [("sigma", r.sigma, args.sigma_tol), ("alpha", r.shape, args.alpha_tol), ("theta", r.angles, args.theta_tol)] {
        let pass = err <= tol;
        ok &= pass;
        println!("{name:<8} {err:>12.3e} {tol:>10.1e}  {}", mark(pass));
    }
    println!("shape Taylor remainders (steps {:?})", settings.taylor_steps);
    let mut good = 0;
    for (l, rem, orders) in &r.taylor {
        let min = orders.iter().copied().fold(f64::INFINITY, f64::min);
        if min >= args.min_order {
            good += 1;
        }
        let rem: Vec<String> = rem.iter().map(|x| format!("{x:.3e}")).collect();
        let ord: Vec<String> = orders.iter().map(|x| format!("{x:.2}")).collect();
        println!("  l = {l}: remainders [{}]  orders [{}]", rem.join(", "), ord.join(", "));
    }
    let pass = good >= 3;
    ok &= pass;
    println!("directions with order >= {}: {good} (need 3)  {}", args.min_order, mark(pass));
    Ok(if ok { 0 } else { THRESHOLD_BREACH })
}

pub fn export_mesh(phantom: PhantomId, seed: u64, h: Option<f64>, out: &Path, force: bool) -> Result<()> {
    guard(out, force)?;
    let p = Phantom::new(eit_shape::phantoms::PhantomConfig::for_id(phantom), seed)?;
    let opts = MeshOptions { h_target: h, ..MeshOptions::default() };
    let mesh = build_mesh(&p.boundary, &p.layout, &opts)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, mesh.to_json()?)?;
    println!("{} vertices, {} triangles -> {}", mesh.num_vertices(), mesh.triangles().len(), out.display());
    Ok(())
}
