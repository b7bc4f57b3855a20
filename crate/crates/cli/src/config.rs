//! Run configuration.
//!
//! Every field has a default, so `{}` is a valid configuration (experiment 2,
//! simultaneous mode). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use eit_shape::mesher::MeshOptions;
use eit_shape::phantoms::{Admittivity, PhantomConfig, PhantomId, SimulationSettings, WidthSpec};
use eit_shape::recon::{Mode, PriorSettings, SolverSettings};
use eit_shape::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory under which runs are written
/// when no output directory is configured.
pub const OUTPUT_ROOT_VAR: &str = "EITSHAPE_OUTPUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Target configuration to simulate (default `exp2`). Ignored for the
    /// data when `data` is set.
    pub phantom: PhantomId,
    /// Existing data set (`<stem>`, `<stem>.csv` or `<stem>.json`).
    pub data: Option<PathBuf>,
    /// Seeds the electrode perturbation and the noise (default 7).
    pub seed: u64,
    /// Number of electrodes `M` (default 16).
    pub electrodes: usize,
    /// Electrode width; default 0.3 for exp1, two fifths coverage otherwise.
    pub width: Option<WidthSpec>,
    /// Standard deviation of the electrode angle perturbation (default 0.1).
    pub angle_stddev: f64,
    /// Contact impedance of every electrode (default 1).
    pub z: f64,
    /// Target admittivity; default is the phantom's.
    pub admittivity: Option<Admittivity>,
    /// Fine-mesh simulation and noise coefficients `c₁`, `c₂`
    /// (defaults 0.01, 0.001).
    pub simulation: SimulationSettings,
    /// Fourier order `N`; default 15 for exp1/exp3, 7 for exp2.
    pub order: Option<usize>,
    /// Radius of the initial disk; default 2.7, 2 and 1.5 for exp1–3.
    pub initial_radius: Option<f64>,
    /// Known constant admittivity; when set, only stage 1 runs.
    pub known_sigma: Option<f64>,
    /// Reconstruction mode (default `simultaneous`).
    pub mode: Mode,
    /// Use the initial geometry as the stage-2 prior mean.
    pub skip_stage1: bool,
    /// `a`, `s`, `tau`, `corr_len`, `sigma_std_factor`, `nugget`
    /// (defaults 0.1, 1, 2π/M, 0.6, 0.5, 1e-4).
    pub priors: PriorSettings,
    /// Tolerances, iteration caps and damping schedule.
    pub solver: SolverSettings,
    /// Admittivity grid on an origin-centred disk.
    pub grid: GridSettings,
    /// Meshing of the reconstruction geometries.
    pub mesh: MeshOptions,
    /// Output directory; default `$EITSHAPE_OUTPUT/<phantom>-<mode>-s<seed>`
    /// or `out/...` when the variable is unset.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    /// Radius of the background disk; default 3, or 4 for exp3 whose
    /// target and early iterates leave the disk of radius 3.
    pub radius: Option<f64>,
    /// Node spacing (default 0.15).
    pub h: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self { radius: None, h: 0.15 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomId::Exp2,
            data: None,
            seed: 7,
            electrodes: 16,
            width: None,
            angle_stddev: 0.1,
            z: 1.0,
            admittivity: None,
            simulation: SimulationSettings::default(),
            order: None,
            initial_radius: None,
            known_sigma: None,
            mode: Mode::Simultaneous,
            skip_stage1: false,
            priors: PriorSettings::default(),
            solver: SolverSettings::default(),
            grid: GridSettings::default(),
            mesh: MeshOptions::default(),
            output: None,
        }
    }
}

impl RunConfig {
    /// Reads and validates a JSON configuration; parse errors carry the
    /// line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.electrodes < 3 {
            return fail(format!("electrodes: need at least 3, got {}", self.electrodes));
        }
        if !(self.angle_stddev >= 0.0) {
            return fail(format!("angle_stddev: must be non-negative, got {}", self.angle_stddev));
        }
        if !(self.z > 0.0) {
            return fail(format!("z: must be positive, got {}", self.z));
        }
        match self.width {
            Some(WidthSpec::Absolute(w)) if !(w > 0.0) => return fail(format!("width: must be positive, got {w}")),
            Some(WidthSpec::Coverage(c)) if !(c > 0.0 && c < 1.0) => {
                return fail(format!("width: coverage must lie in (0, 1), got {c}"))
            }
            _ => {}
        }
        if self.order == Some(0) {
            return fail("order: must be at least 1".into());
        }
        if let Some(r) = self.initial_radius {
            if !(r > 0.0 && r < self.grid_radius()) {
                return fail(format!("initial_radius: must lie in (0, grid.radius), got {r}"));
            }
        }
        if let Some(s) = self.known_sigma {
            if !(s > 0.0) {
                return fail(format!("known_sigma: must be positive, got {s}"));
            }
        }
        let radius = self.grid_radius();
        if !(radius > 0.0 && self.grid.h > 0.0 && self.grid.h < radius) {
            return fail(format!("grid: need 0 < h < radius, got h = {} radius = {radius}", self.grid.h));
        }
        if !(self.simulation.c1 >= 0.0 && self.simulation.c2 >= 0.0) {
            return fail("simulation: noise coefficients must be non-negative".into());
        }
        let p = &self.priors;
        if !(p.a > 0.0 && p.s > 0.0 && p.corr_len > 0.0 && p.sigma_std_factor > 0.0) || p.tau.is_some_and(|t| !(t > 0.0)) {
            return fail("priors: a, s, tau, corr_len and sigma_std_factor must be positive".into());
        }
        let s = &self.solver;
        if !(s.rel_tol > 0.0 && s.line_search_max > 0.0 && s.line_search_tol > 0.0) {
            return fail("solver: tolerances and the line-search length must be positive".into());
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order.unwrap_or(match self.phantom {
            PhantomId::Exp2 => 7,
            _ => 15,
        })
    }

    pub fn initial_radius(&self) -> f64 {
        self.initial_radius.unwrap_or(match self.phantom {
            PhantomId::Exp1 => 2.7,
            PhantomId::Exp2 => 2.0,
            PhantomId::Exp3 => 1.5,
        })
    }

    pub fn grid_radius(&self) -> f64 {
        self.grid.radius.unwrap_or(if self.phantom == PhantomId::Exp3 { 4.0 } else { 3.0 })
    }

    /// Phantom description with the configured overrides applied.
    pub fn phantom_config(&self) -> PhantomConfig {
        let mut c = PhantomConfig::for_id(self.phantom);
        c.electrodes = self.electrodes;
        c.angle_stddev = self.angle_stddev;
        c.z = self.z;
        if let Some(w) = self.width {
            c.width = w;
        }
        if let Some(a) = &self.admittivity {
            c.admittivity = a.clone();
            c.stand_in = self.phantom != PhantomId::Exp1 || !matches!(a, Admittivity::Constant { value } if *value == 1.0);
        }
        c
    }

    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
        let mode = serde_json::to_value(self.mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        root.join(format!("{}-{mode}-s{}", self.phantom, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.order(), 7);
        assert_eq!(c.initial_radius(), 2.0);
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = serde_json::from_str::<RunConfig>("{\n  \"seed\": 1,\n  \"sede\": 2\n}").unwrap_err();
        assert_eq!(err.line(), 3);
        assert!(err.to_string().contains("sede"));
        let nested = serde_json::from_str::<RunConfig>("{\"solver\": {\"rel_tol\": 1e-3, \"tol\": 1}}");
        assert!(nested.is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let c = RunConfig { electrodes: 2, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig { width: Some(WidthSpec::Coverage(1.5)), ..Default::default() };
        assert!(c.validate().is_err());
        let c = RunConfig { initial_radius: Some(3.5), ..Default::default() };
        assert!(c.validate().is_err());
    }
}
