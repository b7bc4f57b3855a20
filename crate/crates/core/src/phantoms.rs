//! Target configurations of the numerical experiments and simulation of
//! noisy data on an independent fine mesh.
//!
//! The admittivity fields of experiments 2 and 3 have no published
//! formula; the bump and inclusion defaults here are stand-ins and are
//! labelled `stand_in` in every output.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{simulate_measurements, ContactImpedances, DriveBasis};
use crate::geometry::{ElectrodeLayout, StarShape};
use crate::mesher::{build_mesh, default_h, Mesh2D, MeshOptions};
use crate::priors::{noise_variance, NOISE_C1, NOISE_C2};
use crate::scalar::wrap_angle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomId {
    Exp1,
    Exp2,
    Exp3,
}

impl PhantomId {
    pub const ALL: [PhantomId; 3] = [PhantomId::Exp1, PhantomId::Exp2, PhantomId::Exp3];

    pub fn as_str(self) -> &'static str {
        match self {
            PhantomId::Exp1 => "exp1",
            PhantomId::Exp2 => "exp2",
            PhantomId::Exp3 => "exp3",
        }
    }
}

impl fmt::Display for PhantomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhantomId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp1" => Ok(PhantomId::Exp1),
            "exp2" => Ok(PhantomId::Exp2),
            "exp3" => Ok(PhantomId::Exp3),
            other => Err(Error::UnknownPhantom(other.to_string())),
        }
    }
}

/// `r(φ) = A/√(p²cos²φ + q²sin²φ) + B·exp(−(φ−π)⁶) + C·cos φ·sin(−2φ)`,
/// with `φ` wrapped to `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBoundary {
    pub scale: f64,
    pub p: f64,
    pub q: f64,
    pub bump: f64,
    pub wobble: f64,
}

impl TargetBoundary {
    pub fn for_id(id: PhantomId) -> Self {
        match id {
            PhantomId::Exp1 => Self { scale: 3.3, p: 2.2, q: 1.5, bump: 1.1, wobble: 0.88 },
            // Ellipse with semi-axes 2 (x) and 1.5 (y).
            PhantomId::Exp2 => Self { scale: 3.0, p: 1.5, q: 2.0, bump: 0.0, wobble: 0.0 },
            PhantomId::Exp3 => Self { scale: 3.0, p: 1.5, q: 2.0, bump: 0.75, wobble: 0.6 },
        }
    }

    /// Radius and its first two derivatives.
    fn eval(&self, phi: f64) -> [f64; 3] {
        let phi = wrap_angle(phi);
        let (s, c) = phi.sin_cos();
        let (s2, c2) = (2.0 * phi).sin_cos();
        let (pp, qq) = (self.p * self.p, self.q * self.q);
        let d = pp * c * c + qq * s * s;
        let d1 = (qq - pp) * s2;
        let d2 = 2.0 * (qq - pp) * c2;
        let ell = [
            self.scale * d.powf(-0.5),
            -0.5 * self.scale * d.powf(-1.5) * d1,
            self.scale * (0.75 * d.powf(-2.5) * d1 * d1 - 0.5 * d.powf(-1.5) * d2),
        ];
        let x = phi - PI;
        let g = (-x.powi(6)).exp();
        let bump = [g, -6.0 * x.powi(5) * g, (36.0 * x.powi(10) - 30.0 * x.powi(4)) * g];
        let wob = [-c * s2, s * s2 - 2.0 * c * c2, 5.0 * c * s2 + 4.0 * s * c2];
        [0, 1, 2].map(|k| ell[k] + self.bump * bump[k] + self.wobble * wob[k])
    }
}

impl StarShape<f64> for TargetBoundary {
    fn radius(&self, phi: f64) -> f64 {
        self.eval(phi)[0]
    }
    fn radius_d1(&self, phi: f64) -> f64 {
        self.eval(phi)[1]
    }
    fn radius_d2(&self, phi: f64) -> f64 {
        self.eval(phi)[2]
    }
}

/// Radius function of a phantom boundary.
pub fn target_boundary(id: &str) -> Result<TargetBoundary> {
    Ok(TargetBoundary::for_id(id.parse()?))
}

/// `2π(m−1)/M + ε_m` with `ε_m ~ N(0, stddev²)`, not wrapped.
pub fn perturb_angles(m: usize, stddev: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let normal = Normal::new(0.0, stddev).map_err(|e| Error::InvalidArgument(format!("electrode perturbation: {e}")))?;
    Ok((0..m).map(|k| TAU * k as f64 / m as f64 + normal.sample(rng)).collect())
}

/// Perturbed electrode layout on `shape`; draws violating ordering or
/// disjointness are discarded and redrawn from the same stream.
pub fn perturb_electrodes<S: StarShape<f64> + ?Sized>(shape: &S, m: usize, width: f64, stddev: f64, seed: u64) -> Result<ElectrodeLayout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let angles = perturb_angles(m, stddev, &mut rng)?;
        if let Ok(layout) = ElectrodeLayout::new(angles, width) {
            if layout.arcs(shape).is_ok() {
                return Ok(layout);
            }
        }
    }
    Err(Error::InvalidLayout(format!("no disjoint layout of {m} electrodes of width {width} found")))
}

/// Disc of constant admittivity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub center: [f64; 2],
    pub radius: f64,
    pub level: f64,
}

/// Admittivity of a phantom as a function of position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Admittivity {
    Constant { value: f64 },
    /// `background + height·exp(−|x − center|²/width²)`.
    Bump { background: f64, height: f64, center: [f64; 2], width: f64 },
    /// Piecewise constant; later inclusions take precedence.
    Inclusions { background: f64, inclusions: Vec<Inclusion> },
}

impl Admittivity {
    pub fn value(&self, x: [f64; 2]) -> f64 {
        match self {
            Admittivity::Constant { value } => *value,
            Admittivity::Bump { background, height, center, width } => {
                let d2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                background + height * (-d2 / (width * width)).exp()
            }
            Admittivity::Inclusions { background, inclusions } => inclusions
                .iter()
                .rev()
                .find(|d| (x[0] - d.center[0]).hypot(x[1] - d.center[1]) < d.radius)
                .map_or(*background, |d| d.level),
        }
    }

    pub fn nodal(&self, mesh: &Mesh2D) -> Vec<f64> {
        mesh.vertices().iter().map(|&p| self.value(p)).collect()
    }
}

/// Piecewise-constant field; every disc must lie inside `shape`.
pub fn inclusion_field<S: StarShape<f64> + ?Sized>(shape: &S, background: f64, inclusions: Vec<Inclusion>) -> Result<Admittivity> {
    for (i, d) in inclusions.iter().enumerate() {
        if !(d.radius > 0.0) || !(d.level > 0.0) {
            return Err(Error::InvalidArgument(format!("inclusion {i}: radius and level must be positive")));
        }
        let outside = (0..256).any(|k| {
            let a = TAU * k as f64 / 256.0;
            let p = [d.center[0] + d.radius * a.cos(), d.center[1] + d.radius * a.sin()];
            p[0].hypot(p[1]) >= shape.radius(p[1].atan2(p[0]))
        });
        if outside {
            return Err(Error::InvalidArgument(format!("inclusion {i} at ({}, {}) leaves the domain", d.center[0], d.center[1])));
        }
    }
    Ok(Admittivity::Inclusions { background, inclusions })
}

/// Default inclusions of experiment 3 (a stand-in).
pub fn default_inclusions() -> Vec<Inclusion> {
    vec![
        Inclusion { center: [1.0, -0.6], radius: 0.5, level: 10.0 },
        Inclusion { center: [-1.0, 0.6], radius: 0.5, level: 10.0 },
    ]
}

/// Default smooth admittivity of experiment 2 (a stand-in).
pub fn default_bump() -> Admittivity {
    Admittivity::Bump { background: 1.0, height: 1.5, center: [0.7, 0.4], width: 0.5 }
}

/// How electrode widths are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthSpec {
    Absolute(f64),
    /// Total electrode arc as a fraction of the perimeter.
    Coverage(f64),
}

/// Everything defining one target configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub id: PhantomId,
    pub electrodes: usize,
    pub width: WidthSpec,
    pub angle_stddev: f64,
    pub z: f64,
    pub admittivity: Admittivity,
    /// Whether the admittivity is a stand-in rather than a published value.
    pub stand_in: bool,
}

impl PhantomConfig {
    pub fn for_id(id: PhantomId) -> Self {
        let (width, admittivity, stand_in) = match id {
            PhantomId::Exp1 => (WidthSpec::Absolute(0.3), Admittivity::Constant { value: 1.0 }, false),
            PhantomId::Exp2 => (WidthSpec::Coverage(0.4), default_bump(), true),
            PhantomId::Exp3 => (
                WidthSpec::Coverage(0.4),
                Admittivity::Inclusions { background: 1.0, inclusions: default_inclusions() },
                true,
            ),
        };
        Self {
            id,
            electrodes: 16,
            width,
            angle_stddev: 0.1,
            z: 1.0,
            admittivity,
            stand_in,
        }
    }
}

/// A target boundary, its electrodes and admittivity.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub config: PhantomConfig,
    pub boundary: TargetBoundary,
    pub layout: ElectrodeLayout,
    pub z: ContactImpedances,
}

impl Phantom {
    /// Builds the phantom with electrode perturbations drawn from `seed`.
    pub fn new(config: PhantomConfig, seed: u64) -> Result<Self> {
        let boundary = TargetBoundary::for_id(config.id);
        if config.electrodes < 2 {
            return Err(Error::InvalidLayout("at least two electrodes required".into()));
        }
        let width = match config.width {
            WidthSpec::Absolute(w) => w,
            WidthSpec::Coverage(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::InvalidArgument(format!("coverage {f} must lie in (0, 1)")));
                }
                f * boundary.perimeter() / config.electrodes as f64
            }
        };
        if let Admittivity::Inclusions { background, inclusions } = &config.admittivity {
            inclusion_field(&boundary, *background, inclusions.clone())?;
        }
        let layout = perturb_electrodes(&boundary, config.electrodes, width, config.angle_stddev, seed)?;
        let z = ContactImpedances::uniform(config.electrodes, config.z)?;
        Ok(Self { config, boundary, layout, z })
    }

    pub fn width(&self) -> f64 {
        self.layout.width()
    }

    pub fn perimeter(&self) -> f64 {
        self.boundary.perimeter()
    }

    /// Fraction of the perimeter covered by electrodes.
    pub fn coverage(&self) -> f64 {
        self.width() * self.layout.count() as f64 / self.perimeter()
    }

    pub fn sigma(&self, x: [f64; 2]) -> f64 {
        self.config.admittivity.value(x)
    }
}

/// Settings of the data simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSettings {
    /// The fine mesh uses `default_h / refinement`.
    pub refinement: f64,
    pub gap_phase: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            refinement: 2.5,
            gap_phase: 0.5,
            c1: NOISE_C1,
            c2: NOISE_C2,
        }
    }
}

/// Provenance of a simulated data set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub phantom: PhantomId,
    pub seed: u64,
    pub electrodes: usize,
    pub width: f64,
    pub perimeter: f64,
    pub coverage: f64,
    pub electrode_angles: Vec<f64>,
    pub z: f64,
    pub admittivity: Admittivity,
    pub c1: f64,
    pub c2: f64,
    pub h_target: f64,
    pub num_vertices: usize,
    /// Fingerprint of the simulation mesh.
    pub mesh: String,
    pub stand_in: bool,
    pub config_hash: String,
}

impl DataMeta {
    /// Target curve and electrodes the data were simulated on.
    pub fn geometry(&self) -> Result<(TargetBoundary, ElectrodeLayout)> {
        Ok((TargetBoundary::for_id(self.phantom), ElectrodeLayout::new(self.electrode_angles.clone(), self.width)?))
    }
}

/// Stacked noisy voltages `V` (drive-major) with their noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    pub voltages: Vec<f64>,
    pub noise_std: Vec<f64>,
    pub clean: Option<Vec<f64>>,
    pub meta: DataMeta,
}

#[derive(Serialize)]
struct HashInput<'a> {
    phantom: &'a PhantomConfig,
    settings: &'a SimulationSettings,
    seed: u64,
}

/// Hex SHA-256 of the canonical JSON of any configuration value.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Mesh used for data simulation: exact boundary, finer spacing, shifted
/// gap sampling.
pub fn simulation_mesh(phantom: &Phantom, settings: &SimulationSettings) -> Result<Mesh2D> {
    if !(settings.refinement >= 2.0) {
        return Err(Error::InvalidArgument("simulation mesh must be at least twice as fine as the default".into()));
    }
    let h = default_h(&phantom.boundary) / settings.refinement;
    let opts = MeshOptions {
        h_target: Some(h),
        gap_phase: settings.gap_phase,
        ..MeshOptions::default()
    };
    build_mesh(&phantom.boundary, &phantom.layout, &opts)
}

/// Simulates the adjacent-to-first drive data and adds Gaussian noise with
/// variance `c₁²U² + c₂²·spread²`. The noise stream is seeded by `seed`
/// (independently of the electrode perturbation stream).
pub fn simulate(phantom: &Phantom, settings: &SimulationSettings, seed: u64) -> Result<DataSet> {
    let m = phantom.layout.count();
    let mesh = simulation_mesh(phantom, settings)?;
    let sigma = phantom.config.admittivity.nodal(&mesh);
    let drives = DriveBasis::adjacent_to_first(m);
    let clean = simulate_measurements(&mesh, &sigma, &phantom.z, &drives)?;
    let variance = noise_variance(&clean, m, settings.c1, settings.c2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise_std: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let voltages = clean
        .iter()
        .zip(&noise_std)
        .map(|(u, s)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            u + s * e
        })
        .collect();
    let config_hash = config_hash(&HashInput { phantom: &phantom.config, settings, seed })?;
    Ok(DataSet {
        voltages,
        noise_std,
        clean: Some(clean),
        meta: DataMeta {
            phantom: phantom.config.id,
            seed,
            electrodes: m,
            width: phantom.width(),
            perimeter: phantom.perimeter(),
            coverage: phantom.coverage(),
            electrode_angles: phantom.layout.angles().to_vec(),
            z: phantom.config.z,
            admittivity: phantom.config.admittivity.clone(),
            c1: settings.c1,
            c2: settings.c2,
            h_target: mesh.h_target(),
            num_vertices: mesh.num_vertices(),
            mesh: mesh.fingerprint(),
            stand_in: phantom.config.stand_in,
            config_hash,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    drive_j: usize,
    electrode_m: usize,
    voltage: String,
    noise_std: String,
}

/// Scientific notation with 17 significant digits (exact round trip).
fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

impl DataSet {
    pub fn electrodes(&self) -> usize {
        self.meta.electrodes
    }

    /// Noise variances (the diagonal of `Γ_η`).
    pub fn variance(&self) -> Vec<f64> {
        self.noise_std.iter().map(|s| s * s).collect()
    }

    /// CSV with columns `drive_j, electrode_m, voltage, noise_std`
    /// (1-based indices, drive `j` is `e₁ − e_{j+1}`).
    pub fn to_csv(&self) -> Result<String> {
        let m = self.electrodes();
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, (v, s)) in self.voltages.iter().zip(&self.noise_std).enumerate() {
            w.serialize(CsvRow {
                drive_j: i / m + 1,
                electrode_m: i % m + 1,
                voltage: fmt17(*v),
                noise_std: fmt17(*s),
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }

    /// Parses a CSV written by [`DataSet::to_csv`] and checks it against
    /// the sidecar.
    pub fn from_csv(csv_text: &str, meta: DataMeta) -> Result<Self> {
        let m = meta.electrodes;
        let mut r = csv::Reader::from_reader(csv_text.as_bytes());
        let mut voltages = Vec::new();
        let mut noise_std = Vec::new();
        for (i, row) in r.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| Error::Data(format!("row {}: {e}", i + 2)))?;
            if row.drive_j != i / m.max(1) + 1 || row.electrode_m != i % m.max(1) + 1 {
                return Err(Error::Data(format!(
                    "row {}: expected drive {} electrode {}, found {} {}",
                    i + 2,
                    i / m.max(1) + 1,
                    i % m.max(1) + 1,
                    row.drive_j,
                    row.electrode_m
                )));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|e| Error::Data(format!("row {}: {what} '{s}': {e}", i + 2)))
            };
            voltages.push(parse(&row.voltage, "voltage")?);
            let s = parse(&row.noise_std, "noise_std")?;
            if !(s >= 0.0) {
                return Err(Error::Data(format!("row {}: negative noise level", i + 2)));
            }
            noise_std.push(s);
        }
        if voltages.len() != m * (m.saturating_sub(1)) {
            return Err(Error::Data(format!("{} rows for {m} electrodes (expected {})", voltages.len(), m * (m.saturating_sub(1)))));
        }
        Ok(Self { voltages, noise_std, clean: None, meta })
    }

    /// Writes `<stem>.csv` and `<stem>.json`; refuses to replace existing
    /// files unless `force`.
    pub fn write(&self, stem: &std::path::Path, force: bool) -> Result<[std::path::PathBuf; 2]> {
        let csv_path = stem.with_extension("csv");
        let json_path = stem.with_extension("json");
        for p in [&csv_path, &json_path] {
            if p.exists() && !force {
                return Err(Error::Config(format!("{} exists (use --force to overwrite)", p.display())));
            }
        }
        if let Some(dir) = csv_path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&csv_path, self.to_csv()?)?;
        std::fs::write(&json_path, serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok([csv_path, json_path])
    }

    /// Reads a data set from `<stem>.csv` and its sidecar `<stem>.json`.
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let csv_path = path.with_extension("csv");
        let json_path = path.with_extension("json");
        let meta: DataMeta = serde_json::from_str(&std::fs::read_to_string(&json_path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", json_path.display())))?;
        Self::from_csv(&std::fs::read_to_string(&csv_path)?, meta)
    }
}
