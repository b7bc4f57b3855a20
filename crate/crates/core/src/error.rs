use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("boundary radius is not positive (min sampled radius {min_radius:.3e} at phi = {phi:.4})")]
    NonPositiveRadius { min_radius: f64, phi: f64 },

    #[error("invalid electrode layout: {0}")]
    InvalidLayout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh generation failed: {0}")]
    Mesh(String),

    #[error("point ({x:.6}, {y:.6}) lies outside the reconstruction grid")]
    OutsideGrid { x: f64, y: f64 },

    #[error("admittivity must be positive (min nodal value {0:.3e})")]
    NonPositiveAdmittivity(f64),

    #[error("factorization failed: matrix not positive definite at pivot {0}")]
    NotPositiveDefinite(usize),

    #[error("linear solve residual {0:.3e} exceeds tolerance")]
    Residual(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unknown phantom id '{0}'")]
    UnknownPhantom(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data file error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Data(_)
            | Error::UnknownPhantom(_)
            | Error::InvalidArgument(_)
            | Error::InvalidLayout(_)
            | Error::NonPositiveRadius { .. }
            | Error::Dimension(_)
            | Error::Json(_)
            | Error::Io(_) => 1,
            _ => 2,
        }
    }
}
