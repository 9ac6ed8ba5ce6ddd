use std::io;

use crate::engine::EngineError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("sensor at ({x:.2}, {y:.2}) maps to pixel ({row}, {col}), outside the grid or within {margin} pixels of its border")]
    OutOfBounds {
        x: f64,
        y: f64,
        row: i64,
        col: i64,
        margin: usize,
    },
    #[error("missing variable grid: {0}")]
    MissingVariable(String),
    #[error("sensor {sensor} has no reading for {date}")]
    MissingReading { sensor: String, date: String },
    #[error("explicit time step underflowed below {min_dt} day while enforcing stability")]
    StabilityFailure { min_dt: f64 },
    #[error("could only place {placed} of {requested} sensors under the margin/separation constraints")]
    PlacementFailure { requested: usize, placed: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("need at least 5 sensors for cross-validation, got {0}")]
    InsufficientSensors(usize),
    #[error("degenerate design matrix: {0}")]
    Degenerate(String),
    #[error("no sensor readings available for interpolation")]
    NoSensors,
    #[error("empty input")]
    EmptyInput,
    #[error("aerodynamic resistance must be positive, got {0}")]
    NonPositiveResistance(f64),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::StabilityFailure { .. } | Error::Numeric(_) | Error::Engine(_) => 3,
            _ => 2,
        }
    }
}
