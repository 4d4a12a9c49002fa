use thiserror::Error;

/// Errors raised by estimation and smoothing routines.
#[derive(Error, Debug)]
pub enum SimixError {
    #[error("invalid bandwidth: {0} (must be positive and finite)")]
    InvalidBandwidth(f64),

    #[error("empty data: {0}")]
    EmptyData(&'static str),

    #[error("degenerate span: all index values equal ({0}); the index carries no information")]
    DegenerateSpan(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("starved neighborhood at grid point {grid_point}: kernel mass {mass:.3e} below threshold")]
    StarvedNeighborhood { grid_point: f64, mass: f64 },

    #[error("degenerate index vector: norm {0:.3e} too small to normalize")]
    DegenerateIndex(f64),

    #[error("rank-deficient covariance: eigenvalue {min:.3e} below floor {floor:.3e}")]
    RankDeficient { min: f64, floor: f64 },

    #[error("slicing error: {0}")]
    Slicing(String),

    #[error("component collapse: component {component} has effective weight {weight:.3e} < {needed}")]
    ComponentCollapse {
        component: usize,
        weight: f64,
        needed: usize,
    },

    #[error("estimation failure in {stage}: {message}")]
    Estimation { stage: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, SimixError>;
