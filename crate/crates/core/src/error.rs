use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("axis {axis} out of range for a {dim}-dimensional torus")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error("site {site} out of range for a torus with {sites} sites")]
    SiteOutOfRange { site: usize, sites: usize },

    #[error("empty source: no particle to move from site {0}")]
    EmptySource(usize),

    #[error("sites {0} and {1} are not nearest neighbours")]
    NotNeighbours(usize, usize),

    #[error("block of radius {radius} does not fit in a torus of side {side}")]
    BlockTooLarge { radius: usize, side: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("occupancy {occupancy} at site {site} exceeds the g-table cap {cap}")]
    OccupancyCap {
        site: usize,
        occupancy: u32,
        cap: usize,
    },

    #[error("g({k}) requested beyond the tabulated range (cap {cap})")]
    BeyondTable { k: usize, cap: usize },

    #[error("fugacity {psi} outside the evaluable range [0, {max})")]
    FugacityOutOfRange { psi: f64, max: f64 },

    #[error("partition series did not converge within {0} terms")]
    SeriesNotConverged(usize),

    #[error("density {0} is beyond the evaluable density range")]
    BracketFailure(f64),

    #[error("operation defined for the m=2 kernel only (got {0})")]
    UnsupportedKernel(String),

    #[error("hyperplane has {size} configurations, limit is {limit}")]
    HyperplaneTooLarge { size: u128, limit: u128 },

    #[error("time step {dt} violates the CFL bound {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("density {rho} leaves the flux table range [{lo}, {hi}]")]
    TableRange { rho: f64, lo: f64, hi: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by a failure while
    /// computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGeometry(_)
                | Error::AxisOutOfRange { .. }
                | Error::SiteOutOfRange { .. }
                | Error::BlockTooLarge { .. }
                | Error::InvalidParameter { .. }
                | Error::UnsupportedKernel(_)
                | Error::HyperplaneTooLarge { .. }
                | Error::Parse(_)
        )
    }
}
