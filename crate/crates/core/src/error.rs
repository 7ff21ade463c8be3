use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("codebook generation drew {attempts} candidates but accepted only {accepted} of {wanted} vectors; dimension too small")]
    AttemptsExhausted {
        attempts: usize,
        accepted: usize,
        wanted: usize,
    },

    #[error("encoding block {slot} has norm {norm:e}, expected about {expected:e}; slots collide")]
    AmbiguousBlock {
        slot: usize,
        norm: f64,
        expected: f64,
    },

    #[error("oracle cannot certify the maximum of {term}: {reason}")]
    OracleDomain { term: &'static str, reason: String },

    #[error("reference enumeration needs {count} candidates, budget is {budget}")]
    ReferenceTooLarge { count: u128, budget: u128 },

    #[error("cannot force the SGD good event with {universe} codebook vectors and n = {n}; need at least n + 1")]
    InfeasibleForcing { n: usize, universe: usize },

    #[error("good event violated: {0}")]
    EventViolated(String),

    #[error("closed form not available: {0}")]
    InvalidClosedForm(String),

    #[error("{0} is out of range")]
    OutOfRange(String),

    #[error("Gaussian draw degenerated {0} times in a row")]
    DegenerateDraw(usize),

    #[error("universe of {0} vectors is too large; at most 40 are supported")]
    UniverseTooLarge(usize),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("local expansion is valid only within radius {radius:e}, got a perturbation of norm {norm:e}")]
    OutsideLocalRadius { radius: f64, norm: f64 },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown acceptance suite `{0}`")]
    UnknownSuite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
