//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough
//! location detail (row, column, sample id, component index) that a CLI
//! message alone pinpoints the offending input.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {msg}")]
    CsvFormat { path: String, msg: String },

    #[error("malformed header in {path}: {msg}")]
    CsvHeader { path: String, msg: String },

    #[error("bad value at row {row}, column \"{column}\": {msg}")]
    CsvValue {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("wavelength grid is not equally spaced: column \"{column}\" breaks the spacing inferred from the first two columns")]
    UnevenGrid { column: String },

    #[error("invalid wavelength grid: {msg}")]
    InvalidGrid { msg: String },

    #[error("invalid dataset: {msg}")]
    InvalidDataset { msg: String },

    #[error("requested region [{low}, {high}] nm contains fewer than two grid points")]
    RegionOutsideGrid { low: f64, high: f64 },

    #[error("invalid split: {msg}")]
    InvalidSplit { msg: String },

    #[error("split produced an empty {subset} subset")]
    EmptySubset { subset: &'static str },

    #[error("invalid config: {msg}")]
    InvalidConfig { msg: String },

    #[error("scatter-correction basis is rank deficient (smallest singular value {sigma_min:.3e}); training spectra are collinear with the polynomial terms")]
    CollinearBasis { sigma_min: f64 },

    #[error("scatter correction failed for sample \"{sample_id}\": multiplicative coefficient {coeff:.3e} is below 1e-8")]
    DegenerateScatterFit { sample_id: String, coeff: f64 },

    #[error("cannot standardize: global standard deviation of the training spectra is zero")]
    ZeroSpread,

    #[error("target values have zero variance; nothing to regress on")]
    ConstantTarget,

    #[error("latent component {component} collapsed: weight vector norm is zero")]
    ZeroWeight { component: usize },

    #[error("invalid cross-validation setup: {msg}")]
    InvalidCv { msg: String },

    #[error("outlier screen flagged every sample; refusing to empty the dataset")]
    AllOutliers,

    #[error("invalid network shape: {msg}")]
    InvalidNetworkShape { msg: String },

    #[error("input length {got} does not match the network input length {expected}")]
    InputLengthMismatch { got: usize, expected: usize },

    #[error("stale forward cache: model has been updated since the cache was produced")]
    StaleCache,

    #[error("non-finite {what} encountered during training (epoch {epoch})")]
    NonFiniteTraining {
        what: &'static str,
        epoch: usize,
        /// Epoch records accumulated before the abort, for post-mortems.
        history: Box<crate::nn::TrainHistory>,
    },

    #[error("loss on an empty residual vector is undefined")]
    EmptyResiduals,

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("invalid search space: {msg}")]
    InvalidSearchSpace { msg: String },

    #[error("covariance factorization failed even with jitter {max_jitter:.1e} on the diagonal")]
    CovarianceNotPd { max_jitter: f64 },

    #[error("every trial failed; no hyperparameter point could be evaluated")]
    AllTrialsFailed,

    #[error("length mismatch: {left} has {left_len} entries, {right} has {right_len}")]
    LengthMismatch {
        left: &'static str,
        left_len: usize,
        right: &'static str,
        right_len: usize,
    },

    #[error("model was saved for a different binary format: {msg}")]
    BadModelFile { msg: String },

    #[error("prepared artifacts in {dir} were produced from a different config (hash {found} != {expected}); re-run prepare")]
    StaleArtifacts {
        dir: String,
        found: String,
        expected: String,
    },

    #[error("missing artifact {path}; run `{produced_by}` first")]
    MissingArtifact { path: String, produced_by: String },

    #[error("json error in {context}: {msg}")]
    Json { context: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            msg: err.to_string(),
        }
    }
}
