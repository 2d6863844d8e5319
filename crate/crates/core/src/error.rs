use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("accuracy error: {0}")]
    Accuracy(String),
    #[error("invalid nonlinearity: {0}")]
    Nonlinearity(String),
    #[error("shooting failed: {0}")]
    Shooting(String),
    #[error("resolution error: {0}")]
    Resolution(String),
    #[error("unstable step at t = {t}: sup = {sup}, try dt <= {suggested_dt}")]
    Unstable { t: f64, sup: f64, suggested_dt: f64 },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
