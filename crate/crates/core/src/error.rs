use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    /// A model or controller evaluation produced a non-finite value.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// The backup flow (or its sensitivities) left the finite range.
    #[error("backup flow diverged at tau = {tau}")]
    DivergedFlow { tau: f64 },
    /// The aircraft kinematics are singular at |theta| = pi/2.
    #[error("gimbal singularity: |cos(theta)| = {cos_theta:e}")]
    GimbalSingularity { cos_theta: f64 },
    /// Invalid argument or configuration value.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
