//! Constant profiles for iteration and sample counts.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfmError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Faithful,
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = SfmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "faithful" => Ok(Profile::Faithful),
            "desk" => Ok(Profile::Desk),
            other => Err(SfmError::Config(format!("unknown profile '{other}'"))),
        }
    }
}

/// Multipliers applied to every iteration or sample count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub profile: Profile,
    /// Mirror-descent iterations per truncated certificate.
    pub c_m: f64,
    /// Stop mirror descent once the running certificate provably verifies.
    pub early_exit: bool,
    /// Parallel dim-reduction loop runs while phi >= ||u||_inf / divisor.
    pub par_dim_divisor: f64,
    /// FTRL iterations per SubmodularFTRL run.
    pub c_ftrl: f64,
    /// Independent FTRL repetitions per stochastic certificate.
    pub c_reps: f64,
    /// Estimator draws in sequential dim-reduction.
    pub c_z: f64,
    /// Oversampling draws in sequential arc finding.
    pub c_a: f64,
    /// Per-element sample cap in sequential arc finding.
    pub c_p: f64,
    /// Sequential dim-reduction runs while phi >= ||u||_inf / (divisor * k).
    pub seq_dim_divisor: f64,
    /// Hard cap on phi-halving rounds.
    pub max_phi_rounds: usize,
}

/// Factor that brings the faithful stochastic-certificate counts down to a
/// size that runs in seconds at n = 8.
pub const DESK_FACTOR: f64 = 3e-4;

impl Constants {
    pub fn faithful() -> Self {
        Constants {
            profile: Profile::Faithful,
            c_m: 1.0,
            early_exit: false,
            par_dim_divisor: 4.0,
            c_ftrl: 1.0,
            c_reps: 1.0,
            c_z: 100.0,
            c_a: 1e6,
            c_p: 1e5,
            seq_dim_divisor: 12.0,
            max_phi_rounds: 128,
        }
    }

    pub fn desk() -> Self {
        Constants {
            profile: Profile::Desk,
            c_m: 1.0,
            early_exit: true,
            par_dim_divisor: 4.0,
            c_ftrl: 2e-5,
            c_reps: 1e-6,
            c_z: 1.0,
            c_a: 12.0,
            c_p: 1.0,
            seq_dim_divisor: 12.0,
            max_phi_rounds: 128,
        }
    }

    /// Faithful constants with the FTRL and repetition counts multiplied by
    /// `factor`. The remaining counts are untouched.
    pub fn faithful_scaled(factor: f64) -> Self {
        let mut c = Constants::faithful();
        c.c_ftrl *= factor;
        c.c_reps *= factor;
        c
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Faithful => Constants::faithful(),
            Profile::Desk => Constants::desk(),
        }
    }
}

impl Default for Constants {
    fn default() -> Self {
        Constants::desk()
    }
}

/// Natural log of max(n, 2).
pub fn log_n(n: usize) -> f64 {
    (n.max(2) as f64).ln()
}

/// `ceil(x)` clamped to at least 1.
pub fn count(x: f64) -> usize {
    if !x.is_finite() || x > 1e15 {
        return usize::MAX / 4;
    }
    (x.ceil() as usize).max(1)
}
