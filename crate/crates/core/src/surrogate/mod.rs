//! Gaussian-process surrogates over (routing, deployment) decision points.

pub mod encode;
pub mod gp;
pub mod kernel;
pub mod lbfgs;
pub mod transform;

pub use encode::{Encoder, PreferenceMatrix, RoutingEncoding, ThetaPoint};
pub use gp::{factorize, gram, FitOptions, Gp, Posterior};
pub use kernel::{kernel, kernel_terms, preference_weight, Features, KernelParams};
pub use transform::{Objective, OutputTransform, Standardizer};

use crate::error::Result;

/// Fits the latency and quality surrogates on the same inputs.
pub fn fit(x: &[Features], latency: &[f64], quality: &[f64], opts: &FitOptions) -> Result<(Gp, Gp)> {
    let l = Gp::fit(x.to_vec(), latency, Objective::Latency, opts)?;
    let q = Gp::fit(x.to_vec(), quality, Objective::Quality, opts)?;
    Ok((l, q))
}
