//! Output transforms applied before the surrogates see the objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to qualities before the logit.
pub const QUALITY_EPS: f64 = 1e-6;

pub fn log_latency(l: f64) -> Result<f64> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::validation(format!("latency {l} outside the log domain")));
    }
    Ok(l.ln())
}

/// Logit of a quality clamped to [eps, 1 - eps]. The flag reports clamping.
pub fn logit_quality(q: f64) -> (f64, bool) {
    let c = q.clamp(QUALITY_EPS, 1.0 - QUALITY_EPS);
    ((c / (1.0 - c)).ln(), c != q)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-mean, unit-variance scaling fitted on a training set. Uses the
/// sample standard deviation; constant or single-point sets keep unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn fit(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Standardizer { mean: 0.0, std: 1.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Standardizer {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Natural log of latency, seconds.
    Latency,
    /// Logit of quality.
    Quality,
}

/// Maps a raw objective value to the model space and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputTransform {
    pub objective: Objective,
    pub standardizer: Standardizer,
}

impl OutputTransform {
    /// Unstandardized transform of a raw value.
    pub fn warp(objective: Objective, raw: f64) -> Result<f64> {
        match objective {
            Objective::Latency => log_latency(raw),
            Objective::Quality => Ok(logit_quality(raw).0),
        }
    }

    pub fn unwarp(objective: Objective, w: f64) -> f64 {
        match objective {
            Objective::Latency => w.exp(),
            Objective::Quality => sigmoid(w),
        }
    }

    pub fn fit(objective: Objective, raw: &[f64]) -> Result<(Self, Vec<f64>)> {
        let warped = raw
            .iter()
            .map(|r| Self::warp(objective, *r))
            .collect::<Result<Vec<_>>>()?;
        let standardizer = Standardizer::fit(&warped);
        let z = warped.iter().map(|w| standardizer.forward(*w)).collect();
        Ok((
            OutputTransform {
                objective,
                standardizer,
            },
            z,
        ))
    }

    pub fn forward(&self, raw: f64) -> Result<f64> {
        Ok(self.standardizer.forward(Self::warp(self.objective, raw)?))
    }

    pub fn inverse(&self, z: f64) -> f64 {
        Self::unwarp(self.objective, self.standardizer.inverse(z))
    }
}
