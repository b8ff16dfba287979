//! Hardware and model descriptions shared by the simulator, the
//! performance database and the planners.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A GPU type available in the cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    pub name: String,
    /// Rental price of one device, currency per hour.
    pub unit_cost_per_hour: f64,
    /// Effective dense compute throughput, TFLOP/s.
    pub tflops: f64,
    /// Achievable HBM bandwidth, GB/s.
    pub hbm_bw: f64,
    /// Device memory, GB.
    pub mem_gb: f64,
    /// Largest tensor-parallel degree the intra-node links support.
    pub max_tp: u32,
    /// Number of devices available.
    pub count: u32,
    /// Intra-node link bandwidth, GB/s.
    pub interconnect_bw: f64,
}

impl GpuSpec {
    pub fn unit_cost(&self) -> Cents {
        Cents::from_dollars(self.unit_cost_per_hour)
    }
}

/// Per-token cost coefficients of a served model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub weight_bytes: f64,
    /// Prefill FLOPs per input token.
    pub flops_per_token: f64,
    pub kv_bytes_per_token: f64,
    pub n_layers: u32,
    /// Activation bytes per token crossing a pipeline stage boundary.
    #[serde(default)]
    pub activation_bytes_per_token: f64,
    /// Sequence length reserved when checking that one request fits.
    #[serde(default = "default_context_tokens")]
    pub context_tokens: u32,
}

fn default_context_tokens() -> u32 {
    2048
}

/// Calibration of the analytic latency model for one GPU type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCoeffs {
    /// GPU type these coefficients apply to; `None` is the fallback entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu: Option<String>,
    /// Tensor-parallel speed-up coefficient K(N) keyed by degree.
    pub tp_speedup: BTreeMap<u32, f64>,
    /// Fixed latency per pipeline stage boundary, seconds.
    pub pp_comm_alpha: f64,
    /// Effective inter-stage bandwidth, GB/s.
    pub pp_comm_beta: f64,
}

impl Default for CalibrationCoeffs {
    fn default() -> Self {
        CalibrationCoeffs {
            gpu: None,
            tp_speedup: [(1, 1.0), (2, 0.9), (4, 0.8), (8, 0.7)].into_iter().collect(),
            pp_comm_alpha: 0.0,
            pp_comm_beta: 0.0,
        }
    }
}

impl CalibrationCoeffs {
    /// Coefficients with K(N) = 1 everywhere and free pipeline communication.
    pub fn ideal() -> Self {
        CalibrationCoeffs {
            gpu: None,
            tp_speedup: [(1, 1.0), (2, 1.0), (4, 1.0), (8, 1.0)].into_iter().collect(),
            pp_comm_alpha: 0.0,
            pp_comm_beta: 0.0,
        }
    }

    /// K(tp). Degrees missing from the table use the nearest smaller entry.
    pub fn speedup(&self, tp: u32) -> f64 {
        self.tp_speedup
            .range(..=tp)
            .next_back()
            .map(|(_, k)| *k)
            .unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        match self.tp_speedup.get(&1) {
            Some(k) if (*k - 1.0).abs() < 1e-12 => {}
            _ => return Err(Error::validation("tp_speedup must map 1 to 1.0")),
        }
        let mut prev = f64::INFINITY;
        for (tp, k) in &self.tp_speedup {
            if !(*k > 0.0 && *k <= 1.0) {
                return Err(Error::validation(format!("K({tp}) = {k} outside (0, 1]")));
            }
            if *k > prev {
                return Err(Error::validation("tp_speedup must be nonincreasing in tp"));
            }
            prev = *k;
        }
        if self.pp_comm_alpha < 0.0 || self.pp_comm_beta < 0.0 {
            return Err(Error::validation("pipeline communication coefficients must be >= 0"));
        }
        Ok(())
    }
}

/// The cluster-spec file: GPU types, model types and calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub gpus: Vec<GpuSpec>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub coeffs: Vec<CalibrationCoeffs>,
}

impl ClusterSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ClusterSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.gpus.is_empty() {
            return Err(Error::validation("cluster spec needs at least one model and one gpu"));
        }
        for g in &self.gpus {
            let positive = [g.unit_cost_per_hour, g.tflops, g.hbm_bw, g.mem_gb, g.interconnect_bw];
            if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::validation(format!("gpu {}: all rates must be positive", g.name)));
            }
            if ![1, 2, 4, 8].contains(&g.max_tp) {
                return Err(Error::validation(format!("gpu {}: max_tp must be 1, 2, 4 or 8", g.name)));
            }
        }
        for m in &self.models {
            let positive = [m.weight_bytes, m.flops_per_token, m.kv_bytes_per_token];
            if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || m.n_layers == 0 {
                return Err(Error::validation(format!("model {}: coefficients must be positive", m.name)));
            }
            if m.activation_bytes_per_token < 0.0 {
                return Err(Error::validation(format!("model {}: negative activation bytes", m.name)));
            }
        }
        let mut names: Vec<&str> = self.gpus.iter().map(|g| g.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate gpu name"));
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate model name"));
        }
        for c in &self.coeffs {
            c.validate()?;
            if let Some(gpu) = &c.gpu {
                if self.gpu(gpu).is_none() {
                    return Err(Error::validation(format!("coeffs reference unknown gpu {gpu}")));
                }
            }
        }
        Ok(())
    }

    pub fn model_names(&self) -> Vec<String> {
        self.models.iter().map(|m| m.name.clone()).collect()
    }

    pub fn gpu(&self, name: &str) -> Option<&GpuSpec> {
        self.gpus.iter().find(|g| g.name == name)
    }

    pub fn model(&self, name: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.name == name)
    }

    pub fn gpu_index(&self, name: &str) -> Option<usize> {
        self.gpus.iter().position(|g| g.name == name)
    }

    pub fn model_index(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m.name == name)
    }

    /// Calibration for a GPU type: its own entry, else the fallback entry,
    /// else the built-in defaults.
    pub fn coeffs_for(&self, gpu: &str) -> CalibrationCoeffs {
        self.coeffs
            .iter()
            .find(|c| c.gpu.as_deref() == Some(gpu))
            .or_else(|| self.coeffs.iter().find(|c| c.gpu.is_none()))
            .cloned()
            .unwrap_or_default()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("cluster spec serializes");
        Sha256::digest(&bytes).into()
    }

    /// Cost of an allocation given as (gpu name, count) pairs.
    pub fn allocation_cost<'a>(
        &self,
        allocation: impl IntoIterator<Item = (&'a str, u32)>,
    ) -> Result<Cents> {
        let mut total = Cents(0);
        for (name, count) in allocation {
            let gpu = self
                .gpu(name)
                .ok_or_else(|| Error::NotFound(format!("gpu {name}")))?;
            total = total + gpu.unit_cost() * count;
        }
        Ok(total)
    }
}

/// Money in integer cents. Unit prices are quoted to the cent, so integer
/// arithmetic keeps budget comparisons exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Cents(pub i64);

impl Cents {
    pub fn from_dollars(d: f64) -> Self {
        Cents((d * 100.0).round() as i64)
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl std::ops::Add for Cents {
    type Output = Cents;
    fn add(self, rhs: Cents) -> Cents {
        Cents(self.0 + rhs.0)
    }
}

impl std::ops::Mul<u32> for Cents {
    type Output = Cents;
    fn mul(self, rhs: u32) -> Cents {
        Cents(self.0 * rhs as i64)
    }
}

impl std::iter::Sum for Cents {
    fn sum<I: Iterator<Item = Cents>>(iter: I) -> Cents {
        iter.fold(Cents(0), |a, b| a + b)
    }
}

impl fmt::Display for Cents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:02}/h", self.0 / 100, self.0 % 100)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speedup_falls_back_to_smaller_degree() {
        let c = CalibrationCoeffs::default();
        assert_eq!(c.speedup(1), 1.0);
        assert_eq!(c.speedup(4), 0.8);
        assert_eq!(c.speedup(3), 0.9);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_increasing_speedup() {
        let mut c = CalibrationCoeffs::default();
        c.tp_speedup.insert(8, 0.95);
        assert!(c.validate().is_err());
    }

    #[test]
    fn cents_display() {
        assert_eq!(Cents(3224).to_string(), "$32.24/h");
        assert_eq!(Cents::from_dollars(0.89) * 24, Cents(2136));
    }
}
