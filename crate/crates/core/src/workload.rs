//! Workload traces, threshold routing and quality estimation.
//!
//! Models are indexed in the order given by the cluster spec. A query with
//! routing score `s` goes to the first model `m` with `s < τ_m`; the last
//! model takes everything from the last threshold up to and including 1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub routing_score: f64,
    /// Quality in [0, 1] per model, aligned with [`Trace::models`].
    pub quality: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub models: Vec<String>,
    pub queries: Vec<Query>,
    pub duration_s: f64,
}

#[derive(Deserialize)]
struct RawQuery {
    id: serde_json::Value,
    arrival_s: f64,
    input_tokens: u32,
    output_tokens: u32,
    routing_score: f64,
    quality: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct RawQueryOut<'a> {
    id: &'a str,
    arrival_s: f64,
    input_tokens: u32,
    output_tokens: u32,
    routing_score: f64,
    quality: BTreeMap<&'a str, f64>,
}

impl Trace {
    pub fn new(models: Vec<String>, mut queries: Vec<Query>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::EmptyTrace);
        }
        for q in &queries {
            validate_query(q, models.len())?;
        }
        queries.sort_by(|a, b| a.arrival_s.total_cmp(&b.arrival_s));
        let duration_s = queries.last().unwrap().arrival_s - queries[0].arrival_s;
        Ok(Trace {
            models,
            queries,
            duration_s,
        })
    }

    /// Parses newline-delimited query records. Quality values are divided by
    /// `quality_scale` (e.g. 100 for percentage accuracy) on the way in.
    pub fn parse(text: &str, models: &[String], quality_scale: f64) -> Result<Self> {
        let mut queries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawQuery = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let id = match raw.id {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let mut quality = Vec::with_capacity(models.len());
            for m in models {
                let v = raw.quality.get(m).ok_or_else(|| {
                    Error::validation(format!("line {line_no}: missing quality entry for model {m}"))
                })?;
                quality.push(v / quality_scale);
            }
            let q = Query {
                id,
                arrival_s: raw.arrival_s,
                input_tokens: raw.input_tokens,
                output_tokens: raw.output_tokens,
                routing_score: raw.routing_score,
                quality,
            };
            validate_query(&q, models.len())
                .map_err(|e| Error::validation(format!("line {line_no}: {e}")))?;
            queries.push(q);
        }
        Trace::new(models.to_vec(), queries)
    }

    pub fn load(path: impl AsRef<Path>, models: &[String], quality_scale: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, models, quality_scale)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.queries {
            let rec = RawQueryOut {
                id: &q.id,
                arrival_s: q.arrival_s,
                input_tokens: q.input_tokens,
                output_tokens: q.output_tokens,
                routing_score: q.routing_score,
                quality: self
                    .models
                    .iter()
                    .map(String::as_str)
                    .zip(q.quality.iter().copied())
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("query serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_jsonl().as_bytes()).into()
    }

    /// Routing scores in ascending order.
    pub fn sorted_scores(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.queries.iter().map(|q| q.routing_score).collect();
        s.sort_by(f64::total_cmp);
        s
    }
}

fn validate_query(q: &Query, n_models: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&q.routing_score) {
        return Err(Error::validation(format!(
            "query {}: routing_score {} outside [0, 1]",
            q.id, q.routing_score
        )));
    }
    if !(q.arrival_s.is_finite() && q.arrival_s >= 0.0) {
        return Err(Error::validation(format!("query {}: bad arrival time", q.id)));
    }
    if q.input_tokens == 0 || q.output_tokens == 0 {
        return Err(Error::validation(format!("query {}: token counts must be >= 1", q.id)));
    }
    if q.quality.len() != n_models {
        return Err(Error::validation(format!("query {}: quality vector length", q.id)));
    }
    if let Some(v) = q.quality.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("query {}: quality {v} outside [0, 1]", q.id)));
    }
    Ok(())
}

/// Share of the system load sent to each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LoadFractions(Vec<f64>);

impl LoadFractions {
    pub fn new(f: Vec<f64>) -> Result<Self> {
        if f.is_empty() {
            return Err(Error::validation("load fractions need at least one model"));
        }
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::validation("load fractions must be finite and >= 0"));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::validation(format!("load fractions sum to {sum}, not 1")));
        }
        Ok(LoadFractions(f))
    }

    /// Rescales nonnegative weights onto the simplex.
    pub fn normalized(weights: &[f64]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || weights.iter().any(|v| *v < 0.0) {
            return Err(Error::validation("cannot normalize weights"));
        }
        let mut f: Vec<f64> = weights.iter().map(|w| w / sum).collect();
        // put the rounding residue on the largest entry so the sum is exact
        let resid = 1.0 - f.iter().sum::<f64>();
        let imax = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        f[imax] = (f[imax] + resid).max(0.0);
        LoadFractions::new(f)
    }

    /// All load on a single model.
    pub fn single(n_models: usize, model: usize) -> Self {
        let mut f = vec![0.0; n_models];
        f[model] = 1.0;
        LoadFractions(f)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for LoadFractions {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        LoadFractions::new(v)
    }
}

impl From<LoadFractions> for Vec<f64> {
    fn from(f: LoadFractions) -> Vec<f64> {
        f.0
    }
}

/// The M-1 interior routing thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RoutingConfig(Vec<f64>);

impl RoutingConfig {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::validation("thresholds must lie in [0, 1]"));
        }
        if thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation("thresholds must be nondecreasing"));
        }
        Ok(RoutingConfig(thresholds))
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.0
    }

    pub fn num_models(&self) -> usize {
        self.0.len() + 1
    }
}

impl TryFrom<Vec<f64>> for RoutingConfig {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        RoutingConfig::new(v)
    }
}

impl From<RoutingConfig> for Vec<f64> {
    fn from(r: RoutingConfig) -> Vec<f64> {
        r.0
    }
}

/// Index of the model that serves a query with this score.
pub fn route_score(score: f64, tau: &RoutingConfig) -> usize {
    tau.0
        .iter()
        .position(|t| score < *t)
        .unwrap_or(tau.0.len())
}

pub fn route(q: &Query, tau: &RoutingConfig) -> usize {
    route_score(q.routing_score, tau)
}

/// Thresholds that send `round(F_i * n)` queries below the i-th cut, where
/// `F_i` is the cumulative load fraction. The cut is placed at the first
/// sorted score that must go to a later model, so without ties the counts
/// are exact.
pub fn fractions_to_thresholds(f: &LoadFractions, trace: &Trace) -> RoutingConfig {
    let sorted = trace.sorted_scores();
    thresholds_from_sorted(f, &sorted)
}

pub fn thresholds_from_sorted(f: &LoadFractions, sorted: &[f64]) -> RoutingConfig {
    let n = sorted.len();
    let mut cumulative = 0.0;
    let mut taus = Vec::with_capacity(f.len().saturating_sub(1));
    let mut prev = 0.0_f64;
    for fm in &f.0[..f.len() - 1] {
        cumulative += fm;
        let k = ((cumulative * n as f64).round() as usize).min(n);
        let tau = if k == 0 {
            0.0
        } else if k == n {
            1.0
        } else {
            sorted[k]
        };
        prev = prev.max(tau);
        taus.push(prev);
    }
    RoutingConfig(taus)
}

/// Empirical share of the trace falling into each routing bin.
pub fn thresholds_to_fractions(tau: &RoutingConfig, trace: &Trace) -> LoadFractions {
    let mut counts = vec![0usize; tau.num_models()];
    for q in &trace.queries {
        counts[route(q, tau)] += 1;
    }
    let n = trace.len() as f64;
    LoadFractions(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Mean quality of the model each query is routed to.
pub fn estimate_quality(trace: &Trace, tau: &RoutingConfig) -> f64 {
    let total: f64 = trace
        .queries
        .iter()
        .map(|q| q.quality[route(q, tau)])
        .sum();
    total / trace.len() as f64
}

/// Per-model request rates, queries per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadDistribution(pub Vec<f64>);

pub fn load_distribution(f: &LoadFractions, total_qps: f64) -> LoadDistribution {
    LoadDistribution(f.0.iter().map(|fm| fm * total_qps).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn models2() -> Vec<String> {
        vec!["small".into(), "large".into()]
    }

    pub(crate) fn ten_score_trace() -> Trace {
        let queries = (1..=10)
            .map(|i| Query {
                id: i.to_string(),
                arrival_s: i as f64,
                input_tokens: 10,
                output_tokens: 5,
                routing_score: i as f64 / 10.0,
                quality: vec![0.5, 1.0],
            })
            .collect();
        Trace::new(models2(), queries).unwrap()
    }

    fn line(id: u32, score: f64) -> String {
        format!(
            r#"{{"id": {id}, "arrival_s": {id}.0, "input_tokens": 12, "output_tokens": 4, "routing_score": {score}, "quality": {{"small": 0.5, "large": 0.9}}, "extra": "ignored"}}"#
        )
    }

    #[test]
    fn parses_three_lines() {
        let text = [line(3, 0.2), line(1, 0.5), line(2, 0.9)].join("\n");
        let t = Trace::parse(&text, &models2(), 1.0).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.queries[0].id, "1");
        assert_eq!(t.duration_s, 2.0);
    }

    #[test]
    fn rejects_out_of_range_score() {
        let err = Trace::parse(&line(1, 1.3), &models2(), 1.0).unwrap_err();
        assert!(err.to_string().contains("routing_score"), "{err}");
    }

    #[test]
    fn rejects_empty_file() {
        let err = Trace::parse("\n\n", &models2(), 1.0).unwrap_err();
        assert_eq!(err.to_string(), "empty trace");
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = format!("{}\nnot json", line(1, 0.1));
        match Trace::parse(&text, &models2(), 1.0).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_quality_names_model() {
        let text = r#"{"id": 1, "arrival_s": 0, "input_tokens": 1, "output_tokens": 1, "routing_score": 0.1, "quality": {"small": 0.5}}"#;
        let err = Trace::parse(text, &models2(), 1.0).unwrap_err();
        assert!(err.to_string().contains("large"), "{err}");
    }

    #[test]
    fn quality_scale_normalizes() {
        let text = r#"{"id": "a", "arrival_s": 0, "input_tokens": 1, "output_tokens": 1, "routing_score": 0.1, "quality": {"small": 80, "large": 95}}"#;
        let t = Trace::parse(text, &models2(), 100.0).unwrap();
        assert_eq!(t.queries[0].quality, vec![0.8, 0.95]);
    }

    #[test]
    fn simplex_boundaries() {
        let t = ten_score_trace();
        let all_small = LoadFractions::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(fractions_to_thresholds(&all_small, &t).thresholds(), &[1.0]);
        let all_large = LoadFractions::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(fractions_to_thresholds(&all_large, &t).thresholds(), &[0.0]);
    }

    #[test]
    fn half_split_routes_exactly_five() {
        let t = ten_score_trace();
        let f = LoadFractions::new(vec![0.5, 0.5]).unwrap();
        let tau = fractions_to_thresholds(&f, &t);
        // scores 0.1..=0.5 are below the cut, 0.6..=1.0 are not
        assert_eq!(tau.thresholds(), &[0.6]);
        let to_small = t.queries.iter().filter(|q| route(q, &tau) == 0).count();
        assert_eq!(to_small, 5);
    }

    #[test]
    fn threshold_half_gives_four_six() {
        let t = ten_score_trace();
        let f = thresholds_to_fractions(&RoutingConfig::new(vec![0.5]).unwrap(), &t);
        assert!((f.as_slice()[0] - 0.4).abs() < 1e-12);
        assert!((f.as_slice()[1] - 0.6).abs() < 1e-12);
        let f = thresholds_to_fractions(&RoutingConfig::new(vec![0.0]).unwrap(), &t);
        assert_eq!(f.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn route_bins() {
        let tau = RoutingConfig::new(vec![0.5]).unwrap();
        assert_eq!(route_score(0.3, &tau), 0);
        assert_eq!(route_score(0.5, &tau), 1);
        let tau3 = RoutingConfig::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(route_score(0.99, &tau3), 2);
        assert_eq!(route_score(1.0, &tau3), 2);
    }

    #[test]
    fn quality_examples() {
        let t = ten_score_trace();
        // 4 queries at 0.5 on the small model, 6 at 1.0 on the large model
        let q = estimate_quality(&t, &RoutingConfig::new(vec![0.5]).unwrap());
        assert!((q - 0.8).abs() < 1e-12);
        let q = estimate_quality(&t, &RoutingConfig::new(vec![0.0]).unwrap());
        assert!((q - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_distribution_examples() {
        let w = load_distribution(&LoadFractions::new(vec![0.7345, 0.2655]).unwrap(), 100.0);
        assert!((w.0[0] - 73.45).abs() < 1e-9 && (w.0[1] - 26.55).abs() < 1e-9);
        let w = load_distribution(&LoadFractions::new(vec![1.0, 0.0]).unwrap(), 40.0);
        assert_eq!(w.0, vec![40.0, 0.0]);
        let w = load_distribution(&LoadFractions::new(vec![0.5, 0.5]).unwrap(), 8.0);
        assert_eq!(w.0, vec![4.0, 4.0]);
    }

    #[test]
    fn fractions_validation() {
        assert!(LoadFractions::new(vec![0.5, 0.6]).is_err());
        assert!(LoadFractions::new(vec![-0.1, 1.1]).is_err());
        let f = LoadFractions::normalized(&[1.0, 2.0, 3.0]).unwrap();
        assert!((f.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn jsonl_round_trip() {
        let t = ten_score_trace();
        let back = Trace::parse(&t.to_jsonl(), &t.models, 1.0).unwrap();
        assert_eq!(back, t);
    }
}
