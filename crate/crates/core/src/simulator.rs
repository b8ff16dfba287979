//! Discrete-event simulation of one model replica.
//!
//! Prefill is compute-bound: a request costs its FLOPs over the sharded
//! compute rate, and a batch of prefills costs the sum of its members.
//! Decode is memory-bound: one step streams the weight shard plus the
//! resident KV cache, and its duration does not depend on batch size.
//! Tensor parallelism divides work by `tp * K(tp)`; pipeline parallelism
//! splits layers into ceil-balanced stages and pays a per-boundary cost.

use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{CalibrationCoeffs, ClusterSpec, GpuSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::workload::Trace;

/// Percentiles reported for every simulation, in order.
pub const PERCENTILES: [f64; 6] = [50.0, 75.0, 90.0, 95.0, 99.0, 100.0];
/// Index of P95 inside a quantile vector.
pub const P95: usize = 3;

const GB: f64 = 1e9;
const TFLOP: f64 = 1e12;

/// A replica configuration by name, as stored in files.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub model: String,
    pub gpu: String,
    pub n_gpus: u32,
    pub tp: u32,
    pub pp: u32,
}

impl ReplicaConfig {
    pub fn new(model: &str, gpu: &str, tp: u32, pp: u32) -> Self {
        ReplicaConfig {
            model: model.to_string(),
            gpu: gpu.to_string(),
            n_gpus: tp * pp,
            tp,
            pp,
        }
    }

    pub fn resolve<'a>(&self, spec: &'a ClusterSpec) -> Result<Replica<'a>> {
        let model = spec
            .model(&self.model)
            .ok_or_else(|| Error::NotFound(format!("model {}", self.model)))?;
        let gpu = spec
            .gpu(&self.gpu)
            .ok_or_else(|| Error::NotFound(format!("gpu {}", self.gpu)))?;
        Ok(Replica {
            model,
            gpu,
            n_gpus: self.n_gpus,
            tp: self.tp,
            pp: self.pp,
        })
    }
}

impl fmt::Display for ReplicaConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}x{}(tp={},pp={})", self.model, self.n_gpus, self.gpu, self.tp, self.pp)
    }
}

/// A replica configuration bound to its model and GPU descriptions.
#[derive(Debug, Clone, Copy)]
pub struct Replica<'a> {
    pub model: &'a ModelSpec,
    pub gpu: &'a GpuSpec,
    pub n_gpus: u32,
    pub tp: u32,
    pub pp: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Infeasibility {
    Shape { reason: String },
    TpLimit { tp: u32, max_tp: u32 },
    Memory { required_gb: f64, available_gb: f64 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::Shape { reason } => write!(f, "shape: {reason}"),
            Infeasibility::TpLimit { tp, max_tp } => {
                write!(f, "tp-limit: tp={tp} exceeds max_tp={max_tp}")
            }
            Infeasibility::Memory {
                required_gb,
                available_gb,
            } => write!(
                f,
                "memory: {required_gb:.2} GB per GPU required, {available_gb:.2} GB available"
            ),
        }
    }
}

impl<'a> Replica<'a> {
    pub fn new(model: &'a ModelSpec, gpu: &'a GpuSpec, tp: u32, pp: u32) -> Self {
        Replica {
            model,
            gpu,
            n_gpus: tp * pp,
            tp,
            pp,
        }
    }

    pub fn config(&self) -> ReplicaConfig {
        ReplicaConfig {
            model: self.model.name.clone(),
            gpu: self.gpu.name.clone(),
            n_gpus: self.n_gpus,
            tp: self.tp,
            pp: self.pp,
        }
    }

    /// Share of the layers held by the heaviest pipeline stage.
    pub fn stage_fraction(&self) -> f64 {
        let layers = self.model.n_layers;
        let per_stage = layers.div_ceil(self.pp.max(1));
        per_stage as f64 / layers as f64
    }

    pub fn validate(&self) -> std::result::Result<(), Infeasibility> {
        if self.tp == 0 || self.pp == 0 {
            return Err(Infeasibility::Shape {
                reason: "tp and pp must be >= 1".into(),
            });
        }
        if self.tp * self.pp != self.n_gpus {
            return Err(Infeasibility::Shape {
                reason: format!("tp*pp = {} != n_gpus = {}", self.tp * self.pp, self.n_gpus),
            });
        }
        if self.pp > self.model.n_layers {
            return Err(Infeasibility::Shape {
                reason: format!("pp={} exceeds {} layers", self.pp, self.model.n_layers),
            });
        }
        if self.tp > self.gpu.max_tp {
            return Err(Infeasibility::TpLimit {
                tp: self.tp,
                max_tp: self.gpu.max_tp,
            });
        }
        let sf = self.stage_fraction();
        let tp = self.tp as f64;
        let weights = self.model.weight_bytes * sf / tp;
        let kv = self.model.kv_bytes_per_token * self.model.context_tokens as f64 * sf / tp;
        let required = weights + kv;
        if required > self.gpu.mem_gb * GB {
            return Err(Infeasibility::Memory {
                required_gb: required / GB,
                available_gb: self.gpu.mem_gb,
            });
        }
        Ok(())
    }

    /// KV-cache capacity in tokens across the whole replica.
    pub fn kv_capacity_tokens(&self) -> f64 {
        let sf = self.stage_fraction();
        let tp = self.tp as f64;
        let free_per_gpu = self.gpu.mem_gb * GB - self.model.weight_bytes * sf / tp;
        let kv_per_gpu_per_token = self.model.kv_bytes_per_token * sf / tp;
        (free_per_gpu / kv_per_gpu_per_token).max(0.0)
    }

    /// Largest continuous batch at the given mean sequence length.
    pub fn max_batch(&self, avg_seq_tokens: f64) -> Result<u64> {
        self.validate().map_err(Error::Infeasible)?;
        let n = (self.kv_capacity_tokens() / avg_seq_tokens).floor() as u64;
        Ok(n.max(1))
    }

    fn boundary_cost(&self, coeffs: &CalibrationCoeffs, n_tokens: f64) -> f64 {
        if self.pp <= 1 {
            return 0.0;
        }
        let transfer = if coeffs.pp_comm_beta > 0.0 {
            self.model.activation_bytes_per_token * n_tokens / (coeffs.pp_comm_beta * GB)
        } else {
            0.0
        };
        (self.pp - 1) as f64 * (coeffs.pp_comm_alpha + transfer)
    }

    /// Prefill latency of one request with `n_tokens` input tokens.
    pub fn prefill_time(&self, coeffs: &CalibrationCoeffs, n_tokens: u32) -> f64 {
        let n = n_tokens as f64;
        let rate = self.gpu.tflops * TFLOP * self.tp as f64 * coeffs.speedup(self.tp);
        let stage = self.model.flops_per_token * n * self.stage_fraction() / rate;
        self.pp as f64 * stage + self.boundary_cost(coeffs, n)
    }

    /// Duration of one decode step on the heaviest stage.
    pub fn decode_stage_time(&self, coeffs: &CalibrationCoeffs, resident_tokens: f64) -> f64 {
        let sf = self.stage_fraction();
        let tp = self.tp as f64;
        let bytes = (self.model.weight_bytes * sf + self.model.kv_bytes_per_token * resident_tokens * sf) / tp;
        bytes / (self.gpu.hbm_bw * GB * coeffs.speedup(self.tp))
    }

    /// Time for every running request to produce one more token.
    pub fn decode_token_latency(&self, coeffs: &CalibrationCoeffs, resident_tokens: f64) -> f64 {
        let stage = self.decode_stage_time(coeffs, resident_tokens);
        self.pp as f64 * stage + (self.pp.saturating_sub(1)) as f64 * coeffs.pp_comm_alpha
    }
}

/// Free-function form of [`Replica::validate`] for a named configuration.
pub fn validate_config(spec: &ClusterSpec, c: &ReplicaConfig) -> Result<()> {
    let r = c.resolve(spec)?;
    r.validate().map_err(Error::Infeasible)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Streams shorter than this are extended by resampling trace queries.
    pub min_requests: usize,
    /// Drain period after the last arrival as a multiple of the arrival
    /// span; capped at 5.
    pub drain_factor: f64,
    /// Lower bound on the drain period, seconds.
    pub min_drain_s: f64,
    /// A run whose completion rate falls below this share of the arrival
    /// rate is flagged saturated even if it drains before the horizon.
    pub min_throughput_ratio: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            min_requests: 3000,
            drain_factor: 1.0,
            min_drain_s: 30.0,
            min_throughput_ratio: 0.95,
        }
    }
}

/// One arrival in a simulated request stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamItem {
    /// Index of the originating trace query.
    pub query: usize,
    pub arrival_s: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

/// Arrival stream for a trace replayed at `offered_qps`.
///
/// Trace arrival times are rescaled affinely so the mean rate equals
/// `offered_qps`; token lengths are taken verbatim. If the trace holds fewer
/// than `min_requests` queries the stream is extended by drawing queries and
/// inter-arrival gaps from the rescaled trace with the given seed.
pub fn build_stream(trace: &Trace, offered_qps: f64, seed: u64, min_requests: usize) -> Vec<StreamItem> {
    assert!(offered_qps > 0.0, "offered load must be positive");
    let n = trace.len();
    let t0 = trace.queries[0].arrival_s;
    let scale = if n > 1 && trace.duration_s > 0.0 {
        (n - 1) as f64 / (trace.duration_s * offered_qps)
    } else {
        0.0
    };
    let mut items: Vec<StreamItem> = trace
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| StreamItem {
            query: i,
            arrival_s: if scale > 0.0 {
                (q.arrival_s - t0) * scale
            } else {
                i as f64 / offered_qps
            },
            input_tokens: q.input_tokens,
            output_tokens: q.output_tokens,
        })
        .collect();
    if items.len() < min_requests {
        let gaps: Vec<f64> = if n > 1 {
            items.windows(2).map(|w| w[1].arrival_s - w[0].arrival_s).collect()
        } else {
            vec![1.0 / offered_qps]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = items.last().unwrap().arrival_s;
        while items.len() < min_requests {
            let qi = rng.random_range(0..n);
            t += gaps[rng.random_range(0..gaps.len())];
            let q = &trace.queries[qi];
            items.push(StreamItem {
                query: qi,
                arrival_s: t,
                input_tokens: q.input_tokens,
                output_tokens: q.output_tokens,
            });
        }
    }
    items
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    /// Latency at each of [`PERCENTILES`], seconds.
    pub quantiles: [f64; 6],
    /// Completed requests per second.
    pub throughput: f64,
    pub completed: u64,
    /// Requests still queued, never admitted, at the horizon.
    pub dropped: u64,
    /// Requests admitted but unfinished at the horizon.
    pub in_flight: u64,
    pub saturated: bool,
}

impl SimResult {
    pub fn p95(&self) -> f64 {
        self.quantiles[P95]
    }

    /// Bitwise encoding, used for determinism checks and digests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * 10 + 1);
        for q in &self.quantiles {
            out.extend_from_slice(&q.to_le_bytes());
        }
        out.extend_from_slice(&self.throughput.to_le_bytes());
        out.extend_from_slice(&self.completed.to_le_bytes());
        out.extend_from_slice(&self.dropped.to_le_bytes());
        out.extend_from_slice(&self.in_flight.to_le_bytes());
        out.push(self.saturated as u8);
        out
    }
}

/// Result plus the raw per-request latencies.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub result: SimResult,
    /// (stream position, latency seconds) for every completed request.
    pub latencies: Vec<(usize, f64)>,
    /// Fraction of wall time the replica was busy.
    pub utilization: f64,
}

/// Nearest-rank percentiles of an unsorted sample.
pub fn percentiles(samples: &[f64]) -> [f64; 6] {
    if samples.is_empty() {
        return [f64::INFINITY; 6];
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    PERCENTILES.map(|p| {
        let rank = ((p / 100.0) * n as f64).ceil() as usize;
        s[rank.clamp(1, n) - 1]
    })
}

struct Running {
    pos: usize,
    remaining: u32,
    reserved: f64,
}

/// Simulates `replica` serving the trace at `offered_qps`.
pub fn simulate(
    replica: &Replica<'_>,
    coeffs: &CalibrationCoeffs,
    trace: &Trace,
    offered_qps: f64,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimResult> {
    replica.validate().map_err(Error::Infeasible)?;
    let stream = build_stream(trace, offered_qps, seed, opts.min_requests);
    Ok(simulate_stream(replica, coeffs, &stream, offered_qps, opts).result)
}

/// Runs the event loop over an explicit arrival stream (sorted by arrival).
///
/// Each scheduler tick first admits queued requests in FCFS order while
/// their KV reservation fits, paying the summed prefill time, and then runs
/// one decode step for the whole running batch.
pub fn simulate_stream(
    replica: &Replica<'_>,
    coeffs: &CalibrationCoeffs,
    stream: &[StreamItem],
    offered_qps: f64,
    opts: &SimOptions,
) -> SimOutcome {
    let n = stream.len();
    if n == 0 {
        return SimOutcome {
            result: SimResult {
                quantiles: [0.0; 6],
                throughput: 0.0,
                completed: 0,
                dropped: 0,
                in_flight: 0,
                saturated: false,
            },
            latencies: Vec::new(),
            utilization: 0.0,
        };
    }
    let first = stream[0].arrival_s;
    let last = stream[n - 1].arrival_s;
    let span = last - first;
    let drain = (opts.drain_factor.clamp(0.0, 5.0) * span).max(opts.min_drain_s);
    let horizon = last + drain;

    let capacity = replica.kv_capacity_tokens();
    let mut kv_used = 0.0_f64;
    let mut resident = 0.0_f64;
    let mut queue: VecDeque<usize> = VecDeque::new();
    let mut running: Vec<Running> = Vec::new();
    let mut next = 0usize;
    let mut t = first;
    let mut busy = 0.0;
    let mut latencies = Vec::with_capacity(n);
    let mut last_completion = first;

    loop {
        while next < n && stream[next].arrival_s <= t {
            queue.push_back(next);
            next += 1;
        }
        if running.is_empty() && queue.is_empty() {
            if next >= n {
                break;
            }
            t = stream[next].arrival_s;
            continue;
        }
        if t > horizon {
            break;
        }

        let mut prefill = 0.0;
        while let Some(&pos) = queue.front() {
            let item = &stream[pos];
            let need = (item.input_tokens + item.output_tokens) as f64;
            let reserve = need.min(capacity);
            if kv_used + reserve > capacity && !running.is_empty() {
                break;
            }
            queue.pop_front();
            kv_used += reserve;
            resident += item.input_tokens as f64;
            prefill += replica.prefill_time(coeffs, item.input_tokens);
            running.push(Running {
                pos,
                remaining: item.output_tokens,
                reserved: reserve,
            });
        }
        t += prefill;
        busy += prefill;

        if !running.is_empty() {
            let dt = replica.decode_token_latency(coeffs, resident);
            t += dt;
            busy += dt;
            resident += running.len() as f64;
            let mut i = 0;
            while i < running.len() {
                let r = &mut running[i];
                r.remaining -= 1;
                if r.remaining == 0 {
                    let item = &stream[r.pos];
                    latencies.push((r.pos, t - item.arrival_s));
                    kv_used -= r.reserved;
                    resident -= (item.input_tokens + item.output_tokens) as f64;
                    last_completion = t;
                    running.swap_remove(i);
                } else {
                    i += 1;
                }
            }
            if running.is_empty() {
                // guard against drift in the float accumulators
                kv_used = 0.0;
                resident = 0.0;
            }
        }
    }

    let completed = latencies.len() as u64;
    let in_flight = running.len() as u64;
    let dropped = (n as u64) - completed - in_flight;
    let lat: Vec<f64> = latencies.iter().map(|(_, l)| *l).collect();
    let elapsed = (last_completion - first).max(n as f64 / offered_qps);
    let throughput = completed as f64 / elapsed;
    let arrival_rate = if n > 1 && span > 0.0 { (n - 1) as f64 / span } else { offered_qps };
    let wall = (t.min(horizon.max(last_completion)) - first).max(1e-12);
    SimOutcome {
        result: SimResult {
            quantiles: percentiles(&lat),
            throughput,
            completed,
            dropped,
            in_flight,
            saturated: dropped + in_flight > 0 || throughput < opts.min_throughput_ratio * arrival_rate,
        },
        latencies,
        utilization: (busy / wall).min(1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Query;

    pub(crate) fn toy_gpu(mem_gb: f64, max_tp: u32) -> GpuSpec {
        GpuSpec {
            name: "toy".into(),
            unit_cost_per_hour: 1.0,
            tflops: 2.0,
            hbm_bw: 1000.0,
            mem_gb,
            max_tp,
            count: 8,
            interconnect_bw: 100.0,
        }
    }

    pub(crate) fn toy_model(weight_gb: f64, kv_bytes: f64) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            weight_bytes: weight_gb * GB,
            flops_per_token: 2e9,
            kv_bytes_per_token: kv_bytes,
            n_layers: 32,
            activation_bytes_per_token: 0.0,
            context_tokens: 1024,
        }
    }

    #[test]
    fn seventy_b_on_four_32gb_is_memory_infeasible() {
        let model = ModelSpec {
            name: "70b".into(),
            weight_bytes: 140.0 * GB,
            flops_per_token: 140e9,
            kv_bytes_per_token: 327_680.0,
            n_layers: 80,
            activation_bytes_per_token: 16384.0,
            context_tokens: 2048,
        };
        let gpu = GpuSpec {
            name: "rtx5090".into(),
            mem_gb: 32.0,
            max_tp: 8,
            ..toy_gpu(32.0, 8)
        };
        match Replica::new(&model, &gpu, 4, 1).validate() {
            Err(Infeasibility::Memory { required_gb, .. }) => assert!(required_gb > 35.0),
            other => panic!("expected memory infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn small_model_fits_and_tp_limit() {
        let gpu = toy_gpu(24.0, 8);
        let model = toy_model(1.0, 1e5);
        assert!(Replica::new(&model, &gpu, 1, 1).validate().is_ok());
        let err = Replica::new(&model, &gpu, 16, 1).validate().unwrap_err();
        assert!(matches!(err, Infeasibility::TpLimit { tp: 16, max_tp: 8 }));
        let mut bad = Replica::new(&model, &gpu, 2, 2);
        bad.n_gpus = 3;
        assert!(matches!(bad.validate().unwrap_err(), Infeasibility::Shape { .. }));
    }

    #[test]
    fn max_batch_arithmetic() {
        // 11 GB device, 1 GB weights: 10 GB free; 0.1 MB/token * 1000 tokens
        let gpu = toy_gpu(11.0, 8);
        let mut model = toy_model(1.0, 1e5);
        model.context_tokens = 1000;
        assert_eq!(Replica::new(&model, &gpu, 1, 1).max_batch(1000.0).unwrap(), 100);
        // exactly one sequence of free memory
        let gpu = toy_gpu(1.1, 8);
        assert_eq!(Replica::new(&model, &gpu, 1, 1).max_batch(1000.0).unwrap(), 1);
        let gpu = toy_gpu(1.0, 8);
        assert!(Replica::new(&model, &gpu, 1, 1).max_batch(1000.0).is_err());
    }

    #[test]
    fn prefill_examples() {
        let gpu = toy_gpu(80.0, 8);
        let model = toy_model(1.0, 1e5);
        let mut coeffs = CalibrationCoeffs::ideal();
        let one = Replica::new(&model, &gpu, 1, 1).prefill_time(&coeffs, 1000);
        assert!((one - 1.0).abs() < 1e-12);
        let two = Replica::new(&model, &gpu, 2, 1).prefill_time(&coeffs, 1000);
        assert!((two - 0.5).abs() < 1e-12);
        coeffs.tp_speedup.insert(2, 0.8);
        let two = Replica::new(&model, &gpu, 2, 1).prefill_time(&coeffs, 1000);
        assert!((two - 0.625).abs() < 1e-12);
    }

    #[test]
    fn decode_examples() {
        let gpu = toy_gpu(80.0, 8);
        let model = toy_model(16.0, 1e5);
        let coeffs = CalibrationCoeffs::ideal();
        let r1 = Replica::new(&model, &gpu, 1, 1);
        assert!((r1.decode_token_latency(&coeffs, 0.0) - 0.016).abs() < 1e-15);
        let r2 = Replica::new(&model, &gpu, 1, 2);
        let stage = r2.decode_stage_time(&coeffs, 0.0);
        assert!((r2.decode_token_latency(&coeffs, 0.0) - 2.0 * stage).abs() < 1e-15);
        assert!((stage - 0.008).abs() < 1e-15);
    }

    #[test]
    fn percentiles_nearest_rank() {
        let s: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_eq!(percentiles(&s), [50.0, 75.0, 90.0, 95.0, 99.0, 100.0]);
        assert_eq!(percentiles(&[3.0]), [3.0; 6]);
    }

    #[test]
    fn single_request_latency_is_prefill_plus_decode() {
        let gpu = toy_gpu(80.0, 8);
        let model = toy_model(16.0, 1e5);
        let coeffs = CalibrationCoeffs::default();
        let r = Replica::new(&model, &gpu, 2, 2);
        let q = Query {
            id: "0".into(),
            arrival_s: 0.0,
            input_tokens: 300,
            output_tokens: 7,
            routing_score: 0.5,
            quality: vec![1.0],
        };
        let trace = Trace::new(vec!["toy".into()], vec![q]).unwrap();
        let opts = SimOptions {
            min_requests: 0,
            ..Default::default()
        };
        let res = simulate(&r, &coeffs, &trace, 1.0, 0, &opts).unwrap();
        let mut expected = r.prefill_time(&coeffs, 300);
        for k in 0..7 {
            expected += r.decode_token_latency(&coeffs, 300.0 + k as f64);
        }
        assert_eq!(res.completed, 1);
        assert!((res.quantiles[0] - expected).abs() < 1e-12);
    }
}
