//! Offline performance database: latency quantiles for every feasible
//! single-replica configuration at every load on a grid, plus the
//! load-split search that composes replicas into data-parallel groups.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{ClusterSpec, GpuSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::simulator::{simulate, Replica, ReplicaConfig, SimOptions, SimResult, P95};
use crate::workload::Trace;

const MAGIC: &[u8; 8] = b"HSPERFDB";
const VERSION: u32 = 1;

/// Offered loads (QPS) at which every configuration is simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadGrid {
    loads: Vec<f64>,
}

impl Default for LoadGrid {
    fn default() -> Self {
        LoadGrid::range(2.0, 40.0, 2.0).unwrap()
    }
}

impl LoadGrid {
    pub fn new(loads: Vec<f64>) -> Result<Self> {
        if loads.is_empty() {
            return Err(Error::validation("load grid is empty"));
        }
        if loads.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::validation("grid loads must be positive"));
        }
        if loads.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("grid loads must be strictly increasing"));
        }
        Ok(LoadGrid { loads })
    }

    pub fn range(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || hi < lo {
            return Err(Error::validation("bad load range"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        LoadGrid::new((0..=n).map(|i| lo + step * i as f64).collect())
    }

    /// Parses `lo:hi:step`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::validation(format!("expected lo:hi:step, got {s:?}")));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::validation(format!("bad load range {s:?}: {e}")))?;
        LoadGrid::range(nums[0], nums[1], nums[2])
    }

    pub fn loads(&self) -> &[f64] {
        &self.loads
    }

    pub fn len(&self) -> usize {
        self.loads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loads.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.loads.last().unwrap()
    }

    /// Spacing of the first two points (the whole range for a single point).
    pub fn step(&self) -> f64 {
        if self.loads.len() > 1 {
            self.loads[1] - self.loads[0]
        } else {
            self.loads[0]
        }
    }

    /// Grid value nearest to `load`.
    pub fn nearest(&self, load: f64) -> f64 {
        *self
            .loads
            .iter()
            .min_by(|a, b| (*a - load).abs().total_cmp(&(*b - load).abs()))
            .unwrap()
    }
}

/// Every (tp, pp) with tp * pp = n. Unpruned.
pub fn divisor_pairs(n: u32) -> Vec<(u32, u32)> {
    (1..=n).filter(|tp| n % tp == 0).map(|tp| (tp, n / tp)).collect()
}

/// Feasible single-replica shapes of `model` on `gpu`, for every allocation
/// size up to the available count. Tensor parallelism is restricted to
/// powers of two not above the GPU's limit; memory-infeasible shapes are
/// dropped.
pub fn enumerate_single_replica_configs(model: &ModelSpec, gpu: &GpuSpec) -> Vec<ReplicaConfig> {
    let mut out = Vec::new();
    for a in 1..=gpu.count {
        for (tp, pp) in divisor_pairs(a) {
            if !tp.is_power_of_two() || tp > gpu.max_tp {
                continue;
            }
            let r = Replica::new(model, gpu, tp, pp);
            if r.validate().is_ok() {
                out.push(r.config());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnumerationCount {
    /// Simulations over every divisor pair of every allocation size.
    pub pre_pruning: u64,
    /// Simulations after the tp and memory pruning rules.
    pub post_pruning: u64,
}

/// Number of simulate calls a database build issues.
pub fn count_enumeration(spec: &ClusterSpec, grid_len: usize) -> EnumerationCount {
    let mut pre = 0u64;
    let mut post = 0u64;
    for model in &spec.models {
        for gpu in &spec.gpus {
            pre += (1..=gpu.count).map(|a| divisor_pairs(a).len() as u64).sum::<u64>();
            post += enumerate_single_replica_configs(model, gpu).len() as u64;
        }
    }
    EnumerationCount {
        pre_pruning: pre * grid_len as u64,
        post_pruning: post * grid_len as u64,
    }
}

/// One cell of the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    pub quantiles: [f64; 6],
    pub throughput: f64,
    pub saturated: bool,
}

impl PerfRecord {
    pub fn infeasible() -> Self {
        PerfRecord {
            quantiles: [f64::INFINITY; 6],
            throughput: 0.0,
            saturated: true,
        }
    }

    pub fn idle() -> Self {
        PerfRecord {
            quantiles: [0.0; 6],
            throughput: 0.0,
            saturated: false,
        }
    }

    pub fn p95(&self) -> f64 {
        if self.saturated {
            f64::INFINITY
        } else {
            self.quantiles[P95]
        }
    }
}

impl From<&SimResult> for PerfRecord {
    fn from(r: &SimResult) -> Self {
        PerfRecord {
            quantiles: r.quantiles,
            throughput: r.throughput,
            saturated: r.saturated,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfDb {
    pub spec: ClusterSpec,
    pub spec_digest: [u8; 32],
    pub trace_digest: [u8; 32],
    pub grid: LoadGrid,
    pub seed: u64,
    pub sim_options: SimOptions,
    /// Records per configuration, aligned with `grid`.
    pub records: BTreeMap<ReplicaConfig, Vec<PerfRecord>>,
}

/// Simulates every enumerated configuration at every grid load.
pub fn build_db(
    spec: &ClusterSpec,
    trace: &Trace,
    grid: &LoadGrid,
    seed: u64,
    opts: &SimOptions,
) -> Result<PerfDb> {
    spec.validate()?;
    if trace.models != spec.model_names() {
        return Err(Error::validation("trace models do not match the cluster spec"));
    }
    let mut cells = Vec::new();
    for model in &spec.models {
        for gpu in &spec.gpus {
            for cfg in enumerate_single_replica_configs(model, gpu) {
                for (li, load) in grid.loads().iter().enumerate() {
                    cells.push((cfg.clone(), li, *load));
                }
            }
        }
    }
    let results: Vec<(ReplicaConfig, usize, PerfRecord)> = cells
        .into_par_iter()
        .map(|(cfg, li, load)| {
            let replica = cfg.resolve(spec)?;
            let coeffs = spec.coeffs_for(&cfg.gpu);
            let res = simulate(&replica, &coeffs, trace, load, seed, opts)?;
            Ok((cfg, li, PerfRecord::from(&res)))
        })
        .collect::<Result<_>>()?;

    let mut records: BTreeMap<ReplicaConfig, Vec<PerfRecord>> = BTreeMap::new();
    for (cfg, li, rec) in results {
        let row = records
            .entry(cfg)
            .or_insert_with(|| vec![PerfRecord::infeasible(); grid.len()]);
        row[li] = rec;
    }
    Ok(PerfDb {
        spec: spec.clone(),
        spec_digest: spec.digest(),
        trace_digest: trace.digest(),
        grid: grid.clone(),
        seed,
        sim_options: *opts,
        records,
    })
}

impl PerfDb {
    pub fn configs(&self) -> impl Iterator<Item = &ReplicaConfig> {
        self.records.keys()
    }

    pub fn configs_for<'a>(&'a self, model: &'a str, gpu: &'a str) -> impl Iterator<Item = &'a ReplicaConfig> + 'a {
        self.records
            .keys()
            .filter(move |c| c.model == model && c.gpu == gpu)
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Quantiles of `config` at `load`.
    ///
    /// Grid points return the stored record; loads between grid points are
    /// linearly interpolated per quantile. Loads above the grid, or next to
    /// a saturated cell, give the infeasible sentinel. Zero load is an idle
    /// replica; loads below the first grid point use the first record.
    pub fn lookup(&self, config: &ReplicaConfig, load: f64) -> Result<PerfRecord> {
        let row = self
            .records
            .get(config)
            .ok_or_else(|| Error::NotFound(format!("configuration {config}")))?;
        Ok(interpolate_row(self.grid.loads(), row, load))
    }

    pub fn p95(&self, config: &ReplicaConfig, load: f64) -> Result<f64> {
        Ok(self.lookup(config, load)?.p95())
    }

    /// Largest finite P95 anywhere in the database.
    pub fn max_finite_p95(&self) -> f64 {
        self.records
            .values()
            .flatten()
            .map(PerfRecord::p95)
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max)
    }

    /// Splits `load` over `replicas` to minimize the worst replica P95.
    pub fn split_load(&self, replicas: &[ReplicaConfig], load: f64, delta: f64) -> Result<Option<LoadSplit>> {
        let rows: Vec<&Vec<PerfRecord>> = replicas
            .iter()
            .map(|c| {
                self.records
                    .get(c)
                    .ok_or_else(|| Error::NotFound(format!("configuration {c}")))
            })
            .collect::<Result<_>>()?;
        let (units, step) = split_units(load, delta);
        let curves: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| {
                (0..=units)
                    .map(|k| interpolate_row(self.grid.loads(), row, k as f64 * step).p95())
                    .collect()
            })
            .collect();
        Ok(minmax_split(&curves, units).map(|(alloc, p95)| LoadSplit {
            loads: alloc.iter().map(|k| *k as f64 * step).collect(),
            units: alloc,
            p95,
        }))
    }
}

fn interpolate_row(grid: &[f64], row: &[PerfRecord], load: f64) -> PerfRecord {
    if load <= 0.0 {
        return PerfRecord::idle();
    }
    if load <= grid[0] {
        return row[0].clone();
    }
    if load > *grid.last().unwrap() {
        return PerfRecord::infeasible();
    }
    let hi = grid.partition_point(|g| *g < load);
    if grid[hi] == load {
        return row[hi].clone();
    }
    let lo = hi - 1;
    let (a, b) = (&row[lo], &row[hi]);
    if a.saturated || b.saturated {
        return PerfRecord::infeasible();
    }
    let w = (load - grid[lo]) / (grid[hi] - grid[lo]);
    let mut quantiles = [0.0; 6];
    for (i, q) in quantiles.iter_mut().enumerate() {
        *q = a.quantiles[i] + w * (b.quantiles[i] - a.quantiles[i]);
    }
    PerfRecord {
        quantiles,
        throughput: a.throughput + w * (b.throughput - a.throughput),
        saturated: false,
    }
}

/// Number of split units and the unit size for a load. The unit is the
/// largest step not above `delta` that divides the load exactly.
pub fn split_units(load: f64, delta: f64) -> (usize, f64) {
    if load <= 0.0 {
        return (0, delta);
    }
    let units = ((load / delta).round() as usize).max(1);
    (units, load / units as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSplit {
    /// Load per replica, QPS.
    pub loads: Vec<f64>,
    /// Load per replica in split units.
    pub units: Vec<usize>,
    /// Worst replica P95 under this split.
    pub p95: f64,
}

/// Distributes `units` over replicas to minimize the maximum of
/// `curves[i][k_i]`, where `curves[i][k]` is replica i's latency with k
/// units. Returns the lexicographically smallest optimal allocation, or
/// `None` if every allocation hits an infinite (saturated) entry.
pub fn minmax_split(curves: &[Vec<f64>], units: usize) -> Option<(Vec<usize>, f64)> {
    let r = curves.len();
    if r == 0 {
        return if units == 0 { Some((Vec::new(), 0.0)) } else { None };
    }
    // suffix[j][k]: best worst-case latency for replicas j.. with k units
    let mut suffix = vec![vec![f64::INFINITY; units + 1]; r + 1];
    suffix[r][0] = 0.0;
    for j in (0..r).rev() {
        for k in 0..=units {
            let mut best = f64::INFINITY;
            for x in 0..=k {
                let v = curves[j][x].max(suffix[j + 1][k - x]);
                if v < best {
                    best = v;
                }
            }
            suffix[j][k] = best;
        }
    }
    let target = suffix[0][units];
    if !target.is_finite() {
        return None;
    }
    let mut alloc = Vec::with_capacity(r);
    let mut left = units;
    for j in 0..r {
        let x = (0..=left)
            .find(|&x| curves[j][x] <= target && suffix[j + 1][left - x] <= target)
            .expect("optimal split is reconstructible");
        alloc.push(x);
        left -= x;
    }
    Some((alloc, target))
}

// ---------------------------------------------------------------------------
// file format

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated database file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn digest(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

impl PerfDb {
    /// Serializes to the versioned binary format: magic, version, spec and
    /// trace digests, seed, simulation options, grid, the embedded cluster
    /// spec, then one row per configuration. All reals are little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_digest);
        out.extend_from_slice(&self.trace_digest);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.sim_options.min_requests as u64).to_le_bytes());
        out.extend_from_slice(&self.sim_options.drain_factor.to_le_bytes());
        out.extend_from_slice(&self.sim_options.min_drain_s.to_le_bytes());
        out.extend_from_slice(&self.sim_options.min_throughput_ratio.to_le_bytes());
        out.extend_from_slice(&(self.grid.len() as u32).to_le_bytes());
        for l in self.grid.loads() {
            out.extend_from_slice(&l.to_le_bytes());
        }
        put_str(&mut out, &serde_json::to_string(&self.spec).expect("spec serializes"));
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (cfg, row) in &self.records {
            put_str(&mut out, &cfg.model);
            put_str(&mut out, &cfg.gpu);
            for v in [cfg.n_gpus, cfg.tp, cfg.pp] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for rec in row {
                for q in &rec.quantiles {
                    out.extend_from_slice(&q.to_le_bytes());
                }
                out.extend_from_slice(&rec.throughput.to_le_bytes());
                out.push(rec.saturated as u8);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a performance database (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported database version {version}")));
        }
        let spec_digest = r.digest()?;
        let trace_digest = r.digest()?;
        let seed = r.u64()?;
        let sim_options = SimOptions {
            min_requests: r.u64()? as usize,
            drain_factor: r.f64()?,
            min_drain_s: r.f64()?,
            min_throughput_ratio: r.f64()?,
        };
        let n_grid = r.u32()? as usize;
        let loads = (0..n_grid).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let grid = LoadGrid::new(loads)?;
        let spec: ClusterSpec = serde_json::from_str(&r.string()?)?;
        if spec.digest() != spec_digest {
            return Err(Error::DigestMismatch {
                expected: hex::encode(spec_digest),
                found: hex::encode(spec.digest()),
            });
        }
        let n_rows = r.u32()? as usize;
        let mut records = BTreeMap::new();
        for _ in 0..n_rows {
            let model = r.string()?;
            let gpu = r.string()?;
            let n_gpus = r.u32()?;
            let tp = r.u32()?;
            let pp = r.u32()?;
            let mut row = Vec::with_capacity(n_grid);
            for _ in 0..n_grid {
                let mut quantiles = [0.0; 6];
                for q in quantiles.iter_mut() {
                    *q = r.f64()?;
                }
                let throughput = r.f64()?;
                let saturated = r.u8()? != 0;
                row.push(PerfRecord {
                    quantiles,
                    throughput,
                    saturated,
                });
            }
            records.insert(
                ReplicaConfig {
                    model,
                    gpu,
                    n_gpus,
                    tp,
                    pp,
                },
                row,
            );
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after record table".into()));
        }
        Ok(PerfDb {
            spec,
            spec_digest,
            trace_digest,
            grid,
            seed,
            sim_options,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Loads a database and checks it was built from `spec`.
    pub fn load_for_spec(path: impl AsRef<Path>, spec: &ClusterSpec) -> Result<Self> {
        let db = Self::load(path)?;
        if db.spec_digest != spec.digest() {
            return Err(Error::DigestMismatch {
                expected: hex::encode(spec.digest()),
                found: hex::encode(db.spec_digest),
            });
        }
        Ok(db)
    }

    /// SHA-256 of the serialized database.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_two_to_forty() {
        let g = LoadGrid::default();
        assert_eq!(g.len(), 20);
        assert_eq!(g.loads()[0], 2.0);
        assert_eq!(g.max(), 40.0);
        assert_eq!(LoadGrid::parse("2:40:2").unwrap(), g);
        assert!(LoadGrid::parse("2:40").is_err());
    }

    #[test]
    fn divisor_pairs_of_eight() {
        assert_eq!(divisor_pairs(8), vec![(1, 8), (2, 4), (4, 2), (8, 1)]);
        assert_eq!(divisor_pairs(1), vec![(1, 1)]);
    }

    fn flat_row(p95: &[f64]) -> Vec<PerfRecord> {
        p95.iter()
            .map(|v| PerfRecord {
                quantiles: [*v; 6],
                throughput: 1.0,
                saturated: !v.is_finite(),
            })
            .collect()
    }

    #[test]
    fn interpolation_rules() {
        let grid = [2.0, 4.0, 6.0];
        let row = flat_row(&[6.0, 10.0, f64::INFINITY]);
        assert_eq!(interpolate_row(&grid, &row, 2.0).p95(), 6.0);
        assert_eq!(interpolate_row(&grid, &row, 3.0).p95(), 8.0);
        assert_eq!(interpolate_row(&grid, &row, 0.0).p95(), 0.0);
        assert_eq!(interpolate_row(&grid, &row, 1.0).p95(), 6.0);
        assert!(interpolate_row(&grid, &row, 5.0).saturated);
        assert!(interpolate_row(&grid, &row, 7.0).saturated);
    }

    #[test]
    fn minmax_symmetric_split() {
        let curve: Vec<f64> = (0..=10).map(|k| k as f64).collect();
        let (alloc, v) = minmax_split(&[curve.clone(), curve], 10).unwrap();
        assert_eq!(alloc, vec![5, 5]);
        assert_eq!(v, 5.0);
    }

    #[test]
    fn minmax_fast_and_slow_replica() {
        // loads 0,2,4,6,8 in units of 2 QPS
        let fast = vec![0.0, 2.0, 2.0, 2.0, 2.0];
        let slow = vec![0.0, 2.0, 20.0, 20.0, 20.0];
        let (alloc, v) = minmax_split(&[fast, slow], 4).unwrap();
        assert_eq!(alloc, vec![3, 1]);
        assert_eq!(v, 2.0);
    }

    #[test]
    fn minmax_single_and_infeasible() {
        let c = vec![0.0, 1.0, 3.0];
        assert_eq!(minmax_split(&[c], 2), Some((vec![2], 3.0)));
        let sat = vec![0.0, f64::INFINITY, f64::INFINITY];
        assert_eq!(minmax_split(&[sat.clone(), sat], 2), None);
    }

    #[test]
    fn split_units_exact() {
        assert_eq!(split_units(10.0, 1.0), (10, 1.0));
        let (n, step) = split_units(7.0, 2.0);
        assert_eq!(n, 4);
        assert!((step * n as f64 - 7.0).abs() < 1e-12);
        assert_eq!(split_units(0.0, 2.0).0, 0);
    }
}
