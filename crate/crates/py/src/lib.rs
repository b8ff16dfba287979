//! Python bindings: cluster specs, traces, the performance database,
//! candidate generation, frontier search, plan selection and replay.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use hetserve::candidates::{pareto_skim as skim, CandidateSet};
use hetserve::optimizer::{self, Aggregation, Constraints, Requirement, RunConfig};
use hetserve::perfdb::{build_db, PerfDb};
use hetserve::plan::{self, ParetoFile, Plan};
use hetserve::workload::{estimate_quality, fractions_to_thresholds, thresholds_to_fractions};
use hetserve::{Cents, ClusterSpec, Error, LoadFractions, LoadGrid, ReplicaConfig, RoutingConfig, SimOptions, Trace};

create_exception!(hetserve_py, HetserveError, PyException);
create_exception!(hetserve_py, InfeasibleError, HetserveError);

fn err(e: Error) -> PyErr {
    match e {
        Error::NoFeasibleConfiguration | Error::Unsatisfiable { .. } => InfeasibleError::new_err(e.to_string()),
        Error::Iteration { source, .. } if matches!(*source, Error::NoFeasibleConfiguration) => {
            InfeasibleError::new_err(source.to_string())
        }
        e => HetserveError::new_err(e.to_string()),
    }
}

/// Converts any serializable value into plain Python objects.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "ClusterSpec", module = "hetserve_py", frozen)]
struct PyClusterSpec {
    inner: ClusterSpec,
}

#[pymethods]
impl PyClusterSpec {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClusterSpec {
            inner: ClusterSpec::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyClusterSpec {
            inner: ClusterSpec::from_json(text).map_err(err)?,
        })
    }

    #[getter]
    fn models(&self) -> Vec<String> {
        self.inner.model_names()
    }

    #[getter]
    fn gpus(&self) -> Vec<String> {
        self.inner.gpus.iter().map(|g| g.name.clone()).collect()
    }

    /// Hourly cost in dollars of a {gpu: count} allocation.
    fn cost(&self, allocation: std::collections::BTreeMap<String, u32>) -> PyResult<f64> {
        let c = self
            .inner
            .allocation_cost(allocation.iter().map(|(k, v)| (k.as_str(), *v)))
            .map_err(err)?;
        Ok(c.dollars())
    }

    fn digest(&self) -> String {
        hex::encode(self.inner.digest())
    }
}

#[pyclass(name = "Trace", module = "hetserve_py", frozen)]
struct PyTrace {
    inner: Trace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    #[pyo3(signature = (path, models, quality_scale = 1.0))]
    fn load(path: PathBuf, models: Vec<String>, quality_scale: f64) -> PyResult<Self> {
        Ok(PyTrace {
            inner: Trace::load(path, &models, quality_scale).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn fractions_to_thresholds(&self, fractions: Vec<f64>) -> PyResult<Vec<f64>> {
        let f = LoadFractions::new(fractions).map_err(err)?;
        Ok(fractions_to_thresholds(&f, &self.inner).thresholds().to_vec())
    }

    fn thresholds_to_fractions(&self, thresholds: Vec<f64>) -> PyResult<Vec<f64>> {
        let tau = RoutingConfig::new(thresholds).map_err(err)?;
        Ok(thresholds_to_fractions(&tau, &self.inner).as_slice().to_vec())
    }

    fn estimate_quality(&self, thresholds: Vec<f64>) -> PyResult<f64> {
        let tau = RoutingConfig::new(thresholds).map_err(err)?;
        if tau.num_models() != self.inner.num_models() {
            return Err(HetserveError::new_err("threshold count does not match the trace's models"));
        }
        Ok(estimate_quality(&self.inner, &tau))
    }
}

#[pyclass(name = "PerfDb", module = "hetserve_py", frozen)]
struct PyPerfDb {
    inner: PerfDb,
}

#[pymethods]
impl PyPerfDb {
    #[staticmethod]
    #[pyo3(signature = (spec, trace, loads = "2:40:2", seed = 0))]
    fn build(spec: &PyClusterSpec, trace: &PyTrace, loads: &str, seed: u64) -> PyResult<Self> {
        let grid = LoadGrid::parse(loads).map_err(err)?;
        Ok(PyPerfDb {
            inner: build_db(&spec.inner, &trace.inner, &grid, seed, &SimOptions::default()).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPerfDb {
            inner: PerfDb::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn loads(&self) -> Vec<f64> {
        self.inner.grid.loads().to_vec()
    }

    fn digest(&self) -> String {
        hex::encode(self.inner.digest())
    }

    /// Quantiles, throughput and saturation of one replica at `load`.
    #[pyo3(signature = (model, gpu, load, tp = 1, pp = 1))]
    fn lookup<'py>(&self, py: Python<'py>, model: &str, gpu: &str, load: f64, tp: u32, pp: u32) -> PyResult<Bound<'py, PyAny>> {
        let rec = self
            .inner
            .lookup(&ReplicaConfig::new(model, gpu, tp, pp), load)
            .map_err(err)?;
        to_py(py, &rec)
    }

    /// Best split of `load` over replicas given as (model, gpu, tp, pp)
    /// tuples; `None` when every split saturates some replica.
    #[pyo3(signature = (replicas, load, delta = None))]
    fn split_load(
        &self,
        replicas: Vec<(String, String, u32, u32)>,
        load: f64,
        delta: Option<f64>,
    ) -> PyResult<Option<(Vec<f64>, f64)>> {
        let cfgs: Vec<ReplicaConfig> = replicas
            .iter()
            .map(|(m, g, tp, pp)| ReplicaConfig::new(m, g, *tp, *pp))
            .collect();
        let delta = delta.unwrap_or_else(|| self.inner.grid.step());
        let split = self.inner.split_load(&cfgs, load, delta).map_err(err)?;
        Ok(split.map(|s| (s.loads, s.p95)))
    }
}

#[pyclass(name = "CandidateSet", module = "hetserve_py", frozen)]
struct PyCandidateSet {
    inner: CandidateSet,
}

#[pymethods]
impl PyCandidateSet {
    #[staticmethod]
    #[pyo3(signature = (db, budget, grid = 10, ref_load = None, delta = None))]
    fn generate(db: &PyPerfDb, budget: f64, grid: usize, ref_load: Option<f64>, delta: Option<f64>) -> PyResult<Self> {
        let loads = db.inner.grid.loads();
        let ref_load = ref_load.unwrap_or(loads[(loads.len() - 1) / 2]);
        let delta = delta.unwrap_or_else(|| db.inner.grid.step());
        Ok(PyCandidateSet {
            inner: CandidateSet::generate(&db.inner, Cents::from_dollars(budget), grid, ref_load, delta).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCandidateSet {
            inner: CandidateSet::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    /// Candidate ids per model, in ascending cost.
    fn ids(&self) -> std::collections::BTreeMap<String, Vec<String>> {
        self.inner
            .models
            .iter()
            .map(|m| (m.model.clone(), m.candidates.iter().map(|c| c.id.clone()).collect()))
            .collect()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }
}

#[pyclass(name = "Frontier", module = "hetserve_py", frozen)]
struct PyFrontier {
    inner: ParetoFile,
}

#[pymethods]
impl PyFrontier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFrontier {
            inner: ParetoFile::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.pareto.records.len()
    }

    #[getter]
    fn hypervolume(&self) -> f64 {
        self.inner.pareto.hypervolume
    }

    /// Frontier records as dictionaries, ascending latency.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.pareto.records)
    }

    /// The fastest record with Q ≥ qmin, or the best-quality record with L ≤ lmax.
    #[pyo3(signature = (qmin = None, lmax = None))]
    fn select(&self, qmin: Option<f64>, lmax: Option<f64>) -> PyResult<PyPlan> {
        let req = match (qmin, lmax) {
            (Some(q), None) => Requirement::MinQuality(q),
            (None, Some(l)) => Requirement::MaxLatency(l),
            _ => return Err(pyo3::exceptions::PyValueError::new_err("give exactly one of qmin and lmax")),
        };
        let rec = optimizer::select(&self.inner.pareto, req).map_err(err)?;
        Ok(PyPlan {
            inner: Plan::from_record(&self.inner, rec),
        })
    }
}

#[pyclass(name = "Plan", module = "hetserve_py", frozen)]
struct PyPlan {
    inner: Plan,
}

#[pymethods]
impl PyPlan {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPlan {
            inner: Plan::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn predicted_l_p95_s(&self) -> f64 {
        self.inner.predicted_l_p95_s
    }

    #[getter]
    fn predicted_q(&self) -> f64 {
        self.inner.predicted_q
    }

    #[getter]
    fn thresholds(&self) -> Vec<f64> {
        self.inner.thresholds.clone()
    }

    #[getter]
    fn cost_per_hour(&self) -> f64 {
        self.inner.cost_per_hour
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Simulates the trace served by this plan; returns the report as a dict.
    #[pyo3(signature = (trace, spec, seed = 0))]
    fn replay<'py>(&self, py: Python<'py>, trace: &PyTrace, spec: &PyClusterSpec, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let report = plan::replay(&self.inner, &trace.inner, &spec.inner, seed, &SimOptions::default()).map_err(err)?;
        to_py(py, &report)
    }
}

/// Simulates one replica serving the trace at `qps`.
#[pyfunction]
#[pyo3(signature = (spec, trace, model, gpu, qps, tp = 1, pp = 1, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    spec: &PyClusterSpec,
    trace: &PyTrace,
    model: &str,
    gpu: &str,
    qps: f64,
    tp: u32,
    pp: u32,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    if !(qps > 0.0) {
        return Err(pyo3::exceptions::PyValueError::new_err("qps must be positive"));
    }
    let replica = ReplicaConfig::new(model, gpu, tp, pp)
        .resolve(&spec.inner)
        .map_err(err)?;
    let res = hetserve::simulator::simulate(
        &replica,
        &spec.inner.coeffs_for(gpu),
        &trace.inner,
        qps,
        seed,
        &SimOptions::default(),
    )
    .map_err(err)?;
    to_py(py, &res)
}

/// Searches the latency/quality frontier.
#[pyfunction]
#[pyo3(signature = (trace, db, cands, qps, budget, lmax = None, qmin = None, iters = 60, seed = 0, aggregation = "pooled"))]
#[allow(clippy::too_many_arguments)]
fn optimize(
    trace: &PyTrace,
    db: &PyPerfDb,
    cands: &PyCandidateSet,
    qps: f64,
    budget: f64,
    lmax: Option<f64>,
    qmin: Option<f64>,
    iters: usize,
    seed: u64,
    aggregation: &str,
) -> PyResult<PyFrontier> {
    let aggregation = match aggregation {
        "pooled" => Aggregation::Pooled,
        "max" => Aggregation::Max,
        other => return Err(pyo3::exceptions::PyValueError::new_err(format!("unknown aggregation {other:?}"))),
    };
    let mut cons = Constraints::new(&db.inner.spec, Cents::from_dollars(budget), qps).map_err(err)?;
    cons.l_max = lmax;
    cons.q_min = qmin;
    let cfg = RunConfig {
        budget_iters: iters,
        seed,
        aggregation,
        ..Default::default()
    };
    let result = optimizer::run(&trace.inner, &db.inner, &cands.inner, &cons, &cfg).map_err(err)?;
    let file = ParetoFile::new(&db.inner, &cands.inner, &trace.inner, &cons, aggregation, result.pareto).map_err(err)?;
    Ok(PyFrontier { inner: file })
}

/// Area dominated by minimization points relative to `reference`.
#[pyfunction]
fn hypervolume_2d(points: Vec<(f64, f64)>, reference: (f64, f64)) -> f64 {
    let pts: Vec<[f64; 2]> = points.into_iter().map(|(a, b)| [a, b]).collect();
    optimizer::hypervolume_2d(&pts, [reference.0, reference.1])
}

/// Indices of the (latency, cost) points that survive skimming, ascending cost.
#[pyfunction]
fn pareto_skim(points: Vec<(f64, f64)>) -> Vec<usize> {
    skim(&points)
}

#[pymodule]
fn hetserve_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HetserveError", m.py().get_type::<HetserveError>())?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add_class::<PyClusterSpec>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyPerfDb>()?;
    m.add_class::<PyCandidateSet>()?;
    m.add_class::<PyFrontier>()?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(hypervolume_2d, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_skim, m)?)?;
    Ok(())
}
