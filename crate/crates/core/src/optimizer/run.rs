//! The sequential optimization loop.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::acq::{acq_cqnehvi, AcqConfig};
use super::{hard_feasible, theta_cost, Aggregation, Constraints, EvalRecord, Evaluator, ParetoSet};
use crate::candidates::CandidateSet;
use crate::error::{Error, Result};
use crate::perfdb::PerfDb;
use crate::surrogate::gp::halton;
use crate::surrogate::{Encoder, FitOptions, Gp, KernelParams, Objective, PreferenceMatrix, RoutingEncoding, ThetaPoint};
use crate::workload::{thresholds_to_fractions, LoadFractions, RoutingConfig, Trace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Optimization iterations after the initial design.
    pub budget_iters: usize,
    pub seed: u64,
    pub mc_samples: usize,
    pub pool_size: usize,
    pub mutation_radius: f64,
    /// Routing features and search space: load fractions or raw thresholds.
    pub routing: RoutingEncoding,
    /// Learn the preference strength β; when false it is fixed at 0.
    pub learn_preference: bool,
    pub fit_starts: usize,
    /// Defaults to 2·dim + 1.
    pub n_init: Option<usize>,
    /// Consecutive iterations with relative hypervolume change below
    /// `hv_tol` that count as converged.
    pub patience: usize,
    pub hv_tol: f64,
    pub aggregation: Aggregation,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            budget_iters: 60,
            seed: 0,
            mc_samples: 128,
            pool_size: 512,
            mutation_radius: 0.05,
            routing: RoutingEncoding::Fractions,
            learn_preference: true,
            fit_starts: 8,
            n_init: None,
            patience: 20,
            hv_tol: 1e-6,
            aggregation: Aggregation::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    /// "init" or "search".
    pub phase: String,
    pub fractions: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub candidate_ids: Vec<String>,
    pub l_p95_s: f64,
    pub q: f64,
    pub saturated: bool,
    pub hypervolume: f64,
    pub acquisition: Option<f64>,
    pub beta_latency: Option<f64>,
    pub beta_quality: Option<f64>,
    pub fit_ms: f64,
    pub acq_ms: f64,
    pub eval_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub pareto: ParetoSet,
    pub records: Vec<EvalRecord>,
    pub log: Vec<IterationLog>,
    pub converged: bool,
    pub reference: [f64; 2],
}

/// Everything needed to draw, filter and score decision points.
pub struct SearchSpace<'a> {
    pub db: &'a PerfDb,
    pub cands: &'a CandidateSet,
    pub cons: &'a Constraints,
    pub encoder: Encoder,
    pub routing: RoutingEncoding,
    trace: &'a Trace,
}

impl<'a> SearchSpace<'a> {
    pub fn new(trace: &'a Trace, db: &'a PerfDb, cands: &'a CandidateSet, cons: &'a Constraints, routing: RoutingEncoding) -> Result<Self> {
        let ref_load = cands
            .models
            .first()
            .map(|m| m.ref_load)
            .unwrap_or_else(|| db.grid.loads()[db.grid.len() / 2]);
        let prefs = PreferenceMatrix::from_db(db, ref_load)?;
        let encoder = Encoder::new(cands, &db.spec, trace, &prefs, cons.budget, routing)?;
        Ok(SearchSpace {
            db,
            cands,
            cons,
            encoder,
            routing,
            trace,
        })
    }

    fn m(&self) -> usize {
        self.cands.num_models()
    }

    /// Maps M-1 unit-interval coordinates to load fractions, either as
    /// simplex gaps or through raw thresholds on the trace.
    fn fractions_from_unit(&self, u: &[f64]) -> Result<LoadFractions> {
        let mut cuts: Vec<f64> = u.to_vec();
        cuts.sort_by(f64::total_cmp);
        match self.routing {
            RoutingEncoding::Fractions => {
                let mut f = Vec::with_capacity(cuts.len() + 1);
                let mut prev = 0.0;
                for c in &cuts {
                    f.push(c - prev);
                    prev = *c;
                }
                f.push(1.0 - prev);
                LoadFractions::normalized(&f)
            }
            RoutingEncoding::Thresholds => {
                let tau = RoutingConfig::new(cuts)?;
                Ok(thresholds_to_fractions(&tau, self.trace))
            }
        }
    }

    fn random_theta(&self, rng: &mut ChaCha8Rng) -> Result<ThetaPoint> {
        let m = self.m();
        let fractions = match self.routing {
            RoutingEncoding::Fractions => {
                let w: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
                LoadFractions::normalized(&w)?
            }
            RoutingEncoding::Thresholds => {
                let u: Vec<f64> = (0..m - 1).map(|_| rng.random()).collect();
                self.fractions_from_unit(&u)?
            }
        };
        let cands = (0..m)
            .map(|i| rng.random_range(0..self.cands.model(i).candidates.len()))
            .collect();
        let theta = ThetaPoint { fractions, cands };
        if m > 1 && rng.random_range(0..8) == 0 {
            let z = rng.random_range(0..m);
            if let Some(t) = without_model(&theta, z)? {
                return Ok(t);
            }
        }
        Ok(theta)
    }

    /// Neighbors of `theta`: one routing coordinate moved by ±radius, each
    /// model's share dropped to zero in turn, each model's candidate moved to
    /// the next cheaper or dearer option, and each pair of models moved in
    /// opposite directions.
    fn mutations(&self, theta: &ThetaPoint, radius: f64, rng: &mut ChaCha8Rng) -> Result<Vec<ThetaPoint>> {
        let m = self.m();
        let mut out = Vec::new();
        for sign in [-1.0, 1.0] {
            let fractions = match self.routing {
                RoutingEncoding::Fractions => {
                    let i = rng.random_range(0..m);
                    let mut f = theta.fractions.as_slice().to_vec();
                    f[i] = (f[i] + sign * radius).max(0.0);
                    if f.iter().sum::<f64>() <= 0.0 {
                        continue;
                    }
                    LoadFractions::normalized(&f)?
                }
                RoutingEncoding::Thresholds => {
                    let mut tau = crate::workload::thresholds_from_sorted(&theta.fractions, &self.trace.sorted_scores())
                        .thresholds()
                        .to_vec();
                    let i = rng.random_range(0..m - 1);
                    tau[i] = (tau[i] + sign * radius).clamp(0.0, 1.0);
                    self.fractions_from_unit(&tau)?
                }
            };
            out.push(ThetaPoint {
                fractions,
                cands: theta.cands.clone(),
            });
        }
        for z in 0..m {
            out.extend(without_model(theta, z)?);
        }
        let step = |cands: &mut Vec<usize>, mi: usize, d: i64| {
            let c = cands[mi] as i64 + d;
            let ok = c >= 0 && (c as usize) < self.cands.model(mi).candidates.len();
            if ok {
                cands[mi] = c as usize;
            }
            ok
        };
        for mi in 0..m {
            for d in [-1i64, 1] {
                let mut cands = theta.cands.clone();
                if step(&mut cands, mi, d) {
                    out.push(ThetaPoint {
                        fractions: theta.fractions.clone(),
                        cands,
                    });
                }
                // trade budget: one model dearer, another cheaper
                for mj in (0..m).filter(|&j| j != mi && d > 0) {
                    let mut cands = theta.cands.clone();
                    if step(&mut cands, mi, 1) && step(&mut cands, mj, -1) {
                        out.push(ThetaPoint {
                            fractions: theta.fractions.clone(),
                            cands,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn feasible(&self, theta: &ThetaPoint) -> bool {
        hard_feasible(theta, self.cons, &self.db.spec, self.cands)
    }
}

/// `theta` with model `z` receiving no traffic, its share spread over the
/// others in proportion. `None` when `z` carries nothing or everything.
fn without_model(theta: &ThetaPoint, z: usize) -> Result<Option<ThetaPoint>> {
    let mut f = theta.fractions.as_slice().to_vec();
    if !(f[z] > 0.0 && f[z] < 1.0) {
        return Ok(None);
    }
    f[z] = 0.0;
    Ok(Some(ThetaPoint {
        fractions: LoadFractions::normalized(&f)?,
        cands: theta.cands.clone(),
    }))
}

fn theta_key(t: &ThetaPoint) -> (Vec<u64>, Vec<usize>) {
    (t.fractions.as_slice().iter().map(|f| f.to_bits()).collect(), t.cands.clone())
}

/// Chooses the next decision point: builds a pool of random and mutated
/// points, drops infeasible or already evaluated ones and returns the
/// acquisition maximizer, ties going to the cheaper point.
#[allow(clippy::too_many_arguments)]
pub fn propose(
    space: &SearchSpace<'_>,
    gp_l: &Gp,
    gp_q: &Gp,
    pareto: &[ThetaPoint],
    evaluated: &BTreeSet<(Vec<u64>, Vec<usize>)>,
    acq: &AcqConfig,
    seed: u64,
) -> Result<(ThetaPoint, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::with_capacity(acq.pool_size + 4 * pareto.len());
    for _ in 0..acq.pool_size {
        pool.push(space.random_theta(&mut rng)?);
    }
    for t in pareto {
        pool.extend(space.mutations(t, acq.mutation_radius, &mut rng)?);
    }
    let mut seen = BTreeSet::new();
    pool.retain(|t| {
        let k = theta_key(t);
        space.feasible(t) && !evaluated.contains(&k) && seen.insert(k)
    });
    if pool.is_empty() {
        return Err(Error::NoFeasibleConfiguration);
    }
    let feats = pool
        .iter()
        .map(|t| space.encoder.encode(t))
        .collect::<Result<Vec<_>>>()?;
    let base = pareto
        .iter()
        .map(|t| space.encoder.encode(t))
        .collect::<Result<Vec<_>>>()?;
    let scores = acq_cqnehvi(gp_l, gp_q, &base, &feats, space.cons, acq)?;
    let costs = pool
        .iter()
        .map(|t| theta_cost(t, space.cands))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..pool.len())
        .min_by(|&a, &b| {
            scores[b]
                .mean
                .total_cmp(&scores[a].mean)
                .then(costs[a].cmp(&costs[b]))
                .then(a.cmp(&b))
        })
        .unwrap();
    Ok((pool.swap_remove(best), scores[best].mean))
}

/// Worst observed value plus a tenth of the observed span, per objective.
/// Latency ignores saturated records, whose value is the penalty; quality
/// is known for every record.
fn reference_point(records: &[EvalRecord]) -> [f64; 2] {
    let all: Vec<[f64; 2]> = records.iter().map(|r| r.objective_point()).collect();
    let unsat: Vec<[f64; 2]> = records
        .iter()
        .filter(|r| !r.saturated)
        .map(|r| r.objective_point())
        .collect();
    let mut reference = [0.0; 2];
    for (d, r) in reference.iter_mut().enumerate() {
        let pts = if d == 0 && !unsat.is_empty() { &unsat } else { &all };
        let hi = pts.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
        let lo = pts.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
        let span = hi - lo;
        *r = hi + if span > 0.0 { 0.1 * span } else { 0.1 * hi.abs().max(1.0) };
    }
    reference
}

fn log_entry(iteration: usize, phase: &str, rec: &EvalRecord, hv: f64) -> IterationLog {
    IterationLog {
        iteration,
        phase: phase.into(),
        fractions: rec.fractions.clone(),
        thresholds: rec.thresholds.clone(),
        candidate_ids: rec.candidate_ids.clone(),
        l_p95_s: rec.l_p95_s,
        q: rec.q,
        saturated: rec.saturated,
        hypervolume: hv,
        acquisition: None,
        beta_latency: None,
        beta_quality: None,
        fit_ms: 0.0,
        acq_ms: 0.0,
        eval_ms: 0.0,
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Initial quasi-random design followed by fit / propose / evaluate rounds
/// until the hypervolume stalls or the iteration budget runs out.
pub fn run(trace: &Trace, db: &PerfDb, cands: &CandidateSet, cons: &Constraints, cfg: &RunConfig) -> Result<RunResult> {
    cands.check_db(db)?;
    if cands.models.iter().any(|m| m.candidates.is_empty()) || cons.q_min.is_some_and(|q| q > 1.0) {
        return Err(Error::NoFeasibleConfiguration);
    }
    let space = SearchSpace::new(trace, db, cands, cons, cfg.routing)?;
    let mut evaluator = Evaluator::new(trace, db, cands, cons.total_qps);
    evaluator.aggregation = cfg.aggregation;
    let m = cands.num_models();
    let n_init = cfg.n_init.unwrap_or(2 * space.encoder.dim() + 1).max(2);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shift: Vec<f64> = (0..2 * m - 1).map(|_| rng.random()).collect();
    let mut thetas: Vec<ThetaPoint> = Vec::new();
    let mut evaluated = BTreeSet::new();
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut log = Vec::new();
    let mut i = 0u64;
    while thetas.len() < n_init && i < 200 * n_init as u64 {
        let h = halton(i, 2 * m - 1, &shift);
        i += 1;
        // single-model routings first, so the design spans the quality range
        let fractions = if thetas.len() < m && i <= 100 * n_init as u64 {
            LoadFractions::single(m, thetas.len())
        } else {
            space.fractions_from_unit(&h[..m - 1])?
        };
        let cs = (0..m)
            .map(|k| {
                let len = cands.model(k).candidates.len();
                ((h[m - 1 + k] * len as f64) as usize).min(len - 1)
            })
            .collect();
        let theta = ThetaPoint { fractions, cands: cs };
        if !space.feasible(&theta) || !evaluated.insert(theta_key(&theta)) {
            continue;
        }
        let t = Instant::now();
        let rec = evaluator
            .evaluate(&theta)
            .map_err(|e| Error::Iteration {
                iteration: 0,
                source: Box::new(e),
            })?;
        let mut entry = log_entry(0, "init", &rec, 0.0);
        entry.eval_ms = ms(t);
        log.push(entry);
        thetas.push(theta);
        records.push(rec);
    }
    if records.len() < 2 {
        return Err(Error::NoFeasibleConfiguration);
    }
    let reference = reference_point(&records);
    let mut pareto = ParetoSet::from_records(&records, cons, reference);
    for e in log.iter_mut() {
        e.hypervolume = pareto.hypervolume;
    }

    let mut fit_opts = FitOptions {
        starts: cfg.fit_starts,
        fixed_beta: (!cfg.learn_preference).then_some(0.0),
        ..Default::default()
    };
    let mut warm: [Option<KernelParams>; 2] = [None, None];
    let mut streak = 0;
    let mut converged = false;
    for it in 1..=cfg.budget_iters {
        let wrap = |e: Error| Error::Iteration {
            iteration: it,
            source: Box::new(e),
        };
        let t = Instant::now();
        let feats = thetas
            .iter()
            .map(|th| space.encoder.encode(th))
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        let lat: Vec<f64> = records.iter().map(|r| r.l_p95_s).collect();
        let qual: Vec<f64> = records.iter().map(|r| r.q).collect();
        fit_opts.seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(it as u64);
        fit_opts.warm_start = warm[0].clone();
        let gp_l = Gp::fit(feats.clone(), &lat, Objective::Latency, &fit_opts).map_err(wrap)?;
        fit_opts.warm_start = warm[1].clone();
        let gp_q = Gp::fit(feats, &qual, Objective::Quality, &fit_opts).map_err(wrap)?;
        warm = [Some(gp_l.params.clone()), Some(gp_q.params.clone())];
        let fit_ms = ms(t);

        let t = Instant::now();
        let acq = AcqConfig {
            mc_samples: cfg.mc_samples,
            pool_size: cfg.pool_size,
            seed: fit_opts.seed,
            reference,
            mutation_radius: cfg.mutation_radius,
        };
        let front: Vec<ThetaPoint> = pareto
            .records
            .iter()
            .map(|r| r.theta())
            .collect::<Result<_>>()
            .map_err(wrap)?;
        let (theta, score) = propose(&space, &gp_l, &gp_q, &front, &evaluated, &acq, fit_opts.seed).map_err(wrap)?;
        let acq_ms = ms(t);

        let t = Instant::now();
        let rec = evaluator.evaluate(&theta).map_err(wrap)?;
        let eval_ms = ms(t);
        evaluated.insert(theta_key(&theta));
        thetas.push(theta);
        records.push(rec);
        let prev_hv = pareto.hypervolume;
        pareto = ParetoSet::from_records(&records, cons, reference);

        let mut entry = log_entry(it, "search", records.last().unwrap(), pareto.hypervolume);
        entry.acquisition = Some(score);
        entry.beta_latency = Some(gp_l.params.beta);
        entry.beta_quality = Some(gp_q.params.beta);
        entry.fit_ms = fit_ms;
        entry.acq_ms = acq_ms;
        entry.eval_ms = eval_ms;
        log.push(entry);

        let rel = (pareto.hypervolume - prev_hv).abs() / prev_hv.abs().max(1e-12);
        streak = if rel < cfg.hv_tol { streak + 1 } else { 0 };
        if streak >= cfg.patience {
            converged = true;
            break;
        }
    }
    if pareto.is_empty() {
        return Err(Error::NoFeasibleConfiguration);
    }
    Ok(RunResult {
        pareto,
        records,
        log,
        converged,
        reference,
    })
}
