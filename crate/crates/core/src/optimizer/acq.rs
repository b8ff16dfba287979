//! Constrained noisy expected hypervolume improvement by Monte Carlo.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::hv::Staircase;
use super::Constraints;
use crate::error::Result;
use crate::surrogate::gp::factorize_psd;
use crate::surrogate::transform::logit_quality;
use crate::surrogate::{Features, Gp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcqConfig {
    pub mc_samples: usize,
    pub pool_size: usize,
    pub seed: u64,
    /// In (log L, -logit Q) space.
    pub reference: [f64; 2],
    /// Step applied to one load fraction (or threshold) by pool mutations.
    pub mutation_radius: f64,
}

impl Default for AcqConfig {
    fn default() -> Self {
        AcqConfig {
            mc_samples: 128,
            pool_size: 512,
            seed: 0,
            reference: [0.0, 0.0],
            mutation_radius: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcqScore {
    pub mean: f64,
    /// Standard error of the Monte Carlo mean.
    pub std_err: f64,
}

/// Joint draws of one objective at the baseline and pool points, in the
/// warped (unstandardized) space. Pool draws are conditioned on the
/// baseline draw of the same sample.
struct Draws {
    base: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
}

fn draw(gp: &Gp, baseline: &[Features], pool: &[Features], samples: usize, seed: u64) -> Result<Draws> {
    let blocks = gp.posterior_blocks(baseline, pool);
    let f = baseline.len();
    let st = gp.transform.standardizer;
    let base_std: Vec<DVector<f64>> = if f > 0 {
        blocks.base.sample(samples, seed)?
    } else {
        vec![DVector::zeros(0); samples]
    };
    // W = Σ_BB⁻¹ Σ_Bx for every pool point
    let (weights, cond_var) = if f > 0 {
        let (chol, _) = factorize_psd(&blocks.base.cov)?;
        let w = chol.solve(&blocks.cov_pool_base.transpose());
        let v: Vec<f64> = (0..pool.len())
            .map(|j| (blocks.var_pool[j] - blocks.cov_pool_base.row(j).transpose().dot(&w.column(j))).max(0.0))
            .collect();
        (Some(w), v)
    } else {
        (None, blocks.var_pool.clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut base = Vec::with_capacity(samples);
    let mut pool_draws = Vec::with_capacity(samples);
    for b in &base_std {
        let z: f64 = StandardNormal.sample(&mut rng);
        let resid = b - &blocks.base.mean;
        let row: Vec<f64> = (0..pool.len())
            .map(|j| {
                let shift = weights.as_ref().map_or(0.0, |w| w.column(j).dot(&resid));
                st.inverse(blocks.mean_pool[j] + shift + cond_var[j].sqrt() * z)
            })
            .collect();
        base.push(b.iter().map(|v| st.inverse(*v)).collect());
        pool_draws.push(row);
    }
    Ok(Draws {
        base,
        pool: pool_draws,
    })
}

/// Scores every pool point by E[HVI · 1{constraints hold}] where the
/// expectation runs over joint posterior draws of both objectives and the
/// improvement is measured against the frontier of the jointly drawn
/// baseline points.
pub fn acq_cqnehvi(
    gp_l: &Gp,
    gp_q: &Gp,
    baseline: &[Features],
    pool: &[Features],
    cons: &Constraints,
    acq: &AcqConfig,
) -> Result<Vec<AcqScore>> {
    let s = acq.mc_samples.max(1);
    let dl = draw(gp_l, baseline, pool, s, acq.seed)?;
    let dq = draw(gp_q, baseline, pool, s, acq.seed.wrapping_add(1))?;
    let log_lmax = cons.l_max.map(f64::ln);
    let logit_qmin = cons.q_min.map(|q| match q {
        q if q <= 0.0 => f64::NEG_INFINITY,
        q if q >= 1.0 => f64::INFINITY,
        q => logit_quality(q).0,
    });
    let ok = |l: f64, q: f64| log_lmax.is_none_or(|m| l <= m) && logit_qmin.is_none_or(|m| q >= m);

    let mut sum = vec![0.0; pool.len()];
    let mut sum_sq = vec![0.0; pool.len()];
    for k in 0..s {
        let front: Vec<[f64; 2]> = dl.base[k]
            .iter()
            .zip(&dq.base[k])
            .filter(|(l, q)| ok(**l, **q))
            .map(|(l, q)| [*l, -*q])
            .collect();
        let stair = Staircase::new(&front, acq.reference);
        for j in 0..pool.len() {
            let (l, q) = (dl.pool[k][j], dq.pool[k][j]);
            let v = if ok(l, q) { stair.improvement([l, -q]) } else { 0.0 };
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = s as f64;
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(a, b)| {
            let mean = a / n;
            let var = if s > 1 { ((b - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
            AcqScore {
                mean,
                std_err: (var / n).sqrt(),
            }
        })
        .collect())
}
