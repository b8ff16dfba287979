//! Exact Gaussian-process regression with marginal-likelihood fitting.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::kernel::{kernel, kernel_with_grad, Features, KernelParams};
use super::lbfgs::{minimize, LbfgsOptions};
use super::transform::{sigmoid, Objective, OutputTransform};
use crate::error::{Error, Result};

/// Largest jitter, relative to the mean diagonal, tried before giving up.
pub const MAX_RELATIVE_JITTER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lengthscale: (f64, f64),
    pub scale: (f64, f64),
    pub phi: (f64, f64),
    pub beta: (f64, f64),
    pub noise: (f64, f64),
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lengthscale: (1e-2, 1e2),
            scale: (1e-2, 1e2),
            phi: (0.0, 1.0),
            beta: (0.0, 1.0),
            noise: (1e-6, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Multi-start count; at least 8 are run.
    pub starts: usize,
    pub seed: u64,
    pub bounds: Bounds,
    pub fixed_beta: Option<f64>,
    pub fixed_phi: Option<f64>,
    pub fixed_noise: Option<f64>,
    /// Extra starting point, typically the previous fit.
    pub warm_start: Option<KernelParams>,
    pub lbfgs: LbfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            starts: 8,
            seed: 0,
            bounds: Bounds::default(),
            fixed_beta: None,
            fixed_phi: None,
            fixed_noise: None,
            warm_start: None,
            lbfgs: LbfgsOptions::default(),
        }
    }
}

/// Factorizes `k`, adding diagonal jitter up to 1e-6 of the mean diagonal.
pub fn factorize(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = k.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let n = k.nrows();
    let mean_diag = (k.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut rel = 1e-12;
    while rel <= MAX_RELATIVE_JITTER * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            return Ok((c, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Factorization {
        jitter: MAX_RELATIVE_JITTER * mean_diag,
    })
}

pub fn gram(x: &[Features], p: &KernelParams) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&x[i], &x[j], p);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Which kernel parameters are optimized, and their box transforms.
struct Layout {
    dr: usize,
    dc: usize,
    bounds: Bounds,
    fixed_phi: Option<f64>,
    fixed_beta: Option<f64>,
    fixed_noise: Option<f64>,
}

fn to_box(v: f64, lo: f64, hi: f64) -> f64 {
    let t = ((v - lo) / (hi - lo)).clamp(1e-9, 1.0 - 1e-9);
    (t / (1.0 - t)).ln()
}

impl Layout {
    fn len(&self) -> usize {
        self.dr
            + self.dc
            + 3
            + self.fixed_phi.is_none() as usize
            + self.fixed_beta.is_none() as usize
            + self.fixed_noise.is_none() as usize
    }

    fn log_box(&self, u: f64, (lo, hi): (f64, f64)) -> (f64, f64) {
        let s = sigmoid(u);
        let (llo, lhi) = (lo.ln(), hi.ln());
        ((llo + (lhi - llo) * s).exp(), (lhi - llo) * s * (1.0 - s))
    }

    fn lin_box(&self, u: f64, (lo, hi): (f64, f64)) -> (f64, f64) {
        let s = sigmoid(u);
        (lo + (hi - lo) * s, (hi - lo) * s * (1.0 - s))
    }

    /// Parameters and, per free coordinate, the derivative of the natural
    /// parameter (log for positive ones) with respect to it.
    fn decode(&self, u: &[f64]) -> (KernelParams, Vec<f64>) {
        let b = &self.bounds;
        let mut chain = Vec::with_capacity(u.len());
        let mut it = u.iter();
        let mut pos = |bounds| {
            let (v, d) = self.log_box(*it.next().unwrap(), bounds);
            chain.push(d);
            v
        };
        let ls_routing = (0..self.dr).map(|_| pos(b.lengthscale)).collect();
        let ls_deploy = (0..self.dc).map(|_| pos(b.lengthscale)).collect();
        let s_tau = pos(b.scale);
        let s_c = pos(b.scale);
        let s_x = pos(b.scale);
        let mut rest = u[self.dr + self.dc + 3..].iter();
        let mut lin = |fixed: Option<f64>, bounds, log: bool| match fixed {
            Some(v) => v,
            None => {
                let (v, d) = if log {
                    self.log_box(*rest.next().unwrap(), bounds)
                } else {
                    self.lin_box(*rest.next().unwrap(), bounds)
                };
                chain.push(d);
                v
            }
        };
        let phi = lin(self.fixed_phi, b.phi, false);
        let beta = lin(self.fixed_beta, b.beta, false);
        let noise = lin(self.fixed_noise, b.noise, true);
        (
            KernelParams {
                ls_routing,
                ls_deploy,
                s_tau,
                s_c,
                s_x,
                phi,
                beta,
                noise,
            },
            chain,
        )
    }

    fn encode(&self, p: &KernelParams) -> Vec<f64> {
        let b = &self.bounds;
        let lg = |v: f64, (lo, hi): (f64, f64)| to_box(v.ln(), lo.ln(), hi.ln());
        let mut u: Vec<f64> = p
            .ls_routing
            .iter()
            .chain(&p.ls_deploy)
            .map(|l| lg(*l, b.lengthscale))
            .collect();
        u.push(lg(p.s_tau, b.scale));
        u.push(lg(p.s_c, b.scale));
        u.push(lg(p.s_x, b.scale));
        if self.fixed_phi.is_none() {
            u.push(to_box(p.phi, b.phi.0, b.phi.1));
        }
        if self.fixed_beta.is_none() {
            u.push(to_box(p.beta, b.beta.0, b.beta.1));
        }
        if self.fixed_noise.is_none() {
            u.push(lg(p.noise, b.noise));
        }
        u
    }
}

/// Log marginal likelihood and its gradient with respect to the natural
/// parameters in layout order (log ℓ, log s, φ, β, log noise).
fn mll_with_grad(x: &[Features], y: &DVector<f64>, p: &KernelParams, layout: &Layout) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let (dr, dc) = (layout.dr, layout.dc);
    let mut k = gram(x, p);
    for i in 0..n {
        k[(i, i)] += p.noise;
    }
    let (chol, _) = factorize(&k).ok()?;
    let alpha = chol.solve(y);
    let log_det: f64 = chol.l_dirty().diagonal().iter().take(n).map(|v| v.ln()).sum::<f64>() * 2.0;
    let mll = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let kinv = chol.inverse();

    let mut grad = vec![0.0; dr + dc + 6];
    let (mut br, mut bc) = (vec![0.0; dr], vec![0.0; dc]);
    for i in 0..n {
        for j in 0..=i {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let w = if i == j { 0.5 * w } else { w };
            let g = kernel_with_grad(&x[i], &x[j], p, &mut br, &mut bc);
            for (d, v) in g.ls_routing.iter().enumerate() {
                grad[d] += w * v;
            }
            for (d, v) in g.ls_deploy.iter().enumerate() {
                grad[dr + d] += w * v;
            }
            grad[dr + dc] += w * g.log_s_tau;
            grad[dr + dc + 1] += w * g.log_s_c;
            grad[dr + dc + 2] += w * g.log_s_x;
            grad[dr + dc + 3] += w * g.phi;
            grad[dr + dc + 4] += w * g.beta;
            if i == j {
                grad[dr + dc + 5] += w * p.noise;
            }
        }
    }
    let mut out: Vec<f64> = grad[..dr + dc + 3].to_vec();
    if layout.fixed_phi.is_none() {
        out.push(grad[dr + dc + 3]);
    }
    if layout.fixed_beta.is_none() {
        out.push(grad[dr + dc + 4]);
    }
    if layout.fixed_noise.is_none() {
        out.push(grad[dr + dc + 5]);
    }
    mll.is_finite().then_some((mll, out))
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 24] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89];

/// Point `i` of a Halton sequence in `dim` dimensions, randomly shifted
/// modulo 1.
pub fn halton(i: u64, dim: usize, shift: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|d| (radical_inverse(i + 1, PRIMES[d % PRIMES.len()]) + shift[d]).fract())
        .collect()
}

/// A fitted surrogate for one objective.
#[derive(Debug, Clone)]
pub struct Gp {
    pub x: Vec<Features>,
    /// Standardized training targets.
    pub y: DVector<f64>,
    pub transform: OutputTransform,
    pub params: KernelParams,
    pub jitter: f64,
    pub log_marginal_likelihood: f64,
    /// Training targets that had to be clamped into the transform domain.
    pub clamped: usize,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

impl Gp {
    /// Fits hyperparameters by multi-start L-BFGS on the marginal likelihood.
    pub fn fit(x: Vec<Features>, raw: &[f64], objective: Objective, opts: &FitOptions) -> Result<Gp> {
        if x.len() < 2 || x.len() != raw.len() {
            return Err(Error::validation("need at least two training points"));
        }
        let clamped = match objective {
            Objective::Quality => raw.iter().filter(|q| super::transform::logit_quality(**q).1).count(),
            Objective::Latency => 0,
        };
        let (transform, z) = OutputTransform::fit(objective, raw)?;
        let y = DVector::from_vec(z);
        let (dr, dc) = (x[0].routing.len(), x[0].deploy.len());
        let layout = Layout {
            dr,
            dc,
            bounds: opts.bounds,
            fixed_phi: opts.fixed_phi,
            fixed_beta: opts.fixed_beta,
            fixed_noise: opts.fixed_noise,
        };

        let mut init = KernelParams::initial(dr, dc);
        if let Some(v) = opts.fixed_phi {
            init.phi = v;
        }
        if let Some(v) = opts.fixed_beta {
            init.beta = v;
        }
        if let Some(v) = opts.fixed_noise {
            init.noise = v;
        }
        let mut starts = vec![layout.encode(&init)];
        if let Some(w) = &opts.warm_start {
            if w.ls_routing.len() == dr && w.ls_deploy.len() == dc {
                starts.push(layout.encode(w));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let shift: Vec<f64> = (0..dr + dc).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let (llo, lhi) = (0.1f64.ln(), 10f64.ln());
        let mut i = 0;
        while starts.len() < opts.starts.max(8) {
            let h = halton(i, dr + dc, &shift);
            let mut p = init.clone();
            for (d, v) in h.iter().enumerate() {
                let l = (llo + (lhi - llo) * v).exp();
                if d < dr {
                    p.ls_routing[d] = l;
                } else {
                    p.ls_deploy[d - dr] = l;
                }
            }
            starts.push(layout.encode(&p));
            i += 1;
        }

        let objective_fn = |u: &[f64]| {
            let (p, chain) = layout.decode(u);
            match mll_with_grad(&x, &y, &p, &layout) {
                Some((mll, g)) => (-mll, g.iter().zip(&chain).map(|(gi, c)| -gi * c).collect()),
                None => (f64::INFINITY, vec![0.0; u.len()]),
            }
        };
        let mut best: Option<(Vec<f64>, f64)> = None;
        for u0 in starts {
            let (u, v) = minimize(objective_fn, u0, &opts.lbfgs);
            if v.is_finite() && best.as_ref().is_none_or(|(_, b)| v < *b) {
                best = Some((u, v));
            }
        }
        let Some((u, nll)) = best else {
            return Err(Error::Factorization {
                jitter: MAX_RELATIVE_JITTER,
            });
        };
        debug_assert_eq!(u.len(), layout.len());
        let (params, _) = layout.decode(&u);
        let mut gp = Gp::with_params(x, y, transform, params)?;
        gp.log_marginal_likelihood = -nll;
        gp.clamped = clamped;
        Ok(gp)
    }

    /// Conditions on standardized targets with fixed hyperparameters.
    pub fn with_params(x: Vec<Features>, y: DVector<f64>, transform: OutputTransform, params: KernelParams) -> Result<Gp> {
        let n = x.len();
        let mut k = gram(&x, &params);
        for i in 0..n {
            k[(i, i)] += params.noise;
        }
        let (chol, jitter) = factorize(&k)?;
        let alpha = chol.solve(&y);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let mll = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(Gp {
            x,
            y,
            transform,
            params,
            jitter,
            log_marginal_likelihood: mll,
            clamped: 0,
            chol,
            alpha,
        })
    }

    fn cross(&self, pool: &[Features]) -> DMatrix<f64> {
        DMatrix::from_fn(self.x.len(), pool.len(), |i, j| kernel(&self.x[i], &pool[j], &self.params))
    }

    /// Latent posterior mean and variance, standardized units.
    pub fn predict(&self, x: &Features) -> (f64, f64) {
        let ks = self.cross(std::slice::from_ref(x));
        let mean = ks.column(0).dot(&self.alpha);
        let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular solve");
        let var = (kernel(x, x, &self.params) - v.column(0).norm_squared()).max(0.0);
        (mean, var)
    }

    /// Joint latent posterior over `pool`, standardized units.
    pub fn posterior(&self, pool: &[Features]) -> Posterior {
        let ks = self.cross(pool);
        let mean = ks.transpose() * &self.alpha;
        let v = self.chol.l().solve_lower_triangular(&ks).expect("triangular solve");
        let cov = gram(pool, &self.params) - v.transpose() * v;
        Posterior { mean, cov }
    }

    /// Posterior over `base` jointly, plus for each `pool` point its
    /// marginal and its covariance with `base`.
    pub fn posterior_blocks(&self, base: &[Features], pool: &[Features]) -> PosteriorBlocks {
        let base_post = self.posterior(base);
        let kb = self.cross(base);
        let vb = self.chol.l().solve_lower_triangular(&kb).expect("triangular solve");
        let kp = self.cross(pool);
        let vp = self.chol.l().solve_lower_triangular(&kp).expect("triangular solve");
        let mean_pool = kp.transpose() * &self.alpha;
        let var_pool = (0..pool.len())
            .map(|j| (kernel(&pool[j], &pool[j], &self.params) - vp.column(j).norm_squared()).max(0.0))
            .collect();
        let prior_pb = DMatrix::from_fn(pool.len(), base.len(), |j, b| kernel(&pool[j], &base[b], &self.params));
        let cov_pool_base = prior_pb - vp.transpose() * vb;
        PosteriorBlocks {
            base: base_post,
            mean_pool,
            var_pool,
            cov_pool_base,
        }
    }
}

/// Multivariate normal over a finite set of points.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Posterior {
    /// Correlated draws, deterministic per seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let (chol, _) = factorize_psd(&self.cov)?;
        let l = chol.l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.mean.len();
        Ok((0..n)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                &self.mean + &l * z
            })
            .collect())
    }
}

/// Factorization of a posterior covariance, which may be singular in
/// exact arithmetic (for example at training points without noise).
pub(crate) fn factorize_psd(cov: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = cov.nrows();
    if n == 0 {
        return Ok((DMatrix::<f64>::zeros(0, 0).cholesky().unwrap(), 0.0));
    }
    let scale = cov.diagonal().iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut jitter = 1e-12 * scale;
    loop {
        let mut c = cov.clone();
        for i in 0..n {
            c[(i, i)] += jitter;
        }
        if let Some(ch) = c.cholesky() {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
        if jitter > 1e-3 * scale {
            return Err(Error::Factorization { jitter });
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorBlocks {
    pub base: Posterior,
    pub mean_pool: DVector<f64>,
    pub var_pool: Vec<f64>,
    /// Pool points by rows, base points by columns.
    pub cov_pool_base: DMatrix<f64>,
}
