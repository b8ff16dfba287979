//! Composite covariance over (routing, deployment) features.
//!
//! k(x, x') = s_τ·k_r + w(x)w(x')·s_c·k_c + φ·s_×·k_r·k_c, where k_r is an ARD
//! Matérn-5/2 kernel on the routing block, k_c an ARD Matérn-3/2 kernel on
//! the deployment block and w(x) = exp(β·pref(x)) the preference weight.

use serde::{Deserialize, Serialize};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

/// An encoded decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub routing: Vec<f64>,
    pub deploy: Vec<f64>,
    /// Σ_{m,n} a_{m,n}·s_{m,n} of the chosen deployment.
    pub pref: f64,
}

impl Features {
    pub fn dim(&self) -> usize {
        self.routing.len() + self.deploy.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub ls_routing: Vec<f64>,
    pub ls_deploy: Vec<f64>,
    pub s_tau: f64,
    pub s_c: f64,
    pub s_x: f64,
    pub phi: f64,
    pub beta: f64,
    pub noise: f64,
}

impl KernelParams {
    pub fn initial(dr: usize, dc: usize) -> Self {
        KernelParams {
            ls_routing: vec![0.5; dr],
            ls_deploy: vec![1.0; dc],
            s_tau: 1.0,
            s_c: 1.0,
            s_x: 1.0,
            phi: 0.1,
            beta: 0.01,
            noise: 1e-4,
        }
    }
}

/// exp(β · Σ a·s).
pub fn preference_weight(pref: f64, beta: f64) -> f64 {
    (beta * pref).exp()
}

fn scaled_sq(a: &[f64], b: &[f64], ls: &[f64], out: &mut [f64]) -> f64 {
    let mut r2 = 0.0;
    for i in 0..a.len() {
        let t = (a[i] - b[i]) / ls[i];
        out[i] = t * t;
        r2 += out[i];
    }
    r2
}

pub fn matern52(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    let r = r2.sqrt();
    (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * (-SQRT5 * r).exp()
}

pub fn matern32(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let r2: f64 = a.iter().zip(b).zip(ls).map(|((x, y), l)| ((x - y) / l).powi(2)).sum();
    let r = r2.sqrt();
    (1.0 + SQRT3 * r) * (-SQRT3 * r).exp()
}

/// The three additive parts of k at one pair, before noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelTerms {
    pub routing: f64,
    pub deploy: f64,
    pub interaction: f64,
}

impl KernelTerms {
    pub fn total(&self) -> f64 {
        self.routing + self.deploy + self.interaction
    }
}

pub fn kernel_terms(a: &Features, b: &Features, p: &KernelParams) -> KernelTerms {
    let kr = matern52(&a.routing, &b.routing, &p.ls_routing);
    let kc = matern32(&a.deploy, &b.deploy, &p.ls_deploy);
    let ww = preference_weight(a.pref + b.pref, p.beta);
    KernelTerms {
        routing: p.s_tau * kr,
        deploy: ww * p.s_c * kc,
        interaction: p.phi * p.s_x * kr * kc,
    }
}

pub fn kernel(a: &Features, b: &Features, p: &KernelParams) -> f64 {
    kernel_terms(a, b, p).total()
}

/// Partial derivatives of k at one pair, used by the likelihood gradient.
pub(crate) struct PairGrad {
    /// d k / d log ℓ for each routing dimension.
    pub ls_routing: Vec<f64>,
    pub ls_deploy: Vec<f64>,
    pub log_s_tau: f64,
    pub log_s_c: f64,
    pub log_s_x: f64,
    pub phi: f64,
    pub beta: f64,
}

pub(crate) fn kernel_with_grad(a: &Features, b: &Features, p: &KernelParams, buf_r: &mut [f64], buf_c: &mut [f64]) -> PairGrad {
    let r2 = scaled_sq(&a.routing, &b.routing, &p.ls_routing, buf_r);
    let r = r2.sqrt();
    let er = (-SQRT5 * r).exp();
    let kr = (1.0 + SQRT5 * r + 5.0 * r2 / 3.0) * er;
    // d kr / d log ℓ_i = (5/3)(1 + √5 r) e^{-√5 r} (Δ_i/ℓ_i)²
    let dkr = 5.0 / 3.0 * (1.0 + SQRT5 * r) * er;

    let c2 = scaled_sq(&a.deploy, &b.deploy, &p.ls_deploy, buf_c);
    let c = c2.sqrt();
    let ec = (-SQRT3 * c).exp();
    let kc = (1.0 + SQRT3 * c) * ec;
    // d kc / d log ℓ_i = 3 e^{-√3 r} (Δ_i/ℓ_i)²
    let dkc = 3.0 * ec;

    let psum = a.pref + b.pref;
    let ww = (p.beta * psum).exp();
    let dep = ww * p.s_c * kc;
    let inter = p.phi * p.s_x * kr * kc;
    let coef_r = p.s_tau + p.phi * p.s_x * kc;
    let coef_c = ww * p.s_c + p.phi * p.s_x * kr;
    PairGrad {
        ls_routing: buf_r.iter().map(|t| coef_r * dkr * t).collect(),
        ls_deploy: buf_c.iter().map(|t| coef_c * dkc * t).collect(),
        log_s_tau: p.s_tau * kr,
        log_s_c: dep,
        log_s_x: inter,
        phi: p.s_x * kr * kc,
        beta: dep * psum,
    }
}
