//! Gaussian analytics: absolute moments, Hermite polynomials, the Hermite
//! expansion of `u_p(x) = |x|^p - m_p`, and covariance / fourth-moment probes.
//!
//! `H_k` here is the probabilists' polynomial `He_k` divided by `k!`, the
//! normalization fixed by the generating function `exp(tx - t^2/2) = sum t^k H_k(x)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{AmbitError, Result};
use crate::quad::{integrate, QuadratureConfig};
use crate::rng::{substream, StreamKind};
use crate::simulate::GaussianSampler;

/// `m_q = E|X|^q` for standard normal `X`, by the closed form.
pub fn abs_moment(q: f64) -> Result<f64> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(AmbitError::domain(format!("abs_moment needs q > 0, got {q}")));
    }
    Ok(2f64.powf(q / 2.0) * gamma((q + 1.0) / 2.0) / PI.sqrt())
}

/// `m_q` by adaptive quadrature of `2 x^q phi(x)` on `[0, 40]`.
pub fn abs_moment_quadrature(q: f64) -> Result<f64> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(AmbitError::domain(format!("abs_moment needs q > 0, got {q}")));
    }
    let cfg = QuadratureConfig { rel_tol: 1e-12, ..Default::default() };
    let norm = (2.0 / PI).sqrt();
    let peak = q.sqrt();
    let est = integrate(
        |x| norm * x.powf(q) * (-0.5 * x * x).exp(),
        0.0,
        40.0,
        &[peak, 2.0 * peak + 2.0, 10.0, 20.0],
        &[0.0],
        &cfg,
    )?;
    Ok(est.value)
}

/// `H_k(x) = He_k(x) / k!` via `H_{k+1} = (x H_k - H_{k-1}) / (k+1)`.
pub fn hermite_poly(k: i64, x: f64) -> Result<f64> {
    if k < 0 {
        return Err(AmbitError::domain(format!("hermite order must be >= 0, got {k}")));
    }
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 0..k {
        let next = (x * cur - prev) / (j as f64 + 1.0);
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Probabilists' `He_k(x)`.
pub fn hermite_he(k: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (0.0, 1.0);
    for j in 0..k {
        let next = x * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Orthonormal `He_k / sqrt(k!)` for `k = 0..=kmax`, written into `out`.
fn orthonormal_hermite(x: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = x;
    }
    for k in 1..out.len().saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = (x * out[k] - kf.sqrt() * out[k - 1]) / (kf + 1.0).sqrt();
    }
}

/// Nodes and weights of a Gauss rule.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn apply<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Gauss rule from the three-term recurrence of the orthonormal polynomials
/// (`diag[k]`, `off[k]` coupling degree k-1 and k; `off` has `n + 1` entries). Nodes from the Jacobi
/// matrix, polished by Newton, weights by the Christoffel formula.
fn rule_from_recurrence(diag: &[f64], off: &[f64], mu0: f64) -> GaussRule {
    let n = diag.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jac[(i, i)] = diag[i];
        if i + 1 < n {
            jac[(i, i + 1)] = off[i + 1];
            jac[(i + 1, i)] = off[i + 1];
        }
    }
    let eig = SymmetricEigen::new(jac);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.total_cmp(b));

    // q_k(x) and q_k'(x) for the orthonormal family; q_n vanishes at the nodes.
    let eval = |x: f64| -> (f64, f64, f64) {
        let (mut q0, mut q1) = (0.0, 1.0);
        let (mut d0, mut d1) = (0.0, 0.0);
        let mut sumsq = 1.0;
        for k in 0..n {
            let b_next = off[k + 1];
            let b_k = if k == 0 { 0.0 } else { off[k] };
            let q2 = ((x - diag[k]) * q1 - b_k * q0) / b_next;
            let d2 = (q1 + (x - diag[k]) * d1 - b_k * d0) / b_next;
            q0 = q1;
            q1 = q2;
            d0 = d1;
            d1 = d2;
            if k + 1 < n {
                sumsq += q1 * q1;
            }
        }
        (q1, d1, sumsq)
    };

    let mut weights = Vec::with_capacity(n);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (q, d, _) = eval(*x);
            let step = q / d;
            if !step.is_finite() {
                break;
            }
            *x -= step;
            if step.abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                break;
            }
        }
        let (_, _, sumsq) = eval(*x);
        let w = mu0 / sumsq;
        weights.push(if w.is_finite() { w } else { 0.0 });
    }
    GaussRule { nodes, weights }
}

/// Gauss–Hermite rule for the standard normal density (weights sum to 1).
pub fn gauss_hermite_rule(n: usize) -> GaussRule {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (0..=n).map(|k| (k as f64).sqrt()).collect();
    rule_from_recurrence(&diag, &off, 1.0)
}

/// Generalized Gauss–Laguerre rule for the weight `y^a e^{-y}` on `(0, inf)`.
pub fn gauss_laguerre_rule(n: usize, a: f64) -> GaussRule {
    let diag: Vec<f64> = (0..n).map(|k| 2.0 * k as f64 + a + 1.0).collect();
    let off: Vec<f64> = (0..=n).map(|k| (k as f64 * (k as f64 + a)).max(0.0).sqrt()).collect();
    rule_from_recurrence(&diag, &off, gamma(a + 1.0))
}

/// Coefficients of `u_p = |x|^p - m_p` in the basis `H_k = He_k / k!`.
#[derive(Debug, Clone, Serialize)]
pub struct HermiteExpansion {
    pub p: f64,
    pub max_order: usize,
    /// `alpha_k`, the coefficient of `H_k`.
    pub coefficients: Vec<f64>,
    /// `E[u_p(X) He_k(X)] / sqrt(k!)`, so that `alpha_k^2 / k! = normalized_k^2`.
    pub normalized: Vec<f64>,
    pub nodes_used: usize,
}

impl HermiteExpansion {
    /// Partial sums `sum_{k=2}^{K} alpha_k^2 / k!` for `K = 2..=max_order`.
    pub fn parseval_partial_sums(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::new();
        for k in 2..=self.max_order {
            acc += self.normalized[k] * self.normalized[k];
            out.push(acc);
        }
        out
    }

    pub fn parseval_total(&self) -> f64 {
        self.parseval_partial_sums().last().copied().unwrap_or(0.0)
    }

    /// `m_{2p} - m_p^2 = Var |X|^p`.
    pub fn variance_target(&self) -> f64 {
        let mp = abs_moment(self.p).expect("p validated");
        abs_moment(2.0 * self.p).expect("p validated") - mp * mp
    }

    /// `Cov[|X1|^p, |X2|^p] = sum_k alpha_k^2 / k! rho^k` truncated at `max_order`.
    pub fn covariance_series(&self, rho: f64) -> f64 {
        let mut acc = 0.0;
        let mut pow = 1.0;
        for k in 0..=self.max_order {
            acc += self.normalized[k] * self.normalized[k] * pow;
            pow *= rho;
        }
        acc
    }

    /// Evaluate the truncated series `sum alpha_k H_k(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        let mut psi = vec![0.0; self.max_order + 1];
        orthonormal_hermite(x, &mut psi);
        psi.iter().zip(&self.normalized).map(|(a, b)| a * b).sum()
    }
}

fn hermite_normalized_coeffs(p: f64, kmax: usize, nodes: usize) -> Result<Vec<f64>> {
    let mp = abs_moment(p)?;
    let a = (p - 1.0) / 2.0;
    let power_rule = gauss_laguerre_rule(nodes, a);
    let const_rule = gauss_laguerre_rule(nodes, -0.5);
    let full_rule = gauss_hermite_rule(nodes);
    let sqrt_pi = PI.sqrt();

    let mut out = vec![0.0; kmax + 1];
    let mut psi = vec![0.0; kmax + 1];
    // Even orders: fold onto the half line and substitute y = x^2 / 2.
    let mut acc_pow = vec![0.0; kmax + 1];
    for (&y, &w) in power_rule.nodes.iter().zip(&power_rule.weights) {
        orthonormal_hermite((2.0 * y).sqrt(), &mut psi);
        for k in (0..=kmax).step_by(2) {
            acc_pow[k] += w * psi[k];
        }
    }
    let mut acc_const = vec![0.0; kmax + 1];
    for (&y, &w) in const_rule.nodes.iter().zip(&const_rule.weights) {
        orthonormal_hermite((2.0 * y).sqrt(), &mut psi);
        for k in (0..=kmax).step_by(2) {
            acc_const[k] += w * psi[k];
        }
    }
    let scale = 2f64.powf(p / 2.0) / sqrt_pi;
    for k in (0..=kmax).step_by(2) {
        out[k] = scale * acc_pow[k] - mp * acc_const[k] / sqrt_pi;
    }
    // Odd orders: symmetric full-line rule; these vanish up to roundoff.
    let mut acc_odd = vec![0.0; kmax + 1];
    for (&x, &w) in full_rule.nodes.iter().zip(&full_rule.weights) {
        orthonormal_hermite(x, &mut psi);
        let u = x.abs().powf(p) - mp;
        for k in (1..=kmax).step_by(2) {
            acc_odd[k] += w * u * psi[k];
        }
    }
    for k in (1..=kmax).step_by(2) {
        out[k] = acc_odd[k];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(AmbitError::Quadrature {
            estimate: f64::NAN,
            error: f64::INFINITY,
            context: format!("non-finite Hermite coefficient with {nodes} nodes"),
        });
    }
    Ok(out)
}

pub const DEFAULT_HERMITE_ORDER: usize = 60;
pub const DEFAULT_HERMITE_TOL: f64 = 1e-10;

/// Hermite coefficients of `u_p` up to order `max_order`.
pub fn up_hermite_coeffs(p: f64, max_order: usize) -> Result<HermiteExpansion> {
    up_hermite_coeffs_with_tol(p, max_order, DEFAULT_HERMITE_TOL)
}

pub fn up_hermite_coeffs_with_tol(p: f64, max_order: usize, tol: f64) -> Result<HermiteExpansion> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    if !(2..=200).contains(&max_order) {
        return Err(AmbitError::domain(format!("max order must lie in 2..=200, got {max_order}")));
    }
    let scale = abs_moment(2.0 * p)?.sqrt().max(1.0);
    let mut nodes = (max_order / 2 + 2).max(32);
    let mut prev = hermite_normalized_coeffs(p, max_order, nodes)?;
    loop {
        let next_nodes = nodes * 2;
        let cur = hermite_normalized_coeffs(p, max_order, next_nodes)?;
        let gap = prev
            .iter()
            .zip(&cur)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap <= tol * scale {
            let coefficients = cur
                .iter()
                .enumerate()
                .map(|(k, c)| c * (0.5 * ln_gamma(k as f64 + 1.0)).exp())
                .collect();
            return Ok(HermiteExpansion {
                p,
                max_order,
                coefficients,
                normalized: cur,
                nodes_used: next_nodes,
            });
        }
        if next_nodes >= 256 {
            return Err(AmbitError::Quadrature {
                estimate: cur[2],
                error: gap,
                context: format!("Hermite coefficients unstable between {nodes} and {next_nodes} nodes"),
            });
        }
        nodes = next_nodes;
        prev = cur;
    }
}

/// Matrix of `k! E[H_k(X) H_m(X)]` for `k, m <= kmax` by Gauss–Hermite quadrature.
pub fn hermite_orthogonality(kmax: usize) -> DMatrix<f64> {
    let rule = gauss_hermite_rule(kmax + 8);
    let mut out = DMatrix::zeros(kmax + 1, kmax + 1);
    for k in 0..=kmax {
        for m in 0..=kmax {
            let kf = ln_gamma(k as f64 + 1.0).exp();
            out[(k, m)] = kf
                * rule.apply(|x| hermite_poly(k as i64, x).unwrap() * hermite_poly(m as i64, x).unwrap());
        }
    }
    out
}

/// Covariance probe for a standard bivariate Gaussian pair.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CovarianceProbe {
    pub cov: f64,
    /// `cov / |rho|^q`; zero when `rho = 0` and the covariance vanishes.
    pub bound_ratio: f64,
}

/// `Cov[|X1|^p, |X2|^p]` with `corr(X1, X2) = rho`.
///
/// Uses polar coordinates: with `sin(phi) = rho`,
/// `E|X1|^p |X2|^p = 2^p Gamma(p+1) / (2 pi) * int_0^{2pi} |cos t|^p |sin(t + phi)|^p dt`.
pub fn power_cov_probe(rho: f64, p: f64, q: f64) -> Result<CovarianceProbe> {
    if !(rho.abs() <= 1.0) {
        return Err(AmbitError::domain(format!("correlation must lie in [-1,1], got {rho}")));
    }
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    if !(0.0..=2.0).contains(&q) {
        return Err(AmbitError::domain(format!("exponent q must lie in [0,2], got {q}")));
    }
    let mp = abs_moment(p)?;
    let phi = rho.asin();
    let two_pi = 2.0 * PI;
    let mut zeros = vec![0.5 * PI, 1.5 * PI];
    for j in 0..4 {
        let z = j as f64 * PI - phi;
        if z > 0.0 && z < two_pi {
            zeros.push(z);
        }
    }
    let cfg = QuadratureConfig { rel_tol: 1e-14, abs_tol: 1e-16, ..Default::default() };
    let angular = integrate(
        |th| (th.cos().abs() * (th + phi).sin().abs()).powf(p),
        0.0,
        two_pi,
        &zeros,
        &zeros,
        &cfg,
    )?;
    let moment = 2f64.powf(p) * gamma(p + 1.0) / two_pi * angular.value;
    let cov = moment - mp * mp;
    let bound_ratio = if rho == 0.0 {
        if q == 0.0 {
            cov
        } else if cov.abs() < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        cov / rho.abs().powf(q)
    };
    Ok(CovarianceProbe { cov, bound_ratio })
}

/// Monte Carlo estimate of `E[(sum_i u_p(X_i))^4]` against the polynomial bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FourthMomentProbe {
    pub estimate: f64,
    pub std_error: f64,
    /// `n^4 rho^4 + n^3 rho^2 + n^2`.
    pub bound_value: f64,
    pub rho: f64,
    pub dim: usize,
}

impl FourthMomentProbe {
    pub fn ratio(&self) -> f64 {
        self.estimate / self.bound_value
    }
}

pub fn fourth_moment_probe(c: &DMatrix<f64>, p: f64, reps: usize, seed: u64) -> Result<FourthMomentProbe> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    if reps < 1000 {
        return Err(AmbitError::precondition(format!("fourth moment probe needs at least 1000 replications, got {reps}")));
    }
    let n = c.nrows();
    if n == 0 || c.ncols() != n {
        return Err(AmbitError::precondition("covariance must be a non-empty square matrix"));
    }
    let mut rho: f64 = 0.0;
    for i in 0..n {
        if (c[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(AmbitError::precondition(format!("diagonal entry {i} is {} (unit diagonal required)", c[(i, i)])));
        }
        for j in 0..n {
            if (c[(i, j)] - c[(j, i)]).abs() > 1e-12 {
                return Err(AmbitError::precondition("covariance is not symmetric"));
            }
            if i != j {
                rho = rho.max(c[(i, j)].abs());
            }
        }
    }
    if rho >= 1.0 / 12.0 {
        return Err(AmbitError::precondition(format!(
            "largest correlation {rho} violates the hypothesis rho < 1/12"
        )));
    }
    let sampler = GaussianSampler::new(c)?;
    let mp = abs_moment(p)?;
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, StreamKind::FourthMoment, r as u64);
            let x = sampler.sample(&mut rng);
            let s: f64 = x.iter().map(|v| abs_pow(*v, p) - mp).sum();
            s.powi(4)
        })
        .collect();
    let mean = crate::quad::pairwise_sum(&values) / reps as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0);
    let nf = n as f64;
    Ok(FourthMomentProbe {
        estimate: mean,
        std_error: (var / reps as f64).sqrt(),
        bound_value: nf.powi(4) * rho.powi(4) + nf.powi(3) * rho.powi(2) + nf * nf,
        rho,
        dim: n,
    })
}

/// Equicorrelated covariance with unit diagonal.
pub fn equicorrelated(n: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho })
}

/// `|x|^p` with exact fast paths for `p = 1, 2`.
#[inline]
pub fn abs_pow(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 1.0 {
        x.abs()
    } else {
        x.abs().powf(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_examples() {
        assert_eq!(hermite_poly(0, 3.7).unwrap(), 1.0);
        assert_eq!(hermite_poly(1, 0.5).unwrap(), 0.5);
        assert!((hermite_poly(2, 2.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(hermite_poly(-1, 0.0).is_err());
    }

    #[test]
    fn moment_domain() {
        assert!(abs_moment(0.0).is_err());
        assert!(abs_moment(-1.0).is_err());
        assert!((abs_moment(2.0).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hermite_rule_moments() {
        let rule = gauss_hermite_rule(20);
        let exact = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0];
        for (k, e) in exact.iter().enumerate() {
            let m = rule.apply(|x| x.powi(k as i32));
            assert!((m - e).abs() < 1e-11, "k={k}: {m}");
        }
    }

    #[test]
    fn laguerre_rule_moments() {
        let a = 0.25;
        let rule = gauss_laguerre_rule(16, a);
        for k in 0..6 {
            let exact = gamma(a + 1.0 + k as f64);
            let got = rule.apply(|y| y.powi(k));
            assert!((got - exact).abs() < 1e-11 * exact, "k={k}");
        }
    }

    #[test]
    fn p2_expansion() {
        let e = up_hermite_coeffs(2.0, 6).unwrap();
        assert!((e.coefficients[2] - 2.0).abs() < 1e-12);
        assert!((e.parseval_total() - 2.0).abs() < 1e-12);
    }
}
