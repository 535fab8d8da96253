//! Thinned power variations `V^(p)_(s,t)(k,n)`, their normalizations, exact
//! conditional expectations and the closed-form bias for constant volatility.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{AmbitError, Result};
use crate::gauss::{abs_moment, abs_pow};
use crate::kernels::{compute_cn, integrate_kernel_product, WeightSpec};
use crate::quad::QuadratureConfig;
use crate::simulate::IncrementField;
use crate::volatility::SigmaGrid;

/// `floor(x)` that treats values within `1e-9` relative of an integer as that integer.
pub fn snapped_floor(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

/// `{x} = x - floor(x)` with the same snapping.
pub fn frac(x: f64) -> f64 {
    x - snapped_floor(x)
}

/// Number of thinned indices below `s`: `floor(n s / k)`, clipped to the lattice.
pub fn thinned_count(n: usize, k: usize, s: f64) -> usize {
    let c = snapped_floor(n as f64 * s / k as f64).max(0.0) as usize;
    c.min(n / k)
}

/// Cumulative power variation on the thinned lattice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerVariationField {
    pub p: f64,
    pub k: usize,
    pub n: usize,
    pub size: usize,
    /// `(size+1)^2` table, entry `(I, J)` = sum over `i <= I, j <= J`.
    pub values: Vec<f64>,
    pub eps: f64,
    pub c_n: Option<f64>,
}

impl PowerVariationField {
    pub fn new(inc: &IncrementField, p: f64) -> Result<Self> {
        if !(p > 0.0) || !p.is_finite() {
            return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
        }
        let m = inc.size;
        let w = m + 1;
        let mut values = vec![0.0; w * w];
        for i in 1..=m {
            let mut row = 0.0;
            for j in 1..=m {
                row += abs_pow(inc.at(i, j), p);
                values[i * w + j] = values[(i - 1) * w + j] + row;
            }
        }
        Ok(Self { p, k: inc.k, n: inc.n, size: m, values, eps: inc.k as f64 / inc.n as f64, c_n: None })
    }

    pub fn with_cn(mut self, c_n: f64) -> Self {
        self.c_n = Some(c_n);
        self
    }

    /// Table entry at thinned counts `(I, J)`.
    pub fn cumulative(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.size + 1) + j]
    }

    /// `V_(s,t)` by the floor formula (right-continuous step field).
    pub fn at(&self, s: f64, t: f64) -> f64 {
        self.cumulative(thinned_count(self.n, self.k, s), thinned_count(self.n, self.k, t))
    }

    /// `eps^2 / c_n^{p/2}`.
    pub fn scaling_factor(&self) -> Result<f64> {
        let c = self
            .c_n
            .ok_or_else(|| AmbitError::precondition("c_n is required to scale the power variation"))?;
        Ok(self.eps * self.eps / c.powf(self.p / 2.0))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["s", "t", "value"]).map_err(|e| AmbitError::Io(e.to_string()))?;
        for i in 0..=self.size {
            for j in 0..=self.size {
                wtr.write_record(&[
                    format!("{}", i as f64 * self.eps),
                    format!("{}", j as f64 * self.eps),
                    format!("{:e}", self.cumulative(i, j)),
                ])
                .map_err(|e| AmbitError::Io(e.to_string()))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `sum_{i <= floor(ns/k)} sum_{j <= floor(nt/k)} |Y(R_(ki,kj))|^p`.
pub fn power_variation(inc: &IncrementField, p: f64, s: f64, t: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(AmbitError::domain(format!("(s,t) = ({s},{t}) outside [0,1]^2")));
    }
    let (ci, cj) = (thinned_count(inc.n, inc.k, s), thinned_count(inc.n, inc.k, t));
    let mut acc = 0.0;
    for i in 1..=ci {
        for j in 1..=cj {
            acc += abs_pow(inc.at(i, j), p);
        }
    }
    Ok(acc)
}

/// A field of values on the thinned lattice, indexed like [`PowerVariationField`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeValues {
    pub n: usize,
    pub k: usize,
    pub size: usize,
    pub values: Vec<f64>,
}

impl LatticeValues {
    pub fn at(&self, s: f64, t: f64) -> f64 {
        let (i, j) = (thinned_count(self.n, self.k, s), thinned_count(self.n, self.k, t));
        self.values[i * (self.size + 1) + j]
    }
}

/// `eps^2 / c_n^{p/2} * V` on the thinned lattice.
pub fn scaled_power_variation(v: &PowerVariationField) -> Result<LatticeValues> {
    let f = v.scaling_factor()?;
    Ok(LatticeValues { n: v.n, k: v.k, size: v.size, values: v.values.iter().map(|x| x * f).collect() })
}

/// `V_(s,t) / V_(1,1)`.
pub fn relative_power_variation(v: &PowerVariationField) -> Result<LatticeValues> {
    let total = v.cumulative(v.size, v.size);
    if !(total > 0.0) {
        return Err(AmbitError::NonFinite("V_(1,1) = 0: relative variation undefined".into()));
    }
    Ok(LatticeValues { n: v.n, k: v.k, size: v.size, values: v.values.iter().map(|x| x / total).collect() })
}

/// `int sigma^2(eps i - xi, eps j - tau) pi_n(d xi, d tau)` for every thinned index,
/// row-major over `1 <= i, j <= floor(n/k)`.
pub fn local_variance_ratios(
    spec: &WeightSpec,
    sigma: &SigmaGrid,
    n: usize,
    k: usize,
    c_n: f64,
    quad: &QuadratureConfig,
) -> Result<Vec<f64>> {
    let size = n / k;
    let eps = k as f64 / n as f64;
    let idx: Vec<(usize, usize)> = (1..=size).flat_map(|i| (1..=size).map(move |j| (i, j))).collect();
    idx.par_iter()
        .map(|&(i, j)| {
            let (x, y) = (i as f64 * eps, j as f64 * eps);
            let w = |zs: f64, zt: f64| {
                let v = sigma.at(x - zs, y - zt);
                v * v
            };
            let e = integrate_kernel_product(spec, n, &[(0.0, 0.0), (0.0, 0.0)], Some(&w), None, quad)?;
            Ok(e.value / c_n)
        })
        .collect()
}

/// Exact `E_W` of the scaled variation:
/// `eps^2 sum_{i,j} m_p (int sigma^2(eps i - xi, eps j - tau) d pi_n)^{p/2}`.
/// Constant volatility uses the closed form `m_p sigma0^p eps^2 floor(s/eps) floor(t/eps)`.
#[allow(clippy::too_many_arguments)]
pub fn expected_scaled_pv(
    spec: &WeightSpec,
    sigma: &SigmaGrid,
    n: usize,
    k: usize,
    p: f64,
    s: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    check_args(n, k, p, s, t)?;
    if let Some(s0) = sigma.constant_value() {
        let eps = k as f64 / n as f64;
        let ci = thinned_count(n, k, s) as f64;
        let cj = thinned_count(n, k, t) as f64;
        return Ok(abs_moment(p)? * abs_pow(s0, p) * eps * eps * ci * cj);
    }
    expected_scaled_pv_by_quadrature(spec, sigma, n, k, p, s, t, quad)
}

/// As [`expected_scaled_pv`] but always through the quadrature of `pi_n`.
#[allow(clippy::too_many_arguments)]
pub fn expected_scaled_pv_by_quadrature(
    spec: &WeightSpec,
    sigma: &SigmaGrid,
    n: usize,
    k: usize,
    p: f64,
    s: f64,
    t: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    check_args(n, k, p, s, t)?;
    let c_n = compute_cn(spec, n, quad)?;
    let ratios = local_variance_ratios(spec, sigma, n, k, c_n, quad)?;
    Ok(expected_from_ratios(&ratios, n, k, p, s, t)?)
}

/// Expected scaled variation from precomputed local variance ratios.
pub fn expected_from_ratios(ratios: &[f64], n: usize, k: usize, p: f64, s: f64, t: f64) -> Result<f64> {
    let size = n / k;
    let eps = k as f64 / n as f64;
    let mp = abs_moment(p)?;
    let (ci, cj) = (thinned_count(n, k, s), thinned_count(n, k, t));
    let mut acc = 0.0;
    for i in 1..=ci {
        for j in 1..=cj {
            acc += ratios[(i - 1) * size + (j - 1)].powf(p / 2.0);
        }
    }
    Ok(eps * eps * mp * acc)
}

fn check_args(n: usize, k: usize, p: f64, s: f64, t: f64) -> Result<()> {
    if n == 0 || k == 0 || k > n {
        return Err(AmbitError::domain(format!("need 1 <= k <= n, got n={n}, k={k}")));
    }
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(AmbitError::domain(format!("(s,t) = ({s},{t}) outside [0,1]^2")));
    }
    Ok(())
}

/// `-m_p sigma0^p eps ({s/eps} t + {t/eps} s - eps {s/eps}{t/eps})`.
pub fn bias_term(sigma0: f64, p: f64, eps: f64, s: f64, t: f64) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(AmbitError::domain(format!("sigma0 must be > 0, got {sigma0}")));
    }
    if !(eps > 0.0) {
        return Err(AmbitError::domain(format!("eps must be > 0, got {eps}")));
    }
    let (fs, ft) = (frac(s / eps), frac(t / eps));
    Ok(-abs_moment(p)? * abs_pow(sigma0, p) * eps * (fs * t + ft * s - eps * fs * ft))
}

/// [`bias_term`] for a realized grid; non-constant volatility is rejected.
pub fn bias_term_for(sigma: &SigmaGrid, p: f64, eps: f64, s: f64, t: f64) -> Result<f64> {
    let s0 = sigma
        .constant_value()
        .ok_or_else(|| AmbitError::Unsupported("the closed-form bias needs constant volatility".into()))?;
    bias_term(s0, p, eps, s, t)
}
