//! Limit functionals of the law of large numbers and the central limit
//! theorem, and the Monte Carlo harnesses that compare finite-n statistics
//! against them.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{admissible_kappa, Thinning};
use crate::error::{AmbitError, Result};
use crate::gauss::{abs_moment, abs_pow, up_hermite_coeffs, DEFAULT_HERMITE_ORDER};
use crate::kernels::{compute_cn, WeightShape, WeightSpec};
use crate::quad::QuadratureConfig;
use crate::rng::{substream, StreamKind};
use crate::simulate::{increment_covariance, increments, GaussianSampler, LatticeSimulator, DEFAULT_COVARIANCE_CAP};
use crate::variation::{expected_from_ratios, local_variance_ratios, thinned_count, PowerVariationField};
use crate::volatility::{integrated_power, refine_midpoint, sample_volatility, SigmaGrid, VolatilityModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub weight: f64,
    pub point: (f64, f64),
}

/// Weak limit of the concentration measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PiSpec {
    DiracMixture { atoms: Vec<Atom> },
    DiracAt { z0: (f64, f64) },
}

impl PiSpec {
    pub fn atoms(&self) -> Vec<(f64, (f64, f64))> {
        match self {
            PiSpec::DiracMixture { atoms } => atoms.iter().map(|a| (a.weight, a.point)).collect(),
            PiSpec::DiracAt { z0 } => vec![(1.0, *z0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let atoms = self.atoms();
        if atoms.is_empty() {
            return Err(AmbitError::domain("pi needs at least one atom"));
        }
        if atoms.iter().any(|(w, z)| !(*w > 0.0) || !z.0.is_finite() || !z.1.is_finite()) {
            return Err(AmbitError::domain("pi weights must be positive and atoms finite"));
        }
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(AmbitError::domain(format!("pi weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// The limit measure associated with a kernel family.
    pub fn for_spec(spec: &WeightSpec) -> Result<PiSpec> {
        match spec.shape {
            WeightShape::Uniform { s1, s2, t1, t2 } => Ok(PiSpec::DiracMixture {
                atoms: [(s1, t1), (s1, t2), (s2, t1), (s2, t2)]
                    .iter()
                    .map(|&point| Atom { weight: 0.25, point })
                    .collect(),
            }),
            WeightShape::Singular { .. } | WeightShape::Triangle { .. } => {
                Ok(PiSpec::DiracAt { z0: spec.singular_point().expect("singular kernels have a point") })
            }
            WeightShape::GridSampled { .. } => {
                Err(AmbitError::Unsupported("no limit measure is known for grid-sampled kernels; give pi explicitly".into()))
            }
        }
    }
}

fn shifted_rect(z: (f64, f64), s: f64, t: f64) -> (f64, f64, f64, f64) {
    (-z.0, s - z.0, -z.1, t - z.1)
}

fn check_shifted(z: (f64, f64), s: f64, t: f64) -> Result<()> {
    let (a, b, c, d) = shifted_rect(z, s, t);
    let tol = 1e-12;
    if a < -1.0 - tol || b > 1.0 + tol || c < -1.0 - tol || d > 1.0 + tol {
        return Err(AmbitError::domain(format!(
            "shifted domain [{a},{b}]x[{c},{d}] escapes the volatility grid on [-1,1]^2"
        )));
    }
    Ok(())
}

fn check_point(s: f64, t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
        return Err(AmbitError::domain(format!("(s,t) = ({s},{t}) outside [0,1]^2")));
    }
    Ok(())
}

/// `int_0^s int_0^t (int sigma^2(u - xi, v - tau) pi(d xi, d tau))^{p/2} du dv`.
pub fn sigma_functional(sigma: &SigmaGrid, p: f64, pi: &PiSpec, s: f64, t: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    check_point(s, t)?;
    pi.validate()?;
    let atoms = pi.atoms();
    for (_, z) in &atoms {
        check_shifted(*z, s, t)?;
    }
    if s == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    if let Some(s0) = sigma.constant_value() {
        return Ok(abs_pow(s0, p) * s * t);
    }
    if atoms.len() == 1 {
        return Ok(integrated_power(sigma, p, shifted_rect(atoms[0].1, s, t))?.value);
    }
    if p == 2.0 {
        let mut acc = 0.0;
        for (w, z) in &atoms {
            acc += w * integrated_power(sigma, 2.0, shifted_rect(*z, s, t))?.value;
        }
        return Ok(acc);
    }
    let f = |u: f64, v: f64| {
        let m: f64 = atoms
            .iter()
            .map(|(w, z)| {
                let x = sigma.at(u - z.0, v - z.1);
                w * x * x
            })
            .sum();
        m.powf(p / 2.0)
    };
    refine_midpoint(f, (0.0, s, 0.0, t), sigma.resolution)
}

/// `(m_{2p} - m_p^2) int_{-s0}^{s-s0} int_{-t0}^{t-t0} sigma^{2p}`.
pub fn clt_variance(sigma: &SigmaGrid, p: f64, z0: (f64, f64), s: f64, t: f64) -> Result<f64> {
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power p must be > 0, got {p}")));
    }
    check_point(s, t)?;
    check_shifted(z0, s, t)?;
    let mp = abs_moment(p)?;
    let v = abs_moment(2.0 * p)? - mp * mp;
    Ok(v * integrated_power(sigma, 2.0 * p, shifted_rect(z0, s, t))?.value)
}

/// Refuse inadmissible thinning unless overridden; returns a note when overridden.
pub fn check_admissibility(spec: &WeightSpec, thinning: &Thinning, override_flag: bool) -> Result<Option<String>> {
    let Thinning::Kappa(kappa) = thinning else {
        return Ok(None);
    };
    let range = admissible_kappa(spec)?;
    if range.contains(*kappa) {
        return Ok(None);
    }
    let msg = format!("kappa = {kappa} outside the admissible range {} ({})", range.describe(), range.note);
    if override_flag {
        Ok(Some(format!("{msg}; run as an observational probe")))
    } else {
        Err(AmbitError::precondition(msg))
    }
}

/// Median and quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn quantiles(values: &[f64]) -> Quantiles {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |f: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let x = f * (v.len() - 1) as f64;
        let lo = x.floor() as usize;
        let hi = x.ceil() as usize;
        v[lo] + (x - lo as f64) * (v[hi] - v[lo])
    };
    Quantiles { q1: q(0.25), median: q(0.5), q3: q(0.75) }
}

/// Sample moments of one statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleMoments {
    pub mean: f64,
    pub variance: f64,
    /// Standard error of the sample variance from the fourth central moment.
    pub variance_se: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Kolmogorov distance to the normal law with the sample mean and variance.
    pub ks_distance: f64,
}

pub fn sample_moments(xs: &[f64]) -> Option<SampleMoments> {
    let r = xs.len();
    if r < 2 {
        return None;
    }
    let rf = r as f64;
    let mean = xs.iter().sum::<f64>() / rf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= rf;
    m3 /= rf;
    m4 /= rf;
    let variance = m2 * rf / (rf - 1.0);
    let sd = variance.sqrt();
    let ks_distance = if sd > 0.0 {
        let normal = Normal::new(mean, sd).expect("positive sd");
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = normal.cdf(*x);
                (f - i as f64 / rf).max((i + 1) as f64 / rf - f)
            })
            .fold(0.0, f64::max)
    } else {
        1.0
    };
    Some(SampleMoments {
        mean,
        variance,
        variance_se: ((m4 - m2 * m2).max(0.0) / rf).sqrt(),
        skewness: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
        excess_kurtosis: if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 },
        ks_distance,
    })
}

/// Per `(p, n)` results of the LLN harness.
#[derive(Debug, Clone, Serialize)]
pub struct LlnEntry {
    pub p: f64,
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    pub c_n: f64,
    pub noise_resolution: usize,
    /// `sup_grid |scaled V - m_p Sigma|` over replications.
    pub sup_error: Quantiles,
    /// `sup_grid |E_W scaled V - m_p Sigma|`, when the exact expectation was computed.
    pub mean_error: Option<f64>,
    /// `sup_grid |scaled V - E_W scaled V|` over replications.
    pub stochastic_error: Option<Quantiles>,
    /// Closed-form bias at the grid point where the mean error is attained (constant volatility).
    pub bias_closed_form: Option<f64>,
    pub v11_mean: f64,
    pub v11_std_error: f64,
    /// Exact `E_W V_(1,1)` (unscaled), when available.
    pub v11_expected: Option<f64>,
}

/// Per-point results of the CLT harness.
#[derive(Debug, Clone, Serialize)]
pub struct CltPoint {
    pub s: f64,
    pub t: f64,
    pub terms: usize,
    pub moments: Option<SampleMoments>,
    /// Exact finite-n variance of the statistic.
    pub exact_variance: f64,
    pub asymptotic_variance: f64,
    /// Envelope `2 eps^2 sum (C_aa/c_n)^2 (1 + dim rho_bar^2)` (p = 2).
    pub envelope: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CltEntry {
    pub p: f64,
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    pub c_n: f64,
    pub dim: usize,
    pub rho_bar: Option<f64>,
    pub points: Vec<CltPoint>,
    pub median_abs_skewness: f64,
    pub median_abs_excess_kurtosis: f64,
    pub median_ks_distance: f64,
    pub envelope_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Lln,
    Clt,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub kind: ExperimentKind,
    pub n_schedule: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub runtime_seconds: f64,
    pub flags: Vec<String>,
    pub lln: Vec<LlnEntry>,
    pub clt: Vec<CltEntry>,
}

/// Default evaluation grid `{0.2, 0.4, ..., 1}^2`.
pub fn default_eval_grid() -> Vec<(f64, f64)> {
    let v = [0.2, 0.4, 0.6, 0.8, 1.0];
    v.iter().flat_map(|&s| v.iter().map(move |&t| (s, t))).collect()
}

/// Largest thinned lattice for which the LLN harness computes exact expectations
/// with non-constant volatility.
pub const EXACT_MEAN_CAP: usize = 1024;

#[derive(Debug, Clone)]
pub struct LlnConfig {
    pub spec: WeightSpec,
    pub volatility: VolatilityModel,
    pub pi: Option<PiSpec>,
    pub p: Vec<f64>,
    pub n_schedule: Vec<usize>,
    pub thinning: Thinning,
    pub replications: usize,
    pub seed: u64,
    pub eval_grid: Vec<(f64, f64)>,
    /// Noise resolution `M = noise_factor * 2n`.
    pub noise_factor: usize,
    pub quad: QuadratureConfig,
    pub override_admissibility: bool,
}

impl LlnConfig {
    pub fn new(spec: WeightSpec, volatility: VolatilityModel, n_schedule: Vec<usize>) -> Self {
        Self {
            spec,
            volatility,
            pi: None,
            p: vec![2.0],
            n_schedule,
            thinning: Thinning::Fixed(1),
            replications: 100,
            seed: 0,
            eval_grid: default_eval_grid(),
            noise_factor: 1,
            quad: QuadratureConfig::default(),
            override_admissibility: false,
        }
    }
}

/// Volatility realized once per experiment on the volatility stream.
pub fn experiment_sigma(model: &VolatilityModel, resolution: usize, seed: u64) -> Result<SigmaGrid> {
    let m = match model {
        VolatilityModel::LogGaussian { resolution: r, .. } => resolution.max(*r),
        _ => resolution,
    };
    sample_volatility(model, m, seed)
}

pub fn lln_experiment(cfg: &LlnConfig) -> Result<MonteCarloReport> {
    let started = Instant::now();
    let mut flags = Vec::new();
    if let Some(note) = check_admissibility(&cfg.spec, &cfg.thinning, cfg.override_admissibility)? {
        flags.push(note);
    }
    if cfg.replications == 0 || cfg.n_schedule.is_empty() || cfg.p.is_empty() || cfg.noise_factor == 0 {
        return Err(AmbitError::domain("need replications >= 1, a non-empty n schedule, p list and noise factor >= 1"));
    }
    let mut report = MonteCarloReport {
        kind: ExperimentKind::Lln,
        n_schedule: cfg.n_schedule.clone(),
        replications: cfg.replications,
        seed: cfg.seed,
        runtime_seconds: 0.0,
        flags,
        lln: vec![],
        clt: vec![],
    };
    if cfg.eval_grid.is_empty() {
        report.flags.push("empty evaluation grid: nothing to compare".into());
        return Ok(report);
    }
    for &(s, t) in &cfg.eval_grid {
        check_point(s, t)?;
    }
    let pi = match &cfg.pi {
        Some(p) => p.clone(),
        None => PiSpec::for_spec(&cfg.spec)?,
    };
    let max_m = cfg.n_schedule.iter().map(|n| cfg.noise_factor * 2 * n).max().expect("non-empty");
    let sigma = experiment_sigma(&cfg.volatility, max_m, cfg.seed)?;

    let mut targets = Vec::new();
    for &p in &cfg.p {
        let mp = abs_moment(p)?;
        let row: Result<Vec<f64>> =
            cfg.eval_grid.iter().map(|&(s, t)| Ok(mp * sigma_functional(&sigma, p, &pi, s, t)?)).collect();
        targets.push(row?);
    }

    for (n_idx, &n) in cfg.n_schedule.iter().enumerate() {
        let (k, eps) = cfg.thinning.resolve(n)?;
        let c_n = compute_cn(&cfg.spec, n, &cfg.quad)?;
        let m = cfg.noise_factor * 2 * n;
        let sim = LatticeSimulator::new(&cfg.spec, m)?;
        let size = n / k;

        // Exact conditional expectations of the scaled field on the grid.
        let ratios: Option<Vec<f64>> = if let Some(s0) = sigma.constant_value() {
            Some(vec![s0 * s0; size * size])
        } else if size * size <= EXACT_MEAN_CAP {
            Some(local_variance_ratios(&cfg.spec, &sigma, n, k, c_n, &cfg.quad)?)
        } else {
            report.flags.push(format!("n = {n}: exact expectation skipped ({size}x{size} lattice above cap)"));
            None
        };

        let per_rep: Vec<Result<Vec<(Vec<f64>, f64)>>> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let field = sim.simulate(&sigma, n, cfg.seed, ((n_idx as u64) << 20) + r as u64)?;
                let inc = increments(&field, k)?;
                cfg.p
                    .iter()
                    .map(|&p| {
                        let v = PowerVariationField::new(&inc, p)?.with_cn(c_n);
                        let f = v.scaling_factor()?;
                        let vals = cfg.eval_grid.iter().map(|&(s, t)| f * v.at(s, t)).collect();
                        Ok((vals, v.at(1.0, 1.0)))
                    })
                    .collect()
            })
            .collect();
        let per_rep: Vec<Vec<(Vec<f64>, f64)>> = per_rep.into_iter().collect::<Result<_>>()?;

        for (pi_idx, &p) in cfg.p.iter().enumerate() {
            let target = &targets[pi_idx];
            let expected: Option<Vec<f64>> = match &ratios {
                Some(r) => Some(
                    cfg.eval_grid
                        .iter()
                        .map(|&(s, t)| expected_from_ratios(r, n, k, p, s, t))
                        .collect::<Result<_>>()?,
                ),
                None => None,
            };
            let sup_err: Vec<f64> = per_rep
                .iter()
                .map(|rep| sup_abs_diff(&rep[pi_idx].0, target))
                .collect();
            let stochastic = expected.as_ref().map(|e| {
                let v: Vec<f64> = per_rep.iter().map(|rep| sup_abs_diff(&rep[pi_idx].0, e)).collect();
                quantiles(&v)
            });
            let (mean_error, argmax) = match &expected {
                Some(e) => {
                    let (i, d) = e
                        .iter()
                        .zip(target)
                        .map(|(a, b)| (a - b).abs())
                        .enumerate()
                        .fold((0, 0.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
                    (Some(d), Some(i))
                }
                None => (None, None),
            };
            let bias_closed_form = match (sigma.constant_value(), argmax) {
                (Some(s0), Some(i)) => {
                    let (s, t) = cfg.eval_grid[i];
                    Some(crate::variation::bias_term(s0, p, eps, s, t)?)
                }
                _ => None,
            };
            let v11: Vec<f64> = per_rep.iter().map(|rep| rep[pi_idx].1).collect();
            let v11_mean = v11.iter().sum::<f64>() / v11.len() as f64;
            let v11_var = if v11.len() > 1 {
                v11.iter().map(|x| (x - v11_mean).powi(2)).sum::<f64>() / (v11.len() - 1) as f64
            } else {
                f64::NAN
            };
            let v11_expected = match &ratios {
                Some(r) => Some(expected_from_ratios(r, n, k, p, 1.0, 1.0)? * c_n.powf(p / 2.0) / (eps * eps)),
                None => None,
            };
            report.lln.push(LlnEntry {
                p,
                n,
                k,
                eps,
                c_n,
                noise_resolution: m,
                sup_error: quantiles(&sup_err),
                mean_error,
                stochastic_error: stochastic,
                bias_closed_form,
                v11_mean,
                v11_std_error: (v11_var / v11.len() as f64).sqrt(),
                v11_expected,
            });
        }
    }
    if cfg.replications < 2 {
        report.flags.push("replications = 1: standard errors undefined".into());
    }
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

fn sup_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CltConfig {
    pub spec: WeightSpec,
    pub volatility: VolatilityModel,
    pub p: Vec<f64>,
    pub n_schedule: Vec<usize>,
    pub thinning: Thinning,
    pub replications: usize,
    pub seed: u64,
    pub eval_grid: Vec<(f64, f64)>,
    /// Resolution of the volatility grid used by the quadrature.
    pub sigma_resolution: usize,
    pub quad: QuadratureConfig,
    pub cap: usize,
    pub hermite_order: usize,
    pub override_admissibility: bool,
}

impl CltConfig {
    pub fn new(spec: WeightSpec, volatility: VolatilityModel, n_schedule: Vec<usize>, kappa: f64) -> Self {
        Self {
            spec,
            volatility,
            p: vec![2.0],
            n_schedule,
            thinning: Thinning::Kappa(kappa),
            replications: 2000,
            seed: 0,
            eval_grid: default_eval_grid(),
            sigma_resolution: 256,
            quad: QuadratureConfig::default(),
            cap: DEFAULT_COVARIANCE_CAP,
            hermite_order: DEFAULT_HERMITE_ORDER,
            override_admissibility: false,
        }
    }
}

pub fn clt_experiment(cfg: &CltConfig) -> Result<MonteCarloReport> {
    let started = Instant::now();
    let mut flags = Vec::new();
    if matches!(cfg.spec.shape, WeightShape::Uniform { .. }) {
        return Err(AmbitError::precondition(
            "the uniform kernel splits pi_n over four corners; the concentration assumption of the CLT cannot hold",
        ));
    }
    if let Some(note) = check_admissibility(&cfg.spec, &cfg.thinning, cfg.override_admissibility)? {
        flags.push(note);
    }
    if cfg.replications == 0 || cfg.n_schedule.is_empty() || cfg.p.is_empty() {
        return Err(AmbitError::domain("need replications >= 1, a non-empty n schedule and p list"));
    }
    if cfg.replications < 2 {
        flags.push("replications = 1: variance undefined".into());
    }
    for &(s, t) in &cfg.eval_grid {
        check_point(s, t)?;
    }
    let z0 = cfg
        .spec
        .singular_point()
        .ok_or_else(|| AmbitError::Unsupported("the CLT harness needs a kernel with a concentration point".into()))?;
    let sigma = experiment_sigma(&cfg.volatility, cfg.sigma_resolution, cfg.seed)?;
    let mut expansions = Vec::new();
    for &p in &cfg.p {
        expansions.push(if p == 2.0 { None } else { Some(up_hermite_coeffs(p, cfg.hermite_order)?) });
    }
    let mut report = MonteCarloReport {
        kind: ExperimentKind::Clt,
        n_schedule: cfg.n_schedule.clone(),
        replications: cfg.replications,
        seed: cfg.seed,
        runtime_seconds: 0.0,
        flags,
        lln: vec![],
        clt: vec![],
    };

    for (n_idx, &n) in cfg.n_schedule.iter().enumerate() {
        let (k, eps) = cfg.thinning.resolve(n)?;
        let c_n = compute_cn(&cfg.spec, n, &cfg.quad)?;
        let cov = increment_covariance(&cfg.spec, &sigma, n, k, &cfg.quad, cfg.cap)?;
        let dim = cov.dim();
        let size = n / k;
        let sampler = GaussianSampler::new(&cov.matrix)?;
        let draws: Vec<Vec<f64>> = (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let mut rng = substream(cfg.seed, StreamKind::ExactIncrements, ((n_idx as u64) << 20) + r as u64);
                sampler.sample(&mut rng).iter().copied().collect()
            })
            .collect();
        let rho_bar = if dim >= 2 { Some(crate::simulate::rho_bar(&cov)?) } else { None };

        for (p_idx, &p) in cfg.p.iter().enumerate() {
            let mp = abs_moment(p)?;
            let var_up = abs_moment(2.0 * p)? - mp * mp;
            let norm = eps / c_n.powf(p / 2.0);
            let mut points = Vec::new();
            let mut envelope_ok = true;
            for &(s, t) in &cfg.eval_grid {
                let (ci, cj) = (thinned_count(n, k, s), thinned_count(n, k, t));
                if ci == 0 || cj == 0 {
                    continue;
                }
                let idx: Vec<usize> = (0..ci).flat_map(|i| (0..cj).map(move |j| i * size + j)).collect();
                let centre: f64 = idx.iter().map(|&a| mp * abs_pow(cov.matrix[(a, a)], p / 2.0)).sum();
                let z: Vec<f64> = draws
                    .iter()
                    .map(|x| norm * (idx.iter().map(|&a| abs_pow(x[a], p)).sum::<f64>() - centre))
                    .collect();
                let mut exact = 0.0;
                for &a in &idx {
                    for &b in &idx {
                        let cab = cov.matrix[(a, b)];
                        exact += match &expansions[p_idx] {
                            None => 2.0 * cab * cab,
                            Some(h) => {
                                let (caa, cbb) = (cov.matrix[(a, a)], cov.matrix[(b, b)]);
                                let scale = (caa * cbb).powf(p / 2.0);
                                if a == b {
                                    scale * var_up
                                } else {
                                    scale * h.covariance_series(cab / (caa * cbb).sqrt())
                                }
                            }
                        };
                    }
                }
                exact *= norm * norm;
                let envelope = if p == 2.0 {
                    let rb = rho_bar.unwrap_or(0.0);
                    let diag: f64 = idx.iter().map(|&a| (cov.matrix[(a, a)] / c_n).powi(2)).sum();
                    let env = 2.0 * eps * eps * diag * (1.0 + idx.len() as f64 * rb * rb);
                    if exact > env * (1.0 + 1e-9) {
                        envelope_ok = false;
                    }
                    Some(env)
                } else {
                    None
                };
                points.push(CltPoint {
                    s,
                    t,
                    terms: idx.len(),
                    moments: sample_moments(&z),
                    exact_variance: exact,
                    asymptotic_variance: clt_variance(&sigma, p, z0, s, t)?,
                    envelope,
                });
            }
            if !envelope_ok {
                report.flags.push(format!("n = {n}, p = {p}: exact variance exceeds the correlation envelope"));
            }
            let med = |f: &dyn Fn(&SampleMoments) -> f64| {
                let v: Vec<f64> = points.iter().filter_map(|pt| pt.moments.as_ref().map(f)).collect();
                quantiles(&v).median
            };
            report.clt.push(CltEntry {
                p,
                n,
                k,
                eps,
                c_n,
                dim,
                rho_bar,
                median_abs_skewness: med(&|m| m.skewness.abs()),
                median_abs_excess_kurtosis: med(&|m| m.excess_kurtosis.abs()),
                median_ks_distance: med(&|m| m.ks_distance),
                points,
                envelope_ok,
            });
        }
    }
    report.runtime_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> SigmaGrid {
        sample_volatility(&VolatilityModel::Constant { sigma0: 1.0 }, 8, 0).unwrap()
    }

    #[test]
    fn clt_variance_examples() {
        let s = unit();
        assert!((clt_variance(&s, 2.0, (0.0, 0.0), 1.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        let v = clt_variance(&s, 1.0, (0.0, 0.0), 1.0, 1.0).unwrap();
        assert!((v - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-12);
        assert_eq!(clt_variance(&s, 2.0, (0.5, 0.0), 0.0, 0.7).unwrap(), 0.0);
        assert!((clt_variance(&s, 2.0, (0.5, 0.0), 0.5, 0.7).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn sigma_functional_constant() {
        let s = sample_volatility(&VolatilityModel::Constant { sigma0: 2.0 }, 8, 0).unwrap();
        let pi = PiSpec::for_spec(&WeightSpec::uniform(0.2, 0.7, 0.1, 0.9)).unwrap();
        let v = sigma_functional(&s, 3.0, &pi, 0.5, 0.4).unwrap();
        assert!((v - 8.0 * 0.2).abs() < 1e-12);
        assert_eq!(sigma_functional(&s, 3.0, &pi, 0.0, 0.4).unwrap(), 0.0);
    }

    #[test]
    fn moments_of_known_sample() {
        let m = sample_moments(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((m.mean - 2.5).abs() < 1e-15);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(m.skewness.abs() < 1e-15);
        assert!(sample_moments(&[1.0]).is_none());
    }

    #[test]
    fn quartiles() {
        let q = quantiles(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((q.q1, q.median, q.q3), (2.0, 3.0, 4.0));
    }
}
