//! Region catalogs for the singular and triangular kernels, power-law slope
//! fits, admissible thinning exponents and the two concentration assumptions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmbitError, Result};
use crate::kernels::{compute_cn, kernel_mass, ConcentrationReport, WeightShape, WeightSpec, UNIFORM_CN_NOTE};
use crate::limits::PiSpec;
use crate::quad::QuadratureConfig;
use crate::region::Region;
use crate::simulate::{increment_covariance, rho_bar};
use crate::volatility::{sample_volatility, VolatilityModel};

/// How the thinning step `k_n` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thinning {
    Fixed(usize),
    Kappa(f64),
}

impl Thinning {
    /// `(k_n, eps_n = k_n / n)`.
    pub fn resolve(&self, n: usize) -> Result<(usize, f64)> {
        match *self {
            Thinning::Fixed(k) => {
                if k == 0 || k > n {
                    return Err(AmbitError::domain(format!("thinning k = {k} must lie in 1..={n}")));
                }
                Ok((k, k as f64 / n as f64))
            }
            Thinning::Kappa(kappa) => kappa_thinning(n, kappa),
        }
    }
}

/// `k_n = ceil(n^{1-kappa})` and the realized `eps_n = k_n / n`.
pub fn kappa_thinning(n: usize, kappa: f64) -> Result<(usize, f64)> {
    if n == 0 {
        return Err(AmbitError::domain("n must be >= 1"));
    }
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(AmbitError::domain(format!("kappa must lie in (0, 1], got {kappa}")));
    }
    let k = ((n as f64).powf(1.0 - kappa) - 1e-9).ceil().max(1.0) as usize;
    let k = k.min(n);
    Ok((k, k as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogKind {
    Singular,
    Triangle,
}

/// Named regions for one `(spec, n, kappa)`.
#[derive(Debug, Clone, Serialize)]
pub struct RegionCatalog {
    pub kind: CatalogKind,
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    /// The concentration neighbourhood `E_n`.
    pub concentration: Region,
    pub regions: Vec<(String, Region)>,
    /// Labels forming a partition of the mass-carrying set (after `multiplicity`).
    pub partition: Vec<String>,
    /// Symmetry factor applied to the partition masses.
    pub multiplicity: f64,
}

impl RegionCatalog {
    pub fn build(spec: &WeightSpec, n: usize, kappa: f64) -> Result<Self> {
        let (k, eps) = kappa_thinning(n, kappa)?;
        let d = 1.0 / n as f64;
        match spec.shape {
            WeightShape::Singular { .. } => {
                let regions = vec![
                    ("E_tilde".to_string(), Region::polygon(vec![(0.0, 0.0), (d, 0.0), (d, d)])),
                    ("T".to_string(), Region::polygon(vec![(0.0, 0.0), (1.0 + d, 0.0), (1.0 + d, 1.0 + d)])),
                    ("E_cap_T".to_string(), Region::polygon(vec![(0.0, 0.0), (eps, 0.0), (eps, eps)])),
                    ("B1".to_string(), Region::rect(eps, 1.0, 0.0, d)),
                    ("B2".to_string(), Region::polygon(vec![(eps, eps - d), (1.0, 1.0 - d), (1.0, 1.0), (eps, eps)])),
                    (
                        "B3".to_string(),
                        Region::polygon(vec![(eps, d), (1.0 + d, d), (1.0 + d, 1.0), (eps, eps - d)]),
                    ),
                    (
                        "B4".to_string(),
                        Region::union(vec![
                            Region::rect(1.0, 1.0 + d, 0.0, d),
                            Region::polygon(vec![(1.0, 1.0 - d), (1.0 + d, 1.0), (1.0 + d, 1.0 + d), (1.0, 1.0)]),
                        ]),
                    ),
                ];
                Ok(Self {
                    kind: CatalogKind::Singular,
                    n,
                    k,
                    eps,
                    concentration: Region::rect(0.0, eps, 0.0, eps),
                    regions,
                    partition: ["E_cap_T", "B1", "B2", "B3", "B4"].iter().map(|s| s.to_string()).collect(),
                    multiplicity: 2.0,
                })
            }
            WeightShape::Triangle { .. } => {
                if k < 4 {
                    return Err(AmbitError::precondition(format!(
                        "triangle catalog needs k_n >= 4, got k_n = {k} at n = {n}"
                    )));
                }
                let lo = eps / 2.0;
                let left = |t: f64| 0.5 * (1.0 - t);
                let right = |t: f64| 0.5 * (1.0 + t);
                let band = |edge: &dyn Fn(f64) -> f64, a: f64, b: f64| {
                    Region::polygon(vec![(edge(lo) + a, lo), (edge(lo) + b, lo), (edge(1.0) + b, 1.0), (edge(1.0) + a, 1.0)])
                };
                let b1 = Region::union(vec![band(&left, 0.0, d / 2.0), band(&right, d / 2.0, d)]);
                let b2 = Region::union(vec![band(&left, d / 2.0, d), band(&right, 0.0, d / 2.0)]);
                let b3 = Region::union(vec![band(&left, d, 1.5 * d), band(&right, -d / 2.0, 0.0)]);
                let e = Region::rect(0.5 - eps / 2.0, 0.5 + eps / 2.0, 0.0, eps / 2.0);
                let regions = vec![
                    ("E_tilde".to_string(), Region::polygon(vec![(0.5, 0.0), (0.5 - d / 2.0, d), (0.5 + d / 2.0, d)])),
                    ("E".to_string(), e.clone()),
                    ("B1".to_string(), b1),
                    ("B2".to_string(), b2),
                    ("B3".to_string(), b3),
                    ("B4".to_string(), Region::rect(0.0, 1.0 + d, 1.0, 1.0 + d)),
                ];
                Ok(Self {
                    kind: CatalogKind::Triangle,
                    n,
                    k,
                    eps,
                    concentration: e,
                    regions,
                    partition: ["E", "B1", "B2", "B3", "B4"].iter().map(|s| s.to_string()).collect(),
                    multiplicity: 1.0,
                })
            }
            _ => Err(AmbitError::Unsupported(format!(
                "region catalogs exist for singular and triangle kernels, not {}",
                spec.kind_name()
            ))),
        }
    }

    pub fn region(&self, label: &str) -> Option<&Region> {
        self.regions.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }
}

/// `mu_n` of every catalog region; failures are kept per region.
#[derive(Debug, Clone, Serialize)]
pub struct RegionMeasures {
    pub n: usize,
    pub c_n: f64,
    pub values: BTreeMap<String, f64>,
    pub failures: BTreeMap<String, String>,
    /// `multiplicity * sum of partition masses`.
    pub partition_total: f64,
}

impl RegionMeasures {
    pub fn get(&self, label: &str) -> Result<f64> {
        if let Some(v) = self.values.get(label) {
            return Ok(*v);
        }
        match self.failures.get(label) {
            Some(e) => Err(AmbitError::Quadrature { estimate: f64::NAN, error: f64::NAN, context: e.clone() }),
            None => Err(AmbitError::domain(format!("unknown region {label:?}"))),
        }
    }
}

pub fn region_measures(spec: &WeightSpec, catalog: &RegionCatalog, quad: &QuadratureConfig) -> Result<RegionMeasures> {
    let n = catalog.n;
    let c_n = compute_cn(spec, n, quad)?;
    let results: Vec<(String, Result<f64>)> = catalog
        .regions
        .par_iter()
        .map(|(label, region)| (label.clone(), kernel_mass(spec, n, region, quad)))
        .collect();
    let mut values = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (label, r) in results {
        match r {
            Ok(v) => {
                values.insert(label, v);
            }
            Err(e) => {
                failures.insert(label, e.to_string());
            }
        }
    }
    let partition_total =
        catalog.multiplicity * catalog.partition.iter().filter_map(|l| values.get(l)).sum::<f64>();
    Ok(RegionMeasures { n, c_n, values, failures, partition_total })
}

/// Least-squares fit of `log value = intercept + exponent * log n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_min: f64,
    pub n_max: f64,
    pub points: usize,
}

pub fn slope_fit(values: &[(f64, f64)]) -> Result<SlopeFit> {
    if values.len() < 4 {
        return Err(AmbitError::domain(format!("slope fit needs at least 4 points, got {}", values.len())));
    }
    if let Some((n, v)) = values.iter().find(|(n, v)| !(*n > 0.0) || !(*v > 0.0) || !v.is_finite()) {
        return Err(AmbitError::domain(format!("slope fit needs positive values, got {v} at n = {n}")));
    }
    let n_min = values.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let n_max = values.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if n_max / n_min < 4.0 - 1e-12 {
        return Err(AmbitError::domain(format!("slope fit needs n spanning two octaves, got {n_min}..{n_max}")));
    }
    let xs: Vec<f64> = values.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|p| p.1.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok(SlopeFit { exponent, intercept, r_squared, n_min, n_max, points: values.len() })
}

/// Admissible thinning exponents `(0, upper)` or `(0, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaRange {
    pub upper: f64,
    pub upper_inclusive: bool,
    pub empty: bool,
    pub note: String,
}

impl KappaRange {
    pub fn contains(&self, kappa: f64) -> bool {
        !self.empty && kappa > 0.0 && (kappa < self.upper || (self.upper_inclusive && kappa == self.upper))
    }

    pub fn describe(&self) -> String {
        if self.empty {
            "empty".into()
        } else if self.upper_inclusive {
            format!("(0, {}]", fmt_bound(self.upper))
        } else {
            format!("(0, {})", fmt_bound(self.upper))
        }
    }
}

fn fmt_bound(x: f64) -> String {
    let r = (x * 1e4).round() / 1e4;
    format!("{r}")
}

pub fn admissible_kappa(spec: &WeightSpec) -> Result<KappaRange> {
    match &spec.shape {
        WeightShape::Singular { alpha, ell } => {
            let a = *alpha;
            if a < 0.5 {
                if ell.flat_at_one {
                    Ok(KappaRange {
                        upper: 1.0 / (2.0 * a + 1.0),
                        upper_inclusive: false,
                        empty: false,
                        note: "singular kernel, alpha < 1/2 with l'(1-) = 0".into(),
                    })
                } else {
                    Ok(KappaRange {
                        upper: a,
                        upper_inclusive: true,
                        empty: false,
                        note: "singular kernel, alpha < 1/2: 0 < kappa <= alpha".into(),
                    })
                }
            } else {
                Ok(KappaRange {
                    upper: (2.0 * a + 1.0) / (2.0 * a + 3.0),
                    upper_inclusive: false,
                    empty: false,
                    note: "singular kernel, alpha >= 1/2: 0 < kappa < (2 alpha + 1)/(2 alpha + 3)".into(),
                })
            }
        }
        WeightShape::Triangle { alpha, .. } => Ok(KappaRange {
            upper: (2.0 * alpha - 1.0) / (2.0 * alpha + 1.0),
            upper_inclusive: false,
            empty: false,
            note: "triangle kernel: 0 < kappa < (2 alpha - 1)/(2 alpha + 1)".into(),
        }),
        WeightShape::Uniform { .. } => Ok(KappaRange {
            upper: 0.0,
            upper_inclusive: false,
            empty: true,
            note: "uniform kernel: pi_n splits over four corners, so the concentration assumption of the CLT cannot hold".into(),
        }),
        WeightShape::GridSampled { .. } => Err(AmbitError::Unsupported(
            "no admissible range is known for grid-sampled kernels; probe assumption2_ratio empirically".into(),
        )),
    }
}

/// `pi_n(R^2 \ E_n) / eps_n^2`.
pub fn assumption2_ratio(spec: &WeightSpec, n: usize, kappa: f64, quad: &QuadratureConfig) -> Result<f64> {
    let catalog = RegionCatalog::build(spec, n, kappa)?;
    let c_n = compute_cn(spec, n, quad)?;
    let outside = kernel_mass(spec, n, &Region::complement(catalog.concentration.clone()), quad)?;
    Ok(outside / c_n / (catalog.eps * catalog.eps))
}

pub const ASSUMPTION1_RADII: [f64; 3] = [0.2, 0.1, 0.05];

/// `pi_n` mass outside the union of `r`-balls around the atoms of `pi`.
#[derive(Debug, Clone, Serialize)]
pub struct Assumption1Probe {
    pub radii: Vec<f64>,
    pub n: Vec<usize>,
    /// `masses[r][i]` for radius `radii[r]` and `n[i]`.
    pub masses: Vec<Vec<f64>>,
}

impl Assumption1Probe {
    /// True when every radius sequence ends below its start and below `tol`.
    pub fn vanishing(&self, tol: f64) -> bool {
        self.masses.iter().all(|m| m.last().copied().unwrap_or(1.0) <= tol.max(0.0) || m.last() < m.first())
    }
}

pub fn assumption1_probe(
    spec: &WeightSpec,
    n_schedule: &[usize],
    pi: &PiSpec,
    quad: &QuadratureConfig,
) -> Result<Assumption1Probe> {
    pi.validate()?;
    let atoms = pi.atoms();
    let mut masses = Vec::new();
    for &r in &ASSUMPTION1_RADII {
        let balls = Region::union(atoms.iter().map(|(_, z)| Region::disk(*z, r)).collect());
        let outside = Region::complement(balls);
        let row: Result<Vec<f64>> = n_schedule
            .par_iter()
            .map(|&n| {
                let c = compute_cn(spec, n, quad)?;
                Ok((kernel_mass(spec, n, &outside, quad)? / c).clamp(0.0, 1.0))
            })
            .collect();
        masses.push(row?);
    }
    Ok(Assumption1Probe { radii: ASSUMPTION1_RADII.to_vec(), n: n_schedule.to_vec(), masses })
}

/// Smallest `n >= 4` with `k_n >= 2` and `l` nonvanishing on `(0, 1/n)`.
pub fn n0(spec: &WeightSpec, kappa: f64) -> Result<usize> {
    let ell = spec
        .slow_function()
        .ok_or_else(|| AmbitError::Unsupported(format!("n0 is defined for singular and triangle kernels, not {}", spec.kind_name())))?;
    for n in 4..=1usize << 24 {
        let (k, _) = kappa_thinning(n, kappa)?;
        if k < 2 {
            continue;
        }
        let d = 1.0 / n as f64;
        let ok = (1..1000).all(|i| ell.eval(i as f64 * d / 1000.0).abs() > 0.0);
        if ok {
            return Ok(n);
        }
    }
    Err(AmbitError::NonFinite("n0 not found below 2^24".into()))
}

/// `rho_bar_n` for constant unit volatility and `eps_n = k_n / n`.
pub fn correlation_estimate(spec: &WeightSpec, n: usize, kappa: f64, quad: &QuadratureConfig) -> Result<(f64, f64)> {
    let (k, eps) = kappa_thinning(n, kappa)?;
    let sigma = sample_volatility(&VolatilityModel::Constant { sigma0: 1.0 }, 2, 0)?;
    let cov = increment_covariance(spec, &sigma, n, k, quad, n / k)?;
    Ok((rho_bar(&cov)?, eps))
}

/// `c_n`, catalog `pi_n` masses, the assumption-2 ratio and optionally `rho_bar`.
pub fn concentration_report(
    spec: &WeightSpec,
    n: usize,
    kappa: Option<f64>,
    with_rho_bar: bool,
    quad: &QuadratureConfig,
) -> Result<ConcentrationReport> {
    let c_n = compute_cn(spec, n, quad)?;
    let mut report = ConcentrationReport {
        n,
        c_n,
        eps_n: 1.0 / n as f64,
        region_masses: BTreeMap::new(),
        assumption2_ratio: None,
        rho_bar: None,
        note: None,
    };
    if let WeightShape::Uniform { s1, s2, t1, t2 } = spec.shape {
        let d = 1.0 / n as f64;
        for (label, (s, t)) in [("corner_s1_t1", (s1, t1)), ("corner_s1_t2", (s1, t2)), ("corner_s2_t1", (s2, t1)), ("corner_s2_t2", (s2, t2))] {
            let sq = Region::rect(s, s + d, t, t + d);
            report.region_masses.insert(label.into(), kernel_mass(spec, n, &sq, quad)? / c_n);
        }
        report.note = Some(UNIFORM_CN_NOTE.into());
        return Ok(report);
    }
    if let Some(kappa) = kappa {
        if matches!(spec.shape, WeightShape::Singular { .. } | WeightShape::Triangle { .. }) {
            let catalog = RegionCatalog::build(spec, n, kappa)?;
            let m = region_measures(spec, &catalog, quad)?;
            for (label, v) in &m.values {
                report.region_masses.insert(label.clone(), v / c_n);
            }
            report.eps_n = catalog.eps;
            report.assumption2_ratio = Some(assumption2_ratio(spec, n, kappa, quad)?);
            if with_rho_bar {
                report.rho_bar = Some(correlation_estimate(spec, n, kappa, quad)?.0);
            }
        }
    }
    Ok(report)
}
