//! Volatility fields on `[-1,1]^2` and their integrated powers.
//!
//! A [`SigmaGrid`] caches cell-midpoint values on an `M x M` grid of cells of
//! side `2/M`. Scaling by a constant is stored separately and applied last, so
//! homogeneity identities hold bit-for-bit.

use std::f64::consts::PI;
use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AmbitError, Result};
use crate::gauss::abs_pow;
use crate::rng::{substream, StreamKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolatilityModel {
    Constant { sigma0: f64 },
    /// Closed-form field selected by name from [`DETERMINISTIC_CATALOG`].
    Deterministic { name: String },
    LogGaussian {
        resolution: usize,
        smoothing_length: f64,
        #[serde(default)]
        mean: f64,
        variance: f64,
    },
}

/// Names accepted by `Deterministic`.
pub const DETERMINISTIC_CATALOG: &[&str] = &["sin", "linear", "bump"];

fn deterministic_eval(name: &str, u: f64, v: f64) -> Option<f64> {
    match name {
        "sin" => Some(1.0 + 0.5 * (2.0 * PI * u).sin() * (2.0 * PI * v).sin()),
        "linear" => Some(1.5 + 0.25 * (u + v)),
        "bump" => Some(1.0 + 0.5 * (-((u - 0.5).powi(2) + (v - 0.5).powi(2)) / 0.1).exp()),
        _ => None,
    }
}

/// Per-axis Lipschitz constant of a catalog field.
fn deterministic_lipschitz(name: &str) -> f64 {
    match name {
        "sin" => PI,
        "linear" => 0.25,
        // max |d/du| of 0.5 exp(-r^2/0.1) is 0.5 * sqrt(2/0.1) * exp(-1/2)
        "bump" => 0.5 * (2.0f64 / 0.1).sqrt() * (-0.5f64).exp(),
        _ => f64::INFINITY,
    }
}

impl VolatilityModel {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            VolatilityModel::Constant { sigma0 } => {
                if !(*sigma0 > 0.0) || !sigma0.is_finite() {
                    v.push(format!("constant volatility must be > 0, got {sigma0}"));
                }
            }
            VolatilityModel::Deterministic { name } => {
                if !DETERMINISTIC_CATALOG.contains(&name.as_str()) {
                    v.push(format!("unknown deterministic volatility {name:?}; known: {}", DETERMINISTIC_CATALOG.join(", ")));
                }
            }
            VolatilityModel::LogGaussian { resolution, smoothing_length, mean, variance } => {
                if *resolution < 2 {
                    v.push("log-Gaussian resolution must be >= 2".into());
                }
                if !(*smoothing_length > 0.0) {
                    v.push(format!("smoothing length must be > 0, got {smoothing_length}"));
                }
                if !(*variance > 0.0) {
                    v.push(format!("log-Gaussian variance must be > 0, got {variance}"));
                }
                if !mean.is_finite() {
                    v.push("log-Gaussian mean must be finite".into());
                }
            }
        }
        v
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            VolatilityModel::Constant { sigma0 } => Some(*sigma0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SigmaSource {
    Constant(f64),
    Deterministic(String),
    Sampled,
}

/// Realized volatility on `[-1,1]^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SigmaGrid {
    pub resolution: usize,
    values: Vec<f64>,
    pub source: SigmaSource,
    pub scale: f64,
    /// Declared bound on the difference of adjacent cell values (unscaled).
    pub modulus: f64,
}

impl SigmaGrid {
    pub fn cell_size(&self) -> f64 {
        2.0 / self.resolution as f64
    }

    pub fn midpoint(&self, a: usize) -> f64 {
        -1.0 + (a as f64 + 0.5) * self.cell_size()
    }

    /// Unscaled cell value.
    pub fn raw(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.resolution + b]
    }

    pub fn cell(&self, a: usize, b: usize) -> f64 {
        self.scale * self.raw(a, b)
    }

    pub fn raw_values(&self) -> &[f64] {
        &self.values
    }

    /// `c * sigma` sharing the cached values.
    pub fn scaled(&self, c: f64) -> Self {
        Self { scale: self.scale * c, ..self.clone() }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match self.source {
            SigmaSource::Constant(c) => Some(self.scale * c),
            _ => None,
        }
    }

    /// Unscaled value at a point: exact for closed-form sources, bilinear otherwise.
    pub fn raw_at(&self, u: f64, v: f64) -> f64 {
        match &self.source {
            SigmaSource::Constant(c) => *c,
            SigmaSource::Deterministic(name) => deterministic_eval(name, u, v).expect("validated name"),
            SigmaSource::Sampled => {
                let m = self.resolution;
                let h = self.cell_size();
                let x = ((u + 1.0) / h - 0.5).clamp(0.0, (m - 1) as f64);
                let y = ((v + 1.0) / h - 0.5).clamp(0.0, (m - 1) as f64);
                let i = (x.floor() as usize).min(m.saturating_sub(2));
                let j = (y.floor() as usize).min(m.saturating_sub(2));
                let (a, b) = (x - i as f64, y - j as f64);
                (1.0 - a) * (1.0 - b) * self.raw(i, j)
                    + a * (1.0 - b) * self.raw(i + 1, j)
                    + (1.0 - a) * b * self.raw(i, j + 1)
                    + a * b * self.raw(i + 1, j + 1)
            }
        }
    }

    pub fn at(&self, u: f64, v: f64) -> f64 {
        self.scale * self.raw_at(u, v)
    }

    /// Largest absolute difference between horizontally or vertically adjacent cells.
    pub fn max_adjacent_difference(&self) -> f64 {
        let m = self.resolution;
        let mut d: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                if a + 1 < m {
                    d = d.max((self.raw(a + 1, b) - self.raw(a, b)).abs());
                }
                if b + 1 < m {
                    d = d.max((self.raw(a, b + 1) - self.raw(a, b)).abs());
                }
            }
        }
        d
    }

    pub fn check_continuity(&self) -> Result<()> {
        let d = self.max_adjacent_difference();
        if d <= self.modulus * (1.0 + 1e-9) {
            Ok(())
        } else {
            Err(AmbitError::precondition(format!(
                "volatility grid jumps by {d:e} between adjacent cells, above the declared modulus {:e}",
                self.modulus
            )))
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["u", "v", "sigma"]).map_err(|e| AmbitError::Io(e.to_string()))?;
        for a in 0..self.resolution {
            for b in 0..self.resolution {
                wtr.write_record(&[
                    format!("{}", self.midpoint(a)),
                    format!("{}", self.midpoint(b)),
                    format!("{:e}", self.cell(a, b)),
                ])
                .map_err(|e| AmbitError::Io(e.to_string()))?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Realize a volatility model on an `M x M` grid over `[-1,1]^2`.
pub fn sample_volatility(model: &VolatilityModel, resolution: usize, seed: u64) -> Result<SigmaGrid> {
    if resolution < 2 {
        return Err(AmbitError::domain(format!("grid resolution must be >= 2, got {resolution}")));
    }
    let v = model.violations();
    if !v.is_empty() {
        return Err(AmbitError::domain(v.join("; ")));
    }
    let m = resolution;
    let h = 2.0 / m as f64;
    let mid = |a: usize| -1.0 + (a as f64 + 0.5) * h;
    let grid = match model {
        VolatilityModel::Constant { sigma0 } => SigmaGrid {
            resolution: m,
            values: vec![*sigma0; m * m],
            source: SigmaSource::Constant(*sigma0),
            scale: 1.0,
            modulus: 0.0,
        },
        VolatilityModel::Deterministic { name } => {
            let mut values = Vec::with_capacity(m * m);
            for a in 0..m {
                for b in 0..m {
                    values.push(deterministic_eval(name, mid(a), mid(b)).expect("validated name"));
                }
            }
            SigmaGrid {
                resolution: m,
                values,
                source: SigmaSource::Deterministic(name.clone()),
                scale: 1.0,
                modulus: deterministic_lipschitz(name) * h,
            }
        }
        VolatilityModel::LogGaussian { smoothing_length, mean, variance, .. } => {
            log_gaussian(m, *smoothing_length, *mean, *variance, seed)
        }
    };
    if grid.values.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
        return Err(AmbitError::NonFinite("volatility must be finite and strictly positive".into()));
    }
    grid.check_continuity()?;
    Ok(grid)
}

fn log_gaussian(m: usize, length: f64, mean: f64, variance: f64, seed: u64) -> SigmaGrid {
    let h = 2.0 / m as f64;
    let radius = (length / h).ceil().max(1.0) as usize;
    let span = 2 * radius + 1;
    // Compact bump (1 - r^2/L^2)^2, normalized so the smoothed field has unit variance.
    let mut bump = vec![0.0; span * span];
    for i in 0..span {
        for j in 0..span {
            let x = (i as f64 - radius as f64) * h;
            let y = (j as f64 - radius as f64) * h;
            let r2 = (x * x + y * y) / (length * length);
            bump[i * span + j] = if r2 < 1.0 { (1.0 - r2).powi(2) } else { 0.0 };
        }
    }
    let norm = bump.iter().map(|b| b * b).sum::<f64>().sqrt();
    bump.iter_mut().for_each(|b| *b /= norm);

    let padded = m + 2 * radius;
    let mut rng = substream(seed, StreamKind::Volatility, 0);
    let noise: Vec<f64> = (0..padded * padded).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sd = variance.sqrt();
    let mut values = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            let mut acc = 0.0;
            for i in 0..span {
                for j in 0..span {
                    acc += bump[i * span + j] * noise[(a + i) * padded + (b + j)];
                }
            }
            values[a * m + b] = (mean + sd * acc).exp();
        }
    }
    // Adjacent differences of the smoothed Gaussian have standard deviation
    // sd * |bump - shifted bump|; allow eight of those at the largest value.
    let mut diff2 = 0.0;
    for i in 0..=span {
        for j in 0..span {
            let cur = if i < span { bump[i * span + j] } else { 0.0 };
            let prev = if i > 0 { bump[(i - 1) * span + j] } else { 0.0 };
            diff2 += (cur - prev).powi(2);
        }
    }
    let step = 8.0 * sd * diff2.sqrt();
    let vmax = values.iter().copied().fold(0.0, f64::max);
    SigmaGrid {
        resolution: m,
        values,
        source: SigmaSource::Sampled,
        scale: 1.0,
        modulus: vmax * (1.0 - (-step).exp()),
    }
}

/// Result of [`integrated_power`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerIntegral {
    pub value: f64,
    /// Set when the rectangle has zero area.
    pub degenerate: bool,
}

/// `int_rect sigma^p`, with `rect = (a, b, c, d)` meaning `[a,b] x [c,d]` inside `[-1,1]^2`.
pub fn integrated_power(sigma: &SigmaGrid, p: f64, rect: (f64, f64, f64, f64)) -> Result<PowerIntegral> {
    let (a, b, c, d) = rect;
    if !(p > 0.0) || !p.is_finite() {
        return Err(AmbitError::domain(format!("power must be > 0, got {p}")));
    }
    let tol = 1e-12;
    if a < -1.0 - tol || b > 1.0 + tol || c < -1.0 - tol || d > 1.0 + tol || b < a || d < c {
        return Err(AmbitError::domain(format!("rectangle [{a},{b}]x[{c},{d}] outside [-1,1]^2")));
    }
    if b == a || d == c {
        return Ok(PowerIntegral { value: 0.0, degenerate: true });
    }
    let raw = match &sigma.source {
        SigmaSource::Constant(s0) => abs_pow(*s0, p) * (b - a) * (d - c),
        SigmaSource::Deterministic(name) => {
            let f = |u: f64, v: f64| abs_pow(deterministic_eval(name, u, v).expect("validated"), p);
            refine_midpoint(f, rect, sigma.resolution)?
        }
        SigmaSource::Sampled => cell_overlap(sigma, p, rect),
    };
    Ok(PowerIntegral { value: abs_pow(sigma.scale, p) * raw, degenerate: false })
}

fn midpoint_rule<F: Fn(f64, f64) -> f64>(f: &F, rect: (f64, f64, f64, f64), k: usize) -> f64 {
    let (a, b, c, d) = rect;
    let hu = (b - a) / k as f64;
    let hv = (d - c) / k as f64;
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let u = a + (i as f64 + 0.5) * hu;
        let row: f64 = (0..k).map(|j| f(u, c + (j as f64 + 0.5) * hv)).sum();
        rows.push(row);
    }
    crate::quad::pairwise_sum(&rows) * hu * hv
}

/// Midpoint rule, doubling until successive values agree to 1e-6 relative.
pub(crate) fn refine_midpoint<F: Fn(f64, f64) -> f64>(f: F, rect: (f64, f64, f64, f64), resolution: usize) -> Result<f64> {
    let width = (rect.1 - rect.0).max(rect.3 - rect.2);
    let mut k = ((width / (2.0 / resolution as f64)).ceil() as usize).max(8);
    let mut prev = midpoint_rule(&f, rect, k);
    for _ in 0..8 {
        k *= 2;
        let cur = midpoint_rule(&f, rect, k);
        if (cur - prev).abs() <= 1e-6 * cur.abs().max(1e-300) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(AmbitError::Quadrature {
        estimate: prev,
        error: f64::NAN,
        context: "midpoint refinement did not stabilize".into(),
    })
}

fn cell_overlap(sigma: &SigmaGrid, p: f64, rect: (f64, f64, f64, f64)) -> f64 {
    let (a, b, c, d) = rect;
    let m = sigma.resolution;
    let h = sigma.cell_size();
    let idx = |x: f64| (((x + 1.0) / h).floor().max(0.0) as usize).min(m - 1);
    let (ia, ib, jc, jd) = (idx(a), idx(b), idx(c), idx(d));
    let mut rows = Vec::new();
    for i in ia..=ib {
        let lo = (-1.0 + i as f64 * h).max(a);
        let hi = (-1.0 + (i + 1) as f64 * h).min(b);
        if hi <= lo {
            continue;
        }
        let mut row = 0.0;
        for j in jc..=jd {
            let lo2 = (-1.0 + j as f64 * h).max(c);
            let hi2 = (-1.0 + (j + 1) as f64 * h).min(d);
            if hi2 > lo2 {
                row += abs_pow(sigma.raw(i, j), p) * (hi2 - lo2);
            }
        }
        rows.push(row * (hi - lo));
    }
    crate::quad::pairwise_sum(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid() {
        let g = sample_volatility(&VolatilityModel::Constant { sigma0: 1.0 }, 8, 0).unwrap();
        assert!(g.raw_values().iter().all(|v| *v == 1.0));
        let r = integrated_power(&g, 3.0, (0.0, 0.5, 0.0, 0.25)).unwrap();
        assert!((r.value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn sin_model_point() {
        let g = sample_volatility(&VolatilityModel::Deterministic { name: "sin".into() }, 8, 0).unwrap();
        assert!((g.at(0.25, 0.25) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_rectangle() {
        let g = sample_volatility(&VolatilityModel::Constant { sigma0: 2.0 }, 8, 0).unwrap();
        let r = integrated_power(&g, 2.0, (0.3, 0.3, 0.0, 1.0)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn unknown_name_rejected() {
        assert!(sample_volatility(&VolatilityModel::Deterministic { name: "nope".into() }, 8, 0).is_err());
    }
}
