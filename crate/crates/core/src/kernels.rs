//! Weight functions `g`, the differenced kernel `h_n`, its normalization `c_n`
//! and the concentration masses of `pi_n(dz) = h_n(z)^2 / c_n dz`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AmbitError, Result};
use crate::quad::{integrate_2d, sort_dedup, Estimate, QuadratureConfig, Slice};
use crate::region::Region;

/// Slowly varying factor `l(s) = (1 - s)^exponent` on `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlowFunction {
    pub exponent: f64,
    /// Opt-in to the wider thinning range available when `l'(1-) = 0`.
    pub flat_at_one: bool,
}

impl Default for SlowFunction {
    fn default() -> Self {
        Self { exponent: 1.0, flat_at_one: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlowFlags {
    pub ell0_nonzero: bool,
    pub ell1_zero: bool,
    pub derivative_bound: f64,
    pub derivative_at_one: f64,
}

impl SlowFunction {
    pub fn eval(&self, s: f64) -> f64 {
        if self.exponent == 1.0 {
            1.0 - s
        } else {
            (1.0 - s).max(0.0).powf(self.exponent)
        }
    }

    /// Numerical check of the boundary behaviour on a dense grid.
    pub fn flags(&self) -> SlowFlags {
        let m = 20_000;
        let h = 1.0 / m as f64;
        let mut dmax: f64 = 0.0;
        for i in 0..m {
            let a = i as f64 * h;
            let d = (self.eval(a + h) - self.eval(a)) / h;
            dmax = dmax.max(d.abs());
        }
        let tiny = 1e-9;
        SlowFlags {
            ell0_nonzero: self.eval(tiny).abs() > 1e-6,
            ell1_zero: self.eval(1.0 - tiny).abs() < 1e-6,
            derivative_bound: dmax,
            derivative_at_one: (self.eval(1.0) - self.eval(1.0 - 1e-6)) / 1e-6,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.exponent >= 1.0) || !self.exponent.is_finite() {
            v.push(format!("slow function exponent must be >= 1 (bounded derivative), got {}", self.exponent));
            return v;
        }
        let f = self.flags();
        if !f.ell0_nonzero {
            v.push("slow function must not vanish at 0+".into());
        }
        if !f.ell1_zero {
            v.push("slow function must vanish at 1-".into());
        }
        if self.flat_at_one && f.derivative_at_one.abs() > 1e-3 {
            v.push(format!("flat_at_one set but l'(1-) = {:.3e}", f.derivative_at_one));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightShape {
    /// Indicator of `[s1, s2] x [t1, t2]`.
    Uniform { s1: f64, s2: f64, t1: f64, t2: f64 },
    /// `f(max(s, t))` on `(0,1)^2` with `f(x) = x^{-alpha} l(x)`.
    Singular {
        alpha: f64,
        #[serde(default)]
        ell: SlowFunction,
    },
    /// `f(t)` on the cone `(1-t)/2 < s < (1+t)/2, 0 < t < 1`.
    Triangle {
        alpha: f64,
        #[serde(default)]
        ell: SlowFunction,
    },
    /// Node values on an `M x M` grid `x_i = i/(M-1)`, bilinear inside cells.
    GridSampled {
        #[serde(default)]
        resolution: usize,
        #[serde(default)]
        values: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    #[serde(flatten)]
    pub shape: WeightShape,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl WeightSpec {
    pub fn uniform(s1: f64, s2: f64, t1: f64, t2: f64) -> Self {
        Self { shape: WeightShape::Uniform { s1, s2, t1, t2 }, scale: 1.0 }
    }

    pub fn singular(alpha: f64) -> Self {
        Self { shape: WeightShape::Singular { alpha, ell: SlowFunction::default() }, scale: 1.0 }
    }

    pub fn triangle(alpha: f64) -> Self {
        Self { shape: WeightShape::Triangle { alpha, ell: SlowFunction::default() }, scale: 1.0 }
    }

    pub fn grid(resolution: usize, values: Vec<f64>) -> Self {
        Self { shape: WeightShape::GridSampled { resolution, values, path: None }, scale: 1.0 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { shape: self.shape.clone(), scale: self.scale * c }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.shape {
            WeightShape::Uniform { .. } => "uniform",
            WeightShape::Singular { .. } => "singular",
            WeightShape::Triangle { .. } => "triangle",
            WeightShape::GridSampled { .. } => "grid_sampled",
        }
    }

    /// Read a grid kernel from CSV: header `resolution=M`, then `M` rows of `M` values
    /// (row `i` holds `s_i`, column `j` holds `t_j`).
    pub fn load_grid_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| AmbitError::Config("empty grid file".into()))?;
        let m: usize = header
            .trim()
            .strip_prefix("resolution=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| AmbitError::Config(format!("bad grid header {header:?}, expected resolution=M")))?;
        let body = lines.collect::<Vec<_>>().join("\n");
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
        let mut values = Vec::with_capacity(m * m);
        for rec in rdr.records() {
            let rec = rec.map_err(|e| AmbitError::Config(e.to_string()))?;
            for field in rec.iter() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| AmbitError::Config(format!("bad grid value {field:?}")))?;
                values.push(v);
            }
        }
        if values.len() != m * m {
            return Err(AmbitError::Config(format!("grid has {} values, expected {}", values.len(), m * m)));
        }
        Ok(Self::grid(m, values))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            v.push(format!("weight scale must be > 0, got {}", self.scale));
        }
        match &self.shape {
            WeightShape::Uniform { s1, s2, t1, t2 } => {
                let inside = |x: f64| (0.0..=1.0).contains(&x);
                if !(inside(*s1) && inside(*s2) && inside(*t1) && inside(*t2)) {
                    v.push("uniform rectangle must lie in [0,1]^2".into());
                }
                if !(s1 < s2 && t1 < t2) {
                    v.push("uniform rectangle needs s1 < s2 and t1 < t2".into());
                }
            }
            WeightShape::Singular { alpha, ell } => {
                if !(*alpha > 0.0 && *alpha < 1.0) {
                    v.push(format!("singular alpha must lie in (0,1), got {alpha}"));
                }
                v.extend(ell.violations());
            }
            WeightShape::Triangle { alpha, ell } => {
                if !(*alpha > 0.5 && *alpha < 1.0) {
                    v.push(format!("triangle alpha must lie in (1/2,1), got {alpha}"));
                }
                v.extend(ell.violations());
            }
            WeightShape::GridSampled { resolution, values, path } => {
                if path.is_some() && values.is_empty() {
                    v.push("grid kernel path not loaded".into());
                } else if *resolution < 2 || values.len() != resolution * resolution {
                    v.push(format!("grid kernel needs resolution >= 2 and resolution^2 values, got {} and {}", resolution, values.len()));
                } else if values.iter().any(|x| !x.is_finite()) {
                    v.push("grid kernel values must be finite".into());
                } else if values.iter().all(|x| *x == 0.0) {
                    v.push("grid kernel must not vanish identically".into());
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(AmbitError::domain(v.join("; ")))
        }
    }

    /// Pointwise weight function. Returns `+inf` exactly at the singular point.
    pub fn g(&self, s: f64, t: f64) -> f64 {
        self.scale * self.g_unit(s, t)
    }

    fn g_unit(&self, s: f64, t: f64) -> f64 {
        match &self.shape {
            WeightShape::Uniform { s1, s2, t1, t2 } => {
                if s >= *s1 && s <= *s2 && t >= *t1 && t <= *t2 {
                    1.0
                } else {
                    0.0
                }
            }
            WeightShape::Singular { alpha, ell } => {
                if s < 0.0 || t < 0.0 || s >= 1.0 || t >= 1.0 {
                    return 0.0;
                }
                let m = s.max(t);
                if m == 0.0 {
                    f64::INFINITY
                } else {
                    m.powf(-alpha) * ell.eval(m)
                }
            }
            WeightShape::Triangle { alpha, ell } => triangle_rel(*alpha, ell, s - 0.5, t),
            WeightShape::GridSampled { resolution, values, .. } => {
                if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
                    return 0.0;
                }
                let m = *resolution;
                let h = 1.0 / (m - 1) as f64;
                let fi = (s / h).min((m - 1) as f64);
                let fj = (t / h).min((m - 1) as f64);
                let i = (fi.floor() as usize).min(m - 2);
                let j = (fj.floor() as usize).min(m - 2);
                let (a, b) = (fi - i as f64, fj - j as f64);
                let at = |ii: usize, jj: usize| values[ii * m + jj];
                (1.0 - a) * (1.0 - b) * at(i, j)
                    + a * (1.0 - b) * at(i + 1, j)
                    + (1.0 - a) * b * at(i, j + 1)
                    + a * b * at(i + 1, j + 1)
            }
        }
    }

    /// `g` at `singular_point + (u, v)`, without forming the absolute point.
    pub fn g_rel(&self, u: f64, v: f64) -> f64 {
        match &self.shape {
            WeightShape::Triangle { alpha, ell } => self.scale * triangle_rel(*alpha, ell, u, v),
            _ => {
                let (zs, zt) = self.singular_point().unwrap_or((0.0, 0.0));
                self.g(zs + u, zt + v)
            }
        }
    }

    /// Kinks in `u` of `g_rel(., v)`.
    fn g_rel_s_breaks(&self, v: f64, out: &mut Vec<f64>) {
        match &self.shape {
            WeightShape::Triangle { .. } => {
                if v > 0.0 && v < 1.0 {
                    out.extend([-0.5 * v, 0.5 * v]);
                }
            }
            _ => {
                let (zs, zt) = self.singular_point().unwrap_or((0.0, 0.0));
                let mut abs = Vec::new();
                self.g_s_breaks(zt + v, &mut abs);
                out.extend(abs.into_iter().map(|b| b - zs));
            }
        }
    }

    /// `h_n(s,t) = g(s,t) - g(s-1/n,t) - g(s,t-1/n) + g(s-1/n,t-1/n)`.
    pub fn h(&self, n: usize, s: f64, t: f64) -> f64 {
        let d = 1.0 / n as f64;
        self.g(s, t) - self.g(s - d, t) - self.g(s, t - d) + self.g(s - d, t - d)
    }

    /// `h_n(s,t)` with the sum of the absolute values of its four terms.
    pub fn h_with_scale(&self, n: usize, s: f64, t: f64) -> (f64, f64) {
        let d = 1.0 / n as f64;
        let (a, b, c, e) = (self.g(s, t), self.g(s - d, t), self.g(s, t - d), self.g(s - d, t - d));
        (a - b - c + e, a.abs() + b.abs() + c.abs() + e.abs())
    }

    /// As [`WeightSpec::h`], but non-finite values are errors.
    pub fn h_checked(&self, n: usize, s: f64, t: f64) -> Result<f64> {
        if n == 0 {
            return Err(AmbitError::domain("n must be >= 1"));
        }
        let v = self.h(n, s, t);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AmbitError::NonFinite(format!("h_{n}({s}, {t}) touches the singular set")))
        }
    }

    /// Singular point of `g`, if any.
    pub fn singular_point(&self) -> Option<(f64, f64)> {
        match self.shape {
            WeightShape::Singular { .. } => Some((0.0, 0.0)),
            WeightShape::Triangle { .. } => Some((0.5, 0.0)),
            _ => None,
        }
    }

    /// True when `g(s, t) = g(t, s)` for all arguments.
    pub fn is_swap_symmetric(&self) -> bool {
        match &self.shape {
            WeightShape::Singular { .. } => true,
            WeightShape::Uniform { s1, s2, t1, t2 } => s1 == t1 && s2 == t2,
            WeightShape::Triangle { .. } => false,
            WeightShape::GridSampled { resolution, values, .. } => {
                let m = *resolution;
                (0..m).all(|i| (0..m).all(|j| values[i * m + j] == values[j * m + i]))
            }
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.shape {
            WeightShape::Singular { alpha, .. } | WeightShape::Triangle { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    pub fn slow_function(&self) -> Option<&SlowFunction> {
        match &self.shape {
            WeightShape::Singular { ell, .. } | WeightShape::Triangle { ell, .. } => Some(ell),
            _ => None,
        }
    }

    fn g_s_breaks(&self, t: f64, out: &mut Vec<f64>) {
        match &self.shape {
            WeightShape::Uniform { s1, s2, .. } => out.extend([*s1, *s2]),
            WeightShape::Singular { .. } => {
                out.extend([0.0, 1.0]);
                if t > 0.0 && t < 1.0 {
                    out.push(t);
                }
            }
            WeightShape::Triangle { .. } => {
                if t > 0.0 && t < 1.0 {
                    out.extend([0.5 * (1.0 - t), 0.5 * (1.0 + t)]);
                }
            }
            WeightShape::GridSampled { resolution, .. } => {
                let h = 1.0 / (*resolution - 1) as f64;
                out.extend((0..*resolution).map(|i| i as f64 * h));
            }
        }
    }

    /// Breakpoints in `s` of `h_n(., t)`.
    pub fn h_s_breaks(&self, n: usize, t: f64) -> Vec<f64> {
        let d = 1.0 / n as f64;
        let mut base = Vec::new();
        self.g_s_breaks(t, &mut base);
        self.g_s_breaks(t - d, &mut base);
        let mut out: Vec<f64> = base.iter().flat_map(|&b| [b, b + d]).collect();
        sort_dedup(&mut out);
        out
    }

    /// Heights where the `s`-structure of `h_n` changes.
    pub fn h_t_breaks(&self, n: usize) -> Vec<f64> {
        let d = 1.0 / n as f64;
        let mut out = match &self.shape {
            WeightShape::Uniform { t1, t2, .. } => vec![*t1, *t2, t1 + d, t2 + d],
            WeightShape::Singular { .. } => vec![0.0, d, 2.0 * d, 1.0 - d, 1.0, 1.0 + d],
            WeightShape::Triangle { .. } => vec![0.0, 0.5 * d, d, 1.5 * d, 2.0 * d, 1.0, 1.0 + d],
            WeightShape::GridSampled { resolution, .. } => {
                let h = 1.0 / (*resolution - 1) as f64;
                (0..*resolution).flat_map(|i| [i as f64 * h, i as f64 * h + d]).collect()
            }
        };
        sort_dedup(&mut out);
        out
    }

    fn h_s_singular(&self, n: usize) -> Vec<f64> {
        match self.shape {
            WeightShape::Singular { .. } => vec![0.0, 1.0 / n as f64],
            _ => vec![],
        }
    }

    fn h_t_singular(&self, n: usize) -> Vec<f64> {
        match self.shape {
            WeightShape::Singular { .. } | WeightShape::Triangle { .. } => vec![0.0, 1.0 / n as f64],
            _ => vec![],
        }
    }

    /// Essential support `A_g` and the ambit sets `A(s,t) = -A_g + (s,t)`.
    pub fn ambit_support(&self) -> AmbitSupport {
        let (base, exact) = match &self.shape {
            WeightShape::Uniform { s1, s2, t1, t2 } => (Region::rect(*s1, *s2, *t1, *t2), true),
            WeightShape::Singular { .. } => (Region::rect(0.0, 1.0, 0.0, 1.0), true),
            WeightShape::Triangle { .. } => (Region::polygon(vec![(0.5, 0.0), (1.0, 1.0), (0.0, 1.0)]), true),
            WeightShape::GridSampled { .. } => (Region::rect(0.0, 1.0, 0.0, 1.0), false),
        };
        AmbitSupport { base, exact }
    }
}

/// Support of `g` plus the map `(s,t) -> A(s,t)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmbitSupport {
    pub base: Region,
    /// False when `base` is only a bounding description.
    pub exact: bool,
}

impl AmbitSupport {
    pub fn at(&self, s: f64, t: f64) -> Region {
        self.base.reflect_translate(s, t)
    }
}

fn triangle_rel(alpha: f64, ell: &SlowFunction, u: f64, v: f64) -> f64 {
    if v == 0.0 && u == 0.0 {
        return f64::INFINITY;
    }
    if v <= 0.0 || v >= 1.0 || u.abs() >= 0.5 * v {
        return 0.0;
    }
    v.powf(-alpha) * ell.eval(v)
}

/// Weight applied to a kernel-product integrand.
pub type PointWeight<'a> = &'a (dyn Fn(f64, f64) -> f64 + Sync);

/// `int prod_i h_n(z + offset_i) * w(z) dz` over `region` (or the whole plane).
///
/// For kernels with a singular point and lattice offsets, the cells of side
/// `1/n` around each singular point of the product are integrated in
/// coordinates local to an exact lattice corner, so near-singular
/// differences like `s - 1/n` keep full relative precision.
pub fn integrate_kernel_product(
    spec: &WeightSpec,
    n: usize,
    offsets: &[(f64, f64)],
    weight: Option<PointWeight<'_>>,
    region: Option<&Region>,
    quad: &QuadratureConfig,
) -> Result<Estimate> {
    if n == 0 {
        return Err(AmbitError::domain("n must be >= 1"));
    }
    if offsets.is_empty() {
        return Err(AmbitError::domain("need at least one kernel factor"));
    }
    spec.validate()?;
    let d = 1.0 / n as f64;
    let top = 1.0 + d;

    let mut factors: Vec<((f64, f64), i32)> = Vec::new();
    for &o in offsets {
        match factors.iter_mut().find(|(u, _)| *u == o) {
            Some((_, m)) => *m += 1,
            None => factors.push((o, 1)),
        }
    }
    let s_lo = factors.iter().map(|f| -f.0 .0).fold(f64::NEG_INFINITY, f64::max);
    let s_hi = factors.iter().map(|f| top - f.0 .0).fold(f64::INFINITY, f64::min);
    let t_lo = factors.iter().map(|f| -f.0 .1).fold(f64::NEG_INFINITY, f64::max);
    let t_hi = factors.iter().map(|f| top - f.0 .1).fold(f64::INFINITY, f64::min);
    if !(s_hi > s_lo && t_hi > t_lo) {
        return Ok(Estimate { value: 0.0, error: 0.0, evaluations: 0 });
    }
    let support = Region::rect(s_lo, s_hi, t_lo, t_hi);

    let lattice = lattice_factors(&factors, n);
    let (Some(z), Some(lattice)) = (spec.singular_point(), lattice) else {
        return integrate_global(spec, n, &factors, weight, region, (t_lo, t_hi), true, quad);
    };

    let mut points = BTreeSet::new();
    let mut hot = BTreeSet::new();
    for &((p, q), _) in &lattice {
        for a in 0..2 {
            for b in 0..2 {
                let (hx, hy) = (a - p, b - q);
                points.insert((hx, hy));
                for cx in [hx - 1, hx] {
                    for cy in [hy - 1, hy] {
                        hot.insert((cx, cy));
                    }
                }
            }
        }
    }
    let nf = n as f64;
    let at = |m: i64| m as f64 / nf;
    let cells: Vec<Region> = hot
        .iter()
        .map(|&(cx, cy)| Region::rect(z.0 + at(cx), z.0 + at(cx + 1), z.1 + at(cy), z.1 + at(cy + 1)))
        .collect();
    let mut outside = vec![Region::complement(Region::union(cells))];
    if let Some(r) = region {
        outside.push(r.clone());
    }
    let rest = Region::intersection(outside);
    let mut total = integrate_global(spec, n, &factors, weight, Some(&rest), (t_lo, t_hi), false, quad)?;

    let half = 0.5 * d;
    for &(cx, cy) in &hot {
        for ox in 0..2i64 {
            for oy in 0..2i64 {
                let corner = (cx + ox, cy + oy);
                let origin = (z.0 + at(corner.0), z.1 + at(corner.1));
                let (s_a, s_b) = if ox == 0 { (0.0, half) } else { (-half, 0.0) };
                let (t_a, t_b) = if oy == 0 { (0.0, half) } else { (-half, 0.0) };
                let mut parts = vec![Region::rect(s_a, s_b, t_a, t_b), support.translate(-origin.0, -origin.1)];
                if let Some(r) = region {
                    parts.push(r.translate(-origin.0, -origin.1));
                }
                let local = Region::intersection(parts);
                let singular = points.contains(&corner);
                let e = integrate_local(spec, n, &lattice, corner, origin, singular, weight, &local, (t_a, t_b), quad)?;
                total.value += e.value;
                total.error += e.error;
                total.evaluations += e.evaluations;
            }
        }
    }
    Ok(total)
}

/// Offsets as integer multiples of `1/n`, if they all are.
fn lattice_factors(factors: &[((f64, f64), i32)], n: usize) -> Option<Vec<((i64, i64), i32)>> {
    let nf = n as f64;
    factors
        .iter()
        .map(|&((ds, dt), m)| {
            let (p, q) = ((ds * nf).round(), (dt * nf).round());
            let ok = (ds * nf - p).abs() < 1e-9 && (dt * nf - q).abs() < 1e-9;
            ok.then_some(((p as i64, q as i64), m))
        })
        .collect()
}

/// Product of the factors with its rounding bound, given each factor's
/// value and the sum of the magnitudes of its terms.
fn product_with_noise(w: f64, terms: impl Iterator<Item = ((f64, f64), i32)> + Clone) -> (f64, f64) {
    let mut acc = w;
    let mut rel = 0.0;
    for ((v, scale), m) in terms.clone() {
        let r = if v == 0.0 { 0.0 } else { 4.0 * f64::EPSILON * scale / v.abs() };
        acc *= if m == 1 { v } else { v.powi(m) };
        rel += m as f64 * r.min(1.0);
    }
    let noise = if acc == 0.0 {
        // Exact cancellation: bound by the size of the individual terms.
        terms.fold(w.abs(), |b, ((_, scale), m)| b * (4.0 * f64::EPSILON * scale).powi(m))
    } else {
        acc.abs() * rel
    };
    (acc, noise)
}

#[allow(clippy::too_many_arguments)]
fn integrate_global(
    spec: &WeightSpec,
    n: usize,
    factors: &[((f64, f64), i32)],
    weight: Option<PointWeight<'_>>,
    region: Option<&Region>,
    (t_lo, t_hi): (f64, f64),
    with_singular: bool,
    quad: &QuadratureConfig,
) -> Result<Estimate> {
    let s_lo = factors.iter().map(|f| -f.0 .0).fold(f64::NEG_INFINITY, f64::max);
    let s_hi = factors.iter().map(|f| 1.0 + 1.0 / n as f64 - f.0 .0).fold(f64::INFINITY, f64::min);
    let base_t_breaks = spec.h_t_breaks(n);
    let base_t_sing = spec.h_t_singular(n);
    let base_s_sing = spec.h_s_singular(n);
    let mut t_breaks: Vec<f64> = Vec::new();
    let mut t_sing: Vec<f64> = Vec::new();
    let mut s_sing: Vec<f64> = Vec::new();
    for ((ds, dt), _) in factors {
        t_breaks.extend(base_t_breaks.iter().map(|b| b - dt));
        if with_singular {
            t_sing.extend(base_t_sing.iter().map(|b| b - dt));
            s_sing.extend(base_s_sing.iter().map(|b| b - ds));
        }
    }
    if let Some(r) = region {
        t_breaks.extend(r.t_breaks());
        t_sing.extend(r.t_singular());
    }
    sort_dedup(&mut t_breaks);
    sort_dedup(&mut t_sing);
    sort_dedup(&mut s_sing);

    let slice = |t: f64| -> Slice {
        let mut intervals = vec![(s_lo, s_hi)];
        if let Some(r) = region {
            let clip = r.s_intervals(t);
            intervals = intervals
                .iter()
                .flat_map(|&(a, b)| clip.iter().map(move |&(c, e)| (a.max(c), b.min(e))))
                .filter(|(a, b)| b > a)
                .collect();
        }
        let mut breaks = Vec::new();
        for ((ds, dt), _) in factors {
            breaks.extend(spec.h_s_breaks(n, t + dt).into_iter().map(|b| b - ds));
        }
        Slice { intervals, breaks, singular: s_sing.clone(), depth: None }
    };
    let f = |s: f64, t: f64| -> (f64, f64) {
        let w = weight.map_or(1.0, |w| w(s, t));
        product_with_noise(w, factors.iter().map(|&((ds, dt), m)| (spec.h_with_scale(n, s + ds, t + dt), m)))
    };
    integrate_2d(f, t_lo, t_hi, &t_breaks, &t_sing, slice, quad)
}

/// One quadrant of a cell next to a singular point, in coordinates
/// `(sigma, tau)` relative to the lattice corner `origin`.
#[allow(clippy::too_many_arguments)]
fn integrate_local(
    spec: &WeightSpec,
    n: usize,
    lattice: &[((i64, i64), i32)],
    corner: (i64, i64),
    origin: (f64, f64),
    singular: bool,
    weight: Option<PointWeight<'_>>,
    local: &Region,
    (t_a, t_b): (f64, f64),
    quad: &QuadratureConfig,
) -> Result<Estimate> {
    let nf = n as f64;
    let at = |m: i64| m as f64 / nf;
    // Shifts of the four g-terms of every factor, relative to the corner.
    let terms: Vec<(Vec<(f64, f64, f64)>, i32)> = lattice
        .iter()
        .map(|&((p, q), m)| {
            let mut ts = Vec::with_capacity(4);
            for (a, b, sign) in [(0, 0, 1.0), (1, 0, -1.0), (0, 1, -1.0), (1, 1, 1.0)] {
                ts.push((at(corner.0 + p - a), at(corner.1 + q - b), sign));
            }
            (ts, m)
        })
        .collect();
    let eval = |sg: f64, tu: f64| -> (f64, f64) {
        let w = weight.map_or(1.0, |w| w(origin.0 + sg, origin.1 + tu));
        product_with_noise(
            w,
            terms.iter().map(|(ts, m)| {
                let mut v = 0.0;
                let mut scale = 0.0;
                for &(u0, v0, sign) in ts {
                    let g = spec.g_rel(u0 + sg, v0 + tu);
                    v += sign * g;
                    scale += g.abs();
                }
                ((v, scale), *m)
            }),
        )
    };
    let sing = if singular { vec![0.0] } else { vec![] };
    let mut t_breaks = local.t_breaks();
    t_breaks.push(0.0);
    sort_dedup(&mut t_breaks);
    let slice = |tu: f64| -> Slice {
        let mut breaks = Vec::new();
        for (ts, _) in &terms {
            for &(u0, v0, _) in ts {
                let mut b = Vec::new();
                spec.g_rel_s_breaks(v0 + tu, &mut b);
                breaks.extend(b.into_iter().map(|x| x - u0));
            }
        }
        let intervals = local.s_intervals(tu);
        // Off the singular row the integrand is bounded by |tu|^-alpha, so
        // grading only needs to reach the scale |tu|.
        let width = intervals.iter().map(|(a, b)| a.abs().max(b.abs())).fold(0.0, f64::max);
        let depth = (tu != 0.0 && width > 0.0).then(|| ((width / tu.abs()).log2().max(0.0).ceil() as u32) + 3);
        Slice { intervals, breaks, singular: sing.clone(), depth }
    };
    integrate_2d(eval, t_a, t_b, &t_breaks, &sing, slice, quad)
}

pub fn compute_cn_estimate(spec: &WeightSpec, n: usize, quad: &QuadratureConfig) -> Result<Estimate> {
    let e = integrate_kernel_product(spec, n, &[(0.0, 0.0), (0.0, 0.0)], None, None, quad)?;
    if !(e.value > 0.0) {
        return Err(AmbitError::Quadrature {
            estimate: e.value,
            error: e.error,
            context: format!("c_n must be positive for n = {n}"),
        });
    }
    Ok(e)
}

pub fn compute_cn(spec: &WeightSpec, n: usize, quad: &QuadratureConfig) -> Result<f64> {
    Ok(compute_cn_estimate(spec, n, quad)?.value)
}

/// `mu_n(region) = int_region h_n^2` (unnormalized).
pub fn kernel_mass(spec: &WeightSpec, n: usize, region: &Region, quad: &QuadratureConfig) -> Result<f64> {
    Ok(integrate_kernel_product(spec, n, &[(0.0, 0.0), (0.0, 0.0)], None, Some(region), quad)?.value)
}

/// `pi_n(region)`.
pub fn concentration_mass(spec: &WeightSpec, n: usize, region: &Region, quad: &QuadratureConfig) -> Result<f64> {
    let cn = compute_cn(spec, n, quad)?;
    Ok(kernel_mass(spec, n, region, quad)? / cn)
}

/// `int h_n(z) h_n(z + lag) dz`.
pub fn kernel_autocorrelation(spec: &WeightSpec, n: usize, lag: (f64, f64), quad: &QuadratureConfig) -> Result<f64> {
    Ok(integrate_kernel_product(spec, n, &[(0.0, 0.0), lag], None, None, quad)?.value)
}

/// Summary of `pi_n` for one `(n, kappa)`.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub n: usize,
    pub c_n: f64,
    pub eps_n: f64,
    pub region_masses: BTreeMap<String, f64>,
    pub assumption2_ratio: Option<f64>,
    pub rho_bar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Exact `c_n` for the uniform kernel once `1/n` is below both side lengths.
pub fn uniform_cn_exact(n: usize) -> f64 {
    4.0 / (n as f64 * n as f64)
}

/// Note attached to uniform-kernel reports about the printed normalization.
pub const UNIFORM_CN_NOTE: &str =
    "c_n computed by quadrature; four disjoint squares of side 1/n give 4/n^2 (a printed value 4/n is inconsistent with the LLN scaling)";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_examples() {
        let u = WeightSpec::uniform(0.2, 0.7, 0.1, 0.9);
        assert_eq!(u.g(0.5, 0.5), 1.0);
        let s = WeightSpec::singular(0.5);
        assert!((s.g(0.25, 0.04) - 1.5).abs() < 1e-15);
        assert!(s.g(0.0, 0.0).is_infinite());
        let t = WeightSpec::triangle(0.75);
        assert_eq!(t.g(0.1, 0.1), 0.0);
        assert!(t.g(0.5, 0.0).is_infinite());
        assert!(t.h_checked(8, 0.5, 0.0).is_err());
    }

    #[test]
    fn h_vanishes_outside_support() {
        let s = WeightSpec::singular(0.3);
        assert_eq!(s.h(10, 1.2, 0.5), 0.0);
    }

    #[test]
    fn uniform_cn() {
        let u = WeightSpec::uniform(0.2, 0.7, 0.1, 0.9);
        let c = compute_cn(&u, 16, &QuadratureConfig::default()).unwrap();
        assert!((c - uniform_cn_exact(16)).abs() < 1e-14);
    }

    #[test]
    fn grid_kernel_bilinear() {
        let g = WeightSpec::grid(2, vec![0.0, 1.0, 2.0, 3.0]);
        assert!((g.g(0.5, 0.5) - 1.5).abs() < 1e-15);
        assert_eq!(g.g(1.5, 0.5), 0.0);
    }

    #[test]
    fn spec_roundtrip_toml() {
        let s = WeightSpec::singular(0.75);
        let text = toml::to_string(&s).unwrap();
        let back: WeightSpec = toml::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
