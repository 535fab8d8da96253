//! Adaptive Gauss–Kronrod quadrature on intervals and iterated 2-D domains.
//!
//! The 1-D integrator is a global adaptive G10/K21 scheme. Callers pass
//! breakpoints (kinks and jumps) and singular points; segments touching a
//! singular point are pre-split geometrically toward it.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{AmbitError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Number of dyadic levels used when grading toward a singular point.
    pub singular_depth: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 0.0,
            max_subdivisions: 20_000,
            singular_depth: 40,
        }
    }
}

impl QuadratureConfig {
    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            v.push(format!("quadrature rel_tol must lie in (0,1), got {}", self.rel_tol));
        }
        if !(self.abs_tol >= 0.0) {
            v.push(format!("quadrature abs_tol must be >= 0, got {}", self.abs_tol));
        }
        if self.max_subdivisions < 10 {
            v.push("quadrature max_subdivisions must be at least 10".into());
        }
        if self.singular_depth > 200 {
            v.push("quadrature singular_depth must be at most 200".into());
        }
        v
    }

    fn inner(&self) -> Self {
        Self {
            rel_tol: (self.rel_tol * 1e-2).max(1e-14),
            abs_tol: self.abs_tol * 1e-2,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

struct Rule {
    value: f64,
    error: f64,
    /// Error level below which no further refinement can help.
    floor: f64,
}

fn gk21<F: FnMut(f64) -> (f64, f64)>(f: &mut F, a: f64, b: f64) -> Rule {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let abs_half = half.abs();
    let mut fv1 = [0.0; 10];
    let mut fv2 = [0.0; 10];

    let (fc, nc) = f(center);
    let mut resg = 0.0;
    let mut resk = WGK[10] * fc;
    let mut resabs = resk.abs();
    let mut noise = WGK[10] * nc;
    for j in 0..5 {
        let jtw = 2 * j + 1;
        let x = half * XGK[jtw];
        let (f1, n1) = f(center - x);
        let (f2, n2) = f(center + x);
        fv1[jtw] = f1;
        fv2[jtw] = f2;
        resg += WG[j] * (f1 + f2);
        resk += WGK[jtw] * (f1 + f2);
        resabs += WGK[jtw] * (f1.abs() + f2.abs());
        noise += WGK[jtw] * (n1 + n2);
    }
    for j in 0..5 {
        let jtwm1 = 2 * j;
        let x = half * XGK[jtwm1];
        let (f1, n1) = f(center - x);
        let (f2, n2) = f(center + x);
        fv1[jtwm1] = f1;
        fv2[jtwm1] = f2;
        resk += WGK[jtwm1] * (f1 + f2);
        resabs += WGK[jtwm1] * (f1.abs() + f2.abs());
        noise += WGK[jtwm1] * (n1 + n2);
    }
    let reskh = 0.5 * resk;
    let mut resasc = WGK[10] * (fc - reskh).abs();
    for j in 0..10 {
        resasc += WGK[j] * ((fv1[j] - reskh).abs() + (fv2[j] - reskh).abs());
    }
    let value = resk * half;
    resabs *= abs_half;
    resasc *= abs_half;
    let mut error = ((resk - resg) * half).abs();
    if resasc != 0.0 && error != 0.0 {
        error = resasc * (200.0 * error / resasc).powf(1.5).min(1.0);
    }
    // Rounding of the abscissae themselves limits accuracy on narrow
    // segments far from the origin.
    let spread = if abs_half > 0.0 { a.abs().max(b.abs()) / (2.0 * abs_half) } else { 0.0 };
    let floor = 50.0 * f64::EPSILON * (resabs + resasc * spread) + 2.0 * noise * abs_half;
    if floor > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        error = error.max(floor);
    }
    Rule { value, error, floor }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
    floor: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error
            .total_cmp(&other.error)
            .then_with(|| other.a.total_cmp(&self.a))
    }
}

fn close(x: f64, y: f64) -> bool {
    (x - y).abs() <= 4.0 * f64::EPSILON * x.abs().max(y.abs()).max(f64::MIN_POSITIVE)
}

/// Initial partition of `[a, b]`: breakpoints plus geometric grading toward
/// each singular point.
pub fn initial_partition(a: f64, b: f64, breaks: &[f64], singular: &[f64], depth: u32) -> Vec<f64> {
    let mut pts: Vec<f64> = vec![a, b];
    pts.extend(breaks.iter().copied().filter(|x| *x > a && *x < b));
    pts.extend(singular.iter().copied().filter(|x| *x > a && *x < b));
    sort_dedup(&mut pts);

    let mut graded = pts.clone();
    for &c in singular {
        if !c.is_finite() {
            continue;
        }
        for w in pts.windows(2) {
            let (x0, x1) = (w[0], w[1]);
            if close(c, x0) {
                for j in 1..=depth {
                    graded.push(x0 + (x1 - x0) * 0.5f64.powi(j as i32));
                }
            } else if close(c, x1) {
                for j in 1..=depth {
                    graded.push(x1 - (x1 - x0) * 0.5f64.powi(j as i32));
                }
            } else if c < x0 {
                let d0 = x0 - c;
                let mut x = c + 2.0 * d0;
                let mut count = 0;
                while x < x1 && count < depth {
                    graded.push(x);
                    x = c + 2.0 * (x - c);
                    count += 1;
                }
            } else if c > x1 {
                let d1 = c - x1;
                let mut x = c - 2.0 * d1;
                let mut count = 0;
                while x > x0 && count < depth {
                    graded.push(x);
                    x = c - 2.0 * (c - x);
                    count += 1;
                }
            }
        }
    }
    sort_dedup(&mut graded);
    graded
}

pub(crate) fn sort_dedup(v: &mut Vec<f64>) {
    v.retain(|x| x.is_finite());
    v.sort_by(|x, y| x.total_cmp(y));
    v.dedup_by(|x, y| close(*x, *y));
}

/// Integrate `f` over `[a, b]` with breakpoints and singular points.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    singular: &[f64],
    cfg: &QuadratureConfig,
) -> Result<Estimate> {
    integrate_noisy(|x| (f(x), 0.0), a, b, breaks, singular, cfg)
}

/// As [`integrate`], for an integrand returning `(value, noise)` where
/// `noise` bounds its evaluation error. Refinement stops once a segment's
/// error is at the level the noise allows.
pub fn integrate_noisy<F: FnMut(f64) -> (f64, f64)>(
    mut f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    singular: &[f64],
    cfg: &QuadratureConfig,
) -> Result<Estimate> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(AmbitError::domain(format!("integration limits must be finite: [{a}, {b}]")));
    }
    if a == b {
        return Ok(Estimate { value: 0.0, error: 0.0, evaluations: 0 });
    }
    if a > b {
        let e = integrate_noisy(f, b, a, breaks, singular, cfg)?;
        return Ok(Estimate { value: -e.value, ..e });
    }

    let pts = initial_partition(a, b, breaks, singular, cfg.singular_depth);
    let mut heap = BinaryHeap::with_capacity(pts.len() * 2);
    let mut done: Vec<Segment> = Vec::new();
    let mut evaluations = 0usize;
    let mut total_value = 0.0;
    let mut total_error = 0.0;
    for w in pts.windows(2) {
        let r = gk21(&mut f, w[0], w[1]);
        evaluations += 21;
        total_value += r.value;
        total_error += r.error;
        heap.push(Segment { a: w[0], b: w[1], value: r.value, error: r.error, floor: r.floor });
    }
    if !total_value.is_finite() || !total_error.is_finite() {
        return Err(AmbitError::Quadrature {
            estimate: total_value,
            error: total_error,
            context: format!("non-finite integrand on [{a}, {b}]"),
        });
    }

    let mut splits = 0usize;
    let mut converged = false;
    loop {
        let tol = cfg.abs_tol.max(cfg.rel_tol * total_value.abs());
        if total_error <= tol {
            converged = true;
            break;
        }
        let Some(worst) = heap.pop() else { break };
        if worst.error <= worst.floor * (1.0 + 1e-9) {
            // Already at the roundoff level; nothing left to gain here.
            done.push(worst);
            continue;
        }
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a && mid < worst.b) || (worst.b - worst.a) < 1e3 * f64::EPSILON * worst.a.abs().max(worst.b.abs()) {
            done.push(worst);
            continue;
        }
        if splits >= cfg.max_subdivisions {
            heap.push(worst);
            let (v, e) = totals(&heap, &done);
            return Err(AmbitError::Quadrature {
                estimate: v,
                error: e,
                context: format!("subdivision limit {} reached on [{a}, {b}]", cfg.max_subdivisions),
            });
        }
        splits += 1;
        let left = gk21(&mut f, worst.a, mid);
        let right = gk21(&mut f, mid, worst.b);
        evaluations += 42;
        total_value += left.value + right.value - worst.value;
        total_error += left.error + right.error - worst.error;
        if !total_value.is_finite() {
            return Err(AmbitError::Quadrature {
                estimate: total_value,
                error: f64::INFINITY,
                context: format!("non-finite integrand near [{}, {}]", worst.a, worst.b),
            });
        }
        heap.push(Segment { a: worst.a, b: mid, value: left.value, error: left.error, floor: left.floor });
        heap.push(Segment { a: mid, b: worst.b, value: right.value, error: right.error, floor: right.floor });
    }

    let (value, error) = totals(&heap, &done);
    let tol = cfg.abs_tol.max(cfg.rel_tol * value.abs());
    let floor_total: f64 = heap.iter().chain(done.iter()).map(|s| s.floor).sum();
    // The running totals decide convergence; re-summed totals can differ in the last bits.
    if !converged && error > tol && error > 2.0 * floor_total {
        return Err(AmbitError::Quadrature {
            estimate: value,
            error,
            context: format!("tolerance not met on [{a}, {b}]"),
        });
    }
    Ok(Estimate { value, error, evaluations })
}

fn totals(heap: &BinaryHeap<Segment>, done: &[Segment]) -> (f64, f64) {
    let mut segs: Vec<&Segment> = heap.iter().chain(done.iter()).collect();
    segs.sort_by(|x, y| x.a.total_cmp(&y.a));
    let values: Vec<f64> = segs.iter().map(|s| s.value).collect();
    let error = segs.iter().map(|s| s.error).sum();
    (pairwise_sum(&values), error)
}

/// Pairwise summation, deterministic in the order of `v`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Cross-section of a 2-D domain at a fixed outer coordinate.
#[derive(Debug, Clone, Default)]
pub struct Slice {
    pub intervals: Vec<(f64, f64)>,
    pub breaks: Vec<f64>,
    pub singular: Vec<f64>,
    /// Grading depth for this slice; the config value when `None`.
    pub depth: Option<u32>,
}

/// Iterated integral: outer over `t in [t_lo, t_hi]`, inner over the slice
/// returned by `slice(t)`. The integrand is called as `f(s, t)` and returns
/// `(value, noise)` as for [`integrate_noisy`].
#[allow(clippy::too_many_arguments)]
pub fn integrate_2d<F, S>(
    f: F,
    t_lo: f64,
    t_hi: f64,
    t_breaks: &[f64],
    t_singular: &[f64],
    slice: S,
    cfg: &QuadratureConfig,
) -> Result<Estimate>
where
    F: Fn(f64, f64) -> (f64, f64),
    S: Fn(f64) -> Slice,
{
    if !(t_hi > t_lo) {
        return Ok(Estimate { value: 0.0, error: 0.0, evaluations: 0 });
    }
    let inner_cfg = cfg.inner();
    let failure: RefCell<Option<AmbitError>> = RefCell::new(None);
    let evals = RefCell::new(0usize);
    let outer = |t: f64| -> (f64, f64) {
        let sl = slice(t);
        let mut acc = 0.0;
        let mut noise = 0.0;
        for &(lo, hi) in &sl.intervals {
            if !(hi > lo) {
                continue;
            }
            let cfg_here = match sl.depth {
                Some(d) => QuadratureConfig { singular_depth: d.min(inner_cfg.singular_depth), ..inner_cfg },
                None => inner_cfg,
            };
            match integrate_noisy(|s| f(s, t), lo, hi, &sl.breaks, &sl.singular, &cfg_here) {
                Ok(e) => {
                    acc += e.value;
                    noise += e.error;
                    *evals.borrow_mut() += e.evaluations;
                }
                Err(e) => {
                    let mut slot = failure.borrow_mut();
                    if slot.is_none() {
                        *slot = Some(e);
                    }
                }
            }
        }
        (acc, noise)
    };
    let est = integrate_noisy(outer, t_lo, t_hi, t_breaks, t_singular, cfg)?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(Estimate { evaluations: evals.into_inner(), ..est })
}
