//! Field simulation on the lattice `{(i/n, j/n)}` and exact sampling of
//! thinned increment vectors.
//!
//! The convolution path discretizes white noise on `[-1,1]^2` into `M x M`
//! cells and evaluates `Y(i/n, j/n) = sum_c g(i/n - u_c, j/n - v_c) sigma_c W_c`
//! by a circular FFT convolution. The exact path builds the increment
//! covariance by quadrature and samples it through a symmetric square root.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::error::{AmbitError, Result};
use crate::kernels::{integrate_kernel_product, WeightSpec};
use crate::quad::QuadratureConfig;
use crate::rng::{substream, StreamKind};
use crate::volatility::SigmaGrid;

/// Gaussian sampler `X = L Z` with `L L^T = C` from a symmetric eigendecomposition.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
    pub min_eigenvalue: f64,
    pub floor: f64,
}

/// Negative eigenvalues down to `-PSD_TOLERANCE * trace / dim` are treated as quadrature noise.
pub const PSD_TOLERANCE: f64 = 1e-8;
/// Eigenvalue floor relative to `trace / dim`.
pub const EIGEN_FLOOR: f64 = 1e-12;

impl GaussianSampler {
    pub fn new(c: &DMatrix<f64>) -> Result<Self> {
        let dim = c.nrows();
        if dim == 0 || c.ncols() != dim {
            return Err(AmbitError::precondition("covariance must be a non-empty square matrix"));
        }
        let sym = (c + c.transpose()) * 0.5;
        let trace = sym.trace();
        if !(trace > 0.0) {
            return Err(AmbitError::precondition("covariance has nonpositive trace"));
        }
        let scale = trace / dim as f64;
        let floor = EIGEN_FLOOR * scale;
        let eig = SymmetricEigen::new(sym);
        let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if min_eigenvalue < -PSD_TOLERANCE * scale {
            return Err(AmbitError::NotPsd { min_eigenvalue, floor: -PSD_TOLERANCE * scale });
        }
        let roots = eig.eigenvalues.map(|l| if l > floor { l.sqrt() } else { 0.0 });
        let factor = eig.eigenvectors * DMatrix::from_diagonal(&roots);
        Ok(Self { factor, min_eigenvalue, floor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }
}

/// Values of `Y` at `(i/n, j/n)`, `0 <= i, j <= n`, stored row-major in `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeField {
    pub n: usize,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub spec: WeightSpec,
    pub sigma_seed: Option<u64>,
    pub noise_seed: u64,
    pub noise_resolution: usize,
}

impl LatticeField {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * (self.n + 1) + j]
    }

    /// Build a field from a closure, for tests and synthetic surfaces.
    pub fn from_fn<F: Fn(f64, f64) -> f64>(n: usize, spec: WeightSpec, f: F) -> Self {
        let mut values = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for j in 0..=n {
                values.push(f(i as f64 / n as f64, j as f64 / n as f64));
            }
        }
        Self {
            n,
            values,
            provenance: Provenance { spec, sigma_seed: None, noise_seed: 0, noise_resolution: 0 },
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        writeln!(
            w,
            "# n={} kernel={} noise_seed={} noise_resolution={}",
            self.n,
            self.provenance.spec.kind_name(),
            self.provenance.noise_seed,
            self.provenance.noise_resolution
        )?;
        for i in 0..=self.n {
            let row: Vec<String> = (0..=self.n).map(|j| format!("{:e}", self.at(i, j))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Precomputed kernel transform for one `(spec, M)`.
pub struct LatticeSimulator {
    pub spec: WeightSpec,
    pub resolution: usize,
    kernel_hat: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LatticeSimulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LatticeSimulator")
            .field("spec", &self.spec)
            .field("resolution", &self.resolution)
            .finish()
    }
}

fn fft2(data: &mut [Complex<f64>], m: usize, plan: &Arc<dyn Fft<f64>>) {
    let mut scratch = vec![Complex::new(0.0, 0.0); plan.get_inplace_scratch_len()];
    for row in data.chunks_mut(m) {
        plan.process_with_scratch(row, &mut scratch);
    }
    let mut col = vec![Complex::new(0.0, 0.0); m];
    for j in 0..m {
        for i in 0..m {
            col[i] = data[i * m + j];
        }
        plan.process_with_scratch(&mut col, &mut scratch);
        for i in 0..m {
            data[i * m + j] = col[i];
        }
    }
}

/// Kernel taps `K[r][q] = g((r + 1/2) h, (q + 1/2) h)` for `r, q < M/2`.
fn kernel_taps(spec: &WeightSpec, m: usize) -> Vec<f64> {
    let h = 2.0 / m as f64;
    let half = m / 2;
    let mut taps = vec![0.0; half * half];
    for r in 0..half {
        for q in 0..half {
            taps[r * half + q] = spec.g((r as f64 + 0.5) * h, (q as f64 + 0.5) * h);
        }
    }
    taps
}

impl LatticeSimulator {
    pub fn new(spec: &WeightSpec, resolution: usize) -> Result<Self> {
        spec.validate()?;
        if resolution < 2 || resolution % 2 != 0 {
            return Err(AmbitError::domain(format!("noise resolution must be even and >= 2, got {resolution}")));
        }
        let m = resolution;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let half = m / 2;
        let taps = kernel_taps(spec, m);
        let mut k = vec![Complex::new(0.0, 0.0); m * m];
        for r in 0..half {
            for q in 0..half {
                k[r * m + q] = Complex::new(taps[r * half + q], 0.0);
            }
        }
        fft2(&mut k, m, &fwd);
        Ok(Self { spec: spec.clone(), resolution: m, kernel_hat: k, fwd, inv })
    }

    fn check(&self, sigma: &SigmaGrid, n: usize) -> Result<()> {
        if n == 0 {
            return Err(AmbitError::domain("n must be >= 1"));
        }
        if self.resolution % (2 * n) != 0 {
            return Err(AmbitError::precondition(format!(
                "noise resolution {} is not a multiple of 2n = {}",
                self.resolution,
                2 * n
            )));
        }
        if sigma.resolution < self.resolution {
            return Err(AmbitError::precondition(format!(
                "volatility grid ({}) is coarser than the noise grid ({})",
                sigma.resolution, self.resolution
            )));
        }
        Ok(())
    }

    /// Weighted noise `sigma(mid) * h * Z` on the `M x M` cells (unscaled sigma).
    fn weighted_noise<R: Rng + ?Sized>(&self, sigma: &SigmaGrid, rng: &mut R) -> Vec<f64> {
        let m = self.resolution;
        let h = 2.0 / m as f64;
        let mid = |a: usize| -1.0 + (a as f64 + 0.5) * h;
        let mut out = Vec::with_capacity(m * m);
        for a in 0..m {
            for b in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                out.push(sigma.raw_at(mid(a), mid(b)) * h * z);
            }
        }
        out
    }

    /// Simulate with the generator placed on the noise substream `(seed, index)`.
    pub fn simulate(&self, sigma: &SigmaGrid, n: usize, noise_seed: u64, index: u64) -> Result<LatticeField> {
        self.check(sigma, n)?;
        let mut rng = substream(noise_seed, StreamKind::Noise, index);
        let noise = self.weighted_noise(sigma, &mut rng);
        Ok(self.convolve(&noise, sigma.scale, n, noise_seed))
    }

    fn convolve(&self, noise: &[f64], scale: f64, n: usize, noise_seed: u64) -> LatticeField {
        let m = self.resolution;
        let mut x: Vec<Complex<f64>> = noise.iter().map(|v| Complex::new(*v, 0.0)).collect();
        fft2(&mut x, m, &self.fwd);
        for (a, b) in x.iter_mut().zip(&self.kernel_hat) {
            *a *= *b;
        }
        fft2(&mut x, m, &self.inv);
        let norm = 1.0 / (m * m) as f64;
        let stride = m / (2 * n);
        let mut values = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            let row = m / 2 + i * stride - 1;
            for j in 0..=n {
                let col = m / 2 + j * stride - 1;
                values.push(scale * (x[row * m + col].re * norm));
            }
        }
        LatticeField {
            n,
            values,
            provenance: Provenance {
                spec: self.spec.clone(),
                sigma_seed: None,
                noise_seed,
                noise_resolution: m,
            },
        }
    }

    /// Direct summation over cells with the same noise draws (reference path).
    pub fn simulate_direct(&self, sigma: &SigmaGrid, n: usize, noise_seed: u64, index: u64) -> Result<LatticeField> {
        self.check(sigma, n)?;
        let m = self.resolution;
        let h = 2.0 / m as f64;
        let mut rng = substream(noise_seed, StreamKind::Noise, index);
        let noise = self.weighted_noise(sigma, &mut rng);
        let mut values = Vec::with_capacity((n + 1) * (n + 1));
        for i in 0..=n {
            for j in 0..=n {
                let mut acc = 0.0;
                for a in 0..m {
                    let du = (m / 2 + i * (m / (2 * n))) as f64 - a as f64 - 0.5;
                    for b in 0..m {
                        let dv = (m / 2 + j * (m / (2 * n))) as f64 - b as f64 - 0.5;
                        acc += self.spec.g(du * h, dv * h) * noise[a * m + b];
                    }
                }
                values.push(sigma.scale * acc);
            }
        }
        Ok(LatticeField {
            n,
            values,
            provenance: Provenance { spec: self.spec.clone(), sigma_seed: None, noise_seed, noise_resolution: m },
        })
    }

    /// Exact variance of the discretized `Y(s,t)` for constant unit volatility:
    /// `sum_c g(s - u_c, t - v_c)^2 h^2`, identical for every lattice point.
    pub fn discrete_variance_unit(&self) -> f64 {
        let m = self.resolution;
        let h = 2.0 / m as f64;
        kernel_taps(&self.spec, m).iter().map(|k| k * k).sum::<f64>() * h * h
    }
}

/// One-shot convenience wrapper around [`LatticeSimulator`].
pub fn simulate_lattice(spec: &WeightSpec, sigma: &SigmaGrid, n: usize, resolution: usize, noise_seed: u64) -> Result<LatticeField> {
    LatticeSimulator::new(spec, resolution)?.simulate(sigma, n, noise_seed, 0)
}

/// Thinned increments `Y(R_(ki,kj))` for `1 <= i, j <= floor(n/k)`, row-major in `i`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementField {
    pub n: usize,
    pub k: usize,
    pub size: usize,
    pub values: Vec<f64>,
}

impl IncrementField {
    /// Increment `(i, j)` with 1-based indices.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[(i - 1) * self.size + (j - 1)]
    }

    pub fn from_values(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        let size = n / k;
        if values.len() != size * size {
            return Err(AmbitError::domain(format!("expected {} increments, got {}", size * size, values.len())));
        }
        Ok(Self { n, k, size, values })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        writeln!(w, "# n={} k={}", self.n, self.k)?;
        for i in 1..=self.size {
            let row: Vec<String> = (1..=self.size).map(|j| format!("{:e}", self.at(i, j))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Rectangular increments over `((ki-1)/n, ki/n] x ((kj-1)/n, kj/n]`.
pub fn increments(field: &LatticeField, k: usize) -> Result<IncrementField> {
    let n = field.n;
    if k == 0 || k > n {
        return Err(AmbitError::domain(format!("thinning k must lie in 1..={n}, got {k}")));
    }
    let size = n / k;
    let mut values = Vec::with_capacity(size * size);
    for i in 1..=size {
        for j in 1..=size {
            let (a, b) = (k * i, k * j);
            values.push(field.at(a, b) - field.at(a - 1, b) - field.at(a, b - 1) + field.at(a - 1, b - 1));
        }
    }
    Ok(IncrementField { n, k, size, values })
}

/// Covariance of the thinned increment vector given the volatility.
#[derive(Debug, Clone, Serialize)]
pub struct IncrementCovariance {
    pub n: usize,
    pub k: usize,
    pub eps: f64,
    /// 1-based thinned indices, row-major.
    pub indices: Vec<(usize, usize)>,
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<f64>,
    pub quadrature_evaluations: usize,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for i in 0..m.nrows() {
        let row: Vec<f64> = m.row(i).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

impl IncrementCovariance {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn correlation(&self, a: usize, b: usize) -> f64 {
        self.matrix[(a, b)] / (self.matrix[(a, a)] * self.matrix[(b, b)]).sqrt()
    }

    /// Position of index `(i, j)` in the flattened vector.
    pub fn position(&self, i: usize, j: usize) -> usize {
        let size = self.n / self.k;
        (i - 1) * size + (j - 1)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        let labels: Vec<String> = self.indices.iter().map(|(i, j)| format!("{i}:{j}")).collect();
        writeln!(w, "index,{}", labels.join(","))?;
        for a in 0..self.dim() {
            let row: Vec<String> = (0..self.dim()).map(|b| format!("{:e}", self.matrix[(a, b)])).collect();
            writeln!(w, "{},{}", labels[a], row.join(","))?;
        }
        Ok(())
    }
}

pub const DEFAULT_COVARIANCE_CAP: usize = 32;

/// Absolute tolerance of off-diagonal covariance integrals, relative to `c_n`.
pub const OFF_DIAGONAL_TOL: f64 = 1e-11;
/// Initial grading depth of off-diagonal covariance integrals.
pub const OFF_DIAGONAL_DEPTH: u32 = 6;

/// `C_ab = int h_n(eps i_a - u, eps j_a - v) h_n(eps i_b - u, eps j_b - v) sigma(u,v)^2 du dv`.
pub fn increment_covariance(
    spec: &WeightSpec,
    sigma: &SigmaGrid,
    n: usize,
    k: usize,
    quad: &QuadratureConfig,
    cap: usize,
) -> Result<IncrementCovariance> {
    if n == 0 || k == 0 || k > n {
        return Err(AmbitError::domain(format!("need 1 <= k <= n, got n={n}, k={k}")));
    }
    let size = n / k;
    if size > cap {
        return Err(AmbitError::precondition(format!("thinned lattice {size}x{size} exceeds the cap {cap}")));
    }
    let eps = k as f64 / n as f64;
    let indices: Vec<(usize, usize)> = (1..=size).flat_map(|i| (1..=size).map(move |j| (i, j))).collect();
    let dim = indices.len();
    let mut matrix = DMatrix::zeros(dim, dim);
    let mut evals = 0usize;

    if let Some(s0) = sigma.constant_value() {
        // Stationary case: C depends on the index lag only, and A(lag) = A(-lag).
        let s2 = s0 * s0;
        let mut lags: Vec<(i64, i64)> = Vec::new();
        for di in -(size as i64 - 1)..=(size as i64 - 1) {
            for dj in -(size as i64 - 1)..=(size as i64 - 1) {
                let canon = canonical_lag(di, dj);
                if canon == (di, dj) {
                    lags.push(canon);
                }
            }
        }
        let swap = spec.is_swap_symmetric();
        lags.retain(|&(di, dj)| !swap || canonical_lag(dj, di) >= (di, dj));
        let diag = integrate_kernel_product(spec, n, &[(0.0, 0.0), (0.0, 0.0)], None, None, quad)?;
        // Off-diagonal entries only need accuracy relative to the variance, and
        // adaptive bisection then reaches the singular points without deep grading.
        let off = QuadratureConfig {
            abs_tol: quad.abs_tol.max(OFF_DIAGONAL_TOL * diag.value),
            singular_depth: quad.singular_depth.min(OFF_DIAGONAL_DEPTH),
            ..*quad
        };
        let results: Vec<Result<((i64, i64), f64, usize)>> = lags
            .par_iter()
            .filter(|&&lag| lag != (0, 0))
            .map(|&(di, dj)| {
                let e = integrate_kernel_product(
                    spec,
                    n,
                    &[(0.0, 0.0), (di as f64 * eps, dj as f64 * eps)],
                    None,
                    None,
                    &off,
                )?;
                Ok(((di, dj), e.value, e.evaluations))
            })
            .collect();
        let mut table = HashMap::new();
        table.insert((0, 0), diag.value);
        evals += diag.evaluations;
        for r in results {
            let (lag, v, ev) = r?;
            table.insert(lag, v);
            evals += ev;
        }
        for a in 0..dim {
            for b in 0..dim {
                let di = indices[b].0 as i64 - indices[a].0 as i64;
                let dj = indices[b].1 as i64 - indices[a].1 as i64;
                let lag = canonical_lag(di, dj);
                let v = match table.get(&lag) {
                    Some(v) => *v,
                    None => table[&canonical_lag(lag.1, lag.0)],
                };
                matrix[(a, b)] = s2 * v;
            }
        }
    } else {
        let entry = |a: usize, b: usize, cfg: &QuadratureConfig| -> Result<(f64, usize)> {
            let (ia, ja) = indices[a];
            let (ib, jb) = indices[b];
            let (xa, ya) = (ia as f64 * eps, ja as f64 * eps);
            let lag = ((ib as f64 - ia as f64) * eps, (jb as f64 - ja as f64) * eps);
            let w = |zs: f64, zt: f64| {
                let v = sigma.at(xa - zs, ya - zt);
                v * v
            };
            let e = integrate_kernel_product(spec, n, &[(0.0, 0.0), lag], Some(&w), None, cfg)?;
            Ok((e.value, e.evaluations))
        };
        let diags: Vec<Result<(f64, usize)>> = (0..dim).into_par_iter().map(|a| entry(a, a, quad)).collect();
        for (a, r) in diags.into_iter().enumerate() {
            let (v, ev) = r?;
            matrix[(a, a)] = v;
            evals += ev;
        }
        let scale = (0..dim).map(|a| matrix[(a, a)]).fold(0.0, f64::max);
        let off = QuadratureConfig {
            abs_tol: quad.abs_tol.max(OFF_DIAGONAL_TOL * scale),
            singular_depth: quad.singular_depth.min(OFF_DIAGONAL_DEPTH),
            ..*quad
        };
        let pairs: Vec<(usize, usize)> = (0..dim).flat_map(|a| (a + 1..dim).map(move |b| (a, b))).collect();
        let results: Vec<Result<(usize, usize, f64, usize)>> = pairs
            .par_iter()
            .map(|&(a, b)| entry(a, b, &off).map(|(v, ev)| (a, b, v, ev)))
            .collect();
        for r in results {
            let (a, b, v, ev) = r?;
            matrix[(a, b)] = v;
            matrix[(b, a)] = v;
            evals += ev;
        }
    }
    for a in 0..dim {
        if !(matrix[(a, a)] > 0.0) {
            return Err(AmbitError::Quadrature {
                estimate: matrix[(a, a)],
                error: f64::NAN,
                context: format!("increment variance {a} is not positive"),
            });
        }
    }
    Ok(IncrementCovariance { n, k, eps, indices, matrix, quadrature_evaluations: evals })
}

fn canonical_lag(di: i64, dj: i64) -> (i64, i64) {
    if di > 0 || (di == 0 && dj >= 0) {
        (di, dj)
    } else {
        (-di, -dj)
    }
}

/// `reps x dim` draws of the increment vector; replication `r` uses its own substream.
pub fn sample_increments_exact(cov: &IncrementCovariance, seed: u64, reps: usize) -> Result<DMatrix<f64>> {
    let sampler = GaussianSampler::new(&cov.matrix)?;
    Ok(sample_with(&sampler, seed, reps))
}

pub fn sample_with(sampler: &GaussianSampler, seed: u64, reps: usize) -> DMatrix<f64> {
    let dim = sampler.dim();
    let rows: Vec<DVector<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, StreamKind::ExactIncrements, r as u64);
            sampler.sample(&mut rng)
        })
        .collect();
    DMatrix::from_fn(reps, dim, |r, c| rows[r][c])
}

/// Largest absolute off-diagonal correlation.
pub fn rho_bar(cov: &IncrementCovariance) -> Result<f64> {
    let dim = cov.dim();
    if dim < 2 {
        return Err(AmbitError::precondition("rho_bar needs at least two increments"));
    }
    let mut r: f64 = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                r = r.max(cov.correlation(a, b).abs());
            }
        }
    }
    Ok(r)
}
