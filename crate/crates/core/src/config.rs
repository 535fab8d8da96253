//! Experiment configuration: a TOML document validated in full before any
//! computation starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asymptotics::{admissible_kappa, Thinning};
use crate::error::{AmbitError, Result};
use crate::kernels::{WeightShape, WeightSpec};
use crate::limits::PiSpec;
use crate::quad::QuadratureConfig;
use crate::volatility::VolatilityModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    KernelReport,
    Hermite,
    Lln,
    Clt,
    Asymptotics,
    Simulate,
}

impl CommandKind {
    pub fn name(&self) -> &'static str {
        match self {
            CommandKind::KernelReport => "kernel-report",
            CommandKind::Hermite => "hermite",
            CommandKind::Lln => "lln",
            CommandKind::Clt => "clt",
            CommandKind::Asymptotics => "asymptotics",
            CommandKind::Simulate => "simulate",
        }
    }
}

pub const MAX_POWER: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: CommandKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volatility: Option<VolatilityModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<PiSpec>,
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_grid: Option<Vec<(f64, f64)>>,
    /// Noise resolution `M = noise_factor * 2n` for simulated fields.
    #[serde(default = "default_noise_factor")]
    pub noise_factor: usize,
    #[serde(default = "default_sigma_resolution")]
    pub sigma_resolution: usize,
    #[serde(default = "default_cap")]
    pub covariance_cap: usize,
    #[serde(default = "default_hermite_order")]
    pub hermite_order: usize,
    /// Also compute `rho_bar` in kernel and asymptotics reports.
    #[serde(default)]
    pub rho_bar: bool,
    #[serde(default)]
    pub override_admissibility: bool,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
}

fn default_p() -> Vec<f64> {
    vec![2.0]
}
fn default_replications() -> usize {
    100
}
fn default_noise_factor() -> usize {
    1
}
fn default_sigma_resolution() -> usize {
    256
}
fn default_cap() -> usize {
    crate::simulate::DEFAULT_COVARIANCE_CAP
}
fn default_hermite_order() -> usize {
    crate::gauss::DEFAULT_HERMITE_ORDER
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// Malformed or out-of-range input.
    Config,
    /// Well-formed input refused on mathematical grounds (overridable).
    Precondition,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AmbitError::Config(e.to_string()))
    }

    /// Parse a file; grid kernels given by `path` are loaded relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(WeightSpec { shape: WeightShape::GridSampled { path: Some(p), values, .. }, scale }) = &cfg.weight {
            if values.is_empty() {
                let full = path.parent().unwrap_or(Path::new(".")).join(p);
                let loaded = WeightSpec::load_grid_csv(&full)?;
                let mut spec = loaded.scaled(*scale);
                if let WeightShape::GridSampled { path: slot, .. } = &mut spec.shape {
                    *slot = Some(p.clone());
                }
                cfg.weight = Some(spec);
            }
        }
        Ok(cfg)
    }

    pub fn thinning(&self) -> Thinning {
        match (self.k, self.kappa) {
            (_, Some(kappa)) => Thinning::Kappa(kappa),
            (Some(k), None) => Thinning::Fixed(k),
            (None, None) => Thinning::Fixed(1),
        }
    }

    /// All violations, each tagged as a config error or a precondition refusal.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |m: String| out.push(Violation { kind: ViolationKind::Config, message: m });
        let kind = self.kind;
        let needs_weight = !matches!(kind, CommandKind::Hermite);
        let needs_n = !matches!(kind, CommandKind::Hermite);
        let needs_sigma = matches!(kind, CommandKind::Lln | CommandKind::Clt | CommandKind::Simulate);

        if self.p.is_empty() {
            bad("p list is empty".into());
        }
        for &p in &self.p {
            if !(p > 0.0 && p <= MAX_POWER) {
                bad(format!("p = {p} outside (0, {MAX_POWER}]"));
            }
        }
        if needs_n && self.n.is_empty() {
            bad("n schedule is empty".into());
        }
        if self.n.iter().any(|&n| n == 0) {
            bad("every n must be >= 1".into());
        }
        if self.k.is_some() && self.kappa.is_some() {
            bad("give either k or kappa, not both".into());
        }
        if let Some(k) = self.k {
            if k == 0 {
                bad("k must be >= 1".into());
            }
            if let Some(&n) = self.n.iter().find(|&&n| n < k) {
                bad(format!("k = {k} exceeds n = {n}"));
            }
        }
        if let Some(kappa) = self.kappa {
            if !(kappa > 0.0 && kappa <= 1.0) {
                bad(format!("kappa = {kappa} outside (0, 1]"));
            }
        }
        if matches!(kind, CommandKind::Lln | CommandKind::Clt) && self.replications == 0 {
            bad("replications must be >= 1".into());
        }
        if self.noise_factor == 0 {
            bad("noise_factor must be >= 1".into());
        }
        if self.sigma_resolution < 2 {
            bad("sigma_resolution must be >= 2".into());
        }
        if self.covariance_cap == 0 {
            bad("covariance_cap must be >= 1".into());
        }
        if !(2..=200).contains(&self.hermite_order) {
            bad(format!("hermite_order = {} outside 2..=200", self.hermite_order));
        }
        if let Some(grid) = &self.eval_grid {
            for &(s, t) in grid {
                if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) {
                    bad(format!("evaluation point ({s}, {t}) outside [0,1]^2"));
                }
            }
        }
        for m in self.quadrature.validate() {
            bad(m);
        }
        match &self.weight {
            None if needs_weight => bad("missing [weight] table".into()),
            Some(w) => {
                for m in w.violations() {
                    bad(m);
                }
            }
            None => {}
        }
        match &self.volatility {
            None if needs_sigma => bad("missing [volatility] table".into()),
            Some(v) => {
                for m in v.violations() {
                    bad(m);
                }
            }
            None => {}
        }
        if let Some(pi) = &self.pi {
            if let Err(e) = pi.validate() {
                bad(e.to_string());
            }
        }
        if let Some(w) = &self.weight {
            if kind == CommandKind::Clt && matches!(w.shape, WeightShape::Uniform { .. }) {
                bad("clt with a uniform kernel: pi_n splits over four corners, so the concentration condition cannot hold".into());
            }
            if kind == CommandKind::Clt && self.kappa.is_none() {
                bad("clt needs a thinning exponent kappa".into());
            }
            if matches!(kind, CommandKind::Asymptotics) && !matches!(w.shape, WeightShape::Singular { .. } | WeightShape::Triangle { .. }) {
                bad(format!("asymptotics needs a singular or triangle kernel, got {}", w.kind_name()));
            }
            if matches!(kind, CommandKind::Asymptotics) && self.kappa.is_none() {
                bad("asymptotics needs a thinning exponent kappa".into());
            }
            if kind == CommandKind::Lln && self.pi.is_none() && matches!(w.shape, WeightShape::GridSampled { .. }) {
                bad("lln with a grid kernel needs an explicit [pi] table".into());
            }
            if matches!(kind, CommandKind::Lln | CommandKind::Clt) && !self.override_admissibility {
                if let (Some(kappa), Ok(range)) = (self.kappa, admissible_kappa(w)) {
                    if kappa > 0.0 && kappa <= 1.0 && !range.contains(kappa) {
                        out.push(Violation {
                            kind: ViolationKind::Precondition,
                            message: if range.empty {
                                format!("κ = {kappa} not admissible: {}", range.note)
                            } else {
                                format!("κ outside {} ({})", range.describe(), range.note)
                            },
                        });
                    }
                }
            }
        }
        out
    }

    /// Messages of every violation; empty iff the run's preconditions hold.
    pub fn validate(&self) -> Vec<String> {
        self.violations().into_iter().map(|v| v.message).collect()
    }
}
