//! Executes an [`ExperimentConfig`] and writes `report.json` plus CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::asymptotics::{
    admissible_kappa, assumption2_ratio, concentration_report, correlation_estimate, n0, region_measures, slope_fit,
    RegionCatalog,
};
use crate::config::{CommandKind, ExperimentConfig, ViolationKind};
use crate::error::AmbitError;
use crate::gauss::up_hermite_coeffs;
use crate::limits::{
    clt_experiment, default_eval_grid, experiment_sigma, lln_experiment, CltConfig, LlnConfig, MonteCarloReport,
};
use crate::simulate::{increments, LatticeSimulator};
use crate::variation::PowerVariationField;

/// Failure of a run, mapped onto process exit codes.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    Config(Vec<String>),
    Precondition(String),
    Numerical(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Precondition(_) => 4,
            RunError::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Config(v) => {
                writeln!(f, "invalid config ({} violation{}):", v.len(), if v.len() == 1 { "" } else { "s" })?;
                for m in v {
                    writeln!(f, "  - {m}")?;
                }
                Ok(())
            }
            RunError::Precondition(m) => write!(f, "precondition refused: {m}"),
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
            RunError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<AmbitError> for RunError {
    fn from(e: AmbitError) -> Self {
        match e {
            AmbitError::Precondition(_) => RunError::Precondition(e.to_string()),
            AmbitError::Io(m) => RunError::Io(m),
            e if e.is_numerical() => RunError::Numerical(e.to_string()),
            e => RunError::Config(vec![e.to_string()]),
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Files written by a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

struct Tables {
    files: BTreeMap<String, String>,
}

impl Tables {
    fn new() -> Self {
        Self { files: BTreeMap::new() }
    }

    fn add(&mut self, name: &str, header: &[&str], rows: Vec<Vec<String>>) {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.files.insert(name.to_string(), s);
    }

    fn raw(&mut self, name: &str, body: String) {
        self.files.insert(name.to_string(), body);
    }
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Validate, compute, then write. Nothing touches the filesystem before validation passes.
pub fn run(cfg: &ExperimentConfig, out_override: Option<&Path>) -> Result<RunOutput, RunError> {
    let violations = cfg.violations();
    let config_errors: Vec<String> =
        violations.iter().filter(|v| v.kind == ViolationKind::Config).map(|v| v.message.clone()).collect();
    if !config_errors.is_empty() {
        return Err(RunError::Config(config_errors));
    }
    if let Some(v) = violations.iter().find(|v| v.kind == ViolationKind::Precondition) {
        return Err(RunError::Precondition(v.message.clone()));
    }
    let out_dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("out/{}", cfg.kind.name())));

    let mut tables = Tables::new();
    let (results, targets) = match cfg.kind {
        CommandKind::Hermite => run_hermite(cfg, &mut tables)?,
        CommandKind::KernelReport => run_kernel_report(cfg, &mut tables)?,
        CommandKind::Asymptotics => run_asymptotics(cfg, &mut tables)?,
        CommandKind::Lln => run_lln(cfg, &mut tables)?,
        CommandKind::Clt => run_clt(cfg, &mut tables)?,
        CommandKind::Simulate => run_simulate(cfg, &mut tables)?,
    };

    let report = json!({
        "kind": cfg.kind.name(),
        "config": cfg,
        "seeds": {
            "master": cfg.seed,
            "streams": {
                "volatility": "ChaCha8(master), stream 1<<40",
                "noise": "ChaCha8(master), stream 2<<40 | (n_index<<20 | replication)",
                "exact_increments": "ChaCha8(master), stream 3<<40 | (n_index<<20 | replication)",
                "fourth_moment": "ChaCha8(master), stream 4<<40 | replication",
            },
        },
        "targets": targets,
        "results": results,
    });

    fs::create_dir_all(&out_dir)?;
    let mut files = Vec::new();
    let json_path = out_dir.join("report.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report).map_err(|e| RunError::Io(e.to_string()))?)?;
    files.push(json_path);
    for (name, body) in &tables.files {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        files.push(p);
    }
    Ok(RunOutput { out_dir, files })
}

type Section = Result<(Value, Value), RunError>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable report")
}

fn run_hermite(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    for &p in &cfg.p {
        let h = up_hermite_coeffs(p, cfg.hermite_order)?;
        let partial = h.parseval_partial_sums();
        for k in 0..=h.max_order {
            rows.push(vec![
                format!("{p}"),
                k.to_string(),
                num(h.coefficients[k]),
                num(h.normalized[k] * h.normalized[k]),
                if k >= 2 { num(partial[k - 2]) } else { String::new() },
            ]);
        }
        out.push(json!({
            "p": p,
            "alpha": h.coefficients,
            "parseval_total": h.parseval_total(),
            "variance_target": h.variance_target(),
            "nodes_used": h.nodes_used,
        }));
    }
    tables.add("hermite.csv", &["p", "k", "alpha_k", "alpha_k_sq_over_k_factorial", "parseval_partial"], rows);
    Ok((
        json!({ "expansions": out }),
        json!({ "parseval_total": "variance of |X|^p: m_2p - m_p^2" }),
    ))
}

fn run_kernel_report(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let spec = cfg.weight.as_ref().expect("validated");
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut mass_rows = Vec::new();
    for &n in &cfg.n {
        let r = concentration_report(spec, n, cfg.kappa, cfg.rho_bar, &cfg.quadrature)?;
        rows.push(vec![n.to_string(), num(r.c_n), num(r.eps_n), opt(r.assumption2_ratio), opt(r.rho_bar)]);
        for (label, m) in &r.region_masses {
            mass_rows.push(vec![n.to_string(), label.clone(), num(*m)]);
        }
        reports.push(r);
    }
    tables.add("cn.csv", &["n", "c_n", "eps_n", "assumption2_ratio", "rho_bar"], rows);
    tables.add("masses.csv", &["n", "region", "pi_n_mass"], mass_rows);
    Ok((
        json!({ "reports": to_value(&reports) }),
        json!({
            "c_n": "integral of h_n^2; the uniform kernel gives 4/n^2 exactly",
            "region_masses": "pi_n masses; the uniform corners carry 1/4 each",
            "assumption2_ratio": "pi_n(complement of E_n)/eps_n^2, expected to vanish for admissible kappa",
        }),
    ))
}

fn run_asymptotics(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let spec = cfg.weight.as_ref().expect("validated");
    let kappa = cfg.kappa.expect("validated");
    let range = admissible_kappa(spec)?;
    let mut per_n = Vec::new();
    let mut rows = Vec::new();
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut ratios = Vec::new();
    for &n in &cfg.n {
        let catalog = RegionCatalog::build(spec, n, kappa)?;
        let m = region_measures(spec, &catalog, &cfg.quadrature)?;
        let ratio = assumption2_ratio(spec, n, kappa, &cfg.quadrature)?;
        let rho = if cfg.rho_bar { Some(correlation_estimate(spec, n, kappa, &cfg.quadrature)?) } else { None };
        for (label, v) in &m.values {
            rows.push(vec![n.to_string(), label.clone(), num(*v)]);
            series.entry(label.clone()).or_default().push((n as f64, *v));
        }
        if let (Some(b1), Some(b3)) = (m.values.get("B1"), m.values.get("B3")) {
            series.entry("B1+B3".into()).or_default().push((n as f64, b1 + b3));
        }
        ratios.push(ratio);
        per_n.push(json!({
            "n": n,
            "k": catalog.k,
            "eps": catalog.eps,
            "c_n": m.c_n,
            "mu": m.values,
            "failures": m.failures,
            "partition_total": m.partition_total,
            "assumption2_ratio": ratio,
            "rho_bar": rho.map(|r| r.0),
            "rho_bar_over_eps": rho.map(|r| r.0 / r.1),
        }));
    }
    let mut fits = BTreeMap::new();
    for (label, pts) in &series {
        fits.insert(label.clone(), match slope_fit(pts) {
            Ok(f) => to_value(&f),
            Err(e) => json!({ "skipped": e.to_string() }),
        });
    }
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    tables.add("region_measures.csv", &["n", "region", "mu_n"], rows);
    tables.add(
        "assumption2.csv",
        &["n", "ratio"],
        cfg.n.iter().zip(&ratios).map(|(n, r)| vec![n.to_string(), num(*r)]).collect(),
    );
    let observational = !range.contains(kappa);
    Ok((
        json!({
            "admissible_kappa": to_value(&range),
            "kappa": kappa,
            "observational": observational,
            "n0": n0(spec, kappa).ok(),
            "per_n": per_n,
            "slope_fits": fits,
            "assumption2_strictly_decreasing": decreasing,
        }),
        json!({
            "slope_fits.E_tilde": spec.alpha().map(|a| format!("singular: -2(1-alpha) = {}", -2.0 * (1.0 - a))),
            "slope_fits.B3": "singular: mu_n(B3) = 0 for n >= n0",
            "slope_fits.B4": "singular: o(n^-2)",
            "slope_fits.B1+B3": spec.alpha().map(|a| format!("triangle: -1 + kappa(2 alpha - 1) = {}", -1.0 + kappa * (2.0 * a - 1.0))),
            "assumption2_ratio": "tends to 0 for admissible kappa; inadmissible kappa is an observational probe",
        }),
    ))
}

fn lln_config(cfg: &ExperimentConfig) -> LlnConfig {
    let mut c = LlnConfig::new(
        cfg.weight.clone().expect("validated"),
        cfg.volatility.clone().expect("validated"),
        cfg.n.clone(),
    );
    c.pi = cfg.pi.clone();
    c.p = cfg.p.clone();
    c.thinning = cfg.thinning();
    c.replications = cfg.replications;
    c.seed = cfg.seed;
    c.eval_grid = cfg.eval_grid.clone().unwrap_or_else(default_eval_grid);
    c.noise_factor = cfg.noise_factor;
    c.quad = cfg.quadrature;
    c.override_admissibility = cfg.override_admissibility;
    c
}

fn report_value(r: &MonteCarloReport) -> Value {
    let mut v = to_value(r);
    if let Value::Object(m) = &mut v {
        m.retain(|_, x| !matches!(x, Value::Array(a) if a.is_empty()));
    }
    v
}

fn run_lln(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let r = lln_experiment(&lln_config(cfg))?;
    let rows = r
        .lln
        .iter()
        .map(|e| {
            vec![
                format!("{}", e.p),
                e.n.to_string(),
                e.k.to_string(),
                num(e.eps),
                num(e.c_n),
                num(e.sup_error.q1),
                num(e.sup_error.median),
                num(e.sup_error.q3),
                opt(e.mean_error),
                opt(e.stochastic_error.map(|q| q.median)),
                opt(e.bias_closed_form),
                num(e.v11_mean),
                num(e.v11_std_error),
                opt(e.v11_expected),
            ]
        })
        .collect();
    tables.add(
        "lln.csv",
        &[
            "p", "n", "k", "eps", "c_n", "sup_error_q1", "sup_error_median", "sup_error_q3", "mean_error",
            "stochastic_error_median", "bias_closed_form", "v11_mean", "v11_std_error", "v11_expected",
        ],
        rows,
    );
    Ok((
        report_value(&r),
        json!({
            "sup_error": "law of large numbers: eps^2/c_n^{p/2} V -> m_p Sigma^(p,pi)",
            "mean_error": "exact conditional expectation of the scaled variation",
            "bias_closed_form": "-m_p sigma0^p eps ({s/eps} t + {t/eps} s - eps {s/eps}{t/eps})",
            "v11_expected": "E_W V_(1,1) = m_p sum C_aa^{p/2}",
        }),
    ))
}

fn run_clt(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let mut c = CltConfig::new(
        cfg.weight.clone().expect("validated"),
        cfg.volatility.clone().expect("validated"),
        cfg.n.clone(),
        cfg.kappa.expect("validated"),
    );
    c.p = cfg.p.clone();
    c.replications = cfg.replications;
    c.seed = cfg.seed;
    c.eval_grid = cfg.eval_grid.clone().unwrap_or_else(default_eval_grid);
    c.sigma_resolution = cfg.sigma_resolution;
    c.quad = cfg.quadrature;
    c.cap = cfg.covariance_cap;
    c.hermite_order = cfg.hermite_order;
    c.override_admissibility = cfg.override_admissibility;
    let r = clt_experiment(&c)?;
    let mut rows = Vec::new();
    for e in &r.clt {
        for pt in &e.points {
            let m = pt.moments;
            rows.push(vec![
                format!("{}", e.p),
                e.n.to_string(),
                e.k.to_string(),
                num(e.eps),
                format!("{}", pt.s),
                format!("{}", pt.t),
                pt.terms.to_string(),
                opt(m.map(|m| m.variance)),
                opt(m.map(|m| m.variance_se)),
                num(pt.exact_variance),
                num(pt.asymptotic_variance),
                opt(m.map(|m| m.skewness)),
                opt(m.map(|m| m.excess_kurtosis)),
                opt(m.map(|m| m.ks_distance)),
                opt(pt.envelope),
            ]);
        }
    }
    tables.add(
        "clt.csv",
        &[
            "p", "n", "k", "eps", "s", "t", "terms", "mc_variance", "mc_variance_se", "exact_variance",
            "asymptotic_variance", "skewness", "excess_kurtosis", "ks_distance", "envelope",
        ],
        rows,
    );
    Ok((
        report_value(&r),
        json!({
            "exact_variance": "p = 2: 2 sum C~_ab^2; otherwise the Hermite series of u_p",
            "asymptotic_variance": "central limit theorem: (m_2p - m_p^2) int sigma^2p over the shifted rectangle",
            "skewness": "0 for the Gaussian limit",
            "excess_kurtosis": "0 for the Gaussian limit",
        }),
    ))
}

fn run_simulate(cfg: &ExperimentConfig, tables: &mut Tables) -> Section {
    let spec = cfg.weight.as_ref().expect("validated");
    let model = cfg.volatility.as_ref().expect("validated");
    let thinning = cfg.thinning();
    let max_m = cfg.n.iter().map(|n| cfg.noise_factor * 2 * n).max().expect("validated");
    let sigma = experiment_sigma(model, max_m.max(cfg.sigma_resolution), cfg.seed)?;
    let mut buf = Vec::new();
    sigma.write_csv(&mut buf)?;
    tables.raw("sigma.csv", String::from_utf8(buf).expect("utf8"));
    let mut out = Vec::new();
    for (n_idx, &n) in cfg.n.iter().enumerate() {
        let m = cfg.noise_factor * 2 * n;
        let sim = LatticeSimulator::new(spec, m)?;
        let mut field = sim.simulate(&sigma, n, cfg.seed, (n_idx as u64) << 20)?;
        field.provenance.sigma_seed = Some(cfg.seed);
        let (k, eps) = thinning.resolve(n)?;
        let inc = increments(&field, k)?;
        let mut buf = Vec::new();
        field.write_csv(&mut buf)?;
        tables.raw(&format!("field_n{n}.csv"), String::from_utf8(buf).expect("utf8"));
        let mut buf = Vec::new();
        inc.write_csv(&mut buf)?;
        tables.raw(&format!("increments_n{n}.csv"), String::from_utf8(buf).expect("utf8"));
        let mut pv = Vec::new();
        for &p in &cfg.p {
            let v = PowerVariationField::new(&inc, p)?;
            let mut buf = Vec::new();
            v.write_csv(&mut buf)?;
            tables.raw(&format!("variation_n{n}_p{p}.csv"), String::from_utf8(buf).expect("utf8"));
            pv.push(json!({ "p": p, "v11": v.at(1.0, 1.0) }));
        }
        out.push(json!({ "n": n, "k": k, "eps": eps, "noise_resolution": m, "variation": pv }));
    }
    Ok((json!({ "fields": out }), json!({ "variation": "raw power variation V_(1,1) of the simulated field" })))
}
