//! Property tests for the structural identities of the toolkit.

use ambit_core::asymptotics::admissible_kappa;
use ambit_core::gauss::{abs_moment, power_cov_probe, up_hermite_coeffs};
use ambit_core::kernels::{compute_cn, concentration_mass};
use ambit_core::limits::{clt_variance, sigma_functional, Atom, PiSpec};
use ambit_core::quad::QuadratureConfig;
use ambit_core::region::Region;
use ambit_core::simulate::{increment_covariance, increments, simulate_lattice, IncrementField};
use ambit_core::variation::{bias_term, expected_scaled_pv, expected_scaled_pv_by_quadrature, PowerVariationField};
use ambit_core::volatility::{integrated_power, sample_volatility};
use ambit_core::{VolatilityModel, WeightSpec};
use proptest::prelude::*;

// shallow initial grading; adaptive refinement still resolves the singular points
fn quad() -> QuadratureConfig {
    QuadratureConfig { singular_depth: 10, ..QuadratureConfig::default() }
}

fn any_spec() -> impl Strategy<Value = WeightSpec> {
    prop_oneof![
        (0.0..0.4f64, 0.5..0.9f64, 0.0..0.4f64, 0.5..0.9f64).prop_map(|(a, b, c, d)| WeightSpec::uniform(a, b, c, d)),
        (0.1..0.9f64).prop_map(WeightSpec::singular),
        (0.55..0.95f64).prop_map(WeightSpec::triangle),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn h_is_the_four_term_difference(spec in any_spec(), n in 2usize..200, s in -0.1..1.2f64, t in -0.1..1.2f64) {
        let d = 1.0 / n as f64;
        let direct = spec.g(s, t) - spec.g(s - d, t) - spec.g(s, t - d) + spec.g(s - d, t - d);
        let h = spec.h(n, s, t);
        prop_assert!(h == direct || (h.is_nan() && direct.is_nan()));
    }

    #[test]
    fn singular_kernel_is_symmetric(alpha in 0.05..0.95f64, n in 2usize..100, s in 0.0..1.1f64, t in 0.0..1.1f64) {
        let spec = WeightSpec::singular(alpha);
        prop_assert!((spec.g(s, t) - spec.g(t, s)).abs() <= 1e-12 * spec.g(s, t).abs().max(1.0));
        prop_assert!((spec.h(n, s, t) - spec.h(n, t, s)).abs() <= 1e-12 * spec.h(n, s, t).abs().max(1.0));
    }

    #[test]
    fn hermite_rank_two_and_bounded_partial_sums(p in 0.5..4.0f64) {
        let h = up_hermite_coeffs(p, 30).unwrap();
        prop_assert!(h.coefficients[0].abs() < 1e-10 && h.coefficients[1].abs() < 1e-10);
        let sums = h.parseval_partial_sums();
        let cap = abs_moment(2.0 * p).unwrap() - abs_moment(p).unwrap().powi(2);
        prop_assert!(sums.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        prop_assert!(*sums.last().unwrap() <= cap * (1.0 + 1e-9));
    }

    #[test]
    fn moment_recurrence(q in 0.1..6.0f64) {
        // E|X|^(q+2) = (q+1) E|X|^q
        let lhs = abs_moment(q + 2.0).unwrap();
        let rhs = (q + 1.0) * abs_moment(q).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs);
    }

    #[test]
    fn power_covariance_is_even_in_rho(rho in 0.0..0.95f64, p in 0.5..3.0f64) {
        let a = power_cov_probe(rho, p, 2.0).unwrap().cov;
        let b = power_cov_probe(-rho, p, 2.0).unwrap().cov;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-12));
    }

    #[test]
    fn bias_identity_for_constant_volatility(
        n in 4usize..200, kdiv in 1usize..8, p in 0.5..4.0f64, s in 0.0..=1.0f64, t in 0.0..=1.0f64, s0 in 0.5..2.0f64,
    ) {
        let k = (n / kdiv).max(1);
        let eps = k as f64 / n as f64;
        let sigma = sample_volatility(&VolatilityModel::Constant { sigma0: s0 }, 8, 0).unwrap();
        let spec = WeightSpec::uniform(0.0, 1.0, 0.0, 1.0);
        let e = expected_scaled_pv(&spec, &sigma, n, k, p, s, t, &quad()).unwrap();
        let mp = abs_moment(p).unwrap();
        let floor = |x: f64| eps * ((x / eps) + 1e-12).floor();
        let lattice = mp * s0.powf(p) * floor(s) * floor(t);
        prop_assert!((e - lattice).abs() <= 1e-12 * lattice.abs().max(1.0));
        let b = bias_term(s0, p, eps, s, t).unwrap();
        prop_assert!((e - mp * s0.powf(p) * s * t - b).abs() <= 1e-10);
    }

    #[test]
    fn power_variation_is_monotone(seed in 0u64..1000, n in 2usize..24, k in 1usize..4, p in 0.5..4.0f64) {
        let k = k.min(n);
        let size = n / k;
        let mut state = seed;
        let values: Vec<f64> = (0..size * size)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let inc = IncrementField::from_values(n, k, values).unwrap();
        let v = PowerVariationField::new(&inc, p).unwrap();
        for i in 0..=size {
            for j in 0..=size {
                let x = v.cumulative(i, j);
                prop_assert!(x >= 0.0);
                if i == 0 || j == 0 { prop_assert_eq!(x, 0.0); }
                if i < size { prop_assert!(v.cumulative(i + 1, j) >= x); }
                if j < size { prop_assert!(v.cumulative(i, j + 1) >= x); }
            }
        }
    }

    #[test]
    fn integrated_power_is_homogeneous_and_monotone(
        c in 0.1..5.0f64, p in 0.5..4.0f64, a in -1.0..0.0f64, b in 0.0..1.0f64, grow in 0.0..0.5f64,
    ) {
        let sigma = sample_volatility(&VolatilityModel::Deterministic { name: "sin".into() }, 64, 0).unwrap();
        let rect = (a, b, a / 2.0, b / 2.0);
        let base = integrated_power(&sigma, p, rect).unwrap().value;
        let scaled = integrated_power(&sigma.scaled(c), p, rect).unwrap().value;
        prop_assert!((scaled - c.powf(p) * base).abs() <= 1e-12 * scaled.abs().max(1e-300));
        let bigger = integrated_power(&sigma, p, (a, (b + grow).min(1.0), a / 2.0, b / 2.0)).unwrap().value;
        prop_assert!(bigger >= base);
    }

    #[test]
    fn sigma_functional_ignores_pi_for_constant_volatility(
        s0 in 0.2..3.0f64, p in 0.5..4.0f64, s in 0.0..=1.0f64, t in 0.0..=1.0f64, w in 0.05..0.95f64,
    ) {
        let sigma = sample_volatility(&VolatilityModel::Constant { sigma0: s0 }, 16, 0).unwrap();
        let dirac = PiSpec::DiracAt { z0: (0.0, 0.0) };
        let mixture = PiSpec::DiracMixture {
            atoms: vec![Atom { weight: w, point: (0.0, 0.0) }, Atom { weight: 1.0 - w, point: (0.0, 0.0) }],
        };
        let a = sigma_functional(&sigma, p, &dirac, s, t).unwrap();
        let b = sigma_functional(&sigma, p, &mixture, s, t).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert!((a - s0.powf(p) * s * t).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn clt_variance_is_monotone(s in 0.0..0.9f64, t in 0.0..0.9f64, ds in 0.0..0.1f64, dt in 0.0..0.1f64, p in 0.5..3.0f64) {
        let sigma = sample_volatility(&VolatilityModel::Deterministic { name: "bump".into() }, 64, 0).unwrap();
        let base = clt_variance(&sigma, p, (0.0, 0.0), s, t).unwrap();
        prop_assert!(clt_variance(&sigma, p, (0.0, 0.0), s + ds, t).unwrap() >= base);
        prop_assert!(clt_variance(&sigma, p, (0.0, 0.0), s, t + dt).unwrap() >= base);
    }

    #[test]
    fn admissible_range_boundaries(alpha in 0.05..0.95f64) {
        let r = admissible_kappa(&WeightSpec::singular(alpha)).unwrap();
        prop_assert!(r.contains(r.upper * 0.999));
        prop_assert_eq!(r.contains(r.upper), r.upper_inclusive);
        prop_assert!(!r.contains(r.upper + 1e-9));
        prop_assert!(!r.contains(0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn cn_scales_quadratically_and_masses_do_not(spec in any_spec(), c in 0.2..5.0f64, n in 8usize..64) {
        let q = quad();
        let base = compute_cn(&spec, n, &q).unwrap();
        let scaled = compute_cn(&spec.scaled(c), n, &q).unwrap();
        prop_assert!((scaled - c * c * base).abs() <= 1e-10 * scaled);
        let region = Region::rect(0.0, 0.5, 0.0, 0.5);
        let m0 = concentration_mass(&spec, n, &region, &q).unwrap();
        let m1 = concentration_mass(&spec.scaled(c), n, &region, &q).unwrap();
        prop_assert!((m0 - m1).abs() <= 1e-10);
    }

    #[test]
    fn concentration_masses_form_a_partition(spec in any_spec(), n in 8usize..48, cut_s in 0.1..0.9f64, cut_t in 0.1..0.9f64) {
        let q = quad();
        let top = 1.0 + 1.0 / n as f64;
        let cells = [
            Region::rect(0.0, cut_s, 0.0, cut_t),
            Region::rect(cut_s, top, 0.0, cut_t),
            Region::rect(0.0, cut_s, cut_t, top),
            Region::rect(cut_s, top, cut_t, top),
        ];
        let masses: Vec<f64> = cells.iter().map(|r| concentration_mass(&spec, n, r, &q).unwrap()).collect();
        prop_assert!(masses.iter().all(|m| (-1e-10..=1.0 + 1e-10).contains(m)));
        let total: f64 = masses.iter().sum();
        prop_assert!((total - 1.0).abs() <= 10.0 * q.rel_tol.max(1e-10), "total {total}");
    }
}

#[test]
fn constant_volatility_closed_form_matches_quadrature_path() {
    let q = quad();
    let sigma = sample_volatility(&VolatilityModel::Constant { sigma0: 0.7 }, 64, 0).unwrap();
    for spec in [WeightSpec::uniform(0.1, 0.6, 0.2, 0.9), WeightSpec::singular(0.3)] {
        for (s, t) in [(0.3, 0.8), (1.0, 1.0), (0.55, 0.05)] {
            let a = expected_scaled_pv(&spec, &sigma, 16, 2, 1.5, s, t, &q).unwrap();
            let b = expected_scaled_pv_by_quadrature(&spec, &sigma, 16, 2, 1.5, s, t, &q).unwrap();
            assert!((a - b).abs() <= 1e-8 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }
}

#[test]
fn seeds_determine_fields_and_volatility() {
    let model = VolatilityModel::LogGaussian { resolution: 32, smoothing_length: 0.2, mean: 0.0, variance: 0.1 };
    let a = sample_volatility(&model, 32, 9).unwrap();
    let b = sample_volatility(&model, 32, 9).unwrap();
    assert_eq!(a.raw_values(), b.raw_values());
    let spec = WeightSpec::singular(0.4);
    let f1 = simulate_lattice(&spec, &a, 8, 32, 4).unwrap();
    let f2 = simulate_lattice(&spec, &b, 8, 32, 4).unwrap();
    assert_eq!(f1.values, f2.values);
    let f3 = simulate_lattice(&spec, &a, 8, 32, 5).unwrap();
    assert_ne!(f1.values, f3.values);
}

#[test]
fn simulation_is_linear_in_volatility() {
    let spec = WeightSpec::triangle(0.75);
    let sigma = sample_volatility(&VolatilityModel::Deterministic { name: "linear".into() }, 32, 0).unwrap();
    let base = simulate_lattice(&spec, &sigma, 8, 32, 1).unwrap();
    let tripled = simulate_lattice(&spec, &sigma.scaled(3.0), 8, 32, 1).unwrap();
    for (a, b) in base.values.iter().zip(&tripled.values) {
        assert!((3.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
    }
    let inc = increments(&base, 2).unwrap();
    assert_eq!(inc.size, 4);
}

#[test]
fn covariance_correlations_obey_cauchy_schwarz() {
    let q = quad();
    let sigma = sample_volatility(&VolatilityModel::Deterministic { name: "bump".into() }, 64, 0).unwrap();
    for spec in [WeightSpec::singular(0.75), WeightSpec::uniform(0.0, 0.5, 0.0, 0.5)] {
        let cov = increment_covariance(&spec, &sigma, 8, 2, &q, 64).unwrap();
        for a in 0..cov.dim() {
            assert!(cov.matrix[(a, a)] > 0.0);
            for b in 0..cov.dim() {
                assert_eq!(cov.matrix[(a, b)], cov.matrix[(b, a)]);
                assert!(cov.correlation(a, b).abs() <= 1.0 + 1e-12);
            }
        }
    }
}

#[test]
fn admissible_branches_meet_at_one_half() {
    let below = admissible_kappa(&WeightSpec::singular(0.5 - 1e-12)).unwrap();
    let at = admissible_kappa(&WeightSpec::singular(0.5)).unwrap();
    // alpha at the crossover: (2a+1)/(2a+3) = 1/(2a+1) = 1/2
    assert!((at.upper - 0.5).abs() < 1e-15);
    assert!((below.upper - 0.5).abs() < 1e-11);
    assert!(admissible_kappa(&WeightSpec::uniform(0.0, 1.0, 0.0, 1.0)).unwrap().empty);
}
