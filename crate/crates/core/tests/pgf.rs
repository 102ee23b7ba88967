#![allow(clippy::needless_range_loop)]

use branchdev_core::fixtures::{fixture_a, fixture_b};
use branchdev_core::model::{ModelSpec, Pmf2};
use branchdev_core::pgf::*;
use branchdev_core::series::{compose, TruncatedSeries};
use branchdev_core::{Error, SpectralData, Statistic};

fn deterministic() -> ModelSpec {
    ModelSpec::new(Pmf2::dirac([2, 0]), Pmf2::dirac([0, 2]), Pmf2::dirac([1, 1]))
}

#[test]
fn generation_zero_is_identity() {
    let g = iterate_process(&fixture_a(), 0, 8);
    assert_eq!(g.g[0].coeff([1, 0]), 1.0);
    assert_eq!(g.g[1].coeff([0, 1]), 1.0);
    assert_eq!(g.g[0].stored_mass(), 1.0);
}

#[test]
fn deterministic_first_generation() {
    let g = iterate_process(&deterministic(), 1, 8);
    assert_eq!(g.g[0].coeff([3, 1]), 1.0);
    assert_eq!(g.g[1].coeff([1, 3]), 1.0);
}

#[test]
fn one_step_recursion_matches_product_formula() {
    let spec = fixture_a();
    let d = 16;
    let f = [
        TruncatedSeries::from_pmf(&spec.offspring[0], d),
        TruncatedSeries::from_pmf(&spec.offspring[1], d),
    ];
    let h = TruncatedSeries::from_pmf(&spec.immigration, d);
    let mut process = Process::new(&spec, d);
    for n in 0..4 {
        let g_n = process.current().clone();
        let next = process.advance().clone();
        for i in 0..2 {
            let stepped = h.multiply(&compose(&g_n.g[i], &f).unwrap()).unwrap();
            for (j, c) in next.g[i].entries() {
                if j[0] + j[1] <= d {
                    assert!((c - stepped.coeff(j)).abs() <= 1e-14, "n={n} i={i} j={j:?}");
                }
            }
        }
    }
}

#[test]
fn pointwise_matches_series() {
    let spec = fixture_a();
    let g = iterate_process(&spec, 3, 24);
    for i in 0..2 {
        let exact = pointwise_g(&spec, i, [0.5, 0.5], 3).unwrap();
        let series = g.g[i].evaluate([0.5, 0.5]).unwrap();
        assert!((exact - series).abs() <= g.g[i].residual() + 1e-14);
        assert!(series <= exact + 1e-15);
        assert_eq!(pointwise_g(&spec, i, [1.0, 1.0], 3).unwrap(), 1.0);
        assert_eq!(pointwise_g(&spec, i, [0.0, 0.0], 1).unwrap(), 0.0);
    }
    assert!(matches!(pointwise_g(&spec, 0, [1.2, 0.5], 3), Err(Error::Domain(_))));
}

#[test]
fn r_vanishes_at_zero_and_s_factor_grows() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    assert_eq!(r_eval(&spec, &sd, [0.0, 0.0], 20).unwrap().value, [0.0, 0.0]);
    let r = r_eval(&spec, &sd, [0.4, 0.6], 30).unwrap();
    assert!(r.s_factor.windows(2).all(|w| w[1] >= w[0]));
    assert!(r.diagnostics.converged);
    assert!(r_functional_residual(&spec, &sd, [0.3, 0.5], 30).unwrap() < 1e-6);
    assert!(matches!(r_eval(&spec, &sd, [1.0, 1.0], 5), Err(Error::Domain(_))));
}

#[test]
fn r_needs_vanishing_immigration() {
    let spec = fixture_b();
    let sd = SpectralData::compute(&spec).unwrap();
    assert!(matches!(r_eval(&spec, &sd, [0.5, 0.5], 5), Err(Error::TheoremDisabled(_))));
}

#[test]
fn r_coefficients_agree_with_r_eval() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let coeffs = r_coeffs(&spec, &sd, 12, 24).unwrap();
    let pointwise = r_eval(&spec, &sd, [0.3, 0.3], 12).unwrap().value;
    for i in 0..2 {
        assert_eq!(coeffs.value(i, [0, 0]), 0.0);
        let series = coeffs.current[i].evaluate([0.3, 0.3]).unwrap();
        let slack = coeffs.tail[i] * 0.3 + 1e-12;
        assert!((series - pointwise[i]).abs() <= slack, "{series} vs {}", pointwise[i]);
    }
}

#[test]
fn g_limit_properties() {
    let spec = fixture_b();
    let at_one = g_eval(&spec, [1.0, 1.0], 10).unwrap();
    assert!(at_one.diagnostics.values.iter().all(|v| *v == [0.0, 0.0]));
    let low = g_eval(&spec, [0.1, 0.1], 12).unwrap().value;
    let mid = g_eval(&spec, [0.5, 0.5], 12).unwrap().value;
    for t in 0..2 {
        assert!(low[t] < mid[t] && mid[t] < 0.0);
    }
    let early = g_functional_residual(&spec, [0.6, 0.7], 4).unwrap();
    let late = g_functional_residual(&spec, [0.6, 0.7], 14).unwrap();
    assert!(late[0] < early[0] && late[1] < early[1]);
    assert!(matches!(g_eval(&spec, [0.0, 0.5], 3), Err(Error::Domain(_))));
    assert!(matches!(g_eval(&fixture_a(), [0.5, 0.5], 3), Err(Error::TheoremDisabled(_))));
}

/// Enumerates one generation from `X_0 = (1, 0)` outcome by outcome.
#[test]
fn phi_matches_enumeration() {
    let spec = fixture_a();
    let m = spec.mean_matrix();
    let (l, eps) = ([1.0, -1.0], 0.5);
    let mean = l[0] * m[0][0] + l[1] * m[0][1];
    let mut expect = 0.0;
    for z in spec.offspring[0].atoms() {
        for im in spec.immigration.atoms() {
            let next = [z.j[0] + im.j[0], z.j[1] + im.j[1]];
            if (l[0] * next[0] as f64 + l[1] * next[1] as f64 - mean).abs() > eps {
                expect += z.p * im.p;
            }
        }
    }
    let got = exact_phi(&spec, [1, 0], eps, l, DEFAULT_PHI_CAP).unwrap();
    assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    assert_eq!(exact_phi(&spec, [2, 3], 0.5, [0.0, 0.0], DEFAULT_PHI_CAP).unwrap(), 0.0);
    assert_eq!(exact_phi(&spec, [2, 3], 100.0, l, DEFAULT_PHI_CAP).unwrap(), 0.0);
    assert!(matches!(exact_phi(&spec, [20, 20], 0.5, l, DEFAULT_PHI_CAP), Err(Error::Resource(_))));
}

#[test]
fn phi_table_matches_single_evaluations() {
    let spec = fixture_a();
    let table = phi_table(&spec, 0.7, [1.0, -1.0], 6);
    for j in [[1u32, 0], [0, 1], [3, 2], [6, 6]] {
        let single = exact_phi(&spec, j, 0.7, [1.0, -1.0], DEFAULT_PHI_CAP).unwrap();
        assert!((table[j[0] as usize * 7 + j[1] as usize] - single).abs() < 1e-14);
    }
    assert_eq!(table[0], 0.0);
}

#[test]
fn phi_hat_at_generation_zero_is_deterministic() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let v = sd.perron.v;
    let share = v[0] / (v[0] + v[1]);
    let p = exact_phi_hat(&spec, &sd, [1, 0], 0, 0.01, [1.0, 0.0], 8, 1e-9).unwrap();
    assert_eq!(p.value, if (1.0 - share).abs() > 0.01 { 1.0 } else { 0.0 });
    assert_eq!(p.residual, 0.0);
    let tight = exact_phi_hat(&spec, &sd, [4, 4], 3, 0.2, [1.0, 0.0], 6, 1e-12);
    assert!(matches!(tight, Err(Error::Resource(_))));
}

/// `(h0 gamma)^-n P(dev at n)` equals the ratio sum at `n - k0` by the Markov property.
#[test]
fn ratio_sum_scaling_matches_markov_identity() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let base = geometric_base(&spec, &sd).unwrap();
    let (eps, l) = (0.3, [1.0, -1.0]);
    let curve = exact_deviation_curve(&spec, &sd, 0, &[3], Statistic::DevRatio, eps, l, 24).unwrap();
    let lhs = curve[0].value * base.powi(-3);
    let sums = theorem1_sums(&spec, &sd, eps, l, 24, 2, 1).unwrap();
    let slack = (curve[0].residual * base.powi(-3) + sums[0].ratio_remainder).max(1e-12);
    assert!((lhs - sums[0].ratio_sum).abs() <= slack, "{lhs} vs {}", sums[0].ratio_sum);
}

#[test]
fn next_sum_vanishes_beyond_support() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let sums = theorem1_sums(&spec, &sd, 50.0, [1.0, -1.0], 12, 6, 1).unwrap();
    for s in &sums {
        assert_eq!(s.next_sum, 0.0);
        assert_eq!(s.ratio_sum, 0.0);
    }
    assert!(matches!(
        theorem1_sums(&spec, &sd, 0.5, [1.0, 1.0], 12, 6, 1),
        Err(Error::Domain(_))
    ));
}

#[test]
fn next_sum_stable_under_larger_box() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let small = theorem1_sums(&spec, &sd, 1.5, [1.0, -1.0], 16, 8, 1).unwrap();
    let large = theorem1_sums(&spec, &sd, 1.5, [1.0, -1.0], 32, 8, 1).unwrap();
    for i in 0..2 {
        let gap = (small[i].next_sum - large[i].next_sum).abs();
        assert!(gap <= small[i].next_remainder + large[i].next_remainder + 1e-12);
    }
}

#[test]
fn k0_helper_finds_a_generation() {
    let spec = fixture_a();
    let sd = SpectralData::compute(&spec).unwrap();
    let grid = branchdev_core::spectral::default_grid(10);
    let k0 = choose_k0(&spec, &sd, 0.5, [1.0, -1.0], &grid, 60).unwrap();
    assert!(k0 >= 1);
}
