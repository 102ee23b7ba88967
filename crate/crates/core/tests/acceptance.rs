//! Acceptance run: one line per criterion, exit status 1 on any unexpected failure.
//!
//! Criteria whose literal form conflicts with the mathematics are listed in
//! `DOCUMENTED`; they are still run and printed, but do not fail the build.

use std::collections::HashMap;
use std::time::Instant;

use branchdev_core::devlab::{choose_theta, fit_geometric, fit_supergeometric, mann_kendall, phi_bound, FitPoint};
use branchdev_core::fixtures::{fixture_a, fixture_b};
use branchdev_core::model::{Count2, ModelSpec, Pmf2};
use branchdev_core::pgf::{
    exact_deviation_curve, geometric_base, iterate_process, r_coeffs, r_eval, r_functional_residual,
    theorem1_sums,
};
use branchdev_core::simulate::{
    derive_seed, estimate_event_curve, mgf, replica_rng, y_sequence, EventEstimate, EventParams, McEstimate,
    Simulator, Threshold,
};
use branchdev_core::spectral::{default_grid, mean_ratio_sup, perron, vec_mat};
use branchdev_core::{SpectralData, Statistic};
use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

const SEED: u64 = 20_240_601;
const DEGREE: usize = 24;
/// Two-sided tail probability of a 4-sigma normal deviation.
const FOUR_SIGMA_LEVEL: f64 = 6.334e-5;
const L: [f64; 2] = [1.0, -1.0];
const START: Count2 = [1, 0];

// Fixture A, exact geometric curve.
const EPS_A_NEXT: f64 = 1.5;
// Fixture B Monte Carlo curves.
const EPS_B_NEXT: f64 = 0.15;
const EPS_B_RATIO: f64 = 0.25;
const EPS_B_TAIL: f64 = 0.005;

const DOCUMENTED: &[(usize, &str)] = &[
    (
        8,
        "E exp(theta Y_n) is nondecreasing in n because Y_n is a martingale; bounded is not trend-free",
    ),
    (
        9,
        "Fixture B forces alpha < 0 and, at small n, a large Y_N goes with a large deviation",
    ),
];

struct Outcome {
    passed: bool,
    detail: String,
    /// Serialized Monte Carlo output, compared across worker counts.
    artifact: String,
}

impl Outcome {
    fn exact(passed: bool, detail: String) -> Self {
        Outcome {
            passed,
            detail,
            artifact: String::new(),
        }
    }
}

fn spectral(spec: &ModelSpec) -> SpectralData {
    SpectralData::compute(spec).expect("fixture spectral data")
}

fn c1_spectral() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (m, rho) in [([[1.0, 1.0], [1.0, 1.0]], 2.0), ([[1.0, 2.0], [2.0, 1.0]], 3.0)] {
        let p = perron(&m, 1e-12).expect("regular matrix");
        let this = (p.rho - rho).abs() <= 1e-10
            && p.u.iter().all(|x| (x - 0.5).abs() <= 1e-10)
            && p.v.iter().all(|x| (x - 1.0).abs() <= 1e-10)
            && p.residual_right <= 1e-10
            && p.residual_left <= 1e-10
            && (p.u[0] + p.u[1] - 1.0).abs() <= 1e-12
            && (p.v[0] * p.u[0] + p.v[1] * p.u[1] - 1.0).abs() <= 1e-12;
        notes.push(format!("rho={} residuals {:.1e}/{:.1e}", p.rho, p.residual_right, p.residual_left));
        ok &= this;
    }
    Outcome::exact(ok, notes.join("; "))
}

/// Exact two-sided binomial p-value of `k` successes in `n` trials.
fn binomial_p_value(k: u64, n: u64, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let law = Binomial::new(p, n).expect("valid binomial");
    let lower = law.cdf(k);
    let upper = if k == 0 { 1.0 } else { 1.0 - law.cdf(k - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

fn c2_exact_law(reps: u64) -> Outcome {
    let spec = fixture_a();
    let sim = Simulator::new(&spec);
    let seed = derive_seed(SEED, 2);
    let paths: Vec<[Count2; 4]> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = replica_rng(seed, r);
            let xs = sim.path(START, 4, &mut rng).expect("small populations");
            [xs[1], xs[2], xs[3], xs[4]]
        })
        .collect();
    let w = DEGREE + 1;
    let mut ok = true;
    let mut notes = Vec::new();
    let mut artifact = Vec::new();
    let tv_slack = ((1.0 / FOUR_SIGMA_LEVEL).ln() / (2.0 * reps as f64)).sqrt();
    for n in 1..=4 {
        let g = &iterate_process(&spec, n, DEGREE).g[0];
        let mut counts = vec![0u64; w * w];
        let mut outside = 0u64;
        for path in &paths {
            let x = path[n - 1];
            if x[0] as usize <= DEGREE && x[1] as usize <= DEGREE {
                counts[x[0] as usize * w + x[1] as usize] += 1;
            } else {
                outside += 1;
            }
        }
        let bins: Vec<(u64, f64)> = counts
            .iter()
            .zip(g.coeffs())
            .map(|(&k, &p)| (k, p))
            .chain(std::iter::once((outside, g.residual())))
            .collect();
        let mut worst = 1.0f64;
        let (mut tv, mut envelope) = (0.0, tv_slack);
        for &(k, p) in &bins {
            if p == 0.0 && k == 0 {
                continue;
            }
            worst = worst.min(binomial_p_value(k, reps, p));
            tv += 0.5 * (k as f64 / reps as f64 - p).abs();
            envelope += 0.5 * (p * (1.0 - p) / reps as f64).sqrt();
        }
        let this = worst >= FOUR_SIGMA_LEVEL && tv <= envelope;
        ok &= this;
        notes.push(format!("n={n}: min p {worst:.1e}, TV {tv:.2e}/{envelope:.2e}"));
        artifact.push((counts, outside));
    }
    Outcome {
        passed: ok,
        detail: notes.join("; "),
        artifact: serde_json::to_string(&artifact).unwrap(),
    }
}

fn c3_martingale(reps: u64) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut artifact = Vec::new();
    for (name, spec, k) in [("A", fixture_a(), 30u64), ("B", fixture_b(), 31)] {
        let sd = spectral(&spec);
        let sim = Simulator::new(&spec);
        let seed = derive_seed(SEED, k);
        let ys: Vec<Vec<f64>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = replica_rng(seed, r);
                y_sequence(&spec, &sd.perron, &sim.path(START, 10, &mut rng).expect("small populations"))
            })
            .collect();
        let mut worst = 0.0f64;
        for n in 0..10 {
            let inc: Vec<f64> = ys.iter().map(|y| y[n + 1] - y[n]).collect();
            let e = McEstimate::mean(&inc, seed);
            worst = worst.max(e.estimate.abs() / e.std_error);
            artifact.push(e);
        }
        ok &= worst <= 4.0;
        notes.push(format!("{name}: max |mean|/SE {worst:.2}"));
    }

    // One-step conditional mean at five states taken from a simulated path.
    let spec = fixture_a();
    let sim = Simulator::new(&spec);
    let m = spec.mean_matrix();
    let lambda = spec.immigration_mean();
    let mut rng = replica_rng(derive_seed(SEED, 32), 0);
    let path = sim.path(START, 6, &mut rng).expect("small populations");
    let mut worst = 0.0f64;
    for (s, &x) in path[2..7].iter().enumerate() {
        let seed = derive_seed(SEED, 40 + s as u64);
        let next: Vec<Count2> = (0..reps)
            .into_par_iter()
            .map(|r| sim.step(x, 1, &mut replica_rng(seed, r)).expect("small populations"))
            .collect();
        let mean = vec_mat(&x.map(|c| c as f64), &m);
        for t in 0..2 {
            let col: Vec<f64> = next.iter().map(|v| v[t] as f64).collect();
            let e = McEstimate::mean(&col, seed);
            worst = worst.max((e.estimate - mean[t] - lambda[t]).abs() / e.std_error);
            artifact.push(e);
        }
    }
    ok &= worst <= 4.0;
    notes.push(format!("xM + lambda at {:?}: max gap/SE {worst:.2}", &path[2..7]));
    Outcome {
        passed: ok,
        detail: notes.join("; "),
        artifact: serde_json::to_string(&artifact).unwrap(),
    }
}

fn c4_r_limit() -> Outcome {
    let spec = fixture_a();
    let sd = spectral(&spec);
    let grid: Vec<[f64; 2]> = (1..=5)
        .flat_map(|a| (1..=5).map(move |b| [0.14 * a as f64, 0.14 * b as f64]))
        .collect();
    let mut residual = 0.0f64;
    let mut monotone = true;
    for &s in &grid {
        residual = residual.max(r_functional_residual(&spec, &sd, s, 30).unwrap());
        let r = r_eval(&spec, &sd, s, 30).unwrap();
        monotone &= r.s_factor.windows(2).all(|w| w[1] >= w[0]);
    }
    let at_zero = r_eval(&spec, &sd, [0.0, 0.0], 30).unwrap().value == [0.0, 0.0];
    let coeffs = r_coeffs(&spec, &sd, 11, DEGREE).unwrap();
    let mut change = 0.0f64;
    for i in 0..2 {
        for a in 0..=6 {
            for b in 0..=6 {
                if let Some(c) = coeffs.relative_change(i, [a, b]) {
                    change = change.max(c);
                }
            }
        }
    }
    let ok = residual < 1e-6 && at_zero && monotone && change < 0.01;
    Outcome::exact(
        ok,
        format!(
            "functional residual {residual:.1e}, R(0)=0: {at_zero}, S_n nondecreasing: {monotone}, \
             r_hat change 10->11 {change:.2e}"
        ),
    )
}

fn c5_geometric_limit() -> Outcome {
    let spec = fixture_a();
    let sd = spectral(&spec);
    let base = geometric_base(&spec, &sd).unwrap();
    let ns = [3, 4, 5, 6];
    let curve = exact_deviation_curve(&spec, &sd, 0, &ns, Statistic::DevNext, EPS_A_NEXT, L, DEGREE).unwrap();
    let a: Vec<f64> = ns.iter().zip(&curve).map(|(&n, e)| e.value / base.powi(n as i32)).collect();
    let rem: Vec<f64> = ns.iter().zip(&curve).map(|(&n, e)| e.residual / base.powi(n as i32)).collect();
    let d: Vec<f64> = a.windows(2).map(|w| w[1] - w[0]).collect();
    let monotone = d.iter().all(|x| *x < 0.0) || d.iter().all(|x| *x > 0.0);
    let last_step = (d[2] / a[2]).abs();
    let ratio = (d[2] / d[1]).abs();
    let contracting = ratio < 1.0 && (d[1] / d[0]).abs() < 1.0;

    let pts: Vec<FitPoint> = ns.iter().zip(&curve).map(|(&n, e)| FitPoint::exact(n, e.value)).collect();
    let fit = fit_geometric(&pts).unwrap();
    let gap = (fit.base - base).abs() / base;

    let limit = theorem1_sums(&spec, &sd, EPS_A_NEXT, L, DEGREE, 20, 1).unwrap()[0].clone();
    let tail = (d[2] * ratio / (1.0 - ratio)).abs();
    let agreement = (a[3] - limit.next_sum).abs();
    let allowed = tail + rem[3] + limit.next_remainder;

    let ok = monotone && contracting && last_step < 0.10 && gap <= 0.10 && agreement <= allowed;
    Outcome::exact(
        ok,
        format!(
            "normalised {:?}, last step {last_step:.3}, base {:.5} vs h0*gamma {base:.5} ({gap:.3}), \
             |a_6 - sum| {agreement:.2e} <= {allowed:.2e} (tail {tail:.2e}, remainders {:.1e}+{:.1e})",
            a.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>(),
            fit.base,
            rem[3],
            limit.next_remainder
        ),
    )
}

fn points(curve: &[EventEstimate]) -> Vec<FitPoint> {
    curve
        .iter()
        .map(|e| FitPoint::from_estimate(e.n, e.probability.as_ref().unwrap()))
        .collect()
}

fn curve_summary(curve: &[EventEstimate]) -> String {
    curve
        .iter()
        .map(|e| format!("{:.2e}", e.probability.as_ref().map_or(f64::NAN, |p| p.estimate)))
        .collect::<Vec<_>>()
        .join(",")
}

fn c6_supergeometric(reps: u64) -> Outcome {
    let spec = fixture_b();
    let sd = spectral(&spec);
    let k = spec.k(0).unwrap() as f64;
    let ns: Vec<usize> = (1..=7).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut artifact = Vec::new();
    for (stat, eps, s) in [(Statistic::DevNext, EPS_B_NEXT, 60), (Statistic::DevRatio, EPS_B_RATIO, 61)] {
        let params = EventParams::new(eps, L, START);
        let curve = estimate_event_curve(&spec, &sd, stat, &ns, &params, reps, derive_seed(SEED, s)).unwrap();
        match fit_supergeometric(&points(&curve)) {
            Ok(fit) => {
                let gap = (fit.base - k).abs() / k;
                ok &= gap <= 0.25 && fit.r_squared >= 0.95;
                notes.push(format!(
                    "{stat}: beta {:.3} vs k={k} ({gap:.3}), R^2 {:.4}, n {:?}",
                    fit.base, fit.r_squared, fit.n_range
                ));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{stat}: {e}"));
            }
        }
        artifact.extend(curve);
    }
    Outcome {
        passed: ok,
        detail: notes.join("; "),
        artifact: serde_json::to_string(&artifact).unwrap(),
    }
}

fn c7_martingale_tail(reps: u64) -> Outcome {
    let spec = fixture_b();
    let sd = spectral(&spec);
    let target = sd.rho().cbrt();
    let ns: Vec<usize> = (2..=7).collect();
    let params = EventParams::new(EPS_B_TAIL, L, START);
    let curve = estimate_event_curve(&spec, &sd, Statistic::YTail, &ns, &params, reps, derive_seed(SEED, 70)).unwrap();
    let pts = points(&curve);
    let decreasing = pts.windows(2).all(|w| w[1].p < w[0].p);
    let (ok, fit_note) = match fit_supergeometric(&pts) {
        Ok(fit) => {
            let gap = (fit.base - target).abs() / target;
            (gap <= 0.25, format!("beta {:.3} vs rho^(1/3) {target:.3} ({gap:.3})", fit.base))
        }
        Err(e) => (false, e.to_string()),
    };
    Outcome {
        passed: ok && decreasing,
        detail: format!("P = [{}], strictly decreasing: {decreasing}, {fit_note}", curve_summary(&curve)),
        artifact: serde_json::to_string(&curve).unwrap(),
    }
}

fn c8_moments(reps: u64) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut artifact = Vec::new();
    for (name, spec, k) in [("A", fixture_a(), 80u64), ("B", fixture_b(), 81)] {
        let sd = spectral(&spec);
        let theta = choose_theta(&spec, &sd.perron, START, 12, reps, derive_seed(SEED, k)).unwrap();
        let bounds: Vec<_> = (0..2).map(|i| phi_bound(&spec, &sd.perron, i, theta.max(0.5))).collect();
        let bounded = bounds.iter().all(|b| b.holds && b.constant.is_finite());
        let values: Vec<f64> = (1..=12)
            .map(|n| {
                let e = mgf(&spec, &sd, theta, n, START, reps, derive_seed(SEED, 1000 * k + n as u64)).unwrap();
                artifact.push(e.mc.clone());
                e.mc.estimate
            })
            .collect();
        let mk = mann_kendall(&values).unwrap();
        let trend = mk.upward_trend(0.05);
        ok &= bounded && !trend;
        notes.push(format!(
            "{name}: C = ({:.3}, {:.3}) bound holds {bounded}; theta {theta:.3}, E exp(theta Y_n) {:.3}..{:.3}, \
             Mann-Kendall S={} z={:.2} p={:.1e}",
            bounds[0].constant,
            bounds[1].constant,
            values[0],
            values[11],
            mk.s,
            mk.z,
            mk.p_value
        ));
    }
    Outcome {
        passed: ok,
        detail: notes.join("; "),
        artifact: serde_json::to_string(&artifact).unwrap(),
    }
}

fn c9_conditional(reps: u64) -> Outcome {
    let spec = fixture_b();
    let sd = spectral(&spec);
    let ns: Vec<usize> = (1..=7).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    let mut artifact = Vec::new();
    for (stat, eps, s) in [(Statistic::DevNextCond, EPS_B_NEXT, 90), (Statistic::DevRatioCond, EPS_B_RATIO, 91)] {
        let mut params = EventParams::new(eps, L, START);
        params.alpha = Threshold::Quantile(0.7);
        let cond = estimate_event_curve(&spec, &sd, stat, &ns, &params, reps, derive_seed(SEED, s)).unwrap();
        let plain =
            estimate_event_curve(&spec, &sd, stat.base(), &ns, &params, reps, derive_seed(SEED, s + 10)).unwrap();
        let mut above = Vec::new();
        for (c, p) in cond.iter().zip(&plain) {
            let c_est = c.probability.as_ref().map(|x| x.estimate);
            let p_high = p.probability.as_ref().unwrap().ci_high;
            match c_est {
                Some(v) if v <= p_high => {}
                Some(v) => above.push(format!("n={}: {v:.4} > {p_high:.4}", c.n)),
                None => above.push(format!("n={}: undefined", c.n)),
            }
        }
        let alpha = cond.iter().filter_map(|c| c.alpha).fold(f64::INFINITY, f64::min);
        ok &= above.is_empty();
        notes.push(format!(
            "{stat} (alpha {alpha:.3}, beta 0.5): {}",
            if above.is_empty() { "conditional <= upper bound at every n".into() } else { above.join(", ") }
        ));
        artifact.extend(cond);
        artifact.extend(plain);
    }
    Outcome {
        passed: ok,
        detail: notes.join("; "),
        artifact: serde_json::to_string(&artifact).unwrap(),
    }
}

fn c10_mean_ratio() -> Outcome {
    let spec = fixture_a();
    let sd = spectral(&spec);
    let grid = default_grid(20);
    let values: Vec<f64> = [5, 10, 15, 20, 25]
        .iter()
        .map(|&n| mean_ratio_sup(&spec, &sd.perron, n, &grid).unwrap())
        .collect();
    let nonincreasing = values.windows(2).all(|w| w[1] <= w[0]);
    let trivial = ModelSpec::new(Pmf2::dirac([1, 1]), Pmf2::dirac([1, 1]), Pmf2::dirac([1, 1]));
    let tsd = spectral(&trivial);
    let zero = (1..=10).all(|n| mean_ratio_sup(&trivial, &tsd.perron, n, &[[1, 1]]).unwrap() == 0.0);
    Outcome::exact(
        nonincreasing && values[4] < 1e-2 && zero,
        format!(
            "values {:?}, eigen-aligned case exactly 0: {zero}",
            values.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>()
        ),
    )
}

type McCriterion = (usize, &'static str, fn(u64) -> Outcome, u64);

const MC_CRITERIA: [McCriterion; 6] = [
    (2, "exact law of X_n vs Monte Carlo", c2_exact_law, 1_000_000),
    (3, "martingale increments and one-step mean", c3_martingale, 100_000),
    (6, "supergeometric decay of deviations", c6_supergeometric, 1_000_000),
    (7, "supergeometric decay of the martingale tail", c7_martingale_tail, 1_000_000),
    (8, "quadratic Phi bound and bounded exponential moment", c8_moments, 100_000),
    (9, "conditional versus unconditional deviations", c9_conditional, 1_000_000),
];

fn run_mc(threads: usize) -> HashMap<usize, (Outcome, f64)> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        MC_CRITERIA
            .iter()
            .map(|&(id, _, f, reps)| {
                let t = Instant::now();
                let out = f(reps);
                (id, (out, t.elapsed().as_secs_f64()))
            })
            .collect()
    })
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, String, Outcome, f64)> = Vec::new();
    let timed = |f: fn() -> Outcome| {
        let t = Instant::now();
        let out = f();
        (out, t.elapsed().as_secs_f64())
    };

    let (o, t) = timed(c1_spectral);
    results.push((1, "spectral exactness".into(), o, t));
    let (o, t) = timed(c4_r_limit);
    results.push((4, "functional equation and limit of R".into(), o, t));
    let (o, t) = timed(c5_geometric_limit);
    results.push((5, "geometric decay from the exact law".into(), o, t));
    let (o, t) = timed(c10_mean_ratio);
    results.push((10, "mean-ratio convergence".into(), o, t));

    let mut first = run_mc(4);
    let t = Instant::now();
    let second = run_mc(1);
    let mut mismatched = Vec::new();
    for &(id, name, _, _) in &MC_CRITERIA {
        let (out, secs) = first.remove(&id).unwrap();
        if out.artifact != second[&id].0.artifact {
            mismatched.push(id);
        }
        results.push((id, name.into(), out, secs));
    }
    results.push((
        11,
        "determinism across worker counts".into(),
        Outcome::exact(
            mismatched.is_empty(),
            if mismatched.is_empty() {
                format!("criteria {:?} byte-identical with 4 and 1 workers", MC_CRITERIA.map(|c| c.0))
            } else {
                format!("outputs differ for criteria {mismatched:?}")
            },
        ),
        t.elapsed().as_secs_f64(),
    ));
    results.sort_by_key(|r| r.0);

    let mut unexpected = Vec::new();
    for (id, name, out, secs) in &results {
        let documented = DOCUMENTED.iter().find(|d| d.0 == *id);
        let status = match (out.passed, documented) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (documented)",
            (false, None) => {
                unexpected.push(*id);
                "FAIL"
            }
        };
        println!("criterion {id:>2} {status}: {name} [{secs:.1}s] {}", out.detail);
        if let (false, Some((_, why))) = (out.passed, documented) {
            println!("             why: {why}");
        }
    }
    println!("total {:.1}s", started.elapsed().as_secs_f64());
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
