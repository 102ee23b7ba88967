//! Decay-rate fits for probability-versus-generation curves, a trend test, and
//! the verdict battery that compares measured rates with predicted ones.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::events::Statistic;
use crate::model::{validate, Count2, HypothesisReport, ModelSpec, Vec2, TYPES};
use crate::pgf::{self, exact_deviation_curve};
use crate::simulate::{
    derive_seed, estimate_event_curve, mgf, phi_exact, sample_y, EventEstimate, EventParams, McEstimate,
    Threshold,
};
use crate::spectral::{Perron, SpectralData};

pub const MIN_FIT_POINTS: usize = 4;
/// Points whose standard error exceeds this fraction of the estimate are left out of fits.
pub const MAX_RELATIVE_SE: f64 = 0.5;
pub const EXACT_TOLERANCE: f64 = 0.10;
pub const MC_TOLERANCE: f64 = 0.25;
pub const MIN_R_SQUARED: f64 = 0.95;
pub const TREND_LEVEL: f64 = 0.05;
/// Coefficient of variation allowed for the moment estimate when choosing theta.
pub const THETA_CV: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FitPoint {
    pub n: usize,
    pub p: f64,
    /// Zero for exact values.
    pub se: f64,
}

impl FitPoint {
    pub fn exact(n: usize, p: f64) -> Self {
        FitPoint { n, p, se: 0.0 }
    }

    pub fn from_estimate(n: usize, e: &McEstimate) -> Self {
        FitPoint {
            n,
            p: e.estimate,
            se: e.std_error,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    /// `p_n ~ C b^n`.
    Geometric,
    /// `p_n ~ C mu^(beta^n)`.
    Supergeometric,
}

#[derive(Clone, Debug, Serialize)]
pub struct Excluded {
    pub n: usize,
    pub p: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateFit {
    pub kind: FitKind,
    /// `b` or `beta`.
    pub base: f64,
    /// `log C`.
    pub intercept: f64,
    /// `log mu`, supergeometric fits only.
    pub log_mu: Option<f64>,
    pub r_squared: f64,
    /// `(n, residual)` in the linearised scale: `log p` or `log(-log p)`.
    pub residuals: Vec<(usize, f64)>,
    pub n_range: [usize; 2],
    pub excluded: Vec<Excluded>,
}

fn admissible(points: &[FitPoint]) -> (Vec<FitPoint>, Vec<Excluded>) {
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for &pt in points {
        let reason = if !pt.p.is_finite() || !pt.se.is_finite() {
            Some("non-finite value".to_string())
        } else if pt.p <= 0.0 {
            Some("estimate is zero".to_string())
        } else if pt.se > MAX_RELATIVE_SE * pt.p {
            Some(format!("relative standard error {:.3} above {MAX_RELATIVE_SE}", pt.se / pt.p))
        } else {
            None
        };
        match reason {
            Some(reason) => excluded.push(Excluded { n: pt.n, p: pt.p, reason }),
            None => keep.push(pt),
        }
    }
    (keep, excluded)
}

/// Weights `1 / var(y)` from a delta-method derivative `dy/dp`; uniform if any point is exact.
fn weights(points: &[FitPoint], dy_dp: impl Fn(f64) -> f64) -> Vec<f64> {
    if points.iter().any(|pt| pt.se == 0.0) {
        return vec![1.0; points.len()];
    }
    points
        .iter()
        .map(|pt| {
            let sd = pt.se * dy_dp(pt.p).abs();
            1.0 / (sd * sd)
        })
        .collect()
}

struct LineFit {
    intercept: f64,
    slope: f64,
    r_squared: f64,
}

fn weighted_r_squared(y: &[f64], fitted: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let ss_tot: f64 = y.iter().zip(w).map(|(y, w)| w * (y - mean) * (y - mean)).sum();
    let ss_res: f64 = y.iter().zip(fitted).zip(w).map(|((y, f), w)| w * (y - f) * (y - f)).sum();
    if !ss_res.is_finite() {
        return 0.0;
    }
    if ss_tot <= 0.0 {
        return if ss_res <= 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

fn weighted_line(x: &[f64], y: &[f64], w: &[f64]) -> LineFit {
    let sw: f64 = w.iter().sum();
    let mx = x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let fitted: Vec<f64> = x.iter().map(|x| intercept + slope * x).collect();
    LineFit {
        intercept,
        slope,
        r_squared: weighted_r_squared(y, &fitted, w),
    }
}

fn n_range(points: &[FitPoint]) -> [usize; 2] {
    [points.first().unwrap().n, points.last().unwrap().n]
}

/// Weighted least squares of `log p_n` on `n`.
pub fn fit_geometric(points: &[FitPoint]) -> Result<RateFit> {
    let (pts, excluded) = admissible(points);
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let x: Vec<f64> = pts.iter().map(|pt| pt.n as f64).collect();
    let y: Vec<f64> = pts.iter().map(|pt| pt.p.ln()).collect();
    let w = weights(&pts, |p| 1.0 / p);
    let line = weighted_line(&x, &y, &w);
    Ok(RateFit {
        kind: FitKind::Geometric,
        base: line.slope.exp(),
        intercept: line.intercept,
        log_mu: None,
        r_squared: line.r_squared,
        residuals: pts
            .iter()
            .zip(&y)
            .map(|(pt, y)| (pt.n, y - line.intercept - line.slope * pt.n as f64))
            .collect(),
        n_range: n_range(&pts),
        excluded,
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col] == 0.0 || !a[pivot][col].is_finite() {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Gauss-Newton for `y_n = log(-a - b exp(t n))`, unweighted; `y_n = log(-log p_n)`.
fn refine_double_exponential(n: &[f64], y: &[f64], start: [f64; 3]) -> [f64; 3] {
    let inner = |q: &[f64; 3], n: f64| -q[0] - q[1] * (q[2] * n).exp();
    let ssr = |q: &[f64; 3]| -> f64 {
        n.iter()
            .zip(y)
            .map(|(&n, y)| {
                let g = inner(q, n);
                if g > 0.0 {
                    (y - g.ln()).powi(2)
                } else {
                    f64::INFINITY
                }
            })
            .sum()
    };
    let mut q = start;
    let mut current = ssr(&q);
    for _ in 0..500 {
        if current == 0.0 || !current.is_finite() {
            break;
        }
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&n, y) in n.iter().zip(y) {
            let e = (q[2] * n).exp();
            let g = inner(&q, n);
            let grad = [-1.0 / g, -e / g, -q[1] * n * e / g];
            let r = y - g.ln();
            for i in 0..3 {
                jtr[i] += grad[i] * r;
                for j in 0..3 {
                    jtj[i][j] += grad[i] * grad[j];
                }
            }
        }
        let Some(step) = solve3(jtj, jtr) else { break };
        let mut scale = 1.0;
        let mut improved = false;
        while scale > 1e-12 {
            let trial = [q[0] + scale * step[0], q[1] + scale * step[1], q[2] + scale * step[2]];
            let value = ssr(&trial);
            if value < current {
                improved = current - value > 1e-15 * current;
                q = trial;
                current = value;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    q
}

/// Fits `log p_n = log C + beta^n log mu` by least squares on `log(-log p_n)`.
///
/// With `C = 1` the model is the straight line `log(-log p_n) = log(-log mu) + n log beta`,
/// which gives the starting point; Gauss-Newton then frees `C`.
pub fn fit_supergeometric(points: &[FitPoint]) -> Result<RateFit> {
    if let Some(pt) = points.iter().find(|pt| pt.p >= 1.0) {
        return Err(Error::Domain(format!(
            "supergeometric fit needs p_n < 1, got {} at n = {}",
            pt.p, pt.n
        )));
    }
    let (pts, excluded) = admissible(points);
    if pts.len() < MIN_FIT_POINTS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_POINTS,
            got: pts.len(),
        });
    }
    let n: Vec<f64> = pts.iter().map(|pt| pt.n as f64).collect();
    let y: Vec<f64> = pts.iter().map(|pt| (-pt.p.ln()).ln()).collect();
    let w = vec![1.0; pts.len()];
    let line = weighted_line(&n, &y, &w);
    let [a, b, t] = refine_double_exponential(&n, &y, [0.0, -line.intercept.exp(), line.slope]);
    let fitted: Vec<f64> = n.iter().map(|n| (-a - b * (t * n).exp()).ln()).collect();
    Ok(RateFit {
        kind: FitKind::Supergeometric,
        base: t.exp(),
        intercept: a,
        log_mu: Some(b),
        r_squared: weighted_r_squared(&y, &fitted, &w),
        residuals: pts.iter().zip(&y).zip(&fitted).map(|((pt, y), f)| (pt.n, y - f)).collect(),
        n_range: n_range(&pts),
        excluded,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MannKendall {
    pub s: i64,
    pub variance: f64,
    pub z: f64,
    /// Two-sided.
    pub p_value: f64,
}

impl MannKendall {
    pub fn upward_trend(&self, level: f64) -> bool {
        self.s > 0 && self.p_value < level
    }
}

/// Mann-Kendall trend test with the tie-corrected variance.
pub fn mann_kendall(xs: &[f64]) -> Result<MannKendall> {
    let n = xs.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut ties = 0.0;
    let mut k = 0;
    while k < n {
        let mut e = k + 1;
        while e < n && sorted[e] == sorted[k] {
            e += 1;
        }
        let t = (e - k) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        k = e;
    }
    let nf = n as f64;
    let variance = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    let z = if variance <= 0.0 || s == 0 {
        0.0
    } else {
        (s - s.signum()) as f64 / variance.sqrt()
    };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(MannKendall {
        s,
        variance,
        z,
        p_value: (2.0 * (1.0 - normal.cdf(z.abs()))).min(1.0),
    })
}

/// Relative standard error of the mean of `exp(theta y)`, computed stably.
pub fn mgf_cv(ys: &[f64], theta: f64) -> f64 {
    let top = ys.iter().fold(f64::NEG_INFINITY, |m, &y| m.max(theta * y));
    let vals: Vec<f64> = ys.iter().map(|y| (theta * y - top).exp()).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt() / mean
}

/// Half the largest theta on a geometric grid for which the moment estimate at
/// generation `n` keeps a coefficient of variation below [`THETA_CV`].
pub fn choose_theta(spec: &ModelSpec, perron: &Perron, start: Count2, n: usize, reps: u64, seed: u64) -> Result<f64> {
    let ys = sample_y(spec, perron, start, n, reps, seed)?;
    let mut best = None;
    for k in 0..400 {
        let theta = 1e-3 * 1.05f64.powi(k);
        if mgf_cv(&ys, theta) < THETA_CV {
            best = Some(theta);
        } else {
            break;
        }
    }
    best.map(|t| t / 2.0)
        .ok_or_else(|| Error::Numerical("no theta on the grid keeps the estimate precise".into()))
}

#[derive(Clone, Debug, Serialize)]
pub struct PhiBound {
    /// `max (Phi_i(theta) - 1) / theta^2` over the fitting grid.
    pub constant: f64,
    /// Whether `Phi_i(theta) <= 1 + C theta^2` holds on a grid ten times finer.
    pub holds: bool,
}

/// Quadratic bound for `Phi_i` on `(0, theta_max]`.
pub fn phi_bound(spec: &ModelSpec, perron: &Perron, i: usize, theta_max: f64) -> PhiBound {
    let ratio = |theta: f64| (phi_exact(spec, perron, i, theta) - 1.0) / (theta * theta);
    // The ratio tends to var(u.Z_1) / 2 as theta -> 0.
    let cov = spec.offspring[i].covariance();
    let u = perron.u;
    let at_zero = 0.5 * (0..TYPES).map(|a| (0..TYPES).map(|b| u[a] * cov[a][b] * u[b]).sum::<f64>()).sum::<f64>();
    let constant = (1..=50)
        .map(|k| ratio(theta_max * k as f64 / 50.0))
        .fold(at_zero, f64::max);
    let holds = constant.is_finite()
        && (1..=500).all(|k| {
            let theta = theta_max * k as f64 / 500.0;
            phi_exact(spec, perron, i, theta) <= 1.0 + constant * theta * theta * (1.0 + 1e-6)
        });
    PhiBound { constant, holds }
}

/// Deviation thresholds per statistic.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpsSet {
    pub next: f64,
    pub ratio: f64,
    pub tail: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BatteryConfig {
    /// Type of the single starting particle (0-based).
    pub start_type: usize,
    pub eps: EpsSet,
    pub l: Vec2,
    pub degree: usize,
    pub reps: u64,
    pub mgf_reps: u64,
    pub seed: u64,
    pub geometric_d: u32,
    pub alpha_quantile: f64,
    /// Recorded with the conditional verdicts; it enters only the constants of the bound.
    pub beta: f64,
    pub reference_lag: usize,
    pub exact_ns: Vec<usize>,
    pub geometric_ns: Vec<usize>,
    pub supergeometric_ns: Vec<usize>,
    pub tail_ns: Vec<usize>,
    pub mgf_ns: Vec<usize>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            start_type: 0,
            eps: EpsSet {
                next: 0.5,
                ratio: 0.25,
                tail: 0.01,
            },
            l: [1.0, -1.0],
            degree: crate::series::DEFAULT_DEGREE,
            reps: 100_000,
            mgf_reps: 100_000,
            seed: 1,
            geometric_d: 1,
            alpha_quantile: 0.7,
            beta: 0.5,
            reference_lag: crate::simulate::DEFAULT_REFERENCE_LAG,
            exact_ns: (3..=6).collect(),
            geometric_ns: (3..=7).collect(),
            supergeometric_ns: (1..=7).collect(),
            tail_ns: (2..=7).collect(),
            mgf_ns: (1..=12).collect(),
        }
    }
}

impl BatteryConfig {
    fn start(&self) -> Count2 {
        let mut x = [0; TYPES];
        x[self.start_type] = 1;
        x
    }

    fn params(&self, eps: f64) -> EventParams {
        EventParams {
            eps,
            l: self.l,
            start: self.start(),
            reference_lag: self.reference_lag,
            alpha: Threshold::Quantile(self.alpha_quantile),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoremVerdict {
    pub theorem: &'static str,
    pub statistic: String,
    pub hypotheses: Vec<&'static str>,
    pub quantity: String,
    pub predicted: Option<f64>,
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub status: Status,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct NamedFit {
    pub theorem: &'static str,
    pub statistic: String,
    pub fit: RateFit,
}

/// Everything the battery measured besides the fits.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Measurements {
    pub exact: Vec<(String, Vec<(usize, pgf::ExactProbability)>)>,
    pub monte_carlo: Vec<EventEstimate>,
    pub mgf: Vec<crate::simulate::MgfEstimate>,
    pub mann_kendall: Option<MannKendall>,
    pub theta: Option<f64>,
    pub phi_bounds: Vec<PhiBound>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectralSummary {
    pub mean_matrix: crate::model::Mat2,
    pub jacobian_at_zero: crate::model::Mat2,
    pub perron: Perron,
    pub jacobian_limit: crate::spectral::JacobianLimit,
    pub h0_gamma: Option<f64>,
    pub rho_cube_root: f64,
}

impl SpectralSummary {
    pub fn new(spec: &ModelSpec, sd: &SpectralData) -> Self {
        SpectralSummary {
            mean_matrix: sd.mean_matrix,
            jacobian_at_zero: sd.jacobian_at_zero,
            perron: sd.perron.clone(),
            jacobian_limit: sd.jacobian_limit.clone(),
            h0_gamma: pgf::geometric_base(spec, sd).ok(),
            rho_cube_root: sd.rho().cbrt(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerdictReport {
    pub model: ModelSpec,
    pub spectral: SpectralSummary,
    pub hypotheses: HypothesisReport,
    pub config: BatteryConfig,
    pub verdicts: Vec<TheoremVerdict>,
    pub fits: Vec<NamedFit>,
    pub measurements: Measurements,
}

/// Theorem identifiers used in verdicts.
pub mod theorem {
    pub const GEOMETRIC: &str = "geometric-decay";
    pub const GEOMETRIC_REGIME: &str = "geometric-decay-regime";
    pub const SUPERGEOMETRIC: &str = "supergeometric-decay";
    pub const MOMENT_BOUND: &str = "martingale-moment-bound";
    pub const MARTINGALE_TAIL: &str = "martingale-tail";
    pub const CONDITIONAL: &str = "conditional-decay";
}

/// Hypotheses each theorem consumes, as field names of [`HypothesisReport`].
pub fn required_hypotheses(theorem: &str) -> Vec<&'static str> {
    let standing = ["supercritical", "positively_regular"];
    let mut out: Vec<&'static str> = standing.to_vec();
    match theorem {
        theorem::GEOMETRIC => out.extend(["immigration_can_vanish", "jacobian_limit"]),
        theorem::GEOMETRIC_REGIME => out.extend(["immigration_can_vanish", "jacobian_limit", "geometric_regime"]),
        theorem::SUPERGEOMETRIC => out.push("offspring_axis_minimum"),
        _ => out.push("exponential_moments"),
    }
    out
}

fn flag(report: &HypothesisReport, name: &str) -> bool {
    match name {
        "supercritical" => report.supercritical.holds,
        "positively_regular" => report.positively_regular.holds,
        "immigration_can_vanish" => report.immigration_can_vanish.holds,
        "jacobian_limit" => report.jacobian_limit.holds,
        "geometric_regime" => report.geometric_regime.holds,
        "offspring_axis_minimum" => report.offspring_axis_minimum.holds,
        "exponential_moments" => report.exponential_moments.holds,
        other => unreachable!("unknown hypothesis `{other}`"),
    }
}

/// The reason a theorem is skipped, decided from hypothesis flags alone.
pub fn gate(theorem: &str, report: &HypothesisReport) -> Option<String> {
    let failing: Vec<&str> = required_hypotheses(theorem)
        .into_iter()
        .filter(|h| !flag(report, h))
        .collect();
    (!failing.is_empty()).then(|| format!("skipped: {} fails", failing.join(", ")))
}

fn skipped(theorem: &'static str, statistic: &str, reason: String) -> TheoremVerdict {
    TheoremVerdict {
        theorem,
        statistic: statistic.to_string(),
        hypotheses: required_hypotheses(theorem),
        quantity: String::new(),
        predicted: None,
        measured: None,
        tolerance: None,
        status: Status::Skipped,
        detail: reason,
    }
}

fn relative_gap(measured: f64, predicted: f64) -> f64 {
    (measured - predicted).abs() / predicted
}

/// Verdict for a fitted rate: within `tolerance` of `predicted`, plus an optional R^2 floor.
fn rate_verdict(
    theorem: &'static str,
    statistic: &str,
    quantity: &str,
    predicted: f64,
    tolerance: f64,
    fit: Result<RateFit>,
    min_r2: Option<f64>,
    fits: &mut Vec<NamedFit>,
) -> TheoremVerdict {
    let mut v = TheoremVerdict {
        theorem,
        statistic: statistic.to_string(),
        hypotheses: required_hypotheses(theorem),
        quantity: quantity.to_string(),
        predicted: Some(predicted),
        measured: None,
        tolerance: Some(tolerance),
        status: Status::Fail,
        detail: String::new(),
    };
    match fit {
        Ok(fit) => {
            let gap = relative_gap(fit.base, predicted);
            let r2_ok = min_r2.is_none_or(|m| fit.r_squared >= m);
            v.measured = Some(fit.base);
            v.status = if gap <= tolerance && r2_ok { Status::Pass } else { Status::Fail };
            v.detail = format!(
                "relative gap {gap:.4}, R^2 {:.4}, n in {:?}, {} point(s) excluded",
                fit.r_squared,
                fit.n_range,
                fit.excluded.len()
            );
            fits.push(NamedFit {
                theorem,
                statistic: statistic.to_string(),
                fit,
            });
        }
        Err(e) => v.detail = format!("fit failed: {e}"),
    }
    v
}

fn mc_points(estimates: &[EventEstimate]) -> Vec<FitPoint> {
    estimates
        .iter()
        .filter_map(|e| e.probability.as_ref().map(|p| FitPoint::from_estimate(e.n, p)))
        .collect()
}

/// Runs the standard battery and emits one verdict per theorem and statistic.
pub fn verdicts(spec: &ModelSpec, sd: &SpectralData, config: &BatteryConfig) -> Result<VerdictReport> {
    if config.start_type >= TYPES {
        return Err(Error::Domain(format!("start type {} out of range", config.start_type)));
    }
    let report = validate(spec, config.geometric_d);
    let i = config.start_type;
    let mut out = Vec::new();
    let mut fits = Vec::new();
    let mut data = Measurements::default();
    let seed = |k: u64| derive_seed(config.seed, k);
    let next = Statistic::DevNext.id();
    let ratio = Statistic::DevRatio.id();

    // Geometric decay: exact curve for dev-next, Monte Carlo for dev-ratio.
    let geometric_skip = gate(theorem::GEOMETRIC, &report);
    let l_skip = (config.l[0] == config.l[1]).then(|| "skipped: l needs l1 != l2".to_string());
    let mut geometric_fits: Vec<(String, Result<RateFit>)> = Vec::new();
    if geometric_skip.is_none() && l_skip.is_none() {
        let curve = exact_deviation_curve(
            spec,
            sd,
            i,
            &config.exact_ns,
            Statistic::DevNext,
            config.eps.next,
            config.l,
            config.degree,
        )?;
        let pts: Vec<FitPoint> = config
            .exact_ns
            .iter()
            .zip(&curve)
            .filter(|(_, e)| e.residual <= MAX_RELATIVE_SE * e.value)
            .map(|(&n, e)| FitPoint::exact(n, e.value))
            .collect();
        data.exact.push((next.to_string(), config.exact_ns.iter().copied().zip(curve).collect()));
        geometric_fits.push((next.to_string(), fit_geometric(&pts)));

        let mc = estimate_event_curve(
            spec,
            sd,
            Statistic::DevRatio,
            &config.geometric_ns,
            &config.params(config.eps.ratio),
            config.reps,
            seed(1),
        )?;
        geometric_fits.push((ratio.to_string(), fit_geometric(&mc_points(&mc))));
        data.monte_carlo.extend(mc);
    }
    let h0_gamma = pgf::geometric_base(spec, sd).ok();
    for (thm, skip) in [
        (theorem::GEOMETRIC, geometric_skip.clone()),
        (theorem::GEOMETRIC_REGIME, gate(theorem::GEOMETRIC_REGIME, &report)),
    ] {
        for (k, stat) in [next, ratio].into_iter().enumerate() {
            if let Some(reason) = skip.clone().or(l_skip.clone()) {
                out.push(skipped(thm, stat, reason));
                continue;
            }
            let tolerance = if k == 0 { EXACT_TOLERANCE } else { MC_TOLERANCE };
            let fit = match &geometric_fits[k].1 {
                Ok(f) => Ok(f.clone()),
                Err(e) => Err(Error::Numerical(e.to_string())),
            };
            let mut sink = Vec::new();
            let verdict = rate_verdict(
                thm,
                stat,
                "geometric base h0*gamma",
                h0_gamma.expect("gated on h0 > 0 and gamma"),
                tolerance,
                fit,
                None,
                if thm == theorem::GEOMETRIC { &mut fits } else { &mut sink },
            );
            out.push(verdict);
        }
    }

    // Supergeometric decay of both deviation statistics.
    match gate(theorem::SUPERGEOMETRIC, &report) {
        Some(reason) => {
            out.push(skipped(theorem::SUPERGEOMETRIC, next, reason.clone()));
            out.push(skipped(theorem::SUPERGEOMETRIC, ratio, reason));
        }
        None => {
            let k_i = f64::from(report.k[i].expect("gated on k_i"));
            for (stat, eps, s) in [
                (Statistic::DevNext, config.eps.next, 2),
                (Statistic::DevRatio, config.eps.ratio, 3),
            ] {
                let mc = estimate_event_curve(
                    spec,
                    sd,
                    stat,
                    &config.supergeometric_ns,
                    &config.params(eps),
                    config.reps,
                    seed(s),
                )?;
                let fit = fit_supergeometric(&mc_points(&mc));
                data.monte_carlo.extend(mc);
                out.push(rate_verdict(
                    theorem::SUPERGEOMETRIC,
                    stat.id(),
                    "supergeometric base k_i",
                    k_i,
                    MC_TOLERANCE,
                    fit,
                    Some(MIN_R_SQUARED),
                    &mut fits,
                ));
            }
        }
    }

    // Bounded exponential moments of the martingale.
    match gate(theorem::MOMENT_BOUND, &report) {
        Some(reason) => out.push(skipped(theorem::MOMENT_BOUND, "y-mgf", reason)),
        None => out.push(moment_verdict(spec, sd, config, &mut data)?),
    }

    // Tail of the martingale.
    let tail_skip = gate(theorem::MARTINGALE_TAIL, &report);
    match tail_skip {
        Some(reason) => out.push(skipped(theorem::MARTINGALE_TAIL, Statistic::YTail.id(), reason)),
        None => {
            let mc = estimate_event_curve(
                spec,
                sd,
                Statistic::YTail,
                &config.tail_ns,
                &config.params(config.eps.tail),
                config.reps,
                seed(5),
            )?;
            let pts = mc_points(&mc);
            let decreasing = pts.windows(2).all(|w| w[1].p < w[0].p);
            let mut v = rate_verdict(
                theorem::MARTINGALE_TAIL,
                Statistic::YTail.id(),
                "supergeometric base rho^(1/3)",
                sd.rho().cbrt(),
                MC_TOLERANCE,
                fit_supergeometric(&pts),
                None,
                &mut fits,
            );
            if !decreasing {
                v.status = Status::Fail;
            }
            v.detail = format!("strictly decreasing: {decreasing}; {}", v.detail);
            data.monte_carlo.extend(mc);
            out.push(v);
        }
    }

    // Conditional decay against the unconditional curves.
    match gate(theorem::CONDITIONAL, &report) {
        Some(reason) => {
            for stat in [Statistic::DevNextCond, Statistic::DevRatioCond] {
                out.push(skipped(theorem::CONDITIONAL, stat.id(), reason.clone()));
            }
        }
        None => {
            for (stat, eps, s) in [
                (Statistic::DevNextCond, config.eps.next, 6),
                (Statistic::DevRatioCond, config.eps.ratio, 7),
            ] {
                let ns = &config.supergeometric_ns;
                let params = config.params(eps);
                let cond = estimate_event_curve(spec, sd, stat, ns, &params, config.reps, seed(s))?;
                let plain = estimate_event_curve(spec, sd, stat.base(), ns, &params, config.reps, seed(s + 10))?;
                out.push(conditional_verdict(stat, &cond, &plain, config.beta));
                data.monte_carlo.extend(cond);
                data.monte_carlo.extend(plain);
            }
        }
    }

    Ok(VerdictReport {
        model: spec.clone(),
        spectral: SpectralSummary::new(spec, sd),
        hypotheses: report,
        config: config.clone(),
        verdicts: out,
        fits,
        measurements: data,
    })
}

/// Largest excess of a conditional estimate over the unconditional upper bound, with the
/// smallest threshold used; `None` when a conditioning event was never hit.
pub fn conditional_excess(cond: &[EventEstimate], plain: &[EventEstimate]) -> Option<(f64, f64)> {
    let mut worst = f64::NEG_INFINITY;
    let mut alpha = f64::INFINITY;
    for (c, p) in cond.iter().zip(plain) {
        let c_est = c.probability.as_ref()?.estimate;
        let p_high = p.probability.as_ref()?.ci_high;
        worst = worst.max(c_est - p_high);
        alpha = alpha.min(c.alpha?);
    }
    Some((worst, alpha))
}

fn conditional_verdict(stat: Statistic, cond: &[EventEstimate], plain: &[EventEstimate], beta: f64) -> TheoremVerdict {
    let mut v = TheoremVerdict {
        theorem: theorem::CONDITIONAL,
        statistic: stat.id().to_string(),
        hypotheses: required_hypotheses(theorem::CONDITIONAL),
        quantity: "max over n of conditional estimate minus unconditional upper 95% bound".into(),
        predicted: Some(0.0),
        measured: None,
        tolerance: Some(0.0),
        status: Status::Skipped,
        detail: String::new(),
    };
    match conditional_excess(cond, plain) {
        None => v.detail = "skipped: conditioning event never observed".into(),
        Some((_, alpha)) if alpha <= 0.0 => {
            v.detail = format!("skipped: alpha = {alpha:.4} is not positive")
        }
        Some((excess, alpha)) => {
            v.measured = Some(excess);
            v.status = if excess <= 0.0 { Status::Pass } else { Status::Fail };
            v.detail = format!("alpha >= {alpha:.4}, beta = {beta}");
        }
    }
    v
}

fn moment_verdict(
    spec: &ModelSpec,
    sd: &SpectralData,
    config: &BatteryConfig,
    data: &mut Measurements,
) -> Result<TheoremVerdict> {
    let start = config.start();
    let n_top = *config.mgf_ns.iter().max().ok_or(Error::InsufficientData { needed: 3, got: 0 })?;
    let theta = choose_theta(spec, &sd.perron, start, n_top, config.mgf_reps, derive_seed(config.seed, 20))?;
    let mut values = Vec::with_capacity(config.mgf_ns.len());
    for &n in &config.mgf_ns {
        let e = mgf(spec, sd, theta, n, start, config.mgf_reps, derive_seed(config.seed, 100 + n as u64))?;
        values.push(e.mc.estimate);
        data.mgf.push(e);
    }
    let mk = mann_kendall(&values)?;
    let bounds: Vec<PhiBound> = (0..TYPES).map(|t| phi_bound(spec, &sd.perron, t, theta.max(0.5))).collect();
    let bounded = bounds.iter().all(|b| b.holds);
    let trend = mk.upward_trend(TREND_LEVEL);
    let verdict = TheoremVerdict {
        theorem: theorem::MOMENT_BOUND,
        statistic: "y-mgf".into(),
        hypotheses: required_hypotheses(theorem::MOMENT_BOUND),
        quantity: "Mann-Kendall two-sided p-value of E exp(theta Y_n) over n".into(),
        predicted: None,
        measured: Some(mk.p_value),
        tolerance: Some(TREND_LEVEL),
        status: if bounded && !trend { Status::Pass } else { Status::Fail },
        detail: format!(
            "theta = {theta:.4e}, S = {}, z = {:.3}, quadratic Phi bound holds: {bounded}",
            mk.s, mk.z
        ),
    };
    data.mann_kendall = Some(mk);
    data.theta = Some(theta);
    data.phi_bounds = bounds;
    Ok(verdict)
}
