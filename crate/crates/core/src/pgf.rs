//! Exact laws of `X_n` from generating-function iteration, the limits `R` and `G`,
//! and exact deviation probabilities with honest truncation error bars.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{dev_next, dev_ratio, Statistic};
use crate::model::{ModelSpec, Pmf2, Vec2, TYPES};
use crate::series::{compose_many, TruncatedSeries};
use crate::spectral::{self, SpectralData};

pub const DEFAULT_PHI_CAP: u32 = 30;
pub const DEFAULT_LIMIT_TOL: f64 = 1e-8;

/// Truncated generating functions at generation `n`: `f_n` per type, `g_n` per
/// starting type, and `prod_{k<n} h(f_k)`.
#[derive(Clone, Debug)]
pub struct Generation {
    pub n: usize,
    pub f: [TruncatedSeries; TYPES],
    pub g: [TruncatedSeries; TYPES],
    pub h_product: TruncatedSeries,
}

impl Generation {
    /// Generating function of `X_n` started from `X_0 = j`.
    pub fn from_state(&self, j: [u32; TYPES]) -> Result<TruncatedSeries> {
        let mut s = self.h_product.clone();
        for t in 0..TYPES {
            if j[t] > 0 {
                s = s.multiply(&self.f[t].pow(j[t])?)?;
            }
        }
        Ok(s)
    }

    /// True when the box holds no mass of `g_n` at all: the degree cap is too small.
    pub fn is_empty(&self) -> bool {
        self.g.iter().all(|g| g.stored_mass() == 0.0)
    }
}

/// Steps the generating functions forward one generation at a time.
pub struct Process {
    laws: [TruncatedSeries; 3],
    current: Generation,
}

impl Process {
    pub fn new(spec: &ModelSpec, degree: usize) -> Self {
        let identity = TruncatedSeries::identity(degree);
        Process {
            laws: [
                TruncatedSeries::from_pmf(&spec.offspring[0], degree),
                TruncatedSeries::from_pmf(&spec.offspring[1], degree),
                TruncatedSeries::from_pmf(&spec.immigration, degree),
            ],
            current: Generation {
                n: 0,
                g: identity.clone(),
                f: identity,
                h_product: TruncatedSeries::constant(degree, 1.0),
            },
        }
    }

    pub fn current(&self) -> &Generation {
        &self.current
    }

    pub fn advance(&mut self) -> &Generation {
        let [f1, f2, h] = &self.laws;
        let mut next = compose_many(&[f1, f2, h], &self.current.f)
            .expect("series share one degree")
            .into_iter();
        let (f1, f2, hf) = (next.next().unwrap(), next.next().unwrap(), next.next().unwrap());
        let product = self.current.h_product.multiply(&hf).expect("series share one degree");
        let g = [
            f1.multiply(&product).expect("series share one degree"),
            f2.multiply(&product).expect("series share one degree"),
        ];
        self.current = Generation {
            n: self.current.n + 1,
            f: [f1, f2],
            g,
            h_product: product,
        };
        &self.current
    }

    /// Advances until generation `n` (no-op if already there).
    pub fn advance_to(&mut self, n: usize) -> &Generation {
        while self.current.n < n {
            self.advance();
        }
        &self.current
    }
}

pub fn iterate_process(spec: &ModelSpec, n: usize, degree: usize) -> Generation {
    let mut p = Process::new(spec, degree);
    p.advance_to(n);
    p.current
}

fn check_unit_box(s: Vec2) -> Result<()> {
    if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::Domain(format!("argument {s:?} is outside [0,1]^2")));
    }
    Ok(())
}

fn offspring_at(spec: &ModelSpec, s: Vec2) -> Vec2 {
    [spec.offspring[0].pgf_unchecked(s), spec.offspring[1].pgf_unchecked(s)]
}

/// `f_k(s)` for `k = 0..=n`.
fn orbit(spec: &ModelSpec, s: Vec2, n: usize) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(s);
    for k in 0..n {
        out.push(offspring_at(spec, out[k]));
    }
    out
}

/// `g_n^{(i)}(s)` without truncation.
pub fn pointwise_g(spec: &ModelSpec, i: usize, s: Vec2, n: usize) -> Result<f64> {
    check_unit_box(s)?;
    if s == [1.0; TYPES] {
        // Every law is a probability measure; avoid the rounding in sum(p).
        return Ok(1.0);
    }
    let fs = orbit(spec, s, n);
    let product: f64 = fs[..n].iter().map(|&x| spec.immigration.pgf_unchecked(x)).product();
    Ok(fs[n][i] * product)
}

/// Per-`n` values of a normalised quantity and how fast they settle.
#[derive(Clone, Debug, Serialize)]
pub struct LimitDiagnostics {
    pub values: Vec<Vec2>,
    /// `steps[k]` is the relative sup-norm change from `values[k]` to `values[k + 1]`.
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub converged: bool,
}

impl LimitDiagnostics {
    fn new(values: Vec<Vec2>, tolerance: f64) -> Self {
        let steps: Vec<f64> = values
            .windows(2)
            .map(|w| {
                let scale = w[1].iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let diff = (0..TYPES)
                    .map(|t| {
                        if w[0][t] == w[1][t] {
                            0.0
                        } else {
                            (w[1][t] - w[0][t]).abs()
                        }
                    })
                    .fold(0.0, f64::max);
                if diff == 0.0 {
                    0.0
                } else {
                    diff / scale
                }
            })
            .collect();
        let converged = steps.last().is_some_and(|&s| s < tolerance);
        LimitDiagnostics {
            values,
            steps,
            tolerance,
            converged,
        }
    }

    pub fn last(&self) -> Vec2 {
        *self.values.last().expect("at least generation 0")
    }
}

/// `h0 * gamma`, or why it is unavailable.
pub fn geometric_base(spec: &ModelSpec, sd: &SpectralData) -> Result<f64> {
    let h0 = spec.h0();
    if h0 <= 0.0 {
        return Err(Error::TheoremDisabled("h0 = 0: immigration never vanishes".into()));
    }
    match &sd.jacobian_limit {
        spectral::JacobianLimit::Converged(g) => Ok(h0 * g.gamma),
        spectral::JacobianLimit::Fails { reason, .. } => Err(Error::TheoremDisabled(reason.clone())),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RLimit {
    /// `g_n(s) / (h0 gamma)^n`, per starting type.
    pub value: Vec2,
    /// `S_k(s) = h0^-k prod_{r<k} h(f_r(s))` for `k = 0..=n`.
    pub s_factor: Vec<f64>,
    pub diagnostics: LimitDiagnostics,
}

pub fn r_eval(spec: &ModelSpec, sd: &SpectralData, s: Vec2, n: usize) -> Result<RLimit> {
    let base = geometric_base(spec, sd)?;
    check_unit_box(s)?;
    if s == [1.0; TYPES] {
        return Err(Error::Domain("R is evaluated away from s = 1".into()));
    }
    let h0 = spec.h0();
    let fs = orbit(spec, s, n);
    let mut product = 1.0;
    let mut values = Vec::with_capacity(n + 1);
    let mut s_factor = Vec::with_capacity(n + 1);
    for (k, f) in fs.iter().enumerate() {
        let scale = base.powi(k as i32);
        values.push([f[0] * product / scale, f[1] * product / scale]);
        s_factor.push(product / h0.powi(k as i32));
        product *= spec.immigration.pgf_unchecked(*f);
    }
    let diagnostics = LimitDiagnostics::new(values, DEFAULT_LIMIT_TOL);
    Ok(RLimit {
        value: diagnostics.last(),
        s_factor,
        diagnostics,
    })
}

/// `||h(s) R_n(f(s)) - h0 gamma R_n(s)||_inf / ||R_n(s)||_inf`, zero where `R_n(s) = 0`.
pub fn r_functional_residual(spec: &ModelSpec, sd: &SpectralData, s: Vec2, n: usize) -> Result<f64> {
    let base = geometric_base(spec, sd)?;
    let at_s = r_eval(spec, sd, s, n)?.value;
    let at_fs = r_eval(spec, sd, offspring_at(spec, s), n)?.value;
    let h = spec.immigration.pgf_unchecked(s);
    let scale = at_s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = (0..TYPES)
        .map(|t| (h * at_fs[t] - base * at_s[t]).abs())
        .fold(0.0, f64::max);
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// `P_i(X_n = j) / (h0 gamma)^n` at generations `n - 1` and `n`.
#[derive(Clone, Debug)]
pub struct RCoeffs {
    pub n: usize,
    pub current: [TruncatedSeries; TYPES],
    pub previous: [TruncatedSeries; TYPES],
    /// Mass of `g_n^{(i)}` outside the box, on the same scale.
    pub tail: Vec2,
}

impl RCoeffs {
    pub fn value(&self, i: usize, j: [usize; TYPES]) -> f64 {
        self.current[i].coeff(j)
    }

    /// Relative change between generations `n - 1` and `n`; `None` where both vanish.
    pub fn relative_change(&self, i: usize, j: [usize; TYPES]) -> Option<f64> {
        let (now, before) = (self.current[i].coeff(j), self.previous[i].coeff(j));
        if now == 0.0 && before == 0.0 {
            None
        } else {
            Some((now - before).abs() / now.abs().max(before.abs()))
        }
    }
}

pub fn r_coeffs(spec: &ModelSpec, sd: &SpectralData, n: usize, degree: usize) -> Result<RCoeffs> {
    let base = geometric_base(spec, sd)?;
    if n == 0 {
        return Err(Error::Domain("r_coeffs needs n >= 1 to report a change".into()));
    }
    let mut process = Process::new(spec, degree);
    let scaled = |g: &TruncatedSeries, k: usize| {
        let mut s = g.clone().scaled(base.powi(-(k as i32)));
        s.set_coeff([0, 0], 0.0);
        s
    };
    let before = process.advance_to(n - 1).clone();
    let now = process.advance();
    let previous = [scaled(&before.g[0], n - 1), scaled(&before.g[1], n - 1)];
    let current = [scaled(&now.g[0], n), scaled(&now.g[1], n)];
    let tail = [0, 1].map(|i| now.g[i].residual() / base.powi(n as i32));
    Ok(RCoeffs {
        n,
        current,
        previous,
        tail,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GLimit {
    /// `log g_n^{(i)}(s) / k_i^n` per type; `-inf` where `g_n` vanishes.
    pub value: Vec2,
    pub diagnostics: LimitDiagnostics,
}

/// Offspring axis minima `(k_1, k_2)`, or why the supergeometric analysis is off.
pub fn offspring_minima(spec: &ModelSpec) -> Result<[u32; TYPES]> {
    if !spec.offspring_minimum_holds() {
        return Err(Error::TheoremDisabled(format!(
            "offspring minima undefined or violated (k = {:?})",
            [spec.k(0), spec.k(1)]
        )));
    }
    Ok([spec.k(0).unwrap(), spec.k(1).unwrap()])
}

pub fn g_eval(spec: &ModelSpec, s: Vec2, n: usize) -> Result<GLimit> {
    let k = offspring_minima(spec)?;
    check_unit_box(s)?;
    if s.contains(&0.0) {
        return Err(Error::Domain(format!("G needs s in (0,1]^2, got {s:?}")));
    }
    let values = if s == [1.0; TYPES] {
        vec![[0.0; TYPES]; n + 1]
    } else {
        let mut log_f = s.map(f64::ln);
        let mut log_product = 0.0;
        let mut values = Vec::with_capacity(n + 1);
        for step in 0..=n {
            values.push([0, 1].map(|t| (log_f[t] + log_product) / (k[t] as f64).powi(step as i32)));
            log_product += spec.immigration.log_pgf(log_f);
            log_f = [spec.offspring[0].log_pgf(log_f), spec.offspring[1].log_pgf(log_f)];
        }
        values
    };
    let diagnostics = LimitDiagnostics::new(values, DEFAULT_LIMIT_TOL);
    Ok(GLimit {
        value: diagnostics.last(),
        diagnostics,
    })
}

/// `|G_n(f(s)) - k_i G_n(s)|` per type.
pub fn g_functional_residual(spec: &ModelSpec, s: Vec2, n: usize) -> Result<Vec2> {
    let k = offspring_minima(spec)?;
    let at_s = g_eval(spec, s, n)?.value;
    let at_fs = g_eval(spec, offspring_at(spec, s), n)?.value;
    Ok([0, 1].map(|t| (at_fs[t] - k[t] as f64 * at_s[t]).abs()))
}

/// A probability known to lie in `[value, value + residual]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExactProbability {
    pub value: f64,
    pub residual: f64,
}

/// Dense law on a rectangle of pairs, grown by convolution with finite laws.
#[derive(Clone, Debug)]
struct Grid2 {
    dims: [usize; TYPES],
    data: Vec<f64>,
}

impl Grid2 {
    fn from_pmf(law: &Pmf2) -> Self {
        let deg = law.max_degree();
        let dims = [deg[0] as usize + 1, deg[1] as usize + 1];
        let mut data = vec![0.0; dims[0] * dims[1]];
        for a in law.atoms() {
            data[a.j[0] as usize * dims[1] + a.j[1] as usize] = a.p;
        }
        Grid2 { dims, data }
    }

    fn convolve(&self, law: &Pmf2) -> Self {
        let deg = law.max_degree();
        let dims = [self.dims[0] + deg[0] as usize, self.dims[1] + deg[1] as usize];
        let mut data = vec![0.0; dims[0] * dims[1]];
        for a in law.atoms() {
            let (da, db) = (a.j[0] as usize, a.j[1] as usize);
            for x in 0..self.dims[0] {
                let src = &self.data[x * self.dims[1]..(x + 1) * self.dims[1]];
                let dst = &mut data[(x + da) * dims[1] + db..(x + da) * dims[1] + db + self.dims[1]];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a.p * s;
                }
            }
        }
        Grid2 { dims, data }
    }

    fn mass_where(&self, mut event: impl FnMut([u64; TYPES]) -> bool) -> f64 {
        let mut total = 0.0;
        for (idx, &p) in self.data.iter().enumerate() {
            if p != 0.0 && event([(idx / self.dims[1]) as u64, (idx % self.dims[1]) as u64]) {
                total += p;
            }
        }
        total
    }
}

/// `phi(j) = P(|l.X_1 - l.(j M)| > eps (1.j) | X_0 = j)`, by exact convolution.
pub fn exact_phi(spec: &ModelSpec, j: [u32; TYPES], eps: f64, l: Vec2, cap: u32) -> Result<f64> {
    if j == [0; TYPES] {
        return Err(Error::Domain("phi needs a non-zero starting state".into()));
    }
    if j[0] + j[1] > cap {
        return Err(Error::Resource(format!(
            "|j|_1 = {} exceeds the exact-convolution cap {cap}; use the Monte Carlo estimator",
            j[0] + j[1]
        )));
    }
    let mut dist = Grid2::from_pmf(&spec.immigration);
    for t in 0..TYPES {
        for _ in 0..j[t] {
            dist = dist.convolve(&spec.offspring[t]);
        }
    }
    let m = spec.mean_matrix();
    let x = j.map(u64::from);
    Ok(dist.mass_where(|next| dev_next(&l, eps, &m, x, next)))
}

/// `phi(j)` for every `j` in the box `[0, D]^2`, row-major, with `phi(0) = 0`.
pub fn phi_table(spec: &ModelSpec, eps: f64, l: Vec2, degree: usize) -> Vec<f64> {
    let m = spec.mean_matrix();
    let w = degree + 1;
    let mut out = vec![0.0; w * w];
    let mut row_start = Grid2::from_pmf(&spec.immigration);
    for a in 0..w {
        if a > 0 {
            row_start = row_start.convolve(&spec.offspring[0]);
        }
        let mut dist = row_start.clone();
        for b in 0..w {
            if b > 0 {
                dist = dist.convolve(&spec.offspring[1]);
            }
            let x = [a as u64, b as u64];
            if a + b > 0 {
                out[a * w + b] = dist.mass_where(|next| dev_next(&l, eps, &m, x, next));
            }
        }
    }
    out
}

/// `phi_hat(j, k0) = P_j(|l.X_{k0} / 1.X_{k0} - l.v / 1.v| > eps)` with its truncation residual.
pub fn exact_phi_hat(
    spec: &ModelSpec,
    sd: &SpectralData,
    j: [u32; TYPES],
    k0: usize,
    eps: f64,
    l: Vec2,
    degree: usize,
    budget: f64,
) -> Result<ExactProbability> {
    if j == [0; TYPES] {
        return Err(Error::Domain("phi_hat needs a non-zero starting state".into()));
    }
    let law = iterate_process(spec, k0, degree).from_state(j)?;
    let out = ratio_event_mass(&law, sd, eps, l);
    if out.residual > budget {
        return Err(Error::Resource(format!(
            "truncation residual {:.3e} exceeds the budget {budget:e}; raise the degree cap",
            out.residual
        )));
    }
    Ok(out)
}

fn ratio_event_mass(law: &TruncatedSeries, sd: &SpectralData, eps: f64, l: Vec2) -> ExactProbability {
    let v = sd.perron.v;
    let value = law
        .entries()
        .filter(|&(j, c)| c != 0.0 && dev_ratio(&l, eps, &v, [j[0] as u64, j[1] as u64]))
        .map(|(_, c)| c)
        .sum();
    ExactProbability {
        value,
        residual: law.residual(),
    }
}

/// Chernoff-type bound on `sum_{j outside box} P_i(X_n = j) phi(j)`.
///
/// For `theta > 0`, `phi(j) <= iota(theta) prod_t m_t(theta)^{j_t}` with
/// `m_t = E_t exp(theta (+-(l.Z - l.M_t) - eps))` and `iota = E exp(+-theta l.I)`;
/// summing over the tail gives `iota (g_n(m) - stored_n(m))` whenever `m` lies in
/// the unit box.
fn next_tail_bound(spec: &ModelSpec, i: usize, g: &TruncatedSeries, n: usize, eps: f64, l: Vec2) -> f64 {
    let m = spec.mean_matrix();
    let tail_mass = g.residual();
    if tail_mass == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    for sign in [1.0, -1.0] {
        let mut best = tail_mass;
        for step in 0..160 {
            let theta = 1e-3 * 1.07f64.powi(step);
            let mt = [0, 1].map(|t| {
                let shift = -theta * sign * spectral::dot(&l, &m[t]) - theta * eps;
                spec.offspring[t].mgf([theta * sign * l[0], theta * sign * l[1]]) * shift.exp()
            });
            if mt.iter().any(|&x| !(x <= 1.0)) {
                continue;
            }
            let iota = spec.immigration.mgf([theta * sign * l[0], theta * sign * l[1]]);
            let full = pointwise_g(spec, i, mt, n).expect("inside the unit box");
            let stored = g.evaluate(mt).expect("inside the unit box");
            let bound = iota * ((full - stored).max(0.0) + 4.0 * f64::EPSILON * full);
            best = best.min(bound);
        }
        total += best;
    }
    total.min(tail_mass)
}

/// Exact `P_i(event at generation n)` for `n` in `ns`, unnormalised, with residuals.
pub fn exact_deviation_curve(
    spec: &ModelSpec,
    sd: &SpectralData,
    i: usize,
    ns: &[usize],
    statistic: Statistic,
    eps: f64,
    l: Vec2,
    degree: usize,
) -> Result<Vec<ExactProbability>> {
    let phi = match statistic {
        Statistic::DevNext => Some(phi_table(spec, eps, l, degree)),
        Statistic::DevRatio => None,
        other => {
            return Err(Error::Domain(format!("no exact evaluation for statistic `{other}`")));
        }
    };
    let mut process = Process::new(spec, degree);
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let g = &process.advance_to(n).g[i];
        out.push(match &phi {
            Some(phi) => ExactProbability {
                value: g.coeffs().iter().zip(phi).map(|(p, f)| p * f).sum(),
                residual: next_tail_bound(spec, i, g, n, eps, l),
            },
            None => ratio_event_mass(g, sd, eps, l),
        });
    }
    Ok(out)
}

/// Truncated limit sums for the two deviation statistics, for one starting type.
#[derive(Clone, Debug, Serialize)]
pub struct Theorem1Sums {
    /// `sum_j phi(j) r_hat_{i,j}` over `0 < |j|_inf <= D`.
    pub next_sum: f64,
    pub next_remainder: f64,
    /// `(h0 gamma)^{-k0} sum_j phi_hat(j, k0) r_hat_{i,j}`.
    pub ratio_sum: f64,
    pub ratio_remainder: f64,
}

pub fn theorem1_sums(
    spec: &ModelSpec,
    sd: &SpectralData,
    eps: f64,
    l: Vec2,
    degree: usize,
    n: usize,
    k0: usize,
) -> Result<[Theorem1Sums; TYPES]> {
    let base = geometric_base(spec, sd)?;
    if l[0] == l[1] {
        return Err(Error::Domain(format!("l = {l:?} needs l1 != l2")));
    }
    let law_k0 = iterate_process(spec, k0, degree);
    let gen_n = iterate_process(spec, n, degree);
    let scale_n = base.powi(-(n as i32));
    let phi = phi_table(spec, eps, l, degree);

    // phi_hat(j, k0) over the box, growing the starting state one particle at a time.
    let w = degree + 1;
    let mut phi_hat = vec![ExactProbability { value: 0.0, residual: 0.0 }; w * w];
    let mut row_start = law_k0.h_product.clone();
    for a in 0..w {
        if a > 0 {
            row_start = row_start.multiply(&law_k0.f[0])?;
        }
        let mut law = row_start.clone();
        for b in 0..w {
            if b > 0 {
                law = law.multiply(&law_k0.f[1])?;
            }
            if a + b > 0 {
                phi_hat[a * w + b] = ratio_event_mass(&law, sd, eps, l);
            }
        }
    }

    let k0_scale = base.powi(-(k0 as i32));
    Ok([0, 1].map(|i| {
        let g = &gen_n.g[i];
        let r: Vec<f64> = g
            .coeffs()
            .iter()
            .enumerate()
            .map(|(idx, c)| if idx == 0 { 0.0 } else { c * scale_n })
            .collect();
        let tail = g.residual() * scale_n;
        let next_sum = r.iter().zip(&phi).map(|(r, f)| r * f).sum();
        let next_remainder = next_tail_bound(spec, i, g, n, eps, l) * scale_n;
        let ratio_sum = k0_scale * r.iter().zip(&phi_hat).map(|(r, p)| r * p.value).sum::<f64>();
        let ratio_remainder =
            k0_scale * (r.iter().zip(&phi_hat).map(|(r, p)| r * p.residual).sum::<f64>() + tail);
        Theorem1Sums {
            next_sum,
            next_remainder,
            ratio_sum,
            ratio_remainder,
        }
    }))
}

/// Smallest `k0 >= 1` with `mean_ratio_sup(k0) < eps (1.v) / (2 (2 ||l|| + eps))` on `grid`.
pub fn choose_k0(
    spec: &ModelSpec,
    sd: &SpectralData,
    eps: f64,
    l: Vec2,
    grid: &[[u32; TYPES]],
    k_max: usize,
) -> Result<usize> {
    let norm = l[0].abs().max(l[1].abs());
    let v = sd.perron.v;
    let threshold = eps * (v[0] + v[1]) / (2.0 * (2.0 * norm + eps));
    for k in 1..=k_max {
        if spectral::mean_ratio_sup(spec, &sd.perron, k, grid)? < threshold {
            return Ok(k);
        }
    }
    Err(Error::Resource(format!(
        "mean-ratio bound stays above {threshold:e} up to k0 = {k_max}"
    )))
}
