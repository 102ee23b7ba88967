//! Seeded Monte Carlo: paths, the martingale `Y_n`, deviation-event estimates and
//! the moment generating function of `Y_n`.
//!
//! Replica `r` of a run with seed `s` draws from ChaCha8 seeded with `s` on
//! stream `r`, and results are reduced in replica order, so estimates do not
//! depend on how rayon splits the work.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{dev_next, dev_ratio, Statistic};
use crate::model::{Count2, ModelSpec, Pmf2, Vec2, TYPES};
use crate::spectral::{dot, Perron, SpectralData};

pub const DEFAULT_POPULATION_CAP: u64 = 1_000_000_000_000;
pub const DEFAULT_REFERENCE_LAG: usize = 15;
const WILSON_Z: f64 = 1.959_963_984_540_054;

pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Mixes a run seed with a sub-run index (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sequential-binomial split of `count` trials over the atoms of one law.
struct Allocation {
    atoms: Vec<[u64; TYPES]>,
    /// Conditional probability of atom `k` given that atoms `< k` were not chosen.
    conditional: Vec<f64>,
}

impl Allocation {
    fn new(law: &Pmf2) -> Self {
        let mut remaining = 1.0;
        let mut conditional = Vec::with_capacity(law.atoms().len());
        for a in law.atoms() {
            conditional.push(if remaining > 0.0 { (a.p / remaining).clamp(0.0, 1.0) } else { 1.0 });
            remaining -= a.p;
        }
        Allocation {
            atoms: law.atoms().iter().map(|a| a.j.map(u64::from)).collect(),
            conditional,
        }
    }

    /// Adds the children of `count` parents to `out`; `None` on arithmetic overflow.
    fn allocate<R: Rng + ?Sized>(&self, mut count: u64, out: &mut Count2, rng: &mut R) -> Option<()> {
        let last = self.atoms.len() - 1;
        for (k, atom) in self.atoms.iter().enumerate() {
            if count == 0 {
                break;
            }
            let take = if k == last {
                count
            } else {
                Binomial::new(count, self.conditional[k]).expect("probability in [0,1]").sample(rng)
            };
            count -= take;
            for t in 0..TYPES {
                out[t] = out[t].checked_add(take.checked_mul(atom[t])?)?;
            }
        }
        Some(())
    }
}

/// Holds the per-law samplers for one model.
pub struct Simulator<'a> {
    spec: &'a ModelSpec,
    offspring: [Allocation; TYPES],
    cap: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(spec: &'a ModelSpec) -> Self {
        Self::with_cap(spec, DEFAULT_POPULATION_CAP)
    }

    pub fn with_cap(spec: &'a ModelSpec, cap: u64) -> Self {
        Simulator {
            spec,
            offspring: [Allocation::new(&spec.offspring[0]), Allocation::new(&spec.offspring[1])],
            cap,
        }
    }

    fn overflow(&self, generation: usize, total: u64) -> Error {
        Error::Overflow {
            generation,
            total,
            cap: self.cap,
        }
    }

    /// Children of the particles in `x`, without immigration.
    pub fn offspring_step<R: Rng + ?Sized>(&self, x: Count2, generation: usize, rng: &mut R) -> Result<Count2> {
        let mut next = [0; TYPES];
        for t in 0..TYPES {
            self.offspring[t]
                .allocate(x[t], &mut next, rng)
                .ok_or_else(|| self.overflow(generation, u64::MAX))?;
        }
        let total = next[0].saturating_add(next[1]);
        if total > self.cap {
            return Err(self.overflow(generation, total));
        }
        Ok(next)
    }

    pub fn immigration<R: Rng + ?Sized>(&self, rng: &mut R) -> Count2 {
        self.spec.immigration.sample(rng).map(u64::from)
    }

    /// `X_{n+1}` given `X_n = x`; `generation` is `n + 1`, used in overflow errors.
    pub fn step<R: Rng + ?Sized>(&self, x: Count2, generation: usize, rng: &mut R) -> Result<Count2> {
        let mut next = self.offspring_step(x, generation, rng)?;
        let imm = self.immigration(rng);
        for t in 0..TYPES {
            next[t] += imm[t];
        }
        let total = next[0].saturating_add(next[1]);
        if total > self.cap {
            return Err(self.overflow(generation, total));
        }
        Ok(next)
    }

    /// `X_0, ..., X_n` along one path.
    pub fn path<R: Rng + ?Sized>(&self, x0: Count2, n: usize, rng: &mut R) -> Result<Vec<Count2>> {
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(x0);
        for k in 0..n {
            xs.push(self.step(xs[k], k + 1, rng)?);
        }
        Ok(xs)
    }
}

/// Descendants of the initial particles (`z`) and of each immigration cohort.
#[derive(Clone, Debug, Serialize)]
pub struct Split {
    pub z: Vec<Count2>,
    /// `cohorts[k - 1][m - k]` is the size at generation `m` of the line started by `I_k`.
    pub cohorts: Vec<Vec<Count2>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub seed: u64,
    pub x: Vec<Count2>,
    pub split: Option<Split>,
}

impl Trajectory {
    /// Whether `Z_n + sum_k U_n^{(k)} = X_n` at every generation.
    pub fn split_is_conserved(&self) -> bool {
        let Some(split) = &self.split else {
            return true;
        };
        self.x.iter().enumerate().all(|(n, x)| {
            let mut sum = split.z[n];
            for (k, cohort) in split.cohorts.iter().enumerate() {
                if n > k {
                    for t in 0..TYPES {
                        sum[t] += cohort[n - k - 1][t];
                    }
                }
            }
            sum == *x
        })
    }
}

pub fn simulate_path(spec: &ModelSpec, n: usize, x0: Count2, seed: u64, track_split: bool) -> Result<Trajectory> {
    let sim = Simulator::new(spec);
    let mut rng = replica_rng(seed, 0);
    if !track_split {
        return Ok(Trajectory {
            seed,
            x: sim.path(x0, n, &mut rng)?,
            split: None,
        });
    }
    let mut z = vec![x0];
    let mut cohorts: Vec<Vec<Count2>> = Vec::new();
    let mut x = vec![x0];
    for k in 0..n {
        let generation = k + 1;
        z.push(sim.offspring_step(z[k], generation, &mut rng)?);
        for line in cohorts.iter_mut() {
            let last = *line.last().unwrap();
            line.push(sim.offspring_step(last, generation, &mut rng)?);
        }
        cohorts.push(vec![sim.immigration(&mut rng)]);
        let mut total = z[generation];
        for line in &cohorts {
            let last = line.last().unwrap();
            for t in 0..TYPES {
                total[t] += last[t];
            }
        }
        if total[0] + total[1] > sim.cap {
            return Err(sim.overflow(generation, total[0] + total[1]));
        }
        x.push(total);
    }
    Ok(Trajectory {
        seed,
        x,
        split: Some(Split { z, cohorts }),
    })
}

/// `Y_n = rho^-n [u.X_n - (rho^{n+1} - 1)/(rho - 1) u.lambda]`.
pub fn y_value(perron: &Perron, u_lambda: f64, n: usize, x: Count2) -> f64 {
    let rho = perron.rho;
    let rho_n = rho.powi(n as i32);
    let ux = dot(&perron.u, &x.map(|c| c as f64));
    (ux - (rho_n * rho - 1.0) / (rho - 1.0) * u_lambda) / rho_n
}

pub fn y_sequence(spec: &ModelSpec, perron: &Perron, x: &[Count2]) -> Vec<f64> {
    let u_lambda = dot(&perron.u, &spec.immigration_mean());
    x.iter().enumerate().map(|(n, &xn)| y_value(perron, u_lambda, n, xn)).collect()
}

/// A Monte Carlo estimate with its uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub reps: u64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
    /// Number of hits, for proportions.
    pub successes: Option<u64>,
}

impl McEstimate {
    /// Proportion `k / n` with a 95% Wilson interval.
    pub fn proportion(k: u64, n: u64, seed: u64) -> Self {
        let nf = n as f64;
        let p = k as f64 / nf;
        let z2 = WILSON_Z * WILSON_Z;
        let centre = (p + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
        let half = WILSON_Z / (1.0 + z2 / nf) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
        McEstimate {
            estimate: p,
            reps: n,
            std_error: (p * (1.0 - p) / nf).sqrt(),
            ci_low: (centre - half).max(0.0).min(p),
            ci_high: (centre + half).min(1.0).max(p),
            seed,
            successes: Some(k),
        }
    }

    /// Sample mean with a normal 95% interval.
    pub fn mean(values: &[f64], seed: u64) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        let se = (var / n).sqrt();
        McEstimate {
            estimate: mean,
            reps: values.len() as u64,
            std_error: se,
            ci_low: mean - WILSON_Z * se,
            ci_high: mean + WILSON_Z * se,
            seed,
            successes: None,
        }
    }
}

/// Threshold on `Y_{N_ref}` for the conditional statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Threshold {
    Value(f64),
    /// Empirical quantile of the simulated `Y_{N_ref}` at each `n`.
    Quantile(f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct EventParams {
    pub eps: f64,
    pub l: Vec2,
    pub start: Count2,
    /// `N_ref - n`.
    pub reference_lag: usize,
    pub alpha: Threshold,
}

impl EventParams {
    pub fn new(eps: f64, l: Vec2, start: Count2) -> Self {
        EventParams {
            eps,
            l,
            start,
            reference_lag: DEFAULT_REFERENCE_LAG,
            alpha: Threshold::Quantile(0.7),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EventEstimate {
    pub statistic: Statistic,
    pub n: usize,
    /// `None` when a conditional statistic has no conditioning hits.
    pub probability: Option<McEstimate>,
    /// Frequency of `Y_{N_ref} >= alpha`, for conditional statistics.
    pub conditioning: Option<McEstimate>,
    pub alpha: Option<f64>,
}

fn empirical_quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
    values[idx]
}

/// Runs `reps` replicas in parallel; `body` fills one replica's output slot.
/// The first failing replica (by index) determines the error.
fn run_replicas<T: Send + Clone>(
    reps: usize,
    init: T,
    body: impl Fn(u64, &mut T) -> Result<()> + Sync,
) -> Result<Vec<T>> {
    let mut out = vec![init; reps];
    let first_failure = AtomicUsize::new(usize::MAX);
    out.par_iter_mut().enumerate().for_each(|(r, slot)| {
        if body(r as u64, slot).is_err() {
            first_failure.fetch_min(r, Ordering::Relaxed);
        }
    });
    let failed = first_failure.into_inner();
    if failed != usize::MAX {
        let mut scratch = out[failed].clone();
        body(failed as u64, &mut scratch)?;
        unreachable!("replica {failed} failed in parallel but not when replayed");
    }
    Ok(out)
}

/// Estimates one statistic at every `n` in `ns`, reusing each replica's path for all `n`.
pub fn estimate_event_curve(
    spec: &ModelSpec,
    sd: &SpectralData,
    statistic: Statistic,
    ns: &[usize],
    params: &EventParams,
    reps: u64,
    seed: u64,
) -> Result<Vec<EventEstimate>> {
    if ns.is_empty() || reps == 0 {
        return Err(Error::Domain("need at least one generation and one replica".into()));
    }
    if ns.len() > 64 {
        return Err(Error::Domain("at most 64 generations per curve".into()));
    }
    if !(params.eps > 0.0) {
        return Err(Error::Domain(format!("eps must be positive, got {}", params.eps)));
    }
    let needs_y = statistic.needs_reference();
    if needs_y && params.reference_lag == 0 {
        return Err(Error::Domain("N_ref must exceed n".into()));
    }
    let base = statistic.base();
    let horizon = ns
        .iter()
        .map(|&n| match base {
            Statistic::DevNext => n + 1,
            Statistic::DevRatio => n,
            _ => n,
        })
        .chain(ns.iter().map(|&n| if needs_y { n + params.reference_lag } else { 0 }))
        .max()
        .unwrap();

    let sim = Simulator::new(spec);
    let m = sd.mean_matrix;
    let perron = &sd.perron;
    let u_lambda = dot(&perron.u, &spec.immigration_mean());
    let k = ns.len();
    let slots = if needs_y { k } else { 0 };

    // Each replica records a bitmask of events (bit i for ns[i]) and, when
    // needed, Y_{n + lag} per n.
    let records = run_replicas(reps as usize, (0u64, vec![0.0; slots]), |r, (mask, ys)| {
        let mut rng = replica_rng(seed, r);
        let xs = sim.path(params.start, horizon, &mut rng)?;
        *mask = 0;
        for (i, &n) in ns.iter().enumerate() {
            let hit = match base {
                Statistic::DevNext => dev_next(&params.l, params.eps, &m, xs[n], xs[n + 1]),
                Statistic::DevRatio => dev_ratio(&params.l, params.eps, &perron.v, xs[n]),
                _ => {
                    let yn = y_value(perron, u_lambda, n, xs[n]);
                    let yr = y_value(perron, u_lambda, n + params.reference_lag, xs[n + params.reference_lag]);
                    (yn - yr).abs() > params.eps
                }
            };
            if hit {
                *mask |= 1 << i;
            }
            if needs_y {
                ys[i] = y_value(perron, u_lambda, n + params.reference_lag, xs[n + params.reference_lag]);
            }
        }
        Ok(())
    })?;

    let mut out = Vec::with_capacity(k);
    for (i, &n) in ns.iter().enumerate() {
        let hit = |mask: u64| mask & (1 << i) != 0;
        if !statistic.is_conditional() {
            let hits = records.iter().filter(|(mask, _)| hit(*mask)).count() as u64;
            out.push(EventEstimate {
                statistic,
                n,
                probability: Some(McEstimate::proportion(hits, reps, seed)),
                conditioning: None,
                alpha: None,
            });
            continue;
        }
        let alpha = match params.alpha {
            Threshold::Value(a) => a,
            Threshold::Quantile(q) => {
                let mut ys: Vec<f64> = records.iter().map(|(_, ys)| ys[i]).collect();
                empirical_quantile(&mut ys, q)
            }
        };
        let (mut given, mut joint) = (0u64, 0u64);
        for (mask, ys) in &records {
            if ys[i] >= alpha {
                given += 1;
                if hit(*mask) {
                    joint += 1;
                }
            }
        }
        out.push(EventEstimate {
            statistic,
            n,
            probability: (given > 0).then(|| McEstimate::proportion(joint, given, seed)),
            conditioning: Some(McEstimate::proportion(given, reps, seed)),
            alpha: Some(alpha),
        });
    }
    Ok(out)
}

pub fn estimate_event(
    spec: &ModelSpec,
    sd: &SpectralData,
    statistic: Statistic,
    n: usize,
    params: &EventParams,
    reps: u64,
    seed: u64,
) -> Result<EventEstimate> {
    Ok(estimate_event_curve(spec, sd, statistic, &[n], params, reps, seed)?.remove(0))
}

/// `Phi_i(theta) = E_i exp(theta (u.Z_1 - u_i rho))`, exact over the finite support.
pub fn phi_exact(spec: &ModelSpec, perron: &Perron, i: usize, theta: f64) -> f64 {
    if theta == 0.0 {
        return 1.0;
    }
    let shift = perron.u[i] * perron.rho;
    spec.offspring[i]
        .atoms()
        .iter()
        .map(|a| a.p * (theta * (dot(&perron.u, &a.j.map(f64::from)) - shift)).exp())
        .sum()
}

/// `Y_n` for each replica, started from `start`.
pub fn sample_y(spec: &ModelSpec, perron: &Perron, start: Count2, n: usize, reps: u64, seed: u64) -> Result<Vec<f64>> {
    let sim = Simulator::new(spec);
    let u_lambda = dot(&perron.u, &spec.immigration_mean());
    run_replicas(reps as usize, 0.0, |r, y| {
        let mut rng = replica_rng(seed, r);
        let xs = sim.path(start, n, &mut rng)?;
        *y = y_value(perron, u_lambda, n, xs[n]);
        Ok(())
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MgfEstimate {
    pub theta: f64,
    pub n: usize,
    /// Monte Carlo estimate of `E exp(theta Y_n)`.
    pub mc: McEstimate,
    /// Exact `Phi_i(theta)` per type.
    pub phi: Vec2,
}

pub fn mgf(
    spec: &ModelSpec,
    sd: &SpectralData,
    theta: f64,
    n: usize,
    start: Count2,
    reps: u64,
    seed: u64,
) -> Result<MgfEstimate> {
    if !(theta >= 0.0) {
        return Err(Error::Domain(format!("theta must be non-negative, got {theta}")));
    }
    let ys = sample_y(spec, &sd.perron, start, n, reps, seed)?;
    let values: Vec<f64> = ys.iter().map(|y| (theta * y).exp()).collect();
    Ok(MgfEstimate {
        theta,
        n,
        mc: McEstimate::mean(&values, seed),
        phi: [0, 1].map(|i| phi_exact(spec, &sd.perron, i, theta)),
    })
}
