//! Two-type offspring and immigration laws, their moments, and hypothesis checks.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{self, JacobianLimit};

/// Number of particle types. The whole crate works with fixed-size pairs.
pub const TYPES: usize = 2;

pub type Vec2 = [f64; TYPES];
pub type Mat2 = [[f64; TYPES]; TYPES];
pub type Count2 = [u64; TYPES];

const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub j: [u32; TYPES],
    pub p: f64,
}

/// Which of the three laws of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Law {
    Offspring1,
    Offspring2,
    Immigration,
}

impl Law {
    pub fn name(self) -> &'static str {
        match self {
            Law::Offspring1 => "offspring.type1",
            Law::Offspring2 => "offspring.type2",
            Law::Immigration => "immigration",
        }
    }
}

impl fmt::Display for Law {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A finitely supported law on pairs of non-negative integers.
///
/// Atoms are kept in lexicographic order of `j`, which fixes the order used by
/// inverse-CDF sampling and by every enumeration in the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Pmf2 {
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
}

impl Pmf2 {
    pub fn new(name: &str, mut atoms: Vec<Atom>) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidLaw {
            law: name.to_string(),
            reason,
        };
        if atoms.is_empty() {
            return Err(invalid("no atoms".into()));
        }
        for a in &atoms {
            if !(a.p.is_finite() && a.p > 0.0) {
                return Err(invalid(format!("atom {:?} has weight {}", a.j, a.p)));
            }
        }
        atoms.sort_by_key(|a| a.j);
        if let Some(w) = atoms.windows(2).find(|w| w[0].j == w[1].j) {
            return Err(invalid(format!("atom {:?} listed twice", w[0].j)));
        }
        let sum: f64 = atoms.iter().map(|a| a.p).sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(invalid(format!("weights sum to {sum}, not 1")));
        }
        let mut acc = 0.0;
        let cumulative = atoms
            .iter()
            .map(|a| {
                acc += a.p;
                acc
            })
            .collect();
        Ok(Pmf2 { atoms, cumulative })
    }

    pub fn from_pairs(name: &str, pairs: &[([u32; TYPES], f64)]) -> Result<Self> {
        Self::new(name, pairs.iter().map(|&(j, p)| Atom { j, p }).collect())
    }

    /// The point mass at `j`.
    pub fn dirac(j: [u32; TYPES]) -> Self {
        Pmf2 {
            atoms: vec![Atom { j, p: 1.0 }],
            cumulative: vec![1.0],
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn mass_at(&self, j: [u32; TYPES]) -> f64 {
        self.atoms
            .binary_search_by_key(&j, |a| a.j)
            .map(|i| self.atoms[i].p)
            .unwrap_or(0.0)
    }

    /// Largest coordinate appearing in the support, per type.
    pub fn max_degree(&self) -> [u32; TYPES] {
        let mut out = [0; TYPES];
        for a in &self.atoms {
            for t in 0..TYPES {
                out[t] = out[t].max(a.j[t]);
            }
        }
        out
    }

    /// Generating function at `s` in `[0,1]^2`.
    pub fn pgf(&self, s: Vec2) -> Result<f64> {
        if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!("pgf argument {s:?} is outside [0,1]^2")));
        }
        Ok(self.pgf_unchecked(s))
    }

    pub(crate) fn pgf_unchecked(&self, s: Vec2) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.p * s[0].powi(a.j[0] as i32) * s[1].powi(a.j[1] as i32))
            .sum()
    }

    /// `log E[s^J]` given `log s`; coordinates may be `-inf`.
    pub fn log_pgf(&self, log_s: Vec2) -> f64 {
        let terms = self.atoms.iter().map(|a| {
            let mut t = a.p.ln();
            for k in 0..TYPES {
                if a.j[k] > 0 {
                    t += a.j[k] as f64 * log_s[k];
                }
            }
            t
        });
        log_sum_exp(terms)
    }

    pub fn mean(&self) -> Vec2 {
        let mut m = [0.0; TYPES];
        for a in &self.atoms {
            for t in 0..TYPES {
                m[t] += a.p * a.j[t] as f64;
            }
        }
        m
    }

    /// Covariance matrix of the two coordinates.
    pub fn covariance(&self) -> Mat2 {
        let m = self.mean();
        let mut c = [[0.0; TYPES]; TYPES];
        for a in &self.atoms {
            for r in 0..TYPES {
                for s in 0..TYPES {
                    c[r][s] += a.p * (a.j[r] as f64 - m[r]) * (a.j[s] as f64 - m[s]);
                }
            }
        }
        c
    }

    /// `E[exp(w . J)]`.
    pub fn mgf(&self, w: Vec2) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.p * (w[0] * a.j[0] as f64 + w[1] * a.j[1] as f64).exp())
            .sum()
    }

    /// Inverse-CDF lookup for a uniform `u` in `[0,1)`.
    pub fn quantile(&self, u: f64) -> [u32; TYPES] {
        let idx = self.cumulative.partition_point(|&c| c <= u);
        self.atoms[idx.min(self.atoms.len() - 1)].j
    }

    /// Draws one atom, consuming exactly one uniform from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [u32; TYPES] {
        self.quantile(rng.random::<f64>())
    }
}

pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Offspring laws for both types plus the immigration law.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub offspring: [Pmf2; TYPES],
    pub immigration: Pmf2,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileModel {
    offspring: FileOffspring,
    immigration: FileLaw,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOffspring {
    type1: FileLaw,
    type2: FileLaw,
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct FileLaw {
    atoms: Vec<Atom>,
}

#[derive(Serialize)]
struct LawView<'a> {
    atoms: &'a [Atom],
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        #[derive(Serialize)]
        struct Offspring<'a> {
            type1: LawView<'a>,
            type2: LawView<'a>,
        }
        let mut st = serializer.serialize_struct("ModelSpec", 2)?;
        st.serialize_field(
            "offspring",
            &Offspring {
                type1: LawView { atoms: self.offspring[0].atoms() },
                type2: LawView { atoms: self.offspring[1].atoms() },
            },
        )?;
        st.serialize_field("immigration", &LawView { atoms: self.immigration.atoms() })?;
        st.end()
    }
}

impl ModelSpec {
    pub fn new(offspring1: Pmf2, offspring2: Pmf2, immigration: Pmf2) -> Self {
        ModelSpec {
            offspring: [offspring1, offspring2],
            immigration,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: FileModel = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(ModelSpec::new(
            Pmf2::new(Law::Offspring1.name(), file.offspring.type1.atoms)?,
            Pmf2::new(Law::Offspring2.name(), file.offspring.type2.atoms)?,
            Pmf2::new(Law::Immigration.name(), file.immigration.atoms)?,
        ))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn law(&self, law: Law) -> &Pmf2 {
        match law {
            Law::Offspring1 => &self.offspring[0],
            Law::Offspring2 => &self.offspring[1],
            Law::Immigration => &self.immigration,
        }
    }

    pub fn pgf_eval(&self, law: Law, s: Vec2) -> Result<f64> {
        self.law(law).pgf(s)
    }

    /// `M[i][j]`: mean number of type-`j` children of a type-`i` parent.
    pub fn mean_matrix(&self) -> Mat2 {
        [self.offspring[0].mean(), self.offspring[1].mean()]
    }

    /// `A[i][j] = P_i(one child, of type j)`, the Jacobian of the offspring pgf at 0.
    pub fn jacobian_at_zero(&self) -> Mat2 {
        let unit = |j: usize| {
            let mut e = [0; TYPES];
            e[j] = 1;
            e
        };
        let mut a = [[0.0; TYPES]; TYPES];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.offspring[i].mass_at(unit(j));
            }
        }
        a
    }

    pub fn immigration_mean(&self) -> Vec2 {
        self.immigration.mean()
    }

    /// Probability that no immigrant arrives in a generation.
    pub fn h0(&self) -> f64 {
        self.immigration.mass_at([0; TYPES])
    }

    /// Smallest `k >= 2` with an offspring atom `k e_i` for a type-`i` parent.
    pub fn k(&self, i: usize) -> Option<u32> {
        axis_min(&self.offspring[i], i, 2)
    }

    /// Smallest `d >= 1` with an immigration atom `d e_i`.
    pub fn d(&self, i: usize) -> Option<u32> {
        axis_min(&self.immigration, i, 1)
    }

    pub fn moments(&self) -> Moments {
        Moments {
            mean_matrix: self.mean_matrix(),
            jacobian_at_zero: self.jacobian_at_zero(),
            immigration_mean: self.immigration_mean(),
            h0: self.h0(),
            offspring_covariance: [self.offspring[0].covariance(), self.offspring[1].covariance()],
            immigration_covariance: self.immigration.covariance(),
        }
    }

    /// True when no offspring law can produce zero children.
    pub fn offspring_never_zero(&self) -> bool {
        self.offspring.iter().all(|law| law.mass_at([0; TYPES]) == 0.0)
    }

    /// Offspring part of the minimum-size condition: each type-`i` parent has a
    /// pure axis atom and never fewer than `k_i` type-`i` children.
    pub fn offspring_minimum_holds(&self) -> bool {
        (0..TYPES).all(|i| match self.k(i) {
            Some(k) => self.offspring[i].atoms().iter().all(|a| a.j[i] >= k),
            None => false,
        })
    }
}

fn axis_min(law: &Pmf2, axis: usize, from: u32) -> Option<u32> {
    law.atoms()
        .iter()
        .filter(|a| a.j[axis] >= from && (0..TYPES).all(|t| t == axis || a.j[t] == 0))
        .map(|a| a.j[axis])
        .min()
}

#[derive(Clone, Debug, Serialize)]
pub struct Moments {
    pub mean_matrix: Mat2,
    pub jacobian_at_zero: Mat2,
    pub immigration_mean: Vec2,
    pub h0: f64,
    pub offspring_covariance: [Mat2; TYPES],
    pub immigration_covariance: Mat2,
}

/// One hypothesis flag with the numbers that decided it.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub holds: bool,
    pub evidence: String,
}

impl Check {
    fn new(holds: bool, evidence: impl Into<String>) -> Self {
        Check {
            holds,
            evidence: evidence.into(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub h0: f64,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub k: [Option<u32>; TYPES],
    pub d: [Option<u32>; TYPES],
    pub geometric_d: u32,
    /// `h0 > 0`.
    pub immigration_can_vanish: Check,
    /// `A^n / gamma^n` converges to a non-zero limit with `0 < gamma < 1`.
    pub jacobian_limit: Check,
    /// Always true for finitely supported laws.
    pub exponential_moments: Check,
    /// Pure axis atoms exist: offspring of size >= 2 and immigration of size >= 1, on both axes.
    pub axis_atoms: Check,
    /// No mass below the axis minima, for offspring (`k_i`) and immigration (`d_i`).
    pub minimum_sizes: Check,
    /// The offspring halves of the two conditions above, which are what the
    /// supergeometric analysis of the deviation events actually uses.
    pub offspring_axis_minimum: Check,
    pub supercritical: Check,
    pub positively_regular: Check,
    /// `h0 * gamma * rho^d > 1` for `d = geometric_d`.
    pub geometric_regime: Check,
    /// No offspring law charges the empty family.
    pub no_extinction: Check,
}

/// Reports every hypothesis flag; never rejects a model.
pub fn validate(spec: &ModelSpec, geometric_d: u32) -> HypothesisReport {
    let h0 = spec.h0();
    let m = spec.mean_matrix();
    let perron = spectral::perron(&m, spectral::DEFAULT_TOL);
    let regular = spectral::regularity_power(&m);
    let limit = spectral::gamma_p0(&spec.jacobian_at_zero(), spectral::DEFAULT_TOL, spectral::DEFAULT_N_MAX);

    let rho = perron.as_ref().ok().map(|p| p.rho);
    let (gamma, jacobian_limit) = match &limit {
        JacobianLimit::Converged(g) => (
            Some(g.gamma),
            Check::new(
                g.gamma > 0.0 && g.gamma < 1.0,
                format!("gamma = {:.6e}, converged after {} steps", g.gamma, g.steps),
            ),
        ),
        JacobianLimit::Fails { gamma, reason } => (*gamma, Check::new(false, reason.clone())),
    };

    let k = [spec.k(0), spec.k(1)];
    let d = [spec.d(0), spec.d(1)];
    let offspring_axes = k.iter().all(Option::is_some);
    let immigration_axes = d.iter().all(Option::is_some);
    let below = |law: &Pmf2, axis: usize, min: Option<u32>| -> f64 {
        match min {
            Some(m) => law.atoms().iter().filter(|a| a.j[axis] < m).fold(0.0, |acc, a| acc + a.p),
            None => f64::NAN,
        }
    };
    let off_below = [below(&spec.offspring[0], 0, k[0]), below(&spec.offspring[1], 1, k[1])];
    let imm_below = [below(&spec.immigration, 0, d[0]), below(&spec.immigration, 1, d[1])];
    let offspring_min = off_below.iter().all(|&x| x == 0.0);
    let immigration_min = imm_below.iter().all(|&x| x == 0.0);

    let supercritical = match rho {
        Some(r) => Check::new(r > 1.0, format!("rho = {r:.12}")),
        None => Check::new(false, "Perron root unavailable"),
    };
    let positively_regular = match regular {
        Some(p) => Check::new(true, format!("M^{p} > 0")),
        None => Check::new(false, format!("M^k has a zero entry for every k <= {}", 2 * TYPES * TYPES)),
    };
    let geometric_regime = match (rho, gamma) {
        (Some(r), Some(g)) => {
            let value = h0 * g * r.powi(geometric_d as i32);
            Check::new(value > 1.0, format!("h0*gamma*rho^{geometric_d} = {value:.6e}"))
        }
        _ => Check::new(false, "gamma or rho unavailable"),
    };
    let zero_mass = [spec.offspring[0].mass_at([0, 0]), spec.offspring[1].mass_at([0, 0])];
    let minima = |m: [Option<u32>; TYPES]| {
        let show = |x: Option<u32>| x.map_or("undefined".to_string(), |v| v.to_string());
        format!("({}, {})", show(m[0]), show(m[1]))
    };
    let (ks, ds) = (minima(k), minima(d));

    HypothesisReport {
        h0,
        rho,
        gamma,
        k,
        d,
        geometric_d,
        immigration_can_vanish: Check::new(h0 > 0.0, format!("h0 = {h0}")),
        jacobian_limit,
        exponential_moments: Check::new(true, "finite support"),
        axis_atoms: Check::new(
            offspring_axes && immigration_axes,
            format!("k = {ks}, d = {ds}"),
        ),
        minimum_sizes: Check::new(
            offspring_axes && immigration_axes && offspring_min && immigration_min,
            format!("offspring mass below k = {off_below:?}, immigration mass below d = {imm_below:?}"),
        ),
        offspring_axis_minimum: Check::new(
            offspring_axes && offspring_min,
            format!("k = {ks}, offspring mass below k = {off_below:?}"),
        ),
        supercritical,
        positively_regular,
        geometric_regime,
        no_extinction: Check::new(
            zero_mass.iter().all(|&x| x == 0.0),
            format!("P_i(no children) = {zero_mass:?}"),
        ),
    }
}
