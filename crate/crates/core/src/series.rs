//! Dense bivariate power series truncated to a box `[0, D]^2`.

use crate::error::{Error, Result};
use crate::model::{Pmf2, Vec2, TYPES};

pub const DEFAULT_DEGREE: usize = 24;

/// Coefficients `c[a][b]` of `s1^a s2^b` for `a, b <= D`.
///
/// `mass` is the value of the untruncated series at `(1, 1)`, so for a pgf the
/// residual `mass - sum(c)` is the probability that fell outside the box.
/// `exact` records whether every stored coefficient is exact; composition with a
/// truncated outer series only guarantees coefficients of total degree `<= D`.
/// `complete` marks a polynomial stored in full (nothing dropped).
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSeries {
    degree: usize,
    coeffs: Vec<f64>,
    mass: f64,
    exact: bool,
    complete: bool,
}

impl TruncatedSeries {
    pub fn zero(degree: usize) -> Self {
        TruncatedSeries {
            degree,
            coeffs: vec![0.0; (degree + 1) * (degree + 1)],
            mass: 0.0,
            exact: true,
            complete: true,
        }
    }

    pub fn constant(degree: usize, c: f64) -> Self {
        let mut s = Self::zero(degree);
        s.coeffs[0] = c;
        s.mass = c;
        s
    }

    /// The series `s_t`.
    pub fn variable(degree: usize, t: usize) -> Self {
        let mut j = [0; TYPES];
        j[t] = 1;
        Self::monomial(degree, j, 1.0)
    }

    pub fn monomial(degree: usize, j: [usize; TYPES], c: f64) -> Self {
        let mut s = Self::zero(degree);
        s.mass = c;
        if j.iter().all(|&x| x <= degree) {
            let i = s.index(j);
            s.coeffs[i] = c;
        } else {
            s.complete = false;
        }
        s
    }

    /// The identity vector `(s1, s2)`.
    pub fn identity(degree: usize) -> [Self; TYPES] {
        [Self::variable(degree, 0), Self::variable(degree, 1)]
    }

    pub fn from_pmf(law: &Pmf2, degree: usize) -> Self {
        let mut s = Self::zero(degree);
        s.mass = 1.0;
        for a in law.atoms() {
            let j = a.j.map(|x| x as usize);
            if j.iter().all(|&x| x <= degree) {
                let i = s.index(j);
                s.coeffs[i] = a.p;
            } else {
                s.complete = false;
            }
        }
        s
    }

    /// Builds a series from a full coefficient tensor (row-major, `(D+1)^2`).
    pub fn from_coeffs(degree: usize, coeffs: Vec<f64>, mass: f64) -> Result<Self> {
        if coeffs.len() != (degree + 1) * (degree + 1) {
            return Err(Error::Domain(format!(
                "expected {} coefficients for degree {degree}, got {}",
                (degree + 1) * (degree + 1),
                coeffs.len()
            )));
        }
        Ok(TruncatedSeries {
            degree,
            coeffs,
            mass,
            exact: true,
            complete: false,
        })
    }

    #[inline]
    fn index(&self, j: [usize; TYPES]) -> usize {
        j[0] * (self.degree + 1) + j[1]
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient of `s^j`, zero outside the box.
    pub fn coeff(&self, j: [usize; TYPES]) -> f64 {
        if j.iter().all(|&x| x <= self.degree) {
            self.coeffs[self.index(j)]
        } else {
            0.0
        }
    }

    pub fn set_coeff(&mut self, j: [usize; TYPES], c: f64) {
        let i = self.index(j);
        self.coeffs[i] = c;
    }

    /// Iterates `(j, coefficient)` over the box in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = ([usize; TYPES], f64)> + '_ {
        let w = self.degree + 1;
        self.coeffs.iter().enumerate().map(move |(i, &c)| ([i / w, i % w], c))
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn stored_mass(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    /// Mass outside the box, `mass - stored`, clamped at zero.
    pub fn residual(&self) -> f64 {
        (self.mass - self.stored_mass()).max(0.0)
    }

    pub fn is_exact(&self) -> bool {
        self.exact
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    /// Whether the stored coefficient at `j` is exact.
    pub fn is_exact_at(&self, j: [usize; TYPES]) -> bool {
        self.exact || j[0] + j[1] <= self.degree
    }

    /// Multiplies every coefficient and the mass by `c`.
    pub fn scaled(mut self, c: f64) -> Self {
        self.coeffs.iter_mut().for_each(|x| *x *= c);
        self.mass *= c;
        self
    }

    /// Value of the stored polynomial at `s` in `[0,1]^2`.
    pub fn evaluate(&self, s: Vec2) -> Result<f64> {
        if s.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Domain(format!("series argument {s:?} is outside [0,1]^2")));
        }
        Ok(self.evaluate_unchecked(s))
    }

    fn evaluate_unchecked(&self, s: Vec2) -> f64 {
        let w = self.degree + 1;
        let mut out = 0.0;
        for a in (0..w).rev() {
            let row = &self.coeffs[a * w..(a + 1) * w];
            let inner = row.iter().rev().fold(0.0, |acc, &c| acc * s[1] + c);
            out = out * s[0] + inner;
        }
        out
    }

    fn max_support(&self) -> [usize; TYPES] {
        let mut out = [0; TYPES];
        for (j, c) in self.entries() {
            if c != 0.0 {
                out[0] = out[0].max(j[0]);
                out[1] = out[1].max(j[1]);
            }
        }
        out
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.degree != other.degree {
            return Err(Error::Domain(format!(
                "series degrees differ: {} vs {}",
                self.degree, other.degree
            )));
        }
        Ok(())
    }

    /// Cauchy product truncated to the box.
    pub fn multiply(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let w = self.degree + 1;
        let mut out = vec![0.0; w * w];
        for a1 in 0..w {
            for b1 in 0..w {
                let x = self.coeffs[a1 * w + b1];
                if x == 0.0 {
                    continue;
                }
                for a2 in 0..w - a1 {
                    let src = &other.coeffs[a2 * w..a2 * w + (w - b1)];
                    let dst = &mut out[(a1 + a2) * w + b1..(a1 + a2) * w + w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += x * s;
                    }
                }
            }
        }
        let complete = self.complete && other.complete && {
            let (p, q) = (self.max_support(), other.max_support());
            p[0] + q[0] <= self.degree && p[1] + q[1] <= self.degree
        };
        Ok(TruncatedSeries {
            degree: self.degree,
            coeffs: out,
            mass: self.mass * other.mass,
            exact: self.exact && other.exact,
            complete,
        })
    }

    /// `self^k`, by repeated squaring.
    pub fn pow(&self, mut k: u32) -> Result<Self> {
        let mut base = self.clone();
        let mut acc = Self::constant(self.degree, 1.0);
        while k > 0 {
            if k & 1 == 1 {
                acc = acc.multiply(&base)?;
            }
            k >>= 1;
            if k > 0 {
                base = base.multiply(&base)?;
            }
        }
        Ok(acc)
    }

    fn add_scaled(&mut self, other: &Self, c: f64) {
        for (x, y) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *x += c * y;
        }
        self.mass += c * other.mass;
        self.exact &= other.exact;
        self.complete &= other.complete;
    }
}

/// `outer(inner[0], inner[1])` truncated to the box.
pub fn compose(outer: &TruncatedSeries, inner: &[TruncatedSeries; TYPES]) -> Result<TruncatedSeries> {
    let mut out = compose_many(&[outer], inner)?;
    Ok(out.pop().expect("one outer series"))
}

/// Composes several outer series with the same inner vector, sharing the powers
/// of the inner series.
pub fn compose_many(outers: &[&TruncatedSeries], inner: &[TruncatedSeries; TYPES]) -> Result<Vec<TruncatedSeries>> {
    let Some(first) = outers.first() else {
        return Ok(Vec::new());
    };
    let degree = first.degree;
    for s in outers.iter().copied().chain(inner.iter()) {
        first.check_shape(s)?;
    }
    let constant_free = inner.iter().all(|s| s.coeffs[0] == 0.0);
    let unit_mass = inner.iter().all(|s| (s.mass - 1.0).abs() <= 1e-12);
    for outer in outers {
        if !outer.complete && !constant_free {
            return Err(Error::Contract(
                "a truncated outer series needs inner series without constant term".into(),
            ));
        }
        if !outer.complete && !unit_mass {
            return Err(Error::Contract(
                "cannot propagate the mass of a truncated outer series through inner series of mass != 1".into(),
            ));
        }
    }

    let mut support = [0; TYPES];
    for outer in outers {
        let m = outer.max_support();
        support[0] = support[0].max(m[0]);
        support[1] = support[1].max(m[1]);
    }
    let powers = |s: &TruncatedSeries, k: usize| -> Result<Vec<TruncatedSeries>> {
        let mut v = vec![TruncatedSeries::constant(degree, 1.0)];
        for i in 1..=k {
            v.push(v[i - 1].multiply(s)?);
        }
        Ok(v)
    };
    let p1 = powers(&inner[0], support[0])?;
    let p2 = powers(&inner[1], support[1])?;
    let inner_mass = [inner[0].mass, inner[1].mass];
    let inner_exact = inner.iter().all(|s| s.exact);

    let w = degree + 1;
    let mut results = Vec::with_capacity(outers.len());
    for outer in outers {
        // sum_a inner1^a * (sum_b c_ab inner2^b)
        let mut acc = TruncatedSeries::zero(degree);
        for a in 0..=support[0].min(degree) {
            let mut q = TruncatedSeries::zero(degree);
            let mut any = false;
            for b in 0..=support[1].min(degree) {
                let c = outer.coeffs[a * w + b];
                if c != 0.0 {
                    q.add_scaled(&p2[b], c);
                    any = true;
                }
            }
            if any {
                let term = if a == 0 { q } else { p1[a].multiply(&q)? };
                acc.add_scaled(&term, 1.0);
            }
        }
        acc.mass = if unit_mass {
            outer.mass
        } else {
            outer.evaluate_unchecked(inner_mass)
        };
        acc.exact = inner_exact && outer.complete;
        acc.complete = acc.complete && outer.complete && inner.iter().all(|s| s.complete);
        results.push(acc);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::fixture_a;
    use std::collections::BTreeMap;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unit_and_monomial_products() {
        let law = &fixture_a().offspring[0];
        let a = TruncatedSeries::from_pmf(law, 6);
        let one = TruncatedSeries::constant(6, 1.0);
        assert_eq!(a.multiply(&one).unwrap().coeffs(), a.coeffs());
        let [s1, s2] = TruncatedSeries::identity(6);
        let p = s1.multiply(&s2).unwrap();
        for (j, c) in p.entries() {
            assert_eq!(c, if j == [1, 1] { 1.0 } else { 0.0 });
        }
        assert!(a.multiply(&TruncatedSeries::zero(5)).is_err());
    }

    #[test]
    fn product_matches_direct_convolution() {
        let spec = fixture_a();
        let (x, y) = (&spec.offspring[0], &spec.offspring[1]);
        let mut direct: BTreeMap<[usize; 2], f64> = BTreeMap::new();
        for a in x.atoms() {
            for b in y.atoms() {
                let j = [(a.j[0] + b.j[0]) as usize, (a.j[1] + b.j[1]) as usize];
                *direct.entry(j).or_default() += a.p * b.p;
            }
        }
        let prod = TruncatedSeries::from_pmf(x, 8)
            .multiply(&TruncatedSeries::from_pmf(y, 8))
            .unwrap();
        for (j, c) in prod.entries() {
            assert!(close(c, direct.get(&j).copied().unwrap_or(0.0), 1e-15), "{j:?}");
        }
        assert!(prod.residual() < 1e-15);
    }

    #[test]
    fn compose_with_identity_is_identity() {
        let law = &fixture_a().immigration;
        let h = TruncatedSeries::from_pmf(law, 10);
        let c = compose(&h, &TruncatedSeries::identity(10)).unwrap();
        for (x, y) in c.coeffs().iter().zip(h.coeffs()) {
            assert!(close(*x, *y, 1e-16));
        }
    }

    #[test]
    fn two_generations_match_enumeration() {
        let spec = fixture_a();
        let d = 12;
        let f = [
            TruncatedSeries::from_pmf(&spec.offspring[0], d),
            TruncatedSeries::from_pmf(&spec.offspring[1], d),
        ];
        let f2 = compose_many(&[&f[0], &f[1]], &f).unwrap();

        // Enumerate every first-generation outcome, then convolve the second generation.
        for i in 0..2 {
            let mut dist: BTreeMap<[u32; 2], f64> = BTreeMap::new();
            for first in spec.offspring[i].atoms() {
                let mut partial: BTreeMap<[u32; 2], f64> = BTreeMap::from([([0, 0], first.p)]);
                for t in 0..2 {
                    for _ in 0..first.j[t] {
                        let mut next = BTreeMap::new();
                        for (k, p) in &partial {
                            for a in spec.offspring[t].atoms() {
                                *next.entry([k[0] + a.j[0], k[1] + a.j[1]]).or_insert(0.0) += p * a.p;
                            }
                        }
                        partial = next;
                    }
                }
                for (k, p) in partial {
                    *dist.entry(k).or_default() += p;
                }
            }
            for (j, p) in dist {
                let got = f2[i].coeff([j[0] as usize, j[1] as usize]);
                assert!(close(got, p, 1e-15), "type {i} at {j:?}: {got} vs {p}");
            }
            assert!(f2[i].residual() < 1e-14);
        }
    }

    #[test]
    fn compose_constant_term_is_h0() {
        let spec = fixture_a();
        let d = 8;
        let h = TruncatedSeries::from_pmf(&spec.immigration, d);
        let f = [
            TruncatedSeries::from_pmf(&spec.offspring[0], d),
            TruncatedSeries::from_pmf(&spec.offspring[1], d),
        ];
        let hf = compose(&h, &f).unwrap();
        assert_eq!(hf.coeff([0, 0]), spec.h0());
    }

    #[test]
    fn truncated_outer_requires_constant_free_inner() {
        let d = 4;
        let spec = fixture_a();
        let f = TruncatedSeries::from_pmf(&spec.offspring[0], d).pow(5).unwrap();
        assert!(!f.is_complete());
        let h = TruncatedSeries::from_pmf(&spec.immigration, d);
        let inner = [h.clone(), h];
        assert!(matches!(compose(&f, &inner), Err(Error::Contract(_))));
    }

    #[test]
    fn pow_matches_repeated_product() {
        let s = TruncatedSeries::from_pmf(&fixture_a().offspring[1], 10);
        let mut direct = TruncatedSeries::constant(10, 1.0);
        for _ in 0..5 {
            direct = direct.multiply(&s).unwrap();
        }
        let fast = s.pow(5).unwrap();
        for (x, y) in fast.coeffs().iter().zip(direct.coeffs()) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn evaluate_matches_pgf_for_complete_series() {
        let law = &fixture_a().offspring[1];
        let s = TruncatedSeries::from_pmf(law, 5);
        let v = s.evaluate([0.3, 0.8]).unwrap();
        assert!(close(v, law.pgf([0.3, 0.8]).unwrap(), 1e-15));
        assert!(s.evaluate([1.2, 0.0]).is_err());
    }
}
