//! Deviation events shared by the exact and Monte Carlo estimators, so both
//! evaluate the same floating-point expression.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::Error;
use crate::model::{Count2, Mat2, Vec2};
use crate::spectral::{dot, vec_mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Statistic {
    /// `|l.X_{n+1} - l.(X_n M)| > eps (1.X_n)`.
    DevNext,
    /// `|l.X_n / 1.X_n - l.v / 1.v| > eps`.
    DevRatio,
    /// `|Y_n - Y_{N_ref}| > eps`.
    YTail,
    /// `DevNext` given `Y_{N_ref} >= alpha`.
    DevNextCond,
    /// `DevRatio` given `Y_{N_ref} >= alpha`.
    DevRatioCond,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::DevNext,
        Statistic::DevRatio,
        Statistic::YTail,
        Statistic::DevNextCond,
        Statistic::DevRatioCond,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Statistic::DevNext => "dev-next",
            Statistic::DevRatio => "dev-ratio",
            Statistic::YTail => "y-tail",
            Statistic::DevNextCond => "dev-next-cond",
            Statistic::DevRatioCond => "dev-ratio-cond",
        }
    }

    pub fn is_conditional(self) -> bool {
        matches!(self, Statistic::DevNextCond | Statistic::DevRatioCond)
    }

    /// Whether evaluating the statistic at `n` needs the limit proxy `Y_{N_ref}`.
    pub fn needs_reference(self) -> bool {
        !matches!(self, Statistic::DevNext | Statistic::DevRatio)
    }

    /// The unconditional statistic behind a conditional one.
    pub fn base(self) -> Statistic {
        match self {
            Statistic::DevNextCond => Statistic::DevNext,
            Statistic::DevRatioCond => Statistic::DevRatio,
            s => s,
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Statistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Statistic::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| Error::Domain(format!("unknown statistic `{s}`")))
    }
}

fn as_f64(x: Count2) -> Vec2 {
    x.map(|c| c as f64)
}

/// One-step deviation of `next` from the mean `x M`, relative to the size of `x`.
/// An empty `x` never deviates.
pub fn dev_next(l: &Vec2, eps: f64, m: &Mat2, x: Count2, next: Count2) -> bool {
    let total = (x[0] + x[1]) as f64;
    if total == 0.0 {
        return false;
    }
    let mean = vec_mat(&as_f64(x), m);
    (dot(l, &as_f64(next)) - dot(l, &mean)).abs() > eps * total
}

/// Deviation of the type composition of `x` from that of `v`.
pub fn dev_ratio(l: &Vec2, eps: f64, v: &Vec2, x: Count2) -> bool {
    let total = (x[0] + x[1]) as f64;
    if total == 0.0 {
        return false;
    }
    (dot(l, &as_f64(x)) / total - dot(l, v) / (v[0] + v[1])).abs() > eps
}
