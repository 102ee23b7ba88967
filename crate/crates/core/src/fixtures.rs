//! The two reference models shipped with the crate.

use crate::model::ModelSpec;

pub const FIXTURE_A_TOML: &str = include_str!("../fixtures/fixture_a.toml");
pub const FIXTURE_B_TOML: &str = include_str!("../fixtures/fixture_b.toml");

/// Geometric-regime model with `h0 = 1/2`.
pub fn fixture_a() -> ModelSpec {
    ModelSpec::from_toml_str(FIXTURE_A_TOML).expect("bundled fixture parses")
}

/// Supergeometric-regime model with deterministic immigration `(1, 1)`.
pub fn fixture_b() -> ModelSpec {
    ModelSpec::from_toml_str(FIXTURE_B_TOML).expect("bundled fixture parses")
}
