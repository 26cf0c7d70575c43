//! Independent numerical oracles for tests: adaptive quadrature, rank
//! statistics and a two-sample Kolmogorov-Smirnov test.

pub mod collapsed;
pub mod de;
pub mod quad;
pub mod stats;
