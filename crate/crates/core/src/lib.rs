//! Numerical tests for generalized conservation of Schrödinger heat
//! semigroups on rotationally symmetric model manifolds.

pub mod analysis;
pub mod config;
pub mod eigen;
pub mod expr;
pub mod manifold;
pub mod mesh;
pub mod quadrature;
pub mod radial_ode;
pub mod report;
pub mod semigroup;
pub mod table;
pub mod tail;
