//! Minimal entire solutions and monodromy matrices of difference equations
//! `ψ(z+h) = M(z) ψ(z)` with trigonometric-polynomial `SL(2, ℂ)` coefficients.

pub mod bloch;
pub mod cli;
pub mod fredholm;
pub mod harper;
pub mod model;
pub mod monodromy;
pub mod quad;
pub mod reduction;
pub mod sigma;
pub mod special;
pub mod trigpoly;
