//! Canonical Bloch bases near `±i∞`.
//!
//! A Bloch solution has first component `exp(Λ(z) + φ(z))` where `Λ` is the
//! explicit quadratic phase and `φ` solves `φ(z+h) - φ(z) = g(z)` for the
//! logarithmic remainder `g` of a periodic Riccati solution
//! `Φ(z) = ψ₁(z+h)/ψ₁(z)`. The second component follows from the first row of
//! the matrix equation.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::Serialize;
use thiserror::Error;

use crate::trigpoly::{rho_v, GrowthIndices, MatrixTrigPoly, RatioTrig, TrigError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlochError {
    #[error("no height below {0} makes the Riccati map contracting")]
    NoContraction(f64),
    #[error("continued fraction did not converge at {z} (depth {depth})")]
    NotConverged { z: C64, depth: usize },
    #[error("|e^(ikh) - 1| = {denominator:e} at k = {k} with a significant coefficient")]
    SmallDenominator { k: i64, denominator: f64 },
    #[error("remainder does not decay on the chosen side: {0}")]
    NotDecaying(String),
    #[error("v does not grow on this side (order {0})")]
    NoGrowth(i64),
    #[error("phi = {given} is not congruent to {expected} modulo 2π")]
    PhiMismatch { given: C64, expected: C64 },
    #[error("point {z} is outside the validity half-plane (height {height})")]
    OutOfDomain { z: C64, height: f64 },
    #[error(transparent)]
    Trig(#[from] TrigError),
}

/// Which singular point the solutions live near.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }

    /// `(n, leading coefficient)` of a growth record on this side.
    fn pick(self, g: &GrowthIndices) -> (i64, C64) {
        match self {
            Side::Plus => (g.n_plus, g.f_plus),
            Side::Minus => (g.n_minus, g.f_minus),
        }
    }
}

const Y_MAX: f64 = 40.0;
const Y_STEP: f64 = 0.5;
const MAX_DEPTH: usize = 200;

/// Both periodic solutions of `Φ(z) + ρ(z)/Φ(z-h) = v(z)` on one side.
///
/// `Φ₂ ≈ v` is the backward fraction, `Φ₁ ≈ ρ(z+h)/v(z+h)` the forward one.
#[derive(Clone, Debug)]
pub struct RiccatiSolution {
    rho: RatioTrig,
    v: RatioTrig,
    h: f64,
    side: Side,
    /// Contraction height: valid for `s·Im z > y`.
    pub y: f64,
    /// Sampled contraction ratio at height `y`.
    pub mu: f64,
    pub tol: f64,
}

/// Contraction ratio `max|ρ| / (min|v|/2)²` sampled above height `y`.
fn contraction_ratio(rho: &RatioTrig, v: &RatioTrig, side: Side, y: f64) -> f64 {
    let mut rho_max: f64 = 0.0;
    let mut v_min = f64::INFINITY;
    for dy in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
        for j in 0..64 {
            let z = C64::new(2.0 * PI * j as f64 / 64.0, side.sign() * (y + dy));
            rho_max = rho_max.max(rho.eval(z).norm());
            v_min = v_min.min(v.eval(z).norm());
        }
    }
    let r = rho_max / (0.25 * v_min * v_min);
    if r.is_finite() {
        r
    } else {
        f64::INFINITY
    }
}

pub fn riccati_solve(rho: &RatioTrig, v: &RatioTrig, h: f64, side: Side, tol: f64) -> Result<RiccatiSolution, BlochError> {
    let (n, _) = side.pick(&v.indices()?);
    if n <= 0 {
        return Err(BlochError::NoGrowth(n));
    }
    let mut y = Y_STEP;
    while y <= Y_MAX {
        let mu = contraction_ratio(rho, v, side, y);
        if mu < 1.0 {
            return Ok(RiccatiSolution { rho: rho.clone(), v: v.clone(), h, side, y, mu, tol });
        }
        y += Y_STEP;
    }
    Err(BlochError::NoContraction(Y_MAX))
}

impl RiccatiSolution {
    pub fn side(&self) -> Side {
        self.side
    }

    fn check(&self, z: C64) -> Result<(), BlochError> {
        if self.side.sign() * z.im < self.y {
            return Err(BlochError::OutOfDomain { z, height: self.y });
        }
        Ok(())
    }

    fn phi2_depth(&self, z: C64, depth: usize) -> C64 {
        let h = self.h;
        let mut t = self.v.eval(z - depth as f64 * h);
        for k in (0..depth).rev() {
            let zk = z - k as f64 * h;
            t = self.v.eval(zk) - self.rho.eval(zk) / t;
        }
        t
    }

    fn phi1_depth(&self, z: C64, depth: usize) -> C64 {
        let h = self.h;
        let mut t = self.v.eval(z + depth as f64 * h);
        for k in (1..depth).rev() {
            let zk = z + k as f64 * h;
            t = self.v.eval(zk) - self.rho.eval(zk + h) / t;
        }
        self.rho.eval(z + h) / t
    }

    fn converge(&self, z: C64, f: impl Fn(usize) -> C64) -> Result<(C64, usize), BlochError> {
        self.check(z)?;
        let mut depth = 4;
        let mut prev = f(depth);
        loop {
            let next_depth = if depth >= 128 { MAX_DEPTH } else { 2 * depth };
            let cur = f(next_depth);
            if (cur - prev).norm() <= self.tol * cur.norm() {
                return Ok((cur, next_depth));
            }
            if next_depth >= MAX_DEPTH {
                return Err(BlochError::NotConverged { z, depth: next_depth });
            }
            prev = cur;
            depth = next_depth;
        }
    }

    /// `Φ₂(z)` and the depth that met the tolerance.
    pub fn phi2(&self, z: C64) -> Result<(C64, usize), BlochError> {
        self.converge(z, |d| self.phi2_depth(z, d))
    }

    /// `Φ₁(z)` and the depth that met the tolerance.
    pub fn phi1(&self, z: C64) -> Result<(C64, usize), BlochError> {
        self.converge(z, |d| self.phi1_depth(z, d))
    }

    /// Fixed depth evaluation, for convergence studies.
    pub fn phi_at_depth(&self, which: RiccatiBranch, z: C64, depth: usize) -> C64 {
        match which {
            RiccatiBranch::Phi1 => self.phi1_depth(z, depth),
            RiccatiBranch::Phi2 => self.phi2_depth(z, depth),
        }
    }

    pub fn phi(&self, which: RiccatiBranch, z: C64) -> Result<C64, BlochError> {
        Ok(match which {
            RiccatiBranch::Phi1 => self.phi1(z)?.0,
            RiccatiBranch::Phi2 => self.phi2(z)?.0,
        })
    }

    /// `|Φ(z) + ρ(z)/Φ(z-h) - v(z)| / |v(z)|`.
    pub fn residual(&self, which: RiccatiBranch, z: C64) -> Result<f64, BlochError> {
        let a = self.phi(which, z)?;
        let b = self.phi(which, z - self.h)?;
        let v = self.v.eval(z);
        Ok((a + self.rho.eval(z) / b - v).norm() / v.norm())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RiccatiBranch {
    Phi1,
    Phi2,
}

/// Decaying 2π-periodic solution of `φ(z+h) - φ(z) = g(z)` as a Fourier sum.
#[derive(Clone, Debug, Serialize)]
pub struct HomologicalSolution {
    pub side: Side,
    pub h: f64,
    /// Height of the sampling line.
    pub y_line: f64,
    /// `|Im z|` above which the series is certified.
    pub y_valid: f64,
    /// `(k, ĝ_k/(e^{ikh}-1))` referred to the sampling line.
    pub coeffs: Vec<(i64, C64)>,
}

pub const DENOM_GUARD: f64 = 1e-8;
const HOM_MAX_NODES: usize = 4096;
const HOM_NOISE: f64 = 1e-15;

/// Samples `g` on `Im z = y_line` (signed) and divides out the shift symbol.
///
/// `y_valid` is the unsigned height down to which the tail must be negligible.
pub fn homological_solve<F>(g: F, h: f64, side: Side, y_line: f64, y_valid: f64) -> Result<HomologicalSolution, BlochError>
where
    F: Fn(C64) -> Result<C64, BlochError>,
{
    let s = side.sign();
    let mut planner = FftPlanner::<f64>::new();
    let mut n = 64usize;
    loop {
        let mut buf: Vec<C64> =
            (0..n).map(|j| g(C64::new(2.0 * PI * j as f64 / n as f64, y_line))).collect::<Result<_, _>>()?;
        let scale = buf.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Ok(HomologicalSolution { side, h, y_line, y_valid, coeffs: Vec::new() });
        }
        planner.plan_fft_forward(n).process(&mut buf);
        let coef = |k: i64| buf[k.rem_euclid(n as i64) as usize] / n as f64;
        let kmax = (n / 4) as i64;
        // Values of g are logs near zero, so the noise floor is absolute.
        let noise = HOM_NOISE * scale.max(1.0);
        let band = (kmax..(n as i64 / 2)).map(|k| coef(k * s as i64).norm()).fold(0.0, f64::max);
        if band > noise {
            if n >= HOM_MAX_NODES {
                return Err(BlochError::NotDecaying(format!("Fourier band {band:e} at {n} nodes")));
            }
            n *= 2;
            continue;
        }
        let wrong = (0..kmax).map(|k| coef(-k * s as i64).norm()).fold(0.0, f64::max);
        if wrong > 1e4 * noise {
            return Err(BlochError::NotDecaying(format!("non-decaying harmonics of size {wrong:e}")));
        }
        // Past the first sub-noise harmonic everything is roundoff; keeping it
        // would amplify by e^{|k|(y_line - y_valid)} below the line.
        let mut coeffs = Vec::new();
        for k in 1..kmax {
            let k = k * s as i64;
            let c = coef(k);
            if c.norm() < noise {
                break;
            }
            let den = (C64::i() * k as f64 * h).exp() - 1.0;
            if den.norm() < DENOM_GUARD {
                return Err(BlochError::SmallDenominator { k, denominator: den.norm() });
            }
            coeffs.push((k, c / den));
        }
        return Ok(HomologicalSolution { side, h, y_line, y_valid, coeffs });
    }
}

impl HomologicalSolution {
    pub fn eval(&self, z: C64) -> Result<C64, BlochError> {
        if self.side.sign() * z.im < self.y_valid {
            return Err(BlochError::OutOfDomain { z, height: self.y_valid });
        }
        let i = C64::i();
        let w = z - C64::new(0.0, self.y_line);
        Ok(self.coeffs.iter().map(|&(k, c)| c * (i * k as f64 * w).exp()).sum())
    }
}

/// Excluded set for the parameter difference and the distance to it.
#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyVerdict {
    pub phi_plus: C64,
    pub phi_minus: C64,
    pub distance: f64,
    pub nearest: Option<f64>,
    pub margin: f64,
    pub consistent: bool,
}

pub fn consistency_check(phi_plus: C64, phi_minus: C64, h: f64, margin: f64) -> ConsistencyVerdict {
    let delta = phi_plus - phi_minus;
    let bound = delta.norm() + 4.0 * PI;
    let mut best: Option<(f64, f64)> = None;
    let mut m = 0;
    while 2.0 * PI + h + 2.0 * PI * m as f64 <= bound {
        let mut l = 0;
        loop {
            let x = 2.0 * PI + h + 2.0 * h * l as f64 + 2.0 * PI * m as f64;
            if x > bound {
                break;
            }
            for val in [x, -x] {
                let d = (delta - val).norm();
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, val));
                }
            }
            l += 1;
        }
        m += 1;
    }
    let (distance, nearest) = match best {
        Some((d, v)) => (d, Some(v)),
        None => (f64::INFINITY, None),
    };
    ConsistencyVerdict { phi_plus, phi_minus, distance, nearest, margin, consistent: distance > margin }
}

/// Principal parameter `φ₊ = i Ln v₊ - h n₊(b)/2` or `φ₋ = -i Ln v₋ - h n₋(b)/2`.
pub fn principal_phi(m: &MatrixTrigPoly, h: f64, side: Side) -> Result<C64, BlochError> {
    let (_, v) = rho_v(m, h)?;
    let (_, v_lead) = side.pick(&v.indices()?);
    let (nb, _) = side.pick(&m.b.indices()?);
    // Adding +0.0 clears a signed zero so the negative axis maps to arg = π.
    let v_lead = C64::new(v_lead.re + 0.0, v_lead.im + 0.0);
    Ok(side.sign() * C64::i() * v_lead.ln() - h * nb as f64 / 2.0)
}

/// Shared state of one canonical pair.
#[derive(Debug)]
pub struct BlochPair {
    m: MatrixTrigPoly,
    h: f64,
    side: Side,
    n: i64,
    nb: i64,
    phi: C64,
    /// `v₊/b₊` or `-v₋/b₋`.
    target: C64,
    riccati: RiccatiSolution,
    /// Homological corrections of solution 1 and solution 2.
    hom: [HomologicalSolution; 2],
}

/// One member of a canonical basis; `index` is 1 or 2.
#[derive(Clone, Debug)]
pub struct BlochSolution {
    index: usize,
    pair: Arc<BlochPair>,
}

pub const RICCATI_TOL: f64 = 1e-14;

impl BlochPair {
    /// Sign of the quadratic phase of solution `j`.
    fn phase_sign(j: usize) -> f64 {
        if j == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Riccati branch feeding solution `j`.
    fn branch(&self, j: usize) -> RiccatiBranch {
        match (self.side, j) {
            (Side::Plus, 1) | (Side::Minus, 2) => RiccatiBranch::Phi1,
            _ => RiccatiBranch::Phi2,
        }
    }

    fn lambda(&self, j: usize, z: C64) -> C64 {
        let (n, h) = (self.n as f64, self.h);
        let w = n * z + self.phi;
        let i = C64::i();
        Self::phase_sign(j) * i * w * w / (2.0 * h * n) + self.side.sign() * i * (n - self.nb as f64) * z / 2.0
    }

    /// `Λ(z+h) - Λ(z)` in closed form.
    fn lambda_step(&self, j: usize, z: C64) -> C64 {
        let (n, h) = (self.n as f64, self.h);
        let i = C64::i();
        Self::phase_sign(j) * i * (n * z + self.phi + n * h / 2.0) + self.side.sign() * i * (n - self.nb as f64) * h / 2.0
    }

    fn remainder(&self, j: usize, z: C64) -> Result<C64, BlochError> {
        let phi = self.riccati.phi(self.branch(j), z)?;
        Ok((phi * (-self.lambda_step(j, z)).exp()).ln())
    }

    /// First components of both raw (unnormalized) solutions and both `Φ`.
    fn raw(&self, z: C64) -> Result<([C64; 2], [C64; 2]), BlochError> {
        let mut first = [C64::new(0.0, 0.0); 2];
        let mut phis = [C64::new(0.0, 0.0); 2];
        for j in 1..=2 {
            first[j - 1] = (self.lambda(j, z) + self.hom[j - 1].eval(z)?).exp();
            phis[j - 1] = self.riccati.phi(self.branch(j), z)?;
        }
        Ok((first, phis))
    }

    /// `det` of the raw pair; h-periodic, tends to the target constant.
    pub fn raw_wronskian(&self, z: C64) -> Result<C64, BlochError> {
        let (f, p) = self.raw(z)?;
        Ok(f[0] * f[1] * (p[1] - p[0]) / self.m.b.eval(z))
    }

    fn solution(&self, j: usize, z: C64) -> Result<[C64; 2], BlochError> {
        let (f, p) = self.raw(z)?;
        let b = self.m.b.eval(z);
        let a = self.m.a.eval(z);
        let mut first = f[j - 1];
        if j == 1 {
            let raw_det = f[0] * f[1] * (p[1] - p[0]) / b;
            first *= self.target / raw_det;
        }
        // Φ - a cancels on the growing branch; the Riccati relation gives the
        // same quantity from Φ(z-h), where the other branch cancels instead.
        let fwd = p[j - 1] - a;
        let fwd_loss = fwd.norm() / p[j - 1].norm().max(a.norm());
        let zb = z - self.h;
        let pb = self.riccati.phi(self.branch(j), zb)?;
        let db = self.m.d.eval(zb);
        let back = db - 1.0 / pb;
        let back_loss = back.norm() / db.norm().max(1.0 / pb.norm());
        let second = if back_loss > fwd_loss { first * back / self.m.b.eval(zb) } else { first * fwd / b };
        Ok([first, second])
    }
}

/// Builds `f₁, f₂` (`Side::Plus`) or `g₁, g₂` (`Side::Minus`).
///
/// `phi_choice` defaults to the principal parameter; a supplied value must
/// agree with it modulo 2π.
pub fn canonical_basis(
    m: &MatrixTrigPoly,
    h: f64,
    side: Side,
    phi_choice: Option<C64>,
) -> Result<(BlochSolution, BlochSolution), BlochError> {
    let (rho, v) = rho_v(m, h)?;
    let vi = v.indices()?;
    let (n, v_lead) = side.pick(&vi);
    if n <= 0 {
        return Err(BlochError::NoGrowth(n));
    }
    let (nb, b_lead) = side.pick(&m.b.indices()?);
    let principal = principal_phi(m, h, side)?;
    let phi = match phi_choice {
        None => principal,
        Some(p) => {
            let k = (p - principal) / (2.0 * PI);
            if (k.re - k.re.round()).abs() > 1e-9 || k.im.abs() > 1e-9 {
                return Err(BlochError::PhiMismatch { given: p, expected: principal });
            }
            p
        }
    };
    let target = side.sign() * v_lead / b_lead;
    let mut riccati = riccati_solve(&rho, &v, h, side, RICCATI_TOL)?;
    loop {
        let y_line = side.sign() * (riccati.y + 2.0);
        let y_valid = riccati.y + 1.0;
        let mut pair = BlochPair {
            m: m.clone(),
            h,
            side,
            n,
            nb,
            phi,
            target,
            riccati: riccati.clone(),
            hom: [
                HomologicalSolution { side, h, y_line, y_valid, coeffs: vec![] },
                HomologicalSolution { side, h, y_line, y_valid, coeffs: vec![] },
            ],
        };
        // The log remainder must stay near zero on the sampling line.
        let near_one = (0..64).all(|j| {
            let z = C64::new(2.0 * PI * j as f64 / 64.0, y_line);
            (1..=2).all(|s| pair.remainder(s, z).map(|g| (g.exp() - 1.0).norm() < 0.5).unwrap_or(false))
        });
        if !near_one {
            riccati.y += Y_STEP;
            if riccati.y > Y_MAX {
                return Err(BlochError::NoContraction(Y_MAX));
            }
            continue;
        }
        for j in 1..=2 {
            pair.hom[j - 1] = homological_solve(|z| pair.remainder(j, z), h, side, y_line, y_valid)?;
        }
        let pair = Arc::new(pair);
        return Ok((BlochSolution { index: 1, pair: pair.clone() }, BlochSolution { index: 2, pair }));
    }
}

impl BlochSolution {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn side(&self) -> Side {
        self.pair.side
    }

    pub fn phi(&self) -> C64 {
        self.pair.phi
    }

    pub fn n(&self) -> i64 {
        self.pair.n
    }

    pub fn h(&self) -> f64 {
        self.pair.h
    }

    /// `|Im z|` above which evaluation is certified.
    pub fn validity_height(&self) -> f64 {
        self.pair.hom[0].y_valid
    }

    pub fn riccati(&self) -> &RiccatiSolution {
        &self.pair.riccati
    }

    pub fn homological(&self) -> &HomologicalSolution {
        &self.pair.hom[self.index - 1]
    }

    pub fn raw_wronskian(&self, z: C64) -> Result<C64, BlochError> {
        self.pair.raw_wronskian(z)
    }

    /// The normalized wronskian value `v₊/b₊` or `-v₋/b₋`.
    pub fn target_wronskian(&self) -> C64 {
        self.pair.target
    }

    pub fn eval(&self, z: C64) -> Result<[C64; 2], BlochError> {
        self.pair.solution(self.index, z)
    }

    /// The explicit asymptotic form of the first component, without remainder.
    pub fn leading_first(&self, z: C64) -> C64 {
        self.pair.lambda(self.index, z).exp()
    }

    /// `u(z) = f(z+2π)_1 / f(z)_1`.
    pub fn multiplier(&self, z: C64) -> Result<C64, BlochError> {
        Ok(self.eval(z + 2.0 * PI)?[0] / self.eval(z)?[0])
    }

    /// Closed-form leading constant `α⁰` or `β⁰` of the multiplier.
    pub fn multiplier_constant(&self) -> C64 {
        let p = &self.pair;
        let (n, nb) = (p.n as f64, p.nb as f64);
        let sgn = BlochPair::phase_sign(self.index);
        let i = C64::i();
        (sgn * 2.0 * PI * i / p.h * (p.phi + PI * n) + p.side.sign() * i * PI * (n - nb)).exp()
    }

    /// `e^{±2πinz/h}` growth of the multiplier.
    pub fn multiplier_exponential(&self, z: C64) -> C64 {
        let sgn = BlochPair::phase_sign(self.index);
        (sgn * 2.0 * PI * C64::i() * self.pair.n as f64 * z / self.pair.h).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trigpoly::TrigPoly;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn harper(lambda: f64, e: f64) -> MatrixTrigPoly {
        MatrixTrigPoly::new(
            TrigPoly::from_terms([(0, c(2.0 * e, 0.0)), (1, c(-lambda, 0.0)), (-1, c(-lambda, 0.0))]),
            TrigPoly::constant(c(-1.0, 0.0)),
            TrigPoly::constant(c(1.0, 0.0)),
            TrigPoly::zero(),
        )
        .unwrap()
    }

    const H: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn riccati_asymptotics_harper() {
        let m = harper(1.0, 0.0);
        let (rho, v) = rho_v(&m, H).unwrap();
        let r = riccati_solve(&rho, &v, H, Side::Plus, 1e-14).unwrap();
        assert!(r.mu < 1.0);
        let z = c(0.4, 12.0);
        let (p2, _) = r.phi2(z).unwrap();
        assert!((p2 / v.eval(z) - 1.0).norm() < 1e-4);
        let (p1, _) = r.phi1(z).unwrap();
        assert!((p1 * v.eval(z + H) / rho.eval(z + H) - 1.0).norm() < 1e-4);
        for k in 0..10 {
            let z = c(0.3 * k as f64, r.y + 1.0 + 0.7 * k as f64);
            assert!(r.residual(RiccatiBranch::Phi1, z).unwrap() < 1e-7);
            assert!(r.residual(RiccatiBranch::Phi2, z).unwrap() < 1e-7);
        }
    }

    #[test]
    fn riccati_depth_doubling_is_geometric() {
        let m = harper(1.0, 0.3);
        let (rho, v) = rho_v(&m, H).unwrap();
        let r = riccati_solve(&rho, &v, H, Side::Minus, 1e-14).unwrap();
        let z = c(0.7, -(r.y + 0.5));
        let exact = r.phi_at_depth(RiccatiBranch::Phi2, z, 200);
        let mut prev = f64::INFINITY;
        for d in [2, 4, 8, 16] {
            let err = (r.phi_at_depth(RiccatiBranch::Phi2, z, d) - exact).norm() / exact.norm();
            assert!(err <= r.mu.powi(d as i32) * 10.0 + 1e-15, "depth {d}: {err}");
            assert!(err <= prev);
            prev = err;
        }
    }

    #[test]
    fn no_contraction_without_growth() {
        let m = MatrixTrigPoly::identity();
        let (rho, v) = (
            RatioTrig::new(TrigPoly::constant(c(1.0, 0.0)), TrigPoly::constant(c(1.0, 0.0))).unwrap(),
            RatioTrig::new(m.a.clone(), TrigPoly::constant(c(1.0, 0.0))).unwrap(),
        );
        assert!(matches!(riccati_solve(&rho, &v, H, Side::Plus, 1e-12), Err(BlochError::NoGrowth(0))));
    }

    #[test]
    fn homological_one_harmonic_and_zero() {
        let i = C64::i();
        let s = homological_solve(|z| Ok((i * z).exp()), H, Side::Plus, 3.0, 1.0).unwrap();
        for z in [c(0.2, 1.5), c(-2.0, 4.0), c(5.0, 2.2)] {
            let want = (i * z).exp() / ((i * H).exp() - 1.0);
            assert!((s.eval(z).unwrap() - want).norm() < 1e-12);
            let r = s.eval(z + H).unwrap() - s.eval(z).unwrap() - (i * z).exp();
            assert!(r.norm() < 1e-12);
        }
        let zero = homological_solve(|_| Ok(C64::new(0.0, 0.0)), H, Side::Minus, -3.0, 1.0).unwrap();
        assert!(zero.coeffs.is_empty());
        assert_eq!(zero.eval(c(0.0, -2.0)).unwrap(), C64::new(0.0, 0.0));
        let bad = homological_solve(|_| Ok(C64::new(1.0, 0.0)), H, Side::Plus, 3.0, 1.0);
        assert!(matches!(bad, Err(BlochError::NotDecaying(_))));
        let res = homological_solve(|z| Ok((i * z).exp()), 2.0 * PI, Side::Plus, 3.0, 1.0);
        assert!(matches!(res, Err(BlochError::SmallDenominator { k: 1, .. })));
    }

    #[test]
    fn homological_harper_remainder() {
        let (f1, _) = canonical_basis(&harper(1.0, 0.0), H, Side::Plus, None).unwrap();
        let pair = &f1.pair;
        for k in 0..8 {
            let z = c(0.8 * k as f64, 14.0);
            let hom = &pair.hom[0];
            let r = hom.eval(z + H).unwrap() - hom.eval(z).unwrap() - pair.remainder(1, z).unwrap();
            assert!(r.norm() < 1e-8, "{r}");
        }
    }

    #[test]
    fn wronskians_are_the_targets() {
        let m = harper(1.0, 0.0);
        let (f1, f2) = canonical_basis(&m, H, Side::Plus, None).unwrap();
        let (g1, g2) = canonical_basis(&m, H, Side::Minus, None).unwrap();
        let i = C64::i();
        for y in [12.0, 14.0, 16.0, 18.0, 20.0] {
            let z = c(0.37 * y, y);
            let (a, b) = (f1.eval(z).unwrap(), f2.eval(z).unwrap());
            let d = a[0] * b[1] - a[1] * b[0];
            assert!((d - f1.target_wronskian()).norm() < 1e-6 * d.norm(), "{d}");
            let zl = z.conj();
            let (a, b) = (g1.eval(zl).unwrap(), g2.eval(zl).unwrap());
            let d = a[0] * b[1] - a[1] * b[0];
            assert!((d - g1.target_wronskian()).norm() < 1e-6 * d.norm(), "{d}");
        }
        // Harper: v₊ = -λ, b₊ = -1.
        assert!((f1.target_wronskian() - 1.0).norm() < 1e-15);
        assert!((g1.target_wronskian() + 1.0).norm() < 1e-15);
        // Leading form of f₁.
        let z = c(0.4, 15.0);
        let phi = f1.phi();
        let lead = (i * (z + phi) * (z + phi) / (2.0 * H) + i * z / 2.0).exp();
        let got = f1.eval(z).unwrap()[0];
        assert!((got / lead - 1.0).norm() < 1e-3);
    }

    #[test]
    fn harper_multiplier_constants() {
        for lambda in [0.8, 1.0, 1.25] {
            let m = harper(lambda, 0.1);
            // Symmetric choice φ± = ±iξ - π with ξ = ln λ.
            let xi = lambda.ln();
            let (_, f2) = canonical_basis(&m, H, Side::Plus, Some(c(-PI, xi))).unwrap();
            let (g1, _) = canonical_basis(&m, H, Side::Minus, Some(c(-PI, -xi))).unwrap();
            let want = -lambda.powf(2.0 * PI / H);
            assert!((f2.multiplier_constant() - want).norm() < 1e-10 * want.abs());
            assert!((g1.multiplier_constant() - want).norm() < 1e-10 * want.abs());
            let z = c(0.3, 10.0);
            let u = f2.multiplier(z).unwrap() / f2.multiplier_exponential(z);
            assert!((u - want).norm() < 1e-6 * want.abs(), "{u}");
            let zl = c(0.3, -10.0);
            let u = g1.multiplier(zl).unwrap() / g1.multiplier_exponential(zl);
            assert!((u - want).norm() < 1e-6 * want.abs(), "{u}");
        }
    }

    #[test]
    fn multiplier_is_h_periodic_and_solutions_solve() {
        let m = harper(1.0, 0.2);
        for side in [Side::Plus, Side::Minus] {
            let (s1, s2) = canonical_basis(&m, H, side, None).unwrap();
            for s in [&s1, &s2] {
                for k in 0..5 {
                    let z = c(0.5 * k as f64, side.sign() * (s.validity_height() + 1.0 + k as f64));
                    let u0 = s.multiplier(z).unwrap();
                    let u1 = s.multiplier(z + H).unwrap();
                    assert!((u1 - u0).norm() < 1e-8 * u0.norm());
                    let f = s.eval(z).unwrap();
                    let g = s.eval(z + H).unwrap();
                    let mf = m.apply(z, f);
                    for c in 0..2 {
                        assert!((g[c] - mf[c]).norm() < 1e-7 * g[0].norm().max(g[1].norm()));
                    }
                    let f2pi = s.eval(z + 2.0 * PI).unwrap();
                    for c in 0..2 {
                        assert!((f2pi[c] - u0 * f[c]).norm() < 1e-7 * f2pi[c].norm());
                    }
                }
            }
        }
    }

    #[test]
    fn phi_choice_checked() {
        let m = harper(1.0, 0.0);
        let p = principal_phi(&m, H, Side::Plus).unwrap();
        assert!(canonical_basis(&m, H, Side::Plus, Some(p + 2.0 * PI)).is_ok());
        assert!(matches!(
            canonical_basis(&m, H, Side::Plus, Some(p + 1.0)),
            Err(BlochError::PhiMismatch { .. })
        ));
    }

    #[test]
    fn parameter_shift_gives_periodic_ratio() {
        let m = harper(1.0, 0.0);
        let p = principal_phi(&m, H, Side::Plus).unwrap();
        let (a, _) = canonical_basis(&m, H, Side::Plus, Some(p)).unwrap();
        let (b, _) = canonical_basis(&m, H, Side::Plus, Some(p + 2.0 * PI)).unwrap();
        let ratio = |z: C64| b.eval(z).unwrap()[0] * (-2.0 * PI * C64::i() * z / H).exp() / a.eval(z).unwrap()[0];
        let z = c(0.3, 12.0);
        let r0 = ratio(z);
        assert!((ratio(z + H) - r0).norm() < 1e-6 * r0.norm());
        assert!((ratio(c(1.1, 16.0)) - r0).norm() < 1e-6 * r0.norm());
    }

    #[test]
    fn consistency_examples() {
        let h = H;
        let v = consistency_check(c(0.0, 0.3), c(0.0, -0.3), h, 0.1);
        assert!(v.consistent && v.distance >= 0.6 - 1e-12);
        let v = consistency_check(c(2.0 * PI + h, 0.0), c(0.0, 0.0), h, 0.1);
        assert!(!v.consistent);
        let v = consistency_check(c(1.0, 0.0), c(1.0, 0.0), h, 0.1);
        assert!(v.consistent);
        assert!((v.distance - (2.0 * PI + h)).abs() < 1e-12);
    }

    /// Harper block times a shear, so `b` is no longer constant.
    fn sheared(lambda: f64, e: f64, beta: C64) -> MatrixTrigPoly {
        let a = TrigPoly::from_terms([(0, c(2.0 * e, 0.0)), (1, c(-lambda, 0.0)), (-1, c(-lambda, 0.0))]);
        let shear = TrigPoly::monomial(1, beta);
        MatrixTrigPoly::new(
            a.clone(),
            a.mul(&shear).sub(&TrigPoly::constant(c(1.0, 0.0))),
            TrigPoly::constant(c(1.0, 0.0)),
            shear,
        )
        .unwrap()
    }

    fn check_pair(m: &MatrixTrigPoly, h: f64, side: Side, x: f64, dy: f64) -> Result<(), TestCaseError> {
        let (s1, s2) = canonical_basis(m, h, side, None).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let z = c(x, side.sign() * (s1.validity_height() + dy));
        let (f, g) = (s1.eval(z).unwrap(), s2.eval(z).unwrap());
        let det = f[0] * g[1] - f[1] * g[0];
        prop_assert!((det / s1.target_wronskian() - 1.0).norm() < 1e-6, "det {}", det);
        for s in [&s1, &s2] {
            let f = s.eval(z).unwrap();
            let next = s.eval(z + h).unwrap();
            let mf = m.apply(z, f);
            let size = next[0].norm().max(next[1].norm());
            prop_assert!((next[0] - mf[0]).norm() < 1e-7 * size);
            prop_assert!((next[1] - mf[1]).norm() < 1e-7 * size);
            let branch = s.pair.branch(s.index);
            prop_assert!(s.riccati().residual(branch, z).unwrap() < 1e-9);
            let u = s.multiplier(z).unwrap() / s.multiplier_exponential(z);
            let rel = (u / s.multiplier_constant() - 1.0).norm();
            prop_assert!(rel < 1e-5, "multiplier {} vs {}", u, s.multiplier_constant());
        }
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn harper_family_bases(lambda in 0.5..2.0f64, e in -1.0..1.0f64, h in 0.4..3.0f64,
                               x in 0.0..6.3f64, dy in 0.5..4.0f64, upper in any::<bool>()) {
            let side = if upper { Side::Plus } else { Side::Minus };
            check_pair(&harper(lambda, e), h, side, x, dy)?;
        }

        #[test]
        fn sheared_bases(lambda in 0.5..2.0f64, e in -1.0..1.0f64, br in -0.5..0.5f64, bi in -0.5..0.5f64,
                         h in 0.4..3.0f64, x in 0.0..6.3f64, upper in any::<bool>()) {
            let side = if upper { Side::Plus } else { Side::Minus };
            check_pair(&sheared(lambda, e, c(br, bi)), h, side, x, 1.0)?;
        }

        #[test]
        fn phi_shift_is_periodic_factor(lambda in 0.5..2.0f64, h in 0.4..3.0f64, x in 0.0..6.3f64) {
            let m = harper(lambda, 0.0);
            let p = principal_phi(&m, h, Side::Plus).unwrap();
            let (a, _) = canonical_basis(&m, h, Side::Plus, Some(p)).unwrap();
            let (b, _) = canonical_basis(&m, h, Side::Plus, Some(p + 2.0 * PI)).unwrap();
            let ratio = |z: C64| b.eval(z).unwrap()[0] * (-2.0 * PI * C64::i() * z / h).exp() / a.eval(z).unwrap()[0];
            let z = c(x, a.validity_height() + 1.0);
            let r0 = ratio(z);
            prop_assert!((ratio(z + h) - r0).norm() < 1e-6 * r0.norm());
            prop_assert!((ratio(z + c(0.0, 2.0)) - r0).norm() < 1e-6 * r0.norm());
        }
    }
}
