//! Trigonometric polynomials `f(z) = Σ f_l e^{ilz}`, 2×2 matrices of them,
//! pointwise ratios, and the continued-fraction expansion of the step.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Coefficients below this fraction of the largest modulus are dropped.
pub const DROP_TOL: f64 = 1e-12;
/// Tolerance on `|det M - 1|` accepted by [`MatrixTrigPoly::new`].
pub const DET_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrigError {
    #[error("trigonometric polynomial is identically zero")]
    ZeroPolynomial,
    #[error("off-diagonal entry b is identically zero")]
    ZeroB,
    #[error("step h = {0} is outside (0, 2π)")]
    BadStep(f64),
    #[error("determinant deviates from 1 by {0:e}")]
    NotUnimodular(f64),
    #[error("root extraction failed: {0}")]
    Roots(String),
}

/// Finite Laurent series in `e^{iz}`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrigPoly {
    coeffs: BTreeMap<i64, C64>,
}

impl TrigPoly {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: C64) -> Self {
        Self::from_terms([(0, c)])
    }

    pub fn monomial(l: i64, c: C64) -> Self {
        Self::from_terms([(l, c)])
    }

    /// `amp · cos z`.
    pub fn cos(amp: C64) -> Self {
        Self::from_terms([(-1, amp * 0.5), (1, amp * 0.5)])
    }

    /// Builds from `(l, f_l)` pairs, summing repeated indices and pruning.
    pub fn from_terms<I: IntoIterator<Item = (i64, C64)>>(terms: I) -> Self {
        let mut coeffs = BTreeMap::new();
        for (l, c) in terms {
            *coeffs.entry(l).or_insert(C64::new(0.0, 0.0)) += c;
        }
        let mut f = Self { coeffs };
        f.prune();
        f
    }

    fn prune(&mut self) {
        let max = self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max);
        let cut = max * DROP_TOL;
        self.coeffs.retain(|_, c| c.norm() > cut && c.norm() > 0.0);
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coeff(&self, l: i64) -> C64 {
        self.coeffs.get(&l).copied().unwrap_or_default()
    }

    pub fn terms(&self) -> impl Iterator<Item = (i64, C64)> + '_ {
        self.coeffs.iter().map(|(&l, &c)| (l, c))
    }

    pub fn min_index(&self) -> Option<i64> {
        self.coeffs.keys().next().copied()
    }

    pub fn max_index(&self) -> Option<i64> {
        self.coeffs.keys().next_back().copied()
    }

    pub fn eval(&self, z: C64) -> C64 {
        let iz = C64::i() * z;
        self.coeffs.iter().map(|(&l, &c)| c * (iz * l as f64).exp()).sum()
    }

    pub fn derivative(&self) -> Self {
        Self::from_terms(self.terms().map(|(l, c)| (l, c * C64::new(0.0, l as f64))))
    }

    /// Growth data at `±i∞`.
    pub fn indices(&self) -> Result<GrowthIndices, TrigError> {
        let (&lo, &f_plus) = self.coeffs.iter().next().ok_or(TrigError::ZeroPolynomial)?;
        let (&hi, &f_minus) = self.coeffs.iter().next_back().ok_or(TrigError::ZeroPolynomial)?;
        Ok(GrowthIndices { n_plus: -lo, f_plus, n_minus: hi, f_minus })
    }

    /// `z ↦ f(z + δ)`.
    pub fn shift(&self, delta: C64) -> Self {
        let id = C64::i() * delta;
        Self::from_terms(self.terms().map(|(l, c)| (l, c * (id * l as f64).exp())))
    }

    pub fn scale(&self, s: C64) -> Self {
        Self::from_terms(self.terms().map(|(l, c)| (l, c * s)))
    }

    pub fn mul(&self, other: &Self) -> Self {
        Self::from_terms(
            self.terms()
                .flat_map(|(l, c)| other.terms().map(move |(k, e)| (l + k, c * e))),
        )
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::from_terms(self.terms().chain(other.terms()))
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::from_terms(self.terms().chain(other.terms().map(|(l, c)| (l, -c))))
    }

    /// `z ↦ conj(f(conj z))`.
    pub fn conj_reflect(&self) -> Self {
        Self::from_terms(self.terms().map(|(l, c)| (l, c.conj())))
    }

    /// Zeros with `Re z ∈ [x_lo, x_lo + 2π)` via the companion matrix in `u = e^{iz}`.
    pub fn zeros(&self, x_lo: f64) -> Result<Vec<C64>, TrigError> {
        let lo = self.min_index().ok_or(TrigError::ZeroPolynomial)?;
        let hi = self.max_index().unwrap_or(lo);
        let deg = (hi - lo) as usize;
        if deg == 0 {
            return Ok(Vec::new());
        }
        let lead = self.coeff(hi);
        let mut comp = DMatrix::<C64>::zeros(deg, deg);
        for j in 1..deg {
            comp[(j, j - 1)] = C64::new(1.0, 0.0);
        }
        for j in 0..deg {
            comp[(j, deg - 1)] = -self.coeff(lo + j as i64) / lead;
        }
        let eig = comp
            .schur()
            .eigenvalues()
            .ok_or_else(|| TrigError::Roots("Schur form not triangular".into()))?;
        Ok(eig
            .iter()
            .map(|u| {
                let mut z = -C64::i() * u.ln();
                while z.re < x_lo {
                    z.re += 2.0 * PI;
                }
                while z.re >= x_lo + 2.0 * PI {
                    z.re -= 2.0 * PI;
                }
                z
            })
            .collect())
    }
}

impl fmt::Display for TrigPoly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .terms()
            .map(|(l, c)| format!("({:.6}{:+.6}i)e^{{{}iz}}", c.re, c.im, l))
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

#[derive(Serialize, Deserialize)]
struct TrigPolyWire {
    coeffs: Vec<(i64, f64, f64)>,
}

impl Serialize for TrigPoly {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        TrigPolyWire { coeffs: self.terms().map(|(l, c)| (l, c.re, c.im)).collect() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrigPoly {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = TrigPolyWire::deserialize(d)?;
        if wire.coeffs.iter().any(|(_, re, im)| !re.is_finite() || !im.is_finite()) {
            return Err(D::Error::custom("non-finite coefficient"));
        }
        Ok(Self::from_terms(wire.coeffs.into_iter().map(|(l, re, im)| (l, C64::new(re, im)))))
    }
}

/// `(n₊, f₊, n₋, f₋)`: minus the lowest index with its coefficient, and the
/// highest index with its coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrowthIndices {
    pub n_plus: i64,
    pub f_plus: C64,
    pub n_minus: i64,
    pub f_minus: C64,
}

/// 2×2 matrix `[[a, b], [c, d]]` of trigonometric polynomials with unit determinant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixWire")]
pub struct MatrixTrigPoly {
    pub a: TrigPoly,
    pub b: TrigPoly,
    pub c: TrigPoly,
    pub d: TrigPoly,
}

#[derive(Deserialize)]
struct MatrixWire {
    a: TrigPoly,
    b: TrigPoly,
    c: TrigPoly,
    d: TrigPoly,
}

impl TryFrom<MatrixWire> for MatrixTrigPoly {
    type Error = TrigError;
    fn try_from(w: MatrixWire) -> Result<Self, TrigError> {
        Self::new(w.a, w.b, w.c, w.d)
    }
}

impl MatrixTrigPoly {
    /// Checks `det ≡ 1` on 64 points of `[0, 2π)` and `b ≢ 0`.
    pub fn new(a: TrigPoly, b: TrigPoly, c: TrigPoly, d: TrigPoly) -> Result<Self, TrigError> {
        if b.is_zero() {
            return Err(TrigError::ZeroB);
        }
        let m = Self { a, b, c, d };
        let dev = m.det_deviation();
        if dev > DET_TOL {
            return Err(TrigError::NotUnimodular(dev));
        }
        Ok(m)
    }

    pub fn det_deviation(&self) -> f64 {
        (0..64)
            .map(|k| {
                let z = C64::new(2.0 * PI * k as f64 / 64.0, 0.0);
                (self.det_at(z) - 1.0).norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn det_at(&self, z: C64) -> C64 {
        let [[a, b], [c, d]] = self.eval(z);
        a * d - b * c
    }

    pub fn eval(&self, z: C64) -> [[C64; 2]; 2] {
        [[self.a.eval(z), self.b.eval(z)], [self.c.eval(z), self.d.eval(z)]]
    }

    /// `M(z) x`.
    pub fn apply(&self, z: C64, x: [C64; 2]) -> [C64; 2] {
        let [[a, b], [c, d]] = self.eval(z);
        [a * x[0] + b * x[1], c * x[0] + d * x[1]]
    }

    /// `M(z)^{-1} x`, using `det M = 1`.
    pub fn apply_inverse(&self, z: C64, x: [C64; 2]) -> [C64; 2] {
        let [[a, b], [c, d]] = self.eval(z);
        [d * x[0] - b * x[1], -c * x[0] + a * x[1]]
    }

    pub fn identity() -> Self {
        let one = TrigPoly::constant(C64::new(1.0, 0.0));
        Self { a: one.clone(), b: TrigPoly::zero(), c: TrigPoly::zero(), d: one }
    }
}

/// Pointwise quotient of two trigonometric polynomials.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioTrig {
    pub numerator: TrigPoly,
    pub denominator: TrigPoly,
}

impl RatioTrig {
    pub fn new(numerator: TrigPoly, denominator: TrigPoly) -> Result<Self, TrigError> {
        if denominator.is_zero() {
            return Err(TrigError::ZeroPolynomial);
        }
        Ok(Self { numerator, denominator })
    }

    pub fn eval(&self, z: C64) -> C64 {
        self.numerator.eval(z) / self.denominator.eval(z)
    }

    pub fn shift(&self, delta: C64) -> Self {
        Self { numerator: self.numerator.shift(delta), denominator: self.denominator.shift(delta) }
    }

    /// Leading behaviour at `±i∞` as `(order, coefficient)` with the same sign
    /// conventions as [`TrigPoly::indices`].
    pub fn indices(&self) -> Result<GrowthIndices, TrigError> {
        let n = self.numerator.indices()?;
        let d = self.denominator.indices()?;
        Ok(GrowthIndices {
            n_plus: n.n_plus - d.n_plus,
            f_plus: n.f_plus / d.f_plus,
            n_minus: n.n_minus - d.n_minus,
            f_minus: n.f_minus / d.f_minus,
        })
    }
}

/// `ρ(z) = b(z)/b(z-h)` and `v(z) = a(z) + ρ(z) d(z-h)` over the common
/// denominator `b(z-h)`.
pub fn rho_v(m: &MatrixTrigPoly, h: f64) -> Result<(RatioTrig, RatioTrig), TrigError> {
    if m.b.is_zero() {
        return Err(TrigError::ZeroB);
    }
    let hc = C64::new(-h, 0.0);
    let b_prev = m.b.shift(hc);
    let rho = RatioTrig::new(m.b.clone(), b_prev.clone())?;
    let v_num = m.a.mul(&b_prev).add(&m.b.mul(&m.d.shift(hc)));
    let v = RatioTrig::new(v_num, b_prev)?;
    Ok((rho, v))
}

/// Per-condition membership in the class of matrices of order `n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OmegaReport {
    pub n: i64,
    pub a_in_class: bool,
    pub b_in_class: bool,
    pub c_in_class: bool,
    pub d_in_class: bool,
    pub a_orders_equal_n: bool,
    pub member: bool,
    /// `(n₊(b), n₋(b))` when `b ≢ 0`.
    pub stratum: Option<(i64, i64)>,
}

/// Support of `f` inside `[-p, q]`, i.e. `n₊(f) ≤ p` and `n₋(f) ≤ q`.
fn in_tau(f: &TrigPoly, p: i64, q: i64) -> bool {
    match (f.min_index(), f.max_index()) {
        (Some(lo), Some(hi)) => -lo <= p && hi <= q,
        _ => true,
    }
}

pub fn omega_classify(m: &MatrixTrigPoly, n: i64) -> OmegaReport {
    let a_in_class = in_tau(&m.a, n, n);
    let b_in_class = in_tau(&m.b, n, n - 1);
    let c_in_class = in_tau(&m.c, n - 1, n);
    let d_in_class = in_tau(&m.d, n - 1, n - 1);
    let a_orders_equal_n = m
        .a
        .indices()
        .map(|g| g.n_plus == n && g.n_minus == n)
        .unwrap_or(false);
    let stratum = m.b.indices().ok().map(|g| (g.n_plus, g.n_minus));
    OmegaReport {
        n,
        a_in_class,
        b_in_class,
        c_in_class,
        d_in_class,
        a_orders_equal_n,
        member: a_in_class && b_in_class && c_in_class && d_in_class && a_orders_equal_n,
        stratum,
    }
}

/// Euclid data for `h₀ = 2π`, `h₁ = h`, `h_{j-1} = p_j h_j + h_{j+1}`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CfExpansion {
    pub p: Vec<u64>,
    pub h_seq: Vec<f64>,
    pub terminated: bool,
}

pub const CF_RATIONAL_TOL: f64 = 1e-12;

pub fn cf_expand(h: f64, max_depth: usize, rational_tol: f64) -> Result<CfExpansion, TrigError> {
    if !(h > 0.0 && h < 2.0 * PI) {
        return Err(TrigError::BadStep(h));
    }
    let mut h_seq = vec![2.0 * PI, h];
    let mut p = Vec::new();
    let mut terminated = false;
    while p.len() < max_depth {
        let (prev, cur) = (h_seq[h_seq.len() - 2], h_seq[h_seq.len() - 1]);
        let mut q = (prev / cur).floor();
        let mut rem = prev - q * cur;
        // Snap remainders that are a rounding error away from 0 or from `cur`.
        if rem > cur * (1.0 - rational_tol) {
            q += 1.0;
            rem = 0.0;
        }
        if rem < rational_tol * cur {
            rem = 0.0;
        }
        p.push(q as u64);
        h_seq.push(rem);
        if rem == 0.0 {
            terminated = true;
            break;
        }
    }
    Ok(CfExpansion { p, h_seq, terminated })
}
