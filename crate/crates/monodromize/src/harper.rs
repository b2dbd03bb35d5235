//! Harper equation, the `ℍ(λ)` family and the monodromization map.
//!
//! A point of `ℍ(λ)` is stored as `(λ, s, t, a)`: on the two-dimensional
//! chart `a` follows from `s, t`; on the degenerate lines one of `s, t` is
//! zero, the other is `±1`, and `a` is free. Harper's matrix is the line
//! `s = -1, t = 0` with `a = 2E`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::time::Instant;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::monodromy::{monodromy_matrix, structure_check, MonodromyError, MonodromyResult, StructureReport};
use crate::reduction::{
    assemble_minimal, min_asymp_coeffs, AsymptoticCoefficients, CanonicalBases, Kind, MinimalConfig, MinimalSolution,
    ReducedParams, ReductionError, SlotConfig, SolutionSampler,
};
use crate::trigpoly::{MatrixTrigPoly, TrigError, TrigPoly};

#[derive(Debug, Error)]
pub enum HarperError {
    #[error("chart violation: {0}")]
    ChartViolation(String),
    #[error("λ must be positive and finite, got {0}")]
    BadLambda(f64),
    #[error("C_D = {0:e} is too small to normalize by")]
    VanishingCd(f64),
    #[error("wronskian of the symmetric pair is {0:e} relative to the solutions")]
    DegenerateWronskian(f64),
    #[error("monodromy does not have the ℍ shape: largest residual {:e}", .0.max())]
    ShapeMismatch(ShapeResiduals),
    #[error("step ratio {0} is rational within tolerance; the next step vanishes")]
    RationalTermination(f64),
    #[error("step ratio arithmetic overflowed")]
    RatioOverflow,
    #[error("invalid step ratio: {0}")]
    BadRatio(String),
    #[error(transparent)]
    Trig(#[from] TrigError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Monodromy(#[from] MonodromyError),
}

type Result<T> = std::result::Result<T, HarperError>;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `[[2E - 2λ cos z, -1], [1, 0]]`.
pub fn harper_matrix(lambda: f64, e: C64) -> Result<MatrixTrigPoly> {
    hfamily_matrix(lambda, &Chart::Zero { sign: Sign::Minus, a: 2.0 * e })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    fn of(x: f64) -> Self {
        if x >= 0.0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }
}

/// Which piece of `ℍ(λ)` a point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Chart {
    /// `b = s + t e^{-iz}`, `a = λ(1-s²-t²)/(st)`.
    Generic { s: C64, t: C64 },
    /// `b = ±1`, `c = ∓1`, `d = 0`.
    Zero { sign: Sign, a: C64 },
    /// `b = ±e^{-iz}`, `c = ∓e^{iz}`, `d = 0`.
    One { sign: Sign, a: C64 },
}

impl Chart {
    /// `(s, t)` with the degenerate lines embedded as `t = 0` or `s = 0`.
    pub fn st(&self) -> (C64, C64) {
        match *self {
            Chart::Generic { s, t } => (s, t),
            Chart::Zero { sign, .. } => (c(sign.value(), 0.0), c(0.0, 0.0)),
            Chart::One { sign, .. } => (c(0.0, 0.0), c(sign.value(), 0.0)),
        }
    }

    pub fn a(&self, lambda: f64) -> C64 {
        match *self {
            Chart::Generic { s, t } => lambda * (1.0 - s * s - t * t) / (s * t),
            Chart::Zero { a, .. } | Chart::One { a, .. } => a,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Chart::Generic { .. } => "H0",
            Chart::Zero { sign: Sign::Plus, .. } => "h0+",
            Chart::Zero { sign: Sign::Minus, .. } => "h0-",
            Chart::One { sign: Sign::Plus, .. } => "h1+",
            Chart::One { sign: Sign::Minus, .. } => "h1-",
        }
    }
}

pub fn hfamily_matrix(lambda: f64, chart: &Chart) -> Result<MatrixTrigPoly> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(HarperError::BadLambda(lambda));
    }
    let k = |v: C64| TrigPoly::constant(v);
    let a = k(chart.a(lambda)).sub(&TrigPoly::cos(c(2.0 * lambda, 0.0)));
    let m = match *chart {
        Chart::Generic { s, t } => {
            if s * t == c(0.0, 0.0) || !(s.is_finite() && t.is_finite()) {
                return Err(HarperError::ChartViolation(format!("s·t must be nonzero and finite, got s={s}, t={t}")));
            }
            MatrixTrigPoly::new(
                a,
                TrigPoly::from_terms([(0, s), (-1, t)]),
                TrigPoly::from_terms([(0, -s), (1, -t)]),
                k(s * t / lambda),
            )?
        }
        Chart::Zero { sign, .. } => {
            let p = sign.value();
            MatrixTrigPoly::new(a, k(c(p, 0.0)), k(c(-p, 0.0)), TrigPoly::zero())?
        }
        Chart::One { sign, .. } => {
            let p = sign.value();
            MatrixTrigPoly::new(a, TrigPoly::monomial(-1, c(p, 0.0)), TrigPoly::monomial(1, c(-p, 0.0)), TrigPoly::zero())?
        }
    };
    Ok(m)
}

/// `max |M(2π-z) - σ M⁻¹(z) σ|` over `points`.
pub fn symmetry_residual(m: &MatrixTrigPoly, points: &[C64]) -> f64 {
    let mut worst: f64 = 0.0;
    for &z in points {
        let l = m.eval(2.0 * PI - z);
        let r = m.eval(z);
        // σ M⁻¹ σ = [[a, -c], [-b, d]] when det M = 1.
        let rhs = [[r[0][0], -r[1][0]], [-r[0][1], r[1][1]]];
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((l[i][j] - rhs[i][j]).norm());
            }
        }
    }
    worst
}

/// Exact value `(a + b√d)/c` of `h/2π`, so the step map can run without
/// rounding. `new` strips square factors from `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct QuadraticRatio {
    a: i128,
    b: i128,
    d: i128,
    c: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl QuadraticRatio {
    pub fn new(a: i128, b: i128, d: i128, c: i128) -> Result<Self> {
        if c == 0 || d < 0 {
            return Err(HarperError::BadRatio(format!("({a} + {b}√{d})/{c}")));
        }
        // Pull square factors out of d.
        let (mut b, mut d) = (b, d.max(1));
        let mut f = 2i128;
        while f * f <= d {
            while d % (f * f) == 0 {
                d /= f * f;
                b = b.checked_mul(f).ok_or(HarperError::RatioOverflow)?;
            }
            f += 1;
        }
        let (a, b) = if d == 1 { (a.checked_add(b).ok_or(HarperError::RatioOverflow)?, 0) } else { (a, b) };
        let r = Self::reduced(a, b, d, c)?;
        let v = r.value();
        if !(v > 0.0 && v < 1.0) {
            return Err(HarperError::BadRatio(format!("h/2π = {v} is outside (0, 1)")));
        }
        Ok(r)
    }

    pub fn rational(p: i128, q: i128) -> Result<Self> {
        Self::new(p, 0, 1, q)
    }

    /// `(√5 - 1)/2`.
    pub fn golden() -> Self {
        Self { a: -1, b: 1, d: 5, c: 2 }
    }

    fn reduced(a: i128, b: i128, d: i128, c: i128) -> Result<Self> {
        let g = gcd(gcd(a, b), c).max(1);
        let s = if c < 0 { -1 } else { 1 };
        let d = if b == 0 { 1 } else { d };
        Ok(Self { a: s * a / g, b: s * b / g, d, c: s * c / g })
    }

    pub fn value(&self) -> f64 {
        (self.a as f64 + self.b as f64 * (self.d as f64).sqrt()) / self.c as f64
    }

    pub fn h(&self) -> f64 {
        2.0 * PI * self.value()
    }

    /// Sign of `u + v√d`.
    fn sign_of(&self, u: i128, v: i128) -> Result<i128> {
        let (su, sv) = (u.signum(), v.signum());
        if sv == 0 || su == sv {
            return Ok(if su != 0 { su } else { sv });
        }
        if su == 0 {
            return Ok(sv);
        }
        let uu = u.checked_mul(u).ok_or(HarperError::RatioOverflow)?;
        let vv = v.checked_mul(v).and_then(|x| x.checked_mul(self.d)).ok_or(HarperError::RatioOverflow)?;
        Ok(if uu > vv { su } else if uu < vv { sv } else { 0 })
    }

    fn floor(&self) -> Result<i128> {
        let mut k = self.value().floor() as i128;
        // Adjust k until k ≤ x < k + 1 holds exactly (c > 0).
        loop {
            let below = self.sign_of(self.a - k * self.c, self.b)? < 0;
            let above = self.sign_of(self.a - (k + 1) * self.c, self.b)? >= 0;
            if below {
                k -= 1;
            } else if above {
                k += 1;
            } else {
                return Ok(k);
            }
        }
    }

    /// Gauss map `x ↦ frac(1/x)`; `None` when `1/x` is an integer.
    pub fn gauss(&self) -> Result<Option<Self>> {
        let o = HarperError::RatioOverflow;
        let (a, b, d, c) = (self.a, self.b, self.d, self.c);
        // 1/x = c(a - b√d)/(a² - b²d).
        let den = a.checked_mul(a).zip(b.checked_mul(b).and_then(|x| x.checked_mul(d))).and_then(|(p, q)| p.checked_sub(q)).ok_or(o)?;
        let inv = Self::reduced(c.checked_mul(a).ok_or(HarperError::RatioOverflow)?, -c.checked_mul(b).ok_or(HarperError::RatioOverflow)?, d, den)?;
        let k = inv.floor()?;
        let frac = Self::reduced(inv.a - k * inv.c, inv.b, inv.d, inv.c)?;
        if frac.a == 0 && frac.b == 0 {
            return Ok(None);
        }
        Ok(Some(frac))
    }
}

impl fmt::Display for QuadraticRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.b == 0 {
            write!(f, "{}/{}", self.a, self.c)
        } else {
            write!(f, "({} + {}√{})/{}", self.a, self.b, self.d, self.c)
        }
    }
}

/// Default relative tolerance below which a float step ratio counts as rational.
pub const RATIONAL_TOL: f64 = 1e-9;

/// `h′ = 2π·frac(2π/h)` in floating point; `None` when `frac` is within
/// `tol` of 0 or 1.
pub fn step_map(h: f64, tol: f64) -> Option<f64> {
    let x = 2.0 * PI / h;
    let f = x - x.floor();
    if f < tol || 1.0 - f < tol {
        None
    } else {
        Some(2.0 * PI * f)
    }
}

/// `λ₁ = λ^{2π/h}`.
pub fn lambda_law(lambda: f64, h: f64) -> f64 {
    lambda.powf(2.0 * PI / h)
}

/// State of the renormalization map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HarperPoint {
    pub lambda: f64,
    pub chart: Chart,
    pub h: f64,
    /// Exact `h/2π` when known.
    pub ratio: Option<QuadraticRatio>,
    pub j: usize,
}

impl HarperPoint {
    /// Harper's equation at energy `E`.
    pub fn harper(lambda: f64, e: C64, h: f64) -> Self {
        Self { lambda, chart: Chart::Zero { sign: Sign::Minus, a: 2.0 * e }, h, ratio: None, j: 0 }
    }

    pub fn with_ratio(mut self, ratio: QuadraticRatio) -> Self {
        self.h = ratio.h();
        self.ratio = Some(ratio);
        self
    }

    pub fn matrix(&self) -> Result<MatrixTrigPoly> {
        hfamily_matrix(self.lambda, &self.chart)
    }

    pub fn st(&self) -> (C64, C64) {
        self.chart.st()
    }

    pub fn a(&self) -> C64 {
        self.chart.a(self.lambda)
    }

    /// Next step and its exact ratio, or `RationalTermination`.
    pub fn next_step(&self, tol: f64) -> Result<(f64, Option<QuadraticRatio>)> {
        match self.ratio {
            Some(r) => match r.gauss()? {
                Some(q) => Ok((q.h(), Some(q))),
                None => Err(HarperError::RationalTermination(r.value())),
            },
            None => step_map(self.h, tol).map(|h| (h, None)).ok_or(HarperError::RationalTermination(self.h / (2.0 * PI))),
        }
    }
}

/// Chooses the chart for extracted `(s, t, a)`.
pub fn classify(s: C64, t: C64, a: C64, tol: f64) -> Result<Chart> {
    match (s.norm() < tol, t.norm() < tol) {
        (false, false) => Ok(Chart::Generic { s, t }),
        (true, true) => Err(HarperError::ChartViolation(format!("both s={s} and t={t} vanish"))),
        (false, true) => Ok(Chart::Zero { sign: Sign::of(s.re), a }),
        (true, false) => Ok(Chart::One { sign: Sign::of(t.re), a }),
    }
}

/// Solver controls for the symmetric pair.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PairConfig {
    pub minimal: MinimalConfig,
    pub slots: SlotConfig,
    /// Smallest accepted `|C_D|` and relative wronskian.
    pub tol: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self { minimal: MinimalConfig::default(), slots: SlotConfig::default(), tol: 1e-10 }
    }
}

/// `ψ(z) = σ ψ_D(2π - z + h)`.
#[derive(Clone, Debug)]
pub struct Reflected {
    inner: MinimalSolution,
}

impl Reflected {
    pub fn new(inner: MinimalSolution) -> Self {
        Self { inner }
    }

    pub fn eval(&self, z: C64) -> std::result::Result<[C64; 2], ReductionError> {
        let v = self.inner.eval(2.0 * PI + self.inner.params().h - z)?;
        Ok([v[1], v[0]])
    }
}

impl SolutionSampler for Reflected {
    fn value(&self, z: C64) -> std::result::Result<[C64; 2], ReductionError> {
        self.eval(z)
    }

    fn window_center(&self, y: f64) -> f64 {
        2.0 * PI + self.inner.params().h - self.inner.window_center(-y)
    }

    fn phis(&self) -> (C64, C64) {
        self.inner.phis()
    }

    fn step(&self) -> f64 {
        self.inner.step()
    }

    fn kind(&self) -> Kind {
        Kind::B
    }
}

/// `φ±` prescribed for the family: `±iξ - π - (h/2) n±(b)`, `ξ = ln λ`.
pub fn family_phis(m: &MatrixTrigPoly, lambda: f64, h: f64) -> Result<(C64, C64)> {
    let g = m.b.indices()?;
    let xi = lambda.ln();
    Ok((c(-PI - 0.5 * h * g.n_plus as f64, xi), c(-PI - 0.5 * h * g.n_minus as f64, -xi)))
}

/// Normalized `ψ_D` and `ψ_B = σψ_D(2π - z + h)` with their coefficients.
#[derive(Clone, Debug)]
pub struct SymmetricPair {
    pub point: HarperPoint,
    pub matrix: MatrixTrigPoly,
    pub params: ReducedParams,
    pub bases: CanonicalBases,
    pub psi_d: MinimalSolution,
    pub psi_b: Reflected,
    /// `(A, B, C, D)` of `ψ_D` after division by `C_D`.
    pub coeff_d: AsymptoticCoefficients,
    pub coeff_b: AsymptoticCoefficients,
    /// `C_D` before normalization.
    pub raw_cd: C64,
    pub wronskian: C64,
    /// `A_B + 1`, `B_B + D_D e^{-4π²i/h}`, `C_B + A_D`, `D_B + B_D`, on
    /// Harper's line only: elsewhere the bases are not mirror images with unit factors.
    pub relations: Option<[C64; 4]>,
    pub relation_residual: Option<f64>,
}

pub fn symmetric_pair(point: &HarperPoint, cfg: &PairConfig) -> Result<SymmetricPair> {
    let m = point.matrix()?;
    let (pp, pm) = family_phis(&m, point.lambda, point.h)?;
    let params = ReducedParams::with_phis(&m, point.h, pp, pm, cfg.minimal.margin)?;
    let bases = CanonicalBases::for_params(&m, &params)?;
    let raw = assemble_minimal(&m, &params, Kind::D, &cfg.minimal)?;
    let raw_coeff = min_asymp_coeffs(&raw, &bases, &cfg.slots)?;
    let cd = raw_coeff.c();
    let big = raw_coeff.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(cd.norm() > cfg.tol * big) {
        return Err(HarperError::VanishingCd(cd.norm()));
    }
    let psi_d = raw.rescaled(1.0 / cd);
    let coeff_d = raw_coeff.scaled(1.0 / cd);
    let psi_b = Reflected::new(psi_d.clone());
    let coeff_b = min_asymp_coeffs(&psi_b, &bases, &cfg.slots)?;
    let z0 = c(psi_d.window_center(0.0), 0.0);
    let (u, v) = (psi_d.eval(z0)?, psi_b.eval(z0)?);
    let wronskian = u[0] * v[1] - u[1] * v[0];
    let size = (u[0].norm().max(u[1].norm())) * (v[0].norm().max(v[1].norm()));
    if !(wronskian.norm() > cfg.tol * size) {
        return Err(HarperError::DegenerateWronskian(wronskian.norm() / size));
    }
    let e = (-C64::i() * 4.0 * PI * PI / point.h).exp();
    let (d, b) = (&coeff_d, &coeff_b);
    let harper_line = matches!(point.chart, Chart::Zero { sign: Sign::Minus, .. });
    let relations = harper_line.then(|| [b.a() + d.c(), b.b() + d.d() * e, b.c() + d.a(), b.d() + d.b()]);
    let scale = d.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let relation_residual = relations.map(|r| r.iter().map(|r| r.norm()).fold(0.0, f64::max) / scale);
    Ok(SymmetricPair {
        point: *point,
        matrix: m,
        params,
        bases,
        psi_d,
        psi_b,
        coeff_d,
        coeff_b,
        raw_cd: cd,
        wronskian,
        relations,
        relation_residual,
    })
}

/// The pair for Harper's equation.
pub fn harper_pair(lambda: f64, e: C64, h: f64, cfg: &PairConfig) -> Result<SymmetricPair> {
    symmetric_pair(&HarperPoint::harper(lambda, e, h), cfg)
}

/// Deviations of the fitted `𝓜` from the `ℍ(λ₁)` shape, relative to the
/// leading coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ShapeResiduals {
    /// Both first harmonics of `𝓜₁₁` against `-λ₁`, relative to `λ₁`.
    pub cosine: f64,
    pub m11: f64,
    pub m12: f64,
    pub m21: f64,
    pub m22: f64,
    /// Non-constant harmonics of `𝓜₂₂`.
    pub m22_nonconstant: f64,
    /// `|a·st - λ₁(1-s²-t²)| / λ₁`.
    pub a_identity: f64,
}

impl ShapeResiduals {
    pub fn max(&self) -> f64 {
        [self.cosine, self.m11, self.m12, self.m21, self.m22, self.m22_nonconstant, self.a_identity].into_iter().fold(0.0, f64::max)
    }
}

/// `𝓜` read as a point of `ℍ(λ₁)`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Projection {
    pub lambda1: f64,
    /// From the Fourier coefficients of `𝓜₁₂`.
    pub s: C64,
    pub t: C64,
    /// Zeroth harmonic of `𝓜₁₁`.
    pub a: C64,
    /// From the asymptotic coefficients of `ψ_D`, when a closed form exists for the chart.
    pub s_formula: Option<C64>,
    pub t_formula: Option<C64>,
    pub formula_deviation: Option<f64>,
    pub shape: ShapeResiduals,
}

/// Closed-form `(s₁, t₁)` for the current chart, if one is known.
pub fn formula_st(pair: &SymmetricPair) -> Option<(C64, C64)> {
    let p = &pair.point;
    let l1 = lambda_law(p.lambda, p.h);
    let d = &pair.coeff_d;
    match p.chart {
        Chart::Zero { sign: Sign::Minus, .. } => Some((-l1 * d.d() / d.b(), -l1 * d.a())),
        Chart::Generic { s, t } => {
            let f = -C64::i() * p.lambda.sqrt() * (C64::i() * p.h / 8.0).exp();
            Some((-(f / s) * l1 * d.d() / d.b(), -(f / t) * l1 * d.a() / d.c()))
        }
        _ => None,
    }
}

fn project(mono: &MonodromyResult, lambda1: f64, formula: Option<(C64, C64)>) -> Projection {
    let [[m11, m12], [m21, m22]] = &mono.fits;
    let (s, t, a) = (m12.coeff(0), m12.coeff(-1), m11.coeff(0));
    let half = (m11.coeffs.len() / 2) as i64;
    let lead = lambda1.max(s.norm()).max(t.norm()).max(a.norm());
    let others = |f: &crate::monodromy::EntryFit, keep: &[i64]| {
        (-half..half).filter(|l| !keep.contains(l)).map(|l| f.coeff(l).norm()).fold(0.0, f64::max)
    };
    let st = s * t;
    let shape = ShapeResiduals {
        cosine: (m11.coeff(-1) + lambda1).norm().max((m11.coeff(1) + lambda1).norm()) / lambda1,
        m11: others(m11, &[-1, 0, 1]) / lead,
        m12: others(m12, &[-1, 0]) / lead,
        m21: (m21.coeff(0) + s).norm().max((m21.coeff(1) + t).norm()).max(others(m21, &[0, 1])) / lead,
        m22: (m22.coeff(0) - st / lambda1).norm().max(others(m22, &[0])) / lead,
        m22_nonconstant: others(m22, &[0]) / lead,
        a_identity: (a * st - lambda1 * (1.0 - s * s - t * t)).norm() / lambda1,
    };
    let formula_deviation = formula.map(|(fs, ft)| {
        let rel = |x: C64, y: C64| (x - y).norm() / x.norm().max(y.norm()).max(1e-300);
        if st.norm() == 0.0 {
            (fs - s).norm().max((ft - t).norm()) / lead
        } else {
            rel(fs, s).max(rel(ft, t))
        }
    });
    Projection { lambda1, s, t, a, s_formula: formula.map(|f| f.0), t_formula: formula.map(|f| f.1), formula_deviation, shape }
}

/// Controls for the monodromy and renormalization steps.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RenormConfig {
    pub pair: PairConfig,
    pub samples_per_period: usize,
    pub shape_tol: f64,
    pub degenerate_tol: f64,
    pub rational_tol: f64,
    /// Denominators below this skip a structure comparison.
    pub skip_threshold: f64,
}

impl Default for RenormConfig {
    fn default() -> Self {
        Self {
            pair: PairConfig::default(),
            samples_per_period: 64,
            shape_tol: 1e-4,
            degenerate_tol: 1e-8,
            rational_tol: RATIONAL_TOL,
            skip_threshold: 1e-12,
        }
    }
}

/// Monodromy of the symmetric pair and its reading in `ℍ(λ₁)`.
#[derive(Clone, Debug)]
pub struct PairMonodromy {
    pub pair: SymmetricPair,
    pub monodromy: MonodromyResult,
    pub structure: StructureReport,
    pub projection: Projection,
}

impl PairMonodromy {
    pub fn shape_ok(&self, tol: f64) -> bool {
        self.projection.shape.max() < tol
    }
}

pub fn pair_monodromy(point: &HarperPoint, cfg: &RenormConfig) -> Result<PairMonodromy> {
    let pair = symmetric_pair(point, &cfg.pair)?;
    let n = pair.params.n;
    let monodromy = monodromy_matrix(&pair.psi_d, &pair.psi_b, cfg.samples_per_period, n)?;
    let alpha2 = pair.bases.f.1.multiplier_constant();
    let beta1 = pair.bases.g.0.multiplier_constant();
    let structure = structure_check(&monodromy, n, alpha2, beta1, &pair.coeff_d, &pair.coeff_b, cfg.skip_threshold);
    let lambda1 = lambda_law(point.lambda, point.h);
    let projection = project(&monodromy, lambda1, formula_st(&pair));
    Ok(PairMonodromy { pair, monodromy, structure, projection })
}

/// Harper monodromy with the shape enforced.
pub fn harper_monodromy(lambda: f64, e: C64, h: f64, cfg: &RenormConfig) -> Result<PairMonodromy> {
    let out = pair_monodromy(&HarperPoint::harper(lambda, e, h), cfg)?;
    if !out.shape_ok(cfg.shape_tol) {
        return Err(HarperError::ShapeMismatch(out.projection.shape));
    }
    Ok(out)
}

/// One renormalization step with its diagnostics.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub next: HarperPoint,
    pub result: PairMonodromy,
    pub seconds: f64,
}

/// `(λ, M, h) ↦ (λ^{2π/h}, 𝓜, 2π·frac(2π/h))`. The new `(s, t)` come from
/// the closed form when the chart has one, otherwise from the Fourier fit.
pub fn renorm_step(point: &HarperPoint, cfg: &RenormConfig) -> Result<StepOutcome> {
    let start = Instant::now();
    let (h_next, ratio) = point.next_step(cfg.rational_tol)?;
    let result = pair_monodromy(point, cfg)?;
    if !result.shape_ok(cfg.shape_tol) {
        return Err(HarperError::ShapeMismatch(result.projection.shape));
    }
    let p = &result.projection;
    let (s, t) = match (p.s_formula, p.t_formula) {
        (Some(s), Some(t)) => (s, t),
        _ => (p.s, p.t),
    };
    let chart = classify(s, t, p.a, cfg.degenerate_tol)?;
    let next = HarperPoint { lambda: p.lambda1, chart, h: h_next, ratio, j: point.j + 1 };
    Ok(StepOutcome { next, result, seconds: start.elapsed().as_secs_f64() })
}

/// Per-step record kept in a trajectory.
#[derive(Clone, Debug, Serialize)]
pub struct StepDiagnostics {
    pub j: usize,
    pub chart: &'static str,
    pub shape: ShapeResiduals,
    pub det_residual: f64,
    pub fit_residual: f64,
    pub periodicity_residual: f64,
    pub formula_deviation: Option<f64>,
    pub relation_residual: Option<f64>,
    /// `(|A_D|, |B_D|, |C_D|, |D_D|)` after normalization.
    pub coefficient_norms: [f64; 4],
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub points: Vec<HarperPoint>,
    pub steps: Vec<StepDiagnostics>,
    /// Why the iteration stopped early, if it did.
    pub termination: Option<String>,
}

pub fn renorm_iterate(start: &HarperPoint, steps: usize, cfg: &RenormConfig) -> Trajectory {
    let mut points = vec![*start];
    let mut diags = Vec::new();
    let mut termination = None;
    for _ in 0..steps {
        let cur = *points.last().expect("nonempty");
        match renorm_step(&cur, cfg) {
            Ok(out) => {
                let r = &out.result;
                diags.push(StepDiagnostics {
                    j: out.next.j,
                    chart: cur.chart.name(),
                    shape: r.projection.shape,
                    det_residual: r.monodromy.det_residual,
                    fit_residual: r.monodromy.fit_residual,
                    periodicity_residual: r.monodromy.periodicity_residual,
                    formula_deviation: r.projection.formula_deviation,
                    relation_residual: r.pair.relation_residual,
                    coefficient_norms: r.pair.coeff_d.values.map(|v| v.norm()),
                    seconds: out.seconds,
                });
                points.push(out.next);
            }
            Err(e) => {
                termination = Some(e.to_string());
                break;
            }
        }
    }
    Trajectory { points, steps: diags, termination }
}

impl Trajectory {
    /// Columns `j, lambda, re_s, im_s, re_t, im_t, h, shape_residual, det_residual`;
    /// the residuals are those of the step that produced the row (0 for the start).
    pub fn write_csv<W: Write>(&self, w: W) -> std::result::Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["j", "lambda", "re_s", "im_s", "re_t", "im_t", "h", "shape_residual", "det_residual"])?;
        for (k, p) in self.points.iter().enumerate() {
            let (s, t) = p.st();
            let (shape, det) = if k == 0 { (0.0, 0.0) } else { (self.steps[k - 1].shape.max(), self.steps[k - 1].det_residual) };
            out.write_record(
                [p.j as f64, p.lambda, s.re, s.im, t.re, t.im, p.h, shape, det]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if i == 0 { format!("{}", *v as usize) } else { format!("{v:e}") }),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}
