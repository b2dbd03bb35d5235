//! The meromorphic function `σ` with `σ(z+h) = (1 + e^{-iz}) σ(z-h)`,
//! analytic and zero-free in `S₀ = {|Re z| < π + h}`, tending to 1 at `-i∞`.
//!
//! Inside `S₀` we compute `θ₀ = ln σ` as a trapezoid-rule integral of `L₀`
//! against `sec²` along a vertical line; elsewhere the functional equation
//! moves the point into the base band `|Re z| ≤ h`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::special::{dilog, ln_1p};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigmaError {
    #[error("point {0} lies on a branch cut of l0")]
    OnCut(C64),
    #[error("point {0} is outside the strip |Re z| < π + h")]
    OutOfStrip(C64),
    #[error("point is within the guard distance of the singular point {point}")]
    NearSingular { point: C64 },
    #[error("|Re z| = {0} exceeds the continuation range")]
    TooFar(f64),
    #[error("step h = {0} must be positive and finite")]
    BadStep(f64),
}

/// `l₀(z) = ln(1 + e^{-iz})` on the plane cut along `(-∞,-π] ∪ [π,∞)`,
/// vanishing as `z → -i∞`.
pub fn l0_eval(z: C64) -> Result<C64, SigmaError> {
    check_cut(z)?;
    Ok(l0_unchecked(z))
}

fn l0_unchecked(z: C64) -> C64 {
    let i = C64::i();
    if z.im <= 0.0 {
        ln_1p((-i * z).exp())
    } else {
        -i * z + ln_1p((i * z).exp())
    }
}

/// `L₀(z) = ∫_{-i∞}^{z} l₀`.
pub fn big_l0_eval(z: C64) -> Result<C64, SigmaError> {
    check_cut(z)?;
    Ok(big_l0_unchecked(z))
}

fn big_l0_unchecked(z: C64) -> C64 {
    let i = C64::i();
    if z.im <= 0.0 {
        -i * dilog(-(-i * z).exp())
    } else {
        -i * z * z * 0.5 + i * (PI * PI / 6.0) + i * dilog(-(i * z).exp())
    }
}

fn check_cut(z: C64) -> Result<(), SigmaError> {
    if z.im == 0.0 && z.re.abs() >= PI {
        Err(SigmaError::OnCut(z))
    } else {
        Ok(())
    }
}

/// Classification attached to every `σ` value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaFlag {
    Regular,
    NearZero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaValue {
    pub value: C64,
    pub flag: SigmaFlag,
}

/// Closed-form residue at `-π-h` together with its numerical cross-check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SigmaResidue {
    pub closed_form: C64,
    pub numeric: C64,
    pub relative_error: f64,
}

#[derive(Clone, Debug)]
pub struct SigmaEngine {
    h: f64,
    pole_guard: f64,
    /// Trapezoid step as a fraction of the analyticity half-width.
    step_fraction: f64,
    /// `exp(-π W / h)` target for the truncation window.
    tail_exponent: f64,
    max_reduce: f64,
}

pub const POLE_GUARD: f64 = 1e-3;

impl SigmaEngine {
    pub fn new(h: f64) -> Result<Self, SigmaError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(SigmaError::BadStep(h));
        }
        Ok(Self { h, pole_guard: POLE_GUARD, step_fraction: 1.0 / 7.0, tail_exponent: 40.0, max_reduce: 50.0 * h })
    }

    pub fn with_pole_guard(mut self, guard: f64) -> Self {
        self.pole_guard = guard;
        self
    }

    /// Largest `|Re z|` accepted by the guarded evaluators.
    pub fn with_max_reduce(mut self, max_reduce: f64) -> Self {
        self.max_reduce = max_reduce;
        self
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// `θ₀(z)` for `z ∈ S₀`.
    pub fn theta0(&self, z: C64) -> Result<C64, SigmaError> {
        if z.re.abs() >= PI + self.h {
            return Err(SigmaError::OutOfStrip(z));
        }
        Ok(self.theta0_unchecked(z))
    }

    /// Vertical line `Re z' = c` between `z ± h` and inside `|Re z'| < π`,
    /// chosen to keep the integrand's singularities as far as possible.
    fn line_for(&self, x: f64) -> (f64, f64) {
        let h = self.h;
        let ax = x.abs();
        let c = ax.min((PI - h + ax) / 2.0).max(0.0);
        let width = (h - (ax - c)).min(PI - c);
        (c.copysign(x), width)
    }

    fn theta0_unchecked(&self, z: C64) -> C64 {
        let h = self.h;
        let (c, width) = self.line_for(z.re);
        let step = (width * self.step_fraction).min(0.5);
        let y = z.im;
        let window = h / PI * (self.tail_exponent + 2.0 * (2.0 + y.abs() + 10.0 * h).ln());
        let half = (window / step).ceil() as i64;
        let k = PI / (2.0 * h);
        let sum: C64 = (-half..=half)
            .map(|j| {
                let t = y + j as f64 * step;
                let zp = C64::new(c, t);
                let cs = (k * (z - zp)).cos();
                big_l0_unchecked(zp) / (cs * cs)
            })
            .sum();
        sum * (step * PI / (8.0 * h * h))
    }

    /// Nearest lattice zero (`π+h+2πl+2hk`) and pole (`-π-h-2πl-2hk`), `l, k ≥ 0`.
    pub fn nearest_singularities(&self, z: C64) -> (C64, C64) {
        let zero = nearest_chain_point(z, PI + self.h, self.h);
        let pole = -nearest_chain_point(-z, PI + self.h, self.h);
        (zero, pole)
    }

    /// `ln σ(z)` on some branch; use when `|σ|` may over- or underflow.
    pub fn log_eval(&self, z: C64) -> Result<(C64, SigmaFlag), SigmaError> {
        if z.re.abs() > self.max_reduce {
            return Err(SigmaError::TooFar(z.re));
        }
        let (zero, pole) = self.nearest_singularities(z);
        if (z - pole).norm() < self.pole_guard {
            return Err(SigmaError::NearSingular { point: pole });
        }
        let flag = if (z - zero).norm() < self.pole_guard { SigmaFlag::NearZero } else { SigmaFlag::Regular };
        Ok((self.log_eval_unchecked(z), flag))
    }

    /// `ln σ(z)` without guards; callers must stay off the singular lattices.
    pub fn log_eval_unchecked(&self, z: C64) -> C64 {
        let h = self.h;
        let i = C64::i();
        let mut acc = C64::new(0.0, 0.0);
        let mut w = z;
        while w.re > h {
            acc += ln_1p((-i * (w - h)).exp());
            w -= 2.0 * h;
        }
        while w.re < -h {
            acc -= ln_1p((-i * (w + h)).exp());
            w += 2.0 * h;
        }
        acc + self.theta0_unchecked(w)
    }

    pub fn eval(&self, z: C64) -> Result<SigmaValue, SigmaError> {
        let (l, flag) = self.log_eval(z)?;
        Ok(SigmaValue { value: l.exp(), flag })
    }

    pub fn value(&self, z: C64) -> Result<C64, SigmaError> {
        self.eval(z).map(|s| s.value)
    }

    /// Residue at the first pole `-π-h`, closed form and `-iσ(-π+h)`.
    pub fn residue(&self) -> SigmaResidue {
        let h = self.h;
        let i = C64::i();
        let closed_form = (h / PI).sqrt() * (-i * (PI * PI / (12.0 * h)) - i * (PI / 4.0) - i * (h / 12.0)).exp();
        let numeric = -i * self.log_eval_unchecked(C64::new(-PI + h, 0.0)).exp();
        let relative_error = (numeric - closed_form).norm() / closed_form.norm();
        SigmaResidue { closed_form, numeric, relative_error }
    }

    /// `σ(-π)` from the explicit formula.
    pub fn closed_form_at_minus_pi(&self) -> C64 {
        let h = self.h;
        let i = C64::i();
        (-i * (PI * PI / (12.0 * h)) + i * (h / 24.0)).exp() / 2f64.sqrt()
    }

    /// Upper asymptote `exp(-iz²/4h + iπ²/12h + ih/12)`.
    pub fn upper_asymptote(&self, z: C64) -> C64 {
        let h = self.h;
        let i = C64::i();
        (-i * z * z / (4.0 * h) + i * (PI * PI / (12.0 * h)) + i * (h / 12.0)).exp()
    }

    /// Residuals of the identities satisfied by `σ` on a set of points.
    pub fn selfcheck(&self, points: &[C64]) -> SigmaSelfCheck {
        let h = self.h;
        let i = C64::i();
        let mut out = SigmaSelfCheck::default();
        let at_minus_pi = self.log_eval_unchecked(C64::new(-PI, 0.0)).exp();
        let closed = self.closed_form_at_minus_pi();
        out.value_at_minus_pi = (at_minus_pi - closed).norm() / closed.norm();
        out.residue = self.residue().relative_error;
        for &z in points {
            if !self.off_lattice(&[z + h, z - h, z + PI, z - PI, z, -z], 0.2) {
                continue;
            }
            out.points += 1;
            let s = |w: C64| self.log_eval_unchecked(w).exp();
            let up = s(z + h);
            let r = (up - (1.0 + (-i * z).exp()) * s(z - h)).norm() / (1.0 + up.norm());
            out.functional = out.functional.max(r);
            let up = s(z + PI);
            let r = (up - (1.0 + (-i * PI * z / h).exp()) * s(z - PI)).norm() / (1.0 + up.norm());
            out.shift = out.shift.max(r);
            let prod = (self.log_eval_unchecked(z) + self.log_eval_unchecked(-z)).exp();
            let r = (prod / self.reflection_factor(z) - 1.0).norm();
            out.reflection = out.reflection.max(r);
            let r = (s(z.conj()).conj() * s(-z) - 1.0).norm();
            out.conjugation = out.conjugation.max(r);
        }
        out
    }

    /// `σ(z) σ(-z)`, i.e. `exp(-iz²/4h + iπ²/12h + ih/12)`.
    pub fn reflection_factor(&self, z: C64) -> C64 {
        self.upper_asymptote(z)
    }

    /// True if every point is at least `margin` away from the zero and pole lattices.
    pub fn off_lattice(&self, pts: &[C64], margin: f64) -> bool {
        pts.iter().all(|&w| {
            let (zero, pole) = self.nearest_singularities(w);
            (w - zero).norm() >= margin && (w - pole).norm() >= margin
        })
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct SigmaSelfCheck {
    pub points: usize,
    pub value_at_minus_pi: f64,
    pub residue: f64,
    pub functional: f64,
    pub shift: f64,
    pub reflection: f64,
    pub conjugation: f64,
}

/// Nearest point of `{base + 2πl + 2hk : l, k ≥ 0}` to `z`.
fn nearest_chain_point(z: C64, base: f64, h: f64) -> C64 {
    let target = z.re - base;
    let mut best = base;
    let mut best_d = f64::INFINITY;
    let lmax = (target.max(0.0) / (2.0 * PI)).ceil() as i64 + 1;
    for l in 0..=lmax {
        let r = target - 2.0 * PI * l as f64;
        let k = (r / (2.0 * h)).round().max(0.0);
        let p = base + 2.0 * PI * l as f64 + 2.0 * h * k;
        let d = (z.re - p).abs();
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    C64::new(best, 0.0)
}
