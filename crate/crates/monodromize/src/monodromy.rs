//! Monodromy matrices of pairs of minimal solutions.
//!
//! For a pair `(ψ_X, ψ_Y)` with constant wronskian `w`,
//! `(ψ_X(z+2π), ψ_Y(z+2π)) = (ψ_X(z), ψ_Y(z)) 𝓜ᵀ(z)` and each entry is a
//! quotient of wronskians. Entries are `h`-periodic, so they are sampled over
//! one period on the real line and expanded in `e^{ilz₁}`, `z₁ = 2πz/h`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::reduction::{AsymptoticCoefficients, ReductionError, SolutionSampler};
use crate::trigpoly::{omega_classify, MatrixTrigPoly, OmegaReport, TrigPoly};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonodromyError {
    #[error("wronskian of the pair is {0:e}, below tolerance")]
    DegeneratePair(f64),
    #[error("{0} is not implemented")]
    Unsupported(&'static str),
    #[error("samples per period must be a power of two ≥ 8, got {0}")]
    BadSampling(usize),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

type Result<T> = std::result::Result<T, MonodromyError>;

/// Smallest accepted `|{ψ_X, ψ_Y}|` relative to the solution sizes.
pub const PAIR_TOL: f64 = 1e-10;

pub fn det2(p: [C64; 2], q: [C64; 2]) -> C64 {
    p[0] * q[1] - p[1] * q[0]
}

/// `{ψ, χ}(z) = det(ψ(z), χ(z))`.
pub fn wronskian(psi: &dyn SolutionSampler, chi: &dyn SolutionSampler, z: C64) -> Result<C64> {
    Ok(det2(psi.value(z)?, chi.value(z)?))
}

/// Mean wronskian over `points` and its relative spread.
pub fn wronskian_spread(psi: &dyn SolutionSampler, chi: &dyn SolutionSampler, points: &[C64]) -> Result<(C64, f64)> {
    let vals = points.iter().map(|&z| wronskian(psi, chi, z)).collect::<Result<Vec<_>>>()?;
    let mean = vals.iter().sum::<C64>() / vals.len() as f64;
    let spread = vals.iter().map(|v| (v - mean).norm()).fold(0.0, f64::max) / mean.norm();
    Ok((mean, spread))
}

/// Fourier data of one entry: `coeffs[k]` multiplies `e^{i(k - N/2)z₁}`.
#[derive(Clone, Debug, Serialize)]
pub struct EntryFit {
    pub coeffs: Vec<C64>,
}

impl EntryFit {
    pub fn coeff(&self, l: i64) -> C64 {
        let half = (self.coeffs.len() / 2) as i64;
        if l < -half || l >= half {
            return C64::new(0.0, 0.0);
        }
        self.coeffs[(l + half) as usize]
    }

    /// Harmonics `|l| ≤ order` as a polynomial in `z₁`.
    pub fn truncated(&self, order: i64) -> TrigPoly {
        TrigPoly::from_terms((-order..=order).map(|l| (l, self.coeff(l))))
    }

    /// Largest harmonic with `|l| > order`.
    pub fn tail(&self, order: i64) -> f64 {
        let half = (self.coeffs.len() / 2) as i64;
        (-half..half).filter(|l| l.abs() > order).map(|l| self.coeff(l).norm()).fold(0.0, f64::max)
    }

    pub fn leading(&self, order: i64) -> f64 {
        (-order..=order).map(|l| self.coeff(l).norm()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MonodromyResult {
    pub h: f64,
    /// Order used for truncation.
    pub n: i64,
    /// `{ψ_X, ψ_Y}` (sample mean) and its relative spread.
    pub wronskian: C64,
    pub wronskian_spread: f64,
    /// Sample points on one period.
    pub points: Vec<C64>,
    pub samples: Vec<[[C64; 2]; 2]>,
    pub fits: [[EntryFit; 2]; 2],
    /// Entries truncated to `|l| ≤ n`, as functions of `z₁ = 2πz/h`.
    pub matrix: MatrixTrigPoly,
    /// Samples vs the truncated fit, relative to the largest sample.
    pub fit_residual: f64,
    /// `max |det 𝓜(z) - 1|` over the samples.
    pub det_residual: f64,
    /// Non-constant harmonics and `|c₀ - 1|` of the fitted determinant.
    pub det_poly_residual: f64,
    /// Fresh samples at `z + h` against the fit at `z`.
    pub periodicity_residual: f64,
    /// Largest harmonic beyond order `n`, relative to the leading ones.
    pub tail_ratio: f64,
    pub omega: OmegaReport,
}

fn dft(values: &[C64], points: &[C64], h: f64) -> EntryFit {
    let n = values.len();
    let half = (n / 2) as i64;
    let coeffs = (-half..half)
        .map(|l| {
            values.iter().zip(points).map(|(v, z)| v * (-C64::i() * 2.0 * PI * l as f64 * z / h).exp()).sum::<C64>()
                / n as f64
        })
        .collect();
    EntryFit { coeffs }
}

fn entries(x: &dyn SolutionSampler, y: &dyn SolutionSampler, z: C64, w: C64) -> Result<[[C64; 2]; 2]> {
    let s = 2.0 * PI;
    let (x0, y0) = (x.value(z)?, y.value(z)?);
    let (x1, y1) = (x.value(z + s)?, y.value(z + s)?);
    Ok([[det2(x1, y0) / w, det2(x0, x1) / w], [det2(y1, y0) / w, det2(x0, y1) / w]])
}

/// `𝓜` for the ordered pair `(ψ_X, ψ_Y)`; `n` sets the truncation order.
pub fn monodromy_matrix(x: &dyn SolutionSampler, y: &dyn SolutionSampler, samples_per_period: usize, n: i64) -> Result<MonodromyResult> {
    if samples_per_period < 8 || !samples_per_period.is_power_of_two() {
        return Err(MonodromyError::BadSampling(samples_per_period));
    }
    let h = x.step();
    let x0 = 0.5 * (x.window_center(0.0) + y.window_center(0.0));
    let points: Vec<C64> = (0..samples_per_period).map(|j| C64::new(x0 + h * j as f64 / samples_per_period as f64, 0.0)).collect();
    let ws = points.iter().map(|&z| wronskian(x, y, z)).collect::<Result<Vec<_>>>()?;
    let w = ws.iter().sum::<C64>() / ws.len() as f64;
    let size = points
        .iter()
        .map(|&z| Ok(x.value(z)?.iter().chain(y.value(z)?.iter()).map(|v| v.norm()).fold(0.0, f64::max)))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    if !(w.norm() > PAIR_TOL * size * size) {
        return Err(MonodromyError::DegeneratePair(w.norm()));
    }
    let spread = ws.iter().map(|v| (v - w).norm()).fold(0.0, f64::max) / w.norm();
    let samples = points.iter().map(|&z| entries(x, y, z, w)).collect::<Result<Vec<_>>>()?;
    let fit = |i: usize, j: usize| dft(&samples.iter().map(|s| s[i][j]).collect::<Vec<_>>(), &points, h);
    let fits = [[fit(0, 0), fit(0, 1)], [fit(1, 0), fit(1, 1)]];
    let matrix = MatrixTrigPoly {
        a: fits[0][0].truncated(n),
        b: fits[0][1].truncated(n),
        c: fits[1][0].truncated(n),
        d: fits[1][1].truncated(n),
    };
    let z1 = |z: C64| 2.0 * PI * z / h;
    let big = samples.iter().flat_map(|s| s.iter().flatten().map(|v| v.norm())).fold(0.0, f64::max);
    let mut fit_residual: f64 = 0.0;
    let mut det_residual: f64 = 0.0;
    for (s, &z) in samples.iter().zip(&points) {
        let m = matrix.eval(z1(z));
        for i in 0..2 {
            for j in 0..2 {
                fit_residual = fit_residual.max((s[i][j] - m[i][j]).norm() / big);
            }
        }
        det_residual = det_residual.max((s[0][0] * s[1][1] - s[0][1] * s[1][0] - 1.0).norm());
    }
    let det_poly = matrix.a.mul(&matrix.d).sub(&matrix.b.mul(&matrix.c));
    let det_poly_residual = det_poly
        .terms()
        .map(|(l, c)| if l == 0 { (c - 1.0).norm() } else { c.norm() })
        .fold(0.0, f64::max);
    // Periodicity: a fresh sample set shifted by h.
    let mut periodicity_residual: f64 = 0.0;
    for (k, &z) in points.iter().enumerate().step_by((samples_per_period / 16).max(1)) {
        let shifted = entries(x, y, z + h, w)?;
        for i in 0..2 {
            for j in 0..2 {
                periodicity_residual = periodicity_residual.max((shifted[i][j] - samples[k][i][j]).norm() / big);
            }
        }
    }
    let lead = fits.iter().flatten().map(|f| f.leading(n)).fold(0.0, f64::max);
    let tail_ratio = fits.iter().flatten().map(|f| f.tail(n)).fold(0.0, f64::max) / lead;
    let omega = omega_classify(&matrix, n);
    Ok(MonodromyResult {
        h,
        n,
        wronskian: w,
        wronskian_spread: spread,
        points,
        samples,
        fits,
        matrix,
        fit_residual,
        det_residual,
        det_poly_residual,
        periodicity_residual,
        tail_ratio,
        omega,
    })
}

/// Any natural pair; only `|l| ≤ n` is expected of every entry.
pub fn natural_pair_monodromy(x: &dyn SolutionSampler, y: &dyn SolutionSampler, samples_per_period: usize, n: i64) -> Result<MonodromyResult> {
    monodromy_matrix(x, y, samples_per_period, n)
}

/// One fitted leading coefficient against its closed form.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub entry: &'static str,
    pub harmonic: i64,
    pub fitted: C64,
    pub predicted: Option<C64>,
    pub relative_error: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StructureReport {
    pub comparisons: Vec<Comparison>,
    /// Largest relative error among the comparisons that were made.
    pub max_error: f64,
    pub skipped: usize,
    pub omega_member: bool,
}

/// Compares `𝓜` of `(ψ_D, ψ_B)` with the leading-coefficient formulas built
/// from `α₂⁰`, `β₁⁰` and the asymptotic coefficients. A comparison whose
/// denominator is below `threshold` is skipped.
pub fn structure_check(
    result: &MonodromyResult,
    n: i64,
    alpha2: C64,
    beta1: C64,
    d: &AsymptoticCoefficients,
    b: &AsymptoticCoefficients,
    threshold: f64,
) -> StructureReport {
    let e = (C64::i() * 4.0 * PI * PI / result.h).exp();
    let q = |num: C64, den: C64| if den.norm() < threshold { None } else { Some(num / den) };
    let mul = |f: C64, v: Option<C64>| v.map(|v| f * v);
    let rows: [(&'static str, usize, usize, i64, Option<C64>); 8] = [
        ("M11", 0, 0, -n, Some(alpha2)),
        ("M11", 0, 0, n, Some(beta1)),
        ("M12", 0, 1, -n, mul(-alpha2, q(d.a(), b.a()))),
        ("M12", 0, 1, n - 1, mul(-beta1, q(d.d(), b.d()))),
        ("M21", 1, 0, -(n - 1), mul(alpha2 * e, q(b.b(), d.b()))),
        ("M21", 1, 0, n, mul(beta1, q(b.c(), d.c()))),
        ("M22", 1, 1, -(n - 1), mul(-alpha2 * e, q(d.a() * b.b(), d.b() * b.a()))),
        ("M22", 1, 1, n - 1, mul(-beta1, q(d.d() * b.c(), b.d() * d.c()))),
    ];
    let comparisons: Vec<Comparison> = rows
        .into_iter()
        .map(|(entry, i, j, l, predicted)| {
            let fitted = result.fits[i][j].coeff(l);
            let relative_error = predicted.map(|p| (fitted - p).norm() / p.norm().max(fitted.norm()));
            Comparison { entry, harmonic: l, fitted, predicted, relative_error }
        })
        .collect();
    let max_error = comparisons.iter().filter_map(|c| c.relative_error).fold(0.0, f64::max);
    let skipped = comparisons.iter().filter(|c| c.predicted.is_none()).count();
    StructureReport { comparisons, max_error, skipped, omega_member: result.omega.member }
}

/// Hook for the canonical factorization of `𝓜`; it needs minimal solutions
/// for shifted parameters, which are not built here.
pub fn canonical_factorization(_result: &MonodromyResult) -> Result<()> {
    Err(MonodromyError::Unsupported("canonical factorization of the monodromy matrix"))
}

/// `(𝓜` of `(ψ_Y, ψ_X)`) from that of `(ψ_X, ψ_Y)`: conjugation by the swap.
pub fn swapped(m: &[[C64; 2]; 2]) -> [[C64; 2]; 2] {
    [[m[1][1], m[1][0]], [m[0][1], m[0][0]]]
}
