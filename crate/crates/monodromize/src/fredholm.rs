//! Nyström solver for `ψ = δ·m + Kψ` on a strictly vertical contour.
//!
//! Everything here lives in model coordinates: the step is the model step
//! and `κ(z,ζ) = θ(z,ζ)[m(z)m̃(ζ) - m(ζ)m̃(z)] w(ζ) / (2ih W)` with
//! `W = {m, m̃}`. The unknown is stored scaled, `u = s·ψ` with
//! `s(z) = e^{|y|/2} p₀(z)`, which keeps every matrix entry bounded.

use std::f64::consts::PI;
use std::sync::Arc;

use faer::complex_native::c64;
use faer::prelude::*;
use faer::Mat;
use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::model::{cot_kernel, AsymptoticCoeffs, ModelError, ModelParams, ModelSolution};
use crate::quad::gauss_legendre;

/// The perturbation `w` on the right of the model equation.
pub type Perturbation = Arc<dyn Fn(C64) -> C64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FredholmError {
    #[error("no admissible contour: {0}")]
    Infeasible(String),
    #[error("weight overflows at truncation height {0}")]
    WeightOverflow(f64),
    #[error("only the zero solution was found (smallest singular value {0:e})")]
    Degenerate(f64),
    #[error("{z} is {offset} away from the contour, beyond the continuation reach {reach}")]
    OutOfVicinity { z: C64, offset: f64, reach: f64 },
    #[error("coupling value mismatch {0:e}")]
    CouplingMismatch(f64),
    #[error("extra pole at {0} is outside the left vicinity where the coupling row is valid")]
    UnsupportedPole(C64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

const GL_ORDER: usize = 16;
/// Minimum angle (radians) between any contour segment and the horizontal.
pub const VERTICAL_ANGLE: f64 = 0.2;

/// Discretization controls.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ContourSpec {
    /// Truncation height; `None` picks `ln(1e10)/μ` clipped to `[12, 60]`.
    pub t_max: Option<f64>,
    /// Panel density multiplier; doubling it doubles the node count.
    pub resolution: f64,
    /// Height at which the middle part joins the vertical rays.
    pub join_height: f64,
    /// Largest panel length.
    pub max_panel: f64,
}

impl Default for ContourSpec {
    fn default() -> Self {
        Self { t_max: None, resolution: 1.0, join_height: 2.0, max_panel: 0.5 }
    }
}

#[derive(Clone, Copy, Debug)]
struct Panel {
    y0: f64,
    y1: f64,
    x0: f64,
    slope: f64,
    first: usize,
}

/// Piecewise linear curve `x = X(y)` with quadrature nodes along it.
#[derive(Clone, Debug)]
pub struct Contour {
    pub x_down: f64,
    pub x_up: f64,
    /// `(y, x)` corners, increasing in `y`.
    pub knots: Vec<(f64, f64)>,
    pub forbidden: Vec<(C64, f64)>,
    pub t_max: f64,
    pub h: f64,
    pub nodes: Vec<C64>,
    /// Complex weights `dζ`.
    pub weights: Vec<C64>,
    panels: Vec<Panel>,
}

fn seg_distance(p: C64, a: C64, b: C64) -> f64 {
    let ab = b - a;
    let t = ((p - a) * ab.conj()).re / ab.norm_sqr();
    (p - (a + ab * t.clamp(0.0, 1.0))).norm()
}

impl Contour {
    pub fn x_at(&self, y: f64) -> f64 {
        let k = &self.knots;
        if y <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if y <= w[1].0 {
                let t = (y - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + t * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }

    fn slope_at(&self, y: f64) -> f64 {
        for w in self.knots.windows(2) {
            if y >= w[0].0 && y < w[1].0 {
                return (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
            }
        }
        0.0
    }

    pub fn point(&self, y: f64) -> C64 {
        C64::new(self.x_at(y), y)
    }

    /// Signed horizontal distance from the contour.
    pub fn offset(&self, z: C64) -> f64 {
        z.re - self.x_at(z.im)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance between the curve (up to `±t_max`) and `p`.
    pub fn distance_to(&self, p: C64) -> f64 {
        let mut pts = vec![self.point(-self.t_max)];
        pts.extend(self.knots.iter().map(|&(y, x)| C64::new(x, y)));
        pts.push(self.point(self.t_max));
        pts.windows(2).map(|w| seg_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
    }

    /// Smallest horizontal distance from the curve to a forbidden point.
    pub fn forbidden_gap(&self) -> f64 {
        self.forbidden.iter().map(|&(p, _)| self.offset(p).abs()).fold(f64::INFINITY, f64::min)
    }

    fn panel_length(&self, y: f64, resolution: f64, max_panel: f64) -> f64 {
        let slope = self.slope_at(y);
        let stretch = (1.0 + slope * slope).sqrt();
        let sin = 1.0 / stretch;
        let p = self.point(y);
        let near = self.forbidden.iter().map(|&(q, _)| (q - p).norm()).fold(f64::INFINITY, f64::min);
        // Arc length limits: panel cap, kernel poles at ζ ± h, forbidden points.
        let arc = max_panel.min(0.6 * self.h * sin).min(0.6 * near);
        // The integrand oscillates with frequency ~ 2|y|/h.
        let dy = (arc / stretch).min(8.0 * self.h / y.abs().max(1.0));
        dy / resolution
    }

    fn discretize(&mut self, spec: &ContourSpec) {
        let (gx, gw) = gauss_legendre(GL_ORDER);
        let mut breaks = vec![-self.t_max];
        breaks.extend(self.knots.iter().map(|k| k.0));
        breaks.push(self.t_max);
        self.nodes.clear();
        self.weights.clear();
        self.panels.clear();
        for b in breaks.windows(2) {
            let (lo, hi) = (b[0], b[1]);
            let mut y = lo;
            while y < hi - 1e-12 {
                let l0 = self.panel_length(y, spec.resolution, spec.max_panel);
                let l = l0.min(self.panel_length((y + l0).min(hi), spec.resolution, spec.max_panel));
                let rest = hi - y;
                let step = if rest <= 1.3 * l { rest } else if rest <= 2.0 * l { rest / 2.0 } else { l };
                let (y0, y1) = (y, y + step);
                let slope = self.slope_at(0.5 * (y0 + y1));
                let x0 = self.x_at(y0);
                self.panels.push(Panel { y0, y1, x0, slope, first: self.nodes.len() });
                let half = 0.5 * (y1 - y0);
                for (t, w) in gx.iter().zip(&gw) {
                    let yy = y0 + half * (1.0 + t);
                    self.nodes.push(C64::new(x0 + slope * (yy - y0), yy));
                    self.weights.push(C64::new(slope, 1.0) * half * w);
                }
                y = y1;
            }
        }
    }

    /// Same curve with `factor` times as many nodes.
    pub fn refined(&self, spec: &ContourSpec, factor: f64) -> Contour {
        let mut c = self.clone();
        let spec = ContourSpec { resolution: spec.resolution * factor, ..*spec };
        c.discretize(&spec);
        c
    }
}

/// Polyline from the ray `x = x_down` (below) through `gates` to the ray
/// `x = x_up` (above), detouring around forbidden points.
pub fn build_contour(
    h: f64,
    x_down: f64,
    x_up: f64,
    gates: &[C64],
    forbidden: &[(C64, f64)],
    t_max: f64,
    spec: &ContourSpec,
) -> Result<Contour, FredholmError> {
    if forbidden.iter().any(|&(_, g)| !(g > 0.0)) {
        return Err(FredholmError::Infeasible("guards must be positive".into()));
    }
    let top = gates.iter().map(|g| g.im.abs() + 1.0).fold(spec.join_height, f64::max);
    if top >= t_max {
        return Err(FredholmError::Infeasible(format!("gates reach the truncation height {t_max}")));
    }
    let mut knots = vec![(-top, x_down)];
    let mut g: Vec<C64> = gates.to_vec();
    g.sort_by(|a, b| a.im.total_cmp(&b.im));
    knots.extend(g.iter().map(|p| (p.im, p.re)));
    knots.push((top, x_up));
    let mut contour = Contour {
        x_down,
        x_up,
        knots,
        forbidden: forbidden.to_vec(),
        t_max,
        h,
        nodes: vec![],
        weights: vec![],
        panels: vec![],
    };
    for _ in 0..8 {
        let bad = contour.forbidden.iter().find(|&&(p, guard)| contour.distance_to(p) < guard).copied();
        let Some((p, guard)) = bad else { break };
        // Keep p on the side of the curve it already lies on.
        let side = if contour.offset(p) <= 0.0 { -1.0 } else { 1.0 };
        let x = p.re - side * 1.5 * guard;
        // Vertical piece beside p, joined to the old curve by 45° ramps.
        let ramp = (x - contour.x_at(p.im)).abs().max(0.5 * guard);
        let (lo, hi) = (p.im - guard - ramp, p.im + guard + ramp);
        let (xl, xh) = (contour.x_at(lo), contour.x_at(hi));
        contour.knots.retain(|&(y, _)| y < lo || y > hi);
        contour.knots.extend([(lo, xl), (p.im - guard, x), (p.im + guard, x), (hi, xh)]);
        contour.knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    for w in contour.knots.windows(2) {
        let dy = w[1].0 - w[0].0;
        if dy <= 0.0 {
            return Err(FredholmError::Infeasible("gates share a height".into()));
        }
        if dy.atan2((w[1].1 - w[0].1).abs()) < VERTICAL_ANGLE {
            return Err(FredholmError::Infeasible(format!("segment at y = {} is too flat", w[0].0)));
        }
    }
    if let Some(&(p, g)) = contour.forbidden.iter().find(|&&(p, g)| contour.distance_to(p) < g) {
        return Err(FredholmError::Infeasible(format!("{p} cannot be kept {g} away")));
    }
    contour.discretize(spec);
    Ok(contour)
}

/// Log-slope estimate of `μ` from `|w| ≤ C e^{(1-μ)|y|}` along the rays.
pub fn estimate_mu(w: &Perturbation, x_down: f64, x_up: f64) -> f64 {
    let mut slope: f64 = f64::NEG_INFINITY;
    for (x, s) in [(x_up, 1.0), (x_down, -1.0)] {
        let lo: f64 = (0..8).map(|k| w(C64::new(x + 0.8 * k as f64, s * 8.0)).norm()).fold(0.0, f64::max);
        let hi: f64 = (0..8).map(|k| w(C64::new(x + 0.8 * k as f64, s * 14.0)).norm()).fold(0.0, f64::max);
        if lo > 0.0 && hi > 0.0 {
            slope = slope.max((hi.ln() - lo.ln()) / 6.0);
        }
    }
    if slope == f64::NEG_INFINITY {
        // w vanishes along the rays.
        return 1.0;
    }
    (1.0 - slope).clamp(0.05, 1.0)
}

/// Default truncation height for a decay rate `μ`.
pub fn default_t_max(mu: f64) -> f64 {
    (10.0 * 10f64.ln() / mu).clamp(12.0, 60.0)
}

/// Discretized operator and the per-node data it was built from.
pub struct KernelOp {
    model: Arc<ModelSolution>,
    w: Perturbation,
    pub contour: Contour,
    pub mu: f64,
    wronskian: C64,
    m: Vec<C64>,
    mt: Vec<C64>,
    wv: Vec<C64>,
    scale: Vec<f64>,
    /// Unscaled `κ(ζ_j, ζ_j)`.
    diag: Vec<C64>,
    /// `K̂_ij = s_i κ(ζ_i, ζ_j) dζ_j / s_j`.
    matrix: Mat<c64>,
    /// Sampled constant of the weighted kernel bound.
    pub bound: f64,
}

impl std::fmt::Debug for KernelOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelOp")
            .field("nodes", &self.contour.len())
            .field("mu", &self.mu)
            .field("bound", &self.bound)
            .finish()
    }
}

fn to_faer(z: C64) -> c64 {
    c64::new(z.re, z.im)
}

fn from_faer(z: c64) -> C64 {
    C64::new(z.re, z.im)
}

/// `s(z) = e^{|y|/2} p₀(z)`.
fn scale_at(z: C64, h: f64) -> f64 {
    let y = z.im;
    let p0 = if y > 0.0 { 1.0 } else { (PI * y.abs() / h).exp() };
    (0.5 * y.abs()).exp() * p0
}

impl KernelOp {
    pub fn assemble(model: Arc<ModelSolution>, w: Perturbation, contour: Contour, mu: f64) -> Result<Self, FredholmError> {
        let h = model.params().h;
        let n = contour.len();
        let wronskian = model.wronskian_closed_form();
        let mut m = Vec::with_capacity(n);
        let mut mt = Vec::with_capacity(n);
        let mut diag = Vec::with_capacity(n);
        let wv: Vec<C64> = contour.nodes.iter().map(|&z| w(z)).collect();
        if let Some(j) = wv.iter().position(|v| !v.is_finite()) {
            return Err(FredholmError::Infeasible(format!("perturbation is not finite at {}", contour.nodes[j])));
        }
        let scale: Vec<f64> = contour.nodes.iter().map(|&z| scale_at(z, h)).collect();
        if scale.iter().any(|s| !s.is_finite()) {
            return Err(FredholmError::WeightOverflow(contour.t_max));
        }
        for (j, &z) in contour.nodes.iter().enumerate() {
            let (a, da) = model.m_with_derivative(z)?;
            let (b, db) = model.m_tilde_with_derivative(z)?;
            m.push(a);
            mt.push(b);
            diag.push((a * db - da * b) / (2.0 * PI * C64::i() * wronskian) * wv[j]);
        }
        let denom = 2.0 * C64::i() * h * wronskian;
        let nodes = &contour.nodes;
        let dz = &contour.weights;
        let matrix = Mat::<c64>::from_fn(n, n, |i, j| {
            let k = if i == j {
                diag[i]
            } else {
                cot_kernel(nodes[i], nodes[j], h) * (m[i] * mt[j] - m[j] * mt[i]) / denom * wv[j]
            };
            to_faer(k * dz[j] * (scale[i] / scale[j]))
        });
        // Sampled bound with the weight p = e^{(1-μ)|y|} p₀².
        let weight = |z: C64| ((1.0 - mu) * 0.5 * z.im.abs()).exp() * scale_at(z, h) / (0.5 * z.im.abs()).exp();
        let mut bound: f64 = 0.0;
        for i in (0..n).step_by(7) {
            for j in (0..n).step_by(7) {
                let k = from_faer(matrix.read(i, j)).norm() / dz[j].norm() * scale[j] / scale[i];
                let (y, eta) = (nodes[i].im.abs(), nodes[j].im.abs());
                let env = (1.0 + eta) * (-0.5 * mu * (y + eta)).exp();
                bound = bound.max(weight(nodes[i]) * k / weight(nodes[j]) / env);
            }
        }
        Ok(Self { model, w, contour, mu, wronskian, m, mt, wv, scale, diag, matrix, bound })
    }

    pub fn model(&self) -> &ModelSolution {
        &self.model
    }

    pub fn h(&self) -> f64 {
        self.model.params().h
    }

    pub fn w(&self, z: C64) -> C64 {
        (self.w)(z)
    }

    pub fn len(&self) -> usize {
        self.contour.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contour.is_empty()
    }

    /// Scaled matrix entry `K̂_ij`.
    pub fn entry(&self, i: usize, j: usize) -> C64 {
        from_faer(self.matrix.read(i, j))
    }

    fn apply(&self, u: &[C64]) -> Vec<C64> {
        let n = self.len();
        let mut out = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            let uj = u[j];
            if uj == C64::new(0.0, 0.0) {
                continue;
            }
            let col = self.matrix.col(j);
            for (i, o) in out.iter_mut().enumerate() {
                *o += from_faer(col.read(i)) * uj;
            }
        }
        out
    }

    /// Largest eigenvalue modulus of `K̂` by power iteration.
    pub fn spectral_radius(&self, iterations: usize) -> f64 {
        let n = self.len();
        let mut x: Vec<C64> = (0..n).map(|i| C64::new(1.0, (i as f64 * 0.37).sin())).collect();
        let mut r = 0.0;
        for _ in 0..iterations {
            let y = self.apply(&x);
            let ny = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let nx = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            if ny == 0.0 {
                return 0.0;
            }
            r = ny / nx;
            x = y.into_iter().map(|v| v / ny).collect();
        }
        r
    }

    /// `κ(z, ζ_j)` given `m(z), m̃(z)`; falls back to the diagonal value on a node.
    fn kernel_at_node(&self, z: C64, mz: C64, mtz: C64, j: usize) -> C64 {
        let zeta = self.contour.nodes[j];
        if (z - zeta).norm() < 1e-9 * (1.0 + z.norm()) {
            return self.diag[j];
        }
        let h = self.h();
        cot_kernel(z, zeta, h) * (mz * self.mt[j] - self.m[j] * mtz) / (2.0 * C64::i() * h * self.wronskian) * self.wv[j]
    }

    fn kernel_general(&self, z: C64, mz: C64, mtz: C64, zeta: C64, mzeta: C64, mtzeta: C64) -> C64 {
        let h = self.h();
        cot_kernel(z, zeta, h) * (mz * mtzeta - mzeta * mtz) / (2.0 * C64::i() * h * self.wronskian) * self.w(zeta)
    }
}

/// Which integral equation a solution satisfies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RhsKind {
    /// `ψ = m + Kψ`.
    Model,
    /// `ψ = Kψ`.
    Zero,
}

/// Extra pole term `S_k m(z, z_k) σ_k` of the extended equation.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExtraPole {
    pub z0: C64,
    /// Prescribed coefficient `s(z₀)`.
    pub s: C64,
    /// Solved value `σ = f(z₀ + h)`.
    pub sigma: C64,
}

/// Nyström solution with its continuation machinery.
pub struct FredholmSolution {
    kernel: Arc<KernelOp>,
    u: Vec<C64>,
    psi: Vec<C64>,
    pub delta: bool,
    pub sigma_min: f64,
    pub norm: f64,
    pub residual: f64,
    pub poles: Vec<ExtraPole>,
}

impl std::fmt::Debug for FredholmSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FredholmSolution")
            .field("delta", &self.delta)
            .field("sigma_min", &self.sigma_min)
            .field("residual", &self.residual)
            .finish()
    }
}

/// Raw (scaled) asymptotic integrals and the resulting coefficients.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FredholmAsymptotics {
    pub big_a: C64,
    pub big_b: C64,
    pub big_c: C64,
    pub big_d: C64,
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub d: C64,
}

pub const SING_TOL: f64 = 1e-8;

fn inf_norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm()).fold(0.0, f64::max)
}

fn col(v: &[C64]) -> Mat<c64> {
    Mat::from_fn(v.len(), 1, |i, _| to_faer(v[i]))
}

fn uncol(m: &Mat<c64>) -> Vec<C64> {
    (0..m.nrows()).map(|i| from_faer(m.read(i, 0))).collect()
}

/// `σ_min` and its right singular vector via inverse iteration on `AᴴA`,
/// together with a power-iteration estimate of `‖A‖₂`.
fn extreme_singular(a: &Mat<c64>, lu: &faer::linalg::solvers::PartialPivLu<c64>) -> (f64, Vec<C64>, f64) {
    let n = a.nrows();
    let mut x: Vec<C64> = (0..n).map(|i| C64::new(1.0 + (i as f64 * 0.71).cos(), (i as f64 * 0.23).sin())).collect();
    let mut sigma = f64::INFINITY;
    for _ in 0..12 {
        let y = uncol(&lu.solve_conj_transpose(&col(&x)));
        let z = uncol(&lu.solve(&col(&y)));
        let nz = z.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let nx = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if !(nz.is_finite() && nz > 0.0) {
            sigma = 0.0;
            break;
        }
        sigma = (nx / nz).sqrt();
        x = z.into_iter().map(|v| v / nz).collect();
    }
    let mut p: Vec<C64> = (0..n).map(|i| C64::new(1.0, (i as f64 * 0.5).cos())).collect();
    let mut big = 0.0;
    for _ in 0..12 {
        let q = uncol(&(a * col(&p)));
        let r = uncol(&(a.adjoint() * col(&q)));
        let nr = r.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let np = p.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        big = (nr / np).sqrt();
        p = r.into_iter().map(|v| v / nr).collect();
    }
    (sigma, x, big)
}

/// Solves `(I - K̂)u = rhs`, switching to the homogeneous branch when
/// `I - K̂` is numerically singular.
pub fn solve(kernel: Arc<KernelOp>, rhs: RhsKind) -> Result<FredholmSolution, FredholmError> {
    solve_extended(kernel, rhs, &[])
}

/// Extended system on grid values plus one unknown `σ_k = f(z_k+h)` per
/// simple zero `(z_k, s(z_k))` of `b` (both in model coordinates).
pub fn solve_extended(kernel: Arc<KernelOp>, rhs: RhsKind, zeros: &[(C64, C64)]) -> Result<FredholmSolution, FredholmError> {
    let n = kernel.len();
    let jn = zeros.len();
    let h = kernel.h();
    let reach = h - kernel.reach_margin();
    for &(z0, _) in zeros {
        let off = kernel.contour.offset(z0 + h);
        if !(off.abs() < reach) {
            return Err(FredholmError::UnsupportedPole(z0));
        }
    }
    let total = n + jn;
    let mut a = Mat::<c64>::zeros(total, total);
    let mut b = vec![C64::new(0.0, 0.0); total];
    let delta = if rhs == RhsKind::Model { 1.0 } else { 0.0 };
    for i in 0..n {
        for j in 0..n {
            let mut v = -kernel.entry(i, j);
            if i == j {
                v += 1.0;
            }
            a.write(i, j, to_faer(v));
        }
        b[i] = delta * kernel.scale[i] * kernel.m[i];
    }
    let model = kernel.model();
    for (k, &(zk, sk)) in zeros.iter().enumerate() {
        for i in 0..n {
            let v = -kernel.scale[i] * sk * pole_solution(model, kernel.contour.nodes[i], zk)?;
            a.write(i, n + k, to_faer(v));
        }
        // Row for σ_k: the plain interpolation of Kf at z_k + h.
        let zp = zk + h;
        let (mz, mtz) = model.pair(zp)?;
        for j in 0..n {
            let v = -kernel.kernel_at_node(zp, mz, mtz, j) * kernel.contour.weights[j] / kernel.scale[j];
            a.write(n + k, j, to_faer(v));
        }
        for (l, &(zl, sl)) in zeros.iter().enumerate() {
            let mut v = -sl * pole_solution(model, zp, zl)?;
            if l == k {
                v += 1.0;
            }
            a.write(n + k, n + l, to_faer(v));
        }
        b[n + k] = delta * mz;
    }
    let lu = a.partial_piv_lu();
    let (sigma_min, vec_min, norm) = extreme_singular(&a, &lu);
    let singular = !(sigma_min > SING_TOL * norm);
    let (x, delta_flag) = if singular || rhs == RhsKind::Zero {
        if !singular {
            return Err(FredholmError::Degenerate(sigma_min));
        }
        let scale = inf_norm(&vec_min[..n]);
        (vec_min.iter().map(|v| v / scale).collect::<Vec<_>>(), false)
    } else {
        (uncol(&lu.solve(&col(&b))), true)
    };
    let b_used: Vec<C64> = if delta_flag { b.clone() } else { vec![C64::new(0.0, 0.0); total] };
    let ax = uncol(&(&a * col(&x)));
    let r: Vec<C64> = ax.iter().zip(&b_used).map(|(p, q)| p - q).collect();
    let residual = inf_norm(&r) / inf_norm(&x);
    let u = x[..n].to_vec();
    let psi: Vec<C64> = u.iter().zip(&kernel.scale).map(|(v, s)| v / s).collect();
    let poles = zeros.iter().enumerate().map(|(k, &(z0, s))| ExtraPole { z0, s, sigma: x[n + k] }).collect();
    Ok(FredholmSolution { kernel, u, psi, delta: delta_flag, sigma_min, norm, residual, poles })
}

/// `m(z, z₀) = θ(z, z₀)[m(z)m̃(z₀+h) - m(z₀+h)m̃(z)]/W`, simple pole at `z₀`
/// with residue `h/π`.
pub fn pole_solution(model: &ModelSolution, z: C64, z0: C64) -> Result<C64, FredholmError> {
    let h = model.params().h;
    let w = model.wronskian_closed_form();
    let zp = z0 + h;
    if (z - zp).norm() < 1e-9 * (1.0 + z.norm()) {
        // Removable point: θ has a pole, the bracket a zero.
        let (m1, dm1) = model.m_with_derivative(zp)?;
        let (t1, dt1) = model.m_tilde_with_derivative(zp)?;
        return Ok(-(h / PI) * (dm1 * t1 - m1 * dt1) / w);
    }
    let (mz, tz) = model.pair(z)?;
    let (m1, t1) = model.pair(zp)?;
    Ok(cot_kernel(z, z0, h) * (mz * t1 - m1 * tz) / w)
}

/// Neumann series `u ← rhs + K̂u`; returns the iterate and the last increment.
pub fn neumann(kernel: &KernelOp, rhs: RhsKind, iterations: usize) -> (Vec<C64>, f64) {
    let delta = if rhs == RhsKind::Model { 1.0 } else { 0.0 };
    let b: Vec<C64> = (0..kernel.len()).map(|i| delta * kernel.scale[i] * kernel.m[i]).collect();
    let mut u = b.clone();
    let mut change = f64::INFINITY;
    for _ in 0..iterations {
        let ku = kernel.apply(&u);
        let next: Vec<C64> = ku.iter().zip(&b).map(|(k, b)| k + b).collect();
        change = next.iter().zip(&u).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / inf_norm(&next);
        u = next;
        if change < 1e-15 {
            break;
        }
    }
    (u, change)
}

impl KernelOp {
    /// Half-width of the window around `±h` handled by singularity subtraction.
    pub fn reach_margin(&self) -> f64 {
        (0.25 * self.h()).min(0.5 * self.contour.forbidden_gap())
    }

    /// Horizontal reach of `FredholmSolution::eval`.
    pub fn reach(&self) -> f64 {
        self.h() + self.reach_margin()
    }
}

impl FredholmSolution {
    pub fn kernel(&self) -> &KernelOp {
        &self.kernel
    }

    pub fn nodes(&self) -> &[C64] {
        &self.kernel.contour.nodes
    }

    /// `ψ` at the quadrature nodes.
    pub fn psi_nodes(&self) -> &[C64] {
        &self.psi
    }

    /// Scaled unknown `u = sψ` at the nodes.
    pub fn scaled(&self) -> &[C64] {
        &self.u
    }

    fn delta_value(&self) -> f64 {
        if self.delta {
            1.0
        } else {
            0.0
        }
    }

    fn pole_terms(&self, z: C64) -> Result<C64, FredholmError> {
        let model = self.kernel.model();
        let mut acc = C64::new(0.0, 0.0);
        for p in &self.poles {
            acc += p.s * p.sigma * pole_solution(model, z, p.z0)?;
        }
        Ok(acc)
    }

    /// `Σ κ(z, ζ_j) ψ_j dζ_j` over the given nodes, with `ψ` values.
    fn node_sum(&self, z: C64, mz: C64, mtz: C64) -> C64 {
        let k = &self.kernel;
        let mut acc = C64::new(0.0, 0.0);
        for j in 0..k.len() {
            acc += k.kernel_at_node(z, mz, mtz, j) * self.psi[j] * k.contour.weights[j];
        }
        acc
    }

    /// `ψ` at a point of the contour that is not a node.
    fn on_contour(&self, z: C64) -> Result<C64, FredholmError> {
        let (mz, mtz) = self.kernel.model().pair(z)?;
        Ok(self.delta_value() * mz + self.node_sum(z, mz, mtz) + self.pole_terms(z)?)
    }

    /// `∫ κ(z,ζ)ψ(ζ)dζ` for `|offset| < h`, refining panels that come close to
    /// the kernel poles `z ± h`.
    fn plain_integral(&self, z: C64, mz: C64, mtz: C64) -> Result<C64, FredholmError> {
        let k = &self.kernel;
        let h = k.h();
        let poles = [z - h, z + h];
        let (gx, gw) = gauss_legendre(GL_ORDER);
        let mut acc = C64::new(0.0, 0.0);
        for p in &k.contour.panels {
            let a = C64::new(p.x0, p.y0);
            let b = C64::new(p.x0 + p.slope * (p.y1 - p.y0), p.y1);
            let len = (b - a).norm();
            let near = poles.iter().map(|&q| seg_distance(q, a, b)).fold(f64::INFINITY, f64::min);
            if near >= 0.6 * len {
                for j in p.first..p.first + GL_ORDER {
                    acc += k.kernel_at_node(z, mz, mtz, j) * self.psi[j] * k.contour.weights[j];
                }
                continue;
            }
            // Split into pieces no longer than the distance to the pole.
            let pieces = ((len / (0.6 * near.max(1e-6))).ceil() as usize).clamp(2, 4096);
            let dy = (p.y1 - p.y0) / pieces as f64;
            for q in 0..pieces {
                let y0 = p.y0 + q as f64 * dy;
                for (t, w) in gx.iter().zip(&gw) {
                    let y = y0 + 0.5 * dy * (1.0 + t);
                    let zeta = C64::new(p.x0 + p.slope * (y - p.y0), y);
                    let dz = C64::new(p.slope, 1.0) * 0.5 * dy * w;
                    let (mzeta, mtzeta) = k.model().pair(zeta)?;
                    let psi = self.on_contour(zeta)?;
                    acc += k.kernel_general(z, mz, mtz, zeta, mzeta, mtzeta) * psi * dz;
                }
            }
        }
        Ok(acc)
    }

    /// Integral term for `h - c < |offset| < h + c`: the pole of `θ` at
    /// `ζ₀ = z ∓ h` is subtracted with a Gaussian and integrated on a shifted
    /// copy of the contour.
    fn subtracted_integral(&self, z: C64, mz: C64, mtz: C64, offset: f64) -> Result<C64, FredholmError> {
        let k = &self.kernel;
        let h = k.h();
        let (zeta0, shift) = if offset > 0.0 { (z - h, offset - 0.5 * h) } else { (z + h, offset + 0.5 * h) };
        let near = k.contour.nodes.iter().map(|n| (n - zeta0).norm()).fold(f64::INFINITY, f64::min);
        if near < 1e-6 {
            // Symmetric horizontal stencil keeps nodes away from ζ₀.
            let e = 2e-4;
            let f = |dx: f64| -> Result<C64, FredholmError> {
                let zz = z + dx;
                let (a, b) = k.model().pair(zz)?;
                self.subtracted_integral_raw(zz, a, b, zz - (z - zeta0), shift)
            };
            let s1 = f(e)? + f(-e)?;
            let s2 = f(2.0 * e)? + f(-2.0 * e)?;
            return Ok((4.0 * s1 - s2) / 6.0);
        }
        self.subtracted_integral_raw(z, mz, mtz, zeta0, shift)
    }

    fn subtracted_integral_raw(&self, z: C64, mz: C64, mtz: C64, zeta0: C64, shift: f64) -> Result<C64, FredholmError> {
        let k = &self.kernel;
        let h = k.h();
        let denom = 2.0 * C64::i() * h * k.wronskian;
        let (m0, mt0) = k.model().pair(zeta0)?;
        let psi0 = self.on_contour_or_plain(zeta0)?;
        let g0 = (mz * mt0 - m0 * mtz) / denom * k.w(zeta0) * psi0;
        let r = |zeta: C64| ((zeta - zeta0) * (zeta - zeta0) / (h * h)).exp();
        let mut first = C64::new(0.0, 0.0);
        let mut second = C64::new(0.0, 0.0);
        for j in 0..k.len() {
            let zeta = k.contour.nodes[j];
            let dz = k.contour.weights[j];
            let g = (mz * k.mt[j] - k.m[j] * mtz) / denom * k.wv[j] * self.psi[j];
            first += cot_kernel(z, zeta, h) * (g - g0 * r(zeta)) * dz;
            let zs = zeta + shift;
            second += cot_kernel(z, zs, h) * r(zs) * dz;
        }
        Ok(first + g0 * second)
    }

    fn on_contour_or_plain(&self, z: C64) -> Result<C64, FredholmError> {
        let k = &self.kernel;
        let (mz, mtz) = k.model().pair(z)?;
        Ok(self.delta_value() * mz + self.plain_integral(z, mz, mtz)? + self.pole_terms(z)?)
    }

    /// `ψ(z)` in the horizontal `(h + c)`-vicinity of the contour.
    pub fn eval(&self, z: C64) -> Result<C64, FredholmError> {
        let k = &self.kernel;
        let h = k.h();
        let offset = k.contour.offset(z);
        let c = k.reach_margin();
        if offset.abs() >= h + c || z.im.abs() > k.contour.t_max {
            return Err(FredholmError::OutOfVicinity { z, offset, reach: h + c });
        }
        let (mz, mtz) = k.model().pair(z)?;
        let integral =
            if offset.abs() <= h - c { self.plain_integral(z, mz, mtz)? } else { self.subtracted_integral(z, mz, mtz, offset)? };
        Ok(self.delta_value() * mz + integral + self.pole_terms(z)?)
    }

    /// Relative residual of `ψ(z+h) + ψ(z-h) + 2e^ξ cos z ψ(z) = w(z)ψ(z)`.
    pub fn equation_residual(&self, z: C64) -> Result<f64, FredholmError> {
        let k = &self.kernel;
        let h = k.h();
        let (p, q, r) = (self.eval(z + h)?, self.eval(z - h)?, self.eval(z)?);
        let lam = k.model().params().lambda();
        let res = p + q + (2.0 * lam * z.cos() - k.w(z)) * r;
        Ok(res.norm() / p.norm().max(q.norm()).max(r.norm()))
    }

    /// Residual of the discrete equation, `‖u - rhs - K̂u‖ / ‖u‖`.
    pub fn grid_residual(&self) -> f64 {
        let k = &self.kernel;
        if !self.poles.is_empty() {
            return self.residual;
        }
        let ku = k.apply(&self.u);
        let d = self.delta_value();
        let r: Vec<C64> = (0..k.len()).map(|i| self.u[i] - d * k.scale[i] * k.m[i] - ku[i]).collect();
        inf_norm(&r) / inf_norm(&self.u)
    }

    /// Contour integrals giving `A, B, C, D` and the coefficients `a, b, c, d`.
    pub fn asymptotics(&self) -> Result<FredholmAsymptotics, FredholmError> {
        let k = &self.kernel;
        let params: ModelParams = *k.model().params();
        let h = params.h;
        let w = k.wronskian;
        let i = C64::i();
        let mut ia = C64::new(0.0, 0.0);
        let mut ib = C64::new(0.0, 0.0);
        let mut id = C64::new(0.0, 0.0);
        for j in 0..k.len() {
            let f = k.wv[j] * self.psi[j] * k.contour.weights[j];
            ia += k.mt[j] * f;
            ib += k.m[j] * f;
            id += (2.0 * PI * i * k.contour.nodes[j] / h).exp() * k.m[j] * f;
        }
        let d = self.delta_value();
        let mut big_a = d + ia / (h * w);
        let mut big_b = -ib / (h * w);
        let big_c = C64::new(d, 0.0);
        let mut big_d = id / (h * w);
        let model = k.model();
        for p in &self.poles {
            let (m1, t1) = model.pair(p.z0 + h)?;
            let f = p.s * p.sigma / w;
            big_a += 2.0 * i * t1 * f;
            big_b -= 2.0 * i * m1 * f;
            big_d += 2.0 * i * (2.0 * PI * i * p.z0 / h).exp() * m1 * f;
        }
        let own = model.coeffs();
        let partner = crate::model::m_asymp_coeffs(&params.conj())?;
        Ok(FredholmAsymptotics {
            big_a,
            big_b,
            big_c,
            big_d,
            a: big_a * own.a0,
            b: big_a * own.b0 + big_b * partner.c0.conj(),
            c: big_c * own.c0,
            d: big_c * own.d0 + big_d * partner.a0.conj(),
        })
    }
}

impl FredholmAsymptotics {
    /// Leading form of `ψ` near `+i∞`.
    pub fn upper(&self, params: &ModelParams, z: C64) -> C64 {
        let [e1, e2] = AsymptoticCoeffs::upper_basis(params, z);
        self.a * e1 + self.b * e2
    }

    /// Leading form of `ψ` near `-i∞`.
    pub fn lower(&self, params: &ModelParams, z: C64) -> C64 {
        let [e1, e2] = AsymptoticCoeffs::lower_basis(params, z);
        self.c * e1 + self.d * e2
    }
}

/// The standard contour for `ξ`: rays `x = -Im ξ` (down) and `x = π + Im ξ` (up).
pub fn model_contour(params: &ModelParams, gates: &[C64], forbidden: &[(C64, f64)], t_max: f64, spec: &ContourSpec) -> Result<Contour, FredholmError> {
    let phi = params.xi.im;
    build_contour(params.h, -phi, PI + phi, gates, forbidden, t_max, spec)
}
