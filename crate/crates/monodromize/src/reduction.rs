//! From `ψ(z+h) = M(z)ψ(z)` to the perturbed model equation, and back.
//!
//! With `ρ(z) = b(z)/b(z-h)` the first component solves
//! `ψ₁(z+h) + ρ(z)ψ₁(z-h) = v(z)ψ₁(z)`. Writing `ψ₁ = t·f₀` with
//! `t(z+h) = ρ(z)t(z-h)` and substituting `z₁ = nz + φ + π` gives the model
//! equation with step `nh` and a remainder `w` decaying relative to the
//! model potential. The four minimal solutions come from one direct
//! Fredholm route: kinds B, A and C are the D-type solution of a reflected
//! (`z₁ ↦ 2π - z₁`), conjugated (`z₁ ↦ z̄₁`) or doubly transformed problem.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::bloch::{canonical_basis, consistency_check, principal_phi, BlochError, BlochSolution, ConsistencyVerdict, Side};
use crate::fredholm::{
    build_contour, default_t_max, estimate_mu, solve, ContourSpec, FredholmError, FredholmSolution, KernelOp, Perturbation,
    RhsKind,
};
use crate::model::{ModelError, ModelParams, ModelSolution};
use crate::sigma::{SigmaEngine, SigmaError};
use crate::trigpoly::{rho_v, MatrixTrigPoly, RatioTrig, TrigError, TrigPoly};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("n₊(v) = {plus}, n₋(v) = {minus}: equal positive orders are required")]
    Orders { plus: i64, minus: i64 },
    #[error("no 2π-shift of φ± clears the excluded set by {0}")]
    Inconsistent(f64),
    #[error("zero {0} of b or b(z-h) lies on the contour")]
    RootOnContour(C64),
    #[error("kind {kind} is unavailable: {reason}")]
    KindUnavailable { kind: Kind, reason: String },
    #[error("{z} needs {steps} continuation steps (limit {limit})")]
    TooFar { z: C64, steps: i64, limit: usize },
    #[error("bases use φ± = {given:?}, the solution {expected:?}")]
    BasisMismatch { given: (C64, C64), expected: (C64, C64) },
    #[error("Fourier sampling: {0}")]
    Sampling(String),
    #[error(transparent)]
    Trig(#[from] TrigError),
    #[error(transparent)]
    Bloch(#[from] BlochError),
    #[error(transparent)]
    Sigma(#[from] SigmaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fredholm(#[from] FredholmError),
}

type Result<T> = std::result::Result<T, ReductionError>;

/// Which zeroth Fourier coefficient of the expansion vanishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub enum Kind {
    A,
    B,
    C,
    D,
}

impl Kind {
    pub const ALL: [Kind; 4] = [Kind::A, Kind::B, Kind::C, Kind::D];

    fn conjugated(self) -> bool {
        matches!(self, Kind::A | Kind::C)
    }

    fn mirrored(self) -> bool {
        matches!(self, Kind::B | Kind::C)
    }

    /// `T` taking the kind's model coordinate to the D-type one (an involution).
    pub fn map(self, z: C64) -> C64 {
        let z = if self.conjugated() { z.conj() } else { z };
        if self.mirrored() {
            2.0 * PI - z
        } else {
            z
        }
    }

    fn value(self, v: C64) -> C64 {
        if self.conjugated() {
            v.conj()
        } else {
            v
        }
    }

    /// Index of the designated slot in `(A, B, C, D)`.
    pub fn slot(self) -> usize {
        match self {
            Kind::A => 0,
            Kind::B => 1,
            Kind::C => 2,
            Kind::D => 3,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Kind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Kind::A),
            "B" => Ok(Kind::B),
            "C" => Ok(Kind::C),
            "D" => Ok(Kind::D),
            other => Err(format!("unknown kind {other:?}; expected A, B, C or D")),
        }
    }
}

pub const CONSISTENCY_MARGIN: f64 = 0.3;

/// `φ±`, the order `n` and everything derived from them.
#[derive(Clone, Debug, Serialize)]
pub struct ReducedParams {
    pub n: i64,
    pub h: f64,
    pub phi_plus: C64,
    pub phi_minus: C64,
    /// `(n₊(b), n₋(b))`.
    pub nb: (i64, i64),
    /// Shifts `(k₊, k₋)` of the principal values in units of 2π.
    pub branch: (i64, i64),
    pub verdict: ConsistencyVerdict,
}

fn v_order(m: &MatrixTrigPoly, h: f64) -> Result<i64> {
    let (_, v) = rho_v(m, h)?;
    let g = v.indices()?;
    if g.n_plus != g.n_minus || g.n_plus <= 0 {
        return Err(ReductionError::Orders { plus: g.n_plus, minus: g.n_minus });
    }
    Ok(g.n_plus)
}

impl ReducedParams {
    /// Searches shifts `k± ∈ -2..=2`, keeping pairs that are consistent and
    /// leave both `ξ` and `ξ̄` inside the model domain. Ties are broken by the
    /// smallest `|Re(φ₊-φ₋)|`, then the smallest total shift, then by moving
    /// `φ₋` rather than `φ₊`.
    pub fn new(m: &MatrixTrigPoly, h: f64, margin: f64) -> Result<Self> {
        v_order(m, h)?;
        let p = principal_phi(m, h, Side::Plus)?;
        let q = principal_phi(m, h, Side::Minus)?;
        let mut best: Option<((f64, i64, i64), Self)> = None;
        for kp in -2..=2i64 {
            for km in -2..=2i64 {
                let fp = p + 2.0 * PI * kp as f64;
                let fm = q + 2.0 * PI * km as f64;
                let Ok(r) = Self::with_phis(m, h, fp, fm, margin) else { continue };
                // Snap to a grid so round-off does not reorder exact ties.
                let key = (((fp - fm).re.abs() * 1e9).round(), kp.abs() + km.abs(), kp.abs());
                if best.as_ref().is_none_or(|(k, _)| {
                    key.0 < k.0 || (key.0 == k.0 && (key.1, key.2) < (k.1, k.2))
                }) {
                    best = Some((key, r));
                }
            }
        }
        best.map(|(_, r)| r).ok_or(ReductionError::Inconsistent(margin))
    }

    /// Uses the given branches; each must agree with the principal value mod 2π.
    pub fn with_phis(m: &MatrixTrigPoly, h: f64, phi_plus: C64, phi_minus: C64, margin: f64) -> Result<Self> {
        if !(h > 0.0 && h < 2.0 * PI) {
            return Err(TrigError::BadStep(h).into());
        }
        let n = v_order(m, h)?;
        let mut branch = [0i64; 2];
        for (slot, (side, given)) in [(Side::Plus, phi_plus), (Side::Minus, phi_minus)].into_iter().enumerate() {
            let expected = principal_phi(m, h, side)?;
            let k = (given - expected) / (2.0 * PI);
            if (k.re - k.re.round()).abs() > 1e-9 || k.im.abs() > 1e-9 {
                return Err(BlochError::PhiMismatch { given, expected }.into());
            }
            branch[slot] = k.re.round() as i64;
        }
        let verdict = consistency_check(phi_plus, phi_minus, h, margin);
        if !verdict.consistent {
            return Err(ReductionError::Inconsistent(margin));
        }
        let g = m.b.indices()?;
        let r = Self {
            n,
            h,
            phi_plus,
            phi_minus,
            nb: (g.n_plus, g.n_minus),
            branch: (branch[0], branch[1]),
            verdict,
        };
        let bound = PI + r.h1() / 2.0;
        if r.xi().im.abs() >= bound {
            return Err(ModelError::OutOfDomain(r.xi().im).into());
        }
        Ok(r)
    }

    pub fn phi(&self) -> C64 {
        (self.phi_plus + self.phi_minus) / 2.0
    }

    pub fn xi(&self) -> C64 {
        (self.phi_plus - self.phi_minus) / (2.0 * C64::i())
    }

    pub fn h1(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn to_model(&self, z: C64) -> C64 {
        self.n as f64 * z + self.phi() + PI
    }

    pub fn from_model(&self, z1: C64) -> C64 {
        (z1 - self.phi() - PI) / self.n as f64
    }

    /// Model parameters seen by the D-type problem of `kind`.
    pub fn model_params(&self, kind: Kind) -> Result<ModelParams> {
        let xi = if kind.conjugated() { self.xi().conj() } else { self.xi() };
        Ok(ModelParams::new(xi, self.h1())?)
    }

    /// `(down, up)` asymptotes of the kind's contour in model coordinates.
    pub fn image_asymptotes(&self, kind: Kind) -> (f64, f64) {
        let s = self.xi().im;
        match kind {
            Kind::D => (-s, PI + s),
            Kind::A => (PI - s, s),
            Kind::B => (PI - s, 2.0 * PI + s),
            Kind::C => (2.0 * PI - s, PI + s),
        }
    }
}

/// `t(z) = e^{in₋z/2} Π σ(z+π-z_l)/σ(z+π-z_l-h)` over the zeros of `b` in
/// the strip to the right of the contour.
#[derive(Clone, Debug)]
pub struct TFunction {
    h: f64,
    zeros: Vec<C64>,
    nb: (i64, i64),
    sigma: SigmaEngine,
}

impl TFunction {
    pub fn new(zeros: Vec<C64>, nb: (i64, i64), h: f64) -> Result<Self> {
        let expected = nb.0 + nb.1;
        if zeros.len() as i64 != expected {
            return Err(ReductionError::Sampling(format!("{} zeros for a polynomial of degree {expected}", zeros.len())));
        }
        let sigma = SigmaEngine::new(h)?.with_max_reduce(f64::INFINITY);
        Ok(Self { h, zeros, nb, sigma })
    }

    /// Zeros of `b` with offsets in `[0, 2π)` from the curve `x = x_gamma(y)`.
    pub fn build(m: &MatrixTrigPoly, h: f64, x_gamma: &dyn Fn(f64) -> f64) -> Result<Self> {
        let g = m.b.indices()?;
        let mut zeros = Vec::new();
        for z in m.b.zeros(0.0)? {
            let x0 = x_gamma(z.im);
            let o = (z.re - x0).rem_euclid(2.0 * PI);
            let near = |u: f64| u.min(2.0 * PI - u) < 1e-9;
            if near(o) || near((o + h).rem_euclid(2.0 * PI)) {
                return Err(ReductionError::RootOnContour(z));
            }
            zeros.push(C64::new(x0 + o, z.im));
        }
        Self::new(zeros, (g.n_plus, g.n_minus), h)
    }

    pub fn zeros(&self) -> &[C64] {
        &self.zeros
    }

    pub fn count(&self) -> i64 {
        self.zeros.len() as i64
    }

    /// `t_∞` with `t(z) ≈ t_∞ e^{-in₊z/2}` near `+i∞`.
    pub fn t_inf(&self) -> C64 {
        let i = C64::i();
        let nn = self.count() as f64;
        let sum: C64 = self.zeros.iter().sum();
        (i * sum / 2.0 - i * PI * nn / 2.0 + i * self.h * nn / 4.0).exp()
    }

    pub fn log_eval(&self, z: C64) -> Result<C64> {
        let mut acc = C64::i() * self.nb.1 as f64 * z / 2.0;
        for &zl in &self.zeros {
            let u = z + PI - zl;
            // Unguarded: poles of the denominator are genuine zeros of t.
            acc += self.sigma.log_eval_unchecked(u) - self.sigma.log_eval_unchecked(u - self.h);
        }
        if acc.is_nan() {
            return Err(SigmaError::NearSingular { point: z }.into());
        }
        Ok(acc)
    }

    pub fn eval(&self, z: C64) -> Result<C64> {
        Ok(self.log_eval(z)?.exp())
    }

    /// `t(z)/t(z-h)`.
    pub fn ratio(&self, z: C64) -> Result<C64> {
        Ok((self.log_eval(z)? - self.log_eval(z - self.h)?).exp())
    }
}

/// The reduced equation: parameters, `t`, and the remainder `w`.
#[derive(Clone, Debug)]
pub struct ReducedProblem {
    pub params: ReducedParams,
    pub matrix: MatrixTrigPoly,
    pub t: TFunction,
    /// Decay in `z` coordinates, `|w| ≲ e^{(n-μ)|Im z|}`.
    pub mu: f64,
    b_prev: TrigPoly,
    d_prev: TrigPoly,
    v: RatioTrig,
}

pub fn reduce(m: &MatrixTrigPoly, params: &ReducedParams, t: TFunction) -> Result<ReducedProblem> {
    let hc = C64::new(-params.h, 0.0);
    let (_, v) = rho_v(m, params.h)?;
    let mut p = ReducedProblem {
        params: params.clone(),
        matrix: m.clone(),
        t,
        mu: 0.0,
        b_prev: m.b.shift(hc),
        d_prev: m.d.shift(hc),
        v,
    };
    let (down, up) = params.image_asymptotes(Kind::D);
    p.mu = params.n as f64 * estimate_mu(&p.model_perturbation(Kind::D), down, up);
    Ok(p)
}

impl ReducedProblem {
    /// `v₁ = v(z) t(z)/t(z+h)`, in the form `t(z)/t(z-h)·[a b(z-h)/b + d(z-h)]`.
    pub fn v1(&self, z: C64) -> Result<C64> {
        let m = &self.matrix;
        let bracket = m.a.eval(z) * self.b_prev.eval(z) / m.b.eval(z) + self.d_prev.eval(z);
        Ok(self.t.ratio(z)? * bracket)
    }

    /// `v₁` through the single-quotient form, kept as a cross-check.
    pub fn v1_direct(&self, z: C64) -> Result<C64> {
        Ok(self.v.eval(z) * (self.t.log_eval(z)? - self.t.log_eval(z + self.params.h)?).exp())
    }

    pub fn w(&self, z: C64) -> Result<C64> {
        let p = &self.params;
        let i = C64::i();
        let nz = p.n as f64 * z;
        Ok(self.v1(z)? + (i * (nz + p.phi_minus + PI)).exp() + (-i * (nz + p.phi_plus + PI)).exp())
    }

    /// `w` seen by the D-type problem of `kind`; failures become NaN and are
    /// rejected when the kernel is assembled.
    pub fn model_perturbation(&self, kind: Kind) -> Perturbation {
        let me = self.clone();
        Arc::new(move |zeta: C64| {
            let z = me.params.from_model(kind.map(zeta));
            me.w(z).map(|v| kind.value(v)).unwrap_or(C64::new(f64::NAN, f64::NAN))
        })
    }
}

/// Contour knots and excluded points for one kind, in `z` coordinates.
#[derive(Clone, Debug)]
struct RoutePlan {
    gates: Vec<C64>,
    zeros: Vec<C64>,
    forbidden: Vec<(C64, f64)>,
}

fn plan_route(m: &MatrixTrigPoly, p: &ReducedParams, kind: Kind) -> Result<RoutePlan> {
    let h = p.h;
    let mut raw = m.b.zeros(0.0)?;
    let (down, up) = p.image_asymptotes(kind);
    let center = ((down + up) / 2.0 - (p.phi() + PI).re) / p.n as f64;
    raw.sort_by(|a, b| a.im.total_cmp(&b.im));
    let mut plan = RoutePlan { gates: vec![], zeros: vec![], forbidden: vec![] };
    let mut start = 0;
    while start < raw.len() {
        let y = raw[start].im;
        let mut end = start + 1;
        while end < raw.len() && (raw[end].im - y).abs() < 1e-8 * (1.0 + y.abs()) {
            end += 1;
        }
        let mut xs: Vec<f64> = raw[start..end].iter().map(|z| z.re.rem_euclid(2.0 * PI)).collect();
        xs.sort_by(f64::total_cmp);
        // Widest interval (x_k + h, x_{k+1}) free of zeros and their h-shifts.
        let (k, gap) = (0..xs.len())
            .map(|k| {
                let next = if k + 1 < xs.len() { xs[k + 1] } else { xs[0] + 2.0 * PI };
                (k, next - xs[k] - h)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty group");
        if gap <= 1e-6 {
            return Err(ReductionError::KindUnavailable {
                kind,
                reason: format!("zeros of b at height {y} leave no gap wider than the step"),
            });
        }
        let mut x = xs[k] + h + gap / 2.0;
        x += 2.0 * PI * ((center - x) / (2.0 * PI)).round();
        plan.gates.push(C64::new(x, y));
        let guard = (0.25 * h.min(gap)).min(0.5);
        for z in &raw[start..end] {
            let zl = C64::new(x + (z.re - x).rem_euclid(2.0 * PI), y);
            plan.zeros.push(zl);
            let mut pts = Vec::new();
            for j in -3..=3 {
                let s = 2.0 * PI * j as f64;
                pts.push(zl + s);
                pts.push(zl + h + s);
            }
            for k in 0..=3 {
                pts.push(zl + 2.0 * h * k as f64);
                pts.push(zl - 2.0 * PI - h * (2 * k + 1) as f64);
            }
            plan.forbidden.extend(pts.into_iter().map(|q| (q, guard)));
        }
        start = end;
    }
    Ok(plan)
}

/// Solver controls shared by the four kinds.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MinimalConfig {
    pub contour: ContourSpec,
    pub margin: f64,
    pub max_steps: usize,
}

impl Default for MinimalConfig {
    fn default() -> Self {
        Self { contour: ContourSpec::default(), margin: CONSISTENCY_MARGIN, max_steps: 40 }
    }
}

/// Height of the asymptotic sampling lines.
pub const FOURIER_HEIGHT: f64 = 13.0;

/// A minimal entire solution with its continuation machinery.
#[derive(Clone)]
pub struct MinimalSolution {
    kind: Kind,
    problem: Arc<ReducedProblem>,
    fred: Arc<FredholmSolution>,
    scale: C64,
    max_steps: usize,
}

impl fmt::Debug for MinimalSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MinimalSolution").field("kind", &self.kind).field("scale", &self.scale).finish()
    }
}

pub fn assemble_minimal(m: &MatrixTrigPoly, params: &ReducedParams, kind: Kind, cfg: &MinimalConfig) -> Result<MinimalSolution> {
    let plan = plan_route(m, params, kind)?;
    let t = TFunction::new(plan.zeros.clone(), params.nb, params.h)?;
    let problem = reduce(m, params, t)?;
    let model_params = params.model_params(kind)?;
    let n = params.n as f64;
    let to_u = |z: C64| kind.map(params.to_model(z));
    let gates: Vec<C64> = plan.gates.iter().map(|&g| to_u(g)).collect();
    let forbidden: Vec<(C64, f64)> = plan.forbidden.iter().map(|&(q, g)| (to_u(q), n * g)).collect();
    let w = problem.model_perturbation(kind);
    let (down, up) = (-model_params.xi.im, PI + model_params.xi.im);
    let mu = estimate_mu(&w, down, up);
    let need = FOURIER_HEIGHT * n + params.phi().im.abs() + 4.0;
    let t_max = cfg.contour.t_max.unwrap_or_else(|| default_t_max(mu)).max(need);
    let mut spec = cfg.contour;
    let tallest = gates.iter().map(|g| g.im.abs()).fold(0.0, f64::max);
    if !gates.is_empty() {
        spec.join_height = spec.join_height.max(tallest + 2.0 * PI);
    }
    let contour = build_contour(model_params.h, down, up, &gates, &forbidden, t_max, &spec).map_err(|e| match e {
        FredholmError::Infeasible(reason) => ReductionError::KindUnavailable { kind, reason },
        other => other.into(),
    })?;
    let model = Arc::new(ModelSolution::new(model_params)?);
    let kernel = Arc::new(KernelOp::assemble(model, w, contour, mu)?);
    let fred = Arc::new(solve(kernel, RhsKind::Model)?);
    let sol = MinimalSolution { kind, problem: Arc::new(problem), fred, scale: C64::new(1.0, 0.0), max_steps: cfg.max_steps };
    // The strip convention for t must hold on the final curve.
    for &zl in &plan.zeros {
        let off = sol.offset(zl);
        if !(off > 0.0 && off < 2.0 * PI) || ((off + params.h) - 2.0 * PI).abs() < 1e-9 {
            return Err(ReductionError::RootOnContour(zl));
        }
    }
    Ok(sol)
}

/// Sample access used by the coefficient and monodromy routines.
pub trait SolutionSampler: Send + Sync {
    fn value(&self, z: C64) -> Result<[C64; 2]>;
    /// Real part of the line where the two exponentials of the expansion balance at height `y`.
    fn window_center(&self, y: f64) -> f64;
    fn phis(&self) -> (C64, C64);
    fn step(&self) -> f64;
    fn kind(&self) -> Kind;
}

fn det(p: [C64; 2], q: [C64; 2]) -> C64 {
    p[0] * q[1] - p[1] * q[0]
}

/// Closed-form `(A₀, B₀, C₀, D₁)` of a D-type solution from its contour integrals.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ClosedCoefficients {
    pub a0: C64,
    pub b0: C64,
    pub c0: C64,
    pub d1: C64,
}

impl MinimalSolution {
    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn problem(&self) -> &ReducedProblem {
        &self.problem
    }

    pub fn params(&self) -> &ReducedParams {
        &self.problem.params
    }

    pub fn fredholm(&self) -> &FredholmSolution {
        &self.fred
    }

    /// False when the solution came from the homogeneous branch.
    pub fn delta(&self) -> bool {
        self.fred.delta
    }

    pub fn scale(&self) -> C64 {
        self.scale
    }

    /// The same solution multiplied by `factor`.
    pub fn rescaled(&self, factor: C64) -> Self {
        Self { scale: self.scale * factor, ..self.clone() }
    }

    fn u_point(&self, z: C64) -> C64 {
        self.kind.map(self.params().to_model(z))
    }

    /// Signed horizontal distance (in `z` units) from the kind's contour.
    pub fn offset(&self, z: C64) -> f64 {
        let o = self.fred.kernel().contour.offset(self.u_point(z)) / self.params().n as f64;
        if self.kind.mirrored() {
            -o
        } else {
            o
        }
    }

    /// Half-width of the strip where `f₀` is evaluated directly.
    pub fn reach(&self) -> f64 {
        self.fred.kernel().reach() / self.params().n as f64
    }

    fn margin(&self) -> f64 {
        self.fred.kernel().reach_margin() / self.params().n as f64
    }

    /// `f₀(z) = ψ(nz+φ+π)` of the reduced equation.
    pub fn f0(&self, z: C64) -> Result<C64> {
        Ok(self.kind.value(self.fred.eval(self.u_point(z))?))
    }

    /// First component `ψ₁ = t·f₀` near the contour.
    pub fn first(&self, z: C64) -> Result<C64> {
        Ok(self.scale * self.problem.t.eval(z)? * self.f0(z)?)
    }

    /// Both components at a point within the direct reach, without stepping.
    pub fn direct(&self, z: C64) -> Result<[C64; 2]> {
        let m = &self.problem.matrix;
        let h = self.params().h;
        let d = self.offset(z);
        let (reach, c) = (self.reach(), self.margin());
        let forward = d + h < reach - 1e-9 * c && d > -reach;
        let backward = d - h > -reach + 1e-9 * c && d < reach;
        let (bz, bp) = (m.b.eval(z), m.b.eval(z - h));
        let use_forward = match (forward, backward) {
            (true, true) => bz.norm() >= bp.norm(),
            (true, false) => true,
            (false, true) => false,
            (false, false) => {
                return Err(FredholmError::OutOfVicinity { z, offset: d, reach }.into());
            }
        };
        let p0 = self.first(z)?;
        if use_forward {
            let p1 = self.first(z + h)?;
            Ok([p0, (p1 - m.a.eval(z) * p0) / bz])
        } else {
            let zm = z - h;
            let pm = self.first(zm)?;
            let psi2m = (p0 - m.a.eval(zm) * pm) / bp;
            Ok([p0, m.c.eval(zm) * pm + m.d.eval(zm) * psi2m])
        }
    }

    /// Number of `h`-steps from the base window `[shift - h/2, shift + h/2]`.
    pub fn steps_to(&self, z: C64, shift: f64) -> i64 {
        ((self.offset(z) - shift) / self.params().h).round() as i64
    }

    /// `ψ(z)` anywhere, continued by the equation from the base window
    /// centred `shift` to the right of the contour.
    pub fn eval_from(&self, z: C64, shift: f64) -> Result<[C64; 2]> {
        let h = self.params().h;
        let k = self.steps_to(z, shift);
        if k.unsigned_abs() as usize > self.max_steps {
            return Err(ReductionError::TooFar { z, steps: k, limit: self.max_steps });
        }
        let m = &self.problem.matrix;
        let mut p = z - h * k as f64;
        let mut v = self.direct(p)?;
        for _ in 0..k.max(0) {
            v = m.apply(p, v);
            p += h;
        }
        for _ in 0..(-k).max(0) {
            p -= h;
            v = m.apply_inverse(p, v);
        }
        Ok(v)
    }

    pub fn eval(&self, z: C64) -> Result<[C64; 2]> {
        self.eval_from(z, 0.0)
    }

    /// `|ψ(z+h) - M(z)ψ(z)|` relative to the larger side, with the two values
    /// continued from base windows `0.45h` apart so the check is not circular.
    pub fn equation_residual(&self, z: C64) -> Result<f64> {
        let h = self.params().h;
        let lhs = self.eval_from(z + h, 0.45 * h)?;
        let rhs = self.problem.matrix.apply(z, self.eval_from(z, 0.0)?);
        let scale = lhs[0].norm().max(lhs[1].norm()).max(rhs[0].norm()).max(rhs[1].norm());
        Ok(((lhs[0] - rhs[0]).norm().max((lhs[1] - rhs[1]).norm())) / scale)
    }

    /// `(A₀, B₀, C₀, D₁)` from the contour integrals; D kind only.
    pub fn closed_coefficients(&self) -> Result<ClosedCoefficients> {
        if self.kind != Kind::D {
            return Err(ReductionError::KindUnavailable {
                kind: self.kind,
                reason: "closed-form coefficients exist for the direct route only".into(),
            });
        }
        let p = self.params();
        let asy = self.fred.asymptotics()?;
        let i = C64::i();
        let shift = p.phi() + PI;
        let up = self.scale * self.problem.t.t_inf() * (i * shift / 2.0).exp();
        let down = self.scale * (-i * shift / 2.0).exp();
        Ok(ClosedCoefficients {
            a0: asy.a * up,
            b0: asy.b * up,
            c0: asy.c * down,
            d1: asy.d * down * (-2.0 * PI * i * shift / p.h1()).exp(),
        })
    }
}

impl SolutionSampler for MinimalSolution {
    fn value(&self, z: C64) -> Result<[C64; 2]> {
        self.eval(z)
    }

    fn window_center(&self, y: f64) -> f64 {
        let p = self.params();
        let n = p.n as f64;
        let ct = &self.fred.kernel().contour;
        let y1 = n * y + p.phi().im;
        let flips = matches!(self.kind, Kind::A | Kind::B);
        let xu = ct.x_at(if flips { -y1 } else { y1 });
        let x1 = if self.kind.mirrored() { 2.0 * PI - xu } else { xu };
        (x1 - p.phi().re - PI) / n
    }

    fn phis(&self) -> (C64, C64) {
        (self.params().phi_plus, self.params().phi_minus)
    }

    fn step(&self) -> f64 {
        self.params().h
    }

    fn kind(&self) -> Kind {
        self.kind
    }
}

/// Canonical Bloch bases at `±i∞` with fixed parameters.
#[derive(Clone, Debug)]
pub struct CanonicalBases {
    pub f: (BlochSolution, BlochSolution),
    pub g: (BlochSolution, BlochSolution),
}

impl CanonicalBases {
    pub fn new(m: &MatrixTrigPoly, h: f64, phi_plus: C64, phi_minus: C64) -> Result<Self> {
        Ok(Self {
            f: canonical_basis(m, h, Side::Plus, Some(phi_plus))?,
            g: canonical_basis(m, h, Side::Minus, Some(phi_minus))?,
        })
    }

    pub fn for_params(m: &MatrixTrigPoly, p: &ReducedParams) -> Result<Self> {
        Self::new(m, p.h, p.phi_plus, p.phi_minus)
    }

    pub fn phis(&self) -> (C64, C64) {
        (self.f.0.phi(), self.g.0.phi())
    }

    /// `w_f = {f₁, f₂}`.
    pub fn w_f(&self) -> C64 {
        self.f.0.target_wronskian()
    }

    /// `w_g = {g₁, g₂}`.
    pub fn w_g(&self) -> C64 {
        self.g.0.target_wronskian()
    }
}

/// Fourier data of the expansion coefficients.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct FourierSlots {
    /// `[X₀, X₁]` for `X = A, B, C, D`.
    pub a: [C64; 2],
    pub b: [C64; 2],
    pub c: [C64; 2],
    pub d: [C64; 2],
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct AsymptoticCoefficients {
    pub kind: Kind,
    pub slots: FourierSlots,
    /// `(A, B, C, D)` with the designated slot at its first harmonic.
    pub values: [C64; 4],
    /// Zeroth harmonic of the designated slot.
    pub vanishing: C64,
    pub height: f64,
}

impl AsymptoticCoefficients {
    /// `|X₀|` of the designated slot over the larger coefficient on its side.
    pub fn vanishing_ratio(&self) -> f64 {
        let s = self.kind.slot();
        let side = if s < 2 { [0, 1] } else { [2, 3] };
        self.vanishing.norm() / self.values[side[0]].norm().max(self.values[side[1]].norm())
    }

    pub fn a(&self) -> C64 {
        self.values[0]
    }

    pub fn b(&self) -> C64 {
        self.values[1]
    }

    pub fn c(&self) -> C64 {
        self.values[2]
    }

    pub fn d(&self) -> C64 {
        self.values[3]
    }

    pub fn scaled(&self, factor: C64) -> Self {
        let mut out = *self;
        for v in out.values.iter_mut() {
            *v *= factor;
        }
        out.vanishing *= factor;
        for s in [&mut out.slots.a, &mut out.slots.b, &mut out.slots.c, &mut out.slots.d] {
            s[0] *= factor;
            s[1] *= factor;
        }
        out
    }
}

/// Sampling controls for [`min_asymp_coeffs`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SlotConfig {
    pub height: f64,
    pub samples: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self { height: FOURIER_HEIGHT, samples: 64 }
    }
}

fn same_phi(a: C64, b: C64) -> bool {
    (a - b).norm() <= 1e-12 * (1.0 + a.norm())
}

/// Expansion coefficients by wronskian quotients against the bases, Fourier
/// analysed over one period on `Im z = ±height`, centred on the balance line.
pub fn min_asymp_coeffs(sol: &dyn SolutionSampler, bases: &CanonicalBases, cfg: &SlotConfig) -> Result<AsymptoticCoefficients> {
    let (given, expected) = (bases.phis(), sol.phis());
    if !(same_phi(given.0, expected.0) && same_phi(given.1, expected.1)) {
        return Err(ReductionError::BasisMismatch { given, expected });
    }
    let valid = bases.f.0.validity_height().max(bases.g.0.validity_height());
    if cfg.height < valid {
        return Err(ReductionError::Sampling(format!("height {} is below the basis validity height {valid}", cfg.height)));
    }
    let h = sol.step();
    let nsamp = cfg.samples.max(8);
    let i = C64::i();
    let mut sides = [[[C64::new(0.0, 0.0); 2]; 2]; 2];
    for (s, (sign, (e1, e2))) in [(1.0, &bases.f), (-1.0, &bases.g)].into_iter().enumerate() {
        let y = sign * cfg.height;
        let x0 = sol.window_center(y);
        for j in 0..nsamp {
            let z = C64::new(x0 + (j as f64 / nsamp as f64 - 0.5) * h, y);
            let psi = sol.value(z)?;
            let (p1, p2) = (e1.eval(z)?, e2.eval(z)?);
            let wr = det(p1, p2);
            let first = det(psi, p2) / wr;
            let second = det(p1, psi) / wr;
            for l in 0..2 {
                let e = (-sign * 2.0 * PI * i * l as f64 * z / h).exp() / nsamp as f64;
                sides[s][0][l] += first * e;
                sides[s][1][l] += second * e;
            }
        }
    }
    let slots = FourierSlots { a: sides[0][0], b: sides[0][1], c: sides[1][0], d: sides[1][1] };
    let all = [slots.a, slots.b, slots.c, slots.d];
    let k = sol.kind().slot();
    let mut values = [all[0][0], all[1][0], all[2][0], all[3][0]];
    values[k] = all[k][1];
    Ok(AsymptoticCoefficients { kind: sol.kind(), slots, values, vanishing: all[k][0], height: cfg.height })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn harper(lambda: f64, e: f64) -> MatrixTrigPoly {
        MatrixTrigPoly::new(
            TrigPoly::constant(c(2.0 * e, 0.0)).sub(&TrigPoly::cos(c(2.0 * lambda, 0.0))),
            TrigPoly::constant(c(-1.0, 0.0)),
            TrigPoly::constant(c(1.0, 0.0)),
            TrigPoly::zero(),
        )
        .unwrap()
    }

    fn h0(lambda: f64, s: C64, t: C64) -> MatrixTrigPoly {
        let a = lambda * (1.0 - s * s - t * t) / (s * t);
        MatrixTrigPoly::new(
            TrigPoly::constant(a).sub(&TrigPoly::cos(c(2.0 * lambda, 0.0))),
            TrigPoly::from_terms([(0, s), (-1, t)]),
            TrigPoly::from_terms([(0, -s), (1, -t)]),
            TrigPoly::constant(s * t / lambda),
        )
        .unwrap()
    }

    const H: f64 = std::f64::consts::SQRT_2;

    #[test]
    fn harper_branch_choice() {
        let p = ReducedParams::new(&harper(1.3, 0.2), H, CONSISTENCY_MARGIN).unwrap();
        let xi = 1.3f64.ln();
        assert_eq!(p.n, 1);
        assert!((p.phi_plus - c(-PI, xi)).norm() < 1e-12, "{}", p.phi_plus);
        assert!((p.phi_minus - c(-PI, -xi)).norm() < 1e-12, "{}", p.phi_minus);
        assert!((p.xi() - xi).norm() < 1e-12);
        assert!((p.to_model(p.from_model(c(0.3, -2.0))) - c(0.3, -2.0)).norm() < 1e-14);
    }

    #[test]
    fn h0_branch_choice() {
        let m = h0(1.0, c(0.7, 0.1), c(0.6, -0.2));
        let p = ReducedParams::new(&m, 3.0, CONSISTENCY_MARGIN).unwrap();
        assert_eq!(p.nb, (1, 0));
        assert!((p.phi_plus - c(-PI - 1.5, 0.0)).norm() < 1e-12, "{}", p.phi_plus);
        assert!((p.phi_minus - c(-PI, 0.0)).norm() < 1e-12, "{}", p.phi_minus);
        assert!((p.xi() - c(0.0, 0.75)).norm() < 1e-12);
    }

    #[test]
    fn orders_are_checked() {
        let m = MatrixTrigPoly::new(
            TrigPoly::constant(c(1.0, 0.0)),
            TrigPoly::constant(c(1.0, 0.0)),
            TrigPoly::zero().sub(&TrigPoly::constant(c(1.0, 0.0))),
            TrigPoly::zero(),
        )
        .unwrap();
        assert!(matches!(ReducedParams::new(&m, H, 0.3), Err(ReductionError::Orders { .. })));
    }

    #[test]
    fn t_is_one_for_constant_b() {
        let m = harper(1.0, 0.1);
        let t = TFunction::build(&m, H, &|_| 0.0).unwrap();
        assert_eq!(t.count(), 0);
        for z in [c(0.3, 2.0), c(-4.0, -7.0)] {
            assert!((t.eval(z).unwrap() - 1.0).norm() < 1e-15);
        }
    }

    #[test]
    fn t_functional_equation_and_asymptotics() {
        let h = 3.0;
        let m = h0(1.0, c(0.7, 0.1), c(0.6, -0.2));
        let x_gamma = |_: f64| 0.4;
        let t = TFunction::build(&m, h, &x_gamma).unwrap();
        assert_eq!(t.count(), 1);
        let (rho, _) = rho_v(&m, h).unwrap();
        for k in 0..30 {
            let z = c(0.4 + 0.17 * k as f64 - 2.0, -3.0 + 0.2 * k as f64);
            let lhs = t.eval(z + h).unwrap();
            let rhs = rho.eval(z) * t.eval(z - h).unwrap();
            assert!((lhs - rhs).norm() < 1e-8 * rhs.norm(), "{z}: {lhs} vs {rhs}");
        }
        for x in [0.0, 1.0, 2.5] {
            let lo = t.eval(c(x, -14.0)).unwrap();
            assert!((lo - 1.0).norm() < 1e-4, "{lo}");
            let z = c(x, 14.0);
            let hi = t.eval(z).unwrap() * (C64::i() * z / 2.0).exp();
            assert!((hi - t.t_inf()).norm() < 1e-4 * t.t_inf().norm(), "{hi} vs {}", t.t_inf());
        }
        // t vanishes at the zero of b one period to the left.
        let z0 = t.zeros()[0] - 2.0 * PI;
        assert!(t.eval(z0 + c(1e-7, 0.0)).unwrap().norm() < 1e-5);
    }

    #[test]
    fn harper_remainder_is_constant() {
        let m = harper(1.0, 0.15);
        let p = ReducedParams::new(&m, H, 0.3).unwrap();
        let r = reduce(&m, &p, TFunction::build(&m, H, &|_| 0.0).unwrap()).unwrap();
        for z in [c(0.1, 0.0), c(1.0, 9.0), c(-2.0, -12.0)] {
            assert!((r.w(z).unwrap() - 0.3).norm() < 1e-9 * (1.0 + z.im.abs().exp()), "{}", r.w(z).unwrap());
        }
        assert!((r.mu - 1.0).abs() < 1e-6, "{}", r.mu);
    }

    #[test]
    fn model_matrix_has_no_remainder() {
        let m = MatrixTrigPoly::new(
            TrigPoly::from_terms([(2, c(-0.8, 0.0)), (-2, c(-0.8, 0.0))]),
            TrigPoly::constant(c(-1.0, 0.0)),
            TrigPoly::constant(c(1.0, 0.0)),
            TrigPoly::zero(),
        )
        .unwrap();
        let p = ReducedParams::new(&m, 1.1, 0.3).unwrap();
        assert_eq!(p.n, 2);
        let r = reduce(&m, &p, TFunction::build(&m, 1.1, &|_| 0.0).unwrap()).unwrap();
        for z in [c(0.2, 0.5), c(1.0, 4.0), c(-1.0, -5.0)] {
            assert!(r.w(z).unwrap().norm() < 1e-12 * (2.0 * z.im.abs()).exp(), "{}", r.w(z).unwrap());
        }
    }

    #[test]
    fn two_term_remainder_matches_quotient_form() {
        let h = 3.0;
        let m = h0(1.2, c(0.7, 0.1), c(0.6, -0.2));
        let p = ReducedParams::new(&m, h, 0.3).unwrap();
        let r = reduce(&m, &p, TFunction::build(&m, h, &|_| 0.4).unwrap()).unwrap();
        for z in [c(0.9, 0.3), c(2.0, -1.0), c(0.5, 2.0)] {
            let (a, b) = (r.v1(z).unwrap(), r.v1_direct(z).unwrap());
            assert!((a - b).norm() < 1e-10 * a.norm(), "{a} vs {b}");
        }
        // The remainder decays relative to the model potential.
        assert!(r.mu > 0.3 && r.mu <= 1.0, "{}", r.mu);
    }

    #[test]
    fn kind_maps_are_involutions() {
        let z = c(0.7, -1.3);
        for k in Kind::ALL {
            assert!((k.map(k.map(z)) - z).norm() < 1e-15);
            assert_eq!(k.to_string().parse::<Kind>().unwrap(), k);
        }
    }

    #[test]
    fn harper_minimal_d() {
        let m = harper(1.0, 0.1);
        let p = ReducedParams::new(&m, H, 0.3).unwrap();
        let sol = assemble_minimal(&m, &p, Kind::D, &MinimalConfig::default()).unwrap();
        assert!(sol.delta());
        for z in [c(0.3, 0.5), c(5.0, -3.0), c(-7.5, 6.0), c(9.0, 8.0)] {
            let r = sol.equation_residual(z).unwrap();
            assert!(r < 1e-6, "{z}: {r}");
        }
        let bases = CanonicalBases::for_params(&m, &p).unwrap();
        let coeffs = min_asymp_coeffs(&sol, &bases, &SlotConfig::default()).unwrap();
        assert!(coeffs.vanishing_ratio() < 1e-6, "{}", coeffs.vanishing_ratio());
        let closed = sol.closed_coefficients().unwrap();
        let pairs = [(coeffs.a(), closed.a0), (coeffs.b(), closed.b0), (coeffs.c(), closed.c0), (coeffs.d(), closed.d1)];
        for (q, cl) in pairs {
            assert!(q.norm() > 1e-8);
            assert!((q - cl).norm() < 1e-4 * q.norm(), "{q} vs {cl}");
        }
        let normalized = sol.rescaled(1.0 / coeffs.c());
        let again = min_asymp_coeffs(&normalized, &bases, &SlotConfig::default()).unwrap();
        assert!((again.c() - 1.0).norm() < 1e-10);
    }
}
