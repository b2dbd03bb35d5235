//! The model equation `m(z+h) + m(z-h) + 2e^ξ cos z · m(z) = 0`.
//!
//! `m(z) = e^{-iz²/2h} ∫_Γ e^{-izp/h - ip²/4h + iπp/2h} v(p) dp` with
//! `v(p) = e^{-ip₀p/2h} σ(p-p₀)/σ(p+p₀)`, `p₀ = iξ + h/2`. The contour `Γ`
//! separates the two horizontal pole rays of `v`. For every `z` the integral is
//! taken along a straight line of direction `e^{3iπ/4}` passing near the saddle
//! `π - 2z` (levels are quantized so nearby `z` share cached nodes), and the
//! residues of the poles lying between that line and `Γ` are added back.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::RwLock;

use num_complex::Complex64 as C64;
use serde::Serialize;
use thiserror::Error;

use crate::sigma::{SigmaEngine, SigmaError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("Im ξ = {0} is below the direct-integral bound -π - h/2")]
    OutOfDomain(f64),
    #[error("contour passes within {distance:e} of the pole {pole}")]
    PoleTooClose { pole: C64, distance: f64 },
    #[error("σ(2iξ - π) = {0} is too close to zero")]
    NearSingular(C64),
    #[error("quadrature failed: {0}")]
    QuadratureFail(String),
    #[error("wronskian not constant: spread {0:e}")]
    NonConstant(f64),
    #[error("point is within the guard of the pole {0}")]
    AtPole(C64),
    #[error(transparent)]
    Sigma(#[from] SigmaError),
}

/// `ξ`, `h` and the derived `p₀ = iξ + h/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelParams {
    pub xi: C64,
    pub h: f64,
}

impl ModelParams {
    pub fn new(xi: C64, h: f64) -> Result<Self, ModelError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(SigmaError::BadStep(h).into());
        }
        if xi.im <= -PI - h / 2.0 {
            return Err(ModelError::OutOfDomain(xi.im));
        }
        Ok(Self { xi, h })
    }

    pub fn p0(&self) -> C64 {
        C64::i() * self.xi + self.h / 2.0
    }

    pub fn lambda(&self) -> C64 {
        self.xi.exp()
    }

    pub fn conj(&self) -> Self {
        Self { xi: self.xi.conj(), h: self.h }
    }
}

/// Reference contour: asymptote `e^{-iπ/4}ℝ` at both ends, vertical middle
/// segment on the imaginary axis between `∓i Re ξ`.
#[derive(Clone, Debug, Serialize)]
pub struct ModelContour {
    pub knots: Vec<C64>,
    /// Horizontal distance from the vertical segment to the nearest pole.
    pub min_horizontal_distance: f64,
    /// True when that distance exceeds `h`, so the plain integral solves the
    /// equation without relying on analytic continuation in `ξ`.
    pub straight: bool,
}

pub const CONTOUR_GUARD: f64 = 1e-3;

pub fn model_contour(params: &ModelParams) -> Result<ModelContour, ModelError> {
    let h = params.h;
    let xi = params.xi;
    // Left ray starts at p₀ - π - h, right ray at -(p₀ - π - h).
    let first = params.p0() - PI - h;
    let dist = -first.re;
    if dist <= CONTOUR_GUARD {
        return Err(ModelError::PoleTooClose { pole: first, distance: dist.max(0.0) });
    }
    let a = C64::new(0.0, -xi.re);
    let b = C64::new(0.0, xi.re);
    let far = 40.0 * C64::from_polar(1.0, -PI / 4.0);
    Ok(ModelContour {
        knots: vec![a + far, a, b, b - far],
        min_horizontal_distance: dist,
        straight: dist > h,
    })
}

/// `exp(log_scale) · Σ` representation that survives huge exponents.
#[derive(Clone, Copy, Debug)]
struct Scaled {
    log_scale: f64,
    sum: C64,
}

impl Scaled {
    fn value(&self) -> C64 {
        self.sum * self.log_scale.exp()
    }
}

/// Cluster of left-ray poles with circle-quadrature data for residues.
#[derive(Clone, Debug)]
struct PoleCluster {
    /// `Re p + Im p` of the cluster centre; orders clusters across the line.
    level: f64,
    /// `(p_k, ln[v(p_k)(p_k - c)/N])` for the circle nodes.
    nodes: Vec<(C64, C64)>,
}

#[derive(Debug, Default)]
struct PoleCache {
    /// Clusters are complete for `Re p ≥ -reach` on the left ray.
    reach: f64,
    clusters: Vec<PoleCluster>,
}

/// Contour integral for one value of `ξ`.
#[derive(Debug)]
pub struct ModelKernel {
    params: ModelParams,
    p0: C64,
    sigma: SigmaEngine,
    poles: RwLock<PoleCache>,
    lines: RwLock<HashMap<i64, LineCache>>,
    circle_nodes: usize,
}

/// Cached integrand data along one steepest-descent line.
#[derive(Debug)]
struct LineCache {
    origin: C64,
    step: f64,
    /// Index of `nodes[0]`; node `k` sits at `origin + LINE_DIR·k·step`.
    k_lo: i64,
    /// `(p, pre(p) + ln v(p))`.
    nodes: Vec<(C64, C64)>,
    /// Residue terms with their z-independent logs.
    residues: Vec<(C64, C64)>,
}

/// Line levels are quantized so nearby `z` share node data.
const LINE_QUANTUM: f64 = 1.0;
const LINE_DIR: C64 = C64::new(-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);

const CLUSTER_GAP: f64 = 0.05;
const TAIL_DROP: f64 = 38.0;

impl ModelKernel {
    pub fn new(params: ModelParams) -> Result<Self, ModelError> {
        model_contour(&params)?;
        let sigma = SigmaEngine::new(params.h)?.with_max_reduce(f64::INFINITY);
        Ok(Self { params, p0: params.p0(), sigma, poles: RwLock::new(PoleCache::default()), lines: RwLock::new(HashMap::new()), circle_nodes: 64 })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// `ln v(p)`.
    pub fn log_v(&self, p: C64) -> C64 {
        let h = self.params.h;
        -C64::i() * self.p0 * p / (2.0 * h) + self.sigma.log_eval_unchecked(p - self.p0)
            - self.sigma.log_eval_unchecked(p + self.p0)
    }

    /// `v(p)` with a guard against the pole rays.
    pub fn v_eval(&self, p: C64) -> Result<C64, ModelError> {
        let (_, pole_a) = self.sigma.nearest_singularities(p - self.p0);
        let (zero_b, _) = self.sigma.nearest_singularities(p + self.p0);
        for q in [pole_a + self.p0, zero_b - self.p0] {
            if (p - q).norm() < crate::sigma::POLE_GUARD {
                return Err(SigmaError::NearSingular { point: q }.into());
            }
        }
        Ok(self.log_v(p).exp())
    }

    /// Positions of left-ray poles with `Re p ≥ -reach`, sorted by decreasing `Re`.
    fn left_poles(&self, reach: f64) -> Vec<C64> {
        let h = self.params.h;
        let first = self.p0 - PI - h;
        let mut out = Vec::new();
        let mut j = 0;
        while first.re - 2.0 * PI * j as f64 >= -reach {
            let mut k = 0;
            loop {
                let q = first - 2.0 * PI * j as f64 - 2.0 * h * k as f64;
                if q.re < -reach {
                    break;
                }
                out.push(q);
                k += 1;
            }
            j += 1;
        }
        out.sort_by(|a, b| b.re.partial_cmp(&a.re).unwrap());
        out
    }

    fn ensure_poles(&self, reach: f64) {
        if self.poles.read().unwrap().reach >= reach {
            return;
        }
        let mut cache = self.poles.write().unwrap();
        if cache.reach >= reach {
            return;
        }
        let target = reach.max(cache.reach * 1.5).max(20.0);
        // Build with a margin so the outermost cluster sees its neighbour.
        let pts = self.left_poles(target + 4.0 * PI.max(self.params.h));
        let mut groups: Vec<Vec<C64>> = Vec::new();
        for q in pts {
            match groups.last_mut() {
                Some(g) if (g.last().unwrap().re - q.re) < CLUSTER_GAP => g.push(q),
                _ => groups.push(vec![q]),
            }
        }
        let n = self.circle_nodes;
        let mut clusters = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            let hi = g.first().unwrap().re;
            let lo = g.last().unwrap().re;
            if hi < -target {
                break;
            }
            let center = C64::new(0.5 * (hi + lo), g[0].im);
            let half = 0.5 * (hi - lo);
            let gap_prev = if gi > 0 { groups[gi - 1].last().unwrap().re - hi } else { f64::INFINITY };
            let gap_next = groups.get(gi + 1).map(|x| lo - x[0].re).unwrap_or(f64::INFINITY);
            let gap = gap_prev.min(gap_next).min(4.0);
            let radius = half + (0.4 * gap).min(0.2);
            let nodes = (0..n)
                .map(|k| {
                    let e = C64::from_polar(1.0, 2.0 * PI * (k as f64 + 0.5) / n as f64);
                    let p = center + e * radius;
                    (p, self.log_v(p) + (e * radius / n as f64).ln())
                })
                .collect();
            clusters.push(PoleCluster { level: center.re + center.im, nodes });
        }
        cache.clusters = clusters;
        cache.reach = target;
    }

    /// Levels `Re q + Im q` of poles on both rays near `level`.
    fn nearby_levels(&self, around: f64, span: f64) -> Vec<f64> {
        let h = self.params.h;
        let first = self.p0 - PI - h;
        let l0 = first.re + first.im;
        let r0 = -l0;
        let mut levels = Vec::new();
        let jmax = ((span + around.abs() + l0.abs()) / (2.0 * PI)).ceil() as i64 + 1;
        for j in 0..=jmax {
            let kmax = ((span + around.abs() + l0.abs()) / (2.0 * h)).ceil() as i64 + 1;
            for k in 0..=kmax {
                let t = 2.0 * PI * j as f64 + 2.0 * h * k as f64;
                for lv in [l0 - t, r0 + t] {
                    if (lv - around).abs() <= span {
                        levels.push(lv);
                    }
                }
            }
        }
        levels
    }

    /// Line level near `target` keeping at least `want` from every pole level.
    fn choose_level(&self, target: f64) -> Result<(f64, f64), ModelError> {
        let want = 0.5f64.min(0.5 * self.params.h.min(PI));
        let mut levels = self.nearby_levels(target, 12.0);
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let dist = |c: f64| levels.iter().map(|l| (l - c).abs()).fold(f64::INFINITY, f64::min);
        if dist(target) >= want {
            return Ok((target, dist(target)));
        }
        // Midpoints of gaps, nearest first.
        let mut cands: Vec<f64> = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        if let (Some(&a), Some(&b)) = (levels.first(), levels.last()) {
            cands.push(a - want);
            cands.push(b + want);
        }
        cands.sort_by(|a, b| (a - target).abs().partial_cmp(&(b - target).abs()).unwrap());
        for c in cands.iter().copied() {
            if dist(c) >= want {
                return Ok((c, dist(c)));
            }
        }
        let best = cands
            .iter()
            .copied()
            .max_by(|a, b| dist(*a).partial_cmp(&dist(*b)).unwrap())
            .ok_or_else(|| ModelError::QuadratureFail("no pole-free line".into()))?;
        if dist(best) < 0.05 {
            return Err(ModelError::QuadratureFail("pole levels too dense".into()));
        }
        Ok((best, dist(best)))
    }

    /// Node data for the line serving quantized target level `key`.
    fn build_line(&self, key: i64) -> Result<LineCache, ModelError> {
        let h = self.params.h;
        let i = C64::i();
        let (level, gap) = self.choose_level(key as f64 * LINE_QUANTUM)?;
        let origin = C64::new(0.5 * level, 0.5 * level);
        let step = (gap / std::f64::consts::SQRT_2 / 6.0).min(0.35 * h.sqrt()).min(0.4);
        // Residue corrections relative to the separating contour.
        let reach = level.abs() + self.params.xi.re.abs() + 1.0;
        self.ensure_poles(reach);
        let cache = self.poles.read().unwrap();
        let mut residues = Vec::new();
        for cl in cache.clusters.iter() {
            // Left-ray cluster to the right of the line: +2πi Res.
            if cl.level > level {
                for &(p, lw) in &cl.nodes {
                    residues.push((p, self.pre_factor(p) + lw + (2.0 * PI * i).ln()));
                }
            }
            // Mirror cluster on the right ray (v(-p) = v(p)) left of the line: -2πi Res.
            if -cl.level < level {
                for &(p, lw) in &cl.nodes {
                    // Nodes -p_k lie on the circle around -c; (−p_k − (−c)) = −(p_k − c).
                    let q = -p;
                    residues.push((q, self.pre_factor(q) + lw + C64::new(0.0, PI) + (-2.0 * PI * i).ln()));
                }
            }
            if cl.level <= level.min(-level) {
                break;
            }
        }
        Ok(LineCache { origin, step, k_lo: 0, nodes: Vec::new(), residues })
    }

    /// z-independent part of the log integrand.
    fn pre_factor(&self, p: C64) -> C64 {
        let h = self.params.h;
        let i = C64::i();
        -i * p * p / (4.0 * h) + i * PI * p / (2.0 * h)
    }

    fn line_node(&self, line: &LineCache, k: i64) -> (C64, C64) {
        let p = line.origin + LINE_DIR * (k as f64 * line.step);
        (p, self.pre_factor(p) + self.log_v(p))
    }

    /// Sum over a cached line; `None` when nodes outside the cached range are needed.
    fn line_sum(&self, line: &LineCache, z: C64) -> Result<Option<(Scaled, Scaled)>, ModelError> {
        let h = self.params.h;
        let i = C64::i();
        let pc = PI - 2.0 * z;
        let kc = (((pc - line.origin) * LINE_DIR.conj()).re / line.step).round() as i64;
        let zt = |p: C64| -i * z * z / (2.0 * h) - i * z * p / h;
        let get = |k: i64| -> Option<(C64, C64)> {
            let idx = k - line.k_lo;
            (idx >= 0 && (idx as usize) < line.nodes.len()).then(|| line.nodes[idx as usize])
        };
        let mut terms: Vec<(C64, C64)> = Vec::with_capacity(256);
        let Some((p, pre)) = get(kc) else { return Ok(None) };
        let l = pre + zt(p);
        let mut peak = l.re;
        terms.push((p, l));
        for sign in [1i64, -1] {
            let mut below = 0;
            let mut k = 1i64;
            loop {
                let Some((p, pre)) = get(kc + sign * k) else { return Ok(None) };
                let l = pre + zt(p);
                peak = peak.max(l.re);
                terms.push((p, l));
                if l.re < peak - TAIL_DROP {
                    below += 1;
                    if below >= 3 {
                        break;
                    }
                } else {
                    below = 0;
                }
                k += 1;
                if k as f64 * line.step > 400.0 {
                    return Err(ModelError::QuadratureFail("integrand tail does not decay".into()));
                }
            }
        }
        let deriv = |p: C64| -i * z / h - i * p / h;
        let res: Vec<(C64, C64)> = line.residues.iter().map(|&(p, pre)| (p, pre + zt(p))).collect();
        let scale = terms.iter().chain(res.iter()).map(|t| t.1.re).fold(f64::NEG_INFINITY, f64::max);
        let mut m = C64::new(0.0, 0.0);
        let mut dm = C64::new(0.0, 0.0);
        let w = LINE_DIR * line.step;
        for &(p, l) in &terms {
            let e = (l - scale).exp() * w;
            m += e;
            dm += e * deriv(p);
        }
        for &(p, l) in &res {
            let e = (l - scale).exp();
            m += e;
            dm += e * deriv(p);
        }
        Ok(Some((Scaled { log_scale: scale, sum: m }, Scaled { log_scale: scale, sum: dm })))
    }

    /// `m(z)` and `m'(z)`, optionally with the line level shifted by `offset`.
    fn integral(&self, z: C64, offset: f64) -> Result<(Scaled, Scaled), ModelError> {
        let pc = PI - 2.0 * z;
        let key = ((pc.re + pc.im + offset) / LINE_QUANTUM).round() as i64;
        loop {
            {
                let lines = self.lines.read().unwrap();
                if let Some(line) = lines.get(&key) {
                    if let Some(r) = self.line_sum(line, z)? {
                        return Ok(r);
                    }
                }
            }
            let mut lines = self.lines.write().unwrap();
            if !lines.contains_key(&key) {
                let line = self.build_line(key)?;
                lines.insert(key, line);
            }
            let line = lines.get_mut(&key).unwrap();
            if self.line_sum(line, z)?.is_some() {
                continue;
            }
            // Grow the node range around the centre for this z.
            let kc = (((pc - line.origin) * LINE_DIR.conj()).re / line.step).round() as i64;
            let half = (60.0 / line.step).ceil() as i64;
            let (mut lo, mut hi) = (kc - half, kc + half);
            if !line.nodes.is_empty() {
                let cur_hi = line.k_lo + line.nodes.len() as i64 - 1;
                let span = cur_hi - line.k_lo + 1;
                lo = lo.min(line.k_lo - span / 2);
                hi = hi.max(cur_hi + span / 2);
                lo = lo.min(line.k_lo);
                hi = hi.max(cur_hi);
            }
            let mut nodes = Vec::with_capacity((hi - lo + 1) as usize);
            for k in lo..=hi {
                let idx = k - line.k_lo;
                if !line.nodes.is_empty() && idx >= 0 && (idx as usize) < line.nodes.len() {
                    nodes.push(line.nodes[idx as usize]);
                } else {
                    nodes.push(self.line_node(line, k));
                }
            }
            line.k_lo = lo;
            line.nodes = nodes;
        }
    }

    pub fn eval(&self, z: C64) -> Result<C64, ModelError> {
        Ok(self.integral(z, 0.0)?.0.value())
    }

    pub fn eval_with_derivative(&self, z: C64) -> Result<(C64, C64), ModelError> {
        let (m, dm) = self.integral(z, 0.0)?;
        Ok((m.value(), dm.value()))
    }

    /// Same value computed along a line shifted by `offset` (in `Re p + Im p`).
    pub fn eval_shifted_line(&self, z: C64, offset: f64) -> Result<C64, ModelError> {
        Ok(self.integral(z, offset)?.0.value())
    }
}

/// Closed-form coefficients of the asymptotics at `±i∞`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AsymptoticCoeffs {
    pub a0: C64,
    pub b0: C64,
    pub c0: C64,
    pub d0: C64,
}

pub const SIGMA_ZERO_GUARD: f64 = 1e-6;

pub fn m_asymp_coeffs(params: &ModelParams) -> Result<AsymptoticCoeffs, ModelError> {
    let h = params.h;
    let xi = params.xi;
    let i = C64::i();
    let sig = SigmaEngine::new(h)?.with_max_reduce(f64::INFINITY);
    let s = sig.log_eval_unchecked(2.0 * i * xi - PI).exp();
    if s.norm() < SIGMA_ZERO_GUARD {
        return Err(ModelError::NearSingular(s));
    }
    let k = 2.0 * (PI * h).sqrt();
    let pi2 = PI * PI;
    let a0 = i * k * (-i * (i * xi - PI).powi(2) / (4.0 * h) - xi / 4.0 + i * h / 16.0).exp();
    let b0 = k / s * (-i * (PI - i * xi).powi(2) / (4.0 * h) - xi / 4.0 - i * pi2 / (12.0 * h) - i * h / 48.0).exp();
    let c0 = -k * (-i * (PI + i * xi).powi(2) / (4.0 * h) - xi / 4.0 + i * h / 16.0).exp();
    let d0 = k * i / s
        * (-2.0 * PI * xi / h - i * (PI + i * xi).powi(2) / (4.0 * h) - xi / 4.0 + 11.0 * i * pi2 / (12.0 * h)
            - i * h / 48.0)
            .exp();
    Ok(AsymptoticCoeffs { a0, b0, c0, d0 })
}

impl AsymptoticCoeffs {
    /// The two exponentials of the upper asymptotics at `z`.
    pub fn upper_basis(params: &ModelParams, z: C64) -> [C64; 2] {
        let (h, xi, i) = (params.h, params.xi, C64::i());
        let w = z - PI + i * xi;
        [(i * w * w / (2.0 * h) + i * z / 2.0).exp(), (-i * w * w / (2.0 * h) + i * z / 2.0).exp()]
    }

    /// The two exponentials of the lower asymptotics at `z`.
    pub fn lower_basis(params: &ModelParams, z: C64) -> [C64; 2] {
        let (h, xi, i) = (params.h, params.xi, C64::i());
        let w = z - PI - i * xi;
        [
            (i * w * w / (2.0 * h) - i * z / 2.0).exp(),
            (-2.0 * PI * i * z / h - i * w * w / (2.0 * h) - i * z / 2.0).exp(),
        ]
    }

    pub fn upper(&self, params: &ModelParams, z: C64) -> C64 {
        let [e1, e2] = Self::upper_basis(params, z);
        self.a0 * e1 + self.b0 * e2
    }

    pub fn lower(&self, params: &ModelParams, z: C64) -> C64 {
        let [e1, e2] = Self::lower_basis(params, z);
        self.c0 * e1 + self.d0 * e2
    }
}

/// Envelope `P(z)` bounding `|m|` up to a constant.
pub fn m_envelope(params: &ModelParams, z: C64) -> f64 {
    let (x, y, h) = (z.re, z.im, params.h);
    let phi = params.xi.im;
    let slope = if y >= 0.0 { (x - PI - phi).abs() } else { (x + phi).abs() - PI };
    (-0.5 * y.abs() + slope * y.abs() / h).exp()
}

/// The model solution `m` and its partner `m̃(z) = conj(m(conj z, conj ξ))`.
#[derive(Debug)]
pub struct ModelSolution {
    params: ModelParams,
    kernel: ModelKernel,
    /// `None` when `ξ` is real and the partner shares the kernel.
    partner: Option<ModelKernel>,
    coeffs: AsymptoticCoeffs,
}

impl ModelSolution {
    pub fn new(params: ModelParams) -> Result<Self, ModelError> {
        let coeffs = m_asymp_coeffs(&params)?;
        let kernel = ModelKernel::new(params)?;
        let partner = if params.xi.im == 0.0 { None } else { Some(ModelKernel::new(params.conj())?) };
        Ok(Self { params, kernel, partner, coeffs })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn coeffs(&self) -> &AsymptoticCoeffs {
        &self.coeffs
    }

    pub fn kernel(&self) -> &ModelKernel {
        &self.kernel
    }

    pub fn m(&self, z: C64) -> Result<C64, ModelError> {
        self.kernel.eval(z)
    }

    pub fn m_with_derivative(&self, z: C64) -> Result<(C64, C64), ModelError> {
        self.kernel.eval_with_derivative(z)
    }

    pub fn m_tilde(&self, z: C64) -> Result<C64, ModelError> {
        let k = self.partner.as_ref().unwrap_or(&self.kernel);
        Ok(k.eval(z.conj())?.conj())
    }

    /// `(m̃(z), m̃'(z))`.
    pub fn m_tilde_with_derivative(&self, z: C64) -> Result<(C64, C64), ModelError> {
        let k = self.partner.as_ref().unwrap_or(&self.kernel);
        let (v, d) = k.eval_with_derivative(z.conj())?;
        Ok((v.conj(), d.conj()))
    }

    /// `(m(z), m̃(z))`.
    pub fn pair(&self, z: C64) -> Result<(C64, C64), ModelError> {
        Ok((self.m(z)?, self.m_tilde(z)?))
    }

    /// Closed form `{m, m̃} = -4πih e^{ξ/2}`.
    pub fn wronskian_closed_form(&self) -> C64 {
        -4.0 * PI * C64::i() * self.params.h * (self.params.xi / 2.0).exp()
    }

    /// `m(z+h)m̃(z) - m(z)m̃(z+h)` at one point.
    pub fn wronskian_at(&self, z: C64) -> Result<C64, ModelError> {
        let h = self.params.h;
        let (m0, t0) = self.pair(z)?;
        let (m1, t1) = self.pair(z + h)?;
        Ok(m1 * t0 - m0 * t1)
    }

    /// Numerical wronskian averaged over `points`; fails if it is not constant.
    pub fn wronskian(&self, points: &[C64], tol: f64) -> Result<C64, ModelError> {
        let vals: Vec<C64> = points.iter().map(|&z| self.wronskian_at(z)).collect::<Result<_, _>>()?;
        let mean = vals.iter().sum::<C64>() / vals.len() as f64;
        let spread = vals.iter().map(|w| (w - mean).norm()).fold(0.0, f64::max);
        if spread > tol * mean.norm() {
            return Err(ModelError::NonConstant(spread / mean.norm()));
        }
        Ok(mean)
    }

    pub fn envelope(&self, z: C64) -> f64 {
        m_envelope(&self.params, z)
    }

    /// Relative residual of the model equation at `z`.
    pub fn equation_residual(&self, z: C64) -> Result<f64, ModelError> {
        let h = self.params.h;
        let (a, b, c) = (self.m(z + h)?, self.m(z - h)?, self.m(z)?);
        let lam = self.params.lambda();
        let r = a + b + 2.0 * lam * z.cos() * c;
        Ok(r.norm() / a.norm().max(b.norm()).max(c.norm()))
    }

    /// Solution with a simple pole at `z₀` (residue `h/π`), built from `m` and `m̃`.
    pub fn pole_solution(&self, z: C64, z0: C64, guard: f64) -> Result<C64, ModelError> {
        let h = self.params.h;
        if (z - z0).norm() < guard {
            return Err(ModelError::AtPole(z0));
        }
        let (m1, t1) = self.pair(z)?;
        let (m0, t0) = self.pair(z0 + h)?;
        let w = self.wronskian_closed_form();
        Ok(cot_kernel(z, z0, h) * (m1 * t0 - m0 * t1) / w)
    }
}

/// `cot(π(ζ - z)/h) + i`.
pub fn cot_kernel(z: C64, zeta: C64, h: f64) -> C64 {
    let a = PI * (zeta - z) / h;
    // cot a + i = 2i e^{2ia}/(e^{2ia} - 1), stable for large |Im a|.
    let i = C64::i();
    if a.im >= 0.0 {
        let e = (2.0 * i * a).exp();
        2.0 * i * e / (e - 1.0)
    } else {
        let e = (-2.0 * i * a).exp();
        2.0 * i / (1.0 - e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn sol(xi: C64, h: f64) -> ModelSolution {
        ModelSolution::new(ModelParams::new(xi, h).unwrap()).unwrap()
    }

    #[test]
    fn kernel_symmetry_and_difference_equation() {
        let h = 2f64.sqrt();
        let xi = c(0.3, 0.1);
        let k = ModelKernel::new(ModelParams::new(xi, h).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..30 {
            let p = c(rng.gen_range(-2.0..2.0), rng.gen_range(-3.0..3.0));
            let (a, b) = (k.v_eval(p).unwrap(), k.v_eval(-p).unwrap());
            assert!((a - b).norm() < 1e-9 * a.norm());
            let i = C64::i();
            let ratio = k.v_eval(p + h).unwrap() / k.v_eval(p - h).unwrap();
            let want = ((i * h / 2.0).exp() + (i * p + xi).exp()) / (xi.exp() + (i * h / 2.0 + i * p).exp());
            assert!((ratio - want).norm() < 1e-8 * want.norm(), "{ratio} {want}");
        }
        let p = c(0.2, -20.0);
        let r = k.v_eval(p).unwrap() * (i_() * k.p0 * p / (2.0 * h)).exp();
        assert!((r - 1.0).norm() < 1e-6);
    }

    fn i_() -> C64 {
        C64::i()
    }

    #[test]
    fn contour_domain() {
        let h = 1.0;
        assert!(model_contour(&ModelParams::new(c(0.0, 0.0), h).unwrap()).unwrap().straight);
        let ok = ModelParams::new(c(0.0, -PI + h / 2.0 + 0.01), h).unwrap();
        assert!(model_contour(&ok).is_ok());
        assert!(ModelParams::new(c(0.0, -PI - h / 2.0 - 0.01), h).is_err());
        let p = ModelParams::new(c(0.4, 0.0), 2f64.sqrt()).unwrap();
        let cont = model_contour(&p).unwrap();
        // Distance scan over the first poles of both rays.
        let k = ModelKernel::new(p).unwrap();
        let poles = k.left_poles(60.0);
        let dmin = poles.iter().map(|q| q.re.abs()).fold(f64::INFINITY, f64::min);
        assert!((dmin - cont.min_horizontal_distance).abs() < 1e-12);
        assert!(dmin > p.h);
    }

    #[test]
    fn equation_residual_grid() {
        for xi in [c(0.0, 0.0), c(0.3, 0.0)] {
            let s = sol(xi, 2f64.sqrt());
            for a in 0..5 {
                for b in 0..5 {
                    let z = c(-3.0 + 1.5 * a as f64, -4.0 + 2.0 * b as f64);
                    let r = s.equation_residual(z).unwrap();
                    assert!(r < 1e-6, "xi={xi} z={z} r={r}");
                }
            }
        }
    }

    #[test]
    fn wronskian_closed_form() {
        let pts: Vec<C64> = (0..10).map(|k| c(-2.0 + 0.45 * k as f64, -1.0 + 0.25 * k as f64)).collect();
        for xi in [c(0.0, 0.0), c(0.3, 0.0), c(-0.3, 0.0), c(0.5, 0.2)] {
            let s = sol(xi, 2f64.sqrt());
            let w = s.wronskian(&pts, 1e-8).unwrap();
            let want = s.wronskian_closed_form();
            assert!((w - want).norm() < 1e-5 * want.norm(), "xi={xi} {w} vs {want}");
        }
    }

    #[test]
    fn line_shift_invariance() {
        let s = sol(c(0.2, 0.1), 2f64.sqrt());
        for z in [c(0.5, 3.0), c(-1.0, -5.0), c(2.0, 9.0), c(0.1, 0.0)] {
            let a = s.kernel().eval(z).unwrap();
            for off in [1.0, -1.0, 2.0] {
                let b = s.kernel().eval_shifted_line(z, off).unwrap();
                assert!((a - b).norm() < 1e-8 * a.norm(), "z={z} off={off}: {a} {b}");
            }
        }
    }

    fn fit2(s: &ModelSolution, y: f64, center: f64, upper: bool) -> [C64; 2] {
        let p = *s.params();
        let pts: Vec<C64> = (0..9).map(|k| c(center - 0.4 + 0.1 * k as f64, y)).collect();
        let rows: Vec<([C64; 2], C64)> = pts
            .iter()
            .map(|&z| {
                let basis = if upper { AsymptoticCoeffs::upper_basis(&p, z) } else { AsymptoticCoeffs::lower_basis(&p, z) };
                (basis, s.m(z).unwrap())
            })
            .collect();
        // Normal equations for two unknowns.
        let mut g = [[C64::new(0.0, 0.0); 2]; 2];
        let mut r = [C64::new(0.0, 0.0); 2];
        for (b, m) in &rows {
            for i in 0..2 {
                for j in 0..2 {
                    g[i][j] += b[i].conj() * b[j];
                }
                r[i] += b[i].conj() * m;
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        [(r[0] * g[1][1] - g[0][1] * r[1]) / det, (g[0][0] * r[1] - g[1][0] * r[0]) / det]
    }

    #[test]
    fn coefficient_fit_matches_closed_forms() {
        for xi in [c(0.0, 0.0), c(0.3, 0.0)] {
            let s = sol(xi, 2f64.sqrt());
            let k = s.coeffs();
            let [a, b] = fit2(&s, 14.0, PI + xi.im, true);
            let [cc, d] = fit2(&s, -14.0, -xi.im, false);
            for (got, want, name) in [(a, k.a0, "a0"), (b, k.b0, "b0"), (cc, k.c0, "c0"), (d, k.d0, "d0")] {
                assert!((got - want).norm() < 1e-3 * want.norm(), "xi={xi} {name}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn b0_d0_ratio_identity() {
        // d₀/b₀ = i·exp(-2πξ/h - i(π+iξ)²/4h + i(π-iξ)²/4h + iπ²/h); at ξ=0 that is i·e^{iπ²/h}.
        let h = 2f64.sqrt();
        let k = m_asymp_coeffs(&ModelParams::new(c(0.0, 0.0), h).unwrap()).unwrap();
        let want = C64::i() * (C64::i() * PI * PI / h).exp();
        assert!((k.d0 / k.b0 - want).norm() < 1e-12);
        // At ξ = 0, σ(2iξ-π) = σ(-π) has the explicit value.
        let sig = SigmaEngine::new(h).unwrap();
        let s = sig.closed_form_at_minus_pi();
        let b0 = 2.0 * (PI * h).sqrt() / s
            * (-C64::i() * PI * PI / (4.0 * h) - C64::i() * PI * PI / (12.0 * h) - C64::i() * h / 48.0).exp();
        assert!((k.b0 - b0).norm() < 1e-9 * b0.norm());
    }

    #[test]
    fn partner_properties() {
        let s = sol(c(0.3, 0.0), 2f64.sqrt());
        let z = c(0.4, 1.3);
        let t = s.m_tilde(z).unwrap();
        assert!((t - s.m(z.conj()).unwrap().conj()).norm() < 1e-14 * t.norm());
        let h = s.params().h;
        let lam = s.params().lambda();
        let r = s.m_tilde(z + h).unwrap() + s.m_tilde(z - h).unwrap() + 2.0 * lam * z.cos() * t;
        assert!(r.norm() < 1e-6 * t.norm().max(s.m_tilde(z + h).unwrap().norm()));
        // Leading term at +i∞ is conj(c₀(conj ξ)) times the conjugated lower exponential.
        let s = sol(c(0.2, 0.15), 2f64.sqrt());
        let pc = m_asymp_coeffs(&s.params().conj()).unwrap();
        let z = c(1.5, 12.0);
        let lead = pc.c0.conj() * AsymptoticCoeffs::lower_basis(&s.params().conj(), z.conj())[0].conj();
        let t = s.m_tilde(z).unwrap();
        assert!((t - lead).norm() < 1e-2 * lead.norm(), "{t} vs {lead}");
    }

    #[test]
    fn pole_solution_residue_and_equation() {
        let s = sol(c(0.1, 0.0), 2f64.sqrt());
        let h = s.params().h;
        let z0 = c(0.3, 0.4);
        let n = 32;
        let r = 0.05;
        let res: C64 = (0..n)
            .map(|k| {
                let e = C64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64);
                s.pole_solution(z0 + r * e, z0, 1e-3 * h).unwrap() * e * r
            })
            .sum::<C64>()
            / n as f64;
        assert!((res - h / PI).norm() < 1e-6, "{res}");
        let z = c(1.1, -0.7);
        let f = |w: C64| s.pole_solution(w, z0, 1e-3 * h).unwrap();
        let lam = s.params().lambda();
        let resid = f(z + h) + f(z - h) + 2.0 * lam * z.cos() * f(z);
        assert!(resid.norm() < 1e-6 * f(z).norm().max(f(z + h).norm()));
        let a = f(z0 + h + 1e-5);
        let b = f(z0 + h - 1e-5);
        assert!((a - b).norm() < 1e-4 * a.norm().max(1.0));
        assert!(matches!(s.pole_solution(z0, z0, 1e-3 * h), Err(ModelError::AtPole(_))));
    }

    #[test]
    fn envelope_dominates() {
        let s = sol(c(0.0, 0.0), 2f64.sqrt());
        assert_eq!(s.envelope(c(1.0, 0.0)), 1.0);
        for a in 0..7 {
            for b in 0..9 {
                let z = c(-3.0 + a as f64, -12.0 + 3.0 * b as f64);
                let m = s.m(z).unwrap().norm();
                assert!(m <= 10.0 * s.envelope(z), "z={z} |m|={m} P={}", s.envelope(z));
            }
        }
    }

    #[test]
    fn derivative_matches_difference() {
        let s = sol(c(0.2, 0.0), 1.0);
        let z = c(0.7, 1.2);
        let (_, d) = s.m_with_derivative(z).unwrap();
        let e = 1e-5;
        let fd = (s.m(z + e).unwrap() - s.m(z - e).unwrap()) / (2.0 * e);
        assert!((d - fd).norm() < 1e-6 * d.norm());
    }
}
