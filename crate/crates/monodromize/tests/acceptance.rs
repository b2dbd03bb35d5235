//! Acceptance suite: one line per criterion with the measured figures, the
//! tolerance and the runtime. Exits nonzero if any criterion fails.

use std::f64::consts::{PI, SQRT_2};
use std::time::{Duration, Instant};

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use monodromize::fredholm::ContourSpec;
use monodromize::harper::{
    harper_matrix, lambda_law, pair_monodromy, renorm_iterate, step_map, HarperPoint, QuadraticRatio, RenormConfig,
    RATIONAL_TOL,
};
use monodromize::model::{AsymptoticCoeffs, ModelParams, ModelSolution};
use monodromize::monodromy::{monodromy_matrix, structure_check, wronskian_spread};
use monodromize::reduction::{
    assemble_minimal, min_asymp_coeffs, AsymptoticCoefficients, CanonicalBases, Kind, MinimalConfig, MinimalSolution,
    ReducedParams, SlotConfig, SolutionSampler,
};
use monodromize::sigma::SigmaEngine;
use monodromize::trigpoly::{cf_expand, MatrixTrigPoly, CF_RATIONAL_TOL};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;
type Criterion = (&'static str, fn() -> Outcome, u64);

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn rel(a: C64, b: C64) -> f64 {
    (a - b).norm() / b.norm()
}

fn harper_d(resolution: f64) -> (MatrixTrigPoly, ReducedParams, MinimalSolution) {
    let m = harper_matrix(1.0, c(0.1, 0.0)).unwrap();
    let p = ReducedParams::new(&m, SQRT_2, 0.3).unwrap();
    let cfg = MinimalConfig { contour: ContourSpec { resolution, ..ContourSpec::default() }, ..MinimalConfig::default() };
    let sol = assemble_minimal(&m, &p, Kind::D, &cfg).unwrap();
    (m, p, sol)
}

fn sigma_closed_values() -> Outcome {
    let mut worst_value: f64 = 0.0;
    let mut worst_residue: f64 = 0.0;
    for h in [1.0, SQRT_2, 2.5] {
        let eng = SigmaEngine::new(h)?;
        worst_value = worst_value.max(rel(eng.value(c(-PI, 0.0))?, eng.closed_form_at_minus_pi()));
        worst_residue = worst_residue.max(eng.residue().relative_error);
    }
    Ok((worst_value < 1e-8 && worst_residue < 1e-8, format!("σ(-π) {worst_value:.1e}, residue {worst_residue:.1e} (tol 1e-8)")))
}

fn sigma_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut envelope: f64 = 0.0;
    for h in [1.0, SQRT_2, 2.5] {
        let eng = SigmaEngine::new(h)?;
        let pts: Vec<C64> = (0..200).map(|_| c(rng.gen_range(-8.0..8.0), rng.gen_range(-3.0..3.0))).collect();
        let chk = eng.selfcheck(&pts);
        worst = worst.max(chk.functional).max(chk.shift).max(chk.reflection);
        // Deviation from the asymptotes at |Im z| = 15 over the expected decay.
        let y = 15.0;
        let bound = (-0.9 * 1f64.min(PI / h) * y).exp();
        for k in 0..16 {
            let x = -PI + 2.0 * PI * k as f64 / 16.0;
            let low = (eng.value(c(x, -y))? - 1.0).norm();
            let z = c(x, y);
            let up = ((eng.log_eval_unchecked(z) - eng.upper_asymptote(z).ln()).exp() - 1.0).norm();
            envelope = envelope.max(low.max(up) / bound);
        }
    }
    Ok((worst < 1e-8 && envelope < 10.0, format!("identities {worst:.1e} (tol 1e-8), envelope ratio {envelope:.2} (< 10)")))
}

/// Least-squares fit of `m` against the two asymptotic basis functions on a short segment.
fn fit_coeffs(s: &ModelSolution, y: f64, center: f64, upper: bool) -> [C64; 2] {
    let p = *s.params();
    let mut g = [[C64::new(0.0, 0.0); 2]; 2];
    let mut r = [C64::new(0.0, 0.0); 2];
    for k in 0..9 {
        let z = c(center - 0.4 + 0.1 * k as f64, y);
        let b = if upper { AsymptoticCoeffs::upper_basis(&p, z) } else { AsymptoticCoeffs::lower_basis(&p, z) };
        let m = s.m(z).unwrap();
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

fn model_solution() -> Outcome {
    let (mut res, mut wr, mut fit): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for xi in [c(0.0, 0.0), c(0.3, 0.0)] {
        let s = ModelSolution::new(ModelParams::new(xi, SQRT_2)?)?;
        for a in 0..5 {
            for b in 0..5 {
                res = res.max(s.equation_residual(c(-3.0 + 1.5 * a as f64, -4.0 + 2.0 * b as f64))?);
            }
        }
        let pts: Vec<C64> = (0..8).map(|k| c(-2.0 + 0.5 * k as f64, -1.0 + 0.3 * k as f64)).collect();
        let w = s.wronskian(&pts, 1e-6)?;
        let want = -4.0 * PI * C64::i() * SQRT_2 * (xi / 2.0).exp();
        wr = wr.max(rel(w, want));
        let k = s.coeffs();
        let [a0, b0] = fit_coeffs(&s, 14.0, PI + xi.im, true);
        let [c0, d0] = fit_coeffs(&s, -14.0, -xi.im, false);
        for (got, want) in [(a0, k.a0), (b0, k.b0), (c0, k.c0), (d0, k.d0)] {
            fit = fit.max(rel(got, want));
        }
    }
    Ok((
        res < 1e-6 && wr < 1e-5 && fit < 1e-3,
        format!("residual {res:.1e} (1e-6), wronskian {wr:.1e} (1e-5), coefficients {fit:.1e} (1e-3)"),
    ))
}

fn fredholm() -> Outcome {
    let (_, _, s1) = harper_d(1.0);
    let (_, _, s2) = harper_d(2.0);
    let (f1, f2) = (s1.fredholm(), s2.fredholm());
    let ct = &f1.kernel().contour;
    let mut nystrom: f64 = 0.0;
    for &(dx, y) in &[(0.3, 0.2), (0.8, 3.0), (-0.4, -2.0), (1.0, 6.0), (-1.0, -5.0)] {
        let z = c(ct.x_at(y) + dx, y);
        nystrom = nystrom.max(rel(f1.eval(z)?, f2.eval(z)?));
    }
    let grid = f1.grid_residual().max(f2.grid_residual());
    let margin = f1.kernel().reach_margin();
    let mut eq: f64 = 0.0;
    for y in [-3.0, -1.0, 0.0, 0.5, 2.0, 4.0] {
        for frac in [-0.9, 0.0, 0.9] {
            let z = c(ct.x_at(y) + frac * margin, y);
            eq = eq.max(f1.equation_residual(z)?);
        }
    }
    Ok((
        nystrom < 1e-6 && grid < 1e-8 && eq < 1e-6,
        format!("N→2N {nystrom:.1e} (1e-6), grid {grid:.1e} (1e-8), vicinity equation {eq:.1e} (1e-6)"),
    ))
}

fn slot0(co: &AsymptoticCoefficients) -> [C64; 4] {
    [co.slots.a[0], co.slots.b[0], co.slots.c[0], co.slots.d[0]]
}

fn minimal_solutions() -> Outcome {
    let (m, p, d) = harper_d(1.0);
    let mut res: f64 = 0.0;
    for a in 0..7 {
        for b in 0..5 {
            res = res.max(d.equation_residual(c(-3.0 * PI + PI * a as f64, -8.0 + 4.0 * b as f64))?);
        }
    }
    let bases = CanonicalBases::for_params(&m, &p)?;
    let slots = SlotConfig::default();
    let co_d = min_asymp_coeffs(&d, &bases, &slots)?;

    // Same solution from a differently discretized contour: the ratio must be constant.
    let other = ContourSpec { t_max: Some(30.0), resolution: 1.3, join_height: 3.0, max_panel: 0.35 };
    let d2 = assemble_minimal(&m, &p, Kind::D, &MinimalConfig { contour: other, ..MinimalConfig::default() })?;
    let ratios: Vec<C64> = [c(0.3, 0.5), c(2.0, -3.0), c(-4.0, 6.0), c(5.5, 1.0), c(-1.0, -7.0)]
        .iter()
        .map(|&z| Ok(d2.eval(z)?[0] / d.eval(z)?[0]))
        .collect::<Result<_, Box<dyn std::error::Error>>>()?;
    let spread = ratios.iter().map(|r| (r - ratios[0]).norm()).fold(0.0, f64::max) / ratios[0].norm();

    // Wronskians of every pair of kinds against both coefficient products.
    let mut sols = vec![d];
    let mut coeffs = vec![co_d];
    for kind in [Kind::A, Kind::B, Kind::C] {
        let s = assemble_minimal(&m, &p, kind, &MinimalConfig::default())?;
        coeffs.push(min_asymp_coeffs(&s, &bases, &slots)?);
        sols.push(s);
    }
    let vanishing = coeffs.iter().map(|c| c.vanishing_ratio()).fold(0.0, f64::max);
    let (wf, wg) = (bases.w_f(), bases.w_g());
    let mut table: f64 = 0.0;
    let mut rows = 0;
    for i in 0..4 {
        for j in i + 1..4 {
            let (x, y) = (&sols[i], &sols[j]);
            let x0 = 0.5 * (x.window_center(0.0) + y.window_center(0.0));
            let pts: Vec<C64> = (0..16).map(|k| c(x0 + p.h * k as f64 / 16.0, 0.0)).collect();
            let (w, _) = wronskian_spread(x, y, &pts)?;
            let (u, v) = (slot0(&coeffs[i]), slot0(&coeffs[j]));
            let plus = wf * (u[0] * v[1] - u[1] * v[0]);
            let minus = wg * (u[2] * v[3] - u[3] * v[2]);
            table = table.max(rel(plus, w)).max(rel(minus, w));
            rows += 1;
        }
    }
    Ok((
        res < 1e-6 && vanishing < 1e-6 && spread < 1e-5 && table < 1e-4,
        format!(
            "residual {res:.1e} (1e-6), vanishing {vanishing:.1e} (1e-6), uniqueness {spread:.1e} (1e-5), \
             {rows} wronskian identities {table:.1e} (1e-4)"
        ),
    ))
}

fn monodromy_structure() -> Outcome {
    let (m, p, d) = harper_d(1.0);
    let b = assemble_minimal(&m, &p, Kind::B, &MinimalConfig::default())?;
    let bases = CanonicalBases::for_params(&m, &p)?;
    let slots = SlotConfig::default();
    let (cd, cb) = (min_asymp_coeffs(&d, &bases, &slots)?, min_asymp_coeffs(&b, &bases, &slots)?);
    let r = monodromy_matrix(&d, &b, 64, p.n)?;
    let rep = structure_check(&r, p.n, bases.f.1.multiplier_constant(), bases.g.0.multiplier_constant(), &cd, &cb, 1e-12);
    let n_cmp = rep.comparisons.iter().filter(|c| c.relative_error.is_some()).count();
    Ok((
        r.det_residual < 1e-7 && r.periodicity_residual < 1e-7 && r.tail_ratio < 1e-5 && n_cmp == 8 && rep.max_error < 1e-3,
        format!(
            "det {:.1e}, periodicity {:.1e} (1e-7), tail {:.1e} (1e-5), {n_cmp} comparisons {:.1e} (1e-3)",
            r.det_residual, r.periodicity_residual, r.tail_ratio, rep.max_error
        ),
    ))
}

fn harper_closed_form() -> Outcome {
    let cfg = RenormConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for lambda in [0.8, 1.0, 1.25] {
        let r = pair_monodromy(&HarperPoint::harper(lambda, c(0.1, 0.0), SQRT_2), &cfg)?;
        let p = &r.projection;
        let sh = &p.shape;
        let shape = sh.m11.max(sh.m12).max(sh.m21).max(sh.m22);
        let dev = p.formula_deviation.unwrap_or(f64::INFINITY);
        pass &= sh.cosine < 1e-4 && sh.m22_nonconstant < 1e-4 && shape < 1e-4 && sh.a_identity < 1e-4 && dev < 1e-4;
        parts.push(format!(
            "λ={lambda}: cos {:.0e} shape {:.0e} a·st {:.0e} formula {:.0e}",
            sh.cosine, shape, sh.a_identity, dev
        ));
    }
    Ok((pass, format!("{} (1e-4)", parts.join("; "))))
}

fn renormalization() -> Outcome {
    let golden = QuadraticRatio::golden();
    let start = HarperPoint::harper(1.0, c(0.0, 0.0), golden.h()).with_ratio(golden);
    let traj = renorm_iterate(&start, 2, &RenormConfig::default());
    let shape = traj.steps.iter().map(|s| s.shape.max()).fold(0.0, f64::max);
    let two_steps = traj.termination.is_none() && traj.steps.len() == 2 && shape < 1e-4;

    // λ-law: λ₁ = λ^{2π/h}, composed over two steps.
    let (l, h0) = (1.25, golden.h());
    let h1 = step_map(h0, RATIONAL_TOL).unwrap();
    let law = (lambda_law(lambda_law(l, h0), h1) - l.powf(4.0 * PI * PI / (h0 * h1))).abs() / l
        + traj.points.iter().map(|p| (p.lambda - 1.0).abs()).sum::<f64>();

    // Exact step map: golden is a bitwise fixed point.
    let mut r = golden;
    let mut bitwise = true;
    for _ in 0..5 {
        r = r.gauss()?.ok_or("golden ratio terminated")?;
        bitwise &= r.h().to_bits() == golden.h().to_bits();
    }
    // Floating step map, for the record.
    let mut hf = golden.h();
    for _ in 0..5 {
        hf = step_map(hf, RATIONAL_TOL).unwrap();
    }
    let float_drift = (hf - golden.h()).abs();

    let third = QuadraticRatio::rational(1, 3)?;
    let terminates = third.gauss()?.is_none() && step_map(2.0 * PI / 3.0, RATIONAL_TOL).is_none();
    Ok((
        two_steps && law < 1e-12 && bitwise && terminates,
        format!(
            "{} steps, shape {shape:.1e} (1e-4), λ-law {law:.0e}, golden bitwise {bitwise} \
             (float map drift {float_drift:.0e}), 2π/3 terminates {terminates}",
            traj.steps.len()
        ),
    ))
}

fn euclid(p: u64, q: u64) -> Vec<u64> {
    let (mut a, mut b) = (q, p);
    let mut out = Vec::new();
    while b != 0 {
        out.push(a / b);
        (a, b) = (b, a % b);
    }
    out
}

fn continued_fraction() -> Outcome {
    let mut checked = 0;
    for q in 2..=50u64 {
        for p in 1..q {
            let e = cf_expand(2.0 * PI * p as f64 / q as f64, 64, CF_RATIONAL_TOL)?;
            if e.p != euclid(p, q) || !e.terminated {
                return Ok((false, format!("mismatch at {p}/{q}: {:?} vs {:?}", e.p, euclid(p, q))));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} fractions p/q, q ≤ 50, exact")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 sigma closed values", sigma_closed_values, 5),
        ("2 sigma identities", sigma_identities, 30),
        ("3 model solution", model_solution, 120),
        ("4 fredholm", fredholm, 180),
        ("5 minimal solutions", minimal_solutions, 300),
        ("6 monodromy structure", monodromy_structure, 300),
        ("7 harper closed form", harper_closed_form, 600),
        ("8 renormalization", renormalization, 1200),
        ("9 continued fraction", continued_fraction, 1),
    ];
    monodromize::cli::set_threads(1);
    let mut failures = 0;
    for (name, run, limit) in criteria {
        let t = Instant::now();
        let outcome = run();
        let dt = t.elapsed();
        let in_time = dt <= Duration::from_secs(limit);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} {name}: {detail} [{:.1} s, limit {limit} s]",
            if ok { "PASS" } else { "FAIL" },
            dt.as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
