//! Command-line driver: argument parsing, `key = value` configuration and
//! JSON/CSV output. Exit status is 0 when every check passes, 2 when a check
//! fails and 1 on errors.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64 as C64;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::bloch::{canonical_basis, consistency_check, principal_phi, Side};
use crate::fredholm::ContourSpec;
use crate::harper::{
    hfamily_matrix, pair_monodromy, renorm_iterate, Chart, HarperError, HarperPoint, PairConfig, QuadraticRatio,
    RenormConfig,
};
use crate::model::{m_asymp_coeffs, ModelParams, ModelSolution};
use crate::monodromy::{monodromy_matrix, structure_check};
use crate::reduction::{
    assemble_minimal, min_asymp_coeffs, CanonicalBases, Kind, MinimalConfig, MinimalSolution, ReducedParams,
    SlotConfig,
};
use crate::sigma::SigmaEngine;
use crate::trigpoly::{omega_classify, MatrixTrigPoly};

pub const SCHEMA: &str = "monodromize/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Harper(#[from] HarperError),
    #[error(transparent)]
    Reduction(#[from] crate::reduction::ReductionError),
    #[error(transparent)]
    Monodromy(#[from] crate::monodromy::MonodromyError),
    #[error(transparent)]
    Sigma(#[from] crate::sigma::SigmaError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Bloch(#[from] crate::bloch::BlochError),
    #[error(transparent)]
    Trig(#[from] crate::trigpoly::TrigError),
}

type Result<T> = std::result::Result<T, CliError>;

/// Tolerances and discretization knobs, readable from a `key = value` file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub residual_tol: f64,
    pub vanishing_tol: f64,
    pub det_tol: f64,
    pub harmonic_tol: f64,
    pub structure_tol: f64,
    pub shape_tol: f64,
    pub sigma_tol: f64,
    pub resolution: f64,
    pub t_max: Option<f64>,
    pub margin: f64,
    pub samples_per_period: usize,
    pub fit_height: f64,
    pub fit_samples: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            residual_tol: 1e-6,
            vanishing_tol: 1e-6,
            det_tol: 1e-7,
            harmonic_tol: 1e-5,
            structure_tol: 1e-3,
            shape_tol: 1e-4,
            sigma_tol: 1e-8,
            resolution: 1.0,
            t_max: None,
            margin: crate::reduction::CONSISTENCY_MARGIN,
            samples_per_period: 64,
            fit_height: crate::reduction::FOURIER_HEIGHT,
            fit_samples: 64,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| CliError::Config(format!("{key} = {value}: {e}"));
        let f = |v: &str| v.parse::<f64>().map_err(|e| bad(&e));
        let u = |v: &str| v.parse::<usize>().map_err(|e| bad(&e));
        match key {
            "residual_tol" => self.residual_tol = f(value)?,
            "vanishing_tol" => self.vanishing_tol = f(value)?,
            "det_tol" => self.det_tol = f(value)?,
            "harmonic_tol" => self.harmonic_tol = f(value)?,
            "structure_tol" => self.structure_tol = f(value)?,
            "shape_tol" => self.shape_tol = f(value)?,
            "sigma_tol" => self.sigma_tol = f(value)?,
            "resolution" => self.resolution = f(value)?,
            "t_max" => self.t_max = Some(f(value)?),
            "margin" => self.margin = f(value)?,
            "samples_per_period" => self.samples_per_period = u(value)?,
            "fit_height" => self.fit_height = f(value)?,
            "fit_samples" => self.fit_samples = u(value)?,
            "threads" => self.threads = Some(u(value)?),
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Lines `key = value`; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let tols = [
            ("residual_tol", self.residual_tol),
            ("vanishing_tol", self.vanishing_tol),
            ("det_tol", self.det_tol),
            ("harmonic_tol", self.harmonic_tol),
            ("structure_tol", self.structure_tol),
            ("shape_tol", self.shape_tol),
            ("sigma_tol", self.sigma_tol),
            ("resolution", self.resolution),
            ("margin", self.margin),
        ];
        for (k, v) in tols {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.fit_height < 8.0 {
            return Err(CliError::Config(format!("fit_height must be at least 8, got {}", self.fit_height)));
        }
        if self.samples_per_period < 8 || !self.samples_per_period.is_power_of_two() {
            return Err(CliError::Config("samples_per_period must be a power of two ≥ 8".into()));
        }
        if self.fit_samples < 16 {
            return Err(CliError::Config("fit_samples must be at least 16".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn minimal(&self) -> MinimalConfig {
        let contour = ContourSpec { resolution: self.resolution, t_max: self.t_max, ..ContourSpec::default() };
        MinimalConfig { contour, margin: self.margin, ..MinimalConfig::default() }
    }

    pub fn slots(&self) -> SlotConfig {
        SlotConfig { height: self.fit_height, samples: self.fit_samples }
    }

    pub fn renorm(&self) -> RenormConfig {
        RenormConfig {
            pair: PairConfig { minimal: self.minimal(), slots: self.slots(), ..PairConfig::default() },
            samples_per_period: self.samples_per_period,
            shape_tol: self.shape_tol,
            ..RenormConfig::default()
        }
    }
}

/// Caps the threads used by the dense solver; 1 disables parallelism.
pub fn set_threads(n: usize) {
    let p = if n <= 1 { faer::Parallelism::None } else { faer::Parallelism::Rayon(n) };
    faer::set_global_parallelism(p);
}

/// `re,im` or `re`.
pub fn parse_complex(s: &str) -> std::result::Result<C64, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |t: &str| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
    match parts.as_slice() {
        [re] => Ok(C64::new(num(re)?, 0.0)),
        [re, im] => Ok(C64::new(num(re)?, num(im)?)),
        _ => Err(format!("expected re,im, got {s:?}")),
    }
}

/// A step given as a number, `golden`, or `2pi*p/q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub h: f64,
    pub ratio: Option<QuadraticRatio>,
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "golden" {
            let r = QuadraticRatio::golden();
            return Ok(Self { h: r.h(), ratio: Some(r) });
        }
        if let Some(frac) = s.strip_prefix("2pi*") {
            let (p, q) = frac.split_once('/').ok_or_else(|| format!("expected 2pi*p/q, got {s:?}"))?;
            let p: i128 = p.trim().parse().map_err(|e| format!("{p:?}: {e}"))?;
            let q: i128 = q.trim().parse().map_err(|e| format!("{q:?}: {e}"))?;
            let r = QuadraticRatio::rational(p, q).map_err(|e| e.to_string())?;
            return Ok(Self { h: r.h(), ratio: Some(r) });
        }
        let h: f64 = s.parse().map_err(|e| format!("{s:?}: {e}"))?;
        if !(h > 0.0 && h < 2.0 * PI) {
            return Err(format!("h must lie in (0, 2π), got {h}"));
        }
        Ok(Self { h, ratio: None })
    }
}

fn parse_kind(s: &str) -> std::result::Result<Kind, String> {
    s.parse::<Kind>().map_err(|e| e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "monodromize", version, about = "Minimal entire solutions and monodromy matrices of difference equations")]
pub struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output file (standard output when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// The σ special function.
    Sigma {
        #[command(subcommand)]
        action: SigmaAction,
    },
    /// Canonical Bloch bases at ±i∞.
    Bloch(MatrixArgs),
    /// The model equation solution.
    Model(ModelArgs),
    /// One minimal entire solution.
    Minimal(MinimalArgs),
    /// Monodromy matrix of the pair (ψ_D, ψ_B).
    Monodromy(MatrixArgs),
    /// Harper monodromy and its closed form.
    HarperMonodromy(MatrixArgs),
    /// Iterate the renormalization map; CSV output.
    HarperRenorm(RenormArgs),
    /// σ and model invariant suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Subcommand, Debug)]
pub enum SigmaAction {
    Eval {
        #[arg(long, allow_hyphen_values = true)]
        h: f64,
        #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
        z: C64,
    },
    Selfcheck {
        #[arg(long, allow_hyphen_values = true)]
        h: f64,
        #[arg(long, default_value_t = 200)]
        points: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

/// Matrix selection: Harper by default, `ℍ⁰` with `--s/--t`, or any matrix as JSON.
#[derive(Args, Debug, Clone)]
pub struct MatrixArgs {
    #[arg(long)]
    pub h: Step,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long = "E", value_parser = parse_complex, allow_hyphen_values = true, default_value = "0")]
    pub e: C64,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub s: Option<C64>,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true)]
    pub t: Option<C64>,
    /// Matrix as JSON, or `@path` to a JSON file.
    #[arg(long)]
    pub matrix: Option<String>,
}

impl MatrixArgs {
    pub fn point(&self) -> Result<HarperPoint> {
        let mut p = HarperPoint::harper(self.lambda, self.e, self.h.h);
        match (self.s, self.t) {
            (Some(s), Some(t)) => p.chart = Chart::Generic { s, t },
            (None, None) => {}
            _ => return Err(CliError::Input("--s and --t go together".into())),
        }
        if let Some(r) = self.h.ratio {
            p = p.with_ratio(r);
        }
        Ok(p)
    }

    pub fn matrix(&self) -> Result<MatrixTrigPoly> {
        match &self.matrix {
            Some(text) => {
                let text = match text.strip_prefix('@') {
                    Some(path) => fs::read_to_string(path)?,
                    None => text.clone(),
                };
                Ok(serde_json::from_str(&text)?)
            }
            None => {
                let p = self.point()?;
                Ok(hfamily_matrix(p.lambda, &p.chart)?)
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub h: f64,
    #[arg(long, value_parser = parse_complex, allow_hyphen_values = true, default_value = "0")]
    pub xi: C64,
}

#[derive(Args, Debug)]
pub struct MinimalArgs {
    #[command(flatten)]
    pub matrix: MatrixArgs,
    #[arg(long, value_parser = parse_kind, default_value = "D")]
    pub kind: Kind,
}

#[derive(Args, Debug)]
pub struct RenormArgs {
    #[command(flatten)]
    pub matrix: MatrixArgs,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = std::f64::consts::SQRT_2)]
    pub h: f64,
}

/// Result of one command: the document to print and whether its checks passed.
pub enum Report {
    Json(Value, bool),
    Csv(Vec<u8>, bool),
    Text(String, bool),
}

fn doc(command: &str, body: Value, pass: bool) -> Report {
    let mut v = json!({ "schema": SCHEMA, "command": command, "pass": pass });
    if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
        m.extend(b);
    }
    Report::Json(v, pass)
}

fn grid_residual(sol: &MinimalSolution) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for a in 0..7 {
        for b in 0..5 {
            let z = C64::new(-3.0 * PI + PI * a as f64, -8.0 + 4.0 * b as f64);
            match sol.equation_residual(z) {
                Ok(r) => worst = worst.max(r),
                Err(_) => failed += 1,
            }
        }
    }
    (worst, failed)
}

fn sigma_selfcheck(h: f64, points: usize, seed: u64) -> Result<crate::sigma::SigmaSelfCheck> {
    use rand::{Rng, SeedableRng};
    let eng = SigmaEngine::new(h)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<C64> = (0..points).map(|_| C64::new(rng.gen_range(-8.0..8.0), rng.gen_range(-3.0..3.0))).collect();
    Ok(eng.selfcheck(&pts))
}

fn model_checks(h: f64, xi: C64) -> Result<(ModelSolution, f64, C64, f64)> {
    let s = ModelSolution::new(ModelParams::new(xi, h)?)?;
    let mut worst: f64 = 0.0;
    for a in 0..5 {
        for b in 0..5 {
            worst = worst.max(s.equation_residual(C64::new(-3.0 + 1.5 * a as f64, -4.0 + 2.0 * b as f64))?);
        }
    }
    let pts: Vec<C64> = (0..10).map(|k| C64::new(-2.0 + 0.45 * k as f64, -1.0 + 0.25 * k as f64)).collect();
    let w = s.wronskian(&pts, 1e-6)?;
    let want = s.wronskian_closed_form();
    let rel = (w - want).norm() / want.norm();
    Ok((s, worst, w, rel))
}

pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<Report> {
    match cmd {
        Command::Sigma { action: SigmaAction::Eval { h, z } } => {
            let eng = SigmaEngine::new(*h)?;
            let v = eng.eval(*z)?;
            let (log, _) = eng.log_eval(*z)?;
            Ok(doc("sigma eval", json!({ "h": h, "z": z, "value": v.value, "log": log, "flag": v.flag }), true))
        }
        Command::Sigma { action: SigmaAction::Selfcheck { h, points, seed } } => {
            let chk = sigma_selfcheck(*h, *points, *seed)?;
            let worst = [chk.value_at_minus_pi, chk.residue, chk.functional, chk.shift, chk.reflection, chk.conjugation]
                .into_iter()
                .fold(0.0, f64::max);
            let pass = worst < cfg.sigma_tol;
            Ok(doc("sigma selfcheck", json!({ "h": h, "residuals": chk, "tolerance": cfg.sigma_tol }), pass))
        }
        Command::Bloch(args) => {
            let m = args.matrix()?;
            let h = args.h.h;
            let mut sides = serde_json::Map::new();
            let mut pass = true;
            for (name, side) in [("plus", Side::Plus), ("minus", Side::Minus)] {
                let (b1, b2) = canonical_basis(&m, h, side, None)?;
                let y = side.sign() * (b1.validity_height() + 1.0);
                let z = C64::new(0.3, y);
                let (f1, f2) = (b1.eval(z)?, b2.eval(z)?);
                let w = f1[0] * f2[1] - f1[1] * f2[0];
                let wr = (w - b1.target_wronskian()).norm() / b1.target_wronskian().norm();
                let mut eq: f64 = 0.0;
                for f in [&b1, &b2] {
                    let (p, q) = (f.eval(z)?, f.eval(z + h)?);
                    let r = m.apply(z, p);
                    eq = eq.max(((q[0] - r[0]).norm() + (q[1] - r[1]).norm()) / (q[0].norm() + q[1].norm()));
                }
                pass &= wr < cfg.residual_tol && eq < cfg.residual_tol;
                sides.insert(
                    name.into(),
                    json!({
                        "phi": b1.phi(), "n": b1.n(), "validity_height": b1.validity_height(),
                        "target_wronskian": b1.target_wronskian(),
                        "multiplier_constants": [b1.multiplier_constant(), b2.multiplier_constant()],
                        "wronskian_residual": wr, "equation_residual": eq,
                    }),
                );
            }
            let verdict = consistency_check(principal_phi(&m, h, Side::Plus)?, principal_phi(&m, h, Side::Minus)?, h, cfg.margin);
            Ok(doc("bloch", json!({ "h": h, "omega": omega_classify(&m, 1), "bases": sides, "principal_consistency": verdict }), pass))
        }
        Command::Model(args) => {
            let (s, res, w, rel) = model_checks(args.h, args.xi)?;
            let coeffs = m_asymp_coeffs(s.params())?;
            let pass = res < cfg.residual_tol && rel < 1e-5;
            Ok(doc(
                "model",
                json!({
                    "params": s.params(), "coefficients": coeffs, "wronskian": w,
                    "wronskian_closed_form": s.wronskian_closed_form(), "wronskian_error": rel,
                    "equation_residual": res,
                }),
                pass,
            ))
        }
        Command::Minimal(args) => {
            let m = args.matrix.matrix()?;
            let params = ReducedParams::new(&m, args.matrix.h.h, cfg.margin)?;
            let sol = assemble_minimal(&m, &params, args.kind, &cfg.minimal())?;
            let bases = CanonicalBases::for_params(&m, &params)?;
            let co = min_asymp_coeffs(&sol, &bases, &cfg.slots())?;
            let (res, failed) = grid_residual(&sol);
            let pass = failed == 0 && res < cfg.residual_tol && co.vanishing_ratio() < cfg.vanishing_tol;
            Ok(doc(
                "minimal",
                json!({
                    "kind": args.kind.to_string(), "params": params, "nodes": sol.fredholm().kernel().len(),
                    "coefficients": co.values, "vanishing_ratio": co.vanishing_ratio(),
                    "equation_residual": res, "failed_points": failed,
                }),
                pass,
            ))
        }
        Command::Monodromy(args) => {
            let m = args.matrix()?;
            let params = ReducedParams::new(&m, args.h.h, cfg.margin)?;
            let bases = CanonicalBases::for_params(&m, &params)?;
            let d = assemble_minimal(&m, &params, Kind::D, &cfg.minimal())?;
            let b = assemble_minimal(&m, &params, Kind::B, &cfg.minimal())?;
            let (cd, cb) = (min_asymp_coeffs(&d, &bases, &cfg.slots())?, min_asymp_coeffs(&b, &bases, &cfg.slots())?);
            let n = params.n;
            let mono = monodromy_matrix(&d, &b, cfg.samples_per_period, n)?;
            let rep = structure_check(
                &mono,
                n,
                bases.f.1.multiplier_constant(),
                bases.g.0.multiplier_constant(),
                &cd,
                &cb,
                1e-12,
            );
            let pass = mono.det_residual < cfg.det_tol
                && mono.periodicity_residual < cfg.det_tol
                && mono.tail_ratio < cfg.harmonic_tol
                && rep.max_error < cfg.structure_tol;
            Ok(doc(
                "monodromy",
                json!({
                    "params": params, "matrix": mono.matrix, "wronskian": mono.wronskian,
                    "det_residual": mono.det_residual, "periodicity_residual": mono.periodicity_residual,
                    "fit_residual": mono.fit_residual, "tail_ratio": mono.tail_ratio, "omega": mono.omega,
                    "structure": rep,
                }),
                pass,
            ))
        }
        Command::HarperMonodromy(args) => {
            let r = pair_monodromy(&args.point()?, &cfg.renorm())?;
            let p = &r.projection;
            let pass = p.shape.max() < cfg.shape_tol
                && p.formula_deviation.is_none_or(|d| d < cfg.shape_tol)
                && r.pair.relation_residual.is_none_or(|d| d < cfg.shape_tol)
                && r.monodromy.det_residual < cfg.det_tol;
            Ok(doc(
                "harper-monodromy",
                json!({
                    "point": r.pair.point, "lambda1": p.lambda1, "s": p.s, "t": p.t, "a": p.a,
                    "s_closed_form": p.s_formula, "t_closed_form": p.t_formula,
                    "closed_form_deviation": p.formula_deviation, "shape": p.shape,
                    "coefficients_d": r.pair.coeff_d.values, "coefficients_b": r.pair.coeff_b.values,
                    "relation_residual": r.pair.relation_residual, "det_residual": r.monodromy.det_residual,
                    "periodicity_residual": r.monodromy.periodicity_residual, "structure": r.structure,
                }),
                pass,
            ))
        }
        Command::HarperRenorm(args) => {
            if args.steps == 0 {
                return Err(CliError::Input("--steps must be at least 1".into()));
            }
            let traj = renorm_iterate(&args.matrix.point()?, args.steps, &cfg.renorm());
            let mut buf = Vec::new();
            traj.write_csv(&mut buf)?;
            let rational = traj.termination.as_deref().is_some_and(|t| t.contains("rational"));
            if let Some(t) = &traj.termination {
                eprintln!("terminated after {} step(s): {t}", traj.steps.len());
            }
            Ok(Report::Csv(buf, traj.termination.is_none() || rational))
        }
        Command::Selfcheck(args) => {
            let chk = sigma_selfcheck(args.h, 200, 7)?;
            let mut rows: Vec<(String, f64, f64)> = vec![
                ("sigma value at -pi".into(), chk.value_at_minus_pi, cfg.sigma_tol),
                ("sigma residue".into(), chk.residue, cfg.sigma_tol),
                ("sigma functional equation".into(), chk.functional, cfg.sigma_tol),
                ("sigma shift by pi".into(), chk.shift, cfg.sigma_tol),
                ("sigma reflection".into(), chk.reflection, cfg.sigma_tol),
                ("sigma conjugation".into(), chk.conjugation, cfg.sigma_tol),
            ];
            for xi in [0.0, 0.3] {
                let (_, res, _, rel) = model_checks(args.h, C64::new(xi, 0.0))?;
                rows.push((format!("model residual xi={xi}"), res, cfg.residual_tol));
                rows.push((format!("model wronskian xi={xi}"), rel, 1e-5));
            }
            let mut out = format!("{:<30} {:>12} {:>10}  status\n", "check", "value", "tol");
            let mut pass = true;
            for (name, v, tol) in rows {
                let ok = v < tol;
                pass &= ok;
                out += &format!("{name:<30} {v:>12.3e} {tol:>10.0e}  {}\n", if ok { "pass" } else { "FAIL" });
            }
            Ok(Report::Text(out, pass))
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Ok(v) = std::env::var("MONODROMIZE_THREADS") {
        cfg.set("threads", &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses, runs and writes; returns the pass flag.
pub fn run_cli(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    set_threads(cfg.threads.unwrap_or(1));
    let report = execute(&cli.command, &cfg)?;
    let (bytes, pass) = match report {
        Report::Json(v, pass) => (serde_json::to_vec_pretty(&v)?, pass),
        Report::Csv(b, pass) => (b, pass),
        Report::Text(t, pass) => (t.into_bytes(), pass),
    };
    match &cli.out {
        Some(path) => fs::write(path, &bytes)?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(&bytes)?;
            if bytes.last() != Some(&b'\n') {
                out.write_all(b"\n")?;
            }
        }
    }
    Ok(pass)
}

/// Entry point shared by the binary: 0 pass, 2 check failure, 1 error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_cli(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complex_and_step_parsing() {
        assert_eq!(parse_complex("-3.5,2").unwrap(), C64::new(-3.5, 2.0));
        assert_eq!(parse_complex("0.1").unwrap(), C64::new(0.1, 0.0));
        assert!(parse_complex("1,2,3").is_err());
        let g: Step = "golden".parse().unwrap();
        assert_eq!(g.ratio, Some(QuadraticRatio::golden()));
        let r: Step = "2pi*1/3".parse().unwrap();
        assert!((r.h - 2.0 * PI / 3.0).abs() < 1e-15);
        assert!("7.0".parse::<Step>().is_err());
    }

    #[test]
    fn config_file_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nresidual_tol = 1e-7\n\nsamples_per_period=32 # trailing\n").unwrap();
        assert_eq!(c.residual_tol, 1e-7);
        assert_eq!(c.samples_per_period, 32);
        assert!(c.validate().is_ok());
        assert!(c.apply_text("nonsense = 1").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        c.set("fit_height", "5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("shape_tol", "-1").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn parses_subcommands() {
        let cli = Cli::try_parse_from(["monodromize", "sigma", "eval", "--h", "1", "--z", "-3.14159,0"]).unwrap();
        assert!(matches!(cli.command, Command::Sigma { action: SigmaAction::Eval { .. } }));
        let cli = Cli::try_parse_from([
            "monodromize", "harper-renorm", "--lambda", "1", "--E", "0.1", "--h", "3.883", "--steps", "2",
        ])
        .unwrap();
        match cli.command {
            Command::HarperRenorm(a) => {
                assert_eq!(a.steps, 2);
                assert_eq!(a.matrix.e, C64::new(0.1, 0.0));
            }
            _ => panic!("wrong command"),
        }
        assert!(Cli::try_parse_from(["monodromize", "frobnicate"]).is_err());
    }

    #[test]
    fn sigma_eval_document() {
        let cli = Cli::try_parse_from(["monodromize", "sigma", "eval", "--h", "1", "--z", "-3.141592653589793,0"]).unwrap();
        let Report::Json(v, pass) = execute(&cli.command, &RunConfig::default()).unwrap() else { panic!() };
        assert!(pass);
        assert_eq!(v["schema"], SCHEMA);
        let eng = SigmaEngine::new(1.0).unwrap();
        let want = eng.closed_form_at_minus_pi();
        let got = C64::new(v["value"][0].as_f64().unwrap(), v["value"][1].as_f64().unwrap());
        assert!((got - want).norm() < 1e-8 * want.norm());
    }
}
