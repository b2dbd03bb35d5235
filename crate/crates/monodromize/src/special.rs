//! Principal-branch dilogarithm and a stable `ln(1 + u)`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;

/// `B_{2k}` for k = 1..=15.
const BERNOULLI_EVEN: [f64; 15] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
    43867.0 / 798.0,
    -174611.0 / 330.0,
    854513.0 / 138.0,
    -236364091.0 / 2730.0,
    8553103.0 / 6.0,
    -23749461029.0 / 870.0,
    8615841276005.0 / 14322.0,
];

/// `ln(1 + u)` without cancellation for small `u`.
pub fn ln_1p(u: C64) -> C64 {
    if u.norm() < 1e-4 {
        u * (1.0 - u * (0.5 - u * (1.0 / 3.0 - u * 0.25)))
    } else {
        (1.0 + u).ln()
    }
}

/// `Li₂(w)` on the principal sheet, cut along `[1, ∞)`.
pub fn dilog(w: C64) -> C64 {
    if w == C64::new(0.0, 0.0) {
        return w;
    }
    if w == C64::new(1.0, 0.0) {
        return C64::new(PI * PI / 6.0, 0.0);
    }
    if w.norm() > 1.0 {
        // Li₂(w) + Li₂(1/w) = -π²/6 - ln²(-w)/2
        let l = (-w).ln();
        return -dilog_unit(w.inv()) - PI * PI / 6.0 - 0.5 * l * l;
    }
    dilog_unit(w)
}

/// `|w| ≤ 1`.
fn dilog_unit(w: C64) -> C64 {
    if w.re > 0.5 {
        // Li₂(w) = π²/6 - ln(w) ln(1-w) - Li₂(1-w)
        let one_minus = 1.0 - w;
        if one_minus.norm() == 0.0 {
            return C64::new(PI * PI / 6.0, 0.0);
        }
        return PI * PI / 6.0 - w.ln() * one_minus.ln() - dilog_bernoulli(one_minus);
    }
    dilog_bernoulli(w)
}

/// Series in `u = -ln(1-w)`; converges fast once `|u| ≲ 1`.
fn dilog_bernoulli(w: C64) -> C64 {
    let u = -ln_1p(-w);
    let u2 = u * u;
    // u - u²/4 + Σ_k B_{2k} u^{2k+1}/(2k+1)!
    let mut sum = u - 0.25 * u2;
    let mut pow = u;
    let mut fact = 1.0;
    for (k, b) in BERNOULLI_EVEN.iter().enumerate() {
        let n = 2 * k + 1;
        pow *= u2;
        fact *= ((n + 1) * (n + 2)) as f64;
        let term = pow * (*b / fact);
        sum += term;
        if term.norm() < 1e-18 * sum.norm() {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: C64, b: C64, tol: f64) -> bool {
        (a - b).norm() <= tol * (1.0 + b.norm())
    }

    #[test]
    fn matches_reference_values() {
        let table = [
            ((0.3, 0.2), (0.31045297562115705792, 0.23586792101697521547)),
            ((-0.9, 0.1), (-0.75320048147019173199, 0.071291528102544630488)),
            ((-5.0, 2.0), (-2.8234151891398926454, 0.70423923364301746816)),
            ((0.5, 0.5), (0.45398526915029558331, 0.64376733288926874874)),
            ((-1.0, 0.0), (-0.82246703342411321824, 0.0)),
            ((2.0, -0.01), (2.4517182668604989029, -2.1776251930609060224)),
            ((0.9999, 0.3), (1.2608519432650582129, 0.71557186394588672966)),
            ((0.0, -30.0), (-6.1950276305694432184, -5.3759175735714876256)),
        ];
        for ((wr, wi), (vr, vi)) in table {
            let got = dilog(C64::new(wr, wi));
            assert!(close(got, C64::new(vr, vi), 1e-14), "w={wr}+{wi}i got {got}");
        }
    }

    #[test]
    fn matches_power_series_inside_disc() {
        for k in 0..40 {
            let t = k as f64 * 0.157;
            let w = C64::from_polar(0.6, t);
            let series: C64 = (1..200).map(|n| w.powu(n) / (n * n) as f64).sum();
            assert!(close(dilog(w), series, 1e-14));
        }
    }

    #[test]
    fn derivative_is_minus_log_ratio() {
        let w = C64::new(-3.0, 1.5);
        let eps = 1e-5;
        let num = (dilog(w + eps) - dilog(w - eps)) / (2.0 * eps);
        let want = -(1.0 - w).ln() / w;
        assert!(close(num, want, 1e-8));
    }

    #[test]
    fn ln_1p_small() {
        let u = C64::new(1e-9, -2e-9);
        assert!(close(ln_1p(u), u - u * u / 2.0, 1e-16));
    }
}
