//! Double-exponential quadrature on infinite ranges, refined by step halving
//! until successive trapezoid estimates agree to the requested tolerance.

use std::f64::consts::FRAC_PI_2;

const T_MAX: f64 = 4.5;
const MAX_LEVELS: usize = 12;

/// Trapezoid sums over `t = k h` of `g`, refining `h`. The coarse level scans
/// `|t| <= T_MAX`; refinements stay within one coarse step of the region
/// where the coarse terms were non-negligible.
fn refine<G: FnMut(f64) -> f64>(mut g: G, rel_tol: f64) -> f64 {
    let mut h = 0.5;
    let n0 = (T_MAX / h) as i64;
    let terms: Vec<(i64, f64)> = (-n0..=n0).map(|k| (k, g(k as f64 * h))).collect();
    let peak = terms.iter().map(|t| t.1.abs()).fold(0.0, f64::max);
    if peak == 0.0 {
        return 0.0;
    }
    let live: Vec<i64> = terms
        .iter()
        .filter(|t| t.1.abs() > 1e-30 * peak)
        .map(|t| t.0)
        .collect();
    let lo = (live[0] - 1) as f64 * h;
    let hi = (live[live.len() - 1] + 1) as f64 * h;
    let mut sum: f64 = terms.iter().map(|t| t.1).sum();
    let mut est = sum * h;
    for _ in 0..MAX_LEVELS {
        h *= 0.5;
        // New points are the odd multiples of the halved step.
        let mut t = (lo / h).floor() * h;
        if ((t / h).round() as i64).rem_euclid(2) == 0 {
            t += h;
        }
        while t <= hi {
            sum += g(t);
            t += 2.0 * h;
        }
        let next = sum * h;
        let done = (next - est).abs() <= rel_tol * next.abs();
        est = next;
        if done {
            break;
        }
    }
    est
}

/// `int_{-inf}^{inf} f(x) dx` with `x = c + s sinh(pi/2 sinh t)`.
pub fn line<F: FnMut(f64) -> f64>(mut f: F, centre: f64, scale: f64, rel_tol: f64) -> f64 {
    refine(
        |t| {
            let u = FRAC_PI_2 * t.sinh();
            let dx = scale * FRAC_PI_2 * t.cosh() * u.cosh();
            let v = f(centre + scale * u.sinh());
            if v == 0.0 || !dx.is_finite() {
                0.0
            } else {
                v * dx
            }
        },
        rel_tol,
    )
}

/// Same map as [`line`] on a fixed grid `t = k h`, `|t| <= t_max`. Nested
/// integrals stay smooth in their outer variables this way, which adaptive
/// refinement does not guarantee.
pub fn line_fixed<F: FnMut(f64) -> f64>(mut f: F, centre: f64, scale: f64, h: f64, t_max: f64) -> f64 {
    let n = (t_max / h).round() as i64;
    let mut sum = 0.0;
    for k in -n..=n {
        let t = k as f64 * h;
        let u = FRAC_PI_2 * t.sinh();
        let dx = scale * FRAC_PI_2 * t.cosh() * u.cosh();
        let v = f(centre + scale * u.sinh());
        if v != 0.0 && dx.is_finite() {
            sum += v * dx;
        }
    }
    sum * h
}

/// `int_0^inf f(x) dx` with `x = s exp(pi/2 sinh t)`.
pub fn positive<F: FnMut(f64) -> f64>(mut f: F, scale: f64, rel_tol: f64) -> f64 {
    refine(
        |t| {
            let x = scale * (FRAC_PI_2 * t.sinh()).exp();
            let dx = x * FRAC_PI_2 * t.cosh();
            if x == 0.0 || !x.is_finite() {
                return 0.0;
            }
            let v = f(x);
            if v == 0.0 {
                0.0
            } else {
                v * dx
            }
        },
        rel_tol,
    )
}
