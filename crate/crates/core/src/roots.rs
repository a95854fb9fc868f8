//! Scalar root bracketing and Brent's method over fallible objective functions.

use crate::error::Result;

/// Brent root finder on [a, b] with f(a), f(b) of opposite sign.
///
/// Stops when |f| <= `tol_f` or the bracket shrinks below `tol_x`.
pub fn brent<F>(
    mut f: F,
    mut a: f64,
    mut b: f64,
    mut fa: f64,
    mut fb: f64,
    tol_f: f64,
    tol_x: f64,
    max_iter: usize,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    assert!(
        fa * fb <= 0.0,
        "brent requires a sign change on the bracket"
    );
    if fa.abs() <= tol_f {
        return Ok((a, fa));
    }
    if fb.abs() <= tol_f {
        return Ok((b, fb));
    }

    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = b - a;

    for _ in 0..max_iter {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol_x;
        let xm = 0.5 * (c - b);
        if fb.abs() <= tol_f || xm.abs() <= tol1 {
            return Ok((b, fb));
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            // inverse quadratic interpolation / secant
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * xm * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (
                    s * (2.0 * xm * q * (q - r) - (b - a) * (r - 1.0)),
                    (q - 1.0) * (r - 1.0) * (s - 1.0),
                )
            };
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 {
            d
        } else {
            tol1.copysign(xm)
        };
        fb = f(b)?;
    }
    Ok((b, fb))
}

/// Bisection to |f| <= tol_f; used by test oracles and closed-form solves.
pub fn bisect<F>(mut f: F, mut a: f64, mut b: f64, tol_f: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut fa = f(a)?;
    let fb = f(b)?;
    assert!(fa * fb <= 0.0, "bisect requires a sign change");
    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm.abs() <= tol_f || (b - a).abs() < 4.0 * f64::EPSILON * m.abs() {
            return Ok(m);
        }
        if fa * fm <= 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    Ok(0.5 * (a + b))
}
