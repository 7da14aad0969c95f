//! Point-to-ellipsoid distance in the ellipsoid's principal frame.
//!
//! Robust bisection formulation (Eberly): reduce to the first octant, sort
//! semiaxes in descending order, and solve the secular equation for the
//! Lagrange multiplier. Degenerate cases drop to the 2D ellipse problem.

use crate::scalar::Real;

const MAX_BISECT: usize = 200;

/// Root of `Σ (r_i z_i / (s + r_i))² − 1` with `r_last = 1`.
fn bisect_root<T: Real>(r: &[T], z: &[T], g: T) -> T {
    let n = z.len();
    let numer: Vec<T> = (0..n).map(|i| r[i] * z[i]).collect();
    let mut s0 = z[n - 1] - T::one();
    let mut s1 = if g < T::zero() {
        T::zero()
    } else {
        numer.iter().fold(T::zero(), |a, v| a + *v * *v).sqrt() - T::one()
    };
    let mut s = T::zero();
    for _ in 0..MAX_BISECT {
        s = T::lit(0.5) * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let mut gs = -T::one();
        for i in 0..n {
            let q = numer[i] / (s + r[i]);
            gs += q * q;
        }
        if gs > T::zero() {
            s0 = s;
        } else if gs < T::zero() {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

/// Closest point on the ellipse `(x0/e0)² + (x1/e1)² = 1`, `e0 ≥ e1`,
/// for `y ≥ 0` componentwise.
fn ellipse<T: Real>(e0: T, e1: T, y0: T, y1: T) -> (T, T) {
    let zero = T::zero();
    if y1 > zero {
        if y0 > zero {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - T::one();
            if g != zero {
                let r0 = (e0 / e1) * (e0 / e1);
                let s = bisect_root(&[r0, T::one()], &[z0, z1], g);
                (r0 * y0 / (s + r0), y1 / (s + T::one()))
            } else {
                (y0, y1)
            }
        } else {
            (zero, e1)
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            (e0 * xde0, e1 * (T::one() - xde0 * xde0).max(zero).sqrt())
        } else {
            (e0, zero)
        }
    }
}

/// Closest point for sorted semiaxes `e0 ≥ e1 ≥ e2` and `y ≥ 0`.
fn sorted<T: Real>(e: [T; 3], y: [T; 3]) -> [T; 3] {
    let zero = T::zero();
    if y[2] > zero {
        if y[1] > zero {
            if y[0] > zero {
                let z = [y[0] / e[0], y[1] / e[1], y[2] / e[2]];
                let g = z[0] * z[0] + z[1] * z[1] + z[2] * z[2] - T::one();
                if g != zero {
                    let r0 = (e[0] / e[2]) * (e[0] / e[2]);
                    let r1 = (e[1] / e[2]) * (e[1] / e[2]);
                    let s = bisect_root(&[r0, r1, T::one()], &z, g);
                    [r0 * y[0] / (s + r0), r1 * y[1] / (s + r1), y[2] / (s + T::one())]
                } else {
                    y
                }
            } else {
                let (x1, x2) = ellipse(e[1], e[2], y[1], y[2]);
                [zero, x1, x2]
            }
        } else if y[0] > zero {
            let (x0, x2) = ellipse(e[0], e[2], y[0], y[2]);
            [x0, zero, x2]
        } else {
            [zero, zero, e[2]]
        }
    } else {
        let denom0 = e[0] * e[0] - e[2] * e[2];
        let denom1 = e[1] * e[1] - e[2] * e[2];
        let numer0 = e[0] * y[0];
        let numer1 = e[1] * y[1];
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = T::one() - xde0 * xde0 - xde1 * xde1;
            if discr > zero {
                return [e[0] * xde0, e[1] * xde1, e[2] * discr.sqrt()];
            }
        }
        let (x0, x1) = ellipse(e[0], e[1], y[0], y[1]);
        [x0, x1, zero]
    }
}

/// Closest point on the axis-aligned ellipsoid with semiaxes `a` centered at
/// the origin, for an arbitrary query `y` in the same frame.
pub(crate) fn closest_point<T: Real>(a: [T; 3], y: [T; 3]) -> [T; 3] {
    let mut order = [0usize, 1, 2];
    // Stable sort keeps ties deterministic.
    order.sort_by(|&i, &j| a[j].partial_cmp(&a[i]).unwrap_or(std::cmp::Ordering::Equal));
    let e = [a[order[0]], a[order[1]], a[order[2]]];
    let ys = [y[order[0]].abs(), y[order[1]].abs(), y[order[2]].abs()];
    let xs = sorted(e, ys);
    let mut out = [T::zero(); 3];
    for k in 0..3 {
        let i = order[k];
        out[i] = if y[i] < T::zero() { -xs[k] } else { xs[k] };
    }
    out
}
