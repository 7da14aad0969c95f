//! Trilinear hexahedral element on an axis-aligned box.

use nalgebra::{Matrix3, Vector3};

pub const GAUSS: f64 = 0.577_350_269_189_625_8;

/// Reference coordinates of the 2×2×2 Gauss points (unit weights).
pub fn gauss_points() -> [Vector3<f64>; 8] {
    let mut out = [Vector3::zeros(); 8];
    for (q, p) in out.iter_mut().enumerate() {
        *p = Vector3::new(
            if q & 1 == 0 { -GAUSS } else { GAUSS },
            if (q >> 1) & 1 == 0 { -GAUSS } else { GAUSS },
            if (q >> 2) & 1 == 0 { -GAUSS } else { GAUSS },
        );
    }
    out
}

#[inline]
fn sign(a: usize, axis: usize) -> f64 {
    if (a >> axis) & 1 == 0 {
        -1.0
    } else {
        1.0
    }
}

/// Shape function values at reference point `xi`.
#[inline]
pub fn shape(xi: &Vector3<f64>) -> [f64; 8] {
    let mut n = [0.0; 8];
    for (a, v) in n.iter_mut().enumerate() {
        *v = 0.125
            * (1.0 + sign(a, 0) * xi.x)
            * (1.0 + sign(a, 1) * xi.y)
            * (1.0 + sign(a, 2) * xi.z);
    }
    n
}

/// Physical gradients of the shape functions for edge lengths `d`.
#[inline]
pub fn shape_gradients(xi: &Vector3<f64>, d: &Vector3<f64>) -> [Vector3<f64>; 8] {
    let mut g = [Vector3::zeros(); 8];
    for (a, v) in g.iter_mut().enumerate() {
        let (sx, sy, sz) = (sign(a, 0), sign(a, 1), sign(a, 2));
        let fx = 1.0 + sx * xi.x;
        let fy = 1.0 + sy * xi.y;
        let fz = 1.0 + sz * xi.z;
        *v = Vector3::new(
            0.25 * sx * fy * fz / d.x,
            0.25 * sy * fx * fz / d.y,
            0.25 * sz * fx * fy / d.z,
        );
    }
    g
}

/// Physical point of reference coordinates `xi`.
#[inline]
pub fn map_point(lo: &Vector3<f64>, d: &Vector3<f64>, xi: &Vector3<f64>) -> Vector3<f64> {
    lo + d.component_mul(&xi.map(|t| 0.5 * (1.0 + t)))
}

/// Displacement gradient `(∇u)_ij = ∂u_i/∂x_j` from nodal values.
#[inline]
pub fn gradient(grads: &[Vector3<f64>; 8], ue: &[f64; 24]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for a in 0..8 {
        for i in 0..3 {
            let u = ue[3 * a + i];
            for j in 0..3 {
                m[(i, j)] += u * grads[a][j];
            }
        }
    }
    m
}

/// Element stiffness for Gauss-point moduli `(λ_q, μ_q)` on a box of edge
/// lengths `d`; row `3a+i`, column `3b+j`.
pub fn stiffness(d: &Vector3<f64>, moduli: &[(f64, f64); 8], out: &mut [f64; 576]) {
    out.fill(0.0);
    let w = d.x * d.y * d.z / 8.0;
    for (q, xi) in gauss_points().iter().enumerate() {
        let (l, m) = moduli[q];
        let (wl, wm) = (w * l, w * m);
        let g = shape_gradients(xi, d);
        for a in 0..8 {
            for b in a..8 {
                let dot = wm * g[a].dot(&g[b]);
                for i in 0..3 {
                    let row = (3 * a + i) * 24 + 3 * b;
                    for j in 0..3 {
                        let mut v = wl * g[a][i] * g[b][j] + wm * g[a][j] * g[b][i];
                        if i == j {
                            v += dot;
                        }
                        out[row + j] += v;
                    }
                }
            }
        }
    }
    // Mirror the upper block triangle.
    for a in 0..8 {
        for b in (a + 1)..8 {
            for i in 0..3 {
                for j in 0..3 {
                    out[(3 * b + j) * 24 + 3 * a + i] = out[(3 * a + i) * 24 + 3 * b + j];
                }
            }
        }
    }
}
