#![allow(dead_code)]

use lamelab::geometry::DomainSpec;
use lamelab::mesh_fem::{FemSystem, HexMesh, Tagging};
use lamelab::tensor_field::{LameField, PiecewiseTensor};
use nalgebra::{Matrix3, Vector3};

/// Smooth displacement with nonzero boundary values.
pub fn mms_u(x: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        (1.3 * x.x + 0.7 * x.y).sin(),
        (0.9 * x.y - 0.4 * x.z).cos(),
        (0.5 * x.x).exp() * x.z,
    )
}

pub fn mms_grad(x: &Vector3<f64>) -> Matrix3<f64> {
    let a = (1.3 * x.x + 0.7 * x.y).cos();
    let b = (0.9 * x.y - 0.4 * x.z).sin();
    let e = (0.5 * x.x).exp();
    Matrix3::new(1.3 * a, 0.7 * a, 0.0, 0.0, -0.9 * b, 0.4 * b, 0.5 * e * x.z, 0.0, e)
}

pub fn mms_lame(x: &Vector3<f64>) -> (f64, f64) {
    (1.0 + 0.5 * x.x, 1.0 + 0.25 * x.y)
}

fn stress(x: &Vector3<f64>) -> Matrix3<f64> {
    let (l, m) = mms_lame(x);
    let g = mms_grad(x);
    let eps = 0.5 * (g + g.transpose());
    Matrix3::identity() * (l * eps.trace()) + eps * (2.0 * m)
}

/// Body force `−div σ(u)` by central differences of the analytic stress.
pub fn mms_body_force(x: &Vector3<f64>) -> Vector3<f64> {
    let d = 1e-4;
    let mut div = Vector3::zeros();
    for k in 0..3 {
        let e = Vector3::ith(k, d);
        let ds = (stress(&(x + e)) - stress(&(x - e))) / (2.0 * d);
        div += ds.column(k);
    }
    -div
}

/// Largest nodal error relative to the largest nodal value, per `n`.
pub fn mms_errors(ns: &[usize]) -> Vec<f64> {
    let dom = DomainSpec::cube(1.0, 1.0);
    let field = LameField::from_exprs("1 + 0.5*x", "1 + 0.25*y").unwrap();
    ns.iter()
        .map(|&n| {
            let sys = FemSystem::assemble(
                HexMesh::uniform(&dom, n).unwrap(),
                PiecewiseTensor::homogeneous(field.clone()),
                Tagging::Centroid,
            )
            .unwrap();
            let load = sys.body_force_load(mms_body_force);
            let u = sys.solve(&sys.boundary_data(mms_u), Some(&load)).unwrap();
            let exact = sys.nodal_field(mms_u);
            let err = u.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            err / exact.iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .collect()
}

/// Observed orders between consecutive doublings.
pub fn orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
