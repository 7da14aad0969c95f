//! Box domains, smooth convex inclusions, Hausdorff distances, probe frames
//! and the tube/cone neighbourhoods used near a boundary point.

mod ellipsoid;

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{distance, norm, normalized, Real};

/// Default number of boundary samples per surface.
pub const DEFAULT_SURFACE_SAMPLES: usize = 4096;

/// Axis-aligned box `Ω` with its length scale and regularity constants.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec<T = f64> {
    pub lo: Vector3<T>,
    pub hi: Vector3<T>,
    pub rho0: T,
    pub m0: T,
    pub m1: T,
    pub alpha: T,
}

impl<T: Real> DomainSpec<T> {
    pub fn new(lo: Vector3<T>, hi: Vector3<T>, rho0: T) -> Result<Self> {
        if (0..3).any(|k| !(hi[k] > lo[k])) {
            return Err(Error::input("box needs hi > lo on every axis"));
        }
        if !(rho0 > T::zero()) {
            return Err(Error::input("rho0 must be positive"));
        }
        let vol = (hi - lo).iter().fold(T::one(), |a, s| a * *s);
        Ok(Self {
            lo,
            hi,
            rho0,
            m0: T::one(),
            m1: (vol / (rho0 * rho0 * rho0)).max(T::one()),
            alpha: T::one(),
        })
    }

    /// Cube of the given side centered at the origin.
    pub fn cube(side: T, rho0: T) -> Self {
        let h = T::lit(0.5) * side;
        Self::new(Vector3::repeat(-h), Vector3::repeat(h), rho0).expect("positive side")
    }

    pub fn sides(&self) -> Vector3<T> {
        self.hi - self.lo
    }

    pub fn center(&self) -> Vector3<T> {
        (self.lo + self.hi) * T::lit(0.5)
    }

    pub fn volume(&self) -> T {
        let s = self.sides();
        s.x * s.y * s.z
    }

    /// Diameter of `Ω` (and of `∂Ω`): the box diagonal.
    pub fn diameter(&self) -> T {
        norm(&self.sides())
    }

    /// Checks `|Ω| ≤ M₁ ρ₀³`.
    pub fn check_volume(&self) -> Result<()> {
        let bound = self.m1 * self.rho0 * self.rho0 * self.rho0;
        if self.volume() > bound * (T::one() + T::lit(1e-12)) {
            return Err(Error::Invariant(format!(
                "|Ω| = {} exceeds M1·rho0³ = {}",
                self.volume(),
                bound
            )));
        }
        Ok(())
    }

    pub fn contains_closed(&self, x: &Vector3<T>) -> bool {
        let tol = T::lit(1e-12) * self.diameter();
        (0..3).all(|k| x[k] >= self.lo[k] - tol && x[k] <= self.hi[k] + tol)
    }

    /// Euclidean distance from `x` to the closed box (0 inside).
    pub fn dist(&self, x: &Vector3<T>) -> T {
        let mut s = T::zero();
        for k in 0..3 {
            let d = (self.lo[k] - x[k]).max(x[k] - self.hi[k]).max(T::zero());
            s += d * d;
        }
        s.sqrt()
    }

    /// Membership in the shell `S_{2ρ₀} = {ρ₀ < dist(x, Ω) < 2ρ₀}`.
    pub fn in_shell(&self, x: &Vector3<T>) -> bool {
        let d = self.dist(x);
        d > self.rho0 && d < T::lit(2.0) * self.rho0
    }

    /// Uniform random points of the shell by rejection sampling.
    pub fn sample_shell(&self, count: usize, seed: u64) -> Vec<Vector3<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pad = T::lit(2.0) * self.rho0;
        let lo = self.lo.map(|v| (v - pad).to_f64_lossy());
        let hi = self.hi.map(|v| (v + pad).to_f64_lossy());
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let x = Vector3::from_fn(|k, _| T::lit(rng.random_range(lo[k]..hi[k])));
            if self.in_shell(&x) {
                out.push(x);
            }
        }
        out
    }

    /// Uniform grid of `m³` points of the closed box.
    pub fn grid(&self, m: usize) -> Vec<Vector3<T>> {
        let m = m.max(2);
        let mut pts = Vec::with_capacity(m * m * m);
        let step = self.sides() / T::lit((m - 1) as f64);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    let f = Vector3::new(T::lit(i as f64), T::lit(j as f64), T::lit(k as f64));
                    pts.push(self.lo + step.component_mul(&f));
                }
            }
        }
        pts
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            lo: self.lo * s,
            hi: self.hi * s,
            rho0: self.rho0 * s,
            ..self.clone()
        }
    }
}

/// Smooth convex inclusion.
#[derive(Clone, Debug, PartialEq)]
pub enum InclusionGeometry<T = f64> {
    Ball {
        center: Vector3<T>,
        radius: T,
    },
    /// `{c + R y : Σ (y_i / a_i)² < 1}`.
    Ellipsoid {
        center: Vector3<T>,
        semiaxes: Vector3<T>,
        rotation: Matrix3<T>,
    },
}

impl<T: Real> InclusionGeometry<T> {
    pub fn ball(center: Vector3<T>, radius: T) -> Self {
        InclusionGeometry::Ball { center, radius }
    }

    pub fn ellipsoid(center: Vector3<T>, semiaxes: Vector3<T>, rotation: Matrix3<T>) -> Self {
        InclusionGeometry::Ellipsoid {
            center,
            semiaxes,
            rotation,
        }
    }

    pub fn center(&self) -> Vector3<T> {
        match self {
            InclusionGeometry::Ball { center, .. } | InclusionGeometry::Ellipsoid { center, .. } => *center,
        }
    }

    /// Checks positivity of the size parameters and orthonormality of the
    /// rotation.
    pub fn validate(&self) -> Result<()> {
        match self {
            InclusionGeometry::Ball { radius, .. } => {
                if !(*radius > T::zero()) {
                    return Err(Error::input("ball radius must be positive"));
                }
            }
            InclusionGeometry::Ellipsoid { semiaxes, rotation, .. } => {
                if semiaxes.iter().any(|a| !(*a > T::zero())) {
                    return Err(Error::input("ellipsoid semiaxes must be positive"));
                }
                let defect = rotation.transpose() * rotation - Matrix3::identity();
                if defect.iter().any(|v| v.abs() > T::lit(1e-6)) {
                    return Err(Error::input("ellipsoid rotation must be orthonormal"));
                }
            }
        }
        Ok(())
    }

    /// Checks `D̄ ⊂ Ω` with at least `margin` clearance from `∂Ω`.
    pub fn check_inside(&self, domain: &DomainSpec<T>, margin: T) -> Result<()> {
        let c = self.center();
        let ext = self.half_extents();
        for k in 0..3 {
            if c[k] - ext[k] < domain.lo[k] + margin || c[k] + ext[k] > domain.hi[k] - margin {
                return Err(Error::Domain(format!(
                    "inclusion {} is not strictly inside the domain with margin {}",
                    self.describe(),
                    margin
                )));
            }
        }
        Ok(())
    }

    /// Half widths of the axis-aligned bounding box.
    pub fn half_extents(&self) -> Vector3<T> {
        match self {
            InclusionGeometry::Ball { radius, .. } => Vector3::repeat(*radius),
            InclusionGeometry::Ellipsoid { semiaxes, rotation, .. } => Vector3::from_fn(|k, _| {
                (0..3)
                    .fold(T::zero(), |s, j| {
                        let v = rotation[(k, j)] * semiaxes[j];
                        s + v * v
                    })
                    .sqrt()
            }),
        }
    }

    /// Level function, negative inside; used for cheap membership.
    fn level(&self, x: &Vector3<T>) -> T {
        match self {
            InclusionGeometry::Ball { center, radius } => {
                let d = x - center;
                d.dot(&d) - *radius * *radius
            }
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => {
                let y = rotation.transpose() * (x - center);
                (0..3).fold(T::zero(), |s, i| s + (y[i] / semiaxes[i]) * (y[i] / semiaxes[i])) - T::one()
            }
        }
    }

    /// Open-set membership `x ∈ D`.
    pub fn contains(&self, x: &Vector3<T>) -> bool {
        self.level(x) < T::zero()
    }

    /// Closest point of `∂D`.
    pub fn closest_boundary_point(&self, x: &Vector3<T>) -> Vector3<T> {
        match self {
            InclusionGeometry::Ball { center, radius } => {
                let d = x - center;
                let r = norm(&d);
                if r == T::zero() {
                    center + Vector3::new(T::zero(), T::zero(), *radius)
                } else {
                    center + d * (*radius / r)
                }
            }
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => {
                let y = rotation.transpose() * (x - center);
                let p = ellipsoid::closest_point([semiaxes.x, semiaxes.y, semiaxes.z], [y.x, y.y, y.z]);
                center + rotation * Vector3::new(p[0], p[1], p[2])
            }
        }
    }

    /// Signed distance to `∂D`, negative inside.
    pub fn signed_distance(&self, x: &Vector3<T>) -> T {
        match self {
            InclusionGeometry::Ball { center, radius } => distance(x, center) - *radius,
            InclusionGeometry::Ellipsoid { .. } => {
                let d = distance(x, &self.closest_boundary_point(x));
                if self.contains(x) {
                    -d
                } else {
                    d
                }
            }
        }
    }

    /// Outward unit normal of the level set through `x` (exact on `∂D`).
    pub fn normal(&self, x: &Vector3<T>) -> Vector3<T> {
        match self {
            InclusionGeometry::Ball { center, .. } => normalized(&(x - center)),
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => {
                let y = rotation.transpose() * (x - center);
                let g = Vector3::from_fn(|i, _| y[i] / (semiaxes[i] * semiaxes[i]));
                normalized(&(rotation * g))
            }
        }
    }

    /// Surface point for the unit direction `u` of the reference sphere.
    pub fn surface_point(&self, u: &Vector3<T>) -> Vector3<T> {
        match self {
            InclusionGeometry::Ball { center, radius } => center + u * *radius,
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => center + rotation * u.component_mul(semiaxes),
        }
    }

    fn surface_at_angles(&self, theta: T, phi: T) -> Vector3<T> {
        let u = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        self.surface_point(&u)
    }

    /// Euclidean distance from `x` to `D̄` (0 inside).
    pub fn dist_point_set(&self, x: &Vector3<T>) -> T {
        self.signed_distance(x).max(T::zero())
    }

    /// Fibonacci-sphere sampling of `∂D` with outward normals.
    pub fn sample_surface(&self, count: usize) -> SurfaceSample<T> {
        let count = count.max(1);
        let golden = T::PI() * (T::lit(3.0) - T::lit(5.0).sqrt());
        let n = T::lit(count as f64);
        let mut points = Vec::with_capacity(count);
        let mut normals = Vec::with_capacity(count);
        for k in 0..count {
            let kt = T::lit(k as f64);
            let z = T::one() - (T::lit(2.0) * kt + T::one()) / n;
            let r = (T::one() - z * z).max(T::zero()).sqrt();
            let phi = kt * golden;
            let u = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let p = self.surface_point(&u);
            normals.push(self.normal(&p));
            points.push(p);
        }
        SurfaceSample::new(points, normals)
    }

    pub fn translated(&self, t: &Vector3<T>) -> Self {
        let mut out = self.clone();
        match &mut out {
            InclusionGeometry::Ball { center, .. } | InclusionGeometry::Ellipsoid { center, .. } => *center += t,
        }
        out
    }

    /// Uniform scaling about the origin.
    pub fn scaled(&self, s: T) -> Self {
        match self {
            InclusionGeometry::Ball { center, radius } => InclusionGeometry::Ball {
                center: center * s,
                radius: *radius * s,
            },
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => InclusionGeometry::Ellipsoid {
                center: center * s,
                semiaxes: semiaxes * s,
                rotation: *rotation,
            },
        }
    }

    pub fn describe(&self) -> String {
        match self {
            InclusionGeometry::Ball { center, radius } => format!(
                "ball(c=[{:e},{:e},{:e}],r={:e})",
                center.x, center.y, center.z, radius
            ),
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => format!(
                "ellipsoid(c=[{:e},{:e},{:e}],a=[{:e},{:e},{:e}],R={:?})",
                center.x,
                center.y,
                center.z,
                semiaxes.x,
                semiaxes.y,
                semiaxes.z,
                rotation.as_slice().iter().map(|v| format!("{v:e}")).collect::<Vec<_>>()
            ),
        }
    }
}

/// Region where the inclusion material is active.
#[derive(Clone, Debug, PartialEq)]
pub enum Region<T = f64> {
    Empty,
    Body(InclusionGeometry<T>),
    /// `{x : (x − point)·normal < 0}`: the side opposite to `normal`.
    HalfSpace { point: Vector3<T>, normal: Vector3<T> },
}

impl<T: Real> Region<T> {
    pub fn contains(&self, x: &Vector3<T>) -> bool {
        match self {
            Region::Empty => false,
            Region::Body(g) => g.contains(x),
            Region::HalfSpace { point, normal } => (x - point).dot(normal) < T::zero(),
        }
    }

    /// Signed distance, negative inside; `+∞` for the empty region.
    pub fn signed_distance(&self, x: &Vector3<T>) -> T {
        match self {
            Region::Empty => T::infinity(),
            Region::Body(g) => g.signed_distance(x),
            Region::HalfSpace { point, normal } => (x - point).dot(normal) / norm(normal),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Region::Empty)
    }

    pub fn describe(&self) -> String {
        match self {
            Region::Empty => "empty".to_string(),
            Region::Body(g) => g.describe(),
            Region::HalfSpace { point, normal } => format!(
                "halfspace(p=[{:e},{:e},{:e}],n=[{:e},{:e},{:e}])",
                point.x, point.y, point.z, normal.x, normal.y, normal.z
            ),
        }
    }
}

/// Sampled closed surface with outward normals.
#[derive(Clone, Debug)]
pub struct SurfaceSample<T = f64> {
    pub points: Vec<Vector3<T>>,
    pub normals: Vec<Vector3<T>>,
    /// Maximum nearest-neighbour spacing `δ`.
    pub spacing: T,
}

impl<T: Real> SurfaceSample<T> {
    pub fn new(points: Vec<Vector3<T>>, normals: Vec<Vector3<T>>) -> Self {
        let spacing = max_nn_spacing(&points);
        Self {
            points,
            normals,
            spacing,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "z", "nx", "ny", "nz"])?;
        for (p, n) in self.points.iter().zip(&self.normals) {
            let row: Vec<String> = p
                .iter()
                .chain(n.iter())
                .map(|v| format!("{:.17e}", v.to_f64_lossy()))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn max_nn_spacing<T: Real>(points: &[Vector3<T>]) -> T {
    if points.len() < 2 {
        return T::zero();
    }
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| distance(p, q))
                .fold(T::infinity(), T::min)
        })
        .reduce(T::zero, T::max)
}

/// One-sided `max_{a ∈ A} min_{b ∈ B} |a − b|`.
fn directed_hausdorff<T: Real>(a: &[Vector3<T>], b: &[Vector3<T>]) -> T {
    a.par_iter()
        .map(|p| {
            b.iter()
                .map(|q| {
                    let d = p - q;
                    d.dot(&d)
                })
                .fold(T::infinity(), T::min)
        })
        .reduce(T::zero, T::max)
        .sqrt()
}

/// Sampled Hausdorff distance; the error against the continuous surfaces is
/// bounded by the larger sampling spacing.
pub fn hausdorff_distance<T: Real>(a: &SurfaceSample<T>, b: &SurfaceSample<T>) -> Result<T> {
    hausdorff_points(&a.points, &b.points)
}

pub fn hausdorff_points<T: Real>(a: &[Vector3<T>], b: &[Vector3<T>]) -> Result<T> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("Hausdorff distance needs nonempty samples"));
    }
    Ok(directed_hausdorff(a, b).max(directed_hausdorff(b, a)))
}

/// Boundary point with outward normal, a depth `h` and a ratio `λ_w`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeFrame<T = f64> {
    pub p: Vector3<T>,
    pub nu: Vector3<T>,
    pub lambda_w: T,
    pub h: T,
}

/// The three admissible ratios `λ_w`.
pub const LAMBDA_W: [f64; 3] = [2.0 / 3.0, 3.0 / 4.0, 4.0 / 5.0];

impl<T: Real> ProbeFrame<T> {
    /// `e₃ = −ν`.
    pub fn e3(&self) -> Vector3<T> {
        -self.nu
    }

    pub fn with_h(&self, h: T) -> Self {
        Self { h, ..*self }
    }

    /// `y_h = P − h e₃`, `w_h = P − λ_w h e₃` without checks.
    pub fn raw_points(&self) -> (Vector3<T>, Vector3<T>) {
        let e3 = self.e3();
        (self.p - e3 * self.h, self.p - e3 * (self.lambda_w * self.h))
    }

    /// Probe points, checked against `D₁`.
    pub fn probe_points(&self, d1: &InclusionGeometry<T>) -> Result<(Vector3<T>, Vector3<T>)> {
        if !(self.h > T::zero()) {
            return Err(Error::input("probe depth h must be positive"));
        }
        if !(self.lambda_w > T::zero() && self.lambda_w < T::one()) {
            return Err(Error::input("lambda_w must lie in (0, 1)"));
        }
        let (y, w) = self.raw_points();
        if d1.contains(&y) || d1.contains(&w) {
            return Err(Error::Invariant(
                "probe point inside D1: normal points inward".to_string(),
            ));
        }
        Ok((y, w))
    }
}

/// Outcome of the boundary-point selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSelection<T = f64> {
    pub p: Vector3<T>,
    pub nu: Vector3<T>,
    pub dist_p_d2: T,
    pub hausdorff: T,
    /// Empirical constant `d_H / dist(P, D₂) ≥ 1`.
    pub cbar: T,
    /// True when the roles of the two inclusions were exchanged.
    pub swapped: bool,
}

impl<T: Real> ProbeSelection<T> {
    pub fn frame(&self, lambda_w: T, h: T) -> ProbeFrame<T> {
        ProbeFrame {
            p: self.p,
            nu: self.nu,
            lambda_w,
            h,
        }
    }
}

/// Best surface point of `a` by sampled search with local refinement in
/// spherical parameters; returns (point, dist to `b`).
fn farthest_point<T: Real>(a: &InclusionGeometry<T>, b: &InclusionGeometry<T>, count: usize) -> (Vector3<T>, T) {
    let golden = T::PI() * (T::lit(3.0) - T::lit(5.0).sqrt());
    let n = T::lit(count as f64);
    let (mut theta, mut phi, mut best) = (T::zero(), T::zero(), -T::one());
    for k in 0..count {
        let kt = T::lit(k as f64);
        let z = T::one() - (T::lit(2.0) * kt + T::one()) / n;
        let th = z.max(-T::one()).min(T::one()).acos();
        let ph = kt * golden;
        let d = b.dist_point_set(&a.surface_at_angles(th, ph));
        if d > best {
            best = d;
            theta = th;
            phi = ph;
        }
    }
    let mut step = T::lit(4.0) * (T::lit(4.0) * T::PI() / n).sqrt();
    let stop = T::lit(1e-9);
    while step > stop {
        let mut improved = false;
        for (dt, dp) in [(T::one(), T::zero()), (-T::one(), T::zero()), (T::zero(), T::one()), (T::zero(), -T::one())] {
            let th = theta + dt * step;
            let ph = phi + dp * step;
            let d = b.dist_point_set(&a.surface_at_angles(th, ph));
            if d > best {
                best = d;
                theta = th;
                phi = ph;
                improved = true;
            }
        }
        if !improved {
            step = step * T::lit(0.5);
        }
    }
    (a.surface_at_angles(theta, phi), best)
}

/// Picks `P ∈ ∂D₁` maximizing `dist(·, D₂)`, exchanging the roles of the
/// inclusions when that gives a larger distance.
pub fn select_probe_p<T: Real>(
    d1: &InclusionGeometry<T>,
    d2: &InclusionGeometry<T>,
    samples: usize,
) -> Result<ProbeSelection<T>> {
    let (p12, m12) = farthest_point(d1, d2, samples);
    let (p21, m21) = farthest_point(d2, d1, samples);
    let s1 = d1.sample_surface(samples);
    let s2 = d2.sample_surface(samples);
    let sampled = hausdorff_distance(&s1, &s2)?;
    let scale = norm(&d1.half_extents()) + norm(&d2.half_extents());
    if sampled.max(m12).max(m21) <= T::lit(1e-12) * scale {
        return Err(Error::Degenerate("D1 and D2 coincide".to_string()));
    }
    let (p, dist, owner, swapped) = if m21 > m12 {
        (p21, m21, d2, true)
    } else {
        (p12, m12, d1, false)
    };
    if dist <= T::zero() {
        return Err(Error::Degenerate(
            "no boundary point at positive distance from the other inclusion".to_string(),
        ));
    }
    // d_H ≥ dist(P, ∂D₂) ≥ dist(P, D₂), so the refined value is a valid
    // lower estimate of the continuous Hausdorff distance.
    let hausdorff = sampled.max(dist);
    Ok(ProbeSelection {
        p,
        nu: owner.normal(&p),
        dist_p_d2: dist,
        hausdorff,
        cbar: hausdorff / dist,
        swapped,
    })
}

/// Truncated cone `C(O, v, h, θ)` translated to the vertex.
fn in_cone<T: Real>(x: &Vector3<T>, vertex: &Vector3<T>, axis: &Vector3<T>, height: T, sin_theta: T) -> bool {
    let y = x - vertex;
    let a = y.dot(axis);
    if a < T::zero() || a > height {
        return false;
    }
    norm(&(y - axis * a)) <= sin_theta * norm(&y)
}

fn dist_to_segment<T: Real>(x: &Vector3<T>, a: &Vector3<T>, b: &Vector3<T>) -> T {
    let ab = b - a;
    let len2 = ab.dot(&ab);
    let t = if len2 > T::zero() {
        ((x - a).dot(&ab) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    distance(x, &(a + ab * t))
}

/// `V(γ, d, R)`: tube of radius `R` around a polyline joined to the cone of
/// height `(d² − R²)/d` and half aperture `arcsin(R/d)` at `P` along `ν`.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeCone<T = f64> {
    pub path: Vec<Vector3<T>>,
    pub vertex: Vector3<T>,
    pub axis: Vector3<T>,
    pub d: T,
    pub r: T,
}

/// Result of a sampled containment check of `V` in the exterior of the
/// inclusions.
#[derive(Clone, Debug, PartialEq)]
pub struct ContainmentReport<T = f64> {
    pub tested: usize,
    pub violations: usize,
    pub min_signed_distance: T,
}

impl<T: Real> TubeCone<T> {
    pub fn new(path: Vec<Vector3<T>>, vertex: Vector3<T>, axis: Vector3<T>, d: T, r: T) -> Result<Self> {
        if !(r > T::zero()) || r >= d {
            return Err(Error::Construction(format!("tube needs 0 < R < d, got R={r}, d={d}")));
        }
        if path.is_empty() {
            return Err(Error::Construction("tube path is empty".to_string()));
        }
        let n = norm(&axis);
        if !(n > T::zero()) {
            return Err(Error::Construction("cone axis must be nonzero".to_string()));
        }
        Ok(Self {
            path,
            vertex,
            axis: axis / n,
            d,
            r,
        })
    }

    pub fn cone_height(&self) -> T {
        (self.d * self.d - self.r * self.r) / self.d
    }

    pub fn in_tube(&self, x: &Vector3<T>) -> bool {
        if self.path.len() == 1 {
            return distance(x, &self.path[0]) <= self.r;
        }
        self.path.windows(2).any(|s| dist_to_segment(x, &s[0], &s[1]) <= self.r)
    }

    pub fn in_cone(&self, x: &Vector3<T>) -> bool {
        in_cone(x, &self.vertex, &self.axis, self.cone_height(), self.r / self.d)
    }

    pub fn contains(&self, x: &Vector3<T>) -> bool {
        self.in_tube(x) || self.in_cone(x)
    }

    fn bounding_box(&self) -> (Vector3<T>, Vector3<T>) {
        let mut lo = self.vertex;
        let mut hi = self.vertex;
        let tip = self.vertex + self.axis * self.cone_height();
        for p in self.path.iter().chain(std::iter::once(&tip)) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo.add_scalar(-self.r), hi.add_scalar(self.r))
    }

    /// Samples points of `V` and checks they avoid the open inclusions.
    pub fn check_exterior(
        &self,
        inclusions: &[InclusionGeometry<T>],
        samples: usize,
        seed: u64,
    ) -> ContainmentReport<T> {
        let (lo, hi) = self.bounding_box();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tested = 0;
        let mut violations = 0;
        let mut min_sd = T::infinity();
        let mut attempts = 0usize;
        while tested < samples && attempts < samples * 1000 {
            attempts += 1;
            let x = Vector3::from_fn(|k, _| {
                let (a, b) = (lo[k].to_f64_lossy(), hi[k].to_f64_lossy());
                T::lit(if b > a { rng.random_range(a..b) } else { a })
            });
            if !self.contains(&x) {
                continue;
            }
            tested += 1;
            for g in inclusions {
                let sd = g.signed_distance(&x);
                min_sd = min_sd.min(sd);
                if sd < T::zero() {
                    violations += 1;
                }
            }
        }
        ContainmentReport {
            tested,
            violations,
            min_signed_distance: min_sd,
        }
    }
}

// ---------------------------------------------------------------------------
// JSON configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaConfig {
    /// Either three side lengths (box centered at the origin) or
    /// `[xmin, xmax, ymin, ymax, zmin, zmax]`.
    #[serde(rename = "box")]
    pub bx: Vec<f64>,
    pub rho0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InclusionConfig {
    Ball {
        center: [f64; 3],
        radius: f64,
    },
    Ellipsoid {
        center: [f64; 3],
        semiaxes: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation: Option<[[f64; 3]; 3]>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub omega: OmegaConfig,
    pub inclusions: Vec<InclusionConfig>,
}

impl Default for GeometryConfig {
    /// Unit cube with `ρ₀ = 1` and the lower-bound pair: an oblate `D₁`
    /// whose pole faces a flat `D₂`.
    fn default() -> Self {
        Self {
            omega: OmegaConfig {
                bx: vec![1.0, 1.0, 1.0],
                rho0: 1.0,
                m0: None,
                m1: None,
                alpha: None,
            },
            inclusions: vec![
                InclusionConfig::Ellipsoid {
                    center: [0.2, 0.0, 0.0],
                    semiaxes: [0.2, 0.37, 0.37],
                    rotation: None,
                },
                InclusionConfig::Ellipsoid {
                    center: [-0.35, 0.0, 0.0],
                    semiaxes: [0.1, 0.4, 0.4],
                    rotation: None,
                },
            ],
        }
    }
}

impl GeometryConfig {
    pub fn domain(&self) -> Result<DomainSpec<f64>> {
        let b = &self.omega.bx;
        let (lo, hi) = match b.len() {
            3 => (Vector3::new(-b[0], -b[1], -b[2]) * 0.5, Vector3::new(b[0], b[1], b[2]) * 0.5),
            6 => (Vector3::new(b[0], b[2], b[4]), Vector3::new(b[1], b[3], b[5])),
            _ => return Err(Error::Config("omega.box needs 3 or 6 numbers".to_string())),
        };
        let mut d = DomainSpec::new(lo, hi, self.omega.rho0).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(m0) = self.omega.m0 {
            d.m0 = m0;
        }
        if let Some(m1) = self.omega.m1 {
            d.m1 = m1;
        }
        if let Some(a) = self.omega.alpha {
            d.alpha = a;
        }
        Ok(d)
    }

    pub fn inclusion(cfg: &InclusionConfig) -> Result<InclusionGeometry<f64>> {
        let g = match cfg {
            InclusionConfig::Ball { center, radius } => InclusionGeometry::ball(Vector3::from(*center), *radius),
            InclusionConfig::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => {
                let r = rotation
                    .map(|m| Matrix3::from_fn(|i, j| m[i][j]))
                    .unwrap_or_else(Matrix3::identity);
                InclusionGeometry::ellipsoid(Vector3::from(*center), Vector3::from(*semiaxes), r)
            }
        };
        g.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(g)
    }

    pub fn inclusions(&self) -> Result<Vec<InclusionGeometry<f64>>> {
        self.inclusions.iter().map(Self::inclusion).collect()
    }

    pub fn from_inclusion(g: &InclusionGeometry<f64>) -> InclusionConfig {
        match g {
            InclusionGeometry::Ball { center, radius } => InclusionConfig::Ball {
                center: [center.x, center.y, center.z],
                radius: *radius,
            },
            InclusionGeometry::Ellipsoid {
                center,
                semiaxes,
                rotation,
            } => InclusionConfig::Ellipsoid {
                center: [center.x, center.y, center.z],
                semiaxes: [semiaxes.x, semiaxes.y, semiaxes.z],
                rotation: Some([
                    [rotation[(0, 0)], rotation[(0, 1)], rotation[(0, 2)]],
                    [rotation[(1, 0)], rotation[(1, 1)], rotation[(1, 2)]],
                    [rotation[(2, 0)], rotation[(2, 1)], rotation[(2, 2)]],
                ]),
            },
        }
    }
}

#[cfg(test)]
mod tests;
