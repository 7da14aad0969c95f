//! Fundamental matrices of the five operators used in the lower-bound
//! decomposition, closed form for constant isotropic tensors and FEM-based
//! otherwise.
//!
//! Two numerical backends:
//!
//! * [`SubtractedEvaluator`]: `Γ(x, y)l = K(x − y)l + v(x)` where `K` is the
//!   Kelvin matrix of a constant reference tensor and `v` solves the FEM
//!   problem with the smooth source `−div((C_h − C_ref)∇(Kl))`. Point sources
//!   need no mollifier and may lie outside the mesh.
//! * [`MollifiedEvaluator`]: a hat-mollified point load on one or two
//!   truncation boxes, Richardson-extrapolated in `1/L`.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, InclusionGeometry, Region};
use crate::mesh_fem::{element, pairwise_sum, BoxMeshSpec, FemSystem, HexMesh, PointLoad};
use crate::recon_norms::richardson;
use crate::scalar::frobenius;
use crate::tensor_field::{IsotropicTensor, LameField, PiecewiseTensor};

/// Which fundamental matrix of the decomposition is meant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `Γ`: variable background, no inclusion.
    VariableBackground,
    /// `Γ₀`: background frozen at `P`.
    Frozen,
    /// `Γ₀⁺`: frozen background on one side of the tangent plane at `P`,
    /// frozen inclusion material on the other.
    BimaterialHalfspace,
    /// `Γ₀^{D₁}`: frozen background, frozen inclusion material in `D₁`.
    FrozenInclusion,
    /// `Γ^{D}`: the full composite.
    Full,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::VariableBackground => "variable_background",
            Variant::Frozen => "frozen",
            Variant::BimaterialHalfspace => "bimaterial_halfspace",
            Variant::FrozenInclusion => "frozen_inclusion",
            Variant::Full => "full",
        }
    }
}

/// Composite tensor of a variant. `p`, `nu` are the boundary point and the
/// outer normal of `D₁` there; `d` is the inclusion of the `Full` and
/// `FrozenInclusion` variants.
pub fn variant_composite(
    variant: Variant,
    background: &LameField,
    inclusion: &LameField,
    p: &Vector3<f64>,
    nu: &Vector3<f64>,
    d: Option<&InclusionGeometry<f64>>,
) -> Result<PiecewiseTensor<f64>> {
    let frozen = |f: &LameField| {
        let c = f.at(p);
        LameField::constant(c.lambda, c.mu)
    };
    let need_d = || d.cloned().ok_or_else(|| Error::input(format!("variant {} needs an inclusion", variant.label())));
    Ok(match variant {
        Variant::VariableBackground => PiecewiseTensor::homogeneous(background.clone()),
        Variant::Frozen => PiecewiseTensor::homogeneous(frozen(background)),
        Variant::BimaterialHalfspace => {
            if !(nu.norm() > 0.0) {
                return Err(Error::input("half-space variant needs a nonzero normal"));
            }
            PiecewiseTensor::new(
                frozen(background),
                frozen(inclusion),
                Region::HalfSpace {
                    point: *p,
                    normal: nu.normalize(),
                },
            )
        }
        Variant::FrozenInclusion => PiecewiseTensor::new(frozen(background), frozen(inclusion), Region::Body(need_d()?)),
        Variant::Full => PiecewiseTensor::new(background.clone(), inclusion.clone(), Region::Body(need_d()?)),
    })
}

fn kelvin_coefficients(c: &IsotropicTensor<f64>) -> Result<(f64, f64)> {
    if !c.is_strongly_convex() {
        return Err(Error::Invariant(format!(
            "Kelvin matrix needs strongly convex moduli, got λ={}, μ={}",
            c.lambda, c.mu
        )));
    }
    let den = 8.0 * std::f64::consts::PI * c.mu * (c.lambda + 2.0 * c.mu);
    Ok(((c.lambda + 3.0 * c.mu) / den, (c.lambda + c.mu) / den))
}

fn separation(x: &Vector3<f64>, y: &Vector3<f64>) -> Result<(Vector3<f64>, f64)> {
    let r = x - y;
    let n = r.norm();
    if !(n > 0.0) {
        return Err(Error::Singularity(format!("x = y = {:?}", y.as_slice())));
    }
    Ok((r, n))
}

/// Kelvin matrix of a constant isotropic tensor, normalized so that
/// `div(C∇(K l)) = −l δ_y`.
pub fn kelvin(x: &Vector3<f64>, y: &Vector3<f64>, c: &IsotropicTensor<f64>) -> Result<Matrix3<f64>> {
    let (a, b) = kelvin_coefficients(c)?;
    let (r, n) = separation(x, y)?;
    Ok(Matrix3::identity() * (a / n) + r * r.transpose() * (b / (n * n * n)))
}

/// `∇ₓ(K(x − y) l)`, rows indexed by the displacement component.
pub fn kelvin_gradient(
    x: &Vector3<f64>,
    y: &Vector3<f64>,
    c: &IsotropicTensor<f64>,
    l: &Vector3<f64>,
) -> Result<Matrix3<f64>> {
    let (a, b) = kelvin_coefficients(c)?;
    let (r, n) = separation(x, y)?;
    let n3 = n * n * n;
    let rl = r.dot(l);
    Ok(Matrix3::from_fn(|i, j| {
        let dij = if i == j { 1.0 } else { 0.0 };
        -a * l[i] * r[j] / n3 + b * (dij * rl + r[i] * l[j]) / n3 - 3.0 * b * r[i] * rl * r[j] / (n3 * n * n)
    }))
}

/// Boundary condition of the correction field on the truncation box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// `v = 0`: the box stands in for the whole space.
    FreeSpace,
    /// `v = −K l`: the Green's function of the box with zero displacement.
    Dirichlet,
}

/// Column `Γ(·, y) l` held as its correction field.
#[derive(Clone, Debug)]
pub struct SourceField {
    pub y: Vector3<f64>,
    pub l: Vector3<f64>,
    /// `None` when the correction vanishes identically.
    v: Option<Vec<f64>>,
}

impl SourceField {
    pub fn correction(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }
}

/// FEM fundamental matrix by Kelvin subtraction.
pub struct SubtractedEvaluator {
    system: FemSystem,
    reference: IsotropicTensor<f64>,
    truncation: Truncation,
}

impl SubtractedEvaluator {
    pub fn new(system: FemSystem, reference: IsotropicTensor<f64>, truncation: Truncation) -> Result<Self> {
        kelvin_coefficients(&reference)?;
        Ok(Self {
            system,
            reference,
            truncation,
        })
    }

    pub fn system(&self) -> &FemSystem {
        &self.system
    }

    pub fn reference(&self) -> &IsotropicTensor<f64> {
        &self.reference
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    fn constant_equal(field: &LameField, c: &IsotropicTensor<f64>) -> bool {
        field.is_constant() && field.at(&Vector3::<f64>::zeros()) == *c
    }

    /// True when the composite coincides with the reference everywhere, so
    /// the correction source vanishes.
    pub fn source_free(&self) -> bool {
        let comp = self.system.composite();
        Self::constant_equal(&comp.background, &self.reference)
            && (comp.region.is_empty() || Self::constant_equal(&comp.inclusion, &self.reference))
    }

    fn has_interface(&self) -> bool {
        let comp = self.system.composite();
        !comp.region.is_empty() && comp.background != comp.inclusion
    }

    /// Points closer to the material interface than three widths of the
    /// interface cells are not resolved by the correction field.
    fn check_resolved(&self, p: &Vector3<f64>, what: &str) -> Result<()> {
        if !self.has_interface() {
            return Ok(());
        }
        let region = &self.system.composite().region;
        let q = match region {
            Region::Body(g) => g.closest_boundary_point(p),
            Region::HalfSpace { point, normal } => p - normal * ((p - point).dot(normal) / normal.norm_squared()),
            Region::Empty => return Ok(()),
        };
        // Width of the cells carrying the interface next to `p`.
        let Some(h) = self.system.mesh().local_width(&q).or_else(|| self.system.mesh().local_width(p)) else {
            return Ok(());
        };
        let d = region.signed_distance(p).abs();
        if d < 3.0 * h {
            return Err(Error::Resolution(format!(
                "{what} {:?} lies {d:.3e} from the interface, below 3 local cells ({h:.3e})",
                p.as_slice()
            )));
        }
        Ok(())
    }

    /// Correction fields for the columns `Γ(·, y) l` of every `l`, sharing
    /// one block solve.
    pub fn fields(&self, y: &Vector3<f64>, ls: &[Vector3<f64>]) -> Result<Vec<SourceField>> {
        self.check_resolved(y, "source point")?;
        if self.truncation == Truncation::FreeSpace && self.source_free() {
            return Ok(ls.iter().map(|l| SourceField { y: *y, l: *l, v: None }).collect());
        }
        let singular = if self.system.mesh().locate(y).is_some() {
            vec![*y]
        } else {
            Vec::new()
        };
        let source_free = self.source_free();
        let loads: Vec<Vec<f64>> = ls
            .iter()
            .map(|l| {
                if source_free {
                    return Ok(vec![0.0; 3 * self.system.mesh().n_nodes()]);
                }
                let reference = self.reference;
                let (yy, ll) = (*y, *l);
                Ok(self.system.stress_source_load(
                    move |x, c| {
                        if *c == reference {
                            return None;
                        }
                        let g = kelvin_gradient(x, &yy, &reference, &ll).ok()?;
                        Some(c.apply(&g) - reference.apply(&g))
                    },
                    &singular,
                ))
            })
            .collect::<Result<_>>()?;
        let vs = match self.truncation {
            Truncation::FreeSpace => self.system.solve_loads(&loads)?,
            Truncation::Dirichlet => {
                let fs = ls.iter().map(|l| self.boundary_kelvin(y, l)).collect::<Result<Vec<_>>>()?;
                let mut out = self.system.solve_dirichlet_many(&fs)?;
                if !source_free {
                    for (u, v) in out.iter_mut().zip(self.system.solve_loads(&loads)?) {
                        u.iter_mut().zip(v).for_each(|(a, b)| *a += b);
                    }
                }
                out
            }
        };
        Ok(ls
            .iter()
            .zip(vs)
            .map(|(l, v)| SourceField { y: *y, l: *l, v: Some(v) })
            .collect())
    }

    fn boundary_kelvin(&self, y: &Vector3<f64>, l: &Vector3<f64>) -> Result<Vec<f64>> {
        let mesh = self.system.mesh();
        let mut out = Vec::with_capacity(self.system.dofs().n_boundary_dofs());
        for &n in &self.system.dofs().boundary_nodes {
            let k = kelvin(&mesh.node(n), y, &self.reference)?;
            out.extend_from_slice((-(k * l)).as_slice());
        }
        Ok(out)
    }

    /// The three unit columns at `y`.
    pub fn unit_fields(&self, y: &Vector3<f64>) -> Result<Vec<SourceField>> {
        self.fields(y, &[Vector3::x(), Vector3::y(), Vector3::z()])
    }

    /// `v(x)` of one column.
    pub fn correction_at(&self, f: &SourceField, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        match &f.v {
            None => Ok(Vector3::zeros()),
            Some(v) => {
                self.check_resolved(x, "evaluation point")?;
                self.system.interpolate(v, x)
            }
        }
    }

    /// `Γ(x, y) l`.
    pub fn value_at(&self, f: &SourceField, x: &Vector3<f64>) -> Result<Vector3<f64>> {
        let k = kelvin(x, &f.y, &self.reference)? * f.l;
        Ok(k + self.correction_at(f, x)?)
    }

    /// `∇ₓ(Γ(x, y) l)`.
    pub fn gradient_at(&self, f: &SourceField, x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let k = kelvin_gradient(x, &f.y, &self.reference, &f.l)?;
        match &f.v {
            None => Ok(k),
            Some(v) => Ok(k + self.system.gradient_at(v, x)?),
        }
    }

    /// Matrix with columns `Γ(x, y) e_j` from unit fields at `y`.
    pub fn matrix_at(&self, fields: &[SourceField], x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let mut m = Matrix3::zeros();
        for (j, f) in fields.iter().enumerate().take(3) {
            m.set_column(j, &self.value_at(f, x)?);
        }
        Ok(m)
    }

    /// Correction part `Γ(x, y) − K(x − y)` from unit fields.
    pub fn correction_matrix_at(&self, fields: &[SourceField], x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let mut m = Matrix3::zeros();
        for (j, f) in fields.iter().enumerate().take(3) {
            m.set_column(j, &self.correction_at(f, x)?);
        }
        Ok(m)
    }

    pub fn evaluate(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<Matrix3<f64>> {
        separation(x, y)?;
        self.check_resolved(x, "evaluation point")?;
        let fields = self.unit_fields(y)?;
        self.matrix_at(&fields, x)
    }
}

/// Value of a mollified evaluation with its per-box inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MollifiedValue {
    pub value: Matrix3<f64>,
    pub per_box: Vec<Matrix3<f64>>,
    /// Frobenius norm of `value − (value on the largest box)`.
    pub error_estimate: f64,
    pub extrapolated: bool,
}

/// Point-load evaluator on one or two truncation boxes.
pub struct MollifiedEvaluator {
    boxes: Vec<(f64, FemSystem)>,
    radius: Option<f64>,
}

impl MollifiedEvaluator {
    /// `boxes` are `(L, system)` with increasing `L`; two boxes switch on
    /// Richardson extrapolation in `1/L`.
    pub fn new(boxes: Vec<(f64, FemSystem)>, radius: Option<f64>) -> Result<Self> {
        match boxes.len() {
            1 => {}
            2 => {
                let (l1, l2) = (boxes[0].0, boxes[1].0);
                if !(l1 > 0.0) || !(l2 / l1 >= 1.5) {
                    return Err(Error::input("box sizes need 0 < L₁ and L₂/L₁ ≥ 1.5"));
                }
            }
            _ => return Err(Error::input("mollified evaluator takes one or two boxes")),
        }
        if let Some(r) = radius {
            if !(r > 0.0) {
                return Err(Error::input("mollifier radius must be positive"));
            }
        }
        Ok(Self { boxes, radius })
    }

    pub fn box_sizes(&self) -> Vec<f64> {
        self.boxes.iter().map(|b| b.0).collect()
    }

    pub fn systems(&self) -> impl Iterator<Item = &FemSystem> {
        self.boxes.iter().map(|b| &b.1)
    }

    pub fn with_radius(mut self, radius: Option<f64>) -> Self {
        self.radius = radius;
        self
    }

    /// Columns `Γ(·, y) e_j` as nodal fields on each box.
    pub fn columns(&self, y: &Vector3<f64>) -> Result<Vec<Vec<Vec<f64>>>> {
        self.boxes
            .iter()
            .map(|(_, sys)| {
                let loads = (0..3)
                    .map(|j| {
                        sys.point_load(&PointLoad {
                            y: *y,
                            l: Vector3::ith(j, 1.0),
                            radius: self.radius,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                sys.solve_loads(&loads)
            })
            .collect()
    }

    fn check_separation(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<()> {
        let (_, d) = separation(x, y)?;
        for (_, sys) in &self.boxes {
            let h = sys
                .mesh()
                .local_width(y)
                .ok_or_else(|| Error::Domain(format!("source {:?} outside mesh", y.as_slice())))?;
            if d < 3.0 * h {
                return Err(Error::Resolution(format!(
                    "|x − y| = {d:.3e} below 3 local cells ({h:.3e})"
                )));
            }
        }
        Ok(())
    }

    /// Evaluates at `x` from precomputed columns.
    pub fn evaluate_columns(&self, cols: &[Vec<Vec<f64>>], x: &Vector3<f64>, y: &Vector3<f64>) -> Result<MollifiedValue> {
        self.check_separation(x, y)?;
        let mut per_box = Vec::with_capacity(self.boxes.len());
        for ((_, sys), c) in self.boxes.iter().zip(cols) {
            let mut m = Matrix3::zeros();
            for j in 0..3 {
                m.set_column(j, &sys.interpolate(&c[j], x)?);
            }
            per_box.push(m);
        }
        if per_box.len() == 1 {
            return Ok(MollifiedValue {
                value: per_box[0],
                per_box,
                error_estimate: f64::NAN,
                extrapolated: false,
            });
        }
        let (l1, l2) = (self.boxes[0].0, self.boxes[1].0);
        let mut value = Matrix3::zeros();
        for k in 0..9 {
            value[k] = richardson(l1, per_box[0][k], l2, per_box[1][k])?.0;
        }
        Ok(MollifiedValue {
            error_estimate: frobenius(&(value - per_box[1])),
            value,
            per_box,
            extrapolated: true,
        })
    }

    pub fn evaluate(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<MollifiedValue> {
        self.check_separation(x, y)?;
        let cols = self.columns(y)?;
        self.evaluate_columns(&cols, x, y)
    }
}

/// A fundamental matrix with its backend.
pub enum Backend {
    ClosedForm(IsotropicTensor<f64>),
    Subtracted(SubtractedEvaluator),
    Mollified(MollifiedEvaluator),
}

pub struct GreensEvaluator {
    pub variant: Variant,
    pub backend: Backend,
}

impl GreensEvaluator {
    /// Closed form; only the frozen homogeneous variant has one.
    pub fn closed_form(variant: Variant, tensor: IsotropicTensor<f64>) -> Result<Self> {
        if variant != Variant::Frozen {
            return Err(Error::input(format!(
                "closed form available for the frozen variant only, not {}",
                variant.label()
            )));
        }
        kelvin_coefficients(&tensor)?;
        Ok(Self {
            variant,
            backend: Backend::ClosedForm(tensor),
        })
    }

    pub fn evaluate(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<Matrix3<f64>> {
        match &self.backend {
            Backend::ClosedForm(c) => kelvin(x, y, c),
            Backend::Subtracted(s) => s.evaluate(x, y),
            Backend::Mollified(m) => m.evaluate(x, y).map(|v| v.value),
        }
    }

    pub fn box_sizes(&self) -> Vec<f64> {
        match &self.backend {
            Backend::ClosedForm(_) => Vec::new(),
            Backend::Subtracted(s) => {
                let (lo, hi) = (s.system.mesh().lo(), s.system.mesh().hi());
                vec![0.5 * (hi - lo).min()]
            }
            Backend::Mollified(m) => m.box_sizes(),
        }
    }

    pub fn extrapolated(&self) -> bool {
        matches!(&self.backend, Backend::Mollified(m) if m.boxes.len() == 2)
    }

    /// Probe table row.
    pub fn probe(&self, x: &Vector3<f64>, y: &Vector3<f64>) -> Result<ProbeRow> {
        Ok(ProbeRow {
            variant: self.variant,
            x: *x,
            y: *y,
            value: self.evaluate(x, y)?,
            boxes: self.box_sizes(),
            extrapolated: self.extrapolated(),
        })
    }
}

/// `Γ₀⁺` for the plane `x₃ = 0` with `below` for `x₃ < 0` and `above` for
/// `x₃ > 0`, on a box of half width `half_width` aligned with the interface.
pub fn bimaterial_halfspace(
    x: &Vector3<f64>,
    y: &Vector3<f64>,
    below: &IsotropicTensor<f64>,
    above: &IsotropicTensor<f64>,
    half_width: f64,
    fine: f64,
) -> Result<Matrix3<f64>> {
    separation(x, y)?;
    let ev = halfspace_evaluator(below, above, &((x + y) * 0.5), half_width, fine, &[*x, *y])?;
    ev.evaluate(x, y)
}

/// Subtracted evaluator for the bimaterial plane `x₃ = 0`, refined around
/// `points` with spacing `fine`.
pub fn halfspace_evaluator(
    below: &IsotropicTensor<f64>,
    above: &IsotropicTensor<f64>,
    center: &Vector3<f64>,
    half_width: f64,
    fine: f64,
    points: &[Vector3<f64>],
) -> Result<SubtractedEvaluator> {
    let mut c = *center;
    c.z = 0.0;
    let mut spec = BoxMeshSpec::cube(c, half_width, 1.5, half_width / 4.0).with_breakpoint(2, 0.0);
    for p in points {
        spec = spec.refine_at(*p, 2.0 * fine, fine);
    }
    let composite = PiecewiseTensor::new(
        LameField::constant(below.lambda, below.mu),
        LameField::constant(above.lambda, above.mu),
        Region::HalfSpace {
            point: Vector3::zeros(),
            normal: -Vector3::z(),
        },
    );
    let sys = FemSystem::assemble(spec.build()?, composite, crate::mesh_fem::Tagging::Centroid)?;
    SubtractedEvaluator::new(sys, *below, Truncation::FreeSpace)
}

/// Truncation box of half width `2 diam(Ω)` around `Ω`, uniform with
/// spacing `side/n` on `[focus_lo, focus_hi]` and graded outside. Growth and
/// the largest cell shrink with `n` so the exterior refines with the core.
pub fn omega_block_mesh(
    domain: &DomainSpec<f64>,
    focus_lo: &Vector3<f64>,
    focus_hi: &Vector3<f64>,
    n: usize,
) -> Result<HexMesh> {
    if n < 2 {
        return Err(Error::input("block mesh needs n ≥ 2"));
    }
    let side = domain.sides().max();
    let scale = 16.0 / n as f64;
    BoxMeshSpec::cube(domain.center(), 2.0 * domain.diameter(), 1.0 + 0.5 * scale, 0.8 * scale * side)
        .with_core(*focus_lo, *focus_hi, side / n as f64)
        .build()
}

/// Both sides of the representation formula for `(Γ^{D₂} − Γ^{D₁})(y, w)m·l`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RepresentationTerms {
    pub lhs: f64,
    pub rhs: f64,
    /// `|lhs − rhs| / |lhs|`, or `|lhs − rhs|` when `lhs = 0`.
    pub residual: f64,
}

fn check_pair(ev1: &SubtractedEvaluator, ev2: &SubtractedEvaluator) -> Result<()> {
    if ev1.system.mesh().id() != ev2.system.mesh().id() {
        return Err(Error::MeshMismatch("evaluators live on different meshes".to_string()));
    }
    if ev1.reference != ev2.reference || ev1.truncation != ev2.truncation {
        return Err(Error::input("evaluators need the same reference tensor and truncation"));
    }
    Ok(())
}

/// Evaluates the integral representation with `ev1 = Γ^{D₁}`, `ev2 = Γ^{D₂}`.
/// The volume integral runs over the elements where the two composites
/// differ, with the assembly Gauss rule.
pub fn integral_representation_residual(
    ev1: &SubtractedEvaluator,
    ev2: &SubtractedEvaluator,
    y: &Vector3<f64>,
    w: &Vector3<f64>,
    l: &Vector3<f64>,
    m: &Vector3<f64>,
) -> Result<RepresentationTerms> {
    check_pair(ev1, ev2)?;
    separation(y, w)?;
    for (p, name) in [(y, "y"), (w, "w")] {
        for ev in [ev1, ev2] {
            if ev.system.composite().region.contains(p) {
                return Err(Error::Domain(format!("probe {name} = {:?} inside an inclusion", p.as_slice())));
            }
        }
    }
    let g1y = ev1.fields(y, &[*l])?.remove(0);
    let g1w = ev1.fields(w, &[*m])?.remove(0);
    let g2w = ev2.fields(w, &[*m])?.remove(0);
    let lhs = (ev2.correction_at(&g2w, y)? - ev1.correction_at(&g1w, y)?).dot(l);

    let (s1, s2) = (&ev1.system, &ev2.system);
    let mesh = s1.mesh();
    let gp = element::gauss_points();
    let parts: Vec<Result<f64>> = (0..mesh.n_elements())
        .into_par_iter()
        .filter_map(|e| {
            if s1.fractions()[e] == s2.fractions()[e] && s1.composite() == s2.composite() {
                return None;
            }
            let (lo, d) = mesh.element_box(e);
            let wq = d.x * d.y * d.z / 8.0;
            let mut s = 0.0;
            for xi in gp.iter() {
                let x = element::map_point(&lo, &d, xi);
                let (c1, c2) = (s1.moduli(e, &x), s2.moduli(e, &x));
                if c1 == c2 {
                    continue;
                }
                let grad = |ev: &SubtractedEvaluator, f: &SourceField| -> Result<Matrix3<f64>> {
                    let k = kelvin_gradient(&x, &f.y, &ev.reference, &f.l)?;
                    Ok(match &f.v {
                        None => k,
                        Some(v) => k + ev.system.gradient_in(v, e, xi),
                    })
                };
                let (a, b) = match (grad(ev1, &g1y), grad(ev2, &g2w)) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(err), _) | (_, Err(err)) => return Some(Err(err)),
                };
                s += wq * (c1.energy(&a, &b) - c2.energy(&a, &b));
            }
            Some(Ok(s))
        })
        .collect();
    let parts = parts.into_iter().collect::<Result<Vec<f64>>>()?;
    let rhs = pairwise_sum(&parts);
    let diff = (lhs - rhs).abs();
    Ok(RepresentationTerms {
        lhs,
        rhs,
        residual: if lhs != 0.0 { diff / lhs.abs() } else { diff },
    })
}

/// Fibonacci points on the unit sphere.
pub fn fibonacci_sphere(count: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
            let s = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * k as f64;
            Vector3::new(s * phi.cos(), s * phi.sin(), z)
        })
        .collect()
}

/// Exterior energy `T(R) = −∫_{|x − c| = R} (C∇Γ₁(·, y)l ν)·Γ₂(·, w)m`, the
/// part of the representation integral beyond radius `R`.
#[allow(clippy::too_many_arguments)]
pub fn truncation_tail(
    ev1: &SubtractedEvaluator,
    ev2: &SubtractedEvaluator,
    center: &Vector3<f64>,
    radius: f64,
    y: &Vector3<f64>,
    w: &Vector3<f64>,
    l: &Vector3<f64>,
    m: &Vector3<f64>,
    points: usize,
) -> Result<f64> {
    check_pair(ev1, ev2)?;
    if !(radius > 0.0) || points < 8 {
        return Err(Error::input("tail needs R > 0 and at least 8 sphere points"));
    }
    let g1 = ev1.fields(y, &[*l])?.remove(0);
    let g2 = ev2.fields(w, &[*m])?.remove(0);
    let weight = 4.0 * std::f64::consts::PI * radius * radius / points as f64;
    let vals = fibonacci_sphere(points)
        .par_iter()
        .map(|nu| {
            let x = center + nu * radius;
            let c = ev1.system.composite().at(&x);
            let grad = ev1.gradient_at(&g1, &x)?;
            let val = ev2.value_at(&g2, &x)?;
            Ok(-weight * (c.apply(&grad) * nu).dot(&val))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&vals))
}

/// Products `|Γ|·r` and `|∇ₓΓ|·r²` along a ray from the source.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecayReport {
    pub r: Vec<f64>,
    pub value_products: Vec<f64>,
    pub gradient_products: Vec<f64>,
    pub value_bounded: bool,
    pub gradient_bounded: bool,
}

/// Bounded means: finite, positive, `max/min ≤ 10`, and not strictly
/// increasing with overall growth above 1.5.
pub fn bounded_products(p: &[f64]) -> bool {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return false;
    }
    let max = p.iter().cloned().fold(f64::MIN, f64::max);
    let min = p.iter().cloned().fold(f64::MAX, f64::min);
    let increasing = p.windows(2).all(|w| w[1] > w[0]);
    max / min <= 10.0 && !(increasing && p[p.len() - 1] / p[0] > 1.5)
}

/// Samples `x ↦ Γ(x, y)` at geometric radii in `[r_min, r_max]` along
/// `direction`; gradients by central differences with step `0.02 r`.
pub fn decay_check(
    gamma: impl Fn(&Vector3<f64>) -> Result<Matrix3<f64>> + Sync,
    y: &Vector3<f64>,
    direction: &Vector3<f64>,
    r_min: f64,
    r_max: f64,
    count: usize,
) -> Result<DecayReport> {
    if !(r_min > 0.0 && r_max > r_min) || count < 2 || !(direction.norm() > 0.0) {
        return Err(Error::input("decay check needs 0 < r_min < r_max, count ≥ 2, nonzero direction"));
    }
    let dir = direction.normalize();
    let rs: Vec<f64> = (0..count)
        .map(|k| r_min * (r_max / r_min).powf(k as f64 / (count - 1) as f64))
        .collect();
    let rows = rs
        .par_iter()
        .map(|&r| {
            let x = y + dir * r;
            let v = frobenius(&gamma(&x)?);
            let step = 0.02 * r;
            let mut g2 = 0.0;
            for k in 0..3 {
                let e = Vector3::ith(k, step);
                let d = (gamma(&(x + e))? - gamma(&(x - e))?) / (2.0 * step);
                g2 += d.norm_squared();
            }
            Ok((v * r, g2.sqrt() * r * r))
        })
        .collect::<Result<Vec<_>>>()?;
    let (value_products, gradient_products): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
    Ok(DecayReport {
        value_bounded: bounded_products(&value_products),
        gradient_bounded: bounded_products(&gradient_products),
        r: rs,
        value_products,
        gradient_products,
    })
}

/// One row of `probes.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub variant: Variant,
    pub x: Vector3<f64>,
    pub y: Vector3<f64>,
    pub value: Matrix3<f64>,
    pub boxes: Vec<f64>,
    pub extrapolated: bool,
}

/// Writes `variant,x1..x3,y1..y3,g11..g33,boxes,extrapolated`; `boxes` is a
/// `;`-separated list, entries in row-major order.
pub fn write_probes_csv<W: Write>(rows: &[ProbeRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["variant".to_string()];
    header.extend(["x1", "x2", "x3", "y1", "y2", "y3"].map(String::from));
    for i in 1..=3 {
        for j in 1..=3 {
            header.push(format!("g{i}{j}"));
        }
    }
    header.push("boxes".into());
    header.push("extrapolated".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.variant.label().to_string()];
        rec.extend(r.x.iter().chain(r.y.iter()).map(|v| format!("{v:.17e}")));
        for i in 0..3 {
            for j in 0..3 {
                rec.push(format!("{:.17e}", r.value[(i, j)]));
            }
        }
        rec.push(r.boxes.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(";"));
        rec.push(r.extrapolated.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
