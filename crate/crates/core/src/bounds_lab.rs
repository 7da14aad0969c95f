//! Probe sweeps of `(Γ^{D₂} − Γ^{D₁})(y_h, w_h)` toward a boundary point of
//! `D₁`: the `1/h` lower bound, the five-term decomposition, the smallness
//! estimate in the exterior shell and the upper-bound shape across families.
//!
//! All fundamental matrices of a sweep share one graded mesh and one Kelvin
//! reference `C₀ = C(P)`, so differences are differences of correction
//! fields and the Kelvin part cancels exactly.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dtn::Epsilon;
use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, InclusionGeometry, ProbeSelection, LAMBDA_W};
use crate::greens::{variant_composite, SubtractedEvaluator, Truncation, Variant};
use crate::mesh_fem::{BoxMeshSpec, FemSystem, HexMesh, Tagging};
use crate::recon_norms::{loglog_fit, plateau_detect, FitResult, Plateau, PlateauOptions};
use crate::tensor_field::{IsotropicTensor, LameField, PiecewiseTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepMeshConfig {
    /// Half width of the truncation box around the center of `Ω`.
    pub half_width: f64,
    /// Spacing on the bounding box of `D₁ ∪ D₂`.
    pub core_h: f64,
    /// Spacing at `P`.
    pub fine: f64,
    pub growth: f64,
    pub h_max: f64,
    /// Subcells per axis for volume-fraction tagging; 0 tags by centroid.
    pub subcells: usize,
}

impl Default for SweepMeshConfig {
    fn default() -> Self {
        Self {
            half_width: 1.0,
            core_h: 0.1,
            fine: 0.0015,
            growth: 1.3,
            h_max: 0.3,
            subcells: 4,
        }
    }
}

impl SweepMeshConfig {
    pub fn tagging(&self) -> Tagging {
        if self.subcells == 0 {
            Tagging::Centroid
        } else {
            Tagging::VolumeFraction { subcells: self.subcells }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub h_bar: f64,
    pub h_tilde: f64,
    pub points: usize,
    /// Largest depth as a fraction of `dist(P, D₂)`.
    pub upper: f64,
    /// Smallest depth as a fraction of `dist(P, D₂)`.
    pub lower: f64,
    /// Smallest depth in cells at `P`.
    pub min_cells: f64,
    pub lambda_w: Vec<f64>,
    /// Local frame directions `i ∈ {1, 2, 3}`, `e₃ = −ν`.
    pub directions: Vec<usize>,
    pub plateau: PlateauOptions,
    /// Required `min(h g) / max(h g)` over a series.
    pub plateau_ratio: f64,
    pub slope_window: [f64; 2],
    pub mesh: SweepMeshConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            h_bar: 0.5,
            h_tilde: 0.5,
            points: 8,
            upper: 0.1,
            lower: 0.01,
            min_cells: 4.0,
            lambda_w: LAMBDA_W.to_vec(),
            directions: vec![1, 2, 3],
            plateau: PlateauOptions::default(),
            plateau_ratio: 0.1,
            slope_window: [-1.25, -0.75],
            mesh: SweepMeshConfig::default(),
        }
    }
}

/// Orthonormal frame `(e₁, e₂, e₃)` with `e₃ = −ν`.
pub fn local_basis(nu: &Vector3<f64>) -> Result<[Vector3<f64>; 3]> {
    let n = nu.norm();
    if !(n > 0.0) {
        return Err(Error::input("normal must be nonzero"));
    }
    let e3 = -nu / n;
    let k = (0..3)
        .min_by(|&a, &b| e3[a].abs().total_cmp(&e3[b].abs()))
        .unwrap_or(0);
    let a = Vector3::ith(k, 1.0);
    let e1 = (a - e3 * a.dot(&e3)).normalize();
    let e2 = e3.cross(&e1);
    Ok([e1, e2, e3])
}

/// Geometric depths from `upper` down to `lower`.
pub fn geometric_depths(upper: f64, lower: f64, points: usize) -> Result<Vec<f64>> {
    if !(upper > lower && lower > 0.0) || points < 2 {
        return Err(Error::input("depths need upper > lower > 0 and at least 2 points"));
    }
    Ok((0..points)
        .map(|k| upper * (lower / upper).powf(k as f64 / (points - 1) as f64))
        .collect())
}

/// Boundary point, depths and ratios of one lower-bound sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSweep {
    pub selection: ProbeSelection<f64>,
    /// Descending.
    pub h: Vec<f64>,
    pub lambda_w: Vec<f64>,
    pub directions: Vec<usize>,
}

impl ProbeSweep {
    /// Depths from `upper·dist` down to `max(lower·dist, min_cells·fine_cell)`.
    pub fn new(selection: ProbeSelection<f64>, rho0: f64, cfg: &SweepConfig, fine_cell: f64) -> Result<Self> {
        let dist = selection.dist_p_d2;
        if !(dist > 0.0) {
            return Err(Error::Degenerate("dist(P, D2) is zero".to_string()));
        }
        let lo = (cfg.lower * dist).max(cfg.min_cells * fine_cell);
        let h = geometric_depths(cfg.upper * dist, lo, cfg.points)?;
        let limit = (cfg.h_bar * rho0).min(cfg.h_tilde * dist);
        if h[0] >= limit {
            return Err(Error::input(format!(
                "largest depth {:.4e} violates h < min(h_bar·rho0, h_tilde·dist) = {limit:.4e}",
                h[0]
            )));
        }
        if h[0] / h[h.len() - 1] < 10.0 * (1.0 - 1e-9) {
            return Err(Error::input(format!(
                "depths {:.4e}..{:.4e} span less than a decade",
                h[h.len() - 1],
                h[0]
            )));
        }
        if cfg.lambda_w.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::input("lambda_w values must lie in (0, 1)"));
        }
        if cfg.directions.is_empty() || cfg.directions.iter().any(|i| !(1..=3).contains(i)) {
            return Err(Error::input("directions must be a nonempty subset of {1, 2, 3}"));
        }
        Ok(Self {
            selection,
            h,
            lambda_w: cfg.lambda_w.clone(),
            directions: cfg.directions.clone(),
        })
    }

    pub fn basis(&self) -> Result<[Vector3<f64>; 3]> {
        local_basis(&self.selection.nu)
    }

    /// `(y_h, w_h)` for every `(λ_w, h)`, `λ_w` major.
    pub fn pairs(&self, d1: &InclusionGeometry<f64>) -> Result<Vec<(Vector3<f64>, Vector3<f64>)>> {
        let mut out = Vec::with_capacity(self.lambda_w.len() * self.h.len());
        for &lw in &self.lambda_w {
            for &h in &self.h {
                out.push(self.selection.frame(lw, h).probe_points(d1)?);
            }
        }
        Ok(out)
    }
}

/// Graded box for a sweep: uniform core on the bounding box of `D₁ ∪ D₂`,
/// refinement at `P` and `P` on a node line of every axis.
pub fn sweep_mesh(
    cfg: &SweepMeshConfig,
    center: &Vector3<f64>,
    inclusions: &[&InclusionGeometry<f64>],
    p: &Vector3<f64>,
) -> Result<HexMesh> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for d in inclusions {
        let (c, e) = (d.center(), d.half_extents());
        lo = lo.inf(&(c - e));
        hi = hi.sup(&(c + e));
    }
    let mut spec = BoxMeshSpec::cube(*center, cfg.half_width, cfg.growth, cfg.h_max).refine_at(*p, cfg.fine, cfg.fine);
    if !inclusions.is_empty() {
        spec = spec.with_core(lo, hi, cfg.core_h);
    }
    for k in 0..3 {
        spec = spec.with_breakpoint(k, p[k]);
    }
    spec.build()
}

/// `Eᵀ V(y, w) E` in the local frame for every pair, `None` where the
/// evaluator cannot resolve the pair. Consumes the system so that its
/// factorization is released on return.
fn correction_grid(
    system: FemSystem,
    reference: IsotropicTensor<f64>,
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    basis: &[Vector3<f64>; 3],
) -> Result<Vec<Option<Matrix3<f64>>>> {
    let ev = SubtractedEvaluator::new(system, reference, Truncation::FreeSpace)?;
    let e = Matrix3::from_columns(basis);
    let mut out = Vec::with_capacity(pairs.len());
    for (y, w) in pairs {
        let fields = match ev.fields(w, basis) {
            Ok(f) => f,
            Err(Error::Resolution(_)) => {
                out.push(None);
                continue;
            }
            Err(err) => return Err(err),
        };
        let mut cols = Matrix3::zeros();
        let mut resolved = true;
        for (j, f) in fields.iter().enumerate() {
            match ev.correction_at(f, y) {
                Ok(v) => cols.set_column(j, &v),
                Err(Error::Resolution(_)) => {
                    resolved = false;
                    break;
                }
                Err(err) => return Err(err),
            }
        }
        out.push(resolved.then(|| e.transpose() * cols));
    }
    Ok(out)
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub lambda_w: f64,
    pub i: usize,
    pub g: f64,
    pub h_g: f64,
    pub terms: [f64; 5],
    pub flags: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub p: [f64; 3],
    pub nu: [f64; 3],
    pub dist_p_d2: f64,
    pub n_nodes: usize,
    pub rows: Vec<SweepRow>,
    /// Wall seconds per composite, in evaluation order.
    pub timings: Vec<(String, f64)>,
}

impl SweepResult {
    /// Rows of one `(i, λ_w)` series in descending `h`.
    pub fn series(&self, i: usize, lambda_w: f64) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.i == i && r.lambda_w == lambda_w).collect()
    }
}

/// Runs the sweep for the pair `(d1, d2)` as ordered by the selection:
/// when `selection.swapped`, `P` lies on `d2` and the roles are exchanged.
///
/// Composites are handled one at a time: `Γ^{D₂}`, `Γ^{D₁}`, `Γ₀⁺`, `Γ`,
/// `Γ₀^{D₁}` (the last reusing `Γ^{D₁}` when both fields are constant).
pub fn run_sweep(
    sweep: &ProbeSweep,
    background: &LameField,
    inclusion: &LameField,
    d1: &InclusionGeometry<f64>,
    d2: &InclusionGeometry<f64>,
    mesh: &HexMesh,
    tagging: Tagging,
) -> Result<SweepResult> {
    let (d1, d2) = if sweep.selection.swapped { (d2, d1) } else { (d1, d2) };
    let (p, nu) = (sweep.selection.p, sweep.selection.nu);
    let reference = background.at(&p);
    let basis = sweep.basis()?;
    let pairs = sweep.pairs(d1)?;
    for (y, w) in &pairs {
        if d2.contains(y) || d2.contains(w) {
            return Err(Error::Domain("probe point inside D2".to_string()));
        }
    }

    let composites: [(&str, PiecewiseTensor<f64>); 5] = [
        ("full_d2", variant_composite(Variant::Full, background, inclusion, &p, &nu, Some(d2))?),
        ("full_d1", variant_composite(Variant::Full, background, inclusion, &p, &nu, Some(d1))?),
        (
            "bimaterial_halfspace",
            variant_composite(Variant::BimaterialHalfspace, background, inclusion, &p, &nu, None)?,
        ),
        (
            "variable_background",
            variant_composite(Variant::VariableBackground, background, inclusion, &p, &nu, None)?,
        ),
        (
            "frozen_inclusion",
            variant_composite(Variant::FrozenInclusion, background, inclusion, &p, &nu, Some(d1))?,
        ),
    ];
    let mut grids: Vec<Vec<Option<Matrix3<f64>>>> = Vec::with_capacity(5);
    let mut timings = Vec::new();
    for (k, (name, comp)) in composites.iter().enumerate() {
        if let Some(j) = (0..k).find(|&j| composites[j].1 == *comp) {
            grids.push(grids[j].clone());
            timings.push((name.to_string(), 0.0));
            continue;
        }
        let t = Instant::now();
        let system = FemSystem::assemble(mesh.clone(), comp.clone(), tagging)?;
        grids.push(correction_grid(system, reference, &pairs, &basis)?);
        timings.push((name.to_string(), t.elapsed().as_secs_f64()));
    }
    let [v2, v1, vp, vb, v10]: [Vec<Option<Matrix3<f64>>>; 5] =
        grids.try_into().map_err(|_| Error::Invariant("grid count".to_string()))?;

    let nh = sweep.h.len();
    let mut rows = Vec::new();
    for (a, &lw) in sweep.lambda_w.iter().enumerate() {
        for (b, &h) in sweep.h.iter().enumerate() {
            let k = a * nh + b;
            for &i in &sweep.directions {
                let d = i - 1;
                let row = match (v2[k], v1[k], vp[k], vb[k], v10[k]) {
                    (Some(m2), Some(m1), Some(mp), Some(mb), Some(m10)) => {
                        let g = (m2 - m1)[(d, d)].abs();
                        SweepRow {
                            h,
                            lambda_w: lw,
                            i,
                            g,
                            h_g: h * g,
                            terms: [
                                mp[(d, d)].abs(),
                                (m2 - mb)[(d, d)].abs(),
                                mb[(d, d)].abs(),
                                (mp - m10)[(d, d)].abs(),
                                (m10 - m1)[(d, d)].abs(),
                            ],
                            flags: String::new(),
                        }
                    }
                    _ => SweepRow {
                        h,
                        lambda_w: lw,
                        i,
                        g: f64::NAN,
                        h_g: f64::NAN,
                        terms: [f64::NAN; 5],
                        flags: "resolution".to_string(),
                    },
                };
                rows.push(row);
            }
        }
    }
    Ok(SweepResult {
        p: [p.x, p.y, p.z],
        nu: [nu.x, nu.y, nu.z],
        dist_p_d2: sweep.selection.dist_p_d2,
        n_nodes: mesh.n_nodes(),
        rows,
        timings,
    })
}

/// Writes `h,lambda_w,i,g,h_g,term1..term5,flags`.
pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "h", "lambda_w", "i", "g", "h_g", "term1", "term2", "term3", "term4", "term5", "flags",
    ])?;
    for r in &result.rows {
        let mut rec = vec![
            format!("{:.17e}", r.h),
            format!("{:.17e}", r.lambda_w),
            r.i.to_string(),
            format!("{:.17e}", r.g),
            format!("{:.17e}", r.h_g),
        ];
        rec.extend(r.terms.iter().map(|t| format!("{t:.17e}")));
        rec.push(r.flags.clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Lower-bound diagnostics of one `(i, λ_w)` series.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesReport {
    pub i: usize,
    pub lambda_w: f64,
    pub resolved: usize,
    pub slope: Option<FitResult>,
    pub plateau: Option<Plateau>,
    /// `min(h g) / max(h g)` over the resolved points.
    pub min_ratio: f64,
    pub slope_ok: bool,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub series: Vec<SeriesReport>,
    /// Per direction: some `λ_w` has both the slope and a positive plateau.
    pub directions: Vec<(usize, bool)>,
    pub success: bool,
    /// False when every `g` vanishes (no signal).
    pub signal: bool,
}

fn resolved(rows: &[&SweepRow]) -> Vec<usize> {
    (0..rows.len()).filter(|&k| rows[k].flags.is_empty() && rows[k].g.is_finite()).collect()
}

pub fn lower_bound_report(result: &SweepResult, cfg: &SweepConfig) -> Result<LowerBoundReport> {
    let mut series = Vec::new();
    let mut directions = Vec::new();
    let mut signal = false;
    for &i in &cfg.directions {
        let mut any = false;
        for &lw in &cfg.lambda_w {
            let rows = result.series(i, lw);
            let ok = resolved(&rows);
            let h: Vec<f64> = ok.iter().map(|&k| rows[k].h).collect();
            let g: Vec<f64> = ok.iter().map(|&k| rows[k].g).collect();
            let p: Vec<f64> = ok.iter().map(|&k| rows[k].h_g).collect();
            signal |= g.iter().any(|v| *v > 0.0);
            let slope = if g.iter().all(|v| *v > 0.0) {
                loglog_fit(&h, &g, &[]).ok()
            } else {
                None
            };
            let plateau = if p.len() >= 4 { plateau_detect(&h, &p, cfg.plateau)? } else { None };
            let max = p.iter().cloned().fold(0.0, f64::max);
            let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let min_ratio = if max > 0.0 { min / max } else { 0.0 };
            let slope_ok = slope
                .as_ref()
                .is_some_and(|f| f.slope >= cfg.slope_window[0] && f.slope <= cfg.slope_window[1]);
            let positive = plateau.is_some() && min_ratio >= cfg.plateau_ratio;
            any |= slope_ok && positive;
            series.push(SeriesReport {
                i,
                lambda_w: lw,
                resolved: ok.len(),
                slope,
                plateau,
                min_ratio,
                slope_ok,
                positive,
            });
        }
        directions.push((i, any));
    }
    Ok(LowerBoundReport {
        success: signal && directions.iter().all(|d| d.1),
        directions,
        series,
        signal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TermReport {
    /// Smallest `(g − term₁ + Σ others) / max(g, term₁)` over the sweep.
    pub worst_triangle_margin: f64,
    pub triangle_ok: bool,
    /// `(i, λ_w, slope)` of `log term₂` against `log h`.
    pub term2_slopes: Vec<(usize, f64, f64)>,
    pub term2_flat: bool,
    /// `max term₂ · dist(P, D₂)`.
    pub term2_constant: f64,
    /// `max term₃ / max g` and `max term₅ / max g`.
    pub term3_relative: f64,
    pub term5_relative: f64,
    /// Log-log slopes of `h·term₃`, `h·term₄`, `h·term₅` against `h`
    /// (first series with positive values).
    pub rates: [Option<f64>; 3],
    /// `term₁ > term₂ + ... + term₅` at the smallest resolved depth of every
    /// series.
    pub term1_dominates: bool,
}

pub fn term_breakdown(result: &SweepResult, cfg: &SweepConfig) -> Result<TermReport> {
    let ok: Vec<&SweepRow> = result.rows.iter().filter(|r| r.flags.is_empty() && r.g.is_finite()).collect();
    if ok.is_empty() {
        return Err(Error::Fit("no resolved sweep points".to_string()));
    }
    let mut worst = f64::INFINITY;
    for r in &ok {
        let rest: f64 = r.terms[1..].iter().sum();
        let scale = r.g.max(r.terms[0]);
        let margin = r.g - (r.terms[0] - rest);
        let rel = if scale > 0.0 { margin / scale } else { 0.0 };
        worst = worst.min(rel);
    }
    let max_g = ok.iter().map(|r| r.g).fold(0.0, f64::max);
    let max_term = |k: usize| ok.iter().map(|r| r.terms[k]).fold(0.0, f64::max);
    let rel = |v: f64| if max_g > 0.0 { v / max_g } else { v };

    let mut term2_slopes = Vec::new();
    let mut rates = [None; 3];
    let mut dominates = true;
    for &i in &cfg.directions {
        for &lw in &cfg.lambda_w {
            let rows = result.series(i, lw);
            let idx = resolved(&rows);
            if idx.is_empty() {
                continue;
            }
            let h: Vec<f64> = idx.iter().map(|&k| rows[k].h).collect();
            let t2: Vec<f64> = idx.iter().map(|&k| rows[k].terms[1]).collect();
            if t2.iter().all(|v| *v > 0.0) {
                if let Ok(f) = loglog_fit(&h, &t2, &[]) {
                    term2_slopes.push((i, lw, f.slope));
                }
            }
            for (slot, k) in [(0, 2), (1, 3), (2, 4)] {
                if rates[slot].is_some() {
                    continue;
                }
                let ht: Vec<f64> = idx.iter().map(|&j| rows[j].h * rows[j].terms[k]).collect();
                if ht.iter().all(|v| *v > 0.0) {
                    rates[slot] = loglog_fit(&h, &ht, &[]).ok().map(|f| f.slope);
                }
            }
            let last = rows[*idx.last().unwrap()];
            dominates &= last.terms[0] > last.terms[1..].iter().sum::<f64>();
        }
    }
    Ok(TermReport {
        worst_triangle_margin: worst,
        triangle_ok: worst >= -0.05,
        term2_flat: !term2_slopes.is_empty() && term2_slopes.iter().all(|s| s.2.abs() < 0.2),
        term2_slopes,
        term2_constant: max_term(1) * result.dist_p_d2,
        term3_relative: rel(max_term(2)),
        term5_relative: rel(max_term(4)),
        rates,
        term1_dominates: dominates,
    })
}

/// Largest singular value of `(Γ^{D₂} − Γ^{D₁})(y, w)` at one probe pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallnessRow {
    pub y: [f64; 3],
    pub w: [f64; 3],
    pub difference: f64,
    /// `difference / (ε / ρ₀)` with `ε` the scaled norm.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmallnessReport {
    pub epsilon: Epsilon,
    pub rows: Vec<SmallnessRow>,
    pub max_ratio: f64,
}

/// Green's differences at shell probes against `ε` of the same pair.
pub fn smallness_check(
    ev1: &SubtractedEvaluator,
    ev2: &SubtractedEvaluator,
    domain: &DomainSpec<f64>,
    probes: &[(Vector3<f64>, Vector3<f64>)],
    epsilon: Epsilon,
) -> Result<SmallnessReport> {
    if probes.is_empty() {
        return Err(Error::input("no probe pairs"));
    }
    for (y, w) in probes {
        if !domain.in_shell(y) || !domain.in_shell(w) {
            return Err(Error::input(format!(
                "probe pair {:?}, {:?} is not in the shell rho0 < dist(x, Omega) < 2 rho0",
                y.as_slice(),
                w.as_slice()
            )));
        }
    }
    if ev1.system().mesh().id() != ev2.system().mesh().id() || ev1.reference() != ev2.reference() {
        return Err(Error::MeshMismatch("smallness evaluators must share mesh and reference".to_string()));
    }
    let scale = epsilon.scaled / domain.rho0;
    let mut rows = Vec::with_capacity(probes.len());
    for (y, w) in probes {
        let f1 = ev1.unit_fields(w)?;
        let f2 = ev2.unit_fields(w)?;
        let diff = ev2.correction_matrix_at(&f2, y)? - ev1.correction_matrix_at(&f1, y)?;
        let s = diff.singular_values().max();
        let ratio = if scale > 0.0 {
            s / scale
        } else if s == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        rows.push(SmallnessRow {
            y: [y.x, y.y, y.z],
            w: [w.x, w.y, w.z],
            difference: s,
            ratio,
        });
    }
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(SmallnessReport {
        epsilon,
        rows,
        max_ratio,
    })
}

/// `g(h)` of one pair for a fixed direction and `λ_w`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyProfile {
    pub label: String,
    pub epsilon: f64,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
}

/// `(Γ^{D₂} − Γ^{D₁})(y_h, w_h)` in the local frame at `P ∈ ∂D₁` for every
/// `D₂` of a family and every depth; one entry per `D₂`, per depth.
#[allow(clippy::too_many_arguments)]
pub fn difference_profiles(
    background: &LameField,
    inclusion: &LameField,
    d1: &InclusionGeometry<f64>,
    d2s: &[InclusionGeometry<f64>],
    p: &Vector3<f64>,
    nu: &Vector3<f64>,
    h: &[f64],
    lambda_w: f64,
    mesh: &HexMesh,
    tagging: Tagging,
) -> Result<Vec<Vec<Option<Matrix3<f64>>>>> {
    let basis = local_basis(nu)?;
    let e3 = basis[2];
    let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = h.iter().map(|&t| (p - e3 * t, p - e3 * (lambda_w * t))).collect();
    for (y, w) in &pairs {
        if std::iter::once(d1).chain(d2s).any(|d| d.contains(y) || d.contains(w)) {
            return Err(Error::Domain(format!("probe pair near {:?} inside an inclusion", y.as_slice())));
        }
    }
    let reference = background.at(p);
    let assemble = |d: &InclusionGeometry<f64>| -> Result<FemSystem> {
        let comp = variant_composite(Variant::Full, background, inclusion, p, nu, Some(d))?;
        FemSystem::assemble(mesh.clone(), comp, tagging)
    };
    let base = correction_grid(assemble(d1)?, reference, &pairs, &basis)?;
    let mut out = Vec::with_capacity(d2s.len());
    for d2 in d2s {
        let other = correction_grid(assemble(d2)?, reference, &pairs, &basis)?;
        out.push(
            other
                .iter()
                .zip(&base)
                .map(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => Some(a - b),
                    _ => None,
                })
                .collect(),
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpperBoundReport {
    /// Labels in increasing `ε`.
    pub order: Vec<String>,
    /// Largest `g_A(h) / g_B(h)` over consecutive families `ε_A < ε_B` and
    /// matched `h`.
    pub worst_ratio: f64,
    pub dominated: bool,
    /// Per depth: `g` is increasing in `ε`.
    pub monotone: Vec<bool>,
    /// Per depth: secant exponent `p` of `g ∝ ε^p` between the smallest and
    /// largest positive `ε`.
    pub exponents: Vec<f64>,
    /// `g → 0` as `ε → 0`: monotone with a positive exponent at every depth,
    /// and `g ≡ 0` for any family with `ε = 0`.
    pub vanishing: bool,
    /// Per family: `g·h` at the largest depth is below its value at the
    /// smallest depth.
    pub suppressed: Vec<bool>,
    /// Exploratory `(C₁, C₂)` from `ln(g h / A) / ln ε ≈ C₁ (h/ρ₀)^{C₂}`,
    /// `A` the largest `g h` over all families.
    pub c1_c2: Option<(f64, f64)>,
}

pub fn upper_bound_shape(profiles: &[FamilyProfile], rho0: f64, slack: f64) -> Result<UpperBoundReport> {
    if profiles.len() < 2 {
        return Err(Error::input("upper-bound shape needs at least two families"));
    }
    let h = &profiles[0].h;
    if profiles.iter().any(|f| f.h != *h || f.g.len() != h.len()) {
        return Err(Error::input("families must share the depth list"));
    }
    if profiles.iter().any(|f| f.g.iter().any(|v| !v.is_finite())) {
        return Err(Error::input("profiles contain unresolved values"));
    }
    let mut order: Vec<&FamilyProfile> = profiles.iter().collect();
    order.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let mut worst: f64 = 0.0;
    for pair in order.windows(2) {
        for k in 0..h.len() {
            let (ga, gb) = (pair[0].g[k], pair[1].g[k]);
            let r = if gb > 0.0 {
                ga / gb
            } else if ga == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(r);
        }
    }
    let mut monotone = Vec::with_capacity(h.len());
    let mut exponents = Vec::with_capacity(h.len());
    let pos: Vec<&&FamilyProfile> = order.iter().filter(|f| f.epsilon > 0.0).collect();
    for k in 0..h.len() {
        let g: Vec<f64> = order.iter().map(|f| f.g[k]).collect();
        monotone.push(g.windows(2).all(|w| w[1] > w[0]));
        let p = match (pos.first(), pos.last()) {
            (Some(a), Some(b)) if pos.len() >= 2 && a.g[k] > 0.0 && b.g[k] > 0.0 => {
                (b.g[k] / a.g[k]).ln() / (b.epsilon / a.epsilon).ln()
            }
            _ => f64::NAN,
        };
        exponents.push(p);
    }
    let null_zero = order.iter().filter(|f| f.epsilon == 0.0).all(|f| f.g.iter().all(|v| *v == 0.0));
    let suppressed = order
        .iter()
        .map(|f| f.g[0] * f.h[0] < f.g[h.len() - 1] * f.h[h.len() - 1])
        .collect();

    let big_a = order
        .iter()
        .flat_map(|f| f.g.iter().zip(&f.h).map(|(g, t)| g * t))
        .fold(0.0, f64::max);
    let (mut xs, mut qs) = (Vec::new(), Vec::new());
    for f in &order {
        if !(f.epsilon > 0.0 && f.epsilon < 1.0) {
            continue;
        }
        for (g, t) in f.g.iter().zip(&f.h) {
            let q = (g * t / big_a).ln() / f.epsilon.ln();
            if q > 0.0 && q.is_finite() {
                xs.push(t / rho0);
                qs.push(q);
            }
        }
    }
    let c1_c2 = loglog_fit(&xs, &qs, &[]).ok().map(|f| (f.intercept.exp(), f.slope));
    Ok(UpperBoundReport {
        order: order.iter().map(|f| f.label.clone()).collect(),
        dominated: worst <= slack,
        worst_ratio: worst,
        vanishing: null_zero && monotone.iter().all(|m| *m) && exponents.iter().all(|p| *p > 0.0),
        monotone,
        exponents,
        suppressed,
        c1_c2,
    })
}
