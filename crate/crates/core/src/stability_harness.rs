//! Empirical logarithmic stability: families of inclusion pairs, their DtN
//! discrepancy `ε` and Hausdorff distance, the fit of
//! `d_H = C ρ₀ |log ε|^{−η}`, and a small shape reconstruction by misfit
//! minimization.

use std::io::Write;

use faer::Mat;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dtn::{build_dtn, operator_norm_h12, BoundarySpace, DtnMatrix, Epsilon, NormScaling};
use crate::error::{Error, Result};
use crate::geometry::{hausdorff_distance, DomainSpec, InclusionGeometry, Region, DEFAULT_SURFACE_SAMPLES};
use crate::mesh_fem::{FemSystem, HexMesh, Tagging};
use crate::recon_norms::loglog_fit;
use crate::tensor_field::{LameField, PiecewiseTensor};

/// How the members of a family depart from the base inclusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    /// Center moved by `t` along `direction`.
    Offset { direction: [f64; 3] },
    /// Radius (or every semiaxis) grown by `t`.
    RadiusGrowth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairFamily {
    pub base: InclusionGeometry<f64>,
    pub perturbation: Perturbation,
    pub t: Vec<f64>,
    pub members: Vec<InclusionGeometry<f64>>,
}

impl PairFamily {
    pub fn new(base: InclusionGeometry<f64>, perturbation: Perturbation, t: Vec<f64>) -> Result<Self> {
        base.validate()?;
        if t.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::input("family parameters must be nonnegative"));
        }
        let members = t
            .iter()
            .map(|&s| {
                let g = match &perturbation {
                    Perturbation::Offset { direction } => {
                        let d = Vector3::from(*direction);
                        if !(d.norm() > 0.0) {
                            return Err(Error::input("offset direction must be nonzero"));
                        }
                        base.translated(&(d.normalize() * s))
                    }
                    Perturbation::RadiusGrowth => match &base {
                        InclusionGeometry::Ball { center, radius } => InclusionGeometry::ball(*center, radius + s),
                        InclusionGeometry::Ellipsoid {
                            center,
                            semiaxes,
                            rotation,
                        } => InclusionGeometry::ellipsoid(*center, semiaxes.add_scalar(s), *rotation),
                    },
                };
                g.validate()?;
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            perturbation,
            t,
            members,
        })
    }

    /// Offsets `{0.02, …, 0.12}·ρ₀` of a `0.2ρ₀` ball whose center sits at
    /// `−0.06ρ₀` along `x` from the center of `Ω`.
    pub fn default_offset(domain: &DomainSpec<f64>) -> Result<Self> {
        let r = domain.rho0;
        let base = InclusionGeometry::ball(domain.center() - Vector3::x() * (0.06 * r), 0.2 * r);
        let t = (1..=6).map(|k| 0.02 * k as f64 * r).collect();
        Self::new(
            base,
            Perturbation::Offset {
                direction: [1.0, 0.0, 0.0],
            },
            t,
        )
    }

    /// Sampled `d_H(∂D, ∂D(t))` for every member.
    pub fn hausdorff(&self, samples: usize) -> Result<Vec<f64>> {
        let a = self.base.sample_surface(samples);
        self.members
            .iter()
            .map(|m| hausdorff_distance(&a, &m.sample_surface(samples)))
            .collect()
    }

    /// Checks that `d_H` is strictly increasing in `t` and every member lies
    /// at least `margin` inside `Ω`.
    pub fn check(&self, domain: &DomainSpec<f64>, margin: f64, samples: usize) -> Result<Vec<f64>> {
        let mut order: Vec<usize> = (0..self.t.len()).collect();
        order.sort_by(|&a, &b| self.t[a].total_cmp(&self.t[b]));
        let d = self.hausdorff(samples)?;
        for w in order.windows(2) {
            if !(d[w[1]] > d[w[0]]) {
                return Err(Error::Invariant(format!(
                    "d_H not increasing between t = {} and t = {}",
                    self.t[w[0]], self.t[w[1]]
                )));
            }
        }
        for m in std::iter::once(&self.base).chain(&self.members) {
            m.check_inside(domain, margin)?;
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityConfig {
    pub n: usize,
    /// Subcells per axis for volume-fraction tagging; 0 tags by centroid.
    pub subcells: usize,
    pub surface_samples: usize,
    pub scaling: NormScaling,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            n: 16,
            subcells: 4,
            surface_samples: DEFAULT_SURFACE_SAMPLES,
            scaling: NormScaling::Normalized,
        }
    }
}

impl StabilityConfig {
    pub fn tagging(&self) -> Tagging {
        if self.subcells == 0 {
            Tagging::Centroid
        } else {
            Tagging::VolumeFraction { subcells: self.subcells }
        }
    }
}

/// One family member.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityRecord {
    pub t: f64,
    pub epsilon_raw: f64,
    pub epsilon_scaled: f64,
    pub d_hausdorff: f64,
    pub n: usize,
    pub flags: String,
}

impl StabilityRecord {
    /// Usable in the log fit: unflagged, `0 < ε < 1`, `d_H > 0`.
    pub fn fittable(&self) -> bool {
        self.flags.is_empty() && self.epsilon_scaled > 0.0 && self.epsilon_scaled < 1.0 && self.d_hausdorff > 0.0
    }
}

fn dtn_for(
    mesh: &HexMesh,
    space: &BoundarySpace,
    background: &LameField,
    inclusion: &LameField,
    d: &InclusionGeometry<f64>,
    tagging: Tagging,
) -> Result<DtnMatrix> {
    let comp = PiecewiseTensor::new(background.clone(), inclusion.clone(), Region::Body(d.clone()));
    let sys = FemSystem::assemble(mesh.clone(), comp, tagging)?;
    build_dtn(&sys, space)
}

/// `ε` between two inclusions on a uniform `n`-mesh of `Ω`.
pub fn pair_epsilon(
    domain: &DomainSpec<f64>,
    background: &LameField,
    inclusion: &LameField,
    d1: &InclusionGeometry<f64>,
    d2: &InclusionGeometry<f64>,
    cfg: &StabilityConfig,
) -> Result<Epsilon> {
    let mesh = HexMesh::uniform(domain, cfg.n)?;
    let space = BoundarySpace::new(&mesh, domain.rho0, cfg.scaling)?;
    let a = dtn_for(&mesh, &space, background, inclusion, d1, cfg.tagging())?;
    let b = dtn_for(&mesh, &space, background, inclusion, d2, cfg.tagging())?;
    operator_norm_h12(&space, a.difference(&b)?.as_ref())
}

/// One record per member, in the family's order. Members whose solve
/// fails are flagged and the run continues.
pub fn run_family(
    domain: &DomainSpec<f64>,
    background: &LameField,
    inclusion: &LameField,
    family: &PairFamily,
    cfg: &StabilityConfig,
) -> Result<Vec<StabilityRecord>> {
    let mesh = HexMesh::uniform(domain, cfg.n)?;
    let space = BoundarySpace::new(&mesh, domain.rho0, cfg.scaling)?;
    let base = dtn_for(&mesh, &space, background, inclusion, &family.base, cfg.tagging())?;
    let dh = family.hausdorff(cfg.surface_samples)?;
    let mut out = Vec::with_capacity(family.members.len());
    for (k, m) in family.members.iter().enumerate() {
        let eps = dtn_for(&mesh, &space, background, inclusion, m, cfg.tagging())
            .and_then(|l| base.difference(&l))
            .and_then(|delta| operator_norm_h12(&space, delta.as_ref()));
        let mut rec = StabilityRecord {
            t: family.t[k],
            epsilon_raw: f64::NAN,
            epsilon_scaled: f64::NAN,
            d_hausdorff: dh[k],
            n: cfg.n,
            flags: String::new(),
        };
        match eps {
            Ok(e) => {
                rec.epsilon_raw = e.raw;
                rec.epsilon_scaled = e.scaled;
                if e.scaled >= 1.0 {
                    rec.flags = "epsilon_ge_1".to_string();
                }
            }
            Err(err) => rec.flags = format!("failed: {err}"),
        }
        out.push(rec);
    }
    Ok(out)
}

/// `ε` and `d_H` both strictly increasing in `t` over unflagged records.
pub fn monotone(records: &[StabilityRecord]) -> bool {
    let mut r: Vec<&StabilityRecord> = records.iter().filter(|r| r.flags.is_empty()).collect();
    r.sort_by(|a, b| a.t.total_cmp(&b.t));
    r.len() >= 2
        && r.windows(2)
            .all(|w| w[1].epsilon_scaled > w[0].epsilon_scaled && w[1].d_hausdorff > w[0].d_hausdorff)
}

/// Fit of `log d_H = log(C ρ₀) − η log|log ε|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StabilityFit {
    #[serde(rename = "C_fit")]
    pub c_fit: f64,
    pub eta_fit: f64,
    pub r2: f64,
    pub n_records: usize,
    /// Indices of records left out of the fit.
    pub excluded: Vec<usize>,
    /// Smallest `C` with `d_H ≤ C ρ₀ |log ε|^{−η_fit}` at every fitted record.
    pub c_envelope: f64,
}

pub fn fit_log_stability(records: &[StabilityRecord], rho0: f64) -> Result<StabilityFit> {
    if !(rho0 > 0.0) {
        return Err(Error::input("rho0 must be positive"));
    }
    let excluded: Vec<usize> = (0..records.len()).filter(|&k| !records[k].fittable()).collect();
    let valid = records.len() - excluded.len();
    if valid < 4 {
        return Err(Error::Fit(format!("need at least 4 records with 0 < epsilon < 1, got {valid}")));
    }
    let x: Vec<f64> = records.iter().map(|r| r.epsilon_scaled.ln().abs()).collect();
    let y: Vec<f64> = records.iter().map(|r| r.d_hausdorff).collect();
    let sanitized: Vec<f64> = x.iter().map(|v| if v.is_finite() { *v } else { 1.0 }).collect();
    let fit = loglog_fit(&sanitized, &y, &excluded)?;
    let eta = -fit.slope;
    let c_envelope = (0..records.len())
        .filter(|k| !excluded.contains(k))
        .map(|k| y[k] / (rho0 * x[k].powf(-eta)))
        .fold(0.0, f64::max);
    Ok(StabilityFit {
        c_fit: fit.intercept.exp() / rho0,
        eta_fit: eta,
        r2: fit.r2,
        n_records: valid,
        excluded,
        c_envelope,
    })
}

/// Writes `t,epsilon_raw,epsilon_scaled,d_hausdorff,n,flags`.
pub fn write_stability_csv<W: Write>(records: &[StabilityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "epsilon_raw", "epsilon_scaled", "d_hausdorff", "n", "flags"])?;
    for r in records {
        w.write_record([
            format!("{:.17e}", r.t),
            format!("{:.17e}", r.epsilon_raw),
            format!("{:.17e}", r.epsilon_scaled),
            format!("{:.17e}", r.d_hausdorff),
            r.n.to_string(),
            r.flags.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `Λ_ij (1 + δ u_ij)` with `u` symmetric and uniform in `[−1, 1]`.
pub fn perturb_dtn(dtn: &DtnMatrix, delta: f64, seed: u64) -> DtnMatrix {
    let n = dtn.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = dtn.matrix.clone();
    if delta != 0.0 {
        for c in 0..n {
            for r in 0..=c {
                let u: f64 = rng.random_range(-1.0..=1.0);
                m[(r, c)] *= 1.0 + delta * u;
                if r != c {
                    m[(c, r)] *= 1.0 + delta * u;
                }
            }
        }
    }
    DtnMatrix {
        matrix: m,
        mesh_id: dtn.mesh_id.clone(),
        tensor_id: format!("{}+noise({delta})", dtn.tensor_id),
    }
}

/// Box of admissible parameters and the coarse grid of the coordinate scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub grid: usize,
    pub golden_iters: usize,
    pub passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub theta: Vec<f64>,
    pub misfit: f64,
    pub flag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reconstruction {
    pub theta: Vec<f64>,
    pub misfit: f64,
    /// Every evaluated candidate, in evaluation order.
    pub landscape: Vec<Probe>,
}

impl Reconstruction {
    /// Per-parameter extent of the candidates with misfit `≤ level`.
    pub fn level_set_width(&self, level: f64) -> Vec<f64> {
        let dim = self.theta.len();
        (0..dim)
            .map(|k| {
                let v: Vec<f64> = self
                    .landscape
                    .iter()
                    .filter(|p| p.misfit <= level)
                    .map(|p| p.theta[k])
                    .collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
                }
            })
            .collect()
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Minimizes `ε(θ) = ‖Λ_{D(θ)} − Λ_obs‖` by coordinate scans on a grid
/// followed by golden-section refinement in the bracketing cells.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_inclusion(
    observed: &DtnMatrix,
    mesh: &HexMesh,
    space: &BoundarySpace,
    domain: &DomainSpec<f64>,
    background: &LameField,
    inclusion: &LameField,
    tagging: Tagging,
    search: &SearchSpace,
    family: impl Fn(&[f64]) -> Result<InclusionGeometry<f64>>,
) -> Result<Reconstruction> {
    let dim = search.lo.len();
    if dim == 0 || search.hi.len() != dim || (0..dim).any(|k| !(search.hi[k] > search.lo[k])) || search.grid < 3 {
        return Err(Error::input("search space needs lo < hi per parameter and a grid of at least 3"));
    }
    if observed.mesh_id != mesh.id() {
        return Err(Error::MeshMismatch("observed DtN is on another mesh".to_string()));
    }
    let mut landscape: Vec<Probe> = Vec::new();
    let eval = |theta: &[f64], landscape: &mut Vec<Probe>| -> Result<f64> {
        if let Some(p) = landscape.iter().find(|p| p.theta == theta) {
            return Ok(p.misfit);
        }
        let geom = family(theta).and_then(|g| {
            g.validate()?;
            g.check_inside(domain, 0.0)?;
            Ok(g)
        });
        let (misfit, flag) = match geom.and_then(|g| dtn_for(mesh, space, background, inclusion, &g, tagging)) {
            Ok(l) => {
                let d: Mat<f64> = l.difference(observed)?;
                (operator_norm_h12(space, d.as_ref())?.scaled, String::new())
            }
            Err(Error::Solver(msg)) => return Err(Error::Solver(msg)),
            Err(err) => (f64::INFINITY, format!("skipped: {err}")),
        };
        landscape.push(Probe {
            theta: theta.to_vec(),
            misfit,
            flag,
        });
        Ok(misfit)
    };

    let mut theta: Vec<f64> = (0..dim).map(|k| 0.5 * (search.lo[k] + search.hi[k])).collect();
    let mut best = eval(&theta, &mut landscape)?;
    for _ in 0..search.passes.max(1) {
        for k in 0..dim {
            let step = (search.hi[k] - search.lo[k]) / (search.grid - 1) as f64;
            let mut arg = theta[k];
            for g in 0..search.grid {
                let mut cand = theta.clone();
                cand[k] = search.lo[k] + step * g as f64;
                let f = eval(&cand, &mut landscape)?;
                if f < best {
                    best = f;
                    arg = cand[k];
                }
            }
            theta[k] = arg;
            let (mut a, mut b) = ((arg - step).max(search.lo[k]), (arg + step).min(search.hi[k]));
            for _ in 0..search.golden_iters {
                let c = b - INV_PHI * (b - a);
                let d = a + INV_PHI * (b - a);
                let mut tc = theta.clone();
                tc[k] = c;
                let mut td = theta.clone();
                td[k] = d;
                let (fc, fd) = (eval(&tc, &mut landscape)?, eval(&td, &mut landscape)?);
                if fc < fd {
                    b = d;
                } else {
                    a = c;
                }
                for (t, f) in [(c, fc), (d, fd)] {
                    if f < best {
                        best = f;
                        theta[k] = t;
                    }
                }
            }
        }
    }
    Ok(Reconstruction {
        theta,
        misfit: best,
        landscape,
    })
}

#[cfg(test)]
mod tests;
