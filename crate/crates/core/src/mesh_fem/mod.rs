//! Trilinear finite elements for `div((C + (C^D − C)χ_D)∇u) = 0` on
//! tensor-product hexahedral meshes, with a cached sparse Cholesky
//! factorization of the interior block.

pub mod element;
pub mod mesh;
pub mod sparse;

use std::sync::OnceLock;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt;
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Mat, MatMut, Side};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::tensor_field::{IsotropicTensor, PiecewiseTensor};

pub use mesh::{graded_axis, linspace, BoxMeshSpec, HexMesh, SizeSource};
pub use sparse::{Csc, DofMap};

/// Discretization of the characteristic function of the inclusion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Tagging {
    /// Element is inclusion material iff its centroid lies in `D`.
    Centroid,
    /// Inclusion fraction averaged over `k³` subcells, each subcell using a
    /// linear ramp of the signed distance across its own width.
    VolumeFraction { subcells: usize },
}

impl Default for Tagging {
    fn default() -> Self {
        Tagging::Centroid
    }
}

/// Inclusion fraction of every element of `mesh` for `region`.
pub fn element_fractions(mesh: &HexMesh, region: &Region<f64>, tagging: Tagging) -> Vec<f64> {
    if region.is_empty() {
        return vec![0.0; mesh.n_elements()];
    }
    (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| match tagging {
            Tagging::Centroid => {
                if region.contains(&mesh.element_centroid(e)) {
                    1.0
                } else {
                    0.0
                }
            }
            Tagging::VolumeFraction { subcells } => {
                let k = subcells.max(1);
                let (lo, d) = mesh.element_box(e);
                let sd = d / k as f64;
                let width = (sd.x + sd.y + sd.z) / 3.0;
                let mut acc = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        for c in 0..k {
                            let x = lo + Vector3::new(
                                (a as f64 + 0.5) * sd.x,
                                (b as f64 + 0.5) * sd.y,
                                (c as f64 + 0.5) * sd.z,
                            );
                            acc += (0.5 - region.signed_distance(&x) / width).clamp(0.0, 1.0);
                        }
                    }
                }
                acc / (k * k * k) as f64
            }
        })
        .collect()
}

/// Concentrated force `l δ(· − y)` smoothed by a normalized hat bump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointLoad {
    pub y: Vector3<f64>,
    pub l: Vector3<f64>,
    /// Bump radius; `None` uses two local element widths per axis.
    pub radius: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolverStats {
    pub n_nodes: usize,
    pub n_elements: usize,
    pub interior_dofs: usize,
    pub boundary_dofs: usize,
    pub nnz_interior_lower: usize,
    pub assembly_seconds: f64,
    pub factor_seconds: Option<f64>,
}

struct Factor {
    llt: Llt<usize, f64>,
    seconds: f64,
}

/// Assembled forward problem on one mesh for one composite tensor.
pub struct FemSystem {
    mesh: HexMesh,
    composite: PiecewiseTensor<f64>,
    tagging: Tagging,
    fractions: Vec<f64>,
    dofs: DofMap,
    kii: Csc,
    kib: Csc,
    kbb: Csc,
    factor: OnceLock<std::result::Result<Factor, String>>,
    assembly_seconds: f64,
}

/// Rows of a dense block are interior dofs; scatter one element matrix.
fn scatter(
    dofs: &DofMap,
    nodes: &[usize; 8],
    ke: &[f64; 576],
    kii: &mut Csc,
    kib: &mut Csc,
    kbb: &mut Csc,
) {
    for b in 0..8 {
        let nb = nodes[b];
        let (bi, bb) = (dofs.interior_of[nb], dofs.boundary_of[nb]);
        for j in 0..3 {
            for a in 0..8 {
                let na = nodes[a];
                let (ai, ab) = (dofs.interior_of[na], dofs.boundary_of[na]);
                for i in 0..3 {
                    let v = ke[(3 * a + i) * 24 + 3 * b + j];
                    if bi != usize::MAX {
                        if ai != usize::MAX {
                            let (r, c) = (3 * ai + i, 3 * bi + j);
                            if r >= c {
                                let p = kii.position(r, c).expect("interior pattern");
                                kii.vals[p] += v;
                            }
                        }
                    } else if ai != usize::MAX {
                        let p = kib.position(3 * ai + i, 3 * bb + j).expect("coupling pattern");
                        kib.vals[p] += v;
                    } else {
                        let p = kbb.position(3 * ab + i, 3 * bb + j).expect("boundary pattern");
                        kbb.vals[p] += v;
                    }
                }
            }
        }
    }
}

impl FemSystem {
    /// Assembles the stiffness; the factorization is computed on first use.
    pub fn assemble(mesh: HexMesh, composite: PiecewiseTensor<f64>, tagging: Tagging) -> Result<Self> {
        let t0 = Instant::now();
        let fractions = element_fractions(&mesh, &composite.region, tagging);
        let dofs = DofMap::new(&mesh);
        if dofs.interior_nodes.is_empty() {
            return Err(Error::input("mesh has no interior nodes"));
        }
        let (mut kii, mut kib, mut kbb) = sparse::patterns(&mesh, &dofs);
        let gp = element::gauss_points();
        let n_el = mesh.n_elements();
        const CHUNK: usize = 2048;
        let mut start = 0;
        while start < n_el {
            let end = (start + CHUNK).min(n_el);
            let mats: Vec<Result<[f64; 576]>> = (start..end)
                .into_par_iter()
                .map(|e| {
                    let (lo, d) = mesh.element_box(e);
                    let mut moduli = [(0.0, 0.0); 8];
                    for (q, xi) in gp.iter().enumerate() {
                        let x = element::map_point(&lo, &d, xi);
                        let c = composite.blended_at(&x, fractions[e]);
                        if !c.is_strongly_convex() {
                            return Err(Error::Invariant(format!(
                                "moduli (λ={}, μ={}) at {:?} violate strong convexity",
                                c.lambda,
                                c.mu,
                                x.as_slice()
                            )));
                        }
                        moduli[q] = (c.lambda, c.mu);
                    }
                    let mut ke = [0.0; 576];
                    element::stiffness(&d, &moduli, &mut ke);
                    Ok(ke)
                })
                .collect();
            for (off, ke) in mats.into_iter().enumerate() {
                let e = start + off;
                scatter(&dofs, &mesh.element_nodes(e), &ke?, &mut kii, &mut kib, &mut kbb);
            }
            start = end;
        }
        Ok(Self {
            mesh,
            composite,
            tagging,
            fractions,
            dofs,
            kii,
            kib,
            kbb,
            factor: OnceLock::new(),
            assembly_seconds: t0.elapsed().as_secs_f64(),
        })
    }

    pub fn mesh(&self) -> &HexMesh {
        &self.mesh
    }

    pub fn composite(&self) -> &PiecewiseTensor<f64> {
        &self.composite
    }

    pub fn tagging(&self) -> Tagging {
        self.tagging
    }

    pub fn dofs(&self) -> &DofMap {
        &self.dofs
    }

    pub fn fractions(&self) -> &[f64] {
        &self.fractions
    }

    pub fn interior_block(&self) -> &Csc {
        &self.kii
    }

    pub fn coupling_block(&self) -> &Csc {
        &self.kib
    }

    pub fn boundary_block(&self) -> &Csc {
        &self.kbb
    }

    /// Identifier of the discretized tensor (composite and tagging).
    pub fn tensor_id(&self) -> String {
        format!("{}|{:?}", self.composite.describe(), self.tagging)
    }

    pub fn stats(&self) -> SolverStats {
        SolverStats {
            n_nodes: self.mesh.n_nodes(),
            n_elements: self.mesh.n_elements(),
            interior_dofs: self.dofs.n_interior_dofs(),
            boundary_dofs: self.dofs.n_boundary_dofs(),
            nnz_interior_lower: self.kii.nnz(),
            assembly_seconds: self.assembly_seconds,
            factor_seconds: self.factor.get().and_then(|f| f.as_ref().ok()).map(|f| f.seconds),
        }
    }

    /// Moduli used by the discretization at `x` inside element `e`.
    pub fn moduli(&self, e: usize, x: &Vector3<f64>) -> IsotropicTensor<f64> {
        self.composite.blended_at(x, self.fractions[e])
    }

    fn factor(&self) -> Result<&Llt<usize, f64>> {
        let f = self.factor.get_or_init(|| {
            let t0 = Instant::now();
            self.kii
                .as_faer()
                .sp_cholesky(Side::Lower)
                .map(|llt| Factor {
                    llt,
                    seconds: t0.elapsed().as_secs_f64(),
                })
                .map_err(|e| format!("{e:?}"))
        });
        match f {
            Ok(f) => Ok(&f.llt),
            Err(e) => Err(Error::Solver(format!(
                "Cholesky factorization failed (stiffness not SPD): {e}"
            ))),
        }
    }

    /// Forces the factorization now.
    pub fn factorize(&self) -> Result<()> {
        self.factor().map(|_| ())
    }

    /// Solves `K_ii X = B` in place, splitting wide blocks across workers.
    pub fn solve_interior_in_place(&self, mut rhs: MatMut<'_, f64>) -> Result<()> {
        let llt = self.factor()?;
        let n = rhs.ncols();
        const BLOCK: usize = 32;
        if n <= BLOCK {
            llt.solve_in_place(rhs);
            return Ok(());
        }
        let nrows = rhs.nrows();
        let mut cols: Vec<Mat<f64>> = (0..n.div_ceil(BLOCK))
            .map(|b| {
                let s = b * BLOCK;
                let w = BLOCK.min(n - s);
                rhs.rb().subcols(s, w).to_owned()
            })
            .collect();
        cols.par_iter_mut().for_each(|m| llt.solve_in_place(m.as_mut()));
        for (b, m) in cols.into_iter().enumerate() {
            let s = b * BLOCK;
            rhs.rb_mut().subcols_mut(s, m.ncols()).copy_from(&m);
            debug_assert_eq!(m.nrows(), nrows);
        }
        Ok(())
    }

    /// Splits a full nodal vector into interior and boundary parts.
    pub fn split(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut ui = vec![0.0; self.dofs.n_interior_dofs()];
        let mut ub = vec![0.0; self.dofs.n_boundary_dofs()];
        for (k, &n) in self.dofs.interior_nodes.iter().enumerate() {
            ui[3 * k..3 * k + 3].copy_from_slice(&u[3 * n..3 * n + 3]);
        }
        for (k, &n) in self.dofs.boundary_nodes.iter().enumerate() {
            ub[3 * k..3 * k + 3].copy_from_slice(&u[3 * n..3 * n + 3]);
        }
        (ui, ub)
    }

    /// Full nodal vector from interior and boundary parts.
    pub fn join(&self, ui: &[f64], ub: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; 3 * self.mesh.n_nodes()];
        for (k, &n) in self.dofs.interior_nodes.iter().enumerate() {
            u[3 * n..3 * n + 3].copy_from_slice(&ui[3 * k..3 * k + 3]);
        }
        for (k, &n) in self.dofs.boundary_nodes.iter().enumerate() {
            u[3 * n..3 * n + 3].copy_from_slice(&ub[3 * k..3 * k + 3]);
        }
        u
    }

    fn check_boundary_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dofs.n_boundary_dofs() {
            return Err(Error::MeshMismatch(format!(
                "boundary data has {} entries, mesh needs {}",
                f.len(),
                self.dofs.n_boundary_dofs()
            )));
        }
        Ok(())
    }

    fn check_full_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != 3 * self.mesh.n_nodes() {
            return Err(Error::MeshMismatch(format!(
                "nodal field has {} entries, mesh needs {}",
                u.len(),
                3 * self.mesh.n_nodes()
            )));
        }
        Ok(())
    }

    /// Solves with Dirichlet data `f` (boundary numbering) and an optional
    /// nodal load (full numbering; boundary entries ignored).
    pub fn solve(&self, f: &[f64], load: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_boundary_len(f)?;
        let ni = self.dofs.n_interior_dofs();
        let mut rhs = vec![0.0; ni];
        if let Some(load) = load {
            self.check_full_len(load)?;
            let (li, _) = self.split(load);
            rhs.copy_from_slice(&li);
        }
        let mut kf = vec![0.0; ni];
        self.kib.mul_add(f, &mut kf);
        let mut b = Mat::<f64>::zeros(ni, 1);
        for r in 0..ni {
            b[(r, 0)] = rhs[r] - kf[r];
        }
        self.solve_interior_in_place(b.as_mut())?;
        let ui: Vec<f64> = (0..ni).map(|r| b[(r, 0)]).collect();
        Ok(self.join(&ui, f))
    }

    pub fn solve_dirichlet(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.solve(f, None)
    }

    /// Zero Dirichlet data with a nodal load.
    pub fn solve_load(&self, load: &[f64]) -> Result<Vec<f64>> {
        let zero = vec![0.0; self.dofs.n_boundary_dofs()];
        self.solve(&zero, Some(load))
    }

    /// Several zero-Dirichlet load solves sharing one block solve.
    pub fn solve_loads(&self, loads: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let ni = self.dofs.n_interior_dofs();
        let mut b = Mat::<f64>::zeros(ni, loads.len());
        for (c, load) in loads.iter().enumerate() {
            self.check_full_len(load)?;
            for (k, &n) in self.dofs.interior_nodes.iter().enumerate() {
                for i in 0..3 {
                    b[(3 * k + i, c)] = load[3 * n + i];
                }
            }
        }
        self.solve_interior_in_place(b.as_mut())?;
        let zero = vec![0.0; self.dofs.n_boundary_dofs()];
        Ok((0..loads.len())
            .map(|c| {
                let ui: Vec<f64> = (0..ni).map(|r| b[(r, c)]).collect();
                self.join(&ui, &zero)
            })
            .collect())
    }

    /// Several Dirichlet solves sharing one block solve.
    pub fn solve_dirichlet_many(&self, fs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let ni = self.dofs.n_interior_dofs();
        let mut b = Mat::<f64>::zeros(ni, fs.len());
        let mut kf = vec![0.0; ni];
        for (c, f) in fs.iter().enumerate() {
            self.check_boundary_len(f)?;
            kf.fill(0.0);
            self.kib.mul_add(f, &mut kf);
            for r in 0..ni {
                b[(r, c)] = -kf[r];
            }
        }
        self.solve_interior_in_place(b.as_mut())?;
        Ok(fs
            .iter()
            .enumerate()
            .map(|(c, f)| {
                let ui: Vec<f64> = (0..ni).map(|r| b[(r, c)]).collect();
                self.join(&ui, f)
            })
            .collect())
    }

    /// `K u` restricted to interior rows minus the interior load, relative
    /// to the size of the terms.
    pub fn interior_residual(&self, u: &[f64], load: Option<&[f64]>) -> Result<f64> {
        self.check_full_len(u)?;
        let (ui, ub) = self.split(u);
        let mut r = vec![0.0; ui.len()];
        self.kii.sym_lower_mul_add(&ui, &mut r);
        self.kib.mul_add(&ub, &mut r);
        let li = match load {
            Some(l) => {
                self.check_full_len(l)?;
                self.split(l).0
            }
            None => vec![0.0; ui.len()],
        };
        let mut scale = 0.0f64;
        let mut kd = vec![0.0; ui.len()];
        self.kii.sym_lower_mul_add(&ui.iter().map(|v| v.abs()).collect::<Vec<_>>(), &mut kd);
        for (k, v) in kd.iter().enumerate() {
            scale = scale.max(v.abs()).max(li[k].abs());
        }
        let res = r.iter().zip(&li).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        Ok(if scale > 0.0 { res / scale } else { res })
    }

    /// Boundary reaction `K_bi u_i + K_bb u_b`: the discrete traction
    /// functional of `u` tested with the boundary basis.
    pub fn boundary_reaction(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_full_len(u)?;
        let (ui, ub) = self.split(u);
        let mut out = vec![0.0; ub.len()];
        self.kib.mul_add_transpose(&ui, &mut out);
        self.kbb.mul_add(&ub, &mut out);
        Ok(out)
    }

    /// `uᵀ K v` from the assembled blocks.
    pub fn quadratic_form(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        self.check_full_len(u)?;
        self.check_full_len(v)?;
        let (ui, ub) = self.split(u);
        let (vi, vb) = self.split(v);
        let mut ki = vec![0.0; ui.len()];
        self.kii.sym_lower_mul_add(&vi, &mut ki);
        self.kib.mul_add(&vb, &mut ki);
        let mut kb = vec![0.0; ub.len()];
        self.kib.mul_add_transpose(&vi, &mut kb);
        self.kbb.mul_add(&vb, &mut kb);
        Ok(dot(&ui, &ki) + dot(&ub, &kb))
    }

    /// `∫ C ∇u · ∇v` by 2×2×2 Gauss quadrature, with the system tensor or an
    /// override tagged the same way.
    pub fn energy_inner_product(
        &self,
        u: &[f64],
        v: &[f64],
        tensor_override: Option<&PiecewiseTensor<f64>>,
    ) -> Result<f64> {
        self.check_full_len(u)?;
        self.check_full_len(v)?;
        let fractions_override;
        let (tensor, fractions) = match tensor_override {
            Some(t) => {
                fractions_override = element_fractions(&self.mesh, &t.region, self.tagging);
                (t, &fractions_override)
            }
            None => (&self.composite, &self.fractions),
        };
        let gp = element::gauss_points();
        let parts: Vec<f64> = (0..self.mesh.n_elements())
            .into_par_iter()
            .map(|e| {
                let (lo, d) = self.mesh.element_box(e);
                let nodes = self.mesh.element_nodes(e);
                let (ue, ve) = (gather(u, &nodes), gather(v, &nodes));
                let w = d.x * d.y * d.z / 8.0;
                let mut s = 0.0;
                for xi in gp.iter() {
                    let g = element::shape_gradients(xi, &d);
                    let gu = element::gradient(&g, &ue);
                    let gv = element::gradient(&g, &ve);
                    let c = tensor.blended_at(&element::map_point(&lo, &d, xi), fractions[e]);
                    s += w * c.energy(&gu, &gv);
                }
                s
            })
            .collect();
        Ok(pairwise_sum(&parts))
    }

    /// Nodal values of a vector field on all nodes.
    pub fn nodal_field(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Vec<f64> {
        let mut u = vec![0.0; 3 * self.mesh.n_nodes()];
        for n in 0..self.mesh.n_nodes() {
            let v = f(&self.mesh.node(n));
            u[3 * n..3 * n + 3].copy_from_slice(v.as_slice());
        }
        u
    }

    /// Boundary data (boundary numbering) sampled from a vector field.
    pub fn boundary_data(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dofs.n_boundary_dofs()];
        for (k, &n) in self.dofs.boundary_nodes.iter().enumerate() {
            let v = f(&self.mesh.node(n));
            out[3 * k..3 * k + 3].copy_from_slice(v.as_slice());
        }
        out
    }

    /// Trilinear interpolation of a nodal field.
    pub fn interpolate(&self, u: &[f64], x: &Vector3<f64>) -> Result<Vector3<f64>> {
        let (e, xi) = self
            .mesh
            .locate(x)
            .ok_or_else(|| Error::Domain(format!("{:?} outside mesh", x.as_slice())))?;
        let nodes = self.mesh.element_nodes(e);
        let n = element::shape(&xi);
        let mut out = Vector3::zeros();
        for a in 0..8 {
            for i in 0..3 {
                out[i] += n[a] * u[3 * nodes[a] + i];
            }
        }
        Ok(out)
    }

    /// Gradient of a nodal field at `x` (element-wise).
    pub fn gradient_at(&self, u: &[f64], x: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let (e, xi) = self
            .mesh
            .locate(x)
            .ok_or_else(|| Error::Domain(format!("{:?} outside mesh", x.as_slice())))?;
        Ok(self.gradient_in(u, e, &xi))
    }

    pub fn gradient_in(&self, u: &[f64], e: usize, xi: &Vector3<f64>) -> Matrix3<f64> {
        let (_, d) = self.mesh.element_box(e);
        let g = element::shape_gradients(xi, &d);
        element::gradient(&g, &gather(u, &self.mesh.element_nodes(e)))
    }

    /// Nodal load of a smoothed point force; its entries sum to `l`.
    pub fn point_load(&self, load: &PointLoad) -> Result<Vec<f64>> {
        let edges = self
            .mesh
            .local_edges(&load.y)
            .ok_or_else(|| Error::Domain(format!("load point {:?} outside mesh", load.y.as_slice())))?;
        let r = match load.radius {
            Some(r) if r > 0.0 => Vector3::repeat(r),
            Some(_) => return Err(Error::input("mollifier radius must be positive")),
            None => edges * 2.0,
        };
        let rmax = r.max();
        let (lo, hi) = (self.mesh.lo(), self.mesh.hi());
        for k in 0..3 {
            if load.y[k] - lo[k] <= 2.0 * rmax || hi[k] - load.y[k] <= 2.0 * rmax {
                return Err(Error::Resolution(format!(
                    "load point within 2 mollifier radii ({rmax}) of the truncation boundary"
                )));
            }
        }
        if self.composite.region.signed_distance(&load.y).abs() <= rmax
            && self.composite.background != self.composite.inclusion
        {
            return Err(Error::Resolution(format!(
                "load point within one mollifier radius ({rmax}) of a material interface"
            )));
        }
        let mut ranges = [(0usize, 0usize); 3];
        for k in 0..3 {
            let ax = self.mesh.axis(k);
            let a = ax.partition_point(|v| *v <= load.y[k] - r[k]);
            let b = ax.partition_point(|v| *v < load.y[k] + r[k]);
            ranges[k] = (a, b);
        }
        let mut weights = Vec::new();
        for kk in ranges[2].0..ranges[2].1 {
            for jj in ranges[1].0..ranges[1].1 {
                for ii in ranges[0].0..ranges[0].1 {
                    let id = self.mesh.node_index(ii, jj, kk);
                    let p = self.mesh.node(id);
                    let w: f64 = (0..3).map(|k| (1.0 - (p[k] - load.y[k]).abs() / r[k]).max(0.0)).product();
                    if w > 0.0 {
                        weights.push((id, w));
                    }
                }
            }
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(Error::Resolution("mollifier support contains no node".to_string()));
        }
        let mut f = vec![0.0; 3 * self.mesh.n_nodes()];
        for (id, w) in weights {
            for i in 0..3 {
                f[3 * id + i] += load.l[i] * w / total;
            }
        }
        Ok(f)
    }

    /// Consistent nodal load `∫ b · N_a` of a body force, 2×2×2 Gauss.
    pub fn body_force_load(&self, b: impl Fn(&Vector3<f64>) -> Vector3<f64> + Sync) -> Vec<f64> {
        let gp = element::gauss_points();
        let parts: Vec<[f64; 24]> = (0..self.mesh.n_elements())
            .into_par_iter()
            .map(|e| {
                let (lo, d) = self.mesh.element_box(e);
                let w = d.x * d.y * d.z / 8.0;
                let mut fe = [0.0; 24];
                for xi in gp.iter() {
                    let n = element::shape(xi);
                    let bx = b(&element::map_point(&lo, &d, xi));
                    for a in 0..8 {
                        for i in 0..3 {
                            fe[3 * a + i] += w * n[a] * bx[i];
                        }
                    }
                }
                fe
            })
            .collect();
        self.scatter_vectors(parts.iter().enumerate().map(|(e, f)| (e, f)))
    }

    /// Load `−∫ S : ∇N_a` of a stress field `S(x, C_h(x))`, where `C_h` are
    /// the discretized moduli. `None` marks points where `S` vanishes.
    /// Sub-boxes close to `singular` points are subdivided adaptively.
    pub fn stress_source_load<F>(&self, source: F, singular: &[Vector3<f64>]) -> Vec<f64>
    where
        F: Fn(&Vector3<f64>, &IsotropicTensor<f64>) -> Option<Matrix3<f64>> + Sync,
    {
        let gp = element::gauss_points();
        let parts: Vec<(usize, [f64; 24])> = (0..self.mesh.n_elements())
            .into_par_iter()
            .filter_map(|e| {
                let (lo, d) = self.mesh.element_box(e);
                // Cheap screen at the element Gauss points.
                let active = gp.iter().any(|xi| {
                    let x = element::map_point(&lo, &d, xi);
                    source(&x, &self.moduli(e, &x)).is_some()
                });
                if !active {
                    return None;
                }
                let mut fe = [0.0; 24];
                self.integrate_source(e, &lo, &d, &lo, &d, 0, &source, singular, &mut fe);
                Some((e, fe))
            })
            .collect();
        self.scatter_vectors(parts.iter().map(|(e, f)| (*e, f)))
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_source<F>(
        &self,
        e: usize,
        elo: &Vector3<f64>,
        ed: &Vector3<f64>,
        lo: &Vector3<f64>,
        d: &Vector3<f64>,
        depth: usize,
        source: &F,
        singular: &[Vector3<f64>],
        fe: &mut [f64; 24],
    ) where
        F: Fn(&Vector3<f64>, &IsotropicTensor<f64>) -> Option<Matrix3<f64>>,
    {
        const MAX_DEPTH: usize = 6;
        let center = lo + d * 0.5;
        let diag = d.norm();
        let near = singular.iter().any(|s| (s - center).norm() < 1.5 * diag);
        if near && depth < MAX_DEPTH {
            let h = d * 0.5;
            for c in 0..8 {
                let off = Vector3::new(
                    if c & 1 == 0 { 0.0 } else { h.x },
                    if (c >> 1) & 1 == 0 { 0.0 } else { h.y },
                    if (c >> 2) & 1 == 0 { 0.0 } else { h.z },
                );
                self.integrate_source(e, elo, ed, &(lo + off), &h, depth + 1, source, singular, fe);
            }
            return;
        }
        let w = d.x * d.y * d.z / 8.0;
        for xi in element::gauss_points().iter() {
            let x = element::map_point(lo, d, xi);
            if singular.iter().any(|s| *s == x) {
                continue;
            }
            let Some(s) = source(&x, &self.moduli(e, &x)) else {
                continue;
            };
            // Reference coordinates in the parent element.
            let pxi = Vector3::from_fn(|k, _| 2.0 * (x[k] - elo[k]) / ed[k] - 1.0);
            let g = element::shape_gradients(&pxi, ed);
            for a in 0..8 {
                for i in 0..3 {
                    let mut v = 0.0;
                    for j in 0..3 {
                        v += s[(i, j)] * g[a][j];
                    }
                    fe[3 * a + i] -= w * v;
                }
            }
        }
    }

    fn scatter_vectors<'a>(&self, parts: impl Iterator<Item = (usize, &'a [f64; 24])>) -> Vec<f64> {
        let mut f = vec![0.0; 3 * self.mesh.n_nodes()];
        for (e, fe) in parts {
            let nodes = self.mesh.element_nodes(e);
            for a in 0..8 {
                for i in 0..3 {
                    f[3 * nodes[a] + i] += fe[3 * a + i];
                }
            }
        }
        f
    }
}

#[inline]
pub(crate) fn gather(u: &[f64], nodes: &[usize; 8]) -> [f64; 24] {
    let mut out = [0.0; 24];
    for a in 0..8 {
        out[3 * a..3 * a + 3].copy_from_slice(&u[3 * nodes[a]..3 * nodes[a] + 3]);
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let prods: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&prods)
}

/// Pairwise (tree) summation with a fixed split, independent of threading.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 16 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// The six rigid motions (three translations, three rotations about the
/// origin) as vector fields.
pub fn rigid_motions() -> [Box<dyn Fn(&Vector3<f64>) -> Vector3<f64> + Sync>; 6] {
    [
        Box::new(|_| Vector3::new(1.0, 0.0, 0.0)),
        Box::new(|_| Vector3::new(0.0, 1.0, 0.0)),
        Box::new(|_| Vector3::new(0.0, 0.0, 1.0)),
        Box::new(|x| Vector3::new(0.0, -x.z, x.y)),
        Box::new(|x| Vector3::new(x.z, 0.0, -x.x)),
        Box::new(|x| Vector3::new(-x.y, x.x, 0.0)),
    ]
}
