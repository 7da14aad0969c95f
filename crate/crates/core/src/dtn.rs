//! Discrete Dirichlet-to-Neumann maps, their `H^{1/2} → H^{-1/2}` operator
//! norm, and Alessandrini's identity.
//!
//! Boundary data live on the boundary nodes of a [`HexMesh`], three
//! components per node, in the order of the system's [`DofMap`].

use std::io::{Read, Write};

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh_fem::{FemSystem, HexMesh};
use crate::recon_norms::SpectralTransform;

/// How eigenvalues of the boundary pencil enter the fractional norms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScaling {
    /// Eigenvalues made dimensionless by `diam(∂Ω)²`.
    #[default]
    Normalized,
    /// Raw eigenvalues; breaks length covariance (used as an injected fault).
    Broken,
}

/// Scalar boundary trace space: face mass and surface-gradient matrices of
/// the bilinear boundary quads, with the generalized eigenpairs of the
/// pencil.
#[derive(Clone, Debug)]
pub struct BoundarySpace {
    mesh_id: String,
    boundary_nodes: Vec<usize>,
    mass: Mat<f64>,
    stiffness: Mat<f64>,
    spectral: SpectralTransform,
    diam: f64,
    rho0: f64,
    scaling: NormScaling,
}

fn mass_1d(d: f64) -> [[f64; 2]; 2] {
    [[d / 3.0, d / 6.0], [d / 6.0, d / 3.0]]
}

fn stiff_1d(d: f64) -> [[f64; 2]; 2] {
    [[1.0 / d, -1.0 / d], [-1.0 / d, 1.0 / d]]
}

impl BoundarySpace {
    pub fn new(mesh: &HexMesh, rho0: f64, scaling: NormScaling) -> Result<Self> {
        if !(rho0 > 0.0) {
            return Err(Error::input("rho0 must be positive"));
        }
        let boundary_nodes = mesh.boundary_nodes();
        let nb = boundary_nodes.len();
        let mut local = vec![usize::MAX; mesh.n_nodes()];
        for (k, &n) in boundary_nodes.iter().enumerate() {
            local[n] = k;
        }
        let mut mass = Mat::<f64>::zeros(nb, nb);
        let mut stiffness = Mat::<f64>::zeros(nb, nb);
        let dims = mesh.dims();
        for normal in 0..3 {
            let (a, b) = ((normal + 1) % 3, (normal + 2) % 3);
            let (axa, axb) = (mesh.axis(a), mesh.axis(b));
            for side in [0, dims[normal]] {
                for ia in 0..dims[a] {
                    for ib in 0..dims[b] {
                        let (da, db) = (axa[ia + 1] - axa[ia], axb[ib + 1] - axb[ib]);
                        let (ma, mb, ka, kb) = (mass_1d(da), mass_1d(db), stiff_1d(da), stiff_1d(db));
                        let mut ids = [0usize; 4];
                        for (q, id) in ids.iter_mut().enumerate() {
                            let mut ijk = [0usize; 3];
                            ijk[normal] = side;
                            ijk[a] = ia + (q & 1);
                            ijk[b] = ib + (q >> 1);
                            *id = local[mesh.node_index(ijk[0], ijk[1], ijk[2])];
                        }
                        for p in 0..4 {
                            for q in 0..4 {
                                let (pa, pb, qa, qb) = (p & 1, p >> 1, q & 1, q >> 1);
                                mass[(ids[p], ids[q])] += ma[pa][qa] * mb[pb][qb];
                                stiffness[(ids[p], ids[q])] += ka[pa][qa] * mb[pb][qb] + ma[pa][qa] * kb[pb][qb];
                            }
                        }
                    }
                }
            }
        }
        let diam = (mesh.hi() - mesh.lo()).norm();
        let spectral = SpectralTransform::new(stiffness.as_ref(), mass.as_ref(), 1.0 / (diam * diam))?;
        Ok(Self {
            mesh_id: mesh.id().to_string(),
            boundary_nodes,
            mass,
            stiffness,
            spectral,
            diam,
            rho0,
            scaling,
        })
    }

    pub fn mesh_id(&self) -> &str {
        &self.mesh_id
    }

    pub fn n_nodes(&self) -> usize {
        self.boundary_nodes.len()
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn mass(&self) -> MatRef<'_, f64> {
        self.mass.as_ref()
    }

    pub fn stiffness(&self) -> MatRef<'_, f64> {
        self.stiffness.as_ref()
    }

    pub fn spectral(&self) -> &SpectralTransform {
        &self.spectral
    }

    pub fn diam(&self) -> f64 {
        self.diam
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn scaling(&self) -> NormScaling {
        self.scaling
    }

    pub fn with_rho0(&self, rho0: f64) -> Result<Self> {
        if !(rho0 > 0.0) {
            return Err(Error::input("rho0 must be positive"));
        }
        Ok(Self { rho0, ..self.clone() })
    }

    pub fn with_scaling(&self, scaling: NormScaling) -> Self {
        Self { scaling, ..self.clone() }
    }

    /// Eigenvalues as used by the fractional norms.
    pub fn kappa(&self) -> Vec<f64> {
        let s = match self.scaling {
            NormScaling::Normalized => self.diam * self.diam,
            NormScaling::Broken => 1.0,
        };
        self.spectral.eigenvalues().iter().map(|l| s * l).collect()
    }

    /// Squared `H^{1/2}` norm of vector boundary data (node-major).
    pub fn h12_norm_sq(&self, f: &[f64]) -> Result<f64> {
        let nb = self.n_nodes();
        if f.len() != 3 * nb {
            return Err(Error::MeshMismatch(format!("boundary data has {} entries, expected {}", f.len(), 3 * nb)));
        }
        let kappa = self.kappa();
        let v = self.spectral.vectors();
        let mut total = 0.0;
        for i in 0..3 {
            let fi: Vec<f64> = (0..nb).map(|k| f[3 * k + i]).collect();
            let mf: Vec<f64> = (0..nb).map(|r| (0..nb).map(|c| self.mass[(r, c)] * fi[c]).sum()).collect();
            for k in 0..nb {
                let c: f64 = (0..nb).map(|r| v[(r, k)] * mf[r]).sum();
                total += kappa[k].sqrt() * c * c;
            }
        }
        Ok(total)
    }

    /// `V diag(κ^{-1/4})`: maps unit coefficient vectors to unit `H^{1/2}`
    /// boundary functions.
    fn weighted_basis(&self) -> Mat<f64> {
        let kappa = self.kappa();
        let v = self.spectral.vectors();
        Mat::from_fn(v.nrows(), v.ncols(), |r, k| v[(r, k)] * kappa[k].powf(-0.25))
    }
}

/// Dense DtN matrix with the mesh and tensor it was computed for.
#[derive(Clone, Debug)]
pub struct DtnMatrix {
    pub matrix: Mat<f64>,
    pub mesh_id: String,
    pub tensor_id: String,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    format: String,
    rows: usize,
    cols: usize,
    mesh_id: String,
    tensor_id: String,
}

const BINARY_FORMAT: &str = "dtn-f64-le-rowmajor";

impl DtnMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `‖Λ − Λᵀ‖_F / ‖Λ‖_F`.
    pub fn symmetry_defect(&self) -> f64 {
        symmetry_defect(self.matrix.as_ref())
    }

    /// `Λ₁ − Λ₂`; both must come from the same mesh.
    pub fn difference(&self, other: &DtnMatrix) -> Result<Mat<f64>> {
        if self.mesh_id != other.mesh_id || self.dim() != other.dim() {
            return Err(Error::MeshMismatch(format!(
                "DtN matrices on meshes {} and {}",
                self.mesh_id, other.mesh_id
            )));
        }
        Ok(&self.matrix - &other.matrix)
    }

    /// `Λ f`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(Error::MeshMismatch(format!("data has {} entries, DtN has {}", f.len(), self.dim())));
        }
        let n = self.dim();
        Ok((0..n).map(|r| (0..n).map(|c| self.matrix[(r, c)] * f[c]).sum()).collect())
    }

    /// Length-prefixed JSON header followed by row-major little-endian f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let header = serde_json::to_vec(&BinaryHeader {
            format: BINARY_FORMAT.to_string(),
            rows: self.matrix.nrows(),
            cols: self.matrix.ncols(),
            mesh_id: self.mesh_id.clone(),
            tensor_id: self.tensor_id.clone(),
        })?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * self.matrix.ncols());
        for r in 0..self.matrix.nrows() {
            buf.clear();
            for c in 0..self.matrix.ncols() {
                buf.extend_from_slice(&self.matrix[(r, c)].to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 20 {
            return Err(Error::input("DtN header length is implausible"));
        }
        let mut header = vec![0u8; len];
        input.read_exact(&mut header)?;
        let h: BinaryHeader = serde_json::from_slice(&header)?;
        if h.format != BINARY_FORMAT {
            return Err(Error::input(format!("unknown DtN container format {:?}", h.format)));
        }
        let mut bytes = vec![0u8; 8 * h.rows * h.cols];
        input.read_exact(&mut bytes)?;
        let matrix = Mat::from_fn(h.rows, h.cols, |r, c| {
            let p = 8 * (r * h.cols + c);
            f64::from_le_bytes(bytes[p..p + 8].try_into().expect("8 bytes"))
        });
        Ok(Self {
            matrix,
            mesh_id: h.mesh_id,
            tensor_id: h.tensor_id,
        })
    }
}

pub fn symmetry_defect(m: MatRef<'_, f64>) -> f64 {
    let n = m.nrows();
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..n {
        for r in 0..n {
            let d = m[(r, c)] - m[(c, r)];
            num += d * d;
            den += m[(r, c)] * m[(r, c)];
        }
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

fn check_mesh(system: &FemSystem, space: &BoundarySpace) -> Result<()> {
    if system.mesh().id() != space.mesh_id() {
        return Err(Error::MeshMismatch(format!(
            "system mesh {} but boundary space mesh {}",
            system.mesh().id(),
            space.mesh_id()
        )));
    }
    Ok(())
}

/// `Λ = K_bb − K_bi K_ii⁻¹ K_ib`, column blocks solved against the cached
/// factorization. Entry `(i, j)` is `a(u_j, φ_i)`.
pub fn build_dtn(system: &FemSystem, space: &BoundarySpace) -> Result<DtnMatrix> {
    check_mesh(system, space)?;
    let kib = system.coupling_block();
    let kbb = system.boundary_block();
    let (ni, nb) = (kib.nrows, kib.ncols);
    let mut out = Mat::<f64>::zeros(nb, nb);
    const CHUNK: usize = 96;
    let mut start = 0;
    while start < nb {
        let w = CHUNK.min(nb - start);
        let mut x = Mat::<f64>::zeros(ni, w);
        for c in 0..w {
            let col = start + c;
            for p in kib.col_ptr[col]..kib.col_ptr[col + 1] {
                x[(kib.row_idx[p], c)] = kib.vals[p];
            }
        }
        system.solve_interior_in_place(x.as_mut())?;
        for c in 0..w {
            let col = start + c;
            for p in kbb.col_ptr[col]..kbb.col_ptr[col + 1] {
                out[(kbb.row_idx[p], col)] += kbb.vals[p];
            }
            // −K_bi X = −(K_ib)ᵀ X
            for r in 0..nb {
                let mut s = 0.0;
                for p in kib.col_ptr[r]..kib.col_ptr[r + 1] {
                    s += kib.vals[p] * x[(kib.row_idx[p], c)];
                }
                out[(r, col)] -= s;
            }
        }
        start += w;
    }
    Ok(DtnMatrix {
        matrix: out,
        mesh_id: system.mesh().id().to_string(),
        tensor_id: system.tensor_id(),
    })
}

/// `Λ f` through one forward solve, without forming the matrix.
pub fn dtn_apply(system: &FemSystem, f: &[f64]) -> Result<Vec<f64>> {
    let u = system.solve_dirichlet(f)?;
    system.boundary_reaction(&u)
}

/// Discrete rigid motions restricted to the boundary nodes.
pub fn boundary_rigid_motions(system: &FemSystem) -> Vec<Vec<f64>> {
    crate::mesh_fem::rigid_motions()
        .iter()
        .map(|r| system.boundary_data(|x| r(x)))
        .collect()
}

/// Raw and `ρ₀`-scaled operator norm of a DtN difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Epsilon {
    pub raw: f64,
    pub scaled: f64,
}

/// Largest `⟨Δf, g⟩ / (‖f‖_{1/2} ‖g‖_{1/2})`; `raw` is the norm and
/// `scaled = ρ₀ · raw`.
pub fn operator_norm_h12(space: &BoundarySpace, delta: MatRef<'_, f64>) -> Result<Epsilon> {
    let nb = space.n_nodes();
    if delta.nrows() != 3 * nb || delta.ncols() != 3 * nb {
        return Err(Error::MeshMismatch(format!(
            "difference is {}×{}, boundary space needs {}",
            delta.nrows(),
            delta.ncols(),
            3 * nb
        )));
    }
    let defect = symmetry_defect(delta);
    if defect > 1e-8 {
        return Err(Error::input(format!("difference is not symmetric (relative defect {defect:.3e})")));
    }
    if (0..3 * nb).all(|c| (0..3 * nb).all(|r| delta[(r, c)] == 0.0)) {
        return Ok(Epsilon { raw: 0.0, scaled: 0.0 });
    }
    let w = space.weighted_basis();
    // Component blocks B_ij = Wᵀ Δ_ij W.
    let mut b = Mat::<f64>::zeros(3 * nb, 3 * nb);
    for i in 0..3 {
        for j in 0..3 {
            let dij = Mat::from_fn(nb, nb, |r, c| {
                0.5 * (delta[(3 * r + i, 3 * c + j)] + delta[(3 * c + j, 3 * r + i)])
            });
            let bij = w.transpose() * &dij * &w;
            b.as_mut().submatrix_mut(i * nb, j * nb, nb, nb).copy_from(&bij);
        }
    }
    let eig = b
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Solver(format!("eigenvalue computation failed: {e:?}")))?;
    let raw = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Epsilon {
        raw,
        scaled: space.rho0() * raw,
    })
}

/// Terms of Alessandrini's identity for one data pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlessandriniTerms {
    /// `∫ C¹ ∇u₁·∇u₂`
    pub energy1: f64,
    /// `∫ C² ∇u₁·∇u₂`
    pub energy2: f64,
    /// `⟨(Λ₁ − Λ₂) f₂, f₁⟩`
    pub boundary: f64,
    pub residual: f64,
}

/// Relative defect of `∫(C¹ − C²)∇u₁·∇u₂ = ⟨(Λ₁ − Λ₂)f₂, f₁⟩`, where `u_k`
/// solves problem `k` with data `f_k`, relative to the larger energy term.
pub fn alessandrini_residual(sys1: &FemSystem, sys2: &FemSystem, f1: &[f64], f2: &[f64]) -> Result<AlessandriniTerms> {
    if sys1.mesh().id() != sys2.mesh().id() {
        return Err(Error::MeshMismatch(format!(
            "systems on meshes {} and {}",
            sys1.mesh().id(),
            sys2.mesh().id()
        )));
    }
    let u1 = sys1.solve_dirichlet(f1)?;
    let u2 = sys2.solve_dirichlet(f2)?;
    let energy1 = sys1.energy_inner_product(&u1, &u2, None)?;
    let energy2 = sys2.energy_inner_product(&u1, &u2, None)?;
    let l1f2 = dtn_apply(sys1, f2)?;
    let l2f2 = sys2.boundary_reaction(&u2)?;
    let boundary = crate::mesh_fem::pairwise_sum(
        &f1.iter()
            .zip(l1f2.iter().zip(&l2f2))
            .map(|(f, (a, b))| f * (a - b))
            .collect::<Vec<_>>(),
    );
    let diff = (energy1 - energy2) - boundary;
    let scale = energy1.abs().max(energy2.abs());
    let residual = if scale > 0.0 { diff.abs() / scale } else { diff.abs() };
    Ok(AlessandriniTerms {
        energy1,
        energy2,
        boundary,
        residual,
    })
}

#[cfg(test)]
mod tests;
