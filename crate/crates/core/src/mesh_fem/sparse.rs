//! Compressed sparse column storage with the structured 27-point node
//! stencil of a hexahedral mesh.

use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};

use super::mesh::HexMesh;

/// Column-compressed matrix with sorted row indices.
#[derive(Clone, Debug, Default)]
pub struct Csc {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csc {
    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Position of entry `(r, c)` in the value array.
    #[inline]
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let (s, e) = (self.col_ptr[c], self.col_ptr[c + 1]);
        self.row_idx[s..e].binary_search(&r).ok().map(|p| s + p)
    }

    /// `y += A x`.
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.vals[p] * xc;
            }
        }
    }

    /// `y += Aᵀ x`.
    pub fn mul_add_transpose(&self, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let mut s = 0.0;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                s += self.vals[p] * x[self.row_idx[p]];
            }
            y[c] += s;
        }
    }

    /// `y += A x` for a symmetric matrix of which only the lower triangle is
    /// stored.
    pub fn sym_lower_mul_add(&self, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let xc = x[c];
            let mut s = 0.0;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = self.vals[p];
                y[r] += v * xc;
                if r != c {
                    s += v * x[r];
                }
            }
            y[c] += s;
        }
    }

    pub fn as_faer(&self) -> SparseColMatRef<'_, usize, f64> {
        let sym = SymbolicSparseColMatRef::new_checked(self.nrows, self.ncols, &self.col_ptr, None, &self.row_idx);
        SparseColMatRef::new(sym, &self.vals)
    }
}

/// Degree-of-freedom numbering: interior nodes and boundary nodes are
/// numbered separately, three components per node, node-major.
#[derive(Clone, Debug)]
pub struct DofMap {
    /// Interior index of each node, `usize::MAX` on the boundary.
    pub interior_of: Vec<usize>,
    /// Boundary index of each node, `usize::MAX` in the interior.
    pub boundary_of: Vec<usize>,
    pub interior_nodes: Vec<usize>,
    pub boundary_nodes: Vec<usize>,
}

impl DofMap {
    pub fn new(mesh: &HexMesh) -> Self {
        let n = mesh.n_nodes();
        let mut interior_of = vec![usize::MAX; n];
        let mut boundary_of = vec![usize::MAX; n];
        let mut interior_nodes = Vec::new();
        let mut boundary_nodes = Vec::new();
        for id in 0..n {
            if mesh.is_boundary_node(id) {
                boundary_of[id] = boundary_nodes.len();
                boundary_nodes.push(id);
            } else {
                interior_of[id] = interior_nodes.len();
                interior_nodes.push(id);
            }
        }
        Self {
            interior_of,
            boundary_of,
            interior_nodes,
            boundary_nodes,
        }
    }

    pub fn n_interior_dofs(&self) -> usize {
        3 * self.interior_nodes.len()
    }

    pub fn n_boundary_dofs(&self) -> usize {
        3 * self.boundary_nodes.len()
    }
}

/// Neighbour nodes (including the node itself) in increasing id order.
fn stencil(mesh: &HexMesh, id: usize, out: &mut Vec<usize>) {
    out.clear();
    let [i, j, k] = mesh.node_ijk(id);
    let [ex, ey, ez] = mesh.dims();
    let range = |c: usize, m: usize| c.saturating_sub(1)..=(c + 1).min(m);
    for kk in range(k, ez) {
        for jj in range(j, ey) {
            for ii in range(i, ex) {
                out.push(mesh.node_index(ii, jj, kk));
            }
        }
    }
}

/// Sparsity patterns of the interior block (lower triangle), the
/// interior–boundary coupling (interior rows, boundary columns) and the
/// boundary block (full).
pub fn patterns(mesh: &HexMesh, dofs: &DofMap) -> (Csc, Csc, Csc) {
    let ni = dofs.n_interior_dofs();
    let nb = dofs.n_boundary_dofs();
    let mut kii = Csc {
        nrows: ni,
        ncols: ni,
        col_ptr: vec![0],
        ..Default::default()
    };
    let mut kib = Csc {
        nrows: ni,
        ncols: nb,
        col_ptr: vec![0],
        ..Default::default()
    };
    let mut kbb = Csc {
        nrows: nb,
        ncols: nb,
        col_ptr: vec![0],
        ..Default::default()
    };
    let mut nb_nodes = Vec::with_capacity(27);
    for &node in &dofs.interior_nodes {
        stencil(mesh, node, &mut nb_nodes);
        let col_node = dofs.interior_of[node];
        for c in 0..3 {
            let col = 3 * col_node + c;
            for &m in &nb_nodes {
                let r = dofs.interior_of[m];
                if r == usize::MAX {
                    continue;
                }
                for rc in 0..3 {
                    let row = 3 * r + rc;
                    if row >= col {
                        kii.row_idx.push(row);
                    }
                }
            }
            kii.col_ptr.push(kii.row_idx.len());
        }
    }
    for &node in &dofs.boundary_nodes {
        stencil(mesh, node, &mut nb_nodes);
        for _c in 0..3 {
            for &m in &nb_nodes {
                let r = dofs.interior_of[m];
                if r != usize::MAX {
                    for rc in 0..3 {
                        kib.row_idx.push(3 * r + rc);
                    }
                }
            }
            kib.col_ptr.push(kib.row_idx.len());
            for &m in &nb_nodes {
                let r = dofs.boundary_of[m];
                if r != usize::MAX {
                    for rc in 0..3 {
                        kbb.row_idx.push(3 * r + rc);
                    }
                }
            }
            kbb.col_ptr.push(kbb.row_idx.len());
        }
    }
    kii.vals = vec![0.0; kii.row_idx.len()];
    kib.vals = vec![0.0; kib.row_idx.len()];
    kbb.vals = vec![0.0; kbb.row_idx.len()];
    (kii, kib, kbb)
}
