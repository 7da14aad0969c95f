use std::io::Write;

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::DomainSpec;

/// Tensor-product hexahedral mesh of a box.
///
/// Nodes are numbered `i + (nx+1)(j + (ny+1)k)`; the local node `a` of an
/// element sits at corner `(a & 1, (a >> 1) & 1, (a >> 2) & 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HexMesh {
    axes: [Vec<f64>; 3],
    id: String,
}

impl HexMesh {
    pub fn from_axes(xs: Vec<f64>, ys: Vec<f64>, zs: Vec<f64>) -> Result<Self> {
        for (k, ax) in [&xs, &ys, &zs].iter().enumerate() {
            if ax.len() < 2 {
                return Err(Error::input(format!("axis {k} needs at least two nodes")));
            }
            if ax.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::input(format!("axis {k} coordinates must increase strictly")));
            }
        }
        let mut hasher = Sha256::new();
        for ax in [&xs, &ys, &zs] {
            hasher.update((ax.len() as u64).to_le_bytes());
            for v in ax.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let id = hex::encode(&hasher.finalize()[..8]);
        Ok(Self {
            axes: [xs, ys, zs],
            id,
        })
    }

    /// `n` elements per axis on the domain box.
    pub fn uniform(domain: &DomainSpec<f64>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("mesh resolution must be positive"));
        }
        let ax = |k: usize| linspace(domain.lo[k], domain.hi[k], n);
        Self::from_axes(ax(0), ax(1), ax(2))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    /// Element counts per axis.
    pub fn dims(&self) -> [usize; 3] {
        [self.axes[0].len() - 1, self.axes[1].len() - 1, self.axes[2].len() - 1]
    }

    pub fn n_nodes(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn n_elements(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn lo(&self) -> Vector3<f64> {
        Vector3::new(self.axes[0][0], self.axes[1][0], self.axes[2][0])
    }

    pub fn hi(&self) -> Vector3<f64> {
        Vector3::new(
            *self.axes[0].last().unwrap(),
            *self.axes[1].last().unwrap(),
            *self.axes[2].last().unwrap(),
        )
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        let nx = self.axes[0].len();
        let ny = self.axes[1].len();
        i + nx * (j + ny * k)
    }

    #[inline]
    pub fn node_ijk(&self, id: usize) -> [usize; 3] {
        let nx = self.axes[0].len();
        let ny = self.axes[1].len();
        [id % nx, (id / nx) % ny, id / (nx * ny)]
    }

    #[inline]
    pub fn node(&self, id: usize) -> Vector3<f64> {
        let [i, j, k] = self.node_ijk(id);
        Vector3::new(self.axes[0][i], self.axes[1][j], self.axes[2][k])
    }

    #[inline]
    pub fn element_index(&self, i: usize, j: usize, k: usize) -> usize {
        let [ex, ey, _] = self.dims();
        i + ex * (j + ey * k)
    }

    #[inline]
    pub fn element_ijk(&self, e: usize) -> [usize; 3] {
        let [ex, ey, _] = self.dims();
        [e % ex, (e / ex) % ey, e / (ex * ey)]
    }

    #[inline]
    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let [i, j, k] = self.element_ijk(e);
        let mut out = [0; 8];
        for (a, slot) in out.iter_mut().enumerate() {
            *slot = self.node_index(i + (a & 1), j + ((a >> 1) & 1), k + ((a >> 2) & 1));
        }
        out
    }

    /// Lower corner and edge lengths of element `e`.
    #[inline]
    pub fn element_box(&self, e: usize) -> (Vector3<f64>, Vector3<f64>) {
        let [i, j, k] = self.element_ijk(e);
        let lo = Vector3::new(self.axes[0][i], self.axes[1][j], self.axes[2][k]);
        let hi = Vector3::new(self.axes[0][i + 1], self.axes[1][j + 1], self.axes[2][k + 1]);
        (lo, hi - lo)
    }

    pub fn element_centroid(&self, e: usize) -> Vector3<f64> {
        let (lo, d) = self.element_box(e);
        lo + d * 0.5
    }

    pub fn is_boundary_node(&self, id: usize) -> bool {
        let [i, j, k] = self.node_ijk(id);
        let [ex, ey, ez] = self.dims();
        i == 0 || j == 0 || k == 0 || i == ex || j == ey || k == ez
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| self.is_boundary_node(n)).collect()
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&n| !self.is_boundary_node(n)).collect()
    }

    /// Element containing `x` and the reference coordinates in `[-1, 1]³`.
    pub fn locate(&self, x: &Vector3<f64>) -> Option<(usize, Vector3<f64>)> {
        let mut ijk = [0usize; 3];
        let mut xi = Vector3::zeros();
        for k in 0..3 {
            let ax = &self.axes[k];
            let last = ax.len() - 1;
            if x[k] < ax[0] || x[k] > ax[last] {
                return None;
            }
            let c = ax.partition_point(|v| *v <= x[k]).clamp(1, last) - 1;
            ijk[k] = c;
            xi[k] = 2.0 * (x[k] - ax[c]) / (ax[c + 1] - ax[c]) - 1.0;
        }
        Some((self.element_index(ijk[0], ijk[1], ijk[2]), xi))
    }

    /// Largest edge of the element containing `x`.
    pub fn local_width(&self, x: &Vector3<f64>) -> Option<f64> {
        self.locate(x).map(|(e, _)| self.element_box(e).1.max())
    }

    /// Edge lengths of the element containing `x`, per axis.
    pub fn local_edges(&self, x: &Vector3<f64>) -> Option<Vector3<f64>> {
        self.locate(x).map(|(e, _)| self.element_box(e).1)
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(0.0, f64::max)
    }

    /// CSV export: `node,x,y,z,ux,uy,uz`.
    pub fn write_solution_csv<W: Write>(&self, u: &[f64], out: W) -> Result<()> {
        if u.len() != 3 * self.n_nodes() {
            return Err(Error::MeshMismatch(format!(
                "field has {} entries, mesh needs {}",
                u.len(),
                3 * self.n_nodes()
            )));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "x", "y", "z", "ux", "uy", "uz"])?;
        for n in 0..self.n_nodes() {
            let p = self.node(n);
            let mut row = vec![n.to_string()];
            row.extend(
                [p.x, p.y, p.z, u[3 * n], u[3 * n + 1], u[3 * n + 2]]
                    .iter()
                    .map(|v| format!("{v:.17e}")),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| if i == n { b } else { a + (b - a) * i as f64 / n as f64 })
        .collect()
}

/// Target spacing `h` on the interval `[a, b]`, growing linearly with the
/// distance to it at rate `growth − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeSource {
    pub a: f64,
    pub b: f64,
    pub h: f64,
}

impl SizeSource {
    pub fn point(x: f64, h: f64) -> Self {
        Self { a: x, b: x, h }
    }
}

/// Graded 1D axis on `[lo, hi]` following the sizing function
/// `min(h_max, min_s (h_s + (growth − 1) dist(x, [a_s, b_s])))`.
///
/// Breakpoints (and source interval ends) are always nodes; stretches of
/// constant target size become exactly uniform.
pub fn graded_axis(
    lo: f64,
    hi: f64,
    sources: &[SizeSource],
    growth: f64,
    h_max: f64,
    breakpoints: &[f64],
) -> Result<Vec<f64>> {
    if !(hi > lo) || !(growth >= 1.0) || !(h_max > 0.0) {
        return Err(Error::input("graded axis needs hi > lo, growth ≥ 1, h_max > 0"));
    }
    if sources.iter().any(|s| !(s.h > 0.0) || s.b < s.a) {
        return Err(Error::input("size sources need h > 0 and a ≤ b"));
    }
    let size = |x: f64| {
        sources.iter().fold(h_max, |m, s| {
            let d = (s.a - x).max(x - s.b).max(0.0);
            m.min(s.h + (growth - 1.0) * d)
        })
    };
    let mut brk: Vec<f64> = vec![lo, hi];
    for s in sources {
        brk.push(s.a);
        brk.push(s.b);
    }
    brk.extend_from_slice(breakpoints);
    brk.retain(|v| *v >= lo && *v <= hi);
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    brk.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (hi - lo));

    let mut out = vec![lo];
    for w in brk.windows(2) {
        let (p, q) = (w[0], w[1]);
        let h_min_here = sources.iter().map(|s| s.h).fold(h_max, f64::min);
        let samples = (((q - p) / h_min_here) * 16.0).ceil().clamp(16.0, 2e6) as usize;
        let mut cum = Vec::with_capacity(samples + 1);
        cum.push(0.0);
        let mut constant = true;
        let h0 = size(p);
        let mut prev = 1.0 / h0;
        for s in 1..=samples {
            let x = p + (q - p) * s as f64 / samples as f64;
            let hx = size(x);
            if (hx - h0).abs() > 1e-12 * h0 {
                constant = false;
            }
            let cur = 1.0 / hx;
            let last = *cum.last().unwrap();
            cum.push(last + 0.5 * (prev + cur) * (q - p) / samples as f64);
            prev = cur;
        }
        let total = *cum.last().unwrap();
        let m = ((total - 1e-9).ceil() as usize).max(1);
        if constant {
            let seg = linspace(p, q, m);
            out.extend_from_slice(&seg[1..]);
            continue;
        }
        // Invert the cumulative cell count.
        let mut s = 0;
        for c in 1..m {
            let target = total * c as f64 / m as f64;
            while cum[s + 1] < target {
                s += 1;
            }
            let f = (target - cum[s]) / (cum[s + 1] - cum[s]);
            out.push(p + (q - p) * (s as f64 + f) / samples as f64);
        }
        out.push(q);
    }
    Ok(out)
}

/// Graded tensor-product box: an optional uniform core, refinement balls
/// and sizes growing geometrically away from both.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxMeshSpec {
    pub lo: Vector3<f64>,
    pub hi: Vector3<f64>,
    /// `(lo, hi, h)` of a region meshed uniformly with spacing `≤ h`.
    pub core: Option<(Vector3<f64>, Vector3<f64>, f64)>,
    /// `(center, radius, h)` refinement balls (applied per axis).
    pub refine: Vec<(Vector3<f64>, f64, f64)>,
    pub growth: f64,
    pub h_max: f64,
    /// Extra node coordinates per axis.
    pub breakpoints: [Vec<f64>; 3],
}

impl BoxMeshSpec {
    pub fn cube(center: Vector3<f64>, half_width: f64, growth: f64, h_max: f64) -> Self {
        Self {
            lo: center.add_scalar(-half_width),
            hi: center.add_scalar(half_width),
            core: None,
            refine: Vec::new(),
            growth,
            h_max,
            breakpoints: Default::default(),
        }
    }

    pub fn with_core(mut self, lo: Vector3<f64>, hi: Vector3<f64>, h: f64) -> Self {
        self.core = Some((lo, hi, h));
        self
    }

    pub fn refine_at(mut self, center: Vector3<f64>, radius: f64, h: f64) -> Self {
        self.refine.push((center, radius, h));
        self
    }

    pub fn with_breakpoint(mut self, axis: usize, x: f64) -> Self {
        self.breakpoints[axis].push(x);
        self
    }

    pub fn build(&self) -> Result<HexMesh> {
        let mut axes: Vec<Vec<f64>> = Vec::with_capacity(3);
        for k in 0..3 {
            let mut sources = Vec::new();
            if let Some((lo, hi, h)) = &self.core {
                sources.push(SizeSource { a: lo[k], b: hi[k], h: *h });
            }
            for (c, r, h) in &self.refine {
                sources.push(SizeSource {
                    a: c[k] - r,
                    b: c[k] + r,
                    h: *h,
                });
            }
            axes.push(graded_axis(
                self.lo[k],
                self.hi[k],
                &sources,
                self.growth,
                self.h_max,
                &self.breakpoints[k],
            )?);
        }
        let zs = axes.pop().unwrap();
        let ys = axes.pop().unwrap();
        let xs = axes.pop().unwrap();
        HexMesh::from_axes(xs, ys, zs)
    }
}
