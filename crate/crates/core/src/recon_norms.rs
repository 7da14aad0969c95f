//! Small numerical kernels shared by the experiment modules: fractional
//! spectral transforms of a symmetric pencil, log-log regression,
//! Richardson extrapolation in `1/L` and plateau detection.

use faer::{Mat, MatRef, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generalized eigenpairs of a symmetric pencil `(A, M)` with `M` SPD.
///
/// Eigenvectors are `M`-orthonormal (`Vᵀ M V = I`), eigenvalues ascending
/// and floored at `floor`.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    eigenvalues: Vec<f64>,
    raw_eigenvalues: Vec<f64>,
    vectors: Mat<f64>,
    mass: Mat<f64>,
    floor: f64,
}

impl SpectralTransform {
    pub fn new(a: MatRef<'_, f64>, m: MatRef<'_, f64>, floor: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || m.nrows() != n || m.ncols() != n {
            return Err(Error::input("pencil matrices must be square and of equal size"));
        }
        if !(floor > 0.0) {
            return Err(Error::input("eigenvalue floor must be positive"));
        }
        let llt = m
            .llt(Side::Lower)
            .map_err(|e| Error::Solver(format!("mass matrix is not SPD: {e:?}")))?;
        let l = llt.L();
        // C = L⁻¹ A L⁻ᵀ
        let mut c = a.to_owned();
        l.solve_lower_triangular_in_place(c.as_mut());
        let mut ct = c.transpose().to_owned();
        l.solve_lower_triangular_in_place(ct.as_mut());
        let c = Mat::from_fn(n, n, |i, j| 0.5 * (ct[(i, j)] + ct[(j, i)]));
        let evd = c
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Solver(format!("eigendecomposition failed: {e:?}")))?;
        let raw: Vec<f64> = (0..n).map(|k| evd.S()[k]).collect();
        // V = L⁻ᵀ W
        let mut v = evd.U().to_owned();
        l.transpose().solve_upper_triangular_in_place(v.as_mut());
        Ok(Self {
            eigenvalues: raw.iter().map(|&x| x.max(floor)).collect(),
            raw_eigenvalues: raw,
            vectors: v,
            mass: m.to_owned(),
            floor,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Floored eigenvalues, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvalues before flooring.
    pub fn raw_eigenvalues(&self) -> &[f64] {
        &self.raw_eigenvalues
    }

    pub fn vectors(&self) -> MatRef<'_, f64> {
        self.vectors.as_ref()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Modal coefficients `Vᵀ M x` of a primal vector.
    pub fn coefficients(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mx: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.mass[(i, j)] * x[j]).sum()).collect();
        (0..n).map(|k| (0..n).map(|i| self.vectors[(i, k)] * mx[i]).sum()).collect()
    }

    /// `T_p x = V Λ^p Vᵀ M x`.
    pub fn apply(&self, p: f64, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::input("vector length does not match the pencil"));
        }
        let c = self.coefficients(x);
        let n = self.dim();
        let scaled: Vec<f64> = c.iter().zip(&self.eigenvalues).map(|(c, l)| c * l.powf(p)).collect();
        Ok((0..n).map(|i| (0..n).map(|k| self.vectors[(i, k)] * scaled[k]).sum()).collect())
    }

    /// `Σ λ_k^s c_k²` with `c = Vᵀ M x`: the squared discrete `H^{s/2}` norm.
    pub fn norm_sq(&self, s: f64, x: &[f64]) -> f64 {
        self.coefficients(x)
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, l)| l.powf(s) * c * c)
            .sum()
    }
}

/// Least-squares line through `(log x, log y)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Residuals in log space for the included points, in input order.
    pub residuals: Vec<f64>,
    pub excluded: Vec<usize>,
}

/// Ordinary least squares of `y = a + b x`, returning `(b, a, r², residuals)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64, Vec<f64>)> {
    if x.len() != y.len() {
        return Err(Error::input("fit inputs have different lengths"));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {n}")));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(xv, yv)| yv - (a + b * xv)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok((b, a, r2, residuals))
}

/// Log-log least squares, skipping the indices in `exclusions`.
pub fn loglog_fit(x: &[f64], y: &[f64], exclusions: &[usize]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::input(format!("x has {} values, y has {}", x.len(), y.len())));
    }
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for i in 0..x.len() {
        if exclusions.contains(&i) {
            continue;
        }
        if !(x[i] > 0.0) || !(y[i] > 0.0) {
            return Err(Error::input(format!(
                "nonpositive value at index {i} (x = {}, y = {})",
                x[i], y[i]
            )));
        }
        lx.push(x[i].ln());
        ly.push(y[i].ln());
    }
    if lx.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points after exclusions, got {}", lx.len())));
    }
    let (slope, intercept, r2, residuals) = linear_fit(&lx, &ly)?;
    let mut excluded: Vec<usize> = exclusions.iter().copied().filter(|&i| i < x.len()).collect();
    excluded.sort_unstable();
    excluded.dedup();
    Ok(FitResult {
        slope,
        intercept,
        r2,
        residuals,
        excluded,
    })
}

/// Extrapolated value and error estimate under `v(L) = v∞ + c/L`.
pub fn richardson(l1: f64, v1: f64, l2: f64, v2: f64) -> Result<(f64, f64)> {
    if !(l2 > l1) || !(l1 > 0.0) {
        return Err(Error::input(format!("Richardson needs 0 < L1 < L2, got {l1}, {l2}")));
    }
    if l2 / l1 < 1.5 {
        return Err(Error::input(format!("Richardson needs L2/L1 ≥ 1.5, got {}", l2 / l1)));
    }
    let v = (l2 * v2 - l1 * v1) / (l2 - l1);
    Ok((v, (v2 - v).abs()))
}

/// Elementwise [`richardson`] on equally sized slices.
pub fn richardson_slice(l1: f64, v1: &[f64], l2: f64, v2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if v1.len() != v2.len() {
        return Err(Error::input("Richardson inputs have different lengths"));
    }
    let mut out = Vec::with_capacity(v1.len());
    let mut err = Vec::with_capacity(v1.len());
    for (a, b) in v1.iter().zip(v2) {
        let (v, e) = richardson(l1, *a, l2, *b)?;
        out.push(v);
        err.push(e);
    }
    Ok((out, err))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauOptions {
    /// Maximum `(max − min)/median` over the suffix.
    pub rel_variation: f64,
    pub min_len: usize,
}

impl Default for PlateauOptions {
    fn default() -> Self {
        Self {
            rel_variation: 0.25,
            min_len: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Plateau {
    /// Median of the product over the plateau.
    pub value: f64,
    /// Index of the first point of the plateau.
    pub start: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Longest suffix of `p` (indexed like the descending `h`) with relative
/// variation within the threshold and a positive median.
pub fn plateau_detect(h: &[f64], p: &[f64], opts: PlateauOptions) -> Result<Option<Plateau>> {
    if h.len() != p.len() {
        return Err(Error::input(format!("h has {} values, p has {}", h.len(), p.len())));
    }
    if h.len() < 4 {
        return Err(Error::input(format!("plateau detection needs at least 4 points, got {}", h.len())));
    }
    let n = p.len();
    let min_len = opts.min_len.max(1);
    for start in 0..n {
        if n - start < min_len {
            break;
        }
        let tail = &p[start..];
        if tail.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let med = median(tail);
        if !(med > 0.0) {
            continue;
        }
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if (hi - lo) / med <= opts.rel_variation {
            return Ok(Some(Plateau { value: med, start }));
        }
    }
    Ok(None)
}
