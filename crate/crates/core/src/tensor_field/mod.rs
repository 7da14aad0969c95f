//! Isotropic elasticity tensors, spatially varying Lamé fields and the
//! piecewise composites `C + (C^D - C) χ_D`.

pub mod expr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DomainSpec, Region};
use crate::scalar::Real;

pub use expr::Expr;

/// Constant Lamé tensor `C_ijkl = λ δ_ij δ_kl + μ (δ_ki δ_lj + δ_li δ_kj)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropicTensor<T = f64> {
    pub lambda: T,
    pub mu: T,
}

impl<T: Real> IsotropicTensor<T> {
    pub fn new(lambda: T, mu: T) -> Self {
        Self { lambda, mu }
    }

    /// `C A = λ tr(A) I + 2μ sym(A)`.
    pub fn apply(&self, a: &Matrix3<T>) -> Matrix3<T> {
        apply_tensor(self, a)
    }

    /// Cartesian component `C_ijkl`.
    pub fn component(&self, i: usize, j: usize, k: usize, l: usize) -> T {
        let d = |a: usize, b: usize| if a == b { T::one() } else { T::zero() };
        self.lambda * d(i, j) * d(k, l) + self.mu * (d(k, i) * d(l, j) + d(l, i) * d(k, j))
    }

    /// Bilinear form `C A · B`.
    pub fn energy(&self, a: &Matrix3<T>, b: &Matrix3<T>) -> T {
        crate::scalar::contract(&self.apply(a), b)
    }

    pub fn poisson_ratio(&self) -> T {
        self.lambda / (T::lit(2.0) * (self.lambda + self.mu))
    }

    pub fn is_strongly_convex(&self) -> bool {
        self.mu > T::zero() && T::lit(2.0) * self.mu + T::lit(3.0) * self.lambda > T::zero()
    }

    pub fn lerp(&self, other: &Self, t: T) -> Self {
        Self {
            lambda: self.lambda + t * (other.lambda - self.lambda),
            mu: self.mu + t * (other.mu - self.mu),
        }
    }

    pub fn cast<U: Real>(&self) -> IsotropicTensor<U> {
        IsotropicTensor {
            lambda: U::lit(self.lambda.to_f64_lossy()),
            mu: U::lit(self.mu.to_f64_lossy()),
        }
    }
}

/// Applies an isotropic tensor to a 3×3 matrix.
pub fn apply_tensor<T: Real>(c: &IsotropicTensor<T>, a: &Matrix3<T>) -> Matrix3<T> {
    let tr = a.trace();
    let two_mu = T::lit(2.0) * c.mu;
    let half = T::lit(0.5);
    Matrix3::from_fn(|i, j| {
        let sym = half * (a[(i, j)] + a[(j, i)]);
        let diag = if i == j { c.lambda * tr } else { T::zero() };
        diag + two_mu * sym
    })
}

/// Scalar coefficient field on R³.
///
/// Closed-form expressions carry their regularity by construction; the
/// layered variant is the piecewise-constant fallback.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalarField {
    Constant(f64),
    Expr(Expr),
    /// Piecewise constant in slabs along `axis`: `values[i]` on
    /// `breaks[i-1] <= x_axis < breaks[i]`.
    Layered {
        axis: usize,
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
}

impl ScalarField {
    pub fn parse(src: &str) -> Result<Self> {
        let e = Expr::parse(src)?;
        Ok(match e.as_constant() {
            Some(v) => ScalarField::Constant(v),
            None => ScalarField::Expr(e),
        })
    }

    pub fn eval<T: Real>(&self, x: &Vector3<T>) -> T {
        match self {
            ScalarField::Constant(v) => T::lit(*v),
            ScalarField::Expr(e) => e.eval(x),
            ScalarField::Layered { axis, breaks, values } => {
                let t = x[*axis].to_f64_lossy();
                let idx = breaks.partition_point(|b| *b <= t);
                T::lit(values[idx.min(values.len() - 1)])
            }
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            ScalarField::Constant(v) => Some(*v),
            _ => None,
        }
    }

    /// Canonical text used for hashing and manifests.
    pub fn describe(&self) -> String {
        match self {
            ScalarField::Constant(v) => format!("{v:?}"),
            ScalarField::Expr(e) => e.to_string(),
            ScalarField::Layered { axis, breaks, values } => {
                format!("layered(axis={axis},breaks={breaks:?},values={values:?})")
            }
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(untagged)]
enum ScalarFieldRepr {
    Num(f64),
    Text(String),
    Layered {
        axis: usize,
        breaks: Vec<f64>,
        values: Vec<f64>,
    },
}

impl Serialize for ScalarField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            ScalarField::Constant(v) => ScalarFieldRepr::Num(*v),
            ScalarField::Expr(e) => ScalarFieldRepr::Text(e.to_string()),
            ScalarField::Layered { axis, breaks, values } => ScalarFieldRepr::Layered {
                axis: *axis,
                breaks: breaks.clone(),
                values: values.clone(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ScalarField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match ScalarFieldRepr::deserialize(d)? {
            ScalarFieldRepr::Num(v) => Ok(ScalarField::Constant(v)),
            ScalarFieldRepr::Text(t) => ScalarField::parse(&t).map_err(D::Error::custom),
            ScalarFieldRepr::Layered { axis, breaks, values } => {
                if axis > 2 || values.len() != breaks.len() + 1 {
                    return Err(D::Error::custom(
                        "layered field needs axis < 3 and values.len() == breaks.len() + 1",
                    ));
                }
                Ok(ScalarField::Layered { axis, breaks, values })
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regularity {
    C11,
    Ctau(f64),
}

/// Spatially varying Lamé moduli.
#[derive(Clone, Debug, PartialEq)]
pub struct LameField {
    pub lambda: ScalarField,
    pub mu: ScalarField,
    pub regularity: Regularity,
    /// Norm bound `M`, recorded but not verified.
    pub bound_m: f64,
}

impl LameField {
    pub fn constant(lambda: f64, mu: f64) -> Self {
        Self {
            lambda: ScalarField::Constant(lambda),
            mu: ScalarField::Constant(mu),
            regularity: Regularity::C11,
            bound_m: 1.0,
        }
    }

    pub fn from_exprs(lambda: &str, mu: &str) -> Result<Self> {
        Ok(Self {
            lambda: ScalarField::parse(lambda)?,
            mu: ScalarField::parse(mu)?,
            regularity: Regularity::C11,
            bound_m: 1.0,
        })
    }

    pub fn with_regularity(mut self, regularity: Regularity, bound_m: f64) -> Self {
        self.regularity = regularity;
        self.bound_m = bound_m;
        self
    }

    pub fn at<T: Real>(&self, x: &Vector3<T>) -> IsotropicTensor<T> {
        IsotropicTensor::new(self.lambda.eval(x), self.mu.eval(x))
    }

    pub fn is_constant(&self) -> bool {
        self.lambda.as_constant().is_some() && self.mu.as_constant().is_some()
    }

    pub fn describe(&self) -> String {
        format!("lambda={};mu={}", self.lambda.describe(), self.mu.describe())
    }
}

/// Constant tensor obtained by evaluating `field` at `x0`.
pub fn freeze_at<T: Real>(field: &LameField, x0: &Vector3<T>) -> IsotropicTensor<T> {
    field.at(x0)
}

/// Thresholds of the strong convexity and upper bound conditions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialBounds {
    pub alpha0: f64,
    pub gamma0: f64,
    pub mu_bar: f64,
    pub lambda_bar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Condition {
    /// `μ ≥ α₀`
    MuLower,
    /// `2μ + 3λ ≥ γ₀`
    Convexity,
    /// `μ ≤ μ̄`
    MuUpper,
    /// `λ ≤ λ̄`
    LambdaUpper,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::MuLower,
        Condition::Convexity,
        Condition::MuUpper,
        Condition::LambdaUpper,
    ];

    /// Signed margin; negative means violated.
    fn margin<T: Real>(self, c: &IsotropicTensor<T>, b: &MaterialBounds) -> T {
        match self {
            Condition::MuLower => c.mu - T::lit(b.alpha0),
            Condition::Convexity => T::lit(2.0) * c.mu + T::lit(3.0) * c.lambda - T::lit(b.gamma0),
            Condition::MuUpper => T::lit(b.mu_bar) - c.mu,
            Condition::LambdaUpper => T::lit(b.lambda_bar) - c.lambda,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation<T = f64> {
    pub condition: Condition,
    pub point: Vector3<T>,
    pub margin: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary<T = f64> {
    pub condition: Condition,
    pub passed: bool,
    pub worst_margin: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialReport<T = f64> {
    pub summaries: Vec<ConditionSummary<T>>,
    pub violations: Vec<Violation<T>>,
}

impl<T: Real> MaterialReport<T> {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn passed_condition(&self, c: Condition) -> bool {
        self.summaries.iter().any(|s| s.condition == c && s.passed)
    }
}

/// Checks the pointwise material conditions on a finite sample.
pub fn validate_material<T: Real>(
    field: &LameField,
    sample_points: &[Vector3<T>],
    bounds: &MaterialBounds,
) -> Result<MaterialReport<T>> {
    if sample_points.is_empty() {
        return Err(Error::input("validate_material needs a nonempty sample set"));
    }
    let mut violations = Vec::new();
    let mut worst = [T::infinity(); 4];
    for x in sample_points {
        let c = field.at(x);
        for (k, cond) in Condition::ALL.iter().enumerate() {
            let m = cond.margin(&c, bounds);
            worst[k] = worst[k].min(m);
            if m < T::zero() {
                violations.push(Violation {
                    condition: *cond,
                    point: *x,
                    margin: m,
                });
            }
        }
    }
    let summaries = Condition::ALL
        .iter()
        .zip(worst)
        .map(|(c, w)| ConditionSummary {
            condition: *c,
            passed: w >= T::zero(),
            worst_margin: w,
        })
        .collect();
    Ok(MaterialReport { summaries, violations })
}

/// `C + (C^D − C) χ_D` with `D` given by `region`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseTensor<T = f64> {
    pub background: LameField,
    pub inclusion: LameField,
    pub region: Region<T>,
}

impl<T: Real> PiecewiseTensor<T> {
    pub fn new(background: LameField, inclusion: LameField, region: Region<T>) -> Self {
        Self {
            background,
            inclusion,
            region,
        }
    }

    /// Background material everywhere.
    pub fn homogeneous(background: LameField) -> Self {
        Self {
            inclusion: background.clone(),
            background,
            region: Region::Empty,
        }
    }

    pub fn at(&self, x: &Vector3<T>) -> IsotropicTensor<T> {
        if self.region.contains(x) {
            self.inclusion.at(x)
        } else {
            self.background.at(x)
        }
    }

    /// Moduli for a volume fraction `frac` of inclusion material at `x`.
    pub fn blended_at(&self, x: &Vector3<T>, frac: T) -> IsotropicTensor<T> {
        if frac <= T::zero() {
            self.background.at(x)
        } else if frac >= T::one() {
            self.inclusion.at(x)
        } else {
            self.background.at(x).lerp(&self.inclusion.at(x), frac)
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "bg[{}]|inc[{}]|{}",
            self.background.describe(),
            self.inclusion.describe(),
            self.region.describe()
        )
    }
}

/// `sqrt((λ − λ^D)² + (μ − μ^D)²)` at a point of the closed domain.
pub fn jump_magnitude<T: Real>(
    composite: &PiecewiseTensor<T>,
    domain: &DomainSpec<T>,
    x: &Vector3<T>,
) -> Result<T> {
    if !domain.contains_closed(x) {
        return Err(Error::Domain(format!("{:?} is outside the closed domain", x.as_slice())));
    }
    let b = composite.background.at(x);
    let d = composite.inclusion.at(x);
    let dl = b.lambda - d.lambda;
    let dm = b.mu - d.mu;
    Ok((dl * dl + dm * dm).sqrt())
}

/// Checks the jump condition `jump ≥ η₀` on sample points, returning the
/// minimum observed jump.
pub fn min_jump<T: Real>(
    composite: &PiecewiseTensor<T>,
    domain: &DomainSpec<T>,
    points: &[Vector3<T>],
) -> Result<T> {
    if points.is_empty() {
        return Err(Error::input("jump check needs a nonempty sample set"));
    }
    points.iter().try_fold(T::infinity(), |acc, x| {
        Ok(acc.min(jump_magnitude(composite, domain, x)?))
    })
}

/// JSON material block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    pub background: LamePair,
    pub inclusion: LamePair,
    pub alpha0: f64,
    pub gamma0: f64,
    pub mu_bar: f64,
    pub lambda_bar: f64,
    pub eta0: f64,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default, rename = "M")]
    pub bound_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LamePair {
    pub lambda: ScalarField,
    pub mu: ScalarField,
}

impl Default for MaterialConfig {
    /// Background λ = μ = 1, inclusion λ = μ = 4, jump √18.
    fn default() -> Self {
        Self {
            background: LamePair {
                lambda: ScalarField::Constant(1.0),
                mu: ScalarField::Constant(1.0),
            },
            inclusion: LamePair {
                lambda: ScalarField::Constant(4.0),
                mu: ScalarField::Constant(4.0),
            },
            alpha0: 0.5,
            gamma0: 0.5,
            mu_bar: 10.0,
            lambda_bar: 10.0,
            eta0: 18f64.sqrt(),
            tau: None,
            bound_m: None,
        }
    }
}

impl MaterialConfig {
    pub fn bounds(&self) -> MaterialBounds {
        MaterialBounds {
            alpha0: self.alpha0,
            gamma0: self.gamma0,
            mu_bar: self.mu_bar,
            lambda_bar: self.lambda_bar,
        }
    }

    pub fn background_field(&self) -> LameField {
        LameField {
            lambda: self.background.lambda.clone(),
            mu: self.background.mu.clone(),
            regularity: Regularity::C11,
            bound_m: self.bound_m.unwrap_or(1.0),
        }
    }

    pub fn inclusion_field(&self) -> LameField {
        LameField {
            lambda: self.inclusion.lambda.clone(),
            mu: self.inclusion.mu.clone(),
            regularity: Regularity::Ctau(self.tau.unwrap_or(0.5)),
            bound_m: self.bound_m.unwrap_or(1.0),
        }
    }

    /// Composite for an arbitrary region.
    pub fn composite<T: Real>(&self, region: Region<T>) -> PiecewiseTensor<T> {
        PiecewiseTensor::new(self.background_field(), self.inclusion_field(), region)
    }

    /// The same material block with the inclusion set equal to the
    /// background (zero jump).
    pub fn without_jump(&self) -> Self {
        Self {
            inclusion: self.background.clone(),
            eta0: 0.0,
            ..self.clone()
        }
    }
}
