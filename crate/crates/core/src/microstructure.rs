//! Symmetric-matrix algebra and microstructured elastic densities.
//!
//! Quadratic forms on symmetric 3×3 matrices are stored as 6×6 matrices in
//! the orthonormal basis
//! `{E11, E22, E33, (E12+E21)/√2, (E13+E31)/√2, (E23+E32)/√2}`, so that the
//! coordinate vector of a symmetric matrix has the same Euclidean norm as the
//! matrix has Frobenius norm. Ellipticity bounds of a form are then exactly
//! the extreme eigenvalues of its matrix.

use std::f64::consts::{PI, SQRT_2};
use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// General 3×3 matrix.
pub type Mat3 = Matrix3<f64>;

/// Symmetric 2×2 matrix stored by its three independent entries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub e11: f64,
    pub e22: f64,
    pub e12: f64,
}

impl Sym2 {
    pub const ZERO: Sym2 = Sym2 { e11: 0.0, e22: 0.0, e12: 0.0 };
    pub const IDENTITY: Sym2 = Sym2 { e11: 1.0, e22: 1.0, e12: 0.0 };

    pub const fn new(e11: f64, e22: f64, e12: f64) -> Self {
        Self { e11, e22, e12 }
    }

    /// `E11`.
    pub const fn e11() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    /// `E22`.
    pub const fn e22() -> Self {
        Self::new(0.0, 1.0, 0.0)
    }

    /// `E12 + E21`.
    pub const fn shear() -> Self {
        Self::new(0.0, 0.0, 1.0)
    }

    /// Coordinates `(e11, e22, √2 e12)` in the orthonormal basis.
    pub fn to_vec(self) -> Vector3<f64> {
        Vector3::new(self.e11, self.e22, SQRT_2 * self.e12)
    }

    pub fn from_vec(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2] / SQRT_2)
    }

    pub fn norm_squared(self) -> f64 {
        self.e11 * self.e11 + self.e22 * self.e22 + 2.0 * self.e12 * self.e12
    }

    /// Frobenius norm.
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn trace(self) -> f64 {
        self.e11 + self.e22
    }

    pub fn ddot(self, other: Sym2) -> f64 {
        self.e11 * other.e11 + self.e22 * other.e22 + 2.0 * self.e12 * other.e12
    }

    /// Symmetric part of a general 2×2 matrix given row-wise.
    pub fn sym_of(m: [[f64; 2]; 2]) -> Self {
        Self::new(m[0][0], m[1][1], 0.5 * (m[0][1] + m[1][0]))
    }

    /// `a ⊗ b` symmetrized.
    pub fn sym_outer(a: [f64; 2], b: [f64; 2]) -> Self {
        Self::new(a[0] * b[0], a[1] * b[1], 0.5 * (a[0] * b[1] + a[1] * b[0]))
    }
}

impl Add for Sym2 {
    type Output = Sym2;
    fn add(self, o: Sym2) -> Sym2 {
        Sym2::new(self.e11 + o.e11, self.e22 + o.e22, self.e12 + o.e12)
    }
}

impl Sub for Sym2 {
    type Output = Sym2;
    fn sub(self, o: Sym2) -> Sym2 {
        Sym2::new(self.e11 - o.e11, self.e22 - o.e22, self.e12 - o.e12)
    }
}

impl Neg for Sym2 {
    type Output = Sym2;
    fn neg(self) -> Sym2 {
        Sym2::new(-self.e11, -self.e22, -self.e12)
    }
}

impl Mul<Sym2> for f64 {
    type Output = Sym2;
    fn mul(self, m: Sym2) -> Sym2 {
        Sym2::new(self * m.e11, self * m.e22, self * m.e12)
    }
}

/// Embeds a symmetric 2×2 matrix as the upper-left block of a 3×3 matrix.
pub fn iota(m: Sym2) -> Mat3 {
    Mat3::new(m.e11, m.e12, 0.0, m.e12, m.e22, 0.0, 0.0, 0.0, 0.0)
}

pub fn sym(g: &Mat3) -> Mat3 {
    0.5 * (g + g.transpose())
}

/// Coordinates of `sym G` in the orthonormal basis.
pub fn sym_vec(g: &Mat3) -> Vector6<f64> {
    let s = SQRT_2 * 0.5;
    Vector6::new(
        g[(0, 0)],
        g[(1, 1)],
        g[(2, 2)],
        s * (g[(0, 1)] + g[(1, 0)]),
        s * (g[(0, 2)] + g[(2, 0)]),
        s * (g[(1, 2)] + g[(2, 1)]),
    )
}

/// Inverse of [`sym_vec`] on symmetric matrices.
pub fn sym_unvec(v: &Vector6<f64>) -> Mat3 {
    let s = 1.0 / SQRT_2;
    Mat3::new(
        v[0],
        s * v[3],
        s * v[4],
        s * v[3],
        v[1],
        s * v[5],
        s * v[4],
        s * v[5],
        v[2],
    )
}

/// A quadratic form `q(G) = vec(sym G)ᵀ C vec(sym G)` on 3×3 matrices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticForm {
    c: Matrix6<f64>,
}

impl ElasticForm {
    /// Wraps a symmetric 6×6 matrix; rejects asymmetric or non-finite input.
    pub fn new(c: Matrix6<f64>) -> Result<Self> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(invalid("C", "non-finite entry"));
        }
        let asym = (c - c.transpose()).amax();
        if asym > 1e-12 * c.amax().max(1.0) {
            return Err(invalid("C", format!("not symmetric (|C - Cᵀ| = {asym:e})")));
        }
        Ok(Self { c: 0.5 * (c + c.transpose()) })
    }

    /// `q(G) = 2μ|sym G|² + λ (tr G)²`.
    pub fn isotropic(lambda: f64, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(invalid("mu", format!("must be positive, got {mu}")));
        }
        if !(lambda >= 0.0) {
            return Err(invalid("lambda", format!("must be non-negative, got {lambda}")));
        }
        Ok(Self { c: isotropic_matrix(lambda, mu) })
    }

    pub fn matrix(&self) -> &Matrix6<f64> {
        &self.c
    }

    pub fn eval(&self, g: &Mat3) -> f64 {
        let v = sym_vec(g);
        v.dot(&(self.c * v))
    }

    pub fn eval_vec(&self, v: &Vector6<f64>) -> f64 {
        v.dot(&(self.c * v))
    }

    /// Smallest and largest eigenvalue of the matrix.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.c).eigenvalues;
        (eig.min(), eig.max())
    }

    /// Entries `C_ij`, `i <= j`, row by row (21 values).
    pub fn upper_triangle(&self) -> Vec<f64> {
        upper_triangle(&self.c)
    }

    pub fn from_upper_triangle(entries: &[f64]) -> Result<Self> {
        Ok(Self { c: from_upper_triangle(entries)? })
    }
}

pub(crate) fn isotropic_matrix(lambda: f64, mu: f64) -> Matrix6<f64> {
    let mut c = Matrix6::identity() * (2.0 * mu);
    for i in 0..3 {
        for j in 0..3 {
            c[(i, j)] += lambda;
        }
    }
    c
}

pub fn upper_triangle(m: &Matrix6<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(21);
    for i in 0..6 {
        for j in i..6 {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn from_upper_triangle(entries: &[f64]) -> Result<Matrix6<f64>> {
    if entries.len() != 21 {
        return Err(Error::ShapeMismatch { expected: 21, got: entries.len() });
    }
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            m[(i, j)] = entries[k];
            m[(j, i)] = entries[k];
            k += 1;
        }
    }
    Ok(m)
}

/// `|q(G1) - q(G2)|` together with the bound
/// `β |sym G1 - sym G2| |sym G1 + sym G2|`, β the largest eigenvalue of the form.
pub fn lipschitz_gap(form: &ElasticForm, g1: &Mat3, g2: &Mat3) -> (f64, f64) {
    let gap = (form.eval(g1) - form.eval(g2)).abs();
    let (_, beta) = form.eigen_bounds();
    let s1 = sym(g1);
    let s2 = sym(g2);
    (gap, beta * (s1 - s2).norm() * (s1 + s2).norm())
}

/// How the oscillation length ε depends on the thickness h.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScaleRule {
    /// ε independent of h.
    Fixed { epsilon: f64 },
    /// ε = factor · h.
    Linear { factor: f64 },
    /// ε = factor · h^p.
    Power { p: f64, factor: f64 },
}

impl ScaleRule {
    pub fn epsilon(&self, h: f64) -> f64 {
        match *self {
            ScaleRule::Fixed { epsilon } => epsilon,
            ScaleRule::Linear { factor } => factor * h,
            ScaleRule::Power { p, factor } => factor * h.powf(p),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ScaleRule::Fixed { epsilon } => epsilon > 0.0,
            ScaleRule::Linear { factor } => factor > 0.0,
            ScaleRule::Power { p, factor } => p > 0.0 && factor > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("scale_rule", "lengths and exponents must be positive"))
        }
    }
}

/// Axis-aligned rectangle `[min, max]` in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub const UNIT: Rect = Rect { min: [0.0, 0.0], max: [1.0, 1.0] };

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let eps = 1e-12;
        p[0] >= self.min[0] - eps
            && p[0] <= self.max[0] + eps
            && p[1] >= self.min[1] - eps
            && p[1] <= self.max[1] + eps
    }

    /// Whether the closed disc of radius `r` around `c` lies inside.
    pub fn contains_disc(&self, c: [f64; 2], r: f64) -> bool {
        self.contains([c[0] - r, c[1] - r]) && self.contains([c[0] + r, c[1] + r])
    }
}

/// Isotropic phase parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lame {
    pub lambda: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    ConstantIsotropic(Lame),
    /// Two isotropic phases in layers normal to `e1`, each half a period thick.
    InPlaneLaminate([Lame; 2]),
    /// Two isotropic phases on a checkerboard of period ε.
    Checkerboard([Lame; 2]),
    /// `μ(x) = μ0 (1 + a sin(2π x1/ε) sin(2π x2/ε))`, constant λ.
    SmoothModulated { lambda: f64, mu0: f64, amplitude: f64 },
    /// Shear modulus graded through the thickness:
    /// `μ = μ_bottom + (μ_top - μ_bottom) t`, with `t = x3 + 1/2`, or
    /// `t = |2 x3|` when `symmetric` (mirror-symmetric about the mid-plane).
    X3Graded { lambda: f64, mu_bottom: f64, mu_top: f64, symmetric: bool },
    /// Periodic pixel table over one ε-cell, nearest-cell lookup.
    Table { nx: usize, ny: usize, forms: Vec<ElasticForm> },
}

/// A family `h -> Q^h(x, ·)` of elastic forms over `ω × (-1/2, 1/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicrostructureField {
    pub kind: FieldKind,
    pub scale_rule: ScaleRule,
    pub omega: Rect,
    alpha: f64,
    beta: f64,
}

impl MicrostructureField {
    /// Builds a field, using the analytic ellipticity bounds of `kind`.
    pub fn new(kind: FieldKind, scale_rule: ScaleRule, omega: Rect) -> Result<Self> {
        let (alpha, beta) = natural_bounds(&kind)?;
        Self::with_bounds(kind, scale_rule, omega, alpha, beta)
    }

    /// Builds a field with declared bounds; these are not checked here
    /// (see [`verify_bounds`]).
    pub fn with_bounds(
        kind: FieldKind,
        scale_rule: ScaleRule,
        omega: Rect,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && beta >= alpha) {
            return Err(invalid("bounds", format!("need 0 < alpha <= beta, got ({alpha}, {beta})")));
        }
        scale_rule.validate()?;
        if let FieldKind::Table { nx, ny, forms } = &kind {
            if nx * ny != forms.len() || forms.is_empty() {
                return Err(Error::ShapeMismatch { expected: nx * ny, got: forms.len() });
            }
        }
        Ok(Self { kind, scale_rule, omega, alpha, beta })
    }

    pub fn constant_isotropic(lambda: f64, mu: f64) -> Result<Self> {
        Self::new(
            FieldKind::ConstantIsotropic(Lame { lambda, mu }),
            ScaleRule::Fixed { epsilon: 1.0 },
            Rect::UNIT,
        )
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Whether the form is independent of `x` and `h`.
    pub fn is_homogeneous(&self) -> bool {
        matches!(self.kind, FieldKind::ConstantIsotropic(_))
    }

    /// The local form `Q^h(x, ·)`.
    pub fn form_at(&self, h: f64, x: [f64; 3]) -> Result<ElasticForm> {
        if !(h > 0.0) {
            return Err(invalid("h", format!("must be positive, got {h}")));
        }
        if !self.omega.contains([x[0], x[1]]) || x[2].abs() > 0.5 + 1e-12 {
            return Err(Error::OutsideDomain { x: x[0], y: x[1], z: x[2] });
        }
        Ok(self.form_unchecked(h, x))
    }

    pub(crate) fn form_unchecked(&self, h: f64, x: [f64; 3]) -> ElasticForm {
        let eps = self.scale_rule.epsilon(h);
        let iso = |l: Lame| ElasticForm { c: isotropic_matrix(l.lambda, l.mu) };
        match &self.kind {
            FieldKind::ConstantIsotropic(l) => iso(*l),
            FieldKind::InPlaneLaminate(p) => {
                let s = x[0] / eps;
                iso(p[usize::from(s - s.floor() >= 0.5)])
            }
            FieldKind::Checkerboard(p) => {
                let a = x[0] / eps;
                let b = x[1] / eps;
                let ia = a - a.floor() >= 0.5;
                let ib = b - b.floor() >= 0.5;
                iso(p[usize::from(ia ^ ib)])
            }
            FieldKind::SmoothModulated { lambda, mu0, amplitude } => {
                let m = mu0
                    * (1.0
                        + amplitude * (2.0 * PI * x[0] / eps).sin() * (2.0 * PI * x[1] / eps).sin());
                iso(Lame { lambda: *lambda, mu: m })
            }
            FieldKind::X3Graded { lambda, mu_bottom, mu_top, symmetric } => {
                let t = if *symmetric { (2.0 * x[2]).abs().min(1.0) } else { (x[2] + 0.5).clamp(0.0, 1.0) };
                iso(Lame { lambda: *lambda, mu: mu_bottom + (mu_top - mu_bottom) * t })
            }
            FieldKind::Table { nx, ny, forms } => {
                let cell = |v: f64, n: usize| {
                    let s = v / eps;
                    (((s - s.floor()) * n as f64) as usize).min(n - 1)
                };
                forms[cell(x[1], *ny) * nx + cell(x[0], *nx)]
            }
        }
    }
}

fn natural_bounds(kind: &FieldKind) -> Result<(f64, f64)> {
    let check = |l: &Lame| -> Result<(f64, f64)> {
        ElasticForm::isotropic(l.lambda, l.mu)?;
        Ok((2.0 * l.mu, 2.0 * l.mu + 3.0 * l.lambda))
    };
    let pair = |p: &[Lame; 2]| -> Result<(f64, f64)> {
        let a = check(&p[0])?;
        let b = check(&p[1])?;
        Ok((a.0.min(b.0), a.1.max(b.1)))
    };
    match kind {
        FieldKind::ConstantIsotropic(l) => check(l),
        FieldKind::InPlaneLaminate(p) | FieldKind::Checkerboard(p) => pair(p),
        FieldKind::SmoothModulated { lambda, mu0, amplitude } => {
            if !(amplitude.abs() < 1.0) {
                return Err(invalid("amplitude", "must satisfy |a| < 1"));
            }
            let lo = Lame { lambda: *lambda, mu: mu0 * (1.0 - amplitude.abs()) };
            let hi = Lame { lambda: *lambda, mu: mu0 * (1.0 + amplitude.abs()) };
            Ok((check(&lo)?.0, check(&hi)?.1))
        }
        FieldKind::X3Graded { lambda, mu_bottom, mu_top, .. } => {
            let a = check(&Lame { lambda: *lambda, mu: *mu_bottom })?;
            let b = check(&Lame { lambda: *lambda, mu: *mu_top })?;
            Ok((a.0.min(b.0), a.1.max(b.1)))
        }
        FieldKind::Table { forms, .. } => {
            let mut lo = f64::INFINITY;
            let mut hi: f64 = 0.0;
            for f in forms {
                let (a, b) = f.eigen_bounds();
                lo = lo.min(a);
                hi = hi.max(b);
            }
            if !(lo > 0.0) {
                return Err(Error::NotPositiveDefinite { eigenvalue: lo });
            }
            Ok((lo, hi))
        }
    }
}

/// `q(G)` for the form at `(h, x)`.
pub fn eval_form(field: &MicrostructureField, h: f64, x: [f64; 3], g: &Mat3) -> Result<f64> {
    Ok(field.form_at(h, x)?.eval(g))
}

/// Result of sampling a field's eigenvalues against its declared bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub samples: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub alpha: f64,
    pub beta: f64,
    pub passed: bool,
}

/// Eigen-decomposes the local form at `samples` seeded random points of Ω
/// and compares the extreme eigenvalues with the declared `(α, β)`.
pub fn verify_bounds(field: &MicrostructureField, h: f64, samples: usize) -> Result<BoundsReport> {
    if samples == 0 {
        return Err(invalid("samples", "need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0d5);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = [
            rng.gen_range(field.omega.min[0]..=field.omega.max[0]),
            rng.gen_range(field.omega.min[1]..=field.omega.max[1]),
            rng.gen_range(-0.5..=0.5),
        ];
        let (a, b) = field.form_at(h, x)?.eigen_bounds();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let tol = 1e-12 * field.beta;
    Ok(BoundsReport {
        samples,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        alpha: field.alpha,
        beta: field.beta,
        passed: lo >= field.alpha - tol && hi <= field.beta + tol,
    })
}

/// JSON description of a microstructure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrostructureDescriptor {
    pub kind: String,
    #[serde(default)]
    pub lambda: Option<OneOrTwo>,
    #[serde(default)]
    pub mu: Option<OneOrTwo>,
    /// Oscillation length used when no scale rule is given.
    #[serde(default)]
    pub period: Option<f64>,
    #[serde(default)]
    pub scale_rule: Option<ScaleRule>,
    /// Declared `[alpha, beta]`; analytic bounds are used when absent.
    #[serde(default)]
    pub bounds: Option<[f64; 2]>,
    #[serde(default)]
    pub omega: Option<Rect>,
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub symmetric: Option<bool>,
    /// CSV file for the `table` kind.
    #[serde(default)]
    pub table: Option<String>,
    #[serde(default)]
    pub table_dims: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrTwo {
    One(f64),
    Two([f64; 2]),
}

impl OneOrTwo {
    fn pair(self) -> [f64; 2] {
        match self {
            OneOrTwo::One(v) => [v, v],
            OneOrTwo::Two(p) => p,
        }
    }
}

impl MicrostructureDescriptor {
    /// Resolves the descriptor; relative table paths are taken from `base_dir`.
    pub fn build(&self, base_dir: Option<&Path>) -> Result<MicrostructureField> {
        let lam = || self.lambda.map(OneOrTwo::pair).ok_or_else(|| invalid("lambda", "missing"));
        let mu = || self.mu.map(OneOrTwo::pair).ok_or_else(|| invalid("mu", "missing"));
        let phases = || -> Result<[Lame; 2]> {
            let (l, m) = (lam()?, mu()?);
            Ok([Lame { lambda: l[0], mu: m[0] }, Lame { lambda: l[1], mu: m[1] }])
        };
        let kind = match self.kind.as_str() {
            "constant-isotropic" => {
                let (l, m) = (lam()?, mu()?);
                FieldKind::ConstantIsotropic(Lame { lambda: l[0], mu: m[0] })
            }
            "in-plane-laminate" => FieldKind::InPlaneLaminate(phases()?),
            "checkerboard" => FieldKind::Checkerboard(phases()?),
            "smooth-modulated" => FieldKind::SmoothModulated {
                lambda: lam()?[0],
                mu0: mu()?[0],
                amplitude: self.amplitude.ok_or_else(|| invalid("amplitude", "missing"))?,
            },
            "x3-graded" => {
                let m = mu()?;
                FieldKind::X3Graded {
                    lambda: lam()?[0],
                    mu_bottom: m[0],
                    mu_top: m[1],
                    symmetric: self.symmetric.unwrap_or(false),
                }
            }
            "table" => {
                let file = self.table.as_ref().ok_or_else(|| invalid("table", "missing"))?;
                let [nx, ny] = self.table_dims.ok_or_else(|| invalid("table_dims", "missing"))?;
                let path = match base_dir {
                    Some(d) if Path::new(file).is_relative() => d.join(file),
                    _ => Path::new(file).to_path_buf(),
                };
                FieldKind::Table { nx, ny, forms: read_table_csv(&path, nx * ny)? }
            }
            other => return Err(invalid("kind", format!("unknown microstructure kind `{other}`"))),
        };
        let scale_rule = match (self.scale_rule, self.period) {
            (Some(rule), _) => rule,
            (None, Some(p)) => ScaleRule::Fixed { epsilon: p },
            (None, None) => ScaleRule::Fixed { epsilon: 1.0 },
        };
        let omega = self.omega.unwrap_or(Rect::UNIT);
        match self.bounds {
            Some([a, b]) => MicrostructureField::with_bounds(kind, scale_rule, omega, a, b),
            None => MicrostructureField::new(kind, scale_rule, omega),
        }
    }
}

/// Reads `cells` rows of `index, c11, c12, ..., c66` (upper triangle, row by row).
pub fn read_table_csv(path: &Path, cells: usize) -> Result<Vec<ElasticForm>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut forms: Vec<Option<ElasticForm>> = vec![None; cells];
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 22 {
            return Err(Error::ShapeMismatch { expected: 22, got: rec.len() });
        }
        let index: usize = rec[0].trim().parse().map_err(|_| invalid("table", "bad cell index"))?;
        if index >= cells {
            return Err(invalid("table", format!("cell index {index} out of range")));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>().map_err(|_| invalid("table", format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        forms[index] = Some(ElasticForm::new(from_upper_triangle(&vals)?)?);
    }
    forms
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| invalid("table", format!("cell {i} missing"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};

    fn mat(rows: [[f64; 3]; 3]) -> Mat3 {
        Mat3::from_fn(|i, j| rows[i][j])
    }

    #[test]
    fn iota_embeds_upper_left_block() {
        let m = iota(Sym2::new(1.0, 3.0, 2.0));
        assert_eq!(m, mat([[1.0, 2.0, 0.0], [2.0, 3.0, 0.0], [0.0, 0.0, 0.0]]));
        assert_eq!(iota(Sym2::ZERO), Mat3::zeros());
        assert_eq!(iota(Sym2::IDENTITY), Mat3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)));
    }

    #[test]
    fn isotropic_values() {
        let f = ElasticForm::isotropic(1.0, 1.0).unwrap();
        assert!((f.eval(&Mat3::identity()) - 15.0).abs() < 1e-14);
        let skew = mat([[0.0, 1.0, -2.0], [-1.0, 0.0, 3.0], [2.0, -3.0, 0.0]]);
        assert!(f.eval(&skew).abs() < 1e-14);
        let g = ElasticForm::isotropic(0.0, 1.0).unwrap();
        let shear = mat([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!((g.eval(&shear) - 4.0).abs() < 1e-14);
        assert!(ElasticForm::isotropic(1.0, 0.0).is_err());
        assert!(ElasticForm::isotropic(1.0, -1.0).is_err());
    }

    #[test]
    fn isotropic_eigenvalues_match_closed_form() {
        let (lo, hi) = ElasticForm::isotropic(1.0, 1.0).unwrap().eigen_bounds();
        assert!((lo - 2.0).abs() < 1e-12 && (hi - 5.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_gap_identity_vs_zero() {
        let f = ElasticForm::isotropic(1.0, 1.0).unwrap();
        let (gap, bound) = lipschitz_gap(&f, &Mat3::identity(), &Mat3::zeros());
        assert!((gap - 15.0).abs() < 1e-12);
        assert!((bound - 15.0).abs() < 1e-12);
        let (g0, b0) = lipschitz_gap(&f, &Mat3::identity(), &Mat3::identity());
        assert_eq!((g0, b0), (0.0, 0.0));
    }

    #[test]
    fn lipschitz_gap_holds_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let forms = [
            ElasticForm::isotropic(1.0, 1.0).unwrap(),
            ElasticForm::isotropic(7.0, 0.3).unwrap(),
        ];
        for _ in 0..1000 {
            let g1 = Mat3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let g2 = Mat3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            for f in &forms {
                let (gap, bound) = lipschitz_gap(f, &g1, &g2);
                assert!(gap <= bound * (1.0 + 1e-12), "{gap} > {bound}");
            }
        }
    }

    #[test]
    fn verify_bounds_constant_and_laminate() {
        let f = MicrostructureField::constant_isotropic(1.0, 1.0).unwrap();
        let rep = verify_bounds(&f, 0.1, 20).unwrap();
        assert!(rep.passed);
        assert!((rep.min_eigenvalue - 2.0).abs() < 1e-12 && (rep.max_eigenvalue - 5.0).abs() < 1e-12);

        let lam = MicrostructureField::new(
            FieldKind::InPlaneLaminate([Lame { lambda: 0.0, mu: 1.0 }, Lame { lambda: 0.0, mu: 10.0 }]),
            ScaleRule::Fixed { epsilon: 0.1 },
            Rect::UNIT,
        )
        .unwrap();
        assert_eq!((lam.alpha(), lam.beta()), (2.0, 20.0));
        let rep = verify_bounds(&lam, 0.1, 200).unwrap();
        assert!(rep.passed);
        assert!((rep.min_eigenvalue - 2.0).abs() < 1e-12 && (rep.max_eigenvalue - 20.0).abs() < 1e-12);
    }

    #[test]
    fn verify_bounds_flags_overclaimed_alpha() {
        let f = MicrostructureField::with_bounds(
            FieldKind::ConstantIsotropic(Lame { lambda: 1.0, mu: 1.0 }),
            ScaleRule::Fixed { epsilon: 1.0 },
            Rect::UNIT,
            3.0,
            5.0,
        )
        .unwrap();
        assert!(!verify_bounds(&f, 0.1, 5).unwrap().passed);
    }

    #[test]
    fn eval_outside_domain_errors() {
        let f = MicrostructureField::constant_isotropic(1.0, 1.0).unwrap();
        assert!(matches!(
            eval_form(&f, 0.1, [0.5, 0.5, 0.7], &Mat3::identity()),
            Err(Error::OutsideDomain { .. })
        ));
        assert!(eval_form(&f, 0.1, [1.5, 0.5, 0.0], &Mat3::identity()).is_err());
        assert!((eval_form(&f, 0.1, [0.3, 0.9, -0.2], &Mat3::identity()).unwrap() - 15.0).abs() < 1e-13);
    }

    #[test]
    fn laminate_follows_scale_rule() {
        let f = MicrostructureField::new(
            FieldKind::InPlaneLaminate([Lame { lambda: 0.0, mu: 1.0 }, Lame { lambda: 0.0, mu: 10.0 }]),
            ScaleRule::Linear { factor: 1.0 },
            Rect::UNIT,
        )
        .unwrap();
        let e = Mat3::from_diagonal(&Vector3::new(1.0, 0.0, 0.0));
        // h = 0.1: x1 = 0.02 lies in the first half-period, 0.07 in the second.
        assert!((eval_form(&f, 0.1, [0.02, 0.5, 0.0], &e).unwrap() - 2.0).abs() < 1e-14);
        assert!((eval_form(&f, 0.1, [0.07, 0.5, 0.0], &e).unwrap() - 20.0).abs() < 1e-14);
        // Same point, smaller h: the phase changes.
        assert!((eval_form(&f, 0.05, [0.07, 0.5, 0.0], &e).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn descriptor_round_trip_through_json() {
        let json = r#"{"kind": "in-plane-laminate", "lambda": 0.0, "mu": [1.0, 10.0],
                       "scale_rule": {"type": "linear", "factor": 1.0}}"#;
        let d: MicrostructureDescriptor = serde_json::from_str(json).unwrap();
        let f = d.build(None).unwrap();
        assert_eq!((f.alpha(), f.beta()), (2.0, 20.0));
        assert!(serde_json::from_str::<MicrostructureDescriptor>(r#"{"kind":"x","oops":1}"#).is_err());
        let bad = MicrostructureDescriptor { kind: "nope".into(), ..d };
        assert!(bad.build(None).is_err());
    }

    #[test]
    fn table_csv_is_read_by_cell_index() {
        let dir = std::env::temp_dir().join(format!("vkh-table-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let mut text = String::from("index");
        for i in 0..21 {
            text.push_str(&format!(",c{i}"));
        }
        text.push('\n');
        for (idx, mu) in [(1usize, 3.0), (0, 1.0)] {
            let c = ElasticForm::isotropic(0.5, mu).unwrap().upper_triangle();
            text.push_str(&idx.to_string());
            for v in c {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        std::fs::write(&path, text).unwrap();
        let forms = read_table_csv(&path, 2).unwrap();
        assert_eq!(forms[1], ElasticForm::isotropic(0.5, 3.0).unwrap());
        assert!(read_table_csv(&path, 3).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    fn arb_mat3() -> impl Strategy<Value = Mat3> {
        prop::array::uniform9(-5.0f64..5.0).prop_map(|a| Mat3::from_fn(|i, j| a[3 * i + j]))
    }

    proptest! {
        #[test]
        fn form_depends_on_symmetric_part_only(g in arb_mat3(), l in 0.0f64..5.0, m in 0.1f64..5.0) {
            let f = ElasticForm::isotropic(l, m).unwrap();
            let a = f.eval(&g);
            let b = f.eval(&sym(&g));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn ellipticity_bounds_hold(g in arb_mat3(), l in 0.0f64..5.0, m in 0.1f64..5.0) {
            let f = ElasticForm::isotropic(l, m).unwrap();
            let s2 = sym(&g).norm_squared();
            let q = f.eval(&g);
            prop_assert!(q >= 2.0 * m * s2 * (1.0 - 1e-12) - 1e-12);
            prop_assert!(q <= (2.0 * m + 3.0 * l) * s2 * (1.0 + 1e-12) + 1e-12);
        }

        #[test]
        fn vec_is_an_isometry(g in arb_mat3()) {
            let s = sym(&g);
            let v = sym_vec(&g);
            prop_assert!((v.norm() - s.norm()).abs() < 1e-12);
            prop_assert!((sym_unvec(&v) - s).amax() < 1e-14);
        }

        #[test]
        fn sym2_vec_round_trip(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
            let m = Sym2::new(a, b, c);
            prop_assert!((Sym2::from_vec(&m.to_vec()) - m).norm() < 1e-14);
            prop_assert!((m.to_vec().norm() - m.norm()).abs() < 1e-14);
            prop_assert!((sym_vec(&iota(m)).norm() - m.norm()).abs() < 1e-14);
        }
    }
}
