//! Discrete von Kármán plate energy
//! `I⁰(u, v) = ∫ Q(x', sym ∇u + ½ ∇v⊗∇v, -∇²v) dx' - ∫ g v dx'`.
//!
//! Derivatives are central differences on a node raster, evaluated at
//! interior nodes (all eight neighbours present), each carrying weight δ².
//! Difference operators are linear and exact on affine data, which makes the
//! rigid reparametrizations `(u, v) -> (u + (A - ½a⊗a)x' - v a, v + a·x')`
//! leave the discrete energy unchanged up to rounding.

use std::f64::consts::SQRT_2;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::effective::pair_to_vec;
use crate::error::{invalid, Error, Result};
use crate::fem3d::RasterDomain;
use crate::griso::{node_masses, nodal_gradient};
use crate::linalg::{conjugate_gradient, dot, FnOperator};
use crate::microstructure::Sym2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// No boundary data; rigid reparametrizations are projected out of every step.
    FreeGauged,
    /// `u = 0` on the boundary, `v = 0` on the boundary and the first interior ring.
    Clamped,
}

/// Node indices of the 3×3 stencil around an interior node.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Stencil {
    c: usize,
    xp: usize,
    xm: usize,
    yp: usize,
    ym: usize,
    pp: usize,
    pm: usize,
    mp: usize,
    mm: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateDomain {
    raster: RasterDomain,
    mode: BoundaryMode,
    stencils: Vec<Stencil>,
    masses: Vec<f64>,
    /// Per node: `[u pinned, v pinned]`.
    pinned: Vec<[bool; 2]>,
}

impl PlateDomain {
    pub fn new(raster: RasterDomain, mode: BoundaryMode) -> Result<Self> {
        let (nx, ny) = raster.dims();
        if nx < 2 || ny < 2 {
            return Err(invalid("plate domain", format!("need at least 3 nodes per direction, got {}x{}", nx + 1, ny + 1)));
        }
        if raster.node_components().0 != 1 {
            return Err(invalid("plate domain", "must be connected"));
        }
        let at = |i: usize, j: usize, a: isize, b: isize| raster.node_at(i as isize + a, j as isize + b);
        let stencils: Vec<Stencil> = (0..raster.node_count())
            .filter_map(|n| {
                let (i, j) = raster.node_lattice(n);
                Some(Stencil {
                    c: n,
                    xp: at(i, j, 1, 0)?,
                    xm: at(i, j, -1, 0)?,
                    yp: at(i, j, 0, 1)?,
                    ym: at(i, j, 0, -1)?,
                    pp: at(i, j, 1, 1)?,
                    pm: at(i, j, 1, -1)?,
                    mp: at(i, j, -1, 1)?,
                    mm: at(i, j, -1, -1)?,
                })
            })
            .collect();
        if stencils.is_empty() {
            return Err(Error::DegenerateDomain);
        }
        let mut pinned = vec![[false; 2]; raster.node_count()];
        if mode == BoundaryMode::Clamped {
            for n in raster.boundary_nodes() {
                pinned[n] = [true, true];
                let (i, j) = raster.node_lattice(n);
                for b in -1..=1 {
                    for a in -1..=1 {
                        if let Some(m) = at(i, j, a, b) {
                            pinned[m][1] = true;
                        }
                    }
                }
            }
            if pinned.iter().all(|p| p[1]) {
                return Err(Error::DegenerateDomain);
            }
        }
        let masses = node_masses(&raster);
        Ok(Self { raster, mode, stencils, masses, pinned })
    }

    pub fn rectangle(origin: [f64; 2], size: [f64; 2], spacing: f64, mode: BoundaryMode) -> Result<Self> {
        Self::new(RasterDomain::rectangle(origin, size, spacing)?, mode)
    }

    pub fn raster(&self) -> &RasterDomain {
        &self.raster
    }

    pub fn mode(&self) -> BoundaryMode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        self.raster.node_count()
    }

    /// Nodes carrying quadrature weight, in ascending order.
    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.stencils.iter().map(|s| s.c)
    }

    fn weight(&self) -> f64 {
        self.raster.spacing() * self.raster.spacing()
    }

    pub fn with_mode(&self, mode: BoundaryMode) -> Result<Self> {
        Self::new(self.raster.clone(), mode)
    }

    /// Flat mask over the DOFs of [`PlateState::to_vec`].
    fn constrained(&self) -> Vec<bool> {
        let n = self.node_count();
        let mut out = vec![false; 3 * n];
        for (k, p) in self.pinned.iter().enumerate() {
            out[2 * k] = p[0];
            out[2 * k + 1] = p[0];
            out[2 * n + k] = p[1];
        }
        out
    }
}

/// In-plane displacement `u` and transverse displacement `v` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateState {
    pub u: Vec<[f64; 2]>,
    pub v: Vec<f64>,
}

impl PlateState {
    pub fn zeros(domain: &PlateDomain) -> Self {
        let n = domain.node_count();
        Self { u: vec![[0.0; 2]; n], v: vec![0.0; n] }
    }

    pub fn from_fn(domain: &PlateDomain, f: impl Fn([f64; 2]) -> ([f64; 2], f64)) -> Self {
        let (u, v) = (0..domain.node_count()).map(|n| f(domain.raster.node_position(n))).unzip();
        Self { u, v }
    }

    /// `[u1, u2]` per node, then `v` per node.
    pub fn to_vec(&self) -> Vec<f64> {
        self.u.iter().flat_map(|p| *p).chain(self.v.iter().copied()).collect()
    }

    pub fn from_vec(domain: &PlateDomain, x: &[f64]) -> Result<Self> {
        let n = domain.node_count();
        if x.len() != 3 * n {
            return Err(Error::ShapeMismatch { expected: 3 * n, got: x.len() });
        }
        Ok(Self { u: (0..n).map(|k| [x[2 * k], x[2 * k + 1]]).collect(), v: x[2 * n..].to_vec() })
    }

    fn check(&self, domain: &PlateDomain) -> Result<()> {
        let n = domain.node_count();
        for len in [self.u.len(), self.v.len()] {
            if len != n {
                return Err(Error::ShapeMismatch { expected: n, got: len });
            }
        }
        if self.v.iter().chain(self.u.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(invalid("state", "contains non-finite values"));
        }
        Ok(())
    }

    /// Zeroes the pinned values of a clamped domain.
    pub fn constrain(&mut self, domain: &PlateDomain) {
        for (k, p) in domain.pinned.iter().enumerate() {
            if p[0] {
                self.u[k] = [0.0; 2];
            }
            if p[1] {
                self.v[k] = 0.0;
            }
        }
    }

    pub fn max_abs_v(&self) -> f64 {
        self.v.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `sqrt(Σ m_k v_k²)`
    pub fn v_norm(&self, domain: &PlateDomain) -> f64 {
        self.v.iter().zip(&domain.masses).map(|(v, m)| m * v * v).sum::<f64>().sqrt()
    }

    pub fn to_csv(&self, domain: &PlateDomain) -> Result<String> {
        self.check(domain)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["x1", "x2", "u1", "u2", "v"])?;
        for k in 0..domain.node_count() {
            let p = domain.raster.node_position(k);
            w.write_record([p[0], p[1], self.u[k][0], self.u[k][1], self.v[k]].map(crate::corrector::fmt_num))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Effective density per node, or one matrix for the whole plate.
#[derive(Debug, Clone, PartialEq)]
pub enum DensityField {
    Constant(Matrix6<f64>),
    PerNode(Vec<Matrix6<f64>>),
}

fn check_spd(q: &Matrix6<f64>) -> Result<()> {
    if (q - q.transpose()).amax() > 1e-12 * q.amax().max(1.0) {
        return Err(invalid("density", "matrix is not symmetric"));
    }
    let lo = SymmetricEigen::new(*q).eigenvalues.min();
    if !(lo > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: lo });
    }
    Ok(())
}

impl DensityField {
    pub fn constant(q: Matrix6<f64>) -> Result<Self> {
        check_spd(&q)?;
        Ok(Self::Constant(q))
    }

    pub fn per_node(domain: &PlateDomain, qs: Vec<Matrix6<f64>>) -> Result<Self> {
        if qs.len() != domain.node_count() {
            return Err(Error::ShapeMismatch { expected: domain.node_count(), got: qs.len() });
        }
        qs.iter().try_for_each(check_spd)?;
        Ok(Self::PerNode(qs))
    }

    /// Each node takes the matrix of its nearest sample point (ties to the first).
    pub fn nearest(domain: &PlateDomain, samples: &[([f64; 2], Matrix6<f64>)]) -> Result<Self> {
        match samples {
            [] => Err(Error::Precondition("no density samples".into())),
            [(_, q)] => Self::constant(*q),
            _ => {
                let qs = (0..domain.node_count())
                    .map(|n| {
                        let p = domain.raster.node_position(n);
                        let d2 = |x: &[f64; 2]| (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
                        samples.iter().min_by(|a, b| d2(&a.0).total_cmp(&d2(&b.0))).expect("non-empty").1
                    })
                    .collect();
                Self::per_node(domain, qs)
            }
        }
    }

    pub fn at(&self, node: usize) -> &Matrix6<f64> {
        match self {
            Self::Constant(q) => q,
            Self::PerNode(qs) => &qs[node],
        }
    }

    pub fn scaled(&self, t: f64) -> Self {
        match self {
            Self::Constant(q) => Self::Constant(q * t),
            Self::PerNode(qs) => Self::PerNode(qs.iter().map(|q| q * t).collect()),
        }
    }

    fn check(&self, domain: &PlateDomain) -> Result<()> {
        match self {
            Self::PerNode(qs) if qs.len() != domain.node_count() => {
                Err(Error::ShapeMismatch { expected: domain.node_count(), got: qs.len() })
            }
            _ => Ok(()),
        }
    }
}

/// Rigid reparametrization: `a` and the skew matrix `[[0, ϑ], [-ϑ, 0]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EquivalenceParams {
    pub a: [f64; 2],
    pub theta: f64,
}

/// Transverse load per node; enters as `-∫ g v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSpec {
    pub g: Vec<f64>,
}

impl LoadSpec {
    pub fn zero(domain: &PlateDomain) -> Self {
        Self { g: vec![0.0; domain.node_count()] }
    }

    pub fn uniform(domain: &PlateDomain, value: f64) -> Self {
        Self { g: vec![value; domain.node_count()] }
    }

    pub fn from_fn(domain: &PlateDomain, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self { g: (0..domain.node_count()).map(|n| f(domain.raster.node_position(n))).collect() }
    }

    pub fn scaled(&self, t: f64) -> Self {
        Self { g: self.g.iter().map(|x| x * t).collect() }
    }

    fn check(&self, domain: &PlateDomain) -> Result<()> {
        if self.g.len() != domain.node_count() {
            return Err(Error::ShapeMismatch { expected: domain.node_count(), got: self.g.len() });
        }
        if self.g.iter().any(|x| !x.is_finite()) {
            return Err(invalid("load", "contains non-finite values"));
        }
        Ok(())
    }

    /// Removes the mass-weighted projection onto `{1, x1, x2}`, leaving a load
    /// that does no work on the gauge motions.
    pub fn balanced(&self, domain: &PlateDomain) -> Self {
        let n = domain.node_count();
        let basis = |k: usize, p: [f64; 2]| [1.0, p[0], p[1]][k];
        let mut gram = Matrix3::<f64>::zeros();
        let mut rhs = Vector3::<f64>::zeros();
        for i in 0..n {
            let p = domain.raster.node_position(i);
            let m = domain.masses[i];
            for a in 0..3 {
                rhs[a] += m * self.g[i] * basis(a, p);
                for b in 0..3 {
                    gram[(a, b)] += m * basis(a, p) * basis(b, p);
                }
            }
        }
        let c = gram.lu().solve(&rhs).unwrap_or_else(Vector3::zeros);
        let g = (0..n)
            .map(|i| {
                let p = domain.raster.node_position(i);
                self.g[i] - (0..3).map(|a| c[a] * basis(a, p)).sum::<f64>()
            })
            .collect();
        Self { g }
    }

    /// In free mode the load must do no work on the gauge motions `v = c + a·x'`.
    fn check_balanced(&self, domain: &PlateDomain) -> Result<()> {
        if domain.mode != BoundaryMode::FreeGauged {
            return Ok(());
        }
        let mut moments = [0.0; 3];
        let mut scale = 0.0;
        for (n, (&g, &m)) in self.g.iter().zip(&domain.masses).enumerate() {
            let p = domain.raster.node_position(n);
            moments[0] += m * g;
            moments[1] += m * g * p[0];
            moments[2] += m * g * p[1];
            scale += m * g.abs() * (1.0 + p[0].abs() + p[1].abs());
        }
        if moments.iter().any(|x| x.abs() > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::Precondition(
                "free-gauged plates need a load with zero resultant and zero moments".into(),
            ));
        }
        Ok(())
    }
}

fn d1(f: impl Fn(usize) -> f64, s: &Stencil, d: f64) -> [f64; 2] {
    [(f(s.xp) - f(s.xm)) / (2.0 * d), (f(s.yp) - f(s.ym)) / (2.0 * d)]
}

/// `(∂11 f, ∂22 f, ∂12 f)`
fn d2(f: impl Fn(usize) -> f64, s: &Stencil, d: f64) -> [f64; 3] {
    let dd = d * d;
    [
        (f(s.xp) - 2.0 * f(s.c) + f(s.xm)) / dd,
        (f(s.yp) - 2.0 * f(s.c) + f(s.ym)) / dd,
        (f(s.pp) - f(s.pm) - f(s.mp) + f(s.mm)) / (4.0 * dd),
    ]
}

/// `sym ∇u + ½ ∇v⊗∇v` at every node; one-sided differences at the boundary.
pub fn membrane_strain(state: &PlateState, domain: &PlateDomain) -> Vec<Sym2> {
    let r = &domain.raster;
    let u1: Vec<f64> = state.u.iter().map(|p| p[0]).collect();
    let u2: Vec<f64> = state.u.iter().map(|p| p[1]).collect();
    let (g1, g2, gv) = (nodal_gradient(r, &u1), nodal_gradient(r, &u2), nodal_gradient(r, &state.v));
    (0..r.node_count())
        .map(|n| {
            let (a, b, c) = (g1[n], g2[n], gv[n]);
            Sym2::new(a[0] + 0.5 * c[0] * c[0], b[1] + 0.5 * c[1] * c[1], 0.5 * (a[1] + b[0]) + 0.5 * c[0] * c[1])
        })
        .collect()
}

/// `-∇²v` at every interior node, in the order of [`PlateDomain::interior_nodes`].
pub fn bending_strain(state: &PlateState, domain: &PlateDomain) -> Vec<Sym2> {
    let d = domain.raster.spacing();
    domain
        .stencils
        .iter()
        .map(|s| {
            let h = d2(|k| state.v[k], s, d);
            Sym2::new(-h[0], -h[1], -h[2])
        })
        .collect()
}

/// Strains at one interior node from the central stencils.
fn node_strains(state: &PlateState, s: &Stencil, d: f64) -> (Sym2, Sym2, [f64; 2]) {
    let du1 = d1(|k| state.u[k][0], s, d);
    let du2 = d1(|k| state.u[k][1], s, d);
    let dv = d1(|k| state.v[k], s, d);
    let h = d2(|k| state.v[k], s, d);
    let m = Sym2::new(
        du1[0] + 0.5 * dv[0] * dv[0],
        du2[1] + 0.5 * dv[1] * dv[1],
        0.5 * (du1[1] + du2[0]) + 0.5 * dv[0] * dv[1],
    );
    (m, Sym2::new(-h[0], -h[1], -h[2]), dv)
}

fn load_work(load: &LoadSpec, state: &PlateState, domain: &PlateDomain) -> f64 {
    load.g.iter().zip(&state.v).zip(&domain.masses).map(|((g, v), m)| m * g * v).sum()
}

pub fn energy(state: &PlateState, density: &DensityField, load: &LoadSpec, domain: &PlateDomain) -> Result<f64> {
    state.check(domain)?;
    density.check(domain)?;
    load.check(domain)?;
    Ok(energy_unchecked(state, density, load, domain))
}

fn energy_unchecked(state: &PlateState, density: &DensityField, load: &LoadSpec, domain: &PlateDomain) -> f64 {
    let d = domain.raster.spacing();
    let w = domain.weight();
    let stored: f64 = domain
        .stencils
        .iter()
        .map(|s| {
            let (m, b, _) = node_strains(state, s, d);
            let x = pair_to_vec(m, b);
            w * x.dot(&(density.at(s.c) * x))
        })
        .sum();
    stored - load_work(load, state, domain)
}

/// Adds `Jᵀ y` to `out`, where `J` maps state perturbations to the strain
/// vector at stencil `s` linearized about a state with `∇v = a`.
fn scatter(out: &mut [f64], n: usize, s: &Stencil, d: f64, a: [f64; 2], y: &Vector6<f64>) {
    let h = SQRT_2 / 2.0;
    // Coefficients on ∂1u1, ∂2u1, ∂1u2, ∂2u2, ∂1v, ∂2v.
    let cu1 = [y[0], h * y[2]];
    let cu2 = [h * y[2], y[1]];
    let cv = [y[0] * a[0] + h * y[2] * a[1], y[1] * a[1] + h * y[2] * a[0]];
    let t = 1.0 / (2.0 * d);
    let mut put_grad = |offset: usize, stride: usize, c: [f64; 2]| {
        out[offset + stride * s.xp] += c[0] * t;
        out[offset + stride * s.xm] -= c[0] * t;
        out[offset + stride * s.yp] += c[1] * t;
        out[offset + stride * s.ym] -= c[1] * t;
    };
    put_grad(0, 2, cu1);
    put_grad(1, 2, cu2);
    put_grad(2 * n, 1, cv);
    // Bending vector (-v11, -v22, -√2 v12).
    let dd = d * d;
    let (c11, c22, c12) = (-y[3] / dd, -y[4] / dd, -SQRT_2 * y[5] / (4.0 * dd));
    let v = &mut out[2 * n..];
    v[s.xp] += c11;
    v[s.xm] += c11;
    v[s.c] -= 2.0 * c11 + 2.0 * c22;
    v[s.yp] += c22;
    v[s.ym] += c22;
    v[s.pp] += c12;
    v[s.mm] += c12;
    v[s.pm] -= c12;
    v[s.mp] -= c12;
}

/// Linearized strain vector at stencil `s` for a perturbation `x`, about `∇v = a`.
fn linearized(x: &[f64], n: usize, s: &Stencil, d: f64, a: [f64; 2]) -> Vector6<f64> {
    let du1 = d1(|k| x[2 * k], s, d);
    let du2 = d1(|k| x[2 * k + 1], s, d);
    let dv = d1(|k| x[2 * n + k], s, d);
    let h = d2(|k| x[2 * n + k], s, d);
    let m = Sym2::new(
        du1[0] + a[0] * dv[0],
        du2[1] + a[1] * dv[1],
        0.5 * (du1[1] + du2[0]) + 0.5 * (a[0] * dv[1] + a[1] * dv[0]),
    );
    pair_to_vec(m, Sym2::new(-h[0], -h[1], -h[2]))
}

/// Gradient with respect to the flat state of [`PlateState::to_vec`].
pub fn gradient(state: &PlateState, density: &DensityField, load: &LoadSpec, domain: &PlateDomain) -> Result<Vec<f64>> {
    state.check(domain)?;
    density.check(domain)?;
    load.check(domain)?;
    Ok(gradient_unchecked(state, density, load, domain))
}

fn gradient_unchecked(state: &PlateState, density: &DensityField, load: &LoadSpec, domain: &PlateDomain) -> Vec<f64> {
    let n = domain.node_count();
    let d = domain.raster.spacing();
    let w = domain.weight();
    let mut out = vec![0.0; 3 * n];
    for s in &domain.stencils {
        let (m, b, dv) = node_strains(state, s, d);
        let y = 2.0 * w * (density.at(s.c) * pair_to_vec(m, b));
        scatter(&mut out, n, s, d, dv, &y);
    }
    for k in 0..n {
        out[2 * n + k] -= domain.masses[k] * load.g[k];
    }
    out
}

/// Which second-order model a CG block solve uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Model {
    /// `Σ Jᵀ (2w Q) J` on the u-block only.
    MembraneU,
    /// `Σ Jᵀ (2w Q) J` on the v-block only.
    GaussNewtonV,
    /// Full Gauss–Newton on both blocks.
    GaussNewton,
    /// Gauss–Newton plus the membrane-stress term `Σ ∇δv · N ∇δv`.
    Newton,
}

fn model_apply(state: &PlateState, density: &DensityField, domain: &PlateDomain, model: Model, x: &[f64], y: &mut [f64]) {
    let n = domain.node_count();
    let d = domain.raster.spacing();
    let w = domain.weight();
    let mut xin = x.to_vec();
    match model {
        Model::MembraneU => xin[2 * n..].iter_mut().for_each(|v| *v = 0.0),
        Model::GaussNewtonV => xin[..2 * n].iter_mut().for_each(|v| *v = 0.0),
        _ => {}
    }
    y.iter_mut().for_each(|v| *v = 0.0);
    for s in &domain.stencils {
        let dv = d1(|k| state.v[k], s, d);
        let z = 2.0 * w * (density.at(s.c) * linearized(&xin, n, s, d, dv));
        scatter(y, n, s, d, dv, &z);
        if model == Model::Newton {
            let (m, b, _) = node_strains(state, s, d);
            let stress = 2.0 * w * (density.at(s.c) * pair_to_vec(m, b));
            let g = d1(|k| xin[2 * n + k], s, d);
            let h = SQRT_2 / 2.0;
            let c = [stress[0] * g[0] + h * stress[2] * g[1], stress[1] * g[1] + h * stress[2] * g[0]];
            let t = 1.0 / (2.0 * d);
            let v = &mut y[2 * n..];
            v[s.xp] += c[0] * t;
            v[s.xm] -= c[0] * t;
            v[s.yp] += c[1] * t;
            v[s.ym] -= c[1] * t;
        }
    }
    match model {
        Model::MembraneU => y[2 * n..].iter_mut().for_each(|v| *v = 0.0),
        Model::GaussNewtonV => y[..2 * n].iter_mut().for_each(|v| *v = 0.0),
        _ => {}
    }
}

/// `(u, v) -> (u + (A - ½a⊗a)x' - v a, v + a·x')`, applied nodewise.
pub fn apply_equivalence(state: &PlateState, params: &EquivalenceParams, domain: &PlateDomain) -> PlateState {
    let [a1, a2] = params.a;
    let t = params.theta;
    let mat = [[-0.5 * a1 * a1, t - 0.5 * a1 * a2], [-t - 0.5 * a2 * a1, -0.5 * a2 * a2]];
    let mut out = state.clone();
    for k in 0..domain.node_count() {
        let x = domain.raster.node_position(k);
        let v = state.v[k];
        out.u[k][0] += mat[0][0] * x[0] + mat[0][1] * x[1] - v * a1;
        out.u[k][1] += mat[1][0] * x[0] + mat[1][1] * x[1] - v * a2;
        out.v[k] = v + a1 * x[0] + a2 * x[1];
    }
    out
}

/// `|I⁰(s) - I⁰(s ∼)|` without load.
pub fn invariance_check(state: &PlateState, params: &EquivalenceParams, density: &DensityField, domain: &PlateDomain) -> Result<f64> {
    if domain.mode == BoundaryMode::Clamped {
        return Err(Error::Precondition("rigid reparametrizations violate clamped boundary data".into()));
    }
    let zero = LoadSpec::zero(domain);
    let e0 = energy(state, density, &zero, domain)?;
    let e1 = energy(&apply_equivalence(state, params, domain), density, &zero, domain)?;
    Ok((e0 - e1).abs())
}

/// The six tangents of the gauge orbit at `state`: u-translations, v-shift,
/// in-plane rotation and the two `a` directions `(-v e_k, x_k)`.
pub fn gauge_tangents(state: &PlateState, domain: &PlateDomain) -> Vec<Vec<f64>> {
    let n = domain.node_count();
    let pos: Vec<[f64; 2]> = (0..n).map(|k| domain.raster.node_position(k)).collect();
    let mut out = vec![vec![0.0; 3 * n]; 6];
    for k in 0..n {
        out[0][2 * k] = 1.0;
        out[1][2 * k + 1] = 1.0;
        out[2][2 * n + k] = 1.0;
        out[3][2 * k] = pos[k][1];
        out[3][2 * k + 1] = -pos[k][0];
        for c in 0..2 {
            out[4 + c][2 * k + c] = -state.v[k];
            out[4 + c][2 * n + k] = pos[k][c];
        }
    }
    out
}

/// Removes the components of `x` along `basis` (made orthonormal first).
fn project_out(x: &mut [f64], basis: &[Vec<f64>]) {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for b in basis {
        let mut q = b.clone();
        for _ in 0..2 {
            for o in &ortho {
                let c = dot(&q, o);
                q.iter_mut().zip(o).for_each(|(qi, oi)| *qi -= c * oi);
            }
        }
        let nq = dot(&q, &q).sqrt();
        if nq > 1e-12 * dot(b, b).sqrt().max(f64::MIN_POSITIVE) {
            q.iter_mut().for_each(|v| *v /= nq);
            ortho.push(q);
        }
    }
    for o in &ortho {
        let c = dot(x, o);
        x.iter_mut().zip(o).for_each(|(xi, oi)| *xi -= c * oi);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimizeOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200, cg_tol: 1e-11, cg_max_iter: 5_000 }
    }
}

/// Mass-weighted means of the gauge quantities of a state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaugeReport {
    pub mean_u: [f64; 2],
    pub mean_v: f64,
    pub mean_grad_v: [f64; 2],
    /// Mean of `(∂2 u1 - ∂1 u2) / 2`.
    pub mean_rotation: f64,
}

pub fn gauge_report(state: &PlateState, domain: &PlateDomain) -> GaugeReport {
    let r = &domain.raster;
    let total: f64 = domain.masses.iter().sum();
    let u1: Vec<f64> = state.u.iter().map(|p| p[0]).collect();
    let u2: Vec<f64> = state.u.iter().map(|p| p[1]).collect();
    let (g1, g2, gv) = (nodal_gradient(r, &u1), nodal_gradient(r, &u2), nodal_gradient(r, &state.v));
    let mean = |f: &dyn Fn(usize) -> f64| (0..r.node_count()).map(|k| domain.masses[k] * f(k)).sum::<f64>() / total;
    GaugeReport {
        mean_u: [mean(&|k| u1[k]), mean(&|k| u2[k])],
        mean_v: mean(&|k| state.v[k]),
        mean_grad_v: [mean(&|k| gv[k][0]), mean(&|k| gv[k][1])],
        mean_rotation: mean(&|k| 0.5 * (g1[k][1] - g2[k][0])),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateSolution {
    pub state: PlateState,
    pub energy: f64,
    pub iterations: usize,
    /// Mass-weighted dual norm `sqrt(Σ g_k² / m_k)` of the (projected) gradient.
    pub gradient_norm: f64,
    pub energy_history: Vec<f64>,
    pub gauge: GaugeReport,
}

fn dual_norm(g: &[f64], domain: &PlateDomain, constrained: &[bool]) -> f64 {
    let n = domain.node_count();
    let mass = |i: usize| if i < 2 * n { domain.masses[i / 2] } else { domain.masses[i - 2 * n] };
    g.iter().enumerate().filter(|(i, _)| !constrained[*i]).map(|(i, v)| v * v / mass(i)).sum::<f64>().sqrt()
}

/// CG on a second-order model; `None` when CG stalls or meets negative curvature.
fn cg_block(
    state: &PlateState,
    density: &DensityField,
    domain: &PlateDomain,
    model: Model,
    rhs: &[f64],
    constrained: &[bool],
    opts: &MinimizeOptions,
) -> Option<Vec<f64>> {
    let dim = rhs.len();
    let op = FnOperator {
        dim,
        apply: |x: &[f64], y: &mut [f64]| model_apply(state, density, domain, model, x, y),
        diag: vec![1.0; dim],
    };
    let mut x = vec![0.0; dim];
    let report = conjugate_gradient(&op, rhs, &mut x, Some(constrained), opts.cg_tol, opts.cg_max_iter);
    (report.converged || report.residual <= 1e-6).then_some(x)
}

/// Alternating minimization: exact solve for `u` (the energy is quadratic in
/// `u` for fixed `v`), then a joint Newton step with Armijo backtracking.
pub fn minimize(
    density: &DensityField,
    load: &LoadSpec,
    domain: &PlateDomain,
    init: &PlateState,
    opts: &MinimizeOptions,
) -> Result<PlateSolution> {
    if !(opts.tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    init.check(domain)?;
    density.check(domain)?;
    load.check(domain)?;
    load.check_balanced(domain)?;
    let n = domain.node_count();
    let constrained = domain.constrained();
    let free = domain.mode == BoundaryMode::FreeGauged;
    let mut state = init.clone();
    state.constrain(domain);
    let mut e = energy_unchecked(&state, density, load, domain);
    let mut history = vec![e];
    let projected_gradient = |state: &PlateState| {
        let mut g = gradient_unchecked(state, density, load, domain);
        g.iter_mut().zip(&constrained).for_each(|(x, c)| if *c { *x = 0.0 });
        if free {
            project_out(&mut g, &gauge_tangents(state, domain));
        }
        let norm = dual_norm(&g, domain, &constrained);
        (g, norm)
    };

    for it in 0..opts.max_iter {
        // u-step: the energy is exactly quadratic in u for fixed v.
        // Near convergence the u-gradient is rounding noise outside the range
        // of the (singular) u-operator; the solve is skipped or rejected then.
        let g = gradient_unchecked(&state, density, load, domain);
        let mut rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        rhs[2 * n..].iter_mut().for_each(|x| *x = 0.0);
        if dual_norm(&rhs, domain, &constrained) > 0.1 * opts.tol * (1.0 + e.abs()) {
            if let Some(du) = cg_block(&state, density, domain, Model::MembraneU, &rhs, &constrained, opts) {
                let mut trial = state.clone();
                for k in 0..n {
                    trial.u[k][0] += du[2 * k];
                    trial.u[k][1] += du[2 * k + 1];
                }
                let et = energy_unchecked(&trial, density, load, domain);
                if et <= e {
                    state = trial;
                    e = et;
                }
            }
        }

        let (g, gnorm) = projected_gradient(&state);
        if gnorm <= opts.tol * (1.0 + e.abs()) {
            history.push(e);
            return Ok(PlateSolution {
                gauge: gauge_report(&state, domain),
                state,
                energy: e,
                iterations: it,
                gradient_norm: gnorm,
                energy_history: history,
            });
        }

        // Joint step: Newton, then Gauss–Newton, then steepest descent.
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut dir = cg_block(&state, density, domain, Model::Newton, &rhs, &constrained, opts)
            .filter(|d| dot(&g, d) < 0.0)
            .or_else(|| cg_block(&state, density, domain, Model::GaussNewton, &rhs, &constrained, opts))
            .unwrap_or_else(|| rhs.clone());
        if free {
            project_out(&mut dir, &gauge_tangents(&state, domain));
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = rhs;
            slope = dot(&g, &dir);
        }
        // Below the rounding floor of the energy the Armijo test is noise;
        // the full step is then judged by the gradient it leaves behind.
        if -slope <= 64.0 * f64::EPSILON * e.abs() {
            let x: Vec<f64> = state.to_vec().iter().zip(&dir).map(|(s, d)| s + d).collect();
            let trial = PlateState::from_vec(domain, &x)?;
            if projected_gradient(&trial).1 < gnorm {
                e = energy_unchecked(&trial, density, load, domain);
                state = trial;
                history.push(e);
                continue;
            }
        }
        let mut t = 1.0;
        loop {
            let x: Vec<f64> = state.to_vec().iter().zip(&dir).map(|(s, d)| s + t * d).collect();
            let trial = PlateState::from_vec(domain, &x)?;
            let et = energy_unchecked(&trial, density, load, domain);
            if et <= e + 1e-4 * t * slope {
                state = trial;
                e = et;
                break;
            }
            t *= 0.5;
            if t < 1e-14 {
                return Err(Error::LineSearchFailed);
            }
        }
        history.push(e);
    }
    Err(Error::IterationCap(opts.max_iter))
}

/// The linear plate problem with the membrane coupling removed: minimizes
/// `Σ w Q(0, -∇²v) - ∫ g v` over `v` with the domain's boundary data.
pub fn linear_kirchhoff(density: &DensityField, load: &LoadSpec, domain: &PlateDomain, opts: &MinimizeOptions) -> Result<PlateState> {
    density.check(domain)?;
    load.check(domain)?;
    load.check_balanced(domain)?;
    let n = domain.node_count();
    let zero = PlateState::zeros(domain);
    let mut rhs = vec![0.0; 3 * n];
    for k in 0..n {
        rhs[2 * n + k] = domain.masses[k] * load.g[k];
    }
    let x = cg_block(&zero, density, domain, Model::GaussNewtonV, &rhs, &domain.constrained(), opts)
        .ok_or(Error::NotConverged { iterations: opts.cg_max_iter, residual: f64::NAN })?;
    let mut out = PlateState::from_vec(domain, &x)?;
    if domain.mode == BoundaryMode::FreeGauged {
        let mean = gauge_report(&out, domain).mean_v;
        out.v.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(out)
}

/// Block-diagonal `diag(Qm, Qb)` from two 3×3 forms on `vec Sym2`.
pub fn block_density(membrane: Matrix3<f64>, bending: Matrix3<f64>) -> Matrix6<f64> {
    let mut q = Matrix6::zeros();
    q.fixed_view_mut::<3, 3>(0, 0).copy_from(&membrane);
    q.fixed_view_mut::<3, 3>(3, 3).copy_from(&bending);
    q
}
