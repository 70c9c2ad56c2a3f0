//! Thin-domain displacement decomposition and the two-term strain split.
//!
//! A displacement on `A × I` splits as `ψ = ψ̂ + r∧x3e3 + ψ̄` where `ψ̂` is the
//! `x3`-average, `r` a rotation moment and `ψ̄` the remainder. The rotation
//! is regularized into a gradient `∇'φ`, and the transverse average into
//! `ψ̂3 = φ/h + w`, which gives
//! `sym ∇_h ψ = -x3 ι(∇'²φ) + sym ∇_h ψ̃ + o`.
//!
//! All in-plane fields live on the nodes of the base raster. Moments in `x3`
//! are integrated exactly for the piecewise-linear column interpolant, so
//! fields of the form `ψ̂0 + r0∧x3e3` are recovered exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fem3d::{for_each_qp, DisplacementField, ExtrudedGrid, RasterDomain};
use crate::linalg::{conjugate_gradient, CsrMatrix};
use crate::microstructure::{iota, sym, Mat3, Sym2};

/// Moment coefficient that makes `r = κ ∫ x3 (e3∧ψ)` exact on `I = (-1/2, 1/2)`.
pub const DEFAULT_KAPPA: f64 = 12.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GrisoParts {
    /// `∫_I ψ dx3` per in-plane node.
    pub psi_hat: Vec<[f64; 3]>,
    /// First two components of `κ ∫_I x3 (e3∧ψ) dx3` per in-plane node.
    pub r: Vec<[f64; 2]>,
    pub psi_bar: DisplacementField,
    pub kappa: f64,
}

fn check_shape(psi: &DisplacementField, grid: &ExtrudedGrid) -> Result<()> {
    if psi.node_count() != grid.node_count() {
        return Err(Error::ShapeMismatch { expected: grid.dof_count(), got: 3 * psi.node_count() });
    }
    Ok(())
}

/// `ψ̂ + r∧x3e3 = (ψ̂1 + r2 x3, ψ̂2 - r1 x3, ψ̂3)` sampled at the grid nodes.
fn plate_part(psi_hat: &[[f64; 3]], r: &[[f64; 2]], grid: &ExtrudedGrid) -> DisplacementField {
    let n2 = grid.base().node_count();
    let mut out = DisplacementField::zeros(grid);
    for k in 0..=grid.nz() {
        let z = grid.z(k);
        for n in 0..n2 {
            let (p, q) = (psi_hat[n], r[n]);
            out.set(grid.node(n, k), [p[0] + q[1] * z, p[1] - q[0] * z, p[2]]);
        }
    }
    out
}

pub fn decompose(psi: &DisplacementField, grid: &ExtrudedGrid, kappa: f64) -> Result<GrisoParts> {
    check_shape(psi, grid)?;
    let n2 = grid.base().node_count();
    let dz = grid.dz();
    let mut psi_hat = vec![[0.0; 3]; n2];
    let mut r = vec![[0.0; 2]; n2];
    for n in 0..n2 {
        let mut avg = [0.0; 3];
        let mut moment = [0.0; 3];
        for k in 0..grid.nz() {
            let (a, b) = (grid.z(k), grid.z(k + 1));
            let (fa, fb) = (psi.at(grid.node(n, k)), psi.at(grid.node(n, k + 1)));
            for c in 0..3 {
                avg[c] += 0.5 * dz * (fa[c] + fb[c]);
                // ∫ x f over the layer, exact for linear f.
                moment[c] += dz * ((2.0 * a + b) * fa[c] + (a + 2.0 * b) * fb[c]) / 6.0;
            }
        }
        psi_hat[n] = avg;
        // e3∧ψ = (-ψ2, ψ1, 0)
        r[n] = [-kappa * moment[1], kappa * moment[0]];
    }
    let plate = plate_part(&psi_hat, &r, grid);
    let bar: Vec<f64> = psi.as_slice().iter().zip(plate.as_slice()).map(|(a, b)| a - b).collect();
    Ok(GrisoParts { psi_hat, r, psi_bar: DisplacementField::from_vec(grid, bar)?, kappa })
}

pub fn reconstruct(parts: &GrisoParts, grid: &ExtrudedGrid) -> Result<DisplacementField> {
    let n2 = grid.base().node_count();
    for len in [parts.psi_hat.len(), parts.r.len()] {
        if len != n2 {
            return Err(Error::ShapeMismatch { expected: n2, got: len });
        }
    }
    check_shape(&parts.psi_bar, grid)?;
    let plate = plate_part(&parts.psi_hat, &parts.r, grid);
    let sum: Vec<f64> = plate.as_slice().iter().zip(parts.psi_bar.as_slice()).map(|(a, b)| a + b).collect();
    DisplacementField::from_vec(grid, sum)
}

/// Squared norms `∫|ψ|²`, `∫|∇_h ψ|²`, `∫|sym ∇_h ψ|²`.
fn norms_squared(grid: &ExtrudedGrid, h: f64, psi: &[f64]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for_each_qp(grid, h, psi, |q| {
        acc[0] += q.weight * q.value.iter().map(|v| v * v).sum::<f64>();
        acc[1] += q.weight * q.grad.norm_squared();
        acc[2] += q.weight * sym(&q.grad).norm_squared();
    });
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KornRatio {
    /// `‖sym ∇_h(ψ̂ + r∧x3e3)‖² + ‖∇_h ψ̄‖² + h⁻²‖ψ̄‖²`
    pub lhs: f64,
    /// `‖sym ∇_h ψ‖²`
    pub rhs: f64,
    pub ratio: f64,
}

pub fn korn_ratio(psi: &DisplacementField, grid: &ExtrudedGrid, h: f64) -> Result<KornRatio> {
    if !(h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    let parts = decompose(psi, grid, DEFAULT_KAPPA)?;
    let rhs = norms_squared(grid, h, psi.as_slice())[2];
    if !(rhs > 0.0) {
        return Err(Error::Precondition("sym ∇_h ψ vanishes; the Korn ratio is undefined".into()));
    }
    let plate = plate_part(&parts.psi_hat, &parts.r, grid);
    let p = norms_squared(grid, h, plate.as_slice());
    let b = norms_squared(grid, h, parts.psi_bar.as_slice());
    let lhs = p[2] + b[1] + b[0] / (h * h);
    Ok(KornRatio { lhs, rhs, ratio: lhs / rhs })
}

/// Lumped mass of every node: a quarter of each adjacent cell's area.
pub fn node_masses(domain: &RasterDomain) -> Vec<f64> {
    let quarter = domain.spacing() * domain.spacing() / 4.0;
    let mut m = vec![0.0; domain.node_count()];
    for &(i, j) in domain.cells() {
        for n in domain.cell_nodes(i, j) {
            m[n] += quarter;
        }
    }
    m
}

/// Bilinear shape values and physical gradients at local `(ξ, η)` for a cell of side `d`.
fn q1(xi: f64, eta: f64, d: f64) -> ([f64; 4], [[f64; 2]; 4]) {
    let mut n = [0.0; 4];
    let mut g = [[0.0; 2]; 4];
    for l in 0..4 {
        let (a, b) = (l & 1, l >> 1);
        let fx = if a == 1 { xi } else { 1.0 - xi };
        let fy = if b == 1 { eta } else { 1.0 - eta };
        let dx = if a == 1 { 1.0 } else { -1.0 };
        let dy = if b == 1 { 1.0 } else { -1.0 };
        n[l] = fx * fy;
        g[l] = [dx * fy / d, fx * dy / d];
    }
    (n, g)
}

const GAUSS_2D: [f64; 2] = crate::fem3d::GAUSS_01;

/// `sqrt(∫_A |∇'φ + (r2, -r1)|²)` for bilinear `φ` and `r`.
pub fn regularization_misfit(phi: &[f64], r: &[[f64; 2]], domain: &RasterDomain) -> f64 {
    let d = domain.spacing();
    let w = d * d / 4.0;
    let mut acc = 0.0;
    for &(i, j) in domain.cells() {
        let c = domain.cell_nodes(i, j);
        for xi in GAUSS_2D {
            for eta in GAUSS_2D {
                let (n, g) = q1(xi, eta, d);
                let mut v = [0.0; 2];
                for l in 0..4 {
                    let rn = r[c[l]];
                    v[0] += g[l][0] * phi[c[l]] + n[l] * rn[1];
                    v[1] += g[l][1] * phi[c[l]] - n[l] * rn[0];
                }
                acc += w * (v[0] * v[0] + v[1] * v[1]);
            }
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regularization {
    pub phi: Vec<f64>,
    /// `‖∇'φ + (r2, -r1)‖_{L²(A)}`
    pub misfit: f64,
    /// `‖(r2, -r1)‖_{L²(A)}`, the misfit of `φ = 0`.
    pub data_norm: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Least-squares fit of a gradient to `-(r2, -r1)` with bilinear elements,
/// normalized to zero mean on every connected component.
pub fn regularize(r: &[[f64; 2]], domain: &RasterDomain) -> Result<Regularization> {
    let nn = domain.node_count();
    if r.len() != nn {
        return Err(Error::ShapeMismatch { expected: nn, got: r.len() });
    }
    let d = domain.spacing();
    let w = d * d / 4.0;
    let mut triplets = Vec::with_capacity(16 * domain.cell_count());
    let mut rhs = vec![0.0; nn];
    for &(i, j) in domain.cells() {
        let c = domain.cell_nodes(i, j);
        for xi in GAUSS_2D {
            for eta in GAUSS_2D {
                let (n, g) = q1(xi, eta, d);
                let mut data = [0.0; 2];
                for l in 0..4 {
                    data[0] += n[l] * r[c[l]][1];
                    data[1] -= n[l] * r[c[l]][0];
                }
                for a in 0..4 {
                    rhs[c[a]] -= w * (g[a][0] * data[0] + g[a][1] * data[1]);
                    for b in 0..4 {
                        triplets.push((c[a], c[b], w * (g[a][0] * g[b][0] + g[a][1] * g[b][1])));
                    }
                }
            }
        }
    }
    let stiffness = CsrMatrix::from_triplets(nn, nn, &triplets);
    let mut phi = vec![0.0; nn];
    let report = conjugate_gradient(&stiffness, &rhs, &mut phi, None, 1e-12, 20 * nn + 100);
    if !report.converged {
        return Err(Error::NotConverged { iterations: report.iterations, residual: report.residual });
    }
    remove_component_means(domain, &mut phi);
    let zero = vec![0.0; nn];
    Ok(Regularization {
        misfit: regularization_misfit(&phi, r, domain),
        data_norm: regularization_misfit(&zero, r, domain),
        phi,
        iterations: report.iterations,
        residual: report.residual,
    })
}

/// Subtracts the lumped-mass mean on each connected component; returns the means.
fn remove_component_means(domain: &RasterDomain, f: &mut [f64]) -> Vec<f64> {
    let means = component_means(domain, f);
    let (_, label) = domain.node_components();
    for (v, &l) in f.iter_mut().zip(&label) {
        *v -= means[l];
    }
    means
}

fn component_means(domain: &RasterDomain, f: &[f64]) -> Vec<f64> {
    let (count, label) = domain.node_components();
    let mass = node_masses(domain);
    let mut sum = vec![0.0; count];
    let mut total = vec![0.0; count];
    for n in 0..f.len() {
        sum[label[n]] += mass[n] * f[n];
        total[label[n]] += mass[n];
    }
    sum.iter().zip(&total).map(|(s, t)| s / t).collect()
}

/// Nodal finite-difference gradient: central where both neighbours exist,
/// second-order one-sided next to the boundary, first-order as a last resort.
pub fn nodal_gradient(domain: &RasterDomain, f: &[f64]) -> Vec<[f64; 2]> {
    let d = domain.spacing();
    (0..domain.node_count())
        .map(|n| {
            let (i, j) = domain.node_lattice(n);
            let (i, j) = (i as isize, j as isize);
            let mut g = [0.0; 2];
            for (dir, slot) in g.iter_mut().enumerate() {
                let at = |s: isize| {
                    let (a, b) = if dir == 0 { (i + s, j) } else { (i, j + s) };
                    domain.node_at(a, b).map(|m| f[m])
                };
                let f0 = f[n];
                *slot = match (at(-2), at(-1), at(1), at(2)) {
                    (_, Some(m), Some(p), _) => (p - m) / (2.0 * d),
                    (_, _, Some(p), Some(pp)) => (-3.0 * f0 + 4.0 * p - pp) / (2.0 * d),
                    (Some(mm), Some(m), _, _) => (3.0 * f0 - 4.0 * m + mm) / (2.0 * d),
                    (_, _, Some(p), None) => (p - f0) / d,
                    (_, Some(m), None, _) => (f0 - m) / d,
                    _ => 0.0,
                };
            }
            g
        })
        .collect()
}

/// `sym D(Df)` with the nodal gradient `D`.
pub fn nodal_hessian(domain: &RasterDomain, f: &[f64]) -> Vec<Sym2> {
    let g = nodal_gradient(domain, f);
    let g1: Vec<f64> = g.iter().map(|v| v[0]).collect();
    let g2: Vec<f64> = g.iter().map(|v| v[1]).collect();
    let d1 = nodal_gradient(domain, &g1);
    let d2 = nodal_gradient(domain, &g2);
    (0..f.len()).map(|n| Sym2::new(d1[n][0], d2[n][1], 0.5 * (d1[n][1] + d2[n][0]))).collect()
}

/// Average against the tensor-product triangular kernel of the given radius,
/// renormalized over the nodes inside the domain.
pub fn mollify(domain: &RasterDomain, f: &[f64], radius: f64) -> Result<Vec<f64>> {
    let d = domain.spacing();
    if !(radius >= d) {
        return Err(invalid("mollify_radius", format!("{radius} is below the grid spacing {d}")));
    }
    let reach = (radius / d).floor() as isize;
    let mass = node_masses(domain);
    Ok((0..domain.node_count())
        .map(|n| {
            let (i, j) = domain.node_lattice(n);
            let (mut num, mut den) = (0.0, 0.0);
            for b in -reach..=reach {
                let ky = 1.0 - (b as f64 * d).abs() / radius;
                for a in -reach..=reach {
                    let Some(m) = domain.node_at(i as isize + a, j as isize + b) else { continue };
                    let k = ky * (1.0 - (a as f64 * d).abs() / radius) * mass[m];
                    num += k * f[m];
                    den += k;
                }
            }
            num / den
        })
        .collect())
}

/// The in-plane cell of element `e` and the local coordinates of `x` in it.
fn cell_local(grid: &ExtrudedGrid, e: usize, x: [f64; 3]) -> ([usize; 4], f64, f64) {
    let n2 = grid.base().node_count();
    let nodes = grid.element_nodes(e);
    let c = [nodes[0] % n2, nodes[1] % n2, nodes[2] % n2, nodes[3] % n2];
    let p0 = grid.base().node_position(c[0]);
    let d = grid.base().spacing();
    (c, (x[0] - p0[0]) / d, (x[1] - p0[1]) / d)
}

fn interpolate_sym(field: &[Sym2], c: [usize; 4], xi: f64, eta: f64) -> Sym2 {
    let (n, _) = q1(xi, eta, 1.0);
    (0..4).fold(Sym2::ZERO, |acc, l| acc + n[l] * field[c[l]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondSplit {
    pub parts: GrisoParts,
    /// Per-component mean of `ψ̂3` removed from `ψ3` before splitting.
    pub psi3_shift: Vec<f64>,
    pub regularization: Regularization,
    pub phi: Vec<f64>,
    /// `ψ̂3 - φ/h`
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
    pub psi_tilde: DisplacementField,
    /// Residual per quadrature point, in `for_each_qp` order.
    pub o_term: Vec<Mat3>,
    pub o_norm: f64,
    /// Norm of the mollification part `-h x3 ι(∇'² w̃)`.
    pub o_mollify_norm: f64,
    /// Norm of the rest, which comes from replacing derivatives by differences.
    pub o_discretization_norm: f64,
    /// Largest pointwise deviation of the reassembled identity.
    pub identity_error: f64,
    pub mollify_radius: f64,
}

/// Splits `sym ∇_h ψ = -x3 ι(∇'²φ) + sym ∇_h ψ̃ + o`.
///
/// `o` is the exact remainder of that identity: the mollification term
/// `-h x3 ι(∇'² w̃)` plus the difference between finite-difference and
/// finite-element derivatives. Both parts are reported.
pub fn second_form(
    psi: &DisplacementField,
    grid: &ExtrudedGrid,
    h: f64,
    mollify_radius: Option<f64>,
) -> Result<SecondSplit> {
    if !(h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    if grid.nz() < 4 {
        return Err(Error::Precondition(format!("second_form needs nz >= 4, got {}", grid.nz())));
    }
    check_shape(psi, grid)?;
    let radius = mollify_radius.unwrap_or_else(|| h.sqrt());
    let base = grid.base();
    let n2 = base.node_count();

    let first = decompose(psi, grid, DEFAULT_KAPPA)?;
    let hat3: Vec<f64> = first.psi_hat.iter().map(|p| p[2]).collect();
    let psi3_shift = component_means(base, &hat3);
    let (_, label) = base.node_components();
    let mut psi = psi.clone();
    for node in 0..grid.node_count() {
        let mut v = psi.at(node);
        v[2] -= psi3_shift[label[node % n2]];
        psi.set(node, v);
    }
    let parts = decompose(&psi, grid, DEFAULT_KAPPA)?;

    let regularization = regularize(&parts.r, base)?;
    let phi = regularization.phi.clone();
    let w: Vec<f64> = (0..n2).map(|n| parts.psi_hat[n][2] - phi[n] / h).collect();
    let w_tilde = mollify(base, &w, radius)?;
    let dphi = nodal_gradient(base, &phi);
    let dw = nodal_gradient(base, &w_tilde);
    let hess_phi = nodal_hessian(base, &phi);
    let hess_w = nodal_hessian(base, &w_tilde);

    let mut psi_tilde = DisplacementField::zeros(grid);
    for k in 0..=grid.nz() {
        let z = grid.z(k);
        for n in 0..n2 {
            let node = grid.node(n, k);
            let (p, r, b) = (parts.psi_hat[n], parts.r[n], parts.psi_bar.at(node));
            psi_tilde.set(
                node,
                [
                    p[0] + z * (dphi[n][0] + r[1]) + h * z * dw[n][0] + b[0],
                    p[1] + z * (dphi[n][1] - r[0]) + h * z * dw[n][1] + b[1],
                    w[n] - w_tilde[n] + b[2],
                ],
            );
        }
    }

    let mut lhs = Vec::new();
    let mut points = Vec::new();
    for_each_qp(grid, h, psi.as_slice(), |q| {
        lhs.push(sym(&q.grad));
        points.push((q.element, q.x, q.weight));
    });
    let mut tilde = Vec::with_capacity(lhs.len());
    for_each_qp(grid, h, psi_tilde.as_slice(), |q| tilde.push(sym(&q.grad)));

    let mut o_term = Vec::with_capacity(lhs.len());
    let (mut o2, mut om2, mut od2, mut identity_error) = (0.0, 0.0, 0.0, 0.0f64);
    for (idx, &(e, x, weight)) in points.iter().enumerate() {
        let (c, xi, eta) = cell_local(grid, e, x);
        let bend = -x[2] * iota(interpolate_sym(&hess_phi, c, xi, eta));
        let o = lhs[idx] - bend - tilde[idx];
        let om = -h * x[2] * iota(interpolate_sym(&hess_w, c, xi, eta));
        o2 += weight * o.norm_squared();
        om2 += weight * om.norm_squared();
        od2 += weight * (o - om).norm_squared();
        identity_error = identity_error.max((bend + tilde[idx] + o - lhs[idx]).amax());
        o_term.push(o);
    }

    Ok(SecondSplit {
        parts,
        psi3_shift,
        regularization,
        phi,
        w,
        w_tilde,
        psi_tilde,
        o_term,
        o_norm: o2.sqrt(),
        o_mollify_norm: om2.sqrt(),
        o_discretization_norm: od2.sqrt(),
        identity_error,
        mollify_radius: radius,
    })
}

/// Summary of a decomposition for JSON dumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrisoRecord {
    pub kappa: f64,
    pub h: f64,
    pub psi_hat_norm: f64,
    pub r_norm: f64,
    pub psi_bar_norm: f64,
    pub reconstruction_error: f64,
    pub korn: Option<KornRatio>,
}

impl GrisoRecord {
    pub fn new(psi: &DisplacementField, grid: &ExtrudedGrid, h: f64, kappa: f64) -> Result<Self> {
        let parts = decompose(psi, grid, kappa)?;
        let back = reconstruct(&parts, grid)?;
        let reconstruction_error =
            back.as_slice().iter().zip(psi.as_slice()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let mass = node_masses(grid.base());
        let psi_hat_norm = parts.psi_hat.iter().zip(&mass).map(|(p, m)| m * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])).sum::<f64>().sqrt();
        let r_norm = parts.r.iter().zip(&mass).map(|(p, m)| m * (p[0] * p[0] + p[1] * p[1])).sum::<f64>().sqrt();
        let psi_bar_norm = norms_squared(grid, h, parts.psi_bar.as_slice())[0].sqrt();
        Ok(Self {
            kappa,
            h,
            psi_hat_norm,
            r_norm,
            psi_bar_norm,
            reconstruction_error,
            korn: korn_ratio(psi, grid, h).ok(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRecord {
    pub h: f64,
    pub mollify_radius: f64,
    pub psi3_shift: Vec<f64>,
    pub phi_misfit: f64,
    pub phi_data_norm: f64,
    pub o_norm: f64,
    pub o_mollify_norm: f64,
    pub o_discretization_norm: f64,
    pub identity_error: f64,
}

impl SecondSplit {
    pub fn record(&self, h: f64) -> SplitRecord {
        SplitRecord {
            h,
            mollify_radius: self.mollify_radius,
            psi3_shift: self.psi3_shift.clone(),
            phi_misfit: self.regularization.misfit,
            phi_data_norm: self.regularization.data_norm,
            o_norm: self.o_norm,
            o_mollify_norm: self.o_mollify_norm,
            o_discretization_norm: self.o_discretization_norm,
            identity_error: self.identity_error,
        }
    }
}

/// Node coordinates and `(ψ̂, r)` per in-plane node.
pub fn parts_csv(parts: &GrisoParts, grid: &ExtrudedGrid) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x1", "x2", "psi_hat1", "psi_hat2", "psi_hat3", "r1", "r2"])?;
    for n in 0..grid.base().node_count() {
        let p = grid.base().node_position(n);
        let (a, r) = (parts.psi_hat[n], parts.r[n]);
        w.write_record([p[0], p[1], a[0], a[1], a[2], r[0], r[1]].map(crate::corrector::fmt_num))?;
    }
    finish_csv(w)
}

/// Node coordinates and field values per grid node.
pub fn field_csv(field: &DisplacementField, grid: &ExtrudedGrid) -> Result<String> {
    check_shape(field, grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x1", "x2", "x3", "v1", "v2", "v3"])?;
    for node in 0..grid.node_count() {
        let p = grid.node_position(node);
        let v = field.at(node);
        w.write_record([p[0], p[1], p[2], v[0], v[1], v[2]].map(crate::corrector::fmt_num))?;
    }
    finish_csv(w)
}

/// Reads a field written by [`field_csv`]; rows are matched to grid nodes by position.
pub fn field_from_csv(text: &str, grid: &ExtrudedGrid) -> Result<DisplacementField> {
    let base = grid.base();
    let d = base.spacing();
    let o = base.origin();
    let mut out = DisplacementField::zeros(grid);
    let mut seen = vec![false; grid.node_count()];
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != 6 {
            return Err(Error::ShapeMismatch { expected: 6, got: rec.len() });
        }
        let v = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| invalid("field", format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        let i = ((v[0] - o[0]) / d).round() as isize;
        let j = ((v[1] - o[1]) / d).round() as isize;
        let k = ((v[2] + 0.5) / grid.dz()).round() as isize;
        let n = base
            .node_at(i, j)
            .filter(|_| (0..=grid.nz() as isize).contains(&k))
            .ok_or_else(|| invalid("field", format!("point ({}, {}, {}) is not a grid node", v[0], v[1], v[2])))?;
        let node = grid.node(n, k as usize);
        out.set(node, [v[3], v[4], v[5]]);
        seen[node] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(invalid("field", format!("no value for node at {:?}", grid.node_position(missing))));
    }
    Ok(out)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `Σ a cos(π(k1 x1 + k2 x2) + θ)` with a handful of low modes.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothScalar {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl SmoothScalar {
    pub fn random(rng: &mut ChaCha8Rng, modes: usize) -> Self {
        let terms = (0..modes)
            .map(|_| {
                let k1 = rng.gen_range(0..3) as f64;
                let k2 = rng.gen_range(0..3) as f64;
                let a = rng.gen_range(-1.0..1.0) / (1.0 + k1 + k2);
                (a, k1, k2, rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self { terms }
    }

    pub fn value(&self, x: [f64; 2]) -> f64 {
        self.terms.iter().map(|&(a, k1, k2, t)| a * (PI * (k1 * x[0] + k2 * x[1]) + t).cos()).sum()
    }

    pub fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
        self.terms.iter().fold([0.0; 2], |g, &(a, k1, k2, t)| {
            let s = -a * PI * (PI * (k1 * x[0] + k2 * x[1]) + t).sin();
            [g[0] + s * k1, g[1] + s * k2]
        })
    }
}

/// Seeded smooth displacement `ψ_c = Σ_p x3ᵖ S_cp(x')`, `p ≤ 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothField {
    coeffs: Vec<SmoothScalar>,
}

impl SmoothField {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { coeffs: (0..9).map(|_| SmoothScalar::random(&mut rng, 3)).collect() }
    }

    pub fn sample(&self, grid: &ExtrudedGrid) -> DisplacementField {
        DisplacementField::from_fn(grid, |x| {
            std::array::from_fn(|c| (0..3).map(|p| x[2].powi(p as i32) * self.coeffs[3 * c + p].value([x[0], x[1]])).sum())
        })
    }
}

/// Seeded family `ψʰ = (h u - h x3 ∇'φ0, φ0 + g)`: bounded `sym ∇_h ψʰ`,
/// `(ψ1, ψ2, hψ3) -> 0`, and a transverse part `g` that the rotations do not
/// account for.
#[derive(Debug, Clone, PartialEq)]
pub struct KirchhoffFamily {
    u: [SmoothScalar; 2],
    phi0: SmoothScalar,
    g: SmoothScalar,
}

impl KirchhoffFamily {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || SmoothScalar::random(&mut rng, 3);
        Self { u: [next(), next()], phi0: next(), g: next() }
    }

    pub fn sample(&self, grid: &ExtrudedGrid, h: f64) -> DisplacementField {
        DisplacementField::from_fn(grid, |x| {
            let p = [x[0], x[1]];
            let dphi = self.phi0.gradient(p);
            [
                h * self.u[0].value(p) - h * x[2] * dphi[0],
                h * self.u[1].value(p) - h * x[2] * dphi[1],
                self.phi0.value(p) + self.g.value(p),
            ]
        })
    }
}
