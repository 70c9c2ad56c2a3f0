//! Trilinear hexahedral elements on extruded raster domains `A × (-1/2, 1/2)`.
//!
//! The in-plane domain is a set of square cells on a regular lattice; the
//! thickness direction is split into `nz` uniform layers. Gradients are the
//! scaled gradients `(∂1, ∂2, h⁻¹ ∂3)`, and the corrector energy is the
//! quadratic functional
//!
//! ```text
//! E(ψ) = Σ_q w_q Q^h(x_q, ι(M1 + x3 M2) + ∇_h ψ(x_q)) = ½ ψᵀAψ + bᵀψ + c
//! ```
//!
//! integrated with 2×2×2 Gauss points per hexahedron.

use nalgebra::{SMatrix, Vector6};

use crate::error::{invalid, Error, Result};
use crate::linalg::{conjugate_gradient, dot, CgReport, CsrMatrix};
use crate::microstructure::{iota, sym_vec, Mat3, MicrostructureField, Sym2};

const ABSENT: u32 = u32::MAX;

/// Gauss abscissae on `[0, 1]`.
pub(crate) const GAUSS_01: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];

/// Square cells of side `spacing` on a lattice anchored at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterDomain {
    origin: [f64; 2],
    spacing: f64,
    nx: usize,
    ny: usize,
    occupied: Vec<bool>,
    cells: Vec<(usize, usize)>,
    /// `(nx+1)(ny+1)` lattice points -> node number, `ABSENT` when unused.
    node_of: Vec<u32>,
    nodes: Vec<(usize, usize)>,
    boundary: Vec<bool>,
}

impl RasterDomain {
    /// Domain from an occupancy bitmap (`occupied[j * nx + i]` for cell `(i, j)`).
    pub fn from_mask(origin: [f64; 2], spacing: f64, nx: usize, ny: usize, occupied: Vec<bool>) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(invalid("spacing", format!("must be positive, got {spacing}")));
        }
        if occupied.len() != nx * ny {
            return Err(Error::ShapeMismatch { expected: nx * ny, got: occupied.len() });
        }
        let cells: Vec<(usize, usize)> = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .filter(|&(i, j)| occupied[j * nx + i])
            .collect();
        if cells.is_empty() {
            return Err(invalid("domain", "no occupied cells"));
        }
        let stride = nx + 1;
        let mut node_of = vec![ABSENT; (nx + 1) * (ny + 1)];
        for &(i, j) in &cells {
            for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                node_of[(j + dj) * stride + i + di] = 0;
            }
        }
        let mut nodes = Vec::new();
        for j in 0..=ny {
            for i in 0..=nx {
                let slot = &mut node_of[j * stride + i];
                if *slot != ABSENT {
                    *slot = nodes.len() as u32;
                    nodes.push((i, j));
                }
            }
        }
        let cell_occ = |i: isize, j: isize| {
            i >= 0 && j >= 0 && (i as usize) < nx && (j as usize) < ny && occupied[j as usize * nx + i as usize]
        };
        let boundary = nodes
            .iter()
            .map(|&(i, j)| {
                let (i, j) = (i as isize, j as isize);
                !(cell_occ(i - 1, j - 1) && cell_occ(i, j - 1) && cell_occ(i - 1, j) && cell_occ(i, j))
            })
            .collect();
        Ok(Self { origin, spacing, nx, ny, occupied, cells, node_of, nodes, boundary })
    }

    /// Axis-aligned rectangle `[origin, origin + size]`; `size / spacing` must be integral.
    pub fn rectangle(origin: [f64; 2], size: [f64; 2], spacing: f64) -> Result<Self> {
        let count = |len: f64| -> Result<usize> {
            let n = (len / spacing).round();
            if n < 1.0 || (n * spacing - len).abs() > 1e-9 * len.max(1.0) {
                return Err(invalid("spacing", format!("side {len} is not a multiple of {spacing}")));
            }
            Ok(n as usize)
        };
        let (nx, ny) = (count(size[0])?, count(size[1])?);
        Self::from_mask(origin, spacing, nx, ny, vec![true; nx * ny])
    }

    pub fn square(origin: [f64; 2], side: f64, spacing: f64) -> Result<Self> {
        Self::rectangle(origin, [side, side], spacing)
    }

    /// Union of two domains on the same lattice; overlapping cells are rejected.
    pub fn disjoint_union(&self, other: &RasterDomain) -> Result<Self> {
        if (self.spacing - other.spacing).abs() > 1e-12 * self.spacing {
            return Err(invalid("spacing", "domains use different spacings"));
        }
        let offset = |o: f64, p: f64| -> Result<i64> {
            let k = ((p - o) / self.spacing).round();
            if (k * self.spacing - (p - o)).abs() > 1e-9 {
                return Err(invalid("origin", "domains are not on a common lattice"));
            }
            Ok(k as i64)
        };
        let ox = offset(self.origin[0], other.origin[0])?;
        let oy = offset(self.origin[1], other.origin[1])?;
        let x0 = ox.min(0);
        let y0 = oy.min(0);
        let x1 = (self.nx as i64).max(ox + other.nx as i64);
        let y1 = (self.ny as i64).max(oy + other.ny as i64);
        let (nx, ny) = ((x1 - x0) as usize, (y1 - y0) as usize);
        let mut occ = vec![false; nx * ny];
        for (dom, dx, dy) in [(self, -x0, -y0), (other, ox - x0, oy - y0)] {
            for &(i, j) in &dom.cells {
                let slot = &mut occ[(j as i64 + dy) as usize * nx + (i as i64 + dx) as usize];
                if *slot {
                    return Err(invalid("domain", "the two domains overlap"));
                }
                *slot = true;
            }
        }
        let origin = [
            self.origin[0] + x0 as f64 * self.spacing,
            self.origin[1] + y0 as f64 * self.spacing,
        ];
        Self::from_mask(origin, self.spacing, nx, ny, occ)
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn is_occupied(&self, i: usize, j: usize) -> bool {
        i < self.nx && j < self.ny && self.occupied[j * self.nx + i]
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn area(&self) -> f64 {
        self.cells.len() as f64 * self.spacing * self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Lattice coordinates of node `n`.
    pub fn node_lattice(&self, n: usize) -> (usize, usize) {
        self.nodes[n]
    }

    pub fn node_position(&self, n: usize) -> [f64; 2] {
        let (i, j) = self.nodes[n];
        [self.origin[0] + i as f64 * self.spacing, self.origin[1] + j as f64 * self.spacing]
    }

    /// Node number at lattice point `(i, j)`, if that point is a node.
    pub fn node_at(&self, i: isize, j: isize) -> Option<usize> {
        if i < 0 || j < 0 || i as usize > self.nx || j as usize > self.ny {
            return None;
        }
        let v = self.node_of[j as usize * (self.nx + 1) + i as usize];
        (v != ABSENT).then_some(v as usize)
    }

    /// Corner nodes of cell `(i, j)` in the order `(0,0), (1,0), (0,1), (1,1)`.
    pub fn cell_nodes(&self, i: usize, j: usize) -> [usize; 4] {
        let s = self.nx + 1;
        [
            self.node_of[j * s + i] as usize,
            self.node_of[j * s + i + 1] as usize,
            self.node_of[(j + 1) * s + i] as usize,
            self.node_of[(j + 1) * s + i + 1] as usize,
        ]
    }

    pub fn is_boundary_node(&self, n: usize) -> bool {
        self.boundary[n]
    }

    pub fn boundary_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&n| self.boundary[n])
    }

    /// Connected component label of every node (nodes sharing a cell are connected).
    pub fn node_components(&self) -> (usize, Vec<usize>) {
        let mut parent: Vec<usize> = (0..self.nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j) in &self.cells {
            let c = self.cell_nodes(i, j);
            let r0 = find(&mut parent, c[0]);
            for &n in &c[1..] {
                let r = find(&mut parent, n);
                parent[r] = r0;
            }
        }
        let mut label = vec![usize::MAX; self.nodes.len()];
        let mut count = 0;
        let mut root_label = std::collections::HashMap::new();
        for n in 0..self.nodes.len() {
            let r = find(&mut parent, n);
            let l = *root_label.entry(r).or_insert_with(|| {
                count += 1;
                count - 1
            });
            label[n] = l;
        }
        (count, label)
    }

    /// Every cell split into four.
    pub fn refined(&self) -> RasterDomain {
        let (nx, ny) = (2 * self.nx, 2 * self.ny);
        let occ = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| self.occupied[(j / 2) * self.nx + i / 2])
            .collect();
        Self::from_mask(self.origin, self.spacing / 2.0, nx, ny, occ).expect("refinement of a valid domain")
    }
}

/// Cells whose centres lie in the closed Euclidean disc `B(x0, r)`, on the
/// lattice `spacing · Z²`.
pub fn rasterize_ball(x0: [f64; 2], r: f64, spacing: f64) -> Result<RasterDomain> {
    if !(spacing > 0.0) {
        return Err(invalid("spacing", format!("must be positive, got {spacing}")));
    }
    if !(r >= 2.0 * spacing) {
        return Err(Error::UnderResolved { radius: r, spacing });
    }
    let i0 = ((x0[0] - r) / spacing).floor() as i64;
    let j0 = ((x0[1] - r) / spacing).floor() as i64;
    let i1 = ((x0[0] + r) / spacing).ceil() as i64;
    let j1 = ((x0[1] + r) / spacing).ceil() as i64;
    let (nx, ny) = ((i1 - i0) as usize, (j1 - j0) as usize);
    let origin = [i0 as f64 * spacing, j0 as f64 * spacing];
    let occ = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let cx = origin[0] + (i as f64 + 0.5) * spacing - x0[0];
            let cy = origin[1] + (j as f64 + 0.5) * spacing - x0[1];
            cx * cx + cy * cy <= r * r
        })
        .collect();
    RasterDomain::from_mask(origin, spacing, nx, ny, occ)
}

/// `A × I` with `nz` uniform layers across `I = [-1/2, 1/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrudedGrid {
    base: RasterDomain,
    nz: usize,
}

impl ExtrudedGrid {
    pub fn new(base: RasterDomain, nz: usize) -> Result<Self> {
        if nz < 2 {
            return Err(invalid("nz", format!("need at least 2 layers, got {nz}")));
        }
        Ok(Self { base, nz })
    }

    pub fn base(&self) -> &RasterDomain {
        &self.base
    }

    pub fn nz(&self) -> usize {
        self.nz
    }

    pub fn dz(&self) -> f64 {
        1.0 / self.nz as f64
    }

    pub fn z(&self, k: usize) -> f64 {
        -0.5 + k as f64 / self.nz as f64
    }

    pub fn node_count(&self) -> usize {
        self.base.node_count() * (self.nz + 1)
    }

    pub fn dof_count(&self) -> usize {
        3 * self.node_count()
    }

    /// 3D node number of in-plane node `n` on level `k`.
    pub fn node(&self, n: usize, k: usize) -> usize {
        k * self.base.node_count() + n
    }

    pub fn node_position(&self, node: usize) -> [f64; 3] {
        let n2 = self.base.node_count();
        let p = self.base.node_position(node % n2);
        [p[0], p[1], self.z(node / n2)]
    }

    pub fn element_count(&self) -> usize {
        self.base.cell_count() * self.nz
    }

    /// Nodes of element `e`; local node `l = a + 2b + 4c` sits at corner `(a, b, c)`.
    pub fn element_nodes(&self, e: usize) -> [usize; 8] {
        let (cell, k) = (e % self.base.cell_count(), e / self.base.cell_count());
        let (i, j) = self.base.cells[cell];
        let c = self.base.cell_nodes(i, j);
        let mut out = [0; 8];
        for (l, slot) in out.iter_mut().enumerate() {
            *slot = self.node(c[l & 3], k + (l >> 2));
        }
        out
    }

    /// Physical position of local coordinates `xi ∈ [0,1]³` in element `e`.
    pub fn element_point(&self, e: usize, xi: [f64; 3]) -> [f64; 3] {
        let (cell, k) = (e % self.base.cell_count(), e / self.base.cell_count());
        let (i, j) = self.base.cells[cell];
        let d = self.base.spacing;
        [
            self.base.origin[0] + (i as f64 + xi[0]) * d,
            self.base.origin[1] + (j as f64 + xi[1]) * d,
            self.z(k) + xi[2] * self.dz(),
        ]
    }

    /// Volume of `A × I`.
    pub fn volume(&self) -> f64 {
        self.base.area()
    }

    /// The grid with both the in-plane spacing and the layer thickness halved.
    pub fn refined(&self) -> ExtrudedGrid {
        ExtrudedGrid { base: self.base.refined(), nz: 2 * self.nz }
    }
}

/// One displacement 3-vector per grid node, stored flat as `[ψ1, ψ2, ψ3]` per node.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    values: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(grid: &ExtrudedGrid) -> Self {
        Self { values: vec![0.0; grid.dof_count()] }
    }

    pub fn from_vec(grid: &ExtrudedGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.dof_count() {
            return Err(Error::ShapeMismatch { expected: grid.dof_count(), got: values.len() });
        }
        Ok(Self { values })
    }

    /// Samples `f(x) -> ψ(x)` at every node.
    pub fn from_fn(grid: &ExtrudedGrid, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut values = Vec::with_capacity(grid.dof_count());
        for node in 0..grid.node_count() {
            values.extend_from_slice(&f(grid.node_position(node)));
        }
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn node_count(&self) -> usize {
        self.values.len() / 3
    }

    pub fn at(&self, node: usize) -> [f64; 3] {
        [self.values[3 * node], self.values[3 * node + 1], self.values[3 * node + 2]]
    }

    pub fn set(&mut self, node: usize, v: [f64; 3]) {
        self.values[3 * node..3 * node + 3].copy_from_slice(&v);
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Trilinear shape functions and their reference gradients at `xi`.
fn shape(xi: [f64; 3]) -> ([f64; 8], [[f64; 3]; 8]) {
    let mut n = [0.0; 8];
    let mut g = [[0.0; 3]; 8];
    for l in 0..8 {
        let bits = [l & 1, (l >> 1) & 1, (l >> 2) & 1];
        let f: [f64; 3] = std::array::from_fn(|d| if bits[d] == 1 { xi[d] } else { 1.0 - xi[d] });
        let df: [f64; 3] = std::array::from_fn(|d| if bits[d] == 1 { 1.0 } else { -1.0 });
        n[l] = f[0] * f[1] * f[2];
        g[l] = [df[0] * f[1] * f[2], f[0] * df[1] * f[2], f[0] * f[1] * df[2]];
    }
    (n, g)
}

/// A point in element `element` at local coordinates `local ∈ [0,1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint {
    pub element: usize,
    pub local: [f64; 3],
}

/// Physical scaled gradients `(∂1 N, ∂2 N, h⁻¹ ∂3 N)` of the shape functions.
fn scaled_shape_gradients(grid: &ExtrudedGrid, h: f64, local: [f64; 3]) -> ([f64; 8], [[f64; 3]; 8]) {
    let (n, g) = shape(local);
    let d = grid.base.spacing;
    let s = [1.0 / d, 1.0 / d, 1.0 / (grid.dz() * h)];
    (n, g.map(|gl| [gl[0] * s[0], gl[1] * s[1], gl[2] * s[2]]))
}

/// `∇_h ψ` at a point: column `j` holds the derivative in direction `j`, the
/// third column scaled by `1/h`.
pub fn scaled_gradient(grid: &ExtrudedGrid, h: f64, psi: &DisplacementField, q: QuadPoint) -> Mat3 {
    let (_, g) = scaled_shape_gradients(grid, h, q.local);
    let nodes = grid.element_nodes(q.element);
    let mut out = Mat3::zeros();
    for (l, &node) in nodes.iter().enumerate() {
        let v = psi.at(node);
        for c in 0..3 {
            for d in 0..3 {
                out[(c, d)] += v[c] * g[l][d];
            }
        }
    }
    out
}

/// Field value and scaled gradient at one quadrature point.
pub struct QpSample {
    pub element: usize,
    pub x: [f64; 3],
    pub weight: f64,
    pub value: [f64; 3],
    pub grad: Mat3,
}

/// Visits every 2×2×2 Gauss point of the grid in element order.
pub fn for_each_qp(grid: &ExtrudedGrid, h: f64, psi: &[f64], mut f: impl FnMut(&QpSample)) {
    let w = grid.base.spacing * grid.base.spacing * grid.dz() / 8.0;
    let tables: Vec<([f64; 3], [f64; 8], [[f64; 3]; 8])> = gauss_points()
        .map(|xi| {
            let (n, g) = scaled_shape_gradients(grid, h, xi);
            (xi, n, g)
        })
        .collect();
    for e in 0..grid.element_count() {
        let nodes = grid.element_nodes(e);
        for (xi, n, g) in &tables {
            let mut value = [0.0; 3];
            let mut grad = Mat3::zeros();
            for (l, &node) in nodes.iter().enumerate() {
                let v = &psi[3 * node..3 * node + 3];
                for c in 0..3 {
                    value[c] += v[c] * n[l];
                    for d in 0..3 {
                        grad[(c, d)] += v[c] * g[l][d];
                    }
                }
            }
            f(&QpSample { element: e, x: grid.element_point(e, *xi), weight: w, value, grad });
        }
    }
}

pub(crate) fn gauss_points() -> impl Iterator<Item = [f64; 3]> {
    (0..8).map(|q| [GAUSS_01[q & 1], GAUSS_01[(q >> 1) & 1], GAUSS_01[(q >> 2) & 1]])
}

/// `E(ψ) = ½ ψᵀAψ + bᵀψ + c`, with a mask of constrained (zero) entries.
#[derive(Debug, Clone)]
pub struct QuadSystem {
    pub matrix: CsrMatrix,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub constrained: Vec<bool>,
}

impl QuadSystem {
    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn energy(&self, psi: &[f64]) -> f64 {
        let mut a = vec![0.0; psi.len()];
        self.matrix.mul_vec(psi, &mut a);
        0.5 * dot(psi, &a) + dot(&self.linear, psi) + self.constant
    }

    /// `Aψ + b`.
    pub fn gradient(&self, psi: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; psi.len()];
        self.matrix.mul_vec(psi, &mut a);
        a.iter().zip(&self.linear).map(|(x, y)| x + y).collect()
    }

    pub fn free_dof_count(&self) -> usize {
        self.constrained.iter().filter(|c| !**c).count()
    }
}

type Bmat = SMatrix<f64, 6, 24>;

/// Strain-displacement matrix: `sym_vec(∇_h ψ) = B ψ_e` for the 24 element dofs.
fn strain_matrix(g: &[[f64; 3]; 8]) -> Bmat {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut b = Bmat::zeros();
    for l in 0..8 {
        let [g1, g2, g3] = g[l];
        // dof 3l + c moves component c; ∇ψ gets row c equal to g.
        b[(0, 3 * l)] = g1;
        b[(1, 3 * l + 1)] = g2;
        b[(2, 3 * l + 2)] = g3;
        b[(3, 3 * l)] = s * g2;
        b[(3, 3 * l + 1)] = s * g1;
        b[(4, 3 * l)] = s * g3;
        b[(4, 3 * l + 2)] = s * g1;
        b[(5, 3 * l + 1)] = s * g3;
        b[(5, 3 * l + 2)] = s * g2;
    }
    b
}

/// Node-block sparsity pattern: every dof row of node `a` has columns
/// `3·nb + c` for each neighbour `nb` of `a`.
struct BlockPattern {
    neighbours: Vec<Vec<u32>>,
}

impl BlockPattern {
    fn new(grid: &ExtrudedGrid) -> Self {
        let mut neighbours: Vec<Vec<u32>> = vec![Vec::new(); grid.node_count()];
        for e in 0..grid.element_count() {
            let nodes = grid.element_nodes(e);
            for &a in &nodes {
                neighbours[a].extend(nodes.iter().map(|&b| b as u32));
            }
        }
        for list in &mut neighbours {
            list.sort_unstable();
            list.dedup();
        }
        Self { neighbours }
    }

    fn matrix(&self) -> CsrMatrix {
        let n = self.neighbours.len();
        let mut row_ptr = Vec::with_capacity(3 * n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for list in &self.neighbours {
            for _ in 0..3 {
                for &b in list {
                    cols.extend([3 * b, 3 * b + 1, 3 * b + 2]);
                }
                row_ptr.push(cols.len());
            }
        }
        CsrMatrix::from_pattern(3 * n, row_ptr, cols)
    }

    fn slot(&self, a: usize, b: usize) -> usize {
        self.neighbours[a].binary_search(&(b as u32)).expect("element nodes are neighbours")
    }
}

/// Assembles `E(ψ) = Σ_q w_q Q^h(x_q, ι(M1 + x3 M2) + ∇_h ψ)`.
pub fn assemble(grid: &ExtrudedGrid, field: &MicrostructureField, h: f64, m1: Sym2, m2: Sym2) -> Result<QuadSystem> {
    if !(h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    let pattern = BlockPattern::new(grid);
    let mut matrix = pattern.matrix();
    let mut linear = vec![0.0; grid.dof_count()];
    let mut constant = 0.0;
    let w = grid.base.spacing * grid.base.spacing * grid.dz() / 8.0;
    let tables: Vec<([f64; 3], Bmat)> = gauss_points()
        .map(|xi| (xi, strain_matrix(&scaled_shape_gradients(grid, h, xi).1)))
        .collect();

    for e in 0..grid.element_count() {
        let nodes = grid.element_nodes(e);
        let mut ke = SMatrix::<f64, 24, 24>::zeros();
        let mut fe = SMatrix::<f64, 24, 1>::zeros();
        for (xi, b) in &tables {
            let x = grid.element_point(e, *xi);
            let c = *field.form_at(h, x)?.matrix();
            let e0: Vector6<f64> = sym_vec(&iota(m1 + x[2] * m2));
            let cb = c * b;
            ke += (2.0 * w) * b.transpose() * cb;
            let ce0 = c * e0;
            fe += (2.0 * w) * b.transpose() * ce0;
            constant += w * e0.dot(&ce0);
        }
        let mut starts = [[0usize; 3]; 8];
        for (la, &na) in nodes.iter().enumerate() {
            for ca in 0..3 {
                starts[la][ca] = matrix.row_start(3 * na + ca);
                linear[3 * na + ca] += fe[3 * la + ca];
            }
        }
        let vals = matrix.values_mut();
        for (la, &na) in nodes.iter().enumerate() {
            for (lb, &nb) in nodes.iter().enumerate() {
                let pos = 3 * pattern.slot(na, nb);
                for ca in 0..3 {
                    let start = starts[la][ca] + pos;
                    for cb in 0..3 {
                        vals[start + cb] += ke[(3 * la + ca, 3 * lb + cb)];
                    }
                }
            }
        }
    }
    Ok(QuadSystem { matrix, linear, constant, constrained: vec![false; grid.dof_count()] })
}

/// Pins all three components to zero on the lateral boundary `∂A × I`.
pub fn apply_lateral_dirichlet(mut system: QuadSystem, grid: &ExtrudedGrid) -> Result<QuadSystem> {
    if system.dim() != grid.dof_count() {
        return Err(Error::ShapeMismatch { expected: grid.dof_count(), got: system.dim() });
    }
    let n2 = grid.base.node_count();
    for node in 0..grid.node_count() {
        if grid.base.is_boundary_node(node % n2) {
            system.constrained[3 * node..3 * node + 3].iter_mut().for_each(|c| *c = true);
        }
    }
    if system.free_dof_count() == 0 {
        return Err(Error::DegenerateDomain);
    }
    Ok(system)
}

/// Minimizer of a constrained [`QuadSystem`] and the CG diagnostics.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub psi: Vec<f64>,
    pub report: CgReport,
}

/// Solves `Aψ = -b` on the free dofs with Jacobi-preconditioned CG from `ψ = 0`.
/// Non-convergence is reported in `report.converged`, not as an error.
pub fn solve_cg(system: &QuadSystem, tol: f64, max_iter: usize) -> CgSolution {
    let rhs: Vec<f64> = system.linear.iter().map(|v| -v).collect();
    let mut psi = vec![0.0; system.dim()];
    let report = conjugate_gradient(&system.matrix, &rhs, &mut psi, Some(&system.constrained), tol, max_iter);
    CgSolution { psi, report }
}

/// `(Aψ+b)·d` against the central difference `(E(ψ+sd) - E(ψ-sd)) / 2s`.
pub fn gradient_check(system: &QuadSystem, psi: &[f64], direction: &[f64], step: f64) -> Result<(f64, f64)> {
    if !(step > 0.0) {
        return Err(invalid("step", "must be positive"));
    }
    let analytic = dot(&system.gradient(psi), direction);
    let shifted = |s: f64| -> Vec<f64> { psi.iter().zip(direction).map(|(p, d)| p + s * d).collect() };
    let numeric = (system.energy(&shifted(step)) - system.energy(&shifted(-step))) / (2.0 * step);
    Ok((analytic, numeric))
}
