//! Corrector minima `K_h(M, A)` and h-sweeps.
//!
//! For each thickness `h` the corrector energy is minimized over displacements
//! vanishing on the lateral boundary `∂A × I`. Two bounds hold exactly at the
//! discrete level and are checked on every solve: the zero displacement gives
//! `K ≤ β‖M‖²`, and for constant strains the cross term `∫ M : ∇'ψ'` vanishes
//! under the lateral constraint, giving `K ≥ α‖M‖²`.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fem3d::{apply_lateral_dirichlet, assemble, for_each_qp, solve_cg, ExtrudedGrid, RasterDomain};
use crate::microstructure::{sym, MicrostructureField, Sym2};

/// Solver knobs shared by every corrector solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub nz: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { nz: 8, tol: 1e-9, max_iter: 50_000 }
    }
}

/// `‖(ψ1, ψ2, hψ3)‖` split by component, each `sqrt(∫|·|² / volume)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Admissibility {
    pub psi1: f64,
    pub psi2: f64,
    pub h_psi3: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CorrectorResult {
    pub h: f64,
    /// Discrete minimum of the corrector energy.
    pub k_value: f64,
    /// `k_value` divided by the rasterized area.
    pub k_per_area: f64,
    pub area: f64,
    /// Energy of the zero displacement, `Σ_q w_q Q(ι(M))`.
    pub zero_energy: f64,
    pub grid: ExtrudedGrid,
    pub minimizer: Vec<f64>,
    pub admissibility: Admissibility,
    /// `‖sym ∇_h ψ‖_{L²}`.
    pub sym_norm: f64,
    pub cg_iterations: usize,
    pub residual: f64,
}

/// `‖M1 + x3 M2‖²_{L²(A×I)} = area (|M1|² + |M2|²/12)`.
pub fn strain_norm_squared(area: f64, m1: Sym2, m2: Sym2) -> f64 {
    area * (m1.norm_squared() + m2.norm_squared() / 12.0)
}

/// Computes the discrete corrector minimum on `A × I` at thickness `h`.
pub fn k_value(
    field: &MicrostructureField,
    h: f64,
    domain: &RasterDomain,
    m1: Sym2,
    m2: Sym2,
    opts: &SolverOptions,
) -> Result<CorrectorResult> {
    if !(h > 0.0) {
        return Err(invalid("h", format!("must be positive, got {h}")));
    }
    let grid = ExtrudedGrid::new(domain.clone(), opts.nz)?;
    let system = apply_lateral_dirichlet(assemble(&grid, field, h, m1, m2)?, &grid)?;
    let sol = solve_cg(&system, opts.tol, opts.max_iter);
    if !sol.report.converged {
        return Err(Error::NotConverged { iterations: sol.report.iterations, residual: sol.report.residual });
    }
    let k = system.energy(&sol.psi);
    let area = domain.area();
    let norm2 = strain_norm_squared(area, m1, m2);

    // Both bounds are exact for the discrete problem; the slack only absorbs rounding.
    let slack = 1e-10 * system.constant.max(f64::MIN_POSITIVE);
    let upper = field.beta() * norm2;
    if k > system.constant + slack || system.constant > upper * (1.0 + 1e-12) + slack {
        return Err(Error::BoundViolated(format!(
            "K = {k:e} exceeds zero-test energy {:e} / beta bound {upper:e}",
            system.constant
        )));
    }
    let lower = field.alpha() * norm2;
    if k < lower - slack - 1e-12 * lower {
        return Err(Error::BoundViolated(format!("K = {k:e} below alpha bound {lower:e}")));
    }

    let mut result = CorrectorResult {
        h,
        k_value: k,
        k_per_area: k / area,
        area,
        zero_energy: system.constant,
        grid,
        minimizer: sol.psi,
        admissibility: Admissibility::default(),
        sym_norm: 0.0,
        cg_iterations: sol.report.iterations,
        residual: sol.report.residual,
    };
    result.admissibility = admissibility_report(&result, h);
    let mut s2 = 0.0;
    for_each_qp(&result.grid, h, &result.minimizer, |q| s2 += q.weight * sym(&q.grad).norm_squared());
    result.sym_norm = s2.sqrt();
    Ok(result)
}

/// `‖(ψ1, ψ2, hψ3)‖_{L²}` of the minimizer, per component and normalized by volume.
pub fn admissibility_report(result: &CorrectorResult, h: f64) -> Admissibility {
    let mut acc = [0.0; 3];
    for_each_qp(&result.grid, h, &result.minimizer, |q| {
        acc[0] += q.weight * q.value[0] * q.value[0];
        acc[1] += q.weight * q.value[1] * q.value[1];
        acc[2] += q.weight * (h * q.value[2]).powi(2);
    });
    let vol = result.grid.volume();
    Admissibility {
        psi1: (acc[0] / vol).sqrt(),
        psi2: (acc[1] / vol).sqrt(),
        h_psi3: (acc[2] / vol).sqrt(),
        total: ((acc[0] + acc[1] + acc[2]) / vol).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub h: f64,
    pub k_value: f64,
    pub k_per_area: f64,
    pub area: f64,
    pub admissibility: f64,
    pub sym_norm: f64,
    pub cg_iters: usize,
    pub residual: f64,
}

impl From<&CorrectorResult> for SweepRow {
    fn from(r: &CorrectorResult) -> Self {
        Self {
            h: r.h,
            k_value: r.k_value,
            k_per_area: r.k_per_area,
            area: r.area,
            admissibility: r.admissibility.total,
            sym_norm: r.sym_norm,
            cg_iters: r.cg_iterations,
            residual: r.residual,
        }
    }
}

/// Rows in decreasing `h`, with the spread of `k_per_area` over the last three.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `max - min` of `k_per_area` over the tail.
    pub gap: f64,
    pub cauchy_tol: f64,
    pub cauchy_flag: bool,
    pub warnings: Vec<String>,
}

pub const SWEEP_TAIL: usize = 3;

impl SweepTable {
    fn from_rows(rows: Vec<SweepRow>, cauchy_tol: f64) -> Self {
        let tail = &rows[rows.len().saturating_sub(SWEEP_TAIL)..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.k_per_area), hi.max(r.k_per_area)));
        let gap = if tail.is_empty() { 0.0 } else { hi - lo };
        let scale = tail.last().map_or(0.0, |r| r.k_per_area.abs());
        let mut warnings = Vec::new();
        if tail.windows(2).any(|w| w[1].admissibility > w[0].admissibility * (1.0 + 1e-9) + 1e-15) {
            warnings.push("admissibility norm ‖(ψ1,ψ2,hψ3)‖ is not non-increasing over the tail".into());
        }
        let cauchy_flag = tail.len() == SWEEP_TAIL && gap <= cauchy_tol * scale;
        Self { rows, gap, cauchy_tol, cauchy_flag, warnings }
    }

    pub fn last(&self) -> Option<&SweepRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["h", "k_value", "k_per_area", "admissibility", "sym_norm", "cg_iters", "residual"])?;
        for r in &self.rows {
            w.write_record([
                fmt_num(r.h),
                fmt_num(r.k_value),
                fmt_num(r.k_per_area),
                fmt_num(r.admissibility),
                fmt_num(r.sym_norm),
                r.cg_iters.to_string(),
                fmt_num(r.residual),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Shortest round-trip decimal representation.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn check_h_list(h_list: &[f64]) -> Result<()> {
    if h_list.len() < SWEEP_TAIL {
        return Err(Error::Precondition(format!(
            "h_list needs at least {SWEEP_TAIL} values, got {}",
            h_list.len()
        )));
    }
    if h_list.iter().any(|h| !(*h > 0.0)) || h_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition("h_list must be positive and strictly decreasing".into()));
    }
    Ok(())
}

/// Runs [`k_value`] for every `h` on a fixed domain.
pub fn h_sweep(
    field: &MicrostructureField,
    domain: &RasterDomain,
    m1: Sym2,
    m2: Sym2,
    h_list: &[f64],
    opts: &SolverOptions,
    cauchy_tol: f64,
) -> Result<SweepTable> {
    h_sweep_with(field, |_| Ok(domain.clone()), m1, m2, h_list, opts, cauchy_tol)
}

/// Like [`h_sweep`], but the domain (and so its mesh) may depend on `h`,
/// e.g. to keep a fixed number of cells per oscillation period.
pub fn h_sweep_with(
    field: &MicrostructureField,
    domain_for: impl Fn(f64) -> Result<RasterDomain> + Sync,
    m1: Sym2,
    m2: Sym2,
    h_list: &[f64],
    opts: &SolverOptions,
    cauchy_tol: f64,
) -> Result<SweepTable> {
    check_h_list(h_list)?;
    use rayon::prelude::*;
    let results: Vec<Result<SweepRow>> = h_list
        .par_iter()
        .map(|&h| {
            let domain = domain_for(h)?;
            k_value(field, h, &domain, m1, m2, opts).map(|r| SweepRow::from(&r))
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(source) => {
                return Err(Error::SweepAborted {
                    partial: Box::new(SweepTable::from_rows(rows, cauchy_tol)),
                    source: Box::new(source),
                })
            }
        }
    }
    Ok(SweepTable::from_rows(rows, cauchy_tol))
}
