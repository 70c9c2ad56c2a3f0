//! The five subcommands. Each fills a [`RunReport`] and writes its tables.

use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use vkh_core::corrector::{fmt_num, SolverOptions};
use vkh_core::effective::{
    homogeneous_plate_density, polarize, property_suite, DensityOptions, DensityRecord, EffectiveDensity,
    LimitFixtures, PropertyFixtures, SuiteTolerances, NON_CONVERGED,
};
use vkh_core::fem3d::{DisplacementField, ExtrudedGrid, RasterDomain};
use vkh_core::griso::{
    decompose, field_from_csv, korn_ratio, parts_csv, second_form, GrisoRecord, KirchhoffFamily, SmoothField,
    SmoothScalar,
};
use vkh_core::microstructure::{from_upper_triangle, MicrostructureField, Sym2};
use vkh_core::plate::{
    invariance_check, linear_kirchhoff, minimize, BoundaryMode, DensityField, LoadSpec, MinimizeOptions, PlateDomain,
    PlateState,
};

use crate::config::{DensitySource, LoadConfig, LoadedConfig, RectSpec};
use crate::error::{CliError, StageExt};
use crate::report::{Check, Output, RunReport};

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn solver_options(loaded: &LoadedConfig, nz: usize) -> SolverOptions {
    let s = loaded.config.solver;
    SolverOptions { nz, tol: s.tol, max_iter: s.max_iter }
}

fn raster(r: &RectSpec, spacing: f64, field: &'static str) -> Result<RasterDomain, CliError> {
    RasterDomain::rectangle(r.origin, r.size, spacing).map_err(|e| CliError::config(field, e.to_string()))
}

/// Union of two (possibly overlapping) lattice rectangles.
fn union_raster(a: &RectSpec, b: &RectSpec, spacing: f64) -> Result<RasterDomain, CliError> {
    let lo = [a.origin[0].min(b.origin[0]), a.origin[1].min(b.origin[1])];
    let hi = [
        (a.origin[0] + a.size[0]).max(b.origin[0] + b.size[0]),
        (a.origin[1] + a.size[1]).max(b.origin[1] + b.size[1]),
    ];
    let nx = ((hi[0] - lo[0]) / spacing).round() as usize;
    let ny = ((hi[1] - lo[1]) / spacing).round() as usize;
    let inside = |r: &RectSpec, x: f64, y: f64| {
        x > r.origin[0] && x < r.origin[0] + r.size[0] && y > r.origin[1] && y < r.origin[1] + r.size[1]
    };
    let mask = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .map(|(i, j)| {
            let (x, y) = (lo[0] + (i as f64 + 0.5) * spacing, lo[1] + (j as f64 + 0.5) * spacing);
            inside(a, x, y) || inside(b, x, y)
        })
        .collect();
    RasterDomain::from_mask(lo, spacing, nx, ny, mask).map_err(|e| CliError::config("properties.limit", e.to_string()))
}

fn frobenius_rel(a: &Matrix6<f64>, b: &Matrix6<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Runs `polarize` at every sample point and radius; returns the density at
/// the smallest radius per point.
pub fn effective(loaded: &LoadedConfig, out: &Output, report: &mut RunReport) -> Result<Vec<EffectiveDensity>, CliError> {
    let c = &loaded.config;
    let field = loaded.microstructure()?;
    let opts = DensityOptions {
        spacing: c.mesh.spacing,
        solver: solver_options(loaded, c.mesh.nz),
        cauchy_tol: c.solver.cauchy_tol,
    };
    let analytic = if field.is_homogeneous() {
        let form = field.form_at(c.h_list[0], [field.omega.min[0], field.omega.min[1], 0.0]).stage("effective")?;
        Some(homogeneous_plate_density(&form).stage("effective")?)
    } else {
        None
    };

    let mut densities = Vec::new();
    let mut records = Vec::new();
    let mut density_rows = Vec::new();
    let mut sweep_rows = Vec::new();
    for (p, &x0) in c.domain.sample_points.iter().enumerate() {
        let mut per_r = Vec::new();
        for &r in &c.domain.r_list {
            let d = report
                .timed(format!("effective point {p} r {r}"), || polarize(&field, x0, r, &c.h_list, &opts))
                .stage("effective")?;
            for s in &d.samples {
                for row in &s.sweep.rows {
                    sweep_rows.push(vec![
                        p.to_string(),
                        fmt_num(r),
                        s.i.to_string(),
                        s.j.to_string(),
                        fmt_num(row.h),
                        fmt_num(row.k_value),
                        fmt_num(row.k_per_area),
                        fmt_num(row.admissibility),
                        row.cg_iters.to_string(),
                        fmt_num(row.residual),
                        fmt_num(s.model.k_inf),
                        fmt_num(s.model.p),
                        s.sweep.cauchy_flag.to_string(),
                    ]);
                }
            }
            per_r.push(d);
        }
        let d = per_r.pop().expect("r_list is non-empty");
        let r_spread = per_r.iter().map(|o| frobenius_rel(&o.qhat, &d.qhat)).fold(0.0, f64::max);
        let (lo, hi) = d.eigen_bounds();
        let name = format!("effective.point{p}");
        report.checks.push(Check {
            name: format!("{name}.cauchy"),
            passed: !d.non_converged,
            value: f64::from(u8::from(d.non_converged)),
            tolerance: 0.0,
            detail: format!("every h-sweep tail spread within {} relative", c.solver.cauchy_tol),
        });
        report.checks.push(Check {
            name: format!("{name}.bounds"),
            passed: !d.flags.iter().any(|f| f.starts_with("BOUNDS")),
            value: lo,
            tolerance: field.alpha() / 12.0,
            detail: format!("eigenvalues [{lo:e}, {hi:e}] within [alpha/12, beta]"),
        });
        let analytic_error = analytic.as_ref().map(|q| frobenius_rel(&d.qhat, q));
        if let Some(err) = analytic_error {
            report.checks.push(Check::at_most(
                format!("{name}.analytic"),
                err,
                c.effective.analytic_tol,
                "relative Frobenius distance to the homogeneous closed form",
            ));
        }
        report.flags.extend(d.flags.iter().map(|f| format!("effective point {p} {x0:?}: {f}")));
        let mut rec = serde_json::to_value(d.to_record()).expect("record serializes");
        records.push(rec.clone());
        rec["eigen_bounds"] = json!([lo, hi]);
        rec["r_spread"] = json!(r_spread);
        rec["analytic_error"] = json!(analytic_error);
        report.records.entry("effective".into()).or_insert_with(|| json!([])).as_array_mut().expect("array").push(rec);
        for i in 0..6 {
            for j in i..6 {
                density_rows.push(vec![
                    fmt_num(x0[0]),
                    fmt_num(x0[1]),
                    fmt_num(d.r_used),
                    i.to_string(),
                    j.to_string(),
                    fmt_num(d.qhat[(i, j)]),
                ]);
            }
        }
        densities.push(d);
    }
    out.write_json("density.json", &json!(records))?;
    out.write("density.csv", &csv_text(&["x1", "x2", "r", "row", "col", "value"], &density_rows))?;
    out.write(
        "sweeps.csv",
        &csv_text(
            &[
                "point", "r", "i", "j", "h", "k_value", "k_per_area", "admissibility", "cg_iters", "residual", "k_inf", "p",
                "cauchy",
            ],
            &sweep_rows,
        ),
    )?;
    Ok(densities)
}

fn random_strains(seed: u64, count: usize) -> Vec<(Sym2, Sym2)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = || Sym2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    (0..count).map(|_| (s(), s())).collect()
}

pub fn properties(loaded: &LoadedConfig, out: &Output, report: &mut RunReport) -> Result<(), CliError> {
    let c = &loaded.config;
    let p = &c.properties;
    let field = loaded.microstructure()?;
    let spacing = c.mesh.spacing;
    let domains = p.domains.iter().map(|d| raster(d, spacing, "properties.domains")).collect::<Result<Vec<_>, _>>()?;
    let disjoint = match &p.disjoint {
        Some([a, b]) => Some((raster(a, spacing, "properties.disjoint")?, raster(b, spacing, "properties.disjoint")?)),
        None => None,
    };
    let limit = match &p.limit {
        Some(l) => Some(LimitFixtures {
            inner: raster(&l.inner, spacing, "properties.limit.inner")?,
            outer: raster(&l.outer, spacing, "properties.limit.outer")?,
            first: raster(&l.first, spacing, "properties.limit.first")?,
            second: raster(&l.second, spacing, "properties.limit.second")?,
            union: union_raster(&l.first, &l.second, spacing)?,
            h_list: l.h_list.clone(),
            tol: l.tol,
        }),
        None => None,
    };
    let fixtures = PropertyFixtures { domains, disjoint, strains: random_strains(c.seed, p.strain_count), limit };
    let suite = report
        .timed("properties", || {
            property_suite(
                &field,
                &fixtures,
                p.h,
                &solver_options(loaded, c.mesh.nz),
                SuiteTolerances { identity: p.identity_tol },
            )
        })
        .stage("properties")?;
    for k in &suite.checks {
        report.checks.push(Check {
            name: format!("properties.{}", k.label),
            passed: k.passed,
            value: k.slack,
            tolerance: k.tolerance,
            detail: format!("{}: {} over {} cases", k.name, k.detail, k.cases),
        });
    }
    report.record("properties", &suite);
    out.write("properties.csv", &suite.to_csv().stage("properties")?)
}

/// `ψ̂0 + r0 ∧ x3 e3` with smooth seeded `ψ̂0` and `r0`.
fn projection_fixture(grid: &ExtrudedGrid, seed: u64) -> (DisplacementField, Vec<[f64; 3]>, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s: Vec<SmoothScalar> = (0..5).map(|_| SmoothScalar::random(&mut rng, 3)).collect();
    let base = grid.base();
    let hat: Vec<[f64; 3]> = (0..base.node_count()).map(|n| {
        let x = base.node_position(n);
        [s[0].value(x), s[1].value(x), s[2].value(x)]
    })
    .collect();
    let r: Vec<[f64; 2]> = (0..base.node_count()).map(|n| {
        let x = base.node_position(n);
        [s[3].value(x), s[4].value(x)]
    })
    .collect();
    let n2 = base.node_count();
    let mut psi = DisplacementField::zeros(grid);
    for node in 0..grid.node_count() {
        let (n, z) = (node % n2, grid.node_position(node)[2]);
        let (a, b) = (hat[n], r[n]);
        psi.set(node, [a[0] + z * b[1], a[1] - z * b[0], a[2]]);
    }
    (psi, hat, r)
}

pub fn griso(loaded: &LoadedConfig, out: &Output, report: &mut RunReport) -> Result<(), CliError> {
    let c = &loaded.config;
    let g = &c.griso;
    let grid = ExtrudedGrid::new(raster(&g.domain, g.spacing, "griso.domain")?, g.nz).stage("griso")?;

    let (psi, hat, r0) = projection_fixture(&grid, c.seed);
    let parts = decompose(&psi, &grid, g.kappa).stage("griso")?;
    let (mut num, mut den, mut r_err, mut r_scale, mut hat_err) = (0.0, 0.0, 0.0f64, 0.0f64, 0.0f64);
    for ((rr, r), (ph, h0)) in parts.r.iter().zip(&r0).zip(parts.psi_hat.iter().zip(&hat)) {
        num += rr[0] * r[0] + rr[1] * r[1];
        den += r[0] * r[0] + r[1] * r[1];
        r_err = r_err.max((rr[0] - r[0]).abs()).max((rr[1] - r[1]).abs());
        r_scale = r_scale.max(r[0].abs()).max(r[1].abs());
        hat_err = (0..3).fold(hat_err, |m, k| m.max((ph[k] - h0[k]).abs()));
    }
    let bar = parts.psi_bar.max_abs();
    let factor = num / den;
    let projection = (r_err / r_scale).max(hat_err / r_scale).max(bar / r_scale);
    report.checks.push(Check::at_most(
        "griso.projection",
        projection,
        g.projection_tol,
        format!("psi_hat0 + r0 ^ x3 e3 decomposes to (psi_hat0, r0, 0) with kappa = {}; recovered r = {factor} r0", g.kappa),
    ));
    report.record("griso_projection", json!({"kappa": g.kappa, "r_factor": factor, "max_error": projection, "psi_bar_max": bar}));

    let seeds: Vec<u64> = (0..g.ensemble as u64).map(|k| c.seed + k).collect();
    let korn = report
        .timed("griso korn ensemble", || {
            seeds.par_iter().map(|&s| korn_ratio(&SmoothField::random(s).sample(&grid), &grid, g.h)).collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .stage("griso")?;
    let korn_max = korn.iter().map(|k| k.ratio).fold(0.0, f64::max);
    report.record("korn", json!({"h": g.h, "spacing": g.spacing, "nz": g.nz, "fields": korn.len(), "max_ratio": korn_max}));
    let rows: Vec<Vec<String>> =
        seeds.iter().zip(&korn).map(|(s, k)| vec![s.to_string(), fmt_num(k.lhs), fmt_num(k.rhs), fmt_num(k.ratio)]).collect();
    out.write("korn.csv", &csv_text(&["seed", "lhs", "rhs", "ratio"], &rows))?;

    let family = KirchhoffFamily::random(c.seed);
    let splits = report
        .timed("griso second split", || {
            g.h_list
                .par_iter()
                .map(|&h| -> vkh_core::Result<_> {
                    let spacing = h / g.cells_per_h as f64;
                    let base = RasterDomain::rectangle(g.domain.origin, g.domain.size, spacing)?;
                    let grid = ExtrudedGrid::new(base, g.nz)?;
                    Ok((spacing, second_form(&family.sample(&grid, h), &grid, h, None)?.record(h)))
                })
                .collect::<Vec<_>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .stage("griso")?;
    let worst_step = splits.windows(2).map(|w| w[1].1.o_norm / w[0].1.o_norm).fold(0.0, f64::max);
    report.checks.push(Check {
        name: "griso.second_split_decreasing".into(),
        passed: worst_step < 1.0,
        value: worst_step,
        tolerance: 1.0,
        detail: "largest ratio of consecutive o-norms over the h sweep".into(),
    });
    let identity = splits.iter().map(|s| s.1.identity_error).fold(0.0, f64::max);
    report.checks.push(Check::at_most(
        "griso.second_split_identity",
        identity,
        1e-9,
        "pointwise error of the reassembled strain identity",
    ));
    let rows: Vec<Vec<String>> = splits
        .iter()
        .map(|(d, s)| {
            vec![
                fmt_num(s.h),
                fmt_num(*d),
                fmt_num(s.mollify_radius),
                fmt_num(s.o_norm),
                fmt_num(s.o_mollify_norm),
                fmt_num(s.o_discretization_norm),
                fmt_num(s.phi_misfit),
                fmt_num(s.identity_error),
            ]
        })
        .collect();
    out.write(
        "second_split.csv",
        &csv_text(
            &["h", "spacing", "mollify_radius", "o_norm", "o_mollify", "o_discretization", "phi_misfit", "identity_error"],
            &rows,
        ),
    )?;
    report.record("second_split", splits.iter().map(|s| &s.1).collect::<Vec<_>>());

    if let Some(file) = &g.field_file {
        let path = loaded.resolve_path(file);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::config("griso.field_file", format!("cannot read {}: {e}", path.display())))?;
        let psi = field_from_csv(&text, &grid).map_err(|e| CliError::config("griso.field_file", e.to_string()))?;
        let rec = GrisoRecord::new(&psi, &grid, g.h, g.kappa).stage("griso")?;
        out.write("field_parts.csv", &parts_csv(&decompose(&psi, &grid, g.kappa).stage("griso")?, &grid).stage("griso")?)?;
        report.record("field", rec);
    }
    Ok(())
}

fn read_density_records(loaded: &LoadedConfig, file: &str) -> Result<Vec<DensityRecord>, CliError> {
    let path = loaded.resolve_path(file);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::config("plate.density.path", format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config("plate.density.path", e.to_string()))?;
    let parsed = if value.is_array() { serde_json::from_value(value) } else { serde_json::from_value(value).map(|r| vec![r]) };
    parsed.map_err(|e| CliError::config("plate.density.path", e.to_string()))
}

/// A plate density with the flags of the records it came from.
pub struct PlateDensity {
    pub samples: Vec<([f64; 2], Matrix6<f64>)>,
    pub flags: Vec<String>,
}

impl PlateDensity {
    pub fn from_effective(densities: &[EffectiveDensity]) -> Self {
        Self {
            samples: densities.iter().map(|d| (d.x0, d.qhat)).collect(),
            flags: densities.iter().flat_map(|d| d.flags.iter().map(move |f| format!("density at {:?}: {f}", d.x0))).collect(),
        }
    }
}

fn configured_density(loaded: &LoadedConfig) -> Result<PlateDensity, CliError> {
    let c = &loaded.config;
    match &c.plate.density {
        DensitySource::Analytic => {
            let field: MicrostructureField = loaded.microstructure()?;
            if !field.is_homogeneous() {
                return Err(CliError::config("plate.density", "the analytic density needs a homogeneous microstructure"));
            }
            let form = field.form_at(c.h_list[0], [field.omega.min[0], field.omega.min[1], 0.0]).stage("plate")?;
            let q = homogeneous_plate_density(&form).stage("plate")?;
            Ok(PlateDensity { samples: vec![([0.0, 0.0], q)], flags: vec![] })
        }
        DensitySource::Inline { qhat } => {
            let q = from_upper_triangle(qhat).map_err(|e| CliError::config("plate.density.qhat", e.to_string()))?;
            Ok(PlateDensity { samples: vec![([0.0, 0.0], q)], flags: vec![] })
        }
        DensitySource::File { path } => {
            let records = read_density_records(loaded, path)?;
            let mut samples = Vec::new();
            let mut flags = Vec::new();
            for r in &records {
                samples.push((r.x0, r.matrix().map_err(|e| CliError::config("plate.density.path", e.to_string()))?));
                flags.extend(r.flags.iter().map(|f| format!("density at {:?}: {f}", r.x0)));
            }
            Ok(PlateDensity { samples, flags })
        }
    }
}

fn load_for(cfg: &LoadConfig, spec: &RectSpec, domain: &PlateDomain) -> LoadSpec {
    match *cfg {
        LoadConfig::Uniform { value } => LoadSpec::uniform(domain, value),
        LoadConfig::Cosine { value, modes } => {
            let tau = 2.0 * std::f64::consts::PI;
            LoadSpec::from_fn(domain, |x| {
                value
                    * (tau * f64::from(modes[0]) * (x[0] - spec.origin[0]) / spec.size[0]).cos()
                    * (tau * f64::from(modes[1]) * (x[1] - spec.origin[1]) / spec.size[1]).cos()
            })
        }
    }
}

/// Minimizes the plate energy for every load scale; `density` overrides the
/// configured source.
pub fn plate(
    loaded: &LoadedConfig,
    out: &Output,
    report: &mut RunReport,
    density: Option<PlateDensity>,
) -> Result<(), CliError> {
    let pc = &loaded.config.plate;
    let domain = PlateDomain::rectangle(pc.domain.origin, pc.domain.size, pc.spacing, pc.mode)
        .map_err(|e| CliError::config("plate.domain", e.to_string()))?;
    let density = match density {
        Some(d) => d,
        None => configured_density(loaded)?,
    };
    if density.flags.iter().any(|f| f.contains(NON_CONVERGED)) {
        report.flags.push(format!("plate: density input is {NON_CONVERGED}"));
    }
    report.flags.extend(density.flags.iter().map(|f| format!("plate: {f}")));
    let q = DensityField::nearest(&domain, &density.samples).stage("plate")?;
    let mut g0 = load_for(&pc.load, &pc.domain, &domain);
    if pc.balance_load {
        g0 = g0.balanced(&domain);
    }
    let m = pc.minimize;
    let opts = MinimizeOptions { tol: m.tol, max_iter: m.max_iter, cg_tol: m.cg_tol, cg_max_iter: m.cg_max_iter };

    let mut solves = Vec::new();
    let mut rows = Vec::new();
    let mut last = None;
    for &s in &pc.load_scales {
        let sol = report
            .timed(format!("plate scale {s}"), || minimize(&q, &g0.scaled(s), &domain, &PlateState::zeros(&domain), &opts))
            .stage("plate")?;
        let v_norm = sol.state.v_norm(&domain);
        rows.push(vec![
            fmt_num(s),
            fmt_num(sol.energy),
            sol.iterations.to_string(),
            fmt_num(sol.gradient_norm),
            fmt_num(v_norm),
            fmt_num(sol.state.max_abs_v()),
        ]);
        solves.push(json!({
            "scale": s,
            "energy": sol.energy,
            "iterations": sol.iterations,
            "gradient_norm": sol.gradient_norm,
            "v_norm": v_norm,
            "max_abs_v": sol.state.max_abs_v(),
            "gauge": sol.gauge,
        }));
        last = Some((s, v_norm, sol));
    }
    out.write("plate_sweep.csv", &csv_text(&["scale", "energy", "iterations", "gradient_norm", "v_norm", "max_abs_v"], &rows))?;
    let (_, _, final_sol) = last.as_ref().expect("load_scales is non-empty");
    out.write("state.csv", &final_sol.state.to_csv(&domain).stage("plate")?)?;
    report.record("plate", json!({"mode": pc.mode, "nodes": domain.node_count(), "solves": solves}));

    if let Some(tol) = pc.linear_tol {
        let norms: Vec<(f64, f64)> = solves
            .iter()
            .map(|v| (v["scale"].as_f64().expect("scale"), v["v_norm"].as_f64().expect("norm")))
            .collect();
        let dev = norms.windows(2).map(|w| ((w[1].1 / w[0].1) / (w[1].0 / w[0].0) - 1.0).abs()).fold(0.0, f64::max);
        report.checks.push(Check::at_most(
            "plate.linear_response",
            dev,
            tol,
            "largest deviation of |v(s2)|/|v(s1)| from s2/s1",
        ));
    }
    if let Some(tol) = pc.kirchhoff_tol {
        let (s, sol) = pc
            .load_scales
            .iter()
            .zip(&solves)
            .min_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
            .map(|(s, v)| (*s, v))
            .expect("non-empty");
        let lin = linear_kirchhoff(&q, &g0.scaled(s), &domain, &opts).stage("plate")?;
        let lin_norm = lin.v_norm(&domain);
        let dev = (sol["v_norm"].as_f64().expect("norm") / lin_norm - 1.0).abs();
        report.checks.push(Check::at_most(
            "plate.kirchhoff",
            dev,
            tol,
            format!("|v| against the linear Kirchhoff solution at scale {s}"),
        ));
        report.record("kirchhoff", json!({"scale": s, "v_norm": lin_norm}));
    }
    if pc.mode == BoundaryMode::FreeGauged {
        let diff = invariance_check(&final_sol.state, &pc.equivalence, &q, &domain).stage("plate")?;
        let rel = diff / (1.0 + final_sol.energy.abs());
        report.checks.push(Check::at_most(
            "plate.invariance",
            rel,
            pc.invariance_tol,
            "|I(s) - I(s~)| / (1 + |I(s)|) at the final state",
        ));
    }
    Ok(())
}

pub fn pipeline(loaded: &LoadedConfig, out: &Output, report: &mut RunReport) -> Result<(), CliError> {
    let densities = effective(loaded, out, report)?;
    plate(loaded, out, report, Some(PlateDensity::from_effective(&densities)))
}
