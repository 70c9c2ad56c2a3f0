//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::f64::consts::PI;
use std::process::Command;
use std::time::Instant;

use nalgebra::Matrix6;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use vkh_core::corrector::{h_sweep_with, k_value, strain_norm_squared, SolverOptions};
use vkh_core::effective::{homogeneous_plate_density, property_suite, PropertyFixtures, PropertyReport, SuiteTolerances};
use vkh_core::fem3d::{rasterize_ball, DisplacementField, ExtrudedGrid, RasterDomain};
use vkh_core::griso::{decompose, korn_ratio, second_form, KirchhoffFamily, SmoothField, SmoothScalar};
use vkh_core::microstructure::{FieldKind, Lame, Rect, ScaleRule};
use vkh_core::plate::{
    energy, gradient, invariance_check, linear_kirchhoff, minimize, BoundaryMode, DensityField, EquivalenceParams,
    LoadSpec, MinimizeOptions, PlateDomain, PlateState,
};
use vkh_core::{ElasticForm, MicrostructureField, Sym2};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn iso_form() -> ElasticForm {
    ElasticForm::isotropic(1.0, 1.0).unwrap()
}

fn random_strains(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Sym2, Sym2)> {
    let mut s = || Sym2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    (0..n).map(|_| (s(), s())).collect()
}

fn laminate(rule: ScaleRule) -> MicrostructureField {
    let phases = [Lame { lambda: 1.0, mu: 1.0 }, Lame { lambda: 1.0, mu: 3.0 }];
    MicrostructureField::new(FieldKind::InPlaneLaminate(phases), rule, Rect::UNIT).unwrap()
}

fn checkerboard() -> MicrostructureField {
    let phases = [Lame { lambda: 1.0, mu: 1.0 }, Lame { lambda: 2.0, mu: 4.0 }];
    MicrostructureField::new(FieldKind::Checkerboard(phases), ScaleRule::Fixed { epsilon: 0.25 }, Rect::UNIT).unwrap()
}

type Suites = Result<Vec<(&'static str, PropertyReport)>, String>;

/// Property reports for the laminate and the checkerboard, computed once.
fn suites() -> &'static Suites {
    static CELL: std::sync::OnceLock<Suites> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let spacing = 1.0 / 32.0;
        let fixtures = PropertyFixtures {
            domains: vec![
                RasterDomain::square([0.25, 0.25], 0.5, spacing).map_err(fail)?,
                rasterize_ball([0.5, 0.5], 0.25, spacing).map_err(fail)?,
            ],
            disjoint: Some((
                RasterDomain::square([0.125, 0.125], 0.25, spacing).map_err(fail)?,
                RasterDomain::square([0.625, 0.625], 0.25, spacing).map_err(fail)?,
            )),
            strains: random_strains(&mut ChaCha8Rng::seed_from_u64(7), 25),
            limit: None,
        };
        let opts = SolverOptions { nz: 4, tol: 1e-9, max_iter: 50_000 };
        let tol = SuiteTolerances { identity: 1e-8 };
        let fields = [("laminate", laminate(ScaleRule::Fixed { epsilon: 0.25 })), ("checkerboard", checkerboard())];
        fields
            .into_iter()
            .map(|(name, f)| Ok((name, property_suite(&f, &fixtures, 0.25, &opts, tol).map_err(fail)?)))
            .collect()
    })
}

fn suite_checks(labels: &[&str]) -> Outcome {
    let reports = suites().as_ref().map_err(Clone::clone)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, report) in reports {
        for c in report.checks.iter().filter(|c| labels.contains(&c.label.as_str())) {
            ok &= c.passed;
            parts.push(format!("{name} {}: {:.3e} over {} cases (tol {:.0e})", c.label, c.slack, c.cases, c.tolerance));
        }
    }
    Ok((ok && !parts.is_empty(), parts.join("; ")))
}

fn c1_homogeneous_density() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let config = json!({
        "microstructure": {"kind": "constant-isotropic", "lambda": 1.0, "mu": 1.0},
        "domain": {"sample_points": [[0.5, 0.5]], "r_list": [0.25]},
        "h_list": [0.25, 0.125, 0.0625],
        "mesh": {"spacing": 0.03125, "nz": 8},
        "output": "out",
    });
    let path = dir.path().join("c1.json");
    std::fs::write(&path, config.to_string()).map_err(fail)?;
    let status = Command::new(env!("CARGO_BIN_EXE_vk-homog"))
        .args(["effective", "--config"])
        .arg(&path)
        .output()
        .map_err(fail)?;
    if !matches!(status.status.code(), Some(0 | 1)) {
        return Err(format!("effective exited with {:?}: {}", status.status, String::from_utf8_lossy(&status.stderr)));
    }
    let records: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/density.json")).map_err(fail)?).map_err(fail)?;
    let entries: Vec<f64> = records[0]["Qhat"]
        .as_array()
        .ok_or("density.json has no Qhat")?
        .iter()
        .map(|v| v.as_f64().unwrap_or(f64::NAN))
        .collect();
    let q = vkh_core::microstructure::from_upper_triangle(&entries).map_err(fail)?;
    let exact = homogeneous_plate_density(&iso_form()).map_err(fail)?;
    let err = (q - exact).norm() / exact.norm();
    // Independent of the relaxed-form code: λ = μ = 1 gives 8/3 and 2/9.
    let hand = (exact[(0, 0)] - 8.0 / 3.0).abs().max((exact[(3, 3)] - 2.0 / 9.0).abs());
    Ok((
        err <= 0.02 && hand < 1e-12,
        format!(
            "relative Frobenius error {err:.4} (tol 0.02); membrane E11 {:.4} vs 8/3, bending E11 {:.5} vs 2/9",
            q[(0, 0)],
            q[(3, 3)]
        ),
    ))
}

fn c6_projection() -> Outcome {
    let grid = ExtrudedGrid::new(RasterDomain::square([0.0, 0.0], 1.0, 1.0 / 16.0).map_err(fail)?, 8).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s: Vec<SmoothScalar> = (0..5).map(|_| SmoothScalar::random(&mut rng, 3)).collect();
    let psi = DisplacementField::from_fn(&grid, |x| {
        let p = [x[0], x[1]];
        let (r1, r2) = (s[3].value(p), s[4].value(p));
        [s[0].value(p) + r2 * x[2], s[1].value(p) - r1 * x[2], s[2].value(p)]
    });
    let base = grid.base();
    let r0: Vec<[f64; 2]> = (0..base.node_count()).map(|n| [s[3].value(base.node_position(n)), s[4].value(base.node_position(n))]).collect();
    let hat0: Vec<[f64; 3]> = (0..base.node_count())
        .map(|n| {
            let p = base.node_position(n);
            [s[0].value(p), s[1].value(p), s[2].value(p)]
        })
        .collect();

    let exact = decompose(&psi, &grid, 12.0).map_err(fail)?;
    let mut err: f64 = exact.psi_bar.max_abs();
    for n in 0..base.node_count() {
        err = (0..2).fold(err, |m, c| m.max((exact.r[n][c] - r0[n][c]).abs()));
        err = (0..3).fold(err, |m, c| m.max((exact.psi_hat[n][c] - hat0[n][c]).abs()));
    }

    let wrong = decompose(&psi, &grid, 1.5).map_err(fail)?;
    let factor_err = (0..base.node_count())
        .flat_map(|n| (0..2).map(move |c| (n, c)))
        .fold(0.0f64, |m, (n, c)| m.max((wrong.r[n][c] - r0[n][c] / 8.0).abs()));
    Ok((
        err < 1e-12 && factor_err < 1e-12,
        format!("kappa 12 max error {err:.2e}; kappa 3/2 max |r - r0/8| {factor_err:.2e} (tol 1e-12)"),
    ))
}

fn korn_max(spacing: f64, nz: usize, h: f64) -> Result<f64, String> {
    use rayon::prelude::*;
    let grid = ExtrudedGrid::new(RasterDomain::square([0.0, 0.0], 1.0, spacing).map_err(fail)?, nz).map_err(fail)?;
    let ratios: Vec<f64> = (0..100u64)
        .into_par_iter()
        .map(|s| korn_ratio(&SmoothField::random(s).sample(&grid), &grid, h).map(|k| k.ratio))
        .collect::<Result<_, _>>()
        .map_err(fail)?;
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

fn c7_korn() -> Outcome {
    let h = 0.125;
    let coarse = korn_max(1.0 / 8.0, 4, h)?;
    let fine = korn_max(1.0 / 16.0, 8, h)?;
    let change = (fine - coarse).abs() / coarse;
    Ok((change < 0.2, format!("max ratio {coarse:.4} (delta 1/8, nz 4) vs {fine:.4} (delta 1/16, nz 8): change {change:.4} (tol 0.2)")))
}

fn c8_second_split() -> Outcome {
    let h_list = [0.25, 0.125, 0.0625];
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let family = KirchhoffFamily::random(seed);
        let norms: Vec<f64> = h_list
            .iter()
            .map(|&h| {
                let grid = ExtrudedGrid::new(RasterDomain::square([0.0, 0.0], 1.0, h / 4.0)?, 4)?;
                Ok(second_form(&family.sample(&grid, h), &grid, h, None)?.o_norm)
            })
            .collect::<vkh_core::Result<_>>()
            .map_err(fail)?;
        ok &= norms.windows(2).all(|w| w[1] < w[0]);
        parts.push(format!("seed {seed}: {}", norms.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" > ")));
    }
    Ok((ok, parts.join("; ")))
}

fn random_spd(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    a.transpose() * a + Matrix6::identity() * 0.5
}

fn random_state(domain: &PlateDomain, rng: &mut ChaCha8Rng) -> PlateState {
    let (c, k) = (rng.gen_range(-0.5..0.5), [rng.gen_range(1.0..3.0), rng.gen_range(1.0..3.0)]);
    let mut s = PlateState::from_fn(domain, |x| {
        let w = (k[0] * x[0]).sin() * (k[1] * x[1]).cos();
        ([0.1 * w, -0.05 * w * w], c + 0.3 * w)
    });
    for k in 0..domain.node_count() {
        s.u[k][0] += 0.01 * rng.gen_range(-1.0..1.0);
        s.u[k][1] += 0.01 * rng.gen_range(-1.0..1.0);
        s.v[k] += 0.01 * rng.gen_range(-1.0..1.0);
    }
    s
}

fn c9_plate_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let domain = PlateDomain::rectangle([0.0, 0.0], [1.0, 1.0], 1.0 / 8.0, BoundaryMode::FreeGauged).map_err(fail)?;
    let n = domain.node_count();
    let mut grad_worst: f64 = 0.0;
    let mut inv_worst: f64 = 0.0;
    for _ in 0..20 {
        let density = DensityField::per_node(&domain, (0..n).map(|_| random_spd(&mut rng)).collect()).map_err(fail)?;
        let raw = LoadSpec::from_fn(&domain, |x| (3.0 * x[0]).sin() + x[1] * x[1]);
        let load = raw.balanced(&domain);
        let state = random_state(&domain, &mut rng);
        let g = gradient(&state, &density, &load, &domain).map_err(fail)?;
        let dir: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let step = 1e-5;
        let at = |t: f64| -> Result<f64, String> {
            let x: Vec<f64> = state.to_vec().iter().zip(&dir).map(|(s, d)| s + t * d).collect();
            energy(&PlateState::from_vec(&domain, &x).map_err(fail)?, &density, &load, &domain).map_err(fail)
        };
        let fd = (at(step)? - at(-step)?) / (2.0 * step);
        let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        grad_worst = grad_worst.max((fd - an).abs() / an.abs().max(fd.abs()));

        let params = EquivalenceParams {
            a: [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)],
            theta: rng.gen_range(-PI..PI),
        };
        let i0 = energy(&state, &density, &LoadSpec::zero(&domain), &domain).map_err(fail)?;
        let gap = invariance_check(&state, &params, &density, &domain).map_err(fail)?;
        inv_worst = inv_worst.max(gap / (1.0 + i0.abs()));
    }
    Ok((
        grad_worst < 1e-6 && inv_worst <= 1e-10,
        format!("gradient vs central differences {grad_worst:.2e} (tol 1e-6); invariance {inv_worst:.2e} (tol 1e-10), 20 cases each"),
    ))
}

fn c10_linear_response() -> Outcome {
    let delta = 1.0 / 32.0;
    let domain = PlateDomain::rectangle([0.0, 0.0], [1.0, 1.0], delta, BoundaryMode::Clamped).map_err(fail)?;
    let q = homogeneous_plate_density(&iso_form()).map_err(fail)?;
    let density = DensityField::constant(q).map_err(fail)?;
    let opts = MinimizeOptions::default();
    let eps = 1e-3;
    let solve = |s: f64| minimize(&density, &LoadSpec::uniform(&domain, s), &domain, &PlateState::zeros(&domain), &opts);
    let v1 = solve(eps).map_err(fail)?.state;
    let v2 = solve(2.0 * eps).map_err(fail)?.state;
    let ratio = v2.v_norm(&domain) / v1.v_norm(&domain);
    let lin = linear_kirchhoff(&density, &LoadSpec::uniform(&domain, eps), &domain, &opts).map_err(fail)?;
    let kirchhoff = (v1.v_norm(&domain) - lin.v_norm(&domain)).abs() / lin.v_norm(&domain);
    // Clamped square under uniform load: w_max = 0.00126532 q a⁴ / D, with D = Q_b(E11) = 2/9 · 2 in
    // the ½-free energy convention, and a = 1 - δ for the ring clamp.
    let d = 2.0 * q[(3, 3)];
    let a = 1.0 - delta;
    let plate_theory = 0.00126532 * eps * a.powi(4) / d;
    let classical = (v1.max_abs_v() - plate_theory).abs() / plate_theory;
    Ok((
        (ratio - 2.0).abs() <= 0.02 && kirchhoff <= 0.02 && classical <= 0.02,
        format!(
            "norm ratio {ratio:.6} (2 within 1%); vs discrete linear Kirchhoff {kirchhoff:.2e}; \
             centre deflection vs clamped-square series {classical:.4} (tol 0.02)"
        ),
    ))
}

fn laminate_sweep(cells_per_h: f64, h_list: &[f64]) -> Result<vkh_core::corrector::SweepTable, String> {
    let field = laminate(ScaleRule::Linear { factor: 1.0 });
    let opts = SolverOptions { nz: 4, tol: 1e-9, max_iter: 100_000 };
    h_sweep_with(
        &field,
        |h| RasterDomain::square([0.0, 0.0], 1.0, h / cells_per_h),
        Sym2::new(1.0, 0.0, 0.0),
        Sym2::ZERO,
        h_list,
        &opts,
        0.02,
    )
    .map_err(fail)
}

fn c11_laminate_stability() -> Outcome {
    let h_list = [0.25, 0.125, 0.0625];
    let coarse = laminate_sweep(4.0, &h_list)?;
    let fine = laminate_sweep(8.0, &h_list)?;
    let k_last = coarse.last().map_or(f64::NAN, |r| r.k_per_area);
    let spread = coarse.gap / k_last;
    let doubling = coarse
        .rows
        .iter()
        .zip(&fine.rows)
        .map(|(a, b)| (a.k_per_area - b.k_per_area).abs() / b.k_per_area)
        .fold(0.0, f64::max);
    let ks: Vec<String> = coarse.rows.iter().map(|r| format!("{:.5}", r.k_per_area)).collect();
    Ok((
        coarse.cauchy_flag && spread <= 0.02 && doubling <= 0.05,
        format!("k per area [{}]; tail spread {spread:.4} (tol 0.02); mesh doubling {doubling:.4} (tol 0.05)", ks.join(", ")),
    ))
}

fn c3_every_solve_bounded() -> Outcome {
    // Bounds are also asserted inside every solve; here they are checked across
    // the suite and on a few solves at other thicknesses.
    let (ok, detail) = suite_checks(&["d", "k"])?;
    let field = checkerboard();
    let d = RasterDomain::square([0.0, 0.0], 0.5, 1.0 / 16.0).map_err(fail)?;
    let opts = SolverOptions { nz: 4, ..SolverOptions::default() };
    let mut extra = true;
    for (m1, m2) in random_strains(&mut ChaCha8Rng::seed_from_u64(3), 5) {
        for h in [0.5, 0.1] {
            let r = k_value(&field, h, &d, m1, m2, &opts).map_err(fail)?;
            let n2 = strain_norm_squared(r.area, m1, m2);
            extra &= r.k_value >= field.alpha() * n2 * (1.0 - 1e-10) && r.k_value <= field.beta() * n2;
        }
    }
    Ok((ok && extra, detail))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("homogeneous effective density", c1_homogeneous_density),
        ("quadratic identities", || suite_checks(&["i", "j"])),
        ("exact bounds", c3_every_solve_bounded),
        ("disjoint additivity", || suite_checks(&["g"])),
        ("continuity estimate", || {
            let (ok, detail) = suite_checks(&["h"])?;
            let cases: usize = suites().as_ref().map_err(Clone::clone)?.iter().flat_map(|(_, r)| &r.checks).filter(|c| c.label == "h").map(|c| c.cases).sum();
            Ok((ok && cases >= 100, format!("{detail}; {cases} pairs")))
        }),
        ("projection exactness", c6_projection),
        ("Korn ratio stability", c7_korn),
        ("second split residual", c8_second_split),
        ("plate gradient and invariance", c9_plate_gradient),
        ("linear response", c10_linear_response),
        ("laminate sweep stability", c11_laminate_stability),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!passed);
        let verdict = if passed { "PASS" } else { "FAIL" };
        println!("{verdict} [{:>2}] {name}: {detail} ({:.1} s)", i + 1, start.elapsed().as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
