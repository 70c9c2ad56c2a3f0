use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn vk(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_vk-homog"))
        .args(args)
        .env_remove("VK_HOMOG_JOBS")
        .envs(envs.iter().copied())
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

/// Coarse constant-material settings that run in about a second.
fn coarse_constant() -> Value {
    json!({
        "microstructure": {"kind": "constant-isotropic", "lambda": 1.0, "mu": 1.0},
        "domain": {"sample_points": [[0.5, 0.5]], "r_list": [0.25]},
        "h_list": [0.5, 0.25, 0.125],
        "mesh": {"spacing": 0.0625, "nz": 4},
        "solver": {"tol": 1e-9, "max_iter": 50000, "cauchy_tol": 0.1},
        "effective": {"analytic_tol": 0.1},
        "properties": {
            "h": 0.25,
            "strain_count": 6,
            "domains": [{"origin": [0.25, 0.25], "size": [0.5, 0.5]}],
            "disjoint": [{"origin": [0.125, 0.125], "size": [0.25, 0.25]}, {"origin": [0.625, 0.625], "size": [0.25, 0.25]}]
        },
        "plate": {"spacing": 0.125, "load_scales": [0.001]}
    })
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn check<'a>(report: &'a Value, name: &str) -> &'a Value {
    report["checks"].as_array().unwrap().iter().find(|c| c["name"] == name).unwrap_or_else(|| panic!("no check {name}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn constant_effective_density_is_block_diagonal() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.json", &coarse_constant());
    let out = t.path().join("out");
    let r = vk(&["effective", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("PASS effective.point0.analytic"));
    let records = read_json(&out.join("density.json"));
    let q = records[0]["Qhat"].as_array().unwrap();
    assert_eq!(q.len(), 21);
    // Upper-triangle row-major: row i starts at 6i - i(i-1)/2; the coupling
    // block is rows 0..3, columns 3..6.
    let at = |i: usize, j: usize| q[6 * i - i * (i.saturating_sub(1)) / 2 + (j - i)].as_f64().unwrap();
    for i in 0..3 {
        for j in 3..6 {
            assert!(at(i, j).abs() < 0.02 * at(0, 0), "coupling ({i},{j}) = {}", at(i, j));
        }
    }
    assert!((at(0, 0) - 8.0 / 3.0).abs() < 0.1 * 8.0 / 3.0);
    assert!((at(3, 3) - 2.0 / 9.0).abs() < 0.1 * 2.0 / 9.0);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["status"], "PASS");
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(std::fs::read_to_string(out.join("sweeps.csv")).unwrap().starts_with("point,r,i,j,h,"));
}

#[test]
fn malformed_configurations_name_the_field() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.json", &coarse_constant());
    let out = t.path().join("out");
    let cases: [(&str, &str); 4] = [
        ("h_list=[0.125,0.25,0.5]", "`h_list`"),
        ("domain.sample_points=[]", "`domain.sample_points`"),
        (
            "properties.disjoint=[{\"origin\":[0,0],\"size\":[0.5,0.5]},{\"origin\":[0.25,0.25],\"size\":[0.5,0.5]}]",
            "`properties.disjoint`",
        ),
        ("mesh.nz=\"eight\"", "`mesh.nz`"),
    ];
    for (set, field) in cases {
        let r = vk(&["effective", "--config", s(&cfg), "--out", s(&out), "--set", set], &[]);
        assert_eq!(r.code, 2, "{set}");
        assert!(r.stderr.contains(field), "{set}: {}", r.stderr);
    }
    let r = vk(&["effective", "--config", s(&t.path().join("missing.json"))], &[]);
    assert_eq!(r.code, 2);
    let r = vk(&["bogus", "--config", s(&cfg)], &[]);
    assert_eq!(r.code, 2);
}

#[test]
fn property_suite_passes_and_reports_slack() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.json", &coarse_constant());
    let tight = t.path().join("tight");
    let r = vk(&["properties", "--config", s(&cfg), "--out", s(&tight)], &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    let csv = std::fs::read_to_string(tight.join("properties.csv")).unwrap();
    assert!(csv.starts_with("label,name,passed,slack,tolerance,cases"));
    for label in ["d", "k", "i", "j", "h", "g"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{label},")) && l.contains(",true,")), "{label}\n{csv}");
    }

    let loose = t.path().join("loose");
    let r = vk(&["properties", "--config", s(&cfg), "--out", s(&loose), "--set", "solver.tol=1e-3"], &[]);
    assert!(r.code == 0 || r.code == 1, "{}", r.stderr);
    let (a, b) = (read_json(&tight.join("report.json")), read_json(&loose.join("report.json")));
    let slack = |v: &Value, n: &str| check(v, n)["value"].as_f64().unwrap();
    assert!(slack(&b, "properties.j") > slack(&a, "properties.j"));
    // Doubling the data doubles every CG iterate exactly.
    assert_eq!(slack(&b, "properties.i"), 0.0);
}

#[test]
fn griso_is_deterministic_and_detects_the_wrong_kappa() {
    let t = TempDir::new().unwrap();
    let mut v = coarse_constant();
    v["seed"] = json!(11);
    v["griso"] = json!({"ensemble": 4, "h": 0.25, "spacing": 0.25, "h_list": [0.5, 0.25, 0.125], "cells_per_h": 2});
    let cfg = write_config(t.path(), "g.json", &v);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for dir in [&a, &b] {
        let r = vk(&["griso", "--config", s(&cfg), "--out", s(dir)], &[]);
        assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    }
    for f in ["report.json", "korn.csv", "second_split.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let report = read_json(&a.join("report.json"));
    assert_eq!(check(&report, "griso.second_split_decreasing")["passed"], true);

    let c = t.path().join("c");
    let r = vk(&["griso", "--config", s(&cfg), "--out", s(&c), "--set", "seed=12"], &[]);
    assert_eq!(r.code, 0);
    assert_ne!(std::fs::read(a.join("korn.csv")).unwrap(), std::fs::read(c.join("korn.csv")).unwrap());

    let k = t.path().join("k");
    let r = vk(&["griso", "--config", s(&cfg), "--out", s(&k), "--set", "griso.kappa=1.5"], &[]);
    assert_eq!(r.code, 1);
    assert!(r.stdout.contains("FAIL griso.projection"));
    let factor = read_json(&k.join("report.json"))["records"]["griso_projection"]["r_factor"].as_f64().unwrap();
    assert!((factor - 0.125).abs() < 1e-12, "{factor}");
}

#[test]
fn griso_decomposes_a_field_file() {
    use vkh_core::fem3d::{ExtrudedGrid, RasterDomain};
    let t = TempDir::new().unwrap();
    let grid = ExtrudedGrid::new(RasterDomain::square([0.0, 0.0], 1.0, 0.25).unwrap(), 4).unwrap();
    let field = vkh_core::griso::SmoothField::random(5).sample(&grid);
    std::fs::write(t.path().join("field.csv"), vkh_core::griso::field_csv(&field, &grid).unwrap()).unwrap();
    let mut v = coarse_constant();
    v["griso"] = json!({"ensemble": 2, "h": 0.25, "spacing": 0.25, "h_list": [0.5, 0.25], "cells_per_h": 2,
        "field_file": "field.csv"});
    let cfg = write_config(t.path(), "g.json", &v);
    let out = t.path().join("out");
    let r = vk(&["griso", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rec = &read_json(&out.join("report.json"))["records"]["field"];
    assert!(rec["reconstruction_error"].as_f64().unwrap() < 1e-12);
    assert!(out.join("field_parts.csv").is_file());
}

#[test]
fn plate_runs_cover_zero_load_linear_response_and_rejection() {
    let t = TempDir::new().unwrap();
    let mut v = coarse_constant();
    v["plate"] = json!({"spacing": 0.0625, "mode": "free-gauged", "load": {"kind": "uniform", "value": 0.0}});
    let cfg = write_config(t.path(), "free.json", &v);
    let out = t.path().join("free");
    let r = vk(&["plate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["records"]["plate"]["solves"][0]["energy"], 0.0);
    assert_eq!(check(&report, "plate.invariance")["passed"], true);

    let mut v = coarse_constant();
    v["plate"] = json!({"spacing": 0.0625, "mode": "clamped", "load_scales": [0.001, 0.002],
        "linear_tol": 0.01, "kirchhoff_tol": 0.02});
    let cfg = write_config(t.path(), "clamped.json", &v);
    let out = t.path().join("clamped");
    let r = vk(&["plate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert!(r.stdout.contains("PASS plate.linear_response"));
    assert!(std::fs::read_to_string(out.join("state.csv")).unwrap().starts_with("x1,x2,u1,u2,v"));

    let r = vk(&["plate", "--config", s(&cfg), "--out", s(&out), "--set", "plate.invariance_check=true"], &[]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("plate.invariance_check"));
}

#[test]
fn plate_reads_density_records_written_by_effective() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.json", &coarse_constant());
    let eff = t.path().join("eff");
    assert_eq!(vk(&["effective", "--config", s(&cfg), "--out", s(&eff)], &[]).code, 0);
    let mut v = coarse_constant();
    v["plate"] = json!({"spacing": 0.125, "density": {"source": "file", "path": "eff/density.json"}});
    let cfg = write_config(t.path(), "p.json", &v);
    let out = t.path().join("p");
    let r = vk(&["plate", "--config", s(&cfg), "--out", s(&out)], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
}

#[test]
fn pipeline_matches_the_analytic_plate_and_carries_flags() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), "c.json", &coarse_constant());
    let (pipe, direct) = (t.path().join("nested/pipe"), t.path().join("direct"));
    let r = vk(&["pipeline", "--config", s(&cfg), "--out", s(&pipe)], &[]);
    assert_eq!(r.code, 0, "{}{}", r.stdout, r.stderr);
    assert_eq!(vk(&["plate", "--config", s(&cfg), "--out", s(&direct)], &[]).code, 0);
    let v_norm = |d: &Path| read_json(&d.join("report.json"))["records"]["plate"]["solves"][0]["v_norm"].as_f64().unwrap();
    let (a, b) = (v_norm(&pipe), v_norm(&direct));
    assert!((a / b - 1.0).abs() < 0.1, "{a} vs {b}");

    let before = std::fs::read(pipe.join("report.json")).unwrap();
    assert_eq!(vk(&["pipeline", "--config", s(&cfg), "--out", s(&pipe)], &[]).code, 0);
    assert_eq!(before, std::fs::read(pipe.join("report.json")).unwrap());

    let flagged = t.path().join("flagged");
    let r = vk(&["pipeline", "--config", s(&cfg), "--out", s(&flagged), "--set", "solver.cauchy_tol=1e-12"], &[]);
    assert_eq!(r.code, 1, "{}{}", r.stdout, r.stderr);
    let report = read_json(&flagged.join("report.json"));
    let flags: Vec<&str> = report["summary"]["flags"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    assert!(flags.iter().any(|f| f.starts_with("plate:") && f.contains("NON-CONVERGED")), "{flags:?}");
    assert!(flagged.join("state.csv").is_file());
}

#[test]
fn overrides_jobs_and_defaults_are_recorded() {
    let t = TempDir::new().unwrap();
    let mut v = coarse_constant();
    v.as_object_mut().unwrap().remove("plate");
    v["output"] = json!("relative-out");
    let cfg = write_config(t.path(), "c.json", &v);
    let r = vk(&["plate", "--config", s(&cfg), "--jobs", "1", "--set", "plate.spacing=0.125"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let out = t.path().join("relative-out");
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["config"]["plate"]["spacing"], 0.125);
    assert_eq!(report["applied_defaults"]["plate.mode"], "clamped");
    assert!(report["applied_defaults"].get("plate.spacing").is_none());
    assert!(out.join("timings.json").is_file());

    let r = vk(&["plate", "--config", s(&cfg), "--set", "plate.spacing=0.125"], &[("VK_HOMOG_JOBS", "2")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = vk(&["plate", "--config", s(&cfg)], &[("VK_HOMOG_JOBS", "many")]);
    assert_eq!(r.code, 2);
}
