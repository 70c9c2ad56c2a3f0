//! Experiment configuration: one JSON file, dotted `--set` overrides, and
//! validation that names the offending field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vkh_core::microstructure::{MicrostructureDescriptor, MicrostructureField};
use vkh_core::plate::{BoundaryMode, EquivalenceParams};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub microstructure: MicrostructureDescriptor,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default = "default_h_list")]
    pub h_list: Vec<f64>,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub effective: EffectiveConfig,
    #[serde(default)]
    pub properties: PropertiesConfig,
    #[serde(default)]
    pub griso: GrisoConfig,
    #[serde(default)]
    pub plate: PlateConfig,
    /// Output directory; `--out` takes precedence.
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_h_list() -> Vec<f64> {
    vec![0.25, 0.125, 0.0625]
}

fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub sample_points: Vec<[f64; 2]>,
    pub r_list: Vec<f64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { sample_points: vec![[0.5, 0.5]], r_list: vec![0.25] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    /// In-plane cell size δ.
    pub spacing: f64,
    pub nz: usize,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { spacing: 1.0 / 32.0, nz: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative tail spread accepted as a converged h-sweep.
    pub cauchy_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 50_000, cauchy_tol: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectiveConfig {
    /// Relative Frobenius tolerance against the analytic density of a
    /// homogeneous microstructure.
    pub analytic_tol: f64,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self { analytic_tol: 0.02 }
    }
}

/// Axis-aligned rectangle given by its lower-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RectSpec {
    pub origin: [f64; 2],
    pub size: [f64; 2],
}

impl RectSpec {
    pub const fn square(origin: [f64; 2], side: f64) -> Self {
        Self { origin, size: [side, side] }
    }

    fn max(&self) -> [f64; 2] {
        [self.origin[0] + self.size[0], self.origin[1] + self.size[1]]
    }

    /// Closed rectangles intersect (touching counts: shared nodes couple the solves).
    pub fn touches(&self, other: &RectSpec) -> bool {
        let (a, b) = (self.max(), other.max());
        self.origin[0] <= b[0] && other.origin[0] <= a[0] && self.origin[1] <= b[1] && other.origin[1] <= a[1]
    }

    pub fn contains(&self, other: &RectSpec) -> bool {
        let (a, b) = (self.max(), other.max());
        self.origin[0] <= other.origin[0] && self.origin[1] <= other.origin[1] && b[0] <= a[0] && b[1] <= a[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropertiesConfig {
    /// Thickness at which the exact identities are checked.
    pub h: f64,
    /// Number of random strain pairs `(M1, M2)`, entries uniform in `[-1, 1]`.
    pub strain_count: usize,
    pub domains: Vec<RectSpec>,
    pub disjoint: Option<[RectSpec; 2]>,
    pub limit: Option<LimitConfig>,
    /// Relative tolerance of homogeneity, parallelogram and additivity.
    pub identity_tol: f64,
}

impl Default for PropertiesConfig {
    fn default() -> Self {
        Self {
            h: 0.25,
            strain_count: 20,
            domains: vec![RectSpec::square([0.25, 0.25], 0.5)],
            disjoint: Some([RectSpec::square([0.125, 0.125], 0.25), RectSpec::square([0.625, 0.625], 0.25)]),
            limit: None,
            identity_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitConfig {
    pub inner: RectSpec,
    pub outer: RectSpec,
    /// Two overlapping rectangles for subadditivity.
    pub first: RectSpec,
    pub second: RectSpec,
    pub h_list: Vec<f64>,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrisoConfig {
    pub domain: RectSpec,
    pub kappa: f64,
    pub nz: usize,
    /// Seeds `seed .. seed + ensemble` of the smooth random fields.
    pub ensemble: usize,
    /// Thickness and mesh of the decomposition and Korn diagnostics.
    pub h: f64,
    pub spacing: f64,
    /// Thicknesses of the second-split sweep; the mesh is `h / cells_per_h`.
    pub h_list: Vec<f64>,
    pub cells_per_h: usize,
    /// Optional field in the `x1,x2,x3,v1,v2,v3` layout, decomposed in
    /// addition to the ensemble.
    pub field_file: Option<String>,
    /// Tolerance of the projection check, relative to `|r0|`.
    pub projection_tol: f64,
}

impl Default for GrisoConfig {
    fn default() -> Self {
        Self {
            domain: RectSpec::square([0.0, 0.0], 1.0),
            kappa: vkh_core::griso::DEFAULT_KAPPA,
            nz: 4,
            ensemble: 20,
            h: 0.125,
            spacing: 0.125,
            h_list: vec![0.25, 0.125, 0.0625],
            cells_per_h: 4,
            field_file: None,
            projection_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySource {
    /// Closed form for a homogeneous microstructure.
    Analytic,
    /// 21 upper-triangle entries of the 6×6 matrix.
    Inline { qhat: Vec<f64> },
    /// Density records written by `effective`.
    File { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoadConfig {
    Uniform { value: f64 },
    /// `value · cos(2π m (x1 - a1) / L1) cos(2π n (x2 - a2) / L2)` on the plate rectangle.
    Cosine { value: f64, modes: [u32; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinimizeConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        let d = vkh_core::plate::MinimizeOptions::default();
        Self { tol: d.tol, max_iter: d.max_iter, cg_tol: d.cg_tol, cg_max_iter: d.cg_max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateConfig {
    pub domain: RectSpec,
    pub spacing: f64,
    pub mode: BoundaryMode,
    pub density: DensitySource,
    pub load: LoadConfig,
    /// Remove the resultant and moments of the load (required in free mode
    /// unless the load is already balanced).
    pub balance_load: bool,
    /// Load multipliers, solved in order; consecutive ratios feed the
    /// linear-response check.
    pub load_scales: Vec<f64>,
    /// Relative tolerance of the linear-response check; `null` skips it.
    pub linear_tol: Option<f64>,
    /// Relative tolerance against the linear Kirchhoff solution at the
    /// smallest load; `null` skips it.
    pub kirchhoff_tol: Option<f64>,
    /// Requests the invariance check; free-mode runs always append it.
    pub invariance_check: bool,
    pub equivalence: EquivalenceParams,
    pub invariance_tol: f64,
    pub minimize: MinimizeConfig,
}

impl Default for PlateConfig {
    fn default() -> Self {
        Self {
            domain: RectSpec::square([0.0, 0.0], 1.0),
            spacing: 1.0 / 16.0,
            mode: BoundaryMode::Clamped,
            density: DensitySource::Analytic,
            load: LoadConfig::Uniform { value: 1.0 },
            balance_load: false,
            load_scales: vec![1e-3],
            linear_tol: None,
            kirchhoff_tol: None,
            invariance_check: false,
            equivalence: EquivalenceParams { a: [0.1, -0.05], theta: 0.2 },
            invariance_tol: 1e-10,
            minimize: MinimizeConfig::default(),
        }
    }
}

/// A parsed configuration with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory against which relative paths resolve.
    pub base_dir: PathBuf,
    /// The resolved configuration, keys sorted.
    pub resolved: Value,
    /// Dotted paths filled in from defaults, with their values.
    pub applied_defaults: BTreeMap<String, Value>,
}

impl LoadedConfig {
    pub fn resolve_path(&self, file: &str) -> PathBuf {
        let p = Path::new(file);
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn microstructure(&self) -> Result<MicrostructureField, CliError> {
        self.config
            .microstructure
            .build(Some(&self.base_dir))
            .map_err(|e| CliError::config("microstructure", e.to_string()))
    }
}

/// Reads `path`, applies `overrides` (`key.path=value`, value parsed as JSON
/// when possible, else taken as a string) and validates.
pub fn load(path: &Path, overrides: &[String]) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
    let mut raw: Value = serde_json::from_str(&text).map_err(|e| {
        CliError::config("--config", format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    for o in overrides {
        apply_override(&mut raw, o)?;
    }
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    from_value(raw, base_dir)
}

pub fn from_value(raw: Value, base_dir: PathBuf) -> Result<LoadedConfig, CliError> {
    let config: ExperimentConfig = serde_path_to_error::deserialize(raw.clone()).map_err(|e| {
        let field = e.path().to_string();
        CliError::config(if field == "." { "config".into() } else { field }, e.into_inner().to_string())
    })?;
    let resolved = canonical(&serde_json::to_value(&config).expect("config serializes"));
    let mut applied_defaults = BTreeMap::new();
    collect_defaults(&resolved, &raw, String::new(), &mut applied_defaults);
    let loaded = LoadedConfig { config, base_dir, resolved, applied_defaults };
    validate(&loaded)?;
    Ok(loaded)
}

/// Recursively re-keys objects so that key order is sorted regardless of
/// the map implementation.
pub fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<&String, Value> = m.iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

fn collect_defaults(resolved: &Value, raw: &Value, prefix: String, out: &mut BTreeMap<String, Value>) {
    let Value::Object(res) = resolved else { return };
    let empty = Map::new();
    let given = raw.as_object().unwrap_or(&empty);
    for (k, v) in res {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match given.get(k) {
            None if !v.is_null() => {
                out.insert(path, v.clone());
            }
            // Tagged enums are replaced wholesale; only plain sections recurse.
            Some(sub @ Value::Object(_)) if v.is_object() => collect_defaults(v, sub, path, out),
            _ => {}
        }
    }
}

pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config("--set", format!("expected key=value, got `{spec}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config("--set", format!("malformed key `{key}`")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let last = n + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::config(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(key, format!("index {idx} out of range (length {len})")))?
            }
            other => {
                if !other.is_object() {
                    *other = Value::Object(Map::new());
                }
                let map = other.as_object_mut().expect("object");
                map.entry(part.to_string()).or_insert(Value::Null)
            }
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("key has at least one segment")
}

fn decreasing(field: &str, v: &[f64], min_len: usize) -> Result<(), CliError> {
    if v.len() < min_len {
        return Err(CliError::config(field, format!("needs at least {min_len} values, got {}", v.len())));
    }
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(CliError::config(field, format!("values must be positive, got {x}")));
    }
    if v.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::config(field, format!("must be strictly decreasing, got {v:?}")));
    }
    Ok(())
}

fn positive(field: &str, x: f64) -> Result<(), CliError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be positive, got {x}")))
    }
}

fn at_least(field: &str, x: usize, min: usize) -> Result<(), CliError> {
    if x >= min {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be at least {min}, got {x}")))
    }
}

fn rect(field: &str, r: &RectSpec) -> Result<(), CliError> {
    if r.size.iter().all(|s| s.is_finite() && *s > 0.0) && r.origin.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(CliError::config(field, "needs a finite origin and a positive size"))
    }
}

fn exists(field: &str, loaded: &LoadedConfig, file: &str) -> Result<(), CliError> {
    let p = loaded.resolve_path(file);
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("file {} does not exist", p.display())))
    }
}

fn validate(loaded: &LoadedConfig) -> Result<(), CliError> {
    let c = &loaded.config;
    decreasing("h_list", &c.h_list, 3)?;
    if c.domain.sample_points.is_empty() {
        return Err(CliError::config("domain.sample_points", "at least one sample point is required"));
    }
    decreasing("domain.r_list", &c.domain.r_list, 1)?;
    positive("mesh.spacing", c.mesh.spacing)?;
    at_least("mesh.nz", c.mesh.nz, 1)?;
    positive("solver.tol", c.solver.tol)?;
    at_least("solver.max_iter", c.solver.max_iter, 1)?;
    positive("solver.cauchy_tol", c.solver.cauchy_tol)?;
    positive("effective.analytic_tol", c.effective.analytic_tol)?;
    if let Some(t) = &c.microstructure.table {
        exists("microstructure.table", loaded, t)?;
    }
    let field = loaded.microstructure()?;
    for (i, p) in c.domain.sample_points.iter().enumerate() {
        for &r in &c.domain.r_list {
            if !field.omega.contains_disc(*p, r) {
                return Err(CliError::config(
                    format!("domain.sample_points.{i}"),
                    format!("ball of radius {r} around {p:?} leaves the plate domain"),
                ));
            }
        }
    }

    let p = &c.properties;
    positive("properties.h", p.h)?;
    at_least("properties.strain_count", p.strain_count, 2)?;
    positive("properties.identity_tol", p.identity_tol)?;
    if p.domains.is_empty() {
        return Err(CliError::config("properties.domains", "at least one domain is required"));
    }
    for (i, d) in p.domains.iter().enumerate() {
        rect(&format!("properties.domains.{i}"), d)?;
    }
    if let Some([a, b]) = &p.disjoint {
        rect("properties.disjoint.0", a)?;
        rect("properties.disjoint.1", b)?;
        if a.touches(b) {
            return Err(CliError::config("properties.disjoint", "the two rectangles overlap or touch"));
        }
    }
    if let Some(l) = &p.limit {
        for (name, r) in [("inner", &l.inner), ("outer", &l.outer), ("first", &l.first), ("second", &l.second)] {
            rect(&format!("properties.limit.{name}"), r)?;
        }
        if !l.outer.contains(&l.inner) {
            return Err(CliError::config("properties.limit.inner", "must lie inside properties.limit.outer"));
        }
        decreasing("properties.limit.h_list", &l.h_list, 3)?;
        positive("properties.limit.tol", l.tol)?;
    }

    let g = &c.griso;
    rect("griso.domain", &g.domain)?;
    positive("griso.kappa", g.kappa)?;
    at_least("griso.nz", g.nz, 4)?;
    positive("griso.h", g.h)?;
    positive("griso.spacing", g.spacing)?;
    decreasing("griso.h_list", &g.h_list, 2)?;
    at_least("griso.cells_per_h", g.cells_per_h, 1)?;
    positive("griso.projection_tol", g.projection_tol)?;
    if let Some(f) = &g.field_file {
        exists("griso.field_file", loaded, f)?;
    }

    let pl = &c.plate;
    rect("plate.domain", &pl.domain)?;
    positive("plate.spacing", pl.spacing)?;
    if pl.load_scales.is_empty() {
        return Err(CliError::config("plate.load_scales", "at least one load scale is required"));
    }
    if let Some(x) = pl.load_scales.iter().find(|x| !x.is_finite()) {
        return Err(CliError::config("plate.load_scales", format!("non-finite scale {x}")));
    }
    match &pl.density {
        DensitySource::Inline { qhat } if qhat.len() != 21 => {
            return Err(CliError::config("plate.density.qhat", format!("needs 21 entries, got {}", qhat.len())));
        }
        DensitySource::File { path } => exists("plate.density.path", loaded, path)?,
        _ => {}
    }
    for (name, t) in [("plate.linear_tol", pl.linear_tol), ("plate.kirchhoff_tol", pl.kirchhoff_tol)] {
        if let Some(t) = t {
            positive(name, t)?;
        }
    }
    if pl.invariance_check && pl.mode == BoundaryMode::Clamped {
        return Err(CliError::config(
            "plate.invariance_check",
            "the equivalence transform moves clamped boundary values; use mode \"free-gauged\"",
        ));
    }
    positive("plate.invariance_tol", pl.invariance_tol)?;
    positive("plate.minimize.tol", pl.minimize.tol)?;
    positive("plate.minimize.cg_tol", pl.minimize.cg_tol)?;
    at_least("plate.minimize.max_iter", pl.minimize.max_iter, 1)?;
    at_least("plate.minimize.cg_max_iter", pl.minimize.cg_max_iter, 1)?;
    Ok(())
}
