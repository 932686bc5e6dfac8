//! Built-in experiment presets and the plain-text configuration format.
//!
//! A configuration is a TOML document with four kinds of sections:
//!
//! ```toml
//! [system]
//! name = "demo"            # optional
//! dimension = 1
//! end_time = 1.0
//! step = 0.5
//! noise_as_drift = false   # optional
//!
//! [species.1]              # 1-based, contiguous
//! particles = 4
//! batch_size = 2
//! sigma = 1.0              # additive noise; or `diffusion = "tanh_modulated"`
//!                          # (also "inverse_sqrt", "constant") with `diffusion_scale`
//! potential = "none"       # or "quadratic_well" with potential_rate / potential_center
//! initial = "gaussian"     # initial_mean, initial_variance
//!                          # "uniform": initial_lo, initial_hi; "points": initial_points
//!
//! [kernel.1.1]             # acts on X_1 - X_1; missing pairs are zero kernels
//! form = "zero"            # "scaled_cauchy" (q_i, q_j), "bump_gradient" and
//!                          # "repulsive_bump" (strength, width), "opinion" (strength, radius)
//!
//! [run]                    # every key optional
//! taus = [0.5, 0.25, 0.125]
//! replicas = 1
//! seed = 1
//! ```
//!
//! Species sections also accept `convexity`, `growth`, `diffusion_lipschitz`
//! and `diffusion_sup`; kernel sections accept `sup_norm` and `lipschitz` to
//! override the declared constants. See [`RunParameters`] for the `[run]` keys.

use serde::Serialize;
use toml::{Table, Value};

use crate::error::{Diagnostic, Error, Result};
use crate::model::{
    validate_system, DiffusionSpec, InitialDistribution, KernelForm, KernelSpec, MultiplicativeForm, PotentialForm,
    PotentialSpec, SpeciesSpec, SystemSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramSpec {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunParameters {
    /// Step sizes of a convergence study, largest first.
    pub taus: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    pub record_times: Vec<f64>,
    /// Reference step is `tau / 2^ref_refinement`.
    pub ref_refinement: u32,
    pub substeps: usize,
    /// Reference step sizes as listed for the experiment, kept for reference.
    pub reference_taus: Vec<f64>,
    pub histogram: Option<HistogramSpec>,
    /// Particle-count vectors selectable without forcing.
    pub allowed_particles: Vec<Vec<usize>>,
}

impl Default for RunParameters {
    fn default() -> Self {
        RunParameters {
            taus: Vec::new(),
            replicas: 1,
            seed: 1,
            record_times: Vec::new(),
            ref_refinement: 2,
            substeps: 1,
            reference_taus: Vec::new(),
            histogram: None,
            allowed_particles: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub system: SystemSpec,
    pub run: RunParameters,
    /// Names of the acceptance checks that apply.
    pub checks: Vec<String>,
}

impl Scenario {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "test3",
    "population3",
    "opinion_submissive",
    "opinion_obedient",
    "consistency_equal",
    "consistency_unequal",
    "test2_flops",
];

/// One-line descriptions for listing.
pub fn preset_description(name: &str) -> Option<&'static str> {
    Some(match name {
        "test3" => "three species in 2-d, Cauchy-type kernels, quadratic wells; strong-error study",
        "population3" => "three-species population model in 1-d with bump-function repulsion",
        "opinion_submissive" => "workers, managers and CEOs; managers strongly follow the CEOs",
        "opinion_obedient" => "workers, managers and CEOs; managers weakly follow the CEOs",
        "consistency_equal" => "two species, N = (4, 4), p = (2, 2); enumerable remainder statistics",
        "consistency_unequal" => "two species, N = (4, 6), p = (2, 2); unequal batch counts",
        "test2_flops" => "two species without noise; error versus cost study",
        _ => return None,
    })
}

fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

fn additive_species(n: usize, p: usize, sigma: f64, potential: PotentialSpec, initial: InitialDistribution) -> SpeciesSpec {
    SpeciesSpec {
        particles: n,
        batch_size: p,
        diffusion: DiffusionSpec::additive(sigma),
        potential,
        initial,
    }
}

fn gaussian(mean: Vec<f64>, variance: f64) -> InitialDistribution {
    InitialDistribution::Gaussian { mean, variance }
}

const TEST3_Q: [f64; 3] = [-1.0, 2.0, -2.0];
const TEST3_R: [f64; 3] = [1.0, 4.0, 2.0];
const TEST3_VARIANCE: [f64; 3] = [2.0, 2.0, 1.0];

fn test3_centers() -> [Vec<f64>; 3] {
    [vec![1.0, 0.0], vec![-1.0, -1.0], vec![1.0, 1.0]]
}

fn cauchy_system(n: &[usize], sigma: f64, end_time: f64, step: f64) -> SystemSpec {
    let m = n.len();
    let centers = test3_centers();
    SystemSpec {
        dimension: 2,
        species: (0..m)
            .map(|i| {
                additive_species(
                    n[i],
                    2,
                    sigma,
                    PotentialSpec::quadratic_well(TEST3_R[i], centers[i].clone()),
                    gaussian(vec![0.0, 0.0], TEST3_VARIANCE[i]),
                )
            })
            .collect(),
        kernels: (0..m)
            .map(|i| (0..m).map(|j| KernelSpec::scaled_cauchy(TEST3_Q[i], TEST3_Q[j])).collect())
            .collect(),
        end_time,
        step,
        noise_as_drift: false,
    }
}

fn test3() -> Scenario {
    Scenario {
        name: "test3".into(),
        system: cauchy_system(&[100, 100, 200], 0.5, 1.0, pow2(-6)),
        run: RunParameters {
            taus: (2..=6).map(|e| pow2(-e)).collect(),
            replicas: 10,
            reference_taus: (4..=8).map(|e| pow2(-e)).collect(),
            allowed_particles: vec![vec![100, 100, 200], vec![1000, 1000, 2000], vec![2500, 2500, 5000]],
            ..RunParameters::default()
        },
        checks: vec!["convergence_slope".into(), "second_moment".into()],
    }
}

fn test2_flops() -> Scenario {
    Scenario {
        name: "test2_flops".into(),
        system: cauchy_system(&[1250, 1250], 0.0, 1.0, pow2(-7)),
        run: RunParameters {
            taus: (3..=7).map(|e| pow2(-e)).collect(),
            replicas: 1,
            reference_taus: (1..=5).map(|e| pow2(-e)).collect(),
            allowed_particles: vec![vec![1250, 1250], vec![2500, 2500], vec![5000, 5000]],
            ..RunParameters::default()
        },
        checks: vec!["cost".into()],
    }
}

/// Interaction strengths `D_ij` of the population model.
pub const POPULATION_D: [[f64; 3]; 3] = [[0.0, 355.0, 355.0], [25.0, 0.0, 25.0], [355.0, 0.0, 0.0]];

fn population3() -> Scenario {
    let sigma = [1.0, 2.0, 3.0];
    let means = [-1.0, 2.0, 3.0];
    Scenario {
        name: "population3".into(),
        system: SystemSpec {
            dimension: 1,
            species: (0..3)
                .map(|i| additive_species(5000, 20, sigma[i], PotentialSpec::none(), gaussian(vec![means[i]], 2.0)))
                .collect(),
            kernels: (0..3)
                .map(|i| (0..3).map(|j| KernelSpec::repulsive_bump(POPULATION_D[i][j], 2.0)).collect())
                .collect(),
            end_time: 2.0,
            step: 1e-2,
            noise_as_drift: false,
        },
        run: RunParameters {
            taus: vec![1e-2],
            replicas: 1000,
            histogram: Some(HistogramSpec {
                bins: 60,
                lo: -15.0,
                hi: 15.0,
            }),
            ..RunParameters::default()
        },
        checks: vec!["segregation".into(), "cost_ratio".into()],
    }
}

pub const OPINION_RADII: [f64; 3] = [1.0, 2.5, 5.0];

/// Influence matrix: workers follow workers and managers, managers follow
/// CEOs, CEOs follow CEOs.
pub fn opinion_influence(d23: f64) -> [[f64; 3]; 3] {
    [[5.0, 10.0, 0.0], [0.0, 0.0, d23], [0.0, 0.0, 0.1]]
}

fn opinion(name: &str, d23: f64, check: &str) -> Scenario {
    let d = opinion_influence(d23);
    let n = [5000, 10, 2];
    let p = [20, 2, 2];
    Scenario {
        name: name.into(),
        system: SystemSpec {
            dimension: 1,
            species: (0..3)
                .map(|i| additive_species(n[i], p[i], 0.1, PotentialSpec::none(), InitialDistribution::Uniform { lo: 0.0, hi: 10.0 }))
                .collect(),
            kernels: (0..3)
                .map(|i| (0..3).map(|j| KernelSpec::opinion(d[i][j], OPINION_RADII[j])).collect())
                .collect(),
            end_time: 5.0,
            step: 1e-5,
            noise_as_drift: false,
        },
        run: RunParameters {
            taus: vec![1e-5],
            record_times: (1..=50).map(|m| m as f64 * 0.1).collect(),
            ..RunParameters::default()
        },
        checks: vec![check.into()],
    }
}

fn consistency(name: &str, n: &[usize]) -> Scenario {
    let mut system = cauchy_system(n, 0.5, 1.0, 0.5);
    for s in &mut system.species {
        s.potential = PotentialSpec::none();
    }
    Scenario {
        name: name.into(),
        system,
        run: RunParameters::default(),
        checks: vec!["consistency".into()],
    }
}

/// A built-in scenario by name.
pub fn preset(name: &str) -> Result<Scenario> {
    Ok(match name {
        "test3" => test3(),
        "population3" => population3(),
        "opinion_submissive" => opinion("opinion_submissive", 25.0, "clusters"),
        "opinion_obedient" => opinion("opinion_obedient", 1.0, "consensus"),
        "consistency_equal" => consistency("consistency_equal", &[4, 4]),
        "consistency_unequal" => consistency("consistency_unequal", &[4, 6]),
        "test2_flops" => test2_flops(),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset '{name}'; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    })
}

/// Interaction strength of a bump or opinion kernel, zero for the zero kernel.
pub fn kernel_strength(kernel: &KernelSpec) -> Option<f64> {
    match kernel.form {
        KernelForm::BumpGradient { strength, .. } | KernelForm::Opinion { strength, .. } => Some(strength),
        KernelForm::Zero => Some(0.0),
        _ => None,
    }
}

/// Requested changes to a scenario.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub step: Option<f64>,
    pub taus: Option<Vec<f64>>,
    pub end_time: Option<f64>,
    pub replicas: Option<usize>,
    pub batch_sizes: Option<Vec<usize>>,
    pub particles: Option<Vec<usize>>,
    pub ref_refinement: Option<u32>,
}

/// Applies `overrides`. The result is validated first, so invalid values
/// surface as validation errors. When `pinned` (a preset) and not `force`,
/// only the seed, the replica count, the reference refinement and a particle
/// count listed in `allowed_particles` may change.
pub fn apply_overrides(scenario: &mut Scenario, overrides: &Overrides, pinned: bool, force: bool) -> Result<Vec<Diagnostic>> {
    let n = scenario.system.species_count();
    let mut changed_pinned = Vec::new();
    let mut next = scenario.clone();
    if let Some(seed) = overrides.seed {
        next.run.seed = seed;
    }
    if let Some(r) = overrides.replicas {
        if r == 0 {
            return Err(Error::Config("replicas must be at least 1".into()));
        }
        next.run.replicas = r;
    }
    if let Some(s) = overrides.ref_refinement {
        next.run.ref_refinement = s;
    }
    if let Some(step) = overrides.step {
        next.system.step = step;
        changed_pinned.push("--tau");
    }
    if let Some(taus) = &overrides.taus {
        if taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::Validation(vec![Diagnostic::error("run.taus", "step sizes must be positive")]));
        }
        next.run.taus = taus.clone();
        changed_pinned.push("--tau");
    }
    if let Some(t) = overrides.end_time {
        next.system.end_time = t;
        changed_pinned.push("--end-time");
    }
    for (flag, values) in [("--batch-sizes", &overrides.batch_sizes), ("--particles", &overrides.particles)] {
        let Some(values) = values else { continue };
        let values = if values.len() == 1 { vec![values[0]; n] } else { values.clone() };
        if values.len() != n {
            return Err(Error::Config(format!("{flag} needs 1 or {n} values, got {}", values.len())));
        }
        for (s, &v) in next.system.species.iter_mut().zip(&values) {
            if flag == "--particles" {
                s.particles = v;
                if let InitialDistribution::PointCloud { .. } = s.initial {
                    return Err(Error::Config("cannot resize a point-cloud initial condition".into()));
                }
            } else {
                s.batch_size = v;
            }
        }
        if flag == "--batch-sizes" || !scenario.run.allowed_particles.contains(&values) {
            changed_pinned.push(flag);
        }
    }
    let diags = validate_system(&next.system);
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Error::Validation(diags.into_iter().filter(Diagnostic::is_error).collect()));
    }
    if pinned && !force && !changed_pinned.is_empty() {
        changed_pinned.dedup();
        return Err(Error::Config(format!(
            "preset '{}' pins {}; pass --force to change it",
            scenario.name,
            changed_pinned.join(", ")
        )));
    }
    *scenario = next;
    Ok(diags)
}

// ---------------------------------------------------------------------------
// Configuration parsing

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub scenario: Scenario,
    /// Unknown keys (lenient mode) and assumption warnings.
    pub warnings: Vec<Diagnostic>,
}

/// Parses a configuration in strict mode.
pub fn load_config(text: &str) -> Result<Scenario> {
    Ok(load_config_with(text, false)?.scenario)
}

/// Parses a configuration; with `lenient`, unknown keys are warnings.
pub fn load_config_with(text: &str, lenient: bool) -> Result<LoadedConfig> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map(|s| line_column(text, s.start)).unwrap_or((1, 1));
        Error::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let mut p = Parser {
        lenient,
        diags: Vec::new(),
    };
    let scenario = p.scenario(&root);
    let mut diags = p.diags;
    if let Some(s) = &scenario {
        diags.extend(validate_system(&s.system));
    }
    if diags.iter().any(Diagnostic::is_error) {
        return Err(Error::Validation(diags.into_iter().filter(Diagnostic::is_error).collect()));
    }
    Ok(LoadedConfig {
        scenario: scenario.expect("no errors implies a scenario"),
        warnings: diags,
    })
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

struct Parser {
    lenient: bool,
    diags: Vec<Diagnostic>,
}

/// One table with key-usage tracking.
struct Section<'a> {
    path: String,
    table: &'a Table,
    used: Vec<&'static str>,
}

impl Parser {
    fn error(&mut self, path: impl Into<String>, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error(path, msg));
    }

    fn section<'a>(&mut self, parent: &'a Table, key: &str, path: &str) -> Option<Section<'a>> {
        match parent.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(Section {
                path: path.to_string(),
                table: t,
                used: Vec::new(),
            }),
            Some(_) => {
                self.error(path, "expected a section");
                None
            }
        }
    }

    fn finish(&mut self, s: Section<'_>) {
        for key in s.table.keys() {
            if !s.used.contains(&key.as_str()) {
                let path = format!("{}.{key}", s.path);
                if self.lenient {
                    self.diags.push(Diagnostic::warning(path, "unknown key ignored"));
                } else {
                    self.diags.push(Diagnostic::error(path, "unknown key"));
                }
            }
        }
    }

    fn raw<'a>(&mut self, s: &mut Section<'a>, key: &'static str) -> Option<&'a Value> {
        s.used.push(key);
        s.table.get(key)
    }

    fn float(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<f64> {
        let path = format!("{}.{key}", s.path);
        match self.raw(s, key)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => {
                self.error(path, "expected a number");
                None
            }
        }
    }

    fn req_float(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<f64> {
        let v = self.float(s, key);
        if v.is_none() && !s.table.contains_key(key) {
            self.error(format!("{}.{key}", s.path), "missing required key");
        }
        v
    }

    fn uint(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<u64> {
        let path = format!("{}.{key}", s.path);
        match self.raw(s, key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.error(path, "expected a nonnegative integer");
                None
            }
        }
    }

    fn req_uint(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<u64> {
        let v = self.uint(s, key);
        if v.is_none() && !s.table.contains_key(key) {
            self.error(format!("{}.{key}", s.path), "missing required key");
        }
        v
    }

    fn boolean(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<bool> {
        let path = format!("{}.{key}", s.path);
        match self.raw(s, key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.error(path, "expected true or false");
                None
            }
        }
    }

    fn string(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<String> {
        let path = format!("{}.{key}", s.path);
        match self.raw(s, key)? {
            Value::String(v) => Some(v.clone()),
            _ => {
                self.error(path, "expected a string");
                None
            }
        }
    }

    fn floats(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<Vec<f64>> {
        let path = format!("{}.{key}", s.path);
        let v = self.raw(s, key)?;
        let out = as_floats(v);
        if out.is_none() {
            self.error(path, "expected a list of numbers");
        }
        out
    }

    fn uints_list(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<Vec<Vec<usize>>> {
        let path = format!("{}.{key}", s.path);
        let v = self.raw(s, key)?;
        let out = v.as_array().and_then(|rows| {
            rows.iter()
                .map(|r| {
                    r.as_array()?
                        .iter()
                        .map(|x| x.as_integer().filter(|i| *i >= 0).map(|i| i as usize))
                        .collect::<Option<Vec<_>>>()
                })
                .collect::<Option<Vec<_>>>()
        });
        if out.is_none() {
            self.error(path, "expected a list of integer lists");
        }
        out
    }

    fn strings(&mut self, s: &mut Section<'_>, key: &'static str) -> Option<Vec<String>> {
        let path = format!("{}.{key}", s.path);
        let v = self.raw(s, key)?;
        let out = v
            .as_array()
            .and_then(|a| a.iter().map(|x| x.as_str().map(str::to_string)).collect::<Option<Vec<_>>>());
        if out.is_none() {
            self.error(path, "expected a list of strings");
        }
        out
    }

    fn scenario(&mut self, root: &Table) -> Option<Scenario> {
        for key in root.keys() {
            if !["system", "species", "kernel", "run"].contains(&key.as_str()) {
                if self.lenient {
                    self.diags.push(Diagnostic::warning(key.clone(), "unknown section ignored"));
                } else {
                    self.error(key.clone(), "unknown section");
                }
            }
        }
        let Some(mut sys) = self.section(root, "system", "system") else {
            self.error("system", "missing [system] section");
            return None;
        };
        let name = self.string(&mut sys, "name").unwrap_or_else(|| "config".into());
        let dimension = self.req_uint(&mut sys, "dimension").unwrap_or(1) as usize;
        let end_time = self.req_float(&mut sys, "end_time").unwrap_or(f64::NAN);
        let step = self.req_float(&mut sys, "step").unwrap_or(f64::NAN);
        let noise_as_drift = self.boolean(&mut sys, "noise_as_drift").unwrap_or(false);
        self.finish(sys);

        let species = self.species_list(root, dimension);
        let n = species.len();
        let kernels = self.kernels(root, n);
        let run = self.run(root);
        let checks = run.1;
        Some(Scenario {
            name,
            system: SystemSpec {
                dimension,
                species,
                kernels,
                end_time,
                step,
                noise_as_drift,
            },
            run: run.0,
            checks,
        })
    }

    fn indexed<'a>(&mut self, table: &'a Table, path: &str) -> Vec<(usize, &'a Value)> {
        let mut out = Vec::new();
        for (k, v) in table {
            match k.parse::<usize>() {
                Ok(i) if i >= 1 => out.push((i, v)),
                _ => self.error(format!("{path}.{k}"), "section index must be a positive integer"),
            }
        }
        out.sort_by_key(|(i, _)| *i);
        out
    }

    fn species_list(&mut self, root: &Table, d: usize) -> Vec<SpeciesSpec> {
        let Some(all) = root.get("species").and_then(Value::as_table) else {
            self.error("species", "at least one [species.N] section is required");
            return Vec::new();
        };
        let entries = self.indexed(all, "species");
        let mut out = Vec::new();
        for (pos, (i, v)) in entries.into_iter().enumerate() {
            let path = format!("species.{i}");
            if i != pos + 1 {
                self.error(path.clone(), format!("species must be numbered 1..n without gaps, expected {}", pos + 1));
            }
            let Some(t) = v.as_table() else {
                self.error(path, "expected a section");
                continue;
            };
            let mut s = Section {
                path,
                table: t,
                used: Vec::new(),
            };
            out.push(self.one_species(&mut s, d));
            self.finish(s);
        }
        out
    }

    fn one_species(&mut self, s: &mut Section<'_>, d: usize) -> SpeciesSpec {
        let particles = self.req_uint(s, "particles").unwrap_or(0) as usize;
        let batch_size = self.req_uint(s, "batch_size").unwrap_or(0) as usize;

        let sigma = self.float(s, "sigma");
        let form = self.string(s, "diffusion");
        let scale = self.float(s, "diffusion_scale");
        let lip = self.float(s, "diffusion_lipschitz");
        let sup = self.float(s, "diffusion_sup");
        let diffusion = match (form.as_deref(), sigma) {
            (None | Some("additive"), Some(sigma)) => DiffusionSpec::additive(sigma),
            (Some(f @ ("constant" | "inverse_sqrt" | "tanh_modulated")), None) => {
                let Some(c) = scale else {
                    self.error(format!("{}.diffusion_scale", s.path), "missing required key");
                    return placeholder_species();
                };
                let profile = match f {
                    "constant" => MultiplicativeForm::Constant { value: c },
                    "inverse_sqrt" => MultiplicativeForm::InverseSqrt { scale: c },
                    _ => MultiplicativeForm::TanhModulated { scale: c },
                };
                let mut spec = DiffusionSpec::multiplicative(profile);
                if let DiffusionSpec::Multiplicative { lipschitz, sup_bound, .. } = &mut spec {
                    if lip.is_some() {
                        *lipschitz = lip;
                    }
                    if sup.is_some() {
                        *sup_bound = sup;
                    }
                }
                spec
            }
            _ => {
                self.error(
                    format!("{}.diffusion", s.path),
                    "give either `sigma` or `diffusion` = constant | inverse_sqrt | tanh_modulated with `diffusion_scale`",
                );
                DiffusionSpec::additive(0.0)
            }
        };

        let mut potential = match self.string(s, "potential").as_deref().unwrap_or("none") {
            "none" => PotentialSpec::none(),
            "quadratic_well" => {
                let rate = self.req_float(s, "potential_rate").unwrap_or(f64::NAN);
                let center = self.floats(s, "potential_center").unwrap_or_else(|| vec![0.0; d]);
                PotentialSpec::quadratic_well(rate, center)
            }
            other => {
                self.error(format!("{}.potential", s.path), format!("unknown potential '{other}'"));
                PotentialSpec::none()
            }
        };
        if let Some(r) = self.float(s, "convexity") {
            potential.convexity = Some(r);
        }
        if let Some(q) = self.float(s, "growth") {
            potential.growth = q;
        }

        let initial = match self.string(s, "initial").as_deref().unwrap_or("gaussian") {
            "gaussian" => InitialDistribution::Gaussian {
                mean: self.floats(s, "initial_mean").unwrap_or_else(|| vec![0.0; d]),
                variance: self.float(s, "initial_variance").unwrap_or(1.0),
            },
            "uniform" => InitialDistribution::Uniform {
                lo: self.req_float(s, "initial_lo").unwrap_or(f64::NAN),
                hi: self.req_float(s, "initial_hi").unwrap_or(f64::NAN),
            },
            "points" => {
                let path = format!("{}.initial_points", s.path);
                let pts = self
                    .raw(s, "initial_points")
                    .and_then(|v| v.as_array().and_then(|a| a.iter().map(as_floats).collect::<Option<Vec<_>>>()));
                if pts.is_none() {
                    self.error(path, "expected a list of coordinate lists");
                }
                InitialDistribution::PointCloud {
                    positions: pts.unwrap_or_default(),
                }
            }
            other => {
                self.error(format!("{}.initial", s.path), format!("unknown initial distribution '{other}'"));
                InitialDistribution::Uniform { lo: 0.0, hi: 1.0 }
            }
        };
        SpeciesSpec {
            particles,
            batch_size,
            diffusion,
            potential,
            initial,
        }
    }

    fn kernels(&mut self, root: &Table, n: usize) -> Vec<Vec<KernelSpec>> {
        let mut out = vec![vec![KernelSpec::zero(); n]; n];
        let Some(all) = root.get("kernel") else { return out };
        let Some(all) = all.as_table() else {
            self.error("kernel", "expected a section");
            return out;
        };
        for (i, row) in self.indexed(all, "kernel") {
            let Some(row) = row.as_table() else {
                self.error(format!("kernel.{i}"), "expected [kernel.i.j] sections");
                continue;
            };
            for (j, v) in self.indexed(row, &format!("kernel.{i}")) {
                let path = format!("kernel.{i}.{j}");
                if i > n || j > n {
                    self.error(path, format!("species index out of range (n = {n})"));
                    continue;
                }
                let Some(t) = v.as_table() else {
                    self.error(path, "expected a section");
                    continue;
                };
                let mut s = Section {
                    path,
                    table: t,
                    used: Vec::new(),
                };
                out[i - 1][j - 1] = self.one_kernel(&mut s);
                self.finish(s);
            }
        }
        out
    }

    fn one_kernel(&mut self, s: &mut Section<'_>) -> KernelSpec {
        let form = self.string(s, "form").unwrap_or_else(|| "zero".into());
        let mut k = match form.as_str() {
            "zero" => KernelSpec::zero(),
            "scaled_cauchy" => {
                let qi = self.req_float(s, "q_i").unwrap_or(f64::NAN);
                let qj = self.req_float(s, "q_j").unwrap_or(f64::NAN);
                KernelSpec::scaled_cauchy(qi, qj)
            }
            "bump_gradient" | "repulsive_bump" => {
                let d = self.req_float(s, "strength").unwrap_or(f64::NAN);
                let w = self.req_float(s, "width").unwrap_or(f64::NAN);
                if form == "bump_gradient" {
                    KernelSpec::bump_gradient(d, w)
                } else {
                    KernelSpec::repulsive_bump(d, w)
                }
            }
            "opinion" => {
                let d = self.req_float(s, "strength").unwrap_or(f64::NAN);
                let r = self.req_float(s, "radius").unwrap_or(f64::NAN);
                KernelSpec::opinion(d, r)
            }
            other => {
                self.error(format!("{}.form", s.path), format!("unknown kernel form '{other}'"));
                KernelSpec::zero()
            }
        };
        if let Some(v) = self.float(s, "sup_norm") {
            k.sup_norm = Some(v);
        }
        if let Some(v) = self.float(s, "lipschitz") {
            k.lipschitz = Some(v);
        }
        k
    }

    fn run(&mut self, root: &Table) -> (RunParameters, Vec<String>) {
        let mut run = RunParameters::default();
        let Some(mut s) = self.section(root, "run", "run") else {
            return (run, Vec::new());
        };
        if let Some(v) = self.floats(&mut s, "taus") {
            run.taus = v;
        }
        if let Some(v) = self.uint(&mut s, "replicas") {
            run.replicas = v as usize;
        }
        if let Some(v) = self.uint(&mut s, "seed") {
            run.seed = v;
        }
        if let Some(v) = self.floats(&mut s, "record_times") {
            run.record_times = v;
        }
        if let Some(v) = self.uint(&mut s, "ref_refinement") {
            run.ref_refinement = v.min(u64::from(u32::MAX)) as u32;
        }
        if let Some(v) = self.uint(&mut s, "substeps") {
            run.substeps = v as usize;
        }
        if let Some(v) = self.floats(&mut s, "reference_taus") {
            run.reference_taus = v;
        }
        if let Some(v) = self.uints_list(&mut s, "allowed_particles") {
            run.allowed_particles = v;
        }
        let bins = self.uint(&mut s, "histogram_bins");
        let lo = self.float(&mut s, "histogram_lo");
        let hi = self.float(&mut s, "histogram_hi");
        match (bins, lo, hi) {
            (Some(bins), Some(lo), Some(hi)) => {
                run.histogram = Some(HistogramSpec {
                    bins: bins as usize,
                    lo,
                    hi,
                })
            }
            (None, None, None) => {}
            _ => self.error("run.histogram_bins", "histogram needs histogram_bins, histogram_lo and histogram_hi"),
        }
        let checks = self.strings(&mut s, "checks").unwrap_or_default();
        if run.replicas == 0 {
            self.error("run.replicas", "replicas must be at least 1");
        }
        if run.substeps == 0 {
            self.error("run.substeps", "substeps must be at least 1");
        }
        self.finish(s);
        (run, checks)
    }
}

fn placeholder_species() -> SpeciesSpec {
    SpeciesSpec {
        particles: 0,
        batch_size: 0,
        diffusion: DiffusionSpec::additive(0.0),
        potential: PotentialSpec::none(),
        initial: InitialDistribution::Uniform { lo: 0.0, hi: 1.0 },
    }
}

fn as_floats(v: &Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| match x {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization back to the configuration format

fn floats_value(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn put_opt(t: &mut Table, key: &str, v: Option<f64>) {
    if let Some(v) = v {
        t.insert(key.into(), Value::Float(v));
    }
}

/// Writes a scenario in the configuration format; `load_config` of the
/// result reproduces it. Custom callables cannot be written.
pub fn serialize(scenario: &Scenario) -> Result<String> {
    let sys = &scenario.system;
    let mut root = Table::new();

    let mut t = Table::new();
    t.insert("name".into(), Value::String(scenario.name.clone()));
    t.insert("dimension".into(), Value::Integer(sys.dimension as i64));
    t.insert("end_time".into(), Value::Float(sys.end_time));
    t.insert("step".into(), Value::Float(sys.step));
    t.insert("noise_as_drift".into(), Value::Boolean(sys.noise_as_drift));
    root.insert("system".into(), Value::Table(t));

    let mut species = Table::new();
    for (i, s) in sys.species.iter().enumerate() {
        let mut t = Table::new();
        t.insert("particles".into(), Value::Integer(s.particles as i64));
        t.insert("batch_size".into(), Value::Integer(s.batch_size as i64));
        match &s.diffusion {
            DiffusionSpec::Additive { sigma } => {
                t.insert("sigma".into(), Value::Float(*sigma));
            }
            DiffusionSpec::Multiplicative {
                profile,
                lipschitz,
                sup_bound,
            } => {
                let (name, c) = match profile {
                    MultiplicativeForm::Constant { value } => ("constant", *value),
                    MultiplicativeForm::InverseSqrt { scale } => ("inverse_sqrt", *scale),
                    MultiplicativeForm::TanhModulated { scale } => ("tanh_modulated", *scale),
                    MultiplicativeForm::Custom(_) => {
                        return Err(Error::Config(format!("species {} has a custom diffusion", i + 1)))
                    }
                };
                t.insert("diffusion".into(), Value::String(name.into()));
                t.insert("diffusion_scale".into(), Value::Float(c));
                put_opt(&mut t, "diffusion_lipschitz", *lipschitz);
                put_opt(&mut t, "diffusion_sup", *sup_bound);
            }
        }
        match &s.potential.form {
            PotentialForm::None => {
                t.insert("potential".into(), Value::String("none".into()));
            }
            PotentialForm::QuadraticWell { rate, center } => {
                t.insert("potential".into(), Value::String("quadratic_well".into()));
                t.insert("potential_rate".into(), Value::Float(*rate));
                t.insert("potential_center".into(), floats_value(center));
            }
            PotentialForm::Custom(_) => return Err(Error::Config(format!("species {} has a custom potential", i + 1))),
        }
        match s.potential.convexity {
            Some(r) => {
                t.insert("convexity".into(), Value::Float(r));
            }
            None => return Err(Error::Config(format!("species {}: undeclared convexity cannot be written", i + 1))),
        }
        t.insert("growth".into(), Value::Float(s.potential.growth));
        match &s.initial {
            InitialDistribution::Gaussian { mean, variance } => {
                t.insert("initial".into(), Value::String("gaussian".into()));
                t.insert("initial_mean".into(), floats_value(mean));
                t.insert("initial_variance".into(), Value::Float(*variance));
            }
            InitialDistribution::Uniform { lo, hi } => {
                t.insert("initial".into(), Value::String("uniform".into()));
                t.insert("initial_lo".into(), Value::Float(*lo));
                t.insert("initial_hi".into(), Value::Float(*hi));
            }
            InitialDistribution::PointCloud { positions } => {
                t.insert("initial".into(), Value::String("points".into()));
                t.insert(
                    "initial_points".into(),
                    Value::Array(positions.iter().map(|p| floats_value(p)).collect()),
                );
            }
        }
        species.insert((i + 1).to_string(), Value::Table(t));
    }
    root.insert("species".into(), Value::Table(species));

    let mut kernels = Table::new();
    for (i, row) in sys.kernels.iter().enumerate() {
        let mut r = Table::new();
        for (j, k) in row.iter().enumerate() {
            let mut t = Table::new();
            match &k.form {
                KernelForm::Zero => {
                    t.insert("form".into(), Value::String("zero".into()));
                }
                KernelForm::ScaledCauchy { q_i, q_j } => {
                    t.insert("form".into(), Value::String("scaled_cauchy".into()));
                    t.insert("q_i".into(), Value::Float(*q_i));
                    t.insert("q_j".into(), Value::Float(*q_j));
                }
                KernelForm::BumpGradient {
                    strength,
                    width,
                    repulsive,
                } => {
                    let name = if *repulsive { "repulsive_bump" } else { "bump_gradient" };
                    t.insert("form".into(), Value::String(name.into()));
                    t.insert("strength".into(), Value::Float(*strength));
                    t.insert("width".into(), Value::Float(*width));
                }
                KernelForm::Opinion { strength, radius } => {
                    t.insert("form".into(), Value::String("opinion".into()));
                    t.insert("strength".into(), Value::Float(*strength));
                    t.insert("radius".into(), Value::Float(*radius));
                }
                KernelForm::Custom(_) => {
                    return Err(Error::Config(format!("kernel ({}, {}) is a custom callable", i + 1, j + 1)))
                }
            }
            match (k.sup_norm, k.lipschitz) {
                (Some(s), Some(l)) => {
                    t.insert("sup_norm".into(), Value::Float(s));
                    t.insert("lipschitz".into(), Value::Float(l));
                }
                _ => {
                    return Err(Error::Config(format!(
                        "kernel ({}, {}) has undeclared constants that cannot be written",
                        i + 1,
                        j + 1
                    )))
                }
            }
            r.insert((j + 1).to_string(), Value::Table(t));
        }
        kernels.insert((i + 1).to_string(), Value::Table(r));
    }
    root.insert("kernel".into(), Value::Table(kernels));

    let run = &scenario.run;
    let mut t = Table::new();
    t.insert("taus".into(), floats_value(&run.taus));
    t.insert("replicas".into(), Value::Integer(run.replicas as i64));
    t.insert("seed".into(), Value::Integer(i64::try_from(run.seed).map_err(|_| Error::Config("seed exceeds i64".into()))?));
    t.insert("record_times".into(), floats_value(&run.record_times));
    t.insert("ref_refinement".into(), Value::Integer(i64::from(run.ref_refinement)));
    t.insert("substeps".into(), Value::Integer(run.substeps as i64));
    t.insert("reference_taus".into(), floats_value(&run.reference_taus));
    t.insert(
        "allowed_particles".into(),
        Value::Array(
            run.allowed_particles
                .iter()
                .map(|v| Value::Array(v.iter().map(|&x| Value::Integer(x as i64)).collect()))
                .collect(),
        ),
    );
    if let Some(h) = &run.histogram {
        t.insert("histogram_bins".into(), Value::Integer(h.bins as i64));
        t.insert("histogram_lo".into(), Value::Float(h.lo));
        t.insert("histogram_hi".into(), Value::Float(h.hi));
    }
    t.insert(
        "checks".into(),
        Value::Array(scenario.checks.iter().map(|c| Value::String(c.clone())).collect()),
    );
    root.insert("run".into(), Value::Table(t));

    toml::to_string(&root).map_err(|e| Error::Config(format!("cannot write configuration: {e}")))
}
