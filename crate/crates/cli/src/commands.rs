use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use rbm_core::analysis::{
    add_to_histogram, consistency_report, default_targets, kernel_eval_counts, ConsistencyMode, ConsistencyReport, CostReport,
    ErrorSeries, Histogram,
};
use rbm_core::batching::{interaction_coefficients, legacy_coefficients};
use rbm_core::dynamics::{run, run_coupled, sample_initial, CoupledConfig, Method, RunConfig, Trajectory};
use rbm_core::io::{csv_float, write_atomic};
use rbm_core::scenarios::{apply_overrides, load_config_with, preset, preset_description, Overrides, Scenario, PRESET_NAMES};
use rbm_core::streams::ReplicaStreams;
use rbm_core::Error;
use serde::Serialize;

use crate::{Command, Common, Format};

/// A failed command with its exit code.
enum Failure {
    Config(String),
    BlowUp(String),
    Mismatch(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::BlowUp(_) => 2,
            Failure::Mismatch(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::BlowUp(m) | Failure::Mismatch(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::BlowUp { .. } => Failure::BlowUp(e.to_string()),
            Error::TooLargeToEnumerate { .. } => Failure::Config(format!("{e}; use --mc SAMPLES for Monte-Carlo mode")),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

pub fn dispatch(command: Command) -> u8 {
    let result = match command {
        Command::Simulate { common, full } => simulate(&common, full),
        Command::Converge { common } => converge(&common),
        Command::Consistency { common, mc, legacy_beta } => consistency(&common, mc, legacy_beta),
        Command::Cost { common, skip_runtime } => cost(&common, skip_runtime),
        Command::ListPresets => {
            for name in PRESET_NAMES {
                println!("{name:<20} {}", preset_description(name).unwrap_or(""));
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

#[derive(Copy, Clone, PartialEq)]
enum TauUse {
    /// `--tau` sets the step size.
    Step,
    /// `--tau` sets the convergence list.
    List,
}

fn load(common: &Common, tau: TauUse) -> Result<Scenario, Failure> {
    let (mut scenario, pinned) = match (&common.source.preset, &common.source.config) {
        (Some(name), None) => (preset(name)?, true),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
            let loaded = load_config_with(&text, common.lenient)?;
            for w in &loaded.warnings {
                eprintln!("{w}");
            }
            (loaded.scenario, false)
        }
        _ => return Err(Failure::Config("give exactly one of --preset or --config".into())),
    };
    let mut overrides = Overrides {
        seed: common.seed,
        end_time: common.end_time,
        replicas: common.replicas,
        batch_sizes: common.batch_sizes.clone(),
        particles: common.particles.clone(),
        ref_refinement: common.ref_refinement,
        ..Overrides::default()
    };
    if let Some(t) = &common.tau {
        match tau {
            TauUse::Step if t.len() != 1 => return Err(Failure::Config(format!("--tau takes a single value here, got {}", t.len()))),
            TauUse::Step => overrides.step = Some(t[0]),
            TauUse::List => overrides.taus = Some(t.clone()),
        }
    }
    let diags = apply_overrides(&mut scenario, &overrides, pinned, common.force)?;
    if common.source.config.is_none() {
        for d in &diags {
            eprintln!("{d}");
        }
    }
    Ok(scenario)
}

fn output_dir(common: &Common) -> Result<&Path, Failure> {
    fs::create_dir_all(&common.output).map_err(|e| Failure::Config(format!("cannot create {}: {e}", common.output.display())))?;
    Ok(&common.output)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Failure::Config(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

#[derive(Serialize)]
struct SimulationSummary<'a> {
    scenario: &'a str,
    spec_hash: String,
    method: Method,
    seed: u64,
    replicas: usize,
    steps: usize,
    kernel_evaluations: u64,
}

#[derive(Serialize)]
struct SpeciesHistogram<'a> {
    species: usize,
    histogram: &'a Histogram,
}

fn merge(into: &mut Histogram, from: &Histogram) {
    for (a, b) in into.counts.iter_mut().zip(&from.counts) {
        *a += b;
    }
    into.below += from.below;
    into.above += from.above;
}

fn histograms_of(traj: &Trajectory, template: &Histogram) -> Result<Vec<Histogram>, Failure> {
    let state = traj.final_state();
    (0..state.species_count())
        .map(|i| {
            let mut h = template.clone();
            add_to_histogram(&mut h, state, i)?;
            Ok(h)
        })
        .collect()
}

fn simulate(common: &Common, full: bool) -> Outcome {
    let scenario = load(common, TauUse::Step)?;
    let spec = &scenario.system;
    let method = if full { Method::Full } else { Method::RandomBatch };
    let replicas = scenario.run.replicas;
    let config = |replica: usize| {
        let mut cfg = RunConfig::new(scenario.run.seed);
        cfg.replica = replica as u64;
        cfg.record_times = scenario.run.record_times.clone();
        cfg.substeps = scenario.run.substeps;
        cfg
    };
    let start = Instant::now();
    let first = run(spec, method, &config(0))?;

    // Histograms of the final states, for one-dimensional systems.
    let template = if spec.dimension == 1 {
        let (bins, lo, hi) = match &scenario.run.histogram {
            Some(h) => (h.bins, h.lo, h.hi),
            None => {
                let all = first.final_state().positions.concat();
                let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let pad = 0.1 * (hi - lo).max(1e-9);
                (50, lo - pad, hi + pad)
            }
        };
        Some(Histogram::new(bins, lo, hi)?)
    } else {
        None
    };
    let mut hist = match &template {
        Some(t) => Some(histograms_of(&first, t)?),
        None => None,
    };
    let rest: Vec<Result<(u64, Option<Vec<Histogram>>), Failure>> = (1..replicas)
        .into_par_iter()
        .map(|r| {
            let traj = run(spec, method, &config(r))?;
            let h = match &template {
                Some(t) => Some(histograms_of(&traj, t)?),
                None => None,
            };
            Ok((traj.meta.kernel_evaluations, h))
        })
        .collect();
    let mut evaluations = first.meta.kernel_evaluations;
    for r in rest {
        let (e, h) = r?;
        evaluations += e;
        if let (Some(acc), Some(h)) = (hist.as_mut(), h) {
            for (a, b) in acc.iter_mut().zip(&h) {
                merge(a, b);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if let Some(hs) = hist.as_mut() {
        hs.iter_mut().for_each(Histogram::normalize);
    }

    let dir = output_dir(common)?;
    match common.format {
        Format::Csv => {
            let mut buf = Vec::new();
            first.write_csv(&mut buf)?;
            write_atomic(&dir.join("trajectory.csv"), &buf)?;
            if let Some(hs) = &hist {
                let mut buf = Vec::new();
                use std::io::Write;
                writeln!(buf, "species,bin_lo,bin_hi,count,density")?;
                for (i, h) in hs.iter().enumerate() {
                    let w = h.bin_width();
                    for (b, (c, d)) in h.counts.iter().zip(&h.density).enumerate() {
                        let lo = h.lo + b as f64 * w;
                        writeln!(buf, "{},{},{},{},{}", i + 1, csv_float(lo), csv_float(lo + w), c, csv_float(*d))?;
                    }
                }
                write_atomic(&dir.join("histogram.csv"), &buf)?;
            }
        }
        Format::Json => {
            write_atomic(&dir.join("trajectory.json"), &json_bytes(&first)?)?;
            if let Some(hs) = &hist {
                let list: Vec<SpeciesHistogram> = hs.iter().enumerate().map(|(i, h)| SpeciesHistogram { species: i + 1, histogram: h }).collect();
                write_atomic(&dir.join("histogram.json"), &json_bytes(&list)?)?;
            }
        }
    }
    let summary = SimulationSummary {
        scenario: &scenario.name,
        spec_hash: spec.fingerprint(),
        method,
        seed: scenario.run.seed,
        replicas,
        steps: first.meta.steps,
        kernel_evaluations: evaluations,
    };
    write_atomic(&dir.join("summary.json"), &json_bytes(&summary)?)?;
    println!(
        "simulate {}: {} replica(s), {} steps, {} kernel evaluations, {:.2}s wall time",
        scenario.name, replicas, first.meta.steps, evaluations, elapsed
    );
    if let Some(hs) = &hist {
        let mass: f64 = hs.iter().map(Histogram::out_of_range_mass).fold(0.0, f64::max);
        if mass > 0.0 {
            eprintln!("warning: up to {:.2}% of a species falls outside the histogram range", 100.0 * mass);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SlopeOutput<'a> {
    scenario: &'a str,
    spec_hash: String,
    seed: u64,
    replicas: usize,
    ref_refinement: u32,
    slope: Option<f64>,
    intercept: Option<f64>,
    residual: Option<f64>,
    points_used: Option<usize>,
    warnings: Vec<String>,
    fit_error: Option<String>,
    noise_floor: f64,
}

fn converge(common: &Common) -> Outcome {
    let scenario = load(common, TauUse::List)?;
    let taus = scenario.run.taus.clone();
    if taus.len() < 3 {
        return Err(Failure::Config(format!("need >= 3 step sizes for a convergence study, got {}", taus.len())));
    }
    let cfg = CoupledConfig {
        seed: scenario.run.seed,
        taus,
        refinement: scenario.run.ref_refinement,
        replicas: scenario.run.replicas,
    };
    let start = Instant::now();
    let series: ErrorSeries = run_coupled(&scenario.system, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let dir = output_dir(common)?;
    let fit = series.fit.as_ref();
    let slope = SlopeOutput {
        scenario: &scenario.name,
        spec_hash: scenario.system.fingerprint(),
        seed: series.seed,
        replicas: series.replicas,
        ref_refinement: cfg.refinement,
        slope: fit.map(|f| f.slope),
        intercept: fit.map(|f| f.intercept),
        residual: fit.map(|f| f.residual),
        points_used: fit.map(|f| f.points_used),
        warnings: fit.map(|f| f.warnings.clone()).unwrap_or_default(),
        fit_error: series.fit_error.clone(),
        noise_floor: series.noise_floor,
    };
    match common.format {
        Format::Csv => {
            let mut buf = Vec::new();
            series.write_csv(&mut buf)?;
            write_atomic(&dir.join("series.csv"), &buf)?;
            write_atomic(&dir.join("slope.json"), &json_bytes(&slope)?)?;
        }
        Format::Json => write_atomic(&dir.join("series.json"), &json_bytes(&series)?)?,
    }
    for w in &slope.warnings {
        eprintln!("warning: {w}");
    }
    match (fit, &series.fit_error) {
        (Some(f), _) => println!(
            "converge {}: slope {:.4} over {} step sizes, {} replica(s), {:.2}s wall time",
            scenario.name, f.slope, f.points_used, series.replicas, elapsed
        ),
        (None, err) => eprintln!("warning: slope fit refused: {}", err.as_deref().unwrap_or("unknown reason")),
    }
    Ok(())
}

fn consistency_csv(report: &ConsistencyReport) -> Result<Vec<u8>, Failure> {
    use std::io::Write;
    let mut buf = Vec::new();
    writeln!(buf, "species,particle,closed_form_variance,measured_variance,max_abs_mean,passed")?;
    for e in &report.entries {
        let (var, mean) = match (&e.exact, &e.monte_carlo) {
            (Some(m), _) => (m.variance, m.mean.iter().fold(0.0f64, |a, v| a.max(v.abs()))),
            (None, Some(m)) => (m.variance, m.mean.iter().fold(0.0f64, |a, v| a.max(v.abs()))),
            (None, None) => (f64::NAN, f64::NAN),
        };
        writeln!(
            buf,
            "{},{},{},{},{},{}",
            e.species,
            e.particle,
            csv_float(e.closed_form.variance),
            csv_float(var),
            csv_float(mean),
            e.passed
        )?;
    }
    Ok(buf)
}

fn consistency(common: &Common, mc: Option<u64>, legacy_beta: bool) -> Outcome {
    if let Some(s) = mc {
        if s < 2 {
            return Err(Failure::Config(format!("--mc needs at least 2 samples, got {s}")));
        }
    }
    let scenario = load(common, TauUse::Step)?;
    let spec = &scenario.system;
    let seed = scenario.run.seed;
    let positions = sample_initial(spec, &mut ReplicaStreams::new(seed, 0).init);
    let layout = spec.layout();
    let coeffs = if legacy_beta {
        eprintln!("warning: --legacy-beta is an experimental negative control; the batched force is biased");
        legacy_coefficients(&layout)
    } else {
        interaction_coefficients(&layout)
    };
    let mode = match mc {
        Some(samples) => ConsistencyMode::MonteCarlo { samples, seed },
        None => ConsistencyMode::Exact,
    };
    let report = consistency_report(spec, &positions, &coeffs, &default_targets(spec), &mode)?;
    let dir = output_dir(common)?;
    match common.format {
        Format::Csv => write_atomic(&dir.join("consistency.csv"), &consistency_csv(&report)?)?,
        Format::Json => write_atomic(&dir.join("consistency.json"), &json_bytes(&report)?)?,
    }
    println!(
        "consistency {}: {} over {} particle(s); theta = {}, max |E chi| = {:.3e}, max variance gap = {:.3e}",
        scenario.name,
        if report.passed { "PASS" } else { "FAIL" },
        report.entries.len(),
        report.theory.theta,
        report.max_abs_mean,
        report.max_discrepancy
    );
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Mismatch("closed-form remainder statistics do not match".into()))
    }
}

fn cost_csv(r: &CostReport) -> Result<Vec<u8>, Failure> {
    use std::io::Write;
    let mut buf = Vec::new();
    writeln!(buf, "quantity,full,rbm,ratio")?;
    let ratio = csv_float(r.ratio);
    writeln!(buf, "evaluations_per_step,{},{},{ratio}", r.full_evaluations_per_step, r.rbm_evaluations_per_step)?;
    writeln!(
        buf,
        "ops_per_step,{},{},{}",
        csv_float(r.full_ops_per_step),
        csv_float(r.rbm_ops_per_step),
        csv_float(r.ops_ratio)
    )?;
    writeln!(buf, "evaluations_total,{},{},{ratio}", r.full_evaluations_total, r.rbm_evaluations_total)?;
    if let (Some(f), Some(b)) = (r.runtime_full_per_step, r.runtime_rbm_per_step) {
        writeln!(buf, "runtime_evaluations_per_step,{f},{b},{}", csv_float(b as f64 / f as f64))?;
    }
    Ok(buf)
}

fn cost(common: &Common, skip_runtime: bool) -> Outcome {
    let scenario = load(common, TauUse::Step)?;
    let report = kernel_eval_counts(&scenario.system, !skip_runtime, scenario.run.seed);
    let dir = output_dir(common)?;
    match common.format {
        Format::Csv => write_atomic(&dir.join("cost.csv"), &cost_csv(&report)?)?,
        Format::Json => write_atomic(&dir.join("cost.json"), &json_bytes(&report)?)?,
    }
    println!(
        "cost {}: per step full {} vs batched {} kernel evaluations, ratio {:.4e}; {} steps",
        scenario.name, report.full_evaluations_per_step, report.rbm_evaluations_per_step, report.ratio, report.steps
    );
    if !report.counts_agree {
        return Err(Failure::Mismatch("runtime kernel-evaluation counter disagrees with the closed form".into()));
    }
    Ok(())
}
