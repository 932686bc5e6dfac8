//! Browser bindings for three small interactive experiments: opinion
//! dynamics with an adjustable manager-to-CEO influence, population
//! segregation histograms, and the remainder variance as a function of the
//! batch size. Every entry point returns a JSON string.

use rbm_core::analysis::{add_to_histogram, closed_form_chi_variance, gamma_factors, overlap_coefficient, theta, variance_bound, Histogram};
use rbm_core::dynamics::{run_rbm, sample_initial, RunConfig};
use rbm_core::scenarios::preset;
use rbm_core::streams::ReplicaStreams;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize, Debug)]
pub struct OpinionRun {
    pub times: Vec<f64>,
    /// `species[i][s]`: opinions of species `i` at `times[s]`.
    pub species: Vec<Vec<Vec<f64>>>,
    pub final_spread: f64,
    pub worker_clusters: usize,
}

/// Opinion model with `workers` workers and manager-to-CEO strength `d23`.
pub fn opinion(d23: f64, workers: usize, step: f64, seed: u64) -> Result<OpinionRun, String> {
    let mut s = preset("opinion_submissive").map_err(|e| e.to_string())?;
    let workers = (workers / 20).max(1) * 20;
    s.system.species[0].particles = workers;
    s.system.step = step;
    s.system.kernels[1][2] = rbm_core::model::KernelSpec::opinion(d23, rbm_core::scenarios::OPINION_RADII[2]);
    let mut cfg = RunConfig::new(seed);
    cfg.record_times = (1..=20).map(|m| m as f64 * s.system.end_time / 20.0).collect();
    let traj = run_rbm(&s.system, &cfg).map_err(|e| e.to_string())?;
    let times = traj.snapshots.iter().map(|x| x.time).collect();
    let species = (0..3).map(|i| traj.snapshots.iter().map(|x| x.positions[i].clone()).collect()).collect();
    let last = traj.final_state();
    let all = last.positions.concat();
    let final_spread = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - all.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut w = last.positions[0].clone();
    w.sort_by(f64::total_cmp);
    let worker_clusters = 1 + w.windows(2).filter(|p| p[1] - p[0] > 1.0).count();
    Ok(OpinionRun {
        times,
        species,
        final_spread,
        worker_clusters,
    })
}

#[derive(Serialize, Debug)]
pub struct PopulationHistograms {
    pub centers: Vec<f64>,
    pub density: Vec<Vec<f64>>,
    /// Overlap coefficients of the pairs (1,2), (1,3), (2,3).
    pub overlaps: Vec<f64>,
}

/// Final-time histograms of the population model at reduced size.
pub fn population(particles: usize, replicas: usize, seed: u64) -> Result<PopulationHistograms, String> {
    let mut s = preset("population3").map_err(|e| e.to_string())?;
    let n = (particles / 20).max(1) * 20;
    for sp in &mut s.system.species {
        sp.particles = n;
    }
    let h = s.run.histogram.clone().ok_or("no histogram range")?;
    let mut hist: Vec<Histogram> = (0..3).map(|_| Histogram::new(h.bins, h.lo, h.hi)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for r in 0..replicas.max(1) {
        let mut cfg = RunConfig::new(seed);
        cfg.replica = r as u64;
        let traj = run_rbm(&s.system, &cfg).map_err(|e| e.to_string())?;
        for (i, x) in hist.iter_mut().enumerate() {
            add_to_histogram(x, traj.final_state(), i).map_err(|e| e.to_string())?;
        }
    }
    hist.iter_mut().for_each(Histogram::normalize);
    let overlaps = [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(a, b)| overlap_coefficient(&hist[a], &hist[b]).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok(PopulationHistograms {
        centers: hist[0].centers(),
        density: hist.into_iter().map(|x| x.density).collect(),
        overlaps,
    })
}

#[derive(Serialize, Debug)]
pub struct VariancePoint {
    pub batch_size: usize,
    /// Mean over particles of the closed-form `E|chi|^2`.
    pub mean_variance: f64,
    pub gamma: Vec<f64>,
    pub theta: f64,
    pub bound: Option<f64>,
}

/// Remainder variance of a two-species Cauchy system with `N = (n1, n2)` for
/// every batch size dividing both counts.
pub fn variance_curve(n1: usize, n2: usize, seed: u64) -> Result<Vec<VariancePoint>, String> {
    let mut spec = preset("consistency_unequal").map_err(|e| e.to_string())?.system;
    spec.species[0].particles = n1;
    spec.species[1].particles = n2;
    let mut out = Vec::new();
    for p in (2..=n1.min(n2)).filter(|p| n1.is_multiple_of(*p) && n2.is_multiple_of(*p)) {
        for s in &mut spec.species {
            s.batch_size = p;
        }
        let x = sample_initial(&spec, &mut ReplicaStreams::new(seed, 0).init);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..2 {
            for k in 0..spec.species[i].particles {
                total += closed_form_chi_variance(&x, &spec, i, k).variance;
                count += 1;
            }
        }
        let layout = spec.layout();
        out.push(VariancePoint {
            batch_size: p,
            mean_variance: total / count as f64,
            gamma: gamma_factors(&layout),
            theta: theta(&layout),
            bound: variance_bound(&spec),
        });
    }
    if out.is_empty() {
        return Err(format!("no common batch size >= 2 divides {n1} and {n2}"));
    }
    Ok(out)
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, String> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    json(r).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn opinion_json(d23: f64, workers: usize, step: f64, seed: u32) -> Result<String, JsValue> {
    to_js(opinion(d23, workers, step, u64::from(seed)))
}

#[wasm_bindgen]
pub fn population_json(particles: usize, replicas: usize, seed: u32) -> Result<String, JsValue> {
    to_js(population(particles, replicas, u64::from(seed)))
}

#[wasm_bindgen]
pub fn variance_json(n1: usize, n2: usize, seed: u32) -> Result<String, JsValue> {
    to_js(variance_curve(n1, n2, u64::from(seed)))
}
