//! Drift evaluation, Euler-Maruyama stepping, and full / random-batch /
//! synchronously coupled simulations.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::analysis::{discrete_l2_error, ErrorSeries};
use crate::batching::{interaction_coefficients, sample_partition, CoefficientTable, Partition};
use crate::error::{Error, Result};
use crate::io::csv_float;
use crate::model::{ensure_valid, step_count, InitialDistribution, KernelSpec, SystemSpec};
use crate::streams::ReplicaStreams;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many particles a step is evaluated on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1024;

/// Positions of all particles of all species at one time.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParticleState {
    pub time: f64,
    pub dimension: usize,
    /// `positions[i]` holds `N_i * d` coordinates, particle-major.
    pub positions: Vec<Vec<f64>>,
}

impl ParticleState {
    pub fn new(time: f64, dimension: usize, positions: Vec<Vec<f64>>) -> Result<Self> {
        if dimension == 0 || positions.iter().any(|p| p.len() % dimension != 0) {
            return Err(Error::ShapeMismatch("coordinate count not a multiple of the dimension".into()));
        }
        Ok(ParticleState {
            time,
            dimension,
            positions,
        })
    }

    /// Builds a state from per-species lists of points.
    pub fn from_points(time: f64, points: &[Vec<Vec<f64>>]) -> Result<Self> {
        let dimension = points
            .iter()
            .flat_map(|s| s.first())
            .map(Vec::len)
            .next()
            .ok_or_else(|| Error::ShapeMismatch("no points".into()))?;
        let positions = points.iter().map(|s| s.iter().flatten().copied().collect()).collect();
        ParticleState::new(time, dimension, positions)
    }

    pub fn species_count(&self) -> usize {
        self.positions.len()
    }

    pub fn particle_count(&self, i: usize) -> usize {
        self.positions[i].len() / self.dimension
    }

    #[inline]
    pub fn particle(&self, i: usize, k: usize) -> &[f64] {
        let d = self.dimension;
        &self.positions[i][k * d..(k + 1) * d]
    }

    fn check_shape(&self, spec: &SystemSpec) -> Result<()> {
        if self.dimension != spec.dimension
            || self.positions.len() != spec.species.len()
            || self
                .positions
                .iter()
                .zip(&spec.species)
                .any(|(p, s)| p.len() != s.particles * spec.dimension)
        {
            return Err(Error::ShapeMismatch("state does not match the system definition".into()));
        }
        Ok(())
    }

    /// Writes `time,species,particle,x_1..x_d` rows (1-based species and particle ids).
    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (i, pos) in self.positions.iter().enumerate() {
            for (k, x) in pos.chunks(self.dimension).enumerate() {
                write!(out, "{},{},{}", csv_float(self.time), i + 1, k + 1)?;
                for v in x {
                    write!(out, ",{}", csv_float(*v))?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

/// Draws i.i.d. initial positions per species.
pub fn sample_initial<R: Rng + ?Sized>(spec: &SystemSpec, rng: &mut R) -> ParticleState {
    let d = spec.dimension;
    let positions = spec
        .species
        .iter()
        .map(|s| match &s.initial {
            InitialDistribution::Gaussian { mean, variance } => {
                let sd = variance.sqrt();
                (0..s.particles)
                    .flat_map(|_| mean.iter().map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
                    .collect()
            }
            InitialDistribution::Uniform { lo, hi } => (0..s.particles * d).map(|_| rng.random_range(*lo..*hi)).collect(),
            InitialDistribution::PointCloud { positions } => positions.iter().flatten().copied().collect(),
        })
        .collect();
    ParticleState {
        time: 0.0,
        dimension: d,
        positions,
    }
}

/// Brownian increments for one step, `N(0, h)` per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrements {
    pub step: f64,
    pub values: Vec<Vec<f64>>,
}

impl NoiseIncrements {
    /// Element-wise sum of consecutive fine increments, in order.
    pub fn aggregate(parts: &[NoiseIncrements]) -> NoiseIncrements {
        let mut acc = parts[0].clone();
        for p in &parts[1..] {
            acc.step += p.step;
            for (a, b) in acc.values.iter_mut().zip(&p.values) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        acc
    }
}

/// Fills `N_i x d` increments per species as `sqrt(h) * Z` with `Z` drawn by
/// the ziggurat standard-normal sampler of `rand_distr`.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, spec: &SystemSpec, h: f64) -> NoiseIncrements {
    let scale = h.sqrt();
    let values = spec
        .species
        .iter()
        .map(|s| {
            (0..s.particles * spec.dimension)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    NoiseIncrements { step: h, values }
}

#[inline]
fn species_sum(
    kernel: &KernelSpec,
    xi: &[f64],
    xs: &[f64],
    skip: Option<usize>,
    partners: impl Iterator<Item = usize>,
    sum: &mut [f64],
    diff: &mut [f64],
) -> u64 {
    let d = xi.len();
    if kernel.is_zero() {
        // Counted as evaluations, but nothing to add.
        return partners.filter(|&l| Some(l) != skip).count() as u64;
    }
    let mut evals = 0;
    for l in partners {
        if Some(l) == skip {
            continue;
        }
        let xl = &xs[l * d..(l + 1) * d];
        for c in 0..d {
            diff[c] = xi[c] - xl[c];
        }
        kernel.accumulate(diff, sum);
        evals += 1;
    }
    evals
}

/// Adds `sum_j weights[j] * sum_{l in partners(j)} K_ij(x_i^k - x_j^l)` to `out`.
fn add_interactions(
    spec: &SystemSpec,
    weights: &[f64],
    state: &ParticleState,
    (i, k): (usize, usize),
    partition: Option<&Partition>,
    out: &mut [f64],
) -> u64 {
    let d = state.dimension;
    let xi = state.particle(i, k);
    let mut sum = vec![0.0; d];
    let mut diff = vec![0.0; d];
    let mut evals = 0;
    for (j, kernel) in spec.kernels[i].iter().enumerate() {
        sum.fill(0.0);
        let skip = (j == i).then_some(k);
        let xs = &state.positions[j];
        evals += match partition {
            None if kernel.is_zero() => (state.particle_count(j) - usize::from(skip.is_some())) as u64,
            None => species_sum(kernel, xi, xs, skip, 0..state.particle_count(j), &mut sum, &mut diff),
            Some(part) => {
                let batch = part.batch(j, part.label(i, k));
                species_sum(kernel, xi, xs, skip, batch.iter().copied(), &mut sum, &mut diff)
            }
        };
        for c in 0..d {
            out[c] += weights[j] * sum[c];
        }
    }
    evals
}

fn drift_into(
    spec: &SystemSpec,
    coeffs: &CoefficientTable,
    state: &ParticleState,
    (i, k): (usize, usize),
    partition: Option<&Partition>,
    out: &mut [f64],
) -> u64 {
    let potential = &spec.species[i].potential;
    let mut grad = vec![0.0; state.dimension];
    potential.accumulate_gradient(state.particle(i, k), &mut grad);
    for (o, g) in out.iter_mut().zip(&grad) {
        *o = -g;
    }
    let weights = match partition {
        None => &coeffs.alpha[i],
        Some(_) => &coeffs.beta[i],
    };
    add_interactions(spec, weights, state, (i, k), partition, out)
}

fn checked(v: Vec<f64>, i: usize, k: usize, time: f64) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::BlowUp {
            species: i + 1,
            particle: k + 1,
            step: 0,
            time,
        })
    }
}

/// Full-interaction drift of particle `k` of species `i`, with its kernel
/// evaluation count.
pub fn full_drift(spec: &SystemSpec, state: &ParticleState, coeffs: &CoefficientTable, i: usize, k: usize) -> Result<(Vec<f64>, u64)> {
    let mut out = vec![0.0; state.dimension];
    let evals = drift_into(spec, coeffs, state, (i, k), None, &mut out);
    Ok((checked(out, i, k, state.time)?, evals))
}

/// Random-batch drift: interactions restricted to the super-batch of `(i, k)`.
pub fn rbm_drift(
    spec: &SystemSpec,
    state: &ParticleState,
    partition: &Partition,
    coeffs: &CoefficientTable,
    i: usize,
    k: usize,
) -> Result<(Vec<f64>, u64)> {
    let mut out = vec![0.0; state.dimension];
    let evals = drift_into(spec, coeffs, state, (i, k), Some(partition), &mut out);
    Ok((checked(out, i, k, state.time)?, evals))
}

/// The remainder `chi = f - g`: batched interaction force (beta weights)
/// minus full interaction force (alpha weights). No potential, no noise.
pub fn chi(spec: &SystemSpec, positions: &ParticleState, partition: &Partition, coeffs: &CoefficientTable, i: usize, k: usize) -> Vec<f64> {
    let d = positions.dimension;
    let mut batched = vec![0.0; d];
    add_interactions(spec, &coeffs.beta[i], positions, (i, k), Some(partition), &mut batched);
    let mut full = vec![0.0; d];
    add_interactions(spec, &coeffs.alpha[i], positions, (i, k), None, &mut full);
    batched.iter().zip(&full).map(|(f, g)| f - g).collect()
}

/// Drift of every particle, with the total kernel evaluation count.
fn all_drifts(spec: &SystemSpec, coeffs: &CoefficientTable, state: &ParticleState, partition: Option<&Partition>) -> (Vec<Vec<f64>>, u64) {
    let d = state.dimension;
    let mut total = 0;
    let drifts = (0..state.species_count())
        .map(|i| {
            let mut out = vec![0.0; state.positions[i].len()];
            #[cfg(feature = "parallel")]
            let evals: u64 = if spec.total_particles() >= PARALLEL_THRESHOLD {
                out.par_chunks_mut(d)
                    .enumerate()
                    .map(|(k, o)| drift_into(spec, coeffs, state, (i, k), partition, o))
                    .sum()
            } else {
                out.chunks_mut(d)
                    .enumerate()
                    .map(|(k, o)| drift_into(spec, coeffs, state, (i, k), partition, o))
                    .sum()
            };
            #[cfg(not(feature = "parallel"))]
            let evals: u64 = out
                .chunks_mut(d)
                .enumerate()
                .map(|(k, o)| drift_into(spec, coeffs, state, (i, k), partition, o))
                .sum();
            total += evals;
            out
        })
        .collect();
    (drifts, total)
}

/// Kernel evaluations spent by one step of the given kind from `state`.
pub fn step_kernel_evaluations(spec: &SystemSpec, coeffs: &CoefficientTable, state: &ParticleState, partition: Option<&Partition>) -> u64 {
    all_drifts(spec, coeffs, state, partition).1
}

/// One Euler-Maruyama step of length `noise.step`: `X + drift h + sigma(X) dB`
/// with `sigma` evaluated at the pre-step position. `partition = None` uses
/// the full interaction. Returns the new state and the kernel evaluations spent.
pub fn em_step(
    spec: &SystemSpec,
    coeffs: &CoefficientTable,
    state: &ParticleState,
    partition: Option<&Partition>,
    noise: &NoiseIncrements,
    step_index: usize,
) -> Result<(ParticleState, u64)> {
    state.check_shape(spec)?;
    if noise.values.len() != state.positions.len() || noise.values.iter().zip(&state.positions).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::ShapeMismatch("noise increments do not match the state".into()));
    }
    let h = noise.step;
    let d = state.dimension;
    let time = state.time + h;
    let (drifts, evals) = all_drifts(spec, coeffs, state, partition);
    let mut positions = Vec::with_capacity(state.positions.len());
    for (i, ((pos, drift), db)) in state.positions.iter().zip(&drifts).zip(&noise.values).enumerate() {
        let diffusion = &spec.species[i].diffusion;
        let mut next = Vec::with_capacity(pos.len());
        for (k, ((x, f), w)) in pos.chunks(d).zip(drift.chunks(d)).zip(db.chunks(d)).enumerate() {
            let sigma = diffusion.value(x);
            for c in 0..d {
                let kick = if spec.noise_as_drift { sigma * h } else { sigma * w[c] };
                let v = x[c] + f[c] * h + kick;
                if !v.is_finite() {
                    return Err(Error::BlowUp {
                        species: i + 1,
                        particle: k + 1,
                        step: step_index,
                        time,
                    });
                }
                next.push(v);
            }
        }
        positions.push(next);
    }
    Ok((
        ParticleState {
            time,
            dimension: d,
            positions,
        },
        evals,
    ))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Method {
    Full,
    #[serde(rename = "RBM")]
    RandomBatch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub replica: u64,
    pub record_times: Vec<f64>,
    /// Euler-Maruyama steps per batch interval.
    pub substeps: usize,
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        RunConfig {
            seed,
            replica: 0,
            record_times: Vec::new(),
            substeps: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryMeta {
    pub seed: u64,
    pub replica: u64,
    pub spec_hash: String,
    pub method: Method,
    pub steps: usize,
    pub kernel_evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    pub snapshots: Vec<ParticleState>,
}

impl Trajectory {
    pub fn final_state(&self) -> &ParticleState {
        self.snapshots.last().expect("trajectory always holds the initial state")
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.snapshots[0].dimension;
        write!(out, "time,species,particle")?;
        for c in 1..=d {
            write!(out, ",x_{c}")?;
        }
        writeln!(out)?;
        for s in &self.snapshots {
            s.write_csv_rows(out)?;
        }
        Ok(())
    }
}

/// Simulates with full pairwise interactions.
pub fn run_full(spec: &SystemSpec, cfg: &RunConfig) -> Result<Trajectory> {
    run(spec, Method::Full, cfg)
}

/// Simulates with the random-batch method: a fresh partition at the start of
/// every batch interval of length `step`.
pub fn run_rbm(spec: &SystemSpec, cfg: &RunConfig) -> Result<Trajectory> {
    run(spec, Method::RandomBatch, cfg)
}

pub fn run(spec: &SystemSpec, method: Method, cfg: &RunConfig) -> Result<Trajectory> {
    ensure_valid(spec)?;
    if cfg.substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    let layout = spec.layout();
    let coeffs = interaction_coefficients(&layout);
    let mut streams = ReplicaStreams::new(cfg.seed, cfg.replica);
    let mut state = sample_initial(spec, &mut streams.init);

    let mut record: Vec<f64> = cfg.record_times.iter().copied().filter(|t| *t > 0.0).collect();
    record.sort_by(f64::total_cmp);
    if record.is_empty() {
        record.push(spec.end_time);
    }
    let mut next_record = 0;
    let mut snapshots = vec![state.clone()];

    let intervals = spec.step_count();
    let tol = 1e-9 * spec.step;
    let mut evals = 0;
    let mut step_index = 0;
    for m in 0..intervals {
        let start = m as f64 * spec.step;
        let end = if m + 1 == intervals { spec.end_time } else { (m + 1) as f64 * spec.step };
        let partition = match method {
            Method::Full => None,
            Method::RandomBatch => Some(sample_partition(&layout, &mut streams.batches)),
        };
        for s in 0..cfg.substeps {
            let t0 = start + (end - start) * s as f64 / cfg.substeps as f64;
            let t1 = if s + 1 == cfg.substeps {
                end
            } else {
                start + (end - start) * (s + 1) as f64 / cfg.substeps as f64
            };
            let noise = sample_noise(&mut streams.noise, spec, t1 - t0);
            step_index += 1;
            let (mut next, e) = em_step(spec, &coeffs, &state, partition.as_ref(), &noise, step_index)?;
            next.time = t1;
            evals += e;
            state = next;
        }
        let mut recorded = false;
        while next_record < record.len() && (record[next_record] <= state.time + tol || m + 1 == intervals) {
            next_record += 1;
            if !recorded {
                snapshots.push(state.clone());
                recorded = true;
            }
        }
    }

    Ok(Trajectory {
        meta: TrajectoryMeta {
            seed: cfg.seed,
            replica: cfg.replica,
            spec_hash: spec.fingerprint(),
            method,
            steps: step_index,
            kernel_evaluations: evals,
        },
        snapshots,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledConfig {
    pub seed: u64,
    pub taus: Vec<f64>,
    /// Reference step is `tau / 2^refinement`.
    pub refinement: u32,
    pub replicas: usize,
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    ((r - n).abs() <= 1e-9 * r.max(1.0) && n >= 1.0).then_some(n as usize)
}

fn integrate_on_fine_grid(
    spec: &SystemSpec,
    coeffs: &CoefficientTable,
    initial: &ParticleState,
    fine: &[NoiseIncrements],
    fine_times: &[f64],
    group: usize,
    batches: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<ParticleState> {
    let layout = spec.layout();
    let mut state = initial.clone();
    let mut batches = batches;
    let mut step_index = 0;
    let mut start = 0;
    while start < fine.len() {
        let end = (start + group).min(fine.len());
        let mut noise = NoiseIncrements::aggregate(&fine[start..end]);
        noise.step = fine_times[end] - fine_times[start];
        let partition = batches.as_deref_mut().map(|rng| sample_partition(&layout, rng));
        step_index += 1;
        let (mut next, _) = em_step(spec, coeffs, &state, partition.as_ref(), &noise, step_index)?;
        next.time = fine_times[end];
        state = next;
        start = end;
    }
    Ok(state)
}

/// Root of `sum_i (1/N_i) sum_k |x_i^k|^2`.
fn state_scale(state: &ParticleState) -> f64 {
    state
        .positions
        .iter()
        .enumerate()
        .map(|(i, x)| x.iter().map(|v| v * v).sum::<f64>() / state.particle_count(i) as f64)
        .sum::<f64>()
        .sqrt()
}

/// Errors at `T` of one replica for each step size (taus sorted descending),
/// with the largest reference scale seen.
fn coupled_replica(spec: &SystemSpec, coeffs: &CoefficientTable, cfg: &CoupledConfig, taus: &[f64], replica: u64) -> Result<(Vec<f64>, f64)> {
    let factor = f64::from(1u32 << cfg.refinement);
    let fine_step = taus[taus.len() - 1] / factor;
    let mut streams = ReplicaStreams::new(cfg.seed, replica);
    let initial = sample_initial(spec, &mut streams.init);

    let fine_steps = step_count(spec.end_time, fine_step);
    let fine_times: Vec<f64> = (0..=fine_steps)
        .map(|m| if m == fine_steps { spec.end_time } else { m as f64 * fine_step })
        .collect();
    let fine: Vec<NoiseIncrements> = fine_times
        .windows(2)
        .map(|w| sample_noise(&mut streams.noise, spec, w[1] - w[0]))
        .collect();

    let mut scale = state_scale(&initial);
    let errors = taus
        .iter()
        .map(|&tau| {
            let coarse = integer_ratio(tau, fine_step).expect("checked by caller");
            let refined = integer_ratio(tau / factor, fine_step).expect("checked by caller");
            let reference = integrate_on_fine_grid(spec, coeffs, &initial, &fine, &fine_times, refined, None)?;
            let batched = integrate_on_fine_grid(spec, coeffs, &initial, &fine, &fine_times, coarse, Some(&mut streams.batches))?;
            scale = scale.max(state_scale(&reference));
            discrete_l2_error(&batched, &reference)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((errors, scale))
}

/// Relative size below which coupled errors count as rounding noise.
pub const ROUNDING_FLOOR: f64 = 1e-12;

/// Strong error of the random-batch scheme against a full-interaction
/// reference under synchronous coupling.
///
/// Each replica draws one initial sample and one Brownian path on the finest
/// grid `min(tau) / 2^s`. For every `tau` the reference is the full system at
/// step `tau / 2^s` and the random-batch run uses step `tau`; both consume the
/// same path, aggregated to their own step. Errors below
/// [`ROUNDING_FLOOR`] times `1 +` the largest reference scale are left out of
/// the slope fit.
pub fn run_coupled(spec: &SystemSpec, cfg: &CoupledConfig) -> Result<ErrorSeries> {
    ensure_valid(spec)?;
    if cfg.taus.is_empty() || cfg.replicas == 0 {
        return Err(Error::Config("need at least one step size and one replica".into()));
    }
    if cfg.refinement > 16 {
        return Err(Error::Config("reference refinement must be at most 16".into()));
    }
    let mut taus = cfg.taus.clone();
    if taus.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(Error::Config("step sizes must be positive".into()));
    }
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    let factor = f64::from(1u32 << cfg.refinement);
    let fine_step = taus[taus.len() - 1] / factor;
    for &tau in &taus {
        if integer_ratio(tau / factor, fine_step).is_none() {
            return Err(Error::Config(format!(
                "step {tau} is not divisible into the reference grid of step {fine_step}"
            )));
        }
    }
    let coeffs = interaction_coefficients(&spec.layout());

    let replica_ids: Vec<u64> = (0..cfg.replicas as u64).collect();
    #[cfg(feature = "parallel")]
    let per_replica: Vec<Result<(Vec<f64>, f64)>> = replica_ids
        .par_iter()
        .map(|&r| coupled_replica(spec, &coeffs, cfg, &taus, r))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let per_replica: Vec<Result<(Vec<f64>, f64)>> = replica_ids
        .iter()
        .map(|&r| coupled_replica(spec, &coeffs, cfg, &taus, r))
        .collect();
    let mut errors = Vec::with_capacity(cfg.replicas);
    let mut scale = 0.0f64;
    for r in per_replica {
        let (e, s) = r?;
        errors.push(e);
        scale = scale.max(s);
    }
    Ok(ErrorSeries::from_replicas_with_floor(&taus, &errors, cfg.seed, ROUNDING_FLOOR * (1.0 + scale)))
}
