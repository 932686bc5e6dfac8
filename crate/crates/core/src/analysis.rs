//! Statistics of the batching remainder, error-bound constants, strong-error
//! series, cost accounting and histograms.

use std::io::Write;

use rand::Rng;
use serde::Serialize;

use crate::batching::{enumerate_partitions_capped, interaction_coefficients, sample_partition, CoefficientTable, DEFAULT_ENUMERATION_CAP};
use crate::dynamics::{chi, sample_initial, step_kernel_evaluations, ParticleState};
use crate::error::{Error, Result};
use crate::io::csv_float;
use crate::model::{BatchLayout, KernelForm, SystemSpec};
use crate::streams::ReplicaStreams;

/// Constants of the strong-error bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub gamma: Vec<f64>,
    pub theta: f64,
    pub gamma_exponent: f64,
    /// `8 max ||K_ij||^2 sum_k Gamma_k`; `None` if some sup-norm is undeclared.
    pub variance_bound: Option<f64>,
}

impl TheoryConstants {
    pub fn for_spec(spec: &SystemSpec) -> Self {
        let layout = spec.layout();
        TheoryConstants {
            gamma: gamma_factors(&layout),
            theta: theta(&layout),
            gamma_exponent: gamma_exponent(spec),
            variance_bound: variance_bound(spec),
        }
    }
}

/// Per-species variance prefactors `Gamma_i`.
pub fn gamma_factors(layout: &BatchLayout) -> Vec<f64> {
    let n = layout.species_count();
    let b: Vec<f64> = layout.batch_counts().iter().map(|&x| x as f64).collect();
    let nn: Vec<f64> = layout.particles.iter().map(|&x| x as f64).collect();
    let p: Vec<f64> = layout.batch_sizes.iter().map(|&x| x as f64).collect();
    (0..n)
        .map(|i| {
            let mut g = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                for jp in (0..n).filter(|&jp| jp != i && jp != j) {
                    g += b[i].max(b[j]).max(b[jp]) / b[j].max(b[jp]) - 1.0;
                }
            }
            for j in (0..n).filter(|&j| j != i) {
                let mn = b[i].min(b[j]);
                let mx = b[i].max(b[j]);
                g += (b[i] - mn) / mn - (2.0 - mx) / nn[j] + b[i] / (p[j] * mn);
            }
            g + 1.0 / (p[i] - 1.0) - 1.0 / (nn[i] - 1.0)
        })
        .collect()
}

/// Ratio of the largest to the smallest batch count.
pub fn theta(layout: &BatchLayout) -> f64 {
    let b = layout.batch_counts();
    let max = *b.iter().max().expect("at least one species") as f64;
    let min = *b.iter().min().expect("at least one species") as f64;
    max / min
}

/// `3 (max(1, q_1, ..., q_n) + 1)` from the declared growth exponents.
pub fn gamma_exponent(spec: &SystemSpec) -> f64 {
    let q = spec.species.iter().map(|s| s.potential.growth).fold(1.0, f64::max);
    3.0 * (q + 1.0)
}

pub fn variance_bound(spec: &SystemSpec) -> Option<f64> {
    let mut max = 0.0f64;
    for k in spec.kernels.iter().flatten() {
        max = max.max(k.sup_norm?);
    }
    let total: f64 = gamma_factors(&spec.layout()).iter().sum();
    Some(8.0 * max * max * total)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E|chi_i^k|^2` in closed form with the four averaged kernel products it
/// is assembled from.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChiVariance {
    pub variance: f64,
    /// `cross[j][j']`: mean of `K_ij . K_ij'` over all partner pairs (`j != j'`, both `!= i`).
    pub cross: Vec<Vec<f64>>,
    /// `pair[j]`: mean of `K_ij . K_ij` over ordered distinct partner pairs of species `j != i`.
    pub pair: Vec<f64>,
    /// `square[j]`: mean of `|K_ij|^2` over species `j != i`.
    pub square: Vec<f64>,
    /// Sample variance of `K_ii` over the `N_i - 1` same-species partners.
    pub same: f64,
}

/// Closed-form second moment of the remainder for particle `k` of species `i`.
///
/// With `m = min(b_i, b_j)` and `M = max(b_i, b_j)`:
///
/// ```text
/// Var = sum_{j != j', both != i} (max(b_i,b_j,b_j') / max(b_j,b_j') - 1) cross[j][j']
///     + sum_{j != i} ((b_i - m)/m - (M - 1)/N_j) pair[j] + (M - 1)/N_j square[j]
///     + (1/(p_i - 1) - 1/(N_i - 1)) same
/// ```
///
/// The same-species term is absent when `p_i = N_i`.
pub fn closed_form_chi_variance(positions: &ParticleState, spec: &SystemSpec, i: usize, k: usize) -> ChiVariance {
    let n = spec.species_count();
    let d = positions.dimension;
    let layout = spec.layout();
    let b: Vec<f64> = layout.batch_counts().iter().map(|&x| x as f64).collect();
    let xi = positions.particle(i, k);

    // u[j][l] = K_ij(x_i^k - x_j^l), with the self term left out.
    let mut diff = vec![0.0; d];
    let u: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|j| {
            (0..positions.particle_count(j))
                .filter(|&l| !(j == i && l == k))
                .map(|l| {
                    let xl = positions.particle(j, l);
                    for c in 0..d {
                        diff[c] = xi[c] - xl[c];
                    }
                    spec.kernels[i][j].eval(&diff)
                })
                .collect()
        })
        .collect();
    let sums: Vec<Vec<f64>> = u
        .iter()
        .map(|vs| {
            let mut s = vec![0.0; d];
            for v in vs {
                for c in 0..d {
                    s[c] += v[c];
                }
            }
            s
        })
        .collect();
    let nj = |j: usize| spec.species[j].particles as f64;

    let mut cross = vec![vec![0.0; n]; n];
    let mut pair = vec![0.0; n];
    let mut square = vec![0.0; n];
    let mut variance = 0.0;
    for j in (0..n).filter(|&j| j != i) {
        for jp in (0..n).filter(|&jp| jp != i && jp != j) {
            cross[j][jp] = dot(&sums[j], &sums[jp]) / (nj(j) * nj(jp));
            variance += (b[i].max(b[j]).max(b[jp]) / b[j].max(b[jp]) - 1.0) * cross[j][jp];
        }
        let sq: f64 = u[j].iter().map(|v| dot(v, v)).sum();
        square[j] = sq / nj(j);
        pair[j] = (dot(&sums[j], &sums[j]) - sq) / (nj(j) * (nj(j) - 1.0));
        let mn = b[i].min(b[j]);
        let mx = b[i].max(b[j]);
        variance += ((b[i] - mn) / mn - (mx - 1.0) / nj(j)) * pair[j] + (mx - 1.0) / nj(j) * square[j];
    }

    let p_i = spec.species[i].batch_size;
    let n_i = spec.species[i].particles;
    let mut same = 0.0;
    if p_i < n_i {
        let m = n_i as f64 - 1.0;
        let mean: Vec<f64> = sums[i].iter().map(|s| s / m).collect();
        same = u[i]
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum::<f64>()
            / (n_i as f64 - 2.0);
        variance += (1.0 / (p_i as f64 - 1.0) - 1.0 / m) * same;
    }
    ChiVariance {
        variance,
        cross,
        pair,
        square,
        same,
    }
}

/// Mean vector and second moment of the remainder.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChiMoments {
    pub mean: Vec<f64>,
    /// `E|chi|^2`.
    pub variance: f64,
    pub samples: u64,
}

/// Exact moments by averaging over every joint partition.
pub fn exact_chi_moments(positions: &ParticleState, spec: &SystemSpec, coeffs: &CoefficientTable, i: usize, k: usize) -> Result<ChiMoments> {
    exact_chi_moments_capped(positions, spec, coeffs, i, k, DEFAULT_ENUMERATION_CAP)
}

pub fn exact_chi_moments_capped(
    positions: &ParticleState,
    spec: &SystemSpec,
    coeffs: &CoefficientTable,
    i: usize,
    k: usize,
    cap: u64,
) -> Result<ChiMoments> {
    let d = positions.dimension;
    let partitions = enumerate_partitions_capped(&spec.layout(), cap)?;
    let mut mean = vec![0.0; d];
    let mut second = 0.0;
    let mut count = 0u64;
    for part in partitions {
        let c = chi(spec, positions, &part, coeffs, i, k);
        for (m, v) in mean.iter_mut().zip(&c) {
            *m += v;
        }
        second += dot(&c, &c);
        count += 1;
    }
    let w = 1.0 / count as f64;
    Ok(ChiMoments {
        mean: mean.iter().map(|m| m * w).collect(),
        variance: second * w,
        samples: count,
    })
}

/// Sample moments with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmpiricalMoments {
    pub mean: Vec<f64>,
    pub mean_std_error: Vec<f64>,
    /// Sample mean of `|chi|^2`.
    pub variance: f64,
    pub variance_std_error: f64,
    pub samples: u64,
}

/// Monte-Carlo moments over `samples` freshly drawn partitions.
pub fn empirical_chi_moments<R: Rng + ?Sized>(
    positions: &ParticleState,
    spec: &SystemSpec,
    coeffs: &CoefficientTable,
    i: usize,
    k: usize,
    samples: u64,
    rng: &mut R,
) -> Result<EmpiricalMoments> {
    if samples < 2 {
        return Err(Error::Config(format!("Monte-Carlo moments need at least 2 samples, got {samples}")));
    }
    let d = positions.dimension;
    let layout = spec.layout();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut norm = 0.0;
    let mut norm_sq = 0.0;
    for _ in 0..samples {
        let part = sample_partition(&layout, rng);
        let c = chi(spec, positions, &part, coeffs, i, k);
        for ((s, q), v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(&c) {
            *s += v;
            *q += v * v;
        }
        let m = dot(&c, &c);
        norm += m;
        norm_sq += m * m;
    }
    let n = samples as f64;
    let se = |s: f64, q: f64| ((q - s * s / n) / (n - 1.0) / n).max(0.0).sqrt();
    Ok(EmpiricalMoments {
        mean: sum.iter().map(|s| s / n).collect(),
        mean_std_error: sum.iter().zip(&sum_sq).map(|(&s, &q)| se(s, q)).collect(),
        variance: norm / n,
        variance_std_error: se(norm, norm_sq),
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ConsistencyMode {
    Exact,
    MonteCarlo { samples: u64, seed: u64 },
}

/// Tolerance for the enumeration checks, relative to `1 + |value|`.
pub const EXACT_TOLERANCE: f64 = 1e-12;
/// Width of the Monte-Carlo acceptance band in standard errors.
pub const MONTE_CARLO_BAND: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyEntry {
    /// 1-based ids.
    pub species: usize,
    pub particle: usize,
    pub closed_form: ChiVariance,
    pub exact: Option<ChiMoments>,
    pub monte_carlo: Option<EmpiricalMoments>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyReport {
    pub spec_hash: String,
    pub mode: ConsistencyMode,
    pub theory: TheoryConstants,
    pub entries: Vec<ConsistencyEntry>,
    pub max_abs_mean: f64,
    /// Largest `|closed form - measured|` over all entries.
    pub max_discrepancy: f64,
    pub passed: bool,
}

/// Every particle for small systems, otherwise the first particle of each species.
pub fn default_targets(spec: &SystemSpec) -> Vec<(usize, usize)> {
    if spec.total_particles() <= 64 {
        (0..spec.species_count())
            .flat_map(|i| (0..spec.species[i].particles).map(move |k| (i, k)))
            .collect()
    } else {
        (0..spec.species_count()).map(|i| (i, 0)).collect()
    }
}

/// Checks the closed-form remainder moments against enumeration or
/// Monte-Carlo at `positions` for the given `(species, particle)` targets.
pub fn consistency_report(
    spec: &SystemSpec,
    positions: &ParticleState,
    coeffs: &CoefficientTable,
    targets: &[(usize, usize)],
    mode: &ConsistencyMode,
) -> Result<ConsistencyReport> {
    let mut rng = match mode {
        ConsistencyMode::MonteCarlo { seed, .. } => Some(ReplicaStreams::new(*seed, 0).batches),
        ConsistencyMode::Exact => None,
    };
    let mut entries = Vec::with_capacity(targets.len());
    let mut max_abs_mean = 0.0f64;
    let mut max_discrepancy = 0.0f64;
    for &(i, k) in targets {
        if i >= spec.species_count() || k >= spec.species[i].particles {
            return Err(Error::IndexOutOfRange(format!("particle ({}, {})", i + 1, k + 1)));
        }
        let closed_form = closed_form_chi_variance(positions, spec, i, k);
        let (exact, monte_carlo, passed) = match (mode, rng.as_mut()) {
            (ConsistencyMode::MonteCarlo { samples, .. }, Some(rng)) => {
                let m = empirical_chi_moments(positions, spec, coeffs, i, k, *samples, rng)?;
                let gap = (m.variance - closed_form.variance).abs();
                max_discrepancy = max_discrepancy.max(gap);
                let mean_ok = m
                    .mean
                    .iter()
                    .zip(&m.mean_std_error)
                    .all(|(v, se)| v.abs() <= MONTE_CARLO_BAND * se + 1e-14);
                max_abs_mean = m.mean.iter().fold(max_abs_mean, |a, v| a.max(v.abs()));
                let ok = mean_ok && gap <= MONTE_CARLO_BAND * m.variance_std_error + 1e-14;
                (None, Some(m), ok)
            }
            _ => {
                let m = exact_chi_moments(positions, spec, coeffs, i, k)?;
                let gap = (m.variance - closed_form.variance).abs();
                let mean = m.mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                max_discrepancy = max_discrepancy.max(gap);
                max_abs_mean = max_abs_mean.max(mean);
                let ok = mean <= EXACT_TOLERANCE && gap <= EXACT_TOLERANCE * (1.0 + m.variance);
                (Some(m), None, ok)
            }
        };
        entries.push(ConsistencyEntry {
            species: i + 1,
            particle: k + 1,
            closed_form,
            exact,
            monte_carlo,
            passed,
        });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(ConsistencyReport {
        spec_hash: spec.fingerprint(),
        mode: mode.clone(),
        theory: TheoryConstants::for_spec(spec),
        entries,
        max_abs_mean,
        max_discrepancy,
        passed,
    })
}

/// `(sum_i (1/N_i) sum_k |a_i^k - b_i^k|^2)^(1/2)`, pairing particles by index.
pub fn discrete_l2_error(a: &ParticleState, b: &ParticleState) -> Result<f64> {
    if a.dimension != b.dimension
        || a.positions.len() != b.positions.len()
        || a.positions.iter().zip(&b.positions).any(|(x, y)| x.len() != y.len())
    {
        return Err(Error::ShapeMismatch("states differ in shape".into()));
    }
    let mut total = 0.0;
    for (i, (x, y)) in a.positions.iter().zip(&b.positions).enumerate() {
        let s: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
        total += s / a.particle_count(i) as f64;
    }
    Ok(total.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub points_used: usize,
    pub warnings: Vec<String>,
}

/// Ordinary least squares of `ln E` on `ln tau`. Points with `E = 0` are
/// dropped with a warning; at least three positive points are needed.
pub fn convergence_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    convergence_slope_above(points, 0.0)
}

/// As [`convergence_slope`], also dropping points with `E <= floor`
/// (errors at rounding level carry no rate information).
pub fn convergence_slope_above(points: &[(f64, f64)], floor: f64) -> Result<SlopeFit> {
    let mut warnings = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(tau, e) in points {
        if !(tau > 0.0 && tau.is_finite()) || !e.is_finite() || e < 0.0 {
            return Err(Error::InvalidState(format!("bad error point ({tau}, {e})")));
        }
        if e == 0.0 {
            warnings.push(format!("zero error at tau = {tau} excluded from the fit"));
            continue;
        }
        if e <= floor {
            warnings.push(format!("error {e:e} at tau = {tau} is at rounding level (<= {floor:e}), excluded from the fit"));
            continue;
        }
        xs.push(tau.ln());
        ys.push(e.ln());
    }
    if xs.len() < 3 {
        return Err(Error::InvalidState(format!(
            "slope fit needs at least 3 points with positive error, have {}",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidState("slope fit needs distinct step sizes".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        residual,
        points_used: xs.len(),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorPoint {
    pub tau: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

/// Replica-averaged strong error per step size, largest step first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorSeries {
    pub points: Vec<ErrorPoint>,
    pub fit: Option<SlopeFit>,
    /// Why `fit` is absent, if it is.
    pub fit_error: Option<String>,
    pub replicas: usize,
    pub seed: u64,
    /// Errors at or below this level are treated as rounding noise by the fit.
    pub noise_floor: f64,
}

impl ErrorSeries {
    /// `errors[r][t]` is the error of replica `r` at `taus[t]`. The mean error
    /// is the root of the replica mean of `E^2`; its standard error follows
    /// from that of the mean of `E^2` by the delta method.
    pub fn from_replicas(taus: &[f64], errors: &[Vec<f64>], seed: u64) -> Self {
        Self::from_replicas_with_floor(taus, errors, seed, 0.0)
    }

    pub fn from_replicas_with_floor(taus: &[f64], errors: &[Vec<f64>], seed: u64, noise_floor: f64) -> Self {
        let r = errors.len() as f64;
        let points: Vec<ErrorPoint> = taus
            .iter()
            .enumerate()
            .map(|(t, &tau)| {
                let sq: Vec<f64> = errors.iter().map(|e| e[t] * e[t]).collect();
                let mean_sq = sq.iter().sum::<f64>() / r;
                let mean_error = mean_sq.sqrt();
                let std_error = if errors.len() > 1 && mean_error > 0.0 {
                    let var = sq.iter().map(|s| (s - mean_sq).powi(2)).sum::<f64>() / (r - 1.0);
                    (var / r).sqrt() / (2.0 * mean_error)
                } else {
                    0.0
                };
                ErrorPoint {
                    tau,
                    mean_error,
                    std_error,
                }
            })
            .collect();
        let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.tau, p.mean_error)).collect();
        let (fit, fit_error) = match convergence_slope_above(&pairs, noise_floor) {
            Ok(f) => (Some(f), None),
            Err(e) => (None, Some(e.to_string())),
        };
        ErrorSeries {
            points,
            fit,
            fit_error,
            replicas: errors.len(),
            seed,
            noise_floor,
        }
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "tau,mean_error,std_error")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", csv_float(p.tau), csv_float(p.mean_error), csv_float(p.std_error))?;
        }
        Ok(())
    }
}

/// Rough arithmetic-operation count of one kernel evaluation in dimension
/// `d`, including the difference `x_i - x_j` and the accumulation. An
/// exponential is weighted as 20 operations, a division as 4.
pub fn kernel_op_weight(form: &KernelForm, d: usize) -> f64 {
    let d = d as f64;
    let norm = 2.0 * d - 1.0;
    match form {
        KernelForm::Zero => 0.0,
        // diff, |x|^2, 1 + s, q q / s, scale, accumulate
        KernelForm::ScaledCauchy { .. } => d + norm + 1.0 + 5.0 + 2.0 * d,
        // plus the support test, 1 - s, 1/(1-s), exp and the prefactor
        KernelForm::BumpGradient { .. } => d + norm + 3.0 + 4.0 + 20.0 + 8.0 + 2.0 * d,
        KernelForm::Opinion { .. } => d + norm + 3.0 + 4.0 + 4.0 + 20.0 + 3.0 + 2.0 * d,
        KernelForm::Custom(_) => 10.0 * d,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub full_evaluations_per_step: u64,
    pub rbm_evaluations_per_step: u64,
    /// RBM / full on kernel evaluations.
    pub ratio: f64,
    pub full_ops_per_step: f64,
    pub rbm_ops_per_step: f64,
    pub ops_ratio: f64,
    pub steps: usize,
    pub full_evaluations_total: u64,
    pub rbm_evaluations_total: u64,
    /// Counts observed by running one step of each method.
    pub runtime_full_per_step: Option<u64>,
    pub runtime_rbm_per_step: Option<u64>,
    pub counts_agree: bool,
}

/// Closed-form per-pair evaluation counts `(full, rbm)` per step, indexed `[i][j]`.
pub fn pair_evaluation_counts(layout: &BatchLayout) -> (Vec<Vec<u64>>, Vec<Vec<u64>>) {
    let n = layout.species_count();
    let b = layout.batch_counts();
    let mut full = vec![vec![0u64; n]; n];
    let mut rbm = vec![vec![0u64; n]; n];
    for i in 0..n {
        let ni = layout.particles[i] as u64;
        let pi = layout.batch_sizes[i] as u64;
        for j in 0..n {
            let nj = layout.particles[j] as u64;
            let pj = layout.batch_sizes[j] as u64;
            if i == j {
                full[i][j] = ni * (ni - 1);
                rbm[i][j] = ni * (pi - 1);
            } else {
                full[i][j] = ni * nj;
                rbm[i][j] = pi * pj * b[i].min(b[j]) as u64;
            }
        }
    }
    (full, rbm)
}

/// Kernel-evaluation cost of one step and of a whole run for both methods.
///
/// With `runtime_check`, one step of each method is evaluated from a sampled
/// initial state (seed `seed`) and its counter compared with the closed form.
pub fn kernel_eval_counts(spec: &SystemSpec, runtime_check: bool, seed: u64) -> CostReport {
    let layout = spec.layout();
    let (full, rbm) = pair_evaluation_counts(&layout);
    let n = layout.species_count();
    let mut counts = (0u64, 0u64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in 0..n {
            let w = kernel_op_weight(&spec.kernels[i][j].form, spec.dimension);
            counts.0 += full[i][j];
            counts.1 += rbm[i][j];
            counts.2 += full[i][j] as f64 * w;
            counts.3 += rbm[i][j] as f64 * w;
        }
    }
    let (full_evals, rbm_evals, full_ops, rbm_ops) = counts;
    let steps = spec.step_count();
    let (runtime_full, runtime_rbm) = if runtime_check {
        let mut streams = ReplicaStreams::new(seed, 0);
        let state = sample_initial(spec, &mut streams.init);
        let coeffs = interaction_coefficients(&layout);
        let part = sample_partition(&layout, &mut streams.batches);
        (
            Some(step_kernel_evaluations(spec, &coeffs, &state, None)),
            Some(step_kernel_evaluations(spec, &coeffs, &state, Some(&part))),
        )
    } else {
        (None, None)
    };
    let counts_agree = runtime_full.is_none_or(|c| c == full_evals) && runtime_rbm.is_none_or(|c| c == rbm_evals);
    CostReport {
        full_evaluations_per_step: full_evals,
        rbm_evaluations_per_step: rbm_evals,
        ratio: rbm_evals as f64 / full_evals as f64,
        full_ops_per_step: full_ops,
        rbm_ops_per_step: rbm_ops,
        ops_ratio: if full_ops > 0.0 { rbm_ops / full_ops } else { f64::NAN },
        steps,
        full_evaluations_total: full_evals * steps as u64,
        rbm_evaluations_total: rbm_evals * steps as u64,
        runtime_full_per_step: runtime_full,
        runtime_rbm_per_step: runtime_rbm,
        counts_agree,
    }
}

/// Fixed-bin density estimate on `[lo, hi)`; the last bin also takes `hi`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Normalized over the in-range samples so that it integrates to 1.
    pub density: Vec<f64>,
    pub below: u64,
    pub above: u64,
}

impl Histogram {
    pub fn new(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("need at least one bin and lo < hi, got {bins} bins on [{lo}, {hi}]")));
        }
        Ok(Histogram {
            lo,
            hi,
            counts: vec![0; bins],
            density: vec![0.0; bins],
            below: 0,
            above: 0,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn in_range(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of all added samples that fell outside the range.
    pub fn out_of_range_mass(&self) -> f64 {
        let out = self.below + self.above;
        let total = out + self.in_range();
        if total == 0 {
            0.0
        } else {
            out as f64 / total as f64
        }
    }

    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.below += 1;
        } else if v > self.hi {
            self.above += 1;
        } else {
            let bins = self.counts.len();
            let b = (((v - self.lo) / self.bin_width()) as usize).min(bins - 1);
            self.counts[b] += 1;
        }
    }

    /// Recomputes `density` from the counts.
    pub fn normalize(&mut self) {
        let total = self.in_range();
        let w = self.bin_width();
        for (d, &c) in self.density.iter_mut().zip(&self.counts) {
            *d = if total == 0 { 0.0 } else { c as f64 / (total as f64 * w) };
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.counts.len()).map(|b| self.lo + (b as f64 + 0.5) * w).collect()
    }
}

/// Histogram of one species of a one-dimensional state.
pub fn histogram(state: &ParticleState, species: usize, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let mut h = Histogram::new(bins, range.0, range.1)?;
    add_to_histogram(&mut h, state, species)?;
    h.normalize();
    Ok(h)
}

/// Adds the positions of one species to `h` without renormalizing.
pub fn add_to_histogram(h: &mut Histogram, state: &ParticleState, species: usize) -> Result<()> {
    if state.dimension != 1 {
        return Err(Error::Config(format!("histograms need dimension 1, state has {}", state.dimension)));
    }
    let pos = state
        .positions
        .get(species)
        .ok_or_else(|| Error::IndexOutOfRange(format!("species {}", species + 1)))?;
    if pos.is_empty() {
        return Err(Error::InvalidState(format!("species {} is empty", species + 1)));
    }
    for &v in pos {
        h.add(v);
    }
    Ok(())
}

/// `integral min(f, g)` of two normalized histograms on the same bins.
pub fn overlap_coefficient(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.counts.len() != b.counts.len() || a.lo != b.lo || a.hi != b.hi {
        return Err(Error::ShapeMismatch("histograms use different bins".into()));
    }
    let w = a.bin_width();
    Ok(a.density.iter().zip(&b.density).map(|(x, y)| x.min(*y) * w).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiffusionSpec, InitialDistribution, KernelSpec, PotentialSpec, SpeciesSpec};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(n: &[usize], p: &[usize]) -> BatchLayout {
        BatchLayout::new(n.to_vec(), p.to_vec()).unwrap()
    }

    fn cauchy_spec(n: &[usize], p: &[usize], q: &[f64]) -> SystemSpec {
        let m = n.len();
        SystemSpec {
            dimension: 2,
            species: n
                .iter()
                .zip(p)
                .map(|(&n, &p)| SpeciesSpec {
                    particles: n,
                    batch_size: p,
                    diffusion: DiffusionSpec::additive(0.5),
                    potential: PotentialSpec::none(),
                    initial: InitialDistribution::Gaussian {
                        mean: vec![0.0, 0.0],
                        variance: 1.0,
                    },
                })
                .collect(),
            kernels: (0..m).map(|i| (0..m).map(|j| KernelSpec::scaled_cauchy(q[i], q[j])).collect()).collect(),
            end_time: 1.0,
            step: 0.5,
            noise_as_drift: false,
        }
    }

    #[test]
    fn gamma_single_species_reduction() {
        assert_relative_eq!(gamma_factors(&layout(&[100], &[2]))[0], 98.0 / 99.0, max_relative = 1e-15);
        assert_eq!(gamma_factors(&layout(&[6], &[6]))[0], 0.0);
    }

    #[test]
    fn gamma_two_species_pinned() {
        // By hand: Gamma_1 = (1/6 + 1/2) + (1 - 1/3), Gamma_2 = (1/2 + 1/4 + 3/4) + (1 - 1/5).
        let g = gamma_factors(&layout(&[4, 6], &[2, 2]));
        assert_relative_eq!(g[0], 4.0 / 3.0, max_relative = 1e-14);
        assert_relative_eq!(g[1], 2.3, max_relative = 1e-14);
    }

    #[test]
    fn gamma_non_increasing_in_batch_size() {
        let n = 60;
        let divisors: Vec<usize> = (2..=n).filter(|p| n % p == 0).collect();
        let g: Vec<f64> = divisors.iter().map(|&p| gamma_factors(&layout(&[n], &[p]))[0]).collect();
        assert!(g.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn theta_and_exponent() {
        assert_eq!(theta(&layout(&[4, 6, 6], &[2, 2, 2])), 1.5);
        assert_eq!(theta(&layout(&[4, 4], &[2, 2])), 1.0);
        let spec = cauchy_spec(&[4], &[2], &[1.0]);
        assert_eq!(gamma_exponent(&spec), 6.0);
    }

    #[test]
    fn zero_kernels_give_zero_variance() {
        let mut spec = cauchy_spec(&[4, 6], &[2, 2], &[1.0, 1.0]);
        for row in &mut spec.kernels {
            for k in row {
                *k = KernelSpec::zero();
            }
        }
        let x = sample_initial(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(closed_form_chi_variance(&x, &spec, 1, 3).variance, 0.0);
    }

    #[test]
    fn closed_form_matches_enumeration_small() {
        let spec = cauchy_spec(&[4, 6], &[2, 2], &[-1.0, 2.0]);
        let coeffs = interaction_coefficients(&spec.layout());
        let x = sample_initial(&spec, &mut ChaCha8Rng::seed_from_u64(9));
        for (i, k) in [(0, 0), (1, 5)] {
            let cf = closed_form_chi_variance(&x, &spec, i, k).variance;
            let ex = exact_chi_moments(&x, &spec, &coeffs, i, k).unwrap();
            assert!((cf - ex.variance).abs() <= 1e-12 * (1.0 + ex.variance));
            assert!(ex.mean.iter().all(|m| m.abs() < 1e-12));
        }
    }

    #[test]
    fn monte_carlo_needs_two_samples() {
        let spec = cauchy_spec(&[4], &[2], &[1.0]);
        let coeffs = interaction_coefficients(&spec.layout());
        let x = sample_initial(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(empirical_chi_moments(&x, &spec, &coeffs, 0, 0, 1, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn l2_error_examples() {
        let a = ParticleState::new(0.0, 2, vec![vec![0.0; 8]]).unwrap();
        assert_eq!(discrete_l2_error(&a, &a).unwrap(), 0.0);
        let mut b = a.clone();
        b.positions[0][2] = 3.0;
        b.positions[0][3] = 4.0;
        assert_eq!(discrete_l2_error(&a, &b).unwrap(), 2.5);
        let c = ParticleState::new(0.0, 2, vec![vec![0.0; 6]]).unwrap();
        assert!(discrete_l2_error(&a, &c).is_err());
    }

    #[test]
    fn l2_error_pairs_by_index() {
        let a = ParticleState::new(0.0, 1, vec![vec![0.0, 1.0]]).unwrap();
        let b = ParticleState::new(0.0, 1, vec![vec![1.0, 0.0]]).unwrap();
        assert_eq!(discrete_l2_error(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let taus = [0.25f64, 0.125, 0.0625, 0.03125];
        let half: Vec<(f64, f64)> = taus.iter().map(|&t| (t, 3.0 * t.sqrt())).collect();
        assert!((convergence_slope(&half).unwrap().slope - 0.5).abs() < 1e-12);
        let one: Vec<(f64, f64)> = taus.iter().map(|&t| (t, 0.2 * t)).collect();
        assert!((convergence_slope(&one).unwrap().slope - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_excludes_zeros_and_needs_three_points() {
        let pts = [(0.5, 1.0), (0.25, 0.5), (0.125, 0.25), (0.0625, 0.0)];
        let fit = convergence_slope(&pts).unwrap();
        assert_eq!(fit.points_used, 3);
        assert_eq!(fit.warnings.len(), 1);
        assert!(convergence_slope(&[(0.5, 0.0), (0.25, 0.0), (0.125, 0.0)]).is_err());
        assert!(convergence_slope(&[(0.5, 1.0), (0.25, 0.5)]).is_err());
    }

    #[test]
    fn error_series_aggregation() {
        let s = ErrorSeries::from_replicas(&[0.5, 0.25, 0.125], &[vec![3.0, 2.0, 1.0], vec![4.0, 2.0, 1.0]], 1);
        assert_relative_eq!(s.points[0].mean_error, 12.5f64.sqrt());
        assert_eq!(s.points[1].std_error, 0.0);
        assert!(s.fit.is_some());
        let mut out = Vec::new();
        s.write_csv(&mut out).unwrap();
        assert!(String::from_utf8(out).unwrap().starts_with("tau,mean_error,std_error\n0.5,"));
    }

    #[test]
    fn cost_counts_small_cases() {
        let spec = cauchy_spec(&[4, 4], &[2, 2], &[1.0, 1.0]);
        let c = kernel_eval_counts(&spec, true, 3);
        assert_eq!((c.full_evaluations_per_step, c.rbm_evaluations_per_step), (56, 24));
        assert!(c.counts_agree);
        let spec = cauchy_spec(&[4], &[2], &[1.0]);
        let c = kernel_eval_counts(&spec, true, 3);
        assert_eq!((c.full_evaluations_per_step, c.rbm_evaluations_per_step), (12, 4));
        let spec = cauchy_spec(&[4, 6], &[4, 6], &[1.0, 1.0]);
        assert_eq!(kernel_eval_counts(&spec, true, 3).ratio, 1.0);
    }

    #[test]
    fn histogram_single_bin_mass() {
        let s = ParticleState::new(0.0, 1, vec![vec![0.3; 5]]).unwrap();
        let h = histogram(&s, 0, 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.density, vec![0.0, 4.0, 0.0, 0.0]);
        assert_eq!(h.out_of_range_mass(), 0.0);
        let t = ParticleState::new(0.0, 1, vec![vec![0.3, 2.0]]).unwrap();
        let h = histogram(&t, 0, 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.density[1], 4.0);
        assert_eq!(h.out_of_range_mass(), 0.5);
    }

    #[test]
    fn histogram_uniform_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let s = ParticleState::new(0.0, 1, vec![v]).unwrap();
        let h = histogram(&s, 0, 10, (0.0, 1.0)).unwrap();
        assert!(h.density.iter().all(|d| (d - 1.0).abs() < 0.05));
    }

    #[test]
    fn histogram_rejects_bad_input() {
        let s = ParticleState::new(0.0, 2, vec![vec![0.0; 4]]).unwrap();
        assert!(histogram(&s, 0, 4, (0.0, 1.0)).is_err());
        let s = ParticleState::new(0.0, 1, vec![vec![]]).unwrap();
        assert!(histogram(&s, 0, 4, (0.0, 1.0)).is_err());
        assert!(Histogram::new(0, 0.0, 1.0).is_err());
    }

    #[test]
    fn overlap_of_identical_and_disjoint() {
        let a = histogram(&ParticleState::new(0.0, 1, vec![vec![0.1, 0.2]]).unwrap(), 0, 4, (0.0, 1.0)).unwrap();
        let b = histogram(&ParticleState::new(0.0, 1, vec![vec![0.8, 0.9]]).unwrap(), 0, 4, (0.0, 1.0)).unwrap();
        assert_relative_eq!(overlap_coefficient(&a, &a).unwrap(), 1.0);
        assert_eq!(overlap_coefficient(&a, &b).unwrap(), 0.0);
    }
}
