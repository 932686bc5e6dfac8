//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p rbm-core --test acceptance -- 4 5`.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{cauchy_spec, enumerable_configs, positions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbm_core::analysis::{
    add_to_histogram, closed_form_chi_variance, consistency_report, default_targets, empirical_chi_moments, exact_chi_moments,
    gamma_factors, kernel_eval_counts, overlap_coefficient, theta, variance_bound, ConsistencyMode, Histogram,
};
use rbm_core::batching::{enumerate_partitions, inclusion_indicator, interaction_coefficients, legacy_coefficients};
use rbm_core::dynamics::{run_coupled, run_rbm, CoupledConfig, ParticleState, RunConfig};
use rbm_core::model::{BatchLayout, DiffusionSpec, MultiplicativeForm};
use rbm_core::scenarios::preset;
use rbm_core::SystemSpec;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn c1_consistency() -> Outcome {
    let mut configs = 0;
    let mut worst_mean = 0.0f64;
    let mut worst_rel = 0.0f64;
    for (_, spec) in enumerable_configs() {
        let x = positions(&spec, 11);
        let coeffs = interaction_coefficients(&spec.layout());
        for (i, k) in default_targets(&spec) {
            let m = exact_chi_moments(&x, &spec, &coeffs, i, k).map_err(|e| e.to_string())?;
            let closed = closed_form_chi_variance(&x, &spec, i, k).variance;
            worst_mean = m.mean.iter().fold(worst_mean, |a, v| a.max(v.abs()));
            worst_rel = worst_rel.max((closed - m.variance).abs() / m.variance.abs().max(f64::MIN_POSITIVE));
        }
        configs += 1;
    }
    check(
        configs >= 6 && worst_mean <= 1e-12 && worst_rel <= 1e-12,
        format!("{configs} configs, max |E chi| = {worst_mean:.2e}, max relative variance gap = {worst_rel:.2e}"),
    )
}

/// Displayed probability that both partners share the super-batch of `(i, k)`.
fn joint_probability(layout: &BatchLayout, i: usize, a: (usize, usize), b: (usize, usize)) -> f64 {
    let bc: Vec<f64> = layout.batch_counts().iter().map(|&v| v as f64).collect();
    let n = |j: usize| layout.particles[j] as f64;
    let p = |j: usize| layout.batch_sizes[j] as f64;
    let single = |j: usize| {
        if j == i {
            (p(i) - 1.0) / (n(i) - 1.0)
        } else {
            bc[i].min(bc[j]) / (bc[i] * bc[j])
        }
    };
    let ((j, l), (jp, lp)) = (a, b);
    if a == b {
        return single(j);
    }
    match (j == i, jp == i) {
        (false, false) if j != jp => bc[i].min(bc[j]).min(bc[jp]) / (bc[i] * bc[j] * bc[jp]),
        (false, false) => {
            debug_assert_ne!(l, lp);
            bc[i].min(bc[j]) * (p(j) - 1.0) / (bc[i] * bc[j] * (n(j) - 1.0))
        }
        (true, false) => bc[i].min(bc[jp]) * (p(i) - 1.0) / (bc[i] * bc[jp] * (n(i) - 1.0)),
        (false, true) => bc[i].min(bc[j]) * (p(i) - 1.0) / (bc[i] * bc[j] * (n(i) - 1.0)),
        (true, true) => (p(i) - 1.0) * (p(i) - 2.0) / ((n(i) - 1.0) * (n(i) - 2.0)),
    }
}

fn c2_inclusion() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (_, spec) in enumerable_configs() {
        let layout = spec.layout();
        let targets = default_targets(&spec);
        let partners: Vec<Vec<(usize, usize)>> = targets
            .iter()
            .map(|&t| {
                (0..layout.species_count())
                    .flat_map(|j| (0..layout.particles[j]).map(move |l| (j, l)))
                    .filter(|&q| q != t)
                    .collect()
            })
            .collect();
        let mut sums: Vec<Vec<f64>> = partners.iter().map(|p| vec![0.0; p.len() * p.len()]).collect();
        let parts = enumerate_partitions(&layout).map_err(|e| e.to_string())?;
        let w = parts.weight();
        for part in parts {
            for (t, &target) in targets.iter().enumerate() {
                let ind: Vec<bool> = partners[t]
                    .iter()
                    .map(|&q| inclusion_indicator(&part, target, q).unwrap())
                    .collect();
                let m = ind.len();
                for a in (0..m).filter(|&a| ind[a]) {
                    for b in (0..m).filter(|&b| ind[b]) {
                        sums[t][a * m + b] += w;
                    }
                }
            }
        }
        for (t, &(i, _)) in targets.iter().enumerate() {
            let m = partners[t].len();
            for a in 0..m {
                for b in 0..m {
                    let expect = joint_probability(&layout, i, partners[t][a], partners[t][b]);
                    worst = worst.max((sums[t][a * m + b] - expect).abs());
                    checked += 1;
                }
            }
        }
    }
    check(worst <= 1e-12, format!("{checked} single and pair probabilities, max gap = {worst:.2e}"))
}

fn c3_negative_control() -> Outcome {
    let spec = cauchy_spec(&[4, 6], &[2, 2]);
    let x = positions(&spec, 11);
    let legacy = legacy_coefficients(&spec.layout());
    let report = consistency_report(&spec, &x, &legacy, &default_targets(&spec), &ConsistencyMode::Exact).map_err(|e| e.to_string())?;
    check(
        !report.passed && report.max_abs_mean >= 1e-3,
        format!("legacy beta on N=(4,6), p=(2,2): oracle passed = {}, max |E chi| = {:.4}", report.passed, report.max_abs_mean),
    )
}

fn slope_check(spec: &SystemSpec, taus: &[f64], lo: f64, hi: f64) -> Outcome {
    let cfg = CoupledConfig {
        seed: 1,
        taus: taus.to_vec(),
        refinement: 2,
        replicas: 10,
    };
    let series = run_coupled(spec, &cfg).map_err(|e| e.to_string())?;
    let errors: Vec<String> = series.points.iter().map(|p| format!("{:.4}", p.mean_error)).collect();
    match series.fit {
        Some(fit) => check(
            (lo..=hi).contains(&fit.slope),
            format!("slope {:.4} in [{lo}, {hi}]? errors [{}]", fit.slope, errors.join(", ")),
        ),
        None => Err(format!("no slope fit: {:?}", series.fit_error)),
    }
}

fn c4_additive_rate() -> Outcome {
    let s = preset("test3").map_err(|e| e.to_string())?;
    slope_check(&s.system, &s.run.taus, 0.35, 0.65)
}

fn c5_multiplicative_rate() -> Outcome {
    let mut s = preset("test3").map_err(|e| e.to_string())?;
    for sp in &mut s.system.species {
        sp.diffusion = DiffusionSpec::multiplicative(MultiplicativeForm::TanhModulated { scale: 0.5 });
    }
    slope_check(&s.system, &s.run.taus, 0.3, 0.7)
}

fn c6_degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for name in ["test3", "consistency_equal", "consistency_unequal"] {
        let mut s = preset(name).map_err(|e| e.to_string())?;
        for sp in &mut s.system.species {
            sp.batch_size = sp.particles;
        }
        let taus = if s.run.taus.is_empty() {
            vec![s.system.step, s.system.step / 2.0, s.system.step / 4.0]
        } else {
            s.run.taus.clone()
        };
        let cfg = CoupledConfig {
            seed: 7,
            taus,
            refinement: 0,
            replicas: 2,
        };
        let series = run_coupled(&s.system, &cfg).map_err(|e| e.to_string())?;
        worst = series.points.iter().fold(worst, |a, p| a.max(p.mean_error));
        names.push(name);
    }
    check(worst <= 1e-14, format!("p = N on {}: max coupled error = {worst:.2e}", names.join(", ")))
}

fn c7_gamma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut min_gamma = f64::INFINITY;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=4);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(2..=8)).collect();
        let particles: Vec<usize> = p.iter().map(|&p| p * rng.random_range(1..=8)).collect();
        let layout = BatchLayout::new(particles, p).map_err(|e| e.to_string())?;
        min_gamma = gamma_factors(&layout).into_iter().fold(min_gamma, f64::min);
        if theta(&layout) < 1.0 {
            return Err("theta below 1".into());
        }
    }
    let mut single_exact = true;
    for p in 2..=20usize {
        for b in 1..=10 {
            let layout = BatchLayout::new(vec![p * b], vec![p]).unwrap();
            single_exact &= gamma_factors(&layout)[0] == 1.0 / (p as f64 - 1.0) - 1.0 / ((p * b) as f64 - 1.0);
        }
    }
    let mut configs: Vec<SystemSpec> = enumerable_configs().into_iter().map(|(_, s)| s).collect();
    configs.push(cauchy_spec(&[20, 30, 10], &[2, 3, 2]));
    configs.push(cauchy_spec(&[100, 100, 200], &[2, 2, 2]));
    let mut worst_ratio = 0.0f64;
    for spec in &configs {
        let bound = variance_bound(spec).ok_or("undeclared sup norm")?;
        let x = positions(spec, 31);
        let coeffs = interaction_coefficients(&spec.layout());
        let mut mc_rng = ChaCha8Rng::seed_from_u64(32);
        for (i, k) in default_targets(spec).into_iter().take(12) {
            let m = empirical_chi_moments(&x, spec, &coeffs, i, k, 5_000, &mut mc_rng).map_err(|e| e.to_string())?;
            worst_ratio = worst_ratio.max(m.variance / bound);
        }
    }
    check(
        min_gamma >= 0.0 && single_exact && worst_ratio <= 1.0,
        format!(
            "min Gamma over 10^4 layouts = {min_gamma:.3e}, single-species reduction exact = {single_exact}, max Var/bound over {} configs = {worst_ratio:.3e}",
            configs.len()
        ),
    )
}

fn c8_cost() -> Outcome {
    let s = preset("population3").map_err(|e| e.to_string())?;
    let r = kernel_eval_counts(&s.system, true, s.run.seed);
    check(
        r.ratio <= 1e-2 && r.counts_agree,
        format!(
            "per step: full {} vs batched {} evaluations, ratio {:.3e}, runtime counter agrees = {}",
            r.full_evaluations_per_step, r.rbm_evaluations_per_step, r.ratio, r.counts_agree
        ),
    )
}

fn c9_segregation() -> Outcome {
    let s = preset("population3").map_err(|e| e.to_string())?;
    let h = s.run.histogram.clone().ok_or("population preset without histogram")?;
    let replicas = 200;
    let mut hist: Vec<Histogram> = (0..3).map(|_| Histogram::new(h.bins, h.lo, h.hi).unwrap()).collect();
    for r in 0..replicas {
        let mut cfg = RunConfig::new(s.run.seed);
        cfg.replica = r;
        let traj = run_rbm(&s.system, &cfg).map_err(|e| e.to_string())?;
        for (i, hi) in hist.iter_mut().enumerate() {
            add_to_histogram(hi, traj.final_state(), i).map_err(|e| e.to_string())?;
        }
    }
    hist.iter_mut().for_each(Histogram::normalize);
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        let o = overlap_coefficient(&hist[a], &hist[b]).map_err(|e| e.to_string())?;
        worst = worst.max(o);
        parts.push(format!("({},{}) {o:.3}", a + 1, b + 1));
    }
    check(worst < 0.2, format!("{replicas} replicas, overlaps {} (threshold 0.2)", parts.join(", ")))
}

fn opinion_final(name: &str) -> Result<ParticleState, String> {
    let mut s = preset(name).map_err(|e| e.to_string())?;
    s.system.species[0].particles = 500;
    s.system.step = 1e-3;
    let mut cfg = RunConfig::new(s.run.seed);
    cfg.record_times = vec![s.system.end_time];
    let traj = run_rbm(&s.system, &cfg).map_err(|e| e.to_string())?;
    Ok(traj.final_state().clone())
}

fn c10_opinion() -> Outcome {
    let obedient = opinion_final("opinion_obedient")?;
    let all: Vec<f64> = obedient.positions.concat();
    let spread = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - all.iter().cloned().fold(f64::INFINITY, f64::min);

    let submissive = opinion_final("opinion_submissive")?;
    let mut workers = submissive.positions[0].clone();
    workers.sort_by(f64::total_cmp);
    let clusters = 1 + workers.windows(2).filter(|w| w[1] - w[0] > 1.0).count();
    check(
        spread < 1.0 && clusters >= 2,
        format!("obedient spread {spread:.3} (< 1.0), submissive worker clusters {clusters} (>= 2)"),
    )
}

fn main() -> ExitCode {
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        (1, "consistency oracle", c1_consistency),
        (2, "inclusion probabilities", c2_inclusion),
        (3, "legacy beta negative control", c3_negative_control),
        (4, "additive-noise strong rate", c4_additive_rate),
        (5, "multiplicative-noise strong rate", c5_multiplicative_rate),
        (6, "full-batch degeneracy", c6_degeneracy),
        (7, "Gamma and theta properties", c7_gamma),
        (8, "cost ratio", c8_cost),
        (9, "population segregation", c9_segregation),
        (10, "opinion clusters and consensus", c10_opinion),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        ran += 1;
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
