use rbm_core::dynamics::{run_coupled, run_full, run_rbm, CoupledConfig, RunConfig};
use rbm_core::model::{DiffusionSpec, MultiplicativeForm};
use rbm_core::scenarios::preset;

fn second_moment(state: &rbm_core::dynamics::ParticleState) -> f64 {
    let total: usize = state.positions.iter().map(|s| s.len() / state.dimension).sum();
    let sq: f64 = state.positions.iter().flatten().map(|v| v * v).sum();
    sq / total as f64
}

#[test]
fn strong_error_decreases_as_tau_halves() {
    let s = preset("test3").unwrap();
    let cfg = CoupledConfig {
        seed: 1,
        taus: s.run.taus.clone(),
        refinement: 2,
        replicas: 10,
    };
    let series = run_coupled(&s.system, &cfg).unwrap();
    for w in series.points.windows(2) {
        assert!(w[0].tau > w[1].tau);
        assert!(w[1].mean_error < w[0].mean_error, "{:?}", series.points);
    }
}

#[test]
fn second_moment_stays_bounded_on_coarse_steps() {
    let mut spec = preset("test3").unwrap().system;
    for e in 2..=6 {
        spec.step = 2f64.powi(-e);
        let traj = run_rbm(&spec, &RunConfig::new(3)).unwrap();
        for snap in &traj.snapshots {
            assert!(second_moment(snap) < 100.0, "tau 2^-{e}: {}", second_moment(snap));
        }
    }
}

#[test]
fn runs_are_reproducible_from_the_seed() {
    let mut spec = preset("test3").unwrap().system;
    spec.step = 0.125;
    let a = run_rbm(&spec, &RunConfig::new(42)).unwrap();
    let b = run_rbm(&spec, &RunConfig::new(42)).unwrap();
    let c = run_rbm(&spec, &RunConfig::new(43)).unwrap();
    assert_eq!(a.final_state(), b.final_state());
    assert_ne!(a.final_state(), c.final_state());
    assert_eq!(a.meta.spec_hash, spec.fingerprint());
}

#[test]
fn replicas_use_distinct_streams() {
    let mut spec = preset("test3").unwrap().system;
    spec.step = 0.25;
    let mut cfg = RunConfig::new(5);
    let a = run_full(&spec, &cfg).unwrap();
    cfg.replica = 1;
    let b = run_full(&spec, &cfg).unwrap();
    assert_ne!(a.snapshots[0], b.snapshots[0]);
}

#[test]
fn multiplicative_noise_runs_converge_too() {
    let mut s = preset("test3").unwrap();
    for sp in &mut s.system.species {
        sp.diffusion = DiffusionSpec::multiplicative(MultiplicativeForm::TanhModulated { scale: 0.5 });
    }
    let cfg = CoupledConfig {
        seed: 2,
        taus: vec![0.25, 0.125, 0.0625],
        refinement: 2,
        replicas: 4,
    };
    let series = run_coupled(&s.system, &cfg).unwrap();
    assert!(series.points[2].mean_error < series.points[0].mean_error);
}
