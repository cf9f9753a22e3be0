//! Trained-agent behaviour: learning progress, supervised retraining and
//! the backup path.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cisrl_core::cis_synth::default_input_grid;
use cisrl_core::harness::{synth_bundle, train_config, SetBundle, Settings, Variant};
use cisrl_core::supervisor::{check_action, run_online, supervise_step, SupervisorConfig};
use cisrl_core::training::{shared_initial_states, train_offline, TrainOutcome};
use cisrl_core::{Agent, BoxSet, Cstr};

struct Fixture {
    bundle: SetBundle,
    trained: TrainOutcome,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let settings = Settings::default();
        let plant = Cstr::default();
        let bundle = synth_bundle(&plant, &settings, false, 0).unwrap();
        let cfg = train_config(&settings, &bundle.polytope, Variant::WithSet, false, 0);
        let trained = train_offline(&plant, &cfg).unwrap();
        Fixture { bundle, trained }
    })
}

fn backup(b: &SetBundle) -> cisrl_core::supervisor::Backup {
    b.backup(default_input_grid())
}

#[test]
fn running_average_improves_over_training() {
    let f = fixture();
    let curve = &f.trained.curve;
    assert!(f.trained.aborted.is_none());
    assert_eq!(curve.len(), 2000);
    let first = curve.scores[..100].iter().sum::<f64>() / 100.0;
    let last = *curve.running.last().unwrap();
    assert!(last > first, "running average {last} not above initial {first}");
}

#[test]
fn retraining_recovers_from_biased_policy() {
    let f = fixture();
    let plant = Cstr::default();
    let poly = &f.bundle.polytope;
    let mut hot = f.trained.agent.clone();
    let n = hot.policy.net.params().len();
    hot.policy.net.params_mut()[n - 1] += 2.0;
    let w = BoxSet::cstr_disturbance();
    let states: Vec<Vec<f64>> = shared_initial_states(poly, 100_000, 9)
        .unwrap()
        .into_iter()
        .filter(|x| poly.margin(x).unwrap() > -0.01)
        .filter(|x| !check_action(&plant, poly, x, hot.act(x, false, &mut ChaCha8Rng::seed_from_u64(0)).u, false, &w).unwrap().safe)
        .take(100)
        .collect();
    assert_eq!(states.len(), 100);
    let cfg = SupervisorConfig { max_itr: Some(50), ..SupervisorConfig::default() };
    let bk = backup(&f.bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut recovered = 0;
    for x in &states {
        let mut a = hot.clone();
        let log = supervise_step(&plant, poly, &mut a, x, &cfg, &bk, &mut rng).unwrap();
        assert!(log.safe);
        if !log.fallback {
            recovered += 1;
        }
    }
    assert!(recovered >= 80, "only {recovered}/100 recovered without the backup");
}

#[test]
fn zero_budget_uses_certified_backup() {
    let f = fixture();
    let plant = Cstr::default();
    let poly = &f.bundle.polytope;
    let mut cold = Agent::cstr(Default::default(), 4).unwrap();
    let n = cold.policy.net.params().len();
    cold.policy.net.params_mut()[n - 1] -= 4.0;
    let cfg = SupervisorConfig { max_itr: Some(0), ..SupervisorConfig::default() };
    let bk = backup(&f.bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fallbacks = 0;
    for x in shared_initial_states(poly, 200, 10).unwrap() {
        let log = supervise_step(&plant, poly, &mut cold, &x, &cfg, &bk, &mut rng).unwrap();
        assert!(log.safe);
        assert_eq!(log.updates_used, 0);
        fallbacks += usize::from(log.fallback);
        let next = plant_step(&plant, &x, log.u_applied);
        assert!(poly.contains(&next).unwrap(), "backup input {} left the set from {x:?}", log.u_applied);
    }
    assert!(fallbacks > 0);
}

fn plant_step(plant: &Cstr, x: &[f64], u: f64) -> Vec<f64> {
    use cisrl_core::dynamics::Plant;
    plant.nominal(x, u).unwrap()
}

#[test]
fn safe_actions_pass_without_retraining() {
    let f = fixture();
    let plant = Cstr::default();
    let poly = &f.bundle.polytope;
    let centre = poly.centroid().unwrap();
    let mut a = f.trained.agent.clone();
    let before = a.clone();
    let cfg = SupervisorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let log = supervise_step(&plant, poly, &mut a, &centre, &cfg, &backup(&f.bundle), &mut rng).unwrap();
    assert!(log.safe && !log.fallback);
    assert_eq!(log.updates_used, 0);
    assert_eq!(log.u_raw, log.u_applied);
    assert_eq!(a.policy.net.params(), before.policy.net.params());
}

#[test]
fn online_runs_are_reproducible() {
    let f = fixture();
    let plant = Cstr::default();
    let poly = &f.bundle.polytope;
    let initial = shared_initial_states(poly, 5, 3).unwrap();
    let cfg = SupervisorConfig::default();
    let bk = backup(&f.bundle);
    let run = || {
        let mut a = f.trained.agent.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        run_online(&plant, poly, &mut a, &initial, 50, &cfg, &bk, None, &mut rng).unwrap().step_csv()
    };
    assert_eq!(run(), run());
}
