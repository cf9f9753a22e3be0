//! Offline training inside a safe set: initial states sampled from the set,
//! membership-gated rewards, and the state-reset rule.
//!
//! When a proposed input would leave the set, the transition is stored with
//! the violating prediction as `x_next`, the penalty reward, and
//! `done = true`, and the episode continues from the unchanged state.

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{Action, Agent, Hyper, Transition};
use crate::dynamics::{Plant, State};
use crate::error::{Error, Result};
use crate::geometry::{BoxSet, HPolytope, RejectionSampler};
use crate::rewards::{reward, RewardSpec};
use crate::supervisor::check_action;

/// Anything that proposes inputs.
pub trait Policy {
    fn propose(&self, x: &[f64], explore: bool, rng: &mut dyn RngCore) -> Action;
}

impl Policy for Agent {
    fn propose(&self, x: &[f64], explore: bool, rng: &mut dyn RngCore) -> Action {
        self.act(x, explore, rng)
    }
}

/// Deterministic state feedback, for scripted controllers.
pub struct FnPolicy<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Policy for FnPolicy<F> {
    fn propose(&self, x: &[f64], _explore: bool, _rng: &mut dyn RngCore) -> Action {
        Action { u: (self.0)(x), raw: 0.0, logprob: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub batch_episodes: usize,
    pub seed: u64,
    /// Safe set for sampling, gating and resets; the state box for the
    /// no-set ablation.
    pub set: HPolytope,
    pub reward: RewardSpec,
    /// Gate rewards on the robust verdict.
    pub robust: bool,
    /// In robust mode, use the worst-case check (true) or the cheaper
    /// nominal prediction (false).
    pub offline_worst_case: bool,
    pub w: BoxSet,
    pub hyper: Hyper,
}

impl TrainConfig {
    pub fn new(set: HPolytope, reward: RewardSpec, seed: u64) -> Self {
        Self {
            episodes: 2_000,
            steps_per_episode: 200,
            batch_episodes: 10,
            seed,
            set,
            reward,
            robust: false,
            offline_worst_case: true,
            w: BoxSet::cstr_disturbance(),
            hyper: Hyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_episodes == 0 || self.episodes % self.batch_episodes != 0 {
            return Err(Error::Config(format!(
                "episodes ({}) must be a multiple of batch_episodes ({})",
                self.episodes, self.batch_episodes
            )));
        }
        if self.steps_per_episode == 0 {
            return Err(Error::Config("steps_per_episode must be positive".into()));
        }
        self.hyper.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LearningCurve {
    pub scores: Vec<f64>,
    pub running: Vec<f64>,
}

pub const RUNNING_WINDOW: usize = 100;

impl LearningCurve {
    pub fn push(&mut self, score: f64) {
        self.scores.push(score);
        let n = self.scores.len();
        let window = &self.scores[n.saturating_sub(RUNNING_WINDOW)..];
        self.running.push(window.iter().sum::<f64>() / window.len() as f64);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `episode,score,running_avg`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,score,running_avg\n");
        for (i, (s, r)) in self.scores.iter().zip(&self.running).enumerate() {
            let _ = writeln!(out, "{},{:?},{:?}", i + 1, s, r);
        }
        out
    }
}

pub fn episode_score(episode: &[Transition]) -> f64 {
    episode.iter().map(|t| t.r).sum()
}

/// Membership verdict and stored prediction for one proposal.
pub fn gate(plant: &dyn Plant, cfg: &TrainConfig, x: &[f64], u: f64) -> Result<(bool, Vec<f64>)> {
    let v = check_action(plant, &cfg.set, x, u, cfg.robust && cfg.offline_worst_case, &cfg.w)?;
    Ok((v.safe, v.x_pred))
}

/// One training episode from `x0`.
pub fn rollout_from(
    plant: &dyn Plant,
    policy: &dyn Policy,
    cfg: &TrainConfig,
    x0: &[f64],
    rng: &mut dyn RngCore,
) -> Result<Vec<Transition>> {
    if !cfg.set.contains(x0)? {
        return Err(Error::Config(format!("initial state {x0:?} outside the training set")));
    }
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(cfg.steps_per_episode);
    for _ in 0..cfg.steps_per_episode {
        let a = policy.propose(&x, true, rng);
        let (inside, x_pred) = gate(plant, cfg, &x, a.u)?;
        let r = reward(&cfg.reward, State::from_slice(&x_pred)?, inside, State::from_slice(&x)?);
        out.push(Transition { x: x.clone(), u: a.u, raw: a.raw, r, x_next: x_pred.clone(), logprob: a.logprob, done: !inside });
        if inside {
            x = x_pred;
        }
    }
    Ok(out)
}

/// One training episode from a uniformly sampled initial state.
pub fn rollout_episode(
    plant: &dyn Plant,
    policy: &dyn Policy,
    cfg: &TrainConfig,
    sampler: &mut RejectionSampler<'_>,
    rng: &mut dyn RngCore,
) -> Result<Vec<Transition>> {
    let x0 = sampler.sample(rng)?;
    rollout_from(plant, policy, cfg, &x0, rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub curve: LearningCurve,
    /// Set when an update aborted; the curve holds the episodes run so far.
    pub aborted: Option<String>,
}

/// Stream used for rollouts, distinct from the weight-initialization stream.
pub fn rollout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn train_offline(plant: &dyn Plant, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let agent = Agent::cstr(cfg.hyper, cfg.seed)?;
    continue_training(plant, agent, cfg)
}

/// Trains an existing agent for `cfg.episodes` more episodes.
pub fn continue_training(plant: &dyn Plant, mut agent: Agent, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut curve = LearningCurve::default();
    if cfg.episodes == 0 {
        return Ok(TrainOutcome { agent, curve, aborted: None });
    }
    let bb = cfg.set.bounding_box()?;
    let mut sampler = RejectionSampler::new(&cfg.set, bb)?;
    let mut rng = rollout_rng(cfg.seed);
    let mut batch = Vec::with_capacity(cfg.batch_episodes);
    for _ in 0..cfg.episodes {
        let ep = rollout_episode(plant, &agent, cfg, &mut sampler, &mut rng)?;
        curve.push(episode_score(&ep));
        batch.push(ep);
        if batch.len() == cfg.batch_episodes {
            if let Err(e) = agent.update(&batch) {
                return Ok(TrainOutcome { agent, curve, aborted: Some(e.to_string()) });
            }
            batch.clear();
        }
    }
    Ok(TrainOutcome { agent, curve, aborted: None })
}

/// Uniform initial states from `set`, shared across compared variants.
pub fn shared_initial_states(set: &HPolytope, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut sampler = RejectionSampler::new(set, set.bounding_box()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..n).map(|_| sampler.sample(&mut rng)).collect()
}

/// FNV-1a over the bit patterns of a state list.
pub fn states_hash(states: &[Vec<f64>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for s in states {
        for v in s {
            for byte in v.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEval {
    /// `x_0, x_1, …` up to the first state outside the set.
    pub states: Vec<Vec<f64>>,
    pub failed: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    pub failure_rate: f64,
    pub mean_score: f64,
    pub episodes: Vec<EpisodeEval>,
}

/// Greedy evaluation: an episode fails when a realized state leaves `set`.
/// With `disturbance` set, `w` is drawn uniformly from it each step.
/// Rewards are collected for reporting only.
#[allow(clippy::too_many_arguments)]
pub fn test_policy(
    plant: &dyn Plant,
    policy: &dyn Policy,
    set: &HPolytope,
    initial_states: &[Vec<f64>],
    steps: usize,
    spec: &RewardSpec,
    disturbance: Option<&BoxSet>,
    seed: u64,
) -> Result<TestReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut episodes = Vec::with_capacity(initial_states.len());
    for x0 in initial_states {
        let mut x = x0.clone();
        let mut states = vec![x.clone()];
        let (mut failed, mut score) = (false, 0.0);
        for _ in 0..steps {
            let a = policy.propose(&x, false, &mut rng);
            let w = match disturbance {
                Some(b) => b.sample(&mut rng),
                None => vec![0.0; plant.disturbance_dim()],
            };
            let next = match plant.step(&x, a.u, &w) {
                Ok(n) if n.iter().all(|v| v.is_finite()) => n,
                _ => {
                    failed = true;
                    break;
                }
            };
            let inside = set.contains(&next)?;
            score += reward(spec, State::from_slice(&next)?, inside, State::from_slice(&x)?);
            states.push(next.clone());
            if !inside {
                failed = true;
                break;
            }
            x = next;
        }
        episodes.push(EpisodeEval { states, failed, score });
    }
    let n = episodes.len().max(1) as f64;
    Ok(TestReport {
        failure_rate: episodes.iter().filter(|e| e.failed).count() as f64 / n,
        mean_score: episodes.iter().map(|e| e.score).sum::<f64>() / n,
        episodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Cstr;

    fn cfg() -> TrainConfig {
        let set = BoxSet::new(vec![0.2, 346.0], vec![0.8, 354.0]).unwrap().to_polytope();
        TrainConfig::new(set, RewardSpec::invariance(), 7)
    }

    #[test]
    fn running_average_window() {
        let mut c = LearningCurve::default();
        for i in 0..150 {
            c.push(i as f64);
        }
        assert_eq!(c.running[0], 0.0);
        assert_eq!(c.running[99], 49.5);
        assert_eq!(c.running[149], (50..150).sum::<usize>() as f64 / 100.0);
        assert!(c.to_csv().starts_with("episode,score,running_avg\n1,0.0,0.0\n"));
    }

    #[test]
    fn violations_hold_the_state() {
        let p = Cstr::default();
        let c = cfg();
        let mut rng = rollout_rng(1);
        let hot = FnPolicy(|_: &[f64]| 315.0);
        let ep = rollout_from(&p, &hot, &c, &[0.5, 353.9], &mut rng).unwrap();
        assert_eq!(ep.len(), 200);
        for w in ep.windows(2) {
            if w[0].done {
                assert_eq!(w[1].x, w[0].x);
            } else {
                assert_eq!(w[1].x, w[0].x_next);
            }
        }
        assert!(ep.iter().all(|t| t.x == ep[0].x));
        assert_eq!(episode_score(&ep), 200.0 * -1_000.0);
    }

    #[test]
    fn zero_episodes_leave_agent_untouched() {
        let mut c = cfg();
        c.episodes = 0;
        let out = train_offline(&Cstr::default(), &c).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.agent, Agent::cstr(c.hyper, c.seed).unwrap());
        c.episodes = 15;
        assert!(train_offline(&Cstr::default(), &c).is_err());
    }

    #[test]
    fn rollouts_are_seeded() {
        let p = Cstr::default();
        let c = cfg();
        let agent = Agent::cstr(c.hyper, 3).unwrap();
        let bb = c.set.bounding_box().unwrap();
        let run = || {
            let mut s = RejectionSampler::new(&c.set, bb.clone()).unwrap();
            rollout_episode(&p, &agent, &c, &mut s, &mut rollout_rng(5)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn hash_tracks_contents() {
        let set = cfg().set;
        let a = shared_initial_states(&set, 10, 1).unwrap();
        assert_eq!(states_hash(&a), states_hash(&shared_initial_states(&set, 10, 1).unwrap()));
        assert_ne!(states_hash(&a), states_hash(&shared_initial_states(&set, 10, 2).unwrap()));
    }
}
