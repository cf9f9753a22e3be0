//! PPO actor-critic for a scalar continuous action.
//!
//! The actor maps the box-normalized state through a 2×64 tanh network and a
//! final `tanh` to a mean in normalized action units `[-1, 1]`. A
//! state-independent log standard deviation sets the Gaussian exploration
//! noise; it is projected back to `ln(std_floor)` after every optimizer
//! step, so exploration never collapses. The critic has the same body with
//! a linear scalar head.
//!
//! Updates are full-batch: advantages from generalized advantage
//! estimation are normalized over the pooled batch, then the clipped
//! surrogate and the value regression each take `epochs_per_update` Adam
//! steps. Samples are summed in a canonical order so an update does not
//! depend on how the episodes of a batch are ordered.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::BoxSet;
use crate::nn::{Adam, Mlp};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub gamma: f64,
    pub clip: f64,
    pub gae_lambda: f64,
    pub epochs_per_update: usize,
    pub batch_episodes: usize,
    /// Lower bound on the policy std, normalized action units.
    pub std_floor: f64,
    /// Initial policy std, normalized action units.
    pub init_std: f64,
    /// Multiplies rewards before advantage and return computation.
    pub reward_scale: f64,
    pub hidden: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            gamma: 0.99,
            clip: 0.2,
            gae_lambda: 0.95,
            epochs_per_update: 10,
            batch_episodes: 10,
            std_floor: 0.05,
            init_std: 0.3,
            reward_scale: 1e-4,
            hidden: 64,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.gamma, self.clip, self.gae_lambda, self.std_floor, self.init_std, self.reward_scale];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.epochs_per_update == 0
            || self.batch_episodes == 0
            || self.hidden == 0
        {
            return Err(Error::Config("PPO hyperparameters must all be positive".into()));
        }
        if self.clip >= 1.0 {
            return Err(Error::Config("clip must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// One step of experience. `raw` is the pre-clip normalized action sample
/// that `logprob` refers to; `u` is the clipped physical input.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: Vec<f64>,
    pub u: f64,
    pub raw: f64,
    pub r: f64,
    pub x_next: Vec<f64>,
    pub logprob: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    /// Physical input, clipped to the admissible interval.
    pub u: f64,
    /// Normalized pre-clip sample.
    pub raw: f64,
    pub logprob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Losses {
    pub policy: f64,
    pub value: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub net: Mlp,
    pub log_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueParams {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub hyper: Hyper,
    pub seed: u64,
    obs_box: BoxSet,
    action_lo: f64,
    action_hi: f64,
    policy_opt: Adam,
    value_opt: Adam,
}

/// Per-step `(G_k, A_k)`: GAE advantages and the matching λ-returns
/// `G_k = A_k + V(x_k)`. Non-terminal episode ends bootstrap from
/// `V(x_next)`.
pub fn returns_and_advantages(
    episode: &[Transition],
    gamma: f64,
    lambda: f64,
    value_fn: impl Fn(&[f64]) -> f64,
) -> Vec<(f64, f64)> {
    returns_with_scale(episode, gamma, lambda, 1.0, value_fn)
}

fn returns_with_scale(
    episode: &[Transition],
    gamma: f64,
    lambda: f64,
    scale: f64,
    value_fn: impl Fn(&[f64]) -> f64,
) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); episode.len()];
    let mut next_adv = 0.0;
    for (k, t) in episode.iter().enumerate().rev() {
        let v = value_fn(&t.x);
        let cont = if t.done { 0.0 } else { 1.0 };
        let delta = scale * t.r + gamma * cont * value_fn(&t.x_next) - v;
        let adv = delta + gamma * lambda * cont * next_adv;
        out[k] = (adv + v, adv);
        next_adv = adv;
    }
    out
}

/// Flattened, canonically ordered update batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub obs: Vec<Vec<f64>>,
    pub raw: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub adv: Vec<f64>,
    pub ret: Vec<f64>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

impl Agent {
    /// `obs_box` normalizes states to `[-1, 1]`; actions live in
    /// `[action_lo, action_hi]`.
    pub fn new(obs_box: BoxSet, action_lo: f64, action_hi: f64, hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        if !(action_lo < action_hi) {
            return Err(Error::Config("empty action interval".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [obs_box.dim(), hyper.hidden, hyper.hidden, 1];
        let policy = PolicyParams { net: Mlp::new(&sizes, &mut rng), log_std: hyper.init_std.max(hyper.std_floor).ln() };
        let value = ValueParams { net: Mlp::new(&sizes, &mut rng) };
        let policy_opt = Adam::new(policy.net.params().len() + 1, hyper.lr);
        let value_opt = Adam::new(value.net.params().len(), hyper.lr);
        Ok(Self { policy, value, hyper, seed, obs_box, action_lo, action_hi, policy_opt, value_opt })
    }

    /// Agent acting on the CSTR: state box `0 ≤ cA ≤ 1, 345 ≤ T ≤ 355`,
    /// coolant `285 ≤ Tc ≤ 315`.
    pub fn cstr(hyper: Hyper, seed: u64) -> Result<Self> {
        Self::new(BoxSet::cstr_state(), 285.0, 315.0, hyper, seed)
    }

    pub fn obs_box(&self) -> &BoxSet {
        &self.obs_box
    }

    pub fn action_bounds(&self) -> (f64, f64) {
        (self.action_lo, self.action_hi)
    }

    pub fn std(&self) -> f64 {
        self.policy.log_std.exp()
    }

    fn to_physical(&self, a: f64) -> f64 {
        let mid = 0.5 * (self.action_lo + self.action_hi);
        let half = 0.5 * (self.action_hi - self.action_lo);
        (mid + half * a).clamp(self.action_lo, self.action_hi)
    }

    /// Policy mean in normalized action units.
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.policy.net.predict(&self.obs_box.normalize(x))[0].tanh()
    }

    pub fn value_of(&self, x: &[f64]) -> f64 {
        self.value.net.predict(&self.obs_box.normalize(x))[0]
    }

    pub fn log_prob(&self, mean: f64, raw: f64) -> f64 {
        let z = (raw - mean) / self.std();
        -0.5 * z * z - self.policy.log_std - LN_SQRT_2PI
    }

    pub fn act<R: rand::Rng + ?Sized>(&self, x: &[f64], explore: bool, rng: &mut R) -> Action {
        let mean = self.mean(x);
        let raw = if explore {
            let eps: f64 = StandardNormal.sample(rng);
            mean + self.std() * eps
        } else {
            mean
        };
        Action { u: self.to_physical(raw), raw, logprob: self.log_prob(mean, raw) }
    }

    /// Advantages, returns and normalized observations for `batch`.
    pub fn prepare(&self, batch: &[Vec<Transition>]) -> PreparedBatch {
        let h = &self.hyper;
        let mut rows: Vec<(Vec<f64>, f64, f64, f64, f64)> = Vec::new();
        for episode in batch {
            let ga = returns_with_scale(episode, h.gamma, h.gae_lambda, h.reward_scale, |x| self.value_of(x));
            for (t, (g, a)) in episode.iter().zip(ga) {
                rows.push((self.obs_box.normalize(&t.x), t.raw, t.logprob, a, g));
            }
        }
        rows.sort_by(|p, q| {
            let key = |r: &(Vec<f64>, f64, f64, f64, f64)| {
                let mut k: Vec<u64> = r.0.iter().map(|v| v.to_bits()).collect();
                k.extend([r.1.to_bits(), r.2.to_bits(), r.3.to_bits(), r.4.to_bits()]);
                k
            };
            key(p).cmp(&key(q))
        });
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.3).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.3 - mean) * (r.3 - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let mut pb = PreparedBatch { obs: Vec::new(), raw: Vec::new(), logp_old: Vec::new(), adv: Vec::new(), ret: Vec::new() };
        for (obs, raw, lp, a, g) in rows {
            pb.obs.push(obs);
            pb.raw.push(raw);
            pb.logp_old.push(lp);
            pb.adv.push(if std > 1e-8 { (a - mean) / std } else { a - mean });
            pb.ret.push(g);
        }
        pb
    }

    /// Clipped-surrogate loss, its gradient over `[net params…, log_std]`,
    /// and the sample KL estimate `mean(logp_old − logp)`.
    pub fn policy_loss_grad(&self, pb: &PreparedBatch) -> (f64, Vec<f64>, f64) {
        let np = self.policy.net.params().len();
        let mut grad = vec![0.0; np + 1];
        let n = pb.len() as f64;
        let std = self.std();
        let (lo, hi) = (1.0 - self.hyper.clip, 1.0 + self.hyper.clip);
        let (mut loss, mut kl) = (0.0, 0.0);
        for i in 0..pb.len() {
            let tape = self.policy.net.forward(&pb.obs[i]);
            let mean = tape.output()[0].tanh();
            let z = (pb.raw[i] - mean) / std;
            let logp = -0.5 * z * z - self.policy.log_std - LN_SQRT_2PI;
            let ratio = (logp - pb.logp_old[i]).exp();
            let a = pb.adv[i];
            let unclipped = ratio * a;
            let clipped = ratio.clamp(lo, hi) * a;
            loss -= unclipped.min(clipped) / n;
            kl += (pb.logp_old[i] - logp) / n;
            if unclipped <= clipped {
                // d(loss)/d(logp) for this sample
                let g = -ratio * a / n;
                let d_out = g * (z / std) * (1.0 - mean * mean);
                if d_out != 0.0 {
                    self.policy.net.backward(&tape, &[d_out], &mut grad[..np]);
                }
                grad[np] += g * (z * z - 1.0);
            }
        }
        (loss, grad, kl)
    }

    /// `½·mean((V − G)²)` and its gradient.
    pub fn value_loss_grad(&self, pb: &PreparedBatch) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.value.net.params().len()];
        let n = pb.len() as f64;
        let mut loss = 0.0;
        for i in 0..pb.len() {
            let tape = self.value.net.forward(&pb.obs[i]);
            let err = tape.output()[0] - pb.ret[i];
            loss += 0.5 * err * err / n;
            self.value.net.backward(&tape, &[err / n], &mut grad);
        }
        (loss, grad)
    }

    /// One PPO update on a batch of episodes. On a non-finite loss all
    /// parameters and optimizer state are restored and an error returned.
    pub fn update(&mut self, batch: &[Vec<Transition>]) -> Result<Losses> {
        if batch.iter().all(Vec::is_empty) {
            return Err(Error::Config("empty update batch".into()));
        }
        let snapshot = self.clone();
        let pb = self.prepare(batch);
        let floor = self.hyper.std_floor.ln();
        let mut losses = Losses::default();
        for _ in 0..self.hyper.epochs_per_update {
            let (pl, pg, kl) = self.policy_loss_grad(&pb);
            let (vl, vg) = self.value_loss_grad(&pb);
            let finite = pl.is_finite() && vl.is_finite() && pg.iter().chain(&vg).all(|g| g.is_finite());
            if !finite {
                *self = snapshot;
                return Err(Error::NonFiniteLoss(format!("policy {pl}, value {vl}")));
            }
            let mut flat = self.policy.net.params().to_vec();
            flat.push(self.policy.log_std);
            self.policy_opt.step(&mut flat, &pg);
            self.policy.log_std = flat.pop().expect("log_std").max(floor);
            self.policy.net.params_mut().copy_from_slice(&flat);
            self.value_opt.step(self.value.net.params_mut(), &vg);
            losses = Losses { policy: pl, value: vl, kl };
        }
        Ok(losses)
    }

    /// Plain-text weights: a header, then one value per line. Values are
    /// written in shortest round-trip form so reloading is bit-exact.
    /// Optimizer moments are not persisted.
    pub fn to_text(&self) -> String {
        let mut out = String::from("cisrl-agent 1\n");
        let sizes: Vec<String> = self.policy.net.sizes().iter().map(|s| s.to_string()).collect();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let h = &self.hyper;
        let _ = writeln!(out, "sizes {}", sizes.join(" "));
        let _ = writeln!(out, "log_std {:?}", self.policy.log_std);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "obs_lower {}", join(&self.obs_box.lower));
        let _ = writeln!(out, "obs_upper {}", join(&self.obs_box.upper));
        let _ = writeln!(out, "action {:?} {:?}", self.action_lo, self.action_hi);
        let _ = writeln!(
            out,
            "hyper {:?} {:?} {:?} {:?} {} {} {:?} {:?} {:?}",
            h.lr, h.gamma, h.clip, h.gae_lambda, h.epochs_per_update, h.batch_episodes, h.std_floor, h.init_std,
            h.reward_scale
        );
        for (name, net) in [("policy", &self.policy.net), ("value", &self.value.net)] {
            let _ = writeln!(out, "{name} {}", net.params().len());
            for v in net.params() {
                let _ = writeln!(out, "{v:?}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        fn next<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, tag: &str) -> Result<(usize, Vec<String>)> {
            let (i, line) = lines.next().ok_or(Error::Parse { line: 0, msg: format!("missing {tag}") })?;
            let fields: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            if fields.first().map(String::as_str) != Some(tag) {
                return Err(Error::Parse { line: i + 1, msg: format!("expected {tag}") });
            }
            Ok((i + 1, fields[1..].to_vec()))
        }
        fn nums<T: std::str::FromStr>(line: usize, f: &[String]) -> Result<Vec<T>> {
            let v: Vec<T> = f
                .iter()
                .map(|s| s.parse::<T>().map_err(|_| Error::Parse { line, msg: format!("bad number {s:?}") }))
                .collect::<Result<_>>()?;
            if v.is_empty() {
                return Err(Error::Parse { line, msg: "missing value".into() });
            }
            Ok(v)
        }
        next(&mut lines, "cisrl-agent")?;
        let (l, f) = next(&mut lines, "sizes")?;
        let sizes: Vec<usize> = nums(l, &f)?;
        let (l, f) = next(&mut lines, "log_std")?;
        let log_std = nums::<f64>(l, &f)?[0];
        let (l, f) = next(&mut lines, "seed")?;
        let seed = nums::<u64>(l, &f)?[0];
        let (l, f) = next(&mut lines, "obs_lower")?;
        let lower = nums::<f64>(l, &f)?;
        let (l, f) = next(&mut lines, "obs_upper")?;
        let upper = nums::<f64>(l, &f)?;
        let (l, f) = next(&mut lines, "action")?;
        let action = nums::<f64>(l, &f)?;
        let (l, f) = next(&mut lines, "hyper")?;
        if f.len() != 9 || action.len() != 2 || sizes.len() < 2 {
            return Err(Error::Parse { line: l, msg: "malformed header".into() });
        }
        let hf = nums::<f64>(l, &f)?;
        let hyper = Hyper {
            lr: hf[0],
            gamma: hf[1],
            clip: hf[2],
            gae_lambda: hf[3],
            epochs_per_update: hf[4] as usize,
            batch_episodes: hf[5] as usize,
            std_floor: hf[6],
            init_std: hf[7],
            reward_scale: hf[8],
            hidden: sizes[1],
        };
        let read_net = |lines: &mut std::iter::Enumerate<std::str::Lines<'_>>, tag: &str| -> Result<Mlp> {
            let (l, f) = next(lines, tag)?;
            let count = nums::<usize>(l, &f)?[0];
            let mut params = Vec::with_capacity(count);
            for _ in 0..count {
                let (i, line) = lines.next().ok_or(Error::Parse { line: l, msg: "truncated weights".into() })?;
                params.push(line.trim().parse::<f64>().map_err(|_| Error::Parse { line: i + 1, msg: "bad weight".into() })?);
            }
            Mlp::from_params(sizes.clone(), params).ok_or(Error::Parse { line: l, msg: "weight count mismatch".into() })
        };
        let policy_net = read_net(&mut lines, "policy")?;
        let value_net = read_net(&mut lines, "value")?;
        let mut agent = Agent::new(BoxSet::new(lower, upper)?, action[0], action[1], hyper, seed)?;
        agent.policy = PolicyParams { net: policy_net, log_std };
        agent.value = ValueParams { net: value_net };
        Ok(agent)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Snapshot that reuses these weights and resets optimizer moments.
    pub fn fresh_optimizers(&self) -> Self {
        let mut a = self.clone();
        a.policy_opt = Adam::new(a.policy.net.params().len() + 1, a.hyper.lr);
        a.value_opt = Adam::new(a.value.net.params().len(), a.hyper.lr);
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn agent(seed: u64) -> Agent {
        Agent::cstr(Hyper::default(), seed).unwrap()
    }

    fn tr(x: Vec<f64>, raw: f64, logprob: f64, r: f64, done: bool) -> Transition {
        Transition { x_next: x.clone(), x, u: 300.0, raw, r, logprob, done }
    }

    #[test]
    fn actions_stay_in_bounds() {
        let a = agent(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x = vec![rng.gen_range(-1.0..2.0), rng.gen_range(300.0..400.0)];
            let act = a.act(&x, true, &mut rng);
            assert!((285.0..=315.0).contains(&act.u));
        }
    }

    #[test]
    fn greedy_is_deterministic_and_seeded_sampling_repeats() {
        let a = agent(1);
        let x = [0.5, 350.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.act(&x, false, &mut rng), a.act(&x, false, &mut rng));
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| a.act(&x, true, &mut rng).u).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn returns_examples() {
        let x = vec![0.5, 350.0];
        let one = returns_and_advantages(&[tr(x.clone(), 0.0, 0.0, 1.0, true)], 0.99, 0.95, |_| 0.0);
        assert_eq!(one[0].0, 1.0);
        let two = [tr(x.clone(), 0.0, 0.0, 1.0, false), tr(x.clone(), 0.0, 0.0, 1.0, true)];
        let ga = returns_and_advantages(&two, 0.5, 1.0, |_| 0.0);
        assert_eq!((ga[0].0, ga[1].0), (1.5, 1.0));
        // λ = 0 reduces to the one-step TD residual
        let v = |x: &[f64]| 0.1 * x[0] + 0.01 * x[1];
        let mut ep = two.to_vec();
        ep[0].x_next = vec![0.4, 351.0];
        let ga = returns_and_advantages(&ep, 0.9, 0.0, v);
        assert_eq!(ga[0].1, 1.0 + 0.9 * v(&[0.4, 351.0]) - v(&x));
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let mut a = agent(3);
        // critic that outputs exactly 0 everywhere, constant zero rewards
        a.value.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let ep: Vec<Transition> =
            (0..5).map(|i| tr(vec![0.3 + 0.1 * i as f64, 350.0], 0.1 * i as f64, -0.5, 0.0, false)).collect();
        let pb = a.prepare(&[ep]);
        let (_, g, _) = a.policy_loss_grad(&pb);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "{norm}");
    }

    #[test]
    fn weights_roundtrip_bit_exact() {
        let a = agent(5);
        let b = Agent::parse(&a.to_text()).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.value, b.value);
        assert_eq!(a.hyper, b.hyper);
        assert!(Agent::parse("cisrl-agent 1\nsizes 2 3\n").is_err());
    }

    #[test]
    fn non_finite_update_restores_weights() {
        let mut a = agent(4);
        let before = a.clone();
        let ep = vec![tr(vec![0.5, 350.0], 0.0, 0.0, f64::NAN, false), tr(vec![0.4, 350.0], 0.1, 0.0, 1.0, false)];
        assert!(matches!(a.update(&[ep]), Err(Error::NonFiniteLoss(_))));
        assert_eq!(a, before);
    }
}
