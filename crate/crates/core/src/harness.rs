//! Experiment orchestration behind the command-line tool.
//!
//! Every command reads a `key=value` configuration, writes UTF-8 CSV files
//! and a `summary.json` into the output directory, and is deterministic
//! given its configuration and seed. Wall-clock measurements go to separate
//! `timing*` files so the remaining outputs stay byte-identical on rerun.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::agent::{Agent, Hyper};
use crate::cis_synth::{
    extract_polytope, linspace, load_set_file, save_set_file, synthesize, BackupTable, Grid, GriddedSet,
    InvarianceReport, SynthesisTrace, VerifyOptions,
};
use crate::dynamics::{steady_state, ControlInput, Cstr, ModelParams, Plant, State};
use crate::error::{Error, Result};
use crate::geometry::{BoxSet, HPolytope};
use crate::kv::KvMap;
use crate::rewards::{economic_stage, episode_economics, zone_penalty_total, RewardSpec};
use crate::supervisor::{run_online, Backup, OnlineMetrics, SupervisorConfig};
use crate::training::{shared_initial_states, states_hash, test_policy, train_offline, TrainConfig, TrainOutcome};

/// Keys accepted in experiment configuration files.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "grid",
    "inputs",
    "verify_samples",
    "polytope",
    "set_file",
    "seeds",
    "episodes",
    "steps",
    "batch_episodes",
    "test_episodes",
    "test_seed",
    "online_episodes",
    "max_itr",
    "retrain_samples",
    "check",
    "agent",
    "econ_episodes",
    "econ_train_episodes",
    "ssopt_step",
    "ssopt_constraint",
    "lr",
    "init_std",
    "std_floor",
    "reward_scale",
    "offline_worst_case",
    "reward",
    "r1",
    "r2",
    "volume",
    "xs_ca",
    "xs_t",
    "norm_p",
    "exp_q",
    "zone_lo",
    "zone_hi",
    "zone_weight",
];

#[derive(Debug, Clone)]
pub struct Settings {
    pub params: ModelParams,
    pub grid: usize,
    pub inputs: usize,
    pub verify_samples: usize,
    pub polytope: Option<PathBuf>,
    pub set_file: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub steps: usize,
    pub batch_episodes: usize,
    pub test_episodes: usize,
    pub test_seed: u64,
    pub online_episodes: Option<usize>,
    pub max_itr: Option<usize>,
    pub retrain_samples: usize,
    pub worst_case_check: bool,
    pub agent: Option<PathBuf>,
    pub econ_episodes: usize,
    pub econ_train_episodes: usize,
    pub ssopt_step: f64,
    pub ssopt_box: bool,
    pub hyper: Hyper,
    pub offline_worst_case: bool,
    pub reward: RewardSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Self::from_kv(&KvMap::default()).expect("defaults are valid")
    }
}

impl Settings {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(CONFIG_KEYS)?;
        let params = match kv.get_str("model") {
            Some(p) => ModelParams::load(p)?,
            None => ModelParams::default(),
        };
        let mut hyper = Hyper::default();
        hyper.lr = kv.get_or("lr", hyper.lr)?;
        hyper.init_std = kv.get_or("init_std", hyper.init_std)?;
        hyper.std_floor = kv.get_or("std_floor", hyper.std_floor)?;
        hyper.reward_scale = kv.get_or("reward_scale", hyper.reward_scale)?;
        hyper.batch_episodes = kv.get_or("batch_episodes", hyper.batch_episodes)?;
        let max_itr = match kv.get_str("max_itr") {
            None => Some(20),
            Some("inf") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::Config(format!("bad max_itr {v:?}")))?),
        };
        let worst_case_check = match kv.get_str("check").unwrap_or("worst_case") {
            "worst_case" => true,
            "nominal" => false,
            other => return Err(Error::Config(format!("check must be worst_case or nominal, got {other:?}"))),
        };
        let ssopt_box = match kv.get_str("ssopt_constraint").unwrap_or("polytope") {
            "polytope" => false,
            "box" => true,
            other => return Err(Error::Config(format!("ssopt_constraint must be polytope or box, got {other:?}"))),
        };
        let seeds: Vec<u64> = kv.get_list("seeds")?.unwrap_or_else(|| vec![0, 1, 2]);
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() || seeds.is_empty() {
            return Err(Error::Config("seeds must be a nonempty list of distinct values".into()));
        }
        let s = Self {
            params,
            grid: kv.get_or("grid", 200)?,
            inputs: kv.get_or("inputs", 61)?,
            verify_samples: kv.get_or("verify_samples", 10_000)?,
            polytope: kv.get_str("polytope").map(PathBuf::from),
            set_file: kv.get_str("set_file").map(PathBuf::from),
            seeds,
            episodes: kv.get_or("episodes", 2_000)?,
            steps: kv.get_or("steps", 200)?,
            batch_episodes: hyper.batch_episodes,
            test_episodes: kv.get_or("test_episodes", 1_000)?,
            test_seed: kv.get_or("test_seed", 12_345)?,
            online_episodes: kv.get("online_episodes")?,
            max_itr,
            retrain_samples: kv.get_or("retrain_samples", 10)?,
            worst_case_check,
            agent: kv.get_str("agent").map(PathBuf::from),
            econ_episodes: kv.get_or("econ_episodes", 500)?,
            econ_train_episodes: kv.get_or("econ_train_episodes", 2_000)?,
            ssopt_step: kv.get_or("ssopt_step", 0.05)?,
            ssopt_box,
            hyper,
            offline_worst_case: kv.get_or("offline_worst_case", true)?,
            reward: RewardSpec::from_kv(kv)?,
        };
        for path in [&s.polytope, &s.set_file, &s.agent].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", path.display())));
            }
        }
        hyper.validate()?;
        Ok(s)
    }

    pub fn plant(&self) -> Cstr {
        Cstr::new(self.params)
    }

    pub fn u_grid(&self) -> Vec<f64> {
        linspace(285.0, 315.0, self.inputs)
    }
}

/// Global options shared by all commands.
#[derive(Debug, Clone)]
pub struct Context {
    pub settings: Settings,
    pub out: PathBuf,
    pub seed: u64,
    pub robust: bool,
}

impl Context {
    pub fn new(settings: Settings, out: impl Into<PathBuf>, seed: u64, robust: bool) -> Result<Self> {
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { settings, out, seed, robust })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        Ok(fs::write(self.path(name), contents)?)
    }

    fn write_json(&self, name: &str, value: &Value) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn set_prefix(&self) -> &'static str {
        if self.robust {
            "rcis"
        } else {
            "cis"
        }
    }
}

/// A synthesized set with everything the supervisor needs.
#[derive(Debug, Clone)]
pub struct SetBundle {
    pub set: GriddedSet,
    pub table: BackupTable,
    pub polytope: HPolytope,
    pub factor: f64,
    pub report: InvarianceReport,
    pub trace: SynthesisTrace,
}

impl SetBundle {
    pub fn backup(&self, u_grid: Vec<f64>) -> Backup {
        Backup { set: self.set.clone(), table: self.table.clone(), u_grid }
    }
}

pub fn w_vertices(robust: bool) -> Vec<Vec<f64>> {
    if robust {
        BoxSet::cstr_disturbance().vertices()
    } else {
        Vec::new()
    }
}

/// Kernel synthesis followed by polytope extraction.
pub fn synth_bundle(plant: &dyn Plant, settings: &Settings, robust: bool, verify_seed: u64) -> Result<SetBundle> {
    let grid = Grid::new(BoxSet::cstr_state(), vec![settings.grid, settings.grid])?;
    let u = settings.u_grid();
    let w = w_vertices(robust);
    let syn = synthesize(plant, &u, &w, &grid)?;
    let opts = VerifyOptions { samples: settings.verify_samples, seed: verify_seed, ..VerifyOptions::default() };
    let ex = extract_polytope(&syn.set, plant, &u, &w, opts)?;
    Ok(SetBundle {
        set: syn.set,
        table: syn.table,
        polytope: ex.polytope,
        factor: ex.factor,
        report: ex.report,
        trace: syn.trace,
    })
}

fn trace_csv(trace: &SynthesisTrace) -> String {
    let mut out = String::from("iteration,removed,members\n");
    for (i, (r, m)) in trace.removed.iter().zip(&trace.member_counts).enumerate() {
        let _ = writeln!(out, "{},{},{}", i + 1, r, m);
    }
    out
}

fn bundle_json(b: &SetBundle) -> Result<Value> {
    let bb = b.polytope.bounding_box()?;
    Ok(json!({
        "cells": b.set.count(),
        "iterations": b.trace.removed.len(),
        "shrink_factor": b.factor,
        "rows": b.polytope.num_constraints(),
        "verify_samples": b.report.samples,
        "counterexamples": b.report.counterexamples.len(),
        "polytope_lower": bb.lower,
        "polytope_upper": bb.upper,
    }))
}

/// Synthesizes the deterministic and robust sets and writes, per set, the
/// gridded set with backup table, the polytope, the verification report
/// and the removal trace.
pub fn cmd_synth(ctx: &Context) -> Result<Value> {
    let plant = ctx.settings.plant();
    let det = synth_bundle(&plant, &ctx.settings, false, ctx.seed)?;
    let rob = synth_bundle(&plant, &ctx.settings, true, ctx.seed)?;
    for (prefix, b) in [("cis", &det), ("rcis", &rob)] {
        save_set_file(ctx.path(&format!("{prefix}_set.txt")), &b.set, &b.table)?;
        b.polytope.save(ctx.path(&format!("{prefix}_polytope.txt")))?;
        ctx.write(&format!("{prefix}_report.txt"), &b.report.to_text())?;
        ctx.write(&format!("{prefix}_trace.csv"), &trace_csv(&b.trace))?;
    }
    let summary = json!({
        "command": "synth",
        "seed": ctx.seed,
        "cis": bundle_json(&det)?,
        "rcis": bundle_json(&rob)?,
        "rcis_subset_of_cis": rob.set.is_subset_of(&det.set),
    });
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Loads the set selected by `--robust` from the configured files or the
/// output directory, synthesizing it if absent.
pub fn load_bundle(ctx: &Context) -> Result<SetBundle> {
    let prefix = ctx.set_prefix();
    let poly_path = ctx.settings.polytope.clone().unwrap_or_else(|| ctx.path(&format!("{prefix}_polytope.txt")));
    let set_path = ctx.settings.set_file.clone().unwrap_or_else(|| ctx.path(&format!("{prefix}_set.txt")));
    if poly_path.exists() && set_path.exists() {
        let (set, table) = load_set_file(&set_path)?;
        return Ok(SetBundle {
            set,
            table,
            polytope: HPolytope::load(&poly_path)?,
            factor: f64::NAN,
            report: InvarianceReport { samples: 0, counterexamples: Vec::new() },
            trace: SynthesisTrace::default(),
        });
    }
    let b = synth_bundle(&ctx.settings.plant(), &ctx.settings, ctx.robust, ctx.seed)?;
    save_set_file(&set_path, &b.set, &b.table)?;
    b.polytope.save(&poly_path)?;
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Variant {
    WithSet,
    NoSet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::WithSet => "cis",
            Variant::NoSet => "nocis",
        }
    }
}

/// Training configuration for one campaign run. The no-set ablation
/// samples, gates and resets on the state box.
pub fn train_config(settings: &Settings, poly: &HPolytope, variant: Variant, robust: bool, seed: u64) -> TrainConfig {
    let set = match variant {
        Variant::WithSet => poly.clone(),
        Variant::NoSet => BoxSet::cstr_state().to_polytope(),
    };
    let mut cfg = TrainConfig::new(set, settings.reward, seed);
    cfg.episodes = settings.episodes;
    cfg.steps_per_episode = settings.steps;
    cfg.batch_episodes = settings.batch_episodes;
    cfg.robust = robust;
    cfg.offline_worst_case = settings.offline_worst_case;
    cfg.hyper = settings.hyper;
    cfg
}

/// Independent training runs on the worker pool, results in job order.
pub fn train_pool(plant: &dyn Plant, jobs: &[TrainConfig]) -> Result<Vec<TrainOutcome>> {
    jobs.par_iter().map(|cfg| train_offline(plant, cfg)).collect()
}

fn agent_file(variant: Variant, seed: u64) -> String {
    format!("agent_{}_seed{}.txt", variant.name(), seed)
}

fn first_and_final(out: &TrainOutcome) -> (f64, f64) {
    let c = &out.curve;
    let head = &c.scores[..c.len().min(100)];
    let first = if head.is_empty() { f64::NAN } else { head.iter().sum::<f64>() / head.len() as f64 };
    (first, c.running.last().copied().unwrap_or(f64::NAN))
}

/// Trains every seed with and without the safe set.
pub fn cmd_train(ctx: &Context) -> Result<Value> {
    let plant = ctx.settings.plant();
    let bundle = load_bundle(ctx)?;
    let mut jobs = Vec::new();
    let mut labels = Vec::new();
    for &seed in &ctx.settings.seeds {
        for variant in [Variant::WithSet, Variant::NoSet] {
            jobs.push(train_config(&ctx.settings, &bundle.polytope, variant, ctx.robust, seed));
            labels.push((variant, seed));
        }
    }
    let outcomes = train_pool(&plant, &jobs)?;
    let mut runs = Vec::new();
    for ((variant, seed), out) in labels.iter().zip(&outcomes) {
        ctx.write(&format!("curve_{}_seed{}.csv", variant.name(), seed), &out.curve.to_csv())?;
        out.agent.save(ctx.path(&agent_file(*variant, *seed)))?;
        let (first, last) = first_and_final(out);
        runs.push(json!({
            "variant": variant.name(),
            "seed": seed,
            "episodes": out.curve.len(),
            "first100_mean_score": first,
            "final_running_avg": last,
            "aborted": out.aborted,
        }));
    }
    let summary = json!({ "command": "train", "robust": ctx.robust, "runs": runs });
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn test_disturbance(robust: bool) -> Option<BoxSet> {
    robust.then(BoxSet::cstr_disturbance)
}

/// Failure rate of each trained agent on one shared initial-state list.
pub fn cmd_test(ctx: &Context) -> Result<Value> {
    let plant = ctx.settings.plant();
    let bundle = load_bundle(ctx)?;
    let initial = shared_initial_states(&bundle.polytope, ctx.settings.test_episodes, ctx.settings.test_seed)?;
    let hash = format!("{:016x}", states_hash(&initial));
    let w = test_disturbance(ctx.robust);
    let mut csv = String::from("variant,seed,failure_rate,mean_score\n");
    let mut means: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for &seed in &ctx.settings.seeds {
        for variant in [Variant::WithSet, Variant::NoSet] {
            let path = ctx.path(&agent_file(variant, seed));
            if !path.exists() {
                return Err(Error::Config(format!("{} not found; run train first", path.display())));
            }
            let agent = Agent::load(&path)?;
            let r = test_policy(&plant, &agent, &bundle.polytope, &initial, ctx.settings.steps, &ctx.settings.reward, w.as_ref(), seed)?;
            let _ = writeln!(csv, "{},{},{:?},{:?}", variant.name(), seed, r.failure_rate, r.mean_score);
            means.entry(variant.name()).or_default().push(r.failure_rate);
        }
    }
    ctx.write("failure_rates.csv", &csv)?;
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let summary = json!({
        "command": "test",
        "robust": ctx.robust,
        "initial_states": initial.len(),
        "initial_states_hash": hash,
        "mean_failure_rate": means.iter().map(|(k, v)| (k.to_string(), json!(mean(v)))).collect::<serde_json::Map<_, _>>(),
    });
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

pub fn supervisor_config(settings: &Settings, robust_check: bool) -> SupervisorConfig {
    SupervisorConfig {
        max_itr: settings.max_itr,
        retrain_samples: settings.retrain_samples,
        robust: robust_check,
        w: BoxSet::cstr_disturbance(),
        reward: settings.reward,
    }
}

fn online_json(m: &OnlineMetrics) -> Value {
    json!({
        "episodes": m.episodes,
        "steps": m.steps.len(),
        "violations": m.violations,
        "failed_episodes": m.failed_episodes,
        "fallback_count": m.fallback_count,
        "updates_total": m.updates_total,
    })
}

/// Supervised episodes with a trained agent. `--robust` adds uniform
/// disturbances and the robust set; `check=nominal` gives the naive
/// supervisor that ignores them.
pub fn cmd_online(ctx: &Context) -> Result<Value> {
    let s = &ctx.settings;
    let plant = s.plant();
    let bundle = load_bundle(ctx)?;
    let agent_path = s.agent.clone().unwrap_or_else(|| ctx.path(&agent_file(Variant::WithSet, ctx.seed)));
    let mut agent = if agent_path.exists() {
        Agent::load(&agent_path)?
    } else {
        return Err(Error::Config(format!("{} not found; run train first or set agent=", agent_path.display())));
    };
    let episodes = s.online_episodes.unwrap_or(if ctx.robust { 300 } else { 500 });
    let initial = shared_initial_states(&bundle.polytope, episodes, ctx.seed)?;
    let tests = shared_initial_states(&bundle.polytope, s.test_episodes, s.test_seed)?;
    let w = test_disturbance(ctx.robust);
    let pre = test_policy(&plant, &agent, &bundle.polytope, &tests, s.steps, &s.reward, w.as_ref(), ctx.seed)?;
    let cfg = supervisor_config(s, ctx.robust && s.worst_case_check);
    let backup = bundle.backup(s.u_grid());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    rng.set_stream(4);
    let start = Instant::now();
    let metrics = run_online(&plant, &bundle.polytope, &mut agent, &initial, s.steps, &cfg, &backup, w.as_ref(), &mut rng);
    let wall = start.elapsed().as_secs_f64();
    let metrics = match metrics {
        Ok(m) => m,
        Err(e) => {
            ctx.write_json("summary.json", &json!({ "command": "online", "error": e.to_string() }))?;
            return Err(e);
        }
    };
    let post = test_policy(&plant, &agent, &bundle.polytope, &tests, s.steps, &s.reward, w.as_ref(), ctx.seed)?;
    ctx.write("steps.csv", &metrics.step_csv())?;
    ctx.write("timing.csv", &metrics.timing_csv())?;
    agent.save(ctx.path("agent_online.txt"))?;
    let (checks, updates) = (metrics.check_us(), metrics.update_us());
    ctx.write_json(
        "timing.json",
        &json!({
            "wall_seconds": wall,
            "check_us_median": quantile(&checks, 0.5),
            "check_us_p99": quantile(&checks, 0.99),
            "update_us_median": quantile(&updates, 0.5),
            "checks": checks.len(),
            "updates": updates.len(),
        }),
    )?;
    let mut summary = online_json(&metrics);
    let map = summary.as_object_mut().expect("object");
    map.insert("command".into(), json!("online"));
    map.insert("robust".into(), json!(ctx.robust));
    map.insert("worst_case_check".into(), json!(cfg.robust));
    map.insert("failure_rate_before".into(), json!(pre.failure_rate));
    map.insert("failure_rate_after".into(), json!(post.failure_rate));
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Lowers `r2` below the smallest inside reward over `samples` set points
/// when the configured value does not separate them.
pub fn separated_reward(spec: RewardSpec, poly: &HPolytope, samples: usize, seed: u64) -> Result<RewardSpec> {
    let points = shared_initial_states(poly, samples, seed)?;
    let states: Vec<State> = points.iter().map(|p| State::from_slice(p)).collect::<Result<_>>()?;
    match spec.check_separation(states.iter().copied()) {
        Ok(_) => Ok(spec),
        Err(_) => {
            let min = states.iter().map(|x| spec.inside_value(*x)).fold(f64::INFINITY, f64::min);
            Ok(RewardSpec { r2: (min + spec.r2.min(-1.0)).floor(), ..spec })
        }
    }
}

pub const ECON_AGENTS: [&str; 3] = ["invariance", "economic", "economic_zone"];

fn econ_spec(name: &str, volume: f64) -> RewardSpec {
    let mut s = match name {
        "economic" => RewardSpec::economic(),
        "economic_zone" => RewardSpec::economic_zone(),
        _ => RewardSpec::invariance(),
    };
    s.volume = volume;
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EconEpisode {
    pub le: [f64; 3],
    pub zone: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct EconResult {
    pub specs: Vec<RewardSpec>,
    pub episodes: Vec<EconEpisode>,
    pub metrics: Vec<OnlineMetrics>,
}

impl EconResult {
    pub fn mean_le(&self, agent: usize) -> f64 {
        self.episodes.iter().map(|e| e.le[agent]).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_zone(&self, agent: usize) -> f64 {
        self.episodes.iter().map(|e| e.zone[agent]).sum::<f64>() / self.episodes.len() as f64
    }
}

/// Economic comparison: one robustly trained agent per reward variant,
/// each run under the robust supervisor from the same initial states with
/// the same disturbance stream. `agents` may supply pretrained agents.
pub fn econ_compare(
    plant: &dyn Plant,
    settings: &Settings,
    bundle: &SetBundle,
    episodes: usize,
    seed: u64,
    agents: Option<Vec<Agent>>,
) -> Result<(EconResult, Vec<Agent>)> {
    let specs: Vec<RewardSpec> = ECON_AGENTS
        .iter()
        .map(|n| separated_reward(econ_spec(n, settings.params.volume), &bundle.polytope, 10_000, seed))
        .collect::<Result<_>>()?;
    let trained = match agents {
        Some(a) => a,
        None => {
            let jobs: Vec<TrainConfig> = specs
                .iter()
                .map(|spec| {
                    let mut s = settings.clone();
                    s.reward = *spec;
                    s.episodes = settings.econ_train_episodes;
                    train_config(&s, &bundle.polytope, Variant::WithSet, true, seed)
                })
                .collect();
            train_pool(plant, &jobs)?.into_iter().map(|o| o.agent).collect()
        }
    };
    let initial = shared_initial_states(&bundle.polytope, episodes, seed ^ 0x5eed)?;
    let backup = bundle.backup(settings.u_grid());
    let w = BoxSet::cstr_disturbance();
    let metrics: Vec<OnlineMetrics> = trained
        .par_iter()
        .zip(&specs)
        .map(|(agent, spec)| {
            let mut a = agent.clone();
            let mut cfg = supervisor_config(settings, true);
            cfg.reward = *spec;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(5);
            run_online(plant, &bundle.polytope, &mut a, &initial, settings.steps, &cfg, &backup, Some(&w), &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut eps = vec![EconEpisode { le: [0.0; 3], zone: [0.0; 3] }; initial.len()];
    for (a, m) in metrics.iter().enumerate() {
        for (e, traj) in realized_trajectories(m).into_iter().enumerate() {
            eps[e].le[a] = episode_economics(&traj, settings.params.volume)?;
            eps[e].zone[a] = zone_penalty_total(&traj);
        }
    }
    Ok((EconResult { specs, episodes: eps, metrics }, trained))
}

/// Realized states `x_1 … x_K` of every episode.
pub fn realized_trajectories(m: &OnlineMetrics) -> Vec<Vec<State>> {
    let mut out = vec![Vec::new(); m.episodes];
    for s in &m.steps {
        if let Ok(x) = State::from_slice(&s.x_next) {
            out[s.episode].push(x);
        }
    }
    out
}

pub fn econ_csv(r: &EconResult) -> String {
    let mut out = String::from("episode,le_invariance,le_economic,le_economic_zone,zone_invariance,zone_economic,zone_economic_zone\n");
    for (i, e) in r.episodes.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            i, e.le[0], e.le[1], e.le[2], e.zone[0], e.zone[1], e.zone[2]
        );
    }
    out
}

fn econ_trajectories_csv(r: &EconResult, episode: usize) -> String {
    let mut out = String::from("agent,k,ca,t\n");
    for (a, m) in r.metrics.iter().enumerate() {
        for s in m.steps.iter().filter(|s| s.episode == episode) {
            let _ = writeln!(out, "{},{},{:?},{:?}", ECON_AGENTS[a], s.k + 1, s.x_next[0], s.x_next[1]);
        }
    }
    out
}

fn econ_summary(r: &EconResult) -> Value {
    let per = |f: &dyn Fn(usize) -> f64| {
        ECON_AGENTS.iter().enumerate().map(|(i, n)| (n.to_string(), json!(f(i)))).collect::<serde_json::Map<_, _>>()
    };
    let beats = |a: usize| r.episodes.iter().filter(|e| e.le[a] > e.le[0]).count();
    json!({
        "command": "econ",
        "episodes": r.episodes.len(),
        "mean_le": per(&|i| r.mean_le(i)),
        "mean_zone_penalty": per(&|i| r.mean_zone(i)),
        "violations": per(&|i| r.metrics[i].violations as f64),
        "r2": per(&|i| r.specs[i].r2),
        "episodes_beating_invariance": { "economic": beats(1), "economic_zone": beats(2) },
    })
}

/// Trains (or loads) the three reward variants and compares their economics
/// on matched robust online episodes.
pub fn cmd_econ(ctx: &Context) -> Result<Value> {
    let s = &ctx.settings;
    let plant = s.plant();
    let robust_ctx = Context { robust: true, ..ctx.clone() };
    let bundle = load_bundle(&robust_ctx)?;
    let paths: Vec<PathBuf> = ECON_AGENTS.iter().map(|n| ctx.path(&format!("econ_agent_{n}.txt"))).collect();
    let pretrained = if paths.iter().all(|p| p.exists()) {
        Some(paths.iter().map(Agent::load).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let (r, agents) = econ_compare(&plant, s, &bundle, s.econ_episodes, ctx.seed, pretrained)?;
    for (a, p) in agents.iter().zip(&paths) {
        a.save(p)?;
    }
    ctx.write("econ.csv", &econ_csv(&r))?;
    ctx.write("econ_trajectories.csv", &econ_trajectories_csv(&r, 0))?;
    let summary = econ_summary(&r);
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyOptimum {
    pub x_s: [f64; 2],
    pub u_s: f64,
    pub l_e: f64,
    pub residual: f64,
    pub feasible_points: usize,
}

pub fn steady_residual(params: &ModelParams, x: State, u: f64) -> Result<f64> {
    let next = crate::dynamics::nominal_step(params, x, ControlInput::new(u))?;
    Ok((next.ca - x.ca).abs().max((next.t - x.t).abs()))
}

/// Steady states over an input grid (several Newton starts per input),
/// filtered by `constraint`; returns the most economic one.
pub fn steady_state_optimum(params: &ModelParams, constraint: &HPolytope, step: f64) -> Result<SteadyOptimum> {
    if !(step > 0.0) {
        return Err(Error::Config("ssopt_step must be positive".into()));
    }
    let n = ((315.0 - 285.0) / step).round() as usize;
    let guesses = [(0.9, 345.0), (0.6, 350.0), (0.4, 355.0), (0.2, 360.0), (0.05, 380.0)];
    let mut best: Option<SteadyOptimum> = None;
    let mut feasible = 0;
    for i in 0..=n {
        let u = (285.0 + i as f64 * step).min(315.0);
        let mut found: Vec<State> = Vec::new();
        for (ca, t) in guesses {
            let Ok(x) = steady_state(params, ControlInput::new(u), State::new(ca, t)) else { continue };
            if found.iter().any(|f| (f.ca - x.ca).abs() < 1e-7 && (f.t - x.t).abs() < 1e-5) {
                continue;
            }
            found.push(x);
            if !constraint.contains(&x.to_vec())? {
                continue;
            }
            let residual = steady_residual(params, x, u)?;
            if residual > 1e-9 {
                continue;
            }
            feasible += 1;
            let l_e = economic_stage(x, params.volume);
            if best.as_ref().map_or(true, |b| l_e > b.l_e) {
                best = Some(SteadyOptimum { x_s: [x.ca, x.t], u_s: u, l_e, residual, feasible_points: 0 });
            }
        }
    }
    let mut b = best.ok_or(Error::NoFeasibleSteadyState)?;
    b.feasible_points = feasible;
    Ok(b)
}

pub fn cmd_ssopt(ctx: &Context) -> Result<Value> {
    let constraint = if ctx.settings.ssopt_box { BoxSet::cstr_state().to_polytope() } else { load_bundle(ctx)?.polytope };
    let opt = steady_state_optimum(&ctx.settings.params, &constraint, ctx.settings.ssopt_step)?;
    let mut summary = serde_json::to_value(&opt)?;
    let map = summary.as_object_mut().expect("object");
    map.insert("command".into(), json!("ssopt"));
    map.insert("constraint".into(), json!(if ctx.settings.ssopt_box { "box" } else { ctx.set_prefix() }));
    ctx.write_json("summary.json", &summary)?;
    Ok(summary)
}

fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split(',')
                .map(|v| v.parse::<f64>().map_err(|_| Error::Parse { line: i + 2, msg: format!("bad value {v:?}") }))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::LogMismatch(format!("missing column {name}")))
}

/// Re-derives summary metrics from the logs in the output directory and
/// checks them against `summary.json`.
pub fn cmd_verify_logs(ctx: &Context) -> Result<Value> {
    let summary: Value = serde_json::from_str(&fs::read_to_string(ctx.path("summary.json"))?)?;
    let mut checked = Vec::new();
    let expect = |key: &str, derived: f64, checked: &mut Vec<String>| -> Result<()> {
        let stored = summary.get(key).and_then(Value::as_f64).ok_or_else(|| Error::LogMismatch(format!("summary lacks {key}")))?;
        if (stored - derived).abs() > 1e-9 * (1.0 + stored.abs()) {
            return Err(Error::LogMismatch(format!("{key}: summary {stored}, logs {derived}")));
        }
        checked.push(key.to_string());
        Ok(())
    };
    match summary.get("command").and_then(Value::as_str) {
        Some("online") => {
            let (h, rows) = parse_csv(&fs::read_to_string(ctx.path("steps.csv"))?)?;
            let (ep, inside, fb, upd) =
                (column(&h, "episode")?, column(&h, "inside_next")?, column(&h, "fallback")?, column(&h, "updates_used")?);
            let violations = rows.iter().filter(|r| r[inside] == 0.0).count();
            let mut failed: Vec<usize> = rows.iter().filter(|r| r[inside] == 0.0).map(|r| r[ep] as usize).collect();
            failed.dedup();
            expect("steps", rows.len() as f64, &mut checked)?;
            expect("violations", violations as f64, &mut checked)?;
            expect("failed_episodes", failed.len() as f64, &mut checked)?;
            expect("fallback_count", rows.iter().map(|r| r[fb]).sum(), &mut checked)?;
            expect("updates_total", rows.iter().map(|r| r[upd]).sum(), &mut checked)?;
            let poly = load_bundle(ctx)?.polytope;
            let (ca, t) = (column(&h, "ca_next")?, column(&h, "t_next")?);
            for r in &rows {
                if poly.contains(&[r[ca], r[t]])? != (r[inside] == 1.0) {
                    return Err(Error::LogMismatch(format!("membership flag disagrees at ({}, {})", r[ca], r[t])));
                }
            }
            checked.push("inside_next".into());
        }
        Some("econ") => {
            let (h, rows) = parse_csv(&fs::read_to_string(ctx.path("econ.csv"))?)?;
            for name in ECON_AGENTS {
                let c = column(&h, &format!("le_{name}"))?;
                let derived = rows.iter().map(|r| r[c]).sum::<f64>() / rows.len() as f64;
                let stored = summary["mean_le"][name].as_f64().ok_or_else(|| Error::LogMismatch("mean_le".into()))?;
                if (stored - derived).abs() > 1e-9 * stored.abs().max(1.0) {
                    return Err(Error::LogMismatch(format!("mean_le.{name}: summary {stored}, logs {derived}")));
                }
                checked.push(format!("mean_le.{name}"));
            }
        }
        Some("test") => {
            let (h, rows) = parse_csv_with_labels(&fs::read_to_string(ctx.path("failure_rates.csv"))?)?;
            let fr = column(&h, "failure_rate")?;
            for variant in ["cis", "nocis"] {
                let v: Vec<f64> = rows.iter().filter(|(l, _)| l == variant).map(|(_, r)| r[fr]).collect();
                let derived = v.iter().sum::<f64>() / v.len() as f64;
                let stored = summary["mean_failure_rate"][variant].as_f64().ok_or_else(|| Error::LogMismatch("mean_failure_rate".into()))?;
                if (stored - derived).abs() > 1e-12 {
                    return Err(Error::LogMismatch(format!("mean_failure_rate.{variant}: summary {stored}, logs {derived}")));
                }
                checked.push(format!("mean_failure_rate.{variant}"));
            }
        }
        other => return Err(Error::LogMismatch(format!("no log verification for command {other:?}"))),
    }
    Ok(json!({ "command": "verify-logs", "verified": checked }))
}

/// CSV whose first column is a text label.
fn parse_csv_with_labels(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<f64>)>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = l.split(',');
        let label = fields.next().unwrap_or("").to_string();
        let mut vals = vec![f64::NAN];
        for v in fields {
            vals.push(v.parse().map_err(|_| Error::Parse { line: i + 2, msg: format!("bad value {v:?}") })?);
        }
        rows.push((label, vals));
    }
    Ok((header, rows))
}
