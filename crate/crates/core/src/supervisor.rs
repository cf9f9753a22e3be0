//! Online safety supervisor: action vetting, bounded retraining at the held
//! state, and certified backup fallback.
//!
//! The robust check maximizes the polytope margin of the successor over the
//! disturbance box. For a map affine in `w` the maximum of each row is a
//! box-constrained linear program with a closed-form solution, so the exact
//! optimum is the largest row value. Vertex enumeration and a dense grid
//! are kept as independent oracles.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;

use crate::agent::{Agent, Transition};
use crate::cis_synth::{backup_lookup, linspace, BackupTable, GriddedSet};
use crate::dynamics::{apply_gain, Plant, State};
use crate::error::{Error, Result};
use crate::geometry::{BoxSet, HPolytope};
use crate::rewards::{reward, RewardSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseResult {
    pub j_star: f64,
    pub w_star: Vec<f64>,
    pub active_row: usize,
}

fn check_dims(plant: &dyn Plant, poly: &HPolytope, x: &[f64], w: &BoxSet) -> Result<()> {
    let n = plant.state_dim();
    if x.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x.len() });
    }
    if poly.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: poly.dim() });
    }
    if w.dim() != plant.disturbance_dim() {
        return Err(Error::DimensionMismatch { expected: plant.disturbance_dim(), got: w.dim() });
    }
    Ok(())
}

fn disturbed(plant: &dyn Plant, base: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = base.to_vec();
    apply_gain(plant.gain(), w, &mut y);
    y
}

/// Exact `max_{w ∈ W} max_i (A_i·(Φ(x,u) + G·w) − b_i)`. Ties go to the
/// lowest row index.
pub fn worst_case_margin(plant: &dyn Plant, poly: &HPolytope, x: &[f64], u: f64, w: &BoxSet) -> Result<WorstCaseResult> {
    check_dims(plant, poly, x, w)?;
    if !plant.is_affine_in_disturbance() {
        return Err(Error::Config("exact worst-case solver needs a map affine in w; use worst_case_dense".into()));
    }
    let phi = plant.nominal(x, u)?;
    let gain = plant.gain();
    let (center, half) = (w.center(), w.half_widths());
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (i, (row, b)) in poly.rows().iter().zip(poly.offsets()).enumerate() {
        // c = A_i·G
        let c: Vec<f64> = (0..w.dim()).map(|j| row.iter().zip(gain).map(|(a, g)| a * g[j]).sum()).collect();
        let base: f64 = row.iter().zip(&phi).map(|(a, p)| a * p).sum::<f64>() - b;
        let mut val = base;
        let mut w_row = Vec::with_capacity(w.dim());
        for j in 0..w.dim() {
            val += c[j].abs() * half[j] + c[j] * center[j];
            w_row.push(if c[j] >= 0.0 { w.upper[j] } else { w.lower[j] });
        }
        if best.as_ref().map_or(true, |(v, _, _)| val > *v) {
            best = Some((val, i, w_row));
        }
    }
    let (j_star, active_row, w_star) = best.ok_or(Error::InvalidPolytope("no rows".into()))?;
    Ok(WorstCaseResult { j_star, w_star, active_row })
}

/// Oracle: margin maximized over the `2^dim(W)` box vertices.
pub fn worst_case_vertices(plant: &dyn Plant, poly: &HPolytope, x: &[f64], u: f64, w: &BoxSet) -> Result<f64> {
    check_dims(plant, poly, x, w)?;
    let phi = plant.nominal(x, u)?;
    let mut best = f64::NEG_INFINITY;
    for v in w.vertices() {
        best = best.max(poly.margin(&disturbed(plant, &phi, &v))?);
    }
    Ok(best)
}

/// Oracle: margin maximized over a `points^dim(W)` grid of `W` that
/// includes the vertices. Also usable for maps that are not affine in `w`,
/// where it is only an inner approximation.
pub fn worst_case_dense(plant: &dyn Plant, poly: &HPolytope, x: &[f64], u: f64, w: &BoxSet, points: usize) -> Result<f64> {
    check_dims(plant, poly, x, w)?;
    let axes: Vec<Vec<f64>> = (0..w.dim()).map(|j| linspace(w.lower[j], w.upper[j], points.max(2))).collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let phi = plant.nominal(x, u)?;
    let mut best = f64::NEG_INFINITY;
    let mut wv = vec![0.0; w.dim()];
    for mut idx in 0..total {
        for (j, axis) in axes.iter().enumerate() {
            wv[j] = axis[idx % axis.len()];
            idx /= axis.len();
        }
        let y = if plant.is_affine_in_disturbance() { disturbed(plant, &phi, &wv) } else { plant.step(x, u, &wv)? };
        best = best.max(poly.margin(&y)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisorConfig {
    /// Retraining updates before falling back; `None` retrains indefinitely.
    pub max_itr: Option<usize>,
    pub retrain_samples: usize,
    pub robust: bool,
    pub w: BoxSet,
    pub reward: RewardSpec,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self { max_itr: Some(20), retrain_samples: 10, robust: false, w: BoxSet::cstr_disturbance(), reward: RewardSpec::invariance() }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retrain_samples == 0 {
            return Err(Error::Config("retrain_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub safe: bool,
    pub j: f64,
    pub x_pred: Vec<f64>,
}

/// Deterministic mode: `safe ⟺ margin(P, Φ(x,u)) ≤ 0`. Robust mode:
/// `safe ⟺ J* ≤ 0`, with `x_pred` moved by the worst disturbance when
/// unsafe.
pub fn check_action(plant: &dyn Plant, poly: &HPolytope, x: &[f64], u: f64, robust: bool, w: &BoxSet) -> Result<Verdict> {
    let phi = plant.nominal(x, u)?;
    if !robust {
        let j = poly.margin(&phi)?;
        return Ok(Verdict { safe: j <= 0.0, j, x_pred: phi });
    }
    let wc = worst_case_margin(plant, poly, x, u, w)?;
    let safe = wc.j_star <= 0.0;
    let x_pred = if safe { phi } else { disturbed(plant, &phi, &wc.w_star) };
    Ok(Verdict { safe, j: wc.j_star, x_pred })
}

/// Backup inputs and the grid scanned when a stored input fails
/// re-certification.
#[derive(Debug, Clone)]
pub struct Backup {
    pub set: GriddedSet,
    pub table: BackupTable,
    pub u_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepLog {
    pub u_raw: f64,
    pub u_applied: f64,
    pub j: f64,
    pub safe: bool,
    pub updates_used: usize,
    pub fallback: bool,
    /// J of every vetted proposal, in order.
    pub j_values: Vec<f64>,
    pub check_us: Vec<f64>,
    pub update_us: Vec<f64>,
}

fn timed<T>(out: &mut Vec<f64>, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let v = f();
    out.push(start.elapsed().as_secs_f64() * 1e6);
    v
}

fn stage_reward(spec: &RewardSpec, x: &[f64], x_pred: &[f64], inside: bool) -> Result<f64> {
    Ok(reward(spec, State::from_slice(x_pred)?, inside, State::from_slice(x)?))
}

/// Vets exploratory actions at `x`, retraining at the held state after each
/// rejection, and falls back to the re-certified backup input after
/// `max_itr` updates.
pub fn supervise_step<R: Rng + ?Sized>(
    plant: &dyn Plant,
    poly: &HPolytope,
    agent: &mut Agent,
    x: &[f64],
    cfg: &SupervisorConfig,
    backup: &Backup,
    rng: &mut R,
) -> Result<StepLog> {
    cfg.validate()?;
    let mut log = StepLog::default();
    let mut first = true;
    loop {
        let act = agent.act(x, true, rng);
        let v = timed(&mut log.check_us, || check_action(plant, poly, x, act.u, cfg.robust, &cfg.w))?;
        log.j_values.push(v.j);
        if first {
            log.u_raw = act.u;
            first = false;
        }
        if v.safe {
            log.u_applied = act.u;
            log.j = v.j;
            log.safe = true;
            return Ok(log);
        }
        if cfg.max_itr.is_some_and(|m| log.updates_used >= m) {
            break;
        }
        // one-step segments at the held state, bootstrapped from the critic
        // at the predicted successor
        let mut batch = Vec::with_capacity(cfg.retrain_samples);
        for _ in 0..cfg.retrain_samples {
            let a = agent.act(x, true, rng);
            let vv = timed(&mut log.check_us, || check_action(plant, poly, x, a.u, cfg.robust, &cfg.w))?;
            let r = stage_reward(&cfg.reward, x, &vv.x_pred, vv.safe)?;
            batch.push(vec![Transition {
                x: x.to_vec(),
                u: a.u,
                raw: a.raw,
                r,
                x_next: vv.x_pred,
                logprob: a.logprob,
                done: false,
            }]);
        }
        let start = Instant::now();
        let res = agent.update(&batch);
        log.update_us.push(start.elapsed().as_secs_f64() * 1e6);
        res?;
        log.updates_used += 1;
    }
    let (u, v) = certified_backup(plant, poly, x, cfg, backup, &mut log.check_us)?;
    log.u_applied = u;
    log.j = v.j;
    log.safe = true;
    log.fallback = true;
    Ok(log)
}

/// Stored backup input for `x`, re-certified against the polytope. If it
/// fails, the input grid is scanned for the input with the smallest `J`.
pub fn certified_backup(
    plant: &dyn Plant,
    poly: &HPolytope,
    x: &[f64],
    cfg: &SupervisorConfig,
    backup: &Backup,
    check_us: &mut Vec<f64>,
) -> Result<(f64, Verdict)> {
    if let Ok(u) = backup_lookup(&backup.table, &backup.set, x) {
        let v = timed(check_us, || check_action(plant, poly, x, u, cfg.robust, &cfg.w))?;
        if v.safe {
            return Ok((u, v));
        }
    }
    let mut best: Option<(f64, Verdict)> = None;
    for &u in &backup.u_grid {
        let v = check_action(plant, poly, x, u, cfg.robust, &cfg.w)?;
        if best.as_ref().map_or(true, |(_, b)| v.j < b.j) {
            best = Some((u, v));
        }
    }
    match best {
        Some((u, v)) if v.safe => Ok((u, v)),
        other => Err(Error::SafetyFault {
            state: x.to_vec(),
            reason: format!("no certified input; best J = {:?}", other.map(|(_, v)| v.j)),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    pub episode: usize,
    pub k: usize,
    pub x: Vec<f64>,
    pub log: StepLog,
    pub w: Vec<f64>,
    pub x_next: Vec<f64>,
    pub inside_next: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OnlineMetrics {
    pub episodes: usize,
    /// Realized states outside the polytope.
    pub violations: usize,
    /// Episodes with at least one violation.
    pub failed_episodes: usize,
    pub fallback_count: usize,
    pub updates_total: usize,
    pub steps: Vec<OnlineStep>,
}

impl OnlineMetrics {
    pub fn check_us(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.log.check_us.iter().copied()).collect()
    }

    pub fn update_us(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.log.update_us.iter().copied()).collect()
    }

    /// `episode,k,ca,t,u_raw,u_applied,J,safe,updates_used,fallback,w_ca,w_t,ca_next,t_next,inside_next`
    pub fn step_csv(&self) -> String {
        let mut out = String::from("episode,k,ca,t,u_raw,u_applied,J,safe,updates_used,fallback,w_ca,w_t,ca_next,t_next,inside_next\n");
        for s in &self.steps {
            let w = |i: usize| s.w.get(i).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{:?},{:?},{:?},{},{},{},{:?},{:?},{:?},{:?},{}",
                s.episode,
                s.k,
                s.x[0],
                s.x.get(1).copied().unwrap_or(0.0),
                s.log.u_raw,
                s.log.u_applied,
                s.log.j,
                u8::from(s.log.safe),
                s.log.updates_used,
                u8::from(s.log.fallback),
                w(0),
                w(1),
                s.x_next[0],
                s.x_next.get(1).copied().unwrap_or(0.0),
                u8::from(s.inside_next)
            );
        }
        out
    }

    /// `kind,microseconds` for every check and update.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("kind,microseconds\n");
        for s in &self.steps {
            for t in &s.log.check_us {
                let _ = writeln!(out, "check,{t:.3}");
            }
            for t in &s.log.update_us {
                let _ = writeln!(out, "update,{t:.3}");
            }
        }
        out
    }
}

/// Runs supervised episodes from `initial_states`. With `disturbance` set,
/// the environment draws `w` uniformly from that box at every step. The
/// agent keeps whatever it learns across episodes. Episodes end early if
/// the realized state leaves the polytope.
#[allow(clippy::too_many_arguments)]
pub fn run_online<R: Rng + ?Sized>(
    plant: &dyn Plant,
    poly: &HPolytope,
    agent: &mut Agent,
    initial_states: &[Vec<f64>],
    steps: usize,
    cfg: &SupervisorConfig,
    backup: &Backup,
    disturbance: Option<&BoxSet>,
    rng: &mut R,
) -> Result<OnlineMetrics> {
    let mut m = OnlineMetrics { episodes: initial_states.len(), ..Default::default() };
    for (e, x0) in initial_states.iter().enumerate() {
        if !poly.contains(x0)? {
            return Err(Error::Config(format!("initial state {x0:?} lies outside the polytope")));
        }
        let mut x = x0.clone();
        for k in 0..steps {
            let log = supervise_step(plant, poly, agent, &x, cfg, backup, rng)?;
            let w = match disturbance {
                Some(b) => b.sample(rng),
                None => vec![0.0; plant.disturbance_dim()],
            };
            let x_next = plant.step(&x, log.u_applied, &w)?;
            let inside_next = poly.contains(&x_next)?;
            m.fallback_count += usize::from(log.fallback);
            m.updates_total += log.updates_used;
            m.steps.push(OnlineStep { episode: e, k, x: x.clone(), log, w, x_next: x_next.clone(), inside_next });
            if !inside_next {
                m.violations += 1;
                m.failed_episodes += 1;
                break;
            }
            x = x_next;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Cstr, LinearPlant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shift_plant() -> LinearPlant {
        LinearPlant::new(vec![vec![1.0]], vec![0.0], vec![vec![1.0]])
    }

    #[test]
    fn one_dimensional_example() {
        let p = shift_plant();
        let poly = BoxSet::new(vec![-1.0], vec![1.0]).unwrap().to_polytope();
        let w = BoxSet::new(vec![-0.3], vec![0.3]).unwrap();
        let r = worst_case_margin(&p, &poly, &[0.5], 0.0, &w).unwrap();
        assert!((r.j_star + 0.2).abs() < 1e-12);
        assert_eq!(r.w_star, vec![0.3]);
        assert_eq!(r.active_row, 0);
    }

    #[test]
    fn degenerate_box_reduces_to_margin() {
        let p = Cstr::default();
        let poly = BoxSet::cstr_state().to_polytope();
        let w = BoxSet::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        let x = [0.5, 350.0];
        let r = worst_case_margin(&p, &poly, &x, 300.0, &w).unwrap();
        let phi = p.nominal(&x, 300.0).unwrap();
        assert!((r.j_star - poly.margin(&phi).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ties_pick_lowest_row() {
        let p = shift_plant();
        let poly = BoxSet::new(vec![-1.0], vec![1.0]).unwrap().to_polytope();
        let w = BoxSet::new(vec![-0.3], vec![0.3]).unwrap();
        assert_eq!(worst_case_margin(&p, &poly, &[0.0], 0.0, &w).unwrap().active_row, 0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = Cstr::default();
        let poly = BoxSet::cstr_state().to_polytope();
        let w = BoxSet::new(vec![0.0], vec![1.0]).unwrap();
        assert!(matches!(worst_case_margin(&p, &poly, &[0.5, 350.0], 300.0, &w), Err(Error::DimensionMismatch { .. })));
        assert!(worst_case_margin(&p, &poly, &[0.5], 300.0, &BoxSet::cstr_disturbance()).is_err());
    }

    #[test]
    fn matches_vertex_oracle_on_cstr() {
        let p = Cstr::default();
        let poly = BoxSet::new(vec![0.1, 345.0], vec![0.9, 355.0]).unwrap().to_polytope();
        let w = BoxSet::cstr_disturbance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = [rng.gen_range(0.0..1.0), rng.gen_range(345.0..355.0)];
            let u = rng.gen_range(285.0..315.0);
            let j = worst_case_margin(&p, &poly, &x, u, &w).unwrap();
            let v = worst_case_vertices(&p, &poly, &x, u, &w).unwrap();
            assert!((j.j_star - v).abs() <= 1e-9);
            assert!(w.contains(&j.w_star));
        }
    }

    #[test]
    fn robust_unsafe_prediction_uses_worst_disturbance() {
        let p = shift_plant();
        let poly = BoxSet::new(vec![-1.0], vec![1.0]).unwrap().to_polytope();
        let w = BoxSet::new(vec![-0.3], vec![0.3]).unwrap();
        let v = check_action(&p, &poly, &[0.8], 0.0, true, &w).unwrap();
        assert!(!v.safe);
        assert!((v.j - 0.1).abs() < 1e-12);
        assert!((v.x_pred[0] - 1.1).abs() < 1e-12);
        let det = check_action(&p, &poly, &[0.8], 0.0, false, &w).unwrap();
        assert!(det.safe);
        assert_eq!(det.x_pred, vec![0.8]);
    }
}
