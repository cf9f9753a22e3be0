//! CSTR dynamics: the continuous vector field, its fixed-step discretization
//! and steady-state solving.
//!
//! The reactor carries an irreversible first-order exothermic reaction with a
//! cooling jacket. States are the reactant concentration `cA` (mol/L) and the
//! mixture temperature `T` (K); the manipulated input is the coolant
//! temperature `Tc` (K). Time is in minutes throughout.
//!
//! The discrete map is `x⁺ = Φ(x, u) + G·w`, where `Φ` is one classical RK4
//! step of the undisturbed field over `dt` and `G = dt·(q/V)·I`. Keeping the
//! disturbance outside the integrator stages makes the map exactly affine in
//! `w`, which the worst-case solver in [`crate::supervisor`] relies on. The
//! stage-level variant is available through [`DisturbanceMode::Continuous`]
//! for cross-checks only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::KvMap;

/// Physical parameters of the reactor and the sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Flow rate, L/min.
    pub q: f64,
    /// Volume, L.
    pub volume: f64,
    /// Arrhenius pre-exponential factor, 1/min.
    pub k0: f64,
    /// Activation energy over gas constant, K.
    pub e_over_r: f64,
    /// Negated reaction enthalpy, J/mol.
    pub neg_dh: f64,
    /// Density, g/L.
    pub rho: f64,
    /// Heat capacity, J/(g·K).
    pub cp: f64,
    /// Jacket heat transfer coefficient, J/(min·K).
    pub ua: f64,
    /// Inlet concentration, mol/L.
    pub caf: f64,
    /// Inlet temperature, K.
    pub tf: f64,
    /// Sampling interval, min.
    pub dt: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            q: 100.0,
            volume: 100.0,
            k0: 7.2e10,
            e_over_r: 8750.0,
            neg_dh: 5.0e4,
            rho: 1000.0,
            cp: 0.239,
            ua: 5.0e4,
            caf: 1.0,
            tf: 350.0,
            dt: 0.1,
        }
    }
}

const PARAM_KEYS: [&str; 11] = ["q", "V", "k0", "E_over_R", "dH_neg", "rho", "cp", "UA", "cAf", "Tf", "dt"];

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let values = self.as_array();
        for (key, value) in PARAM_KEYS.iter().zip(values) {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::Config(format!("model parameter {key} must be positive and finite, got {value}")));
            }
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 11] {
        [
            self.q, self.volume, self.k0, self.e_over_r, self.neg_dh, self.rho, self.cp, self.ua, self.caf, self.tf,
            self.dt,
        ]
    }

    /// Reads a `key=value` file. Missing keys keep their default value,
    /// unknown keys are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        kv.reject_unknown(&PARAM_KEYS)?;
        let d = Self::default();
        let p = Self {
            q: kv.get_or("q", d.q)?,
            volume: kv.get_or("V", d.volume)?,
            k0: kv.get_or("k0", d.k0)?,
            e_over_r: kv.get_or("E_over_R", d.e_over_r)?,
            neg_dh: kv.get_or("dH_neg", d.neg_dh)?,
            rho: kv.get_or("rho", d.rho)?,
            cp: kv.get_or("cp", d.cp)?,
            ua: kv.get_or("UA", d.ua)?,
            caf: kv.get_or("cAf", d.caf)?,
            tf: kv.get_or("Tf", d.tf)?,
            dt: kv.get_or("dt", d.dt)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KvMap::load(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        PARAM_KEYS
            .iter()
            .zip(self.as_array())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Residence-time rate `q/V`, 1/min.
    pub fn dilution(&self) -> f64 {
        self.q / self.volume
    }

    /// Diagonal entry of the discrete disturbance gain, `dt·q/V`.
    pub fn disturbance_gain(&self) -> f64 {
        self.dt * self.dilution()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Reactant concentration, mol/L.
    pub ca: f64,
    /// Temperature, K.
    pub t: f64,
}

impl State {
    pub fn new(ca: f64, t: f64) -> Self {
        Self { ca, t }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.ca, self.t]
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        match x {
            [ca, t] => Ok(Self { ca: *ca, t: *t }),
            _ => Err(Error::DimensionMismatch { expected: 2, got: x.len() }),
        }
    }

    fn is_finite(&self) -> bool {
        self.ca.is_finite() && self.t.is_finite()
    }
}

/// Coolant temperature, K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub tc: f64,
}

impl ControlInput {
    pub fn new(tc: f64) -> Self {
        Self { tc }
    }
}

/// Additive offsets on the inlet concentration and temperature.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Disturbance {
    pub w_ca: f64,
    pub w_t: f64,
}

impl Disturbance {
    pub const ZERO: Self = Self { w_ca: 0.0, w_t: 0.0 };

    pub fn new(w_ca: f64, w_t: f64) -> Self {
        Self { w_ca, w_t }
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        match w {
            [a, b] => Ok(Self::new(*a, *b)),
            _ => Err(Error::DimensionMismatch { expected: 2, got: w.len() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    /// mol/(L·min)
    pub d_ca: f64,
    /// K/min
    pub d_t: f64,
}

/// Continuous-time right-hand side with `w` added to the inlet conditions.
pub fn vector_field(p: &ModelParams, x: State, u: ControlInput, w: Disturbance) -> Result<StateDerivative> {
    let rate = p.k0 * (-p.e_over_r / x.t).exp() * x.ca;
    let dil = p.dilution();
    let d_ca = dil * (p.caf + w.w_ca - x.ca) - rate;
    let d_t = dil * (p.tf + w.w_t - x.t)
        + p.neg_dh / (p.rho * p.cp) * rate
        + p.ua / (p.volume * p.rho * p.cp) * (u.tc - x.t);
    if !(d_ca.is_finite() && d_t.is_finite()) {
        return Err(Error::NumericOverflow(format!("vector field at cA={}, T={}", x.ca, x.t)));
    }
    Ok(StateDerivative { d_ca, d_t })
}

fn rk4(p: &ModelParams, x: State, u: ControlInput, w: Disturbance, h: f64) -> Result<State> {
    let shift = |x: State, k: StateDerivative, s: f64| State::new(x.ca + s * k.d_ca, x.t + s * k.d_t);
    let k1 = vector_field(p, x, u, w)?;
    let k2 = vector_field(p, shift(x, k1, 0.5 * h), u, w)?;
    let k3 = vector_field(p, shift(x, k2, 0.5 * h), u, w)?;
    let k4 = vector_field(p, shift(x, k3, h), u, w)?;
    let next = State::new(
        x.ca + h / 6.0 * (k1.d_ca + 2.0 * k2.d_ca + 2.0 * k3.d_ca + k4.d_ca),
        x.t + h / 6.0 * (k1.d_t + 2.0 * k2.d_t + 2.0 * k3.d_t + k4.d_t),
    );
    if !next.is_finite() {
        return Err(Error::NumericOverflow(format!("RK4 step from cA={}, T={}", x.ca, x.t)));
    }
    Ok(next)
}

/// Integrates the field over `duration` with `substeps` equal RK4 steps,
/// `w` held inside every stage.
pub fn integrate(
    p: &ModelParams,
    x: State,
    u: ControlInput,
    w: Disturbance,
    duration: f64,
    substeps: usize,
) -> Result<State> {
    let h = duration / substeps.max(1) as f64;
    (0..substeps.max(1)).try_fold(x, |x, _| rk4(p, x, u, w, h))
}

/// Undisturbed one-step map `Φ(x, u)`.
pub fn nominal_step(p: &ModelParams, x: State, u: ControlInput) -> Result<State> {
    rk4(p, x, u, Disturbance::ZERO, p.dt)
}

/// Discrete map `Φ(x, u) + dt·(q/V)·w`.
pub fn step(p: &ModelParams, x: State, u: ControlInput, w: Disturbance) -> Result<State> {
    let next = nominal_step(p, x, u)?;
    let g = p.disturbance_gain();
    Ok(State::new(next.ca + g * w.w_ca, next.t + g * w.w_t))
}

/// One RK4 step with `w` entering every stage. Not affine in `w`.
pub fn step_continuous(p: &ModelParams, x: State, u: ControlInput, w: Disturbance) -> Result<State> {
    rk4(p, x, u, w, p.dt)
}

const NEWTON_TOL: f64 = 1e-9;
const NEWTON_MAX_ITER: usize = 200;

fn residual(p: &ModelParams, x: State, u: ControlInput) -> Result<[f64; 2]> {
    let next = nominal_step(p, x, u)?;
    Ok([next.ca - x.ca, next.t - x.t])
}

fn inf_norm(r: &[f64; 2]) -> f64 {
    r[0].abs().max(r[1].abs())
}

/// Fixed point of the undisturbed one-step map via damped Newton.
///
/// The Jacobian is a central finite difference of the residual. A trial
/// step that increases the residual is halved, at most 30 times.
pub fn steady_state(p: &ModelParams, u: ControlInput, guess: State) -> Result<State> {
    if !guess.is_finite() {
        return Err(Error::Config("steady-state guess must be finite".into()));
    }
    let diverged = |residual: f64, iterations: usize| Error::Convergence { iterations, residual };
    let mut x = guess;
    let mut r = residual(p, x, u).map_err(|_| diverged(f64::INFINITY, 0))?;
    for iter in 0..NEWTON_MAX_ITER {
        let norm = inf_norm(&r);
        if norm <= NEWTON_TOL {
            return Ok(x);
        }
        let jac = jacobian(p, x, u).map_err(|_| diverged(norm, iter))?;
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(diverged(norm, iter));
        }
        let dx = [
            -(jac[1][1] * r[0] - jac[0][1] * r[1]) / det,
            -(-jac[1][0] * r[0] + jac[0][0] * r[1]) / det,
        ];
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial = State::new(x.ca + scale * dx[0], x.t + scale * dx[1]);
            if let Ok(rt) = residual(p, trial, u) {
                if inf_norm(&rt) < norm {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((trial, rt)) => {
                x = trial;
                r = rt;
            }
            None => return Err(diverged(norm, iter)),
        }
    }
    let norm = inf_norm(&r);
    if norm <= NEWTON_TOL {
        Ok(x)
    } else {
        Err(diverged(norm, NEWTON_MAX_ITER))
    }
}

fn jacobian(p: &ModelParams, x: State, u: ControlInput) -> Result<[[f64; 2]; 2]> {
    let hc = 1e-7 * x.ca.abs().max(1.0);
    let ht = 1e-7 * x.t.abs().max(1.0);
    let rp = residual(p, State::new(x.ca + hc, x.t), u)?;
    let rm = residual(p, State::new(x.ca - hc, x.t), u)?;
    let tp = residual(p, State::new(x.ca, x.t + ht), u)?;
    let tm = residual(p, State::new(x.ca, x.t - ht), u)?;
    Ok([
        [(rp[0] - rm[0]) / (2.0 * hc), (tp[0] - tm[0]) / (2.0 * ht)],
        [(rp[1] - rm[1]) / (2.0 * hc), (tp[1] - tm[1]) / (2.0 * ht)],
    ])
}

/// Discrete-time plant with scalar input and an affine disturbance channel,
/// `x⁺ = Φ(x, u) + G·w`.
///
/// This is the interface the set synthesis, verification and supervisor
/// code works against; the CSTR is one implementation, the toy linear
/// systems used in tests are another.
pub trait Plant: Sync {
    fn state_dim(&self) -> usize;

    fn disturbance_dim(&self) -> usize;

    /// `Φ(x, u)`.
    fn nominal(&self, x: &[f64], u: f64) -> Result<Vec<f64>>;

    /// Row-major `G` (state_dim × disturbance_dim).
    fn gain(&self) -> &[Vec<f64>];

    /// Whether the realized step is `nominal + G·w`. Set-valued computations
    /// that rely on vertex attainment are exact only when this holds.
    fn is_affine_in_disturbance(&self) -> bool {
        true
    }

    fn step(&self, x: &[f64], u: f64, w: &[f64]) -> Result<Vec<f64>> {
        let mut next = self.nominal(x, u)?;
        apply_gain(self.gain(), w, &mut next);
        Ok(next)
    }
}

/// `x += G·w`
pub fn apply_gain(gain: &[Vec<f64>], w: &[f64], x: &mut [f64]) {
    for (xi, row) in x.iter_mut().zip(gain) {
        *xi += row.iter().zip(w).map(|(g, w)| g * w).sum::<f64>();
    }
}

/// Where the disturbance enters the CSTR map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisturbanceMode {
    /// Added once after the step; affine in `w`.
    #[default]
    DiscreteAdditive,
    /// Added to the inlet conditions inside every integrator stage.
    Continuous,
}

#[derive(Debug, Clone)]
pub struct Cstr {
    pub params: ModelParams,
    pub mode: DisturbanceMode,
    gain: Vec<Vec<f64>>,
}

impl Cstr {
    pub fn new(params: ModelParams) -> Self {
        Self::with_mode(params, DisturbanceMode::DiscreteAdditive)
    }

    pub fn with_mode(params: ModelParams, mode: DisturbanceMode) -> Self {
        let g = params.disturbance_gain();
        Self { params, mode, gain: vec![vec![g, 0.0], vec![0.0, g]] }
    }
}

impl Default for Cstr {
    fn default() -> Self {
        Self::new(ModelParams::default())
    }
}

impl Plant for Cstr {
    fn state_dim(&self) -> usize {
        2
    }

    fn disturbance_dim(&self) -> usize {
        2
    }

    fn nominal(&self, x: &[f64], u: f64) -> Result<Vec<f64>> {
        let s = nominal_step(&self.params, State::from_slice(x)?, ControlInput::new(u))?;
        Ok(s.to_vec())
    }

    fn gain(&self) -> &[Vec<f64>] {
        &self.gain
    }

    fn is_affine_in_disturbance(&self) -> bool {
        self.mode == DisturbanceMode::DiscreteAdditive
    }

    fn step(&self, x: &[f64], u: f64, w: &[f64]) -> Result<Vec<f64>> {
        let x = State::from_slice(x)?;
        let w = Disturbance::from_slice(w)?;
        let u = ControlInput::new(u);
        let next = match self.mode {
            DisturbanceMode::DiscreteAdditive => step(&self.params, x, u, w)?,
            DisturbanceMode::Continuous => step_continuous(&self.params, x, u, w)?,
        };
        Ok(next.to_vec())
    }
}

/// `x⁺ = A·x + B·u + G·w`, used for analytic test systems.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    gain: Vec<Vec<f64>>,
}

impl LinearPlant {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>, gain: Vec<Vec<f64>>) -> Self {
        Self { a, b, gain }
    }

    /// Undisturbed plant (disturbance dimension 0).
    pub fn deterministic(a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let n = b.len();
        Self { a, b, gain: vec![Vec::new(); n] }
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.b.len()
    }

    fn disturbance_dim(&self) -> usize {
        self.gain.first().map_or(0, Vec::len)
    }

    fn nominal(&self, x: &[f64], u: f64) -> Result<Vec<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch { expected: self.state_dim(), got: x.len() });
        }
        Ok(self
            .a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + b * u)
            .collect())
    }

    fn gain(&self) -> &[Vec<f64>] {
        &self.gain
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ModelParams {
        ModelParams::default()
    }

    #[test]
    fn zero_concentration_feed_term() {
        let d = vector_field(&p(), State::new(0.0, 350.0), ControlInput::new(300.0), Disturbance::ZERO).unwrap();
        assert_eq!(d.d_ca, 1.0);
    }

    #[test]
    fn all_temperature_terms_vanish() {
        let d = vector_field(&p(), State::new(0.0, 350.0), ControlInput::new(350.0), Disturbance::ZERO).unwrap();
        assert_eq!(d.d_t, 0.0);
    }

    #[test]
    fn near_steady_point_hand_evaluation() {
        // k(350) = 7.2e10·e^{-25}
        let k = 7.2e10 * (-25.0f64).exp();
        assert!((k - 0.99993).abs() < 1e-5);
        let expect_ca = 1.0 * (1.0 - 0.5) - k * 0.5;
        let expect_t = 5.0e4 / (1000.0 * 0.239) * k * 0.5 + 5.0e4 / (100.0 * 1000.0 * 0.239) * (300.0 - 350.0);
        let d = vector_field(&p(), State::new(0.5, 350.0), ControlInput::new(300.0), Disturbance::ZERO).unwrap();
        assert!((d.d_ca - expect_ca).abs() < 1e-12);
        assert!((d.d_t - expect_t).abs() < 1e-9);
        assert!((d.d_ca - 3.3e-5).abs() < 2e-6, "{}", d.d_ca);
        // 104.595 K/min of reaction heat against 104.603 K/min of cooling
        assert!((d.d_t + 7.1e-3).abs() < 1e-4, "{}", d.d_t);
    }

    #[test]
    fn overflow_is_reported() {
        let r = vector_field(&p(), State::new(1e300, 1e6), ControlInput::new(300.0), Disturbance::ZERO);
        assert!(matches!(r, Err(Error::NumericOverflow(_))));
    }

    #[test]
    fn zero_disturbance_equals_nominal() {
        let (x, u) = (State::new(0.3, 348.0), ControlInput::new(290.0));
        assert_eq!(step(&p(), x, u, Disturbance::ZERO).unwrap(), nominal_step(&p(), x, u).unwrap());
    }

    #[test]
    fn disturbance_offset_is_gain_times_w() {
        let (x, u, w) = (State::new(0.7, 352.0), ControlInput::new(310.0), Disturbance::new(0.1, -2.0));
        let a = step(&p(), x, u, w).unwrap();
        let b = step(&p(), x, u, Disturbance::ZERO).unwrap();
        let g = p().dt * p().q / p().volume;
        assert!((a.ca - b.ca - g * 0.1).abs() < 1e-15);
        assert!((a.t - b.t - g * -2.0).abs() < 1e-12);
    }

    #[test]
    fn one_step_movement_matches_fine_reference() {
        let (x, u) = (State::new(0.5, 350.0), ControlInput::new(300.0));
        let next = step(&p(), x, u, Disturbance::ZERO).unwrap();
        let fine = integrate(&p(), x, u, Disturbance::ZERO, p().dt, 100).unwrap();
        assert!((next.ca - x.ca).abs() < 1e-3);
        assert!((next.t - x.t).abs() < 0.1);
        assert!((next.ca - fine.ca).abs() < 1e-9);
        assert!((next.t - fine.t).abs() < 1e-7);
    }

    #[test]
    fn steady_state_converges_from_nominal_guess() {
        let u = ControlInput::new(300.0);
        let xs = steady_state(&p(), u, State::new(0.5, 350.0)).unwrap();
        let next = step(&p(), xs, u, Disturbance::ZERO).unwrap();
        assert!((next.ca - xs.ca).abs() <= 1e-9);
        assert!((next.t - xs.t).abs() <= 1e-9);
    }

    #[test]
    fn steady_state_reports_divergent_guess() {
        let r = steady_state(&p(), ControlInput::new(300.0), State::new(0.0, 600.0));
        assert!(matches!(r, Err(Error::Convergence { .. })), "{r:?}");
    }

    #[test]
    fn params_file_rejects_unknown_keys() {
        let kv = KvMap::parse("q=100\nbogus=1").unwrap();
        assert!(ModelParams::from_kv(&kv).is_err());
        let kv = KvMap::parse("dt=0.05").unwrap();
        assert_eq!(ModelParams::from_kv(&kv).unwrap().dt, 0.05);
        let kv = KvMap::parse("V=-1").unwrap();
        assert!(ModelParams::from_kv(&kv).is_err());
        let back = ModelParams::from_kv(&KvMap::parse(&p().to_kv_text()).unwrap()).unwrap();
        assert_eq!(back, p());
    }

    #[test]
    fn linear_plant_steps() {
        let plant = LinearPlant::new(vec![vec![2.0]], vec![1.0], vec![vec![1.0]]);
        assert_eq!(plant.step(&[0.5], 0.25, &[0.1]).unwrap(), vec![2.0 * 0.5 + 0.25 + 0.1]);
        assert_eq!(plant.disturbance_dim(), 1);
    }
}
