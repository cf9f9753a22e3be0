//! Membership-gated rewards and the episode economics metric.
//!
//! Every variant pays `r2` when the caller's membership verdict is false.
//! When it is true the variant's stage value is paid, computed from the
//! current state.

use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::kv::KvMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardVariant {
    /// Constant `r1` while inside.
    Invariance { r1: f64 },
    /// `−‖x − x_s‖_p^q`.
    SetPoint { target: State, p: f64, q: f64 },
    /// `l_e(x) = 100·(1 − cA)·V`.
    Economic,
    /// `l_e(x) + l_z(T)` with a quadratic penalty outside `[lo, hi]`.
    EconomicZone { lo: f64, hi: f64, weight: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub variant: RewardVariant,
    pub r2: f64,
    /// Reactor volume used by the economic stage, L.
    pub volume: f64,
}

pub const DEFAULT_R1: f64 = 10_000.0;
pub const DEFAULT_R2: f64 = -1_000.0;
pub const ZONE_LO: f64 = 348.0;
pub const ZONE_HI: f64 = 352.0;
pub const ZONE_WEIGHT: f64 = 300.0;

impl RewardSpec {
    pub fn invariance() -> Self {
        Self { variant: RewardVariant::Invariance { r1: DEFAULT_R1 }, r2: DEFAULT_R2, volume: 100.0 }
    }

    pub fn economic() -> Self {
        Self { variant: RewardVariant::Economic, r2: DEFAULT_R2, volume: 100.0 }
    }

    pub fn economic_zone() -> Self {
        Self {
            variant: RewardVariant::EconomicZone { lo: ZONE_LO, hi: ZONE_HI, weight: ZONE_WEIGHT },
            r2: DEFAULT_R2,
            volume: 100.0,
        }
    }

    pub fn set_point(target: State, p: f64, q: f64) -> Self {
        Self { variant: RewardVariant::SetPoint { target, p, q }, r2: DEFAULT_R2, volume: 100.0 }
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            RewardVariant::Invariance { .. } => "invariance",
            RewardVariant::SetPoint { .. } => "setpoint",
            RewardVariant::Economic => "economic",
            RewardVariant::EconomicZone { .. } => "economic_zone",
        }
    }

    /// Reward paid while inside, at current state `x`.
    pub fn inside_value(&self, x: State) -> f64 {
        match self.variant {
            RewardVariant::Invariance { r1 } => r1,
            RewardVariant::SetPoint { target, p, q } => {
                let d = [(x.ca - target.ca).abs(), (x.t - target.t).abs()];
                let norm = if p.is_infinite() { d[0].max(d[1]) } else { (d[0].powf(p) + d[1].powf(p)).powf(1.0 / p) };
                -norm.powf(q)
            }
            RewardVariant::Economic => economic_stage(x, self.volume),
            RewardVariant::EconomicZone { lo, hi, weight } => {
                economic_stage(x, self.volume) + zone_stage_with(x.t, weight, lo, hi)
            }
        }
    }

    /// Minimum inside reward over `points`; must exceed `r2`.
    pub fn check_separation(&self, points: impl IntoIterator<Item = State>) -> Result<f64> {
        let min = points.into_iter().map(|x| self.inside_value(x)).fold(f64::INFINITY, f64::min);
        if min <= self.r2 {
            return Err(Error::Config(format!(
                "{} reward: minimum inside reward {min} does not exceed r2 = {}",
                self.name(),
                self.r2
            )));
        }
        Ok(min)
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let name = kv.get_str("reward").unwrap_or("invariance");
        let mut spec = match name {
            "invariance" => Self::invariance(),
            "economic" => Self::economic(),
            "economic_zone" => Self::economic_zone(),
            "setpoint" => Self::set_point(
                State::new(kv.get_or("xs_ca", 0.5)?, kv.get_or("xs_t", 350.0)?),
                kv.get_or("norm_p", 2.0)?,
                kv.get_or("exp_q", 2.0)?,
            ),
            other => return Err(Error::Config(format!("unknown reward variant {other:?}"))),
        };
        spec.r2 = kv.get_or("r2", spec.r2)?;
        spec.volume = kv.get_or("volume", spec.volume)?;
        match &mut spec.variant {
            RewardVariant::Invariance { r1 } => *r1 = kv.get_or("r1", *r1)?,
            RewardVariant::EconomicZone { lo, hi, weight } => {
                *lo = kv.get_or("zone_lo", *lo)?;
                *hi = kv.get_or("zone_hi", *hi)?;
                *weight = kv.get_or("zone_weight", *weight)?;
            }
            _ => {}
        }
        Ok(spec)
    }

    pub fn kv_keys() -> &'static [&'static str] {
        &["reward", "r1", "r2", "volume", "xs_ca", "xs_t", "norm_p", "exp_q", "zone_lo", "zone_hi", "zone_weight"]
    }
}

/// Membership-gated reward. `x_next_pred` is the prediction the verdict was
/// computed on; stage values use the current state `x`.
pub fn reward(spec: &RewardSpec, _x_next_pred: State, inside: bool, x: State) -> f64 {
    if inside {
        spec.inside_value(x)
    } else {
        spec.r2
    }
}

/// `100·(1 − cA)·V`
pub fn economic_stage(x: State, volume: f64) -> f64 {
    100.0 * (1.0 - x.ca) * volume
}

/// Zone penalty with the default band `[348, 352]` and weight 300.
pub fn zone_stage(t: f64) -> f64 {
    zone_stage_with(t, ZONE_WEIGHT, ZONE_LO, ZONE_HI)
}

pub fn zone_stage_with(t: f64, weight: f64, lo: f64, hi: f64) -> f64 {
    if t < lo {
        -weight * (lo - t) * (lo - t)
    } else if t > hi {
        -weight * (hi - t) * (hi - t)
    } else {
        0.0
    }
}

/// `L_e = Σ_k 100·(1 − cA_k)·V` over the visited states `x_1 … x_K`.
pub fn episode_economics(trajectory: &[State], volume: f64) -> Result<f64> {
    if trajectory.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(trajectory.iter().map(|x| economic_stage(*x, volume)).sum())
}

/// Accumulated zone violation `Σ_k −l_z(T_k)` (non-negative).
pub fn zone_penalty_total(trajectory: &[State]) -> f64 {
    trajectory.iter().map(|x| -zone_stage(x.t)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x(ca: f64, t: f64) -> State {
        State::new(ca, t)
    }

    #[test]
    fn invariance_values() {
        let s = RewardSpec::invariance();
        assert_eq!(reward(&s, x(0.5, 350.0), true, x(0.5, 350.0)), 10_000.0);
        assert_eq!(reward(&s, x(0.5, 350.0), false, x(0.5, 350.0)), -1_000.0);
    }

    #[test]
    fn set_point_zero_at_target() {
        let s = RewardSpec::set_point(x(0.5, 350.0), 2.0, 2.0);
        assert_eq!(reward(&s, x(0.5, 350.0), true, x(0.5, 350.0)), 0.0);
        let v = reward(&s, x(0.5, 350.0), true, x(0.5, 353.0));
        assert!((v + 9.0).abs() < 1e-12);
    }

    #[test]
    fn economic_stage_values() {
        assert_eq!(economic_stage(x(1.0, 350.0), 100.0), 0.0);
        assert_eq!(economic_stage(x(0.0, 350.0), 100.0), 10_000.0);
        assert!((economic_stage(x(0.41, 350.0), 100.0) - 5900.0).abs() < 1e-9);
    }

    #[test]
    fn zone_stage_values() {
        assert_eq!(zone_stage(350.0), 0.0);
        assert_eq!(zone_stage(347.0), -300.0);
        assert_eq!(zone_stage(353.0), -300.0);
        assert_eq!(zone_stage(348.0), 0.0);
        assert_eq!(zone_stage(352.0), 0.0);
        assert!(zone_stage(348.0 - 1e-9).abs() < 1e-12);
        assert!(zone_stage(352.0 + 1e-9).abs() < 1e-12);
    }

    #[test]
    fn economics_sum() {
        assert_eq!(episode_economics(&vec![x(1.0, 350.0); 200], 100.0).unwrap(), 0.0);
        assert_eq!(episode_economics(&vec![x(0.0, 350.0); 200], 100.0).unwrap(), 2_000_000.0);
        assert!(matches!(episode_economics(&[], 100.0), Err(Error::EmptyTrajectory)));
        let lo = episode_economics(&vec![x(0.2, 350.0); 200], 100.0).unwrap();
        let hi = episode_economics(&vec![x(0.3, 350.0); 200], 100.0).unwrap();
        assert!(lo > hi);
    }

    #[test]
    fn separation_check() {
        let s = RewardSpec::economic_zone();
        assert!(s.check_separation([x(0.5, 350.0), x(0.3, 354.0)]).is_ok());
        assert!(s.check_separation([x(0.99, 340.0)]).is_err());
    }

    #[test]
    fn kv_roundtrip_of_variants() {
        let kv = KvMap::parse("reward=economic_zone\nr2=-2000\nzone_hi=353").unwrap();
        let s = RewardSpec::from_kv(&kv).unwrap();
        assert_eq!(s.r2, -2000.0);
        assert!(matches!(s.variant, RewardVariant::EconomicZone { hi, .. } if hi == 353.0));
        assert!(RewardSpec::from_kv(&KvMap::parse("reward=bogus").unwrap()).is_err());
    }
}
