use serde::{Deserialize, Serialize};

use crate::data::MarketConfig;
use crate::error::{Error, Result};

/// Battery ratings and cost coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub eta_ch: f64,
    pub eta_dch: f64,
    /// Rated power, MW.
    pub p_max: f64,
    /// Maximum reserve-service power, MW.
    pub p_max_fcas: f64,
    /// Storage capacity, MWh.
    pub e_cap: f64,
    pub e_min: f64,
    pub e_max: f64,
    /// Degradation cost coefficient, AU$/MWh discharged.
    pub c_deg: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            eta_ch: 0.95,
            eta_dch: 0.95,
            p_max: 2.0,
            p_max_fcas: 1.0,
            e_cap: 10.0,
            e_min: 0.5,
            e_max: 9.5,
            c_deg: 1.0,
        }
    }
}

impl BatteryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_ch > 0.0 && self.eta_ch <= 1.0 && self.eta_dch > 0.0 && self.eta_dch <= 1.0)
        {
            return Err(Error::Config("efficiencies must be in (0, 1]".into()));
        }
        if !(0.0 <= self.e_min && self.e_min < self.e_max && self.e_max <= self.e_cap) {
            return Err(Error::Config(
                "energy limits must satisfy 0 <= e_min < e_max <= e_cap".into(),
            ));
        }
        if !(self.p_max_fcas > 0.0 && self.p_max_fcas <= self.p_max) {
            return Err(Error::Config("need 0 < p_max_fcas <= p_max".into()));
        }
        Ok(())
    }

    /// Reserve bid cap as a fraction of rated power.
    pub fn fcas_fraction_cap(&self) -> f64 {
        self.p_max_fcas / self.p_max
    }
}

/// Stored energy (MWh) plus the derived state of charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub energy: f64,
}

impl BatteryState {
    pub fn new(energy: f64) -> Self {
        BatteryState { energy }
    }

    pub fn soc(&self, cfg: &BatteryConfig) -> f64 {
        self.energy / cfg.e_cap
    }
}

/// One interval's bid: direction binaries plus bid fractions of rated power.
/// `a_spot` lives in [0, 1]; the three reserve fractions in
/// [0, p_max_fcas / p_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidAction {
    pub v_dch: bool,
    pub v_ch: bool,
    pub a_spot: f64,
    pub a_fast: f64,
    pub a_slow: f64,
    pub a_delay: f64,
}

impl BidAction {
    pub const ZERO: BidAction = BidAction {
        v_dch: false,
        v_ch: false,
        a_spot: 0.0,
        a_fast: 0.0,
        a_slow: 0.0,
        a_delay: 0.0,
    };

    pub fn direction_sign(&self) -> f64 {
        (self.v_ch as i8 - self.v_dch as i8) as f64
    }

    pub fn bid_sum(&self) -> f64 {
        self.a_spot + self.a_fast + self.a_slow + self.a_delay
    }

    /// Bid powers in MW: (spot, fast, slow, delay).
    pub fn powers_mw(&self, cfg: &BatteryConfig) -> (f64, f64, f64, f64) {
        (
            self.a_spot * cfg.p_max,
            self.a_fast * cfg.p_max,
            self.a_slow * cfg.p_max,
            self.a_delay * cfg.p_max,
        )
    }

    pub fn is_idle(&self) -> bool {
        (!self.v_ch && !self.v_dch) || self.bid_sum() == 0.0
    }
}

/// Outcome of checking a bid against the action constraints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BidVerdict {
    Ok,
    /// Simultaneous charge and discharge.
    DirectionConflict,
    /// Named fraction outside its cap.
    FractionOutOfRange(&'static str),
    /// Sum of bid fractions above 1.
    PowerSumExceeded,
}

impl BidVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, BidVerdict::Ok)
    }
}

/// Check every bid constraint; returns the first violated one by the order
/// direction -> per-market caps -> power sum.
pub fn validate_bid(a: &BidAction, cfg: &BatteryConfig) -> BidVerdict {
    if a.v_dch && a.v_ch {
        return BidVerdict::DirectionConflict;
    }
    if !(0.0..=1.0).contains(&a.a_spot) {
        return BidVerdict::FractionOutOfRange("a_spot");
    }
    let cap = cfg.fcas_fraction_cap();
    if !(0.0..=cap).contains(&a.a_fast) {
        return BidVerdict::FractionOutOfRange("a_fast");
    }
    if !(0.0..=cap).contains(&a.a_slow) {
        return BidVerdict::FractionOutOfRange("a_slow");
    }
    if !(0.0..=cap).contains(&a.a_delay) {
        return BidVerdict::FractionOutOfRange("a_delay");
    }
    if a.bid_sum() > 1.0 {
        return BidVerdict::PowerSumExceeded;
    }
    BidVerdict::Ok
}

/// Stored-energy change from the spot exchange: dt * (v_ch - v_dch) * p_spot.
pub fn energy_change_spot(a: &BidAction, cfg: &BatteryConfig, m: &MarketConfig) -> f64 {
    let (p_spot, _, _, _) = a.powers_mw(cfg);
    m.dt_hours * a.direction_sign() * p_spot
}

/// Stored-energy change from reserve delivery during contingency events.
///
/// The default follows the dispatch equation literally: either event type
/// moves energy in the bid direction, so a charging battery absorbs energy
/// even during a raise event. `strict_direction` instead gates raise events
/// to discharging and lower events to charging.
pub fn energy_change_fcas(
    a: &BidAction,
    raise: bool,
    lower: bool,
    cfg: &BatteryConfig,
    m: &MarketConfig,
    strict_direction: bool,
) -> f64 {
    let (_, p_fast, p_slow, p_delay) = a.powers_mw(cfg);
    let delivered = m.dt_fast * p_fast + m.dt_slow * p_slow + m.dt_delay * p_delay;
    if strict_direction {
        let mut de = 0.0;
        if raise && a.v_dch {
            de -= delivered;
        }
        if lower && a.v_ch {
            de += delivered;
        }
        de
    } else {
        let indicators = (raise as u8 + lower as u8) as f64;
        a.direction_sign() * indicators * delivered
    }
}

/// Combined per-interval energy change (spot part plus reserve part).
pub fn energy_change_total(
    a: &BidAction,
    raise: bool,
    lower: bool,
    cfg: &BatteryConfig,
    m: &MarketConfig,
    strict_direction: bool,
) -> f64 {
    energy_change_spot(a, cfg, m) + energy_change_fcas(a, raise, lower, cfg, m, strict_direction)
}

/// Result of attempting to commit an energy change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepVerdict {
    Ok(BatteryState),
    /// The energy the battery would have reached.
    LimitViolation { would_be: f64 },
}

/// Apply `delta_e` if the result stays inside the inclusive energy limits;
/// comparisons are exact, with no tolerance.
pub fn step_energy(s: BatteryState, delta_e: f64, cfg: &BatteryConfig) -> StepVerdict {
    let e = s.energy + delta_e;
    if e >= cfg.e_min && e <= cfg.e_max {
        StepVerdict::Ok(BatteryState::new(e))
    } else {
        StepVerdict::LimitViolation { would_be: e }
    }
}

/// Linear degradation cost: c * dt * v_dch * (sum of bid powers in MW).
pub fn degradation_cost(a: &BidAction, cfg: &BatteryConfig, m: &MarketConfig) -> f64 {
    if !a.v_dch {
        return 0.0;
    }
    let (p_spot, p_fast, p_slow, p_delay) = a.powers_mw(cfg);
    cfg.c_deg * m.dt_hours * (p_spot + p_fast + p_slow + p_delay)
}
