use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::battery::{
    degradation_cost, energy_change_total, step_energy, BatteryConfig, BatteryState, BidAction,
    StepVerdict,
};
use crate::data::{Episode, MarketConfig, Normalizer, PriceVector, N_MARKETS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reward shaping knobs: spot-price EMA smoothing, the buy-low/sell-high
/// bonus weight, and the energy-limit violation penalty.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub tau_s: f64,
    pub beta_s: f64,
    pub penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            tau_s: 0.9,
            beta_s: 10.0,
            penalty: 50.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_s < 1.0) {
            return Err(Error::Config("tau_s must be in (0,1)".into()));
        }
        if self.beta_s < 0.0 || self.penalty < 0.0 {
            return Err(Error::Config("beta_s and penalty must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which markets the environment lets bids through to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarketMode {
    SpotOnly,
    FcasOnly,
    Joint,
}

impl MarketMode {
    /// Zero out the bids of excluded markets; the physics and the rewards
    /// both see the masked action.
    pub fn mask(&self, a: &BidAction) -> BidAction {
        match self {
            MarketMode::Joint => *a,
            MarketMode::SpotOnly => BidAction {
                a_fast: 0.0,
                a_slow: 0.0,
                a_delay: 0.0,
                ..*a
            },
            MarketMode::FcasOnly => BidAction { a_spot: 0.0, ..*a },
        }
    }
}

/// Everything the environment needs besides data.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub market: MarketConfig,
    pub battery: BatteryConfig,
    pub reward: RewardConfig,
    pub mode: MarketMode,
    pub strict_direction: bool,
    pub terminate_on_violation: bool,
}

impl EnvConfig {
    pub fn new(market: MarketConfig, battery: BatteryConfig, reward: RewardConfig) -> Self {
        EnvConfig {
            market,
            battery,
            reward,
            mode: MarketMode::Joint,
            strict_direction: false,
            terminate_on_violation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.battery.validate()?;
        self.reward.validate()
    }
}

/// Supplies the temporal feature slice of the observation. The environment
/// hands it the normalized history window and embeds whatever comes back.
pub trait FeatureSource {
    fn feature_dim(&self) -> usize;
    fn seg_len(&self) -> usize;
    fn features(&self, normalized_segment: &Tensor) -> Vec<f64>;
}

/// Feature slice pinned to zeros: the plain-MLP ablation.
pub struct ZeroFeatures {
    pub dim: usize,
}

impl FeatureSource for ZeroFeatures {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn seg_len(&self) -> usize {
        1
    }

    fn features(&self, _seg: &Tensor) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

/// Observation at one decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub soc_prev: f64,
    pub price_prev: PriceVector,
    pub feature_prev: Vec<f64>,
    pub t: usize,
    pub ema_spot: f64,
}

/// Flat network input: [soc, normalized prices, features].
pub fn assemble_state_vec(
    soc: f64,
    price: &PriceVector,
    features: &[f64],
    norm: &Normalizer,
) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + N_MARKETS + features.len());
    v.push(soc);
    v.extend_from_slice(&norm.normalize(price));
    v.extend_from_slice(features);
    v
}

impl EnvState {
    pub fn to_vec(&self, norm: &Normalizer) -> Vec<f64> {
        assemble_state_vec(self.soc_prev, &self.price_prev, &self.feature_prev, norm)
    }
}

/// Per-step accounting detail.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub executed: BidAction,
    pub attempted: BidAction,
    pub price: PriceVector,
    pub raise: bool,
    pub lower: bool,
    pub spot_revenue: f64,
    pub fcas_revenue: f64,
    pub degradation: f64,
    pub energy_after: f64,
    /// EMA value the shaping terms saw this step.
    pub ema_used: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// True per-step revenue in AU$ (spot + reserve availability minus
    /// degradation), as opposed to the shaped training reward.
    pub cash_flow: f64,
    pub violated: bool,
    pub info: StepInfo,
}

pub fn update_ema(ema_prev: f64, spot: f64, cfg: &RewardConfig) -> f64 {
    cfg.tau_s * ema_prev + (1.0 - cfg.tau_s) * spot
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Charge/discharge guideline indicators: buy below the EMA, sell above it.
pub fn indicators(spot: f64, ema: f64) -> (f64, f64) {
    (sgn(ema - spot), sgn(spot - ema))
}

/// Shaped arbitrage reward over bid fractions (not MW).
pub fn reward_spot(
    a: &BidAction,
    spot: f64,
    ema: f64,
    cfg: &RewardConfig,
    bat: &BatteryConfig,
) -> f64 {
    let (i_ch, i_dch) = indicators(spot, ema);
    let vd = a.v_dch as u8 as f64;
    let vc = a.v_ch as u8 as f64;
    let inherent = a.a_spot * spot * (vd * bat.eta_dch - vc / bat.eta_ch);
    let guideline = cfg.beta_s
        * a.a_spot
        * (spot - ema).abs()
        * (i_dch * vd * bat.eta_dch + i_ch * vc / bat.eta_ch);
    inherent + guideline
}

/// Availability rewards from the three reserve pairs, in fraction units.
pub fn reward_fcas(a: &BidAction, p: &PriceVector, bat: &BatteryConfig) -> (f64, f64, f64) {
    let vd = a.v_dch as u8 as f64;
    let vc = a.v_ch as u8 as f64;
    let dch = vd * bat.eta_dch;
    let ch = vc / bat.eta_ch;
    (
        a.a_fast * (dch * p.fr + ch * p.fl),
        a.a_slow * (dch * p.sr + ch * p.sl),
        a.a_delay * (dch * p.dr + ch * p.dl),
    )
}

/// Market environment over one episode. Single-owner mutable state; run
/// independent instances for parallel rollouts.
pub struct MarketEnv {
    cfg: EnvConfig,
    norm: Normalizer,
    episode: Arc<Episode>,
    battery: BatteryState,
    state: Option<EnvState>,
}

impl MarketEnv {
    pub fn new(cfg: EnvConfig, norm: Normalizer, episode: Arc<Episode>) -> Result<Self> {
        cfg.validate()?;
        if episode.is_empty() {
            return Err(Error::argument("episode is empty"));
        }
        Ok(MarketEnv {
            cfg,
            norm,
            battery: BatteryState::new(0.0),
            episode,
            state: None,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn episode(&self) -> &Arc<Episode> {
        &self.episode
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    pub fn state_vec(&self, s: &EnvState) -> Vec<f64> {
        s.to_vec(&self.norm)
    }

    /// Normalized history window ending just before step `t`.
    pub fn normalized_segment(&self, t: usize, seg_len: usize) -> Tensor {
        normalized_segment(&self.episode, t, seg_len, &self.norm)
    }

    pub fn reset(
        &mut self,
        episode: Arc<Episode>,
        features: &dyn FeatureSource,
        initial_soc: f64,
    ) -> Result<EnvState> {
        if episode.is_empty() {
            return Err(Error::argument("episode is empty"));
        }
        let bat = &self.cfg.battery;
        let energy = initial_soc * bat.e_cap;
        if energy < bat.e_min || energy > bat.e_max {
            return Err(Error::argument(format!(
                "initial_soc {initial_soc} outside [{}, {}]",
                bat.e_min / bat.e_cap,
                bat.e_max / bat.e_cap
            )));
        }
        self.episode = episode;
        self.battery = BatteryState::new(energy);
        let seg = self.normalized_segment(0, features.seg_len());
        let state = EnvState {
            soc_prev: initial_soc,
            price_prev: self.episode.price_before(0),
            feature_prev: features.features(&seg),
            t: 0,
            ema_spot: self.episode.prices[0].spot,
        };
        self.state = Some(state.clone());
        Ok(state)
    }

    pub fn step(&mut self, features: &dyn FeatureSource, bid: &BidAction) -> Result<StepOutcome> {
        let state = self
            .state
            .clone()
            .ok_or_else(|| Error::State("step before reset".into()))?;
        let t = state.t;
        if t >= self.episode.len() {
            return Err(Error::State(format!(
                "episode finished at t = {}",
                self.episode.len()
            )));
        }
        let price = self.episode.prices[t];
        let raise = self.episode.raise[t];
        let lower = self.episode.lower[t];
        let bat = self.cfg.battery.clone();
        let market = self.cfg.market.clone();

        let attempted = self.cfg.mode.mask(bid);
        let delta_e = energy_change_total(
            &attempted,
            raise,
            lower,
            &bat,
            &market,
            self.cfg.strict_direction,
        );

        let (executed, violated) = match step_energy(self.battery, delta_e, &bat) {
            StepVerdict::Ok(next) => {
                self.battery = next;
                (attempted, false)
            }
            StepVerdict::LimitViolation { .. } => (BidAction::ZERO, true),
        };

        let ema = update_ema(state.ema_spot, price.spot, &self.cfg.reward);
        let r_spot = reward_spot(&executed, price.spot, ema, &self.cfg.reward, &bat);
        let (r_fast, r_slow, r_delay) = reward_fcas(&executed, &price, &bat);
        let mut reward = r_spot + r_fast + r_slow + r_delay;
        if violated {
            reward -= self.cfg.reward.penalty;
        }

        let (spot_revenue, fcas_revenue, degradation) =
            cash_components(&executed, &price, &bat, &market);
        let cash_flow = spot_revenue + fcas_revenue - degradation;

        let t_next = t + 1;
        let done = t_next == self.episode.len()
            || (violated && self.cfg.terminate_on_violation);
        let seg = self.normalized_segment(t_next, features.seg_len());
        let next_state = EnvState {
            soc_prev: self.battery.soc(&bat),
            price_prev: self.episode.price_before(t_next),
            feature_prev: features.features(&seg),
            t: t_next,
            ema_spot: ema,
        };
        self.state = if done { None } else { Some(next_state.clone()) };

        Ok(StepOutcome {
            next_state,
            reward,
            done,
            cash_flow,
            violated,
            info: StepInfo {
                executed,
                attempted,
                price,
                raise,
                lower,
                spot_revenue,
                fcas_revenue,
                degradation,
                energy_after: self.battery.energy,
                ema_used: ema,
            },
        })
    }
}

/// True per-interval money flows for an executed action:
/// (spot revenue, reserve availability revenue, degradation cost), all in
/// AU$ over MW bid powers. Shared by the environment and the dispatch
/// oracles so their accounting cannot drift apart.
pub fn cash_components(
    a: &BidAction,
    price: &PriceVector,
    bat: &BatteryConfig,
    m: &MarketConfig,
) -> (f64, f64, f64) {
    let (p_spot, p_fast, p_slow, p_delay) = a.powers_mw(bat);
    let vd = a.v_dch as u8 as f64;
    let vc = a.v_ch as u8 as f64;
    let spot_revenue = m.dt_hours * (vd * bat.eta_dch - vc / bat.eta_ch) * price.spot * p_spot;
    let fcas_revenue = m.dt_hours
        * (vd * bat.eta_dch * (price.fr * p_fast + price.sr * p_slow + price.dr * p_delay)
            + vc / bat.eta_ch * (price.fl * p_fast + price.sl * p_slow + price.dl * p_delay));
    let degradation = degradation_cost(a, bat, m);
    (spot_revenue, fcas_revenue, degradation)
}

/// Normalized history window for any (episode, t); shared by the environment
/// and replay reconstruction so both see identical inputs.
pub fn normalized_segment(
    episode: &Episode,
    t: usize,
    seg_len: usize,
    norm: &Normalizer,
) -> Tensor {
    let rows = episode.segment_rows(t, seg_len);
    let mut out = Tensor::zeros(seg_len, N_MARKETS);
    for (r, p) in rows.iter().enumerate() {
        let z = norm.normalize(p);
        for (c, v) in z.iter().enumerate() {
            out.set(r, c, *v);
        }
    }
    out
}

/// Episode-level revenue split: (spot, reserve, degradation, total).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RevenueBreakdown {
    pub spot: f64,
    pub fcas: f64,
    pub degradation: f64,
    pub total: f64,
}

pub fn episode_revenue(outcomes: &[StepOutcome]) -> RevenueBreakdown {
    let mut r = RevenueBreakdown::default();
    for o in outcomes {
        r.spot += o.info.spot_revenue;
        r.fcas += o.info.fcas_revenue;
        r.degradation += o.info.degradation;
    }
    r.total = r.spot + r.fcas - r.degradation;
    r
}

/// Step-trace CSV (one row per interval).
pub fn trace_csv(outcomes: &[StepOutcome], manifest_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = manifest_hash {
        out.push_str(&format!("# manifest={h}\n"));
    }
    out.push_str("t,soc,v_dch,v_ch,a_spot,a_fast,a_slow,a_delay,reward,cash_flow,violated\n");
    for (i, o) in outcomes.iter().enumerate() {
        let a = &o.info.executed;
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{},{},{}\n",
            o.next_state.soc_prev,
            a.v_dch as u8,
            a.v_ch as u8,
            a.a_spot,
            a.a_fast,
            a.a_slow,
            a.a_delay,
            o.reward,
            o.cash_flow,
            o.violated as u8
        ));
    }
    out
}
