use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::battery::{energy_change_total, BatteryConfig, BidAction};
use crate::data::{Episode, MarketConfig, Normalizer, PriceVector};
use crate::env::{cash_components, EnvConfig, MarketEnv, MarketMode, StepOutcome, ZeroFeatures};
use crate::error::{Error, Result};

/// Finite-horizon dispatch instance. `known_events` controls whether the
/// optimizer sees the contingency indicators in the energy dynamics or
/// assumes an event-free horizon (revenue is availability-based either way).
#[derive(Debug, Clone)]
pub struct DispatchProblem {
    pub prices: Vec<PriceVector>,
    pub raise: Vec<bool>,
    pub lower: Vec<bool>,
    pub battery: BatteryConfig,
    pub market: MarketConfig,
    pub initial_energy: f64,
    pub mode: MarketMode,
    pub known_events: bool,
    pub strict_direction: bool,
}

impl DispatchProblem {
    pub fn from_episode(episode: &Episode, env_cfg: &EnvConfig, initial_energy: f64) -> Self {
        DispatchProblem {
            prices: episode.prices.clone(),
            raise: episode.raise.clone(),
            lower: episode.lower.clone(),
            battery: env_cfg.battery.clone(),
            market: env_cfg.market.clone(),
            initial_energy,
            mode: env_cfg.mode,
            known_events: true,
            strict_direction: env_cfg.strict_direction,
        }
    }

    pub fn horizon(&self) -> usize {
        self.prices.len()
    }

    fn validate(&self) -> Result<()> {
        if self.prices.is_empty() {
            return Err(Error::argument("empty dispatch horizon"));
        }
        if self.raise.len() != self.prices.len() || self.lower.len() != self.prices.len() {
            return Err(Error::argument("event series length mismatch"));
        }
        self.battery.validate()?;
        self.market.validate()?;
        if self.initial_energy < self.battery.e_min || self.initial_energy > self.battery.e_max {
            return Err(Error::argument(format!(
                "initial energy {} outside [{}, {}]",
                self.initial_energy, self.battery.e_min, self.battery.e_max
            )));
        }
        Ok(())
    }
}

/// Solver discretization: stored-energy grid pitch and bid levels per market.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub soc_step: f64,
    pub power_levels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            soc_step: 0.05,
            power_levels: 5,
        }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.soc_step <= 0.0 {
            return Err(Error::argument("soc_step must be > 0"));
        }
        if self.power_levels < 2 {
            return Err(Error::argument("power_levels must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DispatchSolution {
    pub actions: Vec<BidAction>,
    pub objective: f64,
    /// Gridded energy trajectory, length horizon + 1.
    pub energies: Vec<f64>,
}

struct EnergyGrid {
    e_min: f64,
    step: f64,
    n: usize,
}

impl EnergyGrid {
    fn new(bat: &BatteryConfig, step: f64) -> Self {
        let n = ((bat.e_max - bat.e_min) / step + 1e-9).floor() as usize + 1;
        EnergyGrid {
            e_min: bat.e_min,
            step,
            n,
        }
    }

    fn point(&self, i: usize) -> f64 {
        self.e_min + i as f64 * self.step
    }

    fn snap(&self, e: f64) -> usize {
        let i = ((e - self.e_min) / self.step).round();
        (i.max(0.0) as usize).min(self.n - 1)
    }
}

/// All discrete actions in a fixed lexicographic order (idle, then charge
/// combinations, then discharge), so equal-value ties always resolve to the
/// lexicographically smallest action sequence.
fn enumerate_actions(bat: &BatteryConfig, levels: usize, mode: MarketMode) -> Vec<BidAction> {
    let cap = bat.fcas_fraction_cap();
    let frac = |k: usize| k as f64 / (levels - 1) as f64;
    let spot_levels: Vec<f64> = match mode {
        MarketMode::FcasOnly => vec![0.0],
        _ => (0..levels).map(frac).collect(),
    };
    let fcas_levels: Vec<f64> = match mode {
        MarketMode::SpotOnly => vec![0.0],
        _ => (0..levels).map(|k| frac(k) * cap).collect(),
    };

    let mut actions = vec![BidAction::ZERO];
    for v_dch in [false, true] {
        for &a_spot in &spot_levels {
            for &a_fast in &fcas_levels {
                for &a_slow in &fcas_levels {
                    for &a_delay in &fcas_levels {
                        if a_spot + a_fast + a_slow + a_delay > 1.0 {
                            continue;
                        }
                        actions.push(BidAction {
                            v_dch,
                            v_ch: !v_dch,
                            a_spot,
                            a_fast,
                            a_slow,
                            a_delay,
                        });
                    }
                }
            }
        }
    }
    actions
}

/// (cash, delta-energy) of one action at one interval, identical accounting
/// to the environment's step.
fn step_eval(p: &DispatchProblem, t: usize, a: &BidAction) -> (f64, f64) {
    let (spot_rev, fcas_rev, deg) = cash_components(a, &p.prices[t], &p.battery, &p.market);
    let (raise, lower) = if p.known_events {
        (p.raise[t], p.lower[t])
    } else {
        (false, false)
    };
    let de = energy_change_total(a, raise, lower, &p.battery, &p.market, p.strict_direction);
    (spot_rev + fcas_rev - deg, de)
}

/// Hindsight-optimal dispatch by backward dynamic programming over the
/// (interval, energy-grid) state space. Exact on the discretized problem and
/// deterministic, including tie-breaks.
pub fn pio_solve_dp(p: &DispatchProblem, grid: &GridSpec) -> Result<DispatchSolution> {
    p.validate()?;
    grid.validate()?;
    let horizon = p.horizon();
    let actions = enumerate_actions(&p.battery, grid.power_levels, p.mode);
    let g = EnergyGrid::new(&p.battery, grid.soc_step);

    // Per-interval evaluation tables.
    let mut cash = vec![0.0; horizon * actions.len()];
    let mut de = vec![0.0; horizon * actions.len()];
    for t in 0..horizon {
        for (ai, a) in actions.iter().enumerate() {
            let (c, d) = step_eval(p, t, a);
            cash[t * actions.len() + ai] = c;
            de[t * actions.len() + ai] = d;
        }
    }

    let mut value_next = vec![0.0f64; g.n];
    let mut value_cur = vec![0.0f64; g.n];
    let mut choice = vec![0u32; horizon * g.n];

    for t in (0..horizon).rev() {
        for i in 0..g.n {
            let e = g.point(i);
            let mut best = f64::NEG_INFINITY;
            let mut best_a = u32::MAX;
            for ai in 0..actions.len() {
                let e_next = e + de[t * actions.len() + ai];
                if e_next < p.battery.e_min || e_next > p.battery.e_max {
                    continue;
                }
                let j = g.snap(e_next);
                let val = cash[t * actions.len() + ai] + value_next[j];
                if val > best {
                    best = val;
                    best_a = ai as u32;
                }
            }
            debug_assert!(best_a != u32::MAX, "idle is always feasible");
            value_cur[i] = best;
            choice[t * g.n + i] = best_a;
        }
        std::mem::swap(&mut value_next, &mut value_cur);
    }

    let i0 = g.snap(p.initial_energy);
    let objective = value_next[i0];

    let mut actions_out = Vec::with_capacity(horizon);
    let mut energies = Vec::with_capacity(horizon + 1);
    let mut i = i0;
    energies.push(g.point(i));
    for t in 0..horizon {
        let ai = choice[t * g.n + i] as usize;
        let a = actions[ai];
        let e_next = g.point(i) + de[t * actions.len() + ai];
        i = g.snap(e_next);
        energies.push(g.point(i));
        actions_out.push(a);
    }

    Ok(DispatchSolution {
        actions: actions_out,
        objective,
        energies,
    })
}

/// Exhaustive validator over the same discretization and tie-break as the
/// dynamic program. Guarded to small instances.
pub fn brute_force_solve(p: &DispatchProblem, grid: &GridSpec) -> Result<DispatchSolution> {
    p.validate()?;
    grid.validate()?;
    let horizon = p.horizon();
    if horizon > 6 || grid.power_levels > 4 {
        return Err(Error::Size(format!(
            "brute force guard: horizon {horizon} (max 6), power_levels {} (max 4)",
            grid.power_levels
        )));
    }
    let actions = enumerate_actions(&p.battery, grid.power_levels, p.mode);
    let combos = (actions.len() as f64).powi(horizon as i32);
    if combos > 2e9 {
        return Err(Error::Size(format!(
            "brute force guard: {combos:.3e} sequences"
        )));
    }
    let g = EnergyGrid::new(&p.battery, grid.soc_step);

    fn recurse(
        p: &DispatchProblem,
        g: &EnergyGrid,
        actions: &[BidAction],
        t: usize,
        i: usize,
    ) -> (f64, Vec<usize>) {
        if t == p.horizon() {
            return (0.0, Vec::new());
        }
        let mut best = f64::NEG_INFINITY;
        let mut best_seq: Vec<usize> = Vec::new();
        for (ai, a) in actions.iter().enumerate() {
            let (cash, de) = step_eval(p, t, a);
            let e_next = g.point(i) + de;
            if e_next < p.battery.e_min || e_next > p.battery.e_max {
                continue;
            }
            let (sub, seq) = recurse(p, g, actions, t + 1, g.snap(e_next));
            let val = cash + sub;
            if val > best {
                best = val;
                best_seq = {
                    let mut s = Vec::with_capacity(seq.len() + 1);
                    s.push(ai);
                    s.extend(seq);
                    s
                };
            }
        }
        (best, best_seq)
    }

    let i0 = g.snap(p.initial_energy);
    let (objective, seq) = recurse(p, &g, &actions, 0, i0);

    let mut energies = vec![g.point(i0)];
    let mut out = Vec::with_capacity(seq.len());
    let mut i = i0;
    for (t, &ai) in seq.iter().enumerate() {
        let (_, de) = step_eval(p, t, &actions[ai]);
        i = g.snap(g.point(i) + de);
        energies.push(g.point(i));
        out.push(actions[ai]);
    }

    Ok(DispatchSolution {
        actions: out,
        objective,
        energies,
    })
}

/// Refine the grid (halving the pitch) until the objective self-change drops
/// below `rel_tol`; returns the last solution and the pitch used.
pub fn pio_solve_refined(
    p: &DispatchProblem,
    grid: &GridSpec,
    rel_tol: f64,
    max_halvings: usize,
) -> Result<(DispatchSolution, f64)> {
    let mut step = grid.soc_step;
    let mut sol = pio_solve_dp(p, &GridSpec { soc_step: step, ..*grid })?;
    for _ in 0..max_halvings {
        let next_step = step / 2.0;
        let next = pio_solve_dp(p, &GridSpec { soc_step: next_step, ..*grid })?;
        let change = (next.objective - sol.objective).abs() / sol.objective.abs().max(1.0);
        sol = next;
        step = next_step;
        if change < rel_tol {
            break;
        }
    }
    Ok((sol, step))
}

/// Price forecaster plugged into the rolling predict-and-optimize loop.
pub trait Forecaster {
    fn predict(&self, history: &[PriceVector], horizon: usize) -> Vec<PriceVector>;
    fn name(&self) -> &'static str;
}

/// Repeats the last observed price vector.
pub struct PersistenceForecaster;

impl Forecaster for PersistenceForecaster {
    fn predict(&self, history: &[PriceVector], horizon: usize) -> Vec<PriceVector> {
        let last = *history.last().expect("non-empty history");
        vec![last; horizon]
    }

    fn name(&self) -> &'static str {
        "persistence"
    }
}

/// Repeats the exponentially smoothed history (per market).
pub struct EmaForecaster {
    pub tau: f64,
}

impl Forecaster for EmaForecaster {
    fn predict(&self, history: &[PriceVector], horizon: usize) -> Vec<PriceVector> {
        let mut ema = history[0].as_array();
        for p in &history[1..] {
            let a = p.as_array();
            for (e, v) in ema.iter_mut().zip(a) {
                *e = self.tau * *e + (1.0 - self.tau) * v;
            }
        }
        vec![PriceVector::from_array(ema); horizon]
    }

    fn name(&self) -> &'static str {
        "ema"
    }
}

/// Oracle forecaster over a known series; `history` must be its prefix.
pub struct PerfectForecaster {
    pub series: Vec<PriceVector>,
}

impl Forecaster for PerfectForecaster {
    fn predict(&self, history: &[PriceVector], horizon: usize) -> Vec<PriceVector> {
        let start = history.len().min(self.series.len());
        let end = (start + horizon).min(self.series.len());
        let mut out = self.series[start..end].to_vec();
        while out.len() < horizon {
            out.push(*self.series.last().expect("non-empty series"));
        }
        out
    }

    fn name(&self) -> &'static str {
        "perfect"
    }
}

/// One rolling-horizon bid: forecast, solve the deterministic lookahead
/// dispatch assuming no contingency events, return the first action.
pub fn dmpc_bid(
    history: &[PriceVector],
    forecaster: &dyn Forecaster,
    lookahead: usize,
    battery: &BatteryConfig,
    market: &MarketConfig,
    mode: MarketMode,
    strict_direction: bool,
    current_energy: f64,
    grid: &GridSpec,
) -> Result<BidAction> {
    if history.is_empty() {
        return Err(Error::argument("dmpc history is empty"));
    }
    if lookahead == 0 {
        return Ok(BidAction::ZERO);
    }
    let forecast = forecaster.predict(history, lookahead);
    if forecast.len() != lookahead {
        return Err(Error::Contract(format!(
            "forecaster `{}` returned {} prices for horizon {lookahead}",
            forecaster.name(),
            forecast.len()
        )));
    }
    let n = forecast.len();
    let problem = DispatchProblem {
        prices: forecast,
        raise: vec![false; n],
        lower: vec![false; n],
        battery: battery.clone(),
        market: market.clone(),
        initial_energy: current_energy,
        mode,
        known_events: true, // flags are all zero anyway
        strict_direction,
    };
    Ok(pio_solve_dp(&problem, grid)?.actions[0])
}

/// Roll the predict-and-optimize controller through one episode.
pub fn dmpc_rollout(
    episode: &Arc<Episode>,
    env_cfg: &EnvConfig,
    forecaster: &dyn Forecaster,
    lookahead: usize,
    grid: &GridSpec,
    initial_soc: f64,
) -> Result<Vec<StepOutcome>> {
    let mut env = MarketEnv::new(env_cfg.clone(), Normalizer::identity(), episode.clone())?;
    let zf = ZeroFeatures { dim: 0 };
    env.reset(episode.clone(), &zf, initial_soc)?;
    let mut energy = initial_soc * env_cfg.battery.e_cap;
    let mut outcomes = Vec::with_capacity(episode.len());
    for t in 0..episode.len() {
        // Known prices strictly before t, with the first interval standing
        // in at t = 0 (the same convention as the observation state).
        let history: &[PriceVector] = if t == 0 {
            &episode.prices[..1]
        } else {
            &episode.prices[..t]
        };
        let horizon = lookahead.min(episode.len() - t);
        let bid = dmpc_bid(
            history,
            forecaster,
            horizon,
            &env_cfg.battery,
            &env_cfg.market,
            env_cfg.mode,
            env_cfg.strict_direction,
            energy,
            grid,
        )?;
        let out = env.step(&zf, &bid)?;
        energy = out.info.energy_after;
        let done = out.done;
        outcomes.push(out);
        if done {
            break;
        }
    }
    Ok(outcomes)
}

/// Solve the hindsight problem for an episode and replay the plan through
/// the environment. With grid pitches that divide every possible energy
/// change (spot-only bids), the replay is violation-free and its revenue
/// matches the objective; event-driven reserve flows can snap off-grid, so
/// comparisons against realized totals carry the grid tolerance.
pub fn pio_rollout(
    episode: &Arc<Episode>,
    env_cfg: &EnvConfig,
    grid: &GridSpec,
    known_events: bool,
    initial_soc: f64,
) -> Result<(DispatchSolution, Vec<StepOutcome>)> {
    let mut problem =
        DispatchProblem::from_episode(episode, env_cfg, initial_soc * env_cfg.battery.e_cap);
    problem.known_events = known_events;
    let solution = pio_solve_dp(&problem, grid)?;

    let mut env = MarketEnv::new(env_cfg.clone(), Normalizer::identity(), episode.clone())?;
    let zf = ZeroFeatures { dim: 0 };
    env.reset(episode.clone(), &zf, initial_soc)?;
    let mut outcomes = Vec::with_capacity(solution.actions.len());
    for a in &solution.actions {
        let out = env.step(&zf, a)?;
        let done = out.done;
        outcomes.push(out);
        if done {
            break;
        }
    }
    Ok((solution, outcomes))
}
