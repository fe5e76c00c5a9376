use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::battery::BatteryConfig;
use crate::data::{price_csv_string, ContingencySeries, PriceSeries};
use crate::env::{episode_revenue, MarketMode, RevenueBreakdown, StepOutcome};
use crate::error::Result;
use crate::interpret::SpreadBin;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of an input dataset: hash of its canonical CSV serialization,
/// stable across formatting differences in the source file.
pub fn data_fingerprint(series: &PriceSeries, events: &ContingencySeries) -> String {
    sha256_hex(price_csv_string(series, events).as_bytes())
}

/// Identity of one run: seed, full config snapshot, input-data fingerprint
/// and (when a model is involved) the checkpoint content hash. Every report
/// embeds `hash()` so outputs trace back to exactly one manifest; nothing
/// here depends on wall time, so identical runs produce identical ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub data_fingerprint: String,
    pub checkpoint_hash: Option<String>,
}

impl RunManifest {
    pub fn new(
        seed: u64,
        config: serde_json::Value,
        data_fingerprint: String,
        checkpoint_hash: Option<String>,
    ) -> Self {
        let mut m = RunManifest {
            run_id: String::new(),
            seed,
            config,
            data_fingerprint,
            checkpoint_hash,
        };
        m.run_id = m.hash()[..12].to_string();
        m
    }

    /// Hash over the manifest content (run_id excluded).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.config.to_string().as_bytes());
        h.update(self.data_fingerprint.as_bytes());
        if let Some(c) = &self.checkpoint_hash {
            h.update(c.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::store::write_atomic(path, self.to_json().as_bytes())
    }
}

/// Aggregate bidding behavior over an evaluation window: total bid power per
/// sub-market (MW summed over intervals), contingency response counts,
/// idle counts at the energy bounds, and spread-binned arbitrage bid energy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    /// MW-intervals bid into the spot market.
    pub spot_mw: f64,
    /// MW-intervals per reserve sub-market; direction splits fast/slow/delay
    /// bids into the raise (discharging) or lower (charging) product.
    pub fr_mw: f64,
    pub fl_mw: f64,
    pub sr_mw: f64,
    pub sl_mw: f64,
    pub dr_mw: f64,
    pub dl_mw: f64,
    pub raise_occurred: u64,
    pub raise_delivered: u64,
    pub lower_occurred: u64,
    pub lower_delivered: u64,
    pub idle_empty: u64,
    pub idle_full: u64,
    pub idle_total: u64,
    /// Arbitrage bid energy (MWh) per spot-vs-EMA spread bin.
    pub charge_bins: [f64; SpreadBin::COUNT],
    pub discharge_bins: [f64; SpreadBin::COUNT],
}

impl BehaviorStats {
    pub fn from_outcomes(
        episodes: &[Vec<StepOutcome>],
        bat: &BatteryConfig,
        dt_hours: f64,
    ) -> Self {
        let mut s = BehaviorStats::default();
        for outcomes in episodes {
            for o in outcomes {
                let a = &o.info.executed;
                let (p_spot, p_fast, p_slow, p_delay) = a.powers_mw(bat);
                s.spot_mw += p_spot;
                if a.v_dch {
                    s.fr_mw += p_fast;
                    s.sr_mw += p_slow;
                    s.dr_mw += p_delay;
                }
                if a.v_ch {
                    s.fl_mw += p_fast;
                    s.sl_mw += p_slow;
                    s.dl_mw += p_delay;
                }

                let fcas_power = p_fast + p_slow + p_delay;
                if o.info.raise {
                    s.raise_occurred += 1;
                    if a.v_dch && fcas_power > 0.0 {
                        s.raise_delivered += 1;
                    }
                }
                if o.info.lower {
                    s.lower_occurred += 1;
                    if a.v_ch && fcas_power > 0.0 {
                        s.lower_delivered += 1;
                    }
                }

                if a.is_idle() {
                    s.idle_total += 1;
                    if (o.info.energy_after - bat.e_min).abs() < 1e-9 {
                        s.idle_empty += 1;
                    } else if (o.info.energy_after - bat.e_max).abs() < 1e-9 {
                        s.idle_full += 1;
                    }
                }

                let spread = o.info.price.spot - o.info.ema_used;
                let bin = SpreadBin::index(spread);
                let bid_mwh = p_spot * dt_hours;
                if a.v_ch {
                    s.charge_bins[bin] += bid_mwh;
                } else if a.v_dch {
                    s.discharge_bins[bin] += bid_mwh;
                }
            }
        }
        s
    }

    pub fn to_csv(&self, manifest_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = manifest_hash {
            out.push_str(&format!("# manifest={h}\n"));
        }
        out.push_str("metric,value\n");
        let kv = [
            ("spot_mw", self.spot_mw),
            ("fr_mw", self.fr_mw),
            ("fl_mw", self.fl_mw),
            ("sr_mw", self.sr_mw),
            ("sl_mw", self.sl_mw),
            ("dr_mw", self.dr_mw),
            ("dl_mw", self.dl_mw),
        ];
        for (k, v) in kv {
            out.push_str(&format!("{k},{v}\n"));
        }
        out.push_str(&format!(
            "raise_response,{}/{}\n",
            self.raise_delivered, self.raise_occurred
        ));
        out.push_str(&format!(
            "lower_response,{}/{}\n",
            self.lower_delivered, self.lower_occurred
        ));
        out.push_str(&format!("idle_empty,{}\n", self.idle_empty));
        out.push_str(&format!("idle_full,{}\n", self.idle_full));
        out.push_str(&format!("idle_total,{}\n", self.idle_total));
        for (i, label) in SpreadBin::LABELS.iter().enumerate() {
            out.push_str(&format!(
                "charge_bid_mwh[{label}],{}\n",
                self.charge_bins[i]
            ));
        }
        for (i, label) in SpreadBin::LABELS.iter().enumerate() {
            out.push_str(&format!(
                "discharge_bid_mwh[{label}],{}\n",
                self.discharge_bins[i]
            ));
        }
        out
    }
}

/// One line of the strategy-comparison table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevenueRow {
    pub strategy: String,
    pub mode: MarketMode,
    pub revenue: RevenueBreakdown,
}

pub fn mode_name(mode: MarketMode) -> &'static str {
    match mode {
        MarketMode::SpotOnly => "spot",
        MarketMode::FcasOnly => "fcas",
        MarketMode::Joint => "joint",
    }
}

pub fn revenue_table_csv(rows: &[RevenueRow], manifest_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = manifest_hash {
        out.push_str(&format!("# manifest={h}\n"));
    }
    out.push_str("strategy,mode,spot_revenue,fcas_revenue,degradation,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy,
            mode_name(r.mode),
            r.revenue.spot,
            r.revenue.fcas,
            r.revenue.degradation,
            r.revenue.total
        ));
    }
    out
}

/// Sum per-episode revenue into one breakdown.
pub fn total_revenue(episodes: &[Vec<StepOutcome>]) -> RevenueBreakdown {
    let mut total = RevenueBreakdown::default();
    for outcomes in episodes {
        let r = episode_revenue(outcomes);
        total.spot += r.spot;
        total.fcas += r.fcas;
        total.degradation += r.degradation;
    }
    total.total = total.spot + total.fcas - total.degradation;
    total
}

/// Per-interval cumulative cash series across the whole eval window, for
/// revenue-over-time plots.
pub fn cumulative_cash(episodes: &[Vec<StepOutcome>]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for outcomes in episodes {
        for o in outcomes {
            acc += o.cash_flow;
            out.push(acc);
        }
    }
    out
}

pub fn cumulative_csv(series: &[(String, Vec<f64>)], manifest_hash: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(h) = manifest_hash {
        out.push_str(&format!("# manifest={h}\n"));
    }
    out.push_str("t");
    for (name, _) in series {
        out.push_str(&format!(",{name}"));
    }
    out.push('\n');
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    for t in 0..len {
        out.push_str(&format!("{t}"));
        for (_, v) in series {
            match v.get(t) {
                Some(x) => out.push_str(&format!(",{x}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Benchmark strategy names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    AttnDrl,
    MlpDrl,
    DmpcPersistence,
    DmpcEma,
    Pio,
}

impl StrategyKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "attn-drl" => Ok(StrategyKind::AttnDrl),
            "mlp-drl" => Ok(StrategyKind::MlpDrl),
            "dmpc-persistence" => Ok(StrategyKind::DmpcPersistence),
            "dmpc-ema" => Ok(StrategyKind::DmpcEma),
            "pio" => Ok(StrategyKind::Pio),
            other => Err(crate::error::Error::Argument(format!(
                "unknown strategy `{other}` (expected attn-drl, mlp-drl, dmpc-persistence, dmpc-ema, pio)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::AttnDrl => "attn-drl",
            StrategyKind::MlpDrl => "mlp-drl",
            StrategyKind::DmpcPersistence => "dmpc-persistence",
            StrategyKind::DmpcEma => "dmpc-ema",
            StrategyKind::Pio => "pio",
        }
    }
}
