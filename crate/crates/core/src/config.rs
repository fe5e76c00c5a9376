use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::GridSpec;
use crate::battery::BatteryConfig;
use crate::data::{MarketConfig, SynthConfig};
use crate::env::{EnvConfig, MarketMode, RewardConfig};
use crate::error::{Error, Result};
use crate::extractor::ExtractorConfig;
use crate::sac::SacConfig;

/// Training-run shape: episodes to run, split, market mode and the two
/// environment behavior flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub initial_soc: f64,
    pub train_fraction: f64,
    pub mode: MarketMode,
    pub strict_direction: bool,
    pub terminate_on_violation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 50,
            initial_soc: 0.5,
            train_fraction: 10.0 / 12.0,
            mode: MarketMode::Joint,
            strict_direction: false,
            terminate_on_violation: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmpcConfig {
    pub lookahead: usize,
    pub grid: GridSpec,
    pub ema_tau: f64,
}

impl Default for DmpcConfig {
    fn default() -> Self {
        DmpcConfig {
            lookahead: 48,
            grid: GridSpec {
                soc_step: 0.1,
                power_levels: 3,
            },
            ema_tau: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PioConfig {
    pub grid: GridSpec,
    pub known_events: bool,
    pub refine_rel_tol: f64,
    pub refine_max_halvings: usize,
}

impl Default for PioConfig {
    fn default() -> Self {
        PioConfig {
            grid: GridSpec::default(),
            known_events: true,
            refine_rel_tol: 0.005,
            refine_max_halvings: 6,
        }
    }
}

/// The whole-run configuration document; every section falls back to its
/// defaults, and unknown keys are rejected with their path.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub market: MarketConfig,
    pub battery: BatteryConfig,
    pub reward: RewardConfig,
    pub synth: SynthConfig,
    pub sac: SacConfig,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
    pub dmpc: DmpcConfig,
    pub pio: PioConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{} (at `{}`)", e.inner(), e.path())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.battery.validate()?;
        self.reward.validate()?;
        self.synth.validate()?;
        self.sac.validate()?;
        self.extractor.validate()?;
        if !(0.0..=1.0).contains(&self.train.train_fraction) {
            return Err(Error::Config("train_fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            market: self.market.clone(),
            battery: self.battery.clone(),
            reward: self.reward.clone(),
            mode: self.train.mode,
            strict_direction: self.train.strict_direction,
            terminate_on_violation: self.train.terminate_on_violation,
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
