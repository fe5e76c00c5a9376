use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dispatch-interval timing and episode shape. Durations in hours.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub dt_hours: f64,
    pub dt_fast: f64,
    pub dt_slow: f64,
    pub dt_delay: f64,
    pub episode_len: usize,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            dt_hours: 5.0 / 60.0,
            dt_fast: 6.0 / 3600.0,
            dt_slow: 55.0 / 3600.0,
            dt_delay: 4.0 / 60.0,
            episode_len: 288,
        }
    }
}

impl MarketConfig {
    /// The default reserve windows (6 s + 55 s + 4 min) overshoot a 5-minute
    /// interval by one second because the published figures are rounded, so
    /// the sum check allows exactly that much slack.
    pub fn validate(&self) -> Result<()> {
        if self.dt_hours <= 0.0 || self.dt_fast <= 0.0 || self.dt_slow <= 0.0 || self.dt_delay <= 0.0
        {
            return Err(Error::Config("all durations must be > 0".into()));
        }
        let sum = self.dt_fast + self.dt_slow + self.dt_delay;
        if sum > self.dt_hours + 1.0 / 3600.0 {
            return Err(Error::Config(format!(
                "reserve windows ({sum} h) exceed the dispatch interval ({} h)",
                self.dt_hours
            )));
        }
        if self.episode_len < 1 {
            return Err(Error::Config("episode_len must be >= 1".into()));
        }
        Ok(())
    }
}

pub const N_MARKETS: usize = 7;

pub const MARKET_NAMES: [&str; N_MARKETS] = ["spot", "fr", "fl", "sr", "sl", "dr", "dl"];

/// Clearing prices of the seven markets at one interval, AU$/MWh. Negative
/// spot prices are a real occurrence and pass through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceVector {
    pub spot: f64,
    pub fr: f64,
    pub fl: f64,
    pub sr: f64,
    pub sl: f64,
    pub dr: f64,
    pub dl: f64,
}

impl PriceVector {
    pub fn zero() -> Self {
        PriceVector {
            spot: 0.0,
            fr: 0.0,
            fl: 0.0,
            sr: 0.0,
            sl: 0.0,
            dr: 0.0,
            dl: 0.0,
        }
    }

    pub fn spot_only(spot: f64) -> Self {
        PriceVector {
            spot,
            ..PriceVector::zero()
        }
    }

    pub fn as_array(&self) -> [f64; N_MARKETS] {
        [self.spot, self.fr, self.fl, self.sr, self.sl, self.dr, self.dl]
    }

    pub fn from_array(a: [f64; N_MARKETS]) -> Self {
        PriceVector {
            spot: a[0],
            fr: a[1],
            fl: a[2],
            sr: a[3],
            sl: a[4],
            dr: a[5],
            dl: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Gap-free indexed sequence of price vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriceSeries {
    start_index: u64,
    prices: Vec<PriceVector>,
}

impl PriceSeries {
    pub fn new(start_index: u64, prices: Vec<PriceVector>) -> Self {
        PriceSeries {
            start_index,
            prices,
        }
    }

    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    pub fn start_index(&self) -> u64 {
        self.start_index
    }

    pub fn prices(&self) -> &[PriceVector] {
        &self.prices
    }
}

/// Per-interval contingency raise/lower indicators, paired with a series.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContingencySeries {
    pub raise: Vec<bool>,
    pub lower: Vec<bool>,
}

impl ContingencySeries {
    pub fn zeros(n: usize) -> Self {
        ContingencySeries {
            raise: vec![false; n],
            lower: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.raise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raise.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpotProfile {
    SquareWave,
    Sinusoid,
    Ar1WithSpikes,
}

/// Synthetic market generator settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub spot_profile: SpotProfile,
    pub spot_low: f64,
    pub spot_high: f64,
    pub fcas_means: [f64; 6],
    pub fcas_noise_std: f64,
    pub p_raise: f64,
    pub p_lower: f64,
    /// Square-wave / sinusoid period in intervals (one trading day).
    pub period: usize,
    /// Spike probability per interval for the AR(1)-with-spikes profile.
    pub p_spike: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            spot_profile: SpotProfile::SquareWave,
            spot_low: 20.0,
            spot_high: 200.0,
            // Ballpark average clearing prices of the six reserve markets.
            fcas_means: [5.44, 0.02, 3.25, 0.08, 2.93, 0.50],
            fcas_noise_std: 0.5,
            p_raise: 341.0 / 17568.0,
            p_lower: 294.0 / 17568.0,
            period: 288,
            p_spike: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_raise) || !(0.0..=1.0).contains(&self.p_lower) {
            return Err(Error::Config("event probabilities must be in [0,1]".into()));
        }
        if self.spot_low > self.spot_high {
            return Err(Error::Config("spot_low must be <= spot_high".into()));
        }
        if !(0.0..=1.0).contains(&self.p_spike) {
            return Err(Error::Config("p_spike must be in [0,1]".into()));
        }
        if self.period < 2 {
            return Err(Error::Config("period must be >= 2".into()));
        }
        Ok(())
    }
}

/// One trading day: prices plus the matching contingency indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub start_index: u64,
    pub prices: Vec<PriceVector>,
    pub raise: Vec<bool>,
    pub lower: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.prices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices.is_empty()
    }

    /// Price known when acting at step `t`: the previous interval's clearing
    /// price, with the first interval's price standing in at t = 0.
    pub fn price_before(&self, t: usize) -> PriceVector {
        if t == 0 {
            self.prices[0]
        } else {
            self.prices[t - 1]
        }
    }

    /// History window of `seg_len` price vectors ending just before step `t`
    /// (oldest first), left-padded with the earliest price at episode start.
    pub fn segment_rows(&self, t: usize, seg_len: usize) -> Vec<PriceVector> {
        let newest = t.saturating_sub(1) as i64;
        let mut rows = Vec::with_capacity(seg_len);
        for k in 0..seg_len {
            // Position k covers interval index t - seg_len + k.
            let idx = (t as i64 - seg_len as i64 + k as i64).clamp(0, newest) as usize;
            rows.push(self.prices[idx.min(self.prices.len() - 1)]);
        }
        rows
    }
}

/// Read the fixed-format price/event CSV
/// (`t,spot,fr,fl,sr,sl,dr,dl,raise,lower`; the two flag columns optional).
pub fn load_price_csv(path: &Path, _market_cfg: &MarketConfig) -> Result<(PriceSeries, ContingencySeries)> {
    let file = std::fs::File::open(path)?;
    load_price_reader(file)
}

pub fn load_price_reader<R: std::io::Read>(reader: R) -> Result<(PriceSeries, ContingencySeries)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(reader);

    let headers = rdr
        .headers()
        .map_err(|e| Error::Integrity(format!("cannot read header: {e}")))?
        .clone();
    let col = |name: &str| -> Option<usize> { headers.iter().position(|h| h == name) };

    let t_col = col("t").ok_or_else(|| Error::MissingColumn("t".into()))?;
    let mut price_cols = [0usize; N_MARKETS];
    for (i, name) in MARKET_NAMES.iter().enumerate() {
        price_cols[i] = col(name).ok_or_else(|| Error::MissingColumn((*name).into()))?;
    }
    let raise_col = col("raise");
    let lower_col = col("lower");

    let mut prices = Vec::new();
    let mut events = ContingencySeries::default();
    let mut start_index = 0u64;
    let mut expected_t: Option<u64> = None;

    for (row_num, record) in rdr.records().enumerate() {
        let row = row_num + 1; // 1-based data row for error messages
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let parse = |idx: usize, what: &str| -> Result<f64> {
            let cell = record.get(idx).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing cell for `{what}`"),
            })?;
            cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric `{what}` value `{cell}`"),
            })
        };

        let t_val = {
            let cell = record.get(t_col).unwrap_or("");
            cell.trim().parse::<u64>().map_err(|_| Error::Parse {
                row,
                message: format!("non-integer interval index `{cell}`"),
            })?
        };
        match expected_t {
            None => {
                start_index = t_val;
                expected_t = Some(t_val + 1);
            }
            Some(want) => {
                if t_val != want {
                    return Err(Error::Integrity(format!(
                        "interval index gap at row {row}: expected {want}, got {t_val}"
                    )));
                }
                expected_t = Some(want + 1);
            }
        }

        let mut arr = [0.0; N_MARKETS];
        for (i, &c) in price_cols.iter().enumerate() {
            arr[i] = parse(c, MARKET_NAMES[i])?;
        }
        prices.push(PriceVector::from_array(arr));

        let flag = |idx: Option<usize>, what: &str| -> Result<bool> {
            match idx {
                None => Ok(false),
                Some(c) => {
                    let v = parse(c, what)?;
                    Ok(v != 0.0)
                }
            }
        };
        events.raise.push(flag(raise_col, "raise")?);
        events.lower.push(flag(lower_col, "lower")?);
    }

    Ok((PriceSeries::new(start_index, prices), events))
}

/// Write the canonical CSV form; `{}`-formatted f64 round-trips bit-exactly
/// for finite values.
pub fn write_price_csv(
    path: &Path,
    series: &PriceSeries,
    events: &ContingencySeries,
) -> Result<()> {
    let body = price_csv_string(series, events);
    std::fs::write(path, body)?;
    Ok(())
}

pub fn price_csv_string(series: &PriceSeries, events: &ContingencySeries) -> String {
    let mut out = String::from("t,spot,fr,fl,sr,sl,dr,dl,raise,lower\n");
    for (i, p) in series.prices().iter().enumerate() {
        let t = series.start_index() + i as u64;
        let r = if events.raise.get(i).copied().unwrap_or(false) { 1 } else { 0 };
        let l = if events.lower.get(i).copied().unwrap_or(false) { 1 } else { 0 };
        out.push_str(&format!(
            "{t},{},{},{},{},{},{},{},{r},{l}\n",
            p.spot, p.fr, p.fl, p.sr, p.sl, p.dr, p.dl
        ));
    }
    out
}

/// Deterministic synthetic market: spot profile plus noisy reserve prices and
/// Bernoulli contingency indicators, all from one seeded stream.
pub fn synth_prices(cfg: &SynthConfig, n_intervals: usize) -> Result<(PriceSeries, ContingencySeries)> {
    cfg.validate()?;
    if n_intervals < 1 {
        return Err(Error::argument("n_intervals must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fcas_noise = Normal::new(0.0, cfg.fcas_noise_std.max(0.0)).map_err(|e| {
        Error::Config(format!("bad fcas_noise_std: {e}"))
    })?;

    let mid = 0.5 * (cfg.spot_low + cfg.spot_high);
    let amp = 0.5 * (cfg.spot_high - cfg.spot_low);
    let ar_sigma = (cfg.spot_high - cfg.spot_low) / 8.0;
    let ar_noise = Normal::new(0.0, ar_sigma.max(1e-12)).expect("valid sigma");
    let mut ar_state = mid;

    let mut prices = Vec::with_capacity(n_intervals);
    let mut events = ContingencySeries {
        raise: Vec::with_capacity(n_intervals),
        lower: Vec::with_capacity(n_intervals),
    };

    for t in 0..n_intervals {
        let spot = match cfg.spot_profile {
            SpotProfile::SquareWave => {
                if t % cfg.period < cfg.period / 2 {
                    cfg.spot_low
                } else {
                    cfg.spot_high
                }
            }
            SpotProfile::Sinusoid => {
                mid + amp * (2.0 * std::f64::consts::PI * (t % cfg.period) as f64
                    / cfg.period as f64)
                    .sin()
            }
            SpotProfile::Ar1WithSpikes => {
                ar_state = mid + 0.95 * (ar_state - mid) + ar_noise.sample(&mut rng);
                let spiked = rng.random_bool(cfg.p_spike);
                if spiked {
                    rng.random_range(cfg.spot_high..=5.0 * cfg.spot_high)
                } else {
                    ar_state
                }
            }
        };

        let mut arr = [spot, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (k, mean) in cfg.fcas_means.iter().enumerate() {
            arr[k + 1] = mean + fcas_noise.sample(&mut rng);
        }
        prices.push(PriceVector::from_array(arr));
        events.raise.push(rng.random_bool(cfg.p_raise));
        events.lower.push(rng.random_bool(cfg.p_lower));
    }

    Ok((PriceSeries::new(0, prices), events))
}

/// Slice a series into consecutive day-length episodes; a trailing remainder
/// shorter than one episode is dropped.
pub fn split_episodes(
    series: &PriceSeries,
    events: &ContingencySeries,
    cfg: &MarketConfig,
) -> Result<Vec<Arc<Episode>>> {
    let ep_len = cfg.episode_len;
    if series.len() < ep_len {
        return Err(Error::argument(format!(
            "series of {} intervals is shorter than one episode ({ep_len})",
            series.len()
        )));
    }
    if events.len() != series.len() {
        return Err(Error::argument(
            "price series and contingency series lengths differ",
        ));
    }
    let n = series.len() / ep_len;
    let mut episodes = Vec::with_capacity(n);
    for e in 0..n {
        let lo = e * ep_len;
        let hi = lo + ep_len;
        episodes.push(Arc::new(Episode {
            start_index: series.start_index() + lo as u64,
            prices: series.prices()[lo..hi].to_vec(),
            raise: events.raise[lo..hi].to_vec(),
            lower: events.lower[lo..hi].to_vec(),
        }));
    }
    Ok(episodes)
}

/// Deterministic train/eval split by episode fraction (train takes the head,
/// matching a "first months train, last months evaluate" protocol).
pub fn train_eval_split(
    episodes: &[Arc<Episode>],
    train_fraction: f64,
) -> (Vec<Arc<Episode>>, Vec<Arc<Episode>>) {
    let n = episodes.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
    (
        episodes[..n_train].to_vec(),
        episodes[n_train..].to_vec(),
    )
}

/// Per-market z-score statistics fitted on training data. Network inputs are
/// normalized because raw AU$ magnitudes (spikes beyond 1000) destabilize
/// tanh policies; raw mode keeps `mean = 0, std = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; N_MARKETS],
    pub std: [f64; N_MARKETS],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; N_MARKETS],
            std: [1.0; N_MARKETS],
        }
    }

    pub fn fit(episodes: &[Arc<Episode>]) -> Self {
        let mut count = 0usize;
        let mut mean = [0.0; N_MARKETS];
        for ep in episodes {
            for p in &ep.prices {
                let a = p.as_array();
                for (m, v) in mean.iter_mut().zip(a) {
                    *m += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Normalizer::identity();
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut var = [0.0; N_MARKETS];
        for ep in episodes {
            for p in &ep.prices {
                let a = p.as_array();
                for (vr, (v, m)) in var.iter_mut().zip(a.iter().zip(&mean)) {
                    let d = v - m;
                    *vr += d * d;
                }
            }
        }
        let mut std = [0.0; N_MARKETS];
        for (s, v) in std.iter_mut().zip(var) {
            *s = (v / count as f64).sqrt().max(1e-6);
        }
        Normalizer { mean, std }
    }

    pub fn normalize(&self, p: &PriceVector) -> [f64; N_MARKETS] {
        let a = p.as_array();
        let mut out = [0.0; N_MARKETS];
        for i in 0..N_MARKETS {
            out[i] = (a[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}
