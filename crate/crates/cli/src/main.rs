use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use bessbid_core::baselines::{
    dmpc_rollout, pio_solve_refined, pio_rollout, DispatchProblem, EmaForecaster,
    PersistenceForecaster,
};
use bessbid_core::config::RunConfig;
use bessbid_core::data::{
    load_price_csv, split_episodes, synth_prices, train_eval_split, write_price_csv, Episode,
    Normalizer,
};
use bessbid_core::env::{trace_csv, MarketMode};
use bessbid_core::error::Error;
use bessbid_core::extractor::attention_csv;
use bessbid_core::interpret::{attention_spread_hist, gradient_map, q_trace};
use bessbid_core::report::{
    cumulative_cash, cumulative_csv, data_fingerprint, mode_name, revenue_table_csv, sha256_hex,
    total_revenue, BehaviorStats, RevenueRow, RunManifest, StrategyKind,
};
use bessbid_core::sac::{Agent, SacConfig, TrainingLog};

#[derive(Parser)]
#[command(
    name = "bessbid",
    about = "Battery storage joint-market bidding lab: data generation, training, evaluation, benchmarks and interpretability probes"
)]
struct Cli {
    /// JSON configuration document (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run seed (agent init, training stream).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic price/event CSV from the `synth` config section.
    GenData {
        /// Number of intervals (default: one episode).
        #[arg(long)]
        n_intervals: Option<usize>,
    },
    /// Train an agent on the training split of a price CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Override the configured market mode.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// spot_only | fcas_only | joint | all
        #[arg(long, default_value = "all")]
        mode: String,
    },
    /// Compare strategies on the evaluation split.
    Benchmark {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: attn-drl,mlp-drl,dmpc-persistence,dmpc-ema,pio
        #[arg(long)]
        strategies: String,
        #[arg(long)]
        attn_checkpoint: Option<PathBuf>,
        #[arg(long)]
        mlp_checkpoint: Option<PathBuf>,
        /// spot_only | fcas_only | joint | all
        #[arg(long, default_value = "joint")]
        mode: String,
    },
    /// Run interpretability probes against a checkpoint.
    Interpret {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated: q-trace,attention,gradient (or `all`).
        #[arg(long, default_value = "all")]
        probes: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::MissingColumn(_) | Error::Parse { .. } | Error::Integrity(_) => 3,
                Error::Capability(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_mode(name: &str) -> Result<Vec<MarketMode>, Error> {
    match name {
        "spot_only" => Ok(vec![MarketMode::SpotOnly]),
        "fcas_only" => Ok(vec![MarketMode::FcasOnly]),
        "joint" => Ok(vec![MarketMode::Joint]),
        "all" => Ok(vec![
            MarketMode::SpotOnly,
            MarketMode::FcasOnly,
            MarketMode::Joint,
        ]),
        other => Err(Error::Argument(format!(
            "unknown mode `{other}` (expected spot_only, fcas_only, joint, all)"
        ))),
    }
}

struct LoadedData {
    episodes: Vec<Arc<Episode>>,
    train: Vec<Arc<Episode>>,
    eval: Vec<Arc<Episode>>,
    fingerprint: String,
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<LoadedData, Error> {
    let (series, events) = load_price_csv(path, &cfg.market)?;
    let fingerprint = data_fingerprint(&series, &events);
    let episodes = split_episodes(&series, &events, &cfg.market)?;
    let (train, eval) = train_eval_split(&episodes, cfg.train.train_fraction);
    Ok(LoadedData {
        episodes,
        train,
        eval,
        fingerprint,
    })
}

fn eval_set(data: &LoadedData) -> Result<&[Arc<Episode>], Error> {
    if data.eval.is_empty() {
        if data.episodes.is_empty() {
            return Err(Error::argument("no episodes in the dataset"));
        }
        // Everything went to training; evaluate on the full set.
        Ok(&data.episodes)
    } else {
        Ok(&data.eval)
    }
}

fn build_agent(cfg: &RunConfig, use_attention: bool, norm: Normalizer, seed: u64) -> Result<Agent, Error> {
    let sac = SacConfig {
        use_attention,
        ..cfg.sac.clone()
    };
    Agent::new(sac, cfg.extractor.clone(), &cfg.battery, norm, seed)
}

fn load_agent_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Path,
    use_attention: bool,
) -> Result<(Agent, String), Error> {
    let bytes = std::fs::read(checkpoint)?;
    let hash = sha256_hex(&bytes);
    // The normalizer is restored from the checkpoint buffers on load.
    let mut agent = build_agent(cfg, use_attention, Normalizer::identity(), 0)?;
    let loaded = bessbid_core::store::ParamStore::from_bytes(&bytes)?;
    agent.store.load_values_from(&loaded)?;
    agent.load_normalizer_from_store();
    Ok((agent, hash))
}

fn write(path: &Path, content: &str) -> Result<(), Error> {
    bessbid_core::store::write_atomic(path, content.as_bytes())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.config)?;
    std::fs::create_dir_all(&cli.out)?;

    match cli.cmd {
        Cmd::GenData { n_intervals } => cmd_gen_data(&cli, &cfg, n_intervals),
        Cmd::Train { ref data, ref mode } => cmd_train(&cli, &cfg, data, mode.as_deref()),
        Cmd::Eval {
            ref data,
            ref checkpoint,
            ref mode,
        } => cmd_eval(&cli, &cfg, data, checkpoint, mode),
        Cmd::Benchmark {
            ref data,
            ref strategies,
            ref attn_checkpoint,
            ref mlp_checkpoint,
            ref mode,
        } => cmd_benchmark(&cli, &cfg, data, strategies, attn_checkpoint, mlp_checkpoint, mode),
        Cmd::Interpret {
            ref data,
            ref checkpoint,
            ref probes,
        } => cmd_interpret(&cli, &cfg, data, checkpoint, probes),
    }
}

fn cmd_gen_data(cli: &Cli, cfg: &RunConfig, n_intervals: Option<usize>) -> Result<(), Error> {
    let mut synth = cfg.synth.clone();
    if cli.seed != 0 {
        synth.seed = cli.seed;
    }
    let n = n_intervals.unwrap_or(cfg.market.episode_len);
    let (series, events) = synth_prices(&synth, n)?;
    let path = cli.out.join("prices.csv");
    write_price_csv(&path, &series, &events)?;
    println!("wrote {} intervals to {}", series.len(), path.display());
    Ok(())
}

fn cmd_train(cli: &Cli, cfg: &RunConfig, data: &Path, mode: Option<&str>) -> Result<(), Error> {
    let loaded = load_data(data, cfg)?;
    if loaded.train.is_empty() {
        return Err(Error::argument("training split is empty"));
    }
    let norm = Normalizer::fit(&loaded.train);
    let mut agent = build_agent(cfg, cfg.sac.use_attention, norm, cli.seed)?;

    let mut env_cfg = cfg.env_config();
    if let Some(m) = mode {
        env_cfg.mode = parse_mode(m)?[0];
    }

    let log = agent.train(
        &env_cfg,
        &loaded.train,
        cfg.train.episodes,
        cfg.train.initial_soc,
    )?;

    let ckpt_path = cli.out.join("checkpoint.bin");
    agent.save_checkpoint(&ckpt_path)?;
    let ckpt_hash = sha256_hex(&std::fs::read(&ckpt_path)?);

    let manifest = RunManifest::new(
        cli.seed,
        cfg.to_value(),
        loaded.fingerprint.clone(),
        Some(ckpt_hash),
    );
    manifest.write(&cli.out.join("manifest.json"))?;
    write(
        &cli.out.join("training_log.csv"),
        &log.to_csv(Some(&manifest.hash())),
    )?;
    print_training_summary(&log);
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn print_training_summary(log: &TrainingLog) {
    if let Some(last) = log.rows.last() {
        println!(
            "trained {} episodes; final cash {:.2} AU$, violations {}",
            log.rows.len(),
            last.cash,
            last.violations
        );
    }
}

fn cmd_eval(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    mode: &str,
) -> Result<(), Error> {
    let loaded = load_data(data, cfg)?;
    let eval_eps = eval_set(&loaded)?.to_vec();
    let modes = parse_mode(mode)?;
    let (agent, ckpt_hash) = load_agent_checkpoint(cfg, checkpoint, cfg.sac.use_attention)?;

    let manifest = RunManifest::new(
        cli.seed,
        cfg.to_value(),
        loaded.fingerprint.clone(),
        Some(ckpt_hash),
    );
    manifest.write(&cli.out.join("manifest.json"))?;
    let mhash = manifest.hash();

    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    for m in modes {
        let mut env_cfg = cfg.env_config();
        env_cfg.mode = m;
        let outcomes = agent.evaluate(&env_cfg, &eval_eps, cfg.train.initial_soc)?;
        let revenue = total_revenue(&outcomes);
        let stats = BehaviorStats::from_outcomes(&outcomes, &cfg.battery, cfg.market.dt_hours);
        rows.push(RevenueRow {
            strategy: if cfg.sac.use_attention { "attn-drl" } else { "mlp-drl" }.into(),
            mode: m,
            revenue,
        });
        write(
            &cli.out.join(format!("behavior_{}.csv", mode_name(m))),
            &stats.to_csv(Some(&mhash)),
        )?;
        for (i, eo) in outcomes.iter().enumerate() {
            write(
                &cli.out.join(format!("trace_{}_{i}.csv", mode_name(m))),
                &trace_csv(eo, Some(&mhash)),
            )?;
        }
        summary.insert(
            mode_name(m).to_string(),
            serde_json::json!({
                "revenue": revenue,
                "behavior": stats,
            }),
        );
    }
    write(&cli.out.join("revenue.csv"), &revenue_table_csv(&rows, Some(&mhash)))?;
    summary.insert("manifest".into(), serde_json::json!(mhash));
    write(
        &cli.out.join("summary.json"),
        &serde_json::to_string_pretty(&serde_json::Value::Object(summary))?,
    )?;
    for r in &rows {
        println!(
            "{:>9} | spot {:>12.2} | fcas {:>12.2} | total {:>12.2}",
            mode_name(r.mode),
            r.revenue.spot,
            r.revenue.fcas,
            r.revenue.total
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    strategies: &str,
    attn_checkpoint: &Option<PathBuf>,
    mlp_checkpoint: &Option<PathBuf>,
    mode: &str,
) -> Result<(), Error> {
    let loaded = load_data(data, cfg)?;
    let eval_eps = eval_set(&loaded)?.to_vec();
    let modes = parse_mode(mode)?;
    let kinds: Vec<StrategyKind> = strategies
        .split(',')
        .map(|s| StrategyKind::parse(s.trim()))
        .collect::<Result<_, _>>()?;

    let mut ckpt_hash = None;
    let mut rows = Vec::new();
    let mut cumulative: Vec<(String, Vec<f64>)> = Vec::new();

    for kind in &kinds {
        for &m in &modes {
            let mut env_cfg = cfg.env_config();
            env_cfg.mode = m;
            let label = format!("{}:{}", kind.name(), mode_name(m));
            let (revenue, cum) = match kind {
                StrategyKind::AttnDrl | StrategyKind::MlpDrl => {
                    let (path, attn) = match kind {
                        StrategyKind::AttnDrl => (attn_checkpoint, true),
                        _ => (mlp_checkpoint, false),
                    };
                    let path = path.as_ref().ok_or_else(|| {
                        Error::Argument(format!("strategy {} needs a checkpoint", kind.name()))
                    })?;
                    let (agent, hash) = load_agent_checkpoint(cfg, path, attn)?;
                    ckpt_hash.get_or_insert(hash);
                    let outcomes = agent.evaluate(&env_cfg, &eval_eps, cfg.train.initial_soc)?;
                    (total_revenue(&outcomes), cumulative_cash(&outcomes))
                }
                StrategyKind::DmpcPersistence | StrategyKind::DmpcEma => {
                    let fc_p = PersistenceForecaster;
                    let fc_e = EmaForecaster { tau: cfg.dmpc.ema_tau };
                    let fc: &dyn bessbid_core::baselines::Forecaster = match kind {
                        StrategyKind::DmpcPersistence => &fc_p,
                        _ => &fc_e,
                    };
                    let mut all = Vec::new();
                    for ep in &eval_eps {
                        all.push(dmpc_rollout(
                            ep,
                            &env_cfg,
                            fc,
                            cfg.dmpc.lookahead,
                            &cfg.dmpc.grid,
                            cfg.train.initial_soc,
                        )?);
                    }
                    (total_revenue(&all), cumulative_cash(&all))
                }
                StrategyKind::Pio => {
                    // Table rows report the refined oracle objective; the
                    // cumulative plot series comes from the replayed plan.
                    let mut total = bessbid_core::env::RevenueBreakdown::default();
                    let mut all = Vec::new();
                    for ep in &eval_eps {
                        let mut problem = DispatchProblem::from_episode(
                            ep,
                            &env_cfg,
                            cfg.train.initial_soc * cfg.battery.e_cap,
                        );
                        problem.known_events = cfg.pio.known_events;
                        let (sol, _) = pio_solve_refined(
                            &problem,
                            &cfg.pio.grid,
                            cfg.pio.refine_rel_tol,
                            cfg.pio.refine_max_halvings,
                        )?;
                        total.total += sol.objective;
                        let (_, outcomes) = pio_rollout(
                            ep,
                            &env_cfg,
                            &cfg.pio.grid,
                            cfg.pio.known_events,
                            cfg.train.initial_soc,
                        )?;
                        all.push(outcomes);
                    }
                    let replayed = total_revenue(&all);
                    total.spot = replayed.spot;
                    total.fcas = replayed.fcas;
                    total.degradation = replayed.degradation;
                    (total, cumulative_cash(&all))
                }
            };
            rows.push(RevenueRow {
                strategy: kind.name().into(),
                mode: m,
                revenue,
            });
            cumulative.push((label, cum));
        }
    }

    let manifest = RunManifest::new(cli.seed, cfg.to_value(), loaded.fingerprint, ckpt_hash);
    manifest.write(&cli.out.join("manifest.json"))?;
    let mhash = manifest.hash();
    write(&cli.out.join("benchmark.csv"), &revenue_table_csv(&rows, Some(&mhash)))?;
    write(
        &cli.out.join("cumulative.csv"),
        &cumulative_csv(&cumulative, Some(&mhash)),
    )?;
    for r in &rows {
        println!(
            "{:>18} {:>9} | total {:>12.2}",
            r.strategy,
            mode_name(r.mode),
            r.revenue.total
        );
    }
    Ok(())
}

fn cmd_interpret(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    probes: &str,
) -> Result<(), Error> {
    let loaded = load_data(data, cfg)?;
    let eval_eps = eval_set(&loaded)?.to_vec();
    let (agent, ckpt_hash) = load_agent_checkpoint(cfg, checkpoint, cfg.sac.use_attention)?;
    let env_cfg = cfg.env_config();

    let probe_list: Vec<&str> = if probes == "all" {
        vec!["q-trace", "attention", "gradient"]
    } else {
        probes.split(',').map(|s| s.trim()).collect()
    };

    let manifest = RunManifest::new(cli.seed, cfg.to_value(), loaded.fingerprint, Some(ckpt_hash));
    manifest.write(&cli.out.join("manifest.json"))?;
    let mhash = manifest.hash();

    for probe in probe_list {
        match probe {
            "q-trace" => {
                let report = q_trace(&agent, &env_cfg, &eval_eps[0], cfg.train.initial_soc)?;
                write(&cli.out.join("q_trace.csv"), &report.to_csv(Some(&mhash)))?;
                println!("q-trace written");
            }
            "attention" => {
                let report = attention_spread_hist(&agent, &eval_eps)?;
                write(
                    &cli.out.join("attention_spread.csv"),
                    &report.to_csv(Some(&mhash)),
                )?;
                // Raw attention matrices at the first eval step with a full
                // real history window.
                let ex = agent.extractor().ok_or_else(|| {
                    Error::Capability("attention probe needs the temporal extractor".into())
                })?;
                let seg = bessbid_core::env::normalized_segment(
                    &eval_eps[0],
                    ex.config().seg_len,
                    ex.config().seg_len,
                    agent.normalizer(),
                );
                let (_, records) = ex.features_with_attention(&agent.store, &seg);
                write(
                    &cli.out.join("attention_matrices.csv"),
                    &format!("# manifest={mhash}\n{}", attention_csv(&records)),
                )?;
                println!("attention probes written");
            }
            "gradient" => {
                let report = gradient_map(&agent, &env_cfg, &eval_eps, 7)?;
                write(
                    &cli.out.join("gradient_map.csv"),
                    &report.to_csv(Some(&mhash)),
                )?;
                println!("gradient map written");
            }
            other => {
                return Err(Error::Argument(format!(
                    "unknown probe `{other}` (expected q-trace, attention, gradient)"
                )))
            }
        }
    }
    Ok(())
}
