use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::battery::BidAction;
use crate::data::Episode;
use crate::env::{normalized_segment, EnvConfig, MarketEnv};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sac::{decode_action, Agent, ACTION_DIM};
use crate::tensor::Tensor;

/// Eight price-spread intervals (AU$/MWh):
/// (-inf,-20) [-20,-10) [-10,-5) [-5,0) [0,5] (5,10] (10,20] (20,inf).
pub struct SpreadBin;

impl SpreadBin {
    pub const COUNT: usize = 8;

    pub const LABELS: [&'static str; 8] = [
        "<-20", "[-20,-10)", "[-10,-5)", "[-5,0)", "[0,5]", "(5,10]", "(10,20]", ">20",
    ];

    pub fn index(spread: f64) -> usize {
        if spread < -20.0 {
            0
        } else if spread < -10.0 {
            1
        } else if spread < -5.0 {
            2
        } else if spread < 0.0 {
            3
        } else if spread <= 5.0 {
            4
        } else if spread <= 10.0 {
            5
        } else if spread <= 20.0 {
            6
        } else {
            7
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub sum: f64,
    pub count: u64,
}

impl BinStat {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn average(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QTraceRow {
    pub t: usize,
    pub action: BidAction,
    pub q_raw: f64,
    pub q_norm: f64,
}

/// Names of the decision components the gradient map differentiates.
pub const GRADIENT_COMPONENTS: [&str; 3] = ["charge", "discharge", "bid_power"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ProbeReport {
    /// Q(s_t, u_t) along an executed trajectory, min-max normalized over the
    /// episode (a constant trace maps to 0.5 by convention).
    QTrace {
        rows: Vec<QTraceRow>,
        q_min: f64,
        q_max: f64,
        degenerate: bool,
    },
    /// Newest-position attention weight (final block, head-averaged) binned
    /// by the spread between the newest and each historical spot price.
    AttentionSpread { bins: [BinStat; SpreadBin::COUNT] },
    /// Mean absolute input gradient of each decision component w.r.t. the
    /// spot price at each history position, binned by that position's spread.
    /// Gradients are taken against the normalized inputs and rescaled by the
    /// spot normalization std, so entries are per AU$/MWh.
    GradientMap {
        bins: [[BinStat; 3]; SpreadBin::COUNT],
    },
}

impl ProbeReport {
    pub fn to_csv(&self, manifest_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = manifest_hash {
            out.push_str(&format!("# manifest={h}\n"));
        }
        match self {
            ProbeReport::QTrace { rows, .. } => {
                out.push_str("t,v_dch,v_ch,a_spot,a_fast,a_slow,a_delay,q_raw,q_norm\n");
                for r in rows {
                    let a = &r.action;
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{}\n",
                        r.t,
                        a.v_dch as u8,
                        a.v_ch as u8,
                        a.a_spot,
                        a.a_fast,
                        a.a_slow,
                        a.a_delay,
                        r.q_raw,
                        r.q_norm
                    ));
                }
            }
            ProbeReport::AttentionSpread { bins } => {
                out.push_str("bin,label,avg_weight,count\n");
                for (i, b) in bins.iter().enumerate() {
                    out.push_str(&format!(
                        "{i},{},{},{}\n",
                        SpreadBin::LABELS[i],
                        b.average(),
                        b.count
                    ));
                }
            }
            ProbeReport::GradientMap { bins } => {
                out.push_str("bin,label,component,avg_abs_gradient,count\n");
                for (i, row) in bins.iter().enumerate() {
                    for (c, b) in row.iter().enumerate() {
                        out.push_str(&format!(
                            "{i},{},{},{},{}\n",
                            SpreadBin::LABELS[i],
                            GRADIENT_COMPONENTS[c],
                            b.average(),
                            b.count
                        ));
                    }
                }
            }
        }
        out
    }
}

/// Q-values along the deterministic trajectory, min-max normalized.
pub fn q_trace(
    agent: &Agent,
    env_cfg: &EnvConfig,
    episode: &Arc<Episode>,
    initial_soc: f64,
) -> Result<ProbeReport> {
    let mut env = MarketEnv::new(env_cfg.clone(), agent.normalizer().clone(), episode.clone())?;
    let mut state = {
        let fs = agent.feature_source();
        env.reset(episode.clone(), &fs, initial_soc)?
    };

    let mut rows = Vec::with_capacity(episode.len());
    loop {
        let sv = agent.state_vec(&state);
        let u = agent.deterministic_action(&sv);
        let q_raw = agent.q_value(&sv, &u);
        let bid = decode_action(&u, &env_cfg.battery);
        let outcome = {
            let fs = agent.feature_source();
            env.step(&fs, &bid)?
        };
        rows.push(QTraceRow {
            t: state.t,
            action: outcome.info.executed,
            q_raw,
            q_norm: 0.0,
        });
        if outcome.done {
            break;
        }
        state = outcome.next_state;
    }

    let q_min = rows.iter().map(|r| r.q_raw).fold(f64::INFINITY, f64::min);
    let q_max = rows.iter().map(|r| r.q_raw).fold(f64::NEG_INFINITY, f64::max);
    let degenerate = q_max == q_min;
    for r in rows.iter_mut() {
        r.q_norm = if degenerate {
            0.5
        } else {
            (r.q_raw - q_min) / (q_max - q_min)
        };
    }
    Ok(ProbeReport::QTrace {
        rows,
        q_min,
        q_max,
        degenerate,
    })
}

/// Attention row of the newest history position (final block, averaged over
/// heads), paired with the spot-price spread to each earlier position.
pub fn attention_spread_hist(agent: &Agent, episodes: &[Arc<Episode>]) -> Result<ProbeReport> {
    let extractor = agent
        .extractor()
        .ok_or_else(|| Error::Capability("attention probe needs the temporal extractor".into()))?;
    let cfg = extractor.config().clone();
    let seg_len = cfg.seg_len;
    let final_block = cfg.n_blocks - 1;

    let mut bins = [BinStat::default(); SpreadBin::COUNT];
    for episode in episodes {
        for t in 0..episode.len() {
            let raw_rows = episode.segment_rows(t, seg_len);
            let newest_spot = raw_rows[seg_len - 1].spot;
            let seg = normalized_segment(episode, t, seg_len, agent.normalizer());
            let (_, records) = extractor.features_with_attention(&agent.store, &seg);

            let mut row_avg = vec![0.0; seg_len];
            let mut heads = 0usize;
            for rec in &records {
                if rec.block != final_block {
                    continue;
                }
                for (k, v) in row_avg.iter_mut().enumerate() {
                    *v += rec.weights.get(seg_len - 1, k);
                }
                heads += 1;
            }
            for v in row_avg.iter_mut() {
                *v /= heads as f64;
            }

            for (k, &w) in row_avg.iter().enumerate() {
                let spread = newest_spot - raw_rows[k].spot;
                bins[SpreadBin::index(spread)].add(w);
            }
        }
    }
    Ok(ProbeReport::AttentionSpread { bins })
}

/// Absolute input-price gradients of the decision components, attributed to
/// each history position's spread bin. `stride` subsamples the eval steps.
pub fn gradient_map(
    agent: &Agent,
    env_cfg: &EnvConfig,
    episodes: &[Arc<Episode>],
    stride: usize,
) -> Result<ProbeReport> {
    let stride = stride.max(1);
    let mut bins = [[BinStat::default(); 3]; SpreadBin::COUNT];

    for episode in episodes {
        // Deterministic rollout supplies realistic SoC inputs.
        let initial_soc = 0.5;
        let outcomes = agent.evaluate(env_cfg, std::slice::from_ref(episode), initial_soc)?;
        let outcomes = &outcomes[0];
        for (t, soc) in trajectory_socs(initial_soc, outcomes).into_iter().enumerate() {
            if t % stride != 0 {
                continue;
            }
            let grads = component_input_gradients(agent, episode, t, soc)?;
            let seg_len = grads.positions;
            let raw_rows = episode.segment_rows(t, seg_len);
            let newest_spot = raw_rows[seg_len - 1].spot;
            let spot_std = agent.normalizer().std[0];
            for k in 0..seg_len {
                let spread = newest_spot - raw_rows[k].spot;
                let bin = SpreadBin::index(spread);
                for c in 0..3 {
                    bins[bin][c].add(grads.per_position[c][k].abs() / spot_std);
                }
            }
        }
    }
    Ok(ProbeReport::GradientMap { bins })
}

/// SoC seen at each decision point: the initial value, then each step's
/// post-step state.
fn trajectory_socs(initial_soc: f64, outcomes: &[crate::env::StepOutcome]) -> Vec<f64> {
    let mut socs = Vec::with_capacity(outcomes.len());
    let mut prev = initial_soc;
    for o in outcomes {
        socs.push(prev);
        prev = o.next_state.soc_prev;
    }
    socs
}

pub(crate) struct ComponentGradients {
    pub positions: usize,
    /// [component][history position] gradient w.r.t. the normalized spot
    /// price at that position.
    pub per_position: [Vec<f64>; 3],
}

/// Gradients of (charge logit, discharge logit, total bid fraction) w.r.t.
/// the normalized spot-price inputs per history position.
pub(crate) fn component_input_gradients(
    agent: &Agent,
    episode: &Arc<Episode>,
    t: usize,
    soc: f64,
) -> Result<ComponentGradients> {
    let norm = agent.normalizer().clone();
    let g = &agent.store;
    let mut graph = Graph::new(g);

    let (seg_node, positions, state) = match agent.extractor() {
        Some(ex) => {
            let seg_len = ex.config().seg_len;
            let seg = normalized_segment(episode, t, seg_len, &norm);
            let seg_node = graph.input(seg);
            let out = ex.forward(&mut graph, seg_node);
            // The newest price row feeds the state directly and through the
            // extractor; slicing from the same input node totals both paths.
            let newest = graph.slice_rows(seg_node, seg_len - 1, seg_len);
            let soc_node = graph.constant(Tensor::scalar(soc));
            let state = graph.concat_cols(&[soc_node, newest, out.feature]);
            (seg_node, seg_len, state)
        }
        None => {
            let seg = normalized_segment(episode, t, 1, &norm);
            let seg_node = graph.input(seg);
            let soc_node = graph.constant(Tensor::scalar(soc));
            let zeros = graph.constant(Tensor::zeros(1, agent.state_dim() - 8));
            let state = graph.concat_cols(&[soc_node, seg_node, zeros]);
            (seg_node, 1, state)
        }
    };

    let (mean, _) = agent.policy_heads(&mut graph, state);
    let u = graph.tanh(mean);
    let dch = graph.slice_cols(u, 0, 1);
    let ch = graph.scale(dch, -1.0);
    let bid_cols = graph.slice_cols(u, 1, ACTION_DIM);
    let cap = agent.fcas_cap();
    let coef = Tensor::column(&[0.5, 0.5 * cap, 0.5 * cap, 0.5 * cap]);
    let coef_node = graph.constant(coef);
    let weighted = graph.matmul(bid_cols, coef_node);
    let bid_sum = graph.add_scalar(weighted, 0.5 + 1.5 * cap);

    let components = [ch, dch, bid_sum];
    let mut per_position: [Vec<f64>; 3] = [
        vec![0.0; positions],
        vec![0.0; positions],
        vec![0.0; positions],
    ];
    for (c, &node) in components.iter().enumerate() {
        let bp = graph.backward(node);
        if let Some(gseg) = bp.node_grad(seg_node) {
            for k in 0..positions {
                per_position[c][k] = gseg.get(k, 0); // spot column
            }
        }
    }
    Ok(ComponentGradients {
        positions,
        per_position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::battery::BatteryConfig;
    use crate::data::{split_episodes, synth_prices, MarketConfig, SpotProfile, SynthConfig};
    use crate::env::RewardConfig;
    use crate::extractor::ExtractorConfig;
    use crate::sac::SacConfig;
    use crate::tensor::Tensor;

    fn tiny_agent(seed: u64) -> Agent {
        let sac = SacConfig {
            hidden_dim: 16,
            batch_size: 8,
            warmup_transitions: 16,
            buffer_capacity: 256,
            ..Default::default()
        };
        let ext = ExtractorConfig {
            seg_len: 6,
            model_dim: 8,
            heads: 2,
            n_blocks: 2,
            ffn_dim: 16,
            ..Default::default()
        };
        Agent::new(sac, ext, &BatteryConfig::default(), crate::data::Normalizer::identity(), seed).unwrap()
    }

    fn env_cfg() -> EnvConfig {
        EnvConfig::new(
            MarketConfig::default(),
            BatteryConfig::default(),
            RewardConfig::default(),
        )
    }

    fn episode(seed: u64) -> Arc<Episode> {
        let synth = SynthConfig {
            spot_profile: SpotProfile::Ar1WithSpikes,
            seed,
            ..Default::default()
        };
        let (series, events) = synth_prices(&synth, 288).unwrap();
        split_episodes(&series, &events, &MarketConfig::default()).unwrap()[0].clone()
    }

    #[test]
    fn spread_bins_cover_boundaries() {
        assert_eq!(SpreadBin::index(-25.0), 0);
        assert_eq!(SpreadBin::index(-20.0), 1); // -20 in [-20,-10)
        assert_eq!(SpreadBin::index(-10.0), 2);
        assert_eq!(SpreadBin::index(-5.0), 3);
        assert_eq!(SpreadBin::index(0.0), 4); // 0 in [0,5]
        assert_eq!(SpreadBin::index(5.0), 4);
        assert_eq!(SpreadBin::index(5.1), 5);
        assert_eq!(SpreadBin::index(10.0), 5);
        assert_eq!(SpreadBin::index(20.0), 6);
        assert_eq!(SpreadBin::index(20.5), 7);
    }

    #[test]
    fn q_trace_shape_and_normalization() {
        let agent = tiny_agent(1);
        let report = q_trace(&agent, &env_cfg(), &episode(3), 0.5).unwrap();
        let ProbeReport::QTrace { rows, degenerate, .. } = &report else {
            panic!("wrong report kind")
        };
        assert_eq!(rows.len(), 288);
        if !degenerate {
            let max = rows.iter().map(|r| r.q_norm).fold(f64::NEG_INFINITY, f64::max);
            let min = rows.iter().map(|r| r.q_norm).fold(f64::INFINITY, f64::min);
            assert_eq!(max, 1.0);
            assert_eq!(min, 0.0);
            assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.q_norm)));
        }
    }

    #[test]
    fn q_trace_probe_does_not_mutate() {
        let agent = tiny_agent(5);
        let before = agent.store.checksum();
        q_trace(&agent, &env_cfg(), &episode(7), 0.5).unwrap();
        assert_eq!(agent.store.checksum(), before);
    }

    #[test]
    fn attention_probe_requires_extractor() {
        let sac = SacConfig {
            use_attention: false,
            hidden_dim: 8,
            ..Default::default()
        };
        let agent = Agent::new(
            sac,
            ExtractorConfig {
                seg_len: 4,
                model_dim: 8,
                heads: 2,
                n_blocks: 1,
                ffn_dim: 8,
                ..Default::default()
            },
            &BatteryConfig::default(),
            crate::data::Normalizer::identity(),
            9,
        )
        .unwrap();
        assert!(matches!(
            attention_spread_hist(&agent, &[episode(1)]),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn uniform_attention_hist_is_uniform() {
        let agent = tiny_agent(11);
        // Zero the query/key projections of every block.
        let mut agent = agent;
        for b in 0..2 {
            for h in 0..2 {
                for w in ["wq", "wk"] {
                    let id = agent.store.id(&format!("ext/b{b}/h{h}/{w}")).unwrap();
                    let shape = agent.store.value(id).shape();
                    agent.store.set_value(id, Tensor::zeros(shape.0, shape.1));
                }
            }
        }
        let report = attention_spread_hist(&agent, &[episode(13)]).unwrap();
        let ProbeReport::AttentionSpread { bins } = report else {
            panic!("wrong kind")
        };
        for b in bins.iter().filter(|b| b.count > 0) {
            assert!((b.average() - 1.0 / 6.0).abs() < 1e-12);
        }
        // Attention weights of a segment sum to one by construction.
        let total: f64 = bins.iter().map(|b| b.sum).sum();
        let segments = 288.0;
        assert!((total / segments - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_map_shape_and_fd_check() {
        let agent = tiny_agent(17);
        let ep = episode(19);
        let report = gradient_map(&agent, &env_cfg(), &[ep.clone()], 97).unwrap();
        let ProbeReport::GradientMap { bins } = &report else {
            panic!("wrong kind")
        };
        assert_eq!(bins.len(), 8);
        assert_eq!(bins[0].len(), 3);

        // Finite-difference spot check on >= 10 coordinates of one segment.
        let t = 37;
        let soc = 0.5;
        let grads = component_input_gradients(&agent, &ep, t, soc).unwrap();
        let norm = agent.normalizer().clone();
        let seg = normalized_segment(&ep, t, 6, &norm);
        let h = 1e-4;
        let mut checked = 0;
        for k in 0..6 {
            for (c, eval_c) in [0usize, 1, 2].iter().enumerate() {
                let mut plus = seg.clone();
                plus.set(k, 0, plus.get(k, 0) + h);
                let mut minus = seg.clone();
                minus.set(k, 0, minus.get(k, 0) - h);
                let f_plus = eval_component(&agent, &plus, soc, *eval_c);
                let f_minus = eval_component(&agent, &minus, soc, *eval_c);
                let fd = (f_plus - f_minus) / (2.0 * h);
                let ad = grads.per_position[c][k];
                if ad.abs() + fd.abs() < 1e-7 {
                    // Central differences are pure roundoff noise down here;
                    // agreement in absolute terms is the meaningful check.
                    assert!((ad - fd).abs() < 1e-9, "pos {k} comp {c}: ad {ad} fd {fd}");
                    continue;
                }
                let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
                assert!(rel < 1e-4, "pos {k} comp {c}: ad {ad} fd {fd}");
                checked += 1;
            }
        }
        assert!(checked >= 10);
    }

    fn eval_component(agent: &Agent, seg: &Tensor, soc: f64, component: usize) -> f64 {
        let mut g = Graph::new(&agent.store);
        let seg_node = g.constant(seg.clone());
        let ex = agent.extractor().unwrap();
        let out = ex.forward(&mut g, seg_node);
        let l = seg.rows();
        let newest = g.slice_rows(seg_node, l - 1, l);
        let soc_node = g.constant(Tensor::scalar(soc));
        let state = g.concat_cols(&[soc_node, newest, out.feature]);
        let (mean, _) = agent.policy_heads(&mut g, state);
        let u = g.tanh(mean);
        match component {
            0 => {
                let d = g.slice_cols(u, 0, 1);
                let c = g.scale(d, -1.0);
                g.scalar_value(c)
            }
            1 => {
                let d = g.slice_cols(u, 0, 1);
                g.scalar_value(d)
            }
            _ => {
                let bid_cols = g.slice_cols(u, 1, ACTION_DIM);
                let coef = Tensor::column(&[0.5, 0.25, 0.25, 0.25]);
                let coef_node = g.constant(coef);
                let weighted = g.matmul(bid_cols, coef_node);
                let s = g.add_scalar(weighted, 0.5 + 0.75);
                g.scalar_value(s)
            }
        }
    }

    #[test]
    fn zero_policy_weights_zero_gradients() {
        let mut agent = tiny_agent(23);
        for i in 0..3 {
            for part in ["w", "b"] {
                if let Some(id) = agent.store.id(&format!("policy/l{i}/{part}")) {
                    let shape = agent.store.value(id).shape();
                    agent.store.set_value(id, Tensor::zeros(shape.0, shape.1));
                }
            }
        }
        let ep = episode(29);
        let grads = component_input_gradients(&agent, &ep, 10, 0.5).unwrap();
        for c in 0..3 {
            assert!(grads.per_position[c].iter().all(|&g| g == 0.0));
        }
    }
}
