use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::battery::{BatteryConfig, BidAction};
use crate::data::{Episode, Normalizer, N_MARKETS};
use crate::env::{
    assemble_state_vec, normalized_segment, EnvConfig, EnvState, FeatureSource, MarketEnv,
    StepOutcome,
};
use crate::error::{Error, Result};
use crate::extractor::{AttentionExtractor, ExtractorConfig};
use crate::graph::{stable_softplus, Backprop, Graph, NodeId};
use crate::nn::Mlp;
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const ACTION_DIM: usize = 5;
const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const LN_2PI: f64 = 1.8378770664093453;
const LN_2: f64 = std::f64::consts::LN_2;

/// Soft actor-critic hyperparameters. `use_attention = false` drops the
/// temporal extractor entirely (the plain-MLP ablation): the feature slots of
/// the state are zeroed and no extractor parameters exist.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub tau_psi: f64,
    pub beta_l: f64,
    pub lr_pi: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    /// Learning rate of the shared temporal extractor. It receives gradient
    /// from both the Bellman residual and the policy objective; a rate well
    /// below the head rates keeps the shared representation from churning
    /// faster than the policy can track.
    pub lr_ext: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub warmup_transitions: usize,
    pub use_attention: bool,
    pub hidden_dim: usize,
    pub twin_q: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            alpha: 0.2,
            tau_psi: 0.01,
            beta_l: 10.0,
            lr_pi: 3e-4,
            lr_v: 3e-4,
            lr_q: 3e-4,
            lr_ext: 3e-5,
            buffer_capacity: 1_000_000,
            batch_size: 256,
            warmup_transitions: 1000,
            use_attention: true,
            hidden_dim: 512,
            twin_q: false,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in [0,1]".into()));
        }
        if !(self.tau_psi > 0.0 && self.tau_psi < 1.0) {
            return Err(Error::Config("tau_psi must be in (0,1)".into()));
        }
        if self.lr_pi <= 0.0 || self.lr_v <= 0.0 || self.lr_q <= 0.0 || self.lr_ext <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("batch and buffer sizes must be positive".into()));
        }
        Ok(())
    }
}

fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut eps = Tensor::zeros(n, ACTION_DIM);
    for i in 0..n {
        for j in 0..ACTION_DIM {
            eps.set(i, j, rng.sample(StandardNormal));
        }
    }
    eps
}

/// Map the tanh-squashed latent to a market bid. One latent dimension picks
/// the direction (ties discharge); the rest scale into their bid ranges and
/// are clamped to the caps rather than rejected.
pub fn decode_action(u: &[f64; ACTION_DIM], bat: &BatteryConfig) -> BidAction {
    let v_dch = u[0] >= 0.0;
    let cap = bat.fcas_fraction_cap();
    let frac = |x: f64| (x + 1.0) / 2.0;
    BidAction {
        v_dch,
        v_ch: !v_dch,
        a_spot: frac(u[1]).clamp(0.0, 1.0),
        a_fast: (frac(u[2]) * cap).clamp(0.0, cap),
        a_slow: (frac(u[3]) * cap).clamp(0.0, cap),
        a_delay: (frac(u[4]) * cap).clamp(0.0, cap),
    }
}

/// Over-commitment loss on the decoded bid fractions: the bid sum when it
/// exceeds 1, else zero (strict inequality).
pub fn ancillary_loss_value(u: &[f64; ACTION_DIM], bat: &BatteryConfig) -> f64 {
    let a = decode_action(u, bat);
    let sum = a.bid_sum();
    if sum > 1.0 {
        sum
    } else {
        0.0
    }
}

/// Squashed-Gaussian sample and its exact log density (tanh change of
/// variables included). `eps` are standard-normal draws; gradients of the
/// graph twin of this function flow through mean and log_std.
pub fn sample_squashed(mean: &[f64], log_std: &[f64], eps: &[f64]) -> (Vec<f64>, f64) {
    let mut u = Vec::with_capacity(mean.len());
    let mut logp = 0.0;
    for i in 0..mean.len() {
        let std = log_std[i].exp();
        let z = mean[i] + std * eps[i];
        u.push(z.tanh());
        // log N(z; mean, std) with z reparameterized, plus -log(1 - tanh^2 z)
        logp += -log_std[i] - 0.5 * LN_2PI - 0.5 * eps[i] * eps[i];
        logp += 2.0 * z + 2.0 * stable_softplus(-2.0 * z) - 2.0 * LN_2;
    }
    (u, logp)
}

/// Log density of an arbitrary squashed action under (mean, log_std).
pub fn squashed_logprob(mean: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    let mut logp = 0.0;
    for i in 0..mean.len() {
        let z = u[i].atanh();
        let std = log_std[i].exp();
        let d = (z - mean[i]) / std;
        logp += -log_std[i] - 0.5 * LN_2PI - 0.5 * d * d;
        logp += 2.0 * z + 2.0 * stable_softplus(-2.0 * z) - 2.0 * LN_2;
    }
    logp
}

/// One stored interaction. States are reconstructed from the episode window
/// on demand so gradient flow reaches the shared extractor on replay.
#[derive(Debug, Clone)]
pub struct Transition {
    pub episode: Arc<Episode>,
    pub t: usize,
    pub soc: f64,
    pub next_soc: f64,
    pub u: [f64; ACTION_DIM],
    pub reward: f64,
    pub done: bool,
}

/// Uniform-replay ring buffer.
#[derive(Debug, Default)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    write: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: Vec::new(),
            capacity,
            write: 0,
        }
    }

    pub fn push(&mut self, tr: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(tr);
        } else {
            self.items[self.write] = tr;
        }
        self.write = (self.write + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Transition {
        &self.items[idx]
    }

    /// Uniform sample without replacement within the batch.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, batch: usize) -> Vec<usize> {
        let n = self.items.len();
        index_sample(rng, n, batch.min(n)).into_vec()
    }
}

/// Per-episode training statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub episode: usize,
    pub shaped_return: f64,
    pub cash: f64,
    pub violations: usize,
    pub loss_pi: f64,
    pub loss_q: f64,
    pub loss_v: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<TrainingLogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self, manifest_hash: Option<&str>) -> String {
        let mut out = String::new();
        if let Some(h) = manifest_hash {
            out.push_str(&format!("# manifest={h}\n"));
        }
        out.push_str("episode,return,cash,violations,loss_pi,loss_q,loss_v\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.episode, r.shaped_return, r.cash, r.violations, r.loss_pi, r.loss_q, r.loss_v
            ));
        }
        out
    }
}

/// Feature slice provider backed by the agent's extractor (or zeros).
pub struct AgentFeatures<'a> {
    store: &'a ParamStore,
    extractor: Option<&'a AttentionExtractor>,
    dim: usize,
}

impl FeatureSource for AgentFeatures<'_> {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn seg_len(&self) -> usize {
        self.extractor.map_or(1, |e| e.config().seg_len)
    }

    fn features(&self, seg: &Tensor) -> Vec<f64> {
        match self.extractor {
            Some(e) => e.features(self.store, seg),
            None => vec![0.0; self.dim],
        }
    }
}

/// Soft actor-critic agent: squashed-Gaussian policy, Q and state-value
/// critics with a slow-moving target value net, and the shared temporal
/// extractor trained through the policy and Q losses.
pub struct Agent {
    pub store: ParamStore,
    pub sac: SacConfig,
    pub extractor_cfg: ExtractorConfig,
    extractor: Option<AttentionExtractor>,
    policy: Mlp,
    q1: Mlp,
    q2: Option<Mlp>,
    value: Mlp,
    target_value: Mlp,
    policy_ids: Vec<ParamId>,
    q_ids: Vec<ParamId>,
    value_ids: Vec<ParamId>,
    target_ids: Vec<ParamId>,
    ext_ids: Vec<ParamId>,
    normalizer: Normalizer,
    /// Reserve bid cap as a fraction of rated power; fixes the decode map
    /// the ancillary loss differentiates through.
    fcas_cap: f64,
    rng: ChaCha8Rng,
    pub buffer: ReplayBuffer,
    total_steps: u64,
}

impl Agent {
    pub fn new(
        sac: SacConfig,
        extractor_cfg: ExtractorConfig,
        battery: &BatteryConfig,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        sac.validate()?;
        extractor_cfg.validate()?;
        battery.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let feature_dim = extractor_cfg.model_dim;
        let state_dim = 1 + N_MARKETS + feature_dim;
        let h = sac.hidden_dim;

        let extractor = if sac.use_attention {
            Some(AttentionExtractor::new(
                &mut store,
                &mut rng,
                extractor_cfg.clone(),
            )?)
        } else {
            None
        };
        let policy = Mlp::new(&mut store, &mut rng, "policy", &[state_dim, h, h, 2 * ACTION_DIM])?;
        let q1 = Mlp::new(&mut store, &mut rng, "q1", &[state_dim + ACTION_DIM, h, h, 1])?;
        let q2 = if sac.twin_q {
            Some(Mlp::new(&mut store, &mut rng, "q2", &[state_dim + ACTION_DIM, h, h, 1])?)
        } else {
            None
        };
        let value = Mlp::new(&mut store, &mut rng, "value", &[state_dim, h, h, 1])?;
        let target_value = Mlp::clone_as_buffers(&mut store, "target_value", &value)?;

        store.register_buffer("norm/mean", Tensor::row(&normalizer.mean))?;
        store.register_buffer("norm/std", Tensor::row(&normalizer.std))?;

        let policy_ids = policy.ids();
        let mut q_ids = q1.ids();
        if let Some(q2) = &q2 {
            q_ids.extend(q2.ids());
        }
        let value_ids = value.ids();
        let target_ids = target_value.ids();
        let ext_ids = extractor.as_ref().map_or(Vec::new(), |e| e.param_ids());

        let buffer = ReplayBuffer::new(sac.buffer_capacity);
        Ok(Agent {
            store,
            sac,
            extractor_cfg,
            extractor,
            policy,
            q1,
            q2,
            value,
            target_value,
            policy_ids,
            q_ids,
            value_ids,
            target_ids,
            ext_ids,
            normalizer,
            fcas_cap: battery.fcas_fraction_cap(),
            rng,
            buffer,
            total_steps: 0,
        })
    }

    pub fn state_dim(&self) -> usize {
        1 + N_MARKETS + self.extractor_cfg.model_dim
    }

    pub fn fcas_cap(&self) -> f64 {
        self.fcas_cap
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn extractor(&self) -> Option<&AttentionExtractor> {
        self.extractor.as_ref()
    }

    pub fn feature_source(&self) -> AgentFeatures<'_> {
        AgentFeatures {
            store: &self.store,
            extractor: self.extractor.as_ref(),
            dim: self.extractor_cfg.model_dim,
        }
    }

    pub fn state_vec(&self, s: &EnvState) -> Vec<f64> {
        assemble_state_vec(s.soc_prev, &s.price_prev, &s.feature_prev, &self.normalizer)
    }

    /// Policy heads over a batch of states: (mean, clamped log_std).
    pub fn policy_heads(&self, g: &mut Graph, states: NodeId) -> (NodeId, NodeId) {
        let out = self.policy.forward(g, states);
        let mean = g.slice_cols(out, 0, ACTION_DIM);
        let raw = g.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM);
        let log_std = g.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    pub fn q1_forward(&self, g: &mut Graph, state_action: NodeId) -> NodeId {
        self.q1.forward(g, state_action)
    }

    fn policy_heads_values(&self, state: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(&self.store);
        let s = g.constant(Tensor::row(state));
        let (mean, log_std) = self.policy_heads(&mut g, s);
        (
            g.value(mean).data().to_vec(),
            g.value(log_std).data().to_vec(),
        )
    }

    /// Stochastic draw (with exact log-prob) or the deterministic tanh(mean).
    pub fn sample_action(
        &mut self,
        state: &[f64],
        deterministic: bool,
    ) -> ([f64; ACTION_DIM], Option<f64>) {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let out = self.sample_action_with(&mut rng, state, deterministic);
        self.rng = rng;
        out
    }

    fn sample_action_with(
        &self,
        rng: &mut ChaCha8Rng,
        state: &[f64],
        deterministic: bool,
    ) -> ([f64; ACTION_DIM], Option<f64>) {
        let (mean, log_std) = self.policy_heads_values(state);
        if deterministic {
            let mut u = [0.0; ACTION_DIM];
            for (ui, m) in u.iter_mut().zip(&mean) {
                *ui = m.tanh();
            }
            (u, None)
        } else {
            let eps: Vec<f64> = (0..ACTION_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let (u, logp) = sample_squashed(&mean, &log_std, &eps);
            let mut arr = [0.0; ACTION_DIM];
            arr.copy_from_slice(&u);
            (arr, Some(logp))
        }
    }

    pub fn deterministic_action(&self, state: &[f64]) -> [f64; ACTION_DIM] {
        let (mean, _) = self.policy_heads_values(state);
        let mut u = [0.0; ACTION_DIM];
        for (ui, m) in u.iter_mut().zip(&mean) {
            *ui = m.tanh();
        }
        u
    }

    /// Q(s, u) for probe use.
    pub fn q_value(&self, state: &[f64], u: &[f64; ACTION_DIM]) -> f64 {
        let mut g = Graph::new(&self.store);
        let mut row = state.to_vec();
        row.extend_from_slice(u);
        let sa = g.constant(Tensor::row(&row));
        let q = self.q1.forward(&mut g, sa);
        g.scalar_value(q)
    }

    fn transition_state_parts(&self, tr: &Transition, next: bool) -> (f64, usize) {
        if next {
            (tr.next_soc, tr.t + 1)
        } else {
            (tr.soc, tr.t)
        }
    }

    /// No-grad state vector for a stored transition.
    fn state_values(&self, tr: &Transition, next: bool) -> Vec<f64> {
        let (soc, t) = self.transition_state_parts(tr, next);
        let price = tr.episode.price_before(t);
        let features = match &self.extractor {
            Some(e) => {
                let seg = normalized_segment(&tr.episode, t, e.config().seg_len, &self.normalizer);
                e.features(&self.store, &seg)
            }
            None => vec![0.0; self.extractor_cfg.model_dim],
        };
        assemble_state_vec(soc, &price, &features, &self.normalizer)
    }

    /// Graph state batch with gradient flow into the shared extractor.
    fn state_batch_node(&self, g: &mut Graph, batch: &[&Transition], next: bool) -> NodeId {
        let mut rows = Vec::with_capacity(batch.len());
        for tr in batch {
            let (soc, t) = self.transition_state_parts(tr, next);
            let price = tr.episode.price_before(t);
            let mut head = Vec::with_capacity(1 + N_MARKETS);
            head.push(soc);
            head.extend_from_slice(&self.normalizer.normalize(&price));
            let head_node = g.constant(Tensor::row(&head));
            let row = match &self.extractor {
                Some(e) => {
                    let seg =
                        normalized_segment(&tr.episode, t, e.config().seg_len, &self.normalizer);
                    let seg_node = g.constant(seg);
                    let out = e.forward(g, seg_node);
                    g.concat_cols(&[head_node, out.feature])
                }
                None => {
                    let zeros = g.constant(Tensor::zeros(1, self.extractor_cfg.model_dim));
                    g.concat_cols(&[head_node, zeros])
                }
            };
            rows.push(row);
        }
        g.concat_rows(&rows)
    }

    fn value_forward_values(&self, net: &Mlp, input: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(&self.store);
        let x = g.constant(input.clone());
        let y = net.forward(&mut g, x);
        g.value(y).data().to_vec()
    }

    /// Bellman targets r + gamma * (1 - done) * V_target(s'); these are the
    /// stop-gradient side of the Q residual.
    pub fn q_targets(&self, indices: &[usize]) -> Tensor {
        let mut targets = Tensor::zeros(indices.len(), 1);
        for (i, &idx) in indices.iter().enumerate() {
            let tr = self.buffer.get(idx);
            let nv = self.state_values(tr, true);
            let v = self.value_forward_values(&self.target_value, &Tensor::row(&nv))[0];
            let q_hat = tr.reward + self.sac.gamma * if tr.done { 0.0 } else { 1.0 } * v;
            targets.set(i, 0, q_hat);
        }
        targets
    }

    /// Q residual against fixed targets: loss value plus the backward pass,
    /// with no parameter mutation.
    pub fn q_loss_with_targets(&self, indices: &[usize], targets: &Tensor) -> (f64, Backprop) {
        let batch: Vec<&Transition> = indices.iter().map(|&i| self.buffer.get(i)).collect();
        let n = batch.len();
        assert_eq!(targets.shape(), (n, 1), "q target shape");

        let mut u_mat = Tensor::zeros(n, ACTION_DIM);
        for (i, tr) in batch.iter().enumerate() {
            for (j, v) in tr.u.iter().enumerate() {
                u_mat.set(i, j, *v);
            }
        }

        let mut g = Graph::new(&self.store);
        let states = self.state_batch_node(&mut g, &batch, false);
        let u_node = g.constant(u_mat);
        let sa = g.concat_cols(&[states, u_node]);
        let target_node = g.constant(targets.clone());

        let q1 = self.q1.forward(&mut g, sa);
        let d1 = g.sub(q1, target_node);
        let sq1 = g.mul_elem(d1, d1);
        let mut loss = g.mean_all(sq1);
        if let Some(q2net) = &self.q2 {
            let q2 = q2net.forward(&mut g, sa);
            let d2 = g.sub(q2, target_node);
            let sq2 = g.mul_elem(d2, d2);
            let l2 = g.mean_all(sq2);
            loss = g.add(loss, l2);
        }
        let loss_node = g.scale(loss, 0.5);
        (g.scalar_value(loss_node), g.backward(loss_node))
    }

    /// Bellman residual of the Q critic(s) over a replay batch.
    pub fn q_loss(&self, indices: &[usize]) -> (f64, Backprop) {
        let targets = self.q_targets(indices);
        self.q_loss_with_targets(indices, &targets)
    }

    /// Bellman residual on the Q critic(s); one Adam step on the Q parameters
    /// and the shared extractor.
    pub fn update_q(&mut self, indices: &[usize]) -> Result<f64> {
        let (loss_val, bp) = self.q_loss(indices);
        self.store.accumulate(&bp);
        let ids = self.q_ids.clone();
        self.store.adam_step(&ids, self.sac.lr_q, 0.9, 0.999, 1e-8);
        let ext = self.ext_ids.clone();
        self.store.adam_step(&ext, self.sac.lr_ext, 0.9, 0.999, 1e-8);
        self.store.zero_grads();
        Ok(loss_val)
    }

    /// Fit V toward Q(s, u~) - alpha * log pi(u~|s) with fresh policy draws;
    /// one Adam step on the value parameters only.
    pub fn update_value(&mut self, indices: &[usize]) -> Result<f64> {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let out = self.update_value_with(&mut rng, indices);
        self.rng = rng;
        out
    }

    /// No-grad state matrix for a batch of stored transitions.
    pub fn states_matrix(&self, indices: &[usize], next: bool) -> Tensor {
        let mut states = Tensor::zeros(indices.len(), self.state_dim());
        for (i, &idx) in indices.iter().enumerate() {
            let sv = self.state_values(self.buffer.get(idx), next);
            for (j, v) in sv.iter().enumerate() {
                states.set(i, j, *v);
            }
        }
        states
    }

    /// Inputs of the V residual: the state matrix and the stop-gradient
    /// targets Q(s, u~) - alpha log pi(u~|s), with u~ driven by `eps`.
    pub fn value_inputs(&self, indices: &[usize], eps: &Tensor) -> (Tensor, Tensor) {
        let n = indices.len();
        assert_eq!(eps.shape(), (n, ACTION_DIM), "value_loss eps shape");
        let states = self.states_matrix(indices, false);

        let mut v_hat = Tensor::zeros(n, 1);
        for i in 0..n {
            let row = states.row_slice(i).to_vec();
            let (mean, log_std) = self.policy_heads_values(&row);
            let (u, logp) = sample_squashed(&mean, &log_std, eps.row_slice(i));
            let mut sa = row;
            sa.extend_from_slice(&u);
            let sa_t = Tensor::row(&sa);
            let mut q = self.value_forward_values(&self.q1, &sa_t)[0];
            if let Some(q2) = &self.q2 {
                q = q.min(self.value_forward_values(q2, &sa_t)[0]);
            }
            v_hat.set(i, 0, q - self.sac.alpha * logp);
        }
        (states, v_hat)
    }

    /// V residual over fixed inputs; only the value parameters are live.
    pub fn value_loss_with_inputs(&self, states: &Tensor, v_hat: &Tensor) -> (f64, Backprop) {
        let mut g = Graph::new(&self.store);
        let s_node = g.constant(states.clone());
        let target_node = g.constant(v_hat.clone());
        let v = self.value.forward(&mut g, s_node);
        let d = g.sub(v, target_node);
        let sq = g.mul_elem(d, d);
        let m = g.mean_all(sq);
        let loss_node = g.scale(m, 0.5);
        (g.scalar_value(loss_node), g.backward(loss_node))
    }

    /// Squared residual of V against Q(s, u~) - alpha log pi(u~|s), with the
    /// fresh samples u~ driven by the supplied standard-normal draws (one row
    /// of `eps` per batch element). No parameter mutation.
    pub fn value_loss(&self, indices: &[usize], eps: &Tensor) -> (f64, Backprop) {
        let (states, v_hat) = self.value_inputs(indices, eps);
        self.value_loss_with_inputs(&states, &v_hat)
    }

    fn update_value_with(&mut self, rng: &mut ChaCha8Rng, indices: &[usize]) -> Result<f64> {
        let eps = draw_normal(rng, indices.len());
        let (loss_val, bp) = self.value_loss(indices, &eps);
        self.store.accumulate(&bp);
        let ids = self.value_ids.clone();
        self.store.adam_step(&ids, self.sac.lr_v, 0.9, 0.999, 1e-8);
        self.store.zero_grads();
        Ok(loss_val)
    }

    /// KL-style policy objective plus the over-commitment ancillary term; one
    /// Adam step on the policy parameters over fixed extractor features.
    pub fn update_policy(&mut self, indices: &[usize]) -> Result<f64> {
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let out = self.update_policy_with(&mut rng, indices);
        self.rng = rng;
        out
    }

    /// Policy objective against a fixed critic-side state matrix. The live
    /// graph covers the extractor -> policy heads -> action path; the
    /// critic's state input is the supplied detached matrix.
    pub fn policy_loss_with_detached(
        &self,
        indices: &[usize],
        eps: &Tensor,
        detached_states: &Tensor,
    ) -> (f64, Backprop) {
        let batch: Vec<&Transition> = indices.iter().map(|&i| self.buffer.get(i)).collect();
        let n = batch.len();
        assert_eq!(eps.shape(), (n, ACTION_DIM), "policy_loss eps shape");
        assert_eq!(detached_states.shape(), (n, self.state_dim()));

        let mut eps_sq = Tensor::zeros(n, 1);
        for i in 0..n {
            let acc: f64 = eps.row_slice(i).iter().map(|e| e * e).sum();
            eps_sq.set(i, 0, -0.5 * acc);
        }

        let cap = self.fcas_cap;
        let mut g = Graph::new(&self.store);
        let states = self.state_batch_node(&mut g, &batch, false);
        let (mean, log_std) = self.policy_heads(&mut g, states);
        let eps_node = g.constant(eps.clone());
        let std = g.exp(log_std);
        let noise = g.mul_elem(std, eps_node);
        let z = g.add(mean, noise);
        let u = g.tanh(z);

        // log-prob: -sum(log_std) - D/2 ln 2pi - 0.5 sum eps^2
        //           + sum(2z + 2 softplus(-2z) - 2 ln 2)
        let a = g.row_sum(log_std);
        let neg_a = g.scale(a, -1.0);
        let z2 = g.scale(z, 2.0);
        let neg2z = g.scale(z, -2.0);
        let sp = g.softplus(neg2z);
        let sp2 = g.scale(sp, 2.0);
        let corr_terms = g.add(z2, sp2);
        let b = g.row_sum(corr_terms);
        let eps_node2 = g.constant(eps_sq);
        let partial = g.add(neg_a, b);
        let partial2 = g.add(partial, eps_node2);
        let c0 = ACTION_DIM as f64 * (-0.5 * LN_2PI - 2.0 * LN_2);
        let logp = g.add_scalar(partial2, c0);

        // The critic's state input is detached: routing the live feature
        // nodes into it would let this objective drag the shared
        // representation toward wherever the critic over-estimates. The
        // extractor still learns here through the policy-heads path.
        let states_detached = g.constant(detached_states.clone());
        let sa = g.concat_cols(&[states_detached, u]);
        let q = self.q1.forward(&mut g, sa);

        let alpha_logp = g.scale(logp, self.sac.alpha);
        let gap = g.sub(alpha_logp, q);
        let loss_main = g.mean_all(gap);

        // Decoded bid sum: a_spot + three reserve fractions, affine in u.
        let bid_cols = g.slice_cols(u, 1, ACTION_DIM);
        let coef = Tensor::column(&[0.5, 0.5 * cap, 0.5 * cap, 0.5 * cap]);
        let coef_node = g.constant(coef);
        let weighted = g.matmul(bid_cols, coef_node);
        let bid_sum = g.add_scalar(weighted, 0.5 + 1.5 * cap);
        let over = g.gate_gt(bid_sum, 1.0);
        let loss_anc = g.mean_all(over);
        let scaled_anc = g.scale(loss_anc, self.sac.beta_l);

        let loss_node = g.add(loss_main, scaled_anc);
        (g.scalar_value(loss_node), g.backward(loss_node))
    }

    /// Policy objective: mean[alpha log pi(u~|s) - Q(s, u~)] plus the scaled
    /// over-commitment term, reparameterized through the supplied draws.
    /// No parameter mutation.
    pub fn policy_loss(&self, indices: &[usize], eps: &Tensor) -> (f64, Backprop) {
        let detached = self.states_matrix(indices, false);
        self.policy_loss_with_detached(indices, eps, &detached)
    }

    fn update_policy_with(&mut self, rng: &mut ChaCha8Rng, indices: &[usize]) -> Result<f64> {
        let eps = draw_normal(rng, indices.len());
        let (loss_val, bp) = self.policy_loss(indices, &eps);
        self.store.accumulate(&bp);
        let ids = self.policy_ids.clone();
        self.store.adam_step(&ids, self.sac.lr_pi, 0.9, 0.999, 1e-8);
        let ext = self.ext_ids.clone();
        self.store.adam_step(&ext, self.sac.lr_ext, 0.9, 0.999, 1e-8);
        self.store.zero_grads();
        Ok(loss_val)
    }

    /// target <- tau * value + (1 - tau) * target.
    pub fn update_target(&mut self) {
        let dst = self.target_ids.clone();
        let src = self.value_ids.clone();
        self.store.ema_update(&dst, &src, self.sac.tau_psi);
    }

    fn update_step(&mut self, rng: &mut ChaCha8Rng) -> Result<(f64, f64, f64)> {
        let indices = self.buffer.sample_indices(rng, self.sac.batch_size);
        let lq = self.update_q(&indices)?;
        let lv = self.update_value_with(rng, &indices)?;
        let lp = self.update_policy_with(rng, &indices)?;
        self.update_target();
        Ok((lq, lv, lp))
    }

    /// Interaction loop: act, store, update every step once the buffer holds
    /// the warmup transitions. Fully reproducible for a given seed.
    pub fn train(
        &mut self,
        env_cfg: &EnvConfig,
        episodes: &[Arc<Episode>],
        n_episodes: usize,
        initial_soc: f64,
    ) -> Result<TrainingLog> {
        if n_episodes > 0 && episodes.is_empty() {
            return Err(Error::argument("no training episodes supplied"));
        }
        let mut log = TrainingLog::default();
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));

        for ep_i in 0..n_episodes {
            let episode = episodes[ep_i % episodes.len()].clone();
            let mut env = MarketEnv::new(env_cfg.clone(), self.normalizer.clone(), episode.clone())?;
            let mut state = {
                let fs = self.feature_source();
                env.reset(episode.clone(), &fs, initial_soc)?
            };

            let mut row = TrainingLogRow {
                episode: ep_i,
                ..Default::default()
            };
            let mut updates = 0usize;
            loop {
                let state_vec = self.state_vec(&state);
                let (u, _) = self.sample_action_with(&mut rng, &state_vec, false);
                let bid = decode_action(&u, &env_cfg.battery);
                let outcome = {
                    let fs = self.feature_source();
                    env.step(&fs, &bid)?
                };

                self.buffer.push(Transition {
                    episode: episode.clone(),
                    t: state.t,
                    soc: state.soc_prev,
                    next_soc: outcome.next_state.soc_prev,
                    u,
                    reward: outcome.reward,
                    done: outcome.done,
                });
                self.total_steps += 1;

                row.shaped_return += outcome.reward;
                row.cash += outcome.cash_flow;
                row.violations += outcome.violated as usize;

                if self.buffer.len() >= self.sac.warmup_transitions {
                    let (lq, lv, lp) = self.update_step(&mut rng)?;
                    row.loss_q += lq;
                    row.loss_v += lv;
                    row.loss_pi += lp;
                    updates += 1;
                }

                if outcome.done {
                    break;
                }
                state = outcome.next_state;
            }
            if updates > 0 {
                row.loss_q /= updates as f64;
                row.loss_v /= updates as f64;
                row.loss_pi /= updates as f64;
            }
            log.rows.push(row);
        }

        self.rng = rng;
        Ok(log)
    }

    /// Deterministic rollout of the current policy over each episode.
    pub fn evaluate(
        &self,
        env_cfg: &EnvConfig,
        episodes: &[Arc<Episode>],
        initial_soc: f64,
    ) -> Result<Vec<Vec<StepOutcome>>> {
        let mut all = Vec::with_capacity(episodes.len());
        for episode in episodes {
            let mut env =
                MarketEnv::new(env_cfg.clone(), self.normalizer.clone(), episode.clone())?;
            let mut state = {
                let fs = self.feature_source();
                env.reset(episode.clone(), &fs, initial_soc)?
            };
            let mut outcomes = Vec::with_capacity(episode.len());
            loop {
                let state_vec = self.state_vec(&state);
                let u = self.deterministic_action(&state_vec);
                let bid = decode_action(&u, &env_cfg.battery);
                let outcome = {
                    let fs = self.feature_source();
                    env.step(&fs, &bid)?
                };
                let done = outcome.done;
                state = outcome.next_state.clone();
                outcomes.push(outcome);
                if done {
                    break;
                }
            }
            all.push(outcomes);
        }
        Ok(all)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Load parameter values into this agent's architecture; shapes and the
    /// parameter set must match exactly.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let loaded = ParamStore::load(path)?;
        self.store.load_values_from(&loaded)?;
        self.load_normalizer_from_store();
        Ok(())
    }

    /// Re-read the normalization buffers after external store loads.
    pub fn load_normalizer_from_store(&mut self) {
        let mean_id = self.store.id("norm/mean").expect("norm/mean registered");
        let std_id = self.store.id("norm/std").expect("norm/std registered");
        let mut norm = Normalizer::identity();
        norm.mean.copy_from_slice(self.store.value(mean_id).data());
        norm.std.copy_from_slice(self.store.value(std_id).data());
        self.normalizer = norm;
    }
}
