use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::N_MARKETS;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::Linear;
use crate::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Temporal attention extractor dimensions. Defaults follow the reference
/// sizing: 32-step window over 7 markets embedded into 64 dims, 8 heads, two
/// stacked attention blocks, 2048-wide feed-forward stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub seg_len: usize,
    pub in_features: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub ffn_dim: usize,
    /// Attention logits are divided by sqrt(model_dim) as published; this
    /// switches to the conventional sqrt(model_dim / heads).
    pub conventional_scaling: bool,
    /// Optional sinusoidal position signal added after the embedding. Off by
    /// default: order information then enters only through content.
    pub positional_encoding: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            seg_len: 32,
            in_features: N_MARKETS,
            model_dim: 64,
            heads: 8,
            n_blocks: 2,
            ffn_dim: 2048,
            conventional_scaling: false,
            positional_encoding: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seg_len < 1 {
            return Err(Error::Config("seg_len must be >= 1".into()));
        }
        if self.n_blocks < 1 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(
                "model_dim must be a positive multiple of heads".into(),
            ));
        }
        if self.model_dim < 2 {
            return Err(Error::Config("model_dim must be >= 2".into()));
        }
        Ok(())
    }
}

/// History window of prices, oldest row first, shape seg_len x in_features.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSegment(Tensor);

impl TemporalSegment {
    pub fn new(t: Tensor, cfg: &ExtractorConfig) -> Result<Self> {
        if t.shape() != (cfg.seg_len, cfg.in_features) {
            return Err(Error::shape(format!(
                "segment must be {}x{}, got {:?}",
                cfg.seg_len,
                cfg.in_features,
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::argument("segment contains non-finite prices"));
        }
        Ok(TemporalSegment(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// One block-and-head attention matrix (rows are probability distributions).
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub block: usize,
    pub head: usize,
    pub weights: Tensor,
}

struct HeadParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

struct BlockParams {
    heads: Vec<HeadParams>,
    out: Linear,
    ln_gain: ParamId,
    ln_bias: ParamId,
    ffn1: Linear,
    ffn2: Linear,
}

/// Shared feature extractor: embedding, stacked multi-head self-attention
/// with a residual around the attention sublayer (LayerNorm after it, none
/// around the feed-forward stage), and global average pooling down to one
/// model_dim vector.
pub struct AttentionExtractor {
    cfg: ExtractorConfig,
    embed: Linear,
    blocks: Vec<BlockParams>,
    positional: Option<Tensor>,
}

/// Graph handles produced by one extractor forward pass.
pub struct ExtractorForward {
    /// 1 x model_dim pooled feature vector.
    pub feature: NodeId,
    /// (block, head, attention node) in evaluation order.
    pub attention: Vec<(usize, usize, NodeId)>,
}

impl AttentionExtractor {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ExtractorConfig) -> Result<Self> {
        cfg.validate()?;
        let head_dim = cfg.model_dim / cfg.heads;
        let embed = Linear::new(store, rng, "ext/embed", cfg.in_features, cfg.model_dim, true)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                // Query/key/value projections are weight-only.
                let wq = store.register(
                    &format!("ext/b{b}/h{h}/wq"),
                    crate::nn::xavier_uniform(rng, cfg.model_dim, head_dim),
                )?;
                let wk = store.register(
                    &format!("ext/b{b}/h{h}/wk"),
                    crate::nn::xavier_uniform(rng, cfg.model_dim, head_dim),
                )?;
                let wv = store.register(
                    &format!("ext/b{b}/h{h}/wv"),
                    crate::nn::xavier_uniform(rng, cfg.model_dim, head_dim),
                )?;
                heads.push(HeadParams { wq, wk, wv });
            }
            let out = Linear::new(
                store,
                rng,
                &format!("ext/b{b}/out"),
                cfg.model_dim,
                cfg.model_dim,
                true,
            )?;
            let ln_gain = store.register(
                &format!("ext/b{b}/ln/gain"),
                Tensor::filled(1, cfg.model_dim, 1.0),
            )?;
            let ln_bias = store.register(
                &format!("ext/b{b}/ln/bias"),
                Tensor::zeros(1, cfg.model_dim),
            )?;
            let ffn1 = Linear::new(
                store,
                rng,
                &format!("ext/b{b}/ffn1"),
                cfg.model_dim,
                cfg.ffn_dim,
                true,
            )?;
            let ffn2 = Linear::new(
                store,
                rng,
                &format!("ext/b{b}/ffn2"),
                cfg.ffn_dim,
                cfg.model_dim,
                true,
            )?;
            blocks.push(BlockParams {
                heads,
                out,
                ln_gain,
                ln_bias,
                ffn1,
                ffn2,
            });
        }
        let positional = cfg.positional_encoding.then(|| sinusoidal_encoding(&cfg));
        Ok(AttentionExtractor {
            cfg,
            embed,
            blocks,
            positional,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embed.ids();
        for b in &self.blocks {
            for h in &b.heads {
                ids.extend([h.wq, h.wk, h.wv]);
            }
            ids.extend(b.out.ids());
            ids.extend([b.ln_gain, b.ln_bias]);
            ids.extend(b.ffn1.ids());
            ids.extend(b.ffn2.ids());
        }
        ids
    }

    fn attention_scale(&self) -> f64 {
        let denom = if self.cfg.conventional_scaling {
            (self.cfg.model_dim / self.cfg.heads) as f64
        } else {
            self.cfg.model_dim as f64
        };
        1.0 / denom.sqrt()
    }

    /// Forward over an already-inserted seg_len x in_features node.
    pub fn forward(&self, g: &mut Graph, seg: NodeId) -> ExtractorForward {
        let (l, f) = g.value(seg).shape();
        assert_eq!(
            (l, f),
            (self.cfg.seg_len, self.cfg.in_features),
            "segment shape"
        );
        let mut s = self.embed.forward(g, seg);
        debug_assert_eq!(g.value(s).shape(), (l, self.cfg.model_dim));
        if let Some(pe) = &self.positional {
            let pe_node = g.constant(pe.clone());
            s = g.add(s, pe_node);
        }

        let scale = self.attention_scale();
        let mut attention = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            let block_in = s;
            let mut head_outs = Vec::with_capacity(block.heads.len());
            for (hi, head) in block.heads.iter().enumerate() {
                let wq = g.param(head.wq);
                let wk = g.param(head.wk);
                let wv = g.param(head.wv);
                let q = g.matmul(block_in, wq);
                let k = g.matmul(block_in, wk);
                let v = g.matmul(block_in, wv);
                let logits = g.matmul_nt(q, k);
                let scaled = g.scale(logits, scale);
                let att = g.softmax_rows(scaled);
                attention.push((bi, hi, att));
                head_outs.push(g.matmul(att, v));
            }
            let concat = g.concat_cols(&head_outs);
            let mixed = block.out.forward(g, concat);
            let residual = g.add(mixed, block_in);
            let gain = g.param(block.ln_gain);
            let bias = g.param(block.ln_bias);
            let normed = g.layer_norm(residual, gain, bias);
            let h1 = block.ffn1.forward(g, normed);
            let h1 = g.relu(h1);
            s = block.ffn2.forward(g, h1);
            debug_assert_eq!(g.value(s).shape(), (l, self.cfg.model_dim));
        }

        let feature = g.mean_rows(s);
        debug_assert_eq!(g.value(feature).shape(), (1, self.cfg.model_dim));
        ExtractorForward { feature, attention }
    }

    /// Pooled features without keeping the graph around.
    pub fn features(&self, store: &ParamStore, segment: &Tensor) -> Vec<f64> {
        let mut g = Graph::new(store);
        let seg = g.constant(segment.clone());
        let out = self.forward(&mut g, seg);
        g.value(out.feature).data().to_vec()
    }

    /// Features plus the recorded attention matrices.
    pub fn features_with_attention(
        &self,
        store: &ParamStore,
        segment: &Tensor,
    ) -> (Vec<f64>, Vec<AttentionRecord>) {
        let mut g = Graph::new(store);
        let seg = g.constant(segment.clone());
        let out = self.forward(&mut g, seg);
        let records = out
            .attention
            .iter()
            .map(|&(block, head, node)| AttentionRecord {
                block,
                head,
                weights: g.value(node).clone(),
            })
            .collect();
        (g.value(out.feature).data().to_vec(), records)
    }
}

/// `block,head,row,col,weight` dump of recorded attention matrices.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut out = String::from("block,head,row,col,weight\n");
    for rec in records {
        for r in 0..rec.weights.rows() {
            for c in 0..rec.weights.cols() {
                out.push_str(&format!(
                    "{},{},{r},{c},{}\n",
                    rec.block,
                    rec.head,
                    rec.weights.get(r, c)
                ));
            }
        }
    }
    out
}

fn sinusoidal_encoding(cfg: &ExtractorConfig) -> Tensor {
    let (l, d) = (cfg.seg_len, cfg.model_dim);
    let mut pe = Tensor::zeros(l, d);
    for pos in 0..l {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
